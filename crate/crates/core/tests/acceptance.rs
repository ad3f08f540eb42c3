//! Acceptance criteria 1 to 12 on the seeded synthetic lab. Prints one line
//! per criterion; tolerances live in `popest::acceptance::tol`.

use popest::acceptance::{self, CRITERIA};

const SEED: u64 = 42;

#[test]
fn acceptance_criteria() {
    let mut suite = acceptance::Suite::new(SEED);
    let mut failed = Vec::new();
    for &(id, name) in CRITERIA.iter() {
        match suite.check(id) {
            Ok(outcome) => {
                println!("{outcome}");
                if !outcome.passed {
                    failed.push(id);
                }
            }
            Err(e) => {
                println!("[FAIL] {id:>2} {name}: error: {e}");
                failed.push(id);
            }
        }
    }
    println!("{} of {} criteria passed", CRITERIA.len() - failed.len(), CRITERIA.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
