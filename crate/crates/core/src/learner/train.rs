use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LearnerError, LossMode, Mlp, Sample, TargetScaler, TrainConfig, TrainingSet};
use crate::num::Real;
use crate::rng;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

fn weight<T: Real>(s: &Sample<T>, mode: LossMode) -> T {
    match mode {
        LossMode::Unweighted => T::one(),
        LossMode::Weighted => s.weight,
    }
}

/// Mean over the batch of `w * (f(e) - y)^2`.
pub fn loss<T: Real>(model: &Mlp<T>, batch: &[Sample<T>], mode: LossMode) -> Result<T, LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    let mut total = T::zero();
    for s in batch {
        let r = model.forward(&s.features)? - s.label;
        total += weight(s, mode) * r * r;
    }
    Ok(total / T::from_count(batch.len()))
}

/// Loss and its gradient with respect to every parameter, accumulated in
/// batch order.
pub fn loss_and_grad<T: Real>(
    model: &Mlp<T>,
    batch: &[Sample<T>],
    mode: LossMode,
) -> Result<(T, Mlp<T>), LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    let n = T::from_count(batch.len());
    let mut grads = model.zeros_like();
    let mut total = T::zero();
    for s in batch {
        if s.features.len() != model.input_dim() {
            return Err(LearnerError::Shape(format!(
                "expected {} features, got {}",
                model.input_dim(),
                s.features.len()
            )));
        }
        let trace = model.forward_trace(&s.features);
        let r = trace.acts.last().expect("output layer")[0] - s.label;
        let w = weight(s, mode);
        total += w * r * r;
        model.backward(&trace, T::lit(2.0) * w * r / n, &mut grads);
    }
    Ok((total / n, grads))
}

struct Adam<T> {
    m: Mlp<T>,
    v: Mlp<T>,
    t: i32,
    lr: T,
}

impl<T: Real> Adam<T> {
    fn new(model: &Mlp<T>, lr: f64) -> Self {
        Self { m: model.zeros_like(), v: model.zeros_like(), t: 0, lr: T::lit(lr) }
    }

    fn step(&mut self, model: &mut Mlp<T>, grads: &Mlp<T>) {
        self.t += 1;
        let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(ADAM_EPS));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let params = model.params_mut().zip(self.m.params_mut()).zip(self.v.params_mut()).zip(grads.params());
        for (((p, m), v), g) in params {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats<T = f64> {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Loss over the whole training split after the epoch, in scaled units.
    pub train_loss: T,
    pub val_loss: Option<T>,
}

#[derive(Debug, Clone)]
pub struct Trained<T = f64> {
    pub model: Mlp<T>,
    pub target: TargetScaler<T>,
    pub trace: Vec<EpochStats<T>>,
    pub epochs_run: usize,
    /// Epoch whose parameters were kept when early stopping was active.
    pub best_epoch: Option<usize>,
}

pub fn train<T: Real>(model: Mlp<T>, set: &TrainingSet<T>, cfg: &TrainConfig) -> Result<Trained<T>, LearnerError> {
    train_observed(model, set, cfg, |_, _, _| {})
}

/// Like [`train`], calling `observer` after every epoch with the current
/// parameters and the target scaler.
pub fn train_observed<T, F>(
    mut model: Mlp<T>,
    set: &TrainingSet<T>,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<Trained<T>, LearnerError>
where
    T: Real,
    F: FnMut(&EpochStats<T>, &Mlp<T>, &TargetScaler<T>),
{
    cfg.validate()?;
    if set.is_empty() {
        return Err(LearnerError::EmptyTrainingSet);
    }
    if let Some(bad) = set.rows.iter().find(|r| r.features.len() != model.input_dim()) {
        return Err(LearnerError::Shape(format!(
            "expected {} features, cell {} has {}",
            model.input_dim(),
            bad.cell,
            bad.features.len()
        )));
    }

    let (train_rows, val_rows) = split(set, cfg);
    let labels: Vec<T> = train_rows.iter().map(|r| r.label).collect();
    let target = TargetScaler::fit(&labels, cfg.target_scaling);
    let rescale = |rows: Vec<&Sample<T>>| -> Vec<Sample<T>> {
        rows.into_iter().map(|r| Sample { label: target.scale(r.label), ..r.clone() }).collect()
    };
    let train_rows = rescale(train_rows);
    let val_rows = rescale(val_rows);

    let batch = cfg.batch_size.min(train_rows.len());
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "shuffle", 0);
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(T, usize, Mlp<T>)> = None;
    let mut stale = 0usize;
    let mut scratch = Vec::with_capacity(batch);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(batch) {
            scratch.clear();
            scratch.extend(chunk.iter().map(|&i| train_rows[i].clone()));
            let (l, grads) = loss_and_grad(&model, &scratch, cfg.mode)?;
            if !l.is_finite() {
                return Err(LearnerError::Diverged { epoch });
            }
            adam.step(&mut model, &grads);
        }
        let train_loss = loss(&model, &train_rows, cfg.mode)?;
        if !train_loss.is_finite() || !model.is_finite() {
            return Err(LearnerError::Diverged { epoch });
        }
        let val_loss = if val_rows.is_empty() { None } else { Some(loss(&model, &val_rows, cfg.mode)?) };
        let stats = EpochStats { epoch, train_loss, val_loss };
        observer(&stats, &model, &target);
        trace.push(stats);

        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(LearnerError::Diverged { epoch });
            }
            match &best {
                Some((b, _, _)) if v >= *b => stale += 1,
                _ => {
                    best = Some((v, epoch, model.clone()));
                    stale = 0;
                }
            }
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let epochs_run = trace.len();
    let (model, best_epoch) = match best {
        Some((_, epoch, params)) => (params, Some(epoch)),
        None => (model, None),
    };
    Ok(Trained { model, target, trace, epochs_run, best_epoch })
}

/// Training and validation rows. The held-out rows are a seeded random
/// subset of `round(fraction * n)` rows, kept between 1 and `n - 1`.
fn split<'a, T: Real>(set: &'a TrainingSet<T>, cfg: &TrainConfig) -> (Vec<&'a Sample<T>>, Vec<&'a Sample<T>>) {
    let n = set.len();
    if cfg.validation_fraction <= 0.0 || n < 2 {
        return (set.rows.iter().collect(), Vec::new());
    }
    let n_val = ((cfg.validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(cfg.seed, "split", 0));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut tr: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    tr.sort_unstable();
    (tr.iter().map(|&i| &set.rows[i]).collect(), val.iter().map(|&i| &set.rows[i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck<T = f64> {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_dev: T,
    pub analytic_norm: T,
    pub checked: usize,
}

/// Compares backpropagation with central differences (step 1e-5) on up to
/// `max_params` parameters chosen with `seed`; all of them when the model is
/// small enough.
pub fn gradient_check<T: Real>(
    model: &Mlp<T>,
    batch: &[Sample<T>],
    mode: LossMode,
    max_params: usize,
    seed: u64,
) -> Result<GradCheck<T>, LearnerError> {
    let (_, grads) = loss_and_grad(model, batch, mode)?;
    let analytic: Vec<T> = grads.params().flat_map(|p| p.iter().copied()).collect();
    let analytic_norm = analytic.iter().map(|g| *g * *g).sum::<T>().sqrt();

    let mut picks: Vec<usize> = (0..analytic.len()).collect();
    if picks.len() > max_params {
        picks.shuffle(&mut rng::stream(seed, "gradcheck", 0));
        picks.truncate(max_params);
        picks.sort_unstable();
    }

    let h = T::lit(FD_STEP);
    let floor = T::lit(FD_FLOOR);
    let mut probe = model.clone();
    let mut max_rel_dev = T::zero();
    for &i in &picks {
        let original = get(&probe, i);
        set(&mut probe, i, original + h);
        let up = loss(&probe, batch, mode)?;
        set(&mut probe, i, original - h);
        let down = loss(&probe, batch, mode)?;
        set(&mut probe, i, original);
        let numeric = (up - down) / (h + h);
        let a = analytic[i];
        let dev = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        max_rel_dev = max_rel_dev.max(dev);
    }
    Ok(GradCheck { max_rel_dev, analytic_norm, checked: picks.len() })
}

fn locate<T: Real>(model: &Mlp<T>, mut i: usize) -> (usize, bool, usize) {
    for (l, layer) in model.layers.iter().enumerate() {
        if i < layer.weights.len() {
            return (l, true, i);
        }
        i -= layer.weights.len();
        if i < layer.biases.len() {
            return (l, false, i);
        }
        i -= layer.biases.len();
    }
    panic!("parameter index out of range")
}

fn get<T: Real>(model: &Mlp<T>, i: usize) -> T {
    let (l, w, j) = locate(model, i);
    if w { model.layers[l].weights[j] } else { model.layers[l].biases[j] }
}

fn set<T: Real>(model: &mut Mlp<T>, i: usize, v: T) {
    let (l, w, j) = locate(model, i);
    if w {
        model.layers[l].weights[j] = v;
    } else {
        model.layers[l].biases[j] = v;
    }
}
