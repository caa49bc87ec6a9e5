//! Training and evaluation: Adam with an inverse-square-root schedule, the
//! penalized train step, and the two evaluation modes (stored population
//! statistics vs. per-batch statistics at a chosen effective batch size).
//!
//! Everything here is deterministic for a fixed seed: batch order comes from
//! seeded ChaCha streams, and no time- or thread-dependent state enters the
//! math. Two runs of the same config on the same build produce bit-identical
//! parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{ModelError, TransformerEncoder};
use crate::norm::{rbn_penalty, NormMode, RegularizerConfig};
use crate::params::Binder;
use crate::task::{Dataset, EncodedBatch};
use crate::tensor::{lit, Graph, Scalar, Tensor};

/// Optimizer settings. Defaults follow the usual transformer recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { base_lr: 1e-3, warmup_steps: 400, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

/// `lr(t) = base * min(t/warmup, sqrt(warmup/t))` with `t` counted from 1;
/// the two branches meet at `t = warmup`.
pub fn lr_at(cfg: &OptimConfig, t: u64) -> f64 {
    let t = t as f64;
    let w = cfg.warmup_steps.max(1) as f64;
    cfg.base_lr * (t / w).min((w / t).sqrt())
}

/// Adam with bias correction, moments kept in the model's precision.
pub struct Adam<T: Scalar> {
    pub cfg: OptimConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    /// Completed update count; the next update is step `t + 1`.
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &TransformerEncoder<T>, cfg: OptimConfig) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |p| m.push(Tensor::zeros(p.value.shape().to_vec())));
        let v = m.clone();
        Adam { cfg, m, v, t: 0 }
    }

    /// One update over gradients listed in the model's parameter order.
    /// Returns the learning rate that was applied.
    pub fn step(&mut self, model: &mut TransformerEncoder<T>, grads: &[Tensor<T>]) -> f64 {
        self.t += 1;
        let lr = lr_at(&self.cfg, self.t);
        let lr_t = lit::<T>(lr);
        let b1 = lit::<T>(self.cfg.beta1);
        let b2 = lit::<T>(self.cfg.beta2);
        let eps = lit::<T>(self.cfg.eps);
        let c1 = lit::<T>(1.0 - self.cfg.beta1.powi(self.t as i32));
        let c2 = lit::<T>(1.0 - self.cfg.beta2.powi(self.t as i32));
        let one = T::one();
        let mut i = 0;
        model.visit_params_mut(&mut |p| {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                w[j] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
            i += 1;
        });
        lr
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    /// Non-finite values anywhere in the step: batch statistics, graph
    /// values, or the final loss. The run is unrecoverable but logs up to
    /// this step are valid.
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Loss components of one step, in measurement precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub penalty: f64,
    pub total: f64,
    pub lr: f64,
}

/// One optimization step: forward in train mode (which folds batch statistics
/// into the running estimates), cross entropy plus the statistics penalty,
/// backward, Adam update, renorm schedule tick.
pub fn train_step<T: Scalar>(
    model: &mut TransformerEncoder<T>,
    opt: &mut Adam<T>,
    reg: &RegularizerConfig,
    batch: &EncodedBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepLosses, TrainError> {
    let step = opt.t + 1;
    let g: Graph<T> = Graph::new();
    let binder = Binder::new(&g);
    let pass = model
        .forward_opts(&binder, batch, NormMode::Train, false, dropout_rng)
        .map_err(|e| match e {
            ModelError::Norm(crate::norm::NormError::NonFiniteStats { layer }) => {
                TrainError::Diverged { step, reason: format!("non-finite statistics in {layer}") }
            }
            other => TrainError::Model(other),
        })?;
    let ce = pass.logits.cross_entropy(&batch.target_ids, &batch.weights_as::<T>());
    let penalty = rbn_penalty(&g, &pass.bn_terms, reg);
    let total = match penalty {
        Some(p) => ce + p,
        None => ce,
    };
    g.backward(total)
        .map_err(|source| TrainError::Diverged { step, reason: source.to_string() })?;

    let mut grads = Vec::new();
    model.visit_params(&mut |p| {
        match binder.grad_of(p) {
            Some(gr) => grads.push(gr),
            // A parameter disconnected from the loss has zero gradient.
            None => grads.push(Tensor::zeros(p.value.shape().to_vec())),
        }
    });
    let losses = StepLosses {
        ce: ce.item().to_f64(),
        penalty: penalty.map(|p| p.item().to_f64()).unwrap_or(0.0),
        total: total.item().to_f64(),
        lr: 0.0,
    };
    if !losses.total.is_finite() {
        return Err(TrainError::Diverged { step, reason: "non-finite loss".into() });
    }
    let lr = opt.step(model, &grads);
    Ok(StepLosses { lr, ..losses })
}

/// How evaluation normalizes batch-statistics layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Stored running statistics; deterministic and batch-size independent.
    Population,
    /// Each evaluation chunk normalized by its own statistics at this size.
    BatchStats { effective_batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Token-weighted mean cross entropy over the dataset.
    pub loss: f64,
    /// Fraction of supervised positions predicted correctly.
    pub accuracy: f64,
    /// Number of supervised positions.
    pub tokens: usize,
}

/// Evaluates the model over the whole dataset in generation order.
/// `eval_batch` sets the chunk size in population mode (it cannot change the
/// result there, only memory use); batch-stats mode uses its own size.
pub fn evaluate<T: Scalar>(
    model: &TransformerEncoder<T>,
    data: &Dataset,
    mode: EvalMode,
    eval_batch: usize,
) -> Result<EvalReport, TrainError> {
    assert!(eval_batch > 0, "evaluation batch size must be positive");
    let (norm_mode, chunk) = match mode {
        EvalMode::Population => (NormMode::Inference, eval_batch),
        EvalMode::BatchStats { effective_batch } => {
            assert!(effective_batch > 0, "effective batch size must be positive");
            (NormMode::Measure, effective_batch)
        }
    };
    let n = data.len();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let batch = data.encode(&indices);
        let g: Graph<T> = Graph::new();
        let binder = Binder::new(&g);
        let pass = model.forward(&binder, &batch, norm_mode)?;
        let ce = pass.logits.cross_entropy(&batch.target_ids, &batch.weights_as::<T>());
        let m = batch.mask.count();
        loss_sum += ce.item().to_f64() * m as f64;
        tokens += m;
        correct += count_correct(&pass.logits.value(), &batch);
        start = end;
    }
    Ok(EvalReport {
        loss: loss_sum / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, batch: &EncodedBatch) -> usize {
    let classes = logits.shape()[1];
    let data = logits.data();
    let mut correct = 0;
    for (row, (&target, &w)) in batch.target_ids.iter().zip(&batch.target_weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let lane = &data[row * classes..(row + 1) * classes];
        let mut best = 0;
        for (c, &v) in lane.iter().enumerate() {
            if v > lane[best] {
                best = c;
            }
        }
        if best == target {
            correct += 1;
        }
    }
    correct
}

/// Refreshes the running statistics of every batch-statistics layer by
/// streaming the dataset through measure-mode forwards for `epochs` passes,
/// leaving every parameter untouched. `epochs = 0` is a no-op.
pub fn refresh_population<T: Scalar>(
    model: &TransformerEncoder<T>,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
) -> Result<(), TrainError> {
    use crate::tid::StatSource;
    assert!(batch_size > 0, "batch size must be positive");
    for _ in 0..epochs {
        let n = data.len();
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let indices: Vec<usize> = (start..end).collect();
            let batch = data.encode(&indices);
            let stats = model.batch_stats(&batch)?;
            for (layer, s) in model.stat_layers().iter().zip(&stats) {
                let mean: Vec<T> = s.mean.iter().map(|&x| lit::<T>(x)).collect();
                let var: Vec<T> = s.var.iter().map(|&x| lit::<T>(x)).collect();
                layer.state().expect("stat layer").borrow_mut().ema_update(&mean, &var);
            }
            start = end;
        }
    }
    Ok(())
}

/// The deterministic batch order for one epoch: a seeded Fisher-Yates
/// shuffle, distinct per epoch, reproducible across runs.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5481_0000 + epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
