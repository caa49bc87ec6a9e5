//! Normalization layers over `[batch, time, feature]` activations.
//!
//! Batch normalization pools statistics per feature over every *valid*
//! (unpadded) position of the batch; layer normalization reduces within each
//! token. Both apply a trainable affine (`gamma`, `beta`) and pass padded
//! positions through zeroed.
//!
//! The regularizer pulls each batch-statistics layer's minibatch statistics
//! toward its running (population) statistics:
//!
//! ```text
//! penalty = sum_i  lambda * ||mu_B_i - mu_i||^2  +  nu * ||sigma_B_i - sigma_i||^2
//! ```
//!
//! with the running statistics held as constants — the gradient is stopped
//! there, so the penalty steers activations, not the estimator. Sigma terms
//! compare standard deviations, both computed as `sqrt(var + eps)` so the
//! penalty stays differentiable when a feature's batch variance hits zero.
//!
//! Batch renormalization corrects train-mode statistics toward the running
//! ones with clipped, gradient-free factors `r` and `d`, ramped in after a
//! pure-BN warmup.

use crate::params::{Binder, Param};
use crate::tensor::{lit, Scalar, Tensor, Var};
use std::cell::{Cell, RefCell};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NormError {
    /// Batch statistics need at least two pooled positions.
    #[error("batch statistics need >= 2 valid positions, got {got}")]
    TooFewValid { got: usize },
    /// Inference (or renorm correction) before any statistics exist.
    #[error("`{layer}` has no population statistics yet (no updates and none loaded)")]
    Uninitialized { layer: String },
    /// Statistics came out NaN/inf; refusing to fold them into the EMA.
    #[error("non-finite batch statistics in `{layer}`")]
    NonFiniteStats { layer: String },
    /// The decomposition identity is undefined at zero standard deviation.
    #[error("decomposition check: standard deviations must be positive")]
    NonPositiveStd,
}

/// Which forward path a norm layer takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; nothing is mutated. Used for measurement passes.
    Measure,
    /// Running statistics as fixed constants.
    Inference,
}

/// Validity mask for a padded `[batch, time]` token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqMask {
    batch: usize,
    time: usize,
    valid: Vec<bool>,
}

impl SeqMask {
    /// All positions valid.
    pub fn full(batch: usize, time: usize) -> Self {
        SeqMask { batch, time, valid: vec![true; batch * time] }
    }

    /// Left-aligned sequences of the given lengths, padded to `time`.
    /// Every sequence must have at least one valid position.
    pub fn from_lengths(lengths: &[usize], time: usize) -> Self {
        let mut valid = Vec::with_capacity(lengths.len() * time);
        for &len in lengths {
            assert!(len >= 1, "each sequence needs at least one valid position");
            assert!(len <= time, "length {len} exceeds padded time {time}");
            for t in 0..time {
                valid.push(t < len);
            }
        }
        SeqMask { batch: lengths.len(), time, valid }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        self.valid[b * self.time + t]
    }

    /// Number of valid positions pooled by batch statistics.
    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// 0/1 weights shaped `[batch, time, 1]` for masking feature maps.
    pub fn weights<T: Scalar>(&self) -> Tensor<T> {
        let data = self.valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        Tensor::new([self.batch, self.time, 1], data)
    }

    pub fn flags(&self) -> &[bool] {
        &self.valid
    }
}

/// A feature map together with the mask describing which positions count.
#[derive(Debug, Clone)]
pub struct MaskedBatch<T: Scalar> {
    pub features: Tensor<T>,
    pub mask: SeqMask,
}

impl<T: Scalar> MaskedBatch<T> {
    pub fn new(features: Tensor<T>, mask: SeqMask) -> Self {
        let sh = features.shape();
        assert_eq!(sh.len(), 3, "masked batch features must be [batch, time, feature]");
        assert_eq!(sh[0], mask.batch(), "mask batch mismatch");
        assert_eq!(sh[1], mask.time(), "mask time mismatch");
        MaskedBatch { features, mask }
    }
}

/// Per-feature running statistics of one batch-statistics layer, plus the
/// last batch's statistics for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T: Scalar> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub last_batch_mean: Vec<T>,
    pub last_batch_var: Vec<T>,
    /// EMA factor: `running <- (1 - momentum) * running + momentum * batch`.
    pub momentum: T,
    /// Stabilizer added inside every `sqrt(var + eps)`.
    pub eps: T,
    /// Number of EMA updates applied so far.
    pub update_count: u64,
    loaded: bool,
}

impl<T: Scalar> NormState<T> {
    pub fn new(dim: usize, momentum: T, eps: T) -> Self {
        NormState {
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            last_batch_mean: vec![T::zero(); dim],
            last_batch_var: vec![T::zero(); dim],
            momentum,
            eps,
            update_count: 0,
            loaded: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// One EMA step toward the given batch statistics.
    pub fn ema_update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        debug_assert_eq!(batch_mean.len(), self.dim());
        debug_assert_eq!(batch_var.len(), self.dim());
        let a = self.momentum;
        let keep = T::one() - a;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + a * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = keep * *r + a * b;
        }
        self.update_count += 1;
    }

    /// Installs externally estimated population statistics.
    pub fn load_population(&mut self, mean: &[T], var: &[T]) {
        assert_eq!(mean.len(), self.dim(), "population mean dimension mismatch");
        assert_eq!(var.len(), self.dim(), "population var dimension mismatch");
        self.running_mean.copy_from_slice(mean);
        self.running_var.copy_from_slice(var);
        self.loaded = true;
    }

    /// Whether inference-mode normalization is meaningful yet.
    pub fn initialized(&self) -> bool {
        self.update_count > 0 || self.loaded
    }

    /// `sqrt(running_var + eps)` per feature: the sigma the regularizer and
    /// the renorm corrections compare against.
    pub fn running_std(&self) -> Vec<T> {
        self.running_var.iter().map(|&v| (v + self.eps).sqrt()).collect()
    }
}

/// Batch-statistics handles returned from a train/measure forward, for the
/// regularizer and for discrepancy measurement.
#[derive(Debug)]
pub struct BnStepTerms<'g, T: Scalar> {
    /// Per-feature batch mean, differentiable.
    pub batch_mean: Var<'g, T>,
    /// Per-feature biased batch variance, differentiable.
    pub batch_var: Var<'g, T>,
    /// `sqrt(batch_var + eps)`, differentiable.
    pub batch_std: Var<'g, T>,
    /// Running mean captured before any update this step; a constant.
    pub frozen_mean: Vec<T>,
    /// `sqrt(running_var + eps)` captured before any update; a constant.
    pub frozen_std: Vec<T>,
}

/// Weighted per-feature moments over valid positions.
/// Returns `(mean [d], var [d], std [d])`; all differentiable.
fn masked_feature_stats<'g, T: Scalar>(
    x: Var<'g, T>,
    mask: &SeqMask,
    eps: T,
) -> (Var<'g, T>, Var<'g, T>, Var<'g, T>) {
    let g = x.graph();
    let w = g.constant(mask.weights::<T>());
    let inv_m = T::one() / lit::<T>(mask.count() as f64);
    let mean = (x * w).sum(&[0, 1], false).scale(inv_m);
    let diff = x - mean;
    let var = (diff * diff * w).sum(&[0, 1], false).scale(inv_m);
    let std = var.add_scalar(eps).sqrt();
    (mean, var, std)
}

/// Batch normalization with a trainable affine and EMA population tracking.
pub struct BatchNorm<T: Scalar> {
    pub state: RefCell<NormState<T>>,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    name: String,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: impl Into<String>, dim: usize, momentum: T, eps: T) -> Self {
        let name = name.into();
        BatchNorm {
            state: RefCell::new(NormState::new(dim, momentum, eps)),
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([dim])),
            name,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Normalizes `x` (`[batch, time, feature]`). Train and measure modes
    /// use batch statistics and return [`BnStepTerms`]; train mode also
    /// folds them into the running statistics.
    pub fn forward<'g>(
        &self,
        binder: &Binder<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask,
        mode: NormMode,
    ) -> Result<(Var<'g, T>, Option<BnStepTerms<'g, T>>), NormError> {
        let g = binder.graph();
        let gamma = binder.bind(&self.gamma);
        let beta = binder.bind(&self.beta);
        let w = g.constant(mask.weights::<T>());
        let eps = self.state.borrow().eps;

        match mode {
            NormMode::Train | NormMode::Measure => {
                let m = mask.count();
                if m < 2 {
                    return Err(NormError::TooFewValid { got: m });
                }
                let (mean, var, std) = masked_feature_stats(x, mask, eps);
                let out = ((x - mean) / std * gamma + beta) * w;
                let state = self.state.borrow();
                let terms = BnStepTerms {
                    batch_mean: mean,
                    batch_var: var,
                    batch_std: std,
                    frozen_mean: state.running_mean.clone(),
                    frozen_std: state.running_std(),
                };
                drop(state);
                if mode == NormMode::Train {
                    let mv = mean.value();
                    let vv = var.value();
                    if !mv.all_finite() || !vv.all_finite() {
                        return Err(NormError::NonFiniteStats { layer: self.name.clone() });
                    }
                    let mut state = self.state.borrow_mut();
                    state.last_batch_mean.copy_from_slice(mv.data());
                    state.last_batch_var.copy_from_slice(vv.data());
                    state.ema_update(mv.data(), vv.data());
                }
                Ok((out, Some(terms)))
            }
            NormMode::Inference => {
                let state = self.state.borrow();
                if !state.initialized() {
                    return Err(NormError::Uninitialized { layer: self.name.clone() });
                }
                let rm = g.constant(Tensor::new([state.dim()], state.running_mean.clone()));
                let rs = g.constant(Tensor::new([state.dim()], state.running_std()));
                drop(state);
                let out = ((x - rm) / rs * gamma + beta) * w;
                Ok((out, None))
            }
        }
    }
}

/// Per-token layer normalization; identical in every mode.
pub struct LayerNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: T,
    name: String,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: impl Into<String>, dim: usize, eps: T) -> Self {
        assert!(dim >= 2, "layer norm needs feature dimension >= 2");
        let name = name.into();
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([dim])),
            eps,
            name,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward<'g>(
        &self,
        binder: &Binder<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask,
    ) -> Var<'g, T> {
        let g = binder.graph();
        let gamma = binder.bind(&self.gamma);
        let beta = binder.bind(&self.beta);
        let w = g.constant(mask.weights::<T>());
        let (mean, var) = x.moments(&[2], true);
        let std = var.add_scalar(self.eps).sqrt();
        ((x - mean) / std * gamma + beta) * w
    }
}

/// Ramp schedule for the renorm clipping limits: pure BN for
/// `warmup_steps`, then `r_max: 1 -> r_cap` and `d_max: 0 -> d_cap`
/// linearly over `ramp_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrnSchedule {
    pub warmup_steps: u64,
    pub ramp_steps: u64,
    pub r_cap: f64,
    pub d_cap: f64,
}

impl BrnSchedule {
    pub fn new(warmup_steps: u64, ramp_steps: u64, r_cap: f64, d_cap: f64) -> Self {
        assert!(r_cap >= 1.0, "r limit must be >= 1");
        assert!(d_cap >= 0.0, "d limit must be >= 0");
        BrnSchedule { warmup_steps, ramp_steps: ramp_steps.max(1), r_cap, d_cap }
    }

    /// Effective `(r_max, d_max)` at a 0-based train step.
    pub fn limits(&self, step: u64) -> (f64, f64) {
        if step < self.warmup_steps {
            return (1.0, 0.0);
        }
        let into = (step - self.warmup_steps + 1) as f64;
        let frac = (into / self.ramp_steps as f64).min(1.0);
        (1.0 + (self.r_cap - 1.0) * frac, self.d_cap * frac)
    }
}

/// Batch renormalization: train-mode output is corrected toward the running
/// statistics by `r = clip(sigma_B/sigma, 1/r_max, r_max)` and
/// `d = clip((mu_B - mu)/sigma, -d_max, d_max)`, both held constant in the
/// backward pass.
pub struct BatchRenorm<T: Scalar> {
    pub state: RefCell<NormState<T>>,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub schedule: BrnSchedule,
    steps_seen: Cell<u64>,
    name: String,
}

impl<T: Scalar> BatchRenorm<T> {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        momentum: T,
        eps: T,
        schedule: BrnSchedule,
    ) -> Self {
        let name = name.into();
        BatchRenorm {
            state: RefCell::new(NormState::new(dim, momentum, eps)),
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([dim])),
            schedule,
            steps_seen: Cell::new(0),
            name,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn steps_seen(&self) -> u64 {
        self.steps_seen.get()
    }

    pub fn set_steps_seen(&self, steps: u64) {
        self.steps_seen.set(steps);
    }

    pub fn forward<'g>(
        &self,
        binder: &Binder<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask,
        mode: NormMode,
    ) -> Result<(Var<'g, T>, Option<BnStepTerms<'g, T>>), NormError> {
        let g = binder.graph();
        let gamma = binder.bind(&self.gamma);
        let beta = binder.bind(&self.beta);
        let w = g.constant(mask.weights::<T>());
        let eps = self.state.borrow().eps;

        match mode {
            NormMode::Train | NormMode::Measure => {
                let m = mask.count();
                if m < 2 {
                    return Err(NormError::TooFewValid { got: m });
                }
                let step = self.steps_seen.get();
                let (r_max, d_max) = self.schedule.limits(step);
                let (mean, var, std) = masked_feature_stats(x, mask, eps);
                let xhat = (x - mean) / std;

                let corrected = if r_max <= 1.0 && d_max <= 0.0 {
                    xhat
                } else {
                    let state = self.state.borrow();
                    if !state.initialized() {
                        return Err(NormError::Uninitialized { layer: self.name.clone() });
                    }
                    // r and d are computed from current values and enter the
                    // graph as constants: no gradient flows through them.
                    let bs = std.value();
                    let bm = mean.value();
                    let rstd = state.running_std();
                    let rmean = &state.running_mean;
                    let dim = state.dim();
                    let mut r = Vec::with_capacity(dim);
                    let mut d = Vec::with_capacity(dim);
                    for j in 0..dim {
                        let ratio = bs.data()[j].to_f64() / rstd[j].to_f64();
                        r.push(lit::<T>(ratio.clamp(1.0 / r_max, r_max)));
                        let shift =
                            (bm.data()[j].to_f64() - rmean[j].to_f64()) / rstd[j].to_f64();
                        d.push(lit::<T>(shift.clamp(-d_max, d_max)));
                    }
                    drop(state);
                    let rc = g.constant(Tensor::new([dim], r));
                    let dc = g.constant(Tensor::new([dim], d));
                    xhat * rc + dc
                };
                let out = (corrected * gamma + beta) * w;

                let state = self.state.borrow();
                let terms = BnStepTerms {
                    batch_mean: mean,
                    batch_var: var,
                    batch_std: std,
                    frozen_mean: state.running_mean.clone(),
                    frozen_std: state.running_std(),
                };
                drop(state);
                if mode == NormMode::Train {
                    let mv = mean.value();
                    let vv = var.value();
                    if !mv.all_finite() || !vv.all_finite() {
                        return Err(NormError::NonFiniteStats { layer: self.name.clone() });
                    }
                    let mut state = self.state.borrow_mut();
                    state.last_batch_mean.copy_from_slice(mv.data());
                    state.last_batch_var.copy_from_slice(vv.data());
                    state.ema_update(mv.data(), vv.data());
                    drop(state);
                    self.steps_seen.set(step + 1);
                }
                Ok((out, Some(terms)))
            }
            NormMode::Inference => {
                let state = self.state.borrow();
                if !state.initialized() {
                    return Err(NormError::Uninitialized { layer: self.name.clone() });
                }
                let rm = g.constant(Tensor::new([state.dim()], state.running_mean.clone()));
                let rs = g.constant(Tensor::new([state.dim()], state.running_std()));
                drop(state);
                let out = ((x - rm) / rs * gamma + beta) * w;
                Ok((out, None))
            }
        }
    }
}

/// The norm flavors a model can be built with. `Rbn` is batch normalization
/// plus the statistics penalty at the loss; the layer itself is plain BN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Bn,
    Ln,
    Rbn,
    Brn,
}

impl NormKind {
    pub fn parse(s: &str) -> Option<NormKind> {
        match s {
            "bn" => Some(NormKind::Bn),
            "ln" => Some(NormKind::Ln),
            "rbn" => Some(NormKind::Rbn),
            "brn" => Some(NormKind::Brn),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::Ln => "ln",
            NormKind::Rbn => "rbn",
            NormKind::Brn => "brn",
        }
    }

    /// Whether layers of this kind track batch statistics.
    pub fn has_state(self) -> bool {
        !matches!(self, NormKind::Ln)
    }
}

/// A norm site inside a model: one of the three concrete layers.
pub enum NormLayer<T: Scalar> {
    Batch(BatchNorm<T>),
    Layer(LayerNorm<T>),
    Renorm(BatchRenorm<T>),
}

impl<T: Scalar> NormLayer<T> {
    pub fn forward<'g>(
        &self,
        binder: &Binder<'g, T>,
        x: Var<'g, T>,
        mask: &SeqMask,
        mode: NormMode,
    ) -> Result<(Var<'g, T>, Option<BnStepTerms<'g, T>>), NormError> {
        match self {
            NormLayer::Batch(bn) => bn.forward(binder, x, mask, mode),
            NormLayer::Layer(ln) => Ok((ln.forward(binder, x, mask), None)),
            NormLayer::Renorm(brn) => brn.forward(binder, x, mask, mode),
        }
    }

    pub fn state(&self) -> Option<&RefCell<NormState<T>>> {
        match self {
            NormLayer::Batch(bn) => Some(&bn.state),
            NormLayer::Renorm(brn) => Some(&brn.state),
            NormLayer::Layer(_) => None,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            NormLayer::Batch(bn) => bn.name(),
            NormLayer::Layer(ln) => ln.name(),
            NormLayer::Renorm(brn) => brn.name(),
        }
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&Param<T>)) {
        match self {
            NormLayer::Batch(bn) => {
                f(&bn.gamma);
                f(&bn.beta);
            }
            NormLayer::Layer(ln) => {
                f(&ln.gamma);
                f(&ln.beta);
            }
            NormLayer::Renorm(brn) => {
                f(&brn.gamma);
                f(&brn.beta);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Param<T>)) {
        match self {
            NormLayer::Batch(bn) => {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
            NormLayer::Layer(ln) => {
                f(&mut ln.gamma);
                f(&mut ln.beta);
            }
            NormLayer::Renorm(brn) => {
                f(&mut brn.gamma);
                f(&mut brn.beta);
            }
        }
    }
}

/// Strengths of the statistics penalty; `(0, 0)` disables it entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerConfig {
    /// Weight on the squared mean discrepancy.
    pub lambda: f64,
    /// Weight on the squared standard-deviation discrepancy.
    pub nu: f64,
}

impl RegularizerConfig {
    pub fn new(lambda: f64, nu: f64) -> Self {
        assert!(lambda >= 0.0 && nu >= 0.0, "penalty weights must be nonnegative");
        RegularizerConfig { lambda, nu }
    }

    pub fn off() -> Self {
        RegularizerConfig { lambda: 0.0, nu: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.lambda == 0.0 && self.nu == 0.0
    }
}

/// Builds the statistics penalty over all batch-statistics layers of the
/// current step. Returns `None` (contributing *nothing* to the loss, not a
/// zero node) when the penalty is switched off or there are no such layers,
/// so a zero-weight run is bit-identical to plain BN.
pub fn rbn_penalty<'g, T: Scalar>(
    g: &'g crate::tensor::Graph<T>,
    terms: &[BnStepTerms<'g, T>],
    cfg: &RegularizerConfig,
) -> Option<Var<'g, T>> {
    if cfg.is_zero() || terms.is_empty() {
        return None;
    }
    let mut total: Option<Var<'g, T>> = None;
    let mut add = |p: Var<'g, T>| {
        total = Some(match total {
            Some(t) => t + p,
            None => p,
        });
    };
    for term in terms {
        if cfg.lambda > 0.0 {
            let target = g.constant(Tensor::new([term.frozen_mean.len()], term.frozen_mean.clone()));
            let dm = term.batch_mean - target;
            add((dm * dm).sum_all().scale(lit::<T>(cfg.lambda)));
        }
        if cfg.nu > 0.0 {
            let target = g.constant(Tensor::new([term.frozen_std.len()], term.frozen_std.clone()));
            let ds = term.batch_std - target;
            add((ds * ds).sum_all().scale(lit::<T>(cfg.nu)));
        }
    }
    total
}

/// Checks the exact algebraic bridge between train- and inference-mode
/// normalization, elementwise over the last axis of `x`:
///
/// ```text
/// (x - mu_B)/sigma_B  ==  ((x - mu)/sigma + (mu - mu_B)/sigma) * (sigma/sigma_B)
/// ```
///
/// Returns the maximum absolute residual. All standard deviations must be
/// strictly positive.
pub fn decomposition_check<T: Scalar>(
    x: &Tensor<T>,
    batch_mean: &[T],
    batch_std: &[T],
    pop_mean: &[T],
    pop_std: &[T],
) -> Result<f64, NormError> {
    let d = *x.shape().last().expect("decomposition needs at least rank 1");
    assert_eq!(batch_mean.len(), d, "batch mean length mismatch");
    assert_eq!(batch_std.len(), d, "batch std length mismatch");
    assert_eq!(pop_mean.len(), d, "population mean length mismatch");
    assert_eq!(pop_std.len(), d, "population std length mismatch");
    if batch_std.iter().chain(pop_std).any(|&s| s <= T::zero()) {
        return Err(NormError::NonPositiveStd);
    }
    let mut worst = 0.0f64;
    for (i, &v) in x.data().iter().enumerate() {
        let j = i % d;
        let xv = v.to_f64();
        let (mb, sb) = (batch_mean[j].to_f64(), batch_std[j].to_f64());
        let (mp, sp) = (pop_mean[j].to_f64(), pop_std[j].to_f64());
        let lhs = (xv - mb) / sb;
        let rhs = ((xv - mp) / sp + (mp - mb) / sp) * (sp / sb);
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}
