//! A small transformer encoder with pluggable normalization.
//!
//! The architecture is deliberately plain — learned embeddings, sinusoidal
//! positions, multi-head attention, a two-layer ReLU FFN, residual blocks in
//! pre- or post-norm arrangement — because the object of study is the norm
//! sites, not the backbone. Every norm site can be layer norm, batch norm, or
//! batch renorm, and the bottom `mixed_norm_count` blocks can swap kinds
//! independently of the rest.
//!
//! Forward passes also serve as measurement probes: they hand back the
//! per-site batch statistics of the step (for the penalty and for
//! training-inference discrepancy tracking) and, on request, the activations
//! entering each block (for conditioning diagnostics).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::norm::{
    BatchNorm, BatchRenorm, BnStepTerms, BrnSchedule, LayerNorm, NormError, NormKind, NormLayer,
    NormMode, SeqMask,
};
use crate::params::{Binder, Param};
use crate::task::EncodedBatch;
use crate::tensor::{lit, Graph, Scalar, Tensor, Var};
use crate::tid::{LayerBatchStats, StatSource};

/// Where normalization sits relative to the residual connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPlacement {
    /// `x + Sublayer(Norm(x))`; a final layer norm caps the stack.
    Pre,
    /// `Norm(x + Sublayer(x))`.
    Post,
}

impl NormPlacement {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pre" => Some(NormPlacement::Pre),
            "post" => Some(NormPlacement::Post),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        }
    }
}

/// Everything needed to build an encoder. `mixed_norm_count` is the number of
/// bottom blocks whose norm sites use `norm_kind`; blocks above it keep layer
/// norm, which makes partial-substitution sweeps one integer.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub norm_kind: NormKind,
    pub placement: NormPlacement,
    pub mixed_norm_count: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub max_len: usize,
    /// EMA weight for running statistics.
    pub momentum: f64,
    /// Variance floor inside every norm.
    pub eps: f64,
    /// Ramp for batch-renorm clipping limits; inert for other kinds.
    pub brn: BrnSchedule,
    /// Drop probability on sublayer outputs; 0 disables and draws no RNG.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.d_model < 2 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} must be >= 2 and divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be >= 1".into());
        }
        if self.mixed_norm_count > self.num_layers {
            return bad(format!(
                "mixed_norm_count {} exceeds num_layers {}",
                self.mixed_norm_count, self.num_layers
            ));
        }
        if self.vocab < 2 || self.num_classes < 2 {
            return bad("vocab and num_classes must be >= 2".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) || !(self.eps > 0.0) {
            return bad("momentum must be in (0, 1] and eps > 0".into());
        }
        Ok(())
    }

    /// Norm kind of block `i` under the mixed-substitution rule.
    fn block_kind(&self, i: usize) -> NormKind {
        if self.norm_kind.has_state() && i < self.mixed_norm_count {
            self.norm_kind
        } else {
            NormKind::Ln
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config invalid: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Norm(#[from] NormError),
}

/// A dense projection with bias.
pub struct Linear<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> Linear<T> {
    /// Scaled-uniform (Glorot) weight, zero bias.
    fn new(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Linear {
            w: Param::new(
                format!("{name}.w"),
                Tensor::from_fn([rows, cols], |_| lit::<T>(rng.gen_range(-a..a))),
            ),
            b: Param::new(format!("{name}.b"), Tensor::zeros([cols])),
        }
    }

    fn forward<'g>(&self, binder: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.matmul(binder.bind(&self.w)) + binder.bind(&self.b)
    }
}

struct Attention<T: Scalar> {
    wq: Linear<T>,
    wk: Linear<T>,
    wv: Linear<T>,
    wo: Linear<T>,
    num_heads: usize,
}

impl<T: Scalar> Attention<T> {
    fn new(name: &str, d: usize, num_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            wq: Linear::new(&format!("{name}.wq"), d, d, rng),
            wk: Linear::new(&format!("{name}.wk"), d, d, rng),
            wv: Linear::new(&format!("{name}.wv"), d, d, rng),
            wo: Linear::new(&format!("{name}.wo"), d, d, rng),
            num_heads,
        }
    }

    /// `x` is `[B, T, d]`; `bias` is the additive `[B, 1, T, T]` key mask.
    fn forward<'g>(
        &self,
        binder: &Binder<'g, T>,
        x: Var<'g, T>,
        bias: Var<'g, T>,
        b: usize,
        t: usize,
    ) -> Var<'g, T> {
        let d = self.wq.w.value.shape()[0];
        let h = self.num_heads;
        let hd = d / h;
        let split = |y: Var<'g, T>| y.reshape(&[b, t, h, hd]).swap_axes(1, 2);
        let q = split(self.wq.forward(binder, x));
        let k = split(self.wk.forward(binder, x));
        let v = split(self.wv.forward(binder, x));
        let scale = lit::<T>(1.0 / (hd as f64).sqrt());
        let scores = q.matmul(k.transpose_last()).scale(scale) + bias;
        let ctx = scores.softmax(3).matmul(v).swap_axes(1, 2).reshape(&[b, t, d]);
        self.wo.forward(binder, ctx)
    }
}

struct EncoderBlock<T: Scalar> {
    attn: Attention<T>,
    norm_attn: NormLayer<T>,
    ffn_in: Linear<T>,
    ffn_out: Linear<T>,
    norm_ffn: NormLayer<T>,
}

/// One full forward evaluation. `bn_terms` lists the batch-statistics sites
/// in depth order (attn site before ffn site per block); `block_inputs` is
/// filled only when activations were requested and then holds the tensor
/// entering each block plus the stack's final output.
pub struct ForwardPass<'g, T: Scalar> {
    /// `[B*T, num_classes]`, rows in batch-major position order.
    pub logits: Var<'g, T>,
    pub bn_terms: Vec<BnStepTerms<'g, T>>,
    pub block_inputs: Vec<Tensor<T>>,
}

pub struct TransformerEncoder<T: Scalar> {
    pub cfg: ModelConfig,
    embed: Param<T>,
    positions: Tensor<T>,
    blocks: Vec<EncoderBlock<T>>,
    final_norm: Option<LayerNorm<T>>,
    head: Linear<T>,
}

impl<T: Scalar> TransformerEncoder<T> {
    /// Builds and initializes a model. Parameter draws depend only on the
    /// seed and the shapes, never on the norm kind, so models that differ
    /// only in normalization start from identical weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let scale = (3.0 / d as f64).sqrt();
        let embed = Param::new(
            "embed",
            Tensor::from_fn([cfg.vocab, d], |_| lit::<T>(rng.gen_range(-scale..scale))),
        );
        let positions = sinusoidal_positions(cfg.max_len, d);
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let prefix = format!("blocks.{i}");
            let attn = Attention::new(&format!("{prefix}.attn"), d, cfg.num_heads, &mut rng);
            let norm_attn = make_norm(&cfg, cfg.block_kind(i), format!("{prefix}.norm_attn"));
            let ffn_in = Linear::new(&format!("{prefix}.ffn_in"), d, cfg.ffn_dim, &mut rng);
            let ffn_out = Linear::new(&format!("{prefix}.ffn_out"), cfg.ffn_dim, d, &mut rng);
            let norm_ffn = make_norm(&cfg, cfg.block_kind(i), format!("{prefix}.norm_ffn"));
            blocks.push(EncoderBlock { attn, norm_attn, ffn_in, ffn_out, norm_ffn });
        }
        let final_norm = match cfg.placement {
            NormPlacement::Pre => Some(LayerNorm::new("final_norm", d, lit::<T>(cfg.eps))),
            NormPlacement::Post => None,
        };
        let head = Linear::new("head", d, cfg.num_classes, &mut rng);
        Ok(TransformerEncoder { cfg, embed, positions, blocks, final_norm, head })
    }

    /// Forward pass without activation capture or dropout.
    pub fn forward<'g>(
        &self,
        binder: &Binder<'g, T>,
        batch: &EncodedBatch,
        mode: NormMode,
    ) -> Result<ForwardPass<'g, T>, ModelError> {
        self.forward_opts(binder, batch, mode, false, None)
    }

    /// Forward pass with optional activation capture and dropout stream.
    pub fn forward_opts<'g>(
        &self,
        binder: &Binder<'g, T>,
        batch: &EncodedBatch,
        mode: NormMode,
        capture_activations: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass<'g, T>, ModelError> {
        let g = binder.graph();
        let (b, t) = (batch.batch, batch.time);
        assert!(t <= self.cfg.max_len, "batch time {} exceeds max_len {}", t, self.cfg.max_len);
        let mask = &batch.mask;

        let embedded = binder
            .bind(&self.embed)
            .gather_rows(&batch.token_ids, &[b, t])
            .scale(lit::<T>((self.cfg.d_model as f64).sqrt()));
        let pos = g.constant(position_slice(&self.positions, t));
        let mut x = embedded + pos;

        let bias = g.constant(attention_bias::<T>(mask, self.causal(batch)));
        let mut bn_terms = Vec::new();
        let mut block_inputs = Vec::new();
        for block in &self.blocks {
            if capture_activations {
                block_inputs.push(x.value());
            }
            x = self.block_forward(binder, block, x, bias, mask, mode, b, t, &mut bn_terms, &mut dropout_rng)?;
        }
        if capture_activations {
            block_inputs.push(x.value());
        }
        if let Some(ln) = &self.final_norm {
            x = ln.forward(binder, x, mask);
        }
        let logits = self
            .head
            .forward(binder, x)
            .reshape(&[b * t, self.cfg.num_classes]);
        Ok(ForwardPass { logits, bn_terms, block_inputs })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward<'g>(
        &self,
        binder: &Binder<'g, T>,
        block: &EncoderBlock<T>,
        x: Var<'g, T>,
        bias: Var<'g, T>,
        mask: &SeqMask,
        mode: NormMode,
        b: usize,
        t: usize,
        bn_terms: &mut Vec<BnStepTerms<'g, T>>,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'g, T>, ModelError> {
        let mut record = |terms: Option<BnStepTerms<'g, T>>| {
            if let Some(terms) = terms {
                bn_terms.push(terms);
            }
        };
        let ffn = |binder: &Binder<'g, T>, y: Var<'g, T>| {
            block.ffn_out.forward(binder, block.ffn_in.forward(binder, y).relu())
        };
        Ok(match self.cfg.placement {
            NormPlacement::Pre => {
                let (n1, t1) = block.norm_attn.forward(binder, x, mask, mode)?;
                record(t1);
                let a = block.attn.forward(binder, n1, bias, b, t);
                let x = x + self.maybe_dropout(binder, a, dropout_rng);
                let (n2, t2) = block.norm_ffn.forward(binder, x, mask, mode)?;
                record(t2);
                let h = ffn(binder, n2);
                x + self.maybe_dropout(binder, h, dropout_rng)
            }
            NormPlacement::Post => {
                let a = block.attn.forward(binder, x, bias, b, t);
                let (x, t1) = block
                    .norm_attn
                    .forward(binder, x + self.maybe_dropout(binder, a, dropout_rng), mask, mode)?;
                record(t1);
                let h = ffn(binder, x);
                let (x, t2) = block
                    .norm_ffn
                    .forward(binder, x + self.maybe_dropout(binder, h, dropout_rng), mask, mode)?;
                record(t2);
                x
            }
        })
    }

    fn maybe_dropout<'g>(
        &self,
        binder: &Binder<'g, T>,
        x: Var<'g, T>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var<'g, T> {
        let p = self.cfg.dropout;
        let Some(rng) = rng.as_deref_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let m = Tensor::from_fn(x.shape(), |_| {
            if rng.gen_range(0.0..1.0) < keep { lit::<T>(1.0 / keep) } else { T::zero() }
        });
        x * binder.graph().constant(m)
    }

    fn causal(&self, batch: &EncodedBatch) -> bool {
        // The dataset decides: next-token tasks must not see the future.
        batch.causal
    }

    /// Batch-statistics sites in depth order (attn before ffn per block).
    pub fn stat_layers(&self) -> Vec<&NormLayer<T>> {
        self.blocks
            .iter()
            .flat_map(|blk| [&blk.norm_attn, &blk.norm_ffn])
            .filter(|n| n.state().is_some())
            .collect()
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&Param<T>)) {
        f(&self.embed);
        for blk in &self.blocks {
            for lin in [&blk.attn.wq, &blk.attn.wk, &blk.attn.wv, &blk.attn.wo] {
                f(&lin.w);
                f(&lin.b);
            }
            blk.norm_attn.visit_params(f);
            f(&blk.ffn_in.w);
            f(&blk.ffn_in.b);
            f(&blk.ffn_out.w);
            f(&blk.ffn_out.b);
            blk.norm_ffn.visit_params(f);
        }
        if let Some(ln) = &self.final_norm {
            f(&ln.gamma);
            f(&ln.beta);
        }
        f(&self.head.w);
        f(&self.head.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Param<T>)) {
        f(&mut self.embed);
        for blk in &mut self.blocks {
            for lin in [&mut blk.attn.wq, &mut blk.attn.wk, &mut blk.attn.wv, &mut blk.attn.wo] {
                f(&mut lin.w);
                f(&mut lin.b);
            }
            blk.norm_attn.visit_params_mut(f);
            f(&mut blk.ffn_in.w);
            f(&mut blk.ffn_in.b);
            f(&mut blk.ffn_out.w);
            f(&mut blk.ffn_out.b);
            blk.norm_ffn.visit_params_mut(f);
        }
        if let Some(ln) = &mut self.final_norm {
            f(&mut ln.gamma);
            f(&mut ln.beta);
        }
        f(&mut self.head.w);
        f(&mut self.head.b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }
}

impl<T: Scalar> StatSource<EncodedBatch> for TransformerEncoder<T> {
    type Error = ModelError;

    fn stat_layer_count(&self) -> usize {
        self.stat_layers().len()
    }

    fn batch_stats(&self, batch: &EncodedBatch) -> Result<Vec<LayerBatchStats>, ModelError> {
        let g: Graph<T> = Graph::new();
        let binder = Binder::new(&g);
        let pass = self.forward(&binder, batch, NormMode::Measure)?;
        Ok(pass
            .bn_terms
            .iter()
            .map(|t| LayerBatchStats {
                mean: t.batch_mean.value().to_f64_vec(),
                var: t.batch_var.value().to_f64_vec(),
            })
            .collect())
    }
}

fn make_norm<T: Scalar>(cfg: &ModelConfig, kind: NormKind, name: String) -> NormLayer<T> {
    let d = cfg.d_model;
    let eps = lit::<T>(cfg.eps);
    match kind {
        NormKind::Ln => NormLayer::Layer(LayerNorm::new(name, d, eps)),
        // The penalty acts at the loss, so the rbn layer itself is plain BN.
        NormKind::Bn | NormKind::Rbn => {
            NormLayer::Batch(BatchNorm::new(name, d, lit::<T>(cfg.momentum), eps))
        }
        NormKind::Brn => NormLayer::Renorm(BatchRenorm::new(
            name,
            d,
            lit::<T>(cfg.momentum),
            eps,
            cfg.brn.clone(),
        )),
    }
}

/// The usual fixed sinusoidal position table, `[max_len, d]`.
fn sinusoidal_positions<T: Scalar>(max_len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn([max_len, d], |idx| {
        let (t, i) = (idx / d, idx % d);
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = t as f64 / rate;
        lit::<T>(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn position_slice<T: Scalar>(positions: &Tensor<T>, t: usize) -> Tensor<T> {
    let d = positions.shape()[1];
    Tensor::new([t, d], positions.data()[..t * d].to_vec())
}

/// Additive attention bias `[B, 1, T, T]`: 0 where key `j` is attendable from
/// query `i`, a large negative number otherwise. Masks padding always and the
/// future when `causal`.
fn attention_bias<T: Scalar>(mask: &SeqMask, causal: bool) -> Tensor<T> {
    let (b, t) = (mask.batch(), mask.time());
    let neg = lit::<T>(-1e9);
    Tensor::from_fn([b, 1, t, t], |idx| {
        let j = idx % t;
        let i = (idx / t) % t;
        let bb = idx / (t * t);
        let ok = mask.is_valid(bb, j) && (!causal || j <= i);
        if ok { T::zero() } else { neg }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::RegularizerConfig;
    use crate::task::{make_task, TaskKind, TaskSpec};
    use crate::tensor::finite_diff_at;

    fn small_cfg(kind: NormKind, placement: NormPlacement) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            ffn_dim: 16,
            norm_kind: kind,
            placement,
            mixed_norm_count: 2,
            vocab: 11,
            num_classes: 11,
            max_len: 6,
            momentum: 0.1,
            eps: 1e-5,
            brn: BrnSchedule::new(5, 10, 3.0, 5.0),
            dropout: 0.0,
        }
    }

    fn small_batch(seed: u64) -> EncodedBatch {
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            min_len: 3,
            max_len: 6,
            vocab: 11,
            train_size: 4,
            valid_size: 2,
        };
        make_task(&spec, seed).unwrap().train.encode(&[0, 1, 2, 3])
    }

    #[test]
    fn output_shape_follows_config() {
        for placement in [NormPlacement::Pre, NormPlacement::Post] {
            for kind in [NormKind::Ln, NormKind::Bn, NormKind::Brn] {
                let model = TransformerEncoder::<f32>::new(small_cfg(kind, placement), 0).unwrap();
                let batch = small_batch(1);
                let g = Graph::new();
                let binder = Binder::new(&g);
                let pass = model.forward(&binder, &batch, NormMode::Measure).unwrap();
                assert_eq!(pass.logits.shape(), &[4 * 6, 11]);
                let want_terms = if kind == NormKind::Ln { 0 } else { 4 };
                assert_eq!(pass.bn_terms.len(), want_terms, "{kind:?}/{placement:?}");
            }
        }
    }

    #[test]
    fn zeroed_sublayers_make_prenorm_blocks_the_identity() {
        let mut model =
            TransformerEncoder::<f64>::new(small_cfg(NormKind::Bn, NormPlacement::Pre), 3).unwrap();
        model.visit_params_mut(&mut |p| {
            let zero = p.name.contains(".attn.wo") || p.name.contains(".ffn_out");
            if zero {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
        });
        let batch = small_batch(2);
        let g = Graph::new();
        let binder = Binder::new(&g);
        let pass =
            model.forward_opts(&binder, &batch, NormMode::Measure, true, None).unwrap();
        let first = &pass.block_inputs[0];
        let last = &pass.block_inputs[pass.block_inputs.len() - 1];
        let max_dev = first
            .data()
            .iter()
            .zip(last.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert_eq!(max_dev, 0.0, "residual path must be exactly preserved");
    }

    #[test]
    fn mixed_norm_count_controls_batch_site_count() {
        for (mixed, want) in [(0usize, 0usize), (1, 2), (2, 4)] {
            let mut cfg = small_cfg(NormKind::Bn, NormPlacement::Pre);
            cfg.mixed_norm_count = mixed;
            let model = TransformerEncoder::<f32>::new(cfg, 0).unwrap();
            assert_eq!(model.stat_layer_count(), want);
        }
        let cfg = small_cfg(NormKind::Ln, NormPlacement::Pre);
        let model = TransformerEncoder::<f32>::new(cfg, 0).unwrap();
        assert_eq!(model.stat_layer_count(), 0, "ln has no batch sites");
    }

    #[test]
    fn init_is_seeded_and_norm_kind_agnostic() {
        let a = TransformerEncoder::<f32>::new(small_cfg(NormKind::Bn, NormPlacement::Pre), 7)
            .unwrap();
        let b = TransformerEncoder::<f32>::new(small_cfg(NormKind::Brn, NormPlacement::Pre), 7)
            .unwrap();
        let c = TransformerEncoder::<f32>::new(small_cfg(NormKind::Bn, NormPlacement::Pre), 8)
            .unwrap();
        let dump = |m: &TransformerEncoder<f32>| {
            let mut v = Vec::new();
            m.visit_params(&mut |p| v.extend_from_slice(p.value.data()));
            v
        };
        assert_eq!(dump(&a), dump(&b), "same seed, different norm kind");
        assert_ne!(dump(&a), dump(&c), "different seeds");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg(NormKind::Bn, NormPlacement::Pre);
        cfg.d_model = 9; // not divisible by 2 heads
        assert!(TransformerEncoder::<f32>::new(cfg, 0).is_err());
        let mut cfg = small_cfg(NormKind::Bn, NormPlacement::Pre);
        cfg.mixed_norm_count = 3;
        assert!(TransformerEncoder::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn measure_mode_stats_do_not_touch_running_state() {
        let model =
            TransformerEncoder::<f32>::new(small_cfg(NormKind::Bn, NormPlacement::Post), 0)
                .unwrap();
        let batch = small_batch(4);
        let before: Vec<Vec<f32>> = model
            .stat_layers()
            .iter()
            .map(|l| l.state().unwrap().borrow().running_mean.clone())
            .collect();
        let _ = model.batch_stats(&batch).unwrap();
        let after: Vec<Vec<f32>> = model
            .stat_layers()
            .iter()
            .map(|l| l.state().unwrap().borrow().running_mean.clone())
            .collect();
        assert_eq!(before, after);
    }

    /// Whole-model gradient check: CE + penalty in measure mode (batch
    /// statistics active, running statistics frozen) against central finite
    /// differences, 64-bit, on a spread of parameter coordinates.
    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut model =
            TransformerEncoder::<f64>::new(small_cfg(NormKind::Bn, NormPlacement::Pre), 11)
                .unwrap();
        let batch = small_batch(5);
        let reg = RegularizerConfig::new(0.7, 0.3);

        // Collect parameter names/shapes once so the closure can rebuild the
        // model's parameters from a flat slice deterministically.
        let mut names = Vec::new();
        model.visit_params(&mut |p| names.push(p.name.clone()));
        let tensors: Vec<Tensor<f64>> = {
            let mut v = Vec::new();
            model.visit_params(&mut |p| v.push(p.value.clone()));
            v
        };

        let model_cell = std::cell::RefCell::new(&mut model);
        let loss = |params: &[Tensor<f64>]| -> f64 {
            let mut m = model_cell.borrow_mut();
            let mut i = 0;
            m.visit_params_mut(&mut |p| {
                p.value = params[i].clone();
                i += 1;
            });
            let g = Graph::new();
            let binder = Binder::new(&g);
            let pass = m.forward(&binder, &batch, NormMode::Measure).unwrap();
            let ce = pass.logits.cross_entropy(&batch.target_ids, &batch.target_weights);
            let total = match crate::norm::rbn_penalty(&g, &pass.bn_terms, &reg) {
                Some(p) => ce + p,
                None => ce,
            };
            total.item()
        };

        // Analytic gradients at the starting point.
        let analytic: Vec<Tensor<f64>> = {
            let m = model_cell.borrow();
            let g = Graph::new();
            let binder = Binder::new(&g);
            let pass = m.forward(&binder, &batch, NormMode::Measure).unwrap();
            let ce = pass.logits.cross_entropy(&batch.target_ids, &batch.target_weights);
            let total = match crate::norm::rbn_penalty(&g, &pass.bn_terms, &reg) {
                Some(p) => ce + p,
                None => ce,
            };
            g.backward(total).unwrap();
            let mut out = Vec::new();
            m.visit_params(&mut |p| {
                out.push(binder.grad_of(p).expect("every parameter should have a gradient"))
            });
            out
        };

        // A spread of coordinates across every parameter tensor.
        let mut coords = Vec::new();
        for (pi, t) in tensors.iter().enumerate() {
            coords.push((pi, 0));
            if t.numel() > 3 {
                coords.push((pi, t.numel() / 2));
            }
        }
        let fd = finite_diff_at(loss, &tensors, &coords, 1e-5).unwrap();
        for (&(pi, ci), fd_g) in coords.iter().zip(&fd) {
            let an = analytic[pi].data()[ci];
            // Structurally zero gradients (e.g. the attention key bias, which
            // softmax shift-invariance cancels) sit at the FD noise floor;
            // compare those absolutely instead of relatively.
            if (an - fd_g).abs() < 1e-7 {
                continue;
            }
            let rel = (an - fd_g).abs() / an.abs().max(fd_g.abs());
            assert!(
                rel < 1e-4,
                "param {} [{}] analytic {an} vs fd {fd_g} (rel {rel:.2e})",
                names[pi],
                ci
            );
        }
    }

    #[test]
    fn causal_tasks_cannot_peek_at_the_future() {
        // Two batches that agree on every position before the last one must
        // produce identical logits at earlier positions under a causal mask.
        let mut cfg = small_cfg(NormKind::Ln, NormPlacement::Pre);
        cfg.vocab = 12;
        cfg.num_classes = 12;
        let model = TransformerEncoder::<f64>::new(cfg, 13).unwrap();
        let t = 6;
        let a = EncodedBatch {
            token_ids: vec![1, 2, 3, 4, 5, 6],
            target_ids: vec![0; t],
            target_weights: vec![1.0; t],
            mask: SeqMask::full(1, t),
            batch: 1,
            time: t,
            causal: true,
        };
        let mut b = a.clone();
        b.token_ids[t - 1] = 9;

        let run = |batch: &EncodedBatch| {
            let g = Graph::new();
            let binder = Binder::new(&g);
            model.forward(&binder, batch, NormMode::Inference).unwrap().logits.value()
        };
        let la = run(&a);
        let lb = run(&b);
        let classes = 12;
        for pos in 0..t - 1 {
            for c in 0..classes {
                assert_eq!(
                    la.data()[pos * classes + c],
                    lb.data()[pos * classes + c],
                    "position {pos} saw the future"
                );
            }
        }
        assert_ne!(
            &la.data()[(t - 1) * classes..],
            &lb.data()[(t - 1) * classes..],
            "the changed position itself must differ"
        );
    }
}
