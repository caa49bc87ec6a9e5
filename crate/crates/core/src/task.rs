//! Synthetic sequence tasks: copy, prefix parity, and a small Markov-chain
//! character LM. All three are generated, so datasets are reproducible from a
//! seed and there is nothing to download.
//!
//! Train and validation splits draw from disjoint ChaCha streams of the same
//! seed, so regenerating either split never disturbs the other.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::norm::SeqMask;

/// Which synthetic task to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Predict the input token at every position.
    Copy,
    /// Predict the parity of the prefix sum at every position (binary vocab).
    Parity,
    /// Predict the next token of a Markov-chain corpus (causal attention).
    CharLm,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(TaskKind::Copy),
            "parity" => Some(TaskKind::Parity),
            "char-lm" => Some(TaskKind::CharLm),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Parity => "parity",
            TaskKind::CharLm => "char-lm",
        }
    }
}

/// Generation recipe for one task: kind, length distribution (uniform on
/// `min_len..=max_len`), vocabulary, and split sizes in sequences.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub train_size: usize,
    pub valid_size: usize,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task spec invalid: {0}")]
    InvalidSpec(String),
}

/// One split: ragged token/target rows plus enough metadata to pad batches.
#[derive(Debug, Clone)]
pub struct Dataset {
    tokens: Vec<Vec<usize>>,
    targets: Vec<Vec<usize>>,
    /// Padding width for encoded batches (= spec max_len).
    pub max_len: usize,
    /// Input vocabulary size (embedding rows).
    pub vocab: usize,
    /// Output class count (= vocab for copy/char-lm, 2 for parity).
    pub num_classes: usize,
    /// Whether attention must be causal for this task to be honest.
    pub causal: bool,
}

/// A padded batch ready for the model: ids and supervision aligned `[B, T]`
/// row-major, with per-position CE weights (0 on padding) and the mask that
/// the normalization layers and attention consume.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub token_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub target_weights: Vec<f64>,
    pub mask: SeqMask,
    pub batch: usize,
    pub time: usize,
    /// Inherited from the dataset: whether attention over this batch must be
    /// causal.
    pub causal: bool,
}

impl EncodedBatch {
    /// Cross-entropy weights in the model's working precision.
    pub fn weights_as<T: crate::tensor::Scalar>(&self) -> Vec<T> {
        self.target_weights.iter().map(|&w| crate::tensor::lit::<T>(w)).collect()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sequence lengths of the selected examples.
    pub fn lengths(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.tokens[i].len()).collect()
    }

    /// Pads the selected examples to `max_len` and encodes them. Padding uses
    /// token id 0; it never leaks because mask and CE weights zero it out.
    pub fn encode(&self, indices: &[usize]) -> EncodedBatch {
        assert!(!indices.is_empty(), "empty batch");
        let b = indices.len();
        let t = self.max_len;
        let mut token_ids = vec![0usize; b * t];
        let mut target_ids = vec![0usize; b * t];
        let mut target_weights = vec![0.0f64; b * t];
        let mut lengths = Vec::with_capacity(b);
        for (row, &i) in indices.iter().enumerate() {
            let toks = &self.tokens[i];
            let tgts = &self.targets[i];
            lengths.push(toks.len());
            for (j, (&tok, &tgt)) in toks.iter().zip(tgts).enumerate() {
                token_ids[row * t + j] = tok;
                target_ids[row * t + j] = tgt;
                target_weights[row * t + j] = 1.0;
            }
        }
        EncodedBatch {
            token_ids,
            target_ids,
            target_weights,
            mask: SeqMask::from_lengths(&lengths, t),
            batch: b,
            time: t,
            causal: self.causal,
        }
    }

    /// Every example in generation order as one batch.
    pub fn encode_all(&self) -> EncodedBatch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.encode(&all)
    }

    /// The same examples in a different order.
    pub fn permuted(&self, order: &[usize]) -> Dataset {
        assert_eq!(order.len(), self.len(), "permutation length mismatch");
        Dataset {
            tokens: order.iter().map(|&i| self.tokens[i].clone()).collect(),
            targets: order.iter().map(|&i| self.targets[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Both splits of a generated task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub valid: Dataset,
}

/// A first-order Markov chain over `vocab` symbols with Dirichlet-sampled
/// rows. Public so tests can compute its stationary distribution themselves.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    /// Row-major `vocab x vocab`; row v sums to 1.
    pub transitions: Vec<f64>,
    pub vocab: usize,
}

impl MarkovChain {
    /// Rows drawn Dirichlet(concentration); smaller concentration means
    /// peakier rows and a more learnable language.
    pub fn random(vocab: usize, concentration: f64, rng: &mut ChaCha8Rng) -> Self {
        let gamma = rand_distr::Gamma::new(concentration, 1.0).expect("gamma shape");
        let mut transitions = vec![0.0f64; vocab * vocab];
        for row in transitions.chunks_mut(vocab) {
            let mut total = 0.0;
            for cell in row.iter_mut() {
                // A tiny floor keeps every transition reachable so the chain
                // is irreducible and the stationary distribution unique.
                let g: f64 = gamma.sample(rng) + 1e-4;
                *cell = g;
                total += g;
            }
            for cell in row.iter_mut() {
                *cell /= total;
            }
        }
        MarkovChain { transitions, vocab }
    }

    /// Samples `len` symbols starting from the uniform distribution.
    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut state = rng.gen_range(0..self.vocab);
        for _ in 0..len {
            out.push(state);
            let row = &self.transitions[state * self.vocab..(state + 1) * self.vocab];
            let u: f64 = rng.gen_range(0.0..1.0);
            let mut acc = 0.0;
            let mut next = self.vocab - 1;
            for (w, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = w;
                    break;
                }
            }
            state = next;
        }
        out
    }
}

// Per-purpose ChaCha streams under one seed keep the splits disjoint and the
// chain shared between them. Streams 1–3 belong to the task generator;
// callers wanting more draws under the same seed should pick higher ids.
const STREAM_CHAIN: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VALID: u64 = 3;

/// A ChaCha generator on a numbered stream of the given seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates both splits of a task. Deterministic in `(spec, seed)`.
pub fn make_task(spec: &TaskSpec, seed: u64) -> Result<TaskData, TaskError> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(TaskError::InvalidSpec(format!(
            "length range {}..={} is empty or starts at zero",
            spec.min_len, spec.max_len
        )));
    }
    if spec.train_size == 0 || spec.valid_size == 0 {
        return Err(TaskError::InvalidSpec("both splits need at least one sequence".into()));
    }
    match spec.kind {
        TaskKind::Copy => {
            if spec.vocab < 2 {
                return Err(TaskError::InvalidSpec("copy needs vocab >= 2".into()));
            }
            let gen = |size, stream| {
                let mut rng = stream_rng(seed, stream);
                let mut tokens = Vec::with_capacity(size);
                let mut targets = Vec::with_capacity(size);
                for _ in 0..size {
                    let len = rng.gen_range(spec.min_len..=spec.max_len);
                    let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab)).collect();
                    targets.push(seq.clone());
                    tokens.push(seq);
                }
                dataset(tokens, targets, spec, spec.vocab, false)
            };
            Ok(TaskData {
                train: gen(spec.train_size, STREAM_TRAIN),
                valid: gen(spec.valid_size, STREAM_VALID),
            })
        }
        TaskKind::Parity => {
            if spec.vocab != 2 {
                return Err(TaskError::InvalidSpec(format!(
                    "parity is over bits; got vocab {}",
                    spec.vocab
                )));
            }
            let gen = |size, stream| {
                let mut rng = stream_rng(seed, stream);
                let mut tokens = Vec::with_capacity(size);
                let mut targets = Vec::with_capacity(size);
                for _ in 0..size {
                    let len = rng.gen_range(spec.min_len..=spec.max_len);
                    let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2usize)).collect();
                    targets.push(parity_labels(&seq));
                    tokens.push(seq);
                }
                dataset(tokens, targets, spec, 2, false)
            };
            Ok(TaskData {
                train: gen(spec.train_size, STREAM_TRAIN),
                valid: gen(spec.valid_size, STREAM_VALID),
            })
        }
        TaskKind::CharLm => {
            if spec.vocab < 2 {
                return Err(TaskError::InvalidSpec("char-lm needs vocab >= 2".into()));
            }
            let chain = MarkovChain::random(spec.vocab, 0.5, &mut stream_rng(seed, STREAM_CHAIN));
            let gen = |size, stream| {
                let mut rng = stream_rng(seed, stream);
                let mut tokens = Vec::with_capacity(size);
                let mut targets = Vec::with_capacity(size);
                for _ in 0..size {
                    let len = rng.gen_range(spec.min_len..=spec.max_len);
                    // len+1 symbols: positions 0..len are input, 1..=len are
                    // the next-token targets.
                    let seq = chain.sample(len + 1, &mut rng);
                    tokens.push(seq[..len].to_vec());
                    targets.push(seq[1..].to_vec());
                }
                dataset(tokens, targets, spec, spec.vocab, true)
            };
            Ok(TaskData {
                train: gen(spec.train_size, STREAM_TRAIN),
                valid: gen(spec.valid_size, STREAM_VALID),
            })
        }
    }
}

/// The per-position labels of the parity task: prefix sum mod 2.
pub fn parity_labels(bits: &[usize]) -> Vec<usize> {
    let mut acc = 0usize;
    bits.iter()
        .map(|&b| {
            acc ^= b & 1;
            acc
        })
        .collect()
}

fn dataset(
    tokens: Vec<Vec<usize>>,
    targets: Vec<Vec<usize>>,
    spec: &TaskSpec,
    num_classes: usize,
    causal: bool,
) -> Dataset {
    Dataset {
        tokens,
        targets,
        max_len: spec.max_len,
        vocab: spec.vocab,
        num_classes,
        causal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind, vocab: usize) -> TaskSpec {
        TaskSpec { kind, min_len: 4, max_len: 8, vocab, train_size: 32, valid_size: 8 }
    }

    #[test]
    fn parity_of_1_1_0_is_1_0_0() {
        assert_eq!(parity_labels(&[1, 1, 0]), vec![1, 0, 0]);
    }

    #[test]
    fn same_seed_regenerates_identical_datasets() {
        for kind in [TaskKind::Copy, TaskKind::Parity, TaskKind::CharLm] {
            let vocab = if kind == TaskKind::Parity { 2 } else { 16 };
            let a = make_task(&spec(kind, vocab), 0).unwrap();
            let b = make_task(&spec(kind, vocab), 0).unwrap();
            assert_eq!(a.train.tokens, b.train.tokens, "{kind:?} train tokens");
            assert_eq!(a.train.targets, b.train.targets, "{kind:?} train targets");
            assert_eq!(a.valid.tokens, b.valid.tokens, "{kind:?} valid tokens");
        }
    }

    #[test]
    fn different_seeds_differ_and_splits_differ() {
        let a = make_task(&spec(TaskKind::Copy, 16), 0).unwrap();
        let b = make_task(&spec(TaskKind::Copy, 16), 1).unwrap();
        assert_ne!(a.train.tokens, b.train.tokens);
        assert_ne!(a.train.tokens, a.valid.tokens);
    }

    #[test]
    fn copy_targets_equal_inputs() {
        let data = make_task(&spec(TaskKind::Copy, 16), 3).unwrap();
        assert_eq!(data.train.tokens, data.train.targets);
    }

    #[test]
    fn char_lm_targets_are_shifted_inputs() {
        let data = make_task(&spec(TaskKind::CharLm, 12), 3).unwrap();
        assert!(data.train.causal, "char-lm must be causal");
        for (toks, tgts) in data.train.tokens.iter().zip(&data.train.targets) {
            assert_eq!(toks.len(), tgts.len());
            // Input shifted left by one matches the target at every overlap.
            assert_eq!(&toks[1..], &tgts[..tgts.len() - 1]);
        }
    }

    #[test]
    fn encoded_batch_pads_and_masks_consistently() {
        let data = make_task(&spec(TaskKind::Copy, 16), 7).unwrap();
        let batch = data.train.encode(&[0, 1, 2, 3]);
        assert_eq!(batch.batch, 4);
        assert_eq!(batch.time, 8);
        for row in 0..4 {
            let len = data.train.tokens[row].len();
            for t in 0..8 {
                let w = batch.target_weights[row * 8 + t];
                assert_eq!(w, if t < len { 1.0 } else { 0.0 });
                if t >= len {
                    assert_eq!(batch.token_ids[row * 8 + t], 0);
                }
            }
        }
        assert_eq!(batch.mask.count(), data.train.lengths(&[0, 1, 2, 3]).iter().sum::<usize>());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(TaskKind::Parity, 3);
        assert!(make_task(&s, 0).is_err(), "parity with vocab 3");
        s = spec(TaskKind::Copy, 16);
        s.min_len = 9;
        assert!(make_task(&s, 0).is_err(), "empty length range");
        s = spec(TaskKind::Copy, 16);
        s.valid_size = 0;
        assert!(make_task(&s, 0).is_err(), "empty split");
    }

    /// Oracle: the stationary distribution of the generating chain, computed
    /// by repeated application of the transition matrix to a distribution —
    /// independent of the sampling path. The empirical unigram histogram of a
    /// long corpus must land within 2% total-variation distance of it.
    #[test]
    fn char_lm_unigrams_match_stationary_distribution() {
        let vocab = 12;
        let chain = MarkovChain::random(vocab, 0.5, &mut stream_rng(41, STREAM_CHAIN));

        let mut pi = vec![1.0 / vocab as f64; vocab];
        for _ in 0..2000 {
            let mut next = vec![0.0f64; vocab];
            for v in 0..vocab {
                for w in 0..vocab {
                    next[w] += pi[v] * chain.transitions[v * vocab + w];
                }
            }
            pi = next;
        }
        let norm: f64 = pi.iter().sum();
        assert!((norm - 1.0).abs() < 1e-9, "stationary distribution should stay normalized");

        let total = 100_000usize;
        let stream = chain.sample(total, &mut stream_rng(41, STREAM_TRAIN));
        let mut counts = vec![0usize; vocab];
        for &s in &stream {
            counts[s] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&pi)
            .map(|(&c, &p)| (c as f64 / total as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv} vs stationary distribution");
    }
}
