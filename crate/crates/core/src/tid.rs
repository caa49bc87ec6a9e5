//! Training-inference discrepancy (TID) metrics.
//!
//! For a batch-statistics layer with population statistics `(mu, sigma)`
//! and per-batch statistics `(mu_B, sigma_B)`:
//!
//! ```text
//! mean TID = E ||mu_B - mu||_2 / ||sigma||_2
//! var  TID = E ||sigma_B - sigma||_2 / ||sigma||_2
//! ```
//!
//! where the expectation is an exact arithmetic mean over the batches of a
//! measurement pass and every denominator carries a small guard constant.
//! All arithmetic here is in `f64` regardless of the model's element type,
//! and sigma means the plain `sqrt(var)` of the measured statistics — no
//! stabilizer, since nothing is divided per-feature.

use std::fmt;

/// Guard added to norm denominators so degenerate (constant-feature)
/// populations stay finite.
pub const DENOM_GUARD: f64 = 1e-8;

/// Per-layer statistics of one batch, in measurement precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Anything that can report per-layer batch statistics for a batch: the
/// transformer encoder implements this, and tests use synthetic probes.
/// Implementations must be read-only: a measurement pass never mutates
/// running statistics.
pub trait StatSource<B> {
    type Error: std::error::Error;

    /// Number of batch-statistics layers, in a fixed order.
    fn stat_layer_count(&self) -> usize;

    /// Batch statistics for every layer, in that same order.
    fn batch_stats(&self, batch: &B) -> Result<Vec<LayerBatchStats>, Self::Error>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TidError<E: std::error::Error> {
    #[error("measurement needs at least one batch")]
    EmptyData,
    #[error("layer count mismatch: source has {source_layers}, snapshot has {snapshot_layers}")]
    LayerMismatch { source_layers: usize, snapshot_layers: usize },
    #[error("feature dimension mismatch in layer {layer}")]
    DimMismatch { layer: usize },
    #[error(transparent)]
    Source(E),
}

/// How a population snapshot (or a checkpoint's running statistics) was
/// obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Exponential moving average maintained during training.
    Ema,
    /// Exact arithmetic average over a measurement pass.
    ExactAverage,
    /// EMA refreshed after training with frozen parameters.
    Reestimated,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Ema => "ema",
            Provenance::ExactAverage => "exact-average",
            Provenance::Reestimated => "reestimated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ema" => Some(Provenance::Ema),
            "exact-average" => Some(Provenance::ExactAverage),
            "reestimated" => Some(Provenance::Reestimated),
            _ => None,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Population statistics per layer: `mean`, `var`, and `std = sqrt(var)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPopStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub std: Vec<f64>,
}

/// A full population estimate for every batch-statistics layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSnapshot {
    pub layers: Vec<LayerPopStats>,
    pub provenance: Provenance,
}

impl PopulationSnapshot {
    /// Builds a snapshot from per-layer `(mean, var)` pairs.
    pub fn from_mean_var(layers: Vec<(Vec<f64>, Vec<f64>)>, provenance: Provenance) -> Self {
        let layers = layers
            .into_iter()
            .map(|(mean, var)| {
                let std = var.iter().map(|&v| v.max(0.0).sqrt()).collect();
                LayerPopStats { mean, var, std }
            })
            .collect();
        PopulationSnapshot { layers, provenance }
    }
}

/// Estimates population statistics by exact averaging of batch statistics
/// over one pass of `data`. Read-only with respect to the source.
pub fn estimate_population<B, S: StatSource<B>>(
    source: &S,
    data: &[B],
) -> Result<PopulationSnapshot, TidError<S::Error>> {
    if data.is_empty() {
        return Err(TidError::EmptyData);
    }
    let layers = source.stat_layer_count();
    let mut mean_acc: Vec<Vec<f64>> = Vec::new();
    let mut var_acc: Vec<Vec<f64>> = Vec::new();
    for batch in data {
        let stats = source.batch_stats(batch).map_err(TidError::Source)?;
        if stats.len() != layers {
            return Err(TidError::LayerMismatch {
                source_layers: layers,
                snapshot_layers: stats.len(),
            });
        }
        if mean_acc.is_empty() {
            mean_acc = stats.iter().map(|s| vec![0.0; s.mean.len()]).collect();
            var_acc = stats.iter().map(|s| vec![0.0; s.var.len()]).collect();
        }
        for (l, s) in stats.iter().enumerate() {
            if s.mean.len() != mean_acc[l].len() {
                return Err(TidError::DimMismatch { layer: l });
            }
            for (acc, &v) in mean_acc[l].iter_mut().zip(&s.mean) {
                *acc += v;
            }
            for (acc, &v) in var_acc[l].iter_mut().zip(&s.var) {
                *acc += v;
            }
        }
    }
    let k = data.len() as f64;
    let layers = mean_acc
        .into_iter()
        .zip(var_acc)
        .map(|(mut mean, mut var)| {
            for v in mean.iter_mut() {
                *v /= k;
            }
            for v in var.iter_mut() {
                *v /= k;
            }
            (mean, var)
        })
        .collect();
    Ok(PopulationSnapshot::from_mean_var(layers, Provenance::ExactAverage))
}

/// One layer's discrepancy numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTid {
    pub layer_index: usize,
    pub mean_tid: f64,
    pub var_tid: f64,
}

impl LayerTid {
    /// Total discrepancy: the sum of the mean and variance components.
    pub fn total(&self) -> f64 {
        self.mean_tid + self.var_tid
    }
}

/// Discrepancy report for one measurement pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TidReport {
    /// 0 means "before training"; otherwise the epoch just finished.
    pub epoch: u64,
    pub per_layer: Vec<LayerTid>,
    pub avg_mean_tid: f64,
    pub avg_var_tid: f64,
}

impl TidReport {
    /// Total TID of the deepest batch-statistics layer.
    pub fn last_layer_total(&self) -> Option<f64> {
        self.per_layer.last().map(LayerTid::total)
    }
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Computes TID for every layer by exact averaging over `data`, against the
/// given population snapshot.
pub fn compute_tid<B, S: StatSource<B>>(
    source: &S,
    data: &[B],
    snapshot: &PopulationSnapshot,
    epoch: u64,
) -> Result<TidReport, TidError<S::Error>> {
    if data.is_empty() {
        return Err(TidError::EmptyData);
    }
    let layers = source.stat_layer_count();
    if snapshot.layers.len() != layers {
        return Err(TidError::LayerMismatch {
            source_layers: layers,
            snapshot_layers: snapshot.layers.len(),
        });
    }
    let mut mean_acc = vec![0.0f64; layers];
    let mut var_acc = vec![0.0f64; layers];
    for batch in data {
        let stats = source.batch_stats(batch).map_err(TidError::Source)?;
        if stats.len() != layers {
            return Err(TidError::LayerMismatch {
                source_layers: layers,
                snapshot_layers: stats.len(),
            });
        }
        for (l, s) in stats.iter().enumerate() {
            let pop = &snapshot.layers[l];
            if s.mean.len() != pop.mean.len() {
                return Err(TidError::DimMismatch { layer: l });
            }
            let sigma_norm = l2(pop.std.iter().copied()) + DENOM_GUARD;
            let mean_dev = l2(s.mean.iter().zip(&pop.mean).map(|(&b, &p)| b - p));
            let std_dev = l2(s
                .var
                .iter()
                .zip(&pop.std)
                .map(|(&bv, &ps)| bv.max(0.0).sqrt() - ps));
            mean_acc[l] += mean_dev / sigma_norm;
            var_acc[l] += std_dev / sigma_norm;
        }
    }
    let k = data.len() as f64;
    let per_layer: Vec<LayerTid> = (0..layers)
        .map(|l| LayerTid {
            layer_index: l,
            mean_tid: mean_acc[l] / k,
            var_tid: var_acc[l] / k,
        })
        .collect();
    let avg_mean_tid = per_layer.iter().map(|l| l.mean_tid).sum::<f64>() / layers.max(1) as f64;
    let avg_var_tid = per_layer.iter().map(|l| l.var_tid).sum::<f64>() / layers.max(1) as f64;
    Ok(TidReport { epoch, per_layer, avg_mean_tid, avg_var_tid })
}

/// Elementwise relative deviation curves per layer: how far each feature's
/// batch mean / batch variance strays from the population value, averaged
/// over features and batches.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeviation {
    pub layer_index: usize,
    /// `avg_j avg_batches |mu_B,j - mu_j| / (|mu_j| + guard)`
    pub mean_dev: f64,
    /// `avg_j avg_batches |var_B,j - var_j| / (var_j + guard)`
    pub var_dev: f64,
}

/// Per-layer relative deviation of batch statistics from the population.
pub fn deviation_curves<B, S: StatSource<B>>(
    source: &S,
    data: &[B],
    snapshot: &PopulationSnapshot,
) -> Result<Vec<LayerDeviation>, TidError<S::Error>> {
    if data.is_empty() {
        return Err(TidError::EmptyData);
    }
    let layers = source.stat_layer_count();
    if snapshot.layers.len() != layers {
        return Err(TidError::LayerMismatch {
            source_layers: layers,
            snapshot_layers: snapshot.layers.len(),
        });
    }
    let mut mean_acc = vec![0.0f64; layers];
    let mut var_acc = vec![0.0f64; layers];
    for batch in data {
        let stats = source.batch_stats(batch).map_err(TidError::Source)?;
        for (l, s) in stats.iter().enumerate() {
            let pop = &snapshot.layers[l];
            if s.mean.len() != pop.mean.len() {
                return Err(TidError::DimMismatch { layer: l });
            }
            let d = s.mean.len() as f64;
            let m: f64 = s
                .mean
                .iter()
                .zip(&pop.mean)
                .map(|(&b, &p)| (b - p).abs() / (p.abs() + DENOM_GUARD))
                .sum::<f64>()
                / d;
            let v: f64 = s
                .var
                .iter()
                .zip(&pop.var)
                .map(|(&b, &p)| (b - p).abs() / (p.abs() + DENOM_GUARD))
                .sum::<f64>()
                / d;
            mean_acc[l] += m;
            var_acc[l] += v;
        }
    }
    let k = data.len() as f64;
    Ok((0..layers)
        .map(|l| LayerDeviation {
            layer_index: l,
            mean_dev: mean_acc[l] / k,
            var_dev: var_acc[l] / k,
        })
        .collect())
}
