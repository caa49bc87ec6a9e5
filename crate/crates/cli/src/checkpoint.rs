//! Model checkpoints: a flat container of named float arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"NBCK"
//! version u32 (currently 1)
//! count   u32
//! table   count × { name_len u32, name bytes, numel u64, offset u64 }
//! payload concatenated f32 data (offsets index into this section)
//! crc     u32, CRC-32 of every preceding byte
//! ```
//!
//! The checksum is verified before any byte of payload is interpreted, so a
//! truncated or corrupt file can never install partial state. Payloads are
//! 32-bit floats: a model running at f32 round-trips bitwise, and save →
//! load → save reproduces the file exactly.
//!
//! Besides the parameter tensors (stored under their parameter names), a
//! checkpoint carries the normalization state per batch-statistics layer
//! (`<layer>.running_mean` / `.running_var` / `.updates` / `.loaded`, plus
//! `.steps_seen` for renorm layers) and two scalars: `meta.step` and
//! `meta.provenance` (0 = ema, 1 = exact-average, 2 = reestimated).

use std::collections::HashSet;
use std::path::Path;

use normbench_core::model::TransformerEncoder;
use normbench_core::norm::NormLayer;
use normbench_core::tensor::Scalar;
use normbench_core::tid::Provenance;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"NBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint corrupt: {0} bytes is too short to hold a checksum")]
    Truncated(usize),
    #[error("checkpoint corrupt: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("checkpoint corrupt: malformed header table")]
    BadTable,
    #[error("checkpoint corrupt: duplicate array `{0}`")]
    Duplicate(String),
    #[error("checkpoint is missing array `{0}`")]
    Missing(String),
    #[error("checkpoint contains unexpected array `{0}` (model shape mismatch?)")]
    Unexpected(String),
    #[error("checkpoint array `{name}` has {got} elements, model expects {expected}")]
    ShapeMismatch { name: String, expected: usize, got: usize },
    #[error("checkpoint meta.provenance code {0} is not recognized")]
    BadProvenance(f32),
}

/// An ordered set of named f32 arrays.
#[derive(Debug, Default)]
pub struct Checkpoint {
    arrays: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, data: Vec<f32>) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate checkpoint array {name}");
        self.arrays.push((name, data));
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn scalar(&self, name: &str) -> Option<f32> {
        self.get(name).and_then(|d| if d.len() == 1 { Some(d[0]) } else { None })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, data) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * data.len() as u64;
        }
        for (_, data) in &self.arrays {
            for &x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        // Checksum first: nothing else is trusted until it passes.
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }

        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            let end = pos.checked_add(n).ok_or(CheckpointError::BadTable)?;
            let s = body.get(*pos..end).ok_or(CheckpointError::BadTable)?;
            *pos = end;
            Ok(s)
        };
        let take_u32 = |pos: &mut usize| -> Result<u32, CheckpointError> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let take_u64 = |pos: &mut usize| -> Result<u64, CheckpointError> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = take_u32(&mut pos)?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = take_u32(&mut pos)? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = take_u32(&mut pos)? as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| CheckpointError::BadTable)?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::Duplicate(name));
            }
            let numel = take_u64(&mut pos)? as usize;
            let offset = take_u64(&mut pos)? as usize;
            entries.push((name, numel, offset));
        }
        let payload = &body[pos..];
        let mut arrays = Vec::with_capacity(count);
        for (name, numel, offset) in entries {
            let end = offset.checked_add(4 * numel).ok_or(CheckpointError::BadTable)?;
            let raw = payload.get(offset..end).ok_or(CheckpointError::BadTable)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
            arrays.push((name, data.collect()));
        }
        Ok(Checkpoint { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn provenance_code(p: Provenance) -> f32 {
    match p {
        Provenance::Ema => 0.0,
        Provenance::ExactAverage => 1.0,
        Provenance::Reestimated => 2.0,
    }
}

fn provenance_from_code(code: f32) -> Option<Provenance> {
    match code as i64 {
        0 => Some(Provenance::Ema),
        1 => Some(Provenance::ExactAverage),
        2 => Some(Provenance::Reestimated),
        _ => None,
    }
}

fn to_f32s<T: Scalar>(xs: &[T]) -> Vec<f32> {
    xs.iter().map(|&x| x.to_f64() as f32).collect()
}

/// Snapshots a model: every parameter, every batch-statistics layer's
/// running state, and the step/provenance scalars.
pub fn capture<T: Scalar>(
    model: &TransformerEncoder<T>,
    step: u64,
    provenance: Provenance,
) -> Checkpoint {
    let mut ck = Checkpoint::new();
    model.visit_params(&mut |p| ck.push(p.name.clone(), to_f32s(p.value.data())));
    for layer in model.stat_layers() {
        let name = layer.name().to_string();
        let state = layer.state().expect("stat layer has state").borrow();
        ck.push(format!("{name}.running_mean"), to_f32s(&state.running_mean));
        ck.push(format!("{name}.running_var"), to_f32s(&state.running_var));
        ck.push(format!("{name}.updates"), vec![state.update_count as f32]);
        ck.push(format!("{name}.loaded"), vec![if state.initialized() { 1.0 } else { 0.0 }]);
        if let NormLayer::Renorm(brn) = layer {
            ck.push(format!("{name}.steps_seen"), vec![brn.steps_seen() as f32]);
        }
    }
    ck.push("meta.step", vec![step as f32]);
    ck.push("meta.provenance", vec![provenance_code(provenance)]);
    ck
}

/// What `restore` reports back alongside the mutated model.
#[derive(Debug)]
pub struct RestoredMeta {
    pub step: u64,
    pub provenance: Provenance,
}

/// Installs a checkpoint into a freshly built model of the same shape.
///
/// Every array must be claimed and every parameter must be present; leftover
/// or absent names are errors that identify the offending array, as are
/// element-count mismatches.
pub fn restore<T: Scalar>(
    model: &mut TransformerEncoder<T>,
    ck: &Checkpoint,
) -> Result<RestoredMeta, CheckpointError> {
    let mut claimed: HashSet<String> = HashSet::new();
    let mut check = |name: &str, expected: usize| -> Result<(), CheckpointError> {
        let data = ck.get(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
        if data.len() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.into(),
                expected,
                got: data.len(),
            });
        }
        claimed.insert(name.into());
        Ok(())
    };

    // Validate everything before touching the model: restore is all-or-nothing.
    let mut expect: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |p| expect.push((p.name.clone(), p.value.numel())));
    for (name, numel) in &expect {
        check(name, *numel)?;
    }
    for layer in model.stat_layers() {
        let name = layer.name();
        let dim = layer.state().unwrap().borrow().dim();
        check(&format!("{name}.running_mean"), dim)?;
        check(&format!("{name}.running_var"), dim)?;
        check(&format!("{name}.updates"), 1)?;
        check(&format!("{name}.loaded"), 1)?;
        if matches!(layer, NormLayer::Renorm(_)) {
            check(&format!("{name}.steps_seen"), 1)?;
        }
    }
    check("meta.step", 1)?;
    check("meta.provenance", 1)?;
    let step = ck.scalar("meta.step").unwrap() as u64;
    let code = ck.scalar("meta.provenance").unwrap();
    let provenance = provenance_from_code(code).ok_or(CheckpointError::BadProvenance(code))?;
    for name in ck.names() {
        if !claimed.contains(name) {
            return Err(CheckpointError::Unexpected(name.into()));
        }
    }

    model.visit_params_mut(&mut |p| {
        let data = ck.get(&p.name).unwrap();
        for (dst, &src) in p.value.data_mut().iter_mut().zip(data) {
            *dst = T::from_f64(src as f64);
        }
    });
    for layer in model.stat_layers() {
        let name = layer.name().to_string();
        let mean = ck.get(&format!("{name}.running_mean")).unwrap();
        let var = ck.get(&format!("{name}.running_var")).unwrap();
        let updates = ck.scalar(&format!("{name}.updates")).unwrap() as u64;
        let loaded = ck.scalar(&format!("{name}.loaded")).unwrap() != 0.0;
        let mut state = layer.state().unwrap().borrow_mut();
        let mean: Vec<T> = mean.iter().map(|&x| T::from_f64(x as f64)).collect();
        let var: Vec<T> = var.iter().map(|&x| T::from_f64(x as f64)).collect();
        if loaded {
            // Sets the internal loaded flag so inference mode is legal even
            // at update_count 0.
            state.load_population(&mean, &var);
        } else {
            state.running_mean.copy_from_slice(&mean);
            state.running_var.copy_from_slice(&var);
        }
        state.update_count = updates;
        drop(state);
        if let NormLayer::Renorm(brn) = layer {
            brn.set_steps_seen(ck.scalar(&format!("{name}.steps_seen")).unwrap() as u64);
        }
    }
    Ok(RestoredMeta { step, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use normbench_core::model::{ModelConfig, NormPlacement};
    use normbench_core::norm::NormKind;

    fn tiny_cfg(layers: usize, kind: NormKind) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            d_model: 8,
            num_heads: 2,
            ffn_dim: 16,
            norm_kind: kind,
            placement: NormPlacement::Pre,
            mixed_norm_count: layers,
            vocab: 11,
            num_classes: 11,
            max_len: 6,
            momentum: 0.1,
            eps: 1e-5,
            brn: normbench_core::norm::BrnSchedule::new(500, 1000, 3.0, 5.0),
            dropout: 0.0,
        }
    }

    fn build(layers: usize, kind: NormKind, seed: u64) -> TransformerEncoder<f32> {
        TransformerEncoder::new(tiny_cfg(layers, kind), seed).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = build(2, NormKind::Bn, 5);
        let ck = capture(&model, 123, Provenance::Ema);
        let bytes = ck.to_bytes();
        let reread = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(bytes, reread.to_bytes());
    }

    #[test]
    fn restore_reproduces_params_and_state_bitwise() {
        let a = build(2, NormKind::Brn, 7);
        // Disturb the state so the restore has something nontrivial to carry.
        for layer in a.stat_layers() {
            let mut st = layer.state().unwrap().borrow_mut();
            let dim = st.dim();
            st.ema_update(&vec![0.25; dim], &vec![2.0; dim]);
            if let NormLayer::Renorm(brn) = layer {
                brn.set_steps_seen(42);
            }
        }
        let ck = capture(&a, 99, Provenance::Reestimated);

        let mut b = build(2, NormKind::Brn, 8);
        let meta = restore(&mut b, &ck).unwrap();
        assert_eq!(meta.step, 99);
        assert_eq!(meta.provenance, Provenance::Reestimated);
        assert_eq!(capture(&b, 99, Provenance::Reestimated).to_bytes(), ck.to_bytes());
        // Spot-check one state detail survived.
        let l = &b.stat_layers()[0];
        assert!(l.state().unwrap().borrow().initialized());
        if let NormLayer::Renorm(brn) = l {
            assert_eq!(brn.steps_seen(), 42);
        }
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let ck = capture(&build(1, NormKind::Bn, 0), 1, Provenance::Ema);
        let bytes = ck.to_bytes();
        for cut in [bytes.len() - 5, bytes.len() / 2, 7] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Checksum { .. } | CheckpointError::Truncated(_)),
                "cut at {cut}: {err}"
            );
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped).unwrap_err(),
            CheckpointError::Checksum { .. }
        ));
    }

    #[test]
    fn layer_count_mismatch_names_the_stray_array() {
        let big = build(3, NormKind::Bn, 1);
        let ck = capture(&big, 10, Provenance::Ema);
        let mut small = build(1, NormKind::Bn, 1);
        let err = restore(&mut small, &ck).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("blocks.1") || msg.contains("blocks.2"), "{msg}");
    }

    #[test]
    fn width_mismatch_names_the_parameter() {
        let model = build(1, NormKind::Bn, 2);
        let ck = capture(&model, 0, Provenance::Ema);
        let mut wide = TransformerEncoder::<f32>::new(
            ModelConfig { d_model: 12, ffn_dim: 24, ..tiny_cfg(1, NormKind::Bn) },
            2,
        )
        .unwrap();
        let err = restore(&mut wide, &ck).unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch { .. }), "{err}");
        assert!(err.to_string().contains("embed"), "{err}");
    }

    #[test]
    fn missing_array_is_reported_by_name() {
        let model = build(1, NormKind::Bn, 3);
        let mut ck = capture(&model, 0, Provenance::Ema);
        let idx = ck.names().position(|n| n == "meta.step").unwrap();
        ck.arrays.remove(idx);
        let mut fresh = build(1, NormKind::Bn, 3);
        let err = restore(&mut fresh, &ck).unwrap_err();
        assert!(matches!(err, CheckpointError::Missing(ref n) if n == "meta.step"), "{err}");
    }

    #[test]
    fn validation_failure_leaves_the_model_untouched() {
        let donor = build(2, NormKind::Bn, 11);
        let mut ck = capture(&donor, 5, Provenance::Ema);
        ck.push("bogus.extra", vec![1.0]);
        let mut target = build(2, NormKind::Bn, 12);
        let before = capture(&target, 0, Provenance::Ema).to_bytes();
        assert!(restore(&mut target, &ck).is_err());
        assert_eq!(before, capture(&target, 0, Provenance::Ema).to_bytes());
    }
}
