//! Append-only CSV metric streams with fixed schemas.
//!
//! Three files per run:
//! - `train.csv`: `step,epoch,lr,ce_loss,penalty,total_loss,valid_loss,valid_metric`
//!   (one row per step; the validation columns are filled on epoch-final rows
//!   and empty otherwise)
//! - `tid.csv`: `epoch,layer_index,mean_tid,var_tid,avg` (per-layer rows with
//!   `avg = 0`, then one layer-averaged row per epoch with `avg = 1` and an
//!   empty layer index)
//! - `conditioning.csv`: `step,layer_index,c_50,c_80,c_max`
//!
//! Numbers are plain decimal with a dot separator and at most 9 significant
//! digits; infinity is spelled `inf`. Nothing here depends on wall-clock or
//! environment, so two runs of the same seed emit byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const TRAIN_HEADER: &str = "step,epoch,lr,ce_loss,penalty,total_loss,valid_loss,valid_metric";
pub const TID_HEADER: &str = "epoch,layer_index,mean_tid,var_tid,avg";
pub const COND_HEADER: &str = "step,layer_index,c_50,c_80,c_max";

/// Formats with at most `sig` significant digits in plain decimal, trimming
/// trailing zeros. `inf` and `nan` spell themselves.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    assert!(sig > 0);
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    // Digits after the decimal point so that `sig` significant digits
    // survive; clamped: huge magnitudes get integer rendering.
    let decimals = (sig as i32 - 1 - mag).clamp(0, 330) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// One append-only CSV file; the header goes out on creation.
pub struct CsvWriter {
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        Ok(CsvWriter { out })
    }

    pub fn row(&mut self, fields: &[String]) -> std::io::Result<()> {
        writeln!(self.out, "{}", fields.join(","))
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// The training-log row; `valid` is present only on epoch-final rows.
pub struct TrainRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub ce: f64,
    pub penalty: f64,
    pub total: f64,
    pub valid: Option<(f64, f64)>,
}

impl TrainRow {
    pub fn fields(&self) -> Vec<String> {
        let (vl, vm) = match self.valid {
            Some((loss, metric)) => (fmt_sig(loss, 9), fmt_sig(metric, 9)),
            None => (String::new(), String::new()),
        };
        vec![
            self.step.to_string(),
            self.epoch.to_string(),
            fmt_sig(self.lr, 9),
            fmt_sig(self.ce, 9),
            fmt_sig(self.penalty, 9),
            fmt_sig(self.total, 9),
            vl,
            vm,
        ]
    }
}

pub fn tid_layer_row(epoch: u64, layer_index: usize, mean_tid: f64, var_tid: f64) -> Vec<String> {
    vec![
        epoch.to_string(),
        layer_index.to_string(),
        fmt_sig(mean_tid, 9),
        fmt_sig(var_tid, 9),
        "0".into(),
    ]
}

pub fn tid_avg_row(epoch: u64, avg_mean: f64, avg_var: f64) -> Vec<String> {
    vec![epoch.to_string(), String::new(), fmt_sig(avg_mean, 9), fmt_sig(avg_var, 9), "1".into()]
}

pub fn cond_row(step: u64, layer_index: usize, c_50: f64, c_80: f64, c_max: f64) -> Vec<String> {
    vec![
        step.to_string(),
        layer_index.to_string(),
        fmt_sig(c_50, 9),
        fmt_sig(c_80, 9),
        fmt_sig(c_max, 9),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting_keeps_nine_significant_digits() {
        assert_eq!(fmt_sig(0.0, 9), "0");
        assert_eq!(fmt_sig(1.0, 9), "1");
        assert_eq!(fmt_sig(-2.5, 9), "-2.5");
        assert_eq!(fmt_sig(0.003, 9), "0.003");
        assert_eq!(fmt_sig(1.0 / 3.0, 9), "0.333333333");
        assert_eq!(fmt_sig(123456789.123, 9), "123456789");
        assert_eq!(fmt_sig(1.23456789123e-7, 9), "0.000000123456789");
        assert_eq!(fmt_sig(f64::INFINITY, 9), "inf");
        assert_eq!(fmt_sig(2.0f64.powi(-40), 9), "0.000000000000909494702");
    }

    #[test]
    fn formatting_is_plain_decimal() {
        for &x in &[1e-12, 3.7e8, 0.1, 123.456] {
            let s = fmt_sig(x, 9);
            assert!(!s.contains('e') && !s.contains('E'), "{s}");
            assert!(!s.contains(','), "{s}");
        }
    }

    #[test]
    fn train_row_blanks_validation_columns_between_epochs() {
        let row = TrainRow {
            step: 7,
            epoch: 0,
            lr: 0.001,
            ce: 2.5,
            penalty: 0.0,
            total: 2.5,
            valid: None,
        };
        assert_eq!(row.fields().join(","), "7,0,0.001,2.5,0,2.5,,");
        let row = TrainRow { valid: Some((2.25, 0.5)), ..row };
        assert_eq!(row.fields().join(","), "7,0,0.001,2.5,0,2.5,2.25,0.5");
    }

    #[test]
    fn round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut w = CsvWriter::create(&path, TRAIN_HEADER).unwrap();
        w.row(&["1".into(), "0".into()]).unwrap();
        w.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{TRAIN_HEADER}\n1,0\n"));
    }
}
