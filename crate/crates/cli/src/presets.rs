//! Named configuration snippets reproducing published penalty settings.
//!
//! Each preset pins the regularized-BN penalty weights (λ, ν) and the norm
//! placement to the values selected by validation in the full-scale study
//! this laboratory miniaturizes — one preset per task family and placement,
//! using the family's lead dataset. They are applied on top of whatever
//! config file was loaded, and explicit `--lambda`/`--nu` flags still win.
//!
//! Caveat, stated once here and repeated in every note: these weights were
//! tuned at full scale (real NMT/LM/NER/classification workloads, large
//! models, long schedules). At desk scale they are starting points, not
//! conclusions.

use crate::config::ExperimentConfig;

#[derive(Debug)]
pub struct Preset {
    pub name: &'static str,
    /// `pre` or `post`.
    pub placement: &'static str,
    pub lambda: f64,
    pub nu: f64,
    pub note: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "paper-postnorm-nmt",
        placement: "post",
        lambda: 10.0,
        nu: 0.0,
        note: "machine translation, post-norm; tuned at full scale (IWSLT14)",
    },
    Preset {
        name: "paper-prenorm-nmt",
        placement: "pre",
        lambda: 0.1,
        nu: 0.01,
        note: "machine translation, pre-norm; tuned at full scale (IWSLT14)",
    },
    Preset {
        name: "paper-postnorm-lm",
        placement: "post",
        lambda: 0.1,
        nu: 0.01,
        note: "language modeling, post-norm; tuned at full scale (PTB)",
    },
    Preset {
        name: "paper-prenorm-lm",
        placement: "pre",
        lambda: 0.01,
        nu: 0.0,
        note: "language modeling, pre-norm; tuned at full scale (PTB)",
    },
    Preset {
        name: "paper-postnorm-ner",
        placement: "post",
        lambda: 0.01,
        nu: 0.0,
        note: "named-entity recognition, post-norm; tuned at full scale (Resume)",
    },
    Preset {
        name: "paper-prenorm-ner",
        placement: "pre",
        lambda: 0.01,
        nu: 0.0,
        note: "named-entity recognition, pre-norm; tuned at full scale (Resume)",
    },
    Preset {
        name: "paper-postnorm-textcls",
        placement: "post",
        lambda: 0.1,
        nu: 0.0,
        note: "text classification, post-norm; tuned at full scale (IMDB)",
    },
    Preset {
        name: "paper-prenorm-textcls",
        placement: "pre",
        lambda: 0.0,
        nu: 0.01,
        note: "text classification, pre-norm; tuned at full scale (IMDB)",
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

/// Overwrites the norm kind, placement, and penalty weights from the named
/// preset. Unknown names list the alternatives.
pub fn apply(cfg: &mut ExperimentConfig, name: &str) -> Result<&'static Preset, String> {
    let preset = find(name).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        format!("unknown preset `{name}` (known: {})", known.join(", "))
    })?;
    cfg.model.norm = "rbn".into();
    cfg.model.placement = preset.placement.into();
    cfg.norm.lambda = preset.lambda;
    cfg.norm.nu = preset.nu;
    Ok(preset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique_and_placements_valid() {
        for (i, p) in PRESETS.iter().enumerate() {
            assert!(p.placement == "pre" || p.placement == "post", "{}", p.name);
            assert!(p.lambda >= 0.0 && p.nu >= 0.0, "{}", p.name);
            assert!(p.note.contains("tuned at full scale"), "{}", p.name);
            for q in &PRESETS[..i] {
                assert_ne!(p.name, q.name);
            }
        }
    }

    #[test]
    fn apply_overwrites_norm_settings() {
        let mut cfg = ExperimentConfig::default();
        let p = apply(&mut cfg, "paper-postnorm-nmt").unwrap();
        assert_eq!(cfg.model.norm, "rbn");
        assert_eq!(cfg.model.placement, "post");
        assert_eq!(cfg.norm.lambda, 10.0);
        assert_eq!(cfg.norm.nu, 0.0);
        assert!(p.note.contains("tuned at full scale"));
    }

    #[test]
    fn unknown_preset_lists_known_names() {
        let mut cfg = ExperimentConfig::default();
        let err = apply(&mut cfg, "paper-postnorm-asr").unwrap_err();
        assert!(err.contains("paper-postnorm-asr"));
        assert!(err.contains("paper-prenorm-nmt"));
    }
}
