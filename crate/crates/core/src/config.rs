//! `key = value` run configuration files.
//!
//! Keys are dotted (`model.*`, `disc.*`, `synth.*`, `train.*`, `loss.*`,
//! `optim.*`) plus the top-level `seed`. `#` starts a comment. Later lines
//! override earlier ones; `model.preset` replaces the whole model section
//! and should come first.

use std::fs;
use std::path::Path;

use crate::data::SynthConfig;
use crate::error::{CsdError, Result};
use crate::model::{parse_bool, DiscriminatorConfig, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub disc: DiscriminatorConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

fn set_synth(cfg: &mut SynthConfig, key: &str, value: &str) -> Result<bool> {
    let Some(field) = key.strip_prefix("synth.") else {
        return Ok(false);
    };
    let bad = |e: &dyn std::fmt::Display| CsdError::Config(format!("{key}: {e}"));
    match field {
        "i_min" => cfg.i_min = value.parse().map_err(|e| bad(&e))?,
        "i_max" => cfg.i_max = value.parse().map_err(|e| bad(&e))?,
        "field_grid" => cfg.field_grid = value.parse().map_err(|e| bad(&e))?,
        "gamma" => cfg.gamma = value.parse().map_err(|e| bad(&e))?,
        "noise_sigma" => cfg.noise_sigma = value.parse().map_err(|e| bad(&e))?,
        "noise" => {
            if !parse_bool(key, value)? {
                cfg.noise_sigma = 0.0;
            }
        }
        "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
        _ => return Err(CsdError::Config(format!("unknown key `{key}`"))),
    }
    Ok(true)
}

fn synth_pairs(cfg: &SynthConfig) -> Vec<(String, String)> {
    vec![
        ("synth.i_min".into(), cfg.i_min.to_string()),
        ("synth.i_max".into(), cfg.i_max.to_string()),
        ("synth.field_grid".into(), cfg.field_grid.to_string()),
        ("synth.gamma".into(), cfg.gamma.to_string()),
        ("synth.noise_sigma".into(), cfg.noise_sigma.to_string()),
        ("synth.seed".into(), cfg.seed.to_string()),
    ]
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "model.preset" {
            self.model = ModelConfig::preset(value)?;
            return Ok(());
        }
        let known = self.model.set(key, value)?
            || self.disc.set(key, value)?
            || set_synth(&mut self.synth, key, value)?
            || self.train.set(key, value)?;
        if known {
            Ok(())
        } else {
            Err(CsdError::Config(format!("unknown key `{key}`")))
        }
    }

    /// Applies every line of `text` on top of `self`. `origin` names the
    /// source in error messages.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut offset = 0;
        for (n, raw) in text.split_inclusive('\n').enumerate() {
            let at = offset;
            offset += raw.len();
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| CsdError::Format {
                path: origin.to_path_buf(),
                offset: at,
                msg: format!("line {}: {msg}", n + 1),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fail("expected `key = value`".into()))?;
            self.set(k.trim(), v.trim()).map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CsdError::io(path, e))?;
        RunConfig::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.disc.validate()?;
        self.synth.validate()?;
        self.train.validate()
    }

    /// Every setting, one `key = value` per line, in a stable order.
    pub fn resolved(&self) -> String {
        let mut pairs = self.model.to_pairs();
        pairs.extend(self.disc.to_pairs());
        pairs.extend(synth_pairs(&self.synth));
        pairs.extend(self.train.to_pairs());
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn parse_and_resolve_roundtrip() {
        let text = "# smoke\nmodel.preset = litecsdnet\nmodel.variant = arc_e # two streams\n\nseed=3\nloss.w_perc = 0.5\nsynth.gamma = 2.2\ndisc.patch_size = 16\n";
        let cfg = RunConfig::parse(text, Path::new("run.cfg")).unwrap();
        assert_eq!(cfg.model.variant, Variant::ArcE);
        assert_eq!(cfg.model.channel_plan, vec![12; 9]);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.weights.w_perc, 0.5);
        assert_eq!(cfg.synth.gamma, 2.2);
        assert_eq!(cfg.disc.patch_size, 16);
        let again = RunConfig::parse(&cfg.resolved(), Path::new("resolved.cfg")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("seed = 1\nmodel.colour = red\n", Path::new("bad.cfg")).unwrap_err();
        match err {
            CsdError::Format { offset, msg, .. } => {
                assert_eq!(offset, 9);
                assert!(msg.contains("line 2") && msg.contains("model.colour"), "{msg}");
            }
            other => panic!("{other}"),
        }
        assert!(RunConfig::parse("nonsense\n", Path::new("x")).is_err());
        assert!(RunConfig::parse("bogus = 1\n", Path::new("x")).is_err());
        assert!(RunConfig::parse("model.guidance = maybe\n", Path::new("x")).is_err());
        assert!(RunConfig::parse("train.batch_size = 0\n", Path::new("x")).is_err());
    }
}
