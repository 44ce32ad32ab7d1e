//! Flat `key=value` run configuration.

use std::fmt::Write as _;

use lsn_core::eval::{DEFAULT_THRESHOLD_COUNT, DEFAULT_TOLERANCE_FRAC};
use lsn_core::model::{self, AlignmentMode, VariantOptions};
use lsn_core::tensor::UpsampleMode;
use lsn_core::train::{Strategy, TrainConfig};
use lsn_core::NetworkSpec;

pub const DEFAULT_WIDTH_MULTIPLIER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub variant: usize,
    pub width_multiplier: f64,
    pub alignment: AlignmentMode,
    pub upsample: UpsampleMode,
    pub base_lr: f64,
    pub lr_multiplier: f64,
    pub lr_decay_period: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iters: u64,
    pub seed: u64,
    pub strategy: Strategy,
    pub tolerance_frac: f64,
    /// Number of evenly spaced thresholds in the PR sweep.
    pub thresholds: usize,
}

impl Default for Config {
    fn default() -> Self {
        let t = TrainConfig::default();
        let o = VariantOptions::default();
        Config {
            variant: 3,
            width_multiplier: DEFAULT_WIDTH_MULTIPLIER,
            alignment: o.alignment,
            upsample: o.upsample,
            base_lr: t.base_lr,
            lr_multiplier: t.lr_multiplier,
            lr_decay_period: t.lr_decay_period,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            max_iters: t.max_iters,
            seed: t.seed,
            strategy: t.strategy,
            tolerance_frac: DEFAULT_TOLERANCE_FRAC,
            thresholds: DEFAULT_THRESHOLD_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.msg)
        } else {
            write!(f, "config line {}: {}", self.line, self.msg)
        }
    }
}

impl std::error::Error for ConfigError {}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut c = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| ConfigError { line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            let r: Result<(), String> = (|| {
                match key {
                    "variant" => c.variant = model::parse_variant(v).ok_or(format!("bad variant `{v}`, expected lsn1..lsn4"))?,
                    "width_multiplier" => c.width_multiplier = num(v)?,
                    "alignment" => c.alignment = AlignmentMode::parse(v).ok_or(format!("bad alignment `{v}`"))?,
                    "upsample" => c.upsample = model::parse_upsample(v).ok_or(format!("bad upsample `{v}`"))?,
                    "stages" => {
                        if num::<usize>(v)? != model::STAGE_COUNT {
                            return Err(format!("stages must be {}", model::STAGE_COUNT));
                        }
                    }
                    "base_lr" => c.base_lr = num(v)?,
                    "lr_multiplier" => c.lr_multiplier = num(v)?,
                    "lr_decay_period" => c.lr_decay_period = num(v)?,
                    "momentum" => c.momentum = num(v)?,
                    "weight_decay" => c.weight_decay = num(v)?,
                    "max_iters" => c.max_iters = num(v)?,
                    "seed" => c.seed = num(v)?,
                    "strategy" => c.strategy = Strategy::parse(v).ok_or(format!("bad strategy `{v}`, expected end-to-end or iterative:N"))?,
                    "tolerance_frac" => c.tolerance_frac = num(v)?,
                    "thresholds" => c.thresholds = num(v)?,
                    other => return Err(format!("unknown key `{other}`")),
                }
                Ok(())
            })();
            r.map_err(err)?;
        }
        c.validate().map_err(|msg| ConfigError { line: 0, msg })?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(format!("width_multiplier must be positive, got {}", self.width_multiplier));
        }
        if !(self.tolerance_frac >= 0.0 && self.tolerance_frac.is_finite()) {
            return Err(format!("tolerance_frac must be non-negative, got {}", self.tolerance_frac));
        }
        if self.thresholds == 0 {
            return Err("thresholds must be at least 1".into());
        }
        self.train_config().validate().map_err(|e| e.to_string())
    }

    /// Canonical text: every key, fixed order. Parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant=lsn{}", self.variant);
        let _ = writeln!(s, "width_multiplier={}", self.width_multiplier);
        let _ = writeln!(s, "stages={}", model::STAGE_COUNT);
        let _ = writeln!(s, "alignment={}", self.alignment.as_str());
        let _ = writeln!(s, "upsample={}", model::upsample_name(self.upsample));
        let _ = writeln!(s, "base_lr={}", self.base_lr);
        let _ = writeln!(s, "lr_multiplier={}", self.lr_multiplier);
        let _ = writeln!(s, "lr_decay_period={}", self.lr_decay_period);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "max_iters={}", self.max_iters);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "strategy={}", self.strategy);
        let _ = writeln!(s, "tolerance_frac={}", self.tolerance_frac);
        let _ = writeln!(s, "thresholds={}", self.thresholds);
        s
    }

    pub fn network(&self) -> lsn_core::Result<NetworkSpec> {
        model::build_variant_with(
            self.variant,
            self.width_multiplier,
            VariantOptions {
                upsample: self.upsample,
                alignment: self.alignment,
            },
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            lr_multiplier: self.lr_multiplier,
            lr_decay_period: self.lr_decay_period,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            max_iters: self.max_iters,
            seed: self.seed,
            strategy: self.strategy,
            ..TrainConfig::default()
        }
    }

    pub fn threshold_list(&self) -> Vec<f64> {
        lsn_core::eval::default_thresholds(self.thresholds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::parse("# nothing\n\n").unwrap(), Config::default());
    }

    #[test]
    fn canonical_text_is_a_fixed_point() {
        let c = Config::parse("variant = lsn1\nseed=7\nstrategy=iterative:2\nlr_multiplier=2.5e4\n").unwrap();
        let t = c.to_text();
        let again = Config::parse(&t).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), t);
        assert_eq!(c.variant, 1);
        assert_eq!(c.lr_multiplier, 25000.0);
    }

    #[test]
    fn errors_name_the_line() {
        let e = Config::parse("seed=1\n\nlearning_rate=3\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert_eq!(Config::parse("seed=x").unwrap_err().line, 1);
        assert_eq!(Config::parse("seed=1\nseed=2").unwrap_err().line, 2);
        assert_eq!(Config::parse("variant").unwrap_err().line, 1);
    }

    #[test]
    fn semantic_errors_are_rejected() {
        assert!(Config::parse("momentum=1.5").is_err());
        assert!(Config::parse("thresholds=0").is_err());
        assert!(Config::parse("width_multiplier=-1").is_err());
        assert!(Config::parse("stages=4").is_err());
    }
}
