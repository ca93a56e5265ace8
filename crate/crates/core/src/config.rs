//! `key=value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Keys are the field names
//! of [`ModelConfig`] and [`TrainConfig`]; backbone stages are written as
//! `fnet=8:1,16:2,32:2` (channels:stride). Anything else is an error.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ConvStage, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_stages(key: &str, v: &str) -> Result<Vec<ConvStage>> {
    v.split(',')
        .map(|s| {
            let (c, st) = s
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{key}: stage `{s}` is not channels:stride")))?;
            Ok(ConvStage::new(parse_num(key, c.trim())?, parse_num(key, st.trim())?))
        })
        .collect()
}

fn format_stages(stages: &[ConvStage]) -> String {
    stages.iter().map(|s| format!("{}:{}", s.out_channels, s.stride)).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key this parser accepts, in manifest order.
    pub const KEYS: &'static [&'static str] = &[
        "scales",
        "branches",
        "dim",
        "share_fnet_across_scales",
        "use_cam",
        "input_channels",
        "input_size",
        "fnet",
        "gnet",
        "base_lr",
        "learner_lr_multiplier",
        "weight_decay",
        "lambda0",
        "lambda1",
        "lambda2",
        "alpha",
        "beta",
        "gamma_pos",
        "gamma_neg",
        "walk_steps",
        "iterations",
        "classes_per_batch",
        "images_per_class",
        "seed",
        "adversary",
        "activation_decay",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "scales" => m.scales = parse_num(key, v)?,
            "branches" => m.branches = parse_num(key, v)?,
            "dim" => m.dim = parse_num(key, v)?,
            "share_fnet_across_scales" => m.share_fnet_across_scales = parse_bool(key, v)?,
            "use_cam" => m.use_cam = parse_bool(key, v)?,
            "input_channels" => m.backbone.input_channels = parse_num(key, v)?,
            "input_size" => m.backbone.input_size = parse_num(key, v)?,
            "fnet" => m.backbone.fnet = parse_stages(key, v)?,
            "gnet" => m.backbone.gnet = parse_stages(key, v)?,
            "base_lr" => t.base_lr = parse_num(key, v)?,
            "learner_lr_multiplier" => t.learner_lr_multiplier = parse_num(key, v)?,
            "weight_decay" => t.weight_decay = parse_num(key, v)?,
            "lambda0" => t.lambda0 = parse_num(key, v)?,
            "lambda1" => t.lambda1 = parse_num(key, v)?,
            "lambda2" => t.lambda2 = parse_num(key, v)?,
            "alpha" => t.alpha = parse_num(key, v)?,
            "beta" => t.beta = parse_num(key, v)?,
            "gamma_pos" => t.gamma_pos = parse_num(key, v)?,
            "gamma_neg" => t.gamma_neg = parse_num(key, v)?,
            "walk_steps" => t.walk_steps = parse_num(key, v)?,
            "iterations" => t.iterations = parse_num(key, v)?,
            "classes_per_batch" => t.classes_per_batch = parse_num(key, v)?,
            "images_per_class" => t.images_per_class = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "adversary" => t.adversary = parse_bool(key, v)?,
            "activation_decay" => t.activation_decay = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "scales" => m.scales.to_string(),
            "branches" => m.branches.to_string(),
            "dim" => m.dim.to_string(),
            "share_fnet_across_scales" => m.share_fnet_across_scales.to_string(),
            "use_cam" => m.use_cam.to_string(),
            "input_channels" => m.backbone.input_channels.to_string(),
            "input_size" => m.backbone.input_size.to_string(),
            "fnet" => format_stages(&m.backbone.fnet),
            "gnet" => format_stages(&m.backbone.gnet),
            "base_lr" => t.base_lr.to_string(),
            "learner_lr_multiplier" => t.learner_lr_multiplier.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "lambda0" => t.lambda0.to_string(),
            "lambda1" => t.lambda1.to_string(),
            "lambda2" => t.lambda2.to_string(),
            "alpha" => t.alpha.to_string(),
            "beta" => t.beta.to_string(),
            "gamma_pos" => t.gamma_pos.to_string(),
            "gamma_neg" => t.gamma_neg.to_string(),
            "walk_steps" => t.walk_steps.to_string(),
            "iterations" => t.iterations.to_string(),
            "classes_per_batch" => t.classes_per_batch.to_string(),
            "images_per_class" => t.images_per_class.to_string(),
            "seed" => t.seed.to_string(),
            "adversary" => t.adversary.to_string(),
            "activation_decay" => t.activation_decay.to_string(),
            _ => return None,
        })
    }

    /// Applies the assignments in `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                e => e,
            })?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Every key with its resolved value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        RunConfig::KEYS.iter().map(|k| format!("{k}={}\n", self.get(k).expect("listed key"))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments() {
        let cfg = RunConfig::parse("# run\nscales = 2\nbranches=2 # two\n\nbase_lr=3e-3\nadversary=false\n").unwrap();
        assert_eq!((cfg.model.scales, cfg.model.branches), (2, 2));
        assert_eq!(cfg.train.base_lr, 3e-3);
        assert!(!cfg.train.adversary);
        assert_eq!(cfg.train.iterations, TrainConfig::default().iterations);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("scales=1\nbase_rl=0.1\n").unwrap_err();
        assert!(err.to_string().contains("line 2: unknown key `base_rl`"), "{err}");
    }

    #[test]
    fn malformed_lines_fail() {
        assert!(RunConfig::parse("scales\n").is_err());
        assert!(RunConfig::parse("scales=two\n").is_err());
        assert!(RunConfig::parse("use_cam=yes\n").is_err());
        assert!(RunConfig::parse("fnet=8-1\n").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::parse("dim=8\nscales=2\nbranches=2\n").is_err());
        assert!(RunConfig::parse("base_lr=-1\n").is_err());
    }

    #[test]
    fn text_round_trips() {
        let cfg = RunConfig::parse("scales=2\nfnet=4:1,8:2\nlambda1=0.5\nseed=9\n").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.to_text().lines().count(), RunConfig::KEYS.len());
    }
}
