//! Flat dotted-key run configuration.
//!
//! Defaults follow the CMU-MOSEI training hyperparameters, scaled down to
//! batch 32. Config files are TOML whose nested tables flatten to dotted
//! keys; unknown keys are rejected. `--set key=value` overrides win over
//! the file, and the FINE_SEED environment variable overrides the seed
//! last.

use crate::numcore::PrecisionMode;
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub data_path: String,
    pub out_dir: String,

    pub batch_size: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub seed: u64,
    pub precision: PrecisionMode,
    /// Extra checkpoint cadence in steps; 0 = epoch ends only.
    pub ckpt_every_steps: usize,
    /// Path of a checkpoint to resume from ("" = fresh run).
    pub resume: String,

    pub moq_num_experts: usize,
    pub moq_top_k_ratio: f64,
    pub moq_num_query_tokens: usize,
    pub moq_dim_text: usize,
    pub moq_dim_audio: usize,
    pub moq_dim_video: usize,

    pub ftre_reduction_ratio: f64,
    pub ftre_critic_dim: usize,
    pub ftre_critic_temperature: f64,
    pub ftre_critic_hidden: usize,

    pub dcq_alpha: f64,
    pub dcq_s_min: usize,
    pub dcq_bins: usize,
    pub dcq_tau: f64,
    pub dcq_epsilon: f64,

    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub fusion_ffn_mult: usize,
    pub fusion_decoder_queries: usize,

    pub lambda_up: f64,
    pub lambda_cl: f64,
    pub lambda_aux: f64,
    pub beta_mi: f64,

    pub disable_moq: bool,
    pub disable_ftre: bool,
    pub disable_dcq: bool,

    pub ablate_seeds: String,

    pub mi_bench_rho: String,
    pub mi_bench_dims: String,
    pub mi_bench_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: String::new(),
            out_dir: "runs/run".into(),
            batch_size: 32,
            lr: 3e-5,
            critic_lr: 3e-5,
            weight_decay: 0.01,
            epochs: 50,
            warmup_frac: 0.1,
            seed: 1,
            precision: PrecisionMode::Single,
            ckpt_every_steps: 0,
            resume: String::new(),
            moq_num_experts: 8,
            moq_top_k_ratio: 0.75,
            moq_num_query_tokens: 8,
            moq_dim_text: 256,
            moq_dim_audio: 256,
            moq_dim_video: 256,
            ftre_reduction_ratio: 0.5,
            ftre_critic_dim: 64,
            ftre_critic_temperature: 0.1,
            ftre_critic_hidden: 64,
            dcq_alpha: 0.3,
            dcq_s_min: 64,
            dcq_bins: 7,
            dcq_tau: 0.1,
            dcq_epsilon: 1e-8,
            fusion_layers: 2,
            fusion_heads: 4,
            fusion_ffn_mult: 4,
            fusion_decoder_queries: 4,
            lambda_up: 0.5,
            lambda_cl: 3.0,
            lambda_aux: 1.0,
            beta_mi: 0.5,
            disable_moq: false,
            disable_ftre: false,
            disable_dcq: false,
            ablate_seeds: String::new(),
            mi_bench_rho: "0.5,0.9".into(),
            mi_bench_dims: "1,2".into(),
            mi_bench_steps: 2000,
        }
    }
}

macro_rules! parse_into {
    ($field:expr, $raw:expr, $key:expr) => {
        $field = $raw.parse().map_err(|_| {
            Error::Config(format!("bad value {:?} for key {}", $raw, $key))
        })?
    };
}

impl RunConfig {
    /// All accepted dotted keys.
    pub const KEYS: &'static [&'static str] = &[
        "data.path",
        "run.out_dir",
        "train.batch_size",
        "train.lr",
        "train.critic_lr",
        "train.weight_decay",
        "train.epochs",
        "train.warmup_frac",
        "train.seed",
        "train.precision",
        "train.ckpt_every_steps",
        "train.resume",
        "moq.num_experts",
        "moq.top_k_ratio",
        "moq.num_query_tokens",
        "moq.dim.text",
        "moq.dim.audio",
        "moq.dim.video",
        "ftre.reduction_ratio",
        "ftre.critic_dim",
        "ftre.critic_temperature",
        "ftre.critic_hidden",
        "dcq.alpha",
        "dcq.s_min",
        "dcq.bins",
        "dcq.tau",
        "dcq.epsilon",
        "fusion.layers",
        "fusion.heads",
        "fusion.ffn_mult",
        "fusion.decoder_queries",
        "loss.lambda_up",
        "loss.lambda_cl",
        "loss.lambda_aux",
        "loss.beta_mi",
        "ablate.disable_moq",
        "ablate.disable_ftre",
        "ablate.disable_dcq",
        "ablate.seeds",
        "mi_bench.rho",
        "mi_bench.dims",
        "mi_bench.steps",
    ];

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "data.path" => self.data_path = raw.to_string(),
            "run.out_dir" => self.out_dir = raw.to_string(),
            "train.batch_size" => parse_into!(self.batch_size, raw, key),
            "train.lr" => parse_into!(self.lr, raw, key),
            "train.critic_lr" => parse_into!(self.critic_lr, raw, key),
            "train.weight_decay" => parse_into!(self.weight_decay, raw, key),
            "train.epochs" => parse_into!(self.epochs, raw, key),
            "train.warmup_frac" => parse_into!(self.warmup_frac, raw, key),
            "train.seed" => parse_into!(self.seed, raw, key),
            "train.precision" => parse_into!(self.precision, raw, key),
            "train.ckpt_every_steps" => parse_into!(self.ckpt_every_steps, raw, key),
            "train.resume" => self.resume = raw.to_string(),
            "moq.num_experts" => parse_into!(self.moq_num_experts, raw, key),
            "moq.top_k_ratio" => parse_into!(self.moq_top_k_ratio, raw, key),
            "moq.num_query_tokens" => parse_into!(self.moq_num_query_tokens, raw, key),
            "moq.dim.text" => parse_into!(self.moq_dim_text, raw, key),
            "moq.dim.audio" => parse_into!(self.moq_dim_audio, raw, key),
            "moq.dim.video" => parse_into!(self.moq_dim_video, raw, key),
            "ftre.reduction_ratio" => parse_into!(self.ftre_reduction_ratio, raw, key),
            "ftre.critic_dim" => parse_into!(self.ftre_critic_dim, raw, key),
            "ftre.critic_temperature" => parse_into!(self.ftre_critic_temperature, raw, key),
            "ftre.critic_hidden" => parse_into!(self.ftre_critic_hidden, raw, key),
            "dcq.alpha" => parse_into!(self.dcq_alpha, raw, key),
            "dcq.s_min" => parse_into!(self.dcq_s_min, raw, key),
            "dcq.bins" => parse_into!(self.dcq_bins, raw, key),
            "dcq.tau" => parse_into!(self.dcq_tau, raw, key),
            "dcq.epsilon" => parse_into!(self.dcq_epsilon, raw, key),
            "fusion.layers" => parse_into!(self.fusion_layers, raw, key),
            "fusion.heads" => parse_into!(self.fusion_heads, raw, key),
            "fusion.ffn_mult" => parse_into!(self.fusion_ffn_mult, raw, key),
            "fusion.decoder_queries" => parse_into!(self.fusion_decoder_queries, raw, key),
            "loss.lambda_up" => parse_into!(self.lambda_up, raw, key),
            "loss.lambda_cl" => parse_into!(self.lambda_cl, raw, key),
            "loss.lambda_aux" => parse_into!(self.lambda_aux, raw, key),
            "loss.beta_mi" => parse_into!(self.beta_mi, raw, key),
            "ablate.disable_moq" => parse_into!(self.disable_moq, raw, key),
            "ablate.disable_ftre" => parse_into!(self.disable_ftre, raw, key),
            "ablate.disable_dcq" => parse_into!(self.disable_dcq, raw, key),
            "ablate.seeds" => self.ablate_seeds = raw.to_string(),
            "mi_bench.rho" => self.mi_bench_rho = raw.to_string(),
            "mi_bench.dims" => self.mi_bench_dims = raw.to_string(),
            "mi_bench.steps" => parse_into!(self.mi_bench_steps, raw, key),
            other => {
                return Err(Error::Config(format!("unknown config key: {other}")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &value, &mut flat)?;
        let mut cfg = RunConfig::default();
        for (key, raw) in flat {
            cfg.set(&key, &raw)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Apply `key=value` overrides (CLI --set).
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set needs key=value, got {s}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// FINE_SEED overrides the configured seed when present.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var("FINE_SEED") {
            self.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad FINE_SEED value {seed:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1]".into()));
        }
        if self.lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn parsed_ablate_seeds(&self) -> Result<Vec<u64>> {
        if self.ablate_seeds.trim().is_empty() {
            return Ok(vec![self.seed]);
        }
        self.ablate_seeds
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed {s:?} in ablate.seeds")))
            })
            .collect()
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    match value {
        toml::Value::Table(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out)?;
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        toml::Value::Integer(i) => out.push((prefix.to_string(), i.to_string())),
        toml::Value::Float(f) => out.push((prefix.to_string(), f.to_string())),
        toml::Value::Boolean(b) => out.push((prefix.to_string(), b.to_string())),
        other => {
            return Err(Error::Config(format!(
                "unsupported value type at {prefix}: {other}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_column() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.batch_size, 32); // scaled down from 64
        assert_eq!(cfg.moq_num_experts, 8);
        assert_eq!(cfg.moq_num_query_tokens, 8);
        assert_eq!(cfg.moq_top_k_ratio, 0.75);
        assert_eq!(cfg.moq_dim_text, 256);
        assert_eq!(cfg.ftre_reduction_ratio, 0.5);
        assert_eq!(cfg.dcq_alpha, 0.3);
        assert_eq!(cfg.lambda_cl, 3.0);
        assert_eq!(cfg.lambda_up, 0.5);
        assert_eq!(cfg.lambda_aux, 1.0);
        assert_eq!(cfg.beta_mi, 0.5);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.warmup_frac, 0.1);
        assert_eq!(cfg.lr, 3e-5);
    }

    #[test]
    fn toml_round_trip_with_nested_tables() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [train]
            batch_size = 16
            precision = "double"
            [moq.dim]
            text = 32
            [loss]
            beta_mi = 0.25
            "#,
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.precision, PrecisionMode::Double);
        assert_eq!(cfg.moq_dim_text, 32);
        assert_eq!(cfg.beta_mi, 0.25);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[train]\nbatch = 16\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn overrides_and_env_win() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["train.seed=9".into(), "loss.beta_mi=0".into()])
            .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.beta_mi, 0.0);
        std::env::set_var("FINE_SEED", "123");
        cfg.apply_env().unwrap();
        std::env::remove_var("FINE_SEED");
        assert_eq!(cfg.seed, 123);
    }

    #[test]
    fn every_registered_key_is_settable() {
        let mut cfg = RunConfig::default();
        for key in RunConfig::KEYS {
            let probe = match *key {
                "train.precision" => "double",
                "data.path" | "run.out_dir" | "train.resume" | "ablate.seeds" => "x",
                "mi_bench.rho" | "mi_bench.dims" => "0.5",
                k if k.starts_with("ablate.disable") => "true",
                "moq.top_k_ratio" | "ftre.reduction_ratio" | "dcq.alpha" => "0.5",
                k if k.contains("lambda") || k.contains("beta") || k.contains("tau") => "1.0",
                k if k.contains("lr")
                    || k.contains("frac")
                    || k.contains("epsilon")
                    || k.contains("decay")
                    || k.contains("temperature") =>
                {
                    "0.5"
                }
                _ => "4",
            };
            cfg.set(key, probe).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
