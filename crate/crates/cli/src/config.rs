//! Flat key=value run configuration: scenario, extractor, pretraining,
//! and adaptation settings with documented defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use protoalign::bench::{PretrainConfig, ScenarioParams};
use protoalign::engine::{AdaptationConfig, PfaObjective};
use protoalign::uncertainty::NegativesThresholdMode;
use protoalign::{Error, Result};

/// Every key with its default value. The defaults describe the canonical
/// four-class shifted-Gaussian scenario.
pub const DEFAULTS: &[(&str, &str)] = &[
    // scenario geometry and sampling
    ("class_count", "4"),
    ("input_dim", "8"),
    ("class_std", "0.3"),
    ("separation", "1.2"),
    ("rotation_angle", "0.5235987755982988"),
    ("scale", "1.3"),
    ("shift_norm", "1.0"),
    ("source_proportions", "uniform"),
    ("target_proportions", "uniform"),
    ("train_count", "2000"),
    ("eval_count", "1000"),
    ("data_seed", "1"),
    ("geometry_seed", "17"),
    // extractor architecture
    ("hidden_sizes", "64,64"),
    ("feature_dim", "16"),
    // source pretraining
    ("pretrain_epochs", "40"),
    ("pretrain_batch_size", "16"),
    ("pretrain_lr", "1e-3"),
    ("pretrain_weight_decay", "0"),
    ("pretrain_seed", "33"),
    // adaptation
    ("temperature", "0.1"),
    ("batch_size", "16"),
    ("learning_rate", "1e-4"),
    ("weight_decay", "5e-4"),
    ("pfa_iters", "200"),
    ("cl_iters", "400"),
    ("alpha", "80"),
    ("k_queries", "64"),
    ("n_negatives", "256"),
    ("rank_threshold", "3"),
    ("em_momentum", "0.9"),
    ("seed", "1"),
    ("negatives_threshold_mode", "pseudo_label"),
    ("pfa_objective", "full"),
    ("cl_keep_pfa_loss", "false"),
];

/// Fully-resolved run settings; echoed verbatim into every report.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown and repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if !config.values.contains_key(key) {
                return Err(Error::format(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
            if seen.contains(&key.to_string()) {
                return Err(Error::format(format!("line {}: key {key:?} repeated", lineno + 1)));
            }
            seen.push(key.to_string());
            config.values.insert(key.to_string(), value.to_string());
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Replaces one known key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::invalid(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// The full key set with every default applied.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    fn get_f64(&self, key: &str) -> Result<f64> {
        self.raw(key)
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::invalid(format!("key {key:?} must be a finite number")))
    }

    fn get_usize(&self, key: &str) -> Result<usize> {
        self.raw(key)
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("key {key:?} must be a nonnegative integer")))
    }

    fn get_u64(&self, key: &str) -> Result<u64> {
        self.raw(key)
            .parse::<u64>()
            .map_err(|_| Error::invalid(format!("key {key:?} must be a nonnegative integer")))
    }

    fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::invalid(format!("key {key:?} must be true or false"))),
        }
    }

    fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|f| {
                f.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("key {key:?} must list integers")))
            })
            .collect()
    }

    /// A proportions entry: `uniform` or a comma list.
    fn get_proportions(&self, key: &str, classes: usize) -> Result<Vec<f64>> {
        let raw = self.raw(key);
        if raw == "uniform" {
            return Ok(vec![1.0 / classes as f64; classes]);
        }
        raw.split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::invalid(format!("key {key:?} must list numbers")))
            })
            .collect()
    }

    pub fn scenario_params(&self) -> Result<ScenarioParams<f64>> {
        let class_count = self.get_usize("class_count")?;
        Ok(ScenarioParams {
            class_count,
            input_dim: self.get_usize("input_dim")?,
            class_std: self.get_f64("class_std")?,
            separation: self.get_f64("separation")?,
            rotation_angle: self.get_f64("rotation_angle")?,
            scale: self.get_f64("scale")?,
            shift_norm: self.get_f64("shift_norm")?,
            source_proportions: self.get_proportions("source_proportions", class_count)?,
            target_proportions: self.get_proportions("target_proportions", class_count)?,
            train_count: self.get_usize("train_count")?,
            eval_count: self.get_usize("eval_count")?,
            seed: self.get_u64("data_seed")?,
            geometry_seed: self.get_u64("geometry_seed")?,
        })
    }

    /// Full layer chain: input width, hidden widths, feature width.
    pub fn layer_sizes(&self) -> Result<Vec<usize>> {
        let mut sizes = vec![self.get_usize("input_dim")?];
        sizes.extend(self.get_usize_list("hidden_sizes")?);
        sizes.push(self.get_usize("feature_dim")?);
        Ok(sizes)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig<f64>> {
        Ok(PretrainConfig {
            layer_sizes: self.layer_sizes()?,
            epochs: self.get_usize("pretrain_epochs")?,
            batch_size: self.get_usize("pretrain_batch_size")?,
            learning_rate: self.get_f64("pretrain_lr")?,
            weight_decay: self.get_f64("pretrain_weight_decay")?,
            temperature: self.get_f64("temperature")?,
            seed: self.get_u64("pretrain_seed")?,
        })
    }

    pub fn adaptation_config(&self) -> Result<AdaptationConfig> {
        let negatives_mode = match self.raw("negatives_threshold_mode") {
            "pseudo_label" => NegativesThresholdMode::PseudoLabel,
            "target_class" => NegativesThresholdMode::TargetClass,
            other => {
                return Err(Error::invalid(format!(
                    "negatives_threshold_mode {other:?} must be pseudo_label or target_class"
                )))
            }
        };
        let pfa_objective = match self.raw("pfa_objective") {
            "full" => PfaObjective::Full,
            "t2p_only" => PfaObjective::T2pOnly,
            other => {
                return Err(Error::invalid(format!(
                    "pfa_objective {other:?} must be full or t2p_only"
                )))
            }
        };
        Ok(AdaptationConfig {
            learning_rate: self.get_f64("learning_rate")?,
            weight_decay: self.get_f64("weight_decay")?,
            temperature: self.get_f64("temperature")?,
            batch_size: self.get_usize("batch_size")?,
            pfa_iters: self.get_usize("pfa_iters")?,
            cl_iters: self.get_usize("cl_iters")?,
            alpha: self.get_f64("alpha")?,
            k_queries: self.get_usize("k_queries")?,
            n_negatives: self.get_usize("n_negatives")?,
            rank_threshold: self.get_usize("rank_threshold")?,
            em_momentum: self.get_f64("em_momentum")?,
            seed: self.get_u64("seed")?,
            negatives_mode,
            pfa_objective,
            cl_keep_pfa_loss: self.get_bool("cl_keep_pfa_loss")?,
        })
    }
}
