//! Run configuration: model size, training knobs, synthetic-domain shape,
//! and the method variants reachable from the command line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, FIRST_REGULAR_ID};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Training method variants. `Das` is the full method; the others remove
/// or replace one ingredient at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Importance-guided soft-masking plus contrastive integration.
    Das,
    /// Naive continual pre-training: no importance, no extra losses.
    Ncl,
    /// Soft-masking only.
    WoContrast,
    /// Contrastive loss only.
    WoSoftmask,
    /// Full method but without general-corpus importance initialization.
    WoInit,
    /// Full method with importance replaced by seeded uniform noise.
    RandomImportance,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Das,
        Method::Ncl,
        Method::WoContrast,
        Method::WoSoftmask,
        Method::WoInit,
        Method::RandomImportance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Das => "das",
            Method::Ncl => "ncl",
            Method::WoContrast => "wo-contrast",
            Method::WoSoftmask => "wo-softmask",
            Method::WoInit => "wo-init",
            Method::RandomImportance => "random-importance",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == s)
    }

    /// Whether this method tracks an importance store at all.
    pub fn uses_store(&self) -> bool {
        !matches!(self, Method::Ncl)
    }

    /// Whether importance is measured (vs drawn at random).
    pub fn measures_importance(&self) -> bool {
        !matches!(self, Method::Ncl | Method::RandomImportance)
    }

    /// Whether importance is seeded from a general corpus before domain 0.
    pub fn initializes_from_general(&self) -> bool {
        matches!(self, Method::Das | Method::WoContrast | Method::WoSoftmask)
    }

    pub fn contrast_enabled(&self) -> bool {
        matches!(self, Method::Das | Method::WoSoftmask | Method::WoInit | Method::RandomImportance)
    }

    pub fn softmask_enabled(&self) -> bool {
        matches!(self, Method::Das | Method::WoContrast | Method::WoInit | Method::RandomImportance)
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Das, Method::Ncl]
}
fn default_seeds() -> Vec<u64> {
    vec![100, 101, 102, 103, 104]
}
fn default_probe_epochs() -> usize {
    200
}
fn default_probe_lr() -> f64 {
    0.05
}
fn default_importance_tokens() -> usize {
    16_000
}
fn default_pair_prob() -> f64 {
    0.75
}

/// Everything needed to reproduce a continual run. Unknown keys in a
/// config file are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Number of domains trained in sequence.
    pub n_domains: usize,
    /// Token length of every synthetic sequence.
    pub seq_len: usize,
    /// Corpus size per domain, in tokens.
    pub domain_tokens: usize,
    /// Shared trigger tokens; each domain maps them to its own responses.
    pub n_triggers: usize,
    /// General filler tokens shared by all domains.
    pub n_fillers: usize,
    /// End-task examples per domain (train and test each).
    pub task_train: usize,
    pub task_test: usize,
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub probe_lr: f64,
    /// Token budget of the subset sampled per domain when measuring
    /// importance (rounded down to whole sequences).
    #[serde(default = "default_importance_tokens")]
    pub importance_tokens: usize,
    /// Probability that a two-token chunk of a corpus sequence is a
    /// (trigger, response) pair rather than filler.
    #[serde(default = "default_pair_prob")]
    pub pair_prob: f64,
    /// Methods to run; overridable from the command line.
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Seeds to sweep; overridable from the command line.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Where reports are written; falls back to the command-line flag or
    /// the output-root environment variable.
    #[serde(default)]
    pub output_dir: Option<std::path::PathBuf>,
}

impl RunConfig {
    /// Desk-scale defaults: small enough to run a full multi-seed
    /// comparison on one core in minutes.
    pub fn desk_scale() -> Self {
        let n_domains = 3;
        let n_triggers = 20;
        let n_fillers = 40;
        let vocab_size = FIRST_REGULAR_ID as usize + n_fillers + n_triggers + n_domains * n_triggers;
        RunConfig {
            model: ModelConfig {
                n_layers: 2,
                n_heads: 4,
                d_model: 64,
                d_ff: 128,
                vocab_size,
                max_seq_len: 32,
                dropout_p: 0.1,
            },
            train: TrainConfig::desk_scale(),
            n_domains,
            seq_len: 16,
            domain_tokens: 50_000,
            n_triggers,
            n_fillers,
            task_train: 200,
            task_test: 200,
            probe_epochs: default_probe_epochs(),
            probe_lr: default_probe_lr(),
            importance_tokens: default_importance_tokens(),
            pair_prob: default_pair_prob(),
            methods: default_methods(),
            seeds: default_seeds(),
            output_dir: None,
        }
    }

    /// Expected vocabulary size for this domain layout.
    pub fn expected_vocab(&self) -> usize {
        FIRST_REGULAR_ID as usize + self.n_fillers + self.n_triggers + self.n_domains * self.n_triggers
    }

    /// Every validation violation, so a bad config reports all problems
    /// at once rather than one per attempt.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.model.validate() {
            v.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            v.push(e.to_string());
        }
        if self.n_domains < 1 {
            v.push("n_domains must be >= 1".into());
        }
        if self.seq_len < 2 || self.seq_len % 2 != 0 {
            v.push("seq_len must be even and >= 2".into());
        }
        if self.seq_len > self.model.max_seq_len {
            v.push(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.seq_len, self.model.max_seq_len
            ));
        }
        if self.domain_tokens < self.seq_len {
            v.push("domain_tokens smaller than one sequence".into());
        }
        if self.n_triggers < 2 || self.n_fillers < 1 {
            v.push("need at least 2 triggers and 1 filler".into());
        }
        if self.model.vocab_size != self.expected_vocab() {
            v.push(format!(
                "model.vocab_size {} does not match domain layout (expected {})",
                self.model.vocab_size,
                self.expected_vocab()
            ));
        }
        if self.task_train == 0 || self.task_test == 0 {
            v.push("task_train and task_test must be >= 1".into());
        }
        if self.importance_tokens < self.seq_len {
            v.push("importance_tokens smaller than one sequence".into());
        }
        if !(0.0..=1.0).contains(&self.pair_prob) {
            v.push(format!("pair_prob {} not in [0,1]", self.pair_prob));
        }
        if self.methods.is_empty() {
            v.push("methods must not be empty".into());
        }
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                v.push(format!("duplicate seed {s}"));
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                v.push(format!("duplicate method {}", m.name()));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v.join("; ")))
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_is_valid() {
        RunConfig::desk_scale().validate().unwrap();
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("bogus"), None);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value =
            serde_json::to_value(RunConfig::desk_scale()).unwrap();
        v["surprise"] = serde_json::json!(1);
        let parsed: Result<RunConfig, _> = serde_json::from_value(v);
        assert!(parsed.is_err());
    }

    #[test]
    fn all_violations_are_listed() {
        let mut cfg = RunConfig::desk_scale();
        cfg.pair_prob = 2.0;
        cfg.task_train = 0;
        cfg.seeds = vec![];
        let v = cfg.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("pair_prob") && msg.contains("task_train") && msg.contains("seeds"));
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let mut cfg = RunConfig::desk_scale();
        cfg.model.vocab_size += 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ncl_disables_everything() {
        assert!(!Method::Ncl.uses_store());
        assert!(!Method::Ncl.contrast_enabled());
        assert!(!Method::Ncl.softmask_enabled());
        assert!(Method::Das.uses_store());
        assert!(Method::Das.contrast_enabled());
        assert!(Method::Das.softmask_enabled());
        assert!(!Method::WoContrast.contrast_enabled());
        assert!(!Method::WoSoftmask.softmask_enabled());
        assert!(!Method::WoInit.initializes_from_general());
        assert!(!Method::RandomImportance.measures_importance());
    }
}
