use std::path::{Path, PathBuf};

use dialbt::corpus::{PrepareConfig, SynthSpec};
use dialbt::decode::DecodeConfig;
use dialbt::model::ModelConfig;
use dialbt::trainer::{BtConfig, TrainConfig};
use dialbt::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            num_layers: m.num_layers,
            max_len: m.max_len,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultitaskSection {
    pub mixing_ratio: f64,
}

impl Default for MultitaskSection {
    fn default() -> Self {
        MultitaskSection { mixing_ratio: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection { k: 200 }
    }
}

/// File inputs; every entry may also be given as a flag.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub pairs: Option<PathBuf>,
    pub mono: Option<PathBuf>,
    pub blocklist: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub backward_checkpoint: Option<PathBuf>,
    pub lm_checkpoint: Option<PathBuf>,
    pub disc_checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub hyp: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub synth: SynthSpec,
    pub prepare: PrepareConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub bt: BtConfig,
    pub multitask: MultitaskSection,
    pub decode: DecodeConfig,
    pub retrieval: RetrievalSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            synth: SynthSpec::default(),
            prepare: PrepareConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            bt: BtConfig::default(),
            multitask: MultitaskSection::default(),
            decode: DecodeConfig::default(),
            retrieval: RetrievalSection::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed into every component and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.rng_seed = self.seed;
        self.bt.phase.rng_seed = self.seed;
        self.decode.rng_seed = self.seed;
        self.train.validate()?;
        self.bt.phase.validate()?;
        self.decode.validate()?;
        if let Some(f) = &self.prepare.mono_filter {
            f.validate()?;
        }
        if self.retrieval.k == 0 {
            return Err(Error::config("retrieval.k must be >= 1"));
        }
        self.model.with_vocab(dialbt::model::NUM_SPECIALS + 1).validate()?;
        Ok(self)
    }

    /// Hash of everything that shapes results; output and input locations
    /// are excluded so relocated reruns compare equal.
    pub fn fingerprint(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
            m.remove("paths");
        }
        dialbt::evalsuite::config_fingerprint(&v)
    }

    /// Canonical JSON with sorted keys.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        Ok(s)
    }
}
