//! Run configuration shared by the command-line tool and the experiment
//! driver, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TaskConfig;
use crate::decode::BeamOptions;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
}

/// Sizes and regularization applied on top of [`ModelConfig::desk`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub encoder_layers: Option<usize>,
    pub encoder_hidden: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub decoder_hidden: Option<usize>,
    pub embed_dim: Option<usize>,
    pub attn_dim: Option<usize>,
    pub chunk_width: Option<usize>,
    pub conv_kernel: Option<usize>,
    pub noise_std: Option<f64>,
    pub init_offset: Option<f64>,
    pub dropout: Option<f64>,
    pub label_smoothing: Option<f64>,
    pub mtl_branch: Option<bool>,
    pub ce_head: Option<bool>,
    pub bottleneck_dim: Option<usize>,
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, alphabet: usize, vocab: usize, frame_stack: usize) -> ModelConfig {
        let mut c = ModelConfig::desk(input_dim, alphabet, vocab);
        c.encoder.frame_stack = frame_stack;
        let e = &mut c.encoder;
        set(&mut e.layers, self.encoder_layers);
        set(&mut e.hidden, self.encoder_hidden);
        set(&mut e.mtl_branch, self.mtl_branch);
        set(&mut e.ce_head, self.ce_head);
        set(&mut e.bottleneck_dim, self.bottleneck_dim);
        set(&mut e.dropout, self.dropout);
        let d = &mut c.decoder;
        set(&mut d.layers, self.decoder_layers);
        set(&mut d.hidden, self.decoder_hidden);
        set(&mut d.embed_dim, self.embed_dim);
        set(&mut d.dropout, self.dropout);
        set(&mut d.label_smoothing, self.label_smoothing);
        let a = &mut c.attention;
        set(&mut a.attn_dim, self.attn_dim);
        set(&mut a.chunk_width, self.chunk_width);
        set(&mut a.conv_kernel, self.conv_kernel);
        set(&mut a.noise_std, self.noise_std);
        set(&mut a.init_offset, self.init_offset);
        c
    }
}

fn set<T: Copy>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 8, max_len: 64, length_penalty: 0.0 }
    }
}

impl DecodeConfig {
    pub fn beam_options(&self) -> BeamOptions {
        BeamOptions { beam: self.beam, max_len: self.max_len, length_penalty: self.length_penalty }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskConfig,
    /// Utterances generated for the held-out split.
    pub dev_size: usize,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskConfig::default(),
            dev_size: 200,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task.validate().map_err(ConfigError::Parse)?;
        if self.decode.beam == 0 || self.decode.max_len == 0 {
            return Err(ConfigError::Parse("decode.beam and decode.max_len must be >= 1".into()));
        }
        Ok(())
    }

    /// Model shape for this task: one-hot frames over the segment alphabet.
    pub fn model_config(&self) -> ModelConfig {
        let t = &self.task;
        self.model.build(t.vocab, t.vocab, t.output_vocab(), t.stack)
    }
}
