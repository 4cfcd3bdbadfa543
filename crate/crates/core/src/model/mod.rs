//! FocusNetAlpha-style encoder/decoder assembled from the blocks in
//! [`crate::nn`].
//!
//! Top-level parameter prefixes, in declaration order:
//!
//! ```text
//! stem                5x5 conv from the input image
//! enc{i}              encoder block at scale i (enc{S-1} is the bottleneck)
//! dec{i}              decoder block at scale i, i = 0..S-2
//! head{i}             multiscale output head at decoder scale i
//! fuse                final head over the concatenated scale heads
//! ```
//! The block-level grammar below each prefix is listed in [`crate::nn`].

pub mod accounting;
pub mod config;
pub mod network;

use std::path::Path;

pub use accounting::{LayerSummary, Summary};
pub use config::{BlockKind, DecoderMode, ModelConfig};
pub use network::{skip_connect, Block, ModelOutput, Network};

use crate::autodiff::{Mode, Var};
use crate::error::{shape_err, Error, Result};
use crate::fnt1;
use crate::nn::{Init, ParamStore, Session};
use crate::tensor::Tensor;

/// Name of the JSON config sidecar written next to checkpoints.
pub const CONFIG_SIDECAR: &str = "config.json";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub net: Network,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let net = Network::register(&mut params, &mut init, config)?;
        Ok(Model {
            config: config.clone(),
            params,
            net,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(shape_err!("model input must be NCHW, got {shape:?}"));
        };
        if *c != self.config.in_channels {
            return Err(shape_err!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            ));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(shape_err!(
                "input {h}x{w} not divisible by {m} for {} scales",
                self.config.scales
            ));
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<ModelOutput> {
        self.check_input(s.graph_ref().shape(x))?;
        self.net.forward(s, x)
    }

    /// Eval-mode probabilities for a batch of images, `batch` at a time.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<Tensor> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = batch.max(1).min(n - start);
            let mut s = Session::new(&self.params, Mode::Eval);
            let x = s.input(images.batch_slice(start, len)?);
            let out = self.forward(&mut s, x)?;
            parts.push(s.graph_ref().value(out.prediction).clone());
            start += len;
        }
        Tensor::stack_batch(&parts)
    }

    pub fn count_params(&self) -> usize {
        self.params.param_count()
    }

    pub fn count_flops(&self, input_shape: &[usize]) -> Result<u64> {
        Ok(self.summary(input_shape)?.total_flops)
    }

    /// Saves every parameter and running statistic as FNT1.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> =
            self.params.iter().map(|(k, p)| (k, &p.value)).collect();
        fnt1::save(path, &entries)
    }

    /// Builds `config` and fills it from an FNT1 checkpoint. The checkpoint's
    /// name set must match the config's exactly.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let tensors = fnt1::load(path)?;
        Self::from_tensors(config, tensors)
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        let expected = model.params.len();
        let mut seen = std::collections::HashSet::new();
        for (name, t) in tensors {
            if model.params.get(&name).is_none() {
                return Err(Error::Checkpoint(format!(
                    "unknown parameter {name} for this config"
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            model
                .params
                .set(&name, t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if seen.len() != expected {
            let missing: Vec<&str> = model
                .params
                .names()
                .filter(|n| !seen.contains(*n))
                .take(3)
                .collect();
            return Err(Error::Checkpoint(format!(
                "{} parameters missing, e.g. {missing:?}",
                expected - seen.len()
            )));
        }
        Ok(model)
    }

    /// Loads `weights` with the `config.json` found in the same directory.
    pub fn load_with_sidecar(weights: &Path) -> Result<Self> {
        let dir = weights.parent().unwrap_or(Path::new("."));
        let cfg_path = dir.join(CONFIG_SIDECAR);
        let config = ModelConfig::load(&cfg_path).map_err(|e| match e {
            Error::Io(io) => Error::Checkpoint(format!("{}: {io}", cfg_path.display())),
            other => other,
        })?;
        Self::load(weights, &config)
    }
}
