//! Run configuration: a TOML file with `[model]`, `[data]`, and `[train]`
//! sections. Unknown keys are rejected, every value is range-checked before
//! any file is touched, and the raw text is echoed verbatim into each
//! checkpoint the run writes.

use std::path::{Path, PathBuf};

use diffuma_core::{Error, ModelConfig, Result};
use serde::Deserialize;

/// Parsed run configuration plus the verbatim file text.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    /// Raw file contents, embedded unmodified into checkpoints.
    pub text: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    model: ModelSection,
    data: DataSection,
    train: TrainSection,
}

/// Architecture hyperparameters. Frame geometry is not configured here —
/// it is read from the training archive's header.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Latent width of the sequence path.
    pub d: usize,
    /// State dimension of each scan direction.
    pub n: usize,
    /// Number of sequence blocks.
    pub l: usize,
    /// Temporal kernel width of the per-block convolution (odd).
    pub k_t: usize,
    /// Number of denoiser transformer blocks.
    pub n_dit_blocks: usize,
    /// Spatial patch edge for denoiser tokens.
    pub patch_size: usize,
    /// Conditioning width.
    pub d_c: usize,
    /// Number of diffusion steps.
    pub t_diff: usize,
    /// Weight of the frame-reconstruction term.
    pub lambda: f64,
    /// Residual connections around each sequence block.
    #[serde(default = "default_true")]
    pub residual: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Training archive path (resolved relative to the working directory).
    pub train: PathBuf,
    /// Conditioning frames per sample.
    pub t_in: usize,
    /// Predicted frames per sample.
    pub t_out: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    /// Total optimizer steps the run should reach (0 exports the fresh
    /// initialization as a checkpoint without training).
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Also checkpoint every this many steps (0 = only after the last one).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RunConfigFile = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let cfg = RunConfig {
            model: file.model,
            data: file.data,
            train: file.train,
            text,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::config(format!(
                "train.lr must be positive and finite (got {})",
                self.train.lr
            )));
        }
        if self.train.batch == 0 {
            return Err(Error::config("train.batch must be at least 1"));
        }
        if self.data.t_in == 0 {
            return Err(Error::config("data.t_in must be at least 1"));
        }
        if self.data.t_out == 0 {
            return Err(Error::config("data.t_out must be at least 1"));
        }
        // Architecture ranges are validated by the core configuration once
        // the frame geometry is known; nothing model-specific to do here.
        Ok(())
    }

    /// Assembles the core model configuration from this file plus the frame
    /// geometry of the training archive.
    pub fn model_config(&self, channels: usize, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            d: self.model.d,
            n: self.model.n,
            l_blocks: self.model.l,
            k_t: self.model.k_t,
            residual: self.model.residual,
            n_dit_blocks: self.model.n_dit_blocks,
            patch_size: self.model.patch_size,
            d_c: self.model.d_c,
            t_diff: self.model.t_diff,
            lambda: self.model.lambda,
            channels,
            height,
            width,
            t_in: self.data.t_in,
            t_out: self.data.t_out,
        }
    }
}
