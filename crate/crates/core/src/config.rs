//! Run configuration, read from TOML. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::CodecParams;
use crate::data::DataParams;
use crate::dit::ModelConfig;
use crate::error::{FfpError, Result};
use crate::heads::{DEFAULT_EPSILON, DEFAULT_PROBE_SAMPLES};
use crate::losses::LossWeights;
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Pixel canvas; must equal the latent grid times the codec patch.
    pub height: usize,
    pub width: usize,
    pub rect_min: usize,
    pub rect_max: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda_motion: f64,
    pub lambda_mmd: f64,
    /// Spatial pooling factor applied to taps before the distillation losses.
    pub downsample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsSection {
    pub epsilon: f64,
    pub samples: usize,
    /// Standard-RoPE, flow-only steps run before the heads are classified.
    pub bootstrap_steps: usize,
    /// Use this manifest instead of bootstrapping one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub sampler_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub out_dir: PathBuf,
    /// Per-head adaptive rotary routing (off = standard RoPE everywhere).
    pub adaptive_rope: bool,
    pub model: ModelConfig,
    pub data: DataSection,
    pub codec: CodecParams,
    pub loss: LossSection,
    pub heads: HeadsSection,
    pub optimizer: AdamWConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 2,
            out_dir: PathBuf::from("runs/toy"),
            adaptive_rope: true,
            model: ModelConfig::default(),
            data: DataSection {
                height: 16,
                width: 16,
                rect_min: 4,
                rect_max: 6,
                train_samples: 256,
                eval_samples: 16,
            },
            codec: CodecParams::default(),
            loss: LossSection {
                lambda_motion: 5.0,
                lambda_mmd: 1.0,
                downsample: 2,
            },
            heads: HeadsSection {
                epsilon: DEFAULT_EPSILON,
                samples: DEFAULT_PROBE_SAMPLES,
                bootstrap_steps: 500,
                manifest: None,
            },
            optimizer: AdamWConfig::default(),
            eval: EvalSection { sampler_steps: 20 },
        }
    }
}

/// The three ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Baseline,
    Astrope,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Baseline, Ablation::Astrope, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Astrope => "astrope",
            Ablation::Full => "full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = FfpError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| FfpError::InvalidArgument(format!("unknown ablation row {s:?}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FfpError::Configuration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Applies an ablation row: routing and loss weights, plus a per-row
    /// output subdirectory.
    pub fn with_ablation(mut self, row: Ablation) -> Self {
        let (adaptive, lm, ld) = match row {
            Ablation::Baseline => (false, 0.0, 0.0),
            Ablation::Astrope => (true, 0.0, 0.0),
            Ablation::Full => (true, 5.0, 1.0),
        };
        self.adaptive_rope = adaptive;
        self.loss.lambda_motion = lm;
        self.loss.lambda_mmd = ld;
        self.out_dir = self.out_dir.join(row.name());
        self
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_motion: self.loss.lambda_motion,
            lambda_mmd: self.loss.lambda_mmd,
        }
    }

    pub fn data_params(&self) -> DataParams {
        DataParams {
            frames: self.model.frames,
            height: self.data.height,
            width: self.data.width,
            rect_min: self.data.rect_min,
            rect_max: self.data.rect_max,
        }
    }

    /// Whether the run classifies heads itself partway through.
    pub fn bootstraps_partition(&self) -> bool {
        self.adaptive_rope && self.heads.manifest.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FfpError::Configuration(m));
        self.model.validate()?;
        self.data_params()
            .validate()
            .map_err(|e| FfpError::Configuration(e.to_string()))?;
        self.optimizer
            .validate()
            .map_err(|e| FfpError::Configuration(e.to_string()))?;
        LossWeights::new(self.loss.lambda_motion, self.loss.lambda_mmd)
            .map_err(|e| FfpError::Configuration(e.to_string()))?;
        let p = self.codec.patch;
        if self.data.height != self.model.latent_height * p
            || self.data.width != self.model.latent_width * p
        {
            return bad(format!(
                "data canvas {}x{} must equal latent grid {}x{} times patch {p}",
                self.data.height,
                self.data.width,
                self.model.latent_height,
                self.model.latent_width
            ));
        }
        if self.codec.channels != self.model.channels {
            return bad(format!(
                "codec channels {} != model channels {}",
                self.codec.channels, self.model.channels
            ));
        }
        let k = self.loss.downsample;
        if k == 0
            || !self.model.latent_height.is_multiple_of(k)
            || !self.model.latent_width.is_multiple_of(k)
        {
            return bad(format!("loss.downsample {k} must divide the latent grid"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.data.train_samples == 0 {
            return bad("steps, batch_size and data.train_samples must be positive".into());
        }
        if !self.weights().is_zero() && self.model.tap_blocks.is_empty() {
            return bad("distillation weights are set but model.tap_blocks is empty".into());
        }
        if !self.weights().is_zero() && self.model.frames < 2 {
            return bad("distillation needs at least two latent frames".into());
        }
        if !(self.heads.epsilon.is_finite() && self.heads.epsilon >= 0.0) || self.heads.samples == 0
        {
            return bad("heads.epsilon must be >= 0 and heads.samples positive".into());
        }
        if self.bootstraps_partition() && self.heads.bootstrap_steps >= self.steps {
            return bad(format!(
                "heads.bootstrap_steps {} must be below steps {}",
                self.heads.bootstrap_steps, self.steps
            ));
        }
        if self.eval.sampler_steps == 0 {
            return bad("eval.sampler_steps must be positive".into());
        }
        Ok(())
    }
}
