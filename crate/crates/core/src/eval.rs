//! Evaluation: integrate the learned velocity field from noise and score
//! the result against the synthetic ground truth.

use std::fmt::Write as _;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::ToyCodec;
use crate::data::{DataParams, DatasetSpec, EditKind, VideoClip};
use crate::dit::{dit_forward, RopeRouting};
use crate::error::{FfpError, Result};
use crate::latent::{ConditioningPack, VideoLatent};
use crate::predictor::predict_coefficients;
use crate::rng::Stream;
use crate::train::{prepare, PreparedSample};

pub const REPORT_SCHEMA: &str = "ffprop.eval/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub seed: u64,
    pub edit_kind: EditKind,
    pub latent_mse: f64,
    pub first_frame_mse: f64,
    /// Mean per-frame centroid distance in pixels; `None` when the edit
    /// removes the object.
    pub motion_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub checkpoint_step: u64,
    pub adaptive: bool,
    pub sampler_steps: usize,
    pub samples: usize,
    pub latent_mse: f64,
    pub first_frame_mse: f64,
    pub motion_error: Option<f64>,
    pub motion_samples: usize,
    pub per_sample: Vec<SampleEval>,
}

fn mse(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.zip(b) {
        s += (x - y) * (x - y);
        n += 1;
    }
    s / n as f64
}

/// Velocity of the checkpoint's model at `(z, t)` for one sample.
fn velocity(
    ckpt: &Checkpoint,
    item: &PreparedSample,
    routing: &RopeRouting<'_>,
    z: &VideoLatent,
    t: f64,
) -> Result<VideoLatent> {
    let pack = ConditioningPack::new(z.clone(), item.source.clone(), item.first_frame.clone())?;
    Ok(dit_forward(&pack, t, &ckpt.params.dit, &ckpt.meta.model, routing)?.0)
}

/// Fixed-step midpoint integration of `dz/dt = v` from `t = 1` (noise) to
/// `t = 0`.
pub fn generate(
    ckpt: &Checkpoint,
    item: &PreparedSample,
    noise: &VideoLatent,
    steps: usize,
) -> Result<VideoLatent> {
    let routing = match (&ckpt.meta.partition, ckpt.meta.adaptive) {
        (Some(partition), true) => RopeRouting::Adaptive {
            partition,
            coeffs: predict_coefficients(&item.source, &ckpt.params.predictor)?,
        },
        _ => RopeRouting::Standard,
    };
    let dt = 1.0 / steps as f64;
    let mut z = noise.clone();
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v1 = velocity(ckpt, item, &routing, &z, t)?;
        let mid = VideoLatent::new(&z.data - &(&v1.data * (0.5 * dt)));
        let v2 = velocity(ckpt, item, &routing, &mid, t - 0.5 * dt)?;
        z = VideoLatent::new(&z.data - &(&v2.data * dt));
    }
    Ok(z)
}

/// Intensity-weighted centroid of `|clip − background|²` per frame, in
/// (row, col) pixel coordinates. Falls back to the canvas centre when the
/// frame matches the background.
pub fn foreground_centroids(clip: &VideoClip, background: &VideoClip) -> Vec<(f64, f64)> {
    let (f, h, w, _) = clip.pixels.dim();
    (0..f)
        .map(|k| {
            let (mut sw, mut sy, mut sx) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let d: f64 = (0..3)
                        .map(|c| {
                            (clip.pixels[[k, y, x, c]] - background.pixels[[k, y, x, c]]).powi(2)
                        })
                        .sum();
                    sw += d;
                    sy += d * y as f64;
                    sx += d * x as f64;
                }
            }
            if sw < 1e-12 {
                ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
            } else {
                (sy / sw, sx / sw)
            }
        })
        .collect()
}

/// Scores one generated latent.
pub fn score_sample(
    index: usize,
    generated: &VideoLatent,
    item: &PreparedSample,
    codec: &ToyCodec,
    params: &DataParams,
) -> Result<SampleEval> {
    let latent_mse = mse(
        generated.data.iter().copied(),
        item.target.data.iter().copied(),
    );
    let first_frame_mse = mse(
        generated.data.index_axis(Axis(0), 0).iter().copied(),
        item.first_frame.iter().copied(),
    );
    let s = &item.sample;
    let motion_error = match s.edit_kind {
        EditKind::ObjectRemove => None,
        _ => {
            let decoded = codec.decode(generated)?;
            // Compare against the background as seen through the codec.
            let background = codec.decode(&codec.encode(&s.target_background(params))?)?;
            let found = foreground_centroids(&decoded, &background);
            let err = found
                .iter()
                .enumerate()
                .map(|(k, &(y, x))| {
                    let (ty, tx) = s
                        .motion_spec
                        .centroid(k, params.height, params.width)
                        .unwrap_or((y, x));
                    ((y - ty).powi(2) + (x - tx).powi(2)).sqrt()
                })
                .sum::<f64>()
                / found.len() as f64;
            Some(err)
        }
    };
    Ok(SampleEval {
        index,
        seed: s.seed,
        edit_kind: s.edit_kind,
        latent_mse,
        first_frame_mse,
        motion_error,
    })
}

fn check_compatible(ckpt: &Checkpoint, data: &DatasetSpec, codec: &ToyCodec) -> Result<()> {
    let p = &data.params;
    let shape = codec.latent_shape(p.frames, p.height, p.width)?;
    if shape != ckpt.meta.model.latent_shape() {
        return Err(FfpError::Configuration(format!(
            "eval data encodes to {:?}, checkpoint model expects {:?}",
            shape,
            ckpt.meta.model.latent_shape()
        )));
    }
    Ok(())
}

/// Aggregates per-sample scores into a report.
pub fn summarise(
    ckpt: &Checkpoint,
    sampler_steps: usize,
    per_sample: Vec<SampleEval>,
) -> EvalReport {
    let n = per_sample.len().max(1) as f64;
    let motion: Vec<f64> = per_sample.iter().filter_map(|s| s.motion_error).collect();
    EvalReport {
        schema: REPORT_SCHEMA.into(),
        checkpoint_step: ckpt.meta.step,
        adaptive: ckpt.meta.adaptive,
        sampler_steps,
        samples: per_sample.len(),
        latent_mse: per_sample.iter().map(|s| s.latent_mse).sum::<f64>() / n,
        first_frame_mse: per_sample.iter().map(|s| s.first_frame_mse).sum::<f64>() / n,
        motion_error: (!motion.is_empty())
            .then(|| motion.iter().sum::<f64>() / motion.len() as f64),
        motion_samples: motion.len(),
        per_sample,
    }
}

/// Generates every sample of `data` from its own seeded noise and scores it.
pub fn evaluate(ckpt: &Checkpoint, data: &DatasetSpec, sampler_steps: usize) -> Result<EvalReport> {
    evaluate_with(ckpt, data, sampler_steps, |item, noise| {
        generate(ckpt, item, noise, sampler_steps)
    })
}

/// As [`evaluate`], with the generator supplied by the caller.
pub fn evaluate_with(
    ckpt: &Checkpoint,
    data: &DatasetSpec,
    sampler_steps: usize,
    mut generator: impl FnMut(&PreparedSample, &VideoLatent) -> Result<VideoLatent>,
) -> Result<EvalReport> {
    if sampler_steps == 0 {
        return Err(FfpError::InvalidArgument(
            "sampler_steps must be positive".into(),
        ));
    }
    let codec = ToyCodec::new(ckpt.meta.codec)?;
    check_compatible(ckpt, data, &codec)?;
    let items = prepare(data.render()?, &codec)?;
    let shape = ckpt.meta.model.latent_shape();
    let per_sample = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let noise = crate::train::seeded_normal(data.seed, Stream::Eval, i as u64, shape);
            let z = generator(item, &noise)?;
            score_sample(i, &z, item, &codec, &data.params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarise(ckpt, sampler_steps, per_sample))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.6e}"))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "checkpoint step     {}", self.checkpoint_step);
        let _ = writeln!(s, "adaptive rope       {}", self.adaptive);
        let _ = writeln!(s, "sampler steps       {}", self.sampler_steps);
        let _ = writeln!(s, "samples             {}", self.samples);
        let _ = writeln!(s, "latent mse          {:.6e}", self.latent_mse);
        let _ = writeln!(s, "first-frame mse     {:.6e}", self.first_frame_mse);
        let _ = writeln!(
            s,
            "motion error (px)   {} over {} samples",
            fmt_opt(self.motion_error),
            self.motion_samples
        );
        s
    }

    /// Whitespace-separated columns with a header row, one line per sample.
    pub fn plot_data(&self) -> String {
        let mut s = String::from("index seed edit_kind latent_mse first_frame_mse motion_error\n");
        for r in &self.per_sample {
            let kind = serde_json::to_value(r.edit_kind)
                .expect("edit kind")
                .as_str()
                .unwrap_or("?")
                .to_string();
            let motion = r
                .motion_error
                .map_or_else(|| "nan".into(), |m| format!("{m:e}"));
            let _ = writeln!(
                s,
                "{} {} {} {:e} {:e} {}",
                r.index, r.seed, kind, r.latent_mse, r.first_frame_mse, motion
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FfpError::Format(format!("eval report: {e}")))
    }
}

/// Side-by-side table of several reports, e.g. the three ablation rows.
pub fn comparison_table(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>14} {:>16} {:>14}",
        "row", "latent_mse", "first_frame_mse", "motion_px"
    );
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>14.6e} {:>16.6e} {:>14}",
            name,
            r.latent_mse,
            r.first_frame_mse,
            fmt_opt(r.motion_error)
        );
    }
    s
}
