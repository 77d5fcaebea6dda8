//! Training loop: flow matching on the editing task plus optional
//! identity-propagation self-distillation.
//!
//! Each batch item builds its own tape; items run in parallel and their
//! gradients are summed in batch order, so thread scheduling never changes
//! a bit of the result.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::codec::ToyCodec;
use crate::config::RunConfig;
use crate::data::{DatasetSpec, FfpSample};
use crate::dit::{
    dit_forward, forward_graph, tap_latent, GraphRouting, ModelConfig, ModelParams, ProbeOptions,
    RopeRouting,
};
use crate::error::{FfpError, Result};
use crate::graph::Graph;
use crate::heads::HeadPartition;
use crate::latent::{ConditioningPack, LatentShape, VideoLatent};
use crate::losses::{
    flow_match_loss_grad, interpolate, mmd_loss_grad, motion_loss_grad, LossWeights,
};
use crate::optim::AdamW;
use crate::predictor::{predict_alpha_graph, predict_coefficients};
use crate::probe::{classify_model, probe_inputs};
use crate::rng::{stream_rng, Stream};

pub const METRICS_SCHEMA: &str = "ffprop.metrics/1";

/// Latents for one sample, encoded once up front.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub source: VideoLatent,
    pub target: VideoLatent,
    /// Encoded edited first frame, `(H', W', C)`.
    pub first_frame: Array3<f64>,
    pub sample: FfpSample,
}

pub fn prepare(samples: Vec<FfpSample>, codec: &ToyCodec) -> Result<Vec<PreparedSample>> {
    samples
        .into_iter()
        .map(|s| {
            Ok(PreparedSample {
                source: codec.encode(&s.source)?,
                target: codec.encode(&s.target)?,
                first_frame: codec.encode_frame(&s.edited_first_frame)?,
                sample: s,
            })
        })
        .collect()
}

/// Loss terms, predicted coefficients and parameter gradients for one item.
#[derive(Debug, Clone)]
pub struct ItemOutcome {
    pub l_fm: f64,
    pub l_motion: f64,
    pub l_mmd: f64,
    pub total: f64,
    pub alpha: Option<(f64, f64)>,
    pub grads: ModelParams,
}

/// Everything a single training item needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ItemSpec<'a> {
    pub model: &'a ModelConfig,
    pub partition: Option<&'a HeadPartition>,
    pub weights: LossWeights,
    pub downsample: usize,
}

fn check(value: f64, component: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(FfpError::NonFinite {
            component: component.into(),
            step,
        })
    }
}

/// Teacher taps: the same network solving identity propagation (the
/// target video conditioned on itself and its own first frame) with the
/// same noise and timestep, evaluated without a tape.
pub fn teacher_taps(
    params: &ModelParams,
    spec: &ItemSpec<'_>,
    noisy: &VideoLatent,
    target: &VideoLatent,
    t: f64,
) -> Result<crate::dit::BlockTapSet> {
    let pack = ConditioningPack::new(noisy.clone(), target.clone(), target.frame(0))?;
    let routing = match spec.partition {
        Some(partition) => RopeRouting::Adaptive {
            partition,
            coeffs: predict_coefficients(target, &params.predictor)?,
        },
        None => RopeRouting::Standard,
    };
    Ok(dit_forward(&pack, t, &params.dit, spec.model, &routing)?.1)
}

/// Forward and backward for one item.
pub fn item_loss_and_grad(
    params: &ModelParams,
    spec: &ItemSpec<'_>,
    item: &PreparedSample,
    noise: &VideoLatent,
    t: f64,
    step: usize,
) -> Result<ItemOutcome> {
    let noisy = interpolate(&item.target, noise, t);
    let mut g = Graph::new();
    let pv = params.map(|_, a| g.param(a.clone()));
    let (routing, alpha_var) = match spec.partition {
        Some(partition) => {
            let alpha = predict_alpha_graph(&mut g, &pv.predictor, &item.source);
            (GraphRouting::Adaptive { partition, alpha }, Some(alpha))
        }
        None => (GraphRouting::Standard, None),
    };
    let pack = ConditioningPack::new(noisy.clone(), item.source.clone(), item.first_frame.clone())?;
    let out = forward_graph(
        &mut g,
        &pv.dit,
        spec.model,
        &pack,
        t,
        routing,
        &ProbeOptions::default(),
    )?;

    let velocity =
        VideoLatent::from_tokens(g.value(out.velocity).view(), spec.model.latent_shape())?;
    let (l_fm, g_fm) = flow_match_loss_grad(&velocity, &item.target, noise)?;
    check(l_fm, "l_fm", step)?;
    let mut root = g.external_scalar(out.velocity, l_fm, g_fm.to_tokens());

    let (mut l_motion, mut l_mmd) = (0.0, 0.0);
    if !spec.weights.is_zero() {
        let teacher = teacher_taps(params, spec, &noisy, &item.target, t)?;
        for &(block, var) in &out.taps {
            let student = tap_latent(&g, var, spec.model);
            let reference = &teacher[&block];
            let mut value = 0.0;
            let mut grad = Array2::zeros(g.value(var).dim());
            if spec.weights.lambda_motion > 0.0 {
                let (l, gl) = motion_loss_grad(&student, reference, spec.downsample)?;
                check(l, "l_motion", step)?;
                l_motion += l;
                value += spec.weights.lambda_motion * l;
                grad.scaled_add(spec.weights.lambda_motion, &gl.to_tokens());
            }
            if spec.weights.lambda_mmd > 0.0 {
                let (l, gl) = mmd_loss_grad(&student, reference, spec.downsample)?;
                check(l, "l_mmd", step)?;
                l_mmd += l;
                value += spec.weights.lambda_mmd * l;
                grad.scaled_add(spec.weights.lambda_mmd, &gl.to_tokens());
            }
            let term = g.external_scalar(var, value, grad);
            root = g.add(root, term);
        }
    }
    let total = g.scalar(root);
    check(total, "total", step)?;
    let mut gr = g.backward(root);
    let grads = pv.map(|_, &v| gr.take_or_zeros(v, g.value(v).dim()));
    let alpha = alpha_var.map(|a| {
        let v = g.value(a);
        (v[[0, 0]], v[[0, 1]])
    });
    Ok(ItemOutcome {
        l_fm,
        l_motion,
        l_mmd,
        total,
        alpha,
        grads,
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema: String,
    pub step: usize,
    /// `bootstrap` before the head partition exists, `main` after.
    pub phase: String,
    pub l_fm: f64,
    pub l_motion: f64,
    pub l_mmd: f64,
    pub total: f64,
    pub alpha_s_mean: Option<f64>,
    pub alpha_t_mean: Option<f64>,
}

/// Wall-clock side channel, kept apart so the metrics stream stays
/// bitwise reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: usize,
    pub wall_time_s: f64,
}

/// Standard normal latent drawn from one sub-stream.
pub fn seeded_normal(seed: u64, stream: Stream, index: u64, shape: LatentShape) -> VideoLatent {
    let mut rng = stream_rng(seed, stream, index);
    VideoLatent::new(Array4::from_shape_fn(shape.dims(), |_| {
        rng.sample(StandardNormal)
    }))
}

/// Noise for batch slot `slot` of `step`.
pub fn step_noise(
    seed: u64,
    step: usize,
    slot: usize,
    batch: usize,
    shape: LatentShape,
) -> VideoLatent {
    seeded_normal(seed, Stream::Noise, (step * batch + slot) as u64, shape)
}

pub fn step_timestep(seed: u64, step: usize, slot: usize, batch: usize) -> f64 {
    stream_rng(seed, Stream::Timestep, (step * batch + slot) as u64).random_range(0.0..1.0)
}

pub fn step_batch(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Batch, step as u64);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

pub struct RunPaths {
    pub metrics: PathBuf,
    pub timing: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub dataset: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            metrics: out_dir.join("metrics.jsonl"),
            timing: out_dir.join("timing.jsonl"),
            checkpoint: out_dir.join("checkpoint.ffpk"),
            manifest: out_dir.join("partition.json"),
            dataset: out_dir.join("eval_data.json"),
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<MetricsRecord>,
    pub partition: Option<HeadPartition>,
    pub paths: RunPaths,
}

/// The held-out evaluation set for a run: samples drawn after the
/// training range of the same seed.
pub fn eval_dataset(cfg: &RunConfig) -> Result<DatasetSpec> {
    let mut spec = DatasetSpec::generate(
        cfg.seed,
        cfg.data.train_samples + cfg.data.eval_samples,
        cfg.data_params(),
    )?;
    spec.samples.drain(..cfg.data.train_samples);
    Ok(spec)
}

/// Runs training and writes metrics, timing, manifest (when classified)
/// and the final checkpoint into `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

pub fn train_with(
    cfg: &RunConfig,
    mut on_step: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let paths = RunPaths::new(&cfg.out_dir);
    let started = Instant::now();

    let codec = ToyCodec::new(cfg.codec)?;
    let train_spec = DatasetSpec::generate(cfg.seed, cfg.data.train_samples, cfg.data_params())?;
    let data = prepare(train_spec.render()?, &codec)?;
    fs::write(&paths.dataset, eval_dataset(cfg)?.to_json())?;

    let model = &cfg.model;
    let mut params = ModelParams::init(&mut stream_rng(cfg.seed, Stream::Init, 0), model);
    let mut opt = AdamW::new(cfg.optimizer, &params);

    let mut partition = match (&cfg.heads.manifest, cfg.adaptive_rope) {
        (Some(path), true) => {
            let p = HeadPartition::load(path)?;
            p.check_covers(model.blocks, model.heads)?;
            Some(p)
        }
        _ => None,
    };
    let bootstrap = if cfg.bootstraps_partition() {
        cfg.heads.bootstrap_steps
    } else {
        0
    };

    let mut metrics = BufWriter::new(File::create(&paths.metrics)?);
    let mut timing = BufWriter::new(File::create(&paths.timing)?);
    let mut records = Vec::with_capacity(cfg.steps);
    let shape = model.latent_shape();

    for step in 0..cfg.steps {
        if cfg.bootstraps_partition() && step == bootstrap {
            let inputs = probe_inputs(&data, cfg.heads.samples, cfg.seed)?;
            let p = classify_model(&params, model, &inputs, cfg.heads.epsilon, &[])?;
            p.save(&paths.manifest)?;
            partition = Some(p);
        }
        let in_bootstrap = step < bootstrap;
        let spec = ItemSpec {
            model,
            partition: if in_bootstrap {
                None
            } else {
                partition.as_ref()
            },
            weights: if in_bootstrap {
                LossWeights::new(0.0, 0.0)?
            } else {
                cfg.weights()
            },
            downsample: cfg.loss.downsample,
        };
        let b = cfg.batch_size;
        let picks = step_batch(cfg.seed, step, b, data.len());
        let outcomes = (0..b)
            .into_par_iter()
            .map(|slot| {
                let noise = step_noise(cfg.seed, step, slot, b, shape);
                let t = step_timestep(cfg.seed, step, slot, b);
                item_loss_and_grad(&params, &spec, &data[picks[slot]], &noise, t, step)
            })
            .collect::<Vec<_>>();
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        let inv = 1.0 / b as f64;
        let mut grads = params.zeros_like();
        for o in &outcomes {
            for ((_, acc), (_, g)) in grads.named_mut().into_iter().zip(o.grads.named()) {
                acc.scaled_add(inv, g);
            }
        }
        for (name, g) in grads.named() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(FfpError::NonFinite {
                    component: format!("gradient {name}"),
                    step,
                });
            }
        }
        opt.step(&mut params, &grads);

        let mean = |f: fn(&ItemOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() * inv;
        let alpha_mean = |i: usize| {
            outcomes
                .iter()
                .map(|o| o.alpha.map(|a| if i == 0 { a.0 } else { a.1 }))
                .sum::<Option<f64>>()
                .map(|s| s * inv)
        };
        let record = MetricsRecord {
            schema: METRICS_SCHEMA.into(),
            step,
            phase: if in_bootstrap { "bootstrap" } else { "main" }.into(),
            l_fm: mean(|o| o.l_fm),
            l_motion: mean(|o| o.l_motion),
            l_mmd: mean(|o| o.l_mmd),
            total: mean(|o| o.total),
            alpha_s_mean: alpha_mean(0),
            alpha_t_mean: alpha_mean(1),
        };
        writeln!(
            metrics,
            "{}",
            serde_json::to_string(&record).expect("record serialises")
        )?;
        let wall = TimingRecord {
            step,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        writeln!(
            timing,
            "{}",
            serde_json::to_string(&wall).expect("record serialises")
        )?;
        on_step(&record);
        records.push(record);
    }
    metrics.flush()?;
    timing.flush()?;

    let adaptive = partition.is_some();
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            model: model.clone(),
            codec: cfg.codec,
            data: cfg.data_params(),
            step: cfg.steps as u64,
            adaptive,
            partition: partition.clone(),
        },
        params,
    };
    checkpoint.save(&paths.checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        records,
        partition,
        paths,
    })
}

/// Parses a metrics stream back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| FfpError::Format(format!("metrics line: {e}")))
        })
        .collect()
}

/// Mean of `values[end-window..end]`.
pub fn trailing_mean(values: &[f64], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    values[start..end].iter().sum::<f64>() / (end - start) as f64
}
