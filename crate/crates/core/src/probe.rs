//! Measures a model's attention maps on probe clips and votes a head
//! partition from them.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::model_hash;
use crate::dit::{probe_attention, HeadPattern, ModelConfig, ModelParams, RopeRouting};
use crate::error::{invalid, Result};
use crate::heads::{classify_head, compute_density_grid, vote_partition, HeadKind, HeadPartition};
use crate::latent::{ConditioningPack, VideoLatent};
use crate::losses::interpolate;
use crate::rng::{stream_rng, Stream};
use crate::train::PreparedSample;

/// A conditioning pack and the timestep it is probed at.
#[derive(Debug, Clone)]
pub struct ProbeInput {
    pub pack: ConditioningPack,
    pub t: f64,
}

/// Draws `count` probe inputs from `samples`: sample choice, noise and
/// timestep all come from the probe stream of `seed`.
pub fn probe_inputs(
    samples: &[PreparedSample],
    count: usize,
    seed: u64,
) -> Result<Vec<ProbeInput>> {
    if samples.is_empty() {
        return invalid("no samples to probe");
    }
    (0..count as u64)
        .map(|s| {
            let mut rng = stream_rng(seed, Stream::Probe, s);
            let sample = &samples[rng.random_range(0..samples.len())];
            let t: f64 = rng.random_range(0.05..0.95);
            let sh = sample.target.shape();
            let noise = VideoLatent::new(ndarray::Array4::from_shape_fn(sh.dims(), |_| {
                rng.sample(StandardNormal)
            }));
            let noisy = interpolate(&sample.target, &noise, t);
            Ok(ProbeInput {
                pack: ConditioningPack::new(
                    noisy,
                    sample.source.clone(),
                    sample.first_frame.clone(),
                )?,
                t,
            })
        })
        .collect()
}

/// Per-probe labels `[layer][head]` under standard rotary positions.
pub fn label_heads(
    params: &ModelParams,
    cfg: &ModelConfig,
    input: &ProbeInput,
    epsilon: f64,
    overrides: &[((usize, usize), HeadPattern)],
) -> Result<Vec<Vec<HeadKind>>> {
    let maps = probe_attention(
        &input.pack,
        input.t,
        &params.dit,
        cfg,
        &RopeRouting::Standard,
        overrides,
    )?;
    let dims = (cfg.frames, cfg.latent_height * cfg.latent_width);
    maps.iter()
        .map(|layer| {
            layer
                .iter()
                .map(|m| {
                    Ok(classify_head(&compute_density_grid(
                        m.view(),
                        dims,
                        epsilon,
                    )?))
                })
                .collect()
        })
        .collect()
}

/// Classifies every head by majority vote over `inputs`.
pub fn classify_model(
    params: &ModelParams,
    cfg: &ModelConfig,
    inputs: &[ProbeInput],
    epsilon: f64,
    overrides: &[((usize, usize), HeadPattern)],
) -> Result<HeadPartition> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return invalid(format!("epsilon {epsilon} must be finite and >= 0"));
    }
    let labels = inputs
        .iter()
        .map(|i| label_heads(params, cfg, i, epsilon, overrides))
        .collect::<Result<Vec<_>>>()?;
    let mut partition = vote_partition(&labels)?;
    partition.epsilon = epsilon;
    partition.model_hash = model_hash(params);
    partition.single_frame_fallback = cfg.frames < 2;
    Ok(partition)
}
