//! Frozen regression values and cross-module contracts.

use std::path::Path;

use ffprop::codec::ToyCodec;
use ffprop::config::RunConfig;
use ffprop::data::gen_sample;
use ffprop::dit::{dit_forward, ModelConfig, ModelParams, RopeRouting};
use ffprop::heads::{HeadKind, HeadPartition};
use ffprop::latent::ConditioningPack;
use ffprop::losses::{interpolate, mmd_loss, motion_loss, LossWeights};
use ffprop::predictor::predict_coefficients;
use ffprop::rng::{stream_rng, Stream};
use ffprop::train::{prepare, seeded_normal, teacher_taps, ItemSpec, PreparedSample};

// (sum, sum of squares) of the seed-0 teacher tap, frozen from the first
// verified run.
const GOLDEN_TAP_BITS: (u64, u64) = (4635459904038243040, 4670431240472728401);

fn fixture() -> (ModelConfig, ModelParams, PreparedSample, HeadPartition) {
    let cfg = RunConfig::default();
    let mut params = ModelParams::init(&mut stream_rng(0, Stream::Init, 0), &cfg.model);
    params
        .predictor
        .randomize_output(&mut stream_rng(0, Stream::Fixture, 0), 0.5);
    let codec = ToyCodec::new(cfg.codec).unwrap();
    let item = prepare(vec![gen_sample(0, &cfg.data_params()).unwrap()], &codec)
        .unwrap()
        .remove(0);
    let partition = HeadPartition::from_kinds(vec![
        vec![
            HeadKind::Spatial,
            HeadKind::Temporal,
            HeadKind::Spatial,
            HeadKind::Temporal,
        ],
        vec![
            HeadKind::Temporal,
            HeadKind::Spatial,
            HeadKind::Temporal,
            HeadKind::Spatial,
        ],
    ]);
    (cfg.model, params, item, partition)
}

#[test]
fn teacher_tap_checksum_is_frozen() {
    let (cfg, params, item, partition) = fixture();
    let spec = ItemSpec {
        model: &cfg,
        partition: Some(&partition),
        weights: LossWeights::default(),
        downsample: 2,
    };
    let noise = seeded_normal(0, Stream::Noise, 0, cfg.latent_shape());
    let noisy = interpolate(&item.target, &noise, 0.5);
    let taps = teacher_taps(&params, &spec, &noisy, &item.target, 0.5).unwrap();
    let tap = &taps[&0];
    let sum: f64 = tap.data.sum();
    let sq: f64 = tap.data.iter().map(|x| x * x).sum();
    assert_eq!((sum.to_bits(), sq.to_bits()), GOLDEN_TAP_BITS);
}

#[test]
fn identity_propagation_has_zero_distillation_loss() {
    // Student conditioned exactly like the teacher gives identical taps.
    let (cfg, params, item, partition) = fixture();
    let spec = ItemSpec {
        model: &cfg,
        partition: Some(&partition),
        weights: LossWeights::default(),
        downsample: 2,
    };
    let noise = seeded_normal(0, Stream::Noise, 1, cfg.latent_shape());
    let noisy = interpolate(&item.target, &noise, 0.3);
    let teacher = teacher_taps(&params, &spec, &noisy, &item.target, 0.3).unwrap();
    let pack = ConditioningPack::new(noisy, item.target.clone(), item.target.frame(0)).unwrap();
    let coeffs = predict_coefficients(&item.target, &params.predictor).unwrap();
    let (_, student) = dit_forward(
        &pack,
        0.3,
        &params.dit,
        &cfg,
        &RopeRouting::Adaptive {
            partition: &partition,
            coeffs,
        },
    )
    .unwrap();
    assert_eq!(student, teacher);
    assert_eq!(motion_loss(&student[&0], &teacher[&0], 2).unwrap(), 0.0);
    assert_eq!(mmd_loss(&student[&0], &teacher[&0], 2).unwrap(), 0.0);
}

#[test]
fn shipped_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
}
