//! Central finite-difference checks of the analytic gradients.

use std::fmt;
use std::str::FromStr;

use ndarray::Array4;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dit::{ModelConfig, ModelParams};
use crate::error::{invalid, FfpError, Result};
use crate::heads::{HeadKind, HeadPartition};
use crate::latent::{LatentShape, VideoLatent};
use crate::losses::{
    flow_match_loss, flow_match_loss_grad, mmd_loss, mmd_loss_grad, motion_loss, motion_loss_grad,
    LossWeights,
};
use crate::rng::{stream_rng, Stream};
use crate::train::{item_loss_and_grad, ItemSpec, PreparedSample};

/// Denominator floor for the relative error, so coordinates where both
/// gradients vanish do not divide rounding noise by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Flow,
    Motion,
    Mmd,
    Total,
    /// Flow loss with respect to every parameter of a small model.
    Model,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Flow,
        Component::Motion,
        Component::Mmd,
        Component::Total,
        Component::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Flow => "flow",
            Component::Motion => "motion",
            Component::Mmd => "mmd",
            Component::Total => "total",
            Component::Model => "model",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = FfpError;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| FfpError::InvalidArgument(format!("unknown grad-check component {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: String,
    pub h: f64,
    pub coordinates: usize,
    /// The pass/fail figure. Coordinate-wise for the loss components,
    /// group-wise (vector norms per parameter tensor) for the model check.
    pub max_rel_error: f64,
    /// Where `max_rel_error` was attained, e.g. `input[17]` or `dit.out_w`.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Worst single coordinate, reported for every component.
    pub max_coordinate_rel_error: f64,
    pub worst_coordinate: String,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Worst {
    err: f64,
    label: String,
    analytic: f64,
    numeric: f64,
    count: usize,
}

impl Worst {
    fn new() -> Self {
        Self {
            err: 0.0,
            label: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            count: 0,
        }
    }

    fn see(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.see_ratio(label, relative_error(analytic, numeric), analytic, numeric);
    }

    fn see_ratio(&mut self, label: impl FnOnce() -> String, e: f64, analytic: f64, numeric: f64) {
        self.count += 1;
        if e > self.err || self.label.is_empty() {
            self.err = e;
            self.label = label();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    fn report(self, component: &str, h: f64) -> GradCheckReport {
        GradCheckReport {
            component: component.into(),
            h,
            coordinates: self.count,
            max_rel_error: self.err,
            worst: self.label.clone(),
            analytic: self.analytic,
            numeric: self.numeric,
            max_coordinate_rel_error: self.err,
            worst_coordinate: self.label,
        }
    }
}

/// Compares `grad` with central differences of `f` at `x`, coordinate by
/// coordinate.
pub fn check_slice(
    component: &str,
    x: &[f64],
    grad: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if !(h.is_finite() && h > 0.0) {
        return invalid(format!("finite-difference step must be positive, got {h}"));
    }
    if x.len() != grad.len() {
        return invalid(format!(
            "input has {} coordinates, gradient has {}",
            x.len(),
            grad.len()
        ));
    }
    let mut w = Worst::new();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        w.see(|| format!("input[{i}]"), grad[i], (up - down) / (2.0 * h));
    }
    Ok(w.report(component, h))
}

fn randn(seed: u64, index: u64, shape: LatentShape) -> VideoLatent {
    let mut rng = stream_rng(seed, Stream::Fixture, index);
    VideoLatent::new(Array4::from_shape_fn(shape.dims(), |_| {
        rng.sample(StandardNormal)
    }))
}

fn latent_from(slice: &[f64], shape: LatentShape) -> VideoLatent {
    VideoLatent::new(
        Array4::from_shape_vec(shape.dims(), slice.to_vec()).expect("length matches shape"),
    )
}

/// Shapes used by the loss-level checks: taps of `(F', 2K, 2K, C)` pooled
/// by `K` give `N = 4` tokens per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub downsample: usize,
}

impl Default for CheckShape {
    fn default() -> Self {
        Self {
            frames: 3,
            height: 4,
            width: 4,
            channels: 4,
            downsample: 2,
        }
    }
}

impl CheckShape {
    fn latent(&self) -> LatentShape {
        LatentShape::new(self.frames, self.height, self.width, self.channels)
    }
}

/// Runs the check for one loss component on seeded random inputs.
pub fn grad_check(
    component: Component,
    shape: CheckShape,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let sh = shape.latent();
    let k = shape.downsample;
    let name = component.name();
    match component {
        Component::Flow => {
            let (pred, clean, noise) = (randn(seed, 0, sh), randn(seed, 1, sh), randn(seed, 2, sh));
            let (_, g) = flow_match_loss_grad(&pred, &clean, &noise)?;
            check_slice(
                name,
                pred.data.as_slice().expect("contiguous"),
                g.data.as_slice().expect("contiguous"),
                h,
                |x| flow_match_loss(&latent_from(x, sh), &clean, &noise),
            )
        }
        Component::Motion | Component::Mmd => {
            let (student, teacher) = (randn(seed, 3, sh), randn(seed, 4, sh));
            let value = |x: &[f64]| match component {
                Component::Motion => motion_loss(&latent_from(x, sh), &teacher, k),
                _ => mmd_loss(&latent_from(x, sh), &teacher, k),
            };
            let (_, g) = match component {
                Component::Motion => motion_loss_grad(&student, &teacher, k)?,
                _ => mmd_loss_grad(&student, &teacher, k)?,
            };
            check_slice(
                name,
                student.data.as_slice().expect("contiguous"),
                g.data.as_slice().expect("contiguous"),
                h,
                value,
            )
        }
        Component::Total => {
            // Inputs: predicted velocity followed by the student tap.
            let w = LossWeights::default();
            let (pred, clean, noise) = (randn(seed, 0, sh), randn(seed, 1, sh), randn(seed, 2, sh));
            let (student, teacher) = (randn(seed, 3, sh), randn(seed, 4, sh));
            let n = pred.data.len();
            let (_, g_fm) = flow_match_loss_grad(&pred, &clean, &noise)?;
            let (_, g_mo) = motion_loss_grad(&student, &teacher, k)?;
            let (_, g_md) = mmd_loss_grad(&student, &teacher, k)?;
            let mut x: Vec<f64> = pred.data.iter().copied().collect();
            x.extend(student.data.iter().copied());
            let mut grad: Vec<f64> = g_fm.data.iter().copied().collect();
            grad.extend(
                g_mo.data
                    .iter()
                    .zip(g_md.data.iter())
                    .map(|(a, b)| w.lambda_motion * a + w.lambda_mmd * b),
            );
            check_slice(name, &x, &grad, h, |x| {
                let p = latent_from(&x[..n], sh);
                let s = latent_from(&x[n..], sh);
                let report = crate::losses::total_loss(
                    flow_match_loss(&p, &clean, &noise)?,
                    motion_loss(&s, &teacher, k)?,
                    mmd_loss(&s, &teacher, k)?,
                    w,
                )?;
                Ok(report.total)
            })
        }
        Component::Model => model_flow_check(h, seed),
    }
}

/// The small model used for the parameter-level check: two blocks, width
/// 32, on a `3 × 2 × 2` latent grid.
pub fn check_model_config() -> ModelConfig {
    ModelConfig::toy(3, 2, 2, 4, 32, 2, 2)
}

/// Flow-matching loss gradient with respect to every parameter (backbone
/// and coefficient predictor) of [`check_model_config`], with adaptive
/// routing over a mixed head partition. Scored per parameter tensor: at
/// `h = 1e-6` single coordinates with `|g|` below about `1e-5` sit under
/// the finite-difference roundoff floor.
pub fn model_flow_check(h: f64, seed: u64) -> Result<GradCheckReport> {
    if !(h.is_finite() && h > 0.0) {
        return invalid(format!("finite-difference step must be positive, got {h}"));
    }
    let cfg = check_model_config();
    let sh = cfg.latent_shape();
    let mut params = ModelParams::init(&mut stream_rng(seed, Stream::Init, 0), &cfg);
    params
        .predictor
        .randomize_output(&mut stream_rng(seed, Stream::Fixture, 9), 0.5);
    let partition = HeadPartition::from_kinds(vec![
        vec![HeadKind::Spatial, HeadKind::Temporal],
        vec![HeadKind::Temporal, HeadKind::Spatial],
    ]);
    let target = randn(seed, 5, sh);
    let item = PreparedSample {
        source: randn(seed, 6, sh),
        first_frame: target.frame(0),
        target,
        sample: crate::data::gen_sample(seed, &crate::data::DataParams::default())?,
    };
    let noise = randn(seed, 7, sh);
    let t = 0.37;
    let spec = ItemSpec {
        model: &cfg,
        partition: Some(&partition),
        weights: LossWeights::new(0.0, 0.0)?,
        downsample: 1,
    };
    let base = item_loss_and_grad(&params, &spec, &item, &noise, t, 0)?;

    let analytic: Vec<Vec<f64>> = base
        .grads
        .named()
        .iter()
        .map(|(_, g)| g.iter().copied().collect())
        .collect();
    let mut w = Worst::new();
    let mut groups = Worst::new();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (gi, name) in names.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic[gi].len());
        for (i, &a) in analytic[gi].iter().enumerate() {
            let orig = params.named()[gi].1.as_slice().expect("contiguous")[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                params.named_mut()[gi].1.as_slice_mut().expect("contiguous")[i] = v;
                let out = item_loss_and_grad(&params, &spec, &item, &noise, t, 0)?;
                Ok(out.l_fm)
            };
            let up = eval_at(orig + h)?;
            let down = eval_at(orig - h)?;
            params.named_mut()[gi].1.as_slice_mut().expect("contiguous")[i] = orig;
            let n = (up - down) / (2.0 * h);
            w.see(|| format!("{name}[{i}]"), a, n);
            numeric.push(n);
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut analytic[gi].iter().zip(&numeric).map(|(a, n)| a - n));
        let (na, nn) = (
            norm(&mut analytic[gi].iter().copied()),
            norm(&mut numeric.iter().copied()),
        );
        groups.see_ratio(|| name.clone(), diff / na.max(nn).max(REL_FLOOR), na, nn);
    }
    let coords = w.report(Component::Model.name(), h);
    let mut report = groups.report(Component::Model.name(), h);
    report.coordinates = coords.coordinates;
    report.max_coordinate_rel_error = coords.max_rel_error;
    report.worst_coordinate = coords.worst;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_fixture_is_exact() {
        let coef = [0.5, -2.0, 3.25, 1.0];
        let x = [0.1, 0.2, -0.3, 4.0];
        let r = check_slice("affine", &x, &coef, 1e-6, |x| {
            Ok(7.0 + x.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>())
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 4);
    }

    #[test]
    fn wrong_gradient_is_caught_and_located() {
        let r = check_slice("bad", &[1.0, 2.0], &[2.0, 5.0], 1e-6, |x| {
            Ok(x[0] * x[0] + x[1] * x[1])
        })
        .unwrap();
        assert_eq!(r.worst, "input[1]");
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn loss_components_pass() {
        for c in [
            Component::Flow,
            Component::Motion,
            Component::Mmd,
            Component::Total,
        ] {
            let r = grad_check(c, CheckShape::default(), 1e-6, 0).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(Component::Flow, CheckShape::default(), 0.0, 0).is_err());
        assert!("nope".parse::<Component>().is_err());
        assert_eq!("mmd".parse::<Component>().unwrap(), Component::Mmd);
    }
}
