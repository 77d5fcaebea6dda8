//! Source-aware predictor for the rotary scaling coefficients.
//!
//! Mean-pools the source latent over all tokens, applies one tanh hidden
//! layer, then a two-logit head mapped through `2·sigmoid` into `(0, 2)`.
//! The output layer starts at zero so a fresh predictor returns `α = 1`.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::latent::{require_finite, VideoLatent};
use crate::rope::RopeCoefficients;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams<T = Array2<f64>> {
    /// `C × hidden`
    pub hidden_w: T,
    pub hidden_b: T,
    /// `hidden × 2`, columns `[α_S, α_T]`
    pub out_w: T,
    pub out_b: T,
}

impl<T> PredictorParams<T> {
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        vec![
            ("predictor.hidden_w", &self.hidden_w),
            ("predictor.hidden_b", &self.hidden_b),
            ("predictor.out_w", &self.out_w),
            ("predictor.out_b", &self.out_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        vec![
            ("predictor.hidden_w", &mut self.hidden_w),
            ("predictor.hidden_b", &mut self.hidden_b),
            ("predictor.out_w", &mut self.out_w),
            ("predictor.out_b", &mut self.out_b),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> PredictorParams<U> {
        PredictorParams {
            hidden_w: f("predictor.hidden_w", &self.hidden_w),
            hidden_b: f("predictor.hidden_b", &self.hidden_b),
            out_w: f("predictor.out_w", &self.out_w),
            out_b: f("predictor.out_b", &self.out_b),
        }
    }
}

impl PredictorParams {
    pub fn init(rng: &mut impl Rng, channels: usize, hidden: usize) -> Self {
        let normal = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).expect("valid std");
        Self {
            hidden_w: Array2::from_shape_fn((channels, hidden), |_| normal.sample(rng)),
            hidden_b: Array2::zeros((1, hidden)),
            out_w: Array2::zeros((hidden, 2)),
            out_b: Array2::zeros((1, 2)),
        }
    }

    /// Fills the output layer with random weights, for fixtures that need a
    /// predictor away from its `α = 1` starting point.
    pub fn randomize_output(&mut self, rng: &mut impl Rng, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        self.out_w.mapv_inplace(|_| normal.sample(rng));
        self.out_b.mapv_inplace(|_| normal.sample(rng));
    }
}

/// `1 × C` mean over every token of the source latent.
pub fn pool_source(source: &VideoLatent) -> Array2<f64> {
    source
        .to_tokens()
        .mean_axis(Axis(0))
        .expect("non-empty latent")
        .insert_axis(Axis(0))
}

/// Records the predictor on `g`, returning the `1 × 2` node `[α_S, α_T]`.
pub fn predict_alpha_graph(g: &mut Graph, p: &PredictorParams<Var>, source: &VideoLatent) -> Var {
    let pooled = g.constant(pool_source(source));
    let h = g.matmul(pooled, p.hidden_w);
    let h = g.add_row(h, p.hidden_b);
    let h = g.tanh(h);
    let o = g.matmul(h, p.out_w);
    let o = g.add_row(o, p.out_b);
    g.two_sigmoid(o)
}

pub fn predict_coefficients(
    source: &VideoLatent,
    params: &PredictorParams,
) -> Result<RopeCoefficients> {
    require_finite(source, "source latent")?;
    let mut g = Graph::new();
    let p = params.map(|_, a| g.constant(a.clone()));
    let alpha = predict_alpha_graph(&mut g, &p, source);
    let a = g.value(alpha);
    Ok(RopeCoefficients {
        alpha_s: a[[0, 0]],
        alpha_t: a[[0, 1]],
    })
}
