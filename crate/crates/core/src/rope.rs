//! Factorised three-axis rotary position encoding and the adaptive
//! spatio-temporal remapping used by spatial and temporal heads.
//!
//! Each head vector is split into three contiguous segments `[t | h | w]`.
//! Inside a segment of width `d`, adjacent pairs `(2k, 2k+1)` are rotated by
//! `coordinate · base^(-2k/d)`.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FfpError, Result};
use crate::heads::HeadKind;

/// Per-token `(t, h, w)` coordinates over a latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    pub t_index: Vec<f64>,
    pub h_index: Vec<f64>,
    pub w_index: Vec<f64>,
    pub dims: (usize, usize, usize),
}

impl PositionGrid {
    pub fn len(&self) -> usize {
        self.t_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_index.is_empty()
    }

    pub fn coords(&self, token: usize) -> (f64, f64, f64) {
        (
            self.t_index[token],
            self.h_index[token],
            self.w_index[token],
        )
    }
}

/// Row-major grid over `(F', H', W')`, frame index slowest.
pub fn build_position_grid(dims: (usize, usize, usize)) -> Result<PositionGrid> {
    let (f, h, w) = dims;
    if f == 0 || h == 0 || w == 0 {
        return invalid(format!("grid dimensions must be >= 1, got {dims:?}"));
    }
    let n = f * h * w;
    let mut grid = PositionGrid {
        t_index: Vec::with_capacity(n),
        h_index: Vec::with_capacity(n),
        w_index: Vec::with_capacity(n),
        dims,
    };
    for ti in 0..f {
        for hi in 0..h {
            for wi in 0..w {
                grid.t_index.push(ti as f64);
                grid.h_index.push(hi as f64);
                grid.w_index.push(wi as f64);
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeFrequencyConfig {
    pub head_dim: usize,
    /// Widths of the `(t, h, w)` segments.
    pub axis_split: (usize, usize, usize),
    pub base: f64,
}

impl RopeFrequencyConfig {
    pub fn new(head_dim: usize, axis_split: (usize, usize, usize), base: f64) -> Result<Self> {
        let cfg = Self {
            head_dim,
            axis_split,
            base,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Near-equal thirds in whole rotary pairs; leftover pairs go to the
    /// temporal axis.
    pub fn with_default_split(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return invalid(format!(
                "head_dim must be even and positive, got {head_dim}"
            ));
        }
        let pairs = head_dim / 2;
        let third = pairs / 3;
        let t_pairs = pairs - 2 * third;
        Self::new(head_dim, (2 * t_pairs, 2 * third, 2 * third), base)
    }

    pub fn validate(&self) -> Result<()> {
        let (dt, dh, dw) = self.axis_split;
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return invalid(format!(
                "head_dim must be even and positive, got {}",
                self.head_dim
            ));
        }
        if dt % 2 != 0 || dh % 2 != 0 || dw % 2 != 0 {
            return invalid(format!(
                "axis split {:?} must be even per axis",
                self.axis_split
            ));
        }
        if dt + dh + dw != self.head_dim {
            return invalid(format!(
                "axis split {:?} does not sum to head_dim {}",
                self.axis_split, self.head_dim
            ));
        }
        if !(self.base.is_finite() && self.base > 0.0) {
            return invalid(format!("rope base must be positive, got {}", self.base));
        }
        Ok(())
    }

    /// `(segment offset, pair index within segment, inverse frequency)` for
    /// every rotary pair, grouped by axis `0 = t, 1 = h, 2 = w`.
    pub(crate) fn pair_table(&self) -> [Vec<(usize, f64)>; 3] {
        let (dt, dh, dw) = self.axis_split;
        let mut out: [Vec<(usize, f64)>; 3] = Default::default();
        let mut offset = 0;
        for (axis, d) in [dt, dh, dw].into_iter().enumerate() {
            for k in 0..d / 2 {
                let inv = self.base.powf(-2.0 * k as f64 / d as f64);
                out[axis].push((offset + 2 * k, inv));
            }
            offset += d;
        }
        out
    }
}

/// Spatial (`α_S`) and temporal (`α_T`) scaling coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeCoefficients {
    pub alpha_s: f64,
    pub alpha_t: f64,
}

impl RopeCoefficients {
    /// Accepts any finite non-negative pair. The predictor only ever emits
    /// values in `(0, 2)`; zero is admitted so the spatial offset can be
    /// pinned to the standard grid.
    pub fn new(alpha_s: f64, alpha_t: f64) -> Result<Self> {
        for (name, v) in [("alpha_s", alpha_s), ("alpha_t", alpha_t)] {
            if !v.is_finite() || v < 0.0 {
                return Err(FfpError::NumericInput(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(Self { alpha_s, alpha_t })
    }

    /// The pair under which adaptive rotation reduces to standard rotation.
    pub fn neutral() -> Self {
        Self {
            alpha_s: 0.0,
            alpha_t: 1.0,
        }
    }
}

fn check_rotate_inputs(
    rows: usize,
    width: usize,
    grid: &PositionGrid,
    cfg: &RopeFrequencyConfig,
) -> Result<()> {
    cfg.validate()?;
    if width != cfg.head_dim {
        return invalid(format!("vector width {width} != head_dim {}", cfg.head_dim));
    }
    if rows != grid.len() {
        return invalid(format!("{rows} vectors but grid has {} tokens", grid.len()));
    }
    Ok(())
}

/// Rotates every row of `vectors` by its token's grid coordinates.
pub fn rotate(
    vectors: ArrayView2<'_, f64>,
    grid: &PositionGrid,
    cfg: &RopeFrequencyConfig,
) -> Result<Array2<f64>> {
    check_rotate_inputs(vectors.nrows(), vectors.ncols(), grid, cfg)?;
    let mut out = vectors.to_owned();
    rotate_in_place(
        out.view_mut(),
        [&grid.t_index, &grid.h_index, &grid.w_index],
        cfg,
        1.0,
    );
    Ok(out)
}

/// Applies the rotation (`sign = 1`) or its inverse (`sign = -1`) in place.
pub(crate) fn rotate_in_place(
    mut x: ArrayViewMut2<'_, f64>,
    coords: [&[f64]; 3],
    cfg: &RopeFrequencyConfig,
    sign: f64,
) {
    let table = cfg.pair_table();
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        for axis in 0..3 {
            let pos = coords[axis][r];
            if pos == 0.0 {
                continue;
            }
            for &(col, inv) in &table[axis] {
                let (sin, cos) = (sign * pos * inv).sin_cos();
                let a = row[col];
                let b = row[col + 1];
                row[col] = a * cos - b * sin;
                row[col + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Sensitivity of the loss to each token's temporal coordinate, given the
/// rotated output `y` and the upstream gradient `gy`.
pub(crate) fn temporal_position_grad(
    y: ArrayView2<'_, f64>,
    gy: ArrayView2<'_, f64>,
    cfg: &RopeFrequencyConfig,
) -> Vec<f64> {
    let table = cfg.pair_table();
    y.rows()
        .into_iter()
        .zip(gy.rows())
        .map(|(yr, gr)| {
            table[0]
                .iter()
                .map(|&(col, inv)| inv * (gr[col + 1] * yr[col] - gr[col] * yr[col + 1]))
                .sum()
        })
        .collect()
}

/// First-frame temporal index moves from 0 to `α_S · F'`; every other
/// coordinate is untouched.
pub fn remap_spatial_positions(grid: &PositionGrid, alpha_s: f64, frames: usize) -> PositionGrid {
    let mut out = grid.clone();
    let offset = alpha_s * frames as f64;
    for t in out.t_index.iter_mut() {
        if *t == 0.0 {
            *t = offset;
        }
    }
    out
}

/// Temporal axis rescaled: `t ↦ α_T · t`.
pub fn remap_temporal_positions(grid: &PositionGrid, alpha_t: f64) -> PositionGrid {
    let mut out = grid.clone();
    for t in out.t_index.iter_mut() {
        *t *= alpha_t;
    }
    out
}

pub fn remap_for_head(
    grid: &PositionGrid,
    coeffs: &RopeCoefficients,
    kind: HeadKind,
) -> PositionGrid {
    match kind {
        HeadKind::Spatial => remap_spatial_positions(grid, coeffs.alpha_s, grid.dims.0),
        HeadKind::Temporal => remap_temporal_positions(grid, coeffs.alpha_t),
    }
}

/// Adaptive rotation: remap the grid according to the head's class, then
/// rotate.
pub fn ast_rotate(
    vectors: ArrayView2<'_, f64>,
    grid: &PositionGrid,
    cfg: &RopeFrequencyConfig,
    coeffs: &RopeCoefficients,
    kind: HeadKind,
) -> Result<Array2<f64>> {
    rotate(vectors, &remap_for_head(grid, coeffs, kind), cfg)
}
