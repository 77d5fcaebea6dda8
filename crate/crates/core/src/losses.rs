//! Training objectives: flow matching, the inter-frame relational Gram loss,
//! the first-frame MMD drift loss, and their weighted sum.
//!
//! Every distillation loss comes with an analytic gradient with respect to
//! the student tap. The teacher tap is a constant on every path.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FfpError, Result};
use crate::latent::VideoLatent;

/// Lower bound on the median-heuristic kernel bandwidth.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_motion: f64,
    pub lambda_mmd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_motion: 5.0,
            lambda_mmd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_motion: f64, lambda_mmd: f64) -> Result<Self> {
        for (name, v) in [("lambda_motion", lambda_motion), ("lambda_mmd", lambda_mmd)] {
            if !v.is_finite() || v < 0.0 {
                return invalid(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        Ok(Self {
            lambda_motion,
            lambda_mmd,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_motion == 0.0 && self.lambda_mmd == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_fm: f64,
    pub l_motion: f64,
    pub l_mmd: f64,
    pub total: f64,
    pub weights: LossWeights,
}

fn same_shape(a: &VideoLatent, b: &VideoLatent, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Velocity target under `z_t = (1 − t)·clean + t·noise`.
pub fn velocity_target(clean: &VideoLatent, noise: &VideoLatent) -> VideoLatent {
    noise.sub(clean)
}

/// `(1 − t)·clean + t·noise`
pub fn interpolate(clean: &VideoLatent, noise: &VideoLatent, t: f64) -> VideoLatent {
    VideoLatent::new(&clean.data * (1.0 - t) + &noise.data * t)
}

/// Mean squared error between the predicted and target velocity.
pub fn flow_match_loss(
    predicted: &VideoLatent,
    clean: &VideoLatent,
    noise: &VideoLatent,
) -> Result<f64> {
    Ok(flow_match_loss_grad(predicted, clean, noise)?.0)
}

pub fn flow_match_loss_grad(
    predicted: &VideoLatent,
    clean: &VideoLatent,
    noise: &VideoLatent,
) -> Result<(f64, VideoLatent)> {
    same_shape(predicted, clean, "flow_match_loss")?;
    same_shape(clean, noise, "flow_match_loss")?;
    let resid = &predicted.data - &(&noise.data - &clean.data);
    let n = resid.len() as f64;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    Ok((loss, VideoLatent::new(resid * (2.0 / n))))
}

/// Non-overlapping `k × k` average pooling per frame and channel.
pub fn spatial_downsample(latent: &VideoLatent, k: usize) -> Result<VideoLatent> {
    let sh = latent.shape();
    if k == 0 || !sh.height.is_multiple_of(k) || !sh.width.is_multiple_of(k) {
        return invalid(format!(
            "downsample factor {k} must divide H' = {} and W' = {}",
            sh.height, sh.width
        ));
    }
    let (ho, wo) = (sh.height / k, sh.width / k);
    let mut out = Array4::zeros((sh.frames, ho, wo, sh.channels));
    let inv = 1.0 / (k * k) as f64;
    for f in 0..sh.frames {
        for y in 0..ho {
            for x in 0..wo {
                let block = latent
                    .data
                    .slice(s![f, y * k..(y + 1) * k, x * k..(x + 1) * k, ..]);
                let mean = block.sum_axis(Axis(0)).sum_axis(Axis(0)) * inv;
                out.slice_mut(s![f, y, x, ..]).assign(&mean);
            }
        }
    }
    Ok(VideoLatent::new(out))
}

/// Adjoint of [`spatial_downsample`]: spreads each pooled gradient evenly
/// over its `k × k` footprint.
fn downsample_adjoint(
    grad: &Array3<f64>,
    full: (usize, usize, usize, usize),
    k: usize,
) -> VideoLatent {
    let (f, h, w, c) = full;
    let wo = w / k;
    let inv = 1.0 / (k * k) as f64;
    let mut out = Array4::zeros((f, h, w, c));
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let n = (y / k) * wo + x / k;
                out.slice_mut(s![fi, y, x, ..])
                    .assign(&(&grad.slice(s![fi, n, ..]) * inv));
            }
        }
    }
    VideoLatent::new(out)
}

/// `(F', N, C)` view of a latent, tokens row-major within each frame.
pub fn frame_tokens(latent: &VideoLatent) -> Array3<f64> {
    let sh = latent.shape();
    latent
        .data
        .to_owned()
        .into_shape_with_order((sh.frames, sh.height * sh.width, sh.channels))
        .expect("contiguous latent")
}

/// `G[i,u,j,v] = (1/C)·⟨z[i,u,:], z[j,v,:]⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalGram {
    pub values: Array4<f64>,
    /// Spatial tokens per frame.
    pub n: usize,
}

pub fn gram(latent_ds: &VideoLatent) -> RelationalGram {
    let z = frame_tokens(latent_ds);
    let (f, n, c) = z.dim();
    let flat = z.to_shape((f * n, c)).expect("contiguous").to_owned();
    let g = flat.dot(&flat.t()) / c as f64;
    RelationalGram {
        values: g.into_shape_with_order((f, n, f, n)).expect("square"),
        n,
    }
}

fn motion_tokens(
    student: &VideoLatent,
    teacher: &VideoLatent,
    k: usize,
) -> Result<(Array3<f64>, Array3<f64>)> {
    same_shape(student, teacher, "motion_loss")?;
    if student.shape().frames < 2 {
        return invalid("motion loss needs at least two frames");
    }
    let s = frame_tokens(&spatial_downsample(student, k)?);
    let t = frame_tokens(&spatial_downsample(teacher, k)?);
    Ok((s, t))
}

/// Mean absolute Gram difference over ordered cross-frame pairs on the
/// downsampled taps.
pub fn motion_loss(student: &VideoLatent, teacher: &VideoLatent, k: usize) -> Result<f64> {
    let (s, t) = motion_tokens(student, teacher, k)?;
    Ok(motion_core(s.view(), t.view(), false).0)
}

/// [`motion_loss`] and its gradient with respect to `student`.
pub fn motion_loss_grad(
    student: &VideoLatent,
    teacher: &VideoLatent,
    k: usize,
) -> Result<(f64, VideoLatent)> {
    let (s, t) = motion_tokens(student, teacher, k)?;
    let (loss, g) = motion_core(s.view(), t.view(), true);
    Ok((loss, downsample_adjoint(&g, student.shape().dims(), k)))
}

fn motion_core(
    s: ArrayView3<'_, f64>,
    t: ArrayView3<'_, f64>,
    want_grad: bool,
) -> (f64, Array3<f64>) {
    let (f, n, c) = s.dim();
    let inv_c = 1.0 / c as f64;
    let pair_scale = 1.0 / (f * (f - 1)) as f64;
    let block_scale = 1.0 / (n * n) as f64;
    let mut loss = 0.0;
    let mut grad = Array3::zeros(if want_grad { (f, n, c) } else { (0, 0, 0) });
    for i in 0..f {
        for j in 0..f {
            if i == j {
                continue;
            }
            let (si, sj) = (s.index_axis(Axis(0), i), s.index_axis(Axis(0), j));
            let (ti, tj) = (t.index_axis(Axis(0), i), t.index_axis(Axis(0), j));
            let diff = si.dot(&sj.t()) * inv_c - ti.dot(&tj.t()) * inv_c;
            loss += pair_scale * block_scale * diff.iter().map(|d| d.abs()).sum::<f64>();
            if want_grad {
                let sign = diff.mapv(f64::signum_or_zero);
                let k = pair_scale * block_scale * inv_c;
                let gi = sign.dot(&sj) * k;
                let gj = sign.t().dot(&si) * k;
                grad.index_axis_mut(Axis(0), i).scaled_add(1.0, &gi);
                grad.index_axis_mut(Axis(0), j).scaled_add(1.0, &gj);
            }
        }
    }
    (loss, grad)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// `S = z_first · z_iᵀ`; row `r` relates first-frame token `r` to every
/// token of frame `i`.
pub fn similarity_matrix(
    z_first: ArrayView2<'_, f64>,
    z_i: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if z_first.dim() != z_i.dim() {
        return invalid(format!(
            "similarity_matrix: {:?} vs {:?}",
            z_first.dim(),
            z_i.dim()
        ));
    }
    Ok(z_first.dot(&z_i.t()))
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Biased (V-statistic) squared MMD with RBF kernel
/// `k(a, b) = exp(−‖a − b‖² / (2σ²))`.
pub fn mmd2(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, sigma: f64) -> Result<f64> {
    check_mmd_inputs(p, q)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return invalid(format!("kernel bandwidth must be positive, got {sigma}"));
    }
    let pooled = ndarray::concatenate(Axis(0), &[p, q]).expect("checked widths");
    Ok(mmd2_pooled(pooled.view(), p.nrows(), sigma, false).0)
}

fn check_mmd_inputs(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Result<()> {
    if p.nrows() == 0 || q.nrows() == 0 {
        return invalid("mmd2 needs at least one row per side");
    }
    if p.ncols() != q.ncols() {
        return invalid(format!(
            "mmd2 row widths differ: {} vs {}",
            p.ncols(),
            q.ncols()
        ));
    }
    Ok(())
}

/// Signed row weights: `+1/N` for the first `n_p` rows, `−1/M` for the rest.
fn mmd_weights(total: usize, n_p: usize) -> Vec<f64> {
    let n_q = total - n_p;
    (0..total)
        .map(|a| {
            if a < n_p {
                1.0 / n_p as f64
            } else {
                -1.0 / n_q as f64
            }
        })
        .collect()
}

/// Returns the estimator plus, when asked, `∂/∂D²[a,b]` for every ordered
/// pair and `∂/∂σ`.
fn mmd2_pooled(
    r: ArrayView2<'_, f64>,
    n_p: usize,
    sigma: f64,
    want_grad: bool,
) -> (f64, Array2<f64>, f64) {
    let total = r.nrows();
    let w = mmd_weights(total, n_p);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut value = 0.0;
    let mut d_d2 = Array2::zeros(if want_grad { (total, total) } else { (0, 0) });
    let mut d_sigma = 0.0;
    for a in 0..total {
        let mut row_sum = 0.0;
        for b in 0..total {
            let d2 = sq_dist(r.row(a), r.row(b));
            let k = (-d2 * inv2s2).exp();
            let wk = w[a] * w[b] * k;
            row_sum += wk;
            if want_grad {
                d_d2[[a, b]] = -wk * inv2s2;
                d_sigma += wk * d2 / (sigma * sigma * sigma);
            }
        }
        value += row_sum;
    }
    (value, d_d2, d_sigma)
}

/// Median pairwise distance over the pooled rows (floored), with the
/// unordered pair(s) it was read from and their weight in the median.
fn median_bandwidth(r: ArrayView2<'_, f64>) -> (f64, Vec<(usize, usize, f64)>) {
    let total = r.nrows();
    let mut dists: Vec<(f64, usize, usize)> = Vec::with_capacity(total * (total - 1) / 2);
    for a in 0..total {
        for b in a + 1..total {
            dists.push((sq_dist(r.row(a), r.row(b)).sqrt(), a, b));
        }
    }
    if dists.is_empty() {
        return (SIGMA_FLOOR, Vec::new());
    }
    dists.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let m = dists.len();
    let (median, picks) = if m % 2 == 1 {
        let d = dists[m / 2];
        (d.0, vec![(d.1, d.2, 1.0)])
    } else {
        let (lo, hi) = (dists[m / 2 - 1], dists[m / 2]);
        (
            0.5 * (lo.0 + hi.0),
            vec![(lo.1, lo.2, 0.5), (hi.1, hi.2, 0.5)],
        )
    };
    if median < SIGMA_FLOOR {
        (SIGMA_FLOOR, Vec::new())
    } else {
        (median, picks)
    }
}

/// Median-heuristic bandwidth for a pair of row sets.
pub fn median_heuristic_sigma(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Result<f64> {
    check_mmd_inputs(p, q)?;
    let pooled = ndarray::concatenate(Axis(0), &[p, q]).expect("checked widths");
    Ok(median_bandwidth(pooled.view()).0)
}

/// Squared MMD under the median-heuristic bandwidth, with gradients for
/// both row sets (the bandwidth is differentiated through).
fn mmd2_median_grad(
    p: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
) -> (f64, f64, Array2<f64>, Array2<f64>) {
    let pooled = ndarray::concatenate(Axis(0), &[p, q]).expect("equal widths");
    let (sigma, picks) = median_bandwidth(pooled.view());
    let (value, mut coef, d_sigma) = mmd2_pooled(pooled.view(), p.nrows(), sigma, true);
    for (a, b, share) in picks {
        let d = sq_dist(pooled.row(a), pooled.row(b)).sqrt();
        // σ depends on D²[a,b] through d = sqrt(D²).
        let c = d_sigma * share / (2.0 * d);
        coef[[a, b]] += 0.5 * c;
        coef[[b, a]] += 0.5 * c;
    }
    let total = pooled.nrows();
    let mut g = Array2::zeros(pooled.dim());
    for a in 0..total {
        for b in 0..total {
            let k = coef[[a, b]] + coef[[b, a]];
            if k != 0.0 {
                let diff = &pooled.row(a) - &pooled.row(b);
                g.row_mut(a).scaled_add(2.0 * k, &diff);
            }
        }
    }
    let gq = g.slice(s![p.nrows().., ..]).to_owned();
    let gp = g.slice(s![..p.nrows(), ..]).to_owned();
    (value, sigma, gp, gq)
}

/// Drift of each frame's first-frame relation distribution away from the
/// first frame's self-relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftScores {
    /// `d_2 … d_F'`.
    pub d: Vec<f64>,
    /// Bandwidth used for each score.
    pub sigma: Vec<f64>,
}

/// `d_i = MMD²(rows of z₁z₁ᵀ, rows of z₁zᵢᵀ)` for frames `i = 2..F'`, on an
/// `(F', N, C)` token tensor.
pub fn drift_scores(tokens: ArrayView3<'_, f64>) -> Result<DriftScores> {
    if tokens.dim().0 < 2 {
        return invalid("drift scores need at least two frames");
    }
    Ok(drift_core(tokens, None).0)
}

/// Scores, plus the gradient of `Σ upstream_i · d_i` when `upstream` is given.
fn drift_core(z: ArrayView3<'_, f64>, upstream: Option<&[f64]>) -> (DriftScores, Array3<f64>) {
    let f = z.dim().0;
    let z1 = z.index_axis(Axis(0), 0);
    let s1 = z1.dot(&z1.t());
    let mut scores = DriftScores {
        d: Vec::with_capacity(f - 1),
        sigma: Vec::with_capacity(f - 1),
    };
    let mut grad = Array3::zeros(if upstream.is_some() {
        z.dim()
    } else {
        (0, 0, 0)
    });
    let mut g_s1 = Array2::<f64>::zeros(s1.dim());
    for i in 1..f {
        let zi = z.index_axis(Axis(0), i);
        let si = z1.dot(&zi.t());
        match upstream {
            None => {
                let pooled =
                    ndarray::concatenate(Axis(0), &[s1.view(), si.view()]).expect("square");
                let (sigma, _) = median_bandwidth(pooled.view());
                let (v, _, _) = mmd2_pooled(pooled.view(), s1.nrows(), sigma, false);
                scores.d.push(v);
                scores.sigma.push(sigma);
            }
            Some(up) => {
                let (v, sigma, gp, gq) = mmd2_median_grad(s1.view(), si.view());
                scores.d.push(v);
                scores.sigma.push(sigma);
                let u = up[i - 1];
                if u != 0.0 {
                    g_s1.scaled_add(u, &gp);
                    // S_i = z1 ziᵀ
                    let g_si = gq * u;
                    grad.index_axis_mut(Axis(0), 0)
                        .scaled_add(1.0, &g_si.dot(&zi));
                    grad.index_axis_mut(Axis(0), i)
                        .scaled_add(1.0, &g_si.t().dot(&z1));
                }
            }
        }
    }
    if upstream.is_some() {
        // S_1 = z1 z1ᵀ
        let sym = &g_s1 + &g_s1.t();
        grad.index_axis_mut(Axis(0), 0)
            .scaled_add(1.0, &sym.dot(&z1));
    }
    (scores, grad)
}

fn mmd_tokens(
    student: &VideoLatent,
    teacher: &VideoLatent,
    k: usize,
) -> Result<(Array3<f64>, Array3<f64>)> {
    same_shape(student, teacher, "mmd_loss")?;
    if student.shape().frames < 2 {
        return invalid("mmd loss needs at least two frames");
    }
    Ok((
        frame_tokens(&spatial_downsample(student, k)?),
        frame_tokens(&spatial_downsample(teacher, k)?),
    ))
}

/// `Σ |d_i − d̂_i|` over two drift sequences of equal length.
pub fn drift_gap(student: &[f64], teacher: &[f64]) -> Result<f64> {
    if student.len() != teacher.len() {
        return invalid(format!(
            "drift sequences differ in length: {} vs {}",
            student.len(),
            teacher.len()
        ));
    }
    Ok(student
        .iter()
        .zip(teacher)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// `Σ_{i=2}^{F'} |d_i − d̂_i|` on the downsampled taps.
pub fn mmd_loss(student: &VideoLatent, teacher: &VideoLatent, k: usize) -> Result<f64> {
    let (s, t) = mmd_tokens(student, teacher, k)?;
    let ds = drift_core(s.view(), None).0;
    let dt = drift_core(t.view(), None).0;
    drift_gap(&ds.d, &dt.d)
}

/// [`mmd_loss`] and its gradient with respect to `student`.
pub fn mmd_loss_grad(
    student: &VideoLatent,
    teacher: &VideoLatent,
    k: usize,
) -> Result<(f64, VideoLatent)> {
    let (s, t) = mmd_tokens(student, teacher, k)?;
    let dt = drift_core(t.view(), None).0;
    let plain = drift_core(s.view(), None).0;
    let signs: Vec<f64> = plain
        .d
        .iter()
        .zip(&dt.d)
        .map(|(a, b)| (a - b).signum_or_zero())
        .collect();
    let (ds, g) = drift_core(s.view(), Some(&signs));
    let loss = drift_gap(&ds.d, &dt.d)?;
    Ok((loss, downsample_adjoint(&g, student.shape().dims(), k)))
}

/// `L = L_FM + λ_motion·L_motion + λ_MMD·L_MMD`.
pub fn total_loss(
    l_fm: f64,
    l_motion: f64,
    l_mmd: f64,
    weights: LossWeights,
) -> Result<LossReport> {
    for (name, v) in [("l_fm", l_fm), ("l_motion", l_motion), ("l_mmd", l_mmd)] {
        if !v.is_finite() {
            return Err(FfpError::NumericInput(format!(
                "loss component {name} is {v}"
            )));
        }
    }
    let total = l_fm + weights.lambda_motion * l_motion + weights.lambda_mmd * l_mmd;
    Ok(LossReport {
        l_fm,
        l_motion,
        l_mmd,
        total,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(seed: u64, sh: LatentShape) -> VideoLatent {
        let mut rng = stream_rng(seed, Stream::Fixture, 0);
        VideoLatent::new(Array4::from_shape_fn(sh.dims(), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }))
    }

    fn from_frames(frames: &[&[f64]], h: usize, w: usize, c: usize) -> VideoLatent {
        let flat: Vec<f64> = frames.iter().flat_map(|f| f.iter().copied()).collect();
        VideoLatent::new(Array4::from_shape_vec((frames.len(), h, w, c), flat).unwrap())
    }

    #[test]
    fn flow_match_examples() {
        let sh = LatentShape::new(2, 2, 2, 2);
        let clean = randn(1, sh);
        let noise = randn(2, sh);
        let target = velocity_target(&clean, &noise);
        assert_eq!(flow_match_loss(&target, &clean, &noise).unwrap(), 0.0);
        let shifted = VideoLatent::new(&target.data + 0.3);
        assert!((flow_match_loss(&shifted, &clean, &noise).unwrap() - 0.09).abs() < 1e-15);

        let pred = randn(3, sh);
        let mut sum = 0.0;
        for (p, (c, n)) in pred
            .data
            .iter()
            .zip(clean.data.iter().zip(noise.data.iter()))
        {
            sum += (p - (n - c)).powi(2);
        }
        let oracle = sum / 16.0;
        assert!((flow_match_loss(&pred, &clean, &noise).unwrap() - oracle).abs() < 1e-14);
        assert!(flow_match_loss(&pred, &clean, &randn(4, LatentShape::new(2, 2, 2, 1))).is_err());
    }

    #[test]
    fn downsample_examples() {
        let z = randn(5, LatentShape::new(2, 4, 4, 3));
        assert_eq!(spatial_downsample(&z, 1).unwrap(), z);
        let c = VideoLatent::new(Array4::from_elem((2, 4, 4, 3), 1.7));
        assert!(spatial_downsample(&c, 2)
            .unwrap()
            .data
            .iter()
            .all(|&v| (v - 1.7).abs() < 1e-15));
        let q = from_frames(&[&[1.0, 2.0, 3.0, 4.0]], 2, 2, 1);
        assert_eq!(spatial_downsample(&q, 2).unwrap().data[[0, 0, 0, 0]], 2.5);
        assert!(matches!(
            spatial_downsample(&z, 3),
            Err(FfpError::InvalidArgument(_))
        ));
    }

    #[test]
    fn gram_examples() {
        // Two tokens with orthogonal channel vectors.
        let z = from_frames(&[&[1.0, 0.0, 0.0, 1.0]], 1, 2, 2);
        assert_eq!(gram(&z).values[[0, 0, 0, 1]], 0.0);
        let e1 = [1.0, 0.0, 0.0, 0.0];
        let z = from_frames(&[&e1, &e1], 1, 1, 4);
        assert_eq!(gram(&z).values[[0, 0, 1, 0]], 0.25);

        let z = randn(6, LatentShape::new(2, 1, 2, 2));
        let g = gram(&z);
        for i in 0..2 {
            for u in 0..2 {
                for j in 0..2 {
                    for v in 0..2 {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            acc += z.data[[i, 0, u, c]] * z.data[[j, 0, v, c]];
                        }
                        assert!((g.values[[i, u, j, v]] - acc / 2.0).abs() < 1e-12);
                        assert!((g.values[[i, u, j, v]] - g.values[[j, v, i, u]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn motion_loss_examples() {
        let s = randn(7, LatentShape::new(3, 4, 4, 4));
        assert_eq!(motion_loss(&s, &s, 2).unwrap(), 0.0);

        // Hand oracle: G01 = 1*2 = 2, Ĝ01 = 1*3 = 3, both ordered pairs contribute 1.
        let st = from_frames(&[&[1.0], &[2.0]], 1, 1, 1);
        let te = from_frames(&[&[1.0], &[3.0]], 1, 1, 1);
        assert_eq!(motion_loss(&st, &te, 1).unwrap(), 1.0);

        // Teacher frames mutually orthogonal (zero cross-frame Gram); student
        // cross-frame Gram entries all equal g = 0.5·0.5·... on one channel.
        let te = from_frames(&[&[1.0, 0.0], &[0.0, 1.0]], 1, 1, 2);
        let st = from_frames(&[&[1.0, 0.0], &[0.6, 0.0]], 1, 1, 2);
        let g = 1.0 * 0.6 / 2.0;
        assert!((motion_loss(&st, &te, 1).unwrap() - g).abs() < 1e-15);

        assert!(motion_loss(
            &from_frames(&[&[1.0]], 1, 1, 1),
            &from_frames(&[&[1.0]], 1, 1, 1),
            1
        )
        .is_err());
    }

    #[test]
    fn similarity_examples() {
        let eye = Array2::<f64>::eye(3);
        assert_eq!(similarity_matrix(eye.view(), eye.view()).unwrap(), eye);
        let a = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Array2::from_shape_vec((2, 2), vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let s = similarity_matrix(a.view(), b.view()).unwrap();
        let s3 = similarity_matrix(a.view(), (&b * 3.0).view()).unwrap();
        assert!((&s3 - &(&s * 3.0)).iter().all(|d| d.abs() < 1e-14));
        // Explicit product oracle.
        assert_eq!(
            s,
            Array2::from_shape_vec((2, 2), vec![-1.5, 2.5, -2.5, 7.0]).unwrap()
        );
    }

    /// Direct double-sum oracle, independent of the pooled implementation.
    fn mmd2_oracle(p: &Array2<f64>, q: &Array2<f64>, sigma: f64) -> f64 {
        let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
            (-d / (2.0 * sigma * sigma)).exp()
        };
        let (n, m) = (p.nrows() as f64, q.nrows() as f64);
        let mut xx = 0.0;
        for a in p.rows() {
            for b in p.rows() {
                xx += k(a, b);
            }
        }
        let mut yy = 0.0;
        for a in q.rows() {
            for b in q.rows() {
                yy += k(a, b);
            }
        }
        let mut xy = 0.0;
        for a in p.rows() {
            for b in q.rows() {
                xy += k(a, b);
            }
        }
        xx / (n * n) + yy / (m * m) - 2.0 * xy / (n * m)
    }

    #[test]
    fn mmd2_examples() {
        let mut rng = stream_rng(8, Stream::Fixture, 0);
        let p = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        assert!(mmd2(p.view(), p.view(), 0.7).unwrap().abs() <= 1e-12);

        let x = Array2::from_shape_vec((1, 2), vec![0.3, -0.2]).unwrap();
        let y = Array2::from_shape_vec((1, 2), vec![1.0, 0.5]).unwrap();
        let sigma = 0.8;
        let d2 = 0.7f64 * 0.7 + 0.7 * 0.7;
        let closed = 2.0 - 2.0 * (-d2 / (2.0 * sigma * sigma)).exp();
        assert!((mmd2(x.view(), y.view(), sigma).unwrap() - closed).abs() < 1e-15);

        let q = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        assert!((mmd2(p.view(), q.view(), 0.9).unwrap() - mmd2_oracle(&p, &q, 0.9)).abs() < 1e-10);

        assert!(matches!(
            mmd2(p.view(), q.view(), 0.0),
            Err(FfpError::InvalidArgument(_))
        ));
        assert!(mmd2(p.view(), q.view(), -1.0).is_err());
    }

    #[test]
    fn drift_examples() {
        let one = randn(9, LatentShape::new(1, 2, 2, 3));
        let f0 = one.data.index_axis(Axis(0), 0).to_owned();
        let mut all = Array4::zeros((3, 2, 2, 3));
        for i in 0..3 {
            all.index_axis_mut(Axis(0), i).assign(&f0);
        }
        let d = drift_scores(frame_tokens(&VideoLatent::new(all.clone())).view()).unwrap();
        assert_eq!(d.d, vec![0.0, 0.0]);

        all.index_axis_mut(Axis(0), 2).assign(&(&f0 * 2.0));
        let d = drift_scores(frame_tokens(&VideoLatent::new(all)).view()).unwrap();
        assert_eq!(d.d[0], 0.0);
        assert!(d.d[1] > 0.0);
    }

    #[test]
    fn drift_gap_sums_absolute_differences() {
        assert!((drift_gap(&[0.1, 0.2], &[0.0, 0.0]).unwrap() - 0.3).abs() <= 1e-15);
        assert_eq!(drift_gap(&[0.5], &[0.75]).unwrap(), 0.25);
        assert!(drift_gap(&[0.1], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn drift_is_rotation_invariant() {
        let z = randn(10, LatentShape::new(3, 2, 2, 4));
        // Random orthogonal matrix by Gram-Schmidt on a Gaussian draw.
        let mut rng = stream_rng(11, Stream::Fixture, 0);
        let mut q = Array2::<f64>::from_shape_fn((4, 4), |_| rng.sample(StandardNormal));
        for i in 0..4 {
            for j in 0..i {
                let proj = q.row(i).dot(&q.row(j));
                let rj = q.row(j).to_owned();
                q.row_mut(i).scaled_add(-proj, &rj);
            }
            let n = q.row(i).dot(&q.row(i)).sqrt();
            q.row_mut(i).mapv_inplace(|v| v / n);
        }
        let tok = frame_tokens(&z);
        let rotated = Array3::from_shape_fn(tok.dim(), |(f, n, c)| {
            (0..4).map(|k| tok[[f, n, k]] * q[[k, c]]).sum()
        });
        let a = drift_scores(tok.view()).unwrap();
        let b = drift_scores(rotated.view()).unwrap();
        for (x, y) in a.d.iter().zip(&b.d) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn mmd_loss_examples() {
        let s = randn(12, LatentShape::new(3, 4, 4, 4));
        assert_eq!(mmd_loss(&s, &s, 2).unwrap(), 0.0);

        let t = randn(13, LatentShape::new(3, 4, 4, 4));
        let ds = drift_scores(frame_tokens(&spatial_downsample(&s, 2).unwrap()).view()).unwrap();
        let dt = drift_scores(frame_tokens(&spatial_downsample(&t, 2).unwrap()).view()).unwrap();
        let oracle: f64 = ds.d.iter().zip(&dt.d).map(|(a, b)| (a - b).abs()).sum();
        assert!((mmd_loss(&s, &t, 2).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 0.0, 0.0, w).unwrap().total, 1.0);
        assert!((total_loss(0.5, 0.1, 0.2, w).unwrap().total - 1.2).abs() < 1e-15);
        let zero = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(total_loss(0.37, 9.0, 4.0, zero).unwrap().total, 0.37);
        let err = total_loss(0.1, f64::NAN, 0.0, w).unwrap_err();
        assert!(err.to_string().contains("l_motion"));
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    fn max_rel_err(
        analytic: &VideoLatent,
        f: impl Fn(&VideoLatent) -> f64,
        x: &VideoLatent,
    ) -> f64 {
        let h = 1e-6;
        let mut worst = 0.0f64;
        for idx in 0..x.data.len() {
            let mut p = x.clone();
            p.data.as_slice_mut().unwrap()[idx] += h;
            let mut m = x.clone();
            m.data.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let a = analytic.data.as_slice().unwrap()[idx];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-4));
        }
        worst
    }

    #[test]
    fn distillation_gradients_match_finite_differences() {
        let sh = LatentShape::new(3, 4, 4, 4);
        let s = randn(14, sh);
        let t = randn(15, sh);
        let (_, g) = motion_loss_grad(&s, &t, 2).unwrap();
        let e = max_rel_err(&g, |x| motion_loss(x, &t, 2).unwrap(), &s);
        assert!(e < 1e-4, "motion rel err {e}");
        let (_, g) = mmd_loss_grad(&s, &t, 2).unwrap();
        let e = max_rel_err(&g, |x| mmd_loss(x, &t, 2).unwrap(), &s);
        assert!(e < 1e-4, "mmd rel err {e}");
    }

    proptest! {
        #[test]
        fn distillation_losses_nonnegative_and_symmetric(a in 0u64..1000, b in 0u64..1000) {
            let sh = LatentShape::new(3, 2, 2, 3);
            let s = randn(a, sh);
            let t = randn(b + 5000, sh);
            let m1 = motion_loss(&s, &t, 1).unwrap();
            let m2 = motion_loss(&t, &s, 1).unwrap();
            prop_assert!(m1 >= 0.0);
            prop_assert!((m1 - m2).abs() <= 1e-12);
            let d1 = mmd_loss(&s, &t, 1).unwrap();
            let d2 = mmd_loss(&t, &s, 1).unwrap();
            prop_assert!(d1 >= 0.0);
            prop_assert!((d1 - d2).abs() <= 1e-12);
        }

        #[test]
        fn total_is_linear_in_each_weight(fm in 0.0f64..2.0, mo in 0.0f64..2.0, md in 0.0f64..2.0, l1 in 0.0f64..10.0, l2 in 0.0f64..10.0) {
            let base = total_loss(fm, mo, md, LossWeights::new(0.0, 0.0).unwrap()).unwrap().total;
            let r = total_loss(fm, mo, md, LossWeights::new(l1, l2).unwrap()).unwrap().total;
            prop_assert!((r - (base + l1 * mo + l2 * md)).abs() <= 1e-12);
        }
    }
}
