//! A small tensor-level reverse-mode differentiation tape over `Array2<f64>`.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass.

use ndarray::{concatenate, s, Array2, Axis};

use crate::heads::HeadKind;
use crate::rope::{rotate_in_place, temporal_position_grad, RopeFrequencyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Broadcast a `1 × m` row over every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    /// `2 · sigmoid(x)`
    TwoSigmoid(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    Rope {
        x: Var,
        t: Var,
        h: Vec<f64>,
        w: Vec<f64>,
        cfg: RopeFrequencyConfig,
    },
    Positions {
        alpha: Var,
        kind: HeadKind,
        base: Vec<f64>,
        frames: usize,
    },
    /// Scalar produced by an external function whose gradient w.r.t. `x`
    /// was computed alongside its value.
    Scalar {
        x: Var,
        grad: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const RMS_EPS: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x m row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn two_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 2.0 * sigmoid(x));
        self.push(v, Op::TwoSigmoid(a), &[a])
    }

    /// Row-wise RMS normalisation with a learned `1 × m` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let m = xv.ncols() as f64;
        let inv_rms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| 1.0 / (r.dot(&r) / m + RMS_EPS).sqrt())
            .collect();
        let mut v = xv.clone();
        for (mut row, &k) in v.rows_mut().into_iter().zip(&inv_rms) {
            row *= k;
        }
        v *= self.value(gain);
        self.push(v, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row-wise softmax. Entries equal to `-inf` receive exactly zero mass.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
            row.mapv_inplace(|a| (a - m).exp());
            let s = row.sum();
            row.mapv_inplace(|a| a / s);
        }
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Rotary encoding with per-token temporal coordinates taken from the
    /// `T × 1` node `t`, and fixed height/width coordinates.
    pub fn rope(&mut self, x: Var, t: Var, h: &[f64], w: &[f64], cfg: &RopeFrequencyConfig) -> Var {
        let tv: Vec<f64> = self.value(t).iter().copied().collect();
        let mut v = self.value(x).clone();
        rotate_in_place(v.view_mut(), [&tv, h, w], cfg, 1.0);
        self.push(
            v,
            Op::Rope {
                x,
                t,
                h: h.to_vec(),
                w: w.to_vec(),
                cfg: *cfg,
            },
            &[x, t],
        )
    }

    /// Head-class temporal coordinates from a `1 × 2` node `[α_S, α_T]`.
    pub fn positions(&mut self, alpha: Var, kind: HeadKind, base: &[f64], frames: usize) -> Var {
        let a = self.value(alpha);
        let (alpha_s, alpha_t) = (a[[0, 0]], a[[0, 1]]);
        let vals: Vec<f64> = match kind {
            HeadKind::Spatial => {
                let off = alpha_s * frames as f64;
                base.iter()
                    .map(|&t| if t == 0.0 { off } else { t })
                    .collect()
            }
            HeadKind::Temporal => base.iter().map(|&t| alpha_t * t).collect(),
        };
        let v = Array2::from_shape_vec((vals.len(), 1), vals).expect("column vector");
        self.push(
            v,
            Op::Positions {
                alpha,
                kind,
                base: base.to_vec(),
                frames,
            },
            &[alpha],
        )
    }

    /// Registers a scalar `value` whose gradient with respect to `x` is
    /// `grad` (same shape as `x`).
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(grad.dim(), self.value(x).dim(), "external gradient shape");
        self.push(
            Array2::from_elem((1, 1), value),
            Op::Scalar { x, grad },
            &[x],
        )
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let acc = |v: Var, g: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::MatMulT(a, b) => {
                    let ga = gy.dot(self.value(*b));
                    let gb = gy.t().dot(self.value(*a));
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*b, gy.clone(), &mut grads);
                    acc(*a, gy, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let gr = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*row, gr, &mut grads);
                    acc(*a, gy, &mut grads);
                }
                Op::Scale(a, k) => acc(*a, gy * *k, &mut grads),
                Op::Silu(a) => {
                    let mut g = gy;
                    g.zip_mut_with(self.value(*a), |g, &x| {
                        let s = sigmoid(x);
                        *g *= s + x * s * (1.0 - s);
                    });
                    acc(*a, g, &mut grads);
                }
                Op::Tanh(a) => {
                    let mut g = gy;
                    g.zip_mut_with(&node.value, |g, &y| *g *= 1.0 - y * y);
                    acc(*a, g, &mut grads);
                }
                Op::TwoSigmoid(a) => {
                    let mut g = gy;
                    g.zip_mut_with(&node.value, |g, &y| *g *= y * (1.0 - 0.5 * y));
                    acc(*a, g, &mut grads);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let m = xv.ncols() as f64;
                    let mut xhat = xv.clone();
                    for (mut row, &k) in xhat.rows_mut().into_iter().zip(inv_rms) {
                        row *= k;
                    }
                    let ggain = (&gy * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gxhat = &gy * gv;
                    let mut gx = Array2::zeros(xv.dim());
                    for (r, &k) in inv_rms.iter().enumerate() {
                        let dot = gxhat.row(r).dot(&xhat.row(r)) / m;
                        let mut out = gx.row_mut(r);
                        out.assign(&gxhat.row(r));
                        out.scaled_add(-dot, &xhat.row(r));
                        out *= k;
                    }
                    acc(*gain, ggain, &mut grads);
                    acc(*x, gx, &mut grads);
                }
                Op::SliceCols { x, start } => {
                    let mut g = Array2::zeros(self.value(*x).dim());
                    g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                    acc(*x, g, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(*p, gy.slice(s![.., off..off + w]).to_owned(), &mut grads);
                        off += w;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut g = &gy * y;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let s = grow.sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * s);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Rope { x, t, h, w, cfg } => {
                    let tv: Vec<f64> = self.value(*t).iter().copied().collect();
                    if self.nodes[t.0].needs_grad {
                        let gt = temporal_position_grad(node.value.view(), gy.view(), cfg);
                        let gt = Array2::from_shape_vec((gt.len(), 1), gt).expect("column");
                        acc(*t, gt, &mut grads);
                    }
                    let mut gx = gy;
                    rotate_in_place(gx.view_mut(), [&tv, h, w], cfg, -1.0);
                    acc(*x, gx, &mut grads);
                }
                Op::Positions {
                    alpha,
                    kind,
                    base,
                    frames,
                } => {
                    let mut ga = Array2::zeros((1, 2));
                    match kind {
                        HeadKind::Spatial => {
                            ga[[0, 0]] = base
                                .iter()
                                .zip(gy.iter())
                                .filter(|(b, _)| **b == 0.0)
                                .map(|(_, g)| g * *frames as f64)
                                .sum();
                        }
                        HeadKind::Temporal => {
                            ga[[0, 1]] = base.iter().zip(gy.iter()).map(|(b, g)| b * g).sum();
                        }
                    }
                    acc(*alpha, ga, &mut grads);
                }
                Op::Scalar { x, grad } => acc(*x, grad * gy[[0, 0]], &mut grads),
            }
        }
        Gradients { grads }
    }
}

/// Gradients of the backward root with respect to every trainable node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the root does not depend on it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Builds a scalar from `x` through `build`, then compares the tape
    /// gradient with central differences on every entry of `x`.
    fn check(x0: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        let mut grads = g.backward(y);
        let analytic = grads.take_or_zeros(x, x0.dim());
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let x = g.param(xp);
                let y = build(&mut g, x);
                g.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
            assert!(err < 1e-6, "entry {idx}: fd {fd} analytic {a}");
        }
    }

    /// Reduces a matrix to a scalar through a fixed random weighting.
    fn weigh(g: &mut Graph, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = g.value(y).dim();
        let w = rand_mat(&mut rng, r, c);
        let val = (g.value(y) * &w).sum();
        g.external_scalar(y, val, w)
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b0 = rand_mat(&mut rng, 4, 3);
        check(rand_mat(&mut rng, 2, 4), |g, x| {
            let b = g.constant(b0.clone());
            let y = g.matmul(x, b);
            let z = g.matmul_t(y, y);
            weigh(g, z, 1)
        });
    }

    #[test]
    fn elementwise_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gain0 = rand_mat(&mut rng, 1, 5);
        check(rand_mat(&mut rng, 3, 5), |g, x| {
            let gain = g.constant(gain0.clone());
            let n = g.rms_norm(x, gain);
            let a = g.silu(n);
            let b = g.tanh(a);
            let c = g.two_sigmoid(b);
            let d = g.add_row(c, gain);
            let e = g.scale(d, 0.7);
            let f = g.add(e, x);
            weigh(g, f, 3)
        });
        check(rand_mat(&mut rng, 1, 5), |g, gain| {
            let x = g.constant(Array2::from_shape_fn((3, 5), |(i, j)| {
                (i * 5 + j) as f64 * 0.1 - 0.4
            }));
            let n = g.rms_norm(x, gain);
            weigh(g, n, 4)
        });
    }

    #[test]
    fn softmax_slice_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(rand_mat(&mut rng, 3, 6), |g, x| {
            let a = g.slice_cols(x, 0, 2);
            let b = g.slice_cols(x, 2, 4);
            let sa = g.softmax(a);
            let sb = g.softmax(b);
            let c = g.concat_cols(&[sb, sa]);
            weigh(g, c, 6)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_with_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(
            Array2::from_shape_vec((2, 3), vec![0.1, f64::NEG_INFINITY, 2.0, 1.0, 1.0, 1.0])
                .unwrap(),
        );
        let s = g.softmax(x);
        let v = g.value(s);
        assert_eq!(v[[0, 1]], 0.0);
        for r in v.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rope_and_positions_through_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = RopeFrequencyConfig::with_default_split(8, 50.0).unwrap();
        let grid = crate::rope::build_position_grid((3, 2, 1)).unwrap();
        let x0 = rand_mat(&mut rng, 6, 8);
        for kind in [HeadKind::Spatial, HeadKind::Temporal] {
            let gridc = grid.clone();
            let x0c = x0.clone();
            check(
                Array2::from_shape_vec((1, 2), vec![0.6, 1.3]).unwrap(),
                move |g, alpha| {
                    let x = g.constant(x0c.clone());
                    let t = g.positions(alpha, kind, &gridc.t_index, 3);
                    let r = g.rope(x, t, &gridc.h_index, &gridc.w_index, &cfg);
                    weigh(g, r, 8)
                },
            );
        }
        let gridc = grid.clone();
        check(x0, move |g, x| {
            let t = g.constant(Array2::from_shape_vec((6, 1), gridc.t_index.clone()).unwrap());
            let r = g.rope(x, t, &gridc.h_index, &gridc.w_index, &cfg);
            weigh(g, r, 9)
        });
    }
}
