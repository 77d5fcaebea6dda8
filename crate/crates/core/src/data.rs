//! Synthetic first-frame-propagation pairs with analytic ground truth.
//!
//! A rectangle moves over a smooth textured background on a linear or
//! circular path. The target clip applies one appearance edit to every frame
//! and keeps the trajectory, so motion ground truth is known exactly.

use ndarray::{s, Array3, Array4, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{stream_rng, Stream};

/// Channel mixing used by the global-restyle edit. Rows sum to 1 so the
/// unit cube maps into itself.
pub const RESTYLE_MATRIX: [[f64; 3]; 3] = [[0.6, 0.3, 0.1], [0.1, 0.6, 0.3], [0.3, 0.1, 0.6]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive bounds on rectangle side length.
    pub rect_min: usize,
    pub rect_max: usize,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 16,
            width: 16,
            rect_min: 4,
            rect_max: 6,
        }
    }
}

impl DataParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return invalid(format!(
                "canvas {}x{} is smaller than 8x8",
                self.height, self.width
            ));
        }
        if self.frames < 2 {
            return invalid(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.rect_min == 0
            || self.rect_min > self.rect_max
            || self.rect_max * 2 > self.height.min(self.width)
        {
            return invalid(format!(
                "rectangle sides {}..={} do not fit a {}x{} canvas",
                self.rect_min, self.rect_max, self.height, self.width
            ));
        }
        Ok(())
    }
}

/// Pixels in `[0, 1]`, indexed `(frame, height, width, rgb)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub pixels: Array4<f64>,
}

impl VideoClip {
    pub fn frames(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn frame(&self, f: usize) -> Array3<f64> {
        self.pixels.index_axis(Axis(0), f).to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditKind {
    ColorSwap,
    ObjectRemove,
    GlobalRestyle,
}

impl EditKind {
    pub const ALL: [EditKind; 3] = [
        EditKind::ColorSwap,
        EditKind::ObjectRemove,
        EditKind::GlobalRestyle,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Trajectory {
    /// Origin advances by `velocity` (rows, cols) each frame.
    Linear { velocity: (f64, f64) },
    /// Origin circles `center` with the given radius; angle `phase + omega·k`.
    Circular {
        center: (f64, f64),
        radius: f64,
        omega: f64,
        phase: f64,
    },
}

/// Rectangle geometry over time. Positions are the top-left corner in
/// pixel units, rounded to the nearest pixel when rasterised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub origin: (f64, f64),
    pub size: (usize, usize),
    pub trajectory: Trajectory,
}

impl MotionSpec {
    pub fn position(&self, k: usize) -> (f64, f64) {
        let k = k as f64;
        match self.trajectory {
            Trajectory::Linear { velocity } => (
                self.origin.0 + velocity.0 * k,
                self.origin.1 + velocity.1 * k,
            ),
            Trajectory::Circular {
                center,
                radius,
                omega,
                phase,
            } => {
                let a = phase + omega * k;
                (center.0 + radius * a.sin(), center.1 + radius * a.cos())
            }
        }
    }

    /// Integer top-left corner actually drawn at frame `k`.
    pub fn raster_origin(&self, k: usize) -> (i64, i64) {
        let (y, x) = self.position(k);
        (y.round() as i64, x.round() as i64)
    }

    /// Centroid of the drawn footprint at frame `k`, clipped to the canvas,
    /// in (row, col) pixel-centre coordinates.
    pub fn centroid(&self, k: usize, height: usize, width: usize) -> Option<(f64, f64)> {
        let (y0, x0) = self.raster_origin(k);
        let ys = (y0.max(0), (y0 + self.size.0 as i64).min(height as i64));
        let xs = (x0.max(0), (x0 + self.size.1 as i64).min(width as i64));
        if ys.0 >= ys.1 || xs.0 >= xs.1 {
            return None;
        }
        Some((
            (ys.0 + ys.1 - 1) as f64 / 2.0,
            (xs.0 + xs.1 - 1) as f64 / 2.0,
        ))
    }

    fn covers(&self, k: usize, y: usize, x: usize) -> bool {
        let (y0, x0) = self.raster_origin(k);
        let (y, x) = (y as i64, x as i64);
        y >= y0 && y < y0 + self.size.0 as i64 && x >= x0 && x < x0 + self.size.1 as i64
    }
}

/// Smooth sinusoidal texture, `b[y,x,c] = 0.5 + 0.2·sin(a_c·x + b_c·y + φ_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub freq_x: [f64; 3],
    pub freq_y: [f64; 3],
    pub phase: [f64; 3],
}

impl Background {
    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        0.5 + 0.2 * (self.freq_x[c] * x as f64 + self.freq_y[c] * y as f64 + self.phase[c]).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfpSample {
    pub seed: u64,
    pub source: VideoClip,
    pub edited_first_frame: Array3<f64>,
    pub target: VideoClip,
    pub edit_kind: EditKind,
    pub motion_spec: MotionSpec,
    /// Motion of the target clip; always equal to `motion_spec`.
    pub target_motion: MotionSpec,
    pub background: Background,
    pub color: [f64; 3],
}

/// Draws the rectangle (or only the background when `color` is `None`).
pub fn render_clip(
    p: &DataParams,
    motion: &MotionSpec,
    bg: &Background,
    color: Option<[f64; 3]>,
) -> VideoClip {
    let mut px = Array4::zeros((p.frames, p.height, p.width, 3));
    for k in 0..p.frames {
        for y in 0..p.height {
            for x in 0..p.width {
                for c in 0..3 {
                    px[[k, y, x, c]] = match color {
                        Some(col) if motion.covers(k, y, x) => col[c],
                        _ => bg.value(y, x, c),
                    };
                }
            }
        }
    }
    VideoClip { pixels: px }
}

/// Applies `m` to every pixel's RGB vector, clamping to `[0, 1]`.
pub fn restyle(clip: &VideoClip, m: &[[f64; 3]; 3]) -> VideoClip {
    let mut out = clip.pixels.clone();
    for mut px in out.lanes_mut(Axis(3)) {
        let v = [px[0], px[1], px[2]];
        for (c, row) in m.iter().enumerate() {
            px[c] = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]).clamp(0.0, 1.0);
        }
    }
    VideoClip { pixels: out }
}

fn draw_motion(rng: &mut impl Rng, p: &DataParams) -> MotionSpec {
    let size = (
        rng.random_range(p.rect_min..=p.rect_max),
        rng.random_range(p.rect_min..=p.rect_max),
    );
    let span = (p.frames - 1) as f64;
    let max_y = (p.height - size.0) as f64;
    let max_x = (p.width - size.1) as f64;
    if rng.random_bool(0.5) {
        // Pick the velocity first, then an origin that keeps every frame on canvas.
        let vmax_y = (max_y / span).min(2.0);
        let vmax_x = (max_x / span).min(2.0);
        let velocity = (
            rng.random_range(-vmax_y..=vmax_y),
            rng.random_range(-vmax_x..=vmax_x),
        );
        let lo = (0f64.max(-velocity.0 * span), 0f64.max(-velocity.1 * span));
        let hi = (
            max_y.min(max_y - velocity.0 * span),
            max_x.min(max_x - velocity.1 * span),
        );
        let origin = (rng.random_range(lo.0..=hi.0), rng.random_range(lo.1..=hi.1));
        MotionSpec {
            origin,
            size,
            trajectory: Trajectory::Linear { velocity },
        }
    } else {
        let radius = rng.random_range(1.0..=(max_y.min(max_x) / 2.0).max(1.0));
        let center = (
            rng.random_range(radius..=(max_y - radius).max(radius)),
            rng.random_range(radius..=(max_x - radius).max(radius)),
        );
        let omega = rng.random_range(0.3..=0.9) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let trajectory = Trajectory::Circular {
            center,
            radius,
            omega,
            phase,
        };
        let mut spec = MotionSpec {
            origin: (0.0, 0.0),
            size,
            trajectory,
        };
        spec.origin = spec.position(0);
        spec
    }
}

/// Deterministic sample for `seed`.
pub fn gen_sample(seed: u64, p: &DataParams) -> Result<FfpSample> {
    p.validate()?;
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let motion = draw_motion(&mut rng, p);
    let mut bg = Background {
        freq_x: [0.0; 3],
        freq_y: [0.0; 3],
        phase: [0.0; 3],
    };
    for c in 0..3 {
        bg.freq_x[c] = rng.random_range(0.2..0.8);
        bg.freq_y[c] = rng.random_range(0.2..0.8);
        bg.phase[c] = rng.random_range(0.0..std::f64::consts::TAU);
    }
    // Saturated colours stand out from the mid-grey texture.
    let mut color = [0.0; 3];
    let bits = 1 + rng.next_u32() % 6;
    for (c, v) in color.iter_mut().enumerate() {
        *v = if bits >> c & 1 == 1 { 0.95 } else { 0.05 };
    }
    let edit_kind = EditKind::ALL[rng.random_range(0..3)];

    let source = render_clip(p, &motion, &bg, Some(color));
    let target = apply_edit(p, &source, &motion, &bg, color, edit_kind);
    Ok(FfpSample {
        seed,
        edited_first_frame: target.frame(0),
        source,
        target,
        edit_kind,
        motion_spec: motion,
        target_motion: motion,
        background: bg,
        color,
    })
}

/// Target clip for an edit. Appearance changes only.
pub fn apply_edit(
    p: &DataParams,
    source: &VideoClip,
    motion: &MotionSpec,
    bg: &Background,
    color: [f64; 3],
    kind: EditKind,
) -> VideoClip {
    match kind {
        EditKind::ColorSwap => render_clip(p, motion, bg, Some(color.map(|v| 1.0 - v))),
        EditKind::ObjectRemove => render_clip(p, motion, bg, None),
        EditKind::GlobalRestyle => restyle(source, &RESTYLE_MATRIX),
    }
}

impl FfpSample {
    /// Background of the target clip (restyled when the edit is global).
    pub fn target_background(&self, p: &DataParams) -> VideoClip {
        let bg = render_clip(p, &self.motion_spec, &self.background, None);
        match self.edit_kind {
            EditKind::GlobalRestyle => restyle(&bg, &RESTYLE_MATRIX),
            _ => bg,
        }
    }
}

/// Seed for sample `index` of a dataset drawn under `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    stream_rng(seed, Stream::Data, index + 1).next_u64()
}

/// What `gen-data` writes: enough to re-render every sample bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub format_version: u32,
    pub seed: u64,
    pub params: DataParams,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub seed: u64,
    pub edit_kind: EditKind,
    pub motion: MotionSpec,
}

pub const DATASET_VERSION: u32 = 1;

impl DatasetSpec {
    pub fn generate(seed: u64, count: usize, params: DataParams) -> Result<Self> {
        params.validate()?;
        let samples = (0..count as u64)
            .map(|i| {
                let s = gen_sample(sample_seed(seed, i), &params)?;
                Ok(SampleRecord {
                    seed: s.seed,
                    edit_kind: s.edit_kind,
                    motion: s.motion_spec,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format_version: DATASET_VERSION,
            seed,
            params,
            samples,
        })
    }

    pub fn render(&self) -> Result<Vec<FfpSample>> {
        self.samples
            .iter()
            .map(|r| gen_sample(r.seed, &self.params))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset spec serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)
            .map_err(|e| crate::FfpError::Format(format!("dataset: {e}")))?;
        if spec.format_version != DATASET_VERSION {
            return Err(crate::FfpError::Format(format!(
                "unsupported dataset version {}",
                spec.format_version
            )));
        }
        spec.params.validate()?;
        Ok(spec)
    }
}

/// Pixel block `[y0, y1) × [x0, x1)` of frame `k`, for tests and metrics.
pub fn region(clip: &VideoClip, k: usize, ys: (usize, usize), xs: (usize, usize)) -> Array3<f64> {
    clip.pixels
        .slice(s![k, ys.0..ys.1, xs.0..xs.1, ..])
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_origin_advances_by_velocity() {
        let p = DataParams::default();
        let m = MotionSpec {
            origin: (3.0, 2.0),
            size: (4, 4),
            trajectory: Trajectory::Linear {
                velocity: (1.0, 0.0),
            },
        };
        for k in 0..p.frames {
            assert_eq!(m.position(k), (3.0 + k as f64, 2.0));
        }
        let bg = Background {
            freq_x: [0.3; 3],
            freq_y: [0.4; 3],
            phase: [0.0; 3],
        };
        let clip = render_clip(&p, &m, &bg, Some([0.95, 0.05, 0.05]));
        for k in 0..p.frames {
            assert_eq!(clip.pixels[[k, 3 + k, 2, 0]], 0.95);
            assert_eq!(clip.pixels[[k, 3 + k, 6, 0]], bg.value(3 + k, 6, 0));
        }
    }

    #[test]
    fn identity_restyle_is_noop() {
        let s = gen_sample(4, &DataParams::default()).unwrap();
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(restyle(&s.source, &eye), s.source);
    }

    #[test]
    fn color_swap_only_touches_footprint() {
        let p = DataParams::default();
        let s = (0..50u64)
            .map(|i| gen_sample(i, &p).unwrap())
            .find(|s| s.edit_kind == EditKind::ColorSwap)
            .unwrap();
        for k in 0..p.frames {
            for y in 0..p.height {
                for x in 0..p.width {
                    let inside = s.motion_spec.covers(k, y, x);
                    for c in 0..3 {
                        let (a, b) = (s.source.pixels[[k, y, x, c]], s.target.pixels[[k, y, x, c]]);
                        if inside {
                            assert_ne!(a, b);
                        } else {
                            assert_eq!(a, b);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_params() {
        let p = DataParams {
            height: 0,
            ..DataParams::default()
        };
        assert!(gen_sample(0, &p).is_err());
        let p = DataParams {
            frames: 1,
            ..DataParams::default()
        };
        assert!(gen_sample(0, &p).is_err());
    }

    #[test]
    fn dataset_spec_round_trips_and_rerenders() {
        let spec = DatasetSpec::generate(7, 5, DataParams::default()).unwrap();
        let back = DatasetSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, back);
        let a = spec.render().unwrap();
        let b = back.render().unwrap();
        assert_eq!(a, b);
        assert!(DatasetSpec::from_json("{\"format_version\":1}").is_err());
    }

    proptest! {
        #[test]
        fn sample_invariants(seed in any::<u64>()) {
            let p = DataParams::default();
            let s = gen_sample(seed, &p).unwrap();
            prop_assert_eq!(s.target.frame(0), s.edited_first_frame.clone());
            prop_assert_eq!(s.target_motion, s.motion_spec);
            prop_assert!(s.source.pixels.iter().chain(s.target.pixels.iter()).all(|v| (0.0..=1.0).contains(v)));
            // The rectangle stays fully on canvas every frame.
            for k in 0..p.frames {
                let (y, x) = s.motion_spec.raster_origin(k);
                prop_assert!(y >= 0 && x >= 0);
                prop_assert!(y as usize + s.motion_spec.size.0 <= p.height);
                prop_assert!(x as usize + s.motion_spec.size.1 <= p.width);
            }
            prop_assert_eq!(gen_sample(seed, &p).unwrap(), s);
        }
    }
}
