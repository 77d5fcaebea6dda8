//! Video latents and the first-frame conditioning assembly.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FfpError, Result};

/// Latent grid extents: frames, height, width, channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LatentShape {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
        }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }
}

/// A real array indexed `(frame, height, width, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent {
    pub data: Array4<f64>,
}

impl VideoLatent {
    pub fn new(data: Array4<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            data: Array4::zeros(shape.dims()),
        }
    }

    pub fn shape(&self) -> LatentShape {
        let d = self.data.dim();
        LatentShape::new(d.0, d.1, d.2, d.3)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major token matrix `(F·H·W) × C`, frame index slowest.
    pub fn to_tokens(&self) -> Array2<f64> {
        let sh = self.shape();
        let flat: Vec<f64> = self.data.iter().copied().collect();
        Array2::from_shape_vec((sh.tokens(), sh.channels), flat).expect("contiguous latent")
    }

    pub fn from_tokens(tokens: ArrayView2<'_, f64>, shape: LatentShape) -> Result<Self> {
        if tokens.dim() != (shape.tokens(), shape.channels) {
            return invalid(format!(
                "token matrix {:?} does not match latent shape {:?}",
                tokens.dim(),
                shape
            ));
        }
        let flat: Vec<f64> = tokens.iter().copied().collect();
        Ok(Self {
            data: Array4::from_shape_vec(shape.dims(), flat).expect("checked shape"),
        })
    }

    pub fn frame(&self, f: usize) -> Array3<f64> {
        self.data.index_axis(Axis(0), f).to_owned()
    }

    pub fn sub(&self, other: &VideoLatent) -> VideoLatent {
        VideoLatent {
            data: &self.data - &other.data,
        }
    }
}

/// Inputs to one student or teacher forward pass.
#[derive(Debug, Clone)]
pub struct ConditioningPack {
    /// Noisy latent `z` at the current timestep.
    pub noisy: VideoLatent,
    /// Source latent `z_src`.
    pub source: VideoLatent,
    /// Edited first-frame latent `ẑ`, shape `(H', W', C)`.
    pub first_frame: Array3<f64>,
}

impl ConditioningPack {
    pub fn new(noisy: VideoLatent, source: VideoLatent, first_frame: Array3<f64>) -> Result<Self> {
        check_pack_shapes(&noisy, &source, &first_frame)?;
        Ok(Self {
            noisy,
            source,
            first_frame,
        })
    }

    pub fn shape(&self) -> LatentShape {
        self.noisy.shape()
    }

    /// Binary first-frame mask `M`, shape `(F', H', W')`.
    pub fn mask(&self) -> Array3<f64> {
        first_frame_mask(self.shape())
    }
}

fn check_pack_shapes(noisy: &VideoLatent, source: &VideoLatent, first: &Array3<f64>) -> Result<()> {
    let n = noisy.shape();
    if source.shape() != n {
        return invalid(format!(
            "source latent {:?} differs from noisy latent {:?}",
            source.shape(),
            n
        ));
    }
    if first.dim() != (n.height, n.width, n.channels) {
        return invalid(format!(
            "first-frame latent {:?} does not match (H', W', C) = {:?}",
            first.dim(),
            (n.height, n.width, n.channels)
        ));
    }
    if n.frames == 0 || n.height == 0 || n.width == 0 || n.channels == 0 {
        return invalid("latent dimensions must be positive");
    }
    Ok(())
}

pub fn first_frame_mask(shape: LatentShape) -> Array3<f64> {
    let mut m = Array3::zeros((shape.frames, shape.height, shape.width));
    m.index_axis_mut(Axis(0), 0).fill(1.0);
    m
}

/// Channel-concatenates `[noisy, source, zero-padded first frame, mask]` into a
/// latent with `3C + 1` channels.
pub fn assemble_conditioning(
    noisy: &VideoLatent,
    source: &VideoLatent,
    first_frame: &Array3<f64>,
) -> Result<VideoLatent> {
    check_pack_shapes(noisy, source, first_frame)?;
    let sh = noisy.shape();
    let c = sh.channels;
    let mut out = Array4::<f64>::zeros((sh.frames, sh.height, sh.width, 3 * c + 1));
    out.slice_mut(s![.., .., .., 0..c]).assign(&noisy.data);
    out.slice_mut(s![.., .., .., c..2 * c]).assign(&source.data);
    out.slice_mut(s![0, .., .., 2 * c..3 * c])
        .assign(first_frame);
    out.slice_mut(s![0, .., .., 3 * c]).fill(1.0);
    Ok(VideoLatent::new(out))
}

impl ConditioningPack {
    pub fn composite(&self) -> VideoLatent {
        assemble_conditioning(&self.noisy, &self.source, &self.first_frame)
            .expect("pack shapes validated at construction")
    }
}

pub(crate) fn require_finite(latent: &VideoLatent, what: &str) -> Result<()> {
    if latent.is_finite() {
        Ok(())
    } else {
        Err(FfpError::NumericInput(format!(
            "{what} contains non-finite entries"
        )))
    }
}
