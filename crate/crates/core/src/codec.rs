//! Linear stand-in for a video autoencoder.
//!
//! Each frame is cut into non-overlapping `p × p` RGB patches, flattened in
//! `(dy, dx, rgb)` order and projected onto `C` seeded orthonormal directions.
//! Decoding applies the transpose and clamps to `[0, 1]`.

use ndarray::{s, Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{invalid, Result};
use crate::latent::{LatentShape, VideoLatent};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecParams {
    pub patch: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            patch: 2,
            channels: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCodec {
    pub params: CodecParams,
    /// `(p·p·3) × C`, orthonormal columns.
    pub basis: Array2<f64>,
}

impl ToyCodec {
    pub fn new(params: CodecParams) -> Result<Self> {
        let dim = params.patch * params.patch * 3;
        if params.patch == 0 || params.channels == 0 || params.channels > dim {
            return invalid(format!(
                "codec needs 1 <= channels <= {dim} for patch {}, got {}",
                params.patch, params.channels
            ));
        }
        let mut rng = stream_rng(params.seed, Stream::Codec, 0);
        let mut q =
            Array2::<f64>::from_shape_fn((dim, params.channels), |_| rng.sample(StandardNormal));
        // Modified Gram-Schmidt, run twice for orthogonality to round-off.
        for _ in 0..2 {
            for j in 0..params.channels {
                for i in 0..j {
                    let proj = q.column(i).dot(&q.column(j));
                    let qi = q.column(i).to_owned();
                    q.column_mut(j).scaled_add(-proj, &qi);
                }
                let n = q.column(j).dot(&q.column(j)).sqrt();
                q.column_mut(j).mapv_inplace(|v| v / n);
            }
        }
        Ok(Self { params, basis: q })
    }

    pub fn patch_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> Result<LatentShape> {
        let p = self.params.patch;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return invalid(format!(
                "frame {height}x{width} is not divisible by patch {p}"
            ));
        }
        Ok(LatentShape::new(
            frames,
            height / p,
            width / p,
            self.params.channels,
        ))
    }

    /// Patch matrix `(F·H'·W') × (p·p·3)`, tokens row-major, frame slowest.
    pub fn patches(&self, clip: &VideoClip) -> Result<Array2<f64>> {
        let (f, h, w, _) = clip.pixels.dim();
        let sh = self.latent_shape(f, h, w)?;
        let p = self.params.patch;
        let mut out = Array2::zeros((sh.tokens(), self.patch_dim()));
        let mut row = 0;
        for k in 0..f {
            for y in 0..sh.height {
                for x in 0..sh.width {
                    let block =
                        clip.pixels
                            .slice(s![k, y * p..(y + 1) * p, x * p..(x + 1) * p, ..]);
                    out.row_mut(row)
                        .iter_mut()
                        .zip(block.iter())
                        .for_each(|(o, v)| *o = *v);
                    row += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<VideoLatent> {
        let (f, h, w, _) = clip.pixels.dim();
        let sh = self.latent_shape(f, h, w)?;
        VideoLatent::from_tokens(self.patches(clip)?.dot(&self.basis).view(), sh)
    }

    /// Transpose projection without clamping; the exact left inverse of
    /// `encode` on its range.
    pub fn decode_unclamped(&self, latent: &VideoLatent) -> Result<VideoClip> {
        let sh = latent.shape();
        if sh.channels != self.params.channels {
            return invalid(format!(
                "latent has {} channels, codec has {}",
                sh.channels, self.params.channels
            ));
        }
        let p = self.params.patch;
        let rows = latent.to_tokens().dot(&self.basis.t());
        let mut px = Array4::zeros((sh.frames, sh.height * p, sh.width * p, 3));
        let mut row = 0;
        for k in 0..sh.frames {
            for y in 0..sh.height {
                for x in 0..sh.width {
                    let mut block = px.slice_mut(s![k, y * p..(y + 1) * p, x * p..(x + 1) * p, ..]);
                    block
                        .iter_mut()
                        .zip(rows.row(row).iter())
                        .for_each(|(o, v)| *o = *v);
                    row += 1;
                }
            }
        }
        Ok(VideoClip { pixels: px })
    }

    pub fn decode(&self, latent: &VideoLatent) -> Result<VideoClip> {
        let mut clip = self.decode_unclamped(latent)?;
        clip.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(clip)
    }

    /// Encodes a single `(H, W, 3)` frame to an `(H', W', C)` latent frame.
    pub fn encode_frame(&self, frame: &ndarray::Array3<f64>) -> Result<ndarray::Array3<f64>> {
        let clip = VideoClip {
            pixels: frame.clone().insert_axis(ndarray::Axis(0)),
        };
        Ok(self.encode(&clip)?.frame(0))
    }
}
