//! Attention-head taxonomy: per-frame-block attention density, the
//! spatial/temporal classification rule, majority voting across probe clips,
//! and the persisted head-partition manifest.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FfpError, Result};

/// Default density threshold.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Default number of probe clips voted over.
pub const DEFAULT_PROBE_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Spatial,
    Temporal,
}

/// `F' × F'` matrix of block densities `ρ_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDensityGrid {
    pub rho: Array2<f64>,
    pub epsilon: f64,
    /// `(F', H'·W')`.
    pub dims: (usize, usize),
}

/// Fraction of entries above `epsilon` in each `HW × HW` frame block of an
/// `N × N` attention map, `N = F'·HW`.
pub fn compute_density_grid(
    attention_map: ArrayView2<'_, f64>,
    dims: (usize, usize),
    epsilon: f64,
) -> Result<AttentionDensityGrid> {
    let (frames, hw) = dims;
    let n = frames * hw;
    if frames == 0 || hw == 0 {
        return invalid(format!("density grid dims must be positive, got {dims:?}"));
    }
    if attention_map.dim() != (n, n) {
        return invalid(format!(
            "attention map {:?} is not factorable into a {frames}x{frames} grid of {hw}x{hw} blocks",
            attention_map.dim()
        ));
    }
    let mut counts = Array2::<usize>::zeros((frames, frames));
    for (r, row) in attention_map.rows().into_iter().enumerate() {
        let i = r / hw;
        for (c, &a) in row.iter().enumerate() {
            if a > epsilon {
                counts[[i, c / hw]] += 1;
            }
        }
    }
    let denom = (hw * hw) as f64;
    Ok(AttentionDensityGrid {
        rho: counts.mapv(|k| k as f64 / denom),
        epsilon,
        dims,
    })
}

/// Temporal iff the densest cross-frame block is strictly denser than the
/// sparsest within-frame block. A single-frame grid has no cross-frame
/// evidence and is Spatial.
pub fn classify_head(grid: &AttentionDensityGrid) -> HeadKind {
    let f = grid.dims.0;
    if f < 2 {
        return HeadKind::Spatial;
    }
    let mut min_diag = f64::INFINITY;
    let mut max_off = f64::NEG_INFINITY;
    for i in 0..f {
        for j in 0..f {
            let r = grid.rho[[i, j]];
            if i == j {
                min_diag = min_diag.min(r);
            } else {
                max_off = max_off.max(r);
            }
        }
    }
    if max_off > min_diag {
        HeadKind::Temporal
    } else {
        HeadKind::Spatial
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VoteTally {
    pub spatial: usize,
    pub temporal: usize,
}

impl VoteTally {
    pub fn total(&self) -> usize {
        self.spatial + self.temporal
    }

    /// Majority label; ties go to Spatial.
    pub fn winner(&self) -> HeadKind {
        if self.temporal > self.spatial {
            HeadKind::Temporal
        } else {
            HeadKind::Spatial
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadAssignment {
    pub kind: HeadKind,
    pub votes: VoteTally,
}

/// Static assignment of every `(layer, head)` pair to a class, with the
/// voting provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadPartition {
    pub format_version: u32,
    /// Hex SHA-256 of the checkpoint the partition was measured on.
    pub model_hash: String,
    pub epsilon: f64,
    pub samples: usize,
    /// Set when the probe grid had a single latent frame, so every head fell
    /// back to Spatial for lack of cross-frame blocks.
    pub single_frame_fallback: bool,
    pub layers: Vec<Vec<HeadAssignment>>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl HeadPartition {
    /// Every head of every layer assigned `kind`, with unanimous provenance.
    pub fn uniform(layers: usize, heads: usize, kind: HeadKind) -> Self {
        let votes = match kind {
            HeadKind::Spatial => VoteTally {
                spatial: 1,
                temporal: 0,
            },
            HeadKind::Temporal => VoteTally {
                spatial: 0,
                temporal: 1,
            },
        };
        Self {
            format_version: MANIFEST_VERSION,
            model_hash: String::new(),
            epsilon: DEFAULT_EPSILON,
            samples: 1,
            single_frame_fallback: false,
            layers: vec![vec![HeadAssignment { kind, votes }; heads]; layers],
        }
    }

    pub fn from_kinds(kinds: Vec<Vec<HeadKind>>) -> Self {
        let layers = kinds
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|kind| HeadAssignment {
                        kind,
                        votes: match kind {
                            HeadKind::Spatial => VoteTally {
                                spatial: 1,
                                temporal: 0,
                            },
                            HeadKind::Temporal => VoteTally {
                                spatial: 0,
                                temporal: 1,
                            },
                        },
                    })
                    .collect()
            })
            .collect();
        Self {
            format_version: MANIFEST_VERSION,
            model_hash: String::new(),
            epsilon: DEFAULT_EPSILON,
            samples: 1,
            single_frame_fallback: false,
            layers,
        }
    }

    pub fn kind(&self, layer: usize, head: usize) -> Option<HeadKind> {
        self.layers.get(layer)?.get(head).map(|a| a.kind)
    }

    /// Errors unless the partition has exactly `layers × heads` entries.
    pub fn check_covers(&self, layers: usize, heads: usize) -> Result<()> {
        if self.layers.len() < layers {
            return Err(FfpError::Configuration(format!(
                "head partition has {} layers, model needs {layers}",
                self.layers.len()
            )));
        }
        for (l, row) in self.layers.iter().enumerate().take(layers) {
            if row.len() < heads {
                return Err(FfpError::Configuration(format!(
                    "head partition layer {l} has {} heads, model needs {heads}",
                    row.len()
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self, kind: HeadKind) -> usize {
        self.layers
            .iter()
            .flatten()
            .filter(|a| a.kind == kind)
            .count()
    }

    pub fn to_manifest_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition is always serialisable")
    }

    pub fn from_manifest_str(text: &str) -> Result<Self> {
        let p: HeadPartition = serde_json::from_str(text)
            .map_err(|e| FfpError::Format(format!("head manifest: {e}")))?;
        if p.format_version != MANIFEST_VERSION {
            return Err(FfpError::Format(format!(
                "head manifest version {} unsupported (expected {MANIFEST_VERSION})",
                p.format_version
            )));
        }
        for (l, row) in p.layers.iter().enumerate() {
            for (h, a) in row.iter().enumerate() {
                if a.votes.total() != p.samples {
                    return Err(FfpError::Format(format!(
                        "layer {l} head {h}: votes sum to {} but manifest records {} samples",
                        a.votes.total(),
                        p.samples
                    )));
                }
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_manifest_str(&fs::read_to_string(path)?)
    }
}

/// Majority vote over per-sample classifications.
///
/// `per_sample[s][layer][head]` is the label sample `s` produced.
pub fn vote_partition(per_sample: &[Vec<Vec<HeadKind>>]) -> Result<HeadPartition> {
    let Some(first) = per_sample.first() else {
        return invalid("vote_partition needs at least one sample");
    };
    let shape: Vec<usize> = first.iter().map(Vec::len).collect();
    let mut tallies: Vec<Vec<VoteTally>> = shape
        .iter()
        .map(|&h| vec![VoteTally::default(); h])
        .collect();
    for (s, sample) in per_sample.iter().enumerate() {
        let this: Vec<usize> = sample.iter().map(Vec::len).collect();
        if this != shape {
            return invalid(format!(
                "sample {s} has layer/head shape {this:?}, expected {shape:?}"
            ));
        }
        for (l, row) in sample.iter().enumerate() {
            for (h, kind) in row.iter().enumerate() {
                match kind {
                    HeadKind::Spatial => tallies[l][h].spatial += 1,
                    HeadKind::Temporal => tallies[l][h].temporal += 1,
                }
            }
        }
    }
    let layers = tallies
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|votes| HeadAssignment {
                    kind: votes.winner(),
                    votes,
                })
                .collect()
        })
        .collect();
    Ok(HeadPartition {
        format_version: MANIFEST_VERSION,
        model_hash: String::new(),
        epsilon: DEFAULT_EPSILON,
        samples: per_sample.len(),
        single_frame_fallback: false,
        layers,
    })
}
