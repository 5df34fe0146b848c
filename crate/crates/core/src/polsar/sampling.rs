//! Training-anchor selection, patch extraction and dihedral augmentation.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chessboard::{ChessboardSplit, Part};
use super::cube::{PolSarCube, FEATURES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub row: usize,
    pub col: usize,
    /// Class label in `1..=C`.
    pub label: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    pub anchors: Vec<Anchor>,
    pub patch_size: usize,
    pub part: Part,
}

/// How many labeled pixels to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleBudget {
    PerClass(usize),
    Total(usize),
}

/// Uniform draw without replacement from the labeled pixels of `part`.
/// With a per-class budget, anchors are grouped by ascending class.
pub fn draw_training_samples(
    cube: &PolSarCube,
    split: &ChessboardSplit,
    part: Part,
    budget: SampleBudget,
    seed: u64,
) -> Result<SampleSet> {
    if (split.height, split.width) != (cube.height(), cube.width()) {
        return Err(Error::DimensionMismatch("split and cube sizes differ".into()));
    }
    let w = cube.width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labeled: Vec<usize> = split
        .pixels(part)
        .iter()
        .copied()
        .filter(|&i| cube.labels()[i] != 0)
        .collect();
    let to_anchor = |i: usize| Anchor {
        row: i / w,
        col: i % w,
        label: cube.labels()[i],
    };
    let anchors = match budget {
        SampleBudget::PerClass(n) => {
            let mut by_class: BTreeMap<u16, Vec<usize>> =
                (1..=cube.classes() as u16).map(|c| (c, Vec::new())).collect();
            for &i in &labeled {
                by_class.entry(cube.labels()[i]).or_default().push(i);
            }
            for (&class, pool) in &by_class {
                if pool.len() < n {
                    return Err(Error::InsufficientSamples {
                        class,
                        available: pool.len(),
                        requested: n,
                    });
                }
            }
            let mut out = Vec::with_capacity(n * by_class.len());
            for pool in by_class.values() {
                out.extend(index::sample(&mut rng, pool.len(), n).into_iter().map(|j| to_anchor(pool[j])));
            }
            out
        }
        SampleBudget::Total(n) => {
            if labeled.len() < n {
                return Err(Error::InsufficientSamples {
                    class: 0,
                    available: labeled.len(),
                    requested: n,
                });
            }
            index::sample(&mut rng, labeled.len(), n)
                .into_iter()
                .map(|j| to_anchor(labeled[j]))
                .collect()
        }
    };
    Ok(SampleSet {
        anchors,
        patch_size: DEFAULT_PATCH,
        part,
    })
}

/// Mirror (reflect, edge not repeated) an out-of-range coordinate.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Writes the `9 x n x n` patch centered on `(row, col)` into `out`.
pub fn extract_patch_into(cube: &PolSarCube, band: usize, row: usize, col: usize, n: usize, out: &mut [f64]) {
    let (h, w) = (cube.height(), cube.width());
    let half = (n / 2) as isize;
    let plane = h * w;
    let data = cube.band(band);
    for ch in 0..FEATURES {
        for dy in 0..n {
            let sy = reflect(row as isize + dy as isize - half, h);
            for dx in 0..n {
                let sx = reflect(col as isize + dx as isize - half, w);
                out[(ch * n + dy) * n + dx] = data[ch * plane + sy * w + sx] as f64;
            }
        }
    }
}

/// `9 x n x n` patch centered on `(row, col)`, mirror-padded at the borders.
pub fn extract_patch(cube: &PolSarCube, band: usize, row: usize, col: usize, n: usize) -> Result<Tensor> {
    if n.is_multiple_of(2) {
        return Err(Error::InvalidValue(format!("patch size {} must be odd", n)));
    }
    if band >= cube.band_count() || row >= cube.height() || col >= cube.width() {
        return Err(Error::InvalidValue(format!(
            "band {} pixel ({}, {}) outside the cube",
            band, row, col
        )));
    }
    let mut data = vec![0.0; FEATURES * n * n];
    extract_patch_into(cube, band, row, col, n, &mut data);
    Tensor::new(vec![FEATURES, n, n], data)
}

/// Spatial transforms of a square patch (a subset of the dihedral group).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Augment {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl Augment {
    pub const ALL: [Augment; 6] = [
        Augment::Identity,
        Augment::HFlip,
        Augment::VFlip,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
    ];

    pub fn inverse(self) -> Augment {
        match self {
            Augment::Rot90 => Augment::Rot270,
            Augment::Rot270 => Augment::Rot90,
            other => other,
        }
    }

    /// Source coordinate read for output `(y, x)` in an `n x n` patch.
    fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Augment::Identity => (y, x),
            Augment::HFlip => (y, m - x),
            Augment::VFlip => (m - y, x),
            // counter-clockwise quarter turn
            Augment::Rot90 => (x, m - y),
            Augment::Rot180 => (m - y, m - x),
            Augment::Rot270 => (m - x, y),
        }
    }

    /// Applies the transform to a `[C, n, n]` buffer.
    pub fn apply_slice(self, src: &[f64], channels: usize, n: usize, dst: &mut [f64]) {
        for c in 0..channels {
            let base = c * n * n;
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = self.source(y, x, n);
                    dst[base + y * n + x] = src[base + sy * n + sx];
                }
            }
        }
    }

    pub fn apply(self, patch: &Tensor) -> Result<Tensor> {
        let [c, h, w] = patch.shape[..] else {
            return Err(Error::InvalidValue("augment expects a [C, n, n] patch".into()));
        };
        if h != w {
            return Err(Error::InvalidValue("augment expects square patches".into()));
        }
        let mut out = vec![0.0; patch.numel()];
        self.apply_slice(&patch.data, c, h, &mut out);
        Tensor::new(patch.shape.clone(), out)
    }
}

/// Applies the same transform to the patch of every band.
pub fn augment(patches: &[Tensor], mode: Augment) -> Result<Vec<Tensor>> {
    patches.iter().map(|p| mode.apply(p)).collect()
}
