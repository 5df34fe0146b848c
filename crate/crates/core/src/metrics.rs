//! Confusion matrices, accuracy metrics and map rendering.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::polsar::LabelRaster;

/// Rows are ground truth, columns predictions; class `c` sits at index `c-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::DimensionMismatch(format!(
                "{} counts for {} classes",
                counts.len(),
                classes
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Records one pixel; labels are `1..=C`.
    pub fn add(&mut self, truth: u16, pred: u16) -> Result<()> {
        let c = self.classes as u16;
        if truth == 0 || truth > c {
            return Err(Error::InvalidValue(format!("truth class {} outside 1..={}", truth, c)));
        }
        if pred == 0 || pred > c {
            return Err(Error::InvalidValue(format!("predicted class {} outside 1..={}", pred, c)));
        }
        self.counts[(truth as usize - 1) * self.classes + pred as usize - 1] += 1;
        Ok(())
    }

    /// Adds every pixel whose truth is labeled.
    pub fn accumulate(&mut self, truth: &LabelRaster, pred: &LabelRaster) -> Result<()> {
        if (truth.height, truth.width) != (pred.height, pred.width) {
            return Err(Error::DimensionMismatch(format!(
                "truth is {}x{}, prediction is {}x{}",
                truth.height, truth.width, pred.height, pred.width
            )));
        }
        let mut delta = Self::new(self.classes);
        for (&t, &p) in truth.labels.iter().zip(&pred.labels) {
            if t != 0 {
                delta.add(t, p)?;
            }
        }
        self.merge(&delta)
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch("class counts differ".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::NoLabeledPixels);
        }
        let c = self.classes;
        let n = total as f64;
        let row = |i: usize| (0..c).map(|j| self.get(i, j)).sum::<u64>() as f64;
        let col = |j: usize| (0..c).map(|i| self.get(i, j)).sum::<u64>() as f64;
        let trace: u64 = (0..c).map(|i| self.get(i, i)).sum();
        let oa = trace as f64 / n;
        let per_class: Vec<f64> = (0..c)
            .map(|i| {
                let r = row(i);
                if r > 0.0 {
                    self.get(i, i) as f64 / r
                } else {
                    f64::NAN
                }
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
        let aa = defined.iter().sum::<f64>() / defined.len() as f64;
        let pe = (0..c).map(|i| row(i) * col(i)).sum::<f64>() / (n * n);
        let kappa = if pe == 1.0 { 1.0 } else { (oa - pe) / (1.0 - pe) };
        Ok(Metrics {
            oa,
            aa,
            kappa,
            per_class,
            total,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// `NaN` for classes absent from the ground truth.
    pub per_class: Vec<f64>,
    pub total: u64,
}

impl Metrics {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, a) in self.per_class.iter().enumerate() {
            if a.is_nan() {
                let _ = writeln!(s, "class_{}=nan", i + 1);
            } else {
                let _ = writeln!(s, "class_{}={:.4}", i + 1, a);
            }
        }
        let _ = writeln!(s, "oa={:.4}", self.oa);
        let _ = writeln!(s, "aa={:.4}", self.aa);
        let _ = writeln!(s, "kappa={:.4}", self.kappa);
        let _ = writeln!(s, "pixels={}", self.total);
        s
    }

    /// Mean of several runs; per-class entries average over runs where the
    /// class is defined.
    pub fn mean(runs: &[Metrics]) -> Option<Metrics> {
        let first = runs.first()?;
        let n = runs.len() as f64;
        let per_class = (0..first.per_class.len())
            .map(|i| {
                let v: Vec<f64> = runs.iter().map(|r| r.per_class[i]).filter(|v| !v.is_nan()).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            })
            .collect();
        Some(Metrics {
            oa: runs.iter().map(|r| r.oa).sum::<f64>() / n,
            aa: runs.iter().map(|r| r.aa).sum::<f64>() / n,
            kappa: runs.iter().map(|r| r.kappa).sum::<f64>() / n,
            per_class,
            total: runs.iter().map(|r| r.total).sum(),
        })
    }
}

/// Colors for unlabeled cells and classes `1..=C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    pub background: [u8; 3],
    pub classes: Vec<[u8; 3]>,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            background: [0, 0, 0],
            classes: vec![
                [230, 25, 75],
                [60, 180, 75],
                [255, 225, 25],
                [0, 130, 200],
                [245, 130, 48],
                [145, 30, 180],
                [70, 240, 240],
                [240, 50, 230],
                [210, 245, 60],
                [250, 190, 212],
                [0, 128, 128],
                [220, 190, 255],
                [170, 110, 40],
                [255, 250, 200],
                [128, 0, 0],
                [170, 255, 195],
            ],
        }
    }
}

/// Binary PPM (P6), one pixel per raster cell.
pub fn render_map(raster: &LabelRaster, palette: &Palette) -> Result<Vec<u8>> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.reserve(raster.labels.len() * 3);
    for &l in &raster.labels {
        let rgb = if l == 0 {
            palette.background
        } else {
            *palette
                .classes
                .get(l as usize - 1)
                .ok_or_else(|| Error::InvalidValue(format!("no palette color for class {}", l)))?
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}
