//! Synthetic multi-band PolSAR scenes.
//!
//! The scene is a labeled Voronoi patchwork. Every pixel of a region draws
//! `L` independent zero-mean circular complex Gaussian scattering vectors
//! whose covariance is the base matrix of (band, class); the pixel's
//! coherency matrix is their sample covariance, so it is complex-Wishart
//! distributed with the base matrix as its mean.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::coherency::CoherencyMatrix;
use super::cube::{PolSarCube, FEATURES};
use crate::error::{Error, Result};

/// Base coherency matrix per `[band][class]` (class index 0 is label 1).
pub type SignatureTable = Vec<Vec<CoherencyMatrix>>;

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Number of looks `L` averaged into each pixel.
    pub looks: usize,
    /// Voronoi sites; `None` picks four per class.
    pub sites: Option<usize>,
    /// `None` uses [`default_signatures`].
    pub signatures: Option<SignatureTable>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            bands: 2,
            height: 200,
            width: 200,
            seed: 7,
            looks: 4,
            sites: None,
            signatures: None,
        }
    }
}

fn signature(band: usize, class: usize, classes: usize) -> CoherencyMatrix {
    let theta = 2.0 * PI * class as f64 / classes as f64 + 1.1 * band as f64;
    let t11 = 0.55 + 0.35 * theta.cos();
    let t22 = 0.45 + 0.30 * theta.sin();
    let t33 = 0.25 + 0.10 * (2.0 * theta + band as f64).cos();
    let rho12 = Complex64::from_polar(0.3, theta + band as f64);
    let rho13 = Complex64::new(0.15 * theta.cos(), 0.0);
    let rho23 = Complex64::new(0.0, 0.15 * theta.sin());
    CoherencyMatrix::from_upper(
        [t11, t22, t33],
        rho12 * (t11 * t22).sqrt(),
        rho13 * (t11 * t33).sqrt(),
        rho23 * (t22 * t33).sqrt(),
    )
}

/// Default base matrices. Every (band, class) matrix is distinct except:
/// in band 1, classes 3 and 4 share a matrix; in band 2, classes 1 and 2
/// share one (when those classes exist). Each of those pairs can therefore
/// only be told apart by looking at the other band.
pub fn default_signatures(bands: usize, classes: usize) -> SignatureTable {
    (0..bands)
        .map(|b| {
            let mut row: Vec<CoherencyMatrix> =
                (0..classes).map(|c| signature(b, c, classes)).collect();
            if b == 0 && classes >= 4 {
                row[3] = row[2];
            }
            if b == 1 && classes >= 2 {
                row[1] = row[0];
            }
            row
        })
        .collect()
}

/// Generated cube plus the class of every pixel's region, including the
/// boundary pixels left unlabeled in the cube.
pub struct SyntheticScene {
    pub cube: PolSarCube,
    pub region_class: Vec<u16>,
}

pub fn generate_synthetic_scene(config: &SceneConfig) -> Result<PolSarCube> {
    generate_with_regions(config).map(|s| s.cube)
}

pub fn generate_with_regions(config: &SceneConfig) -> Result<SyntheticScene> {
    let SceneConfig {
        classes,
        bands,
        height,
        width,
        seed,
        looks,
        ..
    } = *config;
    if classes < 2 {
        return Err(Error::InvalidValue("need at least 2 classes".into()));
    }
    if bands < 2 {
        return Err(Error::InvalidValue("need at least 2 bands".into()));
    }
    if classes > u16::MAX as usize {
        return Err(Error::InvalidValue("too many classes".into()));
    }
    if height == 0 || width == 0 || looks == 0 {
        return Err(Error::InvalidValue("size and looks must be positive".into()));
    }
    let table = match &config.signatures {
        Some(t) => t.clone(),
        None => default_signatures(bands, classes),
    };
    if table.len() != bands || table.iter().any(|r| r.len() != classes) {
        return Err(Error::DimensionMismatch(format!(
            "signature table must be {} bands x {} classes",
            bands, classes
        )));
    }
    let factors = table
        .iter()
        .map(|row| row.iter().map(|t| t.cholesky()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sites = config.sites.unwrap_or(4 * classes).max(classes);
    let sites: Vec<(f64, f64, u16)> = (0..n_sites)
        .map(|i| {
            let y = rng.gen_range(0.0..height as f64);
            let x = rng.gen_range(0.0..width as f64);
            (y, x, (i % classes) as u16 + 1)
        })
        .collect();

    let plane = height * width;
    let mut labels = vec![0u16; plane];
    let mut region_class = vec![0u16; plane];
    for row in 0..height {
        for col in 0..width {
            let (py, px) = (row as f64 + 0.5, col as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u16);
            let mut second = (f64::INFINITY, 0u16);
            for &(sy, sx, class) in &sites {
                let d = ((py - sy).powi(2) + (px - sx).powi(2)).sqrt();
                if d < best.0 {
                    second = best;
                    best = (d, class);
                } else if d < second.0 {
                    second = (d, class);
                }
            }
            let i = row * width + col;
            region_class[i] = best.1;
            // thin unlabeled seams between regions of different classes
            let seam = second.1 != best.1 && second.0 - best.0 < 1.0;
            labels[i] = if seam { 0 } else { best.1 };
        }
    }

    let zero = Complex64::new(0.0, 0.0);
    let mut band_data = Vec::with_capacity(bands);
    for factor_row in &factors {
        let mut data = vec![0f32; FEATURES * plane];
        for (i, &class) in region_class.iter().enumerate() {
            let l = &factor_row[class as usize - 1];
            let mut acc = [[zero; 3]; 3];
            for _ in 0..looks {
                let z: [Complex64; 3] = std::array::from_fn(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(re, im) * FRAC_1_SQRT_2
                });
                let k: [Complex64; 3] = std::array::from_fn(|r| {
                    (0..3).fold(zero, |s, c| s + l[r][c] * z[c])
                });
                for r in 0..3 {
                    for c in r..3 {
                        acc[r][c] += k[r] * k[c].conj();
                    }
                }
            }
            let inv = 1.0 / looks as f64;
            let t = CoherencyMatrix::from_upper(
                [acc[0][0].re * inv, acc[1][1].re * inv, acc[2][2].re * inv],
                acc[0][1] * inv,
                acc[0][2] * inv,
                acc[1][2] * inv,
            );
            let v = t.to_vector()?;
            for (ch, value) in v.iter().enumerate() {
                data[ch * plane + i] = *value as f32;
            }
        }
        band_data.push(data);
    }

    Ok(SyntheticScene {
        cube: PolSarCube::new(height, width, classes, band_data, labels)?,
        region_class,
    })
}
