//! 3x3 polarimetric coherency matrices and their 9-element real encoding.

use num_complex::Complex64;

use crate::error::{Error, Result};

const HERMITIAN_TOL: f64 = 1e-10;

/// Hermitian 3x3 coherency matrix in linear power units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoherencyMatrix(pub [[Complex64; 3]; 3]);

impl CoherencyMatrix {
    pub fn zero() -> Self {
        Self([[Complex64::new(0.0, 0.0); 3]; 3])
    }

    pub fn diag(d: [f64; 3]) -> Self {
        let mut m = Self::zero();
        for (i, v) in d.into_iter().enumerate() {
            m.0[i][i] = Complex64::new(v, 0.0);
        }
        m
    }

    /// Builds the Hermitian matrix with the given diagonal and upper
    /// off-diagonal entries `T12, T13, T23`.
    pub fn from_upper(diag: [f64; 3], t12: Complex64, t13: Complex64, t23: Complex64) -> Self {
        let mut m = Self::diag(diag);
        m.0[0][1] = t12;
        m.0[1][0] = t12.conj();
        m.0[0][2] = t13;
        m.0[2][0] = t13.conj();
        m.0[1][2] = t23;
        m.0[2][1] = t23.conj();
        m
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.0[r][c]
    }

    /// Largest |T_ij - conj(T_ji)|.
    pub fn hermitian_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..3 {
            for c in 0..3 {
                worst = worst.max((self.0[r][c] - self.0[c][r].conj()).norm());
            }
        }
        worst
    }

    pub fn check_hermitian(&self) -> Result<()> {
        let scale = self.frobenius().max(1.0);
        let dev = self.hermitian_deviation();
        if dev > HERMITIAN_TOL * scale {
            return Err(Error::NotHermitian(dev));
        }
        Ok(())
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `[T11, T22, T33, Re T12, Re T13, Re T23, Im T12, Im T13, Im T23]`.
    pub fn to_vector(&self) -> Result<[f64; 9]> {
        self.check_hermitian()?;
        let t = &self.0;
        Ok([
            t[0][0].re,
            t[1][1].re,
            t[2][2].re,
            t[0][1].re,
            t[0][2].re,
            t[1][2].re,
            t[0][1].im,
            t[0][2].im,
            t[1][2].im,
        ])
    }

    /// Inverse of [`to_vector`](Self::to_vector).
    pub fn from_vector(v: &[f64; 9]) -> Self {
        Self::from_upper(
            [v[0], v[1], v[2]],
            Complex64::new(v[3], v[6]),
            Complex64::new(v[4], v[7]),
            Complex64::new(v[5], v[8]),
        )
    }

    /// Lower-triangular `L` with `L L^H = T`. Zero pivots (semidefinite
    /// directions) produce zero columns; negative pivots are rejected.
    pub fn cholesky(&self) -> Result<[[Complex64; 3]; 3]> {
        self.check_hermitian()?;
        let tol = 1e-12 * self.frobenius().max(1e-300);
        let zero = Complex64::new(0.0, 0.0);
        let mut l = [[zero; 3]; 3];
        for j in 0..3 {
            let mut d = self.0[j][j].re;
            for k in 0..j {
                d -= l[j][k].norm_sqr();
            }
            if d < -tol {
                return Err(Error::NotPsd(d));
            }
            if d <= tol {
                // Semidefinite direction: the rest of column j must vanish too.
                for i in j + 1..3 {
                    let mut s = self.0[i][j];
                    for k in 0..j {
                        s -= l[i][k] * l[j][k].conj();
                    }
                    if s.norm() > 1e-8 * self.frobenius().max(1.0) {
                        return Err(Error::NotPsd(d));
                    }
                }
                continue;
            }
            let ljj = d.sqrt();
            l[j][j] = Complex64::new(ljj, 0.0);
            for i in j + 1..3 {
                let mut s = self.0[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k].conj();
                }
                l[i][j] = s / ljj;
            }
        }
        Ok(l)
    }
}

/// Free-function form of [`CoherencyMatrix::to_vector`].
pub fn coherency_to_vector(t: &CoherencyMatrix) -> Result<[f64; 9]> {
    t.to_vector()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn diagonal_readout() {
        let v = coherency_to_vector(&CoherencyMatrix::diag([2.0, 1.0, 0.5])).unwrap();
        assert_eq!(v, [2.0, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn off_diagonal_positions() {
        let t = CoherencyMatrix::from_upper([0.0; 3], c(1.0, 2.0), c(0.0, 0.0), c(0.0, 0.0));
        let v = t.to_vector().unwrap();
        assert_eq!(v[3], 1.0);
        assert_eq!(v[6], 2.0);
        assert_eq!(CoherencyMatrix::from_vector(&v), t);
    }

    #[test]
    fn zero_matrix() {
        assert_eq!(CoherencyMatrix::zero().to_vector().unwrap(), [0.0; 9]);
    }

    #[test]
    fn rejects_non_hermitian() {
        let mut t = CoherencyMatrix::diag([1.0, 1.0, 1.0]);
        t.0[0][1] = c(0.5, 0.0);
        assert!(matches!(t.to_vector(), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn cholesky_reconstructs() {
        let t = CoherencyMatrix::from_upper([1.0, 0.8, 0.3], c(0.2, 0.1), c(0.05, -0.02), c(0.0, 0.07));
        let l = t.cholesky().unwrap();
        for r in 0..3 {
            for col in 0..3 {
                let mut s = c(0.0, 0.0);
                for k in 0..3 {
                    s += l[r][k] * l[col][k].conj();
                }
                assert!((s - t.0[r][col]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_semidefinite_and_indefinite() {
        // rank one: u u^H with u = (1, i, 0)
        let t = CoherencyMatrix::from_upper([1.0, 1.0, 0.0], c(0.0, -1.0), c(0.0, 0.0), c(0.0, 0.0));
        assert!(t.cholesky().is_ok());
        let bad = CoherencyMatrix::from_upper([1.0, 1.0, 1.0], c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0));
        assert!(matches!(bad.cholesky(), Err(Error::NotPsd(_))));
    }
}
