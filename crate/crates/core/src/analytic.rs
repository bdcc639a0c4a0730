//! Closed-form parametrizations with known pullback metrics.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::DifferentiableMap;

/// `(ξ, η) ↦ (ξ cos ξ, η, ξ sin ξ)`, whose pullback metric is `diag(1 + ξ², 1)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SwissRollMap;

impl SwissRollMap {
    pub fn point(xi: f64, eta: f64) -> [f64; 3] {
        [xi * xi.cos(), eta, xi * xi.sin()]
    }

    fn jac(xi: f64) -> [[f64; 2]; 3] {
        let (s, c) = xi.sin_cos();
        [[c - xi * s, 0.0], [0.0, 1.0], [s + xi * c, 0.0]]
    }
}

fn check(z: &[f64], m: usize) -> Result<()> {
    if z.len() != m {
        return Err(Error::shape(format!("expected {m} latent coordinates, got {}", z.len())));
    }
    Ok(())
}

impl DifferentiableMap for SwissRollMap {
    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        3
    }

    fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        check(z, 2)?;
        Ok(Self::point(z[0], z[1]).to_vec())
    }

    fn jvp(&self, z: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check(z, 2)?;
        check(v, 2)?;
        let j = Self::jac(z[0]);
        let jv = j.iter().map(|r| r[0] * v[0] + r[1] * v[1]).collect();
        Ok((self.eval(z)?, jv))
    }

    fn vjp(&self, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check(z, 2)?;
        check(u, 3)?;
        let j = Self::jac(z[0]);
        let jtu = (0..2).map(|k| (0..3).map(|i| j[i][k] * u[i]).sum()).collect();
        Ok((self.eval(z)?, jtu))
    }
}

/// Inverse stereographic projection of the plane onto the unit sphere.
///
/// Conformal with factor `c(z) = 4 / (1 + ‖z‖²)²` and constant scalar
/// curvature 2.
#[derive(Clone, Copy, Debug, Default)]
pub struct StereographicSphere;

impl StereographicSphere {
    pub fn conformal_factor(z: &[f64]) -> f64 {
        let r2: f64 = z.iter().map(|v| v * v).sum();
        4.0 / ((1.0 + r2) * (1.0 + r2))
    }

    fn jac(z: &[f64]) -> Matrix {
        let r2 = z[0] * z[0] + z[1] * z[1];
        let d = 1.0 + r2;
        let mut j = Matrix::zeros(3, 2);
        for i in 0..2 {
            for k in 0..2 {
                let delta = if i == k { 2.0 / d } else { 0.0 };
                j.set(i, k, delta - 4.0 * z[i] * z[k] / (d * d));
            }
        }
        for k in 0..2 {
            j.set(2, k, 4.0 * z[k] / (d * d));
        }
        j
    }
}

impl DifferentiableMap for StereographicSphere {
    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        3
    }

    fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        check(z, 2)?;
        let r2 = z[0] * z[0] + z[1] * z[1];
        let d = 1.0 + r2;
        Ok(vec![2.0 * z[0] / d, 2.0 * z[1] / d, (r2 - 1.0) / d])
    }

    fn jvp(&self, z: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check(z, 2)?;
        check(v, 2)?;
        Ok((self.eval(z)?, Self::jac(z).matvec(v)?))
    }

    fn vjp(&self, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check(z, 2)?;
        check(u, 3)?;
        Ok((self.eval(z)?, Self::jac(z).transpose().matvec(u)?))
    }
}
