//! Small dense linear algebra.
//!
//! Everything here operates on matrices of at most a few tens of rows (latent
//! dimensions, Jacobians of small decoders), so the routines favour robustness
//! over asymptotic speed: symmetric eigenvalues come from cyclic Jacobi
//! rotations and singular values are taken as square roots of Gram-matrix
//! eigenvalues. The Gram route squares the condition number of the problem; at
//! the sizes and conditionings met in practice that still leaves ample
//! precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Off-diagonal Frobenius mass (relative to the full norm) at which Jacobi stops.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative asymmetry tolerated by [`sym_eigvals`].
const SYMMETRY_TOL: f64 = 1e-9;
/// Singular values below this are treated as zero by [`condition_number`].
pub const SIGMA_MIN_CUTOFF: f64 = 1e-300;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting wrong lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let c = cols.len();
        let r = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|col| col.len() != r) {
            return Err(Error::shape("columns of unequal length"));
        }
        let mut data = vec![0.0; r * c];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * c + j] = v;
            }
        }
        Matrix::new(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "{}x{} matrix applied to vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(self.data.chunks_exact(self.cols.max(1)).take(self.rows).map(|row| dot(row, x)).collect())
    }

    /// `AᵀA`, always symmetric.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for row in self.data.chunks_exact(n.max(1)).take(self.rows) {
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in i..n {
                    g.data[i * n + j] += ri * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Eigen- or singular values in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    fn from_unsorted(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        Spectrum(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.first().copied().unwrap_or(f64::NAN)
    }

    pub fn min(&self) -> f64 {
        self.0.last().copied().unwrap_or(f64::NAN)
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn trace(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::shape(format!("trace of non-square {}x{} matrix", a.rows, a.cols)));
    }
    Ok((0..a.rows).map(|i| a.get(i, i)).sum())
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "eigenvalues of non-square {}x{} matrix",
            a.rows, a.cols
        )));
    }
    let scale = a.max_abs();
    for i in 0..a.rows {
        for j in 0..i {
            let d = (a.get(i, j) - a.get(j, i)).abs();
            if d > SYMMETRY_TOL * scale {
                return Err(Error::shape(format!(
                    "matrix not symmetric: |a[{i},{j}] - a[{j},{i}]| = {d:e}"
                )));
            }
        }
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix, descending.
pub fn sym_eigvals(a: &Matrix) -> Result<Spectrum> {
    check_symmetric(a)?;
    let n = a.rows;
    match n {
        0 => Ok(Spectrum(Vec::new())),
        1 => Ok(Spectrum(vec![a.get(0, 0)])),
        2 => {
            let (p, q, r) = (a.get(0, 0), 0.5 * (a.get(0, 1) + a.get(1, 0)), a.get(1, 1));
            let mean = 0.5 * (p + r);
            let rad = (0.5 * (p - r)).hypot(q);
            Ok(Spectrum(vec![mean + rad, mean - rad]))
        }
        _ => jacobi_eigvals(a),
    }
}

fn jacobi_eigvals(a: &Matrix) -> Result<Spectrum> {
    let n = a.rows;
    // symmetrize so rotations act on an exactly symmetric array
    let mut m = a.clone();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let total = m.frobenius_norm();
    if total == 0.0 {
        return Ok(Spectrum(vec![0.0; n]));
    }
    let off_mass = |m: &Matrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.get(i, j) * m.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_mass(&m) <= JACOBI_TOL * total {
            return Ok(Spectrum::from_unsorted((0..n).map(|i| m.get(i, i)).collect()));
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Jᵀ A J with J the (p, q) plane rotation
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    Err(Error::Numerical(format!(
        "Jacobi eigenvalue iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps"
    )))
}

/// Singular values, descending; `min(rows, cols)` of them.
pub fn singular_values(a: &Matrix) -> Result<Spectrum> {
    let gram = if a.rows >= a.cols { a.gram() } else { a.transpose().gram() };
    let eig = sym_eigvals(&gram)?;
    Ok(Spectrum(eig.0.into_iter().map(|l| l.max(0.0).sqrt()).collect()))
}

/// L² condition number `σ_max / σ_min`; `+∞` when `σ_min` underflows the cutoff.
pub fn condition_number(a: &Matrix) -> Result<f64> {
    if a.data.iter().all(|&v| v == 0.0) {
        return Err(Error::usage("condition number of a zero matrix"));
    }
    let sv = singular_values(a)?;
    let (hi, lo) = (sv.max(), sv.min());
    if lo < SIGMA_MIN_CUTOFF {
        return Ok(f64::INFINITY);
    }
    Ok(hi / lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let a = random_matrix(rng, n, n);
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                s.set(i, j, a.get(i, j) + a.get(j, i));
            }
        }
        s
    }

    /// det(A) by Gaussian elimination with partial pivoting.
    fn det(mut a: Matrix) -> f64 {
        let n = a.rows();
        let mut d = 1.0;
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs()))
                .unwrap();
            if a.get(piv, col) == 0.0 {
                return 0.0;
            }
            if piv != col {
                for k in 0..n {
                    let t = a.get(col, k);
                    a.set(col, k, a.get(piv, k));
                    a.set(piv, k, t);
                }
                d = -d;
            }
            let p = a.get(col, col);
            d *= p;
            for i in col + 1..n {
                let f = a.get(i, col) / p;
                for k in col..n {
                    let v = a.get(i, k) - f * a.get(col, k);
                    a.set(i, k, v);
                }
            }
        }
        d
    }

    /// Eigenvalues as sign changes of det(A - tI) on a fine grid, refined by
    /// bisection. Independent of the Jacobi rotations under test.
    fn charpoly_eigs(a: &Matrix) -> Vec<f64> {
        let n = a.rows();
        let bound = a.frobenius_norm() + 1.0;
        let p = |t: f64| {
            let mut m = a.clone();
            for i in 0..n {
                m.set(i, i, m.get(i, i) - t);
            }
            det(m)
        };
        let steps = 40_000;
        let h = 2.0 * bound / steps as f64;
        let mut roots = Vec::new();
        let mut t0 = -bound;
        let mut p0 = p(t0);
        for s in 1..=steps {
            let t1 = -bound + s as f64 * h;
            let p1 = p(t1);
            if p0 == 0.0 || p0.signum() != p1.signum() {
                let (mut lo, mut hi, mut plo) = (t0, t1, p0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let pm = p(mid);
                    if pm.signum() == plo.signum() && pm != 0.0 {
                        lo = mid;
                        plo = pm;
                    } else {
                        hi = mid;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
            t0 = t1;
            p0 = p1;
        }
        roots.sort_by(|a, b| b.total_cmp(a));
        roots
    }

    /// One-sided Jacobi (Hestenes) SVD: orthogonalize columns by plane
    /// rotations; singular values are the final column norms.
    fn hestenes_singular_values(a: &Matrix) -> Vec<f64> {
        let mut cols: Vec<Vec<f64>> = (0..a.cols()).map(|j| a.column(j)).collect();
        for _ in 0..60 {
            for p in 0..cols.len() {
                for q in p + 1..cols.len() {
                    let alpha = norm_sq(&cols[p]);
                    let beta = norm_sq(&cols[q]);
                    let gamma = dot(&cols[p], &cols[q]);
                    if gamma.abs() < 1e-300 {
                        continue;
                    }
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..cols[p].len() {
                        let (x, y) = (cols[p][i], cols[q][i]);
                        cols[p][i] = c * x - s * y;
                        cols[q][i] = s * x + c * y;
                    }
                }
            }
        }
        let mut sv: Vec<f64> = cols.iter().map(|c| norm_sq(c).sqrt()).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    #[test]
    fn identity_eigenvalues() {
        assert_eq!(sym_eigvals(&Matrix::identity(2)).unwrap().values(), &[1.0, 1.0]);
    }

    #[test]
    fn swiss_roll_metric_eigenvalues() {
        let xi: f64 = 1.0;
        let r = Matrix::from_diag(&[1.0 + xi * xi, 1.0]);
        assert_eq!(sym_eigvals(&r).unwrap().values(), &[2.0, 1.0]);
        assert_eq!(trace(&r).unwrap(), 3.0);
    }

    #[test]
    fn jacobi_matches_characteristic_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = random_symmetric(&mut rng, 5);
            let got = sym_eigvals(&a).unwrap();
            let want = charpoly_eigs(&a);
            assert_eq!(want.len(), 5);
            for (g, w) in got.values().iter().zip(&want) {
                assert!((g - w).abs() < 1e-8, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(sym_eigvals(&Matrix::zeros(2, 3)), Err(Error::Shape(_))));
        let asym = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eigvals(&asym), Err(Error::Shape(_))));
        assert!(matches!(trace(&Matrix::zeros(3, 2)), Err(Error::Shape(_))));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn condition_number_basics() {
        for m in 1..6 {
            assert_eq!(condition_number(&Matrix::identity(m)).unwrap(), 1.0);
        }
        assert_eq!(condition_number(&Matrix::from_diag(&[2.0, 1.0])).unwrap(), 2.0);
        assert!(condition_number(&Matrix::zeros(2, 2)).is_err());
        assert_eq!(condition_number(&Matrix::from_diag(&[1.0, 0.0])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn condition_number_matches_hestenes_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 3, 2);
            let sv = hestenes_singular_values(&a);
            let ours = singular_values(&a).unwrap();
            for (x, y) in ours.values().iter().zip(&sv) {
                assert!((x - y).abs() < 1e-8);
            }
            let k = condition_number(&a).unwrap();
            assert!((k - sv[0] / sv[1]).abs() < 1e-8 * k);
        }
    }

    #[test]
    fn trace_is_similarity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 3, 3);
            let b = random_matrix(&mut rng, 3, 3);
            let ab = trace(&a.matmul(&b).unwrap()).unwrap();
            let ba = trace(&b.matmul(&a).unwrap()).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
        assert_eq!(trace(&Matrix::identity(4)).unwrap(), 4.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix_strategy(r: usize, c: usize) -> impl Strategy<Value = Matrix> {
            proptest::collection::vec(-3.0..3.0f64, r * c)
                .prop_map(move |d| Matrix::new(r, c, d).unwrap())
        }

        proptest! {
            #[test]
            fn psd_spectrum_sums_to_trace(a in (2usize..8).prop_flat_map(|n| matrix_strategy(n + 1, n))) {
                let g = a.gram();
                let eig = sym_eigvals(&g).unwrap();
                let tr = trace(&g).unwrap();
                prop_assert!(eig.values().iter().all(|&l| l >= -1e-10 * tr.max(1.0)));
                prop_assert!((eig.sum() - tr).abs() <= 1e-9 * tr.max(1e-300));
                prop_assert!(eig.values().windows(2).all(|w| w[0] >= w[1]));
                // trace(R²) = Σλ²
                let tr2 = trace(&g.matmul(&g).unwrap()).unwrap();
                let sq: f64 = eig.values().iter().map(|l| l * l).sum();
                prop_assert!((tr2 - sq).abs() <= 1e-9 * tr2.max(1e-300));
            }

            #[test]
            fn gram_squares_condition(a in matrix_strategy(4, 3), alpha in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64]) {
                let k = condition_number(&a).unwrap();
                prop_assume!(k.is_finite() && k < 1e3);
                let kg = condition_number(&a.gram()).unwrap();
                prop_assert!((kg - k * k).abs() <= 1e-6 * k * k);
                let ks = condition_number(&a.scaled(alpha)).unwrap();
                prop_assert!((ks - k).abs() <= 1e-10 * k);
            }
        }
    }
}
