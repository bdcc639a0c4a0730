//! Post-training diagnostics of a decoder: pullback metric, conformal factor,
//! kNN-graph Laplacian, scalar curvature and condition numbers.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::StereographicSphere;
use crate::error::{Error, Result};
use crate::linalg::{condition_number, trace, Matrix};
use crate::net::DifferentiableMap;

pub const DEFAULT_K: usize = 10;

/// `R(z) = J(z)ᵀ J(z)` of the decoder at `z`.
pub fn pullback_metric(dec: &dyn DifferentiableMap, z: &[f64]) -> Result<Matrix> {
    Ok(dec.jacobian(z)?.gram())
}

/// `c(z) = Tr R(z) / m`.
pub fn conformal_factor(dec: &dyn DifferentiableMap, z: &[f64]) -> Result<f64> {
    let r = pullback_metric(dec, z)?;
    Ok(trace(&r)? / r.rows() as f64)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformalField {
    pub codes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// Min–max rescaled to `[0, 1]`; all zeros for a constant field.
    pub normalized: Vec<f64>,
}

impl ConformalField {
    pub fn new(codes: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        if codes.len() != values.len() {
            return Err(Error::shape(format!("{} codes but {} values", codes.len(), values.len())));
        }
        if codes.is_empty() {
            return Err(Error::usage("empty conformal field"));
        }
        if let Some(i) = values.iter().position(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Degenerate(format!(
                "conformal factor {} at code {i} is not positive",
                values[i]
            )));
        }
        let (lo, hi) = min_max(&values);
        let normalized = if hi > lo {
            values.iter().map(|c| (c - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; values.len()]
        };
        Ok(ConformalField { codes, values, normalized })
    }

    pub fn from_decoder(dec: &(dyn DifferentiableMap + Sync), codes: &[Vec<f64>]) -> Result<Self> {
        let values = codes
            .par_iter()
            .map(|z| conformal_factor(dec, z))
            .collect::<Result<Vec<f64>>>()?;
        ConformalField::new(codes.to_vec(), values)
    }

    pub fn dim(&self) -> usize {
        self.codes[0].len()
    }
}

/// Symmetrized kNN graph with Gaussian weights `exp(−d²/h²)`.
#[derive(Clone, Debug)]
pub struct LatentGraph {
    pub k: usize,
    pub bandwidth: f64,
    /// Neighbours of each node with their weights, sorted by index.
    adjacency: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Median distance to the k-th neighbour.
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Bandwidth::Auto);
        }
        match s.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(Bandwidth::Fixed(h)),
            _ => Err(Error::usage(format!("bandwidth must be 'auto' or a positive number, got {s:?}"))),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k` nearest neighbours of every node as `(squared distance, index)`,
/// ordered by distance then index.
fn knn(codes: &[Vec<f64>], k: usize) -> Vec<Vec<(f64, usize)>> {
    codes
        .par_iter()
        .enumerate()
        .map(|(i, zi)| {
            let mut cand: Vec<(f64, usize)> = codes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, zj)| (sq_dist(zi, zj), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
            cand.sort_by(cmp);
            cand
        })
        .collect()
}

pub fn build_graph(codes: &[Vec<f64>], k: usize, bandwidth: Bandwidth) -> Result<LatentGraph> {
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    if codes.len() < k + 1 {
        return Err(Error::usage(format!("need at least {} codes for k = {k}, got {}", k + 1, codes.len())));
    }
    let m = codes[0].len();
    if codes.iter().any(|z| z.len() != m) {
        return Err(Error::shape("codes of differing dimension"));
    }
    let nbrs = knn(codes, k);
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::usage(format!("bandwidth {h} is not positive"))),
        Bandwidth::Auto => {
            let kth: Vec<f64> = nbrs.iter().map(|l| l[k - 1].0.sqrt()).collect();
            let h = median(&kth).unwrap_or(0.0);
            if !(h > 0.0) {
                return Err(Error::Degenerate("median k-th neighbour distance is zero".into()));
            }
            h
        }
    };
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * k * codes.len());
    for (i, list) in nbrs.iter().enumerate() {
        for &(d2, j) in list {
            let w = (-d2 / (h * h)).exp();
            edges.push((i, j, w));
            edges.push((j, i, w));
        }
    }
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut adjacency = vec![Vec::new(); codes.len()];
    for (i, j, w) in edges {
        let row: &mut Vec<(usize, f64)> = &mut adjacency[i];
        match row.last_mut() {
            Some(last) if last.0 == j => last.1 = last.1.max(w),
            _ => row.push((j, w)),
        }
    }
    let degree = adjacency.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
    Ok(LatentGraph { k, bandwidth: h, adjacency, degree })
}

impl LatentGraph {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    /// `W[i][j]`, zero when not adjacent.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i]
            .binary_search_by(|e| e.0.cmp(&j))
            .map_or(0.0, |p| self.adjacency[i][p].1)
    }

    /// `(L x)_i = Σ_j w_ij (x_i − x_j)` with `L = D − W`.
    pub fn laplacian_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.len() {
            return Err(Error::shape(format!("vector of length {} on a {}-node graph", x.len(), self.len())));
        }
        Ok(self
            .adjacency
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().map(|&(j, w)| w * (x[i] - x[j])).sum())
            .collect())
    }

    pub fn laplacian_dense(&self) -> Matrix {
        let n = self.len();
        let mut l = Matrix::zeros(n, n);
        for (i, row) in self.adjacency.iter().enumerate() {
            l.set(i, i, self.degree[i]);
            for &(j, w) in row {
                l.set(i, j, -w);
            }
        }
        l
    }

    /// `xᵀ L x` as the edge sum `Σ_{i<j} w_ij (x_i − x_j)²`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, row) in self.adjacency.iter().enumerate() {
            for &(j, w) in row.iter().filter(|e| e.0 > i) {
                s += w * (x[i] - x[j]) * (x[i] - x[j]);
            }
        }
        s
    }
}

/// Nodes at least `margin` inside the axis-aligned bounding box of `codes`.
pub fn interior_mask(codes: &[Vec<f64>], margin: f64) -> Vec<bool> {
    let m = codes.first().map_or(0, Vec::len);
    let bounds: Vec<(f64, f64)> = (0..m)
        .map(|d| min_max(&codes.iter().map(|z| z[d]).collect::<Vec<_>>()))
        .collect();
    codes
        .iter()
        .map(|z| z.iter().zip(&bounds).all(|(&v, &(lo, hi))| v - lo >= margin && hi - v >= margin))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureField {
    /// `−(1/c)·L log c` with the plain graph Laplacian.
    pub raw: Vec<f64>,
    /// Same with `L` rescaled to approximate the Euclidean Laplacian.
    pub calibrated: Vec<f64>,
    /// `calibrated / max|calibrated|`; all zeros when the field is flat.
    pub normalized: Vec<f64>,
    pub interior: Vec<bool>,
    /// Factor `s` with `Δ ≈ s·L` on this graph.
    pub laplacian_scale: f64,
}

/// Scale `s` such that `s·L` reproduces `Δ‖z‖² = 2m` at the median interior
/// node (all nodes if none is interior).
pub fn laplacian_scale(codes: &[Vec<f64>], graph: &LatentGraph, interior: &[bool]) -> Result<f64> {
    let m = codes[0].len() as f64;
    let q: Vec<f64> = codes.iter().map(|z| z.iter().map(|v| v * v).sum()).collect();
    let lq = graph.laplacian_apply(&q)?;
    let inner: Vec<f64> = lq.iter().zip(interior).filter(|(_, &b)| b).map(|(v, _)| *v).collect();
    let med = median(if inner.is_empty() { &lq } else { &inner }).unwrap_or(0.0);
    if med == 0.0 || !med.is_finite() {
        return Err(Error::Degenerate("graph Laplacian vanishes on the quadratic probe".into()));
    }
    Ok(2.0 * m / med)
}

fn max_abs_normalize(v: &[f64]) -> Vec<f64> {
    let s = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Scalar curvature `S = −(1/c) Δ log c` of the metric `c·g` on a 2-D latent
/// space, with `Δ` realized on the graph.
pub fn scalar_curvature(field: &ConformalField, graph: &LatentGraph) -> Result<CurvatureField> {
    let m = field.dim();
    if m != 2 {
        return Err(Error::UnsupportedDimension(m));
    }
    if graph.len() != field.values.len() {
        return Err(Error::shape("graph and field sizes differ"));
    }
    let log_c: Vec<f64> = field.values.iter().map(|c| c.ln()).collect();
    let l_log_c = graph.laplacian_apply(&log_c)?;
    // the +0.0 folds −0 into 0 for flat fields
    let raw: Vec<f64> = l_log_c.iter().zip(&field.values).map(|(l, c)| -l / c + 0.0).collect();
    let interior = interior_mask(&field.codes, graph.bandwidth);
    let scale = laplacian_scale(&field.codes, graph, &interior)?;
    let calibrated: Vec<f64> = raw.iter().map(|s| s * scale + 0.0).collect();
    let normalized = max_abs_normalize(&calibrated);
    Ok(CurvatureField { raw, calibrated, normalized, interior, laplacian_scale: scale })
}

/// Codes of a `side × side` grid over `[−r, r]²` restricted to the disc of
/// radius `r`, with the stereographic-sphere conformal factor.
pub fn sphere_oracle(side: usize, radius: f64) -> Result<ConformalField> {
    if side < 2 {
        return Err(Error::usage("grid needs at least 2 points per side"));
    }
    let step = 2.0 * radius / (side - 1) as f64;
    let mut codes = Vec::new();
    for a in 0..side {
        for b in 0..side {
            let z = vec![-radius + a as f64 * step, -radius + b as f64 * step];
            if z[0] * z[0] + z[1] * z[1] <= radius * radius * (1.0 + 1e-12) {
                codes.push(z);
            }
        }
    }
    let values = codes.iter().map(|z| StereographicSphere::conformal_factor(z)).collect();
    ConformalField::new(codes, values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaPair {
    pub jac: f64,
    pub pbm: f64,
}

impl KappaPair {
    pub fn is_finite(&self) -> bool {
        self.jac.is_finite() && self.pbm.is_finite()
    }
}

/// Condition numbers of `J(z)` and `R(z)`; `+∞` for a vanishing Jacobian.
pub fn condition_numbers(dec: &dyn DifferentiableMap, z: &[f64]) -> Result<KappaPair> {
    let j = dec.jacobian(z)?;
    if j.frobenius_norm() == 0.0 {
        return Ok(KappaPair { jac: f64::INFINITY, pbm: f64::INFINITY });
    }
    let r = j.gram();
    Ok(KappaPair { jac: condition_number(&j)?, pbm: condition_number(&r)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(v: &[f64]) -> Option<MeanStd> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaSummary {
    pub kappa_jac: MeanStd,
    pub kappa_pbm: MeanStd,
    pub count: usize,
    /// Points dropped because a condition number was infinite.
    pub excluded: usize,
}

pub fn summarize_kappa(samples: &[KappaPair]) -> Result<KappaSummary> {
    if samples.is_empty() {
        return Err(Error::usage("no condition numbers to summarize"));
    }
    let finite: Vec<&KappaPair> = samples.iter().filter(|p| p.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Degenerate(format!("all {} condition numbers are infinite", samples.len())));
    }
    let jac: Vec<f64> = finite.iter().map(|p| p.jac).collect();
    let pbm: Vec<f64> = finite.iter().map(|p| p.pbm).collect();
    Ok(KappaSummary {
        kappa_jac: MeanStd::of(&jac).expect("nonempty"),
        kappa_pbm: MeanStd::of(&pbm).expect("nonempty"),
        count: finite.len(),
        excluded: samples.len() - finite.len(),
    })
}

/// Per-code diagnostics; curvature columns are absent unless `m = 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub field: ConformalField,
    pub curvature: Option<CurvatureField>,
    pub kappa: Vec<KappaPair>,
}

pub fn diagnose(
    dec: &(dyn DifferentiableMap + Sync),
    codes: &[Vec<f64>],
    k: usize,
    bandwidth: Bandwidth,
) -> Result<Diagnostics> {
    let field = ConformalField::from_decoder(dec, codes)?;
    let kappa = codes
        .par_iter()
        .map(|z| condition_numbers(dec, z))
        .collect::<Result<Vec<_>>>()?;
    let curvature = if field.dim() == 2 {
        let graph = build_graph(codes, k, bandwidth)?;
        Some(scalar_curvature(&field, &graph)?)
    } else {
        None
    };
    Ok(Diagnostics { field, curvature, kappa })
}

/// One parsed row of `diagnostics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub z: Vec<f64>,
    pub c: f64,
    pub c_normalized: f64,
    pub s_raw: Option<f64>,
    pub s_normalized: Option<f64>,
    pub s_calibrated: Option<f64>,
    pub interior: Option<bool>,
    pub kappa_jac: f64,
    pub kappa_pbm: f64,
}

impl Diagnostics {
    pub fn rows(&self) -> Vec<DiagnosticRow> {
        (0..self.field.values.len())
            .map(|i| DiagnosticRow {
                z: self.field.codes[i].clone(),
                c: self.field.values[i],
                c_normalized: self.field.normalized[i],
                s_raw: self.curvature.as_ref().map(|s| s.raw[i]),
                s_normalized: self.curvature.as_ref().map(|s| s.normalized[i]),
                s_calibrated: self.curvature.as_ref().map(|s| s.calibrated[i]),
                interior: self.curvature.as_ref().map(|s| s.interior[i]),
                kappa_jac: self.kappa[i].jac,
                kappa_pbm: self.kappa[i].pbm,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_diagnostics_csv(w, &self.rows())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

const CURV_COLS: [&str; 4] = ["S_raw", "S_normalized", "S_calibrated", "interior"];

pub fn write_diagnostics_csv<W: Write>(mut w: W, rows: &[DiagnosticRow]) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::usage("no diagnostic rows"));
    };
    let m = first.z.len();
    let curv = first.s_raw.is_some();
    let mut header: Vec<String> = (0..m).map(|d| format!("z{d}")).collect();
    header.extend(["c".into(), "c_normalized".into()]);
    if curv {
        header.extend(CURV_COLS.iter().map(|s| s.to_string()));
    }
    header.extend(["kappa_jac".into(), "kappa_pbm".into()]);
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut f: Vec<String> = r.z.iter().map(|v| v.to_string()).collect();
        f.push(r.c.to_string());
        f.push(r.c_normalized.to_string());
        if curv {
            f.push(r.s_raw.unwrap_or(f64::NAN).to_string());
            f.push(r.s_normalized.unwrap_or(f64::NAN).to_string());
            f.push(r.s_calibrated.unwrap_or(f64::NAN).to_string());
            f.push(u8::from(r.interior.unwrap_or(false)).to_string());
        }
        f.push(r.kappa_jac.to_string());
        f.push(r.kappa_pbm.to_string());
        writeln!(w, "{}", f.join(","))?;
    }
    Ok(())
}

pub fn read_diagnostics_csv<R: BufRead>(r: R) -> Result<Vec<DiagnosticRow>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let m = cols.iter().take_while(|c| c.starts_with('z')).count();
    let curv = cols.contains(&"S_raw");
    let mut expected: Vec<String> = (0..m).map(|d| format!("z{d}")).collect();
    expected.extend(["c".into(), "c_normalized".into()]);
    if curv {
        expected.extend(CURV_COLS.iter().map(|s| s.to_string()));
    }
    expected.extend(["kappa_jac".into(), "kappa_pbm".into()]);
    if m == 0 || cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Parse { line: 1, msg: format!("unexpected header {:?}", header.trim()) });
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        let lineno = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse { line: lineno, msg: format!("not a number: {s:?}") })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != expected.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, got {}", expected.len(), vals.len()),
            });
        }
        let mut it = vals.into_iter();
        let z: Vec<f64> = it.by_ref().take(m).collect();
        let c = it.next().unwrap();
        let c_normalized = it.next().unwrap();
        let (s_raw, s_normalized, s_calibrated, interior) = if curv {
            let a = it.next().unwrap();
            let b = it.next().unwrap();
            let cc = it.next().unwrap();
            let flag = it.next().unwrap();
            (Some(a), Some(b), Some(cc), Some(flag != 0.0))
        } else {
            (None, None, None, None)
        };
        let kappa_jac = it.next().unwrap();
        let kappa_pbm = it.next().unwrap();
        rows.push(DiagnosticRow { z, c, c_normalized, s_raw, s_normalized, s_calibrated, interior, kappa_jac, kappa_pbm });
    }
    Ok(rows)
}

pub fn load_diagnostics_csv(path: &Path) -> Result<Vec<DiagnosticRow>> {
    read_diagnostics_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Median of `|normalized S|` over interior nodes.
pub fn median_abs_interior(curv: &CurvatureField) -> Option<f64> {
    let v: Vec<f64> = curv
        .normalized
        .iter()
        .zip(&curv.interior)
        .filter(|(_, &b)| b)
        .map(|(s, _)| s.abs())
        .collect();
    median(&v)
}

/// Median of calibrated S over interior nodes.
pub fn median_calibrated_interior(curv: &CurvatureField) -> Option<f64> {
    let v: Vec<f64> = curv
        .calibrated
        .iter()
        .zip(&curv.interior)
        .filter(|(_, &b)| b)
        .map(|(s, _)| *s)
        .collect();
    median(&v)
}
