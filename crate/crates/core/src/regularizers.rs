//! Loss terms: reconstruction, global and local isometry, nonlinear and
//! constant conformal regularization.
//!
//! The trace-based regularizers only need `Tr R` and `Tr R²` per latent code,
//! where `R = JᵀJ` is the decoder's pullback metric. Both are obtained either
//! exactly from the full Jacobian or by Hutchinson estimation with Rademacher
//! probes:
//!
//! ```text
//! Tr R  ≈ (1/N) Σ ‖J vᵢ‖²
//! Tr R² ≈ (1/N) Σ ‖Jᵀ(J vᵢ)‖²
//! ```
//!
//! Batch combinations (mean of ratios, ratio of means, ...) are written once
//! in [`combine_traces`], which returns both the value and its derivative with
//! respect to every per-point trace; the training loop feeds those derivatives
//! into the per-point tapes.
//!
//! The ratio estimator used for the nonlinear conformal loss shares one probe
//! set between numerator and denominator and is biased (a ratio of unbiased
//! estimates). The exact path is unbiased.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm_sq;
use crate::net::{DifferentiableMap, Mlp};
use crate::tape::{NetTrace, Tape, Var};

/// Traces at or below this are treated as a collapsed decoder.
pub const DEGENERATE_TRACE: f64 = 1e-12;

/// Rademacher probe vectors for one latent point.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    probes: Vec<Vec<f64>>,
}

impl ProbeSet {
    /// Validates that every entry is exactly ±1 and all probes share a length.
    pub fn new(probes: Vec<Vec<f64>>) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::usage("empty probe set"));
        }
        let m = probes[0].len();
        for p in &probes {
            if p.len() != m {
                return Err(Error::shape("probes of unequal length"));
            }
            if p.iter().any(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::usage("probe entries must be exactly +1 or -1"));
            }
        }
        Ok(ProbeSet { probes })
    }

    pub fn sample<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if count == 0 {
            return Err(Error::usage("probe count must be positive"));
        }
        let probes = (0..count)
            .map(|_| (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
            .collect();
        Ok(ProbeSet { probes })
    }

    pub fn from_seed(count: usize, dim: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::sample(count, dim, &mut rng)
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.probes[0].len()
    }

    pub fn probes(&self) -> &[Vec<f64>] {
        &self.probes
    }
}

/// How `Tr R` and `Tr R²` are obtained at each point of a batch.
#[derive(Clone, Copy, Debug)]
pub enum TraceEstimator<'p> {
    /// From the full Jacobian.
    Exact,
    /// Hutchinson estimates; one probe set per batch point.
    Hutchinson(&'p [ProbeSet]),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceStats {
    pub tr_r: f64,
    pub tr_r2: f64,
}

fn check_probes(map: &dyn DifferentiableMap, probes: &ProbeSet) -> Result<()> {
    if probes.dim() != map.input_dim() {
        return Err(Error::shape(format!(
            "probes of dimension {} for a latent space of dimension {}",
            probes.dim(),
            map.input_dim()
        )));
    }
    Ok(())
}

/// `(1/N) Σ ‖J vᵢ‖²`.
pub fn hutch_tr_r(dec: &dyn DifferentiableMap, z: &[f64], probes: &ProbeSet) -> Result<f64> {
    check_probes(dec, probes)?;
    let mut s = 0.0;
    for v in probes.probes() {
        s += norm_sq(&dec.jvp(z, v)?.1);
    }
    Ok(s / probes.len() as f64)
}

/// `(1/N) Σ ‖Jᵀ(J vᵢ)‖²`.
pub fn hutch_tr_r2(dec: &dyn DifferentiableMap, z: &[f64], probes: &ProbeSet) -> Result<f64> {
    Ok(hutch_traces(dec, z, probes)?.tr_r2)
}

/// Both Hutchinson estimates from one probe set.
pub fn hutch_traces(dec: &dyn DifferentiableMap, z: &[f64], probes: &ProbeSet) -> Result<TraceStats> {
    check_probes(dec, probes)?;
    let (mut s1, mut s2) = (0.0, 0.0);
    for v in probes.probes() {
        let jv = dec.jvp(z, v)?.1;
        s1 += norm_sq(&jv);
        s2 += norm_sq(&dec.vjp(z, &jv)?.1);
    }
    let n = probes.len() as f64;
    Ok(TraceStats { tr_r: s1 / n, tr_r2: s2 / n })
}

/// `Tr R` and `Tr R²` from the full Jacobian.
pub fn exact_traces(dec: &dyn DifferentiableMap, z: &[f64]) -> Result<TraceStats> {
    let r = dec.jacobian(z)?.gram();
    let m = r.rows();
    let tr_r = (0..m).map(|i| r.get(i, i)).sum();
    let tr_r2 = r.as_slice().iter().map(|v| v * v).sum();
    Ok(TraceStats { tr_r, tr_r2 })
}

pub fn batch_traces(
    dec: &dyn DifferentiableMap,
    codes: &[Vec<f64>],
    est: TraceEstimator<'_>,
) -> Result<Vec<TraceStats>> {
    if codes.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    match est {
        TraceEstimator::Exact => codes.iter().map(|z| exact_traces(dec, z)).collect(),
        TraceEstimator::Hutchinson(sets) => {
            if sets.len() != codes.len() {
                return Err(Error::usage(format!(
                    "{} probe sets for {} codes",
                    sets.len(),
                    codes.len()
                )));
            }
            codes.iter().zip(sets).map(|(z, p)| hutch_traces(dec, z, p)).collect()
        }
    }
}

/// Regularizers that depend on the decoder only through per-point traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLoss {
    /// `(1/2m) E[Tr R²] − (1/m) E[Tr R] + 1/2`
    LocalIsometry,
    /// `(m/2) E[Tr R² / (Tr R)²] − 1/2`
    NonlinearConformal,
    /// `(m/2) E[Tr R²] / E[Tr R]² − 1/2`
    ConstantConformal,
}

/// Derivatives of a batch loss with respect to one point's `(Tr R, Tr R²)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TraceAdjoint {
    pub d_tr_r: f64,
    pub d_tr_r2: f64,
}

/// Batch value of a trace-based regularizer and its per-point derivatives.
pub fn combine_traces(
    kind: TraceLoss,
    latent_dim: usize,
    stats: &[TraceStats],
) -> Result<(f64, Vec<TraceAdjoint>)> {
    if stats.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let b = stats.len() as f64;
    let m = latent_dim as f64;
    match kind {
        TraceLoss::NonlinearConformal => {
            let mut total = 0.0;
            let mut adj = Vec::with_capacity(stats.len());
            for (index, s) in stats.iter().enumerate() {
                if !(s.tr_r > DEGENERATE_TRACE) {
                    return Err(Error::DegenerateJacobian { index, trace: s.tr_r });
                }
                let t1 = s.tr_r;
                total += 0.5 * m * s.tr_r2 / (t1 * t1) - 0.5;
                adj.push(TraceAdjoint {
                    d_tr_r: -m * s.tr_r2 / (b * t1 * t1 * t1),
                    d_tr_r2: 0.5 * m / (b * t1 * t1),
                });
            }
            Ok((total / b, adj))
        }
        TraceLoss::LocalIsometry => {
            let mean_r = stats.iter().map(|s| s.tr_r).sum::<f64>() / b;
            let mean_r2 = stats.iter().map(|s| s.tr_r2).sum::<f64>() / b;
            let value = mean_r2 / (2.0 * m) - mean_r / m + 0.5;
            let a = TraceAdjoint { d_tr_r: -1.0 / (m * b), d_tr_r2: 1.0 / (2.0 * m * b) };
            Ok((value, vec![a; stats.len()]))
        }
        TraceLoss::ConstantConformal => {
            let c = stats.iter().map(|s| s.tr_r).sum::<f64>() / b;
            let a = stats.iter().map(|s| s.tr_r2).sum::<f64>() / b;
            if !(c > DEGENERATE_TRACE) {
                return Err(Error::Degenerate(format!("batch-mean trace {c:e} is not positive")));
            }
            let value = 0.5 * m * a / (c * c) - 0.5;
            let adj = TraceAdjoint { d_tr_r: -m * a / (b * c * c * c), d_tr_r2: 0.5 * m / (b * c * c) };
            Ok((value, vec![adj; stats.len()]))
        }
    }
}

fn trace_loss(
    kind: TraceLoss,
    dec: &dyn DifferentiableMap,
    codes: &[Vec<f64>],
    est: TraceEstimator<'_>,
) -> Result<f64> {
    let stats = batch_traces(dec, codes, est)?;
    Ok(combine_traces(kind, dec.input_dim(), &stats)?.0)
}

pub fn nonlinear_conformal_loss(
    dec: &dyn DifferentiableMap,
    codes: &[Vec<f64>],
    est: TraceEstimator<'_>,
) -> Result<f64> {
    trace_loss(TraceLoss::NonlinearConformal, dec, codes, est)
}

pub fn local_iso_loss(
    dec: &dyn DifferentiableMap,
    codes: &[Vec<f64>],
    est: TraceEstimator<'_>,
) -> Result<f64> {
    trace_loss(TraceLoss::LocalIsometry, dec, codes, est)
}

pub fn constant_conformal_loss(
    dec: &dyn DifferentiableMap,
    codes: &[Vec<f64>],
    est: TraceEstimator<'_>,
) -> Result<f64> {
    trace_loss(TraceLoss::ConstantConformal, dec, codes, est)
}

/// `(1/N) Σ ‖xᵢ − Dec(Enc(xᵢ))‖²`.
pub fn recon_loss(enc: &Mlp, dec: &Mlp, batch: &[Vec<f64>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let mut s = 0.0;
    for x in batch {
        let xh = dec.forward(&enc.forward(x)?)?;
        if xh.len() != x.len() {
            return Err(Error::shape("decoder output and data dimensions differ"));
        }
        s += x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(s / batch.len() as f64)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Global isometry over all in-batch pairs, with gradients with respect to the
/// codes and their decodings.
pub fn global_iso_combine(
    codes: &[Vec<f64>],
    decoded: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = codes.len();
    if n < 2 {
        return Err(Error::usage("global isometry needs at least two codes"));
    }
    if decoded.len() != n {
        return Err(Error::shape("codes and decodings differ in count"));
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let mut total = 0.0;
    let mut dz: Vec<Vec<f64>> = codes.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut dy: Vec<Vec<f64>> = decoded.iter().map(|c| vec![0.0; c.len()]).collect();
    for i in 0..n {
        for j in i + 1..n {
            let d_lat = distance(&codes[i], &codes[j]);
            let d_obs = distance(&decoded[i], &decoded[j]);
            let diff = d_lat - d_obs;
            total += diff.abs();
            let s = if diff > 0.0 {
                1.0 / pairs
            } else if diff < 0.0 {
                -1.0 / pairs
            } else {
                0.0
            };
            if s == 0.0 {
                continue;
            }
            if d_lat > 0.0 {
                for k in 0..codes[i].len() {
                    let g = s * (codes[i][k] - codes[j][k]) / d_lat;
                    dz[i][k] += g;
                    dz[j][k] -= g;
                }
            }
            if d_obs > 0.0 {
                for k in 0..decoded[i].len() {
                    let g = -s * (decoded[i][k] - decoded[j][k]) / d_obs;
                    dy[i][k] += g;
                    dy[j][k] -= g;
                }
            }
        }
    }
    Ok((total / pairs, dz, dy))
}

/// Mean over in-batch pairs of `|‖z₁ − z₂‖ − ‖Dec(z₁) − Dec(z₂)‖|`.
pub fn global_iso_loss(dec: &dyn DifferentiableMap, codes: &[Vec<f64>]) -> Result<f64> {
    if codes.len() < 2 {
        return Err(Error::usage("global isometry needs at least two codes"));
    }
    let decoded = codes.iter().map(|z| dec.eval(z)).collect::<Result<Vec<_>>>()?;
    Ok(global_iso_combine(codes, &decoded)?.0)
}

/// Per-point trace nodes recorded on a tape, differentiable in the decoder
/// parameters (and in the code, when it is not a detached leaf).
#[derive(Clone, Copy, Debug)]
pub struct TraceVars {
    pub tr_r: Var,
    pub tr_r2: Option<Var>,
}

/// Records `Tr R` (and `Tr R²` when `with_r2`) for the decoder trace
/// `dec_trace`, which must have been recorded with activation derivatives.
pub fn record_traces(
    tape: &mut Tape<'_>,
    dec_trace: &NetTrace,
    probes: Option<&ProbeSet>,
    with_r2: bool,
) -> Result<TraceVars> {
    let m = tape.value(dec_trace.input).len();
    match probes {
        None => {
            let cols = (0..m)
                .map(|k| {
                    let mut e = vec![0.0; m];
                    e[k] = 1.0;
                    let e = tape.leaf(e);
                    tape.tangent(dec_trace, e)
                })
                .collect::<Result<Vec<_>>>()?;
            let sq: Vec<Var> = cols.iter().map(|&c| tape.sum_sq(c)).collect();
            let tr_r = tape.sum(&sq)?;
            let tr_r2 = if with_r2 {
                // Tr R² = Σ_k ‖c_k‖⁴ + 2 Σ_{k<l} (c_k·c_l)²
                let mut terms = Vec::new();
                for k in 0..m {
                    terms.push(tape.mul(sq[k], sq[k])?);
                    for l in k + 1..m {
                        let d = tape.dot(cols[k], cols[l])?;
                        let d2 = tape.mul(d, d)?;
                        terms.push(tape.scale(d2, 2.0));
                    }
                }
                Some(tape.sum(&terms)?)
            } else {
                None
            };
            Ok(TraceVars { tr_r, tr_r2 })
        }
        Some(set) => {
            if set.dim() != m {
                return Err(Error::shape(format!(
                    "probes of dimension {} for a latent space of dimension {m}",
                    set.dim()
                )));
            }
            let inv_n = 1.0 / set.len() as f64;
            let mut s1 = Vec::with_capacity(set.len());
            let mut s2 = Vec::with_capacity(set.len());
            for v in set.probes() {
                let v = tape.leaf(v.clone());
                let jv = tape.tangent(dec_trace, v)?;
                s1.push(tape.sum_sq(jv));
                if with_r2 {
                    let u = tape.cotangent(dec_trace, jv)?;
                    s2.push(tape.sum_sq(u));
                }
            }
            let t1 = tape.sum(&s1)?;
            let tr_r = tape.scale(t1, inv_n);
            let tr_r2 = if with_r2 {
                let t2 = tape.sum(&s2)?;
                Some(tape.scale(t2, inv_n))
            } else {
                None
            };
            Ok(TraceVars { tr_r, tr_r2 })
        }
    }
}

/// Reconstruction and geometric terms of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub geometric: f64,
    pub lambda_geo: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, geometric: f64, lambda_geo: f64) -> Self {
        LossBreakdown { recon, geometric, lambda_geo, total: recon + lambda_geo * geometric }
    }
}

/// Sample mean and standard error of `count` independent Hutchinson estimates.
pub fn estimator_mean_and_se<R: Rng + ?Sized>(
    dec: &dyn DifferentiableMap,
    z: &[f64],
    probes_per_estimate: usize,
    count: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if count < 2 {
        return Err(Error::usage("need at least two estimates"));
    }
    let est = (0..count)
        .map(|_| {
            let p = ProbeSet::sample(probes_per_estimate, dec.input_dim(), rng)?;
            hutch_tr_r(dec, z, &p)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = est.iter().sum::<f64>() / count as f64;
    let var = est.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (count - 1) as f64;
    Ok((mean, (var / count as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::SwissRollMap;
    use crate::linalg::{sym_eigvals, Matrix};
    use crate::net::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(rows: &[Vec<f64>]) -> Mlp {
        let w = Matrix::from_rows(rows).unwrap();
        let n = w.rows();
        Mlp::linear(w, vec![0.0; n]).unwrap()
    }

    /// Linear decoder ℝ² → ℝ³ with JᵀJ = diag(a², b²).
    fn diag_decoder(a: f64, b: f64) -> Mlp {
        linear(&[vec![a, 0.0], vec![0.0, b], vec![0.0, 0.0]])
    }

    fn all_probe_sets(m: usize) -> Vec<ProbeSet> {
        (0..1usize << m)
            .map(|bits| {
                let v = (0..m).map(|k| if bits >> k & 1 == 1 { 1.0 } else { -1.0 }).collect();
                ProbeSet::new(vec![v]).unwrap()
            })
            .collect()
    }

    #[test]
    fn probe_validation() {
        assert!(ProbeSet::new(vec![]).is_err());
        assert!(ProbeSet::new(vec![vec![1.0, 0.5]]).is_err());
        let p = ProbeSet::from_seed(16, 3, 1).unwrap();
        assert!(p.probes().iter().flatten().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(p, ProbeSet::from_seed(16, 3, 1).unwrap());
        assert!(ProbeSet::from_seed(0, 3, 1).is_err());
    }

    #[test]
    fn hutchinson_exact_on_diagonal_metrics() {
        let dec = diag_decoder(3f64.sqrt(), 1.0);
        for p in all_probe_sets(2) {
            let z = [0.2, 0.1];
            assert!((hutch_tr_r(&dec, &z, &p).unwrap() - 4.0).abs() < 1e-12);
            assert!((hutch_tr_r2(&dec, &z, &p).unwrap() - 10.0).abs() < 1e-12);
            let s = [1.0, 7.0];
            assert!((hutch_tr_r(&SwissRollMap, &s, &p).unwrap() - 3.0).abs() < 1e-12);
            assert!((hutch_tr_r2(&SwissRollMap, &s, &p).unwrap() - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hutchinson_converges_on_random_net() {
        let net = Mlp::init(
            &[3, 16, 16, 5],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            8,
        )
        .unwrap();
        let z = [0.3, -0.1, 0.8];
        let p = ProbeSet::from_seed(4096, 3, 77).unwrap();
        let exact = exact_traces(&net, &z).unwrap();
        let est = hutch_traces(&net, &z, &p).unwrap();
        assert!((est.tr_r - exact.tr_r).abs() < 0.02 * exact.tr_r);
        let eig = sym_eigvals(&net.jacobian(&z).unwrap().gram()).unwrap();
        let sq: f64 = eig.values().iter().map(|l| l * l).sum();
        assert!((est.tr_r2 - sq).abs() < 0.03 * sq);
    }

    #[test]
    fn recon_loss_cases() {
        let id = linear(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let batch = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]];
        assert_eq!(recon_loss(&id, &id, &batch).unwrap(), 0.0);
        let zero = linear(&vec![vec![0.0; 3]; 3]);
        let units = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(recon_loss(&id, &zero, &units).unwrap(), 1.0);
        assert!(recon_loss(&id, &id, &[]).is_err());
    }

    #[test]
    fn recon_loss_matches_hand_composition() {
        let enc = Mlp::init(&[3, 4, 2], &[Activation::Tanh, Activation::Identity], 1).unwrap();
        let dec = Mlp::init(&[2, 4, 3], &[Activation::Tanh, Activation::Identity], 2).unwrap();
        let batch: Vec<Vec<f64>> =
            (0..4).map(|i| vec![0.1 * i as f64, -0.2, 0.3 + 0.05 * i as f64]).collect();
        let layer = |l: &crate::net::Layer, x: &[f64]| -> Vec<f64> {
            (0..l.out_dim())
                .map(|i| {
                    let s: f64 = (0..l.in_dim()).map(|j| l.weight.get(i, j) * x[j]).sum();
                    l.activation.apply(s + l.bias[i])
                })
                .collect()
        };
        let mut want = 0.0;
        for x in &batch {
            let mut h = x.clone();
            for l in enc.layers().iter().chain(dec.layers()) {
                h = layer(l, &h);
            }
            want += x.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        want /= 4.0;
        assert!((recon_loss(&enc, &dec, &batch).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn global_iso_cases() {
        let id = linear(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let codes = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.3, 2.0]];
        assert!(global_iso_loss(&id, &codes).unwrap().abs() < 1e-15);
        let two = linear(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        assert!((global_iso_loss(&two, &codes[..2]).unwrap() - 1.0).abs() < 1e-15);
        assert!(global_iso_loss(&id, &codes[..1]).is_err());

        let dec = Mlp::init(&[2, 5, 3], &[Activation::Tanh, Activation::Identity], 3).unwrap();
        let y: Vec<Vec<f64>> = codes.iter().map(|z| dec.forward(z).unwrap()).collect();
        let mut want = 0.0;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            want += (distance(&codes[i], &codes[j]) - distance(&y[i], &y[j])).abs();
        }
        assert!((global_iso_loss(&dec, &codes).unwrap() - want / 3.0).abs() < 1e-12);
    }

    #[test]
    fn conformal_loss_values() {
        // R = c I with c = 4 at every point
        let dec = diag_decoder(2.0, 2.0);
        let codes = vec![vec![0.1, 0.2], vec![-1.0, 0.5]];
        assert!(nonlinear_conformal_loss(&dec, &codes, TraceEstimator::Exact).unwrap().abs() < 1e-10);
        // eigenvalues (2, 1): (2/2)(5/9) - 1/2 = 1/18
        let v = nonlinear_conformal_loss(&SwissRollMap, &[vec![1.0, 3.0]], TraceEstimator::Exact).unwrap();
        assert!((v - 1.0 / 18.0).abs() < 1e-12);
        let probes = all_probe_sets(2);
        for p in &probes {
            let v = nonlinear_conformal_loss(
                &SwissRollMap,
                &[vec![1.0, 3.0]],
                TraceEstimator::Hutchinson(std::slice::from_ref(p)),
            )
            .unwrap();
            assert!((v - 1.0 / 18.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conformal_loss_is_scale_invariant() {
        let mut dec = Mlp::init(
            &[2, 8, 8, 3],
            &[Activation::Tanh, Activation::Relu, Activation::Identity],
            5,
        )
        .unwrap();
        let codes = vec![vec![0.3, -0.4], vec![1.2, 0.1], vec![-0.5, -0.9]];
        let a = nonlinear_conformal_loss(&dec, &codes, TraceEstimator::Exact).unwrap();
        let c = constant_conformal_loss(&dec, &codes, TraceEstimator::Exact).unwrap();
        dec.scale_output(3.0);
        let b = nonlinear_conformal_loss(&dec, &codes, TraceEstimator::Exact).unwrap();
        let d = constant_conformal_loss(&dec, &codes, TraceEstimator::Exact).unwrap();
        assert!((a - b).abs() < 1e-10);
        assert!((c - d).abs() < 1e-10);
    }

    #[test]
    fn local_iso_values() {
        let iso = diag_decoder(1.0, 1.0);
        let codes = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert!(local_iso_loss(&iso, &codes, TraceEstimator::Exact).unwrap().abs() < 1e-15);
        let s = diag_decoder(2f64.sqrt(), 2f64.sqrt());
        assert!((local_iso_loss(&s, &codes, TraceEstimator::Exact).unwrap() - 0.5).abs() < 1e-12);
        let v = local_iso_loss(&SwissRollMap, &[vec![1.0, 0.0]], TraceEstimator::Exact).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        assert!(local_iso_loss(&iso, &[], TraceEstimator::Exact).is_err());
    }

    #[test]
    fn constant_vs_nonlinear_conformal() {
        // R = I and R = 4I at two points
        let stats = [TraceStats { tr_r: 2.0, tr_r2: 2.0 }, TraceStats { tr_r: 8.0, tr_r2: 32.0 }];
        let (cc, _) = combine_traces(TraceLoss::ConstantConformal, 2, &stats).unwrap();
        let (nc, _) = combine_traces(TraceLoss::NonlinearConformal, 2, &stats).unwrap();
        assert!((cc - 0.18).abs() < 1e-12);
        assert!(nc.abs() < 1e-12);
    }

    #[test]
    fn degenerate_decoder_is_reported() {
        let flat = diag_decoder(0.0, 0.0);
        let codes = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let e = nonlinear_conformal_loss(&flat, &codes, TraceEstimator::Exact).unwrap_err();
        assert!(matches!(e, Error::DegenerateJacobian { index: 0, .. }));
        assert!(constant_conformal_loss(&flat, &codes, TraceEstimator::Exact).is_err());
    }

    #[test]
    fn combine_adjoints_match_finite_differences() {
        let stats = vec![
            TraceStats { tr_r: 2.5, tr_r2: 4.0 },
            TraceStats { tr_r: 1.2, tr_r2: 0.9 },
            TraceStats { tr_r: 3.1, tr_r2: 7.7 },
        ];
        for kind in [TraceLoss::LocalIsometry, TraceLoss::NonlinearConformal, TraceLoss::ConstantConformal] {
            let (_, adj) = combine_traces(kind, 2, &stats).unwrap();
            let h = 1e-6;
            for i in 0..stats.len() {
                for which in 0..2 {
                    let mut p = stats.clone();
                    let mut m = stats.clone();
                    if which == 0 {
                        p[i].tr_r += h;
                        m[i].tr_r -= h;
                    } else {
                        p[i].tr_r2 += h;
                        m[i].tr_r2 -= h;
                    }
                    let fd = (combine_traces(kind, 2, &p).unwrap().0
                        - combine_traces(kind, 2, &m).unwrap().0)
                        / (2.0 * h);
                    let an = if which == 0 { adj[i].d_tr_r } else { adj[i].d_tr_r2 };
                    assert!((fd - an).abs() < 1e-7, "{kind:?} {i} {which}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn tape_traces_match_value_path() {
        let dec = Mlp::init(
            &[2, 10, 10, 3],
            &[Activation::Tanh, Activation::LeakyRelu(0.05), Activation::Identity],
            21,
        )
        .unwrap();
        let z = vec![0.4, -0.6];
        let probes = ProbeSet::from_seed(6, 2, 4).unwrap();
        for p in [None, Some(&probes)] {
            let mut tape = Tape::new();
            let id = tape.bind(&dec);
            let zi = tape.leaf(z.clone());
            let tr = tape.forward(id, zi, true).unwrap();
            let tv = record_traces(&mut tape, &tr, p, true).unwrap();
            let want = match p {
                None => exact_traces(&dec, &z).unwrap(),
                Some(p) => hutch_traces(&dec, &z, p).unwrap(),
            };
            assert!((tape.scalar(tv.tr_r) - want.tr_r).abs() < 1e-12 * want.tr_r);
            assert!((tape.scalar(tv.tr_r2.unwrap()) - want.tr_r2).abs() < 1e-12 * want.tr_r2);
        }
    }

    #[test]
    fn loss_breakdown_total() {
        let b = LossBreakdown::new(0.25, 0.5, 3.0);
        assert_eq!(b.total, 0.25 + 3.0 * 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn exact_losses_are_nonnegative(seed in 0u64..10_000) {
                let dec = Mlp::init(
                    &[2, 8, 8, 4],
                    &[Activation::Tanh, Activation::Relu, Activation::Identity],
                    seed,
                ).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let codes: Vec<Vec<f64>> = (0..5)
                    .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                    .collect();
                for f in [nonlinear_conformal_loss, local_iso_loss, constant_conformal_loss] {
                    match f(&dec, &codes, TraceEstimator::Exact) {
                        Ok(v) => prop_assert!(v >= -1e-9),
                        Err(Error::DegenerateJacobian { .. }) | Err(Error::Degenerate(_)) => {}
                        Err(e) => return Err(TestCaseError::fail(e.to_string())),
                    }
                }
            }

            #[test]
            fn conformally_equivalent_linear_decoders(
                w in proptest::collection::vec(-2.0..2.0f64, 6),
                c in 0.1..10.0f64,
            ) {
                let w = Matrix::new(3, 2, w).unwrap();
                prop_assume!(crate::linalg::condition_number(&w).map(|k| k < 1e6).unwrap_or(false));
                let d1 = Mlp::linear(w.clone(), vec![0.0; 3]).unwrap();
                let d2 = Mlp::linear(w.scaled(c.sqrt()), vec![0.0; 3]).unwrap();
                let codes = vec![vec![0.0, 1.0]];
                let a = nonlinear_conformal_loss(&d1, &codes, TraceEstimator::Exact).unwrap();
                let b = nonlinear_conformal_loss(&d2, &codes, TraceEstimator::Exact).unwrap();
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
