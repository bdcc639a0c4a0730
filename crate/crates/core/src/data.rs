//! Swiss-roll generation, standardization, splits and CSV exchange.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const XI_RANGE: (f64, f64) = (1.5 * PI, 4.5 * PI);
pub const ETA_RANGE: (f64, f64) = (0.0, 21.0);
pub const CSV_HEADER: &str = "x,y,z,xi,eta";

/// Per-feature affine map applied by [`Dataset::standardize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Vec<f64>>,
    /// Ground-truth `(ξ, η)` per sample, when known.
    pub true_params: Vec<[f64; 2]>,
    /// Maps original coordinates to the stored ones.
    pub normalization: Option<Normalization>,
}

/// Disjoint, exhaustive train/validation index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Samples `n` points of the Swiss roll with `ξ`, `η` uniform on
/// `[3π/2, 9π/2] × [0, 21]` and no observation noise.
pub fn swiss_roll(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::usage("need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = rng.random_range(XI_RANGE.0..XI_RANGE.1);
        let eta = rng.random_range(ETA_RANGE.0..ETA_RANGE.1);
        samples.push(crate::analytic::SwissRollMap::point(xi, eta).to_vec());
        params.push([xi, eta]);
    }
    Ok(Dataset { samples, true_params: params, normalization: None })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Per-feature mean and population standard deviation.
    pub fn feature_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let n = self.len() as f64;
        let mut mean = vec![0.0; d];
        for s in &self.samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for s in &self.samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        (mean, var.into_iter().map(|v| (v / n).sqrt()).collect())
    }

    /// `(x − mean) / std` per feature with the population standard deviation.
    /// The stored normalization composes with any earlier one, so
    /// [`Dataset::original`] always recovers the raw coordinates.
    pub fn standardize(&self) -> Result<Dataset> {
        if self.len() < 2 {
            return Err(Error::usage("standardization needs at least two samples"));
        }
        let (mean, std) = self.feature_stats();
        if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::usage(format!("feature {k} has zero variance")));
        }
        let step = Normalization { mean, std };
        let samples = self.samples.iter().map(|s| step.apply(s)).collect();
        let normalization = Some(match &self.normalization {
            None => step,
            Some(prev) => Normalization {
                mean: prev
                    .mean
                    .iter()
                    .zip(&prev.std)
                    .zip(&step.mean)
                    .map(|((m1, s1), m2)| m2 * s1 + m1)
                    .collect(),
                std: prev.std.iter().zip(&step.std).map(|(s1, s2)| s1 * s2).collect(),
            },
        });
        Ok(Dataset { samples, true_params: self.true_params.clone(), normalization })
    }

    /// Samples mapped back through the stored normalization.
    pub fn original(&self) -> Vec<Vec<f64>> {
        match &self.normalization {
            None => self.samples.clone(),
            Some(n) => self.samples.iter().map(|s| n.inverse(s)).collect(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            true_params: if self.true_params.len() == self.len() {
                idx.iter().map(|&i| self.true_params[i]).collect()
            } else {
                Vec::new()
            },
            normalization: self.normalization.clone(),
        }
    }

    /// Seeded shuffle, then the first `round(n · val_fraction)` indices go to
    /// validation (at least one to each side when `n ≥ 2`).
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<Split> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::usage(format!("validation fraction {val_fraction} not in (0, 1)")));
        }
        let n = self.len();
        if n < 2 {
            return Err(Error::usage("cannot split fewer than two samples"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        let val = idx[..n_val].to_vec();
        let train = idx[n_val..].to_vec();
        Ok(Split { train, val })
    }

    /// Writes `x,y,z,xi,eta` rows (stored coordinates, true parameters).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if self.dim() != 3 {
            return Err(Error::shape("CSV export expects 3-D samples"));
        }
        writeln!(w, "{CSV_HEADER}")?;
        for (i, s) in self.samples.iter().enumerate() {
            let p = self.true_params.get(i).copied().unwrap_or([f64::NAN, f64::NAN]);
            writeln!(w, "{},{},{},{},{}", s[0], s[1], s[2], p[0], p[1])?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Dataset> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })??;
        if header.trim() != CSV_HEADER {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {CSV_HEADER:?}, got {:?}", header.trim()),
            });
        }
        let mut samples = Vec::new();
        let mut params = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            let lineno = k + 2;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("not a number: {f:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != 5 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 5 fields, got {}", vals.len()),
                });
            }
            if vals[..3].iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse { line: lineno, msg: "non-finite coordinate".into() });
            }
            samples.push(vals[..3].to_vec());
            params.push([vals[3], vals[4]]);
        }
        if samples.is_empty() {
            return Err(Error::Parse { line: 2, msg: "no data rows".into() });
        }
        Ok(Dataset { samples, true_params: params, normalization: None })
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Dataset::read_csv(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::SwissRollMap;
    use crate::net::DifferentiableMap;

    #[test]
    fn parametrization_values() {
        let p = SwissRollMap::point(1.5 * PI, 0.0);
        assert!(p[0].abs() < 1e-12 && p[1] == 0.0 && (p[2] + 1.5 * PI).abs() < 1e-12);
        let q = SwissRollMap::point(2.0 * PI, 21.0);
        assert!((q[0] - 2.0 * PI).abs() < 1e-12 && q[1] == 21.0 && q[2].abs() < 1e-12);
    }

    #[test]
    fn samples_live_on_the_roll() {
        let ds = swiss_roll(500, 3).unwrap();
        for (s, p) in ds.samples.iter().zip(&ds.true_params) {
            assert!(p[0] >= XI_RANGE.0 && p[0] <= XI_RANGE.1);
            assert!(p[1] >= ETA_RANGE.0 && p[1] <= ETA_RANGE.1);
            assert!((s[0] * s[0] + s[2] * s[2] - p[0] * p[0]).abs() < 1e-10 * p[0] * p[0]);
        }
        assert_eq!(ds, swiss_roll(500, 3).unwrap());
        assert!(swiss_roll(0, 1).is_err());
    }

    #[test]
    fn finite_difference_metric_at_samples() {
        let ds = swiss_roll(20, 8).unwrap();
        let h = 1e-6;
        for p in &ds.true_params {
            let col = |k: usize| -> Vec<f64> {
                let mut a = *p;
                let mut b = *p;
                a[k] += h;
                b[k] -= h;
                let fa = SwissRollMap.eval(&a).unwrap();
                let fb = SwissRollMap.eval(&b).unwrap();
                fa.iter().zip(&fb).map(|(x, y)| (x - y) / (2.0 * h)).collect()
            };
            let (c0, c1) = (col(0), col(1));
            let g00: f64 = c0.iter().map(|v| v * v).sum();
            let g01: f64 = c0.iter().zip(&c1).map(|(a, b)| a * b).sum();
            let g11: f64 = c1.iter().map(|v| v * v).sum();
            assert!((g00 - (1.0 + p[0] * p[0])).abs() < 1e-6 * g00);
            assert!(g01.abs() < 1e-6);
            assert!((g11 - 1.0).abs() < 1e-6);
        }
    }

    fn ks_uniform(mut v: Vec<f64>, lo: f64, hi: f64) -> f64 {
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x - lo) / (hi - lo);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn parameters_are_uniform() {
        let ds = swiss_roll(5000, 17).unwrap();
        let xi: Vec<f64> = ds.true_params.iter().map(|p| p[0]).collect();
        let eta: Vec<f64> = ds.true_params.iter().map(|p| p[1]).collect();
        assert!(ks_uniform(xi, XI_RANGE.0, XI_RANGE.1) < 0.05);
        assert!(ks_uniform(eta, ETA_RANGE.0, ETA_RANGE.1) < 0.05);
    }

    #[test]
    fn standardize_two_points() {
        let ds = Dataset {
            samples: vec![vec![0.0; 3], vec![2.0; 3]],
            true_params: vec![],
            normalization: None,
        };
        let s = ds.standardize().unwrap();
        assert_eq!(s.samples, vec![vec![-1.0; 3], vec![1.0; 3]]);
    }

    #[test]
    fn standardize_properties() {
        let ds = swiss_roll(300, 2).unwrap();
        let s = ds.standardize().unwrap();
        let (mean, std) = s.feature_stats();
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        assert!(std.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let s2 = s.standardize().unwrap();
        for (a, b) in s.samples.iter().flatten().zip(s2.samples.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in ds.samples.iter().flatten().zip(s2.original().iter().flatten()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn zero_variance_feature_is_named() {
        let ds = Dataset {
            samples: vec![vec![1.0, 5.0, 0.0], vec![2.0, 5.0, 1.0]],
            true_params: vec![],
            normalization: None,
        };
        let e = ds.standardize().unwrap_err().to_string();
        assert!(e.contains("feature 1"), "{e}");
    }

    #[test]
    fn split_properties() {
        let ds = swiss_roll(10, 0).unwrap();
        let sp = ds.split(0.2, 4).unwrap();
        assert_eq!((sp.train.len(), sp.val.len()), (8, 2));
        assert_eq!(sp, ds.split(0.2, 4).unwrap());
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(ds.split(0.0, 1).is_err());
        assert!(ds.split(1.0, 1).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let ds = swiss_roll(7, 5).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 8);
        let back = Dataset::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.true_params, ds.true_params);

        let bad = format!("{CSV_HEADER}\n1,2,3,4,5\n1,2,oops,4,5\n");
        match Dataset::read_csv(std::io::Cursor::new(bad)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
