//! Fully connected networks: evaluation, forward-mode tangents, reverse-mode
//! cotangents and Jacobians.
//!
//! Parameter gradients (including gradients of quantities built from
//! tangents) go through [`crate::tape::Tape`]; this module holds the plain,
//! allocation-light evaluation paths used for diagnostics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// First derivative; the ReLU kink at exactly 0 takes the left value.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            _ => 0.0,
        }
    }

    /// Piecewise-linear activations have a vanishing second derivative.
    pub fn is_piecewise_linear(self) -> bool {
        !matches!(self, Activation::Tanh)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::LeakyRelu(s) if *s == DEFAULT_LEAKY_SLOPE => f.write_str("leaky_relu"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
            Activation::Tanh => f.write_str("tanh"),
            Activation::Identity => f.write_str("identity"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            "leaky_relu" => Ok(Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)),
            _ => {
                if let Some(slope) = s.strip_prefix("leaky_relu:") {
                    let slope: f64 = slope
                        .parse()
                        .map_err(|_| Error::usage(format!("bad leaky_relu slope in {s:?}")))?;
                    if !slope.is_finite() {
                        return Err(Error::usage("leaky_relu slope must be finite"));
                    }
                    Ok(Activation::LeakyRelu(slope))
                } else {
                    Err(Error::usage(format!("unknown activation {s:?}")))
                }
            }
        }
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Dense layer `act(W x + b)` with `W` stored `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias of length {} for a layer with {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("bias entry".into()));
        }
        Ok(Layer { weight, bias, activation })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `W x + b` written into `out`.
    #[inline]
    pub(crate) fn affine_into(&self, x: &[f64], with_bias: bool, out: &mut Vec<f64>) {
        let n = self.in_dim();
        out.clear();
        out.extend(self.weight.as_slice().chunks_exact(n).enumerate().map(|(i, row)| {
            let s = crate::linalg::dot(row, x);
            if with_bias {
                s + self.bias[i]
            } else {
                s
            }
        }));
    }

    /// `Wᵀ u`.
    #[inline]
    pub(crate) fn transpose_apply(&self, u: &[f64]) -> Vec<f64> {
        let n = self.in_dim();
        let mut out = vec![0.0; n];
        for (row, &ui) in self.weight.as_slice().chunks_exact(n).zip(u) {
            if ui == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * ui;
            }
        }
        out
    }
}

/// Feed-forward network: an ordered chain of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer record of one forward-mode sweep.
#[derive(Clone, Debug)]
pub struct DualRecord {
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
    pub tangent_pre: Vec<f64>,
    pub tangent_out: Vec<f64>,
}

/// All layer records of a JVP evaluation at one `(z, v)` pair.
#[derive(Clone, Debug)]
pub struct DualTrace {
    pub records: Vec<DualRecord>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::usage("network needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Random network with He (ReLU family) or Glorot (tanh, identity) normal
    /// weights and zero biases; deterministic in `seed`.
    pub fn init(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::usage("dims needs at least an input and an output size"));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::usage(format!(
                "{} layers need {} activations, got {}",
                dims.len() - 1,
                dims.len() - 1,
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::usage("zero-width layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &act)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let var = match act {
                    Activation::Relu | Activation::LeakyRelu(_) => 2.0 / fan_in as f64,
                    Activation::Tanh | Activation::Identity => 2.0 / (fan_in + fan_out) as f64,
                };
                let normal = Normal::new(0.0, var.sqrt()).expect("positive variance");
                let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                Layer::new(Matrix::new(fan_out, fan_in, w)?, vec![0.0; fan_out], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    /// Single linear layer `x ↦ W x + b`.
    pub fn linear(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        Mlp::new(vec![Layer::new(weight, bias, Activation::Identity)?])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Layer::out_dim)).collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "network input has dimension {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let mut pre = Vec::new();
        for l in &self.layers {
            l.affine_into(&h, true, &mut pre);
            h.clear();
            h.extend(pre.iter().map(|&p| l.activation.apply(p)));
        }
        Ok(h)
    }

    /// Output, directional derivative `J v` and the per-layer record.
    pub fn jvp(&self, z: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>, DualTrace)> {
        self.check_input(z)?;
        if v.len() != z.len() {
            return Err(Error::shape(format!(
                "tangent has dimension {}, input has {}",
                v.len(),
                z.len()
            )));
        }
        let mut h = z.to_vec();
        let mut t = v.to_vec();
        let mut records = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut pre = Vec::new();
            let mut tpre = Vec::new();
            l.affine_into(&h, true, &mut pre);
            l.affine_into(&t, false, &mut tpre);
            let out: Vec<f64> = pre.iter().map(|&p| l.activation.apply(p)).collect();
            let tout: Vec<f64> =
                pre.iter().zip(&tpre).map(|(&p, &tp)| l.activation.derivative(p) * tp).collect();
            h.clone_from(&out);
            t.clone_from(&tout);
            records.push(DualRecord { pre, out, tangent_pre: tpre, tangent_out: tout });
        }
        Ok((h, t, DualTrace { records }))
    }

    /// Output and `Jᵀ u`.
    pub fn vjp(&self, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(z)?;
        if u.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "cotangent has dimension {}, output has {}",
                u.len(),
                self.output_dim()
            )));
        }
        let mut h = z.to_vec();
        let mut pres = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut pre = Vec::new();
            l.affine_into(&h, true, &mut pre);
            h = pre.iter().map(|&p| l.activation.apply(p)).collect();
            pres.push(pre);
        }
        let mut g = u.to_vec();
        for (l, pre) in self.layers.iter().zip(&pres).rev() {
            for (gi, &p) in g.iter_mut().zip(pre) {
                *gi *= l.activation.derivative(p);
            }
            g = l.transpose_apply(&g);
        }
        Ok((h, g))
    }

    /// Full Jacobian `[output × input]`, one forward-mode sweep per column.
    pub fn jacobian(&self, z: &[f64]) -> Result<Matrix> {
        self.check_input(z)?;
        let m = self.input_dim();
        let mut cols = Vec::with_capacity(m);
        for k in 0..m {
            let mut e = vec![0.0; m];
            e[k] = 1.0;
            cols.push(self.jvp(z, &e)?.1);
        }
        Matrix::from_columns(&cols)
    }

    /// Multiplies the last layer's weights and bias by `alpha`; for an identity
    /// output layer this scales the whole map.
    pub fn scale_output(&mut self, alpha: f64) {
        let last = self.layers.last_mut().expect("nonempty");
        last.weight = last.weight.scaled(alpha);
        for b in &mut last.bias {
            *b *= alpha;
        }
    }

    pub fn to_file(&self) -> MlpFile {
        MlpFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dims: self.dims(),
            activations: self.activations(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile { weight: l.weight.as_slice().to_vec(), bias: l.bias.clone() })
                .collect(),
        }
    }

    pub fn from_file(file: MlpFile) -> Result<Self> {
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::usage(format!(
                "unsupported checkpoint format version {}",
                file.format_version
            )));
        }
        if file.dims.len() != file.layers.len() + 1 || file.activations.len() != file.layers.len() {
            return Err(Error::shape("checkpoint dims/activations/layers disagree"));
        }
        let layers = file
            .layers
            .into_iter()
            .zip(file.dims.windows(2))
            .zip(file.activations)
            .map(|((lf, d), act)| Layer::new(Matrix::new(d[1], d[0], lf.weight)?, lf.bias, act))
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Mlp::from_file(serde_json::from_str(&s)?)
    }
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = MlpFile::deserialize(d)?;
        Mlp::from_file(f).map_err(serde::de::Error::custom)
    }
}

/// On-disk network layout: row-major weight and bias arrays per layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpFile {
    pub format_version: u32,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub layers: Vec<LayerFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// A map `ℝᵐ → ℝⁿ` with forward and reverse directional derivatives.
///
/// Implemented by [`Mlp`] and by the closed-form maps in [`crate::analytic`],
/// so that geometric diagnostics and trace estimators can be checked against
/// parametrizations with known metrics.
pub trait DifferentiableMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, z: &[f64]) -> Result<Vec<f64>>;
    /// `(f(z), J v)`.
    fn jvp(&self, z: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
    /// `(f(z), Jᵀ u)`.
    fn vjp(&self, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    fn jacobian(&self, z: &[f64]) -> Result<Matrix> {
        let m = self.input_dim();
        if z.len() != m {
            return Err(Error::shape(format!("input has dimension {m}, got {}", z.len())));
        }
        let cols = (0..m)
            .map(|k| {
                let mut e = vec![0.0; m];
                e[k] = 1.0;
                self.jvp(z, &e).map(|r| r.1)
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_columns(&cols)
    }
}

impl DifferentiableMap for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        Mlp::output_dim(self)
    }

    fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.forward(z)
    }

    fn jvp(&self, z: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Mlp::jvp(self, z, v).map(|(y, jv, _)| (y, jv))
    }

    fn vjp(&self, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Mlp::vjp(self, z, u)
    }

    fn jacobian(&self, z: &[f64]) -> Result<Matrix> {
        Mlp::jacobian(self, z)
    }
}
