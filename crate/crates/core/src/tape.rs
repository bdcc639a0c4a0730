//! Reverse-mode tape over vector-valued nodes, specialised to dense networks.
//!
//! Forward-mode tangents (`J v`) and reverse cotangents (`Jᵀ u`) of a network
//! are themselves feed-forward computations in the network parameters. They
//! are recorded here as ordinary nodes next to the primal pass, so a single
//! reverse sweep yields parameter gradients of scalars such as `‖J v‖²` or
//! `‖Jᵀ J v‖²`.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::net::{Activation, Layer, Mlp};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Identifies one of the networks bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetId(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    /// `W x + b`
    Affine { net: usize, layer: usize, x: usize },
    /// `W x`
    Linear { net: usize, layer: usize, x: usize },
    /// `Wᵀ x`
    LinearT { net: usize, layer: usize, x: usize },
    Act { x: usize, act: Activation },
    /// elementwise `act'(x)`
    ActDeriv { x: usize, act: Activation },
    Mul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    /// scalar `‖a‖²`
    SumSq { a: usize },
    /// scalar `a·b`
    Dot { a: usize, b: usize },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Accumulated `∂(scalar)/∂θ` with the layout of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGradient {
    pub fn zeros_like(net: &Mlp) -> Self {
        ParamGradient {
            weights: net.layers().iter().map(|l| Matrix::zeros(l.out_dim(), l.in_dim())).collect(),
            biases: net.layers().iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    /// Same flattening as [`Mlp::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamGradient) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::shape("gradients of different networks"));
        }
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            if w.rows() != ow.rows() || w.cols() != ow.cols() {
                return Err(Error::shape("gradient layer shapes differ"));
            }
            for (a, b) in w.as_mut_slice().iter_mut().zip(ow.as_slice()) {
                *a += b;
            }
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for v in w.as_mut_slice() {
                *v *= s;
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= s;
            }
        }
    }

    pub fn is_congruent(&self, net: &Mlp) -> bool {
        self.weights.len() == net.layers().len()
            && self.weights.iter().zip(net.layers()).all(|(w, l)| {
                w.rows() == l.out_dim() && w.cols() == l.in_dim()
            })
            && self.biases.iter().zip(net.layers()).all(|(b, l)| b.len() == l.out_dim())
    }
}

/// Result of one reverse sweep.
#[derive(Debug)]
pub struct TapeGradient {
    /// One entry per bound network, in binding order.
    pub params: Vec<ParamGradient>,
    adjoints: Vec<Vec<f64>>,
}

impl TapeGradient {
    /// Adjoint of any node, e.g. the gradient with respect to an input leaf.
    pub fn wrt(&self, v: Var) -> &[f64] {
        &self.adjoints[v.0]
    }
}

/// Primal pass of a network on the tape, keeping what tangent and cotangent
/// sweeps need.
#[derive(Clone, Debug)]
pub struct NetTrace {
    pub net: NetId,
    pub input: Var,
    pub output: Var,
    pub pre: Vec<Var>,
    /// `act'(pre)` per layer; `None` for identity layers.
    pub derivs: Vec<Option<Var>>,
}

#[derive(Debug)]
pub struct Tape<'a> {
    nets: Vec<&'a Mlp>,
    nodes: Vec<Node>,
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nets: Vec::new(), nodes: Vec::with_capacity(64) }
    }

    pub fn bind(&mut self, net: &'a Mlp) -> NetId {
        self.nets.push(net);
        NetId(self.nets.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-one node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn layer(&self, net: usize, layer: usize) -> &'a Layer {
        &self.nets[net].layers()[layer]
    }

    /// Input or constant; receives an adjoint but no parameter gradient.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn check_len(&self, v: Var, n: usize, what: &str) -> Result<()> {
        let got = self.nodes[v.0].value.len();
        if got != n {
            return Err(Error::shape(format!("{what}: expected length {n}, got {got}")));
        }
        Ok(())
    }

    fn same_len(&self, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if la != lb {
            return Err(Error::shape(format!("elementwise op on lengths {la} and {lb}")));
        }
        Ok(())
    }

    pub fn affine(&mut self, net: NetId, layer: usize, x: Var) -> Result<Var> {
        let l = self.layer(net.0, layer);
        self.check_len(x, l.in_dim(), "affine input")?;
        let mut out = Vec::new();
        l.affine_into(&self.nodes[x.0].value, true, &mut out);
        Ok(self.push(out, Op::Affine { net: net.0, layer, x: x.0 }))
    }

    pub fn linear(&mut self, net: NetId, layer: usize, x: Var) -> Result<Var> {
        let l = self.layer(net.0, layer);
        self.check_len(x, l.in_dim(), "linear input")?;
        let mut out = Vec::new();
        l.affine_into(&self.nodes[x.0].value, false, &mut out);
        Ok(self.push(out, Op::Linear { net: net.0, layer, x: x.0 }))
    }

    pub fn linear_t(&mut self, net: NetId, layer: usize, x: Var) -> Result<Var> {
        let l = self.layer(net.0, layer);
        self.check_len(x, l.out_dim(), "transposed input")?;
        let out = l.transpose_apply(&self.nodes[x.0].value);
        Ok(self.push(out, Op::LinearT { net: net.0, layer, x: x.0 }))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&p| act.apply(p)).collect();
        self.push(out, Op::Act { x: x.0, act })
    }

    pub fn activate_deriv(&mut self, x: Var, act: Activation) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&p| act.derivative(p)).collect();
        self.push(out, Op::ActDeriv { x: x.0, act })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let out =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).collect();
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let out =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x + y).collect();
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let out =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x - y).collect();
        Ok(self.push(out, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        self.push(out, Op::Scale { a: a.0, s })
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = crate::linalg::norm_sq(&self.nodes[a.0].value);
        self.push(vec![v], Op::SumSq { a: a.0 })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let v = dot(&self.nodes[a.0].value, &self.nodes[b.0].value);
        Ok(self.push(vec![v], Op::Dot { a: a.0, b: b.0 }))
    }

    /// Sum of equal-length nodes.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) =
            terms.split_first().ok_or_else(|| Error::usage("sum of zero terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Records the primal pass of `net` at `x`. With `with_derivs`, the
    /// activation derivatives needed by [`Tape::tangent`] and
    /// [`Tape::cotangent`] are recorded as well.
    pub fn forward(&mut self, net: NetId, x: Var, with_derivs: bool) -> Result<NetTrace> {
        let n_layers = self.nets[net.0].layers().len();
        let mut h = x;
        let mut pre = Vec::with_capacity(n_layers);
        let mut derivs = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let act = self.layer(net.0, k).activation;
            let p = self.affine(net, k, h)?;
            pre.push(p);
            if act == Activation::Identity {
                h = p;
                derivs.push(None);
            } else {
                h = self.activate(p, act);
                derivs.push(if with_derivs { Some(self.activate_deriv(p, act)) } else { None });
            }
        }
        Ok(NetTrace { net, input: x, output: h, pre, derivs })
    }

    fn require_derivs(&self, trace: &NetTrace) -> Result<()> {
        let nets = self.nets[trace.net.0];
        for (k, (d, l)) in trace.derivs.iter().zip(nets.layers()).enumerate() {
            if d.is_none() && l.activation != Activation::Identity {
                return Err(Error::usage(format!(
                    "layer {k}: trace recorded without activation derivatives"
                )));
            }
        }
        Ok(())
    }

    /// `J v` of the traced network at its recorded input.
    pub fn tangent(&mut self, trace: &NetTrace, v: Var) -> Result<Var> {
        self.require_derivs(trace)?;
        let mut t = v;
        for k in 0..trace.pre.len() {
            let tp = self.linear(trace.net, k, t)?;
            t = match trace.derivs[k] {
                Some(d) => self.mul(d, tp)?,
                None => tp,
            };
        }
        Ok(t)
    }

    /// `Jᵀ u` of the traced network at its recorded input.
    pub fn cotangent(&mut self, trace: &NetTrace, u: Var) -> Result<Var> {
        self.require_derivs(trace)?;
        let mut g = u;
        for k in (0..trace.pre.len()).rev() {
            if let Some(d) = trace.derivs[k] {
                g = self.mul(d, g)?;
            }
            g = self.linear_t(trace.net, k, g)?;
        }
        Ok(g)
    }

    /// Gradient of a scalar node with respect to all bound network parameters.
    pub fn grad_scalar(&self, loss: Var) -> Result<TapeGradient> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("loss variable was not recorded on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage("gradient requested for a non-scalar node"));
        }
        self.backward(&[(loss, vec![1.0])])
    }

    /// Reverse sweep seeded with the given output adjoints.
    pub fn backward(&self, seeds: &[(Var, Vec<f64>)]) -> Result<TapeGradient> {
        if self.nodes.is_empty() {
            return Err(Error::usage("empty tape"));
        }
        let mut adj: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), Vec::new);
        let mut top = 0;
        for (v, seed) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(Error::usage("seed variable was not recorded on this tape"));
            }
            if seed.len() != self.nodes[v.0].value.len() {
                return Err(Error::shape("seed length differs from node length"));
            }
            let a = &mut adj[v.0];
            if a.is_empty() {
                *a = seed.clone();
            } else {
                for (x, y) in a.iter_mut().zip(seed) {
                    *x += y;
                }
            }
            top = top.max(v.0);
        }
        let mut params: Vec<ParamGradient> =
            self.nets.iter().map(|n| ParamGradient::zeros_like(n)).collect();

        for i in (0..=top).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::Affine { net, layer, x } | Op::Linear { net, layer, x } => {
                    let l = self.layer(net, layer);
                    let xv = &self.nodes[x].value;
                    let pg = &mut params[net];
                    let cols = l.in_dim();
                    let wg = pg.weights[layer].as_mut_slice();
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        for (w, xj) in wg[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                            *w += gr * xj;
                        }
                    }
                    if matches!(self.nodes[i].op, Op::Affine { .. }) {
                        for (b, gr) in pg.biases[layer].iter_mut().zip(&g) {
                            *b += gr;
                        }
                    }
                    let back = l.transpose_apply(&g);
                    accumulate(&mut adj[x], &back);
                }
                Op::LinearT { net, layer, x } => {
                    let l = self.layer(net, layer);
                    let xv = &self.nodes[x].value;
                    let cols = l.in_dim();
                    let wg = params[net].weights[layer].as_mut_slice();
                    for (r, &xr) in xv.iter().enumerate() {
                        if xr == 0.0 {
                            continue;
                        }
                        for (w, gj) in wg[r * cols..(r + 1) * cols].iter_mut().zip(&g) {
                            *w += xr * gj;
                        }
                    }
                    let mut back = Vec::new();
                    l.affine_into(&g, false, &mut back);
                    accumulate(&mut adj[x], &back);
                }
                Op::Act { x, act } => {
                    let back: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x].value)
                        .map(|(gi, &p)| gi * act.derivative(p))
                        .collect();
                    accumulate(&mut adj[x], &back);
                }
                Op::ActDeriv { x, act } => {
                    if !act.is_piecewise_linear() {
                        let back: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[x].value)
                            .map(|(gi, &p)| gi * act.second_derivative(p))
                            .collect();
                        accumulate(&mut adj[x], &back);
                    }
                }
                Op::Mul { a, b } => {
                    let ga: Vec<f64> =
                        g.iter().zip(&self.nodes[b].value).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> =
                        g.iter().zip(&self.nodes[a].value).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj[a], &ga);
                    accumulate(&mut adj[b], &gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj[a], &g);
                    accumulate(&mut adj[b], &g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut adj[a], &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut adj[b], &neg);
                }
                Op::Scale { a, s } => {
                    let back: Vec<f64> = g.iter().map(|x| x * s).collect();
                    accumulate(&mut adj[a], &back);
                }
                Op::SumSq { a } => {
                    let back: Vec<f64> =
                        self.nodes[a].value.iter().map(|x| 2.0 * g[0] * x).collect();
                    accumulate(&mut adj[a], &back);
                }
                Op::Dot { a, b } => {
                    let ga: Vec<f64> = self.nodes[b].value.iter().map(|x| g[0] * x).collect();
                    let gb: Vec<f64> = self.nodes[a].value.iter().map(|x| g[0] * x).collect();
                    accumulate(&mut adj[a], &ga);
                    accumulate(&mut adj[b], &gb);
                }
            }
            adj[i] = g;
        }
        for (i, a) in adj.iter_mut().enumerate() {
            if a.is_empty() {
                *a = vec![0.0; self.nodes[i].value.len()];
            }
        }
        Ok(TapeGradient { params, adjoints: adj })
    }
}

#[inline]
fn accumulate(dst: &mut Vec<f64>, src: &[f64]) {
    if dst.is_empty() {
        dst.extend_from_slice(src);
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}
