//! AdamW training of an encoder/decoder pair under reconstruction loss plus
//! an optional geometric regularizer on the decoder.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Activation, Mlp};
use crate::regularizers::{
    batch_traces, combine_traces, global_iso_combine, record_traces, LossBreakdown, ProbeSet,
    TraceEstimator, TraceLoss, TraceStats, TraceVars,
};
use crate::tape::{ParamGradient, Tape, Var};

pub const CHECKPOINT_VERSION: u32 = 1;
/// Minimum decrease of the validation loss that counts as an improvement.
pub const PLATEAU_MIN_DELTA: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    Globiso,
    Lociso,
    Conf,
    Constconf,
}

impl Regularizer {
    pub const ALL: [Regularizer; 5] =
        [Regularizer::None, Regularizer::Globiso, Regularizer::Lociso, Regularizer::Conf, Regularizer::Constconf];

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Globiso => "globiso",
            Regularizer::Lociso => "lociso",
            Regularizer::Conf => "conf",
            Regularizer::Constconf => "constconf",
        }
    }

    pub fn trace_loss(self) -> Option<TraceLoss> {
        match self {
            Regularizer::Lociso => Some(TraceLoss::LocalIsometry),
            Regularizer::Conf => Some(TraceLoss::NonlinearConformal),
            Regularizer::Constconf => Some(TraceLoss::ConstantConformal),
            Regularizer::None | Regularizer::Globiso => None,
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regularizer::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown regularizer {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub enabled: bool,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { enabled: false, factor: 0.5, patience: 10, min_lr: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub regularizer: Regularizer,
    /// Required whenever a regularizer is selected.
    pub lambda_geo: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rademacher probes per point.
    pub probes: usize,
    /// Full-Jacobian traces instead of probes (honoured for latent dim ≤ 3).
    pub exact_trace: bool,
    pub detach_codes: bool,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    pub val_fraction: f64,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            regularizer: Regularizer::None,
            lambda_geo: None,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            probes: 8,
            exact_trace: false,
            detach_codes: false,
            scheduler: SchedulerConfig::default(),
            seed: 0,
            val_fraction: 0.2,
            hidden: vec![50, 50, 50],
            latent_dim: 2,
            activation: Activation::Relu,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(self.epochs >= 1, format!("epochs: must be at least 1, got {}", self.epochs));
        need(self.batch_size >= 1, format!("batch_size: must be at least 1, got {}", self.batch_size));
        if self.regularizer == Regularizer::Globiso {
            need(
                self.batch_size >= 2,
                format!("batch_size: globiso needs at least 2, got {}", self.batch_size),
            );
        }
        need(self.lr > 0.0 && self.lr.is_finite(), format!("lr: must be positive, got {}", self.lr));
        need(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            format!("weight_decay: must be non-negative, got {}", self.weight_decay),
        );
        need((0.0..1.0).contains(&self.beta1), format!("beta1: must lie in [0, 1), got {}", self.beta1));
        need((0.0..1.0).contains(&self.beta2), format!("beta2: must lie in [0, 1), got {}", self.beta2));
        need(self.eps > 0.0, format!("eps: must be positive, got {}", self.eps));
        need(self.probes >= 1, format!("probes: must be at least 1, got {}", self.probes));
        need(
            self.regularizer == Regularizer::None || self.lambda_geo.is_some(),
            format!("lambda_geo: required for regularizer {}", self.regularizer),
        );
        if let Some(l) = self.lambda_geo {
            need(l >= 0.0 && l.is_finite(), format!("lambda_geo: must be non-negative, got {l}"));
        }
        let s = &self.scheduler;
        need(s.factor > 0.0 && s.factor < 1.0, format!("scheduler.factor: must lie in (0, 1), got {}", s.factor));
        need(s.patience >= 1, format!("scheduler.patience: must be at least 1, got {}", s.patience));
        need(s.min_lr >= 0.0, format!("scheduler.min_lr: must be non-negative, got {}", s.min_lr));
        need(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            format!("val_fraction: must lie in (0, 1), got {}", self.val_fraction),
        );
        need(self.latent_dim >= 1, "latent_dim: must be at least 1".to_string());
        need(self.hidden.iter().all(|&h| h >= 1), "hidden: layer widths must be positive".to_string());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn lambda(&self) -> f64 {
        match self.regularizer {
            Regularizer::None => 0.0,
            _ => self.lambda_geo.unwrap_or(0.0),
        }
    }

    pub fn uses_exact_trace(&self) -> bool {
        self.exact_trace && self.latent_dim <= 3
    }

    pub fn objective(&self) -> Objective {
        Objective {
            regularizer: self.regularizer,
            lambda_geo: self.lambda(),
            detach_codes: self.detach_codes,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Fresh encoder and decoder for `data_dim`-dimensional data. Hidden
    /// layers use `activation`; both output layers are affine.
    pub fn init_models(&self, data_dim: usize) -> Result<(Mlp, Mlp)> {
        let mut enc_dims = vec![data_dim];
        enc_dims.extend(&self.hidden);
        enc_dims.push(self.latent_dim);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let mut acts = vec![self.activation; self.hidden.len()];
        acts.push(Activation::Identity);
        let enc = Mlp::init(&enc_dims, &acts, self.seed)?;
        let dec = Mlp::init(&dec_dims, &acts, self.seed.wrapping_add(1))?;
        Ok((enc, dec))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One AdamW update: `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, optimizer state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - h.beta1.powf(t);
    let bc2 = 1.0 - h.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        if h.weight_decay != 0.0 {
            params[i] -= h.lr * h.weight_decay * params[i];
        }
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without improvement, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, cfg: &SchedulerConfig) -> Self {
        PlateauScheduler {
            lr,
            factor: cfg.factor,
            patience: cfg.patience,
            min_lr: cfg.min_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        match self.best {
            Some(b) if val_loss >= b - PLATEAU_MIN_DELTA => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr = (self.lr * self.factor).max(self.min_lr);
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Loss composition of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub regularizer: Regularizer,
    pub lambda_geo: f64,
    pub detach_codes: bool,
}

/// Per-point probe sets, or `None` for exact traces.
pub type Probes<'p> = Option<&'p [ProbeSet]>;

/// Value of the objective on a batch, evaluated without the tape.
pub fn objective_value(
    enc: &Mlp,
    dec: &Mlp,
    batch: &[Vec<f64>],
    probes: Probes<'_>,
    obj: &Objective,
) -> Result<(LossBreakdown, Option<f64>)> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let codes = batch.iter().map(|x| enc.forward(x)).collect::<Result<Vec<_>>>()?;
    let mut recon = 0.0;
    for (x, z) in batch.iter().zip(&codes) {
        let y = dec.forward(z)?;
        recon += x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    recon /= batch.len() as f64;
    let geo = match obj.regularizer {
        Regularizer::None => None,
        Regularizer::Globiso => {
            let decoded = codes.iter().map(|z| dec.forward(z)).collect::<Result<Vec<_>>>()?;
            Some(global_iso_combine(&codes, &decoded)?.0)
        }
        r => {
            let est = match probes {
                Some(p) => TraceEstimator::Hutchinson(p),
                None => TraceEstimator::Exact,
            };
            let stats = batch_traces(dec, &codes, est)?;
            Some(combine_traces(r.trace_loss().expect("trace regularizer"), dec.input_dim(), &stats)?.0)
        }
    };
    Ok((LossBreakdown::new(recon, geo.unwrap_or(0.0), obj.lambda_geo), geo))
}

struct PointTape<'a> {
    tape: Tape<'a>,
    recon: Var,
    /// Code and decoding seen by the global-isometry term.
    code: Var,
    decoded: Var,
    traces: Option<TraceVars>,
}

fn record_point<'a>(
    enc: &'a Mlp,
    dec: &'a Mlp,
    x: &[f64],
    probes: Option<&ProbeSet>,
    obj: &Objective,
) -> Result<PointTape<'a>> {
    let mut tape = Tape::new();
    let e = tape.bind(enc);
    let d = tape.bind(dec);
    let xv = tape.leaf(x.to_vec());
    let et = tape.forward(e, xv, false)?;
    let trace_kind = obj.regularizer.trace_loss().is_some();
    let shared = !obj.detach_codes;
    let dt = tape.forward(d, et.output, trace_kind && shared)?;
    let diff = tape.sub(dt.output, xv)?;
    let recon = tape.sum_sq(diff);
    let (mut code, mut decoded, mut traces) = (et.output, dt.output, None);
    match obj.regularizer {
        Regularizer::None => {}
        Regularizer::Globiso => {
            if !shared {
                let zl = tape.leaf(tape.value(et.output).to_vec());
                let yt = tape.forward(d, zl, false)?;
                code = zl;
                decoded = yt.output;
            }
        }
        _ => {
            let gt = if shared {
                dt
            } else {
                let zl = tape.leaf(tape.value(et.output).to_vec());
                tape.forward(d, zl, true)?
            };
            traces = Some(record_traces(&mut tape, &gt, probes, true)?);
        }
    }
    Ok(PointTape { tape, recon, code, decoded, traces })
}

/// Objective value with its gradients for the encoder and decoder.
#[derive(Debug)]
pub struct ObjectiveGrad {
    pub loss: LossBreakdown,
    pub geometric: Option<f64>,
    pub enc: ParamGradient,
    pub dec: ParamGradient,
}

/// Records one tape per batch point, combines the batch-level terms, and sums
/// the per-point reverse sweeps in index order.
pub fn objective_grad(
    enc: &Mlp,
    dec: &Mlp,
    batch: &[Vec<f64>],
    probes: Probes<'_>,
    obj: &Objective,
) -> Result<ObjectiveGrad> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    if let Some(p) = probes {
        if p.len() != batch.len() {
            return Err(Error::shape(format!("{} probe sets for {} points", p.len(), batch.len())));
        }
    }
    let points = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| record_point(enc, dec, x, probes.map(|p| &p[i]), obj))
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len() as f64;
    let recon = points.iter().map(|p| p.tape.scalar(p.recon)).sum::<f64>() / b;
    if !recon.is_finite() {
        return Err(Error::NonFinite("term recon".into()));
    }
    let lambda = obj.lambda_geo;
    let mut seeds: Vec<Vec<(Var, Vec<f64>)>> = points.iter().map(|p| vec![(p.recon, vec![1.0 / b])]).collect();
    let geometric = match obj.regularizer {
        Regularizer::None => None,
        Regularizer::Globiso => {
            let codes: Vec<Vec<f64>> = points.iter().map(|p| p.tape.value(p.code).to_vec()).collect();
            let decoded: Vec<Vec<f64>> = points.iter().map(|p| p.tape.value(p.decoded).to_vec()).collect();
            let (value, dz, dy) = global_iso_combine(&codes, &decoded)?;
            if lambda != 0.0 {
                for (i, p) in points.iter().enumerate() {
                    let sz = dz[i].iter().map(|g| lambda * g).collect();
                    let sy = dy[i].iter().map(|g| lambda * g).collect();
                    seeds[i].push((p.code, sz));
                    seeds[i].push((p.decoded, sy));
                }
            }
            Some(value)
        }
        r => {
            let vars: Vec<TraceVars> = points.iter().map(|p| p.traces.expect("traces recorded")).collect();
            let stats: Vec<TraceStats> = points
                .iter()
                .zip(&vars)
                .map(|(p, v)| TraceStats {
                    tr_r: p.tape.scalar(v.tr_r),
                    tr_r2: p.tape.scalar(v.tr_r2.expect("second trace recorded")),
                })
                .collect();
            let (value, adj) = combine_traces(r.trace_loss().expect("trace regularizer"), dec.input_dim(), &stats)?;
            if lambda != 0.0 {
                for (i, v) in vars.iter().enumerate() {
                    seeds[i].push((v.tr_r, vec![lambda * adj[i].d_tr_r]));
                    seeds[i].push((v.tr_r2.expect("second trace recorded"), vec![lambda * adj[i].d_tr_r2]));
                }
            }
            Some(value)
        }
    };
    if let Some(g) = geometric {
        if !g.is_finite() {
            return Err(Error::NonFinite("term geometric".into()));
        }
    }
    let grads = points
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(p, s)| p.tape.backward(s))
        .collect::<Result<Vec<_>>>()?;
    let mut ge = ParamGradient::zeros_like(enc);
    let mut gd = ParamGradient::zeros_like(dec);
    for g in &grads {
        ge.add_assign(&g.params[0])?;
        gd.add_assign(&g.params[1])?;
    }
    Ok(ObjectiveGrad {
        loss: LossBreakdown::new(recon, geometric.unwrap_or(0.0), lambda),
        geometric,
        enc: ge,
        dec: gd,
    })
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training reconstruction loss.
    pub recon: f64,
    /// Mean over batches of the geometric term; absent without a regularizer.
    pub geo: Option<f64>,
    pub geo_median: Option<f64>,
    pub val_recon: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
    /// `recon + λ·geo`.
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: RunConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub optimizer: AdamState,
    pub scheduler: PlateauScheduler,
}

impl Checkpoint {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::usage(format!("unsupported checkpoint version {}", ck.format_version)));
        }
        if ck.optimizer.m.len() != ck.encoder.num_params() + ck.decoder.num_params() {
            return Err(Error::shape("optimizer state does not match the networks"));
        }
        Ok(ck)
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
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

/// Model, optimizer and scheduler state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub enc: Mlp,
    pub dec: Mlp,
    pub opt: AdamState,
    pub sched: PlateauScheduler,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken in this process.
    pub steps: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, data_dim: usize) -> Result<Self> {
        config.validate()?;
        let (enc, dec) = config.init_models(data_dim)?;
        let n = enc.num_params() + dec.num_params();
        let sched = PlateauScheduler::new(config.lr, &config.scheduler);
        Ok(Trainer { config, enc, dec, opt: AdamState::new(n), sched, epoch: 0, steps: 0 })
    }

    /// Continues from `ck`; `config` may extend `epochs` or change runtime
    /// options, but the architecture comes from the checkpoint.
    pub fn resume(ck: Checkpoint, config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            enc: ck.encoder,
            dec: ck.decoder,
            opt: ck.optimizer,
            sched: ck.scheduler,
            epoch: ck.epoch,
            steps: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            encoder: self.enc.clone(),
            decoder: self.dec.clone(),
            optimizer: self.opt.clone(),
            scheduler: self.sched.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[Vec<f64>], probes: Probes<'_>) -> Result<ObjectiveGrad> {
        let og = objective_grad(&self.enc, &self.dec, batch, probes, &self.config.objective())?;
        let mut grads = og.enc.to_flat();
        grads.extend(og.dec.to_flat());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("term gradient".into()));
        }
        let n_enc = self.enc.num_params();
        let mut params = self.enc.params();
        params.extend(self.dec.params());
        let mut h = self.config.adam();
        h.lr = self.sched.lr;
        adamw_step(&mut params, &grads, &mut self.opt, &h)?;
        self.enc.set_params(&params[..n_enc])?;
        self.dec.set_params(&params[n_enc..])?;
        self.steps += 1;
        Ok(og)
    }

    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let sample_probes = self.config.regularizer.trace_loss().is_some() && !self.config.uses_exact_trace();
        let lr = self.sched.lr;
        let (mut recon_sum, mut geo_vals) = (0.0, Vec::new());
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| train.samples[i].clone()).collect();
            let probes = if sample_probes {
                Some(
                    (0..batch.len())
                        .map(|_| ProbeSet::sample(self.config.probes, self.config.latent_dim, &mut rng))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let og = self.step(&batch, probes.as_deref()).map_err(|e| match e {
                Error::NonFinite(term) => {
                    Error::NonFinite(format!("epoch {epoch}, batch {}, {term}", bi + 1))
                }
                other => other,
            })?;
            recon_sum += og.loss.recon * batch.len() as f64;
            if let Some(g) = og.geometric {
                geo_vals.push(g);
            }
        }
        let recon = recon_sum / train.len() as f64;
        let val_recon = crate::regularizers::recon_loss(&self.enc, &self.dec, &val.samples)?;
        if !val_recon.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}, validation, term recon")));
        }
        if self.config.scheduler.enabled {
            self.sched.step(val_recon);
        }
        self.epoch = epoch;
        let geo = (!geo_vals.is_empty()).then(|| geo_vals.iter().sum::<f64>() / geo_vals.len() as f64);
        Ok(EpochRecord {
            epoch,
            recon,
            geo,
            geo_median: median(&geo_vals),
            val_recon,
            lr,
            seconds: start.elapsed().as_secs_f64(),
            total: recon + self.config.lambda() * geo.unwrap_or(0.0),
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run<F>(&mut self, train: &Dataset, val: &Dataset, mut on_epoch: F) -> Result<RunMetrics>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        let mut metrics = RunMetrics::default();
        while !self.is_done() {
            let rec = self.run_epoch(train, val)?;
            on_epoch(self, &rec)?;
            metrics.records.push(rec);
        }
        Ok(metrics)
    }
}

/// Train/validation datasets according to the configured split.
pub fn split_dataset(config: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    let sp = ds.split(config.val_fraction, config.seed)?;
    Ok((ds.subset(&sp.train), ds.subset(&sp.val)))
}

pub struct TrainOutput {
    pub enc: Mlp,
    pub dec: Mlp,
    pub metrics: RunMetrics,
}

/// Full run on `ds` (expected standardized) with the configured split.
pub fn train(config: &RunConfig, ds: &Dataset) -> Result<TrainOutput> {
    let (tr, va) = split_dataset(config, ds)?;
    let mut t = Trainer::new(config.clone(), ds.dim())?;
    let metrics = t.run(&tr, &va, |_, _| Ok(()))?;
    Ok(TrainOutput { enc: t.enc, dec: t.dec, metrics })
}

/// Both loss terms on the initial model and the intensity that equalizes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub regularizer: Regularizer,
    pub recon: f64,
    pub geometric: f64,
    pub lambda_geo: f64,
}

/// Evaluates the initial model over the training set in configured batches
/// and proposes `λ = recon / geometric`.
pub fn calibrate_intensity(config: &RunConfig, train: &Dataset) -> Result<Calibration> {
    if config.regularizer == Regularizer::None {
        return Err(Error::usage("no regularizer to calibrate"));
    }
    let mut probe_cfg = config.clone();
    probe_cfg.lambda_geo = Some(probe_cfg.lambda_geo.unwrap_or(0.0));
    probe_cfg.validate()?;
    let (enc, dec) = config.init_models(train.dim())?;
    let obj = probe_cfg.objective();
    let mut rng = epoch_rng(config.seed, 0);
    let (mut recon, mut geo, mut count) = (0.0, 0.0, 0usize);
    for chunk in train.samples.chunks(config.batch_size) {
        if config.regularizer == Regularizer::Globiso && chunk.len() < 2 {
            continue;
        }
        let probes = if config.regularizer.trace_loss().is_some() && !config.uses_exact_trace() {
            Some(
                (0..chunk.len())
                    .map(|_| ProbeSet::sample(config.probes, config.latent_dim, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let (lb, g) = objective_value(&enc, &dec, chunk, probes.as_deref(), &obj)?;
        recon += lb.recon;
        geo += g.unwrap_or(0.0);
        count += 1;
    }
    if count == 0 {
        return Err(Error::usage("training set too small to calibrate"));
    }
    recon /= count as f64;
    geo /= count as f64;
    if !(geo > 0.0 && geo.is_finite()) {
        return Err(Error::Degenerate(format!("initial geometric term {geo} is not positive")));
    }
    Ok(Calibration { regularizer: config.regularizer, recon, geometric: geo, lambda_geo: recon / geo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::swiss_roll;
    use crate::regularizers::exact_traces;

    fn hyper(lr: f64, wd: f64) -> AdamHyper {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = vec![0.3, -1.2, 4.0];
        let mut st = AdamState::new(3);
        for _ in 0..5 {
            adamw_step(&mut p, &[0.0; 3], &mut st, &hyper(1e-2, 0.0)).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn first_step_formula() {
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec![1.0, 1.0, 1.0];
        let mut st = AdamState::new(3);
        let h = hyper(1e-3, 0.0);
        adamw_step(&mut p, &g, &mut st, &h).unwrap();
        for i in 0..3 {
            // m̂ = g, v̂ = g² after one step
            let m_hat = (1.0 - 0.9) * g[i] / (1.0 - 0.9);
            let v_hat = (1.0 - 0.999) * g[i] * g[i] / (1.0 - 0.999);
            let expect = 1.0 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
            assert_eq!(p[i], expect);
            assert!((p[i] - 1.0).abs() <= 1e-3 * (1.0 + 1e-12));
        }
        assert!(adamw_step(&mut p, &[0.0; 2], &mut st, &h).is_err());
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p: Vec<f64> = vec![0.6, -0.8];
        let mut st = AdamState::new(2);
        for _ in 0..500 {
            let g = p.clone();
            adamw_step(&mut p, &g, &mut st, &hyper(0.1, 0.0)).unwrap();
        }
        assert!(p.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3);
    }

    /// Textbook Adam, written independently of `adamw_step`.
    fn plain_adam(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64) {
        for i in 0..p.len() {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }

    #[test]
    fn adamw_without_decay_is_adam() {
        let grad = |p: &[f64]| vec![p[0] - 2.0 * p[1], 3.0 * p[1].powi(3) - p[0], p[2].sin()];
        let mut a = vec![1.0, 0.5, -0.3];
        let mut b = a.clone();
        let mut st = AdamState::new(3);
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 1..=200 {
            let ga = grad(&a);
            adamw_step(&mut a, &ga, &mut st, &hyper(1e-2, 0.0)).unwrap();
            let gb = grad(&b);
            plain_adam(&mut b, &gb, &mut m, &mut v, t, 1e-2);
        }
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut p = vec![2.0];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut st, &hyper(0.1, 0.5)).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn plateau_scheduler_examples() {
        let cfg = SchedulerConfig { enabled: true, factor: 0.5, patience: 3, min_lr: 1e-4 };
        let mut s = PlateauScheduler::new(1e-3, &cfg);
        for v in [5.0, 4.0, 3.0, 2.0, 1.0] {
            assert_eq!(s.step(v), 1e-3);
        }
        let mut s = PlateauScheduler::new(1e-3, &cfg);
        let lrs: Vec<f64> = (0..4).map(|_| s.step(1.0)).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 5e-4]);
        for _ in 0..100 {
            s.step(1.0);
        }
        assert_eq!(s.lr, 1e-4);
    }

    #[test]
    fn config_validation_lists_every_error() {
        let cfg = RunConfig {
            regularizer: Regularizer::Globiso,
            epochs: 0,
            batch_size: 1,
            lr: -1.0,
            ..RunConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(errs)) => {
                let joined = errs.join("\n");
                for key in ["epochs", "batch_size", "lr", "lambda_geo"] {
                    assert!(joined.contains(&format!("{key}:")), "{joined}");
                }
            }
            other => panic!("{other:?}"),
        }
        let bad: std::result::Result<RunConfig, _> = serde_json::from_str(r#"{"epochs": 3, "bogus": 1}"#);
        assert!(bad.is_err());
        let ok: RunConfig = serde_json::from_str(r#"{"regularizer": "conf", "lambda_geo": 0.5}"#).unwrap();
        assert_eq!(ok.batch_size, 64);
        ok.validate().unwrap();
    }

    fn small_models(seed: u64) -> (Mlp, Mlp) {
        let cfg = RunConfig {
            hidden: vec![6, 5],
            activation: Activation::Tanh,
            seed,
            ..RunConfig::default()
        };
        cfg.init_models(3).unwrap()
    }

    fn small_batch(n: usize, seed: u64) -> Vec<Vec<f64>> {
        swiss_roll(n, seed).unwrap().standardize().unwrap().samples
    }

    /// Central differences of `objective_value` in every encoder and decoder
    /// parameter.
    fn fd_grad(enc: &Mlp, dec: &Mlp, batch: &[Vec<f64>], probes: Probes<'_>, obj: &Objective) -> Vec<f64> {
        let h = 1e-6;
        let total = |e: &Mlp, d: &Mlp| objective_value(e, d, batch, probes, obj).unwrap().0.total;
        let mut out = Vec::new();
        let pe = enc.params();
        for i in 0..pe.len() {
            let (mut a, mut b) = (enc.clone(), enc.clone());
            let mut q = pe.clone();
            q[i] += h;
            a.set_params(&q).unwrap();
            q[i] -= 2.0 * h;
            b.set_params(&q).unwrap();
            out.push((total(&a, dec) - total(&b, dec)) / (2.0 * h));
        }
        let pd = dec.params();
        for i in 0..pd.len() {
            let (mut a, mut b) = (dec.clone(), dec.clone());
            let mut q = pd.clone();
            q[i] += h;
            a.set_params(&q).unwrap();
            q[i] -= 2.0 * h;
            b.set_params(&q).unwrap();
            out.push((total(enc, &a) - total(enc, &b)) / (2.0 * h));
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / scale.max(1e-12)
    }

    #[test]
    fn gradient_fidelity_every_regularizer() {
        let batch = small_batch(5, 11);
        let (enc, dec) = small_models(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probes: Vec<ProbeSet> = (0..5).map(|_| ProbeSet::sample(4, 2, &mut rng).unwrap()).collect();
        for reg in Regularizer::ALL {
            for exact in [false, true] {
                let obj = Objective { regularizer: reg, lambda_geo: 0.7, detach_codes: false };
                let p = if exact { None } else { Some(&probes[..]) };
                let og = objective_grad(&enc, &dec, &batch, p, &obj).unwrap();
                let (lb, _) = objective_value(&enc, &dec, &batch, p, &obj).unwrap();
                assert!((og.loss.total - lb.total).abs() < 1e-12 * (1.0 + lb.total));
                let mut g = og.enc.to_flat();
                g.extend(og.dec.to_flat());
                let fd = fd_grad(&enc, &dec, &batch, p, &obj);
                let e = rel_err(&g, &fd);
                assert!(e < 1e-3, "{reg} exact={exact}: relative error {e}");
            }
        }
    }

    #[test]
    fn detached_codes_stop_geometric_encoder_gradient() {
        let batch = small_batch(4, 2);
        let (enc, dec) = small_models(5);
        let recon_only = Objective { regularizer: Regularizer::None, lambda_geo: 0.0, detach_codes: false };
        let base = objective_grad(&enc, &dec, &batch, None, &recon_only).unwrap();
        for reg in [Regularizer::Conf, Regularizer::Globiso] {
            let obj = Objective { regularizer: reg, lambda_geo: 2.0, detach_codes: true };
            let og = objective_grad(&enc, &dec, &batch, None, &obj).unwrap();
            assert!(rel_err(&og.enc.to_flat(), &base.enc.to_flat()) < 1e-13);
            let attached = objective_grad(&enc, &dec, &batch, None, &Objective { detach_codes: false, ..obj }).unwrap();
            assert!(rel_err(&og.dec.to_flat(), &attached.dec.to_flat()) < 1e-13);
            assert!(rel_err(&og.enc.to_flat(), &attached.enc.to_flat()) > 1e-6);
        }
    }

    #[test]
    fn monitored_conformal_term_matches_exact_path() {
        // λ = 0: the regularizer is evaluated but does not act on training
        let batch = small_batch(6, 9);
        let (enc, dec) = small_models(1);
        let obj = Objective { regularizer: Regularizer::Lociso, lambda_geo: 0.0, detach_codes: false };
        let exact = objective_grad(&enc, &dec, &batch, None, &obj).unwrap().geometric.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals: Vec<f64> = (0..200)
            .map(|_| {
                let p: Vec<ProbeSet> = (0..6).map(|_| ProbeSet::sample(8, 2, &mut rng).unwrap()).collect();
                objective_grad(&enc, &dec, &batch, Some(&p), &obj).unwrap().geometric.unwrap()
            })
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean}, exact {exact}, se {se}");
        let g = objective_grad(&enc, &dec, &batch, None, &obj).unwrap();
        let r = objective_grad(&enc, &dec, &batch, None, &Objective { regularizer: Regularizer::None, ..obj }).unwrap();
        assert_eq!(g.dec.to_flat(), r.dec.to_flat());
        // and the exact path agrees with a direct Jacobian evaluation
        let codes: Vec<Vec<f64>> = batch.iter().map(|x| enc.forward(x).unwrap()).collect();
        let stats: Vec<TraceStats> = codes.iter().map(|z| exact_traces(&dec, z).unwrap()).collect();
        let direct = combine_traces(TraceLoss::LocalIsometry, 2, &stats).unwrap().0;
        assert!((direct - exact).abs() < 1e-12);
    }

    fn tiny_config(reg: Regularizer) -> RunConfig {
        RunConfig {
            regularizer: reg,
            lambda_geo: Some(0.1),
            epochs: 1,
            batch_size: 5,
            hidden: vec![8],
            probes: 2,
            seed: 7,
            ..RunConfig::default()
        }
    }

    #[test]
    fn one_epoch_bookkeeping() {
        let ds = swiss_roll(10, 1).unwrap().standardize().unwrap();
        let cfg = tiny_config(Regularizer::Conf);
        let mut t = Trainer::new(cfg, 3).unwrap();
        let metrics = t.run(&ds, &ds.subset(&[0, 1]), |_, _| Ok(())).unwrap();
        assert_eq!(t.steps, 2);
        assert_eq!(t.opt.step, 2);
        assert_eq!(metrics.records.len(), 1);
        let r = &metrics.records[0];
        assert_eq!(r.epoch, 1);
        assert_eq!(r.total, r.recon + 0.1 * r.geo.unwrap());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let ds = swiss_roll(40, 2).unwrap().standardize().unwrap();
        let mut cfg = tiny_config(Regularizer::Conf);
        cfg.epochs = 3;
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.enc.params(), b.enc.params());
        assert_eq!(a.dec.params(), b.dec.params());

        let (tr, va) = split_dataset(&cfg, &ds).unwrap();
        let mut first = cfg.clone();
        first.epochs = 1;
        let mut t = Trainer::new(first, 3).unwrap();
        t.run(&tr, &va, |_, _| Ok(())).unwrap();
        let ck: Checkpoint = serde_json::from_str(&serde_json::to_string(&t.checkpoint()).unwrap()).unwrap();
        let mut r = Trainer::resume(ck, cfg.clone()).unwrap();
        let m = r.run(&tr, &va, |_, _| Ok(())).unwrap();
        assert_eq!(m.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(r.enc.params(), a.enc.params());
        assert_eq!(r.dec.params(), a.dec.params());
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let mut ds = swiss_roll(10, 1).unwrap().standardize().unwrap();
        ds.samples[3][0] = 1e300;
        let mut t = Trainer::new(tiny_config(Regularizer::None), 3).unwrap();
        let e = t.run_epoch(&ds, &ds.subset(&[0, 1])).unwrap_err().to_string();
        assert!(e.contains("epoch 1") && e.contains("batch") && e.contains("recon"), "{e}");
    }

    #[test]
    fn calibration_matches_magnitudes() {
        let ds = swiss_roll(50, 3).unwrap().standardize().unwrap();
        let mut cfg = tiny_config(Regularizer::Conf);
        cfg.lambda_geo = None;
        let c = calibrate_intensity(&cfg, &ds).unwrap();
        assert!(c.geometric > 0.0 && c.recon > 0.0);
        assert!((c.lambda_geo * c.geometric - c.recon).abs() < 1e-12 * c.recon);
        assert!(calibrate_intensity(&tiny_config(Regularizer::None), &ds).is_err());
    }

    #[test]
    fn baseline_reconstruction_improves() {
        let ds = swiss_roll(200, 5).unwrap().standardize().unwrap();
        let cfg = RunConfig {
            epochs: 15,
            batch_size: 16,
            hidden: vec![16, 16],
            lr: 1e-2,
            seed: 1,
            ..RunConfig::default()
        };
        let out = train(&cfg, &ds).unwrap();
        let r = &out.metrics.records;
        assert!(r.last().unwrap().val_recon < 0.5 * r[0].val_recon);
    }
}
