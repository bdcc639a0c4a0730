//! Command-line front end: `generate`, `train`, `diagnose`, `plot`, `compare`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analytic::StereographicSphere;
use crate::data::{swiss_roll, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{
    diagnose, load_diagnostics_csv, median_abs_interior, median_calibrated_interior, sphere_oracle,
    summarize_kappa, Bandwidth, Diagnostics, KappaSummary, MeanStd, DEFAULT_K,
};
use crate::plot;
use crate::training::{
    calibrate_intensity, split_dataset, Checkpoint, Regularizer, RunConfig, Trainer,
};

pub const SEED_ENV: &str = "CONFAE_SEED";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "confae", version, about = "Geometrically regularized autoencoders and their decoder diagnostics")]
pub struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    pub single_thread: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a Swiss roll and write it as CSV.
    Generate(GenerateArgs),
    /// Train an autoencoder.
    Train(TrainArgs),
    /// Conformal factor, curvature and condition numbers of a trained decoder.
    Diagnose(DiagnoseArgs),
    /// SVG figures from a diagnostics file.
    Plot(PlotArgs),
    /// Side-by-side condition-number summaries of several runs.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
    /// Write standardized coordinates.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-execute the run described by a manifest.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Dataset CSV; a standardized Swiss roll is sampled when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sample count for the sampled Swiss roll.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub regularizer: Option<Regularizer>,
    #[arg(long)]
    pub lambda_geo: Option<f64>,
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub exact_trace: bool,
    #[arg(long)]
    pub detach_codes: bool,
    /// Propose an intensity from the initial model and exit.
    #[arg(long)]
    pub calibrate_intensity: bool,
    /// Standardize the dataset file before training.
    #[arg(long)]
    pub standardize: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Dotted-key override, e.g. `scheduler.patience=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Oracle {
    None,
    Sphere,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Points to encode; defaults to the run's validation set.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value = "auto")]
    pub bandwidth: String,
    #[arg(long, value_enum, default_value_t = Oracle::None)]
    pub oracle: Oracle,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// diagnostics.csv, or a directory containing it.
    pub diagnostics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Run directories (or kappa_summary.json files).
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl clap::ValueEnum for Regularizer {
    fn value_variants<'a>() -> &'a [Self] {
        &Regularizer::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

/// Parses arguments, runs the command, and maps errors to exit codes:
/// 1 for invalid input or configuration, 2 for failures while computing.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.single_thread {
        // fails only if a pool already exists, which then keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a, cli.single_thread),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Plot(a) => cmd_plot(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// `sha256` over git's blob framing `"blob <len>\0" + content`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?.unwrap_or(0);
    let mut ds = swiss_roll(a.n, seed)?;
    if a.standardize {
        ds = ds.standardize()?;
    }
    ds.save_csv(&a.out)?;
    let (mean, std) = ds.feature_stats();
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    for (name, (m, s)) in ["x", "y", "z"].iter().zip(mean.iter().zip(&std)) {
        println!("  {name}: mean {m:.6}  std {s:.6}");
    }
    Ok(())
}

/// Sets `a.b.c = value` in a JSON object; the value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(cfg: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = cfg;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::usage(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Err(Error::usage("empty override key"))
}

/// Where the training data came from, enough to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Standardized Swiss roll sampled in-process.
    Generated { n: usize, seed: u64 },
    File { path: PathBuf, hash: String, standardized: bool },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub data: DataSource,
    /// Hash of the resolved configuration JSON.
    pub config_hash: String,
    pub single_thread: bool,
    pub resumed_from: Option<PathBuf>,
    pub epochs_completed: usize,
    pub final_checkpoint: PathBuf,
}

fn load_data(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Generated { n, seed } => swiss_roll(*n, *seed)?.standardize(),
        DataSource::File { path, hash, standardized } => {
            let bytes = fs::read(path)?;
            let actual = content_hash(&bytes);
            if &actual != hash {
                eprintln!("warning: {} changed since the run (hash {actual})", path.display());
            }
            let ds = Dataset::read_csv(std::io::Cursor::new(bytes))?;
            if *standardized {
                ds.standardize()
            } else {
                Ok(ds)
            }
        }
    }
}

fn resolve_config(a: &TrainArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut v = serde_json::to_value(base.unwrap_or_default())?;
    if let Some(p) = &a.config {
        let file: Value = serde_json::from_str(&fs::read_to_string(p)?)?;
        // reject unknown keys before merging
        let _: RunConfig = serde_json::from_value(file.clone())?;
        merge(&mut v, file);
    }
    for o in &a.overrides {
        apply_override(&mut v, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(v)?;
    if let Some(s) = resolve_seed(a.seed)? {
        cfg.seed = s;
    }
    if let Some(r) = a.regularizer {
        cfg.regularizer = r;
    }
    if let Some(l) = a.lambda_geo {
        cfg.lambda_geo = Some(l);
    }
    if let Some(p) = a.probes {
        cfg.probes = p;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.exact_trace |= a.exact_trace;
    cfg.detach_codes |= a.detach_codes;
    Ok(cfg)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn cmd_train(a: &TrainArgs, single_thread: bool) -> Result<()> {
    let resumed = match &a.resume {
        Some(p) => Some(Checkpoint::load_json(p)?),
        None => None,
    };
    let (config, source) = if let Some(mp) = &a.manifest {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(mp)?)?;
        let mut cfg = m.config;
        if let Some(e) = a.epochs {
            cfg.epochs = e;
        }
        (cfg, m.data)
    } else {
        let cfg = resolve_config(a, resumed.as_ref().map(|c| c.config.clone()))?;
        let source = match &a.data {
            Some(p) => DataSource::File {
                path: p.clone(),
                hash: content_hash(&fs::read(p)?),
                standardized: a.standardize,
            },
            None => DataSource::Generated { n: a.n, seed: cfg.seed },
        };
        (cfg, source)
    };
    if a.calibrate_intensity {
        // the intensity is what is being proposed
        RunConfig { lambda_geo: Some(config.lambda_geo.unwrap_or(0.0)), ..config.clone() }.validate()?;
    } else {
        config.validate()?;
    }
    let ds = load_data(&source)?;
    fs::create_dir_all(&a.out)?;

    if a.calibrate_intensity {
        let (tr, _) = split_dataset(&config, &ds)?;
        let c = calibrate_intensity(&config, &tr)?;
        println!(
            "initial recon {:.6e}, initial {} {:.6e}: proposed lambda_geo {:.6e}",
            c.recon, c.regularizer, c.geometric, c.lambda_geo
        );
        write_json(&a.out.join("calibration.json"), &c)?;
        return Ok(());
    }
    if config.regularizer != Regularizer::None && config.lambda() == 0.0 {
        eprintln!(
            "warning: lambda_geo = 0 makes the {} regularizer inert; it is only monitored",
            config.regularizer
        );
    }
    if config.exact_trace && !config.uses_exact_trace() {
        eprintln!("warning: exact traces need latent dim <= 3; using probes");
    }

    let (train, val) = split_dataset(&config, &ds)?;
    val.save_csv(&a.out.join("val.csv"))?;
    let mut trainer = match resumed {
        Some(ck) => {
            if ck.encoder.input_dim() != ds.dim() {
                return Err(Error::shape("checkpoint does not match the data dimension"));
            }
            Trainer::resume(ck, config.clone())?
        }
        None => Trainer::new(config.clone(), ds.dim())?,
    };
    let metrics_path = a.out.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&metrics_path)?;
    let ck_dir = a.out.join("checkpoints");
    let every = config.checkpoint_every;
    trainer.run(&train, &val, |t, rec| {
        writeln!(metrics, "{}", serde_json::to_string(rec)?)?;
        if every > 0 && rec.epoch % every == 0 {
            fs::create_dir_all(&ck_dir)?;
            t.checkpoint().save_json(&ck_dir.join(format!("epoch_{:04}.json", rec.epoch)))?;
        }
        if rec.epoch % 10 == 0 || t.is_done() {
            let geo = rec.geo.map_or(String::new(), |g| format!(" geo {g:.4e}"));
            eprintln!(
                "epoch {:>4}  recon {:.4e}{geo}  val {:.4e}  lr {:.1e}",
                rec.epoch, rec.recon, rec.val_recon, rec.lr
            );
        }
        Ok(())
    })?;
    let final_path = a.out.join("checkpoint.json");
    trainer.checkpoint().save_json(&final_path)?;
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config_hash: content_hash(serde_json::to_string(&config)?.as_bytes()),
        config,
        data: source,
        single_thread,
        resumed_from: a.resume.clone(),
        epochs_completed: trainer.epoch,
        final_checkpoint: final_path,
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!("trained {} epochs; outputs in {}", trainer.epoch, a.out.display());
    Ok(())
}

/// Contents of `kappa_summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub regularizer: String,
    #[serde(flatten)]
    pub kappa: KappaSummary,
    pub curvature: Option<CurvatureSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSummary {
    pub k: usize,
    pub bandwidth: f64,
    pub laplacian_scale: f64,
    pub interior_count: usize,
    pub median_abs_normalized_interior: Option<f64>,
    pub median_calibrated_interior: Option<f64>,
}

pub fn summarize_run(tag: &str, d: &Diagnostics, k: usize, bandwidth: f64) -> Result<RunSummary> {
    Ok(RunSummary {
        regularizer: tag.to_string(),
        kappa: summarize_kappa(&d.kappa)?,
        curvature: d.curvature.as_ref().map(|c| CurvatureSummary {
            k,
            bandwidth,
            laplacian_scale: c.laplacian_scale,
            interior_count: c.interior.iter().filter(|b| **b).count(),
            median_abs_normalized_interior: median_abs_interior(c),
            median_calibrated_interior: median_calibrated_interior(c),
        }),
    })
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("checkpoint.json")
    } else {
        p.to_path_buf()
    }
}

fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let bandwidth: Bandwidth = a.bandwidth.parse()?;
    fs::create_dir_all(&a.out)?;
    let (tag, diag) = match a.oracle {
        Oracle::Sphere => {
            let field = sphere_oracle(40, 2.0)?;
            ("oracle:sphere".to_string(), diagnose(&StereographicSphere, &field.codes, a.k, bandwidth)?)
        }
        Oracle::None => {
            let cp = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::usage("--checkpoint is required unless --oracle is set"))?;
            let cpath = checkpoint_path(cp);
            let ck = Checkpoint::load_json(&cpath)?;
            let data_path = match &a.data {
                Some(p) => p.clone(),
                None => cpath.parent().unwrap_or(Path::new(".")).join("val.csv"),
            };
            let ds = Dataset::load_csv(&data_path)?;
            use rayon::prelude::*;
            let codes = ds
                .samples
                .par_iter()
                .map(|x| ck.encoder.forward(x))
                .collect::<Result<Vec<_>>>()?;
            let m = ck.decoder.input_dim();
            if m != 2 {
                eprintln!("warning: latent dimension {m}; curvature columns omitted");
            }
            (ck.config.regularizer.to_string(), diagnose(&ck.decoder, &codes, a.k, bandwidth)?)
        }
    };
    diag.save_csv(&a.out.join("diagnostics.csv"))?;
    let h = match (bandwidth, &diag.curvature) {
        (Bandwidth::Fixed(h), _) => h,
        (Bandwidth::Auto, Some(_)) => crate::geometry::build_graph(&diag.field.codes, a.k, bandwidth)?.bandwidth,
        (Bandwidth::Auto, None) => f64::NAN,
    };
    let summary = summarize_run(&tag, &diag, a.k, h)?;
    write_json(&a.out.join("kappa_summary.json"), &summary)?;
    let kj = summary.kappa.kappa_jac;
    let kp = summary.kappa.kappa_pbm;
    println!("{tag}: kappa_jac {:.4} ± {:.4}, kappa_pbm {:.4} ± {:.4} over {} points", kj.mean, kj.std, kp.mean, kp.std, summary.kappa.count);
    if summary.kappa.excluded > 0 {
        println!("  {} points with infinite condition numbers excluded", summary.kappa.excluded);
    }
    if let Some(c) = &summary.curvature {
        println!(
            "  interior nodes {}; median calibrated S {:.4}; median |normalized S| {:.4}",
            c.interior_count,
            c.median_calibrated_interior.unwrap_or(f64::NAN),
            c.median_abs_normalized_interior.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let path = if a.diagnostics.is_dir() { a.diagnostics.join("diagnostics.csv") } else { a.diagnostics.clone() };
    let rows = load_diagnostics_csv(&path)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("latent_c.svg"), plot::latent_scatter(&rows, "c_normalized", |r| r.c_normalized)?)?;
    if rows.first().is_some_and(|r| r.s_normalized.is_some()) {
        let svg = plot::latent_scatter(&rows, "S_normalized", |r| r.s_normalized.unwrap_or(f64::NAN))?;
        fs::write(a.out.join("latent_s.svg"), svg)?;
    }
    fs::write(a.out.join("kappa.svg"), plot::kappa_strips(&rows)?)?;
    println!("wrote figures for {} points to {}", rows.len(), a.out.display());
    Ok(())
}

/// One column of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareColumn {
    pub run: String,
    pub regularizer: String,
    pub kappa_jac: MeanStd,
    pub kappa_pbm: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<CompareColumn>,
    /// `κ_pbm(conf) < κ_pbm(globiso)`, when both runs are present.
    pub conf_better_than_globiso: Option<bool>,
    /// `κ_pbm(lociso) < κ_pbm(globiso)`, when both runs are present.
    pub lociso_better_than_globiso: Option<bool>,
}

pub fn compare_runs(runs: &[PathBuf]) -> Result<Comparison> {
    let mut columns = Vec::new();
    for r in runs {
        let path = if r.is_dir() { r.join("kappa_summary.json") } else { r.clone() };
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::usage(format!("run {}: no readable kappa summary ({e})", r.display())))?;
        let s: RunSummary = serde_json::from_str(&text)?;
        columns.push(CompareColumn {
            run: r.display().to_string(),
            regularizer: s.regularizer,
            kappa_jac: s.kappa.kappa_jac,
            kappa_pbm: s.kappa.kappa_pbm,
        });
    }
    let pbm = |tag: &str| columns.iter().find(|c| c.regularizer == tag).map(|c| c.kappa_pbm.mean);
    let better = |tag: &str| match (pbm(tag), pbm("globiso")) {
        (Some(a), Some(b)) => Some(a < b),
        _ => None,
    };
    Ok(Comparison {
        conf_better_than_globiso: better("conf"),
        lociso_better_than_globiso: better("lociso"),
        columns,
    })
}

pub fn comparison_table(c: &Comparison) -> String {
    let cell = |m: &MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
    let width = c
        .columns
        .iter()
        .map(|col| col.regularizer.chars().count().max(cell(&col.kappa_pbm).chars().count()))
        .max()
        .unwrap_or(8)
        + 2;
    let mut out = format!("{:<11}", "");
    for col in &c.columns {
        out.push_str(&format!("{:>width$}", col.regularizer));
    }
    out.push('\n');
    for (name, get) in [
        ("kappa_jac", (|col: &CompareColumn| col.kappa_jac) as fn(&CompareColumn) -> MeanStd),
        ("kappa_pbm", |col: &CompareColumn| col.kappa_pbm),
    ] {
        out.push_str(&format!("{name:<11}"));
        for col in &c.columns {
            out.push_str(&format!("{:>width$}", cell(&get(col))));
        }
        out.push('\n');
    }
    for (label, flag) in [("conf", c.conf_better_than_globiso), ("lociso", c.lociso_better_than_globiso)] {
        if let Some(f) = flag {
            out.push_str(&format!("kappa_pbm({label}) < kappa_pbm(globiso): {f}\n"));
        }
    }
    out
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let c = compare_runs(&a.runs)?;
    let table = comparison_table(&c);
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("comparison.txt"), &table)?;
        write_json(&out.join("comparison.json"), &c)?;
    }
    Ok(())
}
