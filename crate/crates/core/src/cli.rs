//! Command-line interface.
//!
//! Exit codes: 0 success, 1 invalid input or file format, 2 numerical
//! divergence, 3 gradient check failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    depth_to_surface_normals, generate_synthetic, parse_ambiguity, read_csv_features,
    read_features, read_labels, read_pgm16, write_features, write_labels, write_ppm, Dataset,
    Standardization, SyntheticSpec,
};
use crate::error::{CimdlError, Result};
use crate::eval::{evaluate, parse_grid, report_json, sweep_csv, weight_sweep, Provenance};
use crate::model::{FeatureBatch, Hyperparameters, WeightMode};
use crate::objective::CheckInstance;
use crate::optimizer::{
    resolve_hyperparameters, train, HyperOverrides, InitScheme, TrainOptions, TrainReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

pub const TRACE_HEADER: &str = "iter,total,correlation,recon1,recon2,orth1,orth2,ce,l21,c1,c2,c3";

#[derive(Debug, Parser)]
#[command(
    name = "cimdl",
    version,
    about = "Correlated/individual multi-modal fusion layer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset with engineered class ambiguities.
    Gen(GenArgs),
    /// Train a fusion model.
    Train(TrainArgs),
    /// Evaluate a saved model and write a JSON report.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a random instance.
    Gradcheck(GradcheckArgs),
    /// Train with fixed block weights over a grid of c1 values.
    Sweep(SweepArgs),
    /// Convert a 16-bit depth PGM into a surface-normal PPM.
    EncodeNormals(NormalsArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 300)]
    train: usize,
    #[arg(long, default_value_t = 150)]
    test: usize,
    #[arg(long, default_value_t = 4)]
    correlated_dim: usize,
    #[arg(long, default_value_t = 4)]
    specific_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    /// Confusable pairs per modality, e.g. "1:0,1;2:1,2".
    #[arg(long, default_value = "1:0,1;2:1,2")]
    ambiguity: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainingSettings {
    /// key=value file; see `Settings` keys. Values may be "auto".
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. --set mu=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// paper | inverse | fixed
    #[arg(long)]
    weight_mode: Option<String>,
    /// split-identity | split-identity-exact | seeded-uniform
    #[arg(long)]
    init: Option<String>,
    /// Standardize each feature with training-set statistics.
    #[arg(long)]
    standardize: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Modality 1 features (CIMF, or .csv with one sample per column).
    #[arg(long)]
    rgb: PathBuf,
    /// Modality 2 features.
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "model.cimm")]
    out: PathBuf,
    /// Per-iteration objective CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    settings: TrainingSettings,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
    /// Record the wall-clock time in the report (makes it non-reproducible).
    #[arg(long)]
    stamp: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    test_rgb: PathBuf,
    #[arg(long)]
    test_depth: PathBuf,
    #[arg(long)]
    test_labels: PathBuf,
    /// "start:step:end" or a comma list of c1 values.
    #[arg(long, default_value = "0:0.1:1")]
    grid: String,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    #[command(flatten)]
    settings: TrainingSettings,
}

#[derive(Debug, Args)]
struct NormalsArgs {
    /// 16-bit binary PGM depth map; zero samples are invalid.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the normals as a 3 x (width*height) CIMF matrix.
    #[arg(long)]
    raw: Option<PathBuf>,
}

/// Everything a training run needs besides the data. Unset numeric
/// hyperparameters are derived from the data size.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub overrides: HyperOverrides,
    pub init: InitScheme,
    pub batch_size: usize,
    pub standardize: bool,
}

pub const SETTING_KEYS: &[&str] = &[
    "alpha",
    "alpha1",
    "alpha2",
    "sigma",
    "sigma1",
    "sigma2",
    "delta",
    "delta1",
    "delta2",
    "theta",
    "theta1",
    "theta2",
    "mu",
    "eta",
    "lr_w",
    "lr_vq",
    "p",
    "max_iters",
    "tol",
    "weight_mode",
    "seed",
    "init",
    "batch_size",
    "standardize",
];

impl Settings {
    /// Applies one `key=value` assignment. `auto` resets a hyperparameter to
    /// its derived default.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let o = &mut self.overrides;
        let auto = value == "auto";
        let bad = || CimdlError::invalid(format!("bad value {value:?} for {key}"));
        let num = || -> Result<Option<f64>> {
            if auto {
                return Ok(None);
            }
            value.parse::<f64>().map(Some).map_err(|_| bad())
        };
        let int = || -> Result<Option<u64>> {
            if auto {
                return Ok(None);
            }
            value.parse::<u64>().map(Some).map_err(|_| bad())
        };
        match key {
            "alpha" => o.alpha = [num()?; 2],
            "alpha1" => o.alpha[0] = num()?,
            "alpha2" => o.alpha[1] = num()?,
            "sigma" => o.sigma = [num()?; 2],
            "sigma1" => o.sigma[0] = num()?,
            "sigma2" => o.sigma[1] = num()?,
            "delta" => o.delta = [num()?; 2],
            "delta1" => o.delta[0] = num()?,
            "delta2" => o.delta[1] = num()?,
            "theta" => o.theta = [num()?; 2],
            "theta1" => o.theta[0] = num()?,
            "theta2" => o.theta[1] = num()?,
            "mu" => o.mu = num()?,
            "eta" => o.eta = num()?,
            "lr_w" => o.lr_w = num()?,
            "lr_vq" => o.lr_vq = num()?,
            "p" => o.p = num()?,
            "tol" => o.tol = num()?,
            "max_iters" => o.max_iters = int()?.map(|v| v as usize),
            "seed" => o.seed = int()?,
            "weight_mode" => o.weight_mode = if auto { None } else { Some(value.parse()?) },
            "init" => {
                self.init = if auto {
                    InitScheme::default()
                } else {
                    value.parse()?
                }
            }
            "batch_size" => self.batch_size = int()?.unwrap_or(0) as usize,
            "standardize" => {
                self.standardize = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" | "auto" => false,
                    _ => return Err(bad()),
                }
            }
            _ => {
                return Err(CimdlError::invalid(format!(
                    "unknown setting {key:?}; known: {}",
                    SETTING_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_config(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CimdlError::invalid(format!(
                    "config line {}: expected key = value, got {raw:?}",
                    i + 1
                ))
            })?;
            self.apply(k.trim(), v.trim())
                .map_err(|e| CimdlError::invalid(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    fn from_args(a: &TrainingSettings) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = &a.config {
            let text = fs::read_to_string(path).map_err(|e| CimdlError::io(path, e))?;
            s.parse_config(&text)?;
        }
        if let Some(seed) = a.seed {
            s.overrides.seed = Some(seed);
        }
        if let Some(it) = a.max_iters {
            s.overrides.max_iters = Some(it);
        }
        if let Some(mode) = &a.weight_mode {
            s.overrides.weight_mode = Some(mode.parse::<WeightMode>()?);
        }
        if let Some(init) = &a.init {
            s.init = init.parse()?;
        }
        if a.standardize {
            s.standardize = true;
        }
        for kv in &a.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                CimdlError::invalid(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            s.apply(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    fn resolve(&self, m: usize, n: usize) -> Result<(Hyperparameters, TrainOptions)> {
        let hp = resolve_hyperparameters(m, n, &self.overrides)?;
        let opts = TrainOptions {
            init: self.init,
            seed: hp.seed,
            initial_weights: None,
            batch_size: self.batch_size,
        };
        Ok((hp, opts))
    }
}

/// Reads CIMF, or CSV when the extension is `.csv`.
pub fn load_features(path: &Path) -> Result<FeatureBatch> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        read_csv_features(path)
    } else {
        read_features(path)
    }
}

fn load_dataset(x1: &Path, x2: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let (labels, l) = read_labels(labels, classes)?;
    Dataset::new(load_features(x1)?, load_features(x2)?, labels, l)
}

/// Path of the standardization sidecar written next to a model.
pub fn sidecar_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".std");
    PathBuf::from(s)
}

/// Standardizes both modalities of `train` and applies the same maps to `others`.
fn standardize_sets(
    train: &mut Dataset,
    others: &mut [&mut Dataset],
) -> Result<[Standardization; 2]> {
    let s1 = Standardization::fit(&train.x1)?;
    let s2 = Standardization::fit(&train.x2)?;
    for d in std::iter::once(&mut *train).chain(others.iter_mut().map(|d| &mut **d)) {
        d.x1 = s1.apply(&d.x1)?;
        d.x2 = s2.apply(&d.x2)?;
    }
    Ok([s1, s2])
}

fn write_sidecar(path: &Path, stats: &[Standardization; 2]) -> Result<()> {
    let m = ndarray::concatenate(
        ndarray::Axis(0),
        &[stats[0].to_matrix().view(), stats[1].to_matrix().view()],
    )
    .map_err(|e| CimdlError::shape(e.to_string()))?;
    write_features(path, &FeatureBatch::new(m)?)
}

fn read_sidecar(path: &Path) -> Result<[Standardization; 2]> {
    let m = read_features(path)?.into_inner();
    if m.nrows() != 4 {
        return Err(CimdlError::shape(format!(
            "standardization file {} must have 4 rows, got {}",
            path.display(),
            m.nrows()
        )));
    }
    let half =
        |r: usize| Standardization::from_matrix(&m.slice(ndarray::s![r..r + 2, ..]).to_owned());
    Ok([half(0)?, half(2)?])
}

/// Objective trace as CSV; row 0 is the initial model.
pub fn trace_csv(report: &TrainReport) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    let initial = report.initial_model.c;
    let rows = std::iter::once((&report.initial_objective, &initial))
        .chain(report.objective_trace.iter().zip(&report.weight_trace));
    for (i, (o, c)) in rows.enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{},{},{},{}",
            o.total,
            o.correlation,
            o.reconstruction[0],
            o.reconstruction[1],
            o.orthogonality[0],
            o.orthogonality[1],
            o.softmax_ce,
            o.l21,
            c[0],
            c[1],
            c[2]
        )
        .expect("string write");
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CimdlError::io(path, e))
}

fn cmd_gen(a: GenArgs) -> Result<i32> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        dim: a.dim,
        n_train: a.train,
        n_test: a.test,
        correlated_dim: a.correlated_dim,
        specific_dim: a.specific_dim,
        noise_sd: a.noise,
        separation: a.separation,
        ambiguity: parse_ambiguity(&a.ambiguity)?,
        seed: a.seed,
    };
    let (tr, te) = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| CimdlError::io(&a.out, e))?;
    for (name, d) in [("train", &tr), ("test", &te)] {
        write_features(a.out.join(format!("{name}_rgb.cimf")), &d.x1)?;
        write_features(a.out.join(format!("{name}_depth.cimf")), &d.x2)?;
        write_labels(
            a.out.join(format!("{name}_labels.ciml")),
            &d.labels,
            d.num_classes,
        )?;
    }
    println!(
        "wrote {} train / {} test samples (M={}, l={}) to {}",
        tr.samples(),
        te.samples(),
        a.dim,
        a.classes,
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let settings = Settings::from_args(&a.settings)?;
    let mut data = load_dataset(&a.rgb, &a.depth, &a.labels, None)?;
    let stats = if settings.standardize {
        Some(standardize_sets(&mut data, &mut [])?)
    } else {
        None
    };
    let (hp, opts) = settings.resolve(data.x1.dim(), data.samples())?;
    let report = train(&data.x1, &data.x2, &data.label_matrix(), &hp, &opts)?;
    for (i, o) in report.objective_trace.iter().enumerate() {
        if (i + 1) % 50 == 0 || i + 1 == report.objective_trace.len() {
            println!("iter {:>5}  objective {:.6e}", i + 1, o.total);
        }
    }
    let saved = crate::data::SavedModel::new(report.final_model.clone(), &hp);
    crate::data::save_model(&a.out, &saved)?;
    let sidecar = sidecar_path(&a.out);
    match &stats {
        Some(s) => write_sidecar(&sidecar, s)?,
        None if sidecar.exists() => {
            fs::remove_file(&sidecar).map_err(|e| CimdlError::io(&sidecar, e))?
        }
        None => {}
    }
    if let Some(t) = &a.trace {
        write_text(t, &trace_csv(&report))?;
    }
    let c = report.final_model.c;
    println!(
        "{} after {} iterations; c = ({:.6}, {:.6}, {:.6}); model written to {}",
        if report.converged {
            "converged"
        } else {
            "stopped"
        },
        report.iterations_run,
        c[0],
        c[1],
        c[2],
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let saved = crate::data::load_model(&a.model)?;
    let l = saved.model.classes();
    let mut data = load_dataset(&a.rgb, &a.depth, &a.labels, Some(l))?;
    let sidecar = sidecar_path(&a.model);
    if sidecar.exists() {
        let [s1, s2] = read_sidecar(&sidecar)?;
        data.x1 = s1.apply(&data.x1)?;
        data.x2 = s2.apply(&data.x2)?;
    }
    let report = evaluate(&saved.model, &data.x1, &data.x2, &data.labels)?;
    let mut prov = Provenance::default().with_hyperparameters(&saved.hp_record);
    prov.add_file("model", &a.model)?;
    prov.add_file("rgb", &a.rgb)?;
    prov.add_file("depth", &a.depth)?;
    prov.add_file("labels", &a.labels)?;
    if sidecar.exists() {
        prov.add_file("standardization", &sidecar)?;
    }
    if a.stamp {
        prov.timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
    }
    write_text(&a.report, &report_json(&report, &prov))?;
    println!(
        "accuracy {:.4} on {} samples; report written to {}",
        report.accuracy,
        report.n_samples,
        a.report.display()
    );
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if !(a.tol > 0.0) || !(a.step > 0.0) {
        return Err(CimdlError::invalid("--tol and --step must be positive"));
    }
    let inst = CheckInstance::random(a.dim, a.samples, a.classes, a.seed)?;
    let mut failed = false;
    for (block, err) in inst.check(a.step)? {
        let ok = err < a.tol;
        failed |= !ok;
        println!(
            "{:<3} relative error {err:.3e}  {}",
            block.name(),
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(if failed { EXIT_GRADCHECK } else { EXIT_OK })
}

fn cmd_sweep(a: SweepArgs) -> Result<i32> {
    let settings = Settings::from_args(&a.settings)?;
    let grid = parse_grid(&a.grid)?;
    let mut tr = load_dataset(&a.rgb, &a.depth, &a.labels, None)?;
    let mut te = load_dataset(
        &a.test_rgb,
        &a.test_depth,
        &a.test_labels,
        Some(tr.num_classes),
    )?;
    if settings.standardize {
        standardize_sets(&mut tr, &mut [&mut te])?;
    }
    let (hp, opts) = settings.resolve(tr.x1.dim(), tr.samples())?;
    let points = weight_sweep(&tr, &te, &hp, &opts, &grid)?;
    write_text(&a.out, &sweep_csv(&points))?;
    let mut failed = false;
    for p in &points {
        match (p.accuracy, &p.error) {
            (Some(acc), _) => println!("c1 = {:<6} accuracy {acc:.4}", p.c1),
            (None, e) => {
                failed = true;
                eprintln!(
                    "c1 = {:<6} failed: {}",
                    p.c1,
                    e.as_deref().unwrap_or("unknown error")
                );
            }
        }
    }
    println!("sweep written to {}", a.out.display());
    Ok(if failed { EXIT_DIVERGED } else { EXIT_OK })
}

fn cmd_normals(a: NormalsArgs) -> Result<i32> {
    let depth = read_pgm16(&a.input)?;
    let normals = depth_to_surface_normals(&depth)?;
    write_ppm(&a.out, &normals)?;
    if let Some(raw) = &a.raw {
        let m = ndarray::Array2::from_shape_fn((3, normals.normals.len()), |(k, j)| {
            normals.normals[j][k]
        });
        write_features(raw, &FeatureBatch::new(m)?)?;
    }
    let valid = normals.valid.iter().filter(|&&v| v).count();
    println!(
        "{}x{} normals ({valid} valid) written to {}",
        normals.width,
        normals.height,
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn exit_code(e: &CimdlError) -> i32 {
    match e {
        CimdlError::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_INVALID,
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::EncodeNormals(a) => cmd_normals(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
