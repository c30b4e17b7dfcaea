//! Command-line front end of the `kfp` binary.
//!
//! Exit codes: 0 success (a probe may still report `fail`), 1 validation
//! failure of a structure or configuration, 2 malformed input, 3 time step
//! above the stability limit, 4 non-monotone boundary-layer column, 5 any
//! other numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::crocco::{self, BoundaryLayerField, CroccoError, CroccoField};
use crate::fundsol::{self, FundsolError};
use crate::gfunc::{self, GFunction, GfuncError, SampleGrid};
use crate::grid::{Axis, FnField, GridField, ScalarField};
use crate::hypogroup::{GroupPoint, OperatorStructure, StructureError, StructureSpec};
use crate::kfpsolve::{self, CoefficientField, Data, KernelBenchmark, KfpError, LowerOrder, RoughPattern, Scheme, SolverConfig};
use crate::potential::{self, LpProbeConfig, PotentialError};
use crate::regdiag::{self, Center, CutoffConfig, HolderConfig, LevelSetConfig, LinfConfig, PoincareConfig, RegError, RoughHolderConfig, SobolevConfig, WVariant};
use crate::report::ProbeReport;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "kfp", version, about = "Kolmogorov-Fokker-Planck numerics")]
pub struct Cli {
    /// Structure JSON `{"N", "blocks", "B", "lambda"}`; Kolmogorov when absent.
    #[arg(long, global = true)]
    pub structure: Option<PathBuf>,
    /// Seed of randomized steps.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for artifacts and `manifest.json`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Manifest path, overriding `<out>/manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Group law, dilations and the homogeneous norm.
    #[command(subcommand)]
    Group(GroupCmd),
    /// The kernel Γ₁ and its checks.
    #[command(subcommand)]
    Fundsol(FundsolCmd),
    /// Run the solver or a convergence benchmark from a config file.
    Solve {
        config: PathBuf,
    },
    /// Regularity, cutoff-function and potential probes.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Boundary-layer transforms.
    Crocco {
        #[arg(value_enum)]
        action: CroccoAction,
        #[command(flatten)]
        opts: CroccoOpts,
    },
}

#[derive(Debug, Subcommand)]
pub enum GroupCmd {
    Norm {
        #[arg(long)]
        point: String,
    },
    Compose {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
    Dilate {
        #[arg(long, allow_negative_numbers = true)]
        lambda: f64,
        #[arg(long)]
        point: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum FundsolCmd {
    /// CSV rows `t, x.., value` of `Γ₁((x, t); pole)`.
    Eval {
        #[arg(long, allow_negative_numbers = true)]
        t: f64,
        /// Spatial point, repeatable.
        #[arg(long, required = true, allow_negative_numbers = true)]
        x: Vec<String>,
        #[arg(long, default_value = "0,0@0")]
        pole: String,
    },
    VerifyBounds {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
    },
    VerifyCov {
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = 64)]
        times: usize,
    },
    Chapman {
        #[arg(long, default_value_t = 0.25)]
        t1: f64,
        #[arg(long, default_value_t = 0.25)]
        t2: f64,
        #[arg(long = "box", default_value_t = 6.0)]
        box_radius: f64,
        #[arg(long, default_value = "0,0", allow_negative_numbers = true)]
        x: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProbeCmd {
    Levelset(FieldArgs),
    Poincare(FieldArgs),
    Sobolev(FieldArgs),
    Linf(FieldArgs),
    /// Oscillation decay; with a rough-solve config, solves first.
    Holder(FieldArgs),
    Gfunc {
        #[arg(long, default_value_t = 0.25)]
        width: f64,
    },
    Potential {
        #[arg(long)]
        gradient: bool,
        #[arg(long, default_value_t = 25)]
        nx: usize,
        #[arg(long, default_value_t = 25)]
        nt: usize,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct FieldArgs {
    /// `constant:V`, `linear` (`1 + x₁ + x_N/2`), `bowl` (`0.02 + 2x₁²`) or
    /// `kernel:A` (`A Γ₁` with pole at `(0, -1)`).
    #[arg(long, default_value = "constant:1")]
    pub field: String,
    /// A solution CSV written by `solve`, used instead of `--field`.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    /// Probe configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CroccoAction {
    Check,
    Forward,
    Residual,
    Rescale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Profile {
    /// `U = 2`, `u = U tanh y`.
    Tanh,
    /// `U = 2 + 0.5 x`, `u = U tanh y`.
    Accelerating,
    /// `U = 2 + 0.5 e^{-t}`, `u = U tanh y`; unfavourable pressure.
    Bernoulli,
    /// `U = 9/4`, `u = U tanh(y / (1 + x))`.
    Stretched,
    /// `U = 3/2`, `u = U (1 - e^{-y})`.
    Exponential,
    /// Zero slope on `1 ≤ y ≤ 2`.
    Flat,
    /// Analytic Crocco field with forcing; residual only.
    Manufactured,
}

#[derive(Debug, Clone, Args)]
pub struct CroccoOpts {
    #[arg(long, value_enum, default_value = "tanh")]
    pub profile: Profile,
    #[arg(long, default_value_t = 5)]
    pub nt: usize,
    #[arg(long, default_value_t = 5)]
    pub nx: usize,
    #[arg(long, default_value_t = 801)]
    pub ny: usize,
    #[arg(long, default_value_t = 4.0)]
    pub y_max: f64,
    #[arg(long, default_value_t = 41)]
    pub n_eta: usize,
}

/// Failure of a command with its exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Malformed(String),
    Cfl(String),
    NonMonotone(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Malformed(_) => 2,
            CliError::Cfl(_) => 3,
            CliError::NonMonotone(_) => 4,
            CliError::Numerical(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Malformed(m) | CliError::Cfl(m) | CliError::NonMonotone(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<StructureError> for CliError {
    fn from(e: StructureError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<FundsolError> for CliError {
    fn from(e: FundsolError) -> Self {
        match e {
            FundsolError::NonPositiveTime(_) | FundsolError::InvalidArgument(_) | FundsolError::BoxTooSmall { .. } => CliError::Validation(e.to_string()),
            FundsolError::NotPositiveDefinite(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<KfpError> for CliError {
    fn from(e: KfpError) -> Self {
        match e {
            KfpError::CflViolation { .. } => CliError::Cfl(e.to_string()),
            KfpError::Ellipticity { .. } | KfpError::Coefficients(_) | KfpError::Grid(_) => CliError::Validation(e.to_string()),
            KfpError::UnstableBlowup { .. } | KfpError::SupportViolation => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<RegError> for CliError {
    fn from(e: RegError) -> Self {
        match e {
            RegError::Structure(e) => e.into(),
            RegError::Kernel(e) => e.into(),
            RegError::Solver(e) => e.into(),
            RegError::Config(_) | RegError::C1TooSmall { .. } | RegError::ExponentOutOfRange { .. } | RegError::InsufficientRungs(_) => {
                CliError::Validation(e.to_string())
            }
            RegError::OutOfDomain { .. } | RegError::KernelQuadratureFailure { .. } | RegError::Gfunc(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<GfuncError> for CliError {
    fn from(e: GfuncError) -> Self {
        match e {
            GfuncError::WidthOutOfRange(_) | GfuncError::BadGrid => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<PotentialError> for CliError {
    fn from(e: PotentialError) -> Self {
        match e {
            PotentialError::Kernel(e) => e.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CroccoError> for CliError {
    fn from(e: CroccoError) -> Self {
        match e {
            CroccoError::NonMonotoneColumn { .. } => CliError::NonMonotone(e.to_string()),
            CroccoError::Shape(_) | CroccoError::NonPositiveOuterFlow(_) | CroccoError::EtaOutOfRange { .. } => CliError::Validation(e.to_string()),
            CroccoError::DegenerateW(_) => CliError::Numerical(e.to_string()),
        }
    }
}

/// Provenance record written next to every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
    pub exit_code: i32,
    pub error: Option<String>,
    pub summaries: Vec<Value>,
}

/// Configuration of `kfp solve`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub structure: Option<StructureSpec>,
    #[serde(default)]
    pub grid: Option<SolverConfig>,
    #[serde(default)]
    pub scheme: Option<Scheme>,
    #[serde(default)]
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Runs a convergence benchmark instead of a single solve.
    #[serde(default)]
    pub benchmark: Option<BenchmarkSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CoefficientSpec {
    #[default]
    Identity,
    Constant {
        a: Vec<Vec<f64>>,
        lambda: f64,
    },
    Rough {
        pattern: RoughPattern,
        lambda: f64,
        cells: usize,
        #[serde(default)]
        lower: LowerOrder,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSpec {
    Constant { value: f64 },
    /// `1 + x₁ + x_N / 2`.
    Linear,
    /// `Γ₁(·; pole)`.
    Kernel { pole: Center },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Constant { value: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BenchmarkSpec {
    Kernel(KernelBenchmark),
    Heat { levels: Vec<usize> },
}

/// What a command produced besides its exit code.
#[derive(Debug, Default)]
struct Outcome {
    stdout: String,
    summaries: Vec<Value>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Outcome {
    fn report(mut self, r: &ProbeReport) -> Self {
        self.stdout = r.to_json();
        self.summaries.push(serde_json::to_value(r).expect("report serializes"));
        self
    }
}

fn malformed(e: impl std::fmt::Display) -> CliError {
    CliError::Malformed(e.to_string())
}

fn parse_coords(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| malformed(format!("bad coordinate {v:?} in {s:?}"))))
        .collect()
}

/// `x1,..,xN@t`.
pub fn parse_point(s: &str) -> Result<GroupPoint, CliError> {
    let (x, t) = s.split_once('@').ok_or_else(|| malformed(format!("point {s:?} lacks '@t'")))?;
    let t = t.trim().parse::<f64>().map_err(|_| malformed(format!("bad time in {s:?}")))?;
    Ok(GroupPoint::new(&parse_coords(x)?, t))
}

/// Twelve decimals, trailing zeros dropped; the group computations carry
/// about that much accuracy.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.12}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

pub fn format_point(z: &GroupPoint) -> String {
    let x: Vec<String> = z.x.iter().map(|&v| format_value(v)).collect();
    format!("{}@{}", x.join(","), format_value(z.t))
}

fn check_dim(s: &OperatorStructure, n: usize) -> Result<(), CliError> {
    if n == s.dim() {
        Ok(())
    } else {
        Err(malformed(format!("point has {n} coordinates, structure has N = {}", s.dim())))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| malformed(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| malformed(format!("{}: {e}", path.display())))
}

fn load_structure(path: Option<&Path>, inputs: &mut Vec<PathBuf>) -> Result<OperatorStructure, CliError> {
    match path {
        None => Ok(OperatorStructure::kolmogorov()),
        Some(p) => {
            inputs.push(p.to_path_buf());
            Ok(read_json::<StructureSpec>(p)?.build()?)
        }
    }
}

fn write_output(out: &Path, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Numerical(format!("{}: {e}", out.display())))?;
    Ok(out.join(name))
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn cmd_group(s: &OperatorStructure, cmd: &GroupCmd) -> Result<Outcome, CliError> {
    let (text, value) = match cmd {
        GroupCmd::Norm { point } => {
            let z = parse_point(point)?;
            check_dim(s, z.dim())?;
            let n = s.hom_norm(&z);
            (format_value(n), json!({ "norm": n }))
        }
        GroupCmd::Compose { a, b } => {
            let (a, b) = (parse_point(a)?, parse_point(b)?);
            check_dim(s, a.dim())?;
            check_dim(s, b.dim())?;
            let c = s.compose(&a, &b);
            (format_point(&c), json!({ "x": c.x.as_slice(), "t": c.t }))
        }
        GroupCmd::Dilate { lambda, point } => {
            let z = parse_point(point)?;
            check_dim(s, z.dim())?;
            let d = s.dilate(*lambda, &z)?;
            (format_point(&d), json!({ "x": d.x.as_slice(), "t": d.t }))
        }
    };
    Ok(Outcome { stdout: text, summaries: vec![value], ..Default::default() })
}

fn cmd_fundsol(s: &OperatorStructure, cmd: &FundsolCmd, seed: u64) -> Result<Outcome, CliError> {
    match cmd {
        FundsolCmd::Eval { t, x, pole } => {
            let pole = parse_point(pole)?;
            check_dim(s, pole.dim())?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["t".to_string()];
            header.extend((1..=s.dim()).map(|i| format!("x{i}")));
            header.push("value".into());
            w.write_record(&header).map_err(io_err)?;
            let mut values = Vec::new();
            for xs in x {
                let coords = parse_coords(xs)?;
                check_dim(s, coords.len())?;
                let v = fundsol::gamma1(s, &GroupPoint::new(&coords, *t), &pole).value;
                values.push(v);
                let mut row = vec![t.to_string()];
                row.extend(coords.iter().map(|c| c.to_string()));
                row.push(crate::grid::fmt_f64(v));
                w.write_record(&row).map_err(io_err)?;
            }
            let text = String::from_utf8(w.into_inner().map_err(io_err)?).map_err(io_err)?;
            Ok(Outcome { stdout: text.trim_end().to_string(), summaries: vec![json!({ "values": values })], ..Default::default() })
        }
        FundsolCmd::VerifyBounds { samples, horizon } => {
            Ok(Outcome::default().report(&fundsol::verify_kernel_bounds(s, *samples, *horizon, seed)?))
        }
        FundsolCmd::VerifyCov { horizon, times } => {
            Ok(Outcome::default().report(&fundsol::verify_covariance_equivalence(s, *horizon, *times)?))
        }
        FundsolCmd::Chapman { t1, t2, box_radius, x } => {
            let x = parse_coords(x)?;
            check_dim(s, x.len())?;
            let r = fundsol::chapman_kolmogorov_check(s, *t1, *t2, *box_radius, &DVector::from_vec(x))?;
            Ok(Outcome::default().report(&r))
        }
    }
}

fn boundary_fn<'a>(s: &'a OperatorStructure, spec: &'a DataSpec) -> Box<dyn Fn(&GroupPoint) -> f64 + Sync + 'a> {
    match spec {
        DataSpec::Constant { value } => Box::new(move |_| *value),
        DataSpec::Linear => Box::new(regdiag::rough_data),
        DataSpec::Kernel { pole } => {
            let p = pole.point();
            Box::new(move |z| fundsol::gamma1(s, z, &p).value)
        }
    }
}

fn cmd_solve(cli_struct: Option<&Path>, config: &Path, seed: Option<u64>, out: &Path) -> Result<Outcome, CliError> {
    let mut outcome = Outcome { inputs: vec![config.to_path_buf()], ..Default::default() };
    let cfg: RunConfig = read_json(config)?;
    let s = match (&cfg.structure, cli_struct) {
        (Some(spec), _) => spec.build()?,
        (None, p) => load_structure(p, &mut outcome.inputs)?,
    };
    let seed = seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    if let Some(bench) = &cfg.benchmark {
        let report = match bench {
            BenchmarkSpec::Kernel(b) => {
                let mut b = b.clone();
                if let Some(sc) = cfg.scheme {
                    b.scheme = sc;
                }
                kfpsolve::kernel_benchmark(&s, &b)?
            }
            BenchmarkSpec::Heat { levels } => kfpsolve::heat_benchmark(levels, cfg.scheme.unwrap_or_default())?,
        };
        let path = write_output(out, "benchmark.json")?;
        fs::write(&path, report.to_json()).map_err(io_err)?;
        outcome.outputs.push(path);
        return Ok(outcome.report(&report));
    }
    let mut grid = cfg.grid.clone().ok_or_else(|| CliError::Validation("config needs a grid or a benchmark".into()))?;
    if let Some(sc) = cfg.scheme {
        grid.scheme = sc;
    }
    if grid.space.len() != s.dim() {
        return Err(CliError::Validation(format!("grid has {} spatial axes, structure has N = {}", grid.space.len(), s.dim())));
    }
    let coeff = match &cfg.coefficients {
        CoefficientSpec::Identity => CoefficientField::identity(&s, &grid.space),
        CoefficientSpec::Constant { a, lambda } => {
            let m0 = s.m0();
            if a.len() != m0 || a.iter().any(|r| r.len() != m0) {
                return Err(CliError::Validation(format!("a must be {m0}x{m0}")));
            }
            let m = DMatrix::from_fn(m0, m0, |i, j| a[i][j]);
            CoefficientField::constant(&s, &grid.space, &m, *lambda)?
        }
        CoefficientSpec::Rough { pattern, lambda, cells, lower } => {
            kfpsolve::make_rough_coefficients(&s, &grid.space, *pattern, *lambda, *cells, *lower, seed)?
        }
    };
    let boundary = boundary_fn(&s, &cfg.data);
    let sol = kfpsolve::solve(&s, &coeff, &grid, Data { boundary: &*boundary, source: None })?;
    let path = write_output(out, "solution.csv")?;
    let sidecar = sol.field.write_csv(&path).map_err(io_err)?;
    outcome.outputs.push(path);
    outcome.outputs.push(sidecar);
    let v = sol.field.values();
    let summary = json!({
        "steps": sol.steps,
        "dt": sol.dt,
        "dt_limit": sol.dt_limit,
        "scheme": sol.scheme,
        "nodes": v.len(),
        "min": v.iter().cloned().fold(f64::INFINITY, f64::min),
        "max": v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        "seed": seed,
    });
    outcome.stdout = serde_json::to_string_pretty(&summary).expect("summary serializes");
    outcome.summaries.push(summary);
    Ok(outcome)
}

fn load_field(s: &OperatorStructure, args: &FieldArgs, inputs: &mut Vec<PathBuf>) -> Result<Box<dyn ScalarField>, CliError> {
    if let Some(p) = &args.solution {
        inputs.push(p.clone());
        let f = GridField::read_csv(p).map_err(malformed)?;
        if f.axes().len() != s.dim() + 1 {
            return Err(malformed("solution grid does not match the structure"));
        }
        return Ok(Box::new(f));
    }
    let n = s.dim();
    match args.field.split_once(':').map_or((args.field.as_str(), None), |(a, b)| (a, Some(b))) {
        ("constant", v) => {
            let v: f64 = v.unwrap_or("1").parse().map_err(|_| malformed(format!("bad field {:?}", args.field)))?;
            Ok(Box::new(FnField(move |_: &GroupPoint| v)))
        }
        ("linear", None) => Ok(Box::new(FnField(regdiag::rough_data))),
        ("bowl", None) => Ok(Box::new(FnField(|z: &GroupPoint| 0.02 + 2.0 * z.x[0] * z.x[0]))),
        ("kernel", v) => {
            let amp: f64 = v.unwrap_or("1").parse().map_err(|_| malformed(format!("bad field {:?}", args.field)))?;
            let s = s.clone();
            let pole = GroupPoint::new(&vec![0.0; n], -1.0);
            Ok(Box::new(FnField(move |z: &GroupPoint| amp * fundsol::gamma1(&s, z, &pole).value)))
        }
        _ => Err(malformed(format!("unknown field {:?}", args.field))),
    }
}

fn probe_config<T: for<'de> Deserialize<'de>>(args: &FieldArgs, inputs: &mut Vec<PathBuf>, default: T) -> Result<T, CliError> {
    match &args.config {
        Some(p) => {
            inputs.push(p.clone());
            read_json(p)
        }
        None => Ok(default),
    }
}

fn cmd_probe(s: &OperatorStructure, cmd: &ProbeCmd, explicit_seed: Option<u64>) -> Result<Outcome, CliError> {
    let seed = explicit_seed.unwrap_or(DEFAULT_SEED);
    let mut inputs = Vec::new();
    let n = s.dim();
    let report = match cmd {
        ProbeCmd::Levelset(a) => {
            let cfg = probe_config(a, &mut inputs, LevelSetConfig::new(n, 0.5))?;
            regdiag::level_set_probe(s, &*load_field(s, a, &mut inputs)?, &cfg)?
        }
        ProbeCmd::Poincare(a) => {
            let cutoff = CutoffConfig { r: 0.04, ..CutoffConfig::default() };
            let mut default = PoincareConfig::new(n, cutoff, 0.05);
            default.variant = WVariant::Shifted;
            let cfg = probe_config(a, &mut inputs, default)?;
            regdiag::poincare_probe(s, &*load_field(s, a, &mut inputs)?, None, &cfg)?
        }
        ProbeCmd::Sobolev(a) => {
            let default = SobolevConfig { center: Center::origin(n), rho: 0.5, r: 0.75, q: (s.q() as f64 + 2.0) / 2.0 + 1.0, resolution: 17 };
            let cfg = probe_config(a, &mut inputs, default)?;
            regdiag::sobolev_probe(s, &*load_field(s, a, &mut inputs)?, None, &cfg)?
        }
        ProbeCmd::Linf(a) => {
            let cfg = probe_config(a, &mut inputs, LinfConfig { center: Center::origin(n), r: 0.5, p: 1.0, resolution: 17 })?;
            regdiag::linf_probe(s, &*load_field(s, a, &mut inputs)?, &cfg)?
        }
        ProbeCmd::Holder(a) => {
            if let Some(p) = &a.config {
                inputs.push(p.clone());
                let mut cfg: RoughHolderConfig = read_json(p)?;
                if let Some(sd) = explicit_seed {
                    cfg.seed = sd;
                }
                regdiag::rough_holder_run(&cfg)?
            } else {
                let cfg = HolderConfig { center: Center::origin(n), r0: 0.4, theta: 0.5, rungs: 5, resolution: 17 };
                regdiag::holder_estimate(s, &*load_field(s, a, &mut inputs)?, &cfg)?
            }
        }
        ProbeCmd::Gfunc { width } => gfunc::probe_g_properties(&GFunction::new(*width)?, &SampleGrid::default())?,
        ProbeCmd::Potential { gradient, nx, nt, p } => {
            let cfg = LpProbeConfig { p: *p, nx: *nx, nt: *nt, seed, gradient: *gradient, ..Default::default() };
            potential::verify_lp_lq(s, &cfg)?
        }
    };
    let mut out = Outcome::default().report(&report);
    out.inputs = inputs;
    Ok(out)
}

fn profile_field(opts: &CroccoOpts) -> Result<BoundaryLayerField, CliError> {
    let t = Axis::new(0.0, 1.0, opts.nt);
    let x = Axis::new(0.0, 1.0, opts.nx);
    let y = Axis::new(0.0, opts.y_max, opts.ny);
    let f = match opts.profile {
        Profile::Tanh => BoundaryLayerField::from_fn(t, x, y, |_, _| 2.0, |_, y, _| 2.0 * y.tanh(), None),
        Profile::Accelerating => BoundaryLayerField::from_fn(t, x, y, |x, _| 2.0 + 0.5 * x, |x, y, _| (2.0 + 0.5 * x) * y.tanh(), None),
        Profile::Bernoulli => {
            BoundaryLayerField::from_fn(t, x, y, |_, t| 2.0 + 0.5 * (-t).exp(), |_, y, t| (2.0 + 0.5 * (-t).exp()) * y.tanh(), None)
        }
        Profile::Stretched => BoundaryLayerField::from_fn(t, x, y, |_, _| 2.25, |x, y, _| 2.25 * (y / (1.0 + x)).tanh(), None),
        Profile::Exponential => BoundaryLayerField::from_fn(t, x, y, |_, _| 1.5, |_, y, _| 1.5 * (1.0 - (-y).exp()), None),
        Profile::Flat => BoundaryLayerField::from_fn(
            t,
            x,
            y,
            |_, _| 1.0,
            |_, y, _| {
                if y < 1.0 {
                    0.5 * y
                } else if y < 2.0 {
                    0.5
                } else {
                    0.5 + 0.2 * (y - 2.0)
                }
            },
            None,
        ),
        Profile::Manufactured => return Err(CliError::Validation("the manufactured profile only supports `residual`".into())),
    };
    Ok(f?)
}

/// Exact `w(ξ, η)` where the profile has one.
fn exact_w(p: Profile) -> Option<fn(f64, f64) -> f64> {
    match p {
        Profile::Tanh | Profile::Accelerating | Profile::Bernoulli => Some(|_, e| 1.0 - e * e),
        Profile::Stretched => Some(|x, e| (1.0 - e * e) / (1.0 + x)),
        Profile::Exponential => Some(|_, e| 1.0 - e),
        _ => None,
    }
}

fn cmd_crocco(action: CroccoAction, opts: &CroccoOpts, out: Option<&Path>) -> Result<Outcome, CliError> {
    let mut outcome = Outcome::default();
    if opts.profile == Profile::Manufactured {
        if action != CroccoAction::Residual {
            return Err(CliError::Validation("the manufactured profile only supports `residual`".into()));
        }
        let levels = [17, 33, 65];
        return Ok(outcome.report(&crocco::manufactured_residual_benchmark(&levels)?));
    }
    let blf = profile_field(opts)?;
    let report = match action {
        CroccoAction::Check => crocco::check_hypotheses(&blf),
        CroccoAction::Forward => {
            let cf = crocco::crocco_forward(&blf, opts.n_eta)?;
            if let Some(dir) = out {
                let path = write_output(dir, "crocco_w.csv")?;
                let sidecar = cf.w.write_csv(&path).map_err(io_err)?;
                outcome.outputs.push(path);
                outcome.outputs.push(sidecar);
            }
            forward_report(&cf, opts.profile)
        }
        CroccoAction::Residual => crocco::verify_crocco_residual(&crocco::crocco_forward(&blf, opts.n_eta)?, None)?,
        CroccoAction::Rescale => crocco::rescale_sqrt_u(&crocco::crocco_forward(&blf, opts.n_eta)?)?.1,
    };
    Ok(outcome.report(&report))
}

fn forward_report(cf: &CroccoField, profile: Profile) -> ProbeReport {
    let (_, _, ea) = cf.axes();
    let v = cf.w.values();
    let mut r = match exact_w(profile) {
        Some(exact) => {
            let err = (0..v.len())
                .map(|k| {
                    let z = cf.w.point(k);
                    (v[k] - exact(z.x[0], z.x[1])).abs()
                })
                .fold(0.0, f64::max);
            ProbeReport::new("crocco-forward", err, 2e-3, v.len()).with_verdict(crate::report::Verdict::from_bool(err <= 2e-3))
        }
        None => ProbeReport::new("crocco-forward", 0.0, 0.0, v.len()).with_verdict(crate::report::Verdict::ReportOnly),
    };
    r = r
        .detail("eta_range", [ea.lo, ea.hi])
        .detail("min_w", v.iter().cloned().fold(f64::INFINITY, f64::min))
        .detail("max_w", v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    r
}

fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let mut inputs = Vec::new();
    let mut outcome = match &cli.command {
        Command::Group(cmd) => cmd_group(&load_structure(cli.structure.as_deref(), &mut inputs)?, cmd)?,
        Command::Fundsol(cmd) => cmd_fundsol(&load_structure(cli.structure.as_deref(), &mut inputs)?, cmd, seed)?,
        Command::Solve { config } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("kfp-out"));
            cmd_solve(cli.structure.as_deref(), config, cli.seed, &out)?
        }
        Command::Probe(cmd) => cmd_probe(&load_structure(cli.structure.as_deref(), &mut inputs)?, cmd, cli.seed)?,
        Command::Crocco { action, opts } => cmd_crocco(*action, opts, cli.out.as_deref())?,
    };
    inputs.append(&mut outcome.inputs);
    outcome.inputs = inputs;
    Ok(outcome)
}

fn command_name(c: &Command) -> String {
    match c {
        Command::Group(g) => format!("group {}", match g {
            GroupCmd::Norm { .. } => "norm",
            GroupCmd::Compose { .. } => "compose",
            GroupCmd::Dilate { .. } => "dilate",
        }),
        Command::Fundsol(f) => format!("fundsol {}", match f {
            FundsolCmd::Eval { .. } => "eval",
            FundsolCmd::VerifyBounds { .. } => "verify-bounds",
            FundsolCmd::VerifyCov { .. } => "verify-cov",
            FundsolCmd::Chapman { .. } => "chapman",
        }),
        Command::Solve { .. } => "solve".into(),
        Command::Probe(p) => format!("probe {}", match p {
            ProbeCmd::Levelset(_) => "levelset",
            ProbeCmd::Poincare(_) => "poincare",
            ProbeCmd::Sobolev(_) => "sobolev",
            ProbeCmd::Linf(_) => "linf",
            ProbeCmd::Holder(_) => "holder",
            ProbeCmd::Gfunc { .. } => "gfunc",
            ProbeCmd::Potential { .. } => "potential",
        }),
        Command::Crocco { action, .. } => format!("crocco {}", action.to_possible_value().expect("no skipped values").get_name()),
    }
}

/// Arguments without output locations, so that reruns into another
/// directory hash the same.
fn hashed_args(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == "--out" || a == "--manifest" {
            skip = true;
            continue;
        }
        if a.starts_with("--out=") || a.starts_with("--manifest=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}

fn config_hash(args: &[String], inputs: &[PathBuf]) -> String {
    let mut h = Sha256::new();
    for a in hashed_args(args) {
        h.update(a.as_bytes());
        h.update([0]);
    }
    for p in inputs {
        if let Ok(bytes) = fs::read(p) {
            h.update(&bytes);
        }
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Result of a CLI invocation, for the binary and for tests.
#[derive(Debug)]
pub struct Invocation {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
    pub manifest: Option<RunManifest>,
}

/// Parses and runs one command, writing the manifest when a location is
/// known. Nothing is printed.
pub fn invoke<I, T>(argv: I) -> Invocation
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            return if code == 0 {
                Invocation { code, stdout: text, stderr: String::new(), manifest: None }
            } else {
                Invocation { code, stdout: String::new(), stderr: text, manifest: None }
            };
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let start = Instant::now();
    let result = execute(&cli);
    let wall = start.elapsed().as_secs_f64();
    let (code, outcome, error) = match result {
        Ok(o) => (0, o, None),
        Err(e) => (e.code(), Outcome::default(), Some(e.message().to_string())),
    };
    let mut inputs = outcome.inputs.clone();
    if let Some(p) = &cli.structure {
        if !inputs.contains(p) {
            inputs.insert(0, p.clone());
        }
    }
    let manifest = RunManifest {
        command: command_name(&cli.command),
        config_hash: config_hash(&args, &inputs),
        args,
        seed: cli.seed.unwrap_or(DEFAULT_SEED),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_time_s: wall,
        exit_code: code,
        error: error.clone(),
        summaries: outcome.summaries,
    };
    let target = cli.manifest.clone().or_else(|| cli.out.as_ref().map(|d| d.join("manifest.json")));
    let mut stderr = error.map(|e| format!("error: {e}\n")).unwrap_or_default();
    if let Some(path) = target {
        let written = path
            .parent()
            .map_or(Ok(()), |d| if d.as_os_str().is_empty() { Ok(()) } else { fs::create_dir_all(d) })
            .and_then(|_| fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")));
        if let Err(e) = written {
            stderr.push_str(&format!("error: cannot write manifest {}: {e}\n", path.display()));
        }
    }
    Invocation { code, stdout: outcome.stdout, stderr, manifest: Some(manifest) }
}

/// Entry point of the binary; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use std::io::Write;
    let inv = invoke(argv);
    // A closed pipe downstream is not an error of the run.
    if !inv.stdout.is_empty() {
        let _ = writeln!(std::io::stdout(), "{}", inv.stdout.trim_end());
    }
    if !inv.stderr.is_empty() {
        let _ = write!(std::io::stderr(), "{}", inv.stderr);
    }
    inv.code
}
