//! Experiment drivers behind the `dynrec` subcommands: configuration
//! resolution (built-in defaults, then a JSON file, then flags), one runner
//! per experiment, and CSV persistence of the resulting rows.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dictionary::{assemble_dictionary, Basis, BasisIndex, RowSelection};
use crate::differentiation::{add_noise_to_bursts, fill_fd_velocities, NoiseSpec};
use crate::dynamics::{generate_bursts, true_model, InitBox, Rk45Options, SystemSpec, VelocitySource};
use crate::recovery::{
    min_bursts_search, recover_system, required_bursts, run_recovery, trial_success, BoundMode,
    FramePolicy, RecoveryConfig, SigmaPolicy, Strategy,
};
use crate::rng::derive_seed;
use crate::sparse_solver::{min_norm_least_squares, sequential_threshold_ls, support_of, BpdnConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    PhaseTransition,
    FisherTable,
    Localization,
    SingleTrajectory,
    NoiseSweep,
    Compare,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::PhaseTransition,
        ExperimentKind::FisherTable,
        ExperimentKind::Localization,
        ExperimentKind::SingleTrajectory,
        ExperimentKind::NoiseSweep,
        ExperimentKind::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PhaseTransition => "phase-transition",
            ExperimentKind::FisherTable => "fisher-table",
            ExperimentKind::Localization => "localization",
            ExperimentKind::SingleTrajectory => "single-trajectory",
            ExperimentKind::NoiseSweep => "noise-sweep",
            ExperimentKind::Compare => "compare",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

/// `desk` shrinks trial counts and sizes; `paper` uses the published scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemConfig {
    Lorenz96 { n: usize, forcing: f64 },
    Fisher { n: usize, gamma: f64 },
}

impl SystemConfig {
    pub fn n(&self) -> usize {
        match *self {
            SystemConfig::Lorenz96 { n, .. } | SystemConfig::Fisher { n, .. } => n,
        }
    }

    pub fn spec(&self) -> Result<SystemSpec> {
        match *self {
            SystemConfig::Lorenz96 { n, forcing } => SystemSpec::lorenz96(n, forcing),
            SystemConfig::Fisher { n, gamma } => SystemSpec::fisher(n, gamma),
        }
        .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub bursts: usize,
    pub samples: usize,
    pub ell: Option<usize>,
    /// One-based component indices.
    pub components: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub dt: f64,
    pub dt_fine: Option<f64>,
    pub init: InitBox,
    pub velocity: VelocitySource,
    pub rows: RowSelection,
    pub frame: FramePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub basis: Basis,
    pub sigma: SigmaPolicy,
    pub tau_supp: f64,
    pub rel_tol: f64,
    pub debias: bool,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol_residual: f64,
    pub tol_gap: f64,
    pub rk_tol: f64,
    pub c_eff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSettings {
    /// Noise in percent applied to single runs.
    pub ratio: Option<f64>,
    /// Levels swept by `noise-sweep`, in percent.
    pub levels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentParams {
    pub seed: u64,
    pub trials: usize,
    pub k_values: Vec<usize>,
    pub gammas: Vec<f64>,
    pub ells: Vec<usize>,
    /// Sparsity used by the burst-count bound and the localization ratio.
    pub sparsity: usize,
    /// First K of the minimum-K scan; `sparsity + 1` when unset.
    pub k_start: Option<usize>,
    /// The scan gives up above this multiple of the effective bound.
    pub k_cap_factor: f64,
    pub lambda: f64,
    pub stls_max_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub strategy: Strategy,
    pub dimensions: Dimensions,
    pub sampling: Sampling,
    pub solver: SolverSettings,
    pub noise: NoiseSettings,
    pub experiment: ExperimentParams,
}

fn base_defaults() -> Value {
    json!({
        "system": {"kind": "lorenz96", "n": 50, "forcing": 8.0},
        "strategy": "random-bursts",
        "dimensions": {"bursts": 100, "samples": 5, "ell": null, "components": [10]},
        "sampling": {
            "dt": 0.001,
            "dt_fine": null,
            "init": {"lo": -1.0, "hi": 1.0},
            "velocity": "finite-difference",
            "rows": "all-samples",
            "frame": "init-box"
        },
        "solver": {
            "basis": "legendre",
            "sigma": "auto",
            "tau_supp": 1e-3,
            "rel_tol": 0.01,
            "debias": true,
            "max_outer": 40,
            "max_inner": 10000,
            "tol_residual": 1e-6,
            "tol_gap": 1e-9,
            "rk_tol": 1e-9,
            "c_eff": 3.2
        },
        "noise": {"ratio": null, "levels": []},
        "experiment": {
            "seed": 0,
            "trials": 1,
            "k_values": [],
            "gammas": [],
            "ells": [],
            "sparsity": 4,
            "k_start": null,
            "k_cap_factor": 4.0,
            "lambda": 0.05,
            "stls_max_iters": 50
        }
    })
}

fn experiment_defaults(kind: ExperimentKind, preset: Preset) -> Value {
    let desk = preset == Preset::Desk;
    match kind {
        ExperimentKind::PhaseTransition => json!({
            "experiment": if desk {
                json!({"trials": 20, "k_values": [20, 40, 60, 80, 100]})
            } else {
                json!({"trials": 100, "k_values": (1..=15).map(|i| 10 * i).collect::<Vec<_>>()})
            }
        }),
        ExperimentKind::FisherTable => json!({
            "system": {"kind": "fisher", "n": if desk { 100 } else { 200 }, "gamma": 0.1},
            "dimensions": {"bursts": 159, "samples": 5, "components": [1]},
            "sampling": {"init": {"lo": 0.0, "hi": 1.0}},
            "experiment": {"gammas": [0.25, 0.1, 0.01, 0.0], "sparsity": 5}
        }),
        ExperimentKind::Localization => json!({
            "system": {"kind": "fisher", "n": 1000, "gamma": 0.1},
            "strategy": "localized",
            "dimensions": {"bursts": 30, "samples": 5, "ell": 11, "components": [1]},
            "sampling": {"init": {"lo": 0.0, "hi": 1.0}},
            "solver": {"sigma": {"auto-scaled": 2.0}},
            "experiment": {
                "trials": 10,
                "ells": if desk { json!([11]) } else { json!([11, 31, 51, 101]) },
                "sparsity": 5
            }
        }),
        ExperimentKind::SingleTrajectory => json!({
            "strategy": "single-trajectory",
            "dimensions": {"bursts": 1, "samples": 500, "components": [1]},
            "sampling": {"dt": 1.0, "dt_fine": 0.01, "velocity": "exact-observed", "frame": "data-box"}
        }),
        ExperimentKind::NoiseSweep => json!({
            "dimensions": {"bursts": 200, "samples": 3, "components": [10]},
            "noise": {"levels": [2.5, 5.0, 6.0, 7.0]},
            "experiment": {"trials": 10}
        }),
        ExperimentKind::Compare => json!({
            "dimensions": {"bursts": 100, "samples": 5, "components": [35]}
        }),
    }
}

/// Recursive object merge; anything that is not an object on both sides is
/// replaced by `patch`.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, p) => *slot = p.clone(),
    }
}

/// [`merge_json`], except that a `system` block naming its `kind` replaces
/// the old one, so parameters of the previous kind do not leak into it.
fn overlay(base: &mut Value, patch: &Value) {
    if let Some(sys) = patch.get("system").filter(|s| s.get("kind").is_some()) {
        base["system"] = sys.clone();
    }
    merge_json(base, patch);
}

/// Built-in defaults for `(kind, preset)` as JSON.
pub fn default_config_value(kind: ExperimentKind, preset: Preset) -> Value {
    let mut v = base_defaults();
    overlay(&mut v, &experiment_defaults(kind, preset));
    v
}

/// Defaults, then the config file, then the seed flag.
pub fn resolve_config(
    kind: ExperimentKind,
    preset: Preset,
    file: Option<&Value>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut v = default_config_value(kind, preset);
    if let Some(f) = file {
        if !f.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        overlay(&mut v, f);
    }
    if let Some(s) = seed {
        v["experiment"]["seed"] = json!(s);
    }
    let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.spec()?;
        let n = self.system.n();
        if let Some(cs) = &self.dimensions.components {
            if cs.is_empty() || cs.iter().any(|&c| c == 0 || c > n) {
                return Err(Error::Config(format!("components must lie in 1..={n}, got {cs:?}")));
            }
        }
        if !(self.sampling.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.sampling.dt)));
        }
        if self.experiment.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if !(self.experiment.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        self.recovery_config()?.validate()
    }

    /// Zero-based components selected by the config; all when unset.
    pub fn components(&self) -> Vec<usize> {
        match &self.dimensions.components {
            Some(cs) => cs.iter().map(|c| c - 1).collect(),
            None => (0..self.system.n()).collect(),
        }
    }

    pub fn recovery_config(&self) -> Result<RecoveryConfig> {
        let s = &self.solver;
        let mut r = RecoveryConfig::new(
            self.system.spec()?,
            self.dimensions.bursts,
            self.dimensions.samples,
            self.sampling.dt,
        );
        r.strategy = self.strategy;
        r.basis = s.basis;
        r.ell = self.dimensions.ell;
        r.rows = self.sampling.rows;
        r.velocity = self.sampling.velocity;
        r.dt_fine = self.sampling.dt_fine;
        r.init = self.sampling.init;
        r.frame = self.sampling.frame;
        r.sigma = s.sigma;
        r.tau_supp = s.tau_supp;
        r.rel_tol = s.rel_tol;
        r.noise = self.noise.ratio;
        r.seed = self.experiment.seed;
        r.c_eff = s.c_eff;
        r.debias = s.debias;
        r.solver = BpdnConfig {
            sigma: 0.0,
            max_outer: s.max_outer,
            max_inner: s.max_inner,
            tol_residual: s.tol_residual,
            tol_gap: s.tol_gap,
        };
        r.rk = Rk45Options {
            tol: s.rk_tol,
            ..Rk45Options::default()
        };
        r.components = Some(self.components());
        Ok(r)
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn field(rec: &csv::StringRecord, i: usize) -> Result<&str> {
    rec.get(i)
        .ok_or_else(|| Error::Shape(format!("CSV record has {} fields, need {}", rec.len(), i + 1)))
}

fn parse<T: FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let s = field(rec, i)?;
    s.parse()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse CSV field {i}: {s:?}")))
}

fn parse_opt<T: FromStr>(rec: &csv::StringRecord, i: usize) -> Result<Option<T>> {
    if field(rec, i)?.is_empty() {
        Ok(None)
    } else {
        parse(rec, i).map(Some)
    }
}

fn parse_yn(rec: &csv::StringRecord, i: usize) -> Result<bool> {
    match field(rec, i)? {
        "Y" => Ok(true),
        "N" => Ok(false),
        s => Err(Error::InvalidArgument(format!("expected Y or N, got {s:?}"))),
    }
}

fn yn(b: bool) -> String {
    if b { "Y" } else { "N" }.to_string()
}

/// A fixed-schema CSV row.
pub trait CsvRow: Sized {
    const HEADER: &'static [&'static str];
    fn to_record(&self) -> Vec<String>;
    fn from_record(rec: &csv::StringRecord) -> Result<Self>;
}

pub fn write_rows<R: CsvRow, W: Write>(rows: &[R], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(R::HEADER)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: CsvRow, Rd: Read>(input: Rd) -> Result<Vec<R>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(R::HEADER.iter().copied()) {
        return Err(Error::Shape(format!(
            "CSV header {:?} does not match {:?}",
            header.iter().collect::<Vec<_>>(),
            R::HEADER
        )));
    }
    rd.records().map(|rec| R::from_record(&rec?)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRow {
    pub k: usize,
    pub trials: usize,
    pub successes: usize,
    pub probability: f64,
}

impl CsvRow for PhaseRow {
    const HEADER: &'static [&'static str] = &["K", "trials", "successes", "probability"];

    fn to_record(&self) -> Vec<String> {
        vec![
            self.k.to_string(),
            self.trials.to_string(),
            self.successes.to_string(),
            fmt_f64(self.probability),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        Ok(Self {
            k: parse(rec, 0)?,
            trials: parse(rec, 1)?,
            successes: parse(rec, 2)?,
            probability: parse(rec, 3)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherRow {
    pub term: BasisIndex,
    pub gamma: f64,
    pub recovered: f64,
    pub debiased: f64,
    pub true_value: f64,
    pub converged: bool,
}

impl CsvRow for FisherRow {
    const HEADER: &'static [&'static str] = &["term", "gamma", "recovered", "debiased", "true", "converged"];

    fn to_record(&self) -> Vec<String> {
        vec![
            self.term.to_string(),
            fmt_f64(self.gamma),
            fmt_f64(self.recovered),
            fmt_f64(self.debiased),
            fmt_f64(self.true_value),
            yn(self.converged),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        Ok(Self {
            term: parse(rec, 0)?,
            gamma: parse(rec, 1)?,
            recovered: parse(rec, 2)?,
            debiased: parse(rec, 3)?,
            true_value: parse(rec, 4)?,
            converged: parse_yn(rec, 5)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationRow {
    pub ell: usize,
    /// `None` when the scan hit its cap.
    pub min_k: Option<usize>,
    pub ratio: Option<f64>,
}

impl CsvRow for LocalizationRow {
    const HEADER: &'static [&'static str] = &["ell", "min_K", "ratio"];

    fn to_record(&self) -> Vec<String> {
        vec![
            self.ell.to_string(),
            self.min_k.map(|k| k.to_string()).unwrap_or_default(),
            fmt_opt(self.ratio),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        Ok(Self {
            ell: parse(rec, 0)?,
            min_k: parse_opt(rec, 1)?,
            ratio: parse_opt(rec, 2)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermRow {
    pub term: BasisIndex,
    pub recovered: f64,
    pub true_value: f64,
    pub pre_debias: f64,
}

impl CsvRow for TermRow {
    const HEADER: &'static [&'static str] = &["term", "recovered", "true", "pre_debias"];

    fn to_record(&self) -> Vec<String> {
        vec![
            self.term.to_string(),
            fmt_f64(self.recovered),
            fmt_f64(self.true_value),
            fmt_f64(self.pre_debias),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        Ok(Self {
            term: parse(rec, 0)?,
            recovered: parse(rec, 1)?,
            true_value: parse(rec, 2)?,
            pre_debias: parse(rec, 3)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub noise_pct: f64,
    /// Median over trials.
    pub rel_l2_pct: f64,
    pub support_ok: bool,
    pub support_hits: usize,
    pub trials: usize,
}

impl CsvRow for NoiseRow {
    const HEADER: &'static [&'static str] = &["noise_pct", "rel_l2_pct", "support_ok", "support_hits", "trials"];

    fn to_record(&self) -> Vec<String> {
        vec![
            fmt_f64(self.noise_pct),
            fmt_f64(self.rel_l2_pct),
            yn(self.support_ok),
            self.support_hits.to_string(),
            self.trials.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        Ok(Self {
            noise_pct: parse(rec, 0)?,
            rel_l2_pct: parse(rec, 1)?,
            support_ok: parse_yn(rec, 2)?,
            support_hits: parse(rec, 3)?,
            trials: parse(rec, 4)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LBp,
    LeastSquares,
    Stls,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::LBp => "l-bp",
            Method::LeastSquares => "least-squares",
            Method::Stls => "stls",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::LBp, Method::LeastSquares, Method::Stls]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: Method,
    /// Zero-based position in the dictionary column order.
    pub column: usize,
    pub coefficient: f64,
    pub term: BasisIndex,
}

impl CsvRow for CompareRow {
    const HEADER: &'static [&'static str] = &["method", "column", "coefficient", "term"];

    fn to_record(&self) -> Vec<String> {
        vec![
            self.method.name().to_string(),
            self.column.to_string(),
            fmt_f64(self.coefficient),
            self.term.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        Ok(Self {
            method: parse(rec, 0)?,
            column: parse(rec, 1)?,
            coefficient: parse(rec, 2)?,
            term: parse(rec, 3)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Rows {
    Phase(Vec<PhaseRow>),
    Fisher(Vec<FisherRow>),
    Localization(Vec<LocalizationRow>),
    Terms(Vec<TermRow>),
    Noise(Vec<NoiseRow>),
    Compare(Vec<CompareRow>),
}

impl Rows {
    pub fn len(&self) -> usize {
        match self {
            Rows::Phase(r) => r.len(),
            Rows::Fisher(r) => r.len(),
            Rows::Localization(r) => r.len(),
            Rows::Terms(r) => r.len(),
            Rows::Noise(r) => r.len(),
            Rows::Compare(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        match self {
            Rows::Phase(r) => write_rows(r, out),
            Rows::Fisher(r) => write_rows(r, out),
            Rows::Localization(r) => write_rows(r, out),
            Rows::Terms(r) => write_rows(r, out),
            Rows::Noise(r) => write_rows(r, out),
            Rows::Compare(r) => write_rows(r, out),
        }
    }

    /// Parses CSV written for `kind`.
    pub fn read_csv<Rd: Read>(kind: ExperimentKind, input: Rd) -> Result<Self> {
        Ok(match kind {
            ExperimentKind::PhaseTransition => Rows::Phase(read_rows(input)?),
            ExperimentKind::FisherTable => Rows::Fisher(read_rows(input)?),
            ExperimentKind::Localization => Rows::Localization(read_rows(input)?),
            ExperimentKind::SingleTrajectory => Rows::Terms(read_rows(input)?),
            ExperimentKind::NoiseSweep => Rows::Noise(read_rows(input)?),
            ExperimentKind::Compare => Rows::Compare(read_rows(input)?),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub params: ExperimentConfig,
    pub rows: Rows,
    pub seed: u64,
    pub wall_time: Duration,
    /// Human-readable findings for the terminal.
    pub summary: Vec<String>,
}

impl ExperimentReport {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.rows.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.rows.write_csv(std::io::BufWriter::new(file))
    }
}

pub fn run_experiment(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let (rows, summary) = match kind {
        ExperimentKind::PhaseTransition => run_phase_transition(cfg)?,
        ExperimentKind::FisherTable => run_fisher_table(cfg)?,
        ExperimentKind::Localization => run_localization(cfg)?,
        ExperimentKind::SingleTrajectory => run_single_trajectory(cfg)?,
        ExperimentKind::NoiseSweep => run_noise_sweep(cfg)?,
        ExperimentKind::Compare => run_compare(cfg)?,
    };
    Ok(ExperimentReport {
        experiment: kind,
        params: cfg.clone(),
        rows,
        seed: cfg.experiment.seed,
        wall_time: start.elapsed(),
        summary,
    })
}

type Output = (Rows, Vec<String>);

/// Success fraction per K; trial `t` at `K` uses `derive_seed(seed, [K, t])`.
pub fn run_phase_transition(cfg: &ExperimentConfig) -> Result<Output> {
    let base = cfg.recovery_config()?;
    if cfg.experiment.k_values.is_empty() {
        return Err(Error::Config("phase-transition needs experiment.k_values".into()));
    }
    let trials = cfg.experiment.trials;
    let rows: Vec<PhaseRow> = cfg
        .experiment
        .k_values
        .iter()
        .map(|&k| {
            let mut c = base.clone();
            c.bursts = k;
            let successes = (0..trials)
                .into_par_iter()
                .filter(|&t| trial_success(&c, derive_seed(cfg.experiment.seed, &[k as u64, t as u64])))
                .count();
            PhaseRow {
                k,
                trials,
                successes,
                probability: successes as f64 / trials as f64,
            }
        })
        .collect();
    let summary = rows
        .iter()
        .map(|r| format!("K = {:4}: {}/{} successes", r.k, r.successes, r.trials))
        .collect();
    Ok((Rows::Phase(rows), summary))
}

/// Columns worth a table row: the constant, the true support and anything
/// recovered above the support threshold.
fn reported_terms(
    columns: &[BasisIndex],
    truth: &[f64],
    vectors: &[&[f64]],
    tau_supp: f64,
) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..columns.len())
        .filter(|&p| columns[p] == BasisIndex::Const || truth[p] != 0.0)
        .collect();
    for v in vectors {
        keep.extend(support_of(v, tau_supp));
    }
    keep.sort_unstable();
    keep.dedup();
    keep
}

/// First-component coefficients for each γ, before and after debiasing.
pub fn run_fisher_table(cfg: &ExperimentConfig) -> Result<Output> {
    let n = match cfg.system {
        SystemConfig::Fisher { n, .. } => n,
        _ => return Err(Error::Config("fisher-table needs a fisher system".into())),
    };
    if cfg.experiment.gammas.is_empty() {
        return Err(Error::Config("fisher-table needs experiment.gammas".into()));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &gamma in &cfg.experiment.gammas {
        let mut c = cfg.clone();
        c.system = SystemConfig::Fisher { n, gamma };
        let rc = c.recovery_config()?;
        let res = run_recovery(&rc)?;
        let truth = true_model(&rc.system);
        for comp in &res.components {
            let t = truth.column_on(comp.component, &comp.columns);
            for p in reported_terms(&comp.columns, &t, &[&comp.pre_debias, &comp.coefficients], rc.tau_supp) {
                rows.push(FisherRow {
                    term: comp.columns[p],
                    gamma,
                    recovered: comp.pre_debias[p],
                    debiased: comp.coefficients[p],
                    true_value: t[p],
                    converged: comp.converged,
                });
            }
            summary.push(format!(
                "gamma = {gamma}: component {} support {} (rel l2 {:.3e}%)",
                comp.component + 1,
                if comp.success == Some(true) { "exact" } else { "wrong" },
                comp.rel_l2.unwrap_or(f64::NAN)
            ));
        }
    }
    Ok((Rows::Fisher(rows), summary))
}

/// Minimum K with `trials`/`trials` successes per window width.
pub fn run_localization(cfg: &ExperimentConfig) -> Result<Output> {
    if cfg.experiment.ells.is_empty() {
        return Err(Error::Config("localization needs experiment.ells".into()));
    }
    let s = cfg.experiment.sparsity;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &ell in &cfg.experiment.ells {
        let mut c = cfg.clone();
        c.strategy = Strategy::Localized;
        c.dimensions.ell = Some(ell);
        let rc = c.recovery_config()?;
        rc.validate()?;
        let bound = required_bursts(s, ell, 0.5, BoundMode::Effective, rc.c_eff)
            .map_err(|e| Error::Config(e.to_string()))?;
        let k_max = (cfg.experiment.k_cap_factor * bound as f64).ceil() as usize;
        let k_start = cfg.experiment.k_start.unwrap_or(s + 1);
        let min_k = min_bursts_search(
            &rc,
            k_start,
            k_max,
            cfg.experiment.trials,
            derive_seed(cfg.experiment.seed, &[ell as u64]),
        );
        let ratio = min_k.map(|k| k as f64 / (s as f64 * (ell as f64).ln()));
        summary.push(match (min_k, ratio) {
            (Some(k), Some(r)) => format!("ell = {ell}: min K = {k}, ratio {r:.2}"),
            _ => format!("ell = {ell}: unresolved up to K = {k_max}"),
        });
        rows.push(LocalizationRow { ell, min_k, ratio });
    }
    Ok((Rows::Localization(rows), summary))
}

/// Coefficients recovered from one long trajectory.
pub fn run_single_trajectory(cfg: &ExperimentConfig) -> Result<Output> {
    let mut c = cfg.clone();
    c.strategy = Strategy::SingleTrajectory;
    c.dimensions.bursts = 1;
    let rc = c.recovery_config()?;
    let res = run_recovery(&rc)?;
    let truth = true_model(&rc.system);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for comp in &res.components {
        let t = truth.column_on(comp.component, &comp.columns);
        for p in reported_terms(&comp.columns, &t, &[&comp.pre_debias, &comp.coefficients], rc.tau_supp) {
            rows.push(TermRow {
                term: comp.columns[p],
                recovered: comp.coefficients[p],
                true_value: t[p],
                pre_debias: comp.pre_debias[p],
            });
        }
        summary.push(format!(
            "component {}: support {}, converged {}",
            comp.component + 1,
            if comp.success == Some(true) { "exact" } else { "wrong" },
            comp.converged
        ));
    }
    Ok((Rows::Terms(rows), summary))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median relative error and top-s support hits per noise level. Trial `t`
/// at level index `i` uses `derive_seed(seed, [i, t])`.
pub fn run_noise_sweep(cfg: &ExperimentConfig) -> Result<Output> {
    if cfg.noise.levels.is_empty() {
        return Err(Error::Config("noise-sweep needs noise.levels".into()));
    }
    let base = cfg.recovery_config()?;
    let truth = true_model(&base.system);
    let trials = cfg.experiment.trials;
    let mut rows = Vec::new();
    for (i, &level) in cfg.noise.levels.iter().enumerate() {
        let outcomes: Vec<(f64, bool)> = (0..trials)
            .into_par_iter()
            .flat_map_iter(|t| {
                let mut c = base.clone();
                c.noise = Some(level);
                c.seed = derive_seed(cfg.experiment.seed, &[i as u64, t as u64]);
                let per_component: Vec<(f64, bool)> = match run_recovery(&c) {
                    Ok(res) => res
                        .components
                        .iter()
                        .map(|comp| {
                            let s = truth.sparsity(comp.component);
                            let mut true_support = truth.support(comp.component);
                            true_support.sort();
                            (
                                comp.rel_l2.unwrap_or(f64::INFINITY),
                                comp.top_k(s) == true_support,
                            )
                        })
                        .collect(),
                    Err(_) => vec![(f64::INFINITY, false); c.components.as_ref().map_or(0, Vec::len)],
                };
                per_component
            })
            .collect();
        let hits = outcomes.iter().filter(|o| o.1).count();
        let count = outcomes.len();
        rows.push(NoiseRow {
            noise_pct: level,
            rel_l2_pct: median(outcomes.iter().map(|o| o.0).collect()),
            support_ok: 2 * hits > count,
            support_hits: hits,
            trials: count,
        });
    }
    let summary = rows
        .iter()
        .map(|r| {
            format!(
                "noise {:.2}%: median rel l2 {:.3}%, support {} ({}/{})",
                r.noise_pct,
                r.rel_l2_pct,
                if r.support_ok { "Y" } else { "N" },
                r.support_hits,
                r.trials
            )
        })
        .collect();
    Ok((Rows::Noise(rows), summary))
}

/// L-BP, minimum-norm least squares and STLS on the same bursts.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<Output> {
    let mut rc = cfg.recovery_config()?;
    let mut bursts = generate_bursts(&rc.system, &rc.burst_options())?;
    if let Some(ratio) = rc.noise.filter(|&r| r > 0.0) {
        add_noise_to_bursts(
            &mut bursts,
            &NoiseSpec {
                ratio,
                seed: derive_seed(rc.seed, &[1]),
            },
        )?;
    }
    if bursts.iter().any(|b| b.velocities.is_none()) {
        fill_fd_velocities(&mut bursts)?;
    }
    rc.noise = None;
    let lbp = recover_system(bursts.clone(), &rc)?;
    let (dict, v) = assemble_dictionary(&bursts, Basis::Monomial, None, rc.rows, None)?;

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let count_big = |c: &[f64]| support_of(c, 1e-3).len();
    for comp in &lbp.components {
        let j = comp.component;
        let vj = v.column(j);
        let ls = min_norm_least_squares(&dict.values, &vj);
        let stls = sequential_threshold_ls(&dict.values, &vj, cfg.experiment.lambda, cfg.experiment.stls_max_iters);
        let lbp_full: Vec<f64> = dict.columns.iter().map(|&c| comp.coefficient(c)).collect();
        for (method, coeffs) in [(Method::LBp, &lbp_full), (Method::LeastSquares, &ls), (Method::Stls, &stls)] {
            rows.extend(coeffs.iter().enumerate().map(|(p, &x)| CompareRow {
                method,
                column: p,
                coefficient: x,
                term: dict.columns[p],
            }));
        }
        summary.push(format!(
            "component {} ({} rows x {} columns): entries above 1e-3 max: l-bp {}, least-squares {}, stls {}",
            j + 1,
            dict.values.rows(),
            dict.values.cols(),
            count_big(&lbp_full),
            count_big(&ls),
            count_big(&stls)
        ));
    }
    Ok((Rows::Compare(rows), summary))
}

/// One-line result of the `bound` subcommand.
pub fn bound_report(s: usize, n_columns: usize, eps: f64, mode: BoundMode, c: f64) -> Result<usize> {
    required_bursts(s, n_columns, eps, mode, c).map_err(|e| Error::Config(e.to_string()))
}
