//! Scenario runner behind the `bfflow` binary: INI-style configuration,
//! deterministic scenario execution, CSV/SVG output and PASS/FAIL summaries.
//!
//! Exit codes: 0 all checks passed, 1 a check failed, 2 runtime error
//! (blow-up, non-convergence, I/O), 3 configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::analysis::{
    assemble_operator, e_norm, ensemble_study, fit_decay, fit_envelope, geometric_trajectory,
    semigroup_decay, smooth_initial_state, smoothing_report, DecayFit, EnergyAuditor, WEIGHT_T2_UT, WEIGHT_T83_UT,
};
use crate::dynamics::{
    integrate, run_exp_split, run_split, Scheme, SimState, SolverConfig, TruncatedProblem, FullSystem,
};
use crate::error::{Error, Result};
use crate::grid::{project_mean_zero, Grid, SineBasis, VectorField};
use crate::physics::{certify_eps, EnergyEvaluator, Forcing, MediumMatrix, NonlinearityParams};
use crate::reference::build_propagator;
use crate::rng::SeededRng;

/// Default semi-implicit step when `dt = auto`.
pub const SEMI_IMPLICIT_DT: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum ForcingSpec {
    Zero,
    /// Smooth random field (sine modes below `kmax`) with L² norm `amplitude`.
    FixedRandom { seed: u64, amplitude: f64, kmax: usize },
    /// Whitespace or comma separated nodal values, component-major.
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialKind {
    Zero,
    /// Low sine modes, scaled to a target `E` norm.
    Smooth,
    /// `u = 0`, white-noise mean-zero pressure with nodal deviation `amplitude`.
    WhiteNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialSpec {
    pub kind: InitialKind,
    pub amplitudes: Vec<f64>,
    pub seed: u64,
    pub kmax: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub t_max: f64,
    pub sample_every: f64,
    /// Steps between snapshots; 0 derives it from `sample_every`.
    pub snapshot_stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyOptions {
    /// `None`: certify by sampling and use half the certified value.
    pub eps: Option<f64>,
    pub eps_samples: usize,
    pub gp_constant: f64,
    pub gp_stride: usize,
    pub ball_factor: f64,
    pub t_enter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumOptions {
    pub deltas: Vec<f64>,
    pub t_max: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions {
    pub dts: Vec<f64>,
    pub gate_dt: f64,
    pub sample_every: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOptions {
    pub shift: f64,
    pub delta: f64,
    pub p_amplitude: f64,
    pub t_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingOptions {
    pub n_fine: usize,
    pub levels: usize,
    pub convective_check: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOptions {
    pub size: usize,
    pub amp_min: f64,
    pub amp_max: f64,
    pub reference: usize,
    pub fit_start: f64,
    pub check_time: f64,
}

/// Gates applied by the scenarios. Defaults mirror the acceptance criteria.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub oracle_error: f64,
    pub oracle_order: f64,
    pub oracle_order_tol: f64,
    pub symmetry_defect: f64,
    pub audit_ratio: f64,
    pub gp_violation: f64,
    pub approach_r2: f64,
    pub envelope_excess: f64,
    pub hat_r2: f64,
    pub r_growth: f64,
    pub smoothing_factor: f64,
    pub attraction_ratio: f64,
    pub attraction_r2: f64,
    pub recombination: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            oracle_error: 1e-6,
            oracle_order: 4.0,
            oracle_order_tol: 0.3,
            symmetry_defect: 1e-12,
            audit_ratio: 8.0,
            gp_violation: 1e-8,
            approach_r2: 0.9,
            envelope_excess: 0.05,
            hat_r2: 0.9,
            r_growth: 10.0,
            smoothing_factor: 2.0,
            attraction_ratio: 1e-3,
            attraction_r2: 0.8,
            recombination: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub grid: Grid,
    pub medium: MediumMatrix,
    pub params: NonlinearityParams,
    pub convective: bool,
    pub forcing: ForcingSpec,
    pub solver: SolverConfig,
    /// `None` selects a stable step automatically.
    pub dt: Option<f64>,
    pub run: RunOptions,
    pub initial: InitialSpec,
    pub energy: EnergyOptions,
    pub spectrum: SpectrumOptions,
    pub audit_levels: usize,
    pub oracle: OracleOptions,
    pub lipschitz_distance: f64,
    pub split: SplitOptions,
    pub expsplit_distance: f64,
    pub smoothing: SmoothingOptions,
    pub ensemble: EnsembleOptions,
    pub thresholds: Thresholds,
}

/// Unvalidated values as read from the file.
struct Raw {
    dim: usize,
    n: usize,
    entries: Option<Vec<f64>>,
    diagonal: Option<Vec<f64>>,
    alpha: f64,
    beta: f64,
    gamma: f64,
    l: f64,
    convective: bool,
    forcing_kind: String,
    forcing_seed: u64,
    forcing_amplitude: f64,
    forcing_kmax: usize,
    forcing_path: Option<PathBuf>,
    scheme: Scheme,
    dt: Option<f64>,
    solver: SolverConfig,
    initial_kind: String,
    cfg: ScenarioConfigRest,
}

/// Everything that needs no cross-field validation.
struct ScenarioConfigRest {
    run: RunOptions,
    initial: InitialSpec,
    energy: EnergyOptions,
    spectrum: SpectrumOptions,
    audit_levels: usize,
    oracle: OracleOptions,
    lipschitz_distance: f64,
    split: SplitOptions,
    expsplit_distance: f64,
    smoothing: SmoothingOptions,
    ensemble: EnsembleOptions,
    thresholds: Thresholds,
}

impl Default for Raw {
    fn default() -> Self {
        Self {
            dim: 2,
            n: 16,
            entries: None,
            diagonal: None,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.0,
            l: 2.0,
            convective: false,
            forcing_kind: "zero".into(),
            forcing_seed: 7,
            forcing_amplitude: 1.0,
            forcing_kmax: 4,
            forcing_path: None,
            scheme: Scheme::Rk4,
            dt: None,
            solver: SolverConfig::default(),
            initial_kind: "smooth".into(),
            cfg: ScenarioConfigRest {
                run: RunOptions { t_max: 1.0, sample_every: 0.1, snapshot_stride: 0 },
                initial: InitialSpec { kind: InitialKind::Smooth, amplitudes: vec![1.0], seed: 1, kmax: 3 },
                energy: EnergyOptions {
                    eps: None,
                    eps_samples: 50,
                    gp_constant: 1.0,
                    gp_stride: 50,
                    ball_factor: 2.0,
                    t_enter: 20.0,
                },
                spectrum: SpectrumOptions { deltas: vec![0.0, 0.25, 0.5, 0.75, 1.0], t_max: 20.0, samples: 41 },
                audit_levels: 3,
                oracle: OracleOptions { dts: vec![8e-4, 4e-4, 2e-4, 1e-4], gate_dt: 1e-4, sample_every: 0.02 },
                lipschitz_distance: 1e-3,
                split: SplitOptions { shift: 1.0, delta: 0.25, p_amplitude: 5.0, t_ref: 10.0 },
                expsplit_distance: 0.1,
                smoothing: SmoothingOptions { n_fine: 32, levels: 24, convective_check: true },
                ensemble: EnsembleOptions {
                    size: 16,
                    amp_min: 0.1,
                    amp_max: 10.0,
                    reference: 0,
                    fit_start: 0.0,
                    check_time: 1.0,
                },
                thresholds: Thresholds::default(),
            },
        }
    }
}

const SECTIONS: &[&str] = &[
    "grid",
    "medium",
    "nonlinearity",
    "forcing",
    "solver",
    "run",
    "initial",
    "energy",
    "spectrum",
    "audit",
    "oracle",
    "lipschitz",
    "split",
    "expsplit",
    "smoothing",
    "ensemble",
    "thresholds",
];

type Parsed<T> = std::result::Result<T, String>;

fn num<T: std::str::FromStr>(v: &str) -> Parsed<T> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn real(v: &str) -> Parsed<f64> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{v:?} is not a finite number"))
    }
}

fn list(v: &str) -> Parsed<Vec<f64>> {
    v.split(',').map(|s| real(s.trim())).collect()
}

fn flag(v: &str) -> Parsed<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn auto_or_real(v: &str) -> Parsed<Option<f64>> {
    if v == "auto" {
        Ok(None)
    } else {
        real(v).map(Some)
    }
}

fn set(raw: &mut Raw, section: &str, key: &str, v: &str) -> Parsed<()> {
    let c = &mut raw.cfg;
    let th = &mut c.thresholds;
    match (section, key) {
        ("grid", "dim") => raw.dim = num(v)?,
        ("grid", "n") => raw.n = num(v)?,
        ("medium", "entries") => raw.entries = Some(list(v)?),
        ("medium", "diagonal") => raw.diagonal = Some(list(v)?),
        ("nonlinearity", "alpha") => raw.alpha = real(v)?,
        ("nonlinearity", "beta") => raw.beta = real(v)?,
        ("nonlinearity", "gamma") => raw.gamma = real(v)?,
        ("nonlinearity", "l") => raw.l = real(v)?,
        ("nonlinearity", "convective") => raw.convective = flag(v)?,
        ("forcing", "kind") => raw.forcing_kind = v.to_string(),
        ("forcing", "seed") => raw.forcing_seed = num(v)?,
        ("forcing", "amplitude") => raw.forcing_amplitude = real(v)?,
        ("forcing", "kmax") => raw.forcing_kmax = num(v)?,
        ("forcing", "path") => raw.forcing_path = Some(PathBuf::from(v)),
        ("solver", "dt") => raw.dt = auto_or_real(v)?,
        ("solver", "scheme") => raw.scheme = v.parse().map_err(|e: Error| e.to_string())?,
        ("solver", "newton_tol") => raw.solver.newton_tol = real(v)?,
        ("solver", "newton_max") => raw.solver.newton_max = num(v)?,
        ("solver", "cg_tol") => raw.solver.cg_tol = real(v)?,
        ("solver", "cfl_safety") => raw.solver.cfl_safety = real(v)?,
        ("run", "t_max") => c.run.t_max = real(v)?,
        ("run", "sample_every") => c.run.sample_every = real(v)?,
        ("run", "snapshot_stride") => c.run.snapshot_stride = num(v)?,
        ("initial", "kind") => raw.initial_kind = v.to_string(),
        ("initial", "amplitudes") => c.initial.amplitudes = list(v)?,
        ("initial", "seed") => c.initial.seed = num(v)?,
        ("initial", "kmax") => c.initial.kmax = num(v)?,
        ("energy", "eps") => c.energy.eps = auto_or_real(v)?,
        ("energy", "eps_samples") => c.energy.eps_samples = num(v)?,
        ("energy", "gp_constant") => c.energy.gp_constant = real(v)?,
        ("energy", "gp_stride") => c.energy.gp_stride = num(v)?,
        ("energy", "ball_factor") => c.energy.ball_factor = real(v)?,
        ("energy", "t_enter") => c.energy.t_enter = real(v)?,
        ("spectrum", "deltas") => c.spectrum.deltas = list(v)?,
        ("spectrum", "t_max") => c.spectrum.t_max = real(v)?,
        ("spectrum", "samples") => c.spectrum.samples = num(v)?,
        ("audit", "levels") => c.audit_levels = num(v)?,
        ("oracle", "dts") => c.oracle.dts = list(v)?,
        ("oracle", "gate_dt") => c.oracle.gate_dt = real(v)?,
        ("oracle", "sample_every") => c.oracle.sample_every = real(v)?,
        ("lipschitz", "distance") => c.lipschitz_distance = real(v)?,
        ("split", "shift") => c.split.shift = real(v)?,
        ("split", "delta") => c.split.delta = real(v)?,
        ("split", "p_amplitude") => c.split.p_amplitude = real(v)?,
        ("split", "t_ref") => c.split.t_ref = real(v)?,
        ("expsplit", "distance") => c.expsplit_distance = real(v)?,
        ("smoothing", "n_fine") => c.smoothing.n_fine = num(v)?,
        ("smoothing", "levels") => c.smoothing.levels = num(v)?,
        ("smoothing", "convective_check") => c.smoothing.convective_check = flag(v)?,
        ("ensemble", "size") => c.ensemble.size = num(v)?,
        ("ensemble", "amp_min") => c.ensemble.amp_min = real(v)?,
        ("ensemble", "amp_max") => c.ensemble.amp_max = real(v)?,
        ("ensemble", "reference") => c.ensemble.reference = num(v)?,
        ("ensemble", "fit_start") => c.ensemble.fit_start = real(v)?,
        ("ensemble", "check_time") => c.ensemble.check_time = real(v)?,
        ("thresholds", "oracle_error") => th.oracle_error = real(v)?,
        ("thresholds", "oracle_order") => th.oracle_order = real(v)?,
        ("thresholds", "oracle_order_tol") => th.oracle_order_tol = real(v)?,
        ("thresholds", "symmetry_defect") => th.symmetry_defect = real(v)?,
        ("thresholds", "audit_ratio") => th.audit_ratio = real(v)?,
        ("thresholds", "gp_violation") => th.gp_violation = real(v)?,
        ("thresholds", "approach_r2") => th.approach_r2 = real(v)?,
        ("thresholds", "envelope_excess") => th.envelope_excess = real(v)?,
        ("thresholds", "hat_r2") => th.hat_r2 = real(v)?,
        ("thresholds", "r_growth") => th.r_growth = real(v)?,
        ("thresholds", "smoothing_factor") => th.smoothing_factor = real(v)?,
        ("thresholds", "attraction_ratio") => th.attraction_ratio = real(v)?,
        ("thresholds", "attraction_r2") => th.attraction_r2 = real(v)?,
        ("thresholds", "recombination") => th.recombination = real(v)?,
        _ => return Err(format!("unknown key {key:?} in section [{section}]")),
    }
    Ok(())
}

/// Parses the INI-style configuration: `[section]` headers, `key = value`
/// lines, `#` comments, case-sensitive keys. Unknown sections and keys are
/// errors. Everything not given takes its documented default.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let mut raw = Raw::default();
    let mut section: Option<String> = None;
    let mut seen = std::collections::HashSet::new();
    for (i, full) in text.lines().enumerate() {
        let line_no = i + 1;
        let syntax = |message: String| Error::ConfigSyntax { line: line_no, message };
        let line = full.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| syntax("section header is missing ']'".into()))?.trim();
            if !SECTIONS.contains(&name) {
                return Err(syntax(format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| syntax(format!("expected 'key = value', got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section.as_deref().ok_or_else(|| syntax(format!("key {key:?} appears before any section")))?;
        if key.is_empty() || value.is_empty() {
            return Err(syntax("empty key or value".into()));
        }
        if !seen.insert((sec.to_string(), key.to_string())) {
            return Err(syntax(format!("duplicate key {key:?} in section [{sec}]")));
        }
        set(&mut raw, sec, key, value).map_err(syntax)?;
    }
    validate(raw)
}

fn semantic(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::ConfigSemantic(m),
        other => other,
    }
}

fn require(ok: bool, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::ConfigSemantic(msg.into()))
    }
}

fn validate(raw: Raw) -> Result<ScenarioConfig> {
    let grid = Grid::new(raw.dim, raw.n).map_err(semantic)?;
    let medium = match (&raw.entries, &raw.diagonal) {
        (Some(_), Some(_)) => return Err(Error::ConfigSemantic("give either medium.entries or medium.diagonal, not both".into())),
        (Some(e), None) => MediumMatrix::new(raw.dim, e),
        (None, Some(d)) if d.len() == raw.dim => MediumMatrix::diagonal(d),
        (None, Some(d)) => Err(Error::invalid(format!("medium.diagonal needs {} entries, got {}", raw.dim, d.len()))),
        (None, None) => Ok(MediumMatrix::identity(raw.dim)),
    }
    .map_err(semantic)?;
    let params = NonlinearityParams::new(raw.alpha, raw.beta, raw.gamma, raw.l).map_err(semantic)?;
    let forcing = match raw.forcing_kind.as_str() {
        "zero" => ForcingSpec::Zero,
        "fixed_random" => {
            require(raw.forcing_kmax >= 1, "forcing.kmax must be at least 1")?;
            ForcingSpec::FixedRandom { seed: raw.forcing_seed, amplitude: raw.forcing_amplitude, kmax: raw.forcing_kmax }
        }
        "file" => ForcingSpec::File(
            raw.forcing_path.clone().ok_or_else(|| Error::ConfigSemantic("forcing.kind = file needs forcing.path".into()))?,
        ),
        other => return Err(Error::ConfigSemantic(format!("forcing.kind must be zero, fixed_random or file, got {other:?}"))),
    };
    let mut solver = raw.solver;
    solver.scheme = raw.scheme;
    if let Some(dt) = raw.dt {
        require(dt > 0.0, "solver.dt must be positive")?;
        solver.dt = dt;
    }
    require(solver.cfl_safety > 0.0 && solver.cfl_safety <= 1.0, "solver.cfl_safety must lie in (0, 1]")?;
    require(solver.cg_tol > 0.0 && solver.newton_tol > 0.0, "solver tolerances must be positive")?;
    let mut c = raw.cfg;
    c.initial.kind = match raw.initial_kind.as_str() {
        "zero" => InitialKind::Zero,
        "smooth" => InitialKind::Smooth,
        "white_noise" => InitialKind::WhiteNoise,
        other => return Err(Error::ConfigSemantic(format!("initial.kind must be zero, smooth or white_noise, got {other:?}"))),
    };
    require(c.run.t_max > 0.0 && c.run.sample_every > 0.0, "run.t_max and run.sample_every must be positive")?;
    require(!c.initial.amplitudes.is_empty(), "initial.amplitudes must not be empty")?;
    require(c.initial.amplitudes.iter().all(|a| *a >= 0.0), "initial.amplitudes must be nonnegative")?;
    require(c.initial.kmax >= 1, "initial.kmax must be at least 1")?;
    require(c.energy.eps.is_none_or(|e| e >= 0.0), "energy.eps must be nonnegative")?;
    require(c.energy.eps_samples >= 1, "energy.eps_samples must be at least 1")?;
    require(c.energy.gp_constant > 0.0, "energy.gp_constant must be positive")?;
    require(c.energy.ball_factor >= 1.0, "energy.ball_factor must be at least 1")?;
    require(c.spectrum.deltas.iter().all(|d| (0.0..=1.0).contains(d)), "spectrum.deltas must lie in [0, 1]")?;
    require(c.spectrum.samples >= 5 && c.spectrum.t_max > 0.0, "spectrum needs t_max > 0 and at least 5 samples")?;
    require(c.audit_levels >= 2, "audit.levels must be at least 2")?;
    require(c.oracle.dts.len() >= 2 && c.oracle.dts.iter().all(|d| *d > 0.0), "oracle.dts needs at least two positive steps")?;
    require(c.oracle.dts.contains(&c.oracle.gate_dt), "oracle.gate_dt must be one of oracle.dts")?;
    require(c.lipschitz_distance > 0.0 && c.expsplit_distance > 0.0, "perturbation distances must be positive")?;
    require(c.split.shift >= 0.0, "split.shift must be nonnegative")?;
    require((0.0..=1.0).contains(&c.split.delta), "split.delta must lie in [0, 1]")?;
    require(c.ensemble.size >= 2, "ensemble.size must be at least 2")?;
    require(c.ensemble.reference < c.ensemble.size, "ensemble.reference must index a member")?;
    require(c.ensemble.amp_min > 0.0 && c.ensemble.amp_max >= c.ensemble.amp_min, "ensemble amplitudes need 0 < amp_min <= amp_max")?;
    Ok(ScenarioConfig {
        grid,
        medium,
        params,
        convective: raw.convective,
        forcing,
        solver,
        dt: raw.dt,
        run: c.run,
        initial: c.initial,
        energy: c.energy,
        spectrum: c.spectrum,
        audit_levels: c.audit_levels,
        oracle: c.oracle,
        lipschitz_distance: c.lipschitz_distance,
        split: c.split,
        expsplit_distance: c.expsplit_distance,
        smoothing: c.smoothing,
        ensemble: c.ensemble,
        thresholds: c.thresholds,
    })
}

/// Reads a config file; a relative forcing path is resolved against the
/// config's directory.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::ConfigSemantic(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let ForcingSpec::File(p) = &cfg.forcing {
        if p.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.forcing = ForcingSpec::File(base.join(p));
        }
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    Simulate,
    Spectrum,
    Lipschitz,
    Split,
    Expsplit,
    Smoothing,
    Attractor,
    Audit,
    Oracle,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Spectrum => "spectrum",
            Subcommand::Lipschitz => "lipschitz",
            Subcommand::Split => "split",
            Subcommand::Expsplit => "expsplit",
            Subcommand::Smoothing => "smoothing",
            Subcommand::Attractor => "attractor",
            Subcommand::Audit => "audit",
            Subcommand::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Not applicable to this run (never a failure).
    Skip,
}

impl Status {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

/// How a table is drawn: `x` against each of `ys`, one line per distinct
/// value of the `group` column.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub x: usize,
    pub ys: Vec<usize>,
    pub group: Option<usize>,
    pub log_y: bool,
}

#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub plot: PlotSpec,
}

impl Table {
    fn new(name: &str, columns: &[&str], plot: PlotSpec) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new(), plot }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub subcommand: Subcommand,
    pub tables: Vec<Table>,
    pub values: Vec<(String, f64)>,
    pub checks: Vec<Check>,
}

impl Outcome {
    fn new(subcommand: Subcommand) -> Self {
        Self { subcommand, tables: Vec::new(), values: Vec::new(), checks: Vec::new() }
    }

    fn value(&mut self, key: &str, v: f64) {
        self.values.push((key.to_string(), v));
    }

    fn check(&mut self, name: &str, status: Status, detail: impl Into<String>) {
        self.checks.push(Check { name: name.to_string(), status, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|p| p.1)
    }

    pub fn get_check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Plain-text `key = value` report.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "subcommand = {}", self.subcommand.name());
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        for c in &self.checks {
            let _ = writeln!(s, "check.{} = {} ({})", c.name, c.status.label(), c.detail);
        }
        let _ = writeln!(s, "result = {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }

    /// Writes every table as CSV (and SVG on request) plus `summary.txt`.
    /// SVG problems are reported on stderr and never fail the run.
    pub fn write(&self, dir: &Path, svg: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        for t in &self.tables {
            fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv())?;
            if svg {
                if let Err(e) = plot::write_svg(t, &dir.join(format!("{}.svg", t.name))) {
                    eprintln!("warning: could not draw {}.svg: {e}", t.name);
                }
            }
        }
        fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

mod plot {
    use std::path::Path;

    use plotters::prelude::*;

    use super::Table;

    pub fn write_svg(table: &Table, path: &Path) -> Result<(), Box<dyn std::error::Error>> {
        let spec = &table.plot;
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        let mut groups: Vec<f64> = match spec.group {
            Some(g) => table.rows.iter().map(|r| r[g]).collect(),
            None => vec![0.0],
        };
        groups.sort_by(f64::total_cmp);
        groups.dedup();
        for &y in &spec.ys {
            for &gv in &groups {
                let pts: Vec<(f64, f64)> = table
                    .rows
                    .iter()
                    .filter(|r| spec.group.is_none_or(|g| r[g] == gv))
                    .filter_map(|r| {
                        let v = if spec.log_y { (r[y] > 0.0).then(|| r[y].log10()) } else { Some(r[y]) };
                        v.filter(|v| v.is_finite() && r[spec.x].is_finite()).map(|v| (r[spec.x], v))
                    })
                    .collect();
                let label = match spec.group {
                    Some(g) => format!("{} ({} = {gv})", table.columns[y], table.columns[g]),
                    None => table.columns[y].clone(),
                };
                if !pts.is_empty() {
                    series.push((label, pts));
                }
            }
        }
        let all = series.iter().flat_map(|s| s.1.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in all {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Err("nothing to plot".into());
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(&table.name, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart
            .configure_mesh()
            .x_desc(table.columns[spec.x].as_str())
            .y_desc(if spec.log_y { "log10(value)" } else { "value" })
            .draw()?;
        for (i, (label, pts)) in series.into_iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))?
                .label(label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    }
}

fn build_forcing(cfg: &ScenarioConfig, grid: Grid) -> Result<Forcing> {
    Ok(match &cfg.forcing {
        ForcingSpec::Zero => Forcing::zero(grid),
        ForcingSpec::FixedRandom { seed, amplitude, kmax } => {
            Forcing::constant(SeededRng::new(*seed).smooth_vector_field(grid, *kmax).scaled(*amplitude))
        }
        ForcingSpec::File(path) => {
            let text = fs::read_to_string(path)?;
            let values: Vec<f64> = text
                .lines()
                .map(|l| l.split('#').next().unwrap_or(""))
                .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::ConfigSemantic(format!("bad number {s:?} in forcing file"))))
                .collect::<Result<_>>()?;
            if values.len() != grid.dim() * grid.len() {
                return Err(Error::ConfigSemantic(format!(
                    "forcing file has {} values, the grid needs {}",
                    values.len(),
                    grid.dim() * grid.len()
                )));
            }
            Forcing::constant(VectorField::from_values(grid, values)?)
        }
    })
}

/// Full system for `grid` with the configured medium, nonlinearity and forcing.
pub fn build_system(cfg: &ScenarioConfig, grid: Grid, convective: bool) -> Result<FullSystem> {
    FullSystem::new(cfg.medium.clone(), cfg.params, build_forcing(cfg, grid)?, convective)
}

/// Step for the full system; automatic steps divide `interval` evenly.
pub fn full_solver(cfg: &ScenarioConfig, grid: &Grid, interval: f64) -> SolverConfig {
    let mut s = cfg.solver;
    s.dt = match cfg.dt {
        Some(dt) => dt,
        None => match s.scheme {
            Scheme::Rk4 => SolverConfig::stable_dt(grid, &cfg.medium, s.cfl_safety, interval),
            Scheme::SemiImplicit => interval / (interval / SEMI_IMPLICIT_DT).ceil(),
        },
    };
    s
}

fn stride_for(cfg: &ScenarioConfig, dt: f64, interval: f64) -> usize {
    if cfg.run.snapshot_stride > 0 {
        cfg.run.snapshot_stride
    } else {
        ((interval / dt).round() as usize).max(1)
    }
}

/// Initial state of the configured kind with size `amplitude`.
pub fn initial_state(cfg: &ScenarioConfig, grid: Grid, rng: &mut SeededRng, amplitude: f64) -> SimState {
    match cfg.initial.kind {
        InitialKind::Zero => SimState::zero(grid),
        InitialKind::Smooth => smooth_initial_state(grid, rng, amplitude, cfg.initial.kmax),
        InitialKind::WhiteNoise => SimState {
            u: VectorField::zeros(grid),
            p: project_mean_zero(&rng.scalar_field(grid, amplitude)),
            t: 0.0,
        },
    }
}

/// Fixed `ε` or half the sampled certificate (white-noise and smooth
/// pressures alternately).
fn resolve_eps(cfg: &ScenarioConfig, grid: Grid) -> Result<f64> {
    if let Some(e) = cfg.energy.eps {
        return Ok(e);
    }
    let mut rng = SeededRng::new(cfg.initial.seed ^ 0x9e37_79b9_7f4a_7c15);
    let samples: Vec<_> = (0..cfg.energy.eps_samples)
        .map(|i| {
            let p = if i % 2 == 0 { rng.scalar_field(grid, 1.0) } else { rng.smooth_scalar_field(grid, 3) };
            (VectorField::zeros(grid), project_mean_zero(&p))
        })
        .collect();
    let star = certify_eps(&samples, &cfg.medium)?;
    Ok(if star.is_finite() { 0.5 * star } else { 0.0 })
}

fn fit_detail(f: &DecayFit) -> String {
    format!("rate {:.4e}, r2 {:.4}, window [{}, {}]", f.rate, f.r_squared, f.window.0, f.window.1)
}

/// Runs one scenario. Tables and checks are returned; nothing is written.
pub fn run_scenario(cfg: &ScenarioConfig, sub: Subcommand) -> Result<Outcome> {
    match sub {
        Subcommand::Simulate => simulate(cfg),
        Subcommand::Spectrum => spectrum(cfg),
        Subcommand::Lipschitz => lipschitz(cfg),
        Subcommand::Split => split(cfg),
        Subcommand::Expsplit => expsplit(cfg),
        Subcommand::Smoothing => smoothing(cfg),
        Subcommand::Attractor => attractor(cfg),
        Subcommand::Audit => audit(cfg),
        Subcommand::Oracle => oracle(cfg),
    }
}

fn simulate(cfg: &ScenarioConfig) -> Result<Outcome> {
    let grid = cfg.grid;
    let sys = build_system(cfg, grid, cfg.convective)?;
    let interval = cfg.run.sample_every;
    let scfg = full_solver(cfg, &grid, interval);
    let stride = stride_for(cfg, scfg.dt, interval);
    let eps = resolve_eps(cfg, grid)?;
    let sine = SineBasis::new(grid);
    let eval = EnergyEvaluator::new(grid);
    let mut rng = SeededRng::new(cfg.initial.seed);
    let mut out = Outcome::new(Subcommand::Simulate);
    out.value("dt", scfg.dt);
    out.value("eps", eps);
    let mut table = Table::new(
        "energies",
        &["run", "t", "e_plain", "e_eps", "h1_u", "l2_p", "residual"],
        PlotSpec { x: 1, ys: vec![3], group: Some(0), log_y: true },
    );
    let mut series: Vec<Vec<(f64, f64)>> = Vec::new();
    for (run, &amp) in cfg.initial.amplitudes.iter().enumerate() {
        let s0 = initial_state(cfg, grid, &mut rng, amp);
        let mut auditor = EnergyAuditor::new(&sys, 0.0, 1.0, 1);
        let mut consumed = 0;
        let mut ser = Vec::new();
        integrate(&sys, &s0, &scfg, cfg.run.t_max, |k, s| {
            auditor.push(s)?;
            if k % stride == 0 {
                let rows = auditor.rows();
                let residual: f64 = rows[consumed..].iter().map(|r| r.residual).sum();
                consumed = rows.len();
                let r = eval.report(&s.u, &s.p, &sys.forcing.at(s.t), &cfg.medium, &cfg.params, eps)?;
                table.rows.push(vec![
                    run as f64,
                    s.t,
                    r.e_plain,
                    r.e_eps,
                    sine.spectral_norm_vector(&s.u, 1.0),
                    s.p.norm_l2(),
                    residual,
                ]);
                ser.push((s.t, r.e_eps));
            }
            Ok(())
        })?;
        series.push(ser);
    }
    out.tables.push(table);

    // Absorbing ball: `ball_factor` times the largest late value (last
    // quarter), checked from `t_enter` on.
    let t_max = cfg.run.t_max;
    let late = series.iter().flatten().filter(|(t, _)| *t >= 0.75 * t_max - 1e-12).map(|p| p.1).fold(0.0, f64::max);
    let bound = cfg.energy.ball_factor * late;
    out.value("ball_bound", bound);
    if cfg.energy.t_enter < t_max {
        let worst = series
            .iter()
            .flatten()
            .filter(|(t, _)| *t >= cfg.energy.t_enter - 1e-12)
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max);
        out.check(
            "common_ball",
            Status::from_bool(worst <= bound),
            format!("max E_eps on [{}, {t_max}] is {worst:.6e}, bound {bound:.6e}", cfg.energy.t_enter),
        );
    } else {
        out.check("common_ball", Status::Skip, "t_enter is not before t_max");
    }
    for (run, ser) in series.iter().enumerate() {
        let name = format!("approach_run{run}");
        if ser.first().is_none_or(|p| p.1 <= bound) {
            out.check(&name, Status::Skip, "starts inside the ball");
            continue;
        }
        let end = ser.iter().find(|p| p.1 <= bound).map(|p| p.0).unwrap_or(t_max);
        match fit_decay(ser, (0.0, end)) {
            Ok(f) => {
                out.value(&format!("approach_rate_run{run}"), f.rate);
                out.value(&format!("approach_r2_run{run}"), f.r_squared);
                let ok = f.rate < 0.0 && f.r_squared >= cfg.thresholds.approach_r2;
                out.check(&name, Status::from_bool(ok), fit_detail(&f));
            }
            Err(e) => out.check(&name, Status::Fail, e.to_string()),
        }
    }
    Ok(out)
}

fn spectrum(cfg: &ScenarioConfig) -> Result<Outcome> {
    let op = assemble_operator(&cfg.grid, &cfg.medium)?;
    let mut out = Outcome::new(Subcommand::Spectrum);
    let mut spec = Table::new("spectrum", &["index", "eigenvalue"], PlotSpec { x: 0, ys: vec![1], group: None, log_y: true });
    for (i, l) in op.spectrum.iter().enumerate() {
        spec.rows.push(vec![i as f64, *l]);
    }
    out.tables.push(spec);
    let defect = op.symmetry_defect();
    out.value("symmetry_defect", defect);
    out.value("eig_min", op.eig_min());
    out.value("eig_max", op.eig_max());
    out.check(
        "symmetry",
        Status::from_bool(defect <= cfg.thresholds.symmetry_defect),
        format!("relative defect {defect:.3e}"),
    );
    out.check("positive", Status::from_bool(op.eig_min() > 0.0), format!("eigmin {:.6e}", op.eig_min()));
    let mut decay = Table::new("decay", &["delta", "fitted_rate", "r_squared"], PlotSpec { x: 0, ys: vec![1], group: None, log_y: false });
    let mut worst = f64::NEG_INFINITY;
    for &delta in &cfg.spectrum.deltas {
        let f = semigroup_decay(&op, delta, cfg.spectrum.t_max, cfg.spectrum.samples, cfg.initial.seed)?;
        decay.rows.push(vec![delta, f.rate, f.r_squared]);
        worst = worst.max(f.rate);
    }
    out.tables.push(decay);
    out.value("worst_rate", worst);
    out.check("decay", Status::from_bool(worst < 0.0), format!("largest fitted rate {worst:.6e}"));
    Ok(out)
}

fn add_state(a: &SimState, b: &SimState) -> SimState {
    SimState { u: a.u.add(&b.u), p: a.p.add(&b.p), t: a.t }
}

fn snapshots(sys: &FullSystem, s0: &SimState, scfg: &SolverConfig, span: f64, stride: usize) -> Result<Vec<SimState>> {
    let mut snaps = Vec::new();
    integrate(sys, s0, scfg, span, |k, s| {
        if k % stride == 0 {
            snaps.push(s.clone());
        }
        Ok(())
    })?;
    Ok(snaps)
}

fn lipschitz(cfg: &ScenarioConfig) -> Result<Outcome> {
    let grid = cfg.grid;
    let sys = build_system(cfg, grid, cfg.convective)?;
    let interval = cfg.run.sample_every;
    let scfg = full_solver(cfg, &grid, interval);
    let stride = stride_for(cfg, scfg.dt, interval);
    let sine = SineBasis::new(grid);
    let mut rng = SeededRng::new(cfg.initial.seed);
    let a = initial_state(cfg, grid, &mut rng, cfg.initial.amplitudes[0]);
    let b = add_state(&a, &smooth_initial_state(grid, &mut rng, cfg.lipschitz_distance, cfg.initial.kmax));
    let sa = snapshots(&sys, &a, &scfg, cfg.run.t_max, stride)?;
    let sb = snapshots(&sys, &b, &scfg, cfg.run.t_max, stride)?;
    let d0 = e_norm(&sine, &a.difference(&b));
    let ratio: Vec<(f64, f64)> = sa.iter().zip(&sb).map(|(x, y)| (x.t, e_norm(&sine, &x.difference(y)) / d0)).collect();
    let mut out = Outcome::new(Subcommand::Lipschitz);
    out.value("dt", scfg.dt);
    out.value("initial_distance", d0);
    let env = fit_envelope(&ratio, (0.0, cfg.run.t_max))?;
    let mut table = Table::new("pairs", &["t", "ratio", "envelope"], PlotSpec { x: 0, ys: vec![1, 2], group: None, log_y: true });
    for &(t, r) in &ratio {
        table.rows.push(vec![t, r, env.at(t)]);
    }
    out.tables.push(table);
    let ls = env.least_squares;
    let ls_excess = ratio.iter().map(|&(t, r)| r / (ls.c * (ls.rate * t).exp()) - 1.0).fold(f64::NEG_INFINITY, f64::max);
    out.value("envelope_c", env.c);
    out.value("envelope_k", env.k);
    out.value("envelope_max_excess", env.max_excess);
    out.value("ls_rate", ls.rate);
    out.value("ls_max_excess", ls_excess);
    let ok = env.k.is_finite() && env.c.is_finite() && env.max_excess <= cfg.thresholds.envelope_excess;
    out.check(
        "envelope",
        Status::from_bool(ok),
        format!("C {:.4e}, K {:.4e}, max excess {:.3e}", env.c, env.k, env.max_excess),
    );
    Ok(out)
}

fn split(cfg: &ScenarioConfig) -> Result<Outcome> {
    let grid = cfg.grid;
    let interval = cfg.run.sample_every;
    let mut scfg = cfg.solver;
    scfg.dt = match cfg.dt {
        Some(dt) => dt,
        None => {
            let target = 0.1f64.min(1.0 / cfg.medium.eig_max());
            interval / (interval / target).ceil()
        }
    };
    let stride = stride_for(cfg, scfg.dt, interval);
    let mut rng = SeededRng::new(cfg.initial.seed);
    let p0 = match cfg.initial.kind {
        InitialKind::Zero => crate::grid::ScalarField::zeros(grid),
        InitialKind::Smooth => project_mean_zero(&rng.smooth_scalar_field(grid, cfg.initial.kmax)).scaled(cfg.split.p_amplitude),
        InitialKind::WhiteNoise => project_mean_zero(&rng.scalar_field(grid, cfg.split.p_amplitude)),
    };
    let problem = TruncatedProblem { p0, forcing: build_forcing(cfg, grid)?, d: cfg.medium.clone(), params: cfg.params };
    let tr = run_split(&problem, &scfg, cfg.split.shift, cfg.run.t_max, stride)?;
    let sine = SineBasis::new(grid);
    let delta = cfg.split.delta;
    let mut table = Table::new(
        "split",
        &["t", "norm_q", "norm_v", "norm_r_hdelta", "norm_w_h1delta"],
        PlotSpec { x: 0, ys: vec![1, 2, 3, 4], group: None, log_y: true },
    );
    for (i, &t) in tr.times.iter().enumerate() {
        let (q, v) = &tr.qv[i];
        let (r, w) = &tr.rw[i];
        table.rows.push(vec![
            t,
            q.norm_l2(),
            sine.spectral_norm_vector(v, 1.0),
            sine.spectral_norm(r.values(), delta),
            sine.spectral_norm_vector(w, 1.0 + delta),
        ]);
    }
    let mut out = Outcome::new(Subcommand::Split);
    out.value("dt", scfg.dt);
    let (ep, eu) = tr.recombination_error();
    out.value("recombination_p", ep);
    out.value("recombination_u", eu);
    out.check(
        "recombination",
        Status::from_bool(ep.max(eu) <= cfg.thresholds.recombination),
        format!("p {ep:.3e}, u {eu:.3e}"),
    );
    let qv: Vec<(f64, f64)> = table.rows.iter().map(|r| (r[0], r[1].hypot(r[2]))).collect();
    if qv.iter().all(|p| p.1 == 0.0) {
        out.check("qv_decay", Status::Skip, "contracting part is identically zero");
    } else {
        match fit_decay(&qv, (0.0, cfg.run.t_max)) {
            Ok(f) => {
                out.value("qv_rate", f.rate);
                out.value("qv_r2", f.r_squared);
                out.check("qv_decay", Status::from_bool(f.rate < 0.0), fit_detail(&f));
            }
            Err(e) => out.check("qv_decay", Status::Fail, e.to_string()),
        }
    }
    let t_ref = cfg.split.t_ref;
    let r_ref = table.rows.iter().find(|r| r[0] >= t_ref - 1e-9).map(|r| r[3]);
    match r_ref {
        Some(r_ref) => {
            let sup = table.rows.iter().filter(|r| r[0] >= t_ref - 1e-9).map(|r| r[3]).fold(0.0, f64::max);
            out.value("r_at_t_ref", r_ref);
            out.value("r_sup_after_t_ref", sup);
            out.check(
                "r_bounded",
                Status::from_bool(sup <= cfg.thresholds.r_growth * r_ref),
                format!("sup {sup:.4e} vs {} x {r_ref:.4e}", cfg.thresholds.r_growth),
            );
        }
        None => out.check("r_bounded", Status::Skip, "run ends before t_ref"),
    }
    out.tables.push(table);
    Ok(out)
}

fn expsplit(cfg: &ScenarioConfig) -> Result<Outcome> {
    if cfg.convective {
        return Err(Error::ConfigSemantic("expsplit is defined without convection: set nonlinearity.convective = false".into()));
    }
    let grid = cfg.grid;
    let sys = build_system(cfg, grid, false)?;
    let interval = cfg.run.sample_every;
    let scfg = full_solver(cfg, &grid, interval);
    let stride = stride_for(cfg, scfg.dt, interval);
    let sine = SineBasis::new(grid);
    let mut rng = SeededRng::new(cfg.initial.seed);
    let a = initial_state(cfg, grid, &mut rng, cfg.initial.amplitudes[0]);
    let b = add_state(&a, &smooth_initial_state(grid, &mut rng, cfg.expsplit_distance, cfg.initial.kmax));
    let d0 = e_norm(&sine, &a.difference(&b));
    let tr = run_exp_split(&sys, &a, &b, &scfg, cfg.run.t_max, stride)?;
    let mut table = Table::new("expsplit", &["t", "hat_norm", "tilde_h1"], PlotSpec { x: 0, ys: vec![1, 2], group: None, log_y: true });
    for (i, &t) in tr.times.iter().enumerate() {
        let (hu, hp) = &tr.hat[i];
        let hat = (sine.spectral_norm_vector(hu, 1.0).powi(2) + hp.norm_l2().powi(2)).sqrt();
        table.rows.push(vec![t, hat, sine.spectral_norm(tr.tilde[i].1.values(), 1.0)]);
    }
    let mut out = Outcome::new(Subcommand::Expsplit);
    out.value("dt", scfg.dt);
    out.value("initial_distance", d0);
    let rec = tr.recombination_error();
    out.value("recombination", rec);
    out.check("recombination", Status::from_bool(rec <= cfg.thresholds.recombination), format!("{rec:.3e}"));
    let hat: Vec<(f64, f64)> = table.rows.iter().map(|r| (r[0], r[1])).collect();
    match fit_decay(&hat, (0.0, cfg.run.t_max)) {
        Ok(f) => {
            out.value("hat_rate", f.rate);
            out.value("hat_r2", f.r_squared);
            let ok = f.rate < 0.0 && f.r_squared >= cfg.thresholds.hat_r2;
            out.check("hat_decay", Status::from_bool(ok), fit_detail(&f));
        }
        Err(e) => out.check("hat_decay", Status::Fail, e.to_string()),
    }
    let tilde: Vec<(f64, f64)> = table.rows.iter().filter(|r| r[0] > 0.0).map(|r| (r[0], r[2] / d0)).collect();
    let finite = table.rows.iter().all(|r| r[2].is_finite());
    if tilde.iter().all(|p| p.1 == 0.0) {
        out.check("tilde_bounded", Status::from_bool(finite), "tilde part identically zero");
    } else {
        let t_first = tilde.first().map(|p| p.0).unwrap_or(0.0);
        match fit_envelope(&tilde, (t_first, cfg.run.t_max)) {
            Ok(env) => {
                out.value("tilde_envelope_c", env.c);
                out.value("tilde_envelope_k", env.k);
                let ok = finite && env.k.is_finite() && env.max_excess <= cfg.thresholds.envelope_excess;
                out.check(
                    "tilde_bounded",
                    Status::from_bool(ok),
                    format!("|p~|_H1 <= {:.4e} e^({:.4e} t) |xi(0)|_E, max excess {:.3e}", env.c, env.k, env.max_excess),
                );
            }
            Err(e) => out.check("tilde_bounded", Status::Fail, e.to_string()),
        }
    }
    out.tables.push(table);
    Ok(out)
}

fn smoothing(cfg: &ScenarioConfig) -> Result<Outcome> {
    let mut out = Outcome::new(Subcommand::Smoothing);
    let mut table = Table::new(
        "smoothing",
        &["run", "n", "t", "t_grad_u2", "t2_ut2", "t_pt2", "t83_ut2"],
        PlotSpec { x: 2, ys: vec![4], group: Some(0), log_y: true },
    );
    let coarse = cfg.grid;
    require(cfg.smoothing.n_fine > coarse.n(), "smoothing.n_fine must be finer than grid.n")?;
    let fine = Grid::new(coarse.dim(), cfg.smoothing.n_fine).map_err(semantic)?;
    let mut runs = vec![(coarse, cfg.convective), (fine, cfg.convective)];
    if cfg.smoothing.convective_check {
        runs.push((coarse, true));
    }
    let mut sups = Vec::new();
    for (run, &(grid, conv)) in runs.iter().enumerate() {
        let sys = build_system(cfg, grid, conv)?;
        let scfg = full_solver(cfg, &grid, 1.0);
        let mut rng = SeededRng::new(cfg.initial.seed);
        let s0 = initial_state(cfg, grid, &mut rng, cfg.initial.amplitudes[0]);
        let traj = geometric_trajectory(&sys, &s0, &scfg, 1.0, cfg.smoothing.levels)?;
        let rep = smoothing_report(&traj, &sys)?;
        for r in &rep.rows {
            table.rows.push(vec![run as f64, grid.n() as f64, r.t, r.t_grad_u, r.t2_ut, r.t_pt, r.t83_ut]);
        }
        for (k, v) in &rep.weighted_sups {
            out.value(&format!("run{run}.n{}.sup[{k}]", grid.n()), *v);
        }
        sups.push(rep);
    }
    out.tables.push(table);
    let a = sups[0].weighted_sups[WEIGHT_T2_UT];
    let b = sups[1].weighted_sups[WEIGHT_T2_UT];
    let factor = a.max(b) / a.min(b);
    out.value("refinement_factor", factor);
    let all_finite = sups.iter().all(|r| r.weighted_sups.values().all(|v| v.is_finite()));
    out.check("finite", Status::from_bool(all_finite), "all weighted sups finite");
    out.check(
        "refinement",
        Status::from_bool(factor.is_finite() && factor <= cfg.thresholds.smoothing_factor),
        format!("sup t^2|u_t|^2: {a:.4e} (n={}) vs {b:.4e} (n={})", coarse.n(), fine.n()),
    );
    if cfg.smoothing.convective_check {
        let v = sups[2].weighted_sups[WEIGHT_T83_UT];
        out.check("convective", Status::from_bool(v.is_finite()), format!("sup t^(8/3)|u_t|^2 = {v:.4e}"));
    }
    Ok(out)
}

fn attractor(cfg: &ScenarioConfig) -> Result<Outcome> {
    let grid = cfg.grid;
    let sys = build_system(cfg, grid, cfg.convective)?;
    let interval = cfg.run.sample_every;
    let scfg = full_solver(cfg, &grid, interval);
    let e = &cfg.ensemble;
    let mut rng = SeededRng::new(cfg.initial.seed);
    let states: Vec<SimState> = (0..e.size)
        .map(|i| {
            let a = e.amp_min * (e.amp_max / e.amp_min).powf(i as f64 / (e.size - 1) as f64);
            initial_state(cfg, grid, &mut rng, a)
        })
        .collect();
    let sample = stride_for(cfg, scfg.dt, interval) as f64 * scfg.dt;
    let rep = ensemble_study(&states, &scfg, &sys, cfg.run.t_max, sample, e.reference)?;
    let mut out = Outcome::new(Subcommand::Attractor);
    out.value("dt", scfg.dt);
    out.value("r_ball", rep.r_ball);
    let mut table = Table::new("attractor", &["t", "diameter", "dist_to_ball"], PlotSpec { x: 0, ys: vec![1, 2], group: None, log_y: true });
    for (&(t, d), &(_, dist)) in rep.diam_series.iter().zip(&rep.dist_to_ball_series) {
        table.rows.push(vec![t, d, dist]);
    }
    out.tables.push(table);
    let mut boxes = Table::new("boxcount", &["scale", "count"], PlotSpec { x: 0, ys: vec![1], group: None, log_y: true });
    for &(s, c) in &rep.box_counts {
        boxes.rows.push(vec![s, c as f64]);
    }
    out.tables.push(boxes);
    let nonincreasing = rep.box_counts.windows(2).all(|w| w[0].1 <= w[1].1);
    out.check("box_counts", Status::from_bool(nonincreasing), "counts nonincreasing in scale");
    let at = |t: f64| {
        rep.dist_to_ball_series
            .iter()
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .map(|p| p.1)
            .unwrap_or(f64::NAN)
    };
    let (d_check, d_end) = (at(e.check_time), at(cfg.run.t_max));
    out.value("dist_at_check_time", d_check);
    out.value("dist_at_end", d_end);
    out.check(
        "attraction",
        Status::from_bool(d_end <= cfg.thresholds.attraction_ratio * d_check),
        format!("dist {d_end:.4e} at t={} vs {d_check:.4e} at t={}", cfg.run.t_max, e.check_time),
    );
    match rep.dist_fit(e.fit_start) {
        Ok(f) => {
            out.value("dist_rate", f.rate);
            out.value("dist_r2", f.r_squared);
            let ok = f.rate < 0.0 && f.r_squared >= cfg.thresholds.attraction_r2;
            out.check("dist_decay", Status::from_bool(ok), fit_detail(&f));
        }
        Err(err) => out.check("dist_decay", Status::Fail, err.to_string()),
    }
    let diam_fit = fit_decay(&rep.diam_series, (0.0, cfg.run.t_max)).ok();
    if let Some(f) = diam_fit {
        out.value("diameter_rate", f.rate);
    }
    Ok(out)
}

fn audit(cfg: &ScenarioConfig) -> Result<Outcome> {
    let grid = cfg.grid;
    let sys = build_system(cfg, grid, cfg.convective)?;
    let base = full_solver(cfg, &grid, cfg.run.t_max);
    let eps = resolve_eps(cfg, grid)?;
    let mut rng = SeededRng::new(cfg.initial.seed);
    let s0 = initial_state(cfg, grid, &mut rng, cfg.initial.amplitudes[0]);
    let mut out = Outcome::new(Subcommand::Audit);
    out.value("eps", eps);
    let mut rows = Table::new(
        "audit",
        &["dt", "t", "residual", "residual_trapezoid", "e_plain"],
        PlotSpec { x: 1, ys: vec![2], group: Some(0), log_y: false },
    );
    let mut levels = Table::new(
        "audit_levels",
        &["dt", "l1_residual", "l1_residual_trapezoid", "gp_max_violation"],
        PlotSpec { x: 0, ys: vec![1, 2], group: None, log_y: true },
    );
    for level in 0..cfg.audit_levels {
        let mut scfg = base;
        scfg.dt = base.dt / 2f64.powi(level as i32);
        let gp_eps = if level == 0 { eps } else { 0.0 };
        let mut auditor = EnergyAuditor::new(&sys, gp_eps, cfg.energy.gp_constant, cfg.energy.gp_stride);
        integrate(&sys, &s0, &scfg, cfg.run.t_max, |_, s| auditor.push(s))?;
        let rep = auditor.finish();
        for r in &rep.rows {
            rows.rows.push(vec![scfg.dt, r.t, r.residual, r.residual_trapezoid, r.e_plain]);
        }
        levels.rows.push(vec![scfg.dt, rep.integrated_residual(), rep.integrated_trapezoid_residual(), rep.max_gp_violation()]);
        if level == 0 && gp_eps > 0.0 {
            let v = rep.max_gp_violation();
            out.value("gp_max_violation", v);
            out.value("gp_evaluations", rep.gp.len() as f64);
            out.check(
                "gp_inequality",
                Status::from_bool(v <= cfg.thresholds.gp_violation),
                format!("max violation {v:.3e} over {} states (C = {})", rep.gp.len(), cfg.energy.gp_constant),
            );
        }
    }
    for w in levels.rows.clone().windows(2) {
        let ratio = w[0][1] / w[1][1];
        let trap = w[0][2] / w[1][2];
        let key = format!("ratio_dt{:.4e}", w[1][0]);
        out.value(&key, ratio);
        out.value(&format!("trapezoid_{key}"), trap);
        out.check(
            &format!("order_dt{:.4e}", w[1][0]),
            Status::from_bool(ratio >= cfg.thresholds.audit_ratio),
            format!("L1 residual ratio {ratio:.4} (plain trapezoid {trap:.4})"),
        );
    }
    out.tables.push(rows);
    out.tables.push(levels);
    Ok(out)
}

fn oracle(cfg: &ScenarioConfig) -> Result<Outcome> {
    if !cfg.params.is_zero() || cfg.forcing != ForcingSpec::Zero || cfg.convective {
        return Err(Error::ConfigSemantic(
            "oracle compares against the linear propagator: set alpha = beta = gamma = 0, forcing.kind = zero, convective = false"
                .into(),
        ));
    }
    let grid = cfg.grid;
    let prop = build_propagator(&grid, &cfg.medium)?;
    let sys = FullSystem::linear(cfg.medium.clone(), grid);
    let mut rng = SeededRng::new(cfg.initial.seed);
    let s0 = initial_state(cfg, grid, &mut rng, cfg.initial.amplitudes[0]);
    let interval = cfg.oracle.sample_every;
    let n_samples = (cfg.run.t_max / interval).round() as usize;
    if n_samples == 0 || ((n_samples as f64) * interval - cfg.run.t_max).abs() > 1e-9 * cfg.run.t_max {
        return Err(Error::ConfigSemantic("run.t_max must be a multiple of oracle.sample_every".into()));
    }
    let step = prop.exp_at(interval);
    let mut exact = vec![prop.to_vector(&s0)?];
    for k in 0..n_samples {
        let next = &step * &exact[k];
        exact.push(next);
    }
    let norm0 = exact[0].norm();
    let mut out = Outcome::new(Subcommand::Oracle);
    let mut table = Table::new("oracle", &["dt", "error", "sup_error"], PlotSpec { x: 0, ys: vec![1, 2], group: None, log_y: true });
    for &dt in &cfg.oracle.dts {
        let stride = (interval / dt).round() as usize;
        if stride == 0 || ((stride as f64) * dt - interval).abs() > 1e-9 * interval {
            return Err(Error::ConfigSemantic(format!("oracle step {dt} does not divide sample_every {interval}")));
        }
        let scfg = SolverConfig { dt, scheme: Scheme::Rk4, ..cfg.solver };
        let mut sup: f64 = 0.0;
        let mut end = f64::NAN;
        integrate(&sys, &s0, &scfg, cfg.run.t_max, |k, s| {
            if k % stride == 0 {
                let j = k / stride;
                let diff = (prop.to_vector(s)? - &exact[j]).norm();
                sup = sup.max(diff / norm0);
                if j == n_samples {
                    end = diff / exact[j].norm();
                }
            }
            Ok(())
        })?;
        table.rows.push(vec![dt, end, sup]);
    }
    let gate = table.rows.iter().find(|r| r[0] == cfg.oracle.gate_dt).map(|r| r[1]).unwrap_or(f64::NAN);
    out.value("gate_error", gate);
    out.check(
        "agreement",
        Status::from_bool(gate <= cfg.thresholds.oracle_error),
        format!("relative error {gate:.3e} at t = {} with dt = {}", cfg.run.t_max, cfg.oracle.gate_dt),
    );
    let th = &cfg.thresholds;
    for w in table.rows.windows(2) {
        let order = (w[0][2] / w[1][2]).ln() / (w[0][0] / w[1][0]).ln();
        let name = format!("order_dt{:.1e}", w[1][0]);
        out.value(&name, order);
        out.check(
            &name,
            Status::from_bool((order - th.oracle_order).abs() <= th.oracle_order_tol),
            format!("order {order:.3} from sup-in-time errors {:.3e} -> {:.3e}", w[0][2], w[1][2]),
        );
    }
    out.tables.push(table);
    Ok(out)
}

/// `bfflow <subcommand> --config <path> [--out <dir>] [--svg] [--threads N] [--seed N]`
#[derive(Debug, Parser)]
#[command(name = "bfflow", version, about = "Slightly compressible Brinkman-Forchheimer scenario runner")]
pub struct Args {
    /// Scenario to run.
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// INI-style scenario configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also draw an SVG line plot per CSV.
    #[arg(long)]
    pub svg: bool,
    /// Worker threads for ensemble members; 1 gives bit-reproducible output.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides the run seed (`initial.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Maps an error to the documented exit code (2 runtime, 3 config).
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ConfigSyntax { .. } | Error::ConfigSemantic(_) => 3,
        _ => 2,
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = args.threads {
        // A second initialization (tests) keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = load_config(&args.config).and_then(|mut cfg| {
        if let Some(seed) = args.seed {
            cfg.initial.seed = seed;
        }
        let outcome = run_scenario(&cfg, args.subcommand)?;
        outcome.write(&args.out, args.svg)?;
        Ok(outcome)
    });
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary());
            if outcome.passed() {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("[grid]\nn = 16\n[medium]\ndiagonal = 1, 1\n[forcing]\nkind = zero\n").unwrap();
        assert_eq!(cfg.grid.n(), 16);
        assert!(cfg.medium.is_identity());
        assert_eq!(cfg.forcing, ForcingSpec::Zero);
        assert_eq!(cfg.thresholds, Thresholds::default());
        assert_eq!(cfg.audit_levels, 3);
        assert!(cfg.dt.is_none());
    }

    #[test]
    fn growth_exponent_out_of_range() {
        let err = parse_config("[nonlinearity]\nl = 3.0\n").unwrap_err();
        assert!(matches!(&err, Error::ConfigSemantic(m) if m.contains("(0, 2]")), "{err}");
        assert_eq!(exit_code(&err), 3);
    }

    #[test]
    fn unknown_key_has_line_number() {
        let err = parse_config("# comment\n[solver]\nscheme = rk4\ndtt = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigSyntax { line: 4, .. }), "{err}");
    }

    #[test]
    fn syntax_errors() {
        for (text, line) in [
            ("[grid\n", 1),
            ("n = 4\n", 1),
            ("[grid]\nn 4\n", 2),
            ("[bogus]\n", 1),
            ("[grid]\nn = four\n", 2),
            ("[grid]\nn = 4\nn = 6\n", 3),
        ] {
            match parse_config(text) {
                Err(Error::ConfigSyntax { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn semantic_errors() {
        for text in [
            "[grid]\nn = 15\n",
            "[medium]\nentries = 1, 2, 2, 1\n",
            "[medium]\nentries = 1, 0.5, 0.4, 1\n",
            "[forcing]\nkind = file\n",
            "[solver]\ncfl_safety = 2\n",
            "[split]\ndelta = 1.5\n",
            "[oracle]\ngate_dt = 3e-4\n",
        ] {
            assert!(matches!(parse_config(text), Err(Error::ConfigSemantic(_))), "{text:?}");
        }
    }

    #[test]
    fn simulate_zero_data_is_zero() {
        let cfg = parse_config(
            "[grid]\nn = 8\n[initial]\nkind = zero\n[run]\nt_max = 0.05\nsample_every = 0.01\n[energy]\neps = 0.1\n",
        )
        .unwrap();
        let out = run_scenario(&cfg, Subcommand::Simulate).unwrap();
        let t = out.table("energies").unwrap();
        assert_eq!(t.rows.len(), 6);
        for r in &t.rows {
            assert!(r[2..].iter().all(|v| *v == 0.0), "{r:?}");
        }
        assert!(out.passed(), "{}", out.summary());
    }

    #[test]
    fn csv_layout() {
        let mut t = Table::new("x", &["a", "b"], PlotSpec { x: 0, ys: vec![1], group: None, log_y: false });
        t.rows.push(vec![1.0, 0.5]);
        t.rows.push(vec![2.0, 1e-20]);
        assert_eq!(t.to_csv(), "a,b\n1,0.5\n2,0.00000000000000000001\n");
    }
}
