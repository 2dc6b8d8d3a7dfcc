//! Batch driver: TOML run configuration with dotted-key overrides, shape
//! files, tab-separated output tables and the four run modes.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 solver failure,
//! 4 optimizer did not converge, 5 output directory unusable.

use crate::error::Error;
use crate::functionals::{self, FunctionalValues, Targets};
use crate::geometry::{ChannelGeometry, Point, Wall, WallShapeParams};
use crate::optimizer::{self, OptimizationResult, OptimizerConfig, OuterAction};
use crate::periodic_bie::{assemble_system, eval_field, SolverConfig};
use crate::shape_calculus::{fd_step, finite_difference, full_gradient, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Solve,
    Optimize,
    CheckGradient,
    SampleField,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "solve" => Ok(Mode::Solve),
            "optimize" => Ok(Mode::Optimize),
            "check-gradient" => Ok(Mode::CheckGradient),
            "sample-field" => Ok(Mode::SampleField),
            _ => Err(format!("unknown mode `{s}` (expected solve, optimize, check-gradient or sample-field)")),
        }
    }
}

/// Generated start shapes, used when no shape file is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Flat,
    /// `x₂⁺ = upper + a(cos t − 1)`, `x₂⁻ = lower − a(cos t − 1)`.
    SymmetricBump,
    /// Top wall with mode-1 amplitude `a` plus seeded random higher modes;
    /// flat bottom wall.
    RandomTop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub kind: InitKind,
    pub n_modes: usize,
    pub lower: f64,
    pub upper: f64,
    pub amplitude: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { kind: InitKind::Flat, n_modes: 5, lower: -1.0, upper: 1.0, amplitude: 0.1 }
    }
}

/// Missing targets default to the start shape's own flow rate and volume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub q0: Option<f64>,
    pub v0: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub m: usize,
    pub k_proxy: usize,
    pub mp: usize,
    pub proxy_radius_factor: f64,
    pub rank_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        SolverSection { m: d.m, k_proxy: d.k_proxy, mp: d.mp, proxy_radius_factor: d.proxy_radius_factor, rank_tol: d.rank_tol }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub c: f64,
    pub mu: f64,
    /// Wavelength of generated shapes; a shape file must agree with it.
    pub wavelength: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig { c: 1.0, mu: 1.0, wavelength: 2.0 * PI }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub sigma0: [f64; 2],
    pub sigma_v_escalated: f64,
    pub escalate_ratio: f64,
    pub zeta_star: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub grad_tol: f64,
    pub armijo_c1: f64,
    pub max_halvings: usize,
    pub curvature_eps: f64,
    pub warm_start_hessian: bool,
    /// Keep every lower-wall coefficient at its start value.
    pub fix_lower_wall: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        OptimizerSection {
            sigma0: d.sigma0,
            sigma_v_escalated: d.sigma_v_escalated,
            escalate_ratio: d.escalate_ratio,
            zeta_star: d.zeta_star,
            max_outer: d.max_outer,
            max_inner: d.max_inner,
            grad_tol: d.grad_tol,
            armijo_c1: d.armijo_c1,
            max_halvings: d.max_halvings,
            curvature_eps: d.curvature_eps,
            warm_start_hessian: d.warm_start_hessian,
            fix_lower_wall: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientCheckConfig {
    /// Central-difference step relative to `max(1, |ξ_k|)`.
    pub fd_step: f64,
    /// Parameter indices to audit; all when absent.
    pub params: Option<Vec<usize>>,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        GradientCheckConfig { fd_step: 1e-5, params: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub nx: usize,
    pub ny: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { nx: 64, ny: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Shape file; when absent the start shape comes from `init`.
    pub shape: Option<PathBuf>,
    pub init: InitConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub targets: TargetConfig,
    pub solver: SolverSection,
    pub physics: PhysicsConfig,
    pub optimizer: OptimizerSection,
    pub gradient: GradientCheckConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Solve,
            shape: None,
            init: InitConfig::default(),
            out: PathBuf::from("out"),
            seed: 0,
            targets: TargetConfig::default(),
            solver: SolverSection::default(),
            physics: PhysicsConfig::default(),
            optimizer: OptimizerSection::default(),
            gradient: GradientCheckConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides (dotted keys, TOML
    /// values; bare words are taken as strings).
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, RunError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            m: self.solver.m,
            k_proxy: self.solver.k_proxy,
            mp: self.solver.mp,
            proxy_radius_factor: self.solver.proxy_radius_factor,
            rank_tol: self.solver.rank_tol,
            mu: self.physics.mu,
            c: self.physics.c,
            ..SolverConfig::default()
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            sigma0: o.sigma0,
            sigma_v_escalated: o.sigma_v_escalated,
            escalate_ratio: o.escalate_ratio,
            zeta_star: o.zeta_star,
            max_outer: o.max_outer,
            max_inner: o.max_inner,
            grad_tol: o.grad_tol,
            armijo_c1: o.armijo_c1,
            max_halvings: o.max_halvings,
            curvature_eps: o.curvature_eps,
            warm_start_hessian: o.warm_start_hessian,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let cfg_err = |e: Error| RunError::Config(e.to_string());
        self.solver_config().validate().map_err(cfg_err)?;
        self.optimizer_config().validate().map_err(cfg_err)?;
        if !(self.physics.wavelength > 0.0 && self.physics.wavelength.is_finite()) {
            return Err(RunError::Config("wavelength must be positive".into()));
        }
        if !(self.gradient.fd_step > 0.0) {
            return Err(RunError::Config("finite-difference step must be positive".into()));
        }
        if self.sample.nx < 2 || self.sample.ny < 2 {
            return Err(RunError::Config("sampling grid needs at least 2 points per direction".into()));
        }
        if self.init.n_modes == 0 {
            return Err(RunError::Config("init.n_modes must be positive".into()));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), RunError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| RunError::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Solver(Error),
    NotConverged(String),
    Output(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Solver(_) => 3,
            RunError::NotConverged(_) => 4,
            RunError::Output(_) => 5,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "config error: {m}"),
            RunError::Solver(e) => write!(f, "solver failure: {e}"),
            RunError::NotConverged(m) => write!(f, "not converged: {m}"),
            RunError::Output(m) => write!(f, "output error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Solver(e)
    }
}

fn output_err(path: &Path, e: std::io::Error) -> RunError {
    RunError::Output(format!("{}: {e}", path.display()))
}

/// Header row plus rows, written tab-separated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for r in &self.rows {
            s += &r.join("\t");
            s.push('\n');
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self, Error> {
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().ok_or_else(|| Error::Parse("empty table".into()))?.split('\t').map(String::from).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split('\t').map(String::from).collect();
            if row.len() != header.len() {
                return Err(Error::Parse(format!("row {} has {} fields, header has {}", i + 1, row.len(), header.len())));
            }
            rows.push(row);
        }
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k].as_str()).collect())
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn load_shape(path: &Path) -> Result<WallShapeParams, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    WallShapeParams::from_key_value(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
}

pub fn save_shape(path: &Path, p: &WallShapeParams) -> Result<(), RunError> {
    fs::write(path, p.to_key_value()).map_err(|e| output_err(path, e))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".pumpopt.lock";

    pub fn acquire(dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(|e| output_err(dir, e))?;
        let path = dir.join(Self::FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                Err(RunError::Output(format!("{} is locked by another run ({})", dir.display(), path.display())))
            }
            Err(e) => Err(output_err(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Generated start shape. Random draws retry until the geometry is valid.
pub fn initial_shape(init: &InitConfig, wavelength: f64, seed: u64, m: usize) -> Result<WallShapeParams, RunError> {
    let n = init.n_modes;
    let mut p = WallShapeParams::flat(n, wavelength, init.lower, init.upper);
    match init.kind {
        InitKind::Flat => {}
        InitKind::SymmetricBump => {
            p.set_x2(Wall::Upper, 1, init.amplitude);
            p.set_x2(Wall::Lower, 1, -init.amplitude);
        }
        InitKind::RandomTop => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let mut q = p.clone();
                q.set_x2(Wall::Upper, 1, init.amplitude);
                for k in 2..=2 * n {
                    let freq = if k > n { k - n } else { k };
                    let r: f64 = rng.gen_range(-1.0..1.0);
                    q.set_x2(Wall::Upper, k, 0.25 * init.amplitude * r / freq as f64);
                }
                if ChannelGeometry::new(&q, m, 8).is_ok() {
                    return Ok(q);
                }
            }
            return Err(RunError::Config("could not draw a valid random top wall".into()));
        }
    }
    ChannelGeometry::new(&p, m, 8).map_err(|e| RunError::Config(format!("initial shape: {e}")))?;
    Ok(p)
}

fn start_shape(cfg: &RunConfig) -> Result<WallShapeParams, RunError> {
    match &cfg.shape {
        Some(path) => {
            let p = load_shape(path)?;
            if (p.wavelength - cfg.physics.wavelength).abs() > 1e-12 * cfg.physics.wavelength {
                return Err(RunError::Config(format!(
                    "shape wavelength {} differs from physics.wavelength {}",
                    p.wavelength, cfg.physics.wavelength
                )));
            }
            Ok(p)
        }
        None => initial_shape(&cfg.init, cfg.physics.wavelength, cfg.seed, cfg.solver.m),
    }
}

/// Targets with missing entries filled from the start shape.
fn resolve_targets(cfg: &RunConfig, start: &WallShapeParams, solver: &SolverConfig) -> Result<Targets, RunError> {
    let geom = solver.geometry(start)?;
    let q0 = match cfg.targets.q0 {
        Some(q) => q,
        None => functionals::flow_rate(&assemble_system(&geom, solver)?.solve_forward(&geom), &geom),
    };
    Ok(Targets { q0, v0: cfg.targets.v0.unwrap_or(geom.volume) })
}

fn values_table(fv: &FunctionalValues, t: Targets) -> Table {
    let mut tab = Table::new(&["j_pl", "q", "v", "q0", "v0", "c_q", "c_v"]);
    tab.push([fv.j_pl, fv.q, fv.v, t.q0, t.v0, fv.c_q, fv.c_v].map(num).to_vec());
    tab
}

/// What a run produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub mode: Mode,
    pub files: Vec<PathBuf>,
    pub message: String,
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn text(&mut self, name: &str, body: &str) -> Result<(), RunError> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| output_err(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<(), RunError> {
        self.text(name, &t.to_tsv())
    }
}

/// Runs one configured job inside `cfg.out`, holding the directory lock.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let mut w = Writer { dir: &cfg.out, files: Vec::new() };
    let solver = cfg.solver_config();
    let start = start_shape(cfg)?;
    let config_echo = toml::to_string(cfg).map_err(|e| RunError::Config(e.to_string()))?;
    w.text("config.toml", &config_echo)?;
    let message = match cfg.mode {
        Mode::Solve => run_solve(cfg, &start, &solver, &mut w)?,
        Mode::Optimize => run_optimize(cfg, &start, &solver, &mut w)?,
        Mode::CheckGradient => run_check_gradient(cfg, &start, &solver, &mut w)?,
        Mode::SampleField => run_sample_field(cfg, &start, &solver, &mut w)?,
    };
    Ok(RunSummary { mode: cfg.mode, files: w.files, message })
}

fn run_solve(cfg: &RunConfig, start: &WallShapeParams, solver: &SolverConfig, w: &mut Writer) -> Result<String, RunError> {
    let targets = resolve_targets(cfg, start, solver)?;
    let geom = solver.geometry(start)?;
    let fwd = assemble_system(&geom, solver)?.solve_forward(&geom);
    let fv = functionals::evaluate(&fwd, &geom, targets);
    w.table("values.tsv", &values_table(&fv, targets))?;
    let mut walls = Table::new(&["wall", "j", "t", "x1", "x2", "n1", "n2", "kappa", "f1", "f2", "p", "f_s"]);
    for wall in Wall::BOTH {
        let dw = geom.wall(wall);
        let wf = fwd.wall(wall);
        for j in 0..dw.m {
            let mut row = vec![wall_name(wall).to_string(), j.to_string()];
            row.extend(
                [
                    dw.t[j],
                    dw.x[j][0],
                    dw.x[j][1],
                    dw.normal[j][0],
                    dw.normal[j][1],
                    dw.kappa[j],
                    wf.traction[j][0],
                    wf.traction[j][1],
                    wf.pressure[j],
                    wf.fs[j],
                ]
                .map(num),
            );
            walls.push(row);
        }
    }
    w.table("walls.tsv", &walls)?;
    Ok(format!("J_PL = {}, Q = {}, V = {}", fv.j_pl, fv.q, fv.v))
}

fn wall_name(w: Wall) -> &'static str {
    match w {
        Wall::Upper => "upper",
        Wall::Lower => "lower",
    }
}

/// Design indices the optimizer may move.
pub fn free_parameters(p: &WallShapeParams, fix_lower_wall: bool) -> Vec<usize> {
    (0..p.len()).filter(|&k| !fix_lower_wall || p.slot(k).wall == Wall::Upper).collect()
}

/// Inner-iteration convergence log, one row per accepted step.
pub fn convergence_table(res: &OptimizationResult) -> Table {
    let mut t = Table::new(&["m", "j", "j_pl", "c_q", "c_v", "grad_norm", "step", "solves"]);
    for r in &res.log {
        let mut row = vec![r.m.to_string(), r.j.to_string()];
        row.extend([r.j_pl, r.c_q, r.c_v, r.grad_norm, r.step].map(num));
        row.push(r.solves.to_string());
        t.push(row);
    }
    t
}

/// Outer-iteration record with the `(λ, σ, ζ)` used for each subproblem.
pub fn outer_table(res: &OptimizationResult) -> Table {
    let mut t = Table::new(&[
        "m", "action", "j_pl", "c_q", "c_v", "grad_norm", "inner", "lambda1", "lambda2", "sigma1", "sigma2", "zeta1", "zeta2",
    ]);
    for h in &res.state.history {
        let action = match h.action {
            OuterAction::Converged => "converged",
            OuterAction::MultiplierUpdate => "multiplier",
            OuterAction::PenaltyIncrease => "penalty",
        };
        let mut row = vec![h.m.to_string(), action.to_string()];
        row.extend([h.j_pl, h.c_q, h.c_v, h.grad_norm].map(num));
        row.push(h.inner_iterations.to_string());
        row.extend([h.lambda[0], h.lambda[1], h.sigma[0], h.sigma[1], h.zeta[0], h.zeta[1]].map(num));
        t.push(row);
    }
    t
}

fn shapes_table(start: &WallShapeParams, res: &OptimizationResult) -> Table {
    let mut header = vec!["m".to_string()];
    header.extend((0..start.len()).map(|k| start.param_label(k)));
    let mut t = Table::new(&header);
    let mut row0 = vec!["0".to_string()];
    row0.extend(start.xi.iter().map(|v| num(*v)));
    t.push(row0);
    for h in &res.state.history {
        let mut row = vec![h.m.to_string()];
        row.extend(h.xi.iter().map(|v| num(*v)));
        t.push(row);
    }
    t
}

fn run_optimize(cfg: &RunConfig, start: &WallShapeParams, solver: &SolverConfig, w: &mut Writer) -> Result<String, RunError> {
    let targets = resolve_targets(cfg, start, solver)?;
    let free = free_parameters(start, cfg.optimizer.fix_lower_wall);
    let res = optimizer::solve_constrained(start, free, solver, targets, &cfg.optimizer_config())?;
    w.table("convergence.tsv", &convergence_table(&res))?;
    w.table("outer.tsv", &outer_table(&res))?;
    w.table("shapes.tsv", &shapes_table(start, &res))?;
    w.text("final_shape.txt", &res.params.to_key_value())?;
    let mut summary = values_table(&res.values, targets);
    summary.header.extend(["converged", "outer", "solves"].map(String::from));
    summary.rows[0].extend([res.converged.to_string(), res.state.history.len().to_string(), res.solves.to_string()]);
    w.table("summary.tsv", &summary)?;
    let msg = format!(
        "J_PL = {}, C_Q = {:e}, C_V = {:e} after {} outer iterations and {} solves",
        res.values.j_pl,
        res.values.c_q,
        res.values.c_v,
        res.state.history.len(),
        res.solves
    );
    if res.converged {
        Ok(msg)
    } else {
        Err(RunError::NotConverged(msg))
    }
}

/// Analytic-vs-FD audit of every requested design direction; relative
/// errors use the floor `1e-3 · max_k |analytic_k|` per functional.
pub fn gradient_check_table(
    p: &WallShapeParams,
    solver: &SolverConfig,
    targets: Targets,
    step: f64,
    params: Option<&[usize]>,
) -> Result<(Table, f64), Error> {
    let ev = full_gradient(p, solver, targets)?;
    let g = &ev.gradient;
    let idx: Vec<usize> = params.map(<[usize]>::to_vec).unwrap_or_else(|| (0..p.len()).collect());
    if let Some(&bad) = idx.iter().find(|&&k| k >= p.len()) {
        return Err(Error::InvalidConfig(format!("parameter index {bad} out of range")));
    }
    let scale = |v: &[f64]| 1e-3 * v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let floors = [scale(&g.d_j), scale(&g.d_cq), scale(&g.d_cv)].map(|f| if f > 0.0 { f } else { 1e-12 });
    let mut t = Table::new(&[
        "k", "param", "dJ", "dJ_fd", "err_J", "dQ", "dQ_fd", "err_Q", "dV", "dV_fd", "err_V", "max_rel_err",
    ]);
    let mut worst = 0.0f64;
    for k in idx {
        let fd = finite_difference(p, k, fd_step(p.xi[k], step), solver)?;
        let an = [g.d_j[k], g.d_cq[k], g.d_cv[k]];
        let err: Vec<f64> = (0..3).map(|i| relative_error(an[i], fd[i], floors[i])).collect();
        let row_max = err.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(row_max);
        let mut row = vec![k.to_string(), p.param_label(k)];
        for i in 0..3 {
            row.extend([an[i], fd[i], err[i]].map(num));
        }
        row.push(num(row_max));
        t.push(row);
    }
    Ok((t, worst))
}

fn run_check_gradient(cfg: &RunConfig, start: &WallShapeParams, solver: &SolverConfig, w: &mut Writer) -> Result<String, RunError> {
    let geom = solver.geometry(start)?;
    // Targets only shift C_Q and C_V, not their derivatives.
    let targets = Targets { q0: cfg.targets.q0.unwrap_or(0.0), v0: cfg.targets.v0.unwrap_or(geom.volume) };
    let (t, worst) = gradient_check_table(start, solver, targets, cfg.gradient.fd_step, cfg.gradient.params.as_deref())?;
    w.table("gradient_check.tsv", &t)?;
    Ok(format!("max relative error {worst:e} over {} parameters", t.rows.len()))
}

/// Status of one sampling grid point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Fluid,
    /// Inside the fluid but within the near-wall margin; not evaluated.
    NearWall,
    Outside,
}

impl CellStatus {
    fn name(self) -> &'static str {
        match self {
            CellStatus::Fluid => "fluid",
            CellStatus::NearWall => "near_wall",
            CellStatus::Outside => "outside",
        }
    }
}

/// Closed boundary of one period: lower wall left to right, right end
/// section up, upper wall right to left, left end section down.
fn cell_polygon(geom: &ChannelGeometry, samples: usize) -> Vec<Point> {
    let p = &geom.params;
    let (lo, up) = (p.curve(Wall::Lower), p.curve(Wall::Upper));
    let mut poly: Vec<Point> = (0..=samples).map(|i| lo.point(2.0 * PI * i as f64 / samples as f64)).collect();
    poly.extend((0..=samples).rev().map(|i| up.point(2.0 * PI * i as f64 / samples as f64)));
    poly
}

fn inside_polygon(poly: &[Point], x: Point) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > x[1]) != (b[1] > x[1]) && x[0] < a[0] + (x[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]) {
            inside = !inside;
        }
    }
    inside
}

/// Rectangular grid over `[0, L) × [min x₂, max x₂]` of the walls.
pub fn sample_grid(geom: &ChannelGeometry, nx: usize, ny: usize) -> Vec<Point> {
    let ys = geom.walls().iter().flat_map(|w| w.x.iter().map(|p| p[1])).collect::<Vec<_>>();
    let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let mut pts = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            pts.push([geom.wavelength * i as f64 / nx as f64, lo + (hi - lo) * j as f64 / (ny - 1) as f64]);
        }
    }
    pts
}

fn run_sample_field(cfg: &RunConfig, start: &WallShapeParams, solver: &SolverConfig, w: &mut Writer) -> Result<String, RunError> {
    let geom = solver.geometry(start)?;
    let fwd = assemble_system(&geom, solver)?.solve_forward(&geom);
    let (nx, ny) = (cfg.sample.nx, cfg.sample.ny);
    let pts = sample_grid(&geom, nx, ny);
    let poly = cell_polygon(&geom, 4 * geom.m());
    let l = geom.wavelength;
    let status: Vec<CellStatus> = pts
        .iter()
        .map(|&x| {
            let inside = [-l, 0.0, l].iter().any(|s| inside_polygon(&poly, [x[0] + s, x[1]]));
            if !inside {
                CellStatus::Outside
            } else if fwd.is_near_wall(x) {
                CellStatus::NearWall
            } else {
                CellStatus::Fluid
            }
        })
        .collect();
    let fluid: Vec<Point> = pts.iter().zip(&status).filter(|(_, s)| **s == CellStatus::Fluid).map(|(p, _)| *p).collect();
    let mut samples = eval_field(&fwd, &fluid).into_iter();
    let mut t = Table::new(&["i", "j", "x1", "x2", "status", "u1", "u2", "p"]);
    let mut counts = [0usize; 3];
    for (n, (x, s)) in pts.iter().zip(&status).enumerate() {
        let mut row = vec![(n % nx).to_string(), (n / nx).to_string(), num(x[0]), num(x[1]), s.name().to_string()];
        if *s == CellStatus::Fluid {
            let v = samples.next().expect("one sample per fluid point");
            row.extend([v.velocity[0], v.velocity[1], v.pressure].map(num));
        } else {
            row.extend(["nan", "nan", "nan"].map(String::from));
        }
        counts[*s as usize] += 1;
        t.push(row);
    }
    w.table("field.tsv", &t)?;
    let mut walls = Table::new(&["wall", "j", "x1", "x2"]);
    for wall in Wall::BOTH {
        let dw = geom.wall(wall);
        for j in 0..=dw.m {
            let p = if j == dw.m { [dw.x[0][0] + l, dw.x[0][1]] } else { dw.x[j] };
            walls.push(vec![wall_name(wall).to_string(), j.to_string(), num(p[0]), num(p[1])]);
        }
    }
    w.table("wall_polylines.tsv", &walls)?;
    let mut fw = String::new();
    let _ = write!(fw, "{} fluid, {} near-wall excluded, {} outside", counts[0], counts[1], counts[2]);
    Ok(fw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_in(dir: &Path, mode: Mode) -> RunConfig {
        RunConfig { mode, out: dir.to_path_buf(), ..RunConfig::default() }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::from_toml_with_overrides(
            "mode = \"solve\"\n[solver]\nm = 32\n",
            &["solver.m=48".into(), "physics.mu=0.5".into(), "mode=optimize".into(), "targets.q0=0.25".into()],
        )
        .unwrap();
        assert_eq!(cfg.solver.m, 48);
        assert_eq!(cfg.physics.mu, 0.5);
        assert_eq!(cfg.mode, Mode::Optimize);
        assert_eq!(cfg.targets.q0, Some(0.25));
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for (text, ov) in [
            ("mode = \"dance\"", vec![]),
            ("[solver]\nm = 33\n", vec![]),
            ("[optimizer]\ngrad_tol = -1.0\n", vec![]),
            ("unknown_key = 1", vec![]),
            ("", vec!["solver".to_string()]),
            ("", vec!["solver.m.x=3".to_string()]),
        ] {
            let err = RunConfig::from_toml_with_overrides(text, &ov).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text:?} {ov:?}: {err}");
        }
    }

    #[test]
    fn config_serializes_back() {
        let cfg = RunConfig { seed: 17, ..RunConfig::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml_with_overrides(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn table_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), num(0.1 + 0.2)]);
        let back = Table::parse_tsv(&t.to_tsv()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("b").unwrap()[0].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert!(Table::parse_tsv("a\tb\n1\n").is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert_eq!(OutputLock::acquire(dir.path()).unwrap_err().exit_code(), 5);
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn random_top_wall_is_seeded() {
        let init = InitConfig { kind: InitKind::RandomTop, amplitude: 0.3, ..InitConfig::default() };
        let a = initial_shape(&init, 2.0 * PI, 9, 64).unwrap();
        let b = initial_shape(&init, 2.0 * PI, 9, 64).unwrap();
        let c = initial_shape(&init, 2.0 * PI, 10, 64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let lower: Vec<usize> = (0..a.len()).filter(|&k| a.slot(k).wall == Wall::Lower).collect();
        assert!(lower.iter().all(|&k| a.xi[k] == 0.0));
    }

    #[test]
    fn solve_flat_channel_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cfg_in(dir.path(), Mode::Solve);
        cfg.init = InitConfig { lower: 0.0, upper: 1.0, ..InitConfig::default() };
        cfg.targets = TargetConfig { q0: Some(0.0), v0: None };
        run(&cfg).unwrap();
        let t = Table::parse_tsv(&fs::read_to_string(dir.path().join("values.tsv")).unwrap()).unwrap();
        let get = |c: &str| t.column(c).unwrap()[0].parse::<f64>().unwrap();
        assert!(get("j_pl").abs() < 1e-8);
        assert!(get("q").abs() < 1e-8);
        assert!((get("v") - 2.0 * PI).abs() < 1e-12);
        assert!(!dir.path().join(OutputLock::FILE).exists());
    }

    #[test]
    fn shape_file_must_match_wavelength() {
        let dir = tempfile::tempdir().unwrap();
        let shape = dir.path().join("s.txt");
        save_shape(&shape, &WallShapeParams::flat(2, 3.0, -1.0, 1.0)).unwrap();
        let mut cfg = cfg_in(&dir.path().join("out"), Mode::Solve);
        cfg.shape = Some(shape);
        assert_eq!(run(&cfg).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn sample_field_marks_excluded_points() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cfg_in(dir.path(), Mode::SampleField);
        cfg.init = InitConfig { kind: InitKind::SymmetricBump, amplitude: 0.2, ..InitConfig::default() };
        cfg.sample = SampleConfig { nx: 24, ny: 16 };
        run(&cfg).unwrap();
        let t = Table::parse_tsv(&fs::read_to_string(dir.path().join("field.tsv")).unwrap()).unwrap();
        assert_eq!(t.rows.len(), 24 * 16);
        let status = t.column("status").unwrap();
        for s in ["fluid", "near_wall", "outside"] {
            assert!(status.contains(&s), "no {s} cells");
        }
        let u1 = t.column("u1").unwrap();
        for (s, u) in status.iter().zip(&u1) {
            assert_eq!(*s != "fluid", *u == "nan");
        }
        // The wave-frame velocity is −c e₁ at the walls and still leftward
        // across a gently bumped channel.
        let x2 = t.column("x2").unwrap();
        for ((s, u), y) in status.iter().zip(&u1).zip(&x2) {
            if *s == "fluid" && y.parse::<f64>().unwrap().abs() < 0.5 {
                assert!(u.parse::<f64>().unwrap() < 0.0);
            }
        }
    }
}
