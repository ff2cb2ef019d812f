//! Declarative experiments. A TOML file with sections `[model]`, `[driver]`,
//! `[obstacle]`, `[terminal]`, `[params]` and `[run]` is resolved into
//! solver inputs; [`run_config_text`] executes the requested operations and
//! writes CSV tables plus `manifest.json` into the output directory.
//!
//! Parsing is strict: unknown keys are rejected with their dotted path.
//! Drivers, obstacles and terminals are selected by `name`, the remaining
//! keys of the section are the parameters of that bundled family.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::bsde::{solution_csv, solve_bsde};
use crate::drivers::{
    envelope_check, library, lipschitz_probe_driver, lipschitz_probe_obstacle, obstacle_field, terminal_consistency,
    DriverSpec, ObstacleSpec, Regime, TerminalSpec,
};
use crate::error::Error;
use crate::laws::EmpiricalLaw;
use crate::meanfield::{iterations_csv, picard_solve, Init, MeanFieldParams};
use crate::mpp::{
    build_lattice_with_cap, compensator_residual, fmt_f64, lattice_compensated_mean, write_lattice, CompensatorModel,
    MarkSpace, ScenarioLattice, TimeGrid, DEFAULT_NODE_CAP,
};
use crate::oracle::{exact_meanfield_fixed_point, exact_tree_solve, ORACLE_MAX_MARKS, ORACLE_MAX_STEPS};
use crate::reflected::{reflected_csv, solve_reflected};

pub const MANIFEST_SCHEMA: &str = "mfrbsde-manifest v1";
pub const VALIDATE_SCHEMA: &str = "# schema: mfrbsde-validate v1";
pub const ORACLE_SCHEMA: &str = "# schema: mfrbsde-oracle v1";
pub const REFINE_SCHEMA: &str = "# schema: mfrbsde-refine v1";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub driver: DriverConfig,
    #[serde(default)]
    pub obstacle: ObstacleConfig,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub params: ParamsConfig,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub marks: Vec<String>,
    pub horizon: f64,
    pub steps: usize,
    /// Time-homogeneous intensities, one per mark.
    pub rates: Option<Vec<f64>>,
    /// Per-step intensities `phi[step][mark]`; excludes `rates`.
    pub phi: Option<Vec<Vec<f64>>>,
    /// `A_t = clock_scale * t`; defaults to 1.
    pub clock_scale: Option<f64>,
    /// Explicit clock values at the grid points; excludes `clock_scale`.
    pub clock: Option<Vec<f64>>,
    pub node_cap: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    Zero,
    Constant {
        c: f64,
    },
    Linear {
        a: f64,
        #[serde(default)]
        c: f64,
    },
    LinearMean {
        #[serde(default)]
        a: f64,
        b: f64,
        #[serde(default)]
        c: f64,
    },
    SmoothLipschitz {
        #[serde(default)]
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        kappa: f64,
        #[serde(default)]
        c: f64,
        rate_bound: f64,
    },
    JumpEntropic {
        lambda: f64,
    },
    QuadraticMean {
        lambda: f64,
        #[serde(default)]
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        c: f64,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleConfig {
    #[default]
    None,
    Constant {
        c: f64,
    },
    /// `h = a y + b mean + c + d t`.
    Affine {
        #[serde(default)]
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        c: f64,
        #[serde(default)]
        d: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Constant {
        x: f64,
    },
    EventCount {
        #[serde(default)]
        offset: f64,
        scale: f64,
    },
    MarkWeighted {
        #[serde(default)]
        offset: f64,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitConfig {
    ConditionalExpectation,
    ClippedZero,
}

/// Overrides of the constants read from the driver and obstacle, plus seeds
/// and sample sizes.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub p: Option<f64>,
    pub eta: Option<f64>,
    pub beta: Option<f64>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub lambda: Option<f64>,
    pub moment_gamma: Option<f64>,
    pub theta: Option<Vec<f64>>,
    pub tol: Option<f64>,
    pub max_picard: Option<usize>,
    pub init: Option<InitConfig>,
    pub post_sweeps: Option<usize>,
    pub seed: Option<u64>,
    /// Monte Carlo paths for the compensator check.
    pub paths: Option<usize>,
    /// Random probe points for the Lipschitz and envelope checks.
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Op {
    Lattice,
    Solve,
    Reflect,
    Picard,
    Validate,
    OracleCheck,
    Refine,
}

impl Op {
    pub const ALL: [Op; 7] = [
        Op::Lattice,
        Op::Solve,
        Op::Reflect,
        Op::Picard,
        Op::Validate,
        Op::OracleCheck,
        Op::Refine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Lattice => "lattice",
            Op::Solve => "solve",
            Op::Reflect => "reflect",
            Op::Picard => "picard",
            Op::Validate => "validate",
            Op::OracleCheck => "oracle-check",
            Op::Refine => "refine",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Op {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Op::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| format!("unknown operation {s:?}"))
    }
}

fn default_refine() -> Vec<usize> {
    vec![8, 16, 32, 64, 128, 256]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub ops: Vec<Op>,
    #[serde(default = "default_refine")]
    pub refine_steps: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ops: Vec::new(),
            refine_steps: default_refine(),
        }
    }
}

/// Failure of a run, classified for the exit code.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(#[from] Error),
    #[error("validation failure: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => 2,
            RunError::Numeric(_) => 3,
            RunError::Validation(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Numeric(_) => "numeric",
            RunError::Validation(_) => "validation",
            RunError::Io(_) => "io",
        }
    }
}

/// Parses a config, reporting the dotted key path of the first problem.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, RunError> {
    let de = toml::Deserializer::parse(text).map_err(|e| RunError::Config(e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        RunError::Config(if path == "." { msg } else { format!("{path}: {msg}") })
    })
}

/// A resolved config.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub comp: CompensatorModel,
    pub grid: TimeGrid,
    pub driver: DriverSpec,
    pub obstacle: ObstacleSpec,
    pub terminal: TerminalSpec,
    pub params: MeanFieldParams,
    pub seed: u64,
    pub paths: usize,
    pub samples: usize,
}

fn build_model(m: &ModelConfig, steps: usize) -> Result<(CompensatorModel, TimeGrid), RunError> {
    let cfg = |s: &str| RunError::Config(s.to_string());
    let grid = TimeGrid::uniform(m.horizon, steps).map_err(|e| RunError::Config(format!("model: {e}")))?;
    let marks = MarkSpace::new(m.marks.clone()).map_err(|e| RunError::Config(format!("model.marks: {e}")))?;
    let phi = match (&m.rates, &m.phi) {
        (Some(r), None) => vec![r.clone(); steps],
        (None, Some(p)) if steps == m.steps => p.clone(),
        (None, Some(_)) => return Err(cfg("model.phi: a per-step table fixes the step count")),
        _ => return Err(cfg("model: give exactly one of `rates` and `phi`")),
    };
    let clock = match (m.clock_scale, &m.clock) {
        (scale, None) => grid.times().iter().map(|t| scale.unwrap_or(1.0) * t).collect(),
        (None, Some(c)) if steps == m.steps => c.clone(),
        (None, Some(_)) => return Err(cfg("model.clock: an explicit clock fixes the step count")),
        (Some(_), Some(_)) => return Err(cfg("model: give at most one of `clock_scale` and `clock`")),
    };
    let comp = CompensatorModel::new(marks, phi, clock, m.horizon).map_err(|e| RunError::Config(format!("model: {e}")))?;
    comp.check_feasible().map_err(|e| RunError::Config(format!("model: {e}")))?;
    Ok((comp, grid))
}

fn build_driver(d: &DriverConfig) -> DriverSpec {
    match *d {
        DriverConfig::Zero => library::zero(),
        DriverConfig::Constant { c } => library::constant(c),
        DriverConfig::Linear { a, c } => library::linear(a, c),
        DriverConfig::LinearMean { a, b, c } => library::linear_mean(a, b, c),
        DriverConfig::SmoothLipschitz { a, b, kappa, c, rate_bound } => library::smooth_lipschitz(a, b, kappa, c, rate_bound),
        DriverConfig::JumpEntropic { lambda } => library::jump_entropic(lambda),
        DriverConfig::QuadraticMean { lambda, a, b, c } => library::quadratic_mean(lambda, a, b, c),
    }
}

fn build_obstacle(o: &ObstacleConfig) -> ObstacleSpec {
    match *o {
        ObstacleConfig::None => ObstacleSpec::none(),
        ObstacleConfig::Constant { c } => ObstacleSpec::constant(c),
        ObstacleConfig::Affine { a, b, c, d } => ObstacleSpec::affine(a, b, c, d),
    }
}

fn build_terminal(t: &TerminalConfig) -> TerminalSpec {
    match t {
        TerminalConfig::Constant { x } => TerminalSpec::constant(*x),
        TerminalConfig::EventCount { offset, scale } => TerminalSpec::event_count(*offset, *scale),
        TerminalConfig::MarkWeighted { offset, weights } => TerminalSpec::mark_weighted(*offset, weights.clone()),
    }
}

impl Experiment {
    pub fn resolve(config: ExperimentConfig, seed_override: Option<u64>) -> Result<Self, RunError> {
        let (comp, grid) = build_model(&config.model, config.model.steps)?;
        let driver = build_driver(&config.driver);
        driver.validate().map_err(|e| RunError::Config(format!("driver: {e}")))?;
        if let TerminalConfig::MarkWeighted { weights, .. } = &config.terminal {
            if weights.len() != comp.n_marks() {
                return Err(RunError::Config(format!(
                    "terminal.weights: {} weights for {} marks",
                    weights.len(),
                    comp.n_marks()
                )));
            }
        }
        let obstacle = build_obstacle(&config.obstacle);
        let terminal = build_terminal(&config.terminal);
        let pc = &config.params;
        let mut params = MeanFieldParams::from_specs(&driver, &obstacle);
        params.p = pc.p.unwrap_or(params.p);
        params.eta = pc.eta.unwrap_or(params.eta);
        params.beta = pc.beta.unwrap_or(params.beta);
        params.gamma1 = pc.gamma1.unwrap_or(params.gamma1);
        params.gamma2 = pc.gamma2.unwrap_or(params.gamma2);
        params.lambda = pc.lambda.or(params.lambda);
        params.moment_gamma = pc.moment_gamma;
        params.theta = pc.theta.clone().unwrap_or(params.theta);
        params.tol = pc.tol.unwrap_or(params.tol);
        params.max_picard = pc.max_picard.unwrap_or(params.max_picard);
        params.init = match pc.init {
            Some(InitConfig::ClippedZero) => Init::ClippedZero,
            _ => Init::ConditionalExpectation,
        };
        params.post_sweeps = pc.post_sweeps.unwrap_or(params.post_sweeps);
        params.validate().map_err(|e| RunError::Config(format!("params: {e}")))?;
        if params.gamma1 < obstacle.gamma1 || params.gamma2 < obstacle.gamma2 {
            return Err(RunError::Config(format!(
                "params: gamma1/gamma2 below the obstacle's constants {} / {}",
                obstacle.gamma1, obstacle.gamma2
            )));
        }
        Ok(Self {
            seed: seed_override.or(pc.seed).unwrap_or(0),
            paths: pc.paths.unwrap_or(10_000),
            samples: pc.samples.unwrap_or(2_000),
            config,
            comp,
            grid,
            driver,
            obstacle,
            terminal,
            params,
        })
    }

    fn node_cap(&self) -> usize {
        self.config.model.node_cap.unwrap_or(DEFAULT_NODE_CAP)
    }

    pub fn lattice(&self) -> crate::Result<ScenarioLattice> {
        build_lattice_with_cap(&self.comp, &self.grid, self.node_cap())
    }

    fn coupled(&self) -> bool {
        self.driver.reads_law || self.obstacle.coupled
    }

    fn has_barrier(&self) -> bool {
        !matches!(self.config.obstacle, ObstacleConfig::None)
    }

    /// Obstacle values of an uncoupled barrier.
    fn fixed_obstacle(&self, lattice: &ScenarioLattice) -> Vec<Vec<f64>> {
        let laws = vec![EmpiricalLaw::delta_zero(); lattice.steps() + 1];
        obstacle_field(&self.obstacle, lattice, &lattice.zeros(), &laws)
    }

    /// `Y_0` from the solver suited to the data: Picard when coupled, the
    /// reflected solver with a barrier, the plain solver otherwise.
    fn root_value(&self, lattice: &ScenarioLattice) -> Result<f64, RunError> {
        Ok(if self.coupled() {
            picard_solve(lattice, &self.driver, &self.obstacle, &self.terminal, &self.params)?.0.base.y[0][0]
        } else if self.has_barrier() {
            let h = self.fixed_obstacle(lattice);
            solve_reflected(lattice, &self.driver, &h, &self.terminal, None)?.base.y[0][0]
        } else {
            solve_bsde(lattice, &self.driver, &self.terminal, None)?.y[0][0]
        })
    }
}

/// Files produced by a run, by name.
pub type Outputs = BTreeMap<String, String>;

fn require_uncoupled(exp: &Experiment, op: Op) -> Result<(), RunError> {
    if exp.coupled() {
        return Err(RunError::Config(format!(
            "{op} needs data that ignore the solution's law; use picard"
        )));
    }
    Ok(())
}

fn check_row(out: &mut String, name: &str, passed: bool, samples: usize, slack: f64, detail: &str) {
    out.push_str(&format!("{name},{passed},{samples},{},{detail}\n", fmt_f64(slack)));
}

fn run_validate(exp: &Experiment, lattice: &ScenarioLattice) -> Result<(String, Vec<String>), RunError> {
    let mut out = format!("{VALIDATE_SCHEMA}\ncheck,passed,samples,worst_slack,detail\n");
    let mut failed = Vec::new();
    let mut note = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };

    let d = lipschitz_probe_driver(&exp.driver, &exp.comp, exp.samples, exp.seed)?;
    check_row(&mut out, "driver_lipschitz", d.passed(), d.samples, d.worst_slack, &format!("{} violations", d.violations));
    note("driver_lipschitz", d.passed());

    if exp.has_barrier() {
        let o = lipschitz_probe_obstacle(&exp.obstacle, lattice, exp.samples, exp.seed.wrapping_add(1))?;
        check_row(&mut out, "obstacle_lipschitz", o.passed(), o.samples, o.worst_slack, &format!("{} violations", o.violations));
        note("obstacle_lipschitz", o.passed());
        let t = terminal_consistency(&exp.obstacle, &exp.terminal, lattice)?;
        check_row(
            &mut out,
            "terminal_consistency",
            t.passed(),
            lattice.nodes(lattice.steps()).len(),
            0.0,
            &format!("{} violating nodes", t.violations.len()),
        );
        note("terminal_consistency", t.passed());
    }

    if exp.driver.regime == Regime::QuadraticExponential {
        let e = envelope_check(&exp.driver, &exp.comp, exp.samples, exp.seed.wrapping_add(2))?;
        check_row(&mut out, "growth_envelope", e.passed(), e.samples, 0.0, &format!("{} violations", e.violations.len()));
        note("growth_envelope", e.passed());
    }

    // integrand C(i, e) = (e + 1)(1 + t_i)
    let times = exp.grid.times().to_vec();
    let integrand = move |i: usize, e: usize| (e as f64 + 1.0) * (1.0 + times[i]);
    let (mean, se) = compensator_residual(&exp.comp, &exp.grid, &integrand, exp.paths, exp.seed.wrapping_add(3))?;
    let ok = mean.abs() <= 4.0 * se + 1e-12;
    check_row(&mut out, "compensator_mc", ok, exp.paths, 4.0 * se - mean.abs(), &format!("mean {} stderr {}", fmt_f64(mean), fmt_f64(se)));
    note("compensator_mc", ok);
    let exact = lattice_compensated_mean(lattice, &integrand);
    let ok = exact.abs() <= 1e-12;
    check_row(&mut out, "compensator_tree", ok, lattice.node_count(), 1e-12 - exact.abs(), &format!("mean {}", fmt_f64(exact)));
    note("compensator_tree", ok);
    Ok((out, failed))
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn run_oracle(exp: &Experiment, lattice: &ScenarioLattice) -> Result<(String, bool), RunError> {
    let mut out = format!("{ORACLE_SCHEMA}\ncomparison,max_error,tolerance,passed\n");
    if lattice.steps() > ORACLE_MAX_STEPS || lattice.n_marks() > ORACLE_MAX_MARKS {
        out.push_str("skipped,,,\n");
        return Ok((out, true));
    }
    let (label, err, tol) = if exp.coupled() {
        let (sol, _) = picard_solve(lattice, &exp.driver, &exp.obstacle, &exp.terminal, &exp.params)?;
        let exact = exact_meanfield_fixed_point(lattice, &exp.driver, &exp.obstacle, &exp.terminal, &exp.params)?;
        ("picard_vs_fixed_point", max_abs_diff(&sol.base.y, &exact), 1e-9)
    } else if exp.has_barrier() {
        let h = exp.fixed_obstacle(lattice);
        let sol = solve_reflected(lattice, &exp.driver, &h, &exp.terminal, None)?;
        let exact = exact_tree_solve(lattice, &exp.driver, Some(&h), &exp.terminal, None)?;
        ("reflected_vs_tree", max_abs_diff(&sol.base.y, &exact), 1e-12)
    } else {
        let sol = solve_bsde(lattice, &exp.driver, &exp.terminal, None)?;
        let exact = exact_tree_solve(lattice, &exp.driver, None, &exp.terminal, None)?;
        ("plain_vs_tree", max_abs_diff(&sol.y, &exact), 1e-12)
    };
    let ok = err <= tol;
    out.push_str(&format!("{label},{},{},{ok}\n", fmt_f64(err), fmt_f64(tol)));
    Ok((out, ok))
}

fn run_refine(exp: &Experiment) -> Result<String, RunError> {
    let mut out = format!("{REFINE_SCHEMA}\nsteps,max_d_clock,y0,increment\n");
    let mut last: Option<f64> = None;
    for &n in &exp.config.run.refine_steps {
        let (comp, grid) = build_model(&exp.config.model, n)?;
        let lattice = build_lattice_with_cap(&comp, &grid, exp.node_cap())?;
        let y0 = exp.root_value(&lattice)?;
        let inc = last.map(|l| fmt_f64((y0 - l).abs())).unwrap_or_default();
        out.push_str(&format!("{n},{},{},{inc}\n", fmt_f64(comp.max_d_clock()), fmt_f64(y0)));
        last = Some(y0);
    }
    Ok(out)
}

fn run_op(exp: &Experiment, op: Op, outputs: &mut Outputs) -> Result<(), RunError> {
    match op {
        Op::Refine => {
            outputs.insert("refine.csv".into(), run_refine(exp)?);
            return Ok(());
        }
        Op::Validate | Op::OracleCheck | Op::Lattice | Op::Solve | Op::Reflect | Op::Picard => {}
    }
    let lattice = exp.lattice()?;
    match op {
        Op::Lattice => {
            outputs.insert("lattice.txt".into(), write_lattice(&lattice));
        }
        Op::Solve => {
            require_uncoupled(exp, op)?;
            let sol = solve_bsde(&lattice, &exp.driver, &exp.terminal, None)?;
            outputs.insert("solution.csv".into(), solution_csv(&lattice, &sol));
        }
        Op::Reflect => {
            require_uncoupled(exp, op)?;
            let h = exp.fixed_obstacle(&lattice);
            let sol = solve_reflected(&lattice, &exp.driver, &h, &exp.terminal, None)?;
            outputs.insert("reflected.csv".into(), reflected_csv(&lattice, &sol, &h));
        }
        Op::Picard => {
            let (sol, report) = picard_solve(&lattice, &exp.driver, &exp.obstacle, &exp.terminal, &exp.params)?;
            outputs.insert("picard_solution.csv".into(), reflected_csv(&lattice, &sol, &report.obstacle));
            outputs.insert("iterations.csv".into(), iterations_csv(&report));
            outputs.insert("picard_summary.txt".into(), report.summary());
            if let Some(m) = &report.moments {
                outputs.insert("moments.csv".into(), m.csv());
            }
        }
        Op::Validate => {
            let (csv, failed) = run_validate(exp, &lattice)?;
            outputs.insert("validate.csv".into(), csv);
            if !failed.is_empty() {
                return Err(RunError::Validation(format!("failed checks: {}", failed.join(", "))));
            }
        }
        Op::OracleCheck => {
            let (csv, ok) = run_oracle(exp, &lattice)?;
            outputs.insert("oracle.csv".into(), csv);
            if !ok {
                return Err(RunError::Validation("solver disagrees with the oracle".into()));
            }
        }
        Op::Refine => unreachable!(),
    }
    Ok(())
}

/// Runs `ops` (or the config's `run.ops`) and returns the files produced.
/// On failure the files produced so far are returned with the error.
pub fn run_experiment(exp: &Experiment, ops: &[Op]) -> (Outputs, Result<(), RunError>) {
    let mut outputs = Outputs::new();
    for &op in ops {
        if let Err(e) = run_op(exp, op, &mut outputs) {
            return (outputs, Err(e));
        }
    }
    (outputs, Ok(()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses `text`, runs the operations and writes every output plus
/// `manifest.json` into `out_dir`. The manifest is written even when the run
/// fails.
pub fn run_config_text(
    text: &str,
    ops: Option<&[Op]>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<Outputs, RunError> {
    std::fs::create_dir_all(out_dir)?;
    let mut seed_used = seed;
    let mut ops_used: Vec<Op> = ops.map(<[Op]>::to_vec).unwrap_or_default();
    let (outputs, result) = match parse_config(text).and_then(|c| {
        if ops.is_none() {
            ops_used = c.run.ops.clone();
        }
        Experiment::resolve(c, seed)
    }) {
        Ok(exp) => {
            seed_used = Some(exp.seed);
            if ops_used.is_empty() {
                (Outputs::new(), Err(RunError::Config("run.ops: no operations requested".into())))
            } else {
                run_experiment(&exp, &ops_used)
            }
        }
        Err(e) => (Outputs::new(), Err(e)),
    };

    for (name, body) in &outputs {
        std::fs::write(out_dir.join(name), body)?;
    }
    let files: BTreeMap<&str, String> = outputs.iter().map(|(k, v)| (k.as_str(), sha256_hex(v.as_bytes()))).collect();
    let status = match &result {
        Ok(()) => serde_json::json!({ "status": "ok" }),
        Err(e) => serde_json::json!({ "status": "error", "kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() }),
    };
    let manifest = serde_json::json!({
        "schema": MANIFEST_SCHEMA,
        "config_sha256": sha256_hex(text.as_bytes()),
        "seed": seed_used,
        "ops": ops_used.iter().map(|o| o.as_str()).collect::<Vec<_>>(),
        "versions": { "mfrbsde": env!("CARGO_PKG_VERSION") },
        "outputs": files,
        "result": status,
    });
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(out_dir.join("manifest.json"), body)?;
    result.map(|()| outputs)
}
