//! Picard iteration of the frozen-law map: freeze the laws and obstacle at
//! the previous iterate, solve a standard reflected BSDE, repeat.

use crate::bsde::{sweep, LatticeSolution, StepStats};
use crate::drivers::{eval_obstacle, DriverSpec, ObstacleSpec, Regime, TerminalSpec};
use crate::error::{Error, Result};
use crate::laws::{node_law, wasserstein, EmpiricalLaw};
use crate::mpp::{fmt_f64, ScenarioLattice};
use crate::reflected::{accumulate_k, ReflectedSolution};

use super::moments::{MomentConfig, MomentMonitor, MomentTable};
use super::{admissibility, contraction_constant, is_coupled, split_horizon, MeanFieldParams};

pub const ITERATIONS_SCHEMA: &str = "# schema: mfrbsde-iterations v1";

/// Starting iterate on each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `Y^(0)_t = E_t[terminal]`.
    ConditionalExpectation,
    /// `Y^(0)_t = max(0, h(t, 0, delta_0))`.
    ClippedZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Index into `IterationReport::windows`.
    pub window: usize,
    pub iteration: usize,
    /// `sup` over window nodes of `|Y^(m) - Y^(m-1)|`.
    pub node_gap: f64,
    /// `sup` over window steps of `W_p` between successive node laws.
    pub law_gap: f64,
    /// `sup_tau E[e^{p beta A_tau} |Y^(m)_tau - Y^(m-1)_tau|^p]` over stopping
    /// rules valued in the window.
    pub norm_gap: f64,
    pub node_ratio: Option<f64>,
    /// Ratio of successive `norm_gap`s, comparable with the contraction constant.
    pub norm_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    /// Windows `(a, b)` in processing order (latest first).
    pub windows: Vec<(usize, usize)>,
    /// Contraction constant per window.
    pub alpha: Vec<f64>,
    pub records: Vec<IterationRecord>,
    /// Iterations used per window.
    pub iterations: Vec<usize>,
    /// Obstacle values frozen in the final sweep; the terminal row is
    /// `h(T, xi, P_xi)`.
    pub obstacle: Vec<Vec<f64>>,
    /// Laws frozen in the final sweep, one per step.
    pub laws: Vec<EmpiricalLaw>,
    pub moments: Option<MomentTable>,
    pub admissibility: String,
}

impl IterationReport {
    pub fn summary(&self) -> String {
        let mut out = format!("admissibility: {}\n", self.admissibility);
        out.push_str(&format!("windows: {}\n", self.windows.len()));
        for (k, (w, a)) in self.windows.iter().zip(&self.alpha).enumerate() {
            out.push_str(&format!(
                "  window {k}: steps {}..{} alpha {} iterations {}\n",
                w.0, w.1, fmt_f64(*a), self.iterations[k]
            ));
        }
        if let Some(last) = self.records.last() {
            out.push_str(&format!(
                "final node gap {} law gap {}\n",
                fmt_f64(last.node_gap),
                fmt_f64(last.law_gap)
            ));
        }
        out
    }
}

pub fn iterations_csv(report: &IterationReport) -> String {
    let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
    let mut out = String::new();
    out.push_str(ITERATIONS_SCHEMA);
    out.push('\n');
    out.push_str("window,iteration,node_gap,law_gap,norm_gap,node_ratio,norm_ratio,alpha\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.window,
            r.iteration,
            fmt_f64(r.node_gap),
            fmt_f64(r.law_gap),
            fmt_f64(r.norm_gap),
            opt(r.node_ratio),
            opt(r.norm_ratio),
            fmt_f64(report.alpha[r.window])
        ));
    }
    out
}

/// `sup_tau E[e^{p beta A_tau} |d_tau|^p]` over stopping rules valued in
/// `[a, b]`, by backward induction on the Snell envelope.
pub fn lp_beta_gap(lattice: &ScenarioLattice, d: &[Vec<f64>], p: f64, beta: f64, window: (usize, usize)) -> f64 {
    let (a, b) = window;
    let clock = lattice.compensator().clock();
    let x = |s: usize, v: f64| (p * beta * clock[s]).exp() * v.abs().powf(p);
    let mut v: Vec<f64> = d[b].iter().map(|z| x(b, *z)).collect();
    for s in (a..b).rev() {
        v = (0..lattice.nodes(s).len())
            .map(|i| x(s, d[s][i]).max(lattice.cond_expectation(s, i, &v)))
            .collect();
    }
    lattice.expectation(a, &v)
}

struct Frozen {
    laws: Vec<EmpiricalLaw>,
    obstacle: Vec<Vec<f64>>,
}

/// Laws and obstacle values of `y` on steps `a..b`; other steps keep their
/// placeholders.
fn freeze(
    lattice: &ScenarioLattice,
    obstacle: &ObstacleSpec,
    y: &[Vec<f64>],
    window: (usize, usize),
    into: &mut Frozen,
) -> Result<()> {
    for s in window.0..window.1 {
        let law = node_law(lattice, s, &y[s])?;
        let t = lattice.time(s);
        into.obstacle[s] = y[s].iter().map(|&v| eval_obstacle(obstacle, s, t, v, &law)).collect();
        into.laws[s] = law;
    }
    Ok(())
}

type WindowSweep = Vec<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>, StepStats)>;

fn initial_iterate(
    lattice: &ScenarioLattice,
    obstacle: &ObstacleSpec,
    init: Init,
    y: &mut [Vec<f64>],
    window: (usize, usize),
) {
    let (a, b) = window;
    match init {
        Init::ConditionalExpectation => {
            for s in (a..b).rev() {
                y[s] = (0..lattice.nodes(s).len()).map(|i| lattice.cond_expectation(s, i, &y[s + 1])).collect();
            }
        }
        Init::ClippedZero => {
            let d0 = EmpiricalLaw::delta_zero();
            for s in a..b {
                let h = eval_obstacle(obstacle, s, lattice.time(s), 0.0, &d0);
                y[s] = vec![h.max(0.0); lattice.nodes(s).len()];
            }
        }
    }
}

/// One application of the frozen-law map on the whole horizon: freeze laws
/// and obstacle at `y`, solve the reflected equation from `terminal`.
pub fn picard_map(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    obstacle: &ObstacleSpec,
    terminal: &[f64],
    y: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let n = lattice.steps();
    let mut frozen = Frozen {
        laws: vec![EmpiricalLaw::delta_zero(); n],
        obstacle: lattice.zeros(),
    };
    freeze(lattice, obstacle, y, (0, n), &mut frozen)?;
    let res = sweep(lattice, driver, &frozen.laws, Some(&frozen.obstacle), 0, n, terminal)?;
    let mut out: Vec<Vec<f64>> = res.into_iter().map(|r| r.0).collect();
    out.push(terminal.to_vec());
    Ok(out)
}

fn sup_gap(a: &[Vec<f64>], b: &[Vec<f64>], steps: std::ops::Range<usize>) -> f64 {
    steps
        .flat_map(|s| a[s].iter().zip(&b[s]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Solves the mean-field reflected BSDE by Picard iteration. In the
/// Lipschitz regime the horizon is split into contraction windows processed
/// backward, each taking its terminal values from the later window; in the
/// quadratic regime the whole horizon is iterated with moment monitors.
pub fn picard_solve(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    obstacle: &ObstacleSpec,
    terminal: &TerminalSpec,
    params: &MeanFieldParams,
) -> Result<(ReflectedSolution, IterationReport)> {
    driver.validate()?;
    params.validate()?;
    let n = lattice.steps();
    let comp = lattice.compensator();
    let clock = comp.clock();
    let adm = admissibility(params, Some(comp.clock_total()));
    if !adm.ok {
        return Err(Error::Precondition(format!("inadmissible obstacle constants ({})", adm.explanation())));
    }

    let xi = terminal.values(lattice);
    let xi_law = node_law(lattice, n, &xi)?;
    let h_terminal: Vec<f64> = xi
        .iter()
        .map(|&x| eval_obstacle(obstacle, n, lattice.time(n), x, &xi_law))
        .collect();
    let bad: Vec<usize> = (0..xi.len()).filter(|&i| xi[i] < h_terminal[i]).collect();
    if !bad.is_empty() {
        return Err(Error::TerminalInconsistent { nodes: bad });
    }

    let coupled = is_coupled(driver, obstacle);
    let windows = match params.regime {
        Regime::Lipschitz if coupled => split_horizon(params, lattice.grid().times(), clock)?,
        _ => vec![(0, n)],
    };
    let alpha: Vec<f64> = windows.iter().map(|&w| contraction_constant(params, clock, w)).collect();

    let mut monitor = match params.regime {
        Regime::QuadraticExponential => {
            let lambda = params.lambda.expect("validated");
            Some(MomentMonitor::new(
                lattice,
                driver,
                &xi,
                MomentConfig {
                    p: params.p,
                    lambda,
                    gamma: params.moment_gamma.unwrap_or(lambda),
                    theta: params.theta.clone(),
                    q_window: 20,
                },
            ))
        }
        Regime::Lipschitz => None,
    };

    let mut y = lattice.zeros();
    y[n] = xi.clone();
    let mut u: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
    let mut dk = lattice.zeros();
    let mut diagnostics = vec![StepStats::default(); n];
    let mut frozen = Frozen {
        laws: vec![EmpiricalLaw::delta_zero(); n],
        obstacle: lattice.zeros(),
    };
    frozen.obstacle[n] = h_terminal;

    let mut records = Vec::new();
    let mut iterations = Vec::with_capacity(windows.len());
    for (w_idx, &(a, b)) in windows.iter().enumerate() {
        let mut prev = y.clone();
        initial_iterate(lattice, obstacle, params.init, &mut prev, (a, b));
        let mut last_node: Option<f64> = None;
        let mut last_norm: Option<f64> = None;
        let mut converged_at: Option<usize> = None;
        let mut trace = Vec::new();
        let mut m = 0;
        let mut accepted: Option<(WindowSweep, Vec<Vec<f64>>, Vec<EmpiricalLaw>)> = None;
        loop {
            m += 1;
            freeze(lattice, obstacle, &prev, (a, b), &mut frozen)?;
            let res = sweep(lattice, driver, &frozen.laws, Some(&frozen.obstacle), a, b, &prev[b])?;
            let mut next = prev.clone();
            for (k, r) in res.iter().enumerate() {
                next[a + k] = r.0.clone();
            }
            let node_gap = sup_gap(&next, &prev, a..b);
            let mut law_gap: f64 = 0.0;
            for s in a..b {
                let law = node_law(lattice, s, &next[s])?;
                law_gap = law_gap.max(wasserstein(&law, &frozen.laws[s], params.p)?);
            }
            let diff: Vec<Vec<f64>> = next
                .iter()
                .zip(&prev)
                .map(|(x, z)| x.iter().zip(z).map(|(p, q)| p - q).collect())
                .collect();
            let norm_gap = lp_beta_gap(lattice, &diff, params.p, params.beta, (a, b));
            if !node_gap.is_finite() || !law_gap.is_finite() {
                return Err(Error::Divergence(format!("non-finite gap at iteration {m} in window {w_idx}")));
            }
            let ratio = |cur: f64, last: Option<f64>| last.filter(|l| *l > 0.0).map(|l| cur / l);
            records.push(IterationRecord {
                window: w_idx,
                iteration: m,
                node_gap,
                law_gap,
                norm_gap,
                node_ratio: ratio(node_gap, last_node),
                norm_ratio: ratio(norm_gap, last_norm),
            });
            trace.push(node_gap);
            last_node = Some(node_gap);
            last_norm = Some(norm_gap);

            if let Some(mon) = monitor.as_mut() {
                let sol = assemble(lattice, &next, &res, &frozen.obstacle, a, b);
                if let Err(e) = mon.push(m, &sol, &frozen.obstacle, &frozen.laws) {
                    return Err(match e {
                        Error::ExponentialOverflow { context } => Error::MomentBlowUp {
                            iteration: m,
                            detail: context,
                        },
                        other => other,
                    });
                }
            }

            let done = !coupled || (node_gap < params.tol && law_gap < params.tol);
            if done && converged_at.is_none() {
                converged_at = Some(m);
                accepted = Some((res, frozen.obstacle[a..b].to_vec(), frozen.laws[a..b].to_vec()));
                if let Some(mon) = monitor.as_mut() {
                    mon.table.converged_at = Some(m);
                }
            }
            // sweeps past convergence only feed the moment monitor
            let extra = if coupled && monitor.is_some() { params.post_sweeps } else { 0 };
            match converged_at {
                Some(c) if m >= c + extra => break,
                None if m >= params.max_picard => {
                    let tail = trace.len().saturating_sub(10);
                    return Err(Error::PicardCap {
                        cap: params.max_picard,
                        gaps: trace[tail..].to_vec(),
                    });
                }
                _ => {}
            }
            prev = next;
        }
        let (res, obs, laws) = accepted.expect("window converged");
        iterations.push(converged_at.expect("window converged"));
        for (k, (ys, us, dks, st)) in res.into_iter().enumerate() {
            y[a + k] = ys;
            u[a + k] = us;
            dk[a + k] = dks;
            diagnostics[a + k] = st;
        }
        for (k, (h, law)) in obs.into_iter().zip(laws).enumerate() {
            frozen.obstacle[a + k] = h;
            frozen.laws[a + k] = law;
        }
    }

    let (k, flat_off) = accumulate_k(lattice, &y, &dk, &frozen.obstacle);
    let sol = ReflectedSolution {
        base: LatticeSolution { y, u, diagnostics },
        k,
        dk,
        flat_off,
    };
    let report = IterationReport {
        windows,
        alpha,
        records,
        iterations,
        obstacle: frozen.obstacle,
        laws: frozen.laws,
        moments: monitor.map(|m| m.table),
        admissibility: adm.explanation(),
    };
    Ok((sol, report))
}

fn assemble(
    lattice: &ScenarioLattice,
    y: &[Vec<f64>],
    res: &WindowSweep,
    obstacle: &[Vec<f64>],
    a: usize,
    b: usize,
) -> ReflectedSolution {
    let n = lattice.steps();
    let mut u: Vec<Vec<Vec<f64>>> = (0..n).map(|s| vec![vec![0.0; lattice.n_marks()]; lattice.nodes(s).len()]).collect();
    let mut dk = lattice.zeros();
    for (k, r) in res.iter().enumerate() {
        u[a + k] = r.1.clone();
        dk[a + k] = r.2.clone();
    }
    debug_assert!(b <= n);
    let (k, flat_off) = accumulate_k(lattice, y, &dk, obstacle);
    ReflectedSolution {
        base: LatticeSolution {
            y: y.to_vec(),
            u,
            diagnostics: res.iter().map(|r| r.3).collect(),
        },
        k,
        dk,
        flat_off,
    }
}

/// Largest node difference between the solutions from the two initial iterates.
pub fn uniqueness_probe(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    obstacle: &ObstacleSpec,
    terminal: &TerminalSpec,
    params: &MeanFieldParams,
) -> Result<f64> {
    let a = picard_solve(lattice, driver, obstacle, terminal, &MeanFieldParams { init: Init::ConditionalExpectation, ..params.clone() })?.0;
    let b = picard_solve(lattice, driver, obstacle, terminal, &MeanFieldParams { init: Init::ClippedZero, ..params.clone() })?.0;
    Ok(sup_gap(&a.base.y, &b.base.y, 0..lattice.steps() + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::library::*;
    use crate::mpp::{build_lattice, CompensatorModel, MarkSpace, TimeGrid};
    use crate::reflected::solve_reflected;

    fn lattice(rates: &[f64], steps: usize) -> ScenarioLattice {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        let comp = CompensatorModel::homogeneous(MarkSpace::indexed(rates.len()).unwrap(), rates, &grid, 1.0).unwrap();
        build_lattice(&comp, &grid).unwrap()
    }

    #[test]
    fn uncoupled_data_matches_reflected_solver() {
        let lat = lattice(&[0.6, 0.4], 5);
        let f = linear(0.5, 0.1);
        let obs = ObstacleSpec::constant(0.3);
        let xi = TerminalSpec::event_count(0.3, 1.0);
        let params = MeanFieldParams::from_specs(&f, &obs);
        let (sol, rep) = picard_solve(&lat, &f, &obs, &xi, &params).unwrap();
        let field: Vec<Vec<f64>> = lat.zeros().into_iter().map(|l| vec![0.3; l.len()]).collect();
        let direct = solve_reflected(&lat, &f, &field, &xi, None).unwrap();
        assert_eq!(sol, direct);
        assert_eq!(rep.iterations, vec![1]);
        assert_eq!(rep.windows, vec![(0, 5)]);
    }

    #[test]
    fn deterministic_mean_field_closed_form() {
        let n = 10;
        let lat = lattice(&[0.0], n);
        let (a, x) = (0.5, 1.3);
        let f = linear_mean(0.0, a, 0.0);
        let obs = ObstacleSpec::none();
        let mut params = MeanFieldParams::from_specs(&f, &obs);
        params.tol = 1e-14;
        let (sol, rep) = picard_solve(&lat, &f, &obs, &TerminalSpec::constant(x), &params).unwrap();
        assert!(rep.windows.len() > 1);
        let dt = 1.0 / n as f64;
        let mut want = x;
        for s in (0..n).rev() {
            want /= 1.0 - a * dt;
            assert!((sol.base.y[s][0] - want).abs() < 1e-12 * want);
        }
    }

    fn obstacle_coupled_instance() -> (ScenarioLattice, DriverSpec, ObstacleSpec, TerminalSpec) {
        (
            lattice(&[0.5, 0.3], 5),
            zero(),
            ObstacleSpec::affine(0.4, 0.4, 1.0, -1.5),
            TerminalSpec::event_count(0.0, 1.0),
        )
    }

    #[test]
    fn contraction_ratio_within_alpha() {
        let (lat, f, obs, xi) = obstacle_coupled_instance();
        let params = MeanFieldParams::from_specs(&f, &obs);
        let (sol, rep) = picard_solve(&lat, &f, &obs, &xi, &params).unwrap();
        assert!((rep.alpha[0] - 0.64).abs() < 1e-15);
        assert!(rep.iterations[0] > 3);
        for r in rep.records.iter().filter(|r| r.iteration >= 3) {
            assert!(r.norm_ratio.unwrap() <= 0.69, "{r:?}");
        }
        // the barrier binds somewhere
        assert!(sol.k[5].iter().any(|k| *k > 0.0));

        let again = picard_map(&lat, &f, &obs, &sol.base.y[5], &sol.base.y).unwrap();
        assert!(sup_gap(&again, &sol.base.y, 0..6) < params.tol);
        assert!(uniqueness_probe(&lat, &f, &obs, &xi, &params).unwrap() < 10.0 * params.tol);
    }

    #[test]
    fn cap_reports_trace() {
        let (lat, f, obs, xi) = obstacle_coupled_instance();
        let mut params = MeanFieldParams::from_specs(&f, &obs);
        params.max_picard = 3;
        match picard_solve(&lat, &f, &obs, &xi, &params) {
            Err(Error::PicardCap { cap: 3, gaps }) => assert_eq!(gaps.len(), 3),
            other => panic!("{other:?}"),
        }
        params.gamma1 = 0.6;
        params.gamma2 = 0.6;
        assert!(matches!(picard_solve(&lat, &f, &obs, &xi, &params), Err(Error::Precondition(_))));
    }

    #[test]
    fn quadratic_regime_monitors_moments() {
        let lat = lattice(&[0.5, 0.3], 4);
        let f = quadratic_mean(0.5, 0.0, 0.3, 0.1);
        let obs = ObstacleSpec::affine(0.1, 0.1, -1.0, 0.0);
        let xi = TerminalSpec::event_count(0.0, 0.5);
        let mut params = MeanFieldParams::from_specs(&f, &obs);
        params.post_sweeps = 3;
        let (_, rep) = picard_solve(&lat, &f, &obs, &xi, &params).unwrap();
        assert_eq!(rep.windows, vec![(0, 4)]);
        let table = rep.moments.unwrap();
        let c = table.converged_at.unwrap();
        assert_eq!(table.rows.len(), c + 3);
        assert!(table.rows.iter().all(|r| r.bound_ok));
        assert!(!table.grows_after_convergence());
    }
}
