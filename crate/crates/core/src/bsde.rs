//! Backward dynamic programming for BSDEs on a scenario lattice.
//!
//! One step reads the child values of a node: the jump integrand is the
//! difference between each mark child and the no-jump child, and `y` solves
//! `y = E_i[Y_{i+1}] + dA_i f(t_i, y, u, mu_i)` by fixed-point iteration.

use rayon::prelude::*;

use crate::drivers::{eval_driver, DriverPoint, DriverSpec, Regime, TerminalSpec};
use crate::error::{Error, Result};
use crate::laws::EmpiricalLaw;
use crate::mpp::fmt_f64;
use crate::mpp::{Branch, ScenarioLattice};

pub const MAX_IMPLICIT_ITERS: usize = 200;
pub const IMPLICIT_TOL: f64 = 1e-12;
const DAMPING: f64 = 0.5;

pub const SOLUTION_SCHEMA: &str = "# schema: mfrbsde-solution v1";

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// Largest iteration count among the nodes of the step.
    pub iterations: usize,
    /// Largest final residual `|y - E - dA f(y)|`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSolution {
    /// `y[step][node]`.
    pub y: Vec<Vec<f64>>,
    /// `u[step][node][mark]` for `step < n`; pruned marks carry 0.
    pub u: Vec<Vec<Vec<f64>>>,
    pub diagnostics: Vec<StepStats>,
}

/// Child data of one node: `(branch, conditional probability, value)`.
pub type ChildValue = (Branch, f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub y: f64,
    pub u: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Where a one-step solve happens; used for evaluation and error reporting.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub step: usize,
    pub node: usize,
    pub time: f64,
    pub d_clock: f64,
    pub phi: &'a [f64],
    pub law: &'a EmpiricalLaw,
}

/// Rejects steps where the implicit fixed point is not a 1/2-contraction.
pub fn check_step(driver: &DriverSpec, step: usize, d_clock: f64) -> Result<()> {
    let l = match driver.regime {
        Regime::Lipschitz => driver.lip_full.unwrap_or(0.0),
        Regime::QuadraticExponential => driver.lip_y_mu,
    };
    let product = l * d_clock;
    if product > 0.5 {
        return Err(Error::StepTooCoarse { step, product });
    }
    Ok(())
}

/// Solves one node. `children` must contain the no-jump child.
pub fn backward_step(driver: &DriverSpec, ctx: &StepContext<'_>, children: &[ChildValue]) -> Result<StepResult> {
    let mut base = None;
    let mut expect = 0.0;
    for &(b, p, v) in children {
        if !v.is_finite() {
            return Err(Error::MissingValue {
                step: ctx.step + 1,
                node: ctx.node,
            });
        }
        expect += p * v;
        if b == Branch::NoJump {
            base = Some(v);
        }
    }
    let base = base.ok_or_else(|| Error::Precondition(format!("node {} at step {} has no no-jump child", ctx.node, ctx.step)))?;
    let mut u = vec![0.0; ctx.phi.len()];
    for &(b, _, v) in children {
        if let Branch::Mark(e) = b {
            u[e] = v - base;
        }
    }

    let g = |y: f64| -> Result<f64> {
        let point = DriverPoint {
            step: ctx.step,
            time: ctx.time,
            y,
            u: &u,
            law: ctx.law,
            phi: ctx.phi,
        };
        Ok(expect + ctx.d_clock * eval_driver(driver, &point)?)
    };

    if ctx.d_clock == 0.0 {
        return Ok(StepResult {
            y: expect,
            u,
            iterations: 0,
            residual: 0.0,
        });
    }

    let mut y = expect;
    let mut gy = g(y)?;
    let mut residual = (gy - y).abs();
    let mut last_delta = 0.0;
    let mut damped = false;
    let mut best = residual;
    let mut stall = 0;
    let mut iterations = 0;
    while iterations < MAX_IMPLICIT_ITERS && residual > 0.0 {
        let delta = gy - y;
        if delta * last_delta < 0.0 {
            damped = true;
        }
        last_delta = delta;
        y = if damped { y + DAMPING * delta } else { gy };
        gy = g(y)?;
        residual = (gy - y).abs();
        iterations += 1;
        // keep going to rounding level, stop once progress stalls
        if residual <= IMPLICIT_TOL * 1e-3 * y.abs().max(1.0) {
            break;
        }
        if residual < best {
            best = residual;
            stall = 0;
        } else {
            stall += 1;
            if stall >= 3 && residual <= IMPLICIT_TOL {
                break;
            }
        }
    }
    if !(residual <= IMPLICIT_TOL) {
        return Err(Error::ImplicitSolveFailed {
            step: ctx.step,
            node: ctx.node,
            residual,
        });
    }
    Ok(StepResult {
        y,
        u,
        iterations,
        residual,
    })
}

/// Per-step law used to evaluate the driver; `delta_0` when the driver does
/// not read it and no laws were supplied.
pub(crate) fn resolve_laws(lattice: &ScenarioLattice, driver: &DriverSpec, laws: Option<&[EmpiricalLaw]>) -> Result<Vec<EmpiricalLaw>> {
    match laws {
        Some(l) if l.len() >= lattice.steps() => Ok(l[..lattice.steps()].to_vec()),
        Some(l) => Err(Error::Precondition(format!(
            "{} frozen laws supplied for {} steps",
            l.len(),
            lattice.steps()
        ))),
        None if driver.reads_law => Err(Error::MissingLaws(driver.name().to_string())),
        None => Ok(vec![EmpiricalLaw::delta_zero(); lattice.steps()]),
    }
}

pub(crate) fn children_of(lattice: &ScenarioLattice, step: usize, idx: usize, next: &[f64]) -> Vec<ChildValue> {
    lattice
        .node(step, idx)
        .children
        .iter()
        .map(|&c| {
            let n = lattice.node(step + 1, c);
            (n.branch.expect("child has a branch"), n.branch_prob, next[c])
        })
        .collect()
}

/// Solves all nodes of `step` given values at `step + 1`.
pub(crate) fn solve_level(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    law: &EmpiricalLaw,
    step: usize,
    next: &[f64],
) -> Result<Vec<StepResult>> {
    let phi = lattice.compensator().phi(step);
    let d_clock = lattice.d_clock(step);
    let time = lattice.time(step);
    (0..lattice.nodes(step).len())
        .into_par_iter()
        .map(|i| {
            let ctx = StepContext {
                step,
                node: i,
                time,
                d_clock,
                phi,
                law,
            };
            backward_step(driver, &ctx, &children_of(lattice, step, i, next))
        })
        .collect()
}

/// Backward sweep over steps `start..end` from values at `end`; with
/// `obstacle`, every node is projected onto it. Returns per-step
/// `(y, u, dk, stats)` for `start..end`, earliest step first.
pub(crate) fn sweep(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    laws: &[EmpiricalLaw],
    obstacle: Option<&[Vec<f64>]>,
    start: usize,
    end: usize,
    end_values: &[f64],
) -> Result<Vec<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>, StepStats)>> {
    driver.validate()?;
    for s in start..end {
        check_step(driver, s, lattice.d_clock(s))?;
    }
    let mut out = Vec::with_capacity(end - start);
    let mut next = end_values.to_vec();
    for s in (start..end).rev() {
        let results = solve_level(lattice, driver, &laws[s], s, &next)?;
        let mut stats = StepStats::default();
        let mut y = Vec::with_capacity(results.len());
        let mut u = Vec::with_capacity(results.len());
        let mut dk = vec![0.0; results.len()];
        for (i, r) in results.into_iter().enumerate() {
            stats.iterations = stats.iterations.max(r.iterations);
            stats.residual = stats.residual.max(r.residual);
            let mut v = r.y;
            if let Some(h) = obstacle {
                let h = h[s][i];
                if h > v {
                    dk[i] = h - v;
                    v = h;
                }
            }
            y.push(v);
            u.push(r.u);
        }
        next = y.clone();
        out.push((y, u, dk, stats));
    }
    out.reverse();
    Ok(out)
}

/// Solves the plain BSDE from terminal node values.
pub fn solve_bsde_values(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    terminal: &[f64],
    laws: Option<&[EmpiricalLaw]>,
) -> Result<LatticeSolution> {
    let n = lattice.steps();
    if terminal.len() != lattice.nodes(n).len() {
        return Err(Error::MissingValue {
            step: n,
            node: terminal.len().min(lattice.nodes(n).len()),
        });
    }
    let laws = resolve_laws(lattice, driver, laws)?;
    let steps = sweep(lattice, driver, &laws, None, 0, n, terminal)?;
    let mut y = Vec::with_capacity(n + 1);
    let mut u = Vec::with_capacity(n);
    let mut diagnostics = Vec::with_capacity(n);
    for (ys, us, _, st) in steps {
        y.push(ys);
        u.push(us);
        diagnostics.push(st);
    }
    y.push(terminal.to_vec());
    Ok(LatticeSolution { y, u, diagnostics })
}

pub fn solve_bsde(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    terminal: &TerminalSpec,
    laws: Option<&[EmpiricalLaw]>,
) -> Result<LatticeSolution> {
    solve_bsde_values(lattice, driver, &terminal.values(lattice), laws)
}

/// Largest deviation from `Y_{i+1} = E_i[Y_{i+1}] + sum_e U_i(e) q_i(e)`
/// over all child nodes.
pub fn martingale_residual(lattice: &ScenarioLattice, sol: &LatticeSolution) -> f64 {
    let comp = lattice.compensator();
    let mut worst: f64 = 0.0;
    for s in 0..lattice.steps() {
        let probs = comp.jump_probs(s);
        for (i, node) in lattice.nodes(s).iter().enumerate() {
            let e_next = lattice.cond_expectation(s, i, &sol.y[s + 1]);
            let u = &sol.u[s][i];
            let drift: f64 = u.iter().zip(&probs).map(|(a, p)| a * p).sum();
            for &c in &node.children {
                let jump = match lattice.node(s + 1, c).branch {
                    Some(Branch::Mark(e)) => u[e],
                    _ => 0.0,
                };
                let rebuilt = e_next + jump - drift;
                worst = worst.max((rebuilt - sol.y[s + 1][c]).abs());
            }
        }
    }
    worst
}

/// A lattice stopping rule: `stop[step][node]` marks the nodes where the
/// rule stops.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingRule {
    pub stop: Vec<Vec<bool>>,
}

impl StoppingRule {
    /// Stop at the horizon on every path.
    pub fn terminal(lattice: &ScenarioLattice) -> Self {
        let n = lattice.steps();
        let stop = (0..=n).map(|s| vec![s == n; lattice.nodes(s).len()]).collect();
        Self { stop }
    }

    /// Stop at `step` everywhere.
    pub fn at_step(lattice: &ScenarioLattice, step: usize) -> Self {
        let stop = (0..=lattice.steps()).map(|s| vec![s == step; lattice.nodes(s).len()]).collect();
        Self { stop }
    }

    /// Checks shape and that each path from step `from` meets the rule exactly once.
    pub fn validate(&self, lattice: &ScenarioLattice, from: usize) -> Result<()> {
        let n = lattice.steps();
        if from > n {
            return Err(Error::InvalidStoppingRule(format!("start step {from} beyond horizon {n}")));
        }
        if self.stop.len() != n + 1 || (0..=n).any(|s| self.stop[s].len() != lattice.nodes(s).len()) {
            return Err(Error::InvalidStoppingRule("shape does not match the lattice".into()));
        }
        let mut hits = vec![0usize; lattice.nodes(from).len()];
        for (i, h) in hits.iter_mut().enumerate() {
            *h = usize::from(self.stop[from][i]);
        }
        for s in from..n {
            let mut next = vec![0usize; lattice.nodes(s + 1).len()];
            for (i, node) in lattice.nodes(s).iter().enumerate() {
                for &c in &node.children {
                    next[c] = hits[i] + usize::from(self.stop[s + 1][c]);
                }
            }
            hits = next;
        }
        if let Some(i) = hits.iter().position(|&h| h != 1) {
            return Err(Error::InvalidStoppingRule(format!(
                "terminal node {i} is stopped {} times after step {from}",
                hits[i]
            )));
        }
        Ok(())
    }
}

/// Value at each node of step `from` of the BSDE run backward from the
/// stopped payoff `payoff[step][node]`. Nodes strictly after a stop are
/// never evaluated.
pub fn g_expectation(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    payoff: &[Vec<f64>],
    rule: &StoppingRule,
    from: usize,
    laws: Option<&[EmpiricalLaw]>,
) -> Result<Vec<f64>> {
    rule.validate(lattice, from)?;
    let n = lattice.steps();
    let laws = resolve_laws(lattice, driver, laws)?;
    // live[s][i]: reached from step `from` without having stopped before s
    let mut live: Vec<Vec<bool>> = lattice.zeros().into_iter().map(|l| vec![false; l.len()]).collect();
    live[from].iter_mut().for_each(|x| *x = true);
    for s in from..n {
        for (i, node) in lattice.nodes(s).iter().enumerate() {
            if live[s][i] && !rule.stop[s][i] {
                for &c in &node.children {
                    live[s + 1][c] = true;
                }
            }
        }
    }
    let mut next: Vec<f64> = Vec::new();
    for s in (from..=n).rev() {
        let mut cur = vec![f64::NAN; lattice.nodes(s).len()];
        for i in 0..cur.len() {
            if !live[s][i] {
                continue;
            }
            cur[i] = if rule.stop[s][i] {
                payoff[s][i]
            } else {
                check_step(driver, s, lattice.d_clock(s))?;
                let ctx = StepContext {
                    step: s,
                    node: i,
                    time: lattice.time(s),
                    d_clock: lattice.d_clock(s),
                    phi: lattice.compensator().phi(s),
                    law: &laws[s],
                };
                backward_step(driver, &ctx, &children_of(lattice, s, i, &next))?.y
            };
        }
        next = cur;
    }
    Ok(next)
}

/// Constants of the stability estimate between two Lipschitz BSDEs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapParams {
    pub beta: f64,
    pub eta: f64,
    /// Lipschitz constant of the first driver.
    pub c: f64,
    /// Moment order of the power form (2 reproduces the square form).
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// Smallest `bound - |e^{beta A_t} dY_t|^2` over all nodes.
    pub worst_slack_square: f64,
    /// Smallest slack of the power form.
    pub worst_slack_power: f64,
    pub tol: f64,
}

impl GapReport {
    pub fn passed(&self) -> bool {
        self.worst_slack_square >= -self.tol && self.worst_slack_power >= -self.tol
    }
}

/// Checks at every node
/// `|e^{beta A_t} dY_t|^2 <= E_t[|e^{beta A_T} dxi|^2] + eta E_t[sum_{s>=t} |e^{beta A_s} df_s|^2 dA_s]`
/// and the power form
/// `|e^{beta A_t} dY_t|^p <= 2^{p/2-1} (E_t[|e^{beta A_T} dxi|^p] + eta^{p/2} E_t[(sum_{s>=t} |e^{beta A_s} df_s|^2 dA_s)^{p/2}])`,
/// with all conditional expectations taken exactly on the tree.
/// `driver_gap[step][node]` is the first driver minus the second, both at
/// the second solution, for `step < n`.
pub fn apriori_gap_check(
    lattice: &ScenarioLattice,
    y1: &[Vec<f64>],
    y2: &[Vec<f64>],
    xi_gap: &[f64],
    driver_gap: &[Vec<f64>],
    params: GapParams,
) -> Result<GapReport> {
    let GapParams { beta, eta, c, p } = params;
    if !(eta > 0.0) || !(beta >= 0.0) || !(p >= 2.0) {
        return Err(Error::Precondition(format!("need eta > 0, beta >= 0, p >= 2 (got {eta}, {beta}, {p})")));
    }
    if eta * c * c > 1.0 {
        return Err(Error::Precondition(format!("eta = {eta} exceeds 1/C^2 = {}", 1.0 / (c * c))));
    }
    if 2.0 * beta < 2.0 / eta + 2.0 * c {
        return Err(Error::Precondition(format!("2 beta = {} below 2/eta + 2C = {}", 2.0 * beta, 2.0 / eta + 2.0 * c)));
    }
    let n = lattice.steps();
    let clock = lattice.compensator().clock();
    let w = |s: usize| (beta * clock[s]).exp();
    let xi_sq: Vec<f64> = xi_gap.iter().map(|x| (w(n) * x).powi(2)).collect();
    let xi_p: Vec<f64> = xi_gap.iter().map(|x| (w(n) * x.abs()).powf(p)).collect();
    let e_xi_sq = lattice.conditional_expectations(&xi_sq);
    let e_xi_p = lattice.conditional_expectations(&xi_p);
    // f-bar is held constant on each step and e^{2 beta a} integrated exactly over [A_s, A_{s+1}]
    let weight = |s: usize| {
        if beta > 0.0 {
            ((2.0 * beta * clock[s + 1]).exp() - (2.0 * beta * clock[s]).exp()) / (2.0 * beta)
        } else {
            lattice.d_clock(s)
        }
    };
    let inc = |s: usize, i: usize| driver_gap[s][i].powi(2) * weight(s);

    let mut worst_sq = f64::INFINITY;
    let mut worst_p = f64::INFINITY;
    let q = p / 2.0;
    for t in 0..=n {
        // driver-gap sum from t along each path, carried to the terminal nodes
        let mut sum_t: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
        sum_t[t] = vec![0.0; lattice.nodes(t).len()];
        for s in t..n {
            let mut next = vec![0.0; lattice.nodes(s + 1).len()];
            for (i, node) in lattice.nodes(s).iter().enumerate() {
                let a = sum_t[s][i] + inc(s, i);
                for &c in &node.children {
                    next[c] = a;
                }
            }
            sum_t[s + 1] = next;
        }
        let z = &sum_t[n];
        let e_z = cond_from(lattice, t, z);
        let zq: Vec<f64> = z.iter().map(|v| v.powf(q)).collect();
        let e_zq = cond_from(lattice, t, &zq);
        for i in 0..lattice.nodes(t).len() {
            let gap = (w(t) * (y1[t][i] - y2[t][i])).abs();
            let bound_sq = e_xi_sq[t][i] + eta * e_z[i];
            let bound_p = 2f64.powf(q - 1.0) * (e_xi_p[t][i] + eta.powf(q) * e_zq[i]);
            worst_sq = worst_sq.min(bound_sq - gap * gap);
            worst_p = worst_p.min(bound_p - gap.powf(p));
        }
    }
    Ok(GapReport {
        worst_slack_square: worst_sq,
        worst_slack_power: worst_p,
        tol: 1e-10,
    })
}

/// Conditional expectation at step `t` of a terminal field.
fn cond_from(lattice: &ScenarioLattice, t: usize, terminal: &[f64]) -> Vec<f64> {
    let mut cur = terminal.to_vec();
    for s in (t..lattice.steps()).rev() {
        cur = (0..lattice.nodes(s).len()).map(|i| lattice.cond_expectation(s, i, &cur)).collect();
    }
    cur
}

/// CSV rows `step,node,reach_prob,Y,U_<mark>...`; `U` is empty on terminal nodes.
pub fn solution_csv(lattice: &ScenarioLattice, sol: &LatticeSolution) -> String {
    let names = lattice.compensator().marks().names();
    let mut out = String::new();
    out.push_str(SOLUTION_SCHEMA);
    out.push('\n');
    out.push_str("step,node,reach_prob,Y");
    for m in names {
        out.push_str(&format!(",U_{m}"));
    }
    out.push('\n');
    for s in 0..=lattice.steps() {
        for (i, node) in lattice.nodes(s).iter().enumerate() {
            out.push_str(&format!("{s},{i},{},{}", fmt_f64(node.reach_prob), fmt_f64(sol.y[s][i])));
            for e in 0..names.len() {
                out.push(',');
                if s < lattice.steps() {
                    out.push_str(&fmt_f64(sol.u[s][i][e]));
                }
            }
            out.push('\n');
        }
    }
    out
}
