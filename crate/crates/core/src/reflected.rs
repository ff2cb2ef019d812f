//! Reflected BSDEs by per-step projection onto the obstacle, with the
//! pushing process `K`, the flat-off accumulator and a brute-force optimal
//! stopping check.

use crate::bsde::{g_expectation, resolve_laws, sweep, LatticeSolution, StoppingRule, SOLUTION_SCHEMA};
use crate::drivers::{DriverSpec, TerminalSpec};
use crate::error::{Error, Result};
use crate::laws::EmpiricalLaw;
use crate::mpp::{fmt_f64, ScenarioLattice};

/// Largest lattice handled by [`snell_value_bruteforce`].
pub const MAX_ENUM_STEPS: usize = 9;
pub const MAX_ENUM_MARKS: usize = 2;
/// Cap on the total number of stopping rules enumerated over all nodes.
pub const MAX_ENUM_RULES: f64 = 300_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectedSolution {
    pub base: LatticeSolution,
    /// Cumulative push `K` per node, `K = 0` at the root.
    pub k: Vec<Vec<f64>>,
    /// `dK[step][node] = (h - y_hat)^+`; zero at terminal nodes.
    pub dk: Vec<Vec<f64>>,
    /// `sum_i (Y_i - h_i) dK_i` along the path to each terminal node.
    pub flat_off: Vec<f64>,
}

impl ReflectedSolution {
    pub fn y(&self) -> &[Vec<f64>] {
        &self.base.y
    }
}

fn check_shape(lattice: &ScenarioLattice, field: &[Vec<f64>]) -> Result<()> {
    for s in 0..=lattice.steps() {
        let want = lattice.nodes(s).len();
        match field.get(s) {
            Some(row) if row.len() == want => {}
            Some(row) => {
                return Err(Error::MissingValue {
                    step: s,
                    node: row.len().min(want),
                })
            }
            None => return Err(Error::MissingValue { step: s, node: 0 }),
        }
    }
    Ok(())
}

/// `K` from `dK` and the per-path flat-off sums. Terms with `dK = 0` are
/// skipped so that an infinite obstacle gap never meets a zero push.
pub(crate) fn accumulate_k(
    lattice: &ScenarioLattice,
    y: &[Vec<f64>],
    dk: &[Vec<f64>],
    obstacle: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = lattice.steps();
    let mut k = lattice.zeros();
    let mut flat = vec![0.0];
    for s in 0..n {
        let mut next_flat = vec![0.0; lattice.nodes(s + 1).len()];
        for (i, node) in lattice.nodes(s).iter().enumerate() {
            let d = dk[s][i];
            let contrib = if d != 0.0 { (y[s][i] - obstacle[s][i]) * d } else { 0.0 };
            for &c in &node.children {
                k[s + 1][c] = k[s][i] + d;
                next_flat[c] = flat[i] + contrib;
            }
        }
        flat = next_flat;
    }
    (k, flat)
}

/// Solves the reflected BSDE from terminal node values and precomputed
/// obstacle values `obstacle[step][node]`.
pub fn solve_reflected_values(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    obstacle: &[Vec<f64>],
    terminal: &[f64],
    laws: Option<&[EmpiricalLaw]>,
) -> Result<ReflectedSolution> {
    let n = lattice.steps();
    check_shape(lattice, obstacle)?;
    if terminal.len() != lattice.nodes(n).len() {
        return Err(Error::MissingValue {
            step: n,
            node: terminal.len().min(lattice.nodes(n).len()),
        });
    }
    let bad: Vec<usize> = terminal
        .iter()
        .zip(&obstacle[n])
        .enumerate()
        .filter(|(_, (x, h))| x < h)
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::TerminalInconsistent { nodes: bad });
    }
    let laws = resolve_laws(lattice, driver, laws)?;
    let steps = sweep(lattice, driver, &laws, Some(obstacle), 0, n, terminal)?;
    let mut y = Vec::with_capacity(n + 1);
    let mut u = Vec::with_capacity(n);
    let mut dk = Vec::with_capacity(n + 1);
    let mut diagnostics = Vec::with_capacity(n);
    for (ys, us, dks, st) in steps {
        y.push(ys);
        u.push(us);
        dk.push(dks);
        diagnostics.push(st);
    }
    y.push(terminal.to_vec());
    dk.push(vec![0.0; terminal.len()]);
    let (k, flat_off) = accumulate_k(lattice, &y, &dk, obstacle);
    Ok(ReflectedSolution {
        base: LatticeSolution { y, u, diagnostics },
        k,
        dk,
        flat_off,
    })
}

pub fn solve_reflected(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    obstacle: &[Vec<f64>],
    terminal: &TerminalSpec,
    laws: Option<&[EmpiricalLaw]>,
) -> Result<ReflectedSolution> {
    solve_reflected_values(lattice, driver, obstacle, &terminal.values(lattice), laws)
}

/// Largest `|sum_i (Y_i - h_i) dK_i|` over paths, recomputed from the stored
/// `Y` and `dK`.
pub fn flat_off_residual(lattice: &ScenarioLattice, sol: &ReflectedSolution, obstacle: &[Vec<f64>]) -> f64 {
    let (_, flat) = accumulate_k(lattice, &sol.base.y, &sol.dk, obstacle);
    flat.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Number of stopping rules on the subtree of every node:
/// `S(leaf) = 1`, `S(node) = 1 + prod S(child)`.
pub fn stopping_rule_counts(lattice: &ScenarioLattice) -> Vec<Vec<f64>> {
    let n = lattice.steps();
    let mut counts = lattice.zeros();
    counts[n].iter_mut().for_each(|c| *c = 1.0);
    for s in (0..n).rev() {
        for (i, node) in lattice.nodes(s).iter().enumerate() {
            counts[s][i] = 1.0 + node.children.iter().map(|&c| counts[s + 1][c]).product::<f64>();
        }
    }
    counts
}

/// Rules stopping where the payoff is `-inf` are skipped: they can never
/// attain the maximum, since continuing to the horizon is always finite.
fn enumerate_rules(
    lattice: &ScenarioLattice,
    payoff: &[Vec<f64>],
    frontier: &mut Vec<(usize, usize)>,
    rule: &mut StoppingRule,
    visit: &mut dyn FnMut(&StoppingRule) -> Result<()>,
) -> Result<()> {
    let Some((s, i)) = frontier.pop() else {
        return visit(rule);
    };
    if payoff[s][i] > f64::NEG_INFINITY {
        rule.stop[s][i] = true;
        enumerate_rules(lattice, payoff, frontier, rule, visit)?;
        rule.stop[s][i] = false;
    }
    if s < lattice.steps() {
        let kids = &lattice.node(s, i).children;
        frontier.extend(kids.iter().map(|&c| (s + 1, c)));
        enumerate_rules(lattice, payoff, frontier, rule, visit)?;
        frontier.truncate(frontier.len() - kids.len());
    }
    frontier.push((s, i));
    Ok(())
}

/// Pointwise maximum over every lattice stopping rule of the g-expectation of
/// `xi 1{tau = T} + h_tau 1{tau < T}`, evaluated node by node.
pub fn snell_value_bruteforce(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    obstacle: &[Vec<f64>],
    terminal: &[f64],
    laws: Option<&[EmpiricalLaw]>,
) -> Result<Vec<Vec<f64>>> {
    let n = lattice.steps();
    if n > MAX_ENUM_STEPS || lattice.n_marks() > MAX_ENUM_MARKS {
        return Err(Error::EnumerationGuard(format!(
            "{n} steps and {} marks (limits {MAX_ENUM_STEPS} and {MAX_ENUM_MARKS})",
            lattice.n_marks()
        )));
    }
    let counts = stopping_rule_counts(lattice);
    let total: f64 = counts.iter().flatten().sum();
    if total > MAX_ENUM_RULES {
        return Err(Error::EnumerationGuard(format!(
            "{total:e} stopping rules to enumerate (limit {MAX_ENUM_RULES:e})"
        )));
    }
    check_shape(lattice, obstacle)?;
    let mut payoff = obstacle.to_vec();
    payoff[n] = terminal.to_vec();

    let mut out = lattice.zeros();
    out[n] = terminal.to_vec();
    for s in (0..n).rev() {
        for i in 0..lattice.nodes(s).len() {
            let mut rule = StoppingRule::at_step(lattice, s);
            rule.stop[s][i] = false;
            let mut frontier = vec![(s, i)];
            let mut best = f64::NEG_INFINITY;
            enumerate_rules(lattice, &payoff, &mut frontier, &mut rule, &mut |r| {
                let v = g_expectation(lattice, driver, &payoff, r, s, laws)?[i];
                best = best.max(v);
                Ok(())
            })?;
            out[s][i] = best;
        }
    }
    Ok(out)
}

/// Solution CSV with `K`, `dK`, obstacle and flat-off contribution columns.
pub fn reflected_csv(lattice: &ScenarioLattice, sol: &ReflectedSolution, obstacle: &[Vec<f64>]) -> String {
    let names = lattice.compensator().marks().names();
    let mut out = String::new();
    out.push_str(SOLUTION_SCHEMA);
    out.push('\n');
    out.push_str("step,node,reach_prob,Y");
    for m in names {
        out.push_str(&format!(",U_{m}"));
    }
    out.push_str(",K,dK,obstacle,flat_off\n");
    for s in 0..=lattice.steps() {
        for (i, node) in lattice.nodes(s).iter().enumerate() {
            let y = sol.base.y[s][i];
            out.push_str(&format!("{s},{i},{},{}", fmt_f64(node.reach_prob), fmt_f64(y)));
            for e in 0..names.len() {
                out.push(',');
                if s < lattice.steps() {
                    out.push_str(&fmt_f64(sol.base.u[s][i][e]));
                }
            }
            let d = sol.dk[s][i];
            let contrib = if d != 0.0 { (y - obstacle[s][i]) * d } else { 0.0 };
            out.push_str(&format!(
                ",{},{},{},{}\n",
                fmt_f64(sol.k[s][i]),
                fmt_f64(d),
                fmt_f64(obstacle[s][i]),
                fmt_f64(contrib)
            ));
        }
    }
    out
}
