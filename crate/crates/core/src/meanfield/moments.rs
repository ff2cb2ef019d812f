//! Exponential and power moments of Picard iterates, computed exactly on the
//! tree in log space.

use std::collections::VecDeque;

use crate::drivers::DriverSpec;
use crate::error::{Error, Result};
use crate::laws::{wasserstein, EmpiricalLaw};
use crate::mpp::{fmt_f64, ScenarioLattice};
use crate::reflected::ReflectedSolution;

use super::theta_gap;

pub const MOMENTS_SCHEMA: &str = "# schema: mfrbsde-moments v1";

/// Largest log-moment representable as a finite `f64`.
const LOG_MAX: f64 = 709.78;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentConfig {
    pub p: f64,
    pub lambda: f64,
    /// Scale in `E[exp(p gamma sup |Y|)]`.
    pub gamma: f64,
    pub theta: Vec<f64>,
    /// Largest iterate offset `q` tracked for the theta-gap moments.
    pub q_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub iteration: usize,
    /// `exp(p lambda |Y_0|)`.
    pub exp_y0: f64,
    /// `E[exp(p gamma sup_s |Y_s|)]`.
    pub exp_sup: f64,
    /// `E[(sum_i sum_e |U_i(e)|^2 phi_i(e) dA_i)^{p/2}]`.
    pub u_energy: f64,
    /// `E[|K_T|^p]`.
    pub k_moment: f64,
    /// `E[exp(p lambda e^{beta A_T} L + p lambda sum_i e^{beta A_i} alpha_i dA_i)]`
    /// with `L = |xi|` or the largest obstacle magnitude on the path.
    pub bound_rhs: f64,
    /// `exp(p lambda |Y_0|) <= bound_rhs (1 + 10 max dA)`.
    pub bound_ok: bool,
    /// `sup_theta sup_q E[exp(p gamma sup_s dY-bar^{(m,q)}_s)]` over the
    /// iterates seen so far.
    pub theta_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentTable {
    pub rows: Vec<MomentRow>,
    /// First iteration whose gaps were below tolerance.
    pub converged_at: Option<usize>,
}

impl MomentTable {
    /// True when some monitored moment grows (relative 1e-9) between
    /// consecutive iterations after convergence.
    pub fn grows_after_convergence(&self) -> bool {
        let Some(c) = self.converged_at else {
            return false;
        };
        let tail: Vec<&MomentRow> = self.rows.iter().filter(|r| r.iteration >= c).collect();
        tail.windows(2).any(|w| {
            let up = |a: f64, b: f64| b > a * (1.0 + 1e-9) + 1e-300;
            up(w[0].exp_sup, w[1].exp_sup) || up(w[0].u_energy, w[1].u_energy) || up(w[0].k_moment, w[1].k_moment)
        })
    }

    pub fn csv(&self) -> String {
        let mut out = String::new();
        out.push_str(MOMENTS_SCHEMA);
        out.push('\n');
        out.push_str("iteration,exp_y0,exp_sup,u_energy,k_moment,bound_rhs,bound_ok,theta_gap\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iteration,
                fmt_f64(r.exp_y0),
                fmt_f64(r.exp_sup),
                fmt_f64(r.u_energy),
                fmt_f64(r.k_moment),
                fmt_f64(r.bound_rhs),
                r.bound_ok,
                fmt_f64(r.theta_gap)
            ));
        }
        out
    }
}

fn log_expect(lattice: &ScenarioLattice, exponents: &[f64]) -> f64 {
    let n = lattice.steps();
    let terms: Vec<f64> = lattice
        .nodes(n)
        .iter()
        .zip(exponents)
        .filter(|(node, _)| node.reach_prob > 0.0)
        .map(|(node, x)| node.reach_prob.ln() + x)
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn checked_exp(log: f64, context: &str) -> Result<f64> {
    if log > LOG_MAX || log.is_nan() {
        return Err(Error::ExponentialOverflow {
            context: context.to_string(),
        });
    }
    Ok(log.exp())
}

/// Per-path running maximum of `g(step, node)`, reported at terminal nodes.
fn path_max(lattice: &ScenarioLattice, g: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut cur = vec![g(0, 0)];
    for s in 0..lattice.steps() {
        let mut next = vec![0.0; lattice.nodes(s + 1).len()];
        for (i, node) in lattice.nodes(s).iter().enumerate() {
            for &c in &node.children {
                next[c] = cur[i].max(g(s + 1, c));
            }
        }
        cur = next;
    }
    cur
}

/// Per-path sum of `g(step, node)` over `step < n`, reported at terminal nodes.
fn path_sum(lattice: &ScenarioLattice, g: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut cur = vec![0.0];
    for s in 0..lattice.steps() {
        let mut next = vec![0.0; lattice.nodes(s + 1).len()];
        for (i, node) in lattice.nodes(s).iter().enumerate() {
            let v = cur[i] + g(s, i);
            for &c in &node.children {
                next[c] = v;
            }
        }
        cur = next;
    }
    cur
}

/// Running monitor fed one iterate at a time by the Picard engine.
pub(crate) struct MomentMonitor<'a> {
    lattice: &'a ScenarioLattice,
    driver: &'a DriverSpec,
    xi: &'a [f64],
    cfg: MomentConfig,
    history: VecDeque<(usize, Vec<Vec<f64>>)>,
    pub(crate) table: MomentTable,
}

impl<'a> MomentMonitor<'a> {
    pub(crate) fn new(lattice: &'a ScenarioLattice, driver: &'a DriverSpec, xi: &'a [f64], cfg: MomentConfig) -> Self {
        Self {
            lattice,
            driver,
            xi,
            cfg,
            history: VecDeque::new(),
            table: MomentTable::default(),
        }
    }

    /// Records iterate `m` solved with the frozen obstacle and laws.
    pub(crate) fn push(
        &mut self,
        iteration: usize,
        sol: &ReflectedSolution,
        obstacle: &[Vec<f64>],
        laws: &[EmpiricalLaw],
    ) -> Result<()> {
        let lat = self.lattice;
        let n = lat.steps();
        let comp = lat.compensator();
        let clock = comp.clock();
        let MomentConfig { p, lambda, gamma, .. } = self.cfg;
        let y = &sol.base.y;

        let log_y0 = p * lambda * y[0][0].abs();
        let exp_y0 = checked_exp(log_y0, "exp(p lambda |Y_0|)")?;

        let sup = path_max(lat, |s, i| y[s][i].abs());
        let exps: Vec<f64> = sup.iter().map(|v| p * gamma * v).collect();
        let exp_sup = checked_exp(log_expect(lat, &exps), "E[exp(p gamma sup |Y|)]")?;

        let energy = path_sum(lat, |s, i| {
            let phi = comp.phi(s);
            sol.base.u[s][i].iter().zip(phi).map(|(u, r)| u * u * r).sum::<f64>() * lat.d_clock(s)
        });
        let u_energy = lat.expectation(n, &energy.iter().map(|e| e.powf(p / 2.0)).collect::<Vec<_>>());
        let k_moment = lat.expectation(n, &sol.k[n].iter().map(|k| k.abs().powf(p)).collect::<Vec<_>>());

        let beta = self.driver.lip_y_mu;
        let delta0 = EmpiricalLaw::delta_zero();
        let mut alpha_eff = Vec::with_capacity(n);
        for (s, law) in laws.iter().enumerate().take(n) {
            alpha_eff.push(self.driver.alpha_at(s) + beta * wasserstein(law, &delta0, 1.0)?);
        }
        let alpha_sum: f64 = (0..n).map(|s| (beta * clock[s]).exp() * alpha_eff[s] * lat.d_clock(s)).sum();
        let obstacle_max = path_max(lat, |s, i| {
            let h = if s < n { obstacle[s][i] } else { f64::NEG_INFINITY };
            if h.is_finite() {
                h.abs()
            } else {
                0.0
            }
        });
        let weight = (beta * clock[n]).exp();
        let rhs_exps: Vec<f64> = self
            .xi
            .iter()
            .zip(&obstacle_max)
            .map(|(x, h)| p * lambda * (weight * x.abs().max(*h) + alpha_sum))
            .collect();
        let log_rhs = log_expect(lat, &rhs_exps);
        let bound_rhs = checked_exp(log_rhs, "a priori exponential bound")?;
        let slack = (1.0 + 10.0 * comp.max_d_clock()).ln();
        let bound_ok = log_y0 <= log_rhs + slack;

        // theta-gap moments against earlier iterates
        let mut theta_best = 0.0f64;
        let mut updates = Vec::new();
        for (m_old, y_old) in &self.history {
            for &theta in &self.cfg.theta {
                let (_, _, bar) = theta_gap(y, y_old, theta)?;
                let sup = path_max(lat, |s, i| bar[s][i]);
                let exps: Vec<f64> = sup.iter().map(|v| p * gamma * v).collect();
                let v = checked_exp(log_expect(lat, &exps), "theta-gap moment")?;
                updates.push((*m_old, v));
                theta_best = theta_best.max(v);
            }
        }
        for (m_old, v) in updates {
            if let Some(row) = self.table.rows.iter_mut().find(|r| r.iteration == m_old) {
                row.theta_gap = row.theta_gap.max(v);
            }
        }
        self.history.push_back((iteration, y.clone()));
        while self.history.len() > self.cfg.q_window {
            self.history.pop_front();
        }

        self.table.rows.push(MomentRow {
            iteration,
            exp_y0,
            exp_sup,
            u_energy,
            k_moment,
            bound_rhs,
            bound_ok,
            theta_gap: 0.0,
        });
        Ok(())
    }
}

/// Moment table for a sequence of iterates; `obstacles[m]` and `laws[m]` are
/// the frozen obstacle values and laws used to produce `iterates[m]`.
pub fn moment_diagnostics(
    lattice: &ScenarioLattice,
    iterates: &[ReflectedSolution],
    obstacles: &[Vec<Vec<f64>>],
    laws: &[Vec<EmpiricalLaw>],
    driver: &DriverSpec,
    xi: &[f64],
    cfg: MomentConfig,
) -> Result<MomentTable> {
    let mut monitor = MomentMonitor::new(lattice, driver, xi, cfg);
    for (m, sol) in iterates.iter().enumerate() {
        monitor.push(m + 1, sol, &obstacles[m], &laws[m])?;
    }
    Ok(monitor.table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::library;
    use crate::mpp::{build_lattice, CompensatorModel, MarkSpace, TimeGrid};
    use crate::reflected::solve_reflected_values;

    #[test]
    fn trivial_instance_all_ones() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let comp = CompensatorModel::homogeneous(MarkSpace::indexed(1).unwrap(), &[0.8], &grid, 1.0).unwrap();
        let lat = build_lattice(&comp, &grid).unwrap();
        let f = library::jump_entropic(1.0);
        let xi = vec![0.0; lat.nodes(4).len()];
        let obs: Vec<Vec<f64>> = lat.zeros().into_iter().map(|l| vec![f64::NEG_INFINITY; l.len()]).collect();
        let sol = solve_reflected_values(&lat, &f, &obs, &xi, None).unwrap();
        let laws = vec![EmpiricalLaw::delta_zero(); 4];
        let cfg = MomentConfig {
            p: 2.0,
            lambda: 1.0,
            gamma: 1.0,
            theta: vec![0.5],
            q_window: 3,
        };
        let t = moment_diagnostics(&lat, &[sol.clone(), sol], &[obs.clone(), obs], &[laws.clone(), laws], &f, &xi, cfg).unwrap();
        for r in &t.rows {
            for v in [r.exp_y0, r.exp_sup, r.bound_rhs] {
                assert!((v - 1.0).abs() < 1e-14);
            }
            assert_eq!((r.u_energy, r.k_moment), (0.0, 0.0));
            assert!(r.bound_ok);
        }
        assert!((t.rows[0].theta_gap - 1.0).abs() < 1e-14);
    }

    #[test]
    fn overflow_is_reported() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let comp = CompensatorModel::homogeneous(MarkSpace::indexed(1).unwrap(), &[0.5], &grid, 1.0).unwrap();
        let lat = build_lattice(&comp, &grid).unwrap();
        let f = library::jump_entropic(1.0);
        let xi = vec![500.0; lat.nodes(2).len()];
        let obs: Vec<Vec<f64>> = lat.zeros().into_iter().map(|l| vec![f64::NEG_INFINITY; l.len()]).collect();
        let sol = solve_reflected_values(&lat, &f, &obs, &xi, None).unwrap();
        let cfg = MomentConfig {
            p: 2.0,
            lambda: 1.0,
            gamma: 1.0,
            theta: vec![0.5],
            q_window: 1,
        };
        let laws = vec![EmpiricalLaw::delta_zero(); 2];
        let err = moment_diagnostics(&lat, &[sol], &[obs], &[laws], &f, &xi, cfg).unwrap_err();
        assert!(matches!(err, Error::ExponentialOverflow { .. }));
    }
}
