//! Mean-field coupling: admissibility of the obstacle constants, the
//! contraction constant of the frozen-law map, horizon splitting, the Picard
//! engine and moment monitors.

mod moments;
mod picard;

pub use moments::{moment_diagnostics, MomentConfig, MomentRow, MomentTable, MOMENTS_SCHEMA};
pub use picard::{
    iterations_csv, lp_beta_gap, picard_map, picard_solve, uniqueness_probe, Init, IterationRecord, IterationReport,
    ITERATIONS_SCHEMA,
};

use crate::drivers::{DriverSpec, ObstacleSpec, Regime};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldParams {
    /// Moment order; also the order of the Wasserstein law gap.
    pub p: f64,
    pub eta: f64,
    /// Exponential weight `e^{beta A_t}` of the stability estimates.
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Lipschitz constant `C_f` of the driver.
    pub c_f: f64,
    /// Moment scale `lambda` of the quadratic regime.
    pub lambda: Option<f64>,
    /// Scale `gamma` in `E[exp(p gamma sup |Y|)]`; defaults to `lambda`.
    pub moment_gamma: Option<f64>,
    pub theta: Vec<f64>,
    pub tol: f64,
    pub max_picard: usize,
    pub regime: Regime,
    pub init: Init,
    /// Extra sweeps after convergence, used by the moment growth monitor.
    pub post_sweeps: usize,
}

impl MeanFieldParams {
    /// Constants read from the driver and obstacle. In the Lipschitz regime
    /// `eta = 1/C_f^2` and `beta = C_f^2 + C_f`, the smallest weight allowed;
    /// with `C_f = 0` the estimate needs no weight and `eta` is infinite.
    pub fn from_specs(driver: &DriverSpec, obstacle: &ObstacleSpec) -> Self {
        let c_f = driver.lip_full.unwrap_or(0.0);
        let (eta, beta) = if c_f > 0.0 {
            (1.0 / (c_f * c_f), c_f * c_f + c_f)
        } else {
            (f64::INFINITY, 0.0)
        };
        Self {
            p: 2.0,
            eta,
            beta,
            gamma1: obstacle.gamma1,
            gamma2: obstacle.gamma2,
            c_f,
            lambda: driver.lambda,
            moment_gamma: None,
            theta: vec![0.1, 0.25, 0.5],
            tol: 1e-10,
            max_picard: 200,
            regime: driver.regime,
            init: Init::ConditionalExpectation,
            post_sweeps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        let min_p = match self.regime {
            Regime::Lipschitz => 2.0,
            Regime::QuadraticExponential => 1.0,
        };
        if !(self.p >= min_p) || !self.p.is_finite() {
            return bad(format!("moment order p = {} must be >= {min_p}", self.p));
        }
        if !(self.eta > 0.0) || !(self.beta >= 0.0) || !(self.c_f >= 0.0) {
            return bad("need eta > 0, beta >= 0, C_f >= 0".into());
        }
        if !(self.gamma1 >= 0.0) || !(self.gamma2 >= 0.0) {
            return bad("obstacle constants must be nonnegative".into());
        }
        if self.theta.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("theta grid must lie in (0, 1)".into());
        }
        if !(self.tol > 0.0) || self.max_picard == 0 {
            return bad("need tol > 0 and max_picard >= 1".into());
        }
        if self.regime == Regime::Lipschitz {
            if self.eta * self.c_f * self.c_f > 1.0 + 1e-12 {
                return bad(format!("eta = {} exceeds 1/C_f^2", self.eta));
            }
            let need = 2.0 / self.eta + 2.0 * self.c_f;
            if 2.0 * self.beta < need * (1.0 - 1e-12) {
                return bad(format!("2 beta = {} below 2/eta + 2 C_f = {need}", 2.0 * self.beta));
            }
        }
        if self.regime == Regime::QuadraticExponential && !self.lambda.is_some_and(|l| l > 0.0) {
            return bad("quadratic regime needs lambda > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub label: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Admissibility {
    /// Verdict of the headline condition.
    pub ok: bool,
    pub headline: Condition,
    /// Sharper working condition with the clock weight, Lipschitz regime only.
    pub sharp: Option<Condition>,
}

impl Admissibility {
    pub fn explanation(&self) -> String {
        let fmt = |c: &Condition| {
            format!(
                "{}: {} {} {}",
                c.label,
                c.lhs,
                if c.holds { "<" } else { ">=" },
                c.rhs
            )
        };
        match &self.sharp {
            Some(s) => format!("{}; {}", fmt(&self.headline), fmt(s)),
            None => fmt(&self.headline),
        }
    }
}

/// Lipschitz regime: `gamma1^p + gamma2^p < 2^{1-p}` and, with the clock
/// total `A_T`, `gamma1^p + gamma2^p e^{p beta A_T} < 2^{2-3p/2}`.
/// Quadratic regime: `4 (gamma1 + gamma2) < 1`.
pub fn admissibility(params: &MeanFieldParams, clock_total: Option<f64>) -> Admissibility {
    let (g1, g2, p) = (params.gamma1, params.gamma2, params.p);
    match params.regime {
        Regime::Lipschitz => {
            let lhs = g1.powf(p) + g2.powf(p);
            let rhs = 2f64.powf(1.0 - p);
            let headline = Condition {
                label: "gamma1^p + gamma2^p < 2^(1-p)",
                lhs,
                rhs,
                holds: lhs < rhs,
            };
            let sharp = clock_total.map(|a| {
                let lhs = g1.powf(p) + g2.powf(p) * (p * params.beta * a).exp();
                let rhs = 2f64.powf(2.0 - 1.5 * p);
                Condition {
                    label: "gamma1^p + gamma2^p e^(p beta A_T) < 2^(2-3p/2)",
                    lhs,
                    rhs,
                    holds: lhs < rhs,
                }
            });
            Admissibility {
                ok: headline.holds,
                headline,
                sharp,
            }
        }
        Regime::QuadraticExponential => {
            let lhs = 4.0 * (g1 + g2);
            let headline = Condition {
                label: "4 (gamma1 + gamma2) < 1",
                lhs,
                rhs: 1.0,
                holds: lhs < 1.0,
            };
            Admissibility {
                ok: headline.holds,
                headline,
                sharp: None,
            }
        }
    }
}

/// Contraction constant of the frozen-law map on the window `[a, b]` (step
/// indices into `clock`):
/// `2^{p/2-1} eta^{p/2} C_f^p (A_b - A_a)^{(p-2)/p} sum_{a<=i<b} e^{p beta A_i} dA_i
///  + 2^{p/2-1} 2^{p-1} (gamma1^p + gamma2^p e^{p beta A_T})`.
pub fn contraction_constant(params: &MeanFieldParams, clock: &[f64], window: (usize, usize)) -> f64 {
    let MeanFieldParams { p, eta, beta, c_f, .. } = *params;
    let (a, b) = window;
    let scale = 2f64.powf(p / 2.0 - 1.0);
    let driver_part = if c_f == 0.0 {
        0.0
    } else {
        let integral: f64 = (a..b).map(|i| (p * beta * clock[i]).exp() * (clock[i + 1] - clock[i])).sum();
        scale * eta.powf(p / 2.0) * c_f.powf(p) * (clock[b] - clock[a]).powf((p - 2.0) / p) * integral
    };
    let a_t = *clock.last().expect("clock has at least one point");
    let obstacle_part =
        scale * 2f64.powf(p - 1.0) * (params.gamma1.powf(p) + params.gamma2.powf(p) * (p * beta * a_t).exp());
    driver_part + obstacle_part
}

/// Largest window exponent tried by [`split_horizon`].
pub const MAX_SPLIT_POWER: u32 = 16;

fn nearest_index(times: &[f64], target: f64) -> usize {
    let i = times.partition_point(|t| *t < target);
    if i == 0 {
        0
    } else if i == times.len() {
        times.len() - 1
    } else if target - times[i - 1] <= times[i] - target {
        i - 1
    } else {
        i
    }
}

/// Windows `(a, b)` in step indices, latest first, from the smallest power
/// of two `m` such that equal-time windows snapped to the grid all have
/// contraction constant below one.
pub fn split_horizon(params: &MeanFieldParams, times: &[f64], clock: &[f64]) -> Result<Vec<(usize, usize)>> {
    let adm = admissibility(params, clock.last().copied());
    if !adm.ok {
        return Err(Error::Precondition(format!("inadmissible obstacle constants ({})", adm.explanation())));
    }
    let n = times.len() - 1;
    let horizon = times[n];
    let gamma_only = contraction_constant(&MeanFieldParams { c_f: 0.0, ..params.clone() }, clock, (0, n));
    if gamma_only >= 1.0 {
        return Err(Error::SplitInfeasible {
            max_windows: 1 << MAX_SPLIT_POWER,
            alpha: gamma_only,
        });
    }
    let mut best = f64::INFINITY;
    let mut tried = 1;
    for k in 0..=MAX_SPLIT_POWER {
        let m = 1usize << k;
        tried = m;
        let mut bounds: Vec<usize> = (0..=m).map(|j| nearest_index(times, horizon * j as f64 / m as f64)).collect();
        bounds[0] = 0;
        bounds[m] = n;
        bounds.dedup();
        let windows: Vec<(usize, usize)> = bounds.windows(2).map(|w| (w[0], w[1])).collect();
        let worst = windows
            .iter()
            .map(|&w| contraction_constant(params, clock, w))
            .fold(0.0, f64::max);
        best = best.min(worst);
        if worst < 1.0 {
            return Ok(windows.into_iter().rev().collect());
        }
        if m >= n {
            break;
        }
    }
    Err(Error::SplitInfeasible {
        max_windows: tried,
        alpha: best,
    })
}

/// `(dY, dY~, dY-bar)` with `dY = (Y1 - theta Y2)/(1 - theta)`,
/// `dY~ = (Y2 - theta Y1)/(1 - theta)`, `dY-bar = |dY| + |dY~|`.
#[allow(clippy::type_complexity)]
pub fn theta_gap(
    y1: &[Vec<f64>],
    y2: &[Vec<f64>],
    theta: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Precondition(format!("theta = {theta} outside (0, 1)")));
    }
    if y1.len() != y2.len() || y1.iter().zip(y2).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Precondition("theta_gap needs fields on the same lattice".into()));
    }
    let k = 1.0 - theta;
    let map = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Vec<f64>> {
        y1.iter()
            .zip(y2)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect())
            .collect()
    };
    let d = map(&|x, y| (x - theta * y) / k);
    let dt = map(&|x, y| (y - theta * x) / k);
    let bar = d
        .iter()
        .zip(&dt)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.abs() + y.abs()).collect())
        .collect();
    Ok((d, dt, bar))
}

/// Whether the driver or the obstacle reads the solution's own law or value.
pub fn is_coupled(driver: &DriverSpec, obstacle: &ObstacleSpec) -> bool {
    driver.reads_law || obstacle.coupled
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::library;

    fn lip_params(g1: f64, g2: f64) -> MeanFieldParams {
        let mut p = MeanFieldParams::from_specs(&library::zero(), &ObstacleSpec::affine(g1, g2, 0.0, 0.0));
        p.gamma1 = g1;
        p.gamma2 = g2;
        p
    }

    fn uniform_clock(n: usize, total: f64) -> Vec<f64> {
        (0..=n).map(|i| total * i as f64 / n as f64).collect()
    }

    #[test]
    fn admissibility_examples() {
        let a = admissibility(&lip_params(0.4, 0.4), None);
        assert!(a.ok);
        assert!((a.headline.lhs - 0.32).abs() < 1e-15 && a.headline.rhs == 0.5);
        let mut q = lip_params(0.1, 0.1);
        q.regime = Regime::QuadraticExponential;
        assert!(admissibility(&q, None).ok);
        q.gamma1 = 0.2;
        q.gamma2 = 0.05;
        let a = admissibility(&q, None);
        assert!(!a.ok && a.headline.lhs == 1.0);
        let mut s = lip_params(0.3, 0.3);
        s.beta = 1.0;
        let a = admissibility(&s, Some(1.0));
        assert!(a.ok && !a.sharp.unwrap().holds);
    }

    #[test]
    fn contraction_examples() {
        let clock = uniform_clock(10, 1.0);
        assert_eq!(contraction_constant(&lip_params(0.0, 0.0), &clock, (0, 10)), 0.0);
        assert!((contraction_constant(&lip_params(0.4, 0.4), &clock, (0, 10)) - 0.64).abs() < 1e-15);

        let mut p = lip_params(0.0, 0.0);
        p.eta = 1.0;
        p.c_f = 1.0;
        p.beta = 2.0;
        let clock = uniform_clock(100, 1.0);
        let want: f64 = (90..100).map(|i| (4.0 * clock[i]).exp() * 0.01).sum();
        assert!((contraction_constant(&p, &clock, (90, 100)) - want).abs() < 1e-12);
    }

    #[test]
    fn split_examples() {
        let times = uniform_clock(256, 1.0);
        let w = split_horizon(&lip_params(0.0, 0.0), &times, &times).unwrap();
        assert_eq!(w, vec![(0, 256)]);

        let mut p = lip_params(0.1, 0.1);
        p.eta = 1.0;
        p.c_f = 1.0;
        p.beta = 2.0;
        assert!(matches!(split_horizon(&p, &times, &times), Err(Error::SplitInfeasible { .. })));

        p.gamma2 = 0.05;
        let w = split_horizon(&p, &times, &times).unwrap();
        assert!(w.iter().all(|&win| contraction_constant(&p, &times, win) < 1.0));
        assert_eq!(w[0].1, 256);
        assert_eq!(w.last().unwrap().0, 0);
        let m = w.len();
        assert!(m.is_power_of_two());
        // the next coarser split fails somewhere
        let coarse = 256 / (m / 2);
        assert!((0..m / 2).any(|j| contraction_constant(&p, &times, (j * coarse, (j + 1) * coarse)) >= 1.0));

        assert!(split_horizon(&lip_params(0.6, 0.6), &times, &times).is_err());
    }

    #[test]
    fn theta_gap_examples() {
        let y1 = vec![vec![2.0]];
        let y2 = vec![vec![1.0]];
        let (d, dt, bar) = theta_gap(&y1, &y2, 0.5).unwrap();
        assert_eq!((d[0][0], dt[0][0], bar[0][0]), (3.0, 0.0, 3.0));
        let (d, _, _) = theta_gap(&y1, &y1, 0.3).unwrap();
        assert!((d[0][0] - 2.0).abs() < 1e-15);
        assert!(theta_gap(&y1, &y2, 1.0).is_err());
    }

    #[test]
    fn params_validation() {
        let mut p = MeanFieldParams::from_specs(&library::linear(1.0, 0.0), &ObstacleSpec::none());
        p.validate().unwrap();
        p.eta = 2.0;
        assert!(p.validate().is_err());
    }
}
