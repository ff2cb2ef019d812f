//! Ground truth on small lattices. The recursion here walks the tree depth
//! first, rebuilds histories and probabilities from the compensator and
//! solves the implicit step by bisection, sharing nothing with the solvers
//! beyond domain types.

use crate::drivers::{eval_obstacle, DriverPoint, DriverSpec, ObstacleSpec, TerminalSpec};
use crate::error::{Error, Result};
use crate::laws::EmpiricalLaw;
use crate::meanfield::{admissibility, MeanFieldParams};
use crate::mpp::{Branch, ScenarioLattice};

pub const ORACLE_MAX_STEPS: usize = 12;
pub const ORACLE_MAX_MARKS: usize = 3;

/// Damping of the direct mean-field iteration.
const OMEGA: f64 = 0.5;
const FIXED_POINT_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 20_000;

fn guard(lattice: &ScenarioLattice) -> Result<()> {
    if lattice.steps() > ORACLE_MAX_STEPS || lattice.n_marks() > ORACLE_MAX_MARKS {
        return Err(Error::EnumerationGuard(format!(
            "oracle handles at most {ORACLE_MAX_STEPS} steps and {ORACLE_MAX_MARKS} marks, got {} and {}",
            lattice.steps(),
            lattice.n_marks()
        )));
    }
    Ok(())
}

/// Root of the increasing map `r` near `start`, to the last representable bit.
fn bisect(r: impl Fn(f64) -> Result<f64>, start: f64, scale: f64) -> Result<f64> {
    let mut w = scale.abs().max(1e-300) * 2.0;
    let (mut lo, mut hi) = (start - w, start + w);
    let mut tries = 0;
    while r(lo)? > 0.0 || r(hi)? < 0.0 {
        w *= 2.0;
        lo = start - w;
        hi = start + w;
        tries += 1;
        if tries > 1100 || !w.is_finite() {
            return Err(Error::Divergence(format!("no sign change around {start}")));
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if r(mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(if r(lo)?.abs() <= r(hi)?.abs() { lo } else { hi })
}

struct Walk<'a> {
    lattice: &'a ScenarioLattice,
    driver: &'a DriverSpec,
    obstacle: Option<&'a [Vec<f64>]>,
    terminal: &'a TerminalSpec,
    laws: &'a [EmpiricalLaw],
    values: Vec<Vec<f64>>,
    reach: Vec<Vec<f64>>,
}

impl Walk<'_> {
    fn visit(&mut self, step: usize, idx: usize, history: &mut Vec<(usize, usize)>, prob: f64) -> Result<f64> {
        self.reach[step][idx] = prob;
        let lat = self.lattice;
        let n = lat.steps();
        let barrier = self.obstacle.map(|h| h[step][idx]);
        if step == n {
            let xi = self.terminal.eval(history);
            if barrier.is_some_and(|h| xi < h) {
                return Err(Error::TerminalInconsistent { nodes: vec![idx] });
            }
            self.values[step][idx] = xi;
            return Ok(xi);
        }

        let comp = lat.compensator();
        let da = comp.clock()[step + 1] - comp.clock()[step];
        let phi = comp.phi(step);
        let jump: Vec<f64> = phi.iter().map(|r| r * da).collect();
        let stay = 1.0 - jump.iter().sum::<f64>();

        let mut kids: Vec<(Branch, usize)> = lat
            .node(step, idx)
            .children
            .iter()
            .map(|&c| (lat.node(step + 1, c).branch.expect("child branch"), c))
            .collect();
        kids.sort_by_key(|(b, _)| match b {
            Branch::NoJump => 0,
            Branch::Mark(e) => e + 1,
        });

        let mut base = None;
        let mut marked = vec![None; phi.len()];
        for &(b, c) in &kids {
            match b {
                Branch::NoJump => base = Some(self.visit(step + 1, c, history, prob * stay)?),
                Branch::Mark(e) => {
                    history.push((step, e));
                    let v = self.visit(step + 1, c, history, prob * jump[e]);
                    history.pop();
                    marked[e] = Some(v?);
                }
            }
        }
        let base = base.ok_or_else(|| Error::Precondition(format!("node {idx} at step {step} lacks a no-jump child")))?;
        let mut mean = stay * base;
        let mut u = vec![0.0; phi.len()];
        for (e, v) in marked.iter().enumerate() {
            if let Some(v) = v {
                mean += jump[e] * v;
                u[e] = v - base;
            }
        }

        let law = &self.laws[step];
        let time = lat.time(step);
        let driver = self.driver;
        let f = |y: f64| -> Result<f64> {
            let v = driver.call(&DriverPoint {
                step,
                time,
                y,
                u: &u,
                law,
                phi,
            });
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteDriver {
                    driver: driver.name().to_string(),
                    step,
                    y,
                    u: u.clone(),
                })
            }
        };
        let y = if da == 0.0 {
            mean
        } else {
            let f0 = f(mean)?;
            bisect(|y| Ok(y - mean - da * f(y)?), mean, da * f0)?
        };
        let y = match barrier {
            Some(h) if h > y => h,
            _ => y,
        };
        self.values[step][idx] = y;
        Ok(y)
    }
}

fn walk(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    obstacle: Option<&[Vec<f64>]>,
    terminal: &TerminalSpec,
    laws: Option<&[EmpiricalLaw]>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    guard(lattice)?;
    let n = lattice.steps();
    for s in 0..n {
        let lip = driver.implicit_lipschitz();
        let product = lip * lattice.d_clock(s);
        if product > 0.5 {
            return Err(Error::StepTooCoarse { step: s, product });
        }
    }
    let laws = match laws {
        Some(l) if l.len() >= n => l.to_vec(),
        Some(l) => return Err(Error::Precondition(format!("{} laws for {n} steps", l.len()))),
        None if driver.reads_law => return Err(Error::MissingLaws(driver.name().to_string())),
        None => vec![EmpiricalLaw::delta_zero(); n],
    };
    if let Some(h) = obstacle {
        if h.len() != n + 1 || (0..=n).any(|s| h[s].len() != lattice.nodes(s).len()) {
            return Err(Error::Precondition("obstacle field does not match the lattice".into()));
        }
    }
    let mut w = Walk {
        lattice,
        driver,
        obstacle,
        terminal,
        laws: &laws,
        values: lattice.zeros(),
        reach: lattice.zeros(),
    };
    w.visit(0, 0, &mut Vec::new(), 1.0)?;
    Ok((w.values, w.reach))
}

/// Node values of the plain (`obstacle = None`) or reflected equation, by
/// exhaustive depth-first recursion.
pub fn exact_tree_solve(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    obstacle: Option<&[Vec<f64>]>,
    terminal: &TerminalSpec,
    laws: Option<&[EmpiricalLaw]>,
) -> Result<Vec<Vec<f64>>> {
    walk(lattice, driver, obstacle, terminal, laws).map(|(v, _)| v)
}

fn laws_of(values: &[Vec<f64>], reach: &[Vec<f64>]) -> Result<Vec<EmpiricalLaw>> {
    values
        .iter()
        .zip(reach)
        .map(|(v, r)| EmpiricalLaw::new(v.iter().copied().zip(r.iter().copied())))
        .collect()
}

/// Fixed point of the frozen-law map on the whole horizon by damped direct
/// iteration `Y <- (1 - omega) Y + omega Phi(Y)` with `omega = 1/2`, until
/// `sup |Phi(Y) - Y| <= 1e-12`.
pub fn exact_meanfield_fixed_point(
    lattice: &ScenarioLattice,
    driver: &DriverSpec,
    obstacle: &ObstacleSpec,
    terminal: &TerminalSpec,
    params: &MeanFieldParams,
) -> Result<Vec<Vec<f64>>> {
    guard(lattice)?;
    let adm = admissibility(params, Some(lattice.compensator().clock_total()));
    if !adm.ok {
        return Err(Error::Precondition(format!("inadmissible obstacle constants ({})", adm.explanation())));
    }
    let n = lattice.steps();
    // start from E_t[xi], the zero-driver solution
    let (mut y, reach) = walk(lattice, &crate::drivers::library::zero(), None, terminal, None)?;
    let mut first = None;
    for sweep in 1..=MAX_SWEEPS {
        let laws = laws_of(&y, &reach)?;
        let mut h = lattice.zeros();
        for s in 0..=n {
            let t = lattice.time(s);
            for (i, v) in y[s].iter().enumerate() {
                h[s][i] = eval_obstacle(obstacle, s, t, *v, &laws[s]);
            }
        }
        let next = walk(lattice, driver, Some(&h), terminal, Some(&laws[..n]))?.0;
        let gap = next
            .iter()
            .zip(&y)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, z)| (x - z).abs()))
            .fold(0.0, f64::max);
        if !gap.is_finite() {
            return Err(Error::Divergence(format!("non-finite gap at sweep {sweep}")));
        }
        if gap <= FIXED_POINT_TOL {
            return Ok(next);
        }
        let g0 = *first.get_or_insert(gap);
        if gap > 1e8 * (1.0 + g0) {
            return Err(Error::Divergence(format!("gap {gap} at sweep {sweep}")));
        }
        for (row, new) in y.iter_mut().zip(&next) {
            for (v, w) in row.iter_mut().zip(new) {
                *v = (1.0 - OMEGA) * *v + OMEGA * w;
            }
        }
    }
    Err(Error::Divergence(format!("no fixed point within {MAX_SWEEPS} sweeps")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;
    use crate::drivers::library::*;
    use crate::meanfield::picard_solve;
    use crate::mpp::{build_lattice, CompensatorModel, MarkSpace, TimeGrid};
    use crate::reflected::solve_reflected;

    fn lattice(rates: &[f64], steps: usize) -> ScenarioLattice {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        let comp = CompensatorModel::homogeneous(MarkSpace::indexed(rates.len()).unwrap(), rates, &grid, 1.0).unwrap();
        build_lattice(&comp, &grid).unwrap()
    }

    fn max_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn one_step_expectation() {
        let lat = lattice(&[0.3], 1);
        let v = exact_tree_solve(&lat, &zero(), None, &TerminalSpec::event_count(0.0, 1.0), None).unwrap();
        assert!((v[0][0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn agrees_with_solvers() {
        let lat = lattice(&[0.6, 0.9], 6);
        let xi = TerminalSpec::mark_weighted(0.2, vec![1.0, -0.5]);
        for f in [linear(-0.7, 0.2), smooth_lipschitz(0.5, 0.0, 0.8, -0.1, 1.5), jump_entropic(0.8)] {
            let sol = solve_bsde(&lat, &f, &xi, None).unwrap();
            let exact = exact_tree_solve(&lat, &f, None, &xi, None).unwrap();
            assert!(max_err(&sol.y, &exact) < 1e-12, "{}", f.name());

            let h: Vec<Vec<f64>> = lat.zeros().into_iter().map(|l| vec![0.1; l.len()]).collect();
            let xi_h = TerminalSpec::event_count(0.1, 0.5);
            let r = solve_reflected(&lat, &f, &h, &xi_h, None).unwrap();
            let exact = exact_tree_solve(&lat, &f, Some(&h), &xi_h, None).unwrap();
            assert!(max_err(&r.base.y, &exact) < 1e-12, "{}", f.name());
        }
    }

    #[test]
    fn invariant_under_node_order() {
        let lat = lattice(&[0.5, 0.4], 5);
        let f = smooth_lipschitz(0.3, 0.0, 0.6, 0.2, 1.0);
        let xi = TerminalSpec::mark_weighted(0.0, vec![1.0, 2.0]);
        let a = exact_tree_solve(&lat, &f, None, &xi, None).unwrap();
        let perm = lat.permuted(7);
        let b = exact_tree_solve(&perm, &f, None, &xi, None).unwrap();
        for s in 0..=5 {
            let mut x: Vec<(Vec<(usize, usize)>, f64)> = (0..a[s].len()).map(|i| (lat.history(s, i), a[s][i])).collect();
            let mut y: Vec<(Vec<(usize, usize)>, f64)> = (0..b[s].len()).map(|i| (perm.history(s, i), b[s][i])).collect();
            x.sort_by(|p, q| p.0.cmp(&q.0));
            y.sort_by(|p, q| p.0.cmp(&q.0));
            assert_eq!(x, y);
        }
    }

    #[test]
    fn guards() {
        let lat = lattice(&[0.1], 13);
        assert!(matches!(
            exact_tree_solve(&lat, &zero(), None, &TerminalSpec::constant(0.0), None),
            Err(Error::EnumerationGuard(_))
        ));
        let lat = lattice(&[0.1], 3);
        assert!(matches!(
            exact_tree_solve(&lat, &linear_mean(0.0, 1.0, 0.0), None, &TerminalSpec::constant(0.0), None),
            Err(Error::MissingLaws(_))
        ));
    }

    #[test]
    fn meanfield_reductions() {
        let lat = lattice(&[0.5, 0.3], 4);
        let xi = TerminalSpec::event_count(0.0, 1.0);
        let f = linear(0.4, 0.1);
        let params = MeanFieldParams::from_specs(&f, &ObstacleSpec::none());
        let fp = exact_meanfield_fixed_point(&lat, &f, &ObstacleSpec::none(), &xi, &params).unwrap();
        let plain = exact_tree_solve(&lat, &f, None, &xi, None).unwrap();
        assert!(max_err(&fp, &plain) < 1e-14);

        let lat = lattice(&[0.0], 8);
        let (a, x) = (0.7, 2.0);
        let f = linear_mean(0.0, a, 0.0);
        let params = MeanFieldParams::from_specs(&f, &ObstacleSpec::none());
        let fp = exact_meanfield_fixed_point(&lat, &f, &ObstacleSpec::none(), &TerminalSpec::constant(x), &params).unwrap();
        let want = x * (1.0 - a / 8.0).powi(-8);
        assert!((fp[0][0] - want).abs() < 1e-11);
    }

    #[test]
    fn meanfield_matches_picard() {
        let lat = lattice(&[0.5, 0.3], 5);
        let f = smooth_lipschitz(0.3, 0.4, 0.5, 0.1, 0.8);
        let obs = ObstacleSpec::affine(0.1, 0.1, 0.4, -0.6);
        let xi = TerminalSpec::event_count(0.0, 1.0);
        let params = MeanFieldParams::from_specs(&f, &obs);
        let fp = exact_meanfield_fixed_point(&lat, &f, &obs, &xi, &params).unwrap();
        let (sol, _) = picard_solve(&lat, &f, &obs, &xi, &params).unwrap();
        assert!(max_err(&fp, &sol.base.y) < 1e-9);
    }
}
