//! Random small instances shared by the integration suites.
#![allow(dead_code)]

use mfrbsde::drivers::{library, DriverSpec, TerminalSpec};
use mfrbsde::laws::EmpiricalLaw;
use mfrbsde::mpp::{build_lattice, CompensatorModel, MarkSpace, ScenarioLattice, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest clock increment of generated models; with `C_f <= 1.2` the
/// implicit step stays a contraction.
pub const MAX_DA: f64 = 0.4;

/// Random model with non-uniform clock increments and per-step intensities,
/// some of them zero; total jump probability per step at most 1/2.
pub fn random_lattice(rng: &mut ChaCha8Rng, steps: usize, marks: usize) -> ScenarioLattice {
    let horizon = rng.gen_range(0.5..1.5);
    let grid = TimeGrid::uniform(horizon, steps).unwrap();
    let mut clock = vec![0.0];
    for _ in 0..steps {
        let da = (horizon / steps as f64 * rng.gen_range(0.5..1.5)).min(MAX_DA);
        clock.push(clock.last().unwrap() + da);
    }
    let mut phi = Vec::with_capacity(steps);
    for i in 0..steps {
        let da = clock[i + 1] - clock[i];
        let mut row: Vec<f64> = (0..marks)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.05..1.5) })
            .collect();
        let mass: f64 = row.iter().sum::<f64>() * da;
        if mass > 0.5 {
            row.iter_mut().for_each(|r| *r *= 0.5 / mass);
        }
        phi.push(row);
    }
    let comp = CompensatorModel::new(MarkSpace::indexed(marks).unwrap(), phi, clock, horizon).unwrap();
    build_lattice(&comp, &grid).unwrap()
}

pub fn max_rate(lattice: &ScenarioLattice) -> f64 {
    let comp = lattice.compensator();
    (0..lattice.steps()).map(|s| comp.phi(s).iter().sum::<f64>()).fold(0.0, f64::max)
}

/// A bundled Lipschitz driver with random coefficients and `C_f <= 1.2`.
/// With `monotone`, `|kappa| <= 1` keeps the one-step scheme order preserving.
pub fn random_lipschitz(rng: &mut ChaCha8Rng, lattice: &ScenarioLattice, monotone: bool) -> DriverSpec {
    let mut c = || rng.gen_range(-1.2..1.2);
    let (a, b, k, c0) = (c(), c(), c(), c());
    match rng.gen_range(0..5) {
        0 => library::zero(),
        1 => library::constant(c0),
        2 => library::linear(a, c0),
        3 => library::linear_mean(a, b, c0),
        _ => {
            let rb = max_rate(lattice).max(1e-9);
            let kappa = if monotone { k.clamp(-1.0, 1.0) } else { k };
            let kappa = kappa.signum() * kappa.abs().min(1.2 / rb.sqrt());
            library::smooth_lipschitz(a, b, kappa, c0, rb)
        }
    }
}

/// Any bundled driver, including the exponential-growth ones. Their `lambda`
/// stays below 0.8: with explicit `u`, `e^{lambda u}` on coarse clocks feeds
/// back through the jump terms and overflows within a few steps.
pub fn random_driver(rng: &mut ChaCha8Rng, lattice: &ScenarioLattice) -> DriverSpec {
    match rng.gen_range(0..7) {
        5 => library::jump_entropic(rng.gen_range(0.2..0.8)),
        6 => library::quadratic_mean(
            rng.gen_range(0.2..0.8),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.5..0.5),
        ),
        _ => random_lipschitz(rng, lattice, false),
    }
}

/// Frozen laws for drivers that read them.
pub fn random_laws(rng: &mut ChaCha8Rng, steps: usize) -> Vec<EmpiricalLaw> {
    (0..steps)
        .map(|_| {
            let k = rng.gen_range(1..4);
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            let mut atoms: Vec<(f64, f64)> = w.iter().map(|x| (rng.gen_range(-2.0..2.0), x / total)).collect();
            let rest: f64 = atoms[1..].iter().map(|a| a.1).sum();
            atoms[0].1 = 1.0 - rest;
            EmpiricalLaw::new(atoms).unwrap()
        })
        .collect()
}

pub fn laws_for(rng: &mut ChaCha8Rng, driver: &DriverSpec, steps: usize) -> Option<Vec<EmpiricalLaw>> {
    driver.reads_law.then(|| random_laws(rng, steps))
}

/// Nonlinear path functional `offset + sin(sum w[step][mark]) + slope * N_T`.
pub fn random_terminal(rng: &mut ChaCha8Rng, steps: usize, marks: usize) -> TerminalSpec {
    let w: Vec<Vec<f64>> = (0..steps).map(|_| (0..marks).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let offset = rng.gen_range(-1.0..1.0);
    let slope = rng.gen_range(-0.5..0.5);
    TerminalSpec::new("random", move |h| {
        let s: f64 = h.iter().map(|&(i, e)| w[i][e]).sum();
        offset + s.sin() + slope * h.len() as f64
    })
}

/// `base + max(0, bump(history))`, pathwise no smaller than `base`.
pub fn dominating_terminal(rng: &mut ChaCha8Rng, base: TerminalSpec, steps: usize, marks: usize) -> TerminalSpec {
    let w: Vec<Vec<f64>> = (0..steps).map(|_| (0..marks).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let shift = rng.gen_range(-0.5..0.5);
    TerminalSpec::new("dominating", move |h| {
        let s: f64 = h.iter().map(|&(i, e)| w[i][e]).sum();
        base.eval(h) + (s + shift).max(0.0)
    })
}

/// Random obstacle field below the terminal values; about a quarter of the
/// entries are `-inf`.
pub fn random_obstacle(rng: &mut ChaCha8Rng, lattice: &ScenarioLattice, xi: &[f64]) -> Vec<Vec<f64>> {
    let n = lattice.steps();
    let mut h = lattice.zeros();
    for s in 0..n {
        for v in h[s].iter_mut() {
            *v = if rng.gen_bool(0.25) { f64::NEG_INFINITY } else { rng.gen_range(-1.0..1.5) };
        }
    }
    for (v, x) in h[n].iter_mut().zip(xi) {
        *v = if rng.gen_bool(0.25) { f64::NEG_INFINITY } else { x - rng.gen_range(0.0..1.0) };
    }
    h
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
