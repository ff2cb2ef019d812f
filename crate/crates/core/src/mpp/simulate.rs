use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{CompensatorModel, Event, MarkedPointPattern, ScenarioLattice, TimeGrid};
use crate::error::{Error, Result};

/// Independent substream for path `index`; results do not depend on scheduling.
fn path_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_pattern(grid: &TimeGrid, probs: &[Vec<f64>], rng: &mut ChaCha8Rng) -> MarkedPointPattern {
    let mut events = Vec::new();
    for (i, p) in probs.iter().enumerate() {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (e, &pe) in p.iter().enumerate() {
            acc += pe;
            if u < acc {
                events.push(Event {
                    time: grid.times()[i + 1],
                    mark: e,
                });
                break;
            }
        }
    }
    MarkedPointPattern::from_sorted(events)
}

/// Draws `count` patterns by per-step thinning. Path `k` uses its own
/// substream of `seed`, so output is bit-for-bit reproducible.
pub fn simulate_patterns(
    comp: &CompensatorModel,
    grid: &TimeGrid,
    count: usize,
    seed: u64,
) -> Result<Vec<MarkedPointPattern>> {
    comp.check_grid(grid)?;
    comp.check_feasible()?;
    let probs: Vec<Vec<f64>> = (0..comp.steps()).map(|i| comp.jump_probs(i)).collect();
    Ok((0..count)
        .into_par_iter()
        .map(|k| draw_pattern(grid, &probs, &mut path_rng(seed, k)))
        .collect())
}

/// `int int C dq = sum_events C(step_k, mark_k) - sum_i sum_e C(i, e) phi_i(e) dA_i`.
pub fn compensated_integral(
    pattern: &MarkedPointPattern,
    comp: &CompensatorModel,
    grid: &TimeGrid,
    integrand: &(dyn Fn(usize, usize) -> f64 + Sync),
) -> Result<f64> {
    comp.check_grid(grid)?;
    let mut jumps = 0.0;
    for ev in pattern.events() {
        let step = grid.step_ending_at(ev.time).ok_or_else(|| {
            Error::InvalidModel(format!("event time {} does not lie on the grid", ev.time))
        })?;
        if ev.mark >= comp.n_marks() {
            return Err(Error::InvalidModel(format!("event mark {} out of range", ev.mark)));
        }
        jumps += integrand(step, ev.mark);
    }
    Ok(jumps - compensator_total(comp, integrand))
}

fn compensator_total(comp: &CompensatorModel, integrand: &(dyn Fn(usize, usize) -> f64 + Sync)) -> f64 {
    let mut total = 0.0;
    for i in 0..comp.steps() {
        let da = comp.d_clock(i);
        for (e, &rate) in comp.phi(i).iter().enumerate() {
            if rate > 0.0 {
                total += integrand(i, e) * rate * da;
            }
        }
    }
    total
}

/// Monte Carlo estimate of `E[int int C dq]` with its standard error.
pub fn compensator_residual(
    comp: &CompensatorModel,
    grid: &TimeGrid,
    integrand: &(dyn Fn(usize, usize) -> f64 + Sync),
    paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if paths == 0 {
        return Err(Error::Precondition("compensator_residual needs at least one path".into()));
    }
    let patterns = simulate_patterns(comp, grid, paths, seed)?;
    let samples = patterns
        .par_iter()
        .map(|p| compensated_integral(p, comp, grid, integrand))
        .collect::<Result<Vec<f64>>>()?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, (var / n).sqrt()))
}

/// Exact lattice expectation of the compensated integral: each path weighted by
/// its reach probability.
pub fn lattice_compensated_mean(lattice: &ScenarioLattice, integrand: &(dyn Fn(usize, usize) -> f64 + Sync)) -> f64 {
    let n = lattice.steps();
    let mut acc = vec![0.0];
    for s in 0..n {
        let mut next = vec![0.0; lattice.nodes(s + 1).len()];
        for (i, node) in lattice.nodes(s).iter().enumerate() {
            for &c in &node.children {
                next[c] = acc[i]
                    + match lattice.node(s + 1, c).branch {
                        Some(super::Branch::Mark(e)) => integrand(s, e),
                        _ => 0.0,
                    };
            }
        }
        acc = next;
    }
    let comp_total = compensator_total(lattice.compensator(), integrand);
    lattice
        .nodes(n)
        .iter()
        .zip(&acc)
        .map(|(node, jumps)| node.reach_prob * (jumps - comp_total))
        .sum()
}

/// Empirical frequency of each mark on each step: `freq[i][e]`.
pub fn step_jump_frequencies(patterns: &[MarkedPointPattern], grid: &TimeGrid, n_marks: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0usize; n_marks]; grid.steps()];
    for p in patterns {
        for ev in p.events() {
            if let Some(step) = grid.step_ending_at(ev.time) {
                counts[step][ev.mark] += 1;
            }
        }
    }
    let n = patterns.len().max(1) as f64;
    counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpp::{build_lattice, MarkSpace};

    fn poisson(rate: f64, steps: usize) -> (CompensatorModel, TimeGrid) {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        let comp = CompensatorModel::homogeneous(MarkSpace::indexed(1).unwrap(), &[rate], &grid, 1.0).unwrap();
        (comp, grid)
    }

    #[test]
    fn zero_intensity_gives_empty_patterns() {
        let (comp, grid) = poisson(0.0, 10);
        let pats = simulate_patterns(&comp, &grid, 50, 3).unwrap();
        assert!(pats.iter().all(MarkedPointPattern::is_empty));
        assert_eq!(compensator_residual(&comp, &grid, &|_, _| 1.0, 100, 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn zero_count_is_empty() {
        let (comp, grid) = poisson(1.0, 10);
        assert!(simulate_patterns(&comp, &grid, 0, 3).unwrap().is_empty());
        assert!(compensator_residual(&comp, &grid, &|_, _| 1.0, 0, 1).is_err());
    }

    #[test]
    fn same_seed_same_patterns() {
        let (comp, grid) = poisson(3.0, 40);
        let a = simulate_patterns(&comp, &grid, 500, 42).unwrap();
        let b = simulate_patterns(&comp, &grid, 500, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_patterns(&comp, &grid, 500, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn compensated_integral_definition() {
        let (comp, grid) = poisson(2.0, 4);
        let pat = MarkedPointPattern::new(
            vec![Event { time: 0.25, mark: 0 }, Event { time: 0.75, mark: 0 }],
            1.0,
        )
        .unwrap();
        assert_eq!(compensated_integral(&pat, &comp, &grid, &|_, _| 0.0).unwrap(), 0.0);
        let v = compensated_integral(&pat, &comp, &grid, &|_, _| 1.0).unwrap();
        assert!((v - (2.0 - 2.0)).abs() < 1e-15);
        let off_grid = MarkedPointPattern::new(vec![Event { time: 0.3, mark: 0 }], 1.0).unwrap();
        assert!(compensated_integral(&off_grid, &comp, &grid, &|_, _| 1.0).is_err());
    }

    #[test]
    fn exhaustive_compensated_mean_vanishes() {
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let comp = CompensatorModel::homogeneous(MarkSpace::indexed(2).unwrap(), &[0.8, 1.7], &grid, 1.0).unwrap();
        let lat = build_lattice(&comp, &grid).unwrap();
        let c = |i: usize, e: usize| ((i * 7 + e * 3) as f64).sin() * 2.5 + 0.3;
        assert!(lattice_compensated_mean(&lat, &c).abs() < 1e-12);
        assert!(lattice_compensated_mean(&lat, &|_, _| 1.0).abs() < 1e-12);
    }
}
