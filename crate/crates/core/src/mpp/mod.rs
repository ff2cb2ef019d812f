//! Marked point processes with compensator `nu(dt, de) = phi_t(e) dA_t` on a
//! finite mark space, discretized on a time grid.
//!
//! On step `i` (the interval `(t_i, t_{i+1}]`) at most one event occurs; mark
//! `e` fires with probability `phi_i(e) * (A_{t_{i+1}} - A_{t_i})`. The same
//! per-step law drives both the exhaustive [`ScenarioLattice`] and the Monte
//! Carlo sampler [`simulate_patterns`].

mod format;
mod lattice;
mod simulate;

pub use format::{
    parse_lattice, parse_patterns, write_lattice, write_patterns, LATTICE_HEADER, PATTERNS_HEADER,
};
pub(crate) use format::fmt_f64;
pub use lattice::{build_lattice, build_lattice_with_cap, Branch, Node, ScenarioLattice, DEFAULT_NODE_CAP};
pub use simulate::{
    compensated_integral, compensator_residual, lattice_compensated_mean, simulate_patterns,
    step_jump_frequencies,
};

use crate::error::{Error, Result};

/// The finite mark space `E`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkSpace {
    marks: Vec<String>,
}

impl MarkSpace {
    pub fn new<S: Into<String>>(marks: impl IntoIterator<Item = S>) -> Result<Self> {
        let marks: Vec<String> = marks.into_iter().map(Into::into).collect();
        if marks.is_empty() {
            return Err(Error::InvalidModel("mark space is empty".into()));
        }
        for (i, m) in marks.iter().enumerate() {
            if m.is_empty() || m.chars().any(char::is_whitespace) {
                return Err(Error::InvalidModel(format!(
                    "mark identifier {m:?} must be nonempty without whitespace"
                )));
            }
            if marks[..i].contains(m) {
                return Err(Error::InvalidModel(format!("duplicate mark {m:?}")));
            }
        }
        Ok(Self { marks })
    }

    /// Marks named `e0, e1, ...`.
    pub fn indexed(count: usize) -> Result<Self> {
        Self::new((0..count).map(|i| format!("e{i}")))
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.marks
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.marks.iter().position(|m| m == name)
    }
}

/// Time partition `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidModel("grid needs at least one step".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidModel(format!("grid must start at 0, got {}", times[0])));
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidModel(format!(
                    "grid not strictly increasing at index {}",
                    i + 1
                )));
            }
        }
        Ok(Self { times })
    }

    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidModel(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidModel("grid needs at least one step".into()));
        }
        let mut times: Vec<f64> = (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect();
        times[steps] = horizon;
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Step index `i` such that `time == t_{i+1}`, i.e. the step on which an
    /// event stamped at `time` occurred.
    pub fn step_ending_at(&self, time: f64) -> Option<usize> {
        let idx = self
            .times
            .binary_search_by(|t| t.partial_cmp(&time).unwrap_or(std::cmp::Ordering::Less))
            .ok()?;
        idx.checked_sub(1)
    }
}

/// Compensator data: per-step intensities `phi_i(e)` and clock values `A_{t_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatorModel {
    marks: MarkSpace,
    phi: Vec<Vec<f64>>,
    clock: Vec<f64>,
    horizon: f64,
}

impl CompensatorModel {
    /// `phi[i][e]` is the intensity on step `i`; `clock` has one value per grid
    /// point with `clock[0] == 0`.
    pub fn new(marks: MarkSpace, phi: Vec<Vec<f64>>, clock: Vec<f64>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidModel(format!("horizon must be positive, got {horizon}")));
        }
        if clock.len() != phi.len() + 1 {
            return Err(Error::InvalidModel(format!(
                "clock has {} values but phi has {} steps",
                clock.len(),
                phi.len()
            )));
        }
        if phi.is_empty() {
            return Err(Error::InvalidModel("model needs at least one step".into()));
        }
        if clock[0] != 0.0 {
            return Err(Error::InvalidModel(format!("clock must start at 0, got {}", clock[0])));
        }
        for (i, w) in clock.windows(2).enumerate() {
            if !w[1].is_finite() {
                return Err(Error::InvalidModel(format!("clock value {} is not finite", i + 1)));
            }
            if w[1] < w[0] {
                return Err(Error::NonMonotoneClock {
                    index: i + 1,
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        for (i, row) in phi.iter().enumerate() {
            if row.len() != marks.len() {
                return Err(Error::InvalidModel(format!(
                    "phi row {i} has {} entries for {} marks",
                    row.len(),
                    marks.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidModel(format!("phi at step {i} has invalid rate {v}")));
            }
        }
        Ok(Self {
            marks,
            phi,
            clock,
            horizon,
        })
    }

    /// Time-homogeneous rates with clock `A_t = clock_scale * t` on `grid`.
    pub fn homogeneous(marks: MarkSpace, rates: &[f64], grid: &TimeGrid, clock_scale: f64) -> Result<Self> {
        let phi = vec![rates.to_vec(); grid.steps()];
        let clock = grid.times().iter().map(|t| clock_scale * t).collect();
        Self::new(marks, phi, clock, grid.horizon())
    }

    pub fn marks(&self) -> &MarkSpace {
        &self.marks
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn steps(&self) -> usize {
        self.phi.len()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn clock(&self) -> &[f64] {
        &self.clock
    }

    /// `A_T`.
    pub fn clock_total(&self) -> f64 {
        self.clock[self.clock.len() - 1]
    }

    /// `Delta A_i = A_{t_{i+1}} - A_{t_i}`.
    pub fn d_clock(&self, step: usize) -> f64 {
        self.clock[step + 1] - self.clock[step]
    }

    pub fn phi(&self, step: usize) -> &[f64] {
        &self.phi[step]
    }

    pub fn phi_table(&self) -> &[Vec<f64>] {
        &self.phi
    }

    pub fn max_d_clock(&self) -> f64 {
        (0..self.steps()).map(|i| self.d_clock(i)).fold(0.0, f64::max)
    }

    /// Per-mark jump probabilities `phi_i(e) * Delta A_i` on step `i`.
    pub fn jump_probs(&self, step: usize) -> Vec<f64> {
        let da = self.d_clock(step);
        self.phi[step].iter().map(|r| r * da).collect()
    }

    /// Rejects the first step whose total jump probability exceeds one.
    pub fn check_feasible(&self) -> Result<()> {
        for i in 0..self.steps() {
            let mass: f64 = self.jump_probs(i).iter().sum();
            if mass > 1.0 {
                return Err(Error::InfeasibleStep { step: i, mass });
            }
        }
        Ok(())
    }

    pub(crate) fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if grid.steps() != self.steps() {
            return Err(Error::InvalidModel(format!(
                "grid has {} steps but compensator has {}",
                grid.steps(),
                self.steps()
            )));
        }
        if grid.horizon() != self.horizon {
            return Err(Error::InvalidModel(format!(
                "grid horizon {} differs from model horizon {}",
                grid.horizon(),
                self.horizon
            )));
        }
        Ok(())
    }
}

/// One event of a marked point pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub mark: usize,
}

/// A realized marked point pattern on `(0, T]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MarkedPointPattern {
    events: Vec<Event>,
}

impl MarkedPointPattern {
    pub fn new(events: Vec<Event>, horizon: f64) -> Result<Self> {
        for (i, ev) in events.iter().enumerate() {
            if !(ev.time > 0.0 && ev.time <= horizon) {
                return Err(Error::InvalidModel(format!(
                    "event {i} at time {} outside (0, {horizon}]",
                    ev.time
                )));
            }
            if i > 0 && !(ev.time > events[i - 1].time) {
                return Err(Error::InvalidModel(format!(
                    "event times must increase strictly (event {i})"
                )));
            }
        }
        Ok(Self { events })
    }

    pub(crate) fn from_sorted(events: Vec<Event>) -> Self {
        Self { events }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mark_space_rejects_duplicates_and_empty() {
        assert!(MarkSpace::new(Vec::<String>::new()).is_err());
        assert!(MarkSpace::new(["a", "a"]).is_err());
        assert!(MarkSpace::new(["a b"]).is_err());
        assert_eq!(MarkSpace::new(["a", "b"]).unwrap().len(), 2);
    }

    #[test]
    fn clock_must_be_monotone() {
        let marks = MarkSpace::indexed(1).unwrap();
        let err = CompensatorModel::new(marks, vec![vec![1.0]; 2], vec![0.0, 0.5, 0.4], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonMonotoneClock { index: 2, .. }));
    }

    #[test]
    fn infeasible_step_is_named() {
        let marks = MarkSpace::indexed(2).unwrap();
        let comp = CompensatorModel::new(marks, vec![vec![0.6, 0.6]], vec![0.0, 1.0], 1.0).unwrap();
        let err = comp.check_feasible().unwrap_err();
        assert!(err.to_string().starts_with("step 0 infeasible"), "{err}");
    }

    #[test]
    fn pattern_times_strictly_increase() {
        let ev = |time| Event { time, mark: 0 };
        assert!(MarkedPointPattern::new(vec![ev(0.5), ev(0.5)], 1.0).is_err());
        assert!(MarkedPointPattern::new(vec![ev(0.0)], 1.0).is_err());
        assert!(MarkedPointPattern::new(vec![ev(0.5), ev(1.0)], 1.0).is_ok());
    }

    #[test]
    fn step_lookup_by_event_time() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(grid.step_ending_at(0.25), Some(0));
        assert_eq!(grid.step_ending_at(1.0), Some(3));
        assert_eq!(grid.step_ending_at(0.0), None);
        assert_eq!(grid.step_ending_at(0.3), None);
    }
}
