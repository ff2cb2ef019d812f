//! Discrete probability laws on the real line and the p-Wasserstein distance.

use crate::error::{Error, Result};
use crate::mpp::ScenarioLattice;

/// Weight tolerance for the total mass of a law.
pub const MASS_TOL: f64 = 1e-12;

/// A finitely supported law: atoms sorted by value, equal values merged,
/// zero-weight atoms dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw {
    atoms: Vec<(f64, f64)>,
}

impl EmpiricalLaw {
    pub fn new(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut atoms: Vec<(f64, f64)> = atoms.into_iter().collect();
        let mut total = 0.0;
        for &(x, w) in &atoms {
            if !x.is_finite() {
                return Err(Error::InvalidLaw(format!("atom value {x} is not finite")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidLaw(format!("atom weight {w} is not a nonnegative real")));
            }
            total += w;
        }
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidLaw(format!("weights sum to {total}, not 1")));
        }
        atoms.retain(|a| a.1 > 0.0);
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (x, w) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == x => last.1 += w,
                _ => merged.push((x, w)),
            }
        }
        Ok(Self { atoms: merged })
    }

    pub fn dirac(x: f64) -> Self {
        Self { atoms: vec![(x, 1.0)] }
    }

    /// The point mass at zero.
    pub fn delta_zero() -> Self {
        Self::dirac(0.0)
    }

    /// Uniform law on the given values.
    pub fn uniform(values: &[f64]) -> Result<Self> {
        let w = 1.0 / values.len() as f64;
        Self::new(values.iter().map(|&x| (x, w)))
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(x, w)| x * w).sum()
    }

    /// `sum_k w_k |x_k|^p`.
    pub fn abs_moment(&self, p: f64) -> f64 {
        self.atoms.iter().map(|(x, w)| w * x.abs().powf(p)).sum()
    }
}

/// Exact `W_p` between two laws on the real line via the quantile coupling,
/// integrated over the merged partition of cumulative weights.
pub fn wasserstein(mu: &EmpiricalLaw, nu: &EmpiricalLaw, p: f64) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidLaw(format!("Wasserstein order must be >= 1, got {p}")));
    }
    let (a, b) = (mu.atoms(), nu.atoms());
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    loop {
        let m = ra.min(rb);
        let d = (a[i].0 - b[j].0).abs();
        if d > 0.0 {
            cost += m * if p == 1.0 { d } else { d.powf(p) };
        }
        ra -= m;
        rb -= m;
        // slivers below rounding level are treated as exhausted
        let adv_a = ra <= 1e-15;
        let adv_b = rb <= 1e-15;
        if adv_a {
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1;
        }
        if adv_b {
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    Ok(if p == 1.0 { cost } else { cost.powf(1.0 / p) })
}

/// Law of a node field at `step`: atoms are node values weighted by reach
/// probability, merged on exactly equal values.
pub fn node_law(lattice: &ScenarioLattice, step: usize, values: &[f64]) -> Result<EmpiricalLaw> {
    let nodes = lattice.nodes(step);
    if values.len() != nodes.len() {
        return Err(Error::MissingValue {
            step,
            node: values.len().min(nodes.len()),
        });
    }
    if let Some(node) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::MissingValue { step, node });
    }
    EmpiricalLaw::new(nodes.iter().zip(values).map(|(n, &v)| (v, n.reach_prob)))
}

/// Laws of a full node field, one per step.
pub fn node_laws(lattice: &ScenarioLattice, values: &[Vec<f64>]) -> Result<Vec<EmpiricalLaw>> {
    (0..=lattice.steps()).map(|s| node_law(lattice, s, &values[s])).collect()
}
