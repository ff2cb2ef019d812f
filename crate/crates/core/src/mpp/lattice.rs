use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CompensatorModel, TimeGrid};
use crate::error::{Error, Result};

pub const DEFAULT_NODE_CAP: usize = 1_000_000;

/// Which branch led from a parent node to this node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    NoJump,
    Mark(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    pub branch: Option<Branch>,
    /// Conditional probability of this branch given the parent.
    pub branch_prob: f64,
    /// Probability of reaching this node from the root.
    pub reach_prob: f64,
    /// Indices into the next level; the no-jump child comes first, then one
    /// child per mark with positive jump probability.
    pub children: Vec<usize>,
}

/// Non-recombining scenario tree carrying the filtration of the discretized MPP.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioLattice {
    grid: TimeGrid,
    comp: CompensatorModel,
    levels: Vec<Vec<Node>>,
}

pub fn build_lattice(comp: &CompensatorModel, grid: &TimeGrid) -> Result<ScenarioLattice> {
    build_lattice_with_cap(comp, grid, DEFAULT_NODE_CAP)
}

pub fn build_lattice_with_cap(comp: &CompensatorModel, grid: &TimeGrid, cap: usize) -> Result<ScenarioLattice> {
    comp.check_grid(grid)?;
    comp.check_feasible()?;

    let mut required: u128 = 1;
    let mut width: u128 = 1;
    for i in 0..comp.steps() {
        let fan = 1 + comp.jump_probs(i).iter().filter(|p| **p > 0.0).count() as u128;
        width = width.saturating_mul(fan);
        required = required.saturating_add(width);
    }
    if required > cap as u128 {
        return Err(Error::NodeCapExceeded { required, cap });
    }

    let root = Node {
        parent: None,
        branch: None,
        branch_prob: 1.0,
        reach_prob: 1.0,
        children: Vec::new(),
    };
    let mut levels = vec![vec![root]];
    for i in 0..comp.steps() {
        let probs = comp.jump_probs(i);
        let jump_mass: f64 = probs.iter().sum();
        let p_none = 1.0 - jump_mass;
        let mut next = Vec::new();
        for (idx, node) in levels[i].iter_mut().enumerate() {
            let mut push = |branch, p: f64, next: &mut Vec<Node>| {
                node.children.push(next.len());
                next.push(Node {
                    parent: Some(idx),
                    branch: Some(branch),
                    branch_prob: p,
                    reach_prob: node.reach_prob * p,
                    children: Vec::new(),
                });
            };
            push(Branch::NoJump, p_none, &mut next);
            for (e, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    push(Branch::Mark(e), p, &mut next);
                }
            }
        }
        levels.push(next);
    }
    Ok(ScenarioLattice {
        grid: grid.clone(),
        comp: comp.clone(),
        levels,
    })
}

impl ScenarioLattice {
    /// Assembles a lattice from explicit node levels, checking tree structure
    /// and branch probabilities against the compensator.
    pub fn from_levels(comp: CompensatorModel, grid: TimeGrid, levels: Vec<Vec<Node>>) -> Result<Self> {
        comp.check_grid(&grid)?;
        comp.check_feasible()?;
        if levels.len() != grid.steps() + 1 || levels[0].len() != 1 {
            return Err(Error::InvalidModel("lattice level structure does not match grid".into()));
        }
        for (step, level) in levels.iter().enumerate() {
            for (idx, node) in level.iter().enumerate() {
                let bad = |msg: &str| Error::InvalidModel(format!("node {idx} at step {step}: {msg}"));
                if step == 0 {
                    if node.parent.is_some() || node.branch.is_some() {
                        return Err(bad("root must have no parent"));
                    }
                } else {
                    let parent = node.parent.ok_or_else(|| bad("missing parent"))?;
                    let pnode = levels[step - 1].get(parent).ok_or_else(|| bad("parent out of range"))?;
                    if !pnode.children.contains(&idx) {
                        return Err(bad("parent does not list node as child"));
                    }
                    let expected = match node.branch {
                        Some(Branch::NoJump) => 1.0 - comp.jump_probs(step - 1).iter().sum::<f64>(),
                        Some(Branch::Mark(e)) if e < comp.n_marks() => comp.jump_probs(step - 1)[e],
                        _ => return Err(bad("invalid branch")),
                    };
                    if node.branch_prob != expected {
                        return Err(bad("branch probability disagrees with compensator"));
                    }
                }
                if step == levels.len() - 1 && !node.children.is_empty() {
                    return Err(bad("terminal node has children"));
                }
                for &c in &node.children {
                    let child = levels
                        .get(step + 1)
                        .and_then(|l| l.get(c))
                        .ok_or_else(|| bad("child out of range"))?;
                    if child.parent != Some(idx) {
                        return Err(bad("child does not point back"));
                    }
                }
            }
        }
        Ok(Self { grid, comp, levels })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn compensator(&self) -> &CompensatorModel {
        &self.comp
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn n_marks(&self) -> usize {
        self.comp.n_marks()
    }

    pub fn levels(&self) -> &[Vec<Node>] {
        &self.levels
    }

    pub fn nodes(&self, step: usize) -> &[Node] {
        &self.levels[step]
    }

    pub fn node(&self, step: usize, idx: usize) -> &Node {
        &self.levels[step][idx]
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn time(&self, step: usize) -> f64 {
        self.grid.times()[step]
    }

    pub fn d_clock(&self, step: usize) -> f64 {
        self.comp.d_clock(step)
    }

    /// Child reached from `(step, idx)` along `branch`, if that branch exists.
    pub fn child(&self, step: usize, idx: usize, branch: Branch) -> Option<usize> {
        self.levels[step][idx]
            .children
            .iter()
            .copied()
            .find(|&c| self.levels[step + 1][c].branch == Some(branch))
    }

    /// Jumps `(step, mark)` on the path from the root to `(step, idx)`.
    pub fn history(&self, step: usize, idx: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let (mut s, mut i) = (step, idx);
        while s > 0 {
            let node = &self.levels[s][i];
            if let Some(Branch::Mark(e)) = node.branch {
                out.push((s - 1, e));
            }
            i = node.parent.expect("non-root node has a parent");
            s -= 1;
        }
        out.reverse();
        out
    }

    /// Node indices along the path from the root to `(step, idx)`; entry `s` is
    /// the node at step `s`.
    pub fn path_to(&self, step: usize, idx: usize) -> Vec<usize> {
        let mut out = vec![0; step + 1];
        let mut i = idx;
        for s in (0..=step).rev() {
            out[s] = i;
            if s > 0 {
                i = self.levels[s][i].parent.expect("non-root node has a parent");
            }
        }
        out
    }

    /// A zero-filled per-node field with this lattice's shape.
    pub fn zeros(&self) -> Vec<Vec<f64>> {
        self.levels.iter().map(|l| vec![0.0; l.len()]).collect()
    }

    /// Same lattice with node order shuffled within every level.
    pub fn permuted(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // perm[s][old] = new
        let perms: Vec<Vec<usize>> = self
            .levels
            .iter()
            .enumerate()
            .map(|(s, l)| {
                let mut p: Vec<usize> = (0..l.len()).collect();
                if s > 0 {
                    p.shuffle(&mut rng);
                }
                p
            })
            .collect();
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(s, level)| {
                let mut out = level.clone();
                for (old, node) in level.iter().enumerate() {
                    let mut n = node.clone();
                    n.parent = node.parent.map(|p| perms[s - 1][p]);
                    n.children = node.children.iter().map(|c| perms[s + 1][*c]).collect();
                    out[perms[s][old]] = n;
                }
                out
            })
            .collect();
        Self {
            grid: self.grid.clone(),
            comp: self.comp.clone(),
            levels,
        }
    }

    /// Conditional expectation of a next-step field at `(step, idx)`.
    pub fn cond_expectation(&self, step: usize, idx: usize, next: &[f64]) -> f64 {
        self.levels[step][idx]
            .children
            .iter()
            .map(|&c| self.levels[step + 1][c].branch_prob * next[c])
            .sum()
    }

    /// Conditional expectations `E_t[X]` at every node for a terminal field `X`.
    pub fn conditional_expectations(&self, terminal: &[f64]) -> Vec<Vec<f64>> {
        let n = self.steps();
        let mut out = self.zeros();
        out[n].copy_from_slice(terminal);
        for s in (0..n).rev() {
            for i in 0..self.levels[s].len() {
                out[s][i] = self.cond_expectation(s, i, &out[s + 1]);
            }
        }
        out
    }

    /// Expectation of a field at `step`, weighted by reach probabilities.
    pub fn expectation(&self, step: usize, values: &[f64]) -> f64 {
        self.levels[step]
            .iter()
            .zip(values)
            .map(|(n, v)| n.reach_prob * v)
            .sum()
    }
}
