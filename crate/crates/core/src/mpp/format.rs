//! Line-oriented text format for lattices and pattern sets.
//!
//! Lattice files:
//!
//! ```text
//! # mfrbsde-lattice v1
//! marks <k> <name_0> ... <name_{k-1}>
//! grid <t_0> ... <t_n>
//! clock <A_0> ... <A_n>
//! phi <step> <rate_0> ... <rate_{k-1}>        (one line per step)
//! level <step> <node count>
//! node <idx> <parent|-> <branch> <branch_prob> <reach_prob> <children|->
//! ```
//!
//! `branch` is `-` for the root, `n` for no jump and `m<e>` for mark `e`;
//! children are comma separated. Pattern files share the `marks`/`grid`
//! header and continue with `patterns <count>`, then per pattern
//! `pattern <idx> <events>` followed by `event <time> <mark>` lines.
//! Reals are written in Rust's shortest round-trip form, so parsing recovers
//! every value bit for bit.

use super::{Branch, CompensatorModel, Event, MarkSpace, MarkedPointPattern, Node, ScenarioLattice, TimeGrid};
use crate::error::{Error, Result};

pub const LATTICE_HEADER: &str = "# mfrbsde-lattice v1";
pub const PATTERNS_HEADER: &str = "# mfrbsde-patterns v1";

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

pub fn write_lattice(lattice: &ScenarioLattice) -> String {
    let comp = lattice.compensator();
    let mut out = String::new();
    out.push_str(LATTICE_HEADER);
    out.push('\n');
    out.push_str(&format!("marks {} {}\n", comp.n_marks(), comp.marks().names().join(" ")));
    out.push_str(&format!("grid {}\n", join(lattice.grid().times())));
    out.push_str(&format!("clock {}\n", join(comp.clock())));
    for i in 0..comp.steps() {
        out.push_str(&format!("phi {i} {}\n", join(comp.phi(i))));
    }
    for (s, level) in lattice.levels().iter().enumerate() {
        out.push_str(&format!("level {s} {}\n", level.len()));
        for (idx, node) in level.iter().enumerate() {
            let parent = node.parent.map_or("-".to_string(), |p| p.to_string());
            let branch = match node.branch {
                None => "-".to_string(),
                Some(Branch::NoJump) => "n".to_string(),
                Some(Branch::Mark(e)) => format!("m{e}"),
            };
            let children = if node.children.is_empty() {
                "-".to_string()
            } else {
                node.children.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            out.push_str(&format!(
                "node {idx} {parent} {branch} {} {} {children}\n",
                fmt_f64(node.branch_prob),
                fmt_f64(node.reach_prob)
            ));
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    /// Next non-empty line split into tokens, requiring the given keyword.
    fn expect(&mut self, keyword: &str) -> Result<Vec<&'a str>> {
        loop {
            let Some((n, raw)) = self.inner.next() else {
                return Err(self.err(format!("unexpected end of input, expected `{keyword}`")));
            };
            self.line = n + 1;
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let mut toks = raw.split_whitespace();
            let head = toks.next().unwrap_or_default();
            if head != keyword {
                return Err(self.err(format!("expected `{keyword}`, found `{head}`")));
            }
            return Ok(toks.collect());
        }
    }

    fn header(&mut self, header: &str) -> Result<()> {
        let Some((n, raw)) = self.inner.next() else {
            return Err(self.err("empty input"));
        };
        self.line = n + 1;
        if raw.trim() != header {
            return Err(self.err(format!("expected header `{header}`")));
        }
        Ok(())
    }

    fn f64s(&self, toks: &[&str]) -> Result<Vec<f64>> {
        toks.iter()
            .map(|t| t.parse::<f64>().map_err(|_| self.err(format!("bad real `{t}`"))))
            .collect()
    }

    fn usize(&self, tok: Option<&&str>) -> Result<usize> {
        let t = tok.ok_or_else(|| self.err("missing integer"))?;
        t.parse().map_err(|_| self.err(format!("bad integer `{t}`")))
    }

    fn finish(&mut self) -> Result<()> {
        for (n, raw) in self.inner.by_ref() {
            if !raw.trim().is_empty() {
                self.line = n + 1;
                return Err(self.err("trailing content"));
            }
        }
        Ok(())
    }
}

fn parse_marks_grid(lines: &mut Lines<'_>) -> Result<(MarkSpace, TimeGrid)> {
    let toks = lines.expect("marks")?;
    let k = lines.usize(toks.first())?;
    if toks.len() != k + 1 {
        return Err(lines.err("mark count does not match names"));
    }
    let marks = MarkSpace::new(toks[1..].iter().copied())?;
    let toks = lines.expect("grid")?;
    let grid = TimeGrid::new(lines.f64s(&toks)?)?;
    Ok((marks, grid))
}

pub fn parse_lattice(text: &str) -> Result<ScenarioLattice> {
    let mut lines = Lines::new(text);
    lines.header(LATTICE_HEADER)?;
    let (marks, grid) = parse_marks_grid(&mut lines)?;
    let toks = lines.expect("clock")?;
    let clock = lines.f64s(&toks)?;
    let mut phi = Vec::with_capacity(grid.steps());
    for i in 0..grid.steps() {
        let toks = lines.expect("phi")?;
        if lines.usize(toks.first())? != i {
            return Err(lines.err(format!("expected phi row {i}")));
        }
        phi.push(lines.f64s(&toks[1..])?);
    }
    let comp = CompensatorModel::new(marks, phi, clock, grid.horizon())?;
    let mut levels = Vec::with_capacity(grid.steps() + 1);
    for s in 0..=grid.steps() {
        let toks = lines.expect("level")?;
        if lines.usize(toks.first())? != s {
            return Err(lines.err(format!("expected level {s}")));
        }
        let count = lines.usize(toks.get(1))?;
        let mut level = Vec::with_capacity(count);
        for idx in 0..count {
            let toks = lines.expect("node")?;
            if toks.len() != 6 || lines.usize(toks.first())? != idx {
                return Err(lines.err(format!("malformed node record {idx}")));
            }
            let parent = match toks[1] {
                "-" => None,
                t => Some(lines.usize(Some(&t))?),
            };
            let branch = match toks[2] {
                "-" => None,
                "n" => Some(Branch::NoJump),
                t if t.starts_with('m') => Some(Branch::Mark(lines.usize(Some(&&t[1..]))?)),
                t => return Err(lines.err(format!("bad branch `{t}`"))),
            };
            let probs = lines.f64s(&toks[3..5])?;
            let children = match toks[5] {
                "-" => Vec::new(),
                t => t
                    .split(',')
                    .map(|c| lines.usize(Some(&c)))
                    .collect::<Result<Vec<_>>>()?,
            };
            level.push(Node {
                parent,
                branch,
                branch_prob: probs[0],
                reach_prob: probs[1],
                children,
            });
        }
        levels.push(level);
    }
    lines.finish()?;
    ScenarioLattice::from_levels(comp, grid, levels)
}

pub fn write_patterns(marks: &MarkSpace, grid: &TimeGrid, patterns: &[MarkedPointPattern]) -> String {
    let mut out = String::new();
    out.push_str(PATTERNS_HEADER);
    out.push('\n');
    out.push_str(&format!("marks {} {}\n", marks.len(), marks.names().join(" ")));
    out.push_str(&format!("grid {}\n", join(grid.times())));
    out.push_str(&format!("patterns {}\n", patterns.len()));
    for (k, p) in patterns.iter().enumerate() {
        out.push_str(&format!("pattern {k} {}\n", p.len()));
        for ev in p.events() {
            out.push_str(&format!("event {} {}\n", fmt_f64(ev.time), ev.mark));
        }
    }
    out
}

pub fn parse_patterns(text: &str) -> Result<(MarkSpace, TimeGrid, Vec<MarkedPointPattern>)> {
    let mut lines = Lines::new(text);
    lines.header(PATTERNS_HEADER)?;
    let (marks, grid) = parse_marks_grid(&mut lines)?;
    let toks = lines.expect("patterns")?;
    let count = lines.usize(toks.first())?;
    let mut patterns = Vec::with_capacity(count);
    for k in 0..count {
        let toks = lines.expect("pattern")?;
        if lines.usize(toks.first())? != k {
            return Err(lines.err(format!("expected pattern {k}")));
        }
        let n = lines.usize(toks.get(1))?;
        let mut events = Vec::with_capacity(n);
        for _ in 0..n {
            let toks = lines.expect("event")?;
            if toks.len() != 2 {
                return Err(lines.err("malformed event"));
            }
            let time = lines.f64s(&toks[..1])?[0];
            let mark = lines.usize(toks.get(1))?;
            if mark >= marks.len() {
                return Err(lines.err(format!("mark {mark} out of range")));
            }
            events.push(Event { time, mark });
        }
        patterns.push(MarkedPointPattern::new(events, grid.horizon())?);
    }
    lines.finish()?;
    Ok((marks, grid, patterns))
}
