//! Generators `f(t, y, u, mu)`, obstacles `h(t, y, mu)` and terminal payoffs,
//! each declared together with the constants the solvers and the contraction
//! analysis rely on. Probes check the declarations numerically.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::laws::{node_law, wasserstein, EmpiricalLaw};
use crate::mpp::{CompensatorModel, ScenarioLattice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Lipschitz,
    QuadraticExponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convexity {
    Convex,
    Concave,
    None,
}

/// Arguments of one generator evaluation. `phi` is the intensity on the
/// current step, needed by generators built from `j_lambda`.
#[derive(Debug, Clone, Copy)]
pub struct DriverPoint<'a> {
    pub step: usize,
    pub time: f64,
    pub y: f64,
    pub u: &'a [f64],
    pub law: &'a EmpiricalLaw,
    pub phi: &'a [f64],
}

type DriverFn = Arc<dyn Fn(&DriverPoint<'_>) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct DriverSpec {
    name: String,
    eval: DriverFn,
    /// Lipschitz constant in `(y, mu)` w.r.t. `|.| + W_1`.
    pub lip_y_mu: f64,
    /// Lipschitz constant in `(y, u, mu)` when the driver is Lipschitz in `u`.
    pub lip_full: Option<f64>,
    /// Exponential-growth scale.
    pub lambda: Option<f64>,
    /// Nonnegative growth process `alpha`, per step; empty means zero and a
    /// single entry is constant.
    pub alpha: Vec<f64>,
    pub convexity: Convexity,
    pub regime: Regime,
    /// Whether the generator reads the law argument.
    pub reads_law: bool,
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverSpec")
            .field("name", &self.name)
            .field("lip_y_mu", &self.lip_y_mu)
            .field("lip_full", &self.lip_full)
            .field("lambda", &self.lambda)
            .field("regime", &self.regime)
            .field("reads_law", &self.reads_law)
            .finish()
    }
}

impl DriverSpec {
    /// A Lipschitz driver with declared constants `beta` (in `(y, mu)`) and
    /// `c_f` (in `(y, u, mu)`).
    pub fn lipschitz(
        name: impl Into<String>,
        beta: f64,
        c_f: f64,
        reads_law: bool,
        f: impl Fn(&DriverPoint<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(f),
            lip_y_mu: beta,
            lip_full: Some(c_f),
            lambda: None,
            alpha: Vec::new(),
            convexity: Convexity::None,
            regime: Regime::Lipschitz,
            reads_law,
        }
    }

    /// A quadratic-exponential driver with growth constants `(lambda, beta, alpha)`.
    pub fn quadratic(
        name: impl Into<String>,
        lambda: f64,
        beta: f64,
        alpha: Vec<f64>,
        convexity: Convexity,
        reads_law: bool,
        f: impl Fn(&DriverPoint<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(f),
            lip_y_mu: beta,
            lip_full: None,
            lambda: Some(lambda),
            alpha,
            convexity,
            regime: Regime::QuadraticExponential,
            reads_law,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_alpha(mut self, alpha: Vec<f64>) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn alpha_at(&self, step: usize) -> f64 {
        match self.alpha.len() {
            0 => 0.0,
            1 => self.alpha[0],
            _ => self.alpha[step],
        }
    }

    /// Checks that the declared regime has its constants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Precondition(format!("driver `{}`: {m}", self.name)));
        if !(self.lip_y_mu >= 0.0) {
            return bad("beta must be >= 0");
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return bad("alpha must be nonnegative");
        }
        match self.regime {
            Regime::Lipschitz if !self.lip_full.is_some_and(|c| c >= 0.0) => bad("Lipschitz regime needs C_f >= 0"),
            Regime::QuadraticExponential if !self.lambda.is_some_and(|l| l > 0.0) => {
                bad("quadratic-exponential regime needs lambda > 0")
            }
            _ => Ok(()),
        }
    }

    /// Constant governing the implicit one-step solve in `y`.
    pub fn implicit_lipschitz(&self) -> f64 {
        match self.regime {
            Regime::Lipschitz => self.lip_full.unwrap_or(self.lip_y_mu).max(self.lip_y_mu),
            Regime::QuadraticExponential => self.lip_y_mu,
        }
    }

    pub fn call(&self, point: &DriverPoint<'_>) -> f64 {
        (self.eval)(point)
    }
}

/// Evaluates `f`, rejecting non-finite results.
pub fn eval_driver(spec: &DriverSpec, point: &DriverPoint<'_>) -> Result<f64> {
    let v = spec.call(point);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteDriver {
            driver: spec.name.clone(),
            step: point.step,
            y: point.y,
            u: point.u.to_vec(),
        })
    }
}

/// `sum_e (exp(lambda u(e)) - 1 - lambda u(e)) phi(e)` without error checks.
pub fn j_lambda_raw(phi: &[f64], u: &[f64], lambda: f64) -> f64 {
    phi.iter()
        .zip(u)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, &x)| {
            let z = lambda * x;
            r * (z.exp_m1() - z)
        })
        .sum()
}

/// The predictable process `j_lambda(t, u)` on step `step`.
pub fn j_lambda(comp: &CompensatorModel, step: usize, u: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Precondition(format!("j_lambda needs lambda > 0, got {lambda}")));
    }
    let v = j_lambda_raw(comp.phi(step), u, lambda);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::ExponentialOverflow {
            context: format!("j_lambda at step {step} with lambda {lambda}"),
        })
    }
}

/// Bundled generators.
pub mod library {
    use super::*;

    pub fn zero() -> DriverSpec {
        DriverSpec::lipschitz("zero", 0.0, 0.0, false, |_| 0.0)
    }

    /// `f = c`.
    pub fn constant(c: f64) -> DriverSpec {
        DriverSpec::lipschitz("constant", 0.0, 0.0, false, move |_| c).with_alpha(vec![c.abs()])
    }

    /// `f = a y + c`.
    pub fn linear(a: f64, c: f64) -> DriverSpec {
        DriverSpec::lipschitz("linear", a.abs(), a.abs(), false, move |p| a * p.y + c).with_alpha(vec![c.abs()])
    }

    /// `f = a y + b mean(mu) + c`.
    pub fn linear_mean(a: f64, b: f64, c: f64) -> DriverSpec {
        let k = a.abs().max(b.abs());
        DriverSpec::lipschitz("linear_mean", k, k, true, move |p| a * p.y + b * p.law.mean() + c)
            .with_alpha(vec![c.abs()])
    }

    /// `f = a sin(y) + b mean(mu) + kappa sum_e phi(e) tanh(u(e)) + c`; `rate_bound`
    /// bounds `sum_e phi_t(e)` and enters the `u`-Lipschitz constant. With
    /// `|kappa| <= 1` the one-step scheme is monotone once `sum_e phi dA <= 1/2`.
    pub fn smooth_lipschitz(a: f64, b: f64, kappa: f64, c: f64, rate_bound: f64) -> DriverSpec {
        let beta = a.abs().max(b.abs());
        let c_f = beta.max(kappa.abs() * rate_bound.max(0.0).sqrt());
        DriverSpec::lipschitz("smooth_lipschitz", beta, c_f, b != 0.0, move |p| {
            let jump: f64 = p.phi.iter().zip(p.u).map(|(r, x)| r * x.tanh()).sum();
            a * p.y.sin() + b * p.law.mean() + kappa * jump + c
        })
        .with_alpha(vec![c.abs()])
    }

    /// The growth-boundary generator `f = j_lambda(t, u) / lambda`.
    pub fn jump_entropic(lambda: f64) -> DriverSpec {
        DriverSpec::quadratic("jump_entropic", lambda, 0.0, Vec::new(), Convexity::Convex, false, move |p| {
            j_lambda_raw(p.phi, p.u, lambda) / lambda
        })
    }

    /// `f = j_lambda(t, u) / lambda + a y + b mean(mu) + c`.
    pub fn quadratic_mean(lambda: f64, a: f64, b: f64, c: f64) -> DriverSpec {
        DriverSpec::quadratic(
            "quadratic_mean",
            lambda,
            a.abs().max(b.abs()),
            vec![c.abs()],
            Convexity::Convex,
            b != 0.0,
            move |p| j_lambda_raw(p.phi, p.u, lambda) / lambda + a * p.y + b * p.law.mean() + c,
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ObstaclePoint<'a> {
    pub step: usize,
    pub time: f64,
    pub y: f64,
    pub law: &'a EmpiricalLaw,
}

type ObstacleFn = Arc<dyn Fn(&ObstaclePoint<'_>) -> f64 + Send + Sync>;

/// Barrier `h(t, y, mu)` with Lipschitz constants `gamma1` in `y` and `gamma2`
/// in the law.
#[derive(Clone)]
pub struct ObstacleSpec {
    name: String,
    eval: ObstacleFn,
    pub gamma1: f64,
    pub gamma2: f64,
    /// True when the barrier depends on `y` or `mu`.
    pub coupled: bool,
}

impl fmt::Debug for ObstacleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObstacleSpec")
            .field("name", &self.name)
            .field("gamma1", &self.gamma1)
            .field("gamma2", &self.gamma2)
            .finish()
    }
}

impl ObstacleSpec {
    pub fn new(
        name: impl Into<String>,
        gamma1: f64,
        gamma2: f64,
        f: impl Fn(&ObstaclePoint<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(f),
            gamma1,
            gamma2,
            coupled: gamma1 != 0.0 || gamma2 != 0.0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// No barrier (`h = -inf`).
    pub fn none() -> Self {
        Self::new("none", 0.0, 0.0, |_| f64::NEG_INFINITY)
    }

    pub fn constant(c: f64) -> Self {
        Self::new("constant", 0.0, 0.0, move |_| c)
    }

    /// `h = a y + b mean(mu) + c + d t`.
    pub fn affine(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self::new("affine", a.abs(), b.abs(), move |p| a * p.y + b * p.law.mean() + c + d * p.time)
    }
}

pub fn eval_obstacle(spec: &ObstacleSpec, step: usize, time: f64, y: f64, mu: &EmpiricalLaw) -> f64 {
    (spec.eval)(&ObstaclePoint { step, time, y, law: mu })
}

/// Obstacle values at every node for a frozen process `y` with laws `laws`.
pub fn obstacle_field(
    spec: &ObstacleSpec,
    lattice: &ScenarioLattice,
    y: &[Vec<f64>],
    laws: &[EmpiricalLaw],
) -> Vec<Vec<f64>> {
    (0..=lattice.steps())
        .map(|s| {
            y[s].iter()
                .map(|&v| eval_obstacle(spec, s, lattice.time(s), v, &laws[s]))
                .collect()
        })
        .collect()
}

type TerminalFn = Arc<dyn Fn(&[(usize, usize)]) -> f64 + Send + Sync>;

/// Terminal payoff `xi` as a function of the jump history `(step, mark)`.
#[derive(Clone)]
pub struct TerminalSpec {
    name: String,
    eval: TerminalFn,
}

impl fmt::Debug for TerminalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalSpec").field("name", &self.name).finish()
    }
}

impl TerminalSpec {
    pub fn new(name: impl Into<String>, f: impl Fn(&[(usize, usize)]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(f),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn constant(x: f64) -> Self {
        Self::new("constant", move |_| x)
    }

    /// `xi = offset + scale * N_T`.
    pub fn event_count(offset: f64, scale: f64) -> Self {
        Self::new("event_count", move |h| offset + scale * h.len() as f64)
    }

    /// `xi = offset + sum over events of weights[mark]`.
    pub fn mark_weighted(offset: f64, weights: Vec<f64>) -> Self {
        Self::new("mark_weighted", move |h| {
            offset + h.iter().map(|(_, e)| weights.get(*e).copied().unwrap_or(0.0)).sum::<f64>()
        })
    }

    pub fn eval(&self, history: &[(usize, usize)]) -> f64 {
        (self.eval)(history)
    }

    /// `xi` at every terminal node of the lattice.
    pub fn values(&self, lattice: &ScenarioLattice) -> Vec<f64> {
        let n = lattice.steps();
        (0..lattice.nodes(n).len())
            .map(|i| self.eval(&lattice.history(n, i)))
            .collect()
    }
}

/// Terminal nodes where `xi < h(T, xi, P_xi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub violations: Vec<(usize, f64, f64)>,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn terminal_consistency(
    obstacle: &ObstacleSpec,
    terminal: &TerminalSpec,
    lattice: &ScenarioLattice,
) -> Result<ConsistencyReport> {
    let n = lattice.steps();
    let xi = terminal.values(lattice);
    let law = node_law(lattice, n, &xi)?;
    let t = lattice.time(n);
    let violations = xi
        .iter()
        .enumerate()
        .filter_map(|(i, &x)| {
            let h = eval_obstacle(obstacle, n, t, x, &law);
            (x < h).then_some((i, x, h))
        })
        .collect();
    Ok(ConsistencyReport { violations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeViolation {
    pub step: usize,
    pub y: f64,
    pub u: Vec<f64>,
    pub law_mean: f64,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    pub samples: usize,
    pub violations: Vec<EnvelopeViolation>,
}

impl EnvelopeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn random_law(rng: &mut ChaCha8Rng) -> EmpiricalLaw {
    let k = rng.gen_range(1..=4);
    let raw: Vec<(f64, f64)> = (0..k).map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(0.05..1.0))).collect();
    let total: f64 = raw.iter().map(|a| a.1).sum();
    let mut atoms: Vec<(f64, f64)> = raw.into_iter().map(|(x, w)| (x, w / total)).collect();
    let rest: f64 = atoms[1..].iter().map(|a| a.1).sum();
    atoms[0].1 = 1.0 - rest;
    EmpiricalLaw::new(atoms).expect("normalized weights")
}

/// Samples `(t, y, u, mu)` and reports violations of
/// `-j(-u)/lambda - alpha - beta(|y| + W_1(mu, delta_0)) <= f <= j(u)/lambda + alpha + beta(...)`.
/// The first probe at each step is `y = 0, u = 0, mu = delta_0`.
pub fn envelope_check(spec: &DriverSpec, comp: &CompensatorModel, samples: usize, seed: u64) -> Result<EnvelopeReport> {
    let lambda = spec
        .lambda
        .ok_or_else(|| Error::Precondition(format!("driver `{}` declares no lambda", spec.name)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = comp.n_marks();
    let mut violations = Vec::new();
    let delta0 = EmpiricalLaw::delta_zero();
    let total = samples + comp.steps();
    for s in 0..total {
        let (step, y, u, law) = if s < comp.steps() {
            (s, 0.0, vec![0.0; k], delta0.clone())
        } else {
            let step = rng.gen_range(0..comp.steps());
            let y = rng.gen_range(-3.0..3.0);
            let u: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            (step, y, u, random_law(&mut rng))
        };
        let phi = comp.phi(step);
        let point = DriverPoint {
            step,
            time: comp.clock()[step],
            y,
            u: &u,
            law: &law,
            phi,
        };
        let value = eval_driver(spec, &point)?;
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let growth = spec.alpha_at(step) + spec.lip_y_mu * (y.abs() + wasserstein(&law, &delta0, 1.0)?);
        let upper = j_lambda(comp, step, &u, lambda)? / lambda + growth;
        let lower = -j_lambda(comp, step, &neg, lambda)? / lambda - growth;
        let tol = 1e-12 * (1.0 + upper.abs().max(lower.abs()));
        if value > upper + tol || value < lower - tol {
            violations.push(EnvelopeViolation {
                step,
                y,
                u,
                law_mean: law.mean(),
                value,
                lower,
                upper,
            });
        }
    }
    Ok(EnvelopeReport {
        samples: total,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub samples: usize,
    /// Smallest `bound - |difference|` over all probes.
    pub worst_slack: f64,
    pub violations: usize,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Checks `|f(t,y1,u1,mu1) - f(t,y2,u2,mu2)|` against the declared constants:
/// `beta (|dy| + W_1)` with `u1 = u2`, and, for Lipschitz drivers,
/// `C_f (|dy| + ||du||_nu + W_1)`.
pub fn lipschitz_probe_driver(spec: &DriverSpec, comp: &CompensatorModel, samples: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = comp.n_marks();
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..samples {
        let step = rng.gen_range(0..comp.steps());
        let phi = comp.phi(step);
        let time = comp.clock()[step];
        let (y1, y2) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let u1: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let u2: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (m1, m2) = (random_law(&mut rng), random_law(&mut rng));
        let w1 = wasserstein(&m1, &m2, 1.0)?;
        let f = |y: f64, u: &[f64], law: &EmpiricalLaw| {
            eval_driver(spec, &DriverPoint { step, time, y, u, law, phi })
        };
        let diff = (f(y1, &u1, &m1)? - f(y2, &u1, &m2)?).abs();
        let bound = spec.lip_y_mu * ((y1 - y2).abs() + w1);
        let slack = bound - diff;
        let mut ok = slack >= -1e-12;
        worst = worst.min(slack);
        if let (Regime::Lipschitz, Some(c_f)) = (spec.regime, spec.lip_full) {
            let du: f64 = phi.iter().zip(u1.iter().zip(&u2)).map(|(r, (a, b))| r * (a - b).powi(2)).sum::<f64>().sqrt();
            let diff = (f(y1, &u1, &m1)? - f(y2, &u2, &m2)?).abs();
            let slack = c_f * ((y1 - y2).abs() + du + w1) - diff;
            ok &= slack >= -1e-12;
            worst = worst.min(slack);
        }
        if !ok {
            violations += 1;
        }
    }
    Ok(ProbeReport {
        samples,
        worst_slack: worst,
        violations,
    })
}

/// Checks `|h(t,y1,mu1) - h(t,y2,mu2)| <= gamma1 |dy| + gamma2 W_1(mu1, mu2)`.
pub fn lipschitz_probe_obstacle(spec: &ObstacleSpec, lattice: &ScenarioLattice, samples: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..samples {
        let step = rng.gen_range(0..=lattice.steps());
        let t = lattice.time(step);
        let (y1, y2) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let (m1, m2) = (random_law(&mut rng), random_law(&mut rng));
        let h1 = eval_obstacle(spec, step, t, y1, &m1);
        let h2 = eval_obstacle(spec, step, t, y2, &m2);
        let diff = if h1 == h2 { 0.0 } else { (h1 - h2).abs() };
        let slack = spec.gamma1 * (y1 - y2).abs() + spec.gamma2 * wasserstein(&m1, &m2, 1.0)? - diff;
        worst = worst.min(slack);
        if !(slack >= -1e-12) {
            violations += 1;
        }
    }
    Ok(ProbeReport {
        samples,
        worst_slack: worst,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::library::*;
    use super::*;
    use crate::mpp::{build_lattice, MarkSpace, TimeGrid};

    fn model(rates: &[f64], steps: usize) -> CompensatorModel {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        CompensatorModel::homogeneous(MarkSpace::indexed(rates.len()).unwrap(), rates, &grid, 1.0).unwrap()
    }

    fn point<'a>(y: f64, u: &'a [f64], law: &'a EmpiricalLaw, phi: &'a [f64]) -> DriverPoint<'a> {
        DriverPoint { step: 0, time: 0.0, y, u, law, phi }
    }

    #[test]
    fn driver_values() {
        let law = EmpiricalLaw::new([(1.0, 0.5), (3.0, 0.5)]).unwrap();
        let phi = [1.0];
        assert_eq!(eval_driver(&zero(), &point(5.0, &[2.0], &law, &phi)).unwrap(), 0.0);
        let f = linear_mean(1.0, 3.0, 0.0);
        assert_eq!(eval_driver(&f, &point(1.0, &[0.0], &law, &phi)).unwrap(), 7.0);
        let bad = DriverSpec::lipschitz("bad", 0.0, 0.0, false, |_| f64::NAN);
        assert!(matches!(eval_driver(&bad, &point(0.0, &[0.0], &law, &phi)), Err(Error::NonFiniteDriver { .. })));
    }

    #[test]
    fn j_lambda_values() {
        let comp = model(&[1.0], 1);
        assert_eq!(j_lambda(&comp, 0, &[0.0], 1.0).unwrap(), 0.0);
        assert!((j_lambda(&comp, 0, &[1.0], 1.0).unwrap() - 0.718281828459045).abs() < 1e-12);
        assert!((j_lambda(&comp, 0, &[-1.0], 1.0).unwrap() - 0.367879441171442).abs() < 1e-12);
        assert!(matches!(j_lambda(&comp, 0, &[1000.0], 1.0), Err(Error::ExponentialOverflow { .. })));
        assert!(j_lambda(&comp, 0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn j_lambda_nonnegative_and_convex() {
        let comp = model(&[0.7, 1.9], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let lambda = rng.gen_range(0.1..3.0);
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let ja = j_lambda(&comp, 0, &a, lambda).unwrap();
            let jb = j_lambda(&comp, 0, &b, lambda).unwrap();
            assert!(ja >= 0.0);
            assert!(j_lambda(&comp, 0, &mid, lambda).unwrap() <= 0.5 * (ja + jb) + 1e-12);
        }
    }

    #[test]
    fn envelope_cases() {
        let comp = model(&[1.0, 0.5], 3);
        let zero_q = zero().with_lambda(1.0);
        assert!(envelope_check(&zero_q, &comp, 500, 1).unwrap().passed());
        assert!(envelope_check(&jump_entropic(0.7), &comp, 500, 1).unwrap().passed());
        let one = DriverSpec::lipschitz("one", 0.0, 0.0, false, |_| 1.0).with_lambda(1.0);
        let rep = envelope_check(&one, &comp, 10, 1).unwrap();
        let w = &rep.violations[0];
        assert_eq!((w.y, w.u.as_slice()), (0.0, &[0.0, 0.0][..]));
        assert!(envelope_check(&zero(), &comp, 10, 1).is_err());
        for f in [quadratic_mean(0.8, 0.5, -0.3, 0.2), quadratic_mean(2.0, -1.0, 1.0, 0.0)] {
            assert!(envelope_check(&f, &comp, 1000, 9).unwrap().passed());
        }
    }

    #[test]
    fn bundled_drivers_respect_declared_constants() {
        let comp = model(&[1.2, 0.4], 4);
        let rate = 1.6;
        for f in [
            zero(),
            constant(2.0),
            linear(-1.5, 0.3),
            linear_mean(0.5, -2.0, 1.0),
            smooth_lipschitz(0.7, 0.4, -0.8, 0.1, rate),
            smooth_lipschitz(-1.0, 0.0, 1.0, 0.0, rate),
            quadratic_mean(1.0, 0.3, 0.6, 0.0),
        ] {
            f.validate().unwrap();
            let rep = lipschitz_probe_driver(&f, &comp, 1000, 3).unwrap();
            assert!(rep.passed(), "{} {:?}", f.name(), rep);
        }
        let liar = DriverSpec::lipschitz("liar", 0.1, 0.1, false, |p| 2.0 * p.y);
        assert!(!lipschitz_probe_driver(&liar, &comp, 100, 3).unwrap().passed());
    }

    #[test]
    fn obstacle_values_and_probe() {
        let law = EmpiricalLaw::delta_zero();
        assert_eq!(eval_obstacle(&ObstacleSpec::constant(2.5), 0, 0.3, 9.0, &law), 2.5);
        assert!((eval_obstacle(&ObstacleSpec::affine(0.1, 0.0, 0.0, 0.0), 0, 0.0, 2.0, &law) - 0.2).abs() < 1e-15);
        let comp = model(&[0.5], 3);
        let lat = build_lattice(&comp, lat_grid(3)).unwrap();
        for h in [ObstacleSpec::none(), ObstacleSpec::constant(1.0), ObstacleSpec::affine(0.3, -0.2, 0.1, 1.0)] {
            assert!(lipschitz_probe_obstacle(&h, &lat, 1000, 4).unwrap().passed());
        }
    }

    fn lat_grid(steps: usize) -> &'static TimeGrid {
        Box::leak(Box::new(TimeGrid::uniform(1.0, steps).unwrap()))
    }

    #[test]
    fn terminal_consistency_flags_nodes() {
        let comp = model(&[0.5], 3);
        let lat = build_lattice(&comp, lat_grid(3)).unwrap();
        let rep = terminal_consistency(&ObstacleSpec::constant(1.0), &TerminalSpec::constant(0.0), &lat).unwrap();
        assert_eq!(rep.violations.len(), lat.nodes(3).len());
        let rep = terminal_consistency(&ObstacleSpec::constant(1.0), &TerminalSpec::event_count(1.0, 1.0), &lat).unwrap();
        assert!(rep.passed());
    }
}
