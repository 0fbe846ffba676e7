//! Core domain types: states, actions, wait times, impulse models, and
//! stationary strategies.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::flow::{self, FlowSpec, QuadratureConfig};
use crate::{Error, Result};

/// A point of the state space, a vector of real coordinates.
#[derive(Clone, PartialEq)]
pub struct State {
    coords: Vec<f64>,
}

impl State {
    pub fn new(coords: Vec<f64>) -> Self {
        State { coords }
    }

    pub fn of(coords: &[f64]) -> Self {
        State { coords: coords.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coord(&self, axis: usize) -> f64 {
        self.coords[axis]
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }

    /// Euclidean distance to another state.
    pub fn dist(&self, other: &State) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// An action: an index into the model's finite action set.
#[derive(Clone, Copy, PartialEq, Eq, Debug, PartialOrd, Ord)]
pub struct Action(pub usize);

/// A wait time before the next impulse. `Infinite` means "never intervene":
/// the process is stopped and only the residual running cost is paid.
///
/// Kept as a distinguished variant rather than a large float so that the
/// compactified time axis has no sentinel hazards.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum WaitTime {
    Finite(f64),
    Infinite,
}

impl WaitTime {
    /// A finite wait; panics on negative or non-finite input.
    pub fn finite(t: f64) -> Self {
        assert!(t.is_finite() && t >= 0.0, "wait time must be finite and >= 0, got {t}");
        WaitTime::Finite(t)
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, WaitTime::Infinite)
    }

    pub fn as_finite(&self) -> Option<f64> {
        match self {
            WaitTime::Finite(t) => Some(*t),
            WaitTime::Infinite => None,
        }
    }
}

impl fmt::Display for WaitTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaitTime::Finite(t) => write!(f, "{t}"),
            WaitTime::Infinite => write!(f, "inf"),
        }
    }
}

/// The state space: an axis-aligned box plus an optional linear constraint
/// `a · x <= b`.
#[derive(Clone, Debug)]
pub struct StateBounds {
    box_: Vec<(f64, f64)>,
    linear: Option<(Vec<f64>, f64)>,
}

impl StateBounds {
    pub fn new_box(box_: Vec<(f64, f64)>) -> Self {
        StateBounds { box_, linear: None }
    }

    pub fn with_linear_constraint(mut self, coeffs: Vec<f64>, rhs: f64) -> Self {
        assert_eq!(coeffs.len(), self.box_.len());
        self.linear = Some((coeffs, rhs));
        self
    }

    pub fn dim(&self) -> usize {
        self.box_.len()
    }

    pub fn box_ranges(&self) -> &[(f64, f64)] {
        &self.box_
    }

    pub fn linear_constraint(&self) -> Option<(&[f64], f64)> {
        self.linear.as_ref().map(|(c, b)| (c.as_slice(), *b))
    }

    /// Membership with an absolute tolerance on every inequality.
    pub fn contains(&self, x: &State, tol: f64) -> bool {
        if x.dim() != self.box_.len() || !x.is_finite() {
            return false;
        }
        for (c, (lo, hi)) in x.coords().iter().zip(&self.box_) {
            if *c < lo - tol || *c > hi + tol {
                return false;
            }
        }
        if let Some((coeffs, rhs)) = &self.linear {
            let dot: f64 = coeffs.iter().zip(x.coords()).map(|(a, c)| a * c).sum();
            if dot > rhs + tol {
                return false;
            }
        }
        true
    }

    /// A uniformly sampled point of the box satisfying the linear constraint.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> State {
        loop {
            let coords: Vec<f64> = self
                .box_
                .iter()
                .map(|(lo, hi)| {
                    let lo = lo.max(-1e12);
                    let hi = hi.min(1e12);
                    rng.gen_range(lo..=hi)
                })
                .collect();
            let s = State::new(coords);
            if self.contains(&s, 0.0) {
                return s;
            }
        }
    }
}

/// The absorbing subset where the process is effectively over: zero running
/// cost and invariant under the flow.
#[derive(Clone)]
pub struct CemeterySpec {
    predicate: Arc<dyn Fn(&State) -> bool + Send + Sync>,
}

impl CemeterySpec {
    pub fn new(predicate: impl Fn(&State) -> bool + Send + Sync + 'static) -> Self {
        CemeterySpec { predicate: Arc::new(predicate) }
    }

    pub fn contains(&self, x: &State) -> bool {
        (self.predicate)(x)
    }
}

type CostFn = Arc<dyn Fn(&State) -> f64 + Send + Sync>;
type ImpulseCostFn = Arc<dyn Fn(&State, Action) -> f64 + Send + Sync>;
type JumpFn = Arc<dyn Fn(&State, Action) -> State + Send + Sync>;

/// The impulse-control model: running cost rate, impulse cost, jump map,
/// action set, and state-space bounds.
///
/// All closures are pure functions of their inputs; the model is immutable
/// and cheap to clone (shared function handles).
#[derive(Clone)]
pub struct ImpulseModel {
    gradual_cost: CostFn,
    impulse_cost: ImpulseCostFn,
    jump: JumpFn,
    num_actions: usize,
    bounds: StateBounds,
    impulse_cost_floor: Option<f64>,
    cemetery: Option<CemeterySpec>,
}

impl ImpulseModel {
    pub fn builder(bounds: StateBounds) -> ImpulseModelBuilder {
        ImpulseModelBuilder {
            bounds,
            gradual_cost: None,
            impulse_cost: None,
            jump: None,
            num_actions: 1,
            impulse_cost_floor: None,
            cemetery: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn gradual_cost(&self, x: &State) -> f64 {
        (self.gradual_cost)(x)
    }

    pub fn impulse_cost(&self, x: &State, a: Action) -> f64 {
        (self.impulse_cost)(x, a)
    }

    pub fn jump(&self, x: &State, a: Action) -> State {
        (self.jump)(x, a)
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> {
        (0..self.num_actions).map(Action)
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn bounds(&self) -> &StateBounds {
        &self.bounds
    }

    pub fn impulse_cost_floor(&self) -> Option<f64> {
        self.impulse_cost_floor
    }

    pub fn cemetery(&self) -> Option<&CemeterySpec> {
        self.cemetery.as_ref()
    }

    pub fn in_cemetery(&self, x: &State) -> bool {
        self.cemetery.as_ref().map_or(false, |c| c.contains(x))
    }

    /// Sampling validation of the model invariants: jump targets stay in
    /// the domain (hard error), costs are nonnegative, and the impulse-cost
    /// floor holds (warnings). Cemetery invariants are checked separately
    /// on supplied samples.
    pub fn validate<R: Rng>(&self, rng: &mut R, n_samples: usize) -> Result<Vec<ModelWarning>> {
        let mut warnings = Vec::new();
        let tol = 1e-9;
        for _ in 0..n_samples {
            let x = self.bounds.sample(rng);
            if self.gradual_cost(&x) < 0.0 {
                warnings.push(ModelWarning::NegativeGradualCost { at: x.clone() });
            }
            for a in self.actions() {
                let ci = self.impulse_cost(&x, a);
                if ci < 0.0 {
                    warnings.push(ModelWarning::NegativeImpulseCost { at: x.clone(), action: a });
                }
                if let Some(floor) = self.impulse_cost_floor {
                    if ci < floor {
                        warnings.push(ModelWarning::ImpulseCostBelowFloor {
                            at: x.clone(),
                            action: a,
                            cost: ci,
                            floor,
                        });
                    }
                }
                let target = self.jump(&x, a);
                if !self.bounds.contains(&target, tol) {
                    return Err(Error::DomainViolation {
                        state: target,
                        context: format!("jump target from {x:?} under action {}", a.0),
                    });
                }
            }
        }
        Ok(warnings)
    }

    /// Checks the cemetery invariants (zero running cost, flow invariance)
    /// on explicitly supplied cemetery states. Uniform sampling cannot hit a
    /// measure-zero absorbing set, so the caller provides the points.
    pub fn validate_cemetery(&self, flow: &FlowSpec, samples: &[State]) -> Vec<ModelWarning> {
        let mut warnings = Vec::new();
        let Some(cem) = &self.cemetery else {
            return warnings;
        };
        let tol = 1e-9;
        for x in samples {
            if !cem.contains(x) {
                continue;
            }
            if self.gradual_cost(x).abs() > tol {
                warnings.push(ModelWarning::CemeteryCostNonzero { at: x.clone() });
            }
            for &t in &[0.1, 1.0, 10.0] {
                if let Ok(y) = flow::advance(flow, x, t) {
                    if !cem.contains(&y) {
                        warnings.push(ModelWarning::CemeteryNotInvariant { at: x.clone(), t });
                        break;
                    }
                }
            }
        }
        warnings
    }
}

/// Non-fatal findings from [`ImpulseModel::validate`].
#[derive(Debug, Clone)]
pub enum ModelWarning {
    NegativeGradualCost { at: State },
    NegativeImpulseCost { at: State, action: Action },
    ImpulseCostBelowFloor { at: State, action: Action, cost: f64, floor: f64 },
    CemeteryCostNonzero { at: State },
    CemeteryNotInvariant { at: State, t: f64 },
    UnboundedGradualCost { sample_max: f64 },
}

pub struct ImpulseModelBuilder {
    bounds: StateBounds,
    gradual_cost: Option<CostFn>,
    impulse_cost: Option<ImpulseCostFn>,
    jump: Option<JumpFn>,
    num_actions: usize,
    impulse_cost_floor: Option<f64>,
    cemetery: Option<CemeterySpec>,
}

impl ImpulseModelBuilder {
    pub fn gradual_cost(mut self, f: impl Fn(&State) -> f64 + Send + Sync + 'static) -> Self {
        self.gradual_cost = Some(Arc::new(f));
        self
    }

    pub fn impulse_cost(
        mut self,
        f: impl Fn(&State, Action) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.impulse_cost = Some(Arc::new(f));
        self
    }

    pub fn jump(mut self, f: impl Fn(&State, Action) -> State + Send + Sync + 'static) -> Self {
        self.jump = Some(Arc::new(f));
        self
    }

    pub fn actions(mut self, n: usize) -> Self {
        self.num_actions = n;
        self
    }

    pub fn impulse_cost_floor(mut self, floor: f64) -> Self {
        self.impulse_cost_floor = Some(floor);
        self
    }

    pub fn cemetery(mut self, predicate: impl Fn(&State) -> bool + Send + Sync + 'static) -> Self {
        self.cemetery = Some(CemeterySpec::new(predicate));
        self
    }

    pub fn build(self) -> Result<ImpulseModel> {
        if self.num_actions == 0 {
            return Err(Error::Invalid("action set must be nonempty".into()));
        }
        Ok(ImpulseModel {
            gradual_cost: self
                .gradual_cost
                .ok_or_else(|| Error::Invalid("gradual cost not set".into()))?,
            impulse_cost: self
                .impulse_cost
                .ok_or_else(|| Error::Invalid("impulse cost not set".into()))?,
            jump: self.jump.ok_or_else(|| Error::Invalid("jump map not set".into()))?,
            num_actions: self.num_actions,
            bounds: self.bounds,
            impulse_cost_floor: self.impulse_cost_floor,
            cemetery: self.cemetery,
        })
    }
}

/// A stationary deterministic strategy: a measurable state-feedback pair
/// (wait time, action), with infinite wait meaning "stop".
pub trait StationaryStrategy: Sync {
    fn decide(&self, x: &State) -> Result<(WaitTime, Action)>;

    fn wait(&self, x: &State) -> Result<WaitTime> {
        Ok(self.decide(x)?.0)
    }

    fn act(&self, x: &State) -> Result<Action> {
        Ok(self.decide(x)?.1)
    }
}

/// A strategy defined by a plain closure; handy for hand-crafted policies in
/// tests and experiments.
pub struct FnStrategy<F>(pub F);

impl<F> StationaryStrategy for FnStrategy<F>
where
    F: Fn(&State) -> (WaitTime, Action) + Sync,
{
    fn decide(&self, x: &State) -> Result<(WaitTime, Action)> {
        Ok((self.0)(x))
    }
}

/// Applies the impulse map `l(x, a)` and checks the target stays in the
/// state space.
pub fn apply_impulse(model: &ImpulseModel, x: &State, a: Action) -> Result<State> {
    let target = model.jump(x, a);
    if !model.bounds().contains(&target, 1e-9) {
        return Err(Error::DomainViolation {
            state: target,
            context: format!("impulse from {x:?} with action {}", a.0),
        });
    }
    Ok(target)
}

/// Stage cost of the induced MDP:
/// `∫_(0,θ] Cg(φ(x,u)) du + 1{θ<∞} CI(φ(x,θ), a)`.
///
/// For `θ = 0` this is exactly `CI(x, a)` — no quadrature. For `θ = ∞` the
/// action is ignored and the stopping value is returned.
pub fn stage_cost(
    model: &ImpulseModel,
    flow: &FlowSpec,
    x: &State,
    wait: WaitTime,
    a: Action,
    q: &QuadratureConfig,
) -> Result<f64> {
    match wait {
        WaitTime::Finite(theta) if theta == 0.0 => Ok(model.impulse_cost(x, a)),
        WaitTime::Finite(theta) => {
            let run = flow::running_cost(flow, model, x, theta, q)?;
            let arrival = flow::advance(flow, x, theta)?;
            Ok(run + model.impulse_cost(&arrival, a))
        }
        WaitTime::Infinite => flow::stopping_value(flow, model, x, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sir::{self, SirParams};

    fn sir_setup(c: f64, beta: f64, gamma: f64) -> (ImpulseModel, FlowSpec, SirParams) {
        let p = SirParams::new(beta, gamma, c, 10.0).unwrap();
        (sir::model(&p), sir::flow_spec(&p), p)
    }

    #[test]
    fn impulse_isolates_all_infectives() {
        let (m, _, _) = sir_setup(5.0, 4.0, 3.0);
        let y = apply_impulse(&m, &State::of(&[8.0, 2.0]), Action(0)).unwrap();
        assert_eq!(y, State::of(&[8.0, 0.0]));
    }

    #[test]
    fn impulse_on_cemetery_is_identity() {
        let (m, _, _) = sir_setup(5.0, 4.0, 3.0);
        let y = apply_impulse(&m, &State::of(&[8.0, 0.0]), Action(0)).unwrap();
        assert_eq!(y, State::of(&[8.0, 0.0]));
    }

    #[test]
    fn impulse_on_boundary() {
        let (m, _, _) = sir_setup(5.0, 4.0, 3.0);
        let y = apply_impulse(&m, &State::of(&[0.0, 3.0]), Action(0)).unwrap();
        assert_eq!(y, State::of(&[0.0, 0.0]));
    }

    #[test]
    fn impulse_leaving_domain_is_rejected() {
        let m = ImpulseModel::builder(StateBounds::new_box(vec![(0.0, 1.0)]))
            .gradual_cost(|_| 0.0)
            .impulse_cost(|_, _| 1.0)
            .jump(|x, _| State::of(&[x.coord(0) + 5.0]))
            .build()
            .unwrap();
        let err = apply_impulse(&m, &State::of(&[0.5]), Action(0)).unwrap_err();
        assert!(matches!(err, Error::DomainViolation { .. }));
    }

    #[test]
    fn stage_cost_zero_wait_is_exact_impulse_cost() {
        let (m, f, _) = sir_setup(5.0, 4.0, 3.0);
        let q = QuadratureConfig::default();
        let c = stage_cost(&m, &f, &State::of(&[8.0, 2.0]), WaitTime::finite(0.0), Action(0), &q)
            .unwrap();
        assert_eq!(c, 10.0);
    }

    #[test]
    fn stage_cost_finite_wait_matches_closed_form() {
        // Running cost equals x1(0) - x1(θ) because Cg = -dx1/dt along the flow.
        let (m, f, _) = sir_setup(5.0, 4.0, 3.0);
        let q = QuadratureConfig::default();
        let c = stage_cost(
            &m,
            &f,
            &State::of(&[8.0, 2.0]),
            WaitTime::finite(std::f64::consts::LN_2),
            Action(0),
            &q,
        )
        .unwrap();
        let x1 = 5000.0 / 1296.0;
        let x2 = 2500.0 / 1296.0;
        assert!((c - ((8.0 - x1) + 5.0 * x2)).abs() < 1e-4, "got {c}");
        assert!((c - 13.787).abs() < 1e-3);
    }

    #[test]
    fn stage_cost_infinite_wait_is_stopping_value() {
        let (m, f, _) = sir_setup(5.0, 4.0, 3.0);
        let q = QuadratureConfig::default();
        let c = stage_cost(&m, &f, &State::of(&[8.0, 2.0]), WaitTime::Infinite, Action(0), &q)
            .unwrap();
        assert!((c - 8.0).abs() < 1e-4, "got {c}");
    }

    #[test]
    fn stage_cost_monotone_in_theta() {
        let (m, f, _) = sir_setup(5.0, 4.0, 3.0);
        let q = QuadratureConfig::default();
        let x = State::of(&[6.0, 1.0]);
        let mut prev = -1.0;
        for k in 0..12 {
            let theta = 0.25 * k as f64;
            let run = flow::running_cost(&f, &m, &x, theta, &q).unwrap();
            assert!(run >= prev - 1e-9, "running cost not monotone at θ = {theta}");
            prev = run;
        }
    }

    #[test]
    fn validate_passes_for_sir() {
        use rand::SeedableRng;
        let (m, f, _) = sir_setup(5.0, 4.0, 3.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let warnings = m.validate(&mut rng, 200).unwrap();
        assert!(warnings.is_empty(), "unexpected warnings: {warnings:?}");

        let row: Vec<State> =
            (0..11).map(|k| State::of(&[k as f64, 0.0])).collect();
        let warnings = m.validate_cemetery(&f, &row);
        assert!(warnings.is_empty(), "unexpected cemetery warnings: {warnings:?}");
    }
}
