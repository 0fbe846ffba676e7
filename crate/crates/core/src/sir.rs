//! The SIR epidemic impulse-control model: closed-form flow, isolation
//! costs, regime classification, piecewise-analytic value functions and
//! optimal strategies, the switching-threshold function Υ, and the
//! gradual-control threshold limits ζ(U), ξ(U).
//!
//! Dynamics (susceptibles x1, infectives x2):
//!
//! ```text
//! dx1/dt = -β x1 x2 / (x1 + x2)
//! dx2/dt =  β x1 x2 / (x1 + x2) - γ x2
//! ```
//!
//! The impulse isolates all infectives at cost c·x2, jumping (x1, x2) to
//! (x1, 0). The running cost rate is the infection rate, so its integral
//! along the flow counts new infections. The state space is the triangle
//! {x1 >= 0, x2 >= 0, x1 + x2 < N}.

use crate::flow::FlowSpec;
use crate::model::{Action, ImpulseModel, State, StateBounds, StationaryStrategy, WaitTime};
use crate::{Error, Result};

/// Cemetery band: infectives below this level cannot restart the epidemic
/// at float precision and the process is considered over.
pub const CEMETERY_BAND: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SirParams {
    pub beta: f64,
    pub gamma: f64,
    pub c: f64,
    /// Population bound of the triangular state space; strictly above any
    /// intended initial population so the flow has no singular points.
    pub n: f64,
}

impl SirParams {
    pub fn new(beta: f64, gamma: f64, c: f64, n: f64) -> Result<Self> {
        for (name, v) in [("beta", beta), ("gamma", gamma), ("c", c), ("n", n)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("sir parameter {name} must be > 0, got {v}")));
            }
        }
        Ok(SirParams { beta, gamma, c, n })
    }

    /// Truncation horizon matched to the slowest integrand decay rate;
    /// clamped because the rate degenerates at β = γ.
    pub fn default_t_max(&self) -> f64 {
        let denom = (self.beta - self.gamma).abs().min(self.gamma);
        if denom < 0.04 {
            2000.0
        } else {
            (80.0 / denom).clamp(80.0, 2000.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegimeTag {
    /// β >= γ: the line x2 = x1/c is a dispersal line.
    Supercritical,
    /// β < γ and c >= β/(γ-β): isolation is never worthwhile.
    SubcriticalExpensive,
    /// β < γ and c < β/(γ-β): the line x2 = (β+βc-γc)/(γc)·x1 is a
    /// switching line.
    SubcriticalCheap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regime {
    pub tag: RegimeTag,
    /// Slope of the threshold line, when one exists.
    pub threshold_slope: Option<f64>,
}

/// Three-way split of the parameter space.
pub fn classify(p: &SirParams) -> Regime {
    if p.beta >= p.gamma {
        Regime { tag: RegimeTag::Supercritical, threshold_slope: Some(1.0 / p.c) }
    } else if p.c >= p.beta / (p.gamma - p.beta) {
        Regime { tag: RegimeTag::SubcriticalExpensive, threshold_slope: None }
    } else {
        Regime {
            tag: RegimeTag::SubcriticalCheap,
            threshold_slope: Some(cheap_slope(p)),
        }
    }
}

fn cheap_slope(p: &SirParams) -> f64 {
    (p.beta + p.beta * p.c - p.gamma * p.c) / (p.gamma * p.c)
}

/// Closed-form flow evaluation. Interior states use the explicit solution;
/// on the axes, x2 = 0 is stationary and x1 = 0 decays by pure recovery.
pub fn sir_flow(p: &SirParams, x: &State, t: f64) -> Result<State> {
    let (x1, x2) = (x.coord(0), x.coord(1));
    if x1 < 0.0 || x2 < 0.0 {
        return Err(Error::Invalid(format!("sir flow requires x1, x2 >= 0, got {x:?}")));
    }
    if t == 0.0 {
        return Ok(x.clone());
    }
    if x2 == 0.0 {
        return Ok(x.clone());
    }
    if x1 == 0.0 {
        return Ok(State::new(vec![0.0, x2 * (-p.gamma * t).exp()]));
    }
    let k = p.beta - p.gamma;
    if k == 0.0 {
        let factor = (-p.beta * x2 * t / (x1 + x2)).exp();
        return Ok(State::new(vec![x1 * factor, x2 * factor]));
    }
    // Log-space evaluation keeps e^{kt} factors from overflowing.
    let r0 = x2 / x1;
    let pow = p.beta / k;
    let z = r0.ln() + k * t;
    let ln_d = if z > 30.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    let ln_scale = pow * (r0.ln_1p() - ln_d);
    let y1 = x1 * ln_scale.exp();
    let y2 = x2 * (k * t + ln_scale).exp();
    Ok(State::new(vec![y1, y2]))
}

/// The closed-form flow as a [`FlowSpec`].
pub fn flow_spec(p: &SirParams) -> FlowSpec {
    let p = *p;
    FlowSpec::closed_form(move |x, t| {
        sir_flow(&p, x, t).unwrap_or_else(|_| State::new(vec![f64::NAN, f64::NAN]))
    })
    .with_guard(StateBounds::new_box(vec![
        (-0.1 * p.n, 1.2 * p.n),
        (-0.1 * p.n, 1.2 * p.n),
    ]))
}

/// The same dynamics as an ODE field for the fixed-step integrator; serves
/// as an oracle cross-check of the closed form.
pub fn ode_flow_spec(p: &SirParams, step: f64) -> FlowSpec {
    let p = *p;
    FlowSpec::ode_field(
        move |x| {
            let (x1, x2) = (x.coord(0), x.coord(1));
            let s = x1 + x2;
            if s <= 0.0 || x1 <= 0.0 || x2 <= 0.0 {
                if x1 <= 0.0 && x2 > 0.0 {
                    return vec![0.0, -p.gamma * x2];
                }
                return vec![0.0, 0.0];
            }
            let inf = p.beta * x1 * x2 / s;
            vec![-inf, inf - p.gamma * x2]
        },
        step,
    )
    .with_guard(StateBounds::new_box(vec![
        (-0.1 * p.n, 1.2 * p.n),
        (-0.1 * p.n, 1.2 * p.n),
    ]))
}

/// The impulse model of the epidemic: running cost = infection rate,
/// impulse cost = c·x2, jump = isolate all infectives.
pub fn model(p: &SirParams) -> ImpulseModel {
    let pc = *p;
    ImpulseModel::builder(
        StateBounds::new_box(vec![(0.0, p.n), (0.0, p.n)])
            .with_linear_constraint(vec![1.0, 1.0], p.n),
    )
    .gradual_cost(move |x| {
        let (x1, x2) = (x.coord(0), x.coord(1));
        if x1 <= 0.0 || x2 <= 0.0 {
            return 0.0;
        }
        pc.beta * x1 * x2 / (x1 + x2)
    })
    .impulse_cost(move |x, _| pc.c * x.coord(1).max(0.0))
    .jump(|x, _| State::new(vec![x.coord(0).max(0.0), 0.0]))
    .actions(1)
    .cemetery(|x| x.coord(1) <= CEMETERY_BAND)
    .build()
    .expect("sir model construction cannot fail")
}

/// The time at which the infectives/susceptibles ratio first equals
/// `target`, if ever. The ratio moves as w(t) = w(0)·e^{(β-γ)t}.
pub fn time_to_ratio(p: &SirParams, x: &State, target: f64) -> Option<f64> {
    let (x1, x2) = (x.coord(0), x.coord(1));
    if x1 <= 0.0 || x2 < 0.0 {
        return None;
    }
    let w0 = x2 / x1;
    if w0 == target {
        return Some(0.0);
    }
    let k = p.beta - p.gamma;
    if k == 0.0 || w0 <= 0.0 || target <= 0.0 {
        return None;
    }
    let t = (target / w0).ln() / k;
    if t > 0.0 {
        Some(t)
    } else {
        None
    }
}

/// Time to reach the switching line in the cheap subcritical regime.
/// `Some(0)` on the line, `None` on or below it (the ratio only moves away).
pub fn line_hitting_time(p: &SirParams, x: &State) -> Result<Option<f64>> {
    let regime = classify(p);
    if regime.tag != RegimeTag::SubcriticalCheap {
        return Err(Error::RegimeMismatch(
            "line_hitting_time is defined in the cheap subcritical regime only".into(),
        ));
    }
    let m = regime.threshold_slope.unwrap();
    let (x1, x2) = (x.coord(0), x.coord(1));
    if x1 <= 0.0 {
        // On the x2 axis the ratio is degenerate; the line is never reached.
        return Ok(None);
    }
    if x2 < m * x1 {
        return Ok(None);
    }
    Ok(time_to_ratio(p, x, m))
}

/// The piecewise-analytic value function for the regime of `p`.
/// Boundary convention: V = 0 on both axes.
pub fn analytic_value(p: &SirParams, x: &State) -> f64 {
    let (x1, x2) = (x.coord(0), x.coord(1));
    if x1 <= 0.0 || x2 <= 0.0 {
        return 0.0;
    }
    let regime = classify(p);
    match regime.tag {
        RegimeTag::Supercritical => {
            if x2 <= x1 / p.c {
                p.c * x2
            } else {
                x1
            }
        }
        RegimeTag::SubcriticalExpensive => {
            let pow = -p.beta / (p.gamma - p.beta);
            x1 * (1.0 - (1.0 + x2 / x1).powf(pow))
        }
        RegimeTag::SubcriticalCheap => {
            let m = regime.threshold_slope.unwrap();
            if x2 <= m * x1 {
                p.c * x2
            } else {
                let w = x2 / x1;
                let pow = -p.beta / (p.gamma - p.beta);
                let base = p.gamma * p.c * (1.0 + w) / (p.beta + p.beta * p.c);
                x1 * (1.0
                    - base.powf(pow) * (1.0 + p.c) * (p.gamma - p.beta) / p.gamma)
            }
        }
    }
}

/// The analytic value as a thread-safe callable.
pub fn analytic_value_fn(p: &SirParams) -> impl Fn(&State) -> f64 + Sync + Send + Copy {
    let p = *p;
    move |x: &State| analytic_value(&p, x)
}

/// Wait time of the uniformly optimal strategy: zero on the intervention
/// set, the line-hitting time above the switching line in the cheap regime,
/// and infinity where the intervention set is never reached.
///
/// Line membership carries a small relative tolerance so that a trajectory
/// advanced exactly to the line does not miss it by one ulp and wait again.
pub fn analytic_wait(p: &SirParams, x: &State) -> WaitTime {
    let (x1, x2) = (x.coord(0), x.coord(1));
    if x2 <= CEMETERY_BAND {
        return WaitTime::Finite(0.0);
    }
    let on_or_below = |slope: f64| x2 <= slope * x1 * (1.0 + 1e-9) + 1e-12;
    let regime = classify(p);
    match regime.tag {
        RegimeTag::Supercritical => {
            if on_or_below(1.0 / p.c) {
                WaitTime::Finite(0.0)
            } else {
                WaitTime::Infinite
            }
        }
        RegimeTag::SubcriticalExpensive => WaitTime::Infinite,
        RegimeTag::SubcriticalCheap => {
            let m = regime.threshold_slope.unwrap();
            if on_or_below(m) {
                WaitTime::Finite(0.0)
            } else {
                match line_hitting_time(p, x).ok().flatten() {
                    Some(t) => WaitTime::Finite(t),
                    None => WaitTime::Infinite,
                }
            }
        }
    }
}

/// The uniformly optimal stationary strategy of the regime.
#[derive(Clone, Copy)]
pub struct AnalyticStrategy {
    pub params: SirParams,
}

impl StationaryStrategy for AnalyticStrategy {
    fn decide(&self, x: &State) -> Result<(WaitTime, Action)> {
        Ok((analytic_wait(&self.params, x), Action(0)))
    }
}

/// The switching-threshold function Υ(w) of the cheap regime: the impulse
/// gap above the line is x1·Υ(x2/x1); Υ has a double zero at the threshold
/// slope and is strictly convex.
pub fn upsilon(p: &SirParams, w: f64) -> Result<f64> {
    if classify(p).tag != RegimeTag::SubcriticalCheap {
        return Err(Error::RegimeMismatch(
            "upsilon is defined in the cheap subcritical regime only".into(),
        ));
    }
    if !(w > 0.0) {
        return Err(Error::Invalid(format!("upsilon requires w > 0, got {w}")));
    }
    let pow = -p.beta / (p.gamma - p.beta);
    let base = p.gamma * p.c * (1.0 + w) / (p.beta + p.beta * p.c);
    Ok(p.c * w - 1.0 + base.powf(pow) * (1.0 + p.c) * (p.gamma - p.beta) / p.gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradualKind {
    /// Dispersal-line threshold of the bounded-rate isolation model, β >= γ.
    Zeta,
    /// Switching-line threshold of the bounded-rate isolation model, β < γ
    /// cheap regime.
    Xi,
}

/// Threshold slope of the gradual-control model with maximal isolation rate
/// `U`; converges to the impulse threshold as U → ∞.
pub fn gradual_threshold(p: &SirParams, u: f64, kind: GradualKind) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::Invalid(format!("gradual threshold requires U > 0, got {u}")));
    }
    let (beta, gamma, c) = (p.beta, p.gamma, p.c);
    match kind {
        GradualKind::Zeta => {
            if beta < gamma {
                return Err(Error::RegimeMismatch("zeta requires beta >= gamma".into()));
            }
            let expo = (gamma + u - beta) / (gamma + u);
            Ok(((gamma + u + c * u) / (c * u)).powf(expo) - 1.0)
        }
        GradualKind::Xi => {
            if classify(p).tag != RegimeTag::SubcriticalCheap {
                return Err(Error::RegimeMismatch(
                    "xi requires the cheap subcritical regime".into(),
                ));
            }
            let expo = (gamma + u - beta) / (gamma + u);
            Ok((beta * (gamma + u + c * u) / (c * gamma * (gamma + u - beta))).powf(expo) - 1.0)
        }
    }
}

/// A state that flows into `x` after exactly `s` time units, found without
/// reversing the flow: the dynamics are homogeneous of degree one, so the
/// preimage direction comes from the ratio identity and the magnitude from
/// one forward evaluation on the unit ray.
pub fn preimage(p: &SirParams, x: &State, s: f64) -> Result<State> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Invalid(format!("preimage requires finite s > 0, got {s}")));
    }
    let (x1, x2) = (x.coord(0), x.coord(1));
    if x2 <= 0.0 {
        return Ok(x.clone());
    }
    if x1 <= 0.0 {
        return Ok(State::new(vec![0.0, x2 * (p.gamma * s).exp()]));
    }
    let k = p.beta - p.gamma;
    let w_back = (x2 / x1) * (-k * s).exp();
    let unit = sir_flow(p, &State::new(vec![1.0, w_back]), s)?;
    let scale = x1 / unit.coord(0);
    let candidate = State::new(vec![scale, scale * w_back]);
    if candidate.coord(0) + candidate.coord(1) >= p.n {
        return Err(Error::DomainViolation {
            state: candidate,
            context: format!("preimage of {x:?} at s = {s} leaves the triangle"),
        });
    }
    Ok(candidate)
}
