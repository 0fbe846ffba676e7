//! Executable checks of the differential optimality form: forward/backward
//! generator estimates, the two-case equation (zero forward generator off
//! the intervention set; zero impulse gap and nonnegative backward
//! generator on it), the no-impulse identity along trajectories, the
//! monotone-h property, and the semicontinuity conditions along the flow.
//!
//! All checks are sampled, not symbolic: dense grid and randomized
//! trajectory coverage stand in for the "for all x" statements.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bellman::{self, ThetaSearchConfig};
use crate::flow::{self, FlowSpec, QuadratureConfig};
use crate::grid::{Grid, ValueFn};
use crate::model::{ImpulseModel, State, WaitTime};
use crate::Result;

/// Tolerances for the differential-form verdicts.
#[derive(Clone, Debug, Serialize)]
pub struct Margins {
    /// Case A: |forward generator| must be below this.
    pub forward_tol: f64,
    /// Case split: |impulse gap| at or below this is case B.
    pub impulse_gap_margin: f64,
    /// Case B: backward generator must be at least minus this.
    pub backward_margin: f64,
    /// Intervention-set membership margin for boundary detection.
    pub l_margin: f64,
    /// Nodes within this Chebyshev distance of the detected intervention
    /// boundary are excluded from classification (one-sided derivatives).
    pub exclusion_cells: usize,
    /// Richardson stabilization tolerance for generator limits.
    pub gen_tol: f64,
    /// Decreasing finite-difference steps for the generator estimates.
    pub h_seq: Vec<f64>,
    /// Forward-flow time used to manufacture an incoming trajectory for the
    /// backward estimate.
    pub backward_advance: f64,
    /// Semicontinuity tolerance along the flow.
    pub cont_tol: f64,
    /// Monotonicity slack for the h-function check.
    pub mono_tol: f64,
}

impl Margins {
    /// Tight margins for analytically evaluable value functions.
    pub fn analytic() -> Self {
        Margins {
            forward_tol: 1e-3,
            impulse_gap_margin: 1e-6,
            backward_margin: 1e-3,
            l_margin: 1e-6,
            exclusion_cells: 2,
            gen_tol: 1e-3,
            h_seq: vec![0.02, 0.01, 0.005],
            backward_advance: 0.025,
            cont_tol: 1e-6,
            mono_tol: 1e-6,
        }
    }

    /// Grid-limited margins for interpolated numeric fields: larger steps so
    /// the finite differences average over interpolation error.
    pub fn numeric() -> Self {
        Margins {
            forward_tol: 5e-2,
            impulse_gap_margin: 1e-3,
            backward_margin: 5e-2,
            l_margin: 1e-3,
            exclusion_cells: 3,
            gen_tol: 5e-2,
            h_seq: vec![0.4, 0.2, 0.1],
            backward_advance: 0.5,
            cont_tol: 5e-3,
            mono_tol: 5e-3,
        }
    }
}

/// A finite-difference estimate of the generator limits at a point.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorEstimate {
    /// Forward limit; `None` when Richardson refinement did not stabilize,
    /// i.e. the one-sided limit does not appear to exist.
    pub forward: Option<f64>,
    /// An element of the backward limit set along the supplied incoming
    /// trajectory.
    pub backward: Option<f64>,
    /// Smallest step used.
    pub step: f64,
}

/// Richardson extrapolation over a decreasing step sequence; `Some` when the
/// extrapolants settle within `gen_tol`.
pub(crate) fn richardson(raws: &[f64], h_seq: &[f64], gen_tol: f64) -> Option<f64> {
    if raws.iter().any(|r| !r.is_finite()) {
        return None;
    }
    if raws.len() < 2 {
        return raws.first().copied();
    }
    let mut extr = Vec::with_capacity(raws.len() - 1);
    for i in 0..raws.len() - 1 {
        let (h0, h1) = (h_seq[i], h_seq[i + 1]);
        extr.push((raws[i + 1] * h0 - raws[i] * h1) / (h0 - h1));
    }
    if extr.len() == 1 {
        return Some(extr[0]);
    }
    let last = extr[extr.len() - 1];
    let prev = extr[extr.len() - 2];
    if (last - prev).abs() <= gen_tol {
        Some(last)
    } else {
        None
    }
}

/// Forward generator estimate
/// `[V(φ(x,h)) − V(x)]/h + (1/h) ∫_(0,h] Cg(φ(x,u)) du` over a decreasing
/// step sequence with Richardson extrapolation.
pub fn forward_generator(
    v: &dyn ValueFn,
    flow: &FlowSpec,
    model: &ImpulseModel,
    x: &State,
    h_seq: &[f64],
    gen_tol: f64,
    q: &QuadratureConfig,
) -> Result<GeneratorEstimate> {
    let vx = v.value(x);
    let mut raws = Vec::with_capacity(h_seq.len());
    for &h in h_seq {
        let y = flow::advance(flow, x, h)?;
        let run = flow::running_cost(flow, model, x, h, q)?;
        raws.push((v.value(&y) - vx) / h + run / h);
    }
    Ok(GeneratorEstimate {
        forward: richardson(&raws, h_seq, gen_tol),
        backward: None,
        step: h_seq.last().copied().unwrap_or(0.0),
    })
}

/// Backward generator estimate at the arrival point `φ(origin, s)` along the
/// incoming trajectory from `origin`:
/// `[V(x) − V(φ(origin, s−t))]/t + (1/t) ∫_(s−t,s] Cg` for decreasing `t`.
///
/// The backward limit is a lim inf and always exists in the extended reals;
/// when the extrapolants do not settle, the minimum raw quotient is returned
/// as a lower proxy.
pub fn backward_generator(
    v: &dyn ValueFn,
    flow: &FlowSpec,
    model: &ImpulseModel,
    origin: &State,
    s: f64,
    h_seq: &[f64],
    gen_tol: f64,
    q: &QuadratureConfig,
) -> Result<GeneratorEstimate> {
    let x = flow::advance(flow, origin, s)?;
    let vx = v.value(&x);
    let mut raws = Vec::with_capacity(h_seq.len());
    for &t in h_seq {
        if t >= s {
            continue;
        }
        let y = flow::advance(flow, origin, s - t)?;
        let run = flow::integrate_along(flow, &y, 0.0, t, q, &|z, _| model.gradual_cost(z))?;
        raws.push((vx - v.value(&y)) / t + run / t);
    }
    let steps: Vec<f64> = h_seq.iter().copied().filter(|t| *t < s).collect();
    let backward = richardson(&raws, &steps, gen_tol)
        .or_else(|| raws.iter().copied().fold(None, |m: Option<f64>, r| Some(m.map_or(r, |v| v.min(r)))));
    Ok(GeneratorEstimate {
        forward: None,
        backward,
        step: steps.last().copied().unwrap_or(0.0),
    })
}

/// Mask of grid nodes where the impulse gap
/// `min_a [CI(x,a) + V(l(x,a)) − V(x)]` is within `l_margin` of zero — the
/// states where impulses must be applied.
pub fn intervention_set(
    model: &ImpulseModel,
    v: &dyn ValueFn,
    grid: &Grid,
    l_margin: f64,
) -> Vec<bool> {
    let gaps: Vec<Option<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            if !grid.is_masked_in(idx) {
                return None;
            }
            let x = grid.node_state(idx);
            let (iv, _) = bellman::impulse_value(model, v, &x);
            Some(iv - v.value(&x))
        })
        .collect();
    gaps.into_iter().map(|g| g.map_or(false, |g| g <= l_margin)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DifEqCase {
    A,
    B,
    Violation,
}

impl std::fmt::Display for DifEqCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DifEqCase::A => write!(f, "A"),
            DifEqCase::B => write!(f, "B"),
            DifEqCase::Violation => write!(f, "VIOLATION"),
        }
    }
}

/// Per-node verdict of the differential-form check.
#[derive(Clone, Debug)]
pub struct DifEqVerdict {
    pub node: usize,
    pub location: State,
    pub case: DifEqCase,
    pub impulse_gap: f64,
    pub forward_residual: Option<f64>,
    pub backward_estimate: Option<f64>,
    pub detail: Option<String>,
}

/// Checks the two-case differential form at every masked node outside the
/// exclusion band around the intervention-set boundary.
///
/// Case A (off the intervention set): the forward generator exists and
/// vanishes, and the impulse gap is strictly positive. Case B (on it): the
/// gap vanishes and the backward generator along an incoming trajectory is
/// nonnegative. Anything else is a violation.
pub fn check_differential_form(
    model: &ImpulseModel,
    flow: &FlowSpec,
    v: &dyn ValueFn,
    grid: &Grid,
    margins: &Margins,
    q: &QuadratureConfig,
) -> Result<Vec<DifEqVerdict>> {
    let in_l = intervention_set(model, v, grid, margins.l_margin);

    // Boundary nodes of the intervention set, then the exclusion band.
    let mut boundary: Vec<Vec<usize>> = Vec::new();
    for &idx in grid.masked_indices() {
        let mine = in_l[idx];
        if grid
            .neighbors(idx)
            .into_iter()
            .any(|nb| grid.is_masked_in(nb) && in_l[nb] != mine)
        {
            boundary.push(grid.multi_index(idx));
        }
    }
    let excluded = |idx: usize| -> bool {
        let mm = grid.multi_index(idx);
        boundary.iter().any(|bm| {
            mm.iter().zip(bm).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0)
                <= margins.exclusion_cells
        })
    };

    let verdicts: Vec<Option<DifEqVerdict>> = grid
        .masked_indices()
        .par_iter()
        .map(|&idx| -> Result<Option<DifEqVerdict>> {
            if excluded(idx) {
                return Ok(None);
            }
            let x = grid.node_state(idx);
            let (iv, _) = bellman::impulse_value(model, v, &x);
            let gap = iv - v.value(&x);

            if gap < -margins.impulse_gap_margin {
                return Ok(Some(DifEqVerdict {
                    node: idx,
                    location: x,
                    case: DifEqCase::Violation,
                    impulse_gap: gap,
                    forward_residual: None,
                    backward_estimate: None,
                    detail: Some("value exceeds the impulse envelope".into()),
                }));
            }

            if gap.abs() <= margins.impulse_gap_margin {
                // Case B: need a nonnegative backward generator. The
                // incoming trajectory is manufactured by flowing forward
                // from the node itself.
                let est = backward_generator(
                    v,
                    flow,
                    model,
                    &x,
                    margins.backward_advance,
                    &margins.h_seq,
                    margins.gen_tol,
                    q,
                )?;
                let ok = est.backward.map_or(false, |b| b >= -margins.backward_margin);
                return Ok(Some(DifEqVerdict {
                    node: idx,
                    location: x,
                    case: if ok { DifEqCase::B } else { DifEqCase::Violation },
                    impulse_gap: gap,
                    forward_residual: None,
                    backward_estimate: est.backward,
                    detail: (!ok).then(|| "backward generator negative on the intervention set".into()),
                }));
            }

            // Case A: the forward generator must exist and vanish.
            let est = forward_generator(v, flow, model, &x, &margins.h_seq, margins.gen_tol, q)?;
            match est.forward {
                Some(r) if r.abs() <= margins.forward_tol => Ok(Some(DifEqVerdict {
                    node: idx,
                    location: x,
                    case: DifEqCase::A,
                    impulse_gap: gap,
                    forward_residual: Some(r),
                    backward_estimate: None,
                    detail: None,
                })),
                other => Ok(Some(DifEqVerdict {
                    node: idx,
                    location: x,
                    case: DifEqCase::Violation,
                    impulse_gap: gap,
                    forward_residual: other,
                    backward_estimate: None,
                    detail: Some(match other {
                        Some(_) => "forward generator nonzero off the intervention set".into(),
                        None => "forward generator limit did not stabilize".into(),
                    }),
                })),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(verdicts.into_iter().flatten().collect())
}

/// Residual of the no-impulse identity
/// `V(x) = ∫_(0,t] Cg(φ(x,u)) du + V(φ(x,t))` along a trajectory that stays
/// off the intervention set.
pub fn check_no_impulse_identity(
    model: &ImpulseModel,
    flow: &FlowSpec,
    v: &dyn ValueFn,
    x: &State,
    t: f64,
    q: &QuadratureConfig,
) -> Result<f64> {
    let run = flow::running_cost(flow, model, x, t, q)?;
    let y = flow::advance(flow, x, t)?;
    Ok((v.value(x) - run - v.value(&y)).abs())
}

/// Checks that
/// `h(s) = V(φ(x,s)) − ∫_(s,t] Cg(φ(x,v)) dv − 1{t<∞} IV(φ(x,t))`
/// is nondecreasing over `samples` equispaced values of s — the workhorse of
/// the differential-to-integral direction.
pub fn check_h_monotone(
    model: &ImpulseModel,
    flow: &FlowSpec,
    v: &dyn ValueFn,
    x: &State,
    t: WaitTime,
    samples: usize,
    mono_tol: f64,
    q: &QuadratureConfig,
) -> Result<bool> {
    let t_eff = match t {
        WaitTime::Finite(t) => t,
        WaitTime::Infinite => q.t_max,
    };
    if !(t_eff > 0.0) || samples < 2 {
        return Ok(true);
    }
    let ds = t_eff / samples as f64;
    let mut states = Vec::with_capacity(samples + 1);
    let mut prefix = Vec::with_capacity(samples + 1);
    let mut y = x.clone();
    let mut acc = 0.0;
    states.push(y.clone());
    prefix.push(0.0);
    for _ in 0..samples {
        acc += flow::integrate_along(flow, &y, 0.0, ds, q, &|z, _| model.gradual_cost(z))?;
        y = flow::advance(flow, &y, ds)?;
        states.push(y.clone());
        prefix.push(acc);
    }
    let total = acc;
    let terminal = match t {
        WaitTime::Finite(_) => bellman::impulse_value(model, v, states.last().unwrap()).0,
        WaitTime::Infinite => 0.0,
    };
    let mut prev = f64::NEG_INFINITY;
    for k in 0..states.len() {
        let h = v.value(&states[k]) - (total - prefix[k]) - terminal;
        if h < prev - mono_tol {
            return Ok(false);
        }
        prev = h;
    }
    Ok(true)
}

/// Pass counts of the sampled condition checks along randomized
/// trajectories.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionsReport {
    /// Minimizer set contains its infimum (attained minimum).
    pub infimum_attained: (usize, usize),
    /// Intervention hitting-time set empty or containing its infimum.
    pub hitting_time_attained: (usize, usize),
    /// Right lower / left upper semicontinuity along the flow.
    pub semicontinuity: (usize, usize),
    /// Left continuity along trajectory segments off the intervention set.
    pub left_continuity: (usize, usize),
    /// The backward set is sampled along one incoming trajectory per point;
    /// exact under the group property, an under-approximation otherwise.
    pub single_incoming_trajectory: bool,
}

impl ConditionsReport {
    pub fn all_pass(&self) -> bool {
        let full = |(p, t): (usize, usize)| p == t;
        full(self.infimum_attained)
            && full(self.hitting_time_attained)
            && full(self.semicontinuity)
            && full(self.left_continuity)
    }
}

/// Sampled verification of the minimizer-attainment, hitting-time,
/// semicontinuity, and left-continuity conditions on `n_traj` seeded random
/// trajectories.
#[allow(clippy::too_many_arguments)]
pub fn check_conditions(
    model: &ImpulseModel,
    flow: &FlowSpec,
    v: &dyn ValueFn,
    grid: &Grid,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
    margins: &Margins,
    seed: u64,
    n_traj: usize,
) -> Result<ConditionsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked = grid.masked_indices();
    let mut report = ConditionsReport {
        infimum_attained: (0, 0),
        hitting_time_attained: (0, 0),
        semicontinuity: (0, 0),
        left_continuity: (0, 0),
        single_incoming_trajectory: true,
    };
    let horizon = (q.t_max / 8.0).min(4.0).max(1.0);
    let samples = 200usize;
    let eps_seq = [1e-3, 1e-4];

    for _ in 0..n_traj {
        let idx = masked[rng.gen_range(0..masked.len())];
        let x = grid.node_state(idx);

        // Minimizer attainment: the wait chosen by an independent backup is
        // a member of the eps-optimal set.
        report.infimum_attained.1 += 1;
        let eps = 10.0 * cfg.tie_tol * (1.0 + v.value(&x).abs());
        let ts = bellman::theta_set(model, flow, v, &x, cfg, q, eps)?;
        let chosen = bellman::bellman_backup(model, flow, v, &x, cfg, q)?.wait;
        // The θ grid of theta_set is log-spaced, so an eps-optimal member
        // near the refined minimizer can sit one grid ratio away.
        let attained = match chosen {
            WaitTime::Infinite => ts.contains(&WaitTime::Infinite),
            WaitTime::Finite(t) => ts.iter().any(|w| match w {
                WaitTime::Finite(s) => (s - t).abs() <= 0.3 * (1.0 + t),
                WaitTime::Infinite => false,
            }),
        };
        if attained && !ts.is_empty() {
            report.infimum_attained.0 += 1;
        }

        // Hitting-time attainment: locate the first trajectory sample in
        // the intervention set, refine by bisection, and confirm the gap is
        // small at the refined point.
        report.hitting_time_attained.1 += 1;
        let ds = horizon / samples as f64;
        let gap_at = |y: &State| -> f64 {
            let (iv, _) = bellman::impulse_value(model, v, y);
            iv - v.value(y)
        };
        let mut y = x.clone();
        let mut hit: Option<(f64, f64)> = None; // (t_before, t_at)
        let mut t_prev = 0.0;
        if gap_at(&y) <= margins.l_margin {
            hit = Some((0.0, 0.0));
        } else {
            for k in 1..=samples {
                let t_k = ds * k as f64;
                y = flow::advance(flow, &y, ds)?;
                if gap_at(&y) <= margins.l_margin {
                    hit = Some((t_prev, t_k));
                    break;
                }
                t_prev = t_k;
            }
        }
        match hit {
            None => report.hitting_time_attained.0 += 1, // empty set: fine
            Some((mut lo, mut hi)) => {
                for _ in 0..40 {
                    if hi - lo < 1e-12 {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    let ym = flow::advance(flow, &x, mid)?;
                    if gap_at(&ym) <= margins.l_margin {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let yh = flow::advance(flow, &x, hi)?;
                if gap_at(&yh) <= 2.0 * margins.l_margin {
                    report.hitting_time_attained.0 += 1;
                }
            }
        }

        // Semicontinuity along the flow at the sampled times.
        let mut ok_semi = true;
        let mut ok_left = true;
        let hit_time = hit.map(|(_, h)| h).unwrap_or(horizon);
        for k in 0..=samples {
            let s = ds * k as f64;
            let ys = flow::advance(flow, &x, s)?;
            let vs = v.value(&ys);
            for &eps in &eps_seq {
                let fwd = v.value(&flow::advance(flow, &x, s + eps)?);
                if fwd < vs - margins.cont_tol {
                    ok_semi = false; // right lower semicontinuity broken
                }
                if s - eps >= 0.0 {
                    let back = v.value(&flow::advance(flow, &x, s - eps)?);
                    if back > vs + margins.cont_tol {
                        ok_semi = false; // left upper semicontinuity broken
                    }
                    if s <= hit_time && (back - vs).abs() > margins.cont_tol {
                        ok_left = false; // left continuity off the set broken
                    }
                }
            }
        }
        report.semicontinuity.1 += 1;
        report.semicontinuity.0 += usize::from(ok_semi);
        report.left_continuity.1 += 1;
        report.left_continuity.0 += usize::from(ok_left);
    }
    Ok(report)
}
