//! The discounted-model reduction: an α-discounted problem on a base space
//! Y becomes a total-cost problem on Y × time with
//! `Cg((y,s)) = e^{-αs} Cg_Y(y)`, `CI((y,s),a) = e^{-αs} CI_Y(y,a)`, and a
//! jump that preserves the time coordinate. The value factorizes as
//! `V((y,s)) = e^{-αs} V_Y(y)`, so the time axis is never gridded: only the
//! s = 0 slice is solved numerically and the exponential factor is applied
//! analytically.
//!
//! Only exponential discounting is supported; there is no entry point for a
//! general weight function.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::bellman::{self, BackupResult, IterationReport, ThetaSearchConfig};
use crate::flow::{self, FlowSpec, QuadratureConfig};
use crate::grid::{Grid, ValueField, ValueFn};
use crate::model::{Action, ImpulseModel, ModelWarning, State, StateBounds, WaitTime};
use crate::verify::GeneratorEstimate;
use crate::{Error, Result};

/// The base model together with its time-augmented total-cost wrap.
#[derive(Clone)]
pub struct DiscountedModel {
    pub base: ImpulseModel,
    pub base_flow: FlowSpec,
    pub alpha: f64,
    /// Augmented model on Y × time.
    pub model: ImpulseModel,
    /// Augmented flow `φ((y,s),t) = (φ_Y(y,t), s+t)`.
    pub flow: FlowSpec,
}

fn split_state(x: &State) -> (State, f64) {
    let d = x.dim() - 1;
    (State::new(x.coords()[..d].to_vec()), x.coord(d))
}

fn join_state(y: &State, s: f64) -> State {
    let mut coords = y.coords().to_vec();
    coords.push(s);
    State::new(coords)
}

/// Builds the time-augmented total-cost model. Warns when sampled base
/// running costs look unbounded (the wrap needs `Cg_Y <= K` for the
/// integrability condition).
pub fn wrap_discounted(
    base: &ImpulseModel,
    base_flow: &FlowSpec,
    alpha: f64,
) -> Result<(DiscountedModel, Vec<ModelWarning>)> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Invalid(format!("discount factor must be > 0, got {alpha}")));
    }
    let mut warnings = Vec::new();
    {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        let mut k_hat: f64 = 0.0;
        for _ in 0..256 {
            let y = base.bounds().sample(&mut rng);
            k_hat = k_hat.max(base.gradual_cost(&y).abs());
        }
        if !k_hat.is_finite() || k_hat > 1e12 {
            warnings.push(ModelWarning::UnboundedGradualCost { sample_max: k_hat });
        }
    }

    let mut box_ranges = base.bounds().box_ranges().to_vec();
    box_ranges.push((0.0, f64::INFINITY));
    let mut bounds = StateBounds::new_box(box_ranges);
    if let Some((coeffs, rhs)) = base.bounds().linear_constraint() {
        let mut c = coeffs.to_vec();
        c.push(0.0);
        bounds = bounds.with_linear_constraint(c, rhs);
    }

    let b1 = base.clone();
    let b2 = base.clone();
    let b3 = base.clone();
    let base_cemetery = base.cemetery().cloned();
    let mut builder = ImpulseModel::builder(bounds)
        .gradual_cost(move |x| {
            let (y, s) = split_state(x);
            (-alpha * s).exp() * b1.gradual_cost(&y)
        })
        .impulse_cost(move |x, a| {
            let (y, s) = split_state(x);
            (-alpha * s).exp() * b2.impulse_cost(&y, a)
        })
        .jump(move |x, a| {
            let (y, s) = split_state(x);
            join_state(&b3.jump(&y, a), s)
        })
        .actions(base.num_actions());
    if let Some(cem) = base_cemetery {
        builder = builder.cemetery(move |x| {
            let (y, _) = split_state(x);
            cem.contains(&y)
        });
    }
    let model = builder.build()?;

    let flow = match base_flow {
        FlowSpec::ClosedForm { advance, .. } => {
            let adv = advance.clone();
            FlowSpec::closed_form(move |x, t| {
                let (y, s) = split_state(x);
                join_state(&adv(&y, t), s + t)
            })
        }
        FlowSpec::OdeField { field, step, .. } => {
            let f = field.clone();
            FlowSpec::ode_field(
                move |x| {
                    let (y, _) = split_state(x);
                    let mut v = f(&y);
                    v.push(1.0);
                    v
                },
                *step,
            )
        }
    };

    Ok((
        DiscountedModel {
            base: base.clone(),
            base_flow: base_flow.clone(),
            alpha,
            model,
            flow,
        },
        warnings,
    ))
}

/// Evaluates the augmented value `V((y,s)) = e^{-αs}·V_Y(y)` from a Y-slice
/// field.
pub struct SliceValue<'a> {
    pub field: &'a ValueField,
    pub alpha: f64,
}

impl ValueFn for SliceValue<'_> {
    fn value(&self, x: &State) -> f64 {
        let (y, s) = split_state(x);
        (-self.alpha * s).exp() * self.field.eval(&y)
    }
}

/// Solves the wrapped model on the s = 0 slice: value iteration over a grid
/// of Y, with continuation values read through the exponential
/// factorization. This is the generic-machinery route; see
/// [`discounted_backup`] for the direct form it must agree with.
#[allow(clippy::too_many_arguments)]
pub fn solve_discounted_slice(
    wrap: &DiscountedModel,
    grid: Grid,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueField, Vec<IterationReport>)> {
    let grid = Arc::new(grid);
    let mut values = vec![0.0; grid.len()];
    let mut reports = Vec::new();
    for n in 1..=max_iter {
        let started = Instant::now();
        let frozen = ValueField::new(grid.clone(), values.clone(), n as u32 - 1);
        let adapter = SliceValue { field: &frozen, alpha: wrap.alpha };
        let backups: Vec<(usize, f64)> = grid
            .masked_indices()
            .par_iter()
            .map(|&idx| {
                let y = grid.node_state(idx);
                let x_aug = join_state(&y, 0.0);
                bellman::bellman_backup(&wrap.model, &wrap.flow, &adapter, &x_aug, cfg, q)
                    .map(|b| (idx, b.value))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sup_change = 0.0f64;
        let mut monotone_ok = true;
        for &(idx, new) in &backups {
            let old = values[idx];
            sup_change = sup_change.max((new - old).abs());
            if new < old - 1e-9 * (1.0 + old.abs()) {
                monotone_ok = false;
            }
            values[idx] = new;
        }
        reports.push(IterationReport {
            n,
            sup_change,
            monotone_ok,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if sup_change <= tol {
            return Ok((ValueField::new(grid, values, n as u32), reports));
        }
    }
    let sup_change = reports.last().map(|r| r.sup_change).unwrap_or(f64::INFINITY);
    Err(Error::NonConvergence {
        iterations: max_iter,
        sup_change,
        partial: Box::new(ValueField::new(grid, values, max_iter as u32)),
        reports,
    })
}

/// Discounted stopping value `∫_(0,∞) e^{-αu} Cg_Y(φ_Y(y,u)) du`.
pub fn discounted_stop_value(
    base: &ImpulseModel,
    base_flow: &FlowSpec,
    y: &State,
    alpha: f64,
    q: &QuadratureConfig,
) -> Result<f64> {
    flow::improper_integral(base_flow, y, q, &|z, u| (-alpha * u).exp() * base.gradual_cost(z))
}

/// The direct discounted Bellman backup on Y:
/// `min_θ { ∫_(0,θ] e^{-αu} Cg_Y du + e^{-αθ}·IV_Y(φ_Y(y,θ)) }`,
/// written against base-space quantities only. Independent of the
/// time-augmentation route by construction.
pub fn discounted_backup(
    base: &ImpulseModel,
    base_flow: &FlowSpec,
    v_y: &dyn ValueFn,
    y: &State,
    alpha: f64,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
) -> Result<BackupResult> {
    let t_max = cfg.t_max.unwrap_or(q.t_max);
    let weight = |z: &State, u: f64| (-alpha * u).exp() * base.gradual_cost(z);

    let (iv0, a0) = bellman::impulse_value(base, v_y, y);
    let mut best = (iv0, 0.0, a0);
    let mut prefix = 0.0;
    let mut t_prev = 0.0;
    let mut state = y.clone();
    let lo = t_max * cfg.min_fraction;
    let denom = cfg.count.max(2) - 1;
    for j in 0..cfg.count {
        let theta = if j == denom { t_max } else { lo * (t_max / lo).powf(j as f64 / denom as f64) };
        if theta <= t_prev {
            continue;
        }
        prefix += flow::integrate_along(base_flow, &state, t_prev, theta, q, &weight)?;
        state = flow::advance(base_flow, &state, theta - t_prev)?;
        t_prev = theta;
        let (iv, a) = bellman::impulse_value(base, v_y, &state);
        let g = prefix + (-alpha * theta).exp() * iv;
        if g < best.0 {
            best = (g, theta, a);
        }
    }
    let stop = discounted_stop_value(base, base_flow, y, alpha, q)?;

    let value = best.0.min(stop);
    let tie = cfg.tie_tol * (1.0 + value.abs());
    if stop < best.0 - tie {
        return Ok(BackupResult { value, wait: WaitTime::Infinite, action: Action(0) });
    }
    if best.0 < stop - tie {
        return Ok(BackupResult { value, wait: WaitTime::Finite(best.1), action: best.2 });
    }
    let arrival = flow::advance(base_flow, y, best.1)?;
    let (iv, _) = bellman::impulse_value(base, v_y, &arrival);
    let gap = iv - v_y.value(&arrival);
    if gap.abs() <= cfg.genuine_gap_tol * (1.0 + value.abs()) {
        Ok(BackupResult { value, wait: WaitTime::Finite(best.1), action: best.2 })
    } else {
        Ok(BackupResult { value, wait: WaitTime::Infinite, action: Action(0) })
    }
}

/// Value iteration with the direct discounted backup; the cross-check route
/// for [`solve_discounted_slice`].
pub fn solve_discounted_direct(
    base: &ImpulseModel,
    base_flow: &FlowSpec,
    alpha: f64,
    grid: Grid,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueField, Vec<IterationReport>)> {
    let grid = Arc::new(grid);
    let mut values = vec![0.0; grid.len()];
    let mut reports = Vec::new();
    for n in 1..=max_iter {
        let started = Instant::now();
        let frozen = ValueField::new(grid.clone(), values.clone(), n as u32 - 1);
        let backups: Vec<(usize, f64)> = grid
            .masked_indices()
            .par_iter()
            .map(|&idx| {
                let y = grid.node_state(idx);
                discounted_backup(base, base_flow, &frozen, &y, alpha, cfg, q)
                    .map(|b| (idx, b.value))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sup_change = 0.0f64;
        for &(idx, new) in &backups {
            sup_change = sup_change.max((new - values[idx]).abs());
            values[idx] = new;
        }
        reports.push(IterationReport {
            n,
            sup_change,
            monotone_ok: true,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if sup_change <= tol {
            return Ok((ValueField::new(grid, values, n as u32), reports));
        }
    }
    let sup_change = reports.last().map(|r| r.sup_change).unwrap_or(f64::INFINITY);
    Err(Error::NonConvergence {
        iterations: max_iter,
        sup_change,
        partial: Box::new(ValueField::new(grid, values, max_iter as u32)),
        reports,
    })
}

/// Finite-difference estimate of the discounted forward generator
/// `[e^{-αh} V(φ_Y(y,h)) − V(y)]/h + (1/h) ∫_(0,h] e^{-αu} Cg_Y du`.
/// At α = 0 this coincides with the undiscounted forward generator.
#[allow(clippy::too_many_arguments)]
pub fn discounted_forward_generator(
    v_y: &dyn ValueFn,
    base_flow: &FlowSpec,
    base: &ImpulseModel,
    alpha: f64,
    y: &State,
    h_seq: &[f64],
    gen_tol: f64,
    q: &QuadratureConfig,
) -> Result<GeneratorEstimate> {
    let vy = v_y.value(y);
    let mut raws = Vec::with_capacity(h_seq.len());
    for &h in h_seq {
        let z = flow::advance(base_flow, y, h)?;
        let run = flow::integrate_along(base_flow, y, 0.0, h, q, &|w, u| {
            (-alpha * u).exp() * base.gradual_cost(w)
        })?;
        raws.push(((-alpha * h).exp() * v_y.value(&z) - vy) / h + run / h);
    }
    Ok(GeneratorEstimate {
        forward: crate::verify::richardson(&raws, h_seq, gen_tol),
        backward: None,
        step: h_seq.last().copied().unwrap_or(0.0),
    })
}
