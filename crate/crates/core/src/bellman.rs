//! The integral Bellman operator, value iteration by successive
//! approximations, and stationary strategy extraction on a grid.
//!
//! The backup at a state x minimizes, over wait times θ ∈ [0, ∞] and
//! actions,
//!
//! ```text
//! G(x, θ, a) = ∫_(0,θ] Cg(φ(x,u)) du + 1{θ<∞} [ CI(φ(x,θ),a) + V(l(φ(x,θ),a)) ]
//! ```
//!
//! The θ axis is searched on {0} ∪ a log-spaced grid ∪ {∞}, followed by
//! golden-section refinement around the best bracket; ties are resolved to
//! the smallest minimizing θ.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flow::{self, FlowSpec, QuadratureConfig};
use crate::grid::{Grid, ValueField, ValueFn};
use crate::model::{Action, ImpulseModel, State, StationaryStrategy, WaitTime};
use crate::{Error, Result};

/// Discretization of the infimum over θ ∈ [0, ∞].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ThetaSearchConfig {
    /// Log-spaced positive candidates on (0, t_max].
    pub count: usize,
    /// Smallest positive candidate, as a fraction of t_max.
    pub min_fraction: f64,
    /// Golden-section evaluations around the best grid bracket.
    pub refinement: usize,
    /// Horizon of the θ grid; `None` uses the quadrature horizon.
    pub t_max: Option<f64>,
    /// Relative tie tolerance for the minimal-θ rule.
    pub tie_tol: f64,
    /// Relative tolerance on the arrival identity `IV(y) = V(y)` used to
    /// tell genuine finite minimizers from float ties with the stop branch.
    pub genuine_gap_tol: f64,
}

impl Default for ThetaSearchConfig {
    fn default() -> Self {
        ThetaSearchConfig {
            count: 64,
            min_fraction: 1e-6,
            refinement: 24,
            t_max: None,
            tie_tol: 1e-7,
            genuine_gap_tol: 1e-9,
        }
    }
}

/// Per-sweep convergence report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationReport {
    pub n: usize,
    pub sup_change: f64,
    pub monotone_ok: bool,
    pub wall_time_s: f64,
}

/// Result of one Bellman backup.
#[derive(Clone, Debug, PartialEq)]
pub struct BackupResult {
    pub value: f64,
    pub wait: WaitTime,
    pub action: Action,
}

/// `IV(x) = min_a { CI(x,a) + V(l(x,a)) }` with the argmin action;
/// ties go to the smallest action id.
pub fn impulse_value(model: &ImpulseModel, v: &dyn ValueFn, x: &State) -> (f64, Action) {
    let mut best = f64::INFINITY;
    let mut best_a = Action(0);
    for a in model.actions() {
        let g = model.impulse_cost(x, a) + v.value(&model.jump(x, a));
        if g < best {
            best = g;
            best_a = a;
        }
    }
    (best, best_a)
}

#[derive(Clone, Copy)]
struct Candidate {
    theta: f64,
    g: f64,
    action: Action,
}

/// Anchor points of the θ sweep: state and running-cost prefix at each grid
/// candidate, for refinement evaluations in between.
struct Anchor {
    theta: f64,
    prefix: f64,
    state: State,
}

struct Sweep {
    cands: Vec<Candidate>,
    anchors: Vec<Anchor>,
    stop: f64,
}

fn sweep_grid(
    model: &ImpulseModel,
    flow: &FlowSpec,
    v: &dyn ValueFn,
    x: &State,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
) -> Result<Sweep> {
    let t_max = cfg.t_max.unwrap_or(q.t_max);
    let (iv0, a0) = impulse_value(model, v, x);
    let mut cands = vec![Candidate { theta: 0.0, g: iv0, action: a0 }];
    let mut anchors = vec![Anchor { theta: 0.0, prefix: 0.0, state: x.clone() }];

    let lo = t_max * cfg.min_fraction;
    let denom = cfg.count.max(2) - 1;
    let box_tol = 1e-6
        * model
            .bounds()
            .box_ranges()
            .iter()
            .map(|(a, b)| (b - a).abs())
            .fold(1.0, f64::max);
    for j in 0..cfg.count {
        let theta = if j == denom { t_max } else { lo * (t_max / lo).powf(j as f64 / denom as f64) };
        let last = anchors.last().unwrap();
        let dt = theta - last.theta;
        if dt <= 0.0 {
            continue;
        }
        let seg = flow::integrate_along(flow, &last.state, 0.0, dt, q, &|y, _| {
            model.gradual_cost(y)
        })?;
        let y = flow::advance(flow, &last.state, dt)?;
        let prefix = last.prefix + seg;
        if !model.bounds().contains(&y, box_tol) {
            // Trajectory left the state space; larger θ are infeasible.
            break;
        }
        let (iv, a) = impulse_value(model, v, &y);
        cands.push(Candidate { theta, g: prefix + iv, action: a });
        anchors.push(Anchor { theta, prefix, state: y });
    }

    let stop = flow::stopping_value(flow, model, x, q)?;
    Ok(Sweep { cands, anchors, stop })
}

/// Evaluates G at an arbitrary θ from the nearest anchor on the left.
fn eval_between(
    model: &ImpulseModel,
    flow: &FlowSpec,
    v: &dyn ValueFn,
    anchors: &[Anchor],
    theta: f64,
    q: &QuadratureConfig,
) -> Result<Candidate> {
    let pos = anchors.partition_point(|a| a.theta <= theta);
    let left = &anchors[pos.saturating_sub(1)];
    let dt = theta - left.theta;
    let seg =
        flow::integrate_along(flow, &left.state, 0.0, dt, q, &|y, _| model.gradual_cost(y))?;
    let y = flow::advance(flow, &left.state, dt)?;
    let (iv, a) = impulse_value(model, v, &y);
    Ok(Candidate { theta, g: left.prefix + seg + iv, action: a })
}

/// One Bellman backup: the minimum of G over {0} ∪ θ-grid ∪ {∞} with
/// golden-section refinement, returning the smallest minimizing wait.
///
/// When the best finite candidate ties the stop branch at float precision,
/// the finite wait is kept only if its arrival point satisfies the identity
/// `IV(φ(x,θ)) = V(φ(x,θ))` — a genuine member of the minimizer set —
/// otherwise the tie is an artifact of the trajectory dying out and the
/// backup reports "never intervene".
pub fn bellman_backup(
    model: &ImpulseModel,
    flow: &FlowSpec,
    v: &dyn ValueFn,
    x: &State,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
) -> Result<BackupResult> {
    let mut sweep = sweep_grid(model, flow, v, x, cfg, q)?;

    // Golden-section refinement around the best grid candidate.
    if cfg.refinement > 0 && sweep.cands.len() >= 2 {
        let k = argmin(&sweep.cands);
        let lo = if k == 0 { 0.0 } else { sweep.cands[k - 1].theta };
        let hi = if k + 1 < sweep.cands.len() {
            sweep.cands[k + 1].theta
        } else {
            sweep.cands[k].theta
        };
        if hi > lo {
            let inv_phi = 0.618_033_988_749_894_9_f64;
            let mut a = lo;
            let mut b = hi;
            let mut t1 = b - inv_phi * (b - a);
            let mut t2 = a + inv_phi * (b - a);
            let mut c1 = eval_between(model, flow, v, &sweep.anchors, t1, q)?;
            let mut c2 = eval_between(model, flow, v, &sweep.anchors, t2, q)?;
            let mut evals = 2;
            while evals < cfg.refinement && (b - a) > 1e-12 * (1.0 + hi) {
                if c1.g <= c2.g {
                    b = t2;
                    sweep.cands.push(c2);
                    t2 = t1;
                    c2 = c1;
                    t1 = b - inv_phi * (b - a);
                    c1 = eval_between(model, flow, v, &sweep.anchors, t1, q)?;
                } else {
                    a = t1;
                    sweep.cands.push(c1);
                    t1 = t2;
                    c1 = c2;
                    t2 = a + inv_phi * (b - a);
                    c2 = eval_between(model, flow, v, &sweep.anchors, t2, q)?;
                }
                evals += 1;
            }
            sweep.cands.push(c1);
            sweep.cands.push(c2);
        }
    }

    decide(model, flow, v, x, cfg, sweep)
}

fn argmin(cands: &[Candidate]) -> usize {
    let mut k = 0;
    for (i, c) in cands.iter().enumerate() {
        if c.g < cands[k].g {
            k = i;
        }
    }
    k
}

fn decide(
    model: &ImpulseModel,
    flow: &FlowSpec,
    v: &dyn ValueFn,
    x: &State,
    cfg: &ThetaSearchConfig,
    mut sweep: Sweep,
) -> Result<BackupResult> {
    sweep
        .cands
        .sort_by(|a, b| a.theta.partial_cmp(&b.theta).unwrap());
    let m_fin = sweep.cands.iter().map(|c| c.g).fold(f64::INFINITY, f64::min);
    let value = m_fin.min(sweep.stop);
    let tie = cfg.tie_tol * (1.0 + value.abs());

    if sweep.stop < m_fin - tie {
        return Ok(BackupResult { value, wait: WaitTime::Infinite, action: Action(0) });
    }
    let first = sweep
        .cands
        .iter()
        .find(|c| c.g <= m_fin + tie)
        .expect("finite candidate set is nonempty");

    if m_fin < sweep.stop - tie {
        return Ok(BackupResult {
            value,
            wait: WaitTime::Finite(first.theta),
            action: first.action,
        });
    }

    // Tie between the best finite wait and stopping.
    let arrival = flow::advance(flow, x, first.theta)?;
    let (iv, _) = impulse_value(model, v, &arrival);
    let gap = iv - v.value(&arrival);
    if gap.abs() <= cfg.genuine_gap_tol * (1.0 + value.abs()) {
        Ok(BackupResult { value, wait: WaitTime::Finite(first.theta), action: first.action })
    } else {
        Ok(BackupResult { value, wait: WaitTime::Infinite, action: Action(0) })
    }
}

/// The discrete outer approximation of the minimizer set Θ(x): every
/// candidate whose backup value is within `eps` of the minimum.
pub fn theta_set(
    model: &ImpulseModel,
    flow: &FlowSpec,
    v: &dyn ValueFn,
    x: &State,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
    eps: f64,
) -> Result<Vec<WaitTime>> {
    let sweep = sweep_grid(model, flow, v, x, cfg, q)?;
    let m = sweep
        .cands
        .iter()
        .map(|c| c.g)
        .fold(sweep.stop, f64::min);
    let mut out: Vec<WaitTime> = sweep
        .cands
        .iter()
        .filter(|c| c.g <= m + eps)
        .map(|c| WaitTime::Finite(c.theta))
        .collect();
    if sweep.stop <= m + eps {
        out.push(WaitTime::Infinite);
    }
    Ok(out)
}

/// Successive approximations from V0 ≡ 0 (Jacobi sweeps; each sweep reads a
/// frozen copy of the previous field, so results are independent of the
/// worker count).
pub fn value_iteration(
    model: &ImpulseModel,
    flow: &FlowSpec,
    grid: Grid,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueField, Vec<IterationReport>)> {
    value_iteration_from(model, flow, grid, &|_: &State| 0.0, cfg, q, tol, max_iter)
}

/// Successive approximations from an arbitrary initial value function
/// (used by the uniqueness cross-check, which restarts from the stopping
/// value instead of zero).
#[allow(clippy::too_many_arguments)]
pub fn value_iteration_from(
    model: &ImpulseModel,
    flow: &FlowSpec,
    grid: Grid,
    init: &dyn ValueFn,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueField, Vec<IterationReport>)> {
    if !(tol > 0.0) {
        return Err(Error::Invalid("value iteration tolerance must be positive".into()));
    }
    let grid = Arc::new(grid);
    let mut values = vec![0.0; grid.len()];
    for &idx in grid.masked_indices() {
        values[idx] = init.value(&grid.node_state(idx));
    }
    let mut reports: Vec<IterationReport> = Vec::new();

    for n in 1..=max_iter {
        let started = Instant::now();
        let frozen = ValueField::new(grid.clone(), values.clone(), n as u32 - 1);
        let backups: Vec<(usize, f64)> = grid
            .masked_indices()
            .par_iter()
            .map(|&idx| {
                let x = grid.node_state(idx);
                bellman_backup(model, flow, &frozen, &x, cfg, q).map(|b| (idx, b.value))
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

/// Max node residual `|backup(V)(x) − V(x)|` of a field — the fixed-point
/// check of the integral equation.
pub fn fixed_point_residual(
    model: &ImpulseModel,
    flow: &FlowSpec,
    field: &ValueField,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
) -> Result<f64> {
    let grid = &field.grid;
    let residuals: Vec<f64> = grid
        .masked_indices()
        .par_iter()
        .map(|&idx| {
            let x = grid.node_state(idx);
            bellman_backup(model, flow, field, &x, cfg, q)
                .map(|b| (b.value - field.values[idx]).abs())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(residuals.into_iter().fold(0.0, f64::max))
}

/// A stationary strategy read off a converged field: stored (θ*, a*) at the
/// nodes, and a fresh backup at off-node queries (wait times are
/// discontinuous across switching lines, so they are never interpolated).
pub struct ExtractedStrategy {
    model: ImpulseModel,
    flow: FlowSpec,
    field: ValueField,
    cfg: ThetaSearchConfig,
    quad: QuadratureConfig,
    waits: Vec<WaitTime>,
    actions: Vec<Action>,
    snap_tol: f64,
}

impl ExtractedStrategy {
    pub fn wait_at_node(&self, idx: usize) -> WaitTime {
        self.waits[idx]
    }

    pub fn action_at_node(&self, idx: usize) -> Action {
        self.actions[idx]
    }

    pub fn field(&self) -> &ValueField {
        &self.field
    }
}

impl StationaryStrategy for ExtractedStrategy {
    fn decide(&self, x: &State) -> Result<(WaitTime, Action)> {
        if let Some(idx) = self.field.grid.node_at(x, self.snap_tol) {
            if self.field.grid.is_masked_in(idx) {
                return Ok((self.waits[idx], self.actions[idx]));
            }
        }
        let b = bellman_backup(&self.model, &self.flow, &self.field, x, &self.cfg, &self.quad)?;
        Ok((b.wait, b.action))
    }
}

/// Runs a backup at every masked node of a converged field and stores the
/// minimizing (θ*, a*).
pub fn extract_strategy(
    model: &ImpulseModel,
    flow: &FlowSpec,
    field: &ValueField,
    cfg: &ThetaSearchConfig,
    q: &QuadratureConfig,
) -> Result<ExtractedStrategy> {
    let grid = &field.grid;
    let n = grid.len();
    let mut waits = vec![WaitTime::Infinite; n];
    let mut actions = vec![Action(0); n];
    let decided: Vec<(usize, WaitTime, Action)> = grid
        .masked_indices()
        .par_iter()
        .map(|&idx| {
            let x = grid.node_state(idx);
            bellman_backup(model, flow, field, &x, cfg, q).map(|b| (idx, b.wait, b.action))
        })
        .collect::<Result<Vec<_>>>()?;
    for (idx, w, a) in decided {
        waits[idx] = w;
        actions[idx] = a;
    }
    let snap_tol = 1e-9
        * field
            .grid
            .ranges()
            .iter()
            .map(|(a, b)| (b - a).abs())
            .fold(1.0, f64::max);
    Ok(ExtractedStrategy {
        model: model.clone(),
        flow: flow.clone(),
        field: field.clone(),
        cfg: cfg.clone(),
        quad: q.clone(),
        waits,
        actions,
        snap_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StateBounds;
    use crate::sir::{self, SirParams};

    fn setup(beta: f64, gamma: f64, c: f64) -> (SirParams, ImpulseModel, FlowSpec, QuadratureConfig)
    {
        let p = SirParams::new(beta, gamma, c, 10.0).unwrap();
        let mut q = QuadratureConfig::default();
        q.t_max = p.default_t_max();
        (p, sir::model(&p), sir::flow_spec(&p), q)
    }

    fn triangle_grid(n: usize) -> Grid {
        let bounds = StateBounds::new_box(vec![(0.0, 10.0), (0.0, 10.0)])
            .with_linear_constraint(vec![1.0, 1.0], 10.0);
        Grid::new(vec![(0.0, 10.0), (0.0, 10.0)], vec![n, n], &bounds).unwrap()
    }

    #[test]
    fn impulse_value_on_analytic_sir() {
        let (p, m, _, _) = setup(4.0, 3.0, 5.0);
        let v = sir::analytic_value_fn(&p);
        let (g, a) = impulse_value(&m, &v, &State::of(&[10.0, 1.0]));
        assert!((g - 5.0).abs() < 1e-12);
        assert_eq!(a, Action(0));

        let (p, m, _, _) = setup(3.0, 4.0, 1.5);
        let v = sir::analytic_value_fn(&p);
        let (g, a) = impulse_value(&m, &v, &State::of(&[4.0, 4.0]));
        assert!((g - 6.0).abs() < 1e-12);
        assert_eq!(a, Action(0));
    }

    #[test]
    fn impulse_value_identity_jump_ties_to_smallest_id() {
        let m = ImpulseModel::builder(StateBounds::new_box(vec![(0.0, 1.0)]))
            .gradual_cost(|_| 0.0)
            .impulse_cost(|_, _| 0.0)
            .jump(|x, _| x.clone())
            .actions(3)
            .build()
            .unwrap();
        let v = |x: &State| 2.0 * x.coord(0);
        let (g, a) = impulse_value(&m, &v, &State::of(&[0.4]));
        assert!((g - 0.8).abs() < 1e-15);
        assert_eq!(a, Action(0));
    }

    #[test]
    fn backup_inside_intervention_set() {
        let (p, m, f, q) = setup(4.0, 3.0, 5.0);
        let v = sir::analytic_value_fn(&p);
        let cfg = ThetaSearchConfig::default();
        let b = bellman_backup(&m, &f, &v, &State::of(&[10.0, 1.0]), &cfg, &q).unwrap();
        assert!((b.value - 5.0).abs() < 1e-6, "value {}", b.value);
        assert_eq!(b.wait, WaitTime::Finite(0.0));
        assert_eq!(b.action, Action(0));
    }

    #[test]
    fn backup_above_dispersal_line_stops() {
        let (p, m, f, q) = setup(4.0, 3.0, 5.0);
        let v = sir::analytic_value_fn(&p);
        let cfg = ThetaSearchConfig::default();
        let b = bellman_backup(&m, &f, &v, &State::of(&[4.0, 3.0]), &cfg, &q).unwrap();
        assert!((b.value - 4.0).abs() < 1e-4, "value {}", b.value);
        assert_eq!(b.wait, WaitTime::Infinite);
    }

    #[test]
    fn backup_with_zero_continuation_is_stage_cost_minimum() {
        let (_, m, f, q) = setup(4.0, 3.0, 5.0);
        let zero = |_: &State| 0.0;
        let cfg = ThetaSearchConfig::default();
        let x = State::of(&[10.0, 1.0]);
        let b = bellman_backup(&m, &f, &zero, &x, &cfg, &q).unwrap();
        // Inside the intervention region the immediate impulse is optimal
        // even with no continuation value.
        assert!((b.value - 5.0).abs() < 1e-6);
    }

    #[test]
    fn backup_cheap_regime_waits_for_the_line() {
        let (p, m, f, q) = setup(3.0, 4.0, 1.5);
        let v = sir::analytic_value_fn(&p);
        let cfg = ThetaSearchConfig::default();
        let b = bellman_backup(&m, &f, &v, &State::of(&[4.0, 4.0]), &cfg, &q).unwrap();
        assert!((b.value - 3.3896484375).abs() < 1e-5, "value {}", b.value);
        match b.wait {
            WaitTime::Finite(t) => {
                assert!((t - 4.0f64.ln()).abs() < 1e-3, "θ* = {t}")
            }
            WaitTime::Infinite => panic!("expected the line-hitting wait"),
        }
    }

    #[test]
    fn backup_on_cemetery_prefers_zero_wait() {
        let (_, m, f, q) = setup(4.0, 3.0, 5.0);
        let zero = |_: &State| 0.0;
        let cfg = ThetaSearchConfig::default();
        let b = bellman_backup(&m, &f, &zero, &State::of(&[6.0, 0.0]), &cfg, &q).unwrap();
        assert!(b.value.abs() < 1e-12);
        assert_eq!(b.wait, WaitTime::Finite(0.0));
    }

    #[test]
    fn backup_never_impulse_regime_stops_everywhere() {
        let (p, m, f, q) = setup(3.0, 4.0, 5.0);
        let v = sir::analytic_value_fn(&p);
        let cfg = ThetaSearchConfig::default();
        for &(x1, x2) in &[(8.0, 1.0), (4.0, 4.0), (2.0, 6.0)] {
            let b = bellman_backup(&m, &f, &v, &State::of(&[x1, x2]), &cfg, &q).unwrap();
            assert_eq!(b.wait, WaitTime::Infinite, "at ({x1}, {x2})");
            let av = sir::analytic_value(&p, &State::of(&[x1, x2]));
            assert!((b.value - av).abs() < 1e-5);
        }
    }

    #[test]
    fn theta_set_on_critical_line_is_a_band() {
        let (p, m, f, q) = setup(4.0, 4.0, 5.0);
        let v = sir::analytic_value_fn(&p);
        let cfg = ThetaSearchConfig::default();
        // On the β=γ critical line every wait is optimal.
        let ts = theta_set(&m, &f, &v, &State::of(&[5.0, 1.0]), &cfg, &q, 1e-6).unwrap();
        assert!(ts.len() > 10, "got {} candidates", ts.len());
        assert!(ts.contains(&WaitTime::Finite(0.0)));

        // Strictly inside the intervention set the minimizer is unique.
        let (p, m, f, q) = setup(4.0, 3.0, 5.0);
        let v = sir::analytic_value_fn(&p);
        let ts = theta_set(&m, &f, &v, &State::of(&[10.0, 1.0]), &cfg, &q, 1e-6).unwrap();
        assert_eq!(ts, vec![WaitTime::Finite(0.0)]);

        // In the expensive regime only stopping is optimal.
        let (p, m, f, q) = setup(3.0, 4.0, 5.0);
        let v = sir::analytic_value_fn(&p);
        let ts = theta_set(&m, &f, &v, &State::of(&[4.0, 4.0]), &cfg, &q, 1e-7).unwrap();
        assert_eq!(ts, vec![WaitTime::Infinite]);
    }

    #[test]
    fn value_iteration_small_grid_matches_analytic() {
        let (p, m, f, q) = setup(4.0, 3.0, 5.0);
        let cfg = ThetaSearchConfig::default();
        let grid = triangle_grid(41);
        let (field, reports) = value_iteration(&m, &f, grid, &cfg, &q, 1e-4, 30).unwrap();
        assert!(reports.iter().all(|r| r.monotone_ok), "nonmonotone sweep");
        let h = field.grid.step(0);
        let slope = 0.2;
        for &idx in field.grid.masked_indices() {
            let x = field.grid.node_state(idx);
            // Skip the band around the dispersal line.
            if (x.coord(1) - slope * x.coord(0)).abs() <= 2.0 * h * (1.0 + slope) {
                continue;
            }
            let err = (field.values[idx] - sir::analytic_value(&p, &x)).abs();
            assert!(err <= 0.05, "error {err} at {x:?}");
        }
    }

    #[test]
    fn value_iteration_nonconvergence_carries_partial_field() {
        let (_, m, f, q) = setup(4.0, 3.0, 5.0);
        let cfg = ThetaSearchConfig::default();
        let grid = triangle_grid(21);
        let err = value_iteration(&m, &f, grid, &cfg, &q, 1e-12, 1).unwrap_err();
        match err {
            Error::NonConvergence { iterations, partial, .. } => {
                assert_eq!(iterations, 1);
                assert!(partial.values.iter().any(|v| *v > 0.0));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn extract_strategy_regions() {
        let (_, m, f, q) = setup(4.0, 3.0, 5.0);
        let cfg = ThetaSearchConfig::default();
        let grid = triangle_grid(41);
        let (field, _) = value_iteration(&m, &f, grid, &cfg, &q, 1e-4, 30).unwrap();
        let strat = extract_strategy(&m, &f, &field, &cfg, &q).unwrap();
        let h = field.grid.step(0);
        for &idx in field.grid.masked_indices() {
            let x = field.grid.node_state(idx);
            let d = x.coord(1) - 0.2 * x.coord(0);
            if d.abs() <= 2.0 * h * 1.2 || x.coord(1) <= h {
                continue;
            }
            let w = strat.wait_at_node(idx);
            if d < 0.0 {
                assert_eq!(w, WaitTime::Finite(0.0), "below line at {x:?}");
            } else {
                assert_eq!(w, WaitTime::Infinite, "above line at {x:?}");
            }
        }
    }

    #[test]
    fn one_cell_gridlet_reproduces_stopping_value() {
        // A 2x2 patch in the never-impulse regime: every node value is the
        // stopping value.
        let (p, m, f, q) = setup(3.0, 4.0, 5.0);
        let cfg = ThetaSearchConfig::default();
        let bounds = StateBounds::new_box(vec![(4.0, 4.5), (4.0, 4.5)]);
        let grid = Grid::new(vec![(4.0, 4.5), (4.0, 4.5)], vec![2, 2], &bounds).unwrap();
        let (field, _) = value_iteration(&m, &f, grid, &cfg, &q, 1e-5, 20).unwrap();
        for &idx in field.grid.masked_indices() {
            let x = field.grid.node_state(idx);
            let sv = crate::flow::stopping_value(&f, &m, &x, &q).unwrap();
            assert!((field.values[idx] - sv).abs() <= 5e-5);
        }
    }
}
