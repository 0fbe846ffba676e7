//! Executes a stationary strategy from an initial state: the trajectory,
//! impulse events, and the accumulated total cost.

use serde::Serialize;

use crate::flow::{self, FlowSpec, QuadratureConfig};
use crate::model::{Action, ImpulseModel, State, StationaryStrategy, WaitTime};
use crate::Result;

/// Soft limits turning pathological strategies into tagged terminations.
#[derive(Clone, Copy, Debug)]
pub struct SimCaps {
    /// Consecutive zero-wait impulses before giving up.
    pub max_impulses: usize,
    /// Wall-clock horizon of model time.
    pub t_horizon: f64,
}

impl Default for SimCaps {
    fn default() -> Self {
        SimCaps { max_impulses: 1000, t_horizon: 200.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Termination {
    /// The strategy chose an infinite wait; the stopping value was added.
    Stopped,
    /// The state entered the absorbing cemetery set.
    Cemetery,
    /// Model time reached the horizon mid-wait.
    Horizon,
    /// Too many consecutive zero-wait impulses.
    ImpulseCap,
}

/// One applied impulse.
#[derive(Clone, Debug)]
pub struct ImpulseEvent {
    pub time: f64,
    pub pre: State,
    pub action: Action,
    pub post: State,
    pub cost: f64,
}

/// A flow segment between impulses, with path samples for output.
#[derive(Clone, Debug)]
pub struct Segment {
    pub start: State,
    pub start_time: f64,
    pub duration: f64,
    /// (absolute time, state) samples along the segment.
    pub samples: Vec<(f64, State)>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub segments: Vec<Segment>,
    pub impulses: Vec<ImpulseEvent>,
    pub total_cost: f64,
    pub terminated: Termination,
}

fn sample_segment(
    flow: &FlowSpec,
    x: &State,
    t0: f64,
    duration: f64,
) -> Result<Vec<(f64, State)>> {
    // 200 points per segment or one per 0.01 time units, whichever is
    // finer; presentation only, the cost is integrated independently.
    let n = ((duration / 0.01).ceil() as usize).clamp(200, 20_000);
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let dt = duration * k as f64 / n as f64;
        out.push((t0 + dt, flow::advance(flow, x, dt)?));
    }
    Ok(out)
}

/// Runs the strategy from `x0`, accumulating running and impulse costs
/// until it stops, is absorbed, hits the horizon, or trips the impulse cap.
pub fn simulate(
    model: &ImpulseModel,
    flow: &FlowSpec,
    strategy: &dyn StationaryStrategy,
    x0: &State,
    caps: &SimCaps,
    q: &QuadratureConfig,
) -> Result<Trajectory> {
    let mut segments = Vec::new();
    let mut impulses = Vec::new();
    let mut total_cost = 0.0;
    let mut x = x0.clone();
    let mut t = 0.0;
    let mut zero_run = 0usize;

    let terminated = loop {
        if model.in_cemetery(&x) {
            break Termination::Cemetery;
        }
        let (wait, action) = strategy.decide(&x)?;
        match wait {
            WaitTime::Infinite => {
                let remaining = (caps.t_horizon - t).max(0.0);
                if remaining > 0.0 {
                    let mut q_stop = q.clone();
                    q_stop.t_max = remaining;
                    q_stop.tail_bound_check = false;
                    total_cost += flow::stopping_value(flow, model, &x, &q_stop)?;
                    segments.push(Segment {
                        start: x.clone(),
                        start_time: t,
                        duration: remaining,
                        samples: sample_segment(flow, &x, t, remaining)?,
                    });
                }
                break Termination::Stopped;
            }
            WaitTime::Finite(theta) => {
                if t + theta > caps.t_horizon {
                    let dur = caps.t_horizon - t;
                    if dur > 0.0 {
                        total_cost += flow::running_cost(flow, model, &x, dur, q)?;
                        segments.push(Segment {
                            start: x.clone(),
                            start_time: t,
                            duration: dur,
                            samples: sample_segment(flow, &x, t, dur)?,
                        });
                    }
                    break Termination::Horizon;
                }
                if theta > 0.0 {
                    total_cost += flow::running_cost(flow, model, &x, theta, q)?;
                    segments.push(Segment {
                        start: x.clone(),
                        start_time: t,
                        duration: theta,
                        samples: sample_segment(flow, &x, t, theta)?,
                    });
                    x = flow::advance(flow, &x, theta)?;
                    t += theta;
                    zero_run = 0;
                } else {
                    zero_run += 1;
                    if zero_run > caps.max_impulses {
                        break Termination::ImpulseCap;
                    }
                }
                let cost = model.impulse_cost(&x, action);
                let post = model.jump(&x, action);
                impulses.push(ImpulseEvent {
                    time: t,
                    pre: x.clone(),
                    action,
                    post: post.clone(),
                    cost,
                });
                total_cost += cost;
                x = post;
            }
        }
    };

    Ok(Trajectory { segments, impulses, total_cost, terminated })
}

/// Total cost of the strategy from each initial state.
pub fn evaluate_strategy(
    model: &ImpulseModel,
    flow: &FlowSpec,
    strategy: &dyn StationaryStrategy,
    states: &[State],
    caps: &SimCaps,
    q: &QuadratureConfig,
) -> Result<Vec<f64>> {
    states
        .iter()
        .map(|x| simulate(model, flow, strategy, x, caps, q).map(|t| t.total_cost))
        .collect()
}
