//! Dynamic programming for optimal impulse control of deterministic flows.
//!
//! The controlled system drifts along a flow `φ(x,t)` between instantaneous,
//! costed jumps `x → l(x,a)`. A policy picks, in each state, a wait time
//! `θ ∈ [0,∞]` and an action; `θ = ∞` means "never intervene" and pays the
//! residual running cost. The value function solves the integral Bellman
//! equation
//!
//! ```text
//! V(x) = inf_{θ,a} { ∫_(0,θ] Cg(φ(x,u)) du + 1{θ<∞} [ CI(φ(x,θ),a) + V(l(φ(x,θ),a)) ] }
//! ```
//!
//! which this crate solves by successive approximations on a masked grid,
//! extracts a stationary strategy from, and cross-checks against the
//! equivalent differential form (zero forward generator off the intervention
//! set, zero impulse gap with nonnegative backward generator on it).
//!
//! An SIR epidemic model with closed-form flow and piecewise-analytic value
//! functions serves as the built-in test bed.

pub mod bellman;
pub mod discount;
pub mod flow;
pub mod grid;
pub mod io;
pub mod model;
pub mod modelspec;
pub mod sim;
pub mod sir;
pub mod verify;

mod error;

pub use error::{Error, Result};
