//! Loading model specifications from JSON: a built-in name plus parameters,
//! with an optional discounted wrap.
//!
//! ```json
//! { "model": "sir", "params": { "beta": 4.0, "gamma": 3.0, "c": 5.0, "n": 10.0 } }
//! ```

use serde::{Deserialize, Serialize};

use crate::flow::FlowSpec;
use crate::model::{ImpulseModel, State, StateBounds};
use crate::sir::{self, SirParams};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

/// Which flow representation to build for models that have both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    ClosedForm,
    OdeField,
}

impl Default for FlowKind {
    fn default() -> Self {
        FlowKind::ClosedForm
    }
}

/// A model constructed from a JSON spec.
pub struct BuiltModel {
    pub model: ImpulseModel,
    pub flow: FlowSpec,
    pub dim: usize,
    /// Present when the spec named the SIR built-in.
    pub sir_params: Option<SirParams>,
    /// Model-recommended quadrature horizon, if any.
    pub suggested_t_max: Option<f64>,
}

#[derive(Deserialize)]
struct SirSpec {
    beta: f64,
    gamma: f64,
    c: f64,
    n: f64,
}

#[derive(Deserialize)]
struct Constant1dSpec {
    k: f64,
    y_max: f64,
    #[serde(default = "default_impulse_cost")]
    impulse_cost: f64,
}

fn default_impulse_cost() -> f64 {
    1.0
}

/// Builds a model from its JSON spec. Known built-ins: `sir`, `constant1d`.
pub fn build_model(spec: &ModelSpec, flow_kind: FlowKind, ode_step: f64) -> Result<BuiltModel> {
    match spec.model.as_str() {
        "sir" => {
            let s: SirSpec = serde_json::from_value(spec.params.clone())
                .map_err(|e| Error::Invalid(format!("sir params: {e}")))?;
            let p = SirParams::new(s.beta, s.gamma, s.c, s.n)?;
            let flow = match flow_kind {
                FlowKind::ClosedForm => sir::flow_spec(&p),
                FlowKind::OdeField => sir::ode_flow_spec(&p, ode_step),
            };
            Ok(BuiltModel {
                model: sir::model(&p),
                flow,
                dim: 2,
                sir_params: Some(p),
                suggested_t_max: Some(p.default_t_max()),
            })
        }
        "constant1d" => {
            let s: Constant1dSpec = serde_json::from_value(spec.params.clone())
                .map_err(|e| Error::Invalid(format!("constant1d params: {e}")))?;
            if !(s.y_max > 0.0) {
                return Err(Error::Invalid("constant1d: y_max must be > 0".into()));
            }
            let k = s.k;
            let ci = s.impulse_cost;
            let model = ImpulseModel::builder(StateBounds::new_box(vec![(0.0, s.y_max)]))
                .gradual_cost(move |_| k)
                .impulse_cost(move |_, _| ci)
                .jump(|y, _| y.clone())
                .build()?;
            let flow = FlowSpec::closed_form(|x: &State, t: f64| {
                State::new(vec![x.coord(0) * (-t).exp()])
            });
            Ok(BuiltModel { model, flow, dim: 1, sir_params: None, suggested_t_max: None })
        }
        other => Err(Error::Invalid(format!(
            "unknown model '{other}' (built-ins: sir, constant1d)"
        ))),
    }
}
