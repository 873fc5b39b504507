//! Online/offline training loop: source pretraining of the base model and
//! center-vector-regulated adaptation on an unlabeled target domain.

mod config;
mod model;
mod run;

pub use config::{PretrainConfig, Toggles, TrainConfig};
pub use model::{Model, PROTOTYPES};
pub use run::{pretrain_base, run_upstep, upstep_from_dir, MetricsSink, RunSummary, METRICS_HEADER};

use serde::{Deserialize, Serialize};

use crate::cvr::{self, CvrConfig, CvrState};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Graph, ParamStore};
use crate::numcore::Tensor;
use crate::ssl::{self, SslConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_cv: f64,
    pub cv_mag: f64,
    /// Rate the step used, or would have used had it not been skipped.
    pub eta: f64,
    pub updated: bool,
}

/// Everything that changes during a run. `model.store` is the online
/// stream; `offline` is a same-layout copy read under stop-gradient.
pub struct RunState {
    pub model: Model,
    pub offline: ParamStore,
    pub adam: AdamState,
    pub cvr: CvrState,
    pub ssl: SslConfig,
    pub toggles: Toggles,
    pub offline_momentum: f64,
    pub step: u64,
    pub epoch: usize,
}

impl RunState {
    pub fn new(model: Model, cfg: &TrainConfig, cvr: CvrConfig, toggles: Toggles) -> Self {
        Self {
            offline: model.store.clone(),
            model,
            adam: AdamState::new(cfg.adam.clone()),
            cvr: CvrState::new(cvr),
            ssl: cfg.ssl.clone(),
            toggles,
            offline_momentum: cfg.offline_momentum,
            step: 0,
            epoch: 0,
        }
    }
}

fn finite(name: &str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{name} is {v} at step {step}")))
    }
}

/// One training step on two views of the same batch: `x_s` feeds the online
/// stream, `x_t` the offline stream.
pub fn upstep_step(state: &mut RunState, x_s: &Tensor, x_t: &Tensor) -> Result<StepReport> {
    let step = state.step;
    let m = &state.model;

    // offline targets, no gradient
    let p_t = {
        let mut g = Graph::no_grad(&state.offline);
        let f = m.encoder.forward(&mut g, m.adapters.as_ref(), x_t)?;
        let z = m.projector.forward(&mut g, f)?;
        let z = g.tape.tensor(z);
        ssl::offline_assign(&z, state.offline.get(m.prototype_id()), &state.ssl)?
    };

    let mut g = Graph::new(&m.store);
    let f = m.encoder.forward(&mut g, m.adapters.as_ref(), x_s)?;
    let z = m.projector.forward(&mut g, f)?;
    let protos = g.param(m.prototype_id());
    let p_s = ssl::online_assign(&mut g.tape, z, protos, state.ssl.tau, state.ssl.normalize)?;
    let ce = ssl::cluster_ce_loss(&mut g.tape, p_s, &p_t)?;
    let s = cvr::center_vector(&mut g.tape, f).map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
    let cv = cvr::cv_loss(&mut g.tape, s, state.cvr.config.s_phi);
    let loss_ce = finite("loss_ce", g.tape.scalar_value(ce), step)?;
    let loss_cv = finite("loss_cv", g.tape.scalar_value(cv), step)?;
    let cv_mag = g.tape.value(s).iter().map(|v| v * v).sum::<f64>().sqrt();

    let eta = if state.toggles.cv_lr_reg { state.cvr.regulated_lr(cv_mag)? } else { state.cvr.config.eta0 };
    let updated = if state.toggles.cv_gate {
        state.cvr.gate(cv_mag)
    } else {
        state.cvr.steps_total += 1;
        state.cvr.steps_updated += 1;
        state.cvr.prev_mag = cv_mag.clamp(0.0, 1.0);
        true
    };

    if updated {
        let loss = if state.toggles.cv_loss {
            let w = g.tape.scale(cv, state.cvr.config.lambda_cv);
            g.tape.add(ce, w)?
        } else {
            ce
        };
        let grads = g.backward(loss)?;
        drop(g);
        state.adam.step(&mut state.model.store, &grads, eta)?;
        state.offline.follow(&state.model.store, state.offline_momentum)?;
    }
    state.step += 1;
    Ok(StepReport { step, epoch: state.epoch, loss_ce, loss_cv, cv_mag, eta, updated })
}
