use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{upstep_step, Model, RunState, StepReport, Toggles, TrainConfig};
use crate::cvr::CvrConfig;
use crate::data::{two_views, Unlabeled};
use crate::error::{Error, Result};
use crate::nn::init::rng_stream;

pub const METRICS_HEADER: &str = "step,epoch,loss_ce,loss_cv,cv_mag,eta,updated";

const STREAM_EPOCH: u64 = 0x1000_0000;
const STREAM_VIEWS: u64 = 0x2000_0000_0000;
// keeps pretraining and adaptation from sharing batch orders under one seed
const STREAM_PRETRAIN: u64 = 0x4000_0000_0000_0000;

/// Streams step reports to `metrics.csv`.
pub struct MetricsSink {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self { out, path: path.to_path_buf() })
    }

    pub fn push(&mut self, r: &StepReport) -> Result<()> {
        writeln!(self.out, "{},{},{},{},{},{},{}", r.step, r.epoch, r.loss_ce, r.loss_cv, r.cv_mag, r.eta, r.updated)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_total: u64,
    pub steps_updated: u64,
    pub steps_skipped: u64,
    pub skip_rate: f64,
    pub first_epoch_cv_mag: f64,
    pub last_epoch_cv_mag: f64,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
    #[serde(skip)]
    pub reports: Vec<StepReport>,
}

fn epoch_mean(reports: &[StepReport], epoch: usize) -> f64 {
    let v: Vec<f64> = reports.iter().filter(|r| r.epoch == epoch).map(|r| r.cv_mag).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Drives `upstep_step` over `epochs` passes of `data`. Batch order and
/// views come from per-epoch and per-step streams of `seed`.
fn train_loop(
    state: &mut RunState,
    data: Unlabeled<'_>,
    cfg: &TrainConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    stream_salt: u64,
    out: Option<&Path>,
    mut checkpoint: impl FnMut(&Model, &Path, u64) -> Result<()>,
) -> Result<Vec<StepReport>> {
    if data.len() < batch_size {
        return Err(Error::Validation(format!("{} images cannot fill a batch of {batch_size}", data.len())));
    }
    let mut sink = out.map(|d| MetricsSink::create(&d.join("metrics.csv"))).transpose()?;
    let mut reports = Vec::new();
    for epoch in 0..epochs {
        state.epoch = epoch;
        let batches =
            data.epoch_batches(batch_size, &mut rng_stream(seed, stream_salt ^ (STREAM_EPOCH + epoch as u64)));
        for idx in batches {
            let mut rng = rng_stream(seed, stream_salt ^ (STREAM_VIEWS + state.step));
            let (x_s, x_t) = two_views(&data.gather(&idx), &cfg.augment, &mut rng)?;
            let r = upstep_step(state, &x_s, &x_t)?;
            if let Some(s) = sink.as_mut() {
                s.push(&r)?;
            }
            reports.push(r);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < epochs {
                checkpoint(&state.model, &dir.join("checkpoints").join(format!("epoch-{:04}", epoch + 1)), state.step)?;
            }
        }
    }
    if let Some(s) = sink {
        s.finish()?;
    }
    Ok(reports)
}

fn summarize(state: &RunState, reports: Vec<StepReport>, before: String, epochs: usize) -> RunSummary {
    RunSummary {
        steps_total: state.cvr.steps_total,
        steps_updated: state.cvr.steps_updated,
        steps_skipped: state.cvr.steps_skipped,
        skip_rate: state.cvr.skip_rate(),
        first_epoch_cv_mag: epoch_mean(&reports, 0),
        last_epoch_cv_mag: epoch_mean(&reports, epochs.saturating_sub(1)),
        encoder_digest_before: before,
        encoder_digest_after: state.model.encoder_digest(),
        reports,
    }
}

/// Trains a base model on the source domain: full encoder and projector,
/// no adapters, center-vector terms off. With `out`, writes
/// `out/checkpoint` and `out/metrics.csv`.
pub fn pretrain_base(
    source: Unlabeled<'_>,
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<(Model, RunSummary)> {
    cfg.validate()?;
    if let Some(d) = out {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let model = Model::init_base(cfg, seed)?;
    let before = model.encoder_digest();
    let cvr = CvrConfig { eta0: cfg.pretrain.lr, lambda_cv: 0.0, ..cfg.cvr() };
    let mut state = RunState::new(model, cfg, cvr, Toggles::NONE);
    state.ssl.sinkhorn_eps = cfg.pretrain.sinkhorn_eps;
    state.ssl.sinkhorn_iters = cfg.pretrain.sinkhorn_iters;
    let reports = train_loop(
        &mut state,
        source,
        cfg,
        cfg.pretrain.epochs,
        cfg.pretrain.batch_size,
        seed,
        STREAM_PRETRAIN,
        out,
        |m, dir, step| m.save_base(dir, step).map(drop),
    )?;
    if let Some(d) = out {
        state.model.save_base(&d.join("checkpoint"), state.step)?;
        state.model.base_path = Some(fs::canonicalize(d.join("checkpoint")).map_err(|e| Error::io(d, e))?);
    }
    let summary = summarize(&state, reports, before, cfg.pretrain.epochs);
    Ok((state.model, summary))
}

/// Adapts a copy of `base` to the target domain through fresh adapters.
/// Only images are visible here. The base encoder must come back
/// bit-identical; with `out`, writes `out/checkpoint` (adapted) and
/// `out/metrics.csv`.
pub fn run_upstep(
    base: &Model,
    target: Unlabeled<'_>,
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<(Model, RunSummary)> {
    cfg.validate()?;
    if base.adapters.is_some() {
        return Err(Error::Contract("run_upstep expects a base model without adapters".into()));
    }
    if let Some(d) = out {
        if base.base_path.is_none() {
            return Err(Error::Contract("writing an adapted checkpoint needs the base saved on disk".into()));
        }
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let before = base.encoder_digest();
    let mut model = base.clone();
    model.attach_adapters(cfg.adapter.clone(), seed)?;
    let mut state = RunState::new(model, cfg, cfg.cvr(), cfg.toggles);
    let reports = train_loop(&mut state, target, cfg, cfg.epochs, cfg.batch_size, seed, 0, out, |m, dir, step| {
        m.save_adapted(dir, step).map(drop)
    })?;
    let summary = summarize(&state, reports, before, cfg.epochs);
    if summary.encoder_digest_after != summary.encoder_digest_before {
        return Err(Error::Contract("base encoder parameters changed during adaptation".into()));
    }
    if let Some(d) = out {
        state.model.save_adapted(&d.join("checkpoint"), state.step)?;
        let text = serde_json::to_vec_pretty(&summary)?;
        let p = d.join("summary.json");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok((state.model, summary))
}

/// [`run_upstep`] from a base checkpoint directory.
pub fn upstep_from_dir(
    base_dir: &Path,
    target: Unlabeled<'_>,
    cfg: &TrainConfig,
    seed: u64,
    out: &Path,
) -> Result<(Model, RunSummary)> {
    if !base_dir.join(crate::nn::checkpoint::MANIFEST).is_file() {
        return Err(Error::Validation(format!("no base checkpoint at {}", base_dir.display())));
    }
    let base = Model::load(base_dir)?;
    if base.adapters.is_some() {
        return Err(Error::Validation(format!("{} is an adapted checkpoint, not a base", base_dir.display())));
    }
    run_upstep(&base, target, cfg, seed, Some(out))
}
