use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use upstep::data::{self, gen_synthetic, Dataset, SynthSpec};
use upstep::eval::{ensemble, forgetting_report, DomainBanks, EvalResult, FeatureBank, ForgettingReport};
use upstep::trainer::{pretrain_base, upstep_from_dir, Model, RunSummary, TrainConfig};

use crate::config::{value_label, Protocol, RunConfig, SweepSpec};
use crate::plot::{line_chart, Series};
use crate::report::{write_checkpoint_evals, CheckpointEval, CHECKPOINT_EVALS};
use crate::Failure;

fn io_err(p: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", p.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn load_ds(p: &Path) -> Result<Dataset, Failure> {
    Ok(data::io::load(p)?)
}

/// Writes the resolved config next to the run's artifacts.
fn snapshot(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut c = cfg.clone();
    c.out = Some(fs::canonicalize(dir).map_err(|e| io_err(dir, e))?);
    write_json(&dir.join("config.json"), &c)
}

/// One directory per seed when there are several.
fn seed_dirs(cfg: &TrainConfig, root: &Path) -> Vec<(u64, PathBuf)> {
    match cfg.seeds.as_slice() {
        [s] => vec![(*s, root.to_path_buf())],
        seeds => seeds.iter().map(|s| (*s, root.join(format!("seed-{s}")))).collect(),
    }
}

pub fn gen_data(spec: &SynthSpec, out: &Path) -> Result<(), Failure> {
    let ds = gen_synthetic(spec)?;
    data::io::save(out, &ds)?;
    println!("wrote {} images ({} classes, {}) to {}", ds.len(), ds.classes, ds.domain_tag, out.display());
    Ok(())
}

#[derive(Serialize)]
struct PretrainResults {
    seed: u64,
    summary: RunSummary,
    source_knn_init: Option<f64>,
    source_knn_base: Option<f64>,
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), Failure> {
    let source = load_ds(&cfg.need("data.source", &cfg.data.source)?)?;
    let test =
        cfg.data.source_test.as_ref().map(|_| cfg.need("data.source_test", &cfg.data.source_test)).transpose()?;
    let test = test.map(|p| load_ds(&p)).transpose()?;
    let root = cfg.run_dir("pretrain");
    for (seed, dir) in seed_dirs(&cfg.train, &root) {
        snapshot(cfg, &dir)?;
        let (model, summary) = pretrain_base(source.unlabeled(), &cfg.train, seed, Some(&dir))?;
        let knn = |m: &Model, t: &Dataset| -> Result<f64, Failure> {
            let r =
                EvalResult::knn(&m.features(&source, "base")?, &m.features(t, "base")?, cfg.eval.k, cfg.eval.metric)?;
            Ok(r.accuracy)
        };
        let (init, base) = match &test {
            Some(t) => (Some(knn(&Model::init_base(&cfg.train, seed)?, t)?), Some(knn(&model, t)?)),
            None => (None, None),
        };
        let res = PretrainResults { seed, summary, source_knn_init: init, source_knn_base: base };
        write_json(&dir.join("results.json"), &res)?;
        println!(
            "pretrain seed {seed}: {} steps -> {}{}",
            res.summary.steps_total,
            dir.join("checkpoint").display(),
            match (init, base) {
                (Some(a), Some(b)) => format!(" (source k-NN init {a:.3}, base {b:.3})"),
                _ => String::new(),
            }
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub results: Vec<EvalResult>,
    pub forgetting: Option<ForgettingReport>,
}

fn protocols(cfg: &RunConfig, train: &FeatureBank, test: &FeatureBank) -> Result<Vec<EvalResult>, Failure> {
    let mut out = Vec::new();
    for p in &cfg.eval.protocols {
        out.push(match p {
            Protocol::Knn => EvalResult::knn(train, test, cfg.eval.k, cfg.eval.metric)?,
            Protocol::Linear => EvalResult::linear(train, test, &cfg.eval.probe)?,
        });
    }
    Ok(out)
}

/// Target-domain evaluation of `adapted` (or `base` alone), plus the
/// base+adapted ensemble when the toggle is on.
pub fn evaluate(
    cfg: &RunConfig,
    base: &Model,
    adapted: Option<&Model>,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<EvalResult>, Failure> {
    let (btr, bte) = (base.features(train, "base")?, base.features(test, "base")?);
    let Some(ad) = adapted else {
        return protocols(cfg, &btr, &bte);
    };
    let (atr, ate) = (ad.features(train, "upstep")?, ad.features(test, "upstep")?);
    let mut rows = protocols(cfg, &atr, &ate)?;
    if cfg.train.toggles.ensemble {
        let n = cfg.eval.normalize_ensemble;
        rows.extend(protocols(cfg, &ensemble(&btr, &atr, n)?, &ensemble(&bte, &ate, n)?)?);
    }
    Ok(rows)
}

fn forgetting(
    cfg: &RunConfig,
    base: &Model,
    adapted: &Model,
    t: (&Dataset, &Dataset),
) -> Result<Option<ForgettingReport>, Failure> {
    let (Some(s), Some(st)) = (&cfg.data.source, &cfg.data.source_test) else {
        return Ok(None);
    };
    let (s, st) = (load_ds(s)?, load_ds(st)?);
    let banks = |m: &Model| -> Result<DomainBanks, Failure> {
        Ok(DomainBanks {
            source_train: m.features(&s, "m")?,
            source_test: m.features(&st, "m")?,
            target_train: m.features(t.0, "m")?,
            target_test: m.features(t.1, "m")?,
        })
    };
    Ok(Some(forgetting_report(&banks(base)?, &banks(adapted)?, cfg.eval.k)?))
}

fn target_pair(cfg: &RunConfig) -> Result<(Dataset, Dataset), Failure> {
    Ok((
        load_ds(&cfg.need("data.target", &cfg.data.target)?)?,
        load_ds(&cfg.need("data.target_test", &cfg.data.target_test)?)?,
    ))
}

fn print_rows(label: &str, rows: &[EvalResult]) {
    for r in rows {
        println!("{label}: {} [{}] accuracy {:.4}", r.protocol, r.model_tags.join("+"), r.accuracy);
    }
}

pub fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let base = Model::load(&cfg.need("base", &cfg.base)?)?;
    if base.adapters.is_some() {
        return Err(Failure::Usage("`base` points at an adapted checkpoint".into()));
    }
    let adapted = cfg.adapted.as_ref().map(|_| cfg.need("adapted", &cfg.adapted)).transpose()?;
    let adapted = adapted.map(|p| Model::load(&p)).transpose()?;
    if adapted.as_ref().is_some_and(|m| m.adapters.is_none()) {
        return Err(Failure::Usage("`adapted` points at a base checkpoint".into()));
    }
    let (train, test) = target_pair(cfg)?;
    let results = evaluate(cfg, &base, adapted.as_ref(), &train, &test)?;
    let forgetting = match &adapted {
        Some(a) => forgetting(cfg, &base, a, (&train, &test))?,
        None => None,
    };
    let dir = cfg.run_dir("eval");
    snapshot(cfg, &dir)?;
    print_rows("eval", &results);
    write_json(&dir.join("results.json"), &EvalOutput { results, forgetting })
}

fn epoch_mag(summary: &RunSummary, epoch: usize) -> f64 {
    let v: Vec<f64> = summary.reports.iter().filter(|r| r.epoch == epoch).map(|r| r.cv_mag).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// k-NN of every saved checkpoint of a run, for the report's correlation.
fn checkpoint_evals(cfg: &RunConfig, dir: &Path, summary: &RunSummary, t: (&Dataset, &Dataset)) -> Result<(), Failure> {
    let mut dirs: Vec<(usize, PathBuf)> = Vec::new();
    if let Ok(rd) = fs::read_dir(dir.join("checkpoints")) {
        for e in rd.flatten() {
            let name = e.file_name().to_string_lossy().to_string();
            if let Some(n) = name.strip_prefix("epoch-").and_then(|n| n.parse().ok()) {
                dirs.push((n, e.path()));
            }
        }
    }
    dirs.sort();
    dirs.push((cfg.train.epochs, dir.join("checkpoint")));
    let mut rows = Vec::new();
    for (epoch, p) in dirs {
        let m = Model::load(&p)?;
        let acc = EvalResult::knn(&m.features(t.0, "c")?, &m.features(t.1, "c")?, cfg.eval.k, cfg.eval.metric)?;
        rows.push(CheckpointEval { epoch, cv_mag: epoch_mag(summary, epoch - 1), knn_acc: acc.accuracy });
    }
    write_checkpoint_evals(&dir.join(CHECKPOINT_EVALS), &rows)
}

/// Adapts with every configured seed; returns the last seed's evaluation.
pub fn upstep(cfg: &RunConfig) -> Result<Option<(RunSummary, Vec<EvalResult>)>, Failure> {
    let base_dir = cfg.need("base", &cfg.base)?;
    let target = load_ds(&cfg.need("data.target", &cfg.data.target)?)?;
    let test =
        cfg.data.target_test.as_ref().map(|_| cfg.need("data.target_test", &cfg.data.target_test)).transpose()?;
    let test = test.map(|p| load_ds(&p)).transpose()?;
    let root = cfg.run_dir("upstep");
    let mut last = None;
    for (seed, dir) in seed_dirs(&cfg.train, &root) {
        snapshot(cfg, &dir)?;
        let (model, summary) = upstep_from_dir(&base_dir, target.unlabeled(), &cfg.train, seed, &dir)?;
        println!(
            "upstep seed {seed}: {} steps, skip rate {:.3}, |s| {:.4} -> {:.4}",
            summary.steps_total, summary.skip_rate, summary.first_epoch_cv_mag, summary.last_epoch_cv_mag
        );
        let Some(test) = &test else { continue };
        let base = Model::load(&base_dir)?;
        let results = evaluate(cfg, &base, Some(&model), &target, test)?;
        let forgetting = forgetting(cfg, &base, &model, (&target, test))?;
        if cfg.train.checkpoint_every > 0 && cfg.train.epochs > 0 {
            checkpoint_evals(cfg, &dir, &summary, (&target, test))?;
        }
        print_rows(&format!("seed {seed}"), &results);
        write_json(&dir.join("results.json"), &EvalOutput { results: results.clone(), forgetting })?;
        last = Some((summary, results));
    }
    Ok(last)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub knn_acc: f64,
    pub linear_acc: f64,
    pub skip_rate: f64,
    pub final_cv_mag: f64,
}

fn sweep_one(spec: &SweepSpec, v: &serde_json::Value, dir: &Path) -> Result<SweepRow, Failure> {
    let mut cfg = spec.config.clone();
    cfg.train = spec.apply(&spec.config.train, v)?;
    cfg.train.seeds.truncate(1);
    // a different prototype count needs its own base
    let needs_base = cfg.base.is_none() || spec.param == crate::config::SweepParam::Prototypes;
    if needs_base {
        cfg.out = Some(dir.join("pretrain"));
        pretrain(&cfg)?;
        cfg.base = Some(dir.join("pretrain").join("checkpoint"));
    }
    cfg.out = Some(dir.join("upstep"));
    if cfg.data.target_test.is_none() {
        return Err(Failure::Usage("sweep needs data.target_test".into()));
    }
    let (summary, rows) = upstep(&cfg)?.ok_or_else(|| Failure::Runtime("no evaluation produced".into()))?;
    let tag = if cfg.train.toggles.ensemble { 2 } else { 1 };
    let pick = |p: &str| {
        rows.iter()
            .filter(|r| r.protocol == p && r.model_tags.len() == tag)
            .map(|r| r.accuracy)
            .next()
            .unwrap_or(f64::NAN)
    };
    Ok(SweepRow {
        value: value_label(v),
        knn_acc: pick("knn"),
        linear_acc: pick("linear"),
        skip_rate: summary.skip_rate,
        final_cv_mag: summary.last_epoch_cv_mag,
    })
}

/// Runs every value; failures are recorded and the sweep carries on.
pub fn sweep(spec: &SweepSpec, parallel: bool) -> Result<Vec<SweepRow>, Failure> {
    let root = spec.config.run_dir("sweep");
    fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    let root = fs::canonicalize(&root).map_err(|e| io_err(&root, e))?;
    write_json(&root.join("sweep.json"), spec)?;
    let dir_of = |v: &serde_json::Value| {
        let label: String = value_label(v)
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || ".-_+".contains(c) { c } else { '_' })
            .collect();
        root.join(format!("{}={label}", spec.param.name()))
    };
    let outcomes: Vec<Result<SweepRow, Failure>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = spec.values.iter().map(|v| s.spawn(move || sweep_one(spec, v, &dir_of(v)))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Failure::Runtime("sub-run panicked".into()))))
                .collect()
        })
    } else {
        spec.values.iter().map(|v| sweep_one(spec, v, &dir_of(v))).collect()
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (v, o) in spec.values.iter().zip(outcomes) {
        match o {
            Ok(r) => rows.push(r),
            Err(e) => {
                eprintln!("sweep value {}: {e}", value_label(v));
                failures.push(serde_json::json!({ "value": v, "error": e.to_string() }));
                rows.push(SweepRow {
                    value: value_label(v),
                    knn_acc: f64::NAN,
                    linear_acc: f64::NAN,
                    skip_rate: f64::NAN,
                    final_cv_mag: f64::NAN,
                });
            }
        }
    }
    let path = root.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    // numeric values on their own axis, labels by position
    let xs: Vec<f64> = spec.values.iter().enumerate().map(|(i, v)| v.as_f64().unwrap_or(i as f64)).collect();
    let series = |name, f: fn(&SweepRow) -> f64| Series {
        name,
        points: xs.iter().zip(&rows).map(|(x, r)| (*x, f(r))).collect(),
    };
    let svg = line_chart(
        &format!("accuracy vs {}", spec.param.name()),
        spec.param.name(),
        "target accuracy",
        &[series("k-NN", |r| r.knn_acc), series("linear", |r| r.linear_acc)],
    );
    let p = root.join("accuracy.svg");
    fs::write(&p, svg).map_err(|e| io_err(&p, e))?;
    if !failures.is_empty() {
        write_json(&root.join("failures.json"), &failures)?;
        return Err(Failure::Runtime(format!("{} of {} sweep runs failed", failures.len(), spec.values.len())));
    }
    println!("sweep: {} runs -> {}", rows.len(), path.display());
    Ok(rows)
}
