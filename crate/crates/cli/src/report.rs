use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use upstep::trainer::StepReport;

use crate::plot::{line_chart, Series};
use crate::Failure;

pub const CHECKPOINT_EVALS: &str = "checkpoint_evals.csv";

/// k-NN accuracy of one saved checkpoint next to the mean ‖s‖ of its epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub epoch: usize,
    pub cv_mag: f64,
    pub knn_acc: f64,
}

/// Pearson correlation; `None` for fewer than two points or a constant series.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepReport>, Failure> {
    if !path.is_file() {
        return Err(Failure::Runtime(format!("missing metrics file {}", path.display())));
    }
    let mut rd = csv::Reader::from_path(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    rd.deserialize().collect::<Result<_, _>>().map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn write_checkpoint_evals(path: &Path, rows: &[CheckpointEval]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn read_checkpoint_evals(path: &Path) -> Result<Vec<CheckpointEval>, Failure> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    rd.deserialize().collect::<Result<_, _>>().map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Fraction of steps skipped so far, after each step.
pub fn cumulative_skip_rate(reports: &[StepReport]) -> Vec<f64> {
    let mut skipped = 0usize;
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            skipped += usize::from(!r.updated);
            skipped as f64 / (i + 1) as f64
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub steps: usize,
    pub skip_rate: f64,
    pub plots: Vec<PathBuf>,
    pub pearson_cv_mag_knn: Option<f64>,
}

pub fn report(run: &Path, out: &Path) -> Result<Report, Failure> {
    let reports = read_metrics(&run.join("metrics.csv"))?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let step = |f: &dyn Fn(&StepReport) -> f64| reports.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    let skip = cumulative_skip_rate(&reports);
    let charts = [
        ("cv_mag.svg", "center vector magnitude", "|s|", step(&|r| r.cv_mag)),
        ("eta.svg", "learning rate", "eta", step(&|r| r.eta)),
        (
            "skip_rate.svg",
            "cumulative skip rate",
            "skipped / steps",
            reports.iter().zip(&skip).map(|(r, s)| (r.step as f64, *s)).collect(),
        ),
    ];
    let mut plots = Vec::new();
    for (file, title, y, points) in charts {
        let p = out.join(file);
        fs::write(&p, line_chart(title, "step", y, &[Series { name: y, points }]))
            .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
        plots.push(p);
    }
    let evals = run.join(CHECKPOINT_EVALS);
    let pearson_cv_mag_knn = if evals.is_file() {
        let rows = read_checkpoint_evals(&evals)?;
        let mags: Vec<f64> = rows.iter().map(|r| r.cv_mag).collect();
        let accs: Vec<f64> = rows.iter().map(|r| r.knn_acc).collect();
        let p = out.join("cv_mag_vs_knn.svg");
        let pts = mags.iter().copied().zip(accs.iter().copied()).collect();
        fs::write(
            &p,
            line_chart(
                "k-NN accuracy vs center vector magnitude",
                "|s|",
                "k-NN accuracy",
                &[Series { name: "checkpoints", points: pts }],
            ),
        )
        .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
        plots.push(p);
        pearson(&mags, &accs)
    } else {
        None
    };
    Ok(Report { steps: reports.len(), skip_rate: skip.last().copied().unwrap_or(0.0), plots, pearson_cv_mag_knn })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_analytic_cases() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let neg: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[1.0; 10]), None);
        assert_eq!(pearson(&[1.0], &[2.0]), None);
    }

    fn step(i: u64, updated: bool) -> StepReport {
        StepReport { step: i, epoch: 0, loss_ce: 1.0, loss_cv: 0.0, cv_mag: 0.5, eta: 0.01, updated }
    }

    #[test]
    fn skip_curve() {
        let r: Vec<_> = (0..4).map(|i| step(i, true)).collect();
        assert!(cumulative_skip_rate(&r).iter().all(|&v| v == 0.0));
        let r = vec![step(0, true), step(1, false), step(2, false), step(3, true)];
        assert_eq!(cumulative_skip_rate(&r), vec![0.0, 0.5, 2.0 / 3.0, 0.5]);
    }
}
