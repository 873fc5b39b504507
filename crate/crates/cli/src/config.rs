use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use upstep::eval::{Metric, ProbeConfig};
use upstep::trainer::TrainConfig;

use crate::Failure;

pub const RUNS_DIR_ENV: &str = "UPSTEP_RUNS_DIR";

/// Dataset directories. Relative paths are taken from the config file's
/// directory; the snapshot written into a run directory stores them absolute.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub source: Option<PathBuf>,
    pub source_test: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Knn,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub k: usize,
    pub metric: Metric,
    pub protocols: Vec<Protocol>,
    pub probe: ProbeConfig,
    /// L2-normalize each bank before concatenating for the ensemble.
    pub normalize_ensemble: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            k: 20,
            metric: Metric::Cosine,
            protocols: vec![Protocol::Knn, Protocol::Linear],
            probe: ProbeConfig::default(),
            normalize_ensemble: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataPaths,
    /// Base checkpoint directory (upstep, eval).
    pub base: Option<PathBuf>,
    /// Adapted checkpoint directory (eval).
    pub adapted: Option<PathBuf>,
    /// Run directory; relative values land under `$UPSTEP_RUNS_DIR` (default `runs`).
    pub out: Option<PathBuf>,
    pub eval: EvalSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    SPhi,
    Prototypes,
    LoraRank,
    LayerPolicy,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::SPhi => "s_phi",
            SweepParam::Prototypes => "prototypes",
            SweepParam::LoraRank => "lora_rank",
            SweepParam::LayerPolicy => "layer_policy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<serde_json::Value>,
    #[serde(default)]
    pub config: RunConfig,
}

fn parse<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T, Failure> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Failure::Usage(format!("{}: at `{field}`: {}", path.display(), e.inner()))
    })
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn absolutize(p: &mut Option<PathBuf>, dir: &Path) {
    if let Some(x) = p {
        if x.is_relative() {
            *x = dir.join(&*x);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let mut cfg: Self = parse(&read(path)?, path)?;
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let dir = std::fs::canonicalize(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
        cfg.rebase(&dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rebase(&mut self, dir: &Path) {
        for p in [
            &mut self.data.source,
            &mut self.data.source_test,
            &mut self.data.target,
            &mut self.data.target_test,
            &mut self.base,
            &mut self.adapted,
        ] {
            absolutize(p, dir);
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.train.validate().map_err(|e| Failure::Usage(format!("train: {e}")))?;
        if self.eval.k == 0 {
            return Err(Failure::Usage("eval.k must be >= 1".into()));
        }
        self.eval.probe_ok()
    }

    /// Output directory for `command`, honoring `UPSTEP_RUNS_DIR`.
    pub fn run_dir(&self, command: &str) -> PathBuf {
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from(command));
        if out.is_absolute() {
            return out;
        }
        let root = std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(out)
    }

    /// A referenced path that must exist for this command.
    pub fn need(&self, what: &str, p: &Option<PathBuf>) -> Result<PathBuf, Failure> {
        let p = p.clone().ok_or_else(|| Failure::Usage(format!("config needs `{what}`")))?;
        if !p.exists() {
            return Err(Failure::Usage(format!("`{what}` = {} does not exist", p.display())));
        }
        Ok(p)
    }
}

impl EvalSpec {
    fn probe_ok(&self) -> Result<(), Failure> {
        let p = &self.probe;
        if !(p.lr > 0.0) || !(p.weight_decay >= 0.0) {
            return Err(Failure::Usage("eval.probe needs lr > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let mut spec: Self = parse(&read(path)?, path)?;
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let dir = std::fs::canonicalize(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
        spec.config.rebase(&dir);
        spec.config.validate()?;
        if spec.values.is_empty() {
            return Err(Failure::Usage(format!("{}: `values` must not be empty", path.display())));
        }
        for v in &spec.values {
            spec.apply(&spec.config.train, v)?;
        }
        Ok(spec)
    }

    /// `base` with the swept parameter set to `v`.
    pub fn apply(&self, base: &TrainConfig, v: &serde_json::Value) -> Result<TrainConfig, Failure> {
        let bad = || Failure::Usage(format!("sweep value {v} is not valid for {}", self.param.name()));
        let mut c = base.clone();
        match self.param {
            SweepParam::SPhi => c.s_phi = v.as_f64().ok_or_else(bad)?,
            SweepParam::Prototypes => c.ssl.prototypes = v.as_u64().ok_or_else(bad)? as usize,
            SweepParam::LoraRank => c.adapter.rank = v.as_u64().ok_or_else(bad)? as usize,
            SweepParam::LayerPolicy => c.adapter.policy = v.as_str().ok_or_else(bad)?.parse().map_err(|_| bad())?,
        }
        c.validate().map_err(|e| Failure::Usage(format!("sweep value {v}: {e}")))?;
        Ok(c)
    }
}

/// Value as used in run directory names and the summary CSV.
pub fn value_label(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
