//! Experiment specification files.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::Algorithm;
use crate::graphs::TopologyKind;

use super::HarnessError;

/// The literal string `"auto"` in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

/// A number, or `"auto"` to let the planner choose it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrAuto {
    Value(f64),
    Auto(AutoTag),
}

impl OrAuto {
    pub fn value(&self) -> Option<f64> {
        match self {
            OrAuto::Value(v) => Some(*v),
            OrAuto::Auto(_) => None,
        }
    }

    pub fn is_auto(&self) -> bool {
        matches!(self, OrAuto::Auto(_))
    }
}

impl fmt::Display for OrAuto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrAuto::Value(v) => write!(f, "{v}"),
            OrAuto::Auto(_) => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunTag {
    Run,
}

/// Seed for synthetic data: fixed, or `"run"` to reuse each run's seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSeed {
    Fixed(u64),
    Run(RunTag),
}

impl DataSeed {
    pub fn resolve(&self, run_seed: u64) -> u64 {
        match self {
            DataSeed::Fixed(s) => *s,
            DataSeed::Run(_) => run_seed,
        }
    }
}

impl Default for DataSeed {
    fn default() -> Self {
        DataSeed::Run(RunTag::Run)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Sort by label, then split into contiguous blocks.
    #[default]
    Sorted,
    Shuffled,
}

fn default_rho() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLogisticSpec {
    /// Samples per agent.
    pub m: usize,
    pub d: usize,
    /// Norm of each agent's feature offset; 0 gives i.i.d. agents.
    #[serde(default)]
    pub shift: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub data_seed: DataSeed,
    /// Held-out samples per agent; 0 disables test accuracy.
    #[serde(default)]
    pub test_per_agent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMulticlassSpec {
    pub samples_per_agent: usize,
    pub d: usize,
    pub classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub hidden: usize,
    #[serde(default)]
    pub data_seed: DataSeed,
    #[serde(default)]
    pub partition: PartitionScheme,
    #[serde(default)]
    pub test_samples: usize,
}

fn default_separation() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibsvmSpec {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    /// Feature count before the bias column; inferred from the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub partition: PartitionScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub partition: PartitionScheme,
}

fn default_hidden() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    SyntheticLogistic(SyntheticLogisticSpec),
    SyntheticMulticlass(SyntheticMulticlassSpec),
    Libsvm(LibsvmSpec),
    Mnist(MnistSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub n: usize,
    /// Edge probability for Erdos-Renyi graphs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Dense mixing matrix to use instead of Metropolis weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub p: Vec<f64>,
    pub local_steps: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn default_one() -> f64 {
    1.0
}

fn default_every() -> usize {
    1
}

fn default_sigma() -> OrAuto {
    OrAuto::Auto(AutoTag::Auto)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub eta_l: OrAuto,
    pub eta_c: OrAuto,
    #[serde(default = "default_one")]
    pub alpha: f64,
    pub batch_size: usize,
    /// Communication rounds `K`.
    pub rounds: usize,
    #[serde(default = "default_every")]
    pub metrics_every: usize,
    #[serde(default)]
    pub algorithm: Algorithm,
    /// Gradient noise level for the planner; `"auto"` estimates it at the
    /// starting point (0 in full-batch runs).
    #[serde(default = "default_sigma")]
    pub sigma: OrAuto,
    /// Lower bound on the optimal value, used for planning.
    #[serde(default)]
    pub f_star: f64,
    /// Smoothness constant; required for planning with models that have no
    /// analytic bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StoppingSpec {
    /// Threshold on the running average of `||grad f(x-bar)||^2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_threshold: Option<f64>,
    /// Absolute test-accuracy threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_threshold: Option<f64>,
    /// End a run as soon as the training threshold is met.
    #[serde(default)]
    pub halt_at_train_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Worker threads for independent runs; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_true")]
    pub plots: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub workload: Workload,
    pub topology: TopologySpec,
    pub grid: GridSpec,
    pub run: RunSpec,
    #[serde(default)]
    pub stopping: StoppingSpec,
    pub output: OutputSpec,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut spec = Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    /// The resolved configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve_path(&self.output.dir)
    }

    /// Checks every value that can be checked without touching data files.
    pub fn check(&self) -> Result<(), HarnessError> {
        let bad = |key: &str, msg: String| Err(HarnessError::Config(format!("{key}: {msg}")));
        let g = &self.grid;
        if g.p.is_empty() {
            return bad("grid.p", "must not be empty".into());
        }
        if g.local_steps.is_empty() {
            return bad("grid.local_steps", "must not be empty".into());
        }
        if g.seeds.is_empty() {
            return bad("grid.seeds", "must not be empty".into());
        }
        if let Some(p) = g.p.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad("grid.p", format!("{p} is not in [0, 1]"));
        }
        if g.local_steps.contains(&0) {
            return bad("grid.local_steps", "values must be >= 1".into());
        }
        if self.topology.n == 0 {
            return bad("topology.n", "must be >= 1".into());
        }
        let r = &self.run;
        for (key, v) in [("run.eta_l", r.eta_l), ("run.eta_c", r.eta_c)] {
            if let Some(v) = v.value() {
                if !v.is_finite() || v < 0.0 {
                    return bad(key, format!("{v} must be finite and >= 0"));
                }
            }
        }
        if let Some(s) = r.sigma.value() {
            if !s.is_finite() || s < 0.0 {
                return bad("run.sigma", format!("{s} must be finite and >= 0"));
            }
        }
        if !(r.alpha >= 1.0 && r.alpha.is_finite()) {
            return bad("run.alpha", format!("{} must be >= 1", r.alpha));
        }
        if r.batch_size == 0 {
            return bad("run.batch_size", "must be >= 1".into());
        }
        if r.metrics_every == 0 {
            return bad("run.metrics_every", "must be >= 1".into());
        }
        if let Some(l) = r.smoothness {
            if !(l > 0.0 && l.is_finite()) {
                return bad("run.smoothness", format!("{l} must be positive"));
            }
        }
        let s = &self.stopping;
        for (key, v) in [("stopping.train_threshold", s.train_threshold), ("stopping.test_threshold", s.test_threshold)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(key, format!("{v} must be positive"));
                }
            }
        }
        if s.halt_at_train_threshold && s.train_threshold.is_none() {
            return bad("stopping.halt_at_train_threshold", "needs stopping.train_threshold".into());
        }
        match &self.workload {
            Workload::SyntheticLogistic(w) => {
                if w.m == 0 || w.d == 0 {
                    return bad("workload", "m and d must be >= 1".into());
                }
            }
            Workload::SyntheticMulticlass(w) => {
                if w.samples_per_agent == 0 || w.d == 0 || w.hidden == 0 || w.classes < 2 {
                    return bad("workload", "samples_per_agent, d, hidden must be >= 1 and classes >= 2".into());
                }
            }
            Workload::Libsvm(_) => {}
            Workload::Mnist(w) => {
                if w.hidden == 0 {
                    return bad("workload.hidden", "must be >= 1".into());
                }
                if w.test_images.is_some() != w.test_labels.is_some() {
                    return bad("workload", "test_images and test_labels go together".into());
                }
            }
        }
        Ok(())
    }

    /// Grid cells in output order: `p` outer, `T_o` inner.
    pub fn cells(&self) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        for &p in &self.grid.p {
            for &t in &self.grid.local_steps {
                out.push((p, t));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[workload]
kind = "synthetic_logistic"
m = 20
d = 4

[topology]
kind = "ring"
n = 5

[grid]
p = [0.0, 0.5]
local_steps = [1]
seeds = [1, 2]

[run]
eta_l = 0.1
eta_c = "auto"
batch_size = 20
rounds = 10

[output]
dir = "out"
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let spec = ExperimentSpec::from_toml(MINIMAL).unwrap();
        assert_eq!(spec.run.eta_l, OrAuto::Value(0.1));
        assert!(spec.run.eta_c.is_auto());
        assert_eq!(spec.run.metrics_every, 1);
        assert_eq!(spec.run.alpha, 1.0);
        match &spec.workload {
            Workload::SyntheticLogistic(w) => {
                assert_eq!(w.rho, 0.01);
                assert_eq!(w.data_seed, DataSeed::Run(RunTag::Run));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(spec.cells(), vec![(0.0, 1), (0.5, 1)]);
    }

    #[test]
    fn resolved_dump_round_trips() {
        let spec = ExperimentSpec::from_toml(MINIMAL).unwrap();
        let text = spec.to_toml();
        assert!(text.contains("metrics_every = 1"));
        assert!(text.contains("eta_c = \"auto\""));
        let again = ExperimentSpec::from_toml(&text).unwrap();
        assert_eq!(spec, again);
        assert_eq!(text, again.to_toml());
    }

    #[test]
    fn rejects_bad_values_naming_the_key() {
        let cases = [
            ("p = [0.0, 0.5]", "p = [1.5]", "grid.p"),
            ("seeds = [1, 2]", "seeds = []", "grid.seeds"),
            ("rounds = 10", "rounds = 10\nmetrics_every = 0", "run.metrics_every"),
            ("eta_l = 0.1", "eta_l = -0.1", "run.eta_l"),
            ("eta_l = 0.1", "eta_l = \"fast\"", "eta_l"),
            ("n = 5", "n = 5\ncolour = 1", "colour"),
        ];
        for (from, to, key) in cases {
            let err = ExperimentSpec::from_toml(&MINIMAL.replace(from, to)).unwrap_err();
            assert!(matches!(err, HarnessError::Config(_)), "{err}");
            assert!(err.to_string().contains(key), "{key}: {err}");
        }
    }
}
