//! Executing grid cells.

use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::CommKind;
use crate::dataio::{
    load_idx, load_libsvm, partition_shuffled, partition_sorted, Dataset, PartitionedDataset, SynthLogistic,
    SynthMulticlass, Task,
};
use crate::engine::{plan_step_sizes, MetricsRow, PlanInputs, RunConfig, Simulator, StepSizePlan};
use crate::graphs::{build_topology, expected_mixing_rate, metropolis_weights, read_mixing_matrix, Graph, MixingMatrix, TopologyKind};
use crate::models::{Batch, ModelOracle};

use super::config::{ExperimentSpec, PartitionScheme, TopologySpec, Workload};
use super::{output, plot, HarnessError, Result};

/// Name of the resolved-config dump in the output directory.
pub const RESOLVED_FILE: &str = "resolved.toml";

/// Oracle, partitioned training data and optional test set for one run.
#[derive(Debug, Clone)]
pub struct PreparedWorkload {
    pub oracle: ModelOracle,
    pub parts: PartitionedDataset,
    pub test: Option<Dataset>,
}

/// Round at which a threshold was first met, with the communication split up
/// to that round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdHit {
    pub round: usize,
    pub gossip: usize,
    pub server: usize,
}

/// Everything recorded for one `(p, T_o, seed)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub lambda_p: f64,
    pub plan: Option<StepSizePlan>,
    pub rows: Vec<MetricsRow>,
    /// `(gossip, server)` rounds so far, parallel to `rows`.
    pub comm_counts: Vec<(usize, usize)>,
    pub rounds_completed: usize,
    pub gossip_rounds: usize,
    pub server_rounds: usize,
    /// Running average of `grad_norm_sq` fell to the training threshold.
    pub train_hit: Option<ThresholdHit>,
    /// Test accuracy reached the absolute threshold.
    pub test_hit: Option<ThresholdHit>,
    /// Test accuracy reached 95% of its maximum over the run.
    pub peak95_hit: Option<ThresholdHit>,
    pub diverged: bool,
}

impl RunRecord {
    pub fn p(&self) -> f64 {
        self.config.p
    }

    pub fn local_steps(&self) -> usize {
        self.config.local_steps
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn peak_test_acc(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.test_acc).filter(|a| a.is_finite()).reduce(f64::max)
    }
}

/// Running average of `values` (`avg[k] = mean(values[..=k])`).
pub fn running_average(values: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            sum += v;
            sum / (k + 1) as f64
        })
        .collect()
}

/// Topology and mixing matrix. A `custom` topology takes its graph from the
/// nonzero pattern of the mixing file.
pub fn build_mixing(topo: &TopologySpec, base: &Path) -> Result<(Graph, MixingMatrix)> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let open = |p: &Path| {
        std::fs::File::open(resolve(p))
            .map_err(|e| HarnessError::Data(format!("topology.mixing_path {}: {e}", resolve(p).display())))
    };
    if topo.kind == TopologyKind::Custom {
        let path = topo
            .mixing_path
            .as_deref()
            .ok_or_else(|| HarnessError::Config("topology.mixing_path: required for a custom topology".into()))?;
        let w = read_mixing_matrix(open(path)?, None)?;
        if w.n() != topo.n {
            return Err(HarnessError::Config(format!("topology.n = {} but the mixing matrix is {}x{}", topo.n, w.n(), w.n())));
        }
        let weights = w.weights();
        let edges = (0..w.n()).flat_map(|i| (i + 1..w.n()).map(move |j| (i, j)));
        let graph = Graph::from_edges(w.n(), edges.filter(|&(i, j)| weights[[i, j]] != 0.0 || weights[[j, i]] != 0.0))?;
        return Ok((graph, w));
    }
    let graph = build_topology(topo.kind, topo.n, topo.param, topo.seed)?;
    let w = match &topo.mixing_path {
        Some(path) => read_mixing_matrix(open(path)?, Some(&graph))?,
        None => metropolis_weights(&graph),
    };
    Ok((graph, w))
}

/// Per-sample gradient noise at `x`: the largest over agents of
/// `sqrt(mean_j ||grad f_ij(x) - grad f_i(x)||^2)`.
pub fn estimate_sigma(oracle: &ModelOracle, parts: &PartitionedDataset, x: ArrayView1<'_, f64>) -> Result<f64> {
    let per_agent: Vec<f64> = parts
        .parts()
        .par_iter()
        .map(|part| -> Result<f64> {
            let mean = oracle.full_gradient(x, part)?;
            let mut acc = 0.0;
            for j in 0..part.len() {
                let (_, g) = oracle.loss_grad(x, part, &Batch::new(vec![j]))?;
                let diff = &g - &mean;
                acc += diff.dot(&diff);
            }
            Ok(acc / part.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per_agent.into_iter().fold(0.0, f64::max).sqrt())
}

// One value per experiment, so the size difference does not matter.
#[allow(clippy::large_enum_variant)]
enum Source {
    Synthetic,
    Loaded { train: Dataset, test: Option<Dataset> },
}

/// A parsed spec with its topology built and data files loaded.
pub struct Experiment {
    spec: ExperimentSpec,
    graph: Graph,
    mixing: MixingMatrix,
    source: Source,
}

impl Experiment {
    pub fn new(spec: ExperimentSpec) -> Result<Self> {
        spec.check()?;
        let (graph, mixing) = build_mixing(&spec.topology, &spec.base_dir)?;
        let source = match &spec.workload {
            Workload::SyntheticLogistic(_) | Workload::SyntheticMulticlass(_) => Source::Synthetic,
            Workload::Libsvm(w) => {
                let path = spec.resolve_path(&w.path);
                require_file(&path, "workload.path")?;
                let train = load_libsvm(&path, w.features, w.bias)?;
                let test = match &w.test_path {
                    Some(tp) => {
                        let tp = spec.resolve_path(tp);
                        require_file(&tp, "workload.test_path")?;
                        let width = train.dim() - usize::from(w.bias);
                        let test = load_libsvm(&tp, Some(width), w.bias)?;
                        if test.dim() != train.dim() {
                            return Err(HarnessError::Data(format!(
                                "test set has {} features, training set {}",
                                test.dim(),
                                train.dim()
                            )));
                        }
                        Some(test)
                    }
                    None => None,
                };
                Source::Loaded { train, test }
            }
            Workload::Mnist(w) => {
                let images = spec.resolve_path(&w.train_images);
                let labels = spec.resolve_path(&w.train_labels);
                require_file(&images, "workload.train_images")?;
                require_file(&labels, "workload.train_labels")?;
                let train = load_idx(&images, &labels, w.normalize)?;
                let test = match (&w.test_images, &w.test_labels) {
                    (Some(ti), Some(tl)) => {
                        let (ti, tl) = (spec.resolve_path(ti), spec.resolve_path(tl));
                        require_file(&ti, "workload.test_images")?;
                        require_file(&tl, "workload.test_labels")?;
                        Some(load_idx(&ti, &tl, w.normalize)?)
                    }
                    _ => None,
                };
                Source::Loaded { train, test }
            }
        };
        Ok(Self { spec, graph, mixing, source })
    }

    pub fn spec(&self) -> &ExperimentSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn mixing(&self) -> &MixingMatrix {
        &self.mixing
    }

    /// Data and model for a run with seed `seed`.
    pub fn workload(&self, seed: u64) -> Result<PreparedWorkload> {
        let n = self.spec.topology.n;
        let partition = |data: &Dataset, scheme: PartitionScheme, seed: u64| match scheme {
            PartitionScheme::Sorted => partition_sorted(data, n),
            PartitionScheme::Shuffled => partition_shuffled(data, n, seed),
        };
        let (oracle, parts, test) = match (&self.spec.workload, &self.source) {
            (Workload::SyntheticLogistic(w), _) => {
                let gen = SynthLogistic { n_agents: n, m: w.m, d: w.d, shift: w.shift, seed: w.data_seed.resolve(seed) };
                let test = if w.test_per_agent > 0 { Some(gen.test_set(w.test_per_agent)?) } else { None };
                (ModelOracle::logistic(w.d, w.rho)?, gen.generate()?, test)
            }
            (Workload::SyntheticMulticlass(w), _) => {
                let data_seed = w.data_seed.resolve(seed);
                let gen = SynthMulticlass {
                    samples: w.samples_per_agent * n,
                    d: w.d,
                    classes: w.classes,
                    separation: w.separation,
                    seed: data_seed,
                };
                let test = if w.test_samples > 0 { Some(gen.test_set(w.test_samples)?) } else { None };
                let parts = partition(&gen.generate()?, w.partition, data_seed)?;
                (ModelOracle::mlp(w.d, w.hidden, w.classes), parts, test)
            }
            (Workload::Libsvm(w), Source::Loaded { train, test }) => {
                (ModelOracle::logistic(train.dim(), w.rho)?, partition(train, w.partition, seed)?, test.clone())
            }
            (Workload::Mnist(w), Source::Loaded { train, test }) => {
                let classes = match train.task() {
                    Task::Multiclass { classes } => classes,
                    Task::Binary => unreachable!("IDX data is multiclass"),
                };
                let classes = match test.as_ref().map(Dataset::task) {
                    Some(Task::Multiclass { classes: c }) => classes.max(c),
                    _ => classes,
                };
                let oracle = ModelOracle::mlp(train.dim(), w.hidden, classes);
                (oracle, partition(train, w.partition, seed)?, test.clone())
            }
            _ => unreachable!("file workloads are loaded in Experiment::new"),
        };
        oracle.check_data(parts.part(0))?;
        if let Some(t) = &test {
            oracle.check_data(t)?;
        }
        Ok(PreparedWorkload { oracle, parts, test })
    }

    /// Smoothness constant for planning: configured, else analytic.
    pub fn smoothness(&self, wl: &PreparedWorkload) -> Option<f64> {
        self.spec.run.smoothness.or_else(|| wl.oracle.smoothness(&wl.parts.pooled()))
    }

    /// Noise level for planning.
    pub fn sigma(&self, wl: &PreparedWorkload, x0: ArrayView1<'_, f64>) -> Result<f64> {
        if self.spec.run.batch_size >= wl.parts.part_size() {
            return Ok(0.0);
        }
        match self.spec.run.sigma.value() {
            Some(s) => Ok(s),
            None => estimate_sigma(&wl.oracle, &wl.parts, x0),
        }
    }

    /// `f(x0) - f*`, clamped at zero.
    pub fn f_tilde(&self, wl: &PreparedWorkload, x0: ArrayView1<'_, f64>) -> Result<f64> {
        let mut f = 0.0;
        for part in wl.parts.parts() {
            f += wl.oracle.evaluate(x0, part)?.0;
        }
        Ok((f / wl.parts.n() as f64 - self.spec.run.f_star).max(0.0))
    }

    /// Step-size plan for a cell.
    pub fn plan(&self, wl: &PreparedWorkload, p: f64, local_steps: usize, x0: ArrayView1<'_, f64>) -> Result<StepSizePlan> {
        let run = &self.spec.run;
        let lambda_p = expected_mixing_rate(self.mixing.lambda_w(), p)?;
        let smoothness = self.smoothness(wl).ok_or_else(|| {
            HarnessError::Config(format!(
                "run.smoothness: required to plan step sizes for the {} model",
                wl.oracle.name()
            ))
        })?;
        let inputs = PlanInputs {
            alpha: run.alpha,
            p,
            lambda_p,
            smoothness,
            local_steps,
            sigma: self.sigma(wl, x0)?,
            batch_size: run.batch_size.min(wl.parts.part_size()),
            n: wl.parts.n(),
            rounds: run.rounds,
            f_tilde: self.f_tilde(wl, x0)?,
        };
        plan_step_sizes(&inputs).map_err(|e| match HarnessError::from(e) {
            HarnessError::Assumption(msg) => HarnessError::Assumption(format!("cell p = {p}, T_o = {local_steps}: {msg}")),
            other => other,
        })
    }

    /// Executes one run.
    pub fn run_cell(&self, p: f64, local_steps: usize, seed: u64) -> Result<RunRecord> {
        let wl = self.workload(seed)?;
        let run = &self.spec.run;
        let stop = &self.spec.stopping;
        let lambda_p = expected_mixing_rate(self.mixing.lambda_w(), p)?;
        let x0: Array1<f64> = wl.oracle.initial_point(seed);

        let plan = if run.eta_l.is_auto() || run.eta_c.is_auto() {
            Some(self.plan(&wl, p, local_steps, x0.view())?)
        } else {
            if lambda_p <= 0.0 {
                log::warn!("cell p = {p}, T_o = {local_steps}: lambda_p = 0, no convergence guarantee");
            }
            None
        };
        let eta_l = run.eta_l.value().unwrap_or_else(|| plan.expect("planned").eta_l);
        let eta_c = run.eta_c.value().unwrap_or_else(|| plan.expect("planned").eta_c);
        let cfg = RunConfig { p, local_steps, eta_l, eta_c, batch_size: run.batch_size, rounds: run.rounds, seed };
        cfg.validate()?;

        let mut sim = Simulator::new(x0.view(), &wl.oracle, &wl.parts, &self.mixing, cfg, run.algorithm)?;
        let test = wl.test.as_ref();
        let mut rows = vec![sim.metrics(None, test)?];
        let mut comm_counts = vec![(0, 0)];
        let (mut gossip, mut server) = (0usize, 0usize);
        let mut grad_sum = rows[0].grad_norm_sq;
        let check_train = |sum: f64, count: usize| stop.train_threshold.is_some_and(|t| sum / count as f64 <= t);
        let check_test = |row: &MetricsRow| match (stop.test_threshold, row.test_acc) {
            (Some(t), Some(a)) => a >= t,
            _ => false,
        };
        let mut train_hit = check_train(grad_sum, 1).then_some(ThresholdHit { round: 0, gossip: 0, server: 0 });
        let mut test_hit = check_test(&rows[0]).then_some(ThresholdHit { round: 0, gossip: 0, server: 0 });
        let mut diverged = false;

        for k in 1..=run.rounds {
            if stop.halt_at_train_threshold && train_hit.is_some() {
                break;
            }
            let outcome = sim.step()?;
            match outcome.kind {
                CommKind::Gossip => gossip += 1,
                CommKind::Server => server += 1,
            }
            let finite = sim.state().is_finite();
            if k % run.metrics_every == 0 || k == run.rounds || !finite {
                let row = sim.metrics(Some(outcome.kind), test)?;
                grad_sum += row.grad_norm_sq;
                let hit = ThresholdHit { round: k, gossip, server };
                if train_hit.is_none() && check_train(grad_sum, rows.len() + 1) {
                    train_hit = Some(hit);
                }
                if test_hit.is_none() && check_test(&row) {
                    test_hit = Some(hit);
                }
                rows.push(row);
                comm_counts.push((gossip, server));
            }
            if !finite {
                log::warn!("run p = {p}, T_o = {local_steps}, seed = {seed}: iterates diverged at round {k}");
                diverged = true;
                break;
            }
        }

        let mut record = RunRecord {
            config: cfg,
            lambda_p,
            plan,
            rows,
            comm_counts,
            rounds_completed: gossip + server,
            gossip_rounds: gossip,
            server_rounds: server,
            train_hit,
            test_hit,
            peak95_hit: None,
            diverged,
        };
        if let Some(peak) = record.peak_test_acc() {
            record.peak95_hit = record
                .rows
                .iter()
                .zip(&record.comm_counts)
                .find(|(r, _)| r.test_acc.is_some_and(|a| a >= 0.95 * peak))
                .map(|(r, &(gossip, server))| ThresholdHit { round: r.round, gossip, server });
        }
        log::info!(
            "run p = {p}, T_o = {local_steps}, seed = {seed}: {} rounds, grad_norm_sq {:.3e}",
            record.rounds_completed,
            record.rows.last().map_or(f64::NAN, |r| r.grad_norm_sq)
        );
        Ok(record)
    }

    /// Every `(p, T_o, seed)` run in grid order, executed in parallel.
    pub fn run_all(&self) -> Result<Vec<RunRecord>> {
        let jobs: Vec<(f64, usize, u64)> = self
            .spec
            .cells()
            .into_iter()
            .flat_map(|(p, t)| self.spec.grid.seeds.iter().map(move |&s| (p, t, s)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.spec.output.workers)
            .build()
            .map_err(|e| HarnessError::Output(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(|&(p, t, s)| self.run_cell(p, t, s)).collect())
    }
}

fn require_file(path: &Path, key: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(HarnessError::Data(format!("{key}: file {} not found", path.display())))
    }
}

pub fn prepare_workload(spec: &ExperimentSpec, seed: u64) -> Result<PreparedWorkload> {
    Experiment::new(spec.clone())?.workload(seed)
}

/// Runs every cell of `spec` and writes per-run CSVs, the aggregate and
/// threshold tables, the resolved config and (optionally) plots under the
/// output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<RunRecord>> {
    let exp = Experiment::new(spec.clone())?;
    let records = exp.run_all()?;
    let dir = spec.output_dir();
    let runs_dir = dir.join("runs");
    std::fs::create_dir_all(&runs_dir)
        .map_err(|e| HarnessError::Output(format!("cannot create {}: {e}", runs_dir.display())))?;
    output::write_atomic(&dir.join(RESOLVED_FILE), spec.to_toml().as_bytes())?;
    for r in &records {
        let name = output::run_csv_name(r.p(), r.local_steps(), r.seed());
        output::write_atomic(&runs_dir.join(name), &output::run_csv(&r.rows)?)?;
    }
    output::write_atomic(&dir.join(output::THRESHOLDS_FILE), &output::thresholds_csv(&records)?)?;
    let cells = spec.cells();
    let agg = output::aggregate(&records, &cells);
    output::write_atomic(&dir.join(output::AGGREGATE_FILE), &output::aggregate_csv(&agg)?)?;
    let summary = output::threshold_summary(&records, &cells);
    output::write_atomic(&dir.join(output::SUMMARY_FILE), &output::summary_csv(&summary)?)?;
    if spec.output.plots {
        plot::emit_plots(&agg, &summary, &dir.join(plot::PLOT_DIR))?;
    }
    log::info!("wrote {} runs to {}", records.len(), dir.display());
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_average_matches_prefix_means() {
        assert_eq!(running_average(&[4.0, 2.0, 0.0]), vec![4.0, 3.0, 2.0]);
        assert!(running_average(&[]).is_empty());
    }
}
