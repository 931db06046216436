//! Python bindings: topology spectra, step-size planning, an in-memory
//! simulator on the synthetic logistic workload, and the experiment harness.

use std::path::PathBuf;

use ndarray::Array1;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pisco::dataio::SynthLogistic;
use pisco::engine::{plan_step_sizes as plan, EngineError, PlanInputs};
use pisco::graphs::{build_topology, expected_mixing_rate as rate, metropolis_weights, GraphError};
use pisco::harness::{self, ExperimentSpec, HarnessError};
use pisco::{Algorithm, Dataset, MetricsRow, MixingMatrix, ModelOracle, NetworkState, PartitionedDataset, RunConfig, Simulator, StepSizePlan, TopologyKind};

create_exception!(pisco, ConfigError, PyException, "Invalid experiment configuration.");
create_exception!(pisco, DataError, PyException, "Missing or malformed input data.");
create_exception!(pisco, AssumptionError, PyException, "The network never mixes (lambda_p = 0).");

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Config(m) => ConfigError::new_err(m),
        HarnessError::Data(m) => DataError::new_err(m),
        HarnessError::Assumption(m) => AssumptionError::new_err(m),
        HarnessError::Output(m) => pyo3::exceptions::PyOSError::new_err(m),
    }
}

fn graph_err(e: GraphError) -> PyErr {
    harness_err(e.into())
}

fn engine_err(e: EngineError) -> PyErr {
    harness_err(e.into())
}

fn topology(kind: &str) -> PyResult<TopologyKind> {
    kind.parse().map_err(graph_err)
}

fn plan_dict<'py>(py: Python<'py>, p: &StepSizePlan) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("alpha", p.alpha)?;
    d.set_item("smoothness", p.smoothness)?;
    d.set_item("sigma", p.sigma)?;
    d.set_item("eta_c", p.eta_c)?;
    d.set_item("eta_l_max", p.eta_l_max)?;
    d.set_item("eta_l", p.eta_l)?;
    d.set_item("k_min", p.k_min)?;
    Ok(d)
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", m.round)?;
    d.set_item("comm_kind", m.comm_kind.map_or("init", |k| k.as_str()))?;
    d.set_item("grad_norm_sq", m.grad_norm_sq)?;
    d.set_item("consensus_err", m.consensus_err)?;
    d.set_item("tracking_err", m.tracking_err)?;
    d.set_item("tracking_residual", m.tracking_residual)?;
    d.set_item("train_loss", m.train_loss)?;
    d.set_item("train_acc", m.train_acc)?;
    d.set_item("test_acc", m.test_acc)?;
    Ok(d)
}

/// Spectral quantities of a topology with Metropolis weights.
#[pyfunction]
#[pyo3(signature = (kind, n, param = None, seed = 0))]
fn spectrum<'py>(py: Python<'py>, kind: &str, n: usize, param: Option<f64>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let g = build_topology(topology(kind)?, n, param, seed).map_err(graph_err)?;
    let w = metropolis_weights(&g);
    let d = PyDict::new(py);
    d.set_item("n", n)?;
    d.set_item("edges", g.edge_count())?;
    d.set_item("components", g.component_count())?;
    d.set_item("lambda", w.lambda_second())?;
    d.set_item("lambda_w", w.lambda_w())?;
    Ok(d)
}

/// Metropolis mixing matrix as a list of rows.
#[pyfunction]
#[pyo3(signature = (kind, n, param = None, seed = 0))]
fn mixing_matrix(kind: &str, n: usize, param: Option<f64>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let g = build_topology(topology(kind)?, n, param, seed).map_err(graph_err)?;
    Ok(metropolis_weights(&g).weights().rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn expected_mixing_rate(lambda_w: f64, p: f64) -> PyResult<f64> {
    rate(lambda_w, p).map_err(graph_err)
}

#[pyfunction]
#[pyo3(signature = (p, lambda_p, smoothness, local_steps, alpha = 1.0, sigma = 0.0, batch_size = 1, n = 1, rounds = 1, f_tilde = 0.0))]
#[allow(clippy::too_many_arguments)]
fn plan_step_sizes<'py>(
    py: Python<'py>,
    p: f64,
    lambda_p: f64,
    smoothness: f64,
    local_steps: usize,
    alpha: f64,
    sigma: f64,
    batch_size: usize,
    n: usize,
    rounds: usize,
    f_tilde: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let inputs = PlanInputs { alpha, p, lambda_p, smoothness, local_steps, sigma, batch_size, n, rounds, f_tilde };
    plan_dict(py, &plan(&inputs).map_err(engine_err)?)
}

/// A steppable run on the heterogeneous synthetic logistic workload.
#[pyclass(module = "pisco")]
struct Simulation {
    oracle: ModelOracle,
    parts: PartitionedDataset,
    test: Dataset,
    mixing: MixingMatrix,
    cfg: RunConfig,
    algorithm: Algorithm,
    state: Option<NetworkState>,
}

impl Simulation {
    fn with_sim<T>(&mut self, f: impl FnOnce(&mut Simulator<'_>) -> PyResult<T>) -> PyResult<T> {
        let state = self.state.take().expect("state is restored after every call");
        let mut sim = Simulator::resume(state, &self.oracle, &self.parts, &self.mixing, self.cfg, self.algorithm)
            .map_err(engine_err)?;
        let out = f(&mut sim);
        self.state = Some(sim.into_state());
        out
    }

    fn state(&self) -> &NetworkState {
        self.state.as_ref().expect("state is restored after every call")
    }
}

#[pymethods]
impl Simulation {
    #[new]
    #[pyo3(signature = (
        n = 10, m = 100, d = 10, shift = 2.0, rho = 0.01, data_seed = 0, test_per_agent = 50,
        topology = "ring", param = None, p = 0.1, local_steps = 1, eta_l = 0.1, eta_c = 1.0,
        batch_size = 100, rounds = 100, seed = 1, algorithm = "pisco"
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n: usize,
        m: usize,
        d: usize,
        shift: f64,
        rho: f64,
        data_seed: u64,
        test_per_agent: usize,
        topology: &str,
        param: Option<f64>,
        p: f64,
        local_steps: usize,
        eta_l: f64,
        eta_c: f64,
        batch_size: usize,
        rounds: usize,
        seed: u64,
        algorithm: &str,
    ) -> PyResult<Self> {
        let algorithm = match algorithm {
            "pisco" => Algorithm::Pisco,
            "pisco_compact" => Algorithm::PiscoCompact,
            "dsgt" => Algorithm::Dsgt,
            other => return Err(PyValueError::new_err(format!("unknown algorithm `{other}`"))),
        };
        let synth = SynthLogistic { n_agents: n, m, d, shift, seed: data_seed };
        let data_err = |e: pisco::dataio::DataError| harness_err(e.into());
        let parts = synth.generate().map_err(data_err)?;
        let test = synth.test_set(test_per_agent.max(1)).map_err(data_err)?;
        let oracle = ModelOracle::logistic(d, rho).map_err(|e| harness_err(e.into()))?;
        let mixing = metropolis_weights(&build_topology(self::topology(topology)?, n, param, seed).map_err(graph_err)?);
        let cfg = RunConfig { p, local_steps, eta_l, eta_c, batch_size, rounds, seed };
        let x0 = Array1::zeros(d);
        let state = Simulator::new(x0.view(), &oracle, &parts, &mixing, cfg, algorithm).map_err(engine_err)?.into_state();
        Ok(Self { oracle, parts, test, mixing, cfg, algorithm, state: Some(state) })
    }

    /// Completed rounds.
    #[getter]
    fn round(&self) -> usize {
        self.state().round
    }

    #[getter]
    fn lambda_w(&self) -> f64 {
        self.mixing.lambda_w()
    }

    /// Runs one round and returns `"gossip"` or `"server"`.
    fn step(&mut self) -> PyResult<&'static str> {
        self.with_sim(|sim| Ok(sim.step().map_err(engine_err)?.kind.as_str()))
    }

    /// Runs `rounds` rounds and returns the metrics after each.
    fn run<'py>(&mut self, py: Python<'py>, rounds: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let test = self.test.clone();
        let rows = self.with_sim(|sim| {
            (0..rounds)
                .map(|_| {
                    let kind = sim.step().map_err(engine_err)?.kind;
                    sim.metrics(Some(kind), Some(&test)).map_err(engine_err)
                })
                .collect::<PyResult<Vec<_>>>()
        })?;
        rows.iter().map(|r| metrics_dict(py, r)).collect()
    }

    /// Full-batch metrics of the current state.
    fn metrics<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let test = self.test.clone();
        let row = self.with_sim(|sim| sim.metrics(None, Some(&test)).map_err(engine_err))?;
        metrics_dict(py, &row)
    }

    /// The network average of the local iterates.
    fn average_iterate(&self) -> Vec<f64> {
        self.state().x.mean().to_vec()
    }

    /// Per-agent iterates as a list of rows.
    fn iterates(&self) -> Vec<Vec<f64>> {
        self.state().x.agent_major().rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// Validates an experiment file; returns `(report, has_violations)`.
#[pyfunction]
fn validate(path: PathBuf) -> PyResult<(String, bool)> {
    let spec = ExperimentSpec::load(&path).map_err(harness_err)?;
    let report = harness::validate(&spec).map_err(harness_err)?;
    Ok((report.to_string(), report.has_violations()))
}

/// Runs an experiment file and returns one summary dict per run.
#[pyfunction]
#[pyo3(signature = (path, out = None))]
fn run_experiment<'py>(py: Python<'py>, path: PathBuf, out: Option<PathBuf>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut spec = ExperimentSpec::load(&path).map_err(harness_err)?;
    if let Some(out) = out {
        spec.output.dir = std::path::absolute(out)?;
    }
    let records = py.detach(|| harness::run_experiment(&spec)).map_err(harness_err)?;
    records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("p", r.p())?;
            d.set_item("local_steps", r.local_steps())?;
            d.set_item("seed", r.seed())?;
            d.set_item("eta_l", r.config.eta_l)?;
            d.set_item("eta_c", r.config.eta_c)?;
            d.set_item("lambda_p", r.lambda_p)?;
            d.set_item("rounds_completed", r.rounds_completed)?;
            d.set_item("gossip_rounds", r.gossip_rounds)?;
            d.set_item("server_rounds", r.server_rounds)?;
            d.set_item("train_threshold_round", r.train_hit.map(|h| h.round))?;
            d.set_item("diverged", r.diverged)?;
            d.set_item("final", r.rows.last().map(|m| metrics_dict(py, m)).transpose()?)?;
            Ok(d)
        })
        .collect()
}

#[pymodule(name = "pisco")]
fn pisco_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("AssumptionError", py.get_type::<AssumptionError>())?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(mixing_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(expected_mixing_rate, m)?)?;
    m.add_function(wrap_pyfunction!(plan_step_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
