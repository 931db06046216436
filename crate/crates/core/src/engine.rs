//! Gradient tracking with local updates over a semi-decentralized network.
//!
//! A round starts from `(X^k, Y^k, G^k)`, runs `T_o` local gradient-tracking
//! steps with step size `eta_l`, then communicates once: with probability `p`
//! through the server (exact averaging `J`), otherwise with the gossip matrix
//! `W`. The communication step blends the local result into `X^k` with weight
//! `eta_c`. [`compact_round`] assembles the same round from the one-shot
//! recursion in `eta = eta_c * eta_l` and is kept as a cross-check.
//!
//! All stochastic draws come from [`RoundKey`] streams, so the staged and
//! compact forms consume identical mini-batches.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentMatrix, CommKind, CommMatrix};
use crate::dataio::{Dataset, PartitionedDataset};
use crate::graphs::MixingMatrix;
use crate::models::{distributed_stochastic_gradient, draw_minibatch, Batch, ModelError, ModelOracle, PARALLEL_WORK};
use crate::rng::{RoundKey, StreamKey};

/// Relative tolerance of the tracking identity `mean(Y) = mean(G)`.
pub const TRACKING_TOL: f64 = 1e-9;

/// Constant in the local step-size bound.
pub const STEP_BOUND_CONSTANT: f64 = 360.0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Server-access probability.
    pub p: f64,
    /// Local updates per round (`T_o`).
    pub local_steps: usize,
    pub eta_l: f64,
    pub eta_c: f64,
    /// Mini-batch size; `>= m` selects full-batch gradients.
    pub batch_size: usize,
    /// Communication rounds (`K`).
    pub rounds: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(EngineError::Config(format!("p = {} not in [0, 1]", self.p)));
        }
        if self.local_steps == 0 {
            return Err(EngineError::Config("local_steps must be >= 1".into()));
        }
        if !(self.eta_l.is_finite() && self.eta_l >= 0.0 && self.eta_c.is_finite() && self.eta_c >= 0.0) {
            return Err(EngineError::Config(format!(
                "step sizes must be finite and nonnegative (eta_l = {}, eta_c = {})",
                self.eta_l, self.eta_c
            )));
        }
        if self.batch_size == 0 {
            return Err(EngineError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Effective step size `eta_c * eta_l`.
    pub fn eta(&self) -> f64 {
        self.eta_c * self.eta_l
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Local phase followed by the communication phase.
    #[default]
    Pisco,
    /// The same protocol assembled from the one-shot recursion.
    PiscoCompact,
    /// Single-step gossip gradient tracking baseline.
    Dsgt,
}

/// `(X, Y, G)` and the number of completed rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub x: AgentMatrix,
    pub y: AgentMatrix,
    pub g: AgentMatrix,
    pub round: usize,
}

/// Residual of the tracking identity at one point of the trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingCheck {
    /// `||Y J - G J||_F`.
    pub residual: f64,
    /// `||G J||_F`.
    pub scale: f64,
}

impl TrackingCheck {
    pub fn of(y: &AgentMatrix, g: &AgentMatrix) -> Self {
        let n = y.n() as f64;
        let ybar = y.mean();
        let gbar = g.mean();
        let diff = &ybar - &gbar;
        Self { residual: (n * diff.dot(&diff)).sqrt(), scale: (n * gbar.dot(&gbar)).sqrt() }
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.residual <= tol * (1.0 + self.scale)
    }
}

impl NetworkState {
    pub fn tracking(&self) -> TrackingCheck {
        TrackingCheck::of(&self.y, &self.g)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.g.is_finite()
    }
}

fn batch_gradients(
    oracle: &ModelOracle,
    x: &AgentMatrix,
    parts: &PartitionedDataset,
    batch_size: usize,
    key: impl Fn(usize) -> StreamKey,
) -> Result<AgentMatrix> {
    let m = parts.part_size();
    let batches: Vec<Batch> = (0..parts.n()).map(|i| draw_minibatch(m, batch_size, key(i))).collect();
    Ok(distributed_stochastic_gradient(oracle, x, parts, &batches)?)
}

/// `X^0 = x0 1^T`, `Y^0 = G^0` from the round-0 batches.
pub fn init_state(
    x0: ArrayView1<'_, f64>,
    oracle: &ModelOracle,
    parts: &PartitionedDataset,
    cfg: &RunConfig,
) -> Result<NetworkState> {
    if x0.len() != oracle.dim() {
        return Err(ModelError::Dimension { expected: oracle.dim(), found: x0.len() }.into());
    }
    cfg.validate()?;
    let x = AgentMatrix::replicate(x0, parts.n());
    let key = RoundKey::new(cfg.seed, 0);
    let g = batch_gradients(oracle, &x, parts, cfg.batch_size, |i| key.init_batch(i))?;
    Ok(NetworkState { x, y: g.clone(), g, round: 0 })
}

/// One global Bernoulli(`p`) draw: the server (`J`) on success, gossip otherwise.
pub fn draw_comm_matrix(p: f64, w: &MixingMatrix, key: StreamKey) -> CommMatrix<'_> {
    if key.rng().random::<f64>() < p {
        CommMatrix::Server
    } else {
        CommMatrix::Gossip(w)
    }
}

/// Output of the local phase of a round.
#[derive(Debug, Clone)]
pub struct LocalTrajectory {
    /// `X^{k+1,T_o}`.
    pub x: AgentMatrix,
    /// `Y^{k+1,T_o}`.
    pub y: AgentMatrix,
    /// `G^{k+1,T_o}`.
    pub g: AgentMatrix,
    /// `sum_{t=1..T_o} G^{k+1,t}`.
    pub g_sum: AgentMatrix,
    /// Tracking identity after each local step.
    pub checks: Vec<TrackingCheck>,
}

/// `T_o` local gradient-tracking steps without communication.
pub fn local_phase(
    state: &NetworkState,
    oracle: &ModelOracle,
    parts: &PartitionedDataset,
    cfg: &RunConfig,
    round_key: RoundKey,
) -> Result<LocalTrajectory> {
    let mut x = state.x.clone();
    let mut y = state.y.clone();
    let mut g = state.g.clone();
    let mut g_sum = AgentMatrix::zeros(x.n(), x.d());
    let mut checks = Vec::with_capacity(cfg.local_steps);
    for t in 1..=cfg.local_steps {
        x.scaled_add_assign(-cfg.eta_l, &y);
        let g_next = batch_gradients(oracle, &x, parts, cfg.batch_size, |i| round_key.local_batch(i, t))?;
        y.scaled_add_assign(1.0, &g_next);
        y.scaled_add_assign(-1.0, &g);
        g = g_next;
        g_sum.scaled_add_assign(1.0, &g);
        checks.push(TrackingCheck::of(&y, &g));
    }
    Ok(LocalTrajectory { x, y, g, g_sum, checks })
}

/// Communication step: blend, mix, refresh the gradient, correct the tracker.
pub fn comm_phase(
    state: &NetworkState,
    locals: &LocalTrajectory,
    comm: CommMatrix<'_>,
    oracle: &ModelOracle,
    parts: &PartitionedDataset,
    cfg: &RunConfig,
    round_key: RoundKey,
) -> Result<NetworkState> {
    let mut pre = state.x.scale(1.0 - cfg.eta_c);
    pre.scaled_add_assign(cfg.eta_c, &locals.x);
    pre.scaled_add_assign(-cfg.eta_c * cfg.eta_l, &locals.y);
    let x = pre.mix(comm);
    let g = batch_gradients(oracle, &x, parts, cfg.batch_size, |i| round_key.comm_batch(i))?;
    let mut y = locals.y.add_scaled(1.0, &g);
    y.scaled_add_assign(-1.0, &locals.g);
    Ok(NetworkState { x, y: y.mix(comm), g, round: state.round + 1 })
}

/// The same round written as a single recursion in `eta = eta_c * eta_l`.
///
/// The intermediate gradients `G^{k+1,t}` are still evaluated along the local
/// trajectory; only the assembly of `X^{k+1}` and `Y^{k+1}` differs.
pub fn compact_round(
    state: &NetworkState,
    oracle: &ModelOracle,
    parts: &PartitionedDataset,
    comm: CommMatrix<'_>,
    cfg: &RunConfig,
    round_key: RoundKey,
) -> Result<(NetworkState, LocalTrajectory)> {
    let locals = local_phase(state, oracle, parts, cfg, round_key)?;
    let eta = cfg.eta();
    let t_o = cfg.local_steps as f64;
    let mut pre = state.x.clone();
    pre.scaled_add_assign(-eta * (t_o + 1.0), &state.y);
    pre.scaled_add_assign(-eta, &locals.g_sum);
    pre.scaled_add_assign(eta * t_o, &state.g);
    let x = pre.mix(comm);
    let g = batch_gradients(oracle, &x, parts, cfg.batch_size, |i| round_key.comm_batch(i))?;
    let mut y = state.y.add_scaled(1.0, &g);
    y.scaled_add_assign(-1.0, &state.g);
    Ok((NetworkState { x, y: y.mix(comm), g, round: state.round + 1 }, locals))
}

/// Baseline: `X <- (X - eta Y) W`, `Y <- Y W + G' - G` with `eta = cfg.eta()`.
pub fn dsgt_round(
    state: &NetworkState,
    oracle: &ModelOracle,
    parts: &PartitionedDataset,
    comm: CommMatrix<'_>,
    cfg: &RunConfig,
    round_key: RoundKey,
) -> Result<NetworkState> {
    let x = state.x.add_scaled(-cfg.eta(), &state.y).mix(comm);
    let g = batch_gradients(oracle, &x, parts, cfg.batch_size, |i| round_key.comm_batch(i))?;
    let mut y = state.y.mix(comm);
    y.scaled_add_assign(1.0, &g);
    y.scaled_add_assign(-1.0, &state.g);
    Ok(NetworkState { x, y, g, round: state.round + 1 })
}

/// Inputs of [`plan_step_sizes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanInputs {
    pub alpha: f64,
    pub p: f64,
    pub lambda_p: f64,
    /// Smoothness constant `L`.
    pub smoothness: f64,
    pub local_steps: usize,
    /// Per-sample gradient noise `sigma` (0 in full-batch mode).
    pub sigma: f64,
    pub batch_size: usize,
    pub n: usize,
    pub rounds: usize,
    /// Initial suboptimality `f(x0) - f*`.
    pub f_tilde: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizePlan {
    pub alpha: f64,
    pub smoothness: f64,
    pub sigma: f64,
    pub eta_c: f64,
    pub eta_l_max: f64,
    pub eta_l: f64,
    /// Smallest `K` for which the tuned local step stays below `eta_l_max`
    /// (zero when `sigma = 0`).
    pub k_min: f64,
}

impl StepSizePlan {
    pub fn eta(&self) -> f64 {
        self.eta_c * self.eta_l
    }
}

/// Communication and local step sizes with guaranteed convergence.
///
/// `eta_c = alpha sqrt(1+p) lambda_p` and
/// `eta_l_max = sqrt(1+p) lambda_p / (360 alpha L (T_o + 1))`. With noise the
/// local step is further tuned to the horizon `K`.
pub fn plan_step_sizes(inp: &PlanInputs) -> Result<StepSizePlan> {
    if !(inp.lambda_p > 0.0 && inp.lambda_p <= 1.0) {
        return Err(EngineError::Assumption(format!(
            "expected mixing rate lambda_p = {} must lie in (0, 1]",
            inp.lambda_p
        )));
    }
    if !(inp.smoothness > 0.0 && inp.smoothness.is_finite()) {
        return Err(EngineError::Config(format!("smoothness L = {} must be positive", inp.smoothness)));
    }
    if inp.alpha < 1.0 {
        return Err(EngineError::Config(format!("alpha = {} must be >= 1", inp.alpha)));
    }
    if !(0.0..=1.0).contains(&inp.p) || inp.local_steps == 0 || inp.batch_size == 0 || inp.n == 0 {
        return Err(EngineError::Config("p, local_steps, batch_size or n out of range".into()));
    }
    if inp.sigma < 0.0 || inp.f_tilde < 0.0 {
        return Err(EngineError::Config("sigma and f_tilde must be nonnegative".into()));
    }

    let (alpha, p, lp, l) = (inp.alpha, inp.p, inp.lambda_p, inp.smoothness);
    let t_o = inp.local_steps as f64;
    let b = inp.batch_size as f64;
    let n = inp.n as f64;
    let k = inp.rounds.max(1) as f64;
    let sq = (1.0 + p).sqrt();
    let c = STEP_BOUND_CONSTANT;

    let eta_c = alpha * sq * lp;
    let eta_l_max = sq * lp / (c * alpha * l * (t_o + 1.0));

    let (eta_l, k_min) = if inp.sigma > 0.0 {
        let s2 = inp.sigma * inp.sigma;
        let f = inp.f_tilde;
        let mut tuned = (n * b * t_o * f / ((1.0 + p) * lp * lp * l * s2 * k)).sqrt();
        if p < 1.0 {
            tuned = tuned.min((sq * lp * b * f / ((1.0 - p) * l * l * s2 * k)).cbrt());
        }
        tuned = tuned.min((alpha * alpha * b * f / (sq * lp * l * l * s2 * k)).cbrt());
        let eta_l = eta_l_max.min(tuned / (alpha * t_o));

        let lp4 = lp.powi(4);
        let mut k_min = c * c * n * t_o * b * l * f / ((1.0 + p).powi(2) * lp4 * s2);
        if p < 1.0 {
            k_min = k_min.max(c.powi(3) * b * l * f / ((1.0 - p * p) * lp * lp * s2));
        }
        k_min = k_min.max(c.powi(3) * alpha * alpha * b * l * f / ((1.0 + p).powi(2) * lp4 * s2));
        (eta_l, k_min)
    } else {
        (eta_l_max, 0.0)
    };

    if eta_c > 1.0 {
        log::warn!("eta_c = {eta_c:.6} exceeds 1: the communication step extrapolates past the local iterate");
    }
    Ok(StepSizePlan { alpha, smoothness: l, sigma: inp.sigma, eta_c, eta_l_max, eta_l, k_min })
}

/// Per-round measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    /// Communication used to produce this round; `None` for the initial state.
    pub comm_kind: Option<CommKind>,
    /// `||grad f(x-bar)||^2`, full batch over all agents.
    pub grad_norm_sq: f64,
    /// `||X - X J||_F^2`.
    pub consensus_err: f64,
    /// `||Y - Y J||_F^2`.
    pub tracking_err: f64,
    /// `||Y J - G J||_F`.
    pub tracking_residual: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Full-batch metrics at the average iterate.
pub fn metrics_snapshot(
    state: &NetworkState,
    comm_kind: Option<CommKind>,
    oracle: &ModelOracle,
    parts: &PartitionedDataset,
    test: Option<&Dataset>,
) -> Result<MetricsRow> {
    let xbar = state.x.mean();
    let eval = |part: &Dataset| -> Result<(Array1<f64>, f64, f64)> {
        let grad = oracle.full_gradient(xbar.view(), part)?;
        let (loss, acc) = oracle.evaluate(xbar.view(), part)?;
        Ok((grad, loss, acc))
    };
    let work = parts.n() * parts.part_size() * oracle.dim();
    let per_agent: Vec<(Array1<f64>, f64, f64)> = if work >= PARALLEL_WORK {
        parts.parts().par_iter().map(eval).collect::<Result<_>>()?
    } else {
        parts.parts().iter().map(eval).collect::<Result<_>>()?
    };
    let n = parts.n() as f64;
    let mut grad = Array1::<f64>::zeros(oracle.dim());
    let (mut loss, mut acc) = (0.0, 0.0);
    for (g, l, a) in &per_agent {
        grad += g;
        loss += l;
        acc += a;
    }
    grad /= n;
    let test_acc = match test {
        Some(data) => Some(oracle.evaluate(xbar.view(), data)?.1),
        None => None,
    };
    Ok(MetricsRow {
        round: state.round,
        comm_kind,
        grad_norm_sq: grad.dot(&grad),
        consensus_err: state.x.deviation_sq(),
        tracking_err: state.y.deviation_sq(),
        tracking_residual: state.tracking().residual,
        train_loss: loss / n,
        train_acc: acc / n,
        test_acc,
    })
}

/// What happened during one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub kind: CommKind,
    /// Tracking identity after each local step (empty for the baseline).
    pub local_checks: Vec<TrackingCheck>,
}

/// Drives a single run round by round.
pub struct Simulator<'a> {
    oracle: &'a ModelOracle,
    parts: &'a PartitionedDataset,
    mixing: &'a MixingMatrix,
    cfg: RunConfig,
    algorithm: Algorithm,
    state: NetworkState,
}

impl<'a> Simulator<'a> {
    pub fn new(
        x0: ArrayView1<'_, f64>,
        oracle: &'a ModelOracle,
        parts: &'a PartitionedDataset,
        mixing: &'a MixingMatrix,
        cfg: RunConfig,
        algorithm: Algorithm,
    ) -> Result<Self> {
        if mixing.n() != parts.n() {
            return Err(EngineError::Config(format!(
                "mixing matrix is {0}x{0} but there are {1} agents",
                mixing.n(),
                parts.n()
            )));
        }
        let state = init_state(x0, oracle, parts, &cfg)?;
        Ok(Self { oracle, parts, mixing, cfg, algorithm, state })
    }

    /// Continues from a previously reached state.
    pub fn resume(
        state: NetworkState,
        oracle: &'a ModelOracle,
        parts: &'a PartitionedDataset,
        mixing: &'a MixingMatrix,
        cfg: RunConfig,
        algorithm: Algorithm,
    ) -> Result<Self> {
        if mixing.n() != parts.n() || state.x.n() != parts.n() || state.x.d() != oracle.dim() {
            return Err(EngineError::Config("state, data and mixing matrix disagree in shape".into()));
        }
        Ok(Self { oracle, parts, mixing, cfg, algorithm, state })
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn into_state(self) -> NetworkState {
        self.state
    }

    /// Executes round `k -> k + 1`.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let key = RoundKey::new(self.cfg.seed, self.state.round as u64 + 1);
        let comm = draw_comm_matrix(self.cfg.p, self.mixing, key.server_draw());
        let (next, local_checks) = match self.algorithm {
            Algorithm::Pisco => {
                let locals = local_phase(&self.state, self.oracle, self.parts, &self.cfg, key)?;
                let next = comm_phase(&self.state, &locals, comm, self.oracle, self.parts, &self.cfg, key)?;
                (next, locals.checks)
            }
            Algorithm::PiscoCompact => {
                let (next, locals) = compact_round(&self.state, self.oracle, self.parts, comm, &self.cfg, key)?;
                (next, locals.checks)
            }
            Algorithm::Dsgt => (dsgt_round(&self.state, self.oracle, self.parts, comm, &self.cfg, key)?, Vec::new()),
        };
        self.state = next;
        let check = self.state.tracking();
        if !check.holds(TRACKING_TOL) && self.state.is_finite() {
            log::warn!(
                "round {}: tracking residual {:.3e} exceeds tolerance (scale {:.3e})",
                self.state.round,
                check.residual,
                check.scale
            );
        }
        Ok(RoundOutcome { kind: comm.kind(), local_checks })
    }

    pub fn metrics(&self, comm_kind: Option<CommKind>, test: Option<&Dataset>) -> Result<MetricsRow> {
        metrics_snapshot(&self.state, comm_kind, self.oracle, self.parts, test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_logistic;
    use crate::graphs::{build_topology, metropolis_weights, TopologyKind};
    use crate::rng::Purpose;

    fn setup(n: usize) -> (ModelOracle, PartitionedDataset, MixingMatrix) {
        let parts = synth_logistic(n, 30, 5, 1.5, 3).unwrap();
        let oracle = ModelOracle::logistic(5, 0.01).unwrap();
        let w = metropolis_weights(&build_topology(TopologyKind::Ring, n, None, 0).unwrap());
        (oracle, parts, w)
    }

    fn cfg(p: f64, local_steps: usize, batch_size: usize) -> RunConfig {
        RunConfig { p, local_steps, eta_l: 0.1, eta_c: 0.8, batch_size, rounds: 10, seed: 5 }
    }

    #[test]
    fn init_is_consensus_and_tracking() {
        let (oracle, parts, _) = setup(4);
        let c = cfg(0.1, 2, 8);
        let x0 = Array1::from_vec(vec![0.3, -0.1, 0.0, 0.2, 1.0]);
        let s = init_state(x0.view(), &oracle, &parts, &c).unwrap();
        assert_eq!(s.x.deviation_sq(), 0.0);
        assert_eq!(s.y, s.g);
        assert_eq!(s, init_state(x0.view(), &oracle, &parts, &c).unwrap());
        assert!(init_state(Array1::zeros(3).view(), &oracle, &parts, &c).is_err());
    }

    #[test]
    fn init_at_origin_is_half_label_weighted_mean() {
        let (_, parts, _) = setup(3);
        let oracle = ModelOracle::logistic(5, 0.0).unwrap();
        let c = cfg(0.0, 1, 1000);
        let s = init_state(Array1::zeros(5).view(), &oracle, &parts, &c).unwrap();
        for i in 0..3 {
            let part = parts.part(i);
            let mut expect = Array1::<f64>::zeros(5);
            for (row, &y) in part.features().rows().into_iter().zip(part.labels()) {
                expect.scaled_add(-(y as f64) / 2.0, &row);
            }
            expect /= part.len() as f64;
            let diff = &s.g.agent(i) - &expect;
            assert!(diff.iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn comm_draw_extremes_and_frequency() {
        let (_, _, w) = setup(4);
        for r in 0..50 {
            let key = RoundKey::new(1, r).server_draw();
            assert_eq!(draw_comm_matrix(0.0, &w, key).kind(), CommKind::Gossip);
            assert_eq!(draw_comm_matrix(1.0, &w, key).kind(), CommKind::Server);
        }
        let hits = (1..=10_000u64)
            .filter(|&r| draw_comm_matrix(0.5, &w, RoundKey::new(9, r).server_draw()).kind() == CommKind::Server)
            .count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.015, "server frequency {freq}");
    }

    #[test]
    fn single_local_step_is_plain_descent() {
        let (oracle, parts, _) = setup(4);
        let c = cfg(0.0, 1, 8);
        let s = init_state(Array1::zeros(5).view(), &oracle, &parts, &c).unwrap();
        let locals = local_phase(&s, &oracle, &parts, &c, RoundKey::new(c.seed, 1)).unwrap();
        assert_eq!(locals.x, s.x.add_scaled(-c.eta_l, &s.y));
    }

    #[test]
    fn zero_local_step_full_batch_keeps_tracker() {
        let (oracle, parts, _) = setup(4);
        let mut c = cfg(0.0, 3, 1000);
        c.eta_l = 0.0;
        let s = init_state(Array1::zeros(5).view(), &oracle, &parts, &c).unwrap();
        let locals = local_phase(&s, &oracle, &parts, &c, RoundKey::new(c.seed, 1)).unwrap();
        assert_eq!(locals.x, s.x);
        assert_eq!(locals.y, s.y);
    }

    #[test]
    fn zero_local_step_minibatch_resamples() {
        let (oracle, parts, _) = setup(4);
        let mut c = cfg(0.0, 1, 4);
        c.eta_l = 0.0;
        let s = init_state(Array1::zeros(5).view(), &oracle, &parts, &c).unwrap();
        let key = RoundKey::new(c.seed, 1);
        let locals = local_phase(&s, &oracle, &parts, &c, key).unwrap();
        let m = parts.part_size();
        let batches: Vec<Batch> = (0..4).map(|i| draw_minibatch(m, 4, key.local_batch(i, 1))).collect();
        let resampled = distributed_stochastic_gradient(&oracle, &s.x, &parts, &batches).unwrap();
        let expect = s.y.add_scaled(1.0, &resampled).add_scaled(-1.0, &s.g);
        assert!(locals.y.max_abs_diff(&expect) == 0.0);
    }

    #[test]
    fn server_round_reaches_consensus() {
        let (oracle, parts, _) = setup(4);
        let c = cfg(1.0, 3, 8);
        let s = init_state(Array1::zeros(5).view(), &oracle, &parts, &c).unwrap();
        let key = RoundKey::new(c.seed, 1);
        let locals = local_phase(&s, &oracle, &parts, &c, key).unwrap();
        let next = comm_phase(&s, &locals, CommMatrix::Server, &oracle, &parts, &c, key).unwrap();
        assert!(next.x.deviation_sq() <= 1e-12 * next.x.frobenius_sq());
        assert_eq!(next.round, 1);
    }

    #[test]
    fn compact_with_zero_eta_only_mixes() {
        let (oracle, parts, w) = setup(4);
        let mut c = cfg(0.0, 2, 8);
        c.eta_c = 0.0;
        let x0 = Array1::from_vec(vec![0.5, 0.0, -0.5, 0.1, 0.0]);
        let mut s = init_state(x0.view(), &oracle, &parts, &c).unwrap();
        s.x.agent_mut(0)[0] = 2.0;
        let key = RoundKey::new(c.seed, 1);
        let (next, _) = compact_round(&s, &oracle, &parts, CommMatrix::Gossip(&w), &c, key).unwrap();
        assert!(next.x.max_abs_diff(&s.x.mix(CommMatrix::Gossip(&w))) < 1e-15);
        let expect_y = s.y.add_scaled(1.0, &next.g).add_scaled(-1.0, &s.g).mix(CommMatrix::Gossip(&w));
        assert!(next.y.max_abs_diff(&expect_y) < 1e-15);
    }

    #[test]
    fn dsgt_zero_step_keeps_x() {
        let (oracle, parts, w) = setup(4);
        let mut c = cfg(0.0, 1, 8);
        c.eta_l = 0.0;
        let mut s = init_state(Array1::zeros(5).view(), &oracle, &parts, &c).unwrap();
        for r in 1..=5 {
            let next = dsgt_round(&s, &oracle, &parts, CommMatrix::Gossip(&w), &c, RoundKey::new(c.seed, r)).unwrap();
            assert!(next.x.max_abs_diff(&s.x) < 1e-15);
            assert!(next.tracking().holds(TRACKING_TOL));
            s = next;
        }
    }

    #[test]
    fn plan_matches_closed_form() {
        let plan = plan_step_sizes(&PlanInputs {
            alpha: 1.0,
            p: 1.0,
            lambda_p: 1.0,
            smoothness: 1.0,
            local_steps: 1,
            sigma: 0.0,
            batch_size: 1,
            n: 10,
            rounds: 100,
            f_tilde: 1.0,
        })
        .unwrap();
        assert!((plan.eta_c - 2f64.sqrt()).abs() < 1e-15);
        assert!((plan.eta_l - 2f64.sqrt() / 720.0).abs() < 1e-18);
        assert!((plan.eta_l - 1.9642e-3).abs() < 1e-7);
        assert_eq!(plan.k_min, 0.0);
    }

    #[test]
    fn plan_pure_gossip_and_rejection() {
        let base = PlanInputs {
            alpha: 2.0,
            p: 0.0,
            lambda_p: 0.3,
            smoothness: 1.0,
            local_steps: 1,
            sigma: 0.0,
            batch_size: 1,
            n: 10,
            rounds: 100,
            f_tilde: 1.0,
        };
        assert!((plan_step_sizes(&base).unwrap().eta_c - 0.6).abs() < 1e-15);
        let bad = PlanInputs { lambda_p: 0.0, ..base };
        assert!(matches!(plan_step_sizes(&bad), Err(EngineError::Assumption(_))));
    }

    #[test]
    fn plan_with_noise_tunes_local_step() {
        let inp = PlanInputs {
            alpha: 1.0,
            p: 0.1,
            lambda_p: 0.4,
            smoothness: 2.0,
            local_steps: 4,
            sigma: 1.0,
            batch_size: 16,
            n: 10,
            rounds: 1_000_000_000_000,
            f_tilde: 1.0,
        };
        let plan = plan_step_sizes(&inp).unwrap();
        assert!(plan.eta_l < plan.eta_l_max);
        assert!(plan.k_min > 0.0);
        // From K = k_min on, the tuned term is at most sqrt(1+p) lambda_p / (360 L) before
        // the 1/(alpha T_o) scaling.
        let at_kmin = plan_step_sizes(&PlanInputs { rounds: plan.k_min.ceil() as usize, ..inp }).unwrap();
        let eta_bar = 1.1f64.sqrt() * 0.4 / (360.0 * 2.0);
        assert!(at_kmin.eta_l <= eta_bar / 4.0 * (1.0 + 1e-12));
        let short = plan_step_sizes(&PlanInputs { rounds: 10, ..inp }).unwrap();
        assert_eq!(short.eta_l, short.eta_l_max);
    }

    #[test]
    fn metrics_at_consensus() {
        let (oracle, parts, _) = setup(4);
        let c = cfg(0.0, 1, 1000);
        let s = init_state(Array1::zeros(5).view(), &oracle, &parts, &c).unwrap();
        let row = metrics_snapshot(&s, None, &oracle, &parts, None).unwrap();
        assert_eq!(row.consensus_err, 0.0);
        assert!(row.tracking_residual <= 1e-15);
        let pooled = parts.pooled();
        let g = oracle.full_gradient(s.x.mean().view(), &pooled).unwrap();
        assert!((row.grad_norm_sq - g.dot(&g)).abs() < 1e-14);
        assert!(row.test_acc.is_none());
    }

    #[test]
    fn simulator_is_deterministic() {
        let (oracle, parts, w) = setup(4);
        let c = cfg(0.3, 2, 8);
        let run = || {
            let mut sim =
                Simulator::new(Array1::zeros(5).view(), &oracle, &parts, &w, c, Algorithm::Pisco).unwrap();
            let kinds: Vec<CommKind> = (0..10).map(|_| sim.step().unwrap().kind).collect();
            (kinds, sim.into_state())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn round_key_streams_are_distinct_from_aux() {
        let k = RoundKey::new(1, 1).local_batch(0, 1);
        assert_ne!(k.seed_bytes(), StreamKey::new(1, Purpose::Auxiliary).seed_bytes());
    }
}
