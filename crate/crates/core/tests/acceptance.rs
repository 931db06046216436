//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs under `cargo test`. Criteria whose failure is inherent to the requested
//! setting rather than the implementation are reported as FAIL but do not fail
//! the process unless `PISCO_ACCEPTANCE_STRICT=1`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pisco::dataio::{load_idx, load_libsvm, partition_sorted, synth_logistic, Dataset, Task};
use pisco::engine::{comm_phase, local_phase, Algorithm, NetworkState, RunConfig, Simulator, TRACKING_TOL};
use pisco::graphs::{build_topology, expected_mixing_rate, metropolis_weights, Graph, MixingMatrix, TopologyKind};
use pisco::harness::{self, Experiment, ExperimentSpec, RunRecord};
use pisco::models::{Batch, ModelOracle};
use pisco::rng::RoundKey;
use pisco::{AgentMatrix, CommMatrix, PartitionedDataset};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    /// Failure is expected in the requested setting; see the README.
    known: bool,
    run: fn() -> Outcome,
}

fn ring10() -> MixingMatrix {
    metropolis_weights(&build_topology(TopologyKind::Ring, 10, None, 0).unwrap())
}

fn synth(seed: u64) -> PartitionedDataset {
    synth_logistic(10, 200, 20, 2.0, seed).unwrap()
}

fn logistic() -> ModelOracle {
    ModelOracle::logistic(20, 0.01).unwrap()
}

fn cfg(p: f64, local_steps: usize, batch_size: usize, rounds: usize, seed: u64) -> RunConfig {
    RunConfig { p, local_steps, eta_l: 0.05, eta_c: 1.0, batch_size, rounds, seed }
}

// 1
fn tracking_identity() -> Outcome {
    let (w, parts, oracle) = (ring10(), synth(1), logistic());
    let mut worst: f64 = 0.0;
    let mut checks = 0usize;
    for t_o in [1, 5] {
        for p in [0.0, 0.1, 1.0] {
            let c = cfg(p, t_o, 16, 50, 11);
            let mut sim = Simulator::new(Array1::zeros(20).view(), &oracle, &parts, &w, c, Algorithm::Pisco).unwrap();
            let mut record = |chk: pisco::engine::TrackingCheck| {
                worst = worst.max(chk.residual / (1.0 + chk.scale));
                checks += 1;
            };
            record(sim.state().tracking());
            for _ in 0..50 {
                let out = sim.step().unwrap();
                out.local_checks.into_iter().for_each(&mut record);
                record(sim.state().tracking());
            }
        }
    }
    Outcome::new(worst <= TRACKING_TOL, format!("max ||Ybar-Gbar||_F/(1+||Gbar||_F) = {worst:.2e} over {checks} checks"))
}

// 2
fn staged_equals_compact() -> Outcome {
    let (w, parts, oracle) = (ring10(), synth(1), logistic());
    let mut worst: f64 = 0.0;
    for t_o in [1, 2, 5] {
        let c = cfg(0.1, t_o, 16, 20, 5);
        let x0 = Array1::zeros(20);
        let mut a = Simulator::new(x0.view(), &oracle, &parts, &w, c, Algorithm::Pisco).unwrap();
        let mut b = Simulator::new(x0.view(), &oracle, &parts, &w, c, Algorithm::PiscoCompact).unwrap();
        for _ in 0..20 {
            a.step().unwrap();
            b.step().unwrap();
            let (sa, sb) = (a.state(), b.state());
            worst = worst.max(sa.x.max_abs_diff(&sb.x)).max(sa.y.max_abs_diff(&sb.y)).max(sa.g.max_abs_diff(&sb.g));
        }
    }
    Outcome::new(worst <= 1e-8, format!("max abs difference {worst:.2e} (T_o in 1,2,5; 20 rounds)"))
}

// 3
fn spectral() -> Outcome {
    let ring = ring10().lambda_w();
    let c = (1.0 + 2.0 * (std::f64::consts::PI / 5.0).cos()) / 3.0;
    let closed = 1.0 - c * c;
    let complete = metropolis_weights(&build_topology(TopologyKind::Complete, 10, None, 0).unwrap()).lambda_w();
    let split = metropolis_weights(&Graph::from_edges(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5)]).unwrap()).lambda_w();
    let mut grid_err: f64 = 0.0;
    for i in 0..10 {
        for j in 0..10 {
            let (lw, p) = (i as f64 / 9.0, j as f64 / 9.0);
            let lp = expected_mixing_rate(lw, p).unwrap();
            grid_err = grid_err.max((lp - (lw + p * (1.0 - lw))).abs());
        }
    }
    let pass = (ring - closed).abs() <= 1e-10 && (complete - 1.0).abs() <= 1e-12 && split == 0.0 && grid_err <= 1e-12;
    Outcome::new(
        pass,
        format!(
            "ring-10 {ring:.12} vs {closed:.12}; complete {complete:.12}; two components {split}; lambda_p grid err {grid_err:.1e}"
        ),
    )
}

fn random_dataset(rows: usize, dim: usize, task: Task, rng: &mut ChaCha8Rng) -> Dataset {
    let features = Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0));
    let labels = (0..rows)
        .map(|_| match task {
            Task::Binary => if rng.random::<bool>() { 1 } else { -1 },
            Task::Multiclass { classes } => rng.random_range(0..classes as i32),
        })
        .collect();
    Dataset::new(features, labels, task).unwrap()
}

fn loss(oracle: &ModelOracle, x: &Array1<f64>, data: &Dataset) -> f64 {
    oracle.loss_grad(x.view(), data, &Batch::full(data.len())).unwrap().0
}

// 4
fn gradient_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let oracle = ModelOracle::logistic(20, 0.01).unwrap();
    let data = random_dataset(50, 20, Task::Binary, &mut rng);
    let h = 1e-6;
    let mut worst_log: f64 = 0.0;
    for _ in 0..20 {
        let x = Array1::from_shape_fn(20, |_| rng.random_range(-2.0..2.0));
        let g = oracle.full_gradient(x.view(), &data).unwrap();
        let fd = Array1::from_shape_fn(20, |j| {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[j] += h;
            b[j] -= h;
            (loss(&oracle, &a, &data) - loss(&oracle, &b, &data)) / (2.0 * h)
        });
        let diff = &fd - &g;
        worst_log = worst_log.max(diff.dot(&diff).sqrt() / g.dot(&g).sqrt());
    }

    let mlp = ModelOracle::mlp(784, 32, 10);
    let data = random_dataset(20, 784, Task::Multiclass { classes: 10 }, &mut rng);
    let x = mlp.initial_point(9);
    let g = mlp.full_gradient(x.view(), &data).unwrap();
    let coords: Vec<usize> = (0..50).map(|_| rng.random_range(0..mlp.dim())).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for &j in &coords {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[j] += h;
        b[j] -= h;
        let fd = (loss(&mlp, &a, &data) - loss(&mlp, &b, &data)) / (2.0 * h);
        num += (fd - g[j]).powi(2);
        den += g[j] * g[j];
    }
    let rel_mlp = (num / den).sqrt();
    Outcome::new(
        worst_log < 1e-5 && rel_mlp < 1e-4,
        format!("logistic worst rel err {worst_log:.2e} (20 points); MLP rel err {rel_mlp:.2e} (50 coordinates)"),
    )
}

// 5
fn consensus_collapse() -> Outcome {
    let (w, parts, oracle) = (ring10(), synth(2), logistic());
    let mut worst: f64 = 0.0;
    for (t_o, b) in [(1, 16), (5, 16), (3, 200)] {
        let c = cfg(1.0, t_o, b, 30, 3);
        let mut sim = Simulator::new(Array1::zeros(20).view(), &oracle, &parts, &w, c, Algorithm::Pisco).unwrap();
        for _ in 0..30 {
            sim.step().unwrap();
            let s = sim.state();
            worst = worst.max(s.x.deviation_sq() / s.x.frobenius_sq().max(f64::MIN_POSITIVE));
        }
    }

    // After the first exact averaging every agent holds the same (x, y), so
    // with T_o = 1 and full batches the network evolves like one node that
    // sees the pooled objective.
    let c = cfg(1.0, 1, 200, 40, 3);
    let mut sim = Simulator::new(Array1::zeros(20).view(), &oracle, &parts, &w, c, Algorithm::Pisco).unwrap();
    sim.step().unwrap();
    let pooled = PartitionedDataset::from_parts(vec![parts.pooled()], parts.heterogeneity()).unwrap();
    let s = sim.state();
    let one = |m: &AgentMatrix| AgentMatrix::from_agents(vec![m.mean()]);
    let mut single = NetworkState { x: one(&s.x), y: one(&s.y), g: one(&s.g), round: s.round };
    let single_cfg = RunConfig { batch_size: parts.part_size() * parts.n(), ..c };
    let mut traj_err: f64 = 0.0;
    for _ in 1..40 {
        sim.step().unwrap();
        let key = RoundKey::new(0, single.round as u64 + 1);
        let locals = local_phase(&single, &oracle, &pooled, &single_cfg, key).unwrap();
        single = comm_phase(&single, &locals, CommMatrix::Server, &oracle, &pooled, &single_cfg, key).unwrap();
        let diff = &sim.state().x.mean() - &single.x.agent(0);
        traj_err = traj_err.max(diff.iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    Outcome::new(
        worst <= 1e-12 && traj_err <= 1e-10,
        format!("max consensus_err/||X||_F^2 = {worst:.2e}; x-bar vs single node (T_o=1, full batch) {traj_err:.2e}"),
    )
}

// 6
fn convergence_planned_steps() -> Outcome {
    let (w, parts, oracle) = (ring10(), synth(1), logistic());
    let (p, t_o, rounds) = (0.1, 5, 3000);
    let l = oracle.smoothness(&parts.pooled()).unwrap();
    let lambda_p = expected_mixing_rate(w.lambda_w(), p).unwrap();
    let plan = pisco::engine::plan_step_sizes(&pisco::engine::PlanInputs {
        alpha: 1.0,
        p,
        lambda_p,
        smoothness: l,
        local_steps: t_o,
        sigma: 0.0,
        batch_size: 200,
        n: 10,
        rounds,
        f_tilde: 1.0,
    })
    .unwrap();
    let c = RunConfig { p, local_steps: t_o, eta_l: plan.eta_l, eta_c: plan.eta_c, batch_size: 200, rounds, seed: 1 };
    let mut sim = Simulator::new(Array1::zeros(20).view(), &oracle, &parts, &w, c, Algorithm::Pisco).unwrap();
    let first = sim.metrics(None, None).unwrap().grad_norm_sq;
    let (mut sum, mut best, mut last) = (first, first, first);
    for k in 1..=rounds {
        sim.step().unwrap();
        last = sim.metrics(None, None).unwrap().grad_norm_sq;
        sum += last;
        best = best.min(sum / (k + 1) as f64);
    }
    Outcome::new(
        best < 1e-6,
        format!(
            "eta_c = {:.4}, eta_l = {:.3e}; min running avg {best:.3e} (target 1e-6); ||grad||^2 {first:.3e} -> {last:.3e}; \
             the k=0 term alone bounds the average below by {:.2e}",
            plan.eta_c,
            plan.eta_l,
            first / (rounds + 1) as f64
        ),
    )
}

fn synthetic_spec(p: &str, local_steps: &str, seeds: &str, eta_l: f64, eta_c: &str, rounds: usize) -> ExperimentSpec {
    ExperimentSpec::from_toml(&format!(
        r#"
[workload]
kind = "synthetic_logistic"
m = 200
d = 20
shift = 2.0
data_seed = "run"

[topology]
kind = "ring"
n = 10

[grid]
p = [{p}]
local_steps = [{local_steps}]
seeds = [{seeds}]

[run]
eta_l = {eta_l}
eta_c = {eta_c}
batch_size = 200
rounds = {rounds}

[stopping]
train_threshold = 1e-4
halt_at_train_threshold = true

[output]
dir = "unused"
plots = false
"#
    ))
    .unwrap()
}

fn mean_rounds(records: &[RunRecord], pick: impl Fn(&RunRecord) -> bool) -> Option<f64> {
    let hits: Vec<f64> = records.iter().filter(|r| pick(r)).map(|r| r.train_hit.map(|h| h.round as f64)).collect::<Option<_>>()?;
    Some(hits.iter().sum::<f64>() / hits.len() as f64)
}

// 7
fn local_update_speedup() -> Outcome {
    let spec = synthetic_spec("0.1", "1, 10", "1, 2, 3", 0.2, "1.0", 40_000);
    let records = Experiment::new(spec).unwrap().run_all().unwrap();
    let one = mean_rounds(&records, |r| r.local_steps() == 1);
    let ten = mean_rounds(&records, |r| r.local_steps() == 10);
    match (one, ten) {
        (Some(one), Some(ten)) => Outcome::new(
            ten <= 0.7 * one,
            format!("mean rounds to running avg <= 1e-4: T_o=1 {one:.0}, T_o=10 {ten:.0} (ratio {:.3}; eta_l=0.2, eta_c=1)", ten / one),
        ),
        _ => Outcome::new(false, "threshold not reached by every seed within 40000 rounds"),
    }
}

// 8
fn probability_sweep() -> Outcome {
    let spec = synthetic_spec("0.0, 0.1, 1.0", "1", "1, 2, 3, 4, 5", 0.5, "\"auto\"", 60_000);
    let records = Experiment::new(spec).unwrap().run_all().unwrap();
    let at = |p: f64| mean_rounds(&records, |r| r.p() == p);
    match (at(0.0), at(0.1), at(1.0)) {
        (Some(r0), Some(r1), Some(r2)) => Outcome::new(
            r1 < r0 && r2 <= 1.1 * r1,
            format!("mean rounds to running avg <= 1e-4: p=0 {r0:.0}, p=0.1 {r1:.0}, p=1 {r2:.0} (eta_l=0.5, eta_c=sqrt(1+p) lambda_p)"),
        ),
        _ => Outcome::new(false, "threshold not reached by every seed within 60000 rounds"),
    }
}

// 9
fn disconnected_robustness() -> Outcome {
    let p = 10f64.powf(-0.5);
    let spec = ExperimentSpec::from_toml(&format!(
        r#"
[workload]
kind = "synthetic_multiclass"
samples_per_agent = 200
d = 64
classes = 4
hidden = 16
data_seed = 7
partition = "sorted"

[topology]
kind = "erdos_renyi"
n = 10
param = 0.1
seed = 0

[grid]
p = [0.0, {p}]
local_steps = [10]
seeds = [1]

[run]
eta_l = 0.05
eta_c = 1.0
batch_size = 32
rounds = 500
metrics_every = 10

[output]
dir = "unused"
"#
    ))
    .unwrap();
    let report = harness::validate(&spec).unwrap();
    let lambda_w = report.lambda_w;
    let rejected = report.has_violations()
        && report.cells.iter().any(|c| c.p == 0.0 && !c.contraction)
        && report.warnings.iter().any(|w| w.contains("p = 0"));
    let records = Experiment::new(spec).unwrap().run_all().unwrap();
    let zero = records.iter().find(|r| r.p() == 0.0).unwrap();
    let zero_finite = !zero.diverged && zero.rows.iter().all(|r| r.train_loss.is_finite() && r.grad_norm_sq.is_finite());
    let main = records.iter().find(|r| r.p() == p).unwrap();
    let at = |k: usize| main.rows.iter().find(|r| r.round == k).map(|r| r.train_loss).unwrap();
    let marks: Vec<f64> = (0..=5).map(|i| at(100 * i)).collect();
    let monotone = marks.windows(2).all(|w| w[1] < w[0]);
    let halved = marks[5] < 0.5 * marks[0];
    Outcome::new(
        lambda_w == 0.0 && rejected && zero_finite && monotone && halved,
        format!(
            "lambda_w = {lambda_w}; p=0 rejected by validate: {rejected}; p=0 run finite: {zero_finite}; \
             loss every 100 rounds {:?}",
            marks.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn data_dir() -> PathBuf {
    std::env::var_os("PISCO_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

// 10
fn parsers() -> Outcome {
    let dir = data_dir();
    let mut notes = Vec::new();

    // In-memory inputs exercise both parsers even without the real files.
    let text = "+1 1:0.5 3:1\n-1 2:1\n+1 123:1\n";
    let small = pisco::dataio::parse_libsvm(text.as_bytes(), Some(123), true).unwrap();
    let mut pass = small.dim() == 124 && small.labels() == [1, -1, 1] && small.features()[[2, 122]] == 1.0;
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
    img.extend((0..2 * 784).map(|i| (i % 256) as u8));
    let lab = [0u8, 0, 8, 1, 0, 0, 0, 2, 7, 3];
    let idx = pisco::dataio::parse_idx(&img[..], &lab[..], true).unwrap();
    pass &= idx.len() == 2 && idx.dim() == 784 && idx.labels() == [7, 3] && idx.features()[[0, 255]] == 1.0;
    pass &= pisco::dataio::parse_idx(&img[..img.len() - 1], &lab[..], true).is_err();
    notes.push(format!("in-memory LIBSVM/IDX {}", if pass { "ok" } else { "FAILED" }));
    let a9a = dir.join("a9a");
    if a9a.is_file() {
        let data = load_libsvm(&a9a, Some(123), true).unwrap();
        let parts = partition_sorted(&data, 10).unwrap();
        let pure = |label: i32| parts.parts().iter().filter(|p| p.labels().iter().all(|&y| y == label)).count();
        let (neg, pos) = (pure(-1), pure(1));
        let shape = data.len() == 32561 && data.dim() == 124 && parts.n() == 10 && parts.part_size() == 3256;
        pass &= shape && neg == 5 && pos == 5;
        notes.push(format!(
            "a9a {}x{}, parts 10x{}, pure agents: {neg} negative / {pos} positive (expected 5/5)",
            data.len(),
            data.dim(),
            parts.part_size()
        ));
    } else {
        notes.push(format!("a9a: dataset not present ({})", a9a.display()));
    }
    let (images, labels) = (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"));
    if images.is_file() && labels.is_file() {
        let data = load_idx(&images, &labels, true).unwrap();
        pass &= data.len() == 60000 && data.dim() == 784;
        notes.push(format!("MNIST {}x{}", data.len(), data.dim()));
    } else {
        notes.push(format!("MNIST: dataset not present ({})", dir.display()));
    }
    Outcome::new(pass, notes.join("; "))
}

// 11
fn determinism() -> Outcome {
    let text = r#"
[workload]
kind = "synthetic_logistic"
m = 200
d = 20
shift = 2.0
test_per_agent = 20

[topology]
kind = "ring"
n = 10

[grid]
p = [0.0, 0.1, 1.0]
local_steps = [1, 3]
seeds = [1, 2]

[run]
eta_l = 0.1
eta_c = 1.0
batch_size = 16
rounds = 200

[output]
dir = "out"
"#;
    let read_all = |dir: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        for sub in ["runs", "plots", ""] {
            let d = dir.join(sub);
            let mut names: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
            names.sort();
            for p in names {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
        files
    };
    let run_once = || {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("spec.toml");
        std::fs::write(&path, text).unwrap();
        harness::run_experiment(&ExperimentSpec::load(&path).unwrap()).unwrap();
        read_all(&tmp.path().join("out"))
    };
    let (a, b) = (run_once(), run_once());
    let runs = a.iter().filter(|(n, _)| n.starts_with("runs")).count();
    Outcome::new(a == b && runs == 12, format!("{} files ({runs} per-run CSVs) bytewise identical: {}", a.len(), a == b))
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "tracking identity", budget: Some(Duration::from_secs(10)), known: false, run: tracking_identity },
        Criterion { id: 2, name: "staged = compact", budget: Some(Duration::from_secs(10)), known: false, run: staged_equals_compact },
        Criterion { id: 3, name: "spectral correctness", budget: None, known: false, run: spectral },
        Criterion { id: 4, name: "gradient oracles", budget: Some(Duration::from_secs(30)), known: false, run: gradient_oracles },
        Criterion { id: 5, name: "consensus collapse at p=1", budget: None, known: false, run: consensus_collapse },
        Criterion { id: 6, name: "convergence with planned step sizes", budget: Some(Duration::from_secs(60)), known: true, run: convergence_planned_steps },
        Criterion { id: 7, name: "local-update speedup", budget: Some(Duration::from_secs(120)), known: false, run: local_update_speedup },
        Criterion { id: 8, name: "probability sweep", budget: Some(Duration::from_secs(180)), known: false, run: probability_sweep },
        Criterion { id: 9, name: "disconnected-graph robustness", budget: Some(Duration::from_secs(180)), known: false, run: disconnected_robustness },
        Criterion { id: 10, name: "parsers", budget: None, known: true, run: parsers },
        Criterion { id: 11, name: "determinism", budget: None, known: false, run: determinism },
    ];
    let only: Option<Vec<u32>> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.parse().ok())
        .collect::<Option<Vec<u32>>>()
        .filter(|v| !v.is_empty());
    let strict = std::env::var("PISCO_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut unexpected = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|ids| !ids.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                Outcome::new(false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        let elapsed = start.elapsed();
        let in_budget = c.budget.is_none_or(|b| elapsed <= b);
        let pass = outcome.pass && in_budget;
        let budget = c.budget.map(|b| format!(" / {}s", b.as_secs())).unwrap_or_default();
        let mut line = format!(
            "criterion {:>2} {:<36} {} [{:.1}s{budget}] {}",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            outcome.detail
        );
        if !in_budget {
            line.push_str(" (over runtime budget)");
        }
        if !pass && c.known {
            line.push_str(" (known; see README)");
        }
        println!("{line}");
        if !pass && (!c.known || strict) {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} acceptance criteria failed");
        std::process::exit(1);
    }
}
