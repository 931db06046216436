//! CSV files written by a run and read back by `plot`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use crate::agents::CommKind;
use crate::engine::MetricsRow;

use super::run::RunRecord;
use super::{HarnessError, Result};

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.csv";
pub const SUMMARY_FILE: &str = "threshold_summary.csv";

pub const RUN_COLUMNS: [&str; 9] = [
    "round",
    "comm_kind",
    "grad_norm_sq",
    "consensus_err",
    "tracking_err",
    "tracking_residual",
    "train_loss",
    "train_acc",
    "test_acc",
];

/// Numeric metric columns, in CSV order.
pub const METRIC_COLUMNS: [&str; 7] =
    ["grad_norm_sq", "consensus_err", "tracking_err", "tracking_residual", "train_loss", "train_acc", "test_acc"];

/// 17 significant digits, which round-trips every `f64`.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn opt_int(v: Option<usize>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn metric_values(r: &MetricsRow) -> [Option<f64>; 7] {
    [
        Some(r.grad_norm_sq),
        Some(r.consensus_err),
        Some(r.tracking_err),
        Some(r.tracking_residual),
        Some(r.train_loss),
        Some(r.train_acc),
        r.test_acc,
    ]
}

fn csv_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Output(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(csv_err)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let fail = |e: &dyn std::fmt::Display| HarnessError::Output(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(&e))?;
    tmp.write_all(bytes).map_err(|e| fail(&e))?;
    tmp.persist(path).map_err(|e| fail(&e))?;
    Ok(())
}

pub fn run_csv_name(p: f64, local_steps: usize, seed: u64) -> String {
    format!("run_p{p}_to{local_steps}_seed{seed}.csv")
}

/// Per-run CSV. The initial state has `comm_kind = init`; a missing test set
/// leaves `test_acc` empty.
pub fn run_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RUN_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.round.to_string(), r.comm_kind.map_or("init", |k| k.as_str()).to_string()];
        rec.extend(metric_values(r).iter().map(|v| opt_num(*v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish(w)
}

struct Table {
    columns: HashMap<String, usize>,
    records: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        let headers = r.headers().map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        let columns = headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        let records = r
            .records()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self { columns, records })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.columns.get(name).copied().ok_or_else(|| HarnessError::Data(format!("missing column `{name}`")))
    }

    fn field<'a>(&self, rec: &'a csv::StringRecord, name: &str) -> Result<&'a str> {
        Ok(rec.get(self.col(name)?).unwrap_or(""))
    }

    fn opt_f64(&self, rec: &csv::StringRecord, name: &str) -> Result<Option<f64>> {
        let s = self.field(rec, name)?;
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| HarnessError::Data(format!("column `{name}`: invalid number `{s}`")))
    }

    fn f64(&self, rec: &csv::StringRecord, name: &str) -> Result<f64> {
        self.opt_f64(rec, name)?.ok_or_else(|| HarnessError::Data(format!("column `{name}`: empty cell")))
    }

    fn usize(&self, rec: &csv::StringRecord, name: &str) -> Result<usize> {
        let s = self.field(rec, name)?;
        s.parse().map_err(|_| HarnessError::Data(format!("column `{name}`: invalid integer `{s}`")))
    }
}

pub fn read_run_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let t = Table::read(path)?;
    t.records
        .iter()
        .map(|rec| {
            let comm_kind = match t.field(rec, "comm_kind")? {
                "init" => None,
                "gossip" => Some(CommKind::Gossip),
                "server" => Some(CommKind::Server),
                other => return Err(HarnessError::Data(format!("unknown comm_kind `{other}`"))),
            };
            Ok(MetricsRow {
                round: t.usize(rec, "round")?,
                comm_kind,
                grad_norm_sq: t.f64(rec, "grad_norm_sq")?,
                consensus_err: t.f64(rec, "consensus_err")?,
                tracking_err: t.f64(rec, "tracking_err")?,
                tracking_residual: t.f64(rec, "tracking_residual")?,
                train_loss: t.f64(rec, "train_loss")?,
                train_acc: t.f64(rec, "train_acc")?,
                test_acc: t.opt_f64(rec, "test_acc")?,
            })
        })
        .collect()
}

/// Seed-averaged metrics of one grid cell at one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub p: f64,
    pub local_steps: usize,
    /// Runs that recorded this round.
    pub n_seeds: usize,
    pub round: usize,
    /// Indexed like [`METRIC_COLUMNS`]; `None` when any run lacks the value.
    pub mean: Vec<Option<f64>>,
    pub std: Vec<Option<f64>>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pointwise mean and sample standard deviation over seeds, per cell and round.
pub fn aggregate(records: &[RunRecord], cells: &[(f64, usize)]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    for &(p, t) in cells {
        let mut by_round: BTreeMap<usize, Vec<&MetricsRow>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.p() == p && r.local_steps() == t) {
            for row in &r.rows {
                by_round.entry(row.round).or_default().push(row);
            }
        }
        for (round, rows) in by_round {
            let mut mean = Vec::with_capacity(METRIC_COLUMNS.len());
            let mut std = Vec::with_capacity(METRIC_COLUMNS.len());
            for c in 0..METRIC_COLUMNS.len() {
                let vals: Option<Vec<f64>> = rows.iter().map(|r| metric_values(r)[c]).collect();
                let stats = vals.map(|v| mean_std(&v));
                mean.push(stats.map(|s| s.0));
                std.push(stats.map(|s| s.1));
            }
            out.push(AggregateRow { p, local_steps: t, n_seeds: rows.len(), round, mean, std });
        }
    }
    out
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["p".to_string(), "T_o".into(), "n_seeds".into(), "round".into()];
    for m in METRIC_COLUMNS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![num(r.p), r.local_steps.to_string(), r.n_seeds.to_string(), r.round.to_string()];
        for (m, s) in r.mean.iter().zip(&r.std) {
            rec.push(opt_num(*m));
            rec.push(opt_num(*s));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let t = Table::read(path)?;
    t.records
        .iter()
        .map(|rec| {
            let mut mean = Vec::new();
            let mut std = Vec::new();
            for m in METRIC_COLUMNS {
                mean.push(t.opt_f64(rec, &format!("{m}_mean"))?);
                std.push(t.opt_f64(rec, &format!("{m}_std"))?);
            }
            Ok(AggregateRow {
                p: t.f64(rec, "p")?,
                local_steps: t.usize(rec, "T_o")?,
                n_seeds: t.usize(rec, "n_seeds")?,
                round: t.usize(rec, "round")?,
                mean,
                std,
            })
        })
        .collect()
}

/// One row per run: resolved step sizes, communication counts and threshold rounds.
pub fn thresholds_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "p",
        "T_o",
        "seed",
        "eta_l",
        "eta_c",
        "lambda_p",
        "rounds_completed",
        "gossip_rounds",
        "server_rounds",
        "diverged",
        "train_threshold_round",
        "train_threshold_gossip",
        "train_threshold_server",
        "test_threshold_round",
        "peak95_round",
        "peak_test_acc",
        "final_grad_norm_sq",
        "final_train_loss",
    ])
    .map_err(csv_err)?;
    for r in records {
        let last = r.rows.last().expect("initial row is always recorded");
        w.write_record([
            num(r.p()),
            r.local_steps().to_string(),
            r.seed().to_string(),
            num(r.config.eta_l),
            num(r.config.eta_c),
            num(r.lambda_p),
            r.rounds_completed.to_string(),
            r.gossip_rounds.to_string(),
            r.server_rounds.to_string(),
            r.diverged.to_string(),
            opt_int(r.train_hit.map(|h| h.round)),
            opt_int(r.train_hit.map(|h| h.gossip)),
            opt_int(r.train_hit.map(|h| h.server)),
            opt_int(r.test_hit.map(|h| h.round)),
            opt_int(r.peak95_hit.map(|h| h.round)),
            opt_num(r.peak_test_acc()),
            num(last.grad_norm_sq),
            num(last.train_loss),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Seed-averaged threshold table of one cell. Threshold means are over the
/// seeds that crossed; `*_crossed` counts them.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSummary {
    pub p: f64,
    pub local_steps: usize,
    pub n_seeds: usize,
    pub gossip_rounds_mean: f64,
    pub server_rounds_mean: f64,
    pub train_crossed: usize,
    pub train_round_mean: Option<f64>,
    pub train_gossip_mean: Option<f64>,
    pub train_server_mean: Option<f64>,
    pub test_crossed: usize,
    pub test_round_mean: Option<f64>,
    pub peak95_crossed: usize,
    pub peak95_round_mean: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = usize>) -> (usize, Option<f64>) {
    let v: Vec<f64> = values.map(|x| x as f64).collect();
    if v.is_empty() { (0, None) } else { (v.len(), Some(mean_std(&v).0)) }
}

pub fn threshold_summary(records: &[RunRecord], cells: &[(f64, usize)]) -> Vec<ThresholdSummary> {
    cells
        .iter()
        .map(|&(p, t)| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.p() == p && r.local_steps() == t).collect();
            let (train_crossed, train_round_mean) = mean_of(rs.iter().filter_map(|r| r.train_hit.map(|h| h.round)));
            let (_, train_gossip_mean) = mean_of(rs.iter().filter_map(|r| r.train_hit.map(|h| h.gossip)));
            let (_, train_server_mean) = mean_of(rs.iter().filter_map(|r| r.train_hit.map(|h| h.server)));
            let (test_crossed, test_round_mean) = mean_of(rs.iter().filter_map(|r| r.test_hit.map(|h| h.round)));
            let (peak95_crossed, peak95_round_mean) = mean_of(rs.iter().filter_map(|r| r.peak95_hit.map(|h| h.round)));
            ThresholdSummary {
                p,
                local_steps: t,
                n_seeds: rs.len(),
                gossip_rounds_mean: mean_of(rs.iter().map(|r| r.gossip_rounds)).1.unwrap_or(0.0),
                server_rounds_mean: mean_of(rs.iter().map(|r| r.server_rounds)).1.unwrap_or(0.0),
                train_crossed,
                train_round_mean,
                train_gossip_mean,
                train_server_mean,
                test_crossed,
                test_round_mean,
                peak95_crossed,
                peak95_round_mean,
            }
        })
        .collect()
}

const SUMMARY_COLUMNS: [&str; 13] = [
    "p",
    "T_o",
    "n_seeds",
    "gossip_rounds_mean",
    "server_rounds_mean",
    "train_crossed",
    "train_round_mean",
    "train_gossip_mean",
    "train_server_mean",
    "test_crossed",
    "test_round_mean",
    "peak95_crossed",
    "peak95_round_mean",
];

pub fn summary_csv(rows: &[ThresholdSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for s in rows {
        w.write_record([
            num(s.p),
            s.local_steps.to_string(),
            s.n_seeds.to_string(),
            num(s.gossip_rounds_mean),
            num(s.server_rounds_mean),
            s.train_crossed.to_string(),
            opt_num(s.train_round_mean),
            opt_num(s.train_gossip_mean),
            opt_num(s.train_server_mean),
            s.test_crossed.to_string(),
            opt_num(s.test_round_mean),
            s.peak95_crossed.to_string(),
            opt_num(s.peak95_round_mean),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_threshold_summary(path: &Path) -> Result<Vec<ThresholdSummary>> {
    let t = Table::read(path)?;
    t.records
        .iter()
        .map(|rec| {
            Ok(ThresholdSummary {
                p: t.f64(rec, "p")?,
                local_steps: t.usize(rec, "T_o")?,
                n_seeds: t.usize(rec, "n_seeds")?,
                gossip_rounds_mean: t.f64(rec, "gossip_rounds_mean")?,
                server_rounds_mean: t.f64(rec, "server_rounds_mean")?,
                train_crossed: t.usize(rec, "train_crossed")?,
                train_round_mean: t.opt_f64(rec, "train_round_mean")?,
                train_gossip_mean: t.opt_f64(rec, "train_gossip_mean")?,
                train_server_mean: t.opt_f64(rec, "train_server_mean")?,
                test_crossed: t.usize(rec, "test_crossed")?,
                test_round_mean: t.opt_f64(rec, "test_round_mean")?,
                peak95_crossed: t.usize(rec, "peak95_crossed")?,
                peak95_round_mean: t.opt_f64(rec, "peak95_round_mean")?,
            })
        })
        .collect()
}
