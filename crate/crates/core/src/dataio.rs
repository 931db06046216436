//! Dataset ingestion (LIBSVM text, IDX binary), synthetic workloads and
//! heterogeneous partitioning across agents.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Purpose, StreamKey};

pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Fraction of synthetic logistic labels flipped at random.
pub const SYNTH_LABEL_NOISE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty input")]
    Empty,
    #[error("{stream}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    MagicMismatch { stream: &'static str, expected: u32, found: u32 },
    #[error("image count {images} differs from label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{stream}: truncated, expected {expected} bytes but found {found}")]
    Truncated { stream: &'static str, expected: usize, found: usize },
    #[error("{stream}: {extra} bytes beyond the declared payload")]
    TrailingBytes { stream: &'static str, extra: usize },
    #[error("cannot partition {samples} samples across {agents} agents")]
    InvalidPartition { samples: usize, agents: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Label semantics of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Labels in {-1, +1}.
    Binary,
    /// Labels in `0..classes`.
    Multiclass { classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<i32>,
    task: Task,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<i32>, task: Task) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(DataError::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let ok = match task {
            Task::Binary => labels.iter().all(|&y| y == 1 || y == -1),
            Task::Multiclass { classes } => labels.iter().all(|&y| y >= 0 && (y as usize) < classes),
        };
        if !ok {
            return Err(DataError::InvalidArgument(format!("labels out of range for {task:?}")));
        }
        Ok(Self { features, labels, task })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Sample count.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            task: self.task,
        }
    }

    /// Stacks datasets with identical width and task.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(DataError::Empty)?;
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| DataError::InvalidArgument(format!("cannot stack parts: {e}")))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Dataset::new(features, labels, first.task)
    }

    /// Largest squared row norm, used for smoothness bounds.
    pub fn max_row_norm_sq(&self) -> f64 {
        self.features.rows().into_iter().map(|r| r.dot(&r)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heterogeneity {
    Sorted,
    Shuffled,
}

/// Equal-size per-agent datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDataset {
    parts: Vec<Dataset>,
    source_indices: Vec<Vec<usize>>,
    heterogeneity: Heterogeneity,
}

impl PartitionedDataset {
    pub fn from_parts(parts: Vec<Dataset>, heterogeneity: Heterogeneity) -> Result<Self> {
        let m = parts.first().ok_or(DataError::Empty)?.len();
        if m == 0 || parts.iter().any(|p| p.len() != m) {
            return Err(DataError::InvalidArgument("parts must be nonempty and of equal size".into()));
        }
        let source_indices = (0..parts.len()).map(|i| (i * m..(i + 1) * m).collect()).collect();
        Ok(Self { parts, source_indices, heterogeneity })
    }

    pub fn n(&self) -> usize {
        self.parts.len()
    }

    /// Per-agent sample count `m`.
    pub fn part_size(&self) -> usize {
        self.parts[0].len()
    }

    pub fn parts(&self) -> &[Dataset] {
        &self.parts
    }

    pub fn part(&self, i: usize) -> &Dataset {
        &self.parts[i]
    }

    /// Indices into the source dataset held by agent `i`.
    pub fn source_indices(&self, i: usize) -> &[usize] {
        &self.source_indices[i]
    }

    pub fn heterogeneity(&self) -> Heterogeneity {
        self.heterogeneity
    }

    pub fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    pub fn task(&self) -> Task {
        self.parts[0].task()
    }

    /// Union of all parts in agent order.
    pub fn pooled(&self) -> Dataset {
        Dataset::concat(&self.parts).expect("parts share width and task")
    }
}

/// Parses LIBSVM text (`label idx:val ...`, 1-based ascending indices).
///
/// The dense width is `max(d_hint, largest index)`, plus a trailing constant-1
/// column when `add_bias` is set. Positive labels map to +1, everything else to -1.
pub fn parse_libsvm<R: Read>(reader: R, d_hint: Option<usize>, add_bias: bool) -> Result<Dataset> {
    let reader = BufReader::new(reader);
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("nonempty line has a token");
        let label: f64 = label_tok.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("invalid label `{label_tok}`"),
        })?;
        let mut entries = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| DataError::Parse {
                line: line_no,
                msg: format!("expected `index:value`, got `{tok}`"),
            })?;
            let i: usize = i.parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("invalid index `{i}`"),
            })?;
            let v: f64 = v.parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("invalid value `{v}`"),
            })?;
            if i == 0 || i <= last {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: format!("index {i} is not 1-based ascending (previous {last})"),
                });
            }
            last = i;
            entries.push((i - 1, v));
        }
        max_index = max_index.max(last);
        labels.push(if label > 0.0 { 1 } else { -1 });
        rows.push(entries);
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }

    let width = max_index.max(d_hint.unwrap_or(0));
    let dim = width + usize::from(add_bias);
    let mut features = Array2::<f64>::zeros((rows.len(), dim));
    for (r, entries) in rows.iter().enumerate() {
        for &(c, v) in entries {
            features[[r, c]] = v;
        }
        if add_bias {
            features[[r, width]] = 1.0;
        }
    }
    Dataset::new(features, labels, Task::Binary)
}

pub fn load_libsvm(path: impl AsRef<Path>, d_hint: Option<usize>, add_bias: bool) -> Result<Dataset> {
    parse_libsvm(std::fs::File::open(path)?, d_hint, add_bias)
}

/// Formats one sample as a LIBSVM line, omitting zeros (and the bias column if
/// `skip_last` is set).
pub fn format_libsvm_line(data: &Dataset, row: usize, skip_last: bool) -> String {
    let feats = data.features.row(row);
    let end = if skip_last { feats.len().saturating_sub(1) } else { feats.len() };
    let mut out = format!("{:+}", data.labels[row]);
    for (i, v) in feats.iter().take(end).enumerate() {
        if *v != 0.0 {
            out.push_str(&format!(" {}:{}", i + 1, v));
        }
    }
    out
}

fn read_be_u32(bytes: &[u8], offset: usize, stream: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { stream, expected: offset + 4, found: bytes.len() })
}

fn check_payload(bytes: &[u8], expected: usize, stream: &'static str) -> Result<()> {
    match bytes.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(DataError::Truncated { stream, expected, found: bytes.len() }),
        std::cmp::Ordering::Greater => Err(DataError::TrailingBytes { stream, extra: bytes.len() - expected }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Parses an IDX image/label pair (big-endian, MNIST layout).
pub fn parse_idx<R1: Read, R2: Read>(mut images: R1, mut labels: R2, normalize: bool) -> Result<Dataset> {
    let mut img = Vec::new();
    images.read_to_end(&mut img)?;
    let mut lab = Vec::new();
    labels.read_to_end(&mut lab)?;

    let magic = read_be_u32(&img, 0, "images")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::MagicMismatch { stream: "images", expected: IDX_IMAGE_MAGIC, found: magic });
    }
    let magic = read_be_u32(&lab, 0, "labels")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::MagicMismatch { stream: "labels", expected: IDX_LABEL_MAGIC, found: magic });
    }

    let count = read_be_u32(&img, 4, "images")? as usize;
    let rows = read_be_u32(&img, 8, "images")? as usize;
    let cols = read_be_u32(&img, 12, "images")? as usize;
    let label_count = read_be_u32(&lab, 4, "labels")? as usize;
    if count != label_count {
        return Err(DataError::CountMismatch { images: count, labels: label_count });
    }
    let pixels = rows * cols;
    check_payload(&img, 16 + count * pixels, "images")?;
    check_payload(&lab, 8 + count, "labels")?;

    let scale = if normalize { 1.0 / 255.0 } else { 1.0 };
    let features = Array2::from_shape_fn((count, pixels), |(r, c)| img[16 + r * pixels + c] as f64 * scale);
    let labels: Vec<i32> = lab[8..].iter().map(|&b| b as i32).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    Dataset::new(features, labels, Task::Multiclass { classes })
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, normalize: bool) -> Result<Dataset> {
    parse_idx(std::fs::File::open(images)?, std::fs::File::open(labels)?, normalize)
}

/// Stable sort by label, then `n` contiguous blocks of `floor(s / n)` samples.
/// The trailing remainder is dropped.
pub fn partition_sorted(data: &Dataset, n: usize) -> Result<PartitionedDataset> {
    if n == 0 || n > data.len() {
        return Err(DataError::InvalidPartition { samples: data.len(), agents: n });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| data.labels[i]);
    Ok(split_blocks(data, &order, n, Heterogeneity::Sorted))
}

/// Seeded random permutation, then `n` contiguous blocks (near-iid split).
pub fn partition_shuffled(data: &Dataset, n: usize, seed: u64) -> Result<PartitionedDataset> {
    if n == 0 || n > data.len() {
        return Err(DataError::InvalidPartition { samples: data.len(), agents: n });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = StreamKey::new(seed, Purpose::Auxiliary).rng();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        order.swap(i, j);
    }
    Ok(split_blocks(data, &order, n, Heterogeneity::Shuffled))
}

fn split_blocks(data: &Dataset, order: &[usize], n: usize, heterogeneity: Heterogeneity) -> PartitionedDataset {
    let m = data.len() / n;
    let source_indices: Vec<Vec<usize>> = order.chunks_exact(m).take(n).map(<[usize]>::to_vec).collect();
    let parts = source_indices.iter().map(|idx| data.select(idx)).collect();
    PartitionedDataset { parts, source_indices, heterogeneity }
}

/// Generator for the heterogeneous synthetic logistic workload.
///
/// Agent `i` draws standard normal features shifted by a per-agent offset of
/// norm `shift`; labels come from a fixed unit-norm linear separator with
/// [`SYNTH_LABEL_NOISE`] sign flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthLogistic {
    pub n_agents: usize,
    pub m: usize,
    pub d: usize,
    pub shift: f64,
    pub seed: u64,
}

impl SynthLogistic {
    fn check(&self) -> Result<()> {
        if self.n_agents == 0 || self.m == 0 || self.d == 0 {
            return Err(DataError::InvalidArgument("n_agents, m and d must be positive".into()));
        }
        if !self.shift.is_finite() || self.shift < 0.0 {
            return Err(DataError::InvalidArgument(format!("shift {} must be finite and >= 0", self.shift)));
        }
        Ok(())
    }

    fn key(&self) -> StreamKey {
        StreamKey::new(self.seed, Purpose::Synthetic)
    }

    fn unit_vector(&self, step: u64, agent: u64) -> Array1<f64> {
        let mut rng = self.key().step(step).agent(agent).rng();
        let v: Array1<f64> = Array1::from_iter((0..self.d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 { v / norm } else { v }
    }

    /// Unit-norm ground-truth separator.
    pub fn separator(&self) -> Array1<f64> {
        self.unit_vector(0, 0)
    }

    /// Mean offset of agent `i` (norm `shift`).
    pub fn offset(&self, agent: usize) -> Array1<f64> {
        self.unit_vector(1, agent as u64) * self.shift
    }

    fn draw(&self, agent: usize, count: usize, stream: u64) -> Dataset {
        let truth = self.separator();
        let offset = self.offset(agent);
        let mut rng = self.key().step(stream).agent(agent as u64).rng();
        let mut features = Array2::<f64>::zeros((count, self.d));
        let mut labels = Vec::with_capacity(count);
        for mut row in features.rows_mut() {
            for (x, o) in row.iter_mut().zip(offset.iter()) {
                *x = rng.sample::<f64, _>(StandardNormal) + o;
            }
            let mut y = if row.dot(&truth) >= 0.0 { 1 } else { -1 };
            if rng.random::<f64>() < SYNTH_LABEL_NOISE {
                y = -y;
            }
            labels.push(y);
        }
        Dataset::new(features, labels, Task::Binary).expect("labels are +-1")
    }

    pub fn generate(&self) -> Result<PartitionedDataset> {
        self.check()?;
        let parts = (0..self.n_agents).map(|i| self.draw(i, self.m, 2)).collect();
        let tag = if self.shift > 0.0 { Heterogeneity::Sorted } else { Heterogeneity::Shuffled };
        PartitionedDataset::from_parts(parts, tag)
    }

    /// Held-out samples from the same per-agent distributions, `per_agent` each.
    pub fn test_set(&self, per_agent: usize) -> Result<Dataset> {
        self.check()?;
        let parts: Vec<Dataset> = (0..self.n_agents).map(|i| self.draw(i, per_agent, 3)).collect();
        Dataset::concat(&parts)
    }
}

pub fn synth_logistic(n_agents: usize, m: usize, d: usize, shift: f64, seed: u64) -> Result<PartitionedDataset> {
    SynthLogistic { n_agents, m, d, shift, seed }.generate()
}

/// Gaussian class clusters for small multiclass workloads.
///
/// Class `c` has a random center scaled to norm `separation`; samples add unit
/// normal noise. Classes are assigned round-robin so counts stay balanced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthMulticlass {
    pub samples: usize,
    pub d: usize,
    pub classes: usize,
    pub separation: f64,
    pub seed: u64,
}

impl SynthMulticlass {
    fn center(&self, class: usize) -> Array1<f64> {
        let mut rng = StreamKey::new(self.seed, Purpose::Synthetic).step(10).agent(class as u64).rng();
        let v: Array1<f64> = Array1::from_iter((0..self.d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.dot(&v).sqrt();
        v * (self.separation / norm.max(f64::MIN_POSITIVE))
    }

    fn draw(&self, count: usize, stream: u64) -> Result<Dataset> {
        if self.samples == 0 || self.d == 0 || self.classes < 2 {
            return Err(DataError::InvalidArgument("need samples > 0, d > 0 and at least 2 classes".into()));
        }
        let centers: Vec<Array1<f64>> = (0..self.classes).map(|c| self.center(c)).collect();
        let mut rng = StreamKey::new(self.seed, Purpose::Synthetic).step(stream).rng();
        let mut features = Array2::<f64>::zeros((count, self.d));
        let mut labels = Vec::with_capacity(count);
        for (r, mut row) in features.rows_mut().into_iter().enumerate() {
            let c = r % self.classes;
            for (x, mu) in row.iter_mut().zip(centers[c].iter()) {
                *x = mu + rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c as i32);
        }
        Dataset::new(features, labels, Task::Multiclass { classes: self.classes })
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.draw(self.samples, 11)
    }

    pub fn test_set(&self, count: usize) -> Result<Dataset> {
        self.draw(count, 12)
    }
}
