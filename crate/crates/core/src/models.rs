//! Loss and gradient oracles, mini-batch sampling and evaluation.

use ndarray::{s, Array1, ArrayView1, Axis};
use rand::Rng;
use rand_distr::Uniform;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentMatrix;
use crate::dataio::{Dataset, PartitionedDataset, Task};
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("batch index {index} out of range for a part of {len} samples")]
    BatchIndex { index: usize, len: usize },
    #[error("dataset task {found:?} does not fit a {model} model")]
    Task { model: &'static str, found: Task },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// `log(1 + exp(t))` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t + (-t).exp()
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Sample indices into one agent's part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch(Vec<usize>);

impl Batch {
    pub fn new(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    /// Every sample once, in order.
    pub fn full(part_size: usize) -> Self {
        Self((0..part_size).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Draws `b` i.i.d. indices with replacement, or the full part when
/// `b >= part_size`.
pub fn draw_minibatch(part_size: usize, b: usize, key: StreamKey) -> Batch {
    assert!(part_size >= 1 && b >= 1, "part_size and b must be positive");
    if b >= part_size {
        return Batch::full(part_size);
    }
    let dist = Uniform::new(0u64, part_size as u64).expect("nonempty range");
    let rng = key.rng();
    Batch(rng.sample_iter(dist).take(b).map(|i| i as usize).collect())
}

/// Logistic regression with the smooth nonconvex penalty
/// `rho * sum_l x_l^2 / (1 + x_l^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub dim: usize,
    pub rho: f64,
}

impl LogisticModel {
    pub fn new(dim: usize, rho: f64) -> Result<Self> {
        if rho < 0.0 || !rho.is_finite() {
            return Err(ModelError::Invalid(format!("rho = {rho} must be finite and >= 0")));
        }
        Ok(Self { dim, rho })
    }

    fn regularizer(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.rho * x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>()
    }

    fn add_regularizer_grad(&self, x: ArrayView1<'_, f64>, grad: &mut Array1<f64>) {
        for (g, v) in grad.iter_mut().zip(x.iter()) {
            let q = 1.0 + v * v;
            *g += self.rho * 2.0 * v / (q * q);
        }
    }

    /// Global smoothness bound `max ||a||^2 / 4 + 2 rho`.
    pub fn smoothness(&self, data: &Dataset) -> f64 {
        0.25 * data.max_row_norm_sq() + 2.0 * self.rho
    }

    fn loss_grad(&self, x: ArrayView1<'_, f64>, data: &Dataset, idx: &[usize]) -> (f64, Array1<f64>) {
        let mut grad = Array1::zeros(self.dim);
        let mut loss = 0.0;
        let features = data.features();
        let labels = data.labels();
        for &i in idx {
            let a = features.row(i);
            let y = labels[i] as f64;
            let margin = -y * a.dot(&x);
            loss += softplus(margin);
            grad.scaled_add(-y * sigmoid(margin), &a);
        }
        let inv = 1.0 / idx.len() as f64;
        grad *= inv;
        self.add_regularizer_grad(x, &mut grad);
        (loss * inv + self.regularizer(x), grad)
    }

    fn evaluate(&self, x: ArrayView1<'_, f64>, data: &Dataset) -> (f64, f64) {
        let scores = data.features().dot(&x);
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (score, &y) in scores.iter().zip(data.labels()) {
            loss += softplus(-(y as f64) * score);
            let pred = if *score >= 0.0 { 1 } else { -1 };
            correct += usize::from(pred == y);
        }
        let s = data.len() as f64;
        (loss / s + self.regularizer(x), correct as f64 / s)
    }
}

/// One-hidden-layer perceptron: sigmoid hidden layer, softmax output,
/// cross-entropy loss.
///
/// Parameter layout: `W1` (hidden x input, row-major), `c1`, `W2`
/// (classes x hidden, row-major), `c2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpModel {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for MlpModel {
    fn default() -> Self {
        Self { input: 784, hidden: 32, classes: 10 }
    }
}

struct MlpParams<'a> {
    w1: ndarray::ArrayView2<'a, f64>,
    c1: ArrayView1<'a, f64>,
    w2: ndarray::ArrayView2<'a, f64>,
    c2: ArrayView1<'a, f64>,
}

impl MlpModel {
    pub fn dim(&self) -> usize {
        self.hidden * self.input + self.hidden + self.classes * self.hidden + self.classes
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = self.hidden * self.input;
        let c1 = w1 + self.hidden;
        let w2 = c1 + self.classes * self.hidden;
        [w1, c1, w2, w2 + self.classes]
    }

    fn split<'a>(&self, x: ArrayView1<'a, f64>) -> MlpParams<'a> {
        let [o1, o2, o3, o4] = self.offsets();
        MlpParams {
            w1: x.slice_move(s![..o1]).into_shape_with_order((self.hidden, self.input)).expect("layout"),
            c1: x.slice_move(s![o1..o2]),
            w2: x.slice_move(s![o2..o3]).into_shape_with_order((self.classes, self.hidden)).expect("layout"),
            c2: x.slice_move(s![o3..o4]),
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init_params(&self, seed: u64) -> Array1<f64> {
        let mut rng = StreamKey::new(seed, Purpose::ModelInit).rng();
        let mut x = Array1::zeros(self.dim());
        let [o1, o2, o3, _] = self.offsets();
        let b1 = 1.0 / (self.input as f64).sqrt();
        let b2 = 1.0 / (self.hidden as f64).sqrt();
        for v in x.slice_mut(s![..o1]).iter_mut() {
            *v = rng.random_range(-b1..b1);
        }
        for v in x.slice_mut(s![o2..o3]).iter_mut() {
            *v = rng.random_range(-b2..b2);
        }
        x
    }

    fn forward(&self, p: &MlpParams<'_>, a: ArrayView1<'_, f64>) -> (Array1<f64>, Array1<f64>) {
        let hidden = (p.w1.dot(&a) + p.c1).mapv(sigmoid);
        let logits = p.w2.dot(&hidden) + p.c2;
        (hidden, softmax(logits.view()))
    }

    /// Class probabilities for one input.
    pub fn predict_proba(&self, x: ArrayView1<'_, f64>, a: ArrayView1<'_, f64>) -> Array1<f64> {
        self.forward(&self.split(x), a).1
    }

    fn loss_grad(&self, x: ArrayView1<'_, f64>, data: &Dataset, idx: &[usize]) -> (f64, Array1<f64>) {
        let p = self.split(x);
        let [o1, o2, o3, o4] = self.offsets();
        let mut grad = Array1::<f64>::zeros(self.dim());
        let mut loss = 0.0;
        let features = data.features();
        let labels = data.labels();
        for &i in idx {
            let a = features.row(i);
            let y = labels[i] as usize;
            let (h, prob) = self.forward(&p, a);
            loss -= prob[y].max(f64::MIN_POSITIVE).ln();
            let mut dz = prob;
            dz[y] -= 1.0;
            let dh = p.w2.t().dot(&dz);
            let du = Array1::from_iter(dh.iter().zip(h.iter()).map(|(g, hv)| g * hv * (1.0 - hv)));
            {
                let mut gw1 = grad
                    .slice_mut(s![..o1])
                    .into_shape_with_order((self.hidden, self.input))
                    .expect("layout");
                for (mut row, &u) in gw1.rows_mut().into_iter().zip(du.iter()) {
                    if u != 0.0 {
                        row.scaled_add(u, &a);
                    }
                }
            }
            grad.slice_mut(s![o1..o2]).scaled_add(1.0, &du);
            {
                let mut gw2 = grad
                    .slice_mut(s![o2..o3])
                    .into_shape_with_order((self.classes, self.hidden))
                    .expect("layout");
                for (mut row, &z) in gw2.rows_mut().into_iter().zip(dz.iter()) {
                    row.scaled_add(z, &h);
                }
            }
            grad.slice_mut(s![o3..o4]).scaled_add(1.0, &dz);
        }
        let inv = 1.0 / idx.len() as f64;
        grad *= inv;
        (loss * inv, grad)
    }

    fn evaluate(&self, x: ArrayView1<'_, f64>, data: &Dataset) -> (f64, f64) {
        let p = self.split(x);
        let hidden = (data.features().dot(&p.w1.t()) + p.c1.view()).mapv(sigmoid);
        let logits = hidden.dot(&p.w2.t()) + p.c2.view();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (row, &y) in logits.axis_iter(Axis(0)).zip(data.labels()) {
            let prob = softmax(row);
            loss -= prob[y as usize].max(f64::MIN_POSITIVE).ln();
            correct += usize::from(argmax(prob.view()) == y as usize);
        }
        let s = data.len() as f64;
        (loss / s, correct as f64 / s)
    }
}

/// Softmax shifted by the maximum logit.
pub fn softmax(z: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelOracle {
    LogisticNcvx(LogisticModel),
    Mlp1Hidden(MlpModel),
}

impl ModelOracle {
    pub fn logistic(dim: usize, rho: f64) -> Result<Self> {
        Ok(ModelOracle::LogisticNcvx(LogisticModel::new(dim, rho)?))
    }

    pub fn mlp(input: usize, hidden: usize, classes: usize) -> Self {
        ModelOracle::Mlp1Hidden(MlpModel { input, hidden, classes })
    }

    /// Parameter dimension.
    pub fn dim(&self) -> usize {
        match self {
            ModelOracle::LogisticNcvx(m) => m.dim,
            ModelOracle::Mlp1Hidden(m) => m.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelOracle::LogisticNcvx(_) => "logistic_ncvx",
            ModelOracle::Mlp1Hidden(_) => "mlp_1hidden",
        }
    }

    /// Checks that `data` has the feature width and label type this model expects.
    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        match (self, data.task()) {
            (ModelOracle::LogisticNcvx(m), Task::Binary) => {
                if data.dim() != m.dim {
                    return Err(ModelError::Dimension { expected: m.dim, found: data.dim() });
                }
            }
            (ModelOracle::Mlp1Hidden(m), Task::Multiclass { classes }) => {
                if data.dim() != m.input {
                    return Err(ModelError::Dimension { expected: m.input, found: data.dim() });
                }
                if classes > m.classes {
                    return Err(ModelError::Invalid(format!(
                        "dataset has {classes} classes, model has {}",
                        m.classes
                    )));
                }
            }
            (_, task) => return Err(ModelError::Task { model: self.name(), found: task }),
        }
        Ok(())
    }

    fn check_x(&self, x: ArrayView1<'_, f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(ModelError::Dimension { expected: self.dim(), found: x.len() });
        }
        Ok(())
    }

    /// Mean loss and mean gradient over `batch`.
    pub fn loss_grad(&self, x: ArrayView1<'_, f64>, data: &Dataset, batch: &Batch) -> Result<(f64, Array1<f64>)> {
        self.check_x(x)?;
        self.check_data(data)?;
        if batch.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if let Some(&index) = batch.indices().iter().find(|&&i| i >= data.len()) {
            return Err(ModelError::BatchIndex { index, len: data.len() });
        }
        Ok(match self {
            ModelOracle::LogisticNcvx(m) => m.loss_grad(x, data, batch.indices()),
            ModelOracle::Mlp1Hidden(m) => m.loss_grad(x, data, batch.indices()),
        })
    }

    /// Full-batch gradient over `data`.
    pub fn full_gradient(&self, x: ArrayView1<'_, f64>, data: &Dataset) -> Result<Array1<f64>> {
        Ok(self.loss_grad(x, data, &Batch::full(data.len()))?.1)
    }

    /// Mean loss and accuracy over `data`. Logistic predicts `sign(a^T x)` with
    /// zero counted as +1; the MLP predicts the lowest-index argmax.
    pub fn evaluate(&self, x: ArrayView1<'_, f64>, data: &Dataset) -> Result<(f64, f64)> {
        self.check_x(x)?;
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        self.check_data(data)?;
        Ok(match self {
            ModelOracle::LogisticNcvx(m) => m.evaluate(x, data),
            ModelOracle::Mlp1Hidden(m) => m.evaluate(x, data),
        })
    }

    /// Smoothness bound when one is known analytically.
    pub fn smoothness(&self, data: &Dataset) -> Option<f64> {
        match self {
            ModelOracle::LogisticNcvx(m) => Some(m.smoothness(data)),
            ModelOracle::Mlp1Hidden(_) => None,
        }
    }

    /// Starting point: zeros for logistic, seeded initialization for the MLP.
    pub fn initial_point(&self, seed: u64) -> Array1<f64> {
        match self {
            ModelOracle::LogisticNcvx(m) => Array1::zeros(m.dim),
            ModelOracle::Mlp1Hidden(m) => m.init_params(seed),
        }
    }
}

/// Below this many multiply-adds per network gradient, agents are evaluated
/// on the calling thread.
pub const PARALLEL_WORK: usize = 1 << 18;

/// Column `i` of the result is agent `i`'s mini-batch gradient at column `i` of `x`.
pub fn distributed_stochastic_gradient(
    oracle: &ModelOracle,
    x: &AgentMatrix,
    parts: &PartitionedDataset,
    batches: &[Batch],
) -> Result<AgentMatrix> {
    if x.n() != parts.n() || batches.len() != parts.n() {
        return Err(ModelError::Dimension { expected: parts.n(), found: x.n().min(batches.len()) });
    }
    let grad = |i: usize| oracle.loss_grad(x.agent(i), parts.part(i), &batches[i]).map(|(_, g)| g);
    let work: usize = batches.iter().map(Batch::len).sum::<usize>() * oracle.dim();
    let grads: Vec<Array1<f64>> = if work >= PARALLEL_WORK {
        (0..parts.n()).into_par_iter().map(grad).collect::<Result<_>>()?
    } else {
        (0..parts.n()).map(grad).collect::<Result<_>>()?
    };
    Ok(AgentMatrix::from_agents(grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_logistic;
    use ndarray::{array, Array2};

    fn toy_binary() -> Dataset {
        let features = array![[1.0, 2.0], [-1.0, 0.5], [0.0, -1.0], [2.0, 1.0]];
        Dataset::new(features, vec![1, -1, -1, 1], Task::Binary).unwrap()
    }

    #[test]
    fn logistic_origin() {
        let data = toy_binary();
        let oracle = ModelOracle::logistic(2, 0.01).unwrap();
        let (loss, grad) = oracle.loss_grad(array![0.0, 0.0].view(), &data, &Batch::new(vec![0])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad.to_vec(), vec![-0.5, -1.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(31.0) - (1.0 + 31f64.exp()).ln()).abs() < 1e-12);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn evaluate_tie_rule_and_separable() {
        let data = toy_binary();
        let oracle = ModelOracle::logistic(2, 0.0).unwrap();
        // x = 0: every score is zero, predicted +1, half the labels are +1.
        let (_, acc) = oracle.evaluate(array![0.0, 0.0].view(), &data).unwrap();
        assert_eq!(acc, 0.5);
        let (_, acc) = oracle.evaluate(array![1.0, 1.0].view(), &data).unwrap();
        assert_eq!(acc, 1.0);
        let empty = Dataset::new(Array2::zeros((0, 2)), vec![], Task::Binary).unwrap();
        assert!(matches!(oracle.evaluate(array![0.0, 0.0].view(), &empty), Err(ModelError::EmptyDataset)));
    }

    #[test]
    fn dimension_errors() {
        let data = toy_binary();
        let oracle = ModelOracle::logistic(3, 0.0).unwrap();
        assert!(oracle.loss_grad(array![0.0, 0.0, 0.0].view(), &data, &Batch::full(4)).is_err());
        let oracle = ModelOracle::logistic(2, 0.0).unwrap();
        assert!(oracle.loss_grad(array![0.0].view(), &data, &Batch::full(4)).is_err());
        assert!(matches!(
            oracle.loss_grad(array![0.0, 0.0].view(), &data, &Batch::new(vec![9])),
            Err(ModelError::BatchIndex { index: 9, .. })
        ));
    }

    #[test]
    fn mlp_dimension() {
        assert_eq!(MlpModel::default().dim(), 25450);
    }

    #[test]
    fn mlp_softmax_sums_to_one() {
        let m = MlpModel { input: 5, hidden: 4, classes: 3 };
        let x = m.init_params(9);
        let p = m.predict_proba(x.view(), array![1.0, -2.0, 0.5, 3.0, 0.0].view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
        let huge = softmax(array![1000.0, 0.0, -1000.0].view());
        assert!((huge.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_lowest_index() {
        assert_eq!(argmax(array![0.2, 0.4, 0.4].view()), 1);
    }

    #[test]
    fn minibatch_rules() {
        let key = StreamKey::new(1, Purpose::Auxiliary);
        assert_eq!(draw_minibatch(5, 5, key).indices(), &[0, 1, 2, 3, 4]);
        assert_eq!(draw_minibatch(4, 100_000, key).indices(), &[0, 1, 2, 3]);
        let a = draw_minibatch(1000, 256, key);
        let b = draw_minibatch(1000, 256, key);
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert!(a.indices().iter().all(|&i| i < 1000));
        let c = draw_minibatch(1000, 256, key.step(1));
        assert_ne!(a, c);
    }

    #[test]
    fn distributed_gradient_full_batch() {
        let parts = synth_logistic(3, 8, 4, 1.0, 2).unwrap();
        let oracle = ModelOracle::logistic(4, 0.01).unwrap();
        let x0 = array![0.1, -0.2, 0.3, 0.0];
        let x = AgentMatrix::replicate(x0.view(), 3);
        let batches = vec![Batch::full(8); 3];
        let g = distributed_stochastic_gradient(&oracle, &x, &parts, &batches).unwrap();
        for i in 0..3 {
            let gi = oracle.full_gradient(x0.view(), parts.part(i)).unwrap();
            assert_eq!(g.agent(i), gi.view());
        }
        let again = distributed_stochastic_gradient(&oracle, &x, &parts, &batches).unwrap();
        assert_eq!(g, again);
        assert!(distributed_stochastic_gradient(&oracle, &x, &parts, &batches[..2]).is_err());
    }
}
