//! The `d x n` per-agent matrices (`X`, `Y`, `G`) of the protocol.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, Axis, Zip};

use crate::graphs::MixingMatrix;

/// A `d x n` matrix whose column `i` belongs to agent `i`.
///
/// Storage is agent-major (`n x d`, one contiguous row per agent) so each
/// agent's vector can be handed to a model as a slice. Mixing `X W` is computed
/// as `W^T` applied to the stored rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentMatrix(Array2<f64>);

impl AgentMatrix {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self(Array2::zeros((n, d)))
    }

    /// Every agent holds a copy of `x`.
    pub fn replicate(x: ArrayView1<'_, f64>, n: usize) -> Self {
        let d = x.len();
        Self(Array2::from_shape_fn((n, d), |(_, j)| x[j]))
    }

    pub fn from_agents(rows: Vec<Array1<f64>>) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut out = Array2::zeros((n, d));
        for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
            dst.assign(&src);
        }
        Self(out)
    }

    /// Wraps an `n x d` agent-major array.
    pub fn from_agent_major(data: Array2<f64>) -> Self {
        Self(data)
    }

    pub fn agent_major(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    pub fn agent(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn agent_mut(&mut self, i: usize) -> ArrayViewMut1<'_, f64> {
        self.0.row_mut(i)
    }

    /// Average over agents (`x-bar`).
    pub fn mean(&self) -> Array1<f64> {
        self.0.mean_axis(Axis(0)).expect("at least one agent")
    }

    /// `||X - X J||_F^2`.
    pub fn deviation_sq(&self) -> f64 {
        let mean = self.mean();
        self.0.rows().into_iter().map(|r| (&r - &mean).mapv(|v| v * v).sum()).sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &AgentMatrix) -> f64 {
        Zip::from(&self.0).and(&other.0).fold(0.0, |acc, a, b| f64::max(acc, (a - b).abs()))
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &AgentMatrix) -> AgentMatrix {
        let mut out = self.0.clone();
        out.scaled_add(alpha, &other.0);
        Self(out)
    }

    pub fn scaled_add_assign(&mut self, alpha: f64, other: &AgentMatrix) {
        self.0.scaled_add(alpha, &other.0);
    }

    pub fn scale(&self, alpha: f64) -> AgentMatrix {
        Self(&self.0 * alpha)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Right-multiplication by a communication matrix.
    pub fn mix(&self, comm: CommMatrix<'_>) -> AgentMatrix {
        match comm {
            CommMatrix::Gossip(w) => Self(w.weights().t().dot(&self.0)),
            CommMatrix::Server => AgentMatrix::replicate(self.mean().view(), self.n()),
        }
    }
}

/// The matrix `W^k` applied at a communication step.
#[derive(Debug, Clone, Copy)]
pub enum CommMatrix<'a> {
    /// Neighbor averaging with the graph's mixing matrix.
    Gossip(&'a MixingMatrix),
    /// Exact averaging `J` through the server.
    Server,
}

impl CommMatrix<'_> {
    pub fn kind(&self) -> CommKind {
        match self {
            CommMatrix::Gossip(_) => CommKind::Gossip,
            CommMatrix::Server => CommKind::Server,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommKind {
    Gossip,
    Server,
}

impl CommKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CommKind::Gossip => "gossip",
            CommKind::Server => "server",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_topology, metropolis_weights, TopologyKind};
    use ndarray::array;

    #[test]
    fn mix_matches_dense_product() {
        let g = build_topology(TopologyKind::Path, 3, None, 0).unwrap();
        let w = metropolis_weights(&g);
        let x = AgentMatrix::from_agents(vec![array![1.0, 0.0], array![0.0, 2.0], array![3.0, -1.0]]);
        let mixed = x.mix(CommMatrix::Gossip(&w));
        // Column j of X W is sum_i X[:, i] w_ij.
        for j in 0..3 {
            for k in 0..2 {
                let expect: f64 = (0..3).map(|i| x.agent(i)[k] * w.weights()[[i, j]]).sum();
                assert!((mixed.agent(j)[k] - expect).abs() < 1e-15);
            }
        }
        let avg = x.mix(CommMatrix::Server);
        assert_eq!(avg.deviation_sq(), 0.0);
        assert_eq!(avg.mean(), x.mean());
    }

    #[test]
    fn deviation_of_replicated_is_zero() {
        let x = AgentMatrix::replicate(array![1.0, 2.0, 3.0].view(), 4);
        assert_eq!(x.deviation_sq(), 0.0);
        assert_eq!(x.n(), 4);
        assert_eq!(x.d(), 3);
    }
}
