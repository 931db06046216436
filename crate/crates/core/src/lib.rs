//! Semi-decentralized nonconvex optimization with gradient tracking, local
//! updates and probabilistic agent-to-server communication.
//!
//! * [`graphs`]: topologies, mixing matrices and mixing rates.
//! * [`dataio`]: LIBSVM / IDX readers, synthetic workloads, partitioning.
//! * [`models`]: logistic (nonconvex penalty) and one-hidden-layer MLP oracles.
//! * [`engine`]: the protocol (staged and compact forms), the DSGT baseline,
//!   step-size planning and metrics.
//! * [`harness`]: TOML experiment specs, sweeps, CSV output and plots.

pub mod agents;
pub mod dataio;
pub mod engine;
pub mod graphs;
pub mod harness;
pub mod models;
pub mod rng;

pub use agents::{AgentMatrix, CommKind, CommMatrix};
pub use dataio::{Dataset, PartitionedDataset, Task};
pub use engine::{Algorithm, MetricsRow, NetworkState, RunConfig, Simulator, StepSizePlan};
pub use graphs::{Graph, MixingMatrix, TopologyKind};
pub use harness::{ExperimentSpec, HarnessError, RunRecord};
pub use models::ModelOracle;
