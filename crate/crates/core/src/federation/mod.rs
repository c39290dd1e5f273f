//! Federated training simulator: partitioning, FedProx local training, FedAvg, round
//! orchestration and checkpointing.

pub mod aggregate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod partition;
pub mod runner;
pub mod train;

pub use aggregate::{fedavg_aggregate, ClientUpdate};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
pub use config::{client_seed, EvalCheckpoint, FederationConfig, Mode};
pub use data::{load_dataset, split_by_specimen, Sample, Splits};
pub use partition::{partition_dirichlet, ClientShard};
pub use runner::{
    assign_clients, make_clients, run_experiment, run_round, ClientData, HistoryRow, RunOptions,
    RunOutcome, RunReport, RunStatus,
};
pub use train::{
    add_proximal_grad, build_batch, evaluate, local_train, predict, proximal_penalty, LocalResult,
};
