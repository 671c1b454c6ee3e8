//! Simulator for loss-tolerant cross-device federated learning.
//!
//! Clients with poor uplinks are either excluded by a network threshold or
//! admitted with lossy, zero-filled uploads that the server compensates for.
//! Besides the aggregation rules for FedAvg, q-FedAvg and pFedMe (each with a
//! loss-tolerant variant), the crate holds the local model, a synthetic non-iid
//! data generator, the packet loss model and the round loop. Fairness
//! reporting and network-trace analysis sit on top.

pub mod aggregation;
pub mod datagen;
pub mod error;
pub mod model;
pub mod netsim;
pub mod orchestrator;
pub mod params;
pub mod presets;
pub mod report;
pub mod rng;
pub mod trace;

pub use aggregation::{ClientUpdate, CompensationForm, CompensationMode, PfedmeHyper};
pub use datagen::SyntheticConfig;
pub use error::{Error, Result};
pub use model::{ClientDataset, ModelKind, ModelSpec, TrainHyper};
pub use netsim::{NetworkProfile, TransmitResult};
pub use orchestrator::{ExperimentConfig, MatrixConfig, SelectionPolicy, Variant};
pub use params::{Matrix, ParamVector};
pub use report::{FairnessStats, RoundRecord};
