//! The round loop, client selection and the scenario runner.

mod config;
mod matrix;
mod round;

pub use config::{
    Algorithm, Cell, DatasetPreset, DatasetSpec, ExperimentConfig, GridAxes, MatrixConfig, ModelKindName, ModelSection,
    QfflHyper, Variant,
};
pub use matrix::{run_matrix, run_matrix_cells, MatrixOutcome};
pub use round::{
    run_experiment, run_experiment_on, run_round, ExperimentOutcome, Population, ProtocolEvent, ServerState,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::NetworkProfile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionPolicy {
    /// Only clients that report sufficient network capacity can be picked.
    ThresholdBiased,
    /// Every client can be picked regardless of its network.
    TraFull,
}

/// Client ids a policy may choose from, ascending.
pub fn selection_pool(policy: SelectionPolicy, profiles: &[NetworkProfile]) -> Vec<usize> {
    profiles
        .iter()
        .enumerate()
        .filter(|(_, p)| policy == SelectionPolicy::TraFull || p.sufficient)
        .map(|(k, _)| k)
        .collect()
}

/// Uniform sample without replacement of `min(k, pool)` ids, returned ascending.
pub fn select_clients<R: Rng + ?Sized>(
    policy: SelectionPolicy,
    profiles: &[NetworkProfile],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("must select at least one client".into()));
    }
    let pool = selection_pool(policy, profiles);
    if pool.is_empty() {
        return Err(Error::Degenerate(format!("{policy:?} selection pool is empty")));
    }
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, pool.len(), k.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}
