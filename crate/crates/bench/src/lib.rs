//! Inputs shared by the benchmarks.

use ltfl_core::datagen::gen_synthetic;
use ltfl_core::netsim::transmit;
use ltfl_core::rng::{stream, Domain};
use ltfl_core::{ClientDataset, ClientUpdate, NetworkProfile, ParamVector, SyntheticConfig};

/// The largest client of a 20-client Synthetic(1,1) federation.
pub fn big_client() -> ClientDataset {
    let cfg = SyntheticConfig {
        num_clients: 20,
        max_samples: Some(2000),
        ..SyntheticConfig::non_iid(1.0, 1.0, 7)
    };
    gen_synthetic(&cfg)
        .expect("valid generator config")
        .into_iter()
        .max_by_key(|c| c.n_train())
        .expect("non-empty federation")
}

pub fn params(dim: usize, seed: u64) -> ParamVector {
    ParamVector::from_vec((0..dim).map(|i| ((i as u64 ^ seed) % 97) as f64 / 97.0 - 0.5).collect())
}

/// A round's uploads: `n` clients, every third one insufficient with loss `r`.
pub fn round_updates(n: usize, dim: usize, r: f64, packet_size: usize) -> Vec<ClientUpdate> {
    (0..n)
        .map(|k| {
            let p = params(dim, k as u64);
            if k % 3 == 2 {
                let sent = transmit(
                    &p,
                    &NetworkProfile::insufficient(r),
                    packet_size,
                    &mut stream(1, Domain::Network, 0, k as u64),
                )
                .expect("valid packet size");
                ClientUpdate {
                    client_id: k,
                    realized_drop_fraction: sent.realized_drop_fraction(),
                    params: sent.received,
                    n_samples: 100,
                    local_loss: 1.0 + k as f64 * 0.1,
                    sufficient: false,
                    nominal_r: r,
                }
            } else {
                ClientUpdate::lossless(k, p, 100, 1.0 + k as f64 * 0.1)
            }
        })
        .collect()
}
