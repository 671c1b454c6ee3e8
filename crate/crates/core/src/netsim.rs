//! Client network heterogeneity and packetised uploads.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub sufficient: bool,
    /// Per-packet drop probability, in `[0, 1)`.
    pub loss_ratio: f64,
    pub upload_speed_mbps: Option<f64>,
}

impl NetworkProfile {
    pub fn sufficient() -> Self {
        NetworkProfile {
            sufficient: true,
            loss_ratio: 0.0,
            upload_speed_mbps: None,
        }
    }

    pub fn insufficient(loss_ratio: f64) -> Self {
        NetworkProfile {
            sufficient: false,
            loss_ratio,
            upload_speed_mbps: None,
        }
    }

    /// Loss that survives to the server: zero once retransmission repairs it.
    pub fn effective_loss(&self) -> f64 {
        if self.sufficient {
            0.0
        } else {
            self.loss_ratio
        }
    }
}

fn check_loss(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("loss ratio {r} outside [0, 1)")))
    }
}

/// Number of insufficient clients for an eligible ratio: `floor((1 - e) * n)`.
///
/// A small epsilon keeps e.g. `(1 - 0.9) * 100 = 9.999999999999998` at 10.
pub fn insufficient_count(num_clients: usize, eligible_ratio: f64) -> usize {
    (((1.0 - eligible_ratio) * num_clients as f64) + 1e-9).floor() as usize
}

/// Mark `floor((1 - eligible_ratio) * n)` uniformly chosen clients insufficient.
///
/// The choice is a prefix of one random permutation, so with the same stream a
/// lower eligible ratio marks a superset of the clients a higher ratio marks.
pub fn assign_profiles<R: Rng + ?Sized>(
    num_clients: usize,
    eligible_ratio: f64,
    loss_ratio: f64,
    rng: &mut R,
) -> Result<Vec<NetworkProfile>> {
    if !(eligible_ratio > 0.0 && eligible_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "eligible ratio {eligible_ratio} outside (0, 1]"
        )));
    }
    check_loss(loss_ratio)?;
    let mut order: Vec<usize> = (0..num_clients).collect();
    order.shuffle(rng);
    let mut profiles = vec![NetworkProfile::sufficient(); num_clients];
    for &k in &order[..insufficient_count(num_clients, eligible_ratio)] {
        profiles[k] = NetworkProfile::insufficient(loss_ratio);
    }
    Ok(profiles)
}

/// Attach upload speeds: sufficient clients in `[t, 10t)`, insufficient in `[t/4, t)`.
pub fn assign_speeds<R: Rng + ?Sized>(profiles: &mut [NetworkProfile], threshold_mbps: f64, rng: &mut R) {
    for p in profiles {
        let speed = if p.sufficient {
            rng.random_range(threshold_mbps..10.0 * threshold_mbps)
        } else {
            rng.random_range(0.25 * threshold_mbps..threshold_mbps)
        };
        p.upload_speed_mbps = Some(speed);
    }
}

/// The one-bit self report a client sends before selection: 1 = sufficient.
pub fn sufficiency_report(profile: &NetworkProfile) -> u8 {
    u8::from(profile.sufficient)
}

/// Server-side grouping of collected reports, by client id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SufficiencyGroups {
    pub sufficient: Vec<usize>,
    pub insufficient: Vec<usize>,
}

pub fn categorize(reports: &[u8]) -> SufficiencyGroups {
    let mut groups = SufficiencyGroups::default();
    for (k, &bit) in reports.iter().enumerate() {
        if bit == 1 {
            groups.sufficient.push(k);
        } else {
            groups.insufficient.push(k);
        }
    }
    groups
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransmitResult {
    /// Uploaded parameters with lost entries set to zero.
    pub received: ParamVector,
    /// One flag per parameter, `true` = arrived.
    pub drop_mask: Vec<bool>,
    pub packets_total: usize,
    /// Packets lost on the first attempt (before any retransmission).
    pub packets_dropped: usize,
    pub retransmissions: usize,
}

impl TransmitResult {
    /// Fraction of parameters that did not arrive.
    pub fn realized_drop_fraction(&self) -> f64 {
        if self.drop_mask.is_empty() {
            return 0.0;
        }
        self.drop_mask.iter().filter(|&&ok| !ok).count() as f64 / self.drop_mask.len() as f64
    }
}

pub fn packet_count(dim: usize, packet_size: usize) -> usize {
    dim.div_ceil(packet_size)
}

/// Split `params` into contiguous packets and drop each with the profile's loss ratio.
///
/// Sufficient clients retransmit every dropped packet, so the server sees the
/// full vector; insufficient clients' lost packets are zero-filled.
pub fn transmit<R: Rng + ?Sized>(
    params: &ParamVector,
    profile: &NetworkProfile,
    packet_size: usize,
    rng: &mut R,
) -> Result<TransmitResult> {
    if packet_size == 0 {
        return Err(Error::InvalidArgument("packet_size must be >= 1".into()));
    }
    check_loss(profile.loss_ratio)?;
    let r = profile.loss_ratio;
    let dropped: Vec<bool> = (0..packet_count(params.dim(), packet_size))
        .map(|_| rng.random::<f64>() < r)
        .collect();
    transmit_with_drops(params, profile, packet_size, &dropped)
}

/// [`transmit`] with the per-packet drop pattern given explicitly.
pub fn transmit_with_drops(
    params: &ParamVector,
    profile: &NetworkProfile,
    packet_size: usize,
    dropped: &[bool],
) -> Result<TransmitResult> {
    if packet_size == 0 {
        return Err(Error::InvalidArgument("packet_size must be >= 1".into()));
    }
    let packets_total = packet_count(params.dim(), packet_size);
    if dropped.len() != packets_total {
        return Err(Error::DimensionMismatch {
            expected: packets_total,
            got: dropped.len(),
        });
    }
    let packets_dropped = dropped.iter().filter(|&&d| d).count();
    if profile.sufficient {
        return Ok(TransmitResult {
            received: params.clone(),
            drop_mask: vec![true; params.dim()],
            packets_total,
            packets_dropped,
            retransmissions: packets_dropped,
        });
    }
    let mut received = params.clone();
    let mut drop_mask = vec![true; params.dim()];
    for (i, _) in dropped.iter().enumerate().filter(|(_, &d)| d) {
        let range = i * packet_size..((i + 1) * packet_size).min(params.dim());
        received.as_mut_slice()[range.clone()].fill(0.0);
        drop_mask[range].fill(false);
    }
    Ok(TransmitResult {
        received,
        drop_mask,
        packets_total,
        packets_dropped,
        retransmissions: 0,
    })
}

/// Simulated upload time of one round: the slowest selected client.
///
/// Each client needs `payload * 8 / speed` seconds per attempt, times
/// `1 + ceil(r / (1 - r))` when it retransmits. Clients retransmit when
/// sufficient, or when insufficient under threshold handling; insufficient
/// clients under loss tolerance (`tolerate_loss`) never do. Returns `None`
/// when any selected profile lacks a speed or the selection is empty.
pub fn round_time<'a>(
    selected: impl IntoIterator<Item = &'a NetworkProfile>,
    payload_bytes: u64,
    tolerate_loss: bool,
) -> Result<Option<f64>> {
    if payload_bytes == 0 {
        return Err(Error::InvalidArgument("payload_bytes must be > 0".into()));
    }
    let mut worst: Option<f64> = None;
    for p in selected {
        let Some(speed) = p.upload_speed_mbps else {
            return Ok(None);
        };
        let r = p.loss_ratio;
        let retransmits = if !p.sufficient && tolerate_loss {
            0.0
        } else {
            (r / (1.0 - r)).ceil()
        };
        let t = payload_bytes as f64 * 8.0 / (speed * 1e6) * (1.0 + retransmits);
        worst = Some(worst.map_or(t, |w: f64| w.max(t)));
    }
    Ok(worst)
}
