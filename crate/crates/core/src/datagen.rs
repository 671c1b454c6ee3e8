//! Synthetic(α, β) federated data with power-law client sizes.
//!
//! Per client `k`: `u_k ~ N(0, α)`, `W_k, b_k ~ N(u_k, 1)`, `B_k ~ N(0, β)`,
//! `v_k ~ N(B_k, 1)`, `x ~ N(v_k, diag(j^-1.2))` and `y = argmax(W_k x + b_k)`.
//! `α` and `β` are standard deviations. Heterogeneity draws are taken as
//! standard normals and then scaled, so with a fixed seed only the scale of
//! the client offsets changes with `α`/`β`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClientDataset;
use crate::params::Matrix;
use crate::rng::{self, Domain, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub alpha: f64,
    pub beta: f64,
    pub iid: bool,
    pub num_clients: usize,
    pub features: usize,
    pub classes: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub min_samples: usize,
    pub lognormal_mu: f64,
    pub lognormal_sigma: f64,
    /// Optional cap on a client's sample count; the lognormal tail is unbounded.
    pub max_samples: Option<usize>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            alpha: 0.0,
            beta: 0.0,
            iid: false,
            num_clients: 100,
            features: 60,
            classes: 10,
            seed: 0,
            train_fraction: 0.8,
            min_samples: 50,
            lognormal_mu: 4.0,
            lognormal_sigma: 2.0,
            max_samples: None,
        }
    }
}

impl SyntheticConfig {
    pub fn non_iid(alpha: f64, beta: f64, seed: u64) -> Self {
        SyntheticConfig {
            alpha,
            beta,
            seed,
            ..Default::default()
        }
    }

    pub fn iid(seed: u64) -> Self {
        SyntheticConfig {
            iid: true,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset: {m}")));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("alpha and beta must be finite and >= 0");
        }
        if self.num_clients < 1 {
            return bad("num_clients must be >= 1");
        }
        if self.features < 1 || self.classes < 2 {
            return bad("need features >= 1 and classes >= 2");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.min_samples < 2 {
            return bad("min_samples must be >= 2 so both splits are non-empty");
        }
        if !(self.lognormal_sigma >= 0.0 && self.lognormal_sigma.is_finite() && self.lognormal_mu.is_finite()) {
            return bad("lognormal parameters must be finite, sigma >= 0");
        }
        if matches!(self.max_samples, Some(m) if m < self.min_samples) {
            return bad("max_samples must be >= min_samples");
        }
        Ok(())
    }
}

/// The hidden per-client generator behind one client's data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientGenerator {
    /// `classes x features`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticFederation {
    pub clients: Vec<ClientDataset>,
    pub generators: Vec<ClientGenerator>,
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<ClientDataset>> {
    Ok(gen_synthetic_with_generators(cfg)?.clients)
}

pub fn gen_synthetic_with_generators(cfg: &SyntheticConfig) -> Result<SyntheticFederation> {
    cfg.validate()?;
    let (f, c) = (cfg.features, cfg.classes);
    let std_dev: Vec<f64> = (1..=f).map(|j| (j as f64).powf(-1.2).sqrt()).collect();
    let sizes =
        LogNormal::new(cfg.lognormal_mu, cfg.lognormal_sigma).map_err(|e| Error::Config(format!("dataset: {e}")))?;

    let shared = if cfg.iid {
        let mut rng = rng::stream(cfg.seed, Domain::Data, 1, 0);
        Some(ClientGenerator {
            weights: normals(&mut rng, c * f, 0.0),
            bias: normals(&mut rng, c, 0.0),
            mean: vec![0.0; f],
        })
    } else {
        None
    };

    let mut clients = Vec::with_capacity(cfg.num_clients);
    let mut generators = Vec::with_capacity(cfg.num_clients);
    for k in 0..cfg.num_clients {
        let mut rng = rng::stream(cfg.seed, Domain::Data, 0, k as u64);
        let extra = sizes.sample(&mut rng).round();
        let mut n = cfg
            .min_samples
            .saturating_add(if extra.is_finite() { extra as usize } else { usize::MAX });
        if let Some(cap) = cfg.max_samples {
            n = n.min(cap);
        }

        let model_shift: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.alpha;
        let data_shift: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.beta;
        let gen = match &shared {
            Some(g) => g.clone(),
            None => ClientGenerator {
                weights: normals(&mut rng, c * f, model_shift),
                bias: normals(&mut rng, c, model_shift),
                mean: normals(&mut rng, f, data_shift),
            },
        };

        let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
        let mut train_x = Matrix::empty(f);
        let mut test_x = Matrix::empty(f);
        let mut train_y = Vec::with_capacity(n_train);
        let mut test_y = Vec::with_capacity(n - n_train);
        let mut x = vec![0.0; f];
        let mut logits = vec![0.0; c];
        for i in 0..n {
            for j in 0..f {
                let z: f64 = rng.sample(StandardNormal);
                x[j] = gen.mean[j] + std_dev[j] * z;
            }
            for (cls, z) in logits.iter_mut().enumerate() {
                *z = gen.bias[cls]
                    + gen.weights[cls * f..(cls + 1) * f]
                        .iter()
                        .zip(&x)
                        .map(|(w, xi)| w * xi)
                        .sum::<f64>();
            }
            let label = first_argmax(&logits);
            if i < n_train {
                train_x.push_row(&x);
                train_y.push(label);
            } else {
                test_x.push_row(&x);
                test_y.push(label);
            }
        }
        clients.push(ClientDataset::new(train_x, train_y, test_x, test_y, c)?);
        generators.push(gen);
    }
    Ok(SyntheticFederation { clients, generators })
}

fn normals(rng: &mut StreamRng, n: usize, mean: f64) -> Vec<f64> {
    (0..n).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect()
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Concatenate every client's test partition, in client order.
pub fn pooled_test_set(datasets: &[ClientDataset]) -> Result<(Matrix, Vec<usize>)> {
    let first = datasets.first().ok_or(Error::Empty("client dataset list"))?;
    let mut x = Matrix::empty(first.test_x.cols());
    let mut y = Vec::with_capacity(datasets.iter().map(ClientDataset::n_test).sum());
    for d in datasets {
        x.extend(&d.test_x)?;
        y.extend_from_slice(&d.test_y);
    }
    Ok((x, y))
}

/// Write a federation as two CSVs.
///
/// `features`: `client_id,split,x0,..,x{F-1}`; `labels`: `client_id,split,label`.
/// `split` is `train` or `test`; rows appear in client order, train before test.
pub fn export_csv(datasets: &[ClientDataset], features: &Path, labels: &Path) -> Result<()> {
    let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
    let mut fx = open(features)?;
    let mut fy = open(labels)?;
    let cols = datasets.first().map_or(0, |d| d.train_x.cols());
    let header: Vec<String> = (0..cols).map(|j| format!("x{j}")).collect();
    let w = |r: std::io::Result<()>, p: &Path| r.map_err(|e| Error::io(p, e));
    w(writeln!(fx, "client_id,split,{}", header.join(",")), features)?;
    w(writeln!(fy, "client_id,split,label"), labels)?;
    for (k, d) in datasets.iter().enumerate() {
        for (split, xs, ys) in [("train", &d.train_x, &d.train_y), ("test", &d.test_x, &d.test_y)] {
            for (i, label) in ys.iter().enumerate() {
                let row: Vec<String> = xs.row(i).iter().map(|v| format!("{v:e}")).collect();
                w(writeln!(fx, "{k},{split},{}", row.join(",")), features)?;
                w(writeln!(fy, "{k},{split},{label}"), labels)?;
            }
        }
    }
    w(fx.flush(), features)?;
    w(fy.flush(), labels)
}
