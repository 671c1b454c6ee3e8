//! Server-side aggregation: FedAvg, loss-compensated averaging, q-FedAvg and
//! the pFedMe local/server steps, each with an optional loss-tolerant variant.
//!
//! Every reduction visits updates in ascending `client_id` order, so results
//! are bit-identical regardless of how the caller ordered the list.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ClientDataset, ModelSpec};
use crate::params::ParamVector;

/// One client's upload as seen by the server.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Possibly zero-filled where packets were lost.
    pub params: ParamVector,
    pub n_samples: usize,
    /// Training loss at the round-start global model.
    pub local_loss: f64,
    pub sufficient: bool,
    pub nominal_r: f64,
    pub realized_drop_fraction: f64,
}

impl ClientUpdate {
    /// A lossless upload from a sufficient client.
    pub fn lossless(client_id: usize, params: ParamVector, n_samples: usize, local_loss: f64) -> Self {
        ClientUpdate {
            client_id,
            params,
            n_samples,
            local_loss,
            sufficient: true,
            nominal_r: 0.0,
            realized_drop_fraction: 0.0,
        }
    }
}

/// Which loss ratio the server divides by when compensating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompensationMode {
    /// The client's configured drop probability.
    #[default]
    Nominal,
    /// The fraction of this upload that was actually lost.
    Realized,
}

/// Normalisation of the compensated mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompensationForm {
    /// `(1/(n+m)) [sum W_i + (1/(1-r)) sum Ŵ_j]`, unbiased for identically distributed clients.
    #[default]
    Corrected,
    /// `(1/n) sum W_i + (1/(m(1-r))) sum Ŵ_j`; each group is averaged separately.
    AsPrinted,
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    let dim = first.params.dim();
    for u in updates {
        u.params.check_dim(dim)?;
    }
    let mut refs: Vec<&ClientUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    Ok(refs)
}

fn mean<'a>(vectors: impl IntoIterator<Item = &'a ParamVector>) -> Option<ParamVector> {
    let mut iter = vectors.into_iter();
    let first = iter.next()?;
    let mut sum = ParamVector::zeros(first.dim());
    sum.axpy(1.0, first);
    let mut count = 1usize;
    for v in iter {
        sum.axpy(1.0, v);
        count += 1;
    }
    sum.scale(1.0 / count as f64);
    Some(sum)
}

/// Unweighted elementwise mean of the uploaded parameters.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let refs = sorted(updates)?;
    Ok(mean(refs.iter().map(|u| &u.params)).expect("non-empty"))
}

/// Undo the expected shrinkage of a zero-filled upload: scale by `1/(1-r)`.
///
/// Sufficient uploads pass through unchanged. Returns `None` when the upload
/// must be excluded (realized mode with nothing received).
pub fn tra_compensate(update: &ClientUpdate, mode: CompensationMode) -> Option<ParamVector> {
    if update.sufficient {
        return Some(update.params.clone());
    }
    let r = match mode {
        CompensationMode::Nominal => update.nominal_r,
        CompensationMode::Realized => update.realized_drop_fraction,
    };
    if r >= 1.0 {
        return None;
    }
    Some(update.params.scaled(1.0 / (1.0 - r)))
}

fn compensated(refs: &[&ClientUpdate], mode: CompensationMode) -> Vec<(bool, ParamVector)> {
    refs.iter()
        .filter_map(|u| tra_compensate(u, mode).map(|p| (u.sufficient, p)))
        .collect()
}

/// Loss-compensated mean over sufficient (`W_i`) and zero-filled (`Ŵ_j`) uploads.
pub fn tra_fedavg_aggregate(
    updates: &[ClientUpdate],
    mode: CompensationMode,
    form: CompensationForm,
) -> Result<ParamVector> {
    let refs = sorted(updates)?;
    let comp = compensated(&refs, mode);
    let none_left = || Error::Degenerate("every upload was lost entirely".into());
    match form {
        CompensationForm::Corrected => mean(comp.iter().map(|(_, p)| p)).ok_or_else(none_left),
        CompensationForm::AsPrinted => {
            let good = mean(comp.iter().filter(|(s, _)| *s).map(|(_, p)| p));
            let lossy = mean(comp.iter().filter(|(s, _)| !*s).map(|(_, p)| p));
            match (good, lossy) {
                (Some(mut a), Some(b)) => {
                    a.axpy(1.0, &b);
                    Ok(a)
                }
                (Some(a), None) | (None, Some(a)) => Ok(a),
                (None, None) => Err(none_left()),
            }
        }
    }
}

/// One q-FedAvg server update.
///
/// `Δw_k = L (w - w̄_k)`, `Δ_k = F_k^q Δw_k`,
/// `h_k = q F_k^(q-1) |Δw_k|^2 + L F_k^q`, `w' = w - sum Δ_k / sum h_k`.
pub fn qffl_step(global: &ParamVector, updates: &[ClientUpdate], q: f64, lipschitz: f64) -> Result<ParamVector> {
    let refs = sorted(updates)?;
    global.check_dim(refs[0].params.dim())?;
    qffl_reduce(global, refs.iter().map(|u| (&u.params, u.local_loss)), q, lipschitz)
}

fn qffl_reduce<'a>(
    global: &ParamVector,
    models: impl Iterator<Item = (&'a ParamVector, f64)>,
    q: f64,
    lipschitz: f64,
) -> Result<ParamVector> {
    if !(q >= 0.0 && q.is_finite()) {
        return Err(Error::InvalidArgument(format!("q = {q} must be finite and >= 0")));
    }
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::InvalidArgument(format!("L = {lipschitz} must be positive")));
    }
    let mut delta_sum = ParamVector::zeros(global.dim());
    let mut h_sum = 0.0;
    for (params, loss) in models {
        let mut dw = global.sub(params);
        dw.scale(lipschitz);
        let fq = loss.powf(q);
        let curvature = if q == 0.0 {
            0.0
        } else {
            q * loss.powf(q - 1.0) * dw.norm_sq()
        };
        h_sum += curvature + lipschitz * fq;
        delta_sum.axpy(fq, &dw);
    }
    if h_sum == 0.0 {
        return Err(Error::Degenerate(
            "q-FedAvg normaliser is zero (all losses zero)".into(),
        ));
    }
    if !h_sum.is_finite() {
        return Err(Error::Divergence(format!("q-FedAvg normaliser is {h_sum}")));
    }
    let mut next = global.clone();
    next.axpy(-1.0 / h_sum, &delta_sum);
    Ok(next)
}

/// q-FedAvg over loss-compensated uploads.
pub fn tra_qffl_step(
    global: &ParamVector,
    updates: &[ClientUpdate],
    q: f64,
    lipschitz: f64,
    mode: CompensationMode,
) -> Result<ParamVector> {
    let refs = sorted(updates)?;
    global.check_dim(refs[0].params.dim())?;
    let comp: Vec<(ParamVector, f64)> = refs
        .iter()
        .filter_map(|u| tra_compensate(u, mode).map(|p| (p, u.local_loss)))
        .collect();
    if comp.is_empty() {
        return Err(Error::Degenerate("every upload was lost entirely".into()));
    }
    qffl_reduce(global, comp.iter().map(|(p, f)| (p, *f)), q, lipschitz)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfedmeHyper {
    /// Moreau-envelope regularisation strength.
    pub lambda: f64,
    /// Gradient steps used to approximate the personalised model.
    pub inner_steps: usize,
    pub local_rounds: usize,
    /// Step size of the inner (personalised) solve.
    pub personal_lr: f64,
    /// Step size of the local-model update.
    pub local_lr: f64,
    pub batch_size: usize,
    /// Server mixing weight in `(0, 2]`.
    pub beta: f64,
}

impl Default for PfedmeHyper {
    fn default() -> Self {
        PfedmeHyper {
            lambda: 15.0,
            inner_steps: 5,
            local_rounds: 20,
            personal_lr: 0.09,
            local_lr: 0.005,
            batch_size: 20,
            beta: 1.0,
        }
    }
}

impl PfedmeHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("pfedme: {m}")));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if self.inner_steps < 1 {
            return bad("inner_steps (K) must be >= 1");
        }
        if self.local_rounds < 1 {
            return bad("local_rounds must be >= 1");
        }
        // written negated so that NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.personal_lr > 0.0) || !(self.local_lr >= 0.0) {
            return bad("personal_lr must be positive and local_lr non-negative");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.beta > 0.0 && self.beta <= 2.0) {
            return bad("beta must lie in (0, 2]");
        }
        Ok(())
    }
}

/// pFedMe client work for one round, starting from the global model.
///
/// Each local round draws a mini-batch, takes `K` steps on
/// `f(θ) + λ/2 |θ - w|^2` (θ carries over between local rounds), then moves
/// the local model `w ← w - local_lr·λ·(w - θ)`. Returns `(w, θ)`.
pub fn pfedme_local<R: Rng + ?Sized>(
    spec: &ModelSpec,
    global: &ParamVector,
    data: &ClientDataset,
    hyper: &PfedmeHyper,
    rng: &mut R,
) -> Result<(ParamVector, ParamVector)> {
    hyper.validate()?;
    global.check_dim(spec.dim())?;
    let mut local = global.clone();
    let mut personal = global.clone();
    let mut order: Vec<usize> = (0..data.n_train()).collect();
    let mut cursor = order.len();
    let batch = hyper.batch_size.min(order.len());
    for _ in 0..hyper.local_rounds {
        if cursor + batch > order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        for _ in 0..hyper.inner_steps {
            let (_, grad) = model::loss_and_grad(spec, &personal, &data.train_x, &data.train_y, idx);
            let pull = personal.sub(&local);
            personal.axpy(-hyper.personal_lr, &grad);
            personal.axpy(-hyper.personal_lr * hyper.lambda, &pull);
        }
        let gap = local.sub(&personal);
        local.axpy(-hyper.local_lr * hyper.lambda, &gap);
        if !personal.is_finite() || !local.is_finite() {
            return Err(Error::Divergence(
                "pFedMe local models non-finite (personal_lr * lambda too large?)".into(),
            ));
        }
    }
    Ok((local, personal))
}

/// `w' = (1 - β) w + β mean(w_i)`; with `tra` set, lossy uploads are compensated first.
pub fn pfedme_server_step(
    global: &ParamVector,
    updates: &[ClientUpdate],
    beta: f64,
    tra: Option<CompensationMode>,
) -> Result<ParamVector> {
    if !(beta > 0.0 && beta <= 2.0) {
        return Err(Error::InvalidArgument(format!("beta = {beta} outside (0, 2]")));
    }
    let avg = match tra {
        Some(mode) => tra_fedavg_aggregate(updates, mode, CompensationForm::Corrected)?,
        None => fedavg_aggregate(updates)?,
    };
    global.check_dim(avg.dim())?;
    let mut next = global.scaled(1.0 - beta);
    next.axpy(beta, &avg);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Matrix;
    use crate::rng::{stream, Domain};

    fn up(id: usize, v: &[f64]) -> ClientUpdate {
        ClientUpdate::lossless(id, ParamVector::from_vec(v.to_vec()), 10, 1.0)
    }

    fn lossy(id: usize, v: &[f64], r: f64) -> ClientUpdate {
        ClientUpdate {
            sufficient: false,
            nominal_r: r,
            ..up(id, v)
        }
    }

    #[test]
    fn fedavg_means() {
        assert_eq!(
            fedavg_aggregate(&[up(0, &[1., 1.]), up(1, &[3., 3.])])
                .unwrap()
                .as_slice(),
            &[2., 2.]
        );
        assert_eq!(fedavg_aggregate(&[up(0, &[1.5, -2.])]).unwrap().as_slice(), &[1.5, -2.]);
        let four = [up(0, &[1., 0.]), up(1, &[0., 1.]), up(2, &[1., 1.]), up(3, &[0., 0.])];
        assert_eq!(fedavg_aggregate(&four).unwrap().as_slice(), &[0.5, 0.5]);
        assert!(matches!(fedavg_aggregate(&[]), Err(Error::Empty(_))));
        assert!(fedavg_aggregate(&[up(0, &[1.]), up(1, &[1., 2.])]).is_err());
    }

    #[test]
    fn compensation_branches() {
        let s = up(0, &[0.5, 0.0]);
        assert_eq!(tra_compensate(&s, CompensationMode::Nominal).unwrap(), s.params);
        let l = lossy(1, &[0.5, 0.0], 0.5);
        assert_eq!(
            tra_compensate(&l, CompensationMode::Nominal).unwrap().as_slice(),
            &[1.0, 0.0]
        );
        let l0 = lossy(1, &[0.5, 0.25], 0.0);
        assert_eq!(tra_compensate(&l0, CompensationMode::Nominal).unwrap(), l0.params);
        let gone = ClientUpdate {
            realized_drop_fraction: 1.0,
            ..lossy(2, &[0.0, 0.0], 0.3)
        };
        assert!(tra_compensate(&gone, CompensationMode::Realized).is_none());
        let part = ClientUpdate {
            realized_drop_fraction: 0.5,
            ..lossy(2, &[1.0, 0.0], 0.3)
        };
        assert_eq!(
            tra_compensate(&part, CompensationMode::Realized).unwrap().as_slice(),
            &[2.0, 0.0]
        );
    }

    #[test]
    fn compensated_mean_hand_value() {
        let ups = [up(0, &[1., 1.]), lossy(1, &[0.5, 0.], 0.5)];
        let agg = tra_fedavg_aggregate(&ups, CompensationMode::Nominal, CompensationForm::Corrected).unwrap();
        assert_eq!(agg.as_slice(), &[1.0, 0.5]);
        // the printed normalisation averages each group separately and adds them
        let agg = tra_fedavg_aggregate(&ups, CompensationMode::Nominal, CompensationForm::AsPrinted).unwrap();
        assert_eq!(agg.as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn compensated_mean_without_lossy_is_fedavg() {
        let ups = [up(3, &[1., 2.]), up(1, &[-1., 0.5]), up(2, &[0.25, 4.])];
        let plain = fedavg_aggregate(&ups).unwrap();
        for form in [CompensationForm::Corrected, CompensationForm::AsPrinted] {
            assert_eq!(
                tra_fedavg_aggregate(&ups, CompensationMode::Nominal, form).unwrap(),
                plain
            );
        }
    }

    #[test]
    fn all_lost_is_degenerate() {
        let gone = ClientUpdate {
            realized_drop_fraction: 1.0,
            ..lossy(0, &[0.0], 0.3)
        };
        let res = tra_fedavg_aggregate(&[gone], CompensationMode::Realized, CompensationForm::Corrected);
        assert!(matches!(res, Err(Error::Degenerate(_))));
    }

    #[test]
    fn qffl_hand_value() {
        let g = ParamVector::from_vec(vec![0.0]);
        let next = qffl_step(&g, &[up(0, &[1.0])], 1.0, 10.0).unwrap();
        // Δw = -10, Δ = -10, h = 1*1*100 + 10 = 110
        assert!((next[0] - 10.0 / 110.0).abs() < 1e-15);
    }

    #[test]
    fn qffl_q0_is_mean() {
        let g = ParamVector::from_vec(vec![0.3, -0.2]);
        let ups = [
            ClientUpdate {
                local_loss: 0.7,
                ..up(0, &[1.0, 2.0])
            },
            ClientUpdate {
                local_loss: 2.5,
                ..up(1, &[-3.0, 0.5])
            },
        ];
        let next = qffl_step(&g, &ups, 0.0, 10.0).unwrap();
        let avg = fedavg_aggregate(&ups).unwrap();
        for (a, b) in next.iter().zip(avg.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn qffl_identical_clients_match_single() {
        let g = ParamVector::from_vec(vec![0.5, 1.0]);
        let one = ClientUpdate {
            local_loss: 1.7,
            ..up(0, &[1.0, -1.0])
        };
        let two = ClientUpdate {
            client_id: 1,
            ..one.clone()
        };
        let a = qffl_step(&g, std::slice::from_ref(&one), 1.0, 10.0).unwrap();
        let b = qffl_step(&g, &[one, two], 1.0, 10.0).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn qffl_zero_losses_degenerate() {
        let g = ParamVector::from_vec(vec![0.0]);
        let ups = [ClientUpdate {
            local_loss: 0.0,
            ..up(0, &[0.0])
        }];
        assert!(matches!(qffl_step(&g, &ups, 1.0, 10.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tra_qffl_reductions() {
        let g = ParamVector::from_vec(vec![0.1, 0.2]);
        let sufficient = [
            ClientUpdate {
                local_loss: 1.2,
                ..up(0, &[1.0, 2.0])
            },
            ClientUpdate {
                local_loss: 0.4,
                ..up(1, &[0.0, -1.0])
            },
        ];
        let plain = qffl_step(&g, &sufficient, 1.0, 10.0).unwrap();
        assert_eq!(
            tra_qffl_step(&g, &sufficient, 1.0, 10.0, CompensationMode::Nominal).unwrap(),
            plain
        );

        let zero_r = [
            sufficient[0].clone(),
            ClientUpdate {
                sufficient: false,
                ..sufficient[1].clone()
            },
        ];
        assert_eq!(
            tra_qffl_step(&g, &zero_r, 1.0, 10.0, CompensationMode::Nominal).unwrap(),
            plain
        );

        let mixed = [
            sufficient[0].clone(),
            lossy(1, &[0.0, -0.7], 0.3),
            lossy(2, &[2.0, 0.0], 0.5),
        ];
        let via_q = tra_qffl_step(&g, &mixed, 0.0, 10.0, CompensationMode::Nominal).unwrap();
        let via_mean = tra_fedavg_aggregate(&mixed, CompensationMode::Nominal, CompensationForm::Corrected).unwrap();
        for (a, b) in via_q.iter().zip(via_mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pfedme_server_rules() {
        let g = ParamVector::from_vec(vec![0.0, 0.0]);
        let ups = [up(0, &[2.0, 0.0]), up(1, &[0.0, 2.0])];
        assert_eq!(pfedme_server_step(&g, &ups, 0.5, None).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(
            pfedme_server_step(&g, &ups, 1.0, None).unwrap(),
            fedavg_aggregate(&ups).unwrap()
        );
        assert!(pfedme_server_step(&g, &ups, 0.0, None).is_err());
        assert!(pfedme_server_step(&g, &[], 1.0, None).is_err());
        let l = [up(0, &[2.0, 0.0]), lossy(1, &[0.0, 1.0], 0.5)];
        assert_eq!(
            pfedme_server_step(&g, &l, 1.0, Some(CompensationMode::Nominal))
                .unwrap()
                .as_slice(),
            &[1.0, 1.0]
        );
    }

    fn tiny_data() -> (ModelSpec, ClientDataset) {
        let x = Matrix::from_rows(&[
            vec![1.0, 0.5],
            vec![-1.0, 0.2],
            vec![0.3, -1.5],
            vec![1.2, 1.0],
            vec![-0.4, -0.9],
        ])
        .unwrap();
        let y = vec![0, 1, 2, 0, 1];
        (
            ModelSpec::logistic(2, 3),
            ClientDataset::new(x.clone(), y.clone(), x, y, 3).unwrap(),
        )
    }

    #[test]
    fn pfedme_local_preconditions() {
        let (spec, data) = tiny_data();
        let g = ParamVector::zeros(spec.dim());
        let hyper = PfedmeHyper {
            inner_steps: 0,
            ..Default::default()
        };
        assert!(pfedme_local(&spec, &g, &data, &hyper, &mut stream(0, Domain::Training, 0, 0)).is_err());
        let hyper = PfedmeHyper {
            local_lr: 0.0,
            ..Default::default()
        };
        let (w, theta) = pfedme_local(&spec, &g, &data, &hyper, &mut stream(0, Domain::Training, 0, 0)).unwrap();
        assert_eq!(w, g);
        assert_ne!(theta, g);
    }

    #[test]
    fn pfedme_personal_gap_shrinks_with_lambda() {
        let (spec, data) = tiny_data();
        let g = ParamVector::zeros(spec.dim());
        let gaps: Vec<f64> = [1.0, 15.0, 100.0]
            .iter()
            .map(|&lambda| {
                let hyper = PfedmeHyper {
                    lambda,
                    personal_lr: 0.005,
                    local_lr: 0.01,
                    ..Default::default()
                };
                let (w, theta) =
                    pfedme_local(&spec, &g, &data, &hyper, &mut stream(0, Domain::Training, 0, 0)).unwrap();
                theta.distance(&w)
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }
}
