use rayon::prelude::*;

use crate::aggregation::{
    fedavg_aggregate, pfedme_local, pfedme_server_step, qffl_step, tra_fedavg_aggregate, tra_qffl_step, ClientUpdate,
};
use crate::datagen::{gen_synthetic, pooled_test_set};
use crate::error::{Error, Result};
use crate::model::{evaluate, init_params, local_train, ClientDataset, ModelSpec};
use crate::netsim::{
    assign_profiles, assign_speeds, categorize, round_time, sufficiency_report, transmit, NetworkProfile,
    SufficiencyGroups,
};
use crate::params::{Matrix, ParamVector};
use crate::report::{fairness_stats, RoundRecord};
use crate::rng::{stream, Domain};

use super::config::{Algorithm, ExperimentConfig};
use super::{select_clients, SelectionPolicy};

/// Everything about the federation that stays fixed for a run.
#[derive(Clone, Debug)]
pub struct Population {
    pub spec: ModelSpec,
    pub clients: Vec<ClientDataset>,
    pub profiles: Vec<NetworkProfile>,
    pub pooled_x: Matrix,
    pub pooled_y: Vec<usize>,
}

impl Population {
    /// Generate the data and the network profiles for `cfg`.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let clients = gen_synthetic(&cfg.synthetic())?;
        let seed = cfg.population_seed();
        let mut profiles = assign_profiles(
            clients.len(),
            cfg.eligible_ratio,
            cfg.loss_ratio,
            &mut stream(seed, Domain::Profiles, 0, 0),
        )?;
        assign_speeds(
            &mut profiles,
            cfg.speed_threshold_mbps,
            &mut stream(seed, Domain::Speeds, 0, 0),
        );
        let (pooled_x, pooled_y) = pooled_test_set(&clients)?;
        Ok(Population {
            spec: cfg.model_spec(),
            clients,
            profiles,
            pooled_x,
            pooled_y,
        })
    }
}

/// Server-visible protocol steps, in the order they happened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProtocolEvent {
    ReportsCollected { count: usize },
    Categorized { sufficient: usize, insufficient: usize },
    Selected { round: usize, clients: Vec<usize> },
    Aggregated { round: usize, uploads: usize },
}

#[derive(Clone, Debug)]
pub struct ServerState {
    /// Global model `w^t`.
    pub global: ParamVector,
    /// Rounds completed so far.
    pub round: usize,
    pub groups: SufficiencyGroups,
    /// Latest personalised model per client (pFedMe only).
    pub personalized: Vec<Option<ParamVector>>,
    pub events: Vec<ProtocolEvent>,
}

impl ServerState {
    /// Collect every client's one-bit sufficiency report and group them.
    pub fn new(pop: &Population, cfg: &ExperimentConfig) -> Self {
        let reports: Vec<u8> = pop.profiles.iter().map(sufficiency_report).collect();
        let groups = categorize(&reports);
        let events = vec![
            ProtocolEvent::ReportsCollected { count: reports.len() },
            ProtocolEvent::Categorized {
                sufficient: groups.sufficient.len(),
                insufficient: groups.insufficient.len(),
            },
        ];
        ServerState {
            global: init_params(&pop.spec, cfg.seed),
            round: 0,
            groups,
            personalized: vec![None; pop.clients.len()],
            events,
        }
    }

    /// Profiles as the server knows them: sufficiency comes from the reports.
    fn reported_profiles(&self, pop: &Population) -> Vec<NetworkProfile> {
        let mut profiles = pop.profiles.clone();
        for p in &mut profiles {
            p.sufficient = false;
        }
        for &k in &self.groups.sufficient {
            profiles[k].sufficient = true;
        }
        profiles
    }
}

fn upload(
    cfg: &ExperimentConfig,
    pop: &Population,
    round: usize,
    client: usize,
    params: &ParamVector,
    local_loss: f64,
) -> Result<ClientUpdate> {
    let profile = &pop.profiles[client];
    let mut rng = stream(cfg.seed, Domain::Network, round as u64, client as u64);
    let sent = transmit(params, profile, cfg.packet_size, &mut rng)?;
    let realized_drop_fraction = sent.realized_drop_fraction();
    Ok(ClientUpdate {
        client_id: client,
        params: sent.received,
        n_samples: pop.clients[client].n_train(),
        local_loss,
        sufficient: profile.sufficient,
        nominal_r: profile.loss_ratio,
        realized_drop_fraction,
    })
}

/// Execute one round: select, train locally, upload through the lossy
/// network, aggregate, evaluate.
pub fn run_round(
    mut state: ServerState,
    pop: &Population,
    cfg: &ExperimentConfig,
) -> Result<(ServerState, RoundRecord)> {
    let round = state.round + 1;
    step(&mut state, pop, cfg, round).map_err(|e| Error::Round {
        round,
        source: Box::new(e),
    })?;
    state.round = round;
    let record = evaluate_round(&state, pop, cfg, round).map_err(|e| Error::Round {
        round,
        source: Box::new(e),
    })?;
    Ok((state, record))
}

fn select(state: &mut ServerState, pop: &Population, cfg: &ExperimentConfig, round: usize) -> Result<Vec<usize>> {
    let known = state.reported_profiles(pop);
    let mut rng = stream(cfg.seed, Domain::Selection, round as u64, 0);
    let chosen = select_clients(cfg.policy(), &known, cfg.clients_per_round, &mut rng)?;
    state.events.push(ProtocolEvent::Selected {
        round,
        clients: chosen.clone(),
    });
    Ok(chosen)
}

fn step(state: &mut ServerState, pop: &Population, cfg: &ExperimentConfig, round: usize) -> Result<()> {
    let global = &state.global;
    let mode = cfg.compensation;
    let (next, uploads) = match cfg.algorithm {
        Algorithm::FedAvg | Algorithm::QFedAvg => {
            let chosen = select(state, pop, cfg, round)?;
            let global = &state.global;
            let updates = chosen
                .par_iter()
                .map(|&k| {
                    let mut rng = stream(cfg.seed, Domain::Training, round as u64, k as u64);
                    let (w, loss) = local_train(&pop.spec, global, &pop.clients[k], &cfg.train, &mut rng)?;
                    upload(cfg, pop, round, k, &w, loss)
                })
                .collect::<Result<Vec<_>>>()?;
            let next = match (cfg.algorithm, cfg.tra) {
                (Algorithm::FedAvg, false) => fedavg_aggregate(&updates)?,
                (Algorithm::FedAvg, true) => tra_fedavg_aggregate(&updates, mode, cfg.compensation_form)?,
                (_, false) => qffl_step(global, &updates, cfg.qffl.q, cfg.lipschitz())?,
                (_, true) => tra_qffl_step(global, &updates, cfg.qffl.q, cfg.lipschitz(), mode)?,
            };
            (next, updates.len())
        }
        Algorithm::PFedMe => {
            // every client trains; only the selected ones upload
            let locals = (0..pop.clients.len())
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream(cfg.seed, Domain::Training, round as u64, k as u64);
                    pfedme_local(&pop.spec, global, &pop.clients[k], &cfg.pfedme, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let chosen = select(state, pop, cfg, round)?;
            let updates = chosen
                .par_iter()
                .map(|&k| upload(cfg, pop, round, k, &locals[k].0, 0.0))
                .collect::<Result<Vec<_>>>()?;
            let next = pfedme_server_step(&state.global, &updates, cfg.pfedme.beta, cfg.tra.then_some(mode))?;
            for (slot, (_, theta)) in state.personalized.iter_mut().zip(locals) {
                *slot = Some(theta);
            }
            (next, updates.len())
        }
    };
    if !next.is_finite() {
        return Err(Error::Divergence("global model became non-finite".into()));
    }
    state.global = next;
    state.events.push(ProtocolEvent::Aggregated { round, uploads });
    Ok(())
}

fn evaluate_round(state: &ServerState, pop: &Population, cfg: &ExperimentConfig, round: usize) -> Result<RoundRecord> {
    let spec = &pop.spec;
    let sample = evaluate(spec, &state.global, &pop.pooled_x, &pop.pooled_y)?;
    let per_client = pop
        .clients
        .par_iter()
        .map(|d| evaluate(spec, &state.global, &d.test_x, &d.test_y).map(|e| 100.0 * e.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    let fairness = fairness_stats(&per_client)?;

    let personalized = if cfg.algorithm == Algorithm::PFedMe && round > 0 {
        let (correct, total) = pop
            .clients
            .par_iter()
            .zip(&state.personalized)
            .map(|(d, theta)| {
                let theta = theta.as_ref().unwrap_or(&state.global);
                evaluate(spec, theta, &d.test_x, &d.test_y).map(|e| (e.correct, e.total))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold((0, 0), |(c, t), (c2, t2)| (c + c2, t + t2));
        Some(100.0 * correct as f64 / total as f64)
    } else {
        None
    };

    let sim_time = match state.events.last() {
        Some(ProtocolEvent::Aggregated { round: r, .. }) if *r == round => {
            let selected = state.events.iter().rev().find_map(|e| match e {
                ProtocolEvent::Selected { round: r, clients } if *r == round => Some(clients),
                _ => None,
            });
            match selected {
                Some(ids) => round_time(
                    ids.iter().map(|&k| &pop.profiles[k]),
                    4 * spec.dim() as u64,
                    cfg.policy() == SelectionPolicy::TraFull,
                )?,
                None => None,
            }
        }
        _ => None,
    };

    Ok(RoundRecord {
        round,
        sample_accuracy: 100.0 * sample.accuracy,
        per_client_accuracy: per_client,
        fairness,
        personalized_accuracy: personalized,
        global_accuracy_pfedme: (cfg.algorithm == Algorithm::PFedMe).then_some(100.0 * sample.accuracy),
        sim_time,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    /// Evaluation of the initial model (round 0).
    pub initial: RoundRecord,
    /// One record per completed round.
    pub records: Vec<RoundRecord>,
    pub state: ServerState,
}

impl ExperimentOutcome {
    pub fn final_params(&self) -> &ParamVector {
        &self.state.global
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let pop = Population::build(cfg)?;
    run_experiment_on(&pop, cfg)
}

/// Run `cfg.rounds` rounds on an already built population.
pub fn run_experiment_on(pop: &Population, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let mut state = ServerState::new(pop, cfg);
    let initial = evaluate_round(&state, pop, cfg, 0)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (next, record) = run_round(state, pop, cfg)?;
        log::debug!(
            "round {}: sample acc {:.2}%, client avg {:.2}%",
            record.round,
            record.sample_accuracy,
            record.fairness.average
        );
        state = next;
        records.push(record);
    }
    Ok(ExperimentOutcome {
        initial,
        records,
        state,
    })
}
