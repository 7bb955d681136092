//! Round-synchronous federated simulation: edge training, fog clustering
//! and calibration, cloud aggregation, plus the FedAvg and FedProx
//! baselines and the latency overlay.

pub mod latency;
pub mod scenario;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    cluster_aggregate, cluster_weights, fedavg_aggregate, weighted_average, AggregationError,
    ClientUpdate, ClusterAssignment, ClusterModel,
};
use crate::calibration::{
    calibrate, decide, predict_batch_with_calibration, resource_index, CalibratedModel,
    CalibrationError, CalibrationState, Decision,
};
use crate::data::{self, ClientDataset, DataError, DataSource};
use crate::hardware::{
    fcm_fit, fcm_fit_from, normalize_profiles, normalized_triples, ClusterError, FuzzyPartition,
    HardwareProfile, NormProfile,
};
use crate::metrics::{classification_metrics, confusion, AttackMapping, ClassificationMetrics, MetricsError};
use crate::model::{argmax, local_train, prox_local_train, LabeledBatch, ModelError, ModelParams};
use crate::rng::{derive, stream};

pub use latency::{simulate_latency, LatencyInputs, RoundLatency};
pub use scenario::{
    build_scenario, clusters_for, preset, scaled_scenario, Archetype, ArchetypeShare, ClusterConfig,
    EarlyStop, LatencyModel, Method, Scenario, ScenarioError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0} is not a baseline method")]
    NotABaseline(Method),
    #[error("no cluster received any participant in round {0}")]
    NoActiveCluster(usize),
}

pub type Result<T> = std::result::Result<T, SimError>;

const STREAM_ASSIGN: u64 = 21;
const STREAM_JITTER: u64 = 22;
const STREAM_TRAIN: u64 = 23;
const STREAM_FCM: u64 = 24;

/// Datasets and devices shared by every round of a simulation.
#[derive(Debug, Clone)]
pub struct SimData {
    pub clients: Vec<ClientDataset>,
    pub test: LabeledBatch,
    /// All clients' training splits, for the global loss.
    pub pooled_train: LabeledBatch,
    pub archetypes: Vec<Archetype>,
    pub resampled: usize,
    pub dropped: usize,
    pub num_classes: usize,
    pub num_features: usize,
}

impl SimData {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(ClientDataset::size).collect()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.train.len()).collect()
    }
}

/// Generates or loads the dataset, splits off the global test set,
/// partitions the rest and assigns device archetypes to clients.
pub fn prepare_data(s: &Scenario) -> Result<SimData> {
    s.validate()?;
    let full = match &s.dataset.source {
        DataSource::Synthetic { .. } => data::generate_synthetic(&s.dataset, s.seed)?,
        DataSource::Csv {
            path,
            label_column,
            num_classes,
        } => data::load_csv(path, label_column, *num_classes)?.batch,
    };
    let (train, test) = data::train_test_split(&full, s.dataset.test_fraction, s.seed)?;
    let part = data::partition(
        &train,
        &s.dataset,
        s.num_clients,
        s.dataset.min_samples_for(s.train.batch_size),
        s.seed,
    )?;
    let trains: Vec<&LabeledBatch> = part.clients.iter().map(|c| &c.train).collect();
    let pooled_train = LabeledBatch::concat(&trains)?;
    let mut archetypes: Vec<Archetype> = s
        .archetype_counts()
        .into_iter()
        .flat_map(|(a, n)| std::iter::repeat_n(a, n))
        .collect();
    archetypes.shuffle(&mut stream(s.seed, &[STREAM_ASSIGN]));
    Ok(SimData {
        clients: part.clients,
        test,
        pooled_train,
        archetypes,
        resampled: part.resampled,
        dropped: part.dropped,
        num_classes: full.num_classes(),
        num_features: full.num_features(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster_id: usize,
    pub members: usize,
    pub weight: f64,
    pub confidence: f64,
    pub threshold: f64,
    pub fnr: f64,
    pub fpr: f64,
    pub resource_index: f64,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub method: Method,
    pub global_loss: f64,
    pub metrics: ClassificationMetrics,
    pub suspicious: u64,
    pub tau_global: f64,
    pub sync_latency_s: f64,
    pub clusters: Vec<ClusterReport>,
    /// Host time spent on this round; excluded from every CSV output.
    pub wall_clock_s: f64,
}

/// Mutable protocol state carried across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub round: usize,
    pub global: ModelParams,
    pub calibration: Vec<CalibrationState>,
    pub centroids: Option<Vec<NormProfile>>,
    pub tau_global: f64,
    pub partition: Option<FuzzyPartition>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub reports: Vec<RoundReport>,
    pub final_state: SimState,
    /// Round index at which the early-stop rule fired.
    pub converged_round: Option<usize>,
}

impl TrainingRun {
    pub fn final_model(&self) -> &ModelParams {
        &self.final_state.global
    }

    pub fn total_latency_s(&self) -> f64 {
        self.reports.iter().map(|r| r.sync_latency_s).sum()
    }
}

pub struct Simulation {
    pub scenario: Scenario,
    pub data: SimData,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self> {
        let data = prepare_data(&scenario)?;
        Ok(Self { scenario, data })
    }

    pub fn with_data(scenario: Scenario, data: SimData) -> Result<Self> {
        scenario.validate()?;
        Ok(Self { scenario, data })
    }

    pub fn attack_mapping(&self) -> AttackMapping {
        let mut m = AttackMapping::normal_is_zero(self.data.num_classes);
        m.suspicious_as_attack = self.scenario.calibration.suspicious_as_attack;
        m
    }

    pub fn initial_state(&self) -> SimState {
        SimState {
            round: 0,
            global: ModelParams::zeros(self.data.num_classes, self.data.num_features),
            calibration: (0..self.scenario.num_clusters)
                .map(|_| CalibrationState::new(&self.scenario.calibration))
                .collect(),
            centroids: None,
            tau_global: 1.0,
            partition: None,
        }
    }

    /// Device profiles for round `t` after multiplicative jitter, with
    /// normalized triples filled in.
    pub fn round_hardware(&self, t: usize) -> Result<Vec<HardwareProfile>> {
        let j = self.scenario.hardware_jitter;
        let raw: Vec<HardwareProfile> = self
            .data
            .archetypes
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let base = a.profile();
                if j == 0.0 {
                    return base;
                }
                let mut rng = stream(self.scenario.seed, &[STREAM_JITTER, t as u64, i as u64]);
                let f = [(); 3].map(|_| 1.0 + j * rng.random_range(-1.0..=1.0));
                base.scaled(f)
            })
            .collect();
        if raw.len() < 2 {
            return Ok(raw
                .into_iter()
                .map(|p| HardwareProfile {
                    normalized: Some([0.5; 3]),
                    ..p
                })
                .collect());
        }
        Ok(normalize_profiles(&raw)?)
    }

    pub fn cluster_round(&self, t: usize, profiles: &[NormProfile], previous: Option<&[NormProfile]>) -> Result<FuzzyPartition> {
        let c = &self.scenario.clustering;
        let k = self.scenario.num_clusters;
        Ok(match previous {
            Some(prev) if c.warm_start && prev.len() == k => {
                fcm_fit_from(profiles, prev.to_vec(), c.fuzzifier, &c.weights, c.max_iter, c.tol)?
            }
            _ => fcm_fit(
                profiles,
                k,
                c.fuzzifier,
                &c.weights,
                c.max_iter,
                c.tol,
                derive(self.scenario.seed, &[STREAM_FCM, t as u64]),
            )?,
        })
    }

    fn train_clients(&self, t: usize, global: &ModelParams, method: Method) -> Result<Vec<ModelParams>> {
        let cfg = &self.scenario.train;
        let seed = self.scenario.seed;
        self.data
            .clients
            .par_iter()
            .map(|c| {
                let s = derive(seed, &[STREAM_TRAIN, t as u64, c.client_id as u64]);
                match method {
                    Method::Fedavg => local_train(global, &c.train, cfg, s),
                    Method::Fedprox | Method::Cfhfc => prox_local_train(global, global, &c.train, cfg, s),
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(SimError::from)
    }

    /// Latency of round `t` under the given straggler settings.
    pub fn round_latency(
        &self,
        t: usize,
        method: Method,
        profiles: &[HardwareProfile],
        memberships: Option<&[Vec<f64>]>,
        straggler_fraction: f64,
        straggler_slowdown: f64,
    ) -> RoundLatency {
        let n = self.data.clients.len();
        let s = &self.scenario;
        let stragglers = latency::select_stragglers(n, straggler_fraction, s.seed, t);
        let partial = latency::partial_epochs(n, s.train.local_epochs, s.seed, t);
        let sizes = self.data.train_sizes();
        let inputs = LatencyInputs {
            profiles,
            train_sizes: &sizes,
            local_epochs: s.train.local_epochs,
            num_params: self.data.num_classes * (self.data.num_features + 1),
            stragglers: &stragglers,
            slowdown: straggler_slowdown,
            partial_epochs: &partial,
            memberships,
            participation_floor: s.clustering.participation_floor,
        };
        simulate_latency(method, &s.latency, &inputs)
    }

    /// Per-round latencies for `rounds` rounds without any training.
    /// Clustering follows the same warm-start chain as a full run.
    pub fn latency_trace(&self, method: Method, rounds: usize, fraction: f64, slowdown: f64) -> Result<Vec<RoundLatency>> {
        let mut centroids: Option<Vec<NormProfile>> = None;
        let mut out = Vec::with_capacity(rounds);
        for t in 0..rounds {
            let hw = self.round_hardware(t)?;
            let part = if method == Method::Cfhfc {
                let p = self.cluster_round(t, &normalized_triples(&hw)?, centroids.as_deref())?;
                centroids = Some(p.centroids.clone());
                Some(p)
            } else {
                None
            };
            out.push(self.round_latency(
                t,
                method,
                &hw,
                part.as_ref().map(|p| p.memberships.as_slice()),
                fraction,
                slowdown,
            ));
        }
        Ok(out)
    }

    pub fn run_round(&self, state: SimState) -> Result<(SimState, RoundReport)> {
        let started = Instant::now();
        let s = &self.scenario;
        let t = state.round;
        let method = s.method;
        let hw = self.round_hardware(t)?;
        let locals = self.train_clients(t, &state.global, method)?;
        let sizes = self.data.sizes();
        let mut next = state.clone();
        next.round = t + 1;
        let mut cluster_reports = Vec::new();

        let (global, tau_global, memberships) = match method {
            Method::Fedavg | Method::Fedprox => {
                let refs: Vec<&ModelParams> = locals.iter().collect();
                (fedavg_aggregate(&refs, &sizes)?, 1.0, None)
            }
            Method::Cfhfc => {
                let norm = normalized_triples(&hw)?;
                let part = self.cluster_round(t, &norm, state.centroids.as_deref())?;
                let mut models: Vec<CalibratedModel> = Vec::new();
                let mut clusters: Vec<ClusterModel> = Vec::new();
                for k in 0..s.num_clusters {
                    let a = ClusterAssignment::from_memberships(
                        k,
                        &part.memberships,
                        &sizes,
                        s.clustering.participation_floor,
                    );
                    let cal_state = &mut next.calibration[k];
                    if a.is_empty() {
                        cluster_reports.push(self.cluster_report(k, 0, cal_state, 1.0));
                        continue;
                    }
                    let updates: Vec<ClientUpdate> = a
                        .member_client_ids
                        .iter()
                        .zip(&a.memberships)
                        .map(|(&i, &mu)| ClientUpdate {
                            client_id: i,
                            params: &locals[i],
                            membership: mu,
                            data_size: sizes[i],
                        })
                        .collect();
                    let cm = cluster_aggregate(k, &state.global, &updates, s.train.proximal_coeff)?;
                    let calibrated = self.calibrate_cluster(&cm, &a, &norm, cal_state)?;
                    cluster_reports.push(self.cluster_report(k, a.member_client_ids.len(), cal_state, calibrated.threshold));
                    models.push(calibrated);
                    clusters.push(cm);
                }
                if clusters.is_empty() {
                    return Err(SimError::NoActiveCluster(t));
                }
                let pi = cluster_weights(&clusters)?;
                let mut pi_iter = pi.iter();
                for r in cluster_reports.iter_mut().filter(|r| r.members > 0) {
                    r.weight = *pi_iter.next().expect("one weight per active cluster");
                }
                let refs: Vec<&ModelParams> = clusters.iter().map(|c| &c.params).collect();
                let global = weighted_average(&refs, &pi)?;
                let tau = pi.iter().zip(&models).map(|(p, m)| p * m.threshold).sum::<f64>();
                next.centroids = Some(part.centroids.clone());
                let u = part.memberships.clone();
                next.partition = Some(part);
                (global, tau, Some(u))
            }
        };

        let lat = self.round_latency(
            t,
            method,
            &hw,
            memberships.as_deref(),
            s.straggler_fraction,
            s.straggler_slowdown,
        );
        for (r, l) in cluster_reports.iter_mut().zip(&lat.per_cluster_s) {
            r.latency_s = *l;
        }

        let decisions = self.global_decisions(&global, method, tau_global)?;
        let counts = confusion(&decisions, self.data.test.labels(), &self.attack_mapping())?;
        let metrics = classification_metrics(&counts)?;
        let global_loss = global.loss(&self.data.pooled_train)?;
        next.global = global;
        next.tau_global = tau_global;

        let report = RoundReport {
            round: t,
            method,
            global_loss,
            metrics,
            suspicious: counts.suspicious(),
            tau_global,
            sync_latency_s: lat.sync_s,
            clusters: cluster_reports,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        Ok((next, report))
    }

    fn cluster_report(&self, k: usize, members: usize, st: &CalibrationState, threshold: f64) -> ClusterReport {
        ClusterReport {
            cluster_id: k,
            members,
            weight: 0.0,
            confidence: st.confidence,
            threshold,
            fnr: st.recent_fnr,
            fpr: st.recent_fpr,
            resource_index: st.resource_index,
            latency_s: 0.0,
        }
    }

    /// Calibrates one cluster model on its members' pooled calibration
    /// data and records the resulting error rates for the next round.
    fn calibrate_cluster(
        &self,
        cm: &ClusterModel,
        a: &ClusterAssignment,
        norm: &[NormProfile],
        st: &mut CalibrationState,
    ) -> Result<CalibratedModel> {
        let cfg = &self.scenario.calibration;
        let uncalibrated = CalibratedModel {
            params: cm.params.clone(),
            threshold: 1.0,
            confidence: st.confidence,
        };
        if !cfg.enabled {
            return Ok(uncalibrated);
        }
        let parts: Vec<&LabeledBatch> = a
            .member_client_ids
            .iter()
            .map(|&i| &self.data.clients[i].calibration)
            .filter(|b| !b.is_empty())
            .collect();
        if parts.is_empty() {
            return Ok(uncalibrated);
        }
        let pooled = LabeledBatch::concat(&parts)?;
        let member_profiles: Vec<NormProfile> = a.member_client_ids.iter().map(|&i| norm[i]).collect();
        st.resource_index = resource_index(&member_profiles, &self.scenario.clustering.weights);
        let (calibrated, mut updated) = calibrate(cm, &pooled, st)?;
        let decisions = predict_batch_with_calibration(&calibrated, pooled.features())?;
        let m = classification_metrics(&confusion(&decisions, pooled.labels(), &self.attack_mapping())?)?;
        updated.record_feedback(m.fnr, m.fpr);
        *st = updated;
        Ok(calibrated)
    }

    fn global_decisions(&self, global: &ModelParams, method: Method, tau: f64) -> Result<Vec<Decision>> {
        let probs = global.predict_proba(self.data.test.features())?;
        Ok(match method {
            Method::Cfhfc => probs.iter().map(|p| decide(p, tau)).collect(),
            _ => probs.iter().map(|p| Decision::label(argmax(p))).collect(),
        })
    }

    pub fn run(&self) -> Result<TrainingRun> {
        let mut state = self.initial_state();
        let mut reports: Vec<RoundReport> = Vec::new();
        let mut streak = 0;
        let mut converged_round = None;
        let es = &self.scenario.early_stop;
        for _ in 0..self.scenario.rounds {
            let (next, report) = self.run_round(state)?;
            state = next;
            if let Some(prev) = reports.last() {
                if (report.metrics.accuracy - prev.metrics.accuracy).abs() < es.tolerance {
                    streak += 1;
                } else {
                    streak = 0;
                }
            }
            let t = report.round;
            reports.push(report);
            if es.enabled && streak >= es.window {
                converged_round = Some(t);
                break;
            }
        }
        Ok(TrainingRun {
            reports,
            final_state: state,
            converged_round,
        })
    }
}

pub fn run_training(scenario: &Scenario) -> Result<TrainingRun> {
    Simulation::new(scenario.clone())?.run()
}

pub fn run_baseline(scenario: &Scenario) -> Result<TrainingRun> {
    if scenario.method == Method::Cfhfc {
        return Err(SimError::NotABaseline(scenario.method));
    }
    run_training(scenario)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StragglerRow {
    pub method: Method,
    pub num_clients: usize,
    pub straggler_fraction: f64,
    pub total_time_s: f64,
    pub relative_training_time: f64,
    pub sme: f64,
}

/// Total training time over `base.rounds` rounds for every combination
/// of client count, straggler fraction and method, relative to the same
/// method without stragglers. Each client count uses
/// [`scaled_scenario`] sizing with the rest of `base` kept.
pub fn straggler_metrics(
    base: &Scenario,
    client_counts: &[usize],
    fractions: &[f64],
    methods: &[Method],
) -> Result<Vec<StragglerRow>> {
    let mut rows = Vec::new();
    for &n in client_counts {
        let sim = Simulation::new(resize(base, n))?;
        for &method in methods {
            let total = |f: f64| -> Result<f64> {
                Ok(sim
                    .latency_trace(method, base.rounds, f, base.straggler_slowdown)?
                    .iter()
                    .map(|l| l.sync_s)
                    .sum())
            };
            let t0 = total(0.0)?;
            for &f in fractions {
                let tf = if f == 0.0 { t0 } else { total(f)? };
                rows.push(StragglerRow {
                    method,
                    num_clients: n,
                    straggler_fraction: f,
                    total_time_s: tf,
                    relative_training_time: 100.0 * tf / t0,
                    sme: t0 / tf,
                });
            }
        }
    }
    Ok(rows)
}

/// `base` with the client count, cluster count and synthetic data volume
/// of [`scaled_scenario`]. A scenario already at `num_clients` is
/// returned unchanged.
pub fn resize(base: &Scenario, num_clients: usize) -> Scenario {
    if num_clients == base.num_clients {
        return base.clone();
    }
    let sized = scaled_scenario(num_clients);
    let mut s = base.clone();
    s.num_clients = num_clients;
    s.num_clusters = sized.num_clusters;
    if let (DataSource::Synthetic { samples_per_class, .. }, DataSource::Synthetic { samples_per_class: target, .. }) =
        (&mut s.dataset.source, &sized.dataset.source)
    {
        *samples_per_class = *target;
    }
    s
}
