//! Analytical round-latency model.
//!
//! A client's round time is its local compute plus one model download and
//! one upload plus a fixed overhead:
//!
//! ```text
//! T_i = s_i * (E * n_i * work / cpu'_i + 2 * bytes / bandwidth_i + overhead)
//! ```
//!
//! `cpu'_i` is the client's clock rescaled from the nominal device range
//! onto `[cpu_floor, 1]`, and `s_i` is the straggler slowdown (1 for
//! everyone else). Synchronous baselines wait for the slowest client.
//! Under FedProx a straggler submits after a random number of epochs
//! (the usual partial-work allowance), so its slowdown is partly absorbed.
//!
//! The clustered protocol waits per cluster for the slowest member
//! weighted by membership, using timings predicted from each member's
//! advertised profile. A member that overruns that prediction (a
//! straggler, whose slowdown is invisible to the profile) is cut off and
//! uploads its partial model. It costs the larger of the cluster's
//! predicted time and its own first epoch, plus its slowed exchange, but
//! never more than finishing normally would have. The cloud then waits
//! for the slowest cluster plus one overhead.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{LatencyModel, Method};
use crate::hardware::HardwareProfile;
use crate::rng::stream;

/// Nominal CPU range of the supported device classes, in GHz.
pub const NOMINAL_CPU_GHZ: (f64, f64) = (1.2, 1.8);

const STREAM_STRAGGLERS: u64 = 31;
const STREAM_PARTIAL_EPOCHS: u64 = 32;

/// Relative CPU speed in `[cpu_floor, 1]`.
pub fn relative_cpu(cpu_ghz: f64, model: &LatencyModel) -> f64 {
    let (lo, hi) = NOMINAL_CPU_GHZ;
    let t = ((cpu_ghz - lo) / (hi - lo)).clamp(0.0, 1.0);
    model.cpu_floor + (1.0 - model.cpu_floor) * t
}

pub fn compute_time(profile: &HardwareProfile, n_train: usize, epochs: usize, model: &LatencyModel) -> f64 {
    epochs as f64 * n_train as f64 * model.work_units_per_sample / relative_cpu(profile.cpu_ghz, model)
}

/// Two transfers of the full parameter vector.
pub fn communication_time(profile: &HardwareProfile, num_params: usize, model: &LatencyModel) -> f64 {
    let bytes = num_params as f64 * model.bytes_per_param;
    let bytes_per_s = profile.bandwidth_mbps * 1e6 / 8.0;
    2.0 * bytes / bytes_per_s
}

pub fn client_time(
    profile: &HardwareProfile,
    n_train: usize,
    epochs: usize,
    num_params: usize,
    slowdown: f64,
    model: &LatencyModel,
) -> f64 {
    slowdown
        * (compute_time(profile, n_train, epochs, model)
            + communication_time(profile, num_params, model)
            + model.overhead_s)
}

/// Everything the latency model needs about one round.
#[derive(Debug, Clone, Copy)]
pub struct LatencyInputs<'a> {
    pub profiles: &'a [HardwareProfile],
    pub train_sizes: &'a [usize],
    pub local_epochs: usize,
    pub num_params: usize,
    pub stragglers: &'a [bool],
    pub slowdown: f64,
    /// Epochs each client completes under FedProx.
    pub partial_epochs: &'a [usize],
    pub memberships: Option<&'a [Vec<f64>]>,
    pub participation_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLatency {
    pub sync_s: f64,
    /// Empty for the baselines.
    pub per_cluster_s: Vec<f64>,
}

impl RoundLatency {
    pub fn mean_cluster_s(&self) -> f64 {
        if self.per_cluster_s.is_empty() {
            self.sync_s
        } else {
            self.per_cluster_s.iter().sum::<f64>() / self.per_cluster_s.len() as f64
        }
    }
}

/// Round-synchronization latency for one method.
pub fn simulate_latency(method: Method, model: &LatencyModel, inp: &LatencyInputs<'_>) -> RoundLatency {
    let slow = |i: usize| if inp.stragglers[i] { inp.slowdown } else { 1.0 };
    let time = |i: usize, epochs: usize, s: f64| {
        client_time(&inp.profiles[i], inp.train_sizes[i], epochs, inp.num_params, s, model)
    };
    let n = inp.profiles.len();
    match (method, inp.memberships) {
        (Method::Fedavg, _) | (Method::Cfhfc, None) => RoundLatency {
            sync_s: (0..n).map(|i| time(i, inp.local_epochs, slow(i))).fold(0.0, f64::max),
            per_cluster_s: Vec::new(),
        },
        (Method::Fedprox, _) => RoundLatency {
            sync_s: (0..n)
                .map(|i| {
                    let e = if inp.stragglers[i] { inp.partial_epochs[i] } else { inp.local_epochs };
                    time(i, e, slow(i))
                })
                .fold(0.0, f64::max),
            per_cluster_s: Vec::new(),
        },
        (Method::Cfhfc, Some(u)) => {
            let k = u.first().map_or(0, Vec::len);
            let per_cluster: Vec<f64> = (0..k)
                .map(|c| {
                    let members: Vec<usize> = (0..n)
                        .filter(|&i| u[i][c] >= inp.participation_floor && u[i][c] > 0.0)
                        .collect();
                    let expected = members
                        .iter()
                        .map(|&i| u[i][c] * time(i, inp.local_epochs, 1.0))
                        .fold(0.0, f64::max);
                    members
                        .iter()
                        .map(|&i| {
                            let full = u[i][c] * time(i, inp.local_epochs, slow(i));
                            if full <= expected {
                                return full;
                            }
                            let p = &inp.profiles[i];
                            let one_epoch = slow(i) * compute_time(p, inp.train_sizes[i], 1, model);
                            let exchange = slow(i) * (communication_time(p, inp.num_params, model) + model.overhead_s);
                            full.min(expected.max(u[i][c] * one_epoch) + u[i][c] * exchange)
                        })
                        .fold(0.0, f64::max)
                })
                .collect();
            RoundLatency {
                sync_s: per_cluster.iter().cloned().fold(0.0, f64::max) + model.overhead_s,
                per_cluster_s: per_cluster,
            }
        }
    }
}

/// `round(fraction * n)` distinct stragglers for the given round.
pub fn select_stragglers(n: usize, fraction: f64, seed: u64, round: usize) -> Vec<bool> {
    let count = ((fraction * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[STREAM_STRAGGLERS, round as u64]));
    let mut out = vec![false; n];
    for &i in &idx[..count] {
        out[i] = true;
    }
    out
}

/// Epoch counts in `1..=epochs`, one per client, for the given round.
pub fn partial_epochs(n: usize, epochs: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[STREAM_PARTIAL_EPOCHS, round as u64]);
    (0..n).map(|_| rng.random_range(1..=epochs.max(1))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::scenario::Archetype;

    fn inputs<'a>(
        profiles: &'a [HardwareProfile],
        sizes: &'a [usize],
        stragglers: &'a [bool],
        partial: &'a [usize],
        u: Option<&'a [Vec<f64>]>,
    ) -> LatencyInputs<'a> {
        LatencyInputs {
            profiles,
            train_sizes: sizes,
            local_epochs: 20,
            num_params: 84,
            stragglers,
            slowdown: 3.0,
            partial_epochs: partial,
            memberships: u,
            participation_floor: 0.05,
        }
    }

    #[test]
    fn cpu_rescaling() {
        let m = LatencyModel::default();
        assert!((relative_cpu(1.2, &m) - 0.1).abs() < 1e-15);
        assert!((relative_cpu(1.8, &m) - 1.0).abs() < 1e-15);
        assert!((relative_cpu(1.5, &m) - 0.55).abs() < 1e-15);
        assert_eq!(relative_cpu(0.5, &m), 0.1);
    }

    #[test]
    fn communication_is_linear_in_model_bytes() {
        let p = Archetype::Pi4.profile();
        let m = LatencyModel::default();
        let m2 = LatencyModel {
            bytes_per_param: 8.0,
            ..m.clone()
        };
        let a = communication_time(&p, 84, &m);
        assert_eq!(communication_time(&p, 84, &m2), 2.0 * a);
        // 84 params * 4 bytes * 2 transfers at 50 Mbps
        assert!((a - 672.0 * 8.0 / 50e6).abs() < 1e-18);
    }

    #[test]
    fn identical_clients_single_cluster_match_fedavg() {
        let p = vec![Archetype::Pi4.profile(); 4];
        let sizes = [300; 4];
        let none = [false; 4];
        let e = [20; 4];
        let u = vec![vec![1.0]; 4];
        let m = LatencyModel::default();
        let avg = simulate_latency(Method::Fedavg, &m, &inputs(&p, &sizes, &none, &e, None));
        let cf = simulate_latency(Method::Cfhfc, &m, &inputs(&p, &sizes, &none, &e, Some(&u)));
        assert!((cf.sync_s - avg.sync_s - m.overhead_s).abs() < 1e-12);
    }

    #[test]
    fn slow_device_in_its_own_cluster() {
        let mut p = vec![Archetype::Pi400.profile(); 4];
        p[0] = Archetype::Pi3.profile();
        let sizes = [300; 5];
        let none = [false; 5];
        let e = [20; 5];
        let u = vec![vec![0.9, 0.1], vec![0.02, 0.98], vec![0.02, 0.98], vec![0.02, 0.98]];
        let m = LatencyModel::default();
        let avg = simulate_latency(Method::Fedavg, &m, &inputs(&p, &sizes[..4], &none[..4], &e[..4], None));
        let cf = simulate_latency(Method::Cfhfc, &m, &inputs(&p, &sizes[..4], &none[..4], &e[..4], Some(&u)));
        assert!(cf.mean_cluster_s() < avg.sync_s);
        assert!(cf.sync_s <= avg.sync_s + m.overhead_s);
        let expected_slow = 0.9 * client_time(&p[0], 300, 20, 84, 1.0, &m);
        assert!((cf.per_cluster_s[0] - expected_slow).abs() < 1e-12);
    }

    #[test]
    fn unit_slowdown_changes_nothing() {
        let p = vec![Archetype::Pi3.profile(), Archetype::Pi400.profile()];
        let sizes = [100, 200];
        let all = [true, true];
        let none = [false, false];
        let e = [3, 7];
        let m = LatencyModel::default();
        for method in [Method::Fedavg, Method::Cfhfc] {
            let mut a = inputs(&p, &sizes, &all, &e, None);
            a.slowdown = 1.0;
            let b = inputs(&p, &sizes, &none, &e, None);
            assert_eq!(simulate_latency(method, &m, &a), simulate_latency(method, &m, &b));
        }
    }

    #[test]
    fn straggler_cutoff_bounds_cluster_time() {
        let p = vec![Archetype::Pi4.profile(); 3];
        let sizes = [300; 3];
        let strag = [true, false, false];
        let e = [20; 3];
        let u = vec![vec![1.0]; 3];
        let m = LatencyModel::default();
        let cf = simulate_latency(Method::Cfhfc, &m, &inputs(&p, &sizes, &strag, &e, Some(&u)));
        let predicted = client_time(&p[0], 300, 20, 84, 1.0, &m);
        let exchange = 3.0 * (communication_time(&p[0], 84, &m) + m.overhead_s);
        assert!((cf.per_cluster_s[0] - predicted - exchange).abs() < 1e-12);
        let avg = simulate_latency(Method::Fedavg, &m, &inputs(&p, &sizes, &strag, &e, None));
        assert!((avg.sync_s - 3.0 * predicted).abs() < 1e-12);
    }

    #[test]
    fn straggler_selection_counts() {
        let s = select_stragglers(20, 0.3, 1, 0);
        assert_eq!(s.iter().filter(|&&b| b).count(), 6);
        assert_eq!(s, select_stragglers(20, 0.3, 1, 0));
        assert!(select_stragglers(20, 0.0, 1, 0).iter().all(|&b| !b));
        assert!(partial_epochs(50, 20, 3, 2).iter().all(|&e| (1..=20).contains(&e)));
    }
}
