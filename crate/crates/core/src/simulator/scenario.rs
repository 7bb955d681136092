use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::DEFAULT_PARTICIPATION_FLOOR;
use crate::calibration::CalibrationConfig;
use crate::data::{DataSource, DatasetSpec};
use crate::hardware::{HardwareProfile, ResourceWeights};
use crate::model::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("unknown preset `{0}` (expected scenario1, scenario2 or scenario3)")]
    UnknownPreset(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl ScenarioError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Invalid { field, .. } => Some(field),
            Self::UnknownPreset(_) => Some("preset"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cfhfc,
    Fedavg,
    Fedprox,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cfhfc, Method::Fedavg, Method::Fedprox];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Cfhfc => "cfhfc",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cfhfc" => Ok(Method::Cfhfc),
            "fedavg" => Ok(Method::Fedavg),
            "fedprox" => Ok(Method::Fedprox),
            other => Err(format!("unknown method `{other}` (expected cfhfc, fedavg or fedprox)")),
        }
    }
}

/// Edge device classes used in the testbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Pi3,
    Pi4,
    Pi400,
}

impl Archetype {
    pub fn profile(&self) -> HardwareProfile {
        match self {
            Archetype::Pi3 => HardwareProfile::new(1.2, 1.0, 20.0),
            Archetype::Pi4 => HardwareProfile::new(1.5, 4.0, 50.0),
            Archetype::Pi400 => HardwareProfile::new(1.8, 8.0, 100.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchetypeShare {
    pub archetype: Archetype,
    pub fraction: f64,
}

pub fn equal_mix() -> Vec<ArchetypeShare> {
    [Archetype::Pi3, Archetype::Pi4, Archetype::Pi400]
        .into_iter()
        .map(|archetype| ArchetypeShare {
            archetype,
            fraction: 1.0 / 3.0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub fuzzifier: f64,
    pub weights: ResourceWeights,
    pub participation_floor: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Start each round's clustering from the previous round's centroids.
    pub warm_start: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            fuzzifier: 3.0,
            weights: ResourceWeights::default(),
            participation_floor: DEFAULT_PARTICIPATION_FLOOR,
            max_iter: 100,
            tol: 1e-6,
            warm_start: true,
        }
    }
}

/// Analytical round-time model. See [`super::latency`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    /// Seconds of compute per training sample per epoch on the fastest
    /// nominal CPU.
    pub work_units_per_sample: f64,
    pub bytes_per_param: f64,
    /// Fixed per-exchange overhead in seconds.
    pub overhead_s: f64,
    /// Smallest relative CPU speed, reached at the slowest nominal CPU.
    pub cpu_floor: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            work_units_per_sample: 1e-4,
            bytes_per_param: 4.0,
            overhead_s: 0.05,
            cpu_floor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    pub enabled: bool,
    pub window: usize,
    pub tolerance: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            enabled: true,
            window: 5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    pub num_clients: usize,
    pub num_clusters: usize,
    pub rounds: usize,
    pub archetype_mix: Vec<ArchetypeShare>,
    /// Half-width of the per-round multiplicative jitter on hardware fields.
    pub hardware_jitter: f64,
    pub straggler_fraction: f64,
    pub straggler_slowdown: f64,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub clustering: ClusterConfig,
    pub calibration: CalibrationConfig,
    pub latency: LatencyModel,
    pub early_stop: EarlyStop,
}

impl Default for Scenario {
    fn default() -> Self {
        preset("scenario1").expect("built-in preset")
    }
}

/// Samples per class grow with the client count so the mean client
/// holds the same amount of data in every preset.
pub const SAMPLES_PER_CLASS_PER_CLIENT: usize = 125;

/// Cluster count for an arbitrary client count, linear through the
/// preset points (20, 4), (50, 8), (80, 12) and extended with the same
/// slope outside them.
pub fn clusters_for(num_clients: usize) -> usize {
    let k = 4.0 + (num_clients as f64 - 20.0) * 4.0 / 30.0;
    (k.round() as usize).clamp(1, num_clients.max(1))
}

/// A scenario with `num_clients` clients and the matching cluster count
/// and data volume; everything else at defaults.
pub fn scaled_scenario(num_clients: usize) -> Scenario {
    let mut s = Scenario {
        name: format!("n{num_clients}"),
        num_clients,
        num_clusters: clusters_for(num_clients),
        ..base()
    };
    if let DataSource::Synthetic { samples_per_class, .. } = &mut s.dataset.source {
        *samples_per_class = SAMPLES_PER_CLASS_PER_CLIENT * num_clients;
    }
    s
}

fn base() -> Scenario {
    Scenario {
        name: String::new(),
        method: Method::Cfhfc,
        seed: 0,
        num_clients: 20,
        num_clusters: 4,
        rounds: 20,
        archetype_mix: equal_mix(),
        hardware_jitter: 0.1,
        straggler_fraction: 0.0,
        straggler_slowdown: 3.0,
        dataset: DatasetSpec::default(),
        train: TrainConfig::default(),
        clustering: ClusterConfig::default(),
        calibration: CalibrationConfig::default(),
        latency: LatencyModel::default(),
        early_stop: EarlyStop::default(),
    }
}

pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
    let n = match name {
        "scenario1" => 20,
        "scenario2" => 50,
        "scenario3" => 80,
        other => return Err(ScenarioError::UnknownPreset(other.to_string())),
    };
    let mut s = scaled_scenario(n);
    s.name = name.to_string();
    Ok(s)
}

/// Resolves a preset name, then validates.
pub fn build_scenario(preset_name: &str) -> Result<Scenario, ScenarioError> {
    let s = preset(preset_name)?;
    s.validate()?;
    Ok(s)
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.num_clients == 0 {
            return Err(ScenarioError::invalid("num_clients", "must be at least 1"));
        }
        if self.num_clusters == 0 {
            return Err(ScenarioError::invalid("num_clusters", "must be at least 1"));
        }
        if self.num_clusters > self.num_clients {
            return Err(ScenarioError::invalid(
                "num_clusters",
                format!(
                    "{} clusters exceed {} clients",
                    self.num_clusters, self.num_clients
                ),
            ));
        }
        if self.archetype_mix.is_empty() {
            return Err(ScenarioError::invalid("archetype_mix", "must not be empty"));
        }
        if self
            .archetype_mix
            .iter()
            .any(|s| !(s.fraction.is_finite() && s.fraction >= 0.0))
        {
            return Err(ScenarioError::invalid("archetype_mix", "fractions must be non-negative"));
        }
        let total: f64 = self.archetype_mix.iter().map(|s| s.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ScenarioError::invalid(
                "archetype_mix",
                format!("fractions sum to {total}, expected 1"),
            ));
        }
        if !(0.0..1.0).contains(&self.hardware_jitter) {
            return Err(ScenarioError::invalid("hardware_jitter", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.straggler_fraction) {
            return Err(ScenarioError::invalid("straggler_fraction", "must lie in [0, 1)"));
        }
        if !(self.straggler_slowdown.is_finite() && self.straggler_slowdown >= 1.0) {
            return Err(ScenarioError::invalid("straggler_slowdown", "must be at least 1"));
        }
        self.dataset
            .validate()
            .map_err(|e| ScenarioError::invalid("dataset", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ScenarioError::invalid("train", e.to_string()))?;
        let c = &self.clustering;
        if !(c.fuzzifier.is_finite() && c.fuzzifier > 1.0) {
            return Err(ScenarioError::invalid("clustering.fuzzifier", "must be greater than 1"));
        }
        c.weights
            .validate()
            .map_err(|e| ScenarioError::invalid("clustering.weights", e.to_string()))?;
        if !(0.0..1.0).contains(&c.participation_floor) {
            return Err(ScenarioError::invalid("clustering.participation_floor", "must lie in [0, 1)"));
        }
        if !(c.tol.is_finite() && c.tol >= 0.0) {
            return Err(ScenarioError::invalid("clustering.tol", "must be non-negative"));
        }
        self.calibration
            .validate()
            .map_err(|e| ScenarioError::invalid("calibration", e.to_string()))?;
        let l = &self.latency;
        for (field, v) in [
            ("latency.work_units_per_sample", l.work_units_per_sample),
            ("latency.bytes_per_param", l.bytes_per_param),
            ("latency.overhead_s", l.overhead_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ScenarioError::invalid(field, "must be positive"));
            }
        }
        if !(l.cpu_floor > 0.0 && l.cpu_floor <= 1.0) {
            return Err(ScenarioError::invalid("latency.cpu_floor", "must lie in (0, 1]"));
        }
        if self.early_stop.window == 0 {
            return Err(ScenarioError::invalid("early_stop.window", "must be positive"));
        }
        Ok(())
    }

    /// Client archetypes by largest-remainder rounding of the mix, in mix
    /// order (shuffling happens at simulation setup).
    pub fn archetype_counts(&self) -> Vec<(Archetype, usize)> {
        let n = self.num_clients;
        let exact: Vec<f64> = self.archetype_mix.iter().map(|s| s.fraction * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        self.archetype_mix
            .iter()
            .zip(counts)
            .map(|(s, c)| (s.archetype, c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_testbed_sizes() {
        let s1 = build_scenario("scenario1").unwrap();
        assert_eq!((s1.num_clients, s1.num_clusters), (20, 4));
        let s2 = build_scenario("scenario2").unwrap();
        assert_eq!((s2.num_clients, s2.num_clusters), (50, 8));
        let s3 = build_scenario("scenario3").unwrap();
        assert_eq!((s3.num_clients, s3.num_clusters), (80, 12));
        assert_eq!(s3.train, TrainConfig::default());
        assert!(matches!(build_scenario("scenario9"), Err(ScenarioError::UnknownPreset(_))));
    }

    #[test]
    fn more_clusters_than_clients_is_rejected() {
        let s = Scenario {
            num_clusters: 21,
            ..Scenario::default()
        };
        assert_eq!(s.validate().unwrap_err().field(), Some("num_clusters"));
    }

    #[test]
    fn mix_must_sum_to_one() {
        let mut s = Scenario::default();
        s.archetype_mix[0].fraction = 0.5;
        assert_eq!(s.validate().unwrap_err().field(), Some("archetype_mix"));
    }

    #[test]
    fn interpolated_cluster_counts() {
        let got: Vec<usize> = [20, 40, 50, 60, 80, 100].iter().map(|&n| clusters_for(n)).collect();
        assert_eq!(got, vec![4, 7, 8, 9, 12, 15]);
        assert_eq!(clusters_for(1), 1);
    }

    #[test]
    fn largest_remainder_counts() {
        let s = Scenario::default();
        let counts: Vec<usize> = s.archetype_counts().iter().map(|c| c.1).collect();
        assert_eq!(counts.iter().sum::<usize>(), 20);
        assert!(counts.iter().all(|&c| c == 6 || c == 7));
    }

    #[test]
    fn methods_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("fedsgd".parse::<Method>().is_err());
    }
}
