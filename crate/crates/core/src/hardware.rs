//! Hardware profiles and weighted fuzzy C-means.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("at least 2 profiles are required for normalization, got {0}")]
    TooFewProfiles(usize),
    #[error("profile {index} has a non-positive or non-finite field")]
    InvalidProfile { index: usize },
    #[error("profile {index} has not been normalized")]
    NotNormalized { index: usize },
    #[error("fuzzifier must be greater than 1, got {0}")]
    InvalidFuzzifier(f64),
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("cannot form {clusters} clusters from {profiles} profiles")]
    TooFewForClusters { profiles: usize, clusters: usize },
    #[error("resource weights must be non-negative and sum to 1, got ({0}, {1}, {2})")]
    InvalidWeights(f64, f64, f64),
    #[error("no centroids supplied")]
    NoCentroids,
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// A normalized (cpu, memory, bandwidth) triple in `[0, 1]^3`.
pub type NormProfile = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub cpu_ghz: f64,
    pub memory_gb: f64,
    pub bandwidth_mbps: f64,
    /// Filled in by [`normalize_profiles`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<NormProfile>,
}

impl HardwareProfile {
    pub const fn new(cpu_ghz: f64, memory_gb: f64, bandwidth_mbps: f64) -> Self {
        Self {
            cpu_ghz,
            memory_gb,
            bandwidth_mbps,
            normalized: None,
        }
    }

    pub fn raw(&self) -> [f64; 3] {
        [self.cpu_ghz, self.memory_gb, self.bandwidth_mbps]
    }

    pub fn is_valid(&self) -> bool {
        self.raw().iter().all(|v| v.is_finite() && *v > 0.0)
    }

    /// Multiplies every raw field by the matching factor and clears the
    /// normalized triple.
    pub fn scaled(&self, factors: [f64; 3]) -> Self {
        Self::new(
            self.cpu_ghz * factors[0],
            self.memory_gb * factors[1],
            self.bandwidth_mbps * factors[2],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceWeights {
    pub cpu: f64,
    pub memory: f64,
    pub bandwidth: f64,
}

impl Default for ResourceWeights {
    fn default() -> Self {
        Self {
            cpu: 0.3,
            memory: 0.3,
            bandwidth: 0.4,
        }
    }
}

impl ResourceWeights {
    pub fn new(cpu: f64, memory: f64, bandwidth: f64) -> Result<Self> {
        let w = Self {
            cpu,
            memory,
            bandwidth,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        let ok = parts.iter().all(|v| v.is_finite() && *v >= 0.0)
            && (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(ClusterError::InvalidWeights(self.cpu, self.memory, self.bandwidth))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.cpu, self.memory, self.bandwidth]
    }

    pub fn dot(&self, p: &NormProfile) -> f64 {
        self.cpu * p[0] + self.memory * p[1] + self.bandwidth * p[2]
    }
}

/// Per-dimension min-max scaling. A dimension with no spread maps to 0.5.
pub fn normalize_profiles(profiles: &[HardwareProfile]) -> Result<Vec<HardwareProfile>> {
    if profiles.len() < 2 {
        return Err(ClusterError::TooFewProfiles(profiles.len()));
    }
    if let Some(index) = profiles.iter().position(|p| !p.is_valid()) {
        return Err(ClusterError::InvalidProfile { index });
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in profiles {
        for (d, v) in p.raw().into_iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    Ok(profiles
        .iter()
        .map(|p| {
            let raw = p.raw();
            let mut norm = [0.5; 3];
            for d in 0..3 {
                if hi[d] > lo[d] {
                    norm[d] = (raw[d] - lo[d]) / (hi[d] - lo[d]);
                }
            }
            HardwareProfile {
                normalized: Some(norm),
                ..*p
            }
        })
        .collect())
}

/// Extracts the normalized triples, failing on the first unnormalized profile.
pub fn normalized_triples(profiles: &[HardwareProfile]) -> Result<Vec<NormProfile>> {
    profiles
        .iter()
        .enumerate()
        .map(|(index, p)| p.normalized.ok_or(ClusterError::NotNormalized { index }))
        .collect()
}

pub fn weighted_distance(a: &NormProfile, b: &NormProfile, w: &ResourceWeights) -> f64 {
    weighted_sq_distance(a, b, w).sqrt()
}

fn weighted_sq_distance(a: &NormProfile, b: &NormProfile, w: &ResourceWeights) -> f64 {
    w.as_array()
        .iter()
        .zip(a.iter().zip(b))
        .map(|(wd, (x, y))| wd * (x - y) * (x - y))
        .sum()
}

fn check_fuzzifier(m: f64) -> Result<()> {
    if m.is_finite() && m > 1.0 {
        Ok(())
    } else {
        Err(ClusterError::InvalidFuzzifier(m))
    }
}

/// Membership of one profile in each cluster.
///
/// Evaluated as `(d_min / d_k)^(2/(m-1))` then normalized, which equals the
/// textbook ratio form but cannot overflow for tiny distances. Centroids at
/// exactly zero distance share the whole membership equally.
pub fn compute_memberships(
    profile: &NormProfile,
    centroids: &[NormProfile],
    m: f64,
    w: &ResourceWeights,
) -> Result<Vec<f64>> {
    check_fuzzifier(m)?;
    if centroids.is_empty() {
        return Err(ClusterError::NoCentroids);
    }
    Ok(membership_row(profile, centroids, m, w))
}

fn membership_row(profile: &NormProfile, centroids: &[NormProfile], m: f64, w: &ResourceWeights) -> Vec<f64> {
    if centroids.len() == 1 {
        return vec![1.0];
    }
    let dists: Vec<f64> = centroids
        .iter()
        .map(|c| weighted_distance(profile, c, w))
        .collect();
    let zeros = dists.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        let share = 1.0 / zeros as f64;
        return dists
            .iter()
            .map(|&d| if d == 0.0 { share } else { 0.0 })
            .collect();
    }
    let d_min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let exponent = 2.0 / (m - 1.0);
    let raw: Vec<f64> = dists.iter().map(|d| (d_min / d).powf(exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Per-iteration diagnostics of [`fcm_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FcmStep {
    /// `sum_ik mu_ik^m d(i,k)^2` right after the membership update.
    pub objective: f64,
    /// Largest `|sum_k mu_ik - 1|` over rows.
    pub max_row_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyPartition {
    pub memberships: Vec<Vec<f64>>,
    pub centroids: Vec<NormProfile>,
    pub fuzzifier: f64,
    pub iterations_used: usize,
    pub history: Vec<FcmStep>,
}

impl FuzzyPartition {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn num_points(&self) -> usize {
        self.memberships.len()
    }

    /// Index of the largest membership of point `i`; first index on ties.
    pub fn dominant(&self, i: usize) -> usize {
        crate::model::argmax(&self.memberships[i])
    }
}

pub fn fcm_objective(
    profiles: &[NormProfile],
    memberships: &[Vec<f64>],
    centroids: &[NormProfile],
    m: f64,
    w: &ResourceWeights,
) -> f64 {
    profiles
        .iter()
        .zip(memberships)
        .map(|(p, row)| {
            row.iter()
                .zip(centroids)
                .map(|(u, c)| u.powf(m) * weighted_sq_distance(p, c, w))
                .sum::<f64>()
        })
        .sum()
}

fn max_row_error(memberships: &[Vec<f64>]) -> f64 {
    memberships
        .iter()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Deterministic farthest-point seeding: the first centroid is a
/// seed-chosen profile, each further centroid is the profile farthest
/// (weighted distance) from all centroids chosen so far.
pub fn farthest_point_init(
    profiles: &[NormProfile],
    k: usize,
    w: &ResourceWeights,
    seed: u64,
) -> Result<Vec<NormProfile>> {
    check_counts(profiles.len(), k)?;
    let mut rng = seeded(seed);
    let first = rng.random_range(0..profiles.len());
    let mut chosen = vec![profiles[first]];
    let mut nearest: Vec<f64> = profiles
        .iter()
        .map(|p| weighted_distance(p, &profiles[first], w))
        .collect();
    while chosen.len() < k {
        let mut best = 0;
        for (i, &d) in nearest.iter().enumerate() {
            if d > nearest[best] {
                best = i;
            }
        }
        let c = profiles[best];
        for (n, p) in nearest.iter_mut().zip(profiles) {
            *n = n.min(weighted_distance(p, &c, w));
        }
        chosen.push(c);
    }
    Ok(chosen)
}

fn check_counts(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if n < k {
        return Err(ClusterError::TooFewForClusters {
            profiles: n,
            clusters: k,
        });
    }
    Ok(())
}

/// Weighted fuzzy C-means from farthest-point initialization.
pub fn fcm_fit(
    profiles: &[NormProfile],
    k: usize,
    m: f64,
    w: &ResourceWeights,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<FuzzyPartition> {
    check_fuzzifier(m)?;
    w.validate()?;
    let init = farthest_point_init(profiles, k, w, seed)?;
    fcm_fit_from(profiles, init, m, w, max_iter, tol)
}

/// Weighted fuzzy C-means from caller-supplied centroids. Used to warm
/// start from the previous round so cluster identities persist.
pub fn fcm_fit_from(
    profiles: &[NormProfile],
    init: Vec<NormProfile>,
    m: f64,
    w: &ResourceWeights,
    max_iter: usize,
    tol: f64,
) -> Result<FuzzyPartition> {
    check_fuzzifier(m)?;
    w.validate()?;
    check_counts(profiles.len(), init.len())?;
    let mut centroids = init;
    let mut history = Vec::new();
    let mut iterations_used = 0;

    let assign = |centroids: &[NormProfile], history: &mut Vec<FcmStep>| {
        let u: Vec<Vec<f64>> = profiles
            .iter()
            .map(|p| membership_row(p, centroids, m, w))
            .collect();
        history.push(FcmStep {
            objective: fcm_objective(profiles, &u, centroids, m, w),
            max_row_error: max_row_error(&u),
        });
        u
    };

    let mut memberships = assign(&centroids, &mut history);
    while iterations_used < max_iter {
        iterations_used += 1;
        let updated = update_centroids(profiles, &memberships, &centroids, m);
        let movement = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| weighted_distance(a, b, w))
            .fold(0.0, f64::max);
        centroids = updated;
        memberships = assign(&centroids, &mut history);
        if movement < tol {
            break;
        }
    }
    Ok(FuzzyPartition {
        memberships,
        centroids,
        fuzzifier: m,
        iterations_used,
        history,
    })
}

fn update_centroids(
    profiles: &[NormProfile],
    memberships: &[Vec<f64>],
    previous: &[NormProfile],
    m: f64,
) -> Vec<NormProfile> {
    (0..previous.len())
        .map(|k| {
            let mut num = [0.0; 3];
            let mut den = 0.0;
            for (p, row) in profiles.iter().zip(memberships) {
                let u = row[k].powf(m);
                den += u;
                for d in 0..3 {
                    num[d] += u * p[d];
                }
            }
            if den > 0.0 {
                [num[0] / den, num[1] / den, num[2] / den]
            } else {
                previous[k]
            }
        })
        .collect()
}
