//! Cluster-level and global model aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("all aggregation weights are zero")]
    ZeroWeights,
    #[error("aggregation weight {index} is invalid: {value}")]
    InvalidWeight { index: usize, value: f64 },
    #[error("cluster {cluster} has no data")]
    EmptyCluster { cluster: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AggregationError>;

/// Membership floor below which a client does not upload to a cluster.
pub const DEFAULT_PARTICIPATION_FLOOR: f64 = 0.05;

/// One client's contribution to a cluster.
#[derive(Debug, Clone, Copy)]
pub struct ClientUpdate<'a> {
    pub client_id: usize,
    pub params: &'a ModelParams,
    pub membership: f64,
    pub data_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub cluster_id: usize,
    pub member_client_ids: Vec<usize>,
    pub memberships: Vec<f64>,
    pub data_sizes: Vec<usize>,
}

impl ClusterAssignment {
    /// Clients whose membership in `cluster_id` reaches `floor`.
    pub fn from_memberships(
        cluster_id: usize,
        memberships: &[Vec<f64>],
        data_sizes: &[usize],
        floor: f64,
    ) -> Self {
        let mut out = Self {
            cluster_id,
            member_client_ids: Vec::new(),
            memberships: Vec::new(),
            data_sizes: Vec::new(),
        };
        for (i, row) in memberships.iter().enumerate() {
            let u = row[cluster_id];
            if u >= floor && u > 0.0 {
                out.member_client_ids.push(i);
                out.memberships.push(u);
                out.data_sizes.push(data_sizes[i]);
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.member_client_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub cluster_id: usize,
    pub params: ModelParams,
    pub total_data: usize,
    pub mean_membership: f64,
}

/// Convex combination `sum_i (w_i / sum w) * x_i`.
///
/// Accumulation starts from the first term rather than from zero, so a
/// single input with any positive weight is returned unchanged and the
/// reduction order is always input order.
pub fn weighted_average(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = models.first().ok_or(AggregationError::Empty)?;
    if models.len() != weights.len() {
        return Err(AggregationError::Empty);
    }
    for (index, &value) in weights.iter().enumerate() {
        if !(value.is_finite() && value >= 0.0) {
            return Err(AggregationError::InvalidWeight { index, value });
        }
    }
    for m in &models[1..] {
        first.same_shape(m)?;
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(AggregationError::ZeroWeights);
    }
    let coeffs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut out = first.scaled(coeffs[0]);
    for (m, c) in models[1..].iter().zip(&coeffs[1..]) {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *o += c * v;
        }
    }
    Ok(out)
}

/// Membership-weighted average of proximally trained client models.
///
/// The proximal pull toward `anchor` already happened during local
/// training; `anchor` and `rho` are only checked here.
pub fn cluster_aggregate(
    cluster_id: usize,
    anchor: &ModelParams,
    updates: &[ClientUpdate<'_>],
    rho: f64,
) -> Result<ClusterModel> {
    if updates.is_empty() {
        return Err(AggregationError::Empty);
    }
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(AggregationError::InvalidWeight { index: 0, value: rho });
    }
    for u in updates {
        anchor.same_shape(u.params)?;
    }
    let models: Vec<&ModelParams> = updates.iter().map(|u| u.params).collect();
    let mus: Vec<f64> = updates.iter().map(|u| u.membership).collect();
    let params = weighted_average(&models, &mus)?;
    let total_data = updates.iter().map(|u| u.data_size).sum();
    if total_data == 0 {
        return Err(AggregationError::EmptyCluster { cluster: cluster_id });
    }
    Ok(ClusterModel {
        cluster_id,
        params,
        total_data,
        mean_membership: mus.iter().sum::<f64>() / mus.len() as f64,
    })
}

/// `pi_k = n_k * mean_mu_k / sum_r n_r * mean_mu_r`.
pub fn cluster_weights(clusters: &[ClusterModel]) -> Result<Vec<f64>> {
    if clusters.is_empty() {
        return Err(AggregationError::Empty);
    }
    let raw: Vec<f64> = clusters
        .iter()
        .map(|c| {
            if c.total_data == 0 {
                Err(AggregationError::EmptyCluster { cluster: c.cluster_id })
            } else {
                Ok(c.total_data as f64 * c.mean_membership)
            }
        })
        .collect::<Result<_>>()?;
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(AggregationError::ZeroWeights);
    }
    Ok(raw.iter().map(|r| r / total).collect())
}

pub fn global_aggregate(clusters: &[ClusterModel]) -> Result<ModelParams> {
    let pi = cluster_weights(clusters)?;
    let models: Vec<&ModelParams> = clusters.iter().map(|c| &c.params).collect();
    weighted_average(&models, &pi)
}

/// Data-size weighted average used by both baselines.
pub fn fedavg_aggregate(models: &[&ModelParams], data_sizes: &[usize]) -> Result<ModelParams> {
    let w: Vec<f64> = data_sizes.iter().map(|&n| n as f64).collect();
    weighted_average(models, &w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> ModelParams {
        // one class, v.len() - 1 features
        ModelParams::from_flat(1, v.len() - 1, v.to_vec()).unwrap()
    }

    fn cm(id: usize, params: ModelParams, n: usize, mu: f64) -> ClusterModel {
        ClusterModel {
            cluster_id: id,
            params,
            total_data: n,
            mean_membership: mu,
        }
    }

    #[test]
    fn singleton_cluster_is_exact() {
        let w = p(&[0.1, -0.7, 3.3]);
        let up = [ClientUpdate { client_id: 0, params: &w, membership: 1.0, data_size: 10 }];
        let c = cluster_aggregate(0, &w, &up, 0.6).unwrap();
        assert_eq!(c.params, w);
        assert_eq!(c.total_data, 10);
        assert_eq!(c.mean_membership, 1.0);
    }

    #[test]
    fn equal_membership_gives_midpoint() {
        let a = p(&[0.0, 2.0, -4.0]);
        let b = p(&[1.0, 4.0, 0.0]);
        let up = [
            ClientUpdate { client_id: 0, params: &a, membership: 0.4, data_size: 5 },
            ClientUpdate { client_id: 1, params: &b, membership: 0.4, data_size: 7 },
        ];
        let c = cluster_aggregate(0, &a, &up, 0.0).unwrap();
        assert_eq!(c.params.as_slice(), &[0.5, 3.0, -2.0]);
        assert_eq!(c.total_data, 12);
    }

    #[test]
    fn weight_examples() {
        let z = p(&[0.0, 0.0]);
        let pi = cluster_weights(&[cm(0, z.clone(), 100, 0.5), cm(1, z.clone(), 300, 0.5)]).unwrap();
        assert!((pi[0] - 0.25).abs() < 1e-15 && (pi[1] - 0.75).abs() < 1e-15);
        let pi = cluster_weights(&[cm(0, z.clone(), 100, 0.9), cm(1, z.clone(), 100, 0.3)]).unwrap();
        assert!((pi[0] - 0.75).abs() < 1e-12 && (pi[1] - 0.25).abs() < 1e-12);
        assert_eq!(cluster_weights(&[cm(0, z, 5, 0.2)]).unwrap(), vec![1.0]);
    }

    #[test]
    fn identical_clusters_fixed_point() {
        let w = p(&[0.3, 0.1, -0.2]);
        let cl = vec![cm(0, w.clone(), 10, 0.3), cm(1, w.clone(), 20, 0.6), cm(2, w.clone(), 30, 0.9)];
        let g = global_aggregate(&cl).unwrap();
        for (a, b) in g.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() <= 1e-16);
        }
    }

    #[test]
    fn opposite_clusters_cancel() {
        let w = p(&[0.3, -1.5, 2.0]);
        let g = global_aggregate(&[cm(0, w.clone(), 10, 0.5), cm(1, w.scaled(-1.0), 10, 0.5)]).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_inputs_error() {
        assert_eq!(global_aggregate(&[]).unwrap_err(), AggregationError::Empty);
        let w = p(&[0.0, 0.0]);
        assert_eq!(cluster_aggregate(0, &w, &[], 0.0).unwrap_err(), AggregationError::Empty);
        let up = [ClientUpdate { client_id: 0, params: &w, membership: 0.0, data_size: 5 }];
        assert_eq!(cluster_aggregate(0, &w, &up, 0.0).unwrap_err(), AggregationError::ZeroWeights);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = p(&[0.0, 0.0]);
        let b = p(&[0.0, 0.0, 0.0]);
        assert!(matches!(
            weighted_average(&[&a, &b], &[1.0, 1.0]),
            Err(AggregationError::Model(ModelError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn participation_floor_filters_members() {
        let u = vec![vec![0.9, 0.1], vec![0.96, 0.04], vec![0.5, 0.5]];
        let a = ClusterAssignment::from_memberships(1, &u, &[10, 20, 30], 0.05);
        assert_eq!(a.member_client_ids, vec![0, 2]);
        assert_eq!(a.data_sizes, vec![10, 30]);
    }
}
