//! Modules derived from the connection layer: the bidirectional module, the
//! self-connection variant, the connection-based distance metric, and the
//! bank-backed embedding and classifier heads.

use rand::Rng;

use crate::cluster::{patch_cluster, ClusterParams};
use crate::connect::{cec, relation_map, FeatureMap, RelationMap};
use crate::error::{CecError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learnable bank of semantic-group embeddings used as a clustering source.
#[derive(Debug, Clone)]
pub struct EmbeddingBank<S: Scalar> {
    /// One row per semantic group, shape [n_e, c].
    pub weights: Tensor<S>,
}

impl<S: Scalar> EmbeddingBank<S> {
    /// Rows drawn uniformly in +-1/sqrt(c) so cosine logits start at unit
    /// scale. Five groups is the working default.
    pub fn new<R: Rng>(groups: usize, channels: usize, rng: &mut R) -> Result<Self> {
        if groups < 1 {
            return Err(CecError::Parameter("embedding bank needs at least one group".into()));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let data = (0..groups * channels)
            .map(|_| S::from_f64_c(rng.gen_range(-bound..bound)))
            .collect();
        Ok(EmbeddingBank {
            weights: Tensor::param(vec![groups, channels], data)?,
        })
    }

    pub fn groups(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[1]
    }

    fn as_feature_map(&self) -> Result<FeatureMap<S>> {
        FeatureMap::new(self.weights.clone())
    }
}

pub const DEFAULT_EMBEDDING_GROUPS: usize = 5;

/// Learnable per-class weight rows for the classifier head.
#[derive(Debug, Clone)]
pub struct ClassifierBank<S: Scalar> {
    /// One row per training class, shape [D, c].
    pub weights: Tensor<S>,
}

impl<S: Scalar> ClassifierBank<S> {
    pub fn new<R: Rng>(classes: usize, channels: usize, rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(CecError::Parameter("classifier bank needs at least two classes".into()));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let data = (0..classes * channels)
            .map(|_| S::from_f64_c(rng.gen_range(-bound..bound)))
            .collect();
        Ok(ClassifierBank {
            weights: Tensor::param(vec![classes, channels], data)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    fn as_feature_map(&self) -> Result<FeatureMap<S>> {
        FeatureMap::new(self.weights.clone())
    }
}

/// Bidirectional connection: rectify the reference against the source and
/// the source against the reference, sharing one set of parameters.
pub fn cecm<S: Scalar>(
    q: &FeatureMap<S>,
    p: &FeatureMap<S>,
    params: &ClusterParams<S>,
) -> Result<(FeatureMap<S>, FeatureMap<S>)> {
    Ok((cec(q, p, params)?, cec(p, q, params)?))
}

/// Self connection: the feature is clustered against itself, boosting
/// mutually similar patches.
pub fn self_cecm<S: Scalar>(
    q: &FeatureMap<S>,
    params: &ClusterParams<S>,
) -> Result<FeatureMap<S>> {
    cec(q, q, params)
}

/// Connection-based distance: cluster the rectified source against the
/// rectified reference, then score per-patch agreement. Output entries live
/// in [-1, 1]; the mode in `params` selects the metric variant.
pub fn cecd<S: Scalar>(
    qb: &FeatureMap<S>,
    pb: &FeatureMap<S>,
    params: &ClusterParams<S>,
) -> Result<RelationMap<S>> {
    let cp = patch_cluster(qb, pb, params)?;
    relation_map(qb, &cp)
}

/// Embedding connection: element connection of the input against the bank
/// rows, enhancing regions similar to any learned semantic group.
pub fn cece<S: Scalar>(
    q: &FeatureMap<S>,
    bank: &EmbeddingBank<S>,
    params: &ClusterParams<S>,
) -> Result<FeatureMap<S>> {
    if bank.channels() != q.channels() {
        return Err(CecError::Dimension(format!(
            "embedding bank has {} channels, input has {}",
            bank.channels(),
            q.channels()
        )));
    }
    cec(q, &bank.as_feature_map()?, params)
}

/// Classifier head: the distance metric with class-weight rows as the
/// reference and the query patches as the source, giving one score per
/// class in [-1, 1].
pub fn cecc<S: Scalar>(
    q: &FeatureMap<S>,
    bank: &ClassifierBank<S>,
    params: &ClusterParams<S>,
) -> Result<RelationMap<S>> {
    let w = bank.as_feature_map()?;
    if w.channels() != q.channels() {
        return Err(CecError::Dimension(format!(
            "classifier bank has {} channels, input has {}",
            w.channels(),
            q.channels()
        )));
    }
    cecd(&w, q, params)
}
