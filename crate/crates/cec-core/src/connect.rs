//! Patch feature containers, relation maps, and the element-connection
//! layer that rescales reference patches by their agreement with the
//! clustered source patches.

use crate::cluster::{patch_cluster, ClusterParams};
use crate::error::{CecError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::NORM_EPS;

/// A (rows x channels) matrix of patch features: one row per spatial
/// position (or per bank entry), one column per channel.
#[derive(Debug, Clone)]
pub struct FeatureMap<S: Scalar>(Tensor<S>);

impl<S: Scalar> FeatureMap<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        match values.shape() {
            [r, c] if *r >= 1 && *c >= 1 => {}
            other => {
                return Err(CecError::Dimension(format!(
                    "feature map must be a non-empty matrix, got {other:?}"
                )))
            }
        }
        if !values.all_finite() {
            return Err(CecError::Data("feature map contains non-finite entries".into()));
        }
        Ok(FeatureMap(values))
    }

    pub fn from_rows(rows: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        Self::new(Tensor::constant(vec![rows, channels], data)?)
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }
}

/// Output of patch clustering: one aggregated source row per reference row.
#[derive(Debug, Clone)]
pub struct ClusteredPatch<S: Scalar>(pub(crate) Tensor<S>);

impl<S: Scalar> From<Tensor<S>> for ClusteredPatch<S> {
    fn from(values: Tensor<S>) -> Self {
        ClusteredPatch(values)
    }
}

impl<S: Scalar> ClusteredPatch<S> {
    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }
}

/// Per-patch cosine scores, one entry per reference patch, each in [-1, 1].
#[derive(Debug, Clone)]
pub struct RelationMap<S: Scalar>(pub(crate) Tensor<S>);

impl<S: Scalar> From<Tensor<S>> for RelationMap<S> {
    fn from(scores: Tensor<S>) -> Self {
        RelationMap(scores)
    }
}

impl<S: Scalar> RelationMap<S> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn scores(&self) -> &[S] {
        self.0.data()
    }
}

/// Row-wise cosine similarity between a reference map and its clustered
/// patches. Zero rows score exactly zero thanks to the epsilon guard.
pub fn relation_map<S: Scalar>(
    q: &FeatureMap<S>,
    cp: &ClusteredPatch<S>,
) -> Result<RelationMap<S>> {
    if q.tensor().shape() != cp.tensor().shape() {
        return Err(CecError::Dimension(format!(
            "relation map needs equal shapes, got {:?} and {:?}",
            q.tensor().shape(),
            cp.tensor().shape()
        )));
    }
    let eps = S::from_f64_c(NORM_EPS);
    let qn = q.tensor().l2_normalize_rows(eps)?;
    let cn = cp.tensor().l2_normalize_rows(eps)?;
    Ok(RelationMap(qn.mul(&cn)?.row_sum()?))
}

/// Rescale each patch of `q` by one plus the softmax (over patch positions)
/// of an externally supplied relation map.
pub fn rescale_by_relation<S: Scalar>(
    q: &FeatureMap<S>,
    r: &RelationMap<S>,
) -> Result<FeatureMap<S>> {
    let m = q.rows();
    if r.len() != m {
        return Err(CecError::Dimension(format!(
            "relation map length {} does not match {} patches",
            r.len(),
            m
        )));
    }
    let weights = r
        .tensor()
        .reshape(vec![1, m])?
        .softmax_rows(S::one())?
        .reshape(vec![m])?;
    let factors = weights.add_scalar(S::one());
    FeatureMap::new(q.tensor().scale_rows(&factors)?)
}

/// Element connection: compute the relation map of `q` against `cp`, then
/// rescale `q` patchwise by one plus its softmax. Patch directions are
/// preserved; only magnitudes change, each by a factor in (1, 2).
pub fn element_connect<S: Scalar>(
    q: &FeatureMap<S>,
    cp: &ClusteredPatch<S>,
) -> Result<FeatureMap<S>> {
    let r = relation_map(q, cp)?;
    rescale_by_relation(q, &r)
}

/// The combined connection layer: cluster the source patches against the
/// reference, then element-connect the reference with the result.
pub fn cec<S: Scalar>(
    q: &FeatureMap<S>,
    p: &FeatureMap<S>,
    params: &ClusterParams<S>,
) -> Result<FeatureMap<S>> {
    let cp = patch_cluster(q, p, params)?;
    element_connect(q, &cp)
}
