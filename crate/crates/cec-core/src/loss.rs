//! Classification heads and objectives: the patch-wise metric classifier,
//! patch-wise cross-entropy, auxiliary global/rotation heads, and the
//! uncertainty-weighted multi-task objective.

use crate::blocks::cecd;
use crate::cluster::ClusterParams;
use crate::connect::{FeatureMap, RelationMap};
use crate::error::{CecError, Result};
use crate::scalar::Scalar;
use crate::tensor::{mean_of_scalars, Tensor};

/// Probability floor when taking logs of externally supplied probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

/// Multi-task balance: a fixed lambda plus one learnable uncertainty scalar
/// per auxiliary task. The effective weight of task j is lambda + 1/(2 a_j^2).
#[derive(Debug, Clone)]
pub struct TaskWeights<S: Scalar> {
    pub lambda: f64,
    pub alpha_g: Tensor<S>,
    pub alpha_r: Tensor<S>,
}

impl<S: Scalar> TaskWeights<S> {
    /// Both alphas start at one, so each auxiliary weight starts at
    /// lambda + 0.5.
    pub fn new(lambda: f64) -> Self {
        TaskWeights {
            lambda,
            alpha_g: Tensor::param(vec![1], vec![S::one()]).expect("scalar"),
            alpha_r: Tensor::param(vec![1], vec![S::one()]).expect("scalar"),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        vec![("alpha_g", &mut self.alpha_g), ("alpha_r", &mut self.alpha_r)]
    }
}

/// The three label channels attached to every query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelBundle {
    /// Episode-local class index, 0..N.
    pub fewshot: usize,
    /// Dataset-wide class index, 0..D.
    pub global: usize,
    /// Quarter-turn count, 0..4.
    pub rotation: u8,
}

impl LabelBundle {
    pub fn validate(&self, n_way: usize, global_classes: usize) -> Result<()> {
        if self.fewshot >= n_way {
            return Err(CecError::Data(format!(
                "few-shot label {} out of range 0..{n_way}",
                self.fewshot
            )));
        }
        if self.global >= global_classes {
            return Err(CecError::Data(format!(
                "global label {} out of range 0..{global_classes}",
                self.global
            )));
        }
        if self.rotation >= 4 {
            return Err(CecError::Data(format!(
                "rotation label {} out of range 0..4",
                self.rotation
            )));
        }
        Ok(())
    }
}

/// Per-patch class probabilities from one relation map per class: softmax
/// across classes at every patch position. Output is [m, N].
pub fn metric_probs_from_relations<S: Scalar>(
    relations: &[RelationMap<S>],
) -> Result<Tensor<S>> {
    if relations.len() < 2 {
        return Err(CecError::Dimension(format!(
            "metric prediction needs at least two classes, got {}",
            relations.len()
        )));
    }
    let cols: Vec<Tensor<S>> = relations.iter().map(|r| r.tensor().clone()).collect();
    let stacked = Tensor::stack_cols(&cols)?;
    stacked.softmax_rows(S::one())
}

/// The full metric classifier for one query: per class, the distance map
/// between the rectified query and rectified support, then per-patch softmax
/// across classes.
pub fn metric_predict<S: Scalar>(
    qbars: &[FeatureMap<S>],
    pbars: &[FeatureMap<S>],
    params: &ClusterParams<S>,
) -> Result<Tensor<S>> {
    if qbars.len() != pbars.len() || qbars.len() < 2 {
        return Err(CecError::Dimension(format!(
            "metric prediction needs matching per-class features, got {} and {}",
            qbars.len(),
            pbars.len()
        )));
    }
    let relations = qbars
        .iter()
        .zip(pbars)
        .map(|(qb, pb)| cecd(qb, pb, params))
        .collect::<Result<Vec<_>>>()?;
    metric_probs_from_relations(&relations)
}

/// Patch-wise cross-entropy: per query, the negative log softmax at the
/// label summed over patches; averaged over the query batch.
pub fn pce_loss<S: Scalar>(logits: &[Tensor<S>], labels: &[usize]) -> Result<Tensor<S>> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(CecError::Dimension(format!(
            "patch-wise cross-entropy needs one label per query, got {} logits and {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let per_query = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| l.cross_entropy_rows(y))
        .collect::<Result<Vec<_>>>()?;
    mean_of_scalars(&per_query)
}

/// Negative log likelihood of already-normalized per-patch probabilities,
/// summed over patches and averaged over queries. Probabilities at the label
/// that fall below the floor are clamped; the count of clamps is returned so
/// callers can surface the warning.
pub fn metric_loss<S: Scalar>(
    probs: &[Tensor<S>],
    labels: &[usize],
) -> Result<(Tensor<S>, usize)> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(CecError::Dimension(format!(
            "metric loss needs one label per query, got {} prob maps and {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let floor = S::from_f64_c(PROB_FLOOR);
    let mut clamped = 0usize;
    let mut per_query = Vec::with_capacity(probs.len());
    for (p, &y) in probs.iter().zip(labels) {
        let n_classes = match p.shape() {
            [_, n] => *n,
            other => {
                return Err(CecError::Dimension(format!(
                    "probability map must be [m, N], got {other:?}"
                )))
            }
        };
        if y >= n_classes {
            return Err(CecError::Data(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        let picked = p.select_col(y)?;
        clamped += picked.data().iter().filter(|v| **v < floor).count();
        per_query.push(picked.clamp_min(floor).ln().sum_all().scale(-S::one()));
    }
    Ok((mean_of_scalars(&per_query)?, clamped))
}

/// Auxiliary heads: patch-wise linear logits over the global classes and the
/// four rotations, each fed to the patch-wise cross-entropy. The rectified
/// query conditioned on its true few-shot class is the input.
pub fn aux_losses<S: Scalar>(
    qbars: &[FeatureMap<S>],
    labels: &[LabelBundle],
    w_global: &Tensor<S>,
    w_rotation: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if qbars.len() != labels.len() || qbars.is_empty() {
        return Err(CecError::Dimension(format!(
            "auxiliary losses need one label bundle per query, got {} and {}",
            qbars.len(),
            labels.len()
        )));
    }
    let mut global_logits = Vec::with_capacity(qbars.len());
    let mut rotation_logits = Vec::with_capacity(qbars.len());
    for qb in qbars {
        global_logits.push(qb.tensor().matmul_nt(w_global)?);
        rotation_logits.push(qb.tensor().matmul_nt(w_rotation)?);
    }
    let global_labels: Vec<usize> = labels.iter().map(|l| l.global).collect();
    let rotation_labels: Vec<usize> = labels.iter().map(|l| l.rotation as usize).collect();
    let l_g = pce_loss(&global_logits, &global_labels)?;
    let l_r = pce_loss(&rotation_logits, &rotation_labels)?;
    Ok((l_g, l_r))
}

/// Uncertainty-weighted total: half the metric loss plus, per auxiliary
/// task, (lambda + w) L + log(1/(lambda + w)) with w = 1/(2 alpha^2).
/// Differentiable in both alphas.
pub fn multitask_loss<S: Scalar>(
    loss_metric: &Tensor<S>,
    loss_global: &Tensor<S>,
    loss_rotation: &Tensor<S>,
    weights: &TaskWeights<S>,
) -> Result<Tensor<S>> {
    let term = |alpha: &Tensor<S>, loss: &Tensor<S>| -> Result<Tensor<S>> {
        let a = alpha.item()?.to_f64_c();
        if a == 0.0 {
            return Err(CecError::Parameter("task uncertainty alpha must be nonzero".into()));
        }
        let coeff_value = weights.lambda + 1.0 / (2.0 * a * a);
        if coeff_value <= 0.0 {
            return Err(CecError::Parameter(format!(
                "effective task weight must be positive, got {coeff_value}"
            )));
        }
        // w = 1 / (2 alpha^2), coefficient = lambda + w
        let w = alpha.mul(alpha)?.scale(S::from_f64_c(2.0)).recip();
        let coeff = w.add_scalar(S::from_f64_c(weights.lambda));
        let weighted = coeff.mul(loss)?;
        let log_term = coeff.ln().scale(-S::one());
        weighted.add(&log_term)
    };
    let half_metric = loss_metric.scale(S::from_f64_c(0.5));
    let g = term(&weights.alpha_g, loss_global)?;
    let r = term(&weights.alpha_r, loss_rotation)?;
    half_metric.add(&g)?.add(&r)
}
