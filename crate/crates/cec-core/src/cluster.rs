//! The patch-cluster operator: for every reference patch, a softmax-weighted
//! aggregate of source patches. Four modes share the same affinity-then-
//! aggregate skeleton; two of them add learnable refinement. A mean-cosine
//! cross-attention baseline is included for comparisons.

use rand::Rng;

use crate::connect::{ClusteredPatch, FeatureMap, RelationMap};
use crate::error::{CecError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::NORM_EPS;

/// Affinity construction used to cluster source patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClusterMode {
    /// Raw dot-product affinity, no refinement.
    MatMul,
    /// Cosine-similarity affinity, no refinement.
    Cosine,
    /// Cosine affinity, then a learnable channel mix and a nonlinearity.
    MetaGcn,
    /// Learnable query/key/value projections plus a feed-forward refinement.
    Transformer,
}

impl ClusterMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClusterMode::MatMul => "matmul",
            ClusterMode::Cosine => "cosine",
            ClusterMode::MetaGcn => "metagcn",
            ClusterMode::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => ClusterMode::MatMul,
            "cosine" => ClusterMode::Cosine,
            "metagcn" => ClusterMode::MetaGcn,
            "transformer" => ClusterMode::Transformer,
            other => {
                return Err(CecError::Configuration(format!(
                    "unknown cluster mode '{other}'"
                )))
            }
        })
    }
}

/// Nonlinearity applied by the meta graph-convolution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Mode selector plus whatever weights the mode needs. Learnable members are
/// present exactly when the mode requires them.
#[derive(Debug, Clone)]
pub struct ClusterParams<S: Scalar> {
    pub mode: ClusterMode,
    pub temperature: S,
    pub activation: Activation,
    pub w: Option<Tensor<S>>,
    pub wq: Option<Tensor<S>>,
    pub wk: Option<Tensor<S>>,
    pub wv: Option<Tensor<S>>,
    pub ffn1: Option<Tensor<S>>,
    pub ffn2: Option<Tensor<S>>,
}

pub(crate) fn identity_plus_noise<S: Scalar, R: Rng>(c: usize, rng: &mut R) -> Tensor<S> {
    let mut data = vec![S::zero(); c * c];
    for i in 0..c {
        for j in 0..c {
            let noise = rng.gen_range(-0.01..0.01);
            let base = if i == j { 1.0 } else { 0.0 };
            data[i * c + j] = S::from_f64_c(base + noise);
        }
    }
    Tensor::param(vec![c, c], data).expect("square weight")
}

pub(crate) fn uniform_fan<S: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64_c(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(vec![rows, cols], data).expect("weight")
}

impl<S: Scalar> ClusterParams<S> {
    fn bare(mode: ClusterMode, temperature: f64) -> Self {
        ClusterParams {
            mode,
            temperature: S::from_f64_c(temperature),
            activation: Activation::Relu,
            w: None,
            wq: None,
            wk: None,
            wv: None,
            ffn1: None,
            ffn2: None,
        }
    }

    pub fn matmul(temperature: f64) -> Self {
        Self::bare(ClusterMode::MatMul, temperature)
    }

    pub fn cosine(temperature: f64) -> Self {
        Self::bare(ClusterMode::Cosine, temperature)
    }

    pub fn metagcn<R: Rng>(channels: usize, temperature: f64, rng: &mut R) -> Self {
        ClusterParams {
            w: Some(identity_plus_noise(channels, rng)),
            ..Self::bare(ClusterMode::MetaGcn, temperature)
        }
    }

    pub fn transformer<R: Rng>(channels: usize, temperature: f64, rng: &mut R) -> Self {
        ClusterParams {
            wq: Some(identity_plus_noise(channels, rng)),
            wk: Some(identity_plus_noise(channels, rng)),
            wv: Some(identity_plus_noise(channels, rng)),
            ffn1: Some(uniform_fan(channels, channels, rng)),
            ffn2: Some(uniform_fan(channels, channels, rng)),
            ..Self::bare(ClusterMode::Transformer, temperature)
        }
    }

    /// Initialize whatever the given mode needs.
    pub fn for_mode<R: Rng>(
        mode: ClusterMode,
        channels: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Self {
        match mode {
            ClusterMode::MatMul => Self::matmul(temperature),
            ClusterMode::Cosine => Self::cosine(temperature),
            ClusterMode::MetaGcn => Self::metagcn(channels, temperature, rng),
            ClusterMode::Transformer => Self::transformer(channels, temperature, rng),
        }
    }

    fn require(&self, t: &Option<Tensor<S>>, name: &str) -> Result<Tensor<S>> {
        t.clone().ok_or_else(|| {
            CecError::Configuration(format!(
                "{:?} mode needs weight '{name}' but it is absent",
                self.mode
            ))
        })
    }

    /// The learnable members present under the current mode, in a fixed
    /// order, with stable names.
    pub fn named_params(&self) -> Vec<(&'static str, Tensor<S>)> {
        let mut out = Vec::new();
        if let Some(w) = &self.w {
            out.push(("w", w.clone()));
        }
        for (name, t) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("ffn1", &self.ffn1),
            ("ffn2", &self.ffn2),
        ] {
            if let Some(t) = t {
                out.push((name, t.clone()));
            }
        }
        out
    }

    /// Copy whose weight tensors are cut out of any gradient graph.
    pub fn detached(&self) -> Self {
        ClusterParams {
            mode: self.mode,
            temperature: self.temperature,
            activation: self.activation,
            w: self.w.as_ref().map(Tensor::detach),
            wq: self.wq.as_ref().map(Tensor::detach),
            wk: self.wk.as_ref().map(Tensor::detach),
            wv: self.wv.as_ref().map(Tensor::detach),
            ffn1: self.ffn1.as_ref().map(Tensor::detach),
            ffn2: self.ffn2.as_ref().map(Tensor::detach),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        let mut out: Vec<(&'static str, &mut Tensor<S>)> = Vec::new();
        if let Some(w) = self.w.as_mut() {
            out.push(("w", w));
        }
        if let Some(t) = self.wq.as_mut() {
            out.push(("wq", t));
        }
        if let Some(t) = self.wk.as_mut() {
            out.push(("wk", t));
        }
        if let Some(t) = self.wv.as_mut() {
            out.push(("wv", t));
        }
        if let Some(t) = self.ffn1.as_mut() {
            out.push(("ffn1", t));
        }
        if let Some(t) = self.ffn2.as_mut() {
            out.push(("ffn2", t));
        }
        out
    }
}

fn check_channels<S: Scalar>(q: &FeatureMap<S>, p: &FeatureMap<S>) -> Result<()> {
    if q.channels() != p.channels() {
        return Err(CecError::Dimension(format!(
            "channel counts disagree: reference has {}, source has {}",
            q.channels(),
            p.channels()
        )));
    }
    Ok(())
}

/// Dot-product clustering: softmax(q pᵀ / t) p.
pub fn pc_matmul<S: Scalar>(
    q: &FeatureMap<S>,
    p: &FeatureMap<S>,
    temperature: S,
) -> Result<ClusteredPatch<S>> {
    check_channels(q, p)?;
    let affinity = q.tensor().matmul_nt(p.tensor())?.softmax_rows(temperature)?;
    Ok(ClusteredPatch(affinity.matmul(p.tensor())?))
}

/// Cosine clustering: the affinity is computed on row-normalized inputs,
/// aggregation still uses the raw source rows.
pub fn pc_cosine<S: Scalar>(
    q: &FeatureMap<S>,
    p: &FeatureMap<S>,
    temperature: S,
) -> Result<ClusteredPatch<S>> {
    check_channels(q, p)?;
    let eps = S::from_f64_c(NORM_EPS);
    let qn = q.tensor().l2_normalize_rows(eps)?;
    let pn = p.tensor().l2_normalize_rows(eps)?;
    let affinity = qn.matmul_nt(&pn)?.softmax_rows(temperature)?;
    Ok(ClusteredPatch(affinity.matmul(p.tensor())?))
}

/// Cosine clustering followed by a learnable channel mix and nonlinearity:
/// the affinity plays the role of a per-input adjacency.
pub fn pc_metagcn<S: Scalar>(
    q: &FeatureMap<S>,
    p: &FeatureMap<S>,
    params: &ClusterParams<S>,
) -> Result<ClusteredPatch<S>> {
    check_channels(q, p)?;
    let w = params.require(&params.w, "w")?;
    if w.shape() != [q.channels(), q.channels()] {
        return Err(CecError::Configuration(format!(
            "metagcn weight must be {c} x {c}, got {:?}",
            w.shape(),
            c = q.channels()
        )));
    }
    let aggregated = pc_cosine(q, p, params.temperature)?;
    let mixed = aggregated.tensor().matmul(&w)?;
    let out = match params.activation {
        Activation::Relu => mixed.relu(),
        Activation::Sigmoid => mixed.sigmoid(),
    };
    Ok(ClusteredPatch(out))
}

/// Attention-style clustering with learnable projections and a residual
/// two-layer feed-forward refinement.
pub fn pc_transformer<S: Scalar>(
    q: &FeatureMap<S>,
    p: &FeatureMap<S>,
    params: &ClusterParams<S>,
) -> Result<ClusteredPatch<S>> {
    check_channels(q, p)?;
    let wq = params.require(&params.wq, "wq")?;
    let wk = params.require(&params.wk, "wk")?;
    let wv = params.require(&params.wv, "wv")?;
    let f1 = params.require(&params.ffn1, "ffn1")?;
    let f2 = params.require(&params.ffn2, "ffn2")?;
    let qp = q.tensor().matmul_nt(&wq)?;
    let kp = p.tensor().matmul_nt(&wk)?;
    let vp = p.tensor().matmul_nt(&wv)?;
    let attn = qp.matmul_nt(&kp)?.softmax_rows(params.temperature)?;
    let pooled = attn.matmul(&vp)?;
    let hidden = pooled.matmul_nt(&f1)?.relu();
    let refined = pooled.add(&hidden.matmul_nt(&f2)?)?;
    Ok(ClusteredPatch(refined))
}

/// Mode dispatch for the generic clustering operator.
pub fn patch_cluster<S: Scalar>(
    q: &FeatureMap<S>,
    p: &FeatureMap<S>,
    params: &ClusterParams<S>,
) -> Result<ClusteredPatch<S>> {
    match params.mode {
        ClusterMode::MatMul => pc_matmul(q, p, params.temperature),
        ClusterMode::Cosine => pc_cosine(q, p, params.temperature),
        ClusterMode::MetaGcn => pc_metagcn(q, p, params),
        ClusterMode::Transformer => pc_transformer(q, p, params),
    }
}

/// Cross-attention baseline relation map: for each reference patch, the
/// mean cosine similarity against every source patch. Dependency-free
/// stand-in for learned correlation refinement; used only for comparisons.
pub fn cross_attention_baseline<S: Scalar>(
    q: &FeatureMap<S>,
    p: &FeatureMap<S>,
) -> Result<RelationMap<S>> {
    check_channels(q, p)?;
    let eps = S::from_f64_c(NORM_EPS);
    let qn = q.tensor().l2_normalize_rows(eps)?;
    let pn = p.tensor().l2_normalize_rows(eps)?;
    let corr = qn.matmul_nt(&pn)?;
    let inv = S::one() / S::from_f64_c(p.rows() as f64);
    Ok(RelationMap(corr.row_sum()?.scale(inv)))
}
