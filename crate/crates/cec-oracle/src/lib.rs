//! Brute-force reference implementations of every clustered-patch element
//! connection operator, written with explicit scalar loops and nothing else.
//!
//! These exist so the main library can be checked against an independent
//! derivation: no matrix helper here is shared with the optimized kernels.
//! Everything runs in `f64` and is only intended for small instances inside
//! test suites. Not fast, on purpose.

use thiserror::Error;

/// Row-major dense matrix as nested vectors; `m[i][j]` is row i, column j.
pub type Mat = Vec<Vec<f64>>;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unsupported equation id: {0}")]
    UnknownEquation(String),
    #[error("oracle input missing: {0}")]
    MissingInput(&'static str),
    #[error("non-finite evaluation at coordinate {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, OracleError>;

const NORM_EPS: f64 = 1e-12;

/// Nonlinearity selector for the graph-convolution cluster mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

fn rows(a: &Mat) -> usize {
    a.len()
}

fn cols(a: &Mat) -> usize {
    a.first().map_or(0, |r| r.len())
}

/// Softmax of one slice, with max subtraction, written out longhand.
fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut exps = Vec::with_capacity(x.len());
    let mut denom = 0.0;
    for &v in x {
        let e = (v - max).exp();
        denom += e;
        exps.push(e);
    }
    for e in exps.iter_mut() {
        *e /= denom;
    }
    exps
}

fn row_norm(a: &Mat, i: usize) -> f64 {
    let mut s = 0.0;
    for &v in &a[i] {
        s += v * v;
    }
    s.sqrt()
}

/// Row-normalized copy: each row divided by max(norm, eps).
fn normalize_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for i in 0..rows(a) {
        let n = row_norm(a, i).max(NORM_EPS);
        for v in out[i].iter_mut() {
            *v /= n;
        }
    }
    out
}

/// Cross-attention relation map: mean cosine similarity between each
/// reference patch of `q` and every source patch of `p`.
pub fn eq1_cross_attention(q: &Mat, p: &Mat) -> Vec<f64> {
    let qn = normalize_rows(q);
    let pn = normalize_rows(p);
    let (m, n, c) = (rows(q), rows(p), cols(q));
    let mut out = vec![0.0; m];
    for j in 0..m {
        let mut acc = 0.0;
        for i in 0..n {
            let mut dot = 0.0;
            for k in 0..c {
                dot += pn[i][k] * qn[j][k];
            }
            acc += dot;
        }
        out[j] = acc / n as f64;
    }
    out
}

/// MatMul cluster mode: softmax(q pᵀ / t) p, all loops.
pub fn eq3_matmul(q: &Mat, p: &Mat, temperature: f64) -> Mat {
    let (m, n, c) = (rows(q), rows(p), cols(q));
    let mut out = vec![vec![0.0; c]; m];
    for i in 0..m {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..c {
                dot += q[i][k] * p[j][k];
            }
            logits[j] = dot / temperature;
        }
        let aff = softmax_slice(&logits);
        for j in 0..n {
            for k in 0..c {
                out[i][k] += aff[j] * p[j][k];
            }
        }
    }
    out
}

/// Cosine cluster mode: softmax over cosine similarities, aggregation over
/// the raw (unnormalized) source rows.
pub fn eq4_cosine(q: &Mat, p: &Mat, temperature: f64) -> Mat {
    let qn = normalize_rows(q);
    let pn = normalize_rows(p);
    let (m, n, c) = (rows(q), rows(p), cols(q));
    let mut out = vec![vec![0.0; c]; m];
    for i in 0..m {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..c {
                dot += qn[i][k] * pn[j][k];
            }
            logits[j] = dot / temperature;
        }
        let aff = softmax_slice(&logits);
        for j in 0..n {
            for k in 0..c {
                out[i][k] += aff[j] * p[j][k];
            }
        }
    }
    out
}

/// Graph-convolution cluster mode: activation(cosine affinity · p · w).
pub fn eq5_metagcn(q: &Mat, p: &Mat, w: &Mat, act: Activation, temperature: f64) -> Mat {
    let aggregated = eq4_cosine(q, p, temperature);
    let (m, c) = (rows(&aggregated), cols(&aggregated));
    let mut out = vec![vec![0.0; c]; m];
    for i in 0..m {
        for k in 0..c {
            let mut dot = 0.0;
            for l in 0..c {
                dot += aggregated[i][l] * w[l][k];
            }
            out[i][k] = act.apply(dot);
        }
    }
    out
}

/// Transformer cluster mode: attention over projected patches plus a
/// two-layer feed-forward refinement with a residual connection.
///
/// `wq`, `wk`, `wv`, `f1`, `f2` are all `c × c`; projections apply the
/// transposed weight to each row (row · wᵀ), matching a 1x1 convolution.
pub fn eq6_transformer(
    q: &Mat,
    p: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    f1: &Mat,
    f2: &Mat,
    temperature: f64,
) -> Mat {
    let (m, n, c) = (rows(q), rows(p), cols(q));
    let project = |x: &Mat, w: &Mat| -> Mat {
        let mut out = vec![vec![0.0; c]; rows(x)];
        for i in 0..rows(x) {
            for k in 0..c {
                let mut dot = 0.0;
                for l in 0..c {
                    dot += x[i][l] * w[k][l];
                }
                out[i][k] = dot;
            }
        }
        out
    };
    let qp = project(q, wq);
    let kp = project(p, wk);
    let vp = project(p, wv);
    let mut pooled = vec![vec![0.0; c]; m];
    for i in 0..m {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..c {
                dot += qp[i][k] * kp[j][k];
            }
            logits[j] = dot / temperature;
        }
        let aff = softmax_slice(&logits);
        for j in 0..n {
            for k in 0..c {
                pooled[i][k] += aff[j] * vp[j][k];
            }
        }
    }
    // pooled + f2(relu(f1(pooled)))
    let hidden = {
        let mut h = vec![vec![0.0; c]; m];
        for i in 0..m {
            for k in 0..c {
                let mut dot = 0.0;
                for l in 0..c {
                    dot += pooled[i][l] * f1[k][l];
                }
                h[i][k] = if dot > 0.0 { dot } else { 0.0 };
            }
        }
        h
    };
    let mut out = pooled.clone();
    for i in 0..m {
        for k in 0..c {
            let mut dot = 0.0;
            for l in 0..c {
                dot += hidden[i][l] * f2[k][l];
            }
            out[i][k] += dot;
        }
    }
    out
}

/// Per-patch cosine similarity between matching rows of `q` and `cp`.
/// Zero rows score exactly zero.
pub fn eq7_relation_map(q: &Mat, cp: &Mat) -> Vec<f64> {
    let (m, c) = (rows(q), cols(q));
    let mut out = vec![0.0; m];
    for i in 0..m {
        let nq = row_norm(q, i).max(NORM_EPS);
        let ncp = row_norm(cp, i).max(NORM_EPS);
        let mut dot = 0.0;
        for k in 0..c {
            dot += (q[i][k] / nq) * (cp[i][k] / ncp);
        }
        out[i] = dot;
    }
    out
}

/// Element connection: rescale each patch by one plus the softmax of the
/// relation map over patch positions.
pub fn eq7_element_connect(q: &Mat, cp: &Mat) -> Mat {
    let r = eq7_relation_map(q, cp);
    let s = softmax_slice(&r);
    let (m, c) = (rows(q), cols(q));
    let mut out = vec![vec![0.0; c]; m];
    for i in 0..m {
        for k in 0..c {
            out[i][k] = (s[i] + 1.0) * q[i][k];
        }
    }
    out
}

/// Cluster-mode selector plus its parameters, mirroring the main library's
/// configuration but over plain matrices.
#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub temperature: f64,
    pub mode: ClusterModeSpec,
}

#[derive(Debug, Clone)]
pub enum ClusterModeSpec {
    MatMul,
    Cosine,
    MetaGcn { w: Mat, act: Activation },
    Transformer { wq: Mat, wk: Mat, wv: Mat, f1: Mat, f2: Mat },
}

impl ClusterSpec {
    pub fn matmul(temperature: f64) -> Self {
        ClusterSpec { temperature, mode: ClusterModeSpec::MatMul }
    }
    pub fn cosine(temperature: f64) -> Self {
        ClusterSpec { temperature, mode: ClusterModeSpec::Cosine }
    }
}

/// Generic patch-cluster dispatch.
pub fn eq2_patch_cluster(q: &Mat, p: &Mat, spec: &ClusterSpec) -> Mat {
    match &spec.mode {
        ClusterModeSpec::MatMul => eq3_matmul(q, p, spec.temperature),
        ClusterModeSpec::Cosine => eq4_cosine(q, p, spec.temperature),
        ClusterModeSpec::MetaGcn { w, act } => eq5_metagcn(q, p, w, *act, spec.temperature),
        ClusterModeSpec::Transformer { wq, wk, wv, f1, f2 } => {
            eq6_transformer(q, p, wq, wk, wv, f1, f2, spec.temperature)
        }
    }
}

/// Full connection layer: element connection against the clustered patches.
pub fn eq8_cec(q: &Mat, p: &Mat, spec: &ClusterSpec) -> Mat {
    let cp = eq2_patch_cluster(q, p, spec);
    eq7_element_connect(q, &cp)
}

/// Bidirectional connection module: both directions share parameters.
pub fn eq9_cecm(q: &Mat, p: &Mat, spec: &ClusterSpec) -> (Mat, Mat) {
    (eq8_cec(q, p, spec), eq8_cec(p, q, spec))
}

/// Self connection: the feature is both reference and source.
pub fn eq10_self_cecm(q: &Mat, spec: &ClusterSpec) -> Mat {
    eq8_cec(q, q, spec)
}

/// Distance metric: relation map between the rectified query and the
/// clustered rectified support.
pub fn eq11_cecd(qb: &Mat, pb: &Mat, spec: &ClusterSpec) -> Vec<f64> {
    let cp = eq2_patch_cluster(qb, pb, spec);
    eq7_relation_map(qb, &cp)
}

/// Per-patch class probabilities from one relation map per class.
/// `rk[k][n]` is the score of patch n under class k; output is `m × N`.
pub fn eq12_metric_predict(rk: &[Vec<f64>]) -> Mat {
    let n_classes = rk.len();
    let m = rk[0].len();
    let mut out = vec![vec![0.0; n_classes]; m];
    for n in 0..m {
        let mut logits = vec![0.0; n_classes];
        for k in 0..n_classes {
            logits[k] = rk[k][n];
        }
        let probs = softmax_slice(&logits);
        out[n].copy_from_slice(&probs);
    }
    out
}

/// Patch-wise cross-entropy: sum over patches of negative log softmax at the
/// label column, averaged over queries.
pub fn eq13_pce(logits: &[Mat], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (ql, &label) in logits.iter().zip(labels) {
        for row in ql {
            let probs = softmax_slice(row);
            total -= probs[label].max(1e-300).ln();
        }
    }
    total / logits.len() as f64
}

/// Metric loss over per-patch probabilities: negative log likelihood summed
/// over patches, averaged over queries, probabilities clamped at 1e-12.
pub fn eq14_metric_loss(probs: &[Mat], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (qp, &label) in probs.iter().zip(labels) {
        for row in qp {
            total -= row[label].max(1e-12).ln();
        }
    }
    total / probs.len() as f64
}

/// Uncertainty-weighted multi-task objective.
pub fn eq15_multitask(
    loss_metric: f64,
    loss_global: f64,
    loss_rotation: f64,
    lambda: f64,
    alpha_g: f64,
    alpha_r: f64,
) -> f64 {
    let w_g = 1.0 / (2.0 * alpha_g * alpha_g);
    let w_r = 1.0 / (2.0 * alpha_r * alpha_r);
    0.5 * loss_metric
        + (lambda + w_g) * loss_global
        + (1.0 / (lambda + w_g)).ln()
        + (lambda + w_r) * loss_rotation
        + (1.0 / (lambda + w_r)).ln()
}

/// Embedding connection: the source is a learnable bank instead of a
/// support feature.
pub fn eq16_cece(q: &Mat, bank: &Mat, spec: &ClusterSpec) -> Mat {
    eq8_cec(q, bank, spec)
}

/// Classifier head: distance metric with the class-weight rows as the
/// reference and the query patches as the source.
pub fn eq17_cecc(w: &Mat, q: &Mat, spec: &ClusterSpec) -> Vec<f64> {
    eq11_cecd(w, q, spec)
}

/// Equation selector for the string-driven dispatch used by test harnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EquationId {
    Eq1,
    Eq2,
    Eq3,
    Eq4,
    Eq5,
    Eq6,
    Eq7,
    Eq8,
    Eq9,
    Eq10,
    Eq11,
    Eq12,
    Eq13,
    Eq14,
    Eq15,
    Eq16,
    Eq17,
}

impl std::str::FromStr for EquationId {
    type Err = OracleError;
    fn from_str(s: &str) -> Result<Self> {
        use EquationId::*;
        Ok(match s {
            "eq1" => Eq1,
            "eq2" => Eq2,
            "eq3" => Eq3,
            "eq4" => Eq4,
            "eq5" => Eq5,
            "eq6" => Eq6,
            "eq7" => Eq7,
            "eq8" => Eq8,
            "eq9" => Eq9,
            "eq10" => Eq10,
            "eq11" => Eq11,
            "eq12" => Eq12,
            "eq13" => Eq13,
            "eq14" => Eq14,
            "eq15" => Eq15,
            "eq16" => Eq16,
            "eq17" => Eq17,
            other => return Err(OracleError::UnknownEquation(other.to_string())),
        })
    }
}

/// Bag of optional inputs for [`naive_eval`]. Fill in whatever the selected
/// equation needs; missing inputs are reported as errors.
#[derive(Debug, Clone, Default)]
pub struct EquationInputs {
    pub q: Option<Mat>,
    pub p: Option<Mat>,
    pub cluster: Option<ClusterSpec>,
    pub cp: Option<Mat>,
    pub relation_maps: Option<Vec<Vec<f64>>>,
    pub logits: Option<Vec<Mat>>,
    pub probs: Option<Vec<Mat>>,
    pub labels: Option<Vec<usize>>,
    pub scalars: Option<Vec<f64>>,
}

impl EquationInputs {
    fn q(&self) -> Result<&Mat> {
        self.q.as_ref().ok_or(OracleError::MissingInput("q"))
    }
    fn p(&self) -> Result<&Mat> {
        self.p.as_ref().ok_or(OracleError::MissingInput("p"))
    }
    fn cluster(&self) -> Result<&ClusterSpec> {
        self.cluster.as_ref().ok_or(OracleError::MissingInput("cluster"))
    }
}

/// Evaluate one equation on explicit inputs, returning the result flattened
/// to a matrix (vectors become a single row, scalars a 1x1 matrix).
pub fn naive_eval(id: EquationId, inputs: &EquationInputs) -> Result<Mat> {
    use EquationId::*;
    Ok(match id {
        Eq1 => vec![eq1_cross_attention(inputs.q()?, inputs.p()?)],
        Eq2 => eq2_patch_cluster(inputs.q()?, inputs.p()?, inputs.cluster()?),
        Eq3 => eq3_matmul(inputs.q()?, inputs.p()?, inputs.cluster()?.temperature),
        Eq4 => eq4_cosine(inputs.q()?, inputs.p()?, inputs.cluster()?.temperature),
        Eq5 => {
            let spec = inputs.cluster()?;
            match &spec.mode {
                ClusterModeSpec::MetaGcn { w, act } => {
                    eq5_metagcn(inputs.q()?, inputs.p()?, w, *act, spec.temperature)
                }
                _ => return Err(OracleError::MissingInput("metagcn weights")),
            }
        }
        Eq6 => {
            let spec = inputs.cluster()?;
            match &spec.mode {
                ClusterModeSpec::Transformer { wq, wk, wv, f1, f2 } => eq6_transformer(
                    inputs.q()?,
                    inputs.p()?,
                    wq,
                    wk,
                    wv,
                    f1,
                    f2,
                    spec.temperature,
                ),
                _ => return Err(OracleError::MissingInput("transformer weights")),
            }
        }
        Eq7 => {
            let cp = inputs.cp.as_ref().ok_or(OracleError::MissingInput("cp"))?;
            eq7_element_connect(inputs.q()?, cp)
        }
        Eq8 => eq8_cec(inputs.q()?, inputs.p()?, inputs.cluster()?),
        Eq9 => {
            let (qb, pb) = eq9_cecm(inputs.q()?, inputs.p()?, inputs.cluster()?);
            let mut out = qb;
            out.extend(pb);
            out
        }
        Eq10 => eq10_self_cecm(inputs.q()?, inputs.cluster()?),
        Eq11 => vec![eq11_cecd(inputs.q()?, inputs.p()?, inputs.cluster()?)],
        Eq12 => {
            let rk = inputs
                .relation_maps
                .as_ref()
                .ok_or(OracleError::MissingInput("relation_maps"))?;
            eq12_metric_predict(rk)
        }
        Eq13 => {
            let logits = inputs.logits.as_ref().ok_or(OracleError::MissingInput("logits"))?;
            let labels = inputs.labels.as_ref().ok_or(OracleError::MissingInput("labels"))?;
            vec![vec![eq13_pce(logits, labels)]]
        }
        Eq14 => {
            let probs = inputs.probs.as_ref().ok_or(OracleError::MissingInput("probs"))?;
            let labels = inputs.labels.as_ref().ok_or(OracleError::MissingInput("labels"))?;
            vec![vec![eq14_metric_loss(probs, labels)]]
        }
        Eq15 => {
            let s = inputs.scalars.as_ref().ok_or(OracleError::MissingInput("scalars"))?;
            if s.len() != 6 {
                return Err(OracleError::MissingInput("scalars: [lm, lg, lr, lambda, ag, ar]"));
            }
            vec![vec![eq15_multitask(s[0], s[1], s[2], s[3], s[4], s[5])]]
        }
        Eq16 => eq16_cece(inputs.q()?, inputs.p()?, inputs.cluster()?),
        Eq17 => vec![eq17_cecc(inputs.q()?, inputs.p()?, inputs.cluster()?)],
    })
}

/// Central finite differences of a scalar function at `x`.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let hi = f(&probe);
        probe[i] = orig - h;
        let lo = f(&probe);
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(OracleError::NonFinite(i));
        }
        grad[i] = (hi - lo) / (2.0 * h);
    }
    Ok(grad)
}

/// Error summary for one checked operation.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleReport {
    /// Compare two flat slices under an absolute tolerance.
    pub fn compare(name: &str, got: &[f64], want: &[f64], tolerance: f64) -> Self {
        assert_eq!(got.len(), want.len(), "oracle comparison length mismatch");
        let mut max_abs = 0.0_f64;
        let mut max_rel = 0.0_f64;
        for (&g, &w) in got.iter().zip(want) {
            let abs = (g - w).abs();
            let rel = abs / w.abs().max(1.0);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        OracleReport {
            name: name.to_string(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            tolerance,
            passed: max_abs <= tolerance,
        }
    }
}

/// Relative error between two gradient vectors, scaled by the larger norm.
/// Returns zero when both are (near) zero.
pub fn gradient_rel_error(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let mut diff = 0.0;
    let mut norm_g = 0.0;
    let mut norm_w = 0.0;
    for (&g, &w) in got.iter().zip(want) {
        diff += (g - w) * (g - w);
        norm_g += g * g;
        norm_w += w * w;
    }
    let denom = norm_g.sqrt() + norm_w.sqrt();
    if denom < 1e-12 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
