//! The episodic pipeline: base training with the multi-task objective,
//! novel fine-tuning of a small head over a frozen embedding, inference
//! combining metric and fine-tune predictions, and evaluation with mean
//! accuracy and a confidence interval.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{cecd, cecm, self_cecm};
use crate::checkpoint::{Entry, Snapshot};
use crate::cluster::{
    cross_attention_baseline, patch_cluster, uniform_fan, ClusterMode, ClusterParams,
};
use crate::config::{AttentionKind, LossBalance, MetricKind, RunConfig};
use crate::connect::{relation_map, rescale_by_relation, FeatureMap, RelationMap};
use crate::encoder::{encode, EncoderParams};
use crate::episode::{compute_prototypes, rotate_queries, sample_episode, Episode};
use crate::error::{CecError, Result};
use crate::loss::{aux_losses, metric_loss, metric_probs_from_relations, multitask_loss, pce_loss, TaskWeights};
use crate::scalar::Scalar;
use crate::synth::{mix_seed, Catalog, SynthDataset};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction. Moments live per named parameter and are part
/// of the checkpoint so continuation is exact.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, moments: BTreeMap::new() }
    }

    /// One update for one parameter at global step `t` (1-based).
    pub fn update(&mut self, name: &str, t: u64, value: &[S], grad: &[S]) -> Vec<S> {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![S::zero(); value.len()], vec![S::zero(); value.len()]));
        let b1 = S::from_f64_c(self.beta1);
        let b2 = S::from_f64_c(self.beta2);
        let lr = S::from_f64_c(self.learning_rate);
        let eps = S::from_f64_c(self.eps);
        let c1 = S::one() - S::from_f64_c(self.beta1.powi(t as i32));
        let c2 = S::one() - S::from_f64_c(self.beta2.powi(t as i32));
        let mut out = Vec::with_capacity(value.len());
        for i in 0..value.len() {
            m[i] = b1 * m[i] + (S::one() - b1) * grad[i];
            v[i] = b2 * v[i] + (S::one() - b2) * grad[i] * grad[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            out.push(value[i] - lr * m_hat / (v_hat.sqrt() + eps));
        }
        out
    }

    fn export(&self, snap: &mut Snapshot) {
        for (name, (m, v)) in &self.moments {
            snap.insert(
                format!("adam.m.{name}"),
                Entry::vector(m.iter().map(|x| x.to_f64_c()).collect()),
            );
            snap.insert(
                format!("adam.v.{name}"),
                Entry::vector(v.iter().map(|x| x.to_f64_c()).collect()),
            );
        }
    }

    fn import(&mut self, snap: &Snapshot) {
        self.moments.clear();
        for (name, entry) in &snap.entries {
            if let Some(param) = name.strip_prefix("adam.m.") {
                let m: Vec<S> = entry.data.iter().map(|&x| S::from_f64_c(x)).collect();
                let v_entry = snap.entries.get(&format!("adam.v.{param}"));
                if let Some(v_entry) = v_entry {
                    let v: Vec<S> = v_entry.data.iter().map(|&x| S::from_f64_c(x)).collect();
                    self.moments.insert(param.to_string(), (m, v));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Train state

/// Everything base training touches: embedding, connection weights,
/// auxiliary heads, task weights, optimizer moments, step counter, and the
/// sampling generator. Serializable and exactly restorable.
#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar> {
    pub encoder: EncoderParams<S>,
    pub attention: AttentionKind,
    pub metric: MetricKind,
    pub cecm_params: Option<ClusterParams<S>>,
    pub cecd_params: Option<ClusterParams<S>>,
    pub w_global: Tensor<S>,
    pub w_rotation: Tensor<S>,
    pub task: TaskWeights<S>,
    pub balance: LossBalance,
    pub optimizer: Adam<S>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub global_classes: usize,
}

/// Per-step loss breakdown, one CSV row per training step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: u64,
    pub total: f64,
    pub metric: f64,
    pub global: f64,
    pub rotation: f64,
    pub alpha_g: f64,
    pub alpha_r: f64,
    pub clamped: usize,
}

pub const METRICS_CSV_HEADER: &str = "step,loss_total,loss_M,loss_G,loss_R,alpha_G,alpha_R";

impl StepStats {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.total, self.metric, self.global, self.rotation, self.alpha_g,
            self.alpha_r
        )
    }
}

impl<S: Scalar> TrainState<S> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Self::with_balance(cfg, LossBalance::Uncertainty { lambda: cfg.lambda })
    }

    pub fn with_balance(cfg: &RunConfig, balance: LossBalance) -> Result<Self> {
        cfg.validate()?;
        let catalog = Catalog::parse(&cfg.catalog_version)?;
        let global_classes = catalog.base_classes().len();
        let attention = cfg.attention_kind()?;
        let metric = cfg.metric_kind()?;
        let c = cfg.encoder_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = EncoderParams::new(c, &mut rng)?;
        let cecm_params = match attention {
            AttentionKind::Cecm(mode) => {
                Some(ClusterParams::for_mode(mode, c, cfg.temperature, &mut rng))
            }
            _ => None,
        };
        let cecd_params = match metric {
            MetricKind::Cecd(mode) => {
                Some(ClusterParams::for_mode(mode, c, cfg.temperature, &mut rng))
            }
            _ => None,
        };
        let w_global = uniform_fan(global_classes, c, &mut rng);
        let w_rotation = uniform_fan(4, c, &mut rng);
        Ok(TrainState {
            encoder,
            attention,
            metric,
            cecm_params,
            cecd_params,
            w_global,
            w_rotation,
            task: TaskWeights::new(cfg.lambda),
            balance,
            optimizer: Adam::new(cfg.learning_rate),
            step: 0,
            rng,
            global_classes,
        })
    }

    /// All learnable parameters with stable names, in update order.
    pub fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (name, t) in self.encoder.named_params() {
            out.push((format!("encoder.{name}"), t));
        }
        if let Some(p) = &self.cecm_params {
            for (name, t) in p.named_params() {
                out.push((format!("cecm.{name}"), t));
            }
        }
        if let Some(p) = &self.cecd_params {
            for (name, t) in p.named_params() {
                out.push((format!("cecd.{name}"), t));
            }
        }
        out.push(("w_global".into(), self.w_global.clone()));
        out.push(("w_rotation".into(), self.w_rotation.clone()));
        out.push(("alpha_g".into(), self.task.alpha_g.clone()));
        out.push(("alpha_r".into(), self.task.alpha_r.clone()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (name, t) in self.encoder.params_mut() {
            out.push((format!("encoder.{name}"), t));
        }
        if let Some(p) = self.cecm_params.as_mut() {
            for (name, t) in p.params_mut() {
                out.push((format!("cecm.{name}"), t));
            }
        }
        if let Some(p) = self.cecd_params.as_mut() {
            for (name, t) in p.params_mut() {
                out.push((format!("cecd.{name}"), t));
            }
        }
        out.push(("w_global".into(), &mut self.w_global));
        out.push(("w_rotation".into(), &mut self.w_rotation));
        for (name, t) in self.task.params_mut() {
            out.push((name.to_string(), t));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    // -- forward pieces --------------------------------------------------

    /// Attention stage over one (query, prototype) pair.
    fn attention_stage(
        &self,
        q: &FeatureMap<S>,
        p: &FeatureMap<S>,
    ) -> Result<(FeatureMap<S>, FeatureMap<S>)> {
        match self.attention {
            AttentionKind::None => Ok((q.clone(), p.clone())),
            AttentionKind::Cross => {
                let rq = cross_attention_baseline(q, p)?;
                let rp = cross_attention_baseline(p, q)?;
                Ok((rescale_by_relation(q, &rq)?, rescale_by_relation(p, &rp)?))
            }
            AttentionKind::Cecm(_) => {
                let params = self.cecm_params.as_ref().ok_or_else(|| {
                    CecError::Configuration("attention is cecm but weights are missing".into())
                })?;
                cecm(q, p, params)
            }
        }
    }

    /// Distance map over one rectified (query, prototype) pair. The cosine
    /// baseline compares mean-pooled features (the prototype-network
    /// reading), broadcast to every patch so the patch-wise classifier sees
    /// a uniform map.
    fn metric_relation(
        &self,
        qb: &FeatureMap<S>,
        pb: &FeatureMap<S>,
    ) -> Result<RelationMap<S>> {
        match self.metric {
            MetricKind::Cosine => {
                let eps = S::from_f64_c(crate::NORM_EPS);
                let q_pooled = qb.tensor().mean_rows()?.l2_normalize_rows(eps)?;
                let p_pooled = pb.tensor().mean_rows()?.l2_normalize_rows(eps)?;
                let score = q_pooled.matmul_nt(&p_pooled)?.reshape(vec![1])?;
                Ok(RelationMap(score.broadcast_scalar(qb.rows())?))
            }
            MetricKind::Cecd(_) => {
                let params = self.cecd_params.as_ref().ok_or_else(|| {
                    CecError::Configuration("metric is cecd but weights are missing".into())
                })?;
                cecd(qb, pb, params)
            }
        }
    }

    /// Per-patch class probabilities for one query against all prototypes,
    /// along with the rectified query per class (for the auxiliary heads).
    fn query_probs(
        &self,
        q: &FeatureMap<S>,
        prototypes: &[FeatureMap<S>],
    ) -> Result<(Tensor<S>, Vec<FeatureMap<S>>)> {
        let mut relations = Vec::with_capacity(prototypes.len());
        let mut qbars = Vec::with_capacity(prototypes.len());
        for proto in prototypes {
            let (qb, pb) = self.attention_stage(q, proto)?;
            relations.push(self.metric_relation(&qb, &pb)?);
            qbars.push(qb);
        }
        Ok((metric_probs_from_relations(&relations)?, qbars))
    }

    /// The relation map highlighting where a query agrees with a prototype,
    /// used for export and localization checks.
    pub fn relation_map_for(
        &self,
        q: &FeatureMap<S>,
        proto: &FeatureMap<S>,
    ) -> Result<RelationMap<S>> {
        match (&self.attention, &self.metric) {
            (AttentionKind::Cecm(_), _) => {
                let params = self.cecm_params.as_ref().unwrap();
                let cp = patch_cluster(q, proto, params)?;
                relation_map(q, &cp)
            }
            (AttentionKind::Cross, _) => cross_attention_baseline(q, proto),
            (AttentionKind::None, _) => {
                let (qb, pb) = self.attention_stage(q, proto)?;
                self.metric_relation(&qb, &pb)
            }
        }
    }

    /// Copy with every parameter detached: forward passes build no backward
    /// closures. Used for inference and evaluation.
    pub fn inference_view(&self) -> Self {
        TrainState {
            encoder: self.encoder.detached(),
            attention: self.attention,
            metric: self.metric,
            cecm_params: self.cecm_params.as_ref().map(ClusterParams::detached),
            cecd_params: self.cecd_params.as_ref().map(ClusterParams::detached),
            w_global: self.w_global.detach(),
            w_rotation: self.w_rotation.detach(),
            task: self.task.clone(),
            balance: self.balance,
            optimizer: Adam::new(self.optimizer.learning_rate),
            step: self.step,
            rng: self.rng.clone(),
            global_classes: self.global_classes,
        }
    }

    // -- training ----------------------------------------------------------

    /// One base-training step on one episode: forward through prototypes,
    /// attention, metric and auxiliary heads, one backward sweep, one Adam
    /// update. Deterministic given the state.
    pub fn base_train_step(&mut self, episode: &Episode) -> Result<StepStats> {
        let rotated = rotate_queries(&episode.queries);
        let mut support_features = Vec::with_capacity(episode.support.len());
        for shots in &episode.support {
            let feats = shots
                .iter()
                .map(|img| encode(&img.to_tensor(), &self.encoder))
                .collect::<Result<Vec<_>>>()?;
            support_features.push(feats);
        }
        let prototypes = compute_prototypes(&support_features)?;

        let mut probs = Vec::with_capacity(rotated.len());
        let mut qbar_star = Vec::with_capacity(rotated.len());
        let mut fewshot_labels = Vec::with_capacity(rotated.len());
        let mut bundles = Vec::with_capacity(rotated.len());
        for (img, labels) in &rotated {
            labels.validate(episode.n_way, self.global_classes)?;
            let q = encode(&img.to_tensor(), &self.encoder)?;
            let (p, qbars) = self.query_probs(&q, &prototypes)?;
            probs.push(p);
            qbar_star.push(qbars[labels.fewshot].clone());
            fewshot_labels.push(labels.fewshot);
            bundles.push(*labels);
        }

        let (l_m, clamped) = metric_loss(&probs, &fewshot_labels)?;
        let (l_g, l_r) = aux_losses(&qbar_star, &bundles, &self.w_global, &self.w_rotation)?;
        let total = match self.balance {
            LossBalance::Uncertainty { .. } => multitask_loss(&l_m, &l_g, &l_r, &self.task)?,
            LossBalance::Fixed { global, rotation } => {
                let mut acc = l_m.scale(S::from_f64_c(0.5));
                if global != 0.0 {
                    acc = acc.add(&l_g.scale(S::from_f64_c(global)))?;
                }
                if rotation != 0.0 {
                    acc = acc.add(&l_r.scale(S::from_f64_c(rotation)))?;
                }
                acc
            }
        };

        let stats = StepStats {
            step: self.step + 1,
            total: total.item()?.to_f64_c(),
            metric: l_m.item()?.to_f64_c(),
            global: l_g.item()?.to_f64_c(),
            rotation: l_r.item()?.to_f64_c(),
            alpha_g: self.task.alpha_g.item()?.to_f64_c(),
            alpha_r: self.task.alpha_r.item()?.to_f64_c(),
            clamped,
        };
        if !stats.total.is_finite() {
            return Err(CecError::Training(format!(
                "non-finite loss {} at step {}",
                stats.total, stats.step
            )));
        }

        total.backward()?;
        let t = self.step + 1;
        let mut updates: Vec<(String, Option<Vec<S>>)> = Vec::new();
        {
            let mut optimizer = std::mem::replace(&mut self.optimizer, Adam::new(0.0));
            for (name, tensor) in self.named_params() {
                let next = tensor
                    .grad()
                    .map(|g| optimizer.update(&name, t, tensor.data(), &g));
                updates.push((name, next));
            }
            self.optimizer = optimizer;
        }
        for ((name, slot), (uname, next)) in self.params_mut().into_iter().zip(updates) {
            debug_assert_eq!(name, uname);
            if let Some(data) = next {
                *slot = Tensor::param(slot.shape().to_vec(), data)?;
            }
        }
        self.step = t;
        Ok(stats)
    }

    // -- persistence -------------------------------------------------------

    pub fn snapshot(&self) -> Snapshot {
        let mut snap = Snapshot::default();
        for (name, t) in self.named_params() {
            snap.insert(
                format!("param.{name}"),
                Entry {
                    dims: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.to_f64_c()).collect(),
                },
            );
        }
        self.optimizer.export(&mut snap);
        snap.insert("meta.step", Entry::scalar(self.step as f64));
        let seed = self.rng.get_seed();
        snap.insert("rng.seed", Entry::vector(seed.iter().map(|&b| b as f64).collect()));
        let pos = self.rng.get_word_pos();
        snap.insert(
            "rng.word_pos",
            Entry::vector(
                (0..4).map(|i| ((pos >> (32 * i)) & 0xffff_ffff) as f64).collect(),
            ),
        );
        let stream = self.rng.get_stream();
        snap.insert(
            "rng.stream",
            Entry::vector(
                (0..2).map(|i| ((stream >> (32 * i)) & 0xffff_ffff) as f64).collect(),
            ),
        );
        snap
    }

    pub fn restore(cfg: &RunConfig, snap: &Snapshot) -> Result<Self> {
        let mut state = Self::new(cfg)?;
        let updates: Vec<(String, Vec<S>)> = {
            let mut out = Vec::new();
            for (name, tensor) in state.named_params() {
                let entry = snap.get(&format!("param.{name}"))?;
                if entry.dims != tensor.shape() {
                    return Err(CecError::Format(format!(
                        "checkpoint entry '{name}' has dims {:?}, expected {:?}",
                        entry.dims,
                        tensor.shape()
                    )));
                }
                out.push((name, entry.data.iter().map(|&v| S::from_f64_c(v)).collect()));
            }
            out
        };
        for ((name, slot), (uname, data)) in state.params_mut().into_iter().zip(updates) {
            debug_assert_eq!(name, uname);
            *slot = Tensor::param(slot.shape().to_vec(), data)?;
        }
        state.optimizer.import(snap);
        state.step = snap.get("meta.step")?.data[0] as u64;

        let seed_entry = snap.get("rng.seed")?;
        if seed_entry.data.len() != 32 {
            return Err(CecError::Format("rng.seed must hold 32 bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (b, &v) in seed.iter_mut().zip(&seed_entry.data) {
            *b = v as u8;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        let stream_limbs = &snap.get("rng.stream")?.data;
        let stream = (stream_limbs[0] as u64) | ((stream_limbs[1] as u64) << 32);
        rng.set_stream(stream);
        let pos_limbs = &snap.get("rng.word_pos")?.data;
        let mut pos: u128 = 0;
        for (i, &v) in pos_limbs.iter().enumerate() {
            pos |= (v as u128) << (32 * i);
        }
        rng.set_word_pos(pos);
        state.rng = rng;
        Ok(state)
    }
}

// ---------------------------------------------------------------------------
// Fine-tune head

/// The novel-stage classifier: self connection plus a linear layer, trained
/// on the episode's support items while the embedding stays frozen.
#[derive(Debug, Clone)]
pub struct FinetuneHead<S: Scalar> {
    pub cluster: ClusterParams<S>,
    pub w_f: Tensor<S>,
}

impl<S: Scalar> FinetuneHead<S> {
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (name, t) in self.cluster.params_mut() {
            out.push((format!("head.{name}"), t));
        }
        out.push(("head.w_f".into(), &mut self.w_f));
        out
    }

    fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (name, t) in self.cluster.named_params() {
            out.push((format!("head.{name}"), t));
        }
        out.push(("head.w_f".into(), self.w_f.clone()));
        out
    }

    /// Patch-wise class logits of the head.
    pub fn logits(&self, features: &FeatureMap<S>) -> Result<Tensor<S>> {
        let enhanced = self_cecm(features, &self.cluster)?;
        enhanced.tensor().matmul_nt(&self.w_f)
    }
}

/// Options controlling novel fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl<S: Scalar> TrainState<S> {
    /// Train a fine-tune head on the episode's support items. The embedding
    /// is frozen: support features are computed once through detached
    /// encoder weights and reused every step.
    pub fn novel_finetune(
        &self,
        episode: &Episode,
        opts: FinetuneOptions,
    ) -> Result<FinetuneHead<S>> {
        let frozen = self.encoder.detached();
        let mut features = Vec::with_capacity(episode.support_size());
        let mut labels = Vec::with_capacity(episode.support_size());
        for (class_idx, shots) in episode.support.iter().enumerate() {
            for img in shots {
                features.push(encode(&img.to_tensor(), &frozen)?);
                labels.push(class_idx);
            }
        }
        let channels = self.encoder.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mode = match self.attention {
            AttentionKind::Cecm(mode) => mode,
            _ => ClusterMode::MatMul,
        };
        let temperature = self
            .cecm_params
            .as_ref()
            .map(|p| p.temperature.to_f64_c())
            .unwrap_or(1.0);
        let mut head = FinetuneHead {
            cluster: ClusterParams::for_mode(mode, channels, temperature, &mut rng),
            w_f: uniform_fan(episode.n_way, channels, &mut rng),
        };
        let mut optimizer = Adam::new(opts.learning_rate);
        for t in 1..=opts.steps {
            let logits = features
                .iter()
                .map(|f| head.logits(f))
                .collect::<Result<Vec<_>>>()?;
            let loss = pce_loss(&logits, &labels)?;
            if !loss.item()?.is_finite() {
                return Err(CecError::Training(format!(
                    "non-finite fine-tune loss at step {t}"
                )));
            }
            loss.backward()?;
            let mut updates = Vec::new();
            for (name, tensor) in head.named_params() {
                let next = tensor
                    .grad()
                    .map(|g| optimizer.update(&name, t as u64, tensor.data(), &g));
                updates.push(next);
            }
            for ((_, slot), next) in head.params_mut().into_iter().zip(updates) {
                if let Some(data) = next {
                    *slot = Tensor::param(slot.shape().to_vec(), data)?;
                }
            }
        }
        Ok(head)
    }
}

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Per-query inference outputs: both prediction spaces, their sum, and the
/// argmax decision.
#[derive(Debug, Clone)]
pub struct QueryInference {
    pub y_metric: Vec<f64>,
    pub y_finetune: Option<Vec<f64>>,
    pub combined: Vec<f64>,
    pub predicted: usize,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> TrainState<S> {
    /// Queries are classified by averaging per-patch metric probabilities;
    /// with a head present, the softmax of its patch-averaged logits is
    /// added. Call on an [`TrainState::inference_view`] to skip gradient
    /// bookkeeping.
    pub fn infer(
        &self,
        head: Option<&FinetuneHead<S>>,
        episode: &Episode,
    ) -> Result<Vec<QueryInference>> {
        let mut support_features = Vec::with_capacity(episode.support.len());
        for shots in &episode.support {
            let feats = shots
                .iter()
                .map(|img| encode(&img.to_tensor(), &self.encoder))
                .collect::<Result<Vec<_>>>()?;
            support_features.push(feats);
        }
        let prototypes = compute_prototypes(&support_features)?;

        let mut out = Vec::with_capacity(episode.queries.len());
        for (img, _) in &episode.queries {
            let q = encode(&img.to_tensor(), &self.encoder)?;
            let (probs, _) = self.query_probs(&q, &prototypes)?;
            let y_metric: Vec<f64> = probs
                .mean_rows()?
                .data()
                .iter()
                .map(|v| v.to_f64_c())
                .collect();
            let y_finetune = match head {
                Some(head) => {
                    let logits = head.logits(&q)?;
                    let pooled = logits.mean_rows()?;
                    let soft = pooled.softmax_rows(S::one())?;
                    Some(soft.data().iter().map(|v| v.to_f64_c()).collect::<Vec<f64>>())
                }
                None => None,
            };
            let combined: Vec<f64> = match &y_finetune {
                Some(yf) => y_metric.iter().zip(yf).map(|(a, b)| a + b).collect(),
                None => y_metric.clone(),
            };
            let predicted = argmax(&combined);
            out.push(QueryInference { y_metric, y_finetune, combined, predicted });
        }
        Ok(out)
    }
}

/// Accuracy summary over evaluation episodes.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    /// Per-episode accuracy rows under the `episode,acc` schema.
    pub fn csv(&self) -> String {
        let mut out = String::from("episode,acc\n");
        for (i, acc) in self.per_episode.iter().enumerate() {
            out.push_str(&format!("{i},{acc}\n"));
        }
        out
    }
}

pub fn accuracy_report(per_episode: &[f64]) -> EvalReport {
    let n = per_episode.len();
    let mean = per_episode.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / (n as f64 - 1.0);
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    EvalReport { mean_accuracy: mean, ci95, episodes: n, per_episode: per_episode.to_vec() }
}

/// Evaluation options: episode geometry plus optional fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub seed: u64,
    pub finetune: Option<FinetuneOptions>,
}

/// Metric-only accuracy, plus combined accuracy when fine-tuning ran.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub metric: EvalReport,
    pub combined: Option<EvalReport>,
}

impl<S: Scalar> TrainState<S> {
    /// Evaluate over freshly sampled episodes from the given class pool.
    /// Every episode draws from its own generator stream derived from the
    /// evaluation seed, so results do not depend on evaluation order.
    pub fn evaluate(
        &self,
        dataset: &SynthDataset,
        class_pool: &[usize],
        opts: &EvalOptions,
    ) -> Result<EvalOutcome> {
        if opts.episodes < 1 {
            return Err(CecError::Parameter("evaluation needs at least one episode".into()));
        }
        let view = self.inference_view();
        let mut metric_acc = Vec::with_capacity(opts.episodes);
        let mut combined_acc = Vec::with_capacity(opts.episodes);
        for index in 0..opts.episodes {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, index as u64]));
            let episode = sample_episode(
                dataset,
                class_pool,
                opts.n_way,
                opts.k_shot,
                opts.n_way * opts.queries_per_class,
                &mut rng,
            )?;
            let head = match opts.finetune {
                Some(ft) => Some(view.novel_finetune(
                    &episode,
                    FinetuneOptions { seed: mix_seed(&[ft.seed, index as u64]), ..ft },
                )?),
                None => None,
            };
            let metric_only = view.infer(None, &episode)?;
            let correct = episode
                .queries
                .iter()
                .zip(&metric_only)
                .filter(|((_, l), inf)| inf.predicted == l.fewshot)
                .count();
            metric_acc.push(correct as f64 / episode.queries.len() as f64 * 100.0);
            if let Some(head) = &head {
                let with_head = view.infer(Some(head), &episode)?;
                let correct = episode
                    .queries
                    .iter()
                    .zip(&with_head)
                    .filter(|((_, l), inf)| inf.predicted == l.fewshot)
                    .count();
                combined_acc.push(correct as f64 / episode.queries.len() as f64 * 100.0);
            }
        }
        Ok(EvalOutcome {
            metric: accuracy_report(&metric_acc),
            combined: if combined_acc.is_empty() {
                None
            } else {
                Some(accuracy_report(&combined_acc))
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Full runs

/// Run base training for the configured number of episodes, collecting one
/// stats row per step.
pub fn train_run<S: Scalar>(cfg: &RunConfig) -> Result<(TrainState<S>, Vec<StepStats>)> {
    train_run_with_balance(cfg, LossBalance::Uncertainty { lambda: cfg.lambda })
}

pub fn train_run_with_balance<S: Scalar>(
    cfg: &RunConfig,
    balance: LossBalance,
) -> Result<(TrainState<S>, Vec<StepStats>)> {
    let mut state = TrainState::<S>::with_balance(cfg, balance)?;
    let catalog = Catalog::parse(&cfg.catalog_version)?;
    let dataset = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
    let base = catalog.base_classes().to_vec();
    let mut records = Vec::with_capacity(cfg.train_episodes);
    for _ in 0..cfg.train_episodes {
        let episode = sample_episode(
            &dataset,
            &base,
            cfg.n_way,
            cfg.k_shot,
            cfg.n_way * cfg.queries_per_class,
            &mut state.rng,
        )?;
        let stats = state.base_train_step(&episode)?;
        records.push(stats);
    }
    Ok((state, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LabelBundle;

    fn tiny_config() -> RunConfig {
        RunConfig {
            dataset_seed: 11,
            n_way: 2,
            k_shot: 1,
            queries_per_class: 1,
            train_episodes: 3,
            eval_episodes: 4,
            attention: "cecm-matmul".into(),
            metric: "cecd-cosine".into(),
            encoder_channels: 4,
            items_per_class: 6,
            seed: 5,
            ..RunConfig::default()
        }
    }

    fn episode_for(cfg: &RunConfig, state: &mut TrainState<f64>) -> Episode {
        let catalog = Catalog::parse(&cfg.catalog_version).unwrap();
        let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
        sample_episode(
            &ds,
            &catalog.base_classes().to_vec(),
            cfg.n_way,
            cfg.k_shot,
            cfg.n_way * cfg.queries_per_class,
            &mut state.rng,
        )
        .unwrap()
    }

    #[test]
    fn training_step_is_deterministic() {
        let cfg = tiny_config();
        let run = || {
            let mut state = TrainState::<f64>::new(&cfg).unwrap();
            let ep = episode_for(&cfg, &mut state);
            let s1 = state.base_train_step(&ep).unwrap();
            let ep2 = episode_for(&cfg, &mut state);
            let s2 = state.base_train_step(&ep2).unwrap();
            (s1.total, s2.total)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn losses_stay_finite_over_smoke_run() {
        let cfg = RunConfig { train_episodes: 20, ..tiny_config() };
        let (_, records) = train_run::<f64>(&cfg).unwrap();
        assert_eq!(records.len(), 20);
        for r in &records {
            assert!(r.total.is_finite() && r.metric.is_finite());
        }
    }

    #[test]
    fn alpha_receives_gradient() {
        let cfg = tiny_config();
        let mut state = TrainState::<f64>::new(&cfg).unwrap();
        let before = state.task.alpha_g.item().unwrap();
        let ep = episode_for(&cfg, &mut state);
        let stats = state.base_train_step(&ep).unwrap();
        assert!(stats.global > 0.0);
        let after = state.task.alpha_g.item().unwrap();
        assert_ne!(before, after, "alpha did not move despite positive loss");
    }

    #[test]
    fn snapshot_restore_continues_bit_identically() {
        let cfg = RunConfig { train_episodes: 2, ..tiny_config() };
        let (mut state, _) = train_run::<f64>(&cfg).unwrap();
        let snap = state.snapshot();

        let mut restored = TrainState::<f64>::restore(&cfg, &snap).unwrap();
        for _ in 0..3 {
            let ep_a = {
                let catalog = Catalog::parse(&cfg.catalog_version).unwrap();
                let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
                sample_episode(&ds, &catalog.base_classes().to_vec(), 2, 1, 2, &mut state.rng)
                    .unwrap()
            };
            let ep_b = {
                let catalog = Catalog::parse(&cfg.catalog_version).unwrap();
                let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
                sample_episode(&ds, &catalog.base_classes().to_vec(), 2, 1, 2, &mut restored.rng)
                    .unwrap()
            };
            let sa = state.base_train_step(&ep_a).unwrap();
            let sb = restored.base_train_step(&ep_b).unwrap();
            assert_eq!(sa.total.to_bits(), sb.total.to_bits(), "divergence after restore");
        }
        for ((na, ta), (nb, tb)) in state.named_params().iter().zip(restored.named_params()) {
            assert_eq!(na, &nb);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {na} differs");
            }
        }
    }

    #[test]
    fn finetune_freezes_encoder_and_fits_support() {
        // easy data: centered, large, shape- and color-distinct classes
        let catalog = Catalog::parse("v1").unwrap();
        let easy_shots = |class: usize| -> Vec<crate::synth::SynthImage> {
            let mut shots = Vec::new();
            let mut seed = 0u64;
            while shots.len() < 5 {
                let img = crate::synth::gen_image(
                    &catalog,
                    class,
                    seed,
                    crate::synth::PlacementPolicy::Centered,
                )
                .unwrap();
                if img.placement.scale >= 0.45 {
                    shots.push(img);
                }
                seed += 1;
            }
            shots
        };
        let support = vec![easy_shots(1), easy_shots(13)];
        let queries = vec![(
            support[0][0].clone(),
            LabelBundle { fewshot: 0, global: 0, rotation: 0 },
        )];
        let ep = Episode {
            n_way: 2,
            k_shot: 5,
            support,
            queries,
            class_ids: vec![1, 13],
            global_ids: vec![0, 1],
        };

        let cfg = RunConfig {
            k_shot: 5,
            items_per_class: 10,
            train_episodes: 60,
            encoder_channels: 8,
            ..tiny_config()
        };
        let (state, _) = train_run::<f64>(&cfg).unwrap();
        let before: Vec<Vec<u64>> = state
            .encoder
            .named_params()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let head = state
            .novel_finetune(&ep, FinetuneOptions { steps: 50, learning_rate: 1e-2, seed: 3 })
            .unwrap();
        let after: Vec<Vec<u64>> = state
            .encoder
            .named_params()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "encoder moved during fine-tuning");

        let frozen = state.encoder.detached();
        let mut correct = 0;
        let mut total = 0;
        for (class_idx, shots) in ep.support.iter().enumerate() {
            for img in shots {
                let f = encode(&img.to_tensor(), &frozen).unwrap();
                let logits = head.logits(&f).unwrap();
                let pooled = logits.mean_rows().unwrap();
                if argmax(&pooled.data().iter().map(|v| *v).collect::<Vec<f64>>()) == class_idx {
                    correct += 1;
                }
                total += 1;
            }
        }
        assert_eq!(correct, total, "support set not fit after 50 steps");
    }

    #[test]
    fn zero_step_finetune_is_initialization() {
        let cfg = tiny_config();
        let mut state = TrainState::<f64>::new(&cfg).unwrap();
        let ep = episode_for(&cfg, &mut state);
        let a = state
            .novel_finetune(&ep, FinetuneOptions { steps: 0, learning_rate: 1e-2, seed: 9 })
            .unwrap();
        let b = state
            .novel_finetune(&ep, FinetuneOptions { steps: 0, learning_rate: 1e-2, seed: 9 })
            .unwrap();
        assert_eq!(a.w_f.data(), b.w_f.data());
    }

    #[test]
    fn inference_without_head_is_metric_only() {
        let cfg = tiny_config();
        let mut state = TrainState::<f64>::new(&cfg).unwrap();
        let ep = episode_for(&cfg, &mut state);
        let view = state.inference_view();
        let results = view.infer(None, &ep).unwrap();
        for r in &results {
            assert!(r.y_finetune.is_none());
            assert_eq!(r.y_metric, r.combined);
            let sum: f64 = r.y_metric.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert_eq!(r.predicted, argmax(&r.y_metric));
        }
    }

    #[test]
    fn combined_components_are_normalized() {
        let cfg = tiny_config();
        let mut state = TrainState::<f64>::new(&cfg).unwrap();
        let ep = episode_for(&cfg, &mut state);
        let view = state.inference_view();
        let head = view
            .novel_finetune(&ep, FinetuneOptions { steps: 5, learning_rate: 1e-2, seed: 1 })
            .unwrap();
        let results = view.infer(Some(&head), &ep).unwrap();
        for r in &results {
            let ym: f64 = r.y_metric.iter().sum();
            let yf: f64 = r.y_finetune.as_ref().unwrap().iter().sum();
            assert!((ym - 1.0).abs() < 1e-9);
            assert!((yf - 1.0).abs() < 1e-9);
            for &v in &r.combined {
                assert!((0.0..=2.0).contains(&v));
            }
        }
    }

    #[test]
    fn evaluation_is_reproducible() {
        let cfg = tiny_config();
        let state = TrainState::<f64>::new(&cfg).unwrap();
        let catalog = Catalog::parse(&cfg.catalog_version).unwrap();
        let ds = SynthDataset::new(cfg.dataset_seed, catalog.clone(), cfg.items_per_class);
        let opts = EvalOptions {
            episodes: 4,
            n_way: 2,
            k_shot: 1,
            queries_per_class: 2,
            seed: 77,
            finetune: None,
        };
        let a = state.evaluate(&ds, catalog.novel_classes(), &opts).unwrap();
        let b = state.evaluate(&ds, catalog.novel_classes(), &opts).unwrap();
        assert_eq!(a.metric.mean_accuracy.to_bits(), b.metric.mean_accuracy.to_bits());
        assert_eq!(a.metric.ci95.to_bits(), b.metric.ci95.to_bits());
    }

    #[test]
    fn csv_line_layout() {
        let s = StepStats {
            step: 3,
            total: 1.5,
            metric: 0.5,
            global: 0.75,
            rotation: 0.25,
            alpha_g: 1.0,
            alpha_r: 0.9,
            clamped: 0,
        };
        assert_eq!(s.csv_line(), "3,1.5,0.5,0.75,0.25,1,0.9");
        assert_eq!(METRICS_CSV_HEADER.split(',').count(), s.csv_line().split(',').count());
    }
}
