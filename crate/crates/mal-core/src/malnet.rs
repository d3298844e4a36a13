//! The multi-attribution model: shared bottom, per-mechanism prediction
//! towers plus a CAT tower (the attribution knowledge aggregator), and a
//! primary-target head that fuses the concatenated tower knowledge into
//! its own representation by element-wise addition.
//!
//! Ablation variants share parameter naming with the full model, so
//! same-named parameters initialize identically across variants for a
//! given seed.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attribution::{FeatureVocab, MechanismTag, Sample, SampleSet};
use crate::digest::fnv64;
use crate::graph::{NodeId, Tape};
use crate::optim::{AdamHyper, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::{sigmoid, Tensor};
use crate::{MalError, Result};

const TAG_PARAM_INIT: u64 = 0x696e_6974;
const TAG_SHUFFLE: u64 = 0x7368_7566;

pub const DEFAULT_BATCH_SIZE: usize = 256;
const LOSS_WINDOW_STEPS: usize = 50;

/// Model wiring variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Towers + CAT + fused primary head.
    Mal,
    /// Towers + fused primary head, no CAT tower.
    MalNoCat,
    /// The parameter-count control: wired exactly like [`Variant::Mal`],
    /// but every tower (and CAT) is supervised by the primary label.
    MalNoMultiAttr,
    /// Production-style single head: shared bottom + primary MLP + head.
    Base,
    /// Classic shared-bottom multi-task: one head per mechanism, primary
    /// read from its own tower, no knowledge fusion.
    SharedBottomMtl,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Mal => "mal",
            Variant::MalNoCat => "mal_no_cat",
            Variant::MalNoMultiAttr => "mal_no_multi_attr",
            Variant::Base => "base",
            Variant::SharedBottomMtl => "shared_bottom_mtl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mal" => Ok(Variant::Mal),
            "mal_no_cat" => Ok(Variant::MalNoCat),
            "mal_no_multi_attr" => Ok(Variant::MalNoMultiAttr),
            "base" => Ok(Variant::Base),
            "shared_bottom_mtl" => Ok(Variant::SharedBottomMtl),
            other => Err(MalError::Config(format!("unknown variant {other:?}"))),
        }
    }

    pub fn has_towers(&self) -> bool {
        !matches!(self, Variant::Base)
    }

    pub fn has_cat_tower(&self) -> bool {
        matches!(self, Variant::Mal | Variant::MalNoMultiAttr)
    }

    pub fn has_fusion(&self) -> bool {
        matches!(self, Variant::Mal | Variant::MalNoCat | Variant::MalNoMultiAttr)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub embedding_dim: usize,
    /// Shared-bottom MLP dims; last entry is the shared representation v.
    pub shared_mlp: Vec<usize>,
    /// Tower dims; the last entry is the penultimate (knowledge) width.
    pub tower_mlp: Vec<usize>,
    /// Primary-branch MLP dims over v; last entry is dim(v_p).
    pub ptp_mlp: Vec<usize>,
    /// Projection of the knowledge vector K into the v_p space; the last
    /// entry must equal dim(v_p).
    pub projection_mlp: Vec<usize>,
    pub lambda_aux: f64,
    pub lambda_cat: f64,
    pub stop_gradient_at_k: bool,
    pub variant: Variant,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embedding_dim: 8,
            shared_mlp: vec![64, 32],
            tower_mlp: vec![16, 8],
            ptp_mlp: vec![32],
            projection_mlp: vec![32, 32],
            lambda_aux: 1.0,
            lambda_cat: 1.0,
            stop_gradient_at_k: false,
            variant: Variant::Mal,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(MalError::Config("embedding_dim must be >= 1".to_string()));
        }
        for (name, dims) in [
            ("shared_mlp", &self.shared_mlp),
            ("tower_mlp", &self.tower_mlp),
            ("ptp_mlp", &self.ptp_mlp),
            ("projection_mlp", &self.projection_mlp),
        ] {
            if dims.is_empty() || dims.contains(&0) {
                return Err(MalError::Config(format!("{name} dims must be non-empty and positive")));
            }
        }
        if self.projection_mlp.last() != self.ptp_mlp.last() {
            return Err(MalError::Config(format!(
                "projection output dim {:?} must equal v_p dim {:?} for element-wise fusion",
                self.projection_mlp.last(),
                self.ptp_mlp.last()
            )));
        }
        if self.lambda_aux < 0.0 || self.lambda_cat < 0.0 {
            return Err(MalError::Config("loss weights must be non-negative".to_string()));
        }
        if self.stop_gradient_at_k && !self.variant.has_fusion() {
            return Err(MalError::Config(format!(
                "stop_gradient_at_k is meaningless for variant {} (no knowledge vector)",
                self.variant.name()
            )));
        }
        Ok(())
    }

    pub fn tower_penultimate(&self) -> usize {
        *self.tower_mlp.last().unwrap()
    }
}

/// Everything needed to rebuild the execution graph around a store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub arch: ArchConfig,
    pub vocab: FeatureVocab,
    pub mechanism_order: Vec<MechanismTag>,
    pub primary_tag: MechanismTag,
}

impl ModelMeta {
    pub fn primary_index(&self) -> usize {
        self.mechanism_order
            .iter()
            .position(|&t| t == self.primary_tag)
            .expect("primary_tag checked at build")
    }

    pub fn cat_classes(&self) -> usize {
        1 << self.mechanism_order.len()
    }

    /// Width of the concatenated knowledge vector K.
    pub fn knowledge_dim(&self) -> usize {
        let towers = self.mechanism_order.len() * self.arch.tower_penultimate();
        if self.arch.variant.has_cat_tower() {
            towers + self.arch.tower_penultimate()
        } else {
            towers
        }
    }
}

/// A built model: meta + named parameters.
#[derive(Debug, Clone)]
pub struct MalModel {
    pub meta: ModelMeta,
    pub store: ParamStore,
}

fn init_dense(store: &mut ParamStore, root: &CounterRng, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    let mut rng = root.stream(TAG_PARAM_INIT, fnv64(name.as_bytes()));
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| (rng.uniform() * 2.0 - 1.0) * bound)
        .collect();
    store.insert(&format!("{name}/w"), Tensor::from_vec(&[fan_in, fan_out], w)?)?;
    store.insert(&format!("{name}/b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn init_embedding(store: &mut ParamStore, root: &CounterRng, name: &str, rows: usize, dim: usize) -> Result<()> {
    let mut rng = root.stream(TAG_PARAM_INIT, fnv64(name.as_bytes()));
    let w: Vec<f64> = (0..rows * dim).map(|_| rng.normal() * 0.01).collect();
    store.insert(name, Tensor::from_vec(&[rows, dim], w)?)
}

fn mlp_param_names(prefix: &str, dims: &[usize]) -> Vec<String> {
    (0..dims.len()).map(|i| format!("{prefix}/{i}")).collect()
}

const EMBED_TABLES: [&str; 6] = [
    "emb/user",
    "emb/ad",
    "emb/industry",
    "emb/position",
    "emb/recency",
    "emb/clickcount",
];

/// Build a model with seeded initialization. Parameters are keyed by
/// role, so two variants share identical values for shared names.
pub fn build_model(
    arch: &ArchConfig,
    vocab: FeatureVocab,
    mechanism_order: &[MechanismTag],
    primary_tag: MechanismTag,
    seed: u64,
) -> Result<MalModel> {
    arch.validate()?;
    if mechanism_order.is_empty() {
        return Err(MalError::Config("mechanism_order must be non-empty".to_string()));
    }
    if !mechanism_order.contains(&primary_tag) {
        return Err(MalError::Config(format!(
            "primary_tag {} not in mechanism_order",
            primary_tag.name()
        )));
    }
    if mechanism_order.len() > 6 {
        return Err(MalError::Config(
            "at most 6 mechanisms supported (CAT class space 2^N)".to_string(),
        ));
    }
    let meta = ModelMeta {
        arch: arch.clone(),
        vocab,
        mechanism_order: mechanism_order.to_vec(),
        primary_tag,
    };
    let root = CounterRng::new(seed);
    let mut store = ParamStore::new();

    let sizes = vocab.sizes();
    for (name, rows) in EMBED_TABLES.iter().zip(sizes) {
        init_embedding(&mut store, &root, name, rows, arch.embedding_dim)?;
    }
    let input_dim = 6 * arch.embedding_dim;

    let mut prev = input_dim;
    for (layer, &dim) in mlp_param_names("shared", &arch.shared_mlp).iter().zip(&arch.shared_mlp) {
        init_dense(&mut store, &root, layer, prev, dim)?;
        prev = dim;
    }
    let v_dim = prev;

    if arch.variant.has_towers() {
        for tag in mechanism_order {
            let prefix = format!("tower/{}", tag.name());
            let mut prev = v_dim;
            for (layer, &dim) in mlp_param_names(&prefix, &arch.tower_mlp).iter().zip(&arch.tower_mlp) {
                init_dense(&mut store, &root, layer, prev, dim)?;
                prev = dim;
            }
            init_dense(&mut store, &root, &format!("{prefix}/out"), prev, 1)?;
        }
    }
    if arch.variant.has_cat_tower() {
        let mut prev = v_dim;
        for (layer, &dim) in mlp_param_names("cat", &arch.tower_mlp).iter().zip(&arch.tower_mlp) {
            init_dense(&mut store, &root, layer, prev, dim)?;
            prev = dim;
        }
        init_dense(&mut store, &root, "cat/out", prev, meta.cat_classes())?;
    }

    if !matches!(arch.variant, Variant::SharedBottomMtl) {
        let mut prev = v_dim;
        for (layer, &dim) in mlp_param_names("ptp", &arch.ptp_mlp).iter().zip(&arch.ptp_mlp) {
            init_dense(&mut store, &root, layer, prev, dim)?;
            prev = dim;
        }
        init_dense(&mut store, &root, "primary", prev, 1)?;
    }
    if arch.variant.has_fusion() {
        // Bias-free: v_a is a pure function of K, so an all-zero
        // projection contributes nothing in either pass.
        let mut prev = meta.knowledge_dim();
        for (layer, &dim) in mlp_param_names("proj", &arch.projection_mlp).iter().zip(&arch.projection_mlp) {
            let mut rng = root.stream(TAG_PARAM_INIT, fnv64(layer.as_bytes()));
            let bound = 1.0 / libm::sqrt(prev as f64);
            let w: Vec<f64> = (0..prev * dim)
                .map(|_| (rng.uniform() * 2.0 - 1.0) * bound)
                .collect();
            store.insert(&format!("{layer}/w"), Tensor::from_vec(&[prev, dim], w)?)?;
            prev = dim;
        }
    }
    Ok(MalModel { meta, store })
}

/// Node handles of one forward pass.
pub struct ForwardNodes {
    /// Per-mechanism tower logits, [batch, 1] each; empty for Base.
    pub tower_logits: Vec<NodeId>,
    /// CAT tower logits, [batch, 2^N].
    pub cat_logits: Option<NodeId>,
    /// Primary-target logit, [batch, 1].
    pub primary_logit: NodeId,
    pub knowledge: Option<NodeId>,
    pub v_p: Option<NodeId>,
    pub v_a: Option<NodeId>,
    pub v_fusion: Option<NodeId>,
}

fn dense(tape: &mut Tape, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    let w = tape.param(store, &format!("{name}/w"))?;
    let b = tape.param(store, &format!("{name}/b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn mlp_relu(tape: &mut Tape, store: &ParamStore, prefix: &str, dims: &[usize], mut x: NodeId) -> Result<NodeId> {
    for i in 0..dims.len() {
        x = dense(tape, store, &format!("{prefix}/{i}"), x)?;
        x = tape.relu(x)?;
    }
    Ok(x)
}

/// Forward pass over a batch of samples.
pub fn forward(
    meta: &ModelMeta,
    store: &ParamStore,
    tape: &mut Tape,
    batch: &[Sample],
) -> Result<ForwardNodes> {
    if batch.is_empty() {
        return Err(MalError::Data("empty batch".to_string()));
    }
    let ids: [Vec<usize>; 6] = [
        batch.iter().map(|s| s.features.user_id as usize).collect(),
        batch.iter().map(|s| s.features.ad_id as usize).collect(),
        batch.iter().map(|s| s.features.industry_id as usize).collect(),
        batch.iter().map(|s| s.features.position_bucket as usize).collect(),
        batch.iter().map(|s| s.features.recency_bucket as usize).collect(),
        batch.iter().map(|s| s.features.clickcount_bucket as usize).collect(),
    ];
    let mut embedded = Vec::with_capacity(6);
    for (table, id_col) in EMBED_TABLES.iter().zip(&ids) {
        embedded.push(tape.embed(store, table, id_col)?);
    }
    let x = tape.concat(&embedded)?;
    let v = mlp_relu(tape, store, "shared", &meta.arch.shared_mlp, x)?;

    let mut tower_logits = Vec::new();
    let mut knowledge_parts = Vec::new();
    if meta.arch.variant.has_towers() {
        for tag in &meta.mechanism_order {
            let prefix = format!("tower/{}", tag.name());
            let k = mlp_relu(tape, store, &prefix, &meta.arch.tower_mlp, v)?;
            knowledge_parts.push(k);
            tower_logits.push(dense(tape, store, &format!("{prefix}/out"), k)?);
        }
    }
    let cat_logits = if meta.arch.variant.has_cat_tower() {
        let k = mlp_relu(tape, store, "cat", &meta.arch.tower_mlp, v)?;
        knowledge_parts.push(k);
        Some(dense(tape, store, "cat/out", k)?)
    } else {
        None
    };

    match meta.arch.variant {
        Variant::SharedBottomMtl => {
            let primary_logit = tower_logits[meta.primary_index()];
            Ok(ForwardNodes {
                tower_logits,
                cat_logits: None,
                primary_logit,
                knowledge: None,
                v_p: None,
                v_a: None,
                v_fusion: None,
            })
        }
        Variant::Base => {
            let v_p = mlp_relu(tape, store, "ptp", &meta.arch.ptp_mlp, v)?;
            let primary_logit = dense(tape, store, "primary", v_p)?;
            Ok(ForwardNodes {
                tower_logits,
                cat_logits: None,
                primary_logit,
                knowledge: None,
                v_p: Some(v_p),
                v_a: None,
                v_fusion: None,
            })
        }
        Variant::Mal | Variant::MalNoCat | Variant::MalNoMultiAttr => {
            let v_p = mlp_relu(tape, store, "ptp", &meta.arch.ptp_mlp, v)?;
            let mut knowledge = tape.concat(&knowledge_parts)?;
            if meta.arch.stop_gradient_at_k {
                knowledge = tape.stop_grad(knowledge)?;
            }
            // Projection: relu on hidden layers, linear output so v_a is
            // unconstrained in sign.
            let n_proj = meta.arch.projection_mlp.len();
            let mut v_a = knowledge;
            for i in 0..n_proj {
                let w = tape.param(store, &format!("proj/{i}/w"))?;
                v_a = tape.matmul(v_a, w)?;
                if i + 1 < n_proj {
                    v_a = tape.relu(v_a)?;
                }
            }
            let v_fusion = tape.add(v_p, v_a)?;
            let primary_logit = dense(tape, store, "primary", v_fusion)?;
            Ok(ForwardNodes {
                tower_logits,
                cat_logits,
                primary_logit,
                knowledge: Some(knowledge),
                v_p: Some(v_p),
                v_a: Some(v_a),
                v_fusion: Some(v_fusion),
            })
        }
    }
}

/// Per-head loss values of one batch (forward values, before backward).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLosses {
    pub total: f64,
    pub per_head: Vec<(String, f64)>,
}

/// Compose the training loss on the tape:
/// `L = L_primary + lambda_aux * sum_a L_a + lambda_cat * L_cat`.
///
/// Supervision per variant: MAL and MAL-no-CAT use each mechanism's own
/// labels; the no-multi-attribution control feeds the primary label to
/// every head; shared-bottom MTL sums the tower losses and has no
/// separate primary head (its primary loss is its primary tower's).
pub fn total_loss(
    meta: &ModelMeta,
    tape: &mut Tape,
    nodes: &ForwardNodes,
    batch: &[Sample],
) -> Result<(NodeId, HeadLosses)> {
    let primary_idx = meta.primary_index();
    for s in batch {
        if s.labels.len() != meta.mechanism_order.len() {
            return Err(MalError::Data(format!(
                "sample carries {} labels for {} wired heads",
                s.labels.len(),
                meta.mechanism_order.len()
            )));
        }
    }
    let labels_of = |idx: usize| -> (Vec<f64>, Vec<f64>) {
        (
            batch.iter().map(|s| s.labels[idx].label).collect(),
            batch.iter().map(|s| s.labels[idx].weight).collect(),
        )
    };
    let (primary_labels, primary_weights) = labels_of(primary_idx);

    let mut terms = Vec::new();
    let mut per_head = Vec::new();

    let use_primary_labels_everywhere = matches!(meta.arch.variant, Variant::MalNoMultiAttr);

    if !matches!(meta.arch.variant, Variant::SharedBottomMtl) {
        let l = tape.weighted_bce(nodes.primary_logit, &primary_labels, &primary_weights)?;
        per_head.push(("primary".to_string(), tape.scalar(l)));
        terms.push(l);
    }

    if meta.arch.variant.has_towers() {
        for (i, (tag, &logit)) in meta
            .mechanism_order
            .iter()
            .zip(&nodes.tower_logits)
            .enumerate()
        {
            let (labels, weights) = if use_primary_labels_everywhere {
                (primary_labels.clone(), primary_weights.clone())
            } else {
                labels_of(i)
            };
            let l = tape.weighted_bce(logit, &labels, &weights)?;
            per_head.push((format!("tower/{}", tag.name()), tape.scalar(l)));
            let weighted = if matches!(meta.arch.variant, Variant::SharedBottomMtl) {
                l
            } else {
                tape.scale(l, meta.arch.lambda_aux)?
            };
            terms.push(weighted);
        }
    }

    if let Some(cat_logits) = nodes.cat_logits {
        let n = meta.mechanism_order.len();
        let classes: Vec<usize> = batch
            .iter()
            .map(|s| {
                if use_primary_labels_everywhere {
                    // Primary bit replicated across all positions.
                    if s.labels[primary_idx].label > 0.0 {
                        (1usize << n) - 1
                    } else {
                        0
                    }
                } else {
                    s.cat_class as usize
                }
            })
            .collect();
        let l = tape.softmax_ce(cat_logits, &classes)?;
        per_head.push(("cat".to_string(), tape.scalar(l)));
        let weighted = tape.scale(l, meta.arch.lambda_cat)?;
        terms.push(weighted);
    }

    let total = tape.sum_scalars(&terms)?;
    Ok((
        total,
        HeadLosses {
            total: tape.scalar(total),
            per_head,
        },
    ))
}

/// Forward + loss as a scalar; the closure form used by gradient checks.
pub fn batch_loss(meta: &ModelMeta, store: &ParamStore, batch: &[Sample]) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = forward(meta, store, &mut tape, batch)?;
    let (_, losses) = total_loss(meta, &mut tape, &nodes, batch)?;
    Ok(losses.total)
}

/// Forward + loss + backward; gradients land in the store.
pub fn batch_backward(meta: &ModelMeta, store: &mut ParamStore, batch: &[Sample]) -> Result<HeadLosses> {
    let mut tape = Tape::new();
    let nodes = forward(meta, store, &mut tape, batch)?;
    let (loss, losses) = total_loss(meta, &mut tape, &nodes, batch)?;
    tape.backward(loss, store)?;
    Ok(losses)
}

/// Mean per-head losses over a window of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    /// First step of the window (0-based).
    pub step: usize,
    pub mean_total: f64,
    pub per_head: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    pub samples_seen: usize,
    pub windows: Vec<WindowStats>,
    pub final_mean_loss: f64,
}

/// One-epoch training pass: seed-deterministic shuffle, fixed batch
/// size, joint Adam update over the composed loss.
pub fn train(
    model: &mut MalModel,
    set: &SampleSet,
    hyper: &AdamHyper,
    seed: u64,
    batch_size: usize,
) -> Result<TrainStats> {
    train_with_frozen_prefixes(model, set, hyper, seed, batch_size, &[])
}

/// Like [`train`], but parameters whose names start with any of
/// `frozen_prefixes` are held fixed for the whole pass.
pub fn train_with_frozen_prefixes(
    model: &mut MalModel,
    set: &SampleSet,
    hyper: &AdamHyper,
    seed: u64,
    batch_size: usize,
    frozen_prefixes: &[String],
) -> Result<TrainStats> {
    if set.samples.is_empty() {
        return Err(MalError::Data("empty training set".to_string()));
    }
    if set.mechanism_order != model.meta.mechanism_order {
        return Err(MalError::Config(
            "sample set mechanism_order differs from the model's".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..set.samples.len()).collect();
    let mut rng = CounterRng::new(seed).stream(TAG_SHUFFLE, 0);
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }

    let mut windows = Vec::new();
    let mut window_heads: BTreeMap<String, f64> = BTreeMap::new();
    let mut window_total = 0.0;
    let mut window_count = 0usize;
    let mut window_start = 0usize;
    let mut step = 0usize;
    let mut last_mean = 0.0;

    let mut batch = Vec::with_capacity(batch_size);
    let n_batches = order.len().div_ceil(batch_size);
    for b in 0..n_batches {
        let start = b * batch_size;
        let end = (start + batch_size).min(order.len());
        batch.clear();
        for &i in &order[start..end] {
            batch.push(set.samples[i].clone());
        }
        model.store.zero_grads();
        let losses = batch_backward(&model.meta, &mut model.store, &batch).map_err(|e| {
            if let MalError::Numeric(m) = &e {
                MalError::Numeric(format!("{m} at step {step}"))
            } else {
                e
            }
        })?;
        if !frozen_prefixes.is_empty() {
            model
                .store
                .zero_grads_matching(|n| frozen_prefixes.iter().any(|p| n.starts_with(p.as_str())));
        }
        model.store.adam_step(hyper)?;

        let per_sample = losses.total / batch.len() as f64;
        window_total += per_sample;
        for (name, v) in &losses.per_head {
            *window_heads.entry(name.clone()).or_insert(0.0) += v / batch.len() as f64;
        }
        window_count += 1;
        step += 1;
        if window_count == LOSS_WINDOW_STEPS || b + 1 == n_batches {
            last_mean = window_total / window_count as f64;
            windows.push(WindowStats {
                step: window_start,
                mean_total: last_mean,
                per_head: window_heads
                    .iter()
                    .map(|(k, v)| (k.clone(), v / window_count as f64))
                    .collect(),
            });
            window_heads.clear();
            window_total = 0.0;
            window_count = 0;
            window_start = step;
        }
    }
    Ok(TrainStats {
        steps: step,
        samples_seen: set.samples.len(),
        windows,
        final_mean_loss: last_mean,
    })
}

/// Primary conversion probabilities for a batch of samples.
pub fn predict_primary(model: &MalModel, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(1024.max(1)) {
        let mut tape = Tape::new();
        let nodes = forward(&model.meta, &model.store, &mut tape, chunk)?;
        for &logit in tape.value(nodes.primary_logit).data() {
            out.push(sigmoid(logit));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{Features, LabelWeight};

    fn vocab() -> FeatureVocab {
        FeatureVocab {
            n_users: 20,
            n_ads: 10,
            n_industries: 3,
        }
    }

    fn mechs() -> Vec<MechanismTag> {
        vec![
            MechanismTag::LastClick,
            MechanismTag::FirstClick,
            MechanismTag::Linear,
            MechanismTag::RemovalEffectMta,
        ]
    }

    fn sample(user: u32, labels: &[(f64, f64)], cat: u32) -> Sample {
        Sample {
            features: Features {
                user_id: user,
                ad_id: user % 10,
                industry_id: user % 3,
                position_bucket: (user % 4) as u8,
                recency_bucket: (user % 8) as u8,
                clickcount_bucket: (user % 6) as u8,
            },
            labels: labels
                .iter()
                .map(|&(label, weight)| LabelWeight { label, weight })
                .collect(),
            cat_class: cat,
            journey_id: user as u64,
            position: 0,
            ts: user as i64,
        }
    }

    fn random_batch(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = CounterRng::new(seed);
        (0..n)
            .map(|i| {
                let bits: Vec<u8> = (0..4).map(|_| rng.bernoulli(0.3) as u8).collect();
                let labels: Vec<(f64, f64)> = bits
                    .iter()
                    .map(|&b| (b as f64, if b == 1 { 0.25 + rng.uniform() * 0.75 } else { 1.0 }))
                    .collect();
                let cat = crate::attribution::cat_label(&bits).unwrap();
                sample(i as u32 % 20, &labels, cat)
            })
            .collect()
    }

    fn sample_set(n: usize, seed: u64) -> SampleSet {
        SampleSet {
            samples: random_batch(n, seed),
            mechanism_order: mechs(),
            primary_tag: MechanismTag::LastClick,
            label_mode: crate::attribution::LabelMode::Binary,
        }
    }

    fn build(variant: Variant) -> MalModel {
        let arch = ArchConfig {
            variant,
            ..ArchConfig::default()
        };
        build_model(&arch, vocab(), &mechs(), MechanismTag::LastClick, 11).unwrap()
    }

    #[test]
    fn knowledge_dim_arithmetic() {
        let m = build(Variant::Mal);
        assert_eq!(m.meta.knowledge_dim(), 4 * 8 + 8);
        let m = build(Variant::MalNoCat);
        assert_eq!(m.meta.knowledge_dim(), 4 * 8);
    }

    #[test]
    fn parameter_count_control() {
        assert_eq!(
            build(Variant::Mal).store.num_scalars(),
            build(Variant::MalNoMultiAttr).store.num_scalars()
        );
        assert!(build(Variant::Base).store.num_scalars() < build(Variant::Mal).store.num_scalars());
    }

    #[test]
    fn shared_names_share_init() {
        let a = build(Variant::Mal);
        let b = build(Variant::Base);
        for name in ["emb/user", "shared/0/w", "ptp/0/w", "primary/w"] {
            assert_eq!(a.store.value(name).unwrap(), b.store.value(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn zero_parameters_give_half_probability() {
        let mut m = build(Variant::Mal);
        let names: Vec<String> = m.store.names().map(|s| s.to_string()).collect();
        for n in names {
            m.store.value_mut(&n).unwrap().fill(0.0);
        }
        let batch = random_batch(5, 3);
        let probs = predict_primary(&m, &batch).unwrap();
        for p in probs {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn fusion_algebra() {
        let m = build(Variant::Mal);
        let batch = random_batch(32, 4);
        let mut tape = Tape::new();
        let nodes = forward(&m.meta, &m.store, &mut tape, &batch).unwrap();
        let v_p = tape.value(nodes.v_p.unwrap()).data();
        let v_a = tape.value(nodes.v_a.unwrap()).data();
        let v_f = tape.value(nodes.v_fusion.unwrap()).data();
        for i in 0..v_f.len() {
            assert!((v_f[i] - v_p[i] - v_a[i]).abs() < 1e-12);
        }
        // Knowledge width matches the wired towers.
        let k = tape.value(nodes.knowledge.unwrap());
        assert_eq!(k.cols(), m.meta.knowledge_dim());
    }

    #[test]
    fn zero_projection_means_fusion_is_identity() {
        let mut m = build(Variant::Mal);
        for i in 0..m.meta.arch.projection_mlp.len() {
            m.store.value_mut(&format!("proj/{i}/w")).unwrap().fill(0.0);
        }
        let batch = random_batch(8, 5);
        let mut tape = Tape::new();
        let nodes = forward(&m.meta, &m.store, &mut tape, &batch).unwrap();
        assert_eq!(
            tape.value(nodes.v_fusion.unwrap()),
            tape.value(nodes.v_p.unwrap())
        );
    }

    #[test]
    fn stop_gradient_isolates_towers() {
        let arch = ArchConfig {
            stop_gradient_at_k: true,
            ..ArchConfig::default()
        };
        let mut m = build_model(&arch, vocab(), &mechs(), MechanismTag::LastClick, 11).unwrap();
        // Kill aux losses so the only supervision is the primary head.
        let mut meta = m.meta.clone();
        meta.arch.lambda_aux = 0.0;
        meta.arch.lambda_cat = 0.0;
        let batch = random_batch(16, 6);
        m.store.zero_grads();
        batch_backward(&meta, &mut m.store, &batch).unwrap();
        for tag in mechs() {
            let g = m.store.grad(&format!("tower/{}/0/w", tag.name())).unwrap();
            assert!(g.data().iter().all(|&x| x == 0.0), "{}", tag.name());
        }
        // Without the stop, at least one tower partial is nonzero.
        let mut m2 = build(Variant::Mal);
        let mut meta2 = m2.meta.clone();
        meta2.arch.lambda_aux = 0.0;
        meta2.arch.lambda_cat = 0.0;
        m2.store.zero_grads();
        batch_backward(&meta2, &mut m2.store, &batch).unwrap();
        let any_nonzero = mechs().iter().any(|tag| {
            m2.store
                .grad(&format!("tower/{}/0/w", tag.name()))
                .unwrap()
                .data()
                .iter()
                .any(|&x| x != 0.0)
        });
        assert!(any_nonzero);
    }

    #[test]
    fn loss_composition_hand_value() {
        // All heads at logit 0, binary labels 1, weights 1, 4 mechanisms,
        // 16 CAT classes: L = ln2 + 4*ln2 + ln16 per sample.
        let mut m = build(Variant::Mal);
        let names: Vec<String> = m.store.names().map(|s| s.to_string()).collect();
        for n in names {
            m.store.value_mut(&n).unwrap().fill(0.0);
        }
        let batch = vec![sample(1, &[(1.0, 1.0); 4], 15)];
        let mut tape = Tape::new();
        let nodes = forward(&m.meta, &m.store, &mut tape, &batch).unwrap();
        let (_, losses) = total_loss(&m.meta, &mut tape, &nodes, &batch).unwrap();
        let ln2 = core::f64::consts::LN_2;
        let expect = ln2 + 4.0 * ln2 + libm::log(16.0);
        assert!((losses.total - expect).abs() < 1e-12, "{} vs {expect}", losses.total);
    }

    #[test]
    fn lambda_zero_reduces_to_primary() {
        let mut m = build(Variant::Mal);
        m.meta.arch.lambda_aux = 0.0;
        m.meta.arch.lambda_cat = 0.0;
        let batch = random_batch(8, 9);
        let mut tape = Tape::new();
        let nodes = forward(&m.meta, &m.store, &mut tape, &batch).unwrap();
        let (_, losses) = total_loss(&m.meta, &mut tape, &nodes, &batch).unwrap();
        let primary = losses.per_head.iter().find(|(n, _)| n == "primary").unwrap().1;
        assert!((losses.total - primary).abs() < 1e-12);
    }

    #[test]
    fn no_cat_variant_has_no_cat_term() {
        let m = build(Variant::MalNoCat);
        let batch = random_batch(8, 9);
        let mut tape = Tape::new();
        let nodes = forward(&m.meta, &m.store, &mut tape, &batch).unwrap();
        let (_, losses) = total_loss(&m.meta, &mut tape, &nodes, &batch).unwrap();
        assert!(losses.per_head.iter().all(|(n, _)| n != "cat"));
    }

    #[test]
    fn out_of_vocab_id_errors() {
        let m = build(Variant::Base);
        let mut batch = random_batch(1, 1);
        batch[0].features.user_id = 10_000;
        assert!(matches!(
            predict_primary(&m, &batch),
            Err(MalError::Index(_))
        ));
    }

    #[test]
    fn batch_size_invariance() {
        let m = build(Variant::Mal);
        let batch = random_batch(30, 12);
        let batched = predict_primary(&m, &batch).unwrap();
        for (i, s) in batch.iter().enumerate() {
            let single = predict_primary(&m, core::slice::from_ref(s)).unwrap();
            assert!((single[0] - batched[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn train_is_deterministic() {
        let set = sample_set(600, 42);
        let hyper = AdamHyper::default();
        let run = || {
            let mut m = build(Variant::Mal);
            let stats = train(&mut m, &set, &hyper, 7, 64).unwrap();
            (stats, m.store.value("primary/w").unwrap().clone())
        };
        let (sa, wa) = run();
        let (sb, wb) = run();
        assert_eq!(sa, sb);
        assert_eq!(wa, wb);
    }

    #[test]
    fn base_learns_separable_toy_problem() {
        // Labels perfectly determined by user id parity.
        let mut samples = Vec::new();
        for i in 0..2000u32 {
            let user = i % 20;
            let label = (user % 2) as f64;
            samples.push(sample(user, &[(label, 1.0); 4], if label > 0.0 { 15 } else { 0 }));
        }
        let set = SampleSet {
            samples,
            mechanism_order: mechs(),
            primary_tag: MechanismTag::LastClick,
            label_mode: crate::attribution::LabelMode::Binary,
        };
        let mut m = build(Variant::Base);
        let hyper = AdamHyper { lr: 0.01, ..AdamHyper::default() };
        // A few epochs of the one-pass trainer.
        let mut final_loss = f64::INFINITY;
        for epoch in 0..5 {
            final_loss = train(&mut m, &set, &hyper, epoch, 256).unwrap().final_mean_loss;
        }
        assert!(final_loss < 0.1, "final {final_loss}");
    }

    /// With zeroed projection parameters (a saddle the optimizer cannot
    /// leave) and lambda = 0, the MAL graph trains exactly like Base.
    #[test]
    fn lambda_zero_mal_matches_base_trajectory() {
        let set = sample_set(800, 33);
        let hyper = AdamHyper::default();

        let mut base = build(Variant::Base);
        let base_stats = train(&mut base, &set, &hyper, 5, 128).unwrap();

        let mut mal = build(Variant::Mal);
        mal.meta.arch.lambda_aux = 0.0;
        mal.meta.arch.lambda_cat = 0.0;
        for i in 0..mal.meta.arch.projection_mlp.len() {
            mal.store.value_mut(&format!("proj/{i}/w")).unwrap().fill(0.0);
        }
        let mal_stats = train(&mut mal, &set, &hyper, 5, 128).unwrap();

        let base_losses: Vec<f64> = base_stats.windows.iter().map(|w| w.mean_total).collect();
        let mal_primary: Vec<f64> = mal_stats
            .windows
            .iter()
            .map(|w| w.per_head.iter().find(|(n, _)| n == "primary").unwrap().1)
            .collect();
        for (a, b) in base_losses.iter().zip(&mal_primary) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // And the shared parameters stay in lockstep.
        assert_eq!(
            base.store.value("shared/0/w").unwrap(),
            mal.store.value("shared/0/w").unwrap()
        );
    }

    #[test]
    fn full_graph_gradient_check() {
        let m = build(Variant::Mal);
        let batch = random_batch(12, 77);
        let mut store = m.store.clone();
        // Re-draw parameters at O(0.1) scale: the tiny embedding init
        // leaves many relu pre-activations within a finite-difference
        // step of the kink, which corrupts the numeric baseline.
        let mut rng = CounterRng::new(2024);
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for n in &names {
            for v in store.value_mut(n).unwrap().data_mut() {
                *v = rng.normal() * 0.1;
            }
        }
        store.zero_grads();
        batch_backward(&m.meta, &mut store, &batch).unwrap();
        let analytic: BTreeMap<String, Tensor> = store
            .iter()
            .map(|(n, p)| (n.to_string(), p.grad.clone()))
            .collect();
        let meta = m.meta.clone();
        let err = crate::optim::grad_check(
            |s| batch_loss(&meta, s, &batch),
            &mut store,
            &analytic,
            1e-5,
            123,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn invalid_arch_rejected() {
        let arch = ArchConfig {
            projection_mlp: vec![16],
            ..ArchConfig::default()
        };
        assert!(matches!(arch.validate(), Err(MalError::Config(_))));
        let arch = ArchConfig {
            variant: Variant::Base,
            stop_gradient_at_k: true,
            ..ArchConfig::default()
        };
        assert!(matches!(arch.validate(), Err(MalError::Config(_))));
    }
}
