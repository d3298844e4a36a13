//! Attribution credit assignment, CAT composite labels, and weighted
//! training samples.
//!
//! Six mechanisms are supported: the four rule-based ones (last-click,
//! first-click, linear, time-decay) and two data-driven stand-ins built
//! on a fitted logistic set-function over touchpoint features —
//! removal-effect and exact Shapley. Credits of a converting journey
//! always sum to 1; non-converting journeys get all-zero credit.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::Tape;
use crate::journey::{Journey, JourneyLog, Touchpoint};
use crate::optim::{AdamHyper, ParamStore};
use crate::tensor::{sigmoid, Tensor};
use crate::{MalError, Result};

pub const POSITION_BUCKETS: usize = 4;
pub const RECENCY_BUCKETS: usize = 8;
pub const CLICKCOUNT_BUCKETS: usize = 6;

/// Position bucket: 0, 1, 2, >=3.
pub fn position_bucket(position: u32) -> u8 {
    position.min(3) as u8
}

/// Log-spaced recency bucket of `recency_secs`, the click's age relative
/// to the journey's final click.
pub fn recency_bucket(recency_secs: i64) -> u8 {
    const BOUNDS: [i64; 7] = [1, 60, 600, 3_600, 21_600, 86_400, 604_800];
    BOUNDS.iter().filter(|&&b| recency_secs >= b).count() as u8
}

/// Log-spaced bucket of the journey's click count so far (this click included).
pub fn clickcount_bucket(clicks_so_far: u64) -> u8 {
    let mut b = 0u8;
    let mut bound = 1u64;
    while clicks_so_far >= bound && b + 1 < CLICKCOUNT_BUCKETS as u8 {
        b += 1;
        bound *= 2;
    }
    b
}

/// Identity of a mechanism, independent of its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MechanismTag {
    LastClick,
    FirstClick,
    Linear,
    TimeDecay,
    RemovalEffectMta,
    ShapleyMta,
}

impl MechanismTag {
    pub fn name(&self) -> &'static str {
        match self {
            MechanismTag::LastClick => "last_click",
            MechanismTag::FirstClick => "first_click",
            MechanismTag::Linear => "linear",
            MechanismTag::TimeDecay => "time_decay",
            MechanismTag::RemovalEffectMta => "removal_effect_mta",
            MechanismTag::ShapleyMta => "shapley_mta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "last_click" => Ok(MechanismTag::LastClick),
            "first_click" => Ok(MechanismTag::FirstClick),
            "linear" => Ok(MechanismTag::Linear),
            "time_decay" => Ok(MechanismTag::TimeDecay),
            "removal_effect_mta" => Ok(MechanismTag::RemovalEffectMta),
            "shapley_mta" => Ok(MechanismTag::ShapleyMta),
            other => Err(MalError::Config(format!("unknown mechanism {other:?}"))),
        }
    }

    pub fn needs_mta_model(&self) -> bool {
        matches!(self, MechanismTag::RemovalEffectMta | MechanismTag::ShapleyMta)
    }
}

/// A mechanism with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    LastClick,
    FirstClick,
    Linear,
    TimeDecay { half_life_secs: i64 },
    RemovalEffectMta,
    ShapleyMta,
}

impl Mechanism {
    pub fn tag(&self) -> MechanismTag {
        match self {
            Mechanism::LastClick => MechanismTag::LastClick,
            Mechanism::FirstClick => MechanismTag::FirstClick,
            Mechanism::Linear => MechanismTag::Linear,
            Mechanism::TimeDecay { .. } => MechanismTag::TimeDecay,
            Mechanism::RemovalEffectMta => MechanismTag::RemovalEffectMta,
            Mechanism::ShapleyMta => MechanismTag::ShapleyMta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Mechanism::TimeDecay { half_life_secs } = self {
            if *half_life_secs <= 0 {
                return Err(MalError::Config(format!(
                    "time_decay half_life_secs {half_life_secs} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Per-click credits for one journey under one mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct CreditVector {
    pub credits: Vec<f64>,
}

impl CreditVector {
    pub fn validate(&self, converted: bool) -> Result<()> {
        for &c in &self.credits {
            if !(0.0..=1.0 + 1e-12).contains(&c) {
                return Err(MalError::Data(format!("credit {c} outside [0,1]")));
            }
        }
        let sum: f64 = self.credits.iter().sum();
        if converted {
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MalError::Data(format!(
                    "credits of converting journey sum to {sum}"
                )));
            }
        } else if sum != 0.0 {
            return Err(MalError::Data(
                "non-converting journey has nonzero credit".to_string(),
            ));
        }
        Ok(())
    }
}

/// Logistic set-function over touchpoint features, the data-driven MTA
/// stand-in: `P(conv | S) = sigmoid(bias + sum_{t in S} theta . phi(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MtaModel {
    pub n_industries: u32,
    pub theta: Vec<f64>,
    pub bias: f64,
}

impl MtaModel {
    pub fn feature_dim(n_industries: u32) -> usize {
        n_industries as usize + POSITION_BUCKETS + RECENCY_BUCKETS
    }

    /// phi(t): concat(industry one-hot, position-bucket one-hot,
    /// recency-bucket one-hot). Returns the indices of the hot features.
    fn phi_indices(&self, click: &Touchpoint, last_ts: i64) -> [usize; 3] {
        let n = self.n_industries as usize;
        [
            click.industry_id as usize,
            n + position_bucket(click.position) as usize,
            n + POSITION_BUCKETS + recency_bucket(last_ts - click.ts) as usize,
        ]
    }

    fn click_score(&self, click: &Touchpoint, last_ts: i64) -> f64 {
        self.phi_indices(click, last_ts)
            .iter()
            .map(|&i| self.theta[i])
            .sum()
    }

    /// Set-function value over the subset of clicks given by `mask`.
    fn subset_prob(&self, scores: &[f64], mask: u32) -> f64 {
        let mut logit = self.bias;
        for (i, s) in scores.iter().enumerate() {
            if mask & (1 << i) != 0 {
                logit += s;
            }
        }
        sigmoid(logit)
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != Self::feature_dim(self.n_industries) {
            return Err(MalError::Config(format!(
                "mta theta has {} coefficients, expected {}",
                self.theta.len(),
                Self::feature_dim(self.n_industries)
            )));
        }
        if !self.bias.is_finite() || self.theta.iter().any(|t| !t.is_finite()) {
            return Err(MalError::Numeric("non-finite mta coefficients".to_string()));
        }
        Ok(())
    }
}

/// Hyperparameters for [`fit_mta_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtaFitConfig {
    pub lr: f64,
    pub steps: u32,
    pub l2: f64,
}

impl Default for MtaFitConfig {
    fn default() -> Self {
        MtaFitConfig {
            lr: 0.05,
            steps: 300,
            l2: 1e-4,
        }
    }
}

/// Journey-level feature aggregate for the MTA fit: x_J = sum_t phi(t).
fn journey_features(journey: &Journey, n_industries: u32) -> Vec<f64> {
    let dim = MtaModel::feature_dim(n_industries);
    let mut x = vec![0.0; dim];
    let last_ts = journey.last_click_ts();
    let n = n_industries as usize;
    for c in &journey.clicks {
        x[c.industry_id as usize] += 1.0;
        x[n + position_bucket(c.position) as usize] += 1.0;
        x[n + POSITION_BUCKETS + recency_bucket(last_ts - c.ts) as usize] += 1.0;
    }
    x
}

/// Fit the MTA logistic set-function on training journeys by full-batch
/// Adam on the L2-regularized logistic loss. Deterministic: zero init,
/// fixed step count.
pub fn fit_mta_model(
    train: &JourneyLog,
    n_industries: u32,
    fit: &MtaFitConfig,
) -> Result<MtaModel> {
    let n_pos = train.journeys.iter().filter(|j| j.converted()).count();
    if n_pos == 0 || n_pos == train.journeys.len() {
        return Err(MalError::Degenerate(format!(
            "mta fit needs both classes; got {n_pos} converting of {}",
            train.journeys.len()
        )));
    }
    let dim = MtaModel::feature_dim(n_industries);
    let batch = train.journeys.len();
    let mut xs = Vec::with_capacity(batch * dim);
    let mut labels = Vec::with_capacity(batch);
    for j in &train.journeys {
        xs.extend_from_slice(&journey_features(j, n_industries));
        labels.push(if j.converted() { 1.0 } else { 0.0 });
    }
    let xs = Tensor::from_vec(&[batch, dim], xs)?;
    let weights = vec![1.0; batch];

    let mut store = ParamStore::new();
    store.insert("theta", Tensor::zeros(&[dim, 1]))?;
    store.insert("bias", Tensor::zeros(&[1]))?;
    let hyper = AdamHyper {
        lr: fit.lr,
        ..AdamHyper::default()
    };
    // Loss is normalized by batch size so lr/l2 are scale-free.
    let scale = 1.0 / batch as f64;
    for _ in 0..fit.steps {
        store.zero_grads();
        let mut t = Tape::new();
        let x = t.input(xs.clone())?;
        let theta = t.param(&store, "theta")?;
        let bias = t.param(&store, "bias")?;
        let logits = t.matmul(x, theta)?;
        let logits = t.add_row(logits, bias)?;
        let bce = t.weighted_bce(logits, &labels, &weights)?;
        let loss = t.scale(bce, scale)?;
        t.backward(loss, &mut store)?;
        // L2 on theta only.
        let l2_grad: Vec<f64> = store
            .value("theta")?
            .data()
            .iter()
            .map(|&w| 2.0 * fit.l2 * w)
            .collect();
        store.accumulate_grad("theta", &Tensor::from_vec(&[dim, 1], l2_grad)?)?;
        store.adam_step(&hyper)?;
    }
    Ok(MtaModel {
        n_industries,
        theta: store.value("theta")?.data().to_vec(),
        bias: store.value("bias")?.data()[0],
    })
}

/// Mean logistic loss of an MTA model over a journey log (no L2 term).
pub fn mta_loss(model: &MtaModel, log: &JourneyLog) -> Result<f64> {
    let mut total = 0.0;
    for j in &log.journeys {
        let x = journey_features(j, model.n_industries);
        let logit = model.bias
            + x.iter()
                .zip(&model.theta)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        let label = if j.converted() { 1.0 } else { 0.0 };
        total += crate::graph::weighted_bce_scalar(logit, label, 1.0)?;
    }
    Ok(total / log.journeys.len() as f64)
}

/// Maximum journey length for exact Shapley enumeration.
pub const SHAPLEY_MAX_CLICKS: usize = 12;

/// Raw (unclipped, unnormalized) exact Shapley values of the fitted
/// set-function over a journey's clicks. Exposed for the efficiency
/// property; [`attribute`] post-processes these into credits.
pub fn shapley_raw(model: &MtaModel, journey: &Journey) -> Result<Vec<f64>> {
    let k = journey.clicks.len();
    if k > SHAPLEY_MAX_CLICKS {
        return Err(MalError::Capacity(format!(
            "journey {} has {k} clicks; exact Shapley is capped at {SHAPLEY_MAX_CLICKS}",
            journey.journey_id
        )));
    }
    let last_ts = journey.last_click_ts();
    let scores: Vec<f64> = journey
        .clicks
        .iter()
        .map(|c| model.click_score(c, last_ts))
        .collect();
    // v(mask) for every subset.
    let v: Vec<f64> = (0..1u32 << k)
        .map(|mask| model.subset_prob(&scores, mask))
        .collect();
    let mut fact = [1.0f64; SHAPLEY_MAX_CLICKS + 1];
    for i in 1..=k {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut out = vec![0.0; k];
    for i in 0..k {
        let bit = 1u32 << i;
        let mut phi = 0.0;
        for mask in 0..1u32 << k {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact[s] * fact[k - s - 1] / fact[k];
            phi += weight * (v[(mask | bit) as usize] - v[mask as usize]);
        }
        out[i] = phi;
    }
    Ok(out)
}

fn normalized_or_linear(raw: Vec<f64>) -> Vec<f64> {
    let clipped: Vec<f64> = raw.iter().map(|&r| r.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum > 0.0 {
        clipped.iter().map(|&c| c / sum).collect()
    } else {
        // All-zero effects carry no signal; fall back to linear.
        let k = clipped.len();
        vec![1.0 / k as f64; k]
    }
}

/// Assign per-click credit for a journey under a mechanism.
///
/// MTA mechanisms require a fitted [`MtaModel`]. Non-converting journeys
/// always get all-zero credit.
pub fn attribute(
    mechanism: &Mechanism,
    journey: &Journey,
    mta: Option<&MtaModel>,
) -> Result<CreditVector> {
    mechanism.validate()?;
    let k = journey.clicks.len();
    if k == 0 {
        return Err(MalError::Data(format!(
            "journey {} has no clicks",
            journey.journey_id
        )));
    }
    if !journey.converted() {
        return Ok(CreditVector {
            credits: vec![0.0; k],
        });
    }
    let credits = match mechanism {
        Mechanism::LastClick => {
            let mut c = vec![0.0; k];
            c[k - 1] = 1.0;
            c
        }
        Mechanism::FirstClick => {
            let mut c = vec![0.0; k];
            c[0] = 1.0;
            c
        }
        Mechanism::Linear => vec![1.0 / k as f64; k],
        Mechanism::TimeDecay { half_life_secs } => {
            let t_conv = journey.conversion.as_ref().map(|c| c.ts).unwrap_or(0);
            let raw: Vec<f64> = journey
                .clicks
                .iter()
                .map(|c| {
                    let age = (t_conv - c.ts) as f64 / *half_life_secs as f64;
                    libm::exp2(-age)
                })
                .collect();
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|&r| r / sum).collect()
        }
        Mechanism::RemovalEffectMta => {
            let model = mta.ok_or_else(|| {
                MalError::Config("removal_effect_mta requires a fitted MtaModel".to_string())
            })?;
            let last_ts = journey.last_click_ts();
            let scores: Vec<f64> = journey
                .clicks
                .iter()
                .map(|c| model.click_score(c, last_ts))
                .collect();
            let full_logit = model.bias + scores.iter().sum::<f64>();
            let full = sigmoid(full_logit);
            let raw: Vec<f64> = scores
                .iter()
                .map(|&s| (full - sigmoid(full_logit - s)).max(0.0))
                .collect();
            normalized_or_linear(raw)
        }
        Mechanism::ShapleyMta => {
            let model = mta.ok_or_else(|| {
                MalError::Config("shapley_mta requires a fitted MtaModel".to_string())
            })?;
            normalized_or_linear(shapley_raw(model, journey)?)
        }
    };
    let cv = CreditVector { credits };
    cv.validate(true)?;
    Ok(cv)
}

/// CAT label per the Cartesian composition: `sum_i bits[i] * 2^i`.
pub fn cat_label(bits: &[u8]) -> Result<u32> {
    if bits.is_empty() {
        return Err(MalError::Domain("cat_label needs at least one bit".to_string()));
    }
    if bits.len() > 16 {
        return Err(MalError::Capacity(format!(
            "cat_label over {} mechanisms exceeds the 16-bit cap",
            bits.len()
        )));
    }
    let mut out = 0u32;
    for (i, &b) in bits.iter().enumerate() {
        if b > 1 {
            return Err(MalError::Domain(format!("non-binary cat bit {b} at {i}")));
        }
        out += (b as u32) << i;
    }
    Ok(out)
}

/// Inverse of [`cat_label`].
pub fn decode_cat(label: u32, n: usize) -> Result<Vec<u8>> {
    if n == 0 || n > 16 {
        return Err(MalError::Domain(format!("decode_cat width {n} outside [1,16]")));
    }
    if label >= 1u32 << n {
        return Err(MalError::Domain(format!(
            "cat label {label} out of range for {n} mechanisms"
        )));
    }
    Ok((0..n).map(|i| ((label >> i) & 1) as u8).collect())
}

/// Observable feature ids of one click; latent vectors are never exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Features {
    pub user_id: u32,
    pub ad_id: u32,
    pub industry_id: u32,
    pub position_bucket: u8,
    pub recency_bucket: u8,
    pub clickcount_bucket: u8,
}

/// Embedding vocabulary sizes for the feature record, in field order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureVocab {
    pub n_users: usize,
    pub n_ads: usize,
    pub n_industries: usize,
}

impl FeatureVocab {
    pub fn sizes(&self) -> [usize; 6] {
        [
            self.n_users,
            self.n_ads,
            self.n_industries,
            POSITION_BUCKETS,
            RECENCY_BUCKETS,
            CLICKCOUNT_BUCKETS,
        ]
    }
}

/// Per-mechanism supervision for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelWeight {
    pub label: f64,
    pub weight: f64,
}

/// One click with features, per-mechanism (label, weight) pairs in
/// mechanism order, and its CAT class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Features,
    pub labels: Vec<LabelWeight>,
    pub cat_class: u32,
    pub journey_id: u64,
    pub position: u32,
    pub ts: i64,
}

/// How credits become (label, weight) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// l = 1{credit > 0}; w = credit for positives, 1 for negatives.
    Binary,
    /// l = credit; w = 1.
    Fractional,
}

impl LabelMode {
    pub fn name(&self) -> &'static str {
        match self {
            LabelMode::Binary => "binary",
            LabelMode::Fractional => "fractional",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(LabelMode::Binary),
            "fractional" => Ok(LabelMode::Fractional),
            other => Err(MalError::Config(format!("unknown label_mode {other:?}"))),
        }
    }
}

/// The materialized training/evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub mechanism_order: Vec<MechanismTag>,
    pub primary_tag: MechanismTag,
    pub label_mode: LabelMode,
}

impl SampleSet {
    pub fn mechanism_index(&self, tag: MechanismTag) -> Result<usize> {
        self.mechanism_order
            .iter()
            .position(|&t| t == tag)
            .ok_or_else(|| {
                MalError::Config(format!("mechanism {} not in mechanism_order", tag.name()))
            })
    }

    pub fn primary_index(&self) -> usize {
        self.mechanism_order
            .iter()
            .position(|&t| t == self.primary_tag)
            .expect("primary_tag validated at build time")
    }
}

/// Materialize one weighted sample per click.
pub fn build_samples(
    journeys: &JourneyLog,
    mechanisms: &[Mechanism],
    primary_tag: MechanismTag,
    label_mode: LabelMode,
    mta: Option<&MtaModel>,
) -> Result<SampleSet> {
    if mechanisms.is_empty() {
        return Err(MalError::Config("mechanisms must be non-empty".to_string()));
    }
    let order: Vec<MechanismTag> = mechanisms.iter().map(|m| m.tag()).collect();
    for (i, tag) in order.iter().enumerate() {
        if order[..i].contains(tag) {
            return Err(MalError::Config(format!(
                "duplicate mechanism {} in mechanism_order",
                tag.name()
            )));
        }
    }
    if !order.contains(&primary_tag) {
        return Err(MalError::Config(format!(
            "primary_tag {} not in mechanism_order",
            primary_tag.name()
        )));
    }
    if order.iter().any(|t| t.needs_mta_model()) && mta.is_none() {
        return Err(MalError::Config(
            "mechanism_order references MTA but no fitted MtaModel was supplied".to_string(),
        ));
    }

    let mut samples = Vec::new();
    for journey in &journeys.journeys {
        let credit_vectors: Vec<CreditVector> = mechanisms
            .iter()
            .map(|m| attribute(m, journey, mta))
            .collect::<Result<_>>()?;
        let last_ts = journey.last_click_ts();
        for (pos, click) in journey.clicks.iter().enumerate() {
            let mut labels = Vec::with_capacity(mechanisms.len());
            let mut bits = Vec::with_capacity(mechanisms.len());
            for cv in &credit_vectors {
                let credit = cv.credits[pos];
                bits.push((credit > 0.0) as u8);
                labels.push(match label_mode {
                    LabelMode::Binary => LabelWeight {
                        label: (credit > 0.0) as u8 as f64,
                        weight: if credit > 0.0 { credit } else { 1.0 },
                    },
                    LabelMode::Fractional => LabelWeight {
                        label: credit,
                        weight: 1.0,
                    },
                });
            }
            samples.push(Sample {
                features: Features {
                    user_id: journey.user_id,
                    ad_id: click.ad_id,
                    industry_id: click.industry_id,
                    position_bucket: position_bucket(click.position),
                    recency_bucket: recency_bucket(last_ts - click.ts),
                    clickcount_bucket: clickcount_bucket(pos as u64 + 1),
                },
                labels,
                cat_class: cat_label(&bits)?,
                journey_id: journey.journey_id,
                position: pos as u32,
                ts: click.ts,
            });
        }
    }
    Ok(SampleSet {
        samples,
        mechanism_order: order,
        primary_tag,
        label_mode,
    })
}

/// Positive-sample counts and ratios relative to a reference mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveRatioReport {
    pub reference: MechanismTag,
    /// (mechanism, positive count, positives / positives(reference)).
    pub rows: Vec<(MechanismTag, u64, f64)>,
}

pub fn positive_ratio_report(
    set: &SampleSet,
    reference: MechanismTag,
) -> Result<PositiveRatioReport> {
    let ref_idx = set.mechanism_index(reference)?;
    let count = |idx: usize| {
        set.samples
            .iter()
            .filter(|s| s.labels[idx].label > 0.0)
            .count() as u64
    };
    let ref_count = count(ref_idx);
    if ref_count == 0 {
        return Err(MalError::Degenerate(format!(
            "no positive samples under reference mechanism {}",
            reference.name()
        )));
    }
    let rows = set
        .mechanism_order
        .iter()
        .enumerate()
        .map(|(i, &tag)| {
            let c = count(i);
            (tag, c, c as f64 / ref_count as f64)
        })
        .collect();
    Ok(PositiveRatioReport {
        reference,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::journey::{generate_dataset, Conversion, GenConfig};

    fn mk_journey(k: usize, converted: bool) -> Journey {
        let clicks = (0..k)
            .map(|i| Touchpoint {
                ad_id: i as u32,
                industry_id: 0,
                ts: (i as i64) * 100,
                position: i as u32,
            })
            .collect::<Vec<_>>();
        Journey {
            user_id: 1,
            journey_id: 42,
            industry_id: 0,
            conversion: converted.then(|| Conversion {
                ts: (k as i64) * 100 + 50,
            }),
            clicks,
        }
    }

    fn mk_mta(n_industries: u32) -> MtaModel {
        let dim = MtaModel::feature_dim(n_industries);
        MtaModel {
            n_industries,
            theta: (0..dim).map(|i| 0.1 * (i as f64 % 5.0) - 0.1).collect(),
            bias: -1.0,
        }
    }

    #[test]
    fn rule_based_mechanisms() {
        let j = mk_journey(4, true);
        let linear = attribute(&Mechanism::Linear, &j, None).unwrap();
        assert_eq!(linear.credits, vec![0.25; 4]);
        let j3 = mk_journey(3, true);
        assert_eq!(
            attribute(&Mechanism::LastClick, &j3, None).unwrap().credits,
            vec![0.0, 0.0, 1.0]
        );
        assert_eq!(
            attribute(&Mechanism::FirstClick, &j3, None).unwrap().credits,
            vec![1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn non_converting_gets_zero_credit() {
        let j = mk_journey(3, false);
        let mta = mk_mta(1);
        for m in [
            Mechanism::LastClick,
            Mechanism::FirstClick,
            Mechanism::Linear,
            Mechanism::TimeDecay { half_life_secs: 100 },
            Mechanism::RemovalEffectMta,
            Mechanism::ShapleyMta,
        ] {
            let cv = attribute(&m, &j, Some(&mta)).unwrap();
            assert!(cv.credits.iter().all(|&c| c == 0.0), "{m:?}");
        }
    }

    #[test]
    fn time_decay_half_life_ratio() {
        // Conversion at t=200, clicks at 0 and 100, half-life 100:
        // weights 2^-2 : 2^-1 normalize to [1/3, 2/3].
        let mut j = mk_journey(2, true);
        j.conversion = Some(Conversion { ts: 200 });
        let cv = attribute(&Mechanism::TimeDecay { half_life_secs: 100 }, &j, None).unwrap();
        assert!((cv.credits[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((cv.credits[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_click_collapses_all_mechanisms() {
        let j = mk_journey(1, true);
        let mta = mk_mta(1);
        for m in [
            Mechanism::LastClick,
            Mechanism::FirstClick,
            Mechanism::Linear,
            Mechanism::TimeDecay { half_life_secs: 50 },
            Mechanism::RemovalEffectMta,
            Mechanism::ShapleyMta,
        ] {
            let cv = attribute(&m, &j, Some(&mta)).unwrap();
            assert_eq!(cv.credits, vec![1.0], "{m:?}");
        }
    }

    #[test]
    fn mta_mechanisms_require_model() {
        let j = mk_journey(2, true);
        assert!(matches!(
            attribute(&Mechanism::RemovalEffectMta, &j, None),
            Err(MalError::Config(_))
        ));
    }

    #[test]
    fn shapley_capacity_error() {
        let j = mk_journey(13, true);
        let mta = mk_mta(1);
        assert!(matches!(
            attribute(&Mechanism::ShapleyMta, &j, Some(&mta)),
            Err(MalError::Capacity(_))
        ));
    }

    #[test]
    fn shapley_efficiency_pre_clip() {
        let mta = mk_mta(3);
        for k in 1..=8 {
            let mut j = mk_journey(k, true);
            for (i, c) in j.clicks.iter_mut().enumerate() {
                c.industry_id = (i % 3) as u32;
            }
            let raw = shapley_raw(&mta, &j).unwrap();
            let total: f64 = raw.iter().sum();
            let last_ts = j.last_click_ts();
            let scores: Vec<f64> = j
                .clicks
                .iter()
                .map(|c| mta.click_score(c, last_ts))
                .collect();
            let v_full = mta.subset_prob(&scores, (1u32 << k) - 1);
            let v_empty = sigmoid(mta.bias);
            assert!(
                (total - (v_full - v_empty)).abs() < 1e-9,
                "k={k}: {total} vs {}",
                v_full - v_empty
            );
        }
    }

    #[test]
    fn conservation_over_generated_journeys() {
        let config = GenConfig {
            n_users: 400,
            ..GenConfig::default()
        };
        let log = generate_dataset(&config).unwrap();
        let mta = fit_mta_model(&log, config.n_industries, &MtaFitConfig { steps: 50, ..MtaFitConfig::default() }).unwrap();
        let mechanisms = [
            Mechanism::LastClick,
            Mechanism::FirstClick,
            Mechanism::Linear,
            Mechanism::TimeDecay { half_life_secs: 6 * 3600 },
            Mechanism::RemovalEffectMta,
            Mechanism::ShapleyMta,
        ];
        for j in &log.journeys {
            for m in &mechanisms {
                let cv = attribute(m, j, Some(&mta)).unwrap();
                cv.validate(j.converted()).unwrap();
            }
        }
    }

    #[test]
    fn mta_fit_recovers_planted_parameters() {
        // Relabel generated journeys from a planted (theta*, b*) inside
        // the model family; the fitted loss must come within 1% of the
        // loss at the planted parameters.
        let config = GenConfig {
            n_users: 2_000,
            ..GenConfig::default()
        };
        let mut log = generate_dataset(&config).unwrap();
        let planted = mk_mta(config.n_industries);
        let mut rng = crate::rng::CounterRng::new(99);
        for j in log.journeys.iter_mut() {
            let x = journey_features(j, config.n_industries);
            let logit = planted.bias
                + x.iter().zip(&planted.theta).map(|(a, b)| a * b).sum::<f64>();
            j.conversion = if rng.bernoulli(sigmoid(logit)) {
                Some(Conversion { ts: j.last_click_ts() + 10 })
            } else {
                None
            };
        }
        let fitted = fit_mta_model(
            &log,
            config.n_industries,
            &MtaFitConfig { lr: 0.05, steps: 400, l2: 1e-6 },
        )
        .unwrap();
        let loss_fit = mta_loss(&fitted, &log).unwrap();
        let loss_planted = mta_loss(&planted, &log).unwrap();
        assert!(
            loss_fit <= loss_planted * 1.01,
            "fitted {loss_fit} vs planted {loss_planted}"
        );
    }

    #[test]
    fn mta_fit_large_l2_shrinks_theta() {
        let config = GenConfig {
            n_users: 300,
            ..GenConfig::default()
        };
        let log = generate_dataset(&config).unwrap();
        let m = fit_mta_model(
            &log,
            config.n_industries,
            &MtaFitConfig { lr: 0.05, steps: 400, l2: 1e4 },
        )
        .unwrap();
        assert!(m.theta.iter().all(|t| t.abs() < 1e-3), "theta {:?}", m.theta);
    }

    #[test]
    fn mta_fit_deterministic() {
        let config = GenConfig {
            n_users: 200,
            ..GenConfig::default()
        };
        let log = generate_dataset(&config).unwrap();
        let fit = MtaFitConfig { steps: 60, ..MtaFitConfig::default() };
        let a = fit_mta_model(&log, config.n_industries, &fit).unwrap();
        let b = fit_mta_model(&log, config.n_industries, &fit).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mta_fit_rejects_one_class() {
        let mut log = generate_dataset(&GenConfig {
            n_users: 50,
            ..GenConfig::default()
        })
        .unwrap();
        for j in log.journeys.iter_mut() {
            j.conversion = None;
        }
        assert!(matches!(
            fit_mta_model(&log, 6, &MtaFitConfig::default()),
            Err(MalError::Degenerate(_))
        ));
    }

    #[test]
    fn cat_label_examples() {
        assert_eq!(cat_label(&[1, 0, 1, 1]).unwrap(), 13);
        assert_eq!(cat_label(&[0, 0, 0, 0]).unwrap(), 0);
        assert_eq!(cat_label(&[1, 1, 1, 1]).unwrap(), 15);
        assert!(matches!(cat_label(&[0, 2]), Err(MalError::Domain(_))));
        assert!(matches!(cat_label(&[]), Err(MalError::Domain(_))));
    }

    #[test]
    fn cat_roundtrip_exhaustive() {
        for n in 1..=6usize {
            for label in 0..1u32 << n {
                let bits = decode_cat(label, n).unwrap();
                assert_eq!(cat_label(&bits).unwrap(), label);
            }
        }
        assert_eq!(decode_cat(13, 4).unwrap(), vec![1, 0, 1, 1]);
        assert!(matches!(decode_cat(16, 4), Err(MalError::Domain(_))));
    }

    #[test]
    fn build_samples_middle_click() {
        let j = mk_journey(3, true);
        let log = JourneyLog {
            journeys: vec![j],
            gen_config_digest: 0,
        };
        let mta = mk_mta(1);
        let set = build_samples(
            &log,
            &[
                Mechanism::LastClick,
                Mechanism::FirstClick,
                Mechanism::Linear,
                Mechanism::RemovalEffectMta,
            ],
            MechanismTag::LastClick,
            LabelMode::Binary,
            Some(&mta),
        )
        .unwrap();
        assert_eq!(set.samples.len(), 3);
        let mid = &set.samples[1];
        assert_eq!(mid.labels[0].label, 0.0); // last
        assert_eq!(mid.labels[1].label, 0.0); // first
        assert_eq!(mid.labels[2].label, 1.0); // linear
        assert!((mid.labels[2].weight - 1.0 / 3.0).abs() < 1e-12);
        // CAT bits [0, 0, 1, b_mta].
        let bits = decode_cat(mid.cat_class, 4).unwrap();
        assert_eq!(&bits[..3], &[0, 0, 1]);
    }

    #[test]
    fn build_samples_non_converting() {
        let log = JourneyLog {
            journeys: vec![mk_journey(4, false)],
            gen_config_digest: 0,
        };
        let set = build_samples(
            &log,
            &[Mechanism::LastClick, Mechanism::Linear],
            MechanismTag::LastClick,
            LabelMode::Binary,
            None,
        )
        .unwrap();
        assert_eq!(set.samples.len(), 4);
        for s in &set.samples {
            assert!(s.labels.iter().all(|lw| lw.label == 0.0 && lw.weight == 1.0));
            assert_eq!(s.cat_class, 0);
        }
    }

    #[test]
    fn build_samples_rejects_duplicates_and_missing_primary() {
        let log = JourneyLog {
            journeys: vec![mk_journey(2, true)],
            gen_config_digest: 0,
        };
        assert!(matches!(
            build_samples(
                &log,
                &[Mechanism::Linear, Mechanism::Linear],
                MechanismTag::Linear,
                LabelMode::Binary,
                None
            ),
            Err(MalError::Config(_))
        ));
        assert!(matches!(
            build_samples(
                &log,
                &[Mechanism::Linear],
                MechanismTag::LastClick,
                LabelMode::Binary,
                None
            ),
            Err(MalError::Config(_))
        ));
    }

    #[test]
    fn permuting_mechanism_order_permutes_cat_bits() {
        let log = JourneyLog {
            journeys: vec![mk_journey(3, true)],
            gen_config_digest: 0,
        };
        let a = build_samples(
            &log,
            &[Mechanism::LastClick, Mechanism::FirstClick, Mechanism::Linear],
            MechanismTag::LastClick,
            LabelMode::Binary,
            None,
        )
        .unwrap();
        let b = build_samples(
            &log,
            &[Mechanism::Linear, Mechanism::LastClick, Mechanism::FirstClick],
            MechanismTag::LastClick,
            LabelMode::Binary,
            None,
        )
        .unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            let bits_a = decode_cat(sa.cat_class, 3).unwrap();
            let bits_b = decode_cat(sb.cat_class, 3).unwrap();
            // a order: [last, first, linear]; b order: [linear, last, first].
            assert_eq!(bits_a[0], bits_b[1]);
            assert_eq!(bits_a[1], bits_b[2]);
            assert_eq!(bits_a[2], bits_b[0]);
        }
    }

    #[test]
    fn positive_ratio_reference_is_one() {
        let config = GenConfig {
            n_users: 500,
            ..GenConfig::default()
        };
        let log = generate_dataset(&config).unwrap();
        let set = build_samples(
            &log,
            &[Mechanism::LastClick, Mechanism::Linear],
            MechanismTag::LastClick,
            LabelMode::Binary,
            None,
        )
        .unwrap();
        let report = positive_ratio_report(&set, MechanismTag::LastClick).unwrap();
        assert_eq!(report.rows[0].2, 1.0);
        // Linear marks every click of a converting journey positive.
        assert!(report.rows[1].2 > 1.0);
    }

    #[test]
    fn positive_ratio_single_click_journeys_collapse() {
        let mut config = GenConfig::default();
        config.n_users = 500;
        for p in config.industry_profiles.iter_mut() {
            p.mean_clicks = 1.0;
        }
        // Keep one long/short gamma pair for config validity.
        config.industry_profiles[0].carryover_gamma = 0.9;
        config.industry_profiles[5].carryover_gamma = 0.1;
        let log = generate_dataset(&config).unwrap();
        assert!(log.journeys.iter().all(|j| j.clicks.len() == 1));
        let set = build_samples(
            &log,
            &[Mechanism::LastClick, Mechanism::FirstClick, Mechanism::Linear],
            MechanismTag::LastClick,
            LabelMode::Binary,
            None,
        )
        .unwrap();
        let report = positive_ratio_report(&set, MechanismTag::LastClick).unwrap();
        for (_, _, ratio) in &report.rows {
            assert_eq!(*ratio, 1.0);
        }
    }

    #[test]
    fn fractional_mode_uses_credit_as_label() {
        let log = JourneyLog {
            journeys: vec![mk_journey(4, true)],
            gen_config_digest: 0,
        };
        let set = build_samples(
            &log,
            &[Mechanism::Linear],
            MechanismTag::Linear,
            LabelMode::Fractional,
            None,
        )
        .unwrap();
        for s in &set.samples {
            assert!((s.labels[0].label - 0.25).abs() < 1e-12);
            assert_eq!(s.labels[0].weight, 1.0);
        }
    }

    #[test]
    fn bucket_helpers() {
        assert_eq!(position_bucket(0), 0);
        assert_eq!(position_bucket(7), 3);
        assert_eq!(recency_bucket(0), 0);
        assert_eq!(recency_bucket(59), 1);
        assert_eq!(recency_bucket(1_000_000), 7);
        assert_eq!(clickcount_bucket(0), 0);
        assert_eq!(clickcount_bucket(1), 1);
        assert_eq!(clickcount_bucket(100), 5);
    }
}
