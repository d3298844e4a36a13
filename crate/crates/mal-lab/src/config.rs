//! Experiment configuration: a TOML file of dotted `key = value` pairs
//! grouped into sections, with full defaults so an empty file is a valid
//! experiment. `--print-config` dumps the resolved form.

use std::path::{Path, PathBuf};

use mal_core::attribution::{LabelMode, Mechanism, MechanismTag, MtaFitConfig};
use mal_core::journey::{GenConfig, IndustryProfile};
use mal_core::malnet::{ArchConfig, Variant};
use mal_core::optim::AdamHyper;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: PathsSection,
    pub gen: GenSection,
    pub attribution: AttributionSection,
    pub split: SplitSection,
    pub arch: ArchSection,
    pub train: TrainSection,
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            paths: PathsSection::default(),
            gen: GenSection::default(),
            attribution: AttributionSection::default(),
            split: SplitSection::default(),
            arch: ArchSection::default(),
            train: TrainSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// All artifacts live under this directory.
    pub workdir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            workdir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileEntry {
    pub mean_clicks: f64,
    pub carryover_gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub n_users: u32,
    pub n_ads: u32,
    pub latent_dim: u32,
    pub journeys_per_user_mean: f64,
    /// One profile per industry; the list length sets n_industries.
    pub industry_profiles: Vec<ProfileEntry>,
    pub conv_bias: f64,
    pub affinity_scale: f64,
    pub seed: u64,
}

impl Default for ProfileEntry {
    fn default() -> Self {
        ProfileEntry {
            mean_clicks: 1.5,
            carryover_gamma: 0.5,
        }
    }
}

impl Default for GenSection {
    fn default() -> Self {
        let core = GenConfig::default();
        GenSection {
            n_users: core.n_users,
            n_ads: core.n_ads,
            latent_dim: core.latent_dim,
            journeys_per_user_mean: core.journeys_per_user_mean,
            industry_profiles: core
                .industry_profiles
                .iter()
                .map(|p| ProfileEntry {
                    mean_clicks: p.mean_clicks,
                    carryover_gamma: p.carryover_gamma,
                })
                .collect(),
            conv_bias: core.conv_bias,
            affinity_scale: core.affinity_scale,
            seed: core.seed,
        }
    }
}

impl GenSection {
    pub fn to_core(&self) -> GenConfig {
        GenConfig {
            n_users: self.n_users,
            n_ads: self.n_ads,
            n_industries: self.industry_profiles.len() as u32,
            latent_dim: self.latent_dim,
            journeys_per_user_mean: self.journeys_per_user_mean,
            industry_profiles: self
                .industry_profiles
                .iter()
                .map(|p| IndustryProfile {
                    mean_clicks: p.mean_clicks,
                    carryover_gamma: p.carryover_gamma,
                })
                .collect(),
            conv_bias: self.conv_bias,
            affinity_scale: self.affinity_scale,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    /// Snake-case mechanism names; order fixes the CAT bit order.
    pub mechanism_order: Vec<String>,
    /// Primary target: `last_click` or `removal_effect_mta`.
    pub primary: String,
    /// `binary` or `fractional`.
    pub label_mode: String,
    pub time_decay_half_life_secs: i64,
    pub mta_lr: f64,
    pub mta_steps: u32,
    pub mta_l2: f64,
}

impl Default for AttributionSection {
    fn default() -> Self {
        let fit = MtaFitConfig::default();
        AttributionSection {
            mechanism_order: vec![
                "last_click".into(),
                "first_click".into(),
                "linear".into(),
                "removal_effect_mta".into(),
            ],
            primary: "last_click".into(),
            label_mode: "binary".into(),
            time_decay_half_life_secs: 21_600,
            mta_lr: fit.lr,
            mta_steps: fit.steps,
            mta_l2: fit.l2,
        }
    }
}

impl AttributionSection {
    pub fn mechanisms(&self) -> Result<Vec<Mechanism>> {
        self.mechanism_order
            .iter()
            .map(|name| {
                Ok(match MechanismTag::parse(name)? {
                    MechanismTag::LastClick => Mechanism::LastClick,
                    MechanismTag::FirstClick => Mechanism::FirstClick,
                    MechanismTag::Linear => Mechanism::Linear,
                    MechanismTag::TimeDecay => Mechanism::TimeDecay {
                        half_life_secs: self.time_decay_half_life_secs,
                    },
                    MechanismTag::RemovalEffectMta => Mechanism::RemovalEffectMta,
                    MechanismTag::ShapleyMta => Mechanism::ShapleyMta,
                })
            })
            .collect()
    }

    pub fn primary_tag(&self) -> Result<MechanismTag> {
        Ok(MechanismTag::parse(&self.primary)?)
    }

    pub fn label_mode(&self) -> Result<LabelMode> {
        Ok(LabelMode::parse(&self.label_mode)?)
    }

    pub fn mta_fit(&self) -> MtaFitConfig {
        MtaFitConfig {
            lr: self.mta_lr,
            steps: self.mta_steps,
            l2: self.mta_l2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Fraction of journeys (earliest by completion ts) used for training.
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub embedding_dim: usize,
    pub shared_mlp: Vec<usize>,
    pub tower_mlp: Vec<usize>,
    pub ptp_mlp: Vec<usize>,
    pub projection_mlp: Vec<usize>,
    pub lambda_aux: f64,
    pub lambda_cat: f64,
    pub stop_gradient_at_k: bool,
}

impl Default for ArchSection {
    fn default() -> Self {
        let core = ArchConfig::default();
        ArchSection {
            embedding_dim: core.embedding_dim,
            shared_mlp: core.shared_mlp,
            tower_mlp: core.tower_mlp,
            ptp_mlp: core.ptp_mlp,
            projection_mlp: core.projection_mlp,
            lambda_aux: core.lambda_aux,
            lambda_cat: core.lambda_cat,
            stop_gradient_at_k: core.stop_gradient_at_k,
        }
    }
}

impl ArchSection {
    /// Core arch for one variant; lambdas for heads a variant lacks are
    /// cleared rather than rejected so one section covers the ablations.
    pub fn to_core(&self, variant: Variant) -> ArchConfig {
        ArchConfig {
            embedding_dim: self.embedding_dim,
            shared_mlp: self.shared_mlp.clone(),
            tower_mlp: self.tower_mlp.clone(),
            ptp_mlp: self.ptp_mlp.clone(),
            projection_mlp: self.projection_mlp.clone(),
            lambda_aux: self.lambda_aux,
            lambda_cat: if variant.has_cat_tower() {
                self.lambda_cat
            } else {
                0.0
            },
            stop_gradient_at_k: self.stop_gradient_at_k && variant.has_fusion(),
            variant,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Passes over the training set.
    pub epochs: u32,
    /// Fraction of epochs that train with the auxiliary losses enabled;
    /// the remaining epochs set `lambda_aux = lambda_cat = 0` so the
    /// primary head consolidates against a frozen knowledge vector.
    /// 1.0 disables annealing.
    pub aux_anneal_fraction: f64,
    /// What to hold fixed during the annealed (primary-only) epochs:
    /// `none`, `towers` (AKA + CAT towers), or `knowledge` (towers,
    /// shared bottom, and embeddings — only the primary path trains).
    pub anneal_freeze: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let hyper = AdamHyper::default();
        TrainSection {
            lr: hyper.lr,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.eps,
            batch_size: mal_core::malnet::DEFAULT_BATCH_SIZE,
            epochs: 3,
            aux_anneal_fraction: 1.0,
            anneal_freeze: "none".into(),
            seeds: vec![1, 2, 3, 4, 5],
            variants: vec![
                "base".into(),
                "shared_bottom_mtl".into(),
                "mal_no_cat".into(),
                "mal_no_multi_attr".into(),
                "mal".into(),
            ],
        }
    }
}

impl TrainSection {
    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Parameter-name prefixes held fixed during annealed epochs.
    pub fn frozen_prefixes(&self) -> Result<Vec<String>> {
        match self.anneal_freeze.as_str() {
            "none" => Ok(vec![]),
            "towers" => Ok(vec!["tower/".into(), "cat/".into()]),
            "knowledge" => Ok(vec![
                "tower/".into(),
                "cat/".into(),
                "shared/".into(),
                "emb/".into(),
            ]),
            other => Err(LabError::Config(format!(
                "train.anneal_freeze must be none|towers|knowledge, got {other}"
            ))),
        }
    }

    pub fn variant_list(&self) -> Result<Vec<Variant>> {
        self.variants
            .iter()
            .map(|v| Ok(Variant::parse(v)?))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Trailing fraction of training samples (by ts) over which user
    /// pos-gain buckets are computed.
    pub gain_window_fraction: f64,
    /// Industries whose carryover_gamma is at least this are labeled
    /// long-path in the industry table.
    pub long_path_gamma: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            gain_window_fraction: 0.25,
            long_path_gamma: 0.8,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.to_core().validate()?;
        let mechanisms = self.attribution.mechanisms()?;
        let primary = self.attribution.primary_tag()?;
        self.attribution.label_mode()?;
        if !mechanisms.iter().any(|m| m.tag() == primary) {
            return Err(LabError::Config(format!(
                "primary {} not in mechanism_order",
                self.attribution.primary
            )));
        }
        if !matches!(
            primary,
            MechanismTag::LastClick | MechanismTag::RemovalEffectMta
        ) {
            return Err(LabError::Config(format!(
                "primary must be last_click or removal_effect_mta, got {}",
                self.attribution.primary
            )));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(LabError::Config(format!(
                "split.train_fraction {} outside (0,1)",
                self.split.train_fraction
            )));
        }
        if !(self.train.aux_anneal_fraction > 0.0 && self.train.aux_anneal_fraction <= 1.0) {
            return Err(LabError::Config(
                "train.aux_anneal_fraction must be in (0, 1]".into(),
            ));
        }
        self.train.frozen_prefixes()?;
        if self.train.seeds.is_empty() {
            return Err(LabError::Config("train.seeds must be non-empty".into()));
        }
        if self.train.variants.is_empty() {
            return Err(LabError::Config("train.variants must be non-empty".into()));
        }
        let variants = self.train.variant_list()?;
        for v in &variants {
            // Every variant must wire under the shared arch section.
            self.arch.to_core(*v).validate()?;
        }
        if !(self.report.gain_window_fraction > 0.0 && self.report.gain_window_fraction <= 1.0) {
            return Err(LabError::Config(format!(
                "report.gain_window_fraction {} outside (0,1]",
                self.report.gain_window_fraction
            )));
        }
        Ok(())
    }

    /// Digest of one serialized section, for artifact staleness checks.
    fn section_digest<T: Serialize>(section: &T) -> u64 {
        let text = toml::to_string(section).expect("section serializes");
        mal_core::digest::fnv64(text.as_bytes())
    }

    pub fn gen_digest(&self) -> u64 {
        self.gen.to_core().digest()
    }

    /// Digest covering everything the sample artifacts depend on.
    pub fn attribute_digest(&self) -> u64 {
        let mut h = mal_core::digest::Fnv64::new();
        h.update(&self.gen_digest().to_le_bytes());
        h.update(&Self::section_digest(&self.attribution).to_le_bytes());
        h.update(&Self::section_digest(&self.split).to_le_bytes());
        h.finish()
    }

    /// Digest covering everything a (variant, seed) checkpoint depends on.
    pub fn train_digest(&self, variant: Variant, seed: u64) -> u64 {
        let mut h = mal_core::digest::Fnv64::new();
        h.update(&self.attribute_digest().to_le_bytes());
        h.update(&Self::section_digest(&self.arch).to_le_bytes());
        h.update(&Self::section_digest(&TrainHyperOnly::of(&self.train)).to_le_bytes());
        h.update(variant.name().as_bytes());
        h.update(&seed.to_le_bytes());
        h.finish()
    }
}

/// Training hyperparameters without the seed/variant lists, so adding a
/// seed does not invalidate existing checkpoints.
#[derive(Serialize)]
struct TrainHyperOnly {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    batch_size: usize,
    epochs: u32,
    aux_anneal_fraction: f64,
    anneal_freeze: String,
}

impl TrainHyperOnly {
    fn of(t: &TrainSection) -> Self {
        TrainHyperOnly {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            epochs: t.epochs,
            aux_anneal_fraction: t.aux_anneal_fraction,
            anneal_freeze: t.anneal_freeze.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_file_resolves_to_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn partial_override() {
        let cfg: ExperimentConfig = toml::from_str(
            "[train]\nseeds = [9]\n[attribution]\nprimary = \"removal_effect_mta\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.seeds, vec![9]);
        assert_eq!(
            cfg.attribution.primary_tag().unwrap(),
            MechanismTag::RemovalEffectMta
        );
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[train]\nlearning_rate = 0.1\n");
        assert!(err.is_err());
    }

    #[test]
    fn bad_primary_rejected() {
        let cfg: ExperimentConfig =
            toml::from_str("[attribution]\nprimary = \"linear\"\n").unwrap();
        assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
    }

    #[test]
    fn digests_track_relevant_sections() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.seeds.push(99);
        // Extra seeds leave artifact digests alone.
        assert_eq!(a.attribute_digest(), b.attribute_digest());
        assert_eq!(
            a.train_digest(Variant::Mal, 1),
            b.train_digest(Variant::Mal, 1)
        );
        let mut c = a.clone();
        c.gen.conv_bias += 0.1;
        assert_ne!(a.gen_digest(), c.gen_digest());
        assert_ne!(a.attribute_digest(), c.attribute_digest());
        let mut d = a.clone();
        d.train.lr *= 2.0;
        assert_eq!(a.attribute_digest(), d.attribute_digest());
        assert_ne!(
            a.train_digest(Variant::Mal, 1),
            d.train_digest(Variant::Mal, 1)
        );
    }
}
