//! Stage orchestration: gen -> attribute -> train -> eval -> report.
//!
//! Every stage writes a small meta JSON next to its artifacts holding
//! the digest of everything it depended on. A stage is skipped when its
//! meta digest matches the current config (idempotence) and refuses to
//! run when an upstream digest disagrees (staleness).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mal_core::attribution::{
    build_samples, fit_mta_model, positive_ratio_report, MechanismTag, MtaModel, Sample,
    SampleSet,
};
use mal_core::journey::{generate_dataset, split_train_test, SplitSpec};
use mal_core::malnet::{build_model, predict_primary, MalModel, Variant};
use mal_core::metrics::{
    gain_bucket, gauc, group_lift_report, spearman, weighted_auc, Grouping, ScoredSample,
    GAIN_BUCKETS,
};
use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::io;
use crate::report::{
    EvalArtifact, FinalReport, GainBucketRow, IndustryRow, RatioRow, SeedResult, VariantSummary,
};

#[derive(Serialize, Deserialize)]
struct StageMeta {
    digest: String,
}

fn hex(d: u64) -> String {
    format!("{d:016x}")
}

/// One configured experiment bound to a workdir.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub force: bool,
    pub jobs: usize,
    pub quiet: bool,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Lab {
            cfg,
            force: false,
            jobs: 1,
            quiet: false,
        }
    }

    fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }

    pub fn journeys_path(&self) -> PathBuf {
        self.cfg.paths.workdir.join("journeys.jsonl")
    }

    fn samples_dir(&self) -> PathBuf {
        self.cfg.paths.workdir.join("samples")
    }

    pub fn train_samples_path(&self) -> PathBuf {
        self.samples_dir().join("train.jsonl")
    }

    pub fn test_samples_path(&self) -> PathBuf {
        self.samples_dir().join("test.jsonl")
    }

    fn mta_path(&self) -> PathBuf {
        self.samples_dir().join("mta.json")
    }

    fn samples_meta_path(&self) -> PathBuf {
        self.samples_dir().join("meta.json")
    }

    pub fn ckpt_path(&self, variant: Variant, seed: u64) -> PathBuf {
        self.cfg
            .paths
            .workdir
            .join("ckpt")
            .join(format!("{}_s{}.ckpt", variant.name(), seed))
    }

    fn ckpt_meta_path(&self, variant: Variant, seed: u64) -> PathBuf {
        self.cfg
            .paths
            .workdir
            .join("ckpt")
            .join(format!("{}_s{}.meta.json", variant.name(), seed))
    }

    pub fn eval_path(&self, variant: Variant, seed: u64) -> PathBuf {
        self.cfg
            .paths
            .workdir
            .join("eval")
            .join(format!("{}_s{}.json", variant.name(), seed))
    }

    fn report_dir(&self) -> PathBuf {
        self.cfg.paths.workdir.join("report")
    }

    /// (variant, seed) grid in config order.
    fn grid(&self) -> Result<Vec<(Variant, u64)>> {
        let variants = self.cfg.train.variant_list()?;
        let mut out = Vec::new();
        for &v in &variants {
            for &s in &self.cfg.train.seeds {
                out.push((v, s));
            }
        }
        Ok(out)
    }

    fn meta_fresh(&self, path: &PathBuf, digest: u64) -> bool {
        matches!(
            io::read_json::<StageMeta>(path),
            Ok(meta) if meta.digest == hex(digest)
        )
    }

    fn write_meta(&self, path: &PathBuf, digest: u64) -> Result<()> {
        io::write_json(path, &StageMeta { digest: hex(digest) })
    }

    pub fn cmd_gen(&self) -> Result<()> {
        let digest = self.cfg.gen_digest();
        let path = self.journeys_path();
        if !self.force && path.exists() {
            if let Ok(meta) = io::read_json::<io::JourneyMeta>(&io::meta_path(&path)) {
                if meta.gen_config_digest == hex(digest) {
                    self.say(&format!("gen: up to date, skipping ({})", path.display()));
                    return Ok(());
                }
            }
        }
        let log = generate_dataset(&self.cfg.gen.to_core())?;
        io::write_journeys(&log, &path)?;
        self.say(&format!(
            "gen: wrote {} journeys to {}",
            log.journeys.len(),
            path.display()
        ));
        Ok(())
    }

    fn require_journeys(&self) -> Result<mal_core::journey::JourneyLog> {
        let path = self.journeys_path();
        if !path.exists() {
            return Err(LabError::Dependency(format!(
                "missing journey log {} (run `gen` first)",
                path.display()
            )));
        }
        let log = io::read_journeys(&path)?;
        if log.gen_config_digest != self.cfg.gen_digest() {
            return Err(LabError::Stale(format!(
                "{} was generated from a different gen config (digest {} vs {}); rerun `gen`",
                path.display(),
                hex(log.gen_config_digest),
                hex(self.cfg.gen_digest())
            )));
        }
        Ok(log)
    }

    pub fn cmd_attribute(&self) -> Result<()> {
        let digest = self.cfg.attribute_digest();
        if !self.force && self.meta_fresh(&self.samples_meta_path(), digest) {
            self.say("attribute: up to date, skipping");
            return Ok(());
        }
        let log = self.require_journeys()?;
        let (train_log, test_log) =
            split_train_test(&log, SplitSpec::Fraction(self.cfg.split.train_fraction))?;
        let mechanisms = self.cfg.attribution.mechanisms()?;
        let primary = self.cfg.attribution.primary_tag()?;
        let label_mode = self.cfg.attribution.label_mode()?;
        let needs_mta = mechanisms.iter().any(|m| m.tag().needs_mta_model());
        // Fitted on the training split only; the test split never leaks
        // into attribution.
        let mta = if needs_mta {
            Some(fit_mta_model(
                &train_log,
                self.cfg.gen.industry_profiles.len() as u32,
                &self.cfg.attribution.mta_fit(),
            )?)
        } else {
            None
        };
        let train_set =
            build_samples(&train_log, &mechanisms, primary, label_mode, mta.as_ref())?;
        let test_set = build_samples(&test_log, &mechanisms, primary, label_mode, mta.as_ref())?;
        io::write_samples(&train_set, &self.train_samples_path())?;
        io::write_samples(&test_set, &self.test_samples_path())?;
        if let Some(m) = &mta {
            io::write_json(&self.mta_path(), &MtaJson::of(m))?;
        }
        self.write_meta(&self.samples_meta_path(), digest)?;
        self.say(&format!(
            "attribute: wrote {} train / {} test samples",
            train_set.samples.len(),
            test_set.samples.len()
        ));
        Ok(())
    }

    fn require_samples(&self, path: &PathBuf) -> Result<SampleSet> {
        if !path.exists() {
            return Err(LabError::Dependency(format!(
                "missing sample file {} (run `attribute` first)",
                path.display()
            )));
        }
        if !self.meta_fresh(&self.samples_meta_path(), self.cfg.attribute_digest()) {
            return Err(LabError::Stale(format!(
                "{} is stale relative to the current config; rerun `attribute`",
                path.display()
            )));
        }
        io::read_samples(path)
    }

    fn vocab(&self) -> mal_core::attribution::FeatureVocab {
        mal_core::attribution::FeatureVocab {
            n_users: self.cfg.gen.n_users as usize,
            n_ads: self.cfg.gen.n_ads as usize,
            n_industries: self.cfg.gen.industry_profiles.len(),
        }
    }

    fn mechanism_tags(&self) -> Result<Vec<MechanismTag>> {
        Ok(self
            .cfg
            .attribution
            .mechanisms()?
            .iter()
            .map(|m| m.tag())
            .collect())
    }

    fn build_variant(&self, variant: Variant, seed: u64) -> Result<MalModel> {
        let arch = self.cfg.arch.to_core(variant);
        Ok(build_model(
            &arch,
            self.vocab(),
            &self.mechanism_tags()?,
            self.cfg.attribution.primary_tag()?,
            seed,
        )?)
    }

    pub fn cmd_train(&self) -> Result<()> {
        let train_set = self.require_samples(&self.train_samples_path())?;
        let mut tasks = Vec::new();
        for (variant, seed) in self.grid()? {
            let digest = self.cfg.train_digest(variant, seed);
            if !self.force
                && self.ckpt_path(variant, seed).exists()
                && self.meta_fresh(&self.ckpt_meta_path(variant, seed), digest)
            {
                self.say(&format!(
                    "train: {} seed {} up to date, skipping",
                    variant.name(),
                    seed
                ));
                continue;
            }
            tasks.push((variant, seed, digest));
        }
        self.run_tasks(&tasks, |&(variant, seed, digest)| {
            let mut model = self.build_variant(variant, seed)?;
            let hyper = self.cfg.train.hyper();
            let epochs = self.cfg.train.epochs.max(1) as u64;
            let aux_epochs =
                (epochs as f64 * self.cfg.train.aux_anneal_fraction).ceil() as u64;
            let frozen = self.cfg.train.frozen_prefixes()?;
            let mut stats = None;
            for epoch in 0..epochs {
                if epoch == aux_epochs {
                    model.meta.arch.lambda_aux = 0.0;
                    model.meta.arch.lambda_cat = 0.0;
                }
                let shuffle = seed.wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let frozen_now: &[String] = if epoch >= aux_epochs { &frozen } else { &[] };
                stats = Some(mal_core::malnet::train_with_frozen_prefixes(
                    &mut model,
                    &train_set,
                    &hyper,
                    shuffle,
                    self.cfg.train.batch_size,
                    frozen_now,
                )?);
            }
            let stats = stats.expect("at least one epoch");
            ckpt::save_checkpoint(&model.store, &self.ckpt_path(variant, seed))?;
            self.write_meta(&self.ckpt_meta_path(variant, seed), digest)?;
            self.say(&format!(
                "train: {} seed {} done ({} steps, final mean loss {:.4})",
                variant.name(),
                seed,
                stats.steps,
                stats.final_mean_loss
            ));
            Ok(())
        })
    }

    /// Run independent jobs on up to `self.jobs` threads. Each job owns
    /// its own artifacts, so completion order is irrelevant.
    fn run_tasks<T, F>(&self, tasks: &[T], job: F) -> Result<()>
    where
        T: Sync,
        F: Fn(&T) -> Result<()> + Sync,
    {
        let workers = self.jobs.clamp(1, tasks.len().max(1));
        if workers <= 1 {
            for t in tasks {
                job(t)?;
            }
            return Ok(());
        }
        let next = AtomicUsize::new(0);
        let failure: Mutex<Option<LabError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= tasks.len() || failure.lock().unwrap().is_some() {
                        break;
                    }
                    if let Err(e) = job(&tasks[i]) {
                        failure.lock().unwrap().get_or_insert(e);
                        break;
                    }
                });
            }
        });
        match failure.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Scored test samples under the primary mechanism.
    fn scored(&self, test_set: &SampleSet, scores: &[f64]) -> Result<Vec<ScoredSample>> {
        if scores.len() != test_set.samples.len() {
            return Err(LabError::Corrupt(format!(
                "evaluation holds {} scores for {} test samples",
                scores.len(),
                test_set.samples.len()
            )));
        }
        let p = test_set.primary_index();
        Ok(test_set
            .samples
            .iter()
            .zip(scores)
            .map(|(s, &score)| ScoredSample {
                score,
                label: s.labels[p].label > 0.0,
                weight: s.labels[p].weight,
                user_id: s.features.user_id,
                industry_id: s.features.industry_id,
            })
            .collect())
    }

    pub fn cmd_eval(&self) -> Result<()> {
        let test_set = self.require_samples(&self.test_samples_path())?;
        let mut tasks = Vec::new();
        for (variant, seed) in self.grid()? {
            let digest = self.cfg.train_digest(variant, seed);
            let out = self.eval_path(variant, seed);
            if !self.force && out.exists() {
                if let Ok(existing) = io::read_json::<EvalArtifact>(&out) {
                    if existing.train_digest == hex(digest) {
                        self.say(&format!(
                            "eval: {} seed {} up to date, skipping",
                            variant.name(),
                            seed
                        ));
                        continue;
                    }
                }
            }
            tasks.push((variant, seed, digest));
        }
        self.run_tasks(&tasks, |&(variant, seed, digest)| {
            let ckpt_path = self.ckpt_path(variant, seed);
            if !ckpt_path.exists() {
                return Err(LabError::Dependency(format!(
                    "missing checkpoint {} (run `train` first)",
                    ckpt_path.display()
                )));
            }
            if !self.meta_fresh(&self.ckpt_meta_path(variant, seed), digest) {
                return Err(LabError::Stale(format!(
                    "{} is stale relative to the current config; rerun `train`",
                    ckpt_path.display()
                )));
            }
            let mut model = self.build_variant(variant, seed)?;
            let loaded = ckpt::load_checkpoint(&ckpt_path)?;
            ckpt::restore_into(&mut model.store, &loaded)?;
            let scores = predict_primary(&model, &test_set.samples)?;
            let scored = self.scored(&test_set, &scores)?;
            let auc = weighted_auc(&scored)?;
            let g = gauc(&scored)?;
            let artifact = EvalArtifact {
                variant: variant.name().to_string(),
                seed,
                train_digest: hex(digest),
                auc,
                gauc: g.value,
                users_counted: g.users_counted,
                users_skipped: g.users_skipped,
                scores,
            };
            io::write_json(&self.eval_path(variant, seed), &artifact)?;
            self.say(&format!(
                "eval: {} seed {} auc {:.6} gauc {:.6}",
                variant.name(),
                seed,
                auc,
                g.value
            ));
            Ok(())
        })
    }

    fn require_eval(&self, variant: Variant, seed: u64) -> Result<EvalArtifact> {
        let path = self.eval_path(variant, seed);
        if !path.exists() {
            return Err(LabError::Dependency(format!(
                "missing evaluation {} (run `eval` first)",
                path.display()
            )));
        }
        let artifact: EvalArtifact = io::read_json(&path)?;
        let expect = hex(self.cfg.train_digest(variant, seed));
        if artifact.train_digest != expect {
            return Err(LabError::Stale(format!(
                "{} is stale relative to the current config; rerun `eval`",
                path.display()
            )));
        }
        Ok(artifact)
    }

    /// Per-user positive-count gain (linear minus last-click) over the
    /// trailing window of training samples, plus per-bucket mean gains.
    fn user_gains(&self, train_set: &SampleSet) -> Result<(BTreeMap<u32, u64>, BTreeMap<u32, f64>)> {
        let lin = train_set.mechanism_index(MechanismTag::Linear)?;
        let last = train_set.mechanism_index(MechanismTag::LastClick)?;
        let mut ts: Vec<i64> = train_set.samples.iter().map(|s| s.ts).collect();
        ts.sort_unstable();
        let cut_idx = ((ts.len() as f64) * (1.0 - self.cfg.report.gain_window_fraction)) as usize;
        let cutoff = ts[cut_idx.min(ts.len() - 1)];
        let mut lin_pos: BTreeMap<u32, u64> = BTreeMap::new();
        let mut last_pos: BTreeMap<u32, u64> = BTreeMap::new();
        for s in &train_set.samples {
            if s.ts < cutoff {
                continue;
            }
            let user = s.features.user_id;
            if s.labels[lin].label > 0.0 {
                *lin_pos.entry(user).or_insert(0) += 1;
            }
            if s.labels[last].label > 0.0 {
                *last_pos.entry(user).or_insert(0) += 1;
            }
            lin_pos.entry(user).or_insert(0);
        }
        let mut gains = BTreeMap::new();
        for (&user, &lp) in &lin_pos {
            let gain = lp.saturating_sub(*last_pos.get(&user).unwrap_or(&0));
            gains.insert(user, gain);
        }
        let mut sum: BTreeMap<u32, (f64, u64)> = BTreeMap::new();
        for &gain in gains.values() {
            let e = sum.entry(gain_bucket(gain)).or_insert((0.0, 0));
            e.0 += gain as f64;
            e.1 += 1;
        }
        let mean_by_bucket = sum
            .into_iter()
            .map(|(k, (total, n))| (k, total / n as f64))
            .collect();
        Ok((gains, mean_by_bucket))
    }

    pub fn cmd_report(&self) -> Result<FinalReport> {
        let report_digest = {
            let mut h = mal_core::digest::Fnv64::new();
            for (variant, seed) in self.grid()? {
                h.update(&self.cfg.train_digest(variant, seed).to_le_bytes());
            }
            h.update(self.cfg.to_toml().as_bytes());
            h.finish()
        };
        let report_json = self.report_dir().join("report.json");
        if !self.force && self.meta_fresh(&self.report_dir().join("meta.json"), report_digest) {
            self.say("report: up to date, skipping");
            return io::read_json(&report_json);
        }
        let train_set = self.require_samples(&self.train_samples_path())?;
        let test_set = self.require_samples(&self.test_samples_path())?;
        let primary = self.cfg.attribution.primary_tag()?;

        let ratios = positive_ratio_report(&train_set, primary)?;
        let positive_ratios = ratios
            .rows
            .iter()
            .map(|(tag, count, ratio)| RatioRow {
                mechanism: tag.name().to_string(),
                positives: *count,
                ratio: *ratio,
            })
            .collect();

        let variants = self.cfg.train.variant_list()?;
        let mut summaries = Vec::new();
        let mut artifacts: BTreeMap<(String, u64), EvalArtifact> = BTreeMap::new();
        for &variant in &variants {
            let mut per_seed = Vec::new();
            for &seed in &self.cfg.train.seeds {
                let a = self.require_eval(variant, seed)?;
                per_seed.push(SeedResult {
                    seed,
                    auc: a.auc,
                    gauc: a.gauc,
                    users_counted: a.users_counted,
                    users_skipped: a.users_skipped,
                });
                artifacts.insert((variant.name().to_string(), seed), a);
            }
            let n = per_seed.len() as f64;
            summaries.push(VariantSummary {
                variant: variant.name().to_string(),
                gauc_mean: per_seed.iter().map(|r| r.gauc).sum::<f64>() / n,
                gauc_min: per_seed.iter().map(|r| r.gauc).fold(f64::INFINITY, f64::min),
                gauc_max: per_seed
                    .iter()
                    .map(|r| r.gauc)
                    .fold(f64::NEG_INFINITY, f64::max),
                auc_mean: per_seed.iter().map(|r| r.auc).sum::<f64>() / n,
                per_seed,
            });
        }

        // Lift tables: mal vs base, when both were run.
        let mut lift_gain_buckets = Vec::new();
        let mut lift_industries = Vec::new();
        let mut lift_spearman = None;
        let mut dropped_groups = 0u32;
        let have_pair =
            variants.contains(&Variant::Mal) && variants.contains(&Variant::Base);
        let have_gain_mechs = train_set.mechanism_index(MechanismTag::Linear).is_ok()
            && train_set.mechanism_index(MechanismTag::LastClick).is_ok();
        if have_pair && have_gain_mechs {
            let (gains, mean_gain_by_bucket) = self.user_gains(&train_set)?;
            // Accumulators keyed by group: (delta sum, seed count, samples, users).
            let mut bucket_acc: BTreeMap<u32, (f64, u32, usize, u32)> = BTreeMap::new();
            let mut industry_acc: BTreeMap<u32, (f64, u32, usize, u32)> = BTreeMap::new();
            for &seed in &self.cfg.train.seeds {
                let base = &artifacts[&(Variant::Base.name().to_string(), seed)];
                let mal = &artifacts[&(Variant::Mal.name().to_string(), seed)];
                let base_scored = self.scored(&test_set, &base.scores)?;
                let mal_scored = self.scored(&test_set, &mal.scores)?;
                for (grouping, acc) in [
                    (Grouping::UserPosGainBucket, &mut bucket_acc),
                    (Grouping::Industry, &mut industry_acc),
                ] {
                    let lift = group_lift_report(
                        &base_scored,
                        &mal_scored,
                        grouping,
                        &gains,
                        &mean_gain_by_bucket,
                    )?;
                    dropped_groups += lift.dropped_groups;
                    for row in &lift.rows {
                        let e = acc.entry(row.key).or_insert((0.0, 0, 0, 0));
                        e.0 += row.delta;
                        e.1 += 1;
                        e.2 = row.n_samples;
                        e.3 = row.n_users;
                    }
                }
            }
            for bucket in 0..GAIN_BUCKETS {
                if let Some(&(delta_sum, n_seeds, n_samples, n_users)) = bucket_acc.get(&bucket) {
                    lift_gain_buckets.push(GainBucketRow {
                        bucket,
                        n_users,
                        n_samples,
                        mean_pos_gain: *mean_gain_by_bucket.get(&bucket).unwrap_or(&0.0),
                        delta_gauc_mean: delta_sum / n_seeds as f64,
                    });
                }
            }
            if lift_gain_buckets.len() >= 2 {
                let xs: Vec<f64> = lift_gain_buckets.iter().map(|b| b.bucket as f64).collect();
                let ys: Vec<f64> = lift_gain_buckets.iter().map(|b| b.delta_gauc_mean).collect();
                lift_spearman = Some(spearman(&xs, &ys)?);
            }
            for (&industry, &(delta_sum, n_seeds, n_samples, _)) in &industry_acc {
                let gamma = self
                    .cfg
                    .gen
                    .industry_profiles
                    .get(industry as usize)
                    .map(|p| p.carryover_gamma)
                    .unwrap_or(0.0);
                lift_industries.push(IndustryRow {
                    industry_id: industry,
                    long_path: gamma >= self.cfg.report.long_path_gamma,
                    n_samples,
                    delta_auc_mean: delta_sum / n_seeds as f64,
                });
            }
        }

        let report = FinalReport {
            config_digest: hex(self.cfg.attribute_digest()),
            primary: primary.name().to_string(),
            label_mode: self.cfg.attribution.label_mode.clone(),
            seeds: self.cfg.train.seeds.clone(),
            train_samples: train_set.samples.len(),
            test_samples: test_set.samples.len(),
            positive_ratios,
            variants: summaries,
            lift_gain_buckets,
            lift_spearman,
            lift_industries,
            dropped_groups,
        };
        io::write_json(&report_json, &report)?;
        std::fs::write(self.report_dir().join("report.txt"), report.render_text())
            .map_err(|e| LabError::io(&self.report_dir().join("report.txt"), e))?;
        std::fs::write(
            self.report_dir().join("groups.csv"),
            report.render_groups_csv(),
        )
        .map_err(|e| LabError::io(&self.report_dir().join("groups.csv"), e))?;
        self.write_meta(&self.report_dir().join("meta.json"), report_digest)?;
        self.say(&format!(
            "report: wrote {}",
            self.report_dir().join("report.txt").display()
        ));
        Ok(report)
    }

    /// gen -> attribute -> train -> eval -> report.
    pub fn run_all(&self) -> Result<FinalReport> {
        self.cmd_gen()?;
        self.cmd_attribute()?;
        self.cmd_train()?;
        self.cmd_eval()?;
        self.cmd_report()
    }

    /// The ablation trio plus the full model and its baseline.
    pub fn run_ablate(&self) -> Result<FinalReport> {
        let mut cfg = self.cfg.clone();
        cfg.train.variants = vec![
            "base".into(),
            "mal_no_cat".into(),
            "mal_no_multi_attr".into(),
            "mal".into(),
        ];
        let lab = Lab {
            cfg,
            force: self.force,
            jobs: self.jobs,
            quiet: self.quiet,
        };
        lab.run_all()
    }

    /// Self-check: gradient fidelity on the full graph and the metric
    /// oracle comparison. Returns a numeric error on failure.
    pub fn cmd_check(&self) -> Result<()> {
        use mal_core::optim::grad_check;
        use mal_core::rng::CounterRng;
        use mal_core::MalError;

        // Gradient fidelity at a generic parameter point (the tiny
        // embedding init would sit too close to relu kinks for finite
        // differences).
        let vocab = mal_core::attribution::FeatureVocab {
            n_users: 50,
            n_ads: 20,
            n_industries: 6,
        };
        let tags = self.mechanism_tags()?;
        let arch = self.cfg.arch.to_core(Variant::Mal);
        let model = build_model(&arch, vocab, &tags, self.cfg.attribution.primary_tag()?, 17)?;
        let mut store = model.store.clone();
        let mut rng = CounterRng::new(99);
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for n in &names {
            for v in store.value_mut(n)?.data_mut() {
                *v = rng.normal() * 0.1;
            }
        }
        let batch = check_batch(&tags, 16);
        store.zero_grads();
        mal_core::malnet::batch_backward(&model.meta, &mut store, &batch)?;
        let analytic: BTreeMap<String, mal_core::tensor::Tensor> = store
            .iter()
            .map(|(n, p)| (n.to_string(), p.grad.clone()))
            .collect();
        let meta = model.meta.clone();
        let err = grad_check(
            |s| mal_core::malnet::batch_loss(&meta, s, &batch),
            &mut store,
            &analytic,
            1e-5,
            7,
        )?;
        self.say(&format!("check: grad max relative error {err:.3e}"));
        if err >= 1e-4 {
            return Err(LabError::Core(MalError::Numeric(format!(
                "gradient check failed: max relative error {err:.3e} >= 1e-4"
            ))));
        }

        // Metric oracle: sorted implementation vs O(M^2) brute force.
        let mut worst = 0.0f64;
        for i in 0..50 {
            let mut rng = CounterRng::new(1000 + i);
            let m = 20 + rng.below(300) as usize;
            let samples: Vec<ScoredSample> = (0..m)
                .map(|_| ScoredSample {
                    score: (rng.below(40) as f64) / 10.0,
                    label: rng.bernoulli(0.3),
                    weight: 0.1 + rng.uniform(),
                    user_id: rng.below(20) as u32,
                    industry_id: rng.below(6) as u32,
                })
                .collect();
            if !samples.iter().any(|s| s.label) || !samples.iter().any(|s| !s.label) {
                continue;
            }
            let fast = weighted_auc(&samples)?;
            let slow = mal_core::metrics::weighted_auc_bruteforce(&samples)?;
            worst = worst.max((fast - slow).abs());
        }
        self.say(&format!("check: auc oracle max deviation {worst:.3e}"));
        if worst >= 1e-12 {
            return Err(LabError::Core(MalError::Numeric(format!(
                "weighted_auc oracle check failed: deviation {worst:.3e} >= 1e-12"
            ))));
        }
        self.say("check: ok");
        Ok(())
    }
}

/// A synthetic batch for the self-check.
fn check_batch(tags: &[MechanismTag], n: usize) -> Vec<Sample> {
    use mal_core::attribution::{cat_label, Features, LabelWeight};
    use mal_core::rng::CounterRng;
    let mut rng = CounterRng::new(5);
    (0..n)
        .map(|i| {
            let bits: Vec<u8> = tags.iter().map(|_| rng.bernoulli(0.4) as u8).collect();
            Sample {
                features: Features {
                    user_id: (i % 50) as u32,
                    ad_id: (i % 20) as u32,
                    industry_id: (i % 6) as u32,
                    position_bucket: (i % 4) as u8,
                    recency_bucket: (i % 8) as u8,
                    clickcount_bucket: (i % 6) as u8,
                },
                labels: bits
                    .iter()
                    .map(|&b| LabelWeight {
                        label: b as f64,
                        weight: if b == 1 { 0.5 } else { 1.0 },
                    })
                    .collect(),
                cat_class: cat_label(&bits).unwrap(),
                journey_id: i as u64,
                position: 0,
                ts: i as i64,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct MtaJson {
    n_industries: u32,
    theta: Vec<f64>,
    bias: f64,
}

impl MtaJson {
    fn of(m: &MtaModel) -> Self {
        MtaJson {
            n_industries: m.n_industries,
            theta: m.theta.clone(),
            bias: m.bias,
        }
    }
}
