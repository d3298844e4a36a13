//! Report data model and rendering: text table, JSON, and CSV for the
//! grouped breakdowns.

use serde::{Deserialize, Serialize};

/// Per-(variant, seed) evaluation artifact persisted by the eval stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalArtifact {
    pub variant: String,
    pub seed: u64,
    /// Digest of everything the checkpoint depended on, hex.
    pub train_digest: String,
    pub auc: f64,
    pub gauc: f64,
    pub users_counted: u32,
    pub users_skipped: u32,
    /// Primary conversion probabilities, aligned with the test set order.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub auc: f64,
    pub gauc: f64,
    pub users_counted: u32,
    pub users_skipped: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub gauc_mean: f64,
    pub gauc_min: f64,
    pub gauc_max: f64,
    pub auc_mean: f64,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RatioRow {
    pub mechanism: String,
    pub positives: u64,
    /// positives / positives(reference).
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GainBucketRow {
    /// Pos-gain bucket: 0, 1, 2, >=3.
    pub bucket: u32,
    pub n_users: u32,
    pub n_samples: usize,
    /// Mean per-user positive-count gain (linear minus last-click) over
    /// the trailing training window.
    pub mean_pos_gain: f64,
    /// Mean over seeds of GAUC(treatment) - GAUC(base) in this bucket.
    pub delta_gauc_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndustryRow {
    pub industry_id: u32,
    pub long_path: bool,
    pub n_samples: usize,
    pub delta_auc_mean: f64,
}

/// The aggregated cross-seed report. The `lift_*` tables compare the
/// `mal` variant against `base` and are present only when both were run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinalReport {
    pub config_digest: String,
    pub primary: String,
    pub label_mode: String,
    pub seeds: Vec<u64>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub positive_ratios: Vec<RatioRow>,
    pub variants: Vec<VariantSummary>,
    pub lift_gain_buckets: Vec<GainBucketRow>,
    pub lift_spearman: Option<f64>,
    pub lift_industries: Vec<IndustryRow>,
    pub dropped_groups: u32,
}

impl FinalReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let push = |out: &mut String, s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        push(&mut out, format!("experiment {}", self.config_digest));
        push(
            &mut out,
            format!(
                "primary={} label_mode={} seeds={:?} train={} test={}",
                self.primary, self.label_mode, self.seeds, self.train_samples, self.test_samples
            ),
        );
        push(&mut out, String::new());
        push(&mut out, "positive ratios (reference = primary)".into());
        for r in &self.positive_ratios {
            push(
                &mut out,
                format!("  {:<20} {:>8}  {:.4}", r.mechanism, r.positives, r.ratio),
            );
        }
        push(&mut out, String::new());
        push(
            &mut out,
            format!(
                "{:<20} {:>10} {:>10} {:>10} {:>10}",
                "variant", "gauc_mean", "gauc_min", "gauc_max", "auc_mean"
            ),
        );
        for v in &self.variants {
            push(
                &mut out,
                format!(
                    "{:<20} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
                    v.variant, v.gauc_mean, v.gauc_min, v.gauc_max, v.auc_mean
                ),
            );
        }
        if !self.lift_gain_buckets.is_empty() {
            push(&mut out, String::new());
            push(&mut out, "user pos-gain buckets (mal vs base)".into());
            push(
                &mut out,
                format!(
                    "{:>6} {:>8} {:>9} {:>13} {:>12}",
                    "bucket", "users", "samples", "mean_gain", "delta_gauc"
                ),
            );
            for b in &self.lift_gain_buckets {
                push(
                    &mut out,
                    format!(
                        "{:>6} {:>8} {:>9} {:>13.4} {:>12.6}",
                        b.bucket, b.n_users, b.n_samples, b.mean_pos_gain, b.delta_gauc_mean
                    ),
                );
            }
            if let Some(s) = self.lift_spearman {
                push(&mut out, format!("spearman(bucket, delta_gauc) = {s:.4}"));
            }
        }
        if !self.lift_industries.is_empty() {
            push(&mut out, String::new());
            push(&mut out, "industries (mal vs base)".into());
            push(
                &mut out,
                format!(
                    "{:>8} {:>10} {:>9} {:>11}",
                    "industry", "long_path", "samples", "delta_auc"
                ),
            );
            for i in &self.lift_industries {
                push(
                    &mut out,
                    format!(
                        "{:>8} {:>10} {:>9} {:>11.6}",
                        i.industry_id, i.long_path, i.n_samples, i.delta_auc_mean
                    ),
                );
            }
        }
        if self.dropped_groups > 0 {
            push(
                &mut out,
                format!("warning: {} group(s) dropped (metric undefined)", self.dropped_groups),
            );
        }
        out
    }

    /// Group tables as CSV for plotting.
    pub fn render_groups_csv(&self) -> String {
        let mut out = String::from("table,key,long_path,n_users,n_samples,mean_pos_gain,delta\n");
        for b in &self.lift_gain_buckets {
            out.push_str(&format!(
                "gain_bucket,{},,{},{},{},{}\n",
                b.bucket, b.n_users, b.n_samples, b.mean_pos_gain, b.delta_gauc_mean
            ));
        }
        for i in &self.lift_industries {
            out.push_str(&format!(
                "industry,{},{},,{},,{}\n",
                i.industry_id, i.long_path, i.n_samples, i.delta_auc_mean
            ));
        }
        out
    }
}
