//! Synthetic ad-click journeys with a known conversion process.
//!
//! The generator plants a latent user/ad affinity structure and converts
//! journeys through a geometric-carryover logit: earlier clicks feed the
//! conversion probability with weight `gamma^(age in clicks)`. Long-path
//! industries (high gamma, longer journeys) therefore put genuine signal
//! on non-terminal clicks, which is the property attribution mechanisms
//! are measured against.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::digest::Fnv64;
use crate::rng::CounterRng;
use crate::tensor::sigmoid;
use crate::{MalError, Result};

const TAG_USER_VEC: u64 = 0x7571;
const TAG_AD_VEC: u64 = 0x6164;
const TAG_USER_JOURNEYS: u64 = 0x6a6e;

/// Seconds of simulated traffic.
pub const TIME_HORIZON_SECS: i64 = 60 * 86_400;

/// Journey-length and carryover profile of one industry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndustryProfile {
    /// Mean journey length; lengths are 1-shifted geometric.
    pub mean_clicks: f64,
    /// Carryover of earlier clicks into the conversion logit, in [0,1].
    pub carryover_gamma: f64,
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_users: u32,
    pub n_ads: u32,
    pub n_industries: u32,
    pub latent_dim: u32,
    pub journeys_per_user_mean: f64,
    /// One profile per industry, indexed by industry id.
    pub industry_profiles: Vec<IndustryProfile>,
    pub conv_bias: f64,
    pub affinity_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    /// The default benchmark: calibrated so that (a) the linear/last-click
    /// positive-sample ratio lands in [1.2, 1.6] and (b) long-path
    /// industries carry materially more non-terminal conversion signal
    /// than short-path ones.
    fn default() -> Self {
        GenConfig {
            n_users: 4_000,
            n_ads: 240,
            n_industries: 6,
            latent_dim: 4,
            journeys_per_user_mean: 12.0,
            industry_profiles: alloc::vec![
                IndustryProfile { mean_clicks: 2.4, carryover_gamma: 0.90 },
                IndustryProfile { mean_clicks: 2.2, carryover_gamma: 0.85 },
                IndustryProfile { mean_clicks: 2.0, carryover_gamma: 0.85 },
                IndustryProfile { mean_clicks: 1.2, carryover_gamma: 0.25 },
                IndustryProfile { mean_clicks: 1.15, carryover_gamma: 0.20 },
                IndustryProfile { mean_clicks: 1.1, carryover_gamma: 0.15 },
            ],
            conv_bias: -2.2,
            affinity_scale: 1.2,
            seed: 20_240_601,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(MalError::Config("n_users must be >= 1".to_string()));
        }
        if self.n_ads == 0 {
            return Err(MalError::Config("n_ads must be >= 1".to_string()));
        }
        if self.n_industries == 0 {
            return Err(MalError::Config("n_industries must be >= 1".to_string()));
        }
        if self.latent_dim == 0 {
            return Err(MalError::Config("latent_dim must be >= 1".to_string()));
        }
        if !(self.journeys_per_user_mean > 0.0) {
            return Err(MalError::Config(
                "journeys_per_user_mean must be positive".to_string(),
            ));
        }
        if self.industry_profiles.len() != self.n_industries as usize {
            return Err(MalError::Config(format!(
                "industry_profiles has {} entries for n_industries {}",
                self.industry_profiles.len(),
                self.n_industries
            )));
        }
        for (i, p) in self.industry_profiles.iter().enumerate() {
            if !(p.mean_clicks >= 1.0) {
                return Err(MalError::Config(format!(
                    "industry_profiles[{i}].mean_clicks must be >= 1"
                )));
            }
            if !(0.0..=1.0).contains(&p.carryover_gamma) {
                return Err(MalError::Config(format!(
                    "industry_profiles[{i}].carryover_gamma must be in [0,1]"
                )));
            }
        }
        let has_long = self
            .industry_profiles
            .iter()
            .any(|p| p.carryover_gamma >= 0.8);
        let has_short = self
            .industry_profiles
            .iter()
            .any(|p| p.carryover_gamma <= 0.3);
        if !has_long || !has_short {
            return Err(MalError::Config(
                "industry_profiles needs a long-path industry (carryover_gamma >= 0.8) \
                 and a short-path one (<= 0.3)"
                    .to_string(),
            ));
        }
        Ok(())
    }

    /// Stable fingerprint of every field, for artifact staleness checks.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv64::new();
        let put_u64 = |h: &mut Fnv64, v: u64| h.update(&v.to_le_bytes());
        put_u64(&mut h, self.n_users as u64);
        put_u64(&mut h, self.n_ads as u64);
        put_u64(&mut h, self.n_industries as u64);
        put_u64(&mut h, self.latent_dim as u64);
        h.update(&self.journeys_per_user_mean.to_le_bytes());
        for p in &self.industry_profiles {
            h.update(&p.mean_clicks.to_le_bytes());
            h.update(&p.carryover_gamma.to_le_bytes());
        }
        h.update(&self.conv_bias.to_le_bytes());
        h.update(&self.affinity_scale.to_le_bytes());
        h.update(&self.seed.to_le_bytes());
        h.finish()
    }
}

/// One ad click.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Touchpoint {
    pub ad_id: u32,
    pub industry_id: u32,
    /// Seconds; strictly increasing within a journey.
    pub ts: i64,
    /// 0-based index within the journey.
    pub position: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conversion {
    pub ts: i64,
}

/// One user's ordered clicks plus an optional conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct Journey {
    pub user_id: u32,
    pub journey_id: u64,
    pub industry_id: u32,
    pub clicks: Vec<Touchpoint>,
    pub conversion: Option<Conversion>,
}

impl Journey {
    pub fn converted(&self) -> bool {
        self.conversion.is_some()
    }

    pub fn last_click_ts(&self) -> i64 {
        self.clicks.last().map(|c| c.ts).unwrap_or(0)
    }

    /// Timestamp at which the journey's outcome is fully observed.
    pub fn completion_ts(&self) -> i64 {
        match &self.conversion {
            Some(c) => c.ts,
            None => self.last_click_ts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clicks.is_empty() {
            return Err(MalError::Data(format!(
                "journey {} has no clicks",
                self.journey_id
            )));
        }
        let mut prev = i64::MIN;
        for (i, c) in self.clicks.iter().enumerate() {
            if c.ts <= prev {
                return Err(MalError::Data(format!(
                    "journey {}: non-monotone click timestamps",
                    self.journey_id
                )));
            }
            if c.position as usize != i {
                return Err(MalError::Data(format!(
                    "journey {}: click position {} at index {i}",
                    self.journey_id, c.position
                )));
            }
            prev = c.ts;
        }
        if let Some(conv) = &self.conversion {
            if conv.ts <= self.last_click_ts() {
                return Err(MalError::Data(format!(
                    "journey {}: conversion ts not after last click",
                    self.journey_id
                )));
            }
        }
        Ok(())
    }
}

/// A set of journeys plus the fingerprint of the producing config.
#[derive(Debug, Clone, PartialEq)]
pub struct JourneyLog {
    pub journeys: Vec<Journey>,
    pub gen_config_digest: u64,
}

impl JourneyLog {
    pub fn validate(&self) -> Result<()> {
        let mut seen = alloc::collections::BTreeSet::new();
        for j in &self.journeys {
            j.validate()?;
            if !seen.insert(j.journey_id) {
                return Err(MalError::Data(format!(
                    "duplicate journey_id {}",
                    j.journey_id
                )));
            }
        }
        Ok(())
    }
}

/// Hidden user/ad vectors; recomputable from the config alone.
#[derive(Debug, Clone)]
pub struct Latents {
    dim: usize,
    user_vecs: Vec<f64>,
    ad_vecs: Vec<f64>,
}

impl Latents {
    pub fn from_config(config: &GenConfig) -> Self {
        let root = CounterRng::new(config.seed);
        let dim = config.latent_dim as usize;
        // Entry scale dim^(-1/4) puts <u,a> at unit variance.
        let scale = 1.0 / libm::sqrt(libm::sqrt(dim as f64));
        let mut user_vecs = Vec::with_capacity(config.n_users as usize * dim);
        for u in 0..config.n_users {
            let mut r = root.stream(TAG_USER_VEC, u as u64);
            for _ in 0..dim {
                user_vecs.push(r.normal() * scale);
            }
        }
        let mut ad_vecs = Vec::with_capacity(config.n_ads as usize * dim);
        for a in 0..config.n_ads {
            let mut r = root.stream(TAG_AD_VEC, a as u64);
            for _ in 0..dim {
                ad_vecs.push(r.normal() * scale);
            }
        }
        Latents {
            dim,
            user_vecs,
            ad_vecs,
        }
    }

    pub fn affinity(&self, user_id: u32, ad_id: u32) -> f64 {
        let u = &self.user_vecs[user_id as usize * self.dim..(user_id as usize + 1) * self.dim];
        let a = &self.ad_vecs[ad_id as usize * self.dim..(ad_id as usize + 1) * self.dim];
        u.iter().zip(a).map(|(x, y)| x * y).sum()
    }
}

/// Industry that owns ad `ad_id`; ads are striped across industries.
pub fn ad_industry(ad_id: u32, n_industries: u32) -> u32 {
    ad_id % n_industries
}

fn sample_industry_ad(rng: &mut CounterRng, industry: u32, config: &GenConfig) -> u32 {
    let count = (config.n_ads - industry + config.n_industries - 1) / config.n_industries;
    industry + config.n_industries * rng.below(count as u64) as u32
}

/// Ground-truth conversion probability of a journey.
///
/// With clicks `1..k`, industry carryover `gamma`, scale `s` and bias `b`:
/// `sigmoid(b + s*aff(u, a_k) + s * sum_{i<k} gamma^(k-1-i) * aff(u, a_i))`.
pub fn ground_truth_conv_prob(journey: &Journey, latents: &Latents, config: &GenConfig) -> f64 {
    let gamma = config.industry_profiles[journey.industry_id as usize].carryover_gamma;
    let k = journey.clicks.len();
    let last = &journey.clicks[k - 1];
    let mut logit = config.conv_bias
        + config.affinity_scale * latents.affinity(journey.user_id, last.ad_id);
    for (i, click) in journey.clicks[..k - 1].iter().enumerate() {
        let decay = libm::pow(gamma, (k - 1 - i) as f64);
        logit += config.affinity_scale * decay * latents.affinity(journey.user_id, click.ad_id);
    }
    sigmoid(logit)
}

/// Probability a click on the journey's focal ad repeats on later clicks.
const FOCAL_AD_REPEAT_PROB: f64 = 0.2;
/// Mean gap between clicks, seconds.
const CLICK_GAP_MEAN_SECS: f64 = 4.0 * 3600.0;
/// Mean delay between the final click and a conversion, seconds.
const CONV_DELAY_MEAN_SECS: f64 = 6.0 * 3600.0;

/// Deterministically generate the full journey log for a config.
///
/// Per-user draws come from independent counter streams, so the output is
/// identical regardless of how users are scheduled; journeys are emitted
/// in ascending (user_id, journey_id) order.
pub fn generate_dataset(config: &GenConfig) -> Result<JourneyLog> {
    config.validate()?;
    let latents = Latents::from_config(config);
    let root = CounterRng::new(config.seed);
    let mut journeys = Vec::new();
    for user_id in 0..config.n_users {
        generate_user(user_id, config, &latents, &root, &mut journeys);
    }
    Ok(JourneyLog {
        journeys,
        gen_config_digest: config.digest(),
    })
}

fn generate_user(
    user_id: u32,
    config: &GenConfig,
    latents: &Latents,
    root: &CounterRng,
    out: &mut Vec<Journey>,
) {
    let mut rng = root.stream(TAG_USER_JOURNEYS, user_id as u64);
    let n_journeys = rng.poisson(config.journeys_per_user_mean);
    for j in 0..n_journeys {
        let industry = rng.below(config.n_industries as u64) as u32;
        let profile = &config.industry_profiles[industry as usize];
        // 1-shifted geometric: p = 1/mean keeps the mean at mean_clicks.
        let p = 1.0 / profile.mean_clicks;
        // Capped at the exact-Shapley enumeration bound so every journey
        // is attributable under all mechanisms; the truncated tail mass
        // is negligible for the configured means.
        let length = (1 + rng.geometric(p)).min(crate::attribution::SHAPLEY_MAX_CLICKS as u64);
        let focal_ad = sample_industry_ad(&mut rng, industry, config);

        let start = rng.below(TIME_HORIZON_SECS as u64) as i64;
        let mut ts = start;
        let mut clicks = Vec::with_capacity(length as usize);
        for pos in 0..length {
            let ad_id = if pos == 0 || rng.bernoulli(FOCAL_AD_REPEAT_PROB) {
                focal_ad
            } else {
                sample_industry_ad(&mut rng, industry, config)
            };
            clicks.push(Touchpoint {
                ad_id,
                industry_id: industry,
                ts,
                position: pos as u32,
            });
            ts += 1 + rng.exponential(CLICK_GAP_MEAN_SECS) as i64;
        }

        let journey_id = ((user_id as u64) << 20) | j;
        let mut journey = Journey {
            user_id,
            journey_id,
            industry_id: industry,
            clicks,
            conversion: None,
        };
        let p_conv = ground_truth_conv_prob(&journey, latents, config);
        if rng.bernoulli(p_conv) {
            let delay = 1 + rng.exponential(CONV_DELAY_MEAN_SECS) as i64;
            journey.conversion = Some(Conversion {
                ts: journey.last_click_ts() + delay,
            });
        }
        out.push(journey);
    }
}

/// Train/test partition rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Earliest `fraction` of journeys (by completion ts) go to train.
    Fraction(f64),
    /// Journeys with completion ts <= cutoff go to train.
    Cutoff(i64),
}

/// Temporal split on the conversion-window-complete timestamp.
pub fn split_train_test(log: &JourneyLog, spec: SplitSpec) -> Result<(JourneyLog, JourneyLog)> {
    if log.journeys.is_empty() {
        return Err(MalError::Config("cannot split an empty journey log".to_string()));
    }
    let cutoff = match spec {
        SplitSpec::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(MalError::Config(format!(
                    "split fraction {f} outside (0,1)"
                )));
            }
            let mut keys: Vec<i64> = log.journeys.iter().map(|j| j.completion_ts()).collect();
            keys.sort_unstable();
            let idx = ((keys.len() as f64) * f) as usize;
            let idx = idx.clamp(1, keys.len() - 1);
            keys[idx - 1]
        }
        SplitSpec::Cutoff(c) => c,
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for j in &log.journeys {
        if j.completion_ts() <= cutoff {
            train.push(j.clone());
        } else {
            test.push(j.clone());
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(MalError::Config(format!(
            "degenerate split at cutoff {cutoff}: {} train / {} test journeys",
            train.len(),
            test.len()
        )));
    }
    Ok((
        JourneyLog {
            journeys: train,
            gen_config_digest: log.gen_config_digest,
        },
        JourneyLog {
            journeys: test,
            gen_config_digest: log.gen_config_digest,
        },
    ))
}
