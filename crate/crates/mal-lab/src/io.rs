//! JSON Lines readers/writers for journey logs and sample sets.
//!
//! Journey log: one journey per line,
//! `{"user_id":…, "journey_id":…, "industry_id":…, "clicks":[{"ad_id":…, "ts":…}], "conversion":{"ts":…}|null}`,
//! UTF-8 with LF line endings. A sidecar `<stem>.meta.json` carries the
//! generating config digest.
//!
//! Sample set: a header line recording mechanism_order / primary /
//! label_mode, then one sample per line with per-mechanism
//! `{"l":…, "w":…}` pairs and the CAT class.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mal_core::attribution::{
    Features, LabelMode, LabelWeight, MechanismTag, Sample, SampleSet,
};
use mal_core::journey::{Conversion, Journey, JourneyLog, Touchpoint};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Serialize, Deserialize)]
struct ClickLine {
    ad_id: u32,
    ts: i64,
}

#[derive(Serialize, Deserialize)]
struct ConversionLine {
    ts: i64,
}

#[derive(Serialize, Deserialize)]
struct JourneyLine {
    user_id: u32,
    journey_id: u64,
    industry_id: u32,
    clicks: Vec<ClickLine>,
    conversion: Option<ConversionLine>,
}

/// Sidecar path for `x.jsonl`: `x.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

#[derive(Serialize, Deserialize)]
pub struct JourneyMeta {
    /// Hex, to stay exact beyond JSON's 2^53 integer range.
    pub gen_config_digest: String,
}

pub fn write_journeys(log: &JourneyLog, path: &Path) -> Result<()> {
    log.validate()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for j in &log.journeys {
        let line = JourneyLine {
            user_id: j.user_id,
            journey_id: j.journey_id,
            industry_id: j.industry_id,
            clicks: j
                .clicks
                .iter()
                .map(|c| ClickLine {
                    ad_id: c.ad_id,
                    ts: c.ts,
                })
                .collect(),
            conversion: j.conversion.as_ref().map(|c| ConversionLine { ts: c.ts }),
        };
        serde_json::to_writer(&mut w, &line)
            .map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))?;
    let meta = JourneyMeta {
        gen_config_digest: format!("{:016x}", log.gen_config_digest),
    };
    write_json(&meta_path(path), &meta)
}

pub fn read_journeys(path: &Path) -> Result<JourneyLog> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut journeys = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JourneyLine = serde_json::from_str(&line).map_err(|e| {
            LabError::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let clicks = parsed
            .clicks
            .iter()
            .enumerate()
            .map(|(i, c)| Touchpoint {
                ad_id: c.ad_id,
                industry_id: parsed.industry_id,
                ts: c.ts,
                position: i as u32,
            })
            .collect();
        journeys.push(Journey {
            user_id: parsed.user_id,
            journey_id: parsed.journey_id,
            industry_id: parsed.industry_id,
            clicks,
            conversion: parsed.conversion.map(|c| Conversion { ts: c.ts }),
        });
    }
    let digest = match read_json::<JourneyMeta>(&meta_path(path)) {
        Ok(meta) => u64::from_str_radix(&meta.gen_config_digest, 16).map_err(|e| {
            LabError::Corrupt(format!("{}: bad digest: {e}", meta_path(path).display()))
        })?,
        Err(LabError::Io { .. }) => 0, // sidecar optional for ad-hoc files
        Err(e) => return Err(e),
    };
    let log = JourneyLog {
        journeys,
        gen_config_digest: digest,
    };
    log.validate()?;
    Ok(log)
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    mechanism_order: Vec<String>,
    primary: String,
    label_mode: String,
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    l: f64,
    w: f64,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    user_id: u32,
    ad_id: u32,
    industry_id: u32,
    position_bucket: u8,
    recency_bucket: u8,
    clickcount_bucket: u8,
    journey_id: u64,
    position: u32,
    ts: i64,
    labels: BTreeMap<String, LabelLine>,
    cat: u32,
}

pub fn write_samples(set: &SampleSet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = SampleHeader {
        mechanism_order: set.mechanism_order.iter().map(|t| t.name().into()).collect(),
        primary: set.primary_tag.name().into(),
        label_mode: set.label_mode.name().into(),
    };
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    for s in &set.samples {
        let line = SampleLine {
            user_id: s.features.user_id,
            ad_id: s.features.ad_id,
            industry_id: s.features.industry_id,
            position_bucket: s.features.position_bucket,
            recency_bucket: s.features.recency_bucket,
            clickcount_bucket: s.features.clickcount_bucket,
            journey_id: s.journey_id,
            position: s.position,
            ts: s.ts,
            labels: set
                .mechanism_order
                .iter()
                .zip(&s.labels)
                .map(|(tag, lw)| {
                    (
                        tag.name().to_string(),
                        LabelLine {
                            l: lw.label,
                            w: lw.weight,
                        },
                    )
                })
                .collect(),
            cat: s.cat_class,
        };
        serde_json::to_writer(&mut w, &line)
            .map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<SampleSet> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| LabError::Parse(format!("{}: missing header line", path.display())))?;
    let header_line = header_line.map_err(|e| LabError::io(path, e))?;
    let header: SampleHeader = serde_json::from_str(&header_line)
        .map_err(|e| LabError::Parse(format!("{}:1: {e}", path.display())))?;
    let order: Vec<MechanismTag> = header
        .mechanism_order
        .iter()
        .map(|n| Ok(MechanismTag::parse(n)?))
        .collect::<Result<_>>()?;
    let primary = MechanismTag::parse(&header.primary)?;
    let label_mode = LabelMode::parse(&header.label_mode)?;
    let mut samples = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine = serde_json::from_str(&line).map_err(|e| {
            LabError::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let labels = order
            .iter()
            .map(|tag| {
                parsed
                    .labels
                    .get(tag.name())
                    .map(|lw| LabelWeight {
                        label: lw.l,
                        weight: lw.w,
                    })
                    .ok_or_else(|| {
                        LabError::Parse(format!(
                            "{}:{}: missing label for mechanism {}",
                            path.display(),
                            lineno + 1,
                            tag.name()
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            features: Features {
                user_id: parsed.user_id,
                ad_id: parsed.ad_id,
                industry_id: parsed.industry_id,
                position_bucket: parsed.position_bucket,
                recency_bucket: parsed.recency_bucket,
                clickcount_bucket: parsed.clickcount_bucket,
            },
            labels,
            cat_class: parsed.cat,
            journey_id: parsed.journey_id,
            position: parsed.position,
            ts: parsed.ts,
        });
    }
    Ok(SampleSet {
        samples,
        mechanism_order: order,
        primary_tag: primary,
        label_mode,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))
}
