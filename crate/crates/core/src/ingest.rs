//! Claim tables, episode grouping, wait-time outcomes and temporal splits.
//!
//! Dates are integer day indices (days since 1970-01-01 when parsed from
//! ISO-8601 strings). Malformed rows are rejected individually and reported
//! back to the caller; they never abort a batch.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Day index.
pub type Day = i64;

/// Number of discharge placement categories (home … other less-acute inpatient).
pub const NUM_PLACEMENTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimType {
    Inpatient,
    Snf,
    Hospice,
    Outpatient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DischargeStatus {
    Home,
    Transfer,
    Death,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub person_id: String,
    pub provider_id: String,
    pub start_date: Day,
    pub end_date: Day,
    pub claim_type: ClaimType,
    pub discharge_status: DischargeStatus,
    /// Externally supplied unplanned-admission label.
    #[serde(default)]
    pub unplanned: bool,
}

/// A row that was skipped, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub row: usize,
    pub reason: String,
}

/// A run of merged claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimEpisode {
    pub person_id: String,
    pub provider_id: String,
    pub claim_type: ClaimType,
    pub admit_date: Day,
    pub discharge_date: Day,
    pub discharge_status: DischargeStatus,
    pub unplanned: bool,
    /// Indices of the input claims that make up this episode.
    pub claims: Vec<usize>,
}

impl ClaimEpisode {
    /// View the episode as a single claim spanning it.
    pub fn as_claim(&self) -> ClaimRecord {
        ClaimRecord {
            person_id: self.person_id.clone(),
            provider_id: self.provider_id.clone(),
            start_date: self.admit_date,
            end_date: self.discharge_date,
            claim_type: self.claim_type,
            discharge_status: self.discharge_status,
            unplanned: self.unplanned,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Grouping {
    pub episodes: Vec<ClaimEpisode>,
    pub rejected: Vec<Rejection>,
}

/// Merge successive claims of the same person and type into episodes.
///
/// A claim joins the running episode when it starts on or before the
/// episode's current end, has the same provider, and the claim currently
/// closing the episode was not a discharge home. A discharge home followed
/// by a same-day return therefore produces two episodes.
pub fn group_claims(claims: &[ClaimRecord]) -> Grouping {
    let mut rejected = Vec::new();
    let mut order: Vec<usize> = Vec::with_capacity(claims.len());
    for (i, c) in claims.iter().enumerate() {
        if c.start_date > c.end_date {
            log::warn!("claim {i}: start {} after end {}", c.start_date, c.end_date);
            rejected.push(Rejection {
                row: i,
                reason: format!("start date {} after end date {}", c.start_date, c.end_date),
            });
        } else {
            order.push(i);
        }
    }
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&claims[a], &claims[b]);
        (&ca.person_id, ca.claim_type, ca.start_date, ca.end_date, a).cmp(&(
            &cb.person_id,
            cb.claim_type,
            cb.start_date,
            cb.end_date,
            b,
        ))
    });

    let mut episodes: Vec<ClaimEpisode> = Vec::new();
    for idx in order {
        let c = &claims[idx];
        if let Some(cur) = episodes.last_mut() {
            let same_stream = cur.person_id == c.person_id && cur.claim_type == c.claim_type;
            if same_stream
                && c.start_date <= cur.discharge_date
                && c.provider_id == cur.provider_id
                && cur.discharge_status != DischargeStatus::Home
            {
                if c.end_date >= cur.discharge_date {
                    cur.discharge_date = c.end_date;
                    cur.discharge_status = c.discharge_status;
                }
                cur.claims.push(idx);
                continue;
            }
        }
        episodes.push(ClaimEpisode {
            person_id: c.person_id.clone(),
            provider_id: c.provider_id.clone(),
            claim_type: c.claim_type,
            admit_date: c.start_date,
            discharge_date: c.end_date,
            discharge_status: c.discharge_status,
            unplanned: c.unplanned,
            claims: vec![idx],
        });
    }
    Grouping { episodes, rejected }
}

/// Wait time after an index discharge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaitOutcome {
    pub wait_days: f64,
    pub event: bool,
}

/// Days from each episode's discharge to the next unplanned inpatient
/// admission or death of the same person, censored at `observation_end`.
///
/// `unplanned` is aligned with `episodes`. Deaths are taken from episodes
/// discharged with status `death` and from `deaths` (person → day).
pub fn compute_wait(
    episodes: &[ClaimEpisode],
    unplanned: &[bool],
    deaths: &HashMap<String, Day>,
    observation_end: Day,
) -> Result<Vec<WaitOutcome>> {
    if unplanned.len() != episodes.len() {
        return Err(Error::Dimension {
            context: "unplanned flags",
            expected: episodes.len(),
            actual: unplanned.len(),
        });
    }
    let mut by_person: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in episodes.iter().enumerate() {
        by_person.entry(e.person_id.as_str()).or_default().push(i);
    }
    let mut death_day: HashMap<&str, Day> = HashMap::new();
    for (p, &d) in deaths {
        death_day.insert(p.as_str(), d);
    }
    for e in episodes {
        if e.discharge_status == DischargeStatus::Death {
            let slot = death_day.entry(e.person_id.as_str()).or_insert(e.discharge_date);
            *slot = (*slot).min(e.discharge_date);
        }
    }

    episodes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if observation_end < e.discharge_date {
                return Err(Error::invalid(format!(
                    "observation end {observation_end} precedes discharge {} of episode {i}",
                    e.discharge_date
                )));
            }
            let mut next: Option<Day> = None;
            for &j in &by_person[e.person_id.as_str()] {
                let other = &episodes[j];
                if j == i || !unplanned[j] || other.claim_type != ClaimType::Inpatient {
                    continue;
                }
                if other.admit_date >= e.discharge_date && other.admit_date > e.admit_date {
                    next = Some(next.map_or(other.admit_date, |n| n.min(other.admit_date)));
                }
            }
            if let Some(&d) = death_day.get(e.person_id.as_str()) {
                if d >= e.discharge_date && e.discharge_status != DischargeStatus::Death {
                    next = Some(next.map_or(d, |n| n.min(d)));
                }
            }
            Ok(match next {
                Some(day) if day <= observation_end => WaitOutcome {
                    wait_days: (day - e.discharge_date) as f64,
                    event: true,
                },
                _ => WaitOutcome {
                    wait_days: (observation_end - e.discharge_date) as f64,
                    event: false,
                },
            })
        })
        .collect()
}

/// Cohort coordinates of an episode on the modeling lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CohortCoords {
    pub mdc: usize,
    pub history_group: usize,
    pub cc_mcc: usize,
    pub race: usize,
}

/// One index discharge ready for modeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub person_id: String,
    pub admit_date: Day,
    pub discharge_date: Day,
    /// Placement rank 0 (home) … 5 (other less-acute inpatient).
    pub placement: u8,
    /// Binary design row.
    pub covariates: Vec<u8>,
    pub cohort: CohortCoords,
    pub wait_days: f64,
    pub event: bool,
}

impl EpisodeRecord {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if !(self.wait_days >= 0.0 && self.wait_days.is_finite()) {
            return Err(Error::invalid(format!(
                "episode {}: wait_days {} must be finite and non-negative",
                self.episode_id, self.wait_days
            )));
        }
        if self.placement as usize >= NUM_PLACEMENTS {
            return Err(Error::invalid(format!(
                "episode {}: placement {} outside 0..=5",
                self.episode_id, self.placement
            )));
        }
        if self.covariates.len() != n_features {
            return Err(Error::Dimension {
                context: "episode covariates",
                expected: n_features,
                actual: self.covariates.len(),
            });
        }
        if self.covariates.iter().any(|&b| b > 1) {
            return Err(Error::invalid(format!(
                "episode {}: covariates must be binary",
                self.episode_id
            )));
        }
        Ok(())
    }
}

/// Split on discharge date: strictly before `cutoff` trains, the rest tests.
pub fn temporal_split(
    episodes: Vec<EpisodeRecord>,
    cutoff: Day,
) -> (Vec<EpisodeRecord>, Vec<EpisodeRecord>) {
    let (train, test): (Vec<_>, Vec<_>) = episodes
        .into_iter()
        .partition(|e| e.discharge_date < cutoff);
    if train.is_empty() {
        log::warn!("temporal split at day {cutoff}: training side is empty");
    }
    if test.is_empty() {
        log::warn!("temporal split at day {cutoff}: test side is empty");
    }
    (train, test)
}

/// Convert an ISO-8601 calendar date to a day index.
pub fn parse_day(s: &str) -> Result<Day> {
    let date = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| Error::invalid(format!("bad date `{s}`: {e}")))?;
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch");
    Ok((date - epoch).num_days())
}

#[derive(Debug, Deserialize)]
struct RawClaim {
    person_id: String,
    provider_id: String,
    start_date: String,
    end_date: String,
    claim_type: ClaimType,
    discharge_status: DischargeStatus,
    #[serde(default)]
    unplanned: Option<bool>,
}

impl RawClaim {
    fn into_claim(self) -> Result<ClaimRecord> {
        Ok(ClaimRecord {
            start_date: parse_day(&self.start_date)?,
            end_date: parse_day(&self.end_date)?,
            person_id: self.person_id,
            provider_id: self.provider_id,
            claim_type: self.claim_type,
            discharge_status: self.discharge_status,
            unplanned: self.unplanned.unwrap_or(false),
        })
    }
}

/// Load claims from CSV (`.csv`) or JSON lines (anything else).
pub fn read_claims(path: &Path) -> Result<(Vec<ClaimRecord>, Vec<Rejection>)> {
    let mut claims = Vec::new();
    let mut rejected = Vec::new();
    let mut accept = |row: usize, raw: std::result::Result<RawClaim, String>| match raw
        .and_then(|r| r.into_claim().map_err(|e| e.to_string()))
    {
        Ok(c) => claims.push(c),
        Err(reason) => {
            log::warn!("claims row {row}: {reason}");
            rejected.push(Rejection { row, reason });
        }
    };
    if path.extension().is_some_and(|e| e == "csv") {
        let mut rdr = csv::Reader::from_path(path)?;
        for (row, rec) in rdr.deserialize::<RawClaim>().enumerate() {
            accept(row, rec.map_err(|e| e.to_string()));
        }
    } else {
        let reader = BufReader::new(File::open(path)?);
        for (row, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            accept(row, serde_json::from_str(&line).map_err(|e| e.to_string()));
        }
    }
    Ok((claims, rejected))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Per-episode modeling attributes joined onto grouped episodes by
/// `(person_id, admit_date)`.
#[derive(Debug, Clone, Deserialize)]
pub struct EpisodeAttributes {
    pub person_id: String,
    pub admit_date: String,
    pub placement: u8,
    pub cohort: CohortCoords,
    pub covariates: Vec<u8>,
}

/// Join wait outcomes and attributes onto inpatient index episodes.
///
/// Episodes discharged by death or lacking attributes are skipped and
/// reported.
pub fn build_episode_records(
    episodes: &[ClaimEpisode],
    outcomes: &[WaitOutcome],
    attributes: &[EpisodeAttributes],
) -> Result<(Vec<EpisodeRecord>, Vec<Rejection>)> {
    let mut attr: HashMap<(&str, Day), &EpisodeAttributes> = HashMap::new();
    for a in attributes {
        attr.insert((a.person_id.as_str(), parse_day(&a.admit_date)?), a);
    }
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (i, (e, o)) in episodes.iter().zip(outcomes).enumerate() {
        if e.claim_type != ClaimType::Inpatient || e.discharge_status == DischargeStatus::Death {
            continue;
        }
        match attr.get(&(e.person_id.as_str(), e.admit_date)) {
            Some(a) => records.push(EpisodeRecord {
                episode_id: i as u64,
                person_id: e.person_id.clone(),
                admit_date: e.admit_date,
                discharge_date: e.discharge_date,
                placement: a.placement,
                covariates: a.covariates.clone(),
                cohort: a.cohort,
                wait_days: o.wait_days,
                event: o.event,
            }),
            None => rejected.push(Rejection {
                row: i,
                reason: format!("no attributes for {} admitted {}", e.person_id, e.admit_date),
            }),
        }
    }
    Ok((records, rejected))
}
