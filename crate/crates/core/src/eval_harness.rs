//! Rubric scoring of generated journey stories against the recorded truth.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::agents::{mentions_delay, AgentError, JourneyStory, ParcelAgent};
use crate::data_pipeline::JourneyStore;
use crate::event_model::{EventCode, EventTaxonomy, LocationCatalog, ParcelRecord, Visibility};
use crate::nl_io::LanguageCode;
use crate::prompt_factory::kind_label;

pub const DEFAULT_SAMPLE_SIZE: usize = 100;
pub const DEFAULT_THRESHOLD: f64 = 0.75;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("need {needed} unhappy parcels, corpus has {available}")]
    InsufficientUnhappyParcels { needed: usize, available: usize },
    #[error("story for {story} scored against record {truth}")]
    BarcodeMismatch { story: String, truth: String },
    #[error("score {0} outside 1..=5")]
    InvalidScore(u8),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RubricScore(u8);

impl RubricScore {
    pub fn new(v: u8) -> Result<Self> {
        if (1..=5).contains(&v) {
            Ok(Self(v))
        } else {
            Err(EvalError::InvalidScore(v))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QualitativeFlag {
    FabricatedEvent,
    MissingKeyEvent,
    MisreadEtaUpdateAsDelay,
    DefaultEventMentioned,
    WrongLocationKind,
}

impl QualitativeFlag {
    pub fn deduction(self) -> u8 {
        match self {
            QualitativeFlag::FabricatedEvent => 2,
            _ => 1,
        }
    }
}

fn code_mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Z][0-9]{2})\)").expect("code regex"))
}

/// Codes cited in parentheses, e.g. "(E01)".
pub fn mentioned_codes(text: &str) -> Vec<EventCode> {
    code_mention_re()
        .captures_iter(text)
        .filter_map(|c| crate::event_model::parse_event_code(&c[1]).ok())
        .collect()
}

/// Starts at 5 and deducts per flag kind present (fabrication costs 2).
pub fn score_story(
    story: &JourneyStory,
    truth: &ParcelRecord,
    taxonomy: &EventTaxonomy,
    locations: &LocationCatalog,
) -> Result<(RubricScore, Vec<QualitativeFlag>)> {
    if story.barcode != truth.barcode {
        return Err(EvalError::BarcodeMismatch {
            story: story.barcode.clone(),
            truth: truth.barcode.clone(),
        });
    }
    let mut flags = BTreeSet::new();
    let truth_codes: BTreeSet<EventCode> = truth.codes().into_iter().collect();
    let predicted: BTreeSet<EventCode> = story.predicted_events.iter().map(|p| p.code).collect();
    let is_default = |c: EventCode| taxonomy.get(c).is_some_and(|d| d.default_auto);

    let observed = |k: &crate::agents::KeyEvent| {
        truth
            .events
            .iter()
            .any(|e| e.code == k.code && e.timestamp == k.timestamp && e.location == k.location_id)
    };
    if story.key_events.iter().any(|k| !observed(k))
        || story.predicted_events.iter().any(|p| !p.predicted)
        || mentioned_codes(&story.narrative)
            .into_iter()
            .any(|c| !truth_codes.contains(&c) && !predicted.contains(&c))
    {
        flags.insert(QualitativeFlag::FabricatedEvent);
    }

    let covered: BTreeSet<(EventCode, chrono::DateTime<chrono::Utc>)> =
        story.key_events.iter().map(|k| (k.code, k.timestamp)).collect();
    let missing = truth.events.iter().any(|e| {
        taxonomy
            .get(e.code)
            .is_some_and(|d| d.visibility == Visibility::External && !d.default_auto)
            && !covered.contains(&(e.code, e.timestamp))
    });
    if missing {
        flags.insert(QualitativeFlag::MissingKeyEvent);
    }

    let eta_in_truth = truth
        .events
        .iter()
        .any(|e| taxonomy.get(e.code).is_some_and(|d| d.is_eta_update()));
    let eta_sentence_delay = story.key_events.iter().any(|k| {
        taxonomy.get(k.code).is_some_and(|d| d.is_eta_update()) && mentions_delay(&k.sentence)
    });
    if eta_sentence_delay || (eta_in_truth && mentions_delay(&story.narrative)) {
        flags.insert(QualitativeFlag::MisreadEtaUpdateAsDelay);
    }

    if story.key_events.iter().any(|k| is_default(k.code))
        || mentioned_codes(&story.narrative)
            .into_iter()
            .any(|c| is_default(c) && !predicted.contains(&c))
    {
        flags.insert(QualitativeFlag::DefaultEventMentioned);
    }

    let wrong_kind = story.key_events.iter().any(|k| match locations.get(&k.location_id) {
        Some(loc) => loc.kind != k.location_kind || !k.sentence.contains(kind_label(loc.kind, story.language)),
        None => true,
    });
    if wrong_kind {
        flags.insert(QualitativeFlag::WrongLocationKind);
    }

    let deducted: u8 = flags.iter().map(|f| f.deduction()).sum();
    let score = RubricScore::new(5u8.saturating_sub(deducted).max(1))?;
    Ok((score, flags.into_iter().collect()))
}

/// `n` distinct barcodes of parcels with an Exception-category event.
pub fn sample_unhappy(records: &[ParcelRecord], taxonomy: &EventTaxonomy, n: usize, seed: u64) -> Result<Vec<String>> {
    let mut pool: Vec<&str> = records
        .iter()
        .filter(|r| r.is_unhappy(taxonomy))
        .map(|r| r.barcode.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if pool.len() < n {
        return Err(EvalError::InsufficientUnhappyParcels {
            needed: n,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    Ok(pool.into_iter().take(n).map(str::to_string).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub barcode: String,
    pub score: Option<u8>,
    pub flags: Vec<QualitativeFlag>,
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseResult>,
    /// Counts for scores 1..=5.
    pub histogram: [usize; 5],
    pub scored: usize,
    pub errors: usize,
    pub median: f64,
    pub fraction_ge_3: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime: Option<RuntimeStats>,
}

/// Middle value; the mean of the two middle values for even counts.
pub fn median(values: &[u8]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseResult>) -> Self {
        let scores: Vec<u8> = cases.iter().filter_map(|c| c.score).collect();
        let mut histogram = [0usize; 5];
        for &s in &scores {
            histogram[s as usize - 1] += 1;
        }
        let ge3 = scores.iter().filter(|&&s| s >= 3).count();
        let latencies: Vec<f64> = cases.iter().filter_map(|c| c.latency_ms).collect();
        let runtime = (!latencies.is_empty()).then(|| {
            let total: f64 = latencies.iter().sum();
            RuntimeStats {
                total_ms: total,
                mean_ms: total / latencies.len() as f64,
                max_ms: latencies.iter().copied().fold(0.0, f64::max),
            }
        });
        Self {
            errors: cases.len() - scores.len(),
            scored: scores.len(),
            histogram,
            median: median(&scores),
            fraction_ge_3: if scores.is_empty() { 0.0 } else { ge3 as f64 / scores.len() as f64 },
            runtime,
            cases,
        }
    }

    /// Drops wall-clock numbers so the report is reproducible.
    pub fn without_timing(mut self) -> Self {
        self.runtime = None;
        for c in &mut self.cases {
            c.latency_ms = None;
        }
        self
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.fraction_ge_3 >= threshold
    }

    pub fn flag_counts(&self) -> Vec<(QualitativeFlag, usize)> {
        let all = [
            QualitativeFlag::FabricatedEvent,
            QualitativeFlag::MissingKeyEvent,
            QualitativeFlag::MisreadEtaUpdateAsDelay,
            QualitativeFlag::DefaultEventMentioned,
            QualitativeFlag::WrongLocationKind,
        ];
        all.iter()
            .map(|f| (*f, self.cases.iter().filter(|c| c.flags.contains(f)).count()))
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Story evaluation\n");
        let _ = writeln!(s, "cases: {} scored, {} errors\n", self.scored, self.errors);
        let _ = writeln!(s, "| score | count |\n|---|---|");
        for (i, n) in self.histogram.iter().enumerate() {
            let _ = writeln!(s, "| {} | {} |", i + 1, n);
        }
        let _ = writeln!(s, "\n```");
        let peak = self.histogram.iter().copied().max().unwrap_or(0).max(1);
        for (i, n) in self.histogram.iter().enumerate() {
            let bar = "#".repeat((n * 40).div_ceil(peak));
            let _ = writeln!(s, "{} | {:<40} {}", i + 1, bar, n);
        }
        let _ = writeln!(s, "```\n");
        let _ = writeln!(s, "median: {}", self.median);
        let _ = writeln!(s, "fraction >= 3: {:.3}", self.fraction_ge_3);
        for (f, n) in self.flag_counts() {
            let _ = writeln!(s, "- {f:?}: {n}");
        }
        if let Some(rt) = &self.runtime {
            let _ = writeln!(s, "\nlatency: mean {:.2} ms, max {:.2} ms", rt.mean_ms, rt.max_ms);
        }
        s
    }
}

/// Generates and scores one story per barcode. Cases run in parallel; the
/// report keeps input order. Failures are recorded per case.
pub fn run_eval(
    agent: &ParcelAgent<'_>,
    store: &JourneyStore,
    barcodes: &[String],
    language: LanguageCode,
) -> EvalReport {
    let cases = barcodes
        .par_iter()
        .map(|b| {
            let start = Instant::now();
            let outcome = agent.reply(b, store, language).map_err(EvalError::from).and_then(|story| {
                let truth = store.get(b).expect("reply succeeded so the record exists");
                score_story(&story, truth, agent.taxonomy, agent.locations)
            });
            let latency_ms = Some(start.elapsed().as_secs_f64() * 1e3);
            match outcome {
                Ok((score, flags)) => CaseResult {
                    barcode: b.clone(),
                    score: Some(score.value()),
                    flags,
                    error: None,
                    latency_ms,
                },
                Err(e) => CaseResult {
                    barcode: b.clone(),
                    score: None,
                    flags: Vec::new(),
                    error: Some(e.to_string()),
                    latency_ms,
                },
            }
        })
        .collect();
    EvalReport::from_cases(cases)
}
