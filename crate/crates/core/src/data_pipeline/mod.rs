//! Synthetic corpus generation, ETL, splitting, loading and instruction export.

mod corpus;
mod etl;
mod load;
mod schema;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{default_templates, generate_corpus, Corpus, CorpusConfig, JourneyTemplate, CANNED_BARCODE, CANNED_SEQUENCE};
pub use etl::{
    clean_text, format_timestamp, parse_timestamp, standardize_date, transform, translate_headers, TransformReport, Transformed,
    DATE_FORMATS,
};
pub use load::{load, JourneyStore, LoadReport};
pub use schema::{ColloSchema, ColumnDictionary, RawTable, BUNDLED_DICTIONARY_CSV, BUNDLED_SCHEMA_CSV, REQUIRED_COLUMNS};

use crate::event_model::{Category, EventModelError, EventTaxonomy, ParcelRecord};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid journey template: {0}")]
    InvalidTemplate(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error(transparent)]
    Event(#[from] EventModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, PipelineError> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| p.is_nan() || *p < 0.0) {
            return Err(PipelineError::InvalidRatios("ratios must be non-negative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PipelineError::InvalidRatios(format!("ratios sum to {sum}")));
        }
        Ok(())
    }

    /// Partition sizes: train and val rounded, test takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Train, validation and test partitions.
pub type Splits<T> = (Vec<T>, Vec<T>, Vec<T>);

/// Seeded shuffle then cut into (train, val, test).
pub fn split<T: Clone>(records: &[T], ratios: SplitRatios, seed: u64) -> Result<Splits<T>, PipelineError> {
    ratios.validate()?;
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b, _) = ratios.sizes(records.len());
    let pick = |range: &[usize]| range.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&idx[..a]), pick(&idx[a..a + b]), pick(&idx[a + b..])))
}

/// One instruction-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlpacaExample {
    pub instruction: String,
    pub input: String,
    pub response: String,
}

pub const ALPACA_INSTRUCTION: &str = "Describe the key events in the package's journey based on the tracking details below. \
Mention only events the customer can see, in chronological order.";

/// Renders tracking details and a narrative for a parcel.
pub trait StoryRealizer {
    fn tracking_details(&self, record: &ParcelRecord) -> String;
    fn narrative(&self, record: &ParcelRecord) -> String;
}

pub fn export_alpaca(records: &[ParcelRecord], realizer: &dyn StoryRealizer) -> Vec<AlpacaExample> {
    records
        .iter()
        .map(|r| AlpacaExample {
            instruction: ALPACA_INSTRUCTION.to_string(),
            input: realizer.tracking_details(r),
            response: realizer.narrative(r),
        })
        .collect()
}

/// One JSON document per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String, PipelineError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, PipelineError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(PipelineError::from))
        .collect()
}

/// Plain-text event count summary of a corpus.
pub fn summary_stats(records: &[ParcelRecord], taxonomy: &EventTaxonomy) -> String {
    let n = records.len();
    let events: usize = records.iter().map(|r| r.events.len()).sum();
    let delivered = records.iter().filter(|r| r.delivered).count();
    let unhappy = records.iter().filter(|r| r.is_unhappy(taxonomy)).count();
    let mut lens: Vec<usize> = records.iter().map(|r| r.events.len()).collect();
    lens.sort_unstable();
    let mut per_code: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_cat: BTreeMap<String, usize> = BTreeMap::new();
    for e in records.iter().flat_map(|r| &r.events) {
        *per_code.entry(e.code.raw()).or_default() += 1;
        let cat = taxonomy.category_of(e.code).map(|c: Category| format!("{c:?}")).unwrap_or_else(|| "Unknown".into());
        *per_cat.entry(cat).or_default() += 1;
    }
    let mut out = format!("parcels: {n}\nevents: {events}\ndelivered: {delivered}\nunhappy: {unhappy}\n");
    if n > 0 {
        out.push_str(&format!(
            "events per parcel: min {} median {} max {} mean {:.2}\n",
            lens[0],
            lens[n / 2],
            lens[n - 1],
            events as f64 / n as f64
        ));
    }
    out.push_str(&format!("distinct codes: {}\n\nevents by category\n", per_code.len()));
    for (k, v) in &per_cat {
        out.push_str(&format!("  {k:<10} {v}\n"));
    }
    let mut top: Vec<(&String, &usize)> = per_code.iter().collect();
    top.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    out.push_str("\nmost frequent codes\n");
    for (k, v) in top.iter().take(15) {
        out.push_str(&format!("  {k} {v}\n"));
    }
    out
}
