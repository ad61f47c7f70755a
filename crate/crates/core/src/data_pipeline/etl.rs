//! Raw table to clean parcel records.

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use super::schema::{ColumnDictionary, RawTable};
use super::PipelineError;
use crate::event_model::{parse_event_code, ObservedEvent, ParcelRecord};

/// Accepted timestamp layouts, tried in order. Naive layouts are read as UTC.
pub const DATE_FORMATS: [(&str, &str); 4] = [
    ("day-first", "%d-%m-%Y %H:%M"),
    ("day-first with seconds", "%d-%m-%Y %H:%M:%S"),
    ("ISO-8601", "%Y-%m-%dT%H:%M:%SZ"),
    ("ISO-8601 with space", "%Y-%m-%d %H:%M:%S"),
];

/// Parses any layout from [`DATE_FORMATS`] or an RFC 3339 instant.
pub fn parse_timestamp(cell: &str) -> Option<DateTime<Utc>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return None;
    }
    for (_, fmt) in DATE_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(cell, fmt) {
            return Some(t.and_utc());
        }
    }
    DateTime::parse_from_rfc3339(cell).ok().map(|t| t.with_timezone(&Utc))
}

/// Canonical output form: `2024-07-01T13:05:00Z`.
pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Standardizes a date cell; `None` when it matches no accepted layout.
pub fn standardize_date(cell: &str) -> Option<String> {
    parse_timestamp(cell).map(format_timestamp)
}

/// Lowercases, strips punctuation and symbols, and collapses whitespace.
pub fn clean_text(s: &str) -> String {
    let kept: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|c| c.is_alphanumeric() || *c == ' ')
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_flag(cell: &str) -> bool {
    matches!(clean_text(cell).as_str(), "ja" | "j" | "yes" | "y" | "true" | "1")
}

/// Counts of what the transform repaired or discarded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformReport {
    pub rows_in: usize,
    pub duplicate_rows: usize,
    pub missing_barcode_rows: usize,
    /// Events dropped for a missing or unparseable timestamp.
    pub flagged_timestamps: usize,
    pub malformed_codes: usize,
    pub parcels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub records: Vec<ParcelRecord>,
    pub report: TransformReport,
}

/// English header row after dictionary mapping.
pub fn translate_headers(headers: &[String], dictionary: &ColumnDictionary) -> Vec<String> {
    headers.iter().map(|h| dictionary.translate(h).to_string()).collect()
}

const FREE_TEXT: [&str; 3] = ["customer_name", "city", "postal_code"];

/// Deduplicates, normalizes and groups rows into parcel records in order of
/// first appearance. Free-text customer fields default to the empty string.
pub fn transform(raw: &RawTable, dictionary: &ColumnDictionary) -> Result<Transformed, PipelineError> {
    let headers = translate_headers(&raw.headers, dictionary);
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut required = BTreeMap::new();
    for name in ["barcode", "observation", "timestamp", "location_id", "source_system", "delivered"] {
        let i = col(name).ok_or_else(|| PipelineError::SchemaMismatch(format!("missing column {name}")))?;
        required.insert(name, i);
    }
    let free: Vec<(&str, Option<usize>)> = FREE_TEXT.iter().map(|&n| (n, col(n))).collect();

    let mut report = TransformReport {
        rows_in: raw.rows.len(),
        ..Default::default()
    };
    let mut seen: HashSet<&[String]> = HashSet::new();
    let mut order: Vec<String> = Vec::new();
    let mut by_barcode: BTreeMap<String, ParcelRecord> = BTreeMap::new();
    for row in &raw.rows {
        if row.len() != headers.len() {
            return Err(PipelineError::SchemaMismatch("row width differs from header".into()));
        }
        if !seen.insert(row.as_slice()) {
            report.duplicate_rows += 1;
            continue;
        }
        let barcode = row[required["barcode"]].trim().to_uppercase();
        if barcode.is_empty() {
            report.missing_barcode_rows += 1;
            continue;
        }
        let entry = by_barcode.entry(barcode.clone()).or_insert_with(|| {
            order.push(barcode.clone());
            ParcelRecord {
                barcode: barcode.clone(),
                events: Vec::new(),
                customer_meta: free
                    .iter()
                    .map(|(k, i)| (k.to_string(), i.map(|i| clean_text(&row[i])).unwrap_or_default()))
                    .collect(),
                delivered: false,
            }
        });
        entry.delivered = parse_flag(&row[required["delivered"]]);
        let Ok(code) = parse_event_code(row[required["observation"]].trim()) else {
            report.malformed_codes += 1;
            continue;
        };
        let Some(timestamp) = parse_timestamp(&row[required["timestamp"]]) else {
            report.flagged_timestamps += 1;
            log::warn!("{barcode}: dropping {code} with missing timestamp");
            continue;
        };
        entry.events.push(ObservedEvent {
            code,
            timestamp,
            location: row[required["location_id"]].trim().to_string(),
            source_system: row[required["source_system"]].trim().to_lowercase(),
        });
    }
    let mut records = Vec::with_capacity(order.len());
    for b in order {
        let mut r = by_barcode.remove(&b).expect("every ordered barcode was inserted");
        r.events.sort_by_key(|e| e.timestamp);
        if !r.events.is_empty() {
            records.push(r);
        }
    }
    report.parcels = records.len();
    Ok(Transformed { records, report })
}
