use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::embed_store::{ChunkSource, DocumentChunk, VectorIndex};
use crate::event_model::ParcelRecord;

/// Parcel records keyed by barcode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JourneyStore {
    records: BTreeMap<String, ParcelRecord>,
}

impl JourneyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = ParcelRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.barcode.clone(), r)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, barcode: &str) -> Option<&ParcelRecord> {
        self.records.get(&barcode.trim().to_uppercase())
    }

    pub fn upsert(&mut self, record: ParcelRecord) -> Option<ParcelRecord> {
        self.records.insert(record.barcode.clone(), record)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParcelRecord> {
        self.records.values()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub parcels: usize,
    pub chunks: usize,
    /// Barcodes seen more than once in the batch; the later record wins.
    pub duplicate_warnings: usize,
}

/// Retrieval chunk for a parcel: barcode plus its event trail.
pub fn parcel_chunk(record: &ParcelRecord) -> DocumentChunk {
    let trail: Vec<String> = record.events.iter().map(|e| format!("{} {}", e.code, e.location)).collect();
    DocumentChunk::new(
        format!("parcel:{}", record.barcode),
        format!("parcel {} events {}", record.barcode, trail.join(" ")),
        ChunkSource::ParcelRecord,
    )
    .with_meta("barcode", record.barcode.clone())
}

/// Commits records in input order: each barcode lands in the store and gets
/// one retrieval chunk. Counts are distinct parcels.
pub fn load(records: &[ParcelRecord], store: &mut JourneyStore, index: &mut VectorIndex) -> Result<LoadReport, PipelineError> {
    let mut report = LoadReport::default();
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if r.barcode.is_empty() {
            return Err(PipelineError::StoreUnavailable("record without barcode".into()));
        }
        if !seen.insert(r.barcode.clone()) {
            report.duplicate_warnings += 1;
            log::warn!("duplicate barcode {} in load batch; keeping the later record", r.barcode);
        }
        store.upsert(r.clone());
        index.upsert(parcel_chunk(r));
    }
    report.parcels = seen.len();
    report.chunks = seen.len();
    Ok(report)
}
