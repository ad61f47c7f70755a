//! The raw Collo table layout, its Dutch to English dictionary and CSV I/O.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::corpus::CorpusConfig;
use super::PipelineError;
use crate::event_model::ParcelRecord;

pub const BUNDLED_SCHEMA_CSV: &str = include_str!("../../data/collo_schema.csv");
pub const BUNDLED_DICTIONARY_CSV: &str = include_str!("../../data/column_dictionary.csv");

/// Dutch column names the transform cannot work without.
pub const REQUIRED_COLUMNS: [&str; 6] = ["barcode", "waarneming", "tijdstip", "locatie_id", "bronsysteem", "afgeleverd"];

/// Rows of strings under a header; every row has exactly `headers.len()` cells.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn new(headers: Vec<String>) -> Self {
        Self { headers, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<(), PipelineError> {
        if row.len() != self.headers.len() {
            return Err(PipelineError::SchemaMismatch(format!(
                "row has {} cells, header has {}",
                row.len(),
                self.headers.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn to_csv(&self) -> Result<String, PipelineError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| PipelineError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output of UTF-8 cells is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self, PipelineError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut table = Self::new(headers);
        for rec in r.records() {
            table.push(rec?.iter().map(str::to_string).collect())?;
        }
        Ok(table)
    }
}

/// Dutch header to English header. Columns absent from the map pass through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnDictionary {
    map: BTreeMap<String, String>,
}

impl ColumnDictionary {
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_DICTIONARY_CSV).expect("bundled dictionary parses")
    }

    pub fn from_csv(text: &str) -> Result<Self, PipelineError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut map = BTreeMap::new();
        for rec in r.records() {
            let rec = rec?;
            let (nl, en) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""));
            if nl.is_empty() || en.is_empty() {
                return Err(PipelineError::SchemaMismatch(format!("bad dictionary row {rec:?}")));
            }
            if map.insert(nl.to_string(), en.to_string()).is_some() {
                return Err(PipelineError::SchemaMismatch(format!("duplicate dictionary entry {nl}")));
            }
        }
        Ok(Self { map })
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, dutch: &str) -> Option<&str> {
        self.map.get(dutch).map(String::as_str)
    }

    /// English name when translated, otherwise the column itself.
    pub fn translate<'a>(&'a self, column: &'a str) -> &'a str {
        self.get(column).unwrap_or(column)
    }
}

/// The 159 Dutch column names in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColloSchema {
    pub columns: Vec<String>,
}

const REMARKS: [&str; 6] = [
    "",
    "Graag bij de buren afgeven!",
    "Let op: hond aanwezig.",
    "Niet buiten laten staan...",
    "Bel aan (2x)",
    "",
];
const SERVICES: [&str; 4] = ["standaard", "avond", "zaterdag", "verzekerd"];
const STREETS: [&str; 6] = ["Kerkstraat", "Stationsweg", "Dorpsstraat", "Molenweg", "Schoolstraat", "Julianalaan"];

impl ColloSchema {
    pub fn bundled() -> Self {
        let columns = BUNDLED_SCHEMA_CSV
            .lines()
            .skip(1)
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self { columns }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    fn index(&self) -> BTreeMap<&str, usize> {
        self.columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
    }

    /// One row per event. `customer_meta` is written as given (generation
    /// passes the uncleaned values). When `noise` is set, rows get the usual
    /// warehouse mess: mixed date formats, lowercase codes, duplicated rows
    /// and junk rows without a barcode.
    fn rows_for(
        &self,
        record: &ParcelRecord,
        descriptions: &dyn Fn(&ParcelRecord, usize) -> String,
        mut noise: Option<(&CorpusConfig, &mut ChaCha8Rng)>,
    ) -> Vec<Vec<String>> {
        let idx = self.index();
        let mut out = Vec::new();
        let meta = |k: &str| record.customer_meta.get(k).cloned().unwrap_or_default();
        let collo_id = format!("C{}", record.barcode.chars().rev().take(7).collect::<String>());
        for (i, e) in record.events.iter().enumerate() {
            let mut row = vec![String::new(); self.columns.len()];
            let mut set = |col: &str, v: String| {
                if let Some(&j) = idx.get(col) {
                    row[j] = v;
                }
            };
            set("barcode", record.barcode.clone());
            set("waarneming", e.code.raw());
            set("waarneming_omschrijving", descriptions(record, i));
            set("tijdstip", e.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string());
            set("locatie_id", e.location.clone());
            set("bronsysteem", e.source_system.clone());
            set("afgeleverd", if record.delivered { "ja" } else { "nee" }.to_string());
            set("klantnaam", meta("customer_name"));
            set("woonplaats", meta("city"));
            set("postcode", meta("postal_code"));
            set("land", "NL".to_string());
            set("collo_id", collo_id.clone());
            if let Some((cfg, rng)) = noise.as_mut() {
                if rng.gen_bool(0.7) {
                    set("tijdstip", e.timestamp.format("%d-%m-%Y %H:%M").to_string());
                }
                if rng.gen_bool(0.1) {
                    set("waarneming", e.code.raw().to_lowercase());
                }
                set("opmerking", REMARKS[rng.gen_range(0..REMARKS.len())].to_string());
                set("straatnaam", STREETS[rng.gen_range(0..STREETS.len())].to_string());
                set("huisnummer", rng.gen_range(1..250).to_string());
                set("gewicht", format!("{:.2}", rng.gen_range(0.1..25.0)));
                set("dienst", SERVICES[rng.gen_range(0..SERVICES.len())].to_string());
                set("sys_id_01", format!("{:08x}", rng.gen::<u32>()));
                let duplicate = rng.gen_bool(cfg.duplicate_row_rate);
                let junk = rng.gen_bool(cfg.missing_barcode_rate);
                if junk {
                    let mut j = row.clone();
                    j[idx["barcode"]] = String::new();
                    out.push(j);
                }
                if duplicate {
                    out.push(row.clone());
                }
            }
            out.push(row);
        }
        out
    }

    pub(crate) fn render_raw(&self, records: &[&ParcelRecord], config: &CorpusConfig, rng: &mut ChaCha8Rng, descriptions: &dyn Fn(&ParcelRecord, usize) -> String) -> RawTable {
        let mut table = RawTable::new(self.columns.clone());
        for r in records {
            table.rows.extend(self.rows_for(r, descriptions, Some((config, rng))));
        }
        table
    }

    /// Clean re-serialization of records (ISO dates, no noise); transforming
    /// it yields the same records back.
    pub fn to_raw_table(&self, records: &[ParcelRecord]) -> RawTable {
        let mut table = RawTable::new(self.columns.clone());
        for r in records {
            table.rows.extend(self.rows_for(r, &|_, _| String::new(), None));
        }
        table
    }
}
