//! Waarnemingen taxonomy, location catalog and parcel records.
//!
//! A waarneming (logistic event) code is one uppercase letter followed by
//! exactly two digits. The bundled taxonomy carries 400 synthetic codes; the
//! location catalog distinguishes sorting centers from distribution centers,
//! retail locations, warehouses and hubs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const BUNDLED_TAXONOMY_CSV: &str = include_str!("../data/taxonomy.csv");
pub const BUNDLED_LOCATIONS_CSV: &str = include_str!("../data/locations.csv");

#[derive(Debug, Error)]
pub enum EventModelError {
    #[error("malformed event code {0:?}: expected one letter followed by two digits")]
    MalformedCode(String),
    #[error("unknown event code {0}")]
    UnknownCode(EventCode),
    #[error("unknown location {0:?}")]
    UnknownLocation(String),
    #[error("duplicate catalog entry {0:?}")]
    DuplicateEntry(String),
    #[error("invalid catalog row {line}: {reason}")]
    InvalidRow { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Canonical waarneming code, e.g. `A01`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventCode {
    letter: u8,
    number: u8,
}

impl EventCode {
    pub fn new(letter: char, number: u8) -> Result<Self, EventModelError> {
        if !letter.is_ascii_uppercase() || number > 99 {
            return Err(EventModelError::MalformedCode(format!("{letter}{number}")));
        }
        Ok(Self { letter: letter as u8, number })
    }

    pub fn letter(&self) -> char {
        self.letter as char
    }

    pub fn number(&self) -> u8 {
        self.number
    }

    pub fn raw(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EventCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:02}", self.letter as char, self.number)
    }
}

impl fmt::Debug for EventCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EventCode({self})")
    }
}

impl FromStr for EventCode {
    type Err = EventModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_event_code(s)
    }
}

impl Serialize for EventCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EventCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_event_code(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses a code after case folding. Surrounding whitespace is not accepted.
pub fn parse_event_code(s: &str) -> Result<EventCode, EventModelError> {
    let bytes = s.as_bytes();
    let malformed = || EventModelError::MalformedCode(s.to_string());
    if bytes.len() != 3 {
        return Err(malformed());
    }
    let letter = bytes[0].to_ascii_uppercase();
    if !letter.is_ascii_uppercase() || !bytes[1].is_ascii_digit() || !bytes[2].is_ascii_digit() {
        return Err(malformed());
    }
    let number = (bytes[1] - b'0') * 10 + (bytes[2] - b'0');
    Ok(EventCode { letter, number })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Visibility {
    Internal,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Collect,
    Sort,
    Transport,
    Deliver,
    Exception,
    Admin,
}

impl Category {
    /// Journeys end on a delivery-category code.
    pub fn is_terminal(self) -> bool {
        self == Category::Deliver
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventDefinition {
    pub code: EventCode,
    pub description: String,
    pub visibility: Visibility,
    pub category: Category,
    /// Automatically emitted default event; not interesting for stories.
    pub default_auto: bool,
}

impl EventDefinition {
    /// Routine ETA replanning, never a delay by itself.
    pub fn is_eta_update(&self) -> bool {
        self.description.to_ascii_lowercase().starts_with("eta updated")
    }
}

#[derive(Debug, Deserialize)]
struct TaxonomyRow {
    code: String,
    description: String,
    visibility: Visibility,
    category: Category,
    default_auto: bool,
}

/// Immutable after load.
#[derive(Debug, Clone, Default)]
pub struct EventTaxonomy {
    definitions: BTreeMap<EventCode, EventDefinition>,
}

impl EventTaxonomy {
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_TAXONOMY_CSV.as_bytes()).expect("bundled taxonomy is valid")
    }

    /// Reads `code,description,visibility,category,default_auto`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, EventModelError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut definitions = BTreeMap::new();
        for (i, row) in rdr.deserialize::<TaxonomyRow>().enumerate() {
            let row = row?;
            let code = parse_event_code(row.code.trim())?;
            if row.description.trim().is_empty() {
                return Err(EventModelError::InvalidRow {
                    line: i + 2,
                    reason: "empty description".into(),
                });
            }
            let def = EventDefinition {
                code,
                description: row.description,
                visibility: row.visibility,
                category: row.category,
                default_auto: row.default_auto,
            };
            if definitions.insert(code, def).is_some() {
                return Err(EventModelError::DuplicateEntry(code.raw()));
            }
        }
        Ok(Self { definitions })
    }

    pub fn from_definitions(defs: impl IntoIterator<Item = EventDefinition>) -> Result<Self, EventModelError> {
        let mut definitions = BTreeMap::new();
        for def in defs {
            let code = def.code;
            if definitions.insert(code, def).is_some() {
                return Err(EventModelError::DuplicateEntry(code.raw()));
            }
        }
        Ok(Self { definitions })
    }

    pub fn size(&self) -> usize {
        self.definitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.definitions.is_empty()
    }

    pub fn get(&self, code: EventCode) -> Option<&EventDefinition> {
        self.definitions.get(&code)
    }

    pub fn lookup_definition(&self, code: EventCode) -> Result<&EventDefinition, EventModelError> {
        self.get(code).ok_or(EventModelError::UnknownCode(code))
    }

    /// Definitions in ascending code order.
    pub fn iter(&self) -> impl Iterator<Item = &EventDefinition> {
        self.definitions.values()
    }

    pub fn codes(&self) -> impl Iterator<Item = EventCode> + '_ {
        self.definitions.keys().copied()
    }

    pub fn category_of(&self, code: EventCode) -> Option<Category> {
        self.get(code).map(|d| d.category)
    }
}

pub fn lookup_definition(taxonomy: &EventTaxonomy, code: EventCode) -> Result<&EventDefinition, EventModelError> {
    taxonomy.lookup_definition(code)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LocationKind {
    SortingCenter,
    DistributionCenter,
    RetailLocation,
    Warehouse,
    Hub,
}

impl LocationKind {
    pub fn label(self) -> &'static str {
        match self {
            LocationKind::SortingCenter => "sorting center",
            LocationKind::DistributionCenter => "distribution center",
            LocationKind::RetailLocation => "retail location",
            LocationKind::Warehouse => "warehouse",
            LocationKind::Hub => "hub",
        }
    }

    pub const ALL: [LocationKind; 5] = [
        LocationKind::SortingCenter,
        LocationKind::DistributionCenter,
        LocationKind::RetailLocation,
        LocationKind::Warehouse,
        LocationKind::Hub,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub id: String,
    pub name: String,
    pub kind: LocationKind,
}

#[derive(Debug, Clone, Default)]
pub struct LocationCatalog {
    locations: BTreeMap<String, LocationRecord>,
}

impl LocationCatalog {
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_LOCATIONS_CSV.as_bytes()).expect("bundled location catalog is valid")
    }

    /// Reads `id,name,kind`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, EventModelError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut out = Self::default();
        for row in rdr.deserialize::<LocationRecord>() {
            out.insert(row?)?;
        }
        Ok(out)
    }

    pub fn from_records(records: impl IntoIterator<Item = LocationRecord>) -> Result<Self, EventModelError> {
        let mut out = Self::default();
        for r in records {
            out.insert(r)?;
        }
        Ok(out)
    }

    fn insert(&mut self, record: LocationRecord) -> Result<(), EventModelError> {
        if self.locations.contains_key(&record.id) {
            return Err(EventModelError::DuplicateEntry(record.id));
        }
        self.locations.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&LocationRecord> {
        self.locations.get(id)
    }

    pub fn resolve(&self, id: &str) -> Result<&LocationRecord, EventModelError> {
        self.get(id).ok_or_else(|| EventModelError::UnknownLocation(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LocationRecord> {
        self.locations.values()
    }

    pub fn of_kind(&self, kind: LocationKind) -> Vec<&LocationRecord> {
        self.iter().filter(|l| l.kind == kind).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedEvent {
    pub code: EventCode,
    pub timestamp: DateTime<Utc>,
    pub location: String,
    pub source_system: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParcelRecord {
    pub barcode: String,
    pub events: Vec<ObservedEvent>,
    #[serde(default)]
    pub customer_meta: BTreeMap<String, String>,
    pub delivered: bool,
}

impl ParcelRecord {
    pub fn codes(&self) -> Vec<EventCode> {
        self.events.iter().map(|e| e.code).collect()
    }

    /// True when any event belongs to the Exception category.
    pub fn is_unhappy(&self, taxonomy: &EventTaxonomy) -> bool {
        self.events
            .iter()
            .any(|e| taxonomy.category_of(e.code) == Some(Category::Exception))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    EmptyEvents,
    NonMonotonicTimestamps { index: usize },
    UnknownCode { index: usize, code: EventCode },
    UnknownLocation { index: usize, location: String },
    DeliveredWithoutDeliverEvent,
    EmptyBarcode,
}

/// Checks every `ParcelRecord` invariant; an empty result means the record is valid.
pub fn validate_record(record: &ParcelRecord, taxonomy: &EventTaxonomy, locations: &LocationCatalog) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.barcode.trim().is_empty() {
        out.push(Violation::EmptyBarcode);
    }
    if record.events.is_empty() {
        out.push(Violation::EmptyEvents);
    }
    for (i, pair) in record.events.windows(2).enumerate() {
        if pair[1].timestamp < pair[0].timestamp {
            out.push(Violation::NonMonotonicTimestamps { index: i + 1 });
        }
    }
    for (i, ev) in record.events.iter().enumerate() {
        if taxonomy.get(ev.code).is_none() {
            out.push(Violation::UnknownCode { index: i, code: ev.code });
        }
        if locations.get(&ev.location).is_none() {
            out.push(Violation::UnknownLocation {
                index: i,
                location: ev.location.clone(),
            });
        }
    }
    if record.delivered {
        let last_is_deliver = record
            .events
            .last()
            .and_then(|e| taxonomy.category_of(e.code))
            .is_some_and(Category::is_terminal);
        if !last_is_deliver {
            out.push(Violation::DeliveredWithoutDeliverEvent);
        }
    }
    out
}
