//! Synthetic Collo-style corpus generation from Markov journey templates.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::{ColloSchema, RawTable};
use super::PipelineError;
use crate::event_model::{parse_event_code, Category, EventCode, EventTaxonomy, LocationCatalog, LocationKind, ObservedEvent, ParcelRecord};

/// The example journey used throughout the docs and tests; generated
/// verbatim as the first parcel of every corpus that includes it.
pub const CANNED_SEQUENCE: [&str; 27] = [
    "A01", "A98", "A95", "B01", "G03", "V06", "A04", "K50", "B01", "A96", "J01", "J40", "A19", "J05", "A19", "H01", "J30", "B01",
    "J17", "B01", "J01", "J01", "J40", "A19", "A19", "J05", "I01",
];
pub const CANNED_BARCODE: &str = "3SDEMO0000000";
const MAX_JOURNEY_LEN: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_parcels: usize,
    pub seed: u64,
    pub unhappy_rate: f64,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub n_columns: usize,
    /// Share of parcels still in transit (journey cut before delivery).
    pub in_progress_rate: f64,
    /// Emit the canned example journey as parcel 0.
    pub include_canned: bool,
    /// Only emit the canned journey (requires `n_parcels == 1`).
    pub canned_only: bool,
    /// Share of raw rows duplicated byte-for-byte.
    pub duplicate_row_rate: f64,
    /// Junk rows without barcode, as a share of event rows.
    pub missing_barcode_rate: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_parcels: 1200,
            seed: 42,
            unhappy_rate: 0.25,
            start: Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap(),
            end: Utc.with_ymd_and_hms(2024, 9, 1, 0, 0, 0).unwrap(),
            n_columns: 159,
            in_progress_rate: 0.1,
            include_canned: true,
            canned_only: false,
            duplicate_row_rate: 0.01,
            missing_barcode_rate: 0.005,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.n_parcels < 1 {
            return bad("n_parcels must be at least 1");
        }
        for (name, rate) in [
            ("unhappy_rate", self.unhappy_rate),
            ("in_progress_rate", self.in_progress_rate),
            ("duplicate_row_rate", self.duplicate_row_rate),
            ("missing_barcode_rate", self.missing_barcode_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.start >= self.end {
            return bad("date range start must precede end");
        }
        if self.n_columns != 159 {
            return bad("only the 159-column Collo schema is supported");
        }
        if self.canned_only && self.n_parcels != 1 {
            return bad("canned_only requires n_parcels = 1");
        }
        Ok(())
    }
}

/// First-order Markov journey generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JourneyTemplate {
    pub id: String,
    pub start: Vec<(EventCode, f64)>,
    pub transition_table: BTreeMap<EventCode, Vec<(EventCode, f64)>>,
    pub terminal_codes: BTreeSet<EventCode>,
    pub unhappy: bool,
}

impl JourneyTemplate {
    /// Outgoing distributions sum to 1 and terminal codes have no edges.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let check = |what: &str, edges: &[(EventCode, f64)]| {
            let sum: f64 = edges.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > 1e-9 || edges.iter().any(|(_, p)| *p < 0.0) {
                return Err(PipelineError::InvalidTemplate(format!("{}: {what} sums to {sum}", self.id)));
            }
            Ok(())
        };
        check("start distribution", &self.start)?;
        for (from, edges) in &self.transition_table {
            if self.terminal_codes.contains(from) {
                return Err(PipelineError::InvalidTemplate(format!("{}: terminal {from} has outgoing edges", self.id)));
            }
            check(&from.raw(), edges)?;
            for (to, _) in edges {
                if !self.terminal_codes.contains(to) && !self.transition_table.contains_key(to) {
                    return Err(PipelineError::InvalidTemplate(format!("{}: {to} is a dead end", self.id)));
                }
            }
        }
        Ok(())
    }

    fn sample_from<R: Rng>(edges: &[(EventCode, f64)], rng: &mut R) -> EventCode {
        let mut u: f64 = rng.gen();
        for (code, p) in edges {
            if u < *p {
                return *code;
            }
            u -= p;
        }
        edges.last().expect("validated template has edges").0
    }

    /// One walk from a start code to a terminal code, retried until it fits
    /// the length cap.
    pub fn walk<R: Rng>(&self, rng: &mut R) -> Vec<EventCode> {
        loop {
            let mut seq = vec![Self::sample_from(&self.start, rng)];
            while let Some(edges) = self.transition_table.get(seq.last().unwrap()) {
                if seq.len() >= MAX_JOURNEY_LEN {
                    break;
                }
                seq.push(Self::sample_from(edges, rng));
            }
            if self.terminal_codes.contains(seq.last().unwrap()) {
                return seq;
            }
        }
    }
}

fn c(s: &str) -> EventCode {
    parse_event_code(s).expect("template codes are well-formed")
}

type Edges<'a> = &'a [(&'a str, &'a [(&'a str, f64)])];

fn table(edges: Edges) -> BTreeMap<EventCode, Vec<(EventCode, f64)>> {
    edges
        .iter()
        .map(|(from, to)| (c(from), to.iter().map(|(t, p)| (c(t), *p)).collect()))
        .collect()
}

/// Happy home-delivery backbone shared by every template.
const BASE: Edges = &[
    ("A01", &[("A98", 0.85), ("B01", 0.15)]),
    ("A02", &[("A98", 0.8), ("B01", 0.2)]),
    ("A03", &[("A98", 0.8), ("B01", 0.2)]),
    ("A98", &[("A95", 0.9), ("B01", 0.1)]),
    ("A95", &[("B01", 1.0)]),
    ("B01", &[("G03", 0.5), ("A96", 0.2), ("J01", 0.2), ("J17", 0.1)]),
    ("G03", &[("V06", 0.7), ("H01", 0.3)]),
    ("V06", &[("A04", 0.35), ("K50", 0.45), ("H01", 0.2)]),
    ("A04", &[("K50", 1.0)]),
    ("K50", &[("B01", 1.0)]),
    ("A96", &[("J01", 1.0)]),
    ("J17", &[("B01", 0.5), ("J01", 0.5)]),
    ("J01", &[("J40", 0.6), ("J05", 0.35), ("J01", 0.05)]),
    ("J40", &[("A19", 0.75), ("J05", 0.25)]),
    ("A19", &[("J05", 0.55), ("A19", 0.15), ("H01", 0.1), ("I01", 0.2)]),
    ("J05", &[("I01", 0.8), ("A19", 0.12), ("I02", 0.08)]),
    ("H01", &[("J01", 0.7), ("J30", 0.3)]),
    ("J30", &[("B01", 0.6), ("J01", 0.4)]),
];

/// Bundled happy and unhappy journey templates.
pub fn default_templates() -> Vec<JourneyTemplate> {
    let starts = vec![(c("A01"), 0.7), (c("A02"), 0.15), (c("A03"), 0.15)];
    let terminals: BTreeSet<EventCode> = ["I01", "I02", "I04", "I05", "R01"].iter().map(|s| c(s)).collect();
    let make = |id: &str, unhappy: bool, overrides: &[Edges]| {
        let mut t = table(BASE);
        for o in overrides {
            t.extend(table(o));
        }
        JourneyTemplate {
            id: id.to_string(),
            start: starts.clone(),
            transition_table: t,
            terminal_codes: terminals.clone(),
            unhappy,
        }
    };
    vec![
        make("home", false, &[]),
        make("locker", false, &[&[("J05", &[("I05", 0.85), ("A19", 0.15)])]]),
        make("retail_pickup", false, &[&[("H01", &[("I07", 0.6), ("J01", 0.4)]), ("I07", &[("I04", 1.0)])]]),
        make("not_home", true, &[&[("J05", &[("E01", 0.7), ("I01", 0.3)]), ("E01", &[("J30", 0.55), ("I07", 0.45)])], RETURNS]),
        make("bad_address", true, &[&[("J05", &[("E02", 0.6), ("I01", 0.4)]), ("E02", &[("R02", 0.5), ("J30", 0.5)])], RETURNS]),
        make(
            "damaged",
            true,
            &[
                &[
                    ("B01", &[("E03", 0.35), ("G03", 0.35), ("A96", 0.15), ("J01", 0.15)]),
                    ("E03", &[("B03", 0.7), ("R02", 0.3)]),
                    ("B03", &[("G03", 1.0)]),
                ],
                RETURNS,
            ],
        ),
        make(
            "missort",
            true,
            &[&[
                ("B01", &[("E04", 0.35), ("G03", 0.35), ("A96", 0.15), ("J01", 0.15)]),
                ("E04", &[("G03", 0.6), ("B01", 0.4)]),
            ]],
        ),
        make("refused", true, &[&[("J05", &[("E05", 0.6), ("I01", 0.4)]), ("E05", &[("R02", 1.0)])], RETURNS]),
    ]
}

/// Return-to-sender branch shared by the unhappy templates.
const RETURNS: Edges = &[
    ("R02", &[("B01", 0.4), ("R01", 0.6)]),
    ("I07", &[("I04", 0.85), ("E08", 0.15)]),
    ("E08", &[("R02", 1.0)]),
];

/// Per-parcel facilities that events are attached to.
struct Route {
    origin: String,
    sorting_center: String,
    hub: String,
    depot: String,
    pickup_point: String,
}

#[derive(Clone, Copy)]
enum LocationRole {
    Origin,
    SortingCenter,
    Hub,
    Depot,
    PickupPoint,
    Current,
}

fn role_of(code: EventCode, category: Category) -> LocationRole {
    match code.raw().as_str() {
        "A02" | "R01" => LocationRole::Origin,
        "A03" | "I04" | "I07" | "E08" => LocationRole::PickupPoint,
        "V06" | "K50" | "H02" | "E07" => LocationRole::Hub,
        "H01" | "J01" | "J05" | "J30" | "E01" | "E02" | "E05" | "R02" => LocationRole::Depot,
        "G03" => LocationRole::SortingCenter,
        _ => match category {
            Category::Collect => LocationRole::Origin,
            Category::Sort => LocationRole::SortingCenter,
            Category::Deliver => LocationRole::Depot,
            _ => LocationRole::Current,
        },
    }
}

fn source_system(category: Category) -> &'static str {
    match category {
        Category::Collect => "counter",
        Category::Sort => "sorter",
        Category::Transport => "scanner",
        Category::Deliver => "handheld",
        Category::Exception => "exception-desk",
        Category::Admin => "planning",
    }
}

const FIRST_NAMES: [&str; 10] = ["De Vries", "Jansen", "Bakker", "Visser", "Smit", "Meijer", "De Boer", "Mulder", "Bos", "Vos"];
const SUFFIXES: [&str; 5] = [" & Zn. B.V.", " Webshop!", " (retail)", ", fam.", " Handel B.V."];
const CITIES: [&str; 8] = ["Utrecht", "Amsterdam", "Rotterdam", "Den Haag", "Eindhoven", "Groningen", "Zwolle", "Nijmegen"];

/// Output of [`generate_corpus`]: the dirty raw table plus the clean ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub raw: RawTable,
    pub records: Vec<ParcelRecord>,
    pub templates: Vec<String>,
}

/// Deterministic per seed. Parcel 0 is the canned example journey when
/// enabled; exactly `round(n * unhappy_rate)` other parcels (give or take the
/// canned one) come from unhappy templates.
pub fn generate_corpus(
    config: &CorpusConfig,
    taxonomy: &EventTaxonomy,
    locations: &LocationCatalog,
) -> Result<Corpus, PipelineError> {
    config.validate()?;
    let templates = default_templates();
    for t in &templates {
        t.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let happy: Vec<&JourneyTemplate> = templates.iter().filter(|t| !t.unhappy).collect();
    let unhappy: Vec<&JourneyTemplate> = templates.iter().filter(|t| t.unhappy).collect();

    let n = config.n_parcels;
    let n_unhappy = (n as f64 * config.unhappy_rate).round() as usize;
    let mut is_unhappy = vec![false; n];
    let mut idx: Vec<usize> = (0..n).collect();
    if config.include_canned || config.canned_only {
        idx.retain(|&i| i != 0);
    }
    idx.shuffle(&mut rng);
    for &i in idx.iter().take(n_unhappy) {
        is_unhappy[i] = true;
    }
    let n_in_progress = (n as f64 * config.in_progress_rate).round() as usize;
    let mut in_progress = vec![false; n];
    idx.shuffle(&mut rng);
    for &i in idx.iter().take(n_in_progress) {
        in_progress[i] = true;
    }

    let pick = |kind: LocationKind, rng: &mut ChaCha8Rng| -> String {
        let options = locations.of_kind(kind);
        options.choose(rng).map(|l| l.id.clone()).unwrap_or_default()
    };
    let span = (config.end - config.start).num_minutes().max(1);

    let mut records = Vec::with_capacity(n);
    let mut template_ids = Vec::with_capacity(n);
    for i in 0..n {
        let canned = i == 0 && (config.include_canned || config.canned_only);
        let (codes, template_id) = if canned {
            (CANNED_SEQUENCE.iter().map(|s| c(s)).collect::<Vec<_>>(), "canned".to_string())
        } else {
            let pool = if is_unhappy[i] { &unhappy } else { &happy };
            let t = *pool.choose(&mut rng).expect("template pools are non-empty");
            let mut codes = t.walk(&mut rng);
            while t.unhappy && !codes.iter().any(|c| taxonomy.category_of(*c) == Some(Category::Exception)) {
                codes = t.walk(&mut rng);
            }
            if in_progress[i] && codes.len() > 3 {
                let first_exc = codes
                    .iter()
                    .position(|c| taxonomy.category_of(*c) == Some(Category::Exception))
                    .unwrap_or(0);
                let lo = (first_exc + 1).max(3);
                if lo < codes.len() - 1 {
                    let cut = rng.gen_range(lo..codes.len() - 1);
                    codes.truncate(cut);
                }
            }
            (codes, t.id.clone())
        };
        let route = Route {
            origin: if rng.gen_bool(0.5) {
                pick(LocationKind::RetailLocation, &mut rng)
            } else {
                pick(LocationKind::Warehouse, &mut rng)
            },
            sorting_center: pick(LocationKind::SortingCenter, &mut rng),
            hub: pick(LocationKind::Hub, &mut rng),
            depot: pick(LocationKind::DistributionCenter, &mut rng),
            pickup_point: pick(LocationKind::RetailLocation, &mut rng),
        };
        let mut t = config.start + Duration::minutes(rng.gen_range(0..span));
        let mut current = route.origin.clone();
        let mut events = Vec::with_capacity(codes.len());
        for code in codes {
            let def = taxonomy.lookup_definition(code).map_err(PipelineError::Event)?;
            let location = match role_of(code, def.category) {
                LocationRole::Origin => route.origin.clone(),
                LocationRole::SortingCenter => route.sorting_center.clone(),
                LocationRole::Hub => route.hub.clone(),
                LocationRole::Depot => route.depot.clone(),
                LocationRole::PickupPoint => route.pickup_point.clone(),
                LocationRole::Current => current.clone(),
            };
            current = location.clone();
            events.push(ObservedEvent {
                code,
                timestamp: t,
                location,
                source_system: source_system(def.category).to_string(),
            });
            t += Duration::minutes(rng.gen_range(3..=360));
        }
        let delivered = events
            .last()
            .and_then(|e| taxonomy.category_of(e.code))
            .is_some_and(Category::is_terminal);
        let barcode = if canned {
            CANNED_BARCODE.to_string()
        } else {
            let letters: String = (0..4).map(|_| rng.gen_range(b'A'..=b'Z') as char).collect();
            format!("3S{letters}{:07}", i)
        };
        let name = format!("{}{}", FIRST_NAMES.choose(&mut rng).unwrap(), SUFFIXES.choose(&mut rng).unwrap());
        let city = CITIES.choose(&mut rng).unwrap().to_string();
        let postal = format!("{} {}{}", rng.gen_range(1000..9999), rng.gen_range(b'A'..=b'Z') as char, rng.gen_range(b'A'..=b'Z') as char);
        let mut dirty = BTreeMap::new();
        dirty.insert("customer_name".to_string(), name);
        dirty.insert("city".to_string(), city);
        dirty.insert("postal_code".to_string(), postal);
        records.push((
            ParcelRecord {
                barcode,
                events,
                customer_meta: dirty,
                delivered,
            },
            in_progress[i] && !canned,
        ));
        template_ids.push(template_id);
    }

    let schema = ColloSchema::bundled();
    let describe = |r: &ParcelRecord, i: usize| {
        taxonomy
            .get(r.events[i].code)
            .map(|d| d.description.clone())
            .unwrap_or_default()
    };
    let refs: Vec<&ParcelRecord> = records.iter().map(|(r, _)| r).collect();
    let raw = schema.render_raw(&refs, config, &mut rng, &describe);
    let records = records
        .into_iter()
        .map(|(mut r, _)| {
            for v in r.customer_meta.values_mut() {
                *v = super::etl::clean_text(v);
            }
            r
        })
        .collect();
    Ok(Corpus {
        raw,
        records,
        templates: template_ids,
    })
}
