//! Deterministic story realizer: one sentence per customer-visible event,
//! picked from per-category patterns in the template catalog.

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentError, Result};
use crate::data_pipeline::{JourneyStore, StoryRealizer};
use crate::event_model::{Category, EventCode, EventTaxonomy, LocationCatalog, LocationKind, ParcelRecord, Visibility};
use crate::nl_io::LanguageCode;
use crate::prompt_factory::{
    bindings, build_parcel_report, count_tokens, kind_phrase, render, render_subset, AgentId, GenerationParams, ParcelReport,
    PredictedEntry, ReportEntry, TemplateCatalog, TemplateKind,
};
use crate::seq_model::{complete_sequence, ModelParams, PredictedSuffix, Vocabulary};

/// Longest predicted continuation.
pub const MAX_PREDICTION: usize = 10;

/// Words the realizer never uses; an ETA update is not a delay.
pub const DELAY_WORDS: [&str; 5] = ["delay", "delayed", "late", "vertraging", "vertraagd"];

/// True when `text` contains one of `DELAY_WORDS` as a whole word.
pub fn mentions_delay(text: &str) -> bool {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| DELAY_WORDS.contains(&w))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEvent {
    pub code: EventCode,
    pub timestamp: DateTime<Utc>,
    pub location_id: String,
    pub location_name: String,
    pub location_kind: LocationKind,
    pub category: Category,
    pub description: String,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedEvent {
    pub code: EventCode,
    pub description: String,
    pub visibility: Visibility,
    /// Always true; predicted content is never presented as observed.
    pub predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: EventCode,
    pub description: String,
    pub timestamp: DateTime<Utc>,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JourneyStory {
    pub barcode: String,
    pub language: LanguageCode,
    pub delivered: bool,
    pub narrative: String,
    pub key_events: Vec<KeyEvent>,
    pub predicted_events: Vec<PredictedEvent>,
    /// Every Exception-category event of the record.
    pub issues: Vec<Issue>,
    pub is_prediction_included: bool,
    /// Timeline entries dropped to fit the context window.
    pub omitted_events: usize,
    pub prompt_tokens: usize,
}

/// Model and vocabulary used to predict how open journeys continue.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocabulary,
}

impl Predictor<'_> {
    /// Continues the known part of `codes`; codes the model has never seen
    /// are skipped.
    pub fn predict(&self, codes: &[EventCode], taxonomy: &EventTaxonomy) -> Result<PredictedSuffix> {
        let known: Vec<EventCode> = codes.iter().copied().filter(|c| self.vocab.index_of(*c).is_some()).collect();
        if known.is_empty() {
            return Ok(PredictedSuffix {
                codes: Vec::new(),
                is_prediction: true,
            });
        }
        Ok(complete_sequence(&known, self.params, self.vocab, taxonomy, MAX_PREDICTION)?)
    }
}

pub struct ParcelAgent<'a> {
    pub taxonomy: &'a EventTaxonomy,
    pub locations: &'a LocationCatalog,
    pub catalog: &'a TemplateCatalog,
    pub generation: GenerationParams,
    pub predictor: Option<Predictor<'a>>,
}

fn event_pattern(e: &ReportEntry) -> &'static str {
    if e.is_eta_update {
        return "parcel.output.event.eta";
    }
    match e.category {
        Category::Collect => "parcel.output.event.collect",
        Category::Sort => "parcel.output.event.sort",
        Category::Transport => "parcel.output.event.transport",
        Category::Deliver => "parcel.output.event.deliver",
        Category::Exception => "parcel.output.event.exception",
        Category::Admin => "parcel.output.event.admin",
    }
}

fn barcode_seed(barcode: &str, seed: u64) -> u64 {
    barcode
        .bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<'a> ParcelAgent<'a> {
    pub fn new(taxonomy: &'a EventTaxonomy, locations: &'a LocationCatalog, catalog: &'a TemplateCatalog) -> Self {
        Self {
            taxonomy,
            locations,
            catalog,
            generation: GenerationParams::default(),
            predictor: None,
        }
    }

    pub fn with_predictor(mut self, predictor: Predictor<'a>) -> Self {
        self.predictor = Some(predictor);
        self
    }

    pub fn with_generation(mut self, generation: GenerationParams) -> Self {
        self.generation = generation;
        self
    }

    /// Looks the barcode up and tells its story.
    pub fn reply(&self, barcode: &str, store: &JourneyStore, language: LanguageCode) -> Result<JourneyStory> {
        let record = store
            .get(barcode)
            .ok_or_else(|| AgentError::UnknownBarcode(barcode.trim().to_uppercase()))?;
        self.story(record, language)
    }

    fn prediction(&self, record: &ParcelRecord) -> Result<Option<PredictedSuffix>> {
        match (&self.predictor, record.delivered) {
            (Some(p), false) => Ok(Some(p.predict(&record.codes(), self.taxonomy)?)),
            _ => Ok(None),
        }
    }

    /// Full report without any context window applied.
    pub fn report(&self, record: &ParcelRecord, language: LanguageCode) -> Result<ParcelReport> {
        let prediction = self.prediction(record)?;
        Ok(build_parcel_report(
            record,
            self.taxonomy,
            self.locations,
            prediction.as_ref(),
            self.catalog,
            language,
        )?)
    }

    fn instruction(&self, language: LanguageCode, context: &str) -> Result<String> {
        let persona = self
            .catalog
            .get_template(AgentId::Parcel, TemplateKind::AgentPersona, language)?;
        let instruction = self
            .catalog
            .get_template(AgentId::Parcel, TemplateKind::AgentInstruction, language)?;
        let examples = if self.generation.few_shot {
            self.catalog
                .render_id("parcel.instruction.example", language, &Default::default())?
        } else {
            String::new()
        };
        let body = render(
            &instruction.template,
            &bindings([("examples", examples), ("context_str", context.to_string())]),
        )?;
        Ok(format!("{}\n{}", persona.template.body, body))
    }

    /// The prompt the parcel agent works from, with the report squeezed into
    /// the context window.
    pub fn prompt(&self, record: &ParcelRecord, language: LanguageCode) -> Result<(String, ParcelReport)> {
        let report = self.report(record, language)?;
        let overhead = count_tokens(&self.instruction(language, "")?);
        let budget = self.generation.context_window.saturating_sub(overhead);
        let fitted = report.fit_to(self.catalog, budget)?;
        Ok((self.instruction(language, &fitted.text)?, fitted))
    }

    pub fn story(&self, record: &ParcelRecord, language: LanguageCode) -> Result<JourneyStory> {
        let (prompt, report) = self.prompt(record, language)?;
        self.realize(&report, count_tokens(&prompt))
    }

    fn pick(&self, id: &str, rng: &mut ChaCha8Rng) -> String {
        let t = self.generation.temperature;
        let alt = format!("{id}.alt");
        if t > 0.0 && self.catalog.ids().contains(alt.as_str()) && rng.gen::<f64>() < t / (1.0 + t) {
            alt
        } else {
            id.to_string()
        }
    }

    /// Turns a (possibly truncated) report into the customer story.
    pub fn realize(&self, report: &ParcelReport, prompt_tokens: usize) -> Result<JourneyStory> {
        let lang = report.language;
        let mut rng = ChaCha8Rng::seed_from_u64(barcode_seed(&report.barcode, self.generation.seed));
        let cat = self.catalog;
        let mut sentences = vec![cat.render_id(
            &self.pick("parcel.output.opening", &mut rng),
            lang,
            &bindings([("barcode", report.barcode.clone())]),
        )?];
        let mut key_events = Vec::new();
        for e in report.shown_entries() {
            if e.visibility != Visibility::External {
                continue;
            }
            let template = cat.get(&self.pick(event_pattern(e), &mut rng), lang)?.template;
            let sentence = render_subset(
                &template,
                &bindings([
                    ("when", e.timestamp.format("%Y-%m-%d %H:%M").to_string()),
                    ("description", e.description.clone()),
                    ("code", e.code.raw()),
                    ("kind", kind_phrase(e.location_kind, lang).to_string()),
                    ("location", e.location_name.clone()),
                ]),
            )?;
            sentences.push(sentence.clone());
            key_events.push(KeyEvent {
                code: e.code,
                timestamp: e.timestamp,
                location_id: e.location_id.clone(),
                location_name: e.location_name.clone(),
                location_kind: e.location_kind,
                category: e.category,
                description: e.description.clone(),
                sentence,
            });
        }
        let issues: Vec<Issue> = report
            .entries
            .iter()
            .filter(|e| e.is_exception)
            .map(|e| Issue {
                code: e.code,
                description: e.description.clone(),
                timestamp: e.timestamp,
                visibility: e.visibility,
            })
            .collect();
        let visible_issues: Vec<String> = key_events
            .iter()
            .filter(|k| k.category == Category::Exception)
            .map(|k| format!("{} ({})", k.description, k.code))
            .collect();
        if !visible_issues.is_empty() {
            sentences.push(cat.render_id(
                "parcel.output.issues",
                lang,
                &bindings([("issues", visible_issues.join("; "))]),
            )?);
        }
        let predicted_events: Vec<PredictedEvent> = report
            .predicted
            .iter()
            .flatten()
            .map(|p: &PredictedEntry| PredictedEvent {
                code: p.code,
                description: p.description.clone(),
                visibility: p.visibility,
                predicted: true,
            })
            .collect();
        let visible_prediction: Vec<String> = predicted_events
            .iter()
            .filter(|p| p.visibility == Visibility::External)
            .map(|p| format!("{} ({}) (predicted)", p.description, p.code))
            .collect();
        if !visible_prediction.is_empty() {
            sentences.push(cat.render_id(
                "parcel.output.prediction",
                lang,
                &bindings([("predicted", visible_prediction.join(", "))]),
            )?);
        }
        let closing = if report.delivered {
            "parcel.output.closing_delivered"
        } else {
            "parcel.output.closing_open"
        };
        sentences.push(cat.render_id(&self.pick(closing, &mut rng), lang, &Default::default())?);
        if self.generation.follow_up_questions {
            sentences.push(cat.render_id("parcel.output.follow_up", lang, &Default::default())?);
        }
        Ok(JourneyStory {
            barcode: report.barcode.clone(),
            language: lang,
            delivered: report.delivered,
            narrative: sentences.join(" "),
            key_events,
            is_prediction_included: !predicted_events.is_empty(),
            predicted_events,
            issues,
            omitted_events: report.truncated,
            prompt_tokens,
        })
    }

    /// Story over the whole report, ignoring the context window.
    pub fn full_story(&self, record: &ParcelRecord, language: LanguageCode) -> Result<JourneyStory> {
        let report = self.report(record, language)?;
        self.realize(&report, count_tokens(&report.text))
    }
}

/// Instruction-tuning pairs: the full report in, the full story out.
impl StoryRealizer for ParcelAgent<'_> {
    fn tracking_details(&self, record: &ParcelRecord) -> String {
        match self.report(record, LanguageCode::En) {
            Ok(r) => r.text,
            Err(e) => format!("report unavailable: {e}"),
        }
    }

    fn narrative(&self, record: &ParcelRecord) -> String {
        match self.full_story(record, LanguageCode::En) {
            Ok(s) => s.narrative,
            Err(e) => format!("story unavailable: {e}"),
        }
    }
}

/// Convenience wrapper with default generation settings and English text.
pub fn parcel_reply(
    barcode: &str,
    store: &JourneyStore,
    model: Option<(&ModelParams, &Vocabulary)>,
    taxonomy: &EventTaxonomy,
    locations: &LocationCatalog,
) -> Result<JourneyStory> {
    let mut agent = ParcelAgent::new(taxonomy, locations, TemplateCatalog::bundled());
    if let Some((params, vocab)) = model {
        agent = agent.with_predictor(Predictor { params, vocab });
    }
    agent.reply(barcode, store, LanguageCode::En)
}
