//! Reception, Parcel and Knowledge Expert agents plus the router in front.

mod knowledge;
mod realizer;

use serde::{Deserialize, Serialize};

pub use knowledge::{
    knowledge_reply, Abbreviation, InternalDoc, KnowledgeBase, BUNDLED_ABBREVIATIONS, BUNDLED_DOCS,
    DEFAULT_KNOWLEDGE_THRESHOLD,
};
pub use realizer::{
    mentions_delay, parcel_reply, Issue, JourneyStory, KeyEvent, ParcelAgent, PredictedEvent, Predictor, DELAY_WORDS,
    MAX_PREDICTION,
};

pub use crate::prompt_factory::AgentId;
use crate::data_pipeline::JourneyStore;
use crate::embed_store::{EmbedError, VectorIndex, DEFAULT_K};
use crate::event_model::{parse_event_code, EventModelError};
use crate::nl_io::{detect_language, BarcodeValidator, LanguageCode};
use crate::prompt_factory::{bindings, count_tokens, render, PromptError, TemplateCatalog, TemplateKind};
use crate::seq_model::SeqModelError;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("no parcel with barcode {0}")]
    UnknownBarcode(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] SeqModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Event(#[from] EventModelError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub text: String,
    pub agent: AgentId,
    pub citations: Vec<String>,
    pub is_prediction_included: bool,
    /// Prompt the agent worked from, kept for inspection.
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub prompt: String,
}

impl Reply {
    pub fn new(text: String, agent: AgentId) -> Self {
        Self {
            text,
            agent,
            citations: Vec::new(),
            is_prediction_included: false,
            prompt: String::new(),
        }
    }

    pub fn with_prompt(mut self, prompt: String) -> Self {
        self.prompt = prompt;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent(AgentId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConversationState {
    history: Vec<Turn>,
    pub detected_language: LanguageCode,
    pub active_agent: Option<AgentId>,
    pub last_barcode: Option<String>,
}

impl ConversationState {
    pub fn new(language: LanguageCode) -> Self {
        Self {
            detected_language: language,
            ..Self::default()
        }
    }

    pub fn history(&self) -> &[Turn] {
        &self.history
    }

    pub fn push(&mut self, speaker: Speaker, text: &str) {
        self.history.push(Turn {
            speaker,
            text: text.to_string(),
        });
    }
}

const QUESTION_WORDS: [&str; 22] = [
    "what", "how", "why", "when", "where", "who", "which", "can", "could", "does", "do", "is", "are", "wat", "hoe",
    "waarom", "wanneer", "waar", "wie", "welke", "kan", "betekent",
];

const DOMAIN_TERMS: [&str; 24] = [
    "abbreviation", "afkorting", "event code", "status code", "statuscode", "code", "sorting center", "sorteercentrum",
    "distribution center", "distributiecentrum", "hub", "depot", "retail location", "pickup point", "afhaalpunt",
    "parcel locker", "pakketkluis", "customs", "douane", "return", "retour", "linehaul", "warehouse", "magazijn",
];

/// True for input phrased as a question.
pub fn is_question(input: &str) -> bool {
    let t = input.trim();
    if t.ends_with('?') {
        return true;
    }
    let first = t
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .unwrap_or("")
        .to_lowercase();
    QUESTION_WORDS.contains(&first.as_str())
}

/// True when the input names a catalog abbreviation, an event code or a
/// logistics term.
pub fn mentions_domain_term(input: &str, kb: &KnowledgeBase) -> bool {
    let tokens: Vec<&str> = input.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    if tokens.iter().any(|t| kb.abbreviation(t).is_some()) {
        return true;
    }
    if tokens
        .iter()
        .any(|t| t.len() == 3 && t.as_bytes()[0].is_ascii_uppercase() && parse_event_code(t).is_ok())
    {
        return true;
    }
    let lower = format!(" {} ", tokens.join(" ").to_lowercase());
    DOMAIN_TERMS.iter().any(|d| lower.contains(&format!(" {d} ")))
}

/// Barcode first, then questions and domain terms, Reception otherwise.
pub fn route(input: &str, _state: &ConversationState, validator: &BarcodeValidator, kb: &KnowledgeBase) -> AgentId {
    if validator.find(input).is_some() {
        AgentId::Parcel
    } else if is_question(input) || mentions_domain_term(input, kb) {
        AgentId::KnowledgeExpert
    } else {
        AgentId::Reception
    }
}

const GREETINGS: [&str; 12] = [
    "hello", "hi", "hey", "good", "hallo", "hoi", "goedemorgen", "goedemiddag", "goedenavond", "dag", "morning", "evening",
];

const TRACKING_WORDS: [&str; 14] = [
    "parcel", "package", "shipment", "order", "track", "tracking", "delivery", "barcode", "pakket", "zending",
    "bestelling", "bezorging", "volgen", "pakketje",
];

pub fn reception_reply(input: &str, state: &ConversationState, validator: &BarcodeValidator, catalog: &TemplateCatalog) -> Result<Reply> {
    let lang = state.detected_language;
    let persona = catalog.get_template(AgentId::Reception, TemplateKind::AgentPersona, lang)?;
    let instruction = catalog.get_template(AgentId::Reception, TemplateKind::AgentInstruction, lang)?;
    let prompt = format!(
        "{}\n{}",
        persona.template.body,
        render(&instruction.template, &bindings([("user_input", input.to_string())]))?
    );
    let words: Vec<String> = input
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect();
    let text = if let Some(attempt) = validator.find_invalid_attempt(input) {
        catalog.render_id("reception.output.invalid_barcode", lang, &bindings([("barcode", attempt)]))?
    } else if words.is_empty()
        || words.first().is_some_and(|w| GREETINGS.contains(&w.as_str()))
        || words.iter().any(|w| TRACKING_WORDS.contains(&w.as_str()))
    {
        catalog.render_id("reception.output", lang, &Default::default())?
    } else {
        catalog.render_id("reception.output.fallback", lang, &Default::default())?
    };
    Ok(Reply::new(text, AgentId::Reception).with_prompt(prompt))
}

/// Single words carry too few trigrams to trust; they only switch the
/// conversation language when the detector is very sure.
const SINGLE_WORD_CONFIDENCE: f64 = 0.95;

fn switches_language(input: &str, confidence: f64) -> bool {
    let words = input.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()).count();
    words >= 2 || confidence >= SINGLE_WORD_CONFIDENCE
}

/// Everything a chat session needs; all of it read-only.
pub struct Assistant<'a> {
    pub parcel: ParcelAgent<'a>,
    pub store: &'a JourneyStore,
    pub index: &'a VectorIndex,
    pub knowledge: &'a KnowledgeBase,
    pub validator: BarcodeValidator,
    pub k: usize,
    pub threshold: f64,
}

impl<'a> Assistant<'a> {
    pub fn new(parcel: ParcelAgent<'a>, store: &'a JourneyStore, index: &'a VectorIndex, knowledge: &'a KnowledgeBase) -> Self {
        Self {
            parcel,
            store,
            index,
            knowledge,
            validator: BarcodeValidator::default(),
            k: DEFAULT_K,
            threshold: DEFAULT_KNOWLEDGE_THRESHOLD,
        }
    }

    /// One user turn: detect language, route, answer, record both turns.
    pub fn respond(&self, input: &str, state: &mut ConversationState) -> Reply {
        let (lang, confidence) = detect_language(input);
        if lang != LanguageCode::Other && switches_language(input, confidence) {
            state.detected_language = lang;
        }
        let agent = route(input, state, &self.validator, self.knowledge);
        let reply = self.answer(agent, input, state).unwrap_or_else(|e| self.failure(agent, e, state));
        state.push(Speaker::User, input);
        state.push(Speaker::Agent(reply.agent), &reply.text);
        state.active_agent = Some(reply.agent);
        reply
    }

    fn answer(&self, agent: AgentId, input: &str, state: &mut ConversationState) -> Result<Reply> {
        let catalog = self.parcel.catalog;
        let lang = state.detected_language;
        match agent {
            AgentId::Reception => reception_reply(input, state, &self.validator, catalog),
            AgentId::KnowledgeExpert => knowledge_reply(input, self.index, self.k, self.threshold, catalog, lang),
            AgentId::Parcel => {
                let barcode = self.validator.find(input).expect("routed on a valid barcode");
                state.last_barcode = Some(barcode.clone());
                let record = self
                    .store
                    .get(&barcode)
                    .ok_or_else(|| AgentError::UnknownBarcode(barcode.clone()))?;
                let (prompt, report) = self.parcel.prompt(record, lang)?;
                let story = self.parcel.realize(&report, count_tokens(&prompt))?;
                let mut reply = Reply::new(story.narrative, AgentId::Parcel).with_prompt(prompt);
                reply.is_prediction_included = story.is_prediction_included;
                if let Some(c) = self.index.get(&format!("parcel:{barcode}")) {
                    reply.citations.push(c.id.clone());
                }
                Ok(reply)
            }
        }
    }

    fn failure(&self, agent: AgentId, err: AgentError, state: &ConversationState) -> Reply {
        let catalog = self.parcel.catalog;
        let lang = state.detected_language;
        let text = match &err {
            AgentError::UnknownBarcode(b) => {
                catalog.render_id("reception.output.unknown_barcode", lang, &bindings([("barcode", b.clone())]))
            }
            _ => catalog.render_id("reception.output.fallback", lang, &Default::default()),
        };
        log::warn!("{agent:?} agent failed: {err}");
        Reply::new(text.unwrap_or_else(|_| err.to_string()), agent)
    }
}

#[cfg(test)]
mod tests;
