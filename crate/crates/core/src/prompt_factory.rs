//! Prompt template catalog, `{name}` substitution and the parcel report.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::event_model::{Category, EventCode, EventModelError, EventTaxonomy, LocationCatalog, LocationKind, ParcelRecord, Visibility};
use crate::nl_io::LanguageCode;
use crate::seq_model::PredictedSuffix;

pub const BUNDLED_PROMPTS: &str = include_str!("../data/prompts.json");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unbound variable {{{0}}}")]
    UnboundVariable(String),
    #[error("binding {0:?} does not match any placeholder")]
    UnknownVariable(String),
    #[error("no template {id} in any language")]
    MissingTemplate { id: String },
    #[error("template {id} ({language}): {reason}")]
    InvalidTemplate { id: String, language: LanguageCode, reason: String },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Event(#[from] EventModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentId {
    Reception,
    Parcel,
    KnowledgeExpert,
}

impl AgentId {
    pub const ALL: [AgentId; 3] = [AgentId::Reception, AgentId::Parcel, AgentId::KnowledgeExpert];

    /// Prefix of this agent's template ids.
    pub fn prefix(self) -> &'static str {
        match self {
            AgentId::Reception => "reception",
            AgentId::Parcel => "parcel",
            AgentId::KnowledgeExpert => "knowledge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    AgentPersona,
    AgentInstruction,
    ParcelReport,
    OutputGeneration,
}

impl TemplateKind {
    fn suffix(self) -> &'static str {
        match self {
            TemplateKind::AgentPersona => "persona",
            TemplateKind::AgentInstruction => "instruction",
            TemplateKind::ParcelReport => "report",
            TemplateKind::OutputGeneration => "output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub agent: AgentId,
    pub kind: TemplateKind,
    pub language: LanguageCode,
    pub body: String,
    pub variables: Vec<String>,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("placeholder regex"))
}

/// Placeholder names in order of first appearance.
pub fn placeholders(body: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in placeholder_re().captures_iter(body) {
        let name = c[1].to_string();
        if !out.contains(&name) {
            out.push(name);
        }
    }
    out
}

impl PromptTemplate {
    pub fn new(id: &str, agent: AgentId, kind: TemplateKind, language: LanguageCode, body: &str) -> Self {
        Self {
            id: id.to_string(),
            agent,
            kind,
            language,
            body: body.to_string(),
            variables: placeholders(body),
        }
    }

    /// Declared variables and placeholders must be the same set.
    pub fn validate(&self) -> Result<()> {
        let found: BTreeSet<String> = placeholders(&self.body).into_iter().collect();
        let declared: BTreeSet<String> = self.variables.iter().cloned().collect();
        if found != declared {
            return Err(PromptError::InvalidTemplate {
                id: self.id.clone(),
                language: self.language,
                reason: format!("placeholders {found:?} but declared {declared:?}"),
            });
        }
        Ok(())
    }
}

/// Placeholder-shaped text inside a value would be substituted again on a
/// second pass, so its braces are swapped for parentheses.
fn sanitize(value: &str) -> String {
    placeholder_re().replace_all(value, "($1)").into_owned()
}

fn substitute(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String> {
    for name in placeholders(&template.body) {
        if !bindings.contains_key(&name) {
            return Err(PromptError::UnboundVariable(name));
        }
    }
    Ok(placeholder_re()
        .replace_all(&template.body, |c: &regex::Captures| sanitize(&bindings[&c[1]]))
        .into_owned())
}

/// Fills every placeholder. Bindings with no matching placeholder are logged
/// and ignored.
pub fn render(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String> {
    let names = placeholders(&template.body);
    for key in bindings.keys().filter(|k| !names.contains(k)) {
        log::warn!("template {}: {}", template.id, PromptError::UnknownVariable(key.clone()));
    }
    substitute(template, bindings)
}

/// Like `render`, but an extra binding is an error.
pub fn render_strict(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String> {
    let names = placeholders(&template.body);
    if let Some(key) = bindings.keys().find(|k| !names.contains(k)) {
        return Err(PromptError::UnknownVariable(key.clone()));
    }
    substitute(template, bindings)
}

/// Renders with whichever of `bindings` the template uses. For template
/// families that share one pool of variables; missing ones still fail.
pub fn render_subset(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String> {
    let names = placeholders(&template.body);
    let used: BTreeMap<String, String> = bindings
        .iter()
        .filter(|(k, _)| names.contains(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    substitute(template, &used)
}

/// Small helper for building binding maps.
pub fn bindings<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// A catalog lookup, with a notice when another language had to stand in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolvedTemplate {
    pub template: PromptTemplate,
    pub fallback_notice: Option<String>,
}

/// Templates keyed by (id, language). Immutable after load.
#[derive(Debug, Clone, Default)]
pub struct TemplateCatalog {
    templates: BTreeMap<(String, LanguageCode), PromptTemplate>,
}

impl TemplateCatalog {
    pub fn from_templates(templates: impl IntoIterator<Item = PromptTemplate>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for t in templates {
            t.validate()?;
            let key = (t.id.clone(), t.language);
            if out.contains_key(&key) {
                return Err(PromptError::InvalidTemplate {
                    id: t.id,
                    language: t.language,
                    reason: "duplicate entry".into(),
                });
            }
            out.insert(key, t);
        }
        Ok(Self { templates: out })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let list: Vec<PromptTemplate> = serde_json::from_str(text)?;
        Self::from_templates(list)
    }

    pub fn bundled() -> &'static TemplateCatalog {
        static CATALOG: OnceLock<TemplateCatalog> = OnceLock::new();
        CATALOG.get_or_init(|| TemplateCatalog::from_json(BUNDLED_PROMPTS).expect("bundled prompt catalog is valid"))
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.templates.keys().map(|(id, _)| id.as_str()).collect()
    }

    /// The entry in `language`, else English with a notice.
    pub fn get(&self, id: &str, language: LanguageCode) -> Result<ResolvedTemplate> {
        if let Some(t) = self.templates.get(&(id.to_string(), language)) {
            return Ok(ResolvedTemplate {
                template: t.clone(),
                fallback_notice: None,
            });
        }
        if let Some(t) = self.templates.get(&(id.to_string(), LanguageCode::En)) {
            let notice = format!("template {id} has no {language} variant; using en");
            log::info!("{notice}");
            return Ok(ResolvedTemplate {
                template: t.clone(),
                fallback_notice: Some(notice),
            });
        }
        Err(PromptError::MissingTemplate { id: id.to_string() })
    }

    /// The canonical template of an agent for one kind, e.g. `parcel.report`.
    pub fn get_template(&self, agent: AgentId, kind: TemplateKind, language: LanguageCode) -> Result<ResolvedTemplate> {
        let id = format!("{}.{}", agent.prefix(), kind.suffix());
        let resolved = self.get(&id, language)?;
        if resolved.template.agent != agent || resolved.template.kind != kind {
            return Err(PromptError::MissingTemplate { id });
        }
        Ok(resolved)
    }

    /// Renders the template with id `id`, falling back to English silently.
    pub fn render_id(&self, id: &str, language: LanguageCode, bindings: &BTreeMap<String, String>) -> Result<String> {
        render(&self.get(id, language)?.template, bindings)
    }
}

pub fn get_template(agent: AgentId, kind: TemplateKind, language: LanguageCode) -> Result<ResolvedTemplate> {
    TemplateCatalog::bundled().get_template(agent, kind, language)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChatMode {
    /// One answer per request.
    #[default]
    SingleTurn,
    Conversation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    /// 0 gives canonical phrasing; higher values pick alternative sentence
    /// patterns more often (seeded).
    pub temperature: f64,
    /// Prompt budget in whitespace-separated tokens.
    pub context_window: usize,
    pub chat_mode: ChatMode,
    pub follow_up_questions: bool,
    pub memory_enabled: bool,
    /// Embed a worked example in the parcel instruction.
    pub few_shot: bool,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            context_window: DEFAULT_CONTEXT_WINDOW,
            chat_mode: ChatMode::SingleTurn,
            follow_up_questions: false,
            memory_enabled: true,
            few_shot: false,
            seed: 42,
        }
    }
}

/// Default prompt budget for the parcel agent.
pub const DEFAULT_CONTEXT_WINDOW: usize = 300;

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(PromptError::InvalidParams(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.context_window == 0 {
            return Err(PromptError::InvalidParams("context_window must be positive".into()));
        }
        Ok(())
    }
}

/// Whitespace token count used for prompt budgets.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Location kind with its article, as used inside sentences.
pub fn kind_phrase(kind: LocationKind, language: LanguageCode) -> &'static str {
    match (language, kind) {
        (LanguageCode::Nl, LocationKind::SortingCenter) => "het sorteercentrum",
        (LanguageCode::Nl, LocationKind::DistributionCenter) => "het distributiecentrum",
        (LanguageCode::Nl, LocationKind::RetailLocation) => "de winkellocatie",
        (LanguageCode::Nl, LocationKind::Warehouse) => "het magazijn",
        (LanguageCode::Nl, LocationKind::Hub) => "de hub",
        (_, LocationKind::SortingCenter) => "the sorting center",
        (_, LocationKind::DistributionCenter) => "the distribution center",
        (_, LocationKind::RetailLocation) => "the retail location",
        (_, LocationKind::Warehouse) => "the warehouse",
        (_, LocationKind::Hub) => "the hub",
    }
}

/// Bare location kind label.
pub fn kind_label(kind: LocationKind, language: LanguageCode) -> &'static str {
    let phrase = kind_phrase(kind, language);
    phrase.split_once(' ').map_or(phrase, |(_, rest)| rest)
}

/// True for events the report keeps: anything not automatic, plus
/// acceptance and delivery events even when automatic.
pub fn is_reportable(category: Category, default_auto: bool) -> bool {
    !default_auto || matches!(category, Category::Collect | Category::Deliver)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub code: EventCode,
    pub timestamp: chrono::DateTime<chrono::Utc>,
    pub location_id: String,
    pub location_name: String,
    pub location_kind: LocationKind,
    pub description: String,
    pub visibility: Visibility,
    pub category: Category,
    pub is_exception: bool,
    pub is_eta_update: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedEntry {
    pub code: EventCode,
    pub description: String,
    pub visibility: Visibility,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParcelReport {
    pub barcode: String,
    pub language: LanguageCode,
    pub delivered: bool,
    /// Reportable events in timestamp order.
    pub entries: Vec<ReportEntry>,
    pub excluded_count: usize,
    pub predicted: Option<Vec<PredictedEntry>>,
    /// Timeline entries dropped to fit a context window.
    #[serde(default)]
    pub truncated: usize,
    pub text: String,
}

fn timeline_line(i: usize, e: &ReportEntry, language: LanguageCode) -> String {
    let mut line = format!(
        "{}. {} | {} | {} | {} {} | {:?}",
        i + 1,
        e.timestamp.format("%Y-%m-%d %H:%M"),
        e.code,
        e.description,
        kind_label(e.location_kind, language),
        e.location_name,
        e.visibility
    );
    if e.is_exception {
        line.push_str(" | EXCEPTION");
    }
    if e.is_eta_update {
        line.push_str(" | ETA update");
    }
    line
}

impl ParcelReport {
    fn render_text(&self, catalog: &TemplateCatalog, shown: &[usize]) -> Result<String> {
        let lang = self.language;
        let mut lines = Vec::new();
        let mut prev: Option<usize> = None;
        for &i in shown {
            if let Some(p) = prev {
                if i > p + 1 {
                    lines.push(match lang {
                        LanguageCode::Nl => format!("... {} gebeurtenissen weggelaten ...", i - p - 1),
                        _ => format!("... {} events omitted ...", i - p - 1),
                    });
                }
            }
            lines.push(timeline_line(i, &self.entries[i], lang));
            prev = Some(i);
        }
        let none = if lang == LanguageCode::Nl { "geen" } else { "none" };
        let exceptions: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.is_exception)
            .map(|e| format!("{} ({})", e.code, e.description))
            .collect();
        let status = match (self.delivered, lang) {
            (true, LanguageCode::Nl) => "bezorgd",
            (false, LanguageCode::Nl) => "nog niet bezorgd",
            (true, _) => "delivered",
            (false, _) => "not delivered yet",
        };
        let prediction = match &self.predicted {
            Some(p) => {
                let predicted: Vec<String> = p
                    .iter()
                    .enumerate()
                    .map(|(i, e)| format!("P{}. {} | {} | predicted", i + 1, e.code, e.description))
                    .collect();
                let body = if predicted.is_empty() { none.to_string() } else { predicted.join("\n") };
                catalog.render_id("parcel.report.prediction", lang, &bindings([("predicted_timeline", body)]))?
            }
            None => String::new(),
        };
        catalog.render_id(
            "parcel.report",
            lang,
            &bindings([
                ("barcode", self.barcode.clone()),
                ("event_count", self.entries.len().to_string()),
                ("excluded_count", self.excluded_count.to_string()),
                ("timeline", lines.join("\n")),
                ("exceptions", if exceptions.is_empty() { none.to_string() } else { exceptions.join(", ") }),
                ("status", status.to_string()),
                ("prediction", prediction),
            ]),
        )
    }

    /// Indices of the timeline entries that survived truncation.
    pub fn shown_indices(&self) -> Vec<usize> {
        let n = self.entries.len();
        let keep = n - self.truncated;
        let head = keep.div_ceil(2);
        let tail = keep - head;
        (0..head).chain(n - tail..n).collect()
    }

    pub fn shown_entries(&self) -> Vec<&ReportEntry> {
        self.shown_indices().into_iter().map(|i| &self.entries[i]).collect()
    }

    /// Drops timeline entries from the middle until the text fits in
    /// `budget` tokens. The first and last entries are always kept.
    pub fn fit_to(&self, catalog: &TemplateCatalog, budget: usize) -> Result<ParcelReport> {
        let mut out = self.clone();
        let n = out.entries.len();
        out.truncated = 0;
        out.text = out.render_text(catalog, &out.shown_indices())?;
        while count_tokens(&out.text) > budget && n - out.truncated > 2 {
            out.truncated += 1;
            out.text = out.render_text(catalog, &out.shown_indices())?;
        }
        Ok(out)
    }
}

/// Runs the report steps: barcode, events, descriptions and location kinds,
/// timeline order, exception marks, default-event exclusion, prediction.
pub fn build_parcel_report(
    record: &ParcelRecord,
    taxonomy: &EventTaxonomy,
    locations: &LocationCatalog,
    prediction: Option<&PredictedSuffix>,
    catalog: &TemplateCatalog,
    language: LanguageCode,
) -> Result<ParcelReport> {
    let mut order: Vec<usize> = (0..record.events.len()).collect();
    order.sort_by_key(|&i| record.events[i].timestamp);
    let mut entries = Vec::new();
    let mut excluded = 0;
    for i in order {
        let ev = &record.events[i];
        let def = taxonomy.lookup_definition(ev.code)?;
        let loc = locations.resolve(&ev.location)?;
        if !is_reportable(def.category, def.default_auto) {
            excluded += 1;
            continue;
        }
        entries.push(ReportEntry {
            code: ev.code,
            timestamp: ev.timestamp,
            location_id: loc.id.clone(),
            location_name: loc.name.clone(),
            location_kind: loc.kind,
            description: def.description.clone(),
            visibility: def.visibility,
            category: def.category,
            is_exception: def.category == Category::Exception,
            is_eta_update: def.is_eta_update(),
        });
    }
    let predicted = match prediction {
        Some(p) => {
            let mut out = Vec::new();
            for &code in &p.codes {
                let def = taxonomy.lookup_definition(code)?;
                if is_reportable(def.category, def.default_auto) {
                    out.push(PredictedEntry {
                        code,
                        description: def.description.clone(),
                        visibility: def.visibility,
                        category: def.category,
                    });
                }
            }
            Some(out)
        }
        None => None,
    };
    let mut report = ParcelReport {
        barcode: record.barcode.clone(),
        language,
        delivered: record.delivered,
        entries,
        excluded_count: excluded,
        predicted,
        truncated: 0,
        text: String::new(),
    };
    report.text = report.render_text(catalog, &report.shown_indices())?;
    Ok(report)
}
