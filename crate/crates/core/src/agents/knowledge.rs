//! Knowledge base chunks and the Knowledge Expert reply.

use serde::{Deserialize, Serialize};

use super::{AgentError, Reply, Result};
use crate::embed_store::{chunk_document, tokenize, ChunkSource, DocumentChunk, VectorIndex, DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE};
use crate::event_model::{EventTaxonomy, Visibility};
use crate::nl_io::LanguageCode;
use crate::prompt_factory::{bindings, AgentId, TemplateCatalog, TemplateKind};

pub const BUNDLED_ABBREVIATIONS: &str = include_str!("../../data/knowledge/abbreviations.csv");
pub const BUNDLED_DOCS: &str = include_str!("../../data/knowledge/docs.json");

/// Below this best-chunk cosine the agent admits it does not know.
pub const DEFAULT_KNOWLEDGE_THRESHOLD: f64 = 0.25;
/// Chunks scoring under this fraction of the best one are not quoted.
const RELATIVE_CUTOFF: f64 = 0.8;

/// Hashed features collide; a chunk only counts when it shares a word with
/// the question.
fn shares_word(question: &[String], text: &str) -> bool {
    tokenize(text).iter().any(|w| question.contains(w))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abbreviation {
    pub abbreviation: String,
    pub expansion: String,
    pub explanation: String,
}

impl Abbreviation {
    pub fn chunk_id(&self) -> String {
        format!("abbr:{}", self.abbreviation)
    }

    /// The indexed definition; kept short so brief questions still match.
    pub fn text(&self) -> String {
        format!("{} means {}.", self.abbreviation, self.expansion)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InternalDoc {
    pub id: String,
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub language: LanguageCode,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    pub abbreviations: Vec<Abbreviation>,
    pub docs: Vec<InternalDoc>,
}

impl KnowledgeBase {
    pub fn bundled() -> Self {
        let mut rdr = csv::Reader::from_reader(BUNDLED_ABBREVIATIONS.as_bytes());
        let abbreviations = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<Abbreviation>, _>>()
            .expect("bundled abbreviations parse");
        let docs = serde_json::from_str(BUNDLED_DOCS).expect("bundled docs parse");
        Self { abbreviations, docs }
    }

    /// Case-sensitive lookup; abbreviations are written in capitals.
    pub fn abbreviation(&self, term: &str) -> Option<&Abbreviation> {
        self.abbreviations.iter().find(|a| a.abbreviation == term)
    }

    /// Abbreviation, internal doc and event-code chunks.
    pub fn chunks(&self, taxonomy: &EventTaxonomy) -> Result<Vec<DocumentChunk>> {
        let mut out = Vec::new();
        for a in &self.abbreviations {
            out.push(
                DocumentChunk::new(a.chunk_id(), a.text(), ChunkSource::Abbreviations)
                    .with_meta("expansion", a.expansion.clone())
                    .with_meta("explanation", a.explanation.clone()),
            );
        }
        for d in &self.docs {
            let text = format!("{}. {}", d.title, d.text);
            let parts = chunk_document(
                &text,
                DEFAULT_CHUNK_SIZE,
                DEFAULT_CHUNK_OVERLAP,
                &format!("doc:{}", d.id),
                ChunkSource::InternalDoc,
            )?;
            out.extend(
                parts
                    .into_iter()
                    .map(|c| c.with_meta("title", d.title.clone()).with_meta("language", d.language.as_str())),
            );
        }
        for def in taxonomy.iter() {
            let seen = match def.visibility {
                Visibility::External => "visible to customers",
                Visibility::Internal => "internal only",
            };
            let text = format!(
                "{}: {}. {:?}, {}{}.",
                def.code,
                def.description,
                def.category,
                seen,
                if def.default_auto { ", automatic default event" } else { "" }
            );
            out.push(DocumentChunk::new(format!("code:{}", def.code), text, ChunkSource::Taxonomy));
        }
        Ok(out)
    }

    /// Inserts or replaces all knowledge chunks in `index`.
    pub fn index_into(&self, taxonomy: &EventTaxonomy, index: &mut VectorIndex) -> Result<usize> {
        let chunks = self.chunks(taxonomy)?;
        let n = chunks.len();
        for c in chunks {
            index.upsert(c);
        }
        Ok(n)
    }
}

/// Retrieves from non-parcel chunks written in `language` (or in no
/// particular language) and answers from the ones that clear `threshold` and
/// share a word with the question. Parcel chunks are left to the Parcel agent.
pub fn knowledge_reply(
    question: &str,
    index: &VectorIndex,
    k: usize,
    threshold: f64,
    catalog: &TemplateCatalog,
    language: LanguageCode,
) -> Result<Reply> {
    if index.is_empty() {
        return Err(AgentError::EmptyIndex);
    }
    let words = tokenize(question);
    let results = index.retrieve_where(question, k, |c| {
        c.source != ChunkSource::ParcelRecord && c.metadata.get("language").is_none_or(|l| l == language.as_str())
    })?;
    let grounded: Vec<_> = results.iter().filter(|r| shares_word(&words, &r.chunk.text)).collect();
    let best = grounded.first().map_or(0.0, |r| r.score);
    let used: Vec<_> = grounded
        .into_iter()
        .filter(|r| r.score >= threshold && r.score >= RELATIVE_CUTOFF * best)
        .collect();
    let context: Vec<String> = results.iter().map(|r| format!("[{}] {}", r.chunk.id, r.chunk.text)).collect();
    let instruction = catalog.get_template(AgentId::KnowledgeExpert, TemplateKind::AgentInstruction, language)?;
    let persona = catalog.get_template(AgentId::KnowledgeExpert, TemplateKind::AgentPersona, language)?;
    let prompt = format!(
        "{}\n{}",
        persona.template.body,
        crate::prompt_factory::render(
            &instruction.template,
            &bindings([("question", question.to_string()), ("context_str", context.join("\n"))]),
        )?
    );
    if used.is_empty() {
        let text = catalog.render_id("knowledge.output.fallback", language, &Default::default())?;
        return Ok(Reply::new(text, AgentId::KnowledgeExpert).with_prompt(prompt));
    }
    let answer: Vec<String> = used
        .iter()
        .map(|r| match r.chunk.metadata.get("explanation") {
            Some(extra) => format!("{} {}", r.chunk.text, extra),
            None => r.chunk.text.clone(),
        })
        .collect();
    let citations: Vec<String> = used.iter().map(|r| r.chunk.id.clone()).collect();
    let text = catalog.render_id(
        "knowledge.output",
        language,
        &bindings([("answer", answer.join(" ")), ("sources", citations.join(", "))]),
    )?;
    let mut reply = Reply::new(text, AgentId::KnowledgeExpert).with_prompt(prompt);
    reply.citations = citations;
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index() -> VectorIndex {
        let mut idx = VectorIndex::new();
        KnowledgeBase::bundled().index_into(&EventTaxonomy::bundled(), &mut idx).unwrap();
        idx
    }

    #[test]
    fn bundled_knowledge_loads() {
        let kb = KnowledgeBase::bundled();
        assert!(kb.abbreviations.len() >= 20);
        assert!(kb.abbreviation("ETA").is_some());
        assert!(kb.abbreviation("eta").is_none());
        assert!(kb.docs.iter().any(|d| d.text.contains("provide the barcode")));
    }

    #[test]
    fn abbreviation_description_retrieves_its_chunk_first() {
        let idx = index();
        let kb = KnowledgeBase::bundled();
        for a in &kb.abbreviations {
            let reply =
                knowledge_reply(&a.text(), &idx, 4, DEFAULT_KNOWLEDGE_THRESHOLD, TemplateCatalog::bundled(), LanguageCode::En)
                    .unwrap();
            assert_eq!(reply.citations.first(), Some(&a.chunk_id()), "{}", a.abbreviation);
        }
    }

    #[test]
    fn abbreviation_question_gets_expansion() {
        let idx = index();
        let kb = KnowledgeBase::bundled();
        for term in ["ETA", "POD", "RTS", "DC"] {
            let expansion = &kb.abbreviation(term).unwrap().expansion;
            let reply = knowledge_reply(
                &format!("What does {term} mean?"),
                &idx,
                4,
                DEFAULT_KNOWLEDGE_THRESHOLD,
                TemplateCatalog::bundled(),
                LanguageCode::En,
            )
            .unwrap();
            assert!(reply.text.contains(expansion.as_str()), "{term}: {}", reply.text);
            for c in &reply.citations {
                assert!(idx.get(c).is_some());
            }
        }
    }

    #[test]
    fn unrelated_question_falls_back() {
        let idx = index();
        let reply = knowledge_reply(
            "zzzz qqqq xxyy?",
            &idx,
            4,
            DEFAULT_KNOWLEDGE_THRESHOLD,
            TemplateCatalog::bundled(),
            LanguageCode::En,
        )
        .unwrap();
        assert!(reply.text.starts_with("I'm sorry, I don't have information on that topic"));
        assert!(reply.citations.is_empty());
    }

    #[test]
    fn threshold_above_one_always_falls_back() {
        let idx = index();
        let reply = knowledge_reply("What does ETA mean?", &idx, 4, 1.01, TemplateCatalog::bundled(), LanguageCode::En).unwrap();
        assert!(reply.citations.is_empty());
    }

    #[test]
    fn collisions_without_shared_words_fall_back() {
        let idx = index();
        for q in ["Can you help me?", "What is the weather today?"] {
            let reply = knowledge_reply(q, &idx, 4, DEFAULT_KNOWLEDGE_THRESHOLD, TemplateCatalog::bundled(), LanguageCode::En).unwrap();
            assert!(reply.citations.is_empty(), "{q}: {:?}", reply.citations);
        }
    }

    #[test]
    fn docs_are_picked_in_the_reply_language() {
        let idx = index();
        let en = knowledge_reply("How do I find my barcode?", &idx, 4, 0.25, TemplateCatalog::bundled(), LanguageCode::En).unwrap();
        assert_eq!(en.citations.first().map(String::as_str), Some("doc:find-barcode:0"));
        let nl = knowledge_reply("Waar is mijn pakket?", &idx, 4, 0.25, TemplateCatalog::bundled(), LanguageCode::Nl).unwrap();
        assert_eq!(nl.citations, vec!["doc:pakket-volgen:0".to_string()]);
        assert!(nl.text.contains("barcode"));
    }

    #[test]
    fn empty_index_is_an_error() {
        let err = knowledge_reply("x", &VectorIndex::new(), 4, 0.25, TemplateCatalog::bundled(), LanguageCode::En).unwrap_err();
        assert!(matches!(err, AgentError::EmptyIndex));
    }
}
