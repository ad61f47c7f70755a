//! Language identification by character-trigram profiles, and barcode checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::prompt_factory::{PromptError, ResolvedTemplate, TemplateCatalog};

pub const DEFAULT_BARCODE_PATTERN: &str = r"^3S[A-Z0-9]{4}[0-9]{7}$";

pub const BUNDLED_PROFILES: &str = include_str!("../data/lang/profiles.json");
pub const BUNDLED_TESTSET: &str = include_str!("../data/lang/testset.json");
pub const EN_TRAINING_TEXT: &str = include_str!("../data/lang/en.txt");
pub const NL_TRAINING_TEXT: &str = include_str!("../data/lang/nl.txt");

/// Inputs with fewer letters than this are not classified.
pub const MIN_CHARS: usize = 3;
/// Required gap between the best and runner-up cosine.
pub const DEFAULT_MARGIN: f64 = 0.01;
/// Softmax temperature turning cosines into a confidence.
pub const CONFIDENCE_TEMPERATURE: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum NlIoError {
    #[error("invalid barcode pattern: {0}")]
    Pattern(#[from] regex::Error),
    #[error("unknown language code {0:?}")]
    UnknownLanguage(String),
    #[error("profile for {0} does not sum to 1")]
    BadProfile(LanguageCode),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LanguageCode {
    #[default]
    En,
    Nl,
    Other,
}

impl LanguageCode {
    pub fn as_str(self) -> &'static str {
        match self {
            LanguageCode::En => "en",
            LanguageCode::Nl => "nl",
            LanguageCode::Other => "other",
        }
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LanguageCode {
    type Err = NlIoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "en" | "english" => Ok(LanguageCode::En),
            "nl" | "dutch" | "nederlands" => Ok(LanguageCode::Nl),
            "other" => Ok(LanguageCode::Other),
            _ => Err(NlIoError::UnknownLanguage(s.to_string())),
        }
    }
}

/// Relative trigram frequencies for one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangProfile {
    pub language: LanguageCode,
    pub trigrams: BTreeMap<String, f64>,
}

/// Lowercased words padded with a space on each side, split into trigrams.
/// Anything that is not a letter acts as a word break.
pub fn trigram_counts(text: &str) -> BTreeMap<String, usize> {
    let lower = text.to_lowercase();
    let mut counts = BTreeMap::new();
    for word in lower.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()) {
        let padded: Vec<char> = std::iter::once(' ').chain(word.chars()).chain(std::iter::once(' ')).collect();
        for w in padded.windows(3) {
            *counts.entry(w.iter().collect::<String>()).or_insert(0) += 1;
        }
    }
    counts
}

fn normalize(counts: &BTreeMap<String, usize>) -> BTreeMap<String, f64> {
    let total: usize = counts.values().sum();
    if total == 0 {
        return BTreeMap::new();
    }
    counts.iter().map(|(k, &v)| (k.clone(), v as f64 / total as f64)).collect()
}

impl LangProfile {
    pub fn from_text(language: LanguageCode, text: &str) -> Self {
        Self {
            language,
            trigrams: normalize(&trigram_counts(text)),
        }
    }

    pub fn total(&self) -> f64 {
        self.trigrams.values().sum()
    }

    fn norm(&self) -> f64 {
        self.trigrams.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine between this profile and raw trigram frequencies.
    pub fn cosine(&self, other: &BTreeMap<String, f64>) -> f64 {
        let dot: f64 = other.iter().filter_map(|(k, v)| self.trigrams.get(k).map(|p| p * v)).sum();
        let on = other.values().map(|v| v * v).sum::<f64>().sqrt();
        let n = self.norm() * on;
        if n == 0.0 {
            0.0
        } else {
            dot / n
        }
    }
}

/// The bundled profiles rebuilt from the shipped training texts.
pub fn build_bundled_profiles() -> Vec<LangProfile> {
    vec![
        LangProfile::from_text(LanguageCode::En, EN_TRAINING_TEXT),
        LangProfile::from_text(LanguageCode::Nl, NL_TRAINING_TEXT),
    ]
}

#[derive(Debug, Clone)]
pub struct LanguageDetector {
    profiles: Vec<LangProfile>,
    margin: f64,
}

impl LanguageDetector {
    pub fn new(profiles: Vec<LangProfile>, margin: f64) -> Result<Self, NlIoError> {
        for p in &profiles {
            if (p.total() - 1.0).abs() > 1e-6 {
                return Err(NlIoError::BadProfile(p.language));
            }
        }
        Ok(Self { profiles, margin })
    }

    pub fn from_json(text: &str) -> Result<Self, NlIoError> {
        Self::new(serde_json::from_str(text)?, DEFAULT_MARGIN)
    }

    pub fn bundled() -> &'static LanguageDetector {
        static DETECTOR: OnceLock<LanguageDetector> = OnceLock::new();
        DETECTOR.get_or_init(|| LanguageDetector::from_json(BUNDLED_PROFILES).expect("bundled profiles are valid"))
    }

    pub fn profiles(&self) -> &[LangProfile] {
        &self.profiles
    }

    /// Cosine to every profile, in profile order.
    pub fn scores(&self, text: &str) -> Vec<(LanguageCode, f64)> {
        let freq = normalize(&trigram_counts(text));
        self.profiles.iter().map(|p| (p.language, p.cosine(&freq))).collect()
    }

    pub fn detect(&self, text: &str) -> (LanguageCode, f64) {
        let letters = text.chars().filter(|c| c.is_alphabetic()).count();
        if letters < MIN_CHARS || self.profiles.is_empty() {
            return (LanguageCode::Other, 0.0);
        }
        let scores = self.scores(text);
        let mut ranked = scores.clone();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (best, best_sim) = ranked[0];
        if best_sim <= 0.0 {
            return (LanguageCode::Other, 0.0);
        }
        let z: f64 = scores.iter().map(|(_, s)| ((s - best_sim) / CONFIDENCE_TEMPERATURE).exp()).sum();
        let confidence = 1.0 / z;
        let runner_up = ranked.get(1).map_or(0.0, |r| r.1);
        if best_sim - runner_up < self.margin {
            // too close to call; report how unsure we are rather than a language
            return (LanguageCode::Other, 1.0 - confidence);
        }
        (best, confidence)
    }
}

/// Detection against the bundled EN/NL profiles.
pub fn detect_language(text: &str) -> (LanguageCode, f64) {
    LanguageDetector::bundled().detect(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    pub language: LanguageCode,
}

pub fn bundled_testset() -> Vec<LabeledSentence> {
    serde_json::from_str(BUNDLED_TESTSET).expect("bundled test set parses")
}

/// Fraction of sentences whose detected language matches the label.
pub fn detection_accuracy(detector: &LanguageDetector, set: &[LabeledSentence]) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let hits = set.iter().filter(|s| detector.detect(&s.text).0 == s.language).count();
    hits as f64 / set.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarcodeVerdict {
    pub valid: bool,
    pub matched_rule: String,
    pub confidence: f64,
}

/// Regex grammar followed by a weighted rule score.
#[derive(Debug, Clone)]
pub struct BarcodeValidator {
    grammar: Regex,
}

impl Default for BarcodeValidator {
    fn default() -> Self {
        Self::new(DEFAULT_BARCODE_PATTERN).expect("default pattern compiles")
    }
}

impl BarcodeValidator {
    pub fn new(pattern: &str) -> Result<Self, NlIoError> {
        Ok(Self {
            grammar: Regex::new(pattern)?,
        })
    }

    pub fn pattern(&self) -> &str {
        self.grammar.as_str()
    }

    /// Rule score in [0, 1]. Looks at length, charset and the longest digit run.
    pub fn score(s: &str) -> f64 {
        let len = s.chars().count();
        let mut score = 0.0;
        if (10..=20).contains(&len) {
            score += 0.3;
        } else if (6..=30).contains(&len) {
            score += 0.1;
        }
        if len > 0 && s.chars().all(|c| c.is_ascii_alphanumeric()) {
            score += 0.3;
        }
        let letters = s.chars().filter(|c| c.is_ascii_alphabetic()).count();
        let digits = s.chars().filter(|c| c.is_ascii_digit()).count();
        if letters > 0 && digits > letters {
            score += 0.2;
        }
        let mut run = 0;
        let mut longest = 0;
        for c in s.chars() {
            run = if c.is_ascii_digit() { run + 1 } else { 0 };
            longest = longest.max(run);
        }
        if longest >= 5 {
            score += 0.2;
        }
        f64::min(score, 1.0)
    }

    pub fn validate(&self, s: &str) -> BarcodeVerdict {
        let s = s.trim().to_uppercase();
        let confidence = Self::score(&s);
        if !self.grammar.is_match(&s) {
            return BarcodeVerdict {
                valid: false,
                matched_rule: "regex".into(),
                confidence,
            };
        }
        if confidence < 0.5 {
            return BarcodeVerdict {
                valid: false,
                matched_rule: "classifier".into(),
                confidence,
            };
        }
        BarcodeVerdict {
            valid: true,
            matched_rule: "regex+classifier".into(),
            confidence,
        }
    }

    /// First token of the text that validates, uppercased.
    pub fn find(&self, text: &str) -> Option<String> {
        text.split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|t| !t.is_empty())
            .find(|t| self.validate(t).valid)
            .map(|t| t.to_uppercase())
    }

    /// Tokens that look like a barcode attempt (start with "3S", or are long
    /// and mostly digits) but do not validate.
    pub fn find_invalid_attempt(&self, text: &str) -> Option<String> {
        text.split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|t| t.len() >= 6)
            .find(|t| {
                let up = t.to_uppercase();
                let digits = up.chars().filter(|c| c.is_ascii_digit()).count();
                (up.starts_with("3S") || digits * 2 > up.len()) && !self.validate(&up).valid
            })
            .map(|t| t.to_uppercase())
    }
}

/// Catalog entry in the target language; English plus a notice when that
/// variant does not exist.
pub fn translate_template(template_id: &str, target: LanguageCode) -> Result<ResolvedTemplate, PromptError> {
    TemplateCatalog::bundled().get(template_id, target)
}

pub fn validate_barcode(s: &str) -> BarcodeVerdict {
    BarcodeValidator::default().validate(s)
}

pub fn find_barcode(text: &str) -> Option<String> {
    BarcodeValidator::default().find(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bundled_profiles_match_training_texts() {
        let rebuilt = build_bundled_profiles();
        let shipped: Vec<LangProfile> = serde_json::from_str(BUNDLED_PROFILES).unwrap();
        assert_eq!(rebuilt.len(), shipped.len());
        for (a, b) in rebuilt.iter().zip(&shipped) {
            assert_eq!(a.language, b.language);
            assert_eq!(a.trigrams.len(), b.trigrams.len());
            for (k, v) in &a.trigrams {
                assert!((v - b.trigrams[k]).abs() < 1e-12, "{k}");
            }
        }
    }

    #[test]
    #[ignore = "rewrites data/lang/profiles.json"]
    fn regenerate_profiles() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/lang/profiles.json");
        std::fs::write(path, serde_json::to_string_pretty(&build_bundled_profiles()).unwrap()).unwrap();
    }

    #[test]
    fn profiles_sum_to_one() {
        for p in LanguageDetector::bundled().profiles() {
            assert!((p.total() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn padded_trigrams() {
        let c = trigram_counts("Ab");
        assert_eq!(c.keys().cloned().collect::<Vec<_>>(), vec![" ab", "ab "]);
        let c = trigram_counts("de de");
        assert_eq!(c[" de"], 2);
    }

    #[test]
    fn detects_the_two_sample_questions() {
        let (l, c) = detect_language("Where is my parcel?");
        assert_eq!(l, LanguageCode::En);
        assert!(c > 0.7, "{c}");
        let (l, c) = detect_language("Waar is mijn pakket?");
        assert_eq!(l, LanguageCode::Nl);
        assert!(c > 0.7, "{c}");
    }

    #[test]
    fn empty_and_short_inputs_are_other() {
        assert_eq!(detect_language(""), (LanguageCode::Other, 0.0));
        assert_eq!(detect_language("ok"), (LanguageCode::Other, 0.0));
        assert_eq!(detect_language("12345 !!"), (LanguageCode::Other, 0.0));
    }

    #[test]
    fn testset_accuracy() {
        let set = bundled_testset();
        assert_eq!(set.len(), 200);
        assert_eq!(set.iter().filter(|s| s.language == LanguageCode::En).count(), 100);
        let acc = detection_accuracy(LanguageDetector::bundled(), &set);
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn testset_is_disjoint_from_training_text() {
        let training: Vec<&str> = EN_TRAINING_TEXT.lines().chain(NL_TRAINING_TEXT.lines()).collect();
        for s in bundled_testset() {
            assert!(!training.contains(&s.text.as_str()), "{}", s.text);
        }
    }

    #[test]
    fn language_code_parsing() {
        assert_eq!("NL".parse::<LanguageCode>().unwrap(), LanguageCode::Nl);
        assert_eq!("en".parse::<LanguageCode>().unwrap(), LanguageCode::En);
        assert!("fr".parse::<LanguageCode>().is_err());
        assert_eq!(serde_json::to_string(&LanguageCode::Other).unwrap(), "\"other\"");
    }

    #[test]
    fn translation_reads_the_catalog() {
        let nl = translate_template("reception.persona", LanguageCode::Nl).unwrap();
        assert_eq!(nl.template.language, LanguageCode::Nl);
        assert!(nl.template.body.starts_with("Je bent SuperTracy"));
        assert!(nl.fallback_notice.is_none());
        let other = translate_template("reception.persona", LanguageCode::Other).unwrap();
        assert_eq!(other.template.language, LanguageCode::En);
        assert!(other.fallback_notice.is_some());
        assert!(matches!(
            translate_template("no.such.template", LanguageCode::Nl),
            Err(PromptError::MissingTemplate { .. })
        ));
    }

    #[test]
    fn barcode_examples() {
        let v = validate_barcode("3SABCD1234567");
        assert!(v.valid);
        assert!(v.confidence >= 0.5);
        let v = validate_barcode("hello");
        assert!(!v.valid);
        assert_eq!(v.matched_rule, "regex");
        assert!(validate_barcode("3sabcd1234567").valid);
        assert!(!validate_barcode("3SABCD123456").valid);
        assert!(!validate_barcode("4SABCD1234567").valid);
    }

    #[test]
    fn classifier_can_veto_a_loose_grammar() {
        let v = BarcodeValidator::new(r"^[A-Z]+$").unwrap();
        let verdict = v.validate("abc");
        assert!(!verdict.valid);
        assert_eq!(verdict.matched_rule, "classifier");
    }

    #[test]
    fn finds_barcode_in_text() {
        assert_eq!(find_barcode("my code is 3sabcd1234567, thanks").as_deref(), Some("3SABCD1234567"));
        assert_eq!(find_barcode("no code here"), None);
        let v = BarcodeValidator::default();
        assert_eq!(v.find_invalid_attempt("it is 3SAB12").as_deref(), Some("3SAB12"));
        assert_eq!(v.find_invalid_attempt("hello there"), None);
    }

    proptest! {
        #[test]
        fn detection_is_case_insensitive(s in "[a-zA-Z ]{0,40}") {
            let a = detect_language(&s);
            let b = detect_language(&s.to_uppercase());
            prop_assert_eq!(a.0, b.0);
            prop_assert!((a.1 - b.1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.1));
        }

        #[test]
        fn barcode_validation_ignores_case(s in "[0-9a-zA-Z]{0,16}") {
            prop_assert_eq!(validate_barcode(&s), validate_barcode(&s.to_uppercase()));
        }

        #[test]
        fn grammar_valid_codes_pass(p in "[A-Z0-9]{4}", d in "[0-9]{7}") {
            let v = validate_barcode(&format!("3S{p}{d}"));
            prop_assert!(v.valid);
            prop_assert!(v.confidence >= 0.5);
        }
    }
}
