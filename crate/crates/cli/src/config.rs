use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use parceltrace::compress::DEFAULT_RANK;
use parceltrace::data_pipeline::{CorpusConfig, SplitRatios};
use parceltrace::eval_harness::{DEFAULT_SAMPLE_SIZE, DEFAULT_THRESHOLD};
use parceltrace::event_model::{EventTaxonomy, LocationCatalog};
use parceltrace::nl_io::{BarcodeValidator, LanguageCode, DEFAULT_BARCODE_PATTERN};
use parceltrace::prompt_factory::{GenerationParams, TemplateCatalog};
use parceltrace::seq_model::TrainConfig;

/// Optional overrides for bundled catalogs plus the directory artifacts go to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub work_dir: PathBuf,
    /// Raw collo-style CSV read by `etl`; defaults to `<work_dir>/corpus.csv`.
    pub corpus: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub locations: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("parceltrace-work"),
            corpus: None,
            taxonomy: None,
            locations: None,
            templates: None,
            checkpoint: None,
            index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            steps: 40,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub split: SplitRatios,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub generation: GenerationParams,
    pub barcode_pattern: String,
    pub language: LanguageCode,
    pub eval_threshold: f64,
    pub eval_sample: usize,
    /// Copied into every sub-seed (corpus, split, training, generation, sampling).
    pub seed: u64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            split: SplitRatios::default(),
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            generation: GenerationParams::default(),
            barcode_pattern: DEFAULT_BARCODE_PATTERN.to_string(),
            language: LanguageCode::En,
            eval_threshold: DEFAULT_THRESHOLD,
            eval_sample: DEFAULT_SAMPLE_SIZE,
            seed: 42,
        }
    }
}

impl AppConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pushes the global seed down and checks that everything referenced exists.
    pub fn finalize(mut self) -> Result<Self> {
        self.corpus.seed = self.seed;
        self.train.seed = self.seed;
        self.generation.seed = self.seed;
        self.corpus.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        self.generation.validate()?;
        BarcodeValidator::new(&self.barcode_pattern)?;
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            bail!("eval_threshold must lie in [0, 1]");
        }
        if self.language == LanguageCode::Other {
            bail!("language must be en or nl");
        }
        let p = &self.paths;
        for path in [&p.corpus, &p.taxonomy, &p.locations, &p.templates].into_iter().flatten() {
            if !path.exists() {
                bail!("configured path {} does not exist", path.display());
            }
        }
        Ok(self)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.paths.work_dir.join(name)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.paths.corpus.clone().unwrap_or_else(|| self.file("corpus.csv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.file("model.json"))
    }

    pub fn index_path(&self) -> PathBuf {
        self.paths.index.clone().unwrap_or_else(|| self.file("index.jsonl"))
    }
}

/// Catalogs every command reads, bundled unless overridden.
pub struct Catalogs {
    pub taxonomy: EventTaxonomy,
    pub locations: LocationCatalog,
    pub templates: TemplateCatalog,
}

impl Catalogs {
    pub fn load(config: &AppConfig) -> Result<Self> {
        let p = &config.paths;
        let taxonomy = match &p.taxonomy {
            Some(path) => EventTaxonomy::from_csv(std::fs::File::open(path)?)?,
            None => EventTaxonomy::bundled(),
        };
        let locations = match &p.locations {
            Some(path) => LocationCatalog::from_csv(std::fs::File::open(path)?)?,
            None => LocationCatalog::bundled(),
        };
        let templates = match &p.templates {
            Some(path) => TemplateCatalog::from_json(&std::fs::read_to_string(path)?)?,
            None => TemplateCatalog::bundled().clone(),
        };
        Ok(Self {
            taxonomy,
            locations,
            templates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = AppConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<AppConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: AppConfig = serde_json::from_str(r#"{"seed": 7, "corpus": {"n_parcels": 10}}"#).unwrap();
        let c = c.finalize().unwrap();
        assert_eq!(c.corpus.n_parcels, 10);
        assert_eq!(c.corpus.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.total_steps, 120);
    }

    #[test]
    fn missing_override_path_is_rejected() {
        let mut c = AppConfig::default();
        c.paths.taxonomy = Some(PathBuf::from("/nonexistent/taxonomy.csv"));
        assert!(c.finalize().is_err());
    }

    #[test]
    fn bad_pattern_is_rejected() {
        let c = AppConfig {
            barcode_pattern: "(".into(),
            ..AppConfig::default()
        };
        assert!(c.finalize().is_err());
    }
}
