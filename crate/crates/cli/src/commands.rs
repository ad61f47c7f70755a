//! Pipeline stages. Each stage reads what earlier stages left in the work
//! directory and runs them first when their output is missing.

use std::io::{BufRead, IsTerminal, Write};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;
use serde_json::json;

use parceltrace::agents::{AgentId, Assistant, ConversationState, KnowledgeBase, ParcelAgent, Predictor, Reply};
use parceltrace::compress::{finetune_lora, quantize_model, LoraSet};
use parceltrace::data_pipeline::{
    export_alpaca, from_jsonl, generate_corpus, load, split, summary_stats, to_jsonl, transform, ColumnDictionary,
    JourneyStore, RawTable,
};
use parceltrace::embed_store::VectorIndex;
use parceltrace::eval_harness::{run_eval, sample_unhappy};
use parceltrace::event_model::ParcelRecord;
use parceltrace::nl_io::{detect_language, BarcodeValidator, LanguageCode};
use parceltrace::seq_model::checkpoint::{load_params, save_params, Checkpoint};
use parceltrace::seq_model::{all_prefix_distributions, evaluate_loss, sequences_from_records, train, ModelParams, TrainConfig, Vocabulary};

use crate::config::{AppConfig, Catalogs};

/// What a command prints: a JSON document for `--json`, text otherwise.
pub struct Output {
    pub json: serde_json::Value,
    pub text: String,
    /// Nonzero when the command ran but its verdict is a failure.
    pub exit_code: u8,
}

impl Output {
    fn new<T: Serialize>(value: &T, text: String) -> Result<Self> {
        Ok(Self {
            json: serde_json::to_value(value)?,
            text,
            exit_code: 0,
        })
    }
}

pub struct App {
    pub config: AppConfig,
    pub catalogs: Catalogs,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn agent_name(agent: AgentId) -> &'static str {
    match agent {
        AgentId::Reception => "Reception",
        AgentId::Parcel => "Parcel",
        AgentId::KnowledgeExpert => "Knowledge Expert",
    }
}

impl App {
    pub fn new(config: AppConfig) -> Result<Self> {
        let catalogs = Catalogs::load(&config)?;
        Ok(Self { config, catalogs })
    }

    fn language(&self) -> LanguageCode {
        self.config.language
    }

    pub fn gen_data(&self) -> Result<Output> {
        let c = &self.catalogs;
        let corpus = generate_corpus(&self.config.corpus, &c.taxonomy, &c.locations)?;
        let path = self.config.file("corpus.csv");
        write(&path, &corpus.raw.to_csv()?)?;
        let unhappy = corpus.records.iter().filter(|r| r.is_unhappy(&c.taxonomy)).count();
        let delivered = corpus.records.iter().filter(|r| r.delivered).count();
        let summary = json!({
            "parcels": corpus.records.len(),
            "rows": corpus.raw.rows.len(),
            "columns": corpus.raw.headers.len(),
            "unhappy": unhappy,
            "delivered": delivered,
            "file": path,
        });
        let text = format!(
            "wrote {} rows x {} columns for {} parcels ({} unhappy, {} delivered) to {}",
            corpus.raw.rows.len(),
            corpus.raw.headers.len(),
            corpus.records.len(),
            unhappy,
            delivered,
            path.display()
        );
        Output::new(&summary, text)
    }

    pub fn etl(&self) -> Result<Output> {
        let source = self.config.corpus_path();
        if !source.exists() && self.config.paths.corpus.is_none() {
            log::info!("{} missing; generating data first", source.display());
            self.gen_data()?;
        }
        let raw = RawTable::from_csv(&read(&source)?)?;
        let out = transform(&raw, &ColumnDictionary::bundled())?;
        let records = out.records;
        write(&self.config.file("records.jsonl"), &to_jsonl(&records)?)?;
        let (tr, va, te) = split(&records, self.config.split, self.config.seed)?;
        write(&self.config.file("train.jsonl"), &to_jsonl(&tr)?)?;
        write(&self.config.file("val.jsonl"), &to_jsonl(&va)?)?;
        write(&self.config.file("test.jsonl"), &to_jsonl(&te)?)?;
        let agent = self.parcel_agent(None);
        write(&self.config.file("alpaca.jsonl"), &to_jsonl(&export_alpaca(&records, &agent))?)?;
        let summary = summary_stats(&records, &self.catalogs.taxonomy);
        write(&self.config.file("summary.txt"), &summary)?;
        let value = json!({
            "report": out.report,
            "train": tr.len(),
            "val": va.len(),
            "test": te.len(),
        });
        let r = &out.report;
        let text = format!(
            "{} rows in, {} duplicates, {} without barcode, {} bad timestamps, {} malformed codes\n\
             {} parcels: {} train / {} val / {} test\n\n{}",
            r.rows_in,
            r.duplicate_rows,
            r.missing_barcode_rows,
            r.flagged_timestamps,
            r.malformed_codes,
            r.parcels,
            tr.len(),
            va.len(),
            te.len(),
            summary
        );
        Output::new(&value, text)
    }

    fn records_file(&self, name: &str) -> Result<Vec<ParcelRecord>> {
        let path = self.config.file(name);
        if !path.exists() {
            log::info!("{} missing; running etl first", path.display());
            self.etl()?;
        }
        Ok(from_jsonl(&read(&path)?)?)
    }

    pub fn records(&self) -> Result<Vec<ParcelRecord>> {
        self.records_file("records.jsonl")
    }

    fn vocab(&self) -> Vocabulary {
        Vocabulary::from_taxonomy(&self.catalogs.taxonomy)
    }

    pub fn train(&self) -> Result<Output> {
        let tr = self.records_file("train.jsonl")?;
        let va = self.records_file("val.jsonl")?;
        let vocab = self.vocab();
        let (params, trace) = train(&sequences_from_records(&tr), &sequences_from_records(&va), &self.config.train, &vocab)?;
        let path = self.config.checkpoint_path();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_params(&path, &params, &vocab)?;
        write(&self.config.file("loss.csv"), &trace.to_csv())?;
        let at = |i: usize| trace.moving_avg.get(i).copied().unwrap_or(f64::NAN);
        let early = at(LOSS_EARLY_STEP - 1);
        let last = at(trace.len().saturating_sub(1));
        let value = json!({
            "steps": trace.len(),
            "first_loss": trace.losses.first(),
            "moving_avg_early": early,
            "moving_avg_last": last,
            "ratio": last / early,
            "val_loss": trace.val_loss,
            "parameters": params.parameter_count(),
            "checkpoint": path,
        });
        let text = format!(
            "{} steps, {} parameters\nmoving-average loss {:.4} at step {} -> {:.4} at step {} (ratio {:.3})\nvalidation loss {}\ncheckpoint {}",
            trace.len(),
            params.parameter_count(),
            early,
            LOSS_EARLY_STEP,
            last,
            trace.len(),
            last / early,
            trace.val_loss.map_or("n/a".into(), |v| format!("{v:.4}")),
            path.display()
        );
        Output::new(&value, text)
    }

    pub fn model(&self) -> Result<(ModelParams, Vocabulary)> {
        let path = self.config.checkpoint_path();
        if !path.exists() {
            log::info!("{} missing; training first", path.display());
            self.train()?;
        }
        Ok(load_params(&path)?)
    }

    /// The checkpoint if one exists; stories only predict when a model is around.
    fn model_if_present(&self) -> Result<Option<(ModelParams, Vocabulary)>> {
        let path = self.config.checkpoint_path();
        if path.exists() {
            Ok(Some(load_params(&path)?))
        } else {
            log::info!("no checkpoint at {}; stories will not include predictions", path.display());
            Ok(None)
        }
    }

    pub fn quantize(&self, bits: u32) -> Result<Output> {
        let (params, vocab) = self.model()?;
        let q = quantize_model(&params, bits)?;
        let path = self.config.file(&format!("model.q{bits}.json"));
        Checkpoint::from_quantized(&q, &vocab).save(&path)?;
        let deq = q.dequantize()?;
        let mut max_error = 0.0f64;
        let mut bound = 0.0f64;
        for (name, m) in params.matrices() {
            let qm = &q.matrices[&name];
            let r = deq.matrix(&name).expect("same layout");
            max_error = max_error.max(m.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            bound = bound.max(qm.error_bound());
        }
        let (agree, probes) = self.argmax_agreement(&params, &deq, &vocab, QUANT_PROBES)?;
        let full_bits = params.parameter_count() * 64;
        let value = json!({
            "bits": bits,
            "storage_bits": q.storage_bits(),
            "full_bits": full_bits,
            "max_error": max_error,
            "max_half_step": bound,
            "argmax_agreement": agree as f64 / probes.max(1) as f64,
            "probes": probes,
            "file": path,
        });
        let text = format!(
            "{bits}-bit model: {} of {} bits ({:.1}%)\nmax reconstruction error {:.3e} (half step {:.3e})\nargmax agreement {agree}/{probes}\nwrote {}",
            q.storage_bits(),
            full_bits,
            100.0 * q.storage_bits() as f64 / full_bits as f64,
            max_error,
            bound,
            path.display()
        );
        Output::new(&value, text)
    }

    /// Next-code argmax agreement over the first `limit` prefixes of the test split.
    fn argmax_agreement(&self, a: &ModelParams, b: &ModelParams, vocab: &Vocabulary, limit: usize) -> Result<(usize, usize)> {
        let test = self.records_file("test.jsonl")?;
        let (mut agree, mut total) = (0, 0);
        for r in &test {
            let codes: Vec<_> = r.codes().into_iter().filter(|c| vocab.index_of(*c).is_some()).collect();
            if codes.is_empty() {
                continue;
            }
            let pa = all_prefix_distributions(&codes, a, vocab)?;
            let pb = all_prefix_distributions(&codes, b, vocab)?;
            for (ra, rb) in pa.rows().into_iter().zip(pb.rows()) {
                if total == limit {
                    return Ok((agree, total));
                }
                agree += usize::from(argmax(ra.iter()) == argmax(rb.iter()));
                total += 1;
            }
        }
        Ok((agree, total))
    }

    pub fn lora_finetune(&self) -> Result<Output> {
        let (base, vocab) = self.model()?;
        let tr = self.records_file("train.jsonl")?;
        let lc = &self.config.lora;
        let adapters = LoraSet::init(&base, lc.rank, self.config.seed)?;
        let cfg = TrainConfig {
            total_steps: lc.steps,
            lr: lc.lr,
            ..self.config.train.clone()
        };
        let va = sequences_from_records(&self.records_file("val.jsonl")?);
        let before = evaluate_loss(&base, &va, &vocab)?;
        let (adapters, trace) = finetune_lora(&base, adapters, &sequences_from_records(&tr), &cfg, &vocab)?;
        let after = evaluate_loss(&adapters.apply(&base)?, &va, &vocab)?;
        let path = self.config.file("lora.json");
        write(&path, &serde_json::to_string(&adapters)?)?;
        let full: usize = adapters
            .adapters
            .keys()
            .map(|n| base.matrix(n).map_or(0, |m| m.len()))
            .sum();
        let value = json!({
            "rank": lc.rank,
            "adapters": adapters.adapters.len(),
            "trainable": adapters.trainable_params(),
            "full": full,
            "steps": trace.len(),
            "val_loss_before": before,
            "val_loss_after": after,
            "file": path,
        });
        let text = format!(
            "rank {} adapters on {} matrices: {} trainable vs {} full\nvalidation loss {:.4} -> {:.4} after {} steps\nwrote {}",
            lc.rank,
            adapters.adapters.len(),
            adapters.trainable_params(),
            full,
            before,
            after,
            trace.len(),
            path.display()
        );
        Output::new(&value, text)
    }

    pub fn index(&self) -> Result<Output> {
        let records = self.records()?;
        let mut store = JourneyStore::new();
        let mut index = VectorIndex::new();
        let report = load(&records, &mut store, &mut index)?;
        let knowledge = KnowledgeBase::bundled().index_into(&self.catalogs.taxonomy, &mut index)?;
        let path = self.config.index_path();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        index.save(&path)?;
        let value = json!({
            "parcels": report.parcels,
            "parcel_chunks": report.chunks,
            "knowledge_chunks": knowledge,
            "duplicate_warnings": report.duplicate_warnings,
            "total": index.len(),
            "file": path,
        });
        let text = format!(
            "indexed {} parcel chunks and {} knowledge chunks ({} total) into {}",
            report.chunks,
            knowledge,
            index.len(),
            path.display()
        );
        Output::new(&value, text)
    }

    fn load_index(&self) -> Result<VectorIndex> {
        let path = self.config.index_path();
        if !path.exists() {
            log::info!("{} missing; building the index first", path.display());
            self.index()?;
        }
        Ok(VectorIndex::load(&path)?)
    }

    fn parcel_agent<'a>(&'a self, model: Option<&'a (ModelParams, Vocabulary)>) -> ParcelAgent<'a> {
        let c = &self.catalogs;
        let agent = ParcelAgent::new(&c.taxonomy, &c.locations, &c.templates).with_generation(self.config.generation.clone());
        match model {
            Some((params, vocab)) => agent.with_predictor(Predictor { params, vocab }),
            None => agent,
        }
    }

    fn validator(&self) -> BarcodeValidator {
        BarcodeValidator::new(&self.config.barcode_pattern).expect("pattern checked at startup")
    }

    pub fn story(&self, barcode: &str) -> Result<Output> {
        let verdict = self.validator().validate(barcode);
        if !verdict.valid {
            log::warn!("{barcode} does not look like a barcode; looking it up anyway");
        }
        let store = JourneyStore::from_records(self.records()?);
        let model = self.model_if_present()?;
        let agent = self.parcel_agent(model.as_ref());
        let story = agent.reply(barcode.trim(), &store, self.language())?;
        let text = story.narrative.clone();
        Output::new(&story, text)
    }

    pub fn predict(&self, barcode: &str) -> Result<Output> {
        let records = self.records()?;
        let record = records
            .iter()
            .find(|r| r.barcode == barcode.trim())
            .ok_or_else(|| anyhow!("no parcel with barcode {barcode}"))?;
        let (params, vocab) = self.model()?;
        let tax = &self.catalogs.taxonomy;
        let observed = record.codes();
        let suffix = Predictor { params: &params, vocab: &vocab }.predict(&observed, tax)?;
        let describe = |c: &parceltrace::event_model::EventCode| {
            json!({"code": c, "description": tax.get(*c).map(|d| d.description.clone())})
        };
        let value = json!({
            "barcode": record.barcode,
            "delivered": record.delivered,
            "observed": observed.iter().map(describe).collect::<Vec<_>>(),
            "predicted": suffix.codes.iter().map(describe).collect::<Vec<_>>(),
            "is_prediction": suffix.is_prediction,
        });
        let mut text = format!(
            "{}: {} observed events, last {}\n",
            record.barcode,
            observed.len(),
            observed.last().map_or("-".into(), |c| c.to_string())
        );
        if suffix.codes.is_empty() {
            text.push_str("no further events predicted");
        } else {
            text.push_str("predicted (not yet observed):");
            for c in &suffix.codes {
                let d = tax.get(*c).map_or("", |d| d.description.as_str());
                text.push_str(&format!("\n  {c} {d}"));
            }
        }
        Output::new(&value, text)
    }

    fn with_assistant<T>(&self, f: impl FnOnce(&Assistant<'_>) -> Result<T>) -> Result<T> {
        let store = JourneyStore::from_records(self.records()?);
        let index = self.load_index()?;
        let model = self.model_if_present()?;
        let knowledge = KnowledgeBase::bundled();
        let mut assistant = Assistant::new(self.parcel_agent(model.as_ref()), &store, &index, &knowledge);
        assistant.validator = self.validator();
        f(&assistant)
    }

    pub fn ask(&self, question: &str) -> Result<Output> {
        self.with_assistant(|a| {
            let mut state = ConversationState::new(self.language());
            let reply = a.respond(question, &mut state);
            let text = format_reply(&reply);
            Output::new(&reply, text)
        })
    }

    pub fn detect_lang(&self, text: &str) -> Result<Output> {
        let (language, confidence) = detect_language(text);
        let value = json!({"language": language, "confidence": confidence});
        Output::new(&value, format!("{language} ({confidence:.3})"))
    }

    pub fn eval(&self) -> Result<Output> {
        let records = self.records()?;
        let tax = &self.catalogs.taxonomy;
        let sample = sample_unhappy(&records, tax, self.config.eval_sample, self.config.seed)?;
        let store = JourneyStore::from_records(records);
        let model = self.model_if_present()?;
        let agent = self.parcel_agent(model.as_ref());
        let report = run_eval(&agent, &store, &sample, self.language());
        let stable = report.clone().without_timing();
        write(&self.config.file("eval.json"), &serde_json::to_string_pretty(&stable)?)?;
        let passes = report.passes(self.config.eval_threshold);
        let mut text = report.to_markdown();
        text.push_str(&format!(
            "\n{} (threshold {:.2})",
            if passes { "PASS" } else { "FAIL" },
            self.config.eval_threshold
        ));
        let mut out = Output::new(&stable, text)?;
        if !passes {
            out.exit_code = 1;
        }
        Ok(out)
    }

    /// Line-oriented REPL; `/quit` or end of input stops it.
    pub fn chat(&self, json_mode: bool) -> Result<()> {
        self.with_assistant(|a| {
            let stdin = std::io::stdin();
            let interactive = stdin.is_terminal();
            let mut out = std::io::stdout().lock();
            let mut state = ConversationState::new(self.language());
            if interactive {
                writeln!(out, "SuperTracy chat. Type a barcode or a question; /quit to leave.")?;
            }
            let mut lines = stdin.lock().lines();
            loop {
                if interactive {
                    write!(out, "> ")?;
                    out.flush()?;
                }
                let Some(line) = lines.next() else { break };
                let line = line?;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                if matches!(trimmed, "/quit" | "/exit") {
                    break;
                }
                let reply = a.respond(trimmed, &mut state);
                if json_mode {
                    writeln!(out, "{}", serde_json::to_string(&reply)?)?;
                } else {
                    writeln!(out, "{}", format_reply(&reply))?;
                }
            }
            Ok(())
        })
    }
}

const LOSS_EARLY_STEP: usize = 10;
const QUANT_PROBES: usize = 200;

fn argmax<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn format_reply(reply: &Reply) -> String {
    let mut s = format!("[{}] {}", agent_name(reply.agent), reply.text);
    // templates that already list their sources do not need the footer
    if !reply.citations.is_empty() && !reply.citations.iter().all(|c| reply.text.contains(c.as_str())) {
        s.push_str(&format!("\n  sources: {}", reply.citations.join(", ")));
    }
    s
}
