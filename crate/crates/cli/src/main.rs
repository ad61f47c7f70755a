//! `parceltrace`: batch pipeline commands and the chat REPL.
//!
//! Exit codes: 0 success, 1 pipeline failure (or eval below threshold),
//! 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{App, Output};
use config::AppConfig;
use parceltrace::nl_io::LanguageCode;

#[derive(Parser, Debug)]
#[command(name = "parceltrace", version, about = "Local track-and-trace assistant")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for every random stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Output language (en or nl).
    #[arg(long, global = true)]
    lang: Option<LanguageCode>,
    /// Where artifacts are read and written.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic raw corpus (corpus.csv).
    GenData,
    /// Clean the raw corpus into records, splits and instruction data.
    Etl,
    /// Train the next-event model.
    Train,
    /// Quantize the trained model to the given bit width.
    Quantize {
        #[arg(value_parser = clap::value_parser!(u32).range(1..=parceltrace::compress::MAX_BITS as i64))]
        bits: u32,
    },
    /// Fine-tune low-rank adapters on top of the frozen model.
    LoraFinetune,
    /// Build the retrieval index over parcels and knowledge documents.
    Index,
    /// Tell the journey of one parcel.
    Story { barcode: String },
    /// Predict the remaining events of one parcel.
    Predict { barcode: String },
    /// Ask the assistant a single question.
    Ask { question: String },
    /// Detect whether text is English or Dutch.
    DetectLang { text: String },
    /// Score stories for a sample of unhappy-flow parcels.
    Eval,
    /// Interactive chat on stdin.
    Chat,
}

fn load_config(cli: &Cli) -> anyhow::Result<AppConfig> {
    let mut config = match &cli.config {
        Some(path) => AppConfig::read(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(lang) = cli.lang {
        config.language = lang;
    }
    if let Some(dir) = &cli.work_dir {
        config.paths.work_dir = dir.clone();
    }
    config.finalize()
}

fn run(cli: &Cli, app: &App) -> anyhow::Result<Option<Output>> {
    Ok(Some(match &cli.command {
        Command::GenData => app.gen_data()?,
        Command::Etl => app.etl()?,
        Command::Train => app.train()?,
        Command::Quantize { bits } => app.quantize(*bits)?,
        Command::LoraFinetune => app.lora_finetune()?,
        Command::Index => app.index()?,
        Command::Story { barcode } => app.story(barcode)?,
        Command::Predict { barcode } => app.predict(barcode)?,
        Command::Ask { question } => app.ask(question)?,
        Command::DetectLang { text } => app.detect_lang(text)?,
        Command::Eval => app.eval()?,
        Command::Chat => {
            app.chat(cli.json)?;
            return Ok(None);
        }
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let app = match load_config(&cli).and_then(App::new) {
        Ok(app) => app,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &app) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(out)) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("values serialize"));
            } else {
                println!("{}", out.text);
            }
            ExitCode::from(out.exit_code)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
