//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N ... PASS|FAIL` line (written past the test harness capture)
//! before asserting.
//!
//! The pinned pipeline (default config, seed 42) runs once through the
//! binary in `target/tmp`; the oracles below are independent of the crate
//! internals they check.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use parceltrace::agents::{mentions_delay, ParcelAgent, Predictor};
use parceltrace::compress::{finetune_lora, quantize, trainable_param_count, LoraSet};
use parceltrace::data_pipeline::{from_jsonl, JourneyStore, CANNED_BARCODE};
use parceltrace::embed_store::{cosine_sim, embed_text, retrieve, EmbeddingVector, VectorIndex};
use parceltrace::eval_harness::{mentioned_codes, score_story, QualitativeFlag};
use parceltrace::event_model::{parse_event_code, EventCode, EventTaxonomy, LocationCatalog, ParcelRecord};
use parceltrace::nl_io::{bundled_testset, detect_language, detection_accuracy, LanguageCode, LanguageDetector};
use parceltrace::prompt_factory::TemplateCatalog;
use parceltrace::seq_model::checkpoint::{load_params, Checkpoint};
use parceltrace::seq_model::{
    all_prefix_distributions, next_distribution, sequence_loss_and_grad, sequences_from_records, ModelDims, ModelParams,
    TrainConfig, TrainingSequence, Vocabulary,
};

const BIN: &str = env!("CARGO_BIN_EXE_parceltrace");

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {name:<28} {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    // straight to the handle so the line survives output capture
    let _ = std::io::stdout().write_all(line.as_bytes());
}

struct Run {
    code: i32,
    stdout: String,
    elapsed: Duration,
}

fn run(cwd: &Path, args: &[&str]) -> Run {
    let start = Instant::now();
    let out = Command::new(BIN)
        .args(["--work-dir", "work", "--json"])
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    let elapsed = start.elapsed();
    if !out.status.success() {
        eprintln!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).expect("utf-8 output"),
        elapsed,
    }
}

fn json(r: &Run) -> Value {
    serde_json::from_str(&r.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", r.stdout))
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Stages of the deterministic pipeline, in order.
const STAGES: [&[&str]; 6] = [
    &["gen-data"],
    &["etl"],
    &["train"],
    &["index"],
    &["story", CANNED_BARCODE],
    &["eval"],
];

const ARTIFACTS: [&str; 10] = [
    "corpus.csv",
    "records.jsonl",
    "train.jsonl",
    "val.jsonl",
    "test.jsonl",
    "alpaca.jsonl",
    "model.json",
    "loss.csv",
    "index.jsonl",
    "eval.json",
];

struct Pinned {
    dir: PathBuf,
    runs: Vec<Run>,
    taxonomy: EventTaxonomy,
    locations: LocationCatalog,
    records: Vec<ParcelRecord>,
    params: ModelParams,
    vocab: Vocabulary,
}

impl Pinned {
    fn work(&self, name: &str) -> PathBuf {
        self.dir.join("work").join(name)
    }

    fn split(&self, name: &str) -> Vec<ParcelRecord> {
        from_jsonl(&std::fs::read_to_string(self.work(name)).unwrap()).unwrap()
    }
}

fn pinned() -> &'static Pinned {
    static P: OnceLock<Pinned> = OnceLock::new();
    P.get_or_init(|| {
        let dir = fresh_dir("pinned");
        let runs: Vec<Run> = STAGES.iter().map(|args| run(&dir, args)).collect();
        let (params, vocab) = load_params(&dir.join("work/model.json")).unwrap();
        let records = from_jsonl(&std::fs::read_to_string(dir.join("work/records.jsonl")).unwrap()).unwrap();
        Pinned {
            dir,
            runs,
            taxonomy: EventTaxonomy::bundled(),
            locations: LocationCatalog::bundled(),
            records,
            params,
            vocab,
        }
    })
}

#[test]
fn criterion_01_training_curve() {
    let p = pinned();
    let r = &p.runs[2];
    let v = json(r);
    let steps = v["steps"].as_u64().unwrap_or(0);
    let losses: Vec<f64> = std::fs::read_to_string(p.work("loss.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    // oracle: trailing 10-step mean recomputed from the logged losses
    let ma = |i: usize| {
        let lo = (i + 1).saturating_sub(10);
        losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
    };
    let (early, late) = (ma(9), ma(losses.len() - 1));
    let pass = r.code == 0 && steps == 120 && losses.len() == 120 && late < 0.5 * early && r.elapsed < Duration::from_secs(120);
    report(
        1,
        "training curve",
        pass,
        &format!("steps {steps}, MA {early:.3} -> {late:.3} (ratio {:.3}), {:.1}s", late / early, r.elapsed.as_secs_f64()),
    );
    assert!(pass);
}

fn argmax_code(row: ndarray::ArrayView1<f64>, vocab: &Vocabulary) -> Option<EventCode> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in row.iter().enumerate() {
        if Vocabulary::is_special(i) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.and_then(|(i, _)| vocab.code_at(i))
}

#[test]
fn criterion_02_prediction_quality() {
    let p = pinned();
    let train = p.split("train.jsonl");
    let test = p.split("test.jsonl");
    // brute-force bigram counts over the training split
    let mut bigram: BTreeMap<EventCode, BTreeMap<EventCode, usize>> = BTreeMap::new();
    let mut unigram: BTreeMap<EventCode, usize> = BTreeMap::new();
    for r in &train {
        let c = r.codes();
        for w in c.windows(2) {
            *bigram.entry(w[0]).or_default().entry(w[1]).or_default() += 1;
            *unigram.entry(w[1]).or_default() += 1;
        }
    }
    let most = |m: &BTreeMap<EventCode, usize>| m.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(c, _)| *c);
    let majority = most(&unigram).unwrap();
    let (mut model_hits, mut oracle_hits, mut majority_hits, mut total) = (0usize, 0usize, 0usize, 0usize);
    for r in &test {
        let c: Vec<EventCode> = r.codes().into_iter().filter(|c| p.vocab.index_of(*c).is_some()).collect();
        if c.len() < 2 {
            continue;
        }
        let dists = all_prefix_distributions(&c, &p.params, &p.vocab).unwrap();
        for i in 1..c.len().min(p.params.dims.max_positions) {
            let target = c[i];
            total += 1;
            model_hits += usize::from(argmax_code(dists.row(i - 1), &p.vocab) == Some(target));
            let guess = bigram.get(&c[i - 1]).and_then(most).unwrap_or(majority);
            oracle_hits += usize::from(guess == target);
            majority_hits += usize::from(majority == target);
        }
    }
    let acc = |h: usize| h as f64 / total as f64;
    let (m, o, b) = (acc(model_hits), acc(oracle_hits), acc(majority_hits));
    let pass = total > 0 && m >= o - 0.05 && m > b;
    report(
        2,
        "prediction quality",
        pass,
        &format!("top-1 {m:.3} vs bigram {o:.3} and majority {b:.3} over {total} targets"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradient_check() {
    let vocab = Vocabulary::from_codes(["A01", "B01", "I01"].map(|s| parse_event_code(s).unwrap()));
    let dims = ModelDims {
        vocab_size: vocab.size(),
        d_model: 4,
        heads: 2,
        d_ff: 8,
        max_positions: 8,
    };
    assert_eq!(dims.vocab_size, 6);
    let seq = TrainingSequence {
        codes: ["A01", "B01", "I01"].map(|s| parse_event_code(s).unwrap()).to_vec(),
        complete: true,
    };
    let (tokens, targets) = seq.encode(&vocab, dims.max_positions).unwrap();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for seed in 0..3 {
        let mut params = ModelParams::init_uniform(dims, 0.7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        for (_, t) in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let loss = |p: &ModelParams| {
            let mut scratch = ModelParams::zeros(p.dims);
            sequence_loss_and_grad(&tokens, &targets, p, 1.0, &mut scratch).loss_sum
        };
        let mut analytic = ModelParams::zeros(dims);
        sequence_loss_and_grad(&tokens, &targets, &params, 1.0, &mut analytic);
        let eps = 1e-6;
        for (ti, (name, a)) in analytic.tensors().into_iter().enumerate() {
            let mut diff = 0.0;
            let mut scale_a = 0.0;
            let mut scale_n = 0.0;
            for (j, &g) in a.iter().enumerate() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].1[j] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].1[j] -= eps;
                let n = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                diff += (g - n) * (g - n);
                scale_a += g * g;
                scale_n += n * n;
            }
            let scale = scale_a.sqrt().max(scale_n.sqrt());
            // rows for positions past the sequence get no gradient either way
            let rel = if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale };
            if rel > worst {
                worst = rel;
                worst_name = name;
            }
        }
    }
    let pass = worst < 1e-3;
    report(3, "gradient check", pass, &format!("worst relative error {worst:.2e} ({worst_name})"));
    assert!(pass);
}

#[test]
fn criterion_04_quantization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_slack = f64::INFINITY;
    let mut bound_ok = true;
    for _ in 0..100 {
        let (rows, cols) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let scale = 10f64.powf(rng.gen_range(-3.0..2.0));
        let offset = rng.gen_range(-1.0..1.0) * scale;
        let w = Array2::from_shape_simple_fn((rows, cols), || offset + scale * rng.gen_range(-1.0..1.0));
        let (lo, hi) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        for bits in [2u32, 4, 8] {
            let delta = (hi - lo) / ((1u64 << bits) - 1) as f64;
            let back = quantize(&w, bits).unwrap().dequantize();
            let err = w.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            bound_ok &= err <= delta / 2.0 + 1e-12;
            worst_slack = worst_slack.min(delta / 2.0 + 1e-12 - err);
        }
    }
    let p = pinned();
    let q = run(&p.dir, &["quantize", "16"]);
    let restored = Checkpoint::read(&p.work("model.q16.json")).unwrap().params().unwrap();
    // 200 prefixes drawn from the test split in file order
    let (mut agree, mut total) = (0, 0);
    'outer: for r in p.split("test.jsonl") {
        let c = r.codes();
        for n in 1..c.len() {
            if total == 200 {
                break 'outer;
            }
            let a = next_distribution(&c[..n], &p.params, &p.vocab).unwrap().argmax();
            let b = next_distribution(&c[..n], &restored, &p.vocab).unwrap().argmax();
            agree += usize::from(a == b);
            total += 1;
        }
    }
    let rate = agree as f64 / total as f64;
    let pass = bound_ok && q.code == 0 && total == 200 && rate >= 0.95;
    report(
        4,
        "quantization",
        pass,
        &format!("300 bound checks, min slack {worst_slack:.1e}; b=16 argmax agreement {agree}/{total}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_lora_contract() {
    let p = pinned();
    let base = p.params.clone();
    let bits_before: Vec<u64> = base.tensors().iter().flat_map(|(_, t)| t.iter().map(|x| x.to_bits())).collect();
    let adapters = LoraSet::init(&base, 8, 42).unwrap();
    // B = 0 at init: outputs must not move at all
    let merged = adapters.apply(&base).unwrap();
    let mut zero_b_identical = true;
    for r in p.records.iter().take(30) {
        let c = r.codes();
        let a = next_distribution(&c, &base, &p.vocab).unwrap();
        let b = next_distribution(&c, &merged, &p.vocab).unwrap();
        zero_b_identical &= a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let cfg = TrainConfig {
        total_steps: 5,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let (tuned, _) = finetune_lora(&base, adapters, &sequences_from_records(&p.split("train.jsonl")), &cfg, &p.vocab).unwrap();
    let bits_after: Vec<u64> = base.tensors().iter().flat_map(|(_, t)| t.iter().map(|x| x.to_bits())).collect();
    let moved = tuned.adapters.values().any(|a| a.b.iter().any(|&x| x != 0.0));
    let count = trainable_param_count(4096, 4096, 8);
    let pass = bits_before == bits_after && moved && count == 65_536 && 4096 * 4096 == 16_777_216 && zero_b_identical;
    report(
        5,
        "LoRA contract",
        pass,
        &format!(
            "base frozen {}, adapters trained {moved}, count {count} vs {}, B=0 identical {zero_b_identical}",
            bits_before == bits_after,
            4096 * 4096
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_retrieval() {
    let p = pinned();
    let index = VectorIndex::load(&p.work("index.jsonl")).unwrap();
    let mut ids: Vec<String> = index.chunks().map(|c| c.id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
    let mut hits = 0;
    for id in ids.iter().take(50) {
        let text = &index.get(id).unwrap().text;
        hits += usize::from(retrieve(&index, text, 1).unwrap()[0].chunk.id == *id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let u: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let uu: f64 = u.iter().map(|x| x * x).sum();
        let proj = u.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / uu;
        let orth: Vec<f64> = w.iter().zip(&u).map(|(b, a)| b - proj * a).collect();
        let k = rng.gen_range(0.01..100.0);
        let scaled: Vec<f64> = u.iter().map(|x| k * x).collect();
        let (u, w, orth, scaled) = (EmbeddingVector(u), EmbeddingVector(w), EmbeddingVector(orth), EmbeddingVector(scaled));
        let cs = |a: &EmbeddingVector, b: &EmbeddingVector| cosine_sim(a, b).unwrap();
        worst = worst
            .max((cs(&u, &u) - 1.0).abs())
            .max(cs(&u, &orth).abs())
            .max((cs(&u, &w) - cs(&w, &u)).abs())
            .max((cs(&scaled, &w) - cs(&u, &w)).abs());
    }
    let e = embed_text("Parcel sorted at the sorting center");
    worst = worst.max((cosine_sim(&e, &e).unwrap() - 1.0).abs());
    let pass = hits == 50 && worst <= 1e-9;
    report(6, "retrieval", pass, &format!("self-retrieval {hits}/50, worst identity error {worst:.1e}"));
    assert!(pass);
}

#[test]
fn criterion_07_evaluation() {
    let p = pinned();
    let r = &p.runs[5];
    let v = json(r);
    let frac = v["fraction_ge_3"].as_f64().unwrap_or(0.0);
    let median = v["median"].as_f64().unwrap_or(0.0);
    let cases = v["cases"].as_array().cloned().unwrap_or_default();
    let low_unflagged = cases
        .iter()
        .filter(|c| c["score"].as_u64().is_some_and(|s| s < 3))
        .filter(|c| c["flags"].as_array().is_none_or(|f| f.is_empty()))
        .count();
    let pass = r.code == 0 && cases.len() == 100 && frac >= 0.75 && median == 4.0 && low_unflagged == 0;
    report(
        7,
        "evaluation mirror",
        pass,
        &format!(
            "{} cases, histogram {}, fraction >= 3 {frac:.2}, median {median}, unflagged low scores {low_unflagged}",
            cases.len(),
            v["histogram"]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_story_integrity() {
    let p = pinned();
    let store = JourneyStore::from_records(p.records.clone());
    let agent = ParcelAgent::new(&p.taxonomy, &p.locations, TemplateCatalog::bundled()).with_predictor(Predictor {
        params: &p.params,
        vocab: &p.vocab,
    });
    let (mut fabricated, mut unflagged, mut defaults, mut eta_delays, mut stories) = (0, 0, 0, 0, 0);
    for lang in [LanguageCode::En, LanguageCode::Nl] {
        for r in &p.records {
            let story = agent.reply(&r.barcode, &store, lang).unwrap();
            stories += 1;
            let (_, flags) = score_story(&story, r, &p.taxonomy, &p.locations).unwrap();
            fabricated += usize::from(flags.contains(&QualitativeFlag::FabricatedEvent));
            unflagged += story.predicted_events.iter().filter(|e| !e.predicted).count();
            defaults += mentioned_codes(&story.narrative)
                .iter()
                .filter(|c| p.taxonomy.get(**c).is_some_and(|d| d.default_auto))
                .count();
            eta_delays += story
                .key_events
                .iter()
                .filter(|k| p.taxonomy.get(k.code).is_some_and(|d| d.is_eta_update()) && mentions_delay(&k.sentence))
                .count();
        }
    }
    let pass = fabricated == 0 && unflagged == 0 && defaults == 0 && eta_delays == 0;
    report(
        8,
        "story integrity",
        pass,
        &format!(
            "{stories} stories: fabricated {fabricated}, unflagged predictions {unflagged}, default events {defaults}, ETA delays {eta_delays}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_story_latency() {
    let p = pinned();
    let dir = fresh_dir("large");
    let config = serde_json::json!({
        "corpus": {"n_parcels": 10_000},
        "paths": {"checkpoint": p.work("model.json")},
    });
    std::fs::write(dir.join("config.json"), config.to_string()).unwrap();
    let with_config = |args: &[&str]| {
        let mut a = vec!["--config", "config.json"];
        a.extend_from_slice(args);
        run(&dir, &a)
    };
    assert_eq!(with_config(&["gen-data"]).code, 0);
    assert_eq!(with_config(&["etl"]).code, 0);
    let records: Vec<ParcelRecord> = from_jsonl(&std::fs::read_to_string(dir.join("work/records.jsonl")).unwrap()).unwrap();
    let open = records.iter().find(|r| !r.delivered).unwrap().barcode.clone();
    let mut worst = Duration::ZERO;
    let mut ok = records.len() == 10_000;
    for barcode in [CANNED_BARCODE, open.as_str()] {
        let r = with_config(&["story", barcode]);
        ok &= r.code == 0 && json(&r)["barcode"] == barcode;
        worst = worst.max(r.elapsed);
    }
    let pass = ok && worst < Duration::from_secs(2);
    report(
        9,
        "story latency",
        pass,
        &format!("{} parcels, slowest story {:.0} ms", records.len(), worst.as_secs_f64() * 1e3),
    );
    assert!(pass);
}

#[test]
fn criterion_10_language_detection() {
    let set = bundled_testset();
    let acc = detection_accuracy(LanguageDetector::bundled(), &set);
    let empty = detect_language("");
    let p = pinned();
    let cli = json(&run(&p.dir, &["detect-lang", ""]));
    let pass = set.len() == 200
        && acc >= 0.95
        && empty == (LanguageCode::Other, 0.0)
        && cli["language"] == "other"
        && cli["confidence"] == 0.0;
    report(
        10,
        "language detection",
        pass,
        &format!("accuracy {acc:.3} on {} sentences, empty input -> {:?}", set.len(), empty),
    );
    assert!(pass);
}

#[test]
fn criterion_11_determinism() {
    let p = pinned();
    let dir = fresh_dir("rerun");
    let mut mismatches = Vec::new();
    for (args, first) in STAGES.iter().zip(&p.runs) {
        let again = run(&dir, args);
        if again.code != 0 || again.stdout != first.stdout {
            mismatches.push(format!("stdout of {}", args[0]));
        }
    }
    for name in ARTIFACTS {
        let a = std::fs::read(p.work(name)).unwrap();
        let b = std::fs::read(dir.join("work").join(name)).unwrap();
        if a != b {
            mismatches.push(name.to_string());
        }
    }
    let pass = mismatches.is_empty();
    report(
        11,
        "determinism",
        pass,
        &format!("{} commands, {} artifacts compared; mismatches {:?}", STAGES.len(), ARTIFACTS.len(), mismatches),
    );
    assert!(pass);
}

/// Everything in the pinned run should have succeeded; keeps fixture
/// failures from hiding behind criterion-specific messages.
#[test]
fn pinned_pipeline_runs_cleanly() {
    let p = pinned();
    for (args, r) in STAGES.iter().zip(&p.runs) {
        assert_eq!(r.code, 0, "{args:?}");
    }
    let counts: HashMap<bool, usize> = p.records.iter().fold(HashMap::new(), |mut m, r| {
        *m.entry(r.delivered).or_default() += 1;
        m
    });
    assert_eq!(p.records.len(), 1200);
    assert_eq!(counts[&true], 1080);
}
