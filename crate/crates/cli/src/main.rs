use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use copydst::checkpoint::{self, sha256_hex, write_atomic};
use copydst::data::{
    corpus_to_json, generate_synthetic, load_corpus_with, make_unseen_split, split_report, DialogueCorpus,
    synthetic_word_vectors, GrammarConfig, Ontology, SystemAct,
};
use copydst::embeddings::{load_word_vectors, tokenize, EmbeddingTable};
use copydst::eval::{accumulate_goal, evaluate, EvalReport, UnseenValues};
use copydst::train::{train, TrainConfig};
use copydst::{Goal, Tracker};

const MODEL_ENV: &str = "COPYDST_MODEL";

/// Copy-mechanism dialogue state tracker.
#[derive(Parser)]
#[command(name = "copydst", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one checkpoint per seed.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Track a dialogue read line by line from stdin.
    Track(TrackArgs),
    /// Add a candidate value to a slot of a checkpoint.
    Extend(ExtendArgs),
    /// Hold out a fraction of one slot's values from a corpus.
    Split(SplitArgs),
    /// Write a synthetic corpus.
    Generate(GenerateArgs),
}

#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    ngram_dim: Option<usize>,
    #[arg(long)]
    hash_seed: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Seed of the first run; further runs use seed+1, seed+2, ...
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Give the gold value and the sampled negatives equal total weight.
    #[arg(long)]
    balanced_loss: Option<bool>,
}

impl ConfigFlags {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            hidden_size,
            word_dim,
            ngram_dim,
            hash_seed,
            dropout,
            learning_rate,
            batch_size,
            epochs,
            patience,
            seed,
            negatives,
            threshold,
            weight_decay,
            balanced_loss
        );
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus in the canonical JSON layout.
    #[arg(long, conflicts_with = "synthetic")]
    corpus: Option<PathBuf>,
    /// Ontology JSON (`{slot: [values]}`) replacing the corpus file's own.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Generate the training corpus: `default` or a grammar JSON file.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long, default_value_t = 600)]
    synthetic_dialogues: usize,
    #[arg(long, default_value_t = 1)]
    synthetic_seed: u64,
    /// Development corpus for early stopping and the summary.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Pretrained word vectors (`token f1 ... fd` per line).
    #[arg(long)]
    word_vectors: Option<PathBuf>,
    /// Number of runs with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, or a directory holding exactly one.
    #[arg(long, env = MODEL_ENV)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// JSON `{slot: [values]}` of values unseen in training.
    #[arg(long)]
    unseen_values: Option<PathBuf>,
    /// Emit the report as JSON, to PATH or to stdout.
    #[arg(long, num_args = 0..=1, default_missing_value = "-")]
    json: Option<String>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long, env = MODEL_ENV)]
    model: PathBuf,
    /// Print one JSON object per user line.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(long, env = MODEL_ENV)]
    model: PathBuf,
    #[arg(long)]
    slot: String,
    #[arg(long)]
    value: String,
    /// Where to write the extended checkpoint (defaults to in place).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    slot: String,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// `default` or a grammar JSON file.
    #[arg(long, default_value = "default")]
    grammar: String,
    #[arg(long, default_value_t = 600)]
    dialogues: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write clustered word vectors for the grammar's tokens.
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long, default_value_t = 32, requires = "vectors")]
    vector_dim: usize,
    /// Per-token noise around each slot's shared direction.
    #[arg(long, default_value_t = 0.1, requires = "vectors")]
    vector_spread: f64,
}

/// A failure attributable to the invocation rather than the run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Track(a) => cmd_track(a),
        Command::Extend(a) => cmd_extend(a),
        Command::Split(a) => cmd_split(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

impl Artifact {
    fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Git-style content address: SHA-256 over `blob <len>\0` and the bytes.
fn artifact_hash(bytes: &[u8]) -> String {
    let mut data = format!("blob {}\0", bytes.len()).into_bytes();
    data.extend_from_slice(bytes);
    sha256_hex(&data)
}

#[derive(Serialize)]
struct RunManifest<T: Serialize> {
    command: String,
    argv: Vec<String>,
    config: T,
    seeds: Vec<u64>,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
    /// Content address of each checkpoint written.
    checkpoints: BTreeMap<String, String>,
    started_unix: u64,
    elapsed_seconds: f64,
}

impl<T: Serialize> RunManifest<T> {
    fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_atomic(path, json.as_bytes()).with_context(|| format!("writing {}", path.display()))
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn grammar(spec: &str) -> Result<GrammarConfig> {
    if spec == "default" {
        Ok(GrammarConfig::restaurant())
    } else {
        read_json(Path::new(spec))
    }
}

fn load(path: &Path, ontology: Option<&Ontology>) -> Result<(Ontology, DialogueCorpus)> {
    let file = load_corpus_with(path, ontology).with_context(|| format!("loading {}", path.display()))?;
    if !file.report.goal_mismatches.is_empty() {
        log::warn!(
            "{}: {} turns whose goal is not the fold of the turn labels",
            path.display(),
            file.report.goal_mismatches.len()
        );
    }
    Ok((file.ontology, file.corpus))
}

fn resolve_model(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_owned());
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => bail!("no .ckpt file in {}", path.display()),
        n => bail!("{} holds {n} checkpoints; name one", path.display()),
    }
}

fn load_model(path: &Path) -> Result<(PathBuf, Tracker)> {
    let file = resolve_model(path)?;
    let tracker = checkpoint::load(&file).with_context(|| format!("loading model {}", file.display()))?;
    Ok((file, tracker))
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    checkpoint: String,
    best_epoch: usize,
    final_train_loss: f64,
    report: EvalReport,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let started_unix = now_unix();
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let mut config = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    a.flags.apply(&mut config);
    config.validate().map_err(|e| usage(e.to_string()))?;

    let mut inputs = Vec::new();
    let ontology_override = match &a.ontology {
        Some(p) => {
            inputs.push(Artifact::of(p)?);
            Some(read_json::<Ontology>(p)?)
        }
        None => None,
    };
    let (ontology, corpus) = match (&a.corpus, &a.synthetic) {
        (Some(path), None) => {
            inputs.push(Artifact::of(path)?);
            load(path, ontology_override.as_ref())?
        }
        (None, Some(spec)) => {
            if spec != "default" {
                inputs.push(Artifact::of(Path::new(spec))?);
            }
            let (corpus, ont) = generate_synthetic(&grammar(spec)?, a.synthetic_dialogues, a.synthetic_seed)?;
            (ontology_override.unwrap_or(ont), corpus)
        }
        _ => return Err(usage("give exactly one of --corpus or --synthetic")),
    };
    let dev = match &a.dev {
        Some(p) => {
            inputs.push(Artifact::of(p)?);
            Some(load(p, Some(&ontology))?.1)
        }
        None => None,
    };

    let embeddings = match &a.word_vectors {
        Some(p) => {
            inputs.push(Artifact::of(p)?);
            let wv = load_word_vectors(p, config.word_dim)?;
            log::info!("{} word vectors ({} malformed lines skipped)", wv.loaded, wv.malformed_skipped);
            let mut keep: std::collections::HashSet<String> = corpus
                .turns()
                .flat_map(|t| tokenize(&t.utterance))
                .collect();
            keep.extend(ontology.iter().flat_map(|(_, vs)| vs.iter().flat_map(|v| tokenize(v))));
            let keep_fn = |t: &str| keep.contains(t);
            EmbeddingTable::from_word_vectors(config.embedding_config(), &wv, Some(&keep_fn))?
        }
        None => EmbeddingTable::hashed(config.embedding_config()),
    };

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let eval_corpus = dev.as_ref().unwrap_or(&corpus);
    let mut seeds = Vec::new();
    let mut summaries = Vec::new();
    let mut outputs = Vec::new();
    let mut checkpoints = BTreeMap::new();
    for i in 0..a.seeds {
        let seed = config.seed + i;
        let run = TrainConfig { seed, ..config.clone() };
        eprintln!("training seed {seed} on {} turns", corpus.num_turns());
        let outcome = train(&corpus, dev.as_ref(), &ontology, embeddings.clone(), &run)?;
        let path = a.out.join(format!("model-seed{seed}.ckpt"));
        let bytes = checkpoint::to_bytes(&outcome.tracker);
        write_atomic(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        checkpoints.insert(path.display().to_string(), artifact_hash(&bytes));
        outputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        let report = evaluate(&outcome.tracker, eval_corpus, None)?;
        seeds.push(seed);
        summaries.push(SeedSummary {
            seed,
            checkpoint: path.display().to_string(),
            best_epoch: outcome.best_epoch,
            final_train_loss: outcome.history.last().map_or(0.0, |h| h.train_loss),
            report,
        });
    }

    let label = if dev.is_some() { "dev" } else { "training" };
    let n = summaries.len() as f64;
    let mean_joint = summaries.iter().map(|s| s.report.joint_goal).sum::<f64>() / n;
    println!("{:<8} {:>10} {:>12}", "seed", "best epoch", "joint goal");
    for s in &summaries {
        println!("{:<8} {:>10} {:>12.4}", s.seed, s.best_epoch, s.report.joint_goal);
    }
    println!("mean {label} joint goal over {} seeds: {mean_joint:.4}", summaries.len());
    let mut slot_means = Vec::new();
    for slot in ontology.slots() {
        let mean = summaries
            .iter()
            .filter_map(|s| s.report.slot(slot))
            .map(|r| r.overall.accuracy)
            .sum::<f64>()
            / n;
        println!("mean {label} {slot} accuracy: {mean:.4}");
        slot_means.push((slot.to_owned(), mean));
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        evaluated_on: &'a str,
        mean_joint_goal: f64,
        mean_slot_accuracy: BTreeMap<String, f64>,
        runs: &'a [SeedSummary],
    }
    let summary_path = a.out.join("summary.json");
    let summary = Summary {
        evaluated_on: label,
        mean_joint_goal: mean_joint,
        mean_slot_accuracy: slot_means.into_iter().collect(),
        runs: &summaries,
    };
    write_atomic(&summary_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    outputs.push(Artifact::of(&summary_path)?);

    RunManifest {
        command: "train".into(),
        argv: std::env::args().collect(),
        config,
        seeds,
        inputs,
        outputs,
        checkpoints,
        started_unix,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&a.out.join("manifest.json"))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (_, tracker) = load_model(&a.model)?;
    let (_, corpus) = load(&a.corpus, None)?;
    let unseen: Option<UnseenValues> = match &a.unseen_values {
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    let report = evaluate(&tracker, &corpus, unseen.as_ref())?;
    match a.json.as_deref() {
        Some("-") => println!("{}", report.to_json()),
        Some(path) => {
            write_atomic(Path::new(path), report.to_json().as_bytes()).with_context(|| format!("writing {path}"))?;
            print!("{report}");
        }
        None => print!("{report}"),
    }
    Ok(())
}

/// Parses `act(slot=value)`, `act(slot)` or `act`, separated by `;` or `,`
/// between acts; `-` or an empty line means no action.
fn parse_actions(line: &str) -> Result<Vec<SystemAct>, String> {
    let line = line.trim();
    if line.is_empty() || line == "-" {
        return Ok(Vec::new());
    }
    let mut acts = Vec::new();
    let mut rest = line;
    while !rest.is_empty() {
        rest = rest.trim_start_matches([' ', ';', ',']);
        if rest.is_empty() {
            break;
        }
        let name_end = rest.find(|c: char| c == '(' || c == ';' || c == ',' || c == ' ').unwrap_or(rest.len());
        let act = &rest[..name_end];
        if act.is_empty() || !act.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-') {
            return Err(format!("bad act name near {rest:?}"));
        }
        rest = &rest[name_end..];
        if let Some(inner) = rest.strip_prefix('(') {
            let close = inner.find(')').ok_or_else(|| format!("unclosed parenthesis in {line:?}"))?;
            let args = inner[..close].trim();
            let (slot, value) = match args.split_once('=') {
                Some((s, v)) => (Some(s.trim()), Some(v.trim())),
                None if args.is_empty() => (None, None),
                None => (Some(args), None),
            };
            if slot.is_some_and(str::is_empty) {
                return Err(format!("empty slot in {line:?}"));
            }
            acts.push(SystemAct::new(act, slot, value));
            rest = &inner[close + 1..];
        } else {
            acts.push(SystemAct::new(act, None, None));
        }
    }
    Ok(acts)
}

#[derive(Serialize)]
struct SlotTop {
    slot: String,
    value: String,
    probability: f64,
    predicted: bool,
}

#[derive(Serialize)]
struct TrackStep {
    turn: usize,
    top: Vec<SlotTop>,
    goal: Goal,
}

fn cmd_track(a: TrackArgs) -> Result<()> {
    let (_, tracker) = load_model(&a.model)?;
    let threshold = tracker.config().threshold;
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut goal = Goal::new();
    let mut pending_acts: Option<Vec<SystemAct>> = None;
    let mut turn = 0;
    for (lineno, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            goal.clear();
            pending_acts = None;
            turn = 0;
            continue;
        }
        let Some(acts) = pending_acts.take() else {
            pending_acts = Some(parse_actions(&line).unwrap_or_else(|e| {
                log::warn!("line {}: {e}; treating as no action", lineno + 1);
                eprintln!("warning: line {}: {e}; treating as no action", lineno + 1);
                Vec::new()
            }));
            continue;
        };
        turn += 1;
        let prepared = tracker.prepare(&acts, std::slice::from_ref(&line));
        let scores = tracker.score_turn(&prepared)?;
        let mut top = Vec::new();
        let mut predicted = Goal::new();
        for s in &scores {
            if let Some((i, p)) = s.top() {
                let hit = p >= threshold;
                if hit {
                    predicted.insert(s.slot.clone(), s.values[i].clone());
                }
                top.push(SlotTop {
                    slot: s.slot.clone(),
                    value: s.values[i].clone(),
                    probability: p,
                    predicted: hit,
                });
            }
        }
        goal = accumulate_goal(&goal, &predicted);
        let step = TrackStep {
            turn,
            top,
            goal: goal.clone(),
        };
        if a.json {
            writeln!(out, "{}", serde_json::to_string(&step)?)?;
        } else {
            writeln!(out, "turn {}", step.turn)?;
            let width = step.top.iter().map(|t| t.slot.len()).max().unwrap_or(0);
            for t in &step.top {
                let mark = if t.predicted { "*" } else { " " };
                writeln!(out, "  {:<width$}  {mark} {} ({:.3})", t.slot, t.value, t.probability)?;
            }
            let g: Vec<String> = step.goal.iter().map(|(s, v)| format!("{s}={v}")).collect();
            writeln!(out, "  goal: {}", if g.is_empty() { "-".into() } else { g.join(", ") })?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_extend(a: ExtendArgs) -> Result<()> {
    let (file, mut tracker) = load_model(&a.model)?;
    let before_payload = checkpoint::payload_hash(&tracker);
    let before = tracker
        .decoder(&a.slot)
        .ok_or_else(|| anyhow!("model has no slot {:?}", a.slot))?
        .candidates()
        .len();
    let index = tracker.extend_candidates(&a.slot, &a.value)?;
    let after = tracker.decoder(&a.slot).expect("slot checked").candidates().len();
    let after_payload = checkpoint::payload_hash(&tracker);
    if before_payload != after_payload {
        bail!("parameter payload changed while extending; refusing to write");
    }
    let dest = a.out.unwrap_or(file);
    checkpoint::save(&tracker, &dest).with_context(|| format!("writing {}", dest.display()))?;
    if a.json {
        #[derive(Serialize)]
        struct Out<'a> {
            slot: &'a str,
            value: &'a str,
            index: usize,
            before: usize,
            after: usize,
            payload_sha256: &'a str,
            checkpoint: String,
        }
        let o = Out {
            slot: &a.slot,
            value: &a.value,
            index,
            before,
            after,
            payload_sha256: &after_payload,
            checkpoint: dest.display().to_string(),
        };
        println!("{}", serde_json::to_string_pretty(&o)?);
    } else {
        println!("{}: {before} -> {after} candidates", a.slot);
        println!("parameter payload sha256 {after_payload} (unchanged)");
    }
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let started = Instant::now();
    let started_unix = now_unix();
    if !(a.fraction > 0.0 && a.fraction < 1.0) {
        return Err(usage(format!("--fraction must lie strictly between 0 and 1, got {}", a.fraction)));
    }
    let (ontology, corpus) = load(&a.corpus, None)?;
    if !ontology.has_slot(&a.slot) {
        return Err(usage(format!("corpus ontology has no slot {:?}", a.slot)));
    }
    let (train_split, heldout) = make_unseen_split(&corpus, &ontology, &a.slot, a.fraction, a.seed)?;
    let report = split_report(&train_split, &corpus, &ontology);

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let train_path = a.out.join("train.json");
    let heldout_path = a.out.join("heldout.json");
    let report_path = a.out.join("report.json");
    write_atomic(&train_path, corpus_to_json(&ontology, &train_split).as_bytes())?;
    let unseen: UnseenValues = [(a.slot.clone(), heldout.iter().cloned().collect())].into();
    write_atomic(&heldout_path, serde_json::to_string_pretty(&unseen)?.as_bytes())?;
    write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;

    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "held out {} of {} {} values; kept {} of {} dialogues",
            heldout.len(),
            ontology.values(&a.slot).map_or(0, <[String]>::len),
            a.slot,
            train_split.dialogues.len(),
            corpus.dialogues.len()
        );
        for v in &heldout {
            println!("  {v}");
        }
        println!("{report}");
    }

    #[derive(Serialize)]
    struct SplitConfig<'a> {
        slot: &'a str,
        fraction: f64,
        seed: u64,
    }
    RunManifest {
        command: "split".into(),
        argv: std::env::args().collect(),
        config: SplitConfig {
            slot: &a.slot,
            fraction: a.fraction,
            seed: a.seed,
        },
        seeds: vec![a.seed],
        inputs: vec![Artifact::of(&a.corpus)?],
        outputs: vec![
            Artifact::of(&train_path)?,
            Artifact::of(&heldout_path)?,
            Artifact::of(&report_path)?,
        ],
        checkpoints: BTreeMap::new(),
        started_unix,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&a.out.join("manifest.json"))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let g = grammar(&a.grammar)?;
    let (corpus, ontology) = generate_synthetic(&g, a.dialogues, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(&a.out, corpus_to_json(&ontology, &corpus).as_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} dialogues, {} turns -> {}", corpus.dialogues.len(), corpus.num_turns(), a.out.display());
    if let Some(path) = &a.vectors {
        if a.vector_dim == 0 || !(a.vector_spread >= 0.0 && a.vector_spread.is_finite()) {
            return Err(usage("--vector-dim must be positive and --vector-spread finite and non-negative"));
        }
        let wv = synthetic_word_vectors(&g, a.vector_dim, a.vector_spread, a.seed);
        let mut text = String::new();
        for (token, v) in &wv.vectors {
            text.push_str(token);
            for x in v {
                text.push(' ');
                text.push_str(&x.to_string());
            }
            text.push('\n');
        }
        write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        println!("{} word vectors of dimension {} -> {}", wv.vectors.len(), a.vector_dim, path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_lines() {
        assert!(parse_actions("-").unwrap().is_empty());
        let acts = parse_actions("confirm(food=thai); request(area), hello").unwrap();
        assert_eq!(acts.len(), 3);
        assert_eq!(acts[0].to_string(), "confirm(food=thai)");
        assert_eq!(acts[1].slot.as_deref(), Some("area"));
        assert_eq!(acts[2].act, "hello");
        assert!(parse_actions("confirm(food=thai").is_err());
        assert!(parse_actions("(food=thai)").is_err());
    }

    #[test]
    fn artifact_hash_is_git_style() {
        // git hash-object --object-format=sha256 on an empty file
        assert_eq!(
            artifact_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
