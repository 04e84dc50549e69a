use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

use joint_bootstrap::bootstrap::{
    annotate_clean_fraction, metrics_jsonl, run_variant, Curriculum, DataScorer, RunOutcome, TrainConfig, Validation, Variant,
};
use joint_bootstrap::corpus::{Corpus, InstanceStatus};
use joint_bootstrap::datagen::{generate_corpus, inject_noise, realized_rates, relation_distribution, GrammarSpec, NoiseSpec};
use joint_bootstrap::eval::{evaluate, selection_audit, split_validation, AuditRow};
use joint_bootstrap::model::{Checkpoint, ProbabilitySource, WordVocab};
use joint_bootstrap::rng::derive_seed;
use joint_bootstrap::uncertainty::{read_external_probabilities, score_dataset, write_scores_csv, McConfig, UncertaintyKind};

const OUT_ENV: &str = "JBS_OUT_DIR";

/// Joint entity/relation extraction with uncertainty-driven bootstrap training.
///
/// Every option can also come from a TOML file given with `--config`; keys
/// are option names under a table named after the subcommand, e.g.
/// `[train]` with `tau-m = 0.5`. Command-line flags win over the file.
#[derive(Parser, Debug)]
#[command(name = "jbs", version)]
struct Cli {
    /// TOML file with default option values per subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, optionally with label noise.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train one variant and write metrics, checkpoints and audits.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Score every instance of a corpus with a trained model.
    #[command(args_override_self = true)]
    Score(ScoreArgs),
    /// Evaluate a checkpoint on a corpus.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Train the baseline and all four variants under shared seeds.
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Score(_) => "score",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Grammar JSON; the built-in grammar when omitted.
    #[arg(long)]
    grammar: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    size: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_rel: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_ent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output corpus; `$JBS_OUT_DIR/corpus.jsonl` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum VariantArg {
    Baseline,
    WsPv,
    EntropyPv,
    WsPvEnsembled,
    EntropyPvEnsembled,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::WsPv => Variant::WsPv,
            VariantArg::EntropyPv => Variant::EntropyPv,
            VariantArg::WsPvEnsembled => Variant::WsPvEnsembled,
            VariantArg::EntropyPvEnsembled => Variant::EntropyPvEnsembled,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SourceArg {
    Crf,
    Softmax,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CurriculumArg {
    Instances,
    Batches,
}

/// Options shared by `train` and `ablate`.
#[derive(Args, Debug)]
struct TrainOpts {
    #[arg(long)]
    corpus: PathBuf,
    /// Validation corpus; split off `--val-fraction` of the corpus when omitted.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Ensemble loss weight for ensembled variants.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    tau_d: f64,
    #[arg(long, default_value_t = 0.6)]
    tau_m: f64,
    /// Monte Carlo dropout passes.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.2)]
    warm_fraction: f64,
    /// Per-token probabilities (JSON lines) used for data uncertainty instead of a warm pass.
    #[arg(long)]
    data_probs: Option<PathBuf>,
    /// Grow the trusted set instead of reselecting it from the full data.
    #[arg(long)]
    accumulate: bool,
    /// Train only on entity-anchored queries.
    #[arg(long)]
    no_negatives: bool,
    #[arg(long, value_enum, default_value_t = SourceArg::Crf)]
    probability_source: SourceArg,
    #[arg(long, value_enum, default_value_t = CurriculumArg::Batches)]
    curriculum: CurriculumArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, value_enum, default_value_t = VariantArg::WsPvEnsembled)]
    variant: VariantArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Variant set; only `default` (baseline plus four variants) exists.
    #[arg(long, default_value = "default")]
    matrix: String,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Optional held-out corpus evaluated with every best checkpoint.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KindArg {
    Ws,
    Entropy,
    Combined,
    Pv,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV; `$JBS_OUT_DIR/scores.csv` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output JSON; `$JBS_OUT_DIR/eval.json` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_out(out: Option<PathBuf>, file: &str) -> Result<PathBuf> {
    if let Some(p) = out {
        return Ok(p);
    }
    match std::env::var_os(OUT_ENV) {
        Some(dir) => Ok(Path::new(&dir).join(file)),
        None => bail!("no --out given and {OUT_ENV} is not set"),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let grammar = match &args.grammar {
        Some(p) => GrammarSpec::load(p).with_context(|| format!("loading grammar {}", p.display()))?,
        None => GrammarSpec::standard(),
    };
    let out = default_out(args.out, "corpus.jsonl")?;
    let noise = NoiseSpec { relation_rate: args.noise_rel, entity_rate: args.noise_ent, seed: derive_seed(args.seed, &[0x4015E]) };
    let clean = generate_corpus(&grammar, args.size, args.seed)?;
    let corpus = inject_noise(&clean, &noise)?;
    create_parent(&out)?;
    corpus.save(&out).with_context(|| format!("writing {}", out.display()))?;
    let sidecar = out.with_extension("provenance.jsonl");
    let mut w = BufWriter::new(File::create(&sidecar).with_context(|| format!("creating {}", sidecar.display()))?);
    corpus.write_provenance_sidecar(&mut w)?;
    w.flush()?;
    let (rel, ent, any) = realized_rates(&corpus);
    let summary = json!({
        "corpus": out,
        "provenance": sidecar,
        "sentences": corpus.len(),
        "instances": corpus.instance_status().len(),
        "seed": args.seed,
        "noise": { "relation_rate": args.noise_rel, "entity_rate": args.noise_ent, "seed": noise.seed },
        "realized": { "relation": rel, "entity": ent, "any": any },
        "relation_distribution": relation_distribution(&corpus),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn train_config(opts: &TrainOpts, variant: Variant, seed: u64) -> Result<TrainConfig> {
    let alpha = match (variant.is_ensembled(), opts.alpha) {
        (true, Some(a)) if a <= 0.0 => bail!("ensembled variants need --alpha > 0"),
        (true, a) => a.unwrap_or(1.0),
        (false, Some(a)) if a != 0.0 => bail!("--alpha is only meaningful for ensembled variants"),
        (false, _) => 0.0,
    };
    let config = TrainConfig {
        alpha,
        learning_rate: opts.lr,
        batch_size: opts.batch_size,
        dropout: opts.dropout,
        tau_data: opts.tau_d,
        tau_model: opts.tau_m,
        mc_passes: opts.k,
        max_epochs: opts.epochs,
        patience: opts.patience,
        dim: opts.dim,
        probability_source: match opts.probability_source {
            SourceArg::Crf => ProbabilitySource::CrfMarginals,
            SourceArg::Softmax => ProbabilitySource::TokenSoftmax,
        },
        warm_fraction: opts.warm_fraction,
        accumulate: opts.accumulate,
        negative_queries: !opts.no_negatives,
        curriculum: match opts.curriculum {
            CurriculumArg::Instances => Curriculum::Instances,
            CurriculumArg::Batches => Curriculum::Batches,
        },
        ..TrainConfig::default()
    }
    .with_seed(seed);
    let config = variant.apply(&config);
    config.validate()?;
    Ok(config)
}

/// Training corpus (with provenance, for audits only), validation corpus
/// and the imported data-uncertainty probabilities.
struct Prepared {
    train: Corpus,
    val: Corpus,
    scorer: DataScorer,
}

fn prepare(opts: &TrainOpts) -> Result<Prepared> {
    let corpus = load_corpus(&opts.corpus)?;
    let (val, train) = match &opts.val {
        Some(p) => (load_corpus(p)?, corpus),
        None => {
            if !(opts.val_fraction > 0.0 && opts.val_fraction < 1.0) {
                bail!("--val-fraction must be in (0, 1)");
            }
            split_validation(&corpus, opts.val_fraction, 0)
        }
    };
    if val.tags != train.tags {
        bail!("validation corpus uses different entity/relation types");
    }
    if train.is_empty() || val.is_empty() {
        bail!("training and validation corpora must be non-empty");
    }
    let scorer = match &opts.data_probs {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            DataScorer::Imported(read_external_probabilities(BufReader::new(f))?)
        }
        None => DataScorer::WarmPass,
    };
    Ok(Prepared { train, val, scorer })
}

struct RunFiles {
    outcome: RunOutcome,
    audit: Option<Vec<AuditRow>>,
}

fn audit_csv(rows: &[AuditRow]) -> String {
    let mut s = String::from("iteration,selected,clean_fraction_selected,clean_fraction_all,enrichment\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.selected, r.clean_fraction_selected, r.clean_fraction_all, r.enrichment));
    }
    s
}

/// Trains one variant and writes everything into `dir`.
fn run_one(prep: &Prepared, words: &WordVocab, config: &TrainConfig, variant: Variant, seed: u64, dir: &Path) -> Result<RunFiles> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let data = prep.train.without_provenance().dataset(words)?;
    let validation = Validation { sentences: &prep.val.sentences, words, tags: &prep.train.tags };
    let mut outcome = run_variant(variant, &data, validation, config, &prep.scorer)?;
    let status = prep.train.instance_status();
    let audit = outcome.state.as_ref().and_then(|s| selection_audit(s, &status));
    if let Some(rows) = &audit {
        annotate_clean_fraction(&mut outcome.log, rows);
        fs::write(dir.join("selection_audit.csv"), audit_csv(rows))?;
    }
    fs::write(dir.join("metrics.jsonl"), metrics_jsonl(&outcome.log))?;
    let hash = config.hash();
    let ckpt = |model| Checkpoint { words: words.clone(), tags: prep.train.tags.clone(), model, config_hash: hash.clone() };
    ckpt(outcome.best.clone()).save(dir.join("best.ckpt.json"))?;
    if let Some(partner) = &outcome.best_partner {
        ckpt(partner.clone()).save(dir.join("best_f2.ckpt.json"))?;
    }
    if let Some(state) = &outcome.state {
        fs::write(dir.join("selection.json"), serde_json::to_string(state)? + "\n")?;
    }
    write_json(
        &dir.join("run.json"),
        &json!({
            "variant": variant.name(),
            "seed": seed,
            "config": config,
            "config_hash": hash,
            "best_epoch": outcome.best_epoch,
            "epochs_run": outcome.log.len(),
            "train_sentences": prep.train.len(),
            "train_instances": data.len(),
            "val_sentences": prep.val.len(),
            "provenance_known": audit.is_some(),
            "warnings": outcome.warnings,
        }),
    )?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    Ok(RunFiles { outcome, audit })
}

fn train(args: TrainArgs) -> Result<()> {
    let variant = Variant::from(args.variant);
    let config = train_config(&args.opts, variant, args.seed)?;
    let prep = prepare(&args.opts)?;
    let words = prep.train.word_vocab();
    let run = run_one(&prep, &words, &config, variant, args.seed, &args.out)?;
    let best = run.outcome.log.iter().find(|m| m.epoch == run.outcome.best_epoch).expect("best epoch logged");
    let summary = json!({
        "out": args.out,
        "variant": variant.name(),
        "seed": args.seed,
        "best_epoch": run.outcome.best_epoch,
        "val_f1": best.val_f1,
        "final_enrichment": run.audit.as_ref().and_then(|r| r.last()).map(|r| r.enrichment),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    if args.matrix != "default" {
        bail!("unknown matrix {:?}; only \"default\" exists", args.matrix);
    }
    if args.seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let prep = prepare(&args.opts)?;
    let words = prep.train.word_vocab();
    let test = args.test.as_deref().map(load_corpus).transpose()?;
    fs::create_dir_all(&args.out)?;
    let mut curves = String::from("variant,seed,epoch,selected,val_f1,mean_u_m,clean_fraction_of_c\n");
    let mut summary = String::from("variant,seed,best_epoch,best_val_f1,test_f1,final_enrichment\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for variant in Variant::ALL {
        for &seed in &args.seeds {
            let config = train_config(&args.opts, variant, seed)?;
            let dir = args.out.join(format!("{}-seed{seed}", variant.name()));
            eprintln!("running {} seed {seed}", variant.name());
            let run = run_one(&prep, &words, &config, variant, seed, &dir)?;
            for m in &run.outcome.log {
                curves.push_str(&format!(
                    "{},{seed},{},{},{},{},{}\n",
                    variant.name(),
                    m.epoch,
                    m.selected,
                    m.val_f1,
                    opt(m.mean_u_m),
                    opt(m.clean_fraction_of_c)
                ));
            }
            let best = run.outcome.log.iter().find(|m| m.epoch == run.outcome.best_epoch).expect("best epoch logged");
            let test_f1 = match &test {
                Some(t) => Some(evaluate(&run.outcome.best, &words, &prep.train.tags, &t.sentences)?.f1),
                None => None,
            };
            let enrichment = run.audit.as_ref().and_then(|r| r.last()).map(|r| r.enrichment);
            summary.push_str(&format!(
                "{},{seed},{},{},{},{}\n",
                variant.name(),
                run.outcome.best_epoch,
                best.val_f1,
                opt(test_f1),
                opt(enrichment)
            ));
        }
    }
    fs::write(args.out.join("epoch_f1.csv"), curves)?;
    fs::write(args.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn checked_corpus(path: &Path, ckpt: &Checkpoint) -> Result<Corpus> {
    let corpus = load_corpus(path)?;
    if corpus.tags != ckpt.tags {
        bail!("corpus entity/relation types differ from the checkpoint's");
    }
    Ok(corpus)
}

fn score(args: ScoreArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.model)?;
    let corpus = checked_corpus(&args.corpus, &ckpt)?;
    let out = default_out(args.out, "scores.csv")?;
    let data = corpus.without_provenance().dataset(&ckpt.words)?;
    let (kind, mc) = match args.kind {
        KindArg::Ws => (UncertaintyKind::WinningScore, None),
        KindArg::Entropy => (UncertaintyKind::Entropy, None),
        KindArg::Combined => (UncertaintyKind::Combined, None),
        KindArg::Pv => (UncertaintyKind::ProbabilityVariance, Some(McConfig { passes: args.k, seed: args.seed, rate: args.dropout })),
    };
    let scores = score_dataset(&ckpt.model, &data, kind, mc.as_ref())?;
    let status = corpus.instance_status();
    let status = status.iter().any(|s| *s != InstanceStatus::Unknown).then_some(status.as_slice());
    create_parent(&out)?;
    let w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    write_scores_csv(w, &scores, status)?;
    let mean = scores.iter().map(|s| s.normalized).sum::<f64>() / scores.len().max(1) as f64;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "out": out,
            "kind": kind.label(),
            "instances": scores.len(),
            "mean_normalized": mean,
            "seed": args.seed,
            "k": args.k,
        }))?
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.model)?;
    let corpus = checked_corpus(&args.corpus, &ckpt)?;
    let out = default_out(args.out, "eval.json")?;
    let report = evaluate(&ckpt.model, &ckpt.words, &ckpt.tags, &corpus.sentences)?;
    create_parent(&out)?;
    write_json(&out, &serde_json::to_value(&report)?)?;
    print!("{}", report.table());
    Ok(())
}

fn toml_to_args(value: &toml::Value, key: &str, out: &mut Vec<OsString>) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &toml::Value| -> Result<String> {
        Ok(match v {
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            other => bail!("config key {key}: unsupported value {other}"),
        })
    };
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>>>()?;
            out.push(flag.into());
            out.push(parts.join(",").into());
        }
        v => {
            out.push(flag.into());
            out.push(scalar(v)?.into());
        }
    }
    Ok(())
}

/// Re-parses `argv` with the config file's values inserted right after the
/// subcommand name, so explicit flags later on the line take precedence.
fn with_config(argv: Vec<OsString>, cli: Cli) -> Result<Cli> {
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    let name = cli.command.name();
    let mut extra = Vec::new();
    if let Some(section) = table.get(name) {
        let section = section.as_table().ok_or_else(|| anyhow!("config entry [{name}] must be a table"))?;
        for (k, v) in section {
            toml_to_args(v, k, &mut extra)?;
        }
    }
    let pos = argv.iter().position(|a| a == name).ok_or_else(|| anyhow!("subcommand not found in arguments"))?;
    let mut merged: Vec<OsString> = argv[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[pos + 1..]);
    let matches = Cli::command().try_get_matches_from(merged)?;
    Ok(Cli::from_arg_matches(&matches)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn report(kind: &str, err: &anyhow::Error) {
    let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
    let body = json!({ "error": { "kind": kind, "message": err.to_string(), "causes": causes } });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            report("usage", &anyhow!(e.render().to_string().trim().to_string()));
            return ExitCode::from(2);
        }
    };
    let cli = match with_config(argv, cli) {
        Ok(cli) => cli,
        Err(e) => {
            report("config", &e);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report("runtime", &e);
            ExitCode::FAILURE
        }
    }
}
