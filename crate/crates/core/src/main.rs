use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use bem_core::batchfile::{write_batches, BatchFileHeader, BatchFormat};
use bem_core::corpus::{load_corpus_with, Corpus, Segmenter, DEFAULT_ABBREVIATIONS};
use bem_core::datasets::{convert_bioasq, load_covidqa, read_squad, write_squad, ConvertOptions, QuestionForm};
use bem_core::lexicon::{build_lexicon, EntityLexicon, LexiconOptions};
use bem_core::masking::{BatchPlan, MaskedBatch, MaskingConfig, Strategy};
use bem_core::metrics::{
    aggregate_passages, bioasq_golds, covidqa_golds, evaluate, read_golds, read_predictions, write_golds,
    DatasetKind, Gold,
};
use bem_core::provenance::{file_sha256, RunConfig};
use bem_core::tokenizer::Vocab;
use bem_core::toy_mlm::{parse_sweep, rho_sweep, stm_baseline, sweep_csv, SweepEval, SweepInputs, ToyConfig, ToyModel};
use bem_core::{Error, Result};

/// Entity-aware masking pipeline: lexicon building, masked batch
/// production, QA dataset conversion, evaluation and a toy MLM.
#[derive(Parser)]
#[command(name = "bem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the entity lexicon from NER annotations.
    BuildLexicon(BuildLexiconArgs),
    /// Tokenize, window and mask a corpus into a batch file.
    Mask(MaskArgs),
    /// Convert BioASQ factoid questions into SQuAD-style pairs.
    ConvertBioasq(ConvertArgs),
    /// Aggregate predictions and compute ranking metrics.
    Eval(EvalArgs),
    /// Train the toy masked-token model.
    TrainToy(TrainArgs),
    /// Measure toy-model perplexity, or sweep rho.
    Perplexity(PerplexityArgs),
}

#[derive(Args)]
struct VocabArgs {
    /// WordPiece vocabulary, one token per line.
    #[arg(long)]
    vocab: PathBuf,
    /// Match the vocabulary case-sensitively.
    #[arg(long)]
    no_lowercase: bool,
}

impl VocabArgs {
    fn load(&self) -> Result<Vocab> {
        Ok(Vocab::load(&self.vocab)?.with_lowercase(!self.no_lowercase))
    }
}

#[derive(Args)]
struct CorpusArgs {
    /// Corpus JSONL: {"doc_id", "text", optional "sentences"}.
    #[arg(long)]
    corpus: PathBuf,
    /// Abbreviation list for sentence splitting, one per line.
    #[arg(long)]
    abbreviations: Option<PathBuf>,
}

fn segmenter(abbreviations: &Option<PathBuf>) -> Result<Segmenter> {
    match abbreviations {
        Some(p) => Segmenter::from_file(p),
        None => Ok(Segmenter::new(DEFAULT_ABBREVIATIONS.iter().copied())),
    }
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        load_corpus_with(&self.corpus, &segmenter(&self.abbreviations)?)
    }
}

#[derive(Args)]
struct BuildLexiconArgs {
    /// NER annotations JSONL: {"doc_id", "start", "end", "text", "label"}.
    #[arg(long)]
    annotations: PathBuf,
    #[command(flatten)]
    vocab: VocabArgs,
    /// Check every annotation against this corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Keep only these labels (comma separated).
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Stm,
    Bem,
}

#[derive(Args)]
struct MaskingArgs {
    #[arg(long, value_enum, default_value = "stm")]
    strategy: StrategyArg,
    /// Fraction of lexicon entities drawn per batch.
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    window_len: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// BEM: also apply standard masking outside entity mentions.
    #[arg(long)]
    background_stm: bool,
    /// Entity lexicon (required for BEM).
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl MaskingArgs {
    fn config(&self) -> Result<MaskingConfig> {
        let base = match self.strategy {
            StrategyArg::Stm => MaskingConfig::stm(self.seed),
            StrategyArg::Bem => MaskingConfig::bem(self.rho, self.seed),
        };
        let config = MaskingConfig {
            rho: self.rho,
            window_len: self.window_len,
            batch_size: self.batch_size,
            background_stm: self.background_stm,
            ..base
        };
        config.validate()?;
        Ok(config)
    }

    fn lexicon(&self, config: &MaskingConfig, vocab: &Vocab) -> Result<Option<EntityLexicon>> {
        if config.strategy == Strategy::Stm {
            return Ok(None);
        }
        let path = self
            .lexicon
            .as_ref()
            .ok_or_else(|| Error::Config("--strategy bem requires --lexicon".into()))?;
        let lexicon = EntityLexicon::load(path)?;
        if lexicon.vocab_fingerprint().is_some_and(|f| f != vocab.fingerprint()) {
            log::warn!("lexicon {} was built with a different vocabulary", path.display());
        }
        Ok(Some(lexicon))
    }
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    vocab: VocabArgs,
    #[command(flatten)]
    masking: MaskingArgs,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
    /// Worker threads (0 = all cores). Never changes the output.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Jsonl,
}

#[derive(Args)]
struct ConvertArgs {
    /// BioASQ JSON file.
    #[arg(long)]
    input: PathBuf,
    /// SQuAD-style JSON output.
    #[arg(long)]
    out: PathBuf,
    /// qid to group_id JSONL (default: <out>.groups.jsonl).
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Also write answer golds per question for `eval`.
    #[arg(long)]
    golds: Option<PathBuf>,
    /// Keep pairs whose passage contains no answer.
    #[arg(long)]
    keep_unanswerable: bool,
    #[arg(long, default_value_t = bem_core::datasets::DEFAULT_MAX_CONTEXT_CHARS)]
    max_context: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Bioasq,
    Covidqa,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions JSONL: {"qid" or "group_id", "candidates": [...]}.
    #[arg(long)]
    predictions: PathBuf,
    /// Golds JSONL ({"qid", "answers"} or {"qid", "gold_sentence_indices"}).
    #[arg(long, conflicts_with = "covidqa")]
    golds: Option<PathBuf>,
    /// Official CovidQA file, resolved against --corpus, instead of --golds.
    #[arg(long, requires = "corpus")]
    covidqa: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Use keyword queries rather than natural-language questions.
    #[arg(long)]
    keyword_questions: bool,
    /// qid to group_id JSONL written by convert-bioasq.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Defaults to the kind implied by the golds.
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    init_scale: f64,
    /// Initialization seed (defaults to the masking seed).
    #[arg(long)]
    model_seed: Option<u64>,
}

impl ModelArgs {
    fn config(&self, masking_seed: u64) -> Result<ToyConfig> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("--dim and --hidden must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("--lr and --init-scale must be finite and non-negative".into()));
        }
        Ok(ToyConfig {
            dim: self.dim,
            hidden: self.hidden,
            learning_rate: self.lr,
            epochs: self.epochs,
            init_scale: self.init_scale,
            seed: self.model_seed.unwrap_or(masking_seed),
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    vocab: VocabArgs,
    #[command(flatten)]
    masking: MaskingArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint output; the loss curve and provenance go to <out>.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepEvalArg {
    Matched,
    Stm,
}

#[derive(Args)]
struct PerplexityArgs {
    /// Evaluation corpus.
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    vocab: VocabArgs,
    #[command(flatten)]
    masking: MaskingArgs,
    /// Trained checkpoint (single evaluation).
    #[arg(long, required_unless_present = "rho_sweep", conflicts_with = "rho_sweep")]
    model: Option<PathBuf>,
    /// start:stop:step; trains one model per rho on --train-corpus.
    #[arg(long)]
    rho_sweep: Option<String>,
    /// Training corpus for the sweep (defaults to --corpus).
    #[arg(long)]
    train_corpus: Option<PathBuf>,
    /// How the sweep's evaluation set is masked.
    #[arg(long, value_enum, default_value = "matched")]
    sweep_eval: SweepEvalArg,
    /// Skip training the standard-masking reference model.
    #[arg(long)]
    no_baseline: bool,
    #[command(flatten)]
    toy: ModelArgs,
    /// JSON result, or the CSV for a sweep (its metadata goes to <out>.meta.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildLexicon(a) => cmd_build_lexicon(a),
        Command::Mask(a) => cmd_mask(a),
        Command::ConvertBioasq(a) => cmd_convert_bioasq(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Perplexity(a) => cmd_perplexity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 3 } else { 2 })
        }
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_build_lexicon(a: BuildLexiconArgs) -> Result<()> {
    let vocab = a.vocab.load()?;
    let corpus = a.corpus.as_ref().map(|p| load_corpus_with(p, &segmenter(&None)?)).transpose()?;
    let labels = (!a.labels.is_empty()).then(|| a.labels.iter().cloned().collect::<BTreeSet<_>>());
    let options = LexiconOptions {
        min_count: a.min_count,
        labels: labels.clone(),
    };
    let lexicon = build_lexicon(&a.annotations, &vocab, corpus.as_ref(), &options)?;
    let mut run = RunConfig::new(
        "build-lexicon",
        json!({"labels": labels, "min_count": a.min_count, "lowercase": vocab.lowercase()}),
    )
    .input("annotations", &a.annotations)?
    .input("vocab", &a.vocab.vocab)?;
    if let Some(c) = &a.corpus {
        run = run.input("corpus", c)?;
    }
    lexicon.save(&a.out, Some(run.to_value()))?;
    print_json(&json!({
        "entities": lexicon.len(),
        "labels": lexicon.label_histogram(),
    }));
    Ok(())
}

fn masked_batches(
    corpus: &Corpus,
    vocab: &Vocab,
    lexicon: Option<&EntityLexicon>,
    config: &MaskingConfig,
    workers: usize,
) -> Result<(Vec<MaskedBatch>, serde_json::Value)> {
    let plan = BatchPlan::prepare(corpus, lexicon, vocab, config)?;
    let batches = plan.all_with_workers(workers)?;
    let stats = plan.stats_for(&batches);
    if config.strategy == Strategy::Bem && stats.empty_batches > 0 {
        log::warn!(
            "{} of {} batches contain no mention of their sampled entities",
            stats.empty_batches,
            stats.batches
        );
    }
    Ok((batches, serde_json::to_value(stats).expect("stats serialize")))
}

fn masking_run(command: &str, masking: &MaskingArgs, config: &MaskingConfig, corpus: &CorpusArgs, vocab: &Vocab, vocab_path: &Path, extra: serde_json::Value) -> Result<RunConfig> {
    let mut run = RunConfig::new(
        command,
        json!({"masking": config, "lowercase": vocab.lowercase(), "extra": extra}),
    )
    .input("corpus", &corpus.corpus)?
    .input("vocab", vocab_path)?;
    if let Some(p) = &corpus.abbreviations {
        run = run.input("abbreviations", p)?;
    }
    if config.strategy == Strategy::Bem {
        if let Some(p) = &masking.lexicon {
            run = run.input("lexicon", p)?;
        }
    }
    Ok(run)
}

fn cmd_mask(a: MaskArgs) -> Result<()> {
    let config = a.masking.config()?;
    let vocab = a.vocab.load()?;
    let lexicon = a.masking.lexicon(&config, &vocab)?;
    let corpus = a.corpus.load()?;
    let (format, format_name) = match a.format {
        FormatArg::Binary => (BatchFormat::Binary, "binary"),
        FormatArg::Jsonl => (BatchFormat::Jsonl, "jsonl"),
    };
    let run = masking_run("mask", &a.masking, &config, &a.corpus, &vocab, &a.vocab.vocab, json!({"format": format_name}))?;
    let (batches, stats) = masked_batches(&corpus, &vocab, lexicon.as_ref(), &config, a.workers)?;
    let header = BatchFileHeader::new(&vocab, &config, Some(run.to_value()));
    write_batches(&a.out, format, &header, &batches)?;
    print_json(&stats);
    Ok(())
}

fn cmd_convert_bioasq(a: ConvertArgs) -> Result<()> {
    if a.max_context == 0 {
        return Err(Error::Config("--max-context must be positive".into()));
    }
    let options = ConvertOptions {
        keep_unanswerable: a.keep_unanswerable,
        max_context_chars: a.max_context,
    };
    let converted = convert_bioasq(&a.input, &options)?;
    let run = RunConfig::new(
        "convert-bioasq",
        json!({"keep_unanswerable": a.keep_unanswerable, "max_context": a.max_context}),
    )
    .input("bioasq", &a.input)?;
    let groups = a.groups.clone().unwrap_or_else(|| with_suffix(&a.out, ".groups.jsonl"));
    write_squad(&converted.examples, &a.out, &groups, Some(run.to_value()))?;
    // reload as a structural self-check
    if read_squad(&a.out, &groups)? != converted.examples {
        return Err(Error::Invariant("SQuAD output does not reload identically".into()));
    }
    if let Some(g) = &a.golds {
        write_golds(g, &bioasq_golds(&converted))?;
    }
    let group_count = converted.examples.iter().map(|e| &e.group_id).collect::<BTreeSet<_>>().len();
    print_json(&json!({"stats": converted.stats, "examples": converted.examples.len(), "groups": group_count}));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut inputs = std::collections::BTreeMap::new();
    inputs.insert("predictions".to_string(), file_sha256(&a.predictions)?);
    let golds = match (&a.golds, &a.covidqa, &a.corpus) {
        (Some(g), _, _) => {
            inputs.insert("golds".to_string(), file_sha256(g)?);
            read_golds(g)?
        }
        (None, Some(c), Some(corpus)) => {
            inputs.insert("covidqa".to_string(), file_sha256(c)?);
            inputs.insert("corpus".to_string(), file_sha256(corpus)?);
            let corpus = load_corpus_with(corpus, &segmenter(&None)?)?;
            let form = if a.keyword_questions { QuestionForm::Keyword } else { QuestionForm::Natural };
            let load = load_covidqa(c, &corpus, form)?;
            for r in &load.rejected {
                log::warn!("rejected {} ({}): {}", r.qid, r.doc_id, r.reason);
            }
            covidqa_golds(&load)
        }
        _ => return Err(Error::Config("give --golds or --covidqa with --corpus".into())),
    };
    let groups = match &a.groups {
        Some(p) => {
            inputs.insert("groups".to_string(), file_sha256(p)?);
            let raw = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut map = std::collections::BTreeMap::new();
            for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let v: serde_json::Value = serde_json::from_str(line)
                    .map_err(|e| Error::format(p, i + 1, e.to_string()))?;
                match (v["qid"].as_str(), v["group_id"].as_str()) {
                    (Some(q), Some(g)) => map.insert(q.to_string(), g.to_string()),
                    _ => return Err(Error::format(p, i + 1, "need qid and group_id")),
                };
            }
            Some(map)
        }
        None => None,
    };
    let dataset = match a.dataset {
        Some(DatasetArg::Bioasq) => DatasetKind::Bioasq,
        Some(DatasetArg::Covidqa) => DatasetKind::Covidqa,
        None if golds.values().all(|g| matches!(g, Gold::Answers { .. })) => DatasetKind::Bioasq,
        None => DatasetKind::Covidqa,
    };
    let pairs = read_predictions(&a.predictions, groups.as_ref())?;
    let rankings = aggregate_passages(&pairs);
    let mut report = evaluate(dataset, &rankings, &golds)?;
    report.inputs = inputs;
    let settings = json!({"dataset": dataset, "keyword_questions": a.keyword_questions});
    let mut run = RunConfig::new("eval", settings).input("predictions", &a.predictions)?;
    for (role, p) in [("golds", &a.golds), ("covidqa", &a.covidqa), ("corpus", &a.corpus), ("groups", &a.groups)] {
        if let Some(p) = p {
            run = run.input(role, p)?;
        }
    }
    report.provenance = Some(run.to_value());
    let value = serde_json::to_value(&report).expect("report serializes");
    print_json(&value);
    if let Some(out) = &a.out {
        write_json(out, &value)?;
    }
    Ok(())
}

fn cmd_train_toy(a: TrainArgs) -> Result<()> {
    let config = a.masking.config()?;
    let toy = a.model.config(config.seed)?;
    let vocab = a.vocab.load()?;
    let lexicon = a.masking.lexicon(&config, &vocab)?;
    let corpus = a.corpus.load()?;
    let run = masking_run("train-toy", &a.masking, &config, &a.corpus, &vocab, &a.vocab.vocab, json!({"model": toy}))?;
    let (batches, stats) = masked_batches(&corpus, &vocab, lexicon.as_ref(), &config, 0)?;
    let mut model = ToyModel::new(vocab.len(), toy);
    let report = model.train(&batches)?;
    model.save(&a.out)?;
    let meta = json!({
        "loss_curve": report.loss_curve,
        "positions_per_epoch": report.positions_per_epoch,
        "batches": stats,
        "loss": "cross-entropy, natural log",
        "provenance": run.to_value(),
    });
    write_json(&with_suffix(&a.out, ".json"), &meta)?;
    print_json(&json!({"loss_curve": report.loss_curve}));
    Ok(())
}

fn cmd_perplexity(a: PerplexityArgs) -> Result<()> {
    let vocab = a.vocab.load()?;
    let eval_corpus = a.corpus.load()?;
    if let Some(spec) = &a.rho_sweep {
        let rhos = parse_sweep(spec)?;
        let masking = MaskingArgs {
            strategy: StrategyArg::Bem,
            lexicon: a.masking.lexicon.clone(),
            ..a.masking
        };
        let config = masking.config()?;
        let lexicon = masking
            .lexicon(&config, &vocab)?
            .expect("bem strategy always loads a lexicon");
        let train_corpus = match &a.train_corpus {
            Some(p) => load_corpus_with(p, &segmenter(&a.corpus.abbreviations)?)?,
            None => eval_corpus.clone(),
        };
        let toy = a.toy.config(config.seed)?;
        let eval_mode = match a.sweep_eval {
            SweepEvalArg::Matched => SweepEval::Matched,
            SweepEvalArg::Stm => SweepEval::Stm,
        };
        let mut run = masking_run(
            "perplexity",
            &masking,
            &config,
            &a.corpus,
            &vocab,
            &a.vocab.vocab,
            json!({"rho_sweep": rhos, "model": toy, "sweep_eval": eval_mode}),
        )?;
        if let Some(p) = &a.train_corpus {
            run = run.input("train_corpus", p)?;
        }
        let inputs = SweepInputs {
            train: &train_corpus,
            eval: &eval_corpus,
            lexicon: &lexicon,
            vocab: &vocab,
            masking: config,
            model: toy,
            eval_mode,
        };
        let rows = rho_sweep(&inputs, &rhos)?;
        let baseline = if a.no_baseline { None } else { Some(stm_baseline(&inputs)?) };
        let csv = sweep_csv(&rows);
        print!("{csv}");
        if let Some(out) = &a.out {
            fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
            let meta = json!({
                "columns": {"rho": "entity proportion", "perplexity": "exp of mean natural-log cross-entropy", "masked_positions": "evaluated positions"},
                "stm_baseline": baseline,
                "provenance": run.to_value(),
            });
            write_json(&with_suffix(out, ".meta.json"), &meta)?;
        }
        return Ok(());
    }

    let model_path = a.model.as_ref().expect("clap enforces --model without --rho-sweep");
    let model = ToyModel::load(model_path)?;
    if model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} differs from {} in {}",
            model.vocab_size,
            vocab.len(),
            a.vocab.vocab.display()
        )));
    }
    let config = a.masking.config()?;
    let lexicon = a.masking.lexicon(&config, &vocab)?;
    let run = masking_run("perplexity", &a.masking, &config, &a.corpus, &vocab, &a.vocab.vocab, json!({}))?
        .input("model", model_path)?;
    let (batches, _) = masked_batches(&eval_corpus, &vocab, lexicon.as_ref(), &config, 0)?;
    let result = model.perplexity(&batches)?;
    let value = json!({"result": result, "log_base": "e", "provenance": run.to_value()});
    print_json(&value);
    if let Some(out) = &a.out {
        write_json(out, &value)?;
    }
    Ok(())
}
