//! `seqcoder`: synthetic corpora, tokenizer training, LM pretraining,
//! classifier training, evaluation, keyword extraction and a bag-of-words
//! baseline.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use seqcoder::data::{self, BowConfig, Dataset, SynthConfig};
use seqcoder::interpret::{keyword_table, AttributionInput, KeywordDictionary, SALIENCE_THRESHOLD};
use seqcoder::tokenizer::{BpeModel, Preprocessor, Tokenizer, DESK_VOCAB_SIZE};
use seqcoder::training::{
    corpus_perplexity, evaluate, pretrain_lm, prepare_model, train_classifier, Checkpoint, Example, Regime, TrainConfig,
    TrainLog, Trainer,
};
use seqcoder::{EncoderKind, Error, Model, ModelConfig};

const SEED_ENV: &str = "SEQCODER_SEED";

#[derive(Parser)]
#[command(name = "seqcoder", version, about = "Multi-label note coding with pretrained sequence encoders")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (canonical JSON); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for generation, initialization and shuffling; falls back to
    /// $SEQCODER_SEED, then the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-hospital synthetic benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn BPE merges from one or more JSONL corpora.
    TokenizerTrain {
        /// JSONL corpus; repeatable.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Train the encoder and LM head on unlabeled notes.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Notes scored for held-out perplexity after each epoch.
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<EncoderKind>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the multi-label classifier.
    Train {
        #[arg(long)]
        regime: Regime,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation notes for model selection.
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Pretrained checkpoint; required by the pretrain regimes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<EncoderKind>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rows in the printed per-label table.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Keyword table from gradient-times-input attributions.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Term list, one per line.
        #[arg(long)]
        dictionary: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        salience: Option<f64>,
    },
    /// Dictionary bag-of-words logistic baseline.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        dictionary: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Optional overrides on the desk preset for the chosen encoder.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSpec {
    encoder: Option<EncoderKind>,
    d_model: Option<usize>,
    n_heads: Option<usize>,
    d_ff: Option<usize>,
    n_layers: Option<usize>,
    n_pool: Option<usize>,
    tie_embeddings: Option<bool>,
    literal_blocks: Option<bool>,
    max_tokens: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    synth: SynthConfig,
    model: ModelSpec,
    /// Classifier training; desk defaults for the encoder when absent.
    train: Option<TrainConfig>,
    /// LM pretraining; desk defaults for the encoder when absent.
    pretrain: Option<TrainConfig>,
    vocab_size: usize,
    split: (f64, f64, f64),
    split_seed: u64,
    top_k: usize,
    salience: f64,
    baseline: BowConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            model: ModelSpec::default(),
            train: None,
            pretrain: None,
            vocab_size: DESK_VOCAB_SIZE,
            split: (0.9, 0.05, 0.05),
            split_seed: 1,
            top_k: 10,
            salience: SALIENCE_THRESHOLD,
            baseline: BowConfig::default(),
        }
    }
}

impl RunConfig {
    fn encoder(&self, flag: Option<EncoderKind>) -> EncoderKind {
        flag.or(self.model.encoder).unwrap_or(EncoderKind::Transformer)
    }

    fn model_config(&self, kind: EncoderKind, vocab: usize, n_labels: usize, seed: Option<u64>) -> ModelConfig {
        let mut c = match kind {
            EncoderKind::Transformer => ModelConfig::desk_transformer(vocab, n_labels),
            EncoderKind::Lstm => ModelConfig::desk_lstm(vocab, n_labels),
        };
        let m = &self.model;
        c.d_model = m.d_model.unwrap_or(c.d_model);
        c.n_heads = m.n_heads.unwrap_or(c.n_heads);
        c.d_ff = m.d_ff.unwrap_or(c.d_ff);
        c.n_layers = m.n_layers.unwrap_or(c.n_layers);
        c.n_pool = m.n_pool.unwrap_or(c.n_pool);
        c.tie_embeddings = m.tie_embeddings.unwrap_or(c.tie_embeddings);
        c.literal_blocks = m.literal_blocks.unwrap_or(c.literal_blocks);
        c.preprocessor.max_tokens = m.max_tokens.unwrap_or(c.preprocessor.max_tokens);
        if let Some(s) = seed {
            c.init_seed = s;
        }
        c
    }

    fn train_config(&self, section: &Option<TrainConfig>, kind: EncoderKind, seed: Option<u64>) -> TrainConfig {
        let mut t = section.clone().unwrap_or_else(|| TrainConfig::desk(kind));
        if let Some(s) = seed {
            t.seed = s;
        }
        t
    }

    fn preprocessor(&self) -> Preprocessor {
        let mut p = Preprocessor::default();
        p.max_tokens = self.model.max_tokens.unwrap_or(p.max_tokens);
        p
    }
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Compatibility(_)
            | Error::Load { .. }
            | Error::Version { .. } => 2,
            Error::NonFinite(_) | Error::Dimension { .. } | Error::Index { .. } | Error::Contract(_) | Error::DegenerateMask { .. } => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CmdResult = std::result::Result<(), Failure>;

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn prepare_out(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_string(path: &Path, s: &str) -> CmdResult {
    std::fs::write(path, s)?;
    Ok(())
}

fn seed_override(flag: Option<u64>) -> std::result::Result<Option<u64>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    require_file(path)?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_tokenizer(path: &Path, pre: Preprocessor) -> std::result::Result<Tokenizer, Failure> {
    require_file(path)?;
    Ok(Tokenizer::new(pre, BpeModel::load(path)?))
}

fn load_data(path: &Path) -> std::result::Result<Dataset, Failure> {
    require_file(path)?;
    Ok(data::load_jsonl(path)?)
}

fn log_file(path: &Path) -> std::result::Result<TrainLog, Failure> {
    Ok(TrainLog::to_writer(Box::new(BufWriter::new(File::create(path)?))))
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let cfg = load_config(cli.global.config.as_deref())?;
    let seed = seed_override(cli.global.seed)?;
    match cli.command {
        Command::Synth { out } => synth(&cfg, seed, &out),
        Command::TokenizerTrain { data, out, vocab_size } => tokenizer_train(&cfg, &data, &out, vocab_size),
        Command::Pretrain { data, tokenizer, out, held_out, encoder, epochs } => {
            pretrain(&cfg, seed, &data, &tokenizer, &out, held_out.as_deref(), encoder, epochs)
        }
        Command::Train { regime, data, tokenizer, out, valid, checkpoint, encoder, lambda, epochs } => train(
            &cfg,
            seed,
            TrainArgs { regime, data, tokenizer, out, valid, checkpoint, encoder, lambda, epochs },
        ),
        Command::Eval { checkpoint, tokenizer, data, out, top } => eval(&checkpoint, &tokenizer, &data, &out, top),
        Command::Explain { checkpoint, tokenizer, data, dictionary, out, top_k, salience } => explain(
            &checkpoint,
            &tokenizer,
            &data,
            &dictionary,
            &out,
            top_k.unwrap_or(cfg.top_k),
            salience.unwrap_or(cfg.salience),
        ),
        Command::Baseline { data, test, dictionary, out } => baseline(&cfg, &data, &test, &dictionary, &out),
    }
}

fn synth(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> CmdResult {
    let mut sc = cfg.synth.clone();
    if let Some(s) = seed {
        sc.seed = s;
    }
    let corpora = data::synth_generate(&sc)?;
    let (train, valid, test) = data::split(&corpora.a, cfg.split, cfg.split_seed)?;
    prepare_out(out)?;
    let files = [
        ("hospital_a.jsonl", &corpora.a),
        ("hospital_a_train.jsonl", &train),
        ("hospital_a_valid.jsonl", &valid),
        ("hospital_a_test.jsonl", &test),
        ("hospital_b.jsonl", &corpora.b),
        ("hospital_b_unlabeled.jsonl", &corpora.b_unlabeled),
    ];
    for (name, ds) in files {
        data::write_jsonl(&out.join(name), &ds.records)?;
    }
    write_string(&out.join("dictionary.txt"), &data::synth_dictionary(&sc)?.to_file_string())?;
    let json = serde_json::to_string_pretty(&sc).map_err(Error::from)?;
    write_string(&out.join("synth_config.json"), &json)?;
    println!(
        "wrote {} hospital-A ({} train / {} valid / {} test), {} hospital-B, {} unlabeled notes to {}",
        corpora.a.len(),
        train.len(),
        valid.len(),
        test.len(),
        corpora.b.len(),
        corpora.b_unlabeled.len(),
        out.display()
    );
    Ok(())
}

fn tokenizer_train(cfg: &RunConfig, files: &[PathBuf], out: &Path, vocab: Option<usize>) -> CmdResult {
    let pre = cfg.preprocessor();
    let mut corpus = Vec::new();
    for f in files {
        corpus.extend(load_data(f)?.records.iter().map(|r| pre.preprocess(&r.text)));
    }
    let bpe = BpeModel::train(&corpus, vocab.unwrap_or(cfg.vocab_size))?;
    prepare_out(out)?;
    let path = out.join("tokenizer.bpe");
    bpe.save(&path)?;
    println!("vocabulary {} symbols, hash {}, written to {}", bpe.vocab_size(), bpe.hash(), path.display());
    Ok(())
}

fn encode_unlabeled(ds: &Dataset, tok: &Tokenizer) -> Vec<Example> {
    ds.records.iter().map(|r| Example::unlabeled(tok.encode(&r.text).ids)).collect()
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    cfg: &RunConfig,
    seed: Option<u64>,
    data_path: &Path,
    tok_path: &Path,
    out: &Path,
    held_out: Option<&Path>,
    encoder: Option<EncoderKind>,
    epochs: Option<usize>,
) -> CmdResult {
    let kind = cfg.encoder(encoder);
    let tok = load_tokenizer(tok_path, cfg.preprocessor())?;
    let corpus = encode_unlabeled(&load_data(data_path)?, &tok);
    let held: Vec<Vec<usize>> = match held_out {
        Some(p) => encode_unlabeled(&load_data(p)?, &tok).into_iter().map(|e| e.ids).collect(),
        None => Vec::new(),
    };
    let mut tc = cfg.train_config(&cfg.pretrain, kind, seed);
    tc.epochs = epochs.unwrap_or(tc.epochs);
    let mc = cfg.model_config(kind, tok.bpe.vocab_size(), 1, seed);
    let mut trainer = Trainer::new(Model::new(mc)?, tc, tok.bpe.hash(), Vec::new())?;
    prepare_out(out)?;
    let mut log = log_file(&out.join("pretrain_log.jsonl"))?;
    let ppl = pretrain_lm(&mut trainer, &corpus, &held, &mut log)?;
    drop(log);
    let path = out.join("pretrained.ckpt");
    trainer.checkpoint().save(&path)?;
    for (e, p) in ppl.iter().enumerate().filter(|(_, p)| p.is_finite()) {
        println!("epoch {} held-out perplexity {p:.3}", e + 1);
    }
    println!("{} steps, checkpoint {}", trainer.step, path.display());
    Ok(())
}

struct TrainArgs {
    regime: Regime,
    data: PathBuf,
    tokenizer: PathBuf,
    out: PathBuf,
    valid: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    encoder: Option<EncoderKind>,
    lambda: Option<f64>,
    epochs: Option<usize>,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    regime: Regime,
    best_epoch: usize,
    valid_micro_f1: f64,
    valid_em: f64,
    steps: u64,
    labels: &'a [String],
}

fn train(cfg: &RunConfig, seed: Option<u64>, a: TrainArgs) -> CmdResult {
    let pretrained = match (&a.checkpoint, a.regime.uses_pretrain()) {
        (Some(p), true) => {
            require_file(p)?;
            Some(Checkpoint::load(p)?)
        }
        (None, true) => return Err(usage(format!("--regime {} needs --checkpoint", a.regime))),
        (Some(_), false) => return Err(usage(format!("--regime {} does not take --checkpoint", a.regime))),
        (None, false) => None,
    };
    let kind = match &pretrained {
        Some(ck) => ck.config.encoder,
        None => cfg.encoder(a.encoder),
    };
    let tok = load_tokenizer(&a.tokenizer, cfg.preprocessor())?;
    if let Some(ck) = &pretrained {
        ck.check_tokenizer(&tok.bpe.hash())?;
    }
    let train_ds = load_data(&a.data)?;
    let valid_ds = a.valid.as_deref().map(load_data).transpose()?;
    let mut labels: Vec<String> = train_ds.labels.clone();
    if let Some(v) = &valid_ds {
        labels.extend(v.labels.iter().cloned());
    }
    labels.sort();
    labels.dedup();
    if labels.is_empty() {
        return Err(Error::Data("training notes carry no labels".into()).into());
    }
    let train_ex = train_ds.encode(&tok, &labels)?;
    let valid_ex = match &valid_ds {
        Some(v) => v.encode(&tok, &labels)?,
        None => Vec::new(),
    };

    let mut tc = cfg.train_config(&cfg.train, kind, seed);
    tc.regime = a.regime;
    tc.lambda = a.lambda.unwrap_or(tc.lambda);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    let mut mc = match &pretrained {
        Some(ck) => ModelConfig { n_labels: labels.len(), ..ck.config.clone() },
        None => cfg.model_config(kind, tok.bpe.vocab_size(), labels.len(), seed),
    };
    if let Some(s) = seed {
        mc.init_seed = s;
    }
    let pre_model = pretrained.as_ref().map(Checkpoint::model).transpose()?;
    let model = prepare_model(mc, a.regime, pre_model.as_ref())?;
    let mut trainer = Trainer::new(model, tc, tok.bpe.hash(), labels.clone())?;
    prepare_out(&a.out)?;
    let mut log = log_file(&a.out.join("train_log.jsonl"))?;
    let run = train_classifier(&mut trainer, &train_ex, &valid_ex, &mut log)?;
    drop(log);
    trainer.checkpoint().save(&a.out.join("model.ckpt"))?;
    let summary = TrainSummary {
        regime: a.regime,
        best_epoch: run.best_epoch,
        valid_micro_f1: run.best_valid.micro_f1,
        valid_em: run.best_valid.em,
        steps: trainer.step,
        labels: &labels,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    write_string(&a.out.join("train_summary.json"), &json)?;
    println!(
        "regime {}: best epoch {} selection micro-F1 {:.4} EM {:.4}",
        a.regime,
        run.best_epoch + 1,
        run.best_valid.micro_f1,
        run.best_valid.em
    );
    Ok(())
}

fn load_model(ckpt_path: &Path, tok_path: &Path) -> std::result::Result<(Checkpoint, Model, Tokenizer), Failure> {
    require_file(ckpt_path)?;
    let ck = Checkpoint::load(ckpt_path)?;
    let tok = load_tokenizer(tok_path, ck.config.preprocessor.clone())?;
    ck.check_tokenizer(&tok.bpe.hash())?;
    if ck.labels.is_empty() {
        return Err(Error::Compatibility("checkpoint has no classifier labels (pretraining checkpoint?)".into()).into());
    }
    let model = ck.model()?;
    Ok((ck, model, tok))
}

fn eval(ckpt_path: &Path, tok_path: &Path, data_path: &Path, out: &Path, top: usize) -> CmdResult {
    let (ck, model, tok) = load_model(ckpt_path, tok_path)?;
    let ds = load_data(data_path)?;
    let ex = ds.encode(&tok, &ck.labels)?;
    let cut = ck.train.as_ref().map_or(0.5, |t| t.threshold);
    let report = evaluate(&model, &ex, &ck.labels, cut)?;
    let seqs: Vec<Vec<usize>> = ex.iter().map(|e| e.ids.clone()).collect();
    let ppl = corpus_perplexity(&model, &seqs)?;
    prepare_out(out)?;
    write_string(&out.join("metrics.json"), &report.to_json())?;
    print!("{}", report.to_table(Some(top)));
    println!("perplexity {ppl:.3}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn explain(
    ckpt_path: &Path,
    tok_path: &Path,
    data_path: &Path,
    dict_path: &Path,
    out: &Path,
    top_k: usize,
    salience: f64,
) -> CmdResult {
    let (ck, model, tok) = load_model(ckpt_path, tok_path)?;
    require_file(dict_path)?;
    let dict = KeywordDictionary::load(dict_path, &tok.pre)?;
    let ds = load_data(data_path)?;
    let notes: Vec<AttributionInput> = ds
        .records
        .iter()
        .map(|r| {
            Ok(AttributionInput {
                id: r.id.clone(),
                text: tok.encode(&r.text),
                gold: Dataset::label_ids(r, &ck.labels)?,
            })
        })
        .collect::<seqcoder::Result<_>>()?;
    let cut = ck.train.as_ref().map_or(0.5, |t| t.threshold);
    let table = keyword_table(&model, &notes, &ck.labels, &dict, top_k, salience, cut)?;
    prepare_out(out)?;
    write_string(&out.join("keywords.json"), &table.to_json())?;
    write_string(&out.join("keywords.txt"), &table.to_table())?;
    print!("{}", table.to_table());
    println!(
        "{} note-label pairs, mean salient fraction {:.4} at threshold {salience}",
        table.pairs, table.mean_salient_fraction
    );
    Ok(())
}

fn baseline(cfg: &RunConfig, train_path: &Path, test_path: &Path, dict_path: &Path, out: &Path) -> CmdResult {
    let train = load_data(train_path)?;
    let test = load_data(test_path)?;
    require_file(dict_path)?;
    let dict = KeywordDictionary::load(dict_path, &Preprocessor::default())?;
    let report = data::bow_baseline(&train, &test, &dict, &cfg.baseline)?;
    prepare_out(out)?;
    write_string(&out.join("baseline_metrics.json"), &report.to_json())?;
    print!("{}", report.to_table(Some(10)));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
