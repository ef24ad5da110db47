mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccrnn::corpus::{oov_rate, split_lines, CharVocab, SplitSizes, WordVocab};
use ccrnn::eval::{evaluate, evaluate_sharded};
use ccrnn::model::sample_text;
use ccrnn::tensor::{streams, Rng};
use ccrnn::trainer::{fit, EpochLog, LOG_HEADER};
use ccrnn::{Checkpoint, Error, Experiment, ModelKind};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ccrnn", version, about = "Character-level recurrent language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build character and word vocabularies from a training text.
    BuildVocab(BuildVocabArgs),
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Report the entropy of a checkpoint on a text.
    Eval(EvalArgs),
    /// Generate text from a checkpoint.
    Sample(SampleArgs),
    /// Randomly partition the lines of a corpus into train/valid/test.
    Split(SplitArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    train: PathBuf,
    /// Word vocabulary size including `<UNK>`.
    #[arg(long, default_value_t = 10_000)]
    word_topk: usize,
    /// Output prefix; writes PREFIX.chars and PREFIX.words.
    #[arg(long)]
    out: PathBuf,
    /// Also report the out-of-vocabulary rate on this file.
    #[arg(long)]
    valid: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; flags take precedence over its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    word_hidden: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    word_out: Option<usize>,
    #[arg(long)]
    word_topk: Option<usize>,
    #[arg(long)]
    ngram_cutoff: Option<u64>,
    #[arg(long)]
    ngram_max: Option<usize>,
    /// Model the 8-bit encoding of the text one bit at a time.
    #[arg(long)]
    bits: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    bptt: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_decays: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Prefix of vocabulary files from `build-vocab` (default: build from
    /// the training text).
    #[arg(long)]
    vocab: Option<PathBuf>,
}

impl TrainArgs {
    fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model,
            hidden: self.hidden,
            word_hidden: self.word_hidden,
            lambda: self.lambda,
            word_out: self.word_out,
            word_topk: self.word_topk,
            ngram_cutoff: self.ngram_cutoff,
            ngram_max: self.ngram_max,
            bits: self.bits.then_some(true),
            lr: self.lr,
            lr_decay: self.lr_decay,
            clip: self.clip,
            bptt: self.bptt,
            epochs: self.epochs,
            max_decays: self.max_decays,
            seed: self.seed,
            train: self.train.clone(),
            valid: self.valid.clone(),
            ckpt: self.ckpt.clone(),
            log: self.log.clone(),
            vocab: self.vocab.clone(),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    text: PathBuf,
    /// Require a bit-mode checkpoint.
    #[arg(long)]
    bits: bool,
    /// Evaluate contiguous shards in parallel, each from a zero state.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    shards: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Writes PREFIX.train, PREFIX.valid and PREFIX.test.
    #[arg(long)]
    out_prefix: PathBuf,
    /// Line counts as TRAIN,VALID,TEST.
    #[arg(long, value_parser = parse_sizes, default_value = "60000,10000,10000")]
    sizes: SplitSizes,
}

fn parse_sizes(s: &str) -> Result<SplitSizes, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad size {p:?}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [train, valid, test] if train > 0 && valid > 0 && test > 0 => Ok(SplitSizes { train, valid, test }),
        _ => Err("expected three positive counts TRAIN,VALID,TEST".into()),
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(Error::Io(e))
    }
}

type Outcome = Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Run(Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn build_vocab(args: BuildVocabArgs) -> Outcome {
    if args.word_topk == 0 {
        return Err(Failure::Usage("--word-topk must be at least 1".into()));
    }
    let text = read_text(&args.train)?;
    let cv = CharVocab::build(&text)?;
    let wv = WordVocab::build(&text, args.word_topk)?;
    cv.write(with_suffix(&args.out, ".chars"))?;
    wv.write(with_suffix(&args.out, ".words"))?;
    println!("d\t{}", cv.len());
    println!("k\t{}", wv.len());
    if let Some(valid) = &args.valid {
        println!("oov_rate\t{}", oov_rate(&wv, &read_text(valid)?)?);
    }
    Ok(())
}

fn train(args: TrainArgs) -> Outcome {
    let flags = args.run_config();
    let file = match &args.config {
        Some(path) => RunConfig::parse(&read_text(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    let run = flags.over(file).resolve().map_err(Failure::Usage)?;
    let config = run.config.clone();

    let train_text = read_text(&run.train)?;
    let valid_text = read_text(&run.valid)?;
    let exp = match &run.vocab {
        Some(prefix) => {
            let chars = if config.bits {
                CharVocab::binary()
            } else {
                CharVocab::read(with_suffix(prefix, ".chars"))?
            };
            let words = match config.model {
                ModelKind::Mixed => Some(WordVocab::read(with_suffix(prefix, ".words"))?),
                _ => None,
            };
            Experiment::with_vocab(config.clone(), chars, words, &train_text)?
        }
        None => Experiment::from_training_text(config.clone(), &train_text)?,
    };
    let train_stream = exp.encode(&train_text)?;
    let valid_stream = exp.encode(&valid_text)?;
    let (model, rng) = exp.init_model()?;

    let mut log = match &run.log {
        Some(path) => {
            let mut f = fs::File::create(path)?;
            writeln!(f, "{LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut log_error = None;
    let on_epoch = |row: &EpochLog| {
        eprintln!("{}", row.to_tsv_row());
        if let Some(f) = log.as_mut() {
            if let Err(e) = writeln!(f, "{}", row.to_tsv_row()).and_then(|_| f.flush()) {
                log_error.get_or_insert(e);
            }
        }
    };
    let result = fit(&config, model, &rng, &train_stream, &valid_stream, on_epoch);
    if let Some(e) = log_error {
        return Err(e.into());
    }
    match result {
        Ok(out) => {
            exp.checkpoint(out.best, out.best_state.clone()).save(&run.ckpt)?;
            if let Some(best) = out.best_state.best_valid {
                let scale = if config.bits { 8.0 } else { 1.0 };
                if config.bits {
                    println!("valid_bpb\t{best}");
                }
                println!("valid_bpc\t{}", best * scale);
            }
            Ok(())
        }
        Err(failure) => {
            let out = failure.outcome;
            if !out.log.is_empty() {
                exp.checkpoint(out.best, out.best_state).save(&run.ckpt)?;
                eprintln!("saved last good checkpoint to {}", run.ckpt.display());
            }
            Err(failure.error.into())
        }
    }
}

fn eval(args: EvalArgs) -> Outcome {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    if args.bits && !ckpt.config.bits {
        return Err(Error::Config("--bits given but the checkpoint was not trained in bit mode".into()).into());
    }
    let text = read_text(&args.text)?;
    let exp = Experiment::from_checkpoint(&ckpt);
    let stream = exp.encode(&text)?;
    let mut report = if args.shards > 1 {
        evaluate_sharded(&ckpt.model, &stream, args.shards as usize)?
    } else {
        evaluate(&ckpt.model, &stream)?
    };
    if ckpt.config.bits {
        report = report.into_bits();
    }
    if let Some(wv) = &ckpt.words {
        report = report.with_oov_rate(oov_rate(wv, &text)?);
    }
    print!("{}", report.to_tsv());
    Ok(())
}

fn sample(args: SampleArgs) -> Outcome {
    if !(args.temperature > 0.0) {
        return Err(Failure::Usage("--temperature must be positive".into()));
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut rng = Rng::derive(args.seed, streams::SAMPLE);
    let text = sample_text(
        &ckpt.model,
        &ckpt.chars,
        ckpt.words.as_ref(),
        &mut rng,
        args.length,
        args.temperature,
    )?;
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn split(args: SplitArgs) -> Outcome {
    let text = read_text(&args.corpus)?;
    let lines: Vec<&str> = text.lines().collect();
    let parts = split_lines(&lines, args.seed, args.sizes)?;
    for (suffix, part) in [(".train", &parts.train), (".valid", &parts.valid), (".test", &parts.test)] {
        let mut body = String::new();
        for line in part.iter() {
            body.push_str(line);
            body.push('\n');
        }
        fs::write(with_suffix(&args.out_prefix, suffix), body)?;
    }
    println!(
        "train\t{}\nvalid\t{}\ntest\t{}",
        parts.train.len(),
        parts.valid.len(),
        parts.test.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Split(a) => split(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
