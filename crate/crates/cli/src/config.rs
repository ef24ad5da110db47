//! `key = value` run configuration with a closed schema.

use std::path::PathBuf;
use std::str::FromStr;

use ccrnn::{ModelKind, TrainConfig};

/// Every recognized key, in the order written by `--help`.
pub const KEYS: &[&str] = &[
    "model",
    "hidden",
    "word_hidden",
    "lambda",
    "word_out",
    "word_topk",
    "ngram_cutoff",
    "ngram_max",
    "bits",
    "lr",
    "lr_decay",
    "clip",
    "bptt",
    "epochs",
    "max_decays",
    "seed",
    "train",
    "valid",
    "ckpt",
    "log",
    "vocab",
];

/// Training run settings. Unset fields fall back to the next layer: flags
/// over the config file over built-in defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: Option<ModelKind>,
    pub hidden: Option<usize>,
    pub word_hidden: Option<usize>,
    pub lambda: Option<f64>,
    pub word_out: Option<usize>,
    pub word_topk: Option<usize>,
    pub ngram_cutoff: Option<u64>,
    pub ngram_max: Option<usize>,
    pub bits: Option<bool>,
    pub lr: Option<f64>,
    pub lr_decay: Option<f64>,
    pub clip: Option<f64>,
    pub bptt: Option<usize>,
    pub epochs: Option<usize>,
    pub max_decays: Option<usize>,
    pub seed: Option<u64>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<Option<T>, String> {
    value
        .parse()
        .map(Some)
        .map_err(|_| format!("line {line}: bad value {value:?} for {key}"))
}

impl RunConfig {
    /// Parses config file text. Keys may use `-` or `_`; `#` starts a
    /// comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut c = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split_once('#').map_or(raw, |(b, _)| b).trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| format!("line {line}: expected `key = value`"))?;
            let key = key.trim().replace('-', "_");
            let value = value.trim();
            if !KEYS.contains(&key.as_str()) {
                return Err(format!("line {line}: unknown key {key:?}"));
            }
            if seen.contains(&key) {
                return Err(format!("line {line}: duplicate key {key:?}"));
            }
            let k = key.as_str();
            match k {
                "model" => c.model = parse(k, value, line)?,
                "hidden" => c.hidden = parse(k, value, line)?,
                "word_hidden" => c.word_hidden = parse(k, value, line)?,
                "lambda" => c.lambda = parse(k, value, line)?,
                "word_out" => c.word_out = parse(k, value, line)?,
                "word_topk" => c.word_topk = parse(k, value, line)?,
                "ngram_cutoff" => c.ngram_cutoff = parse(k, value, line)?,
                "ngram_max" => c.ngram_max = parse(k, value, line)?,
                "bits" => c.bits = parse(k, value, line)?,
                "lr" => c.lr = parse(k, value, line)?,
                "lr_decay" => c.lr_decay = parse(k, value, line)?,
                "clip" => c.clip = parse(k, value, line)?,
                "bptt" => c.bptt = parse(k, value, line)?,
                "epochs" => c.epochs = parse(k, value, line)?,
                "max_decays" => c.max_decays = parse(k, value, line)?,
                "seed" => c.seed = parse(k, value, line)?,
                "train" => c.train = Some(value.into()),
                "valid" => c.valid = Some(value.into()),
                "ckpt" => c.ckpt = Some(value.into()),
                "log" => c.log = Some(value.into()),
                "vocab" => c.vocab = Some(value.into()),
                _ => unreachable!("key list and match disagree"),
            }
            seen.push(key);
        }
        Ok(c)
    }

    /// Fields set in `self` win over `base`.
    pub fn over(self, base: RunConfig) -> RunConfig {
        RunConfig {
            model: self.model.or(base.model),
            hidden: self.hidden.or(base.hidden),
            word_hidden: self.word_hidden.or(base.word_hidden),
            lambda: self.lambda.or(base.lambda),
            word_out: self.word_out.or(base.word_out),
            word_topk: self.word_topk.or(base.word_topk),
            ngram_cutoff: self.ngram_cutoff.or(base.ngram_cutoff),
            ngram_max: self.ngram_max.or(base.ngram_max),
            bits: self.bits.or(base.bits),
            lr: self.lr.or(base.lr),
            lr_decay: self.lr_decay.or(base.lr_decay),
            clip: self.clip.or(base.clip),
            bptt: self.bptt.or(base.bptt),
            epochs: self.epochs.or(base.epochs),
            max_decays: self.max_decays.or(base.max_decays),
            seed: self.seed.or(base.seed),
            train: self.train.or(base.train),
            valid: self.valid.or(base.valid),
            ckpt: self.ckpt.or(base.ckpt),
            log: self.log.or(base.log),
            vocab: self.vocab.or(base.vocab),
        }
    }

    /// Checks flag consistency and fills in defaults. Everything here is a
    /// usage error and happens before any corpus is read.
    pub fn resolve(&self) -> Result<ResolvedRun, String> {
        let model = self.model.ok_or("missing --model")?;
        let bits = self.bits.unwrap_or(false);
        let mixed_only = [
            ("word_hidden", self.word_hidden.is_some()),
            ("lambda", self.lambda.is_some()),
            ("word_out", self.word_out.is_some()),
            ("word_topk", self.word_topk.is_some()),
        ];
        if model != ModelKind::Mixed {
            if let Some((name, _)) = mixed_only.iter().find(|(_, set)| *set) {
                return Err(format!("{name} only applies to --model mixed"));
            }
        }
        if model != ModelKind::Cond {
            if self.ngram_cutoff.is_some() {
                return Err("ngram_cutoff only applies to --model cond".into());
            }
            if self.ngram_max.is_some() {
                return Err("ngram_max only applies to --model cond".into());
            }
        }
        let d = TrainConfig::default();
        let config = TrainConfig {
            model,
            hidden: self.hidden.unwrap_or(d.hidden),
            word_hidden: self.word_hidden.unwrap_or(d.word_hidden),
            word_topk: self.word_topk.unwrap_or(d.word_topk),
            word_out: self.word_out.unwrap_or(d.word_out),
            lambda: self.lambda.unwrap_or(d.lambda),
            theta: self.ngram_cutoff.unwrap_or(if bits { 2_000 } else { d.theta }),
            n_max: self.ngram_max.unwrap_or(d.n_max),
            bits,
            gamma: self.lr.unwrap_or(d.gamma),
            alpha: self.lr_decay.unwrap_or(d.alpha),
            tau: self.clip.unwrap_or(d.tau),
            bptt: self.bptt.unwrap_or(d.bptt),
            max_epochs: self.epochs.unwrap_or(d.max_epochs),
            max_decays: self.max_decays.unwrap_or(d.max_decays),
            seed: self.seed.unwrap_or(d.seed),
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(ResolvedRun {
            config,
            train: self.train.clone().ok_or("missing --train")?,
            valid: self.valid.clone().ok_or("missing --valid")?,
            ckpt: self.ckpt.clone().ok_or("missing --ckpt")?,
            log: self.log.clone(),
            vocab: self.vocab.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub config: TrainConfig,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub ckpt: PathBuf,
    pub log: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}
