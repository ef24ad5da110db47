//! Entropy evaluation and table rendering.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use crate::corpus::{EncodedStream, BITS_PER_CHAR};
use crate::error::{Error, Result};
use crate::model::{LossAcc, Model, ModelKind};

/// Cross-entropy of a model on a stream.
///
/// `tokens` is the number of scored predictions (every position but the
/// last, minus targets outside the training alphabet). In bit mode the
/// tokens are bits, `bpb` is set and `bpc = 8 · bpb`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub nats: f64,
    pub tokens: usize,
    pub bpc: f64,
    pub bpb: Option<f64>,
    pub oov_rate: Option<f64>,
    /// Targets outside the training alphabet, left unscored.
    pub unseen: usize,
}

impl EvalReport {
    fn from_acc(acc: &LossAcc) -> Self {
        EvalReport {
            nats: acc.char_nats,
            tokens: acc.char_count,
            bpc: acc.char_bits_per_symbol(),
            bpb: None,
            oov_rate: None,
            unseen: acc.unseen_targets,
        }
    }

    /// Reinterprets a report over a bit stream: the per-symbol entropy
    /// becomes bits per bit.
    pub fn into_bits(mut self) -> Self {
        let bpb = self.bpc;
        self.bpb = Some(bpb);
        self.bpc = bpc_from_bpb(bpb);
        self
    }

    pub fn with_oov_rate(mut self, rate: f64) -> Self {
        self.oov_rate = Some(rate);
        self
    }

    pub const TSV_HEADER: &'static str = "nats\ttokens\tbpc\tbpb\toov_rate\tunseen";

    /// Header plus one row; absent values print as `NA`. Floats use the
    /// shortest representation that reads back to the same value.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        format!(
            "{}\n{}\t{}\t{}\t{}\t{}\t{}\n",
            Self::TSV_HEADER,
            self.nats,
            self.tokens,
            self.bpc,
            opt(self.bpb),
            opt(self.oov_rate),
            self.unseen
        )
    }
}

/// Single forward pass from a zero state with the hidden state carried over
/// the whole stream.
pub fn evaluate(model: &Model, stream: &EncodedStream) -> Result<EvalReport> {
    model.check_stream(stream)?;
    let mut carry = model.new_carry();
    let mut acc = LossAcc::chars_only();
    model.forward(stream, 0..stream.len(), &mut carry, &mut acc, None);
    Ok(EvalReport::from_acc(&acc))
}

/// Evaluation over `shards` contiguous pieces in parallel. Each shard starts
/// from a zero state, so the result only approximates [`evaluate`]; with
/// one shard it is identical.
pub fn evaluate_sharded(model: &Model, stream: &EncodedStream, shards: usize) -> Result<EvalReport> {
    if shards == 0 {
        return Err(Error::Param("shard count must be positive".into()));
    }
    model.check_stream(stream)?;
    let n = stream.len();
    let bounds: Vec<_> = (0..shards)
        .map(|i| (i * n / shards)..((i + 1) * n / shards))
        .filter(|r| !r.is_empty())
        .collect();
    let parts: Vec<LossAcc> = std::thread::scope(|s| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|r| {
                let r = r.clone();
                s.spawn(move || {
                    let mut carry = model.new_carry();
                    let mut acc = LossAcc::chars_only();
                    model.forward(stream, r, &mut carry, &mut acc, None);
                    acc
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation shard panicked"))
            .collect()
    });
    let mut total = LossAcc::chars_only();
    for p in &parts {
        total.char_nats += p.char_nats;
        total.char_count += p.char_count;
        total.unseen_targets += p.unseen_targets;
    }
    Ok(EvalReport::from_acc(&total))
}

/// Bits per character from bits per bit under 8-bit encoding.
pub fn bpc_from_bpb(bpb: f64) -> f64 {
    BITS_PER_CHAR as f64 * bpb
}

/// `nats / (tokens · ln 2)`.
pub fn bits_per_token(nats: f64, tokens: usize) -> f64 {
    if tokens == 0 {
        0.0
    } else {
        nats / (tokens as f64 * LN_2)
    }
}

/// Rounds half away from zero on the shortest decimal representation of
/// `x`, so that `1.855` gives `"1.86"` even though the nearest double is
/// slightly below 1.855.
pub fn round_half_up(x: f64, decimals: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let s = x.abs().to_string();
    let (int_part, frac_part) = s.split_once('.').unwrap_or((&s, ""));
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(decimals))
        .map(|b| b - b'0')
        .collect();
    if frac_part.as_bytes().get(decimals).is_some_and(|&b| b >= b'5') {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - decimals;
    let mut out = String::new();
    if x < 0.0 && digits.iter().any(|&d| d != 0) {
        out.push('-');
    }
    out.extend(digits[..split].iter().map(|&d| char::from(b'0' + d)));
    if decimals > 0 {
        out.push('.');
        out.extend(digits[split..].iter().map(|&d| char::from(b'0' + d)));
    }
    out
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub hidden: usize,
    pub kind: ModelKind,
    pub valid: EvalReport,
    pub test: Option<EvalReport>,
    pub seconds_per_epoch: Option<f64>,
}

/// TSV with columns `label, m, model_kind, valid_bpc, test_bpc,
/// seconds_per_epoch`, followed by `valid_bpb, test_bpb` when any row comes
/// from bit mode. Entropies in bits per character get 2 decimals, bits per
/// bit 3, seconds 1. Missing values print as `NA`.
pub fn report_table(rows: &[TableRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Input("no rows to report".into()));
    }
    let bits = rows.iter().any(|r| r.valid.bpb.is_some());
    let fmt = |v: Option<f64>, d: usize| v.map_or_else(|| "NA".to_string(), |x| round_half_up(x, d));
    let mut out = String::from("label\tm\tmodel_kind\tvalid_bpc\ttest_bpc\tseconds_per_epoch");
    if bits {
        out.push_str("\tvalid_bpb\ttest_bpb");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.label,
            r.hidden,
            r.kind,
            fmt(Some(r.valid.bpc), 2),
            fmt(r.test.as_ref().map(|t| t.bpc), 2),
            fmt(r.seconds_per_epoch, 1)
        );
        if bits {
            let _ = write!(
                out,
                "\t{}\t{}",
                fmt(r.valid.bpb, 3),
                fmt(r.test.as_ref().and_then(|t| t.bpb), 3)
            );
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CharRnn;
    use crate::tensor::Rng;

    fn report(bpc: f64) -> EvalReport {
        EvalReport {
            nats: 0.0,
            tokens: 0,
            bpc,
            bpb: None,
            oov_rate: None,
            unseen: 0,
        }
    }

    #[test]
    fn uniform_model_gives_log2_d() {
        let mut p = CharRnn::init(5, 3, &mut Rng::new(1));
        p.out.fill(0.0);
        let model = Model::Plain(p);
        let stream = EncodedStream::from_chars(vec![0, 3, 1, 4, 2, 2, 0, 1]);
        let r = evaluate(&model, &stream).unwrap();
        assert_eq!(r.tokens, 7);
        assert!((r.bpc - 5f64.log2()).abs() < 1e-12);
        assert_eq!(evaluate(&model, &stream).unwrap(), r);
    }

    #[test]
    fn vocabulary_mismatch_is_config_error() {
        let model = Model::Plain(CharRnn::init(2, 2, &mut Rng::new(0)));
        let stream = EncodedStream::from_chars(vec![0, 7]);
        assert!(matches!(evaluate(&model, &stream), Err(Error::Config(_))));
    }

    #[test]
    fn single_shard_equals_single_pass() {
        let model = Model::Plain(CharRnn::init(3, 4, &mut Rng::new(2)));
        let stream = EncodedStream::from_chars((0..300).map(|i| (i * 7 % 3) as u32).collect());
        assert_eq!(
            evaluate_sharded(&model, &stream, 1).unwrap(),
            evaluate(&model, &stream).unwrap()
        );
        let four = evaluate_sharded(&model, &stream, 4).unwrap();
        assert_eq!(four.tokens, 299);
    }

    #[test]
    fn bpb_conversion() {
        assert_eq!(round_half_up(bpc_from_bpb(0.287), 2), "2.30");
        assert!((bpc_from_bpb(0.287) - 2.296).abs() < 1e-12);
        assert!((bpc_from_bpb(0.222) - 1.776).abs() < 1e-12);
        assert_eq!(round_half_up(bpc_from_bpb(0.222), 2), "1.78");
        assert_eq!(bpc_from_bpb(0.0), 0.0);
        let r = report(0.25).into_bits();
        assert_eq!((r.bpb, r.bpc), (Some(0.25), 2.0));
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_half_up(1.855, 2), "1.86");
        assert_eq!(round_half_up(1.845, 2), "1.85");
        assert_eq!(round_half_up(1.8549, 2), "1.85");
        assert_eq!(round_half_up(9.995, 2), "10.00");
        assert_eq!(round_half_up(2.0, 3), "2.000");
        assert_eq!(round_half_up(0.2865, 3), "0.287");
        assert_eq!(round_half_up(-1.855, 2), "-1.86");
        assert_eq!(round_half_up(-0.001, 2), "0.00");
        assert_eq!(round_half_up(166.04, 1), "166.0");
        assert_eq!(round_half_up(1e-7, 2), "0.00");
    }

    #[test]
    fn table_layout() {
        let row = |label: &str, bpc: f64| TableRow {
            label: label.into(),
            hidden: 100,
            kind: ModelKind::Cond,
            valid: report(bpc),
            test: None,
            seconds_per_epoch: Some(250.0),
        };
        let one = report_table(&[row("a", 1.855)]).unwrap();
        let lines: Vec<_> = one.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "label\tm\tmodel_kind\tvalid_bpc\ttest_bpc\tseconds_per_epoch"
        );
        assert_eq!(lines[1], "a\t100\tcond\t1.86\tNA\t250.0");

        let two = report_table(&[row("z", 1.0), row("b", 2.0)]).unwrap();
        let labels: Vec<_> = two.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(labels, ["z", "b"]);
        assert!(report_table(&[]).is_err());

        let mut bits = row("bits", 0.0);
        bits.valid = report(0.287 / 8.0 * 8.0).into_bits();
        let t = report_table(&[bits]).unwrap();
        assert!(t.lines().next().unwrap().ends_with("valid_bpb\ttest_bpb"));
        assert!(t.lines().nth(1).unwrap().ends_with("\t0.287\tNA"));
    }

    #[test]
    fn tsv_round_trips_floats() {
        let r = EvalReport {
            nats: 0.1 + 0.2,
            tokens: 3,
            bpc: 1.0 / 3.0,
            bpb: None,
            oov_rate: Some(0.05),
            unseen: 1,
        };
        let tsv = r.to_tsv();
        let row: Vec<_> = tsv.lines().nth(1).unwrap().split('\t').collect();
        assert_eq!(row[2].parse::<f64>().unwrap(), r.bpc);
        assert_eq!(row[3], "NA");
        assert_eq!(row[4], "0.05");
    }
}
