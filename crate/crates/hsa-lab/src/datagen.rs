//! Deterministic generators for synthetic long-context tasks: single- and
//! multi-query needle-in-a-haystack, variable tracking, self-copy, probe
//! injection into an LM corpus stream, and a corpus mode with a guaranteed
//! effective context length.
//!
//! Text lives in a byte-level vocabulary (256 raw bytes + 8 special tokens),
//! so every sample is exactly reproducible from a seed. Each generator's
//! stored answer can be re-derived by an independent solver that reads only
//! the emitted tokens; see the `solve_*` functions.

use crate::error::{HsaError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Byte-level vocabulary: 256 raw bytes plus 8 special tokens.
pub const VOCAB_SIZE: usize = 264;
pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const SEP: u32 = 259;
// ids 260..263 are reserved for future specials

/// Encode UTF-8 text as byte tokens.
pub fn encode_text(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decode byte tokens back to text; special tokens are dropped.
pub fn decode_text(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// One training or evaluation sequence. `loss_mask[i]` marks token `i` as a
/// prediction target: answer positions for probe tasks, every position ≥ 1
/// for LM tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<u32>,
    /// 0/1 per position, aligned with `tokens`.
    pub loss_mask: Vec<u8>,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum SampleMeta {
    Sniah {
        key: String,
        value: String,
        /// Requested depth fraction in [0,1].
        depth: f64,
        /// Token index where the needle sentence starts.
        needle_start: usize,
        answer_start: usize,
    },
    Mqniah {
        keys: Vec<String>,
        values: Vec<String>,
        /// Indices into keys/values of the queried pairs, in query order.
        queried: Vec<usize>,
        answer_start: usize,
    },
    Vartrack {
        /// Variable names in chain order; all equal `value`.
        chain: Vec<String>,
        value: String,
        answer_start: usize,
    },
    SelfCopy {
        answer_start: usize,
    },
    Lm {
        mode: String,
    },
}

impl Sample {
    pub fn mask_bools(&self) -> Vec<bool> {
        self.loss_mask.iter().map(|&b| b != 0).collect()
    }

    /// The contiguous masked answer span (tokens, start index).
    pub fn answer_span(&self) -> Option<(usize, usize)> {
        let start = self.loss_mask.iter().position(|&b| b != 0)?;
        let len = self.loss_mask[start..].iter().take_while(|&&b| b != 0).count();
        Some((start, len))
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Sample> {
        Ok(serde_json::from_str(line)?)
    }
}

const WORDS: &[&str] = &[
    "the", "quick", "river", "stone", "light", "garden", "paper", "window", "summer", "road",
    "mountain", "cloud", "music", "silver", "morning", "harbor", "letter", "forest", "bridge",
    "candle", "meadow", "winter", "shadow", "orchard", "lantern", "valley", "thunder", "ember",
    "willow", "harvest", "copper", "quiet", "distant", "gentle", "broken", "hollow", "amber",
    "frozen", "golden", "scarlet",
];

/// Seeded filler prose of exactly `len` bytes.
fn filler_text(len: usize, rng: &mut impl Rng) -> String {
    let mut out = String::with_capacity(len + 16);
    while out.len() < len {
        let words = rng.gen_range(5..11);
        for w in 0..words {
            if w > 0 {
                out.push(' ');
            }
            out.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
        }
        out.push_str(". ");
    }
    out.truncate(len);
    out
}

fn digits6(rng: &mut impl Rng) -> String {
    format!("{:06}", rng.gen_range(0..1_000_000u32))
}

fn needle_sentence(key: &str, value: &str) -> String {
    format!("One of the special magic numbers for {key} is: {value}. ")
}

/// Single-needle NIAH: filler with one key–value needle at the requested
/// depth, a query prompt, and the answer (loss on the answer + EOS only).
/// The sample is exactly `length` tokens.
pub fn gen_sniah(length: usize, depth: f64, rng: &mut impl Rng) -> Result<Sample> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(HsaError::InvalidArgument {
            op: "gen_sniah",
            msg: format!("depth {depth} outside [0,1]"),
        });
    }
    let key = digits6(rng);
    let value = digits6(rng);
    let needle = needle_sentence(&key, &value);
    let query = format!("What is the special magic number for {key}? Answer: ");
    // BOS + filler + needle + query + value + EOS
    let fixed = 1 + needle.len() + query.len() + value.len() + 1;
    if length < fixed {
        return Err(HsaError::InvalidArgument {
            op: "gen_sniah",
            msg: format!("length {length} below minimum {fixed}"),
        });
    }
    let filler_total = length - fixed;
    let pre = ((depth * filler_total as f64).round() as usize).min(filler_total);
    let filler = filler_text(filler_total, rng);

    let mut tokens = Vec::with_capacity(length);
    tokens.push(BOS);
    tokens.extend(encode_text(&filler[..pre]));
    let needle_start = tokens.len();
    tokens.extend(encode_text(&needle));
    tokens.extend(encode_text(&filler[pre..]));
    tokens.extend(encode_text(&query));
    let answer_start = tokens.len();
    tokens.extend(encode_text(&value));
    tokens.push(EOS);
    debug_assert_eq!(tokens.len(), length);

    let mut loss_mask = vec![0u8; length];
    for m in loss_mask.iter_mut().skip(answer_start) {
        *m = 1;
    }
    Ok(Sample {
        tokens,
        loss_mask,
        meta: SampleMeta::Sniah { key, value, depth, needle_start, answer_start },
    })
}

/// Multi-query NIAH (paper defaults: 2 queries over 6 key–value pairs).
/// All queried values must be produced, space-separated, for a correct
/// answer.
pub fn gen_mqniah(
    length: usize,
    n_queries: usize,
    n_kv: usize,
    rng: &mut impl Rng,
) -> Result<Sample> {
    if n_queries == 0 || n_queries > n_kv {
        return Err(HsaError::InvalidArgument {
            op: "gen_mqniah",
            msg: format!("need 1 <= n_queries ({n_queries}) <= n_kv ({n_kv})"),
        });
    }
    // distinct keys by re-drawing on collision
    let mut keys: Vec<String> = Vec::with_capacity(n_kv);
    while keys.len() < n_kv {
        let k = digits6(rng);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let values: Vec<String> = (0..n_kv).map(|_| digits6(rng)).collect();
    let mut queried: Vec<usize> = (0..n_kv).collect();
    queried.shuffle(rng);
    queried.truncate(n_queries);

    let key_list = queried.iter().map(|&i| keys[i].as_str()).collect::<Vec<_>>().join(" and ");
    let answer = queried.iter().map(|&i| values[i].as_str()).collect::<Vec<_>>().join(" ");
    let query = format!("What are all the special magic numbers for {key_list}? Answer: ");
    let needles: Vec<String> =
        (0..n_kv).map(|i| needle_sentence(&keys[i], &values[i])).collect();
    let needles_len: usize = needles.iter().map(String::len).sum();
    let fixed = 1 + needles_len + query.len() + answer.len() + 1;
    if length < fixed {
        return Err(HsaError::InvalidArgument {
            op: "gen_mqniah",
            msg: format!("length {length} below minimum {fixed}"),
        });
    }
    let filler_total = length - fixed;
    let filler = filler_text(filler_total, rng);
    // distinct insertion offsets into the filler, one per needle
    let mut cuts: Vec<usize> = (0..n_kv).map(|_| rng.gen_range(0..=filler_total)).collect();
    cuts.sort_unstable();

    let mut tokens = Vec::with_capacity(length);
    tokens.push(BOS);
    let mut prev = 0;
    for (needle, &cut) in needles.iter().zip(&cuts) {
        tokens.extend(encode_text(&filler[prev..cut]));
        tokens.extend(encode_text(needle));
        prev = cut;
    }
    tokens.extend(encode_text(&filler[prev..]));
    tokens.extend(encode_text(&query));
    let answer_start = tokens.len();
    tokens.extend(encode_text(&answer));
    tokens.push(EOS);
    debug_assert_eq!(tokens.len(), length);

    let mut loss_mask = vec![0u8; length];
    for m in loss_mask.iter_mut().skip(answer_start) {
        *m = 1;
    }
    Ok(Sample {
        tokens,
        loss_mask,
        meta: SampleMeta::Mqniah { keys, values, queried, answer_start },
    })
}

/// Variable tracking: a chain `A = v; B = A; C = B; ...` scattered through
/// filler in random order; the query asks for every variable equal to `v`.
pub fn gen_vartrack(length: usize, chain_length: usize, rng: &mut impl Rng) -> Result<Sample> {
    if chain_length < 2 {
        return Err(HsaError::InvalidArgument {
            op: "gen_vartrack",
            msg: format!("chain_length {chain_length} < 2"),
        });
    }
    let mut names: Vec<String> = Vec::with_capacity(chain_length);
    while names.len() < chain_length {
        let name: String = (0..3).map(|_| rng.gen_range(b'A'..=b'Z') as char).collect();
        if !names.contains(&name) {
            names.push(name);
        }
    }
    let value = digits6(rng);
    let mut assignments: Vec<String> = Vec::with_capacity(chain_length);
    assignments.push(format!("VAR {} = {} ; ", names[0], value));
    for i in 1..chain_length {
        assignments.push(format!("VAR {} = {} ; ", names[i], names[i - 1]));
    }
    assignments.shuffle(rng);

    let answer = names.join(" ");
    let query = format!("Which variables are equal to {value}? Answer: ");
    let assign_len: usize = assignments.iter().map(String::len).sum();
    let fixed = 1 + assign_len + query.len() + answer.len() + 1;
    if length < fixed {
        return Err(HsaError::InvalidArgument {
            op: "gen_vartrack",
            msg: format!("length {length} below minimum {fixed}"),
        });
    }
    let filler_total = length - fixed;
    let filler = filler_text(filler_total, rng);
    let mut cuts: Vec<usize> =
        (0..chain_length).map(|_| rng.gen_range(0..=filler_total)).collect();
    cuts.sort_unstable();

    let mut tokens = Vec::with_capacity(length);
    tokens.push(BOS);
    let mut prev = 0;
    for (a, &cut) in assignments.iter().zip(&cuts) {
        tokens.extend(encode_text(&filler[prev..cut]));
        tokens.extend(encode_text(a));
        prev = cut;
    }
    tokens.extend(encode_text(&filler[prev..]));
    tokens.extend(encode_text(&query));
    let answer_start = tokens.len();
    tokens.extend(encode_text(&answer));
    tokens.push(EOS);
    debug_assert_eq!(tokens.len(), length);

    let mut loss_mask = vec![0u8; length];
    for m in loss_mask.iter_mut().skip(answer_start) {
        *m = 1;
    }
    Ok(Sample { tokens, loss_mask, meta: SampleMeta::Vartrack { chain: names, value, answer_start } })
}

/// Self-copy warm-up task: `seq ++ SEP ++ seq`, loss on the second copy.
pub fn gen_selfcopy(seq: &[u32]) -> Result<Sample> {
    if seq.is_empty() {
        return Err(HsaError::InvalidArgument { op: "gen_selfcopy", msg: "empty sequence".into() });
    }
    let mut tokens = Vec::with_capacity(2 * seq.len() + 1);
    tokens.extend_from_slice(seq);
    tokens.push(SEP);
    let answer_start = tokens.len();
    tokens.extend_from_slice(seq);
    let mut loss_mask = vec![0u8; tokens.len()];
    for m in loss_mask.iter_mut().skip(answer_start) {
        *m = 1;
    }
    Ok(Sample { tokens, loss_mask, meta: SampleMeta::SelfCopy { answer_start } })
}

/// Plain filler-prose LM sample; loss on every position ≥ 1.
pub fn gen_lm(length: usize, rng: &mut impl Rng) -> Result<Sample> {
    if length < 2 {
        return Err(HsaError::InvalidArgument { op: "gen_lm", msg: "length < 2".into() });
    }
    let mut tokens = Vec::with_capacity(length);
    tokens.push(BOS);
    tokens.extend(encode_text(&filler_text(length - 1, rng)));
    let mut loss_mask = vec![1u8; length];
    loss_mask[0] = 0;
    Ok(Sample { tokens, loss_mask, meta: SampleMeta::Lm { mode: "filler".into() } })
}

/// LM corpus with a guaranteed effective context length: every planted fact
/// sentence is restated at least `min_gap` tokens later, so predicting the
/// restatement rewards long-range retrieval. Loss on every position ≥ 1.
pub fn gen_lm_effective(length: usize, min_gap: usize, rng: &mut impl Rng) -> Result<Sample> {
    let fact = |k: &str, v: &str| format!("Agent {k} uses the secret code {v}. ");
    let probe_len = fact("000000", "000000").len();
    if length < 2 + min_gap + 2 * probe_len {
        return Err(HsaError::InvalidArgument {
            op: "gen_lm_effective",
            msg: format!("length {length} too small for min_gap {min_gap}"),
        });
    }
    let body_len = length - 1;
    let mut text = filler_text(body_len, rng);
    // plant fact/restatement pairs, each pair >= min_gap apart
    let n_pairs = (body_len / (min_gap + 2 * probe_len)).max(1);
    for _ in 0..n_pairs {
        let k = digits6(rng);
        let v = digits6(rng);
        let s = fact(&k, &v);
        let first_max = body_len - min_gap - 2 * s.len();
        let first = rng.gen_range(0..=first_max);
        let second_min = first + s.len() + min_gap;
        let second = rng.gen_range(second_min..=body_len - s.len());
        text.replace_range(first..first + s.len(), &s);
        text.replace_range(second..second + s.len(), &s);
    }
    let mut tokens = Vec::with_capacity(length);
    tokens.push(BOS);
    tokens.extend(encode_text(&text));
    let mut loss_mask = vec![1u8; length];
    loss_mask[0] = 0;
    Ok(Sample { tokens, loss_mask, meta: SampleMeta::Lm { mode: "effective".into() } })
}

/// Independently convert each corpus sample into an S-NIAH probe of the same
/// length with the given probability.
pub fn inject_probes(
    samples: Vec<Sample>,
    probability: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(HsaError::InvalidArgument {
            op: "inject_probes",
            msg: format!("probability {probability} outside [0,1]"),
        });
    }
    samples
        .into_iter()
        .map(|s| {
            if rng.gen_bool(probability) {
                let depth = rng.gen_range(0.0..=1.0);
                gen_sniah(s.tokens.len(), depth, rng)
            } else {
                Ok(s)
            }
        })
        .collect()
}

// ---- independent solvers (read only the generated tokens) ----

/// Extract every `key -> value` needle statement from decoded text.
fn parse_needles(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let marker = "magic numbers for ";
    let mut rest = text;
    while let Some(i) = rest.find(marker) {
        let tail = &rest[i + marker.len()..];
        if let Some(tail) = tail.strip_prefix_digits(6).and_then(|(k, t)| {
            t.strip_prefix(" is: ")
                .and_then(|t| t.strip_prefix_digits(6).map(|(v, _)| (k, v)))
        }) {
            out.push(tail);
        }
        rest = &rest[i + marker.len()..];
    }
    out
}

trait StrExt {
    /// Split off exactly `n` leading ASCII digits.
    fn strip_prefix_digits(&self, n: usize) -> Option<(String, &str)>;
}

impl StrExt for str {
    fn strip_prefix_digits(&self, n: usize) -> Option<(String, &str)> {
        if self.len() >= n && self.as_bytes()[..n].iter().all(u8::is_ascii_digit) {
            Some((self[..n].to_string(), &self[n..]))
        } else {
            None
        }
    }
}

/// Solve an S-NIAH sample from its tokens alone; returns the answer string.
pub fn solve_sniah(sample: &Sample) -> Option<String> {
    let text = decode_text(&sample.tokens);
    let q = text.rfind("What is the special magic number for ")?;
    let (key, _) = text[q + "What is the special magic number for ".len()..]
        .strip_prefix_digits(6)?;
    parse_needles(&text[..q]).into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
}

/// Solve an MQ-NIAH sample; returns the space-joined answer values in query
/// order.
pub fn solve_mqniah(sample: &Sample) -> Option<String> {
    let text = decode_text(&sample.tokens);
    let q = text.rfind("What are all the special magic numbers for ")?;
    let needles: HashMap<String, String> = parse_needles(&text[..q]).into_iter().collect();
    let mut rest = &text[q + "What are all the special magic numbers for ".len()..];
    let mut answers = Vec::new();
    loop {
        let (key, tail) = rest.strip_prefix_digits(6)?;
        answers.push(needles.get(&key)?.clone());
        if let Some(t) = tail.strip_prefix(" and ") {
            rest = t;
        } else {
            break;
        }
    }
    Some(answers.join(" "))
}

/// Solve a variable-tracking sample by following assignment chains; returns
/// the set of variables equal to the queried value.
pub fn solve_vartrack(sample: &Sample) -> Option<Vec<String>> {
    let text = decode_text(&sample.tokens);
    let q = text.rfind("Which variables are equal to ")?;
    let (value, _) = text[q + "Which variables are equal to ".len()..].strip_prefix_digits(6)?;
    // collect "VAR name = rhs ;" statements
    let mut assigns: Vec<(String, String)> = Vec::new();
    let mut rest = &text[..q];
    while let Some(i) = rest.find("VAR ") {
        let tail = &rest[i + 4..];
        if let Some((name, tail)) = tail.split_once(" = ") {
            if let Some((rhs, _)) = tail.split_once(" ; ") {
                assigns.push((name.to_string(), rhs.to_string()));
            }
        }
        rest = &rest[i + 4..];
    }
    // resolve each variable to its ultimate numeric value
    let map: HashMap<String, String> = assigns.iter().cloned().collect();
    let mut answer: Vec<String> = Vec::new();
    for (name, _) in &assigns {
        let mut cur = name.clone();
        for _ in 0..map.len() + 1 {
            match map.get(&cur) {
                Some(rhs) if rhs.chars().all(|c| c.is_ascii_digit()) => {
                    if *rhs == value {
                        answer.push(name.clone());
                    }
                    break;
                }
                Some(rhs) => cur = rhs.clone(),
                None => break,
            }
        }
    }
    answer.sort();
    Some(answer)
}
