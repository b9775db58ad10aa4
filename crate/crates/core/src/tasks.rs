//! Synthetic verifiable task families, the character vocabulary, JSONL
//! datasets and the answer checker.
//!
//! * `mod_add_chain`: prompt `3+7+2=`, response is a scratchpad that sums the
//!   terms in a random order modulo `modulus`, e.g. `3+7=10;10+2=12#12`.
//! * `reverse_copy`: prompt `abc→`, response `#cba`.
//!
//! The model sees `BOS prompt response EOS`. The answer follows the last
//! answer mark `#`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const ANSWER_MARK: TokenId = 3;
pub const ANSWER_CHAR: char = '#';
pub const ARROW: char = '→';

/// Printable glyphs in id order starting at [`ANSWER_MARK`].
const GLYPHS: &str = "#0123456789+=;→abcdefghijklmn";
/// Letters available to `reverse_copy`.
pub const LETTERS: &str = "abcdefghijklmn";

/// Bijective map between glyphs and token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    glyphs: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            glyphs: GLYPHS.chars().collect(),
        }
    }
}

impl Vocabulary {
    /// Number of ids, including the three non-printing specials.
    pub fn size(&self) -> usize {
        ANSWER_MARK as usize + self.glyphs.len()
    }

    pub fn id_of(&self, ch: char) -> Option<TokenId> {
        self.glyphs
            .iter()
            .position(|&g| g == ch)
            .map(|i| ANSWER_MARK + i as TokenId)
    }

    pub fn glyph(&self, id: TokenId) -> Option<char> {
        id.checked_sub(ANSWER_MARK)
            .and_then(|i| self.glyphs.get(i as usize).copied())
    }

    /// Text to ids; `offset` in the error is the character index.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| self.id_of(ch).ok_or(Error::Tokenize { ch, offset }))
            .collect()
    }

    /// Ids to text; specials render as `<pad>`, `<bos>`, `<eos>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD => s.push_str("<pad>"),
                BOS => s.push_str("<bos>"),
                EOS => s.push_str("<eos>"),
                _ => match self.glyph(id) {
                    Some(c) => s.push(c),
                    None => s.push_str(&format!("<{id}>")),
                },
            }
        }
        s
    }
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub prompt: String,
    pub response: String,
    pub answer: String,
}

/// A tokenized task instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// `BOS` followed by the prompt glyphs.
    pub prompt_tokens: Vec<TokenId>,
    /// Response glyphs followed by `EOS`.
    pub response_tokens: Vec<TokenId>,
    pub gold_answer: String,
}

impl Sample {
    pub fn from_record(record: &Record, vocab: &Vocabulary) -> Result<Self> {
        let mut prompt_tokens = vec![BOS];
        prompt_tokens.extend(vocab.tokenize(&record.prompt)?);
        let mut response_tokens = vocab.tokenize(&record.response)?;
        response_tokens.push(EOS);
        Ok(Self {
            prompt_tokens,
            response_tokens,
            gold_answer: record.answer.clone(),
        })
    }

    /// `prompt ++ response`, the sequence fed to the model during training.
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut s = self.prompt_tokens.clone();
        s.extend_from_slice(&self.response_tokens);
        s
    }

    pub fn len(&self) -> usize {
        self.prompt_tokens.len() + self.response_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    ModAddChain,
    ReverseCopy,
}

/// Requested size of each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub pretrain: usize,
    pub sft: usize,
    pub rl: usize,
    pub eval: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.pretrain + self.sft + self.rl + self.eval
    }
}

/// Generation parameters for one task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// Fewest terms in a `mod_add_chain` prompt (≥ 2).
    pub min_terms: usize,
    pub max_terms: usize,
    /// Terms are drawn from `0..=max_operand`.
    pub max_operand: u32,
    pub modulus: u32,
    /// String length range for `reverse_copy`.
    pub min_len: usize,
    pub max_len: usize,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            family: TaskFamily::ModAddChain,
            min_terms: 2,
            max_terms: 4,
            max_operand: 9,
            modulus: 100,
            min_len: 2,
            max_len: 6,
            counts: SplitCounts {
                pretrain: 4000,
                sft: 64,
                rl: 256,
                eval: 64,
            },
            seed: 1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.family {
            TaskFamily::ModAddChain => {
                if self.min_terms < 2 || self.max_terms < self.min_terms {
                    return Err(Error::Config(format!(
                        "term range {}..={} needs 2 ≤ min_terms ≤ max_terms",
                        self.min_terms, self.max_terms
                    )));
                }
                if self.modulus < 2 || self.max_operand > 9 {
                    return Err(Error::Config(
                        "modulus must be ≥ 2 and max_operand a single digit".into(),
                    ));
                }
            }
            TaskFamily::ReverseCopy => {
                if self.min_len < 1 || self.max_len < self.min_len {
                    return Err(Error::Config(format!(
                        "length range {}..={} needs 1 ≤ min_len ≤ max_len",
                        self.min_len, self.max_len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of distinct prompts the family can produce.
    pub fn instance_space(&self) -> f64 {
        let (lo, hi, base) = match self.family {
            TaskFamily::ModAddChain => (self.min_terms, self.max_terms, f64::from(self.max_operand + 1)),
            TaskFamily::ReverseCopy => (self.min_len, self.max_len, LETTERS.chars().count() as f64),
        };
        (lo..=hi).map(|n| base.powi(n as i32)).sum()
    }

    /// Draws one instance; the prompt identifies the instance.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Record {
        match self.family {
            TaskFamily::ModAddChain => {
                let n = rng.gen_range(self.min_terms..=self.max_terms);
                let terms: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=self.max_operand)).collect();
                let prompt = format!("{}=", terms.iter().map(u32::to_string).collect::<Vec<_>>().join("+"));
                let mut order = terms.clone();
                order.shuffle(rng);
                let mut acc = order[0];
                let mut steps = Vec::with_capacity(n - 1);
                for &t in &order[1..] {
                    let next = (acc + t) % self.modulus;
                    steps.push(format!("{acc}+{t}={next}"));
                    acc = next;
                }
                let answer = acc.to_string();
                Record {
                    prompt,
                    response: format!("{}{ANSWER_CHAR}{answer}", steps.join(";")),
                    answer,
                }
            }
            TaskFamily::ReverseCopy => {
                let letters: Vec<char> = LETTERS.chars().collect();
                let n = rng.gen_range(self.min_len..=self.max_len);
                let s: String = (0..n).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
                let answer: String = s.chars().rev().collect();
                Record {
                    prompt: format!("{s}{ARROW}"),
                    response: format!("{ANSWER_CHAR}{answer}"),
                    answer,
                }
            }
        }
    }
}

/// The four disjoint splits of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub pretrain: Vec<Record>,
    pub sft: Vec<Record>,
    pub rl: Vec<Record>,
    pub eval: Vec<Record>,
}

impl Splits {
    pub fn named(&self) -> [(&'static str, &[Record]); 4] {
        [
            ("pretrain", &self.pretrain),
            ("sft", &self.sft),
            ("rl_prompts", &self.rl),
            ("eval", &self.eval),
        ]
    }
}

/// Draws `counts.total()` distinct instances and partitions them in order.
pub fn generate_splits(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    let total = spec.counts.total();
    if total as f64 > spec.instance_space() {
        return Err(Error::Generation(format!(
            "{total} distinct instances requested but the family only has {}",
            spec.instance_space()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(total);
    let mut records = Vec::with_capacity(total);
    let max_attempts = 200 * total + 10_000;
    let mut attempts = 0;
    while records.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Generation(format!(
                "only {} of {total} distinct instances found after {max_attempts} draws",
                records.len()
            )));
        }
        let r = spec.draw(&mut rng);
        if seen.insert(r.prompt.clone()) {
            records.push(r);
        }
    }
    let c = spec.counts;
    let mut it = records.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    Ok(Splits {
        pretrain: take(c.pretrain),
        sft: take(c.sft),
        rl: take(c.rl),
        eval: take(c.eval),
    })
}

/// Path and content hash of one written split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub name: String,
    pub path: PathBuf,
    pub count: usize,
    pub sha256: String,
}

fn to_jsonl(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `pretrain.jsonl`, `sft.jsonl`, `rl_prompts.jsonl` and `eval.jsonl`.
pub fn generate_dataset(spec: &TaskSpec, out_dir: &Path) -> Result<Vec<SplitFile>> {
    let splits = generate_splits(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for (name, records) in splits.named() {
        let path = out_dir.join(format!("{name}.jsonl"));
        let bytes = to_jsonl(records)?;
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        files.push(SplitFile {
            name: name.to_string(),
            path,
            count: records.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(files)
}

/// Reads a JSONL split.
pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Tokenizes records, rejecting any sample longer than `context_len` by index.
pub fn to_samples(records: &[Record], vocab: &Vocabulary, context_len: usize) -> Result<Vec<Sample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s = Sample::from_record(r, vocab)?;
            if s.len() > context_len {
                return Err(Error::Input(format!(
                    "sample {i} has {} tokens, more than the context length {context_len}",
                    s.len()
                )));
            }
            Ok(s)
        })
        .collect()
}

/// Reads and tokenizes a JSONL split.
pub fn load_samples(path: &Path, vocab: &Vocabulary, context_len: usize) -> Result<Vec<Sample>> {
    to_samples(&load_records(path)?, vocab, context_len)
}

/// Strips leading zeros from all-digit answers; other strings are unchanged.
pub fn canonical_answer(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_digit()) {
        let t = s.trim_start_matches('0');
        if t.is_empty() {
            "0".into()
        } else {
            t.into()
        }
    } else {
        s.into()
    }
}

/// True iff the text after the last answer mark, up to `EOS` or the end,
/// canonically equals `gold`.
pub fn verify_answer(gold: &str, generated: &[TokenId], vocab: &Vocabulary) -> bool {
    let end = generated.iter().position(|&t| t == EOS).unwrap_or(generated.len());
    let body = &generated[..end];
    let Some(mark) = body.iter().rposition(|&t| t == ANSWER_MARK) else {
        return false;
    };
    let mut answer = String::new();
    for &id in &body[mark + 1..] {
        match vocab.glyph(id) {
            Some(c) => answer.push(c),
            None => return false,
        }
    }
    !answer.is_empty() && canonical_answer(&answer) == canonical_answer(gold)
}

/// Binary reward of a generated response for `sample`.
pub fn verify(sample: &Sample, generated: &[TokenId], vocab: &Vocabulary) -> bool {
    verify_answer(&sample.gold_answer, generated, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(family: TaskFamily, seed: u64) -> TaskSpec {
        TaskSpec {
            family,
            counts: SplitCounts {
                pretrain: 300,
                sft: 40,
                rl: 50,
                eval: 30,
            },
            seed,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::default();
        assert_eq!(v.size(), 32);
        assert_eq!(v.id_of('#'), Some(ANSWER_MARK));
        assert_eq!(v.id_of('0'), Some(4));
        assert_eq!(v.id_of('→'), Some(17));
        let ids: HashSet<_> = GLYPHS.chars().map(|c| v.id_of(c).unwrap()).collect();
        assert_eq!(ids.len(), GLYPHS.chars().count());
    }

    #[test]
    fn tokenize_round_trip_and_errors() {
        let v = Vocabulary::default();
        for s in ["3+7=10;10+2=12#12", "abc→#cba", ""] {
            assert_eq!(v.detokenize(&v.tokenize(s).unwrap()), s);
        }
        assert!(matches!(
            v.tokenize("12x3"),
            Err(Error::Tokenize { ch: 'x', offset: 2 })
        ));
    }

    #[test]
    fn mod_add_scratchpad_is_consistent() {
        let spec = small_spec(TaskFamily::ModAddChain, 3);
        let splits = generate_splits(&spec).unwrap();
        for r in splits.sft.iter().chain(&splits.eval) {
            let terms: Vec<u32> = r
                .prompt
                .trim_end_matches('=')
                .split('+')
                .map(|t| t.parse().unwrap())
                .collect();
            let sum = terms.iter().sum::<u32>() % spec.modulus;
            assert_eq!(r.answer, sum.to_string());
            assert!(r.response.ends_with(&format!("#{sum}")));
        }
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        for family in [TaskFamily::ModAddChain, TaskFamily::ReverseCopy] {
            let a = generate_splits(&small_spec(family, 1)).unwrap();
            assert_eq!(a, generate_splits(&small_spec(family, 1)).unwrap());
            assert_ne!(a, generate_splits(&small_spec(family, 2)).unwrap());
            let mut seen = HashSet::new();
            for (_, records) in a.named() {
                for r in records {
                    assert!(seen.insert(r.prompt.clone()));
                }
            }
        }
    }

    #[test]
    fn infeasible_counts_fail() {
        let spec = TaskSpec {
            min_terms: 2,
            max_terms: 2,
            max_operand: 3,
            ..small_spec(TaskFamily::ModAddChain, 1)
        };
        assert!(matches!(generate_splits(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn expert_responses_verify() {
        let v = Vocabulary::default();
        for family in [TaskFamily::ModAddChain, TaskFamily::ReverseCopy] {
            let splits = generate_splits(&small_spec(family, 4)).unwrap();
            for (_, records) in splits.named() {
                for s in to_samples(records, &v, 128).unwrap() {
                    assert!(verify(&s, &s.response_tokens, &v));
                    assert!(s.full_sequence().iter().all(|&t| (t as usize) < v.size()));
                }
            }
        }
    }

    #[test]
    fn verifier_rules() {
        let v = Vocabulary::default();
        let ids = |s: &str| v.tokenize(s).unwrap();
        assert!(verify_answer("12", &ids("1+2=3#012"), &v));
        assert!(!verify_answer("12", &ids("1+2=12"), &v));
        assert!(verify_answer("12", &ids("#7;#12"), &v));
        assert!(!verify_answer("12", &ids("#12;#7"), &v));
        let mut with_eos = ids("#12");
        with_eos.extend([EOS, ANSWER_MARK, 5]);
        assert!(verify_answer("12", &with_eos, &v));
        assert!(!verify_answer("12", &ids("#"), &v));
        assert!(verify_answer("0", &ids("#00"), &v));
    }

    #[test]
    fn overlong_samples_are_rejected_by_index() {
        let v = Vocabulary::default();
        let r = Record {
            prompt: "abc→".into(),
            response: "#cba".into(),
            answer: "cba".into(),
        };
        let err = to_samples(&[r.clone(), r], &v, 5).unwrap_err();
        assert!(err.to_string().contains("sample 0"));
    }

    #[test]
    fn dataset_files_are_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(TaskFamily::ModAddChain, 9);
        let a = generate_dataset(&spec, &dir.path().join("a")).unwrap();
        let b = generate_dataset(&spec, &dir.path().join("b")).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sha256, y.sha256);
            assert_eq!(fs::read(&x.path).unwrap(), fs::read(&y.path).unwrap());
            assert_eq!(file_hash(&x.path).unwrap(), x.sha256);
        }
        assert_eq!(load_records(&a[1].path).unwrap().len(), 40);
    }
}
