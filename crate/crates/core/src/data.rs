//! Synthetic prompt → response tasks over a fixed symbol table.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const QUESTION: usize = 3;
pub const PLUS: usize = 4;
pub const MOD: usize = 5;
const LETTER_BASE: usize = 6;
pub const N_LETTERS: usize = 26;
const NUMBER_BASE: usize = LETTER_BASE + N_LETTERS;
pub const N_NUMBERS: usize = 32;
/// Size of the shared vocabulary.
pub const VOCAB_SIZE: usize = NUMBER_BASE + N_NUMBERS;

pub fn letter(i: usize) -> usize {
    assert!(i < N_LETTERS);
    LETTER_BASE + i
}

pub fn number(n: usize) -> usize {
    assert!(n < N_NUMBERS);
    NUMBER_BASE + n
}

fn as_letter(tok: usize) -> Option<usize> {
    (LETTER_BASE..NUMBER_BASE).contains(&tok).then(|| tok - LETTER_BASE)
}

fn as_number(tok: usize) -> Option<usize> {
    (NUMBER_BASE..VOCAB_SIZE).contains(&tok).then(|| tok - NUMBER_BASE)
}

/// Fixed symbol table shared by every model.
pub struct Vocab;

impl Vocab {
    pub fn token_str(id: usize) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            QUESTION => "?".into(),
            PLUS => "+".into(),
            MOD => "mod".into(),
            _ => {
                if let Some(l) = as_letter(id) {
                    ((b'a' + l as u8) as char).to_string()
                } else if let Some(n) = as_number(id) {
                    n.to_string()
                } else {
                    format!("<unk:{id}>")
                }
            }
        }
    }

    pub fn token_id(s: &str) -> Option<usize> {
        match s {
            "<pad>" => Some(PAD),
            "<bos>" => Some(BOS),
            "<eos>" => Some(EOS),
            "?" => Some(QUESTION),
            "+" => Some(PLUS),
            "mod" => Some(MOD),
            _ => {
                let b = s.as_bytes();
                if b.len() == 1 && b[0].is_ascii_lowercase() {
                    Some(letter((b[0] - b'a') as usize))
                } else {
                    s.parse::<usize>().ok().filter(|&n| n < N_NUMBERS).map(number)
                }
            }
        }
    }

    /// Whitespace-separated symbols to ids.
    pub fn encode(text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| Vocab::token_id(w).ok_or_else(|| Error::Invalid(format!("unknown symbol {w:?}"))))
            .collect()
    }

    pub fn decode(ids: &[usize]) -> String {
        ids.iter().map(|&i| Vocab::token_str(i)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    PatternCompletion,
    CopyReverse,
    ModularArith,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::PatternCompletion => "pattern_completion",
            TaskFamily::CopyReverse => "copy_reverse",
            TaskFamily::ModularArith => "modular_arith",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pattern_completion" => Ok(TaskFamily::PatternCompletion),
            "copy_reverse" => Ok(TaskFamily::CopyReverse),
            "modular_arith" => Ok(TaskFamily::ModularArith),
            _ => Err(Error::Config(format!(
                "unknown task family {s:?} (expected pattern_completion, copy_reverse, modular_arith)"
            ))),
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
    pub task_family: TaskFamily,
    pub difficulty: u32,
}

impl Example {
    pub fn len(&self) -> usize {
        self.prompt_tokens.len() + self.response_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.prompt_tokens.clone();
        s.extend_from_slice(&self.response_tokens);
        s
    }

    pub fn prompt_text(&self) -> String {
        Vocab::decode(&self.prompt_tokens)
    }

    pub fn response_text(&self) -> String {
        Vocab::decode(&self.response_tokens)
    }
}

/// Generator parameters for one task family.
///
/// `min_len`/`max_len` bound the pattern period (pattern completion), the
/// sequence length (copy/reverse) or the modulus (modular arithmetic).
/// `alphabet_size` is the number of letters in play; it is unused by
/// modular arithmetic, whose operands range over all number tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub alphabet_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub answer_len: usize,
    pub max_seq_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            family: TaskFamily::PatternCompletion,
            alphabet_size: 8,
            min_len: 2,
            max_len: 5,
            answer_len: 2,
            max_seq_len: 32,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("need 0 < min_len <= max_len, got {}..{}", self.min_len, self.max_len));
        }
        match self.family {
            TaskFamily::PatternCompletion | TaskFamily::CopyReverse => {
                if self.alphabet_size < 2 || self.alphabet_size > N_LETTERS {
                    return bad(format!("alphabet_size must be in 2..={N_LETTERS}"));
                }
                if self.family == TaskFamily::PatternCompletion && (self.min_len < 2 || self.answer_len == 0) {
                    return bad("pattern completion needs min_len >= 2 and answer_len >= 1".into());
                }
            }
            TaskFamily::ModularArith => {
                if self.min_len < 2 || self.max_len > N_NUMBERS {
                    return bad(format!("modulus range must lie within 2..={N_NUMBERS}"));
                }
            }
        }
        if self.longest_example() > self.max_seq_len {
            return bad(format!(
                "examples reach {} tokens, above max_seq_len {}",
                self.longest_example(),
                self.max_seq_len
            ));
        }
        Ok(())
    }

    /// Upper bound on prompt + response length.
    pub fn longest_example(&self) -> usize {
        match self.family {
            // bos, shown pattern (< 3p), ?, answer, eos
            TaskFamily::PatternCompletion => 1 + 3 * self.max_len - 1 + 1 + self.answer_len + 1,
            TaskFamily::CopyReverse => 1 + self.max_len + 1 + self.max_len + 1,
            TaskFamily::ModularArith => 7 + 2,
        }
    }

    /// Number of distinct first-answer tokens the generator cycles through.
    fn answer_classes(&self) -> usize {
        match self.family {
            TaskFamily::PatternCompletion | TaskFamily::CopyReverse => self.alphabet_size,
            TaskFamily::ModularArith => self.max_len,
        }
    }

    fn generate_one(&self, rng: &mut ChaCha8Rng, class: usize) -> Example {
        match self.family {
            TaskFamily::PatternCompletion => {
                let p = rng.gen_range(self.min_len..=self.max_len);
                let pattern = loop {
                    let cand: Vec<usize> = (0..p).map(|_| rng.gen_range(0..self.alphabet_size)).collect();
                    if is_primitive(&cand) {
                        break cand;
                    }
                };
                let shown = 2 * p + rng.gen_range(0..p);
                let first_answer = pattern[shown % p];
                // Relabel so the first answer symbol is the requested class.
                let relabel = |s: usize| {
                    if s == first_answer {
                        class
                    } else if s == class {
                        first_answer
                    } else {
                        s
                    }
                };
                let pattern: Vec<usize> = pattern.into_iter().map(relabel).collect();
                let mut prompt = vec![BOS];
                prompt.extend((0..shown).map(|i| letter(pattern[i % p])));
                prompt.push(QUESTION);
                let mut response: Vec<usize> = (shown..shown + self.answer_len).map(|i| letter(pattern[i % p])).collect();
                response.push(EOS);
                Example {
                    prompt_tokens: prompt,
                    response_tokens: response,
                    task_family: self.family,
                    difficulty: p as u32,
                }
            }
            TaskFamily::CopyReverse => {
                let len = rng.gen_range(self.min_len..=self.max_len);
                let mut seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..self.alphabet_size)).collect();
                seq[len - 1] = class;
                let mut prompt = vec![BOS];
                prompt.extend(seq.iter().map(|&s| letter(s)));
                prompt.push(QUESTION);
                let mut response: Vec<usize> = seq.iter().rev().map(|&s| letter(s)).collect();
                response.push(EOS);
                Example {
                    prompt_tokens: prompt,
                    response_tokens: response,
                    task_family: self.family,
                    difficulty: len as u32,
                }
            }
            TaskFamily::ModularArith => {
                let r = class;
                let m = rng.gen_range(self.min_len.max(r + 1)..=self.max_len);
                let a = rng.gen_range(0..N_NUMBERS);
                let base = (r + m - a % m) % m;
                let reps = (N_NUMBERS - 1 - base) / m;
                let b = base + m * rng.gen_range(0..=reps);
                Example {
                    prompt_tokens: vec![BOS, number(a), PLUS, number(b), MOD, number(m), QUESTION],
                    response_tokens: vec![number(r), EOS],
                    task_family: self.family,
                    difficulty: m as u32,
                }
            }
        }
    }
}

fn is_primitive(pattern: &[usize]) -> bool {
    let p = pattern.len();
    (1..p).filter(|q| p % q == 0).all(|q| (0..p).any(|i| pattern[i] != pattern[i % q]))
}

/// Independent rule check of a (prompt, response) pair, recomputing the
/// answer from the prompt alone.
pub fn verify_example(ex: &Example) -> bool {
    let p = &ex.prompt_tokens;
    if p.first() != Some(&BOS) || p.last() != Some(&QUESTION) || ex.response_tokens.last() != Some(&EOS) {
        return false;
    }
    let body = &p[1..p.len() - 1];
    let answer = &ex.response_tokens[..ex.response_tokens.len() - 1];
    match ex.task_family {
        TaskFamily::PatternCompletion => {
            // Smallest period of the shown sequence, then continue it.
            let n = body.len();
            let Some(q) = (1..=n).find(|&q| (q..n).all(|i| body[i] == body[i - q])) else {
                return false;
            };
            if 2 * q > n {
                return false;
            }
            answer.iter().enumerate().all(|(j, &t)| t == body[n - q + (j % q)])
        }
        TaskFamily::CopyReverse => body.iter().rev().eq(answer.iter()),
        TaskFamily::ModularArith => {
            let [a, plus, b, md, m] = body else { return false };
            if *plus != PLUS || *md != MOD {
                return false;
            }
            let (Some(a), Some(b), Some(m)) = (as_number(*a), as_number(*b), as_number(*m)) else {
                return false;
            };
            m > 0 && answer.len() == 1 && as_number(answer[0]) == Some((a + b) % m)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Splits {
    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// Generates `n` unique examples and splits them 80/10/10.
///
/// First-answer symbols cycle through the answer classes so the answer
/// distribution is balanced.
pub fn generate_dataset(spec: &TaskSpec, n: usize, seed: u64) -> Result<Splits> {
    spec.validate()?;
    if n < 30 {
        return Err(Error::Config(format!("dataset size must be at least 30, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = spec.answer_classes();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let budget = 200 * n + 10_000;
    let mut attempts = 0;
    while out.len() < n {
        let class = out.len() % classes;
        let ex = spec.generate_one(&mut rng, class);
        attempts += 1;
        if seen.insert(ex.prompt_tokens.clone()) {
            out.push(ex);
        } else if attempts > budget {
            return Err(Error::Config(format!(
                "alphabet too small for requested uniqueness: only {} distinct prompts found for {n} requested",
                out.len()
            )));
        }
    }
    out.shuffle(&mut rng);
    let n_dev = n / 10;
    let n_test = n / 10;
    let test = out.split_off(n - n_test);
    let dev = out.split_off(n - n_test - n_dev);
    Ok(Splits { train: out, dev, test })
}

/// Writes one JSON record per line.
pub fn save_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex).map_err(|e| Error::Invalid(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_splits(dir: &Path, splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_jsonl(&dir.join("train.jsonl"), &splits.train)?;
    save_jsonl(&dir.join("dev.jsonl"), &splits.dev)?;
    save_jsonl(&dir.join("test.jsonl"), &splits.test)?;
    Ok(())
}

pub fn load_splits(dir: &Path) -> Result<Splits> {
    let load = |name: &str| {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::Invalid(format!("dataset file {} is missing", p.display())));
        }
        load_jsonl(&p)
    };
    Ok(Splits {
        train: load("train.jsonl")?,
        dev: load("dev.jsonl")?,
        test: load("test.jsonl")?,
    })
}

/// Teacher-forced, right-padded batch. Row `b·seq + t` predicts
/// `targets[b·seq + t]` from inputs up to position `t`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// True where the target is a response token.
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let seq = examples.iter().map(|e| e.len() - 1).max().unwrap_or(0);
        let batch = examples.len();
        let mut inputs = vec![PAD; batch * seq];
        let mut targets = vec![PAD; batch * seq];
        let mut mask = vec![false; batch * seq];
        for (b, ex) in examples.iter().enumerate() {
            let full = ex.full_sequence();
            let pl = ex.prompt_tokens.len();
            for t in 0..full.len() - 1 {
                inputs[b * seq + t] = full[t];
                targets[b * seq + t] = full[t + 1];
                mask[b * seq + t] = t + 1 >= pl;
            }
        }
        Ok(Batch {
            batch,
            seq,
            inputs,
            targets,
            mask,
        })
    }
}
