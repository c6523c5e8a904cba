// SPDX-License-Identifier: MIT OR Apache-2.0

//! Clean/corrupted prompt pairs over a role-tagged synthetic vocabulary.
//!
//! Two template families are provided. The IOI-like template puts an
//! indirect object `A` and a repeated subject `B` in context and asks for
//! `A`; its corruption swaps `A` for an unrelated third name. The
//! docstring-like template lists argument names in a signature, repeats the
//! first ones in a docstring, and asks for the next; its corruption renames
//! the signature arguments.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{PieError, Result};
use crate::model::TokenId;

/// Number of reserved template tokens at the start of the vocabulary.
const KEYWORDS: usize = 13;

/// Template roles of the reserved tokens, in id order after BOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keyword {
    When,
    And,
    Went,
    To,
    Comma,
    Gave,
    Def,
    LParen,
    RParen,
    Colon,
    Doc,
    Param,
}

const KEYWORD_ORDER: [Keyword; KEYWORDS - 1] = [
    Keyword::When,
    Keyword::And,
    Keyword::Went,
    Keyword::To,
    Keyword::Comma,
    Keyword::Gave,
    Keyword::Def,
    Keyword::LParen,
    Keyword::RParen,
    Keyword::Colon,
    Keyword::Doc,
    Keyword::Param,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Bos,
    Keyword(Keyword),
    Name,
    Object,
    Unused,
}

/// Role assignment for token ids `0..size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub bos: TokenId,
    /// Indexed like [`KEYWORD_ORDER`].
    pub keywords: Vec<TokenId>,
    pub names: Vec<TokenId>,
    pub objects: Vec<TokenId>,
}

impl Vocabulary {
    /// Token 0 is BOS, the next twelve ids are template keywords, and the
    /// rest is split two to one between names and objects.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < KEYWORDS + 2 {
            return Err(PieError::Generation(format!(
                "vocabulary of {size} tokens leaves no room for names and objects (need > {})",
                KEYWORDS + 1
            )));
        }
        let free = size - KEYWORDS;
        let n_names = ((2 * free) as f64 / 3.0).ceil() as usize;
        let n_names = n_names.min(free - 1);
        let first_name = KEYWORDS as TokenId;
        let first_object = first_name + n_names as TokenId;
        Ok(Self {
            size,
            bos: 0,
            keywords: (1..KEYWORDS as TokenId).collect(),
            names: (first_name..first_object).collect(),
            objects: (first_object..size as TokenId).collect(),
        })
    }

    pub fn keyword(&self, kw: Keyword) -> TokenId {
        let idx = KEYWORD_ORDER.iter().position(|k| *k == kw).expect("listed keyword");
        self.keywords[idx]
    }

    pub fn role(&self, token: TokenId) -> Role {
        if token == self.bos {
            Role::Bos
        } else if let Some(i) = self.keywords.iter().position(|&k| k == token) {
            Role::Keyword(KEYWORD_ORDER[i])
        } else if self.names.contains(&token) {
            Role::Name
        } else if self.objects.contains(&token) {
            Role::Object
        } else {
            Role::Unused
        }
    }

    fn check(&self) -> Result<()> {
        if self.keywords.len() != KEYWORDS - 1 {
            return Err(PieError::Generation(format!(
                "vocabulary must define {} keywords",
                KEYWORDS - 1
            )));
        }
        let all = std::iter::once(self.bos)
            .chain(self.keywords.iter().copied())
            .chain(self.names.iter().copied())
            .chain(self.objects.iter().copied());
        let mut seen = HashSet::new();
        for tok in all {
            if tok as usize >= self.size {
                return Err(PieError::Generation(format!("token {tok} outside vocabulary")));
            }
            if !seen.insert(tok) {
                return Err(PieError::Generation(format!("token {tok} has two roles")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    IoiLike,
    DocstringLike,
    Custom,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::IoiLike => "ioi_like",
            Self::DocstringLike => "docstring_like",
            Self::Custom => "custom",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ioi_like" | "ioi" => Ok(Self::IoiLike),
            "docstring_like" | "docstring" => Ok(Self::DocstringLike),
            "custom" => Ok(Self::Custom),
            other => Err(PieError::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Position-aligned clean/corrupted inputs with the answer pair that the
/// logit-difference metric reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub id: String,
    pub clean: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
    pub target: TokenId,
    pub distractor: TokenId,
    pub task: TaskKind,
}

impl PromptPair {
    pub fn new(
        id: impl Into<String>,
        clean: Vec<TokenId>,
        corrupted: Vec<TokenId>,
        target: TokenId,
        distractor: TokenId,
        task: TaskKind,
    ) -> Result<Self> {
        let pair = Self {
            id: id.into(),
            clean,
            corrupted,
            target,
            distractor,
            task,
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Checks the pair invariants, reporting the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.clean.is_empty() {
            return Err(PieError::parse(&self.id, "clean", "empty token sequence"));
        }
        if self.clean.len() != self.corrupted.len() {
            return Err(PieError::parse(
                &self.id,
                "corrupted",
                format!(
                    "length {} differs from clean length {}",
                    self.corrupted.len(),
                    self.clean.len()
                ),
            ));
        }
        if self.target == self.distractor {
            return Err(PieError::parse(&self.id, "distractor", "equals target"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn answer(&self) -> (TokenId, TokenId) {
        (self.target, self.distractor)
    }

    /// Largest token id used anywhere in the pair.
    pub fn max_token(&self) -> TokenId {
        self.clean
            .iter()
            .chain(&self.corrupted)
            .chain([&self.target, &self.distractor])
            .copied()
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub pairs: Vec<PromptPair>,
    pub meta: DatasetMeta,
}

impl TaskDataset {
    /// Builds a dataset, rejecting invalid pairs and duplicate ids.
    pub fn new(pairs: Vec<PromptPair>, meta: DatasetMeta) -> Result<Self> {
        let mut ids = HashSet::new();
        for pair in &pairs {
            pair.validate()?;
            if !ids.insert(pair.id.as_str()) {
                return Err(PieError::parse(&pair.id, "id", "duplicate id"));
            }
        }
        Ok(Self { pairs, meta })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PromptPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    /// The first `n` pairs.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            pairs: self.pairs.iter().take(n).cloned().collect(),
            meta: self.meta.clone(),
        }
    }

    /// Fails if any token falls outside a vocabulary of `vocab_size`.
    pub fn check_vocabulary(&self, vocab_size: usize) -> Result<()> {
        for pair in &self.pairs {
            if pair.max_token() as usize >= vocab_size {
                return Err(PieError::parse(
                    &pair.id,
                    "clean",
                    format!("token {} outside vocabulary of size {vocab_size}", pair.max_token()),
                ));
            }
        }
        Ok(())
    }

    /// Writes a leading `{"meta": ...}` line followed by one pair per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut out, &serde_json::json!({ "meta": self.meta }))?;
        out.write_all(b"\n")?;
        for pair in &self.pairs {
            serde_json::to_writer(&mut out, pair)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut meta = DatasetMeta::default();
        let mut pairs = Vec::new();
        let mut ids = HashSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let loc = format!("line {}", idx + 1);
            let value: Value = serde_json::from_str(&line)
                .map_err(|e| PieError::parse(&loc, "<record>", e.to_string()))?;
            if let Some(m) = value.get("meta") {
                if !pairs.is_empty() {
                    return Err(PieError::parse(&loc, "meta", "meta record must come first"));
                }
                meta = serde_json::from_value(m.clone())
                    .map_err(|e| PieError::parse(&loc, "meta", e.to_string()))?;
                continue;
            }
            let pair = parse_pair(&value, &loc)?;
            if !ids.insert(pair.id.clone()) {
                return Err(PieError::parse(&pair.id, "id", "duplicate id"));
            }
            pairs.push(pair);
        }
        Ok(Self { pairs, meta })
    }
}

fn parse_pair(value: &Value, line: &str) -> Result<PromptPair> {
    let id = value
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| PieError::parse(line, "id", "missing or not a string"))?
        .to_string();
    let tokens = |field: &str| -> Result<Vec<TokenId>> {
        let arr = value
            .get(field)
            .and_then(Value::as_array)
            .ok_or_else(|| PieError::parse(&id, field, "missing or not an array"))?;
        arr.iter()
            .map(|v| {
                v.as_u64()
                    .and_then(|t| TokenId::try_from(t).ok())
                    .ok_or_else(|| PieError::parse(&id, field, format!("`{v}` is not a token id")))
            })
            .collect()
    };
    let token = |field: &str| -> Result<TokenId> {
        value
            .get(field)
            .and_then(Value::as_u64)
            .and_then(|t| TokenId::try_from(t).ok())
            .ok_or_else(|| PieError::parse(&id, field, "missing or not a token id"))
    };
    let task = match value.get("task") {
        None => TaskKind::Custom,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| PieError::parse(&id, "task", format!("unknown task {v}")))?,
    };
    let pair = PromptPair {
        clean: tokens("clean")?,
        corrupted: tokens("corrupted")?,
        target: token("target")?,
        distractor: token("distractor")?,
        task,
        id,
    };
    pair.validate()?;
    Ok(pair)
}

fn distinct(rng: &mut ChaCha8Rng, pool: &[TokenId], n: usize, what: &str) -> Result<Vec<TokenId>> {
    if pool.len() < n {
        return Err(PieError::Generation(format!(
            "need {n} distinct {what}, vocabulary has {}",
            pool.len()
        )));
    }
    Ok(pool.choose_multiple(rng, n).copied().collect())
}

/// IOI-like pairs: `BOS when A and B went to O , B gave O2 to` -> `A`.
/// The corrupted prompt replaces `A` with a third name `C`.
pub fn generate_ioi_like(n: usize, seed: u64, vocab: &Vocabulary) -> Result<TaskDataset> {
    if n == 0 {
        return Err(PieError::Generation("n must be at least 1".into()));
    }
    vocab.check()?;
    if vocab.objects.is_empty() {
        return Err(PieError::Generation("IOI template needs at least one object".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kw = |k| vocab.keyword(k);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let names = distinct(&mut rng, &vocab.names, 3, "names")?;
        let (a, b, c) = (names[0], names[1], names[2]);
        let obj = *vocab.objects.choose(&mut rng).expect("non-empty");
        let obj2 = *vocab.objects.choose(&mut rng).expect("non-empty");
        let build = |io: TokenId| {
            vec![
                vocab.bos,
                kw(Keyword::When),
                io,
                kw(Keyword::And),
                b,
                kw(Keyword::Went),
                kw(Keyword::To),
                obj,
                kw(Keyword::Comma),
                b,
                kw(Keyword::Gave),
                obj2,
                kw(Keyword::To),
            ]
        };
        pairs.push(PromptPair::new(
            format!("ioi-{seed}-{i:04}"),
            build(a),
            build(c),
            a,
            b,
            TaskKind::IoiLike,
        )?);
    }
    TaskDataset::new(
        pairs,
        DatasetMeta {
            vocabulary: Some(vocab.clone()),
            provenance: format!("generated ioi_like n={n} seed={seed}"),
        },
    )
}

/// Docstring-like pairs:
/// `BOS def ( a1 , a2 , a3 ) : doc param a1 param a2 param` -> `a3`.
/// The corrupted prompt renames the three signature arguments to fresh
/// names; the distractor is the replacement of `a3`.
pub fn generate_docstring_like(n: usize, seed: u64, vocab: &Vocabulary) -> Result<TaskDataset> {
    if n == 0 {
        return Err(PieError::Generation("n must be at least 1".into()));
    }
    vocab.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kw = |k| vocab.keyword(k);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let mut names = distinct(&mut rng, &vocab.names, 6, "names")?;
        names.shuffle(&mut rng);
        let (args, fresh) = names.split_at(3);
        let build = |sig: &[TokenId]| {
            vec![
                vocab.bos,
                kw(Keyword::Def),
                kw(Keyword::LParen),
                sig[0],
                kw(Keyword::Comma),
                sig[1],
                kw(Keyword::Comma),
                sig[2],
                kw(Keyword::RParen),
                kw(Keyword::Colon),
                kw(Keyword::Doc),
                kw(Keyword::Param),
                args[0],
                kw(Keyword::Param),
                args[1],
                kw(Keyword::Param),
            ]
        };
        pairs.push(PromptPair::new(
            format!("doc-{seed}-{i:04}"),
            build(args),
            build(fresh),
            args[2],
            fresh[2],
            TaskKind::DocstringLike,
        )?);
    }
    TaskDataset::new(
        pairs,
        DatasetMeta {
            vocabulary: Some(vocab.clone()),
            provenance: format!("generated docstring_like n={n} seed={seed}"),
        },
    )
}

/// Dispatches on the task kind; `custom` has no generator.
pub fn generate(task: TaskKind, n: usize, seed: u64, vocab: &Vocabulary) -> Result<TaskDataset> {
    match task {
        TaskKind::IoiLike => generate_ioi_like(n, seed, vocab),
        TaskKind::DocstringLike => generate_docstring_like(n, seed, vocab),
        TaskKind::Custom => Err(PieError::Config("custom tasks must be loaded from a file".into())),
    }
}

/// Random background sequences for exemplar mining: `BOS` followed by
/// uniformly drawn non-BOS tokens.
pub fn random_corpus(vocab_size: usize, count: usize, len: usize, seed: u64) -> Vec<Vec<TokenId>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            std::iter::once(0)
                .chain((1..len).map(|_| rng.random_range(1..vocab_size as TokenId)))
                .collect()
        })
        .collect()
}

/// Occurrence counts of each task kind, in a stable order.
pub fn task_counts(dataset: &TaskDataset) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for p in &dataset.pairs {
        *out.entry(p.task.to_string()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_vocabulary_layout() {
        let v = Vocabulary::synthetic(64).unwrap();
        assert_eq!(v.role(0), Role::Bos);
        assert_eq!(v.role(v.keyword(Keyword::Gave)), Role::Keyword(Keyword::Gave));
        assert_eq!(v.names.len() + v.objects.len(), 64 - KEYWORDS);
        assert_eq!(v.role(v.names[0]), Role::Name);
        assert_eq!(v.role(v.objects[0]), Role::Object);
        assert!(Vocabulary::synthetic(10).is_err());
    }

    #[test]
    fn too_few_names_is_a_generation_error() {
        let mut v = Vocabulary::synthetic(20).unwrap();
        v.names.truncate(2);
        assert!(matches!(generate_ioi_like(1, 0, &v), Err(PieError::Generation(_))));
        v.names.truncate(0);
        assert!(matches!(generate_docstring_like(1, 0, &v), Err(PieError::Generation(_))));
    }

    #[test]
    fn ioi_corruption_only_touches_the_indirect_object() {
        let v = Vocabulary::synthetic(64).unwrap();
        let ds = generate_ioi_like(5, 2, &v).unwrap();
        for p in &ds.pairs {
            let diff: Vec<usize> = (0..p.len()).filter(|&i| p.clean[i] != p.corrupted[i]).collect();
            assert_eq!(diff, vec![2]);
            assert_eq!(p.clean[2], p.target);
            assert_eq!(p.clean[4], p.distractor);
        }
    }

    #[test]
    fn docstring_corruption_renames_the_signature() {
        let v = Vocabulary::synthetic(64).unwrap();
        let ds = generate_docstring_like(5, 2, &v).unwrap();
        for p in &ds.pairs {
            let diff: Vec<usize> = (0..p.len()).filter(|&i| p.clean[i] != p.corrupted[i]).collect();
            assert_eq!(diff, vec![3, 5, 7]);
            assert_eq!(p.clean[7], p.target);
            assert_eq!(p.corrupted[7], p.distractor);
        }
    }
}
