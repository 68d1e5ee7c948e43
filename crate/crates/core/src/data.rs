//! Vocabulary, tokenized scenes, the caption length distribution and the
//! on-disk corpus formats.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const MASK: TokenId = 2;
pub const NUM_SPECIALS: usize = 3;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[MASK]"];

/// Captions are truncated to this many words by default.
pub const DEFAULT_MAX_LEN: usize = 16;

/// Lowercases, strips ASCII punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    high_freq: BTreeSet<TokenId>,
}

impl Vocab {
    /// Builds a vocabulary keeping words seen more than `min_count` times.
    ///
    /// Words are lowercased and captions cut to `max_len` before counting.
    /// Ids after the specials are assigned by descending count, then alphabetically.
    pub fn build(captions: &[Vec<String>], min_count: usize, max_len: usize) -> Result<Self> {
        if captions.iter().all(Vec::is_empty) {
            return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for caption in captions {
            for word in caption.iter().take(max_len) {
                *counts.entry(word.to_lowercase()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c > min_count && !SPECIAL_TOKENS.iter().any(|s| s.eq_ignore_ascii_case(w)))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens, BTreeSet::new()))
    }

    /// Rebuilds a vocabulary from its id-ordered token list (specials first).
    pub fn from_tokens(tokens: Vec<String>, high_freq: BTreeSet<TokenId>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, high_freq }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or(SPECIAL_TOKENS[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.word(i)).collect()
    }

    pub fn decode_string(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }

    /// Ids of ordinary (non-special) tokens.
    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        NUM_SPECIALS..self.tokens.len()
    }

    pub fn high_freq(&self) -> &BTreeSet<TokenId> {
        &self.high_freq
    }

    pub fn set_high_freq(&mut self, set: BTreeSet<TokenId>) {
        self.high_freq = set.into_iter().filter(|&id| id >= NUM_SPECIALS).collect();
    }
}

/// Greedily collects the most frequent ordinary tokens until they cover
/// `coverage` of all token occurrences. Ties go to the lower id.
pub fn high_frequency_set(vocab: &Vocab, corpus: &[Vec<TokenId>], coverage: f64) -> Result<BTreeSet<TokenId>> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::Invalid(format!("coverage {coverage} must lie in (0, 1)")));
    }
    let mut counts = vec![0usize; vocab.len()];
    let mut total = 0usize;
    for seq in corpus {
        for &id in seq {
            if id < counts.len() {
                counts[id] += 1;
            }
            total += 1;
        }
    }
    let mut ranked: Vec<TokenId> = vocab.content_ids().filter(|&id| counts[id] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut set = BTreeSet::new();
    let mut covered = 0usize;
    for id in ranked {
        if total == 0 || covered as f64 / total as f64 >= coverage {
            break;
        }
        covered += counts[id];
        set.insert(id);
    }
    Ok(set)
}

/// A conditioning feature vector with its reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub features: Vec<f64>,
    pub references: Vec<Vec<TokenId>>,
    /// Attribute words the scene was generated from (empty for external data).
    pub attributes: Vec<String>,
}

/// A scene whose captions are still words.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScene {
    pub id: String,
    pub features: Vec<f64>,
    pub captions: Vec<Vec<String>>,
    pub attributes: Vec<String>,
}

impl RawScene {
    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> Scene {
        Scene {
            id: self.id.clone(),
            features: self.features.clone(),
            references: self
                .captions
                .iter()
                .map(|c| vocab.encode(&c[..c.len().min(max_len)]))
                .collect(),
            attributes: self.attributes.clone(),
        }
    }
}

/// Vocabulary plus tokenized scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub scenes: Vec<Scene>,
    pub max_len: usize,
}

impl Corpus {
    /// Builds the vocabulary from `raw` and tokenizes it, deriving the
    /// high-frequency set at `coverage`.
    pub fn build(raw: &[RawScene], min_count: usize, max_len: usize, coverage: f64) -> Result<Self> {
        let captions: Vec<Vec<String>> = raw.iter().flat_map(|s| s.captions.iter().cloned()).collect();
        let mut vocab = Vocab::build(&captions, min_count, max_len)?;
        let scenes: Vec<Scene> = raw.iter().map(|s| s.encode(&vocab, max_len)).collect();
        let refs: Vec<Vec<TokenId>> = scenes.iter().flat_map(|s| s.references.iter().cloned()).collect();
        let hf = high_frequency_set(&vocab, &refs, coverage)?;
        vocab.set_high_freq(hf);
        Ok(Self { vocab, scenes, max_len })
    }

    /// Tokenizes further scenes (e.g. a held-out split) with this vocabulary.
    pub fn encode(&self, raw: &[RawScene]) -> Vec<Scene> {
        raw.iter().map(|s| s.encode(&self.vocab, self.max_len)).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.features.len())
    }
}

/// Empirical distribution of reference lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthDistribution {
    /// `counts[len]` for `len` in `0..=max_len`; index 0 is always zero.
    counts: Vec<u64>,
    cumulative: Vec<f64>,
}

impl LengthDistribution {
    pub fn from_scenes(scenes: &[Scene]) -> Result<Self> {
        let lengths = scenes.iter().flat_map(|s| s.references.iter().map(Vec::len));
        Self::from_lengths(lengths)
    }

    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut counts = Vec::new();
        for len in lengths.into_iter().filter(|&l| l > 0) {
            if counts.len() <= len {
                counts.resize(len + 1, 0);
            }
            counts[len] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().skip(1).sum();
        if total == 0 {
            return Err(Error::Invalid("length distribution over no references".into()));
        }
        let mut counts = counts;
        counts[0] = 0;
        let mut acc = 0u64;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / total as f64
            })
            .collect();
        Ok(Self { counts, cumulative })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn max_len(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn probability(&self, len: usize) -> f64 {
        let total: u64 = self.counts.iter().sum();
        self.counts.get(len).map_or(0.0, |&c| c as f64 / total as f64)
    }

    /// Most frequent length; ties go to the shorter length.
    pub fn mode(&self) -> usize {
        let mut best = 1;
        for (len, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = len;
            }
        }
        best
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let idx = self.cumulative.partition_point(|&c| c <= u);
        // guard against u landing at the very top of the table
        idx.min(self.max_len()).max(1)
    }
}

// ---------------------------------------------------------------------------
// File formats

const FEATURE_MAGIC: &str = "FEAT";

/// Writes `FEAT 1 <n> <d>\n` followed by little-endian `f32` rows.
pub fn write_features(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let d = rows.first().map_or(0, Vec::len);
    let mut bytes = format!("{FEATURE_MAGIC} 1 {} {d}\n", rows.len()).into_bytes();
    for row in rows {
        if row.len() != d {
            return Err(Error::Invalid("ragged feature rows".into()));
        }
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(path, &bytes)
}

pub fn parse_features(path: &Path, bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "header", "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::format(path, "header", "header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != FEATURE_MAGIC || fields[1] != "1" {
        return Err(Error::format(path, "header", format!("expected `FEAT 1 <n> <d>`, got `{header}`")));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, "header", format!("bad {what} `{s}`")))
    };
    let (n, d) = (parse(fields[2], "row count")?, parse(fields[3], "dimension")?);
    let body = &bytes[nl + 1..];
    if body.len() != n * d * 4 {
        return Err(Error::format(
            path,
            "body",
            format!("header declares {n}x{d} values but body holds {} bytes", body.len()),
        ));
    }
    let mut rows = Vec::with_capacity(n);
    for r in 0..n {
        let mut row = Vec::with_capacity(d);
        for c in 0..d {
            let off = (r * d + c) * 4;
            let v = f32::from_le_bytes(body[off..off + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::format(path, format!("row {r}, column {c}"), "non-finite feature"));
            }
            row.push(v as f64);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reads `<scene_id>\t<text>` records; blank lines are skipped.
pub fn parse_tsv(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {}", i + 1), "expected `<scene_id>\\t<text>`"))?;
        out.push((id.to_string(), rest.to_string()));
    }
    Ok(out)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Joins a feature file with a captions file (and optional attribute file).
///
/// Scene ids are zero-based feature row indices written in decimal.
pub fn load_external(features_path: &Path, captions_path: &Path, attributes_path: Option<&Path>) -> Result<Vec<RawScene>> {
    let features = read_features(features_path)?;
    let mut scenes: Vec<RawScene> = features
        .into_iter()
        .enumerate()
        .map(|(i, features)| RawScene {
            id: i.to_string(),
            features,
            captions: Vec::new(),
            attributes: Vec::new(),
        })
        .collect();
    let lookup = |path: &Path, line: usize, id: &str, n: usize| -> Result<usize> {
        id.parse::<usize>()
            .ok()
            .filter(|&i| i < n && i.to_string() == id)
            .ok_or_else(|| Error::format(path, format!("line {line}"), format!("unknown scene_id `{id}`")))
    };
    let text = read_to_string(captions_path)?;
    for (line, (id, caption)) in parse_tsv(captions_path, &text)?.into_iter().enumerate() {
        let idx = lookup(captions_path, line + 1, &id, scenes.len())?;
        let words = tokenize(&caption);
        if words.is_empty() {
            return Err(Error::format(captions_path, format!("line {}", line + 1), "empty caption"));
        }
        scenes[idx].captions.push(words);
    }
    if let Some(path) = attributes_path {
        let text = read_to_string(path)?;
        for (line, (id, words)) in parse_tsv(path, &text)?.into_iter().enumerate() {
            let idx = lookup(path, line + 1, &id, scenes.len())?;
            scenes[idx].attributes = words.split_whitespace().map(str::to_string).collect();
        }
    }
    if let Some(s) = scenes.iter().find(|s| s.captions.is_empty()) {
        return Err(Error::format(captions_path, "join", format!("scene_id `{}` has no captions", s.id)));
    }
    Ok(scenes)
}

/// Writes scenes in the format read by [`load_external`]; ids are replaced by row indices.
pub fn write_external(dir: &Path, stem: &str, scenes: &[RawScene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<Vec<f64>> = scenes.iter().map(|s| s.features.clone()).collect();
    write_features(&dir.join(format!("{stem}.feat")), &rows)?;
    let mut captions = Vec::new();
    let mut attributes = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        for c in &s.captions {
            writeln!(captions, "{i}\t{}", c.join(" ")).expect("write to Vec");
        }
        writeln!(attributes, "{i}\t{}", s.attributes.join(" ")).expect("write to Vec");
    }
    let cap_path = dir.join(format!("{stem}.captions.tsv"));
    fs::write(&cap_path, captions).map_err(|e| Error::io(&cap_path, e))?;
    let attr_path = dir.join(format!("{stem}.attributes.tsv"));
    fs::write(&attr_path, attributes).map_err(|e| Error::io(&attr_path, e))
}

/// Loads `<stem>.feat`, `<stem>.captions.tsv` and, when present, `<stem>.attributes.tsv`.
pub fn read_external(dir: &Path, stem: &str) -> Result<Vec<RawScene>> {
    let attr = dir.join(format!("{stem}.attributes.tsv"));
    load_external(
        &dir.join(format!("{stem}.feat")),
        &dir.join(format!("{stem}.captions.tsv")),
        attr.exists().then_some(attr.as_path()),
    )
}
