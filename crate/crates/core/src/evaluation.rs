//! Corpus BLEU, CIDEr, diversity percentages, content-word recall and the
//! single-sentence latency benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use crate::data::{Scene, TokenId, Vocab};
use crate::decoding::{decode_ar, decode_mnic, decode_na};
use crate::error::{Error, Result};
use crate::masking::RatioSet;
use crate::model::CaptionModel;

pub const MAX_N: usize = 4;

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_pairs<T>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Invalid("every candidate needs at least one reference".into()));
    }
    Ok(())
}

/// Corpus BLEU-1..4: clipped counts summed over the corpus, brevity penalty
/// against the closest reference length (shorter on ties), no smoothing.
pub fn bleu<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<[f64; MAX_N]> {
    check_pairs(candidates, references)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("nonempty reference set");
        for n in 1..=MAX_N {
            let counts = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
            matched[n - 1] += counts.iter().map(|(g, &c)| c.min(*max_ref.get(g).unwrap_or(&0))).sum::<usize>();
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut out = [0.0; MAX_N];
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        if matched[n] == 0 || total[n] == 0 {
            // a zero precision zeroes this and every higher order
            break;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        out[n] = bp * (log_sum / (n + 1) as f64).exp();
    }
    Ok(out)
}

struct TfIdf<'a, T> {
    vecs: Vec<BTreeMap<&'a [T], f64>>,
    norms: Vec<f64>,
}

fn tfidf<'a, T: Ord + Clone>(tokens: &'a [T], df: &BTreeMap<&'a [T], usize>, log_n: f64) -> TfIdf<'a, T> {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let v: BTreeMap<&[T], f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g, tf as f64 * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf { vecs, norms }
}

/// Per-scene CIDEr (TF-IDF n-gram cosine, n = 1..4, ×10), document
/// frequencies taken over the reference sets of this corpus.
pub fn cider_scores<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<Vec<f64>> {
    check_pairs(candidates, references)?;
    if references.len() < 2 {
        return Err(Error::Invalid("CIDEr needs at least two scenes for document frequencies".into()));
    }
    let mut df: BTreeMap<&[T], usize> = BTreeMap::new();
    for refs in references {
        let mut grams: BTreeSet<&[T]> = BTreeSet::new();
        for r in refs {
            for n in 1..=MAX_N {
                if r.len() >= n {
                    grams.extend(r.windows(n));
                }
            }
        }
        for g in grams {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (references.len() as f64).ln();
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            let c = tfidf(cand, &df, log_n);
            let mut total = 0.0;
            for r in refs {
                let rv = tfidf(r, &df, log_n);
                for n in 0..MAX_N {
                    if c.norms[n] == 0.0 || rv.norms[n] == 0.0 {
                        continue;
                    }
                    let dot: f64 = c.vecs[n].iter().map(|(g, x)| x * rv.vecs[n].get(g).unwrap_or(&0.0)).sum();
                    total += dot / (c.norms[n] * rv.norms[n]);
                }
            }
            10.0 * total / (MAX_N * refs.len()) as f64
        })
        .collect())
}

/// Corpus CIDEr: the mean of [`cider_scores`].
pub fn cider<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    let scores = cider_scores(candidates, references)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diversity {
    pub novel_pct: f64,
    pub unique_pct: f64,
    pub vocab_usage_pct: f64,
}

/// Novel: not an exact training caption. Unique: occurs once among the
/// candidates. Vocabulary usage: share of non-special types used at least once.
pub fn diversity(candidates: &[Vec<TokenId>], training: &[Vec<TokenId>], vocab: &Vocab) -> Diversity {
    if candidates.is_empty() {
        return Diversity { novel_pct: 0.0, unique_pct: 0.0, vocab_usage_pct: 0.0 };
    }
    let seen: BTreeSet<&[TokenId]> = training.iter().map(Vec::as_slice).collect();
    let mut occurrences: BTreeMap<&[TokenId], usize> = BTreeMap::new();
    for c in candidates {
        *occurrences.entry(c.as_slice()).or_insert(0) += 1;
    }
    let n = candidates.len() as f64;
    let novel = candidates.iter().filter(|c| !seen.contains(c.as_slice())).count() as f64;
    let unique = candidates.iter().filter(|c| occurrences[c.as_slice()] == 1).count() as f64;
    let content = vocab.content_ids();
    let used: BTreeSet<TokenId> = candidates.iter().flatten().copied().filter(|id| content.contains(id)).collect();
    let types = content.len();
    Diversity {
        novel_pct: 100.0 * novel / n,
        unique_pct: 100.0 * unique / n,
        vocab_usage_pct: if types == 0 { 0.0 } else { 100.0 * used.len() as f64 / types as f64 },
    }
}

/// Mean fraction of each scene's attribute words present in its caption.
/// `None` when no scene carries attributes.
pub fn content_word_recall<S: AsRef<str>>(captions: &[Vec<S>], attributes: &[Vec<String>]) -> Option<f64> {
    let mut total = 0.0;
    let mut scenes = 0usize;
    for (cap, attrs) in captions.iter().zip(attributes) {
        if attrs.is_empty() {
            continue;
        }
        let words: BTreeSet<&str> = cap.iter().map(AsRef::as_ref).collect();
        total += attrs.iter().filter(|a| words.contains(a.as_str())).count() as f64 / attrs.len() as f64;
        scenes += 1;
    }
    (scenes > 0).then(|| total / scenes as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub scenes: usize,
    pub bleu: [f64; MAX_N],
    pub cider: f64,
    pub novel_pct: f64,
    pub unique_pct: f64,
    pub vocab_usage_pct: f64,
    /// Content-word recall as a percentage, when attributes are known.
    pub recall_pct: Option<f64>,
    pub mean_passes: f64,
}

impl MetricsReport {
    pub fn compute(
        candidates: &[Vec<TokenId>],
        scenes: &[Scene],
        training: &[Vec<TokenId>],
        vocab: &Vocab,
        passes: &[usize],
    ) -> Result<Self> {
        let refs: Vec<Vec<Vec<TokenId>>> = scenes.iter().map(|s| s.references.clone()).collect();
        let div = diversity(candidates, training, vocab);
        let words: Vec<Vec<&str>> = candidates.iter().map(|c| vocab.decode(c)).collect();
        let attrs: Vec<Vec<String>> = scenes.iter().map(|s| s.attributes.clone()).collect();
        Ok(Self {
            scenes: scenes.len(),
            bleu: bleu(candidates, &refs)?,
            cider: cider(candidates, &refs)?,
            novel_pct: div.novel_pct,
            unique_pct: div.unique_pct,
            vocab_usage_pct: div.vocab_usage_pct,
            recall_pct: content_word_recall(&words, &attrs).map(|r| 100.0 * r),
            mean_passes: if passes.is_empty() { 0.0 } else { passes.iter().sum::<usize>() as f64 / passes.len() as f64 },
        })
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:.6}");
        vec![
            ("scenes", self.scenes.to_string()),
            ("bleu1", f(self.bleu[0])),
            ("bleu2", f(self.bleu[1])),
            ("bleu3", f(self.bleu[2])),
            ("bleu4", f(self.bleu[3])),
            ("cider", f(self.cider)),
            ("novel_pct", f(self.novel_pct)),
            ("unique_pct", f(self.unique_pct)),
            ("vocab_usage_pct", f(self.vocab_usage_pct)),
            ("recall_pct", self.recall_pct.map(f).unwrap_or_else(|| "na".into())),
            ("mean_passes", f(self.mean_passes)),
        ]
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn csv_header() -> String {
        Self::fields(&Self::empty()).into_iter().map(|(k, _)| k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.fields().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }

    fn empty() -> Self {
        Self {
            scenes: 0,
            bleu: [0.0; MAX_N],
            cider: 0.0,
            novel_pct: 0.0,
            unique_pct: 0.0,
            vocab_usage_pct: 0.0,
            recall_pct: None,
            mean_passes: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMethod {
    Ar,
    Na,
    Mnic { rounds: usize },
}

impl BenchMethod {
    pub fn label(&self) -> String {
        match self {
            BenchMethod::Ar => "ar".into(),
            BenchMethod::Na => "na".into(),
            BenchMethod::Mnic { rounds } => format!("mnic-{rounds}r"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub passes: usize,
    pub speedup: f64,
}

pub struct BenchSetup<'a> {
    pub scenes: &'a [Scene],
    /// Caption length every method emits.
    pub length: usize,
    pub ratios: &'a RatioSet,
    pub high_freq: &'a BTreeSet<TokenId>,
    pub repetitions: usize,
    /// Untimed decodes before measuring each method.
    pub warmup: usize,
}

/// Decodes each scene one sentence at a time and times it. Speedup is
/// relative to the `ar` row when present, otherwise to the first row.
pub fn benchmark(methods: &[(BenchMethod, &CaptionModel)], setup: &BenchSetup<'_>) -> Result<Vec<BenchRow>> {
    if setup.scenes.is_empty() || setup.repetitions == 0 {
        return Err(Error::Invalid("benchmark needs scenes and at least one repetition".into()));
    }
    let mut rows = Vec::with_capacity(methods.len());
    for &(method, model) in methods {
        let run = |scene: &Scene| -> Result<usize> {
            let memory = model.encode_features(&scene.features)?;
            Ok(match method {
                BenchMethod::Ar => decode_ar(model, &memory, setup.length, false)?.passes,
                BenchMethod::Na => decode_na(model, &memory, setup.length)?.passes,
                BenchMethod::Mnic { rounds } => {
                    decode_mnic(model, &memory, setup.length, setup.ratios, rounds, setup.high_freq)?.passes
                }
            })
        };
        for scene in setup.scenes.iter().cycle().take(setup.warmup) {
            run(scene)?;
        }
        let mut times = Vec::with_capacity(setup.scenes.len() * setup.repetitions);
        let mut passes = BTreeSet::new();
        for _ in 0..setup.repetitions {
            for scene in setup.scenes {
                let start = Instant::now();
                let p = run(scene)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                passes.insert(p);
            }
        }
        if passes.len() != 1 {
            return Err(Error::Invalid(format!("{} produced varying pass counts {passes:?}", method.label())));
        }
        times.sort_by(f64::total_cmp);
        let mid = times.len() / 2;
        let median = if times.len() % 2 == 0 { (times[mid - 1] + times[mid]) / 2.0 } else { times[mid] };
        rows.push(BenchRow {
            method: method.label(),
            mean_ms: times.iter().sum::<f64>() / times.len() as f64,
            median_ms: median,
            passes: *passes.first().expect("one value"),
            speedup: 0.0,
        });
    }
    let base = rows.iter().find(|r| r.method == "ar").or(rows.first()).map(|r| r.mean_ms).unwrap_or(1.0);
    for r in &mut rows {
        r.speedup = base / r.mean_ms;
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,mean_ms,median_ms,passes,speedup\n");
    for r in rows {
        out.push_str(&format!("{},{:.4},{:.4},{},{:.2}\n", r.method, r.mean_ms, r.median_ms, r.passes, r.speedup));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_examples() {
        let c = vec![toks("a dog runs on the grass")];
        let r = vec![vec![toks("a dog runs on the grass")]];
        assert_eq!(bleu(&c, &r).unwrap(), [1.0; 4]);
        let b = bleu(&[toks("x y")], &[vec![toks("a b")]]).unwrap();
        assert_eq!(b[0], 0.0);
        let b = bleu(&[toks("a b c")], &[vec![toks("a b d")]]).unwrap();
        assert!((b[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((b[1] - (2.0f64 / 3.0 * 0.5).sqrt()).abs() < 1e-15);
        assert_eq!(b[2], 0.0);
        assert!(bleu(&[toks("a")], &[]).is_err());
        let empty: Vec<String> = vec![];
        assert_eq!(bleu(&[empty], &[vec![toks("a b")]]).unwrap(), [0.0; 4]);
    }

    #[test]
    fn cider_examples() {
        let refs = vec![vec![toks("two ducks swim in the lake")], vec![toks("a cat sleeps on a red sofa")]];
        let same = vec![toks("two ducks swim in the lake"), toks("a cat sleeps on a red sofa")];
        let s = cider_scores(&same, &refs).unwrap();
        assert!((s[0] - 10.0).abs() < 1e-12 && (s[1] - 10.0).abs() < 1e-12);
        let s = cider_scores(&[toks("zebra"), toks("a cat")], &refs).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(cider(&[toks("a")], &[vec![toks("a")]]).is_err());
    }

    #[test]
    fn diversity_examples() {
        let words: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        let v = Vocab::build(&[words], 0, 100).unwrap();
        let train = vec![vec![3, 4], vec![5, 6]];
        let d = diversity(&train, &train, &v);
        assert_eq!((d.novel_pct, d.unique_pct), (0.0, 100.0));
        assert!((d.vocab_usage_pct - 400.0 / 6.0).abs() < 1e-12);
        let d = diversity(&[vec![7], vec![7]], &train, &v);
        assert_eq!((d.novel_pct, d.unique_pct), (100.0, 0.0));
    }

    #[test]
    fn recall() {
        let caps = vec![toks("two red dogs on grass"), toks("a cat")];
        let attrs = vec![toks("two red dogs running grass"), toks("cat")];
        assert!((content_word_recall(&caps, &attrs).unwrap() - (0.8 + 1.0) / 2.0).abs() < 1e-15);
        assert_eq!(content_word_recall(&caps, &[vec![], vec![]]), None);
    }

    #[test]
    fn report_formats() {
        let r = MetricsReport { recall_pct: Some(50.0), ..MetricsReport::empty() };
        assert!(r.to_kv().contains("recall_pct=50.000000\n"));
        assert_eq!(MetricsReport::csv_header().split(',').count(), r.csv_row().split(',').count());
    }
}
