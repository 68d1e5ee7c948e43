//! Slow, map-free reference implementations of the corpus metrics, plus a
//! five-scene toy corpus. Shared with the acceptance suite via `#[path]`.
#![allow(dead_code)]

pub type Caption = Vec<&'static str>;

fn words(s: &'static str) -> Caption {
    s.split_whitespace().collect()
}

/// (candidate, references) per scene.
pub fn toy_corpus() -> Vec<(Caption, Vec<Caption>)> {
    vec![
        (
            words("a red dog runs in the park"),
            vec![words("a red dog runs in the park"), words("the red dog is running in a park")],
        ),
        (
            words("two cats sit on the sofa"),
            vec![words("two grey cats sitting on a sofa"), words("a pair of cats on the sofa"), words("two cats sit")],
        ),
        (
            words("a man rides a horse a horse"),
            vec![words("a man riding a brown horse"), words("a person on a horse in a field")],
        ),
        (words("blue bird"), vec![words("a small blue bird on a branch"), words("a blue bird")]),
        (
            words("the boat on the lake at the dusk"),
            vec![words("a boat floating on the lake"), words("a small boat on a calm lake at dusk")],
        ),
    ]
}

fn grams(tokens: &[&'static str], n: usize) -> Vec<Vec<&'static str>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn occurrences(list: &[Vec<&'static str>], g: &[&'static str]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: Vec<Vec<&'static str>>) -> Vec<Vec<&'static str>> {
    let mut out: Vec<Vec<&'static str>> = Vec::new();
    for g in list {
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

/// Cumulative BLEU-1..4 with clipped counts pooled over the corpus.
pub fn bleu(corpus: &[(Caption, Vec<Caption>)]) -> [f64; 4] {
    let mut c_len = 0.0;
    let mut r_len = 0.0;
    for (cand, refs) in corpus {
        c_len += cand.len() as f64;
        let mut best = refs[0].len();
        for r in refs {
            let d = (r.len() as i64 - cand.len() as i64).abs();
            let bd = (best as i64 - cand.len() as i64).abs();
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best as f64;
    }
    let mut precisions = [0.0f64; 4];
    for n in 1..=4 {
        let mut num = 0usize;
        let mut den = 0usize;
        for (cand, refs) in corpus {
            let cg = grams(cand, n);
            den += cg.len();
            for g in distinct(cg.clone()) {
                let in_cand = occurrences(&cg, &g);
                let mut in_ref = 0;
                for r in refs {
                    in_ref = in_ref.max(occurrences(&grams(r, n), &g));
                }
                num += in_cand.min(in_ref);
            }
        }
        precisions[n - 1] = if den == 0 { 0.0 } else { num as f64 / den as f64 };
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    let mut out = [0.0; 4];
    for n in 1..=4 {
        let ps = &precisions[..n];
        if ps.iter().any(|&p| p == 0.0) {
            break;
        }
        let mean_log: f64 = ps.iter().map(|p| p.ln()).sum::<f64>() / n as f64;
        out[n - 1] = bp * mean_log.exp();
    }
    out
}

fn tfidf_vector(tokens: &[&'static str], n: usize, df: &dyn Fn(&[&'static str]) -> usize, scenes: usize) -> Vec<(Vec<&'static str>, f64)> {
    let all = grams(tokens, n);
    distinct(all.clone())
        .into_iter()
        .map(|g| {
            let tf = occurrences(&all, &g) as f64;
            let d = df(&g).max(1) as f64;
            let w = tf * ((scenes as f64).ln() - d.ln());
            (g, w)
        })
        .collect()
}

fn cosine(a: &[(Vec<&'static str>, f64)], b: &[(Vec<&'static str>, f64)]) -> Option<f64> {
    let na = a.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let nb = b.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let mut dot = 0.0;
    for (g, w) in a {
        for (h, v) in b {
            if g == h {
                dot += w * v;
            }
        }
    }
    Some(dot / (na * nb))
}

/// Mean per-scene CIDEr with document frequencies over reference sets.
pub fn cider(corpus: &[(Caption, Vec<Caption>)]) -> f64 {
    let scenes = corpus.len();
    let df = |g: &[&'static str]| -> usize {
        corpus
            .iter()
            .filter(|(_, refs)| refs.iter().any(|r| grams(r, g.len()).iter().any(|x| x.as_slice() == g)))
            .count()
    };
    let mut sum = 0.0;
    for (cand, refs) in corpus {
        let mut per_n = 0.0;
        for n in 1..=4 {
            let cv = tfidf_vector(cand, n, &df, scenes);
            let mut acc = 0.0;
            for r in refs {
                let rv = tfidf_vector(r, n, &df, scenes);
                acc += cosine(&cv, &rv).unwrap_or(0.0);
            }
            per_n += acc / refs.len() as f64;
        }
        sum += 10.0 * per_n / 4.0;
    }
    sum / scenes as f64
}

/// (novel, unique, vocabulary usage) as integer counts; usage counts distinct
/// candidate words that belong to `types`.
pub fn diversity_counts(cands: &[Caption], training: &[Caption], types: &[&str]) -> (usize, usize, usize) {
    let novel = cands.iter().filter(|c| !training.contains(c)).count();
    let unique = cands.iter().filter(|c| cands.iter().filter(|d| d == c).count() == 1).count();
    let mut used: Vec<&str> = Vec::new();
    for c in cands {
        for w in c {
            if types.contains(w) && !used.contains(w) {
                used.push(w);
            }
        }
    }
    (novel, unique, used.len())
}
