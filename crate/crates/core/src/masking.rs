//! Ratio-set masking and random-word noise for training inputs, plus the
//! shared mask-count rule used when re-masking at inference.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::data::{TokenId, Vocab, MASK};
use crate::error::{Error, Result};

/// Strictly increasing masking ratios in (0, 1] whose last element is 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioSet(Vec<f64>);

impl RatioSet {
    pub fn new(mut ratios: Vec<f64>) -> Result<Self> {
        ratios.sort_by(f64::total_cmp);
        if ratios.is_empty() {
            return Err(Error::Config("ratio set is empty".into()));
        }
        if ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config(format!("ratios {ratios:?} must lie in (0, 1]")));
        }
        if ratios.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("ratio set {ratios:?} repeats a value")));
        }
        if *ratios.last().expect("nonempty") != 1.0 {
            return Err(Error::Config(format!("ratio set {ratios:?} must contain 1.0")));
        }
        Ok(Self(ratios))
    }

    /// The fully masked set `{1.0}`.
    pub fn full() -> Self {
        Self(vec![1.0])
    }

    /// Ascending ratios.
    pub fn ratios(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-stage input ratios, largest first.
    pub fn stage_schedule(&self) -> Vec<f64> {
        self.0.iter().rev().copied().collect()
    }

    pub fn second_largest(&self) -> Option<f64> {
        self.0.len().checked_sub(2).map(|i| self.0[i])
    }
}

impl FromStr for RatioSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ratios = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad ratio `{p}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ratios)
    }
}

impl fmt::Display for RatioSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|r| format!("{r}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Number of masked positions for a sequence of length `len` at `ratio`:
/// `r·T` rounded half up.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    let exact = ratio.clamp(0.0, 1.0) * len as f64;
    // the epsilon absorbs representation error such as 0.3 * 5 = 1.4999…
    ((exact + 0.5 + 1e-9).floor() as usize).min(len)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub input_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub mask_flags: Vec<bool>,
    pub ratio: f64,
    /// Positions overwritten by a random word.
    pub noised: Vec<usize>,
}

impl MaskedExample {
    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }
}

/// Masks `mask_count(T, ratio)` positions chosen uniformly without replacement.
pub fn mask_sequence<R: Rng + ?Sized>(target: &[TokenId], ratio: f64, rng: &mut R) -> MaskedExample {
    let len = target.len();
    let count = mask_count(len, ratio);
    let mut mask_flags = vec![false; len];
    if count > 0 {
        for pos in index::sample(rng, len, count) {
            mask_flags[pos] = true;
        }
    }
    let input_ids = target
        .iter()
        .zip(&mask_flags)
        .map(|(&t, &m)| if m { MASK } else { t })
        .collect();
    MaskedExample { input_ids, target_ids: target.to_vec(), mask_flags, ratio, noised: Vec::new() }
}

/// Replaces one unmasked position with a uniformly drawn ordinary token.
/// Fully masked examples are returned unchanged.
pub fn inject_noise<R: Rng + ?Sized>(ex: MaskedExample, rng: &mut R, vocab: &Vocab) -> MaskedExample {
    inject_noise_words(ex, 1, rng, vocab)
}

/// Like [`inject_noise`] but replaces up to `words` distinct unmasked positions.
pub fn inject_noise_words<R: Rng + ?Sized>(mut ex: MaskedExample, words: usize, rng: &mut R, vocab: &Vocab) -> MaskedExample {
    if ex.ratio >= 1.0 || words == 0 || vocab.content_ids().is_empty() {
        return ex;
    }
    let unmasked: Vec<usize> = (0..ex.mask_flags.len()).filter(|&i| !ex.mask_flags[i]).collect();
    if unmasked.is_empty() {
        return ex;
    }
    let picks = words.min(unmasked.len());
    for k in index::sample(rng, unmasked.len(), picks) {
        let pos = unmasked[k];
        ex.input_ids[pos] = rng.gen_range(vocab.content_ids());
        ex.noised.push(pos);
    }
    ex
}

pub fn sample_ratio<R: Rng + ?Sized>(set: &RatioSet, rng: &mut R) -> f64 {
    set.0[rng.gen_range(0..set.0.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NUM_SPECIALS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n_words: usize) -> Vocab {
        let words: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
        Vocab::build(&[words], 0, 100).unwrap()
    }

    #[test]
    fn mask_count_examples() {
        assert_eq!(mask_count(10, 0.6), 6);
        assert_eq!(mask_count(11, 1.0), 11);
        assert_eq!(mask_count(11, 0.4), 4);
        assert_eq!(mask_count(11, 0.5), 6);
        assert_eq!(mask_count(7, 0.0), 0);
    }

    #[test]
    fn ratio_set_validation() {
        assert!(RatioSet::new(vec![]).is_err());
        assert!(RatioSet::new(vec![0.4, 0.6]).is_err());
        assert!(RatioSet::new(vec![0.0, 1.0]).is_err());
        assert!(RatioSet::new(vec![0.5, 0.5, 1.0]).is_err());
        let r: RatioSet = "1.0, 0.2,0.6".parse().unwrap();
        assert_eq!(r.ratios(), &[0.2, 0.6, 1.0]);
        assert_eq!(r.stage_schedule(), vec![1.0, 0.6, 0.2]);
        assert_eq!(r.second_largest(), Some(0.6));
        assert_eq!(r.to_string(), "0.2,0.6,1");
        assert_eq!(RatioSet::full().second_largest(), None);
    }

    #[test]
    fn full_and_empty_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Vec<TokenId> = (3..13).collect();
        let ex = mask_sequence(&t, 1.0, &mut rng);
        assert!(ex.input_ids.iter().all(|&i| i == MASK));
        let ex = mask_sequence(&t, 0.0, &mut rng);
        assert_eq!(ex.input_ids, t);
    }

    #[test]
    fn masked_positions_are_uniform() {
        let t: Vec<TokenId> = (3..13).collect();
        let mut hits = [0usize; 10];
        let n = 10_000;
        for seed in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = mask_sequence(&t, 0.6, &mut rng);
            assert_eq!(ex.masked_count(), 6);
            for (i, (&m, (&inp, &tgt))) in ex.mask_flags.iter().zip(ex.input_ids.iter().zip(&t)).enumerate() {
                if m {
                    hits[i] += 1;
                } else {
                    assert_eq!(inp, tgt);
                }
            }
        }
        let expected = n as f64 * 0.6;
        let chi2: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 9 degrees of freedom
        assert!(chi2 < 21.666, "chi2 {chi2}");
    }

    #[test]
    fn noise_rules() {
        let v = vocab(20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = vec![3, 4];
        let full = mask_sequence(&t, 1.0, &mut rng);
        assert_eq!(inject_noise(full.clone(), &mut rng, &v), full);

        let half = mask_sequence(&t, 0.5, &mut rng);
        let noisy = inject_noise(half.clone(), &mut rng, &v);
        assert_eq!(noisy.noised.len(), 1);
        let pos = noisy.noised[0];
        assert!(!half.mask_flags[pos]);
        assert!(noisy.input_ids[pos] >= NUM_SPECIALS);
        assert_eq!(noisy.target_ids, t);
        assert_eq!(noisy.mask_flags, half.mask_flags);
    }

    #[test]
    fn noise_tokens_are_uniform_over_content_vocab() {
        let v = vocab(12);
        let mut hits = vec![0usize; v.len()];
        let n = 10_000;
        for seed in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = mask_sequence(&[3, 4, 5, 6], 0.5, &mut rng);
            let ex = inject_noise(ex, &mut rng, &v);
            hits[ex.input_ids[ex.noised[0]]] += 1;
        }
        assert!(hits[..NUM_SPECIALS].iter().all(|&h| h == 0));
        let expected = n as f64 / 12.0;
        let chi2: f64 = hits[NUM_SPECIALS..].iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 11 degrees of freedom
        assert!(chi2 < 24.725, "chi2 {chi2}");
    }

    #[test]
    fn ratio_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| sample_ratio(&RatioSet::full(), &mut rng) == 1.0));
        let set: RatioSet = "0.4,0.6,0.8,1.0".parse().unwrap();
        let n = 100_000;
        let mut hits = [0usize; 4];
        for _ in 0..n {
            let r = sample_ratio(&set, &mut rng);
            hits[set.ratios().iter().position(|&x| x == r).unwrap()] += 1;
        }
        for h in hits {
            assert!((h as f64 / n as f64 - 0.25).abs() < 0.02);
        }
    }
}
