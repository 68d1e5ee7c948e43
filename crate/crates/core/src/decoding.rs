//! Greedy autoregressive decoding, single-pass decoding and the staged
//! masked decoder with its preservation rule and traces.

use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;

use crate::data::{LengthDistribution, TokenId, Vocab, MASK, PAD};
use crate::error::{Error, Result};
use crate::masking::{mask_count, RatioSet};
use crate::model::{CaptionModel, DecoderMode};
use crate::tensor::{softmax_row, NdArray};
use crate::training::{AR_END, AR_START};

/// Argmax over `row` after softmax, never choosing an id in `exclude`.
/// Returns the id and its probability under the full distribution.
fn pick(row: &[f64], exclude: &[TokenId]) -> (TokenId, f64) {
    let mut probs = row.to_vec();
    softmax_row(&mut probs);
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (id, &p) in probs.iter().enumerate() {
        if !exclude.contains(&id) && p > best.1 {
            best = (id, p);
        }
    }
    best
}

fn predict_all(model: &CaptionModel, memory: &NdArray, input: &[TokenId]) -> Result<(Vec<TokenId>, Vec<f64>)> {
    let logits = model.final_logits(memory, input, DecoderMode::Bidirectional)?;
    Ok((0..input.len()).map(|t| pick(logits.row(t), &[PAD, MASK])).unzip())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArOutput {
    pub ids: Vec<TokenId>,
    pub passes: usize,
}

/// Greedy left-to-right decoding, recomputing the full prefix each step.
///
/// With `stop_at_end` the loop ends when the end marker wins (that pass is
/// counted); otherwise the marker is excluded and exactly `max_len` tokens
/// are emitted, one pass each.
pub fn decode_ar(model: &CaptionModel, memory: &NdArray, max_len: usize, stop_at_end: bool) -> Result<ArOutput> {
    if max_len + 1 > model.config().max_len {
        return Err(Error::Invalid(format!(
            "autoregressive length {max_len} needs {} positions, model has {}",
            max_len + 1,
            model.config().max_len
        )));
    }
    let exclude: &[TokenId] = if stop_at_end { &[MASK] } else { &[MASK, AR_END] };
    let mut input = vec![AR_START];
    let mut passes = 0;
    while input.len() <= max_len {
        let logits = model.final_logits(memory, &input, DecoderMode::Causal)?;
        passes += 1;
        let (id, _) = pick(logits.row(input.len() - 1), exclude);
        if id == AR_END {
            break;
        }
        input.push(id);
    }
    input.remove(0);
    Ok(ArOutput { ids: input, passes })
}

/// Drops every token equal to its immediate predecessor.
pub fn finalize(ids: &[TokenId]) -> Vec<TokenId> {
    let mut out = ids.to_vec();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preservation {
    pub input_ids: Vec<TokenId>,
    /// Kept positions, ascending.
    pub preserved: Vec<usize>,
    /// Set when the quota could only be met from skipped positions.
    pub fallback: bool,
}

/// Keeps the `T − mask_count(T, r)` most probable positions whose tokens are
/// neither high-frequency nor already kept, masking the rest.
pub fn preserve_and_remask(
    output: &[TokenId],
    probs: &[f64],
    ratio: f64,
    high_freq: &BTreeSet<TokenId>,
) -> Result<Preservation> {
    if output.len() != probs.len() {
        return Err(Error::Shape(format!("{} tokens with {} probabilities", output.len(), probs.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("re-masking ratio {ratio} must lie in (0, 1)")));
    }
    let len = output.len();
    let quota = len - mask_count(len, ratio);
    let mut ranking: Vec<usize> = (0..len).collect();
    // stable sort keeps the lower index first among equal probabilities
    ranking.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut kept = Vec::with_capacity(quota);
    let mut seen = BTreeSet::new();
    let mut skipped = Vec::new();
    for &pos in &ranking {
        if kept.len() == quota {
            break;
        }
        let tok = output[pos];
        if high_freq.contains(&tok) || seen.contains(&tok) {
            skipped.push(pos);
        } else {
            seen.insert(tok);
            kept.push(pos);
        }
    }
    let fallback = kept.len() < quota;
    if fallback {
        let missing = quota - kept.len();
        kept.extend(skipped.into_iter().take(missing));
    }
    kept.sort_unstable();
    let mut input_ids = vec![MASK; len];
    for &pos in &kept {
        input_ids[pos] = output[pos];
    }
    Ok(Preservation { input_ids, preserved: kept, fallback })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRecord {
    pub round: usize,
    /// Position in the whole run, counted from 1.
    pub stage: usize,
    pub input_ratio: f64,
    pub input_ids: Vec<TokenId>,
    pub output_ids: Vec<TokenId>,
    pub probs: Vec<f64>,
    /// Positions left unmasked in the next stage's input.
    pub preserved: Vec<usize>,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    pub length: usize,
    pub rounds: usize,
    pub stages: Vec<StageRecord>,
    pub final_ids: Vec<TokenId>,
    pub passes: usize,
}

impl DecodeTrace {
    /// Raw (pre-dedup) output of the last stage in `round`.
    pub fn round_output(&self, round: usize) -> Option<&[TokenId]> {
        self.stages.iter().rev().find(|s| s.round == round).map(|s| s.output_ids.as_slice())
    }
}

/// Expected decoder passes for `k` stages and `rounds` rounds.
pub fn mnic_passes(k: usize, rounds: usize) -> usize {
    k + rounds.saturating_sub(1) * k.saturating_sub(1)
}

/// Staged masked decoding from an all-MASK input of length `len`.
///
/// Round 1 runs one stage per ratio, largest first. Each later round
/// re-masks the previous output at the second largest ratio and runs the
/// remaining stages.
pub fn decode_mnic(
    model: &CaptionModel,
    memory: &NdArray,
    len: usize,
    ratios: &RatioSet,
    rounds: usize,
    high_freq: &BTreeSet<TokenId>,
) -> Result<DecodeTrace> {
    if len == 0 {
        return Err(Error::Invalid("caption length must be at least 1".into()));
    }
    if rounds == 0 {
        return Err(Error::Invalid("at least one round is required".into()));
    }
    let schedule = ratios.stage_schedule();
    let k = schedule.len();
    if k == 1 && rounds > 1 {
        return Err(Error::Invalid("extra rounds need a second ratio to re-mask at".into()));
    }
    let mut stages: Vec<StageRecord> = Vec::with_capacity(mnic_passes(k, rounds));
    let mut input = vec![MASK; len];
    for round in 1..=rounds {
        let first = if round == 1 { 0 } else { 1 };
        for (i, &ratio) in schedule.iter().enumerate().skip(first) {
            let (output, probs) = predict_all(model, memory, &input)?;
            let next_ratio = schedule.get(i + 1).copied().or_else(|| (round < rounds).then(|| schedule[1]));
            let (preserved, fallback, next_input) = match next_ratio {
                Some(r) => {
                    let p = preserve_and_remask(&output, &probs, r, high_freq)?;
                    (p.preserved, p.fallback, Some(p.input_ids))
                }
                None => (Vec::new(), false, None),
            };
            stages.push(StageRecord {
                round,
                stage: stages.len() + 1,
                input_ratio: ratio,
                input_ids: std::mem::take(&mut input),
                output_ids: output,
                probs,
                preserved,
                fallback,
            });
            if let Some(next) = next_input {
                input = next;
            }
        }
    }
    let last = stages.last().expect("at least one stage");
    let final_ids = finalize(&last.output_ids);
    let passes = stages.len();
    Ok(DecodeTrace { length: len, rounds, stages, final_ids, passes })
}

/// One pass on an all-MASK input; the same as staged decoding with `{1}`.
pub fn decode_na(model: &CaptionModel, memory: &NdArray, len: usize) -> Result<DecodeTrace> {
    decode_mnic(model, memory, len, &RatioSet::full(), 1, &BTreeSet::new())
}

#[derive(Clone, Debug, PartialEq)]
pub enum LengthMode {
    Fixed(usize),
    Sampled(LengthDistribution),
}

pub fn choose_length<R: Rng + ?Sized>(mode: &LengthMode, rng: &mut R) -> usize {
    match mode {
        LengthMode::Fixed(c) => *c,
        LengthMode::Sampled(dist) => dist.sample(rng),
    }
}

/// Inference method for [`generate_caption`].
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    /// Greedy left-to-right decoding up to the model's length limit.
    Ar,
    Na,
    Mnic { ratios: RatioSet, rounds: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub ids: Vec<TokenId>,
    pub passes: usize,
    pub trace: Option<DecodeTrace>,
}

/// Captions one feature vector. `len` is ignored by [`Method::Ar`].
pub fn generate_caption(
    model: &CaptionModel,
    features: &[f64],
    method: &Method,
    len: usize,
    high_freq: &BTreeSet<TokenId>,
) -> Result<Generation> {
    let memory = model.encode_features(features)?;
    Ok(match method {
        Method::Ar => {
            let out = decode_ar(model, &memory, model.config().max_len - 1, true)?;
            Generation { ids: out.ids, passes: out.passes, trace: None }
        }
        Method::Na => {
            let t = decode_na(model, &memory, len)?;
            Generation { ids: t.final_ids.clone(), passes: t.passes, trace: Some(t) }
        }
        Method::Mnic { ratios, rounds } => {
            let t = decode_mnic(model, &memory, len, ratios, *rounds, high_freq)?;
            Generation { ids: t.final_ids.clone(), passes: t.passes, trace: Some(t) }
        }
    })
}

/// Captions every scene in order, drawing lengths from one rng seeded with `seed`.
pub fn generate_all(
    model: &CaptionModel,
    scenes: &[crate::data::Scene],
    method: &Method,
    lengths: &LengthMode,
    seed: u64,
    high_freq: &BTreeSet<TokenId>,
) -> Result<Vec<Generation>> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    scenes
        .iter()
        .map(|s| {
            let len = choose_length(lengths, &mut rng);
            generate_caption(model, &s.features, method, len, high_freq)
        })
        .collect()
}

#[derive(Serialize)]
struct StageLine<'a> {
    scene: &'a str,
    round: usize,
    stage: usize,
    ratio: f64,
    input: Vec<&'a str>,
    output: Vec<&'a str>,
    probs: Vec<f64>,
    preserved: &'a [usize],
    fallback: bool,
}

fn round4(p: f64) -> f64 {
    (p * 1e4).round() / 1e4
}

/// One JSON object per stage, words instead of ids, probabilities at 4 decimals.
pub fn trace_lines(scene_id: &str, trace: &DecodeTrace, vocab: &Vocab) -> Vec<String> {
    trace
        .stages
        .iter()
        .map(|s| {
            let line = StageLine {
                scene: scene_id,
                round: s.round,
                stage: s.stage,
                ratio: s.input_ratio,
                input: vocab.decode(&s.input_ids),
                output: vocab.decode(&s.output_ids),
                probs: s.probs.iter().map(|&p| round4(p)).collect(),
                preserved: &s.preserved,
                fallback: s.fallback,
            };
            serde_json::to_string(&line).expect("plain data serializes")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CaptionModel {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 20,
            max_len: 17,
            feature_dim: 4,
            memory_slots: 2,
            supervision: vec![(1, 1.0), (2, 1.1)],
            dropout: 0.0,
        };
        CaptionModel::init(cfg, 11).unwrap()
    }

    fn memory(m: &CaptionModel) -> NdArray {
        m.encode_features(&[0.3, -0.1, 0.8, 0.0]).unwrap()
    }

    #[test]
    fn finalize_examples() {
        assert_eq!(finalize(&[3, 4, 5, 5, 6]), vec![3, 4, 5, 6]);
        assert_eq!(finalize(&[3, 4, 3]), vec![3, 4, 3]);
        assert_eq!(finalize(&[7, 7, 7]), vec![7]);
        assert!(finalize(&[]).is_empty());
    }

    #[test]
    fn ar_passes_and_oracle() {
        let m = model();
        let mem = memory(&m);
        let out = decode_ar(&m, &mem, 11, false).unwrap();
        assert_eq!(out.passes, 11);
        assert_eq!(out.ids.len(), 11);
        assert_eq!(decode_ar(&m, &mem, 11, false).unwrap(), out);

        let mut prefix = vec![AR_START];
        for _ in 0..11 {
            let logits = &m.decode(&mem, &prefix, DecoderMode::Causal).unwrap()[1];
            let row = logits.row(prefix.len() - 1);
            let best = (0..row.len())
                .filter(|&i| i != MASK && i != AR_END)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap();
            prefix.push(best);
        }
        assert_eq!(&prefix[1..], &out.ids[..]);
        assert!(decode_ar(&m, &mem, 17, false).is_err());
    }

    #[test]
    fn na_is_first_stage_of_mnic() {
        let m = model();
        let mem = memory(&m);
        let na = decode_na(&m, &mem, 9).unwrap();
        assert_eq!(na.passes, 1);
        assert_eq!(na.stages[0].output_ids.len(), 9);
        let set: RatioSet = "0.4,0.6,0.8,1.0".parse().unwrap();
        let staged = decode_mnic(&m, &mem, 9, &set, 1, &BTreeSet::new()).unwrap();
        assert_eq!(staged.stages[0].output_ids, na.stages[0].output_ids);
        assert_eq!(staged.stages[0].probs, na.stages[0].probs);
    }

    #[test]
    fn stage_schedule_and_pass_counts() {
        let m = model();
        let mem = memory(&m);
        let set: RatioSet = "0.2,0.6,1.0".parse().unwrap();
        let t = decode_mnic(&m, &mem, 10, &set, 1, &BTreeSet::new()).unwrap();
        let ratios: Vec<f64> = t.stages.iter().map(|s| s.input_ratio).collect();
        assert_eq!(ratios, vec![1.0, 0.6, 0.2]);
        let masked: Vec<usize> =
            t.stages.iter().map(|s| s.input_ids.iter().filter(|&&i| i == MASK).count()).collect();
        assert_eq!(masked, vec![10, 6, 2]);

        let set: RatioSet = "0.4,0.6,0.8,1.0".parse().unwrap();
        assert_eq!(decode_mnic(&m, &mem, 10, &set, 1, &BTreeSet::new()).unwrap().passes, 4);
        assert_eq!(decode_mnic(&m, &mem, 10, &set, 2, &BTreeSet::new()).unwrap().passes, 7);
        assert!(decode_mnic(&m, &mem, 10, &RatioSet::full(), 2, &BTreeSet::new()).is_err());
        assert!(decode_mnic(&m, &mem, 10, &set, 0, &BTreeSet::new()).is_err());
    }

    #[test]
    fn consecutive_stages_agree() {
        let m = model();
        let mem = memory(&m);
        let set: RatioSet = "0.4,0.6,0.8,1.0".parse().unwrap();
        let t = decode_mnic(&m, &mem, 12, &set, 3, &[3usize, 4].into_iter().collect()).unwrap();
        for w in t.stages.windows(2) {
            let (prev, next) = (&w[0], &w[1]);
            for pos in 0..12 {
                if prev.preserved.contains(&pos) {
                    assert_eq!(next.input_ids[pos], prev.output_ids[pos]);
                } else {
                    assert_eq!(next.input_ids[pos], MASK);
                }
            }
        }
        assert_eq!(t.stages.iter().filter(|s| s.round == 2).map(|s| s.input_ratio).collect::<Vec<_>>(), vec![
            0.8, 0.6, 0.4
        ]);
        assert_eq!(t.final_ids, finalize(&t.stages.last().unwrap().output_ids));
    }

    #[test]
    fn preservation_walkthrough() {
        // "two ducks are swimming in the water ..." with a and the frequent
        let (two, ducks, are, swimming, in_, the, water, a) = (3, 4, 5, 6, 7, 8, 9, 10);
        let out = vec![two, ducks, are, swimming, in_, the, water, the, a, a];
        let probs = vec![0.9, 0.95, 0.3, 0.8, 0.5, 0.99, 0.85, 0.97, 0.98, 0.2];
        let hf: BTreeSet<TokenId> = [a, the].into_iter().collect();
        let p = preserve_and_remask(&out, &probs, 0.6, &hf).unwrap();
        assert_eq!(p.preserved, vec![0, 1, 3, 6]);
        assert!(!p.fallback);
        assert_eq!(p.input_ids.iter().filter(|&&i| i == MASK).count(), 6);
    }

    #[test]
    fn preservation_fallback_and_ties() {
        let p = preserve_and_remask(&[5; 6], &[0.5; 6], 0.5, &BTreeSet::new()).unwrap();
        assert_eq!(p.preserved, vec![0, 1, 2]);
        assert!(p.fallback);

        let p = preserve_and_remask(&[3, 4, 5, 6, 7], &[0.2; 5], 0.6, &BTreeSet::new()).unwrap();
        assert_eq!(p.preserved, vec![0, 1]);
        assert!(preserve_and_remask(&[3], &[0.2], 1.0, &BTreeSet::new()).is_err());
    }

    #[test]
    fn length_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(choose_length(&LengthMode::Fixed(11), &mut rng), 11);
        let point = LengthDistribution::from_lengths([7, 7, 7]).unwrap();
        assert!((0..50).all(|_| choose_length(&LengthMode::Sampled(point.clone()), &mut rng) == 7));
    }

    #[test]
    fn trace_lines_are_json() {
        let m = model();
        let mem = memory(&m);
        let words: Vec<String> = (0..17).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::build(&[words], 0, 100).unwrap();
        let set: RatioSet = "0.5,1.0".parse().unwrap();
        let t = decode_mnic(&m, &mem, 5, &set, 2, &BTreeSet::new()).unwrap();
        let lines = trace_lines("12", &t, &vocab);
        assert_eq!(lines.len(), 3);
        let v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(v["scene"], "12");
        assert_eq!(v["input"][0], "[MASK]");
        for p in v["probs"].as_array().unwrap() {
            let p = p.as_f64().unwrap();
            assert_eq!(round4(p), p);
        }
    }
}
