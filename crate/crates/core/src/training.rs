//! Optimization: warmup schedule, Adam, example construction for the three
//! regimes and the epoch loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Scene, TokenId, Vocab, MASK, PAD};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::masking::{inject_noise_words, mask_sequence, sample_ratio, RatioSet};
use crate::model::{supervised_loss, CaptionModel, DecoderMode, Taps};
use crate::tensor::NdArray;

/// Start-of-sequence slot for autoregressive inputs. MASK never occurs in
/// autoregressive training otherwise, so it is reused.
pub const AR_START: TokenId = MASK;
/// End marker predicted after the last autoregressive token.
pub const AR_END: TokenId = PAD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Left-to-right decoder with causal self-attention.
    Ar,
    /// Single-pass decoder trained on fully masked inputs.
    Na,
    /// Masked decoder trained on a ratio curriculum.
    Mnic,
}

impl Regime {
    pub fn mode(self) -> DecoderMode {
        match self {
            Regime::Ar => DecoderMode::Causal,
            Regime::Na | Regime::Mnic => DecoderMode::Bidirectional,
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar" | "aic" => Ok(Regime::Ar),
            "na" | "naic" => Ok(Regime::Na),
            "mnic" => Ok(Regime::Mnic),
            other => Err(Error::Config(format!("unknown regime `{other}` (expected ar, na or mnic)"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Ar => "ar",
            Regime::Na => "na",
            Regime::Mnic => "mnic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub ratio_set: RatioSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub noise: bool,
    pub noise_words: usize,
    /// Present every scene once per ratio instead of sampling one ratio.
    pub replicate_ratios: bool,
}

impl TrainConfig {
    pub fn new(regime: Regime, ratio_set: RatioSet) -> Self {
        let ratio_set = if regime == Regime::Na { RatioSet::full() } else { ratio_set };
        Self {
            regime,
            ratio_set,
            epochs: 30,
            batch_size: 32,
            warmup: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            lr_scale: 1.0,
            clip_norm: 5.0,
            seed: 0,
            noise: false,
            noise_words: 1,
            replicate_ratios: regime == Regime::Mnic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regime == Regime::Na && self.ratio_set != RatioSet::full() {
            return Err(Error::Config(format!(
                "non-autoregressive regime trains on {{1}} only, got {}",
                self.ratio_set
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.warmup == 0 {
            return Err(Error::Config("epochs, batch_size and warmup must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup, peaking at `step == warmup`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Invalid("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<NdArray>,
    pub second: Vec<NdArray>,
}

impl OptimizerState {
    pub fn new(params: &[NdArray]) -> Self {
        Self {
            step: 0,
            first: params.iter().map(|p| NdArray::zeros(p.shape())).collect(),
            second: params.iter().map(|p| NdArray::zeros(p.shape())).collect(),
        }
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, params: &mut [NdArray], grads: &[NdArray], lr: f64, h: AdamHyper) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Shape("parameter, gradient and moment lists differ in length".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step: self.step + 1 });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = h.beta1 * *mv + (1.0 - h.beta1) * gv;
                *vv = h.beta2 * *vv + (1.0 - h.beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [NdArray], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub input_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub weight_mask: Vec<bool>,
    pub mode: DecoderMode,
}

/// Builds one example from a uniformly chosen reference of `scene`.
pub fn make_training_example<R: Rng + ?Sized>(
    scene: &Scene,
    cfg: &TrainConfig,
    rng: &mut R,
    vocab: &Vocab,
) -> TrainingExample {
    let ratio = match cfg.regime {
        Regime::Mnic => Some(sample_ratio(&cfg.ratio_set, rng)),
        _ => None,
    };
    make_example_at_ratio(scene, cfg, ratio, rng, vocab)
}

/// As [`make_training_example`], with the masking ratio fixed by the caller.
pub fn make_example_at_ratio<R: Rng + ?Sized>(
    scene: &Scene,
    cfg: &TrainConfig,
    ratio: Option<f64>,
    rng: &mut R,
    vocab: &Vocab,
) -> TrainingExample {
    let target = scene.references[rng.gen_range(0..scene.references.len())].clone();
    match cfg.regime {
        Regime::Ar => {
            let mut input_ids = Vec::with_capacity(target.len() + 1);
            input_ids.push(AR_START);
            input_ids.extend_from_slice(&target);
            let mut target_ids = target;
            target_ids.push(AR_END);
            let weight_mask = vec![true; target_ids.len()];
            TrainingExample { input_ids, target_ids, weight_mask, mode: DecoderMode::Causal }
        }
        Regime::Na => TrainingExample {
            input_ids: vec![MASK; target.len()],
            weight_mask: vec![true; target.len()],
            target_ids: target,
            mode: DecoderMode::Bidirectional,
        },
        Regime::Mnic => {
            let ratio = ratio.unwrap_or(1.0);
            let mut ex = mask_sequence(&target, ratio, rng);
            if cfg.noise {
                ex = inject_noise_words(ex, cfg.noise_words, rng, vocab);
            }
            TrainingExample {
                input_ids: ex.input_ids,
                weight_mask: vec![true; target.len()],
                target_ids: ex.target_ids,
                mode: DecoderMode::Bidirectional,
            }
        }
    }
}

/// Mean supervised loss of a batch, with the graph kept for backward.
pub fn batch_loss<'a, R: Rng>(
    model: &'a CaptionModel,
    g: &mut Graph<'a>,
    scenes: &[&'a Scene],
    examples: &[TrainingExample],
    trainable: bool,
    dropout: Option<&mut R>,
) -> Result<(crate::model::BoundParams, crate::graph::Var)> {
    let mode = examples[0].mode;
    if examples.iter().any(|e| e.mode != mode) {
        return Err(Error::Invalid("batch mixes decoder modes".into()));
    }
    let p = model.bind(g, trainable);
    let features: Vec<&[f64]> = scenes.iter().map(|s| s.features.as_slice()).collect();
    let memory = model.encode_on(g, &p, &features)?;
    let inputs: Vec<Vec<TokenId>> = examples.iter().map(|e| e.input_ids.clone()).collect();
    let t_max = inputs.iter().map(Vec::len).max().unwrap_or(0);
    let mut targets = Vec::with_capacity(examples.len() * t_max);
    let mut weights = Vec::with_capacity(examples.len() * t_max);
    for e in examples {
        targets.extend_from_slice(&e.target_ids);
        weights.extend_from_slice(&e.weight_mask);
        targets.extend(std::iter::repeat(PAD).take(t_max - e.target_ids.len()));
        weights.extend(std::iter::repeat(false).take(t_max - e.target_ids.len()));
    }
    let taps = model.decode_on(g, &p, memory, &inputs, mode.visibility(), Taps::All, dropout)?;
    let loss = supervised_loss(g, &taps, &targets, &weights, &model.config().supervision_weights())?;
    Ok((p, loss))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CaptionModel,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochLog>,
}

fn epoch_examples<'s>(
    scenes: &'s [Scene],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
) -> Vec<(&'s Scene, TrainingExample)> {
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(scenes.len());
    for idx in order {
        let scene = &scenes[idx];
        if cfg.replicate_ratios && cfg.regime == Regime::Mnic {
            for &r in cfg.ratio_set.ratios() {
                out.push((scene, make_example_at_ratio(scene, cfg, Some(r), rng, vocab)));
            }
        } else {
            out.push((scene, make_training_example(scene, cfg, rng, vocab)));
        }
    }
    out
}

/// Gradient of the batch loss for every parameter (zeros where unused).
pub fn batch_gradients<R: Rng>(
    model: &CaptionModel,
    scenes: &[&Scene],
    examples: &[TrainingExample],
    dropout: Option<&mut R>,
) -> Result<(f64, Vec<NdArray>)> {
    let mut g = Graph::new();
    let (p, loss) = batch_loss(model, &mut g, scenes, examples, true, dropout)?;
    let mut grads = g.backward(loss)?;
    let value = g.value(loss).data()[0];
    let out = p
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, param)| grads.take(v).unwrap_or_else(|| NdArray::zeros(param.shape())))
        .collect();
    Ok((value, out))
}

/// Trains `model` in place of a copy and returns it with the loss log.
pub fn train(model: CaptionModel, scenes: &[Scene], vocab: &Vocab, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, scenes, vocab, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with<F: FnMut(&EpochLog)>(
    mut model: CaptionModel,
    scenes: &[Scene],
    vocab: &Vocab,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d409);
    let mut opt = OptimizerState::new(model.params());
    let hyper = AdamHyper { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps };
    let d_model = model.config().d_model;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let examples = epoch_examples(scenes, cfg, &mut rng, vocab);
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut lr = 0.0;
        for chunk in examples.chunks(cfg.batch_size) {
            let batch_scenes: Vec<&Scene> = chunk.iter().map(|(s, _)| *s).collect();
            let batch_examples: Vec<TrainingExample> = chunk.iter().map(|(_, e)| e.clone()).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch_scenes, &batch_examples, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient { step: opt.step + 1 });
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { step: opt.step + 1 });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            lr = cfg.lr_scale * lr_schedule(opt.step + 1, d_model, cfg.warmup)?;
            opt.adam_step(model.params_mut(), &grads, lr, hyper)?;
            total += loss;
            batches += 1;
        }
        let entry = EpochLog { epoch, step: opt.step, loss: total / batches as f64, lr };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, optimizer: opt, log })
}

/// Deterministic loss over a probe set built from `seed`, dropout off.
pub fn probe_loss(model: &CaptionModel, scenes: &[Scene], vocab: &Vocab, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<(&Scene, TrainingExample)> = scenes
        .iter()
        .map(|s| (s, make_training_example(s, cfg, &mut rng, vocab)))
        .collect();
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in examples.chunks(cfg.batch_size) {
        let sc: Vec<&Scene> = chunk.iter().map(|(s, _)| *s).collect();
        let ex: Vec<TrainingExample> = chunk.iter().map(|(_, e)| e.clone()).collect();
        let mut g = Graph::new();
        let (_, loss) = batch_loss::<ChaCha8Rng>(model, &mut g, &sc, &ex, false, None)?;
        total += g.value(loss).data()[0];
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// `epoch,step,loss,lr` rows with a header line.
pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,step,loss,lr\n");
    for e in log {
        out.push_str(&format!("{},{},{:.9},{:.9e}\n", e.epoch, e.step, e.loss, e.lr));
    }
    out
}
