//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Everything returns JSON strings; the page parses them.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use stagecap::data::{tokenize, Corpus, LengthDistribution, Scene, TokenId};
use stagecap::decoding::{decode_mnic, trace_lines};
use stagecap::masking::{inject_noise, mask_sequence, RatioSet};
use stagecap::model::{CaptionModel, ModelConfig};
use stagecap::synthetic::{generate_synthetic, raw_scenes, GrammarParams};
use stagecap::training::{train_with, Regime, TrainConfig};
use wasm_bindgen::prelude::*;

pub type DemoResult<T> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Serialize)]
struct SceneView<'a> {
    index: usize,
    id: &'a str,
    attributes: &'a [String],
    captions: Vec<String>,
}

#[derive(Serialize)]
struct MaskedWord {
    word: String,
    masked: bool,
    noised: bool,
}

#[derive(Serialize)]
struct TrainView {
    losses: Vec<f64>,
    parameters: usize,
}

/// A synthetic corpus plus a small model trained on demand.
pub struct Lab {
    corpus: Corpus,
    held_out: Vec<Scene>,
    lengths: LengthDistribution,
    model: Option<CaptionModel>,
    seed: u64,
}

impl Lab {
    pub fn new(seed: u64, scenes: usize) -> DemoResult<Self> {
        if scenes < 20 {
            return Err("need at least 20 scenes".into());
        }
        let raw = raw_scenes(&generate_synthetic(scenes, seed, &GrammarParams::default()));
        let split = scenes - scenes / 10;
        let corpus = Corpus::build(&raw[..split], 0, stagecap::data::DEFAULT_MAX_LEN, 0.2).map_err(err)?;
        let held_out = corpus.encode(&raw[split..]);
        let lengths = LengthDistribution::from_scenes(&corpus.scenes).map_err(err)?;
        Ok(Self { corpus, held_out, lengths, model: None, seed })
    }

    pub fn held_out_len(&self) -> usize {
        self.held_out.len()
    }

    pub fn scene_json(&self, index: usize) -> DemoResult<String> {
        let s = self.held_out.get(index).ok_or_else(|| format!("no held-out scene {index}"))?;
        let view = SceneView {
            index,
            id: &s.id,
            attributes: &s.attributes,
            captions: s.references.iter().map(|r| self.corpus.vocab.decode_string(r)).collect(),
        };
        serde_json::to_string(&view).map_err(err)
    }

    pub fn mask_json(&self, caption: &str, ratio: f64, noise: bool, seed: u64) -> DemoResult<String> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(format!("ratio {ratio} must lie in (0, 1]"));
        }
        let ids: Vec<TokenId> = self.corpus.vocab.encode(&tokenize(caption));
        if ids.is_empty() {
            return Err("caption has no words".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ex = mask_sequence(&ids, ratio, &mut rng);
        if noise {
            ex = inject_noise(ex, &mut rng, &self.corpus.vocab);
        }
        let words: Vec<MaskedWord> = ex
            .input_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| MaskedWord {
                word: self.corpus.vocab.word(id).to_string(),
                masked: ex.mask_flags[i],
                noised: ex.noised.contains(&i),
            })
            .collect();
        serde_json::to_string(&words).map_err(err)
    }

    /// Trains a fresh width-32 staged model; returns the per-epoch losses.
    pub fn train_json(&mut self, epochs: usize, ratios: &str, mut on_epoch: impl FnMut(usize, f64)) -> DemoResult<String> {
        let set: RatioSet = ratios.parse().map_err(err)?;
        let mut cfg = ModelConfig::desk(self.corpus.vocab.len(), self.corpus.feature_dim());
        cfg.d_model = 32;
        cfg.d_ff = 128;
        let model = CaptionModel::init(cfg, self.seed).map_err(err)?;
        let parameters = model.config().param_count();
        let mut tc = TrainConfig::new(Regime::Mnic, set);
        tc.epochs = epochs;
        tc.seed = self.seed;
        tc.warmup = 100;
        let out = train_with(model, &self.corpus.scenes, &self.corpus.vocab, &tc, |e| on_epoch(e.epoch, e.loss))
            .map_err(err)?;
        let losses = out.log.iter().map(|e| e.loss).collect();
        self.model = Some(out.model);
        serde_json::to_string(&TrainView { losses, parameters }).map_err(err)
    }

    /// Stage-by-stage trace for one held-out scene as a JSON array.
    /// `length` 0 uses the most common training length.
    pub fn trace_json(&self, index: usize, length: usize, ratios: &str, rounds: usize) -> DemoResult<String> {
        let model = self.model.as_ref().ok_or("train a model first")?;
        let s = self.held_out.get(index).ok_or_else(|| format!("no held-out scene {index}"))?;
        let set: RatioSet = ratios.parse().map_err(err)?;
        let len = if length == 0 { self.lengths.mode() } else { length };
        let memory = model.encode_features(&s.features).map_err(err)?;
        let hf: &BTreeSet<TokenId> = self.corpus.vocab.high_freq();
        let trace = decode_mnic(model, &memory, len, &set, rounds, hf).map_err(err)?;
        Ok(format!("[{}]", trace_lines(&s.id, &trace, &self.corpus.vocab).join(",")))
    }
}

/// JavaScript face of [`Lab`].
#[wasm_bindgen(js_name = Lab)]
pub struct WebLab(Lab);

#[wasm_bindgen(js_class = Lab)]
impl WebLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, scenes: u32) -> Result<WebLab, JsError> {
        Lab::new(seed.into(), scenes as usize).map(WebLab).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = heldOutLen)]
    pub fn held_out_len(&self) -> u32 {
        self.0.held_out_len() as u32
    }

    pub fn scene(&self, index: u32) -> Result<String, JsError> {
        self.0.scene_json(index as usize).map_err(|e| JsError::new(&e))
    }

    pub fn mask(&self, caption: &str, ratio: f64, noise: bool, seed: u32) -> Result<String, JsError> {
        self.0.mask_json(caption, ratio, noise, seed.into()).map_err(|e| JsError::new(&e))
    }

    pub fn train(&mut self, epochs: u32, ratios: &str) -> Result<String, JsError> {
        self.0.train_json(epochs as usize, ratios, |_, _| {}).map_err(|e| JsError::new(&e))
    }

    pub fn trace(&self, index: u32, length: u32, ratios: &str, rounds: u32) -> Result<String, JsError> {
        self.0
            .trace_json(index as usize, length as usize, ratios, rounds as usize)
            .map_err(|e| JsError::new(&e))
    }
}
