//! The caption network: an MLP feature encoder that emits a fixed number of
//! memory slots, followed by a post-norm transformer decoder whose
//! self-attention is either causal or bidirectional.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{TokenId, NUM_SPECIALS, PAD};
use crate::error::{Error, Result};
use crate::graph::{AttnBlock, AttnLayout, Graph, Var, Visibility};
use crate::tensor::NdArray;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderMode {
    Causal,
    Bidirectional,
}

impl DecoderMode {
    pub fn visibility(self) -> Visibility {
        match self {
            DecoderMode::Causal => Visibility::Causal,
            DecoderMode::Bidirectional => Visibility::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest decoder input, in positions.
    pub max_len: usize,
    pub feature_dim: usize,
    pub memory_slots: usize,
    /// `(layer, weight)` pairs, layers counted from 1.
    pub supervision: Vec<(usize, f64)>,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small model used for the synthetic experiments.
    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            // one extra slot for the autoregressive start position
            max_len: crate::data::DEFAULT_MAX_LEN + 1,
            feature_dim,
            memory_slots: 8,
            supervision: default_supervision(2),
            dropout: 0.1,
        }
    }

    /// Full-size configuration: 6 layers, 8 heads, width 512, taps at 2/4/6.
    pub fn full(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            supervision: default_supervision(6),
            ..Self::desk(vocab_size, feature_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layers, heads, d_model and d_ff must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return fail(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if self.max_len == 0 || self.feature_dim == 0 || self.memory_slots == 0 {
            return fail("max_len, feature_dim and memory_slots must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.supervision.is_empty() {
            return fail("supervision list is empty".into());
        }
        if self.supervision.windows(2).any(|w| w[0].0 >= w[1].0) {
            return fail("supervision layers must be strictly increasing".into());
        }
        for &(layer, weight) in &self.supervision {
            if layer == 0 || layer > self.layers {
                return fail(format!("supervision layer {layer} outside 1..={}", self.layers));
            }
            if !(weight > 0.0) {
                return fail(format!("supervision weight {weight} must be positive"));
            }
        }
        if self.supervision.last().map(|s| s.0) != Some(self.layers) {
            return fail(format!("supervision must include the last layer {}", self.layers));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn supervision_weights(&self) -> Vec<f64> {
        self.supervision.iter().map(|s| s.1).collect()
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m, v) = (self.d_model, self.memory_slots, self.vocab_size);
        let mut out = vec![
            ("encoder.w1".to_string(), vec![self.feature_dim, d]),
            ("encoder.b1".to_string(), vec![d]),
            ("encoder.w2".to_string(), vec![d, m * d]),
            ("encoder.b2".to_string(), vec![m * d]),
            ("embedding".to_string(), vec![v, d]),
            ("output.w".to_string(), vec![d, v]),
            ("output.b".to_string(), vec![v]),
        ];
        for l in 0..self.layers {
            for block in ["self", "cross"] {
                for proj in ["q", "k", "v", "o"] {
                    out.push((format!("layer{l}.{block}.{proj}.w"), vec![d, d]));
                    out.push((format!("layer{l}.{block}.{proj}.b"), vec![d]));
                }
            }
            out.push((format!("layer{l}.ffn.w1"), vec![d, self.d_ff]));
            out.push((format!("layer{l}.ffn.b1"), vec![self.d_ff]));
            out.push((format!("layer{l}.ffn.w2"), vec![self.d_ff, d]));
            out.push((format!("layer{l}.ffn.b2"), vec![d]));
            for ln in 1..=3 {
                out.push((format!("layer{l}.ln{ln}.gain"), vec![d]));
                out.push((format!("layer{l}.ln{ln}.bias"), vec![d]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Taps on every layer for shallow stacks, otherwise on every second layer
/// ending at the top; weights rise by 0.1 per tap starting from 1.0.
pub fn default_supervision(layers: usize) -> Vec<(usize, f64)> {
    let taps: Vec<usize> = if layers <= 3 {
        (1..=layers).collect()
    } else {
        (1..=layers).filter(|l| (layers - l) % 2 == 0).collect()
    };
    taps.into_iter()
        .enumerate()
        .map(|(i, l)| (l, (10 + i) as f64 / 10.0))
        .collect()
}

// parameter indices
const ENC_W1: usize = 0;
const ENC_B1: usize = 1;
const ENC_W2: usize = 2;
const ENC_B2: usize = 3;
const EMBED: usize = 4;
const OUT_W: usize = 5;
const OUT_B: usize = 6;
const LAYER_BASE: usize = 7;
const PER_LAYER: usize = 26;
const SELF_ATTN: usize = 0;
const CROSS_ATTN: usize = 8;
const FFN_W1: usize = 16;
const FFN_B1: usize = 17;
const FFN_W2: usize = 18;
const FFN_B2: usize = 19;
const LN1: usize = 20;
const LN2: usize = 22;
const LN3: usize = 24;

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> NdArray {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    NdArray::new(vec![len, d], data).expect("consistent shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel {
    config: ModelConfig,
    params: Vec<NdArray>,
    positions: NdArray,
}

/// Which supervision taps to project to vocabulary logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Taps {
    All,
    FinalOnly,
}

/// Parameters registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    fn layer(&self, l: usize, offset: usize) -> Var {
        self.0[LAYER_BASE + l * PER_LAYER + offset]
    }
}

impl CaptionModel {
    /// Deterministic scaled-uniform initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f64;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let bound = if name == "embedding" {
                        (3.0 / d).sqrt()
                    } else {
                        (6.0 / (shape[0] + shape[1]) as f64).sqrt()
                    };
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                NdArray::new(shape, data).expect("shape from config")
            })
            .collect();
        Ok(Self::from_parts(config, params))
    }

    /// Assembles a model from already-shaped parameters (e.g. a checkpoint).
    pub fn from_params(config: ModelConfig, params: Vec<NdArray>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Config(format!("expected {} tensors, got {}", shapes.len(), params.len())));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", p.shape())));
            }
        }
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: ModelConfig, params: Vec<NdArray>) -> Self {
        let positions = positional_encoding(config.max_len, config.d_model);
        Self { config, params, positions }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NdArray] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NdArray] {
        &mut self.params
    }

    /// All parameters flattened in storage order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Registers every parameter on `g`, as trainable leaves or constants.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| if trainable { g.param_ref(p) } else { g.constant_ref(p) })
                .collect(),
        )
    }

    /// Maps each feature row to `memory_slots` vectors; output is `(B·M) × d`.
    pub fn encode_on(&self, g: &mut Graph<'_>, p: &BoundParams, features: &[&[f64]]) -> Result<Var> {
        let cfg = &self.config;
        if let Some(bad) = features.iter().find(|f| f.len() != cfg.feature_dim) {
            return Err(Error::Shape(format!(
                "feature vector of length {} for feature_dim {}",
                bad.len(),
                cfg.feature_dim
            )));
        }
        let x = g.constant(NdArray::new(vec![features.len(), cfg.feature_dim], features.concat())?);
        let h = g.linear(x, p.0[ENC_W1], p.0[ENC_B1])?;
        let h = g.relu(h);
        let m = g.linear(h, p.0[ENC_W2], p.0[ENC_B2])?;
        g.reshape(m, vec![features.len() * cfg.memory_slots, cfg.d_model])
    }

    /// Runs the decoder over a batch of (unpadded) inputs.
    ///
    /// Inputs are padded with PAD to the longest one; padded keys are invisible.
    /// Returns one `(B·T) × V` logit node per selected tap, row `b·T + t`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_on<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        p: &BoundParams,
        memory: Var,
        inputs: &[Vec<TokenId>],
        visibility: Visibility,
        taps: Taps,
        mut dropout: Option<&mut R>,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (d, m) = (cfg.d_model, cfg.memory_slots);
        let batch = inputs.len();
        let t_max = inputs.iter().map(Vec::len).max().unwrap_or(0);
        if batch == 0 || t_max == 0 {
            return Err(Error::Invalid("decoder called with no input positions".into()));
        }
        if t_max > cfg.max_len {
            return Err(Error::Invalid(format!("input length {t_max} exceeds max_len {}", cfg.max_len)));
        }
        if g.value(memory).shape() != [batch * m, d] {
            return Err(Error::Shape(format!(
                "memory {:?} for batch of {batch} with {m} slots",
                g.value(memory).shape()
            )));
        }
        let mut ids = Vec::with_capacity(batch * t_max);
        for seq in inputs {
            if let Some(&bad) = seq.iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
            }
            ids.extend_from_slice(seq);
            ids.extend(std::iter::repeat(PAD).take(t_max - seq.len()));
        }
        let rate = if dropout.is_some() { cfg.dropout } else { 0.0 };

        let emb = g.embedding(p.0[EMBED], &ids, (d as f64).sqrt())?;
        let pos_rows: Vec<f64> = (0..batch)
            .flat_map(|_| self.positions.data()[..t_max * d].iter().copied())
            .collect();
        let pos = g.constant(NdArray::new(vec![batch * t_max, d], pos_rows)?);
        let mut x = g.add(emb, pos)?;
        if let Some(rng) = dropout.as_deref_mut() {
            x = g.dropout(x, rate, rng);
        }

        let self_layout = AttnLayout {
            blocks: inputs
                .iter()
                .enumerate()
                .map(|(b, seq)| AttnBlock {
                    q_start: b * t_max,
                    q_len: t_max,
                    k_start: b * t_max,
                    k_len: t_max,
                    k_valid: seq.len(),
                })
                .collect(),
            heads: cfg.heads,
            visibility,
        };
        let cross_layout = AttnLayout {
            blocks: (0..batch)
                .map(|b| AttnBlock { q_start: b * t_max, q_len: t_max, k_start: b * m, k_len: m, k_valid: m })
                .collect(),
            heads: cfg.heads,
            visibility: Visibility::Full,
        };

        let mut logits = Vec::new();
        for l in 0..cfg.layers {
            let sa = self.attention_block(g, p, l, SELF_ATTN, x, x, &self_layout)?;
            x = self.residual(g, p, l, LN1, x, sa, rate, dropout.as_deref_mut())?;
            let ca = self.attention_block(g, p, l, CROSS_ATTN, x, memory, &cross_layout)?;
            x = self.residual(g, p, l, LN2, x, ca, rate, dropout.as_deref_mut())?;
            let h = g.linear(x, p.layer(l, FFN_W1), p.layer(l, FFN_B1))?;
            let h = g.relu(h);
            let ff = g.linear(h, p.layer(l, FFN_W2), p.layer(l, FFN_B2))?;
            x = self.residual(g, p, l, LN3, x, ff, rate, dropout.as_deref_mut())?;

            let is_tap = cfg.supervision.iter().any(|s| s.0 == l + 1);
            if is_tap && (taps == Taps::All || l + 1 == cfg.layers) {
                logits.push(g.linear(x, p.0[OUT_W], p.0[OUT_B])?);
            }
        }
        Ok(logits)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph<'_>,
        p: &BoundParams,
        layer: usize,
        base: usize,
        queries: Var,
        keys: Var,
        layout: &AttnLayout,
    ) -> Result<Var> {
        let q = g.linear(queries, p.layer(layer, base), p.layer(layer, base + 1))?;
        let k = g.linear(keys, p.layer(layer, base + 2), p.layer(layer, base + 3))?;
        let v = g.linear(keys, p.layer(layer, base + 4), p.layer(layer, base + 5))?;
        let a = g.attention(q, k, v, layout.clone())?;
        g.linear(a, p.layer(layer, base + 6), p.layer(layer, base + 7))
    }

    #[allow(clippy::too_many_arguments)]
    fn residual<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        p: &BoundParams,
        layer: usize,
        ln: usize,
        x: Var,
        sub: Var,
        rate: f64,
        dropout: Option<&mut R>,
    ) -> Result<Var> {
        let sub = match dropout {
            Some(rng) => g.dropout(sub, rate, rng),
            None => sub,
        };
        let sum = g.add(x, sub)?;
        g.layer_norm(sum, p.layer(layer, ln), p.layer(layer, ln + 1), LN_EPS)
    }

    /// Memory slots (`M × d`) for one feature vector.
    pub fn encode_features(&self, features: &[f64]) -> Result<NdArray> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let m = self.encode_on(&mut g, &p, &[features])?;
        Ok(g.value(m).clone())
    }

    /// Per-tap logits (`T × V`) for one sequence, dropout off.
    pub fn decode(&self, memory: &NdArray, input_ids: &[TokenId], mode: DecoderMode) -> Result<Vec<NdArray>> {
        self.decode_visibility(memory, input_ids, mode.visibility(), Taps::All)
    }

    /// Logits of the top layer only.
    pub fn final_logits(&self, memory: &NdArray, input_ids: &[TokenId], mode: DecoderMode) -> Result<NdArray> {
        let mut taps = self.decode_visibility(memory, input_ids, mode.visibility(), Taps::FinalOnly)?;
        Ok(taps.pop().expect("final tap always present"))
    }

    pub fn decode_visibility(
        &self,
        memory: &NdArray,
        input_ids: &[TokenId],
        visibility: Visibility,
        taps: Taps,
    ) -> Result<Vec<NdArray>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let mem = g.constant_ref(memory);
        let out = self.decode_on::<ChaCha8Rng>(&mut g, &p, mem, &[input_ids.to_vec()], visibility, taps, None)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// `Σ wᵢ·CE(tapᵢ) / Σ wᵢ`.
pub fn supervised_loss(
    g: &mut Graph<'_>,
    taps: &[Var],
    targets: &[TokenId],
    weight_mask: &[bool],
    weights: &[f64],
) -> Result<Var> {
    if taps.len() != weights.len() {
        return Err(Error::Shape(format!("{} taps for {} supervision weights", taps.len(), weights.len())));
    }
    let terms = taps
        .iter()
        .map(|&t| g.cross_entropy(t, targets, weight_mask))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_mean(&terms, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 9,
            max_len: 8,
            feature_dim: 5,
            memory_slots: 3,
            supervision: vec![(1, 1.0), (2, 1.1)],
            dropout: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = CaptionModel::init(tiny(), 4).unwrap();
        let b = CaptionModel::init(tiny(), 4).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let c = CaptionModel::init(tiny(), 5).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn full_config_parameter_count() {
        let (v, f) = (10_000usize, 2048usize);
        let cfg = ModelConfig::full(v, f);
        let (d, ff, m) = (512usize, 2048usize, 8usize);
        let encoder = f * d + d + d * (m * d) + m * d;
        let embed_and_out = v * d + d * v + v;
        let per_layer = 8 * (d * d + d) + (d * ff + ff + ff * d + d) + 6 * d;
        assert_eq!(cfg.param_count(), encoder + embed_and_out + 6 * per_layer);
        assert_eq!(cfg.supervision, vec![(2, 1.0), (4, 1.1), (6, 1.2)]);
    }

    #[test]
    fn config_rejections_name_the_constraint() {
        let bad = ModelConfig { d_model: 10, heads: 4, ..tiny() };
        let err = CaptionModel::init(bad, 0).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
        let bad = ModelConfig { supervision: vec![(1, 1.0)], ..tiny() };
        assert!(bad.validate().unwrap_err().to_string().contains("last layer"));
        let bad = ModelConfig { supervision: vec![(2, 0.0)], ..tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_supervision_patterns() {
        assert_eq!(default_supervision(1), vec![(1, 1.0)]);
        assert_eq!(default_supervision(2), vec![(1, 1.0), (2, 1.1)]);
        assert_eq!(default_supervision(4).iter().map(|s| s.0).collect::<Vec<_>>(), vec![2, 4]);
    }

    #[test]
    fn memory_shape_and_zero_input() {
        let mut model = CaptionModel::init(tiny(), 1).unwrap();
        let mem = model.encode_features(&[0.3, -0.1, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(mem.shape(), &[3, 8]);
        for name in [ENC_B1, ENC_B2] {
            model.params_mut()[name].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mem = model.encode_features(&[0.0; 5]).unwrap();
        assert!(mem.data().iter().all(|&v| v == 0.0));
        assert!(model.encode_features(&[0.0; 4]).is_err());
    }

    #[test]
    fn tap_count_matches_supervision() {
        let model = CaptionModel::init(tiny(), 1).unwrap();
        let mem = model.encode_features(&[0.1; 5]).unwrap();
        let taps = model.decode(&mem, &[3, 4, 5], DecoderMode::Bidirectional).unwrap();
        assert_eq!(taps.len(), 2);
        assert_eq!(taps[0].shape(), &[3, 9]);
        assert!(model.decode(&mem, &[3; 9], DecoderMode::Causal).is_err());
    }

    #[test]
    fn causal_prefix_is_bit_identical_under_suffix_change() {
        let model = CaptionModel::init(tiny(), 2).unwrap();
        let mem = model.encode_features(&[0.5, 0.1, -0.2, 0.0, 1.0]).unwrap();
        let a = model.decode(&mem, &[3, 4, 5, 6], DecoderMode::Causal).unwrap();
        let b = model.decode(&mem, &[3, 4, 5, 8], DecoderMode::Causal).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(&ta.data()[..3 * 9], &tb.data()[..3 * 9]);
            assert_ne!(&ta.data()[3 * 9..], &tb.data()[3 * 9..]);
        }
        let c = model.decode(&mem, &[3, 4, 5, 8], DecoderMode::Bidirectional).unwrap();
        let d = model.decode(&mem, &[3, 4, 5, 6], DecoderMode::Bidirectional).unwrap();
        assert_ne!(c[1].row(0), d[1].row(0));
    }

    #[test]
    fn mode_switch_only_changes_visibility() {
        let model = CaptionModel::init(tiny(), 3).unwrap();
        let mem = model.encode_features(&[0.2; 5]).unwrap();
        let ids = [4, 5, 6, 7];
        let full = model.decode_visibility(&mem, &ids, Visibility::Full, Taps::All).unwrap();
        assert_eq!(full, model.decode(&mem, &ids, DecoderMode::Bidirectional).unwrap());
        let lower: Vec<bool> = (0..16).map(|k| k % 4 <= k / 4).collect();
        let explicit = model.decode_visibility(&mem, &ids, Visibility::Explicit(lower), Taps::All).unwrap();
        assert_eq!(explicit, model.decode(&mem, &ids, DecoderMode::Causal).unwrap());
    }

    #[test]
    fn weighted_supervision_loss() {
        let mut g = Graph::new();
        let t0 = g.constant(NdArray::zeros(&[2, 4]));
        let mut peaked = NdArray::zeros(&[2, 4]);
        peaked.data_mut()[1] = 2.0;
        let t1 = g.constant(peaked);
        let a = g.cross_entropy(t0, &[1, 2], &[true, true]).unwrap();
        let b = g.cross_entropy(t1, &[1, 2], &[true, true]).unwrap();
        let (ca, cb) = (g.value(a).data()[0], g.value(b).data()[0]);
        let l = supervised_loss(&mut g, &[t0, t1, t1], &[1, 2], &[true, true], &[1.0, 1.1, 1.2]).unwrap();
        assert!((g.value(l).data()[0] - (ca + 1.1 * cb + 1.2 * cb) / 3.3).abs() < 1e-12);
        let same = supervised_loss(&mut g, &[t1, t1], &[1, 2], &[true, true], &[1.0, 1.1]).unwrap();
        assert!((g.value(same).data()[0] - cb).abs() < 1e-12);
        let single = supervised_loss(&mut g, &[t0], &[1, 2], &[true, true], &[1.0]).unwrap();
        assert_eq!(g.value(single).data()[0], ca);
        assert!(supervised_loss(&mut g, &[t0], &[1, 2], &[true, true], &[1.0, 1.0]).is_err());
    }
}
