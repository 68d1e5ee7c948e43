//! Template grammar producing scene/caption pairs with known content words.
//!
//! Each scene holds one to three objects (count, color, noun), a verb for the
//! first object and a place. Features are a multi-hot encoding of those
//! attributes; captions are paraphrases drawn from a small template grammar,
//! so every content word in a caption can be traced back to the scene record.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::RawScene;

pub const COUNTS: [&str; 3] = ["a", "two", "three"];
pub const COLORS: [&str; 12] = [
    "red", "blue", "green", "yellow", "black", "white", "brown", "orange", "gray", "pink", "purple", "silver",
];
pub const NOUNS: [(&str, &str); 20] = [
    ("dog", "dogs"),
    ("cat", "cats"),
    ("bird", "birds"),
    ("horse", "horses"),
    ("cow", "cows"),
    ("duck", "ducks"),
    ("boy", "boys"),
    ("girl", "girls"),
    ("man", "men"),
    ("woman", "women"),
    ("car", "cars"),
    ("bike", "bikes"),
    ("boat", "boats"),
    ("kite", "kites"),
    ("ball", "balls"),
    ("bear", "bears"),
    ("elephant", "elephants"),
    ("giraffe", "giraffes"),
    ("zebra", "zebras"),
    ("child", "children"),
];
pub const VERBS: [&str; 14] = [
    "sitting", "standing", "running", "walking", "playing", "resting", "swimming", "eating", "jumping",
    "sleeping", "flying", "waiting", "grazing", "looking",
];
pub const PLACES: [(&str, &str); 12] = [
    ("on", "grass"),
    ("in", "water"),
    ("near", "tree"),
    ("on", "beach"),
    ("in", "field"),
    ("on", "road"),
    ("in", "snow"),
    ("by", "river"),
    ("in", "park"),
    ("on", "street"),
    ("near", "house"),
    ("on", "hill"),
];
/// Words the grammar uses only as glue.
pub const FUNCTION_WORDS: [&str; 18] = [
    "a", "an", "the", "is", "are", "there", "photo", "picture", "image", "of", "with", "and", "next", "to",
    "near", "on", "in", "by",
];

const SLOT_WIDTH: usize = 1 + COUNTS.len() + COLORS.len() + NOUNS.len();
pub const MAX_OBJECTS: usize = 3;
pub const FEATURE_DIM: usize = MAX_OBJECTS * SLOT_WIDTH + VERBS.len() + PLACES.len();

#[derive(Clone, Debug)]
pub struct GrammarParams {
    /// Standard deviation of Gaussian noise added to the multi-hot features.
    pub noise_sigma: f64,
    pub min_refs: usize,
    pub max_refs: usize,
    pub max_len: usize,
}

impl Default for GrammarParams {
    fn default() -> Self {
        Self { noise_sigma: 0.1, min_refs: 2, max_refs: 5, max_len: crate::data::DEFAULT_MAX_LEN }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub count: usize,
    pub color: usize,
    pub noun: usize,
}

impl SceneObject {
    fn noun_word(&self) -> &'static str {
        let (singular, plural) = NOUNS[self.noun];
        if self.count == 0 {
            singular
        } else {
            plural
        }
    }
}

/// The generator's record of one scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub verb: usize,
    pub place: usize,
}

impl SceneSpec {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let n_objects = match rng.gen::<f64>() {
            u if u < 0.45 => 1,
            u if u < 0.8 => 2,
            _ => 3,
        };
        let mut nouns: Vec<usize> = (0..NOUNS.len()).collect();
        nouns.shuffle(rng);
        let objects = nouns[..n_objects]
            .iter()
            .map(|&noun| SceneObject {
                count: match rng.gen::<f64>() {
                    u if u < 0.6 => 0,
                    u if u < 0.85 => 1,
                    _ => 2,
                },
                color: rng.gen_range(0..COLORS.len()),
                noun,
            })
            .collect();
        Self { objects, verb: rng.gen_range(0..VERBS.len()), place: rng.gen_range(0..PLACES.len()) }
    }

    /// Content words describing the scene, in a fixed order.
    pub fn attribute_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        for o in &self.objects {
            if o.count > 0 {
                out.push(COUNTS[o.count].to_string());
            }
            out.push(COLORS[o.color].to_string());
            out.push(o.noun_word().to_string());
        }
        out.push(VERBS[self.verb].to_string());
        out.push(PLACES[self.place].1.to_string());
        out.dedup();
        out
    }

    pub fn multi_hot(&self) -> Vec<f64> {
        let mut f = vec![0.0; FEATURE_DIM];
        for (slot, o) in self.objects.iter().enumerate() {
            let base = slot * SLOT_WIDTH;
            f[base] = 1.0;
            f[base + 1 + o.count] = 1.0;
            f[base + 1 + COUNTS.len() + o.color] = 1.0;
            f[base + 1 + COUNTS.len() + COLORS.len() + o.noun] = 1.0;
        }
        let base = MAX_OBJECTS * SLOT_WIDTH;
        f[base + self.verb] = 1.0;
        f[base + VERBS.len() + self.place] = 1.0;
        f
    }

    fn noun_phrase<R: Rng>(&self, o: &SceneObject, color_prob: f64, rng: &mut R, out: &mut Vec<&'static str>) {
        out.push(COUNTS[o.count]);
        if rng.gen_bool(color_prob) {
            out.push(COLORS[o.color]);
        }
        out.push(o.noun_word());
    }

    /// One paraphrase drawn from the template grammar.
    pub fn caption<R: Rng>(&self, rng: &mut R) -> Vec<&'static str> {
        let primary = &self.objects[0];
        let plural = primary.count > 0;
        let mut words = Vec::new();
        let prefix = rng.gen_range(0..20);
        let there = (9..12).contains(&prefix);
        match prefix {
            9..=11 => words.extend(["there", if plural { "are" } else { "is" }]),
            12..=14 => words.extend(["a", "photo", "of"]),
            15..=16 => words.extend(["an", "image", "of"]),
            17..=19 => words.extend(["a", "picture", "of"]),
            _ => {}
        }
        self.noun_phrase(primary, 0.75, rng, &mut words);
        if rng.gen_bool(0.85) {
            if !there && rng.gen_bool(0.4) {
                words.push(if plural { "are" } else { "is" });
            }
            words.push(VERBS[self.verb]);
        }
        for o in &self.objects[1..] {
            if rng.gen_bool(0.75) {
                match rng.gen_range(0..4) {
                    0 => words.push("with"),
                    1 => words.push("and"),
                    2 => words.extend(["next", "to"]),
                    _ => words.push("near"),
                }
                self.noun_phrase(o, 0.6, rng, &mut words);
            }
        }
        if rng.gen_bool(0.75) {
            let (prep, place) = PLACES[self.place];
            words.extend([prep, "the", place]);
        }
        words
    }
}

/// A generated scene with the record it came from.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub raw: RawScene,
    pub spec: SceneSpec,
}

/// Deterministically generates `n` scenes from `seed`.
pub fn generate_synthetic(n: usize, seed: u64, params: &GrammarParams) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("finite sigma");
    (0..n)
        .map(|i| {
            let spec = SceneSpec::sample(&mut rng);
            let features = spec
                .multi_hot()
                .into_iter()
                .map(|v| {
                    let jitter = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    // stored at f32 precision so the feature file round-trips exactly
                    (v + jitter) as f32 as f64
                })
                .collect();
            let n_refs = rng.gen_range(params.min_refs..=params.max_refs.max(params.min_refs));
            let mut captions: Vec<Vec<String>> = Vec::with_capacity(n_refs);
            let mut attempts = 0;
            while captions.len() < n_refs {
                let c = spec.caption(&mut rng);
                attempts += 1;
                if c.len() > params.max_len {
                    continue;
                }
                let c: Vec<String> = c.into_iter().map(str::to_string).collect();
                // prefer distinct paraphrases, but give up after a while
                if captions.contains(&c) && attempts < 50 {
                    continue;
                }
                captions.push(c);
            }
            SyntheticScene {
                raw: RawScene { id: i.to_string(), features, captions, attributes: spec.attribute_words() },
                spec,
            }
        })
        .collect()
}

pub fn raw_scenes(scenes: &[SyntheticScene]) -> Vec<RawScene> {
    scenes.iter().map(|s| s.raw.clone()).collect()
}
