//! Checkpoints: a text manifest (config, training settings, vocabulary,
//! length counts, tensor index) next to a little-endian f64 blob.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{LengthDistribution, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::masking::RatioSet;
use crate::model::{CaptionModel, ModelConfig};
use crate::tensor::NdArray;
use crate::training::{Regime, TrainConfig};

const MAGIC: &str = "stagecap-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CaptionModel,
    pub vocab: Vocab,
    pub lengths: LengthDistribution,
    pub training: Option<TrainConfig>,
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.manifest"))
}

pub fn blob_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.bin"))
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    /// Manifest text and blob bytes.
    pub fn to_parts(&self) -> (String, Vec<u8>) {
        let c = self.model.config();
        let mut m = String::new();
        let _ = writeln!(m, "{MAGIC}");
        let _ = writeln!(m, "[config]");
        let _ = writeln!(m, "layers={}", c.layers);
        let _ = writeln!(m, "heads={}", c.heads);
        let _ = writeln!(m, "d_model={}", c.d_model);
        let _ = writeln!(m, "d_ff={}", c.d_ff);
        let _ = writeln!(m, "vocab_size={}", c.vocab_size);
        let _ = writeln!(m, "max_len={}", c.max_len);
        let _ = writeln!(m, "feature_dim={}", c.feature_dim);
        let _ = writeln!(m, "memory_slots={}", c.memory_slots);
        let _ = writeln!(m, "supervision={}", join(c.supervision.iter().map(|(l, w)| format!("{l}:{w}"))));
        let _ = writeln!(m, "dropout={}", c.dropout);
        if let Some(t) = &self.training {
            let _ = writeln!(m, "[training]");
            let _ = writeln!(m, "regime={}", t.regime);
            let _ = writeln!(m, "ratios={}", t.ratio_set);
            let _ = writeln!(m, "epochs={}", t.epochs);
            let _ = writeln!(m, "batch_size={}", t.batch_size);
            let _ = writeln!(m, "warmup={}", t.warmup);
            let _ = writeln!(m, "beta1={}", t.beta1);
            let _ = writeln!(m, "beta2={}", t.beta2);
            let _ = writeln!(m, "eps={}", t.eps);
            let _ = writeln!(m, "lr_scale={}", t.lr_scale);
            let _ = writeln!(m, "clip_norm={}", t.clip_norm);
            let _ = writeln!(m, "seed={}", t.seed);
            let _ = writeln!(m, "noise={}", t.noise);
            let _ = writeln!(m, "noise_words={}", t.noise_words);
            let _ = writeln!(m, "replicate_ratios={}", t.replicate_ratios);
        }
        let _ = writeln!(m, "[vocab]");
        for tok in self.vocab.tokens() {
            let _ = writeln!(m, "{tok}");
        }
        let _ = writeln!(m, "[high_freq]");
        let _ = writeln!(m, "{}", join(self.vocab.high_freq().iter()));
        let _ = writeln!(m, "[lengths]");
        let _ = writeln!(m, "{}", join(self.lengths.counts().iter()));
        let _ = writeln!(m, "[tensors]");
        let mut blob = Vec::with_capacity(c.param_count() * 8);
        for ((name, shape), p) in c.param_shapes().iter().zip(self.model.params()) {
            let _ = writeln!(m, "{name} {} {} {}", join(shape.iter()).replace(',', "x"), blob.len(), p.len() * 8);
            for v in p.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (m, blob)
    }

    pub fn from_parts(manifest: &str, blob: &[u8]) -> Result<Self> {
        Self::parse(Path::new("<manifest>"), manifest, blob)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (manifest, blob) = self.to_parts();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mp = manifest_path(dir, stem);
        std::fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
        let bp = blob_path(dir, stem);
        std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let mp = manifest_path(dir, stem);
        let manifest = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let bp = blob_path(dir, stem);
        let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        Self::parse(&mp, &manifest, &blob)
    }

    fn parse(path: &Path, manifest: &str, blob: &[u8]) -> Result<Self> {
        let err = |line: usize, msg: String| Error::format(path, format!("line {}", line + 1), msg);
        let mut lines = manifest.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(0, format!("expected `{MAGIC}`"))),
        }
        let mut section = String::new();
        let mut sections: Vec<(String, Vec<(usize, &str)>)> = Vec::new();
        for (i, line) in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !matches!(name, "config" | "training" | "vocab" | "high_freq" | "lengths" | "tensors")
                    // a vocabulary entry may itself look like a section header
                    || (section == "vocab" && name != "high_freq")
                {
                    if section == "vocab" {
                        sections.last_mut().expect("inside vocab").1.push((i, line));
                        continue;
                    }
                    return Err(err(i, format!("unknown section `{name}`")));
                }
                section = name.to_string();
                sections.push((section.clone(), Vec::new()));
            } else if let Some(last) = sections.last_mut() {
                last.1.push((i, line));
            } else {
                return Err(err(i, "content before the first section".into()));
            }
        }
        let get = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, l)| l.as_slice());
        let need = |name: &str| get(name).ok_or_else(|| err(0, format!("missing section [{name}]")));

        let kv = |entries: &[(usize, &str)]| -> Result<Vec<(usize, String, String)>> {
            entries
                .iter()
                .map(|&(i, l)| {
                    l.split_once('=')
                        .map(|(k, v)| (i, k.trim().to_string(), v.trim().to_string()))
                        .ok_or_else(|| err(i, format!("expected key=value, got `{l}`")))
                })
                .collect()
        };
        fn field<T: FromStr>(
            map: &[(usize, String, String)],
            key: &str,
            err: &dyn Fn(usize, String) -> Error,
        ) -> Result<T> {
            let (i, _, v) = map.iter().find(|(_, k, _)| k == key).ok_or_else(|| err(0, format!("missing `{key}`")))?;
            v.parse().map_err(|_| err(*i, format!("bad value `{v}` for `{key}`")))
        }

        let cfg_map = kv(need("config")?)?;
        let supervision = {
            let (i, _, raw) = cfg_map
                .iter()
                .find(|(_, k, _)| k == "supervision")
                .ok_or_else(|| err(0, "missing `supervision`".into()))?;
            raw.split(',')
                .map(|p| {
                    let (l, w) = p.split_once(':').ok_or_else(|| err(*i, format!("bad tap `{p}`")))?;
                    Ok((
                        l.parse().map_err(|_| err(*i, format!("bad tap `{p}`")))?,
                        w.parse().map_err(|_| err(*i, format!("bad tap `{p}`")))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let config = ModelConfig {
            layers: field(&cfg_map, "layers", &err)?,
            heads: field(&cfg_map, "heads", &err)?,
            d_model: field(&cfg_map, "d_model", &err)?,
            d_ff: field(&cfg_map, "d_ff", &err)?,
            vocab_size: field(&cfg_map, "vocab_size", &err)?,
            max_len: field(&cfg_map, "max_len", &err)?,
            feature_dim: field(&cfg_map, "feature_dim", &err)?,
            memory_slots: field(&cfg_map, "memory_slots", &err)?,
            supervision,
            dropout: field(&cfg_map, "dropout", &err)?,
        };

        let training = match get("training") {
            None => None,
            Some(entries) => {
                let t = kv(entries)?;
                let regime: Regime = field(&t, "regime", &err)?;
                let ratio_set: RatioSet = field(&t, "ratios", &err)?;
                Some(TrainConfig {
                    regime,
                    ratio_set,
                    epochs: field(&t, "epochs", &err)?,
                    batch_size: field(&t, "batch_size", &err)?,
                    warmup: field(&t, "warmup", &err)?,
                    beta1: field(&t, "beta1", &err)?,
                    beta2: field(&t, "beta2", &err)?,
                    eps: field(&t, "eps", &err)?,
                    lr_scale: field(&t, "lr_scale", &err)?,
                    clip_norm: field(&t, "clip_norm", &err)?,
                    seed: field(&t, "seed", &err)?,
                    noise: field(&t, "noise", &err)?,
                    noise_words: field(&t, "noise_words", &err)?,
                    replicate_ratios: field(&t, "replicate_ratios", &err)?,
                })
            }
        };

        let tokens: Vec<String> = need("vocab")?.iter().map(|(_, l)| l.to_string()).collect();
        if tokens.len() != config.vocab_size {
            return Err(err(0, format!("{} vocabulary entries for vocab_size {}", tokens.len(), config.vocab_size)));
        }
        let parse_list = |name: &str| -> Result<Vec<u64>> {
            let entries = need(name)?;
            let (i, line) = entries.first().copied().unwrap_or((0, ""));
            if line.trim().is_empty() {
                return Ok(Vec::new());
            }
            line.split(',')
                .map(|x| x.trim().parse().map_err(|_| err(i, format!("bad number `{x}` in [{name}]"))))
                .collect()
        };
        let high_freq: BTreeSet<TokenId> = parse_list("high_freq")?.into_iter().map(|x| x as TokenId).collect();
        if high_freq.iter().any(|&id| id >= tokens.len()) {
            return Err(err(0, "high-frequency id outside the vocabulary".into()));
        }
        let vocab = Vocab::from_tokens(tokens, high_freq);
        let lengths = LengthDistribution::from_counts(parse_list("lengths")?)?;

        let shapes = config.param_shapes();
        let index = need("tensors")?;
        if index.len() != shapes.len() {
            return Err(err(0, format!("{} tensors listed, config needs {}", index.len(), shapes.len())));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for (&(i, line), (name, shape)) in index.iter().zip(&shapes) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [n, s, offset, bytes] = parts[..] else {
                return Err(err(i, format!("expected `name shape offset bytes`, got `{line}`")));
            };
            let listed: Vec<usize> = s.split('x').map(|d| d.parse().unwrap_or(0)).collect();
            if n != name || &listed != shape {
                return Err(err(i, format!("expected tensor {name} {shape:?}, found {n} {s}")));
            }
            let offset: usize = offset.parse().map_err(|_| err(i, format!("bad offset `{offset}`")))?;
            let bytes: usize = bytes.parse().map_err(|_| err(i, format!("bad byte count `{bytes}`")))?;
            let count: usize = shape.iter().product();
            if bytes != count * 8 || offset.checked_add(bytes).map_or(true, |end| end > blob.len()) {
                return Err(err(i, format!("tensor {name} does not fit the {}-byte blob", blob.len())));
            }
            let data = blob[offset..offset + bytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(NdArray::new(shape.clone(), data)?);
        }
        let used: usize = params.iter().map(|p| p.len() * 8).sum();
        if used != blob.len() {
            return Err(err(0, format!("tensors cover {used} bytes of a {}-byte blob", blob.len())));
        }
        let model = CaptionModel::from_params(config, params)?;
        Ok(Self { model, vocab, lengths, training })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let words: Vec<String> = ["a", "dog", "[odd]", "runs"].iter().map(|s| s.to_string()).collect();
        let mut vocab = Vocab::build(&[words], 0, 100).unwrap();
        vocab.set_high_freq([3].into_iter().collect());
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: vocab.len(),
            max_len: 6,
            feature_dim: 3,
            memory_slots: 2,
            supervision: vec![(1, 1.0), (2, 1.1)],
            dropout: 0.1,
        };
        let mut training = TrainConfig::new(Regime::Mnic, "0.4,0.6,0.8,1".parse().unwrap());
        training.seed = 17;
        Checkpoint {
            model: CaptionModel::init(cfg, 5).unwrap(),
            vocab,
            lengths: LengthDistribution::from_lengths([2, 3, 3, 5]).unwrap(),
            training: Some(training),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let (m, b) = ck.to_parts();
        let back = Checkpoint::from_parts(&m, &b).unwrap();
        assert_eq!(back, ck);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path(), "checkpoint").unwrap();
        assert_eq!(Checkpoint::load(dir.path(), "checkpoint").unwrap(), ck);
    }

    #[test]
    fn corruption_is_reported() {
        let (m, b) = sample().to_parts();
        assert!(Checkpoint::from_parts(&m, &b[..b.len() - 8]).is_err());
        assert!(Checkpoint::from_parts(&m.replace("layers=2", "layers=3"), &b).is_err());
        assert!(Checkpoint::from_parts(&m.replacen("stagecap", "other", 1), &b).is_err());
        let err = Checkpoint::from_parts(&m.replace("heads=2", "heads=two"), &b).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("heads"), "{err}");
    }
}
