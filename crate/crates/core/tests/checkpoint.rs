use stagecap::checkpoint::Checkpoint;
use stagecap::data::{Corpus, LengthDistribution};
use stagecap::masking::RatioSet;
use stagecap::model::{default_supervision, CaptionModel, ModelConfig};
use stagecap::synthetic::{generate_synthetic, raw_scenes, GrammarParams};
use stagecap::training::{probe_loss, train, Regime, TrainConfig};

fn trained() -> (Checkpoint, Corpus, TrainConfig) {
    let raw = raw_scenes(&generate_synthetic(40, 5, &GrammarParams::default()));
    let corpus = Corpus::build(&raw, 0, 16, 0.2).unwrap();
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        supervision: default_supervision(2),
        ..ModelConfig::desk(corpus.vocab.len(), corpus.feature_dim())
    };
    let model = CaptionModel::init(cfg, 5).unwrap();
    let mut tc = TrainConfig::new(Regime::Mnic, "0.4,0.6,0.8,1.0".parse::<RatioSet>().unwrap());
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seed = 5;
    let out = train(model, &corpus.scenes, &corpus.vocab, &tc).unwrap();
    let ck = Checkpoint {
        model: out.model,
        vocab: corpus.vocab.clone(),
        lengths: LengthDistribution::from_scenes(&corpus.scenes).unwrap(),
        training: Some(tc.clone()),
    };
    (ck, corpus, tc)
}

#[test]
fn save_load_preserves_probe_loss_exactly() {
    let (ck, corpus, tc) = trained();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path(), "checkpoint").unwrap();
    let back = Checkpoint::load(dir.path(), "checkpoint").unwrap();
    assert_eq!(back.model.params(), ck.model.params());
    assert_eq!(back.vocab, ck.vocab);
    assert_eq!(back.lengths, ck.lengths);
    let a = probe_loss(&ck.model, &corpus.scenes, &corpus.vocab, &tc, 9).unwrap();
    let b = probe_loss(&back.model, &corpus.scenes, &back.vocab, back.training.as_ref().unwrap(), 9).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn damaged_blobs_are_rejected() {
    let (ck, _, _) = trained();
    let (manifest, blob) = ck.to_parts();
    assert!(Checkpoint::from_parts(&manifest, &blob[..blob.len() - 8]).is_err());
    let mut longer = blob.clone();
    longer.extend_from_slice(&[0; 8]);
    assert!(Checkpoint::from_parts(&manifest, &longer).is_err());
    assert!(Checkpoint::from_parts(&manifest.replacen("stagecap-checkpoint 1", "stagecap-checkpoint 9", 1), &blob).is_err());
}
