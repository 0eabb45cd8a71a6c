use phrasesim::corpus::{ContextTable, PhraseRecord, Score};
use phrasesim::encoder::{EncoderConfig, EncoderParams};
use phrasesim::pipeline::{encode, Variant};
use phrasesim::textprep::{SequenceBuilder, Vocabulary};
use phrasesim::training::{batch_loss, train, LossOptions, TrainConfig};

fn fixture() -> Vec<PhraseRecord> {
    let words = [
        "alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta", "lambda", "zeta",
        "rho", "tau",
    ];
    let mut out = Vec::new();
    for a in 0..8 {
        let anchor: Vec<&str> = (0..4).map(|j| words[(a + j) % 12]).collect();
        for t in 0..4 {
            let mut target: Vec<&str> = anchor[..t].to_vec();
            target.extend((0..4 - t).map(|j| words[(a + 4 + j + t) % 12]));
            out.push(PhraseRecord {
                id: format!("a{a}t{t}"),
                anchor: anchor.join(" "),
                target: target.join(" "),
                context: "B01".into(),
                score: Score::from_hundredths((t * 25) as u8).unwrap(),
            });
        }
    }
    out
}

fn setup(records: &[PhraseRecord]) -> (Vocabulary, ContextTable) {
    let ctx = ContextTable::new();
    (Vocabulary::build(records, &ctx, 100).unwrap(), ctx)
}

fn encoder(vocab: &Vocabulary) -> EncoderParams {
    EncoderParams::init(&EncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: 16,
        num_heads: 2,
        num_layers: 1,
        ffn_dim: 32,
        max_len: 48,
        dropout: 0.1,
        seed: 2,
    })
    .unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_len: 48,
        lr: 3e-3,
        batch_size: 2,
        epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let records = fixture();
    let (vocab, ctx) = setup(&records);
    let builder = SequenceBuilder::new(&vocab, &ctx, 48);
    let init = encoder(&vocab);
    let out = train(&records, &records, &builder, init.clone(), &config(0)).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.steps, 0);
    assert_eq!(out.best, init);
    assert_eq!(out.best_epoch, None);
}

#[test]
fn same_seed_same_history_with_dropout_and_awp() {
    let records = fixture();
    let (vocab, ctx) = setup(&records);
    let builder = SequenceBuilder::new(&vocab, &ctx, 48);
    let a = train(&records, &records, &builder, encoder(&vocab), &config(3)).unwrap();
    let b = train(&records, &records, &builder, encoder(&vocab), &config(3)).unwrap();
    let lines = |o: &phrasesim::training::TrainOutcome| {
        o.history
            .iter()
            .map(|h| h.history_line())
            .collect::<Vec<_>>()
    };
    assert_eq!(lines(&a), lines(&b));
    assert_eq!(a.last, b.last);
    let c = train(
        &records,
        &records,
        &builder,
        encoder(&vocab),
        &TrainConfig {
            seed: 9,
            ..config(3)
        },
    )
    .unwrap();
    assert_ne!(lines(&a), lines(&c));
}

#[test]
fn loss_after_ten_epochs_below_initial_loss() {
    let records = fixture();
    let (vocab, ctx) = setup(&records);
    let builder = SequenceBuilder::new(&vocab, &ctx, 48);
    let init = encoder(&vocab);
    let seqs = encode(&records, Variant::V3, &builder).unwrap();
    let initial = batch_loss(&init, &seqs, LossOptions::default()).unwrap();
    let cfg = TrainConfig {
        awp: false,
        ..config(10)
    };
    let out = train(&records, &records, &builder, init, &cfg).unwrap();
    assert_eq!(out.history.len(), 10);
    let after = batch_loss(&out.last, &seqs, LossOptions::default()).unwrap();
    assert!(after < initial, "{after} vs {initial}");
    assert!(out.history[9].train_loss < out.history[0].train_loss);
}

#[test]
fn every_variant_trains() {
    let records = fixture();
    let (vocab, ctx) = setup(&records);
    let builder = SequenceBuilder::new(&vocab, &ctx, 48);
    for variant in [Variant::V1, Variant::V2, Variant::V3] {
        let out = train(
            &records,
            &records,
            &builder,
            encoder(&vocab),
            &TrainConfig {
                variant,
                ..config(1)
            },
        )
        .unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].train_loss.is_finite());
    }
}
