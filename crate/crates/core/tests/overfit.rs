//! A model with enough capacity must fit a tiny, internally consistent dataset.

use phrasesim::corpus::{ContextTable, PhraseRecord, Score};
use phrasesim::encoder::{EncoderConfig, EncoderParams};
use phrasesim::metrics::evaluate;
use phrasesim::pipeline::{gold_scores, predict, Variant};
use phrasesim::textprep::{SequenceBuilder, Vocabulary};
use phrasesim::training::{train, TrainConfig};

/// 8 anchors × 4 targets. The score is the fraction of target words that also
/// occur in the anchor, which is always a multiple of 0.25 here.
pub fn overlap_fixture() -> Vec<PhraseRecord> {
    let words = [
        "alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta", "lambda", "zeta",
        "rho", "tau",
    ];
    let mut out = Vec::new();
    for a in 0..8 {
        let anchor: Vec<&str> = (0..4).map(|j| words[(a + j) % 12]).collect();
        for t in 0..4 {
            // t words from the anchor, 4 - t from outside it.
            let mut target: Vec<&str> = anchor[..t].to_vec();
            target.extend((0..4 - t).map(|j| words[(a + 4 + j + t) % 12]));
            let overlap = target.iter().filter(|w| anchor.contains(w)).count();
            out.push(PhraseRecord {
                id: format!("a{a}t{t}"),
                anchor: anchor.join(" "),
                target: target.join(" "),
                context: if a % 2 == 0 {
                    "A47".into()
                } else {
                    "H04".into()
                },
                score: Score::from_hundredths((overlap * 25) as u8).unwrap(),
            });
        }
    }
    out
}

#[test]
fn v3_overfits_the_overlap_fixture() {
    let records = overlap_fixture();
    assert_eq!(records.len(), 32);
    let contexts = ContextTable::new();
    let vocab = Vocabulary::build(&records, &contexts, 1000).unwrap();
    let builder = SequenceBuilder::new(&vocab, &contexts, 64);
    let enc = EncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: 32,
        num_heads: 2,
        num_layers: 2,
        ffn_dim: 64,
        max_len: 64,
        dropout: 0.0,
        seed: 7,
    };
    let cfg = TrainConfig {
        variant: Variant::V3,
        max_len: 64,
        lr: 3e-3,
        batch_size: 4,
        epochs: 250,
        max_steps: Some(500),
        awp: false,
        seed: 1,
        ..TrainConfig::default()
    };
    let init = EncoderParams::init(&enc).unwrap();
    let out = train(&records, &records, &builder, init, &cfg).unwrap();
    let preds = predict(&out.best, &records, Variant::V3, &builder).unwrap();
    let r = evaluate(&preds, &gold_scores(&records).unwrap()).unwrap();
    eprintln!(
        "steps {} r {r} history {:?}",
        out.steps,
        out.history.iter().step_by(25).collect::<Vec<_>>()
    );
    assert!(out.steps <= 500);
    assert!(r >= 0.95, "training Pearson {r}");
}
