use std::collections::{BTreeMap, BTreeSet, HashMap};

use phrasesim::corpus::{holdout_split, stratified_kfold, Partition, PhraseRecord, Score};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(anchors: usize, contexts: &[&str], seed: u64) -> Vec<PhraseRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for a in 0..anchors {
        for t in 0..rng.gen_range(2..=10) {
            out.push(PhraseRecord {
                id: format!("{a:03}-{t:02}"),
                anchor: format!("anchor {a}"),
                target: format!("target {t}"),
                context: contexts[rng.gen_range(0..contexts.len())].to_string(),
                score: Score::LEVELS[rng.gen_range(0..5)],
            });
        }
    }
    out
}

/// Anchor to the set of labels its records received.
fn labels_per_anchor<T: Ord + Copy>(
    records: &[PhraseRecord],
    label: impl Fn(&str) -> T,
) -> BTreeMap<&str, BTreeSet<T>> {
    let mut out: BTreeMap<&str, BTreeSet<T>> = BTreeMap::new();
    for r in records {
        out.entry(r.anchor.as_str())
            .or_default()
            .insert(label(&r.id));
    }
    out
}

#[test]
fn holdout_fractions_within_two_points() {
    let records = synthetic(300, &["A01", "B02", "C03", "D04", "E05"], 9);
    let split = holdout_split(&records, (0.75, 0.05, 0.20), 3).unwrap();
    let n = records.len() as f64;
    for (p, want) in [
        (Partition::Train, 0.75),
        (Partition::Validation, 0.05),
        (Partition::Test, 0.20),
    ] {
        let got = split.count(p) as f64 / n;
        assert!((got - want).abs() <= 0.02, "{p}: {got:.3} vs {want}");
    }
}

#[test]
fn two_seeds_give_different_disjoint_splits() {
    let records = synthetic(100, &["A01", "B02", "C03"], 1);
    let a = holdout_split(&records, (0.75, 0.05, 0.20), 1).unwrap();
    let b = holdout_split(&records, (0.75, 0.05, 0.20), 2).unwrap();
    assert_ne!(a, b);
    for s in [&a, &b] {
        assert!(labels_per_anchor(&records, |id| s.get(id).unwrap())
            .values()
            .all(|p| p.len() == 1));
    }
}

#[test]
fn shared_contexts_reach_train() {
    let records = synthetic(
        60,
        &["A01", "B02", "C03", "D04", "E05", "F06", "G07", "H08"],
        4,
    );
    let split = holdout_split(&records, (0.5, 0.25, 0.25), 8).unwrap();
    let mut groups: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for r in &records {
        groups.entry(&r.context).or_default().insert(&r.anchor);
    }
    let in_train: BTreeSet<&str> = split
        .select(&records, Partition::Train)
        .iter()
        .map(|r| r.context.as_str())
        .collect();
    for (ctx, anchors) in groups {
        if anchors.len() >= 2 {
            assert!(in_train.contains(ctx), "{ctx} missing from train");
        }
    }
}

#[test]
fn forty_anchors_two_contexts_every_fold_has_both() {
    let records = synthetic(40, &["A47", "H04"], 12);
    let folds = stratified_kfold(&records, 4, 5).unwrap();
    for f in 0..4 {
        let ctx: BTreeSet<&str> = records
            .iter()
            .filter(|r| folds.get(&r.id) == Some(f))
            .map(|r| r.context.as_str())
            .collect();
        assert_eq!(ctx.len(), 2, "fold {f} has {ctx:?}");
    }
}

#[test]
fn per_label_share_close_to_global() {
    let records = synthetic(400, &["A01", "B02", "C03", "D04", "E05"], 21);
    let folds = stratified_kfold(&records, 4, 0).unwrap();
    let label_keys = |r: &PhraseRecord| [format!("bin{}", r.score.bin()), r.context.clone()];
    let mut global: HashMap<String, f64> = HashMap::new();
    for r in &records {
        for k in label_keys(r) {
            *global.entry(k).or_default() += 1.0 / records.len() as f64;
        }
    }
    for f in 0..4 {
        let members: Vec<&PhraseRecord> = records
            .iter()
            .filter(|r| folds.get(&r.id) == Some(f))
            .collect();
        let mut local: HashMap<String, f64> = HashMap::new();
        for r in &members {
            for k in label_keys(r) {
                *local.entry(k).or_default() += 1.0 / members.len() as f64;
            }
        }
        for (k, g) in &global {
            let l = local.get(k).copied().unwrap_or(0.0);
            assert!(
                (l - g).abs() <= 0.10,
                "fold {f} label {k}: {l:.3} vs {g:.3}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn holdout_is_anchor_grouped_complete_and_deterministic(anchors in 3usize..60, seed in any::<u64>(), data_seed in 0u64..1000) {
        let records = synthetic(anchors, &["A01", "B02", "C03"], data_seed);
        let a = holdout_split(&records, (0.6, 0.2, 0.2), seed).unwrap();
        prop_assert_eq!(&a, &holdout_split(&records, (0.6, 0.2, 0.2), seed).unwrap());
        prop_assert_eq!(a.len(), records.len());
        let per_anchor = labels_per_anchor(&records, |id| a.get(id).unwrap());
        prop_assert!(per_anchor.values().all(|p| p.len() == 1));
        for p in Partition::ALL {
            prop_assert!(a.count(p) > 0);
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        a.write_csv(&mut x).unwrap();
        holdout_split(&records, (0.6, 0.2, 0.2), seed).unwrap().write_csv(&mut y).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn folds_partition_records_by_anchor(anchors in 4usize..60, k in 2usize..5, seed in any::<u64>()) {
        let records = synthetic(anchors, &["A01", "B02"], seed % 97);
        let folds = stratified_kfold(&records, k, seed).unwrap();
        prop_assert_eq!(folds.folds.len(), records.len());
        prop_assert!(records.iter().all(|r| folds.get(&r.id).is_some_and(|f| f < k)));
        prop_assert!(labels_per_anchor(&records, |id| folds.get(id).unwrap()).values().all(|f| f.len() == 1));
        prop_assert!(folds.fold_sizes().iter().all(|&s| s > 0));
        prop_assert_eq!(folds, stratified_kfold(&records, k, seed).unwrap());
    }
}
