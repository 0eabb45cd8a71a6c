#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phrasesim::corpus::{PhraseRecord, Score};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 20] = [
    "battery",
    "cell",
    "anode",
    "cathode",
    "electrode",
    "layer",
    "polymer",
    "film",
    "coating",
    "wafer",
    "laser",
    "beam",
    "optical",
    "fiber",
    "signal",
    "circuit",
    "gate",
    "valve",
    "piston",
    "engine",
];

pub const CONTEXTS: [(&str, &str); 5] = [
    ("A47", "furniture domestic articles"),
    ("B60", "vehicles in general"),
    ("H01", "basic electric elements"),
    ("G02", "optics"),
    ("C08", "organic macromolecular compounds"),
];

/// 20 anchors × 5 targets. Scores follow word overlap with some noise, so a
/// model can learn something but nothing is perfectly separable.
pub fn small_dataset_csv(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("id,anchor,target,context,score\n");
    for a in 0..20 {
        let anchor: Vec<&str> = WORDS.choose_multiple(&mut rng, 2).copied().collect();
        let context = CONTEXTS[a % 5].0;
        for t in 0..5 {
            let target: Vec<&str> = WORDS.choose_multiple(&mut rng, 2).copied().collect();
            let overlap = target.iter().filter(|w| anchor.contains(w)).count();
            let score = if rng.gen_bool(0.7) {
                ["0", "0.5", "1"][overlap]
            } else {
                ["0.25", "0.75"][rng.gen_range(0..2)]
            };
            out.push_str(&format!(
                "p{:03},{},{},{context},{score}\n",
                a * 5 + t,
                anchor.join(" "),
                target.join(" ")
            ));
        }
    }
    out
}

pub fn contexts_csv() -> String {
    let mut out = String::from("code,title\n");
    for (c, t) in CONTEXTS {
        out.push_str(&format!("{c},{t}\n"));
    }
    out
}

pub const TINY_CONFIG: &str = r#"{
  "dataset": "data.csv",
  "contexts": "contexts.csv",
  "output_dir": "out",
  "split": {"ratios": [0.6, 0.2, 0.2], "seed": 7},
  "folds": {"k": 3, "seed": 7, "scope": "train"},
  "encoder": {"embed_dim": 16, "num_heads": 2, "num_layers": 1, "ffn_dim": 32, "max_len": 64, "seed": 3},
  "training": {"max_len": 64, "lr": 0.001, "epochs": 2, "batch_size": 4, "seed": 11}
}
"#;

/// Writes the 100-record dataset, the context table and a tiny config into `dir`.
pub fn write_workspace(dir: &Path) -> PathBuf {
    fs::write(dir.join("data.csv"), small_dataset_csv(3)).unwrap();
    fs::write(dir.join("contexts.csv"), contexts_csv()).unwrap();
    let cfg = dir.join("config.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    cfg
}

pub fn phrasesim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phrasesim"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

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
