use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use phrasesim::corpus::{
    holdout_split, load_records, stratified_kfold, ContextTable, CorpusError, CorpusStats,
    FoldAssignment, Partition, PhraseRecord, SplitAssignment,
};
use phrasesim::encoder::Checkpoint;
use phrasesim::ensemble::{blend as blend_preds, optimize_weights, EnsembleWeights};
use phrasesim::metrics::{
    cv_report, evaluate as pearson_of, render_score_table, round4, ScoreVector,
};
use phrasesim::pipeline::{gold_scores, predict as predict_records};
use phrasesim::textprep::{SequenceBuilder, Vocabulary};
use phrasesim::training::{train as fit, TrainingError};
use phrasesim::{EncoderParams, Error, Variant};
use serde_json::json;

use crate::config::{FoldScope, PipelineConfig};
use crate::{BlendArgs, EvaluateArgs, Failure, FoldArgs, PredictArgs, SplitArgs, TrainArgs};

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn open(path: &Path, hint: &str) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Config(format!("{}: {e}{hint}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))
}

fn load_contexts(cfg: &PipelineConfig) -> Result<ContextTable, Failure> {
    match &cfg.contexts {
        Some(p) => Ok(ContextTable::load(p)?),
        None => Ok(ContextTable::new()),
    }
}

fn read_split(cfg: &PipelineConfig, records: &[PhraseRecord]) -> Result<SplitAssignment, Failure> {
    let split =
        SplitAssignment::read_csv(open(&cfg.split_file(), "; run `phrasesim split` first")?)?;
    if let Some(r) = records.iter().find(|r| split.get(&r.id).is_none()) {
        return Err(Failure::Config(format!(
            "record {:?} is missing from {}",
            r.id,
            cfg.split_file().display()
        )));
    }
    Ok(split)
}

fn read_folds(cfg: &PipelineConfig) -> Result<FoldAssignment, Failure> {
    Ok(FoldAssignment::read_csv(open(
        &cfg.fold_file(),
        "; run `phrasesim fold` first",
    )?)?)
}

fn histogram_line(records: &[&PhraseRecord]) -> String {
    let mut bins = [0usize; 5];
    for r in records {
        bins[r.score.bin()] += 1;
    }
    let contexts: BTreeSet<&str> = records.iter().map(|r| r.context.as_str()).collect();
    format!(
        "scores 0.00:{} 0.25:{} 0.50:{} 0.75:{} 1.00:{}, {} contexts",
        bins[0],
        bins[1],
        bins[2],
        bins[3],
        bins[4],
        contexts.len()
    )
}

pub fn validate(dataset: &Path, contexts: Option<&Path>) -> Result<(), Failure> {
    let records = match load_records(dataset) {
        Err(CorpusError::Invalid(rows)) => {
            for row in &rows {
                eprintln!("{}: {row}", dataset.display());
            }
            return Err(Failure::Validation(format!(
                "{} invalid row(s) in {}",
                rows.len(),
                dataset.display()
            )));
        }
        other => other?,
    };
    let stats = CorpusStats::of(&records);
    println!(
        "{} records, {} anchors, {} contexts",
        stats.records, stats.anchors, stats.contexts
    );
    for (level, n) in ["0.00", "0.25", "0.50", "0.75", "1.00"]
        .iter()
        .zip(stats.score_histogram)
    {
        println!("  {level}  {n}");
    }
    if let Some(path) = contexts {
        let table = ContextTable::load(path)?;
        let missing: BTreeSet<&str> = records
            .iter()
            .map(|r| r.context.as_str())
            .filter(|c| table.title(c).is_none())
            .collect();
        if !missing.is_empty() {
            warn!(
                "{} context code(s) have no title: {:?}",
                missing.len(),
                missing
            );
        }
    }
    Ok(())
}

pub fn split(a: &SplitArgs) -> Result<(), Failure> {
    let cfg = PipelineConfig::load(&a.config)?;
    let records = load_records(&cfg.dataset)?;
    let [tr, va, te] = cfg.split.ratios;
    let assignment = holdout_split(&records, (tr, va, te), a.seed.unwrap_or(cfg.split.seed))?;
    let path = cfg.split_file();
    let mut w = create(&path)?;
    assignment.write_csv(&mut w)?;
    w.flush().map_err(|e| io_err(&path, e))?;
    let n = records.len() as f64;
    for p in Partition::ALL {
        let part = assignment.select(&records, p);
        println!(
            "{:<10} {:>6} records ({:>5.1}%), {}",
            p.as_str(),
            part.len(),
            100.0 * part.len() as f64 / n,
            histogram_line(&part)
        );
    }
    info!("wrote {}", path.display());
    Ok(())
}

pub fn fold(a: &FoldArgs) -> Result<(), Failure> {
    let cfg = PipelineConfig::load(&a.config)?;
    let records = load_records(&cfg.dataset)?;
    let scope = a.scope.unwrap_or(cfg.folds.scope);
    let pool: Vec<PhraseRecord> = match scope {
        FoldScope::All => records,
        FoldScope::Train => {
            let split = read_split(&cfg, &records)?;
            split
                .select(&records, Partition::Train)
                .into_iter()
                .cloned()
                .collect()
        }
    };
    let k = a.k.unwrap_or(cfg.folds.k);
    let folds = stratified_kfold(&pool, k, a.seed.unwrap_or(cfg.folds.seed))?;
    let path = cfg.fold_file();
    let mut w = create(&path)?;
    folds.write_csv(&mut w)?;
    w.flush().map_err(|e| io_err(&path, e))?;
    let target = pool.len() as f64 / k as f64;
    for f in 0..k {
        let part: Vec<&PhraseRecord> = pool
            .iter()
            .filter(|r| folds.get(&r.id) == Some(f))
            .collect();
        println!(
            "fold {f}: {:>6} records ({:+.1}% of n/k), {}",
            part.len(),
            100.0 * (part.len() as f64 - target) / target,
            histogram_line(&part)
        );
    }
    info!("wrote {}", path.display());
    Ok(())
}

fn run_name(a: &TrainArgs, variant: Variant) -> String {
    match (&a.run_name, a.fold) {
        (Some(n), _) => n.clone(),
        (None, Some(f)) => format!("{variant}-fold{f}"),
        (None, None) => variant.to_string(),
    }
}

fn fingerprint_hex(vocab: &Vocabulary) -> String {
    format!("{:016x}", vocab.fingerprint())
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    let t = &mut cfg.training;
    if let Some(v) = a.variant {
        t.variant = v;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if a.no_awp {
        t.awp = false;
    }
    let records = load_records(&cfg.dataset)?;
    let contexts = load_contexts(&cfg)?;
    let (train_set, val_set): (Vec<PhraseRecord>, Vec<PhraseRecord>) = match a.fold {
        Some(f) => {
            let folds = read_folds(&cfg)?;
            if f >= folds.k {
                return Err(Failure::Config(format!(
                    "fold {f} out of range for k = {}",
                    folds.k
                )));
            }
            let in_fold =
                |r: &&PhraseRecord, want: bool| folds.get(&r.id).is_some_and(|x| (x == f) == want);
            (
                records
                    .iter()
                    .filter(|r| in_fold(r, false))
                    .cloned()
                    .collect(),
                records
                    .iter()
                    .filter(|r| in_fold(r, true))
                    .cloned()
                    .collect(),
            )
        }
        None => {
            let split = read_split(&cfg, &records)?;
            (
                split
                    .select(&records, Partition::Train)
                    .into_iter()
                    .cloned()
                    .collect(),
                split
                    .select(&records, Partition::Validation)
                    .into_iter()
                    .cloned()
                    .collect(),
            )
        }
    };

    let vocab = Vocabulary::build(&train_set, &contexts, cfg.vocab_cap)?;
    let mut enc = cfg.encoder.clone();
    enc.vocab_size = vocab.len();
    let init = EncoderParams::init(&enc)?;
    let builder = SequenceBuilder::new(&vocab, &contexts, cfg.training.max_len);
    let name = run_name(a, cfg.training.variant);
    let ckpt_dir = cfg.checkpoints_dir();
    let vocab_path = ckpt_dir.join(format!("{name}.vocab.txt"));
    let mut w = create(&vocab_path)?;
    vocab.write(&mut w)?;
    w.flush().map_err(|e| io_err(&vocab_path, e))?;
    info!(
        "run {name}: {} train / {} validation records, vocabulary {}, {} parameters",
        train_set.len(),
        val_set.len(),
        vocab.len(),
        init.num_params()
    );

    let mut meta = BTreeMap::new();
    meta.insert("variant".to_string(), cfg.training.variant.to_string());
    meta.insert("max_len".to_string(), cfg.training.max_len.to_string());
    meta.insert("vocab_fingerprint".to_string(), fingerprint_hex(&vocab));
    meta.insert("seed".to_string(), cfg.training.seed.to_string());

    let outcome = match fit(&train_set, &val_set, &builder, init, &cfg.training) {
        Ok(o) => o,
        Err(Error::Training(TrainingError::Diverged {
            epoch,
            reason,
            last_good,
        })) => {
            let path = ckpt_dir.join(format!("{name}.last_good.ckpt"));
            meta.insert("diverged_epoch".to_string(), epoch.to_string());
            write_checkpoint(&path, *last_good, meta)?;
            return Err(Failure::Numerical(format!(
                "training diverged in epoch {epoch}: {reason}; last good parameters saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let mut history = String::from("epoch,train_loss,val_pearson\n");
    for h in &outcome.history {
        history.push_str(&h.history_line());
        history.push('\n');
    }
    let history_path = cfg.reports_dir().join(format!("{name}.history.csv"));
    write_text(&history_path, &history)?;

    meta.insert("steps".to_string(), outcome.steps.to_string());
    if let Some(e) = outcome.best_epoch {
        meta.insert("best_epoch".to_string(), e.to_string());
    }
    let ckpt_path = ckpt_dir.join(format!("{name}.ckpt"));
    write_checkpoint(&ckpt_path, outcome.best, meta)?;
    println!("checkpoint {}", ckpt_path.display());
    println!("history    {}", history_path.display());
    Ok(())
}

fn write_checkpoint(
    path: &Path,
    params: EncoderParams,
    metadata: BTreeMap<String, String>,
) -> Result<(), Failure> {
    let mut w = create(path)?;
    Checkpoint { params, metadata }.write(&mut w)?;
    w.flush().map_err(|e| io_err(path, e))
}

fn default_vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab.txt")
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn predict(a: &PredictArgs) -> Result<(), Failure> {
    let cfg = PipelineConfig::load(&a.config)?;
    let ckpt = Checkpoint::read(open(&a.checkpoint, "")?)?;
    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| default_vocab_path(&a.checkpoint));
    let vocab = Vocabulary::read(open(&vocab_path, "")?)?;
    let meta = |k: &str| ckpt.metadata.get(k).map(String::as_str);

    if let Some(fp) = meta("vocab_fingerprint") {
        if fp != fingerprint_hex(&vocab) {
            return Err(Failure::Config(format!(
                "vocabulary {} does not match the checkpoint (fingerprint {} vs {fp})",
                vocab_path.display(),
                fingerprint_hex(&vocab)
            )));
        }
    }
    let trained: Option<Variant> = meta("variant")
        .map(str::parse)
        .transpose()
        .map_err(Failure::Config)?;
    let variant = match (a.variant, trained) {
        (Some(v), Some(t)) if v != t => {
            return Err(Failure::Config(format!(
                "checkpoint was trained with {t}, not {v}"
            )));
        }
        (v, t) => v.or(t).unwrap_or(cfg.training.variant),
    };
    let max_len = match meta("max_len") {
        Some(m) => m
            .parse()
            .map_err(|_| Failure::Config(format!("bad max_len {m:?} in checkpoint")))?,
        None => cfg.training.max_len,
    };

    let dataset = a.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let records = load_records(&dataset)?;
    let mut selected: Vec<&PhraseRecord> = records.iter().collect();
    let mut suffix = String::new();
    if let Some(p) = a.partition {
        let split = read_split(&cfg, &records)?;
        selected.retain(|r| split.get(&r.id) == Some(p));
        suffix = format!(".{p}");
    }
    if let Some(f) = a.fold {
        let folds = read_folds(&cfg)?;
        selected.retain(|r| folds.get(&r.id) == Some(f));
        suffix.push_str(&format!(".fold{f}"));
    }
    let contexts = load_contexts(&cfg)?;
    let builder = SequenceBuilder::new(&vocab, &contexts, max_len);
    let preds = predict_records(&ckpt.params, selected.iter().copied(), variant, &builder)?;

    let out = a.out.clone().unwrap_or_else(|| {
        cfg.preds_dir()
            .join(format!("{}{suffix}.csv", stem(&a.checkpoint)))
    });
    let mut w = create(&out)?;
    preds.write_csv(&mut w)?;
    w.flush().map_err(|e| io_err(&out, e))?;
    println!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}

fn read_preds(path: &Path) -> Result<ScoreVector, Failure> {
    let file = File::open(path)
        .map(BufReader::new)
        .map_err(|e| io_err(path, e))?;
    ScoreVector::read_csv(file).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn golds_where(
    records: &[PhraseRecord],
    keep: impl Fn(&PhraseRecord) -> bool,
) -> Result<ScoreVector, Failure> {
    Ok(gold_scores(records.iter().filter(|r| keep(r)))?)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let cfg = PipelineConfig::load(&a.config)?;
    let preds = read_preds(&a.preds)?;
    let records = load_records(&cfg.dataset)?;
    let split = a
        .partition
        .map(|_| read_split(&cfg, &records))
        .transpose()?;
    let fold = a.fold.map(|_| read_folds(&cfg)).transpose()?;
    let in_partition = |r: &PhraseRecord| {
        let p_ok = match (&split, a.partition) {
            (Some(s), Some(p)) => s.get(&r.id) == Some(p),
            _ => true,
        };
        p_ok && fold.as_ref().is_none_or(|f| f.get(&r.id) == a.fold)
    };

    let report = if a.folds {
        let folds = read_folds(&cfg)?;
        let mut pairs = Vec::with_capacity(folds.k);
        for f in 0..folds.k {
            let golds = golds_where(&records, |r| in_partition(r) && folds.get(&r.id) == Some(f))?;
            let mut p = preds.clone();
            p.retain(|id| golds.get(id).is_some());
            pairs.push((p, golds));
        }
        let cv = cv_report(&pairs)?;
        let rows: Vec<(String, f64)> = cv
            .fold_r
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("fold {i}"), *r))
            .chain([("pooled".into(), cv.pooled_r)])
            .collect();
        print!("{}", render_score_table("Fold", &rows));
        cv.to_json()
    } else {
        let golds = golds_where(&records, in_partition)?;
        let r = pearson_of(&preds, &golds)?;
        println!("pearson {:.4} over {} records", r, golds.len());
        let v = json!({
            "records": golds.len(),
            "partition": a.partition.map(Partition::as_str),
            "fold": a.fold,
            "pearson": round4(r),
            "pearson_exact": r,
        });
        serde_json::to_string_pretty(&v).expect("report serializes")
    };
    let out = a.out.clone().unwrap_or_else(|| {
        cfg.reports_dir()
            .join(format!("{}.metrics.json", stem(&a.preds)))
    });
    write_text(&out, &(report + "\n"))?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn blend(a: &BlendArgs) -> Result<(), Failure> {
    let cfg = PipelineConfig::load(&a.config)?;
    let models = a
        .preds
        .iter()
        .map(|p| read_preds(p))
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = if a.names.is_empty() {
        a.preds.iter().map(|p| stem(p)).collect()
    } else {
        a.names.clone()
    };
    if names.len() != models.len() {
        return Err(Failure::Config(format!(
            "{} name(s) for {} prediction file(s)",
            names.len(),
            models.len()
        )));
    }
    let records = load_records(&cfg.dataset)?;
    let split = read_split(&cfg, &records)?;
    let golds = golds_where(&records, |r| split.get(&r.id) == Some(a.partition))?;
    let restrict = |golds: &ScoreVector| -> Vec<ScoreVector> {
        models
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.retain(|id| golds.get(id).is_some());
                m
            })
            .collect()
    };
    let fit_preds = restrict(&golds);

    let model_r: Vec<(String, f64)> = names
        .iter()
        .zip(&fit_preds)
        .map(|(n, p)| pearson_of(p, &golds).map(|r| (n.clone(), r)))
        .collect::<Result<_, _>>()?;

    let (weights, r) = match &a.weights {
        Some(path) => {
            let (_, w) = EnsembleWeights::read_csv(open(path, "")?)?;
            let r = pearson_of(&blend_preds(&fit_preds, &w)?, &golds)?;
            (w, r)
        }
        None => {
            let s = optimize_weights(&fit_preds, &golds, a.step)?;
            (s.weights, s.pearson)
        }
    };
    let mut rows = model_r.clone();
    rows.push(("ensemble".into(), r));
    print!("{}", render_score_table("Model", &rows));

    let mut per_fold = Vec::new();
    if a.per_fold {
        let folds = read_folds(&cfg)?;
        for f in 0..folds.k {
            let g = golds_where(&records, |r| folds.get(&r.id) == Some(f))?;
            let s = optimize_weights(&restrict(&g), &g, a.step)?;
            per_fold.push(
                json!({"fold": f, "weights": s.weights.as_slice(), "pearson": round4(s.pearson)}),
            );
        }
    }

    let blended = blend_preds(&models, &weights)?;
    let weights_path = cfg.reports_dir().join(format!("{}.weights.csv", a.name));
    let mut w = create(&weights_path)?;
    weights.write_csv(&names, &mut w)?;
    w.flush().map_err(|e| io_err(&weights_path, e))?;
    let preds_path = cfg.preds_dir().join(format!("{}.csv", a.name));
    let mut w = create(&preds_path)?;
    blended.write_csv(&mut w)?;
    w.flush().map_err(|e| io_err(&preds_path, e))?;

    let weight_map: serde_json::Map<String, serde_json::Value> = names
        .iter()
        .zip(weights.as_slice())
        .map(|(n, w)| (n.clone(), json!(w)))
        .collect();
    let model_map: serde_json::Map<String, serde_json::Value> = model_r
        .iter()
        .map(|(n, r)| (n.clone(), json!(round4(*r))))
        .collect();
    let mut report = json!({
        "partition": a.partition.as_str(),
        "step": a.step,
        "weights": weight_map,
        "models": model_map,
        "pearson": round4(r),
    });
    if a.per_fold {
        report["per_fold"] = json!(per_fold);
    }
    let report_path = cfg.reports_dir().join(format!("{}.json", a.name));
    write_text(
        &report_path,
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    println!("weights {}", weights_path.display());
    println!("blended {}", preds_path.display());
    Ok(())
}
