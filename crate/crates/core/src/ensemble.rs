//! Convex blending of per-model predictions and a grid search for the
//! blending weights that maximize validation Pearson r.

use std::io::{Read, Write};

use crate::metrics::{evaluate, MetricsError, ScoreVector};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnsembleError {
    #[error("{models} model(s) but {weights} weight(s)")]
    CountMismatch { models: usize, weights: usize },
    #[error("model {0} does not cover the same ids as model 0")]
    IdMismatch(usize),
    #[error("weights must be non-negative and sum to 1, got {0:?}")]
    NotOnSimplex(Vec<f64>),
    #[error("need at least 2 models, got {0}")]
    TooFewModels(usize),
    #[error("grid step {0} must divide 1 evenly")]
    BadStep(f64),
    #[error("weights file: {0}")]
    File(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Non-negative weights summing to one, one per model.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, EnsembleError> {
        let ok = !weights.is_empty()
            && weights.iter().all(|w| w.is_finite() && *w >= 0.0)
            && (weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(EnsembleWeights(weights))
        } else {
            Err(EnsembleError::NotOnSimplex(weights))
        }
    }

    /// All weight on model `i` of `n`.
    pub fn unit(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        EnsembleWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Writes `model,weight` rows.
    pub fn write_csv<W: Write>(&self, names: &[String], writer: W) -> Result<(), EnsembleError> {
        if names.len() != self.0.len() {
            return Err(EnsembleError::CountMismatch {
                models: names.len(),
                weights: self.0.len(),
            });
        }
        let err = |e: csv::Error| EnsembleError::File(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "weight"]).map_err(err)?;
        for (n, x) in names.iter().zip(&self.0) {
            w.write_record([n.as_str(), &format!("{x:?}")])
                .map_err(err)?;
        }
        w.flush().map_err(|e| EnsembleError::File(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<(Vec<String>, Self), EnsembleError> {
        let err = |e: csv::Error| EnsembleError::File(e.to_string());
        let mut rdr = csv::Reader::from_reader(reader);
        let (mut names, mut ws) = (Vec::new(), Vec::new());
        for row in rdr.records() {
            let row = row.map_err(err)?;
            if row.len() != 2 {
                return Err(EnsembleError::File(format!(
                    "expected 2 fields, got {}",
                    row.len()
                )));
            }
            names.push(row[0].to_string());
            ws.push(
                row[1]
                    .trim()
                    .parse()
                    .map_err(|_| EnsembleError::File(format!("bad weight {:?}", &row[1])))?,
            );
        }
        Ok((names, EnsembleWeights::new(ws)?))
    }
}

fn check_alignment(preds: &[ScoreVector]) -> Result<(), EnsembleError> {
    let Some(first) = preds.first() else {
        return Err(EnsembleError::TooFewModels(0));
    };
    for (i, p) in preds.iter().enumerate().skip(1) {
        if p.len() != first.len() || !p.ids().eq(first.ids()) {
            return Err(EnsembleError::IdMismatch(i));
        }
    }
    Ok(())
}

/// Weighted average `Σ_i w_i · preds_i[id]` for every id.
pub fn blend(
    preds: &[ScoreVector],
    weights: &EnsembleWeights,
) -> Result<ScoreVector, EnsembleError> {
    if preds.len() != weights.len() {
        return Err(EnsembleError::CountMismatch {
            models: preds.len(),
            weights: weights.len(),
        });
    }
    check_alignment(preds)?;
    let mut columns: Vec<_> = preds.iter().map(|p| p.values()).collect();
    let mut out = ScoreVector::new();
    for id in preds[0].ids() {
        let v: f64 = columns
            .iter_mut()
            .zip(weights.as_slice())
            .map(|(col, w)| w * col.next().expect("aligned"))
            .sum();
        out.insert(id.to_string(), v)?;
    }
    Ok(out)
}

/// Every composition of `units` into `parts` non-negative integers, in
/// lexicographic order.
fn compositions(units: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 0..=remaining {
            prefix.push(first);
            rec(remaining - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(units, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

/// Result of [`optimize_weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSearch {
    pub weights: EnsembleWeights,
    pub pearson: f64,
}

/// Exhaustive search over the simplex grid with spacing `step`.
///
/// Grid points are visited in lexicographic order and a later point only
/// replaces the incumbent when it is better by more than `1e-12`, so ties
/// resolve to the lexicographically smallest weight vector.
pub fn optimize_weights(
    preds: &[ScoreVector],
    golds: &ScoreVector,
    step: f64,
) -> Result<WeightSearch, EnsembleError> {
    if preds.len() < 2 {
        return Err(EnsembleError::TooFewModels(preds.len()));
    }
    check_alignment(preds)?;
    let units = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || (units * step - 1.0).abs() > 1e-9 {
        return Err(EnsembleError::BadStep(step));
    }
    let units = units as usize;

    let mut best: Option<WeightSearch> = None;
    for c in compositions(units, preds.len()) {
        let w: Vec<f64> = c.iter().map(|&k| k as f64 / units as f64).collect();
        let weights = EnsembleWeights(w);
        let r = evaluate(&blend(preds, &weights)?, golds)?;
        if best.as_ref().is_none_or(|b| r > b.pearson + 1e-12) {
            best = Some(WeightSearch {
                weights,
                pearson: r,
            });
        }
    }
    Ok(best.expect("grid is never empty"))
}
