//! Pearson correlation and cross-validation summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde_json::json;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("correlation is undefined for constant input")]
    ConstantInput,
    #[error("non-finite value for id {0:?}")]
    NonFinite(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("{} id(s) missing from predictions, e.g. {:?}", .0.len(), preview(.0))]
    MissingFromPredictions(Vec<String>),
    #[error("{} id(s) missing from gold scores, e.g. {:?}", .0.len(), preview(.0))]
    MissingFromGold(Vec<String>),
    #[error("fold {0} is empty")]
    EmptyFold(usize),
    #[error("id {0:?} appears in more than one fold")]
    OverlappingFolds(String),
    #[error("score file: {0}")]
    File(String),
}

fn preview(ids: &[String]) -> &[String] {
    &ids[..ids.len().min(3)]
}

/// Scores keyed by record id, iterated in id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreVector(BTreeMap<String, f64>);

impl ScoreVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut v = ScoreVector::new();
        for (id, s) in pairs {
            v.insert(id.into(), s)?;
        }
        Ok(v)
    }

    pub fn insert(&mut self, id: String, score: f64) -> Result<(), MetricsError> {
        if !score.is_finite() {
            return Err(MetricsError::NonFinite(id));
        }
        if self.0.contains_key(&id) {
            return Err(MetricsError::DuplicateId(id));
        }
        self.0.insert(id, score);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.0.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.values().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Keeps only the ids for which `keep` returns true.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.0.retain(|k, _| keep(k));
    }

    /// Reads an `id,score` CSV; other columns are ignored.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, MetricsError> {
        let file_err = |e: csv::Error| MetricsError::File(e.to_string());
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(file_err)?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(name))
                .ok_or_else(|| MetricsError::File(format!("missing column {name:?}")))
        };
        let (id_col, score_col) = (find("id")?, find("score")?);
        let mut out = ScoreVector::new();
        for row in rdr.records() {
            let row = row.map_err(file_err)?;
            let line = row.position().map_or(0, |p| p.line());
            let score: f64 = row[score_col].trim().parse().map_err(|_| {
                MetricsError::File(format!("line {line}: bad score {:?}", &row[score_col]))
            })?;
            out.insert(row[id_col].to_string(), score)?;
        }
        Ok(out)
    }

    /// Writes `id,score` rows in id order, scores in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MetricsError> {
        let file_err = |e: csv::Error| MetricsError::File(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "score"]).map_err(file_err)?;
        for (id, s) in &self.0 {
            w.write_record([id.as_str(), &format!("{s:?}")])
                .map_err(file_err)?;
        }
        w.flush().map_err(|e| MetricsError::File(e.to_string()))
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Pearson correlation of two equal-length samples.
///
/// Two passes: means first, then centered cross and square sums, all with
/// compensated summation. The `1/n` factors cancel and are never applied.
/// Any constant input is rejected rather than mapped to 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooShort(x.len()));
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite(format!("index {}", i % x.len())));
    }
    let n = x.len() as f64;
    let mx = compensated_sum(x.iter().copied()) / n;
    let my = compensated_sum(y.iter().copied()) / n;
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = compensated_sum(y.iter().map(|b| (b - my) * (b - my)));
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson r between predictions and gold scores aligned by id.
pub fn evaluate(preds: &ScoreVector, golds: &ScoreVector) -> Result<f64, MetricsError> {
    let missing: Vec<String> = golds
        .ids()
        .filter(|id| preds.get(id).is_none())
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingFromPredictions(missing));
    }
    let extra: Vec<String> = preds
        .ids()
        .filter(|id| golds.get(id).is_none())
        .map(String::from)
        .collect();
    if !extra.is_empty() {
        return Err(MetricsError::MissingFromGold(extra));
    }
    let x: Vec<f64> = preds.values().collect();
    let y: Vec<f64> = golds.values().collect();
    pearson(&x, &y)
}

/// Per-fold and pooled out-of-fold correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub fold_r: Vec<f64>,
    /// Mean of the per-fold values.
    pub mean_r: f64,
    /// Correlation over all out-of-fold predictions together; the headline score.
    pub pooled_r: f64,
    pub folds: usize,
}

impl CvReport {
    /// JSON text with every correlation rounded to 4 decimals.
    pub fn to_json(&self) -> String {
        let folds: Vec<f64> = self.fold_r.iter().map(|&r| round4(r)).collect();
        let v = json!({
            "folds": self.folds,
            "fold_pearson": folds,
            "mean_pearson": round4(self.mean_r),
            "pooled_pearson": round4(self.pooled_r),
        });
        serde_json::to_string_pretty(&v).expect("report serializes")
    }
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Builds a [`CvReport`] from `(predictions, gold)` pairs, one per fold.
pub fn cv_report(folds: &[(ScoreVector, ScoreVector)]) -> Result<CvReport, MetricsError> {
    let mut seen = BTreeSet::new();
    let mut fold_r = Vec::with_capacity(folds.len());
    let mut pooled_pred = ScoreVector::new();
    let mut pooled_gold = ScoreVector::new();
    for (i, (p, g)) in folds.iter().enumerate() {
        if p.is_empty() || g.is_empty() {
            return Err(MetricsError::EmptyFold(i));
        }
        for id in g.ids() {
            if !seen.insert(id.to_string()) {
                return Err(MetricsError::OverlappingFolds(id.to_string()));
            }
        }
        fold_r.push(evaluate(p, g)?);
        for (id, s) in p.iter() {
            pooled_pred.insert(id.to_string(), s)?;
        }
        for (id, s) in g.iter() {
            pooled_gold.insert(id.to_string(), s)?;
        }
    }
    if folds.is_empty() {
        return Err(MetricsError::EmptyFold(0));
    }
    let pooled_r = evaluate(&pooled_pred, &pooled_gold)?;
    let mean_r = fold_r.iter().sum::<f64>() / fold_r.len() as f64;
    Ok(CvReport {
        fold_r,
        mean_r,
        pooled_r,
        folds: folds.len(),
    })
}

/// Plain-text table of named scores at 4 decimals, e.g. one row per input
/// variant or per ensemble member.
pub fn render_score_table(label: &str, rows: &[(String, f64)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain([label.len()])
        .max()
        .unwrap_or(0);
    let mut out = format!(
        "| {label:<width$} | CV Score |\n|{}|----------|\n",
        "-".repeat(width + 2)
    );
    for (name, r) in rows {
        out.push_str(&format!("| {name:<width$} | {r:>8.4} |\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(pairs: &[(&str, f64)]) -> ScoreVector {
        ScoreVector::from_pairs(pairs.iter().map(|&(k, v)| (k, v))).unwrap()
    }

    #[test]
    fn perfect_correlations() {
        assert_eq!(pearson(&[0.0, 0.25, 1.0], &[0.0, 0.25, 1.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(
            pearson(&[1.0, 1.0], &[2.0, 2.0]),
            Err(MetricsError::ConstantInput)
        );
        assert_eq!(
            pearson(&[1.0, 2.0], &[2.0, 2.0]),
            Err(MetricsError::ConstantInput)
        );
        assert_eq!(pearson(&[1.0], &[2.0]), Err(MetricsError::TooShort(1)));
        assert_eq!(
            pearson(&[1.0, 2.0], &[2.0]),
            Err(MetricsError::LengthMismatch(2, 1))
        );
        assert!(matches!(
            pearson(&[1.0, f64::NAN], &[2.0, 1.0]),
            Err(MetricsError::NonFinite(_))
        ));
    }

    #[test]
    fn evaluate_aligns_by_id() {
        let gold = sv(&[("a", 0.0), ("b", 0.5), ("c", 1.0), ("d", 0.25)]);
        let pred = sv(&[("d", 0.3), ("c", 0.9), ("a", 0.1), ("b", 0.4)]);
        let r = evaluate(&pred, &gold).unwrap();
        let sorted = pearson(&[0.1, 0.4, 0.9, 0.3], &[0.0, 0.5, 1.0, 0.25]).unwrap();
        assert_eq!(r, sorted);
        assert_eq!(evaluate(&gold, &gold).unwrap(), 1.0);
        let partial = sv(&[("a", 0.1), ("b", 0.4)]);
        match evaluate(&partial, &gold) {
            Err(MetricsError::MissingFromPredictions(ids)) => assert_eq!(ids, ["c", "d"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn affine_prediction_is_perfect() {
        let gold = sv(&[("a", 0.0), ("b", 0.5), ("c", 1.0), ("d", 0.25), ("e", 0.75)]);
        let pred = ScoreVector::from_pairs(gold.iter().map(|(k, v)| (k, 0.5 * v + 0.1))).unwrap();
        assert!((evaluate(&pred, &gold).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cv_report_pools_folds() {
        let g1 = sv(&[("a", 0.0), ("b", 0.5), ("c", 1.0)]);
        let g2 = sv(&[("d", 0.0), ("e", 0.5), ("f", 1.0)]);
        let report = cv_report(&[(g1.clone(), g1.clone()), (g2.clone(), g2.clone())]).unwrap();
        assert_eq!(report.fold_r, vec![1.0, 1.0]);
        assert_eq!(report.pooled_r, 1.0);
        assert_eq!(report.folds, 2);
        assert!(matches!(
            cv_report(&[(g1.clone(), g1.clone()), (g1.clone(), g1.clone())]),
            Err(MetricsError::OverlappingFolds(_))
        ));
        assert!(matches!(
            cv_report(&[(ScoreVector::new(), ScoreVector::new())]),
            Err(MetricsError::EmptyFold(0))
        ));
        let json = report.to_json();
        assert!(json.contains("\"pooled_pearson\": 1.0"));
    }

    #[test]
    fn score_file_round_trip() {
        let v = sv(&[("b", 0.123456789), ("a", 1e-9)]);
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("id,score\na,"));
        assert_eq!(ScoreVector::read_csv(&buf[..]).unwrap(), v);
        let dataset = "id,anchor,target,context,score\nx,a,b,A47,0.5\n";
        assert_eq!(
            ScoreVector::read_csv(dataset.as_bytes()).unwrap().get("x"),
            Some(0.5)
        );
    }

    #[test]
    fn variant_table_has_a_row_per_variant() {
        let rows = vec![
            ("V1".to_string(), 0.8347),
            ("V2".to_string(), 0.8369),
            ("V3".to_string(), 0.8512),
        ];
        let table = render_score_table("Model Variant", &rows);
        assert_eq!(table.lines().count(), 5);
        assert!(table.contains("| V3            |   0.8512 |"));
    }
}
