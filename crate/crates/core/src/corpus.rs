//! Phrase-pair records: ingestion, validation and anchor-grouped splitting.
//!
//! Every splitter in this module keeps all rows that share an anchor string in
//! the same partition or fold, so that evaluation never sees an anchor that was
//! also trained on.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Errors raised while loading or splitting a corpus.
#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header is missing required column(s): {0}")]
    MissingColumns(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{} invalid row(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<RowError>),
    #[error("invalid split ratios: {0}")]
    BadRatios(String),
    #[error("{groups} anchor group(s) cannot fill {partitions} partition(s)")]
    TooFewGroups { groups: usize, partitions: usize },
    #[error("k must be at least 2, got {0}")]
    BadFoldCount(usize),
    #[error("malformed assignment file: {0}")]
    BadAssignment(String),
}

/// A single problem found on a data line (1-based, header is line 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// A similarity score restricted to the five rating levels 0, .25, .5, .75, 1.
///
/// Stored as hundredths so that equality is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Score(u8);

impl Score {
    pub const LEVELS: [Score; 5] = [Score(0), Score(25), Score(50), Score(75), Score(100)];

    pub fn from_hundredths(h: u8) -> Option<Score> {
        matches!(h, 0 | 25 | 50 | 75 | 100).then_some(Score(h))
    }

    pub fn hundredths(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 100.0
    }

    /// Index of the rating level, 0..5.
    pub fn bin(self) -> usize {
        usize::from(self.0 / 25)
    }
}

impl FromStr for Score {
    type Err = String;

    /// Parses a plain decimal literal ("0.25", "1", ".5", "0.750") without
    /// going through floating point.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let bad = || format!("score {t:?} is not one of 0, 0.25, 0.5, 0.75, 1");
        let (int_part, frac_part) = match t.split_once('.') {
            Some((i, f)) => (i, f),
            None => (t, ""),
        };
        if (int_part.is_empty() && frac_part.is_empty())
            || !int_part.bytes().all(|b| b.is_ascii_digit())
            || !frac_part.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(bad());
        }
        let int: u32 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().map_err(|_| bad())?
        };
        let frac = frac_part.as_bytes();
        if frac.iter().skip(2).any(|&b| b != b'0') {
            return Err(bad());
        }
        let digit = |i: usize| frac.get(i).map_or(0, |b| u32::from(b - b'0'));
        let hundredths = int
            .checked_mul(100)
            .and_then(|v| v.checked_add(digit(0) * 10 + digit(1)))
            .ok_or_else(bad)?;
        u8::try_from(hundredths)
            .ok()
            .and_then(Score::from_hundredths)
            .ok_or_else(bad)
    }
}

impl TryFrom<f64> for Score {
    type Error = String;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        let h = (v * 100.0).round();
        if (v * 100.0 - h).abs() > 1e-9 || !(0.0..=100.0).contains(&h) {
            return Err(format!("score {v} is not a 0.25 increment in [0, 1]"));
        }
        Score::from_hundredths(h as u8).ok_or_else(|| format!("score {v} is not a 0.25 increment"))
    }
}

impl From<Score> for f64 {
    fn from(s: Score) -> f64 {
        s.value()
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// One dataset row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseRecord {
    pub id: String,
    pub anchor: String,
    pub target: String,
    pub context: String,
    pub score: Score,
}

/// True for codes like `A47` or `H04`: one ASCII letter followed by digits.
pub fn is_context_code(code: &str) -> bool {
    let mut chars = code.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && code.len() > 1
        && chars.all(|c| c.is_ascii_digit())
}

const REQUIRED_COLUMNS: [&str; 5] = ["id", "anchor", "target", "context", "score"];

/// Loads and validates a dataset file.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<PhraseRecord>, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_records(file)
}

/// Reads and validates records from any CSV source. All row problems are
/// collected before returning so that callers can report every bad line.
pub fn read_records<R: Read>(reader: R) -> Result<Vec<PhraseRecord>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(CorpusError::EmptyDataset);
    }
    let col = column_index(&headers, &REQUIRED_COLUMNS)?;

    let mut records = Vec::new();
    let mut problems = Vec::new();
    let mut seen_ids = HashMap::new();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(RowError {
                    line,
                    message: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != headers.len() {
            problems.push(RowError {
                line,
                message: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
            continue;
        }
        let field = |name: usize| row[col[name]].to_string();
        let (id, anchor, target, context, score) =
            (field(0), field(1), field(2), field(3), field(4));

        let mut bad = |message: String| problems.push(RowError { line, message });
        if id.trim().is_empty() {
            bad("empty id".into());
            continue;
        }
        if let Some(first) = seen_ids.insert(id.clone(), line) {
            bad(format!("duplicate id {id:?} (first seen on line {first})"));
            continue;
        }
        if anchor.trim().is_empty() {
            bad("empty anchor".into());
            continue;
        }
        if target.trim().is_empty() {
            bad("empty target".into());
            continue;
        }
        if !is_context_code(context.trim()) {
            bad(format!(
                "context {context:?} is not a letter followed by digits"
            ));
            continue;
        }
        let score = match score.parse::<Score>() {
            Ok(s) => s,
            Err(msg) => {
                bad(msg);
                continue;
            }
        };
        records.push(PhraseRecord {
            id,
            anchor,
            target,
            context: context.trim().to_string(),
            score,
        });
    }
    if !problems.is_empty() {
        return Err(CorpusError::Invalid(problems));
    }
    if records.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    Ok(records)
}

fn column_index(headers: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>, CorpusError> {
    let mut missing = Vec::new();
    let idx = names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(name))
                .unwrap_or_else(|| {
                    missing.push(*name);
                    0
                })
        })
        .collect();
    if missing.is_empty() {
        Ok(idx)
    } else {
        Err(CorpusError::MissingColumns(missing.join(",")))
    }
}

/// Summary counts printed by `validate`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub records: usize,
    pub anchors: usize,
    pub contexts: usize,
    pub score_histogram: [usize; 5],
}

impl CorpusStats {
    pub fn of(records: &[PhraseRecord]) -> Self {
        let anchors: BTreeSet<&str> = records.iter().map(|r| r.anchor.as_str()).collect();
        let contexts: BTreeSet<&str> = records.iter().map(|r| r.context.as_str()).collect();
        let mut score_histogram = [0; 5];
        for r in records {
            score_histogram[r.score.bin()] += 1;
        }
        CorpusStats {
            records: records.len(),
            anchors: anchors.len(),
            contexts: contexts.len(),
            score_histogram,
        }
    }
}

/// CPC code to optional title. Unknown codes yield `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextTable {
    titles: BTreeMap<String, Option<String>>,
}

impl ContextTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, code: impl Into<String>, title: Option<String>) -> bool {
        self.titles.insert(code.into(), title).is_none()
    }

    pub fn title(&self, code: &str) -> Option<&str> {
        self.titles.get(code).and_then(|t| t.as_deref())
    }

    pub fn contains(&self, code: &str) -> bool {
        self.titles.contains_key(code)
    }

    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Option<&str>)> {
        self.titles.iter().map(|(k, v)| (k.as_str(), v.as_deref()))
    }

    /// Reads a `code,title` CSV. Duplicate codes are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read(file)
    }

    pub fn read<R: Read>(reader: R) -> Result<Self, CorpusError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = column_index(&headers, &["code", "title"])?;
        let mut table = ContextTable::new();
        let mut problems = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let code = row[col[0]].trim().to_string();
            let title = row[col[1]].trim();
            let title = (!title.is_empty()).then(|| title.to_string());
            if !is_context_code(&code) {
                problems.push(RowError {
                    line,
                    message: format!("bad context code {code:?}"),
                });
            } else if !table.insert(code.clone(), title) {
                problems.push(RowError {
                    line,
                    message: format!("duplicate code {code:?}"),
                });
            }
        }
        if problems.is_empty() {
            Ok(table)
        } else {
            Err(CorpusError::Invalid(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Partition::Train),
            "validation" | "val" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

/// Record id to partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment(pub BTreeMap<String, Partition>);

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Partition> {
        self.0.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self, p: Partition) -> usize {
        self.0.values().filter(|&&q| q == p).count()
    }

    /// Records of `records` that fall in partition `p`, in input order.
    pub fn select<'a>(&self, records: &'a [PhraseRecord], p: Partition) -> Vec<&'a PhraseRecord> {
        records
            .iter()
            .filter(|r| self.get(&r.id) == Some(p))
            .collect()
    }

    /// Writes `id,partition` rows sorted by id.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CorpusError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "partition"])?;
        for (id, p) in &self.0 {
            w.write_record([id.as_str(), p.as_str()])?;
        }
        w.flush().map_err(|source| CorpusError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, CorpusError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let col = column_index(&rdr.headers()?.clone(), &["id", "partition"])?;
        let mut map = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let p = row[col[1]].parse().map_err(CorpusError::BadAssignment)?;
            if map.insert(row[col[0]].to_string(), p).is_some() {
                return Err(CorpusError::BadAssignment(format!(
                    "duplicate id {:?}",
                    &row[col[0]]
                )));
            }
        }
        Ok(SplitAssignment(map))
    }
}

/// Record id to fold index in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn get(&self, id: &str) -> Option<usize> {
        self.folds.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CorpusError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "fold"])?;
        for (id, f) in &self.folds {
            w.write_record([id.as_str(), &f.to_string()])?;
        }
        w.flush().map_err(|source| CorpusError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, CorpusError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let col = column_index(&rdr.headers()?.clone(), &["id", "fold"])?;
        let mut folds = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let f: usize = row[col[1]]
                .trim()
                .parse()
                .map_err(|_| CorpusError::BadAssignment(format!("bad fold {:?}", &row[col[1]])))?;
            folds.insert(row[col[0]].to_string(), f);
        }
        let k = folds.values().max().map_or(0, |m| m + 1);
        Ok(FoldAssignment { k, folds })
    }
}

/// Records sharing one anchor string.
#[derive(Debug)]
struct AnchorGroup<'a> {
    members: Vec<&'a PhraseRecord>,
}

/// Groups records by anchor, in order of first appearance.
fn anchor_groups(records: &[PhraseRecord]) -> Vec<AnchorGroup<'_>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<AnchorGroup<'_>> = Vec::new();
    for r in records {
        let slot = *index.entry(r.anchor.as_str()).or_insert_with(|| {
            groups.push(AnchorGroup {
                members: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].members.push(r);
    }
    groups
}

/// Shuffles anchor groups with a seeded RNG after sorting them by anchor, so
/// the result does not depend on input row order.
fn shuffled_groups(records: &[PhraseRecord], seed: u64) -> Vec<AnchorGroup<'_>> {
    let mut groups = anchor_groups(records);
    groups.sort_by(|a, b| a.members[0].anchor.cmp(&b.members[0].anchor));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    groups
}

/// Anchor-grouped train/validation/test split.
///
/// Groups are visited in seeded random order and each goes to the partition
/// with the largest remaining record quota. Afterwards every context code that
/// occurs in at least two anchor groups is guaranteed a training row.
pub fn holdout_split(
    records: &[PhraseRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, CorpusError> {
    let ratios = [ratios.0, ratios.1, ratios.2];
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(CorpusError::BadRatios(format!(
            "{ratios:?}: every ratio must be positive"
        )));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(format!(
            "{ratios:?} do not sum to 1"
        )));
    }
    if records.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let groups = shuffled_groups(records, seed);
    if groups.len() == 1 {
        log::warn!("only one anchor group: every record goes to the training partition");
        let map = records
            .iter()
            .map(|r| (r.id.clone(), Partition::Train))
            .collect();
        return Ok(SplitAssignment(map));
    }
    if groups.len() < ratios.len() {
        return Err(CorpusError::TooFewGroups {
            groups: groups.len(),
            partitions: ratios.len(),
        });
    }

    let n = records.len() as f64;
    let mut counts = [0usize; 3];
    let mut slot: Vec<usize> = Vec::with_capacity(groups.len());
    for g in &groups {
        let p = (0..3)
            .max_by(|&a, &b| {
                let qa = ratios[a] * n - counts[a] as f64;
                let qb = ratios[b] * n - counts[b] as f64;
                qa.total_cmp(&qb).then(b.cmp(&a))
            })
            .expect("three partitions");
        counts[p] += g.members.len();
        slot.push(p);
    }

    // Every partition receives at least one group.
    for p in 0..3 {
        if slot.contains(&p) {
            continue;
        }
        let donor = (0..3)
            .max_by_key(|&q| slot.iter().filter(|&&s| s == q).count())
            .expect("three partitions");
        let (gi, _) = slot
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == donor)
            .min_by_key(|(i, _)| groups[*i].members.len())
            .expect("donor has groups");
        slot[gi] = p;
    }

    // Contexts spread over several anchor groups must be seen in training.
    let mut groups_per_context: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (gi, g) in groups.iter().enumerate() {
        let ctxs: BTreeSet<&str> = g.members.iter().map(|r| r.context.as_str()).collect();
        for c in ctxs {
            groups_per_context.entry(c).or_default().push(gi);
        }
    }
    for gis in groups_per_context.values() {
        if gis.len() < 2 || gis.iter().any(|&gi| slot[gi] == 0) {
            continue;
        }
        let movable = gis
            .iter()
            .copied()
            .filter(|&gi| slot.iter().filter(|&&s| s == slot[gi]).count() > 1)
            .min_by_key(|&gi| groups[gi].members.len());
        if let Some(gi) = movable {
            slot[gi] = 0;
        }
    }

    let mut map = BTreeMap::new();
    for (g, &p) in groups.iter().zip(&slot) {
        for r in &g.members {
            map.insert(r.id.clone(), Partition::ALL[p]);
        }
    }
    Ok(SplitAssignment(map))
}

/// Stratification labels of one record: its score bin and its context code.
fn label_keys<'a>(r: &'a PhraseRecord, context_ids: &BTreeMap<&'a str, usize>) -> [usize; 2] {
    [r.score.bin(), 5 + context_ids[r.context.as_str()]]
}

/// Anchor-grouped, label-stratified k-fold assignment.
///
/// Labels are the five score bins plus every context code. Groups are taken
/// largest first (seeded order among equal sizes) and placed in the fold whose
/// label and size histogram falls furthest below its `1/k` share, measured as
/// the reduction in squared deviation from target.
pub fn stratified_kfold(
    records: &[PhraseRecord],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, CorpusError> {
    if k < 2 {
        return Err(CorpusError::BadFoldCount(k));
    }
    let mut groups = shuffled_groups(records, seed);
    if groups.len() < k {
        return Err(CorpusError::TooFewGroups {
            groups: groups.len(),
            partitions: k,
        });
    }
    groups.sort_by_key(|g| std::cmp::Reverse(g.members.len()));

    let context_ids: BTreeMap<&str, usize> = records
        .iter()
        .map(|r| r.context.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();
    let n_labels = 5 + context_ids.len();

    let mut global = vec![0.0; n_labels];
    for r in records {
        for l in label_keys(r, &context_ids) {
            global[l] += 1.0;
        }
    }
    let target: Vec<f64> = global.iter().map(|c| c / k as f64).collect();
    let target_size = records.len() as f64 / k as f64;

    let group_labels: Vec<BTreeMap<usize, f64>> = groups
        .iter()
        .map(|g| {
            let mut m = BTreeMap::new();
            for r in &g.members {
                for l in label_keys(r, &context_ids) {
                    *m.entry(l).or_insert(0.0) += 1.0;
                }
            }
            m
        })
        .collect();

    let mut hist = vec![vec![0.0; n_labels]; k];
    let mut sizes = vec![0.0; k];
    let mut slot = vec![0usize; groups.len()];
    for (gi, g) in groups.iter().enumerate() {
        let size = g.members.len() as f64;
        let cost = |f: usize| -> f64 {
            // Change in squared deviation from target when adding this group.
            let label_cost: f64 = group_labels[gi]
                .iter()
                .map(|(&l, &c)| c * (2.0 * (hist[f][l] - target[l]) + c))
                .sum();
            let size_cost = size * (2.0 * (sizes[f] - target_size) + size);
            label_cost + size_cost
        };
        let best = (0..k)
            .min_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b)))
            .expect("k >= 2");
        for (&l, &c) in &group_labels[gi] {
            hist[best][l] += c;
        }
        sizes[best] += size;
        slot[gi] = best;
    }

    // No fold may end up empty.
    for f in 0..k {
        if slot.contains(&f) {
            continue;
        }
        let donor = (0..k)
            .max_by_key(|&q| slot.iter().filter(|&&s| s == q).count())
            .expect("k >= 2");
        let gi = (0..groups.len())
            .filter(|&gi| slot[gi] == donor)
            .min_by_key(|&gi| groups[gi].members.len())
            .expect("donor has groups");
        slot[gi] = f;
    }

    let mut folds = BTreeMap::new();
    for (g, &f) in groups.iter().zip(&slot) {
        for r in &g.members {
            folds.insert(r.id.clone(), f);
        }
    }
    Ok(FoldAssignment { k, folds })
}
