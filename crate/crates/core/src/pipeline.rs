//! Glue between records, input layouts and the encoder: turning records into
//! sequences for a chosen variant and sequence scores back into per-record
//! predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::PhraseRecord;
use crate::encoder::{aggregate_spans, forward, pooled_score, EncoderParams};
use crate::metrics::ScoreVector;
use crate::textprep::{group_by_anchor_context, EncodedSequence, SequenceBuilder};
use crate::Error;

/// Input construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `[CLS] anchor [SEP] target [SEP] context`
    V1,
    /// V1 plus the context title after another `[SEP]`.
    V2,
    /// Grouped targets with per-token scores.
    #[default]
    V3,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            other => Err(format!("unknown variant {other:?} (expected v1, v2 or v3)")),
        }
    }
}

/// Encodes records with the chosen layout. V1/V2 yield one sequence per
/// record; V3 yields one or more per (anchor, context) group.
pub fn encode<'a, I>(
    records: I,
    variant: Variant,
    builder: &SequenceBuilder<'_>,
) -> Result<Vec<EncodedSequence>, Error>
where
    I: IntoIterator<Item = &'a PhraseRecord>,
{
    match variant {
        Variant::V1 => records
            .into_iter()
            .map(|r| builder.v1(r).map_err(Error::from))
            .collect(),
        Variant::V2 => records
            .into_iter()
            .map(|r| builder.v2(r).map_err(Error::from))
            .collect(),
        Variant::V3 => {
            let mut out = Vec::new();
            for g in group_by_anchor_context(records) {
                out.extend(builder.v3(&g)?);
            }
            Ok(out)
        }
    }
}

/// Scores every encoded sequence and maps the result back to record ids.
pub fn predict_sequences(
    params: &EncoderParams,
    seqs: &[EncodedSequence],
    variant: Variant,
) -> Result<ScoreVector, Error> {
    let mut out = ScoreVector::new();
    for s in seqs {
        let scores = forward(params, &s.ids, &s.attention_mask)?;
        match variant {
            Variant::V1 | Variant::V2 => {
                let p = pooled_score(&scores).expect("sequences are never empty");
                out.insert(s.pair_ids[0].clone(), p)?;
            }
            Variant::V3 => {
                for ((_, p), id) in aggregate_spans(&scores, &s.spans)?
                    .into_iter()
                    .zip(&s.pair_ids)
                {
                    out.insert(id.clone(), p)?;
                }
            }
        }
    }
    Ok(out)
}

/// One prediction per record.
pub fn predict<'a, I>(
    params: &EncoderParams,
    records: I,
    variant: Variant,
    builder: &SequenceBuilder<'_>,
) -> Result<ScoreVector, Error>
where
    I: IntoIterator<Item = &'a PhraseRecord>,
{
    check_compatible(params, builder)?;
    let seqs = encode(records, variant, builder)?;
    predict_sequences(params, &seqs, variant)
}

/// Fails when the builder can emit sequences the encoder cannot take.
pub fn check_compatible(
    params: &EncoderParams,
    builder: &SequenceBuilder<'_>,
) -> Result<(), Error> {
    let cfg = &params.config;
    if builder.max_len > cfg.max_len {
        return Err(Error::Mismatch(format!(
            "sequence max_len {} exceeds encoder max_len {}",
            builder.max_len, cfg.max_len
        )));
    }
    if builder.vocab.len() != cfg.vocab_size {
        return Err(Error::Mismatch(format!(
            "vocabulary has {} tokens but the encoder expects {}",
            builder.vocab.len(),
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Gold scores of `records` as a [`ScoreVector`].
pub fn gold_scores<'a, I>(records: I) -> Result<ScoreVector, Error>
where
    I: IntoIterator<Item = &'a PhraseRecord>,
{
    Ok(ScoreVector::from_pairs(
        records.into_iter().map(|r| (r.id.clone(), r.score.value())),
    )?)
}
