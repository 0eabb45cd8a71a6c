//! Masked binary cross-entropy, gradients, clipping, Adam, adversarial weight
//! perturbation and the epoch loop.
//!
//! The loss over a batch averages binary cross-entropy over supervised
//! positions only; a gold value of [`SENTINEL`] removes a position entirely:
//!
//! ```text
//! L = -(1/N) Σ_{i : G_i ≠ -1} [ G_i·ln P_i + (1 - G_i)·ln(1 - P_i) ]
//! ```
//!
//! where `N` counts the supervised positions. Gold values strictly between 0
//! and 1 are used as soft labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PhraseRecord;
use crate::encoder::{backward, forward_train, Dropout, EncoderError, EncoderParams, ParamKind};
use crate::metrics::evaluate;
use crate::pipeline::{check_compatible, encode, gold_scores, predict_sequences, Variant};
use crate::textprep::{pad_to, EncodedSequence, SequenceBuilder, SENTINEL};
use crate::Error;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("prediction and gold lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("every position is masked; nothing to supervise")]
    NoSupervision,
    #[error("prediction {value} at position {pos} is not strictly inside (0, 1)")]
    BadPrediction { pos: usize, value: f64 },
    #[error("gold value {value} at position {pos} is neither -1 nor in [0, 1]")]
    BadGold { pos: usize, value: f64 },
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Parameters at the start of the failing epoch.
        last_good: Box<EncoderParams>,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// How the loss sum is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Divide by the number of supervised (non-sentinel) positions.
    #[default]
    Supervised,
    /// Divide by the number of real (non-pad) positions, supervised or not.
    AllPositions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Supervised positions that contributed.
    pub count: usize,
    pub batch: usize,
}

/// Masked BCE over probabilities. Positions whose gold is [`SENTINEL`]
/// contribute nothing and their predictions are not inspected.
pub fn masked_bce_loss(pred: &[f64], gold: &[f64]) -> Result<LossReport, TrainingError> {
    if pred.len() != gold.len() {
        return Err(TrainingError::LengthMismatch(pred.len(), gold.len()));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (pos, (&p, &g)) in pred.iter().zip(gold).enumerate() {
        if g == SENTINEL {
            continue;
        }
        if !(0.0..=1.0).contains(&g) {
            return Err(TrainingError::BadGold { pos, value: g });
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(TrainingError::BadPrediction { pos, value: p });
        }
        let mut term = 0.0;
        if g != 0.0 {
            term += g * p.ln();
        }
        if g != 1.0 {
            term += (1.0 - g) * (1.0 - p).ln();
        }
        sum -= term;
        count += 1;
    }
    if count == 0 {
        return Err(TrainingError::NoSupervision);
    }
    Ok(LossReport {
        loss: sum / count as f64,
        count,
        batch: 0,
    })
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Options shared by every loss/gradient evaluation of a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossOptions {
    pub normalization: LossNormalization,
    pub dropout: f64,
}

fn check_gold(seq: &EncodedSequence) -> Result<(), TrainingError> {
    if seq.token_targets.len() != seq.ids.len() {
        return Err(TrainingError::LengthMismatch(
            seq.ids.len(),
            seq.token_targets.len(),
        ));
    }
    match seq
        .token_targets
        .iter()
        .enumerate()
        .find(|(_, &g)| g != SENTINEL && !(0.0..=1.0).contains(&g))
    {
        Some((pos, &value)) => Err(TrainingError::BadGold { pos, value }),
        None => Ok(()),
    }
}

/// Loss and exact parameter gradients for one batch.
///
/// The loss is evaluated from logits (`softplus(z) - G·z` per position), which
/// equals the probability form without saturating near 0 or 1.
pub fn gradients_with<R: Rng>(
    params: &EncoderParams,
    batch: &[EncodedSequence],
    opts: LossOptions,
    mut rng: Option<&mut R>,
) -> Result<(LossReport, EncoderParams), TrainingError> {
    if batch.is_empty() {
        return Err(TrainingError::EmptyBatch);
    }
    for s in batch {
        check_gold(s)?;
    }
    let supervised: usize = batch.iter().map(EncodedSequence::supervised).sum();
    if supervised == 0 {
        return Err(TrainingError::NoSupervision);
    }
    let denom = match opts.normalization {
        LossNormalization::Supervised => supervised,
        LossNormalization::AllPositions => batch
            .iter()
            .map(|s| s.attention_mask.iter().filter(|&&m| m != 0).count())
            .sum(),
    } as f64;

    let mut grads = EncoderParams::zeros(&params.config);
    let mut total = 0.0;
    for seq in batch {
        let dropout = rng.as_mut().map(|r| Dropout {
            rate: opts.dropout,
            rng: &mut **r,
        });
        let pass = forward_train(params, &seq.ids, &seq.attention_mask, dropout)?;
        let mut dlogits = vec![0.0; seq.len()];
        for (t, (&z, &g)) in pass.logits.iter().zip(&seq.token_targets).enumerate() {
            if g == SENTINEL {
                continue;
            }
            total += softplus(z) - g * z;
            dlogits[t] = (pass.scores.0[t] - g) / denom;
        }
        backward(params, &pass.cache, &dlogits, &mut grads);
    }
    for (name, _, m) in grads.tensors() {
        if !m.is_finite() {
            return Err(TrainingError::NonFiniteGradient(name));
        }
    }
    Ok((
        LossReport {
            loss: total / denom,
            count: supervised,
            batch: 0,
        },
        grads,
    ))
}

/// [`gradients_with`] in evaluation mode (no dropout), supervised-count normalization.
pub fn gradients(
    params: &EncoderParams,
    batch: &[EncodedSequence],
) -> Result<(LossReport, EncoderParams), TrainingError> {
    gradients_with::<ChaCha8Rng>(params, batch, LossOptions::default(), None)
}

/// Loss only, evaluation mode; the same quantity [`gradients`] differentiates.
pub fn batch_loss(
    params: &EncoderParams,
    batch: &[EncodedSequence],
    opts: LossOptions,
) -> Result<f64, TrainingError> {
    let supervised: usize = batch.iter().map(EncodedSequence::supervised).sum();
    if supervised == 0 {
        return Err(TrainingError::NoSupervision);
    }
    let denom = match opts.normalization {
        LossNormalization::Supervised => supervised,
        LossNormalization::AllPositions => batch
            .iter()
            .map(|s| s.attention_mask.iter().filter(|&&m| m != 0).count())
            .sum(),
    } as f64;
    let mut total = 0.0;
    for seq in batch {
        let pass = forward_train::<ChaCha8Rng>(params, &seq.ids, &seq.attention_mask, None)?;
        for (&z, &g) in pass.logits.iter().zip(&seq.token_targets) {
            if g != SENTINEL {
                total += softplus(z) - g * z;
            }
        }
    }
    Ok(total / denom)
}

/// Scales every tensor by `max_norm / g` when the global L2 norm `g` exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_by_global_norm(grads: &mut EncoderParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            eps: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// Bias-corrected Adam moments, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: EncoderParams,
    pub second: EncoderParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams, config: AdamConfig) -> Self {
        AdamState {
            config,
            first: EncoderParams::zeros(&params.config),
            second: EncoderParams::zeros(&params.config),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut EncoderParams, grads: &EncoderParams) {
        self.step += 1;
        let AdamConfig {
            lr,
            eps,
            beta1,
            beta2,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors()).zip(
            self.first
                .tensors_mut()
                .into_iter()
                .zip(self.second.tensors_mut()),
        );
        for (((_, _, w), (_, _, g)), ((_, _, m), (_, _, v))) in tensors {
            let it = w
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((w, &g), (m, v)) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AwpConfig {
    pub enabled: bool,
    pub lr: f64,
    pub eps: f64,
    /// First epoch (1-based) in which the perturbation is applied.
    pub start_epoch: usize,
}

impl Default for AwpConfig {
    fn default() -> Self {
        AwpConfig {
            enabled: true,
            lr: 1e-4,
            eps: 1e-2,
            start_epoch: 1,
        }
    }
}

/// Per-tensor size of an applied perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub tensor: String,
    /// `‖w - w₀‖`
    pub delta_norm: f64,
    /// `‖w₀‖`
    pub weight_norm: f64,
}

#[derive(Debug, Clone)]
pub struct AwpOutcome {
    /// Gradients for the optimizer step: adversarial when the attack ran,
    /// otherwise the clean gradients passed in.
    pub gradients: EncoderParams,
    pub loss: Option<LossReport>,
    pub perturbations: Vec<Perturbation>,
    pub skipped: bool,
}

const AWP_TINY: f64 = 1e-12;

/// One adversarial weight perturbation cycle.
///
/// Every weight matrix (biases and layer-norm parameters excluded) is moved
/// along its clean gradient by `lr·‖w‖/‖g‖`, projected back into the ball
/// `‖w - w₀‖ ≤ eps·‖w₀‖`, the batch gradients are recomputed at that point,
/// and the saved weights are written back bit for bit.
pub fn awp_attack_restore<R: Rng>(
    params: &mut EncoderParams,
    batch: &[EncodedSequence],
    clean: &EncoderParams,
    awp: &AwpConfig,
    opts: LossOptions,
    rng: Option<&mut R>,
) -> Result<AwpOutcome, TrainingError> {
    let passthrough = |skipped| AwpOutcome {
        gradients: clean.clone(),
        loss: None,
        perturbations: Vec::new(),
        skipped,
    };
    if !awp.enabled {
        return Ok(passthrough(false));
    }

    let mut saved = Vec::new();
    let mut perturbations = Vec::new();
    for ((name, kind, w), (_, _, g)) in params.tensors_mut().into_iter().zip(clean.tensors()) {
        if kind != ParamKind::Weight {
            continue;
        }
        saved.push(w.as_slice().to_vec());
        let w_norm = w.norm();
        let g_norm = g.norm();
        if g_norm == 0.0 || w_norm == 0.0 {
            perturbations.push(Perturbation {
                tensor: name,
                delta_norm: 0.0,
                weight_norm: w_norm,
            });
            continue;
        }
        let step = awp.lr * w_norm / (g_norm + AWP_TINY);
        let original = saved.last().expect("just pushed");
        let mut delta: Vec<f64> = g.as_slice().iter().map(|gv| step * gv).collect();
        let delta_norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        let bound = awp.eps * w_norm;
        if delta_norm > bound {
            let k = bound / delta_norm;
            delta.iter_mut().for_each(|d| *d *= k);
        }
        for ((wv, &w0), d) in w.as_mut_slice().iter_mut().zip(original).zip(&delta) {
            *wv = w0 + d;
        }
        let applied = w
            .as_slice()
            .iter()
            .zip(original)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        perturbations.push(Perturbation {
            tensor: name,
            delta_norm: applied,
            weight_norm: w_norm,
        });
    }

    let result = gradients_with(params, batch, opts, rng);

    let weights = params
        .tensors_mut()
        .into_iter()
        .filter(|(_, k, _)| *k == ParamKind::Weight);
    for ((_, _, w), s) in weights.zip(saved) {
        w.as_mut_slice().copy_from_slice(&s);
    }

    match result {
        Ok((loss, grads)) if loss.loss.is_finite() => Ok(AwpOutcome {
            gradients: grads,
            loss: Some(loss),
            perturbations,
            skipped: false,
        }),
        Ok(_)
        | Err(TrainingError::NonFiniteGradient(_))
        | Err(TrainingError::Encoder(EncoderError::NonFinite { .. })) => {
            log::warn!("non-finite loss at the perturbed weights; skipping AWP for this step");
            Ok(passthrough(true))
        }
        Err(e) => Err(e),
    }
}

/// Everything the `train` command reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub max_len: usize,
    pub lr: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub awp: bool,
    pub awp_lr: f64,
    pub awp_eps: f64,
    pub awp_start_epoch: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub folds: usize,
    pub loss_normalization: LossNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::V3,
            max_len: 400,
            lr: 1e-5,
            eps: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 1000.0,
            awp: true,
            awp_lr: 1e-4,
            awp_eps: 1e-2,
            awp_start_epoch: 1,
            batch_size: 8,
            epochs: 3,
            max_steps: None,
            seed: 42,
            folds: 4,
            loss_normalization: LossNormalization::Supervised,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            eps: self.eps,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    pub fn awp_config(&self) -> AwpConfig {
        AwpConfig {
            enabled: self.awp,
            lr: self.awp_lr,
            eps: self.awp_eps,
            start_epoch: self.awp_start_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pearson: Option<f64>,
}

impl EpochStats {
    /// `epoch,train_loss,val_pearson` line for the history file.
    pub fn history_line(&self) -> String {
        let r = self
            .val_pearson
            .map_or_else(|| "nan".to_string(), |r| format!("{r:.6}"));
        format!("{},{:.6},{}", self.epoch, self.train_loss, r)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation Pearson r, or the
    /// final parameters when no epoch produced a defined correlation.
    pub best: EncoderParams,
    pub best_epoch: Option<usize>,
    pub last: EncoderParams,
    pub history: Vec<EpochStats>,
    pub steps: usize,
}

/// Shuffles sequences, sorts them by length inside pools of `8·batch_size` so
/// each batch needs little padding, then shuffles the batch order.
fn make_batches<R: Rng>(
    seqs: &[EncodedSequence],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * 8) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| seqs[i].len());
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn padded_batch(seqs: &[EncodedSequence], idx: &[usize]) -> Vec<EncodedSequence> {
    let width = idx.iter().map(|&i| seqs[i].len()).max().unwrap_or(0);
    idx.iter()
        .map(|&i| pad_to(&seqs[i], width).expect("width is the batch maximum"))
        .collect()
}

/// Trains `init` on `train` and tracks Pearson r on `val` after every epoch.
pub fn train(
    train: &[PhraseRecord],
    val: &[PhraseRecord],
    builder: &SequenceBuilder<'_>,
    init: EncoderParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, Error> {
    if train.is_empty() {
        return Err(TrainingError::EmptyPartition("training").into());
    }
    if val.is_empty() {
        return Err(TrainingError::EmptyPartition("validation").into());
    }
    check_compatible(&init, builder)?;
    let train_seqs = encode(train, cfg.variant, builder)?;
    let val_seqs = encode(val, cfg.variant, builder)?;
    let val_gold = gold_scores(val)?;
    let opts = LossOptions {
        normalization: cfg.loss_normalization,
        dropout: init.config.dropout,
    };
    let awp = cfg.awp_config();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut adam = AdamState::new(&params, cfg.adam());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let epoch_start = params.clone();
        let diverged = |reason: String| TrainingError::Diverged {
            epoch,
            reason,
            last_good: Box::new(epoch_start.clone()),
        };
        let mut losses = Vec::new();
        for idx in make_batches(&train_seqs, cfg.batch_size.max(1), &mut rng) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch = padded_batch(&train_seqs, &idx);
            if batch.iter().all(|s| s.supervised() == 0) {
                continue;
            }
            let (mut report, mut grads) =
                match gradients_with(&params, &batch, opts, Some(&mut rng)) {
                    Ok(r) => r,
                    Err(
                        e @ (TrainingError::NonFiniteGradient(_)
                        | TrainingError::Encoder(EncoderError::NonFinite { .. })),
                    ) => return Err(diverged(e.to_string()).into()),
                    Err(e) => return Err(e.into()),
                };
            if !report.loss.is_finite() {
                return Err(diverged(format!("loss {} at step {}", report.loss, steps + 1)).into());
            }
            if awp.enabled && epoch >= awp.start_epoch {
                grads =
                    awp_attack_restore(&mut params, &batch, &grads, &awp, opts, Some(&mut rng))?
                        .gradients;
            }
            clip_by_global_norm(&mut grads, cfg.clip_norm);
            adam.update(&mut params, &grads);
            if !params.is_finite() {
                return Err(
                    diverged(format!("non-finite parameters after step {}", steps + 1)).into(),
                );
            }
            report.batch = steps;
            losses.push(report.loss);
            steps += 1;
        }
        if losses.is_empty() {
            break;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let preds = predict_sequences(&params, &val_seqs, cfg.variant)?;
        let val_pearson = match evaluate(&preds, &val_gold) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("epoch {epoch}: validation Pearson undefined ({e})");
                None
            }
        };
        let r = val_pearson.map_or_else(|| "undefined".to_string(), |r| format!("{r:.4}"));
        log::info!("epoch {epoch}: train loss {train_loss:.6}, validation r {r}");
        if let Some(r) = val_pearson {
            if best.as_ref().is_none_or(|(b, _, _)| r > *b) {
                best = Some((r, epoch, params.clone()));
            }
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_pearson,
        });
    }

    let (best_params, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (params.clone(), None),
    };
    Ok(TrainOutcome {
        best: best_params,
        best_epoch,
        last: params,
        history,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::textprep::{TargetSpan, CLS, PAD, SEP};

    fn tiny_params(seed: u64) -> EncoderParams {
        EncoderParams::init(&EncoderConfig {
            vocab_size: 12,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 1,
            ffn_dim: 8,
            max_len: 10,
            dropout: 0.0,
            seed,
        })
        .unwrap()
    }

    fn seq(ids: Vec<u32>, targets: Vec<f64>) -> EncodedSequence {
        EncodedSequence {
            attention_mask: vec![1; ids.len()],
            ids,
            token_targets: targets,
            spans: vec![TargetSpan {
                target: 0,
                range: 0..1,
            }],
            pair_ids: vec!["x".into()],
        }
    }

    #[test]
    fn bce_closed_form_cases() {
        let ln2 = std::f64::consts::LN_2;
        let r = masked_bce_loss(&[0.5], &[1.0]).unwrap();
        assert!((r.loss - ln2).abs() < 1e-15);
        let r = masked_bce_loss(&[0.9, 0.5], &[-1.0, 1.0]).unwrap();
        assert!((r.loss - ln2).abs() < 1e-15);
        assert_eq!(r.count, 1);
        let near = masked_bce_loss(&[1.0 - 1e-12, 1e-12], &[1.0, 0.0]).unwrap();
        assert!(near.loss < 1e-11);
    }

    #[test]
    fn bce_errors() {
        assert!(matches!(
            masked_bce_loss(&[0.5, 0.5], &[-1.0, -1.0]),
            Err(TrainingError::NoSupervision)
        ));
        assert!(matches!(
            masked_bce_loss(&[0.5], &[1.5]),
            Err(TrainingError::BadGold { .. })
        ));
        assert!(matches!(
            masked_bce_loss(&[1.0], &[1.0]),
            Err(TrainingError::BadPrediction { .. })
        ));
        assert!(matches!(
            masked_bce_loss(&[0.5], &[1.0, 0.0]),
            Err(TrainingError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn logit_loss_matches_probability_loss() {
        let p = tiny_params(1);
        let s = seq(
            vec![CLS, 5, SEP, 7, 8, SEP],
            vec![0.25, -1.0, -1.0, 0.75, 1.0, -1.0],
        );
        let (report, _) = gradients(&p, std::slice::from_ref(&s)).unwrap();
        let scores = crate::encoder::forward(&p, &s.ids, &s.attention_mask).unwrap();
        let direct = masked_bce_loss(scores.as_slice(), &s.token_targets).unwrap();
        assert!((report.loss - direct.loss).abs() < 1e-12);
        assert_eq!(report.count, 3);
    }

    #[test]
    fn pad_embedding_gets_zero_gradient() {
        let p = tiny_params(2);
        let s = seq(vec![CLS, 5, SEP, 6, SEP], vec![0.5, -1.0, -1.0, 0.75, -1.0]);
        let padded = pad_to(&s, 8).unwrap();
        let (_, g) = gradients(&p, &[padded]).unwrap();
        assert!(g
            .token_embedding
            .row(PAD as usize)
            .iter()
            .all(|&v| v == 0.0));
        assert!(g.position_embedding.row(7).iter().all(|&v| v == 0.0));
        assert!(g.token_embedding.row(5).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn padding_leaves_loss_unchanged() {
        let p = tiny_params(3);
        let s = seq(
            vec![CLS, 5, SEP, 6, SEP, 9],
            vec![-1.0, -1.0, -1.0, 0.75, -1.0, 0.25],
        );
        let a = batch_loss(&p, std::slice::from_ref(&s), LossOptions::default()).unwrap();
        let b = batch_loss(&p, &[pad_to(&s, 8).unwrap()], LossOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping() {
        let mut g = tiny_params(4);
        let n = g.global_norm();
        g.scale(2000.0 / n);
        let before = g.clone();
        let pre = clip_by_global_norm(&mut g, 1000.0);
        assert!((pre - 2000.0).abs() < 1e-9);
        for ((_, _, a), (_, _, b)) in g.tensors().into_iter().zip(before.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y / 2.0).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
        let mut small = tiny_params(4);
        small.scale(10.0 / small.global_norm());
        let keep = small.clone();
        clip_by_global_norm(&mut small, 1000.0);
        assert_eq!(small, keep);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = tiny_params(5);
        let before = p.clone();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let zero = EncoderParams::zeros(&p.config);
        adam.update(&mut p, &zero);
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = tiny_params(6);
        let before = p.clone();
        let mut g = tiny_params(7);
        g.scale(0.01);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&p, cfg);
        adam.update(&mut p, &g);
        // After one step m̂ = g and v̂ = g², so Δw = -lr·g/(|g| + eps).
        for (((_, _, w), (_, _, w0)), (_, _, gg)) in p
            .tensors()
            .into_iter()
            .zip(before.tensors())
            .zip(g.tensors())
        {
            for ((&w, &w0), &gv) in w.as_slice().iter().zip(w0.as_slice()).zip(gg.as_slice()) {
                let expect = -cfg.lr * gv / (gv.abs() + cfg.eps);
                assert!(
                    ((w - w0) - expect).abs() < 1e-15,
                    "{} vs {}",
                    w - w0,
                    expect
                );
            }
        }
    }

    #[test]
    fn awp_disabled_passes_gradients_through() {
        let mut p = tiny_params(8);
        let s = seq(vec![CLS, 5, SEP, 6], vec![-1.0, -1.0, -1.0, 0.5]);
        let (_, g) = gradients(&p, std::slice::from_ref(&s)).unwrap();
        let awp = AwpConfig {
            enabled: false,
            ..AwpConfig::default()
        };
        let out =
            awp_attack_restore::<ChaCha8Rng>(&mut p, &[s], &g, &awp, LossOptions::default(), None)
                .unwrap();
        assert_eq!(out.gradients, g);
        assert!(out.perturbations.is_empty());
    }

    #[test]
    fn awp_restores_and_changes_gradients() {
        let mut p = tiny_params(9);
        let before = p.clone();
        let s = seq(vec![CLS, 5, SEP, 6, 7], vec![-1.0, -1.0, -1.0, 0.5, 1.0]);
        let (_, g) = gradients(&p, std::slice::from_ref(&s)).unwrap();
        let awp = AwpConfig {
            lr: 0.5,
            ..AwpConfig::default()
        };
        let out =
            awp_attack_restore::<ChaCha8Rng>(&mut p, &[s], &g, &awp, LossOptions::default(), None)
                .unwrap();
        assert_eq!(p, before);
        assert_ne!(out.gradients, g);
        for pert in &out.perturbations {
            assert!(
                pert.delta_norm <= awp.eps * pert.weight_norm + 1e-12,
                "{pert:?}"
            );
        }
    }

    #[test]
    fn batches_cover_every_sequence_once() {
        let seqs: Vec<_> = (1..=21).map(|n| seq(vec![CLS; n], vec![0.5; n])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&seqs, 4, &mut rng);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..21).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 4));
    }
}
