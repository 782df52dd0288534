//! Training: SI-SDR objective under utterance-level permutation-invariant
//! assignment, Adam with bias correction, the two-phase learning-rate
//! schedule, global-norm gradient clipping, and early stopping.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::rng::SeededRng;
use crate::separator::DpRcNet;
use crate::signal::{MixtureSample, Waveform};
use crate::tensor::{Tensor, TensorError};

pub const SI_SDR_EPS: f64 = 1e-8;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Epoch at which the learning-rate decay factor switches.
pub const LR_PHASE_SWITCH: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Tensor(TensorError),
    /// The reference signal carries no energy.
    SilentReference,
    /// Estimate/reference lengths differ.
    LengthMismatch { left: usize, right: usize },
    /// Speaker counts differ between estimates and references.
    SpeakerCountMismatch { estimates: usize, references: usize },
    EmptyDataset(&'static str),
    NonFiniteLoss { epoch: usize, batch: usize },
    NonFiniteGradient { param: String },
    InvalidConfig(&'static str),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::SilentReference => write!(f, "reference signal is all-zero"),
            TrainError::LengthMismatch { left, right } => {
                write!(f, "signal lengths differ: {left} vs {right}")
            }
            TrainError::SpeakerCountMismatch { estimates, references } => {
                write!(f, "speaker counts differ: {estimates} estimates vs {references} references")
            }
            TrainError::EmptyDataset(which) => write!(f, "{which} dataset is empty"),
            TrainError::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            TrainError::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter {param}")
            }
            TrainError::InvalidConfig(msg) => write!(f, "{msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Training recipe parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Crop length for training utterances, in seconds.
    pub utterance_seconds: f64,
    pub epochs: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Learning-rate factor applied every two epochs before the switch.
    pub decay_phase1: f64,
    /// Learning-rate factor applied every two epochs from the switch on.
    pub decay_phase2: f64,
    /// Maximum global L2 norm for gradients.
    pub clip_norm: f64,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            utterance_seconds: 4.0,
            epochs: 150,
            lr0: 1e-3,
            decay_phase1: 0.98,
            decay_phase2: 0.9,
            clip_norm: 5.0,
            patience: 10,
            batch_size: 4,
            seed: 0,
        }
    }
}

// ── metrics ─────────────────────────────────────────────────────────

/// Scale-invariant signal-to-distortion ratio in dB:
/// alpha = <est, ref>/||ref||^2, value = 10 log10(||alpha ref||^2 /
/// (||alpha ref - est||^2 + eps ||alpha ref||^2)).
///
/// The guard term is proportional to the target power so the value is
/// invariant to rescaling either argument; it caps the perfect-estimate
/// case at -10 log10(eps) instead of infinity.
pub fn si_sdr(estimate: &[f64], reference: &[f64], eps: f64) -> TrainResult<f64> {
    if estimate.len() != reference.len() {
        return Err(TrainError::LengthMismatch { left: estimate.len(), right: reference.len() });
    }
    let ref_power: f64 = reference.iter().map(|v| v * v).sum();
    if ref_power == 0.0 {
        return Err(TrainError::SilentReference);
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_power;
    let signal: f64 = alpha * alpha * ref_power;
    let noise: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = alpha * r - e;
            d * d
        })
        .sum();
    Ok(10.0 * math::log10(signal / (noise + eps * signal)))
}

/// Plain (scale-dependent) SDR in dB; the same eps guards the
/// perfect-estimate case.
pub fn sdr(estimate: &[f64], reference: &[f64], eps: f64) -> TrainResult<f64> {
    if estimate.len() != reference.len() {
        return Err(TrainError::LengthMismatch { left: estimate.len(), right: reference.len() });
    }
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(TrainError::SilentReference);
    }
    let noise: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (r - e) * (r - e))
        .sum();
    Ok(10.0 * math::log10(signal / (noise + eps * signal)))
}

/// Differentiable SI-SDR of a graph tensor against a constant reference.
pub fn si_sdr_tensor(estimate: &Tensor, reference: &[f64], eps: f64) -> TrainResult<Tensor> {
    if estimate.numel() != reference.len() {
        return Err(TrainError::LengthMismatch { left: estimate.numel(), right: reference.len() });
    }
    let ref_power: f64 = reference.iter().map(|v| v * v).sum();
    if ref_power == 0.0 {
        return Err(TrainError::SilentReference);
    }
    let flat = estimate.reshape(&[estimate.numel()])?;
    let reference = Tensor::from_vec(&[flat.numel()], reference.to_vec())?;
    let alpha = flat.mul(&reference)?.sum().scale(1.0 / ref_power);
    let target = alpha.mul(&reference)?;
    let err = target.sub(&flat)?;
    let signal = target.mul(&target)?.sum();
    let noise = err.mul(&err)?.sum().add(&signal.scale(eps))?;
    const LOG10_E_TIMES_10: f64 = 4.342944819032518;
    Ok(signal.div(&noise)?.ln().scale(LOG10_E_TIMES_10))
}

/// All permutations of 0..n in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn build(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                build(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    build(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Utterance-level permutation-invariant loss and the assignment that won.
pub struct UpitOutcome {
    /// Negative best mean SI-SDR, differentiable through the selected pairs.
    pub loss: Tensor,
    /// permutation[s] is the reference index assigned to estimate s.
    pub permutation: Vec<usize>,
    /// Best mean SI-SDR value in dB.
    pub mean_si_sdr: f64,
}

/// Enumerates all S! assignments of estimates to references, keeps the one
/// maximizing mean SI-SDR, and returns its negation as the loss.
pub fn upit_loss(estimates: &[Tensor], references: &[Waveform]) -> TrainResult<UpitOutcome> {
    let s = estimates.len();
    if s == 0 || s != references.len() {
        return Err(TrainError::SpeakerCountMismatch { estimates: s, references: references.len() });
    }
    let mut pairwise: Vec<Vec<Tensor>> = Vec::with_capacity(s);
    for est in estimates {
        let mut row = Vec::with_capacity(s);
        for reference in references {
            row.push(si_sdr_tensor(est, &reference.samples, SI_SDR_EPS)?);
        }
        pairwise.push(row);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(s) {
        let score: f64 = perm.iter().enumerate().map(|(i, &j)| pairwise[i][j].item()).sum::<f64>()
            / s as f64;
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, perm));
        }
    }
    let (mean_si_sdr, permutation) = best.expect("at least one permutation");
    let mut total: Option<Tensor> = None;
    for (i, &j) in permutation.iter().enumerate() {
        let term = pairwise[i][j].clone();
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    let loss = total.expect("non-empty").scale(-1.0 / s as f64);
    Ok(UpitOutcome { loss, permutation, mean_si_sdr })
}

/// Mean SI-SDR improvement over the mixture across speakers, resolving the
/// output permutation by best mean SI-SDR. Also reports the plain SDR
/// improvement under the same assignment.
pub fn separation_improvement(
    estimates: &[Waveform],
    references: &[Waveform],
    mixture: &Waveform,
) -> TrainResult<(f64, f64)> {
    let s = estimates.len();
    if s == 0 || s != references.len() {
        return Err(TrainError::SpeakerCountMismatch { estimates: s, references: references.len() });
    }
    let mut pairwise = vec![vec![0.0; s]; s];
    for (i, est) in estimates.iter().enumerate() {
        for (j, reference) in references.iter().enumerate() {
            pairwise[i][j] = si_sdr(&est.samples, &reference.samples, SI_SDR_EPS)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(s) {
        let score: f64 =
            perm.iter().enumerate().map(|(i, &j)| pairwise[i][j]).sum::<f64>() / s as f64;
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, perm));
        }
    }
    let (_, perm) = best.expect("at least one permutation");
    let mut si_sdri = 0.0;
    let mut sdri = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        let reference = &references[j];
        si_sdri += pairwise[i][j] - si_sdr(&mixture.samples, &reference.samples, SI_SDR_EPS)?;
        sdri += sdr(&estimates[i].samples, &reference.samples, SI_SDR_EPS)?
            - sdr(&mixture.samples, &reference.samples, SI_SDR_EPS)?;
    }
    Ok((si_sdri / s as f64, sdri / s as f64))
}

// ── optimizer ───────────────────────────────────────────────────────

/// Optimizer moments, bookkeeping, and the seeded stream driving batch
/// order and stochastic depth.
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub epochs_since_improvement: usize,
    pub rng: SeededRng,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn new(model: &DpRcNet, seed: u64) -> TrainState {
        let mut first = Vec::new();
        let mut second = Vec::new();
        model.for_each_param(|_, t| {
            first.push(vec![0.0; t.numel()]);
            second.push(vec![0.0; t.numel()]);
        });
        TrainState {
            step: 0,
            epoch: 0,
            best_score: None,
            epochs_since_improvement: 0,
            rng: SeededRng::new(seed),
            first_moment: first,
            second_moment: second,
        }
    }
}

/// One Adam update for a single parameter buffer. `t` is the 1-based step
/// count after the increment.
pub fn adam_update(data: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let bc1 = 1.0 - math::pow_int(ADAM_BETA1, t as u32);
    let bc2 = 1.0 - math::pow_int(ADAM_BETA2, t as u32);
    for i in 0..data.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        data[i] -= lr * m_hat / (math::sqrt(v_hat) + ADAM_EPS);
    }
}

/// Applies one Adam step to every model parameter. `grads` is aligned with
/// the canonical parameter order. Non-finite gradients abort with the
/// parameter named.
pub fn adam_step(
    model: &mut DpRcNet,
    grads: &[Vec<f64>],
    state: &mut TrainState,
    lr: f64,
) -> TrainResult<()> {
    let mut bad: Option<String> = None;
    let mut index = 0;
    model.for_each_param(|name, _| {
        if bad.is_none() && grads[index].iter().any(|g| !g.is_finite()) {
            bad = Some(name);
        }
        index += 1;
    });
    if let Some(param) = bad {
        return Err(TrainError::NonFiniteGradient { param });
    }
    state.step += 1;
    let t = state.step;
    let mut index = 0;
    let first = &mut state.first_moment;
    let second = &mut state.second_moment;
    model.for_each_param_mut(|_, tensor| {
        let mut data = tensor.data().to_vec();
        adam_update(&mut data, &grads[index], &mut first[index], &mut second[index], t, lr);
        *tensor = Tensor::from_vec(tensor.shape(), data).expect("same shape").tracked();
        index += 1;
    });
    Ok(())
}

/// Rescales all gradients so their concatenated L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_grad_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let total: f64 = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum();
    let norm = math::sqrt(total);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Learning rate at a 0-based epoch: lr0 * d1^floor(e/2) before the switch
/// epoch, lr0 * d1^(switch/2) * d2^floor((e-switch)/2) after. Powers are
/// evaluated as left-to-right products so the schedule is bit-reproducible.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < LR_PHASE_SWITCH {
        cfg.lr0 * math::pow_int(cfg.decay_phase1, (epoch / 2) as u32)
    } else {
        cfg.lr0
            * math::pow_int(cfg.decay_phase1, (LR_PHASE_SWITCH / 2) as u32)
            * math::pow_int(cfg.decay_phase2, ((epoch - LR_PHASE_SWITCH) / 2) as u32)
    }
}

// ── training loop ───────────────────────────────────────────────────

/// Per-epoch record for the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0-based epoch index.
    pub epoch: usize,
    /// Mean uPIT loss over the epoch's batches (negative mean SI-SDR, dB).
    pub train_loss: f64,
    /// Mean validation SI-SDR improvement, dB.
    pub valid_si_sdri: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
}

fn crop_to_utterance(sample: &MixtureSample, seconds: f64) -> MixtureSample {
    let limit = (seconds * sample.mixture.sample_rate as f64) as usize;
    if limit == 0 || sample.mixture.len() <= limit {
        return sample.clone();
    }
    let cut = |w: &Waveform| Waveform::new(w.samples[..limit].to_vec(), w.sample_rate);
    MixtureSample {
        mixture: cut(&sample.mixture),
        sources: sample.sources.iter().map(cut).collect(),
        noise: sample.noise.as_ref().map(cut),
        snr_db: sample.snr_db,
        seed: sample.seed,
    }
}

/// Forward + loss + gradient collection for one sample. Returns the loss
/// value and gradients aligned with the canonical parameter order.
fn sample_gradients(
    model: &DpRcNet,
    sample: &MixtureSample,
    droppath_seed: u64,
) -> TrainResult<(f64, Vec<Vec<f64>>)> {
    let mut rng = SeededRng::new(droppath_seed);
    let estimates = model.forward(&sample.mixture, crate::nn::Mode::Train, &mut rng)?;
    let outcome = upit_loss(&estimates, &sample.sources)?;
    let loss_value = outcome.loss.item();
    let mut grads = outcome.loss.backward_collect()?;
    let mut aligned = Vec::new();
    model.for_each_param(|_, t| {
        aligned.push(grads.take(t).unwrap_or_else(|| vec![0.0; t.numel()]));
    });
    Ok((loss_value, aligned))
}

fn batch_results(
    model: &DpRcNet,
    batch: &[MixtureSample],
    seeds: &[u64],
) -> Vec<TrainResult<(f64, Vec<Vec<f64>>)>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(sample, &seed)| sample_gradients(model, sample, seed))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch
            .iter()
            .zip(seeds)
            .map(|(sample, &seed)| sample_gradients(model, sample, seed))
            .collect()
    }
}

/// Mean validation SI-SDR improvement of the model over a dataset.
pub fn validate(model: &DpRcNet, valid_set: &[MixtureSample]) -> TrainResult<f64> {
    let eval_model = model.detached();
    let run = |sample: &MixtureSample| -> TrainResult<f64> {
        let estimates = eval_model.separate(&sample.mixture)?;
        let (si_sdri, _) = separation_improvement(&estimates, &sample.sources, &sample.mixture)?;
        Ok(si_sdri)
    };
    let scores: Vec<TrainResult<f64>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            valid_set.par_iter().map(run).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            valid_set.iter().map(run).collect()
        }
    };
    let mut total = 0.0;
    for s in &scores {
        total += *s.as_ref().map_err(|e| e.clone())?;
    }
    Ok(total / valid_set.len() as f64)
}

/// Trains the model, tracking the best validation score and stopping after
/// `patience` epochs without improvement. The model is left holding the
/// best-scoring parameters. `on_improve` fires whenever validation improves,
/// with the model already at the improved parameters.
pub fn train(
    model: &mut DpRcNet,
    train_set: &[MixtureSample],
    valid_set: &[MixtureSample],
    cfg: &TrainConfig,
    mut on_improve: impl FnMut(&DpRcNet, &EpochRecord),
) -> TrainResult<TrainOutcome> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be positive"));
    }
    if cfg.patience == 0 {
        return Err(TrainError::InvalidConfig("patience must be positive"));
    }

    let cropped: Vec<MixtureSample> =
        train_set.iter().map(|s| crop_to_utterance(s, cfg.utterance_seconds)).collect();
    let mut state = TrainState::new(model, cfg.seed);
    let mut history = Vec::new();
    let mut best_snapshot: Option<Vec<Vec<f64>>> = None;
    let mut best_epoch = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = lr_at_epoch(epoch, cfg);
        let mut order: Vec<usize> = (0..cropped.len()).collect();
        state.rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut batch_count = 0;
        for (batch_index, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<MixtureSample> =
                batch_ids.iter().map(|&i| cropped[i].clone()).collect();
            // Per-sample stochastic-depth streams, drawn sequentially so the
            // result does not depend on worker scheduling.
            let seeds: Vec<u64> = batch.iter().map(|_| state.rng.next_u64()).collect();
            let results = batch_results(model, &batch, &seeds);

            let mut grad_sum: Option<Vec<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for result in results {
                let (loss, grads) = result?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, batch: batch_index });
                }
                batch_loss += loss;
                grad_sum = Some(match grad_sum {
                    None => grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.iter_mut().zip(g) {
                                *av += gv;
                            }
                        }
                        acc
                    }
                });
            }
            let mut grads = grad_sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            clip_grad_global_norm(&mut grads, cfg.clip_norm);
            adam_step(model, &grads, &mut state, lr)?;
            epoch_loss += batch_loss * inv;
            batch_count += 1;
        }

        let valid_si_sdri = validate(model, valid_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / batch_count as f64,
            valid_si_sdri,
            lr,
        };
        history.push(record.clone());

        let improved = state.best_score.map_or(true, |b| valid_si_sdri > b);
        if improved {
            state.best_score = Some(valid_si_sdri);
            state.epochs_since_improvement = 0;
            best_epoch = epoch;
            let mut snapshot = Vec::new();
            model.for_each_param(|_, t| snapshot.push(t.data().to_vec()));
            best_snapshot = Some(snapshot);
            on_improve(model, &record);
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(snapshot) = best_snapshot {
        let mut index = 0;
        model.for_each_param_mut(|_, t| {
            *t = Tensor::from_vec(t.shape(), snapshot[index].clone())
                .expect("same shape")
                .tracked();
            index += 1;
        });
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_score: state.best_score.unwrap_or(f64::NEG_INFINITY),
        stopped_early,
    })
}
