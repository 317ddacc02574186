//! Losses, the optimizer, and the three-phase training schedule.
//!
//! Phase 1 trains the feedback network alone against the noiseless port
//! features. Phase 2 trains fusion + prediction with perfect feedback
//! (the clean features bypass the codec). Phase 3 trains end to end with
//! the straight-through quantizer in the loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::dataset::Sample;
use crate::hascan::{bridge, mcpn, tmcfn, Hascan};
use crate::nn::{Binding, ModelParams};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in phase {phase}, epoch {epoch}, step {step}")]
    NonFinite { phase: u8, epoch: usize, step: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
}

/// Mean squared error between a tape value and a constant target.
pub fn mse_on_tape(tape: &Tape, pred: Var, target: &Tensor) -> Var {
    let d = tape.sub(pred, tape.leaf(target.clone()));
    tape.mean(tape.mul(d, d))
}

/// `1 - <pred, target> / (|pred| |target|)` as a tape value. Returns None
/// for an all-zero target, whose direction is undefined; callers skip the
/// term (and should log the occurrence).
pub fn cosine_loss_on_tape(tape: &Tape, pred: Var, target: &Tensor) -> Option<Var> {
    let t_norm = target.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if t_norm == 0.0 {
        return None;
    }
    let num = tape.dot(pred, tape.leaf(target.clone()));
    let p_norm = tape.sqrt(tape.add_scalar(tape.dot(pred, pred), 1e-24));
    let cos = tape.div(num, tape.scale(p_norm, t_norm));
    Some(tape.add_scalar(tape.scale(cos, -1.0), 1.0))
}

/// Plain Adam; parameters without a gradient on a step are left in place.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .names()
            .map(|n| {
                let id = params.id_of(n).unwrap();
                Tensor::zeros(params.get(id).shape())
            })
            .collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, tensor) in params.tensors_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *p -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss used by the prediction phases (phase 1 always reconstructs MSE).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Cosine,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs for phases 1, 2, 3.
    pub epochs: [usize; 3],
    pub bn_momentum: f64,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-3,
            batch_size: 8,
            epochs: [4, 4, 2],
            bn_momentum: 0.1,
            seed: 0,
            loss: LossKind::Mse,
        }
    }
}

/// One point on a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub phase: u8,
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
}

/// Model-facing tensors precomputed once per sample.
struct Prepared {
    /// Estimated DL packs, the feedback input.
    noisy_packs: Vec<Tensor>,
    /// Noiseless DL packs, the phase-1 target and phase-2 feedback.
    clean_packs: Vec<Tensor>,
    ul_rows: Tensor,
    /// Truth in the transform domain; the training target of phases 2/3.
    target: Tensor,
}

fn prepare_tensors(model: &Hascan, samples: &[Sample]) -> Vec<Prepared> {
    samples
        .iter()
        .map(|s| Prepared {
            noisy_packs: s
                .dl
                .slots
                .iter()
                .map(|m| tmcfn::slot_to_sparse_pack(m, &model.cfg))
                .collect(),
            clean_packs: s
                .clean_dl
                .iter()
                .map(|m| tmcfn::slot_to_sparse_pack(m, &model.cfg))
                .collect(),
            ul_rows: bridge::ul_feature_rows(&s.ul, &model.cfg),
            target: mcpn::transform_target(&s.truth, &model.cfg),
        })
        .collect()
}

/// Train all three phases in place. Returns the loss curves.
pub fn train_hascan(
    model: &Hascan,
    params: &mut ModelParams,
    train: &[Sample],
    val: &[Sample],
    settings: &TrainSettings,
) -> Result<Vec<LossRecord>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let train_prep = prepare_tensors(model, train);
    let val_prep = prepare_tensors(model, val);
    let mut records = Vec::new();
    for phase in 1u8..=3 {
        let mut adam = Adam::new(settings.lr, params);
        let epochs = settings.epochs[phase as usize - 1];
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..train_prep.len()).collect();
            let mut rng = ChaCha12Rng::seed_from_u64(
                settings.seed ^ (phase as u64) << 32 ^ epoch as u64,
            );
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut steps = 0usize;
            for (step, chunk) in order.chunks(settings.batch_size).enumerate() {
                let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_prep[i]).collect();
                let loss = run_batch(model, params, &batch, phase, true, &mut rng, Some(&mut adam), settings)
                    .ok_or(TrainError::NonFinite { phase, epoch, step })?;
                epoch_loss += loss;
                steps += 1;
            }
            records.push(LossRecord {
                phase,
                epoch,
                split: "train",
                loss: epoch_loss / steps.max(1) as f64,
            });
            let val_loss = eval_loss(model, params, &val_prep, phase, settings)
                .ok_or(TrainError::NonFinite { phase, epoch, step: usize::MAX })?;
            records.push(LossRecord { phase, epoch, split: "val", loss: val_loss });
        }
    }
    Ok(records)
}

/// Average loss of one phase over a prepared split, eval mode.
fn eval_loss(
    model: &Hascan,
    params: &mut ModelParams,
    prep: &[Prepared],
    phase: u8,
    settings: &TrainSettings,
) -> Option<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in prep.chunks(settings.batch_size.max(1)) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        total += run_batch(model, params, &batch, phase, false, &mut rng, None, settings)?
            * batch.len() as f64;
        n += batch.len();
    }
    Some(total / n.max(1) as f64)
}

/// Forward/backward one batch; applies the optimizer when given. Returns
/// the batch loss, or None if it came out non-finite (params untouched).
#[allow(clippy::too_many_arguments)]
fn run_batch(
    model: &Hascan,
    params: &mut ModelParams,
    batch: &[&Prepared],
    phase: u8,
    training: bool,
    rng: &mut ChaCha12Rng,
    adam: Option<&mut Adam>,
    settings: &TrainSettings,
) -> Option<f64> {
    let tape = Tape::new();
    let bind = Binding::new(&tape, params);
    let mut terms: Vec<Var> = Vec::new();
    let mut count = 0usize;
    let mut prebn_vars: Vec<Var> = Vec::new();
    for p in batch {
        match phase {
            1 => {
                for (noisy, clean) in p.noisy_packs.iter().zip(&p.clean_packs) {
                    let x = tape.leaf(noisy.clone());
                    let y = model.tmcfn.feedback_on_tape_with(&tape, &bind, x, true, training, rng);
                    terms.push(mse_on_tape(&tape, y, clean));
                    count += 1;
                }
            }
            2 | 3 => {
                let fb: Vec<Var> = if phase == 2 {
                    p.clean_packs.iter().map(|t| tape.leaf(t.clone())).collect()
                } else {
                    p.noisy_packs
                        .iter()
                        .map(|t| {
                            let x = tape.leaf(t.clone());
                            model.tmcfn.feedback_on_tape_with(&tape, &bind, x, false, training, rng)
                        })
                        .collect()
                };
                let dl_rows = model.bridge.lift_on_tape(&tape, &fb);
                let ul = tape.leaf(p.ul_rows.clone());
                let (fused, prebn) =
                    model.judcen.forward_with_prebn(&tape, &bind, params, dl_rows, ul);
                prebn_vars.push(prebn);
                let out = model.mcpn.forward_on_tape(&tape, &bind, fused);
                let term = match settings.loss {
                    LossKind::Mse => mse_on_tape(&tape, out, &p.target),
                    LossKind::Cosine => cosine_loss_on_tape(&tape, out, &p.target)
                        .unwrap_or_else(|| mse_on_tape(&tape, out, &p.target)),
                };
                terms.push(term);
                count += 1;
            }
            _ => unreachable!(),
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    let loss = tape.scale(total, 1.0 / count as f64);
    let value = tape.value_cloned(loss).item();
    if !value.is_finite() {
        return None;
    }
    if let Some(adam) = adam {
        tape.backward(loss);
        adam.step(params, &bind.grads(&tape));
        // refresh the frozen normalization statistics from this batch's
        // trunk activations (one-batch lag keeps them constant on tape)
        if !prebn_vars.is_empty() {
            let mats: Vec<Tensor> =
                prebn_vars.iter().map(|&v| tape.value_cloned(v)).collect();
            let cols = mats[0].dims2().1;
            let rows: usize = mats.iter().map(|m| m.dims2().0).sum();
            let mut stacked = Vec::with_capacity(rows * cols);
            for m in &mats {
                stacked.extend_from_slice(m.data());
            }
            model.judcen.update_stats(
                params,
                &Tensor::matrix(rows, cols, stacked),
                settings.bn_momentum,
            );
        }
    }
    Some(value)
}
