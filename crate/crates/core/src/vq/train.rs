use duet_autograd::{AdamW, Bindings, Graph, Tensor};
use log::info;
use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{commitment, contact_tensor, geometric_terms, recon_l1, total_vq_loss, VqLossParts};
use super::{Codebook, Normalizer, VqConfig, VqModel};
use crate::error::{invalid, Error, Result};
use crate::motion::{default_contact_threshold, foot_contact_labels, MotionSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of all iterations spent in linear warm-up from zero.
    pub warmup_fraction: f64,
    /// Fractions of all iterations after which the rate is multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 512, lr: 2e-4, warmup_fraction: 0.25, milestones: vec![0.7, 0.85], decay: 0.1, clip_norm: None }
    }
}

impl VqTrainConfig {
    /// Small batches and a higher rate for the small model on one core.
    pub fn desk() -> Self {
        Self { epochs: 240, batch_size: 16, lr: 2e-3, ..Self::default() }
    }

    pub fn total_iterations(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size.max(1))
    }
}

/// Warm-up then multistep decay, as a function of the iteration index.
pub fn vq_learning_rate(step: usize, total: usize, cfg: &VqTrainConfig) -> f64 {
    let warm = (total as f64 * cfg.warmup_fraction).floor() as usize;
    let ramp = if warm == 0 { 1.0 } else { (step as f64 / warm as f64).min(1.0) };
    let drops = cfg.milestones.iter().filter(|&&m| step >= (total as f64 * m).floor() as usize).count();
    cfg.lr * ramp * cfg.decay.powi(drops as i32)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqStepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub parts: VqLossParts,
    pub resets: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqTrainLog {
    pub steps: Vec<VqStepLog>,
    /// Mean total loss per epoch.
    pub epochs: Vec<f64>,
}

struct Prepared {
    x: Tensor,
    pos: Array3<f64>,
    labels: Array2<u8>,
}

/// Train a tokenizer on individual motions (both persons of every sample go
/// in as separate motions).
pub fn train_vqvae(motions: &[MotionSequence], vq: VqConfig, cfg: &VqTrainConfig, seed: u64) -> Result<(VqModel, VqTrainLog)> {
    let first = motions.first().ok_or_else(|| invalid("cannot train on an empty dataset"))?;
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if motions.iter().any(|m| !m.same_format(first)) {
        return Err(Error::DimensionMismatch("training motions must share frames, fps, skeleton and layout".into()));
    }
    let refs: Vec<&MotionSequence> = motions.iter().collect();
    let norm = Normalizer::fit(&refs)?;
    let mut model = VqModel::new(vq, first.skeleton().clone(), first.layout(), first.fps(), norm, seed)?;
    let frames = first.frames();
    model.plan(frames)?;
    let geometric = first.layout().has_joint_positions() && frames >= 2;
    let threshold = default_contact_threshold(f64::from(first.fps()));
    let data: Vec<Prepared> = motions
        .iter()
        .map(|m| {
            let x = model.norm.apply(&m.to_f64()).into_dyn();
            let (pos, labels) = if geometric {
                (m.positions()?, foot_contact_labels(m, threshold)?)
            } else {
                (Array3::zeros((0, 0, 0)), Array2::zeros((0, 0)))
            };
            Ok(Prepared { x, pos, labels })
        })
        .collect::<Result<_>>()?;

    let pos_mean = model.norm.mean.slice(ndarray::s![.., 0..3]).to_owned().into_dyn();
    let pos_std = model.norm.std.slice(ndarray::s![.., 0..3]).to_owned().into_dyn();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    let mut opt = AdamW::new();
    opt.clip_norm = cfg.clip_norm;
    let total = cfg.total_iterations(motions.len());
    let mut log = VqTrainLog::default();
    let mut order: Vec<usize> = (0..motions.len()).collect();
    let mut step = 0;
    let mut seeded = false;
    let (j, d) = (first.joints(), first.features());
    let dprime = model.config.latent_dim;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = Tensor::zeros(IxDyn(&[b, frames, j, d]));
            for (i, &k) in chunk.iter().enumerate() {
                x.index_axis_mut(Axis(0), i).assign(&data[k].x);
            }
            let g = Graph::new();
            let binds = Bindings::new(&g, &model.params);
            let xin = g.constant(x);
            let latent = model.encode_graph(&binds, xin)?;
            let lv = latent.value();
            let cells = lv.len() / dprime;
            let flat = lv.view().into_shape_with_order((cells, dprime)).expect("contiguous latent").to_owned();
            if !seeded {
                model.codebook = Codebook::seeded_from(model.config.codebook_size, flat.view(), &mut rng)?;
                seeded = true;
            }
            let assign = model.codebook.assign(flat.view());
            let quantized = model.codebook.entries.select(Axis(0), &assign).into_shape_with_order(lv.raw_dim()).expect("shape");
            let q_var = g.constant(quantized.clone());
            let zq = latent.straight_through(quantized);
            let commit = commitment(latent, q_var, model.config.beta);
            let recon = model.decode_graph(&binds, zq, frames)?;
            let rec = recon_l1(xin, recon);
            let mut loss = rec + commit;
            let mut parts = VqLossParts { recon: rec.item(), commitment: commit.item(), ..Default::default() };
            if geometric {
                let mut gt = Tensor::zeros(IxDyn(&[b, frames, j, 3]));
                for (i, &k) in chunk.iter().enumerate() {
                    gt.index_axis_mut(Axis(0), i).assign(&data[k].pos.view().into_dyn());
                }
                let labels: Vec<_> = chunk.iter().map(|&k| data[k].labels.view()).collect();
                let contact = g.constant(contact_tensor(&labels));
                let pos_hat = recon.narrow(3, 0, 3) * g.constant(pos_std.clone()) + g.constant(pos_mean.clone());
                let (vel, fc, bl) = geometric_terms(g.constant(gt), pos_hat, contact, &model.skeleton);
                let w = model.config.weights;
                loss = loss + vel.scale(w.vel) + fc.scale(w.fc) + bl.scale(w.bl);
                parts.vel = vel.item();
                parts.fc = fc.item();
                parts.bl = bl.item();
            }
            let total_loss = loss.item();
            debug_assert!((total_loss - total_vq_loss(&parts, &model.config.weights)).abs() <= 1e-9 * total_loss.abs().max(1.0));
            if !total_loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("non-finite VQ loss {parts:?}") });
            }
            let mut grads = g.backward(loss);
            let grads = binds.gradients(&mut grads);
            drop(binds);
            let lr = vq_learning_rate(step, total, cfg);
            let gnorm = opt.step(&mut model.params, &grads, lr);
            if !gnorm.is_finite() {
                return Err(Error::Diverged { step, detail: "non-finite gradient norm".into() });
            }
            let report = model.codebook.ema_update(flat.view(), &assign, &model.config.ema, &mut rng)?;
            log.steps.push(VqStepLog { step, lr, total: total_loss, parts, resets: report.reset.len() });
            epoch_sum += total_loss;
            epoch_batches += 1;
            step += 1;
        }
        let mean = epoch_sum / epoch_batches as f64;
        info!("vq epoch {epoch}: loss {mean:.5}");
        log.epochs.push(mean);
    }
    Ok((model, log))
}
