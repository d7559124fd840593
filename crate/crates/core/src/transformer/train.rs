use duet_autograd::{AdamW, Bindings, Graph, Var};
use log::info;
use ndarray::ArrayView1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{flatten_concat, Mode, TokenSequence, Transformer, TransformerConfig};
use crate::error::{invalid, Error, Result};
use crate::mask::{choose_strategy, step_unroll_remask, training_mask, MaskPlan, Strategy};
use crate::motion::InteractionSample;
use crate::text::{drop_condition, encode_text, TextBackend, TextEmbedding};
use crate::vq::VqModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub clip_norm: Option<f64>,
    /// Forces the condition-drop probability when set (otherwise the model
    /// config's value is used).
    pub cond_drop_override: Option<f64>,
}

impl Default for TransformerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 52,
            lr: 2e-4,
            milestones: vec![0.5, 0.7, 0.85],
            decay: 1.0 / 3.0,
            clip_norm: None,
            cond_drop_override: None,
        }
    }
}

impl TransformerTrainConfig {
    pub fn desk() -> Self {
        Self { epochs: 300, batch_size: 16, lr: 1e-3, clip_norm: Some(1.0), ..Self::default() }
    }

    pub fn total_iterations(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size.max(1))
    }
}

pub fn transformer_learning_rate(step: usize, total: usize, cfg: &TransformerTrainConfig) -> f64 {
    let drops = cfg.milestones.iter().filter(|&&m| step >= (total as f64 * m).floor() as usize).count();
    cfg.lr * cfg.decay.powi(drops as i32)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformerStepLog {
    pub step: usize,
    pub lr: f64,
    pub first: f64,
    /// Zero when every second-round mask came out empty.
    pub second: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformerTrainLog {
    pub steps: Vec<TransformerStepLog>,
    pub epochs: Vec<f64>,
}

/// Draw from softmax(row); returns the token and its probability.
pub(crate) fn sample_row<R: Rng + ?Sized>(row: ArrayView1<f64>, temperature: f64, rng: &mut R) -> (usize, f64) {
    let probs = softmax_probs(row, temperature);
    if temperature <= 0.0 {
        let best = argmax(&probs);
        return (best, probs[best]);
    }
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return (i, p);
        }
    }
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1);
    (last, probs[last])
}

/// Softmax at a temperature; a non-positive temperature gives the plain
/// softmax, which callers pair with argmax.
pub(crate) fn softmax_probs(row: ArrayView1<f64>, temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| ((x - m) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Masked cross-entropy over `(batch row, region index)` pairs of `[B, 2nj, C]` logits.
fn masked_loss<'g>(logits: Var<'g>, picks: &[(usize, usize)], targets: &[usize]) -> Var<'g> {
    let s = logits.shape();
    let flat = logits.reshape(&[s[0] * s[1], s[2]]);
    let rows: Vec<usize> = picks.iter().map(|&(b, r)| b * s[1] + r).collect();
    flat.index_select(0, &rows).cross_entropy(targets)
}

struct Item {
    seq: TokenSequence,
    texts: Vec<usize>,
}

/// Train the masked transformer on token sequences from a frozen tokenizer.
pub fn train_transformer(
    samples: &[InteractionSample],
    vq: &VqModel,
    backend: &TextBackend,
    config: TransformerConfig,
    cfg: &TransformerTrainConfig,
    seed: u64,
) -> Result<(Transformer, TransformerTrainLog)> {
    if samples.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if config.codebook_size != vq.codebook.size() {
        return Err(Error::Config(format!("codebook size {} vs tokenizer {}", config.codebook_size, vq.codebook.size())));
    }
    if config.cond_dim != backend.dim() {
        return Err(Error::Config(format!("condition width {} vs text backend {}", config.cond_dim, backend.dim())));
    }
    let vq_sha = vq.fingerprint()?;
    let mut model = Transformer::new(config, vq_sha, seed)?;
    let sep = model.config.sep_token();
    let mask_tok = model.config.mask_token();
    let cond_drop = cfg.cond_drop_override.unwrap_or(model.config.cond_drop);

    let a: Vec<_> = samples.iter().map(|s| &s.motion_a).collect();
    let b: Vec<_> = samples.iter().map(|s| &s.motion_b).collect();
    let ta = vq.tokenize_batch(&a)?;
    let tb = vq.tokenize_batch(&b)?;
    let mut embeddings: Vec<TextEmbedding> = Vec::new();
    let mut items = Vec::with_capacity(samples.len());
    for ((s, x), y) in samples.iter().zip(&ta).zip(&tb) {
        let mut texts = Vec::new();
        for t in &s.texts {
            embeddings.push(encode_text(t, backend)?);
            texts.push(embeddings.len() - 1);
        }
        items.push(Item { seq: flatten_concat(x, y, sep)?, texts });
    }
    let nj = items[0].seq.per_person();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_0de5);
    let mut opt = AdamW::new();
    opt.clip_norm = cfg.clip_norm;
    let total = cfg.total_iterations(items.len());
    let mut log = TransformerTrainLog::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut plans: Vec<MaskPlan> = Vec::with_capacity(chunk.len());
            let mut conds: Vec<Option<&TextEmbedding>> = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let strategy = match model.config.mode {
                    Mode::Collaborative => choose_strategy(model.config.p_random, &mut rng)?,
                    Mode::Alternative => {
                        if rng.random_bool(0.5) {
                            Strategy::InteractionA
                        } else {
                            Strategy::InteractionB
                        }
                    }
                };
                plans.push(training_mask(nj, strategy, &mut rng)?);
                let text = items[k].texts[rng.random_range(0..items[k].texts.len())];
                conds.push(if drop_condition(cond_drop, &mut rng) { None } else { Some(&embeddings[text]) });
            }

            let g = Graph::new();
            let binds = Bindings::new(&g, &model.params);
            let c = model.cond_var(&binds, &conds)?;
            let inputs: Vec<TokenSequence> =
                chunk.iter().zip(&plans).map(|(&k, p)| items[k].seq.with_region(&p.positions, mask_tok)).collect();
            let refs: Vec<&TokenSequence> = inputs.iter().collect();
            let logits = model.forward(&binds, &refs, c)?;
            let mut picks = Vec::new();
            let mut targets = Vec::new();
            for (bi, (&k, p)) in chunk.iter().zip(&plans).enumerate() {
                let region = items[k].seq.region();
                for &r in &p.positions {
                    picks.push((bi, r));
                    targets.push(region[r]);
                }
            }
            let first = masked_loss(logits, &picks, &targets);

            // Second round: sample the masked positions, keep the confident
            // ones as inputs and re-mask the rest.
            let lv = logits.value();
            let mut second_inputs = Vec::with_capacity(chunk.len());
            let mut picks2 = Vec::new();
            let mut targets2 = Vec::new();
            for (bi, (&k, p)) in chunk.iter().zip(&plans).enumerate() {
                let mut seq = items[k].seq.clone();
                let mut conf = Vec::with_capacity(p.positions.len());
                for &r in &p.positions {
                    let row = lv.slice(ndarray::s![bi, r, ..]);
                    let (tok, prob) = sample_row(row, 1.0, &mut rng);
                    let i = seq.seq_index(r);
                    seq.tokens[i] = tok;
                    conf.push(prob);
                }
                let plan2 = step_unroll_remask(p, &conf, &mut rng)?;
                let region = items[k].seq.region();
                for &r in &plan2.positions {
                    picks2.push((bi, r));
                    targets2.push(region[r]);
                }
                second_inputs.push(seq.with_region(&plan2.positions, mask_tok));
            }
            let mut loss = first;
            let mut second_val = 0.0;
            if !picks2.is_empty() {
                let refs2: Vec<&TokenSequence> = second_inputs.iter().collect();
                let logits2 = model.forward(&binds, &refs2, c)?;
                let second = masked_loss(logits2, &picks2, &targets2);
                second_val = second.item();
                loss = loss + second;
            }
            let total_loss = loss.item();
            if !total_loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("first-round loss {}, second-round {second_val}", first.item()) });
            }
            let mut grads = g.backward(loss);
            let grads = binds.gradients(&mut grads);
            drop(binds);
            let lr = transformer_learning_rate(step, total, cfg);
            let gnorm = opt.step(&mut model.params, &grads, lr);
            if !gnorm.is_finite() {
                return Err(Error::Diverged { step, detail: "non-finite gradient norm".into() });
            }
            log.steps.push(TransformerStepLog { step, lr, first: first.item(), second: second_val, total: total_loss });
            epoch_sum += total_loss;
            batches += 1;
            step += 1;
        }
        let mean = epoch_sum / batches as f64;
        info!("transformer epoch {epoch}: loss {mean:.5}");
        log.epochs.push(mean);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_thirds() {
        let cfg = TransformerTrainConfig::default();
        let lr = |s| transformer_learning_rate(s, 1000, &cfg);
        assert_eq!(lr(0), 2e-4);
        assert_eq!(lr(499), 2e-4);
        assert!((lr(500) - 2e-4 / 3.0).abs() < 1e-18);
        assert!((lr(700) - 2e-4 / 9.0).abs() < 1e-18);
        assert!((lr(999) - 2e-4 / 27.0).abs() < 1e-18);
    }

    #[test]
    fn sampling_follows_probabilities() {
        let row = ndarray::arr1(&[0.0, (3.0f64).ln(), f64::NEG_INFINITY]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let ones = (0..n).filter(|_| sample_row(row.view(), 1.0, &mut rng).0 == 1).count() as f64;
        assert!((ones / n as f64 - 0.75).abs() < 2.576 * (0.75 * 0.25 / n as f64).sqrt());
        assert_eq!(sample_row(row.view(), 0.0, &mut rng), (1, 0.75));
    }
}
