//! Iterative masked decoding with classifier-free guidance.
//!
//! Decoding starts with every generable position masked. Each iteration
//! samples all masked positions, then re-masks the least confident
//! generable positions so that `ceil(gamma(i / I) * P)` stay masked. A
//! retained token's confidence is the probability it had when sampled.

use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mask::{cosine_gamma, lowest_confidence, mask_count};
use crate::motion::MotionSequence;
use crate::text::TextEmbedding;
use crate::transformer::train::sample_row;
use crate::transformer::{split, Mode, TokenSequence, Transformer};
use crate::vq::{TokenMap, VqModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    pub iterations: usize,
    pub cfg_scale: f64,
    /// Zero means argmax.
    pub temperature: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self::interaction()
    }
}

impl DecodeOptions {
    pub fn interaction() -> Self {
        Self { iterations: 20, cfg_scale: 2.0, temperature: 1.0 }
    }

    pub fn reaction() -> Self {
        Self { iterations: 12, ..Self::interaction() }
    }
}

/// Per-iteration bookkeeping, kept so callers can audit the schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Masked generable positions after each iteration.
    pub masked: Vec<usize>,
    /// `ceil(gamma(i / I) * P)` for the same iterations.
    pub expected: Vec<usize>,
    /// Whether every frozen token was unchanged after each iteration.
    pub frozen_intact: Vec<bool>,
}

impl DecodeTrace {
    pub fn schedule_exact(&self) -> bool {
        self.masked == self.expected
    }

    pub fn frozen_stable(&self) -> bool {
        self.frozen_intact.iter().all(|&b| b)
    }
}

/// `(1 + s) * cond - s * uncond`.
pub fn cfg_combine(cond: ArrayView2<f64>, uncond: ArrayView2<f64>, scale: f64) -> Result<Array2<f64>> {
    if cond.dim() != uncond.dim() {
        return Err(Error::DimensionMismatch(format!("logits {:?} vs {:?}", cond.dim(), uncond.dim())));
    }
    let mut out = Array2::zeros(cond.dim());
    Zip::from(&mut out).and(cond).and(uncond).for_each(|o, &c, &u| *o = (1.0 + scale) * c - scale * u);
    Ok(out)
}

fn guided_logits(model: &Transformer, seq: &TokenSequence, cond: Option<&TextEmbedding>, scale: f64) -> Result<Array2<f64>> {
    let uncond_only = cond.is_none_or(|c| c.is_null);
    if uncond_only || scale == 0.0 {
        let l = model.logits(&[seq], &[cond])?;
        return Ok(l.index_axis_move(ndarray::Axis(0), 0));
    }
    let l = model.logits(&[seq, seq], &[cond, None])?;
    cfg_combine(l.slice(ndarray::s![0, .., ..]), l.slice(ndarray::s![1, .., ..]), scale)
}

struct Decoder<'a> {
    model: &'a Transformer,
    cond: Option<&'a TextEmbedding>,
    opts: DecodeOptions,
    seq: TokenSequence,
    conf: Vec<f64>,
    frozen: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

impl Decoder<'_> {
    /// Sample every masked position of `pool`, then leave the
    /// `remask` least confident of `pool` masked.
    fn pass(&mut self, pool: &[usize], remask: usize) -> Result<usize> {
        let mask = self.model.config.mask_token();
        let logits = guided_logits(self.model, &self.seq, self.cond, self.opts.cfg_scale)?;
        for &r in pool {
            let i = self.seq.seq_index(r);
            if self.seq.tokens[i] == mask {
                let (tok, p) = sample_row(logits.row(r), self.opts.temperature, &mut self.rng);
                self.seq.tokens[i] = tok;
                self.conf[r] = p;
            }
        }
        let conf: Vec<f64> = pool.iter().map(|&r| self.conf[r]).collect();
        for r in lowest_confidence(pool, &conf, remask) {
            let i = self.seq.seq_index(r);
            self.seq.tokens[i] = mask;
        }
        Ok(pool.iter().filter(|&&r| self.seq.tokens[self.seq.seq_index(r)] == mask).count())
    }

    fn frozen_intact(&self) -> bool {
        self.frozen.iter().all(|&(i, t)| self.seq.tokens[i] == t)
    }
}

/// Fill the masked region positions listed in `generable`; every other
/// grid token is left untouched.
pub fn iterative_decode(
    model: &Transformer,
    cond: Option<&TextEmbedding>,
    init: &TokenSequence,
    generable: &[usize],
    opts: DecodeOptions,
    seed: u64,
) -> Result<(TokenSequence, DecodeTrace)> {
    if opts.iterations == 0 {
        return Err(invalid("at least one decoding iteration is required"));
    }
    let nj = init.per_person();
    let mask = model.config.mask_token();
    let mut seq = init.clone();
    let mut frozen = Vec::new();
    for r in 0..2 * nj {
        let i = seq.seq_index(r);
        if generable.contains(&r) {
            seq.tokens[i] = mask;
        } else if seq.tokens[i] >= model.config.codebook_size {
            return Err(invalid(format!("frozen region position {r} holds no code")));
        } else {
            frozen.push((i, seq.tokens[i]));
        }
    }
    let mut pool = generable.to_vec();
    pool.sort_unstable();
    pool.dedup();
    if pool.last().is_some_and(|&r| r >= 2 * nj) {
        return Err(invalid("generable position outside the token region"));
    }
    let mut dec = Decoder { model, cond, opts, seq, conf: vec![f64::INFINITY; 2 * nj], frozen, rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut trace = DecodeTrace::default();
    let total = opts.iterations;
    for i in 1..=total {
        let want = mask_count(cosine_gamma(i as f64 / total as f64)?, pool.len());
        let got = dec.pass(&pool, want)?;
        trace.masked.push(got);
        trace.expected.push(want);
        trace.frozen_intact.push(dec.frozen_intact());
    }
    Ok((dec.seq, trace))
}

fn all_masked(model: &Transformer, n: usize, j: usize) -> TokenSequence {
    let mut tokens = vec![model.config.mask_token(); 2 * n * j + 1];
    tokens[n * j] = model.config.sep_token();
    TokenSequence { tokens, n, j }
}

fn pair_check(model: &Transformer, vq: &VqModel) -> Result<()> {
    model.check_tokenizer(&vq.fingerprint()?)?;
    if model.config.codebook_size != vq.codebook.size() {
        return Err(Error::Config("transformer and tokenizer disagree on codebook size".into()));
    }
    Ok(())
}

pub struct Interaction {
    pub a: MotionSequence,
    pub b: MotionSequence,
    pub tokens: TokenSequence,
    pub trace: DecodeTrace,
}

/// Both persons from text.
pub fn generate_interaction(
    model: &Transformer,
    vq: &VqModel,
    cond: Option<&TextEmbedding>,
    frames: usize,
    opts: DecodeOptions,
    seed: u64,
) -> Result<Interaction> {
    pair_check(model, vq)?;
    let (n, j) = vq.token_grid(frames)?;
    let init = all_masked(model, n, j);
    let pool: Vec<usize> = (0..2 * n * j).collect();
    let (tokens, trace) = iterative_decode(model, cond, &init, &pool, opts, seed)?;
    let (ta, tb) = split(&tokens, model.config.codebook_size)?;
    let mut motions = vq.detokenize_batch(&[ta, tb])?;
    let b = motions.pop().expect("two motions");
    let a = motions.pop().expect("two motions");
    Ok(Interaction { a, b, tokens, trace })
}

pub struct Reaction {
    pub motion: MotionSequence,
    pub reference_tokens: TokenMap,
    pub tokens: TokenSequence,
    pub trace: DecodeTrace,
}

/// Partner motion for a given reference, placed as person a. Without text
/// the learned null condition is used.
pub fn generate_reaction(
    model: &Transformer,
    vq: &VqModel,
    reference: &MotionSequence,
    cond: Option<&TextEmbedding>,
    opts: DecodeOptions,
    seed: u64,
) -> Result<Reaction> {
    pair_check(model, vq)?;
    if reference.skeleton() != &vq.skeleton || reference.layout() != vq.layout {
        return Err(Error::UnsupportedSkeleton(format!(
            "reference uses skeleton `{}`, the tokenizer `{}`",
            reference.skeleton().name,
            vq.skeleton.name
        )));
    }
    let reference_tokens = vq.tokenize(reference)?;
    let (n, j) = reference_tokens.shape();
    let mut init = all_masked(model, n, j);
    init.tokens[..n * j].copy_from_slice(reference_tokens.as_slice());
    let pool: Vec<usize> = (n * j..2 * n * j).collect();
    let (tokens, trace) = iterative_decode(model, cond, &init, &pool, opts, seed)?;
    let (_, tb) = split(&tokens, model.config.codebook_size)?;
    let motion = vq.detokenize(&tb)?;
    Ok(Reaction { motion, reference_tokens, tokens, trace })
}

/// Alternating decoding for models trained one person at a time: odd
/// passes work on person a, even passes on person b, `iterations` passes
/// each.
pub fn alternative_generate(
    model: &Transformer,
    vq: &VqModel,
    cond: Option<&TextEmbedding>,
    frames: usize,
    opts: DecodeOptions,
    seed: u64,
) -> Result<Interaction> {
    if model.config.mode != Mode::Alternative {
        return Err(Error::ModeMismatch("alternating decoding needs a model trained in alternative mode".into()));
    }
    if opts.iterations == 0 {
        return Err(invalid("at least one decoding iteration is required"));
    }
    pair_check(model, vq)?;
    let (n, j) = vq.token_grid(frames)?;
    let nj = n * j;
    let pools: [Vec<usize>; 2] = [(0..nj).collect(), (nj..2 * nj).collect()];
    let mut dec = Decoder {
        model,
        cond,
        opts,
        seq: all_masked(model, n, j),
        conf: vec![f64::INFINITY; 2 * nj],
        frozen: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut trace = DecodeTrace::default();
    let total = opts.iterations;
    for k in 1..=total {
        let want = mask_count(cosine_gamma(k as f64 / total as f64)?, nj);
        for pool in &pools {
            let got = dec.pass(pool, want)?;
            trace.masked.push(got);
            trace.expected.push(want);
            trace.frozen_intact.push(true);
        }
    }
    let (ta, tb) = split(&dec.seq, model.config.codebook_size)?;
    let mut motions = vq.detokenize_batch(&[ta, tb])?;
    let b = motions.pop().expect("two motions");
    let a = motions.pop().expect("two motions");
    Ok(Interaction { a, b, tokens: dec.seq, trace })
}
