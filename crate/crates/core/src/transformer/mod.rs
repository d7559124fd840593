//! Masked token transformer over two interleaved token grids.
//!
//! A sequence is `[a tokens | SEP | b tokens]`, each person's `n x j` grid
//! flattened temporal-major. Every block runs, in order: self-attention over
//! the whole sequence, a feed-forward layer, spatio-temporal attention within
//! each person, cross-attention from each person to the other, and a second
//! feed-forward layer. Each of these sub-layers is wrapped in adaptive layer
//! norm driven by the text condition, with a residual gate that starts at
//! zero. Spatio-temporal, cross and second feed-forward parameters are shared
//! by the two persons. The separator only takes part in the first two
//! sub-layers.

pub mod train;

use duet_autograd::{Bindings, Graph, ParamStore, Tensor, Var};
use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::text::TextEmbedding;
use crate::vq::TokenMap;

pub use train::{train_transformer, transformer_learning_rate, TransformerTrainConfig, TransformerTrainLog};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Both persons are predicted together.
    #[default]
    Collaborative,
    /// One person's span is predicted per pass with the partner given.
    Alternative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    /// Hidden width of the feed-forward layers as a multiple of `dim`.
    pub ffn_mult: usize,
    pub codebook_size: usize,
    pub cond_dim: usize,
    pub cond_drop: f64,
    /// Probability of random (rather than one-person) masking in training.
    pub p_random: f64,
    pub mode: Mode,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            heads: 6,
            dim: 384,
            ffn_mult: 4,
            codebook_size: 1024,
            cond_dim: 512,
            cond_drop: 0.1,
            p_random: 0.8,
            mode: Mode::Collaborative,
        }
    }
}

impl TransformerConfig {
    /// Small enough to train on one core in minutes.
    pub fn desk(codebook_size: usize) -> Self {
        Self { blocks: 2, heads: 4, dim: 64, ffn_mult: 2, codebook_size, ..Self::default() }
    }

    pub fn sep_token(&self) -> usize {
        self.codebook_size
    }

    pub fn mask_token(&self) -> usize {
        self.codebook_size + 1
    }

    pub fn vocab(&self) -> usize {
        self.codebook_size + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.dim == 0 || self.codebook_size == 0 || self.cond_dim == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config("dim must be a multiple of 4 for the 2-D positional encoding".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) || !(0.0..=1.0).contains(&self.p_random) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `[a | SEP | b]` over an `n x j` grid per person.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub n: usize,
    pub j: usize,
}

impl TokenSequence {
    pub fn per_person(&self) -> usize {
        self.n * self.j
    }

    pub fn sep_index(&self) -> usize {
        self.per_person()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sequence index of a region index (the region skips the separator).
    pub fn seq_index(&self, region: usize) -> usize {
        crate::mask::region_to_sequence(region, self.per_person())
    }

    /// Copy with the given region positions replaced by `token`.
    pub fn with_region(&self, positions: &[usize], token: usize) -> Self {
        let mut out = self.clone();
        for &p in positions {
            let i = self.seq_index(p);
            out.tokens[i] = token;
        }
        out
    }

    pub fn region(&self) -> Vec<usize> {
        let nj = self.per_person();
        self.tokens[..nj].iter().chain(&self.tokens[nj + 1..]).copied().collect()
    }
}

pub fn flatten_concat(a: &TokenMap, b: &TokenMap, sep: usize) -> Result<TokenSequence> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!("token grids {:?} and {:?}", a.shape(), b.shape())));
    }
    let (n, j) = a.shape();
    let mut tokens = Vec::with_capacity(2 * n * j + 1);
    tokens.extend_from_slice(a.as_slice());
    tokens.push(sep);
    tokens.extend_from_slice(b.as_slice());
    Ok(TokenSequence { tokens, n, j })
}

/// Inverse of [`flatten_concat`]; fails if any grid token is not a code.
pub fn split(seq: &TokenSequence, codebook_size: usize) -> Result<(TokenMap, TokenMap)> {
    let nj = seq.per_person();
    if seq.tokens.len() != 2 * nj + 1 {
        return Err(Error::DimensionMismatch(format!("sequence length {} for grid {}x{}", seq.tokens.len(), seq.n, seq.j)));
    }
    let a = TokenMap::new(seq.n, seq.j, seq.tokens[..nj].to_vec(), codebook_size)?;
    let b = TokenMap::new(seq.n, seq.j, seq.tokens[nj + 1..].to_vec(), codebook_size)?;
    Ok((a, b))
}

fn sinusoid(pos: usize, width: usize, out: &mut [f64]) {
    for k in 0..width / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / width as f64);
        let arg = pos as f64 * freq;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
}

/// Fixed `(n*j) x dim` encoding: the first half of each row encodes the
/// time index, the second half the spatial index.
pub fn positional_encoding_2d(n: usize, j: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut pe = Array2::zeros((n * j, dim));
    for t in 0..n {
        for s in 0..j {
            let mut row = pe.row_mut(t * j + s);
            let row = row.as_slice_mut().expect("contiguous row");
            sinusoid(t, half, &mut row[..half]);
            sinusoid(s, half, &mut row[half..]);
        }
    }
    pe
}

pub(crate) fn linear<'g>(b: &Bindings<'g, '_>, x: Var<'g>, name: &str) -> Var<'g> {
    x.matmul(b.p(&format!("{name}.w"))) + b.p(&format!("{name}.b"))
}

/// Multi-head scaled dot-product attention of `[G, Sq, D]` queries over
/// `[G, Sk, D]` keys and values.
pub fn attention<'g>(b: &Bindings<'g, '_>, name: &str, q_in: Var<'g>, kv_in: Var<'g>, heads: usize) -> Var<'g> {
    let (qs, ks) = (q_in.shape(), kv_in.shape());
    let (g, sq, d) = (qs[0], qs[1], qs[2]);
    let sk = ks[1];
    let dh = d / heads;
    let split_heads = |x: Var<'g>, s: usize| x.reshape(&[g, s, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[g * heads, s, dh]);
    let q = split_heads(linear(b, q_in, &format!("{name}.q")), sq);
    let k = split_heads(linear(b, kv_in, &format!("{name}.k")), sk);
    let v = split_heads(linear(b, kv_in, &format!("{name}.v")), sk);
    let weights = q.bmm(k, true).scale(1.0 / (dh as f64).sqrt()).softmax();
    let out = weights.bmm(v, false).reshape(&[g, heads, sq, dh]).permute(&[0, 2, 1, 3]).reshape(&[g, sq, d]);
    linear(b, out, &format!("{name}.o"))
}

fn ffn<'g>(b: &Bindings<'g, '_>, name: &str, x: Var<'g>) -> Var<'g> {
    linear(b, linear(b, x, &format!("{name}.l1")).gelu(), &format!("{name}.l2"))
}

/// `(1 + scale(h)) * norm(x) + shift(h)`; `h` is `[G, 1, D]`.
pub fn adaln<'g>(b: &Bindings<'g, '_>, name: &str, x: Var<'g>, h: Var<'g>) -> Var<'g> {
    let d = x.shape()[2];
    let m = linear(b, h, &format!("{name}.ada"));
    let shift = m.narrow(2, 0, d);
    let scale = m.narrow(2, d, d).offset(1.0);
    x.layer_norm(LN_EPS) * scale + shift
}

/// `x + gate(h) * f(adaln(x))`.
fn gated<'g>(b: &Bindings<'g, '_>, name: &str, x: Var<'g>, h: Var<'g>, f: impl FnOnce(Var<'g>) -> Var<'g>) -> Var<'g> {
    let y = adaln(b, name, x, h);
    let gate = linear(b, h, &format!("{name}.gate"));
    x + gate * f(y)
}

/// Spatial attention within each time row plus temporal attention within
/// each joint column, on `[G, n*j, D]`.
pub fn spatio_temporal<'g>(b: &Bindings<'g, '_>, name: &str, y: Var<'g>, n: usize, j: usize, heads: usize) -> Var<'g> {
    let s = y.shape();
    let (g, d) = (s[0], s[2]);
    let rows = y.reshape(&[g * n, j, d]);
    let spatial = attention(b, &format!("{name}.s"), rows, rows, heads).reshape(&[g, n * j, d]);
    let cols = y.reshape(&[g, n, j, d]).permute(&[0, 2, 1, 3]).reshape(&[g * j, n, d]);
    let temporal = attention(b, &format!("{name}.t"), cols, cols, heads)
        .reshape(&[g, j, n, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[g, n * j, d]);
    spatial + temporal
}

/// Swap the a and b halves of a stacked `[2B, ...]` tensor.
pub fn swap_halves(x: Var<'_>) -> Var<'_> {
    let bb = x.shape()[0] / 2;
    Var::concat(&[x.narrow(0, bb, bb), x.narrow(0, 0, bb)], 0)
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub params: ParamStore,
    /// Digest of the tokenizer checkpoint this model was trained against.
    pub tokenizer_sha256: String,
    pub seed: u64,
}

impl Transformer {
    pub fn new(config: TransformerConfig, tokenizer_sha256: impl Into<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.dim;
        let hidden = d * config.ffn_mult.max(1);
        let lin = |p: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            p.normal(&format!("{name}.w"), &[i, o], INIT_STD, rng);
            p.zeros(&format!("{name}.b"), &[o]);
        };
        let modulated = |p: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            p.normal(&format!("{name}.ada.w"), &[d, 2 * d], INIT_STD, rng);
            p.zeros(&format!("{name}.ada.b"), &[2 * d]);
            p.zeros(&format!("{name}.gate.w"), &[d, d]);
            p.zeros(&format!("{name}.gate.b"), &[d]);
        };
        let attn = |p: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            for part in ["q", "k", "v", "o"] {
                lin(p, &format!("{name}.{part}"), d, d, rng);
            }
        };
        p.normal("tok.emb", &[config.vocab(), d], 1.0, &mut rng);
        lin(&mut p, "tok.proj", d, d, &mut rng);
        lin(&mut p, "cond", config.cond_dim, d, &mut rng);
        p.normal("null_cond", &[config.cond_dim], 1.0 / (config.cond_dim as f64).sqrt(), &mut rng);
        for i in 0..config.blocks {
            let pre = format!("b{i}");
            attn(&mut p, &format!("{pre}.sa"), &mut rng);
            modulated(&mut p, &format!("{pre}.sa"), &mut rng);
            for ff in ["ff1", "ff2"] {
                lin(&mut p, &format!("{pre}.{ff}.l1"), d, hidden, &mut rng);
                lin(&mut p, &format!("{pre}.{ff}.l2"), hidden, d, &mut rng);
                modulated(&mut p, &format!("{pre}.{ff}"), &mut rng);
            }
            attn(&mut p, &format!("{pre}.st.s"), &mut rng);
            attn(&mut p, &format!("{pre}.st.t"), &mut rng);
            modulated(&mut p, &format!("{pre}.st"), &mut rng);
            attn(&mut p, &format!("{pre}.ca"), &mut rng);
            modulated(&mut p, &format!("{pre}.ca"), &mut rng);
        }
        p.normal("head.ada.w", &[d, 2 * d], INIT_STD, &mut rng);
        p.zeros("head.ada.b", &[2 * d]);
        lin(&mut p, "head", d, config.codebook_size, &mut rng);
        Ok(Self { config, params: p, tokenizer_sha256: tokenizer_sha256.into(), seed })
    }

    /// Learned stand-in for an absent text.
    pub fn null_embedding(&self) -> TextEmbedding {
        let v = self.params.get("null_cond").expect("null_cond parameter");
        TextEmbedding { vector: v.iter().copied().collect(), is_null: true }
    }

    /// `[B, cond_dim]` conditions; `None` rows use the learned null vector.
    pub fn cond_var<'g>(&self, b: &Bindings<'g, '_>, conds: &[Option<&TextEmbedding>]) -> Result<Var<'g>> {
        let dc = self.config.cond_dim;
        let g = b.graph();
        let mut rows = Vec::with_capacity(conds.len());
        for c in conds {
            rows.push(match c {
                Some(e) if !e.is_null => {
                    if e.dim() != dc {
                        return Err(Error::DimensionMismatch(format!("text embedding width {} vs {dc}", e.dim())));
                    }
                    g.constant(Tensor::from_shape_vec(IxDyn(&[1, dc]), e.vector.clone()).expect("shape"))
                }
                _ => b.p("null_cond").reshape(&[1, dc]),
            });
        }
        Ok(Var::concat(&rows, 0))
    }

    /// Token lookup, projection and the per-person positional encoding.
    pub fn embed<'g>(&self, b: &Bindings<'g, '_>, seqs: &[&TokenSequence]) -> Result<Var<'g>> {
        let first = seqs.first().ok_or_else(|| invalid("empty batch"))?;
        let (n, j) = (first.n, first.j);
        let nj = n * j;
        let d = self.config.dim;
        let vocab = self.config.vocab();
        let mut flat = Vec::with_capacity(seqs.len() * (2 * nj + 1));
        for s in seqs {
            if (s.n, s.j) != (n, j) || s.tokens.len() != 2 * nj + 1 {
                return Err(Error::DimensionMismatch("sequences in a batch must share one grid".into()));
            }
            if s.tokens[nj] != self.config.sep_token() {
                return Err(invalid(format!("separator missing at index {nj}")));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t >= vocab) {
                return Err(Error::IndexOutOfRange { index: t, size: vocab });
            }
            flat.extend_from_slice(&s.tokens);
        }
        let bsz = seqs.len();
        let e = b.p("tok.emb").index_select(0, &flat);
        let e = linear(b, e, "tok.proj").reshape(&[bsz, 2 * nj + 1, d]);
        let pe = positional_encoding_2d(n, j, d);
        let mut full = Array2::<f64>::zeros((2 * nj + 1, d));
        full.slice_mut(ndarray::s![..nj, ..]).assign(&pe);
        full.slice_mut(ndarray::s![nj + 1.., ..]).assign(&pe);
        Ok(e + b.graph().constant(full.into_dyn()))
    }

    /// Conditioning features `[B, 1, D]` from raw conditions `[B, cond_dim]`.
    pub fn cond_features<'g>(&self, b: &Bindings<'g, '_>, c: Var<'g>) -> Var<'g> {
        let bsz = c.shape()[0];
        linear(b, c, "cond").silu().reshape(&[bsz, 1, self.config.dim])
    }

    pub fn self_sublayers<'g>(&self, b: &Bindings<'g, '_>, i: usize, x: Var<'g>, h: Var<'g>) -> Var<'g> {
        let heads = self.config.heads;
        let x = gated(b, &format!("b{i}.sa"), x, h, |y| attention(b, &format!("b{i}.sa"), y, y, heads));
        gated(b, &format!("b{i}.ff1"), x, h, |y| ffn(b, &format!("b{i}.ff1"), y))
    }

    /// Spatio-temporal, cross and second feed-forward sub-layers on the
    /// stacked persons `[2B, nj, D]` (a rows first). `h2` is `[2B, 1, D]`.
    pub fn person_sublayers<'g>(&self, b: &Bindings<'g, '_>, i: usize, e: Var<'g>, h2: Var<'g>, n: usize, j: usize) -> Var<'g> {
        let heads = self.config.heads;
        let e = gated(b, &format!("b{i}.st"), e, h2, |y| spatio_temporal(b, &format!("b{i}.st"), y, n, j, heads));
        let e = gated(b, &format!("b{i}.ca"), e, h2, |y| attention(b, &format!("b{i}.ca"), y, swap_halves(y), heads));
        gated(b, &format!("b{i}.ff2"), e, h2, |y| ffn(b, &format!("b{i}.ff2"), y))
    }

    pub fn block<'g>(&self, b: &Bindings<'g, '_>, i: usize, x: Var<'g>, h: Var<'g>, n: usize, j: usize) -> Var<'g> {
        let nj = n * j;
        let bsz = x.shape()[0];
        let x = self.self_sublayers(b, i, x, h);
        let stacked = Var::concat(&[x.narrow(1, 0, nj), x.narrow(1, nj + 1, nj)], 0);
        let h2 = Var::concat(&[h, h], 0);
        let e = self.person_sublayers(b, i, stacked, h2, n, j);
        Var::concat(&[e.narrow(0, 0, bsz), x.narrow(1, nj, 1), e.narrow(0, bsz, bsz)], 1)
    }

    /// `[B, 2nj, |C|]` logits; the separator has no row.
    pub fn forward<'g>(&self, b: &Bindings<'g, '_>, seqs: &[&TokenSequence], c: Var<'g>) -> Result<Var<'g>> {
        if c.shape() != [seqs.len(), self.config.cond_dim] {
            return Err(Error::DimensionMismatch(format!("condition shape {:?}", c.shape())));
        }
        let mut x = self.embed(b, seqs)?;
        let (n, j) = (seqs[0].n, seqs[0].j);
        let h = self.cond_features(b, c);
        for i in 0..self.config.blocks {
            x = self.block(b, i, x, h, n, j);
        }
        let y = adaln(b, "head", x, h);
        let logits = linear(b, y, "head");
        let nj = n * j;
        Ok(Var::concat(&[logits.narrow(1, 0, nj), logits.narrow(1, nj + 1, nj)], 1))
    }

    /// Inference-time logits with frozen parameters.
    pub fn logits(&self, seqs: &[&TokenSequence], conds: &[Option<&TextEmbedding>]) -> Result<Array3<f64>> {
        let g = Graph::new();
        let b = Bindings::frozen(&g, &self.params);
        let c = self.cond_var(&b, conds)?;
        let out = self.forward(&b, seqs, c)?.value();
        Ok((*out).clone().into_dimensionality().expect("3-D logits"))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("transformer", serde_json::to_value(&self.config)?);
        ck.put_params("param/", &self.params);
        ck.set_meta("tokenizer_sha256", &self.tokenizer_sha256)?;
        ck.set_meta("seed", self.seed)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("transformer")?;
        let config: TransformerConfig = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(config, ck.meta::<String>("tokenizer_sha256")?, ck.meta("seed")?)?;
        let stored = ck.take_params("param/");
        for name in model.params.names().to_vec() {
            let t = stored.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != model.params.get(&name).expect("known name").shape() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}", t.shape())));
            }
            model.params.insert(name, t.clone());
        }
        Ok(model)
    }

    /// Refuse a tokenizer other than the one used in training.
    pub fn check_tokenizer(&self, sha256: &str) -> Result<()> {
        if self.tokenizer_sha256 != sha256 {
            return Err(Error::TokenizerMismatch { expected: self.tokenizer_sha256.clone(), found: sha256.to_string() });
        }
        Ok(())
    }
}

/// Mean cross-entropy over the masked region positions of one `2nj x |C|`
/// logit matrix. Other rows are never read.
pub fn masked_ce_loss(logits: ndarray::ArrayView2<f64>, targets: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(invalid("masked loss over an empty mask"));
    }
    if targets.len() != logits.nrows() {
        return Err(Error::DimensionMismatch(format!("{} targets for {} rows", targets.len(), logits.nrows())));
    }
    for &m in mask {
        if m >= logits.nrows() {
            return Err(Error::IndexOutOfRange { index: m, size: logits.nrows() });
        }
        if targets[m] >= logits.ncols() {
            return Err(Error::IndexOutOfRange { index: targets[m], size: logits.ncols() });
        }
    }
    let g = Graph::new();
    let rows = logits.select(Axis(0), mask);
    let t: Vec<usize> = mask.iter().map(|&m| targets[m]).collect();
    Ok(g.constant(rows.into_dyn()).cross_entropy(&t).item())
}

#[cfg(test)]
mod tests;
