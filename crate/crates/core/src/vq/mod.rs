//! Convolutional VQ-VAE over one person's `N x J x d` motion.
//!
//! Time is the image height, joints the width and features the channels.
//! Each encoder stage downsamples time and/or joints; the decoder mirrors it
//! with nearest-neighbour upsampling followed by a convolution.

pub mod codebook;
pub mod losses;
pub mod train;

use duet_autograd::{Bindings, Conv2dGeom, Graph, ParamStore, Tensor, Var};
use ndarray::{Array2, Array3, ArrayView3, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::motion::{Layout, MotionSequence, SkeletonSpec};
pub use codebook::{Codebook, EmaSettings, ResetReport, TokenMap};
pub use losses::{geometric_losses, total_vq_loss, vq_losses, GeometricWeights, VqLossParts};
pub use train::{train_vqvae, vq_learning_rate, VqTrainConfig, VqTrainLog};

/// One axis of a convolution stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvStage {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    /// Size-preserving 3-tap stage used where an axis has no downsampling.
    pub const KEEP: ConvStage = ConvStage::new(3, 1, 1);
    pub const HALVE: ConvStage = ConvStage::new(4, 2, 1);

    pub fn output(&self, len: usize) -> Option<usize> {
        (len + 2 * self.padding >= self.kernel && self.stride > 0)
            .then(|| (len + 2 * self.padding - self.kernel) / self.stride + 1)
    }
}

/// Joint-axis downsampling per supported skeleton size.
pub fn spatial_stages(joints: usize) -> Result<Vec<ConvStage>> {
    match joints {
        8 => Ok(vec![ConvStage::HALVE, ConvStage::HALVE]),
        22 => Ok(vec![ConvStage::HALVE, ConvStage::new(3, 2, 0)]),
        56 => Ok(vec![ConvStage::HALVE, ConvStage::HALVE, ConvStage::new(2, 3, 0)]),
        j => Err(Error::UnsupportedSkeleton(format!("no spatial downsampling table for {j} joints"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub latent_dim: usize,
    pub codebook_size: usize,
    /// Channels after the input convolution.
    pub width_in: usize,
    /// Channels inside every downsampling stage.
    pub width: usize,
    pub res_blocks: usize,
    pub temporal_stages: Vec<ConvStage>,
    pub beta: f64,
    pub weights: GeometricWeights,
    pub ema: EmaSettings,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            latent_dim: 512,
            codebook_size: 1024,
            width_in: 256,
            width: 512,
            res_blocks: 2,
            temporal_stages: vec![ConvStage::HALVE, ConvStage::HALVE],
            beta: 0.02,
            weights: GeometricWeights::interhuman(),
            ema: EmaSettings { decay: 0.99, reset_window: 256, reset_min_hits: 1 },
        }
    }
}

impl VqConfig {
    /// Same structure as the default, sized for single-core training.
    pub fn desk() -> Self {
        Self {
            latent_dim: 32,
            codebook_size: 128,
            width_in: 16,
            width: 32,
            res_blocks: 1,
            weights: GeometricWeights::unit(),
            ema: EmaSettings { decay: 0.99, reset_window: 16, reset_min_hits: 1 },
            ..Self::default()
        }
    }

    pub fn temporal_factor(&self) -> usize {
        self.temporal_stages.iter().map(|s| s.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.codebook_size == 0 || self.width == 0 || self.width_in == 0 {
            return Err(Error::Config("VQ widths and codebook size must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be a non-negative number".into()));
        }
        if !(0.0..1.0).contains(&self.ema.decay) {
            return Err(Error::Config("EMA decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-(joint, feature) z-scoring fitted on the training motions.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

const STD_FLOOR: f64 = 1e-3;

impl Normalizer {
    pub fn fit(motions: &[&MotionSequence]) -> Result<Self> {
        let first = motions.first().ok_or_else(|| invalid("cannot fit normalization on zero motions"))?;
        let (_, j, d) = first.data().dim();
        let mut sum = Array2::<f64>::zeros((j, d));
        let mut sq = Array2::<f64>::zeros((j, d));
        let mut count = 0.0;
        for m in motions {
            if m.joints() != j || m.features() != d {
                return Err(Error::DimensionMismatch("motions differ in joints or features".into()));
            }
            let x = m.to_f64();
            sum += &x.sum_axis(Axis(0));
            sq += &x.mapv(|v| v * v).sum_axis(Axis(0));
            count += m.frames() as f64;
        }
        let mean = &sum / count;
        let var = &sq / count - &mean.mapv(|v| v * v);
        let std = var.mapv(|v| v.max(0.0).sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn identity(joints: usize, features: usize) -> Self {
        Self { mean: Array2::zeros((joints, features)), std: Array2::ones((joints, features)) }
    }

    pub fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn invert(&self, x: &Array3<f64>) -> Array3<f64> {
        x * &self.std + &self.mean
    }
}

/// Geometry of one encoder stage at a given input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub geom: Conv2dGeom,
    pub input: (usize, usize),
    pub output: (usize, usize),
}

const SAME: Conv2dGeom = Conv2dGeom { kernel: (3, 3), stride: (1, 1), padding: (1, 1) };

/// Trained (or freshly initialized) tokenizer.
#[derive(Clone, Debug)]
pub struct VqModel {
    pub config: VqConfig,
    pub skeleton: SkeletonSpec,
    pub layout: Layout,
    pub fps: f32,
    pub params: ParamStore,
    pub codebook: Codebook,
    pub norm: Normalizer,
    pub seed: u64,
}

fn conv<'g>(b: &Bindings<'g, '_>, x: Var<'g>, name: &str, geom: Conv2dGeom) -> Var<'g> {
    x.conv2d(b.p(&format!("{name}.w")), geom) + b.p(&format!("{name}.b"))
}

fn res_block<'g>(b: &Bindings<'g, '_>, x: Var<'g>, name: &str) -> Var<'g> {
    let h = conv(b, x.silu(), &format!("{name}.c1"), SAME);
    let h = conv(b, h.silu(), &format!("{name}.c2"), SAME);
    x + h
}

fn nearest_indices(from: usize, to: usize) -> Vec<usize> {
    (0..to).map(|o| o * from / to).collect()
}

fn add_conv(store: &mut ParamStore, name: &str, k: (usize, usize), cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    store.uniform_fan_in(&format!("{name}.w"), &[k.0, k.1, cin, cout], k.0 * k.1 * cin, rng);
    store.zeros(&format!("{name}.b"), &[cout]);
}

impl VqModel {
    pub fn new(config: VqConfig, skeleton: SkeletonSpec, layout: Layout, fps: f32, norm: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        skeleton.validate()?;
        let j = skeleton.joint_count();
        let d = layout.feature_dim();
        if norm.mean.dim() != (j, d) || norm.std.dim() != (j, d) {
            return Err(Error::DimensionMismatch("normalization statistics do not match the skeleton".into()));
        }
        let spatial = spatial_stages(j)?;
        let stages = config.temporal_stages.len().max(spatial.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (wi, w, r) = (config.width_in, config.width, config.res_blocks);
        add_conv(&mut params, "enc.in", (3, 3), d, wi, &mut rng);
        for i in 0..stages {
            let geom = Self::stage_geom(&config, &spatial, i);
            add_conv(&mut params, &format!("enc.s{i}.down"), geom.kernel, if i == 0 { wi } else { w }, w, &mut rng);
            for k in 0..r {
                add_conv(&mut params, &format!("enc.s{i}.r{k}.c1"), (3, 3), w, w, &mut rng);
                add_conv(&mut params, &format!("enc.s{i}.r{k}.c2"), (3, 3), w, w, &mut rng);
            }
        }
        add_conv(&mut params, "enc.out", (3, 3), w, config.latent_dim, &mut rng);
        add_conv(&mut params, "dec.in", (3, 3), config.latent_dim, w, &mut rng);
        for k in 0..r {
            add_conv(&mut params, &format!("dec.in.r{k}.c1"), (3, 3), w, w, &mut rng);
            add_conv(&mut params, &format!("dec.in.r{k}.c2"), (3, 3), w, w, &mut rng);
        }
        for i in (0..stages).rev() {
            let cout = if i == 0 { wi } else { w };
            add_conv(&mut params, &format!("dec.s{i}.up"), (3, 3), w, cout, &mut rng);
            for k in 0..r {
                add_conv(&mut params, &format!("dec.s{i}.r{k}.c1"), (3, 3), cout, cout, &mut rng);
                add_conv(&mut params, &format!("dec.s{i}.r{k}.c2"), (3, 3), cout, cout, &mut rng);
            }
        }
        add_conv(&mut params, "dec.out", (3, 3), wi, d, &mut rng);
        let entries = Array2::from_shape_fn((config.codebook_size, config.latent_dim), |_| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let codebook = Codebook::from_entries(entries)?;
        Ok(Self { config, skeleton, layout, fps, params, codebook, norm, seed })
    }

    fn stage_geom(config: &VqConfig, spatial: &[ConvStage], i: usize) -> Conv2dGeom {
        let t = config.temporal_stages.get(i).copied().unwrap_or(ConvStage::KEEP);
        let s = spatial.get(i).copied().unwrap_or(ConvStage::KEEP);
        Conv2dGeom { kernel: (t.kernel, s.kernel), stride: (t.stride, s.stride), padding: (t.padding, s.padding) }
    }

    /// Encoder stage geometry for sequences of `frames` frames.
    pub fn plan(&self, frames: usize) -> Result<Vec<StagePlan>> {
        let factor = self.config.temporal_factor();
        if frames == 0 || frames % factor != 0 {
            return Err(invalid(format!("sequence length {frames} is not a multiple of {factor}")));
        }
        let spatial = spatial_stages(self.skeleton.joint_count())?;
        let stages = self.config.temporal_stages.len().max(spatial.len());
        let mut size = (frames, self.skeleton.joint_count());
        let mut out = Vec::with_capacity(stages);
        for i in 0..stages {
            let geom = Self::stage_geom(&self.config, &spatial, i);
            let next = geom
                .output_size(size.0, size.1)
                .ok_or_else(|| invalid(format!("stage {i} cannot process a {}x{} grid", size.0, size.1)))?;
            out.push(StagePlan { geom, input: size, output: next });
            size = next;
        }
        if size.0 * factor != frames {
            return Err(invalid(format!("temporal stages map {frames} frames to {}", size.0)));
        }
        Ok(out)
    }

    /// SHA-256 of the serialized checkpoint; pairs a transformer with the
    /// tokenizer it was trained on.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(crate::checkpoint::bytes_sha256(&self.to_checkpoint()?.to_bytes()?))
    }

    /// Token grid `(n, j)` for a sequence length.
    pub fn token_grid(&self, frames: usize) -> Result<(usize, usize)> {
        Ok(self.plan(frames)?.last().map(|p| p.output).unwrap_or((frames, self.skeleton.joint_count())))
    }

    /// `[B, N, J, d]` normalized motion to `[B, n, j, d']` latents.
    pub fn encode_graph<'g>(&self, b: &Bindings<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let plan = self.plan(x.shape()[1])?;
        let mut h = conv(b, x, "enc.in", SAME);
        for (i, stage) in plan.iter().enumerate() {
            h = conv(b, h.silu(), &format!("enc.s{i}.down"), stage.geom);
            for k in 0..self.config.res_blocks {
                h = res_block(b, h, &format!("enc.s{i}.r{k}"));
            }
        }
        Ok(conv(b, h.silu(), "enc.out", SAME))
    }

    /// `[B, n, j, d']` latents to `[B, N, J, d]` normalized motion.
    pub fn decode_graph<'g>(&self, b: &Bindings<'g, '_>, z: Var<'g>, frames: usize) -> Result<Var<'g>> {
        let plan = self.plan(frames)?;
        let (n, j) = plan.last().map(|p| p.output).unwrap_or((frames, self.skeleton.joint_count()));
        let shape = z.shape();
        if shape.len() != 4 || shape[1] != n || shape[2] != j || shape[3] != self.config.latent_dim {
            return Err(Error::DimensionMismatch(format!(
                "latent {shape:?} vs expected [_, {n}, {j}, {}]",
                self.config.latent_dim
            )));
        }
        let mut h = conv(b, z, "dec.in", SAME);
        for k in 0..self.config.res_blocks {
            h = res_block(b, h, &format!("dec.in.r{k}"));
        }
        for (i, stage) in plan.iter().enumerate().rev() {
            let (ht, wt) = stage.input;
            let (hs, ws) = stage.output;
            h = h.index_select(1, &nearest_indices(hs, ht)).index_select(2, &nearest_indices(ws, wt));
            h = conv(b, h.silu(), &format!("dec.s{i}.up"), SAME);
            for k in 0..self.config.res_blocks {
                h = res_block(b, h, &format!("dec.s{i}.r{k}"));
            }
        }
        Ok(conv(b, h.silu(), "dec.out", SAME))
    }

    fn check_motion(&self, m: &MotionSequence) -> Result<()> {
        if m.skeleton().joint_count() != self.skeleton.joint_count() {
            return Err(Error::UnsupportedSkeleton(format!(
                "tokenizer expects {} joints, motion has {}",
                self.skeleton.joint_count(),
                m.joints()
            )));
        }
        if m.layout() != self.layout {
            return Err(Error::DimensionMismatch(format!("tokenizer expects layout {:?}, got {:?}", self.layout, m.layout())));
        }
        Ok(())
    }

    /// Normalized `[B, N, J, d]` batch tensor.
    pub fn batch_tensor(&self, motions: &[&MotionSequence]) -> Result<Tensor> {
        let first = motions.first().ok_or_else(|| invalid("empty batch"))?;
        let (n, j, d) = first.data().dim();
        let mut out = Tensor::zeros(IxDyn(&[motions.len(), n, j, d]));
        for (i, m) in motions.iter().enumerate() {
            self.check_motion(m)?;
            if m.data().dim() != (n, j, d) {
                return Err(Error::DimensionMismatch("batch motions differ in shape".into()));
            }
            out.index_axis_mut(Axis(0), i).assign(&self.norm.apply(&m.to_f64()).into_dyn());
        }
        Ok(out)
    }

    pub fn encode_batch(&self, motions: &[&MotionSequence]) -> Result<Vec<Array3<f64>>> {
        let x = self.batch_tensor(motions)?;
        self.plan(x.shape()[1])?;
        let g = Graph::new();
        let b = Bindings::frozen(&g, &self.params);
        let z = self.encode_graph(&b, g.constant(x))?.value();
        Ok(z.outer_iter().map(|v| v.to_owned().into_dimensionality().expect("rank 3")).collect())
    }

    pub fn encode(&self, motion: &MotionSequence) -> Result<Array3<f64>> {
        Ok(self.encode_batch(&[motion])?.remove(0))
    }

    pub fn quantize(&self, latent: ArrayView3<f64>) -> Result<(TokenMap, Array3<f64>, f64)> {
        self.codebook.quantize(latent, self.config.beta)
    }

    pub fn dequantize(&self, tokens: &TokenMap) -> Result<Array3<f64>> {
        self.codebook.dequantize(tokens)
    }

    /// Latents back to motions of `frames = n * temporal factor` frames.
    pub fn decode_batch(&self, latents: &[Array3<f64>]) -> Result<Vec<MotionSequence>> {
        let first = latents.first().ok_or_else(|| invalid("empty batch"))?;
        let (n, j, d) = first.dim();
        let mut z = Tensor::zeros(IxDyn(&[latents.len(), n, j, d]));
        for (i, l) in latents.iter().enumerate() {
            if l.dim() != (n, j, d) {
                return Err(Error::DimensionMismatch("batch latents differ in shape".into()));
            }
            z.index_axis_mut(Axis(0), i).assign(&l.view().into_dyn());
        }
        let frames = n * self.config.temporal_factor();
        let g = Graph::new();
        let b = Bindings::frozen(&g, &self.params);
        let out = self.decode_graph(&b, g.constant(z), frames)?.value();
        out.outer_iter()
            .map(|v| {
                let x: Array3<f64> = v.to_owned().into_dimensionality().expect("rank 3");
                let data = self.norm.invert(&x).mapv(|v| v as f32);
                MotionSequence::new(data, self.fps, self.skeleton.clone(), self.layout)
            })
            .collect()
    }

    pub fn decode(&self, latent: ArrayView3<f64>) -> Result<MotionSequence> {
        Ok(self.decode_batch(&[latent.to_owned()])?.remove(0))
    }

    pub fn tokenize_batch(&self, motions: &[&MotionSequence]) -> Result<Vec<TokenMap>> {
        self.encode_batch(motions)?.iter().map(|z| Ok(self.quantize(z.view())?.0)).collect()
    }

    pub fn tokenize(&self, motion: &MotionSequence) -> Result<TokenMap> {
        Ok(self.tokenize_batch(&[motion])?.remove(0))
    }

    pub fn detokenize_batch(&self, tokens: &[TokenMap]) -> Result<Vec<MotionSequence>> {
        let latents = tokens.iter().map(|t| self.dequantize(t)).collect::<Result<Vec<_>>>()?;
        self.decode_batch(&latents)
    }

    pub fn detokenize(&self, tokens: &TokenMap) -> Result<MotionSequence> {
        Ok(self.detokenize_batch(std::slice::from_ref(tokens))?.remove(0))
    }

    /// Encode, quantize and decode in one pass.
    pub fn reconstruct_batch(&self, motions: &[&MotionSequence]) -> Result<Vec<MotionSequence>> {
        let tokens = self.tokenize_batch(motions)?;
        self.detokenize_batch(&tokens)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("vq", serde_json::to_value(&self.config)?);
        ck.put_params("param/", &self.params);
        ck.tensors.insert("codebook/entries".into(), self.codebook.entries.clone().into_dyn());
        ck.tensors.insert("codebook/ema_count".into(), self.codebook.ema_count.clone().into_dyn());
        ck.tensors.insert("codebook/ema_sum".into(), self.codebook.ema_sum.clone().into_dyn());
        ck.tensors.insert("norm/mean".into(), self.norm.mean.clone().into_dyn());
        ck.tensors.insert("norm/std".into(), self.norm.std.clone().into_dyn());
        ck.set_meta("skeleton", &self.skeleton)?;
        ck.set_meta("layout", self.layout)?;
        ck.set_meta("fps", self.fps)?;
        ck.set_meta("seed", self.seed)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("vq")?;
        let config: VqConfig = serde_json::from_value(ck.config.clone())?;
        let skeleton: SkeletonSpec = ck.meta("skeleton")?;
        let layout: Layout = ck.meta("layout")?;
        let fps: f32 = ck.meta("fps")?;
        let seed: u64 = ck.meta("seed")?;
        let two = |name: &str| -> Result<Array2<f64>> {
            ck.tensor(name)?.clone().into_dimensionality().map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        };
        let norm = Normalizer { mean: two("norm/mean")?, std: two("norm/std")? };
        let mut model = Self::new(config, skeleton, layout, fps, norm, seed)?;
        let params = ck.take_params("param/");
        for name in model.params.names().to_vec() {
            let t = params.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != model.params.get(&name).unwrap().shape() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}", t.shape())));
            }
            model.params.insert(name, t.clone());
        }
        let mut cb = Codebook::from_entries(two("codebook/entries")?)?;
        cb.ema_sum = two("codebook/ema_sum")?;
        cb.ema_count = ck
            .tensor("codebook/ema_count")?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::Checkpoint(format!("codebook/ema_count: {e}")))?;
        if cb.entries.dim() != (model.config.codebook_size, model.config.latent_dim) {
            return Err(Error::Checkpoint("codebook shape disagrees with config".into()));
        }
        model.codebook = cb;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn motion(frames: usize, skeleton: SkeletonSpec) -> MotionSequence {
        let j = skeleton.joint_count();
        let data = Array3::from_shape_fn((frames, j, 12), |(f, jj, c)| ((f * 7 + jj * 3 + c) as f32 * 0.1).sin());
        MotionSequence::new(data, 20.0, skeleton, Layout::PosVelRot6d).unwrap()
    }

    fn tiny(latent: usize, skeleton: SkeletonSpec) -> VqModel {
        let config = VqConfig { latent_dim: latent, codebook_size: 16, width_in: 4, width: 6, res_blocks: 1, ..VqConfig::desk() };
        let j = skeleton.joint_count();
        VqModel::new(config, skeleton, Layout::PosVelRot6d, 20.0, Normalizer::identity(j, 12), 3).unwrap()
    }

    #[test]
    fn stage_tables_give_expected_grids() {
        let cases = [(SkeletonSpec::synthetic8(), (16, 2)), (SkeletonSpec::interhuman22(), (16, 5)), (SkeletonSpec::interx56(), (16, 5))];
        for (skel, grid) in cases {
            let model = tiny(8, skel);
            assert_eq!(model.token_grid(64).unwrap(), grid);
        }
    }

    #[test]
    fn interhuman_shapes_at_full_latent_width() {
        let model = tiny(512, SkeletonSpec::interhuman22());
        let m = motion(64, SkeletonSpec::interhuman22());
        let z = model.encode(&m).unwrap();
        assert_eq!(z.dim(), (16, 5, 512));
        let back = model.decode(z.view()).unwrap();
        assert_eq!(back.data().dim(), (64, 22, 12));
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let model = tiny(512, SkeletonSpec::synthetic8());
        let m = motion(64, SkeletonSpec::synthetic8());
        let z1 = model.encode(&m).unwrap();
        let z2 = model.encode(&m).unwrap();
        assert_eq!(z1.dim(), (16, 2, 512));
        assert_eq!(z1, z2);
        assert_eq!(model.decode(z1.view()).unwrap().data().dim(), (64, 8, 12));
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = tiny(8, SkeletonSpec::synthetic8());
        assert!(model.encode(&motion(62, SkeletonSpec::synthetic8())).is_err());
        assert!(matches!(model.encode(&motion(64, SkeletonSpec::chain(5))), Err(Error::UnsupportedSkeleton(_))));
        assert!(spatial_stages(13).is_err());
        assert!(model.decode(Array3::zeros((16, 3, 8)).view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny(8, SkeletonSpec::synthetic8());
        let ck = model.to_checkpoint().unwrap();
        let back = VqModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        let m = motion(16, SkeletonSpec::synthetic8());
        let a = model.encode(&m).unwrap();
        let b = back.encode(&m).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-4));
        assert_eq!(back.config, model.config);
    }
}
