//! Metrics over learned motion and text features, plus MPJPE.
//!
//! The feature extractor is a small contrastive model: a per-frame MLP over
//! both persons' features, averaged over time, and a text head over the
//! condition vectors. Features are L2-normalized.

use std::collections::BTreeMap;

use duet_autograd::{AdamW, Bindings, Graph, ParamStore, Tensor, Var};
use log::info;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis, IxDyn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::motion::{InteractionSample, MotionSequence};
use crate::text::{encode_text, TextBackend};

/// Added to both covariances before the matrix square root.
pub const COV_EPS: f64 = 1e-6;

pub fn mpjpe(m: &MotionSequence, m_hat: &MotionSequence) -> Result<f64> {
    if m.frames() != m_hat.frames() || m.joints() != m_hat.joints() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            m.frames(),
            m.joints(),
            m_hat.frames(),
            m_hat.joints()
        )));
    }
    let (p, q) = (m.positions()?, m_hat.positions()?);
    let mut total = 0.0;
    for (x, y) in p.lanes(Axis(2)).into_iter().zip(q.lanes(Axis(2))) {
        total += x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Ok(total / (m.frames() * m.joints()) as f64)
}

fn check_finite(x: ArrayView2<f64>, what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

fn mean_cov(x: ArrayView2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let m = x.nrows();
    let mu = x.mean_axis(Axis(0)).expect("non-empty");
    let c = &x - &mu;
    let denom = (m.max(2) - 1) as f64;
    let cov = c.t().dot(&c) / denom;
    let d = cov.nrows();
    (mu, DMatrix::from_fn(d, d, |i, j| cov[[i, j]]))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets.
pub fn fid(real: ArrayView2<f64>, gen: ArrayView2<f64>) -> Result<f64> {
    if real.ncols() != gen.ncols() || real.nrows() < 2 || gen.nrows() < 2 {
        return Err(Error::DimensionMismatch(format!("feature sets {:?} and {:?}", real.dim(), gen.dim())));
    }
    check_finite(real, "real features")?;
    check_finite(gen, "generated features")?;
    let (mu_r, mut s_r) = mean_cov(real);
    let (mu_g, mut s_g) = mean_cov(gen);
    let d = s_r.nrows();
    s_r += DMatrix::identity(d, d) * COV_EPS;
    s_g += DMatrix::identity(d, d) * COV_EPS;
    // tr((S_r S_g)^1/2) = tr((R S_g R)^1/2) with R = S_r^1/2, which keeps
    // the argument symmetric.
    let r = sym_sqrt(&s_r);
    let inner = &r * &s_g * &r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &mu_r - &mu_g;
    let value = diff.dot(&diff) + s_r.trace() + s_g.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
}

/// Top-1/2/3 retrieval rates. Each query row is ranked against its own
/// candidate list, whose first entry is the true match; ties count
/// against the true match.
pub fn r_precision_pools(queries: ArrayView2<f64>, pools: &[Array2<f64>]) -> Result<TopK> {
    if queries.nrows() != pools.len() || queries.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!("{} queries, {} pools", queries.nrows(), pools.len())));
    }
    let mut hits = [0usize; 3];
    for (q, pool) in queries.outer_iter().zip(pools) {
        let truth = dist(q, pool.row(0));
        let rank = pool.outer_iter().skip(1).filter(|c| dist(q, c.view()) <= truth).count();
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    let n = queries.nrows() as f64;
    Ok(TopK { top1: hits[0] as f64 / n, top2: hits[1] as f64 / n, top3: hits[2] as f64 / n })
}

/// Rank each generated row's own text among `pool - 1` texts of other rows.
pub fn r_precision<R: Rng + ?Sized>(gen: ArrayView2<f64>, texts: ArrayView2<f64>, pool: usize, rng: &mut R) -> Result<TopK> {
    let m = gen.nrows();
    if texts.dim() != gen.dim() {
        return Err(Error::DimensionMismatch("one text feature per generated feature".into()));
    }
    if pool == 0 || pool > m {
        return Err(invalid(format!("pool of {pool} from {m} texts")));
    }
    let pools: Vec<Array2<f64>> = (0..m)
        .map(|i| {
            let mut idx = vec![i];
            let others: Vec<usize> = (0..m).filter(|&k| k != i).collect();
            idx.extend(others.choose_multiple(rng, pool - 1));
            texts.select(Axis(0), &idx)
        })
        .collect();
    r_precision_pools(gen, &pools)
}

pub fn mm_dist(gen: ArrayView2<f64>, texts: ArrayView2<f64>) -> Result<f64> {
    if gen.dim() != texts.dim() || gen.nrows() == 0 {
        return Err(Error::DimensionMismatch("one text feature per generated feature".into()));
    }
    Ok(gen.outer_iter().zip(texts.outer_iter()).map(|(a, b)| dist(a, b)).sum::<f64>() / gen.nrows() as f64)
}

/// Mean distance over `pairs` random pairs of distinct rows.
pub fn diversity<R: Rng + ?Sized>(feats: ArrayView2<f64>, pairs: usize, rng: &mut R) -> Result<f64> {
    let m = feats.nrows();
    if m < 2 || pairs == 0 {
        return Err(invalid("diversity needs at least two features and one pair"));
    }
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..m);
        let mut j = rng.random_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        total += dist(feats.row(i), feats.row(j));
    }
    Ok(total / pairs as f64)
}

/// Mean within-group pairwise distance, averaged over groups.
pub fn mmodality(groups: &[Array2<f64>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(invalid("no generation groups"));
    }
    let mut acc = 0.0;
    for g in groups {
        if g.nrows() < 2 {
            return Err(invalid("every group needs two or more generations"));
        }
        let mut s = 0.0;
        let mut n = 0usize;
        for i in 0..g.nrows() {
            for j in i + 1..g.nrows() {
                s += dist(g.row(i), g.row(j));
                n += 1;
            }
        }
        acc += s / n as f64;
    }
    Ok(acc / groups.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { feature_dim: 64, hidden: 128, temperature: 0.1, epochs: 40, batch_size: 32, lr: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub params: ParamStore,
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub text_dim: usize,
}

fn frame_features(a: &MotionSequence, b: &MotionSequence) -> Result<Array2<f64>> {
    if !a.same_format(b) {
        return Err(Error::DimensionMismatch("both persons must share a format".into()));
    }
    let n = a.frames();
    let (x, y) = (a.to_f64(), b.to_f64());
    let fa = x.into_shape_with_order((n, a.joints() * a.features())).expect("contiguous");
    let fb = y.into_shape_with_order((n, b.joints() * b.features())).expect("contiguous");
    Ok(ndarray::concatenate(Axis(1), &[fa.view(), fb.view()]).expect("same rows"))
}

fn l2_normalize<'g>(x: Var<'g>) -> Var<'g> {
    x * x.square().sum_axis(1).offset(1e-12).powf(-0.5)
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig, input_dim: usize, text_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, f) = (config.hidden, config.feature_dim);
        for (name, i, o) in [("int.l1", input_dim, h), ("int.l2", h, f), ("txt.l1", text_dim, h), ("txt.l2", h, f)] {
            params.uniform_fan_in(&format!("{name}.w"), &[i, o], i, &mut rng);
            params.zeros(&format!("{name}.b"), &[o]);
        }
        Self { config, params, mean: Array1::zeros(input_dim), std: Array1::ones(input_dim), text_dim }
    }

    fn motion_batch(&self, pairs: &[(&MotionSequence, &MotionSequence)]) -> Result<Tensor> {
        let first = frame_features(pairs[0].0, pairs[0].1)?;
        let (n, d) = first.dim();
        if d != self.mean.len() {
            return Err(Error::DimensionMismatch(format!("motion features {d} vs extractor {}", self.mean.len())));
        }
        let mut out = Tensor::zeros(IxDyn(&[pairs.len(), n, d]));
        for (i, (a, b)) in pairs.iter().enumerate() {
            let f = frame_features(a, b)?;
            if f.dim() != (n, d) {
                return Err(Error::DimensionMismatch("all interactions in a batch need the same length".into()));
            }
            let f = (&f - &self.mean) / &self.std;
            out.index_axis_mut(Axis(0), i).assign(&f.into_dyn());
        }
        Ok(out)
    }

    fn motion_graph<'g>(&self, b: &Bindings<'g, '_>, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let h = x.matmul(b.p("int.l1.w")) + b.p("int.l1.b");
        let pooled = h.gelu().mean_axis(1).reshape(&[s[0], self.config.hidden]);
        l2_normalize(pooled.matmul(b.p("int.l2.w")) + b.p("int.l2.b"))
    }

    fn text_graph<'g>(&self, b: &Bindings<'g, '_>, t: Var<'g>) -> Var<'g> {
        let h = (t.matmul(b.p("txt.l1.w")) + b.p("txt.l1.b")).gelu();
        l2_normalize(h.matmul(b.p("txt.l2.w")) + b.p("txt.l2.b"))
    }

    pub fn motion_features(&self, pairs: &[(&MotionSequence, &MotionSequence)]) -> Result<Array2<f64>> {
        if pairs.is_empty() {
            return Ok(Array2::zeros((0, self.config.feature_dim)));
        }
        let g = Graph::new();
        let b = Bindings::frozen(&g, &self.params);
        let x = g.constant(self.motion_batch(pairs)?);
        Ok((*self.motion_graph(&b, x).value()).clone().into_dimensionality().expect("2-D"))
    }

    pub fn text_features(&self, texts: &[&str], backend: &TextBackend) -> Result<Array2<f64>> {
        let mut t = Array2::zeros((texts.len(), self.text_dim));
        for (i, s) in texts.iter().enumerate() {
            let e = encode_text(s, backend)?;
            if e.dim() != self.text_dim {
                return Err(Error::DimensionMismatch(format!("text width {} vs {}", e.dim(), self.text_dim)));
            }
            t.row_mut(i).assign(&Array1::from(e.vector));
        }
        if texts.is_empty() {
            return Ok(Array2::zeros((0, self.config.feature_dim)));
        }
        let g = Graph::new();
        let b = Bindings::frozen(&g, &self.params);
        let v = self.text_graph(&b, g.constant(t.into_dyn()));
        Ok((*v.value()).clone().into_dimensionality().expect("2-D"))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("extractor", serde_json::to_value(&self.config)?);
        ck.put_params("param/", &self.params);
        ck.tensors.insert("norm/mean".into(), self.mean.clone().into_dyn());
        ck.tensors.insert("norm/std".into(), self.std.clone().into_dyn());
        ck.set_meta("text_dim", self.text_dim)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("extractor")?;
        let config: ExtractorConfig = serde_json::from_value(ck.config.clone())?;
        let one = |name: &str| -> Result<Array1<f64>> {
            ck.tensor(name)?.clone().into_dimensionality().map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        };
        let (mean, std) = (one("norm/mean")?, one("norm/std")?);
        let mut fx = Self::new(config, mean.len(), ck.meta("text_dim")?, 0);
        let stored = ck.take_params("param/");
        for name in fx.params.names().to_vec() {
            let t = stored.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != fx.params.get(&name).expect("known").shape() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}", t.shape())));
            }
            fx.params.insert(name, t.clone());
        }
        fx.mean = mean;
        fx.std = std;
        Ok(fx)
    }
}

/// Contrastive training: each interaction is classified against the
/// distinct texts drawn in its batch.
pub fn train_feature_extractor(
    samples: &[InteractionSample],
    backend: &TextBackend,
    config: ExtractorConfig,
    seed: u64,
) -> Result<(FeatureExtractor, Vec<f64>)> {
    // Unlabeled data falls back to counting distinct texts.
    let distinct: std::collections::BTreeSet<&str> = if samples.iter().all(|s| s.class.is_some()) {
        samples.iter().filter_map(|s| s.class.as_deref()).collect()
    } else {
        samples.iter().flat_map(|s| s.texts.iter().map(String::as_str)).collect()
    };
    if distinct.len() < 2 {
        return Err(invalid("contrastive training needs more than one class"));
    }
    if config.epochs > 0 && config.batch_size < 2 {
        return Err(Error::Config("contrastive batches need at least two samples".into()));
    }
    let feats: Vec<Array2<f64>> = samples.iter().map(|s| frame_features(&s.motion_a, &s.motion_b)).collect::<Result<_>>()?;
    let d = feats[0].ncols();
    let mut fx = FeatureExtractor::new(config.clone(), d, backend.dim(), seed);
    let mut all = Array2::zeros((0, d));
    for f in &feats {
        all.append(Axis(0), f.view()).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    }
    fx.mean = all.mean_axis(Axis(0)).expect("non-empty");
    fx.std = all.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-3));

    let mut cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in samples {
        for t in &s.texts {
            if !cache.contains_key(t.as_str()) {
                cache.insert(t, encode_text(t, backend)?.vector);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7);
    let mut opt = AdamW::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut uniq: Vec<&str> = Vec::new();
            let mut targets = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let t = samples[k].texts[rng.random_range(0..samples[k].texts.len())].as_str();
                let idx = uniq.iter().position(|u| *u == t).unwrap_or_else(|| {
                    uniq.push(t);
                    uniq.len() - 1
                });
                targets.push(idx);
            }
            let mut tmat = Array2::zeros((uniq.len(), fx.text_dim));
            for (i, t) in uniq.iter().enumerate() {
                tmat.row_mut(i).assign(&ndarray::ArrayView1::from(&cache[t][..]));
            }
            let pairs: Vec<_> = chunk.iter().map(|&k| (&samples[k].motion_a, &samples[k].motion_b)).collect();
            let g = Graph::new();
            let b = Bindings::new(&g, &fx.params);
            let zm = fx.motion_graph(&b, g.constant(fx.motion_batch(&pairs)?));
            let zt = fx.text_graph(&b, g.constant(tmat.into_dyn()));
            let logits = zm.matmul(zt.permute(&[1, 0])).scale(1.0 / config.temperature);
            let loss = logits.cross_entropy(&targets);
            let v = loss.item();
            if !v.is_finite() {
                return Err(Error::Diverged { step: log.len(), detail: "non-finite contrastive loss".into() });
            }
            let mut grads = g.backward(loss);
            let grads = b.gradients(&mut grads);
            drop(b);
            opt.step(&mut fx.params, &grads, config.lr);
            sum += v;
            count += 1;
        }
        let mean = sum / count.max(1) as f64;
        info!("extractor epoch {epoch}: loss {mean:.4}");
        log.push(mean);
    }
    Ok((fx, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub r_precision: TopK,
    pub mm_dist: f64,
    pub diversity: f64,
    pub mmodality: Option<f64>,
    pub mpjpe: Option<f64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{generate_synthetic_interactions, GeneratorConfig};
    use ndarray::Array;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng, m: usize, d: usize, mu: f64, sd: f64) -> Array2<f64> {
        let n = Normal::new(mu, sd).unwrap();
        Array::from_shape_fn((m, d), |_| n.sample(rng))
    }

    #[test]
    fn mpjpe_cases() {
        let s = &generate_synthetic_interactions(&GeneratorConfig::three_class(1, 16), 0).unwrap()[0];
        let m = &s.motion_a;
        assert_eq!(mpjpe(m, m).unwrap(), 0.0);
        let mut shifted = m.data().clone();
        shifted.slice_mut(ndarray::s![.., .., 0]).mapv_inplace(|v| v + 0.1);
        let off = mpjpe(m, &m.with_data(shifted).unwrap()).unwrap();
        assert!((off - 0.1).abs() < 1e-6, "{off}");
        let o = &s.motion_b;
        let (p, q) = (m.positions().unwrap(), o.positions().unwrap());
        let mut oracle = 0.0;
        for t in 0..16 {
            for j in 0..8 {
                let mut s2 = 0.0;
                for c in 0..3 {
                    s2 += (p[[t, j, c]] - q[[t, j, c]]).powi(2);
                }
                oracle += s2.sqrt();
            }
        }
        assert!((mpjpe(m, o).unwrap() - oracle / 128.0).abs() < 1e-9);
        let short = generate_synthetic_interactions(&GeneratorConfig::three_class(1, 8), 0).unwrap();
        assert!(mpjpe(m, &short[0].motion_a).is_err());
    }

    #[test]
    fn mpjpe_triangle_inequality() {
        let s = generate_synthetic_interactions(&GeneratorConfig::three_class(2, 16), 1).unwrap();
        for w in s.windows(2) {
            let (a, b, c) = (&w[0].motion_a, &w[0].motion_b, &w[1].motion_a);
            let ab = mpjpe(a, b).unwrap();
            assert_eq!(ab, mpjpe(b, a).unwrap());
            assert!(mpjpe(a, c).unwrap() <= ab + mpjpe(b, c).unwrap() + 1e-12);
        }
    }

    #[test]
    fn fid_identity_symmetry_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gauss(&mut rng, 200, 4, 0.0, 1.0);
        let y = gauss(&mut rng, 150, 4, 0.5, 2.0);
        assert!(fid(x.view(), x.view()).unwrap() < 1e-6);
        let (a, b) = (fid(x.view(), y.view()).unwrap(), fid(y.view(), x.view()).unwrap());
        assert!((a - b).abs() < 1e-8 * a.max(1.0));
        let q = SymmetricEigen::new(DMatrix::from_fn(4, 4, |i, j| ((i * 4 + j) as f64).sin() + if i == j { 3.0 } else { 0.0 }))
            .eigenvectors;
        let q = Array2::from_shape_fn((4, 4), |(i, j)| q[(i, j)]);
        let r = fid(x.dot(&q).view(), y.dot(&q).view()).unwrap();
        assert!((r - a).abs() < 1e-5);
    }

    #[test]
    fn fid_two_dim_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gauss(&mut rng, 300, 2, 0.0, 1.0);
        let y = gauss(&mut rng, 300, 2, 0.7, 1.5);
        // Independent 2x2 oracle: tr(sqrt(A)) = sqrt(tr(A) + 2 sqrt(det(A))).
        let cov = |z: &Array2<f64>| {
            let mu = z.mean_axis(Axis(0)).unwrap();
            let c = z - &mu;
            let s = c.t().dot(&c) / (z.nrows() - 1) as f64 + Array2::<f64>::eye(2) * COV_EPS;
            (mu, s)
        };
        let (mx, sx) = cov(&x);
        let (my, sy) = cov(&y);
        let p = sx.dot(&sy);
        let det = p[[0, 0]] * p[[1, 1]] - p[[0, 1]] * p[[1, 0]];
        let tr_sqrt = (p[[0, 0]] + p[[1, 1]] + 2.0 * det.sqrt()).sqrt();
        let oracle = (&mx - &my).mapv(|v| v * v).sum() + sx[[0, 0]] + sx[[1, 1]] + sy[[0, 0]] + sy[[1, 1]] - 2.0 * tr_sqrt;
        assert!((fid(x.view(), y.view()).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn fid_rejects_non_finite() {
        let mut x = Array2::<f64>::zeros((3, 2));
        x[[0, 0]] = f64::NAN;
        assert!(fid(x.view(), Array2::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn r_precision_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gauss(&mut rng, 64, 8, 0.0, 1.0);
        let perfect = r_precision(x.view(), x.view(), 32, &mut rng).unwrap();
        assert_eq!(perfect, TopK { top1: 1.0, top2: 1.0, top3: 1.0 });
        let y = gauss(&mut rng, 64, 8, 0.0, 1.0);
        let r = r_precision(x.view(), y.view(), 32, &mut rng).unwrap();
        assert!(r.top1 <= r.top2 && r.top2 <= r.top3 && r.top3 <= 1.0);
        assert!(r_precision(x.view(), y.view(), 65, &mut rng).is_err());
    }

    #[test]
    fn distance_metrics() {
        let same = Array2::from_elem((5, 3), 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(mm_dist(same.view(), same.view()).unwrap(), 0.0);
        assert_eq!(diversity(same.view(), 300, &mut rng).unwrap(), 0.0);
        assert_eq!(mmodality(&[same.clone(), same.clone()]).unwrap(), 0.0);
        let two = ndarray::arr2(&[[0.0, 0.0], [3.0, 0.0]]);
        assert_eq!(diversity(two.view(), 300, &mut rng).unwrap(), 3.0);
        assert!(mmodality(&[two.slice(ndarray::s![0..1, ..]).to_owned()]).is_err());
    }

    #[test]
    fn mm_dist_null_equal_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 4000;
        let g = Array::from_shape_fn((m, 4), |_| Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let t = Array::from_shape_fn((m, 4), |_| Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let mut idx: Vec<usize> = (0..m).collect();
        idx.shuffle(&mut rng);
        let shuffled = t.select(Axis(0), &idx);
        let (a, b) = (mm_dist(g.view(), t.view()).unwrap(), mm_dist(g.view(), shuffled.view()).unwrap());
        assert!((a - b).abs() < 0.05 * a, "{a} {b}");
    }

    #[test]
    fn extractor_separates_classes_and_is_deterministic() {
        let data = generate_synthetic_interactions(&GeneratorConfig::three_class(10, 32), 7).unwrap();
        let cfg = ExtractorConfig { epochs: 25, batch_size: 10, ..ExtractorConfig::default() };
        let (fx, log) = train_feature_extractor(&data, &TextBackend::Hash, cfg.clone(), 1).unwrap();
        let (fx2, log2) = train_feature_extractor(&data, &TextBackend::Hash, cfg, 1).unwrap();
        assert_eq!(log, log2);
        let pairs: Vec<_> = data.iter().map(|s| (&s.motion_a, &s.motion_b)).collect();
        let zm = fx.motion_features(&pairs).unwrap();
        assert_eq!(zm, fx2.motion_features(&pairs).unwrap());
        let texts: Vec<&str> = data.iter().map(|s| s.texts[0].as_str()).collect();
        let zt = fx.text_features(&texts, &TextBackend::Hash).unwrap();
        let sims = zm.dot(&zt.t());
        let matched = sims.diag().mean().unwrap();
        let n = data.len() as f64;
        let mismatched = (sims.sum() - sims.diag().sum()) / (n * n - n);
        assert!(matched - mismatched >= 0.2, "{matched} vs {mismatched}");
    }

    #[test]
    fn untrained_extractor_gives_finite_features() {
        let data = generate_synthetic_interactions(&GeneratorConfig::three_class(1, 16), 8).unwrap();
        let cfg = ExtractorConfig { epochs: 0, ..ExtractorConfig::default() };
        let (fx, _) = train_feature_extractor(&data, &TextBackend::Hash, cfg, 0).unwrap();
        let z = fx.motion_features(&[(&data[0].motion_a, &data[0].motion_b)]).unwrap();
        assert_eq!(z.dim(), (1, 64));
        assert!(z.iter().all(|v| v.is_finite()));
        let many = generate_synthetic_interactions(&GeneratorConfig::three_class(4, 16), 8).unwrap();
        let single: Vec<_> = many.into_iter().filter(|s| s.class.as_deref() == Some("orbit")).collect();
        assert_eq!(single.len(), 4);
        assert!(train_feature_extractor(&single, &TextBackend::Hash, ExtractorConfig::default(), 0).is_err());
    }

    #[test]
    fn extractor_checkpoint_round_trip() {
        let fx = FeatureExtractor::new(ExtractorConfig::default(), 10, 6, 3);
        let ck = Checkpoint::from_bytes(&fx.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        let back = FeatureExtractor::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config, fx.config);
        assert_eq!(back.text_dim, 6);
    }
}
