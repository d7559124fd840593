//! Reconstruction, commitment and geometric losses.
//!
//! Every L1 term is a mean over its entries, matching the reconstruction
//! term. Geometric terms act on joint positions in the data's own units.

use duet_autograd::{Graph, Tensor, Var};
use ndarray::{s, Array3, ArrayView2, ArrayView3, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::motion::{MotionSequence, SkeletonSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricWeights {
    pub vel: f64,
    pub fc: f64,
    pub bl: f64,
}

impl GeometricWeights {
    pub fn interhuman() -> Self {
        Self { vel: 100.0, fc: 500.0, bl: 5.0 }
    }

    pub fn interx() -> Self {
        Self { vel: 100.0, fc: 100.0, bl: 5.0 }
    }

    /// Used for the synthetic rig. With the large contact weight the decoder
    /// learns to park the foot at its mean position on this data.
    pub fn unit() -> Self {
        Self { vel: 1.0, fc: 1.0, bl: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLossParts {
    pub recon: f64,
    pub commitment: f64,
    pub vel: f64,
    pub fc: f64,
    pub bl: f64,
}

pub fn total_vq_loss(parts: &VqLossParts, w: &GeometricWeights) -> f64 {
    parts.recon + parts.commitment + w.vel * parts.vel + w.fc * parts.fc + w.bl * parts.bl
}

pub fn recon_l1<'g>(target: Var<'g>, recon: Var<'g>) -> Var<'g> {
    (target - recon).abs().mean()
}

/// `beta * mean((latent - sg(quantized))^2)`; the codebook receives nothing.
pub fn commitment<'g>(latent: Var<'g>, quantized: Var<'g>, beta: f64) -> Var<'g> {
    (latent - quantized.detach()).square().mean().scale(beta)
}

const BONE_EPS: f64 = 1e-12;

fn frame_diff<'g>(pos: Var<'g>) -> Var<'g> {
    let n = pos.shape()[1];
    pos.narrow(1, 1, n - 1) - pos.narrow(1, 0, n - 1)
}

fn bone_lengths_var<'g>(pos: Var<'g>, skeleton: &SkeletonSpec) -> Var<'g> {
    let (children, parents): (Vec<usize>, Vec<usize>) = skeleton.bones().unzip();
    let d = pos.index_select(2, &children) - pos.index_select(2, &parents);
    d.square().sum_axis(3).offset(BONE_EPS).powf(0.5)
}

/// Velocity, foot-contact and bone-length terms on `[B, N, J, 3]` positions.
/// `contact` is `[B, N-1, F, 1]` with 1 where the foot is planted.
pub fn geometric_terms<'g>(
    target: Var<'g>,
    recon: Var<'g>,
    contact: Var<'g>,
    skeleton: &SkeletonSpec,
) -> (Var<'g>, Var<'g>, Var<'g>) {
    let vel = (frame_diff(target) - frame_diff(recon)).abs().mean();
    let feet = frame_diff(recon.index_select(2, &skeleton.feet));
    let fc = (feet * contact).abs().mean();
    let bl = (bone_lengths_var(target, skeleton) - bone_lengths_var(recon, skeleton)).abs().mean();
    (vel, fc, bl)
}

fn as_tensor(a: ArrayView3<f64>) -> Tensor {
    a.to_owned().into_dyn()
}

/// Reconstruction L1 and commitment on plain arrays.
pub fn vq_losses(
    m: ArrayView3<f64>,
    m_hat: ArrayView3<f64>,
    latent: ArrayView3<f64>,
    quantized: ArrayView3<f64>,
    beta: f64,
) -> Result<(f64, f64)> {
    if m.dim() != m_hat.dim() || latent.dim() != quantized.dim() {
        return Err(Error::DimensionMismatch("loss operands differ in shape".into()));
    }
    let g = Graph::new();
    let r = recon_l1(g.constant(as_tensor(m)), g.constant(as_tensor(m_hat))).item();
    let c = commitment(g.constant(as_tensor(latent)), g.constant(as_tensor(quantized)), beta).item();
    Ok((r, c))
}

/// `(L_vel, L_fc, L_bl)` for one pair; `foot_labels` is `N x F` (the last
/// row is unused).
pub fn geometric_losses(m: &MotionSequence, m_hat: &MotionSequence, foot_labels: ArrayView2<u8>) -> Result<(f64, f64, f64)> {
    if !m.same_format(m_hat) {
        return Err(Error::DimensionMismatch("motions differ in format".into()));
    }
    let n = m.frames();
    if n < 2 {
        return Err(invalid("geometric losses need at least two frames"));
    }
    let feet = m.skeleton().feet.len();
    if foot_labels.dim() != (n, feet) {
        return Err(Error::DimensionMismatch(format!("foot labels {:?} vs ({n}, {feet})", foot_labels.dim())));
    }
    let pos = m.positions()?.insert_axis(Axis(0));
    let pos_hat = m_hat.positions()?.insert_axis(Axis(0));
    let contact = contact_tensor(&[foot_labels]);
    let g = Graph::new();
    let (v, f, b) = geometric_terms(
        g.constant(pos.into_dyn()),
        g.constant(pos_hat.into_dyn()),
        g.constant(contact),
        m.skeleton(),
    );
    Ok((v.item(), f.item(), b.item()))
}

/// Stack `N x F` labels into the `[B, N-1, F, 1]` mask used by the loss.
pub fn contact_tensor(labels: &[ArrayView2<u8>]) -> Tensor {
    let (n, f) = labels[0].dim();
    let mut out = Array3::<f64>::zeros((0, n - 1, f));
    for l in labels {
        let part = l.slice(s![..n - 1, ..]).mapv(f64::from).insert_axis(Axis(0));
        out.append(Axis(0), part.view()).expect("same label shape");
    }
    let b = labels.len();
    out.into_shape_with_order(IxDyn(&[b, n - 1, f, 1])).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{bone_lengths, Layout};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_motion(rng: &mut ChaCha8Rng, n: usize) -> MotionSequence {
        let data = Array::from_shape_fn((n, 8, 12), |_| rng.random_range(-1.0f32..1.0));
        MotionSequence::new(data, 20.0, SkeletonSpec::synthetic8(), Layout::PosVelRot6d).unwrap()
    }

    #[test]
    fn perfect_fit_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = random_motion(&mut rng, 6).to_f64();
        let (r, c) = vq_losses(m.view(), m.view(), m.view(), m.view(), 0.02).unwrap();
        assert_eq!((r, c), (0.0, 0.0));
        let shifted = &m + 1.0;
        let (r, _) = vq_losses(m.view(), shifted.view(), m.view(), m.view(), 0.02).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vq_losses_match_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_motion(&mut rng, 5).to_f64();
        let b = random_motion(&mut rng, 5).to_f64();
        let z = Array::from_shape_fn((2, 2, 4), |_| rng.random_range(-1.0..1.0));
        let q = Array::from_shape_fn((2, 2, 4), |_| rng.random_range(-1.0..1.0));
        let (r, c) = vq_losses(a.view(), b.view(), z.view(), q.view(), 0.02).unwrap();
        let mut rr = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            rr += (x - y).abs();
        }
        rr /= a.len() as f64;
        let mut cc = 0.0;
        for (x, y) in z.iter().zip(q.iter()) {
            cc += (x - y) * (x - y);
        }
        cc = 0.02 * cc / z.len() as f64;
        assert!((r - rr).abs() < 1e-9 && (c - cc).abs() < 1e-9);
    }

    #[test]
    fn geometric_identity_and_static_feet() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_motion(&mut rng, 7);
        let planted = ndarray::Array2::<u8>::ones((7, 1));
        let (v, _, b) = geometric_losses(&m, &m, planted.view()).unwrap();
        assert_eq!(v, 0.0);
        assert!(b.abs() < 1e-9);
        let mut frozen = m.data().clone();
        let first = frozen.slice(s![0..1, .., ..]).to_owned();
        for mut f in frozen.outer_iter_mut() {
            f.assign(&first.index_axis(Axis(0), 0));
        }
        let still = m.with_data(frozen).unwrap();
        let (_, fc, _) = geometric_losses(&m, &still, planted.view()).unwrap();
        assert_eq!(fc, 0.0);
    }

    #[test]
    fn geometric_losses_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let skel = SkeletonSpec::synthetic8();
        let m = random_motion(&mut rng, 9);
        let h = random_motion(&mut rng, 9);
        let labels = Array::from_shape_fn((9, 1), |_| u8::from(rng.random_bool(0.5)));
        let (v, f, b) = geometric_losses(&m, &h, labels.view()).unwrap();
        let p = m.positions().unwrap();
        let q = h.positions().unwrap();
        let (mut ov, mut of, mut ob) = (0.0, 0.0, 0.0);
        for t in 0..8 {
            for j in 0..8 {
                for c in 0..3 {
                    ov += ((p[[t + 1, j, c]] - p[[t, j, c]]) - (q[[t + 1, j, c]] - q[[t, j, c]])).abs();
                }
            }
            for c in 0..3 {
                of += ((q[[t + 1, 7, c]] - q[[t, 7, c]]) * f64::from(labels[[t, 0]])).abs();
            }
        }
        for t in 0..9 {
            let lp = bone_lengths(p.index_axis(Axis(0), t), &skel).unwrap();
            let lq = bone_lengths(q.index_axis(Axis(0), t), &skel).unwrap();
            ob += lp.iter().zip(&lq).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
        ov /= (8 * 8 * 3) as f64;
        of /= (8 * 3) as f64;
        ob /= (9 * 7) as f64;
        assert!((v - ov).abs() < 1e-9, "{v} vs {ov}");
        assert!((f - of).abs() < 1e-9, "{f} vs {of}");
        assert!((b - ob).abs() < 1e-9, "{b} vs {ob}");
    }

    #[test]
    fn too_short_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_motion(&mut rng, 1);
        let l = ndarray::Array2::<u8>::zeros((1, 1));
        assert!(geometric_losses(&m, &m, l.view()).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = GeometricWeights::interhuman();
        assert_eq!(total_vq_loss(&VqLossParts::default(), &w), 0.0);
        assert_eq!(total_vq_loss(&VqLossParts { recon: 1.0, ..Default::default() }, &w), 1.0);
        let parts = VqLossParts { recon: 0.5, commitment: 0.0, vel: 0.01, fc: 0.002, bl: 0.1 };
        assert!((total_vq_loss(&parts, &w) - 3.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn total_loss_monotone(base in proptest::array::uniform5(0.0f64..10.0), which in 0usize..5, bump in 0.0f64..5.0) {
            let w = GeometricWeights::interx();
            let mk = |v: [f64; 5]| VqLossParts { recon: v[0], commitment: v[1], vel: v[2], fc: v[3], bl: v[4] };
            let mut raised = base;
            raised[which] += bump;
            proptest::prop_assert!(total_vq_loss(&mk(raised), &w) >= total_vq_loss(&mk(base), &w));
        }
    }
}
