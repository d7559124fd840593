//! Motion data model, skeletal geometry and feature derivation.

pub mod io;
pub mod rotation;
pub mod skeleton;
pub mod synth;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
pub use rotation::{rotation_from_6d, rotation_to_6d, Mat3};
pub use skeleton::SkeletonSpec;
pub use synth::{generate_synthetic_interactions, GeneratorConfig, ClassCount, CLASSES};

/// Per-joint feature layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Layout {
    /// Global position (3), global velocity (3), local 6D rotation (6).
    PosVelRot6d,
    /// Local 6D rotation only.
    Rot6d,
    /// Row 0 carries root position and velocity; every other row a 6D rotation.
    RootPosVelRot6d,
}

impl Layout {
    pub fn code(self) -> u32 {
        match self {
            Layout::PosVelRot6d => 0,
            Layout::Rot6d => 1,
            Layout::RootPosVelRot6d => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Layout::PosVelRot6d),
            1 => Some(Layout::Rot6d),
            2 => Some(Layout::RootPosVelRot6d),
            _ => None,
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            Layout::PosVelRot6d => 12,
            Layout::Rot6d | Layout::RootPosVelRot6d => 6,
        }
    }

    /// Every joint carries a global position in channels `0..3`.
    pub fn has_joint_positions(self) -> bool {
        self == Layout::PosVelRot6d
    }
}

/// One person's motion: `N x J x d` features at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    data: Array3<f32>,
    fps: f32,
    skeleton: SkeletonSpec,
    layout: Layout,
}

impl MotionSequence {
    pub fn new(data: Array3<f32>, fps: f32, skeleton: SkeletonSpec, layout: Layout) -> Result<Self> {
        let (n, j, d) = data.dim();
        if n == 0 {
            return Err(invalid("motion needs at least one frame"));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(invalid(format!("fps must be positive, got {fps}")));
        }
        if j != skeleton.joint_count() {
            return Err(Error::DimensionMismatch(format!("{j} joints but skeleton `{}` has {}", skeleton.name, skeleton.joint_count())));
        }
        if d != layout.feature_dim() {
            return Err(Error::DimensionMismatch(format!("feature dim {d} does not match layout {layout:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("motion data".into()));
        }
        Ok(Self { data, fps, skeleton, layout })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn skeleton(&self) -> &SkeletonSpec {
        &self.skeleton
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn joints(&self) -> usize {
        self.data.dim().1
    }

    pub fn features(&self) -> usize {
        self.data.dim().2
    }

    pub fn to_f64(&self) -> Array3<f64> {
        self.data.mapv(f64::from)
    }

    /// Global joint positions `N x J x 3`.
    pub fn positions(&self) -> Result<Array3<f64>> {
        if !self.layout.has_joint_positions() {
            return Err(invalid(format!("layout {:?} has no joint positions", self.layout)));
        }
        Ok(self.data.slice(s![.., .., 0..3]).mapv(f64::from))
    }

    /// Same skeleton, fps and layout; new feature values.
    pub fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        Self::new(data, self.fps, self.skeleton.clone(), self.layout)
    }

    pub fn same_format(&self, other: &Self) -> bool {
        self.data.dim() == other.data.dim()
            && self.fps == other.fps
            && self.skeleton == other.skeleton
            && self.layout == other.layout
    }
}

/// A paired two-person sample with its text annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSample {
    pub id: String,
    pub class: Option<String>,
    pub texts: Vec<String>,
    pub motion_a: MotionSequence,
    pub motion_b: MotionSequence,
}

impl InteractionSample {
    pub fn new(
        id: impl Into<String>,
        class: Option<String>,
        texts: Vec<String>,
        motion_a: MotionSequence,
        motion_b: MotionSequence,
    ) -> Result<Self> {
        if texts.is_empty() {
            return Err(invalid("interaction sample needs at least one text"));
        }
        if !motion_a.same_format(&motion_b) {
            return Err(Error::DimensionMismatch("both persons must share frames, fps, skeleton and layout".into()));
        }
        Ok(Self { id: id.into(), class, texts, motion_a, motion_b })
    }
}

/// Forward differences scaled by `fps`; the last frame repeats the previous
/// difference and a single frame yields zeros.
pub fn derive_velocity_features(positions: ArrayView3<f64>, fps: f64) -> Result<Array3<f64>> {
    let (n, _, _) = positions.dim();
    if n == 0 {
        return Err(invalid("velocity of an empty sequence"));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(invalid(format!("fps must be positive, got {fps}")));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("positions".into()));
    }
    let mut out = Array3::zeros(positions.raw_dim());
    if n == 1 {
        return Ok(out);
    }
    let diff = (&positions.slice(s![1.., .., ..]) - &positions.slice(s![..n - 1, .., ..])) * fps;
    out.slice_mut(s![..n - 1, .., ..]).assign(&diff);
    let last = out.slice(s![n - 2, .., ..]).to_owned();
    out.slice_mut(s![n - 1, .., ..]).assign(&last);
    Ok(out)
}

/// Euclidean length of every bone (non-root joint to its parent).
pub fn bone_lengths(pose: ArrayView2<f64>, skeleton: &SkeletonSpec) -> Result<Vec<f64>> {
    if pose.dim() != (skeleton.joint_count(), 3) {
        return Err(Error::DimensionMismatch(format!("pose {:?} vs {} joints", pose.dim(), skeleton.joint_count())));
    }
    if pose.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pose".into()));
    }
    Ok(skeleton
        .bones()
        .map(|(j, p)| {
            let d = &pose.row(j) - &pose.row(p);
            d.dot(&d).sqrt()
        })
        .collect())
}

/// Contact threshold in position units per second for a given frame rate.
pub fn default_contact_threshold(fps: f64) -> f64 {
    0.02 * fps
}

/// `1` where a foot joint moves slower than `velocity_threshold`.
pub fn foot_contact_labels(motion: &MotionSequence, velocity_threshold: f64) -> Result<Array2<u8>> {
    if !(velocity_threshold > 0.0) {
        return Err(invalid("contact threshold must be positive"));
    }
    let pos = motion.positions()?;
    let vel = derive_velocity_features(pos.view(), f64::from(motion.fps()))?;
    let feet = &motion.skeleton().feet;
    let mut labels = Array2::zeros((motion.frames(), feet.len()));
    for f in 0..motion.frames() {
        for (k, &joint) in feet.iter().enumerate() {
            let v = vel.slice(s![f, joint, ..]);
            let speed = v.dot(&v).sqrt();
            labels[[f, k]] = u8::from(speed < velocity_threshold);
        }
    }
    Ok(labels)
}
