//! Deterministic synthetic two-person interactions on the 8-joint skeleton.
//!
//! Each class drives a small forward-kinematics rig: every joint's local
//! rotation orients the bone arriving at it, the root rotation is the body
//! yaw. Positions, velocities and local 6D rotations are then assembled into
//! the `POS_VEL_ROT6D` layout.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rotation::{self, apply, matmul, rot_x, rot_y, rot_z, Mat3, IDENTITY};
use super::{derive_velocity_features, InteractionSample, Layout, MotionSequence, SkeletonSpec};
use crate::error::{invalid, Error, Result};

pub const CLASSES: [&str; 5] = ["approach_retreat", "mirror_wave", "orbit", "high_five", "bow"];

const JOINTS: usize = 8;
const ROOT_HEIGHT: f64 = 0.95;

/// Bone offsets in the parent frame (y up, body facing +z, left is +x).
const OFFSETS: [[f64; 3]; JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.5, 0.0],
    [0.0, 0.25, 0.0],
    [0.18, -0.28, 0.0],
    [0.0, -0.27, 0.0],
    [-0.18, -0.28, 0.0],
    [0.0, -0.27, 0.0],
    [0.0, -0.9, 0.0],
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCount {
    pub class: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: Vec<ClassCount>,
    pub frames: usize,
    pub fps: f32,
}

impl GeneratorConfig {
    /// The three-class desk set used throughout the tests.
    pub fn three_class(per_class: usize, frames: usize) -> Self {
        let classes = ["approach_retreat", "mirror_wave", "orbit"]
            .iter()
            .map(|c| ClassCount { class: c.to_string(), count: per_class })
            .collect();
        Self { classes, frames, fps: 20.0 }
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::three_class(64, 64)
    }
}

/// Per-frame rig state for one person.
#[derive(Clone, Copy)]
struct Pose {
    root: [f64; 3],
    yaw: f64,
    local: [Mat3; JOINTS],
}

impl Pose {
    fn standing(root: [f64; 3], yaw: f64) -> Self {
        Self { root, yaw, local: [IDENTITY; JOINTS] }
    }

    fn forward_kinematics(&self, parents: &[i32]) -> ([[f64; 3]; JOINTS], [Mat3; JOINTS]) {
        let mut global = [IDENTITY; JOINTS];
        let mut pos = [[0.0; 3]; JOINTS];
        let mut local = self.local;
        local[0] = rot_y(self.yaw);
        for j in 0..JOINTS {
            match parents[j] {
                p if p < 0 => {
                    global[j] = local[j];
                    pos[j] = self.root;
                }
                p => {
                    let p = p as usize;
                    global[j] = matmul(&global[p], &local[j]);
                    let off = apply(&global[j], OFFSETS[j]);
                    pos[j] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
                }
            }
        }
        (pos, local)
    }
}

struct Track {
    positions: Array3<f64>,
    rotations: Vec<[Mat3; JOINTS]>,
}

fn render(poses: &[Pose], skeleton: &SkeletonSpec) -> Track {
    let mut poses = poses.to_vec();
    plant_feet(&mut poses);
    let mut positions = Array3::zeros((poses.len(), JOINTS, 3));
    let mut rotations = Vec::with_capacity(poses.len());
    for (f, pose) in poses.iter().enumerate() {
        let (pos, local) = pose.forward_kinematics(&skeleton.parents);
        for j in 0..JOINTS {
            for c in 0..3 {
                positions[[f, j, c]] = pos[j][c];
            }
        }
        rotations.push(local);
    }
    Track { positions, rotations }
}

fn mirror_track(track: &Track) -> Track {
    let mut positions = track.positions.clone();
    positions.slice_mut(ndarray::s![.., .., 0]).mapv_inplace(|x| -x);
    let rotations = track.rotations.iter().map(|frame| frame.map(|r| rotation::mirror_x(&r))).collect();
    Track { positions, rotations }
}

fn assemble(track: &Track, fps: f32, skeleton: &SkeletonSpec) -> Result<MotionSequence> {
    let n = track.positions.dim().0;
    let vel = derive_velocity_features(track.positions.view(), f64::from(fps))?;
    let mut data = Array3::<f32>::zeros((n, JOINTS, 12));
    for f in 0..n {
        for j in 0..JOINTS {
            let r6 = rotation::rotation_to_6d(&track.rotations[f][j])?;
            for c in 0..3 {
                data[[f, j, c]] = track.positions[[f, j, c]] as f32;
                data[[f, j, 3 + c]] = vel[[f, j, c]] as f32;
            }
            for (c, v) in r6.iter().enumerate() {
                data[[f, j, 6 + c]] = *v as f32;
            }
        }
    }
    MotionSequence::new(data, fps, skeleton.clone(), Layout::PosVelRot6d)
}

/// Smooth 0→1→0 bump centred at `center` with half-width `width`.
fn bump(t: f64, center: f64, width: f64) -> f64 {
    let u = ((t - center) / width).clamp(-1.0, 1.0);
    0.5 * (1.0 + (PI * u).cos())
}

fn smoothstep(t: f64, start: f64, end: f64) -> f64 {
    let u = ((t - start) / (end - start)).clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Walking rig: arms and leg swing with distance travelled.
fn walk_cycle(pose: &mut Pose, stride_phase: f64, amplitude: f64) {
    let s = stride_phase.sin() * amplitude;
    pose.local[3] = rot_x(s);
    pose.local[5] = rot_x(-s);
}

const LEG: f64 = 0.9;
const STEP_TRIGGER: f64 = 0.12;
const SWING_FRAMES: usize = 4;

/// Rotation taking `(0, -1, 0)` onto the unit vector `b`.
fn from_down(b: [f64; 3]) -> Mat3 {
    let a = [0.0, -1.0, 0.0];
    let v = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let k = [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]];
    let k2 = matmul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += k[i][j] + k2[i][j] / (1.0 + c);
        }
    }
    r
}

/// Plants the single foot on the ground and steps it when the root drifts
/// too far, so the foot is either still or clearly moving. The root height
/// follows from the rigid leg.
fn plant_feet(poses: &mut [Pose]) {
    let n = poses.len();
    let horiz = |p: &Pose| [p.root[0], p.root[2]];
    let mut foot = horiz(&poses[0]);
    let mut swing: Option<(usize, [f64; 2], [f64; 2])> = None;
    for f in 0..n {
        let r = horiz(&poses[f]);
        if swing.is_none() && ((r[0] - foot[0]).hypot(r[1] - foot[1])) > STEP_TRIGGER {
            let end = (f + SWING_FRAMES).min(n - 1);
            let re = horiz(&poses[end]);
            let target = [2.0 * re[0] - r[0], 2.0 * re[1] - r[1]];
            swing = Some((f, foot, target));
        }
        if let Some((start, from, to)) = swing {
            let u = ((f - start) as f64 / SWING_FRAMES as f64).min(1.0);
            foot = [from[0] + u * (to[0] - from[0]), from[1] + u * (to[1] - from[1])];
            if u >= 1.0 {
                swing = None;
            }
        }
        let p = &mut poses[f];
        let h = (r[0] - foot[0]).hypot(r[1] - foot[1]).min(0.95 * LEG);
        let drop = LEG - (LEG * LEG - h * h).sqrt();
        p.root[1] -= drop;
        let d = [(foot[0] - r[0]) / LEG, -(LEG - drop) / LEG, (foot[1] - r[1]) / LEG];
        // leg direction expressed in the body frame
        let body = apply(&rotation::transpose(&rot_y(p.yaw)), d);
        let norm = (body[0] * body[0] + body[1] * body[1] + body[2] * body[2]).sqrt();
        p.local[7] = from_down(body.map(|v| v / norm));
    }
}

fn approach_retreat(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Pose>, Vec<Pose>) {
    let far = rng.random_range(1.8..2.6);
    let near = rng.random_range(0.6..1.0);
    let turn = rng.random_range((0.4 * n as f64) as usize..=(0.6 * n as f64) as usize) as f64;
    let span = turn.max(n as f64 - 1.0 - turn);
    let swing = rng.random_range(0.25..0.45);
    let dist = |f: f64| near + (far - near) * ((f - turn) / span).powi(2);
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut travelled = 0.0;
    for f in 0..n {
        let d = dist(f as f64);
        if f > 0 {
            travelled += 0.5 * (dist(f as f64 - 1.0) - d).abs();
        }
        let mut pa = Pose::standing([-d / 2.0, ROOT_HEIGHT, 0.0], PI / 2.0);
        let mut pb = Pose::standing([d / 2.0, ROOT_HEIGHT, 0.0], -PI / 2.0);
        walk_cycle(&mut pa, travelled * 4.0, swing);
        walk_cycle(&mut pb, travelled * 4.0 + 0.5, swing);
        a.push(pa);
        b.push(pb);
    }
    (a, b)
}

fn mirror_wave(n: usize, fps: f64, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let gap = rng.random_range(1.2..2.0);
    let hz = rng.random_range(1.2..2.2);
    let raise_start = rng.random_range(0.0..0.25);
    let height = rng.random_range(1.9..2.4);
    let amplitude = rng.random_range(0.35..0.6);
    (0..n)
        .map(|f| {
            let t = f as f64 / (n - 1).max(1) as f64;
            let secs = f as f64 / fps;
            let up = smoothstep(t, raise_start, raise_start + 0.25);
            let mut p = Pose::standing([-gap / 2.0, ROOT_HEIGHT, 0.0], PI / 2.0);
            p.local[5] = rot_z(-height * up);
            p.local[6] = rot_z(amplitude * up * (2.0 * PI * hz * secs).sin());
            p.local[3] = rot_z(0.1 * up);
            p
        })
        .collect()
}

fn orbit(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Pose>, Vec<Pose>) {
    let radius = rng.random_range(0.6..1.0);
    let turns = rng.random_range(0.3..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let arms = rng.random_range(0.3..0.6);
    let person = |offset: f64| -> Vec<Pose> {
        (0..n)
            .map(|f| {
                let t = f as f64 / (n - 1).max(1) as f64;
                let phi = phase0 + offset + 2.0 * PI * turns * t;
                let root = [radius * phi.cos(), ROOT_HEIGHT, radius * phi.sin()];
                let yaw = (-phi.cos()).atan2(-phi.sin());
                let mut p = Pose::standing(root, yaw);
                let travelled = (2.0 * PI * turns * t * radius).abs();
                walk_cycle(&mut p, travelled * 5.0, 0.25);
                p.local[3] = matmul(&rot_z(arms), &p.local[3]);
                p.local[5] = matmul(&rot_z(-arms), &p.local[5]);
                p
            })
            .collect()
    };
    (person(0.0), person(PI))
}

fn high_five(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Pose>, Vec<Pose>) {
    let start = rng.random_range(1.7..2.1);
    let end = rng.random_range(1.0..1.2);
    let peak = rng.random_range(0.5..0.65);
    let person = |side: f64, yaw: f64| -> Vec<Pose> {
        (0..n)
            .map(|f| {
                let t = f as f64 / (n - 1).max(1) as f64;
                let d = start + (end - start) * smoothstep(t, 0.0, 0.45);
                let mut p = Pose::standing([side * d / 2.0, ROOT_HEIGHT, 0.0], yaw);
                let lift = bump(t, peak, 0.3);
                p.local[5] = rot_x(-2.6 * lift);
                p.local[6] = rot_x(-0.3 * lift);
                p
            })
            .collect()
    };
    (person(-1.0, PI / 2.0), person(1.0, -PI / 2.0))
}

fn bow(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Pose>, Vec<Pose>) {
    let gap = rng.random_range(1.2..1.8);
    let depth_a = rng.random_range(0.6..1.0);
    let depth_b = rng.random_range(0.6..1.0);
    let first = rng.random_range(0.25..0.35);
    let second = rng.random_range(0.6..0.72);
    let person = |side: f64, yaw: f64, depth: f64, at: f64| -> Vec<Pose> {
        (0..n)
            .map(|f| {
                let t = f as f64 / (n - 1).max(1) as f64;
                let bend = depth * bump(t, at, 0.2);
                let mut p = Pose::standing([side * gap / 2.0, ROOT_HEIGHT, 0.0], yaw);
                p.local[1] = rot_x(bend);
                p.local[2] = rot_x(0.3 * bend);
                p.local[3] = rot_x(0.4 * bend);
                p.local[5] = rot_x(0.4 * bend);
                p
            })
            .collect()
    };
    (person(-1.0, PI / 2.0, depth_a, first), person(1.0, -PI / 2.0, depth_b, second))
}

const PAIRS: [&str; 4] = ["two people", "two persons", "the pair", "a couple of people"];

fn templates(class: &str) -> &'static [&'static str] {
    match class {
        "approach_retreat" => &[
            "{pair} walk toward each other and then step back apart",
            "{pair} approach one another before retreating",
            "{pair} come close together then move away again",
            "two individuals close the distance and then back off",
            "{pair} walk in, meet in the middle and walk back out",
        ],
        "mirror_wave" => &[
            "{pair} wave at each other like a mirror",
            "one person raises a hand and waves while the other mirrors the wave",
            "{pair} greet each other by waving their hands",
            "facing each other, {pair} wave hello in mirrored motion",
            "{pair} stand still and wave one arm at the partner",
        ],
        "orbit" => &[
            "{pair} circle around each other",
            "{pair} walk around in a circle facing the center",
            "two individuals orbit one another slowly",
            "{pair} move sideways around a shared center",
            "{pair} keep facing each other while rotating around",
        ],
        "high_five" => &[
            "{pair} step forward and give each other a high five",
            "{pair} raise their hands and slap them together",
            "one person high fives the other",
            "{pair} meet and exchange a high five",
            "two individuals approach and clap hands overhead",
        ],
        "bow" => &[
            "{pair} bow to each other in turn",
            "one person bows and the other bows back",
            "{pair} take turns bending forward in a bow",
            "two individuals greet each other with a bow",
            "{pair} bow politely one after the other",
        ],
        _ => &[],
    }
}

fn texts_for(class: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pool: Vec<&str> = templates(class).to_vec();
    pool.shuffle(rng);
    pool.into_iter()
        .take(3)
        .map(|t| t.replace("{pair}", PAIRS[rng.random_range(0..PAIRS.len())]))
        .collect()
}

/// Pure function of `(config, seed)`.
pub fn generate_synthetic_interactions(config: &GeneratorConfig, seed: u64) -> Result<Vec<InteractionSample>> {
    let distinct: std::collections::BTreeSet<&str> = config.classes.iter().map(|c| c.class.as_str()).collect();
    if distinct.len() < 2 {
        return Err(invalid("generator needs at least two interaction classes"));
    }
    if let Some(bad) = config.classes.iter().find(|c| !CLASSES.contains(&c.class.as_str())) {
        return Err(Error::UnknownClass(bad.class.clone()));
    }
    if config.frames < 2 {
        return Err(invalid("generator needs at least two frames"));
    }
    if !(config.fps.is_finite() && config.fps > 0.0) {
        return Err(invalid("generator fps must be positive"));
    }
    let skeleton = SkeletonSpec::synthetic8();
    let n = config.frames;
    let fps = config.fps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for cc in &config.classes {
        for k in 0..cc.count {
            let (ta, tb) = match cc.class.as_str() {
                "approach_retreat" => {
                    let (a, b) = approach_retreat(n, &mut rng);
                    (render(&a, &skeleton), render(&b, &skeleton))
                }
                "mirror_wave" => {
                    let a = render(&mirror_wave(n, f64::from(fps), &mut rng), &skeleton);
                    let b = mirror_track(&a);
                    (a, b)
                }
                "orbit" => {
                    let (a, b) = orbit(n, &mut rng);
                    (render(&a, &skeleton), render(&b, &skeleton))
                }
                "high_five" => {
                    let (a, b) = high_five(n, &mut rng);
                    (render(&a, &skeleton), render(&b, &skeleton))
                }
                "bow" => {
                    let (a, b) = bow(n, &mut rng);
                    (render(&a, &skeleton), render(&b, &skeleton))
                }
                other => return Err(Error::UnknownClass(other.to_string())),
            };
            let texts = texts_for(&cc.class, &mut rng);
            out.push(InteractionSample::new(
                format!("{}_{k:04}", cc.class),
                Some(cc.class.clone()),
                texts,
                assemble(&ta, fps, &skeleton)?,
                assemble(&tb, fps, &skeleton)?,
            )?);
        }
    }
    Ok(out)
}
