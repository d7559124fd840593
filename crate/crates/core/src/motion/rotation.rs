//! Rotation matrices and the continuous 6D representation (first two columns).

use crate::error::{invalid, Result};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

const ORTHONORMAL_TOL: f64 = 1e-5;

pub fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation from a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn from_quaternion(q: [f64; 4]) -> Mat3 {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Reflection `x -> -x` conjugated onto a rotation, which stays proper.
pub fn mirror_x(m: &Mat3) -> Mat3 {
    let mut out = *m;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if (i == 0) != (j == 0) {
                *v = -*v;
            }
        }
    }
    out
}

fn check_rotation(m: &Mat3) -> Result<()> {
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("rotation matrix has non-finite entries"));
    }
    let mtm = matmul(&transpose(m), m);
    for i in 0..3 {
        for j in 0..3 {
            let expected = if i == j { 1.0 } else { 0.0 };
            if (mtm[i][j] - expected).abs() > ORTHONORMAL_TOL {
                return Err(invalid(format!("matrix is not orthonormal (MᵀM[{i}][{j}] = {})", mtm[i][j])));
            }
        }
    }
    let det = determinant(m);
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(invalid(format!("matrix determinant {det} is not +1")));
    }
    Ok(())
}

/// First two columns of a valid rotation, concatenated.
pub fn rotation_to_6d(m: &Mat3) -> Result<[f64; 6]> {
    check_rotation(m)?;
    Ok([m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]])
}

/// Gram–Schmidt recovery of a rotation from its 6D encoding.
pub fn rotation_from_6d(v: &[f64; 6]) -> Result<Mat3> {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = norm(a1);
    if !(n1 > 1e-12) {
        return Err(invalid("degenerate first column in 6D rotation"));
    }
    let b1 = a1.map(|x| x / n1);
    let d = dot(b1, a2);
    let u2 = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(u2);
    if !(n2 > 1e-12) {
        return Err(invalid("degenerate second column in 6D rotation"));
    }
    let b2 = u2.map(|x| x / n2);
    let b3 = cross(b1, b2);
    Ok([[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]])
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
