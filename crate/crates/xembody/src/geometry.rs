//! SE(3) poses and rotation algebra.
//!
//! Rotations are stored as unit quaternions and canonicalized to `w >= 0` on
//! construction so that serialization round-trips are bit-stable. Matrices are
//! derived views only. Angles are in radians everywhere.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn vadd(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vsub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vscale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn vdot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn vcross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn vnorm(a: Vec3) -> f64 {
    vdot(a, a).sqrt()
}

/// A 3D rotation stored as a unit quaternion `(w, x, y, z)`.
///
/// Invariants maintained by every constructor:
/// - `|q| = 1` within 1e-9 (renormalized on construction),
/// - canonical sign: `w >= 0`; if `w == 0` the first nonzero vector
///   component is made positive so `q` and `-q` collapse to one
///   representative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Build from raw components, renormalizing and canonicalizing the sign.
    pub fn from_quat(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        assert!(n > 1e-12, "zero-norm quaternion");
        // Skip the division for already-normalized input so reconstruction
        // from serialized components is bit-exact.
        let mut q = if (n - 1.0).abs() < 1e-12 {
            Rotation { w, x, y, z }
        } else {
            Rotation {
                w: w / n,
                x: x / n,
                y: y / n,
                z: z / n,
            }
        };
        // Canonical sign: w >= 0, ties broken on the first nonzero vector
        // component.
        let flip = if q.w != 0.0 {
            q.w < 0.0
        } else if q.x != 0.0 {
            q.x < 0.0
        } else if q.y != 0.0 {
            q.y < 0.0
        } else {
            q.z < 0.0
        };
        if flip {
            q.w = -q.w;
            q.x = -q.x;
            q.y = -q.y;
            q.z = -q.z;
        }
        // Normalize -0.0 to 0.0 for bit-stable serialization.
        if q.w == 0.0 {
            q.w = 0.0;
        }
        if q.x == 0.0 {
            q.x = 0.0;
        }
        if q.y == 0.0 {
            q.y = 0.0;
        }
        if q.z == 0.0 {
            q.z = 0.0;
        }
        q
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = vnorm(axis);
        assert!(n > 1e-12, "zero-norm rotation axis");
        let half = angle * 0.5;
        let s = half.sin() / n;
        Rotation::from_quat(half.cos(), axis[0] * s, axis[1] * s, axis[2] * s)
    }

    /// Rotation vector (axis * angle), the inverse of the exponential map.
    /// The angle returned is in `[0, pi]`.
    pub fn to_axis_angle(&self) -> Vec3 {
        let vn = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        if vn < 1e-12 {
            return [0.0; 3];
        }
        let angle = 2.0 * vn.atan2(self.w);
        [
            self.x / vn * angle,
            self.y / vn * angle,
            self.z / vn * angle,
        ]
    }

    pub fn rot_x(angle: f64) -> Self {
        Rotation::from_axis_angle([1.0, 0.0, 0.0], angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Rotation::from_axis_angle([0.0, 1.0, 0.0], angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Rotation::from_axis_angle([0.0, 0.0, 1.0], angle)
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (other.w, other.x, other.y, other.z);
        Rotation::from_quat(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )
    }

    pub fn inverse(&self) -> Rotation {
        Rotation::from_quat(self.w, -self.x, -self.y, -self.z)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        // v' = v + 2w(u x v) + 2(u x (u x v)) with u = vector part.
        let u = [self.x, self.y, self.z];
        let uv = vcross(u, v);
        let uuv = vcross(u, uv);
        vadd(v, vadd(vscale(uv, 2.0 * self.w), vscale(uuv, 2.0)))
    }

    pub fn to_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Geodesic angle to another rotation, in `[0, pi]`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = self.inverse().compose(other);
        vnorm(rel.to_axis_angle())
    }

    /// Whether the two rotations are within `tol` radians of each other.
    pub fn approx_eq(&self, other: &Rotation, tol: f64) -> bool {
        self.angle_to(other) <= tol
    }
}

/// A rigid transform: translation in meters plus a unit-quaternion rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Vec3,
    pub rotation: Rotation,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            translation: [0.0; 3],
            rotation: Rotation::identity(),
        }
    }

    pub fn new(translation: Vec3, rotation: Rotation) -> Self {
        Pose {
            translation,
            rotation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Pose {
            translation,
            rotation: Rotation::identity(),
        }
    }

    /// Serialize as the 7 numbers `[tx, ty, tz, qw, qx, qy, qz]` used in every
    /// file format.
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.translation[0],
            self.translation[1],
            self.translation[2],
            self.rotation.w,
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
        ]
    }

    pub fn from_array(a: &[f64]) -> Self {
        assert_eq!(a.len(), 7, "pose array must have 7 entries");
        Pose {
            translation: [a[0], a[1], a[2]],
            rotation: Rotation::from_quat(a[3], a[4], a[5], a[6]),
        }
    }

    /// Flatten to 6 numbers: translation plus axis-angle rotation vector.
    /// This is the representation used for 6-dim pose observations.
    pub fn to_vec6(&self) -> [f64; 6] {
        let aa = self.rotation.to_axis_angle();
        [
            self.translation[0],
            self.translation[1],
            self.translation[2],
            aa[0],
            aa[1],
            aa[2],
        ]
    }

    /// Inverse of `to_vec6`: translation plus axis-angle rotation vector.
    pub fn from_vec6(v: &[f64]) -> Self {
        assert_eq!(v.len(), 6, "pose vector must have 6 entries");
        let aa = [v[3], v[4], v[5]];
        let angle = vnorm(aa);
        let rotation = if angle < 1e-12 {
            Rotation::identity()
        } else {
            Rotation::from_axis_angle(aa, angle)
        };
        Pose::new([v[0], v[1], v[2]], rotation)
    }
}

/// Rigid-transform composition: `a` followed by `b` in the SE(3) group sense
/// (rotation `R_a * R_b`, translation `x_a + R_a * x_b`).
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        translation: vadd(a.translation, a.rotation.rotate(b.translation)),
        rotation: a.rotation.compose(&b.rotation),
    }
}

pub fn inverse(p: &Pose) -> Pose {
    let rinv = p.rotation.inverse();
    Pose {
        translation: vscale(rinv.rotate(p.translation), -1.0),
        rotation: rinv,
    }
}

/// Pose of `eef` relative to `body`, both expressed in the unified frame.
///
/// The translation is the plain unified-frame difference `x_eef - x_body`
/// (not rotated into the body frame); the rotation is `R_body^T * R_eef`.
pub fn relative_pose(body: &Pose, eef: &Pose) -> Pose {
    Pose {
        translation: vsub(eef.translation, body.translation),
        rotation: body.rotation.inverse().compose(&eef.rotation),
    }
}

/// Linear interpolation `(1-s)*x0 + s*x1` for `s` in `[0, 1]`.
pub fn lerp_translation(x0: Vec3, x1: Vec3, s: f64) -> Vec3 {
    assert!((0.0..=1.0).contains(&s), "lerp parameter outside [0, 1]");
    vadd(vscale(x0, 1.0 - s), vscale(x1, s))
}

/// Spherical linear interpolation along the shorter arc.
///
/// Both endpoints are canonical (`w >= 0`), so for rotations exactly 180
/// degrees apart the interpolation axis is fixed by the canonical quaternion
/// representative; the choice is deterministic. If the endpoints coincide as
/// rotations the input `q0` is returned.
pub fn slerp_rotation(q0: &Rotation, q1: &Rotation, s: f64) -> Rotation {
    assert!((0.0..=1.0).contains(&s), "slerp parameter outside [0, 1]");
    let mut d = q0.w * q1.w + q0.x * q1.x + q0.y * q1.y + q0.z * q1.z;
    // Shorter arc: flip the far representative.
    let sign = if d < 0.0 {
        d = -d;
        -1.0
    } else {
        1.0
    };
    if d > 1.0 - 1e-12 {
        // Nearly identical: nlerp is numerically stable here.
        return Rotation::from_quat(
            (1.0 - s) * q0.w + s * sign * q1.w,
            (1.0 - s) * q0.x + s * sign * q1.x,
            (1.0 - s) * q0.y + s * sign * q1.y,
            (1.0 - s) * q0.z + s * sign * q1.z,
        );
    }
    let omega = d.clamp(-1.0, 1.0).acos();
    let so = omega.sin();
    let a = ((1.0 - s) * omega).sin() / so;
    let b = (s * omega).sin() / so * sign;
    Rotation::from_quat(
        a * q0.w + b * q1.w,
        a * q0.x + b * q1.x,
        a * q0.y + b * q1.y,
        a * q0.z + b * q1.z,
    )
}

/// 4x4 homogeneous matrix helpers, used as the independent oracle for the
/// pose-composition tests.
pub mod homogeneous {
    use super::{Mat3, Pose, Vec3};

    pub type Mat4 = [[f64; 4]; 4];

    pub fn from_pose(p: &Pose) -> Mat4 {
        let r = p.rotation.to_matrix();
        let t = p.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn matmul(a: &Mat4, b: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for (k, bk) in b.iter().enumerate() {
                    out[i][j] += a[i][k] * bk[j];
                }
            }
        }
        out
    }

    pub fn translation(m: &Mat4) -> Vec3 {
        [m[0][3], m[1][3], m[2][3]]
    }

    pub fn rotation(m: &Mat4) -> Mat3 {
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }
}
