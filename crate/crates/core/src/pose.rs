//! Rigid 6DoF poses and pose sequences.
//!
//! World frame is right-handed with `+z` up; a body at zero yaw faces `+x`.
//! Rotations are stored as 3×3 matrices. Interpolation goes through unit
//! quaternions.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Convention string recorded in every serialized document.
pub const COORDINATE_CONVENTION: &str = "right-handed z-up x-forward";

/// Orthonormality tolerance accepted without modification.
pub const ORTHONORMAL_TOL: f64 = 1e-9;
/// Inputs within this tolerance are repaired by polar decomposition.
pub const REPAIR_TOL: f64 = 1e-6;

/// `max |RᵀR − I|` over all entries.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).amax()
}

fn nearest_rotation(r: &Mat3) -> Mat3 {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    u * v_t
}

/// Checks `r` against the rotation invariants, repairing it when it is
/// only slightly off.
pub fn validate_rotation(r: &Mat3, what: &str) -> Result<Mat3> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(what, "non-finite entry"));
    }
    let err = orthonormality_error(r);
    let det = r.determinant();
    if err < ORTHONORMAL_TOL && (det - 1.0).abs() < ORTHONORMAL_TOL {
        return Ok(*r);
    }
    if err <= REPAIR_TOL && det > 0.0 {
        let fixed = nearest_rotation(r);
        if orthonormality_error(&fixed) < ORTHONORMAL_TOL && (fixed.determinant() - 1.0).abs() < ORTHONORMAL_TOL {
            return Ok(fixed);
        }
    }
    Err(Error::validation(
        what,
        format!("not a rotation: |RᵀR - I|max = {err:e}, det = {det}"),
    ))
}

/// Rotation about `+x` by `deg` degrees.
pub fn rot_x(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation about `+y` by `deg` degrees.
pub fn rot_y(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about `+z` by `deg` degrees.
pub fn rot_z(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rigid transform `x ↦ R·x + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6DoF {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for Pose6DoF {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6DoF {
    /// Builds a pose, rejecting rotations that are not orthonormal within
    /// [`REPAIR_TOL`] and repairing those between [`ORTHONORMAL_TOL`] and it.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("translation", "non-finite entry"));
        }
        let rotation = validate_rotation(&rotation, "rotation")?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Pose with a pure yaw (rotation about `+z`, degrees) at `t`.
    pub fn from_yaw(yaw_deg: f64, t: Vec3) -> Self {
        Self {
            rotation: rot_z(yaw_deg),
            translation: t,
        }
    }

    /// Pose from a rotation built by this crate, skipping re-validation.
    pub(crate) fn from_parts_unchecked(rotation: Mat3, translation: Vec3) -> Self {
        debug_assert!(orthonormality_error(&rotation) < ORTHONORMAL_TOL);
        Self { rotation, translation }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn with_translation(&self, t: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            translation: t,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose6DoF) -> Pose6DoF {
        Pose6DoF {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose6DoF {
        let rt = self.rotation.transpose();
        Pose6DoF {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Row-major rotation entries followed by the translation.
    pub fn to_row(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    /// Inverse of [`Pose6DoF::to_row`], validating the rotation.
    pub fn from_row(row: &[f64; 12]) -> Result<Self> {
        let r = Mat3::new(row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], row[8]);
        Self::new(r, Vec3::new(row[9], row[10], row[11]))
    }
}

/// Free-function form of [`Pose6DoF::compose`].
pub fn compose(a: &Pose6DoF, b: &Pose6DoF) -> Pose6DoF {
    a.compose(b)
}

/// Free-function form of [`Pose6DoF::inverse`].
pub fn invert(p: &Pose6DoF) -> Pose6DoF {
    p.inverse()
}

// atan2 of the skew and trace parts rather than acos of the trace: acos
// loses half the digits near 0°, and for a == b the skew part is exactly 0.
pub(crate) fn angle_between_unchecked(a: &Mat3, b: &Mat3) -> f64 {
    let r = a * b.transpose();
    let s = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    s.atan2(r.trace() - 1.0).to_degrees()
}

/// Geodesic angle between two rotations in degrees, in `[0, 180]`.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> Result<f64> {
    let a = validate_rotation(a, "first rotation")?;
    let b = validate_rotation(b, "second rotation")?;
    Ok(angle_between_unchecked(&a, &b))
}

/// Pose interpolation: linear in translation, shortest-arc slerp in
/// rotation. `s = 0` and `s = 1` return the inputs exactly.
pub fn interpolate(a: &Pose6DoF, b: &Pose6DoF, s: f64) -> Result<Pose6DoF> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::OutOfRange {
            what: "interpolation parameter",
            value: s,
            min: 0.0,
            max: 1.0,
        });
    }
    if s == 0.0 {
        return Ok(*a);
    }
    if s == 1.0 {
        return Ok(*b);
    }
    let qa = UnitQuaternion::from_matrix(&a.rotation);
    let mut qb = UnitQuaternion::from_matrix(&b.rotation);
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let q = qa.try_slerp(&qb, s, 1e-12).unwrap_or(qa);
    let t = a.translation * (1.0 - s) + b.translation * s;
    Ok(Pose6DoF {
        rotation: q.to_rotation_matrix().into_inner(),
        translation: t,
    })
}

/// Per-frame poses sampled at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    fps: f64,
    poses: Vec<Pose6DoF>,
}

impl PoseSequence {
    pub fn new(fps: f64, poses: Vec<Pose6DoF>) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::validation("fps", format!("must be > 0, got {fps}")));
        }
        if poses.is_empty() {
            return Err(Error::validation("poses", "sequence needs at least one frame"));
        }
        Ok(Self { fps, poses })
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn poses(&self) -> &[Pose6DoF] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    /// Always false; sequences hold at least one frame.
    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn first(&self) -> &Pose6DoF {
        &self.poses[0]
    }

    /// Applies `placement ∘ pose` to every frame.
    pub fn transformed(&self, placement: &Pose6DoF) -> PoseSequence {
        PoseSequence {
            fps: self.fps,
            poses: self.poses.iter().map(|p| placement.compose(p)).collect(),
        }
    }

    /// Drops the first `n` frames, keeping at least one.
    pub fn skip_frames(&self, n: usize) -> Result<PoseSequence> {
        if n >= self.poses.len() {
            return Err(Error::LengthMismatch {
                expected: n + 1,
                found: self.poses.len(),
            });
        }
        PoseSequence::new(self.fps, self.poses[n..].to_vec())
    }

    /// Every frame replaced by frame 0.
    pub fn frozen_at_first(&self) -> PoseSequence {
        PoseSequence {
            fps: self.fps,
            poses: vec![self.poses[0]; self.poses.len()],
        }
    }
}

/// Shifts every translation of `est` so that its first-frame location
/// coincides with that of `gt`. Rotations are untouched.
pub fn align_first_frame(est: &PoseSequence, gt: &PoseSequence) -> Result<PoseSequence> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            found: est.len(),
        });
    }
    let offset = gt.first().translation - est.first().translation;
    let poses = est
        .poses
        .iter()
        .enumerate()
        .map(|(f, p)| {
            if f == 0 {
                // exact on frame 0 regardless of rounding in the offset
                p.with_translation(gt.first().translation)
            } else {
                p.with_translation(p.translation + offset)
            }
        })
        .collect();
    Ok(PoseSequence { fps: est.fps, poses })
}
