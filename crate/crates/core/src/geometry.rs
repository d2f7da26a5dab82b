//! SE(3) pose algebra: rigid transforms stored as unit quaternion plus
//! translation, with exp/log maps onto twist coordinates.
//!
//! Poses are the currency of all odometry and world math in this crate.
//! The quaternion is renormalized after every composition so the unit-norm
//! invariant holds to 1e-9 regardless of chain length.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Angle guard for the logarithm map. Rotations this close to pi are rejected
/// instead of being regularized.
pub const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {angle} too close to pi for the logarithm map")]
    LogAngleNearPi { angle: f64 },
}

/// Rigid SE(3) transform: rotation (unit quaternion) and translation (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// Tangent-space coordinates of a pose: rotational part in radians,
/// translational part in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rotational: Vector3<f64>,
    pub translational: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_parts(qw: f64, qx: f64, qy: f64, qz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        Pose {
            rotation: UnitQuaternion::new_normalize(Quaternion::new(qw, qx, qy, qz)),
            translation: Vector3::new(tx, ty, tz),
        }
    }

    /// Translation-only transform.
    pub fn from_translation(tx: f64, ty: f64, tz: f64) -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::new(tx, ty, tz),
        }
    }

    /// Planar pose: yaw about +z plus translation in the xy plane.
    pub fn from_planar(x: f64, y: f64, yaw: f64) -> Self {
        Pose {
            rotation: UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, yaw)),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    /// Apply the transform to a point: `R p + t`.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Coefficients in wire order `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn coeffs(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            q.w,
            q.i,
            q.j,
            q.k,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    /// Angle of the relative rotation to `other`, in radians.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// True when both the relative rotation angle and the translation gap
    /// are below `tol`.
    pub fn is_close(&self, other: &Pose, tol: f64) -> bool {
        self.rotation_distance(other) < tol && self.translation_distance(other) < tol
    }
}

/// Group product `a * b`. The quaternion is renormalized on the way out.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let rotation = UnitQuaternion::new_normalize((a.rotation * b.rotation).into_inner());
    let translation = a.rotation * b.translation + a.translation;
    Pose {
        rotation,
        translation,
    }
}

/// Group inverse: `inverse(a) * a = identity`.
pub fn inverse(a: &Pose) -> Pose {
    let rot_inv = a.rotation.inverse();
    Pose {
        rotation: rot_inv,
        translation: -(rot_inv * a.translation),
    }
}

/// Relative transform between two co-ordinate systems from a cross-system
/// node match: given the odometry pose of node i in frame k, the measured
/// node-to-node transform i->j, and the odometry pose of node j in frame k',
/// returns the transform of frame k' expressed in frame k.
pub fn relative_world_pose(t_k_i: &Pose, t_i_j: &Pose, t_kp_j: &Pose) -> Pose {
    compose(&compose(t_k_i, t_i_j), &inverse(t_kp_j))
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3): `t = V(theta) * rho` in the exponential map.
fn so3_left_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let hat = skew(theta);
    let hat2 = hat * hat;
    let (a, b) = if angle < 1e-4 {
        // Taylor expansion around zero keeps the map exact to f64 precision.
        let angle2 = angle * angle;
        (0.5 - angle2 / 24.0, 1.0 / 6.0 - angle2 / 120.0)
    } else {
        let angle2 = angle * angle;
        (
            (1.0 - angle.cos()) / angle2,
            (angle - angle.sin()) / (angle2 * angle),
        )
    };
    Matrix3::identity() + a * hat + b * hat2
}

/// Exponential map from twist coordinates to a pose.
pub fn se3_exp(v: &Twist) -> Pose {
    let rotation = UnitQuaternion::from_scaled_axis(v.rotational);
    let translation = so3_left_jacobian(&v.rotational) * v.translational;
    Pose {
        rotation,
        translation,
    }
}

/// Logarithm map from a pose to twist coordinates. Rejects rotations with
/// angle at or beyond `LOG_ANGLE_LIMIT`.
pub fn se3_log(a: &Pose) -> Result<Twist, GeometryError> {
    let angle = a.rotation.angle();
    if angle >= LOG_ANGLE_LIMIT {
        return Err(GeometryError::LogAngleNearPi { angle });
    }
    let rotational = a.rotation.scaled_axis();
    let jac = so3_left_jacobian(&rotational);
    let translational = jac
        .try_inverse()
        .expect("left Jacobian is invertible below the angle limit")
        * a.translation;
    Ok(Twist {
        rotational,
        translational,
    })
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rotational: Vector3::zeros(),
            translational: Vector3::zeros(),
        }
    }

    pub fn from_parts(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Twist {
            rotational: rot,
            translational: trans,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.rotational.norm_squared() + self.translational.norm_squared()).sqrt()
    }
}

// Wire format: a bare JSON array [qw, qx, qy, qz, tx, ty, tz].
impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let c = self.coeffs();
        let mut seq = serializer.serialize_seq(Some(7))?;
        for value in &c {
            seq.serialize_element(value)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PoseVisitor;

        impl<'de> Visitor<'de> for PoseVisitor {
            type Value = Pose;

            fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str("an array of 7 numbers [qw, qx, qy, qz, tx, ty, tz]")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Pose, A::Error> {
                let mut c = [0.0f64; 7];
                for (i, slot) in c.iter_mut().enumerate() {
                    *slot = seq
                        .next_element()?
                        .ok_or_else(|| de::Error::invalid_length(i, &self))?;
                }
                if seq.next_element::<f64>()?.is_some() {
                    return Err(de::Error::invalid_length(8, &self));
                }
                Ok(Pose::from_parts(c[0], c[1], c[2], c[3], c[4], c[5], c[6]))
            }
        }

        deserializer.deserialize_seq(PoseVisitor)
    }
}

/// Random pose with rotation angle below the logarithm limit; test helper.
#[cfg(test)]
pub(crate) fn random_pose(rng: &mut rand_chacha::ChaCha12Rng) -> Pose {
    use rand::Rng;
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle: f64 = rng.random_range(0.0..2.5);
    let dir = if axis.norm() < 1e-9 {
        Vector3::x()
    } else {
        axis.normalize()
    };
    Pose {
        rotation: UnitQuaternion::from_scaled_axis(dir * angle),
        translation: Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        ),
    }
}
