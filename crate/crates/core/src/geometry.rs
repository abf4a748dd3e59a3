//! Pinhole camera model and rigid-body transforms.
//!
//! Twists are ordered `(v, w)`: translation part first, rotation part second.
//! All increments applied by the optimizer are left-multiplicative,
//! `T <- exp(xi) * T`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Point3, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this rotation angle the exponential and logarithm switch to series expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// The logarithm refuses rotations whose angle is within this margin of pi.
const LOG_PI_MARGIN: f64 = 1e-6;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub ox: f64,
    pub oy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, ox: f64, oy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            ox,
            oy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.ox >= 0.0 && self.ox < self.width as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "ox={} outside [0, {})",
                self.ox, self.width
            )));
        }
        if !(self.oy >= 0.0 && self.oy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "oy={} outside [0, {})",
                self.oy, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of a pyramid level built by repeated 2x2 averaging.
    ///
    /// Pixel centers move by half a pixel at each halving, hence the `+0.5/-0.5`.
    pub fn scaled_to_level(&self, level: usize) -> Intrinsics {
        let s = 0.5f64.powi(level as i32);
        let mut width = self.width;
        let mut height = self.height;
        for _ in 0..level {
            width /= 2;
            height /= 2;
        }
        Intrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            ox: (self.ox + 0.5) * s - 0.5,
            oy: (self.oy + 0.5) * s - 0.5,
            width,
            height,
        }
    }
}

/// Continuous pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub x: f64,
    pub y: f64,
}

impl Pixel {
    pub fn new(x: f64, y: f64) -> Self {
        Pixel { x, y }
    }
}

/// Inverse projection: pixel plus metric depth to a camera-frame point.
pub fn backproject(x: Pixel, depth: f64, k: &Intrinsics) -> Result<Point3<f64>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(Point3::new(
        (x.x - k.ox) / k.fx * depth,
        (x.y - k.oy) / k.fy * depth,
        depth,
    ))
}

/// Forward projection. The result may fall outside the image.
pub fn project(p: &Point3<f64>, k: &Intrinsics) -> Result<Pixel> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera(p.z));
    }
    Ok(Pixel {
        x: p.x * k.fx / p.z + k.ox,
        y: p.y * k.fy / p.z + k.oy,
    })
}

/// Element of se(3): translation part `v`, rotation part `w` (axis-angle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Twist { v, w }
    }

    pub fn zero() -> Self {
        Twist {
            v: Vector3::zeros(),
            w: Vector3::zeros(),
        }
    }

    pub fn from_vector(xi: &Vector6<f64>) -> Self {
        Twist {
            v: Vector3::new(xi[0], xi[1], xi[2]),
            w: Vector3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

pub(crate) fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rigid transform `P' = R P + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    /// Checked constructor; `rotation` must be orthonormal with det 1 within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(orth < 1e-9) {
            return Err(Error::InvalidRotation(format!(
                "R^T R deviates from I by {orth:e}"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() < 1e-9) {
            return Err(Error::InvalidRotation(format!("det R = {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite translation".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn exp(xi: &Twist) -> Self {
        se3_exp(xi)
    }

    pub fn log(&self) -> Result<Twist> {
        se3_log(self)
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        transform_point(self, p)
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        pose_compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        pose_inverse(self)
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let s = vee(&(self.rotation - self.rotation.transpose())).norm() / 2.0;
        s.atan2(c)
    }

    pub fn to_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Exponential map from a twist to a rigid transform.
///
/// Rodrigues for the rotation and the left Jacobian of SO(3) for the
/// translation; second-order series below `SMALL_ANGLE`.
pub fn se3_exp(xi: &Twist) -> Pose {
    let theta = xi.w.norm();
    let w_hat = hat(&xi.w);
    let w_hat2 = w_hat * w_hat;
    let (a, b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        let half = (0.5 * theta).sin();
        // half-angle and series forms avoid cancellation for small theta
        let c = if theta < 1e-4 {
            1.0 / 6.0 - t2 / 120.0
        } else {
            (theta - theta.sin()) / (t2 * theta)
        };
        (theta.sin() / theta, 2.0 * half * half / t2, c)
    };
    let rotation = Matrix3::identity() + w_hat * a + w_hat2 * b;
    let v_mat = Matrix3::identity() + w_hat * b + w_hat2 * c;
    Pose {
        rotation,
        translation: v_mat * xi.v,
    }
}

/// Logarithm map, inverse of [`se3_exp`] for rotation angles below `pi - 1e-6`.
pub fn se3_log(t: &Pose) -> Result<Twist> {
    let r = &t.rotation;
    let axis_sin = vee(&(r - r.transpose())) / 2.0;
    let s = axis_sin.norm();
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = s.atan2(c);
    if theta >= PI - LOG_PI_MARGIN {
        return Err(Error::NearSingularLog(theta));
    }
    let w = if theta < SMALL_ANGLE {
        // theta/sin(theta) ~ 1 + theta^2/6
        axis_sin * (1.0 + theta * theta / 6.0)
    } else {
        axis_sin * (theta / s)
    };
    let w_hat = hat(&w);
    // V^{-1} = I - W/2 + coef * W^2
    let coef = if theta < 1e-3 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - w_hat * 0.5 + w_hat * w_hat * coef;
    Ok(Twist {
        v: v_inv * t.translation,
        w,
    })
}

pub fn transform_point(t: &Pose, p: &Point3<f64>) -> Point3<f64> {
    Point3::from(t.rotation * p.coords + t.translation)
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn pose_inverse(a: &Pose) -> Pose {
    let rt = a.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * a.translation),
    }
}

/// Unit quaternion with canonical sign `qw >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        UnitQuaternion {
            qx: 0.0,
            qy: 0.0,
            qz: 0.0,
            qw: 1.0,
        }
    }

    /// Normalizes and canonicalizes the sign.
    pub fn new(qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let n = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
        let s = if qw < 0.0 { -1.0 / n } else { 1.0 / n };
        UnitQuaternion {
            qx: qx * s,
            qy: qy * s,
            qz: qz * s,
            qw: qw * s,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.qx * self.qx + self.qy * self.qy + self.qz * self.qz + self.qw * self.qw).sqrt()
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        let (x, y, z, w) = (self.qx, self.qy, self.qz, self.qw);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method: branch on the largest diagonal term for stability.
    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        let tr = r.trace();
        let (x, y, z, w);
        if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        UnitQuaternion::new(x, y, z, w)
    }
}

pub fn pose_to_quat(t: &Pose) -> (UnitQuaternion, Vector3<f64>) {
    (UnitQuaternion::from_rotation(&t.rotation), t.translation)
}

pub fn quat_to_pose(q: &UnitQuaternion, t: Vector3<f64>) -> Pose {
    let q = UnitQuaternion::new(q.qx, q.qy, q.qz, q.qw);
    Pose {
        rotation: q.to_rotation(),
        translation: t,
    }
}
