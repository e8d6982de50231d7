//! Rigid transforms.
//!
//! Rotations are parameterized by (roll, pitch, yaw) applied as intrinsic
//! rotations about X, then the new Y, then the new Z:
//! `R = Rx(roll) * Ry(pitch) * Rz(yaw)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// SE(3) element mapping points `P -> R * P + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Six free pose parameters: translation and Euler angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseParams {
    pub translation: [f64; 3],
    pub euler: [f64; 3],
}

impl PoseParams {
    pub fn new(translation: [f64; 3], euler: [f64; 3]) -> Self {
        Self { translation, euler }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [x, y, z] = self.translation;
        let [r, p, w] = self.euler;
        [x, y, z, r, p, w]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            translation: [a[0], a[1], a[2]],
            euler: [a[3], a[4], a[5]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self::new(Matrix3::identity(), Vector3::from(t))
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Max deviation of `R^T R` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_3x4(m: &[f64; 12]) -> Pose {
        Pose::new(
            Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            Vector3::new(m[3], m[7], m[11]),
        )
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

pub fn euler_to_pose(params: &PoseParams) -> Pose {
    let [roll, pitch, yaw] = params.euler;
    Pose::new(
        rot_x(roll) * rot_y(pitch) * rot_z(yaw),
        Vector3::from(params.translation),
    )
}

/// Pulls gradients w.r.t. `R` and `t` back onto the six pose parameters.
pub fn euler_to_pose_backward(
    params: &PoseParams,
    grad_rotation: &Matrix3<f64>,
    grad_translation: &Vector3<f64>,
) -> [f64; 6] {
    let [roll, pitch, yaw] = params.euler;
    let (rx, ry, rz) = (rot_x(roll), rot_y(pitch), rot_z(yaw));
    let dr = [
        d_rot_x(roll) * ry * rz,
        rx * d_rot_y(pitch) * rz,
        rx * ry * d_rot_z(yaw),
    ];
    let mut out = [0.0; 6];
    out[..3].copy_from_slice(grad_translation.as_slice());
    for (k, d) in dr.iter().enumerate() {
        out[3 + k] = grad_rotation.component_mul(d).sum();
    }
    out
}

/// Best-effort inverse of [`euler_to_pose`] (exact away from gimbal lock).
pub fn pose_to_euler(pose: &Pose) -> PoseParams {
    // R = Rx Ry Rz  =>  R[0,2] = sin(pitch)
    let r = &pose.rotation;
    let pitch = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let roll = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let yaw = (-r[(0, 1)]).atan2(r[(0, 0)]);
    PoseParams::new(
        [pose.translation[0], pose.translation[1], pose.translation[2]],
        [roll, pitch, yaw],
    )
}

pub fn transform_points(pose: &Pose, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| pose.transform_point(p)).collect()
}

/// Adjoint of [`transform_points`]: returns `(dL/dR, dL/dt, dL/dP)`.
pub fn transform_points_backward(
    pose: &Pose,
    points: &[Vector3<f64>],
    grad_out: &[Vector3<f64>],
) -> (Matrix3<f64>, Vector3<f64>, Vec<Vector3<f64>>) {
    let mut g_rot = Matrix3::zeros();
    let mut g_t = Vector3::zeros();
    let rt = pose.rotation.transpose();
    let mut g_pts = Vec::with_capacity(points.len());
    for (p, g) in points.iter().zip(grad_out) {
        g_rot += g * p.transpose();
        g_t += g;
        g_pts.push(rt * g);
    }
    (g_rot, g_t, g_pts)
}

pub fn pose_inverse(pose: &Pose) -> Pose {
    pose.inverse()
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::grad_check;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn euler_examples() {
        let id = euler_to_pose(&PoseParams::default());
        assert_eq!(id, Pose::identity());

        let yaw = euler_to_pose(&PoseParams::new([0.0; 3], [0.0, 0.0, FRAC_PI_2]));
        let x = yaw.transform_point(&Vector3::x());
        assert!((x - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn euler_matches_elemental_product() {
        // oracle: elemental matrices written out independently
        let (a, b, c) = (0.1f64, 0.2f64, 0.3f64);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos());
        let ry = Matrix3::new(b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos());
        let rz = Matrix3::new(c.cos(), -c.sin(), 0.0, c.sin(), c.cos(), 0.0, 0.0, 0.0, 1.0);
        let pose = euler_to_pose(&PoseParams::new([0.0; 3], [a, b, c]));
        assert!((pose.rotation - rx * ry * rz).abs().max() < 1e-15);
        let back = pose_to_euler(&pose);
        assert!((back.euler[0] - a).abs() < 1e-12);
        assert!((back.euler[1] - b).abs() < 1e-12);
        assert!((back.euler[2] - c).abs() < 1e-12);
    }

    #[test]
    fn transform_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let t = Pose::from_translation([0.0, 0.0, 5.0]);
        assert_eq!(t.transform_point(&Vector3::zeros()), Vector3::new(0.0, 0.0, 5.0));
        let yaw = euler_to_pose(&PoseParams::new([0.0; 3], [0.0, 0.0, FRAC_PI_2]));
        let out = transform_points(&yaw, &[Vector3::x()]);
        assert!((out[0] - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn inverse_and_compose() {
        let p = euler_to_pose(&PoseParams::new([0.3, -1.0, 2.0], [0.4, -0.2, 1.1]));
        let id = p.compose(&p.inverse());
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
        assert_eq!(Pose::identity().compose(&p), p);
    }

    #[test]
    fn chained_poses_match_sequential_application() {
        let a = euler_to_pose(&PoseParams::new([1.0, 0.0, 0.5], [0.1, 0.2, 0.3]));
        let b = euler_to_pose(&PoseParams::new([-0.2, 0.7, 0.0], [-0.5, 0.0, 0.9]));
        let c = euler_to_pose(&PoseParams::new([0.0, 0.3, -2.0], [0.3, 0.3, -0.3]));
        let x = Vector3::new(0.4, -0.6, 2.5);
        let seq = a.transform_point(&b.transform_point(&c.transform_point(&x)));
        let composed = pose_compose(&pose_compose(&a, &b), &c).transform_point(&x);
        assert!((seq - composed).norm() < 1e-12);
    }

    #[test]
    fn pose_params_gradient() {
        let pts = vec![Vector3::new(0.3, -0.2, 2.0), Vector3::new(-1.0, 0.5, 3.0)];
        let w = vec![Vector3::new(0.7, -0.1, 0.2), Vector3::new(-0.3, 0.9, 0.4)];
        let f = |x: &[f64]| {
            let params = PoseParams::from_array([x[0], x[1], x[2], x[3], x[4], x[5]]);
            let pose = euler_to_pose(&params);
            let out = transform_points(&pose, &pts);
            let v: f64 = out.iter().zip(&w).map(|(a, b)| a.dot(b)).sum();
            let (gr, gt, _) = transform_points_backward(&pose, &pts, &w);
            (v, euler_to_pose_backward(&params, &gr, &gt).to_vec())
        };
        let err = grad_check(f, &[0.1, -0.3, 0.2, 0.5, -0.4, 1.2], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
