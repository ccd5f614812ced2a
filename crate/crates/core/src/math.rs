//! Small rotation helpers shared by the kinematics, simulator and rewards.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

/// Rotation about world z.
pub fn yaw_rotation(yaw: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
}

/// `(roll, pitch, yaw)` of the intrinsic z-y-x decomposition.
pub fn roll_pitch_yaw(q: &UnitQuaternion<f64>) -> (f64, f64, f64) {
    q.euler_angles()
}

/// Heading angle of the body x axis projected on the ground plane.
pub fn heading(q: &UnitQuaternion<f64>) -> f64 {
    let fwd = q * Vector3::x();
    fwd.y.atan2(fwd.x)
}

/// Geodesic angle in radians between two orientations, insensitive to the
/// quaternion double cover.
pub fn geodesic_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let rel = a.inverse() * b;
    let q = rel.quaternion();
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Shortest-path spherical interpolation; falls back to normalized linear
/// interpolation when the two orientations are nearly identical.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion().coords;
    let mut qb = b.quaternion().coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > 1.0 - 1e-12 {
        qa * (1.0 - t) + qb * t
    } else {
        let theta = dot.min(1.0).acos();
        let s = theta.sin();
        qa * (((1.0 - t) * theta).sin() / s) + qb * ((t * theta).sin() / s)
    };
    UnitQuaternion::from_quaternion(Quaternion::from(coords))
}

/// World-frame angular velocity taking `from` to `to` over `dt`.
pub fn angular_velocity_between(from: &UnitQuaternion<f64>, to: &UnitQuaternion<f64>, dt: f64) -> Vector3<f64> {
    let delta = to * from.inverse();
    delta.scaled_axis() / dt
}

/// Quaternion as `[w, x, y, z]`.
pub fn quat_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    let c = q.quaternion();
    [c.w, c.i, c.j, c.k]
}

/// Builds a quaternion from `[w, x, y, z]` without normalizing.
pub fn quat_from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Quaternion<f64> {
    Quaternion::new(w, x, y, z)
}

pub fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

pub fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn slerp_midpoint_of_quarter_turn_is_eighth_turn() {
        let a = UnitQuaternion::identity();
        let b = yaw_rotation(FRAC_PI_2);
        let mid = slerp(&a, &b, 0.5);
        // closed form: rotation by half the angle about the same axis
        let expected = [(FRAC_PI_2 / 4.0).cos(), 0.0, 0.0, (FRAC_PI_2 / 4.0).sin()];
        let got = quat_wxyz(&mid);
        for i in 0..4 {
            assert!((got[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn geodesic_angle_ignores_sign() {
        let a = yaw_rotation(0.3);
        let neg = UnitQuaternion::new_unchecked(-a.into_inner());
        assert!(geodesic_angle(&a, &neg) < 1e-12);
        assert!((geodesic_angle(&UnitQuaternion::identity(), &a) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn angular_velocity_recovers_yaw_rate() {
        let w = angular_velocity_between(&yaw_rotation(0.1), &yaw_rotation(0.3), 0.1);
        assert!((w.z - 2.0).abs() < 1e-12);
        assert!(w.x.abs() < 1e-12 && w.y.abs() < 1e-12);
    }
}
