//! Rotation algebra shared by every other module.
//!
//! Rotations are stored as 3×3 matrices ([`RotM`]) and exchanged with the
//! network in the continuous 6D form ([`Rot6`]): the first two matrix columns,
//! column-major. Decoding re-orthonormalizes with Gram–Schmidt, so any
//! non-degenerate 6-vector maps to a valid rotation.
//!
//! ```
//! use mage_core::rotmath::{RotM, Rot6};
//!
//! let r = RotM::rz_deg(90.0);
//! let six = r.to_6d();
//! assert_eq!(six.0.map(|v| v.round()), [0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
//! let back = six.decode().unwrap();
//! assert!((back.matrix() - r.matrix()).norm() < 1e-12);
//! ```

use std::ops::Mul;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A 3-vector in meters (positions) or meters per frame (velocities).
pub type Vec3 = Vector3<f64>;

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotM(Matrix3<f64>);

/// Continuous 6D rotation encoding: columns one and two of the matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6(pub [f64; 6]);

impl Default for RotM {
    fn default() -> Self {
        Self::identity()
    }
}

impl RotM {
    pub fn identity() -> Self {
        RotM(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        RotM(m)
    }

    /// Wraps a matrix after checking the rotation invariants at `tol`.
    pub fn try_from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        let r = RotM(m);
        if r.is_valid(tol) {
            Ok(r)
        } else {
            Err(Error::DegenerateInput(format!("not a rotation matrix: {m}")))
        }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        Self::exp(&(axis * (angle / n)))
    }

    /// Exponential map of a rotation vector (Rodrigues).
    pub fn exp(w: &Vec3) -> Self {
        let theta = w.norm();
        if theta < 1e-12 {
            return RotM(Matrix3::identity() + skew(w));
        }
        let k = skew(&(w / theta));
        RotM(Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos()))
    }

    pub fn rx_deg(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), deg.to_radians())
    }

    pub fn ry_deg(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), deg.to_radians())
    }

    pub fn rz_deg(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), deg.to_radians())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Inverse of a rotation, i.e. its transpose.
    pub fn transpose(&self) -> Self {
        RotM(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// `‖MᵀM − I‖_∞ < tol` and `|det M − 1| < tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let e = self.0.transpose() * self.0 - Matrix3::identity();
        e.amax() < tol && (self.0.determinant() - 1.0).abs() < tol && self.0.iter().all(|v| v.is_finite())
    }

    pub fn to_6d(&self) -> Rot6 {
        sixd_encode(self)
    }
}

impl Mul for RotM {
    type Output = RotM;
    fn mul(self, rhs: RotM) -> RotM {
        RotM(self.0 * rhs.0)
    }
}

impl Mul for &RotM {
    type Output = RotM;
    fn mul(self, rhs: &RotM) -> RotM {
        RotM(self.0 * rhs.0)
    }
}

impl Rot6 {
    pub const IDENTITY: Rot6 = Rot6([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn decode(&self) -> Result<RotM> {
        sixd_decode(self)
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut a = [0.0; 6];
        a.copy_from_slice(&s[..6]);
        Rot6(a)
    }
}

fn skew(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// First two columns of `r`, column-major.
pub fn sixd_encode(r: &RotM) -> Rot6 {
    let m = &r.0;
    Rot6([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// Gram–Schmidt decoding of a 6D encoding.
pub fn sixd_decode(a: &Rot6) -> Result<RotM> {
    let a1 = Vec3::new(a.0[0], a.0[1], a.0[2]);
    let a2 = Vec3::new(a.0[3], a.0[4], a.0[5]);
    let n1 = a1.norm();
    if !(n1 > 1e-12) {
        return Err(Error::DegenerateInput(format!("6D first column has norm {n1:e}")));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > 1e-12 * a2.norm().max(1.0)) {
        return Err(Error::DegenerateInput(
            "6D second column is parallel to the first".into(),
        ));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(RotM(Matrix3::from_columns(&[b1, b2, b3])))
}

/// Relative rotation `R_prevᵀ · R_cur` between consecutive frames.
pub fn angular_velocity(r_prev: &RotM, r_cur: &RotM) -> RotM {
    RotM(r_prev.0.transpose() * r_cur.0)
}

/// Per-frame displacement `p_cur − p_prev`.
pub fn linear_velocity(p_prev: &Vec3, p_cur: &Vec3) -> Vec3 {
    p_cur - p_prev
}

/// Geodesic distance on SO(3) in degrees, in `[0, 180]`.
pub fn geodesic_angle_deg(r1: &RotM, r2: &RotM) -> f64 {
    if r1 == r2 {
        return 0.0;
    }
    let rel = r1.0.transpose() * r2.0;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // atan2 keeps precision near 0° where acos loses half the digits
    let s = 0.5
        * Vec3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]).norm();
    s.atan2(c).to_degrees()
}

/// Chordal L2 mean: the arithmetic mean matrix projected onto SO(3).
///
/// The projection is the polar factor `U·diag(1, 1, det(UVᵀ))·Vᵀ`, which is
/// the rotation closest to the mean in Frobenius norm.
pub fn chordal_mean(rs: &[RotM]) -> Result<RotM> {
    if rs.is_empty() {
        return Err(Error::DegenerateInput("chordal mean of an empty set".into()));
    }
    if rs.len() == 1 {
        return Ok(rs[0]);
    }
    let mut mean = Matrix3::zeros();
    for r in rs {
        mean += r.0;
    }
    mean /= rs.len() as f64;
    project_to_rotation(&mean)
}

/// Chordal mean with non-negative per-rotation weights.
pub fn chordal_mean_weighted(rs: &[RotM], weights: &[f64]) -> Result<RotM> {
    if rs.is_empty() || rs.len() != weights.len() {
        return Err(Error::DegenerateInput(format!(
            "{} rotations with {} weights",
            rs.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::DegenerateInput("weights must be non-negative with a positive sum".into()));
    }
    let mut mean = Matrix3::zeros();
    for (r, w) in rs.iter().zip(weights) {
        mean += r.0 * *w;
    }
    project_to_rotation(&(mean / total))
}

/// Nearest rotation to an arbitrary 3×3 matrix.
pub fn project_to_rotation(m: &Matrix3<f64>) -> Result<RotM> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateInput("SVD failed".into())),
    };
    let smin = svd.singular_values.min();
    if !(smin >= 1e-9) {
        return Err(Error::DegenerateInput(format!(
            "mean matrix is rank-deficient (smallest singular value {smin:e})"
        )));
    }
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Ok(RotM(u * fix * v_t))
}

/// Uniformly distributed random rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotM {
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    let uq = UnitQuaternion::from_quaternion(q);
    RotM(*uq.to_rotation_matrix().matrix())
}

/// Random rotation whose angle is at most `max_deg`, uniform axis.
pub fn random_rotation_within<R: Rng + ?Sized>(rng: &mut R, max_deg: f64) -> RotM {
    let axis = Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let angle = rng.random_range(0.0..=max_deg).to_radians();
    RotM::from_axis_angle(&axis, angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn frob(a: &RotM, b: &RotM) -> f64 {
        (a.0 - b.0).norm()
    }

    #[test]
    fn encode_identity_and_rz() {
        assert_eq!(RotM::identity().to_6d(), Rot6::IDENTITY);
        let e = RotM::rz_deg(90.0).to_6d();
        let want = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in e.0.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_removes_scale_and_shear() {
        assert_eq!(Rot6::IDENTITY.decode().unwrap(), RotM::identity());
        let r = Rot6([2.0, 0.0, 0.0, 1.0, 1.0, 0.0]).decode().unwrap();
        assert!(frob(&r, &RotM::identity()) < 1e-15);
    }

    #[test]
    fn decode_rejects_degenerate() {
        assert!(matches!(
            Rot6([0.0; 6]).decode(),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            Rot6([1.0, 0.0, 0.0, 3.0, 0.0, 0.0]).decode(),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn roundtrip_random() {
        let mut g = rng();
        for _ in 0..10_000 {
            let r = random_rotation(&mut g);
            let back = r.to_6d().decode().unwrap();
            assert!(frob(&r, &back) < 1e-9);
        }
    }

    #[test]
    fn decode_always_orthonormal() {
        let mut g = rng();
        for _ in 0..10_000 {
            let r = random_rotation(&mut g).to_6d();
            let mut a = r.0;
            for v in &mut a {
                *v += g.random_range(-0.3..0.3);
            }
            a[0] *= 3.0;
            let d = Rot6(a).decode().unwrap();
            assert!(d.is_valid(1e-9));
        }
    }

    #[test]
    fn angular_velocity_cases() {
        let r = RotM::rx_deg(33.0);
        assert!(frob(&angular_velocity(&r, &r), &RotM::identity()) < 1e-15);
        let w = angular_velocity(&RotM::rz_deg(10.0), &RotM::rz_deg(25.0));
        assert!(frob(&w, &RotM::rz_deg(15.0)) < 1e-12);

        let mut g = rng();
        for _ in 0..200 {
            let a = random_rotation(&mut g);
            let b = random_rotation(&mut g);
            let inv = a.0.try_inverse().unwrap();
            let oracle = inv * b.0;
            assert!((angular_velocity(&a, &b).0 - oracle).amax() < 1e-12);
            let delta = random_rotation(&mut g);
            let w = angular_velocity(&a, &(a * delta));
            assert!(frob(&w, &delta) < 1e-12);
        }
    }

    #[test]
    fn linear_velocity_cases() {
        let p = Vec3::new(0.3, -1.0, 2.0);
        assert_eq!(linear_velocity(&p, &p), Vec3::zeros());
        assert_eq!(
            linear_velocity(&Vec3::zeros(), &Vec3::new(0.1, 0.0, 0.0)),
            Vec3::new(0.1, 0.0, 0.0)
        );
        let mut g = rng();
        for _ in 0..100 {
            let a = Vec3::new(g.random(), g.random(), g.random());
            let b = Vec3::new(g.random(), g.random(), g.random());
            let v = linear_velocity(&a, &b);
            for k in 0..3 {
                assert_eq!(v[k], b[k] - a[k]);
            }
        }
    }

    fn log_map_angle_deg(r1: &RotM, r2: &RotM) -> f64 {
        let rel = nalgebra::Rotation3::from_matrix_unchecked(r1.0.transpose() * r2.0);
        let q = UnitQuaternion::from_rotation_matrix(&rel);
        (2.0 * q.imag().norm().atan2(q.w.abs())).to_degrees()
    }

    #[test]
    fn geodesic_cases() {
        let r = RotM::ry_deg(12.0);
        assert!(geodesic_angle_deg(&r, &r) < 1e-5);
        assert!((geodesic_angle_deg(&RotM::identity(), &RotM::rz_deg(90.0)) - 90.0).abs() < 1e-12);
        let mut g = rng();
        for _ in 0..1000 {
            let a = random_rotation(&mut g);
            let b = random_rotation(&mut g);
            let c = random_rotation(&mut g);
            let ab = geodesic_angle_deg(&a, &b);
            // acos loses precision near 0 and 180 deg; log map stays accurate there.
            if ab > 1.0 && ab < 179.0 {
                assert!((ab - log_map_angle_deg(&a, &b)).abs() < 1e-6);
            }
            assert!((ab - geodesic_angle_deg(&b, &a)).abs() < 1e-9);
            assert!(ab <= geodesic_angle_deg(&a, &c) + geodesic_angle_deg(&c, &b) + 1e-6);
            assert!((0.0..=180.0).contains(&ab));
        }
    }

    #[test]
    fn chordal_mean_identical_and_symmetric() {
        let r = RotM::rx_deg(40.0) * RotM::rz_deg(-20.0);
        let m = chordal_mean(&[r, r, r, r]).unwrap();
        assert!(frob(&m, &r) < 1e-12);
        let m = chordal_mean(&[RotM::rz_deg(30.0), RotM::rz_deg(-30.0)]).unwrap();
        assert!(frob(&m, &RotM::identity()) < 1e-12);
    }

    #[test]
    fn chordal_mean_degenerate() {
        let err = chordal_mean(&[RotM::rz_deg(90.0), RotM::rz_deg(-90.0)]);
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
        assert!(chordal_mean(&[]).is_err());
    }

    #[test]
    fn chordal_mean_equivariant() {
        let mut g = rng();
        for _ in 0..200 {
            let rs: Vec<RotM> = (0..4).map(|_| random_rotation_within(&mut g, 60.0)).collect();
            let q = random_rotation(&mut g);
            let lhs = chordal_mean(&rs.iter().map(|r| q * *r).collect::<Vec<_>>()).unwrap();
            let rhs = q * chordal_mean(&rs).unwrap();
            assert!(frob(&lhs, &rhs) < 1e-9);
        }
    }

    fn cost(r: &RotM, rs: &[RotM]) -> f64 {
        rs.iter().map(|x| (r.0 - x.0).norm_squared()).sum()
    }

    // Brute force: coarse rotation-vector grid over the whole ball, then a 1° grid
    // around the coarse winner.
    fn grid_search_mean(rs: &[RotM]) -> RotM {
        let coarse = 6f64.to_radians();
        let lim = std::f64::consts::PI;
        let steps = (lim / coarse).ceil() as i32;
        let mut best = (f64::INFINITY, Vec3::zeros());
        for i in -steps..=steps {
            for j in -steps..=steps {
                for k in -steps..=steps {
                    let w = Vec3::new(i as f64, j as f64, k as f64) * coarse;
                    if w.norm() > lim {
                        continue;
                    }
                    let c = cost(&RotM::exp(&w), rs);
                    if c < best.0 {
                        best = (c, w);
                    }
                }
            }
        }
        let fine = 1f64.to_radians();
        let center = best.1;
        for i in -6..=6 {
            for j in -6..=6 {
                for k in -6..=6 {
                    let w = center + Vec3::new(i as f64, j as f64, k as f64) * fine;
                    let c = cost(&RotM::exp(&w), rs);
                    if c < best.0 {
                        best = (c, w);
                    }
                }
            }
        }
        RotM::exp(&best.1)
    }

    #[test]
    fn chordal_mean_matches_grid_search() {
        let mut g = rng();
        for _ in 0..3 {
            let center = random_rotation(&mut g);
            let rs: Vec<RotM> = (0..3)
                .map(|_| center * random_rotation_within(&mut g, 45.0))
                .collect();
            let m = chordal_mean(&rs).unwrap();
            let oracle = grid_search_mean(&rs);
            assert!(geodesic_angle_deg(&m, &oracle) < 2.0);
        }
    }
}
