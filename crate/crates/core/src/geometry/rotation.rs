use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Orthonormality tolerance on `RᵀR - I` (max-abs entry) and on `det(R) - 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// A proper rotation stored as a 3×3 matrix.
///
/// Serialized as nine row-major numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 9]", try_from = "[f64; 9]")]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn try_from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let r = Self(m);
        if r.is_valid(ORTHONORMAL_TOL) {
            Ok(r)
        } else {
            Err(GeometryError::NotARotation)
        }
    }

    pub fn from_rows(rows: [f64; 9]) -> Self {
        Self(Matrix3::from_row_slice(&rows))
    }

    pub fn to_rows(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Rotation about `axis` (need not be unit length) by `deg` degrees.
    pub fn from_axis_angle(axis: &Vector3<f64>, deg: f64) -> Self {
        let k = axis.normalize();
        let (s, c) = deg.to_radians().sin_cos();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Self(Matrix3::identity() + kx * s + kx * kx * (1.0 - c))
    }

    /// Rotation about the z axis. Multiples of 90° are built exactly.
    pub fn rz(deg: f64) -> Self {
        let (s, c) = exact_sin_cos(deg);
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn rx(deg: f64) -> Self {
        let (s, c) = exact_sin_cos(deg);
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn ry(deg: f64) -> Self {
        let (s, c) = exact_sin_cos(deg);
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn column(&self, i: usize) -> Vector3<f64> {
        self.0.column(i).into_owned()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let e = self.0.transpose() * self.0 - Matrix3::identity();
        e.amax() < tol && (self.0.determinant() - 1.0).abs() < tol
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;

    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

impl From<Rotation3> for [f64; 9] {
    fn from(r: Rotation3) -> Self {
        r.to_rows()
    }
}

impl TryFrom<[f64; 9]> for Rotation3 {
    type Error = GeometryError;

    fn try_from(rows: [f64; 9]) -> Result<Self, Self::Error> {
        Self::try_from_matrix(Matrix3::from_row_slice(&rows))
    }
}

fn exact_sin_cos(deg: f64) -> (f64, f64) {
    let q = deg / 90.0;
    if q == q.round() {
        match (q as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Gram–Schmidt map from the first two (unnormalized) columns to a rotation.
pub fn rot6d_to_matrix(a1: &Vector3<f64>, a2: &Vector3<f64>) -> Result<Rotation3, GeometryError> {
    let n1 = a1.norm();
    let n2 = a2.norm();
    if !(n1 > 1e-12) || !(n2 > 1e-12) || !a1.iter().chain(a2.iter()).all(|v| v.is_finite()) {
        return Err(GeometryError::DegenerateInput);
    }
    if a1.cross(a2).norm() <= (1e-6f64).sin() * n1 * n2 {
        return Err(GeometryError::DegenerateInput);
    }
    let b1 = a1 / n1;
    let b2 = (a2 - b1 * b1.dot(a2)).normalize();
    let b3 = b1.cross(&b2);
    Ok(Rotation3(Matrix3::from_columns(&[b1, b2, b3])))
}

/// Geodesic distance between two rotations, in degrees.
pub fn geodesic_angle(r1: &Rotation3, r2: &Rotation3) -> f64 {
    // atan2 keeps precision near 0° and 180° where acos does not
    let m = r1.0.transpose() * r2.0;
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / 2.0;
    let c = (m.trace() - 1.0) / 2.0;
    s.atan2(c).to_degrees()
}

/// Picks the symmetry-equivalent of `r_gt` closest to `r_pred`.
///
/// Returns `r_gt * s*` with `s*` minimizing the geodesic angle; the first
/// minimum in list order wins ties.
pub fn sym_align(r_gt: &Rotation3, r_pred: &Rotation3, sym: &[Rotation3]) -> Rotation3 {
    let mut best = *r_gt;
    let mut best_angle = f64::INFINITY;
    for s in sym {
        let cand = *r_gt * *s;
        let a = geodesic_angle(&cand, r_pred);
        if a < best_angle {
            best_angle = a;
            best = cand;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Rotation3::from_axis_angle(&(axis + Vector3::new(1e-3, 0.0, 0.0)), rng.random_range(-180.0..180.0))
    }

    #[test]
    fn rot6d_identity_cases() {
        let r = rot6d_to_matrix(&Vector3::x(), &Vector3::y()).unwrap();
        assert_eq!(r, Rotation3::identity());
        let r = rot6d_to_matrix(&Vector3::new(2.0, 0.0, 0.0), &Vector3::new(0.0, 3.0, 0.0)).unwrap();
        assert!((r.matrix() - Matrix3::identity()).amax() < 1e-15);
    }

    #[test]
    fn rot6d_rejects_degenerate() {
        assert_eq!(
            rot6d_to_matrix(&Vector3::zeros(), &Vector3::y()),
            Err(GeometryError::DegenerateInput)
        );
        assert_eq!(
            rot6d_to_matrix(&Vector3::x(), &Vector3::new(2.0, 0.0, 0.0)),
            Err(GeometryError::DegenerateInput)
        );
        assert_eq!(
            rot6d_to_matrix(&Vector3::new(f64::NAN, 0.0, 0.0), &Vector3::y()),
            Err(GeometryError::DegenerateInput)
        );
    }

    #[test]
    fn rot6d_random_inputs_are_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a1 = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let a2 = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let r = rot6d_to_matrix(&a1, &a2).unwrap();
            assert!(r.is_valid(1e-9));
        }
    }

    #[test]
    fn rot6d_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = rot6d_to_matrix(&r.column(0), &r.column(1)).unwrap();
            assert!((back.matrix() - r.matrix()).amax() < 1e-9);
        }
    }

    #[test]
    fn geodesic_angle_cases() {
        let r = Rotation3::from_axis_angle(&Vector3::new(0.3, -1.0, 0.2), 37.0);
        assert!(geodesic_angle(&r, &r).abs() < 1e-6);
        assert!((geodesic_angle(&r, &(r * Rotation3::rz(90.0))) - 90.0).abs() < 1e-9);
        let a = geodesic_angle(&r, &(r * Rotation3::rz(180.0)));
        assert!(!a.is_nan());
        assert!((a - 180.0).abs() < 1e-6);
    }

    #[test]
    fn exact_quarter_turns() {
        let r = Rotation3::rz(90.0);
        assert_eq!(r.apply(&Vector3::x()), Vector3::y());
        assert_eq!(Rotation3::rz(360.0), Rotation3::identity());
        assert_eq!(Rotation3::rz(-90.0) * Rotation3::rz(90.0), Rotation3::identity());
    }

    fn z4() -> Vec<Rotation3> {
        (0..4).map(|k| Rotation3::rz(90.0 * k as f64)).collect()
    }

    #[test]
    fn sym_align_trivial_group() {
        let r = Rotation3::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 40.0);
        let p = Rotation3::from_axis_angle(&Vector3::new(-1.0, 0.0, 3.0), 10.0);
        assert_eq!(sym_align(&r, &p, &[Rotation3::identity()]), r);
    }

    #[test]
    fn sym_align_group_member() {
        let r = Rotation3::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 40.0);
        let pred = r * Rotation3::rz(90.0);
        let out = sym_align(&r, &pred, &z4());
        assert!(geodesic_angle(&out, &pred) < 1e-6);
    }

    #[test]
    fn sym_align_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let group = z4();
        for _ in 0..500 {
            let gt = random_rotation(&mut rng);
            let pred = random_rotation(&mut rng);
            let angles: Vec<f64> = group.iter().map(|s| geodesic_angle(&(gt * *s), &pred)).collect();
            let min = angles.iter().cloned().fold(f64::INFINITY, f64::min);
            let out = sym_align(&gt, &pred, &group);
            assert!((geodesic_angle(&out, &pred) - min).abs() < 1e-12);
        }
    }

    #[test]
    fn serde_row_major() {
        let r = Rotation3::rz(90.0);
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, "[0.0,-1.0,0.0,1.0,0.0,0.0,0.0,0.0,1.0]");
        let back: Rotation3 = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        assert!(serde_json::from_str::<Rotation3>("[1,0,0,0,1,0,0,0,2]").is_err());
    }
}
