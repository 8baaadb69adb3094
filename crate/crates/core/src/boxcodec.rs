//! Oriented 3D boxes and the anchor-relative corner encoding.
//!
//! Each box corner `c` is expressed relative to an anchor point `p` as
//! `R^T (c - p)`, where `R = [r_x r_y r_z]` has `r_x` pointing from the
//! sensor to `p` and `r_y` horizontal. Rotating the anchor and the box
//! together about the sensor's z axis leaves the encoding unchanged.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::pointmap::{observation_angles, Point3};

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
}

/// Box-local corner signs in canonical order: bottom face counterclockwise
/// seen from above starting at (+x, +y), then the top face in the same order.
const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
];

impl Box3D {
    pub fn new(center: Point3, length: f64, width: f64, height: f64, yaw: f64) -> Result<Self> {
        let dims_ok = [length, width, height].iter().all(|v| v.is_finite() && *v > 0.0);
        if !dims_ok {
            return Err(Error::InvalidBox(format!(
                "extents must be positive (l={length}, w={width}, h={height})"
            )));
        }
        if !center.coords.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite center or yaw".into()));
        }
        Ok(Self {
            center,
            length,
            width,
            height,
            yaw: normalize_angle(yaw),
        })
    }

    fn half_extents(&self) -> Vector3<f64> {
        Vector3::new(self.length, self.width, self.height) * 0.5
    }

    /// Rotation from box-local to sensor frame (about z only).
    pub fn rotation(&self) -> Matrix3<f64> {
        rot_z(self.yaw)
    }

    pub fn corners(&self) -> CornerSet {
        let rot = self.rotation();
        let half = self.half_extents();
        let mut out = [Point3::origin(); 8];
        for (slot, s) in out.iter_mut().zip(CORNER_SIGNS) {
            let local = Vector3::new(s[0] * half.x, s[1] * half.y, s[2] * half.z);
            *slot = self.center + rot * local;
        }
        CornerSet(out)
    }

    /// Point containment with `margin` meters of slack on every face.
    pub fn contains(&self, p: &Point3, margin: f64) -> bool {
        let local = self.rotation().transpose() * (p - self.center);
        let half = self.half_extents();
        local.x.abs() <= half.x + margin
            && local.y.abs() <= half.y + margin
            && local.z.abs() <= half.z + margin
    }

    /// Ground-plane footprint corners, counterclockwise.
    pub fn footprint(&self) -> [Vector2<f64>; 4] {
        let c = self.corners().0;
        [0, 1, 2, 3].map(|i| Vector2::new(c[i].x, c[i].y))
    }

    /// The same box after a rotation by `angle` about the sensor z axis.
    pub fn rotated_about_z(&self, angle: f64) -> Self {
        Self {
            center: Point3::from(rot_z(angle) * self.center.coords),
            yaw: normalize_angle(self.yaw + angle),
            ..*self
        }
    }
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet(pub [Point3; 8]);

impl CornerSet {
    pub fn from_flat(v: &[f64; 24]) -> Self {
        CornerSet(std::array::from_fn(|i| Point3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])))
    }

    pub fn to_flat(&self) -> [f64; 24] {
        let mut out = [0.0; 24];
        for (i, c) in self.0.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(c.coords.as_slice());
        }
        out
    }

    pub fn max_distance(&self, other: &CornerSet) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedBox24(pub [f64; 24]);

/// Rotation whose first column points from the sensor toward an anchor
/// point and whose second column is horizontal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationBasis(pub Matrix3<f64>);

impl ObservationBasis {
    pub fn at(p: &Point3) -> Result<Self> {
        if p.coords.norm_squared() == 0.0 {
            return Err(Error::DegeneratePoint);
        }
        let (theta, phi) = observation_angles(p);
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        // R_z(theta) * R_y(-phi): the elevation sign makes R e1 point at p
        Ok(Self(Matrix3::new(
            ct * cp,
            -st,
            -ct * sp,
            st * cp,
            ct,
            -st * sp,
            sp,
            0.0,
            cp,
        )))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

pub fn observation_basis(p: &Point3) -> Result<ObservationBasis> {
    ObservationBasis::at(p)
}

pub fn encode_corners(corners: &CornerSet, p: &Point3) -> Result<EncodedBox24> {
    let rt = ObservationBasis::at(p)?.0.transpose();
    let mut out = [0.0; 24];
    for (i, c) in corners.0.iter().enumerate() {
        let e = rt * (c - p);
        out[3 * i..3 * i + 3].copy_from_slice(e.as_slice());
    }
    Ok(EncodedBox24(out))
}

pub fn encode_box(b: &Box3D, p: &Point3) -> Result<EncodedBox24> {
    encode_corners(&b.corners(), p)
}

pub fn decode_box(enc: &EncodedBox24, p: &Point3) -> Result<CornerSet> {
    let r = ObservationBasis::at(p)?.0;
    Ok(CornerSet(std::array::from_fn(|i| {
        let e = Vector3::new(enc.0[3 * i], enc.0[3 * i + 1], enc.0[3 * i + 2]);
        p + r * e
    })))
}

/// Residual above which a corner set is not accepted as a box.
pub const FIT_TOLERANCE: f64 = 0.5;

/// Fits box parameters to eight corners in canonical order.
///
/// Center is the corner mean. Yaw and extents come from a least-squares fit
/// of the four length edges, four width edges and four vertical edges.
pub fn params_from_corners(corners: &CornerSet) -> Result<Box3D> {
    let c = &corners.0;
    if !c.iter().all(|p| p.coords.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("box corners".into()));
    }
    let center = Point3::from(c.iter().map(|p| p.coords).sum::<Vector3<f64>>() / 8.0);
    // length edges run from slot 2->1, 3->4 and the same on top
    let len_edges = [(1, 0), (2, 3), (5, 4), (6, 7)];
    let wid_edges = [(3, 0), (2, 1), (7, 4), (6, 5)];
    let mut lx = Vector2::zeros();
    let mut wy = Vector2::zeros();
    for (a, b) in len_edges {
        lx += (c[b] - c[a]).xy();
    }
    for (a, b) in wid_edges {
        wy += (c[b] - c[a]).xy();
    }
    lx /= 4.0;
    wy /= 4.0;
    // width edges point along +90 deg from the heading; rotate back by -90
    let heading = lx + Vector2::new(wy.y, -wy.x);
    if heading.norm() < 1e-12 {
        return Err(Error::BoxFit {
            residual: f64::INFINITY,
        });
    }
    let yaw = heading.y.atan2(heading.x);
    let ux = Vector2::new(yaw.cos(), yaw.sin());
    let uy = Vector2::new(-ux.y, ux.x);
    let length = lx.dot(&ux);
    let width = wy.dot(&uy);
    let height = (0..4).map(|i| c[i + 4].z - c[i].z).sum::<f64>() / 4.0;
    let fitted = Box3D::new(center, length, width, height, yaw).map_err(|_| Error::BoxFit {
        residual: f64::INFINITY,
    })?;
    let residual = fitted.corners().max_distance(corners);
    if residual > FIT_TOLERANCE {
        return Err(Error::BoxFit { residual });
    }
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn example_box() -> Box3D {
        Box3D::new(Point3::new(10.5, 0.0, 0.0), 4.0, 2.0, 1.5, 0.0).unwrap()
    }

    #[test]
    fn basis_of_x_axis_point_is_identity() {
        let b = observation_basis(&Point3::new(10.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(b.0, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn basis_of_y_axis_point_is_quarter_turn() {
        let b = observation_basis(&Point3::new(0.0, 10.0, 0.0)).unwrap();
        assert_abs_diff_eq!(b.0, rot_z(PI / 2.0), epsilon = 1e-15);
    }

    #[test]
    fn basis_rejects_origin() {
        assert!(matches!(
            observation_basis(&Point3::origin()),
            Err(Error::DegeneratePoint)
        ));
    }

    #[test]
    fn canonical_first_corner() {
        let c = example_box().corners();
        assert_eq!(c.0[0], Point3::new(12.5, 1.0, -0.75));
        assert_eq!(c.0[1], Point3::new(8.5, 1.0, -0.75));
        assert_eq!(c.0[4], Point3::new(12.5, 1.0, 0.75));
    }

    #[test]
    fn identity_basis_encoding_is_offset() {
        let enc = encode_box(&example_box(), &Point3::new(10.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(enc.0[0], 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(enc.0[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(enc.0[2], -0.75, epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_scene_has_same_encoding() {
        let p = Point3::new(10.0, 0.0, 0.0);
        let base = encode_box(&example_box(), &p).unwrap();
        let turned = example_box().rotated_about_z(PI / 2.0);
        assert_abs_diff_eq!(turned.center, Point3::new(0.0, 10.5, 0.0), epsilon = 1e-12);
        let enc = encode_box(&turned, &Point3::new(0.0, 10.0, 0.0)).unwrap();
        for (a, b) in base.0.iter().zip(&enc.0) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_encoding_collapses_to_anchor() {
        let p = Point3::new(3.0, -4.0, 1.0);
        let c = decode_box(&EncodedBox24([0.0; 24]), &p).unwrap();
        assert!(c.0.iter().all(|q| (q - p).norm() < 1e-15));
    }

    #[test]
    fn axis_aligned_params() {
        let b = example_box();
        let fit = params_from_corners(&b.corners()).unwrap();
        assert_abs_diff_eq!(fit.yaw, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.length, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.width, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.height, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn rotated_corners_give_yaw() {
        let b = Box3D::new(Point3::new(0.0, 0.0, 0.0), 4.0, 2.0, 1.5, 0.0).unwrap();
        let rot = rot_z(30f64.to_radians());
        let corners = CornerSet(b.corners().0.map(|c| Point3::from(rot * c.coords)));
        let fit = params_from_corners(&corners).unwrap();
        assert_abs_diff_eq!(fit.yaw, 30f64.to_radians(), epsilon = 1e-12);
    }

    #[test]
    fn scrambled_corners_rejected() {
        let mut c = example_box().corners();
        c.0.swap(0, 6);
        match params_from_corners(&c) {
            Err(Error::BoxFit { residual }) => assert!(residual > FIT_TOLERANCE),
            other => panic!("expected fit error, got {other:?}"),
        }
    }

    #[test]
    fn noisy_corners_fit_least_squares() {
        let b = Box3D::new(Point3::new(20.0, 5.0, -0.9), 4.2, 1.8, 1.6, 0.7).unwrap();
        let mut c = b.corners();
        let jitter = [0.05, -0.03, 0.02, -0.04, 0.01, 0.03, -0.02, 0.04];
        for (p, j) in c.0.iter_mut().zip(jitter) {
            p.x += j;
            p.y -= j;
        }
        let fit = params_from_corners(&c).unwrap();
        assert!((fit.yaw - b.yaw).abs() < 0.05);
        assert!((fit.center - b.center).norm() < 0.05);
    }

    #[test]
    fn normalize_angle_range() {
        assert_abs_diff_eq!(normalize_angle(PI), PI);
        assert_abs_diff_eq!(normalize_angle(-PI), PI);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn contains_with_margin() {
        let b = example_box();
        assert!(b.contains(&Point3::new(12.5, 1.0, 0.75), 0.0));
        assert!(!b.contains(&Point3::new(12.6, 0.0, 0.0), 0.0));
        assert!(b.contains(&Point3::new(12.6, 0.0, 0.0), 0.1 + 1e-12));
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -60.0..60.0f64,
            -60.0..60.0f64,
            -3.0..2.0f64,
            0.5..8.0f64,
            0.5..3.0f64,
            0.5..3.0f64,
            -PI..PI,
        )
            .prop_map(|(x, y, z, l, w, h, yaw)| {
                Box3D::new(Point3::new(x, y, z), l, w, h, yaw).unwrap()
            })
    }

    fn arb_anchor() -> impl Strategy<Value = Point3> {
        (-60.0..60.0f64, -60.0..60.0f64, -3.0..3.0f64)
            .prop_filter("away from origin", |(x, y, z)| x * x + y * y + z * z > 1e-2)
            .prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn basis_is_orthonormal_and_aims_at_point(p in arb_anchor()) {
            let r = observation_basis(&p).unwrap().0;
            let gram = r.transpose() * r - Matrix3::identity();
            prop_assert!(gram.amax() < 1e-12);
            prop_assert!((r * Vector3::new(p.coords.norm(), 0.0, 0.0) - p.coords).amax() < 1e-9);
            prop_assert!(r[(2, 1)].abs() < 1e-12);
        }

        #[test]
        fn decode_inverts_encode(b in arb_box(), p in arb_anchor()) {
            let enc = encode_box(&b, &p).unwrap();
            let dec = decode_box(&enc, &p).unwrap();
            prop_assert!(dec.max_distance(&b.corners()) < 1e-9);
        }

        #[test]
        fn encoding_invariant_under_z_rotation(b in arb_box(), p in arb_anchor(), a in -PI..PI) {
            let base = encode_box(&b, &p).unwrap();
            let p2 = Point3::from(rot_z(a) * p.coords);
            let rotated = encode_box(&b.rotated_about_z(a), &p2).unwrap();
            for (x, y) in base.0.iter().zip(&rotated.0) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn encoding_tracks_box_translation(
            b in arb_box(), p in arb_anchor(),
            dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in -1.0..1.0f64,
        ) {
            let delta = Vector3::new(dx, dy, dz);
            let moved = Box3D { center: b.center + delta, ..b };
            let e0 = encode_box(&b, &p).unwrap();
            let e1 = encode_box(&moved, &p).unwrap();
            let (_, phi) = observation_angles(&p);
            let change = (0..8)
                .map(|i| {
                    let d: f64 = (0..3).map(|k| (e1.0[3 * i + k] - e0.0[3 * i + k]).powi(2)).sum();
                    d.sqrt()
                })
                .fold(0.0, f64::max);
            prop_assert!(change >= delta.norm() * phi.cos() - 1e-9);
        }

        #[test]
        fn params_round_trip(b in arb_box()) {
            let fit = params_from_corners(&b.corners()).unwrap();
            prop_assert!((fit.center - b.center).norm() < 1e-9);
            prop_assert!((fit.length - b.length).abs() < 1e-9);
            prop_assert!((fit.width - b.width).abs() < 1e-9);
            prop_assert!((fit.height - b.height).abs() < 1e-9);
            prop_assert!(normalize_angle(fit.yaw - b.yaw).abs() < 1e-9);
        }
    }
}
