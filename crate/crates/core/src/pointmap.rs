//! Cylindrical projection of range scans onto a 2-channel point map.
//!
//! Rows index elevation (row 0 at `phi_min`) and columns index azimuth
//! (column 0 at `theta_min`). Each occupied cell stores the horizontal range
//! `d = sqrt(x^2 + y^2)` and the height `z` of the nearest point that falls
//! into it; empty cells hold `(0, 0)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::tensornet::{Scalar, Tensor};

pub type Point3 = nalgebra::Point3<f64>;

/// Per-point class tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointTag {
    Background,
    /// Index of the owning car in the frame's object list.
    Vehicle(u32),
    Ignore,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawScan {
    pub points: Vec<Point3>,
    pub tags: Vec<PointTag>,
}

impl RawScan {
    pub fn new(points: Vec<Point3>, tags: Vec<PointTag>) -> Result<Self> {
        if points.len() != tags.len() {
            return Err(Error::Contract(format!(
                "{} points but {} tags",
                points.len(),
                tags.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(format!("scan point {i}")));
        }
        Ok(Self { points, tags })
    }

    /// A scan where every point is background.
    pub fn untagged(points: Vec<Point3>) -> Result<Self> {
        let tags = vec![PointTag::Background; points.len()];
        Self::new(points, tags)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Azimuth and elevation of a point, in radians.
pub fn observation_angles(p: &Point3) -> (f64, f64) {
    let range = p.coords.norm();
    let theta = p.y.atan2(p.x);
    let phi = (p.z / range).clamp(-1.0, 1.0).asin();
    (theta, phi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    pub delta_theta: f64,
    pub delta_phi: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    rows: usize,
    cols: usize,
}

/// Row and column divisibility demanded by the network's total stride.
pub const ROW_MULTIPLE: usize = 8;
pub const COL_MULTIPLE: usize = 16;

fn cell_count(span: f64, step: f64) -> usize {
    // tolerate representation error in windows that are exact multiples of the step
    (span / step - 1e-9).ceil().max(0.0) as usize
}

impl ProjectionConfig {
    /// Builds a projection window. Angles are in radians.
    pub fn new(
        delta_theta: f64,
        delta_phi: f64,
        (theta_min, theta_max): (f64, f64),
        (phi_min, phi_max): (f64, f64),
    ) -> Result<Self> {
        let finite = [delta_theta, delta_phi, theta_min, theta_max, phi_min, phi_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || delta_theta <= 0.0 || delta_phi <= 0.0 {
            return Err(Error::Config("angular resolution must be positive and finite".into()));
        }
        if theta_max <= theta_min || phi_max <= phi_min {
            return Err(Error::Config("empty angular window".into()));
        }
        if theta_min < -std::f64::consts::PI || theta_max > std::f64::consts::PI {
            return Err(Error::Config("azimuth window must lie within [-pi, pi]".into()));
        }
        if phi_min < -std::f64::consts::FRAC_PI_2 || phi_max > std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config("elevation window must lie within [-pi/2, pi/2]".into()));
        }
        let rows = cell_count(phi_max - phi_min, delta_phi);
        let cols = cell_count(theta_max - theta_min, delta_theta);
        if rows == 0 || rows % ROW_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "point map has {rows} rows; must be a positive multiple of {ROW_MULTIPLE}"
            )));
        }
        if cols == 0 || cols % COL_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "point map has {cols} columns; must be a positive multiple of {COL_MULTIPLE}"
            )));
        }
        Ok(Self {
            delta_theta,
            delta_phi,
            theta_min,
            theta_max,
            phi_min,
            phi_max,
            rows,
            cols,
        })
    }

    /// Same as [`ProjectionConfig::new`] with all angles in degrees.
    pub fn from_degrees(
        delta_theta: f64,
        delta_phi: f64,
        theta: (f64, f64),
        phi: (f64, f64),
    ) -> Result<Self> {
        Self::new(
            delta_theta.to_radians(),
            delta_phi.to_radians(),
            (theta.0.to_radians(), theta.1.to_radians()),
            (phi.0.to_radians(), phi.1.to_radians()),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Cell index of a point, or `None` if it falls outside the window or
    /// sits at the origin.
    pub fn cell_of(&self, p: &Point3) -> Option<(usize, usize)> {
        if p.coords.norm_squared() == 0.0 {
            return None;
        }
        let (theta, phi) = observation_angles(p);
        let r = ((phi - self.phi_min) / self.delta_phi).floor();
        let c = ((theta - self.theta_min) / self.delta_theta).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Unit direction through the center of cell `(row, col)`.
    pub fn cell_ray(&self, row: usize, col: usize) -> Vector3<f64> {
        assert!(row < self.rows && col < self.cols, "cell ({row}, {col}) out of range");
        let theta = self.theta_min + (col as f64 + 0.5) * self.delta_theta;
        let phi = self.phi_min + (row as f64 + 0.5) * self.delta_phi;
        Vector3::new(phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin())
    }
}

impl Default for ProjectionConfig {
    /// 0.2 deg x 0.4 deg resolution over an 89.6 deg x 25.6 deg front window,
    /// giving a 64 x 448 map.
    fn default() -> Self {
        Self::from_degrees(0.2, 0.4, (-44.8, 44.8), (-23.6, 2.0))
            .expect("default projection window is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Cell {
    pub d: f64,
    pub z: f64,
    pub source: Option<usize>,
}

impl Cell {
    pub fn occupied(&self) -> bool {
        self.source.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct PointMap {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
    /// Points skipped because they sit at the sensor origin.
    pub degenerate: usize,
    /// Points dropped because they fall outside the angular window.
    pub outside: usize,
}

impl PointMap {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row * self.cols + col]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| c.occupied()).count()
    }

    /// Network input tensor `(2, H, W)` with each channel multiplied by its
    /// scale factor.
    pub fn to_tensor<T: Scalar>(&self, scale: [f64; 2]) -> Tensor<T> {
        let plane = self.rows * self.cols;
        let mut data = vec![T::zero(); 2 * plane];
        for (i, cell) in self.cells.iter().enumerate() {
            data[i] = T::of(cell.d * scale[0]);
            data[plane + i] = T::of(cell.z * scale[1]);
        }
        Tensor::from_vec(vec![2, self.rows, self.cols], data).expect("shape matches data")
    }
}

/// Projects a scan onto the point map, keeping the nearest point per cell.
/// Ties on range keep the first point seen.
pub fn project_scan(scan: &RawScan, cfg: &ProjectionConfig) -> Result<PointMap> {
    if scan.is_empty() {
        return Err(Error::EmptyScan);
    }
    let (rows, cols) = (cfg.rows(), cfg.cols());
    let mut cells = vec![Cell::default(); rows * cols];
    let mut best_range = vec![f64::INFINITY; rows * cols];
    let mut degenerate = 0;
    let mut outside = 0;
    for (i, p) in scan.points.iter().enumerate() {
        let range = p.coords.norm();
        if range == 0.0 {
            degenerate += 1;
            continue;
        }
        let Some((r, c)) = cfg.cell_of(p) else {
            outside += 1;
            continue;
        };
        let k = r * cols + c;
        if range < best_range[k] {
            best_range[k] = range;
            cells[k] = Cell {
                d: p.x.hypot(p.y),
                z: p.z,
                source: Some(i),
            };
        }
    }
    Ok(PointMap {
        rows,
        cols,
        cells,
        degenerate,
        outside,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let worst = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(worst <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (max |R^T R - I| = {worst:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidTransform(format!("rotation determinant is {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation by `angle` about +z followed by a translation.
    pub fn about_z(angle: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }
}

/// Maps every point through `t`, preserving tags.
pub fn apply_rigid_transform(scan: &RawScan, t: &RigidTransform) -> RawScan {
    RawScan {
        points: scan.points.iter().map(|p| t.apply(p)).collect(),
        tags: scan.tags.clone(),
    }
}
