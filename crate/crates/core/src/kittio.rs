//! KITTI object-benchmark file formats: Velodyne scans, `label_2` object
//! labels and `calib` files, plus camera/lidar box conversion.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::boxcodec::{normalize_angle, Box3D};
use crate::error::{Error, Result};
use crate::evalkit::{assign_difficulty, DifficultyConfig, GroundTruthObject, Rect};
use crate::pointmap::{Point3, RawScan};
use crate::trainer::tag_points;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VelodyneFrame {
    /// `(x, y, z, reflectance)` per return.
    pub points: Vec<[f32; 4]>,
}

impl VelodyneFrame {
    pub fn positions(&self) -> Vec<Point3> {
        self.points
            .iter()
            .map(|p| Point3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() % 16 != 0 {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("{} bytes is not a whole number of 16-byte points", bytes.len()),
            });
        }
        let points = bytes
            .chunks_exact(16)
            .map(|c| std::array::from_fn(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap())))
            .collect();
        Ok(Self { points })
    }
}

pub fn read_velodyne(path: &Path) -> Result<VelodyneFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    VelodyneFrame::from_bytes(&bytes, path)
}

pub fn write_velodyne(frame: &VelodyneFrame, path: &Path) -> Result<()> {
    fs::write(path, frame.to_bytes()).map_err(|e| Error::io(path, e))
}

/// How a KITTI category takes part in training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Car,
    /// Vans, trucks and `DontCare` regions: excluded from losses and metrics.
    Ignore,
    Background,
}

impl ObjectClass {
    pub fn from_kitti(name: &str) -> Self {
        match name {
            "Car" => ObjectClass::Car,
            "Van" | "Truck" | "DontCare" => ObjectClass::Ignore,
            _ => ObjectClass::Background,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub rect: Rect,
    /// Height, width, length in meters.
    pub dimensions: [f64; 3],
    /// Bottom center in rectified camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiLabel {
    pub fn object_class(&self) -> ObjectClass {
        ObjectClass::from_kitti(&self.class)
    }

    pub fn is_dont_care(&self) -> bool {
        self.class == "DontCare"
    }

    pub fn to_line(&self) -> String {
        let [h, w, l] = self.dimensions;
        let [x, y, z] = self.location;
        let r = &self.rect;
        let mut s = format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.class,
            self.truncation,
            self.occlusion,
            self.alpha,
            r.x1,
            r.y1,
            r.x2,
            r.y2,
            h,
            w,
            l,
            x,
            y,
            z,
            self.rotation_y
        );
        if let Some(sc) = self.score {
            let _ = write!(s, " {sc}");
        }
        s
    }
}

fn parse_f64(tok: &str, path: &Path, line: usize, what: &str) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("bad {what} `{tok}`"),
    })
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<KittiLabel>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 15 && toks.len() != 16 {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: format!("expected 15 or 16 fields, found {}", toks.len()),
            });
        }
        let f = |k: usize, what: &str| parse_f64(toks[k], path, line, what);
        let occlusion = toks[2].parse::<i32>().map_err(|_| Error::Parse {
            path: path.into(),
            line,
            msg: format!("bad occlusion `{}`", toks[2]),
        })?;
        let rect = Rect {
            x1: f(4, "bbox")?,
            y1: f(5, "bbox")?,
            x2: f(6, "bbox")?,
            y2: f(7, "bbox")?,
        };
        let label = KittiLabel {
            class: toks[0].to_string(),
            truncation: f(1, "truncation")?,
            occlusion,
            alpha: f(3, "alpha")?,
            rect,
            dimensions: [f(8, "height")?, f(9, "width")?, f(10, "length")?],
            location: [f(11, "location")?, f(12, "location")?, f(13, "location")?],
            rotation_y: f(14, "rotation_y")?,
            score: if toks.len() == 16 { Some(f(15, "score")?) } else { None },
        };
        let bad = |msg: &str| Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        };
        if rect.x2 < rect.x1 || rect.y2 < rect.y1 {
            return Err(bad("bbox corners out of order"));
        }
        if !label.is_dont_care() && label.dimensions.iter().any(|d| *d <= 0.0) {
            return Err(bad("non-positive dimensions"));
        }
        out.push(label);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<KittiLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn write_labels(labels: &[KittiLabel], path: &Path) -> Result<()> {
    let mut s = String::new();
    for l in labels {
        s.push_str(&l.to_line());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub p2: Matrix3x4<f64>,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-3;

fn orthonormal(m: &Matrix3<f64>) -> bool {
    (m.transpose() * m - Matrix3::identity()).abs().max() <= ORTHONORMAL_TOL
}

impl Calibration {
    pub fn new(p2: Matrix3x4<f64>, r0_rect: Matrix3<f64>, tr_velo_to_cam: Matrix3x4<f64>) -> Result<Self> {
        if !orthonormal(&r0_rect) {
            return Err(Error::Calibration("R0_rect is not orthonormal".into()));
        }
        if !orthonormal(&tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned()) {
            return Err(Error::Calibration("Tr_velo_to_cam rotation is not orthonormal".into()));
        }
        Ok(Self {
            p2,
            r0_rect,
            tr_velo_to_cam,
        })
    }

    /// Camera at the lidar origin looking along +x with KITTI axis
    /// conventions (x right, y down, z forward) and KITTI-like intrinsics.
    pub fn synthetic() -> Self {
        let tr = Matrix3x4::new(0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        let p2 = Matrix3x4::new(721.5377, 0.0, 609.5593, 0.0, 0.0, 721.5377, 172.854, 0.0, 0.0, 0.0, 1.0, 0.0);
        Self::new(p2, Matrix3::identity(), tr).expect("synthetic calibration is valid")
    }

    /// Lidar point to rectified camera coordinates.
    pub fn velo_to_rect(&self, p: &Point3) -> Vector3<f64> {
        self.r0_rect * (self.tr_velo_to_cam * Vector4::new(p.x, p.y, p.z, 1.0))
    }

    pub fn rect_to_velo(&self, q: &Vector3<f64>) -> Result<Point3> {
        let r0_inv = self
            .r0_rect
            .try_inverse()
            .ok_or_else(|| Error::Calibration("R0_rect is singular".into()))?;
        let rot = self.tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let t = self.tr_velo_to_cam.column(3).into_owned();
        let rot_inv = rot
            .try_inverse()
            .ok_or_else(|| Error::Calibration("Tr_velo_to_cam is singular".into()))?;
        Ok(Point3::from(rot_inv * (r0_inv * q - t)))
    }

    /// Pixel coordinates of a rectified camera point.
    pub fn project_rect(&self, q: &Vector3<f64>) -> (f64, f64) {
        let h = self.p2 * Vector4::new(q.x, q.y, q.z, 1.0);
        (h.x / h.z, h.y / h.z)
    }

    pub fn to_text(&self) -> String {
        let join = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        // KITTI stores matrices row-major
        let p2 = join(&mut self.p2.transpose().iter().copied());
        let r0 = join(&mut self.r0_rect.transpose().iter().copied());
        let tr = join(&mut self.tr_velo_to_cam.transpose().iter().copied());
        format!("P2: {p2}\nR0_rect: {r0}\nTr_velo_to_cam: {tr}\n")
    }
}

pub fn parse_calib(text: &str, path: &Path) -> Result<Calibration> {
    let mut entries: HashMap<&str, (usize, Vec<f64>)> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (key, rest) = raw.split_once(':').ok_or_else(|| Error::Parse {
            path: path.into(),
            line,
            msg: "expected `KEY: values`".into(),
        })?;
        let vals = rest
            .split_whitespace()
            .map(|t| parse_f64(t, path, line, "value"))
            .collect::<Result<Vec<_>>>()?;
        entries.insert(key.trim(), (line, vals));
    }
    let get = |key: &str, n: usize| -> Result<Vec<f64>> {
        let (line, vals) = entries.get(key).ok_or_else(|| Error::Format {
            path: path.into(),
            msg: format!("missing {key}"),
        })?;
        if vals.len() != n {
            return Err(Error::Parse {
                path: path.into(),
                line: *line,
                msg: format!("{key} needs {n} values, found {}", vals.len()),
            });
        }
        Ok(vals.clone())
    };
    let p2 = Matrix3x4::from_row_slice(&get("P2", 12)?);
    let r0 = Matrix3::from_row_slice(&get("R0_rect", 9)?);
    let tr = Matrix3x4::from_row_slice(&get("Tr_velo_to_cam", 12)?);
    Calibration::new(p2, r0, tr).map_err(|e| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub fn read_calib(path: &Path) -> Result<Calibration> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calib(&text, path)
}

pub fn write_calib(calib: &Calibration, path: &Path) -> Result<()> {
    fs::write(path, calib.to_text()).map_err(|e| Error::io(path, e))
}

/// Sensor-frame box of a camera-frame label. The label's bottom-center
/// location is lifted by half the height along camera -y.
pub fn label_to_lidar_box(label: &KittiLabel, calib: &Calibration) -> Result<Box3D> {
    if label.is_dont_care() {
        return Err(Error::InvalidBox("DontCare labels carry no 3D box".into()));
    }
    let [h, w, l] = label.dimensions;
    let [x, y, z] = label.location;
    let center = calib.rect_to_velo(&Vector3::new(x, y - h / 2.0, z))?;
    Box3D::new(center, l, w, h, -label.rotation_y - FRAC_PI_2)
}

/// Inverse of [`label_to_lidar_box`]. The 2D rectangle is the box's image
/// projection, or all `-1` if any corner is behind the camera.
pub fn lidar_box_to_label(b: &Box3D, class: &str, calib: &Calibration) -> KittiLabel {
    let c = calib.velo_to_rect(&b.center);
    let location = [c.x, c.y + b.height / 2.0, c.z];
    let rotation_y = normalize_angle(-b.yaw - FRAC_PI_2);
    let alpha = normalize_angle(rotation_y - c.x.atan2(c.z));
    let rect = project_box_to_image(b, calib).unwrap_or(Rect {
        x1: -1.0,
        y1: -1.0,
        x2: -1.0,
        y2: -1.0,
    });
    KittiLabel {
        class: class.to_string(),
        truncation: 0.0,
        occlusion: 0,
        alpha,
        rect,
        dimensions: [b.height, b.width, b.length],
        location,
        rotation_y,
        score: None,
    }
}

/// Minimum depth in front of the camera for a corner to be projected.
pub const MIN_DEPTH: f64 = 0.1;

pub fn project_box_to_image(b: &Box3D, calib: &Calibration) -> Result<Rect> {
    let mut rect = Rect {
        x1: f64::INFINITY,
        y1: f64::INFINITY,
        x2: f64::NEG_INFINITY,
        y2: f64::NEG_INFINITY,
    };
    for c in b.corners().0 {
        let q = calib.velo_to_rect(&c);
        if q.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { depth: q.z });
        }
        let (u, v) = calib.project_rect(&q);
        rect.x1 = rect.x1.min(u);
        rect.y1 = rect.y1.min(v);
        rect.x2 = rect.x2.max(u);
        rect.y2 = rect.y2.max(v);
    }
    Ok(rect)
}

/// One labeled object of a frame in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObject {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub label: KittiLabel,
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub scan: RawScan,
    pub objects: Vec<FrameObject>,
    pub calib: Calibration,
}

impl Frame {
    pub fn boxes(&self) -> Vec<(Box3D, ObjectClass)> {
        self.objects.iter().map(|o| (o.bbox, o.class)).collect()
    }

    /// Evaluation objects with difficulty bins. Image rectangles come from
    /// the labels and are clipped when `image_size` is given.
    pub fn groundtruth(&self, cfg: &DifficultyConfig, image_size: Option<(f64, f64)>) -> Vec<GroundTruthObject> {
        self.objects
            .iter()
            .map(|o| {
                let valid = o.label.rect.x2 > o.label.rect.x1;
                let rect = valid.then(|| match image_size {
                    Some((w, h)) => o.label.rect.clip(w, h),
                    None => o.label.rect,
                });
                GroundTruthObject {
                    bbox: o.bbox,
                    class: o.class,
                    difficulty: assign_difficulty(&o.bbox, rect.as_ref(), Some(o.label.occlusion), cfg),
                    rect,
                }
            })
            .collect()
    }
}

/// Slack when assigning lidar points to the labeled box that contains them.
pub const TAG_MARGIN: f64 = 0.05;

/// KITTI directory layout rooted at `root`: `velodyne/`, `label_2/`, `calib/`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let dir = root.join("velodyne");
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut ids = Vec::new();
        for e in entries {
            let e = e.map_err(|e| Error::io(&dir, e))?;
            let name = e.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".bin") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(Self {
            root: root.to_path_buf(),
            ids,
        })
    }

    pub fn velodyne_path(&self, id: &str) -> PathBuf {
        self.root.join("velodyne").join(format!("{id}.bin"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{id}.txt"))
    }

    pub fn calib_path(&self, id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{id}.txt"))
    }

    /// Loads a frame; points are tagged by the labeled boxes containing them.
    /// A missing label file means an unlabeled frame.
    pub fn load(&self, id: &str) -> Result<Frame> {
        let velo = read_velodyne(&self.velodyne_path(id))?;
        let calib = read_calib(&self.calib_path(id))?;
        let label_path = self.label_path(id);
        let labels = if label_path.exists() {
            read_labels(&label_path)?
        } else {
            Vec::new()
        };
        let mut objects = Vec::new();
        for label in labels {
            if label.is_dont_care() {
                continue;
            }
            let bbox = label_to_lidar_box(&label, &calib)?;
            objects.push(FrameObject {
                bbox,
                class: label.object_class(),
                label,
            });
        }
        let points = velo.positions();
        let boxes: Vec<_> = objects.iter().map(|o| (o.bbox, o.class)).collect();
        let tags = tag_points(&points, &boxes, TAG_MARGIN);
        let scan = RawScan::new(points, tags).map_err(|e| Error::Format {
            path: self.velodyne_path(id),
            msg: e.to_string(),
        })?;
        Ok(Frame {
            id: id.to_string(),
            scan,
            objects,
            calib,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIXTURE: &str = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n\
Van 0.12 1 1.23 100.5 150.25 200.75 250.0 2.2 1.9 5.1 3.5 1.6 20.25 0.5 0.87\n\
DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n";

    fn identity_calib() -> Calibration {
        let id34 = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        Calibration::new(id34, Matrix3::identity(), id34).unwrap()
    }

    #[test]
    fn velodyne_fixture() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        fs::write(&path, &bytes).unwrap();
        let f = read_velodyne(&path).unwrap();
        assert_eq!(f.points, vec![[1.0, 2.0, 3.0, 0.5], [4.0, 5.0, 6.0, 0.1]]);

        fs::write(&path, []).unwrap();
        assert!(read_velodyne(&path).unwrap().points.is_empty());

        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        let err = read_velodyne(&path).unwrap_err();
        assert!(err.to_string().contains("33 bytes"), "{err}");
    }

    #[test]
    fn label_fixture_fields() {
        let labels = parse_labels(FIXTURE, Path::new("x.txt")).unwrap();
        assert_eq!(labels.len(), 3);
        let car = &labels[0];
        assert_eq!(car.class, "Car");
        assert_eq!(car.occlusion, 0);
        assert_eq!(car.alpha, -1.58);
        assert_eq!(car.rect, Rect { x1: 587.01, y1: 173.33, x2: 614.12, y2: 200.12 });
        assert_eq!(car.dimensions, [1.65, 1.67, 3.64]);
        assert_eq!(car.location, [-0.65, 1.71, 46.70]);
        assert_eq!(car.rotation_y, -1.59);
        assert_eq!(car.score, None);
        assert_eq!(labels[1].score, Some(0.87));
        assert_eq!(labels[1].object_class(), ObjectClass::Ignore);
        assert_eq!(ObjectClass::from_kitti("Pedestrian"), ObjectClass::Background);
        assert!(labels[2].is_dont_care());
    }

    #[test]
    fn label_field_count_error_has_line() {
        let text = "Car 0 0 0 1 1 2 2 1 1 1 0 0 10 0\nCar 0 0 0 1 1 2 2 1 1 1 0 0 10\n";
        match parse_labels(text, Path::new("l.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn calib_missing_p2() {
        let text = "R0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        let err = parse_calib(text, Path::new("c.txt")).unwrap_err();
        assert!(err.to_string().contains("P2"), "{err}");
    }

    #[test]
    fn calib_wrong_count_has_line() {
        let text = "P2: 1 2 3\n";
        assert!(matches!(parse_calib(text, Path::new("c.txt")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn calib_round_trip() {
        let c = Calibration::synthetic();
        let back = parse_calib(&c.to_text(), Path::new("c.txt")).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn identity_calibration_label() {
        // with an identity chain the camera y axis is the sensor y axis,
        // so the lift by h/2 along camera -y lands on sensor y
        let label = KittiLabel {
            class: "Car".into(),
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            rect: Rect { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 },
            dimensions: [2.0, 1.8, 4.0],
            location: [0.0, 0.0, 10.0],
            rotation_y: 0.0,
            score: None,
        };
        let b = label_to_lidar_box(&label, &identity_calib()).unwrap();
        assert_eq!(b.center, Point3::new(0.0, -1.0, 10.0));
        assert!((b.yaw + FRAC_PI_2).abs() < 1e-12);
        assert_eq!((b.length, b.width, b.height), (4.0, 1.8, 2.0));
        let back = lidar_box_to_label(&b, "Car", &identity_calib());
        assert_eq!(back.location, label.location);
        assert!(back.rotation_y.abs() < 1e-12);
    }

    #[test]
    fn synthetic_calibration_label() {
        // camera 10 m ahead of the sensor, box on the camera's optical axis
        let label = KittiLabel {
            class: "Car".into(),
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            rect: Rect { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 },
            dimensions: [2.0, 1.8, 4.0],
            location: [0.0, 0.0, 10.0],
            rotation_y: 0.0,
            score: None,
        };
        let b = label_to_lidar_box(&label, &Calibration::synthetic()).unwrap();
        assert!((b.center - Point3::new(10.0, 0.0, 1.0)).norm() < 1e-12);
        // rotation_y = 0 faces camera +x, which is sensor -y
        assert!((b.yaw + FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn dont_care_rejected() {
        let labels = parse_labels(FIXTURE, Path::new("x.txt")).unwrap();
        assert!(label_to_lidar_box(&labels[2], &identity_calib()).is_err());
    }

    #[test]
    fn pinhole_projection() {
        let calib = identity_calib();
        let b = Box3D::new(Point3::new(0.0, 0.0, 10.0), 2.0, 2.0, 1e-9, 0.0).unwrap();
        let r = project_box_to_image(&b, &calib).unwrap();
        assert!((r.x1 + 0.1).abs() < 1e-9 && (r.x2 - 0.1).abs() < 1e-9);
        let behind = Box3D::new(Point3::new(0.0, 0.0, -5.0), 2.0, 2.0, 1.0, 0.0).unwrap();
        assert!(matches!(project_box_to_image(&behind, &calib), Err(Error::BehindCamera { .. })));
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (5.0..60.0f64, -20.0..20.0f64, -2.0..1.0f64, 1.0..6.0f64, 1.0..3.0f64, 1.0..3.0f64, -3.2..3.2f64)
            .prop_map(|(x, y, z, l, w, h, yaw)| Box3D::new(Point3::new(x, y, z), l, w, h, yaw).unwrap())
    }

    proptest! {
        #[test]
        fn lidar_camera_round_trip(b in arb_box()) {
            let calib = Calibration::synthetic();
            let label = lidar_box_to_label(&b, "Car", &calib);
            let back = label_to_lidar_box(&label, &calib).unwrap();
            prop_assert!((back.center - b.center).norm() < 1e-6);
            prop_assert!(normalize_angle(back.yaw - b.yaw).abs() < 1e-9);
            prop_assert!((back.length - b.length).abs() < 1e-12);
        }

        #[test]
        fn label_text_round_trip(b in arb_box(), occ in 0..3i32) {
            let calib = Calibration::synthetic();
            let mut label = lidar_box_to_label(&b, "Car", &calib);
            label.occlusion = occ;
            let parsed = parse_labels(&label.to_line(), Path::new("x")).unwrap();
            prop_assert_eq!(&parsed[0], &label);
        }

        #[test]
        fn rect_grows_with_extent(b in arb_box(), grow in 1.0..2.0f64) {
            let calib = Calibration::synthetic();
            let big = Box3D { length: b.length * grow, width: b.width * grow, height: b.height * grow, ..b };
            if let (Ok(r), Ok(rb)) = (project_box_to_image(&b, &calib), project_box_to_image(&big, &calib)) {
                prop_assert!(rb.x1 <= r.x1 + 1e-9 && rb.y1 <= r.y1 + 1e-9);
                prop_assert!(rb.x2 >= r.x2 - 1e-9 && rb.y2 >= r.y2 - 1e-9);
            }
        }
    }
}
