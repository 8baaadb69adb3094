//! Ray-cast scene generator: car-shaped boxes and clutter on a ground plane,
//! sampled one return per point-map cell.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxcodec::Box3D;
use crate::error::{Error, Result};
use crate::evalkit::ground_iou;
use crate::kittio::{
    lidar_box_to_label, write_calib, write_labels, write_velodyne, Calibration, Frame, FrameObject, ObjectClass,
    VelodyneFrame,
};
use crate::pointmap::{Point3, PointTag, ProjectionConfig, RawScan};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub min_vehicles: usize,
    pub max_vehicles: usize,
    /// Annulus of vehicle center ranges, meters.
    pub min_range: f64,
    pub max_range: f64,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    /// Probability that a placed vehicle is a van (ignore class).
    pub van_probability: f64,
    /// Number of pole-like background obstacles.
    pub clutter: usize,
    pub ground_z: f64,
    /// Gaussian range noise, meters.
    pub noise_std: f64,
    /// Rays longer than this produce no return.
    pub max_return: f64,
    /// Free space kept between placed footprints, meters.
    pub clearance: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_vehicles: 1,
            max_vehicles: 6,
            min_range: 5.0,
            max_range: 60.0,
            length: (3.5, 5.0),
            width: (1.6, 2.0),
            height: (1.4, 1.8),
            van_probability: 0.0,
            clutter: 4,
            ground_z: -1.7,
            noise_std: 0.01,
            max_return: 120.0,
            clearance: 0.3,
        }
    }
}

/// Placement attempts per object before giving up.
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub bbox: Box3D,
    pub class: ObjectClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Labeled objects; a point's vehicle tag indexes this list.
    pub objects: Vec<SceneObject>,
    /// Unlabeled background obstacles.
    pub clutter: Vec<Box3D>,
    pub ground_z: f64,
    pub noise_std: f64,
    pub max_return: f64,
}

impl SceneSpec {
    pub fn boxes(&self) -> Vec<(Box3D, ObjectClass)> {
        self.objects.iter().map(|o| (o.bbox, o.class)).collect()
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn inside_azimuth(b: &Box3D, proj: &ProjectionConfig) -> bool {
    b.footprint().iter().all(|c| {
        let t = c.y.atan2(c.x);
        t > proj.theta_min && t < proj.theta_max
    })
}

fn grown(b: &Box3D, by: f64) -> Box3D {
    Box3D {
        length: b.length + by,
        width: b.width + by,
        ..*b
    }
}

/// Samples a box on the ground with its center uniform over the annulus
/// sector visible in the projection window.
fn place<R: Rng>(
    rng: &mut R,
    cfg: &SynthConfig,
    proj: &ProjectionConfig,
    dims: (f64, f64, f64),
    taken: &[Box3D],
) -> Result<Box3D> {
    let (l, w, h) = dims;
    for _ in 0..MAX_ATTEMPTS {
        // uniform in area: radius from the square-root law
        let r2 = uniform(rng, (cfg.min_range * cfg.min_range, cfg.max_range * cfg.max_range));
        let r = r2.sqrt();
        let theta = uniform(rng, (proj.theta_min, proj.theta_max));
        let yaw = uniform(rng, (-PI, PI));
        let center = Point3::new(r * theta.cos(), r * theta.sin(), cfg.ground_z + h / 2.0);
        let b = Box3D::new(center, l, w, h, yaw)?;
        if !inside_azimuth(&b, proj) {
            continue;
        }
        let g = grown(&b, 2.0 * cfg.clearance);
        if taken.iter().any(|t| ground_iou(&g, &grown(t, 2.0 * cfg.clearance)) > 0.0) {
            continue;
        }
        return Ok(b);
    }
    Err(Error::Placement(MAX_ATTEMPTS))
}

pub fn generate_scene<R: Rng>(cfg: &SynthConfig, proj: &ProjectionConfig, rng: &mut R) -> Result<SceneSpec> {
    if cfg.min_vehicles > cfg.max_vehicles || !(cfg.min_range > 0.0 && cfg.max_range >= cfg.min_range) {
        return Err(Error::Config("synthetic scene counts or ranges out of order".into()));
    }
    let n = rng.random_range(cfg.min_vehicles..=cfg.max_vehicles);
    let mut taken: Vec<Box3D> = Vec::new();
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let van = cfg.van_probability > 0.0 && rng.random_bool(cfg.van_probability.min(1.0));
        let dims = if van {
            (uniform(rng, (4.8, 6.0)), uniform(rng, (1.9, 2.2)), uniform(rng, (2.0, 2.6)))
        } else {
            (uniform(rng, cfg.length), uniform(rng, cfg.width), uniform(rng, cfg.height))
        };
        let b = place(rng, cfg, proj, dims, &taken)?;
        taken.push(b);
        objects.push(SceneObject {
            bbox: b,
            class: if van { ObjectClass::Ignore } else { ObjectClass::Car },
        });
    }
    let mut clutter = Vec::with_capacity(cfg.clutter);
    for _ in 0..cfg.clutter {
        let side = uniform(rng, (0.2, 0.6));
        let dims = (side, side, uniform(rng, (1.0, 3.0)));
        let b = place(rng, cfg, proj, dims, &taken)?;
        taken.push(b);
        clutter.push(b);
    }
    Ok(SceneSpec {
        objects,
        clutter,
        ground_z: cfg.ground_z,
        noise_std: cfg.noise_std,
        max_return: cfg.max_return,
    })
}

/// Entry distance of a ray from the origin into a box, by the slab method
/// in the box frame.
pub fn ray_box_intersection(dir: &Vector3<f64>, b: &Box3D) -> Option<f64> {
    let rt = b.rotation().transpose();
    let o = rt * (-b.center.coords);
    let d = rt * dir;
    let half = [b.length / 2.0, b.width / 2.0, b.height / 2.0];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let c = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Range at which a ray meets the plane `z = ground_z` below the sensor.
pub fn ray_ground_intersection(dir: &Vector3<f64>, ground_z: f64) -> Option<f64> {
    (dir.z < 0.0 && ground_z < 0.0).then(|| ground_z / dir.z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScan {
    pub scan: RawScan,
    /// Originating cell of each point.
    pub cells: Vec<(usize, usize)>,
    /// Points per object that reached the sensor.
    pub visible: Vec<usize>,
    /// Rays per object that would hit it with no other object present.
    pub unoccluded: Vec<usize>,
}

impl SynthScan {
    /// KITTI-style occlusion level per object from its visible fraction:
    /// 0 above 80%, 1 above 40%, 2 if any return is left, 3 for none.
    pub fn occlusion_levels(&self) -> Vec<i32> {
        self.visible
            .iter()
            .zip(&self.unoccluded)
            .map(|(&v, &u)| {
                let frac = if u == 0 { 0.0 } else { v as f64 / u as f64 };
                if v == 0 {
                    3
                } else if frac > 0.8 {
                    0
                } else if frac > 0.4 {
                    1
                } else {
                    2
                }
            })
            .collect()
    }
}

/// Casts one ray per cell and keeps the nearest hit among objects, clutter
/// and ground.
pub fn raycast_scan<R: Rng>(scene: &SceneSpec, proj: &ProjectionConfig, rng: &mut R) -> Result<SynthScan> {
    let noise = if scene.noise_std > 0.0 {
        Some(Normal::new(0.0, scene.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut points = Vec::new();
    let mut tags = Vec::new();
    let mut cells = Vec::new();
    let mut visible = vec![0; scene.objects.len()];
    let mut unoccluded = vec![0; scene.objects.len()];
    for r in 0..proj.rows() {
        for c in 0..proj.cols() {
            let dir = proj.cell_ray(r, c);
            let mut best: Option<(f64, PointTag, Option<usize>)> =
                ray_ground_intersection(&dir, scene.ground_z).map(|t| (t, PointTag::Background, None));
            for (i, o) in scene.objects.iter().enumerate() {
                if let Some(t) = ray_box_intersection(&dir, &o.bbox) {
                    unoccluded[i] += 1;
                    if best.is_none_or(|(bt, _, _)| t < bt) {
                        let tag = match o.class {
                            ObjectClass::Car => PointTag::Vehicle(i as u32),
                            ObjectClass::Ignore => PointTag::Ignore,
                            ObjectClass::Background => PointTag::Background,
                        };
                        best = Some((t, tag, Some(i)));
                    }
                }
            }
            for b in &scene.clutter {
                if let Some(t) = ray_box_intersection(&dir, b) {
                    if best.is_none_or(|(bt, _, _)| t < bt) {
                        best = Some((t, PointTag::Background, None));
                    }
                }
            }
            let Some((t, tag, obj)) = best else { continue };
            if t > scene.max_return {
                continue;
            }
            let range = match &noise {
                Some(n) => (t + n.sample(rng)).max(1e-3),
                None => t,
            };
            if let Some(i) = obj {
                visible[i] += 1;
            }
            points.push(Point3::from(dir * range));
            tags.push(tag);
            cells.push((r, c));
        }
    }
    Ok(SynthScan {
        scan: RawScan::new(points, tags)?,
        cells,
        visible,
        unoccluded,
    })
}

/// A generated frame: scene plus its scan.
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub scene: SceneSpec,
    pub scan: SynthScan,
}

pub fn generate_frame<R: Rng>(cfg: &SynthConfig, proj: &ProjectionConfig, rng: &mut R) -> Result<SynthFrame> {
    let scene = generate_scene(cfg, proj, rng)?;
    let scan = raycast_scan(&scene, proj, rng)?;
    Ok(SynthFrame { scene, scan })
}

/// Frames `0..count`, frame `i` drawn from stream `i` of `seed` so it does
/// not depend on how many frames precede it.
pub fn generate_frames(
    cfg: &SynthConfig,
    proj: &ProjectionConfig,
    seed: u64,
    count: usize,
) -> Result<Vec<SynthFrame>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_frame(cfg, proj, &mut rng)
        })
        .collect()
}

impl SynthFrame {
    /// The frame as it would load from disk, but with exact point tags.
    pub fn to_frame(&self, id: &str, calib: &Calibration) -> Frame {
        let objects = self
            .scene
            .objects
            .iter()
            .zip(self.scan.occlusion_levels())
            .map(|(o, occ)| {
                let name = if o.class == ObjectClass::Car { "Car" } else { "Van" };
                let mut label = lidar_box_to_label(&o.bbox, name, calib);
                label.occlusion = occ;
                FrameObject {
                    bbox: o.bbox,
                    class: o.class,
                    label,
                }
            })
            .collect();
        Frame {
            id: id.to_string(),
            scan: self.scan.scan.clone(),
            objects,
            calib: calib.clone(),
        }
    }
}

/// File stem of frame `i`.
pub fn frame_id(i: usize) -> String {
    format!("{i:06}")
}

/// Writes frames in KITTI layout (`velodyne/`, `label_2/`, `calib/`) plus a
/// `manifest.txt` listing frame ids.
pub fn write_dataset(frames: &[SynthFrame], dir: &Path, calib: &Calibration) -> Result<()> {
    for sub in ["velodyne", "label_2", "calib"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for (i, f) in frames.iter().enumerate() {
        let id = frame_id(i);
        let velo = VelodyneFrame {
            points: f
                .scan
                .scan
                .points
                .iter()
                .map(|p| [p.x as f32, p.y as f32, p.z as f32, 0.0])
                .collect(),
        };
        write_velodyne(&velo, &dir.join("velodyne").join(format!("{id}.bin")))?;
        let occlusion = f.scan.occlusion_levels();
        let labels: Vec<_> = f
            .scene
            .objects
            .iter()
            .zip(occlusion)
            .map(|(o, occ)| {
                let name = if o.class == ObjectClass::Car { "Car" } else { "Van" };
                let mut l = lidar_box_to_label(&o.bbox, name, calib);
                l.occlusion = occ;
                l
            })
            .collect();
        write_labels(&labels, &dir.join("label_2").join(format!("{id}.txt")))?;
        write_calib(calib, &dir.join("calib").join(format!("{id}.txt")))?;
        let _ = writeln!(manifest, "{id}");
    }
    let p = dir.join("manifest.txt");
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}
