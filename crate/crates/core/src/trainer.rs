//! Per-cell labels, the reweighted two-task loss, augmentation and the SGD
//! training loop.

use std::io::Write;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxcodec::{encode_box, Box3D, EncodedBox24};
use crate::error::{Error, Result};
use crate::kittio::ObjectClass;
use crate::pointmap::{apply_rigid_transform, project_scan, Point3, PointMap, PointTag, ProjectionConfig, RawScan, RigidTransform};
use crate::tensornet::gradcheck::HeadObjective;
use crate::tensornet::{backward, forward, Heads, NetworkSpec, Parameters, Optimizer, OptimizerKind, Scalar, Tensor};

/// Tags every point by the labeled box containing it. Car boxes take
/// precedence over ignore-class boxes; a car tag carries the index of its
/// box in `boxes`.
pub fn tag_points(points: &[Point3], boxes: &[(Box3D, ObjectClass)], margin: f64) -> Vec<PointTag> {
    points
        .iter()
        .map(|p| {
            let car = boxes
                .iter()
                .position(|(b, c)| *c == ObjectClass::Car && b.contains(p, margin));
            if let Some(i) = car {
                PointTag::Vehicle(i as u32)
            } else if boxes
                .iter()
                .any(|(b, c)| *c == ObjectClass::Ignore && b.contains(p, margin))
            {
                PointTag::Ignore
            } else {
                PointTag::Background
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LabelMap {
    rows: usize,
    cols: usize,
    pub occupied: Vec<bool>,
    /// Objectness label per cell.
    pub labels: Vec<u8>,
    pub ignore: Vec<bool>,
    pub vehicle: Vec<Option<u32>>,
    /// Occupied cell count of the cell's vehicle; 0 off vehicles.
    pub counts: Vec<u32>,
    pub targets: Vec<Option<EncodedBox24>>,
    /// Car boxes that received no cells.
    pub empty_vehicles: Vec<u32>,
}

impl LabelMap {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Whether the cell takes part in the loss.
    pub fn in_loss(&self, i: usize) -> bool {
        self.occupied[i] && !self.ignore[i]
    }

    pub fn num_points(&self) -> usize {
        (0..self.labels.len()).filter(|&i| self.in_loss(i)).count()
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == 1).count()
    }

    /// `(vehicle id, cell count)` of every vehicle with at least one cell.
    pub fn vehicle_counts(&self) -> Vec<(u32, u32)> {
        let mut out: Vec<(u32, u32)> = Vec::new();
        for (v, n) in self.vehicle.iter().zip(&self.counts) {
            if let Some(id) = v {
                if !out.iter().any(|(o, _)| o == id) {
                    out.push((*id, *n));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Labels each occupied cell from the tag of its source point.
pub fn build_labels(scan: &RawScan, boxes: &[(Box3D, ObjectClass)], map: &PointMap) -> Result<LabelMap> {
    let n = map.rows() * map.cols();
    let mut lm = LabelMap {
        rows: map.rows(),
        cols: map.cols(),
        occupied: vec![false; n],
        labels: vec![0; n],
        ignore: vec![false; n],
        vehicle: vec![None; n],
        counts: vec![0; n],
        targets: vec![None; n],
        empty_vehicles: Vec::new(),
    };
    let mut per_vehicle = vec![0u32; boxes.len()];
    for (i, cell) in map.cells().iter().enumerate() {
        let Some(src) = cell.source else { continue };
        lm.occupied[i] = true;
        let p = scan.points.get(src).ok_or_else(|| Error::Contract(format!("cell source {src} not in scan")))?;
        match scan.tags[src] {
            PointTag::Vehicle(id) => {
                let (b, class) = boxes
                    .get(id as usize)
                    .ok_or_else(|| Error::Contract(format!("vehicle tag {id} has no box")))?;
                if *class != ObjectClass::Car {
                    return Err(Error::Contract(format!("vehicle tag {id} points at a non-car box")));
                }
                lm.labels[i] = 1;
                lm.vehicle[i] = Some(id);
                lm.targets[i] = Some(encode_box(b, p)?);
                per_vehicle[id as usize] += 1;
            }
            PointTag::Ignore => lm.ignore[i] = true,
            PointTag::Background => {}
        }
    }
    for (v, n) in lm.vehicle.iter().zip(lm.counts.iter_mut()) {
        if let Some(id) = v {
            *n = per_vehicle[*id as usize];
        }
    }
    lm.empty_vehicles = boxes
        .iter()
        .enumerate()
        .filter(|(i, (_, c))| *c == ObjectClass::Car && per_vehicle[*i] == 0)
        .map(|(i, _)| i as u32)
        .collect();
    Ok(lm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Negatives carry as much total weight as `k` times the positives.
    pub k: f64,
    pub w_box: f64,
    /// Mean number of cells per vehicle over the dataset.
    pub n_bar: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k: 4.0,
            w_box: 0.05,
            n_bar: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.w_box >= 0.0 && self.n_bar > 0.0) {
            return Err(Error::Config(format!(
                "loss needs k > 0, w_box >= 0, n_bar > 0 (got {}, {}, {})",
                self.k, self.w_box, self.n_bar
            )));
        }
        Ok(())
    }
}

/// `-log softmax(logits)[label]`.
pub fn objectness_loss(logits: [f64; 2], label: u8) -> f64 {
    let x = logits[1 - label as usize] - logits[label as usize];
    // softplus(x), accurate for large |x|
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn box_loss(output: &[f64; 24], target: &EncodedBox24) -> f64 {
    output.iter().zip(&target.0).map(|(o, t)| (o - t) * (o - t)).sum()
}

/// Per-cell weights; cells outside the loss carry zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    /// Class balance weight.
    pub w1: Vec<f64>,
    /// Vehicle size weight.
    pub w2: Vec<f64>,
}

pub fn sample_weights(labels: &LabelMap, cfg: &LossConfig) -> Result<SampleWeights> {
    cfg.validate()?;
    let n = labels.labels.len();
    let points = labels.num_points();
    let positives = labels.num_positive();
    if positives > 0 && positives == points {
        return Err(Error::Contract("every labeled cell is positive; no background to balance".into()));
    }
    let neg_w1 = if positives > 0 {
        cfg.k * positives as f64 / (points - positives) as f64
    } else if points > 0 {
        cfg.k * cfg.n_bar / points as f64
    } else {
        0.0
    };
    let mut w = SampleWeights {
        w1: vec![0.0; n],
        w2: vec![0.0; n],
    };
    for i in 0..n {
        if !labels.in_loss(i) {
            continue;
        }
        if labels.labels[i] == 1 {
            w.w1[i] = 1.0;
            w.w2[i] = cfg.n_bar / labels.counts[i] as f64;
        } else {
            w.w1[i] = neg_w1;
            w.w2[i] = 1.0;
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Weighted objectness sum.
    pub objectness: f64,
    /// Weighted box sum, already multiplied by `w_box`.
    pub boxes: f64,
    pub total: f64,
}

/// Weighted loss over the map and its gradients with respect to both heads.
pub fn total_loss<T: Scalar>(
    heads: &Heads<T>,
    labels: &LabelMap,
    weights: &SampleWeights,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor<T>, Tensor<T>)> {
    let (h, w) = (labels.rows, labels.cols);
    let plane = h * w;
    if heads.objectness.shape() != [2, h, w] || heads.boxes.shape() != [24, h, w] {
        return Err(Error::shape(
            "loss",
            format!(
                "heads {:?}/{:?} do not match a {h}x{w} label map",
                heads.objectness.shape(),
                heads.boxes.shape()
            ),
        ));
    }
    let obj = heads.objectness.data();
    let bx = heads.boxes.data();
    let mut d_obj = vec![T::zero(); 2 * plane];
    let mut d_box = vec![T::zero(); 24 * plane];
    let mut out = LossBreakdown::default();
    for i in 0..plane {
        if !labels.in_loss(i) {
            continue;
        }
        let logits = [obj[i].as_f64(), obj[plane + i].as_f64()];
        let l = labels.labels[i];
        let ww = weights.w1[i] * weights.w2[i];
        let lo = objectness_loss(logits, l);
        if !lo.is_finite() {
            return Err(Error::NonFinite(format!("objectness loss at cell {i}")));
        }
        out.objectness += ww * lo;
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        for c in 0..2 {
            let y = if c == l as usize { 1.0 } else { 0.0 };
            d_obj[c * plane + i] = T::of(ww * (p[c] - y));
        }
        if l == 1 {
            let target = labels.targets[i]
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("positive cell {i} has no box target")))?;
            let o: [f64; 24] = std::array::from_fn(|c| bx[c * plane + i].as_f64());
            let lb = box_loss(&o, target);
            if !lb.is_finite() {
                return Err(Error::NonFinite(format!("box loss at cell {i}")));
            }
            let scale = cfg.w_box * weights.w2[i];
            out.boxes += scale * lb;
            for c in 0..24 {
                d_box[c * plane + i] = T::of(2.0 * scale * (o[c] - target.0[c]));
            }
        }
    }
    out.total = out.objectness + out.boxes;
    Ok((
        out,
        Tensor::from_vec(vec![2, h, w], d_obj)?,
        Tensor::from_vec(vec![24, h, w], d_box)?,
    ))
}

/// The weighted loss as a gradient-check objective.
pub struct WeightedLoss<'a> {
    pub labels: &'a LabelMap,
    pub weights: &'a SampleWeights,
    pub cfg: LossConfig,
}

impl HeadObjective for WeightedLoss<'_> {
    fn eval(&self, heads: &Heads<f64>) -> Result<(f64, Tensor<f64>, Tensor<f64>)> {
        let (l, a, b) = total_loss(heads, self.labels, self.weights, &self.cfg)?;
        Ok((l.total, a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Largest rotation about z, radians.
    pub max_rotation: f64,
    /// Largest translation per axis, meters.
    pub max_translation: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation: 10f64.to_radians(),
            max_translation: [1.0, 1.0, 0.2],
        }
    }
}

fn symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Applies one random rigid motion near the identity to the scan and its boxes.
pub fn augment<R: Rng>(
    scan: &RawScan,
    boxes: &[(Box3D, ObjectClass)],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (RawScan, Vec<(Box3D, ObjectClass)>) {
    let angle = symmetric(rng, cfg.max_rotation);
    let t = Vector3::from_fn(|i, _| symmetric(rng, cfg.max_translation[i]));
    let motion = RigidTransform::about_z(angle, t);
    let moved = boxes
        .iter()
        .map(|(b, c)| {
            let mut r = b.rotated_about_z(angle);
            r.center += t;
            (r, *c)
        })
        .collect();
    (apply_rigid_transform(scan, &motion), moved)
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scan: RawScan,
    pub boxes: Vec<(Box3D, ObjectClass)>,
}

/// Mean cell count per vehicle over the samples; 1 when none has a vehicle.
pub fn mean_vehicle_cells(samples: &[TrainSample], proj: &ProjectionConfig) -> Result<f64> {
    let (mut total, mut count) = (0u64, 0u64);
    for s in samples {
        if s.scan.is_empty() {
            continue;
        }
        let map = project_scan(&s.scan, proj)?;
        let lm = build_labels(&s.scan, &s.boxes, &map)?;
        for (_, n) in lm.vehicle_counts() {
            total += n as u64;
            count += 1;
        }
    }
    Ok(if count == 0 { 1.0 } else { total as f64 / count as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiply the learning rate by `lr_decay_factor` every this many
    /// iterations; 0 keeps it constant.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Multipliers for the `d` and `z` input channels.
    pub input_scale: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-4,
            momentum: 0.9,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            augment: AugmentConfig::default(),
            seed: 0,
            input_scale: [0.1, 0.5],
        }
    }
}

/// Loss log line format.
pub const LOSS_LOG_HEADER: &str = "iteration,objectness_loss,box_loss,total";

/// Abort threshold on the total loss.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    /// Number of the next iteration to run.
    pub next_iteration: usize,
    pub last_loss: LossBreakdown,
}

/// Labels, weights and loss of one sample under the current parameters.
pub fn prepare_sample(
    scan: &RawScan,
    boxes: &[(Box3D, ObjectClass)],
    proj: &ProjectionConfig,
    loss: &LossConfig,
) -> Result<(PointMap, LabelMap, SampleWeights)> {
    let map = project_scan(scan, proj)?;
    let labels = build_labels(scan, boxes, &map)?;
    let weights = sample_weights(&labels, loss)?;
    Ok((map, labels, weights))
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Runs iterations `start..cfg.iterations`, one scan each, appending
/// `iteration,objectness_loss,box_loss,total` lines to `log`.
///
/// Every iteration draws its scan and augmentation from a generator keyed by
/// the seed and the iteration number, so a resumed run samples the same
/// sequence as an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train<W: Write>(
    spec: &NetworkSpec,
    params: &mut Parameters<f32>,
    samples: &[TrainSample],
    proj: &ProjectionConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
    start: usize,
    log: &mut W,
) -> Result<TrainSummary> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    loss.validate()?;
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::Config("learning rate must be nonnegative".into()));
    }
    let mut sgd = if cfg.learning_rate > 0.0 {
        Some(Optimizer::new(cfg.optimizer, params, cfg.learning_rate, cfg.momentum)?)
    } else {
        None
    };
    let io = |e| Error::io("loss log", e);
    let mut last = LossBreakdown::default();
    for it in start..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, it);
        let sample = &samples[rng.random_range(0..samples.len())];
        let (scan, boxes) = augment(&sample.scan, &sample.boxes, &cfg.augment, &mut rng);
        if scan.is_empty() {
            continue;
        }
        let (map, labels, weights) = prepare_sample(&scan, &boxes, proj, loss)?;
        let input = map.to_tensor::<f32>(cfg.input_scale);
        let (heads, cache) = forward(spec, params, &input)?;
        let (l, d_obj, d_box) = total_loss(&heads, &labels, &weights, loss).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence {
                iteration: it,
                loss: f64::NAN,
            },
            other => other,
        })?;
        writeln!(log, "{it},{},{},{}", l.objectness, l.boxes, l.total).map_err(io)?;
        if !(l.total <= DIVERGENCE_LOSS) {
            return Err(Error::Divergence {
                iteration: it,
                loss: l.total,
            });
        }
        last = l;
        if let Some(opt) = sgd.as_mut() {
            let decays = if cfg.lr_decay_every > 0 { it / cfg.lr_decay_every } else { 0 };
            opt.set_lr(cfg.learning_rate * cfg.lr_decay_factor.powi(decays as i32));
            let grads = backward(spec, params, &cache, &d_obj, &d_box)?;
            opt.step(params, &grads).map_err(|_| Error::Divergence {
                iteration: it,
                loss: l.total,
            })?;
        }
    }
    log.flush().map_err(io)?;
    Ok(TrainSummary {
        next_iteration: cfg.iterations.max(start),
        last_loss: last,
    })
}

/// Fraction of loss cells whose predicted class matches the label.
pub fn objectness_accuracy(
    spec: &NetworkSpec,
    params: &Parameters<f32>,
    samples: &[TrainSample],
    proj: &ProjectionConfig,
    input_scale: [f64; 2],
) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for s in samples {
        let map = project_scan(&s.scan, proj)?;
        let labels = build_labels(&s.scan, &s.boxes, &map)?;
        let (heads, _) = forward(spec, params, &map.to_tensor::<f32>(input_scale))?;
        let plane = labels.labels.len();
        let o = heads.objectness.data();
        for i in (0..plane).filter(|&i| labels.in_loss(i)) {
            let pred = (o[plane + i] > o[i]) as u8;
            right += (pred == labels.labels[i]) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { right as f64 / total as f64 })
}
