//! Run configuration: every tunable default of the pipeline as a flat
//! `key = value` file. Values are stored as written (degrees stay degrees)
//! so a serialized config parses back to an identical one.

use std::fmt::Write as _;
use std::path::Path;

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::evalkit::DifficultyConfig;
use crate::pointmap::ProjectionConfig;
use crate::synth::SynthConfig;
use crate::tensornet::gradcheck::GradCheckOptions;
use crate::tensornet::{NetworkConfig, NetworkSpec, OptimizerKind};
use crate::trainer::{AugmentConfig, LossConfig, TrainConfig};

/// Environment variable naming a config file to use when none is given.
pub const CONFIG_ENV: &str = "VELOFCN_CONFIG";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub delta_theta_deg: f64,
    pub delta_phi_deg: f64,
    pub theta_deg: (f64, f64),
    pub phi_deg: (f64, f64),
    pub input_scale: [f64; 2],

    pub network: NetworkConfig,
    pub init_gain: f64,

    pub loss_k: f64,
    pub loss_w_box: f64,
    /// `None` measures the mean vehicle cell count on the training set.
    pub n_bar: Option<f64>,

    pub optimizer: OptimizerKind,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub augment_rotation_deg: f64,
    pub augment_translation: [f64; 3],

    pub detector: DetectorConfig,

    pub difficulty: DifficultyConfig,
    pub world_iou: f64,
    pub image_iou: f64,
    pub image_width: f64,
    pub image_height: f64,

    pub synth: SynthConfig,

    pub gradcheck_rows: usize,
    pub gradcheck_cols: usize,
    pub gradcheck_channels: [usize; 3],
    pub gradcheck_eps: f64,
    pub gradcheck_samples: Option<usize>,
    pub gradcheck_tolerance: f64,
    pub gradcheck_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let loss = LossConfig::default();
        let gc = GradCheckOptions::default();
        Self {
            delta_theta_deg: 0.2,
            delta_phi_deg: 0.4,
            theta_deg: (-44.8, 44.8),
            phi_deg: (-23.6, 2.0),
            input_scale: train.input_scale,
            network: NetworkConfig::default(),
            init_gain: 1.0,
            loss_k: loss.k,
            loss_w_box: loss.w_box,
            n_bar: None,
            optimizer: train.optimizer,
            iterations: train.iterations,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            lr_decay_every: train.lr_decay_every,
            lr_decay_factor: train.lr_decay_factor,
            seed: train.seed,
            augment_rotation_deg: 10.0,
            augment_translation: train.augment.max_translation,
            detector: DetectorConfig::default(),
            difficulty: DifficultyConfig::default(),
            world_iou: 0.7,
            image_iou: 0.7,
            image_width: 1242.0,
            image_height: 375.0,
            synth: SynthConfig::default(),
            gradcheck_rows: 8,
            gradcheck_cols: 16,
            gradcheck_channels: [4, 8, 16],
            gradcheck_eps: gc.eps,
            gradcheck_samples: Some(100),
            gradcheck_tolerance: gc.tolerance,
            gradcheck_floor: gc.floor,
        }
    }
}

enum Field<'a> {
    F64(&'a mut f64),
    Usize(&'a mut usize),
    U64(&'a mut u64),
    Bool(&'a mut bool),
    F64Pair(&'a mut (f64, f64)),
    F64s(&'a mut [f64]),
    UsizePair(&'a mut (usize, usize)),
    Usizes(&'a mut [usize]),
    /// `auto` or a number.
    Auto(&'a mut Option<f64>),
    /// `all` or a count.
    All(&'a mut Option<usize>),
    Optimizer(&'a mut OptimizerKind),
}

fn list<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str, n: usize) -> Option<Vec<T>> {
    let v: Vec<T> = s.split(',').map(|t| t.trim().parse().ok()).collect::<Option<_>>()?;
    (v.len() == n).then_some(v)
}

impl Field<'_> {
    fn render(&self) -> String {
        match self {
            Field::F64(v) => v.to_string(),
            Field::Usize(v) => v.to_string(),
            Field::U64(v) => v.to_string(),
            Field::Bool(v) => v.to_string(),
            Field::F64Pair(v) => list([v.0, v.1]),
            Field::F64s(v) => list(v.iter()),
            Field::UsizePair(v) => list([v.0, v.1]),
            Field::Usizes(v) => list(v.iter()),
            Field::Auto(v) => v.map_or("auto".into(), |x| x.to_string()),
            Field::All(v) => v.map_or("all".into(), |x| x.to_string()),
            Field::Optimizer(v) => v.name().into(),
        }
    }

    fn set(&mut self, s: &str) -> Option<()> {
        match self {
            Field::F64(v) => **v = s.parse().ok()?,
            Field::Usize(v) => **v = s.parse().ok()?,
            Field::U64(v) => **v = s.parse().ok()?,
            Field::Bool(v) => **v = s.parse().ok()?,
            Field::F64Pair(v) => {
                let p = parse_list::<f64>(s, 2)?;
                **v = (p[0], p[1]);
            }
            Field::F64s(v) => {
                let p = parse_list::<f64>(s, v.len())?;
                v.copy_from_slice(&p);
            }
            Field::UsizePair(v) => {
                let p = parse_list::<usize>(s, 2)?;
                **v = (p[0], p[1]);
            }
            Field::Usizes(v) => {
                let p = parse_list::<usize>(s, v.len())?;
                v.copy_from_slice(&p);
            }
            Field::Auto(v) => **v = if s == "auto" { None } else { Some(s.parse().ok()?) },
            Field::All(v) => **v = if s == "all" { None } else { Some(s.parse().ok()?) },
            Field::Optimizer(v) => **v = OptimizerKind::parse(s)?,
        }
        Some(())
    }
}

impl RunConfig {
    fn fields(&mut self) -> Vec<(&'static str, Field<'_>)> {
        use Field::*;
        let n = &mut self.network;
        let s = &mut self.synth;
        let d = &mut self.difficulty;
        vec![
            ("projection.delta_theta_deg", F64(&mut self.delta_theta_deg)),
            ("projection.delta_phi_deg", F64(&mut self.delta_phi_deg)),
            ("projection.theta_deg", F64Pair(&mut self.theta_deg)),
            ("projection.phi_deg", F64Pair(&mut self.phi_deg)),
            ("input.scale", F64s(&mut self.input_scale)),
            ("network.channels", Usizes(&mut n.channels)),
            ("network.conv1_kernel", UsizePair(&mut n.conv1_kernel)),
            ("network.conv1_pad", UsizePair(&mut n.conv1_pad)),
            ("network.conv_kernel", UsizePair(&mut n.conv_kernel)),
            ("network.conv_pad", UsizePair(&mut n.conv_pad)),
            ("network.deconv_kernel", UsizePair(&mut n.deconv_kernel)),
            ("network.deconv_pad", UsizePair(&mut n.deconv_pad)),
            ("network.head_kernel", UsizePair(&mut n.head_kernel)),
            ("network.head_pad", UsizePair(&mut n.head_pad)),
            ("network.init_gain", F64(&mut self.init_gain)),
            ("loss.k", F64(&mut self.loss_k)),
            ("loss.w_box", F64(&mut self.loss_w_box)),
            ("loss.n_bar", Auto(&mut self.n_bar)),
            ("train.optimizer", Optimizer(&mut self.optimizer)),
            ("train.iterations", Usize(&mut self.iterations)),
            ("train.learning_rate", F64(&mut self.learning_rate)),
            ("train.momentum", F64(&mut self.momentum)),
            ("train.lr_decay_every", Usize(&mut self.lr_decay_every)),
            ("train.lr_decay_factor", F64(&mut self.lr_decay_factor)),
            ("train.seed", U64(&mut self.seed)),
            ("augment.max_rotation_deg", F64(&mut self.augment_rotation_deg)),
            ("augment.max_translation", F64s(&mut self.augment_translation)),
            ("detector.delta", F64(&mut self.detector.delta)),
            ("detector.min_score", Usize(&mut self.detector.min_score)),
            ("detector.margin", F64(&mut self.detector.margin)),
            ("eval.easy_max_distance", F64(&mut d.easy_max_distance)),
            ("eval.moderate_max_distance", F64(&mut d.moderate_max_distance)),
            ("eval.use_pixel_height", Bool(&mut d.use_pixel_height)),
            ("eval.easy_min_height_px", F64(&mut d.easy_min_height_px)),
            ("eval.moderate_min_height_px", F64(&mut d.moderate_min_height_px)),
            ("eval.use_occlusion", Bool(&mut d.use_occlusion)),
            ("eval.world_iou", F64(&mut self.world_iou)),
            ("eval.image_iou", F64(&mut self.image_iou)),
            ("eval.image_width", F64(&mut self.image_width)),
            ("eval.image_height", F64(&mut self.image_height)),
            ("synth.min_vehicles", Usize(&mut s.min_vehicles)),
            ("synth.max_vehicles", Usize(&mut s.max_vehicles)),
            ("synth.min_range", F64(&mut s.min_range)),
            ("synth.max_range", F64(&mut s.max_range)),
            ("synth.length", F64Pair(&mut s.length)),
            ("synth.width", F64Pair(&mut s.width)),
            ("synth.height", F64Pair(&mut s.height)),
            ("synth.van_probability", F64(&mut s.van_probability)),
            ("synth.clutter", Usize(&mut s.clutter)),
            ("synth.ground_z", F64(&mut s.ground_z)),
            ("synth.noise_std", F64(&mut s.noise_std)),
            ("synth.max_return", F64(&mut s.max_return)),
            ("synth.clearance", F64(&mut s.clearance)),
            ("gradcheck.rows", Usize(&mut self.gradcheck_rows)),
            ("gradcheck.cols", Usize(&mut self.gradcheck_cols)),
            ("gradcheck.channels", Usizes(&mut self.gradcheck_channels)),
            ("gradcheck.eps", F64(&mut self.gradcheck_eps)),
            ("gradcheck.samples", All(&mut self.gradcheck_samples)),
            ("gradcheck.tolerance", F64(&mut self.gradcheck_tolerance)),
            ("gradcheck.floor", F64(&mut self.gradcheck_floor)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().fields().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let mut fields = self.fields();
        let (_, field) = fields
            .iter_mut()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        field
            .set(value)
            .ok_or_else(|| Error::Config(format!("bad value `{value}` for `{key}`")))
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Applies the lines of a config file on top of `self`. Blank lines and
    /// `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".into()))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => parse_err(msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        for (k, f) in copy.fields() {
            let _ = writeln!(out, "{k} = {}", f.render());
        }
        out
    }

    pub fn projection(&self) -> Result<ProjectionConfig> {
        ProjectionConfig::from_degrees(self.delta_theta_deg, self.delta_phi_deg, self.theta_deg, self.phi_deg)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::fcn(&self.network)
    }

    /// Loss settings with `n_bar` filled in by `measure` when set to auto.
    pub fn loss(&self, measure: impl FnOnce() -> Result<f64>) -> Result<LossConfig> {
        let cfg = LossConfig {
            k: self.loss_k,
            w_box: self.loss_w_box,
            n_bar: match self.n_bar {
                Some(v) => v,
                None => measure()?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            lr_decay_every: self.lr_decay_every,
            lr_decay_factor: self.lr_decay_factor,
            augment: AugmentConfig {
                max_rotation: self.augment_rotation_deg.to_radians(),
                max_translation: self.augment_translation,
            },
            seed: self.seed,
            input_scale: self.input_scale,
        }
    }

    pub fn gradcheck(&self) -> GradCheckOptions {
        GradCheckOptions {
            eps: self.gradcheck_eps,
            per_layer: self.gradcheck_samples,
            tolerance: self.gradcheck_tolerance,
            floor: self.gradcheck_floor,
            seed: self.seed,
            corrupt_layer: None,
        }
    }

    pub fn gradcheck_network(&self) -> NetworkConfig {
        NetworkConfig {
            channels: self.gradcheck_channels,
            ..self.network
        }
    }
}
