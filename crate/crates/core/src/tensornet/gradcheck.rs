//! Central finite-difference checks of the backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{backward, forward, Heads, NetworkSpec, Parameters};
use super::tensor::Tensor;
use crate::error::Result;

/// A scalar objective on the network heads: value and gradients with
/// respect to the objectness and box tensors.
pub trait HeadObjective {
    fn eval(&self, heads: &Heads<f64>) -> Result<(f64, Tensor<f64>, Tensor<f64>)>;
}

/// `sum(a * objectness) + sum(b * boxes)` for fixed random weights.
pub struct LinearProbe {
    pub objectness: Tensor<f64>,
    pub boxes: Tensor<f64>,
}

impl LinearProbe {
    pub fn random(h: usize, w: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |c: usize| {
            let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(vec![c, h, w], data).expect("shape")
        };
        Self {
            objectness: make(2),
            boxes: make(24),
        }
    }
}

impl HeadObjective for LinearProbe {
    fn eval(&self, heads: &Heads<f64>) -> Result<(f64, Tensor<f64>, Tensor<f64>)> {
        let v = heads.objectness.dot(&self.objectness) + heads.boxes.dot(&self.boxes);
        Ok((v, self.objectness.clone(), self.boxes.clone()))
    }
}

/// Draws every bias uniformly from `[-scale, scale]`. With zero biases an
/// all-empty receptive field puts a rectifier input exactly on its kink,
/// where no finite difference agrees with the analytic gradient.
pub fn jitter_biases<R: rand::Rng>(params: &mut Parameters<f64>, scale: f64, rng: &mut R) {
    for l in &mut params.layers {
        for b in l.bias.data_mut() {
            *b = rng.random_range(-scale..=scale);
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Parameters sampled per layer; `None` checks every parameter.
    pub per_layer: Option<usize>,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
    /// Test hook: scales the analytic gradient of this layer to simulate a
    /// broken backward pass.
    pub corrupt_layer: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            per_layer: None,
            tolerance: 1e-4,
            floor: 1e-4,
            seed: 0,
            corrupt_layer: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entries that only passed at a smaller step, i.e. where the first
    /// difference straddled a rectifier kink.
    pub retried: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn objective_at(
    spec: &NetworkSpec,
    params: &Parameters<f64>,
    input: &Tensor<f64>,
    obj: &dyn HeadObjective,
) -> Result<f64> {
    let (heads, _) = forward(spec, params, input)?;
    Ok(obj.eval(&heads)?.0)
}

fn slot(p: &mut Parameters<f64>, layer: usize, is_bias: bool, index: usize) -> &mut f64 {
    let l = &mut p.layers[layer];
    let t = if is_bias { &mut l.bias } else { &mut l.kernel };
    &mut t.data_mut()[index]
}

#[allow(clippy::too_many_arguments)]
fn central(
    spec: &NetworkSpec,
    params: &mut Parameters<f64>,
    input: &Tensor<f64>,
    obj: &dyn HeadObjective,
    layer: usize,
    is_bias: bool,
    index: usize,
    eps: f64,
) -> Result<f64> {
    let orig = *slot(params, layer, is_bias, index);
    *slot(params, layer, is_bias, index) = orig + eps;
    let up = objective_at(spec, params, input, obj);
    *slot(params, layer, is_bias, index) = orig - eps;
    let down = objective_at(spec, params, input, obj);
    *slot(params, layer, is_bias, index) = orig;
    Ok((up? - down?) / (2.0 * eps))
}

/// Compares backprop gradients of `obj` against central differences.
pub fn check_network(
    spec: &NetworkSpec,
    params: &Parameters<f64>,
    input: &Tensor<f64>,
    obj: &dyn HeadObjective,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (heads, cache) = forward(spec, params, input)?;
    let (_, d_obj, d_box) = obj.eval(&heads)?;
    let mut grads = backward(spec, params, &cache, &d_obj, &d_box)?;
    if let Some(name) = &opts.corrupt_layer {
        if let Some(l) = grads.get_mut(name) {
            l.kernel.scale(1.5);
            l.bias.scale(1.5);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut layers = Vec::new();
    for (li, g) in grads.layers.iter().enumerate() {
        let total = g.kernel.len() + g.bias.len();
        let picks: Vec<usize> = match opts.per_layer {
            Some(n) if n < total => sample(&mut rng, total, n).into_vec(),
            _ => (0..total).collect(),
        };
        let mut check = LayerCheck {
            name: g.name.clone(),
            checked: picks.len(),
            max_rel_err: 0.0,
            retried: 0,
        };
        for flat in picks {
            let (is_bias, idx) = if flat < g.kernel.len() {
                (false, flat)
            } else {
                (true, flat - g.kernel.len())
            };
            let analytic = if is_bias { g.bias.data()[idx] } else { g.kernel.data()[idx] };
            let numeric = central(spec, &mut work, input, obj, li, is_bias, idx, opts.eps)?;
            let mut err = rel_err(analytic, numeric, opts.floor);
            if err >= opts.tolerance {
                let finer = central(spec, &mut work, input, obj, li, is_bias, idx, opts.eps * 0.1)?;
                let e2 = rel_err(analytic, finer, opts.floor);
                if e2 < opts.tolerance {
                    check.retried += 1;
                }
                err = err.min(e2);
            }
            check.max_rel_err = check.max_rel_err.max(err);
        }
        layers.push(check);
    }
    Ok(GradCheckReport {
        layers,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::network::NetworkConfig;

    fn setup() -> (NetworkSpec, Parameters<f64>, Tensor<f64>) {
        use rand::Rng;
        let spec = NetworkSpec::fcn(&NetworkConfig::with_channels([4, 8, 16])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = Parameters::init(&spec, 2.0, &mut rng);
        jitter_biases(&mut params, 0.1, &mut ChaCha8Rng::seed_from_u64(22));
        let input = Tensor::from_vec(
            vec![2, 8, 16],
            (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        (spec, params, input)
    }

    #[test]
    fn sampled_check_passes() {
        let (spec, params, input) = setup();
        let probe = LinearProbe::random(8, 16, 5);
        let opts = GradCheckOptions {
            per_layer: Some(12),
            ..Default::default()
        };
        let report = check_network(&spec, &params, &input, &probe, &opts).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.layers.len(), 8);
    }

    #[test]
    fn corrupted_backward_detected() {
        let (spec, params, input) = setup();
        let probe = LinearProbe::random(8, 16, 5);
        let opts = GradCheckOptions {
            per_layer: Some(4),
            corrupt_layer: Some("deconv5b".into()),
            ..Default::default()
        };
        let report = check_network(&spec, &params, &input, &probe, &opts).unwrap();
        assert!(!report.passed());
        let bad: Vec<_> = report.layers.iter().filter(|l| l.max_rel_err >= 1e-4).map(|l| l.name.as_str()).collect();
        assert_eq!(bad, ["deconv5b"]);
    }
}
