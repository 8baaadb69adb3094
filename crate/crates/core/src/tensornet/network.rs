//! Layer graph, parameters and the forward/backward passes.

use rand::Rng;

use super::ops::{self, Window};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const INPUT: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { in_ch: usize, out_ch: usize, window: Window },
    Deconv { in_ch: usize, out_ch: usize, window: Window },
    Relu,
    Concat,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Deconv { .. })
    }

    /// Kernel shape and bias length of a parametric layer.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match self.kind {
            LayerKind::Conv { in_ch, out_ch, window } => {
                Some((vec![out_ch, in_ch, window.kernel.0, window.kernel.1], out_ch))
            }
            LayerKind::Deconv { in_ch, out_ch, window } => {
                Some((vec![in_ch, out_ch, window.kernel.0, window.kernel.1], out_ch))
            }
            _ => None,
        }
    }
}

/// Channel widths and kernel geometry of the two-headed detection network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub channels: [usize; 3],
    pub conv1_kernel: (usize, usize),
    pub conv1_pad: (usize, usize),
    pub conv_kernel: (usize, usize),
    pub conv_pad: (usize, usize),
    pub deconv_kernel: (usize, usize),
    pub deconv_pad: (usize, usize),
    pub head_kernel: (usize, usize),
    pub head_pad: (usize, usize),
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            channels: [16, 32, 64],
            conv1_kernel: (5, 9),
            conv1_pad: (2, 4),
            conv_kernel: (3, 3),
            conv_pad: (1, 1),
            deconv_kernel: (4, 4),
            deconv_pad: (1, 1),
            head_kernel: (4, 8),
            head_pad: (1, 2),
        }
    }
}

impl NetworkConfig {
    pub fn with_channels(channels: [usize; 3]) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }
}

/// Strides fixed by the topology: the first and last layers resample by 2
/// vertically and 4 horizontally, every other layer by 2 in both axes.
const OUTER_STRIDE: (usize, usize) = (2, 4);
const INNER_STRIDE: (usize, usize) = (2, 2);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    /// Node index of each layer input; 0 is the network input, `i + 1` is layer `i`.
    wiring: Vec<Vec<usize>>,
    objectness: usize,
    boxes: usize,
    input_channels: usize,
}

impl NetworkSpec {
    /// Validates and wires an arbitrary layer list.
    pub fn new(
        layers: Vec<LayerSpec>,
        input_channels: usize,
        objectness: &str,
        boxes: &str,
    ) -> Result<Self> {
        let mut channels = vec![input_channels];
        let mut names: Vec<&str> = vec![INPUT];
        let mut wiring = Vec::with_capacity(layers.len());
        for layer in &layers {
            if names.contains(&layer.name.as_str()) {
                return Err(Error::shape(&layer.name, "duplicate layer name"));
            }
            let ids = layer
                .inputs
                .iter()
                .map(|n| {
                    names.iter().position(|m| m == n).ok_or_else(|| {
                        Error::shape(&layer.name, format!("unknown or later input `{n}`"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let in_ch: usize = ids.iter().map(|&i| channels[i]).sum();
            let arity_ok = match layer.kind {
                LayerKind::Concat => ids.len() >= 2,
                _ => ids.len() == 1,
            };
            if !arity_ok {
                return Err(Error::shape(&layer.name, format!("wrong input count {}", ids.len())));
            }
            let out_ch = match layer.kind {
                LayerKind::Conv { in_ch: c, out_ch, window }
                | LayerKind::Deconv { in_ch: c, out_ch, window } => {
                    if c != in_ch {
                        return Err(Error::shape(
                            &layer.name,
                            format!("declares {c} input channels, wired to {in_ch}"),
                        ));
                    }
                    if window.stride.0 == 0 || window.stride.1 == 0 || out_ch == 0 {
                        return Err(Error::shape(&layer.name, "zero stride or width"));
                    }
                    if matches!(layer.kind, LayerKind::Deconv { .. })
                        && (window.kernel.0 < window.stride.0 || window.kernel.1 < window.stride.1)
                    {
                        return Err(Error::shape(&layer.name, "deconv kernel smaller than stride"));
                    }
                    out_ch
                }
                _ => in_ch,
            };
            channels.push(out_ch);
            names.push(&layer.name);
            wiring.push(ids);
        }
        let find = |n: &str| {
            names
                .iter()
                .position(|m| *m == n)
                .ok_or_else(|| Error::shape(n, "output layer not found"))
        };
        let objectness = find(objectness)?;
        let boxes = find(boxes)?;
        Ok(Self {
            layers,
            wiring,
            objectness,
            boxes,
            input_channels,
        })
    }

    /// The down/up-sampling detection network with skip concatenations
    /// conv2 + deconv4 and conv1 + deconv5{a,b}, splitting into an objectness
    /// branch (2 channels) and a box branch (24 channels).
    pub fn fcn(cfg: &NetworkConfig) -> Result<Self> {
        let [c1, c2, c3] = cfg.channels;
        let conv = |name: &str, input: &str, in_ch, out_ch, window| LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv { in_ch, out_ch, window },
            inputs: vec![input.into()],
        };
        let deconv = |name: &str, input: &str, in_ch, out_ch, window| LayerSpec {
            name: name.into(),
            kind: LayerKind::Deconv { in_ch, out_ch, window },
            inputs: vec![input.into()],
        };
        let relu = |name: &str| LayerSpec {
            name: format!("{name}_relu"),
            kind: LayerKind::Relu,
            inputs: vec![name.into()],
        };
        let concat = |name: &str, a: &str, b: &str| LayerSpec {
            name: name.into(),
            kind: LayerKind::Concat,
            inputs: vec![a.into(), b.into()],
        };
        let outer_in = Window::new(cfg.conv1_kernel, OUTER_STRIDE, cfg.conv1_pad);
        let inner = Window::new(cfg.conv_kernel, INNER_STRIDE, cfg.conv_pad);
        let up = Window::new(cfg.deconv_kernel, INNER_STRIDE, cfg.deconv_pad);
        let outer_out = Window::new(cfg.head_kernel, OUTER_STRIDE, cfg.head_pad);
        let layers = vec![
            conv("conv1", INPUT, cfg.input_channels, c1, outer_in),
            relu("conv1"),
            conv("conv2", "conv1_relu", c1, c2, inner),
            relu("conv2"),
            conv("conv3", "conv2_relu", c2, c3, inner),
            relu("conv3"),
            deconv("deconv4", "conv3_relu", c3, c2, up),
            relu("deconv4"),
            concat("concat4", "conv2_relu", "deconv4_relu"),
            deconv("deconv5a", "concat4", 2 * c2, c1, up),
            relu("deconv5a"),
            deconv("deconv5b", "concat4", 2 * c2, c1, up),
            relu("deconv5b"),
            concat("concat5a", "conv1_relu", "deconv5a_relu"),
            concat("concat5b", "conv1_relu", "deconv5b_relu"),
            deconv("deconv6a", "concat5a", 2 * c1, 2, outer_out),
            deconv("deconv6b", "concat5b", 2 * c1, 24, outer_out),
        ];
        Self::new(layers, cfg.input_channels, "deconv6a", "deconv6b")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    /// Layers that own a kernel and bias, in order.
    pub fn parametric(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.has_params())
    }

    /// Input height and width must be multiples of these.
    pub fn size_multiple(&self) -> (usize, usize) {
        let mut m = (1, 1);
        for l in &self.layers {
            if let LayerKind::Conv { window, .. } = l.kind {
                m = (m.0 * window.stride.0, m.1 * window.stride.1);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Kernels and biases of every parametric layer, in spec order. The same
/// type holds gradients and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub layers: Vec<LayerParams<T>>,
}

pub type Gradients<T> = Parameters<T>;

impl<T: Scalar> Parameters<T> {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .parametric()
            .map(|l| {
                let (k, b) = l.param_shapes().expect("parametric layer");
                LayerParams {
                    name: l.name.clone(),
                    kernel: Tensor::zeros(k),
                    bias: Tensor::zeros(vec![b]),
                }
            })
            .collect();
        Self { layers }
    }

    /// Kernels drawn uniformly from `[-a, a]` with `a = gain / sqrt(fan_in)`;
    /// biases zero. A transposed convolution's fan-in counts the kernel taps
    /// that overlap each output, `in * kh * kw / (sv * sh)`.
    pub fn init<R: Rng>(spec: &NetworkSpec, gain: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for (lp, l) in p.layers.iter_mut().zip(spec.parametric()) {
            let fan_in = match l.kind {
                LayerKind::Conv { in_ch, window, .. } => {
                    (in_ch * window.kernel.0 * window.kernel.1) as f64
                }
                LayerKind::Deconv { in_ch, window, .. } => {
                    (in_ch * window.kernel.0 * window.kernel.1) as f64
                        / (window.stride.0 * window.stride.1) as f64
                }
                _ => unreachable!(),
            };
            let bound = gain / fan_in.sqrt();
            for v in lp.kernel.data_mut() {
                *v = T::of(rng.random_range(-bound..=bound));
            }
        }
        p
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerParams<T>> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    kernel: l.kernel.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// Checks that the parameter set matches `spec` layer by layer.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expected: Vec<_> = spec.parametric().collect();
        for (i, l) in expected.iter().enumerate() {
            let (k, b) = l.param_shapes().expect("parametric layer");
            match self.layers.get(i) {
                Some(p) if p.name == l.name && p.kernel.shape() == k && p.bias.len() == b => {}
                Some(p) => {
                    return Err(Error::shape(
                        &l.name,
                        format!(
                            "parameters `{}` with kernel {:?}/bias {} do not match kernel {k:?}/bias {b}",
                            p.name,
                            p.kernel.shape(),
                            p.bias.len()
                        ),
                    ))
                }
                None => return Err(Error::shape(&l.name, "missing parameters")),
            }
        }
        if let Some(extra) = self.layers.get(expected.len()) {
            return Err(Error::shape(&extra.name, "layer not present in network"));
        }
        Ok(())
    }

    /// Visits each (kernel, bias) tensor pair mutably together with `other`.
    pub fn zip_mut<'a>(
        &'a mut self,
        other: &'a Self,
    ) -> impl Iterator<Item = (&'a str, &'a mut Tensor<T>, &'a Tensor<T>)> {
        self.layers.iter_mut().zip(&other.layers).flat_map(|(a, b)| {
            let name = a.name.as_str();
            [(name, &mut a.kernel, &b.kernel), (name, &mut a.bias, &b.bias)]
        })
    }
}

/// Activations of every node from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn node(&self, spec: &NetworkSpec, name: &str) -> Option<&Tensor<T>> {
        if name == INPUT {
            return self.nodes.first();
        }
        let i = spec.layers.iter().position(|l| l.name == name)?;
        self.nodes.get(i + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Heads<T> {
    /// Objectness logits `(2, H, W)`; channel 1 is the vehicle class.
    pub objectness: Tensor<T>,
    /// Encoded box regression `(24, H, W)`.
    pub boxes: Tensor<T>,
}

pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    input: &Tensor<T>,
) -> Result<(Heads<T>, ForwardCache<T>)> {
    let (c, h, w) = input
        .dims3()
        .ok_or_else(|| Error::shape(INPUT, format!("input must be rank 3, got {:?}", input.shape())))?;
    let (mh, mw) = spec.size_multiple();
    if c != spec.input_channels || h == 0 || w == 0 || h % mh != 0 || w % mw != 0 {
        return Err(Error::shape(
            INPUT,
            format!(
                "input {c}x{h}x{w} needs {} channels and size divisible by {mh}x{mw}",
                spec.input_channels
            ),
        ));
    }
    params.check(spec)?;
    let mut nodes: Vec<Tensor<T>> = Vec::with_capacity(spec.layers.len() + 1);
    nodes.push(input.clone());
    let mut pi = 0;
    for (layer, ids) in spec.layers.iter().zip(&spec.wiring) {
        let x = &nodes[ids[0]];
        let y = match layer.kind {
            LayerKind::Conv { window, .. } => {
                let p = &params.layers[pi];
                pi += 1;
                ops::conv2d_forward_named(&layer.name, x, &p.kernel, &p.bias, &window)?
            }
            LayerKind::Deconv { window, .. } => {
                let p = &params.layers[pi];
                pi += 1;
                ops::deconv2d_forward_named(&layer.name, x, &p.kernel, &p.bias, &window)?
            }
            LayerKind::Relu => ops::relu_forward(x),
            LayerKind::Softmax => ops::softmax_forward(x),
            LayerKind::Concat => {
                let parts: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i]).collect();
                ops::concat_forward(&layer.name, &parts)?
            }
        };
        nodes.push(y);
    }
    let heads = Heads {
        objectness: nodes[spec.objectness].clone(),
        boxes: nodes[spec.boxes].clone(),
    };
    for (name, t) in [("objectness", &heads.objectness), ("boxes", &heads.boxes)] {
        if t.shape()[1..] != [h, w] {
            return Err(Error::shape(name, format!("head has shape {:?}, input is {h}x{w}", t.shape())));
        }
    }
    Ok((heads, ForwardCache { nodes }))
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Reverse-mode pass from head gradients to parameter gradients.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    cache: &ForwardCache<T>,
    d_objectness: &Tensor<T>,
    d_boxes: &Tensor<T>,
) -> Result<Gradients<T>> {
    if cache.nodes.len() != spec.layers.len() + 1 {
        return Err(Error::Contract("forward cache does not belong to this network".into()));
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; cache.nodes.len()];
    for (node, g) in [(spec.objectness, d_objectness), (spec.boxes, d_boxes)] {
        if g.shape() != cache.nodes[node].shape() {
            return Err(Error::shape(
                spec.layers[node - 1].name.as_str(),
                format!("gradient shape {:?} does not match output {:?}", g.shape(), cache.nodes[node].shape()),
            ));
        }
        accumulate(&mut grads[node], g.clone());
    }
    let mut out = Parameters::zeros(spec);
    let mut pi = spec.parametric().count();
    for (li, (layer, ids)) in spec.layers.iter().zip(&spec.wiring).enumerate().rev() {
        if layer.has_params() {
            pi -= 1;
        }
        let Some(dy) = grads[li + 1].take() else { continue };
        let x = &cache.nodes[ids[0]];
        match layer.kind {
            LayerKind::Conv { window, .. } => {
                let (dx, dw, db) = ops::conv2d_backward(x, &params.layers[pi].kernel, &window, &dy)?;
                out.layers[pi].kernel = dw;
                out.layers[pi].bias = db;
                accumulate(&mut grads[ids[0]], dx);
            }
            LayerKind::Deconv { window, .. } => {
                let (dx, dw, db) =
                    ops::deconv2d_backward(x, &params.layers[pi].kernel, &window, &dy)?;
                out.layers[pi].kernel = dw;
                out.layers[pi].bias = db;
                accumulate(&mut grads[ids[0]], dx);
            }
            LayerKind::Relu => {
                let dx = ops::relu_backward(&cache.nodes[li + 1], &dy);
                accumulate(&mut grads[ids[0]], dx);
            }
            LayerKind::Softmax => {
                let dx = ops::softmax_backward(&cache.nodes[li + 1], &dy);
                accumulate(&mut grads[ids[0]], dx);
            }
            LayerKind::Concat => {
                let channels: Vec<usize> = ids.iter().map(|&i| cache.nodes[i].shape()[0]).collect();
                for (&i, part) in ids.iter().zip(ops::concat_backward(&dy, &channels)) {
                    accumulate(&mut grads[i], part);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> NetworkSpec {
        NetworkSpec::fcn(&NetworkConfig::with_channels([4, 8, 16])).unwrap()
    }

    #[test]
    fn head_sizes_match_input() {
        let spec = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = Parameters::<f32>::init(&spec, 1.0, &mut rng);
        for (h, w) in [(8, 16), (16, 32), (64, 448)] {
            let x = Tensor::zeros(vec![2, h, w]);
            let (heads, cache) = forward(&spec, &params, &x).unwrap();
            assert_eq!(heads.objectness.shape(), &[2, h, w]);
            assert_eq!(heads.boxes.shape(), &[24, h, w]);
            let sizes = [
                ("conv1", (h / 2, w / 4)),
                ("conv2", (h / 4, w / 8)),
                ("conv3", (h / 8, w / 16)),
                ("deconv4", (h / 4, w / 8)),
                ("deconv5a", (h / 2, w / 4)),
                ("deconv5b", (h / 2, w / 4)),
            ];
            for (name, (a, b)) in sizes {
                assert_eq!(&cache.node(&spec, name).unwrap().shape()[1..], &[a, b], "{name}");
            }
        }
    }

    #[test]
    fn full_size_heads() {
        let spec = NetworkSpec::fcn(&NetworkConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = Parameters::<f32>::init(&spec, 1.0, &mut rng);
        let (heads, _) = forward(&spec, &params, &Tensor::zeros(vec![2, 64, 448])).unwrap();
        assert_eq!(heads.objectness.shape(), &[2, 64, 448]);
        assert_eq!(heads.boxes.shape(), &[24, 64, 448]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let spec = toy();
        let params = Parameters::<f32>::zeros(&spec);
        assert!(forward(&spec, &params, &Tensor::zeros(vec![2, 12, 16])).is_err());
        assert!(forward(&spec, &params, &Tensor::zeros(vec![2, 8, 24])).is_err());
    }

    #[test]
    fn zero_input_gives_uniform_logits() {
        let spec = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = Parameters::<f64>::init(&spec, 1.0, &mut rng);
        let (heads, _) = forward(&spec, &params, &Tensor::zeros(vec![2, 8, 16])).unwrap();
        assert!(heads.objectness.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = Parameters::<f64>::init(&spec, 1.0, &mut rng);
        let x = Tensor::from_vec(vec![2, 8, 16], (0..256).map(|i| (i as f64).sin()).collect()).unwrap();
        let (heads, cache) = forward(&spec, &params, &x).unwrap();
        let g = backward(
            &spec,
            &params,
            &cache,
            &Tensor::zeros(heads.objectness.shape().to_vec()),
            &Tensor::zeros(heads.boxes.shape().to_vec()),
        )
        .unwrap();
        assert!(g.layers.iter().all(|l| l.kernel.max_abs() == 0.0 && l.bias.max_abs() == 0.0));
    }

    #[test]
    fn single_pointwise_layer_gradient_is_input() {
        let layers = vec![
            LayerSpec {
                name: "a".into(),
                kind: LayerKind::Conv { in_ch: 1, out_ch: 1, window: Window::new((1, 1), (1, 1), (0, 0)) },
                inputs: vec![INPUT.into()],
            },
            LayerSpec {
                name: "b".into(),
                kind: LayerKind::Conv { in_ch: 1, out_ch: 1, window: Window::new((1, 1), (1, 1), (0, 0)) },
                inputs: vec![INPUT.into()],
            },
        ];
        let spec = NetworkSpec::new(layers, 1, "a", "b").unwrap();
        let mut params = Parameters::<f64>::zeros(&spec);
        params.layers[0].kernel.data_mut()[0] = 0.3;
        let x = Tensor::from_vec(vec![1, 1, 1], vec![2.5]).unwrap();
        let (heads, cache) = forward(&spec, &params, &x).unwrap();
        let one = Tensor::from_vec(vec![1, 1, 1], vec![1.0]).unwrap();
        let g = backward(&spec, &params, &cache, &one, &Tensor::zeros(heads.boxes.shape().to_vec())).unwrap();
        assert_eq!(g.layers[0].kernel.data(), &[2.5]);
        assert_eq!(g.layers[0].bias.data(), &[1.0]);
        assert_eq!(g.layers[1].kernel.data(), &[0.0]);
    }

    #[test]
    fn mismatched_parameters_rejected() {
        let spec = toy();
        let other = NetworkSpec::fcn(&NetworkConfig::with_channels([4, 8, 12])).unwrap();
        let params = Parameters::<f32>::zeros(&other);
        match params.check(&spec) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "conv3"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wiring_errors() {
        let bad = vec![LayerSpec {
            name: "x".into(),
            kind: LayerKind::Relu,
            inputs: vec!["nope".into()],
        }];
        assert!(NetworkSpec::new(bad, 2, "x", "x").is_err());
    }
}
