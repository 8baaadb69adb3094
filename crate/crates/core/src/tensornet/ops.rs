//! Layer primitives with hand-written backward passes.
//!
//! Convolution is cross-correlation over zero-padded input, lowered to a
//! matrix product through `im2col`. Transposed convolution is implemented as
//! the exact adjoint of the convolution with the same kernel, stride and
//! padding.

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Window {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent of a convolution over an input of `(h, w)`.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let eh = h + 2 * self.pad.0;
        let ew = w + 2 * self.pad.1;
        if self.stride.0 == 0 || self.stride.1 == 0 || eh < self.kernel.0 || ew < self.kernel.1 {
            return None;
        }
        Some((
            (eh - self.kernel.0) / self.stride.0 + 1,
            (ew - self.kernel.1) / self.stride.1 + 1,
        ))
    }

    /// Output extent of a transposed convolution over an input of `(h, w)`.
    pub fn deconv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h == 0 || w == 0 {
            return None;
        }
        let oh = ((h - 1) * self.stride.0 + self.kernel.0).checked_sub(2 * self.pad.0)?;
        let ow = ((w - 1) * self.stride.1 + self.kernel.1).checked_sub(2 * self.pad.1)?;
        (oh > 0 && ow > 0).then_some((oh, ow))
    }
}

/// Unfolds `x` of shape `(c, h, w)` into columns `(c*kh*kw, ho*wo)`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    win: &Window,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let (kh, kw) = win.kernel;
    let (sv, sh) = win.stride;
    let (ph, pw) = (win.pad.0 as isize, win.pad.1 as isize);
    let n = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &mut cols[((ci * kh + u) * kw + v) * n..][..n];
                for i in 0..ho {
                    let xi = (i * sv) as isize + u as isize - ph;
                    let out = &mut row[i * wo..(i + 1) * wo];
                    if xi < 0 || xi >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[xi as usize * w..(xi as usize + 1) * w];
                    for (j, o) in out.iter_mut().enumerate() {
                        let xj = (j * sh) as isize + v as isize - pw;
                        *o = if xj < 0 || xj >= w as isize {
                            T::zero()
                        } else {
                            src[xj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    win: &Window,
    (ho, wo): (usize, usize),
    x: &mut [T],
) {
    let (kh, kw) = win.kernel;
    let (sv, sh) = win.stride;
    let (ph, pw) = (win.pad.0 as isize, win.pad.1 as isize);
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &cols[((ci * kh + u) * kw + v) * n..][..n];
                for i in 0..ho {
                    let xi = (i * sv) as isize + u as isize - ph;
                    if xi < 0 || xi >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[xi as usize * w..(xi as usize + 1) * w];
                    for (j, val) in row[i * wo..(i + 1) * wo].iter().enumerate() {
                        let xj = (j * sh) as isize + v as isize - pw;
                        if xj >= 0 && xj < w as isize {
                            dst[xj as usize] = dst[xj as usize] + *val;
                        }
                    }
                }
            }
        }
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str, layer: &str) -> Result<(usize, usize, usize)> {
    t.dims3()
        .ok_or_else(|| Error::shape(layer, format!("{what} must be rank 3, got {:?}", t.shape())))
}

fn dims4<T: Scalar>(t: &Tensor<T>, layer: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape()[..] {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::shape(
            layer,
            format!("kernel must be rank 4, got {:?}", t.shape()),
        )),
    }
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    for (o, b) in bias.iter().enumerate() {
        for v in &mut y[o * plane..(o + 1) * plane] {
            *v = *v + *b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|o| dy[o * plane..(o + 1) * plane].iter().copied().sum())
        .collect()
}

struct ConvShapes {
    x: (usize, usize, usize),
    out_ch: usize,
    out: (usize, usize),
}

fn conv_shapes<T: Scalar>(
    layer: &str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    win: &Window,
) -> Result<ConvShapes> {
    let (c, h, wd) = dims3(x, "input", layer)?;
    let (o, wc, kh, kw) = dims4(w, layer)?;
    if wc != c || (kh, kw) != win.kernel {
        return Err(Error::shape(
            layer,
            format!("kernel {:?} does not fit input with {c} channels", w.shape()),
        ));
    }
    let out = win.conv_out(h, wd).ok_or_else(|| {
        Error::shape(layer, format!("input {h}x{wd} smaller than kernel {kh}x{kw}"))
    })?;
    Ok(ConvShapes {
        x: (c, h, wd),
        out_ch: o,
        out,
    })
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let win = Window::new((w.shape().get(2).copied().unwrap_or(0), w.shape().get(3).copied().unwrap_or(0)), stride, pad);
    conv2d_forward_named("conv2d", x, w, b, &win)
}

pub(crate) fn conv2d_forward_named<T: Scalar>(
    layer: &str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    win: &Window,
) -> Result<Tensor<T>> {
    let s = conv_shapes(layer, x, w, win)?;
    if b.len() != s.out_ch {
        return Err(Error::shape(layer, format!("bias has {} entries, expected {}", b.len(), s.out_ch)));
    }
    let (c, _, _) = s.x;
    let k = c * win.kernel.0 * win.kernel.1;
    let n = s.out.0 * s.out.1;
    let mut cols = vec![T::zero(); k * n];
    im2col(x.data(), s.x, win, s.out, &mut cols);
    let mut y = vec![T::zero(); s.out_ch * n];
    gemm(false, false, s.out_ch, k, n, w.data(), &cols, T::zero(), &mut y);
    add_bias(&mut y, b.data(), n);
    Tensor::from_vec(vec![s.out_ch, s.out.0, s.out.1], y)
}

/// Gradients of a convolution: `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    win: &Window,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let layer = "conv2d";
    let s = conv_shapes(layer, x, w, win)?;
    if dy.shape() != [s.out_ch, s.out.0, s.out.1] {
        return Err(Error::shape(layer, format!("upstream gradient has shape {:?}", dy.shape())));
    }
    let (c, _, _) = s.x;
    let k = c * win.kernel.0 * win.kernel.1;
    let n = s.out.0 * s.out.1;
    let mut cols = vec![T::zero(); k * n];
    im2col(x.data(), s.x, win, s.out, &mut cols);
    let mut dw = vec![T::zero(); s.out_ch * k];
    gemm(false, true, s.out_ch, n, k, dy.data(), &cols, T::zero(), &mut dw);
    let mut dcols = cols;
    gemm(true, false, k, s.out_ch, n, w.data(), dy.data(), T::zero(), &mut dcols);
    let mut dx = vec![T::zero(); x.len()];
    col2im(&dcols, s.x, win, s.out, &mut dx);
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec(w.shape().to_vec(), dw)?,
        Tensor::from_vec(vec![s.out_ch], bias_grad(dy.data(), s.out_ch, n))?,
    ))
}

struct DeconvShapes {
    x: (usize, usize, usize),
    out_ch: usize,
    out: (usize, usize),
}

fn deconv_shapes<T: Scalar>(
    layer: &str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    win: &Window,
) -> Result<DeconvShapes> {
    let (c, h, wd) = dims3(x, "input", layer)?;
    let (wc, o, kh, kw) = dims4(w, layer)?;
    if wc != c || (kh, kw) != win.kernel {
        return Err(Error::shape(
            layer,
            format!("kernel {:?} does not fit input with {c} channels", w.shape()),
        ));
    }
    if kh < win.stride.0 || kw < win.stride.1 {
        return Err(Error::shape(
            layer,
            format!("kernel {kh}x{kw} smaller than stride {:?}", win.stride),
        ));
    }
    let out = win
        .deconv_out(h, wd)
        .ok_or_else(|| Error::shape(layer, "padding exceeds output extent"))?;
    Ok(DeconvShapes {
        x: (c, h, wd),
        out_ch: o,
        out,
    })
}

/// Transposed convolution. The kernel has shape `(in, out, kh, kw)`.
pub fn deconv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let win = Window::new((w.shape().get(2).copied().unwrap_or(0), w.shape().get(3).copied().unwrap_or(0)), stride, pad);
    deconv2d_forward_named("deconv2d", x, w, b, &win)
}

pub(crate) fn deconv2d_forward_named<T: Scalar>(
    layer: &str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    win: &Window,
) -> Result<Tensor<T>> {
    let s = deconv_shapes(layer, x, w, win)?;
    if b.len() != s.out_ch {
        return Err(Error::shape(layer, format!("bias has {} entries, expected {}", b.len(), s.out_ch)));
    }
    let (c, h, wd) = s.x;
    let k = s.out_ch * win.kernel.0 * win.kernel.1;
    let n = h * wd;
    let mut cols = vec![T::zero(); k * n];
    gemm(true, false, k, c, n, w.data(), x.data(), T::zero(), &mut cols);
    let (oh, ow) = s.out;
    let mut y = vec![T::zero(); s.out_ch * oh * ow];
    col2im(&cols, (s.out_ch, oh, ow), win, (h, wd), &mut y);
    add_bias(&mut y, b.data(), oh * ow);
    Tensor::from_vec(vec![s.out_ch, oh, ow], y)
}

/// Gradients of a transposed convolution: `(d_input, d_kernel, d_bias)`.
pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    win: &Window,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let layer = "deconv2d";
    let s = deconv_shapes(layer, x, w, win)?;
    let (oh, ow) = s.out;
    if dy.shape() != [s.out_ch, oh, ow] {
        return Err(Error::shape(layer, format!("upstream gradient has shape {:?}", dy.shape())));
    }
    let (c, h, wd) = s.x;
    let k = s.out_ch * win.kernel.0 * win.kernel.1;
    let n = h * wd;
    let mut dcols = vec![T::zero(); k * n];
    im2col(dy.data(), (s.out_ch, oh, ow), win, (h, wd), &mut dcols);
    let mut dx = vec![T::zero(); c * n];
    gemm(false, false, c, k, n, w.data(), &dcols, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); c * k];
    gemm(false, true, c, n, k, x.data(), &dcols, T::zero(), &mut dw);
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec(w.shape().to_vec(), dw)?,
        Tensor::from_vec(vec![s.out_ch], bias_grad(dy.data(), s.out_ch, oh * ow))?,
    ))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|v| v.max(T::zero())).collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("same shape")
}

/// Backward of the rectifier given its forward output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(y, g)| if *y > T::zero() { *g } else { T::zero() })
        .collect();
    Tensor::from_vec(y.shape().to_vec(), data).expect("same shape")
}

/// Concatenates rank-3 tensors along channels.
pub fn concat_forward<T: Scalar>(layer: &str, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let mut spatial = None;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, h, w) = dims3(p, "concat input", layer)?;
        match spatial {
            None => spatial = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::shape(
                    layer,
                    format!("cannot concatenate {}x{} with {}x{}", s.0, s.1, h, w),
                ))
            }
            _ => {}
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    let (h, w) = spatial.ok_or_else(|| Error::shape(layer, "nothing to concatenate"))?;
    Tensor::from_vec(vec![channels, h, w], data)
}

/// Splits a concatenated gradient back into per-input channel ranges.
pub fn concat_backward<T: Scalar>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let (_, h, w) = dy.dims3().expect("rank-3 gradient");
    let mut offset = 0;
    channels
        .iter()
        .map(|&c| {
            let n = c * h * w;
            let part = dy.data()[offset..offset + n].to_vec();
            offset += n;
            Tensor::from_vec(vec![c, h, w], part).expect("split shape")
        })
        .collect()
}

/// Per-pixel softmax across channels.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3().expect("rank-3 tensor");
    let plane = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..plane {
        let m = (0..c).map(|k| src[k * plane + i]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for k in 0..c {
            let e = (src[k * plane + i] - m).exp();
            out[k * plane + i] = e;
            z = z + e;
        }
        for k in 0..c {
            out[k * plane + i] = out[k * plane + i] / z;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("same shape")
}

/// Backward of softmax given its forward output.
pub fn softmax_backward<T: Scalar>(p: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = p.dims3().expect("rank-3 tensor");
    let plane = h * w;
    let (pd, gd) = (p.data(), dy.data());
    let mut out = vec![T::zero(); pd.len()];
    for i in 0..plane {
        let s: T = (0..c).map(|k| pd[k * plane + i] * gd[k * plane + i]).sum();
        for k in 0..c {
            let j = k * plane + i;
            out[j] = pd[j] * (gd[j] - s);
        }
    }
    Tensor::from_vec(p.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn conv_hand_example() {
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let w = t(&[1, 1, 1, 3], &[1.0, 0.0, -1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_forward(&x, &w, &b, (1, 1), (0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3]);
        assert_eq!(y.data(), &[-2.0, -2.0, 2.0]);
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5, 7], &mut rng);
        let mut w = Tensor::zeros(vec![3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, &Tensor::zeros(vec![3]), (1, 1), (0, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_conv_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 8, 16], &mut rng);
        let w = random(&[5, 4, 4, 8], &mut rng);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(vec![5]), (2, 4), (1, 2)).unwrap();
        assert_eq!(y.shape(), &[5, 4, 4]);
    }

    #[test]
    fn conv_shape_mismatch_names_layer() {
        let x = Tensor::<f64>::zeros(vec![2, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![1, 3, 3, 3]);
        match conv2d_forward(&x, &w, &Tensor::zeros(vec![1]), (1, 1), (1, 1)) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "conv2d"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deconv_hand_example() {
        let x = t(&[1, 1, 2], &[1.0, 2.0]);
        let w = t(&[1, 1, 1, 2], &[1.0, 1.0]);
        let y = deconv2d_forward(&x, &w, &t(&[1], &[0.0]), (1, 2), (0, 0)).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_kernel_deconv_is_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 2, 4], &mut rng);
        let w = Tensor::zeros(vec![3, 2, 4, 4]);
        let b = t(&[2], &[0.5, -1.5]);
        let y = deconv2d_forward(&x, &w, &b, (2, 2), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 8]);
        assert!(y.data()[..32].iter().all(|v| *v == 0.5));
        assert!(y.data()[32..].iter().all(|v| *v == -1.5));
    }

    #[test]
    fn deconv_rejects_kernel_below_stride() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 2]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 1, 1]);
        assert!(deconv2d_forward(&x, &w, &Tensor::zeros(vec![1]), (2, 2), (0, 0)).is_err());
    }

    #[test]
    fn conv_deconv_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
            let kh = rng.random_range(1..5);
            let kw = rng.random_range(1..6);
            let stride = (rng.random_range(1..=kh), rng.random_range(1..=kw));
            let pad = (rng.random_range(0..kh), rng.random_range(0..kw));
            let win = Window::new((kh, kw), stride, pad);
            let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
            let Some((oh, ow)) = win.deconv_out(h, w) else { continue };
            let kernel = random(&[cin, cout, kh, kw], &mut rng);
            let small = random(&[cin, h, w], &mut rng);
            let big = random(&[cout, oh, ow], &mut rng);
            let up = deconv2d_forward(&small, &kernel, &Tensor::zeros(vec![cout]), stride, pad)
                .unwrap();
            let down =
                conv2d_forward(&big, &kernel, &Tensor::zeros(vec![cin]), stride, pad).unwrap();
            assert_eq!(down.shape(), small.shape());
            let (a, b) = (down.dot(&small), big.dot(&up));
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
        }
    }

    fn numeric_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Tensor<f64> {
        let eps = 1e-6;
        let mut g = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.len() {
            let mut a = x.clone();
            a.data_mut()[i] += eps;
            let mut b = x.clone();
            b.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&a) - f(&b)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let win = Window::new((3, 4), (2, 2), (1, 1));
        let x = random(&[2, 5, 6], &mut rng);
        let w = random(&[3, 2, 3, 4], &mut rng);
        let b = random(&[3], &mut rng);
        let y = conv2d_forward(&x, &w, &b, win.stride, win.pad).unwrap();
        let r = random(y.shape(), &mut rng);
        let (dx, dw, db) = conv2d_backward(&x, &w, &win, &r).unwrap();
        assert_close(&dx, &numeric_grad(&|x| conv2d_forward(x, &w, &b, win.stride, win.pad).unwrap().dot(&r), &x));
        assert_close(&dw, &numeric_grad(&|w| conv2d_forward(&x, w, &b, win.stride, win.pad).unwrap().dot(&r), &w));
        assert_close(&db, &numeric_grad(&|b| conv2d_forward(&x, &w, b, win.stride, win.pad).unwrap().dot(&r), &b));
    }

    #[test]
    fn deconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let win = Window::new((4, 8), (2, 4), (1, 2));
        let x = random(&[3, 2, 3], &mut rng);
        let w = random(&[3, 2, 4, 8], &mut rng);
        let b = random(&[2], &mut rng);
        let y = deconv2d_forward(&x, &w, &b, win.stride, win.pad).unwrap();
        assert_eq!(y.shape(), &[2, 4, 12]);
        let r = random(y.shape(), &mut rng);
        let (dx, dw, db) = deconv2d_backward(&x, &w, &win, &r).unwrap();
        assert_close(&dx, &numeric_grad(&|x| deconv2d_forward(x, &w, &b, win.stride, win.pad).unwrap().dot(&r), &x));
        assert_close(&dw, &numeric_grad(&|w| deconv2d_forward(&x, w, &b, win.stride, win.pad).unwrap().dot(&r), &w));
        assert_close(&db, &numeric_grad(&|b| deconv2d_forward(&x, &w, b, win.stride, win.pad).unwrap().dot(&r), &b));
    }

    #[test]
    fn softmax_sums_to_one_and_backprops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 3, 4], &mut rng);
        let p = softmax_forward(&x);
        for i in 0..12 {
            assert!((p.data()[i] + p.data()[12 + i] - 1.0).abs() < 1e-12);
        }
        let r = random(&[2, 3, 4], &mut rng);
        let g = softmax_backward(&p, &r);
        assert_close(&g, &numeric_grad(&|x| softmax_forward(x).dot(&r), &x));
    }

    #[test]
    fn concat_round_trip() {
        let a = t(&[1, 1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = concat_forward("cat", &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 1, 2]);
        let parts = concat_backward(&c, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let bad = t(&[1, 2, 1], &[0.0, 0.0]);
        assert!(concat_forward("cat", &[&a, &bad]).is_err());
    }
}
