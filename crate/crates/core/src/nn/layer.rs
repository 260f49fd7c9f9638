//! Layer vocabulary and the per-layer forward/backward kernels.
//!
//! Activations are batched row-major tensors: `(B, C, H, W)` for feature maps
//! and `(B, D)` for vectors. Convolutions use zero "same" padding
//! (`pad = kernel / 2`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    MaxPool2x2,
    Relu,
    Dense {
        units: usize,
    },
    GlobalAvgPool,
    Softmax,
}

impl LayerKind {
    pub fn conv(filters: usize, kernel: usize) -> Self {
        LayerKind::Conv2d {
            filters,
            kernel,
            stride: 1,
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| Error::LayerShape {
            layer: self.name.clone(),
            detail,
        };
        match self.kind {
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
            } => {
                let [_, h, w] = as_chw(input).map_err(bad)?;
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(bad(format!("kernel size {kernel} must be odd")));
                }
                if filters == 0 || stride == 0 {
                    return Err(bad("filters and stride must be positive".into()));
                }
                let pad = kernel / 2;
                Ok(vec![
                    filters,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerKind::MaxPool2x2 => {
                let [c, h, w] = as_chw(input).map_err(bad)?;
                if h < 2 || w < 2 {
                    return Err(bad(format!("cannot pool a {h}x{w} map")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Dense { units } => {
                if units == 0 {
                    return Err(bad("dense layer needs at least one unit".into()));
                }
                Ok(vec![units])
            }
            LayerKind::GlobalAvgPool => {
                let [c, _, _] = as_chw(input).map_err(bad)?;
                Ok(vec![c])
            }
            LayerKind::Softmax => {
                if input.len() != 1 {
                    return Err(bad(format!("softmax expects a vector, got {input:?}")));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Shapes of (weight, bias) for learnable layers.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match self.kind {
            LayerKind::Conv2d {
                filters, kernel, ..
            } => Some((vec![filters, input[0], kernel, kernel], vec![filters])),
            LayerKind::Dense { units } => {
                Some((vec![units, input.iter().product()], vec![units]))
            }
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` as used by Glorot initialization.
    pub fn fans(&self, input: &[usize]) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Conv2d {
                filters, kernel, ..
            } => {
                let field = kernel * kernel;
                Some((input[0] * field, filters * field))
            }
            LayerKind::Dense { units } => Some((input.iter().product(), units)),
            _ => None,
        }
    }
}

fn as_chw(shape: &[usize]) -> std::result::Result<[usize; 3], String> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(format!("expected a (C, H, W) feature map, got {other:?}")),
    }
}

/// Glorot/Xavier uniform weights: `U(-L, L)` with `L = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init(spec: &LayerSpec, input: &[usize], seed: u64) -> Result<Tensor<f32>> {
    let (Some((fan_in, fan_out)), Some((shape, _))) = (spec.fans(input), spec.param_shapes(input))
    else {
        return Err(Error::InvalidArgument(format!(
            "layer `{}` has no learnable parameters",
            spec.name
        )));
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape, data)
}

/// Copies the receptive fields of one `(C, H, W)` image into a
/// `(C*k*k, Ho*Wo)` column matrix.
fn im2col<T: Scalar>(
    img: &[T],
    [c, h, w]: [usize; 3],
    kernel: usize,
    stride: usize,
    [ho, wo]: [usize; 2],
    col: &mut [T],
) {
    let pad = kernel as isize / 2;
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let out = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into the image.
fn col2im<T: Scalar>(
    col: &[T],
    [c, h, w]: [usize; 3],
    kernel: usize,
    stride: usize,
    [ho, wo]: [usize; 2],
    img: &mut [T],
) {
    let pad = kernel as isize / 2;
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] = img[base + ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kernel) = (weight.shape()[0], weight.shape()[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let rows = c * kernel * kernel;
    let plane = ho * wo;
    let mut col = vec![T::zero(); rows * plane];
    let mut y = Tensor::zeros(vec![b, f, ho, wo]);
    for i in 0..b {
        im2col(x.sample(i), [c, h, w], kernel, stride, [ho, wo], &mut col);
        let out = y.sample_mut(i);
        for (fi, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[fi]);
        }
        T::gemm(
            f,
            rows,
            plane,
            T::one(),
            weight.data(),
            rows as isize,
            1,
            &col,
            plane as isize,
            1,
            T::one(),
            out,
            plane as isize,
            1,
        );
    }
    y
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kernel) = (weight.shape()[0], weight.shape()[2]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let rows = c * kernel * kernel;
    let plane = ho * wo;
    let mut col = vec![T::zero(); rows * plane];
    let mut dcol = vec![T::zero(); rows * plane];
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = Tensor::zeros(vec![f]);
    for i in 0..b {
        let g = dy.sample(i);
        im2col(x.sample(i), [c, h, w], kernel, stride, [ho, wo], &mut col);
        // dW += dY (f x plane) * col^T (plane x rows)
        T::gemm(
            f,
            plane,
            rows,
            T::one(),
            g,
            plane as isize,
            1,
            &col,
            1,
            plane as isize,
            T::one(),
            dw.data_mut(),
            rows as isize,
            1,
        );
        for (fi, chunk) in g.chunks(plane).enumerate() {
            let s: T = chunk.iter().copied().sum();
            db.data_mut()[fi] = db.data()[fi] + s;
        }
        // dcol = W^T (rows x f) * dY (f x plane)
        T::gemm(
            rows,
            f,
            plane,
            T::one(),
            weight.data(),
            1,
            rows as isize,
            g,
            plane as isize,
            1,
            T::zero(),
            &mut dcol,
            plane as isize,
            1,
        );
        col2im(&dcol, [c, h, w], kernel, stride, [ho, wo], dx.sample_mut(i));
    }
    (dx, dw, db)
}

pub(crate) fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let b = x.batch();
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let mut y = Tensor::zeros(vec![b, out]);
    for row in y.data_mut().chunks_mut(out) {
        row.copy_from_slice(bias.data());
    }
    // Y (b x out) += X (b x in) * W^T (in x out)
    T::gemm(
        b,
        inp,
        out,
        T::one(),
        x.data(),
        inp as isize,
        1,
        weight.data(),
        1,
        inp as isize,
        T::one(),
        y.data_mut(),
        out as isize,
        1,
    );
    y
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let b = x.batch();
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let mut dw = Tensor::zeros(vec![out, inp]);
    // dW (out x in) = dY^T (out x b) * X (b x in)
    T::gemm(
        out,
        b,
        inp,
        T::one(),
        dy.data(),
        1,
        out as isize,
        x.data(),
        inp as isize,
        1,
        T::zero(),
        dw.data_mut(),
        inp as isize,
        1,
    );
    let mut db = Tensor::zeros(vec![out]);
    for row in dy.data().chunks(out) {
        for (d, g) in db.data_mut().iter_mut().zip(row) {
            *d = *d + *g;
        }
    }
    let mut dx = Tensor::zeros(x.shape().to_vec());
    // dX (b x in) = dY (b x out) * W (out x in)
    T::gemm(
        b,
        out,
        inp,
        T::one(),
        dy.data(),
        out as isize,
        1,
        weight.data(),
        inp as isize,
        1,
        T::zero(),
        dx.data_mut(),
        inp as isize,
        1,
    );
    (dx, dw, db)
}

pub(crate) fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.map_inplace(|v| if v > T::zero() { v } else { T::zero() });
    y
}

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu gradient keeps the input shape")
}

/// 2x2/stride-2 max pooling. Also returns, for every output element, the flat
/// input index that won; ties go to the first element in row-major order.
pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(vec![b, c, ho, wo]);
    let mut idx = vec![0u32; b * c * ho * wo];
    let xd = x.data();
    let yd = y.data_mut();
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                yd[o] = xd[best];
                idx[o] = best as u32;
                o += 1;
            }
        }
    }
    (y, idx)
}

pub(crate) fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i as usize] = d[i as usize] + g;
    }
    dx
}

pub(crate) fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    let scale = T::of(1.0 / plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(vec![b, c], data).expect("pooled shape")
}

pub(crate) fn gap_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let scale = T::of(1.0 / plane as f64);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.fill(g * scale);
    }
    dx
}

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.sample_len();
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(d) {
        softmax_inplace(row);
    }
    y
}

pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Vector-Jacobian product of softmax given its output `p`:
/// `dz = p * (dp - <dp, p>)`.
pub(crate) fn softmax_backward<T: Scalar>(p: &Tensor<T>, dp: &Tensor<T>) -> Tensor<T> {
    let d = p.sample_len();
    let mut dz = Tensor::zeros(p.shape().to_vec());
    for ((out, pr), gr) in dz
        .data_mut()
        .chunks_mut(d)
        .zip(p.data().chunks(d))
        .zip(dp.data().chunks(d))
    {
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &pi), &gi) in out.iter_mut().zip(pr).zip(gr) {
            *o = pi * (gi - dot);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds_and_determinism() {
        let spec = LayerSpec::new("fc", LayerKind::Dense { units: 100 });
        let a = xavier_init(&spec, &[100], 3).unwrap();
        let b = xavier_init(&spec, &[100], 3).unwrap();
        assert_eq!(a, b);
        let limit = 0.06f32.sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= limit));
        assert!((limit - 0.2449).abs() < 1e-4);
        let c = xavier_init(&spec, &[100], 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_conv_variance_matches_glorot() {
        // fan_in = 3*3*16, fan_out = 3*3*32; variance of U(-L, L) is L^2/3.
        let spec = LayerSpec::new("c", LayerKind::conv(32, 3));
        let mut samples = Vec::new();
        let mut seed = 0;
        while samples.len() < 100_000 {
            samples.extend_from_slice(xavier_init(&spec, &[16, 8, 8], seed).unwrap().data());
            seed += 1;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let expected = 2.0 / (144.0 + 288.0);
        assert!((var - expected).abs() / expected < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn xavier_rejects_parameterless_layers() {
        let spec = LayerSpec::new("r", LayerKind::Relu);
        assert!(xavier_init(&spec, &[4], 0).is_err());
    }

    #[test]
    fn even_kernels_are_rejected() {
        let spec = LayerSpec::new("c", LayerKind::conv(4, 2));
        assert!(spec.output_shape(&[1, 8, 8]).is_err());
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::new(vec![1, 1, 4, 5], (0..20).map(f64::from).collect()).unwrap();
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let b = Tensor::zeros(vec![1]);
        let y = conv_forward(&x, &w, &b, 1, &[1, 4, 5]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn maxpool_tie_goes_to_first_element() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (y, idx) = maxpool_forward(&x);
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(idx, vec![0]);
        let dy = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let dx = maxpool_backward(x.shape(), &idx, &dy);
        assert_eq!(dx.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_normalize_for_extreme_logits() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![1000.0, -1000.0, 0.0, 1e-3, 2e-3, 3e-3])
            .unwrap();
        let y = softmax_forward(&x);
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
