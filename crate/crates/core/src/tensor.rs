//! Dense f64 tensors and the three layer kinds a victim network is built from.
//!
//! Every layer exposes a forward map and a vector-Jacobian product with respect
//! to its input. Affine and convolution layers additionally produce parameter
//! gradients for the trainer. Convolution is cross-correlation with zero
//! padding; the ReLU subgradient at exactly zero is taken to be zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Affine {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::InvalidShape(format!(
                "affine weight must be 2-d, got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::ShapeMismatch {
                expected: vec![weight.shape()[0]],
                actual: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out_channels, in_channels, kernel_h, kernel_w]`
    pub kernel: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if kernel.shape().len() != 4 {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel must be 4-d, got {:?}",
                kernel.shape()
            )));
        }
        if bias.shape() != [kernel.shape()[0]] {
            return Err(Error::ShapeMismatch {
                expected: vec![kernel.shape()[0]],
                actual: bias.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 3]> {
        if input.len() != 3 || input[0] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.in_channels(), input.get(1).copied().unwrap_or(0), input.get(2).copied().unwrap_or(0)],
                actual: input.to_vec(),
            });
        }
        let (kh, kw) = self.kernel_size();
        let oh = conv_out_dim(input[1], kh, self.stride, self.padding);
        let ow = conv_out_dim(input[2], kw, self.stride, self.padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok([self.out_channels(), oh, ow]),
            _ => Err(Error::InvalidShape(format!(
                "conv2d with kernel {kh}x{kw}, stride {}, padding {} has no valid output on input {input:?}",
                self.stride, self.padding
            ))),
        }
    }
}

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + k - pad` lies in `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if n + pad <= k {
        return (0, 0);
    }
    let hi = ((n - 1 + pad - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Affine,
    Conv2d,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Conv2d(Conv2d),
    Relu,
}

/// Parameter gradients of a single layer, in the same layout as its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Affine(_) => LayerKind::Affine,
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Affine(a) => {
                let n: usize = input.iter().product();
                if n != a.in_features() {
                    return Err(Error::ShapeMismatch {
                        expected: vec![a.in_features()],
                        actual: input.to_vec(),
                    });
                }
                Ok(vec![a.out_features()])
            }
            Layer::Conv2d(c) => Ok(c.output_shape(input)?.to_vec()),
            Layer::Relu => Ok(input.to_vec()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Affine(a) => affine_forward(x, a),
            Layer::Conv2d(c) => conv2d_forward(x, c),
            Layer::Relu => Ok(relu_forward(x)),
        }
    }

    /// Gradient with respect to the input and, for parametrised layers, the parameters.
    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Tensor, Option<ParamGrads>)> {
        match self {
            Layer::Affine(a) => {
                let (dx, grads) = affine_backward(x, a, upstream, true)?;
                Ok((dx, grads))
            }
            Layer::Conv2d(c) => {
                let (dx, grads) = conv2d_backward(x, c, upstream, true)?;
                Ok((dx, grads))
            }
            Layer::Relu => Ok((relu_backward(x, upstream)?, None)),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Affine(a) => vec![&a.weight, &a.bias],
            Layer::Conv2d(c) => vec![&c.kernel, &c.bias],
            Layer::Relu => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Affine(a) => vec![&mut a.weight, &mut a.bias],
            Layer::Conv2d(c) => vec![&mut c.kernel, &mut c.bias],
            Layer::Relu => Vec::new(),
        }
    }
}

/// `y = W x + b`, with `x` flattened in row-major order.
pub fn affine_forward(x: &Tensor, layer: &Affine) -> Result<Tensor> {
    let (out, inp) = (layer.out_features(), layer.in_features());
    if x.len() != inp {
        return Err(Error::ShapeMismatch {
            expected: layer.weight.shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    let w = layer.weight.data();
    let xs = x.data();
    let y = (0..out)
        .map(|i| {
            let row = &w[i * inp..(i + 1) * inp];
            row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + layer.bias.data()[i]
        })
        .collect();
    Ok(Tensor {
        shape: vec![out],
        data: y,
    })
}

fn affine_backward(
    x: &Tensor,
    layer: &Affine,
    upstream: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<ParamGrads>)> {
    let (out, inp) = (layer.out_features(), layer.in_features());
    if x.len() != inp {
        return Err(Error::ShapeMismatch {
            expected: layer.weight.shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    if upstream.shape() != [out] {
        return Err(Error::ShapeMismatch {
            expected: vec![out],
            actual: upstream.shape().to_vec(),
        });
    }
    let w = layer.weight.data();
    let up = upstream.data();
    let mut dx = vec![0.0; inp];
    for (i, &g) in up.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[i * inp..(i + 1) * inp];
        for (d, &wij) in dx.iter_mut().zip(row) {
            *d += wij * g;
        }
    }
    let grads = want_params.then(|| {
        let mut dw = vec![0.0; out * inp];
        for (i, &g) in up.iter().enumerate() {
            for (d, &xj) in dw[i * inp..(i + 1) * inp].iter_mut().zip(x.data()) {
                *d = g * xj;
            }
        }
        ParamGrads {
            weight: Tensor {
                shape: vec![out, inp],
                data: dw,
            },
            bias: upstream.clone(),
        }
    });
    Ok((
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
        },
        grads,
    ))
}

/// Zero-padded, strided cross-correlation of a `[C, H, W]` input.
pub fn conv2d_forward(x: &Tensor, layer: &Conv2d) -> Result<Tensor> {
    let [oc, oh, ow] = layer.output_shape(x.shape())?;
    let (ic, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = layer.kernel_size();
    let (s, p) = (layer.stride, layer.padding);
    let k = layer.kernel.data();
    let xs = x.data();
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(layer.bias.data()[o]);
        for c in 0..ic {
            let xin = &xs[c * h * w..(c + 1) * h * w];
            for ki in 0..kh {
                let (i_lo, i_hi) = valid_range(h, oh, ki, s, p);
                for kj in 0..kw {
                    let wv = k[((o * ic + c) * kh + ki) * kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (j_lo, j_hi) = valid_range(w, ow, kj, s, p);
                    for i in i_lo..i_hi {
                        let row = (i * s + ki - p) * w;
                        let orow = &mut plane[i * ow..(i + 1) * ow];
                        for j in j_lo..j_hi {
                            orow[j] += wv * xin[row + j * s + kj - p];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![oc, oh, ow],
        data: out,
    })
}

fn conv2d_backward(
    x: &Tensor,
    layer: &Conv2d,
    upstream: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<ParamGrads>)> {
    let [oc, oh, ow] = layer.output_shape(x.shape())?;
    if upstream.shape() != [oc, oh, ow] {
        return Err(Error::ShapeMismatch {
            expected: vec![oc, oh, ow],
            actual: upstream.shape().to_vec(),
        });
    }
    let (ic, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = layer.kernel_size();
    let (s, p) = (layer.stride, layer.padding);
    let k = layer.kernel.data();
    let xs = x.data();
    let up = upstream.data();
    let mut dx = vec![0.0; ic * h * w];
    let mut dk = if want_params {
        vec![0.0; k.len()]
    } else {
        Vec::new()
    };
    for o in 0..oc {
        let uplane = &up[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ic {
            let xin = &xs[c * h * w..(c + 1) * h * w];
            let dxin = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..kh {
                let (i_lo, i_hi) = valid_range(h, oh, ki, s, p);
                for kj in 0..kw {
                    let kidx = ((o * ic + c) * kh + ki) * kw + kj;
                    let wv = k[kidx];
                    let (j_lo, j_hi) = valid_range(w, ow, kj, s, p);
                    let mut acc = 0.0;
                    for i in i_lo..i_hi {
                        let row = (i * s + ki - p) * w;
                        let urow = &uplane[i * ow..(i + 1) * ow];
                        for j in j_lo..j_hi {
                            let xi = row + j * s + kj - p;
                            dxin[xi] += wv * urow[j];
                            acc += urow[j] * xin[xi];
                        }
                    }
                    if want_params {
                        dk[kidx] = acc;
                    }
                }
            }
        }
    }
    let grads = want_params.then(|| {
        let db = (0..oc)
            .map(|o| up[o * oh * ow..(o + 1) * oh * ow].iter().sum())
            .collect();
        ParamGrads {
            weight: Tensor {
                shape: layer.kernel.shape().to_vec(),
                data: dk,
            },
            bias: Tensor {
                shape: vec![oc],
                data: db,
            },
        }
    });
    Ok((
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
        },
        grads,
    ))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            actual: upstream.shape().to_vec(),
        });
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// `J^T upstream`, where `J` is the Jacobian of `layer` at `x`.
pub fn layer_vjp(layer: &Layer, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Affine(a) => Ok(affine_backward(x, a, upstream, false)?.0),
        Layer::Conv2d(c) => Ok(conv2d_backward(x, c, upstream, false)?.0),
        Layer::Relu => relu_backward(x, upstream),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_conv(ic: usize, oc: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng) -> Conv2d {
        Conv2d::new(random_tensor(&[oc, ic, k, k], rng), random_tensor(&[oc], rng), s, p).unwrap()
    }

    /// Direct nested-loop convolution with explicit bounds checks.
    fn naive_conv(x: &Tensor, c: &Conv2d) -> Vec<f64> {
        let [oc, oh, ow] = c.output_shape(x.shape()).unwrap();
        let (ic, h, w) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
        let (kh, kw) = c.kernel_size();
        let mut out = Vec::new();
        for o in 0..oc {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = c.bias.data()[o];
                    for ch in 0..ic {
                        for a in 0..kh {
                            for b in 0..kw {
                                let y = (i * c.stride + a) as isize - c.padding as isize;
                                let xx = (j * c.stride + b) as isize - c.padding as isize;
                                if y < 0 || xx < 0 || y >= h || xx >= w {
                                    continue;
                                }
                                let xi = (ch as isize * h + y) * w + xx;
                                acc += c.kernel.data()[((o * ic + ch) * kh + a) * kw + b]
                                    * x.data()[xi as usize];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn tensor_rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn affine_zero_weights_gives_bias() {
        let a = Affine::new(Tensor::zeros(&[1, 3]), Tensor::vector(vec![5.0])).unwrap();
        let y = affine_forward(&Tensor::vector(vec![1.0, -7.0, 3.5]), &a).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn affine_identity() {
        let a = Affine::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let y = affine_forward(&Tensor::vector(vec![3.0, -1.0]), &a).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn affine_small_matrix() {
        let a = Affine::new(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::vector(vec![1.0, 1.0]),
        )
        .unwrap();
        let y = affine_forward(&Tensor::vector(vec![1.0, 1.0]), &a).unwrap();
        assert_eq!(y.data(), &[4.0, 8.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let a = Affine::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])).unwrap();
        let err = affine_forward(&Tensor::vector(vec![1.0, 2.0]), &a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[1, 4, 5], &mut rng);
        let c = Conv2d::new(Tensor::filled(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(conv2d_forward(&x, &c).unwrap(), x);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[2, 5, 5], &mut rng);
        let c = Conv2d::new(Tensor::zeros(&[3, 2, 3, 3]), Tensor::vector(vec![1.5, 1.5, 1.5]), 2, 1)
            .unwrap();
        let y = conv2d_forward(&x, &c).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn conv_window_sums() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let c = Conv2d::new(Tensor::filled(&[1, 1, 2, 2], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        let y = conv2d_forward(&x, &c).unwrap();
        // windows: [1,2,4,5] [2,3,5,6] [4,5,7,8] [5,6,8,9]
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
        assert_eq!(y.data(), naive_conv(&x, &c).as_slice());
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ic, oc, k, s, p, h, w) in &[
            (3, 4, 3, 1, 1, 6, 7),
            (2, 2, 3, 2, 1, 7, 6),
            (1, 3, 2, 3, 0, 8, 8),
            (2, 1, 5, 1, 3, 4, 4),
            (1, 1, 3, 2, 2, 1, 1),
        ] {
            let x = random_tensor(&[ic, h, w], &mut rng);
            let c = random_conv(ic, oc, k, s, p, &mut rng);
            let got = conv2d_forward(&x, &c).unwrap();
            for (a, b) in got.data().iter().zip(naive_conv(&x, &c)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_without_valid_output_is_error() {
        let c = Conv2d::new(Tensor::zeros(&[1, 1, 5, 5]), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert!(conv2d_forward(&Tensor::zeros(&[1, 3, 3]), &c).is_err());
        assert!(Conv2d::new(Tensor::zeros(&[1, 1, 1, 1]), Tensor::zeros(&[1]), 0, 0).is_err());
    }

    #[test]
    fn relu_examples() {
        let y = relu_forward(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let y = relu_forward(&Tensor::vector(vec![-1.0, -0.5, -3.0]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_vjp_example() {
        let x = Tensor::vector(vec![-1.0, 2.0]);
        let g = layer_vjp(&Layer::Relu, &x, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
        let g = layer_vjp(&Layer::Relu, &Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn affine_vjp_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Affine::new(random_tensor(&[3, 4], &mut rng), random_tensor(&[3], &mut rng)).unwrap();
        let x = random_tensor(&[4], &mut rng);
        let up = random_tensor(&[3], &mut rng);
        let g = layer_vjp(&Layer::Affine(a.clone()), &x, &up).unwrap();
        for j in 0..4 {
            let expect: f64 = (0..3).map(|i| a.weight.data()[i * 4 + j] * up.data()[i]).sum();
            assert_eq!(g.data()[j], expect);
        }
    }

    #[test]
    fn vjp_rejects_wrong_upstream() {
        let c = Conv2d::new(Tensor::zeros(&[1, 1, 2, 2]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let err = layer_vjp(&Layer::Conv2d(c), &Tensor::zeros(&[1, 3, 3]), &Tensor::zeros(&[1, 3, 3]));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    fn fd_vjp(layer: &Layer, x: &Tensor, up: &Tensor, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fp = layer.forward(&xp).unwrap();
                let fm = layer.forward(&xm).unwrap();
                fp.data()
                    .iter()
                    .zip(fm.data())
                    .zip(up.data())
                    .map(|((a, b), u)| (a - b) / (2.0 * h) * u)
                    .sum()
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if den == 0.0 { num } else { num / den }
    }

    #[test]
    fn conv_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(s, p) in &[(1, 0), (1, 1), (2, 1)] {
            let c = random_conv(1, 2, 3, s, p, &mut rng);
            let x = random_tensor(&[1, 4, 4], &mut rng);
            let layer = Layer::Conv2d(c);
            let out = layer.forward(&x).unwrap();
            let up = random_tensor(out.shape(), &mut rng);
            let g = layer_vjp(&layer, &x, &up).unwrap();
            let fd = fd_vjp(&layer, &x, &up, 1e-5);
            assert!(rel_err(g.data(), &fd) <= 1e-6, "stride {s} pad {p}");
        }
    }

    #[test]
    fn conv_param_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_conv(2, 3, 3, 2, 1, &mut rng);
        let x = random_tensor(&[2, 5, 5], &mut rng);
        let out = conv2d_forward(&x, &c).unwrap();
        let up = random_tensor(out.shape(), &mut rng);
        let (_, grads) = Layer::Conv2d(c.clone()).backward(&x, &up).unwrap();
        let grads = grads.unwrap();
        let loss = |c: &Conv2d| -> f64 {
            conv2d_forward(&x, c).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..c.kernel.len() {
            let mut cp = c.clone();
            cp.kernel.data_mut()[i] += h;
            let mut cm = c.clone();
            cm.kernel.data_mut()[i] -= h;
            let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
            assert!((fd - grads.weight.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for i in 0..3 {
            let mut cp = c.clone();
            cp.bias.data_mut()[i] += h;
            let mut cm = c.clone();
            cm.bias.data_mut()[i] -= h;
            let fd = (loss(&cp) - loss(&cm)) / (2.0 * h);
            assert!((fd - grads.bias.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn affine_param_grads() {
        let a = Affine::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let up = Tensor::vector(vec![10.0, -1.0]);
        let (_, g) = Layer::Affine(a).backward(&x, &up).unwrap();
        let g = g.unwrap();
        assert_eq!(g.weight.data(), &[10.0, 20.0, 30.0, -1.0, -2.0, -3.0]);
        assert_eq!(g.bias.data(), &[10.0, -1.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-10.0f64..10.0, n)
        }

        proptest! {
            #[test]
            fn relu_idempotent(xs in proptest::collection::vec(-100.0f64..100.0, 1..64)) {
                let x = Tensor::vector(xs);
                let once = relu_forward(&x);
                prop_assert_eq!(relu_forward(&once), once);
            }

            #[test]
            fn relu_vjp_matches_fd_away_from_kink(xs in vec_strategy(12), up in vec_strategy(12)) {
                prop_assume!(xs.iter().all(|v| v.abs() > 1e-3));
                let x = Tensor::vector(xs);
                let up = Tensor::vector(up);
                let g = layer_vjp(&Layer::Relu, &x, &up).unwrap();
                let fd = fd_vjp(&Layer::Relu, &x, &up, 1e-6);
                prop_assert!(rel_err(g.data(), &fd) <= 1e-4);
            }

            #[test]
            fn affine_and_conv_are_linear_without_bias(
                seed in any::<u64>(),
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let conv = Layer::Conv2d(Conv2d::new(
                    random_tensor(&[2, 2, 3, 3], &mut rng), Tensor::zeros(&[2]), 2, 1).unwrap());
                let aff = Layer::Affine(Affine::new(random_tensor(&[3, 18], &mut rng), Tensor::zeros(&[3])).unwrap());
                let x = random_tensor(&[2, 3, 3], &mut rng);
                let y = random_tensor(&[2, 3, 3], &mut rng);
                let mix = Tensor::new(vec![2, 3, 3],
                    x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
                for layer in [&conv, &aff] {
                    let lhs = layer.forward(&mix).unwrap();
                    let fx = layer.forward(&x).unwrap();
                    let fy = layer.forward(&y).unwrap();
                    let rhs: Vec<f64> = fx.data().iter().zip(fy.data()).map(|(p, q)| a * p + b * q).collect();
                    prop_assert!(rel_err(lhs.data(), &rhs) <= 1e-10);
                }
            }

            #[test]
            fn layer_vjps_match_fd(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let conv = Layer::Conv2d(random_conv(2, 2, 3, 1, 1, &mut rng));
                let x = random_tensor(&[2, 4, 4], &mut rng);
                let up = random_tensor(&[2, 4, 4], &mut rng);
                prop_assert!(rel_err(layer_vjp(&conv, &x, &up).unwrap().data(), &fd_vjp(&conv, &x, &up, 1e-5)) <= 1e-4);

                let aff = Layer::Affine(Affine::new(random_tensor(&[3, 32], &mut rng), random_tensor(&[3], &mut rng)).unwrap());
                let up = random_tensor(&[3], &mut rng);
                prop_assert!(rel_err(layer_vjp(&aff, &x, &up).unwrap().data(), &fd_vjp(&aff, &x, &up, 1e-5)) <= 1e-4);
            }

            #[test]
            fn forwards_are_deterministic(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let conv = random_conv(3, 4, 3, 2, 1, &mut rng);
                let x = random_tensor(&[3, 6, 6], &mut rng);
                let a = conv2d_forward(&x, &conv).unwrap();
                let b = conv2d_forward(&x, &conv).unwrap();
                prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }
}
