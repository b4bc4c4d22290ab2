//! The victim regression network: preprocessing, layer stack, prediction,
//! input gradients and the JSON model file.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageU8;
use crate::init::{xavier_init, xavier_uniform};
use crate::tensor::{Affine, Conv2d, Layer, LayerKind, Tensor};

pub const MODEL_FORMAT: &str = "range-attack-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    /// Scalar subtracted from every pixel, in pixel units.
    pub grand_mean: f64,
    /// Reverse channel order (RGB -> BGR) before mean subtraction.
    pub swap_channels: bool,
}

impl PreprocessSpec {
    pub fn new(grand_mean: f64, swap_channels: bool) -> Result<Self> {
        if !(0.0..=255.0).contains(&grand_mean) {
            return Err(Error::InvalidArgument(format!(
                "grand mean must lie in [0, 255], got {grand_mean}"
            )));
        }
        Ok(Self {
            grand_mean,
            swap_channels,
        })
    }

    /// Map a raw pixel-domain tensor `[C, H, W]` to network input.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = if self.swap_channels {
            swap_channel_order(x)
        } else {
            x.clone()
        };
        for v in out.data_mut() {
            *v -= self.grand_mean;
        }
        out
    }

    /// Pull a gradient with respect to network input back to the raw pixel domain.
    fn pullback(&self, grad: Tensor) -> Tensor {
        if self.swap_channels {
            swap_channel_order(&grad)
        } else {
            grad
        }
    }
}

fn swap_channel_order(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let plane = x.len() / c;
    let mut data = Vec::with_capacity(x.len());
    for ch in (0..c).rev() {
        data.extend_from_slice(&x.data()[ch * plane..(ch + 1) * plane]);
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimNetwork {
    input_shape: [usize; 3],
    preprocess: PreprocessSpec,
    layers: Vec<Layer>,
}

impl VictimNetwork {
    /// Validates that the layers compose on `input_shape` and end in a single scalar.
    pub fn new(input_shape: [usize; 3], preprocess: PreprocessSpec, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::InvalidShape(format!("input shape must be positive, got {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| {
                Error::InvalidShape(format!("layer {i} ({:?}): {e}", layer.kind()))
            })?;
        }
        match layers.last() {
            Some(Layer::Affine(a)) if a.out_features() == 1 => {}
            _ => {
                return Err(Error::InvalidShape(
                    "network must end in an affine layer with one output".into(),
                ))
            }
        }
        Ok(Self {
            input_shape,
            preprocess,
            layers,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn preprocess(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.to_vec(),
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// `f(X)` for an integer image.
    pub fn forward(&self, image: &ImageU8) -> Result<f64> {
        self.check_input(&image.shape())?;
        self.predict(&image.to_tensor())
    }

    /// `f` on a real-valued pixel-domain input (the relaxed `X + delta`).
    pub fn predict(&self, x_real: &Tensor) -> Result<f64> {
        self.check_input(x_real.shape())?;
        let mut act = self.preprocess.apply(x_real);
        for layer in &self.layers {
            act = layer.forward(&act)?;
        }
        Ok(act.data()[0])
    }

    /// Activations entering each layer, plus the final scalar output.
    pub(crate) fn trace(&self, x_real: &Tensor) -> Result<(Vec<Tensor>, f64)> {
        self.check_input(x_real.shape())?;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut act = self.preprocess.apply(x_real);
        for layer in &self.layers {
            let next = layer.forward(&act)?;
            acts.push(act);
            act = next;
        }
        Ok((acts, act.data()[0]))
    }

    /// Prediction and its gradient with respect to raw pixel values.
    pub fn predict_with_gradient(&self, x_real: &Tensor) -> Result<(f64, Tensor)> {
        let (acts, y) = self.trace(x_real)?;
        let mut grad = Tensor::vector(vec![1.0]);
        for (layer, act) in self.layers.iter().zip(&acts).rev() {
            grad = crate::tensor::layer_vjp(layer, act, &grad)?;
        }
        Ok((y, self.preprocess.pullback(grad)))
    }

    pub fn input_gradient(&self, x_real: &Tensor) -> Result<Tensor> {
        Ok(self.predict_with_gradient(x_real)?.1)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.len()).sum()
    }
}

/// Small conv stack: conv(C->8, 3x3, s1, p1), relu, conv(8->8, 3x3, s2, p1), relu,
/// affine(->32), relu, affine(->1). Weights Xavier-uniform, biases zero.
pub fn default_victim<R: Rng + ?Sized>(
    input_shape: [usize; 3],
    preprocess: PreprocessSpec,
    rng: &mut R,
) -> Result<VictimNetwork> {
    let [c, _, _] = input_shape;
    let conv = |ic: usize, oc: usize, stride: usize, rng: &mut R| -> Result<Layer> {
        Ok(Layer::Conv2d(Conv2d::new(
            xavier_uniform(vec![oc, ic, 3, 3], ic * 9, oc * 9, rng)?,
            Tensor::zeros(&[oc]),
            stride,
            1,
        )?))
    };
    let c1 = conv(c, 8, 1, rng)?;
    let s1 = c1.output_shape(&input_shape)?;
    let c2 = conv(8, 8, 2, rng)?;
    let s2 = c2.output_shape(&s1)?;
    let flat: usize = s2.iter().product();
    let fc1 = Layer::Affine(Affine::new(xavier_init(flat, 32, rng)?, Tensor::zeros(&[32]))?);
    let fc2 = Layer::Affine(Affine::new(xavier_init(32, 1, rng)?, Tensor::zeros(&[1]))?);
    VictimNetwork::new(
        input_shape,
        preprocess,
        vec![c1, Layer::Relu, c2, Layer::Relu, fc1, Layer::Relu, fc2],
    )
}

// ---- model file -------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    input_shape: [usize; 3],
    preprocess: PreprocessSpec,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

impl LayerRecord {
    fn from_layer(layer: &Layer) -> Self {
        let (weight_shape, stride, padding, weight, bias) = match layer {
            Layer::Affine(a) => (
                Some(a.weight.shape().to_vec()),
                None,
                None,
                Some(a.weight.data().to_vec()),
                Some(a.bias.data().to_vec()),
            ),
            Layer::Conv2d(c) => (
                Some(c.kernel.shape().to_vec()),
                Some(c.stride),
                Some(c.padding),
                Some(c.kernel.data().to_vec()),
                Some(c.bias.data().to_vec()),
            ),
            Layer::Relu => (None, None, None, None, None),
        };
        Self {
            kind: layer.kind(),
            weight_shape,
            stride,
            padding,
            weight,
            bias,
        }
    }

    fn into_layer(self, index: usize) -> Result<Layer> {
        let field_err = |field: &str, msg: String| {
            Error::ModelFormat(format!("layers[{index}].{field}: {msg}"))
        };
        let take = |v: Option<Vec<f64>>, field: &str| {
            v.ok_or_else(|| field_err(field, "missing".into()))
        };
        match self.kind {
            LayerKind::Relu => Ok(Layer::Relu),
            LayerKind::Affine | LayerKind::Conv2d => {
                let shape = self
                    .weight_shape
                    .ok_or_else(|| field_err("weight_shape", "missing".into()))?;
                let weight = Tensor::new(shape, take(self.weight, "weight")?)
                    .map_err(|e| field_err("weight", e.to_string()))?;
                let bias = take(self.bias, "bias")?;
                let bias = Tensor::new(vec![bias.len()], bias)
                    .map_err(|e| field_err("bias", e.to_string()))?;
                if self.kind == LayerKind::Affine {
                    Affine::new(weight, bias)
                        .map(Layer::Affine)
                        .map_err(|e| field_err("weight_shape", e.to_string()))
                } else {
                    let stride = self.stride.ok_or_else(|| field_err("stride", "missing".into()))?;
                    let padding = self.padding.ok_or_else(|| field_err("padding", "missing".into()))?;
                    Conv2d::new(weight, bias, stride, padding)
                        .map(Layer::Conv2d)
                        .map_err(|e| field_err("weight_shape", e.to_string()))
                }
            }
        }
    }
}

pub fn model_to_string(net: &VictimNetwork) -> String {
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        input_shape: net.input_shape,
        preprocess: net.preprocess,
        layers: net.layers.iter().map(LayerRecord::from_layer).collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
    s.push('\n');
    s
}

pub fn model_from_str(text: &str) -> Result<VictimNetwork> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| {
        Error::ModelFormat(format!("line {}, column {}: {e}", e.line(), e.column()))
    })?;
    if file.format != MODEL_FORMAT {
        return Err(Error::ModelFormat(format!(
            "format: expected {MODEL_FORMAT:?}, found {:?}",
            file.format
        )));
    }
    if file.version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "version: unsupported version {}",
            file.version
        )));
    }
    let preprocess = PreprocessSpec::new(file.preprocess.grand_mean, file.preprocess.swap_channels)
        .map_err(|e| Error::ModelFormat(format!("preprocess.grand_mean: {e}")))?;
    let layers = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_layer(i))
        .collect::<Result<Vec<_>>>()?;
    if layers.iter().flat_map(|l| l.params()).any(|p| !p.is_finite()) {
        return Err(Error::ModelFormat("non-finite parameter".into()));
    }
    VictimNetwork::new(file.input_shape, preprocess, layers)
}

pub fn save_model(net: &VictimNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_string(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<VictimNetwork> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_affine(shape: [usize; 3], w: Vec<f64>, b: f64, pre: PreprocessSpec) -> VictimNetwork {
        let n = w.len();
        VictimNetwork::new(
            shape,
            pre,
            vec![Layer::Affine(
                Affine::new(Tensor::new(vec![1, n], w).unwrap(), Tensor::vector(vec![b])).unwrap(),
            )],
        )
        .unwrap()
    }

    fn random_image(shape: [usize; 3], rng: &mut ChaCha8Rng) -> ImageU8 {
        let n = shape.iter().product();
        ImageU8::new(shape[0], shape[1], shape[2], (0..n).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn constant_network() {
        let net = single_affine([3, 2, 2], vec![0.0; 12], 21.8, PreprocessSpec::new(100.0, true).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(net.forward(&random_image([3, 2, 2], &mut rng)).unwrap(), 21.8);
        }
        let g = net.input_gradient(&random_image([3, 2, 2], &mut rng).to_tensor()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_hand_arithmetic() {
        // 1x1x2 image (10, 200), mean 50: 0.5*(10-50) + -2*(200-50) + 3 = -20 - 300 + 3
        let net = single_affine([1, 1, 2], vec![0.5, -2.0], 3.0, PreprocessSpec::new(50.0, false).unwrap());
        let img = ImageU8::new(1, 1, 2, vec![10, 200]).unwrap();
        assert_eq!(net.forward(&img).unwrap(), -317.0);
    }

    #[test]
    fn affine_gradient_is_unswapped_weight() {
        let w: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
        let net = single_affine([3, 2, 2], w.clone(), 1.0, PreprocessSpec::new(7.0, true).unwrap());
        let img = ImageU8::new(3, 2, 2, (0..12).map(|v| v * 20).collect()).unwrap();
        let g = net.input_gradient(&img.to_tensor()).unwrap();
        // weights act on BGR order, so pixel channel c sees weight block 2 - c
        let expect: Vec<f64> = [2, 1, 0].iter().flat_map(|&c| w[c * 4..c * 4 + 4].to_vec()).collect();
        assert_eq!(g.data(), expect.as_slice());
    }

    #[test]
    fn preprocessed_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let pre = PreprocessSpec::new(rng.random_range(0.0..=255.0), rng.random()).unwrap();
            let x = pre.apply(&random_image([3, 4, 4], &mut rng).to_tensor());
            assert!(x.data().iter().all(|v| (-255.0..=255.0).contains(v)));
        }
        assert!(PreprocessSpec::new(-1.0, false).is_err());
        assert!(PreprocessSpec::new(255.5, false).is_err());
    }

    #[test]
    fn channel_swap_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let swapped = default_victim([3, 8, 8], PreprocessSpec::new(120.0, true).unwrap(), &mut rng).unwrap();
        let mut plain = swapped.clone();
        plain.preprocess.swap_channels = false;
        for _ in 0..5 {
            let img = random_image([3, 8, 8], &mut rng);
            let plane = 64;
            let mut bgr = Vec::new();
            for c in (0..3).rev() {
                bgr.extend_from_slice(&img.pixels()[c * plane..(c + 1) * plane]);
            }
            let bgr = ImageU8::new(3, 8, 8, bgr).unwrap();
            assert_eq!(swapped.forward(&img).unwrap().to_bits(), plain.forward(&bgr).unwrap().to_bits());
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = default_victim([3, 6, 6], PreprocessSpec::new(90.0, true).unwrap(), &mut rng).unwrap();
        let x = random_image([3, 6, 6], &mut rng).to_tensor();
        let g = net.input_gradient(&x).unwrap();
        let h = 1e-4;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (net.predict(&xp).unwrap() - net.predict(&xm).unwrap()) / (2.0 * h);
            num += (fd - g.data()[i]).powi(2);
            den += fd * fd;
        }
        assert!((num / den).sqrt() <= 1e-4);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let net = single_affine([3, 2, 2], vec![0.0; 12], 0.0, PreprocessSpec::new(0.0, false).unwrap());
        assert!(matches!(net.forward(&ImageU8::filled([3, 2, 3], 0)), Err(Error::ShapeMismatch { .. })));
        assert!(net.input_gradient(&Tensor::zeros(&[3, 4, 1])).is_err());
    }

    #[test]
    fn network_must_end_in_scalar_affine() {
        let pre = PreprocessSpec::new(0.0, false).unwrap();
        assert!(VictimNetwork::new([1, 1, 2], pre, vec![Layer::Relu]).is_err());
        let two_out = Layer::Affine(Affine::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])).unwrap());
        assert!(VictimNetwork::new([1, 1, 2], pre, vec![two_out]).is_err());
        let wrong_in = Layer::Affine(Affine::new(Tensor::zeros(&[1, 3]), Tensor::zeros(&[1])).unwrap());
        assert!(VictimNetwork::new([1, 1, 2], pre, vec![wrong_in]).is_err());
    }

    #[test]
    fn model_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = default_victim([3, 8, 8], PreprocessSpec::new(127.123456789, true).unwrap(), &mut rng).unwrap();
        let back = model_from_str(&model_to_string(&net)).unwrap();
        assert_eq!(back, net);
        let img = random_image([3, 8, 8], &mut rng);
        assert_eq!(back.forward(&img).unwrap().to_bits(), net.forward(&img).unwrap().to_bits());
    }

    #[test]
    fn hand_written_model_file() {
        let text = r#"{
  "format": "range-attack-model",
  "version": 1,
  "input_shape": [3, 1, 1],
  "preprocess": { "grand_mean": 100.0, "swap_channels": true },
  "layers": [
    { "kind": "affine", "weight_shape": [1, 3], "weight": [0.1, 0.2, 0.3], "bias": [20.0] }
  ]
}"#;
        let net = model_from_str(text).unwrap();
        // RGB (110, 150, 200) -> BGR (200, 150, 110) -> (100, 50, 10)
        let img = ImageU8::new(3, 1, 1, vec![110, 150, 200]).unwrap();
        let expect = 0.1 * 100.0 + 0.2 * 50.0 + 0.3 * 10.0 + 20.0;
        assert!((net.forward(&img).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_model_file_is_shape_error() {
        let text = r#"{"format":"range-attack-model","version":1,"input_shape":[3,1,1],
            "preprocess":{"grand_mean":0.0,"swap_channels":false},
            "layers":[{"kind":"affine","weight_shape":[1,4],"weight":[0,0,0,0],"bias":[0]}]}"#;
        let err = model_from_str(text).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)), "{err}");

        let text = r#"{"format":"range-attack-model","version":1,"input_shape":[3,1,1],
            "preprocess":{"grand_mean":0.0,"swap_channels":false},
            "layers":[{"kind":"affine","weight_shape":[1,3],"weight":[0,0],"bias":[0]}]}"#;
        let err = model_from_str(text).unwrap_err().to_string();
        assert!(err.contains("layers[0].weight"), "{err}");
    }

    #[test]
    fn malformed_model_file_reports_position() {
        let err = model_from_str("{\n  \"format\": \"range-attack-model\",\n  \"version\": oops\n}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = model_from_str(r#"{"format":"other","version":1,"input_shape":[1,1,1],
            "preprocess":{"grand_mean":0.0,"swap_channels":false},"layers":[]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("format"), "{err}");
    }
}
