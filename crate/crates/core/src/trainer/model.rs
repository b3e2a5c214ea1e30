//! A compact fully-convolutional pixel classifier with manual backprop.
//!
//! Architecture: `k×k conv (3 → hidden) → ReLU → 1×1 conv (hidden → hidden)
//! → ReLU → 1×1 head (hidden → classes)`, zero padding, stride 1. All tensors
//! are pixel-major with channels contiguous. Parameters live in one flat
//! vector so the optimizer, EMA teacher and checkpoint treat them uniformly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ScoreMap};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Odd spatial kernel size of the first stage.
    pub kernel: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 12,
            kernel: 3,
            num_classes: crate::NUM_CLASSES,
        }
    }
}

/// One convolution stage's slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    /// Offset of the weights; biases follow immediately.
    pub offset: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset + self.weight_len()..self.offset + self.len()]
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_classes < 2 {
            return Err(Error::InvalidConfig("model needs hidden > 0 and >= 2 classes".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Shapes of the three stages in order.
    pub fn stages(&self) -> [ConvShape; 3] {
        let s1 = ConvShape {
            kernel: self.kernel,
            cin: INPUT_CHANNELS,
            cout: self.hidden,
            offset: 0,
        };
        let s2 = ConvShape {
            kernel: 1,
            cin: self.hidden,
            cout: self.hidden,
            offset: s1.offset + s1.len(),
        };
        let head = ConvShape {
            kernel: 1,
            cin: self.hidden,
            cout: self.num_classes,
            offset: s2.offset + s2.len(),
        };
        [s1, s2, head]
    }

    pub fn param_count(&self) -> usize {
        let [_, _, head] = self.stages();
        head.offset + head.len()
    }
}

/// `out = conv(input) + bias` with zero padding.
pub fn conv_forward(input: &[f64], h: usize, w: usize, shape: &ConvShape, params: &[f64]) -> Vec<f64> {
    let (k, cin, cout) = (shape.kernel, shape.cin, shape.cout);
    let pad = k / 2;
    let weights = shape.weights(params);
    let bias = shape.bias(params);
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let inp = &input[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &v) in inp.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (oc, &wv) in o.iter_mut().zip(row) {
                            *oc += v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates parameter gradients into `grad_params` and returns the input gradient if asked.
pub fn conv_backward(
    input: &[f64],
    grad_out: &[f64],
    h: usize,
    w: usize,
    shape: &ConvShape,
    params: &[f64],
    grad_params: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let (k, cin, cout) = (shape.kernel, shape.cin, shape.cout);
    let pad = k / 2;
    let weights = shape.weights(params);
    let wlen = shape.weight_len();
    let (gw, gb) = grad_params[shape.offset..shape.offset + shape.len()].split_at_mut(wlen);
    let mut grad_in = want_input_grad.then(|| vec![0.0; h * w * cin]);
    for y in 0..h {
        for x in 0..w {
            let go = &grad_out[(y * w + x) * cout..(y * w + x + 1) * cout];
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            for (b, &g) in gb.iter_mut().zip(go) {
                *b += g;
            }
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let base = (iy * w + ix) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[base + ci];
                        let range = wbase + ci * cout..wbase + (ci + 1) * cout;
                        if v != 0.0 {
                            for (gwv, &g) in gw[range.clone()].iter_mut().zip(go) {
                                *gwv += v * g;
                            }
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            gi[base + ci] += weights[range].iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_backward(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Activations kept from a forward pass for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    height: usize,
    width: usize,
    input: Vec<f64>,
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
    pub scores: ScoreMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinySegModel {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

/// Image to pixel-major layout, centered around zero.
fn to_hwc(image: &ImageTensor) -> Vec<f64> {
    let n = image.pixels();
    let c = image.channels();
    let mut out = vec![0.0; n * INPUT_CHANNELS];
    for i in 0..n {
        for ch in 0..INPUT_CHANNELS {
            // grayscale inputs are broadcast to all three channels
            let src = if c == 1 { 0 } else { ch };
            out[i * INPUT_CHANNELS + ch] = image.channel(src)[i] - 0.5;
        }
    }
    out
}

impl TinySegModel {
    /// He-normal weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; config.param_count()];
        for stage in config.stages() {
            let fan_in = (stage.kernel * stage.kernel * stage.cin) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            for p in &mut params[stage.offset..stage.offset + stage.weight_len()] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::InvalidState(format!(
                "model expects {} parameters, got {}",
                config.param_count(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    /// Zeroes the classification head so every pixel gets identical scores.
    pub fn zero_head(&mut self) {
        let [_, _, head] = self.config.stages();
        self.params[head.offset..head.offset + head.len()].fill(0.0);
    }

    pub fn forward_cached(&self, image: &ImageTensor) -> ForwardCache {
        let (h, w) = (image.height(), image.width());
        let [s1, s2, head] = self.config.stages();
        let input = to_hwc(image);
        let mut hidden1 = conv_forward(&input, h, w, &s1, &self.params);
        relu(&mut hidden1);
        let mut hidden2 = conv_forward(&hidden1, h, w, &s2, &self.params);
        relu(&mut hidden2);
        let scores = conv_forward(&hidden2, h, w, &head, &self.params);
        ForwardCache {
            height: h,
            width: w,
            input,
            hidden1,
            hidden2,
            scores: ScoreMap {
                height: h,
                width: w,
                classes: self.config.num_classes,
                data: scores,
            },
        }
    }

    /// Per-pixel class scores, same spatial dims as the input.
    pub fn forward(&self, image: &ImageTensor) -> ScoreMap {
        self.forward_cached(image).scores
    }

    /// Adds `∂loss/∂params` into `grad_params`, given `∂loss/∂scores`.
    pub fn backward(&self, cache: &ForwardCache, grad_scores: &[f64], grad_params: &mut [f64]) {
        let (h, w) = (cache.height, cache.width);
        let [s1, s2, head] = self.config.stages();
        let mut g2 = conv_backward(&cache.hidden2, grad_scores, h, w, &head, &self.params, grad_params, true)
            .expect("input grad requested");
        relu_backward(&cache.hidden2, &mut g2);
        let mut g1 = conv_backward(&cache.hidden1, &g2, h, w, &s2, &self.params, grad_params, true)
            .expect("input grad requested");
        relu_backward(&cache.hidden1, &mut g1);
        conv_backward(&cache.input, &g1, h, w, &s1, &self.params, grad_params, false);
    }
}
