//! Minimal trainable network engine: fully-connected and convolutional layers
//! with exact backpropagation.
//!
//! Shapes are checked once at construction by propagating the per-sample input
//! shape through the layer stack; trainable layers are addressed by their
//! index in that stack, which is the identifier constraint specs use.
//! Convolution runs as im2col + GEMM. All GEMM accumulation is 64-bit.
//!
//! Batch normalization is intentionally absent; biases are never constrained.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gemm::{gemm_micro, gemm_naive, LayerMacs, OpCount, UnifiedMatrix};
use crate::tensor::{col2im, conv_out_extent, im2col, DenseTensor};

/// Architecture description of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerDef {
    Fc { out: usize },
    Conv2d { out_channels: usize, kernel: (usize, usize), stride: usize, pad: usize },
    Relu,
    MaxPool2,
    Flatten,
}

/// A layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Fc { weight: DenseTensor, bias: Vec<f32> },
    Conv2d { weight: DenseTensor, bias: Vec<f32>, stride: usize, pad: usize },
    Relu,
    MaxPool2,
    Flatten,
}

impl Layer {
    pub fn is_trainable(&self) -> bool {
        matches!(self, Layer::Fc { .. } | Layer::Conv2d { .. })
    }
}

/// An ordered layer stack with static shape checking.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    /// Per-sample output shape of each layer.
    output_shapes: Vec<Vec<usize>>,
}

impl Model {
    /// Builds a model with seeded uniform fan-in initialization
    /// (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`), biases zero.
    pub fn init(input_shape: &[usize], defs: &[LayerDef], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(defs.len());
        let mut shape = input_shape.to_vec();
        let mut output_shapes = Vec::with_capacity(defs.len());
        for (index, def) in defs.iter().enumerate() {
            let layer = match *def {
                LayerDef::Fc { out } => {
                    let &[input] = &shape[..] else {
                        return Err(Error::Layer {
                            index,
                            message: format!("fc expects a flat input, got {shape:?}"),
                        });
                    };
                    let weight = uniform_init(&[out, input], input, &mut rng);
                    shape = vec![out];
                    Layer::Fc { weight, bias: vec![0.0; out] }
                }
                LayerDef::Conv2d { out_channels, kernel, stride, pad } => {
                    let &[c, h, w] = &shape[..] else {
                        return Err(Error::Layer {
                            index,
                            message: format!("conv2d expects (C, H, W) input, got {shape:?}"),
                        });
                    };
                    let (kh, kw) = kernel;
                    let (oh, ow) = conv_geometry(index, h, w, kh, kw, stride, pad)?;
                    let weight =
                        uniform_init(&[out_channels, c, kh, kw], c * kh * kw, &mut rng);
                    shape = vec![out_channels, oh, ow];
                    Layer::Conv2d { weight, bias: vec![0.0; out_channels], stride, pad }
                }
                LayerDef::Relu => Layer::Relu,
                LayerDef::MaxPool2 => {
                    let &[c, h, w] = &shape[..] else {
                        return Err(Error::Layer {
                            index,
                            message: format!("maxpool expects (C, H, W) input, got {shape:?}"),
                        });
                    };
                    if h < 2 || w < 2 {
                        return Err(Error::Layer {
                            index,
                            message: format!("maxpool needs at least 2x2 input, got {h}x{w}"),
                        });
                    }
                    shape = vec![c, h / 2, w / 2];
                    Layer::MaxPool2
                }
                LayerDef::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
            };
            output_shapes.push(shape.clone());
            layers.push(layer);
        }
        Ok(Self { layers, input_shape: input_shape.to_vec(), output_shapes })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.output_shapes.last().map(|s| s.as_slice()).unwrap_or(&self.input_shape)
    }

    /// Indices of trainable layers, the stable identifiers used by constraint
    /// specs.
    pub fn trainable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_trainable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn weight(&self, index: usize) -> Option<&DenseTensor> {
        match self.layers.get(index) {
            Some(Layer::Fc { weight, .. }) | Some(Layer::Conv2d { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self, index: usize) -> Option<&mut DenseTensor> {
        match self.layers.get_mut(index) {
            Some(Layer::Fc { weight, .. }) | Some(Layer::Conv2d { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self, index: usize) -> Option<&[f32]> {
        match self.layers.get(index) {
            Some(Layer::Fc { bias, .. }) | Some(Layer::Conv2d { bias, .. }) => {
                Some(bias.as_slice())
            }
            _ => None,
        }
    }

    pub fn bias_mut(&mut self, index: usize) -> Option<&mut Vec<f32>> {
        match self.layers.get_mut(index) {
            Some(Layer::Fc { bias, .. }) | Some(Layer::Conv2d { bias, .. }) => Some(bias),
            _ => None,
        }
    }

    /// GEMM geometry per trainable layer for MACs estimation.
    pub fn macs_layers(&self) -> Vec<LayerMacs> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Fc { weight, .. } => out.push(LayerMacs {
                    layer: i,
                    out_channels: weight.shape()[0],
                    reduction: weight.shape()[1],
                    output_positions: 1,
                }),
                Layer::Conv2d { weight, .. } => {
                    let os = &self.output_shapes[i];
                    out.push(LayerMacs {
                        layer: i,
                        out_channels: weight.shape()[0],
                        reduction: weight.shape()[1] * weight.shape()[2] * weight.shape()[3],
                        output_positions: os[1] * os[2],
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// Forward pass over a batch `(N, ...input_shape)`; the cache carries what
    /// backward needs.
    pub fn forward(&self, batch: &DenseTensor) -> Result<(DenseTensor, Cache)> {
        self.forward_impl(batch, None).map(|(out, cache, _)| (out, cache))
    }

    /// Forward pass executing trainable layers through the micro-structured
    /// GEMM path, counting operations. `compiled` must hold a matrix for every
    /// trainable layer.
    pub fn forward_micro(
        &self,
        compiled: &BTreeMap<usize, UnifiedMatrix>,
        batch: &DenseTensor,
    ) -> Result<(DenseTensor, OpCount)> {
        let (out, _, ops) = self.forward_impl(batch, Some(compiled))?;
        Ok((out, ops))
    }

    fn forward_impl(
        &self,
        batch: &DenseTensor,
        compiled: Option<&BTreeMap<usize, UnifiedMatrix>>,
    ) -> Result<(DenseTensor, Cache, OpCount)> {
        let n = self.check_batch(batch)?;
        let mut ops = OpCount::default();
        let mut current = batch.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            inputs.push(current.clone());
            let (next, a) = match layer {
                Layer::Fc { weight, bias } => {
                    let micro = compiled_for(compiled, index)?;
                    (fc_forward(&current, weight, bias, micro, &mut ops)?, Aux::None)
                }
                Layer::Conv2d { weight, bias, stride, pad } => {
                    let micro = compiled_for(compiled, index)?;
                    let out = conv_forward(
                        &current,
                        weight,
                        bias,
                        *stride,
                        *pad,
                        &self.output_shapes[index],
                        micro,
                        &mut ops,
                    )?;
                    (out, Aux::None)
                }
                Layer::Relu => {
                    let mut out = current.clone();
                    out.data_mut().iter_mut().for_each(|v| {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    });
                    (out, Aux::None)
                }
                Layer::MaxPool2 => {
                    let (out, argmax) = maxpool_forward(&current, n, &self.output_shapes[index])?;
                    (out, Aux::PoolArgmax(argmax))
                }
                Layer::Flatten => {
                    let mut shape = vec![n];
                    shape.extend_from_slice(&self.output_shapes[index]);
                    (current.reshape(&shape)?, Aux::None)
                }
            };
            current = next;
            aux.push(a);
        }
        let cache = Cache { batch: n, num_layers: self.layers.len(), inputs, aux };
        Ok((current, cache, ops))
    }

    /// Backward pass; `out_grad` is the loss gradient w.r.t. the model output.
    /// Returns gradients for every trainable layer.
    pub fn backward(&self, cache: &Cache, out_grad: &DenseTensor) -> Result<Gradients> {
        if cache.num_layers != self.layers.len() || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache built for {} layers, model has {}",
                cache.num_layers,
                self.layers.len()
            )));
        }
        let n = cache.batch;
        let mut expected = vec![n];
        expected.extend_from_slice(self.output_shape());
        if out_grad.shape() != expected {
            return Err(Error::StaleCache(format!(
                "output grad shape {:?} does not match {:?}",
                out_grad.shape(),
                expected
            )));
        }
        let mut grads = Gradients::default();
        let mut grad = out_grad.clone();
        for (index, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[index];
            grad = match layer {
                Layer::Fc { weight, .. } => {
                    let (dx, dw, db) = fc_backward(input, weight, &grad)?;
                    grads.weights.insert(index, dw);
                    grads.biases.insert(index, db);
                    dx
                }
                Layer::Conv2d { weight, stride, pad, .. } => {
                    let (dx, dw, db) = conv_backward(input, weight, *stride, *pad, &grad)?;
                    grads.weights.insert(index, dw);
                    grads.biases.insert(index, db);
                    dx
                }
                Layer::Relu => {
                    let mut dx = grad.clone();
                    for (g, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    dx
                }
                Layer::MaxPool2 => {
                    let Aux::PoolArgmax(argmax) = &cache.aux[index] else {
                        return Err(Error::StaleCache("missing pool argmax".into()));
                    };
                    let mut dx = DenseTensor::zeros(input.shape());
                    for (slot, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src] += grad.data()[slot];
                    }
                    dx
                }
                Layer::Flatten => grad.reshape(input.shape())?,
            };
        }
        Ok(grads)
    }

    fn check_batch(&self, batch: &DenseTensor) -> Result<usize> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape {
            return Err(Error::Layer {
                index: 0,
                message: format!(
                    "batch shape {:?} does not match input shape {:?}",
                    batch.shape(),
                    self.input_shape
                ),
            });
        }
        Ok(batch.shape()[0])
    }
}

fn compiled_for<'a>(
    compiled: Option<&'a BTreeMap<usize, UnifiedMatrix>>,
    index: usize,
) -> Result<Option<&'a UnifiedMatrix>> {
    match compiled {
        None => Ok(None),
        Some(map) => map.get(&index).map(Some).ok_or_else(|| Error::Layer {
            index,
            message: "no compiled matrix for trainable layer".into(),
        }),
    }
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
    let scale = 1.0 / libm::sqrtf(fan_in as f32);
    let volume: usize = shape.iter().product();
    let data = (0..volume).map(|_| rng.random_range(-scale..scale)).collect();
    DenseTensor::new(shape, data).expect("init data is finite")
}

fn conv_geometry(
    index: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    match (conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(Error::Layer {
            index,
            message: format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{w}"),
        }),
    }
}

/// Forward cache: the input of every layer plus pooling argmax positions.
#[derive(Debug, Clone)]
pub struct Cache {
    batch: usize,
    num_layers: usize,
    inputs: Vec<DenseTensor>,
    aux: Vec<Aux>,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Flat source index in the layer input for each output element.
    PoolArgmax(Vec<usize>),
}

/// Weight and bias gradients keyed by trainable layer index.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub weights: BTreeMap<usize, DenseTensor>,
    pub biases: BTreeMap<usize, Vec<f32>>,
}

fn transpose2(t: &DenseTensor) -> Result<DenseTensor> {
    let &[r, c] = t.shape() else {
        return Err(Error::UnsupportedRank(t.rank()));
    };
    let mut data = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    DenseTensor::new(&[c, r], data)
}

fn fc_forward(
    x: &DenseTensor,
    weight: &DenseTensor,
    bias: &[f32],
    micro: Option<&UnifiedMatrix>,
    ops: &mut OpCount,
) -> Result<DenseTensor> {
    let out_dim = weight.shape()[0];
    let n = x.shape()[0];
    let mut y = match micro {
        None => {
            let wt = transpose2(weight)?;
            let (y, _) = gemm_naive(x, &wt)?;
            y
        }
        Some(um) => {
            let xt = transpose2(x)?;
            let (ymat, c) = gemm_micro(um, &xt)?;
            ops.merge(c);
            transpose2(&ymat)?
        }
    };
    for row in 0..n {
        for (o, &b) in bias.iter().enumerate().take(out_dim) {
            y.data_mut()[row * out_dim + o] += b;
        }
    }
    Ok(y)
}

fn fc_backward(
    x: &DenseTensor,
    weight: &DenseTensor,
    dy: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor, Vec<f32>)> {
    let (n, out_dim) = (dy.shape()[0], dy.shape()[1]);
    let dyt = transpose2(dy)?;
    let (dw, _) = gemm_naive(&dyt, x)?;
    let (dx, _) = gemm_naive(dy, weight)?;
    let mut db = vec![0.0f32; out_dim];
    for row in 0..n {
        for (o, b) in db.iter_mut().enumerate() {
            *b += dy.data()[row * out_dim + o];
        }
    }
    Ok((dx, dw, db))
}

fn sample(batch: &DenseTensor, n: usize) -> DenseTensor {
    let per = batch.len() / batch.shape()[0];
    let data = batch.data()[n * per..(n + 1) * per].to_vec();
    DenseTensor::new(&batch.shape()[1..], data).expect("sample slice is valid")
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &DenseTensor,
    weight: &DenseTensor,
    bias: &[f32],
    stride: usize,
    pad: usize,
    out_shape: &[usize],
    micro: Option<&UnifiedMatrix>,
    ops: &mut OpCount,
) -> Result<DenseTensor> {
    let n = x.shape()[0];
    let &[cout, _, kh, kw] = weight.shape() else {
        return Err(Error::UnsupportedRank(weight.rank()));
    };
    let positions = out_shape[1] * out_shape[2];
    let wmat = weight.reshape(&[cout, weight.len() / cout])?;
    let mut shape = vec![n];
    shape.extend_from_slice(out_shape);
    let mut out = DenseTensor::zeros(&shape);
    for s in 0..n {
        let xs = sample(x, s);
        let cols = im2col(&xs, (kh, kw), stride, pad)?;
        let ymat = match micro {
            None => gemm_naive(&wmat, &cols)?.0,
            Some(um) => {
                let (y, c) = gemm_micro(um, &cols)?;
                ops.merge(c);
                y
            }
        };
        let base = s * cout * positions;
        for c in 0..cout {
            for p in 0..positions {
                out.data_mut()[base + c * positions + p] = ymat.data()[c * positions + p] + bias[c];
            }
        }
    }
    Ok(out)
}

fn conv_backward(
    x: &DenseTensor,
    weight: &DenseTensor,
    stride: usize,
    pad: usize,
    dy: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor, Vec<f32>)> {
    let n = x.shape()[0];
    let &[cout, cin, kh, kw] = weight.shape() else {
        return Err(Error::UnsupportedRank(weight.rank()));
    };
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let positions = dy.shape()[2] * dy.shape()[3];
    let wmat = weight.reshape(&[cout, cin * kh * kw])?;
    let wmat_t = transpose2(&wmat)?;
    let mut dw_acc = vec![0.0f64; weight.len()];
    let mut db = vec![0.0f32; cout];
    let mut dx = DenseTensor::zeros(x.shape());
    for s in 0..n {
        let xs = sample(x, s);
        let cols = im2col(&xs, (kh, kw), stride, pad)?;
        let dy_s = sample(dy, s).reshape(&[cout, positions])?;
        let cols_t = transpose2(&cols)?;
        let (dw_s, _) = gemm_naive(&dy_s, &cols_t)?;
        for (acc, &g) in dw_acc.iter_mut().zip(dw_s.data()) {
            *acc += g as f64;
        }
        for c in 0..cout {
            for p in 0..positions {
                db[c] += dy_s.data()[c * positions + p];
            }
        }
        let (dcols, _) = gemm_naive(&wmat_t, &dy_s)?;
        let dx_s = col2im(&dcols, (cin, h, w), (kh, kw), stride, pad)?;
        let per = dx_s.len();
        dx.data_mut()[s * per..(s + 1) * per].copy_from_slice(dx_s.data());
    }
    let dw = DenseTensor::new(weight.shape(), dw_acc.iter().map(|&v| v as f32).collect())?;
    Ok((dx, dw, db))
}

fn maxpool_forward(
    x: &DenseTensor,
    n: usize,
    out_shape: &[usize],
) -> Result<(DenseTensor, Vec<usize>)> {
    let &[c, h, w] = &x.shape()[1..] else {
        return Err(Error::UnsupportedRank(x.rank()));
    };
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut shape = vec![n];
    shape.extend_from_slice(out_shape);
    let mut out = DenseTensor::zeros(&shape);
    let mut argmax = vec![0usize; n * c * oh * ow];
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let iy = oy * 2 + dy;
                            let ix = ox * 2 + dx;
                            let idx = ((s * c + ch) * h + iy) * w + ix;
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let slot = ((s * c + ch) * oh + oy) * ow + ox;
                    out.data_mut()[slot] = best;
                    argmax[slot] = best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Loss used by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Integer class labels.
    SoftmaxCrossEntropy,
    /// Target tensors of the output shape.
    Mse,
}

/// Mean softmax cross-entropy over the batch; returns (loss, dLogits).
pub fn softmax_cross_entropy(logits: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    let &[n, classes] = logits.shape() else {
        return Err(Error::UnsupportedRank(logits.rank()));
    };
    if labels.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: labels.len() });
    }
    let mut grad = DenseTensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    for row in 0..n {
        let slice = &logits.data()[row * classes..(row + 1) * classes];
        let label = labels[row];
        if label >= classes {
            return Err(Error::LengthMismatch { expected: classes, actual: label });
        }
        let max = slice.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = slice.iter().map(|&v| libm::exp(v as f64 - max)).collect();
        let total: f64 = exps.iter().sum();
        loss -= libm::log(exps[label] / total);
        for (k, &e) in exps.iter().enumerate() {
            let p = e / total;
            let target = if k == label { 1.0 } else { 0.0 };
            grad.data_mut()[row * classes + k] = ((p - target) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean squared error over all elements; returns (loss, dPred).
pub fn mse_loss(pred: &DenseTensor, target: &DenseTensor) -> Result<(f64, DenseTensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    let len = pred.len() as f64;
    let mut grad = DenseTensor::zeros(pred.shape());
    let mut loss = 0.0f64;
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p as f64 - t as f64;
        loss += d * d;
        grad.data_mut()[i] = (2.0 * d / len) as f32;
    }
    Ok((loss / len, grad))
}

/// One SGD step: `w -= lr * (g + weight_decay * w)`, in place.
pub fn sgd_step(weights: &mut [f32], grads: &[f32], lr: f32, weight_decay: f32) -> Result<()> {
    if weights.len() != grads.len() {
        return Err(Error::LengthMismatch { expected: weights.len(), actual: grads.len() });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    for (w, &g) in weights.iter_mut().zip(grads) {
        *w -= lr * (g + weight_decay * *w);
    }
    Ok(())
}

/// First/second moment buffers for Adam, one pair per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamBuf {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// One Adam step with bias correction (`beta1 = 0.9`, `beta2 = 0.999`,
/// `eps = 1e-8`); weight decay enters the gradient as L2.
pub fn adam_step(
    weights: &mut [f32],
    grads: &[f32],
    buf: &mut AdamBuf,
    step: u64,
    lr: f32,
    weight_decay: f32,
) -> Result<()> {
    if weights.len() != grads.len() {
        return Err(Error::LengthMismatch { expected: weights.len(), actual: grads.len() });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;
    if buf.m.len() != weights.len() {
        buf.m = vec![0.0; weights.len()];
        buf.v = vec![0.0; weights.len()];
    }
    let bc1 = 1.0 - libm::powf(BETA1, step as f32);
    let bc2 = 1.0 - libm::powf(BETA2, step as f32);
    for i in 0..weights.len() {
        let g = grads[i] + weight_decay * weights[i];
        buf.m[i] = BETA1 * buf.m[i] + (1.0 - BETA1) * g;
        buf.v[i] = BETA2 * buf.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = buf.m[i] / bc1;
        let v_hat = buf.v[i] / bc2;
        weights[i] -= lr * m_hat / (libm::sqrtf(v_hat) + EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Per-layer optimizer state for a training run.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    weight_decay: f32,
    step: u64,
    bufs: BTreeMap<(usize, bool), AdamBuf>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32, weight_decay: f32) -> Self {
        Self { kind, lr, weight_decay, step: 0, bufs: BTreeMap::new() }
    }

    /// Applies gradients to every trainable layer. Biases never receive
    /// weight decay.
    pub fn apply(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        self.step += 1;
        for (&index, grad) in &grads.weights {
            let weight = model.weight_mut(index).ok_or(Error::Layer {
                index,
                message: "gradient for a non-trainable layer".into(),
            })?;
            if weight.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    expected: weight.shape().to_vec(),
                    actual: grad.shape().to_vec(),
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    sgd_step(weight.data_mut(), grad.data(), self.lr, self.weight_decay)?
                }
                OptimizerKind::Adam => {
                    let buf = self.bufs.entry((index, false)).or_default();
                    adam_step(
                        weight.data_mut(),
                        grad.data(),
                        buf,
                        self.step,
                        self.lr,
                        self.weight_decay,
                    )?
                }
            }
        }
        for (&index, grad) in &grads.biases {
            let bias = model.bias_mut(index).ok_or(Error::Layer {
                index,
                message: "bias gradient for a non-trainable layer".into(),
            })?;
            match self.kind {
                OptimizerKind::Sgd => sgd_step(bias, grad, self.lr, 0.0)?,
                OptimizerKind::Adam => {
                    let buf = self.bufs.entry((index, true)).or_default();
                    adam_step(bias, grad, buf, self.step, self.lr, 0.0)?
                }
            }
        }
        Ok(())
    }
}

/// Training targets: integer labels or target tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Tensors(DenseTensor),
}

/// A dataset with samples along the first axis of `inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DenseTensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, idx: &[usize]) -> (DenseTensor, Targets) {
        let per = self.inputs.len() / self.len().max(1);
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let inputs = DenseTensor::new(&shape, data).expect("gathered batch is valid");
        let targets = match &self.targets {
            Targets::Labels(labels) => Targets::Labels(idx.iter().map(|&i| labels[i]).collect()),
            Targets::Tensors(t) => {
                let per_t = t.len() / self.len().max(1);
                let mut tshape = t.shape().to_vec();
                tshape[0] = idx.len();
                let mut tdata = Vec::with_capacity(per_t * idx.len());
                for &i in idx {
                    tdata.extend_from_slice(&t.data()[i * per_t..(i + 1) * per_t]);
                }
                Targets::Tensors(DenseTensor::new(&tshape, tdata).expect("gathered targets"))
            }
        };
        (inputs, targets)
    }
}

/// Loss + gradient for a batch under the configured loss kind.
pub fn batch_loss(
    loss: LossKind,
    output: &DenseTensor,
    targets: &Targets,
) -> Result<(f64, DenseTensor)> {
    match (loss, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Labels(labels)) => {
            softmax_cross_entropy(output, labels)
        }
        (LossKind::Mse, Targets::Tensors(t)) => mse_loss(output, t),
        _ => Err(Error::InvalidSpec("loss kind does not match target kind".into())),
    }
}

/// Settings for plain gradient training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            weight_decay: 1e-4,
            loss: LossKind::SoftmaxCrossEntropy,
            seed: 0,
        }
    }
}

/// One pass over the dataset in seeded shuffle order. `extra_grad` may add a
/// per-layer gradient term (the ADMM penalty) to the task gradient before the
/// optimizer step. Returns the mean task loss over batches.
pub(crate) fn train_epoch<F>(
    model: &mut Model,
    data: &Dataset,
    loss: LossKind,
    batch_size: usize,
    opt: &mut Optimizer,
    rng: &mut ChaCha8Rng,
    extra_grad: &F,
) -> Result<f64>
where
    F: Fn(usize, &DenseTensor) -> Result<Option<DenseTensor>>,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut order, rng);
    let mut total = 0.0f64;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let (inputs, targets) = data.gather(chunk);
        let (output, cache) = model.forward(&inputs)?;
        let (loss_value, out_grad) = batch_loss(loss, &output, &targets)?;
        if !loss_value.is_finite() {
            return Err(Error::Diverged(format!("task loss {loss_value} is not finite")));
        }
        let mut grads = model.backward(&cache, &out_grad)?;
        for index in model.trainable_layers() {
            if let Some(extra) = extra_grad(index, model.weight(index).unwrap())? {
                let current = grads
                    .weights
                    .get(&index)
                    .cloned()
                    .unwrap_or_else(|| DenseTensor::zeros(model.weight(index).unwrap().shape()));
                grads.weights.insert(index, current.add(&extra)?);
            }
        }
        opt.apply(model, &grads)?;
        total += loss_value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Fisher-Yates shuffle driven by the training RNG.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Per-epoch statistics from [`train_dense`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
}

/// Plain gradient training, no constraints.
pub fn train_dense(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let no_extra = |_: usize, _: &DenseTensor| Ok(None);
    for epoch in 0..cfg.epochs {
        let loss =
            train_epoch(model, data, cfg.loss, cfg.batch_size, &mut opt, &mut rng, &no_extra)?;
        stats.push(EpochStats { epoch, loss });
    }
    Ok(stats)
}

/// Evaluation metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    /// `10 * log10(peak^2 / MSE)` with peak 1.0; infinite for exact
    /// reconstruction.
    Psnr,
}

/// Evaluates a model over a dataset using the dense execution path.
pub fn evaluate(model: &Model, data: &Dataset, metric: Metric) -> Result<f64> {
    evaluate_with(data, metric, |batch| model.forward(batch).map(|(out, _)| out))
}

/// Evaluates through an arbitrary forward function (e.g. the micro GEMM path).
pub fn evaluate_with<F>(data: &Dataset, metric: Metric, mut forward: F) -> Result<f64>
where
    F: FnMut(&DenseTensor) -> Result<DenseTensor>,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len();
    let mut correct = 0usize;
    let mut sq_sum = 0.0f64;
    let mut count = 0usize;
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        let (inputs, targets) = data.gather(&idx);
        let output = forward(&inputs)?;
        match (metric, &targets) {
            (Metric::Accuracy, Targets::Labels(labels)) => {
                let classes = output.len() / idx.len();
                for (row, &label) in labels.iter().enumerate() {
                    let slice = &output.data()[row * classes..(row + 1) * classes];
                    let pred = slice
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    if pred == label {
                        correct += 1;
                    }
                }
            }
            (Metric::Psnr, Targets::Tensors(t)) => {
                for (&p, &target) in output.data().iter().zip(t.data()) {
                    let d = p as f64 - target as f64;
                    sq_sum += d * d;
                }
                count += output.len();
            }
            _ => return Err(Error::InvalidSpec("metric does not match target kind".into())),
        }
    }
    match metric {
        Metric::Accuracy => Ok(correct as f64 / n as f64),
        Metric::Psnr => {
            let mse = sq_sum / count as f64;
            if mse == 0.0 {
                Ok(f64::INFINITY)
            } else {
                Ok(10.0 * libm::log10(1.0 / mse))
            }
        }
    }
}
