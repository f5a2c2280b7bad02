//! Small convolutional building blocks on top of candle tensors: seeded
//! parameters, an encoder/residual/decoder generator with an optional
//! convolutional LSTM at the bottleneck, a patch discriminator, Adam, and
//! the GAN losses.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{WeightTensor, Weights};
use crate::error::{Error, Result};

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so every parameter draws from its own stream no matter which
    // other layers exist.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Named trainable tensors with deterministic initialization.
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    seed: u64,
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { device: Device::Cpu, dtype, seed, params: BTreeMap::new() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::precondition(format!("parameter `{name}` declared twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name.to_owned(), var);
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
        self.insert(name, values, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.insert(name, vec![0.0; shape.iter().product()], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.elem_count()).sum()
    }

    pub fn to_weights(&self) -> Result<Weights> {
        let mut w = Weights::new();
        for (name, var) in &self.params {
            let t = var.as_tensor();
            let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            w.insert(name.clone(), WeightTensor { shape: t.dims().to_vec(), data });
        }
        Ok(w)
    }

    /// Overwrites every parameter; the name set and shapes must match exactly.
    pub fn load_weights(&mut self, weights: &Weights) -> Result<()> {
        if let Some(extra) = weights.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::shape(format!("checkpoint has unknown weight `{extra}`")));
        }
        for (name, var) in &self.params {
            let w = weights
                .get(name)
                .ok_or_else(|| Error::shape(format!("checkpoint lacks weight `{name}`")))?;
            if w.shape != var.dims() {
                return Err(Error::shape(format!(
                    "weight `{name}` has shape {:?}, network expects {:?}",
                    w.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(w.data.clone(), w.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.normal(&format!("{name}.weight"), &[cout, cin, kernel, kernel], 0.02)?,
            bias: ps.zeros(&format!("{name}.bias"), &[cout])?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::im2col::conv2d(x, &self.weight, self.stride, self.padding)?;
        let c = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    Ok(xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * 0.2)?)?)
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

/// Layout of an encoder / residual stack / decoder generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub downsamples: usize,
    pub residual_blocks: usize,
    /// Adds a convolutional LSTM cell after the residual stack.
    pub recurrent: bool,
}

impl GeneratorSpec {
    pub fn channels_at(&self, depth: usize) -> usize {
        self.width << depth.min(2)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels_at(self.downsamples)
    }
}

/// `(cell, hidden)` of the bottleneck LSTM.
pub type LstmState = (Tensor, Tensor);

#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    stem: Conv2d,
    down: Vec<Conv2d>,
    res: Vec<(Conv2d, Conv2d)>,
    lstm: Option<Conv2d>,
    up: Vec<Conv2d>,
    head: Conv2d,
}

pub const LSTM_PREFIX: &str = "lstm.";

impl Generator {
    pub fn new(ps: &mut ParamStore, prefix: &str, spec: GeneratorSpec) -> Result<Self> {
        if spec.width == 0 || spec.in_channels == 0 || spec.out_channels == 0 {
            return Err(Error::Config(format!("degenerate generator layout {spec:?}")));
        }
        let p = |n: &str| format!("{prefix}{n}");
        let stem = Conv2d::new(ps, &p("stem"), spec.in_channels, spec.width, 3, 1, 1)?;
        let down = (0..spec.downsamples)
            .map(|i| Conv2d::new(ps, &p(&format!("down{i}")), spec.channels_at(i), spec.channels_at(i + 1), 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let cb = spec.bottleneck_channels();
        let res = (0..spec.residual_blocks)
            .map(|i| {
                Ok((
                    Conv2d::new(ps, &p(&format!("res{i}.a")), cb, cb, 3, 1, 1)?,
                    Conv2d::new(ps, &p(&format!("res{i}.b")), cb, cb, 3, 1, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let lstm = if spec.recurrent {
            Some(Conv2d::new(ps, &format!("{prefix}{LSTM_PREFIX}gates"), 2 * cb, 4 * cb, 3, 1, 1)?)
        } else {
            None
        };
        let up = (0..spec.downsamples)
            .rev()
            .map(|i| Conv2d::new(ps, &p(&format!("up{i}")), spec.channels_at(i + 1), spec.channels_at(i), 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(ps, &p("head"), spec.width, spec.out_channels, 3, 1, 1)?;
        Ok(Self { spec, stem, down, res, lstm, up, head })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn lstm_parameter_count(&self) -> usize {
        self.lstm.as_ref().map_or(0, Conv2d::parameter_count)
    }

    /// Bottleneck state shape `(channels, height, width)` for an input size.
    pub fn state_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let s = 1 << self.spec.downsamples;
        (self.spec.bottleneck_channels(), height / s, width / s)
    }

    /// Maps `x` (values in `[0, 1]`) to raw output logits. The state is used
    /// and returned only by recurrent generators; `None` means all zeros.
    pub fn forward(&self, x: &Tensor, state: Option<&LstmState>) -> Result<(Tensor, Option<LstmState>)> {
        let (y, next) = self.lstm_step(&self.encode(x)?, state)?;
        Ok((self.decode(&y)?, next))
    }

    /// Stem, downsampling and residual stack. Frames are independent here,
    /// so a whole clip can go through as one batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.stem.forward(&((x * 2.0)? - 1.0)?)?;
        y = instance_norm(&y)?.relu()?;
        for conv in &self.down {
            y = instance_norm(&conv.forward(&y)?)?.relu()?;
        }
        for (a, b) in &self.res {
            let r = instance_norm(&a.forward(&y)?)?.relu()?;
            y = (y + instance_norm(&b.forward(&r)?)?)?;
        }
        Ok(y)
    }

    /// One LSTM update on bottleneck features; the hidden output replaces
    /// the features. Identity for non-recurrent generators.
    pub fn lstm_step(&self, y: &Tensor, state: Option<&LstmState>) -> Result<(Tensor, Option<LstmState>)> {
        let Some(gates) = &self.lstm else {
            return Ok((y.clone(), None));
        };
        let (c_prev, h_prev) = match state {
            Some((c, h)) => (c.clone(), h.clone()),
            None => {
                let z = y.zeros_like()?;
                (z.clone(), z)
            }
        };
        let g = gates.forward(&Tensor::cat(&[y, &h_prev], 1)?)?;
        let cb = self.spec.bottleneck_channels();
        let i = sigmoid(&g.narrow(1, 0, cb)?)?;
        let f = sigmoid(&g.narrow(1, cb, cb)?)?;
        let o = sigmoid(&g.narrow(1, 2 * cb, cb)?)?;
        let u = g.narrow(1, 3 * cb, cb)?.tanh()?;
        let c = ((f * c_prev)? + (i * u)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h.clone(), Some((c, h))))
    }

    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        let mut y = y.clone();
        for conv in &self.up {
            y = instance_norm(&conv.forward(&upsample2(&y)?)?)?.relu()?;
        }
        self.head.forward(&y)
    }
}

/// Patch discriminator returning every intermediate activation; the last
/// entry is the realness map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, prefix: &str, in_channels: usize, width: usize) -> Result<Self> {
        let layers = vec![
            Conv2d::new(ps, &format!("{prefix}d0"), in_channels, width, 4, 2, 1)?,
            Conv2d::new(ps, &format!("{prefix}d1"), width, 2 * width, 4, 2, 1)?,
            Conv2d::new(ps, &format!("{prefix}d2"), 2 * width, 4 * width, 3, 1, 1)?,
            Conv2d::new(ps, &format!("{prefix}d3"), 4 * width, 1, 3, 1, 1)?,
        ];
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut y = ((x * 2.0)? - 1.0)?;
        let last = self.layers.len() - 1;
        for (i, conv) in self.layers.iter().enumerate() {
            y = conv.forward(&y)?;
            if i != last {
                if i > 0 {
                    y = instance_norm(&y)?;
                }
                y = leaky_relu(&y)?;
            }
            feats.push(y.clone());
        }
        Ok(feats)
    }
}

/// Least-squares GAN loss against a constant target.
pub fn lsgan(pred: &Tensor, real: bool) -> Result<Tensor> {
    let target = if real { 1.0 } else { 0.0 };
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Mean absolute difference of intermediate discriminator activations,
/// averaged over layers; the real side is treated as a constant.
pub fn feature_matching(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    let n = real.len().saturating_sub(1).max(1);
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake).take(n) {
        let term = (f - r.detach())?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::precondition("no features to match"))?;
    Ok((total / n as f64)?)
}

/// Per-pixel cross-entropy of `logits` (N, L, H, W) against one-hot targets.
pub fn cross_entropy(logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let (n, _, h, w) = logits.dims4()?;
    Ok(((logp * onehot)?.sum_all()? / -((n * h * w) as f64))?)
}

/// Softmax over the channel axis of an `(N, C, H, W)` tensor.
pub fn softmax_channels(t: &Tensor) -> Result<Tensor> {
    let max = t.max_keepdim(1)?.detach();
    let e = t.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    slots: Vec<(Var, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|v| {
                let z = v.as_tensor().zeros_like()?;
                Ok((v, z.clone(), z))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lr, beta1, beta2, eps: 1e-8, t: 0, slots })
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (var, m, v) in &mut self.slots {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&*m / c1)? / ((&*v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}

/// Sum of squared gradient entries for `t`, or zero if it had none.
pub fn grad_sq_norm(grads: &GradStore, t: &Tensor) -> Result<f64> {
    match grads.get(t) {
        Some(g) => Ok(g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?),
        None => Ok(0.0),
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(recurrent: bool) -> GeneratorSpec {
        GeneratorSpec { in_channels: 6, out_channels: 4, width: 4, downsamples: 3, residual_blocks: 1, recurrent }
    }

    #[test]
    fn init_is_seeded_and_name_addressed() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        Generator::new(&mut a, "g.", spec(true)).unwrap();
        Generator::new(&mut b, "g.", spec(false)).unwrap();
        let (wa, wb) = (a.to_weights().unwrap(), b.to_weights().unwrap());
        for (k, v) in &wb {
            assert_eq!(&wa[k], v, "{k}");
        }
        let lstm = a.count_with_prefix("g.lstm.");
        assert_eq!(a.parameter_count() - b.parameter_count(), lstm);
        let cb = 16;
        assert_eq!(lstm, 4 * cb * 2 * cb * 9 + 4 * cb);
    }

    #[test]
    fn weights_round_trip_through_load() {
        let mut a = ParamStore::new(1, DType::F32);
        let mut b = ParamStore::new(2, DType::F32);
        Generator::new(&mut a, "", spec(true)).unwrap();
        Generator::new(&mut b, "", spec(true)).unwrap();
        b.load_weights(&a.to_weights().unwrap()).unwrap();
        assert_eq!(a.to_weights().unwrap(), b.to_weights().unwrap());
        let mut c = ParamStore::new(2, DType::F32);
        Generator::new(&mut c, "", spec(false)).unwrap();
        assert!(c.load_weights(&a.to_weights().unwrap()).is_err());
    }

    #[test]
    fn cross_entropy_matches_a_direct_evaluation() {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[1.0f64, 2.0, 0.5, -1.0, 0.0, 3.0], &dev).unwrap().reshape((1, 3, 1, 2)).unwrap();
        let onehot = Tensor::new(&[0.0f64, 1.0, 1.0, 0.0, 0.0, 0.0], &dev).unwrap().reshape((1, 3, 1, 2)).unwrap();
        let ce = scalar(&cross_entropy(&logits, &onehot).unwrap()).unwrap();
        let lse = |v: [f64; 3]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
        let expected = 0.5 * ((lse([1.0, 0.5, 0.0]) - 0.5) + (lse([2.0, -1.0, 3.0]) - 2.0));
        assert!((ce - expected).abs() < 1e-12, "{ce} vs {expected}");
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        let mut ps = ParamStore::new(0, DType::F64);
        let w = ps.normal("w", &[4], 1.0).unwrap();
        let before = w.to_vec1::<f64>().unwrap();
        let mut opt = Adam::new(ps.vars(), 0.1, 0.5, 0.999).unwrap();
        let loss = (&w * 3.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let after = ps.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b - 0.1).abs() < 1e-6);
        }
    }
}
