use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{Architecture, LayerSpec};
use super::data::TrainBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::winograd::{direct_conv2d, winograd_conv2d, WinogradBasis};

/// Role of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    DenseWeight,
    DenseBias,
}

impl ParamRole {
    pub fn is_weight(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::DenseWeight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub layer: usize,
    pub role: ParamRole,
}

/// Convolution backend used by the forward pass. Bias is added by the caller.
pub trait ConvEngine<T: Scalar> {
    /// `input` is `C×H×W`, `weight` is the layer's spatial `D×C×r×r` filter bank.
    fn conv(&self, layer: usize, input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Plain spatial-domain convolution.
#[derive(Clone, Copy, Debug, Default)]
pub struct DirectEngine;

impl<T: Scalar> ConvEngine<T> for DirectEngine {
    fn conv(&self, _layer: usize, input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
        direct_conv2d(input, weight)
    }
}

/// Dense Winograd convolution for layers with a basis, direct for the rest.
#[derive(Clone, Debug)]
pub struct WinogradEngine<T> {
    bases: Vec<Option<WinogradBasis<T>>>,
}

impl<T: Scalar> WinogradEngine<T> {
    /// `bases[layer]` selects the basis of each conv layer.
    pub fn new(bases: Vec<Option<WinogradBasis<T>>>) -> Self {
        Self { bases }
    }

    /// Default bases: `(3,4)` for 3×3 filters, `(5,8)` for 5×5.
    pub fn for_architecture(arch: &Architecture) -> Result<Self> {
        Ok(Self::new(default_bases(arch)?))
    }

    pub fn bases(&self) -> &[Option<WinogradBasis<T>>] {
        &self.bases
    }
}

/// `(3,4)` for 3×3 conv layers, `(5,8)` for 5×5, none otherwise.
pub fn default_bases<T: Scalar>(arch: &Architecture) -> Result<Vec<Option<WinogradBasis<T>>>> {
    arch.layers
        .iter()
        .map(|l| match *l {
            LayerSpec::Conv { kernel: 3, .. } => WinogradBasis::new(3, 4).map(Some),
            LayerSpec::Conv { kernel: 5, .. } => WinogradBasis::new(5, 8).map(Some),
            _ => Ok(None),
        })
        .collect()
}

impl<T: Scalar> ConvEngine<T> for WinogradEngine<T> {
    fn conv(&self, layer: usize, input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
        match self.bases.get(layer).and_then(Option::as_ref) {
            Some(b) => winograd_conv2d(b, input, weight, 1),
            None => direct_conv2d(input, weight),
        }
    }
}

/// Sequential CNN with its learnable parameters.
///
/// Parameters are stored per weighted layer as `[weight, bias]`, in layer
/// order. Conv weights are `D×C×r×r`; dense weights are `outputs×inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    shapes: Vec<[usize; 3]>,
    params: Vec<Tensor<T>>,
    info: Vec<ParamInfo>,
    slots: Vec<Option<usize>>,
}

/// Per-layer activations of one example, kept for back-propagation.
struct Trace<T> {
    acts: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Network<T> {
    /// All weights zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let shapes = arch.shapes()?;
        arch.num_classes()?;
        let mut params = Vec::new();
        let mut info = Vec::new();
        let mut slots = vec![None; arch.layers.len()];
        for (layer, spec) in arch.layers.iter().enumerate() {
            match *spec {
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                    slots[layer] = Some(params.len());
                    params.push(Tensor::zeros(&[out_channels, in_channels, kernel, kernel]));
                    params.push(Tensor::zeros(&[out_channels]));
                    info.push(ParamInfo { layer, role: ParamRole::ConvWeight });
                    info.push(ParamInfo { layer, role: ParamRole::ConvBias });
                }
                LayerSpec::Dense { inputs, outputs } => {
                    slots[layer] = Some(params.len());
                    params.push(Tensor::zeros(&[outputs, inputs]));
                    params.push(Tensor::zeros(&[outputs]));
                    info.push(ParamInfo { layer, role: ParamRole::DenseWeight });
                    info.push(ParamInfo { layer, role: ParamRole::DenseBias });
                }
                _ => {}
            }
        }
        Ok(Self { arch, shapes, params, info, slots })
    }

    /// He (fan-in) normal initialisation of weights, zero biases.
    pub fn init_he(arch: Architecture, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (p, info) in net.params.iter_mut().zip(&net.info) {
            if !info.role.is_weight() {
                continue;
            }
            let fan_in = p.inner_len();
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in p.data_mut() {
                *v = T::lit(dist.sample(&mut rng));
            }
        }
        Ok(net)
    }

    /// Rebuilds a network from parameter tensors in canonical order.
    pub fn from_params(arch: Architecture, params: Vec<Tensor<T>>) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(Error::dim("Network::from_params", net.params.len(), params.len()));
        }
        for (slot, p) in net.params.iter_mut().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::dim("Network::from_params", slot.shape(), p.shape()));
            }
            *slot = p;
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Input shape of every layer plus the output shape.
    pub fn shapes(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn weight_index(&self, layer: usize) -> Option<usize> {
        self.slots.get(layer).copied().flatten()
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor<T>> {
        self.weight_index(layer).map(|i| &self.params[i])
    }

    pub fn weight_mut(&mut self, layer: usize) -> Option<&mut Tensor<T>> {
        self.weight_index(layer).map(move |i| &mut self.params[i])
    }

    pub fn bias(&self, layer: usize) -> Option<&Tensor<T>> {
        self.weight_index(layer).map(|i| &self.params[i + 1])
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            shapes: self.shapes.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            info: self.info.clone(),
            slots: self.slots.clone(),
        }
    }

    fn check_example(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.arch.input {
            return Err(Error::dim("Network input", self.arch.input, x.shape()));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<T>, engine: &dyn ConvEngine<T>, keep: bool) -> Result<Trace<T>> {
        self.check_example(x)?;
        let mut acts = vec![x.clone()];
        let mut argmax = Vec::with_capacity(self.arch.layers.len());
        for (layer, spec) in self.arch.layers.iter().enumerate() {
            let input = acts.last().expect("input activation");
            let mut idx = None;
            let out = match *spec {
                LayerSpec::Conv { .. } => {
                    let w = self.weight(layer).expect("conv weight");
                    let b = self.bias(layer).expect("conv bias");
                    let mut y = engine.conv(layer, input, w)?;
                    for (d, &bd) in b.data().iter().enumerate() {
                        for v in y.outer_mut(d) {
                            *v += bd;
                        }
                    }
                    y
                }
                LayerSpec::Relu => input.map(|v| if v > T::zero() { v } else { T::zero() }),
                LayerSpec::MaxPool { size } => {
                    let (y, a) = max_pool(input, size);
                    idx = Some(a);
                    y
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let w = self.weight(layer).expect("dense weight").data();
                    let b = self.bias(layer).expect("dense bias").data();
                    let xin = input.data();
                    let mut y = Vec::with_capacity(outputs);
                    for o in 0..outputs {
                        let row = &w[o * inputs..(o + 1) * inputs];
                        let s: T = row.iter().zip(xin).map(|(&a, &b)| a * b).sum();
                        y.push(s + b[o]);
                    }
                    Tensor::from_vec(&[outputs, 1, 1], y)?
                }
            };
            if !keep {
                acts.clear();
            }
            acts.push(out);
            argmax.push(idx);
        }
        Ok(Trace { acts, argmax })
    }

    /// Logits (length K) for one `C×H×W` example.
    pub fn logits(&self, x: &Tensor<T>, engine: &dyn ConvEngine<T>) -> Result<Vec<T>> {
        let trace = self.run(x, engine, false)?;
        Ok(trace.acts.last().expect("output").data().to_vec())
    }

    /// Logits `B×K` and mean cross-entropy loss over the batch.
    pub fn forward(&self, batch: &TrainBatch<T>, engine: &dyn ConvEngine<T>) -> Result<(Tensor<T>, T)> {
        let k = self.arch.num_classes()?;
        batch.check(self.arch.input, k)?;
        let b = batch.len();
        let mut logits = Vec::with_capacity(b * k);
        let mut loss = T::zero();
        for i in 0..b {
            let z = self.logits(&batch.example(i)?, engine)?;
            loss += cross_entropy(&z, batch.labels[i]);
            logits.extend(z);
        }
        let loss = loss / T::from_usize(b.max(1)).expect("batch size");
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} over batch of {b}")));
        }
        Ok((Tensor::from_vec(&[b, k], logits)?, loss))
    }

    /// Mean cross-entropy loss and its gradient with respect to every
    /// parameter, back-propagated through the direct-convolution path.
    pub fn loss_and_grad(&self, batch: &TrainBatch<T>) -> Result<(T, Vec<Tensor<T>>)> {
        let k = self.arch.num_classes()?;
        batch.check(self.arch.input, k)?;
        let b = batch.len();
        let inv_b = T::one() / T::from_usize(b.max(1)).expect("batch size");
        let mut grads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut loss = T::zero();
        for i in 0..b {
            let trace = self.run(&batch.example(i)?, &DirectEngine, true)?;
            let z = trace.acts.last().expect("output").data();
            let label = batch.labels[i];
            loss += cross_entropy(z, label);
            let mut dz = softmax(z);
            dz[label] -= T::one();
            for v in &mut dz {
                *v *= inv_b;
            }
            let out_shape = *self.shapes.last().expect("output shape");
            let delta = Tensor::from_vec(&out_shape, dz)?;
            self.backprop(&trace, delta, &mut grads)?;
        }
        let loss = loss * inv_b;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} over batch of {b}")));
        }
        Ok((loss, grads))
    }

    /// Gradient `∇_w E` for every parameter.
    pub fn backward(&self, batch: &TrainBatch<T>) -> Result<Vec<Tensor<T>>> {
        self.loss_and_grad(batch).map(|(_, g)| g)
    }

    fn backprop(&self, trace: &Trace<T>, mut delta: Tensor<T>, grads: &mut [Tensor<T>]) -> Result<()> {
        for (layer, spec) in self.arch.layers.iter().enumerate().rev() {
            let input = &trace.acts[layer];
            let output = &trace.acts[layer + 1];
            let need_input_grad = layer > 0;
            delta = match *spec {
                LayerSpec::Conv { .. } => {
                    let wi = self.weight_index(layer).expect("conv weight");
                    let (dx, dw, db) = conv_backward(input, &self.params[wi], &delta, need_input_grad);
                    grads[wi].add_assign_scaled(&dw, T::one())?;
                    grads[wi + 1].add_assign_scaled(&db, T::one())?;
                    dx
                }
                LayerSpec::Relu => {
                    let mut dx = delta;
                    for (g, &y) in dx.data_mut().iter_mut().zip(output.data()) {
                        if y <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    dx
                }
                LayerSpec::MaxPool { .. } => {
                    let idx = trace.argmax[layer].as_ref().expect("pool indices");
                    let mut dx = Tensor::zeros(input.shape());
                    for (&src, &g) in idx.iter().zip(delta.data()) {
                        dx.data_mut()[src] += g;
                    }
                    dx
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let wi = self.weight_index(layer).expect("dense weight");
                    let w = self.params[wi].data();
                    let xin = input.data();
                    let dy = delta.data();
                    {
                        let gw = grads[wi].data_mut();
                        for o in 0..outputs {
                            if dy[o].is_zero() {
                                continue;
                            }
                            for (g, &xv) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(xin) {
                                *g += dy[o] * xv;
                            }
                        }
                    }
                    for (g, &d) in grads[wi + 1].data_mut().iter_mut().zip(dy) {
                        *g += d;
                    }
                    let mut dx = vec![T::zero(); inputs];
                    for o in 0..outputs {
                        for (acc, &wv) in dx.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                            *acc += wv * dy[o];
                        }
                    }
                    Tensor::from_vec(input.shape(), dx)?
                }
            };
        }
        Ok(())
    }
}

/// Stable `log Σ exp(z) - z[label]`.
pub fn cross_entropy<T: Scalar>(z: &[T], label: usize) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    lse - z[label]
}

pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Max-pool with window = stride = `size`; ties resolve to the first index.
fn max_pool<T: Scalar>(x: &Tensor<T>, size: usize) -> (Tensor<T>, Vec<usize>) {
    let [c, h, w] = *x.shape() else { unreachable!("pool input is C×H×W") };
    let (oh, ow) = (h / size, w / size);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut idx = Vec::with_capacity(c * oh * ow);
    let data = x.data();
    for ci in 0..c {
        for p in 0..oh {
            for q in 0..ow {
                let mut best = ci * h * w + (p * size) * w + q * size;
                for u in 0..size {
                    for v in 0..size {
                        let k = ci * h * w + (p * size + u) * w + q * size + v;
                        if data[k] > data[best] {
                            best = k;
                        }
                    }
                }
                out.data_mut()[(ci * oh + p) * ow + q] = data[best];
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Returns `(dX, dW, db)` for a valid stride-1 convolution.
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [c, h, wd] = *x.shape() else { unreachable!() };
    let [d, _, r, _] = *w.shape() else { unreachable!() };
    let (oh, ow) = (h - r + 1, wd - r + 1);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[d]);
    let mut dx = Tensor::zeros(x.shape());
    let xs = x.data();
    let ws = w.data();
    let g = dy.data();
    for di in 0..d {
        let gplane = &g[di * oh * ow..(di + 1) * oh * ow];
        db.data_mut()[di] = gplane.iter().copied().sum();
        for ci in 0..c {
            let xplane = &xs[ci * h * wd..(ci + 1) * h * wd];
            let fbase = (di * c + ci) * r * r;
            for u in 0..r {
                for v in 0..r {
                    let mut acc = T::zero();
                    for p in 0..oh {
                        let xrow = &xplane[(p + u) * wd + v..(p + u) * wd + v + ow];
                        let grow = &gplane[p * ow..(p + 1) * ow];
                        acc += xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    dw.data_mut()[fbase + u * r + v] = acc;
                    if need_dx {
                        let k = ws[fbase + u * r + v];
                        if k.is_zero() {
                            continue;
                        }
                        let dxplane = &mut dx.data_mut()[ci * h * wd..(ci + 1) * h * wd];
                        for p in 0..oh {
                            let drow = &mut dxplane[(p + u) * wd + v..(p + u) * wd + v + ow];
                            for (acc, &gv) in drow.iter_mut().zip(&gplane[p * ow..(p + 1) * ow]) {
                                *acc += k * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
