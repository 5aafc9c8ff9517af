//! Deployment of a trained (or decompressed) network: magnitude pruning in
//! either domain, sparse inference engines and multiply-accumulate accounting.

mod sparse;

pub use sparse::{sparse_spatial_conv, sparse_winograd_conv, SparseBank, SparseFilter};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{ConvEngine, Dataset, LayerSpec, Network};
use crate::scalar::Scalar;
use crate::sparsity::nearest_rank;
use crate::tensor::Tensor;
use crate::winograd::{direct_conv2d, transform_filters, TileGrid, WinogradBasis};

/// Outcome of a global magnitude prune.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneSummary {
    pub threshold: f64,
    /// `(layer, zeros, total)` for every pruned layer.
    pub layers: Vec<(usize, usize, usize)>,
}

impl PruneSummary {
    pub fn zeros(&self) -> usize {
        self.layers.iter().map(|l| l.1).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.2).sum()
    }

    /// Achieved sparsity in percent.
    pub fn sparsity(&self) -> f64 {
        100.0 * self.zeros() as f64 / self.total().max(1) as f64
    }
}

fn zero_below<T: Scalar>(t: &mut Tensor<T>, theta: T) -> usize {
    let mut zeros = 0;
    for v in t.data_mut() {
        if v.abs() <= theta {
            *v = T::zero();
        }
        if *v == T::zero() {
            zeros += 1;
        }
    }
    zeros
}

/// Sets every weight of `layers` with `|w| ≤ θ` to zero, where `θ` is the
/// nearest-rank `s` percentile of the pooled magnitudes. `s = 0` leaves the
/// network untouched.
pub fn prune_spatial<T: Scalar>(net: &Network<T>, s: f64, layers: &[usize]) -> Result<(Network<T>, PruneSummary)> {
    let mut out = net.clone();
    let mut mags = Vec::new();
    for &l in layers {
        let w = net.weight(l).ok_or_else(|| Error::InvalidArgument(format!("layer {l} has no weights")))?;
        mags.extend(w.data().iter().map(|v| v.abs()));
    }
    let theta = nearest_rank(&mut mags, s)?;
    let mut summary = PruneSummary { threshold: theta.to_f64_lossy(), layers: Vec::new() };
    for &l in layers {
        let w = out.weight_mut(l).expect("checked above");
        let zeros = if s > 0.0 {
            zero_below(w, theta)
        } else {
            w.len() - w.count_nonzero()
        };
        summary.layers.push((l, zeros, w.len()));
    }
    Ok((out, summary))
}

/// A conv layer deployed in the Winograd domain.
#[derive(Clone, Debug)]
pub struct WinogradLayer<T> {
    pub layer: usize,
    pub basis: WinogradBasis<T>,
    /// Pruned `D×C×n×n` filters.
    pub weights: Tensor<T>,
    pub sparse: SparseBank<T>,
}

/// Winograd-domain filters of every eligible layer, pruned with one global
/// threshold. Zeros already present after the transform count as pruned.
#[derive(Clone, Debug)]
pub struct WinogradDeployment<T> {
    pub layers: Vec<WinogradLayer<T>>,
    pub summary: PruneSummary,
}

impl<T: Scalar> WinogradDeployment<T> {
    pub fn layer(&self, l: usize) -> Option<&WinogradLayer<T>> {
        self.layers.iter().find(|w| w.layer == l)
    }
}

/// Transforms each eligible layer with its basis (`bases[layer]`), pools all
/// Winograd-domain magnitudes and zeroes `|W| ≤ θ`.
pub fn prune_winograd<T: Scalar>(
    net: &Network<T>,
    s: f64,
    bases: &[Option<WinogradBasis<T>>],
) -> Result<WinogradDeployment<T>> {
    let mut layers = Vec::new();
    for (l, b) in bases.iter().enumerate() {
        let Some(basis) = b else { continue };
        match net.architecture().layers.get(l) {
            Some(LayerSpec::Conv { kernel, stride: 1, .. }) if *kernel == basis.r() => {}
            other => return Err(Error::InvalidArgument(format!("basis for layer {l} does not fit {other:?}"))),
        }
        let w = net.weight(l).expect("conv layer has weights");
        let weights = transform_filters(basis, w)?;
        layers.push((l, basis.clone(), weights));
    }
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layer is eligible for Winograd deployment".into()));
    }
    let mut mags: Vec<T> = layers.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.abs())).collect();
    let theta = nearest_rank(&mut mags, s)?;
    let mut summary = PruneSummary { threshold: theta.to_f64_lossy(), layers: Vec::new() };
    let mut out = Vec::new();
    for (layer, basis, mut weights) in layers {
        let zeros = if s > 0.0 {
            zero_below(&mut weights, theta)
        } else {
            weights.len() - weights.count_nonzero()
        };
        summary.layers.push((layer, zeros, weights.len()));
        let sparse = SparseBank::from_tensor(&weights)?;
        out.push(WinogradLayer { layer, basis, weights, sparse });
    }
    Ok(WinogradDeployment { layers: out, summary })
}

/// Spatial engine that skips zero weights of the given conv layers.
#[derive(Clone, Debug)]
pub struct SparseSpatialEngine<T> {
    banks: Vec<Option<SparseBank<T>>>,
}

impl<T: Scalar> SparseSpatialEngine<T> {
    pub fn from_network(net: &Network<T>) -> Result<Self> {
        let banks = net
            .architecture()
            .layers
            .iter()
            .enumerate()
            .map(|(l, spec)| match spec {
                LayerSpec::Conv { .. } => SparseBank::from_tensor(net.weight(l).expect("conv weights")).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { banks })
    }
}

impl<T: Scalar> ConvEngine<T> for SparseSpatialEngine<T> {
    fn conv(&self, layer: usize, input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
        match self.banks.get(layer).and_then(Option::as_ref) {
            Some(b) => sparse_spatial_conv(input, b).map(|(y, _)| y),
            None => direct_conv2d(input, weight),
        }
    }
}

/// Engine that runs deployed layers with sparse Winograd convolution. The
/// spatial weights passed in are ignored for those layers.
impl<T: Scalar> ConvEngine<T> for WinogradDeployment<T> {
    fn conv(&self, layer: usize, input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
        match self.layer(layer) {
            Some(wl) => sparse_winograd_conv(&wl.basis, input, &wl.sparse).map(|(y, _)| y),
            None => direct_conv2d(input, weight),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacMode {
    DenseSpatial,
    SparseSpatial,
    DenseWinograd,
    SparseWinograd,
}

impl MacMode {
    pub const ALL: [MacMode; 4] = [
        MacMode::DenseSpatial,
        MacMode::SparseSpatial,
        MacMode::DenseWinograd,
        MacMode::SparseWinograd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MacMode::DenseSpatial => "dense_spatial",
            MacMode::SparseSpatial => "sparse_spatial",
            MacMode::DenseWinograd => "dense_winograd",
            MacMode::SparseWinograd => "sparse_winograd",
        }
    }
}

/// Per-image multiply-accumulates of one weighted layer. Dense layers run
/// directly in every mode; the Winograd columns of a conv layer count only
/// the elementwise stage, with transform arithmetic in `transforms`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerMacs {
    pub layer: usize,
    pub dense_spatial: u64,
    pub sparse_spatial: u64,
    pub dense_winograd: u64,
    pub sparse_winograd: u64,
    pub transforms: u64,
}

impl LayerMacs {
    pub fn get(&self, mode: MacMode) -> u64 {
        match mode {
            MacMode::DenseSpatial => self.dense_spatial,
            MacMode::SparseSpatial => self.sparse_spatial,
            MacMode::DenseWinograd => self.dense_winograd,
            MacMode::SparseWinograd => self.sparse_winograd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
    /// Add transform arithmetic to the Winograd totals.
    pub include_transforms: bool,
}

impl MacReport {
    pub fn total(&self, mode: MacMode) -> u64 {
        let base: u64 = self.layers.iter().map(|l| l.get(mode)).sum();
        match mode {
            MacMode::DenseWinograd | MacMode::SparseWinograd if self.include_transforms => {
                base + self.layers.iter().map(|l| l.transforms).sum::<u64>()
            }
            _ => base,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,dense_spatial,sparse_spatial,dense_winograd,sparse_winograd,transforms\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                l.layer, l.dense_spatial, l.sparse_spatial, l.dense_winograd, l.sparse_winograd, l.transforms
            );
        }
        let _ = writeln!(
            s,
            "total,{},{},{},{},{}",
            self.total(MacMode::DenseSpatial),
            self.total(MacMode::SparseSpatial),
            self.total(MacMode::DenseWinograd),
            self.total(MacMode::SparseWinograd),
            self.layers.iter().map(|l| l.transforms).sum::<u64>()
        );
        s
    }
}

/// `D·C·r²·H'·W'`.
pub fn dense_spatial_macs(c: usize, d: usize, r: usize, out_h: usize, out_w: usize) -> u64 {
    (d * c * r * r * out_h * out_w) as u64
}

/// `D·C·n²·tiles` for the elementwise stage.
pub fn dense_winograd_macs(c: usize, d: usize, n: usize, tiles: usize) -> u64 {
    (d * c * n * n * tiles) as u64
}

/// Transform arithmetic of one Winograd layer per image: input transforms
/// (`2n³` per channel and tile), inverse transforms (`mn² + m²n` per output
/// channel and tile) and filter transforms (`nr² + n²r` per filter).
pub fn winograd_transform_macs(c: usize, d: usize, r: usize, n: usize, tiles: usize) -> u64 {
    let m = n - r + 1;
    let input = 2 * n * n * n * c * tiles;
    let inverse = (m * n * n + m * m * n) * d * tiles;
    let filter = (n * r * r + n * n * r) * c * d;
    (input + inverse + filter) as u64
}

/// MAC table for an image of the network's input size. `spatial` supplies
/// the weights whose nonzeros the sparse spatial column counts; `winograd`
/// (optional) the deployed Winograd filters. Without a deployment the
/// Winograd columns use `bases` densely and the sparse column counts the
/// nonzeros of the transformed `spatial` weights.
pub fn count_macs<T: Scalar>(
    spatial: &Network<T>,
    bases: &[Option<WinogradBasis<T>>],
    winograd: Option<&WinogradDeployment<T>>,
    include_transforms: bool,
) -> Result<MacReport> {
    let arch = spatial.architecture();
    let shapes = arch.shapes()?;
    let mut layers = Vec::new();
    for (l, spec) in arch.layers.iter().enumerate() {
        let [c, h, w] = shapes[l];
        match *spec {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                let (oh, ow) = (h - kernel + 1, w - kernel + 1);
                let dense = dense_spatial_macs(in_channels, out_channels, kernel, oh, ow);
                let nnz = spatial.weight(l).expect("conv weights").count_nonzero();
                let sparse = (nnz * oh * ow) as u64;
                let basis = winograd.and_then(|d| d.layer(l)).map(|wl| &wl.basis).or_else(|| bases.get(l).and_then(Option::as_ref));
                let (dw, sw, tr) = match basis {
                    Some(b) => {
                        let tiles = TileGrid::new(h, w, b.r(), b.n())?.tile_count();
                        let wnnz = match winograd.and_then(|d| d.layer(l)) {
                            Some(wl) => wl.sparse.nnz(),
                            None => transform_filters(b, spatial.weight(l).expect("conv weights"))?.count_nonzero(),
                        };
                        (
                            dense_winograd_macs(c, out_channels, b.n(), tiles),
                            (wnnz * tiles) as u64,
                            winograd_transform_macs(c, out_channels, b.r(), b.n(), tiles),
                        )
                    }
                    None => (dense, sparse, 0),
                };
                layers.push(LayerMacs {
                    layer: l,
                    dense_spatial: dense,
                    sparse_spatial: sparse,
                    dense_winograd: dw,
                    sparse_winograd: sw,
                    transforms: tr,
                });
            }
            LayerSpec::Dense { inputs, outputs } => {
                let dense = (inputs * outputs) as u64;
                let nnz = spatial.weight(l).expect("dense weights").count_nonzero() as u64;
                layers.push(LayerMacs {
                    layer: l,
                    dense_spatial: dense,
                    sparse_spatial: nnz,
                    dense_winograd: dense,
                    sparse_winograd: nnz,
                    transforms: 0,
                });
            }
            _ => {}
        }
    }
    Ok(MacReport { layers, include_transforms })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub loss: f64,
}

impl Evaluation {
    /// Top-1 accuracy in percent.
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.total.max(1) as f64
    }
}

/// Top-1 accuracy and mean cross-entropy over the whole dataset.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset<T>, engine: &dyn ConvEngine<T>) -> Result<Evaluation> {
    Ok(evaluate_with_predictions(net, data, engine)?.0)
}

/// As [`evaluate`], also returning the predicted class of every example
/// (first maximum on ties).
pub fn evaluate_with_predictions<T: Scalar>(
    net: &Network<T>,
    data: &Dataset<T>,
    engine: &dyn ConvEngine<T>,
) -> Result<(Evaluation, Vec<usize>)> {
    const CHUNK: usize = 256;
    let mut correct = 0;
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = data.batch(chunk)?;
        let (logits, l) = net.forward(&batch, engine)?;
        loss += l.to_f64_lossy() * chunk.len() as f64;
        for (i, &label) in batch.labels.iter().enumerate() {
            let row = logits.outer(i);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
            preds.push(best);
        }
    }
    let total = data.len();
    Ok((
        Evaluation {
            correct,
            total,
            loss: if total > 0 { loss / total as f64 } else { 0.0 },
        },
        preds,
    ))
}
