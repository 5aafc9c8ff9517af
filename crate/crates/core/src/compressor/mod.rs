//! Universal compression of a trained network: (dithered) uniform
//! quantization of the weights, codebook fine-tuning, and LZW coding into a
//! self-describing container.
//!
//! Weights are enumerated in canonical order: layer-major, then for conv
//! filters output channel, input channel, row, column (the tensor layout),
//! and for dense layers output, input. Biases are kept raw.

mod container;
mod lzw;

pub use container::{
    compression_ratio, read_arch, read_container, write_arch, write_container, Reader, FORMAT_VERSION, MAGIC,
};
pub use lzw::{lzw_decode, lzw_encode, LzwParams};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{Architecture, BatchSchedule, Dataset, Network};
use crate::sparsity::{grad_reg_wd, reg_wd, wd_threshold, RegularizerState, SparsityConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Plain uniform quantization (`U ≡ 0`).
    Uniform,
    /// Dithered uniform quantization.
    Dithered,
}

impl QuantMode {
    pub fn code(self) -> u8 {
        match self {
            QuantMode::Uniform => 0,
            QuantMode::Dithered => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(QuantMode::Uniform),
            1 => Some(QuantMode::Dithered),
            _ => None,
        }
    }
}

/// Reproducible dither values `U_i ~ U[-Δ/2, Δ/2)` drawn from ChaCha20.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DitherStream {
    pub seed: u64,
}

impl DitherStream {
    /// Identifier of the generator recorded in the container header.
    pub const PRNG_ID: u8 = 1;

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn values(&self, n: usize, delta: f64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        (0..n)
            .map(|_| {
                let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                (unit - 0.5) * delta
            })
            .collect()
    }
}

/// `round(x) = sign(x)·⌊|x| + 0.5⌋`.
pub fn round_half_away(x: f64) -> f64 {
    x.signum() * (x.abs() + 0.5).floor()
}

/// Bin indices `round((a_i + U_i)/Δ)`; bin 0 means pruned.
pub fn quantize(weights: &[f64], delta: f64, dither: &[f64]) -> Result<Vec<i32>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("cell size {delta} must be positive")));
    }
    if dither.len() != weights.len() {
        return Err(Error::dim("quantize", weights.len(), dither.len()));
    }
    weights
        .iter()
        .zip(dither)
        .map(|(&a, &u)| {
            let b = round_half_away((a + u) / delta);
            if !b.is_finite() || b.abs() > i32::MAX as f64 {
                return Err(Error::Numeric(format!("weight {a} does not fit a bin index at Δ={delta}")));
            }
            Ok(b as i32)
        })
        .collect()
}

/// A quantized network: bins and codebook for every weight, raw biases.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub mode: QuantMode,
    pub delta: f64,
    pub seed: u64,
    pub arch: Architecture,
    pub bins: Vec<i32>,
    /// Shared value per non-zero bin, initially `nΔ`.
    pub codebook: BTreeMap<i32, f64>,
    /// Biases in parameter order.
    pub raw: Vec<f64>,
}

impl QuantizedModel {
    pub fn from_network(net: &Network<f64>, delta: f64, mode: QuantMode, seed: u64) -> Result<Self> {
        let (weights, raw) = split_params(net);
        let dither = dither_for(mode, seed, weights.len(), delta);
        let bins = quantize(&weights, delta, &dither)?;
        let codebook = initial_codebook(&bins, delta);
        Ok(Self {
            mode,
            delta,
            seed,
            arch: net.architecture().clone(),
            bins,
            codebook,
            raw,
        })
    }

    pub fn dither(&self) -> Vec<f64> {
        dither_for(self.mode, self.seed, self.bins.len(), self.delta)
    }

    pub fn num_pruned(&self) -> usize {
        self.bins.iter().filter(|&&b| b == 0).count()
    }

    pub fn pruned_mask(&self) -> Vec<bool> {
        self.bins.iter().map(|&b| b == 0).collect()
    }

    /// `q̂_i = c_{n_i} − U_i` for unpruned weights, exactly `0` otherwise.
    pub fn dequantize(&self) -> Result<Vec<f64>> {
        let dither = self.dither();
        self.bins
            .iter()
            .zip(&dither)
            .map(|(&b, &u)| {
                if b == 0 {
                    return Ok(0.0);
                }
                self.codebook
                    .get(&b)
                    .map(|c| c - u)
                    .ok_or_else(|| Error::InvalidArgument(format!("no codebook entry for bin {b}")))
            })
            .collect()
    }

    pub fn to_network(&self) -> Result<Network<f64>> {
        let weights = self.dequantize()?;
        let template = Network::<f64>::zeros(self.arch.clone())?;
        let (mut wi, mut ri) = (0, 0);
        let mut params = Vec::with_capacity(template.params().len());
        for (p, info) in template.params().iter().zip(template.param_info()) {
            let (src, at) = if info.role.is_weight() { (&weights, &mut wi) } else { (&self.raw, &mut ri) };
            let n = p.len();
            let slice = src
                .get(*at..*at + n)
                .ok_or_else(|| Error::dim("to_network", *at + n, src.len()))?;
            params.push(Tensor::from_vec(p.shape(), slice.to_vec())?);
            *at += n;
        }
        if wi != weights.len() || ri != self.raw.len() {
            return Err(Error::dim("to_network", (wi, ri), (weights.len(), self.raw.len())));
        }
        Network::from_params(self.arch.clone(), params)
    }

    /// Largest `|c_n − nΔ|` over the codebook.
    pub fn max_drift(&self) -> f64 {
        self.codebook
            .iter()
            .map(|(&n, &c)| (c - n as f64 * self.delta).abs())
            .fold(0.0, f64::max)
    }
}

fn dither_for(mode: QuantMode, seed: u64, n: usize, delta: f64) -> Vec<f64> {
    match mode {
        QuantMode::Uniform => vec![0.0; n],
        QuantMode::Dithered => DitherStream::new(seed).values(n, delta),
    }
}

fn initial_codebook(bins: &[i32], delta: f64) -> BTreeMap<i32, f64> {
    bins.iter().filter(|&&b| b != 0).map(|&b| (b, b as f64 * delta)).collect()
}

/// Weights in canonical order and biases, both flattened.
pub fn split_params(net: &Network<f64>) -> (Vec<f64>, Vec<f64>) {
    let (mut w, mut b) = (Vec::new(), Vec::new());
    for (p, info) in net.params().iter().zip(net.param_info()) {
        if info.role.is_weight() {
            w.extend_from_slice(p.data());
        } else {
            b.extend_from_slice(p.data());
        }
    }
    (w, b)
}

#[derive(Clone, Copy, Debug)]
pub struct FinetuneOptions {
    pub lr: f64,
    pub steps: u64,
    pub schedule: BatchSchedule,
    /// Update `ζ_WD` as well; frozen by default.
    pub learn_zeta: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneRow {
    pub step: u64,
    pub loss: f64,
    pub r_wd: f64,
    pub max_drift: f64,
    pub clamped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneHistory {
    pub rows: Vec<FinetuneRow>,
}

impl FinetuneHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,E,R_WD,max_drift,clamped\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{}", r.step, r.loss, r.r_wd, r.max_drift, r.clamped);
        }
        s
    }
}

/// Shared-value update `c_n ← c_n − η · mean_{i ∈ bin n} g_i`. Every new value
/// is clamped to `[nΔ − Δ, nΔ + Δ]`; the number of clamped entries is returned.
pub fn codebook_step(
    codebook: &mut BTreeMap<i32, f64>,
    bins: &[i32],
    grads: &[f64],
    lr: f64,
    delta: f64,
) -> Result<usize> {
    if bins.len() != grads.len() {
        return Err(Error::dim("codebook_step", bins.len(), grads.len()));
    }
    let mut acc: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for (&b, &g) in bins.iter().zip(grads) {
        if b != 0 {
            let e = acc.entry(b).or_insert((0.0, 0));
            e.0 += g;
            e.1 += 1;
        }
    }
    let mut clamped = 0;
    for (b, (sum, count)) in acc {
        let c = codebook
            .get_mut(&b)
            .ok_or_else(|| Error::InvalidArgument(format!("no codebook entry for bin {b}")))?;
        let centre = b as f64 * delta;
        let proposed = *c - lr * sum / count as f64;
        let bounded = proposed.clamp(centre - delta, centre + delta);
        if bounded != proposed {
            clamped += 1;
        }
        *c = bounded;
    }
    if clamped > 0 {
        warn!("{clamped} codebook entries hit the ±Δ trust region");
    }
    Ok(clamped)
}

/// Fine-tunes the shared values against `E + e^{ζ_WD} R_WD − α ζ_WD`, with
/// the Winograd threshold recomputed from the reconstructed weights each
/// step. Pruned weights are never touched.
pub fn finetune_codebook(
    qm: &mut QuantizedModel,
    data: &Dataset<f64>,
    wd: &SparsityConfig<f64>,
    state: &mut RegularizerState<f64>,
    opts: &FinetuneOptions,
    history: &mut FinetuneHistory,
) -> Result<()> {
    let pruned = qm.pruned_mask();
    for step in 0..opts.steps {
        let net = qm.to_network()?;
        let batch = data.batch(&opts.schedule.indices(data.len(), step))?;
        let (loss, mut grads) = net.loss_and_grad(&batch)?;
        let r = if wd.wd_enabled() {
            state.theta_wd = wd_threshold(&net, wd)?;
            let gw = grad_reg_wd(&net, wd, state.theta_wd)?;
            for (g, r) in grads.iter_mut().zip(&gw) {
                g.add_assign_scaled(r, state.coef_wd())?;
            }
            Some(reg_wd(&net, wd, state.theta_wd)?)
        } else {
            None
        };
        let flat: Vec<f64> = grads
            .iter()
            .zip(net.param_info())
            .filter(|(_, info)| info.role.is_weight())
            .flat_map(|(g, _)| g.data().iter().copied())
            .collect();
        if !flat.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at fine-tuning step {step}")));
        }
        let clamped = codebook_step(&mut qm.codebook, &qm.bins, &flat, opts.lr, qm.delta)?;
        if opts.learn_zeta {
            state.zeta_step(r, None)?;
        }
        let rebuilt = qm.dequantize()?;
        if rebuilt.iter().zip(&pruned).any(|(&v, &p)| p && v != 0.0) {
            return Err(Error::Numeric(format!("pruned weight moved at fine-tuning step {step}")));
        }
        history.rows.push(FinetuneRow {
            step,
            loss,
            r_wd: r.unwrap_or(0.0),
            max_drift: qm.max_drift(),
            clamped,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.013, 0.004, -0.005], 0.01, &[0.0; 3]).unwrap(), vec![1, 0, -1]);
        assert!(quantize(&[1.0], 0.0, &[0.0]).is_err());
        assert!(quantize(&[1.0], -1.0, &[0.0]).is_err());
        assert_eq!(round_half_away(-0.5), -1.0);
        assert_eq!(round_half_away(0.5), 1.0);
        assert_eq!(round_half_away(0.49), 0.0);
    }

    #[test]
    fn dither_is_reproducible_and_bounded() {
        let a = DitherStream::new(42).values(1000, 0.02);
        let b = DitherStream::new(42).values(1000, 0.02);
        assert_eq!(a, b);
        assert!(a.iter().all(|u| (-0.01..0.01).contains(u)));
        assert_ne!(a, DitherStream::new(43).values(1000, 0.02));
        let mean = a.iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.001);
    }

    #[test]
    fn codebook_step_examples() {
        let mut cb: BTreeMap<i32, f64> = [(1, 1.0)].into_iter().collect();
        assert_eq!(codebook_step(&mut cb, &[1, 1, 0], &[0.2, 0.4, 9.0], 0.1, 1.0).unwrap(), 0);
        assert!((cb[&1] - (1.0 - 0.03)).abs() < 1e-15);

        let mut cb: BTreeMap<i32, f64> = [(2, 0.02), (-1, -0.01)].into_iter().collect();
        let before = cb.clone();
        codebook_step(&mut cb, &[2, -1], &[0.0, 0.0], 0.5, 0.01).unwrap();
        assert_eq!(cb, before);

        let mut cb: BTreeMap<i32, f64> = [(1, 0.01)].into_iter().collect();
        let clamped = codebook_step(&mut cb, &[1], &[10.0], 1.0, 0.01).unwrap();
        assert_eq!(clamped, 1);
        assert_eq!(cb[&1], 0.0);
    }

    #[test]
    fn dequantize_bound_and_pruning() {
        let arch = Architecture {
            input: [1, 4, 4],
            layers: vec![
                crate::nn::LayerSpec::Conv { in_channels: 1, out_channels: 3, kernel: 3, stride: 1 },
                crate::nn::LayerSpec::Dense { inputs: 12, outputs: 4 },
            ],
        };
        let net = Network::<f64>::init_he(arch, 5).unwrap();
        for mode in [QuantMode::Uniform, QuantMode::Dithered] {
            let qm = QuantizedModel::from_network(&net, 0.05, mode, 7).unwrap();
            let (w, b) = split_params(&net);
            let q = qm.dequantize().unwrap();
            for ((&a, &v), &bin) in w.iter().zip(&q).zip(&qm.bins) {
                if bin == 0 {
                    assert_eq!(v, 0.0);
                } else {
                    assert!((v - a).abs() <= 0.025 * (1.0 + 1e-12));
                }
            }
            assert_eq!(qm.raw, b);
            let rebuilt = qm.to_network().unwrap();
            assert_eq!(rebuilt.bias(0).unwrap(), net.bias(0).unwrap());
            assert!(!qm.codebook.contains_key(&0));
        }
    }

    #[test]
    fn uniform_matches_zero_dither() {
        let w = [0.3, -0.12, 0.049, 0.051, -0.6];
        let bins = quantize(&w, 0.1, &[0.0; 5]).unwrap();
        let arch = Architecture {
            input: [5, 1, 1],
            layers: vec![crate::nn::LayerSpec::Dense { inputs: 5, outputs: 1 }],
        };
        let mut net = Network::<f64>::zeros(arch).unwrap();
        net.weight_mut(0).unwrap().data_mut().copy_from_slice(&w);
        let qm = QuantizedModel::from_network(&net, 0.1, QuantMode::Uniform, 99).unwrap();
        assert_eq!(qm.bins, bins);
        let q = qm.dequantize().unwrap();
        for (&b, &v) in bins.iter().zip(&q) {
            assert_eq!(v, if b == 0 { 0.0 } else { b as f64 * 0.1 });
        }
    }
}
