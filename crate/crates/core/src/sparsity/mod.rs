//! Joint spatial/Winograd sparsity regularization.
//!
//! Both regularizers are partial L2 penalties: only weights whose magnitude is
//! at or below a pooled nearest-rank percentile threshold contribute, and the
//! sum is normalised by the total weight count of the regularized layers. The
//! thresholds are recomputed every iteration and treated as constants when
//! differentiating.

mod train;

pub use train::{train_regularized, History, HistoryRow, TrainPlan};

use crate::error::{Error, Result};
use crate::nn::{Architecture, LayerSpec, Network, Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor};
use crate::winograd::{transform_filters, WinogradBasis};

/// Nearest-rank percentile: element `⌈s/100 · N⌉` (1-based) of the sorted
/// values, or zero when `s == 0`.
pub fn nearest_rank<T: Scalar>(values: &mut [T], s: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty pool".into()));
    }
    if !(0.0..=100.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("sparsity {s} outside [0, 100]")));
    }
    let k = nearest_rank_index(values.len(), s);
    if k == 0 {
        return Ok(T::zero());
    }
    let (_, v, _) = values.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite magnitudes"));
    Ok(*v)
}

/// 1-based rank `⌈s·N/100⌉`, clamped to `N`; 0 means "nothing selected".
pub fn nearest_rank_index(n: usize, s: f64) -> usize {
    let exact = s * n as f64 / 100.0;
    // Absorb representation error such as 70·10/100 = 7.000000000000001.
    let k = (exact - 1e-9 * exact.max(1.0)).ceil().max(0.0) as usize;
    k.min(n)
}

/// A Winograd-regularized layer and the basis its filters are transformed with.
#[derive(Clone, Debug)]
pub struct WdLayer<T> {
    pub layer: usize,
    pub basis: WinogradBasis<T>,
}

/// Target sparsities (percent) and the layers each regularizer covers.
/// An empty layer list disables that regularizer entirely.
#[derive(Clone, Debug)]
pub struct SparsityConfig<T> {
    pub s_wd: f64,
    pub s_sd: f64,
    pub wd_layers: Vec<WdLayer<T>>,
    pub sd_layers: Vec<usize>,
}

impl<T: Scalar> SparsityConfig<T> {
    /// Winograd regularization on every 3×3 / 5×5 conv layer (bases `(3,4)` and
    /// `(5,8)`), spatial regularization on every conv and dense layer.
    pub fn joint(arch: &Architecture, s_wd: f64, s_sd: f64) -> Result<Self> {
        let mut wd_layers = Vec::new();
        for layer in arch.conv_layers() {
            let basis = match arch.kernel(layer) {
                Some(3) => WinogradBasis::new(3, 4)?,
                Some(5) => WinogradBasis::new(5, 8)?,
                _ => continue,
            };
            wd_layers.push(WdLayer { layer, basis });
        }
        Ok(Self {
            s_wd,
            s_sd,
            wd_layers,
            sd_layers: arch.weighted_layers(),
        })
    }

    pub fn spatial_only(arch: &Architecture, s_sd: f64) -> Result<Self> {
        let mut cfg = Self::joint(arch, 0.0, s_sd)?;
        cfg.wd_layers.clear();
        Ok(cfg)
    }

    pub fn winograd_only(arch: &Architecture, s_wd: f64) -> Result<Self> {
        let mut cfg = Self::joint(arch, s_wd, 0.0)?;
        cfg.sd_layers.clear();
        Ok(cfg)
    }

    pub fn unregularized() -> Self {
        Self {
            s_wd: 0.0,
            s_sd: 0.0,
            wd_layers: Vec::new(),
            sd_layers: Vec::new(),
        }
    }

    pub fn wd_enabled(&self) -> bool {
        !self.wd_layers.is_empty()
    }

    pub fn sd_enabled(&self) -> bool {
        !self.sd_layers.is_empty()
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        for s in [self.s_wd, self.s_sd] {
            if !(0.0..=100.0).contains(&s) {
                return Err(Error::InvalidArgument(format!("sparsity {s} outside [0, 100]")));
            }
        }
        for wl in &self.wd_layers {
            match arch.layers.get(wl.layer) {
                Some(LayerSpec::Conv { kernel, stride: 1, .. }) if (*kernel == 3 || *kernel == 5) && *kernel == wl.basis.r() => {}
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {} ({other:?}) cannot be Winograd-regularized with r={}",
                        wl.layer,
                        wl.basis.r()
                    )))
                }
            }
        }
        for &l in &self.sd_layers {
            if !arch.layers.get(l).is_some_and(LayerSpec::has_params) {
                return Err(Error::InvalidArgument(format!("layer {l} has no weights to regularize")));
            }
        }
        Ok(())
    }
}

/// Winograd-domain filter banks (`D×C×n×n`) of the regularized layers.
pub fn winograd_weights<T: Scalar>(net: &Network<T>, cfg: &SparsityConfig<T>) -> Result<Vec<Tensor<T>>> {
    cfg.wd_layers
        .iter()
        .map(|wl| {
            let w = net
                .weight(wl.layer)
                .ok_or_else(|| Error::InvalidArgument(format!("layer {} has no weights", wl.layer)))?;
            transform_filters(&wl.basis, w)
        })
        .collect()
}

fn spatial_weights<'a, T: Scalar>(net: &'a Network<T>, cfg: &SparsityConfig<T>) -> Result<Vec<&'a Tensor<T>>> {
    cfg.sd_layers
        .iter()
        .map(|&l| net.weight(l).ok_or_else(|| Error::InvalidArgument(format!("layer {l} has no weights"))))
        .collect()
}

/// `N_WD`: number of Winograd-domain weights over the regularized layers.
pub fn wd_count<T: Scalar>(net: &Network<T>, cfg: &SparsityConfig<T>) -> usize {
    cfg.wd_layers
        .iter()
        .filter_map(|wl| net.weight(wl.layer).map(|w| w.shape()[0] * w.shape()[1] * wl.basis.n() * wl.basis.n()))
        .sum()
}

/// `N_SD`: number of spatial weights over the regularized layers.
pub fn sd_count<T: Scalar>(net: &Network<T>, cfg: &SparsityConfig<T>) -> usize {
    cfg.sd_layers.iter().filter_map(|&l| net.weight(l).map(Tensor::len)).sum()
}

fn pooled_threshold<'a, T: Scalar>(tensors: impl Iterator<Item = &'a Tensor<T>>, s: f64) -> Result<T> {
    let mut mags: Vec<T> = tensors.flat_map(|t| t.data().iter().map(|v| v.abs())).collect();
    nearest_rank(&mut mags, s)
}

/// `θ_WD`: pooled nearest-rank `s_WD` percentile of `|G w Gᵀ|`.
pub fn wd_threshold<T: Scalar>(net: &Network<T>, cfg: &SparsityConfig<T>) -> Result<T> {
    if !cfg.wd_enabled() {
        return Err(Error::InvalidArgument("no Winograd-regularized layers".into()));
    }
    let wd = winograd_weights(net, cfg)?;
    pooled_threshold(wd.iter(), cfg.s_wd)
}

/// `θ_SD`: pooled nearest-rank `s_SD` percentile of spatial weight magnitudes.
pub fn sd_threshold<T: Scalar>(net: &Network<T>, cfg: &SparsityConfig<T>) -> Result<T> {
    if !cfg.sd_enabled() {
        return Err(Error::InvalidArgument("no spatially regularized layers".into()));
    }
    pooled_threshold(spatial_weights(net, cfg)?.into_iter(), cfg.s_sd)
}

fn masked_sum_sq<T: Scalar>(values: &[T], theta: T) -> T {
    values.iter().filter(|v| v.abs() <= theta).map(|&v| v * v).sum()
}

fn checked_theta<T: Scalar>(theta: T) -> Result<()> {
    if theta.is_nan() || theta < T::zero() {
        return Err(Error::InvalidArgument(format!("threshold {theta} must be >= 0")));
    }
    Ok(())
}

/// `R_WD = (1/N_WD) Σ ‖(G w Gᵀ) ⊙ 1_{|G w Gᵀ| ≤ θ}‖²`.
pub fn reg_wd<T: Scalar>(net: &Network<T>, cfg: &SparsityConfig<T>, theta: T) -> Result<T> {
    checked_theta(theta)?;
    let n = wd_count(net, cfg);
    if n == 0 {
        return Ok(T::zero());
    }
    let wd = winograd_weights(net, cfg)?;
    let s: T = wd.iter().map(|t| masked_sum_sq(t.data(), theta)).sum();
    Ok(s / T::from_usize(n).expect("count"))
}

/// `R_SD = (1/N_SD) Σ ‖w ⊙ 1_{|w| ≤ θ}‖²`.
pub fn reg_sd<T: Scalar>(net: &Network<T>, cfg: &SparsityConfig<T>, theta: T) -> Result<T> {
    checked_theta(theta)?;
    let n = sd_count(net, cfg);
    if n == 0 {
        return Ok(T::zero());
    }
    let s: T = spatial_weights(net, cfg)?
        .iter()
        .map(|t| masked_sum_sq(t.data(), theta))
        .sum();
    Ok(s / T::from_usize(n).expect("count"))
}

/// `∇ R_WD` for every parameter of `net` (zero outside the regularized
/// layers): per filter `(2/N_WD) Gᵀ((G w Gᵀ) ⊙ mask) G` with the mask frozen.
pub fn grad_reg_wd<T: Scalar>(net: &Network<T>, cfg: &SparsityConfig<T>, theta: T) -> Result<Vec<Tensor<T>>> {
    checked_theta(theta)?;
    let mut grads: Vec<Tensor<T>> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let n = wd_count(net, cfg);
    if n == 0 {
        return Ok(grads);
    }
    let scale = T::lit(2.0) / T::from_usize(n).expect("count");
    let wd = winograd_weights(net, cfg)?;
    for (wl, wdt) in cfg.wd_layers.iter().zip(&wd) {
        let idx = net.weight_index(wl.layer).expect("checked by winograd_weights");
        let (r, nn) = (wl.basis.r(), wl.basis.n());
        let filters = wdt.shape()[0] * wdt.shape()[1];
        let g = &mut grads[idx];
        for k in 0..filters {
            let tile = &wdt.data()[k * nn * nn..(k + 1) * nn * nn];
            if tile.iter().all(|v| v.abs() > theta) {
                continue;
            }
            let masked: Vec<T> = tile.iter().map(|&v| if v.abs() <= theta { v } else { T::zero() }).collect();
            let back = wl.basis.adjoint_filter(&Matrix::from_vec(nn, nn, masked)?)?;
            for (dst, &v) in g.data_mut()[k * r * r..(k + 1) * r * r].iter_mut().zip(back.data()) {
                *dst = scale * v;
            }
        }
    }
    Ok(grads)
}

/// `∇ R_SD = (2/N_SD) w ⊙ 1_{|w| ≤ θ}` on the regularized layers.
pub fn grad_reg_sd<T: Scalar>(net: &Network<T>, cfg: &SparsityConfig<T>, theta: T) -> Result<Vec<Tensor<T>>> {
    checked_theta(theta)?;
    let mut grads: Vec<Tensor<T>> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let n = sd_count(net, cfg);
    if n == 0 {
        return Ok(grads);
    }
    let scale = T::lit(2.0) / T::from_usize(n).expect("count");
    for &l in &cfg.sd_layers {
        let idx = net.weight_index(l).expect("checked by sd_count");
        let w = &net.params()[idx];
        for (dst, &v) in grads[idx].data_mut().iter_mut().zip(w.data()) {
            if v.abs() <= theta {
                *dst = scale * v;
            }
        }
    }
    Ok(grads)
}

/// Learnable log-coefficients `ζ_WD`, `ζ_SD` and the current thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerState<T> {
    /// `[ζ_WD, ζ_SD]` as one tensor so the shared optimizer can update it.
    zeta: Vec<Tensor<T>>,
    pub alpha: T,
    pub theta_wd: T,
    pub theta_sd: T,
    /// When false the coefficients stay fixed (plain `λ R` regularization).
    pub learnable: bool,
    optimizer: Optimizer<T>,
}

impl<T: Scalar> RegularizerState<T> {
    pub fn new(zeta_init: T, alpha: T, kind: OptimizerKind, lr: T) -> Self {
        let zeta = vec![Tensor::filled(&[2], zeta_init)];
        let optimizer = Optimizer::new(kind, lr, &zeta);
        Self {
            zeta,
            alpha,
            theta_wd: T::zero(),
            theta_sd: T::zero(),
            learnable: true,
            optimizer,
        }
    }

    /// `ζ_init = 10`, `α = 1`, Adam with learning rate `1e-4`.
    pub fn with_defaults() -> Self {
        Self::new(T::lit(10.0), T::one(), OptimizerKind::adam(), T::lit(1e-4))
    }

    pub fn zeta_wd(&self) -> T {
        self.zeta[0].data()[0]
    }

    pub fn zeta_sd(&self) -> T {
        self.zeta[0].data()[1]
    }

    pub fn set_zeta(&mut self, wd: T, sd: T) {
        self.zeta[0].data_mut().copy_from_slice(&[wd, sd]);
    }

    pub fn coef_wd(&self) -> T {
        self.zeta_wd().exp()
    }

    pub fn coef_sd(&self) -> T {
        self.zeta_sd().exp()
    }

    pub fn optimizer(&self) -> &Optimizer<T> {
        &self.optimizer
    }

    pub fn set_optimizer(&mut self, opt: Optimizer<T>) {
        self.optimizer = opt;
    }

    /// One descent step on `ζ` with `∂C/∂ζ = e^ζ R − α`. A disabled term
    /// (`None`) keeps its coefficient unchanged.
    pub fn zeta_step(&mut self, r_wd: Option<T>, r_sd: Option<T>) -> Result<()> {
        if !self.learnable {
            return Ok(());
        }
        let grad = |z: T, r: Option<T>| r.map_or(T::zero(), |r| z.exp() * r - self.alpha);
        let g = Tensor::from_vec(&[2], vec![grad(self.zeta_wd(), r_wd), grad(self.zeta_sd(), r_sd)])?;
        let before = self.zeta[0].clone();
        self.optimizer.update(&mut self.zeta, &[g])?;
        // Adam would otherwise still drift a disabled coordinate through its moments.
        if r_wd.is_none() {
            self.zeta[0].data_mut()[0] = before.data()[0];
        }
        if r_sd.is_none() {
            self.zeta[0].data_mut()[1] = before.data()[1];
        }
        if !self.zeta[0].is_finite() {
            return Err(Error::Numeric("regularization coefficient diverged".into()));
        }
        Ok(())
    }
}

/// Values of the cost terms at one iterate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostBreakdown<T> {
    pub loss: T,
    pub r_wd: Option<T>,
    pub r_sd: Option<T>,
    pub total: T,
}

/// `C = E + e^{ζ_WD} R_WD + e^{ζ_SD} R_SD − α(ζ_WD + ζ_SD)`, with disabled
/// terms (and their penalty) omitted.
pub fn combine_cost<T: Scalar>(loss: T, r_wd: Option<T>, r_sd: Option<T>, state: &RegularizerState<T>) -> T {
    let mut c = loss;
    if let Some(r) = r_wd {
        c += state.coef_wd() * r - state.alpha * state.zeta_wd();
    }
    if let Some(r) = r_sd {
        c += state.coef_sd() * r - state.alpha * state.zeta_sd();
    }
    c
}

/// Evaluates the full cost on one batch at the state's current thresholds.
pub fn total_cost<T: Scalar>(
    net: &Network<T>,
    batch: &crate::nn::TrainBatch<T>,
    state: &RegularizerState<T>,
    cfg: &SparsityConfig<T>,
) -> Result<CostBreakdown<T>> {
    let (_, loss) = net.forward(batch, &crate::nn::DirectEngine)?;
    let r_wd = cfg.wd_enabled().then(|| reg_wd(net, cfg, state.theta_wd)).transpose()?;
    let r_sd = cfg.sd_enabled().then(|| reg_sd(net, cfg, state.theta_sd)).transpose()?;
    Ok(CostBreakdown {
        loss,
        r_wd,
        r_sd,
        total: combine_cost(loss, r_wd, r_sd, state),
    })
}
