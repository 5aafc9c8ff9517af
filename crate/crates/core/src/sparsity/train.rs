use std::fmt::Write as _;

use log::{info, warn};

use super::{grad_reg_sd, grad_reg_wd, reg_sd, reg_wd, sd_threshold, wd_threshold, RegularizerState, SparsityConfig};
use crate::error::{Error, Result};
use crate::nn::{BatchSchedule, Dataset, Network, Optimizer};
use crate::scalar::Scalar;

/// Which iterations to run and in which batch order.
#[derive(Clone, Copy, Debug)]
pub struct TrainPlan {
    pub schedule: BatchSchedule,
    /// Global iteration to start from (non-zero when resuming).
    pub start: u64,
    pub iterations: u64,
    /// Emit a progress line every this many iterations (0 = never).
    pub log_every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: u64,
    pub loss: f64,
    pub r_wd: f64,
    pub r_sd: f64,
    pub zeta_wd: f64,
    pub zeta_sd: f64,
    pub theta_wd: f64,
    pub theta_sd: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub const HEADER: &'static str = "iteration,E,R_WD,R_SD,zeta_WD,zeta_SD,theta_WD,theta_SD";

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }

    /// CSV body with header; disabled terms are written as `0`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{},{},{:e},{:e}",
                r.iteration, r.loss, r.r_wd, r.r_sd, r.zeta_wd, r.zeta_sd, r.theta_wd, r.theta_sd
            );
        }
        s
    }
}

/// Regularized training. Each iteration recomputes the thresholds from the
/// current weights, takes one optimizer step on
/// `∇E + e^{ζ_WD} ∇R_WD + e^{ζ_SD} ∇R_SD`, then one step on `ζ` using the
/// regularizer values of the same iterate.
///
/// Rows are appended to `history` as they are produced, so on a divergence
/// error the caller still has everything up to the failing iteration.
pub fn train_regularized<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    cfg: &SparsityConfig<T>,
    state: &mut RegularizerState<T>,
    opt: &mut Optimizer<T>,
    plan: &TrainPlan,
    history: &mut History,
) -> Result<()> {
    cfg.validate(net.architecture())?;
    if data.len() < plan.schedule.batch_size || plan.schedule.batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "batch size {} does not fit {} examples",
            plan.schedule.batch_size,
            data.len()
        )));
    }
    for it in plan.start..plan.start + plan.iterations {
        let batch = data.batch(&plan.schedule.indices(data.len(), it))?;
        if cfg.wd_enabled() {
            state.theta_wd = wd_threshold(net, cfg)?;
        }
        if cfg.sd_enabled() {
            state.theta_sd = sd_threshold(net, cfg)?;
        }
        let (loss, mut grads) = net.loss_and_grad(&batch).map_err(|e| diverged(it, e))?;
        let r_wd = if cfg.wd_enabled() {
            let gw = grad_reg_wd(net, cfg, state.theta_wd)?;
            let c = state.coef_wd();
            for (g, r) in grads.iter_mut().zip(&gw) {
                g.add_assign_scaled(r, c)?;
            }
            Some(reg_wd(net, cfg, state.theta_wd)?)
        } else {
            None
        };
        let r_sd = if cfg.sd_enabled() {
            let gs = grad_reg_sd(net, cfg, state.theta_sd)?;
            let c = state.coef_sd();
            for (g, r) in grads.iter_mut().zip(&gs) {
                g.add_assign_scaled(r, c)?;
            }
            Some(reg_sd(net, cfg, state.theta_sd)?)
        } else {
            None
        };
        history.rows.push(HistoryRow {
            iteration: it,
            loss: loss.to_f64_lossy(),
            r_wd: r_wd.map_or(0.0, T::to_f64_lossy),
            r_sd: r_sd.map_or(0.0, T::to_f64_lossy),
            zeta_wd: state.zeta_wd().to_f64_lossy(),
            zeta_sd: state.zeta_sd().to_f64_lossy(),
            theta_wd: state.theta_wd.to_f64_lossy(),
            theta_sd: state.theta_sd.to_f64_lossy(),
        });
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(diverged(it, Error::Numeric("non-finite gradient".into())));
        }
        opt.update(net.params_mut(), &grads)?;
        state.zeta_step(r_wd, r_sd).map_err(|e| diverged(it, e))?;
        if !net.params().iter().all(|p| p.is_finite()) {
            return Err(diverged(it, Error::Numeric("non-finite weights".into())));
        }
        if plan.log_every > 0 && (it + 1) % plan.log_every == 0 {
            info!(
                "iter {} E={:.4} R_WD={:.3e} R_SD={:.3e} zeta=({:.3},{:.3})",
                it + 1,
                loss.to_f64_lossy(),
                r_wd.map_or(0.0, T::to_f64_lossy),
                r_sd.map_or(0.0, T::to_f64_lossy),
                state.zeta_wd().to_f64_lossy(),
                state.zeta_sd().to_f64_lossy()
            );
        }
    }
    Ok(())
}

fn diverged(it: u64, e: Error) -> Error {
    warn!("training diverged at iteration {it}: {e}");
    Error::Numeric(format!("diverged at iteration {it}: {e}"))
}
