use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use winojoint::compressor::{
    compression_ratio, read_container, split_params, write_container, FinetuneHistory, FinetuneOptions, QuantMode,
};
use winojoint::deploy::{
    count_macs, evaluate, evaluate_with_predictions, prune_spatial, prune_winograd, Evaluation, MacMode, MacReport,
    SparseSpatialEngine,
};
use winojoint::nn::{default_bases, Architecture, BatchSchedule, DirectEngine, Optimizer, OptimizerKind};
use winojoint::sparsity::{total_cost, train_regularized, wd_threshold, History, TrainPlan};
use winojoint::{Dataset, Network, QuantizedModel, RegularizerState, SparsityConfig};

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::config::{Engine, Regularizer, RunConfig};
use crate::error::{CliError, Result};
use crate::idx::ingest_idx;

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// CSV text prefixed with the effective configuration.
pub fn csv(cfg: &RunConfig, body: &str) -> String {
    format!("{}{}", cfg.csv_header(), body)
}

pub fn load_train(cfg: &RunConfig) -> Result<Dataset> {
    ingest_idx(&cfg.train_images, &cfg.train_labels)
}

pub fn load_test(cfg: &RunConfig) -> Result<Dataset> {
    ingest_idx(&cfg.test_images, &cfg.test_labels)
}

pub fn architecture(cfg: &RunConfig) -> Result<Architecture> {
    match cfg.arch.as_str() {
        "paper-net" => Ok(Architecture::paper_net()),
        other => Err(CliError::Config(format!("unknown arch `{other}`"))),
    }
}

pub fn sparsity_config(cfg: &RunConfig, arch: &Architecture) -> Result<SparsityConfig> {
    Ok(match cfg.regularizer {
        Regularizer::None => SparsityConfig::unregularized(),
        Regularizer::Spatial => SparsityConfig::spatial_only(arch, cfg.s_sd)?,
        Regularizer::Winograd => SparsityConfig::winograd_only(arch, cfg.s_wd)?,
        Regularizer::Joint => SparsityConfig::joint(arch, cfg.s_wd, cfg.s_sd)?,
    })
}

fn optimizer_kind(cfg: &RunConfig) -> OptimizerKind {
    if cfg.optimizer == "sgd" {
        OptimizerKind::Sgd
    } else {
        OptimizerKind::adam()
    }
}

fn fresh_regularizer(cfg: &RunConfig) -> RegularizerState {
    let mut r = RegularizerState::new(cfg.zeta_init, cfg.alpha, optimizer_kind(cfg), cfg.zeta_lr);
    r.learnable = cfg.zeta_learnable;
    r
}

/// Iteration counts of the plain and the regularized phase.
pub fn phase_lengths(cfg: &RunConfig, n: usize) -> (u64, u64) {
    let per = BatchSchedule { batch_size: cfg.batch, seed: 0 }.batches_per_epoch(n) as u64;
    (cfg.pretrain_epochs * per, cfg.epochs * per)
}

/// Plain training for `pretrain_epochs`, then regularized training for
/// `epochs` with a fresh optimizer. Starts from `resume` when given and
/// runs at most `max_iters` iterations in this call.
pub fn run_training(
    cfg: &RunConfig,
    data: &Dataset,
    resume: Option<Checkpoint>,
    max_iters: Option<u64>,
) -> Result<(Checkpoint, History)> {
    let arch = architecture(cfg)?;
    let mut ck = match resume {
        Some(ck) => {
            if ck.net.architecture() != &arch {
                return Err(CliError::Config("checkpoint architecture differs from config".into()));
            }
            ck
        }
        None => {
            let net = Network::init_he(arch.clone(), cfg.seed)?;
            let optimizer = Optimizer::new(optimizer_kind(cfg), cfg.lr, net.params());
            Checkpoint { net, iteration: 0, optimizer, reg: fresh_regularizer(cfg) }
        }
    };
    let (pre, reg) = phase_lengths(cfg, data.len());
    let end = (pre + reg).min(max_iters.map_or(u64::MAX, |m| ck.iteration.saturating_add(m)));
    let mut history = History::default();
    let plain = SparsityConfig::unregularized();
    let sparse = sparsity_config(cfg, &arch)?;
    while ck.iteration < end {
        let (scfg, schedule, phase_start, phase_end) = if ck.iteration < pre {
            (&plain, BatchSchedule { batch_size: cfg.batch, seed: cfg.seed }, 0, pre)
        } else {
            if ck.iteration == pre {
                ck.optimizer = Optimizer::new(optimizer_kind(cfg), cfg.lr, ck.net.params());
                ck.reg = fresh_regularizer(cfg);
            }
            (&sparse, BatchSchedule { batch_size: cfg.batch, seed: cfg.seed.wrapping_add(1) }, pre, pre + reg)
        };
        let stop = end.min(phase_end);
        let plan = TrainPlan {
            schedule,
            start: ck.iteration - phase_start,
            iterations: stop - ck.iteration,
            log_every: cfg.log_every,
        };
        let before = history.rows.len();
        let res = train_regularized(&mut ck.net, data, scfg, &mut ck.reg, &mut ck.optimizer, &plan, &mut history);
        for row in &mut history.rows[before..] {
            row.iteration += phase_start;
        }
        res.map_err(|e| match e {
            winojoint::Error::Numeric(m) => CliError::Numeric(m),
            other => other.into(),
        })?;
        ck.iteration = stop;
    }
    Ok((ck, history))
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, max_iters: Option<u64>) -> Result<Checkpoint> {
    cfg.validate(true)?;
    let data = load_train(cfg)?;
    let resume = resume.map(|p| read_checkpoint(&read_file(p)?)).transpose()?;
    let (ck, history) = run_training(cfg, &data, resume, max_iters)?;
    write_atomic(&cfg.out.join("history.csv"), csv(cfg, &history.to_csv()).as_bytes())?;
    write_atomic(&cfg.out.join("checkpoint.wspc"), &write_checkpoint(&ck)?)?;
    let test = load_test(cfg)?;
    let e = evaluate(&ck.net, &test, &DirectEngine)?;
    info!("trained {} iterations, test accuracy {:.2}%", ck.iteration, e.accuracy());
    Ok(ck)
}

/// Summary of one compression run.
#[derive(Clone, Debug)]
pub struct CompressOutcome {
    pub model: QuantizedModel,
    pub container: Vec<u8>,
    pub ratio: f64,
    /// Largest `|q̂ − a|` over unpruned weights before fine-tuning.
    pub max_quant_error: f64,
    /// Fine-tuning cost (data loss plus the weighted Winograd term) on the
    /// whole training set before and after fine-tuning.
    pub cost_before: f64,
    pub cost_after: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub finetune: FinetuneHistory,
}

/// `(cost, data loss)` of `net` over all of `data`, thresholds recomputed.
fn finetune_cost(net: &Network, data: &Dataset, wd: &SparsityConfig, reg: &RegularizerState) -> Result<(f64, f64)> {
    let mut reg = reg.clone();
    if wd.wd_enabled() {
        reg.theta_wd = wd_threshold(net, wd)?;
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let c = total_cost(net, &data.batch(&all)?, &reg, wd)?;
    Ok((c.total, c.loss))
}

/// Quantize → fine-tune the codebook → encode. `data` is the training set.
pub fn compress_network(cfg: &RunConfig, ck: &Checkpoint, data: &Dataset, delta: f64, mode: QuantMode, steps: u64) -> Result<CompressOutcome> {
    let net = &ck.net;
    let mut qm = QuantizedModel::from_network(net, delta, mode, cfg.seed)?;
    let (orig, _) = split_params(net);
    let deq = qm.dequantize()?;
    let max_quant_error = orig
        .iter()
        .zip(&deq)
        .zip(&qm.bins)
        .filter(|(_, &b)| b != 0)
        .map(|((a, q), _)| (q - a).abs())
        .fold(0.0, f64::max);
    let arch = net.architecture().clone();
    let wd = match cfg.regularizer {
        Regularizer::Winograd | Regularizer::Joint => SparsityConfig::winograd_only(&arch, cfg.s_wd)?,
        _ => SparsityConfig::unregularized(),
    };
    let mut reg = ck.reg.clone();
    reg.learnable = false;
    let (cost_before, loss_before) = finetune_cost(&qm.to_network()?, data, &wd, &reg)?;
    let opts = FinetuneOptions {
        lr: cfg.finetune_lr,
        steps,
        schedule: BatchSchedule { batch_size: cfg.batch, seed: cfg.seed.wrapping_add(2) },
        learn_zeta: false,
    };
    let mut finetune = FinetuneHistory::default();
    winojoint::compressor::finetune_codebook(&mut qm, data, &wd, &mut reg, &opts, &mut finetune).map_err(|e| match e {
        winojoint::Error::Numeric(m) => CliError::Numeric(m),
        other => other.into(),
    })?;
    let (cost_after, loss_after) = finetune_cost(&qm.to_network()?, data, &wd, &reg)?;
    let container = write_container(&qm)?;
    let ratio = compression_ratio(net.num_params(), container.len());
    Ok(CompressOutcome {
        model: qm,
        container,
        ratio,
        max_quant_error,
        cost_before,
        cost_after,
        loss_before,
        loss_after,
        finetune,
    })
}

fn layer_sparsity_csv(net: &Network) -> String {
    let mut s = String::from("layer,kind,weights,zeros,sparsity_percent\n");
    for l in net.architecture().weighted_layers() {
        let w = net.weight(l).expect("weighted layer");
        let zeros = w.len() - w.count_nonzero();
        let kind = if net.architecture().kernel(l).is_some() { "conv" } else { "dense" };
        let _ = writeln!(s, "{l},{kind},{},{zeros},{:.2}", w.len(), 100.0 * zeros as f64 / w.len() as f64);
    }
    s
}

pub fn cmd_compress(cfg: &RunConfig, checkpoint: &Path) -> Result<CompressOutcome> {
    cfg.validate(true)?;
    let ck = read_checkpoint(&read_file(checkpoint)?)?;
    let data = load_train(cfg)?;
    let mode = if cfg.dithered { QuantMode::Dithered } else { QuantMode::Uniform };
    let out = compress_network(cfg, &ck, &data, cfg.delta, mode, cfg.finetune_steps)?;
    write_atomic(&cfg.out.join("model.wspz"), &out.container)?;
    let net = out.model.to_network()?;
    let mut summary = String::from("metric,value\n");
    let _ = writeln!(summary, "delta,{}", cfg.delta);
    let _ = writeln!(summary, "mode,{}", if cfg.dithered { "duq" } else { "uq" });
    let _ = writeln!(summary, "parameters,{}", ck.net.num_params());
    let _ = writeln!(summary, "container_bytes,{}", out.container.len());
    let _ = writeln!(summary, "compression_ratio,{:.4}", out.ratio);
    let _ = writeln!(
        summary,
        "pruned_percent,{:.4}",
        100.0 * out.model.num_pruned() as f64 / out.model.bins.len() as f64
    );
    let _ = writeln!(summary, "max_quant_error,{:e}", out.max_quant_error);
    let _ = writeln!(summary, "cost_before_finetune,{:.6}", out.cost_before);
    let _ = writeln!(summary, "cost_after_finetune,{:.6}", out.cost_after);
    let _ = writeln!(summary, "loss_before_finetune,{:.6}", out.loss_before);
    let _ = writeln!(summary, "loss_after_finetune,{:.6}", out.loss_after);
    write_atomic(&cfg.out.join("compress.csv"), csv(cfg, &summary).as_bytes())?;
    write_atomic(&cfg.out.join("finetune.csv"), csv(cfg, &out.finetune.to_csv()).as_bytes())?;
    write_atomic(&cfg.out.join("layers.csv"), csv(cfg, &layer_sparsity_csv(&net)).as_bytes())?;
    info!("compression ratio {:.2} ({} bytes)", out.ratio, out.container.len());
    Ok(out)
}

pub fn cmd_decompress(cfg: &RunConfig, container: &Path) -> Result<Network> {
    cfg.validate(false)?;
    let qm = read_container(&read_file(container)?)?;
    let net = qm.to_network()?;
    let ck = Checkpoint {
        optimizer: Optimizer::new(OptimizerKind::adam(), cfg.lr, net.params()),
        net: net.clone(),
        iteration: 0,
        reg: fresh_regularizer(cfg),
    };
    write_atomic(&cfg.out.join("decompressed.wspc"), &write_checkpoint(&ck)?)?;
    write_atomic(&cfg.out.join("layers.csv"), csv(cfg, &layer_sparsity_csv(&net)).as_bytes())?;
    Ok(net)
}

#[derive(Clone, Debug)]
pub struct DeployOutcome {
    pub evaluation: Evaluation,
    pub macs: MacReport,
}

/// Prunes `net` for the configured engine (spatial at `ssd`, Winograd at
/// `swd`), evaluates it and counts MACs for both domains.
pub fn deploy_network(cfg: &RunConfig, net: &Network, test: &Dataset) -> Result<DeployOutcome> {
    let arch = net.architecture();
    let bases = default_bases(arch)?;
    let (spatial, _) = prune_spatial(net, cfg.s_sd, &arch.weighted_layers())?;
    let dep = prune_winograd(net, cfg.s_wd, &bases)?;
    let evaluation = match cfg.engine {
        Engine::Spatial => evaluate(&spatial, test, &SparseSpatialEngine::from_network(&spatial)?)?,
        Engine::Winograd => evaluate(net, test, &dep)?,
    };
    let macs = count_macs(&spatial, &bases, Some(&dep), cfg.include_transforms)?;
    Ok(DeployOutcome { evaluation, macs })
}

pub fn cmd_deploy(cfg: &RunConfig, container: &Path) -> Result<DeployOutcome> {
    cfg.validate(true)?;
    let net = read_container(&read_file(container)?)?.to_network()?;
    let test = load_test(cfg)?;
    let out = deploy_network(cfg, &net, &test)?;
    let mut e = String::from("engine,swd,ssd,correct,total,accuracy_percent,loss\n");
    let ev = &out.evaluation;
    let _ = writeln!(
        e,
        "{},{},{},{},{},{:.2},{:.6}",
        cfg.engine.name(),
        cfg.s_wd,
        cfg.s_sd,
        ev.correct,
        ev.total,
        ev.accuracy(),
        ev.loss
    );
    write_atomic(&cfg.out.join("eval.csv"), csv(cfg, &e).as_bytes())?;
    write_atomic(&cfg.out.join("macs.csv"), csv(cfg, &out.macs.to_csv()).as_bytes())?;
    info!(
        "{} accuracy {:.2}%, MACs {} (dense {})",
        cfg.engine.name(),
        ev.accuracy(),
        out.macs.total(match cfg.engine {
            Engine::Spatial => MacMode::SparseSpatial,
            Engine::Winograd => MacMode::SparseWinograd,
        }),
        out.macs.total(match cfg.engine {
            Engine::Spatial => MacMode::DenseSpatial,
            Engine::Winograd => MacMode::DenseWinograd,
        })
    );
    Ok(out)
}

/// Accuracy of `net` unpruned and pruned in each domain at the configured ratios.
#[derive(Clone, Copy, Debug)]
pub struct DomainAccuracy {
    pub unpruned: f64,
    pub spatial_pruned: f64,
    pub winograd_pruned: f64,
    pub winograd_unpruned: f64,
    /// Fraction of test examples on which both unpruned engines predict the same class.
    pub engine_agreement: f64,
}

pub fn domain_accuracy(net: &Network, test: &Dataset, s_sd: f64, s_wd: f64) -> Result<DomainAccuracy> {
    let arch = net.architecture();
    let bases = default_bases(arch)?;
    let (e0, p0) = evaluate_with_predictions(net, test, &DirectEngine)?;
    let dense_wino = prune_winograd(net, 0.0, &bases)?;
    let (ew, pw) = evaluate_with_predictions(net, test, &dense_wino)?;
    let (ps, _) = prune_spatial(net, s_sd, &arch.weighted_layers())?;
    let es = evaluate(&ps, test, &SparseSpatialEngine::from_network(&ps)?)?;
    let dep = prune_winograd(net, s_wd, &bases)?;
    let ewp = evaluate(net, test, &dep)?;
    let agree = p0.iter().zip(&pw).filter(|(a, b)| a == b).count();
    Ok(DomainAccuracy {
        unpruned: e0.accuracy(),
        spatial_pruned: es.accuracy(),
        winograd_pruned: ewp.accuracy(),
        winograd_unpruned: ew.accuracy(),
        engine_agreement: agree as f64 / p0.len().max(1) as f64,
    })
}

pub fn cmd_report(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    cfg.validate(true)?;
    let ck = read_checkpoint(&read_file(checkpoint)?)?;
    let test = load_test(cfg)?;
    let train = load_train(cfg)?;
    let a = domain_accuracy(&ck.net, &test, cfg.s_sd, cfg.s_wd)?;
    let mut t = String::from("inference_domain,pruned_in,prune_percent,accuracy_percent\n");
    let _ = writeln!(t, "spatial,none,0,{:.2}", a.unpruned);
    let _ = writeln!(t, "spatial,spatial,{},{:.2}", cfg.s_sd, a.spatial_pruned);
    let _ = writeln!(t, "winograd,none,0,{:.2}", a.winograd_unpruned);
    let _ = writeln!(t, "winograd,winograd,{},{:.2}", cfg.s_wd, a.winograd_pruned);
    write_atomic(&cfg.out.join("report_accuracy.csv"), csv(cfg, &t).as_bytes())?;

    let mut c = String::from("mode,delta,pruned_percent,container_bytes,compression_ratio,accuracy_percent\n");
    for mode in [QuantMode::Uniform, QuantMode::Dithered] {
        for &delta in &cfg.sweep_deltas {
            let out = compress_network(cfg, &ck, &train, delta, mode, 0)?;
            let acc = evaluate(&out.model.to_network()?, &test, &DirectEngine)?.accuracy();
            let _ = writeln!(
                c,
                "{},{delta},{:.2},{},{:.4},{acc:.2}",
                if mode == QuantMode::Dithered { "duq" } else { "uq" },
                100.0 * out.model.num_pruned() as f64 / out.model.bins.len() as f64,
                out.container.len(),
                out.ratio
            );
        }
    }
    write_atomic(&cfg.out.join("report_compression.csv"), csv(cfg, &c).as_bytes())?;
    Ok(())
}

/// Fast end-to-end checks that need no dataset. Returns `(name, passed)` pairs.
pub fn selftest(seed: u64) -> Result<Vec<(String, bool)>> {
    let arch = Architecture::paper_net();
    let net = Network::init_he(arch.clone(), seed)?;
    let mut results = Vec::new();
    for (layer, basis) in default_bases::<f64>(&arch)?.iter().enumerate() {
        let Some(basis) = basis else { continue };
        let w = net.weight(layer).expect("conv weight");
        let (c, side) = (w.shape()[1], 12);
        let x: Vec<f64> = (0..c * side * side).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = winojoint::Tensor::from_vec(&[c, side, side], x)?;
        let direct = winojoint::winograd::direct_conv2d(&x, w)?;
        let wino = winojoint::winograd::winograd_conv2d(basis, &x, w, 1)?;
        let err = direct.max_abs_diff(&wino)?;
        results.push((format!("winograd F({},{}) layer {layer}", basis.m(), basis.r()), err < 1e-9));
    }
    let qm = QuantizedModel::from_network(&net, 0.01, QuantMode::Dithered, seed)?;
    let bytes = write_container(&qm)?;
    let back = read_container(&bytes)?;
    results.push(("container roundtrip".into(), back.bins == qm.bins && write_container(&back)? == bytes));
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x10;
    results.push(("container corruption detected".into(), read_container(&bad).is_err()));
    Ok(results)
}
