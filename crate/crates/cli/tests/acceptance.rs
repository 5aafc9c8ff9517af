//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use winojoint::compressor::{lzw_decode, lzw_encode, read_container, LzwParams, QuantMode};
use winojoint::deploy::{count_macs, prune_spatial, prune_winograd, MacMode};
use winojoint::nn::{default_bases, Architecture, LayerSpec, OptimizerKind};
use winojoint::sparsity::{grad_reg_sd, grad_reg_wd, reg_sd, reg_wd, sd_threshold, wd_threshold, winograd_weights};
use winojoint::tensor::Matrix;
use winojoint::winograd::{direct_conv2d, winograd_conv2d, WinogradBasis};
use winojoint::{Network, QuantizedModel, RegularizerState, SparsityConfig, Tensor};
use winojoint_cli::checkpoint::Checkpoint;
use winojoint_cli::commands::{compress_network, domain_accuracy, load_test, load_train, phase_lengths, run_training};
use winojoint_cli::config::{Regularizer, RunConfig};

const BASES: [(usize, usize); 3] = [(3, 4), (3, 6), (5, 8)];
const SPARSITY: f64 = 70.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn winograd_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for (r, n) in BASES {
        let basis = WinogradBasis::new(r, n).unwrap();
        for _ in 0..100 {
            let (c, d) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let (h, w) = (rng.gen_range(r..=r + 12), rng.gen_range(r..=r + 12));
            let x = random_tensor(&mut rng, &[c, h, w]);
            let f = random_tensor(&mut rng, &[d, c, r, r]);
            let a = direct_conv2d(&x, &f).unwrap();
            let b = winograd_conv2d(&basis, &x, &f, 1).unwrap();
            worst = worst.max(a.max_abs_diff(&b).unwrap());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-8 && secs < 60.0, format!("max error {worst:.2e} over 300 instances, {secs:.1}s"))
}

fn golden_vector() -> Outcome {
    let basis = WinogradBasis::<f64>::new(3, 4).unwrap();
    let mut delta = Matrix::zeros(3, 3);
    delta.set(1, 1, 1.0);
    let got = basis.transform_filter(&delta).unwrap();
    let q = 0.25;
    let expect = [
        [0.0, 0.0, 0.0, 0.0],
        [0.0, q, -q, 0.0],
        [0.0, -q, q, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ];
    let exact = (0..4).all(|i| (0..4).all(|j| got.get(i, j) == expect[i][j]));
    outcome(exact, format!("{:?}", (0..4).map(|i| (0..4).map(|j| got.get(i, j)).collect::<Vec<_>>()).collect::<Vec<_>>()))
}

/// Single conv layer with `filters` input channels and one output channel.
fn conv_net(kernel: usize, filters: usize, rng: &mut ChaCha8Rng) -> Network {
    let arch = Architecture {
        input: [filters, kernel, kernel],
        layers: vec![
            LayerSpec::Conv { in_channels: filters, out_channels: 1, kernel, stride: 1 },
            LayerSpec::Dense { inputs: 1, outputs: 2 },
        ],
    };
    let mut net = Network::zeros(arch).unwrap();
    for v in net.weight_mut(0).unwrap().data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    net
}

/// `(agreeing, scored)` central-difference comparisons over mask-stable coordinates.
fn fd_agreement(
    net: &Network,
    analytic: &[f64],
    value: impl Fn(&Network) -> f64,
    mask: impl Fn(&Network) -> Vec<bool>,
) -> (usize, usize) {
    let h = 1e-5;
    let base = mask(net);
    let (mut ok, mut scored) = (0, 0);
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = net.clone();
        plus.weight_mut(0).unwrap().data_mut()[i] += h;
        let mut minus = net.clone();
        minus.weight_mut(0).unwrap().data_mut()[i] -= h;
        if mask(&plus) != base || mask(&minus) != base {
            continue;
        }
        scored += 1;
        let fd = (value(&plus) - value(&minus)) / (2.0 * h);
        if (fd - a).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-8) {
            ok += 1;
        }
    }
    (ok, scored)
}

fn gradient_fidelity(data: &winojoint::Dataset) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut lines = Vec::new();
    let mut pass = true;
    for (r, n) in BASES {
        let net = conv_net(r, 20, &mut rng);
        let mut cfg = SparsityConfig::winograd_only(net.architecture(), 50.0).unwrap();
        cfg.wd_layers[0].basis = WinogradBasis::new(r, n).unwrap();
        let theta = wd_threshold(&net, &cfg).unwrap();
        let g = grad_reg_wd(&net, &cfg, theta).unwrap();
        let mask = |m: &Network| {
            winograd_weights(m, &cfg).unwrap()[0].data().iter().map(|v| v.abs() <= theta).collect::<Vec<_>>()
        };
        let (ok, scored) = fd_agreement(&net, g[0].data(), |m| reg_wd(m, &cfg, theta).unwrap(), mask);
        pass &= scored > 0 && ok * 100 >= scored * 99;
        lines.push(format!("WD({r},{n}) {ok}/{scored}"));
    }
    let net = conv_net(3, 20, &mut rng);
    let cfg = SparsityConfig { sd_layers: vec![0], ..SparsityConfig::spatial_only(net.architecture(), 60.0).unwrap() };
    let theta = sd_threshold(&net, &cfg).unwrap();
    let g = grad_reg_sd(&net, &cfg, theta).unwrap();
    let mask = |m: &Network| m.weight(0).unwrap().data().iter().map(|v| v.abs() <= theta).collect::<Vec<_>>();
    let (ok, scored) = fd_agreement(&net, g[0].data(), |m| reg_sd(m, &cfg, theta).unwrap(), mask);
    pass &= scored > 0 && ok * 100 >= scored * 99;
    lines.push(format!("SD {ok}/{scored}"));

    // Backprop through the full network on real images. Zero biases would put
    // every blank-background activation exactly on the ReLU kink.
    let mut net = Network::init_he(Architecture::paper_net(), 5).unwrap();
    for (p, info) in net.clone().param_info().iter().enumerate() {
        if !info.role.is_weight() {
            for v in net.params_mut()[p].data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let batch = data.batch(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    let (_, grads) = net.loss_and_grad(&batch).unwrap();
    let loss = |m: &Network| m.loss_and_grad(&batch).unwrap().0;
    let h = 1e-5;
    let (mut ok, total) = (0, 300);
    for _ in 0..total {
        let p = rng.gen_range(0..net.params().len());
        let i = rng.gen_range(0..net.params()[p].len());
        let mut plus = net.clone();
        plus.params_mut()[p].data_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[p].data_mut()[i] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let a = grads[p].data()[i];
        if (fd - a).abs() <= 1e-4f64.max(1e-3 * a.abs()) {
            ok += 1;
        }
    }
    pass &= ok * 100 >= total * 95;
    lines.push(format!("backprop {ok}/{total}"));
    outcome(pass, lines.join(", "))
}

fn zeta_dynamics() -> Outcome {
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for r in [0.3, 1e-3, 2.5, 1e-6] {
        let target = -f64::ln(r);
        let mut st = RegularizerState::new(0.0, 1.0, OptimizerKind::Sgd, 0.5);
        st.set_zeta(target + 1.5, target - 1.5);
        for _ in 0..500 {
            st.zeta_step(Some(r), Some(r)).unwrap();
        }
        worst = worst.max((st.zeta_wd() - target).abs()).max((st.zeta_sd() - target).abs());
    }
    // Adam from the default initial value.
    let r = 0.02;
    let mut st = RegularizerState::new(10.0, 1.0, OptimizerKind::adam(), 0.05);
    for _ in 0..4000 {
        st.zeta_step(Some(r), None).unwrap();
    }
    worst = worst.max((st.zeta_wd() - (-f64::ln(r))).abs());
    pass &= worst <= 1e-3;
    // Stationary exactly at e^ζ·R = α, and not elsewhere.
    let mut still = RegularizerState::new(0.0, 1.0, OptimizerKind::Sgd, 0.5);
    still.zeta_step(Some(1.0), Some(1.0)).unwrap();
    let stationary = still.zeta_wd() == 0.0 && still.zeta_sd() == 0.0;
    let mut moving = RegularizerState::new(0.0, 1.0, OptimizerKind::Sgd, 0.5);
    moving.zeta_step(Some(1.0 + 1e-9), Some(1.0 - 1e-9)).unwrap();
    let moves = moving.zeta_wd() != 0.0 && moving.zeta_sd() != 0.0;
    pass &= stationary && moves;
    outcome(pass, format!("max |ζ − (ln α − ln R)| = {worst:.2e}, stationary {stationary}, perturbed moves {moves}"))
}

fn codec(model: &QuantizedModel, container: &[u8]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut streams_ok = 0;
    for i in 0..1000 {
        let alphabet: u32 = match i % 4 {
            0 => rng.gen_range(1..4),
            1 => rng.gen_range(4..300),
            2 => rng.gen_range(300..30_000),
            _ => rng.gen_range(1..20),
        };
        let len = if i == 999 { 300_000 } else { rng.gen_range(0..4000) };
        // Skewed streams compress, uniform ones grow the dictionary fast.
        let skew = i % 3 == 0;
        let symbols: Vec<u32> = (0..len)
            .map(|_| if skew && rng.gen_bool(0.8) { 0 } else { rng.gen_range(0..alphabet) })
            .collect();
        let params = LzwParams::for_alphabet(alphabet).unwrap();
        let bytes = lzw_encode(&symbols, &params).unwrap();
        if lzw_decode(&bytes, &params).unwrap() == symbols {
            streams_ok += 1;
        }
    }
    // Bin stream of the trained model, mapped to dense symbols.
    let mut values: Vec<i32> = model.bins.clone();
    values.sort_unstable();
    values.dedup();
    let symbols: Vec<u32> = model.bins.iter().map(|b| values.binary_search(b).unwrap() as u32).collect();
    let params = LzwParams::for_alphabet(values.len() as u32).unwrap();
    let model_ok = lzw_decode(&lzw_encode(&symbols, &params).unwrap(), &params).unwrap() == symbols
        && read_container(container).unwrap().bins == model.bins;
    // Every single-bit flip, then random multi-byte damage.
    let mut undetected = 0;
    let mut bad = container.to_vec();
    for bit in 0..container.len() * 8 {
        bad[bit / 8] ^= 1 << (bit % 8);
        undetected += usize::from(read_container(&bad).is_ok());
        bad[bit / 8] ^= 1 << (bit % 8);
    }
    for _ in 0..1000 {
        let mut bad = container.to_vec();
        for _ in 0..rng.gen_range(2..8) {
            let at = rng.gen_range(0..bad.len());
            bad[at] ^= rng.gen_range(1..=255u8);
        }
        undetected += usize::from(bad != container && read_container(&bad).is_ok());
    }
    outcome(
        streams_ok == 1000 && model_ok && undetected == 0,
        format!(
            "{streams_ok}/1000 random streams, model stream ({} symbols) {}, {} bit flips + 1000 bursts, {undetected} undetected",
            symbols.len(),
            if model_ok { "exact" } else { "MISMATCH" },
            container.len() * 8
        ),
    )
}

struct Trained {
    sd: Checkpoint,
    wd: Checkpoint,
    joint: Checkpoint,
}

fn train_three(cfg: &RunConfig, train: &winojoint::Dataset) -> Trained {
    let (pre, _) = phase_lengths(cfg, train.len());
    let (pretrained, _) = run_training(cfg, train, None, Some(pre)).unwrap();
    let run = |reg: Regularizer| {
        let c = RunConfig { regularizer: reg, ..cfg.clone() };
        let t = Instant::now();
        let (ck, _) = run_training(&c, train, Some(pretrained.clone()), None).unwrap();
        println!("  trained {} in {:.0}s", reg.name(), t.elapsed().as_secs_f64());
        ck
    };
    Trained { sd: run(Regularizer::Spatial), wd: run(Regularizer::Winograd), joint: run(Regularizer::Joint) }
}

fn joint_sparsity(t: &Trained, test: &winojoint::Dataset, secs: f64) -> Outcome {
    let acc = |ck: &Checkpoint| domain_accuracy(&ck.net, test, SPARSITY, SPARSITY).unwrap();
    let (sd, wd, joint) = (acc(&t.sd), acc(&t.wd), acc(&t.joint));
    let drop_sd = joint.unpruned - joint.spatial_pruned;
    let drop_wd = joint.unpruned - joint.winograd_pruned;
    let a = drop_sd <= 2.0 && drop_wd <= 2.0;
    let sd_only_in_wd = sd.unpruned - sd.winograd_pruned;
    let b = sd_only_in_wd > 0.0 && sd_only_in_wd >= 3.0 * drop_wd.max(0.0);
    let row = |n: &str, x: &winojoint_cli::commands::DomainAccuracy| {
        format!("{n} {:.2}/{:.2}/{:.2}", x.unpruned, x.spatial_pruned, x.winograd_pruned)
    };
    outcome(
        a && b && secs < 1800.0,
        format!(
            "unpruned/SD-pruned/WD-pruned: {}, {}, {}; (a) joint drops {drop_sd:.2}/{drop_wd:.2}; (b) SD-only in WD drops {sd_only_in_wd:.2} vs 3×{:.2}; {secs:.0}s",
            row("SD", &sd),
            row("WD", &wd),
            row("WD+SD", &joint),
            drop_wd.max(0.0)
        ),
    )
}

fn compression_round_trip(cfg: &RunConfig, joint: &Checkpoint, train: &winojoint::Dataset) -> (Outcome, QuantizedModel, Vec<u8>) {
    let mut pass = true;
    let mut notes = Vec::new();
    let mut last_ratio = 0.0;
    let mut kept = None;
    let weights: Vec<f64> = joint.net.params().iter().zip(joint.net.param_info()).filter(|(_, i)| i.role.is_weight()).flat_map(|(p, _)| p.data().to_vec()).collect();
    for &delta in &[0.005, 0.01, 0.02] {
        // Pre-fine-tune bound, checked against the original weights directly.
        let qm = QuantizedModel::from_network(&joint.net, delta, QuantMode::Dithered, cfg.seed).unwrap();
        let deq = qm.dequantize().unwrap();
        let bound = delta / 2.0 * (1.0 + 1e-12);
        let worst = weights.iter().zip(&deq).zip(&qm.bins).filter(|(_, &b)| b != 0).map(|((a, q), _)| (q - a).abs()).fold(0.0, f64::max);
        let c = worst <= bound;

        let out = compress_network(cfg, joint, train, delta, QuantMode::Dithered, 200).unwrap();
        let first = read_container(&out.container).unwrap().dequantize().unwrap();
        let second = read_container(&out.container).unwrap().dequantize().unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let a = bits(&first) == bits(&second) && bits(&first) == bits(&out.model.dequantize().unwrap());
        let b = out.model.bins.iter().zip(&first).all(|(&bin, &v)| bin != 0 || v == 0.0);
        let d = out.ratio > 1.0 && out.ratio >= last_ratio;
        let e = out.cost_after <= out.cost_before;
        last_ratio = out.ratio;
        pass &= a && b && c && d && e;
        notes.push(format!(
            "Δ={delta}: ratio {:.2}, pruned {:.1}%, max err {worst:.3e} (≤{:.1e}), cost {:.4}→{:.4} [{}{}{}{}{}]",
            out.ratio,
            100.0 * out.model.num_pruned() as f64 / out.model.bins.len() as f64,
            delta / 2.0,
            out.cost_before,
            out.cost_after,
            flag(a),
            flag(b),
            flag(c),
            flag(d),
            flag(e)
        ));
        if delta == cfg.delta {
            kept = Some((out.model, out.container));
        }
    }
    let (m, c) = kept.expect("configured Δ is in the sweep");
    (outcome(pass, notes.join("; ")), m, c)
}

fn flag(ok: bool) -> char {
    if ok {
        '+'
    } else {
        '-'
    }
}

fn mac_accounting(joint: &Checkpoint) -> Outcome {
    let net = &joint.net;
    let arch = net.architecture();
    let bases = default_bases(arch).unwrap();
    let (spatial, _) = prune_spatial(net, SPARSITY, &arch.weighted_layers()).unwrap();
    let dep = prune_winograd(net, SPARSITY, &bases).unwrap();
    let report = count_macs(&spatial, &bases, Some(&dep), false).unwrap();
    let ss = report.total(MacMode::SparseSpatial) as f64 / report.total(MacMode::DenseSpatial) as f64;
    let sw = report.total(MacMode::SparseWinograd) as f64 / report.total(MacMode::DenseWinograd) as f64;

    // One 3×3 filter on a 4×4 image: 2×2 outputs and one F(2,3) tile.
    let tiny = Architecture {
        input: [1, 4, 4],
        layers: vec![
            LayerSpec::Conv { in_channels: 1, out_channels: 1, kernel: 3, stride: 1 },
            LayerSpec::Dense { inputs: 4, outputs: 2 },
        ],
    };
    let tnet = Network::init_he(tiny.clone(), 1).unwrap();
    let tb = vec![Some(WinogradBasis::new(3, 4).unwrap()), None];
    let t = count_macs(&tnet, &tb, None, false).unwrap();
    let hand = t.layers[0].dense_spatial == 36 && t.layers[0].dense_winograd == 16;
    outcome(
        ss <= 0.45 && sw <= 0.45 && hand,
        format!(
            "sparse/dense spatial {ss:.3}, Winograd {sw:.3}; tiny layer {} spatial, {} Winograd",
            t.layers[0].dense_spatial, t.layers[0].dense_winograd
        ),
    )
}

fn main() -> ExitCode {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let out = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::with_seed(1);
    cfg.train_images = data.join("train-images-idx3-ubyte.gz");
    cfg.train_labels = data.join("train-labels-idx1-ubyte.gz");
    cfg.test_images = data.join("test-images-idx3-ubyte.gz");
    cfg.test_labels = data.join("test-labels-idx1-ubyte.gz");
    cfg.out = out.path().to_path_buf();
    cfg.log_every = 0;
    cfg.validate(true).unwrap();
    let train = load_train(&cfg).unwrap();
    let test = load_test(&cfg).unwrap();

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "Winograd equivalence", winograd_equivalence());
    report(2, "golden vector", golden_vector());
    report(3, "gradient fidelity", gradient_fidelity(&train));
    report(4, "zeta dynamics", zeta_dynamics());

    let start = Instant::now();
    let trained = train_three(&cfg, &train);
    report(5, "joint sparsity", joint_sparsity(&trained, &test, start.elapsed().as_secs_f64()));
    let (o6, model, container) = compression_round_trip(&cfg, &trained.joint, &train);
    report(6, "compression round trip", o6);
    report(7, "MAC accounting", mac_accounting(&trained.joint));
    report(8, "codec", codec(&model, &container));

    let failed: Vec<_> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
