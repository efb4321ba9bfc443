//! Acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`). `cargo test --test acceptance
//! -- 3 5` runs only criteria 3 and 5.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use certrain::attacks::{self, AdversarialBatch, AttackConfig};
use certrain::bounds::{self, BoundOptions, BoundStats};
use certrain::config::{parse_config, parse_config_with, RunConfig};
use certrain::data::{load_idx, write_idx};
use certrain::losses::{self, exp_combine, exp_combine_log, loss_graph, loss_value_at, LossFamily, LossSpec};
use certrain::network::{logit_differences, BnMode, ParamVars, Preset};
use certrain::train::{co_probe, metrics_csv, toy_closed_form, toy_sweep, train, CoThresholds, EpochMetrics};
use certrain::{Layer, Network, Tape, Tensor, Var};
use common::{labels, random_mlp, random_shape, rel_err, stream, uniform};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 8] = [
        (1, "ibp soundness", Duration::from_secs(120), ibp_soundness),
        (2, "forwabs vs ibp gap", Duration::from_secs(60), forwabs_gap),
        (3, "expressivity", Duration::from_secs(120), expressivity),
        (4, "gradients vs finite differences", Duration::from_secs(180), gradients),
        (5, "toy networks", Duration::from_secs(60), toy),
        (6, "catastrophic overfitting on mnist", Duration::from_secs(1800), catastrophic_overfitting),
        (7, "exp-ibp numerics", Duration::from_secs(60), exp_ibp_numerics),
        (8, "determinism and io", Duration::from_secs(300), determinism_and_io),
    ];
    let mut failed = 0;
    for (n, name, limit, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed();
        let outcome = match outcome {
            Ok(d) if secs > limit => Err(format!("{d}; over time limit {}s", limit.as_secs())),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} {name}: {tag} ({detail}; {:.1}s)", secs.as_secs_f64());
        failed += outcome.is_err() as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn ibp_soundness() -> Outcome {
    let mut violations = 0;
    let mut worst = 0.0f64;
    for i in 0..200 {
        let mut rng = stream("soundness", i);
        let dims = random_shape(&mut rng);
        let net = random_mlp(&mut rng, &dims, true, i % 3 == 0);
        let d = dims[0];
        let k = *dims.last().unwrap();
        let eps = rng.gen_range(0.001..0.5);
        let x = uniform(&mut rng, &[1, d], -1.0, 1.0);
        let y = rng.gen_range(0..k);
        let state = bounds::ibp_bounds(&net, &x, &[y], eps, BoundOptions::default()).map_err(|e| e.to_string())?;

        // 100 points in the ball; a third of the coordinates sit on a face
        let mut pts = Vec::with_capacity(100 * d);
        for _ in 0..100 {
            for &c in x.data() {
                let u: f64 = rng.gen();
                let off = if u < 0.15 {
                    -eps
                } else if u < 0.3 {
                    eps
                } else {
                    rng.gen_range(-eps..=eps)
                };
                pts.push(c + off);
            }
        }
        let pts = Tensor::new(vec![100, d], pts).unwrap();
        let tape = Tape::new();
        let params = net.bind(&tape, false);
        let trace = net.forward_graph(&params, tape.constant(pts), BnMode::Running).unwrap();
        let logits = trace.logits.value();
        let z = logit_differences(&logits, &vec![y; 100]).unwrap();

        let mut record = |v: f64| {
            if v > 1e-6 {
                violations += 1;
            }
            worst = worst.max(v);
        };
        for b in 0..100 {
            for (zi, li) in z.row(b).iter().zip(state.lower.data()) {
                record(li - zi);
            }
        }
        // every stage that feeds a ReLU, plus the logits
        let mut relu = trace.relu_inputs.iter();
        for (li, layer) in net.layers().iter().enumerate() {
            if !matches!(layer, Layer::Relu) {
                continue;
            }
            let vals = relu.next().unwrap();
            let stage = state.stages.iter().find(|s| s.layer + 1 == li).unwrap();
            check_box(&stage.lower, &stage.upper, vals, &mut record);
        }
        let last = state.stages.last().unwrap();
        check_box(&last.lower, &last.upper, &logits, &mut record);
    }
    check(
        violations == 0,
        format!("200 nets x 100 points, {violations} violations, worst excess {worst:.2e}"),
    )
}

fn check_box(lower: &Tensor, upper: &Tensor, vals: &Tensor, record: &mut impl FnMut(f64)) {
    let w = lower.len();
    for row in vals.data().chunks(w) {
        for ((v, l), u) in row.iter().zip(lower.data()).zip(upper.data()) {
            record(l - v);
            record(v - u);
        }
    }
}

/// Per-logit IBP widths `u - l` at the final stage, for a single point.
fn ibp_widths(net: &Network, eps: f64) -> Vec<f64> {
    let x = Tensor::zeros(&[1, net.input_len()]);
    let state = bounds::ibp_bounds(net, &x, &[0], eps, BoundOptions::default()).unwrap();
    let last = state.stages.last().unwrap();
    last.upper.zip_with(&last.lower, |u, l| u - l).unwrap().into_data()
}

fn forwabs_final(net: &Network, eps: f64) -> Vec<f64> {
    let gap = bounds::forwabs_gap(net, eps, BoundStats::Running).unwrap();
    gap.stages.last().unwrap().data().to_vec()
}

fn forwabs_gap() -> Outcome {
    let mut worst_rel = 0.0f64;
    let mut below = 0;
    for i in 0..100 {
        let mut rng = stream("forwabs-linear", i);
        let dims = random_shape(&mut rng);
        let eps = rng.gen_range(0.001..1.0);
        let net = random_mlp(&mut rng, &dims, false, i % 2 == 0);
        for (g, w) in forwabs_final(&net, eps).iter().zip(ibp_widths(&net, eps)) {
            worst_rel = worst_rel.max(rel_err(*g, w, 1e-300));
        }

        let mut rng = stream("forwabs-relu", i);
        let dims = random_shape(&mut rng);
        let net = random_mlp(&mut rng, &dims, true, i % 2 == 0);
        let widths = ibp_widths(&net, eps);
        if forwabs_final(&net, eps).iter().zip(&widths).any(|(g, w)| *g < w * (1.0 - 1e-12)) {
            below += 1;
        }
    }
    check(
        worst_rel <= 1e-9 && below == 0,
        format!("linear: worst elementwise relative difference {worst_rel:.2e}; relu: {below}/100 nets with an entry below the IBP width"),
    )
}

fn expressivity() -> Outcome {
    let alphas: Vec<f64> = (0..=10).map(|j| j as f64 / 10.0).collect();
    let families = [LossFamily::MtlIbp, LossFamily::ExpIbp, LossFamily::CcIbp, LossFamily::Sabr];
    let mut problems = Vec::new();
    let mut worst_end = 0.0f64;
    for i in 0..50 {
        let mut rng = stream("expressivity", i);
        let dims = random_shape(&mut rng);
        let net = random_mlp(&mut rng, &dims, true, false);
        let k = *dims.last().unwrap();
        let eps = rng.gen_range(0.01..0.3);
        let x = uniform(&mut rng, &[8, dims[0]], 0.0, 1.0);
        let y = labels(&mut rng, 8, k);
        let cfg = AttackConfig::pgd(eps, 5).with_seed(i);
        let adv = attacks::attack(&net, &x, &y, &cfg, BnMode::Running).unwrap();
        let base = LossSpec::new(LossFamily::Adversarial, cfg);
        let at = |family, alpha| {
            let spec = LossSpec {
                family,
                alpha,
                ..base.clone()
            };
            loss_value_at(&net, &x, &y, &spec, Some(&adv)).unwrap().total
        };
        let l_adv = at(LossFamily::Adversarial, 0.0);
        let l_ibp = at(LossFamily::Ibp, 0.0);
        for family in families {
            let curve: Vec<f64> = alphas.iter().map(|&a| at(family, a)).collect();
            let e0 = rel_err(curve[0], l_adv, 1.0);
            let e1 = rel_err(curve[10], l_ibp, 1.0);
            worst_end = worst_end.max(e0).max(e1);
            let tol = 1e-9 * l_ibp.abs().max(1.0);
            let sandwich = curve.iter().all(|&v| v >= l_adv - tol && v <= l_ibp + tol);
            let monotone = curve.windows(2).all(|w| w[1] >= w[0] - tol);
            if e0 > 1e-9 || e1 > 1e-9 || !sandwich || !monotone {
                problems.push(format!("net {i} {family}"));
            }
        }
    }
    check(
        problems.is_empty(),
        format!(
            "50 nets x 4 families x 11 alphas with PGD-5, worst endpoint error {worst_end:.2e}, failures {:?}",
            problems
        ),
    )
}

#[derive(Clone, Copy, Debug)]
enum Target {
    Forward,
    Ibp,
    ForwAbs,
    Loss(LossFamily),
}

struct Instance {
    x: Tensor,
    y: Vec<usize>,
    eps: f64,
    adv: AdversarialBatch,
    spec: LossSpec,
}

fn target_graph<'t>(
    target: Target,
    net: &Network,
    params: &ParamVars<'t>,
    xv: Var<'t>,
    inst: &Instance,
) -> certrain::Result<Var<'t>> {
    match target {
        Target::Forward => {
            let logits = net.forward_graph(params, xv, BnMode::Batch)?.logits;
            Ok(logits.softmax_cross_entropy(&inst.y)?.mean())
        }
        Target::Ibp => {
            let g = bounds::ibp_graph(net, params, &inst.x, &inst.y, inst.eps, BoundOptions::default())?;
            Ok(g.lower.sum())
        }
        Target::ForwAbs => Ok(bounds::forwabs_graph(net, params, inst.eps, BoundStats::Running)?.total),
        Target::Loss(_) => Ok(loss_graph(net, params, &inst.x, &inst.y, &inst.spec, Some(&inst.adv), BnMode::Running)?.total),
    }
}

fn target_value(target: Target, net: &Network, x: &Tensor, inst: &Instance) -> f64 {
    let tape = Tape::new();
    let params = net.bind(&tape, false);
    target_graph(target, net, &params, tape.constant(x.clone()), inst).unwrap().item()
}

/// Smallest distance to a ReLU kink over the forward passes at `x` and
/// `x_adv` and over every IBP box the target propagates.
fn kink_margin(target: Target, net: &Network, inst: &Instance) -> f64 {
    let mut m = f64::INFINITY;
    let bn = match target {
        Target::Forward => BnMode::Batch,
        _ => BnMode::Running,
    };
    for x in [&inst.x, &inst.adv.x_adv] {
        let tape = Tape::new();
        let params = net.bind(&tape, false);
        let trace = net.forward_graph(&params, tape.constant(x.clone()), bn).unwrap();
        for v in trace.relu_inputs.iter().flat_map(|t| t.data().to_vec()) {
            m = m.min(v.abs());
        }
    }
    let mut boxes = vec![(inst.x.clone(), inst.eps)];
    if let Target::Loss(LossFamily::Sabr) = target {
        let a = inst.spec.alpha;
        let c = losses::sabr_center(&inst.x, &inst.adv.x_adv, inst.eps, a, true).unwrap();
        boxes.push((c, a * inst.eps));
    }
    for (c, r) in boxes {
        let state = bounds::ibp_bounds(net, &c, &inst.y, r, BoundOptions::default()).unwrap();
        for s in &state.stages {
            if matches!(net.layers().get(s.layer + 1), Some(Layer::Relu)) {
                for v in s.lower.data().iter().chain(s.upper.data()) {
                    m = m.min(v.abs());
                }
            }
        }
    }
    m
}

fn gradients() -> Outcome {
    let targets = [
        Target::Forward,
        Target::Ibp,
        Target::ForwAbs,
        Target::Loss(LossFamily::Adversarial),
        Target::Loss(LossFamily::Ibp),
        Target::Loss(LossFamily::MtlIbp),
        Target::Loss(LossFamily::ExpIbp),
        Target::Loss(LossFamily::CcIbp),
        Target::Loss(LossFamily::Sabr),
        Target::Loss(LossFamily::Forwabs),
    ];
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut rejected = 0;
    for i in 0..100u64 {
        let target = targets[i as usize % targets.len()];
        let mut attempt = 0;
        let (net, inst) = loop {
            let mut rng = stream("gradients", i * 1000 + attempt);
            attempt += 1;
            let depth = rng.gen_range(2..=4);
            let mut dims = vec![rng.gen_range(1..=5)];
            dims.extend((0..depth - 1).map(|_| rng.gen_range(2..=8)));
            dims.push(rng.gen_range(2..=4));
            let bn = matches!(target, Target::Forward | Target::ForwAbs | Target::Ibp) && rng.gen_bool(0.5);
            let net = random_mlp(&mut rng, &dims, true, bn);
            let eps = rng.gen_range(0.01..0.2);
            let x = uniform(&mut rng, &[3, dims[0]], 0.0, 1.0);
            let y = labels(&mut rng, 3, *dims.last().unwrap());
            let cfg = AttackConfig::pgd(eps, 3).with_seed(i);
            let adv = attacks::attack(&net, &x, &y, &cfg, BnMode::Running).unwrap();
            let family = match target {
                Target::Loss(f) => f,
                _ => LossFamily::Adversarial,
            };
            let mut spec = LossSpec::new(family, cfg).with_alpha(rng.gen_range(0.1..0.9));
            if family == LossFamily::Forwabs {
                spec = spec.with_lambda(rng.gen_range(1e-3..1e-1));
                spec.l1 = 1e-3;
            }
            let inst = Instance { x, y, eps, adv, spec };
            if kink_margin(target, &net, &inst) > 1e-3 {
                break (net, inst);
            }
            rejected += 1;
        };

        let tape = Tape::new();
        let params = net.bind(&tape, true);
        let xv = tape.var(inst.x.clone());
        let root = target_graph(target, &net, &params, xv, &inst).unwrap();
        let grads = tape.backward(root).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (j, p) in params.flat().iter().enumerate() {
            let g = grads.wrt(*p);
            for k in 0..g.len() {
                if net.params()[j].data()[k].abs() < 1e-4 {
                    continue;
                }
                let eval = |delta: f64| {
                    let mut n2 = net.clone();
                    n2.params_mut()[j].data_mut()[k] += delta;
                    target_value(target, &n2, &inst.x, &inst)
                };
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
                analytic.push(g.data()[k]);
            }
        }
        if let Target::Forward = target {
            let g = grads.wrt(xv);
            for k in 0..g.len() {
                let eval = |delta: f64| {
                    let mut x2 = inst.x.clone();
                    x2.data_mut()[k] += delta;
                    target_value(target, &net, &x2, &inst)
                };
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
                analytic.push(g.data()[k]);
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-8);
        if rel > worst {
            worst = rel;
            worst_at = format!("{target:?} #{i}");
        }
    }
    check(
        worst <= 1e-4,
        format!("100 instances, worst relative error {worst:.2e} at {worst_at}, {rejected} draws rejected near kinks"),
    )
}

fn toy() -> Outcome {
    let mut rng = stream("toy", 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(2..=20);
        let w = rng.gen_range(0.0..1.0);
        let x = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let net = Preset::Toy { depth: n, w }.build(&[2], 2).unwrap();
        let logits = net.predict(&Tensor::matrix(1, 2, x.to_vec()).unwrap()).unwrap();
        let z = logit_differences(&logits, &[1]).unwrap().data()[0];
        worst = worst.max(rel_err(z, toy_closed_form(n, w, x), 1.0));
    }
    let mut w_grid = vec![0.0];
    w_grid.extend((0..=12).map(|j| 10f64.powf(-6.0 + 0.5 * j as f64)));
    let rows = toy_sweep(&[18], &w_grid, &[(LossFamily::MtlIbp, 1e-2), (LossFamily::ExpIbp, 1e-1)]).map_err(|e| e.to_string())?;
    let pick = |f: LossFamily| -> Vec<f64> { rows.iter().filter(|r| r.family == f).map(|r| r.loss).collect() };
    let mtl = pick(LossFamily::MtlIbp);
    let exp = pick(LossFamily::ExpIbp);
    let growth = mtl.iter().cloned().fold(f64::MIN, f64::max) / mtl.iter().cloned().fold(f64::MAX, f64::min);
    let exp_max = exp.iter().cloned().fold(f64::MIN, f64::max);
    let w0 = rows.iter().find(|r| r.w == 0.0).unwrap().lower_bound;
    const EXP_CAP: f64 = 25.0;
    check(
        worst <= 1e-6 && growth > 10.0 && exp_max < EXP_CAP && (w0 + 2.0).abs() < 1e-12,
        format!(
            "closed form worst relative error {worst:.2e}; n=18: MTL grows x{growth:.3e}, Exp max {exp_max:.3} (cap {EXP_CAP}), lower bound at w=0 {w0}"
        ),
    )
}

fn mnist_config(seed: u64) -> String {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    format!(
        r#"seed = {seed}

[data]
kind = "idx"
images = "{}"
labels = "{}"

[network]
preset = "cnn-mini"

[loss]
family = "adversarial"

[attack]
kind = "fgsm"
eps = 0.3

[train]
epochs = 10
batch-size = 100
optimizer = "adam"
lr-peak = 0.005
eps-ramp-epochs = 8
coef-ramp-epochs = 8

[eval]
steps = 10
restarts = 1
max-samples = 1000
"#,
        dir.join("digits-images-idx3-ubyte.gz").display(),
        dir.join("digits-labels-idx1-ubyte.gz").display()
    )
}

fn run(cfg: &RunConfig) -> certrain::Result<Vec<EpochMetrics>> {
    let data = cfg.load_dataset()?;
    let mut net = cfg.build_network(data.sample_shape(), data.num_classes())?;
    train(&mut net, &data, &cfg.train_plan(), &cfg.loss_spec(), &cfg.eval_config(), |_| {})
}

fn catastrophic_overfitting() -> Outcome {
    let th = CoThresholds::default();
    let reg = ["loss.family=\"forwabs\"".to_string(), "loss.lambda=1e-3".to_string()];
    let mut base_flags = 0;
    let mut reg_clear = 0;
    let mut base_pgd = Vec::new();
    let mut reg_pgd = Vec::new();
    for seed in 0..3 {
        let text = mnist_config(seed);
        let base = run(&parse_config(&text).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let forwabs = run(&parse_config_with(&text, &reg).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        base_flags += co_probe(&base, &th).flagged as usize;
        reg_clear += !co_probe(&forwabs, &th).flagged as usize;
        base_pgd.push(base.last().unwrap().pgd_acc);
        reg_pgd.push(forwabs.last().unwrap().pgd_acc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let lift = mean(&reg_pgd) - mean(&base_pgd);
    check(
        base_flags >= 2 && reg_clear >= 2 && lift >= 0.20,
        format!(
            "FGSM flagged {base_flags}/3, ForwAbs (lambda 1e-3) clear {reg_clear}/3, final PGD-10 {:?} vs {:?}, lift {:.1} points",
            base_pgd,
            reg_pgd,
            100.0 * lift
        ),
    )
}

fn exp_ibp_numerics() -> Outcome {
    let mut worst = 0.0f64;
    let mut finite = true;
    for &log_ibp in &[0.0, 1.0, 10.0, 50.0, 100.0, 300.0, 450.0, 600.0] {
        for &log_adv in &[-5.0, 0.0, 2.0] {
            for j in 0..=10 {
                let a = j as f64 / 10.0;
                let via_log = exp_combine_log(log_adv, log_ibp, a);
                let direct = exp_combine(f64::exp(log_adv), f64::exp(log_ibp), a);
                finite &= via_log.is_finite() && direct.is_finite();
                worst = worst.max(rel_err(via_log, direct, 1e-300));
            }
        }
    }
    // a network whose IBP loss is large, through the taped loss
    let mut rng = stream("exp-ibp", 0);
    let net = random_mlp(&mut rng, &[4, 32, 32, 32, 3], true, false).scaled(6.0);
    let x = uniform(&mut rng, &[4, 4], 0.0, 1.0);
    let y = vec![0, 1, 2, 0];
    let cfg = AttackConfig::pgd(0.5, 3);
    let adv = attacks::attack(&net, &x, &y, &cfg, BnMode::Running).unwrap();
    let spec = LossSpec::new(LossFamily::ExpIbp, cfg).with_alpha(0.5);
    let tape = Tape::new();
    let params = net.bind(&tape, true);
    let g = loss_graph(&net, &params, &x, &y, &spec, Some(&adv), BnMode::Running).map_err(|e| e.to_string())?;
    let grads = tape.backward(g.total).unwrap();
    let grads_finite = params.flat().iter().all(|p| grads.wrt(*p).all_finite());
    let l_ibp = g.value.ibp.unwrap();
    let graph_err = rel_err(g.value.total, exp_combine(g.value.adversarial.unwrap(), l_ibp, 0.5), 1e-300);
    check(
        finite && worst <= 1e-9 && grads_finite && graph_err <= 1e-9,
        format!(
            "log L_IBP up to 600: finite {finite}, worst log/direct difference {worst:.2e}; taped loss at L_IBP {l_ibp:.3e}: error {graph_err:.2e}, finite gradients {grads_finite}"
        ),
    )
}

const BLOBS: &str = r#"seed = 11

[data]
kind = "blobs"
classes = 3
per-class = 60

[network]
hidden = [16, 16]

[loss]
family = "mtl-ibp"
alpha = 0.3

[attack]
kind = "pgd"
eps = 0.05
steps = 3

[train]
epochs = 3
batch-size = 32

[eval]
steps = 5
restarts = 2
"#;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn determinism_and_io() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let cfg = parse_config(BLOBS).map_err(|e| e.to_string())?;
    let a = metrics_csv(&run(&cfg).map_err(|e| e.to_string())?, false).unwrap();
    let b = metrics_csv(&run(&cfg).map_err(|e| e.to_string())?, false).unwrap();
    ok &= a == b;
    notes.push(format!("metrics csv identical {}", a == b));

    let mut golden = true;
    for images in ["golden-images-idx3-ubyte", "golden-images-idx3-ubyte.gz"] {
        let ds = load_idx(fixture(images), fixture("golden-labels-idx1-ubyte")).map_err(|e| e.to_string())?;
        golden &= ds.inputs().shape() == [4, 1, 28, 28];
        golden &= ds.labels() == [1, 4, 7, 0];
        for (p, &v) in ds.inputs().data().iter().enumerate() {
            let (i, r, c) = (p / 784, (p / 28) % 28, p % 28);
            golden &= v == ((31 * i + 7 * r + 13 * c) % 256) as f64 / 255.0;
        }
    }
    ok &= golden;
    notes.push(format!("golden fixture exact {golden}"));

    let ds = load_idx(fixture("golden-images-idx3-ubyte"), fixture("golden-labels-idx1-ubyte")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut round = true;
    for ext in ["", ".gz"] {
        let (img, lab) = (dir.path().join(format!("i{ext}")), dir.path().join(format!("l{ext}")));
        write_idx(&ds, &img, &lab).map_err(|e| e.to_string())?;
        let back = load_idx(&img, &lab).map_err(|e| e.to_string())?;
        round &= back.labels() == ds.labels();
        round &= back.inputs().shape() == ds.inputs().shape();
        round &= back.inputs().data().iter().zip(ds.inputs().data()).all(|(p, q)| p.to_bits() == q.to_bits());
        if ext.is_empty() {
            round &= std::fs::read(&img).unwrap() == std::fs::read(fixture("golden-images-idx3-ubyte")).unwrap();
            round &= std::fs::read(&lab).unwrap() == std::fs::read(fixture("golden-labels-idx1-ubyte")).unwrap();
        }
    }
    ok &= round;
    notes.push(format!("idx round trip bit-identical {round}"));

    let mut dump = true;
    for text in [BLOBS.to_string(), mnist_config(2)] {
        let cfg = parse_config(&text).map_err(|e| e.to_string())?;
        dump &= parse_config(&cfg.to_toml()).map_err(|e| e.to_string())? == cfg;
    }
    ok &= dump;
    notes.push(format!("config dump re-parses equal {dump}"));
    check(ok, notes.join(", "))
}
