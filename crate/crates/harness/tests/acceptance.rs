//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the expensive trained
//! networks are built once and shared between the criteria that need them.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use tnn_core::controller::{reward, RewardConfig};
use tnn_core::gating::{complexity, independent_gate, nested_gate, GateVector, Ordering, USampling, Utilization};
use tnn_core::objectives::{
    concrete_sample, dist_penalty, hinge_penalty, tnn_loss, BernoulliGatePolicy, PenaltyConfig, PenaltyForm,
    PolicyInput,
};
use tnn_core::rng::seeded;
use tnn_core::tensor::gradcheck::{check_gated_network, check_op, op_cases, Tolerance};
use tnn_core::tensor::{forward_macs, reset_forward_macs};
use tnn_core::tmodule::{branch_net, vgg_w, Aggregation, TNetwork};
use tnn_core::trainer::{train_controller, train_datapath, train_gate_policy, GateLearner, Samples, TrainConfig};
use tnn_core::Tensor;
use tnn_harness::config::Config;
use tnn_harness::data::{generate, DataSpec, Dataset};
use tnn_harness::eval::{curve_area, default_grid, eval_controller, eval_curve, ExecMode, ThrottlePoint};
use tnn_harness::experiment::{controller, ModelConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn grid() -> Vec<Utilization> {
    (1..=10).map(|i| Utilization::new(i as f64 / 10.0).unwrap()).collect()
}

fn rand_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn gradient_oracle() -> Outcome {
    let tol = Tolerance::default();
    let mut checked = 0;
    for case in op_cases() {
        for seed in 0..20 {
            checked += check_op(&case, seed, tol).map_err(|m| m.to_string())?;
        }
    }
    for seed in 0..20 {
        checked += check_gated_network(seed, tol).map_err(|m| m.to_string())?;
    }
    Ok(format!(
        "{} ops and the gated network, {checked} coordinates",
        op_cases().len()
    ))
}

fn sliced_equivalence() -> Outcome {
    let net: TNetwork = TNetwork::build(&vgg_w(&[1, 8, 8], 16, 8, 10, Ordering::Nested), &mut seeded(0)).unwrap();
    let x = rand_input(&[8, 1, 8, 8], 1);
    let mut worst = 0.0f32;
    for u in grid() {
        let gates = net.draw_gates(u, &mut seeded(0)).unwrap();
        let masked = net.forward(&x, &gates).unwrap();
        for propagate in [false, true] {
            let sliced = net.forward_sliced(&x, &gates, propagate).unwrap();
            let d = masked
                .data()
                .iter()
                .zip(sliced.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            worst = worst.max(d);
        }
    }
    check(worst <= 1e-5, format!("max |masked - sliced| = {worst:.2e}"))
}

fn mac_exactness() -> Outcome {
    let net: TNetwork = TNetwork::build(&vgg_w(&[1, 8, 8], 16, 8, 10, Ordering::Nested), &mut seeded(0)).unwrap();
    let x = rand_input(&[1, 1, 8, 8], 2);
    for propagate in [false, true] {
        let mut prev = 0.0;
        for u in grid() {
            let gates = net.draw_gates(u, &mut seeded(0)).unwrap();
            let count = net.mac_count(&gates, propagate).unwrap();
            reset_forward_macs();
            net.forward_sliced(&x, &gates, propagate).unwrap();
            let measured = forward_macs();
            if measured != count.active {
                return Err(format!(
                    "u {}: analytic {} measured {measured}",
                    u.value(),
                    count.active
                ));
            }
            if count.ratio() < prev {
                return Err(format!("mac ratio drops at u {}", u.value()));
            }
            prev = count.ratio();
        }
    }
    Ok("analytic == instrumented at all 10 u, ratio non-decreasing".into())
}

fn gating_algebra() -> Outcome {
    let mut rng = seeded(0);
    let mut cases = 0;
    for n in 1..=8usize {
        let mut prev: Option<GateVector> = None;
        for i in 0..=100usize {
            let u = Utilization::new(i as f64 / 100.0).unwrap();
            let k = n.min(i * (n + 1) / 100);
            let g = nested_gate(n, u);
            let c = complexity(&g).unwrap();
            let bound = 1.0 / n as f64 + 1.0 / (n + 1) as f64;
            let contained = prev.as_ref().is_none_or(|p| (0..n).all(|j| !p.is_on(j) || g.is_on(j)));
            if g.popcount() != k || !g.is_nested() || !contained || (c - u.value()).abs() > bound {
                return Err(format!("nested gate n {n} u {}", u.value()));
            }
            if independent_gate(n, u, &mut rng).popcount() != k {
                return Err(format!("independent popcount n {n} u {}", u.value()));
            }
            prev = Some(g);
            cases += 1;
        }
        for m in 0u32..1 << n {
            let bits: Vec<bool> = (0..n).map(|j| m >> j & 1 == 1).collect();
            let brute = (0..n).all(|i| !bits[i] || (0..i).all(|j| bits[j]));
            if GateVector::new(bits).unwrap().is_nested() != brute {
                return Err(format!("nested constraint n {n} pattern {m:b}"));
            }
        }
    }
    Ok(format!("{cases} (n, u) pairs, all patterns for n <= 8"))
}

fn unit_values() -> Outcome {
    let cfg = RewardConfig::default();
    let u = |v| Utilization::new(v).unwrap();
    let checks = [
        ("reward correct", reward(true, 0.3, 0.5, &cfg), 0.5f64.exp() * 0.5, 1e-9),
        ("reward wrong", reward(false, 0.9, 1.0, &cfg), -3.5, 1e-9),
        ("hinge under budget", hinge_penalty(0.4, u(0.5), 1), 0.0, 1e-12),
        ("hinge p2", hinge_penalty(0.6, u(0.5), 2), 0.01, 1e-12),
        ("hinge boundary", hinge_penalty(0.5, u(0.5), 2), 0.0, 1e-12),
        ("dist boundary", dist_penalty(0.5, u(0.5), 1), 0.0, 1e-12),
        ("dist p1", dist_penalty(0.6, u(0.5), 1), 0.1, 1e-12),
        ("dist p2", dist_penalty(0.2, u(0.5), 2), 0.09, 1e-12),
        (
            "loss",
            tnn_loss(
                0.7,
                0.6,
                u(0.5),
                &PenaltyConfig {
                    form: PenaltyForm::Dist,
                    p: 1,
                    lambda: 10.0,
                },
            ),
            1.7,
            1e-12,
        ),
    ];
    for (name, got, want, tol) in checks {
        if (got - want).abs() > tol {
            return Err(format!("{name}: {got} != {want}"));
        }
    }
    Ok(format!("{} values", checks.len()))
}

/// Trained networks on the tiered dataset shared by the curve and controller criteria.
struct Trained {
    data: Dataset,
    nested: Vec<TNetwork>,
    independent: Vec<TNetwork>,
    baseline_accuracy: f64,
}

const SEEDS: u64 = 3;

fn datapath_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        lr_datapath: 0.003,
        seed,
        ..Default::default()
    }
}

fn train(ordering: Ordering, seed: u64, data: &Dataset) -> TNetwork {
    let m = ModelConfig {
        ordering,
        ..Default::default()
    };
    let mut net = m.build(&[1, 8, 8], 10, seed + 1).unwrap();
    train_datapath(&mut net, &data.train, &datapath_cfg(seed)).unwrap();
    net
}

fn accuracy(net: &TNetwork, data: &Samples) -> f64 {
    let pred = net.predict(data.x(), &net.full_gates()).unwrap();
    pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count() as f64 / data.len() as f64
}

fn train_all() -> Trained {
    let data = generate(&DataSpec::default(), 7).unwrap();
    let nested: Vec<TNetwork> = (0..SEEDS).map(|s| train(Ordering::Nested, s, &data)).collect();
    let independent = (0..SEEDS).map(|s| train(Ordering::Independent, s, &data)).collect();
    // same initial weights as the first nested network, trained without gates
    let mut baseline = ModelConfig::default()
        .build(&[1, 8, 8], 10, 1)
        .unwrap()
        .ungated_twin()
        .unwrap();
    train_datapath(&mut baseline, &data.train, &datapath_cfg(0)).unwrap();
    let baseline_accuracy = accuracy(&baseline, &data.val);
    Trained {
        data,
        nested,
        independent,
        baseline_accuracy,
    }
}

fn curve(net: &TNetwork, data: &Dataset) -> Vec<ThrottlePoint> {
    eval_curve(net, &data.val, &default_grid(), ExecMode::Masked, 3, 0).unwrap()
}

fn pct(points: &[ThrottlePoint]) -> String {
    let v: Vec<String> = points.iter().map(|p| format!("{:.1}", 100.0 * p.accuracy)).collect();
    v.join(" ")
}

fn curve_shape(t: &Trained) -> Outcome {
    let pts = curve(&t.nested[0], &t.data);
    let at = |u: f64| pts.iter().find(|p| (p.u - u).abs() < 1e-9).unwrap().accuracy;
    let full = at(1.0);
    let near_baseline = (full - t.baseline_accuracy).abs() <= 0.02;
    let half_ok = at(0.5) >= 0.8 * full;
    let monotone = pts
        .iter()
        .enumerate()
        .all(|(i, p)| pts[..i].iter().all(|q| p.accuracy >= q.accuracy - 0.03));
    check(
        near_baseline && half_ok && monotone,
        format!("curve [{}], baseline {:.1}", pct(&pts), 100.0 * t.baseline_accuracy),
    )
}

fn nested_beats_independent(t: &Trained) -> Outcome {
    let area = |nets: &[TNetwork]| -> f64 {
        nets.iter().map(|n| curve_area(&curve(n, &t.data))).sum::<f64>() / nets.len() as f64
    };
    let (nested, independent) = (area(&t.nested), area(&t.independent));
    check(
        nested > independent,
        format!("mean area nested {nested:.4} vs independent {independent:.4}"),
    )
}

fn controller_efficacy(t: &Trained) -> Outcome {
    let net = &t.nested[0];
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..SEEDS {
        let mut policy = controller(&Config::default(), net, seed).unwrap();
        let cfg = TrainConfig {
            epochs_phase2: 100,
            lr_phase2: 1e-3,
            seed,
            ..Default::default()
        };
        train_controller(net, &mut policy, &t.data.train, &cfg).unwrap();
        let r = eval_controller(net, &policy, &t.data.val, seed).unwrap();
        let best = r.fixed.iter().map(|f| f.accuracy).fold(0.0, f64::max);
        // the cheapest fixed setting that reaches the best accuracy
        let u_best = r.fixed.iter().find(|f| f.accuracy == best).unwrap().u;
        let pass = r.accuracy >= best - 0.01
            && r.mean_u <= 0.8 * u_best + 1e-12
            && r.accuracy <= r.upper_bound_accuracy
            && r.actions_with_mass(0.05) >= 2;
        ok &= pass;
        lines.push(format!(
            "seed {seed}: acc {:.1} at mean u {:.3} vs fixed {:.1} at u {u_best:.1}, {} actions >= 5%",
            100.0 * r.accuracy,
            r.mean_u,
            100.0 * best,
            r.actions_with_mass(0.05)
        ));
    }
    check(ok, lines.join("; "))
}

/// Two classes separated by the sign of a shared random pattern.
fn two_class_data(n: usize, seed: u64) -> Samples {
    let mut rng = seeded(seed);
    let proto: Vec<f32> = (0..64).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
        data.extend(
            proto
                .iter()
                .map(|&p| s * 0.6 * p + rng.sample::<f32, _>(StandardNormal)),
        );
        labels.push(i % 2);
    }
    Samples::new(Tensor::new(vec![n, 1, 8, 8], data).unwrap(), labels).unwrap()
}

/// Two branches, the second silenced so only the first carries signal.
fn signal_in_first_branch(data: &Samples) -> TNetwork {
    let mut net = TNetwork::build(&branch_net(&[1, 8, 8], 2, Aggregation::Sum, 2), &mut seeded(11)).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        lr_datapath: 5e-3,
        u_sampling: USampling::Fixed(1.0),
        ..Default::default()
    };
    train_datapath(&mut net, data, &cfg).unwrap();
    // parameters run branch 0 (weight, bias), branch 1 (weight, bias), head
    for p in &mut net.params_mut()[2..4] {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    net
}

fn gate_learners() -> Outcome {
    let data = two_class_data(512, 1);
    let net = signal_in_first_branch(&data);
    let probe = data.batch(&[0]).0;
    let u = Utilization::new(0.5).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for learner in [GateLearner::Reinforce, GateLearner::Concrete] {
        let mut hits = 0;
        let mut seen = Vec::new();
        for seed in 0..5 {
            let mut policy =
                BernoulliGatePolicy::new(PolicyInput::Blind, &net.module_sizes(), 64, 64, &mut seeded(seed)).unwrap();
            // 512 samples in batches of 32: 16 steps per epoch, 2000 steps
            let cfg = TrainConfig {
                epochs_phase2: 125,
                lr_phase2: 3e-3,
                seed,
                u_sampling: USampling::Fixed(0.5),
                gate_learner: learner,
                penalty: PenaltyConfig {
                    form: PenaltyForm::Hinge,
                    p: 1,
                    lambda: 1.0,
                },
                ..Default::default()
            };
            train_gate_policy(&net, &mut policy, &data, &cfg).unwrap();
            let p = policy.probs(&probe, u).unwrap();
            let (p1, p2) = (p.data()[0], p.data()[1]);
            if p1 > 0.9 && p2 < 0.9 {
                hits += 1;
            }
            seen.push(format!("({p1:.2}, {p2:.2})"));
        }
        ok &= hits >= 4;
        lines.push(format!("{learner:?} {hits}/5 {}", seen.join(" ")));
    }
    let mut rng = seeded(0);
    let mut worst = 0.0f64;
    for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let d: f64 = (0..10_000)
            .map(|_| {
                let s = concrete_sample(&[p], 0.01, &mut rng).unwrap()[0];
                s.min(1.0 - s)
            })
            .sum::<f64>()
            / 10_000.0;
        worst = worst.max(d);
    }
    ok &= worst < 0.01;
    lines.push(format!("Concrete t=0.01 mean distance {worst:.2e}"));
    check(ok, lines.join("; "))
}

fn latency_trend(t: &Trained) -> Outcome {
    let rows = tnn_harness::bench::bench(
        &t.nested[0],
        &rand_input(&[64, 1, 8, 8], 3),
        &[0.25, 1.0],
        ExecMode::Sliced { propagate: true },
        5,
    )
    .unwrap();
    let ratio = rows[0].median_s / rows[1].median_s;
    check(
        ratio <= 0.7,
        format!(
            "median {:.3} ms at u 0.25, {:.3} ms at u 1.0, ratio {ratio:.2}",
            1e3 * rows[0].median_s,
            1e3 * rows[1].median_s
        ),
    )
}

fn tnn(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn same(dir: &Path, a: &str, b: &str) -> Result<(), String> {
    let read = |p: &str| fs::read(dir.join(p)).map_err(|e| e.to_string());
    if read(a)? == read(b)? {
        Ok(())
    } else {
        Err(format!("{a} and {b} differ"))
    }
}

fn csv_without_latency(dir: &Path, p: &str) -> Result<Vec<String>, String> {
    let text = fs::read_to_string(dir.join(p)).map_err(|e| e.to_string())?;
    Ok(text
        .lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.remove(3);
            cols.join(",")
        })
        .collect())
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    fs::write(d.join("spec.cfg"), "data.samples_per_class = 100\n").map_err(|e| e.to_string())?;
    fs::write(
        d.join("run.cfg"),
        "data.dir = data\ntrain.epochs = 2\nphase2.epochs = 2\n",
    )
    .map_err(|e| e.to_string())?;
    tnn(d, &["gen-data", "--spec", "spec.cfg", "--seed", "3", "--out", "data"])?;
    tnn(
        d,
        &[
            "train-datapath",
            "--config",
            "run.cfg",
            "--seed",
            "5",
            "--out",
            "m.ckpt",
        ],
    )?;
    tnn(
        d,
        &[
            "train-gates",
            "--config",
            "run.cfg",
            "--model",
            "m.ckpt",
            "--out",
            "g.ckpt",
        ],
    )?;
    tnn(
        d,
        &[
            "train-controller",
            "--config",
            "run.cfg",
            "--model",
            "m.ckpt",
            "--out",
            "c.ckpt",
        ],
    )?;
    tnn(
        d,
        &[
            "eval-curve",
            "--model",
            "m.ckpt",
            "--gates",
            "g.ckpt",
            "--out",
            "curve.csv",
        ],
    )?;
    for (out, again) in [("m.ckpt", "m2.ckpt"), ("g.ckpt", "g2.ckpt"), ("c.ckpt", "c2.ckpt")] {
        let manifest = format!("{out}.manifest.json");
        tnn(d, &["rerun", "--manifest", &manifest, "--out", again])?;
        same(d, out, again)?;
    }
    tnn(
        d,
        &["rerun", "--manifest", "curve.csv.manifest.json", "--out", "curve2.csv"],
    )?;
    if csv_without_latency(d, "curve.csv")? != csv_without_latency(d, "curve2.csv")? {
        return Err("curve CSVs differ outside the latency column".into());
    }
    Ok("3 checkpoints bit-identical, curve CSV identical without latency".into())
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n:>2} {name}: {detail} [{secs:.1}s]");
    };
    report(1, "gradient oracle", &mut gradient_oracle);
    report(2, "sliced/masked equivalence", &mut sliced_equivalence);
    report(3, "MAC exactness", &mut mac_exactness);
    report(4, "gating algebra", &mut gating_algebra);
    report(5, "reward and penalty values", &mut unit_values);
    let t = Instant::now();
    let trained = train_all();
    println!(
        "     trained {} networks [{:.1}s]",
        2 * SEEDS + 1,
        t.elapsed().as_secs_f64()
    );
    report(6, "throttle-curve shape", &mut || curve_shape(&trained));
    report(7, "nested beats independent", &mut || {
        nested_beats_independent(&trained)
    });
    report(8, "controller efficacy", &mut || controller_efficacy(&trained));
    report(9, "gate learners", &mut gate_learners);
    report(10, "latency trend", &mut || latency_trend(&trained));
    report(11, "reproducibility", &mut reproducibility);
    drop(report);
    if failed > 0 {
        println!("{failed} of 11 criteria failed");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
