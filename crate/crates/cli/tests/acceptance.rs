//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria that are met or missed are both reported and the process exits 0;
//! set `RAF_ACCEPTANCE_STRICT=1` to turn any miss into a failing exit code.
//! Errors and panics always fail.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use raf_core::autodiff::{NodeId, Tape};
use raf_core::config::ExperimentConfig;
use raf_core::data::{gen_scenes, margin_for, render_scene};
use raf_core::experiments::{self, Variant};
use raf_core::losses::{mrkd_loss, task_loss, total_loss};
use raf_core::model::{attach_params, forward, stack};
use raf_core::tensor::{apply_upsample, build_upsample_op, resize};
use raf_core::theory::lipschitz_bound;
use raf_core::{Interp, LossCoeffs, ModelConfig, ModelParams, Resolution, SceneConfig, SyntheticSample, Tensor, UpsampleOp};

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Option<Duration>,
}

fn report(o: &Outcome) {
    let timing = match o.budget {
        Some(b) => format!("{:.1}s, budget {:.0}s", o.elapsed.as_secs_f64(), b.as_secs_f64()),
        None => format!("{:.1}s", o.elapsed.as_secs_f64()),
    };
    let within = o.budget.map_or(true, |b| o.elapsed <= b);
    let status = if o.pass && within { "PASS" } else { "FAIL" };
    println!("[{status}] {:>2} {}: {} ({timing})", o.id, o.name, o.detail);
}

/// Two-level objective: task on the high level, distillation from the
/// high-level heatmap (live or frozen) onto the upsampled low level.
struct Instance {
    cfg: ModelConfig,
    params: ModelParams,
    anchor: ModelParams,
    hi: Tensor,
    lo: Tensor,
    target: Tensor,
    op: Arc<UpsampleOp>,
    coeffs: LossCoeffs,
}

fn batch(samples: &[SyntheticSample]) -> (Tensor, Tensor) {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let targets: Vec<&Tensor> = samples.iter().map(|s| &s.target).collect();
    (stack(&images).unwrap(), stack(&targets).unwrap())
}

fn instance(seed: u64) -> Instance {
    let cfg = ModelConfig {
        keypoints: 2 + (seed as usize % 3),
        width: 8 + 4 * (seed as usize % 3),
        ..ModelConfig::default()
    };
    let hi_res = Resolution::new(32, 24);
    let lo_res = Resolution::new(16, 12);
    let scenes = gen_scenes(2, cfg.keypoints, seed, margin_for(lo_res), 0);
    let sc = SceneConfig::default();
    let his: Vec<SyntheticSample> = scenes.iter().map(|s| render_scene(s, hi_res, &sc).unwrap()).collect();
    let los: Vec<SyntheticSample> = scenes.iter().map(|s| render_scene(s, lo_res, &sc).unwrap()).collect();
    let (hi, target) = batch(&his);
    let (lo, _) = batch(&los);
    let p = cfg.patch;
    let op = Arc::new(build_upsample_op(lo_res.h / p, lo_res.w / p, hi_res.h / p, hi_res.w / p).unwrap());
    Instance {
        params: ModelParams::init(&cfg, seed),
        anchor: ModelParams::init(&cfg, seed + 1000),
        cfg,
        hi,
        lo,
        target,
        op,
        coeffs: LossCoeffs {
            alpha: 1.0,
            gamma: 0.01,
            mu_prox: 0.01,
        },
    }
}

struct Built {
    tape: Tape,
    ids: Vec<NodeId>,
    teacher: NodeId,
    total: NodeId,
    /// Sign pattern of every ReLU input at both levels.
    active: Vec<bool>,
}

fn build(inst: &Instance, params: &ModelParams, frozen: Option<&Tensor>) -> Built {
    let mut t = Tape::new();
    let nodes = attach_params(&mut t, params, &inst.cfg).unwrap();
    let xh = t.constant(inst.hi.clone());
    let xl = t.constant(inst.lo.clone());
    let fh = forward(&mut t, &nodes, &inst.cfg, xh).unwrap();
    let fl = forward(&mut t, &nodes, &inst.cfg, xl).unwrap();
    let (yh, yl) = (fh.heatmap, fl.heatmap);
    let active = fh
        .pre_activations
        .iter()
        .chain(&fl.pre_activations)
        .flat_map(|&id| t.value(id).data().iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect();
    let target = t.constant(inst.target.clone());
    let task = task_loss(&mut t, yh, target).unwrap();
    let kd = match frozen {
        None => mrkd_loss(&mut t, &[yh, yl], &[Arc::clone(&inst.op)]).unwrap(),
        Some(teacher) => {
            let c = t.constant(teacher.clone());
            let up = t.upsample(yl, Arc::clone(&inst.op)).unwrap();
            t.mse(c, up).unwrap()
        }
    };
    let total = total_loss(&mut t, task, kd, &nodes.ids, &inst.coeffs, Some(&inst.anchor))
        .unwrap()
        .total;
    Built {
        tape: t,
        ids: nodes.ids,
        teacher: yh,
        total,
        active,
    }
}

fn flat_grads(t: &Tape, ids: &[NodeId], loss: NodeId) -> Vec<f64> {
    let g = t.backward(loss).unwrap();
    ids.iter().flat_map(|&id| g.get(t, id).into_data()).collect()
}

fn criterion_autodiff() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut max_params = 0;
    let mut accepted = 0;
    let mut redrawn = 0;
    let mut seed = 0;
    // Instances whose central-difference stencil flips any ReLU input sign
    // are not differentiable there and are redrawn.
    while accepted < 20 && seed < 200 {
        let inst = instance(seed);
        seed += 1;
        let base = build(&inst, &inst.params, None);
        let grad = flat_grads(&base.tape, &base.ids, base.total);
        let teacher = base.tape.value(base.teacher).clone();
        let w = inst.params.flatten();
        let eval = |w: &[f64]| {
            let p = inst.params.with_flat(w).unwrap();
            let b = build(&inst, &p, Some(&teacher));
            (b.tape.scalar(b.total), b.active == base.active)
        };
        let mut num = vec![0.0; w.len()];
        let mut smooth = true;
        let mut probe = w.clone();
        for (i, n) in num.iter_mut().enumerate() {
            probe[i] = w[i] + h;
            let (up, a) = eval(&probe);
            probe[i] = w[i] - h;
            let (down, b) = eval(&probe);
            probe[i] = w[i];
            smooth &= a && b;
            *n = (up - down) / (2.0 * h);
        }
        if !smooth {
            redrawn += 1;
            continue;
        }
        accepted += 1;
        max_params = max_params.max(w.len());
        let diff: f64 = grad.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / scale);
    }
    Outcome {
        id: 1,
        name: "autodiff vs central differences",
        pass: accepted == 20 && worst <= 1e-4 && max_params <= 10_000,
        detail: format!(
            "max relative error {worst:.3e} over {accepted} instances, up to {max_params} parameters; {redrawn} instances redrawn for a ReLU kink inside the stencil"
        ),
        elapsed: start.elapsed(),
        budget: Some(Duration::from_secs(120)),
    }
}

fn criterion_stop_gradient() -> Outcome {
    let start = Instant::now();
    let mut equal = 0;
    for seed in 100..110 {
        let inst = instance(seed);
        let live_b = build(&inst, &inst.params, None);
        let live = flat_grads(&live_b.tape, &live_b.ids, live_b.total);
        let teacher = live_b.tape.value(live_b.teacher).clone();
        let frozen_b = build(&inst, &inst.params, Some(&teacher));
        let frozen = flat_grads(&frozen_b.tape, &frozen_b.ids, frozen_b.total);
        let same = live_b.tape.scalar(live_b.total).to_bits() == frozen_b.tape.scalar(frozen_b.total).to_bits()
            && live.len() == frozen.len()
            && live.iter().zip(&frozen).all(|(a, b)| a.to_bits() == b.to_bits());
        equal += usize::from(same);
    }
    Outcome {
        id: 2,
        name: "stop-gradient equals frozen teacher",
        pass: equal == 10,
        detail: format!("{equal}/10 instances bitwise equal"),
        elapsed: start.elapsed(),
        budget: None,
    }
}

fn criterion_upsample() -> Outcome {
    let start = Instant::now();
    let pairs = [(8, 6, 16, 12), (12, 9, 16, 12), (8, 6, 12, 9), (3, 5, 7, 11), (1, 1, 4, 4), (6, 6, 6, 6)];
    let mut worst_row: f64 = 0.0;
    for &(sh, sw, dh, dw) in &pairs {
        let op = build_upsample_op(sh, sw, dh, dw).unwrap();
        for r in 0..op.dst_len() {
            let s: f64 = op.row(r).iter().map(|&(_, w)| w).sum();
            worst_row = worst_row.max((s - 1.0).abs());
        }
    }
    let samples = raf_core::data::gen_dataset(50, 32, 24, 3, 7).unwrap();
    let mut exact = 0;
    for (i, s) in samples.iter().enumerate() {
        let (h, w, c) = s.image.hwc().unwrap();
        let (dh, dw) = [(64, 48), (48, 36), (40, 30)][i % 3];
        let op = build_upsample_op(h, w, dh, dw).unwrap();
        let flat = s.image.clone().reshape(&[h * w, c]).unwrap();
        let a = apply_upsample(&op, &flat).unwrap();
        let b = resize(&s.image, dh, dw, Interp::Bilinear).unwrap();
        if a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len() {
            exact += 1;
        }
    }
    Outcome {
        id: 3,
        name: "upsampling operator",
        pass: worst_row <= 1e-12 && exact == 50,
        detail: format!("max |row sum - 1| {worst_row:.1e}; {exact}/50 images element-exact vs bilinear resize"),
        elapsed: start.elapsed(),
        budget: None,
    }
}

fn criterion_drift() -> Outcome {
    let start = Instant::now();
    let src = "experiment = \"drift\"\n[drift]\ntriplets = [[\"32x24\", \"32x24\", \"32x24\"], [\"32x24\", \"64x48\", \"64x48\"]]\n";
    let cfg = ExperimentConfig::parse(src).unwrap();
    let d = experiments::drift(&cfg, 1).unwrap();
    let (low, mixed) = (d.rows[0].low_pck, d.rows[1].low_pck);
    Outcome {
        id: 4,
        name: "resolution drift",
        pass: low - mixed >= 2.0,
        detail: format!(
            "{} PCK all-low {low:.2} vs (low, high, high) {mixed:.2}, margin {:.2} points (need >= 2); per seed {:?} vs {:?}",
            d.eval_resolution,
            low - mixed,
            rounded(&d.rows[0].per_repeat),
            rounded(&d.rows[1].per_repeat)
        ),
        elapsed: start.elapsed(),
        budget: Some(Duration::from_secs(20 * 60)),
    }
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 100.0).round() / 100.0).collect()
}

fn criteria_compare() -> Vec<Outcome> {
    let start = Instant::now();
    let cfg = ExperimentConfig::parse("experiment = \"compare\"\n").unwrap();
    let c = experiments::compare(&cfg, 1).unwrap();
    let elapsed = start.elapsed();
    let col = |v: Variant| &c.pck[Variant::ALL.iter().position(|&x| x == v).unwrap()];
    let (base, raf, prox) = (col(Variant::BaseFedavg), col(Variant::RafFedavg), col(Variant::RafFedprox));
    let res = &c.resolutions;
    let lowest = res.iter().position(|r| *r == Resolution::new(32, 24)).unwrap();
    let highest = res.iter().position(|r| *r == Resolution::new(128, 96)).unwrap();
    let deltas: Vec<String> = res
        .iter()
        .zip(raf.iter().zip(base))
        .map(|(r, (a, b))| format!("{r}:{:+.2}", a - b))
        .collect();
    let benefit = raf.iter().zip(base).all(|(a, b)| a >= b)
        && raf[lowest] - base[lowest] >= 3.0
        && raf[highest] - base[highest] >= 3.0;
    let prox_gap: f64 = raf.iter().zip(prox).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let prox_deltas: Vec<String> = res
        .iter()
        .zip(prox.iter().zip(raf))
        .map(|(r, (a, b))| format!("{r}:{:+.2}", a - b))
        .collect();

    let t7 = Instant::now();
    let mut icfg = cfg.clone();
    icfg.interp.source = Resolution::new(32, 24);
    icfg.interp.targets = vec![Resolution::new(64, 48)];
    icfg.interp.methods = vec![Interp::Bilinear];
    let raf_idx = Variant::ALL.iter().position(|&v| v == Variant::RafFedavg).unwrap();
    let models: Vec<_> = c
        .repeats
        .iter()
        .map(|r| (&r.params[raf_idx], r.data.eval.as_slice()))
        .collect();
    let it = experiments::interp_table(&icfg, &models).unwrap();
    let up = it.rows[0].1[0];

    vec![
        Outcome {
            id: 5,
            name: "RAF benefit over Base (FedAvg)",
            pass: benefit,
            detail: format!(
                "RAF - Base per resolution [{}] (need >= 0 everywhere, >= 3 at 32x24 and 128x96); Base {:?}, RAF {:?}",
                deltas.join(" "),
                rounded(base),
                rounded(raf)
            ),
            elapsed,
            budget: Some(Duration::from_secs(30 * 60)),
        },
        Outcome {
            id: 6,
            name: "RAF FedProx near FedAvg",
            pass: prox_gap <= 2.0,
            detail: format!(
                "RAF(FedProx) - RAF(FedAvg) per resolution [{}], max gap {prox_gap:.2} points (need <= 2)",
                prox_deltas.join(" ")
            ),
            elapsed,
            budget: None,
        },
        Outcome {
            id: 7,
            name: "interpolated inference",
            pass: up - it.direct >= 3.0,
            detail: format!(
                "RAF direct 32x24 {:.2}, bilinear to 64x48 {up:.2}, gain {:.2} points (need >= 3)",
                it.direct,
                up - it.direct
            ),
            elapsed: elapsed + t7.elapsed(),
            budget: None,
        },
    ]
}

fn criteria_theory() -> Vec<Outcome> {
    let start = Instant::now();
    let cfg = ExperimentConfig::parse("experiment = \"theory\"\n").unwrap();
    let t = experiments::theory(&cfg).unwrap();
    let elapsed = start.elapsed();
    let r = &t.report;
    let clients: Vec<_> = r.instances.iter().flat_map(|i| &i.clients).collect();
    let lip_ratio = clients
        .iter()
        .map(|c| c.bounds.lipschitz_estimate / c.bounds.lipschitz_bound)
        .fold(0.0, f64::max);
    let (m_phi, gamma) = (1.0, 0.01);
    let l1 = lipschitz_bound(1.0, gamma, 1, 1.7, m_phi);
    let exact_r1 = l1 == 2.0 * m_phi * m_phi + gamma;
    let eig_margin = clients
        .iter()
        .map(|c| c.bounds.min_eigenvalue - c.constants.gamma)
        .fold(f64::INFINITY, f64::min);
    let grad_ratio = clients
        .iter()
        .map(|c| c.bounds.max_sample_grad_norm.max(c.bounds.max_grad_norm) / c.bounds.grad_bound)
        .fold(0.0, f64::max);
    let conv = &r.convergence;
    let alpha0_max = r
        .equivalence
        .iter()
        .map(|e| e.residuals_alpha0.value.abs().max(e.residuals_alpha0.grad.abs()))
        .fold(0.0, f64::max);
    let general_max = r
        .equivalence
        .iter()
        .map(|e| e.residuals.value.abs().max(e.residuals.grad.abs()))
        .fold(0.0, f64::max);
    let instances: std::collections::BTreeSet<usize> = r.equivalence.iter().map(|e| e.instance).collect();
    vec![
        Outcome {
            id: 8,
            name: "smoothness constant",
            pass: r.checks.smoothness && exact_r1 && r.instances.len() >= 5 && cfg.theory.trials >= 500,
            detail: format!(
                "max estimate/L {lip_ratio:.4} over {} instances x {} pairs; r=1 gives L = 2M^2 + gamma exactly: {exact_r1}",
                r.instances.len(),
                cfg.theory.trials
            ),
            elapsed,
            budget: None,
        },
        Outcome {
            id: 9,
            name: "strong convexity",
            pass: r.checks.strong_convexity && eig_margin >= -1e-9,
            detail: format!("min over clients of (min eigenvalue - gamma) = {eig_margin:.3e}"),
            elapsed,
            budget: None,
        },
        Outcome {
            id: 10,
            name: "gradient bound",
            pass: r.checks.gradient_bound && grad_ratio <= 1.0,
            detail: format!("max gradient norm / C = {grad_ratio:.4}"),
            elapsed,
            budget: None,
        },
        Outcome {
            id: 11,
            name: "O(1/t) convergence",
            pass: r.checks.rate_fit && r.checks.gap_ratio,
            detail: format!(
                "c/t fit R^2 {:.4} on t in [{}, {}], gap ratio {:.4} (need R^2 >= 0.9, ratio <= 0.15)",
                conv.fit.r2, conv.fit_from, conv.rounds, conv.gap_ratio
            ),
            elapsed,
            budget: Some(Duration::from_secs(5 * 60)),
        },
        Outcome {
            id: 12,
            name: "local-equivalence residuals",
            pass: instances.len() >= 10 && alpha0_max == 0.0,
            detail: format!(
                "{} residual rows over {} instances; alpha=0 max {alpha0_max:e}; alpha=1 max {general_max:.3e} (reported only)",
                r.equivalence.len(),
                instances.len()
            ),
            elapsed,
            budget: None,
        },
    ]
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_cli() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("small.toml");
    fs::write(
        &cfg_path,
        "experiment = \"compare\"\nseed = 5\n[data]\nsamples_per_client = 12\neval_samples = 8\n\
         [train]\nrounds = 2\nrepeats = 2\nbatch_size = 4\n[eval]\nresolutions = [\"32x24\", \"64x48\"]\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_raf");
    let run = |name: &str, workers: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(bin)
            .args(["compare", "--config"])
            .arg(&cfg_path)
            .args(["--seed", "11", "--workers", workers, "--out"])
            .arg(&out)
            .output()
            .unwrap()
            .status;
        (status.code(), read_tree(&out))
    };
    let (c1, a) = run("a", "1");
    let (c2, b) = run("b", "1");
    let (c3, c) = run("c", "3");
    let files = a.len();
    let pass = c1 == Some(0) && c2 == Some(0) && c3 == Some(0) && files > 0 && a == b && a == c;
    Outcome {
        id: 13,
        name: "CLI determinism",
        pass,
        detail: format!(
            "{files} output files; rerun identical: {}; workers 1 vs 3 identical: {}",
            a == b,
            a == c
        ),
        elapsed: start.elapsed(),
        budget: None,
    }
}

fn main() {
    let strict = std::env::var("RAF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut outcomes = Vec::new();
    let mut run = |batch: Vec<Outcome>| {
        for o in batch {
            report(&o);
            outcomes.push(o);
        }
    };
    run(vec![criterion_autodiff()]);
    run(vec![criterion_stop_gradient()]);
    run(vec![criterion_upsample()]);
    run(criteria_theory());
    run(vec![criterion_cli()]);
    run(vec![criterion_drift()]);
    run(criteria_compare());
    outcomes.sort_by_key(|o| o.id);
    let met = outcomes
        .iter()
        .filter(|o| o.pass && o.budget.map_or(true, |b| o.elapsed <= b))
        .count();
    println!("acceptance: {met}/{} criteria met", outcomes.len());
    if strict && met != outcomes.len() {
        std::process::exit(1);
    }
}
