//! Experiment drivers behind the command-line tool: each takes a validated
//! [`ExperimentConfig`] and returns its table; the `write_*` functions emit
//! the CSV layouts.

use std::io::Write;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{gen_scenes, margin_for, render_scene, Resolution, Scene, SyntheticSample};
use crate::error::{invalid, Result};
use crate::federated::{client_seed, run_rounds, Aggregator, ClientSpec, RoundLog, RunOptions, RunOutput};
use crate::io::fmt_float;
use crate::losses::LossCoeffs;
use crate::metrics::evaluate;
use crate::model::{build_linear_models, export_embeddings, LinearModel, LinearShard, ModelConfig, ModelParams};
use crate::tensor::Interp;
use crate::theory::{
    check_local_equivalence, combine_constants, compute_constants, convergence_experiment, fit_inverse,
    mann_kendall, sample_ball, verify_bounds, BoundReport, ConvergenceOptions, EquivalenceResiduals,
    GradientMode, MannKendall, RateFit, TheoryConfig, TheoryConstants,
};

/// Offset separating evaluation scene ids from training scene ids.
const EVAL_ID_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    BaseFedavg,
    BaseFedprox,
    RafFedavg,
    RafFedprox,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaseFedavg,
        Variant::BaseFedprox,
        Variant::RafFedavg,
        Variant::RafFedprox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaseFedavg => "base_fedavg",
            Variant::BaseFedprox => "base_fedprox",
            Variant::RafFedavg => "raf_fedavg",
            Variant::RafFedprox => "raf_fedprox",
        }
    }

    pub fn raf(self) -> bool {
        matches!(self, Variant::RafFedavg | Variant::RafFedprox)
    }

    pub fn aggregator(self, mu: f64) -> Aggregator {
        match self {
            Variant::BaseFedavg | Variant::RafFedavg => Aggregator::Fedavg,
            Variant::BaseFedprox | Variant::RafFedprox => Aggregator::Fedprox { mu },
        }
    }
}

/// Scenes of one repeat: one disjoint shard per client plus an evaluation set.
#[derive(Clone, Debug)]
pub struct RepeatData {
    pub repeat: usize,
    pub init_seed: u64,
    pub shards: Vec<Vec<Scene>>,
    pub eval: Vec<Scene>,
}

fn repeat_seed(seed: u64, repeat: usize, stream: usize) -> u64 {
    client_seed(seed, repeat, stream)
}

/// Smallest resolution any scene of the run is rendered at.
fn smallest(cfg: &ExperimentConfig, extra: &[Resolution]) -> Resolution {
    cfg.clients
        .family
        .iter()
        .chain(&cfg.clients.resolutions)
        .chain(&cfg.eval.resolutions)
        .chain(extra)
        .copied()
        .min_by_key(|r| r.h.min(r.w))
        .unwrap_or(Resolution::new(32, 24))
}

pub fn repeat_data(cfg: &ExperimentConfig, repeat: usize, clients: usize) -> RepeatData {
    let k = cfg.model.keypoints;
    let margin = margin_for(smallest(cfg, &[cfg.interp.source, cfg.scaling.low]));
    let n = cfg.data.samples_per_client;
    let pool = gen_scenes(clients * n, k, repeat_seed(cfg.seed, repeat, 1), margin, 0);
    let eval = gen_scenes(cfg.data.eval_samples, k, repeat_seed(cfg.seed, repeat, 2), margin, EVAL_ID_BASE);
    RepeatData {
        repeat,
        init_seed: repeat_seed(cfg.seed, repeat, 3),
        shards: pool.chunks(n).map(<[Scene]>::to_vec).collect(),
        eval,
    }
}

/// Native level plus every family member strictly below it.
pub fn raf_levels(native: Resolution, family: &[Resolution]) -> Vec<Resolution> {
    let mut levels = vec![native];
    levels.extend(family.iter().filter(|r| r.h < native.h && r.w < native.w));
    levels
}

pub fn render_all(scenes: &[Scene], res: Resolution, cfg: &ExperimentConfig) -> Result<Vec<SyntheticSample>> {
    scenes.iter().map(|s| render_scene(s, res, &cfg.data.scene)).collect()
}

pub fn client_specs(
    cfg: &ExperimentConfig,
    natives: &[Resolution],
    shards: &[Vec<Scene>],
    raf: bool,
) -> Result<Vec<ClientSpec>> {
    if shards.len() < natives.len() {
        return Err(invalid("fewer shards than clients"));
    }
    let coeffs = LossCoeffs {
        alpha: if raf { cfg.loss.alpha } else { 0.0 },
        gamma: cfg.loss.gamma,
        mu_prox: 0.0,
    };
    natives
        .iter()
        .zip(shards)
        .enumerate()
        .map(|(id, (&native, scenes))| {
            Ok(ClientSpec {
                client_id: id,
                levels: if raf {
                    raf_levels(native, &cfg.clients.family)
                } else {
                    vec![native]
                },
                samples: render_all(scenes, native, cfg)?,
                coeffs,
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                lr: cfg.train.lr,
                optimizer: cfg.train.optimizer,
            })
        })
        .collect()
}

/// Train one federated model on `natives` with the data of `data`.
pub fn train(
    cfg: &ExperimentConfig,
    natives: &[Resolution],
    data: &RepeatData,
    variant: Variant,
    workers: usize,
) -> Result<RunOutput> {
    let specs = client_specs(cfg, natives, &data.shards, variant.raf())?;
    let opts = RunOptions {
        rounds: cfg.train.rounds,
        init_seed: data.init_seed,
        aggregator: variant.aggregator(cfg.loss.mu),
        schedule: cfg.train.schedule,
        workers,
    };
    run_rounds(specs, &cfg.model, &opts)
}

/// PCK in percentage points at `res`, with the evaluation scenes rendered
/// directly at that resolution.
pub fn pck_at(cfg: &ExperimentConfig, params: &ModelParams, scenes: &[Scene], res: Resolution) -> Result<f64> {
    let set = render_all(scenes, res, cfg)?;
    Ok(100.0 * evaluate(params, &cfg.model, &set, &[(res, Interp::Bilinear)], cfg.eval.tau)?.pck)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Training logs of one run.
#[derive(Clone, Debug)]
pub struct RunLog {
    pub label: String,
    pub logs: Vec<RoundLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub clients: Vec<Resolution>,
    /// Mean over repeats, in points.
    pub low_pck: f64,
    pub per_repeat: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DriftOutput {
    pub eval_resolution: Resolution,
    pub rows: Vec<DriftRow>,
    pub runs: Vec<RunLog>,
}

/// Base FedAvg per row of client resolutions, scored at the lowest family
/// resolution.
pub fn drift(cfg: &ExperimentConfig, workers: usize) -> Result<DriftOutput> {
    let low = *cfg
        .clients
        .family
        .last()
        .ok_or_else(|| invalid("empty resolution family"))?;
    let mut rows = Vec::with_capacity(cfg.drift.triplets.len());
    let mut runs = Vec::new();
    for (i, natives) in cfg.drift.triplets.iter().enumerate() {
        let mut per_repeat = Vec::with_capacity(cfg.train.repeats);
        for rep in 0..cfg.train.repeats {
            let data = repeat_data(cfg, rep, natives.len());
            let out = train(cfg, natives, &data, Variant::BaseFedavg, workers)?;
            per_repeat.push(pck_at(cfg, &out.params, &data.eval, low)?);
            runs.push(RunLog {
                label: format!("row{i}_rep{rep}"),
                logs: out.logs,
            });
        }
        rows.push(DriftRow {
            clients: natives.clone(),
            low_pck: mean(&per_repeat),
            per_repeat,
        });
    }
    Ok(DriftOutput {
        eval_resolution: low,
        rows,
        runs,
    })
}

/// Trained models and evaluation scenes of one compare repeat.
#[derive(Clone, Debug)]
pub struct CompareRepeat {
    pub data: RepeatData,
    /// Final parameters in [`Variant::ALL`] order.
    pub params: Vec<ModelParams>,
}

#[derive(Clone, Debug)]
pub struct CompareOutput {
    pub resolutions: Vec<Resolution>,
    /// `pck[v][r]`: mean points of variant `v` at resolution `r`.
    pub pck: Vec<Vec<f64>>,
    /// `per_repeat[rep][v][r]`.
    pub per_repeat: Vec<Vec<Vec<f64>>>,
    pub repeats: Vec<CompareRepeat>,
    pub runs: Vec<RunLog>,
}

/// Train `variants` on the configured clients for every repeat.
pub fn train_variants(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    workers: usize,
) -> Result<(Vec<CompareRepeat>, Vec<RunLog>)> {
    let natives = &cfg.clients.resolutions;
    let mut repeats = Vec::with_capacity(cfg.train.repeats);
    let mut runs = Vec::new();
    for rep in 0..cfg.train.repeats {
        let data = repeat_data(cfg, rep, natives.len());
        let mut params = Vec::with_capacity(variants.len());
        for &v in variants {
            let out = train(cfg, natives, &data, v, workers)?;
            params.push(out.params);
            runs.push(RunLog {
                label: format!("{}_rep{rep}", v.name()),
                logs: out.logs,
            });
        }
        repeats.push(CompareRepeat { data, params });
    }
    Ok((repeats, runs))
}

/// Base and RAF under FedAvg and FedProx, scored over the evaluation sweep.
pub fn compare(cfg: &ExperimentConfig, workers: usize) -> Result<CompareOutput> {
    let (repeats, runs) = train_variants(cfg, &Variant::ALL, workers)?;
    compare_table(cfg, repeats, runs)
}

pub fn compare_table(cfg: &ExperimentConfig, repeats: Vec<CompareRepeat>, runs: Vec<RunLog>) -> Result<CompareOutput> {
    let res = &cfg.eval.resolutions;
    let mut per_repeat = Vec::with_capacity(repeats.len());
    for rep in &repeats {
        let mut by_variant = Vec::with_capacity(rep.params.len());
        for p in &rep.params {
            by_variant.push(
                res.iter()
                    .map(|&r| pck_at(cfg, p, &rep.data.eval, r))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        per_repeat.push(by_variant);
    }
    let variants = repeats.first().map_or(0, |r| r.params.len());
    let pck = (0..variants)
        .map(|v| {
            (0..res.len())
                .map(|r| mean(&per_repeat.iter().map(|rep| rep[v][r]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    Ok(CompareOutput {
        resolutions: res.clone(),
        pck,
        per_repeat,
        repeats,
        runs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpOutput {
    pub source: Resolution,
    pub methods: Vec<Interp>,
    /// Direct inference at the source resolution, in points.
    pub direct: f64,
    /// `(target, pck per method)`.
    pub rows: Vec<(Resolution, Vec<f64>)>,
}

/// Score models on source-resolution images upscaled to each target.
pub fn interp_table(cfg: &ExperimentConfig, models: &[(&ModelParams, &[Scene])]) -> Result<InterpOutput> {
    let ic = &cfg.interp;
    if models.is_empty() {
        return Err(invalid("no models to evaluate"));
    }
    let mut direct = Vec::with_capacity(models.len());
    let mut rows: Vec<(Resolution, Vec<Vec<f64>>)> =
        ic.targets.iter().map(|&t| (t, vec![Vec::new(); ic.methods.len()])).collect();
    for &(params, scenes) in models {
        let set = render_all(scenes, ic.source, cfg)?;
        let score = |steps: &[(Resolution, Interp)]| -> Result<f64> {
            Ok(100.0 * evaluate(params, &cfg.model, &set, steps, cfg.eval.tau)?.pck)
        };
        direct.push(score(&[(ic.source, Interp::Bilinear)])?);
        for (target, cols) in &mut rows {
            for (m, col) in ic.methods.iter().zip(cols.iter_mut()) {
                col.push(score(&[(*target, *m)])?);
            }
        }
    }
    Ok(InterpOutput {
        source: ic.source,
        methods: ic.methods.clone(),
        direct: mean(&direct),
        rows: rows
            .into_iter()
            .map(|(t, cols)| (t, cols.iter().map(|c| mean(c)).collect()))
            .collect(),
    })
}

/// RAF FedAvg on the configured clients, then the interpolation table.
pub fn interp(cfg: &ExperimentConfig, workers: usize) -> Result<(InterpOutput, Vec<RunLog>)> {
    let (repeats, runs) = train_variants(cfg, &[Variant::RafFedavg], workers)?;
    let models: Vec<(&ModelParams, &[Scene])> = repeats
        .iter()
        .map(|r| (&r.params[0], r.data.eval.as_slice()))
        .collect();
    Ok((interp_table(cfg, &models)?, runs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub low_clients: usize,
    pub resolution: Resolution,
    pub base: f64,
    pub raf: f64,
}

/// One high-resolution client joined by `0..=M` low-resolution clients.
pub fn scaling(cfg: &ExperimentConfig, workers: usize) -> Result<(Vec<ScalingRow>, Vec<RunLog>)> {
    let sc = &cfg.scaling;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for m in 0..=sc.max_low_clients {
        let mut natives = vec![sc.high];
        natives.extend(std::iter::repeat(sc.low).take(m));
        let mut base = vec![Vec::new(); cfg.eval.resolutions.len()];
        let mut raf = base.clone();
        for rep in 0..cfg.train.repeats {
            let data = repeat_data(cfg, rep, natives.len());
            for (variant, acc) in [(Variant::BaseFedavg, &mut base), (Variant::RafFedavg, &mut raf)] {
                let out = train(cfg, &natives, &data, variant, workers)?;
                for (col, &r) in acc.iter_mut().zip(&cfg.eval.resolutions) {
                    col.push(pck_at(cfg, &out.params, &data.eval, r)?);
                }
                runs.push(RunLog {
                    label: format!("low{m}_{}_rep{rep}", variant.name()),
                    logs: out.logs,
                });
            }
        }
        for (i, &r) in cfg.eval.resolutions.iter().enumerate() {
            rows.push(ScalingRow {
                low_clients: m,
                resolution: r,
                base: mean(&base[i]),
                raf: mean(&raf[i]),
            });
        }
    }
    Ok((rows, runs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientBounds {
    pub client: usize,
    pub constants: TheoryConstants,
    pub bounds: BoundReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceReport {
    pub instance: usize,
    pub seed: u64,
    pub clients: Vec<ClientBounds>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceRow {
    pub instance: usize,
    pub client: usize,
    pub residuals: EquivalenceResiduals,
    /// The same point with the distillation weight set to zero.
    pub residuals_alpha0: EquivalenceResiduals,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub constants: TheoryConstants,
    pub schedule_offset: f64,
    pub fit_from: usize,
    pub rounds: usize,
    pub fit: RateFit,
    pub gap_first: f64,
    pub gap_last: f64,
    pub gap_ratio: f64,
    /// Trend test on `t · gap(t)` over the fit window.
    pub scaled_gap_trend: MannKendall,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryChecks {
    pub smoothness: bool,
    pub strong_convexity: bool,
    pub gradient_bound: bool,
    pub rate_fit: bool,
    pub gap_ratio: bool,
    pub alpha0_equivalence: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryReport {
    pub config: TheoryConfig,
    pub instances: Vec<InstanceReport>,
    pub equivalence: Vec<EquivalenceRow>,
    pub convergence: ConvergenceSummary,
    pub checks: TheoryChecks,
}

#[derive(Clone, Debug)]
pub struct TheoryOutput {
    pub report: TheoryReport,
    /// `(t, gap, eta)`.
    pub curve: Vec<(usize, f64, f64)>,
}

/// Frozen-feature linear models of every theory client for one seed.
pub fn theory_instance(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<LinearModel>> {
    let tc = &cfg.theory;
    let model = ModelConfig {
        keypoints: tc.keypoints,
        ..cfg.model.clone()
    };
    let smallest = tc
        .clients
        .iter()
        .flatten()
        .copied()
        .min_by_key(|r| r.h.min(r.w))
        .ok_or_else(|| invalid("no theory clients"))?;
    let n = tc.samples_per_client;
    let scenes = gen_scenes(n * tc.clients.len(), tc.keypoints, seed, margin_for(smallest), 0);
    let samples = tc
        .clients
        .iter()
        .zip(scenes.chunks(n))
        .map(|(levels, sc)| render_all(sc, levels[0], cfg))
        .collect::<Result<Vec<_>>>()?;
    let shards: Vec<LinearShard<'_>> = tc
        .clients
        .iter()
        .zip(&samples)
        .map(|(levels, s)| LinearShard {
            samples: s,
            resolutions: levels,
        })
        .collect();
    build_linear_models(&shards, &model, seed, tc.m_phi)
}

/// Proposition checks, local-equivalence residuals and the rate experiment.
pub fn theory(cfg: &ExperimentConfig) -> Result<TheoryOutput> {
    let tc = &cfg.theory;
    let coeffs = tc.coeffs();
    let alpha0 = LossCoeffs { alpha: 0.0, ..coeffs };

    let mut instances = Vec::with_capacity(tc.instances);
    for i in 0..tc.instances {
        let seed = repeat_seed(cfg.seed, i, 10);
        let models = theory_instance(cfg, seed)?;
        let clients = models
            .iter()
            .enumerate()
            .map(|(k, lm)| {
                let constants = compute_constants(lm, &coeffs, tc.radius);
                let bounds = verify_bounds(lm, &constants, tc.trials, repeat_seed(seed, k, 11))?;
                Ok(ClientBounds {
                    client: k,
                    constants,
                    bounds,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        instances.push(InstanceReport {
            instance: i,
            seed,
            clients,
        });
    }

    let mut equivalence = Vec::new();
    for i in 0..tc.equivalence_instances {
        let seed = repeat_seed(cfg.seed, i, 12);
        let models = theory_instance(cfg, seed)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        for (k, lm) in models.iter().enumerate() {
            let w_t = sample_ball(&mut rng, lm.dim, tc.radius);
            equivalence.push(EquivalenceRow {
                instance: i,
                client: k,
                residuals: check_local_equivalence(lm, &w_t, &coeffs)?,
                residuals_alpha0: check_local_equivalence(lm, &w_t, &alpha0)?,
            });
        }
    }

    let seed = repeat_seed(cfg.seed, 0, 13);
    let models = theory_instance(cfg, seed)?;
    let consts = combine_constants(
        &models
            .iter()
            .map(|lm| compute_constants(lm, &coeffs, tc.radius))
            .collect::<Vec<_>>(),
    )?;
    let opts = ConvergenceOptions {
        rounds: tc.rounds,
        local_steps: tc.local_steps,
        repeats: tc.repeats,
        seed: repeat_seed(seed, 0, 14),
        mode: GradientMode::Stochastic,
        start: None,
    };
    let res = convergence_experiment(&models, &coeffs, &consts, &opts)?;
    let window: Vec<usize> = (tc.fit_from - 1..tc.rounds).collect();
    let t: Vec<f64> = window.iter().map(|&i| res.t[i] as f64).collect();
    let gap: Vec<f64> = window.iter().map(|&i| res.gap[i]).collect();
    let fit = fit_inverse(&t, &gap)?;
    let scaled: Vec<f64> = t.iter().zip(&gap).map(|(t, g)| t * g).collect();
    let gap_first = gap[0];
    let gap_last = *gap.last().expect("nonempty window");
    let convergence = ConvergenceSummary {
        constants: consts,
        schedule_offset: consts.schedule_offset(tc.local_steps),
        fit_from: tc.fit_from,
        rounds: tc.rounds,
        fit,
        gap_first,
        gap_last,
        gap_ratio: gap_last / gap_first,
        scaled_gap_trend: mann_kendall(&scaled),
    };
    let all_clients = || instances.iter().flat_map(|i| &i.clients);
    let checks = TheoryChecks {
        smoothness: all_clients().all(|c| c.bounds.lipschitz_ok),
        strong_convexity: all_clients().all(|c| c.bounds.strong_convexity_ok),
        gradient_bound: all_clients().all(|c| c.bounds.grad_ok),
        rate_fit: fit.r2 >= 0.9,
        gap_ratio: gap_last <= 0.15 * gap_first,
        alpha0_equivalence: equivalence
            .iter()
            .all(|e| e.residuals_alpha0.value == 0.0 && e.residuals_alpha0.grad == 0.0),
    };
    Ok(TheoryOutput {
        report: TheoryReport {
            config: tc.clone(),
            instances,
            equivalence,
            convergence,
            checks,
        },
        curve: res
            .t
            .iter()
            .zip(&res.gap)
            .zip(&res.eta)
            .map(|((&t, &g), &e)| (t, g, e))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedRow {
    pub model: &'static str,
    pub resolution: Resolution,
    pub sample_id: u64,
    pub features: Vec<f64>,
}

/// Pooled features of Base and RAF FedAvg models (first repeat) on
/// evaluation scenes rendered at each embedding resolution.
pub fn embed(cfg: &ExperimentConfig, workers: usize) -> Result<(Vec<EmbedRow>, Vec<RunLog>)> {
    let natives = &cfg.clients.resolutions;
    let data = repeat_data(cfg, 0, natives.len());
    let scenes = &data.eval[..cfg.embed.samples.min(data.eval.len())];
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for variant in [Variant::BaseFedavg, Variant::RafFedavg] {
        let out = train(cfg, natives, &data, variant, workers)?;
        for &res in &cfg.embed.resolutions {
            let set = render_all(scenes, res, cfg)?;
            for row in export_embeddings(&out.params, &cfg.model, &set, &[res])? {
                rows.push(EmbedRow {
                    model: variant.name(),
                    resolution: row.resolution,
                    sample_id: row.sample_id,
                    features: row.features,
                });
            }
        }
        runs.push(RunLog {
            label: format!("{}_rep0", variant.name()),
            logs: out.logs,
        });
    }
    Ok((rows, runs))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_float).collect::<Vec<_>>().join(",")
}

pub fn write_drift_csv(out: &mut impl Write, header: &str, d: &DriftOutput) -> Result<()> {
    writeln!(out, "{header}")?;
    let width = d.rows.iter().map(|r| r.clients.len()).max().unwrap_or(0);
    let cols: Vec<String> = (1..=width).map(|i| format!("res{i}")).collect();
    writeln!(out, "{},low_pck", cols.join(","))?;
    for row in &d.rows {
        let mut cells: Vec<String> = row.clients.iter().map(|r| r.to_string()).collect();
        cells.resize(width, String::new());
        writeln!(out, "{},{}", cells.join(","), fmt_float(row.low_pck))?;
    }
    Ok(())
}

pub fn write_compare_csv(out: &mut impl Write, header: &str, c: &CompareOutput) -> Result<()> {
    writeln!(out, "{header}")?;
    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    writeln!(out, "inference_res,{}", names.join(","))?;
    for (r, res) in c.resolutions.iter().enumerate() {
        writeln!(out, "{res},{}", join(c.pck.iter().map(|col| col[r])))?;
    }
    Ok(())
}

pub fn write_interp_csv(out: &mut impl Write, header: &str, t: &InterpOutput) -> Result<()> {
    writeln!(out, "{header}")?;
    let names: Vec<&str> = t.methods.iter().map(|m| m.name()).collect();
    writeln!(out, "interpolated_res,{}", names.join(","))?;
    writeln!(out, "{}*,{}", t.source, join(t.methods.iter().map(|_| t.direct)))?;
    for (res, vals) in &t.rows {
        writeln!(out, "{res},{}", join(vals.iter().copied()))?;
    }
    Ok(())
}

pub fn write_scaling_csv(out: &mut impl Write, header: &str, rows: &[ScalingRow]) -> Result<()> {
    writeln!(out, "{header}")?;
    writeln!(out, "n_low_clients,inference_res,base_fedavg,raf_fedavg")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.low_clients, r.resolution, fmt_float(r.base), fmt_float(r.raf))?;
    }
    Ok(())
}

pub fn write_gap_csv(out: &mut impl Write, header: &str, curve: &[(usize, f64, f64)]) -> Result<()> {
    writeln!(out, "{header}")?;
    writeln!(out, "t,gap,eta")?;
    for &(t, g, e) in curve {
        writeln!(out, "{t},{},{}", fmt_float(g), fmt_float(e))?;
    }
    Ok(())
}

pub fn write_embed_csv(out: &mut impl Write, header: &str, rows: &[EmbedRow]) -> Result<()> {
    writeln!(out, "{header}")?;
    let d = rows.first().map_or(0, |r| r.features.len());
    let cols: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    writeln!(out, "model,resolution,sample_id,{}", cols.join(","))?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.model, r.resolution, r.sample_id, join(r.features.iter().copied()))?;
    }
    Ok(())
}
