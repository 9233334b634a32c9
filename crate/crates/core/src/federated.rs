//! Round driver: broadcast, local multi-resolution training, aggregation.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::{build_pyramid, check_levels, Pyramid, Resolution, SyntheticSample};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::losses::{mrkd_loss, task_loss, total_loss, LossCoeffs, LossValues};
use crate::metrics::EvalResult;
use crate::model::{attach_params, forward, stack, ModelConfig, ModelParams};
use crate::tensor::{build_upsample_op, Tensor, UpsampleOp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Adam moments with decoupled weight decay, reset every round.
    Adamw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Fixed,
    /// `η · ½(1 + cos(π t / T))` over rounds.
    Cosine,
}

impl Schedule {
    pub fn rate(self, lr: f64, round: usize, rounds: usize) -> f64 {
        match self {
            Schedule::Fixed => lr,
            Schedule::Cosine => {
                lr * 0.5 * (1.0 + (std::f64::consts::PI * round as f64 / rounds as f64).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Aggregator {
    Fedavg,
    Fedprox { mu: f64 },
}

#[derive(Clone, Debug)]
pub struct ClientSpec {
    pub client_id: usize,
    /// Native resolution first, strictly decreasing.
    pub levels: Vec<Resolution>,
    /// Native-resolution shard.
    pub samples: Vec<SyntheticSample>,
    pub coeffs: LossCoeffs,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
}

impl ClientSpec {
    pub fn native(&self) -> Resolution {
        self.levels[0]
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        check_levels(&self.levels)?;
        if self.samples.is_empty() {
            return Err(invalid(format!("client {} has an empty shard", self.client_id)));
        }
        if self.epochs == 0 {
            return Err(invalid(format!("client {}: epochs must be at least 1", self.client_id)));
        }
        if self.batch_size == 0 {
            return Err(invalid(format!("client {}: batch size must be at least 1", self.client_id)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("client {}: learning rate must be positive", self.client_id)));
        }
        for r in &self.levels {
            if !r.divisible_by(patch) {
                return Err(invalid(format!(
                    "client {}: level {r} not divisible by patch size {patch}",
                    self.client_id
                )));
            }
        }
        if let Some(s) = self.samples.iter().find(|s| s.resolution() != self.levels[0]) {
            return Err(invalid(format!(
                "client {}: sample {} is {} but the native level is {}",
                self.client_id,
                s.sample_id,
                s.resolution(),
                self.levels[0]
            )));
        }
        self.coeffs.validate()
    }
}

/// One client's confined training state.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub spec: ClientSpec,
    pub params: ModelParams,
    pub pyramids: Vec<Pyramid>,
    /// `ups[i - 1]` lifts the level-`i` heatmap grid onto level `i - 1`.
    ups: Vec<Arc<UpsampleOp>>,
}

impl ClientState {
    pub fn new(spec: ClientSpec, config: &ModelConfig, params: ModelParams) -> Result<Self> {
        spec.validate(config.patch)?;
        let pyramids = spec
            .samples
            .iter()
            .map(|s| build_pyramid(&s.image, &spec.levels))
            .collect::<Result<Vec<_>>>()?;
        let p = config.patch;
        let ups = spec
            .levels
            .windows(2)
            .map(|pair| {
                build_upsample_op(pair[1].h / p, pair[1].w / p, pair[0].h / p, pair[0].w / p).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            params,
            pyramids,
            ups,
        })
    }
}

/// Outcome of one local training call.
#[derive(Clone, Debug)]
pub struct LocalReport {
    /// Loss components of every minibatch step, in order.
    pub trace: Vec<LossValues>,
    /// Means over the steps of the final epoch.
    pub last_epoch: LossValues,
    /// Mean gradient norm over the steps of the final epoch.
    pub grad_norm: f64,
}

/// One minibatch objective and its gradient.
pub struct StepOutput {
    pub values: LossValues,
    pub grads: Vec<Tensor>,
}

/// Record the local objective for the samples `batch` of `state` and
/// differentiate it with respect to every parameter tensor.
pub fn batch_objective(
    state: &ClientState,
    config: &ModelConfig,
    batch: &[usize],
    anchor: Option<&ModelParams>,
) -> Result<StepOutput> {
    let coeffs = state.spec.coeffs;
    let mut tape = Tape::new();
    let nodes = attach_params(&mut tape, &state.params, config)?;
    let levels = if coeffs.alpha > 0.0 {
        state.spec.levels.len()
    } else {
        1
    };
    let mut preds: Vec<NodeId> = Vec::with_capacity(levels);
    for i in 0..levels {
        let imgs: Vec<&Tensor> = batch.iter().map(|&j| &state.pyramids[j].levels[i]).collect();
        let x = tape.constant(stack(&imgs)?);
        preds.push(forward(&mut tape, &nodes, config, x)?.heatmap);
    }
    let targets: Vec<&Tensor> = batch.iter().map(|&j| &state.spec.samples[j].target).collect();
    let t = tape.constant(stack(&targets)?);
    let task = task_loss(&mut tape, preds[0], t)?;
    let kd = mrkd_loss(&mut tape, &preds, &state.ups)?;
    let loss = total_loss(&mut tape, task, kd, &nodes.ids, &coeffs, anchor)?;
    let g = tape.backward(loss.total)?;
    Ok(StepOutput {
        values: loss.values(&tape),
        grads: nodes.ids.iter().map(|&id| g.get(&tape, id)).collect(),
    })
}

struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADAM_WEIGHT_DECAY: f64 = 1e-4;

fn apply_update(
    params: &mut ModelParams,
    grads: &[Tensor],
    lr: f64,
    optimizer: Optimizer,
    adam: &mut AdamState,
) -> Result<()> {
    match optimizer {
        Optimizer::Sgd => {
            for ((_, p), g) in params.entries_mut().iter_mut().zip(grads) {
                p.add_scaled(g, -lr)?;
            }
        }
        Optimizer::Adamw => {
            adam.step += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(adam.step);
            let c2 = 1.0 - ADAM_BETA2.powi(adam.step);
            for (i, (_, p)) in params.entries_mut().iter_mut().enumerate() {
                let g = grads[i].data();
                let m = adam.m[i].data_mut();
                let v = adam.v[i].data_mut();
                for (k, w) in p.data_mut().iter_mut().enumerate() {
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                    let step = (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                    *w -= lr * (step + ADAM_WEIGHT_DECAY * *w);
                }
            }
        }
    }
    Ok(())
}

/// Start from `global`, run `E` epochs of minibatch descent on the local
/// objective and leave the result in `state.params`. With a proximal weight
/// in the client coefficients, `global` is also the proximal anchor.
pub fn local_train(
    state: &mut ClientState,
    config: &ModelConfig,
    global: &ModelParams,
    lr: f64,
    seed: u64,
) -> Result<LocalReport> {
    state.spec.validate(config.patch)?;
    if !state.params.same_layout(global) {
        return Err(shape_mismatch("global parameters do not match the client model"));
    }
    state.params = global.clone();
    let anchor = (state.spec.coeffs.mu_prox > 0.0).then_some(global);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..state.spec.samples.len()).collect();
    let mut adam = AdamState {
        m: global.entries().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        v: global.entries().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        step: 0,
    };
    let mut trace = Vec::new();
    let mut last = (LossValues::default(), 0.0, 0usize);
    for epoch in 0..state.spec.epochs {
        order.shuffle(&mut rng);
        last = (LossValues::default(), 0.0, 0);
        for batch in order.chunks(state.spec.batch_size) {
            let out = batch_objective(state, config, batch, anchor)?;
            let gn = out.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            if !out.values.total.is_finite() || !gn.is_finite() {
                return Err(Error::Numeric(format!(
                    "client {}: non-finite loss or gradient in epoch {epoch}",
                    state.spec.client_id
                )));
            }
            apply_update(&mut state.params, &out.grads, lr, state.spec.optimizer, &mut adam)?;
            if !state.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "client {}: parameters diverged in epoch {epoch}",
                    state.spec.client_id
                )));
            }
            let v = out.values;
            last.0.total += v.total;
            last.0.task += v.task;
            last.0.kd += v.kd;
            last.0.reg += v.reg;
            last.0.prox += v.prox;
            last.1 += gn;
            last.2 += 1;
            trace.push(v);
        }
    }
    let n = last.2 as f64;
    Ok(LocalReport {
        trace,
        last_epoch: LossValues {
            total: last.0.total / n,
            task: last.0.task / n,
            kd: last.0.kd / n,
            reg: last.0.reg / n,
            prox: last.0.prox / n,
        },
        grad_norm: last.1 / n,
    })
}

/// Unweighted elementwise mean. Each coordinate is averaged over its sorted
/// client values as `min + Σ (v − min) / N`, so the result does not depend
/// on client order and equal inputs are returned unchanged.
pub fn aggregate_fedavg(client_params: &[&ModelParams]) -> Result<ModelParams> {
    let first = client_params
        .first()
        .ok_or_else(|| invalid("aggregation needs at least one client"))?;
    if client_params.iter().any(|p| !p.same_layout(first)) {
        return Err(shape_mismatch("client parameters differ in layout"));
    }
    let n = client_params.len() as f64;
    let mut out = (*first).clone();
    let mut vals = Vec::with_capacity(client_params.len());
    for (i, (_, t)) in out.entries_mut().iter_mut().enumerate() {
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            vals.clear();
            vals.extend(client_params.iter().map(|p| p.entries()[i].1.data()[k]));
            vals.sort_by(f64::total_cmp);
            let lo = vals[0];
            let mut s = 0.0;
            for x in &vals {
                s += x - lo;
            }
            *v = lo + s / n;
        }
    }
    Ok(out)
}

/// Per-client row of a [`RoundLog`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientRound {
    pub client_id: usize,
    pub loss: LossValues,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<ClientRound>,
    pub global_norm: f64,
    pub eval: Vec<EvalResult>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub rounds: usize,
    pub init_seed: u64,
    pub aggregator: Aggregator,
    pub schedule: Schedule,
    /// Worker threads; results do not depend on it.
    pub workers: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub params: ModelParams,
    pub logs: Vec<RoundLog>,
}

/// Seed of client `client_id` in round `round`.
pub fn client_seed(init_seed: u64, round: usize, client_id: usize) -> u64 {
    let mut z = init_seed
        ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (client_id as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `T` rounds of broadcast, local training and aggregation, starting from
/// `ModelParams::init(config, init_seed)`.
pub fn run_rounds(specs: Vec<ClientSpec>, config: &ModelConfig, opts: &RunOptions) -> Result<RunOutput> {
    run_rounds_with(specs, config, opts, |_, _| Ok(Vec::new()))
}

/// [`run_rounds`] with `eval(round, global)` called after each aggregation.
pub fn run_rounds_with(
    specs: Vec<ClientSpec>,
    config: &ModelConfig,
    opts: &RunOptions,
    mut eval: impl FnMut(usize, &ModelParams) -> Result<Vec<EvalResult>> + Send,
) -> Result<RunOutput> {
    config.validate()?;
    if opts.rounds == 0 {
        return Err(invalid("rounds must be at least 1"));
    }
    if specs.is_empty() {
        return Err(invalid("at least one client is required"));
    }
    let mut ids: Vec<usize> = specs.iter().map(|s| s.client_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("client ids must be unique"));
    }
    let mu = match opts.aggregator {
        Aggregator::Fedavg => 0.0,
        Aggregator::Fedprox { mu } => {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(invalid(format!("proximal weight must be non-negative, got {mu}")));
            }
            mu
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;

    let mut global = ModelParams::init(config, opts.init_seed);
    let mut states = specs
        .into_iter()
        .map(|mut s| {
            s.coeffs.mu_prox = mu;
            ClientState::new(s, config, global.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    states.sort_by_key(|s| s.spec.client_id);

    let mut logs = Vec::with_capacity(opts.rounds);
    for round in 0..opts.rounds {
        let broadcast = &global;
        let reports: Vec<LocalReport> = pool.install(|| {
            states
                .par_iter_mut()
                .map(|st| {
                    let lr = opts.schedule.rate(st.spec.lr, round, opts.rounds);
                    let seed = client_seed(opts.init_seed, round, st.spec.client_id);
                    local_train(st, config, broadcast, lr, seed)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let locals: Vec<&ModelParams> = states.iter().map(|s| &s.params).collect();
        global = aggregate_fedavg(&locals)?;
        if !global.all_finite() {
            return Err(Error::Numeric(format!("global model diverged in round {round}")));
        }
        let results = pool.install(|| eval(round, &global))?;
        logs.push(RoundLog {
            round,
            clients: states
                .iter()
                .zip(&reports)
                .map(|(s, r)| ClientRound {
                    client_id: s.spec.client_id,
                    loss: r.last_epoch,
                    grad_norm: r.grad_norm,
                })
                .collect(),
            global_norm: global.sq_norm().sqrt(),
            eval: results,
        });
    }
    Ok(RunOutput { params: global, logs })
}

/// Write round logs as CSV rows (no header comment).
pub fn write_round_logs(out: &mut impl Write, logs: &[RoundLog]) -> Result<()> {
    writeln!(out, "round,client_id,loss_task,loss_kd,loss_reg,loss_prox,grad_norm")?;
    for log in logs {
        for c in &log.clients {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                log.round,
                c.client_id,
                crate::io::fmt_float(c.loss.task),
                crate::io::fmt_float(c.loss.kd),
                crate::io::fmt_float(c.loss.reg),
                crate::io::fmt_float(c.loss.prox),
                crate::io::fmt_float(c.grad_norm)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_dataset;

    fn small_config() -> ModelConfig {
        ModelConfig {
            width: 4,
            blocks: 1,
            keypoints: 2,
            ..ModelConfig::default()
        }
    }

    fn spec(id: usize, n: usize, seed: u64, levels: Vec<Resolution>, coeffs: LossCoeffs) -> ClientSpec {
        let native = levels[0];
        ClientSpec {
            client_id: id,
            samples: gen_dataset(n, native.h, native.w, 2, seed).unwrap(),
            levels,
            coeffs,
            epochs: 1,
            batch_size: 4,
            lr: 0.05,
            optimizer: Optimizer::Sgd,
        }
    }

    fn r(h: usize, w: usize) -> Resolution {
        Resolution::new(h, w)
    }

    #[test]
    fn zero_epochs_rejected() {
        let c = small_config();
        let mut s = spec(0, 4, 1, vec![r(16, 12)], LossCoeffs::default());
        s.epochs = 0;
        let p = ModelParams::init(&c, 0);
        assert!(ClientState::new(s, &c, p).is_err());
    }

    #[test]
    fn empty_shard_rejected() {
        let c = small_config();
        let mut s = spec(0, 4, 1, vec![r(16, 12)], LossCoeffs::default());
        s.samples.clear();
        assert!(ClientState::new(s, &c, ModelParams::init(&c, 0)).is_err());
    }

    #[test]
    fn plain_training_descends() {
        let c = small_config();
        let coeffs = LossCoeffs {
            alpha: 0.0,
            gamma: 0.0,
            mu_prox: 0.0,
        };
        let mut s = spec(0, 8, 2, vec![r(16, 12)], coeffs);
        s.epochs = 20;
        s.lr = 0.1;
        let init = ModelParams::init(&c, 3);
        let mut st = ClientState::new(s, &c, init.clone()).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let before = batch_objective(&st, &c, &all, None).unwrap().values.total;
        local_train(&mut st, &c, &init, 0.1, 4).unwrap();
        let after = batch_objective(&st, &c, &all, None).unwrap().values.total;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn one_step_matches_hand_assembled_gradient() {
        let c = small_config();
        let coeffs = LossCoeffs {
            alpha: 1.0,
            gamma: 0.01,
            mu_prox: 0.0,
        };
        let mut s = spec(0, 4, 5, vec![r(32, 24), r(16, 12)], coeffs);
        s.batch_size = 4;
        let init = ModelParams::init(&c, 6);
        let mut st = ClientState::new(s, &c, init.clone()).unwrap();

        // Oracle: each loss term on its own tape, gradients summed by hand.
        let imgs = |lvl: usize| -> Tensor {
            let v: Vec<&Tensor> = st.pyramids.iter().map(|p| &p.levels[lvl]).collect();
            stack(&v).unwrap()
        };
        let targets: Vec<&Tensor> = st.spec.samples.iter().map(|s| &s.target).collect();
        let target = stack(&targets).unwrap();

        let mut t1 = Tape::new();
        let n1 = attach_params(&mut t1, &init, &c).unwrap();
        let x0 = t1.constant(imgs(0));
        let y0 = forward(&mut t1, &n1, &c, x0).unwrap().heatmap;
        let tt = t1.constant(target);
        let task = task_loss(&mut t1, y0, tt).unwrap();
        let g_task = t1.backward(task).unwrap();

        let mut t2 = Tape::new();
        let n2 = attach_params(&mut t2, &init, &c).unwrap();
        let x0 = t2.constant(imgs(0));
        let x1 = t2.constant(imgs(1));
        let y0 = forward(&mut t2, &n2, &c, x0).unwrap().heatmap;
        let y1 = forward(&mut t2, &n2, &c, x1).unwrap().heatmap;
        let kd = mrkd_loss(&mut t2, &[y0, y1], &st.ups).unwrap();
        let g_kd = t2.backward(kd).unwrap();

        let mut want = init.clone();
        for (i, (_, p)) in want.entries_mut().iter_mut().enumerate() {
            let gt = g_task.get(&t1, n1.ids[i]);
            let gk = g_kd.get(&t2, n2.ids[i]);
            let orig = p.clone();
            for (k, v) in p.data_mut().iter_mut().enumerate() {
                let g = gt.data()[k] + 1.0 * gk.data()[k] + 0.01 * orig.data()[k];
                *v -= 0.05 * g;
            }
        }
        local_train(&mut st, &c, &init, 0.05, 7).unwrap();
        for ((_, a), (_, b)) in st.params.entries().iter().zip(want.entries()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn lowest_level_client_has_no_distillation_gradient() {
        let c = small_config();
        let s = spec(0, 4, 8, vec![r(16, 12)], LossCoeffs::default());
        let init = ModelParams::init(&c, 1);
        let st = ClientState::new(s, &c, init).unwrap();
        let out = batch_objective(&st, &c, &[0, 1, 2, 3], None).unwrap();
        assert_eq!(out.values.kd, 0.0);
    }

    #[test]
    fn fedavg_cases() {
        let c = small_config();
        let a = ModelParams::init(&c, 1);
        assert_eq!(aggregate_fedavg(&[&a, &a, &a]).unwrap(), a);
        let z = ModelParams::zeros(&c);
        let two = z.with_flat(&vec![2.0; c.param_count()]).unwrap();
        let m = aggregate_fedavg(&[&z, &two]).unwrap();
        assert!(m.flatten().iter().all(|&v| v == 1.0));
        let other = ModelParams::init(&ModelConfig::default(), 1);
        assert!(aggregate_fedavg(&[&a, &other]).is_err());
        assert!(aggregate_fedavg(&[]).is_err());
    }

    #[test]
    fn fedavg_matches_scalar_loop_and_is_permutation_invariant() {
        let c = small_config();
        let ps: Vec<ModelParams> = (0..3).map(|s| ModelParams::init(&c, 10 + s)).collect();
        let got = aggregate_fedavg(&[&ps[0], &ps[1], &ps[2]]).unwrap().flatten();
        let flats: Vec<Vec<f64>> = ps.iter().map(ModelParams::flatten).collect();
        for (k, g) in got.iter().enumerate() {
            let want = (flats[0][k] + flats[1][k] + flats[2][k]) / 3.0;
            assert!((g - want).abs() <= 1e-12);
        }
        let perm = aggregate_fedavg(&[&ps[2], &ps[0], &ps[1]]).unwrap().flatten();
        assert_eq!(got, perm);
    }

    fn opts(rounds: usize, workers: usize, aggregator: Aggregator) -> RunOptions {
        RunOptions {
            rounds,
            init_seed: 11,
            aggregator,
            schedule: Schedule::Fixed,
            workers,
        }
    }

    #[test]
    fn single_round_single_client_equals_local_train() {
        let c = small_config();
        let s = spec(3, 6, 9, vec![r(32, 24), r(16, 12)], LossCoeffs::default());
        let out = run_rounds(vec![s.clone()], &c, &opts(1, 1, Aggregator::Fedavg)).unwrap();
        let init = ModelParams::init(&c, 11);
        let mut st = ClientState::new(s, &c, init.clone()).unwrap();
        local_train(&mut st, &c, &init, 0.05, client_seed(11, 0, 3)).unwrap();
        assert_eq!(out.params, st.params);
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.logs[0].clients.len(), 1);
    }

    #[test]
    fn identical_clients_average_to_a_single_client() {
        let c = small_config();
        let s = spec(0, 6, 9, vec![r(16, 12)], LossCoeffs::default());
        let init = ModelParams::init(&c, 11);
        let mut st = ClientState::new(s.clone(), &c, init.clone()).unwrap();
        local_train(&mut st, &c, &init, 0.05, 99).unwrap();
        let mut st2 = ClientState::new(s, &c, init.clone()).unwrap();
        local_train(&mut st2, &c, &init, 0.05, 99).unwrap();
        let m = aggregate_fedavg(&[&st.params, &st2.params]).unwrap();
        assert_eq!(m, st.params);
    }

    fn mixed_specs() -> Vec<ClientSpec> {
        vec![
            spec(0, 8, 1, vec![r(32, 24), r(16, 12)], LossCoeffs::default()),
            spec(1, 8, 2, vec![r(16, 12)], LossCoeffs::default()),
            spec(2, 8, 3, vec![r(32, 24), r(16, 12)], LossCoeffs::default()),
        ]
    }

    #[test]
    fn serial_and_parallel_runs_are_bitwise_equal() {
        let c = small_config();
        let a = run_rounds(mixed_specs(), &c, &opts(2, 1, Aggregator::Fedavg)).unwrap();
        let b = run_rounds(mixed_specs(), &c, &opts(2, 3, Aggregator::Fedavg)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.logs, b.logs);
        let mut rev = mixed_specs();
        rev.reverse();
        let d = run_rounds(rev, &c, &opts(2, 2, Aggregator::Fedavg)).unwrap();
        assert_eq!(a.params, d.params);
    }

    #[test]
    fn fedprox_zero_mu_is_fedavg() {
        let c = small_config();
        let a = run_rounds(mixed_specs(), &c, &opts(2, 1, Aggregator::Fedavg)).unwrap();
        let b = run_rounds(mixed_specs(), &c, &opts(2, 1, Aggregator::Fedprox { mu: 0.0 })).unwrap();
        assert_eq!(a.params, b.params);
        let p = run_rounds(mixed_specs(), &c, &opts(2, 1, Aggregator::Fedprox { mu: 0.5 })).unwrap();
        assert_ne!(a.params, p.params);
        assert!(p.logs[1].clients.iter().all(|c| c.loss.prox > 0.0));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let c = small_config();
        let mut s = mixed_specs();
        s[1].client_id = 0;
        assert!(run_rounds(s, &c, &opts(1, 1, Aggregator::Fedavg)).is_err());
        assert!(run_rounds(mixed_specs(), &c, &opts(0, 1, Aggregator::Fedavg)).is_err());
    }

    #[test]
    fn divergence_is_numeric_error() {
        let c = small_config();
        let mut s = mixed_specs();
        for x in &mut s {
            x.lr = 1e6;
        }
        match run_rounds(s, &c, &opts(3, 1, Aggregator::Fedavg)) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(Schedule::Cosine.rate(0.2, 0, 10), 0.2);
        assert!((Schedule::Cosine.rate(0.2, 5, 10) - 0.1).abs() < 1e-15);
        assert_eq!(Schedule::Fixed.rate(0.2, 7, 10), 0.2);
    }
}
