//! Two-phase training: the data path under sampled gating, then a gate
//! policy or a utilization controller against the frozen data path.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::controller::{epsilon_schedule, reward, ControllerPolicy, Environment, RewardConfig, SelectMode};
use crate::error::{Error, Result};
use crate::gating::{complexity_of, sample_u, GateVector, USampling, Utilization};
use crate::objectives::{
    logistic_noise, sample_bernoulli_gates, BernoulliGatePolicy, PenaltyConfig, CONCRETE_TEMPERATURE,
};
use crate::rng::derived;
use crate::tensor::{kernels, Graph, OptimAlgo, Optimizer, Tensor, Var};
use crate::tmodule::TNetwork;

/// Decay of the running-mean baseline in REINFORCE gate training.
const BASELINE_DECAY: f64 = 0.9;

/// Labeled examples stored as one `[n, ...]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    x: Tensor,
    labels: Vec<usize>,
}

impl Samples {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self> {
        if x.shape()[0] != labels.len() {
            return Err(Error::DataLength {
                expected: x.shape()[0],
                got: labels.len(),
            });
        }
        Ok(Samples { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Gathers the given rows.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = idx.len();
        (
            Tensor::new(shape, data).expect("consistent batch"),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        let (x, labels) = self.batch(idx);
        Samples { x, labels }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateLearner {
    Reinforce,
    Concrete,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Data-path epochs.
    pub epochs: usize,
    /// Gate-policy or controller epochs.
    pub epochs_phase2: usize,
    pub lr_datapath: f64,
    pub lr_phase2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub u_sampling: USampling,
    pub penalty: PenaltyConfig,
    pub gate_learner: GateLearner,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            epochs_phase2: 10,
            lr_datapath: 1e-3,
            lr_phase2: 1e-3,
            batch_size: 32,
            seed: 0,
            u_sampling: USampling::Uniform,
            penalty: PenaltyConfig::default(),
            gate_learner: GateLearner::Reinforce,
            reward: RewardConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr_datapath > 0.0 && self.lr_phase2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if let USampling::Incremental { period: 0, .. } = self.u_sampling {
            return bad("incremental period must be >= 1");
        }
        self.penalty.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_u: f64,
}

/// One logged gate-policy epoch; `total = task_loss + lambda * penalty`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub total: f64,
    pub mean_complexity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerRecord {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_u: f64,
    pub accuracy: f64,
    pub epsilon: f64,
}

fn batches(n: usize, size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(|c| c.to_vec()).collect()
}

fn collect_grads(g: &Graph, params: &[Var]) -> Vec<Vec<f32>> {
    params
        .iter()
        .map(|&p| {
            g.grad(p)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(p).numel()])
        })
        .collect()
}

/// Per-row cross-entropy of `logits` against `labels`.
fn row_losses(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .zip(labels)
        .map(|(row, &y)| {
            let mut r = row.to_vec();
            kernels::softmax_in_place(&mut r);
            -(r[y].max(f32::MIN_POSITIVE) as f64).ln()
        })
        .collect()
}

/// Phase 1: cross-entropy training with a fresh `u` and gate draw per
/// minibatch. Zero epochs leave the network untouched.
pub fn train_datapath(net: &mut TNetwork, data: &Samples, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training data is empty".into()));
    }
    let mut rng = derived(cfg.seed, 1);
    let mut opt = Optimizer::new(OptimAlgo::adam(), cfg.lr_datapath)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut right, mut u_sum, mut steps) = (0.0, 0usize, 0.0, 0usize);
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let u = sample_u(cfg.u_sampling, epoch, &mut rng);
            let gates = net.draw_gates(u, &mut rng)?;
            let (x, y) = data.batch(&idx);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let gv = net.gate_constants(&mut g, &gates, idx.len());
            let (logits, params) = net.forward_graph(&mut g, xv, &gv, true)?;
            let loss = g.softmax_cross_entropy(logits, &y, None)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            right += g
                .value(logits)
                .argmax_rows()
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            g.backward(loss)?;
            let grads = collect_grads(&g, &params);
            opt.step(&mut net.params_mut(), &grads)
                .map_err(|_| Error::Diverged { epoch })?;
            loss_sum += lv;
            u_sum += u.value();
            steps += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / steps as f64,
            accuracy: right as f64 / data.len() as f64,
            mean_u: u_sum / steps as f64,
        };
        log::info!(
            "datapath epoch {epoch}: loss {:.4} acc {:.4} mean u {:.3}",
            rec.loss,
            rec.accuracy,
            rec.mean_u
        );
        history.push(rec);
    }
    Ok(history)
}

/// Hard gates from the policy for every row of `x` (Bernoulli draws with the
/// minimum-activity rule), weighted by component cost.
pub fn policy_gates(
    net: &TNetwork,
    policy: &BernoulliGatePolicy,
    x: &Tensor,
    u: Utilization,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<GateVector>>> {
    let probs = policy.probs(x, u)?;
    policy_gates_from_probs(net, policy, &probs, &net.module_weights(), rng)
}

/// Per-example hard gates as one `[batch, n_i]` constant per module.
fn per_example_gate_vars(g: &mut Graph, gates: &[Vec<GateVector>], sizes: &[usize]) -> Vec<Var> {
    let b = gates.len();
    sizes
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            let data = gates.iter().flat_map(|row| row[m].as_f32()).collect();
            g.constant(Tensor::new(vec![b, n], data).expect("gate shape"))
        })
        .collect()
}

/// Masked forward with a different hard gate pattern per example.
pub fn forward_per_example(net: &TNetwork, x: &Tensor, gates: &[Vec<GateVector>]) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = per_example_gate_vars(&mut g, gates, &net.module_sizes());
    let (y, _) = net.forward_graph(&mut g, xv, &gv, false)?;
    Ok(g.value(y).clone())
}

/// Phase 2 for learned gates: optimizes the policy on `L + λ·C` with the
/// data path frozen, drawing one `u` per minibatch.
pub fn train_gate_policy(
    net: &TNetwork,
    policy: &mut BernoulliGatePolicy,
    data: &Samples,
    cfg: &TrainConfig,
) -> Result<Vec<GateRecord>> {
    cfg.validate()?;
    if policy.sizes() != net.module_sizes() {
        return Err(Error::InvalidConfig(
            "gate policy does not match the network's modules".into(),
        ));
    }
    let mut rng = derived(cfg.seed, 2);
    let mut opt = Optimizer::new(OptimAlgo::adam(), cfg.lr_phase2)?;
    let sizes = net.module_sizes();
    let weights = net.module_weights();
    let flat_w: Vec<f64> = weights.iter().flatten().copied().collect();
    let w_total: f64 = flat_w.iter().sum();
    let mut baseline: Option<f64> = None;
    let mut history = Vec::with_capacity(cfg.epochs_phase2);
    for epoch in 0..cfg.epochs_phase2 {
        let (mut task_sum, mut pen_sum, mut c_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let u = sample_u(cfg.u_sampling, epoch, &mut rng);
            let (x, y) = data.batch(&idx);
            let b = idx.len();
            let mut g = Graph::new();
            let (z, params) = policy.logits_graph(&mut g, &x, u, true)?;
            let (task, pen, c_mean) = match cfg.gate_learner {
                GateLearner::Reinforce => {
                    let mut probs = g.value(z).clone();
                    probs.data_mut().iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
                    let gates = policy_gates_from_probs(net, policy, &probs, &weights, &mut rng)?;
                    let logits = forward_per_example(net, &x, &gates)?;
                    let ce = row_losses(&logits, &y);
                    let cs: Vec<f64> = gates.iter().map(|row| complexity_of(row)).collect::<Result<_>>()?;
                    let pens: Vec<f64> = cs.iter().map(|&c| cfg.penalty.penalty(c, u)).collect();
                    let j: Vec<f64> = ce.iter().zip(&pens).map(|(l, p)| l + cfg.penalty.lambda * p).collect();
                    let mean_j = j.iter().sum::<f64>() / b as f64;
                    let base = *baseline.get_or_insert(mean_j);
                    let row_w: Vec<f32> = j.iter().map(|&ji| (-(ji - base) / b as f64) as f32).collect();
                    let targets: Vec<f32> = gates
                        .iter()
                        .flat_map(|row| row.iter().flat_map(|gv| gv.as_f32()))
                        .collect();
                    let surrogate = g.bce_with_logits(z, &targets, &row_w)?;
                    g.backward(surrogate)?;
                    baseline = Some(BASELINE_DECAY * base + (1.0 - BASELINE_DECAY) * mean_j);
                    let mean = |v: &[f64]| v.iter().sum::<f64>() / b as f64;
                    (mean(&ce), mean(&pens), mean(&cs))
                }
                GateLearner::Concrete => {
                    let noise = Tensor::from_fn(g.shape(z), |_| logistic_noise(&mut rng) as f32);
                    let nv = g.constant(noise);
                    let s = g.add(z, nv)?;
                    let s = g.scale(s, (1.0 / CONCRETE_TEMPERATURE) as f32);
                    let soft = g.sigmoid(s);
                    let mut gate_vars = Vec::with_capacity(sizes.len());
                    let mut start = 0;
                    for &n in &sizes {
                        gate_vars.push(g.slice(soft, 1, start, start + n)?);
                        start += n;
                    }
                    let xv = g.constant(x);
                    let (logits, _) = net.forward_graph(&mut g, xv, &gate_vars, false)?;
                    let ce = g.softmax_cross_entropy(logits, &y, None)?;
                    let wn = g.constant(Tensor::new(
                        vec![flat_w.len(), 1],
                        flat_w.iter().map(|w| (w / w_total) as f32).collect(),
                    )?);
                    let c = g.matmul(soft, wn)?;
                    let pen = cfg.penalty.penalty_graph(&mut g, c, u);
                    let weighted = g.scale(pen, cfg.penalty.lambda as f32);
                    let total = g.add(ce, weighted)?;
                    g.backward(total)?;
                    let c_mean = g.value(c).data().iter().map(|&v| v as f64).sum::<f64>() / b as f64;
                    (g.value(ce).data()[0] as f64, g.value(pen).data()[0] as f64, c_mean)
                }
            };
            if !(task.is_finite() && pen.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            let grads = collect_grads(&g, &params);
            opt.step(&mut policy.net.params_mut(), &grads)
                .map_err(|_| Error::Diverged { epoch })?;
            task_sum += task;
            pen_sum += pen;
            c_sum += c_mean;
            steps += 1;
        }
        let (task_loss, penalty) = (task_sum / steps as f64, pen_sum / steps as f64);
        let rec = GateRecord {
            epoch,
            task_loss,
            penalty,
            lambda: cfg.penalty.lambda,
            total: task_loss + cfg.penalty.lambda * penalty,
            mean_complexity: c_sum / steps as f64,
        };
        log::info!(
            "gate epoch {epoch}: task {:.4} penalty {:.4} complexity {:.3}",
            rec.task_loss,
            rec.penalty,
            rec.mean_complexity
        );
        history.push(rec);
    }
    Ok(history)
}

fn policy_gates_from_probs(
    net: &TNetwork,
    policy: &BernoulliGatePolicy,
    probs: &Tensor,
    weights: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<Vec<Vec<GateVector>>> {
    let total: usize = policy.sizes().iter().sum();
    let mins: Vec<usize> = net.modules().iter().map(|m| m.min_active).collect();
    probs
        .data()
        .chunks(total)
        .map(|row| {
            sample_bernoulli_gates(&policy.split(row), &mins, rng)?
                .into_iter()
                .zip(weights)
                .map(|(g, w)| g.reweighted(w.clone()))
                .collect()
        })
        .collect()
}

/// Phase 2 for the controller against any environment: ε-greedy actions,
/// rewards from the environment, RMSprop policy-gradient steps. A small value
/// network fitted to the rewards is the per-input baseline. Actions that beat
/// it get the full advantage; worse ones are scaled by the capped ratio of
/// policy to behavior probability.
pub fn train_controller_env(
    policy: &mut ControllerPolicy,
    contexts: &Samples,
    env: &dyn Environment,
    cfg: &TrainConfig,
) -> Result<Vec<ControllerRecord>> {
    cfg.validate()?;
    if env.num_actions() != policy.actions.len() {
        return Err(Error::InvalidConfig(
            "environment and policy disagree on the action count".into(),
        ));
    }
    let mut rng = derived(cfg.seed, 3);
    let mut opt = Optimizer::new(OptimAlgo::rmsprop(), cfg.lr_phase2)?;
    let mut value = TNetwork::build(
        &crate::controller::controller_spec(policy.net.input_shape(), 1),
        &mut derived(cfg.seed, 5),
    )?;
    let mut value_opt = Optimizer::new(OptimAlgo::rmsprop(), cfg.lr_phase2)?;
    let per_epoch = contexts.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs_phase2;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs_phase2);
    for epoch in 0..cfg.epochs_phase2 {
        let (mut r_sum, mut u_sum, mut right, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for idx in batches(contexts.len(), cfg.batch_size, &mut rng) {
            policy.epsilon = epsilon_schedule(step, total_steps);
            let (x, _) = contexts.batch(&idx);
            let choices = policy.select(&x, SelectMode::EpsilonGreedy, &mut rng)?;
            let greedy = policy.scores(&x)?.argmax_rows();
            let k = policy.actions.len() as f64;
            let mut actions = Vec::with_capacity(idx.len());
            let mut rewards = Vec::with_capacity(idx.len());
            let mut ratios = Vec::with_capacity(idx.len());
            for ((&i, c), &best) in idx.iter().zip(&choices).zip(&greedy) {
                let o = env.outcome(i, c.action);
                let r = reward(o.correct, o.confidence, o.tr, &cfg.reward);
                let behavior = policy.epsilon / k + if c.action == best { 1.0 - policy.epsilon } else { 0.0 };
                actions.push(c.action);
                rewards.push(r);
                ratios.push(c.log_prob.exp() / behavior);
                r_sum += r;
                u_sum += c.u.value();
                right += o.correct as usize;
                seen += 1;
            }
            let v = fit_value(&mut value, &mut value_opt, &x, &rewards)?;
            // better-than-expected actions are imitated as sampled; worse ones are
            // importance-weighted, so rarely chosen actions are not pushed down further
            let advantages: Vec<f64> = rewards
                .iter()
                .zip(&v)
                .zip(&ratios)
                .map(|((r, v), w)| if r >= v { r - v } else { (r - v) * w.min(1.0) })
                .collect();
            policy.policy_gradient_step(&mut opt, &x, &actions, &advantages)?;
            step += 1;
        }
        let rec = ControllerRecord {
            epoch,
            mean_reward: r_sum / seen as f64,
            mean_u: u_sum / seen as f64,
            accuracy: right as f64 / seen as f64,
            epsilon: policy.epsilon,
        };
        log::info!(
            "controller epoch {epoch}: reward {:.4} mean u {:.3} acc {:.4} eps {:.3}",
            rec.mean_reward,
            rec.mean_u,
            rec.accuracy,
            rec.epsilon
        );
        history.push(rec);
    }
    Ok(history)
}

/// One regression step of the reward baseline; returns its predictions
/// from before the step.
fn fit_value(value: &mut TNetwork, opt: &mut Optimizer, x: &Tensor, rewards: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (pred, params) = value.forward_graph(&mut g, xv, &[], true)?;
    let before: Vec<f64> = g.value(pred).data().iter().map(|&v| v as f64).collect();
    let target = Tensor::new(vec![rewards.len(), 1], rewards.iter().map(|&r| -r as f32).collect())?;
    let t = g.constant(target);
    let diff = g.add(pred, t)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean(sq);
    g.backward(loss)?;
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|&p| {
            g.grad(p)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(p).numel()])
        })
        .collect();
    opt.step(&mut value.params_mut(), &grads)?;
    Ok(before)
}

/// Phase 2 for the controller against a frozen data path.
pub fn train_controller(
    net: &TNetwork,
    policy: &mut ControllerPolicy,
    data: &Samples,
    cfg: &TrainConfig,
) -> Result<Vec<ControllerRecord>> {
    let table = crate::controller::OutcomeTable::evaluate(
        net,
        data.x(),
        data.labels(),
        &policy.actions,
        256,
        &mut derived(cfg.seed, 4),
    )?;
    train_controller_env(policy, data, &table, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{controller_spec, ActionSet, Outcome};
    use crate::gating::Ordering;
    use crate::rng::seeded;
    use crate::tmodule::vgg_w;

    fn toy_data(n: usize, seed: u64) -> Samples {
        let mut rng = seeded(seed);
        let mut labels = Vec::with_capacity(n);
        let x = Tensor::from_fn(&[n, 1, 8, 8], |_| rng.gen_range(-0.1..0.1));
        let mut x = x;
        for i in 0..n {
            let y = i % 2;
            labels.push(y);
            let base = i * 64 + if y == 0 { 0 } else { 36 };
            for k in 0..4 {
                x.data_mut()[base + k] += 1.0;
            }
        }
        Samples::new(x, labels).unwrap()
    }

    #[test]
    fn zero_epochs_leave_net_unchanged() {
        let mut net: TNetwork = TNetwork::build(&vgg_w(&[1, 8, 8], 8, 4, 2, Ordering::Nested), &mut seeded(0)).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_datapath(&mut net, &toy_data(16, 0), &cfg).unwrap().is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let data = toy_data(128, 1);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            seed: 5,
            lr_datapath: 5e-3,
            u_sampling: USampling::Fixed(1.0),
            ..Default::default()
        };
        let run = || {
            let mut net: TNetwork =
                TNetwork::build(&vgg_w(&[1, 8, 8], 8, 4, 2, Ordering::Nested), &mut seeded(2)).unwrap();
            let h = train_datapath(&mut net, &data, &cfg).unwrap();
            (net, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha.last().unwrap().accuracy > 0.9, "{ha:?}");
    }

    #[test]
    fn incremental_schedule_reaches_full_u() {
        let data = toy_data(32, 1);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 32,
            u_sampling: USampling::Incremental {
                start: 0.1,
                step: 0.1,
                period: 2,
            },
            ..Default::default()
        };
        let mut net: TNetwork = TNetwork::build(&vgg_w(&[1, 8, 8], 8, 4, 2, Ordering::Nested), &mut seeded(2)).unwrap();
        let h = train_datapath(&mut net, &data, &cfg).unwrap();
        let us: Vec<f64> = h.iter().map(|r| r.mean_u).collect();
        let expected: Vec<f64> = (0..20).map(|e| ((e / 2) as f64 + 1.0) / 10.0).collect();
        for (a, b) in us.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_reject_label_mismatch() {
        assert!(Samples::new(Tensor::zeros(&[3, 2]), vec![0, 1]).is_err());
    }

    /// Action 2 (u = 0.3) is the only correct choice at low throttle.
    struct FixedBest;

    impl Environment for FixedBest {
        fn num_actions(&self) -> usize {
            10
        }

        fn outcome(&self, _sample: usize, action: usize) -> Outcome {
            Outcome {
                correct: action >= 2,
                confidence: 0.9,
                tr: (action + 1) as f64 / 10.0,
            }
        }
    }

    #[test]
    fn controller_converges_on_constructed_environment() {
        let contexts = toy_data(64, 3);
        let net = TNetwork::build(&controller_spec(&[1, 8, 8], 10), &mut seeded(1)).unwrap();
        let mut policy = ControllerPolicy::new(net, ActionSet::default()).unwrap();
        let cfg = TrainConfig {
            epochs_phase2: 60,
            batch_size: 16,
            lr_phase2: 1e-2,
            ..Default::default()
        };
        train_controller_env(&mut policy, &contexts, &FixedBest, &cfg).unwrap();
        let picks = policy.select(contexts.x(), SelectMode::Greedy, &mut seeded(0)).unwrap();
        assert!(
            picks.iter().all(|c| c.action == 2),
            "{:?}",
            picks.iter().map(|c| c.action).collect::<Vec<_>>()
        );
    }
}
