//! Utilization controller: a contextual bandit that picks one of `K`
//! utilization levels per input and is trained by policy gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gating::{GateVector, Utilization};
use crate::tensor::{Graph, Optimizer, Tensor};
use crate::tmodule::{ArchSpec, LayerSpec, TNetwork};

/// Utilization levels the controller chooses from.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSet {
    values: Vec<f64>,
}

impl ActionSet {
    /// `{k / K : k = 1..K}`.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::from_values((1..=k).map(|i| i as f64 / k as f64).collect())
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let increasing = values.windows(2).all(|w| w[0] < w[1]);
        if values.is_empty() || !increasing || values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "action values must be strictly increasing in (0, 1], got {values:?}"
            )));
        }
        Ok(ActionSet { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn utilization(&self, action: usize) -> Utilization {
        Utilization::saturating(self.values[action])
    }
}

impl Default for ActionSet {
    fn default() -> Self {
        ActionSet::uniform(10).expect("valid grid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            gamma1: 0.5,
            gamma2: 1.5,
        }
    }
}

/// `exp(1 - tr)·(1 - tr)` when correct, else `-(confidence + γ1)·(tr + γ2)`.
pub fn reward(correct: bool, confidence: f64, tr: f64, cfg: &RewardConfig) -> f64 {
    if correct {
        (1.0 - tr).exp() * (1.0 - tr)
    } else {
        -(confidence + cfg.gamma1) * (tr + cfg.gamma2)
    }
}

/// Active over full data-path multiply-accumulates for the realized gates.
pub fn throttle_ratio(net: &TNetwork, gates: &[GateVector]) -> Result<f64> {
    Ok(net.mac_count(gates, false)?.ratio())
}

/// Linear decay from 0.9 to 0.05 over the first half of training.
pub fn epsilon_schedule(step: usize, total_steps: usize) -> f64 {
    let (start, end) = (0.9, 0.05);
    let half = (total_steps / 2).max(1);
    if step >= half {
        end
    } else {
        start + (end - start) * step as f64 / half as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    EpsilonGreedy,
    Greedy,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Choice {
    pub action: usize,
    pub u: Utilization,
    pub log_prob: f64,
}

/// Three narrow convolutions and two dense layers producing `k` action scores.
pub fn controller_spec(input: &[usize], k: usize) -> ArchSpec {
    let conv = |out| LayerSpec::Conv {
        out,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let pool = || LayerSpec::MaxPool { size: 2, stride: 2 };
    ArchSpec {
        input: input.to_vec(),
        layers: vec![
            conv(2),
            LayerSpec::Relu,
            pool(),
            conv(2),
            LayerSpec::Relu,
            pool(),
            conv(4),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 8 },
            LayerSpec::Relu,
            LayerSpec::Dense { out: k },
        ],
    }
}

/// Policy network over the action set with an exploration rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerPolicy {
    pub net: TNetwork,
    pub actions: ActionSet,
    pub epsilon: f64,
}

impl ControllerPolicy {
    pub fn new(net: TNetwork, actions: ActionSet) -> Result<Self> {
        if net.num_classes() != actions.len() || !net.modules().is_empty() {
            return Err(Error::InvalidConfig(format!(
                "controller network must be ungated with {} outputs",
                actions.len()
            )));
        }
        Ok(ControllerPolicy {
            net,
            actions,
            epsilon: 0.9,
        })
    }

    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x, &[])
    }

    /// Action probabilities `[batch, K]`.
    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.scores(x)?.softmax_rows())
    }

    /// One action per row of `x`. Greedy ties go to the lowest utilization.
    pub fn select(&self, x: &Tensor, mode: SelectMode, rng: &mut impl Rng) -> Result<Vec<Choice>> {
        let probs = self.probs(x)?;
        let k = self.actions.len();
        let greedy = self.scores(x)?.argmax_rows();
        Ok(probs
            .data()
            .chunks(k)
            .zip(greedy)
            .map(|(p, best)| {
                let action = match mode {
                    SelectMode::Greedy => best,
                    SelectMode::EpsilonGreedy => {
                        if rng.gen::<f64>() < self.epsilon {
                            rng.gen_range(0..k)
                        } else {
                            best
                        }
                    }
                    SelectMode::Sample => {
                        let r: f32 = rng.gen();
                        let mut acc = 0.0;
                        p.iter()
                            .position(|&pi| {
                                acc += pi;
                                r < acc
                            })
                            .unwrap_or(k - 1)
                    }
                };
                Choice {
                    action,
                    u: self.actions.utilization(action),
                    log_prob: (p[action].max(f32::MIN_POSITIVE) as f64).ln(),
                }
            })
            .collect())
    }

    /// Ascends `mean_i r_i·∇log π(a_i | s_i)`. Samples with a non-finite
    /// reward are dropped; returns how many were dropped.
    pub fn policy_gradient_step(
        &mut self,
        opt: &mut Optimizer,
        x: &Tensor,
        actions: &[usize],
        rewards: &[f64],
    ) -> Result<usize> {
        let keep: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i].is_finite()).collect();
        let dropped = rewards.len() - keep.len();
        if dropped > 0 {
            log::warn!("policy gradient step: dropped {dropped} samples with non-finite reward");
        }
        if keep.is_empty() {
            return Ok(dropped);
        }
        let d = x.numel() / x.shape()[0];
        let mut shape = x.shape().to_vec();
        shape[0] = keep.len();
        let data: Vec<f32> = keep
            .iter()
            .flat_map(|&i| x.data()[i * d..(i + 1) * d].iter().copied())
            .collect();
        let xs = Tensor::new(shape, data)?;
        let acts: Vec<usize> = keep.iter().map(|&i| actions[i]).collect();
        let rs: Vec<f32> = keep.iter().map(|&i| rewards[i] as f32).collect();
        let mut g = Graph::new();
        let xv = g.constant(xs);
        let (scores, params) = self.net.forward_graph(&mut g, xv, &[], true)?;
        // minimizing mean r·(-log π) ascends the policy gradient
        let loss = g.softmax_cross_entropy(scores, &acts, Some(&rs))?;
        g.backward(loss)?;
        let grads: Vec<Vec<f32>> = params
            .iter()
            .map(|&p| {
                g.grad(p)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(p).numel()])
            })
            .collect();
        opt.step(&mut self.net.params_mut(), &grads)?;
        Ok(dropped)
    }
}

/// Result of running the frozen network on one input at one action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub correct: bool,
    pub confidence: f64,
    pub tr: f64,
}

/// What the controller is trained against.
pub trait Environment {
    fn num_actions(&self) -> usize;
    fn outcome(&self, sample: usize, action: usize) -> Outcome;
}

/// Outcomes of a deterministic frozen network for every (input, action)
/// pair, evaluated once up front.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeTable {
    correct: Vec<Vec<bool>>,
    confidence: Vec<Vec<f64>>,
    tr: Vec<f64>,
}

impl OutcomeTable {
    pub fn new(correct: Vec<Vec<bool>>, confidence: Vec<Vec<f64>>, tr: Vec<f64>) -> Result<Self> {
        let k = tr.len();
        if correct.len() != confidence.len()
            || correct.iter().any(|r| r.len() != k)
            || confidence.iter().any(|r| r.len() != k)
        {
            return Err(Error::InvalidConfig(
                "outcome table rows must have one entry per action".into(),
            ));
        }
        Ok(OutcomeTable {
            correct,
            confidence,
            tr,
        })
    }

    /// Evaluates `net` on every input at every action. Gates are drawn with
    /// `rng`, so the table is exact only for deterministic (nested) gating.
    pub fn evaluate(
        net: &TNetwork,
        x: &Tensor,
        labels: &[usize],
        actions: &ActionSet,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = labels.len();
        let d = x.numel() / n.max(1);
        let mut correct = vec![Vec::with_capacity(actions.len()); n];
        let mut confidence = vec![Vec::with_capacity(actions.len()); n];
        let mut tr = Vec::with_capacity(actions.len());
        for a in 0..actions.len() {
            let gates = net.draw_gates(actions.utilization(a), rng)?;
            tr.push(throttle_ratio(net, &gates)?);
            for start in (0..n).step_by(batch.max(1)) {
                let end = (start + batch.max(1)).min(n);
                let mut shape = x.shape().to_vec();
                shape[0] = end - start;
                let xb = Tensor::new(shape, x.data()[start * d..end * d].to_vec())?;
                let logits = net.forward(&xb, &gates)?;
                let pred = logits.argmax_rows();
                let conf = crate::tmodule::confidences(&logits);
                for i in start..end {
                    correct[i].push(pred[i - start] == labels[i]);
                    confidence[i].push(conf[i - start]);
                }
            }
        }
        Ok(OutcomeTable {
            correct,
            confidence,
            tr,
        })
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    pub fn correctness(&self) -> &[Vec<bool>] {
        &self.correct
    }

    pub fn throttle_ratios(&self) -> &[f64] {
        &self.tr
    }
}

impl Environment for OutcomeTable {
    fn num_actions(&self) -> usize {
        self.tr.len()
    }

    fn outcome(&self, sample: usize, action: usize) -> Outcome {
        Outcome {
            correct: self.correct[sample][action],
            confidence: self.confidence[sample][action],
            tr: self.tr[action],
        }
    }
}

/// Ideal per-input controller: the smallest `u` that classifies correctly.
/// Inputs wrong at every level count as errors charged the smallest `u`.
/// Returns (accuracy, total utilization).
pub fn utilization_upper_bound(correct: &[Vec<bool>], values: &[f64]) -> (f64, f64) {
    if correct.is_empty() {
        return (0.0, 0.0);
    }
    let mut right = 0usize;
    let mut total = 0.0;
    for row in correct {
        match row.iter().position(|&c| c) {
            Some(a) => {
                right += 1;
                total += values[a];
            }
            None => total += values[0],
        }
    }
    (right as f64 / correct.len() as f64, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::OptimAlgo;
    use proptest::prelude::*;
    use rand::Rng;

    fn policy(seed: u64) -> ControllerPolicy {
        let net = TNetwork::build(&controller_spec(&[1, 8, 8], 10), &mut seeded(seed)).unwrap();
        ControllerPolicy::new(net, ActionSet::default()).unwrap()
    }

    fn rand_x(n: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::from_fn(&[n, 1, 8, 8], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(reward(true, 0.3, 1.0, &cfg), 0.0);
        assert!((reward(true, 0.3, 0.5, &cfg) - 0.5f64.exp() * 0.5).abs() < 1e-12);
        assert!((reward(true, 0.3, 0.5, &cfg) - 0.8244).abs() < 1e-4);
        assert!((reward(false, 0.9, 1.0, &cfg) + 3.5).abs() < 1e-12);
    }

    #[test]
    fn action_set_defaults() {
        let a = ActionSet::default();
        assert_eq!(a.len(), 10);
        assert!((a.values()[0] - 0.1).abs() < 1e-12 && a.values()[9] == 1.0);
        assert!(ActionSet::from_values(vec![0.5, 0.5]).is_err());
        assert!(ActionSet::from_values(vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn epsilon_decays_then_holds() {
        assert_eq!(epsilon_schedule(0, 100), 0.9);
        assert!((epsilon_schedule(25, 100) - 0.475).abs() < 1e-12);
        assert_eq!(epsilon_schedule(50, 100), 0.05);
        assert_eq!(epsilon_schedule(99, 100), 0.05);
    }

    #[test]
    fn controller_is_small() {
        // at most 5% of the default 8x8 data path
        let data_path: TNetwork = TNetwork::build(
            &crate::tmodule::vgg_w(&[1, 8, 8], 16, 8, 10, crate::gating::Ordering::Nested),
            &mut seeded(0),
        )
        .unwrap();
        let p = policy(0);
        assert!(
            p.net.num_params() * 20 <= data_path.num_params(),
            "{} vs {}",
            p.net.num_params(),
            data_path.num_params()
        );
    }

    #[test]
    fn probabilities_form_a_simplex() {
        let p = policy(1).probs(&rand_x(5, 2)).unwrap();
        for row in p.data().chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let mut p = policy(2);
        p.epsilon = 1.0;
        let x = rand_x(1000, 3);
        let mut rng = seeded(4);
        let mut counts = [0usize; 10];
        for _ in 0..100 {
            for c in p.select(&x, SelectMode::EpsilonGreedy, &mut rng).unwrap() {
                counts[c.action] += 1;
            }
        }
        let expected = 10_000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 9 degrees of freedom
        assert!(chi2 < 21.666, "chi2 {chi2}");
    }

    fn one_hot_policy(action: usize) -> ControllerPolicy {
        let mut p = policy(5);
        let n = p.net.params().len();
        let mut params = p.net.params_mut();
        params[n - 2].data_mut().iter_mut().for_each(|w| *w = 0.0);
        let b = params[n - 1].data_mut();
        b.iter_mut().for_each(|v| *v = 0.0);
        b[action] = 50.0;
        p
    }

    #[test]
    fn epsilon_zero_follows_argmax() {
        let mut p = one_hot_policy(3);
        p.epsilon = 0.0;
        let choices = p
            .select(&rand_x(50, 1), SelectMode::EpsilonGreedy, &mut seeded(0))
            .unwrap();
        assert!(choices.iter().all(|c| c.action == 3));
    }

    #[test]
    fn greedy_ties_go_to_lowest_u() {
        let mut p = one_hot_policy(0);
        let n = p.net.params().len();
        p.net.params_mut()[n - 1].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let choices = p.select(&rand_x(5, 1), SelectMode::Greedy, &mut seeded(0)).unwrap();
        assert!(choices
            .iter()
            .all(|c| c.action == 0 && (c.u.value() - 0.1).abs() < 1e-12));
    }

    #[test]
    fn zero_rewards_leave_policy_unchanged() {
        let mut p = policy(6);
        let before = p.net.clone();
        let mut opt = Optimizer::new(OptimAlgo::rmsprop(), 1e-3).unwrap();
        p.policy_gradient_step(&mut opt, &rand_x(8, 0), &[1; 8], &[0.0; 8])
            .unwrap();
        assert_eq!(p.net, before);
    }

    #[test]
    fn non_finite_rewards_dropped() {
        let mut p = policy(6);
        let mut opt = Optimizer::new(OptimAlgo::rmsprop(), 1e-3).unwrap();
        let dropped = p
            .policy_gradient_step(
                &mut opt,
                &rand_x(4, 0),
                &[1, 2, 3, 4],
                &[1.0, f64::NAN, 0.5, f64::INFINITY],
            )
            .unwrap();
        assert_eq!(dropped, 2);
        assert!(p.net.params().iter().all(|t| t.is_finite()));
    }

    #[test]
    fn upper_bound_examples() {
        let values = ActionSet::default().values().to_vec();
        let all = vec![vec![true; 10]; 7];
        let (acc, total) = utilization_upper_bound(&all, &values);
        assert_eq!(acc, 1.0);
        assert!((total - 0.7).abs() < 1e-12);
        let late = vec![(0..10).map(|a| a >= 7).collect::<Vec<bool>>()];
        assert!((utilization_upper_bound(&late, &values).1 - 0.8).abs() < 1e-12);
        let never = vec![vec![false; 10]];
        let (acc, total) = utilization_upper_bound(&never, &values);
        assert_eq!(acc, 0.0);
        assert!((total - 0.1).abs() < 1e-12);
    }

    #[test]
    fn upper_bound_matches_brute_force_table() {
        let mut rng = seeded(9);
        let values = ActionSet::default().values().to_vec();
        let table: Vec<Vec<bool>> = (0..100)
            .map(|_| (0..10).map(|_| rng.gen::<f64>() < 0.3).collect())
            .collect();
        let (acc, total) = utilization_upper_bound(&table, &values);
        let mut right = 0;
        let mut sum = 0.0;
        for row in &table {
            let best = (0..10)
                .filter(|&a| row[a])
                .map(|a| values[a])
                .fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                right += 1;
                sum += best;
            } else {
                sum += 0.1;
            }
        }
        assert_eq!(acc, right as f64 / 100.0);
        assert!((total - sum).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn reward_sign_structure(conf in 0.0f64..=1.0, tr in 0.0f64..=1.0) {
            let cfg = RewardConfig::default();
            let r = reward(true, conf, tr, &cfg);
            if tr < 1.0 { prop_assert!(r > 0.0) } else { prop_assert!(r == 0.0) }
            prop_assert!(reward(false, conf, tr, &cfg) < 0.0);
        }

        #[test]
        fn correct_reward_decreasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(a < b);
            let cfg = RewardConfig::default();
            prop_assert!(reward(true, 0.5, a, &cfg) > reward(true, 0.5, b, &cfg));
        }

        #[test]
        fn wrong_penalty_grows(c1 in 0.0f64..1.0, c2 in 0.0f64..1.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            prop_assume!(c1 <= c2 && t1 <= t2);
            let cfg = RewardConfig::default();
            prop_assert!(reward(false, c1, t1, &cfg) >= reward(false, c2, t2, &cfg));
        }

        #[test]
        fn upper_bound_beats_fixed_u(table in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 10), 1..40)) {
            let values = ActionSet::default().values().to_vec();
            let (acc, _) = utilization_upper_bound(&table, &values);
            for a in 0..10 {
                let fixed = table.iter().filter(|r| r[a]).count() as f64 / table.len() as f64;
                prop_assert!(acc >= fixed);
            }
        }

        #[test]
        fn greedy_invariant_to_monotone_transform(ticks in proptest::collection::vec(-50i32..50, 10)) {
            let scores: Vec<f32> = ticks.iter().map(|&t| t as f32 / 10.0).collect();
            let t = Tensor::new(vec![1, 10], scores.clone()).unwrap();
            let cubed = Tensor::new(vec![1, 10], scores.iter().map(|s| s * s * s + 2.0 * s).collect()).unwrap();
            prop_assert_eq!(t.argmax_rows(), cubed.argmax_rows());
        }
    }
}
