//! Gate vectors, gating strategies and utilization sampling.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack added before flooring or ceiling `u * n`, so grid values such as
/// `0.7` land on the intended integer despite binary rounding.
const ROUND_SLACK: f64 = 1e-9;

/// Utilization level `u` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Utilization(f64);

impl Utilization {
    pub fn new(u: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&u) {
            Ok(Utilization(u))
        } else {
            Err(Error::InvalidConfig(format!("utilization {u} outside [0, 1]")))
        }
    }

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn saturating(u: f64) -> Self {
        if u.is_nan() {
            Utilization(0.0)
        } else {
            Utilization(u.clamp(0.0, 1.0))
        }
    }

    pub const FULL: Utilization = Utilization(1.0);

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dimension {
    Widthwise,
    Depthwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordering {
    Nested,
    Independent,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingStrategy {
    pub dimension: Dimension,
    pub ordering: Ordering,
}

impl GatingStrategy {
    pub const WIDTH_NESTED: Self = GatingStrategy {
        dimension: Dimension::Widthwise,
        ordering: Ordering::Nested,
    };
    pub const WIDTH_INDEPENDENT: Self = GatingStrategy {
        dimension: Dimension::Widthwise,
        ordering: Ordering::Independent,
    };
    pub const DEPTH_NESTED: Self = GatingStrategy {
        dimension: Dimension::Depthwise,
        ordering: Ordering::Nested,
    };
    pub const DEPTH_INDEPENDENT: Self = GatingStrategy {
        dimension: Dimension::Depthwise,
        ordering: Ordering::Independent,
    };
}

/// How `u` maps to a number of active components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discretization {
    /// `k = min(n, floor(u * (n + 1)))`, the training-time sampling rule.
    #[default]
    Floor,
    /// `k = ceil(u * n)`, the rule of the sliced convolution kernel.
    Ceiling,
}

/// Number of components switched on at utilization `u`.
pub fn active_count(n: usize, u: Utilization, mode: Discretization) -> usize {
    let u = u.value();
    match mode {
        Discretization::Floor => n.min((u * (n + 1) as f64 + ROUND_SLACK).floor() as usize),
        Discretization::Ceiling => n.min((u * n as f64 - ROUND_SLACK).ceil().max(0.0) as usize),
    }
}

/// Binary activation pattern over `n` components with cost weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    bits: Vec<bool>,
    weights: Vec<f64>,
}

impl GateVector {
    /// Gate with unit weights.
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        let n = bits.len();
        Self::with_weights(bits, vec![1.0; n])
    }

    pub fn with_weights(bits: Vec<bool>, weights: Vec<f64>) -> Result<Self> {
        if bits.is_empty() || bits.len() != weights.len() {
            return Err(Error::InvalidConfig(format!(
                "gate vector needs n >= 1 bits and as many weights (got {} and {})",
                bits.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(
                "gate weights must be finite and nonnegative".into(),
            ));
        }
        Ok(GateVector { bits, weights })
    }

    pub fn all_on(n: usize) -> Self {
        GateVector {
            bits: vec![true; n],
            weights: vec![1.0; n],
        }
    }

    /// First `k` of `n` components on.
    pub fn prefix(n: usize, k: usize) -> Self {
        GateVector {
            bits: (0..n).map(|i| i < k).collect(),
            weights: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_on(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Replaces the cost weights, keeping the bits.
    pub fn reweighted(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.bits.len() {
            return Err(Error::InvalidConfig("weight count differs from gate length".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    /// `g_i > 0 => g_j > 0` for all `j < i`.
    pub fn is_nested(&self) -> bool {
        self.bits.windows(2).all(|w| w[0] || !w[1])
    }

    /// Length of the leading run of active components.
    pub fn leading_active(&self) -> usize {
        self.bits.iter().take_while(|&&b| b).count()
    }

    /// Gate values as `0.0` / `1.0`.
    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Switches on the first component if fewer than `min_active` are on,
    /// then the next ones in order until the minimum holds.
    pub fn ensure_min_active(&mut self, min_active: usize) {
        let mut i = 0;
        while self.popcount() < min_active.min(self.len()) && i < self.len() {
            self.bits[i] = true;
            i += 1;
        }
    }
}

/// Weighted active fraction `||w||_1^{-1} sum_i w_i 1(g_i != 0)`.
pub fn complexity(g: &GateVector) -> Result<f64> {
    complexity_of(std::slice::from_ref(g))
}

/// Complexity of several gate vectors taken together.
pub fn complexity_of(gates: &[GateVector]) -> Result<f64> {
    let total: f64 = gates.iter().flat_map(|g| g.weights.iter()).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidConfig("complexity needs a positive total weight".into()));
    }
    let on: f64 = gates
        .iter()
        .flat_map(|g| g.bits.iter().zip(&g.weights))
        .filter(|(b, _)| **b)
        .map(|(_, w)| *w)
        .sum();
    Ok(on / total)
}

pub fn nested_gate(n: usize, u: Utilization) -> GateVector {
    nested_gate_with(n, u, Discretization::Floor)
}

pub fn nested_gate_with(n: usize, u: Utilization, mode: Discretization) -> GateVector {
    GateVector::prefix(n, active_count(n, u, mode))
}

pub fn independent_gate(n: usize, u: Utilization, rng: &mut impl Rng) -> GateVector {
    independent_gate_with(n, u, Discretization::Floor, rng)
}

/// `k` components drawn uniformly without replacement.
pub fn independent_gate_with(n: usize, u: Utilization, mode: Discretization, rng: &mut impl Rng) -> GateVector {
    let k = active_count(n, u, mode);
    let mut bits = vec![false; n];
    for i in sample(rng, n, k).iter() {
        bits[i] = true;
    }
    GateVector {
        bits,
        weights: vec![1.0; n],
    }
}

/// Nested depthwise plan over residual stages.
///
/// Starting from `min_per_stage` active blocks per stage, sweep the stages
/// from output to input, switching on one more block in a stage unless that
/// would push the stage's active proportion above `u`. The sweep stops when
/// the total proportion exceeds `u` or a full pass changes nothing.
pub fn nested_depthwise_plan(stage_sizes: &[usize], u: Utilization, min_per_stage: usize) -> Result<Vec<GateVector>> {
    if stage_sizes.is_empty() || stage_sizes.contains(&0) {
        return Err(Error::InvalidConfig("stage sizes must be >= 1".into()));
    }
    let total: usize = stage_sizes.iter().sum();
    let u = u.value();
    let mut active: Vec<usize> = stage_sizes.iter().map(|&s| min_per_stage.min(s)).collect();
    'sweep: loop {
        let mut progressed = false;
        for s in (0..stage_sizes.len()).rev() {
            let used: usize = active.iter().sum();
            if used as f64 > u * total as f64 + ROUND_SLACK {
                break 'sweep;
            }
            let grown = (active[s] + 1) as f64;
            if active[s] < stage_sizes[s] && grown <= u * stage_sizes[s] as f64 + ROUND_SLACK {
                active[s] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(stage_sizes
        .iter()
        .zip(&active)
        .map(|(&n, &k)| GateVector::prefix(n, k))
        .collect())
}

/// How the training loop draws `u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum USampling {
    /// `u ~ Uniform[0, 1]`, drawn once per minibatch.
    Uniform,
    /// `u = min(1, start + step * floor(epoch / period))`.
    Incremental { start: f64, step: f64, period: usize },
    /// Always the same value (`Fixed(1.0)` is ordinary ungated training).
    Fixed(f64),
}

pub fn sample_u(mode: USampling, epoch: usize, rng: &mut impl Rng) -> Utilization {
    match mode {
        USampling::Uniform => Utilization(rng.gen::<f64>()),
        USampling::Incremental { start, step, period } => {
            let stages = (epoch / period.max(1)) as f64;
            // round to the grid the schedule is defined on
            let u = ((start + step * stages) * 1e9).round() / 1e9;
            Utilization::saturating(u.min(1.0))
        }
        USampling::Fixed(u) => Utilization::saturating(u),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn u(v: f64) -> Utilization {
        Utilization::new(v).unwrap()
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(complexity(&GateVector::all_on(4)).unwrap(), 1.0);
        let off = GateVector::with_weights(vec![false; 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(complexity(&off).unwrap(), 0.0);
        let g = GateVector::with_weights(vec![true, false, true], vec![1.0, 2.0, 1.0]).unwrap();
        assert_eq!(complexity(&g).unwrap(), 0.5);
    }

    #[test]
    fn complexity_rejects_zero_weights() {
        let g = GateVector::with_weights(vec![true, true], vec![0.0, 0.0]).unwrap();
        assert!(complexity(&g).is_err());
    }

    #[test]
    fn gate_vector_rejects_empty() {
        assert!(GateVector::new(vec![]).is_err());
        assert!(GateVector::with_weights(vec![true], vec![-1.0]).is_err());
    }

    #[test]
    fn utilization_range() {
        assert!(Utilization::new(1.5).is_err());
        assert!(Utilization::new(-0.1).is_err());
        assert_eq!(Utilization::saturating(2.0).value(), 1.0);
    }

    #[test]
    fn nested_gate_examples() {
        assert_eq!(nested_gate(16, u(1.0)).popcount(), 16);
        assert_eq!(nested_gate(4, u(0.5)).bits(), &[true, true, false, false]);
        assert_eq!(nested_gate(16, u(0.0)).popcount(), 0);
    }

    #[test]
    fn ceiling_mode_matches_sliced_kernel_rule() {
        assert_eq!(active_count(8, u(0.5), Discretization::Ceiling), 4);
        assert_eq!(active_count(8, u(0.51), Discretization::Ceiling), 5);
        assert_eq!(active_count(8, u(0.0), Discretization::Ceiling), 0);
        assert_eq!(active_count(10, u(0.7), Discretization::Ceiling), 7);
    }

    #[test]
    fn grid_values_floor_cleanly() {
        // 0.7 * 10 is 7.000000000000001 and 0.3 * 10 is 3.0000000000000004 in
        // binary; both must still give the intended integer.
        assert_eq!(active_count(9, u(0.7), Discretization::Floor), 7);
        assert_eq!(active_count(9, u(0.3), Discretization::Floor), 3);
        assert_eq!(active_count(19, u(0.35), Discretization::Floor), 7);
    }

    #[test]
    fn independent_full_and_half() {
        for seed in 0..50 {
            let mut rng = seeded(seed);
            assert_eq!(independent_gate(4, u(1.0), &mut rng).popcount(), 4);
            assert_eq!(independent_gate(4, u(0.5), &mut rng).popcount(), 2);
        }
    }

    #[test]
    fn independent_positions_are_uniform() {
        let mut counts = [0usize; 10];
        let draws = 100_000;
        let mut rng = seeded(11);
        for _ in 0..draws {
            let g = independent_gate(10, u(0.5), &mut rng);
            for (c, &b) in counts.iter_mut().zip(g.bits()) {
                *c += b as usize;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn depthwise_plan_examples() {
        let full = nested_depthwise_plan(&[2, 2], u(1.0), 0).unwrap();
        assert!(full.iter().all(|g| g.popcount() == 2));
        let half = nested_depthwise_plan(&[2, 2], u(0.5), 0).unwrap();
        assert_eq!(half.iter().map(|g| g.popcount()).collect::<Vec<_>>(), vec![1, 1]);
        // skip connections around stages: an empty network body is allowed
        let empty = nested_depthwise_plan(&[3, 4, 6, 3], u(0.0), 0).unwrap();
        assert!(empty.iter().all(|g| g.popcount() == 0));
        // no skip path: one block per stage is the floor
        let floor = nested_depthwise_plan(&[3, 4, 6, 3], u(0.0), 1).unwrap();
        assert!(floor.iter().all(|g| g.popcount() == 1 && g.is_nested()));
    }

    #[test]
    fn depthwise_plan_caps_each_stage() {
        let plan = nested_depthwise_plan(&[3, 4, 6, 3], u(0.5), 0).unwrap();
        let counts: Vec<usize> = plan.iter().map(|g| g.popcount()).collect();
        assert_eq!(counts, vec![1, 2, 3, 1]);
    }

    #[test]
    fn depthwise_plan_rejects_empty_stage() {
        assert!(nested_depthwise_plan(&[2, 0], u(0.5), 0).is_err());
    }

    #[test]
    fn incremental_schedule() {
        let mode = USampling::Incremental {
            start: 0.1,
            step: 0.1,
            period: 2,
        };
        let mut rng = seeded(0);
        assert_eq!(sample_u(mode, 0, &mut rng).value(), 0.1);
        assert_eq!(sample_u(mode, 19, &mut rng).value(), 1.0);
        let seq: Vec<f64> = (0..20).map(|e| sample_u(mode, e, &mut rng).value()).collect();
        let expected: Vec<f64> = (0..20).map(|e| ((e / 2) as f64 + 1.0) / 10.0).collect();
        assert_eq!(seq, expected);
    }

    #[test]
    fn uniform_sampling_mean() {
        let mut rng = seeded(5);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_u(USampling::Uniform, 0, &mut rng).value())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn nested_containment(n in 1usize..40, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let g1 = nested_gate(n, u(lo));
            let g2 = nested_gate(n, u(hi));
            prop_assert!(g1.is_nested() && g2.is_nested());
            for i in 0..n {
                prop_assert!(!g1.is_on(i) || g2.is_on(i));
            }
        }

        #[test]
        fn discretization_bound(n in 1usize..64, v in 0.0f64..=1.0) {
            let c = complexity(&nested_gate(n, u(v))).unwrap();
            prop_assert!((c - v).abs() <= 1.0 / n as f64 + 1.0 / (n + 1) as f64);
        }

        #[test]
        fn independent_matches_nested_popcount(n in 1usize..40, v in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = seeded(seed);
            prop_assert_eq!(independent_gate(n, u(v), &mut rng).popcount(), nested_gate(n, u(v)).popcount());
        }

        #[test]
        fn depthwise_monotone(sizes in proptest::collection::vec(1usize..8, 1..5), a in 0.0f64..=1.0, b in 0.0f64..=1.0, floor in 0usize..2) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p1 = nested_depthwise_plan(&sizes, u(lo), floor).unwrap();
            let p2 = nested_depthwise_plan(&sizes, u(hi), floor).unwrap();
            for ((g1, g2), &n) in p1.iter().zip(&p2).zip(&sizes) {
                prop_assert!(g1.is_nested());
                prop_assert!(g1.popcount() <= g2.popcount());
                let cap = hi.max(1.0 / n as f64);
                prop_assert!(g2.popcount() as f64 / n as f64 <= cap + 1e-9);
            }
        }
    }
}
