//! Accuracy-versus-utilization curves and controller evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use tnn_core::controller::{utilization_upper_bound, ControllerPolicy, OutcomeTable, SelectMode};
use tnn_core::gating::{GateVector, Ordering, Utilization};
use tnn_core::objectives::BernoulliGatePolicy;
use tnn_core::rng::derived;
use tnn_core::tmodule::TNetwork;
use tnn_core::trainer::{forward_per_example, policy_gates, Samples};
use tnn_core::{Error, Result, Tensor};

pub const CSV_HEADER: &str = "u,accuracy,mac_ratio,mean_latency_s,n_samples";
pub const EVAL_BATCH: usize = 256;
/// Gate draws averaged per point when gating is random.
pub const RANDOM_GATE_SEEDS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Masked,
    /// Slice the active channels; `propagate` also slices the next layer's
    /// input channels.
    Sliced {
        propagate: bool,
    },
}

impl std::str::FromStr for ExecMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "masked" => Ok(ExecMode::Masked),
            "sliced" => Ok(ExecMode::Sliced { propagate: true }),
            "sliced-nopropagate" => Ok(ExecMode::Sliced { propagate: false }),
            other => Err(format!("unknown mode `{other}` (masked, sliced, sliced-nopropagate)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThrottlePoint {
    pub u: f64,
    pub accuracy: f64,
    /// Spread of the accuracy across gate draws; zero for deterministic gating.
    pub accuracy_std: f64,
    pub mac_ratio: f64,
    /// Seconds per sample, median over timed passes.
    pub mean_latency: f64,
    pub n_samples: usize,
}

/// Parses `start:end:step` or a comma-separated list. Values are rounded to
/// 1e-9 so `0.1:1.0:0.1` yields exactly ten points.
pub fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    let round = |v: f64| (v * 1e9).round() / 1e9;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad number `{t}` in grid"));
    let grid: Vec<f64> = if let [a, b, c] = s.split(':').collect::<Vec<_>>()[..] {
        let (start, end, step) = (num(a)?, num(b)?, num(c)?);
        if !(step > 0.0) || end < start {
            return Err(format!("bad grid range `{s}`"));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| round(start + step * i as f64)).collect()
    } else {
        s.split(',')
            .map(|t| num(t).map(round))
            .collect::<std::result::Result<_, _>>()?
    };
    if grid.is_empty() || grid.iter().any(|u| !(0.0..=1.0).contains(u)) {
        return Err(format!("grid values must lie in [0, 1]: `{s}`"));
    }
    Ok(grid)
}

pub fn default_grid() -> Vec<f64> {
    parse_grid("0.1:1.0:0.1").expect("valid")
}

/// True when every gated module uses nested ordering, so a given `u`
/// always produces the same gates.
pub fn deterministic_gating(net: &TNetwork) -> bool {
    net.modules().iter().all(|m| m.strategy.ordering == Ordering::Nested)
}

fn run(net: &TNetwork, x: &Tensor, gates: &[GateVector], mode: ExecMode) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut rows = Vec::with_capacity(n * net.num_classes());
    for start in (0..n).step_by(EVAL_BATCH) {
        let xb = x.slice_axis(0, start, (start + EVAL_BATCH).min(n))?;
        let y = match mode {
            ExecMode::Masked => net.forward(&xb, gates)?,
            ExecMode::Sliced { propagate } => net.forward_sliced(&xb, gates, propagate)?,
        };
        rows.extend_from_slice(y.data());
    }
    Tensor::new(vec![n, net.num_classes()], rows)
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let right = logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
    right as f64 / labels.len().max(1) as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// One point per grid value in ascending order. Latency is the median of
/// `timed_passes` (at least 3) timed passes over the set.
pub fn eval_curve(
    net: &TNetwork,
    data: &Samples,
    grid: &[f64],
    mode: ExecMode,
    timed_passes: usize,
    seed: u64,
) -> Result<Vec<ThrottlePoint>> {
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let draws = if deterministic_gating(net) {
        1
    } else {
        RANDOM_GATE_SEEDS
    };
    let mut points = Vec::with_capacity(grid.len());
    for &uv in &grid {
        let u = Utilization::new(uv)?;
        let mut accs = Vec::with_capacity(draws as usize);
        let mut macs = Vec::with_capacity(draws as usize);
        let mut first_gates = None;
        for d in 0..draws {
            let mut rng = derived(seed, d);
            let gates = net.draw_gates(u, &mut rng)?;
            let logits = run(net, data.x(), &gates, mode)?;
            accs.push(accuracy(&logits, data.labels()));
            let propagate = matches!(mode, ExecMode::Sliced { propagate: true });
            macs.push(net.mac_count(&gates, propagate)?.ratio());
            first_gates.get_or_insert(gates);
        }
        let gates = first_gates.expect("at least one draw");
        let times: Vec<f64> = (0..timed_passes.max(3))
            .map(|_| {
                let t = Instant::now();
                run(net, data.x(), &gates, mode).map(|_| t.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
        points.push(ThrottlePoint {
            u: uv,
            accuracy: mean,
            accuracy_std: var.sqrt(),
            mac_ratio: macs.iter().sum::<f64>() / macs.len() as f64,
            mean_latency: median(times) / data.len().max(1) as f64,
            n_samples: data.len(),
        });
    }
    Ok(points)
}

/// Like [`eval_curve`] with gates drawn per input from a learned policy.
/// Accuracy and MAC ratio are averaged over [`RANDOM_GATE_SEEDS`] draws;
/// latency times masked execution of the first draw.
pub fn eval_policy_curve(
    net: &TNetwork,
    policy: &BernoulliGatePolicy,
    data: &Samples,
    grid: &[f64],
    timed_passes: usize,
    seed: u64,
) -> Result<Vec<ThrottlePoint>> {
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let n = data.len();
    let mut points = Vec::with_capacity(grid.len());
    for &uv in &grid {
        let u = Utilization::new(uv)?;
        let (mut accs, mut macs) = (Vec::new(), Vec::new());
        let mut first = None;
        for d in 0..RANDOM_GATE_SEEDS {
            let mut rng = derived(seed, d);
            let (mut right, mut mac) = (0usize, 0.0);
            let mut draws = Vec::new();
            for start in (0..n).step_by(EVAL_BATCH) {
                let xb = data.x().slice_axis(0, start, (start + EVAL_BATCH).min(n))?;
                let gates = policy_gates(net, policy, &xb, u, &mut rng)?;
                let logits = forward_per_example(net, &xb, &gates)?;
                let labels = &data.labels()[start..start + xb.shape()[0]];
                right += logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
                for row in &gates {
                    mac += net.mac_count(row, false)?.ratio();
                }
                draws.push((xb, gates));
            }
            accs.push(right as f64 / n.max(1) as f64);
            macs.push(mac / n.max(1) as f64);
            first.get_or_insert(draws);
        }
        let first = first.expect("at least one draw");
        let times: Vec<f64> = (0..timed_passes.max(3))
            .map(|_| {
                let t = Instant::now();
                for (xb, gates) in &first {
                    forward_per_example(net, xb, gates)?;
                }
                Ok(t.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
        points.push(ThrottlePoint {
            u: uv,
            accuracy: mean,
            accuracy_std: var.sqrt(),
            mac_ratio: macs.iter().sum::<f64>() / macs.len() as f64,
            mean_latency: median(times) / n.max(1) as f64,
            n_samples: n,
        });
    }
    Ok(points)
}

pub fn curve_csv(points: &[ThrottlePoint]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for p in points {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.9},{}",
            p.u, p.accuracy, p.mac_ratio, p.mean_latency, p.n_samples
        )
        .unwrap();
    }
    s
}

/// Trapezoidal area under accuracy-versus-u.
pub fn curve_area(points: &[ThrottlePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| 0.5 * (w[0].accuracy + w[1].accuracy) * (w[1].u - w[0].u))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedResult {
    pub u: f64,
    pub accuracy: f64,
    /// Sum of `u` over correctly classified inputs.
    pub total_utilization: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerReport {
    pub accuracy: f64,
    pub mean_u: f64,
    /// Sum of the chosen `u` over correctly classified inputs.
    pub total_utilization: f64,
    /// Inputs assigned to each action.
    pub histogram: Vec<usize>,
    pub upper_bound_accuracy: f64,
    pub upper_bound_total: f64,
    pub fixed: Vec<FixedResult>,
}

impl ControllerReport {
    /// Actions chosen for at least `share` of the inputs.
    pub fn actions_with_mass(&self, share: f64) -> usize {
        let n: usize = self.histogram.iter().sum();
        self.histogram.iter().filter(|&&c| c as f64 >= share * n as f64).count()
    }
}

/// Greedy controller decisions on every input, scored by the frozen network,
/// alongside every fixed-u result and the per-input upper bound.
pub fn eval_controller(
    net: &TNetwork,
    controller: &ControllerPolicy,
    data: &Samples,
    seed: u64,
) -> Result<ControllerReport> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let table = OutcomeTable::evaluate(
        net,
        data.x(),
        data.labels(),
        &controller.actions,
        EVAL_BATCH,
        &mut derived(seed, 0),
    )?;
    let values = controller.actions.values();
    let correct = table.correctness();
    let mut choices = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let xb = data.x().slice_axis(0, start, (start + EVAL_BATCH).min(data.len()))?;
        let mut rng = derived(seed, 1);
        choices.extend(
            controller
                .select(&xb, SelectMode::Greedy, &mut rng)?
                .into_iter()
                .map(|c| c.action),
        );
    }
    let mut histogram = vec![0usize; values.len()];
    let (mut right, mut u_sum, mut total) = (0usize, 0.0, 0.0);
    for (i, &a) in choices.iter().enumerate() {
        histogram[a] += 1;
        u_sum += values[a];
        if correct[i][a] {
            right += 1;
            total += values[a];
        }
    }
    let fixed = (0..values.len())
        .map(|a| {
            let r = correct.iter().filter(|row| row[a]).count();
            FixedResult {
                u: values[a],
                accuracy: r as f64 / data.len() as f64,
                total_utilization: r as f64 * values[a],
            }
        })
        .collect();
    let (ub_acc, ub_total) = utilization_upper_bound(correct, values);
    Ok(ControllerReport {
        accuracy: right as f64 / data.len() as f64,
        mean_u: u_sum / data.len() as f64,
        total_utilization: total,
        histogram,
        upper_bound_accuracy: ub_acc,
        upper_bound_total: ub_total,
        fixed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.1:1.0:0.1").unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[2], 0.3);
        assert_eq!(g[9], 1.0);
        assert_eq!(parse_grid("0.25,0.5,1.0").unwrap(), vec![0.25, 0.5, 1.0]);
        assert!(parse_grid("0.1:1.5:0.1").is_err());
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("x").is_err());
    }

    #[test]
    fn exec_mode_names() {
        assert_eq!(
            "sliced".parse::<ExecMode>().unwrap(),
            ExecMode::Sliced { propagate: true }
        );
        assert!("fast".parse::<ExecMode>().is_err());
    }

    #[test]
    fn csv_layout() {
        let p = ThrottlePoint {
            u: 0.5,
            accuracy: 0.75,
            accuracy_std: 0.0,
            mac_ratio: 0.25,
            mean_latency: 1e-4,
            n_samples: 8,
        };
        assert_eq!(
            curve_csv(&[p]),
            format!("{CSV_HEADER}\n0.5,0.750000,0.250000,0.000100000,8\n")
        );
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
