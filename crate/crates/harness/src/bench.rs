//! Wall-clock latency of a forward pass at several utilizations.

use std::time::Instant;

use tnn_core::gating::Utilization;
use tnn_core::rng::seeded;
use tnn_core::tmodule::TNetwork;
use tnn_core::{Result, Tensor};

use crate::eval::ExecMode;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub u: f64,
    pub median_s: f64,
    pub min_s: f64,
    pub mac_ratio: f64,
}

/// Times `runs` passes of `x` at each `u` after one warm-up pass and reports
/// the median. Everything runs on the calling thread.
pub fn bench(net: &TNetwork, x: &Tensor, grid: &[f64], mode: ExecMode, runs: usize) -> Result<Vec<BenchRow>> {
    let runs = runs.max(1);
    grid.iter()
        .map(|&uv| {
            let gates = net.draw_gates(Utilization::new(uv)?, &mut seeded(0))?;
            let pass = || -> Result<()> {
                match mode {
                    ExecMode::Masked => net.forward(x, &gates).map(drop),
                    ExecMode::Sliced { propagate } => net.forward_sliced(x, &gates, propagate).map(drop),
                }
            };
            pass()?;
            let mut times = Vec::with_capacity(runs);
            for _ in 0..runs {
                let t = Instant::now();
                pass()?;
                times.push(t.elapsed().as_secs_f64());
            }
            times.sort_by(f64::total_cmp);
            let propagate = matches!(mode, ExecMode::Sliced { propagate: true });
            Ok(BenchRow {
                u: uv,
                median_s: times[runs / 2],
                min_s: times[0],
                mac_ratio: net.mac_count(&gates, propagate)?.ratio(),
            })
        })
        .collect()
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = String::from("u,median_s,min_s,mac_ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.9},{:.9},{:.6}\n",
            r.u, r.median_s, r.min_s, r.mac_ratio
        ));
    }
    s
}
