//! Energy model and distance-binned aggregation of per-device results.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::RunResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub tx_current_a: f64,
    pub rx_current_a: f64,
    pub battery_v: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            tx_current_a: 0.083,
            rx_current_a: 0.038,
            battery_v: 3.7,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("energy.tx_current_a", self.tx_current_a),
            ("energy.rx_current_a", self.rx_current_a),
            ("energy.battery_v", self.battery_v),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(field, "must be > 0"));
            }
        }
        Ok(())
    }

    pub fn tx_energy(&self, tx_seconds: f64) -> f64 {
        self.tx_current_a * tx_seconds * self.battery_v
    }

    pub fn rx_energy(&self, rx_seconds: f64) -> f64 {
        self.rx_current_a * rx_seconds * self.battery_v
    }
}

/// Radio energy in joules for the given transmit and receive times.
pub fn energy(tx_seconds: f64, rx_seconds: f64, p: &EnergyParams) -> f64 {
    (p.tx_current_a * tx_seconds + p.rx_current_a * rx_seconds) * p.battery_v
}

/// Means over all (run, ED) pairs whose distance falls in `[lower_m, upper_m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lower_m: f64,
    pub upper_m: f64,
    pub n: usize,
    pub n_decoded: usize,
    /// Over decoded EDs only.
    pub mean_completion_s: Option<f64>,
    pub mean_activity_s: Option<f64>,
    pub mean_energy_j: Option<f64>,
    pub mean_tx_s: Option<f64>,
    pub mean_rx_s: Option<f64>,
    pub mean_tx_energy_j: Option<f64>,
    pub mean_rx_energy_j: Option<f64>,
}

impl DistanceBin {
    pub fn center_m(&self) -> f64 {
        0.5 * (self.lower_m + self.upper_m)
    }
}

#[derive(Default)]
struct Acc {
    n: usize,
    n_decoded: usize,
    completion: f64,
    tx: f64,
    rx: f64,
    energy: f64,
    tx_energy: f64,
    rx_energy: f64,
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(
    runs: &[RunResult],
    bin_width_m: f64,
    radius_m: f64,
    energy_params: &EnergyParams,
) -> Result<Vec<DistanceBin>> {
    if runs.is_empty() {
        return Err(Error::config("replications", "no results to aggregate"));
    }
    if !(bin_width_m > 0.0) {
        return Err(Error::config("bin_width_m", "must be > 0"));
    }
    let n_bins = ((radius_m / bin_width_m).ceil() as usize).max(1);
    let mut acc: Vec<Acc> = (0..n_bins).map(|_| Acc::default()).collect();
    for ed in runs.iter().flat_map(|r| r.eds.iter()) {
        let idx = ((ed.distance_m / bin_width_m).floor() as usize).min(n_bins - 1);
        let a = &mut acc[idx];
        a.n += 1;
        if let Some(c) = ed.completion_s {
            a.n_decoded += 1;
            a.completion += c;
        }
        a.tx += ed.tx_s;
        a.rx += ed.rx_s;
        a.energy += ed.energy_j;
        a.tx_energy += energy_params.tx_energy(ed.tx_s);
        a.rx_energy += energy_params.rx_energy(ed.rx_s);
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(i, a)| DistanceBin {
            lower_m: i as f64 * bin_width_m,
            upper_m: ((i + 1) as f64 * bin_width_m).min(radius_m.max(bin_width_m * (i as f64 + 1.0))),
            n: a.n,
            n_decoded: a.n_decoded,
            mean_completion_s: mean(a.completion, a.n_decoded),
            mean_activity_s: mean(a.tx + a.rx, a.n),
            mean_energy_j: mean(a.energy, a.n),
            mean_tx_s: mean(a.tx, a.n),
            mean_rx_s: mean(a.rx, a.n),
            mean_tx_energy_j: mean(a.tx_energy, a.n),
            mean_rx_energy_j: mean(a.rx_energy, a.n),
        })
        .collect())
}

/// The outermost distance bin.
pub fn cell_edge(bins: &[DistanceBin]) -> Option<&DistanceBin> {
    bins.last()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const AGGREGATE_HEADER: &str = "bin_center_m,mean_completion_s,mean_activity_s,mean_energy_J,n,n_decoded,mean_tx_s,mean_rx_s,mean_tx_energy_J,mean_rx_energy_J";

pub fn aggregate_csv(bins: &[DistanceBin]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for b in bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            b.center_m(),
            opt(b.mean_completion_s),
            opt(b.mean_activity_s),
            opt(b.mean_energy_j),
            b.n,
            b.n_decoded,
            opt(b.mean_tx_s),
            opt(b.mean_rx_s),
            opt(b.mean_tx_energy_j),
            opt(b.mean_rx_energy_j),
        );
    }
    out
}

pub const RAW_HEADER: &str = "run,ed,distance_m,completion_s,tx_s,rx_s,energy_J,decoded";

pub fn raw_csv(runs: &[RunResult]) -> String {
    let mut out = String::from(RAW_HEADER);
    out.push('\n');
    for (run, r) in runs.iter().enumerate() {
        for ed in &r.eds {
            let _ = writeln!(
                out,
                "{run},{},{},{},{},{},{},{}",
                ed.ed,
                ed.distance_m,
                opt(ed.completion_s),
                ed.tx_s,
                ed.rx_s,
                ed.energy_j,
                u8::from(ed.completion_s.is_some()),
            );
        }
    }
    out
}
