//! CSV and manifest emission. Formats are versioned with a schema tag;
//! floating-point values are printed with 17 significant digits so runs are
//! reproducible byte-for-byte.

use crate::cascade::CascadeResult;
use crate::jko::{EstimatesReport, JkoTrajectory};
use crate::oracle::OracleRun;
use crate::transport::TransportPath;
use std::fmt::Write as _;

/// 17 significant digits: enough to reproduce any f64 exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-step run CSV (schema run-csv/1):
/// step, t, F, H, W2_step, mass, min_u, max_u.
pub fn run_csv(traj: &JkoTrajectory) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# schema: run-csv/1");
    let _ = writeln!(s, "step,t,F,H,W2_step,mass,min_u,max_u");
    let row = |s: &mut String,
               step: usize,
               t: f64,
               f: f64,
               h: f64,
               w2: f64,
               state: &crate::grid::DensityField| {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            step,
            format_float(t),
            format_float(f),
            format_float(h),
            format_float(w2),
            format_float(state.mass()),
            format_float(state.min()),
            format_float(state.max()),
        );
    };
    row(&mut s, 0, 0.0, traj.fisher0, traj.entropy0, 0.0, &traj.u0);
    for (n, step) in traj.steps.iter().enumerate() {
        row(
            &mut s,
            n + 1,
            (n + 1) as f64 * traj.tau,
            step.fisher,
            step.entropy,
            step.w2,
            &step.state,
        );
    }
    s
}

/// Same schema for the reference integrator, flagged by source.
pub fn oracle_csv(run: &OracleRun, fishers: &[f64], entropies: &[f64]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# schema: run-csv/1");
    let _ = writeln!(s, "# source: oracle");
    let _ = writeln!(s, "step,t,F,H,W2_step,mass,min_u,max_u");
    for (n, state) in run.states.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            n,
            format_float(n as f64 * run.tau),
            format_float(fishers[n]),
            format_float(entropies[n]),
            format_float(0.0),
            format_float(state.mass()),
            format_float(state.min()),
            format_float(state.max()),
        );
    }
    s
}

/// Space-time path dump (schema path-csv/1): one row per (half-step j,
/// cell i) with the density at slice j and the flux at the face left of
/// cell i (the rightmost face is identically zero).
pub fn path_csv(path: &TransportPath) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# schema: path-csv/1");
    let _ = writeln!(s, "j,i,u,w");
    for j in 0..=path.ns {
        for i in 0..path.grid.cells {
            let w = if j < path.ns { path.w[j][i] } else { 0.0 };
            let _ = writeln!(
                s,
                "{},{},{},{}",
                j,
                i,
                format_float(path.u[j][i]),
                format_float(w)
            );
        }
    }
    s
}

/// Cascade report CSV (schema cascade-csv/1):
/// delta, F0 (= F_δ(u0)), final F, final H, gap to the next level.
pub fn cascade_csv(result: &CascadeResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# schema: cascade-csv/1");
    let _ = writeln!(s, "delta,F0,final_F,final_H,gap_to_next");
    for (k, level) in result.levels.iter().enumerate() {
        let last = level.trajectory.steps.last();
        let (f, h) = last
            .map(|st| (st.fisher, st.entropy))
            .unwrap_or((level.trajectory.fisher0, level.trajectory.entropy0));
        let gap = result.gaps.get(k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            format_float(level.delta),
            format_float(level.initial_energy),
            format_float(f),
            format_float(h),
            format_float(gap),
        );
    }
    s
}

/// Structured-text manifest builder (schema manifest/1).
pub struct Manifest {
    body: String,
}

impl Manifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(body, "schema = manifest/1");
        let _ = writeln!(body, "tool = fisherflow/{}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(body, "command = {command}");
        let _ = writeln!(body, "config_hash = {config_hash}");
        Manifest { body }
    }

    pub fn field(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.body, "{key} = {value}");
        self
    }

    pub fn float(&mut self, key: &str, value: f64) -> &mut Self {
        let _ = writeln!(self.body, "{key} = {}", format_float(value));
        self
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        let _ = writeln!(self.body, "\n[{name}]");
        self
    }

    pub fn estimates(&mut self, report: &EstimatesReport) -> &mut Self {
        self.section("estimates");
        self.field("eps_mono", format_float(report.eps_mono));
        self.field("energy_monotone", report.energy_monotone);
        self.float("max_energy_rise", report.max_energy_rise);
        self.field("energy_bounded", report.energy_bounded);
        self.field("entropy_monotone", report.entropy_monotone);
        self.float("max_entropy_rise", report.max_entropy_rise);
        self.float("sum_w2", report.sum_w2);
        self.float("sum_w2_bound", report.sum_w2_bound);
        self.field("sum_w2_ok", report.sum_w2_ok);
        self.float("mass_drift", report.mass_drift);
        self.field("mass_ok", report.mass_ok);
        self.field("bounds_ok", report.bounds_ok);
        self.field("all_ok", report.all_ok());
        if !report.hess_entropy_ratios.is_empty() {
            let mean = report.hess_entropy_ratios.iter().sum::<f64>()
                / report.hess_entropy_ratios.len() as f64;
            let max = report
                .hess_entropy_ratios
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            // The constant of the regularity estimate is not explicit, so
            // the ratio trend is reported, never asserted.
            self.float("hess_entropy_ratio_mean", mean);
            self.float("hess_entropy_ratio_max", max);
        }
        self.float("entropy_energy_ratio_max", report.entropy_energy_ratio_max);
        self
    }

    pub fn finish(&self) -> String {
        self.body.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DensityField, Grid1D};
    use crate::jko::{InnerStats, JkoStep};

    fn tiny_trajectory() -> JkoTrajectory {
        let g = Grid1D::new(1.0, 8);
        let u0 = DensityField::constant(g, 1.0);
        JkoTrajectory {
            tau: 0.5,
            u0: u0.clone(),
            s0: 1.0,
            fisher0: 0.125,
            entropy0: 0.25,
            eps_mono: 1e-6,
            steps: vec![JkoStep {
                state: u0,
                w2: 0.0625,
                fisher: 0.1,
                entropy: 0.2,
                inner: InnerStats::default(),
            }],
        }
    }

    #[test]
    fn run_csv_has_schema_header_and_17_digits() {
        let csv = run_csv(&tiny_trajectory());
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "# schema: run-csv/1");
        assert_eq!(lines.next().unwrap(), "step,t,F,H,W2_step,mass,min_u,max_u");
        let row0 = lines.next().unwrap();
        assert!(row0.starts_with("0,0.0000000000000000e0,1.2500000000000000e-1"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1 + 0.2, 1.0 / 3.0, 6.02e23, f64::MIN_POSITIVE] {
            let s = format_float(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{s}");
        }
    }

    #[test]
    fn manifest_contains_command_and_sections() {
        let mut m = Manifest::new("evolve", "fnv1a:0000000000000000");
        m.field("route", "Thm-1/LSC");
        let text = m.finish();
        assert!(text.contains("schema = manifest/1"));
        assert!(text.contains("command = evolve"));
        assert!(text.contains("route = Thm-1/LSC"));
    }
}
