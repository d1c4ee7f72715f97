//! Continuation over the regularized mobility family: solve the flow for a
//! decreasing schedule of shifts δ (each shifted mobility has a bounded
//! derivative), then check the convergence diagnostics — Cauchy gaps of
//! f_δ(u_δ) between consecutive levels and the locally uniform limit of the
//! boundary-behaviour functions G / G̃.

use crate::functionals::{f_cellwise, fisher_energy};
use crate::grid::DensityField;
use crate::jko::{
    check_estimates, run as jko_run, EstimatesReport, JkoError, JkoOpts, JkoTrajectory,
};
use crate::mobility::{Mobility, MobilityError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("schedule must be strictly decreasing and positive")]
    ScheduleNotDecreasing,
    #[error("level δ={delta}: {source}")]
    Level { delta: f64, source: JkoError },
    #[error(transparent)]
    Mobility(#[from] MobilityError),
}

#[derive(Debug)]
pub struct CascadeLevel {
    pub delta: f64,
    pub mobility: Mobility,
    /// F_δ(u0): nondecreasing in δ across the schedule.
    pub initial_energy: f64,
    pub trajectory: JkoTrajectory,
    pub estimates: EstimatesReport,
}

#[derive(Debug)]
pub struct CascadeResult {
    pub levels: Vec<CascadeLevel>,
    /// Discrete L²([0,T]; H¹) distance of f_δ(u_δ) between consecutive
    /// levels; the computable surrogate for strong convergence.
    pub gaps: Vec<f64>,
    /// F at the coarsest level (the δ-uniform energy reference).
    pub reference_energy: f64,
    /// Initial data whose coarsest-level energy exceeds 1e6 is flagged
    /// rather than rejected.
    pub near_inadmissible: bool,
}

impl CascadeResult {
    /// Cauchy trend: the consecutive-level gaps are nonincreasing over the
    /// last `window` comparisons.
    pub fn gaps_eventually_nonincreasing(&self, window: usize) -> bool {
        let gaps = &self.gaps;
        if gaps.len() < 2 {
            return true;
        }
        let start = gaps.len().saturating_sub(window);
        gaps[start.max(1) - 1..]
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-9))
    }
}

/// Default shift schedule δ_k = δ̄·2^{-k}: the largest level keeps the
/// shifted mobility above 1e-3 of the reference value at the mean density.
pub fn default_schedule(m: &Mobility, mean_density: f64, levels: usize) -> Vec<f64> {
    let reference = if m.ceiling().is_finite() {
        // Peak of the concave profile, sampled.
        m.default_mesh(512)
            .iter()
            .map(|&z| m.m(z))
            .fold(0.0f64, f64::max)
    } else {
        m.m(mean_density)
    };
    let mut delta = 0.5 * reference;
    for _ in 0..60 {
        if let Ok(reg) = m.regularize(delta) {
            if reg.m(mean_density) >= 1e-3 * reference {
                break;
            }
        }
        delta *= 0.5;
    }
    (0..levels).map(|k| delta * 0.5f64.powi(k as i32)).collect()
}

/// Run the scheme once per level, all from the same initial datum, and
/// record the consecutive-level gaps. Levels are independent and run
/// concurrently; the report order follows the schedule.
pub fn run_cascade(
    u0: &DensityField,
    m: &Mobility,
    schedule: &[f64],
    tau: f64,
    horizon: f64,
    opts: &JkoOpts,
    threads: usize,
) -> Result<CascadeResult, CascadeError> {
    if schedule.is_empty()
        || schedule.iter().any(|d| d.is_nan() || *d <= 0.0)
        || schedule.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(CascadeError::ScheduleNotDecreasing);
    }

    // Regularize and validate up front so a bad schedule fails before any
    // heavy work; every level must come out with a bounded derivative.
    let mut mobilities = Vec::with_capacity(schedule.len());
    for &delta in schedule {
        let m_delta = m.regularize(delta)?;
        let report = m_delta.validate(&m_delta.default_mesh(2000))?;
        debug_assert!(
            report.lsc,
            "shifted mobility must satisfy the derivative bound"
        );
        mobilities.push(m_delta);
    }
    let reference_energy = fisher_energy(u0, &mobilities[0]).map_err(CascadeError::Mobility)?;

    let worker = |delta: f64, m_delta: &Mobility| -> Result<CascadeLevel, CascadeError> {
        let initial_energy = fisher_energy(u0, m_delta).map_err(CascadeError::Mobility)?;
        let trajectory = jko_run(u0, tau, horizon, m_delta, opts)
            .map_err(|source| CascadeError::Level { delta, source })?;
        let estimates = check_estimates(&trajectory, m_delta, Some(reference_energy))
            .map_err(CascadeError::Mobility)?;
        Ok(CascadeLevel {
            delta,
            mobility: m_delta.clone(),
            initial_energy,
            trajectory,
            estimates,
        })
    };

    let levels: Vec<CascadeLevel> = if threads > 1 && schedule.len() > 1 {
        let results: Vec<Result<CascadeLevel, CascadeError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = schedule
                .iter()
                .zip(&mobilities)
                .map(|(&delta, m_delta)| scope.spawn(move || worker(delta, m_delta)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("cascade worker panicked"))
                .collect()
        });
        results.into_iter().collect::<Result<Vec<_>, _>>()?
    } else {
        schedule
            .iter()
            .zip(&mobilities)
            .map(|(&delta, m_delta)| worker(delta, m_delta))
            .collect::<Result<Vec<_>, _>>()?
    };

    let mut gaps = Vec::new();
    for pair in levels.windows(2) {
        gaps.push(trajectory_gap(&pair[0], &pair[1])?);
    }
    Ok(CascadeResult {
        near_inadmissible: reference_energy > 1e6,
        levels,
        gaps,
        reference_energy,
    })
}

/// Discrete L²([0,T]; H¹) distance between f_δ(u_δ) of two levels with the
/// same step size (the piecewise-constant interpolants integrate exactly).
fn trajectory_gap(a: &CascadeLevel, b: &CascadeLevel) -> Result<f64, CascadeError> {
    let ta = &a.trajectory;
    let tb = &b.trajectory;
    assert_eq!(ta.steps.len(), tb.steps.len());
    let grid = ta.grid();
    let dx = grid.dx();
    let mut total = 0.0;
    for (sa, sb) in ta.steps.iter().zip(&tb.steps) {
        let fa = f_cellwise(&sa.state, &a.mobility).map_err(CascadeError::Mobility)?;
        let fb = f_cellwise(&sb.state, &b.mobility).map_err(CascadeError::Mobility)?;
        let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
        let grad = grid.d_face(&diff);
        let l2: f64 = diff.iter().map(|v| v * v).sum::<f64>() * dx;
        let h1: f64 = grad.iter().map(|v| v * v).sum::<f64>() * dx;
        total += ta.tau * (l2 + h1);
    }
    Ok(total.sqrt())
}

/// Sup-norm distances of the boundary-behaviour functions per level:
/// G(w) = m'(g(w))·√w (unbounded range) or
/// G̃(w) = m'(g(w))·√(w(f(S)−w)) (finite range), with the continuous
/// extensions G(0) = 0 and G̃(0) = G̃(f(S)) = 0.
#[derive(Debug, Clone)]
pub struct GLimitReport {
    pub sup_gaps: Vec<f64>,
    pub monotone_decreasing: bool,
}

pub fn g_limit_check(
    m: &Mobility,
    schedule: &[f64],
    mesh: &[f64],
) -> Result<GLimitReport, MobilityError> {
    let base = |w: f64| g_function(m, m, w);
    let base_values: Vec<f64> = mesh.iter().map(|&w| base(w)).collect();
    let mut sup_gaps = Vec::with_capacity(schedule.len());
    for &delta in schedule {
        let m_delta = m.regularize(delta)?;
        let mut sup = 0.0f64;
        for (&w, &gw) in mesh.iter().zip(&base_values) {
            let gd = g_function(&m_delta, m, w);
            sup = sup.max((gd - gw).abs());
        }
        sup_gaps.push(sup);
    }
    let monotone_decreasing = sup_gaps.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-9));
    Ok(GLimitReport {
        sup_gaps,
        monotone_decreasing,
    })
}

/// Evaluate the boundary function of `m_eval`. The window factor uses
/// f(S) of `m_eval` itself (each level has its own range image); `base`
/// only decides the finite/infinite form.
fn g_function(m_eval: &Mobility, base: &Mobility, w: f64) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    if base.ceiling().is_finite() {
        let fs = m_eval.f_at_ceiling();
        if w >= fs {
            return 0.0;
        }
        let z = m_eval.f_inverse(w).unwrap_or(m_eval.ceiling());
        m_eval.m_prime(z) * (w * (fs - w)).sqrt()
    } else {
        let z = match m_eval.f_inverse(w) {
            Ok(z) => z,
            Err(_) => return 0.0,
        };
        m_eval.m_prime(z) * w.sqrt()
    }
}
