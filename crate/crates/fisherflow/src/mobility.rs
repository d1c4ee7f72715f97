//! Mobility functions, their structural validation, and the maps they induce.
//!
//! A mobility `m` weights the flux in the transport metric. It must be
//! concave and positive on the interior of its value range `(0, S)` and
//! vanish at the boundary. From it we derive
//!
//! * `f` with `f'(z) = sqrt(2/m(z))` — the substitution that turns the
//!   energy into a Dirichlet integral,
//! * `g = f⁻¹`,
//! * `h` with `h''(z)·m(z) = 1` — the entropy integrand,
//!
//! plus the shifted mobility family `m_δ` used by the continuation cascade
//! for mobilities whose derivative blows up at the degeneracy.

use crate::numerics::{adaptive_simpson, bisect_newton, log_mesh, MonotoneCubic, NumericsError};
use thiserror::Error;

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Span of the lazily built `f` table when the value range is unbounded.
const DEFAULT_TABLE_SPAN: f64 = 64.0;
const TABLE_NODES: usize = 2048;

#[derive(Debug, Error)]
pub enum MobilityError {
    #[error("mobility is not concave: m''({z}) = {second:e} > 0")]
    NonConcave { z: f64, second: f64 },
    #[error("mobility is not positive in the interior: m({z}) = {value:e}")]
    NonPositive { z: f64, value: f64 },
    #[error("integral of sqrt(2/m) diverged near z = {z}")]
    DivergentIntegral { z: f64 },
    #[error("argument {w} outside the range [0, f(S)) = [0, {f_at_ceiling})")]
    OutOfRange { w: f64, f_at_ceiling: f64 },
    #[error("delta = {delta} too large: m(z) = delta has no admissible root bracket")]
    DeltaTooLarge { delta: f64 },
    #[error("m'({z}) = 0 with m''(z) = 0: convexity ratio indeterminate")]
    DerivativeVanishes { z: f64 },
    #[error("custom table invalid: {reason}")]
    BadTable { reason: String },
}

impl From<NumericsError> for MobilityError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::QuadratureDiverged { a, .. } => {
                MobilityError::DivergentIntegral { z: a }
            }
            other => MobilityError::BadTable {
                reason: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone)]
enum Family {
    Linear,
    Power {
        beta: f64,
    },
    DoublePower {
        beta1: f64,
        beta2: f64,
    },
    /// Shifted base mobility `m(shift + scale·z) - (sub0 + sub_slope·z)`;
    /// `scale` is 1 and `sub_slope` 0 for an unbounded range. The subtracted
    /// affine part equals `delta` up to root-solve rounding but is pinned to
    /// the exactly evaluated endpoint values so the shifted mobility vanishes
    /// bitwise at the ends of its range.
    Regularized {
        base: Box<Mobility>,
        delta: f64,
        shift: f64,
        scale: f64,
        sub0: f64,
        sub_slope: f64,
    },
    Custom {
        interp: MonotoneCubic,
    },
}

/// A mobility together with its value ceiling and the tabulated map `f`
/// where no closed form exists. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Mobility {
    family: Family,
    ceiling: f64,
    f_table: Option<MonotoneCubic>,
    f_at_ceiling: f64,
}

/// Outcome of the structural validation sweep.
#[derive(Debug, Clone)]
pub struct MobilityReport {
    /// Lipschitz-type condition: bounded derivative on the whole range.
    pub lsc: bool,
    /// Largest |m'| seen on the sample mesh.
    pub sup_m_prime: f64,
    /// Power-growth exponents (gamma0, gamma1) when meaningful.
    pub pg_exponents: Option<(f64, f64)>,
    /// Singularity-strength condition at the degenerate boundary.
    pub ms_ok: bool,
    pub concavity_ok: bool,
    /// min over the mesh of f'''·f'/f''² (ratio >= 3 iff m concave).
    pub convexity_ratio_min: f64,
}

impl Mobility {
    pub fn linear() -> Self {
        Mobility {
            family: Family::Linear,
            ceiling: f64::INFINITY,
            f_table: None,
            f_at_ceiling: f64::INFINITY,
        }
    }

    /// m(z) = z^beta on [0, inf), beta in (0, 1].
    pub fn power(beta: f64) -> Self {
        assert!(beta > 0.0 && beta <= 1.0, "power exponent must be in (0,1]");
        Mobility {
            family: Family::Power { beta },
            ceiling: f64::INFINITY,
            f_table: None,
            f_at_ceiling: f64::INFINITY,
        }
    }

    /// m(z) = z^beta1 (S-z)^beta2 on [0, S].
    pub fn double_power(beta1: f64, beta2: f64, ceiling: f64) -> Self {
        assert!(beta1 > 0.0 && beta1 <= 1.0 && beta2 > 0.0 && beta2 <= 1.0);
        assert!(ceiling.is_finite() && ceiling > 0.0);
        let mut m = Mobility {
            family: Family::DoublePower { beta1, beta2 },
            ceiling,
            f_table: None,
            f_at_ceiling: f64::NAN,
        };
        if beta1 == 1.0 && beta2 == 1.0 {
            m.f_at_ceiling = SQRT2 * std::f64::consts::PI;
        } else {
            m.build_f_table().expect("double-power f table");
        }
        m
    }

    /// Mobility sampled from a (z, m(z)) table with strictly increasing z
    /// starting at (0, 0). The value ceiling is the last abscissa when the
    /// table ends at zero mobility, unbounded otherwise.
    pub fn custom(zs: Vec<f64>, ms: Vec<f64>) -> Result<Self, MobilityError> {
        if zs.len() != ms.len() || zs.len() < 4 {
            return Err(MobilityError::BadTable {
                reason: "need at least 4 rows of equal length".into(),
            });
        }
        if zs[0] != 0.0 || ms[0] != 0.0 {
            return Err(MobilityError::BadTable {
                reason: "table must start at (0, 0)".into(),
            });
        }
        if zs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MobilityError::BadTable {
                reason: "abscissae must be strictly increasing".into(),
            });
        }
        let peak = ms.iter().cloned().fold(0.0f64, f64::max);
        if peak <= 0.0 {
            return Err(MobilityError::BadTable {
                reason: "mobility vanishes identically".into(),
            });
        }
        let saturating = *ms.last().unwrap() <= 1e-12 * peak;
        let ceiling = if saturating {
            *zs.last().unwrap()
        } else {
            f64::INFINITY
        };
        let mut m = Mobility {
            family: Family::Custom {
                interp: MonotoneCubic::new(zs, ms),
            },
            ceiling,
            f_table: None,
            f_at_ceiling: f64::INFINITY,
        };
        m.build_f_table()?;
        Ok(m)
    }

    /// Value ceiling S (positive, possibly infinite).
    pub fn ceiling(&self) -> f64 {
        self.ceiling
    }

    /// min(S, 1): the length scale used for floors and probe meshes.
    pub fn scale(&self) -> f64 {
        self.ceiling.min(1.0)
    }

    pub fn family_name(&self) -> String {
        match &self.family {
            Family::Linear => "linear".into(),
            Family::Power { beta } => format!("power({beta})"),
            Family::DoublePower { beta1, beta2 } => {
                format!("double_power({beta1},{beta2},S={})", self.ceiling)
            }
            Family::Regularized { base, delta, .. } => {
                format!("regularized({}, delta={delta})", base.family_name())
            }
            Family::Custom { .. } => "custom".into(),
        }
    }

    pub fn is_regularized(&self) -> bool {
        matches!(self.family, Family::Regularized { .. })
    }

    // ------------------------------------------------------------------
    // Pointwise evaluation
    // ------------------------------------------------------------------

    pub fn m(&self, z: f64) -> f64 {
        match &self.family {
            Family::Linear => z,
            Family::Power { beta } => {
                if z <= 0.0 {
                    0.0
                } else {
                    z.powf(*beta)
                }
            }
            Family::DoublePower { beta1, beta2 } => {
                let s = self.ceiling;
                if z <= 0.0 || z >= s {
                    0.0
                } else {
                    z.powf(*beta1) * (s - z).powf(*beta2)
                }
            }
            Family::Regularized {
                base,
                shift,
                scale,
                sub0,
                sub_slope,
                ..
            } => (base.m(shift + scale * z) - sub0 - sub_slope * z).max(0.0),
            Family::Custom { interp } => {
                if z <= 0.0 {
                    0.0
                } else if z >= interp.x_max() {
                    interp.eval(interp.x_max())
                } else {
                    interp.eval(z)
                }
            }
        }
    }

    pub fn m_prime(&self, z: f64) -> f64 {
        match &self.family {
            Family::Linear => 1.0,
            Family::Power { beta } => {
                if *beta == 1.0 {
                    1.0
                } else if z <= 0.0 {
                    f64::INFINITY
                } else {
                    beta * z.powf(beta - 1.0)
                }
            }
            Family::DoublePower { beta1, beta2 } => {
                let s = self.ceiling;
                let (a, b) = (*beta1, *beta2);
                if z <= 0.0 {
                    if a == 1.0 {
                        s.powf(b)
                    } else {
                        f64::INFINITY
                    }
                } else if z >= s {
                    if b == 1.0 {
                        -s.powf(a)
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    z.powf(a - 1.0) * (s - z).powf(b - 1.0) * (a * (s - z) - b * z)
                }
            }
            Family::Regularized {
                base,
                shift,
                scale,
                sub_slope,
                ..
            } => scale * base.m_prime(shift + scale * z) - sub_slope,
            Family::Custom { interp } => {
                let z = z.clamp(0.0, interp.x_max());
                interp.eval_derivative(z)
            }
        }
    }

    pub fn m_double_prime(&self, z: f64) -> f64 {
        match &self.family {
            Family::Linear => 0.0,
            Family::Power { beta } => {
                if *beta == 1.0 {
                    0.0
                } else if z <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    beta * (beta - 1.0) * z.powf(beta - 2.0)
                }
            }
            Family::DoublePower { beta1, beta2 } => {
                let s = self.ceiling;
                let (a, b) = (*beta1, *beta2);
                if z <= 0.0 || z >= s {
                    f64::NEG_INFINITY
                } else {
                    z.powf(a - 2.0)
                        * (s - z).powf(b - 2.0)
                        * (a * (a - 1.0) * (s - z) * (s - z) - 2.0 * a * b * z * (s - z)
                            + b * (b - 1.0) * z * z)
                }
            }
            Family::Regularized {
                base, shift, scale, ..
            } => scale * scale * base.m_double_prime(shift + scale * z),
            Family::Custom { interp } => {
                let z = z.clamp(0.0, interp.x_max());
                interp.eval_second_derivative(z)
            }
        }
    }

    /// f'(z) = sqrt(2/m(z)); infinite at the degenerate boundary.
    pub fn f_prime(&self, z: f64) -> f64 {
        let m = self.m(z);
        if m <= 0.0 {
            f64::INFINITY
        } else {
            (2.0 / m).sqrt()
        }
    }

    // ------------------------------------------------------------------
    // The map f and its inverse
    // ------------------------------------------------------------------

    /// f(z) = ∫₀^z sqrt(2/m(r)) dr.
    pub fn f_of(&self, z: f64) -> Result<f64, MobilityError> {
        let z = clamp_to_range(z, self.ceiling);
        if z == 0.0 {
            return Ok(0.0);
        }
        match &self.family {
            Family::Linear => Ok(2.0 * (2.0 * z).sqrt()),
            Family::Power { beta } => {
                let p = 1.0 - 0.5 * beta;
                Ok(SQRT2 / p * z.powf(p))
            }
            Family::DoublePower { beta1, beta2 } if *beta1 == 1.0 && *beta2 == 1.0 => {
                let s = self.ceiling;
                Ok(2.0 * SQRT2 * (z / s).sqrt().asin())
            }
            _ => {
                let table = self
                    .f_table
                    .as_ref()
                    .expect("f table built on construction");
                if z <= table.x_max() {
                    Ok(table.eval(z))
                } else {
                    // Beyond the tabulated span: extend by direct quadrature.
                    Ok(table.eval(table.x_max()) + self.f_segment(table.x_max(), z)?)
                }
            }
        }
    }

    /// f(S): finite exactly when the ceiling is finite.
    pub fn f_at_ceiling(&self) -> f64 {
        if self.ceiling.is_infinite() {
            f64::INFINITY
        } else if let Some(t) = &self.f_table {
            t.eval(t.x_max())
        } else {
            self.f_at_ceiling
        }
    }

    /// g(w) = f⁻¹(w), solved by bisection refined with Newton steps
    /// (g'(w) = sqrt(m(g)/2)).
    pub fn f_inverse(&self, w: f64) -> Result<f64, MobilityError> {
        if w < 0.0 || (self.ceiling.is_finite() && w >= self.f_at_ceiling() * (1.0 + 1e-12)) {
            return Err(MobilityError::OutOfRange {
                w,
                f_at_ceiling: self.f_at_ceiling(),
            });
        }
        if w == 0.0 {
            return Ok(0.0);
        }
        match &self.family {
            Family::Linear => Ok(w * w / 8.0),
            Family::Power { beta } => {
                let p = 1.0 - 0.5 * beta;
                Ok((p * w / SQRT2).powf(1.0 / p))
            }
            Family::DoublePower { beta1, beta2 } if *beta1 == 1.0 && *beta2 == 1.0 => {
                let s = self.ceiling;
                let t = (w / (2.0 * SQRT2)).min(0.5 * std::f64::consts::PI);
                Ok(s * t.sin().powi(2))
            }
            _ => {
                // Bracket in z, then bisection + Newton on f(z) - w = 0.
                let mut hi = self
                    .f_table
                    .as_ref()
                    .map(|t| t.x_max())
                    .unwrap_or(DEFAULT_TABLE_SPAN);
                if self.ceiling.is_infinite() {
                    let mut guard = 0;
                    while self.f_of(hi)? < w {
                        hi *= 2.0;
                        guard += 1;
                        if guard > 200 {
                            return Err(MobilityError::DivergentIntegral { z: hi });
                        }
                    }
                } else {
                    hi = self.ceiling;
                }
                let z = bisect_newton(
                    |z| self.f_of(z).unwrap_or(f64::INFINITY) - w,
                    |z| self.f_prime(z),
                    0.0,
                    hi,
                    1e-15,
                )?;
                Ok(z)
            }
        }
    }

    // ------------------------------------------------------------------
    // Entropy integrand h
    // ------------------------------------------------------------------

    /// h(z) = ∫_{s0}^z (z - r)/m(r) dr, extended continuously to the
    /// boundary of the value range. Nonnegative, zero at s0, h'' = 1/m.
    pub fn h_of(&self, s0: f64, z: f64) -> Result<f64, MobilityError> {
        assert!(
            s0 > 0.0 && s0 < self.ceiling,
            "reference density must be interior"
        );
        let z = clamp_to_range(z, self.ceiling);
        match &self.family {
            Family::Linear => {
                if z == 0.0 {
                    Ok(s0)
                } else {
                    Ok(z * (z / s0).ln() - (z - s0))
                }
            }
            Family::Power { beta } if *beta < 1.0 => {
                let b = *beta;
                let t1 = z * (z.powf(1.0 - b) - s0.powf(1.0 - b)) / (1.0 - b);
                let t2 = (z.powf(2.0 - b) - s0.powf(2.0 - b)) / (2.0 - b);
                Ok(t1 - t2)
            }
            Family::Power { .. } => {
                // beta == 1 is the linear closed form.
                if z == 0.0 {
                    Ok(s0)
                } else {
                    Ok(z * (z / s0).ln() - (z - s0))
                }
            }
            Family::DoublePower { beta1, beta2 } if *beta1 == 1.0 && *beta2 == 1.0 => {
                let s = self.ceiling;
                let xlnx = |x: f64, x0: f64| if x <= 0.0 { 0.0 } else { x * (x / x0).ln() };
                Ok((xlnx(z, s0) + xlnx(s - z, s - s0)) / s)
            }
            _ => {
                // (z - r)/m(r) is bounded on the integration interval thanks
                // to concavity (the chord through the degenerate endpoint
                // lies below m), so plain adaptive quadrature suffices.
                let value = if z == 0.0 {
                    adaptive_simpson(&|r| r / self.m_guarded(r), 0.0, s0, 1e-12)?
                } else if self.ceiling.is_finite() && z == self.ceiling {
                    let s = self.ceiling;
                    adaptive_simpson(&|r| (s - r) / self.m_guarded(r), s0, s, 1e-12)?
                } else if z >= s0 {
                    adaptive_simpson(&|r| (z - r) / self.m_guarded(r), s0, z, 1e-12)?
                } else {
                    adaptive_simpson(&|r| (r - z) / self.m_guarded(r), z, s0, 1e-12)?
                };
                Ok(value.max(0.0))
            }
        }
    }

    /// m guarded against evaluation noise at the degenerate endpoints: by
    /// concavity the chord through the endpoint lies below the graph, so
    /// near the ends the chord value is a rigorous lower bound that stays
    /// clear of the cancellation plateau of shifted families.
    fn m_guarded(&self, z: f64) -> f64 {
        let mut v = self.m(z);
        let r = 1e-6 * self.scale();
        if z <= r {
            v = v.max(self.m(r) / r * z);
        }
        if self.ceiling.is_finite() {
            let s = self.ceiling;
            if z >= s - r {
                v = v.max(self.m(s - r) / r * (s - z));
            }
        }
        v.max(1e-300)
    }

    // ------------------------------------------------------------------
    // Regularization
    // ------------------------------------------------------------------

    /// The shifted mobility m_δ: for an unbounded range
    /// `m_δ(z) = m(z + z_δ) - δ` with `m(z_δ) = δ`; for a finite range the
    /// two roots `z_{δ,1} < z_{δ,2}` of `m = δ` are mapped onto [0, S] by an
    /// increasing affine change of variable. The result satisfies the same
    /// structural conditions and has a bounded derivative.
    pub fn regularize(&self, delta: f64) -> Result<Mobility, MobilityError> {
        if delta.is_nan() || delta <= 0.0 {
            return Err(MobilityError::DeltaTooLarge { delta });
        }
        let (shift, scale, sub0, sub_slope) = if self.ceiling.is_infinite() {
            // Unique root of m(z) = delta by doubling bracket.
            let mut hi = self.scale();
            let mut guard = 0;
            while self.m(hi) <= delta {
                hi *= 2.0;
                guard += 1;
                if guard > 100 {
                    return Err(MobilityError::DeltaTooLarge { delta });
                }
            }
            let z_delta =
                bisect_newton(|z| self.m(z) - delta, |z| self.m_prime(z), 0.0, hi, 1e-15)?;
            // Subtract m(z_delta) as evaluated so the shift vanishes at 0
            // exactly, not just up to the root-solve tolerance.
            (z_delta, 1.0, self.m(z_delta), 0.0)
        } else {
            let s = self.ceiling;
            // Peak of the concave profile, then one root on each side.
            let z_peak = bisect_newton(
                |z| self.m_prime(z),
                |z| self.m_double_prime(z),
                1e-12 * s,
                s * (1.0 - 1e-12),
                1e-15,
            )?;
            if self.m(z_peak) <= delta {
                return Err(MobilityError::DeltaTooLarge { delta });
            }
            let z1 = bisect_newton(
                |z| self.m(z) - delta,
                |z| self.m_prime(z),
                0.0,
                z_peak,
                1e-15,
            )?;
            let z2 = bisect_newton(|z| self.m(z) - delta, |z| self.m_prime(z), z_peak, s, 1e-15)?;
            let scale = (z2 - z1) / s;
            let (v1, v2) = (self.m(z1), self.m(z1 + scale * s));
            (z1, scale, v1, (v2 - v1) / s)
        };
        let mut reg = Mobility {
            family: Family::Regularized {
                base: Box::new(self.clone()),
                delta,
                shift,
                scale,
                sub0,
                sub_slope,
            },
            ceiling: self.ceiling,
            f_table: None,
            f_at_ceiling: f64::INFINITY,
        };
        reg.build_f_table()?;
        Ok(reg)
    }

    // ------------------------------------------------------------------
    // Diagnostics
    // ------------------------------------------------------------------

    /// f'''(z) f'(z) / f''(z)² evaluated through the mobility identity
    /// 3 - 2 m(z) m''(z) / m'(z)².
    pub fn convexity_ratio(&self, z: f64) -> Result<f64, MobilityError> {
        let mp = self.m_prime(z);
        let mpp = self.m_double_prime(z);
        if mp == 0.0 {
            if mpp < 0.0 {
                return Ok(f64::INFINITY);
            }
            return Err(MobilityError::DerivativeVanishes { z });
        }
        if mp.is_infinite() {
            return Ok(3.0);
        }
        Ok(3.0 - 2.0 * self.m(z) * mpp / (mp * mp))
    }

    /// Analytic Lipschitz-condition decision where the family permits one.
    pub fn lsc_analytic(&self) -> Option<bool> {
        match &self.family {
            Family::Linear => Some(true),
            Family::Power { beta } => Some(*beta == 1.0),
            Family::DoublePower { beta1, beta2 } => Some(*beta1 == 1.0 && *beta2 == 1.0),
            Family::Regularized { .. } => Some(true),
            Family::Custom { .. } => None,
        }
    }

    /// Analytic decision of the boundary-singularity condition
    /// (every exponent in (2/3, 1]); `None` when only a numeric probe works.
    pub fn ms_analytic(&self) -> Option<bool> {
        match &self.family {
            Family::Linear => Some(true),
            Family::Power { beta } => Some(*beta > 2.0 / 3.0),
            Family::DoublePower { beta1, beta2 } => Some(*beta1 > 2.0 / 3.0 && *beta2 > 2.0 / 3.0),
            Family::Regularized { .. } => Some(true),
            Family::Custom { .. } => None,
        }
    }

    /// Numeric probe of m'(z)² f(z) at geometrically shrinking z
    /// (and the mirrored probe at the ceiling when finite): the condition
    /// holds when the probe trend is monotonically decreasing towards 0.
    pub fn ms_probe(&self) -> Result<bool, MobilityError> {
        let s = self.scale();
        let mut ok = true;
        let mut prev = f64::INFINITY;
        for e in [1e-4, 1e-6, 1e-8] {
            let z = e * s;
            let v = self.m_prime(z).powi(2) * self.f_of(z)?;
            if v >= prev || !v.is_finite() {
                ok = false;
            }
            prev = v;
        }
        if self.ceiling.is_finite() {
            let fs = self.f_at_ceiling();
            let mut prev = f64::INFINITY;
            for e in [1e-4, 1e-6, 1e-8] {
                let z = self.ceiling * (1.0 - e);
                let v = self.m_prime(z).powi(2) * (fs - self.f_of(z)?);
                if v >= prev || !v.is_finite() {
                    ok = false;
                }
                prev = v;
            }
        }
        Ok(ok)
    }

    pub fn pg_exponents(&self) -> Option<(f64, f64)> {
        if self.ceiling.is_finite() {
            return None;
        }
        match &self.family {
            Family::Linear => Some((1.0, 1.0)),
            Family::Power { beta } => Some((*beta, *beta)),
            Family::Regularized { base, .. } => base.pg_exponents(),
            _ => None,
        }
    }

    /// Structural validation on a sample mesh: positivity and concavity are
    /// hard gates, the remaining conditions become report flags.
    pub fn validate(&self, sample_mesh: &[f64]) -> Result<MobilityReport, MobilityError> {
        // Tabulated mobilities are checked for concavity on their data (the
        // interpolant preserves monotonicity, not concavity, between nodes);
        // analytic families are gated on the second derivative directly.
        if let Family::Custom { interp } = &self.family {
            let (zs, ms) = interp.nodes();
            let mut prev_secant = f64::INFINITY;
            for i in 1..zs.len() {
                let secant = (ms[i] - ms[i - 1]) / (zs[i] - zs[i - 1]);
                if secant > prev_secant * (1.0 + 1e-9) + 1e-12 {
                    return Err(MobilityError::NonConcave {
                        z: zs[i],
                        second: secant - prev_secant,
                    });
                }
                prev_secant = secant;
            }
        }
        let data_checked = matches!(self.family, Family::Custom { .. });
        let mut sup_m_prime = 0.0f64;
        let mut ratio_min = f64::INFINITY;
        for &z in sample_mesh {
            assert!(z > 0.0 && z < self.ceiling, "mesh must be interior");
            let v = self.m(z);
            if v <= 0.0 {
                return Err(MobilityError::NonPositive { z, value: v });
            }
            if !data_checked {
                let mpp = self.m_double_prime(z);
                let tol = 1e-9 * (1.0 + mpp.abs());
                if mpp > tol {
                    return Err(MobilityError::NonConcave { z, second: mpp });
                }
            }
            let mp = self.m_prime(z);
            if mp.is_finite() {
                sup_m_prime = sup_m_prime.max(mp.abs());
            } else {
                sup_m_prime = f64::INFINITY;
            }
            match self.convexity_ratio(z) {
                Ok(r) => ratio_min = ratio_min.min(r),
                Err(MobilityError::DerivativeVanishes { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let lsc = self.lsc_analytic().unwrap_or(sup_m_prime < 1e8);
        let ms_ok = if lsc {
            true // the singularity condition is vacuous under bounded m'
        } else {
            match self.ms_analytic() {
                Some(v) => v,
                None => self.ms_probe()?,
            }
        };
        Ok(MobilityReport {
            lsc,
            sup_m_prime,
            pg_exponents: self.pg_exponents(),
            ms_ok,
            // Positivity and concavity are hard gates above, so a returned
            // report always carries a passing flag.
            concavity_ok: true,
            convexity_ratio_min: ratio_min,
        })
    }

    /// Default log-spaced interior validation mesh with boundary clustering.
    pub fn default_mesh(&self, n: usize) -> Vec<f64> {
        if self.ceiling.is_finite() {
            let s = self.ceiling;
            let half = log_mesh(1e-8 * s, 0.5 * s, n / 2);
            let mut mesh = half.clone();
            mesh.extend(half.iter().rev().map(|z| s - z));
            mesh
        } else {
            match &self.family {
                Family::Custom { interp } => {
                    // Tables carry no information below their first positive
                    // node; sample only where data exists.
                    let (zs, _) = interp.nodes();
                    log_mesh(zs[1], interp.x_max() * (1.0 - 1e-9), n)
                }
                _ => log_mesh(1e-8, 10.0f64.max(self.scale() * 10.0), n),
            }
        }
    }

    // ------------------------------------------------------------------
    // Internals
    // ------------------------------------------------------------------

    /// ∫_lo^hi sqrt(2/m) with integrable endpoint singularities removed by
    /// the substitution r = t² (resp. r = S - t²).
    fn f_segment(&self, lo: f64, hi: f64) -> Result<f64, MobilityError> {
        assert!(lo >= 0.0 && hi >= lo);
        if hi == lo {
            return Ok(0.0);
        }
        let s = self.ceiling;
        let mut total = 0.0;
        let mut a = lo;
        let mut b = hi;
        if lo == 0.0 {
            // Split at 1e-3·min(hi, 1) and substitute r = t² below it.
            let split = (1e-3 * hi.min(1.0)).min(hi);
            let g = |t: f64| 2.0 * t * (2.0 / self.m_guarded(t * t)).sqrt();
            total += adaptive_simpson(&g, 0.0, split.sqrt(), 1e-12)?;
            a = split;
        }
        if s.is_finite() {
            let eps = 1e-3 * s.min(1.0);
            if hi > s - eps {
                let split = (s - eps).max(a);
                let g = |t: f64| 2.0 * t * (2.0 / self.m_guarded(s - t * t)).sqrt();
                total += adaptive_simpson(&g, (s - hi).max(0.0).sqrt(), (s - split).sqrt(), 1e-12)?;
                b = split;
            }
        }
        if b > a {
            total += adaptive_simpson(&|r| (2.0 / self.m_guarded(r)).sqrt(), a, b, 1e-12)?;
        }
        Ok(total)
    }

    /// Tabulate f on log-spaced nodes (clustered at both degenerate ends for
    /// a finite ceiling) and fit a monotone cubic through the values.
    fn build_f_table(&mut self) -> Result<(), MobilityError> {
        let nodes = if self.ceiling.is_finite() {
            let s = self.ceiling;
            let half = TABLE_NODES / 2;
            let mut zs = vec![0.0];
            zs.extend(log_mesh(1e-10 * s, 0.5 * s, half));
            let upper = log_mesh(1e-10 * s, 0.5 * s, half);
            zs.extend(upper.iter().rev().skip(1).map(|z| s - z));
            zs.push(s);
            zs
        } else {
            let span = match &self.family {
                Family::Custom { interp } => interp.x_max(),
                _ => DEFAULT_TABLE_SPAN,
            };
            let mut zs = vec![0.0];
            zs.extend(log_mesh(1e-10 * span.min(1.0), span, TABLE_NODES));
            zs
        };
        let mut values = Vec::with_capacity(nodes.len());
        values.push(0.0);
        for w in nodes.windows(2) {
            let inc = self.f_segment(w[0], w[1])?;
            values.push(values.last().unwrap() + inc);
        }
        if self.ceiling.is_finite() {
            self.f_at_ceiling = *values.last().unwrap();
        }
        self.f_table = Some(MonotoneCubic::new(nodes, values));
        Ok(())
    }
}

fn clamp_to_range(z: f64, ceiling: f64) -> f64 {
    debug_assert!(
        z > -1e-9 * ceiling.min(1.0) && z < ceiling * (1.0 + 1e-9) + 1e-9,
        "density {z} grossly outside [0, {ceiling}]"
    );
    z.clamp(0.0, ceiling)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!(
            (a - b).abs() <= tol * (1.0 + b.abs()),
            "{what}: {a} vs {b} (tol {tol})"
        );
    }

    // Independent quadrature of sqrt(2/m) with endpoint substitution, used
    // as the oracle for the closed forms. The floor keeps the integrand
    // finite at the substituted endpoint where the true limit is finite.
    fn f_quad_oracle(m: &Mobility, z: f64) -> f64 {
        let mf = |z: f64| m.m(z).max(1e-300);
        let lo_split = 1e-4 * z.min(1.0);
        let g = |t: f64| 2.0 * t * (2.0 / mf(t * t)).sqrt();
        let singular = adaptive_simpson(&g, 0.0, lo_split.sqrt(), 1e-13).unwrap();
        let (a, mut b) = (lo_split, z);
        let mut upper = 0.0;
        if m.ceiling().is_finite() {
            let s = m.ceiling();
            if z > 0.99 * s {
                b = 0.99 * s;
                let gu = |t: f64| 2.0 * t * (2.0 / mf(s - t * t)).sqrt();
                upper = adaptive_simpson(&gu, (s - z).sqrt(), (s - b).sqrt(), 1e-13).unwrap();
            }
        }
        singular + adaptive_simpson(&|r| (2.0 / mf(r)).sqrt(), a, b, 1e-13).unwrap() + upper
    }

    #[test]
    fn f_linear_closed_form() {
        let m = Mobility::linear();
        assert_close(m.f_of(2.0).unwrap(), 4.0, 1e-14, "f(2) linear");
        assert_eq!(m.f_of(0.0).unwrap(), 0.0);
        // Quadrature oracle across a log mesh.
        for &z in &[1e-6, 1e-3, 0.5, 1.0, 7.3] {
            assert_close(
                m.f_of(z).unwrap(),
                f_quad_oracle(&m, z),
                1e-9,
                "f linear vs quadrature",
            );
        }
    }

    #[test]
    fn f_double_power_closed_form() {
        let m = Mobility::double_power(1.0, 1.0, 1.0);
        let expected = 2.0 * SQRT2 * (0.5f64).sqrt().asin(); // pi/sqrt(2)
        assert_close(m.f_of(0.5).unwrap(), expected, 1e-14, "f(1/2) double power");
        assert_close(
            expected,
            std::f64::consts::PI / SQRT2,
            1e-15,
            "arcsin identity",
        );
        for &z in &[1e-6, 0.1, 0.5, 0.9, 0.999999] {
            assert_close(
                m.f_of(z).unwrap(),
                f_quad_oracle(&m, z),
                1e-8,
                "f double power vs quadrature",
            );
        }
        assert_close(
            m.f_at_ceiling(),
            std::f64::consts::PI * SQRT2,
            1e-12,
            "f(S)",
        );
    }

    #[test]
    fn f_double_power_general_exponents_via_table() {
        // No closed form for non-unit exponents: the tabulated route has to
        // handle integrable singularities at both range ends.
        let m = Mobility::double_power(0.8, 0.9, 1.0);
        let fs = m.f_at_ceiling();
        assert!(fs.is_finite() && fs > 0.0, "f(S) = {fs}");
        for &z in &[1e-6, 1e-3, 0.2, 0.5, 0.8, 1.0 - 1e-6] {
            assert_close(
                m.f_of(z).unwrap(),
                f_quad_oracle(&m, z),
                2e-6,
                "tabulated double power vs quadrature",
            );
        }
        // Round trip across the interior.
        for &z in log_mesh(1e-6, 1.0 - 1e-6, 30).iter() {
            let back = m.f_inverse(m.f_of(z).unwrap()).unwrap();
            assert!(
                (back - z).abs() <= 1e-10 * (1.0 + z.abs()),
                "round trip at z={z}: {back}"
            );
        }
        // Structural flags: unbounded derivative at both ends, exponents in
        // the admissible singularity range.
        let report = m.validate(&m.default_mesh(4000)).unwrap();
        assert!(!report.lsc);
        assert!(report.ms_ok);
        assert!(report.convexity_ratio_min >= 3.0 - 1e-9);
        assert_eq!(report.pg_exponents, None);
        // Regularized version is admissible for the direct route.
        let reg = m.regularize(0.05).unwrap();
        let rep = reg.validate(&reg.default_mesh(2000)).unwrap();
        assert!(rep.lsc);
        assert_eq!(reg.m(0.0), 0.0);
        assert_eq!(reg.m(1.0), 0.0);
    }

    #[test]
    fn f_power_tabulated_matches_quadrature() {
        // Non-closed-form route: custom table of the same power law.
        let zs: Vec<f64> = std::iter::once(0.0)
            .chain(log_mesh(1e-9, 4.0, 400))
            .collect();
        let ms: Vec<f64> = zs.iter().map(|z| z.powf(0.8)).collect();
        let custom = Mobility::custom(zs, ms).unwrap();
        let power = Mobility::power(0.8);
        for &z in &[1e-3, 0.1, 1.0, 3.0] {
            assert_close(
                custom.f_of(z).unwrap(),
                power.f_of(z).unwrap(),
                2e-5,
                "custom table f vs closed form",
            );
        }
    }

    #[test]
    fn f_inverse_round_trip() {
        for m in [
            Mobility::linear(),
            Mobility::power(0.8),
            Mobility::double_power(1.0, 1.0, 1.0),
            Mobility::power(0.8).regularize(0.05).unwrap(),
        ] {
            let hi = if m.ceiling().is_finite() {
                m.ceiling() * (1.0 - 1e-6)
            } else {
                10.0
            };
            for &z in log_mesh(1e-8, hi, 40).iter() {
                let w = m.f_of(z).unwrap();
                let back = m.f_inverse(w).unwrap();
                assert!(
                    (back - z).abs() <= 1e-10 * (1.0 + z.abs()),
                    "round trip {} at z={z}: got {back}",
                    m.family_name()
                );
            }
        }
    }

    #[test]
    fn f_inverse_closed_forms() {
        let m = Mobility::linear();
        assert_close(m.f_inverse(4.0).unwrap(), 2.0, 1e-14, "g(4) linear");
        assert_eq!(m.f_inverse(0.0).unwrap(), 0.0);
        let dp = Mobility::double_power(1.0, 1.0, 1.0);
        assert_close(
            dp.f_inverse(std::f64::consts::PI / SQRT2).unwrap(),
            0.5,
            1e-12,
            "g(pi/sqrt2) double power",
        );
    }

    #[test]
    fn f_inverse_out_of_range() {
        let dp = Mobility::double_power(1.0, 1.0, 1.0);
        let e = dp.f_inverse(dp.f_at_ceiling() + 0.5);
        assert!(matches!(e, Err(MobilityError::OutOfRange { .. })));
        assert!(matches!(
            dp.f_inverse(-1.0),
            Err(MobilityError::OutOfRange { .. })
        ));
    }

    #[test]
    fn h_linear_closed_form() {
        let m = Mobility::linear();
        assert_eq!(m.h_of(1.0, 1.0).unwrap(), 0.0);
        assert_close(
            m.h_of(1.0, std::f64::consts::E).unwrap(),
            1.0,
            1e-14,
            "h(e)",
        );
        assert_close(
            m.h_of(1.0, 0.5).unwrap(),
            0.5 * (0.5f64).ln() - 0.5 + 1.0,
            1e-14,
            "h(1/2)",
        );
        // Quadrature oracle for a non-closed-form evaluation path.
        let quad = adaptive_simpson(&|r| (2.5 - r) / r, 1.0, 2.5, 1e-13).unwrap();
        assert_close(m.h_of(1.0, 2.5).unwrap(), quad, 1e-11, "h vs quadrature");
    }

    #[test]
    fn h_is_nonnegative_convex_and_zero_at_s0() {
        for m in [
            Mobility::linear(),
            Mobility::power(0.8),
            Mobility::double_power(1.0, 1.0, 1.0),
        ] {
            let s0 = 0.4 * m.scale();
            let hi = if m.ceiling().is_finite() {
                m.ceiling()
            } else {
                5.0
            };
            let mesh: Vec<f64> = (0..=60).map(|i| hi * i as f64 / 60.0).collect();
            let vals: Vec<f64> = mesh.iter().map(|&z| m.h_of(s0, z).unwrap()).collect();
            for (i, v) in vals.iter().enumerate() {
                assert!(*v >= -1e-13, "h >= 0 failed for {}", m.family_name());
                if (mesh[i] - s0).abs() > 1e-3 {
                    assert!(*v > 0.0, "h should vanish only at s0 ({})", m.family_name());
                }
            }
            assert!(m.h_of(s0, s0).unwrap().abs() < 1e-12);
            // Positive second differences (convexity) on the interior.
            for w in vals.windows(3) {
                assert!(w[0] - 2.0 * w[1] + w[2] > -1e-9);
            }
        }
    }

    #[test]
    fn regularize_linear_is_identity() {
        for delta in [0.1, 0.01] {
            let m = Mobility::linear().regularize(delta).unwrap();
            for &z in log_mesh(1e-8, 50.0, 200).iter() {
                assert!((m.m(z) - z).abs() <= 1e-12 * (1.0 + z));
            }
            assert_eq!(m.m(0.0), 0.0);
        }
    }

    #[test]
    fn regularize_double_power_closed_form() {
        // Roots of z(1-z) = 0.09 are 0.1 and 0.9.
        let m = Mobility::double_power(1.0, 1.0, 1.0)
            .regularize(0.09)
            .unwrap();
        for i in 0..=100 {
            let z = i as f64 / 100.0;
            let expected = 0.64 * z * (1.0 - z);
            assert!(
                (m.m(z) - expected).abs() < 1e-12,
                "m_delta({z}) = {} vs {expected}",
                m.m(z)
            );
        }
    }

    #[test]
    fn regularize_pointwise_ordering() {
        let m = Mobility::power(0.8);
        let m0 = m.regularize(0.02).unwrap();
        let m1 = m.regularize(0.1).unwrap();
        for &z in log_mesh(1e-6, 8.0, 300).iter() {
            let (v, v0, v1) = (m.m(z), m0.m(z), m1.m(z));
            assert!(v1 <= v0 + 1e-13 && v0 <= v + 1e-13, "ordering at z={z}");
        }
    }

    #[test]
    fn regularize_too_large_delta() {
        let dp = Mobility::double_power(1.0, 1.0, 1.0); // max m = 1/4
        assert!(matches!(
            dp.regularize(0.3),
            Err(MobilityError::DeltaTooLarge { .. })
        ));
    }

    #[test]
    fn regularized_passes_validation_with_lsc() {
        for delta in [0.1, 0.05, 0.01, 0.001] {
            let m = Mobility::power(0.8).regularize(delta).unwrap();
            let report = m.validate(&m.default_mesh(2000)).unwrap();
            assert!(report.lsc, "delta={delta}");
            assert!(report.concavity_ok);
            assert!(report.convexity_ratio_min >= 3.0 - 1e-9);
        }
    }

    #[test]
    fn convexity_ratio_values() {
        let lin = Mobility::linear();
        assert_close(lin.convexity_ratio(0.7).unwrap(), 3.0, 1e-15, "linear");
        let dp = Mobility::double_power(1.0, 1.0, 1.0);
        assert_close(
            dp.convexity_ratio(0.25).unwrap(),
            6.0,
            1e-12,
            "double power",
        );
        let p = Mobility::power(0.8);
        assert_close(p.convexity_ratio(1.0).unwrap(), 3.5, 1e-12, "power 0.8");
        // Derivative vanishes at the symmetric peak but m'' < 0 there.
        assert!(dp.convexity_ratio(0.5).unwrap().is_infinite());
    }

    #[test]
    fn validate_flags_per_family() {
        let lin = Mobility::linear();
        let r = lin.validate(&lin.default_mesh(500)).unwrap();
        assert!(r.lsc && r.ms_ok && r.concavity_ok);
        assert_close(r.convexity_ratio_min, 3.0, 1e-12, "linear ratio min");

        let p8 = Mobility::power(0.8);
        let r = p8.validate(&p8.default_mesh(500)).unwrap();
        assert!(!r.lsc && r.ms_ok);
        assert_eq!(r.pg_exponents, Some((0.8, 0.8)));

        let p5 = Mobility::power(0.5);
        let r = p5.validate(&p5.default_mesh(500)).unwrap();
        assert!(!r.lsc && !r.ms_ok);
    }

    #[test]
    fn ms_analytic_matches_numeric_probe() {
        for (beta, expected) in [(0.5, false), (0.7, true), (0.8, true), (0.9, true)] {
            let m = Mobility::power(beta);
            assert_eq!(m.ms_analytic(), Some(expected), "analytic beta={beta}");
            assert_eq!(m.ms_probe().unwrap(), expected, "probe beta={beta}");
        }
    }

    #[test]
    fn nonconcave_custom_is_rejected() {
        // Convex table: m = z^2 (scaled), strictly convex.
        let zs: Vec<f64> = (0..64).map(|i| i as f64 / 16.0).collect();
        let ms: Vec<f64> = zs.iter().map(|z| z * z).collect();
        let m = Mobility::custom(zs, ms).unwrap();
        let mesh = log_mesh(1e-3, 3.5, 100);
        assert!(matches!(
            m.validate(&mesh),
            Err(MobilityError::NonConcave { .. })
        ));
    }
}
