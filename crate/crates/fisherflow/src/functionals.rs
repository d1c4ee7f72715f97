//! Discrete energy and entropy functionals, the first variation of the
//! energy, and the weak-form residual used as the convergence diagnostic.
//!
//! The energy is F(u) = 1/2 Σ |D f(u)|² Δx with `f` from the mobility; for
//! linear mobility this reduces cellwise-exactly to 4 Σ |D √u|² Δx. The
//! first variation is -f'(u)·D²f(u), the discrete L² gradient of F under
//! the no-flux operators (summation by parts makes the pairing exact).

use crate::grid::DensityField;
use crate::mobility::{Mobility, MobilityError};

/// Energy/entropy summary for one state.
#[derive(Debug, Clone, Copy)]
pub struct EnergyBreakdown {
    pub fisher: f64,
    pub entropy: f64,
    /// Σ |D f(u)|² Δx
    pub grad_f_sq: f64,
    /// Σ |D² f(u)|² Δx
    pub hess_f_sq: f64,
}

/// Reference density for the entropy integrand: the mean density clamped
/// into the middle of the admissible range.
pub fn default_s0(m: &Mobility, mass: f64, length: f64) -> f64 {
    let mean = mass / length;
    let cap = m.ceiling().min(2.0 * mean);
    mean.clamp(0.1 * cap, 0.9 * cap)
}

/// f applied cellwise.
pub fn f_cellwise(u: &DensityField, m: &Mobility) -> Result<Vec<f64>, MobilityError> {
    u.values.iter().map(|&z| m.f_of(z)).collect()
}

/// Clamp used wherever f' or m' appear as coefficients: the weak form only
/// multiplies them by factors vanishing at the degeneracy, so a floor of
/// 1e-12·min(S,1) prevents overflow without touching interior dynamics.
fn coefficient_clamp(z: f64, m: &Mobility) -> f64 {
    let eps = 1e-12 * m.scale();
    z.clamp(eps, m.ceiling() - eps)
}

/// F(u) = 1/2 Σ_faces |D f(u)|² Δx.
pub fn fisher_energy(u: &DensityField, m: &Mobility) -> Result<f64, MobilityError> {
    let fu = f_cellwise(u, m)?;
    let grad = u.grid.d_face(&fu);
    Ok(0.5 * grad.iter().map(|g| g * g).sum::<f64>() * u.grid.dx())
}

/// H(u) = Σ h(u_i) Δx (nonnegative, zero iff u ≡ s0).
pub fn heat_entropy(u: &DensityField, m: &Mobility, s0: f64) -> Result<f64, MobilityError> {
    let mut total = 0.0;
    for &z in &u.values {
        total += m.h_of(s0, z)?;
    }
    Ok(total * u.grid.dx())
}

pub fn energy_breakdown(
    u: &DensityField,
    m: &Mobility,
    s0: f64,
) -> Result<EnergyBreakdown, MobilityError> {
    let fu = f_cellwise(u, m)?;
    let dx = u.grid.dx();
    let grad = u.grid.d_face(&fu);
    let hess = u.grid.d2_cell(&fu);
    let grad_f_sq = grad.iter().map(|g| g * g).sum::<f64>() * dx;
    let hess_f_sq = hess.iter().map(|h| h * h).sum::<f64>() * dx;
    Ok(EnergyBreakdown {
        fisher: 0.5 * grad_f_sq,
        entropy: heat_entropy(u, m, s0)?,
        grad_f_sq,
        hess_f_sq,
    })
}

/// Empirical ratio H / (F^q + 1); the constant in the entropy-energy bound
/// is not explicit, so the ratio is reported rather than asserted.
pub fn entropy_bound_ratio(
    u: &DensityField,
    m: &Mobility,
    s0: f64,
    q: f64,
) -> Result<f64, MobilityError> {
    let f = fisher_energy(u, m)?;
    let h = heat_entropy(u, m, s0)?;
    Ok(h / (f.powf(q) + 1.0))
}

/// δF/δu = -f'(u)·D²f(u) cellwise (sign fixed by summation by parts).
pub fn first_variation(u: &DensityField, m: &Mobility) -> Result<Vec<f64>, MobilityError> {
    let fu = f_cellwise(u, m)?;
    let lap = u.grid.d2_cell(&fu);
    Ok(u.values
        .iter()
        .zip(&lap)
        .map(|(&z, &l)| -m.f_prime(coefficient_clamp(z, m)) * l)
        .collect())
}

/// Flux-form divergence div(m(u)_face · D p): the spatial operator of the
/// evolution. Boundary faces carry zero flux, so the discrete mean vanishes
/// to rounding — the mass-conservation identity.
pub fn metric_divergence(u: &DensityField, m: &Mobility, potential: &[f64]) -> Vec<f64> {
    let grid = u.grid;
    let dp = grid.d_face(potential);
    let mut flux = vec![0.0; grid.cells + 1];
    for i in 1..grid.cells {
        let m_face = 0.5 * (m.m(u.values[i - 1]) + m.m(u.values[i]));
        flux[i] = m_face * dp[i];
    }
    grid.div_face(&flux)
}

/// Which algebraic form of the weak-form transport coefficient to evaluate;
/// the two agree pointwise through f' = sqrt(2/m).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportTermForm {
    /// f'(u)·D²f(u)·[m'(u)∇u·∇φ + m(u)Δφ]
    Mobility,
    /// √2·D²f(u)·[2(√m)'(u)∇u·∇φ + √m(u)Δφ]
    SqrtMobility,
}

/// Spatial transport term of the weak form against the test field φ,
/// Σ_i f'(u)D²f(u)[∇m(u)·∇φ + m(u)Δφ] Δx, with cell-centered gradients and
/// the chain rule ∇m(u) = m'(u)∇u evaluated pointwise.
pub fn weak_transport_term(
    u: &DensityField,
    m: &Mobility,
    phi: &[f64],
    form: TransportTermForm,
) -> Result<f64, MobilityError> {
    let grid = u.grid;
    let fu = f_cellwise(u, m)?;
    let lap_f = grid.d2_cell(&fu);
    let grad_u = cell_gradient(u);
    let grad_phi = cell_gradient(&DensityField::new(grid, phi.to_vec()));
    let lap_phi = grid.d2_cell(phi);
    let mut total = 0.0;
    for i in 0..grid.cells {
        let z = coefficient_clamp(u.values[i], m);
        let term = match form {
            TransportTermForm::Mobility => {
                m.f_prime(z)
                    * lap_f[i]
                    * (m.m_prime(z) * grad_u[i] * grad_phi[i] + m.m(z) * lap_phi[i])
            }
            TransportTermForm::SqrtMobility => {
                let sqrt_m = m.m(z).sqrt();
                std::f64::consts::SQRT_2
                    * lap_f[i]
                    * (2.0 * (0.5 * m.m_prime(z) / sqrt_m) * grad_u[i] * grad_phi[i]
                        + sqrt_m * lap_phi[i])
            }
        };
        total += term;
    }
    Ok(total * grid.dx())
}

fn cell_gradient(u: &DensityField) -> Vec<f64> {
    let faces = u.grid.d_face(&u.values);
    (0..u.grid.cells)
        .map(|i| 0.5 * (faces[i] + faces[i + 1]))
        .collect()
}

/// Weak-form residual of the evolution over a piecewise-constant-in-time
/// sequence of states: states[n] holds on ((n-1)τ, nτ], states[0] at t = 0.
///
/// φ must satisfy the discrete no-flux condition (cosine modes do); η must
/// be smooth with compact support in (0, NT·τ). The piecewise-constant
/// interpolant is integrated exactly in the ∂_t η term; the η weight per
/// slab uses 5-point Gauss-Legendre.
pub fn weak_form_residual<E: Fn(f64) -> f64>(
    states: &[DensityField],
    tau: f64,
    m: &Mobility,
    phi: &[f64],
    eta: E,
) -> Result<f64, MobilityError> {
    assert!(states.len() >= 2, "need at least one step");
    let grid = states[0].grid;
    let dx = grid.dx();
    let mut residual = 0.0;
    for (n, state) in states.iter().enumerate().skip(1) {
        let t0 = (n - 1) as f64 * tau;
        let t1 = n as f64 * tau;
        // ∫ -∂_t η φ u over the slab: u is constant so the time integral of
        // ∂_t η telescopes exactly.
        let mass_pairing: f64 = state
            .values
            .iter()
            .zip(phi)
            .map(|(ui, pi)| ui * pi)
            .sum::<f64>()
            * dx;
        residual += -(eta(t1) - eta(t0)) * mass_pairing;
        let weight = gauss5(&eta, t0, t1);
        if weight != 0.0 {
            residual += weight * weak_transport_term(state, m, phi, TransportTermForm::Mobility)?;
        }
    }
    Ok(residual)
}

fn gauss5<E: Fn(f64) -> f64>(f: &E, a: f64, b: f64) -> f64 {
    const X: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683,
        0.0,
        0.538_469_310_105_683,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.236_926_885_056_189,
        0.478_628_670_499_366,
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
    ];
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    half * X
        .iter()
        .zip(W.iter())
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
}

/// Smooth bump supported in (0, horizon), used as the temporal test
/// function of the weak-form diagnostic.
pub fn smooth_time_bump(t: f64, horizon: f64) -> f64 {
    let xi = t / horizon;
    if xi <= 0.0 || xi >= 1.0 {
        0.0
    } else {
        (-1.0 / (xi * (1.0 - xi))).exp() * 54.598150033144236 // e^4: peak normalized to 1
    }
}

/// Cosine test mode cos(k·π·x/L) sampled at cell centers; satisfies the
/// mirrored-ghost no-flux condition exactly.
pub fn cosine_mode(grid: crate::grid::Grid1D, k: u32) -> Vec<f64> {
    grid.centers()
        .iter()
        .map(|x| (k as f64 * std::f64::consts::PI * x / grid.length).cos())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid1D;
    use crate::numerics::adaptive_simpson;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cosine_bump(grid: Grid1D) -> DensityField {
        let values = grid
            .centers()
            .iter()
            .map(|x| 1.0 + 0.5 * (std::f64::consts::PI * x / grid.length).cos())
            .collect();
        DensityField::new(grid, values)
    }

    #[test]
    fn fisher_energy_constant_is_zero() {
        let g = Grid1D::new(1.0, 32);
        let u = DensityField::constant(g, 1.0);
        assert_eq!(fisher_energy(&u, &Mobility::linear()).unwrap(), 0.0);
    }

    #[test]
    fn fisher_energy_linear_equals_sqrt_form() {
        let g = Grid1D::new(1.0, 64);
        let u = cosine_bump(g);
        let m = Mobility::linear();
        let f = fisher_energy(&u, &m).unwrap();
        let sqrt_u: Vec<f64> = u.values.iter().map(|v| v.sqrt()).collect();
        let grad = g.d_face(&sqrt_u);
        let alt = 4.0 * grad.iter().map(|v| v * v).sum::<f64>() * g.dx();
        assert!((f - alt).abs() <= 1e-12 * (1.0 + alt), "{f} vs {alt}");
    }

    #[test]
    fn fisher_energy_matches_continuum_quadrature() {
        // u = 1 + 0.5 cos(pi x) on [0,1]: F = ∫ u'^2 / u dx for linear
        // mobility, evaluated by adaptive quadrature on the analytic profile.
        let g = Grid1D::new(1.0, 256);
        let u = cosine_bump(g);
        let f = fisher_energy(&u, &Mobility::linear()).unwrap();
        let pi = std::f64::consts::PI;
        let exact = adaptive_simpson(
            &|x: f64| {
                let du = -0.5 * pi * (pi * x).sin();
                du * du / (1.0 + 0.5 * (pi * x).cos())
            },
            0.0,
            1.0,
            1e-12,
        )
        .unwrap();
        let rel = (f - exact).abs() / exact;
        assert!(rel < 5e-3, "relative error {rel} vs 0.5% budget");
    }

    #[test]
    fn heat_entropy_reference_values() {
        let g = Grid1D::new(1.0, 16);
        let m = Mobility::linear();
        let u = DensityField::constant(g, 1.0);
        assert!(heat_entropy(&u, &m, 1.0).unwrap().abs() < 1e-14);
        let e = DensityField::constant(g, std::f64::consts::E);
        let h = heat_entropy(&e, &m, 1.0).unwrap();
        assert!((h - 1.0).abs() < 1e-12, "H(e) = {h}");
    }

    #[test]
    fn entropy_bound_ratio_is_finite_and_positive() {
        let g = Grid1D::new(1.0, 64);
        let u = cosine_bump(g);
        let m = Mobility::power(0.8);
        let s0 = default_s0(&m, u.mass(), g.length);
        let r = entropy_bound_ratio(&u, &m, s0, 1.0).unwrap();
        assert!(r.is_finite() && r >= 0.0);
    }

    #[test]
    fn first_variation_constant_is_zero() {
        let g = Grid1D::new(1.0, 32);
        let u = DensityField::constant(g, 1.0);
        let fv = first_variation(&u, &Mobility::linear()).unwrap();
        assert!(fv.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn first_variation_linear_closed_form() {
        let g = Grid1D::new(1.0, 64);
        let u = cosine_bump(g);
        let fv = first_variation(&u, &Mobility::linear()).unwrap();
        let sqrt_u: Vec<f64> = u.values.iter().map(|v| v.sqrt()).collect();
        let lap = g.d2_cell(&sqrt_u);
        for i in 0..g.cells {
            let expected = -(4.0 / u.values[i].sqrt()) * lap[i];
            assert!(
                (fv[i] - expected).abs() <= 1e-11 * (1.0 + expected.abs()),
                "cell {i}: {} vs {expected}",
                fv[i]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = Grid1D::new(1.0, 48);
        let u = cosine_bump(g);
        for m in [Mobility::linear(), Mobility::double_power(1.0, 1.0, 4.0)] {
            let fv = first_variation(&u, &m).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let eps = 1e-5;
            for _ in 0..20 {
                let mut dir: Vec<f64> = (0..g.cells).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mean = dir.iter().sum::<f64>() / g.cells as f64;
                dir.iter_mut().for_each(|d| *d -= mean);
                let plus = DensityField::new(
                    g,
                    u.values
                        .iter()
                        .zip(&dir)
                        .map(|(v, d)| v + eps * d)
                        .collect(),
                );
                let minus = DensityField::new(
                    g,
                    u.values
                        .iter()
                        .zip(&dir)
                        .map(|(v, d)| v - eps * d)
                        .collect(),
                );
                let fd = (fisher_energy(&plus, &m).unwrap() - fisher_energy(&minus, &m).unwrap())
                    / (2.0 * eps);
                let pairing: f64 = fv.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() * g.dx();
                assert!(
                    (fd - pairing).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "direction failed for {}: fd={fd}, pairing={pairing}",
                    m.family_name()
                );
            }
        }
    }

    #[test]
    fn metric_divergence_has_zero_mean() {
        let g = Grid1D::new(1.0, 64);
        let u = cosine_bump(g);
        let m = Mobility::linear();
        let fv = first_variation(&u, &m).unwrap();
        let rhs = metric_divergence(&u, &m, &fv);
        let mean = g.integrate(&rhs);
        assert!(mean.abs() < 1e-12, "flux-form mean = {mean:e}");
    }

    #[test]
    fn transport_term_forms_agree() {
        let g = Grid1D::new(1.0, 48);
        let phi = cosine_mode(g, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in [Mobility::linear(), Mobility::power(0.8)] {
            for _ in 0..5 {
                let vals: Vec<f64> = (0..g.cells).map(|_| rng.random_range(0.2..2.0)).collect();
                let u = DensityField::new(g, vals);
                let a = weak_transport_term(&u, &m, &phi, TransportTermForm::Mobility).unwrap();
                let b = weak_transport_term(&u, &m, &phi, TransportTermForm::SqrtMobility).unwrap();
                assert!(
                    (a - b).abs() <= 1e-12 * (1.0 + a.abs()),
                    "{}: {a} vs {b}",
                    m.family_name()
                );
            }
        }
    }

    #[test]
    fn weak_residual_zero_eta_and_constant_state() {
        let g = Grid1D::new(1.0, 32);
        let m = Mobility::linear();
        let phi = cosine_mode(g, 1);
        let states = vec![DensityField::constant(g, 1.0); 6];
        let r0 = weak_form_residual(&states, 0.1, &m, &phi, |_| 0.0).unwrap();
        assert_eq!(r0, 0.0);
        let r1 = weak_form_residual(&states, 0.1, &m, &phi, |t| smooth_time_bump(t, 0.5)).unwrap();
        assert!(r1.abs() < 1e-12, "constant state residual {r1:e}");
    }

    #[test]
    fn time_bump_is_supported_in_the_open_interval() {
        assert_eq!(smooth_time_bump(0.0, 1.0), 0.0);
        assert_eq!(smooth_time_bump(1.0, 1.0), 0.0);
        assert!((smooth_time_bump(0.5, 1.0) - 1.0).abs() < 1e-12);
        assert!(smooth_time_bump(0.25, 1.0) > 0.0);
    }

    #[test]
    fn default_s0_respects_the_range() {
        let lin = Mobility::linear();
        assert!((default_s0(&lin, 1.0, 1.0) - 1.0).abs() < 1e-15);
        let dp = Mobility::double_power(1.0, 1.0, 1.0);
        let s0 = default_s0(&dp, 1.0, 1.0);
        assert!(s0 > 0.0 && s0 < 1.0);
        assert!((s0 - 0.9).abs() < 1e-15);
    }
}
