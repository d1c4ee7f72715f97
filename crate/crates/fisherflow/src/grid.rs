//! Uniform 1-D cell-centered discretization of [0, L] with mirrored-ghost
//! (no-flux) difference operators and Euclidean projection onto the
//! admissible density set {0 <= u <= S, ∫u = U}.
//!
//! All reductions are plain left-to-right sums, so results are deterministic
//! for a fixed input regardless of any threading above this layer.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("target mass {mass} exceeds capacity S·L = {capacity}")]
    Infeasible { mass: f64, capacity: f64 },
    #[error("profile needs {expected} samples, got {got}")]
    SampleCount { expected: usize, got: usize },
}

/// Uniform cell-centered grid on [0, L].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub length: f64,
    pub cells: usize,
}

impl Grid1D {
    pub fn new(length: f64, cells: usize) -> Self {
        assert!(
            length > 0.0 && cells >= 8,
            "need L > 0 and at least 8 cells"
        );
        Grid1D { length, cells }
    }

    pub fn dx(&self) -> f64 {
        self.length / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|i| self.center(i)).collect()
    }

    /// Face-valued forward differences with zero at the two boundary faces
    /// (mirrored ghost cells).
    pub fn d_face(&self, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.cells);
        let dx = self.dx();
        let mut faces = vec![0.0; self.cells + 1];
        for i in 1..self.cells {
            faces[i] = (values[i] - values[i - 1]) / dx;
        }
        faces
    }

    /// Cell-valued second differences, exact divergence of `d_face` so that
    /// summation by parts holds to rounding.
    pub fn d2_cell(&self, values: &[f64]) -> Vec<f64> {
        let faces = self.d_face(values);
        self.div_face(&faces)
    }

    /// Divergence of a face field into cells.
    pub fn div_face(&self, faces: &[f64]) -> Vec<f64> {
        assert_eq!(faces.len(), self.cells + 1);
        let dx = self.dx();
        (0..self.cells)
            .map(|i| (faces[i + 1] - faces[i]) / dx)
            .collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.dx()
    }
}

/// Nonnegative cell density with fixed mass; the upper bound S comes from
/// the mobility in use.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: Grid1D,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.cells);
        DensityField { grid, values }
    }

    pub fn constant(grid: Grid1D, mass: f64) -> Self {
        DensityField {
            grid,
            values: vec![mass / grid.length; grid.cells],
        }
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Membership in the admissible set up to `tol` on bounds and mass.
    pub fn in_admissible_set(&self, mass: f64, ceiling: f64, tol: f64) -> bool {
        self.min() >= -tol
            && self.max() <= ceiling + tol
            && (self.mass() - mass).abs() <= tol.max(1e-12)
    }

    pub fn rel_l2_distance(&self, other: &DensityField) -> f64 {
        assert_eq!(self.grid, other.grid);
        let dx = self.grid.dx();
        let diff: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b) * dx)
            .sum();
        let norm: f64 = other.values.iter().map(|b| b * b * dx).sum();
        (diff / norm.max(1e-300)).sqrt()
    }
}

/// Euclidean projection onto {0 <= u <= S, ∫u dx = U}: clip a uniformly
/// shifted copy, with the shift found by bisection and polished by a few
/// Newton steps on the (piecewise-linear) mass response.
pub fn project_constraints(
    field: &DensityField,
    mass: f64,
    ceiling: f64,
) -> Result<DensityField, GridError> {
    let grid = field.grid;
    let dx = grid.dx();
    let capacity = ceiling * grid.length;
    if mass > capacity * (1.0 + 1e-12) {
        return Err(GridError::Infeasible { mass, capacity });
    }
    // Fast path: already feasible (makes the projection exactly idempotent).
    if field.min() >= 0.0
        && field.max() <= ceiling
        && (field.mass() - mass).abs() <= 1e-13 * mass.max(1.0)
    {
        return Ok(field.clone());
    }
    let clipped_mass = |shift: f64| -> f64 {
        field
            .values
            .iter()
            .map(|v| (v + shift).clamp(0.0, ceiling))
            .sum::<f64>()
            * dx
    };
    let vmax = field.max();
    let vmin = field.min();
    let mut lo = -vmax;
    let mut hi = if ceiling.is_finite() {
        ceiling - vmin
    } else {
        mass / grid.length - vmin + 1.0
    };
    debug_assert!(clipped_mass(lo) <= mass && clipped_mass(hi) >= mass - 1e-12);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if clipped_mass(mid) < mass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut shift = 0.5 * (lo + hi);
    // Newton polish on the active set.
    for _ in 0..4 {
        let current = clipped_mass(shift);
        let active = field
            .values
            .iter()
            .filter(|v| {
                let s = *v + shift;
                s > 0.0 && s < ceiling
            })
            .count();
        if active == 0 {
            break;
        }
        shift += (mass - current) / (active as f64 * dx);
    }
    let values: Vec<f64> = field
        .values
        .iter()
        .map(|v| (v + shift).clamp(0.0, ceiling))
        .collect();
    Ok(DensityField::new(grid, values))
}

/// Named initial profiles accepted by the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    /// u ≡ U/L.
    Constant { mass: f64 },
    /// base + amplitude·cos(mode·π·x/L); discrete mass is base·L exactly.
    Cosine {
        base: f64,
        amplitude: f64,
        mode: u32,
    },
    /// height·exp(-(x-center)²/(2·width²)), clamped and projected.
    Gaussian {
        center: f64,
        width: f64,
        height: f64,
    },
    /// Explicit per-cell samples (e.g. a CSV column).
    Samples(Vec<f64>),
}

impl Profile {
    pub fn raw_values(&self, grid: Grid1D) -> Result<Vec<f64>, GridError> {
        match self {
            Profile::Constant { mass } => Ok(vec![mass / grid.length; grid.cells]),
            Profile::Cosine {
                base,
                amplitude,
                mode,
            } => Ok(grid
                .centers()
                .iter()
                .map(|x| {
                    base + amplitude * (*mode as f64 * std::f64::consts::PI * x / grid.length).cos()
                })
                .collect()),
            Profile::Gaussian {
                center,
                width,
                height,
            } => Ok(grid
                .centers()
                .iter()
                .map(|x| height * (-(x - center) * (x - center) / (2.0 * width * width)).exp())
                .collect()),
            Profile::Samples(v) => {
                if v.len() != grid.cells {
                    return Err(GridError::SampleCount {
                        expected: grid.cells,
                        got: v.len(),
                    });
                }
                Ok(v.clone())
            }
        }
    }

    /// Build, project onto the constraint set, and report the largest
    /// per-cell displacement the projection caused.
    pub fn load(
        &self,
        grid: Grid1D,
        mass: Option<f64>,
        ceiling: f64,
    ) -> Result<(DensityField, f64), GridError> {
        let raw = self.raw_values(grid)?;
        let raw_field = DensityField::new(grid, raw);
        let target = mass.unwrap_or_else(|| raw_field.mass());
        let projected = project_constraints(&raw_field, target, ceiling)?;
        let displacement = raw_field
            .values
            .iter()
            .zip(&projected.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        Ok((projected, displacement))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_has_zero_operators() {
        let g = Grid1D::new(2.0, 16);
        let u = vec![3.7; 16];
        assert!(g.d_face(&u).iter().all(|&v| v == 0.0));
        assert!(g.d2_cell(&u).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_field_has_unit_gradient() {
        let g = Grid1D::new(1.0, 32);
        let u: Vec<f64> = g.centers();
        let faces = g.d_face(&u);
        for f in &faces[1..32] {
            assert!((f - 1.0).abs() < 1e-12);
        }
        assert_eq!(faces[0], 0.0);
        assert_eq!(faces[32], 0.0);
    }

    #[test]
    fn second_difference_integrates_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Grid1D::new(1.5, 24);
        let u: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let total = g.integrate(&g.d2_cell(&u));
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn summation_by_parts_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid1D::new(0.7, 40);
        for _ in 0..20 {
            let u: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
            let du = g.d_face(&u);
            let dv = g.d_face(&v);
            let lhs: f64 = du.iter().zip(&dv).map(|(a, b)| a * b).sum::<f64>() * g.dx();
            let rhs: f64 = -g
                .d2_cell(&u)
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * g.dx();
            assert!(
                (lhs - rhs).abs() <= 1e-13 * (1.0 + lhs.abs()),
                "SBP violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn projection_of_feasible_field_is_identity() {
        let g = Grid1D::new(1.0, 16);
        let u = DensityField::constant(g, 1.0);
        let p = project_constraints(&u, 1.0, 1.5).unwrap();
        assert_eq!(u, p);
    }

    #[test]
    fn projection_constant_shift() {
        let g = Grid1D::new(1.0, 16);
        let u = DensityField::constant(g, 2.0); // u = 2U/L for U = 1
        let p = project_constraints(&u, 1.0, f64::INFINITY).unwrap();
        for v in &p.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid1D::new(1.0, 16);
        let u = DensityField::new(g, (0..16).map(|_| rng.random_range(-0.5..2.0)).collect());
        let p1 = project_constraints(&u, 1.0, 1.5).unwrap();
        let p2 = project_constraints(&p1, 1.0, 1.5).unwrap();
        assert_eq!(p1, p2);
        assert!((p1.mass() - 1.0).abs() < 1e-12);
    }

    /// Dense active-set solve of min ||u - v||² over the box-and-mass set;
    /// independent of the bisection path used by the implementation.
    fn qp_oracle(v: &[f64], dx: f64, mass: f64, ceiling: f64) -> Vec<f64> {
        #[derive(Clone, Copy, PartialEq)]
        enum State {
            Free,
            AtZero,
            AtCeiling,
        }
        let n = v.len();
        let mut state = vec![State::Free; n];
        for _ in 0..10 * n {
            let free: Vec<usize> = (0..n).filter(|&i| state[i] == State::Free).collect();
            let n_ceil = state.iter().filter(|s| **s == State::AtCeiling).count();
            let sum_free: f64 = free.iter().map(|&i| v[i]).sum();
            let lambda = if free.is_empty() {
                0.0
            } else {
                (mass / dx - ceiling * n_ceil as f64 - sum_free) / free.len() as f64
            };
            let mut changed = false;
            for i in 0..n {
                let trial = v[i] + lambda;
                let next = if trial < 0.0 {
                    State::AtZero
                } else if trial > ceiling {
                    State::AtCeiling
                } else {
                    State::Free
                };
                if next != state[i] {
                    state[i] = next;
                    changed = true;
                }
            }
            if !changed {
                let mut u = vec![0.0; n];
                for i in 0..n {
                    u[i] = match state[i] {
                        State::Free => v[i] + lambda,
                        State::AtZero => 0.0,
                        State::AtCeiling => ceiling,
                    };
                }
                return u;
            }
        }
        panic!("active-set oracle did not settle");
    }

    #[test]
    fn projection_matches_qp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = Grid1D::new(1.0, 16);
        for _ in 0..25 {
            let raw: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..2.5)).collect();
            let field = DensityField::new(g, raw.clone());
            let p = project_constraints(&field, 1.0, 1.5).unwrap();
            let oracle = qp_oracle(&raw, g.dx(), 1.0, 1.5);
            for (a, b) in p.values.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "projection vs QP oracle: {a} vs {b}");
            }
        }
    }

    #[test]
    fn projection_infeasible_mass() {
        let g = Grid1D::new(1.0, 16);
        let u = DensityField::constant(g, 1.0);
        assert!(matches!(
            project_constraints(&u, 2.0, 1.5),
            Err(GridError::Infeasible { .. })
        ));
    }

    #[test]
    fn cosine_profile_has_exact_discrete_mass() {
        let g = Grid1D::new(1.0, 128);
        let p = Profile::Cosine {
            base: 1.0,
            amplitude: 0.5,
            mode: 1,
        };
        let (field, displacement) = p.load(g, Some(1.0), f64::INFINITY).unwrap();
        assert!((field.mass() - 1.0).abs() < 1e-12);
        assert!(displacement < 1e-12, "cosine profile should not move");
    }

    #[test]
    fn gaussian_profile_projects_to_mass() {
        let g = Grid1D::new(1.0, 64);
        let p = Profile::Gaussian {
            center: 0.5,
            width: 0.1,
            height: 2.0,
        };
        let (field, _) = p.load(g, Some(1.0), f64::INFINITY).unwrap();
        assert!((field.mass() - 1.0).abs() < 1e-12);
        assert!(field.min() >= 0.0);
    }
}
