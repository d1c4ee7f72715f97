//! Shared numerical kernels: adaptive quadrature, safeguarded scalar root
//! finding, monotone cubic interpolation, tridiagonal and dense linear solves,
//! and the orthonormal cosine basis used by the space-time Poisson solver.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("quadrature failed to converge on [{a}, {b}] (estimate {estimate:e})")]
    QuadratureDiverged { a: f64, b: f64, estimate: f64 },
    #[error("root bracket [{lo}, {hi}] does not change sign")]
    NoBracket { lo: f64, hi: f64 },
    #[error("linear solve hit a zero pivot at row {row}")]
    SingularMatrix { row: usize },
}

/// Adaptive Simpson quadrature with absolute/relative tolerance mix.
///
/// The integrand must be finite on [a, b]; singular endpoints have to be
/// removed by substitution before calling this.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<f64, NumericsError> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut sink = 0.0f64;
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 52, &mut sink).map_err(|_| {
        NumericsError::QuadratureDiverged {
            a,
            b,
            estimate: whole,
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    acc: &mut f64,
) -> Result<f64, ()> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol * (1.0 + (left + right).abs()) || (b - a).abs() < 1e-15 {
        *acc += delta / 15.0;
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(());
    }
    let l = simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, acc)?;
    let r = simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, acc)?;
    Ok(l + r)
}

/// Bisection bracketing refined by Newton steps; falls back to bisection
/// whenever a Newton step leaves the bracket or stalls.
///
/// `f` must change sign on [lo, hi]. Returns the root to a mixed
/// absolute/relative tolerance of `tol`.
pub fn bisect_newton<F, D>(f: F, df: D, lo: f64, hi: f64, tol: f64) -> Result<f64, NumericsError>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let (mut lo, mut hi) = (lo, hi);
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(NumericsError::NoBracket { lo, hi });
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
        } else {
            hi = x;
        }
        let dfx = df(x);
        let newton = x - fx / dfx;
        let next = if dfx.is_finite() && dfx != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        // Relative step criterion keeps full precision for roots near zero.
        if (next - x).abs() <= tol * x.abs() {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Monotone piecewise-cubic (Fritsch–Carlson) interpolant.
///
/// Preserves monotonicity of the data; used for tabulated integrals where
/// overshoot would break invertibility.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert!(xs.len() >= 2 && xs.len() == ys.len());
        let n = xs.len();
        let mut secants = vec![0.0; n - 1];
        for i in 0..n - 1 {
            let h = xs[i + 1] - xs[i];
            assert!(h > 0.0, "abscissae must be strictly increasing");
            secants[i] = (ys[i + 1] - ys[i]) / h;
        }
        let mut slopes = vec![0.0; n];
        slopes[0] = secants[0];
        slopes[n - 1] = secants[n - 2];
        for i in 1..n - 1 {
            if secants[i - 1] * secants[i] <= 0.0 {
                slopes[i] = 0.0;
            } else {
                // Weighted harmonic mean keeps the interpolant monotone.
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                slopes[i] = (w1 + w2) / (w1 / secants[i - 1] + w2 / secants[i]);
            }
        }
        // Fritsch-Carlson limiter on the endpoints of each interval.
        for i in 0..n - 1 {
            if secants[i] == 0.0 {
                slopes[i] = 0.0;
                slopes[i + 1] = 0.0;
            } else {
                let alpha = slopes[i] / secants[i];
                let beta = slopes[i + 1] / secants[i];
                let s = alpha * alpha + beta * beta;
                if s > 9.0 {
                    let t = 3.0 / s.sqrt();
                    slopes[i] = t * alpha * secants[i];
                    slopes[i + 1] = t * beta * secants[i];
                }
            }
        }
        Self { xs, ys, slopes }
    }

    fn segment(&self, x: f64) -> usize {
        match self
            .xs
            .binary_search_by(|v| v.partial_cmp(&x).expect("NaN abscissa"))
        {
            Ok(i) => i.min(self.xs.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.xs.len() - 2),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        y0 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + m0 * (t3 - 2.0 * t2 + t)
            + y1 * (-2.0 * t3 + 3.0 * t2)
            + m1 * (t3 - t2)
    }

    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }

    pub fn nodes(&self) -> (&[f64], &[f64]) {
        (&self.xs, &self.ys)
    }

    pub fn x_max(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    pub fn eval_derivative(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let t2 = t * t;
        (y0 * (6.0 * t2 - 6.0 * t)
            + m0 * (3.0 * t2 - 4.0 * t + 1.0)
            + y1 * (-6.0 * t2 + 6.0 * t)
            + m1 * (3.0 * t2 - 2.0 * t))
            / h
    }

    pub fn eval_second_derivative(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        (y0 * (12.0 * t - 6.0)
            + m0 * (6.0 * t - 4.0)
            + y1 * (6.0 - 12.0 * t)
            + m1 * (6.0 * t - 2.0))
            / (h * h)
    }
}

/// Thomas algorithm for a tridiagonal system; `sub`/`sup` have length n-1.
/// The matrix must not require pivoting.
pub fn solve_tridiagonal(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, NumericsError> {
    let n = diag.len();
    assert!(sub.len() == n - 1 && sup.len() == n - 1 && rhs.len() == n);
    let mut c = vec![0.0; n - 1];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(NumericsError::SingularMatrix { row: 0 });
    }
    if n > 1 {
        c[0] = sup[0] / denom;
    }
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - sub[i - 1] * c[i - 1];
        if denom == 0.0 {
            return Err(NumericsError::SingularMatrix { row: i });
        }
        if i < n - 1 {
            c[i] = sup[i] / denom;
        }
        d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Dense LU solve with partial pivoting (row-major `a`, overwritten).
pub fn solve_dense(a: &mut [f64], rhs: &mut [f64], n: usize) -> Result<(), NumericsError> {
    assert_eq!(a.len(), n * n);
    assert_eq!(rhs.len(), n);
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[perm[col] * n + col].abs();
        for (r, &pr) in perm.iter().enumerate().skip(col + 1) {
            let v = a[pr * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best == 0.0 {
            return Err(NumericsError::SingularMatrix { row: col });
        }
        perm.swap(col, pivot);
        let prow = perm[col];
        let pv = a[prow * n + col];
        for &r in perm.iter().skip(col + 1) {
            let factor = a[r * n + col] / pv;
            a[r * n + col] = factor;
            if factor != 0.0 {
                for k in col + 1..n {
                    a[r * n + k] -= factor * a[prow * n + k];
                }
            }
        }
    }
    // Forward substitution on the permuted rows.
    let mut y = vec![0.0; n];
    for (i, &r) in perm.iter().enumerate() {
        let mut s = rhs[r];
        for (k, yk) in y.iter().enumerate().take(i) {
            s -= a[r * n + k] * yk;
        }
        y[i] = s;
    }
    for i in (0..n).rev() {
        let r = perm[i];
        let mut s = y[i];
        for k in i + 1..n {
            s -= a[r * n + k] * rhs[k];
        }
        rhs[i] = s / a[r * n + i];
    }
    Ok(())
}

/// Orthonormal eigenbasis of the 1-D Neumann difference operator
/// tridiag(-1, [1, 2, .., 2, 1], -1) of size `n` (DCT-II modes), together
/// with the eigenvalues of that matrix (unscaled by any mesh width).
#[derive(Debug, Clone)]
pub struct CosineBasis {
    n: usize,
    /// basis[k * n + j] = weight of node j in mode k
    basis: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

impl CosineBasis {
    pub fn new(n: usize) -> Self {
        let mut basis = vec![0.0; n * n];
        let mut eigenvalues = vec![0.0; n];
        for k in 0..n {
            let norm = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for j in 0..n {
                basis[k * n + j] =
                    norm * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / n as f64).cos();
            }
            eigenvalues[k] = 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos();
        }
        Self {
            n,
            basis,
            eigenvalues,
        }
    }

    /// Coefficients of `values` in the cosine basis.
    pub fn forward(&self, values: &[f64], out: &mut [f64]) {
        assert!(values.len() == self.n && out.len() == self.n);
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.basis[k * self.n..(k + 1) * self.n];
            *o = row.iter().zip(values).map(|(b, v)| b * v).sum();
        }
    }

    /// Reconstruction from coefficients (the basis is orthonormal).
    pub fn inverse(&self, coeffs: &[f64], out: &mut [f64]) {
        assert!(coeffs.len() == self.n && out.len() == self.n);
        out.fill(0.0);
        for (k, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = &self.basis[k * self.n..(k + 1) * self.n];
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
    }
}

/// Log-spaced mesh of `n` points on [lo, hi], endpoints included.
pub fn log_mesh(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
