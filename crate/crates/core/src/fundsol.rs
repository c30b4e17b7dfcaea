//! Covariance matrices and the Gaussian fundamental solution `Γ₁` of
//! `L₁ = Σ_{i ≤ m₀} ∂_ii + Y`.
//!
//! `Γ₁((x, t), 0) = (4π)^{-N/2} det C(t)^{-1/2} exp(-¼ <C(t)⁻¹ x, x> - t tr B)`
//! for `t > 0` and zero otherwise, with `C(t) = ∫₀ᵗ E(s) A₀ E(s)^T ds`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hypogroup::{GroupPoint, OperatorStructure};
use crate::linalg::{self, SpdFactor};
use crate::report::{ProbeReport, Verdict};

/// Admissible tail mass outside a quadrature box, relative to the total.
pub const TAIL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FundsolError {
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("covariance lost positive definiteness at t = {0}")]
    NotPositiveDefinite(f64),
    #[error("tail mass {tail:e} outside the box exceeds {tol:e}")]
    BoxTooSmall { tail: f64, tol: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone)]
pub struct Covariance {
    pub t: f64,
    pub c: DMatrix<f64>,
    pub det: f64,
    pub inv: DMatrix<f64>,
    /// Lower Cholesky factor of `C`.
    pub lower: DMatrix<f64>,
}

impl Covariance {
    fn from_matrix(t: f64, c: DMatrix<f64>) -> Result<Self, FundsolError> {
        let SpdFactor { inverse, det, lower } =
            linalg::spd_factor(&c).ok_or(FundsolError::NotPositiveDefinite(t))?;
        Ok(Self { t, c, det, inv: inverse, lower })
    }
}

/// `C(t)`, or `C₀(t)` when `use_b0` is set.
pub fn covariance(s: &OperatorStructure, t: f64, use_b0: bool) -> Result<Covariance, FundsolError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(FundsolError::NonPositiveTime(t));
    }
    let n = s.dim();
    let m0 = s.m0();
    let e = |tau: f64| {
        if use_b0 {
            s.exp_drift_principal(tau)
        } else {
            s.exp_drift(tau)
        }
    };
    // E(σ) A₀ E(σ)^T only involves the first m₀ columns of E.
    let integrand = |sigma: f64| {
        let em = e(sigma).columns(0, m0).clone_owned();
        &em * em.transpose()
    };
    let exact_nodes = 2 * s.depth() + 3;
    let nilpotent = if use_b0 { Some(s.b0_nilpotency()) } else { s.drift_nilpotency() };
    let (nodes, panels) = match nilpotent {
        Some(k) => (exact_nodes.max(k + 1), 1),
        None => {
            let norm = linalg::spectral_norm(s.drift());
            (12, (2.0 * norm * t).ceil().max(1.0) as usize)
        }
    };
    let (x, w) = linalg::gauss_legendre(nodes);
    let mut c = DMatrix::zeros(n, n);
    let width = t / panels as f64;
    for p in 0..panels {
        let a = p as f64 * width;
        for (xi, wi) in x.iter().zip(&w) {
            let sigma = a + 0.5 * width * (xi + 1.0);
            c += integrand(sigma) * (0.5 * width * wi);
        }
    }
    c = (&c + c.transpose()) * 0.5;
    Covariance::from_matrix(t, c)
}

/// `D_λ = diag(λ^{α_i})`.
pub fn dilation_matrix(s: &OperatorStructure, lam: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        s.dim(),
        s.alpha().iter().map(|&a| lam.powi(a as i32)),
    ))
}

/// Kernel value and gradient with respect to the first `m₀` pole coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelValue {
    pub value: f64,
    pub gradient: DVector<f64>,
}

/// Everything needed to evaluate `Γ₁(z, ζ)` at a fixed time lag `t - τ`.
#[derive(Debug, Clone)]
pub struct KernelLag {
    pub lag: f64,
    pub e: DMatrix<f64>,
    pub cov: Covariance,
    /// `(4π)^{-N/2} det C^{-1/2} e^{-lag tr B}`.
    pub prefactor: f64,
    m0: usize,
}

impl KernelLag {
    pub fn new(s: &OperatorStructure, lag: f64) -> Result<Self, FundsolError> {
        let cov = covariance(s, lag, false)?;
        let n = s.dim() as f64;
        let prefactor = (4.0 * std::f64::consts::PI).powf(-0.5 * n) / cov.det.sqrt()
            * (-lag * s.trace_b()).exp();
        Ok(Self { lag, e: s.exp_drift(lag), cov, prefactor, m0: s.m0() })
    }

    /// `y = x - E(lag) ξ`.
    pub fn offset(&self, x: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        x - &self.e * xi
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        self.prefactor * (-0.25 * linalg::quad_form(&self.cov.inv, y)).exp()
    }

    /// `∇_ξ Γ₁ = Γ₁ · ½ (E^T C⁻¹ y)` restricted to the first `m₀` entries.
    pub fn pole_gradient(&self, y: &DVector<f64>, value: f64) -> DVector<f64> {
        let v = self.e.transpose() * (&self.cov.inv * y);
        v.rows(0, self.m0).into_owned() * (0.5 * value)
    }

    /// `∇_x Γ₁ = -½ Γ₁ C⁻¹ y`, all `N` entries.
    pub fn point_gradient(&self, y: &DVector<f64>, value: f64) -> DVector<f64> {
        (&self.cov.inv * y) * (-0.5 * value)
    }
}

/// `Γ₁(z, ζ)` with its pole gradient; zero when `t ≤ τ`.
pub fn gamma1(s: &OperatorStructure, z: &GroupPoint, zeta: &GroupPoint) -> KernelValue {
    let lag = z.t - zeta.t;
    if !(lag > 0.0) {
        return KernelValue { value: 0.0, gradient: DVector::zeros(s.m0()) };
    }
    match KernelLag::new(s, lag) {
        Ok(k) => {
            let y = k.offset(&z.x, &zeta.x);
            let value = k.value(&y);
            KernelValue { gradient: k.pole_gradient(&y, value), value }
        }
        // Only reachable through underflow for extreme lags.
        Err(_) => KernelValue { value: 0.0, gradient: DVector::zeros(s.m0()) },
    }
}

/// Pole gradient by central differences with step `h`.
pub fn gamma1_pole_gradient_fd(
    s: &OperatorStructure,
    z: &GroupPoint,
    zeta: &GroupPoint,
    h: f64,
) -> DVector<f64> {
    DVector::from_fn(s.m0(), |i, _| {
        let mut p = zeta.clone();
        let mut m = zeta.clone();
        p.x[i] += h;
        m.x[i] -= h;
        (gamma1(s, z, &p).value - gamma1(s, z, &m).value) / (2.0 * h)
    })
}

/// `L₁ Γ₁(·, 0)` at `z` by central differences with step `h` in every
/// coordinate.
pub fn pde_residual(s: &OperatorStructure, z: &GroupPoint, h: f64) -> f64 {
    let origin = GroupPoint::origin(s.dim());
    let g = |p: &GroupPoint| gamma1(s, p, &origin).value;
    let g0 = g(z);
    let shifted = |i: Option<usize>, d: f64| {
        let mut p = z.clone();
        match i {
            Some(i) => p.x[i] += d,
            None => p.t += d,
        }
        g(&p)
    };
    let mut diffusion = 0.0;
    for i in 0..s.m0() {
        diffusion += (shifted(Some(i), h) - 2.0 * g0 + shifted(Some(i), -h)) / (h * h);
    }
    let grad = DVector::from_fn(s.dim(), |i, _| {
        (shifted(Some(i), h) - shifted(Some(i), -h)) / (2.0 * h)
    });
    let drift = (z.x.transpose() * s.drift() * grad)[(0, 0)];
    let dt = (shifted(None, h) - shifted(None, -h)) / (2.0 * h);
    diffusion + drift - dt
}

/// Tail mass of `N(0, 2C)` outside the box `|x_i| ≤ half_widths[i]`, bounded
/// by a union bound over coordinates.
pub fn gaussian_tail_outside_box(cov: &Covariance, half_widths: &[f64]) -> f64 {
    half_widths
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let sigma = (2.0 * cov.c[(i, i)]).sqrt();
            libm::erfc(r / (sigma * std::f64::consts::SQRT_2))
        })
        .sum()
}

/// Tensor-grid trapezoid of `f` over the box `[-r_i, r_i]` with `n_i` nodes.
fn box_quadrature(half_widths: &[f64], counts: &[usize], mut f: impl FnMut(&DVector<f64>) -> f64) -> f64 {
    let n = half_widths.len();
    let steps: Vec<f64> = half_widths
        .iter()
        .zip(counts)
        .map(|(r, &c)| 2.0 * r / (c - 1) as f64)
        .collect();
    let mut idx = vec![0usize; n];
    let mut x = DVector::zeros(n);
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for i in 0..n {
            x[i] = -half_widths[i] + idx[i] as f64 * steps[i];
            w *= if idx[i] == 0 || idx[i] + 1 == counts[i] { 0.5 * steps[i] } else { steps[i] };
        }
        total += w * f(&x);
        let mut k = n;
        loop {
            if k == 0 {
                return total;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < counts[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Node counts resolving a Gaussian with standard deviations `std` on a
/// box of half-widths `half_widths` with spacing at most `std / 3`.
fn resolving_counts(half_widths: &[f64], std: &[f64], cap: usize) -> Vec<usize> {
    half_widths
        .iter()
        .zip(std)
        .map(|(r, s)| ((2.0 * r / (s / 3.0)).ceil() as usize + 1).clamp(9, cap))
        .collect()
}

/// `∫ Γ₁((x, t), 0) dx` over a box holding all but `TAIL_TOL` of the mass.
pub fn kernel_mass(s: &OperatorStructure, t: f64) -> Result<f64, FundsolError> {
    let k = KernelLag::new(s, t)?;
    let std: Vec<f64> = (0..s.dim()).map(|i| (2.0 * k.cov.c[(i, i)]).sqrt()).collect();
    let half: Vec<f64> = std.iter().map(|s| 9.0 * s).collect();
    let cond: Vec<f64> = (0..s.dim()).map(|i| (2.0 / k.cov.inv[(i, i)]).sqrt()).collect();
    let counts = resolving_counts(&half, &cond, 4001);
    Ok(box_quadrature(&half, &counts, |x| k.value(x)))
}

/// Semigroup check `Γ₁(z, 0) = ∫ Γ₁(z, (ξ, t₁)) Γ₁((ξ, t₁), 0) dξ` with
/// `z = (x, t₁ + t₂)`, quadrature over `|ξ_i| ≤ box_radius`.
pub fn chapman_kolmogorov_check(
    s: &OperatorStructure,
    t1: f64,
    t2: f64,
    box_radius: f64,
    x: &DVector<f64>,
) -> Result<ProbeReport, FundsolError> {
    if !(t1 > 0.0) {
        return Err(FundsolError::NonPositiveTime(t1));
    }
    if !(t2 > 0.0) {
        return Err(FundsolError::NonPositiveTime(t2));
    }
    let n = s.dim();
    let inner = KernelLag::new(s, t1)?;
    let outer = KernelLag::new(s, t2)?;
    let half = vec![box_radius; n];
    let tail = gaussian_tail_outside_box(&inner.cov, &half);
    if tail > TAIL_TOL {
        return Err(FundsolError::BoxTooSmall { tail, tol: TAIL_TOL });
    }
    // Precision of the product integrand in ξ sets the node spacing.
    let precision = (&inner.cov.inv + outer.e.transpose() * &outer.cov.inv * &outer.e) * 0.5;
    let cond: Vec<f64> = (0..n).map(|i| 1.0 / precision[(i, i)].sqrt()).collect();
    let counts = resolving_counts(&half, &cond, 2001);
    let integral = box_quadrature(&half, &counts, |xi| {
        inner.value(xi) * outer.value(&outer.offset(x, xi))
    });
    let direct = KernelLag::new(s, t1 + t2)?.value(x);
    let rel = (integral - direct).abs() / direct.abs().max(f64::MIN_POSITIVE);
    Ok(ProbeReport::new("chapman-kolmogorov", integral, direct, counts.iter().product())
        .with_constant(rel)
        .detail("relative_error", rel)
        .detail("tail_mass", tail)
        .detail("t1", t1)
        .detail("t2", t2)
        .detail("box_radius", box_radius)
        .detail("nodes_per_axis", &counts))
}

/// Draws a point on the unit sphere `‖w‖ = 1` with `t > 0`.
fn unit_sphere_point(s: &OperatorStructure, rng: &mut ChaCha8Rng) -> GroupPoint {
    loop {
        let x = DVector::from_fn(s.dim(), |_, _| rng.random_range(-1.0..1.0));
        let t: f64 = rng.random_range(0.0..1.0);
        let p = GroupPoint { x, t };
        let r = s.hom_norm(&p);
        if r > 1e-6 && t > 0.0 {
            return s.dilate_unchecked(1.0 / r, &p);
        }
    }
}

/// Random local search started from `start`, shrinking the step whenever a
/// round of proposals brings no improvement.
fn refine_sup(
    start: &GroupPoint,
    f: impl Fn(&GroupPoint) -> Option<f64>,
    rng: &mut ChaCha8Rng,
    steps: usize,
) -> (f64, GroupPoint) {
    let mut best = start.clone();
    let mut val = f(start).unwrap_or(0.0);
    let mut scale = 0.1;
    for _ in 0..steps {
        let mut cand = best.clone();
        let size = best.x.amax().max(best.t.abs()).max(1e-3) * scale;
        for v in cand.x.iter_mut() {
            *v += size * rng.random_range(-1.0..1.0);
        }
        cand.t += size * rng.random_range(-1.0..1.0);
        match f(&cand) {
            Some(v) if v > val => {
                val = v;
                best = cand;
            }
            _ => scale = (scale * 0.97).max(1e-6),
        }
    }
    (val, best)
}

/// Empirical constants of `Γ₁ ‖w‖^Q` and `|∇_ξ Γ₁| ‖w‖^{Q+1}` over
/// `samples` relative points `w = ζ⁻¹ ∘ z` with time in `(0, horizon]`.
/// The best samples are polished by a short local search.
pub fn verify_kernel_bounds(
    s: &OperatorStructure,
    samples: usize,
    horizon: f64,
    seed: u64,
) -> Result<ProbeReport, FundsolError> {
    if !(horizon > 0.0) {
        return Err(FundsolError::NonPositiveTime(horizon));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = s.q() as i32;
    let origin = GroupPoint::origin(s.dim());
    let value = |w: &GroupPoint| -> Option<f64> {
        let norm = s.hom_norm(w);
        (w.t > 0.0 && w.t <= horizon && norm > 0.0)
            .then(|| gamma1(s, w, &origin).value * norm.powi(q))
    };
    let gradient = |w: &GroupPoint| -> Option<f64> {
        let norm = s.hom_norm(w);
        (w.t > 0.0 && w.t <= horizon && norm > 0.0)
            .then(|| gamma1(s, w, &origin).gradient.norm() * norm.powi(q + 1))
    };
    let mut pool: Vec<(f64, f64, GroupPoint)> = Vec::with_capacity(samples);
    for _ in 0..samples {
        let unit = unit_sphere_point(s, &mut rng);
        let rho = (horizon / unit.t).sqrt() * (1.0 - rng.random::<f64>());
        let w = s.dilate_unchecked(rho, &unit);
        if let (Some(a), Some(b)) = (value(&w), gradient(&w)) {
            pool.push((a, b, w));
        }
    }
    let used = pool.len();
    let polish = |key: usize, f: &dyn Fn(&GroupPoint) -> Option<f64>, rng: &mut ChaCha8Rng| {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&i, &j| {
            let (a, b) = if key == 0 { (pool[i].0, pool[j].0) } else { (pool[i].1, pool[j].1) };
            b.total_cmp(&a)
        });
        order
            .iter()
            .take(8)
            .map(|&i| refine_sup(&pool[i].2, f, rng, 400))
            .fold((0.0f64, origin.clone()), |acc, c| if c.0 > acc.0 { c } else { acc })
    };
    let (value_sup, value_arg) = polish(0, &value, &mut rng);
    let (grad_sup, grad_arg) = polish(1, &gradient, &mut rng);
    let finite = value_sup.is_finite() && grad_sup.is_finite() && used > 0;
    let flatten = |p: &GroupPoint| {
        let mut v: Vec<f64> = p.x.iter().copied().collect();
        v.push(p.t);
        v
    };
    Ok(ProbeReport::new("kernel-bounds", value_sup, 1.0, used)
        .with_constant(value_sup)
        .with_verdict(Verdict::from_bool(finite))
        .detail("value_constant", value_sup)
        .detail("gradient_constant", grad_sup)
        .detail("horizon", horizon)
        .detail("seed", seed)
        .witness(flatten(&value_arg))
        .witness(flatten(&grad_arg)))
}

/// Smallest `C_T`, `C'_T` for which the quadratic-form and determinant
/// sandwiches between `C(t)` and `C₀(t)` hold at `n_times` times in `(0, T]`.
pub fn verify_covariance_equivalence(
    s: &OperatorStructure,
    horizon: f64,
    n_times: usize,
) -> Result<ProbeReport, FundsolError> {
    if !(horizon > 0.0) {
        return Err(FundsolError::NonPositiveTime(horizon));
    }
    if n_times == 0 {
        return Err(FundsolError::InvalidArgument("need at least one time".into()));
    }
    let q = s.q() as i32;
    let mut c_t = 0.0f64;
    let mut rows = Vec::with_capacity(n_times);
    for k in 1..=n_times {
        let t = horizon * k as f64 / n_times as f64;
        let c = covariance(s, t, false)?;
        let c0 = covariance(s, t, true)?;
        // Generalized eigenvalues of (C, C₀) bound both quadratic forms;
        // those of (C⁻¹, C₀⁻¹) are their reciprocals.
        let l0_inv = c0
            .lower
            .clone()
            .try_inverse()
            .ok_or(FundsolError::NotPositiveDefinite(t))?;
        let m = &l0_inv * &c.c * l0_inv.transpose();
        let (lo, hi) = linalg::sym_eigen_range(&((&m + m.transpose()) * 0.5));
        let dev = [(1.0 - lo), (hi - 1.0), (1.0 - 1.0 / hi), (1.0 / lo - 1.0)]
            .into_iter()
            .fold(0.0f64, f64::max);
        c_t = c_t.max(dev / t);
        rows.push((t, c.det, c0.det, lo, hi));
    }
    let mut c_prime = 1.0f64;
    for &(t, det, _, _, _) in &rows {
        let tq = t.powi(q);
        c_prime = c_prime.max(det / (tq * (1.0 + c_t * t)));
        let lower = 1.0 - c_t * t;
        if lower > 0.0 {
            c_prime = c_prime.max(tq * lower / det);
        }
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.1 / r.2).collect();
    let finite = c_t.is_finite() && c_prime.is_finite();
    Ok(ProbeReport::new("covariance-equivalence", c_t, c_prime, n_times)
        .with_constant(c_t)
        .with_verdict(Verdict::from_bool(finite))
        .detail("C_T", c_t)
        .detail("C_T_prime", c_prime)
        .detail("horizon", horizon)
        .detail("small_time_condition", c_t * horizon < 1.0)
        .detail("det_ratio", &ratios)
        .detail("times", rows.iter().map(|r| r.0).collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn perturbed(eps: f64) -> OperatorStructure {
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, eps, 0.0]);
        OperatorStructure::new(b, &[1, 1], 8.0).unwrap()
    }

    fn with_trace() -> OperatorStructure {
        let b = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, 0.2, -0.5]);
        OperatorStructure::new(b, &[1, 1], 8.0).unwrap()
    }

    /// Independent oracle: composite Simpson on the hand-written integrand.
    fn kolmogorov_cov_oracle(t: f64) -> DMatrix<f64> {
        let n = 2000;
        let h = t / n as f64;
        let mut c = DMatrix::zeros(2, 2);
        for k in 0..=n {
            let s = k as f64 * h;
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            c += DMatrix::from_row_slice(2, 2, &[1.0, -s, -s, s * s]) * (w * h / 3.0);
        }
        c
    }

    #[test]
    fn kolmogorov_covariance_closed_form() {
        let s = OperatorStructure::kolmogorov();
        for t in [0.1, 0.5, 1.0] {
            let c = covariance(&s, t, false).unwrap();
            let exact = DMatrix::from_row_slice(2, 2, &[t, -t * t / 2.0, -t * t / 2.0, t.powi(3) / 3.0]);
            for (a, b) in c.c.iter().zip(exact.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
            }
            assert!((c.det - t.powi(4) / 12.0).abs() <= 1e-12 * t.powi(4) / 12.0);
            assert!((&c.c - kolmogorov_cov_oracle(t)).amax() < 1e-12);
            assert!((&c.c * &c.inv - DMatrix::identity(2, 2)).amax() < 1e-10);
        }
        assert_eq!(covariance(&s, 0.0, false).unwrap_err(), FundsolError::NonPositiveTime(0.0));
    }

    #[test]
    fn parabolic_covariance_is_scalar() {
        let s = OperatorStructure::heat(3);
        let c = covariance(&s, 0.7, false).unwrap();
        assert!((&c.c - DMatrix::identity(3, 3) * 0.7).amax() < 1e-15);
        assert!((c.det - 0.7f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn principal_covariance_scaling_identity() {
        let mut b = DMatrix::zeros(6, 6);
        b[(0, 3)] = 1.0;
        b[(1, 4)] = 1.0;
        b[(3, 5)] = 1.0;
        b[(2, 0)] = 0.4;
        for s in [OperatorStructure::kolmogorov(), OperatorStructure::new(b, &[3, 2, 1], 4.0).unwrap()] {
            let c1 = covariance(&s, 1.0, true).unwrap().c;
            for t in [0.01, 0.3, 2.5] {
                let ct = covariance(&s, t, true).unwrap().c;
                let d = dilation_matrix(&s, t.sqrt());
                let scaled = &d * &c1 * &d;
                for (a, b) in ct.iter().zip(scaled.iter()) {
                    assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn non_nilpotent_covariance_matches_fine_quadrature() {
        let s = with_trace();
        let t = 1.3;
        let c = covariance(&s, t, false).unwrap().c;
        let n = 4000;
        let h = t / n as f64;
        let mut oracle = DMatrix::zeros(2, 2);
        for k in 0..=n {
            let e = linalg::expm_scaling_squaring(&(s.drift().transpose() * -(k as f64 * h)));
            let col = e.column(0).into_owned();
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            oracle += &col * col.transpose() * (w * h / 3.0);
        }
        assert!((c - oracle).amax() < 1e-11);
    }

    #[test]
    fn kernel_point_value() {
        let s = OperatorStructure::kolmogorov();
        let v = gamma1(&s, &GroupPoint::new(&[0.0, 0.0], 1.0), &GroupPoint::origin(2)).value;
        let exact = 3f64.sqrt() / (2.0 * std::f64::consts::PI);
        assert!((v - exact).abs() < 1e-10);
        assert!((v - 0.275664).abs() < 1e-6);
        let past = gamma1(&s, &GroupPoint::new(&[0.0, 0.0], -1.0), &GroupPoint::origin(2));
        assert_eq!(past.value, 0.0);
        assert_eq!(gamma1(&s, &GroupPoint::origin(2), &GroupPoint::origin(2)).value, 0.0);
    }

    #[test]
    fn kernel_mass_identity() {
        for s in [OperatorStructure::kolmogorov(), with_trace(), OperatorStructure::heat(2)] {
            for t in [0.1, 0.5, 1.0] {
                let mass = kernel_mass(&s, t).unwrap();
                let exact = (-t * s.trace_b()).exp();
                assert!((mass - exact).abs() < 1e-6 * exact, "{mass} vs {exact}");
            }
        }
    }

    #[test]
    fn pde_residual_second_order() {
        for s in [OperatorStructure::kolmogorov(), with_trace()] {
            let z = GroupPoint::new(&[0.4, -0.3], 0.8);
            let r1 = pde_residual(&s, &z, 0.02).abs();
            let r2 = pde_residual(&s, &z, 0.01).abs();
            let order = (r1 / r2).log2();
            assert!(order > 1.8, "order {order} ({r1}, {r2})");
        }
    }

    #[test]
    fn pole_gradient_matches_finite_differences() {
        let s = with_trace();
        let z = GroupPoint::new(&[0.3, 0.1], 0.9);
        let zeta = GroupPoint::new(&[-0.2, 0.25], 0.2);
        let g = gamma1(&s, &z, &zeta).gradient;
        let e1 = (&g - gamma1_pole_gradient_fd(&s, &z, &zeta, 1e-3)).amax();
        let e2 = (&g - gamma1_pole_gradient_fd(&s, &z, &zeta, 5e-4)).amax();
        assert!(e1 < 1e-5 && e2 < e1 / 3.0, "{e1} {e2}");
    }

    #[test]
    fn chapman_kolmogorov_semigroup() {
        let s = OperatorStructure::kolmogorov();
        let x = DVector::from_vec(vec![0.3, -0.1]);
        let r = chapman_kolmogorov_check(&s, 0.25, 0.25, 8.0, &x).unwrap();
        assert!(r.get_f64("relative_error").unwrap() < 1e-4);
        let heat = OperatorStructure::heat(2);
        let r = chapman_kolmogorov_check(&heat, 0.25, 0.25, 8.0, &x).unwrap();
        assert!(r.get_f64("relative_error").unwrap() < 1e-6);
        assert!(matches!(
            chapman_kolmogorov_check(&s, 0.25, 0.25, 0.5, &x),
            Err(FundsolError::BoxTooSmall { .. })
        ));
    }

    #[test]
    fn kernel_bounds_are_finite_and_stable() {
        let s = OperatorStructure::kolmogorov();
        let a = verify_kernel_bounds(&s, 10_000, 1.0, 42).unwrap();
        let b = verify_kernel_bounds(&s, 40_000, 1.0, 43).unwrap();
        assert!(a.passed() && b.passed());
        for key in ["value_constant", "gradient_constant"] {
            let (x, y) = (a.get_f64(key).unwrap(), b.get_f64(key).unwrap());
            assert!(x > 0.0 && (x - y).abs() <= 0.2 * y, "{key}: {x} vs {y}");
        }
    }

    #[test]
    fn homogeneous_kernel_is_invariant_along_dilations() {
        let s = OperatorStructure::kolmogorov();
        let origin = GroupPoint::origin(2);
        let w = GroupPoint::new(&[0.3, -0.2], 0.4);
        let base = gamma1(&s, &w, &origin).value * s.hom_norm(&w).powi(4);
        for lam in [0.1, 0.5, 2.0, 7.0] {
            let d = s.dilate(lam, &w).unwrap();
            let v = gamma1(&s, &d, &origin).value * s.hom_norm(&d).powi(4);
            assert!((v - base).abs() < 1e-8 * base);
        }
    }

    #[test]
    fn covariance_equivalence_fits() {
        let r = verify_covariance_equivalence(&OperatorStructure::kolmogorov(), 0.5, 20).unwrap();
        assert!(r.get_f64("C_T").unwrap() < 1e-10);
        assert!((r.get_f64("C_T_prime").unwrap() - 12.0).abs() < 1e-8);
        let small = verify_covariance_equivalence(&perturbed(0.05), 0.5, 20).unwrap();
        let large = verify_covariance_equivalence(&perturbed(0.1), 0.5, 20).unwrap();
        let (cs, cl) = (small.get_f64("C_T").unwrap(), large.get_f64("C_T").unwrap());
        assert!(cs > 0.0 && cl > cs && cl < 1.0, "{cs} {cl}");
        assert!((cl / cs - 2.0).abs() < 0.2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kernel_is_left_invariant(
            a in proptest::collection::vec(-3.0..3.0f64, 3),
            z in proptest::collection::vec(-2.0..2.0f64, 3),
            zeta in proptest::collection::vec(-2.0..2.0f64, 3),
        ) {
            let s = with_trace();
            let a = GroupPoint::new(&a[..2], a[2]);
            let z = GroupPoint::new(&z[..2], z[2]);
            let zeta = GroupPoint::new(&zeta[..2], zeta[2]);
            let v = gamma1(&s, &z, &zeta).value;
            let w = gamma1(&s, &s.compose(&a, &z), &s.compose(&a, &zeta)).value;
            prop_assert!((v - w).abs() <= 1e-10 * (1.0 + v.abs()));
        }

        #[test]
        fn covariance_is_positive_definite(t in 1e-3..3.0f64) {
            let c = covariance(&with_trace(), t, false).unwrap();
            prop_assert!(linalg::sym_eigen_range(&c.c).0 > 0.0);
        }
    }
}
