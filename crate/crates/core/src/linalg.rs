//! Small dense linear-algebra helpers shared by the group calculus and the
//! kernel code: matrix exponential, nilpotency detection, Gauss–Legendre
//! rules and SPD factorization.

use nalgebra::{DMatrix, DVector};

/// Relative threshold under which a matrix power counts as exactly zero.
const NILPOTENT_TOL: f64 = 1e-14;

/// Smallest `k >= 1` with `m^k == 0` (to round-off), or `None` when `m` is
/// not nilpotent.
pub fn nilpotency_index(m: &DMatrix<f64>) -> Option<usize> {
    let n = m.nrows();
    let scale = m.amax().max(1.0);
    if m.amax() == 0.0 {
        return Some(1);
    }
    let mut power = m.clone();
    for k in 2..=n.max(1) + 1 {
        power = &power * m;
        if power.amax() <= NILPOTENT_TOL * scale.powi(k as i32) {
            return Some(k);
        }
    }
    None
}

/// `sum_{j < index} m^j / j!` for a matrix with `m^index == 0`.
pub fn nilpotent_exp(m: &DMatrix<f64>, index: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for j in 1..index {
        term = &term * m / j as f64;
        out += &term;
    }
    out
}

/// Matrix exponential by scaling and squaring of a degree-18 Taylor
/// polynomial. Nilpotent input short-circuits to the terminating series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(k) = nilpotency_index(m) {
        return nilpotent_exp(m, k);
    }
    expm_scaling_squaring(m)
}

/// The scaling-and-squaring path alone, without the nilpotent fast path.
pub fn expm_scaling_squaring(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm1 = (0..n)
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm1 > 0.25 {
        squarings = (norm1 / 0.25).log2().ceil() as u32;
    }
    let scaled = m / 2f64.powi(squarings as i32);
    // Horner evaluation of the Taylor polynomial.
    const DEGREE: usize = 18;
    let id = DMatrix::<f64>::identity(n, n);
    let mut acc = id.clone();
    for j in (1..=DEGREE).rev() {
        acc = &id + &scaled * &acc / j as f64;
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    acc
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Nodes and weights for `E[f(η)]`, `η ~ N(0, 1)`, exact for polynomials
/// of degree below `2n`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Inverse, determinant and lower Cholesky factor of a symmetric positive
/// definite matrix; `None` when the factorization breaks down.
pub struct SpdFactor {
    pub inverse: DMatrix<f64>,
    pub det: f64,
    pub lower: DMatrix<f64>,
}

pub fn spd_factor(m: &DMatrix<f64>) -> Option<SpdFactor> {
    let sym = (m + m.transpose()) * 0.5;
    let chol = sym.cholesky()?;
    let lower = chol.l();
    let det = lower.diagonal().iter().map(|d| d * d).product::<f64>();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let mut inverse = chol.inverse();
    inverse = (&inverse + inverse.transpose()) * 0.5;
    Some(SpdFactor { inverse, det, lower })
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let e = m.clone().symmetric_eigenvalues();
    (e.min(), e.max())
}

/// `<m x, x>`
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}
