//! Boundary-layer fields in Crocco variables.
//!
//! A Prandtl velocity `u(x, y, t)` with outer flow `U(x, t)` maps to
//! `τ = t, ξ = x, η = u/U`, `w = ∂_y u / U`, where `w` solves
//! `∂_τ w⁻¹ + ηU ∂_ξ w⁻¹ + A ∂_η w⁻¹ - B w⁻¹ = -∂_ηη w` with
//! `A = (1-η²) U_x + (1-η) U_t/U` and `B = η U_x + U_t/U`.
//!
//! Derivatives are second-order central differences with second-order
//! one-sided closures on the edges.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{Axis, GridField};
use crate::report::{ProbeReport, Verdict};

#[derive(Debug, Error)]
pub enum CroccoError {
    #[error("eta is not strictly increasing in y at x = {x}, t = {t}")]
    NonMonotoneColumn { x: f64, t: f64 },
    #[error("eta = {eta} leaves [0, 1] at x = {x}, t = {t}")]
    EtaOutOfRange { x: f64, t: f64, eta: f64 },
    #[error("w degenerates: min w = {0:e}")]
    DegenerateW(f64),
    #[error("outer flow must be positive, got {0}")]
    NonPositiveOuterFlow(f64),
    #[error("bad field: {0}")]
    Shape(String),
}

/// `d/dx` at node `i` of `n` samples spaced `h`, reading `v(j)`.
fn diff(n: usize, h: f64, i: usize, v: impl Fn(usize) -> f64) -> f64 {
    if i == 0 {
        (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
    } else if i + 1 == n {
        (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * h)
    } else {
        (v(i + 1) - v(i - 1)) / (2.0 * h)
    }
}

/// `d²/dx²` at an interior node.
fn diff2(h: f64, i: usize, v: impl Fn(usize) -> f64) -> f64 {
    (v(i + 1) - 2.0 * v(i) + v(i - 1)) / (h * h)
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` strictly increasing, at least two points.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        assert!(n >= 2 && y.len() == n);
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let del: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![del[0]; 2];
        } else {
            for k in 1..n - 1 {
                if del[k - 1] * del[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
                }
            }
            d[0] = end_slope(h[0], h[1], del[0], del[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
        }
        Self { x, y, d }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let k = match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s),
            s * (1.0 - s) * (1.0 - s),
            s * s * (3.0 - 2.0 * s),
            s * s * (s - 1.0),
        );
        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }
}

/// Three-point end slope, limited to keep the interpolant monotone.
fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d * del0 <= 0.0 {
        0.0
    } else if del0 * del1 <= 0.0 && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

/// Samples of a Prandtl boundary layer on a `(t, x, y)` box, with `y`
/// truncated at the top of the axis.
#[derive(Debug, Clone)]
pub struct BoundaryLayerField {
    pub t: Axis,
    pub x: Axis,
    pub y: Axis,
    /// `U` on `(t, x)`, row-major.
    pub outer: Vec<f64>,
    /// `u` on `(t, x, y)`, row-major.
    pub u: Vec<f64>,
    /// `v(x, 0, t)` on `(t, x)` when known.
    pub v0: Option<Vec<f64>>,
}

impl BoundaryLayerField {
    pub fn new(t: Axis, x: Axis, y: Axis, outer: Vec<f64>, u: Vec<f64>, v0: Option<Vec<f64>>) -> Result<Self, CroccoError> {
        if t.n < 3 || x.n < 3 || y.n < 3 {
            return Err(CroccoError::Shape("every axis needs at least 3 nodes".into()));
        }
        if outer.len() != t.n * x.n || u.len() != t.n * x.n * y.n || v0.as_ref().is_some_and(|v| v.len() != t.n * x.n) {
            return Err(CroccoError::Shape("sample counts do not match the axes".into()));
        }
        Ok(Self { t, x, y, outer, u, v0 })
    }

    /// Samples `U(x, t)`, `u(x, y, t)` and optionally `v₀(x, t)`.
    pub fn from_fn(
        t: Axis,
        x: Axis,
        y: Axis,
        outer: impl Fn(f64, f64) -> f64,
        u: impl Fn(f64, f64, f64) -> f64,
        v0: Option<&dyn Fn(f64, f64) -> f64>,
    ) -> Result<Self, CroccoError> {
        let mut big = Vec::with_capacity(t.n * x.n);
        let mut small = Vec::with_capacity(t.n * x.n * y.n);
        let mut vs = Vec::with_capacity(t.n * x.n);
        for i in 0..t.n {
            for j in 0..x.n {
                let (tt, xx) = (t.node(i), x.node(j));
                big.push(outer(xx, tt));
                if let Some(v) = v0 {
                    vs.push(v(xx, tt));
                }
                for k in 0..y.n {
                    small.push(u(xx, y.node(k), tt));
                }
            }
        }
        Self::new(t, x, y, big, small, v0.map(|_| vs))
    }

    fn outer_at(&self, i: usize, j: usize) -> f64 {
        self.outer[i * self.x.n + j]
    }

    fn u_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.u[(i * self.x.n + j) * self.y.n + k]
    }

    pub fn outer_x(&self, i: usize, j: usize) -> f64 {
        diff(self.x.n, self.x.step(), j, |m| self.outer_at(i, m))
    }

    pub fn outer_t(&self, i: usize, j: usize) -> f64 {
        diff(self.t.n, self.t.step(), i, |m| self.outer_at(m, j))
    }

    pub fn u_y(&self, i: usize, j: usize, k: usize) -> f64 {
        diff(self.y.n, self.y.step(), k, |m| self.u_at(i, j, m))
    }

    pub fn u_t(&self, i: usize, j: usize, k: usize) -> f64 {
        diff(self.t.n, self.t.step(), i, |m| self.u_at(m, j, k))
    }

    /// `∂_x π = -U_t - U U_x` from Bernoulli's law.
    pub fn pressure_x(&self, i: usize, j: usize) -> f64 {
        -self.outer_t(i, j) - self.outer_at(i, j) * self.outer_x(i, j)
    }
}

#[derive(Debug, Clone, Serialize)]
struct Condition {
    holds: bool,
    /// The extreme value of the tested quantity.
    extreme: f64,
    /// `(t, x, y)` of the extreme; `y` is absent for boundary quantities.
    witness: Vec<f64>,
}

fn condition(holds: impl Fn(f64) -> bool, worst: (f64, Vec<f64>)) -> Condition {
    Condition { holds: holds(worst.0), extreme: worst.0, witness: worst.1 }
}

/// Sign checks: `U > 0` and `u > 0` for `y > 0`, `v₀ ≤ 0`, `∂_y u > 0`
/// and the favourable pressure `∂_x π ≤ 0`.
pub fn check_hypotheses(blf: &BoundaryLayerField) -> ProbeReport {
    let (nt, nx, ny) = (blf.t.n, blf.x.n, blf.y.n);
    let mut min_outer = (f64::INFINITY, vec![]);
    let mut min_u = (f64::INFINITY, vec![]);
    let mut min_uy = (f64::INFINITY, vec![]);
    let mut max_px = (f64::NEG_INFINITY, vec![]);
    let mut max_v0 = (f64::NEG_INFINITY, vec![]);
    for i in 0..nt {
        for j in 0..nx {
            let (t, x) = (blf.t.node(i), blf.x.node(j));
            let big = blf.outer_at(i, j);
            if big < min_outer.0 {
                min_outer = (big, vec![t, x]);
            }
            let px = blf.pressure_x(i, j);
            if px > max_px.0 {
                max_px = (px, vec![t, x]);
            }
            if let Some(v) = &blf.v0 {
                let v = v[i * nx + j];
                if v > max_v0.0 {
                    max_v0 = (v, vec![t, x]);
                }
            }
            for k in 0..ny {
                let y = blf.y.node(k);
                let u = blf.u_at(i, j, k);
                if k > 0 && u < min_u.0 {
                    min_u = (u, vec![t, x, y]);
                }
                let uy = blf.u_y(i, j, k);
                if uy < min_uy.0 {
                    min_uy = (uy, vec![t, x, y]);
                }
            }
        }
    }
    let positivity_outer = condition(|v| v > 0.0, min_outer);
    let positivity_u = condition(|v| v > 0.0, min_u);
    let monotone = condition(|v| v > 0.0, min_uy);
    let favourable = condition(|v| v <= 0.0, max_px);
    let suction = blf.v0.as_ref().map(|_| condition(|v| v <= 0.0, max_v0));
    let all = [&positivity_outer, &positivity_u, &monotone, &favourable]
        .iter()
        .all(|c| c.holds)
        && suction.as_ref().is_none_or(|c| c.holds);
    let mut report = ProbeReport::new("crocco-hypotheses", favourable.extreme, 0.0, nt * nx * ny)
        .with_verdict(Verdict::from_bool(all))
        .detail("outer_positive", &positivity_outer)
        .detail("velocity_positive", &positivity_u)
        .detail("monotone_class", &monotone)
        .detail("favourable_pressure", &favourable)
        .detail("wall_suction", &suction);
    for c in [&positivity_outer, &positivity_u, &monotone, &favourable].into_iter().chain(suction.as_ref()) {
        if !c.holds {
            report = report.witness(c.witness.clone());
        }
    }
    report
}

/// `w(τ, ξ, η)` on a regular grid with the outer flow on `(τ, ξ)`.
#[derive(Debug, Clone)]
pub struct CroccoField {
    pub w: GridField,
    /// `U`, `U_x`, `U_t` on `(τ, ξ)`, row-major.
    pub outer: Vec<f64>,
    pub outer_x: Vec<f64>,
    pub outer_t: Vec<f64>,
    /// `∂_t u` at fixed `y`, resampled on `(τ, ξ, η)`.
    pub u_t: Option<Vec<f64>>,
}

impl CroccoField {
    /// Samples analytic `w(τ, ξ, η)` and `U(ξ, τ)` with its derivatives.
    pub fn from_fn(
        tau: Axis,
        xi: Axis,
        eta: Axis,
        w: impl Fn(f64, f64, f64) -> f64,
        outer: impl Fn(f64, f64) -> (f64, f64, f64),
    ) -> Self {
        let field = GridField::from_fn(vec![tau, xi, eta], |z| w(z.t, z.x[0], z.x[1]));
        let mut big = Vec::new();
        let mut bx = Vec::new();
        let mut bt = Vec::new();
        for i in 0..tau.n {
            for j in 0..xi.n {
                let (u, ux, ut) = outer(xi.node(j), tau.node(i));
                big.push(u);
                bx.push(ux);
                bt.push(ut);
            }
        }
        Self { w: field, outer: big, outer_x: bx, outer_t: bt, u_t: None }
    }

    pub fn axes(&self) -> (Axis, Axis, Axis) {
        let a = self.w.axes();
        (a[0], a[1], a[2])
    }

    fn column(&self, i: usize, j: usize) -> usize {
        i * self.axes().1.n + j
    }

    /// `(A, B)` at `(τ_i, ξ_j, η)`.
    pub fn coefficients(&self, i: usize, j: usize, eta: f64) -> (f64, f64) {
        let c = self.column(i, j);
        let (u, ux, ut) = (self.outer[c], self.outer_x[c], self.outer_t[c]);
        ((1.0 - eta * eta) * ux + (1.0 - eta) * ut / u, eta * ux + ut / u)
    }
}

/// Resamples `w = ∂_y u / U` onto `n_eta` equispaced values of `η` per
/// `(t, x)` column, inverting `y ↦ η` with a monotone cubic. The `η` range
/// is the overlap of all columns.
pub fn crocco_forward(blf: &BoundaryLayerField, n_eta: usize) -> Result<CroccoField, CroccoError> {
    let (nt, nx, ny) = (blf.t.n, blf.x.n, blf.y.n);
    if n_eta < 3 {
        return Err(CroccoError::Shape("need at least 3 eta nodes".into()));
    }
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 1.0;
    let mut columns = Vec::with_capacity(nt * nx);
    for i in 0..nt {
        for j in 0..nx {
            let (t, x) = (blf.t.node(i), blf.x.node(j));
            let big = blf.outer_at(i, j);
            if !(big > 0.0) {
                return Err(CroccoError::NonPositiveOuterFlow(big));
            }
            let eta: Vec<f64> = (0..ny).map(|k| blf.u_at(i, j, k) / big).collect();
            if let Some(&e) = eta.iter().find(|e| !(0.0..=1.0).contains(*e)) {
                return Err(CroccoError::EtaOutOfRange { x, t, eta: e });
            }
            if eta.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CroccoError::NonMonotoneColumn { x, t });
            }
            lo = lo.max(eta[0]);
            hi = hi.min(eta[ny - 1]);
            columns.push(eta);
        }
    }
    if !(hi > lo) {
        return Err(CroccoError::Shape("columns share no eta range".into()));
    }
    let eta_axis = Axis::new(lo, hi, n_eta);
    let per_column: Vec<(Vec<f64>, Vec<f64>)> = (0..nt * nx)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (c / nx, c % nx);
            let big = blf.outer_at(i, j);
            let wy: Vec<f64> = (0..ny).map(|k| blf.u_y(i, j, k) / big).collect();
            let ut: Vec<f64> = (0..ny).map(|k| blf.u_t(i, j, k)).collect();
            let pw = Pchip::new(columns[c].clone(), wy);
            let pu = Pchip::new(columns[c].clone(), ut);
            let nodes = eta_axis.nodes();
            (nodes.iter().map(|&e| pw.eval(e)).collect(), nodes.iter().map(|&e| pu.eval(e)).collect())
        })
        .collect();
    let mut w = Vec::with_capacity(nt * nx * n_eta);
    let mut ut = Vec::with_capacity(nt * nx * n_eta);
    for (a, b) in per_column {
        w.extend(a);
        ut.extend(b);
    }
    let mut outer_x = Vec::with_capacity(nt * nx);
    let mut outer_t = Vec::with_capacity(nt * nx);
    for i in 0..nt {
        for j in 0..nx {
            outer_x.push(blf.outer_x(i, j));
            outer_t.push(blf.outer_t(i, j));
        }
    }
    Ok(CroccoField {
        w: GridField::new(vec![blf.t, blf.x, eta_axis], w).map_err(|e| CroccoError::Shape(e.to_string()))?,
        outer: blf.outer.clone(),
        outer_x,
        outer_t,
        u_t: Some(ut),
    })
}

/// Pointwise residual terms of the Crocco equation at interior nodes.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ResidualTerms {
    pub time: f64,
    pub transport: f64,
    pub drift: f64,
    pub reaction: f64,
    pub diffusion: f64,
}

/// `∂_τ w⁻¹ + ηU ∂_ξ w⁻¹ + A ∂_η w⁻¹ - B w⁻¹ + ∂_ηη w - F` at interior
/// nodes, `F` an optional manufactured forcing.
pub fn crocco_residual(
    cf: &CroccoField,
    forcing: Option<&(dyn Fn(f64, f64, f64) -> f64 + Sync)>,
) -> Result<(Vec<f64>, ResidualTerms), CroccoError> {
    let (ta, xa, ea) = cf.axes();
    let v = cf.w.values();
    let min_w = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_w >= 1e-8) {
        return Err(CroccoError::DegenerateW(min_w));
    }
    if ta.n < 3 || xa.n < 3 || ea.n < 3 {
        return Err(CroccoError::Shape("every axis needs at least 3 nodes".into()));
    }
    let at = |i: usize, j: usize, k: usize| v[(i * xa.n + j) * ea.n + k];
    let inv = |i: usize, j: usize, k: usize| 1.0 / at(i, j, k);
    let mut out = Vec::new();
    let mut worst = ResidualTerms::default();
    for i in 1..ta.n - 1 {
        for j in 1..xa.n - 1 {
            let big = cf.outer[cf.column(i, j)];
            for k in 1..ea.n - 1 {
                let eta = ea.node(k);
                let (a, b) = cf.coefficients(i, j, eta);
                let terms = ResidualTerms {
                    time: diff(ta.n, ta.step(), i, |m| inv(m, j, k)),
                    transport: eta * big * diff(xa.n, xa.step(), j, |m| inv(i, m, k)),
                    drift: a * diff(ea.n, ea.step(), k, |m| inv(i, j, m)),
                    reaction: -b * inv(i, j, k),
                    diffusion: diff2(ea.step(), k, |m| at(i, j, m)),
                };
                let f = forcing.map_or(0.0, |f| f(ta.node(i), xa.node(j), eta));
                out.push(terms.time + terms.transport + terms.drift + terms.reaction + terms.diffusion - f);
                worst.time = worst.time.max(terms.time.abs());
                worst.transport = worst.transport.max(terms.transport.abs());
                worst.drift = worst.drift.max(terms.drift.abs());
                worst.reaction = worst.reaction.max(terms.reaction.abs());
                worst.diffusion = worst.diffusion.max(terms.diffusion.abs());
            }
        }
    }
    Ok((out, worst))
}

/// Max interior residual of the Crocco equation with per-term maxima.
pub fn verify_crocco_residual(
    cf: &CroccoField,
    forcing: Option<&(dyn Fn(f64, f64, f64) -> f64 + Sync)>,
) -> Result<ProbeReport, CroccoError> {
    let (res, terms) = crocco_residual(cf, forcing)?;
    let max = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(ProbeReport::new("crocco-residual", max, 1.0, res.len())
        .with_verdict(Verdict::ReportOnly)
        .detail("max_abs_residual", max)
        .detail("term_maxima", terms)
        .detail("forced", forcing.is_some()))
}

/// Manufactured Crocco field: `w = 3/2 - η² + η sin(ξ + τ)/4` with
/// `U = 2 + e^{-τ}/2 + 3 sin(ξ)/10`, and the forcing that makes it exact.
pub mod manufactured {
    pub fn w(tau: f64, xi: f64, eta: f64) -> f64 {
        1.5 - eta * eta + 0.25 * eta * (xi + tau).sin()
    }

    /// `(U, U_x, U_t)`.
    pub fn outer(xi: f64, tau: f64) -> (f64, f64, f64) {
        (2.0 + 0.5 * (-tau).exp() + 0.3 * xi.sin(), 0.3 * xi.cos(), -0.5 * (-tau).exp())
    }

    pub fn forcing(tau: f64, xi: f64, eta: f64) -> f64 {
        let w = w(tau, xi, eta);
        let c = 0.25 * eta * (xi + tau).cos();
        let (w_tau, w_xi) = (c, c);
        let w_eta = -2.0 * eta + 0.25 * (xi + tau).sin();
        let w_etaeta = -2.0;
        let (u, ux, ut) = outer(xi, tau);
        let a = (1.0 - eta * eta) * ux + (1.0 - eta) * ut / u;
        let b = eta * ux + ut / u;
        let w2 = w * w;
        -w_tau / w2 - eta * u * w_xi / w2 - a * w_eta / w2 - b / w + w_etaeta
    }
}

/// Residual of the manufactured field on `n³` grids over `(0,1)³`; the
/// observed order must reach 1.8.
pub fn manufactured_residual_benchmark(levels: &[usize]) -> Result<ProbeReport, CroccoError> {
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for &n in levels {
        let ax = Axis::new(0.0, 1.0, n);
        let cf = CroccoField::from_fn(ax, ax, ax, manufactured::w, manufactured::outer);
        let (res, _) = crocco_residual(&cf, Some(&manufactured::forcing))?;
        hs.push(ax.step());
        errs.push(res.iter().fold(0.0f64, |m, r| m.max(r.abs())));
    }
    let orders: Vec<f64> = hs
        .windows(2)
        .zip(errs.windows(2))
        .map(|(h, e)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect();
    let min_order = orders.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ProbeReport::new("crocco-manufactured", errs[errs.len() - 1], 1.0, levels.len())
        .with_constant(min_order)
        .with_verdict(Verdict::from_bool(min_order >= 1.8))
        .detail("h", &hs)
        .detail("max_residuals", &errs)
        .detail("orders", &orders))
}

/// Cubic Lagrange interpolation on a uniform axis, 4-point window clamped
/// to the axis. Returns node indices and weights.
fn cubic_weights(a: &Axis, x: f64) -> ([usize; 4], [f64; 4]) {
    let h = a.step();
    let s = (x - a.lo) / h;
    let base = (s.floor() as isize - 1).clamp(0, a.n as isize - 4) as usize;
    let mut idx = [0; 4];
    let mut w = [0.0; 4];
    for m in 0..4 {
        idx[m] = base + m;
        let mut l = 1.0;
        for q in 0..4 {
            if q != m {
                l *= (s - (base + q) as f64) / (m as f64 - q as f64);
            }
        }
        w[m] = l;
    }
    (idx, w)
}

fn interp3(values: &[f64], axes: (Axis, Axis, Axis), p: (f64, f64, f64)) -> f64 {
    let (ia, wa) = cubic_weights(&axes.0, p.0);
    let (ib, wb) = cubic_weights(&axes.1, p.1);
    let (ic, wc) = cubic_weights(&axes.2, p.2);
    let mut acc = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                acc += wa[a] * wb[b] * wc[c] * values[(ia[a] * axes.1.n + ib[b]) * axes.2.n + ic[c]];
            }
        }
    }
    acc
}

fn interp2(values: &[f64], axes: (Axis, Axis), p: (f64, f64)) -> f64 {
    let (ia, wa) = cubic_weights(&axes.0, p.0);
    let (ib, wb) = cubic_weights(&axes.1, p.1);
    let mut acc = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            acc += wa[a] * wb[b] * values[ia[a] * axes.1.n + ib[b]];
        }
    }
    acc
}

/// `w` in the variables `τ̃ = √U τ`, `ξ̃ = ξ`, `η̃ = √U η` with the rescaled
/// coefficients `b' = Ã` and `c = B̃/√U`.
#[derive(Debug, Clone)]
pub struct RescaledField {
    pub w: GridField,
    pub b_prime: Vec<f64>,
    pub c: Vec<f64>,
}

/// Resamples `w` onto a regular `(τ̃, ξ̃, η̃)` grid covering the common image
/// of the columns, evaluates the rescaled equation by finite differences,
/// and reports the residual with the diffusion sign that follows from
/// `w² ∂ w⁻¹ = -∂ w` (`+∂_η̃(w² √U ∂_η̃ w⁻¹)` on the right) next to the one
/// with the opposite sign.
pub fn rescale_sqrt_u(cf: &CroccoField) -> Result<(RescaledField, ProbeReport), CroccoError> {
    let u_t = cf.u_t.as_ref().ok_or_else(|| CroccoError::Shape("rescaling needs u_t samples".into()))?;
    let (ta, xa, ea) = cf.axes();
    if let Some(&u) = cf.outer.iter().find(|u| !(**u > 0.0)) {
        return Err(CroccoError::NonPositiveOuterFlow(u));
    }
    let uu = |tau: f64, xi: f64, v: &[f64]| interp2(v, (ta, xa), (tau, xi));
    let root = |xi: f64, tau: f64| uu(tau, xi, &cf.outer).sqrt();
    // Common image of the columns.
    let mut tt = (f64::NEG_INFINITY, f64::INFINITY);
    let mut ee = (f64::NEG_INFINITY, f64::INFINITY);
    for j in 0..xa.n {
        for i in [0, ta.n - 1] {
            let r = cf.outer[cf.column(i, j)].sqrt();
            if i == 0 {
                tt.0 = tt.0.max(r * ta.lo);
            } else {
                tt.1 = tt.1.min(r * ta.hi);
            }
        }
        for i in 0..ta.n {
            let r = cf.outer[cf.column(i, j)].sqrt();
            ee.0 = ee.0.max(r * ea.lo);
            ee.1 = ee.1.min(r * ea.hi);
        }
    }
    if !(tt.1 > tt.0 && ee.1 > ee.0) {
        return Err(CroccoError::Shape("rescaled columns share no common box".into()));
    }
    let tilde = (Axis::new(tt.0, tt.1, ta.n), xa, Axis::new(ee.0, ee.1, ea.n));
    // Back to original variables: solve τ̃ = √U(ξ, τ) τ by bisection.
    let back_tau = |tt: f64, xi: f64| -> f64 {
        let (mut lo, mut hi) = (ta.lo, ta.hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if root(xi, mid) * mid < tt {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * (1.0 + hi.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let n = tilde.0.n * tilde.1.n * tilde.2.n;
    let sampled: Vec<(f64, f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let (i, j, m) = (k / (tilde.1.n * tilde.2.n), (k / tilde.2.n) % tilde.1.n, k % tilde.2.n);
            let (tt, xi, et) = (tilde.0.node(i), tilde.1.node(j), tilde.2.node(m));
            let tau = back_tau(tt, xi);
            let r = root(xi, tau);
            let eta = (et / r).clamp(ea.lo, ea.hi);
            let w = interp3(cf.w.values(), (ta, xa, ea), (tau, xi, eta));
            let big = r * r;
            let ux = uu(tau, xi, &cf.outer_x);
            let ut_big = uu(tau, xi, &cf.outer_t);
            let ut = interp3(u_t, (ta, xa, ea), (tau, xi, eta));
            let a = (1.0 - eta * eta) * ux + (1.0 - 1.5 * eta) * ut_big / big + ut / big;
            let b = eta * ux + ut_big / big;
            (w, a, b / r, r)
        })
        .collect();
    let w: Vec<f64> = sampled.iter().map(|s| s.0).collect();
    let min_w = w.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_w >= 1e-8) {
        return Err(CroccoError::DegenerateW(min_w));
    }
    let idx = |i: usize, j: usize, m: usize| (i * tilde.1.n + j) * tilde.2.n + m;
    let inv = |i: usize, j: usize, m: usize| 1.0 / w[idx(i, j, m)];
    let (ht, hx, he) = (tilde.0.step(), tilde.1.step(), tilde.2.step());
    let mut corrected = 0.0f64;
    let mut printed = 0.0f64;
    let mut scaled = 0.0f64;
    for i in 1..tilde.0.n - 1 {
        for j in 1..tilde.1.n - 1 {
            for m in 1..tilde.2.n - 1 {
                let k = idx(i, j, m);
                let (_, a, c, r) = sampled[k];
                let et = tilde.2.node(m);
                let lhs = diff(tilde.0.n, ht, i, |q| inv(q, j, m))
                    + et * diff(tilde.1.n, hx, j, |q| inv(i, q, m))
                    + a * diff(tilde.2.n, he, m, |q| inv(i, j, q))
                    - c * inv(i, j, m);
                // Flux w² √U ∂_η̃ w⁻¹ on the half nodes; the geometric mean
                // keeps w² ∂ w⁻¹ = -∂ w exact on the grid.
                let flux = |q: usize| w[idx(i, j, q)] * w[idx(i, j, q + 1)] * r * (inv(i, j, q + 1) - inv(i, j, q)) / he;
                let div = (flux(m) - flux(m - 1)) / he;
                corrected = corrected.max((lhs - div).abs());
                printed = printed.max((lhs + div).abs());
                scaled = scaled.max((r * (lhs - div)).abs());
            }
        }
    }
    let (res_original, _) = crocco_residual(cf, None)?;
    let original = res_original.iter().fold(0.0f64, |mm, v| mm.max(v.abs()));
    let weights: Vec<f64> = (0..n)
        .map(|k| {
            let (i, j, m) = (k / (tilde.1.n * tilde.2.n), (k / tilde.2.n) % tilde.1.n, k % tilde.2.n);
            tilde.0.weight(i) * tilde.1.weight(j) * tilde.2.weight(m)
        })
        .collect();
    let l6 = |f: &dyn Fn(usize) -> f64| (0..n).map(|k| weights[k] * f(k).abs().powi(6)).sum::<f64>().powf(1.0 / 6.0);
    let b_prime: Vec<f64> = sampled.iter().map(|s| s.1).collect();
    let c: Vec<f64> = sampled.iter().map(|s| s.2).collect();
    let report = ProbeReport::new("crocco-rescale", corrected, printed, n)
        .with_verdict(Verdict::ReportOnly)
        .detail("max_residual", corrected)
        .detail("max_residual_opposite_diffusion_sign", printed)
        .detail("max_scaled_residual", scaled)
        .detail("max_original_residual", original)
        .detail("lq_exponent", 6)
        .detail("b_prime_l6", l6(&|k| b_prime[k]))
        .detail("c_l6", l6(&|k| c[k]));
    let field = GridField::new(vec![tilde.0, tilde.1, tilde.2], w).map_err(|e| CroccoError::Shape(e.to_string()))?;
    Ok((RescaledField { w: field, b_prime, c }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tanh_layer(outer: impl Fn(f64, f64) -> f64, ny: usize) -> BoundaryLayerField {
        let big = |x: f64, t: f64| outer(x, t);
        BoundaryLayerField::from_fn(
            Axis::new(0.0, 1.0, 5),
            Axis::new(0.0, 1.0, 5),
            Axis::new(0.0, 4.0, ny),
            big,
            |x, y, t| outer(x, t) * y.tanh(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn pchip_is_monotone_and_exact_on_lines() {
        let x: Vec<f64> = (0..10).map(|k| (k as f64 / 9.0).powi(2)).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let p = Pchip::new(x.clone(), y);
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            assert!((p.eval(t) - (2.0 * t + 1.0)).abs() < 1e-12);
        }
        let step = Pchip::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0, 1.0]);
        let mut prev = -1.0;
        for k in 0..=300 {
            let v = step.eval(k as f64 / 100.0);
            assert!(v >= prev - 1e-15 && (-1e-15..=1.0 + 1e-15).contains(&v), "{v}");
            prev = v;
        }
    }

    #[test]
    fn tanh_profile_gives_one_minus_eta_squared() {
        let blf = tanh_layer(|_, t| 2.0 + 0.5 * (-t).exp(), 801);
        let cf = crocco_forward(&blf, 41).unwrap();
        let (_, _, ea) = cf.axes();
        assert_eq!(ea.lo, 0.0);
        assert!((ea.hi - 4f64.tanh()).abs() < 1e-15);
        let err = (0..cf.w.len())
            .map(|k| {
                let eta = cf.w.point(k).x[1];
                (cf.w.values()[k] - (1.0 - eta * eta)).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 2e-3, "{err}");
    }

    #[test]
    fn exponential_profile_gives_one_minus_eta() {
        let blf = BoundaryLayerField::from_fn(
            Axis::new(0.0, 1.0, 3),
            Axis::new(0.0, 1.0, 3),
            Axis::new(0.0, 6.0, 601),
            |_, _| 1.5,
            |_, y, _| 1.5 * (1.0 - (-y).exp()),
            None,
        )
        .unwrap();
        let cf = crocco_forward(&blf, 21).unwrap();
        let err = (0..cf.w.len())
            .map(|k| (cf.w.values()[k] - (1.0 - cf.w.point(k).x[1])).abs())
            .fold(0.0, f64::max);
        assert!(err < 2e-3, "{err}");
        // U constant: A vanishes.
        assert_eq!(cf.coefficients(1, 1, 0.3), (0.0, 0.0));
    }

    #[test]
    fn hypotheses_and_negative_controls() {
        let good = tanh_layer(|x, _| 2.0 - 0.5 * x, 201);
        // U_x < 0 with steady U: ∂_x π = -U U_x > 0, unfavourable.
        let r = check_hypotheses(&good);
        assert_eq!(r.details["monotone_class"]["holds"], true);
        assert_eq!(r.details["favourable_pressure"]["holds"], false);
        let accelerating = tanh_layer(|x, _| 2.0 + 0.5 * x, 201);
        assert!(check_hypotheses(&accelerating).passed());
        let bernoulli = tanh_layer(|_, t| 2.0 + 0.5 * (-t).exp(), 201);
        let r = check_hypotheses(&bernoulli);
        assert_eq!(r.details["monotone_class"]["holds"], true);
        assert_eq!(r.details["favourable_pressure"]["holds"], false);
        assert!(r.details["favourable_pressure"]["extreme"].as_f64().unwrap() > 0.0);
        assert!(!r.witnesses.is_empty());
        let flat = BoundaryLayerField::from_fn(
            Axis::new(0.0, 1.0, 3),
            Axis::new(0.0, 1.0, 3),
            Axis::new(0.0, 4.0, 81),
            |_, _| 1.0,
            |_, y, _| if (1.0..2.0).contains(&y) { 0.5 } else if y < 1.0 { 0.5 * y } else { 0.5 + 0.2 * (y - 2.0) },
            None,
        )
        .unwrap();
        let r = check_hypotheses(&flat);
        assert_eq!(r.details["monotone_class"]["holds"], false);
        let w = r.details["monotone_class"]["witness"].as_array().unwrap();
        let y = w[2].as_f64().unwrap();
        assert!((1.0..=2.0).contains(&y), "{y}");
        assert!(matches!(crocco_forward(&flat, 11), Err(CroccoError::NonMonotoneColumn { .. })));
        let suction = BoundaryLayerField::from_fn(
            Axis::new(0.0, 1.0, 3),
            Axis::new(0.0, 1.0, 3),
            Axis::new(0.0, 4.0, 41),
            |x, _| 1.0 + x,
            |x, y, _| (1.0 + x) * y.tanh(),
            Some(&|_, _| 0.1),
        )
        .unwrap();
        assert_eq!(check_hypotheses(&suction).details["wall_suction"]["holds"], false);
    }

    #[test]
    fn eta_outside_unit_interval_is_an_error() {
        let over = BoundaryLayerField::from_fn(
            Axis::new(0.0, 1.0, 3),
            Axis::new(0.0, 1.0, 3),
            Axis::new(0.0, 4.0, 41),
            |_, _| 1.0,
            |_, y, _| 1.2 * y.tanh(),
            None,
        )
        .unwrap();
        assert!(matches!(crocco_forward(&over, 11), Err(CroccoError::EtaOutOfRange { .. })));
    }

    #[test]
    fn manufactured_residual_is_second_order() {
        let r = manufactured_residual_benchmark(&[17, 33, 65]).unwrap();
        assert!(r.passed(), "{}", r.to_json());
    }

    #[test]
    fn unforced_manufactured_field_has_residual() {
        let ax = Axis::new(0.0, 1.0, 17);
        let cf = CroccoField::from_fn(ax, ax, ax, manufactured::w, manufactured::outer);
        let r = verify_crocco_residual(&cf, None).unwrap();
        assert!(r.lhs_sup > 0.1);
        let noisy = CroccoField {
            w: cf.w.map(|v| v * (1.0 + 0.3 * (1e3 * v).sin())),
            ..cf.clone()
        };
        assert!(verify_crocco_residual(&noisy, None).unwrap().lhs_sup > 10.0 * r.lhs_sup);
        let degenerate = CroccoField { w: cf.w.map(|_| 0.0), ..cf };
        assert!(matches!(verify_crocco_residual(&degenerate, None), Err(CroccoError::DegenerateW(_))));
    }

    #[test]
    fn constant_outer_flow_rescaling_is_a_pure_scaling() {
        let blf = BoundaryLayerField::from_fn(
            Axis::new(0.0, 1.0, 5),
            Axis::new(0.0, 1.0, 17),
            Axis::new(0.0, 4.0, 801),
            |_, _| 2.25,
            |x, y, _| 2.25 * (y / (1.0 + x)).tanh(),
            None,
        )
        .unwrap();
        let cf = crocco_forward(&blf, 41).unwrap();
        let (tilde, r) = rescale_sqrt_u(&cf).unwrap();
        let scaled = r.get_f64("max_scaled_residual").unwrap();
        let original = r.get_f64("max_original_residual").unwrap();
        assert!((scaled - original).abs() <= 0.05 * original.max(1e-6), "{scaled} {original}");
        let opposite = r.get_f64("max_residual_opposite_diffusion_sign").unwrap();
        assert!(opposite > 1.1 * r.lhs_sup, "{opposite} {}", r.lhs_sup);
        assert!((tilde.w.axes()[2].hi - 1.5 * 2f64.tanh()).abs() < 1e-12);
        assert_eq!(r.details["lq_exponent"], 6);
    }

    #[test]
    fn time_dependent_outer_flow_rescaling_is_reported() {
        let blf = tanh_layer(|x, t| 2.0 + 0.5 * (-t).exp() + 0.2 * x, 401);
        let cf = crocco_forward(&blf, 21).unwrap();
        let (tilde, r) = rescale_sqrt_u(&cf).unwrap();
        assert!(r.lhs_sup.is_finite() && r.lhs_sup > 0.0);
        assert!(r.get_f64("b_prime_l6").unwrap() > 0.0);
        assert!(r.get_f64("c_l6").unwrap() > 0.0);
        assert_eq!(tilde.b_prime.len(), tilde.w.len());
        let bare = CroccoField { u_t: None, ..cf };
        assert!(rescale_sqrt_u(&bare).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pchip_preserves_monotone_data(steps in proptest::collection::vec(0.0f64..1.0, 3..12)) {
            let x: Vec<f64> = (0..=steps.len()).map(|k| k as f64).collect();
            let mut y = vec![0.0];
            for s in &steps {
                y.push(y[y.len() - 1] + s);
            }
            let p = Pchip::new(x.clone(), y.clone());
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=(steps.len() * 20) {
                let v = p.eval(k as f64 / 20.0);
                prop_assert!(v >= prev - 1e-12);
                prev = v;
            }
            for (a, b) in x.iter().zip(&y) {
                prop_assert!((p.eval(*a) - b).abs() < 1e-12);
            }
        }
    }
}
