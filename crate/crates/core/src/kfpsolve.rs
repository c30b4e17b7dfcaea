//! Finite differences for
//! `∂_t u = Σ ∂_i(a_ij ∂_j u) + x^T B D u - b'·D_{m₀} u - c u - f`
//! on a box, diffusion in the first `m₀` coordinates only.
//!
//! Diffusion uses conservative fluxes with harmonic-mean face coefficients,
//! the transport term `x^T B D u - b'·D u` is upwinded per axis. Time
//! stepping is explicit Euler, or implicit in the diffusion part.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fundsol;
use crate::grid::{Axis, GridError, GridField};
use crate::hypogroup::{GroupPoint, OperatorStructure};
use crate::report::{ProbeReport, Verdict};

/// Default fraction of the stability limit used for the time step.
pub const DEFAULT_SAFETY: f64 = 0.45;
/// Max-norm beyond which a run counts as blown up.
pub const BLOWUP: f64 = 1e12;

#[derive(Debug, Error)]
pub enum KfpError {
    #[error("time step {dt} exceeds the stability limit {limit}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("solution exceeded {BLOWUP:e} in max norm at t = {t}")]
    UnstableBlowup { t: f64 },
    #[error("ellipticity violated at node {node}: eigenvalues outside [1/{lambda}, {lambda}]")]
    Ellipticity { node: usize, lambda: f64 },
    #[error("bad coefficients: {0}")]
    Coefficients(String),
    #[error("test function touches the boundary")]
    SupportViolation,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Coefficients sampled on the spatial nodes; constant in time.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    axes: Vec<Axis>,
    m0: usize,
    /// `m₀ × m₀` row-major block per node.
    a: Vec<f64>,
    /// `m₀` entries per node.
    bprime: Vec<f64>,
    c: Vec<f64>,
    f: Vec<f64>,
    lambda: f64,
}

fn node_count(axes: &[Axis]) -> usize {
    axes.iter().map(|a| a.n).product()
}

fn strides(axes: &[Axis]) -> Vec<usize> {
    let mut s = vec![1; axes.len()];
    for k in (0..axes.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * axes[k + 1].n;
    }
    s
}

fn multi_index(axes: &[Axis], mut k: usize) -> Vec<usize> {
    let mut idx = vec![0; axes.len()];
    for a in (0..axes.len()).rev() {
        idx[a] = k % axes[a].n;
        k /= axes[a].n;
    }
    idx
}

fn node_x(axes: &[Axis], k: usize) -> Vec<f64> {
    multi_index(axes, k).iter().zip(axes).map(|(&i, a)| a.node(i)).collect()
}

impl CoefficientField {
    /// `a ≡ I`, everything else zero.
    pub fn identity(s: &OperatorStructure, axes: &[Axis]) -> Self {
        Self::constant(s, axes, &DMatrix::identity(s.m0(), s.m0()), s.lambda().max(1.0))
            .expect("identity is elliptic")
    }

    pub fn constant(s: &OperatorStructure, axes: &[Axis], a: &DMatrix<f64>, lambda: f64) -> Result<Self, KfpError> {
        Self::from_fn(s, axes, lambda, |_| a.clone())
    }

    /// Samples `a(x)` at every node and checks ellipticity.
    pub fn from_fn(
        s: &OperatorStructure,
        axes: &[Axis],
        lambda: f64,
        a: impl Fn(&[f64]) -> DMatrix<f64>,
    ) -> Result<Self, KfpError> {
        if axes.len() != s.dim() {
            return Err(KfpError::Coefficients(format!("{} axes for N = {}", axes.len(), s.dim())));
        }
        let m0 = s.m0();
        let n = node_count(axes);
        let mut flat = Vec::with_capacity(n * m0 * m0);
        for k in 0..n {
            let m = a(&node_x(axes, k));
            if m.nrows() != m0 || m.ncols() != m0 {
                return Err(KfpError::Coefficients(format!("a must be {m0}x{m0}")));
            }
            flat.extend(m.transpose().iter());
        }
        let out = Self {
            axes: axes.to_vec(),
            m0,
            a: flat,
            bprime: vec![0.0; n * m0],
            c: vec![0.0; n],
            f: vec![0.0; n],
            lambda,
        };
        out.check_ellipticity()?;
        Ok(out)
    }

    /// `a ≡ 0`; pure transport, outside the admissible class.
    #[cfg(test)]
    pub(crate) fn transport_only(s: &OperatorStructure, axes: &[Axis]) -> Self {
        let n = node_count(axes);
        let m0 = s.m0();
        Self {
            axes: axes.to_vec(),
            m0,
            a: vec![0.0; n * m0 * m0],
            bprime: vec![0.0; n * m0],
            c: vec![0.0; n],
            f: vec![0.0; n],
            lambda: f64::INFINITY,
        }
    }

    pub fn with_bprime(mut self, b: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        for k in 0..self.len() {
            let v = b(&node_x(&self.axes, k));
            self.bprime[k * self.m0..(k + 1) * self.m0].copy_from_slice(&v[..self.m0]);
        }
        self
    }

    pub fn with_c(mut self, c: impl Fn(&[f64]) -> f64) -> Self {
        for k in 0..self.len() {
            self.c[k] = c(&node_x(&self.axes, k));
        }
        self
    }

    pub fn with_f(mut self, f: impl Fn(&[f64]) -> f64) -> Self {
        for k in 0..self.len() {
            self.f[k] = f(&node_x(&self.axes, k));
        }
        self
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn a_at(&self, k: usize) -> DMatrix<f64> {
        let m = self.m0;
        DMatrix::from_row_slice(m, m, &self.a[k * m * m..(k + 1) * m * m])
    }

    fn a_entry(&self, k: usize, i: usize, j: usize) -> f64 {
        self.a[k * self.m0 * self.m0 + i * self.m0 + j]
    }

    pub fn bprime_at(&self, k: usize) -> &[f64] {
        &self.bprime[k * self.m0..(k + 1) * self.m0]
    }

    pub fn c_at(&self, k: usize) -> f64 {
        self.c[k]
    }

    pub fn f_at(&self, k: usize) -> f64 {
        self.f[k]
    }

    /// Nearest spatial node to `x`, `None` outside the box.
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        let mut k = 0;
        for (a, &xi) in self.axes.iter().zip(x) {
            if !(xi >= a.lo && xi <= a.hi) {
                return None;
            }
            let i = ((xi - a.lo) / a.step()).round() as usize;
            k = k * a.n + i.min(a.n - 1);
        }
        Some(k)
    }

    /// Symmetric `a` with spectrum in `[1/λ, λ]` at every node.
    pub fn check_ellipticity(&self) -> Result<(), KfpError> {
        let tol = 1e-12;
        for k in 0..self.len() {
            let a = self.a_at(k);
            if (&a - a.transpose()).amax() > tol * (1.0 + a.amax()) || a.iter().any(|v| !v.is_finite()) {
                return Err(KfpError::Ellipticity { node: k, lambda: self.lambda });
            }
            let eig = a.symmetric_eigen().eigenvalues;
            if eig.min() < (1.0 - tol) / self.lambda || eig.max() > self.lambda * (1.0 + tol) {
                return Err(KfpError::Ellipticity { node: k, lambda: self.lambda });
            }
        }
        Ok(())
    }

    /// Discrete `L^p` norms of `|b'|`, `c` and `f` over the spatial box,
    /// multiplied by the time length `duration` to the power `1/p`.
    pub fn norms(&self, p_bprime: f64, q: f64, duration: f64) -> CoefficientNorms {
        let w: Vec<f64> = (0..self.len())
            .map(|k| {
                multi_index(&self.axes, k)
                    .iter()
                    .zip(&self.axes)
                    .map(|(&i, a)| a.weight(i))
                    .product()
            })
            .collect();
        let lp = |vals: &mut dyn Iterator<Item = f64>, p: f64| {
            let s: f64 = vals.zip(&w).map(|(v, w)| w * v.abs().powf(p)).sum();
            (duration * s).powf(1.0 / p)
        };
        let m = self.m0;
        let bnorm = (0..self.len()).map(|k| self.bprime[k * m..(k + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt());
        CoefficientNorms {
            p_bprime,
            q,
            bprime: lp(&mut bnorm.into_iter(), p_bprime),
            c: lp(&mut self.c.iter().copied(), q),
            f: lp(&mut self.f.iter().copied(), q),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientNorms {
    pub p_bprime: f64,
    pub q: f64,
    pub bprime: f64,
    pub c: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoughPattern {
    /// `a = λ^{±1} I` alternating over cells.
    Checkerboard,
    /// Independent random symmetric `a` per cell.
    RandomCellwise,
}

/// Optional lower-order terms of a rough coefficient set, cellwise constant
/// with random signs (`b'`) or random values in `[0, amp]` (`c`, and `-f`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LowerOrder {
    #[serde(default)]
    pub bprime: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub f: f64,
}

/// Cellwise-constant coefficients on `cells` cells per spatial axis.
pub fn make_rough_coefficients(
    s: &OperatorStructure,
    axes: &[Axis],
    pattern: RoughPattern,
    lambda: f64,
    cells: usize,
    lower: LowerOrder,
    seed: u64,
) -> Result<CoefficientField, KfpError> {
    if !(lambda > 1.0) || cells == 0 {
        return Err(KfpError::Coefficients(format!("need lambda > 1 and cells > 0, got {lambda}, {cells}")));
    }
    let m0 = s.m0();
    let n = axes.len();
    let ncells = cells.pow(n as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cell_a = Vec::with_capacity(ncells);
    let mut cell_lower = Vec::with_capacity(ncells);
    for id in 0..ncells {
        let a = match pattern {
            RoughPattern::Checkerboard => {
                let mut r = id;
                let mut parity = 0;
                for _ in 0..n {
                    parity += r % cells;
                    r /= cells;
                }
                let v = if parity % 2 == 0 { 1.0 / lambda } else { lambda };
                DMatrix::identity(m0, m0) * v
            }
            RoughPattern::RandomCellwise => {
                let ln = lambda.ln();
                let eig: Vec<f64> = (0..m0).map(|_| (rng.random_range(-ln..ln)).exp()).collect();
                let g = DMatrix::from_fn(m0, m0, |_, _| rng.random_range(-1.0..1.0));
                let q = g.qr().q();
                &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig)) * q.transpose()
            }
        };
        let a = (&a + a.transpose()) * 0.5;
        cell_a.push(a);
        let b: Vec<f64> = (0..m0).map(|_| if rng.random_bool(0.5) { lower.bprime } else { -lower.bprime }).collect();
        let c = lower.c * rng.random_range(0.0..1.0);
        let f = -lower.f * rng.random_range(0.0..1.0);
        cell_lower.push((b, c, f));
    }
    let cell_of = |x: &[f64]| {
        let mut id = 0;
        for (i, a) in axes.iter().enumerate() {
            let u = ((x[i] - a.lo) / (a.hi - a.lo) * cells as f64).floor() as isize;
            id = id * cells + u.clamp(0, cells as isize - 1) as usize;
        }
        id
    };
    let field = CoefficientField::from_fn(s, axes, lambda, |x| cell_a[cell_of(x)].clone())?;
    Ok(field
        .with_bprime(|x| cell_lower[cell_of(x)].0.clone())
        .with_c(|x| cell_lower[cell_of(x)].1)
        .with_f(|x| cell_lower[cell_of(x)].2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    ExplicitUpwindDiffusion,
    ImplicitDiffusionUpwindDrift,
}

/// Space-time box and stepping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub t0: f64,
    pub t1: f64,
    /// Stored time slices, including both ends.
    pub n_out: usize,
    pub space: Vec<Axis>,
    #[serde(default)]
    pub scheme: Scheme,
    /// Fixed step; chosen from the stability limit when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_safety")]
    pub safety: f64,
}

fn default_safety() -> f64 {
    DEFAULT_SAFETY
}

impl SolverConfig {
    pub fn new(t0: f64, t1: f64, n_out: usize, space: Vec<Axis>) -> Self {
        Self { t0, t1, n_out, space, scheme: Scheme::default(), dt: None, safety: DEFAULT_SAFETY }
    }

    pub fn axes(&self) -> Vec<Axis> {
        let mut axes = vec![Axis::new(self.t0, self.t1, self.n_out)];
        axes.extend_from_slice(&self.space);
        axes
    }
}

pub type SpaceTimeFn<'a> = &'a (dyn Fn(&GroupPoint) -> f64 + Sync);

/// Dirichlet data on the spatial boundary and at `t0`, and an optional
/// time-dependent source added to the sampled `f`.
#[derive(Clone, Copy)]
pub struct Data<'a> {
    pub boundary: SpaceTimeFn<'a>,
    pub source: Option<SpaceTimeFn<'a>>,
}

#[derive(Debug, Clone)]
pub struct SolutionField {
    pub field: GridField,
    pub dt: f64,
    /// Stability limit of the explicit scheme for these coefficients.
    pub dt_limit: f64,
    pub steps: usize,
    pub scheme: Scheme,
}

/// Per interior node stencil data.
struct Stencil {
    node: usize,
    /// `(A⁻, A⁺)` face coefficients over `h²` per diffusion axis.
    faces: Vec<(f64, f64)>,
    /// Transport speed per axis over `h`.
    speed: Vec<f64>,
    c: f64,
    f: f64,
}

struct Operator {
    m0: usize,
    strides: Vec<usize>,
    h: Vec<f64>,
    interior: Vec<Stencil>,
    boundary: Vec<usize>,
    /// Off-diagonal `a_ij` per node, present when any is nonzero.
    cross: Option<Arc<CoefficientField>>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

impl Operator {
    fn new(s: &OperatorStructure, coeff: &CoefficientField) -> Self {
        let axes = &coeff.axes;
        let n = axes.len();
        let m0 = s.m0();
        let st = strides(axes);
        let h: Vec<f64> = axes.iter().map(|a| a.step()).collect();
        let b = s.drift();
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        for k in 0..coeff.len() {
            let idx = multi_index(axes, k);
            if idx.iter().zip(axes).any(|(&i, a)| i == 0 || i + 1 == a.n) {
                boundary.push(k);
                continue;
            }
            let x: Vec<f64> = idx.iter().zip(axes).map(|(&i, a)| a.node(i)).collect();
            let faces = (0..m0)
                .map(|i| {
                    let here = coeff.a_entry(k, i, i);
                    let lo = harmonic(here, coeff.a_entry(k - st[i], i, i));
                    let hi = harmonic(here, coeff.a_entry(k + st[i], i, i));
                    (lo / (h[i] * h[i]), hi / (h[i] * h[i]))
                })
                .collect();
            let speed = (0..n)
                .map(|j| {
                    let mut w: f64 = (0..n).map(|i| x[i] * b[(i, j)]).sum();
                    if j < m0 {
                        w -= coeff.bprime[k * m0 + j];
                    }
                    w / h[j]
                })
                .collect();
            interior.push(Stencil { node: k, faces, speed, c: coeff.c[k], f: coeff.f[k] });
        }
        let has_cross = (0..coeff.len()).any(|k| (0..m0).any(|i| (0..m0).any(|j| i != j && coeff.a_entry(k, i, j) != 0.0)));
        Self {
            m0,
            strides: st,
            h,
            interior,
            boundary,
            cross: has_cross.then(|| Arc::new(coeff.clone())),
        }
    }

    /// Largest stable explicit step: the reciprocal of the diagonal
    /// weight of the monotone update.
    fn explicit_limit(&self, implicit_diffusion: bool) -> f64 {
        let worst = self
            .interior
            .iter()
            .map(|p| {
                let diff: f64 = if implicit_diffusion { 0.0 } else { p.faces.iter().map(|(a, b)| a + b).sum() };
                diff + p.speed.iter().map(|v| v.abs()).sum::<f64>() + p.c.max(0.0)
            })
            .fold(0.0, f64::max);
        if worst > 0.0 {
            1.0 / worst
        } else {
            f64::INFINITY
        }
    }

    fn diffusion(&self, p: &Stencil, u: &[f64]) -> f64 {
        let k = p.node;
        let mut acc = 0.0;
        for (i, &(lo, hi)) in p.faces.iter().enumerate() {
            let s = self.strides[i];
            acc += hi * (u[k + s] - u[k]) - lo * (u[k] - u[k - s]);
        }
        if let Some(coeff) = &self.cross {
            for i in 0..self.m0 {
                for j in 0..self.m0 {
                    if i == j {
                        continue;
                    }
                    let (si, sj) = (self.strides[i], self.strides[j]);
                    let up = coeff.a_entry(k + si, i, j) * (u[k + si + sj] - u[k + si - sj]);
                    let down = coeff.a_entry(k - si, i, j) * (u[k - si + sj] - u[k - si - sj]);
                    acc += (up - down) / (4.0 * self.h[i] * self.h[j]);
                }
            }
        }
        acc
    }

    fn transport(&self, p: &Stencil, u: &[f64]) -> f64 {
        let k = p.node;
        p.speed
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let s = self.strides[j];
                if w > 0.0 {
                    w * (u[k + s] - u[k])
                } else {
                    w * (u[k] - u[k - s])
                }
            })
            .sum()
    }
}

/// Marches from `cfg.t0` to `cfg.t1` and stores `cfg.n_out` slices.
pub fn solve(
    s: &OperatorStructure,
    coeff: &CoefficientField,
    cfg: &SolverConfig,
    data: Data<'_>,
) -> Result<SolutionField, KfpError> {
    if cfg.space.len() != s.dim() || coeff.axes != cfg.space {
        return Err(KfpError::Coefficients("coefficient grid differs from the solver grid".into()));
    }
    if !(cfg.t1 > cfg.t0) || cfg.n_out < 2 || !(cfg.safety > 0.0 && cfg.safety <= 1.0) {
        return Err(KfpError::Coefficients("need t1 > t0, n_out ≥ 2 and safety in (0, 1]".into()));
    }
    for a in &cfg.space {
        Axis::checked(a.lo, a.hi, a.n)?;
        if a.n < 3 {
            return Err(KfpError::Coefficients("each spatial axis needs at least 3 nodes".into()));
        }
    }
    let op = Operator::new(s, coeff);
    let implicit = cfg.scheme == Scheme::ImplicitDiffusionUpwindDrift;
    let dt_limit = op.explicit_limit(false);
    let limit = op.explicit_limit(implicit);
    let out_dt = (cfg.t1 - cfg.t0) / (cfg.n_out - 1) as f64;
    let dt_target = match cfg.dt {
        Some(dt) => {
            if !(dt > 0.0) || dt > cfg.safety * limit {
                return Err(KfpError::CflViolation { dt, limit: cfg.safety * limit });
            }
            dt
        }
        None => cfg.safety * limit,
    };
    let sub = (out_dt / dt_target).ceil().max(1.0) as usize;
    let dt = out_dt / sub as f64;

    let space = &cfg.space;
    let n_sp = coeff.len();
    let xs: Vec<Vec<f64>> = (0..n_sp).map(|k| node_x(space, k)).collect();
    let point = |k: usize, t: f64| GroupPoint::new(&xs[k], t);
    let mut u: Vec<f64> = (0..n_sp).into_par_iter().map(|k| (data.boundary)(&point(k, cfg.t0))).collect();
    let mut next = u.clone();
    let mut values = Vec::with_capacity(n_sp * cfg.n_out);
    values.extend_from_slice(&u);
    let mut tridiag = if implicit { Some(Implicit::new(dt)) } else { None };
    let mut steps = 0;
    for slice in 1..cfg.n_out {
        for j in 0..sub {
            let t = cfg.t0 + (slice - 1) as f64 * out_dt + j as f64 * dt;
            let t_next = if j + 1 == sub { cfg.t0 + slice as f64 * out_dt } else { t + dt };
            let explicit_part = |p: &Stencil| {
                let src = data.source.map_or(0.0, |g| g(&point(p.node, t)));
                let mut du = op.transport(p, &u) - p.c * u[p.node] - p.f - src;
                if !implicit {
                    du += op.diffusion(p, &u);
                }
                u[p.node] + dt * du
            };
            let updates: Vec<f64> = op.interior.par_iter().map(explicit_part).collect();
            for (p, v) in op.interior.iter().zip(updates) {
                next[p.node] = v;
            }
            for &k in &op.boundary {
                next[k] = (data.boundary)(&point(k, t_next));
            }
            if let Some(imp) = tridiag.as_mut() {
                imp.solve(&op, &mut next);
            }
            std::mem::swap(&mut u, &mut next);
            steps += 1;
            if u.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
                return Err(KfpError::UnstableBlowup { t: t_next });
            }
        }
        values.extend_from_slice(&u);
    }
    let field = GridField::new(cfg.axes(), values)?;
    Ok(SolutionField { field, dt, dt_limit, steps, scheme: cfg.scheme })
}

/// `(I - dt·D) u = rhs` on the interior, boundary values fixed.
struct Implicit {
    dt: f64,
}

impl Implicit {
    fn new(dt: f64) -> Self {
        Self { dt }
    }

    /// `(I - dt·D) v` on interior nodes, reading boundary values from `full`.
    fn apply(&self, op: &Operator, v: &[f64], full: &mut [f64], out: &mut [f64], with_boundary: bool) {
        for (p, &x) in op.interior.iter().zip(v) {
            full[p.node] = x;
        }
        if !with_boundary {
            for &k in &op.boundary {
                full[k] = 0.0;
            }
        }
        out.par_iter_mut()
            .zip(op.interior.par_iter())
            .for_each(|(o, p)| *o = full[p.node] - self.dt * op.diffusion(p, full));
    }

    fn solve(&mut self, op: &Operator, u: &mut [f64]) {
        let n = op.interior.len();
        let rhs: Vec<f64> = op.interior.iter().map(|p| u[p.node]).collect();
        // Move the boundary contribution to the right side: b = rhs - A(0; g).
        let mut full = u.to_vec();
        let mut lift = vec![0.0; n];
        self.apply(op, &vec![0.0; n], &mut full, &mut lift, true);
        let b: Vec<f64> = rhs.iter().zip(&lift).map(|(r, l)| r - l).collect();
        // Conjugate gradients, warm-started from the explicit values.
        let mut x = rhs.clone();
        let mut scratch = vec![0.0; full.len()];
        let mut ax = vec![0.0; n];
        self.apply(op, &x, &mut scratch, &mut ax, false);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut p = r.clone();
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        let bnorm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for _ in 0..(4 * n + 100) {
            if rr.sqrt() <= 1e-13 * bnorm {
                break;
            }
            let mut ap = vec![0.0; n];
            self.apply(op, &p, &mut scratch, &mut ap, false);
            let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        for (p, v) in op.interior.iter().zip(x) {
            u[p.node] = v;
        }
    }
}

/// Smooth bump test function on a box `center ± radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBump {
    pub center: Vec<f64>,
    pub t_center: f64,
    pub radius: Vec<f64>,
    pub t_radius: f64,
}

fn bump1(u: f64) -> (f64, f64) {
    if u.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let q = 1.0 - u * u;
    let v = (-1.0 / q).exp();
    (v, v * (-2.0 * u / (q * q)))
}

impl TestBump {
    /// `(φ, ∇_x φ, ∂_t φ)` at a point.
    fn eval(&self, x: &[f64], t: f64) -> (f64, Vec<f64>, f64) {
        let n = x.len();
        let parts: Vec<(f64, f64)> = (0..n).map(|i| bump1((x[i] - self.center[i]) / self.radius[i])).collect();
        let (tv, td) = bump1((t - self.t_center) / self.t_radius);
        let prod: f64 = parts.iter().map(|p| p.0).product::<f64>() * tv;
        let grad = (0..n)
            .map(|i| {
                let others: f64 = parts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.0).product();
                others * tv * parts[i].1 / self.radius[i]
            })
            .collect();
        let dt = parts.iter().map(|p| p.0).product::<f64>() * td / self.t_radius;
        (prod, grad, dt)
    }

    fn inside(&self, axes: &[Axis]) -> bool {
        let t = axes[0];
        let ok_t = self.t_center - self.t_radius > t.lo && self.t_center + self.t_radius < t.hi;
        ok_t && self
            .center
            .iter()
            .zip(&self.radius)
            .zip(&axes[1..])
            .all(|((c, r), a)| c - r > a.lo && c + r < a.hi)
    }
}

/// Four bumps filling the middle of the box at two scales.
pub fn default_test_family(axes: &[Axis]) -> Vec<TestBump> {
    let mid = |a: &Axis| 0.5 * (a.lo + a.hi);
    let half = |a: &Axis| 0.5 * (a.hi - a.lo);
    let mut out = Vec::new();
    for (scale, shift) in [(0.6, 0.0), (0.35, -0.25), (0.35, 0.25), (0.45, 0.1)] {
        out.push(TestBump {
            center: axes[1..].iter().map(|a| mid(a) + shift * half(a)).collect(),
            t_center: mid(&axes[0]) + 0.5 * shift * half(&axes[0]),
            radius: axes[1..].iter().map(|a| scale * half(a)).collect(),
            t_radius: 0.6 * half(&axes[0]),
        });
    }
    out
}

/// Gap between `∫ φ Yu - (Du)^T A Dφ` and `∫ φ (b'·D u + c u + f)` for
/// each test function, normalized by
/// `sup|u| · (‖φ‖₁ + ‖D_{m₀}φ‖₁ + ‖Yφ‖₁)`.
pub fn weak_residual(
    s: &OperatorStructure,
    sol: &GridField,
    coeff: &CoefficientField,
    family: &[TestBump],
    source: Option<SpaceTimeFn<'_>>,
) -> Result<ProbeReport, KfpError> {
    let axes = sol.axes();
    if family.iter().any(|b| !b.inside(axes)) {
        return Err(KfpError::SupportViolation);
    }
    let n = s.dim();
    let m0 = s.m0();
    let shape = sol.shape();
    let st = sol.strides().to_vec();
    let b = s.drift();
    let scale = sol.sup_abs().max(1e-300);
    let h: Vec<f64> = axes.iter().map(|a| a.step()).collect();
    // Central differences, one-sided on the box faces.
    let diff = |k: usize, idx: &[usize], axis: usize| -> f64 {
        let v = sol.values();
        let s = st[axis];
        if idx[axis] == 0 {
            (v[k + s] - v[k]) / h[axis]
        } else if idx[axis] + 1 == shape[axis] {
            (v[k] - v[k - s]) / h[axis]
        } else {
            (v[k + s] - v[k - s]) / (2.0 * h[axis])
        }
    };
    let n_sp = coeff.len();
    let mut gaps = Vec::with_capacity(family.len());
    let mut raw = Vec::with_capacity(family.len());
    for phi in family {
        let (mut lhs, mut rhs, mut norm) = (0.0, 0.0, 0.0);
        for k in 0..sol.len() {
            let idx = sol.multi(k);
            let z = sol.point(k);
            let (pv, pg, pt) = phi.eval(z.x.as_slice(), z.t);
            if pv == 0.0 && pg.iter().all(|g| *g == 0.0) {
                continue;
            }
            let w = sol.weight(k);
            let node = k % n_sp;
            let u = sol.values()[k];
            let du: Vec<f64> = (0..n).map(|j| diff(k, &idx, j + 1)).collect();
            let ut = diff(k, &idx, 0);
            let drift_u: f64 = (0..n).map(|j| (0..n).map(|i| z.x[i] * b[(i, j)]).sum::<f64>() * du[j]).sum();
            let drift_phi: f64 = (0..n).map(|j| (0..n).map(|i| z.x[i] * b[(i, j)]).sum::<f64>() * pg[j]).sum();
            let mut flux = 0.0;
            for i in 0..m0 {
                for j in 0..m0 {
                    flux += du[i] * coeff.a_entry(node, i, j) * pg[j];
                }
            }
            let bp: f64 = (0..m0).map(|i| coeff.bprime[node * m0 + i] * du[i]).sum();
            let f = coeff.f[node] + source.map_or(0.0, |g| g(&z));
            lhs += w * (pv * (drift_u - ut) - flux);
            rhs += w * pv * (bp + coeff.c[node] * u + f);
            let grad_norm: f64 = pg[..m0].iter().map(|g| g * g).sum::<f64>().sqrt();
            norm += w * (pv.abs() + grad_norm + (drift_phi - pt).abs());
        }
        raw.push(lhs - rhs);
        gaps.push(if norm > 0.0 { (lhs - rhs).abs() / (scale * norm) } else { 0.0 });
    }
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    Ok(ProbeReport::new("weak-residual", worst, 1.0, family.len())
        .detail("normalized_gaps", &gaps)
        .detail("raw_gaps", &raw)
        .detail("solution_sup", scale))
}

/// Observed orders `log(e_k/e_{k+1}) / log(h_k/h_{k+1})`.
pub fn observed_orders(h: &[f64], err: &[f64]) -> Vec<f64> {
    h.windows(2)
        .zip(err.windows(2))
        .map(|(h, e)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect()
}

/// Box, times and refinement levels of the exact-kernel benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBenchmark {
    pub t0: f64,
    pub t1: f64,
    pub half_widths: Vec<f64>,
    /// Nodes per spatial axis on each level.
    pub levels: Vec<usize>,
    pub n_out: usize,
    pub scheme: Scheme,
}

impl Default for KernelBenchmark {
    fn default() -> Self {
        Self { t0: 0.1, t1: 0.3, half_widths: vec![0.5, 0.125], levels: vec![33, 65, 129], n_out: 5, scheme: Scheme::default() }
    }
}

/// Evolves `Γ₁(·, t₀ + ·; 0)` with `a ≡ I` and compares the last slice with
/// the exact kernel.
pub fn kernel_benchmark(s: &OperatorStructure, cfg: &KernelBenchmark) -> Result<ProbeReport, KfpError> {
    let origin = GroupPoint::origin(s.dim());
    let exact = |z: &GroupPoint| fundsol::gamma1(s, z, &origin).value;
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    let mut rels = Vec::new();
    let mut steps = Vec::new();
    for &n in &cfg.levels {
        let space: Vec<Axis> = cfg.half_widths.iter().map(|&w| Axis::new(-w, w, n)).collect();
        let mut sc = SolverConfig::new(cfg.t0, cfg.t1, cfg.n_out, space.clone());
        sc.scheme = cfg.scheme;
        let coeff = CoefficientField::identity(s, &space);
        let sol = solve(s, &coeff, &sc, Data { boundary: &exact, source: None })?;
        let last = sol.field.axes()[0].n - 1;
        let vals = sol.field.time_slice(last);
        let (mut err, mut sup) = (0.0f64, 0.0f64);
        for (k, v) in vals.iter().enumerate() {
            let z = GroupPoint::new(&node_x(&space, k), cfg.t1);
            let e = exact(&z);
            err = err.max((v - e).abs());
            sup = sup.max(e.abs());
        }
        hs.push(space[0].step());
        errs.push(err);
        rels.push(err / sup);
        steps.push(sol.steps);
    }
    let orders = observed_orders(&hs, &errs);
    let min_order = orders.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ProbeReport::new("kernel-benchmark", errs[errs.len() - 1], 1.0, cfg.levels.len())
        .with_constant(min_order)
        .with_verdict(Verdict::from_bool(min_order >= 0.8))
        .detail("h", &hs)
        .detail("linf_errors", &errs)
        .detail("relative_errors", &rels)
        .detail("orders", &orders)
        .detail("steps", &steps)
        .detail("config", cfg))
}

/// Heat-case manufactured benchmark: `u = e^{-t} sin x` with
/// `a(x) = 1 + sin(x)/2`, so `f = e^{-t} cos(2x)/2`.
pub fn heat_benchmark(levels: &[usize], scheme: Scheme) -> Result<ProbeReport, KfpError> {
    let s = OperatorStructure::heat(1);
    let exact = |z: &GroupPoint| (-z.t).exp() * z.x[0].sin();
    let source = |z: &GroupPoint| 0.5 * (-z.t).exp() * (2.0 * z.x[0]).cos();
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for &n in levels {
        let space = vec![Axis::new(-1.5, 1.5, n)];
        let coeff = CoefficientField::from_fn(&s, &space, 2.0, |x| DMatrix::from_element(1, 1, 1.0 + 0.5 * x[0].sin()))?;
        let mut sc = SolverConfig::new(0.0, 0.5, 3, space.clone());
        sc.scheme = scheme;
        if scheme == Scheme::ImplicitDiffusionUpwindDrift {
            // Parabolic scaling keeps the first-order time error below the
            // spatial one.
            sc.dt = Some(0.5 * space[0].step().powi(2));
        }
        let sol = solve(&s, &coeff, &sc, Data { boundary: &exact, source: Some(&source) })?;
        let err = (0..sol.field.len())
            .map(|k| (sol.field.values()[k] - exact(&sol.field.point(k))).abs())
            .fold(0.0, f64::max);
        hs.push(space[0].step());
        errs.push(err);
    }
    let orders = observed_orders(&hs, &errs);
    let min_order = orders.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ProbeReport::new("heat-benchmark", errs[errs.len() - 1], 1.0, levels.len())
        .with_constant(min_order)
        .with_verdict(Verdict::from_bool(min_order >= 1.8))
        .detail("h", &hs)
        .detail("linf_errors", &errs)
        .detail("orders", &orders)
        .detail("scheme", scheme))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kolmogorov_space(n: usize) -> Vec<Axis> {
        vec![Axis::new(-1.0, 1.0, n), Axis::new(-1.0, 1.0, n)]
    }

    #[test]
    fn constants_are_preserved() {
        let b = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let s = OperatorStructure::new(b, &[1, 1, 1], 2.0).unwrap();
        let space = vec![Axis::new(-1.0, 1.0, 9); 3];
        let coeff = make_rough_coefficients(&s, &space, RoughPattern::Checkerboard, 3.0, 3, LowerOrder::default(), 1).unwrap();
        let one = |_: &GroupPoint| 1.0;
        for scheme in [Scheme::ExplicitUpwindDiffusion, Scheme::ImplicitDiffusionUpwindDrift] {
            let mut cfg = SolverConfig::new(0.0, 0.2, 3, space.clone());
            cfg.scheme = scheme;
            let sol = solve(&s, &coeff, &cfg, Data { boundary: &one, source: None }).unwrap();
            let dev = sol.field.values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
            assert!(dev <= 1e-13, "{scheme:?}: {dev}");
        }
    }

    #[test]
    fn cfl_is_enforced() {
        let s = OperatorStructure::kolmogorov();
        let space = kolmogorov_space(17);
        let coeff = CoefficientField::identity(&s, &space);
        let mut cfg = SolverConfig::new(0.0, 0.1, 2, space);
        cfg.dt = Some(0.1);
        let zero = |_: &GroupPoint| 0.0;
        let err = solve(&s, &coeff, &cfg, Data { boundary: &zero, source: None }).unwrap_err();
        assert!(matches!(err, KfpError::CflViolation { .. }));
    }

    #[test]
    fn heat_manufactured_is_second_order() {
        for scheme in [Scheme::ExplicitUpwindDiffusion, Scheme::ImplicitDiffusionUpwindDrift] {
            let r = heat_benchmark(&[17, 33, 65], scheme).unwrap();
            assert!(r.passed(), "{}", r.to_json());
        }
    }

    #[test]
    fn kernel_benchmark_converges_at_first_order() {
        let cfg = KernelBenchmark { levels: vec![17, 33, 65], ..Default::default() };
        let r = kernel_benchmark(&OperatorStructure::kolmogorov(), &cfg).unwrap();
        assert!(r.passed(), "{}", r.to_json());
        let rel = r.details["relative_errors"].as_array().unwrap();
        assert!(rel[2].as_f64().unwrap() < 0.02);
    }

    #[test]
    fn boundary_slices_match_data() {
        let s = OperatorStructure::kolmogorov();
        let space = kolmogorov_space(11);
        let coeff = CoefficientField::identity(&s, &space);
        let g = |z: &GroupPoint| z.x[0] * z.x[1] + z.t;
        let sol = solve(&s, &coeff, &SolverConfig::new(0.0, 0.1, 4, space), Data { boundary: &g, source: None }).unwrap();
        let f = &sol.field;
        for k in 0..f.len() {
            let idx = f.multi(k);
            let on_face = idx[0] == 0 || idx[1..].iter().any(|&i| i == 0 || i == 10);
            if on_face {
                assert_eq!(f.values()[k], g(&f.point(k)));
            }
        }
    }

    #[test]
    fn rough_coefficients_are_deterministic_and_elliptic() {
        let s = OperatorStructure::new(DMatrix::from_row_slice(4, 4, &[
            0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ]), &[2, 2], 2.0).unwrap();
        let space = vec![Axis::new(-1.0, 1.0, 5); 4];
        let a = make_rough_coefficients(&s, &space, RoughPattern::RandomCellwise, 4.0, 2, LowerOrder { bprime: 1.0, c: 1.0, f: 1.0 }, 7).unwrap();
        let b = make_rough_coefficients(&s, &space, RoughPattern::RandomCellwise, 4.0, 2, LowerOrder { bprime: 1.0, c: 1.0, f: 1.0 }, 7).unwrap();
        assert_eq!(a.a, b.a);
        assert_eq!(a.c, b.c);
        a.check_ellipticity().unwrap();
        let norms = a.norms((s.q() + 2) as f64, (s.q() + 2) as f64, 1.0);
        assert!(norms.bprime > 0.0 && norms.c > 0.0 && norms.f > 0.0);
        let cb = make_rough_coefficients(&OperatorStructure::kolmogorov(), &kolmogorov_space(9), RoughPattern::Checkerboard, 4.0, 4, LowerOrder::default(), 0).unwrap();
        let values: std::collections::BTreeSet<u64> = (0..cb.len()).map(|k| cb.a_at(k)[(0, 0)].to_bits()).collect();
        assert_eq!(values.len(), 2);
        assert!(make_rough_coefficients(&s, &space, RoughPattern::Checkerboard, 1.0, 2, LowerOrder::default(), 0).is_err());
        let bad = CoefficientField::constant(&OperatorStructure::kolmogorov(), &kolmogorov_space(5), &DMatrix::from_element(1, 1, 5.0), 2.0);
        assert!(matches!(bad, Err(KfpError::Ellipticity { .. })));
    }

    #[test]
    fn comparison_principle_on_rough_data() {
        let s = OperatorStructure::kolmogorov();
        let space = kolmogorov_space(21);
        let coeff = make_rough_coefficients(&s, &space, RoughPattern::Checkerboard, 5.0, 5, LowerOrder { bprime: 2.0, c: 3.0, f: 1.0 }, 3).unwrap();
        let data = |z: &GroupPoint| (1.0 - z.x[0] * z.x[0]).max(0.0) * (1.0 + z.x[1]);
        let sol = solve(&s, &coeff, &SolverConfig::new(0.0, 0.3, 4, space), Data { boundary: &data, source: None }).unwrap();
        let min = sol.field.values().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-14, "{min}");
    }

    #[test]
    fn transport_follows_characteristics() {
        // ∂_t u = x₁ ∂₂ u is solved by u₀(x₁, x₂ + t x₁).
        let s = OperatorStructure::kolmogorov();
        let u0 = |x: f64, y: f64| (-(x * x) / 0.1 - (y * y) / 0.05).exp();
        let exact = |z: &GroupPoint| u0(z.x[0], z.x[1] + z.t * z.x[0]);
        let mut errs = Vec::new();
        let mut hs = Vec::new();
        for n in [41, 81, 161] {
            let space = kolmogorov_space(n);
            let coeff = CoefficientField::transport_only(&s, &space);
            let sol = solve(&s, &coeff, &SolverConfig::new(0.0, 0.5, 2, space.clone()), Data { boundary: &exact, source: None }).unwrap();
            let err = (0..sol.field.len()).map(|k| (sol.field.values()[k] - exact(&sol.field.point(k))).abs()).fold(0.0, f64::max);
            errs.push(err);
            hs.push(space[1].step());
        }
        let orders = observed_orders(&hs, &errs);
        assert!(orders.iter().all(|&p| p > 0.7 && p < 1.5), "{orders:?} {errs:?}");
    }

    #[test]
    fn weak_residual_vanishes_for_zero_test_and_shrinks() {
        let s = OperatorStructure::kolmogorov();
        let origin = GroupPoint::origin(2);
        let exact = |z: &GroupPoint| fundsol::gamma1(&s, z, &origin).value;
        let mut gaps = Vec::new();
        for n in [17, 33] {
            let space = vec![Axis::new(-1.0, 1.0, n), Axis::new(-0.3, 0.3, n)];
            let coeff = CoefficientField::identity(&s, &space);
            let sol = solve(&s, &coeff, &SolverConfig::new(0.1, 0.3, n, space), Data { boundary: &exact, source: None }).unwrap();
            let r = weak_residual(&s, &sol.field, &coeff, &default_test_family(sol.field.axes()), None).unwrap();
            gaps.push(r.lhs_sup);
            let far = TestBump { center: vec![5.0, 5.0], t_center: 0.2, radius: vec![0.1, 0.1], t_radius: 0.01 };
            assert!(matches!(weak_residual(&s, &sol.field, &coeff, &[far], None), Err(KfpError::SupportViolation)));
        }
        assert!(gaps[1] < gaps[0], "{gaps:?}");
    }
}
