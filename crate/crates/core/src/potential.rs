//! The potentials `Γ₁(f)(z) = ∫ Γ₁(z, ζ) f(ζ) dζ` and
//! `Γ₁(D_{m₀} f)(z) = -∫ D_ξ Γ₁(z, ζ) f(ζ) dζ` on grid fields.
//!
//! For a lag `s = t - τ` the spatial integral equals a Gaussian blur of the
//! source slice, `∫ Γ₁ f(·, τ) dξ = (ρ_s ⋆ f)(E(-s) x)` where `ρ_s` is the
//! density of `N(0, E(-s) 2C(s) E(-s)^T)`. The blur acts on the multilinear
//! interpolant of the slice, which keeps the weights exact when the kernel
//! is narrower than a cell. After the spatial integral the time integrand
//! is bounded, so plain trapezoid sums work in time, with Gauss–Legendre
//! on the interval touching the evaluation time.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;
use thiserror::Error;

use crate::fundsol::{self, FundsolError};
use crate::grid::{Axis, GridField};
use crate::hypogroup::{GroupPoint, OperatorStructure};
use crate::linalg;
use crate::report::{ProbeReport, Verdict};

/// Standard deviations kept on each side of a Gaussian.
const CUT: f64 = 6.0;
/// Gauss–Legendre nodes on the last time interval.
const LAST_INTERVAL_NODES: usize = 4;
/// Cap on the quadrature nodes of one smoothed kernel.
const MAX_STENCIL_NODES: f64 = 2e5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("exponent out of range: p = {p}, 1/q = {inv_q}")]
    ExponentOutOfRange { p: f64, inv_q: f64 },
    #[error("field has {got} spatial axes, structure needs {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error(transparent)]
    Kernel(#[from] FundsolError),
}

/// Target exponent `q` with `1/q = 1/p - order/(Q+2)`.
pub fn target_exponent(s: &OperatorStructure, p: f64, order: u32) -> Result<f64, PotentialError> {
    let inv_q = 1.0 / p - order as f64 / (s.q() + 2) as f64;
    if !(p > 1.0) || !p.is_finite() || !(inv_q > 0.0) {
        return Err(PotentialError::ExponentOutOfRange { p, inv_q });
    }
    Ok(1.0 / inv_q)
}

/// N-dimensional complex FFT by 1-D passes along each axis.
struct FftN {
    shape: Vec<usize>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl FftN {
    fn new(shape: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            shape: shape.to_vec(),
            fwd: shape.iter().map(|&n| planner.plan_fft_forward(n)).collect(),
            inv: shape.iter().map(|&n| planner.plan_fft_inverse(n)).collect(),
        }
    }

    fn len(&self) -> usize {
        self.shape.iter().product()
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let d = self.shape.len();
        let mut stride = 1;
        for a in (0..d).rev() {
            let n = self.shape[a];
            let plan = if inverse { &self.inv[a] } else { &self.fwd[a] };
            let mut line = vec![Complex64::default(); n];
            let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
            let block = stride * n;
            for outer in (0..data.len()).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (k, v) in line.iter_mut().enumerate() {
                        *v = data[base + k * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (k, v) in line.iter().enumerate() {
                        data[base + k * stride] = *v;
                    }
                }
            }
            stride *= n;
        }
        if inverse {
            let scale = 1.0 / self.len() as f64;
            data.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Smallest `n' ≥ n` whose prime factors are 2, 3 and 5.
fn fast_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Per-lag data: `E(-s)` and the kernel spectra.
struct Lag {
    e_inv: DMatrix<f64>,
    spectra: Vec<Vec<Complex64>>,
}

/// Shared geometry of one application.
struct Plan {
    n: usize,
    m0: usize,
    h: Vec<f64>,
    /// Target offset: FFT slot `j` along axis `i` holds grid index `j + a_i`.
    a: Vec<i64>,
    /// Admissible displacement range per axis.
    dmin: Vec<i64>,
    dmax: Vec<i64>,
    fft: FftN,
}

impl Plan {
    fn slot(&self, idx: &[i64]) -> usize {
        let mut k = 0;
        for i in 0..self.n {
            let p = self.fft.shape[i] as i64;
            k = k * self.fft.shape[i] + (idx[i] - self.a[i]).rem_euclid(p) as usize;
        }
        k
    }

    fn disp_slot(&self, d: &[i64]) -> usize {
        let mut k = 0;
        for i in 0..self.n {
            let p = self.fft.shape[i] as i64;
            k = k * self.fft.shape[i] + d[i].rem_euclid(p) as usize;
        }
        k
    }

    fn in_disp_range(&self, d: &[i64]) -> bool {
        d.iter().enumerate().all(|(i, &v)| v >= self.dmin[i] && v <= self.dmax[i])
    }
}

/// Kernel weights at integer displacements (grid units) for the blur with
/// covariance `sig` (grid units): the value kernel and, when `grad` is set,
/// the `m₀` derivative kernels. Returned as FFT spectra.
fn lag_spectra(plan: &Plan, sig: &DMatrix<f64>, grad: bool) -> Vec<Vec<Complex64>> {
    let n = plan.n;
    let ncomp = if grad { plan.m0 } else { 1 };
    let mut bufs = vec![vec![Complex64::default(); plan.fft.len()]; ncomp];
    let eig = sig.clone().symmetric_eigen();
    let lam_min = eig.eigenvalues.min();
    if lam_min >= 1.0 {
        // Resolved: nodal Gaussian weights.
        let fac = linalg::spd_factor(sig).expect("blur covariance is positive definite");
        let norm = (2.0 * std::f64::consts::PI).powf(-0.5 * n as f64) / fac.det.sqrt();
        let reach: Vec<i64> = (0..n)
            .map(|i| (CUT * sig[(i, i)].sqrt()).ceil() as i64 + 1)
            .collect();
        let lo: Vec<i64> = (0..n).map(|i| (-reach[i]).max(plan.dmin[i])).collect();
        let hi: Vec<i64> = (0..n).map(|i| reach[i].min(plan.dmax[i])).collect();
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return spectra_of(plan, bufs);
        }
        let mut d = lo.clone();
        let mut dv = DVector::zeros(n);
        loop {
            for i in 0..n {
                dv[i] = d[i] as f64;
            }
            let sd = &fac.inverse * &dv;
            let w = norm * (-0.5 * dv.dot(&sd)).exp();
            let slot = plan.disp_slot(&d);
            if grad {
                for (c, buf) in bufs.iter_mut().enumerate() {
                    buf[slot].re += -w * sd[c] / plan.h[c];
                }
            } else {
                bufs[0][slot].re += w;
            }
            if !advance(&mut d, &lo, &hi) {
                break;
            }
        }
    } else {
        let zero = vec![0.0; n];
        let mut d = vec![0i64; n];
        smoothed_stencil(sig, &zero, &plan.h, grad, |node, wv, wg| {
            for i in 0..n {
                d[i] = -node[i];
            }
            if !plan.in_disp_range(&d) {
                return;
            }
            let slot = plan.disp_slot(&d);
            if grad {
                for (c, buf) in bufs.iter_mut().enumerate() {
                    buf[slot].re += wg[c];
                }
            } else {
                bufs[0][slot].re += wv;
            }
        });
    }
    spectra_of(plan, bufs)
}

/// Weights of `q ↦ E[f_h(q - η)]` and its gradient at grid-unit position
/// `q0`, `η ~ N(0, sig)` in grid units and `f_h` the multilinear interpolant
/// of nodal values. Calls `visit(node, value_weight, gradient_weights)` with
/// physical-unit gradients; a node may be visited many times.
///
/// The expectation is a tensor trapezoid in the eigenbasis of `sig`. Along
/// eigendirections wider than a cell the derivative falls on the Gaussian,
/// along narrower ones on the interpolant.
fn smoothed_stencil(
    sig: &DMatrix<f64>,
    q0: &[f64],
    h: &[f64],
    grad: bool,
    mut visit: impl FnMut(&[i64], f64, &[f64]),
) {
    let n = q0.len();
    let eig = sig.clone().symmetric_eigen();
    let vecs = &eig.eigenvectors;
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let wide: Vec<bool> = lam.iter().map(|&l| l >= 1.0).collect();
    let mut steps: Vec<f64> = lam.iter().map(|&l| if l >= 1.0 { 0.5 / l.sqrt() } else { 1.0 }).collect();
    let mut counts: Vec<i64> = steps.iter().map(|d| (CUT / d).floor() as i64).collect();
    while counts.iter().map(|&c| (2 * c + 1) as f64).product::<f64>() > MAX_STENCIL_NODES {
        let before = steps.clone();
        for (d, &w) in steps.iter_mut().zip(&wide) {
            if w {
                *d = (*d * 1.25).min(1.0);
            }
        }
        if steps == before {
            break;
        }
        counts = steps.iter().map(|d| (CUT / d).floor() as i64).collect();
    }
    let lo: Vec<i64> = counts.iter().map(|c| -c).collect();
    let mut k = lo.clone();
    let mut nodes = Vec::new();
    let mut total = 0.0;
    loop {
        let v: Vec<f64> = k.iter().zip(&steps).map(|(&k, d)| k as f64 * d).collect();
        let w: f64 = v.iter().map(|x| (-0.5 * x * x).exp()).product();
        total += w;
        nodes.push((v, w));
        if !advance(&mut k, &lo, &counts) {
            break;
        }
    }
    let mut p = vec![0.0; n];
    let mut g = vec![0.0; n];
    // Gaussian-side factor per eigendirection for the current node.
    let mut stein = vec![0.0; n];
    for (v, w) in nodes {
        let w = w / total;
        for i in 0..n {
            let eta: f64 = (0..n).map(|j| vecs[(i, j)] * lam[j].sqrt() * v[j]).sum();
            p[i] = q0[i] - eta;
        }
        for j in 0..n {
            stein[j] = if wide[j] { -v[j] / lam[j].sqrt() } else { 0.0 };
        }
        hat_stencil(&p, |node, wv, wg| {
            if grad {
                for c in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        let dir = if wide[j] {
                            stein[j] * wv
                        } else {
                            (0..n).map(|i| vecs[(i, j)] * wg[i]).sum::<f64>()
                        };
                        acc += vecs[(c, j)] * dir;
                    }
                    g[c] = w * acc / h[c];
                }
            }
            visit(node, w * wv, &g);
        });
    }
}

/// Multilinear interpolation stencil at grid-unit position `p`: calls
/// `visit(node, value_weight, gradient_weights)` for each contributing node,
/// gradients in grid units. On a cell face the one-sided slopes are averaged.
fn hat_stencil(p: &[f64], mut visit: impl FnMut(&[i64], f64, &[f64])) {
    const TIE: f64 = 1e-12;
    let n = p.len();
    let mut base = vec![0i64; n];
    let mut frac = vec![0.0; n];
    let mut ties = Vec::new();
    for i in 0..n {
        let r = p[i].round();
        if (p[i] - r).abs() <= TIE * (1.0 + r.abs()) {
            ties.push(i);
            base[i] = r as i64;
            frac[i] = 0.0;
        } else {
            let f = p[i].floor();
            base[i] = f as i64;
            frac[i] = p[i] - f;
        }
    }
    let share = 0.5f64.powi(ties.len() as i32);
    let mut node = vec![0i64; n];
    let mut g = vec![0.0; n];
    let (mut b, mut fr) = (base.clone(), frac.clone());
    for pick in 0..(1usize << ties.len()) {
        for (bit, &i) in ties.iter().enumerate() {
            // Either the cell above the face or the one below it.
            if pick & (1 << bit) != 0 {
                b[i] = base[i] - 1;
                fr[i] = 1.0;
            } else {
                b[i] = base[i];
                fr[i] = 0.0;
            }
        }
        for corner in 0..(1usize << n) {
            let mut wv = share;
            for i in 0..n {
                let up = corner & (1 << i) != 0;
                node[i] = b[i] + up as i64;
                wv *= if up { fr[i] } else { 1.0 - fr[i] };
            }
            for c in 0..n {
                let mut w = if corner & (1 << c) != 0 { share } else { -share };
                for i in 0..n {
                    if i != c {
                        w *= if corner & (1 << i) != 0 { fr[i] } else { 1.0 - fr[i] };
                    }
                }
                g[c] = w;
            }
            if wv != 0.0 || g.iter().any(|v| *v != 0.0) {
                visit(&node, wv, &g);
            }
        }
    }
}

fn spectra_of(plan: &Plan, mut bufs: Vec<Vec<Complex64>>) -> Vec<Vec<Complex64>> {
    for b in bufs.iter_mut() {
        plan.fft.run(b, false);
    }
    bufs
}

/// Odometer increment over the box `[lo, hi]`; false after the last index.
fn advance(idx: &mut [i64], lo: &[i64], hi: &[i64]) -> bool {
    for i in (0..idx.len()).rev() {
        if idx[i] < hi[i] {
            idx[i] += 1;
            return true;
        }
        idx[i] = lo[i];
    }
    false
}

/// Blur covariance `E(-s) 2C(s) E(-s)^T` in grid units.
fn blur_covariance(s: &OperatorStructure, lag: f64, h: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>), FundsolError> {
    let cov = fundsol::covariance(s, lag, false)?;
    let e_inv = s.exp_drift(-lag);
    let phys = &e_inv * (cov.c * 2.0) * e_inv.transpose();
    let hinv = DMatrix::from_diagonal(&DVector::from_iterator(h.len(), h.iter().map(|v| 1.0 / v)));
    let g = &hinv * phys * &hinv;
    Ok(((&g + g.transpose()) * 0.5, e_inv))
}

fn check_dims(s: &OperatorStructure, f: &GridField) -> Result<(), PotentialError> {
    if f.space_dim() != s.dim() {
        return Err(PotentialError::DimensionMismatch { got: f.space_dim(), want: s.dim() });
    }
    Ok(())
}

/// Evaluates the potential on the nodes of `f`'s grid. Returns one field for
/// the value potential, or `m₀` component fields for the gradient potential.
fn run(s: &OperatorStructure, f: &GridField, grad: bool) -> Result<Vec<GridField>, PotentialError> {
    check_dims(s, f)?;
    let n = s.dim();
    let axes = f.axes();
    let t_axis = axes[0];
    let nt = t_axis.n;
    let dt = t_axis.step();
    let sp: Vec<Axis> = axes[1..].to_vec();
    let h: Vec<f64> = sp.iter().map(|a| a.step()).collect();
    let lo: Vec<f64> = sp.iter().map(|a| a.lo).collect();
    let counts: Vec<usize> = sp.iter().map(|a| a.n).collect();
    let m_sp: usize = counts.iter().product();
    let ncomp = if grad { s.m0() } else { 1 };

    let (gl_x, gl_w) = linalg::gauss_legendre(LAST_INTERVAL_NODES);
    let theta: Vec<f64> = gl_x.iter().map(|x| 0.5 * (x + 1.0)).collect();
    let mut lag_values: Vec<f64> = (1..nt).map(|k| k as f64 * dt).collect();
    lag_values.extend(theta.iter().map(|th| (1.0 - th) * dt));

    let mut covs = Vec::with_capacity(lag_values.len());
    for &lag in &lag_values {
        covs.push(blur_covariance(s, lag, &h)?);
    }

    // Target range: images E(-s) x of the box corners over all lags.
    let mut qmin = vec![0.0f64; n];
    let mut qmax: Vec<f64> = counts.iter().map(|&c| (c - 1) as f64).collect();
    let mut reach = vec![0i64; n];
    for (sig, e_inv) in &covs {
        for corner in 0..(1usize << n) {
            let x = DVector::from_fn(n, |i, _| if corner & (1 << i) != 0 { sp[i].hi } else { sp[i].lo });
            let xi = e_inv * x;
            for i in 0..n {
                let q = (xi[i] - lo[i]) / h[i];
                qmin[i] = qmin[i].min(q);
                qmax[i] = qmax[i].max(q);
            }
        }
        for i in 0..n {
            reach[i] = reach[i].max((CUT * sig[(i, i)].sqrt()).ceil() as i64 + 2);
        }
    }
    let a: Vec<i64> = qmin.iter().map(|q| q.floor() as i64 - 1).collect();
    let b: Vec<i64> = qmax.iter().map(|q| q.ceil() as i64 + 1).collect();
    let dmin: Vec<i64> = (0..n).map(|i| (a[i] - counts[i] as i64 + 1).max(-reach[i])).collect();
    let dmax: Vec<i64> = (0..n).map(|i| b[i].min(reach[i])).collect();
    let shape: Vec<usize> = (0..n)
        .map(|i| {
            // Every source index `i - d` a target can reach, together with
            // the source support, must fit in one period.
            let hi = (b[i] - dmin[i]).max(counts[i] as i64 - 1);
            let lo = (a[i] - dmax[i]).min(0);
            fast_size((hi - lo + 1) as usize)
        })
        .collect();
    let plan = Plan {
        n,
        m0: s.m0(),
        h: h.clone(),
        a,
        dmin,
        dmax,
        fft: FftN::new(&shape),
    };

    // Source slice spectra.
    let slice_spectra: Vec<Vec<Complex64>> = (0..nt)
        .into_par_iter()
        .map(|m| {
            let vals = f.time_slice(m);
            let mut buf = vec![Complex64::default(); plan.fft.len()];
            let mut idx = vec![0i64; n];
            for v in vals {
                buf[plan.slot(&idx)].re = v;
                let hi: Vec<i64> = counts.iter().map(|&c| c as i64 - 1).collect();
                advance(&mut idx, &vec![0; n], &hi);
            }
            plan.fft.run(&mut buf, false);
            buf
        })
        .collect();

    let lags: Vec<Lag> = lag_values
        .par_iter()
        .zip(covs.par_iter())
        .map(|(_, (sig, e_inv))| Lag { e_inv: e_inv.clone(), spectra: lag_spectra(&plan, sig, grad) })
        .collect();

    // Sample positions E(-s) x for every lag and spatial node.
    let sample_positions = |lag: &Lag| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(m_sp);
        let mut idx = vec![0i64; n];
        let hi: Vec<i64> = counts.iter().map(|&c| c as i64 - 1).collect();
        loop {
            let x = DVector::from_fn(n, |i, _| sp[i].node(idx[i] as usize));
            let xi = &lag.e_inv * x;
            out.push((0..n).map(|i| (xi[i] - lo[i]) / h[i]).collect());
            if !advance(&mut idx, &vec![0; n], &hi) {
                break;
            }
        }
        out
    };
    let positions: Vec<Vec<Vec<f64>>> = lags.par_iter().map(sample_positions).collect();

    let interp = |buf: &[Complex64], q: &[f64]| -> f64 {
        let mut base = vec![0i64; n];
        let mut frac = vec![0.0; n];
        for i in 0..n {
            let fl = q[i].floor();
            base[i] = fl as i64;
            frac[i] = q[i] - fl;
        }
        let mut acc = 0.0;
        let mut idx = vec![0i64; n];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            for i in 0..n {
                let up = corner & (1 << i) != 0;
                idx[i] = base[i] + up as i64;
                w *= if up { frac[i] } else { 1.0 - frac[i] };
            }
            if w != 0.0 {
                acc += w * buf[plan.slot(&idx)].re;
            }
        }
        acc
    };

    let slices: Vec<Vec<Vec<f64>>> = (0..nt)
        .into_par_iter()
        .map(|tn| {
            let mut acc = vec![vec![0.0; m_sp]; ncomp];
            if tn == 0 {
                return acc;
            }
            let mut terms: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
            // Trapezoid over [τ_0, τ_{n-1}] at lags (n - m) dt.
            if tn >= 2 {
                for m in 0..tn {
                    let w = if m == 0 || m == tn - 1 { 0.5 * dt } else { dt };
                    terms.push((tn - m - 1, vec![(m, w)]));
                }
            }
            // Gauss–Legendre on [τ_{n-1}, τ_n] with f linear in time.
            for (q, (&th, &gw)) in theta.iter().zip(&gl_w).enumerate() {
                let w = 0.5 * gw * dt;
                terms.push((nt - 1 + q, vec![(tn - 1, w * (1.0 - th)), (tn, w * th)]));
            }
            let mut buf = vec![Complex64::default(); plan.fft.len()];
            for (li, parts) in terms {
                let lag = &lags[li];
                for (c, kspec) in lag.spectra.iter().enumerate() {
                    for (k, v) in buf.iter_mut().enumerate() {
                        let mut src = Complex64::default();
                        for &(m, w) in &parts {
                            src += slice_spectra[m][k] * w;
                        }
                        *v = src * kspec[k];
                    }
                    plan.fft.run(&mut buf, true);
                    for (node, q) in positions[li].iter().enumerate() {
                        acc[c][node] += interp(&buf, q);
                    }
                }
            }
            acc
        })
        .collect();

    let mut out = Vec::with_capacity(ncomp);
    for c in 0..ncomp {
        let mut vals = Vec::with_capacity(f.len());
        for sl in &slices {
            vals.extend_from_slice(&sl[c]);
        }
        out.push(GridField::new(axes.to_vec(), vals).expect("same shape as input"));
    }
    Ok(out)
}

/// `Γ₁(f)` on the nodes of `f`'s grid; `f` vanishes before the first slice.
pub fn apply(s: &OperatorStructure, f: &GridField) -> Result<GridField, PotentialError> {
    Ok(run(s, f, false)?.remove(0))
}

/// Components of `Γ₁(D_{m₀} f)` on the nodes of `f`'s grid.
pub fn apply_grad(s: &OperatorStructure, f: &GridField) -> Result<Vec<GridField>, PotentialError> {
    run(s, f, true)
}

/// Pointwise Euclidean magnitude of a vector field given by components.
pub fn magnitude(components: &[GridField]) -> GridField {
    let mut out = components[0].map(|v| v * v);
    for c in &components[1..] {
        for (o, v) in out.values_mut().iter_mut().zip(c.values()) {
            *o += v * v;
        }
    }
    out.map(f64::sqrt)
}

/// `Γ₁(f)` (or the gradient potential when `grad`) at an arbitrary point, by
/// direct summation over the source grid.
pub fn potential_at(
    s: &OperatorStructure,
    f: &GridField,
    z: &GroupPoint,
    grad: bool,
) -> Result<DVector<f64>, PotentialError> {
    check_dims(s, f)?;
    let n = s.dim();
    let axes = f.axes();
    let t_axis = axes[0];
    let sp = &axes[1..];
    let h: Vec<f64> = sp.iter().map(|a| a.step()).collect();
    let ncomp = if grad { s.m0() } else { 1 };
    let mut out = DVector::zeros(ncomp);
    if z.t <= t_axis.lo {
        return Ok(out);
    }
    let slice_field = |m: usize| {
        GridField::new(sp.to_vec(), f.time_slice(m)).expect("slice shape")
    };
    let blur_at = |lag: f64, vals: &GridField| -> Result<DVector<f64>, PotentialError> {
        let (sig, e_inv) = blur_covariance(s, lag, &h)?;
        let xi0 = &e_inv * &z.x;
        let q0: Vec<f64> = (0..n).map(|i| (xi0[i] - sp[i].lo) / h[i]).collect();
        Ok(blur_point(&sig, &q0, vals, &h, ncomp, grad))
    };
    let dt = t_axis.step();
    let (gl_x, gl_w) = linalg::gauss_legendre(LAST_INTERVAL_NODES);
    // Trapezoid over the nodes strictly below z.t, then Gauss–Legendre on
    // the partial interval up to z.t.
    let below = (0..t_axis.n).filter(|&m| t_axis.node(m) < z.t - 1e-12 * dt).count();
    let last = below - 1;
    for m in 0..=last {
        let w = if last == 0 { 0.0 } else if m == 0 || m == last { 0.5 * dt } else { dt };
        if w > 0.0 {
            out += blur_at(z.t - t_axis.node(m), &slice_field(m))? * w;
        }
    }
    if last + 1 < t_axis.n {
        let t0 = t_axis.node(last);
        let len = z.t - t0;
        let (f0, f1) = (slice_field(last), slice_field(last + 1));
        for (x, w) in gl_x.iter().zip(&gl_w) {
            let th = 0.5 * (x + 1.0) * len / dt;
            let mix = GridField::new(
                sp.to_vec(),
                f0.values().iter().zip(f1.values()).map(|(a, b)| (1.0 - th) * a + th * b).collect(),
            )
            .expect("slice shape");
            out += blur_at(z.t - (t0 + th * dt), &mix)? * (0.5 * w * len);
        }
    }
    Ok(out)
}

/// `(ρ ⋆ f_h)` (or its derivatives) at grid-unit position `q0`.
fn blur_point(sig: &DMatrix<f64>, q0: &[f64], vals: &GridField, h: &[f64], ncomp: usize, grad: bool) -> DVector<f64> {
    let n = q0.len();
    let mut out = DVector::zeros(ncomp);
    let eig = sig.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= 1.0 {
        let fac = linalg::spd_factor(sig).expect("positive definite");
        let norm = (2.0 * std::f64::consts::PI).powf(-0.5 * n as f64) / fac.det.sqrt();
        for k in 0..vals.len() {
            let v = vals.values()[k];
            if v == 0.0 {
                continue;
            }
            let idx = vals.multi(k);
            let d = DVector::from_fn(n, |i, _| q0[i] - idx[i] as f64);
            let sd = &fac.inverse * &d;
            let w = norm * (-0.5 * d.dot(&sd)).exp() * v;
            if grad {
                for c in 0..ncomp {
                    out[c] += -w * sd[c] / h[c];
                }
            } else {
                out[0] += w;
            }
        }
        return out;
    }
    let shape: Vec<i64> = vals.axes().iter().map(|a| a.n as i64).collect();
    let mut idx = vec![0usize; n];
    smoothed_stencil(sig, q0, h, grad, |node, wv, wg| {
        for i in 0..n {
            if node[i] < 0 || node[i] >= shape[i] {
                return;
            }
            idx[i] = node[i] as usize;
        }
        let v = vals.values()[vals.flat(&idx)];
        if grad {
            for c in 0..ncomp {
                out[c] += wg[c] * v;
            }
        } else {
            out[0] += wv * v;
        }
    });
    out
}

/// A deterministic test field defined independently of any grid.
#[derive(Debug, Clone, Serialize)]
pub enum TestField {
    /// `amp · exp(-Σ ((x_i - c_i)/w_i)² - ((t - c_t)/w_t)²)`.
    Bump { center: Vec<f64>, t_center: f64, widths: Vec<f64>, t_width: f64, amp: f64 },
    /// Indicator of a box, sampled as the volume fraction of each dual cell.
    Indicator { lo: Vec<f64>, hi: Vec<f64>, t_lo: f64, t_hi: f64 },
    /// Sum of nonnegative bumps with random amplitudes.
    Noise { bumps: Vec<TestField> },
}

fn dual_fraction(axis: &Axis, i: usize, lo: f64, hi: f64) -> f64 {
    let h = axis.step();
    let x = axis.node(i);
    let a = if i == 0 { x } else { x - 0.5 * h };
    let b = if i + 1 == axis.n { x } else { x + 0.5 * h };
    let overlap = (b.min(hi) - a.max(lo)).max(0.0);
    overlap / (b - a)
}

impl TestField {
    pub fn value(&self, z: &GroupPoint) -> f64 {
        match self {
            TestField::Bump { center, t_center, widths, t_width, amp } => {
                let e: f64 = z
                    .x
                    .iter()
                    .zip(center)
                    .zip(widths)
                    .map(|((x, c), w)| ((x - c) / w).powi(2))
                    .sum::<f64>()
                    + ((z.t - t_center) / t_width).powi(2);
                amp * (-e).exp()
            }
            TestField::Indicator { lo, hi, t_lo, t_hi } => {
                let inside = z.t >= *t_lo
                    && z.t <= *t_hi
                    && z.x.iter().zip(lo.iter().zip(hi)).all(|(x, (l, h))| x >= l && x <= h);
                inside as u8 as f64
            }
            TestField::Noise { bumps } => bumps.iter().map(|b| b.value(z)).sum(),
        }
    }

    pub fn sample(&self, axes: &[Axis]) -> GridField {
        match self {
            TestField::Indicator { lo, hi, t_lo, t_hi } => {
                let mut f = GridField::zeros(axes.to_vec());
                for k in 0..f.len() {
                    let idx = f.multi(k);
                    let mut v = dual_fraction(&axes[0], idx[0], *t_lo, *t_hi);
                    for i in 1..axes.len() {
                        v *= dual_fraction(&axes[i], idx[i], lo[i - 1], hi[i - 1]);
                    }
                    f.values_mut()[k] = v;
                }
                f
            }
            _ => GridField::from_fn(axes.to_vec(), |z| self.value(z)),
        }
    }

    /// `D_{m₀}` of a bump or noise field, analytically; `None` for indicators.
    pub fn gradient(&self, z: &GroupPoint, i: usize) -> Option<f64> {
        match self {
            TestField::Bump { center, widths, .. } => {
                Some(self.value(z) * -2.0 * (z.x[i] - center[i]) / widths[i].powi(2))
            }
            TestField::Noise { bumps } => bumps.iter().map(|b| b.gradient(z, i)).sum(),
            TestField::Indicator { .. } => None,
        }
    }
}

/// Space-time box `[0, T] × Π [-L^{α_i}, L^{α_i}]` with the given node counts.
pub fn probe_axes(s: &OperatorStructure, horizon: f64, radius: f64, nt: usize, nx: usize) -> Vec<Axis> {
    let mut axes = vec![Axis::new(0.0, horizon, nt)];
    for &a in s.alpha() {
        let half = radius.powi(a as i32);
        axes.push(Axis::new(-half, half, nx));
    }
    axes
}

/// Gaussian bump whose widths are random fractions of the box half-widths
/// and which decays below `exp(-20)` on the box boundary.
fn random_bump(axes: &[Axis], rng: &mut ChaCha8Rng, frac: (f64, f64), amp: f64) -> TestField {
    let margin = 4.5;
    let span = axes[0].hi - axes[0].lo;
    let t_width = rng.random_range(0.07..0.1) * span;
    let t_lo = axes[0].lo + margin * t_width;
    let t_hi = axes[0].hi - margin * t_width;
    let mut widths = Vec::with_capacity(axes.len() - 1);
    let mut center = Vec::with_capacity(axes.len() - 1);
    for a in &axes[1..] {
        let half = 0.5 * (a.hi - a.lo);
        let w = rng.random_range(frac.0..frac.1) * half;
        let room = (half - margin * w).max(0.0);
        widths.push(w);
        center.push(0.5 * (a.lo + a.hi) + if room > 0.0 { rng.random_range(-room..room) } else { 0.0 });
    }
    TestField::Bump { center, t_center: rng.random_range(t_lo..t_hi), widths, t_width, amp }
}

/// Seeded corpus: three bumps, three box indicators, two smoothed-noise fields.
pub fn test_corpus(axes: &[Axis], seed: u64) -> Vec<(String, TestField)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(8);
    for k in 0..3 {
        out.push((format!("bump-{k}"), random_bump(axes, &mut rng, (0.12, 0.2), 1.0)));
    }
    for k in 0..3 {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for a in &axes[1..] {
            let half_box = 0.5 * (a.hi - a.lo);
            let half = rng.random_range(0.15..0.3) * half_box;
            let room = 0.5 * half_box - half;
            let c = 0.5 * (a.lo + a.hi) + if room > 0.0 { rng.random_range(-room..room) } else { 0.0 };
            lo.push(c - half);
            hi.push(c + half);
        }
        let span = axes[0].hi - axes[0].lo;
        let dur = rng.random_range(0.15..0.3) * span;
        let t_lo = axes[0].lo + rng.random_range(0.05..0.5) * span;
        out.push((format!("indicator-{k}"), TestField::Indicator { lo, hi, t_lo, t_hi: t_lo + dur }));
    }
    for k in 0..2 {
        let bumps = (0..6)
            .map(|_| {
                let amp = rng.random_range(0.2..1.0);
                random_bump(axes, &mut rng, (0.08, 0.14), amp)
            })
            .collect();
        out.push((format!("noise-{k}"), TestField::Noise { bumps }));
    }
    out
}

/// Settings of the `L^p → L^q` probe.
#[derive(Debug, Clone, Serialize)]
pub struct LpProbeConfig {
    pub p: f64,
    pub horizon: f64,
    pub radius: f64,
    pub nt: usize,
    pub nx: usize,
    pub seed: u64,
    /// Probe the gradient potential instead of the value potential.
    pub gradient: bool,
}

impl Default for LpProbeConfig {
    fn default() -> Self {
        Self { p: 2.0, horizon: 0.5, radius: 1.5, nt: 25, nx: 25, seed: 42, gradient: false }
    }
}

/// Ratios `‖Γ₁(f)‖_q / ‖f‖_p` over the seeded corpus.
pub fn verify_lp_lq(s: &OperatorStructure, cfg: &LpProbeConfig) -> Result<ProbeReport, PotentialError> {
    let order = if cfg.gradient { 1 } else { 2 };
    let q = target_exponent(s, cfg.p, order)?;
    let axes = probe_axes(s, cfg.horizon, cfg.radius, cfg.nt, cfg.nx);
    let corpus = test_corpus(&axes, cfg.seed);
    let mut ratios = Vec::with_capacity(corpus.len());
    let mut names = Vec::with_capacity(corpus.len());
    for (name, field) in &corpus {
        let f = field.sample(&axes);
        let out = if cfg.gradient { magnitude(&apply_grad(s, &f)?) } else { apply(s, &f)? };
        ratios.push(out.lp_norm(q) / f.lp_norm(cfg.p));
        names.push(name.clone());
    }
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = max / min;
    Ok(ProbeReport::new(if cfg.gradient { "potential-gradient-lp-lq" } else { "potential-lp-lq" }, max, 1.0, corpus.len())
        .with_constant(max)
        .with_verdict(Verdict::from_bool(max.is_finite() && spread.is_finite()))
        .detail("p", cfg.p)
        .detail("q", q)
        .detail("spread", spread)
        .detail("fields", &names)
        .detail("ratios", &ratios)
        .detail("config", cfg))
}
