//! The convex logarithmic cutoff `G` with `G'' ≥ G'²`.
//!
//! Start from the step `h₀ = -1` on `(-∞, 1]`, `0` after, mollify it into a
//! smooth `h`, set `f(t) = ∫₀ᵗ h`, `g = -ln(-f)` and `G(t) = g(2t)`. Then
//! `g' = -h/f` and `g'' = g'² - h'/f`, and `h' ≥ 0, f < 0` give `g'' ≥ g'²`.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::report::{ProbeReport, Verdict};

/// Tabulation spacing of the mollified step.
pub const TABLE_STEP: f64 = 1e-4;
/// Slack on `G'' ≥ G'²`.
pub const CONVEXITY_SLACK: f64 = 1e-8;
/// Slack on `-G' ≤ 1/t`.
pub const SLOPE_SLACK: f64 = 1e-10;
/// Tolerance on `G(t)/(-ln t) → 1` at the smallest grid point.
pub const LOG_RATIO_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GfuncError {
    #[error("mollifier width {0} outside (0, 1/4]")]
    WidthOutOfRange(f64),
    #[error("property ({0}) violated at t = {1}")]
    PropertyViolated(usize, f64),
    #[error("sample grid must lie in (0, 4] with at least two points")]
    BadGrid,
    #[error("csv: {0}")]
    Io(String),
}

/// Unnormalized bump `exp(-1/(1 - x²))` on `(-1, 1)`.
fn bump(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - x * x)).exp()
    }
}

/// Cubic Hermite interpolation on `[0, 1]`.
fn hermite(s: f64, y0: f64, y1: f64, d0: f64, d1: f64, step: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0
        + (s3 - 2.0 * s2 + s) * step * d0
        + (-2.0 * s3 + 3.0 * s2) * y1
        + (s3 - s2) * step * d1
}

#[derive(Debug, Clone)]
pub struct GFunction {
    width: f64,
    /// Left end `1 - w` of the transition of `h`.
    start: f64,
    /// Mass of the raw bump, so that `φ(t) = bump((t-1)/w) / mass`.
    mass: f64,
    /// `Ψ(t) = ∫_{1-w}^t φ` at the table nodes.
    psi: Vec<f64>,
    /// `∫_{1-w}^t (1 - Ψ)` at the table nodes.
    tail: Vec<f64>,
    /// Renormalization keeping `f = -1` beyond the transition.
    kappa: f64,
    /// Optional interval on which `G''` is forced to zero.
    flattened: Option<(f64, f64)>,
}

/// Values of `G`, `G'`, `G''` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GValue {
    pub t: f64,
    pub g: f64,
    pub d1: f64,
    pub d2: f64,
    /// `G'' - G'²`, evaluated without cancellation.
    pub margin: f64,
}

impl GFunction {
    pub fn new(width: f64) -> Result<Self, GfuncError> {
        if !(width > 0.0 && width <= 0.25) {
            return Err(GfuncError::WidthOutOfRange(width));
        }
        let start = 1.0 - width;
        let n = (2.0 * width / TABLE_STEP).round().max(2.0) as usize;
        let step = 2.0 * width / n as f64;
        let raw = |t: f64| bump((t - 1.0) / width);
        // Cumulative bump integral by Simpson on each cell.
        let mut cum = vec![0.0; n + 1];
        for k in 0..n {
            let a = start + k as f64 * step;
            cum[k + 1] = cum[k] + step / 6.0 * (raw(a) + 4.0 * raw(a + 0.5 * step) + raw(a + step));
        }
        let mass = cum[n];
        let psi: Vec<f64> = cum.iter().map(|c| c / mass).collect();
        let mut g = Self { width, start, mass, psi, tail: vec![0.0; n + 1], kappa: 1.0, flattened: None };
        for k in 0..n {
            let a = start + k as f64 * step;
            let mid = 1.0 - g.psi_at(a + 0.5 * step);
            g.tail[k + 1] = g.tail[k] + step / 6.0 * ((1.0 - g.psi[k]) + 4.0 * mid + (1.0 - g.psi[k + 1]));
        }
        // ∫₀² h = -(1 - w) - κ·tail(1 + w) must equal -1.
        g.kappa = width / g.tail[n];
        Ok(g)
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// Renormalization factor applied to the mollified part of `h`.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    fn step(&self) -> f64 {
        2.0 * self.width / (self.psi.len() - 1) as f64
    }

    fn density(&self, t: f64) -> f64 {
        bump((t - 1.0) / self.width) / self.mass
    }

    fn cell(&self, t: f64) -> (usize, f64) {
        let step = self.step();
        let u = ((t - self.start) / step).clamp(0.0, (self.psi.len() - 1) as f64);
        let k = (u.floor() as usize).min(self.psi.len() - 2);
        (k, u - k as f64)
    }

    fn psi_at(&self, t: f64) -> f64 {
        let (k, s) = self.cell(t);
        let step = self.step();
        let a = self.start + k as f64 * step;
        hermite(s, self.psi[k], self.psi[k + 1], self.density(a), self.density(a + step), step)
    }

    fn tail_at(&self, t: f64) -> f64 {
        let (k, s) = self.cell(t);
        let (d0, d1) = (1.0 - self.psi[k], 1.0 - self.psi[k + 1]);
        hermite(s, self.tail[k], self.tail[k + 1], d0, d1, self.step())
    }

    /// `(f, h, h')` at `s`.
    pub fn f_h(&self, s: f64) -> (f64, f64, f64) {
        if s <= self.start {
            (-s, -1.0, 0.0)
        } else if s >= 1.0 + self.width {
            (-1.0, 0.0, 0.0)
        } else {
            let f = -self.start - self.kappa * self.tail_at(s);
            let h = -self.kappa * (1.0 - self.psi_at(s));
            let dh = self.kappa * self.density(s);
            (f, h, dh)
        }
    }

    /// The smooth step `h` sampled on the table nodes, as `(t, h(t))`.
    pub fn h_table(&self) -> Vec<(f64, f64)> {
        let step = self.step();
        self.psi
            .iter()
            .enumerate()
            .map(|(k, p)| (self.start + k as f64 * step, -self.kappa * (1.0 - p)))
            .collect()
    }

    pub fn eval(&self, t: f64) -> GValue {
        let s = 2.0 * t;
        let (g, d1, mut d2, mut margin) = if s <= self.start {
            (-(s.ln()), -1.0 / t, 1.0 / (t * t), 0.0)
        } else if s >= 1.0 + self.width {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            let (f, h, dh) = self.f_h(s);
            let g1 = -h / f;
            let excess = -dh / f;
            // `+ 0.0` turns -0.0 at f = -1 into 0.0.
            (-(-f).ln() + 0.0, 2.0 * g1, 4.0 * (g1 * g1 + excess), 4.0 * excess)
        };
        if let Some((a, b)) = self.flattened {
            if t >= a && t <= b {
                d2 = 0.0;
                margin = -d1 * d1;
            }
        }
        GValue { t, g, d1, d2, margin }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval(t).g
    }

    pub fn d1(&self, t: f64) -> f64 {
        self.eval(t).d1
    }

    pub fn d2(&self, t: f64) -> f64 {
        self.eval(t).d2
    }

    /// Copy whose `G''` reads zero on `[a, b]`; a negative control.
    pub fn with_flat_curvature(&self, a: f64, b: f64) -> Self {
        Self { flattened: Some((a, b)), ..self.clone() }
    }

    /// Writes `t, G, G', G''` on the grid.
    pub fn write_table(&self, path: &Path, grid: &SampleGrid) -> Result<(), GfuncError> {
        let io = |e: csv::Error| GfuncError::Io(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["t", "G", "dG", "d2G"]).map_err(io)?;
        for t in grid.points()? {
            let v = self.eval(t);
            w.write_record([v.t, v.g, v.d1, v.d2].map(|x| format!("{x:?}"))).map_err(io)?;
        }
        w.flush().map_err(|e| GfuncError::Io(e.to_string()))
    }
}

impl Default for GFunction {
    fn default() -> Self {
        Self::new(0.25).expect("default width is admissible")
    }
}

/// Sample points in `(0, 4]`, logarithmic or uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub log: bool,
}

impl Default for SampleGrid {
    fn default() -> Self {
        Self { lo: 1e-6, hi: 4.0, n: 4001, log: true }
    }
}

impl SampleGrid {
    pub fn points(&self) -> Result<Vec<f64>, GfuncError> {
        if !(self.lo > 0.0 && self.hi <= 4.0 && self.lo < self.hi && self.n >= 2) {
            return Err(GfuncError::BadGrid);
        }
        let n = self.n - 1;
        Ok((0..=n)
            .map(|k| {
                let u = k as f64 / n as f64;
                if k == 0 {
                    self.lo
                } else if k == n {
                    self.hi
                } else if self.log {
                    (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp()
                } else {
                    self.lo + u * (self.hi - self.lo)
                }
            })
            .collect())
    }
}

/// Checks the four properties on the grid and reports each one; the
/// verdict is a pass only when all four hold.
pub fn probe_g_properties(g: &GFunction, grid: &SampleGrid) -> Result<ProbeReport, GfuncError> {
    let pts = grid.points()?;
    let mut first: [Option<f64>; 4] = [None; 4];
    let mut worst_convexity = f64::INFINITY;
    let mut worst_slope = f64::INFINITY;
    let mut sup_tail = 0.0f64;
    for &t in &pts {
        let v = g.eval(t);
        worst_convexity = worst_convexity.min(v.margin);
        if v.margin < -CONVEXITY_SLACK && first[0].is_none() {
            first[0] = Some(t);
        }
        if t >= 1.0 {
            sup_tail = sup_tail.max(v.g.abs());
            if v.g != 0.0 && first[1].is_none() {
                first[1] = Some(t);
            }
        }
        if t <= 0.25 {
            let slack = 1.0 / t + SLOPE_SLACK + v.d1;
            worst_slope = worst_slope.min(slack.min(-v.d1));
            if (v.d1 > 0.0 || slack < 0.0) && first[3].is_none() {
                first[3] = Some(t);
            }
        }
    }
    let t0 = pts[0];
    let ratio = g.value(t0) / -t0.ln();
    if (ratio - 1.0).abs() > LOG_RATIO_TOL {
        first[2] = Some(t0);
    }
    let ok = first.iter().all(Option::is_none);
    let mut report = ProbeReport::new("g-function", worst_convexity.min(0.0).abs(), CONVEXITY_SLACK, pts.len())
        .with_constant(ratio)
        .with_verdict(Verdict::from_bool(ok))
        .detail("width", g.width())
        .detail("kappa", g.kappa())
        .detail("min_convexity_margin", worst_convexity)
        .detail("min_slope_margin", worst_slope)
        .detail("sup_abs_beyond_one", sup_tail)
        .detail("log_ratio_at_smallest_t", ratio)
        .detail("smallest_t", t0)
        .detail("grid", grid);
    for (i, w) in first.iter().enumerate() {
        report.set(&format!("property_{}_holds", i + 1), w.is_none());
        if let Some(t) = w {
            report.set(&format!("property_{}_witness", i + 1), *t);
        }
    }
    Ok(report)
}

/// As [`probe_g_properties`], failing with the first violated property.
pub fn verify_g_properties(g: &GFunction, grid: &SampleGrid) -> Result<ProbeReport, GfuncError> {
    let report = probe_g_properties(g, grid)?;
    for i in 1..=4 {
        if let Some(t) = report.get_f64(&format!("property_{i}_witness")) {
            return Err(GfuncError::PropertyViolated(i, t));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_values() {
        let g = GFunction::default();
        assert!((g.value(0.125) - 4f64.ln()).abs() < 1e-10);
        assert!((g.d1(0.125) + 8.0).abs() < 1e-12);
        for t in [1.0, 2.0, 10.0] {
            assert_eq!(g.value(t), 0.0);
        }
        assert!(matches!(GFunction::new(0.3), Err(GfuncError::WidthOutOfRange(_))));
        assert!(matches!(GFunction::new(0.0), Err(GfuncError::WidthOutOfRange(_))));
    }

    #[test]
    fn renormalization_is_tiny() {
        for w in [0.05, 0.1, 0.25] {
            let g = GFunction::new(w).unwrap();
            assert!((g.kappa() - 1.0).abs() < 1e-10, "{}", g.kappa());
            let (f, _, _) = g.f_h(1.0 + w - 1e-9);
            assert!((f + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let g = GFunction::default();
        for k in 0..200 {
            let t = 0.38 + 0.245 * k as f64 / 199.0;
            let e = 1e-5;
            let fd1 = (g.value(t + e) - g.value(t - e)) / (2.0 * e);
            let fd2 = (g.d1(t + e) - g.d1(t - e)) / (2.0 * e);
            assert!((fd1 - g.d1(t)).abs() < 1e-6 * (1.0 + fd1.abs()), "{t}");
            assert!((fd2 - g.d2(t)).abs() < 1e-4 * (1.0 + fd2.abs()), "{t}");
        }
    }

    #[test]
    fn joins_are_continuous() {
        let g = GFunction::default();
        for join in [0.5 * (1.0 - g.width()), 0.5 * (1.0 + g.width())] {
            let e = 1e-11;
            assert!((g.value(join - e) - g.value(join + e)).abs() < 1e-6);
            assert!((g.d1(join - e) - g.d1(join + e)).abs() < 1e-6);
            let e = 1e-7;
            let left = (g.value(join) - g.value(join - e)) / e;
            let right = (g.value(join + e) - g.value(join)) / e;
            assert!((left - right).abs() < 1e-6, "{left} {right}");
        }
    }

    #[test]
    fn properties_on_default_grid() {
        let g = GFunction::default();
        let r = probe_g_properties(&g, &SampleGrid::default()).unwrap();
        for i in [1, 2, 4] {
            assert_eq!(r.details[&format!("property_{i}_holds")], true, "{i}");
        }
        // The log ratio at t = 1e-6 is 1 + ln 2 / ln t, outside 1e-3.
        let ratio = r.get_f64("log_ratio_at_smallest_t").unwrap();
        assert!((ratio - (1.0 + 2f64.ln() / 1e-6f64.ln())).abs() < 1e-12);
        assert_eq!(verify_g_properties(&g, &SampleGrid::default()), Err(GfuncError::PropertyViolated(3, 1e-6)));
        // The ratio approaches 1 only logarithmically.
        let deep = SampleGrid { lo: 1e-300, ..SampleGrid::default() };
        let r = probe_g_properties(&g, &deep).unwrap().get_f64("log_ratio_at_smallest_t").unwrap();
        assert!((r - (1.0 + 2f64.ln() / 1e-300f64.ln())).abs() < 1e-12 && r > ratio);
    }

    #[test]
    fn flattened_curvature_is_caught() {
        let g = GFunction::default().with_flat_curvature(0.1, 0.2);
        let grid = SampleGrid { lo: 0.01, hi: 4.0, n: 1001, log: false };
        match verify_g_properties(&g, &grid) {
            Err(GfuncError::PropertyViolated(1, t)) => assert!((0.1..=0.2).contains(&t)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let grid = SampleGrid { lo: 0.1, hi: 1.0, n: 10, log: false };
        GFunction::default().write_table(&path, &grid).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["t", "G", "dG", "d2G"]);
        assert_eq!(r.records().count(), 10);
        assert_eq!(GFunction::default().h_table().len(), 5001);
    }

    proptest! {
        #[test]
        fn composition_keeps_convexity(gamma in 0.1f64..5.0, shift in 1e-3f64..0.25, u in 0.0f64..1.0) {
            let g = GFunction::default();
            let phi = |u: f64| g.value(gamma * u + shift);
            let e = 1e-4 * (gamma * u + shift) / gamma;
            let d1 = (phi(u + e) - phi(u - e)) / (2.0 * e);
            let d2 = (phi(u + e) - 2.0 * phi(u) + phi(u - e)) / (e * e);
            prop_assert!(d2 >= d1 * d1 - 1e-4 * (1.0 + d1 * d1));
        }
    }
}
