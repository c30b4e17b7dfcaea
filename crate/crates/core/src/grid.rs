//! Tensor-grid sampled fields over space-time boxes.
//!
//! Axis 0 is time, axes `1..=N` are the spatial coordinates. Values are
//! stored row-major with the last axis varying fastest.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypogroup::GroupPoint;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    ShapeMismatch { shape: Vec<usize>, expected: usize, got: usize },
    #[error("axis needs at least two nodes and lo < hi, got [{0}, {1}] with {2} nodes")]
    BadAxis(f64, f64, usize),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed field file: {0}")]
    Malformed(String),
}

/// Uniform axis with trapezoidal weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn checked(lo: f64, hi: f64, n: usize) -> Result<Self, GridError> {
        if n < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(GridError::BadAxis(lo, hi, n));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    pub fn weight(&self, i: usize) -> f64 {
        let h = self.step();
        if i == 0 || i + 1 == self.n {
            0.5 * h
        } else {
            h
        }
    }

    /// Cell index and local coordinate in `[0, 1]` of `x`, or `None`
    /// outside `[lo, hi]`.
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let s = (x - self.lo) / self.step();
        let i = (s.floor() as usize).min(self.n - 2);
        Some((i, (s - i as f64).clamp(0.0, 1.0)))
    }

    /// Refined axis with twice as many cells.
    pub fn refined(&self) -> Self {
        Self { n: 2 * self.n - 1, ..*self }
    }
}

/// Something that can be evaluated at a space-time point.
pub trait ScalarField: Sync {
    fn value_at(&self, z: &GroupPoint) -> Option<f64>;
}

/// Adapter turning a closure into a [`ScalarField`].
pub struct FnField<F>(pub F);

impl<F: Fn(&GroupPoint) -> f64 + Sync> ScalarField for FnField<F> {
    fn value_at(&self, z: &GroupPoint) -> Option<f64> {
        Some((self.0)(z))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    axes: Vec<Axis>,
    values: Vec<f64>,
    strides: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(rename = "box")]
    bounds: Vec<[f64; 2]>,
    shape: Vec<usize>,
    axes: Vec<String>,
}

fn strides_of(axes: &[Axis]) -> Vec<usize> {
    let mut strides = vec![1; axes.len()];
    for k in (0..axes.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * axes[k + 1].n;
    }
    strides
}

impl GridField {
    pub fn new(axes: Vec<Axis>, values: Vec<f64>) -> Result<Self, GridError> {
        for a in &axes {
            Axis::checked(a.lo, a.hi, a.n)?;
        }
        let expected: usize = axes.iter().map(|a| a.n).product();
        if expected != values.len() {
            return Err(GridError::ShapeMismatch {
                shape: axes.iter().map(|a| a.n).collect(),
                expected,
                got: values.len(),
            });
        }
        let strides = strides_of(&axes);
        Ok(Self { axes, values, strides })
    }

    pub fn zeros(axes: Vec<Axis>) -> Self {
        let len = axes.iter().map(|a| a.n).product();
        let strides = strides_of(&axes);
        Self { axes, values: vec![0.0; len], strides }
    }

    /// Samples `f(t, x)` at every node.
    pub fn from_fn(axes: Vec<Axis>, f: impl Fn(&GroupPoint) -> f64) -> Self {
        let mut out = Self::zeros(axes);
        for k in 0..out.values.len() {
            out.values[k] = f(&out.point(k));
        }
        out
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Spatial dimension `N`.
    pub fn space_dim(&self) -> usize {
        self.axes.len() - 1
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi(&self, mut k: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|s| {
                let i = k / s;
                k %= s;
                i
            })
            .collect()
    }

    pub fn point(&self, k: usize) -> GroupPoint {
        let idx = self.multi(k);
        GroupPoint {
            t: self.axes[0].node(idx[0]),
            x: DVector::from_iterator(
                self.axes.len() - 1,
                (1..self.axes.len()).map(|a| self.axes[a].node(idx[a])),
            ),
        }
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.multi(k)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.weight(i))
            .product()
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.weight(k)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            axes: self.axes.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            strides: self.strides.clone(),
        }
    }

    /// Trapezoidal `L^p` norm over the box.
    pub fn lp_norm(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.sup_abs();
        }
        let s: f64 = self
            .values
            .iter()
            .enumerate()
            .map(|(k, v)| self.weight(k) * v.abs().powf(p))
            .sum();
        s.powf(1.0 / p)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute value on the boundary of the box.
    pub fn boundary_sup(&self) -> f64 {
        let shape = self.shape();
        (0..self.len())
            .filter(|&k| {
                self.multi(k)
                    .iter()
                    .zip(&shape)
                    .any(|(&i, &n)| i == 0 || i + 1 == n)
            })
            .fold(0.0, |m, k| m.max(self.values[k].abs()))
    }

    /// Multilinear interpolation at `(t, x)`; `None` outside the box.
    pub fn interpolate(&self, coords: &[f64]) -> Option<f64> {
        const MAX_AXES: usize = 12;
        let d = self.axes.len();
        assert!(d <= MAX_AXES, "interpolation supports at most {MAX_AXES} axes");
        let mut frac = [0.0f64; MAX_AXES];
        let mut base = 0;
        for a in 0..d {
            let (i, s) = self.axes[a].locate(coords[a])?;
            frac[a] = s;
            base += i * self.strides[a];
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = base;
            for (a, &s) in frac.iter().enumerate().take(d) {
                if corner & (1 << a) != 0 {
                    w *= s;
                    off += self.strides[a];
                } else {
                    w *= 1.0 - s;
                }
            }
            if w != 0.0 {
                acc += w * self.values[off];
            }
        }
        Some(acc)
    }

    /// Values on the time slice `i`, as a field over the spatial axes.
    pub fn time_slice(&self, i: usize) -> Vec<f64> {
        let stride = self.strides[0];
        self.values[i * stride..(i + 1) * stride].to_vec()
    }

    /// Writes `path` as CSV (`t, x1..xN, value`) plus a JSON sidecar with the
    /// box and shape next to it.
    pub fn write_csv(&self, path: &Path) -> Result<PathBuf, GridError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..self.axes.len()).map(|i| format!("x{i}")));
        header.push("value".into());
        w.write_record(&header)?;
        for k in 0..self.len() {
            let p = self.point(k);
            let mut row = vec![fmt_f64(p.t)];
            row.extend(p.x.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(self.values[k]));
            w.write_record(&row)?;
        }
        w.flush()?;
        let sidecar = sidecar_path(path);
        let doc = Sidecar {
            bounds: self.axes.iter().map(|a| [a.lo, a.hi]).collect(),
            shape: self.shape(),
            axes: header[..header.len() - 1].to_vec(),
        };
        fs::write(&sidecar, serde_json::to_string_pretty(&doc)?)?;
        Ok(sidecar)
    }

    pub fn read_csv(path: &Path) -> Result<Self, GridError> {
        let doc: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if doc.bounds.len() != doc.shape.len() {
            return Err(GridError::Malformed("box and shape lengths differ".into()));
        }
        let axes = doc
            .bounds
            .iter()
            .zip(&doc.shape)
            .map(|(b, &n)| Axis::checked(b[0], b[1], n))
            .collect::<Result<Vec<_>, _>>()?;
        let mut r = csv::Reader::from_path(path)?;
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v = rec
                .get(rec.len().saturating_sub(1))
                .ok_or_else(|| GridError::Malformed("empty row".into()))?;
            values.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| GridError::Malformed(format!("{v}: {e}")))?,
            );
        }
        Self::new(axes, values)
    }
}

impl ScalarField for GridField {
    fn value_at(&self, z: &GroupPoint) -> Option<f64> {
        let mut c = Vec::with_capacity(z.x.len() + 1);
        c.push(z.t);
        c.extend(z.x.iter().copied());
        self.interpolate(&c)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Shortest round-trip representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn axes() -> Vec<Axis> {
        vec![Axis::new(0.0, 1.0, 5), Axis::new(-1.0, 1.0, 9), Axis::new(-2.0, 2.0, 7)]
    }

    #[test]
    fn trapezoid_measure_and_norms() {
        let f = GridField::from_fn(axes(), |_| 1.0);
        assert!((f.lp_norm(1.0) - 8.0).abs() < 1e-12);
        assert!((f.lp_norm(2.0) - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(f.sup_abs(), 1.0);
    }

    #[test]
    fn interpolation_reproduces_multilinear_functions() {
        let f = GridField::from_fn(axes(), |p| 1.0 + 2.0 * p.t - p.x[0] + 0.5 * p.x[1] * p.t);
        let v = f.interpolate(&[0.33, 0.1, -1.3]).unwrap();
        assert!((v - (1.0 + 0.66 - 0.1 + 0.5 * -1.3 * 0.33)).abs() < 1e-12);
        assert_eq!(f.interpolate(&[1.5, 0.0, 0.0]), None);
        assert!((f.interpolate(&[1.0, 1.0, 2.0]).unwrap() - f.values()[f.len() - 1]).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let f = GridField::from_fn(axes(), |p| (p.t * 3.0).sin() + p.x[1]);
        f.write_csv(&path).unwrap();
        let g = GridField::read_csv(&path).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn rejects_shape_mismatch() {
        assert!(GridField::new(axes(), vec![0.0; 3]).is_err());
        assert!(Axis::checked(1.0, 0.0, 4).is_err());
    }

    proptest! {
        #[test]
        fn lp_norm_is_monotone(vals in proptest::collection::vec(-5.0..5.0f64, 315), p in 1.0..6.0f64) {
            let f = GridField::new(axes(), vals).unwrap();
            let g = f.map(|v| 1.5 * v.abs());
            prop_assert!(g.lp_norm(p) >= f.lp_norm(p));
        }
    }
}
