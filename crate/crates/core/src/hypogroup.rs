//! Lie-group calculus induced by a constant drift matrix `B`.
//!
//! The drift is written `Y u = x^T B D u - ∂_t u`, the translation law is
//! `(x, t) ∘ (ξ, τ) = (ξ + E(τ) x, t + τ)` with `E(τ) = exp(-τ B^T)`, and the
//! dilations act by `(λ^{α_i} x_i, λ² t)` where the exponent of a coordinate
//! in block `k` is `2k + 1`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Axis;
use crate::linalg;

/// Relative singular-value floor for the block rank test.
pub const RANK_TOL: f64 = 1e-10;
/// Absolute bisection tolerance of the homogeneous norm.
pub const NORM_TOL: f64 = 1e-12;
const NORM_MAX_ITER: usize = 200;
/// Relative slack so that nodes exactly on a sphere stay inside the ball.
const BOUNDARY_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("block {0} is rank deficient (rank {1}, required {2})")]
    RankDeficientBlock(usize, usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("nonzero entry above the superdiagonal block ({0}, {1})")]
    NotBlockHessenberg(usize, usize),
    #[error("operator norm {norm} exceeds lambda {lambda}")]
    NormExceeded { norm: f64, lambda: f64 },
    #[error("dilation scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("non-finite input")]
    NonFinite,
    #[error("lambda must be positive, got {0}")]
    InvalidLambda(f64),
    #[error("region sampling produced no interior node")]
    EmptyRegion,
}

/// JSON document describing a drift matrix and its block signature.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StructureSpec {
    #[serde(rename = "N")]
    pub n: usize,
    pub blocks: Vec<usize>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub lambda: f64,
}

impl StructureSpec {
    pub fn build(&self) -> Result<OperatorStructure, StructureError> {
        if self.b.len() != self.n || self.b.iter().any(|r| r.len() != self.n) {
            return Err(StructureError::ShapeMismatch(format!(
                "B must be {0}x{0}",
                self.n
            )));
        }
        let flat: Vec<f64> = self.b.iter().flatten().copied().collect();
        OperatorStructure::new(
            DMatrix::from_row_slice(self.n, self.n, &flat),
            &self.blocks,
            self.lambda,
        )
    }
}

/// A validated drift matrix with its block signature and derived
/// homogeneity data.
#[derive(Debug, Clone)]
pub struct OperatorStructure {
    b: DMatrix<f64>,
    b0: DMatrix<f64>,
    blocks: Vec<usize>,
    lambda: f64,
    alpha: Vec<u32>,
    q: usize,
    /// Nilpotency index of `B^T` when `B` is nilpotent.
    nilpotent: Option<usize>,
    b0_nilpotent: usize,
}

impl OperatorStructure {
    /// Validates the block form of `b` against `blocks` and the bound `lambda`.
    pub fn new(b: DMatrix<f64>, blocks: &[usize], lambda: f64) -> Result<Self, StructureError> {
        let n = b.nrows();
        if b.ncols() != n || n == 0 {
            return Err(StructureError::ShapeMismatch(format!(
                "B must be square and nonempty, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(StructureError::NonFinite);
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(StructureError::InvalidLambda(lambda));
        }
        if blocks.is_empty() || blocks.contains(&0) {
            return Err(StructureError::ShapeMismatch("block sizes must be positive".into()));
        }
        if blocks.windows(2).any(|w| w[1] > w[0]) {
            return Err(StructureError::ShapeMismatch(format!(
                "block sizes must be non-increasing, got {blocks:?}"
            )));
        }
        if blocks.iter().sum::<usize>() != n {
            return Err(StructureError::ShapeMismatch(format!(
                "block sizes {blocks:?} do not sum to N = {n}"
            )));
        }

        let offsets: Vec<usize> = blocks
            .iter()
            .scan(0, |acc, m| {
                let o = *acc;
                *acc += m;
                Some(o)
            })
            .collect();

        for (rb, (&ro, &rm)) in offsets.iter().zip(blocks).enumerate() {
            for (cb, (&co, &cm)) in offsets.iter().zip(blocks).enumerate() {
                if cb > rb + 1 && b.view((ro, co), (rm, cm)).iter().any(|v| *v != 0.0) {
                    return Err(StructureError::NotBlockHessenberg(rb, cb));
                }
            }
        }

        let mut b0 = DMatrix::zeros(n, n);
        for k in 1..blocks.len() {
            let (ro, rm) = (offsets[k - 1], blocks[k - 1]);
            let (co, cm) = (offsets[k], blocks[k]);
            let block = b.view((ro, co), (rm, cm)).clone_owned();
            let rank = numerical_rank(&block);
            if rank < cm {
                return Err(StructureError::RankDeficientBlock(k, rank, cm));
            }
            b0.view_mut((ro, co), (rm, cm)).copy_from(&block);
        }

        let norm = linalg::spectral_norm(&b);
        if norm > lambda {
            return Err(StructureError::NormExceeded { norm, lambda });
        }

        let alpha: Vec<u32> = blocks
            .iter()
            .enumerate()
            .flat_map(|(k, &m)| std::iter::repeat_n(2 * k as u32 + 1, m))
            .collect();
        let q = alpha.iter().map(|&a| a as usize).sum();
        let nilpotent = linalg::nilpotency_index(&b.transpose());
        let b0_nilpotent = linalg::nilpotency_index(&b0.transpose())
            .expect("strictly block upper triangular matrix is nilpotent");

        Ok(Self {
            b,
            b0,
            blocks: blocks.to_vec(),
            lambda,
            alpha,
            q,
            nilpotent,
            b0_nilpotent,
        })
    }

    /// `B = [[0, 1], [0, 0]]`, blocks `(1, 1)`, `λ = 8`.
    pub fn kolmogorov() -> Self {
        Self::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), &[1, 1], 8.0)
            .expect("kolmogorov structure is valid")
    }

    /// The parabolic case `B = 0`, single block of size `n`.
    pub fn heat(n: usize) -> Self {
        Self::new(DMatrix::zeros(n, n), &[n], 1.0).expect("heat structure is valid")
    }

    /// The structure obtained by zeroing every `*` block of `B`.
    pub fn principal_part(&self) -> Self {
        Self::new(self.b0.clone(), &self.blocks, self.lambda).expect("B0 inherits validity")
    }

    pub fn spec(&self) -> StructureSpec {
        StructureSpec {
            n: self.dim(),
            blocks: self.blocks.clone(),
            b: self.b.row_iter().map(|r| r.iter().copied().collect()).collect(),
            lambda: self.lambda,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }
    /// Number of diffusion directions `m₀`.
    pub fn m0(&self) -> usize {
        self.blocks[0]
    }
    /// Depth `d` of the block chain.
    pub fn depth(&self) -> usize {
        self.blocks.len() - 1
    }
    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }
    pub fn drift(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn principal_drift(&self) -> &DMatrix<f64> {
        &self.b0
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn alpha(&self) -> &[u32] {
        &self.alpha
    }
    /// `Q = m₀ + 3 m₁ + ... + (2d + 1) m_d`; the homogeneous dimension is `Q + 2`.
    pub fn q(&self) -> usize {
        self.q
    }
    pub fn trace_b(&self) -> f64 {
        self.b.trace()
    }
    pub fn is_principal(&self) -> bool {
        self.b == self.b0
    }
    pub fn b0_nilpotency(&self) -> usize {
        self.b0_nilpotent
    }
    /// Nilpotency index of `B^T`, `None` when `B` is not nilpotent.
    pub fn drift_nilpotency(&self) -> Option<usize> {
        self.nilpotent
    }

    /// `E(τ) = exp(-τ B^T)`.
    pub fn exp_drift(&self, tau: f64) -> DMatrix<f64> {
        let m = self.b.transpose() * (-tau);
        match self.nilpotent {
            Some(k) => linalg::nilpotent_exp(&m, k),
            None => linalg::expm_scaling_squaring(&m),
        }
    }

    /// `E₀(τ) = exp(-τ B₀^T)`, always a terminating series.
    pub fn exp_drift_principal(&self, tau: f64) -> DMatrix<f64> {
        linalg::nilpotent_exp(&(self.b0.transpose() * (-tau)), self.b0_nilpotent)
    }

    pub fn compose(&self, a: &GroupPoint, b: &GroupPoint) -> GroupPoint {
        GroupPoint {
            x: &b.x + self.exp_drift(b.t) * &a.x,
            t: a.t + b.t,
        }
    }

    pub fn invert(&self, a: &GroupPoint) -> GroupPoint {
        GroupPoint {
            x: -(self.exp_drift(-a.t) * &a.x),
            t: -a.t,
        }
    }

    /// `ζ⁻¹ ∘ z` computed in one step as `(x - E(t - τ) ξ, t - τ)`.
    pub fn relative(&self, zeta: &GroupPoint, z: &GroupPoint) -> GroupPoint {
        let s = z.t - zeta.t;
        GroupPoint {
            x: &z.x - self.exp_drift(s) * &zeta.x,
            t: s,
        }
    }

    pub fn dilate(&self, lam: f64, a: &GroupPoint) -> Result<GroupPoint, StructureError> {
        if !(lam > 0.0) {
            return Err(StructureError::NonPositiveScale(lam));
        }
        Ok(self.dilate_unchecked(lam, a))
    }

    pub fn dilate_unchecked(&self, lam: f64, a: &GroupPoint) -> GroupPoint {
        GroupPoint {
            x: DVector::from_iterator(
                a.x.len(),
                a.x.iter().zip(&self.alpha).map(|(x, &al)| x * lam.powi(al as i32)),
            ),
            t: a.t * lam * lam,
        }
    }

    /// Left side of the defining equation `Σ x_i² / r^{2α_i} + t² / r⁴`.
    fn gauge(&self, a: &GroupPoint, r: f64) -> f64 {
        let spatial: f64 = a
            .x
            .iter()
            .zip(&self.alpha)
            .map(|(x, &al)| (x / r.powi(al as i32)).powi(2))
            .sum();
        spatial + (a.t / (r * r)).powi(2)
    }

    /// Homogeneous norm: the unique `r > 0` with `gauge(a, r) = 1`, zero at
    /// the identity.
    pub fn hom_norm(&self, a: &GroupPoint) -> f64 {
        let guess = self.cube_norm(a);
        if guess == 0.0 {
            return 0.0;
        }
        // gauge(guess) >= 1 because one term equals one there.
        let mut lo = guess;
        let mut hi = guess * 2.0;
        while self.gauge(a, hi) > 1.0 {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..NORM_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= NORM_TOL.max(f64::EPSILON * hi) || mid == lo || mid == hi {
                break;
            }
            if self.gauge(a, mid) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Smallest `r` with `a ∈ C_r(0)`: `max(|x_i|^{1/α_i}, |t|^{1/2})`.
    pub fn cube_norm(&self, a: &GroupPoint) -> f64 {
        a.x.iter()
            .zip(&self.alpha)
            .map(|(x, &al)| x.abs().powf(1.0 / al as f64))
            .fold(a.t.abs().sqrt(), f64::max)
    }

    /// Empirical constant `Λ` with `C_{r/Λ} ⊆ B_r ⊆ C_{Λr}` over random
    /// points of the unit sphere.
    pub fn estimate_equivalence_constant(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.dim();
        let mut lam: f64 = 1.0;
        for _ in 0..samples {
            // Mix in sparse directions so that faces and edges are visited.
            let keep: u32 = rng.random_range(1..(1u32 << (n + 1)));
            let mut x = DVector::zeros(n);
            for (i, xi) in x.iter_mut().enumerate() {
                if keep & (1 << i) != 0 {
                    *xi = rng.random_range(-1.0..1.0);
                }
            }
            let t = if keep & (1 << n) != 0 { rng.random_range(-1.0..1.0) } else { 0.0 };
            let p = GroupPoint { x, t };
            let nrm = self.hom_norm(&p);
            if nrm == 0.0 {
                continue;
            }
            let unit = self.dilate_unchecked(1.0 / nrm, &p);
            let c = self.cube_norm(&unit);
            lam = lam.max(c).max(1.0 / c);
        }
        lam
    }

    /// Tensor-grid quadrature of `region` with `resolution` nodes per axis.
    pub fn sample_region(
        &self,
        region: &Region,
        resolution: usize,
    ) -> Result<SampledRegion, StructureError> {
        if resolution < 2 || !(region.radius() > 0.0) {
            return Err(StructureError::EmptyRegion);
        }
        let r = region.radius();
        let n = self.dim();
        let mut axes = Vec::with_capacity(n + 1);
        let (t_lo, t_hi) = match region {
            Region::Ball(b) if b.past_only => (-r * r, 0.0),
            Region::Ball(_) => (-r * r, r * r),
            Region::Cube { past_only: true, .. } => (-r * r, 0.0),
            Region::Cube { .. } => (-r * r, r * r),
            Region::Cylinder { .. } => (-r * r, 0.0),
        };
        axes.push(Axis::new(t_lo, t_hi, resolution));
        for (i, &al) in self.alpha.iter().enumerate() {
            let half = match region {
                Region::Cylinder { .. } if i >= self.m0() => (self.lambda * r).powi(al as i32),
                _ => r.powi(al as i32),
            };
            axes.push(Axis::new(-half, half, resolution));
        }
        let total = resolution.pow(n as u32 + 1);
        let mut mask = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; n + 1];
        for _ in 0..total {
            let local = GroupPoint {
                t: axes[0].node(idx[0]),
                x: DVector::from_iterator(n, (1..=n).map(|k| axes[k].node(idx[k]))),
            };
            let inside = match region {
                Region::Ball(b) => {
                    self.hom_norm(&local) <= r * (1.0 + BOUNDARY_SLACK)
                        && (!b.past_only || local.t <= 0.0)
                }
                Region::Cube { .. } => true,
                Region::Cylinder { .. } => {
                    local.x.rows(0, self.m0()).norm() <= r
                }
            };
            let w: f64 = idx.iter().zip(&axes).map(|(&i, a)| a.weight(i)).product();
            mask.push(inside);
            weights.push(if inside { w } else { 0.0 });
            for k in (0..=n).rev() {
                idx[k] += 1;
                if idx[k] < resolution {
                    break;
                }
                idx[k] = 0;
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(StructureError::EmptyRegion);
        }
        Ok(SampledRegion {
            center: region.center().clone(),
            axes,
            mask,
            weights,
        })
    }
}

/// Rank by singular values above `RANK_TOL` times the largest.
fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().singular_values();
    let top = sv.max();
    if top <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

/// A point `z = (x, t)` of `R^{N+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPoint {
    pub x: DVector<f64>,
    pub t: f64,
}

impl GroupPoint {
    pub fn new(x: &[f64], t: f64) -> Self {
        Self { x: DVector::from_column_slice(x), t }
    }
    pub fn origin(n: usize) -> Self {
        Self { x: DVector::zeros(n), t: 0.0 }
    }
    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.x.iter().all(|v| v.is_finite())
    }
    pub fn dim(&self) -> usize {
        self.x.len()
    }
    pub fn max_abs_diff(&self, other: &GroupPoint) -> f64 {
        (&self.x - &other.x).amax().max((self.t - other.t).abs())
    }
}

/// `B_r(z₀) = {z : ‖z₀⁻¹ ∘ z‖ ≤ r}`, optionally cut to `t < t₀`.
#[derive(Debug, Clone)]
pub struct AnisotropicBall {
    pub center: GroupPoint,
    pub radius: f64,
    pub past_only: bool,
}

impl AnisotropicBall {
    pub fn contains(&self, s: &OperatorStructure, z: &GroupPoint) -> bool {
        if self.past_only && z.t >= self.center.t {
            return false;
        }
        s.hom_norm(&s.relative(&self.center, z)) <= self.radius
    }
}

/// Integration regions, all described in coordinates local to `center`.
#[derive(Debug, Clone)]
pub enum Region {
    Ball(AnisotropicBall),
    /// `C_r(z₀)`: `|x_i| ≤ r^{α_i}`, `|t| ≤ r²` (or `-r² ≤ t ≤ 0`).
    Cube { center: GroupPoint, radius: f64, past_only: bool },
    /// `K_r × S_r × [-r², 0]` with `|x'| ≤ r` and `|x_j| ≤ (λ r)^{α_j}`.
    Cylinder { center: GroupPoint, radius: f64 },
}

impl Region {
    pub fn radius(&self) -> f64 {
        match self {
            Region::Ball(b) => b.radius,
            Region::Cube { radius, .. } | Region::Cylinder { radius, .. } => *radius,
        }
    }
    pub fn center(&self) -> &GroupPoint {
        match self {
            Region::Ball(b) => &b.center,
            Region::Cube { center, .. } | Region::Cylinder { center, .. } => center,
        }
    }
}

/// Indicator samples and trapezoidal weights of a region on a tensor grid
/// in local coordinates `w = z₀⁻¹ ∘ z`. Left translations preserve Lebesgue
/// measure, so the weights apply unchanged to global points `z₀ ∘ w`.
#[derive(Debug, Clone)]
pub struct SampledRegion {
    pub center: GroupPoint,
    /// Time axis first, then `x_1 .. x_N`.
    pub axes: Vec<Axis>,
    pub mask: Vec<bool>,
    pub weights: Vec<f64>,
}

impl SampledRegion {
    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Local coordinates of flat node `k`.
    pub fn local_point(&self, k: usize) -> GroupPoint {
        let n = self.axes.len() - 1;
        let mut rem = k;
        let mut coords = vec![0.0; n + 1];
        for a in (0..=n).rev() {
            let len = self.axes[a].len();
            coords[a] = self.axes[a].node(rem % len);
            rem /= len;
        }
        GroupPoint { t: coords[0], x: DVector::from_column_slice(&coords[1..]) }
    }

    /// Global points and weights of the nodes inside the region.
    pub fn inside(&self, s: &OperatorStructure) -> Vec<(GroupPoint, f64)> {
        (0..self.len())
            .filter(|&k| self.mask[k])
            .map(|k| (s.compose(&self.center, &self.local_point(k)), self.weights[k]))
            .collect()
    }
}
