//! The flat unit torus `R^d / Z^d`: distances, translations, and the heat
//! kernel as a wrapped Gaussian.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TorusError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("group matrix has rank {rank}, expected {expected}")]
    Rank { rank: usize, expected: usize },
}

/// Reduces a coordinate into `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed representative of `x - y` in `[-1/2, 1/2)`.
#[inline]
pub fn min_image(dx: f64) -> f64 {
    dx - (dx + 0.5).floor()
}

/// Flat distance between two points given as coordinate slices.
#[inline]
pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| min_image(a - b).powi(2)).sum::<f64>().sqrt()
}

/// A point on the `d`-torus with coordinates in `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint(Vec<f64>);

impl TorusPoint {
    pub fn new(coords: impl Into<Vec<f64>>) -> Self {
        Self(coords.into().into_iter().map(wrap).collect())
    }

    pub fn origin(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn uniform<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self((0..d).map(|_| rng.random::<f64>()).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

/// `min_n |x - y + n|`, an error when dimensions differ.
pub fn torus_distance(x: &TorusPoint, y: &TorusPoint) -> Result<f64, TorusError> {
    if x.dim() != y.dim() {
        return Err(TorusError::Dimension(x.dim(), y.dim()));
    }
    Ok(dist(x.coords(), y.coords()))
}

/// A translation `x -> x + θA mod 1` with `θ` in `[0,1)^{d'}` and `A` a
/// rational `d' x d` matrix of full row rank.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement {
    theta: Vec<f64>,
    a: DMatrix<f64>,
    shift: Vec<f64>,
}

impl GroupElement {
    pub fn new(theta: Vec<f64>, a: DMatrix<f64>) -> Result<Self, TorusError> {
        if a.nrows() != theta.len() {
            return Err(TorusError::Dimension(a.nrows(), theta.len()));
        }
        let rank = a.rank(1e-10);
        if rank != a.nrows() {
            return Err(TorusError::Rank { rank, expected: a.nrows() });
        }
        let theta: Vec<f64> = theta.into_iter().map(wrap).collect();
        let shift = (0..a.ncols()).map(|c| wrap((0..a.nrows()).map(|r| theta[r] * a[(r, c)]).sum())).collect();
        Ok(Self { theta, a, shift })
    }

    /// `A = [I | 0]`, i.e. independent shifts of the first `θ.len()` coordinates.
    pub fn coordinate(theta: Vec<f64>, d: usize) -> Result<Self, TorusError> {
        let dp = theta.len();
        if dp > d {
            return Err(TorusError::Dimension(dp, d));
        }
        Self::new(theta, DMatrix::from_fn(dp, d, |r, c| if r == c { 1.0 } else { 0.0 }))
    }

    /// The same `A` with parameters scaled by `s`: `θ -> sθ`.
    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.theta.iter().map(|t| t * s).collect(), self.a.clone()).expect("rank unchanged")
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_norm(&self) -> f64 {
        // Representatives in [-1/2, 1/2) so that small backward shifts count as small.
        self.theta.iter().map(|t| min_image(*t).powi(2)).sum::<f64>().sqrt()
    }

    pub fn translation(&self) -> &[f64] {
        &self.shift
    }

    pub fn compose(&self, other: &Self) -> Self {
        assert_eq!(self.a, other.a, "composition requires a shared matrix A");
        Self::new(self.theta.iter().zip(&other.theta).map(|(a, b)| a + b).collect(), self.a.clone())
            .expect("rank unchanged")
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.theta.iter().map(|t| -t).collect(), self.a.clone()).expect("rank unchanged")
    }

    pub fn apply(&self, x: &TorusPoint) -> TorusPoint {
        let mut y = x.clone();
        self.apply_in_place(&mut y.0);
        y
    }

    /// Shifts the coordinates in place by `s` times the translation vector.
    pub fn apply_scaled_in_place(&self, x: &mut [f64], s: f64) {
        for (xi, ti) in x.iter_mut().zip(&self.shift) {
            *xi = wrap(*xi + s * ti);
        }
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        self.apply_scaled_in_place(x, 1.0);
    }
}

/// Wrapped-Gaussian heat kernel on the `d`-torus.
#[derive(Debug, Clone)]
pub struct HeatKernel {
    d: usize,
}

impl HeatKernel {
    pub fn new(d: usize) -> Self {
        assert!(d >= 1, "torus dimension must be positive");
        Self { d }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Winding cutoff that leaves an omitted tail below `1e-12`.
    pub fn n_max(&self, t: f64) -> i64 {
        (2.0 * t * (30.0 + self.d as f64 * std::f64::consts::LN_2)).sqrt().ceil() as i64 + 2
    }

    /// One-dimensional wrapped Gaussian summed over windings.
    pub fn kernel_1d(&self, t: f64, dx: f64) -> f64 {
        let dx = min_image(dx);
        let n = self.n_max(t);
        let norm = (2.0 * PI * t).sqrt();
        (-n..=n).map(|w| (-(dx + w as f64).powi(2) / (2.0 * t)).exp()).sum::<f64>() / norm
    }

    /// One-dimensional Fourier series `1 + 2 Σ_k e^{-2π²k²t} cos(2πk dx)`.
    pub fn kernel_1d_fourier(&self, t: f64, dx: f64) -> f64 {
        let mut s = 1.0;
        let mut k = 1.0;
        loop {
            let term = (-2.0 * PI * PI * k * k * t).exp();
            if term < 1e-18 {
                break;
            }
            s += 2.0 * term * (2.0 * PI * k * dx).cos();
            k += 1.0;
        }
        s
    }

    pub fn eval_slices(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| self.kernel_1d(t, a - b)).product()
    }

    pub fn heat_kernel(&self, t: f64, x: &TorusPoint, y: &TorusPoint) -> Result<f64, TorusError> {
        if t <= 0.0 {
            return Err(TorusError::NonPositiveTime(t));
        }
        if x.dim() != self.d || y.dim() != self.d {
            return Err(TorusError::Dimension(x.dim(), self.d));
        }
        Ok(self.eval_slices(t, x.coords(), y.coords()))
    }

    pub fn heat_kernel_fourier(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| self.kernel_1d_fourier(t, a - b)).product()
    }

    /// `p^t(0,0)`, the supremum of the kernel at time `t`.
    pub fn diagonal(&self, t: f64) -> f64 {
        self.kernel_1d(t, 0.0).powi(self.d as i32)
    }

    /// `sup_{1<=k<=k_max} p^{kβ}(0,0)`. The diagonal decreases in time, so
    /// this is attained at `k = 1`; debug builds assert it.
    pub fn phat(&self, beta: f64, k_max: usize) -> f64 {
        let vals: Vec<f64> = (1..=k_max.max(1)).map(|k| self.diagonal(k as f64 * beta)).collect();
        debug_assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        vals[0]
    }

    /// Log density of a free step of duration `t` between `x` and `y`.
    pub fn log_step(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        self.eval_slices(t, x, y).ln()
    }
}

/// Samples a free Brownian increment of variance `t` per coordinate and wraps.
pub fn free_step<R: Rng + ?Sized>(x: &[f64], t: f64, rng: &mut R, out: &mut [f64]) {
    let s = t.sqrt();
    for (o, xi) in out.iter_mut().zip(x) {
        let g: f64 = StandardNormal.sample(rng);
        *o = wrap(xi + s * g);
    }
}

/// Maximum deviation `|f(gx) - f(x)|` over random points.
pub fn check_invariance_1<R: Rng + ?Sized>(
    f: impl Fn(&[f64]) -> f64,
    g: &GroupElement,
    d: usize,
    samples: usize,
    rng: &mut R,
) -> f64 {
    (0..samples)
        .map(|_| {
            let x = TorusPoint::uniform(d, rng);
            (f(g.apply(&x).coords()) - f(x.coords())).abs()
        })
        .fold(0.0, f64::max)
}

/// Maximum deviation `|f(gx, gx') - f(x, x')|` over random pairs.
pub fn check_invariance_2<R: Rng + ?Sized>(
    f: impl Fn(&[f64], &[f64]) -> f64,
    g: &GroupElement,
    d: usize,
    samples: usize,
    rng: &mut R,
) -> f64 {
    (0..samples)
        .map(|_| {
            let x = TorusPoint::uniform(d, rng);
            let y = TorusPoint::uniform(d, rng);
            (f(g.apply(&x).coords(), g.apply(&y).coords()) - f(x.coords(), y.coords())).abs()
        })
        .fold(0.0, f64::max)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_examples() {
        let p = |v: &[f64]| TorusPoint::new(v.to_vec());
        assert_eq!(torus_distance(&p(&[0.3]), &p(&[0.3])).unwrap(), 0.0);
        assert_abs_diff_eq!(torus_distance(&p(&[0.1]), &p(&[0.9])).unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(torus_distance(&p(&[0.0, 0.0]), &p(&[0.5, 0.5])).unwrap(), 0.5f64.sqrt(), epsilon = 1e-15);
        assert!(torus_distance(&p(&[0.0]), &p(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn kernel_values() {
        let hk = HeatKernel::new(1);
        let o = TorusPoint::origin(1);
        // On the unit torus the Fourier form gives 1 + 2e^{-2π²} + ... at t = 1.
        let expected = 1.0 + 2.0 * (-2.0 * PI * PI).exp() + 2.0 * (-8.0 * PI * PI).exp();
        assert_abs_diff_eq!(hk.heat_kernel(1.0, &o, &o).unwrap(), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(hk.phat(1.0, 10), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(hk.phat(0.01, 10), 1.0 / (2.0 * PI * 0.01).sqrt(), epsilon = 1e-12);
        let x = TorusPoint::new(vec![0.17]);
        let y = TorusPoint::new(vec![0.71]);
        assert_abs_diff_eq!(hk.heat_kernel(100.0, &x, &y).unwrap(), 1.0, epsilon = 1e-10);
        assert!(hk.heat_kernel(0.0, &x, &y).is_err());
        for k in 1..10 {
            assert!(hk.diagonal((k + 1) as f64 * 0.3) <= hk.diagonal(k as f64 * 0.3));
        }
    }

    #[test]
    fn group_examples() {
        let g = GroupElement::coordinate(vec![0.25], 1).unwrap();
        let y = g.apply(&TorusPoint::new(vec![0.9]));
        assert_abs_diff_eq!(y.coords()[0], 0.15, epsilon = 1e-15);
        let id = GroupElement::coordinate(vec![0.0], 1).unwrap();
        assert_eq!(id.apply(&TorusPoint::new(vec![0.3])).coords(), &[0.3]);
        assert!(GroupElement::new(vec![0.1, 0.2], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0])).is_err());
    }

    #[test]
    fn invariance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GroupElement::coordinate(vec![0.25], 1).unwrap();
        assert_eq!(check_invariance_1(|_| 3.0, &g, 1, 100, &mut rng), 0.0);
        let dev2 = check_invariance_2(|x, y| (2.0 * PI * (x[0] - y[0])).cos(), &g, 1, 1000, &mut rng);
        assert!(dev2 < 1e-14);
        // |cos(2π(x+1/4)) - cos(2πx)| peaks at √2.
        let mut worst: f64 = 0.0;
        for i in 0..10_000 {
            let x = i as f64 / 10_000.0;
            worst = worst.max(((2.0 * PI * (x + 0.25)).cos() - (2.0 * PI * x).cos()).abs());
        }
        assert_abs_diff_eq!(worst, 2f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn gradient_bound_by_differences() {
        // |∂_x p^t| is bounded; the finite-difference estimate stays finite
        // and below the Gaussian envelope at t = 0.1.
        let hk = HeatKernel::new(1);
        let t = 0.1;
        let mut worst: f64 = 0.0;
        for i in 0..200 {
            let x = [i as f64 / 200.0];
            let g = fd_gradient(|p| hk.eval_slices(t, p, &[0.0]), &x, 1e-6);
            worst = worst.max(g[0].abs());
        }
        let envelope = (-0.5f64).exp() / (t * (2.0 * PI).sqrt()) * 1.01;
        assert!(worst < envelope, "{worst} vs {envelope}");
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_bounded(x in 0.0f64..1.0, y in 0.0f64..1.0, t in 0.01f64..5.0) {
            let hk = HeatKernel::new(1);
            let a = hk.eval_slices(t, &[x], &[y]);
            let b = hk.eval_slices(t, &[y], &[x]);
            prop_assert!((a - b).abs() <= 1e-14 * a.max(1.0));
            prop_assert!(a > 0.0);
            prop_assert!(a <= hk.diagonal(t) * (1.0 + 1e-14));
        }

        #[test]
        fn two_series_agree(dx in 0.0f64..1.0, t in 0.3f64..3.0) {
            let hk = HeatKernel::new(1);
            prop_assert!((hk.kernel_1d(t, dx) - hk.kernel_1d_fourier(t, dx)).abs() < 1e-10);
        }

        #[test]
        fn group_law(x in proptest::collection::vec(0.0f64..1.0, 2), th in proptest::collection::vec(0.0f64..1.0, 2)) {
            let g = GroupElement::coordinate(th, 2).unwrap();
            let p = TorusPoint::new(x);
            let back = g.apply(&g.inverse().apply(&p));
            prop_assert!(dist(back.coords(), p.coords()) < 1e-12);
            let gg = g.compose(&g);
            prop_assert!(dist(gg.apply(&p).coords(), g.apply(&g.apply(&p)).coords()) < 1e-12);
        }

        #[test]
        fn translation_is_isometry(x in proptest::collection::vec(0.0f64..1.0, 3), y in proptest::collection::vec(0.0f64..1.0, 3), th in proptest::collection::vec(0.0f64..1.0, 2)) {
            let g = GroupElement::coordinate(th, 3).unwrap();
            let (p, q) = (TorusPoint::new(x), TorusPoint::new(y));
            let before = torus_distance(&p, &q).unwrap();
            let after = torus_distance(&g.apply(&p), &g.apply(&q)).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
            prop_assert!(before <= 3f64.sqrt() / 2.0 + 1e-12);
        }
    }
}
