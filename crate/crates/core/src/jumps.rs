//! Graph jump rates, the index-chain transition kernel by uniformization,
//! endpoint-conditioned skeleton sampling, and skeleton masses.

use std::sync::OnceLock;

use rand::Rng;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::graph::Graph;

#[derive(Debug, Error, PartialEq)]
pub enum JumpError {
    #[error("no index trajectory from {from} to {to} has positive mass")]
    Unreachable { from: usize, to: usize },
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
}

/// Directed jump rates `λ_{i,j}`, nonzero only on graph edges.
#[derive(Debug, Clone)]
pub struct JumpRates {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    rates: Vec<f64>,
    exit: Vec<f64>,
}

impl JumpRates {
    pub fn uniform(g: &Graph, lambda0: f64) -> Self {
        Self::from_fn(g, |_, _| lambda0)
    }

    pub fn from_fn(g: &Graph, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut offsets = vec![0];
        let mut targets = Vec::new();
        let mut rates = Vec::new();
        let mut exit = Vec::with_capacity(g.vertex_count());
        for i in 0..g.vertex_count() {
            let mut e = 0.0;
            for &j in g.neighbors(i) {
                let r = f(i, j as usize);
                assert!(r >= 0.0, "jump rates must be nonnegative");
                if r > 0.0 {
                    targets.push(j);
                    rates.push(r);
                    e += r;
                }
            }
            offsets.push(targets.len());
            exit.push(e);
        }
        Self { offsets, targets, rates, exit }
    }

    pub fn vertex_count(&self) -> usize {
        self.exit.len()
    }

    pub fn exit_rate(&self, i: usize) -> f64 {
        self.exit[i]
    }

    pub fn max_exit(&self) -> f64 {
        self.exit.iter().copied().fold(0.0, f64::max)
    }

    /// Outgoing `(target, rate)` pairs.
    pub fn out(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.targets[r.clone()].iter().zip(&self.rates[r]).map(|(&j, &l)| (j as usize, l))
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.out(i).find(|&(t, _)| t == j).map_or(0.0, |(_, l)| l)
    }

    /// The common exit rate when every vertex has the same one.
    pub fn uniform_exit(&self) -> Option<f64> {
        let r0 = *self.exit.first()?;
        self.exit.iter().all(|&r| (r - r0).abs() <= 1e-14 * r0.max(1.0)).then_some(r0)
    }

    /// `A v` where `A` holds the off-diagonal rates.
    fn apply_rates(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.out(i).map(|(j, l)| l * v[j]).sum();
        }
    }
}

/// Continuous-time jump skeleton of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpSkeleton {
    pub k: usize,
    pub jump_times: Vec<f64>,
    /// Vertices visited, one more entry than jumps.
    pub vertex_seq: Vec<u32>,
}

impl JumpSkeleton {
    pub fn jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Largest graph distance from `o` reached by the trajectory.
    pub fn max_distance(&self, g: &Graph, o: usize) -> u32 {
        let row = g.dist_row(o);
        self.vertex_seq.iter().map(|&v| row[v as usize]).max().unwrap_or(0)
    }
}

pub(crate) fn log_poisson(n: usize, mu: f64) -> f64 {
    if mu == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    -mu + n as f64 * mu.ln() - ln_gamma(n as f64 + 1.0)
}

/// Uniformization cutoff for Poisson mean `mu`, tail below `1e-16`.
pub(crate) fn poisson_cap(mu: f64) -> usize {
    (mu + 12.0 * mu.sqrt() + 40.0).ceil() as usize
}

/// The index chain's transition kernel `e^{tQ}` by uniformization, with
/// per-target caches of `(P^N)_{·j}`, `P = I + Q/Λ̄`.
#[derive(Debug)]
pub struct JumpKernel {
    rates: JumpRates,
    lam_bar: f64,
    n_cap: usize,
    cols: Vec<OnceLock<Box<[f64]>>>,
}

impl JumpKernel {
    /// Kernel accurate for times up to `t_max`.
    pub fn new(rates: JumpRates, t_max: f64) -> Self {
        let lam_bar = rates.max_exit();
        let n_cap = if lam_bar == 0.0 { 0 } else { poisson_cap(lam_bar * t_max) };
        let n = rates.vertex_count();
        Self { rates, lam_bar, n_cap, cols: (0..n).map(|_| OnceLock::new()).collect() }
    }

    pub fn rates(&self) -> &JumpRates {
        &self.rates
    }

    pub fn t_max(&self) -> f64 {
        if self.lam_bar == 0.0 {
            f64::INFINITY
        } else {
            // Inverse of poisson_cap, conservatively.
            let c = self.n_cap as f64 - 40.0;
            let s = (-6.0 + (36.0 + c).sqrt()).max(0.0);
            s * s / self.lam_bar
        }
    }

    fn stay(&self, v: usize) -> f64 {
        1.0 - self.rates.exit_rate(v) / self.lam_bar
    }

    /// Flattened `(n_cap + 1) x V` table of `(P^N)_{v j}`.
    fn column(&self, j: usize) -> &[f64] {
        self.cols[j].get_or_init(|| {
            let n = self.rates.vertex_count();
            let mut out = vec![0.0; (self.n_cap + 1) * n];
            out[j] = 1.0;
            let mut tmp = vec![0.0; n];
            for step in 1..=self.n_cap {
                let (prev, cur) = out.split_at_mut(step * n);
                let prev = &prev[(step - 1) * n..];
                self.rates.apply_rates(prev, &mut tmp);
                for v in 0..n {
                    cur[v] = self.stay(v) * prev[v] + tmp[v] / self.lam_bar;
                }
            }
            out.into_boxed_slice()
        })
    }

    fn poisson_weights(&self, t: f64) -> Vec<f64> {
        let mu = self.lam_bar * t;
        debug_assert!(t <= self.t_max() * (1.0 + 1e-9), "time {t} beyond kernel range");
        (0..=self.n_cap).map(|n| log_poisson(n, mu).exp()).collect()
    }

    /// `(e^{tQ})_{ij}`.
    pub fn transition(&self, i: usize, j: usize, t: f64) -> f64 {
        if self.lam_bar == 0.0 {
            return if i == j { 1.0 } else { 0.0 };
        }
        let n = self.rates.vertex_count();
        let col = self.column(j);
        self.poisson_weights(t).iter().enumerate().map(|(m, w)| w * col[m * n + i]).sum()
    }

    /// Mass of index trajectories `i -> j` in time `t` with at least one jump.
    pub fn jump_mass(&self, i: usize, j: usize, t: f64) -> f64 {
        if self.lam_bar == 0.0 {
            return 0.0;
        }
        let n = self.rates.vertex_count();
        let col = self.column(j);
        let stay = self.stay(i);
        self.poisson_weights(t)
            .iter()
            .enumerate()
            .map(|(m, w)| {
                let free = if i == j { stay.powi(m as i32) } else { 0.0 };
                w * (col[m * n + i] - free).max(0.0)
            })
            .sum()
    }

    /// Samples the continuous-time jump events `(time, new vertex)` of a
    /// trajectory `i -> j` in time `t` conditioned on at least one jump.
    pub fn sample_with_jumps<R: Rng + ?Sized>(
        &self,
        i: usize,
        j: usize,
        t: f64,
        rng: &mut R,
    ) -> Result<Vec<(f64, u32)>, JumpError> {
        if t <= 0.0 {
            return Err(JumpError::NonPositiveTime(t));
        }
        let unreachable = JumpError::Unreachable { from: i, to: j };
        if self.lam_bar == 0.0 {
            return Err(unreachable);
        }
        let n = self.rates.vertex_count();
        let col = self.column(j);
        let stay_i = self.stay(i);
        let pw = self.poisson_weights(t);
        let wn: Vec<f64> = pw
            .iter()
            .enumerate()
            .map(|(m, w)| {
                let free = if i == j { stay_i.powi(m as i32) } else { 0.0 };
                w * (col[m * n + i] - free).max(0.0)
            })
            .collect();
        let events = pick(&wn, rng).ok_or(unreachable)?;
        // First real jump after `s` virtual steps at `i`, to neighbour `b`.
        let mut opts = Vec::new();
        let mut ws = Vec::new();
        for s in 0..events {
            let rest = events - s - 1;
            for (b, l) in self.rates.out(i) {
                let w = stay_i.powi(s as i32) * l / self.lam_bar * col[rest * n + b];
                if w > 0.0 {
                    opts.push((s, b));
                    ws.push(w);
                }
            }
        }
        let (s, b) = opts[pick(&ws, rng).ok_or(JumpError::Unreachable { from: i, to: j })?];
        let mut steps: Vec<Option<u32>> = vec![None; s];
        steps.push(Some(b as u32));
        let mut cur = b;
        for step in (s + 1)..events {
            let rest = events - step - 1;
            let mut cand = vec![(cur, self.stay(cur) * col[rest * n + cur])];
            for (c, l) in self.rates.out(cur) {
                cand.push((c, l / self.lam_bar * col[rest * n + c]));
            }
            let w: Vec<f64> = cand.iter().map(|c| c.1).collect();
            let next = cand[pick(&w, rng).expect("backward weights are consistent")].0;
            steps.push((next != cur).then_some(next as u32));
            cur = next;
        }
        debug_assert_eq!(cur, j);
        let mut times: Vec<f64> = (0..events).map(|_| rng.random::<f64>() * t).collect();
        times.sort_by(f64::total_cmp);
        Ok(times.into_iter().zip(steps).filter_map(|(tau, v)| v.map(|v| (tau, v))).collect())
    }
}

/// Draws an index with probability proportional to `w`.
pub(crate) fn pick<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return Some(i);
        }
        u -= x;
    }
    w.iter().rposition(|&x| x > 0.0)
}

/// Total non-normalized mass of index trajectories `i -> j` in time `t`
/// with at most `jump_cap` jumps: the sum over jump counts of
/// `∏λ ∫ dτ exp(-Σ holding time × exit rate)`.
pub fn skeleton_mass(rates: &JumpRates, i: usize, j: usize, t: f64, jump_cap: usize) -> Result<f64, JumpError> {
    if t <= 0.0 {
        return Err(JumpError::NonPositiveTime(t));
    }
    let n = rates.vertex_count();
    if let Some(r) = rates.uniform_exit() {
        // With a common exit rate the time integrals factor:
        // the n-jump term is e^{-rt} t^n/n! (A^n)_{ij}.
        let mut u = vec![0.0; n];
        u[j] = 1.0;
        let mut tmp = vec![0.0; n];
        let mut total = 0.0;
        let mut coef = (-r * t).exp();
        for m in 0..=jump_cap {
            if m > 0 {
                rates.apply_rates(&u, &mut tmp);
                std::mem::swap(&mut u, &mut tmp);
                coef *= t / m as f64;
            }
            total += coef * u[i];
        }
        return Ok(total);
    }
    // Uniformization on (vertex, jumps so far) states.
    let lam = rates.max_exit();
    let cap = poisson_cap(lam * t);
    let layers = jump_cap + 1;
    let mut f = vec![0.0; n * layers];
    f[i] = 1.0;
    let mut next = vec![0.0; n * layers];
    let mut total = 0.0;
    for m in 0..=cap {
        let w = log_poisson(m, lam * t).exp();
        total += w * (0..layers).map(|l| f[l * n + j]).sum::<f64>();
        next.iter_mut().for_each(|x| *x = 0.0);
        for l in 0..layers {
            for v in 0..n {
                let x = f[l * n + v];
                if x == 0.0 {
                    continue;
                }
                next[l * n + v] += x * (1.0 - rates.exit_rate(v) / lam);
                if l + 1 < layers {
                    for (c, r) in rates.out(v) {
                        next[(l + 1) * n + c] += x * r / lam;
                    }
                }
            }
        }
        std::mem::swap(&mut f, &mut next);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn generator(rates: &JumpRates) -> DMatrix<f64> {
        let n = rates.vertex_count();
        DMatrix::from_fn(n, n, |i, j| if i == j { -rates.exit_rate(i) } else { rates.rate(i, j) })
    }

    #[test]
    fn two_vertex_masses() {
        let g = Graph::path(2);
        let lam = 0.8;
        let rates = JumpRates::uniform(&g, lam);
        let t = 1.7;
        let cap = (5.0 * lam * t) as usize + 20;
        let same = skeleton_mass(&rates, 0, 0, t, cap).unwrap();
        let diff = skeleton_mass(&rates, 0, 1, t, cap).unwrap();
        assert_abs_diff_eq!(same, (-lam * t).exp() * (lam * t).cosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(diff, (-lam * t).exp() * (lam * t).sinh(), epsilon = 1e-12);
        let zero = JumpRates::uniform(&g, 0.0);
        assert_eq!(skeleton_mass(&zero, 0, 0, t, 5).unwrap(), 1.0);
        assert_eq!(skeleton_mass(&zero, 0, 1, t, 5).unwrap(), 0.0);
    }

    #[test]
    fn general_rates_match_expm() {
        let g = Graph::path(3);
        let rates = JumpRates::from_fn(&g, |i, j| 0.3 + 0.2 * i as f64 + 0.1 * j as f64);
        assert!(rates.uniform_exit().is_none());
        let t = 1.3;
        let e = (generator(&rates) * t).exp();
        for i in 0..3 {
            for j in 0..3 {
                let m = skeleton_mass(&rates, i, j, t, 60).unwrap();
                assert_abs_diff_eq!(m, e[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn kernel_matches_expm() {
        let g = Graph::lattice_ball(crate::graph::LatticeKind::Square, 2);
        let rates = JumpRates::uniform(&g, 0.7);
        let e = (generator(&rates) * 2.5).exp();
        let k = JumpKernel::new(rates, 3.0);
        for (i, j) in [(0, 0), (0, 3), (5, 12), (12, 12)] {
            assert_abs_diff_eq!(k.transition(i, j, 2.5), e[(i, j)], epsilon = 1e-13);
            let free = if i == j { (-2.5 * k.rates().exit_rate(i)).exp() } else { 0.0 };
            assert_abs_diff_eq!(k.jump_mass(i, j, 2.5), e[(i, j)] - free, epsilon = 1e-13);
        }
    }

    #[test]
    fn conditioned_parity_and_mean() {
        let g = Graph::path(2);
        let (lam, t) = (1.0, 1.0);
        let k = JumpKernel::new(JumpRates::uniform(&g, lam), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 40_000;
        let mut total = 0usize;
        for _ in 0..draws {
            let ev = k.sample_with_jumps(0, 0, t, &mut rng).unwrap();
            assert!(ev.len().is_multiple_of(2) && !ev.is_empty());
            assert!(ev.windows(2).all(|w| w[0].0 < w[1].0));
            total += ev.len();
        }
        // Given at least one jump and return to the start, the jump count
        // is Poisson(λt) restricted to even values >= 2.
        let lt = lam * t;
        let mean = lt * lt.sinh() / (lt.cosh() - 1.0);
        let var_guess = 2.0;
        let se = (var_guess / draws as f64).sqrt();
        assert!(((total as f64 / draws as f64) - mean).abs() < 5.0 * se);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cap_convergence(lam in 0.05f64..2.0, t in 0.1f64..2.5) {
            let rates = JumpRates::uniform(&Graph::path(2), lam);
            let cap = (5.0 * lam * t).ceil() as usize + 20;
            let a = skeleton_mass(&rates, 0, 1, t, cap).unwrap();
            let b = skeleton_mass(&rates, 0, 1, t, cap + 1).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
