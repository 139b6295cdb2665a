//! Exact reference values on small surrogate models.
//!
//! A surrogate replaces the torus by finitely many single-particle states
//! ("sites"), each attached to a graph vertex. The one-particle generator
//! `L` and the diagonal energies are explicit matrices, so the grand
//! partition function is a finite trace in Fock space. The same quantity
//! is recomputed by summing the loop expansion over permutation cycles,
//! which exercises the expansion independently of the sampler.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

use crate::graph::Graph;
use crate::jumps::poisson_cap;
use crate::params::ModelParams;
use crate::quad::gauss_legendre;
use crate::torus::HeatKernel;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("surrogate needs a one-dimensional torus, got d = {0}")]
    Dimension(usize),
    #[error("the Fourier surrogate needs position-independent potentials")]
    NotTranslationInvariant,
    #[error("loop series diverges: z·spectral radius = {0}")]
    Divergent(f64),
    #[error("single-vertex quadrature needs a one-vertex graph without pair interactions")]
    Unsupported,
}

/// Finite single-particle model with diagonal interactions.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub site_vertex: Vec<usize>,
    /// One-particle generator, `(L f)(s) = Σ_t L[s,t] f(t)`.
    pub generator: DMatrix<f64>,
    pub one_body: Vec<f64>,
    /// Pair energy per unit time of particles on sites `s`, `t` (may be
    /// `+∞`); the diagonal is the energy of two particles on one site.
    pub pair: DMatrix<f64>,
}

impl SurrogateModel {
    pub fn sites(&self) -> usize {
        self.site_vertex.len()
    }

    /// Torus replaced by `m` equally spaced points per vertex. Free motion
    /// is a nearest-neighbour walk on the `m`-cycle whose rate matches the
    /// first nonzero eigenvalue of `Δ/2`; jumps land uniformly on the grid.
    pub fn grid(p: &ModelParams, g: &Graph, m: usize) -> Result<Self, OracleError> {
        if p.d != 1 {
            return Err(OracleError::Dimension(p.d));
        }
        let nv = g.vertex_count();
        let n = nv * m;
        let c = PI * PI / (1.0 - (2.0 * PI / m as f64).cos());
        let mut gen = DMatrix::zeros(n, n);
        let idx = |v: usize, a: usize| v * m + a;
        for v in 0..nv {
            for a in 0..m {
                if m > 1 {
                    gen[(idx(v, a), idx(v, (a + 1) % m))] += c;
                    gen[(idx(v, a), idx(v, (a + m - 1) % m))] += c;
                }
                for w in 0..nv {
                    if w != v && g.is_edge(v, w) {
                        for b in 0..m {
                            gen[(idx(v, a), idx(w, b))] += p.lambda0 / m as f64;
                        }
                    }
                }
            }
        }
        for s in 0..n {
            let out: f64 = (0..n).filter(|&t| t != s).map(|t| gen[(s, t)]).sum();
            gen[(s, s)] = -out;
        }
        let x = |s: usize| [(s % m) as f64 / m as f64];
        let site_vertex: Vec<usize> = (0..n).map(|s| s / m).collect();
        let one_body = (0..n).map(|s| p.potentials.u1_at(&x(s))).collect();
        let jtab: Vec<f64> = (0..=g.vertex_count()).map(|r| p.decay.value(r as u32)).collect();
        let pair = DMatrix::from_fn(n, n, |s, t| {
            let (vs, vt) = (site_vertex[s], site_vertex[t]);
            if vs == vt {
                p.potentials.u2_at(&x(s), &x(t))
            } else {
                jtab[g.dist(vs, vt) as usize] * p.potentials.v_at(&x(s), &x(t))
            }
        });
        Ok(Self { site_vertex, generator: gen, one_body, pair })
    }

    /// Plane-wave modes `|k| ≤ modes` per vertex, exact for potentials that
    /// do not depend on positions. Jumps land uniformly, so they couple
    /// only the constant modes.
    pub fn fourier(p: &ModelParams, g: &Graph, modes: usize) -> Result<Self, OracleError> {
        if p.d != 1 {
            return Err(OracleError::Dimension(p.d));
        }
        let pot = &p.potentials;
        if !pot.translation_invariant() || pot.has_hard_core() || pot.u2_range.is_some() {
            return Err(OracleError::NotTranslationInvariant);
        }
        let nv = g.vertex_count();
        let per = 2 * modes + 1;
        let n = nv * per;
        let rates = |v: usize, w: usize| if v != w && g.is_edge(v, w) { p.lambda0 } else { 0.0 };
        let exit = |v: usize| (0..nv).map(|w| rates(v, w)).sum::<f64>();
        let mut gen = DMatrix::zeros(n, n);
        for v in 0..nv {
            for j in 0..per {
                let k = j as f64 - modes as f64;
                let s = v * per + j;
                gen[(s, s)] = -(2.0 * PI * PI * k * k + exit(v));
                if j == modes {
                    for w in 0..nv {
                        gen[(s, w * per + modes)] += rates(v, w);
                    }
                }
            }
        }
        let site_vertex: Vec<usize> = (0..n).map(|s| s / per).collect();
        let u1 = if pot.u1_wave.iter().all(|&c| c == 0.0) { pot.u1 } else { 0.0 };
        let v0 = if pot.v_wave.iter().all(|&c| c == 0.0) { pot.v0 } else { 0.0 };
        let pair = DMatrix::from_fn(n, n, |s, t| {
            let (vs, vt) = (site_vertex[s], site_vertex[t]);
            if vs == vt {
                pot.u2
            } else {
                p.decay.value(g.dist(vs, vt)) * v0
            }
        });
        Ok(Self { site_vertex, generator: gen, one_body: vec![u1; n], pair })
    }

    /// Diagonal energy of an occupation vector.
    pub fn energy(&self, occ: &[usize]) -> f64 {
        let mut e = 0.0;
        for s in 0..occ.len() {
            if occ[s] == 0 {
                continue;
            }
            let ns = occ[s] as f64;
            e += self.one_body[s] * ns;
            if occ[s] > 1 {
                e += self.pair[(s, s)] * ns * (ns - 1.0) / 2.0;
            }
            for t in (s + 1)..occ.len() {
                if occ[t] > 0 {
                    e += self.pair[(s, t)] * ns * occ[t] as f64;
                }
            }
        }
        e
    }

    /// Energy of an ordered tuple of sites (distinguishable particles).
    pub fn tuple_energy(&self, tuple: &[usize]) -> f64 {
        let mut e = 0.0;
        for (i, &s) in tuple.iter().enumerate() {
            e += self.one_body[s];
            for &t in &tuple[i + 1..] {
                e += self.pair[(s, t)];
            }
        }
        e
    }

    /// One-particle operator `L - U1`.
    pub fn single_particle(&self) -> DMatrix<f64> {
        &self.generator - DMatrix::from_diagonal(&DVector::from_column_slice(&self.one_body))
    }

    /// Eigenvalues of the one-particle transfer matrix `e^{β(L - U1)}`.
    pub fn transfer_eigenvalues(&self, beta: f64) -> Vec<Complex<f64>> {
        let l = &self.single_particle();
        if (l - l.transpose()).amax() < 1e-12 {
            return l.symmetric_eigenvalues().iter().map(|e| Complex::new((beta * e).exp(), 0.0)).collect();
        }
        let t = l * beta;
        let schur = nalgebra::Schur::try_new(t.exp(), 1e-14, 100_000).expect("Schur iteration converges");
        schur.complex_eigenvalues().iter().copied().collect()
    }

    /// Spectral radius of the one-particle transfer matrix.
    pub fn transfer_radius(&self, beta: f64) -> f64 {
        self.transfer_eigenvalues(beta).iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

/// All occupation vectors over `sites` with total `n`.
pub fn occupations(sites: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(sites: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == sites - 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in (0..=left).rev() {
            cur.push(k);
            rec(sites, left - k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(sites, n, &mut Vec::with_capacity(sites), &mut out);
    out
}

/// `dΓ(L)` on the symmetric `n`-particle sector, in the occupation basis.
fn second_quantized(model: &SurrogateModel, basis: &[Vec<usize>]) -> DMatrix<f64> {
    let index: std::collections::HashMap<&[usize], usize> = basis.iter().enumerate().map(|(i, b)| (b.as_slice(), i)).collect();
    let ns = model.sites();
    let mut h = DMatrix::zeros(basis.len(), basis.len());
    let mut tmp = vec![0; ns];
    for (col, occ) in basis.iter().enumerate() {
        for t in 0..ns {
            if occ[t] == 0 {
                continue;
            }
            for s in 0..ns {
                let l = model.generator[(s, t)];
                if l == 0.0 {
                    continue;
                }
                if s == t {
                    h[(col, col)] += l * occ[t] as f64;
                } else {
                    tmp.copy_from_slice(occ);
                    tmp[t] -= 1;
                    tmp[s] += 1;
                    // Hops into infinite-energy states are projected out.
                    if let Some(&row) = index.get(tmp.as_slice()) {
                        h[(row, col)] += l * ((occ[t] * (occ[s] + 1)) as f64).sqrt();
                    }
                }
            }
        }
    }
    h
}

/// `Ξ = Σ_{N ≤ n_cap} z^N tr exp(β(dΓ(L) - E))` over finite-energy states.
/// Returns `ln Ξ`.
pub fn surrogate_xi(model: &SurrogateModel, z: f64, beta: f64, n_cap: usize) -> f64 {
    let mut xi = 1.0;
    for n in 1..=n_cap {
        let basis: Vec<Vec<usize>> = occupations(model.sites(), n).into_iter().filter(|o| model.energy(o).is_finite()).collect();
        if basis.is_empty() {
            break;
        }
        let mut a = second_quantized(model, &basis);
        for (i, o) in basis.iter().enumerate() {
            a[(i, i)] -= model.energy(o);
        }
        xi += z.powi(n as i32) * (a * beta).exp().trace();
    }
    xi.ln()
}

/// Same trace with `M` Trotter factors per unit `β`:
/// `tr (e^{δ dΓ(L)} e^{-δE})^M` on the full sector, with infinite
/// energies acting as a projection. This is what the time-sliced path
/// measure computes. Returns `ln Ξ`.
pub fn trotter_xi(model: &SurrogateModel, z: f64, beta: f64, m: usize, n_cap: usize) -> f64 {
    let dt = beta / m as f64;
    let mut xi = 1.0;
    for n in 1..=n_cap {
        let basis = occupations(model.sites(), n);
        let free = (second_quantized(model, &basis) * dt).exp();
        let weights = DVector::from_iterator(basis.len(), basis.iter().map(|o| (-dt * model.energy(o)).exp()));
        let step = free * DMatrix::from_diagonal(&weights);
        let mut acc = DMatrix::identity(basis.len(), basis.len());
        for _ in 0..m {
            acc = &acc * &step;
        }
        xi += z.powi(n as i32) * acc.trace();
    }
    xi.ln()
}

/// Non-interacting `ln Ξ = -Σ_i ln(1 - z μ_i)` over eigenvalues `μ_i` of
/// `T = e^{β(L - U1)}`, i.e. the uncapped sum `Σ_k z^k/k tr T^k`.
/// Pair energies are ignored.
pub fn noninteracting_log_xi(model: &SurrogateModel, z: f64, beta: f64) -> Result<f64, OracleError> {
    let eig = model.transfer_eigenvalues(beta);
    let radius = eig.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if z * radius >= 1.0 {
        return Err(OracleError::Divergent(z * radius));
    }
    Ok(-eig.iter().map(|mu| (Complex::new(1.0, 0.0) - mu * z).ln().re).sum::<f64>())
}

/// Result of the explicit loop expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct PathExpansion {
    pub log_xi: f64,
    /// Contribution of each particle number `N = 0..=n_cap` to `Ξ`.
    pub by_n: Vec<f64>,
    pub jump_cap: usize,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn longest_cycle(perm: &[usize]) -> usize {
    let mut seen = vec![false; perm.len()];
    let mut best = 0;
    for s in 0..perm.len() {
        let mut len = 0;
        let mut c = s;
        while !seen[c] {
            seen[c] = true;
            c = perm[c];
            len += 1;
        }
        best = best.max(len);
    }
    best
}

/// `Ξ` as the loop expansion `Σ_N z^N/N! Σ_σ tr(P_σ e^{βA_N})` over
/// distinguishable particles, keeping permutations whose cycles are at
/// most `k_cap` long. The semigroup is expanded by uniformization, i.e. a
/// sum over discrete jump paths, truncated at a Poisson tail below 1e-16.
pub fn surrogate_path_expansion(model: &SurrogateModel, z: f64, beta: f64, n_cap: usize, k_cap: usize) -> PathExpansion {
    let ns = model.sites();
    let mut by_n = vec![1.0];
    let mut jump_cap = 0;
    for n in 1..=n_cap {
        let mut tuples: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..n {
            tuples = tuples
                .into_iter()
                .flat_map(|t| {
                    (0..ns).map(move |s| {
                        let mut u = t.clone();
                        u.push(s);
                        u
                    })
                })
                .collect();
        }
        tuples.retain(|t| model.tuple_energy(t).is_finite());
        if tuples.is_empty() {
            by_n.push(0.0);
            continue;
        }
        let index: std::collections::HashMap<Vec<usize>, usize> = tuples.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        let dim = tuples.len();
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        for (col, t) in tuples.iter().enumerate() {
            a[(col, col)] -= model.tuple_energy(t);
            for i in 0..n {
                for s in 0..ns {
                    let l = model.generator[(s, t[i])];
                    if l == 0.0 {
                        continue;
                    }
                    let mut u = t.clone();
                    u[i] = s;
                    if let Some(&row) = index.get(&u) {
                        a[(row, col)] += l;
                    }
                }
            }
        }
        let q = (0..dim).map(|i| -a[(i, i)]).fold(1e-12, f64::max);
        let mu = q * beta;
        let cap = poisson_cap(mu);
        jump_cap = jump_cap.max(cap);
        let step = DMatrix::identity(dim, dim) + &a / q;
        let mut power = DMatrix::identity(dim, dim);
        let mut semigroup = DMatrix::zeros(dim, dim);
        let mut w = (-mu).exp();
        for j in 0..=cap {
            if j > 0 {
                power = &power * &step;
                w *= mu / j as f64;
            }
            semigroup += &power * w;
        }
        let mut sum = 0.0;
        let mut fact = 1.0;
        for perm in permutations(n) {
            if longest_cycle(&perm) > k_cap {
                continue;
            }
            for (col, t) in tuples.iter().enumerate() {
                let u: Vec<usize> = (0..n).map(|i| t[perm[i]]).collect();
                if let Some(&row) = index.get(&u) {
                    sum += semigroup[(row, col)];
                }
            }
        }
        for k in 1..=n {
            fact *= k as f64;
        }
        by_n.push(z.powi(n as i32) * sum / fact);
    }
    PathExpansion { log_xi: by_n.iter().sum::<f64>().ln(), by_n, jump_cap }
}

/// Single-vertex transfer operator from Gauss–Legendre Nyström
/// discretization of one slice `p^δ(x,y) e^{-δ U1(y)}`.
#[derive(Debug, Clone)]
pub struct SingleVertex {
    /// `z^k/k · tr T^k`, where `T` is the one-period transfer operator.
    pub loop_weights: Vec<f64>,
    /// `Σ_k loop_weights[k]`: `ln Ξ` of the non-interacting gas.
    pub log_xi: f64,
}

/// Loop weights on a single vertex without jumps or pair interactions,
/// from a `nodes`-point Nyström rule, for `k = 1..=k_cap`.
pub fn singlevertex_quadrature(p: &ModelParams, g: &Graph, nodes: usize, k_cap: usize) -> Result<SingleVertex, OracleError> {
    if p.d != 1 {
        return Err(OracleError::Dimension(p.d));
    }
    let pot = &p.potentials;
    if g.vertex_count() != 1 || pot.has_hard_core() || pot.u2 != 0.0 {
        return Err(OracleError::Unsupported);
    }
    let (x, w) = gauss_legendre(nodes, 0.0, 1.0);
    let hk = HeatKernel::new(1);
    let dt = p.delta();
    let k1 = DMatrix::from_fn(nodes, nodes, |a, b| {
        w[b] * hk.eval_slices(dt, &[x[a]], &[x[b]]) * (-dt * pot.u1_at(&[x[b]])).exp()
    });
    let mut period = DMatrix::identity(nodes, nodes);
    for _ in 0..p.m_tau {
        period = &period * &k1;
    }
    let mut power = DMatrix::identity(nodes, nodes);
    let mut loop_weights = Vec::with_capacity(k_cap);
    for k in 1..=k_cap {
        power = &power * &period;
        loop_weights.push(p.z.powi(k as i32) / k as f64 * power.trace());
    }
    let log_xi = loop_weights.iter().sum();
    Ok(SingleVertex { loop_weights, log_xi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DecayProfile;
    use crate::params::Potentials;
    use approx::assert_abs_diff_eq;

    fn params(pot: Potentials, lambda0: f64) -> ModelParams {
        ModelParams { d: 1, beta: 1.0, z: 0.2, potentials: pot, lambda0, decay: DecayProfile::Nearest { amp: 0.7 }, m_tau: 8, k_max: 6 }
    }

    #[test]
    fn occupation_counts() {
        assert_eq!(occupations(3, 2).len(), 6);
        assert_eq!(occupations(4, 3).len(), 20);
        assert!(occupations(2, 3).iter().all(|o| o.iter().sum::<usize>() == 3));
    }

    #[test]
    fn grid_generator_is_conservative() {
        let p = params(Potentials::default(), 0.4);
        let m = SurrogateModel::grid(&p, &Graph::path(3), 4).unwrap();
        for s in 0..m.sites() {
            assert_abs_diff_eq!(m.generator.row(s).sum(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fock_trace_matches_loop_expansion() {
        let pot = Potentials { u1: 0.3, u1_wave: vec![1.0], v0: 0.4, v_wave: vec![1.0], rho_hc: 0.6, ..Default::default() };
        let p = params(pot, 0.7);
        let m = SurrogateModel::grid(&p, &Graph::path(2), 2).unwrap();
        let a = surrogate_xi(&m, 0.3, 1.0, 4);
        let b = surrogate_path_expansion(&m, 0.3, 1.0, 4, 20);
        assert_abs_diff_eq!(a, b.log_xi, epsilon = 1e-10);
    }

    #[test]
    fn noninteracting_sum_matches_fock_trace() {
        let p = params(Potentials { u1: 0.5, u1_wave: vec![1.0], ..Default::default() }, 0.3);
        let m = SurrogateModel::grid(&p, &Graph::path(1), 3).unwrap();
        let exact = noninteracting_log_xi(&m, 0.2, 1.0).unwrap();
        assert_abs_diff_eq!(surrogate_xi(&m, 0.2, 1.0, 16), exact, epsilon = 1e-9);
        assert!(matches!(noninteracting_log_xi(&m, 2.0, 1.0), Err(OracleError::Divergent(_))));
    }

    #[test]
    fn trotter_limit_approaches_continuous_trace() {
        let pot = Potentials { u1: 0.4, v0: 0.3, u2: 0.2, ..Default::default() };
        let p = params(pot, 0.5);
        let m = SurrogateModel::fourier(&p, &Graph::path(2), 1).unwrap();
        let exact = surrogate_xi(&m, 0.25, 1.0, 5);
        let coarse = (trotter_xi(&m, 0.25, 1.0, 4, 5) - exact).abs();
        let fine = (trotter_xi(&m, 0.25, 1.0, 64, 5) - exact).abs();
        assert!(fine < coarse / 10.0, "{fine} vs {coarse}");
    }

    #[test]
    fn single_vertex_free_weights_are_heat_traces() {
        let p = params(Potentials::default(), 0.0);
        let sv = singlevertex_quadrature(&p, &Graph::path(1), 64, 4).unwrap();
        let hk = HeatKernel::new(1);
        for (k, w) in sv.loop_weights.iter().enumerate() {
            let k = (k + 1) as f64;
            assert_abs_diff_eq!(*w, 0.2f64.powf(k) / k * hk.diagonal(k), epsilon = 1e-10);
        }
    }
}
