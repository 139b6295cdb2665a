//! Tuned symmetry actions: profile functions, the quadratic form `Υ`,
//! second-difference and convexity checks, the jump tail bound, and the
//! finite-volume invariance experiment.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::energy::{Boundary, EnergyModel};
use crate::gibbs::{chain_rng, run_chains, FrozenTrack, GibbsError, GibbsSampler, RunConfig, SamplerSpec};
use crate::graph::{DecayProfile, Graph, LatticeKind};
use crate::loops::{Loop, LoopConfiguration, OpenPath, Reference, TrackRef};
use crate::params::{ModelParams, Potentials};
use crate::quad::gauss_legendre;
use crate::stats::batch_means;
use crate::torus::GroupElement;

#[derive(Debug, Error, PartialEq)]
pub enum MwError {
    #[error("Q(b) needs b > 0, got {0}")]
    NonPositive(f64),
    #[error("profile radius n = {n} must exceed the plateau radius {rbar}")]
    Radius { n: usize, rbar: usize },
    #[error("Υ needs a hard core to bound the occupation")]
    NoHardCore,
    #[error("the coupling needs finite support on large graphs")]
    InfiniteRange,
    #[error("tuned actions need translation-invariant potentials")]
    NotInvariant,
}

/// `ζ(u) = 1` for `u ≤ 2`, `1/(u ln u)` beyond.
pub fn zeta(u: f64) -> f64 {
    if u <= 2.0 {
        1.0
    } else {
        1.0 / (u * u.ln())
    }
}

/// `Q(b) = ∫_0^b ζ`, closed form.
pub fn q_profile(b: f64) -> Result<f64, MwError> {
    if !(b > 0.0) {
        return Err(MwError::NonPositive(b));
    }
    Ok(q_unchecked(b))
}

fn q_unchecked(b: f64) -> f64 {
    if b <= 2.0 {
        b
    } else {
        2.0 + b.ln().ln() - 2f64.ln().ln()
    }
}

/// `Q(b)` by Gauss–Legendre quadrature of `ζ` on geometric panels, as a
/// cross-check of the closed form.
pub fn q_profile_quadrature(b: f64, nodes: usize) -> Result<f64, MwError> {
    if !(b > 0.0) {
        return Err(MwError::NonPositive(b));
    }
    if b <= 2.0 {
        return Ok(b);
    }
    let mut total = 2.0;
    let mut lo = 2.0;
    while lo < b {
        let hi = (lo * 2.0).min(b);
        let (x, w) = gauss_legendre(nodes, lo, hi);
        total += x.iter().zip(&w).map(|(u, w)| w * zeta(*u)).sum::<f64>();
        lo = hi;
    }
    Ok(total)
}

/// `ϑ(a,b) = 1` for `a ≤ 0`, `(Q(b) - Q(a))/Q(b)` for `0 < a < b`, else 0.
pub fn vartheta(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        1.0
    } else if a < b {
        (q_unchecked(b) - q_unchecked(a)) / q_unchecked(b)
    } else {
        0.0
    }
}

/// Plateau radius `r̄(n) = ⌈ln(1+n)⌉`.
pub fn rbar(n: usize) -> usize {
    ((1.0 + n as f64).ln()).ceil() as usize
}

/// Vertex weights `v(n,j)` of the tuned action around the graph origin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningProfile {
    pub n: usize,
    pub rbar: usize,
    pub origin: usize,
    pub dist: Vec<u32>,
    pub v: Vec<f64>,
    /// `Q(n - r̄(n))`.
    pub q: f64,
}

impl TuningProfile {
    pub fn weight_at_distance(&self, d: u32) -> f64 {
        profile_value(d, self.n, self.rbar)
    }
}

fn profile_value(d: u32, n: usize, rbar: usize) -> f64 {
    if d as usize <= rbar {
        1.0
    } else {
        vartheta(d as f64 - rbar as f64, (n - rbar) as f64)
    }
}

pub fn build_profile(g: &Graph, n: usize) -> Result<TuningProfile, MwError> {
    let rb = rbar(n);
    if rb >= n {
        return Err(MwError::Radius { n, rbar: rb });
    }
    let o = g.origin();
    let dist = g.bfs_row(o);
    let v = dist.iter().map(|&d| profile_value(d, n, rb)).collect();
    Ok(TuningProfile { n, rbar: rb, origin: o, dist, v, q: q_unchecked((n - rb) as f64) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// `v(j) - v(j') ≤ d(j,j') ζ(d(j,o) - r̄) / Q(n - r̄)` for the pair
/// ordered so that `d(j,o) ≤ d(j',o)`; `d_pair` is `d(j,j')`.
pub fn lipschitz_step_bound(profile: &TuningProfile, j: usize, j2: usize, d_pair: u32) -> LipschitzCheck {
    let (a, b) = if profile.dist[j] <= profile.dist[j2] { (j, j2) } else { (j2, j) };
    let lhs = profile.v[a] - profile.v[b];
    let u = profile.dist[a] as f64 - profile.rbar as f64;
    let rhs = d_pair as f64 * zeta(u) / profile.q;
    LipschitzCheck { lhs, rhs, ok: lhs >= -1e-12 && lhs <= rhs + 1e-12 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzScan {
    pub pairs: u64,
    pub violations: u64,
    /// Largest `lhs - rhs` seen (negative when every pair holds strictly).
    pub worst_excess: f64,
}

/// Exhaustive check over all unordered vertex pairs.
pub fn lipschitz_scan(g: &Graph, profile: &TuningProfile) -> LipschitzScan {
    let n = g.vertex_count();
    (0..n)
        .into_par_iter()
        .map(|j| {
            let row = g.bfs_row(j);
            let mut s = LipschitzScan { pairs: 0, violations: 0, worst_excess: f64::NEG_INFINITY };
            for j2 in (j + 1)..n {
                let c = lipschitz_step_bound(profile, j, j2, row[j2]);
                s.pairs += 1;
                s.violations += u64::from(!c.ok);
                s.worst_excess = s.worst_excess.max(c.lhs - c.rhs);
            }
            s
        })
        .reduce(
            || LipschitzScan { pairs: 0, violations: 0, worst_excess: f64::NEG_INFINITY },
            |a, b| LipschitzScan {
                pairs: a.pairs + b.pairs,
                violations: a.violations + b.violations,
                worst_excess: a.worst_excess.max(b.worst_excess),
            },
        )
}

/// Vertices within distance `r` of `j`, with their distances.
fn local_ball(g: &Graph, j: usize, r: u32) -> Vec<(usize, u32)> {
    let mut seen = std::collections::HashMap::new();
    let mut queue = VecDeque::new();
    seen.insert(j, 0u32);
    queue.push_back(j);
    let mut out = Vec::new();
    while let Some(a) = queue.pop_front() {
        let da = seen[&a];
        out.push((a, da));
        if da == r {
            continue;
        }
        for &b in g.neighbors(a) {
            let b = b as usize;
            if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(b) {
                e.insert(da + 1);
                queue.push_back(b);
            }
        }
    }
    out
}

/// `Υ` and the chain of majorants obtained from the Lipschitz step bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpsilonReport {
    pub n: usize,
    pub rbar: usize,
    pub q: f64,
    /// `βκ²|θ|² Σ_{j∈Λ(n), j'} J(d(j,j')) |v(j) - v(j')|²` over ordered pairs.
    pub upsilon: f64,
    /// `3βκ²|θ|² Σ_{d(j,o) ≤ d(j',o)} J |Δv|²`.
    pub form2: f64,
    /// `3βκ²|θ|²/Q² Σ_{d(j,o) ≤ d(j',o)} J d(j,j')² ζ(d(j,o) - r̄)²`.
    pub form3: f64,
    /// `3βκ²|θ|²/Q² · J* · Σ_{j∈Λ(n+r0)} ζ(d(j,o) - r̄)²`.
    pub form4: f64,
    pub jstar: f64,
}

impl UpsilonReport {
    pub fn chain_holds(&self) -> bool {
        let tol = 1e-12 * self.form4.abs().max(1.0);
        self.upsilon <= self.form2 + tol && self.form2 <= self.form3 + tol && self.form3 <= self.form4 + tol
    }
}

/// Evaluates `Υ` for a coupling of finite support `r0`; every vertex of
/// `Λ(n + r0)` must be present in `g`.
pub fn upsilon(p: &ModelParams, g: &Graph, profile: &TuningProfile, theta_norm: f64) -> Result<UpsilonReport, MwError> {
    let kappa = p.kappa().ok_or(MwError::NoHardCore)? as f64;
    let r0 = match &p.decay {
        d if d.is_zero() => 0,
        d => d.support_radius().ok_or(MwError::InfiniteRange)?,
    };
    let pre = p.beta * kappa * kappa * theta_norm * theta_norm;
    let n = profile.n as u32;
    let rb = profile.rbar as f64;
    let q = profile.q;
    let verts: Vec<usize> = (0..g.vertex_count()).filter(|&j| profile.dist[j] <= n + r0).collect();
    let sums = verts
        .par_iter()
        .map(|&j| {
            let dj = profile.dist[j];
            let mut ups = 0.0;
            let mut s2 = 0.0;
            let mut s3 = 0.0;
            let mut js = 0.0;
            let zj = zeta(dj as f64 - rb);
            if r0 > 0 {
                for (j2, d) in local_ball(g, j, r0) {
                    let w = p.decay.value(d);
                    if w == 0.0 || j2 == j {
                        continue;
                    }
                    js += w * (d as f64).powi(2);
                    let dv = profile.v[j] - profile.v[j2];
                    if dj <= n {
                        ups += w * dv * dv;
                    }
                    if dj <= profile.dist[j2] {
                        s2 += w * dv * dv;
                        s3 += w * (d as f64).powi(2) * zj * zj;
                    }
                }
            }
            (ups, s2, s3, zj * zj, js)
        })
        .reduce(|| (0.0, 0.0, 0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3, a.4.max(b.4)));
    let (ups, s2, s3, z2, jstar) = sums;
    Ok(UpsilonReport {
        n: profile.n,
        rbar: profile.rbar,
        q,
        upsilon: pre * ups,
        form2: 3.0 * pre * s2,
        form3: 3.0 * pre * s3 / (q * q),
        form4: 3.0 * pre * jstar * z2 / (q * q),
        jstar,
    })
}

/// Translates every section of a track by `s · v(vertex)` times the
/// translation of `g`.
fn tune_positions(profile: &TuningProfile, g: &GroupElement, vertex: &[u32], pos: &mut [f64], d: usize, sign: f64) {
    for (s, &v) in vertex.iter().enumerate() {
        let w = profile.v[v as usize];
        if w != 0.0 {
            g.apply_scaled_in_place(&mut pos[s * d..(s + 1) * d], sign * w);
        }
    }
}

pub fn tune_loop(profile: &TuningProfile, g: &GroupElement, l: &Loop, sign: f64) -> Loop {
    let mut out = l.clone();
    tune_positions(profile, g, &l.vertex, &mut out.pos, l.d, sign);
    out
}

pub fn tune_path(profile: &TuningProfile, g: &GroupElement, p: &OpenPath, sign: f64) -> OpenPath {
    let mut out = p.clone();
    tune_positions(profile, g, &p.vertex, &mut out.pos, p.d, sign);
    out
}

pub fn tune_frozen(profile: &TuningProfile, g: &GroupElement, f: &FrozenTrack, sign: f64) -> FrozenTrack {
    let mut out = f.clone();
    tune_positions(profile, g, &f.vertex, &mut out.pos, f.d, sign);
    out
}

pub fn tune_boundary(profile: &TuningProfile, g: &GroupElement, b: &Boundary, sign: f64) -> Boundary {
    let points = b
        .points
        .iter()
        .map(|(v, x)| {
            let mut x = x.clone();
            let d = x.len();
            tune_positions(profile, g, &[*v], &mut x, d, sign);
            (*v, x)
        })
        .collect();
    Boundary { points }
}

/// The tuned action `g^{(n)}` on a loop configuration: each section moves
/// by `θ v(n, j)` where `j` is its current vertex. Skeletons are unchanged.
pub fn apply_tuned_action(profile: &TuningProfile, g: &GroupElement, c: &LoopConfiguration) -> LoopConfiguration {
    LoopConfiguration { m: c.m, d: c.d, loops: c.loops.iter().map(|l| tune_loop(profile, g, l, 1.0)).collect() }
}

/// Fixed tracks and boundary points around a configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Environment {
    pub frozen: Vec<FrozenTrack>,
    pub boundary: Boundary,
}

impl Environment {
    fn tuned(&self, profile: &TuningProfile, g: &GroupElement, sign: f64) -> Self {
        Self {
            frozen: self.frozen.iter().map(|f| tune_frozen(profile, g, f, sign)).collect(),
            boundary: tune_boundary(profile, g, &self.boundary, sign),
        }
    }
}

/// `h(c | env)`: loop energies, their interaction with the frozen tracks,
/// the frozen tracks' own energy, and the boundary term.
pub fn configuration_energy(p: &ModelParams, g: &Graph, c: &LoopConfiguration, env: &Environment) -> f64 {
    let em = EnergyModel::new(p, g);
    let mut tracks: Vec<TrackRef<'_>> = c.loops.iter().map(Loop::track).collect();
    tracks.extend(env.frozen.iter().map(FrozenTrack::track));
    em.total(&tracks, &env.boundary).total
}

/// `C_fit = max |V(w+e) + V(w-e) - 2V(w)| / |e|²` over a grid of
/// separations `w` and small shifts `e` along the wave vector. Zero for
/// constant `V`.
pub fn calibrate_c_fit(pot: &Potentials, d: usize, grid: usize) -> f64 {
    if pot.v0 == 0.0 || pot.v_wave.iter().all(|&c| c == 0.0) {
        return 0.0;
    }
    let k = &pot.v_wave;
    let kn = k.iter().map(|c| c * c).sum::<f64>().sqrt();
    let zero = vec![0.0; d];
    let mut best: f64 = 0.0;
    for a in 0..grid {
        let w: Vec<f64> = (0..d).map(|c| if c == 0 { a as f64 / grid as f64 } else { 0.0 }).collect();
        for b in 1..=grid {
            let t = 0.25 * b as f64 / grid as f64;
            let e: Vec<f64> = k.iter().map(|c| t * c / kn).collect();
            let plus: Vec<f64> = w.iter().zip(&e).map(|(x, y)| x + y).collect();
            let minus: Vec<f64> = w.iter().zip(&e).map(|(x, y)| x - y).collect();
            let sd = pot.v_at(&plus, &zero) + pot.v_at(&minus, &zero) - 2.0 * pot.v_at(&w, &zero);
            best = best.max(sd.abs() / (t * t));
        }
    }
    best
}

/// Constants of the second-difference bound `C_fit · Υ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TuningBound {
    pub c_fit: f64,
    pub upsilon: f64,
}

impl TuningBound {
    pub fn value(&self) -> f64 {
        self.c_fit * self.upsilon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecondDifference {
    pub h: f64,
    pub h_plus: f64,
    pub h_minus: f64,
    pub delta: f64,
    pub bound: f64,
    pub ok: bool,
}

/// `h(gΩ) + h(g⁻¹Ω) - 2h(Ω)` against `C_fit Υ`.
#[allow(clippy::too_many_arguments)]
pub fn second_difference_check(
    p: &ModelParams,
    g: &Graph,
    profile: &TuningProfile,
    theta: &GroupElement,
    c: &LoopConfiguration,
    env: &Environment,
    bound: &TuningBound,
) -> SecondDifference {
    let h = configuration_energy(p, g, c, env);
    let plus = apply_tuned_action(profile, theta, c);
    let minus = LoopConfiguration { m: c.m, d: c.d, loops: c.loops.iter().map(|l| tune_loop(profile, theta, l, -1.0)).collect() };
    let h_plus = configuration_energy(p, g, &plus, &env.tuned(profile, theta, 1.0));
    let h_minus = configuration_energy(p, g, &minus, &env.tuned(profile, theta, -1.0));
    let delta = h_plus + h_minus - 2.0 * h;
    let b = bound.value();
    SecondDifference { h, h_plus, h_minus, delta, bound: b, ok: delta <= b + 1e-12 * (1.0 + h.abs()) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvexityCheck {
    /// `ln[(a/2) e^{-h(gΩ)} + (a/2) e^{-h(g⁻¹Ω)}]`.
    pub log_lhs: f64,
    /// `-h(Ω)`.
    pub log_rhs: f64,
    /// `a e^{-C_fit Υ / 2}`; the inequality is guaranteed when above 1.
    pub guarantee: f64,
    pub ok: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn convexity_inequality_check(
    p: &ModelParams,
    g: &Graph,
    profile: &TuningProfile,
    theta: &GroupElement,
    a: f64,
    c: &LoopConfiguration,
    env: &Environment,
    bound: &TuningBound,
) -> ConvexityCheck {
    let sd = second_difference_check(p, g, profile, theta, c, env, bound);
    let (x, y) = (-sd.h_plus, -sd.h_minus);
    let m = x.max(y);
    let log_lhs = (a / 2.0).ln() + m + ((x - m).exp() + (y - m).exp()).ln();
    let log_rhs = -sd.h;
    let guarantee = a * (-bound.value() / 2.0).exp();
    ConvexityCheck { log_lhs, log_rhs, guarantee, ok: log_lhs >= log_rhs - 1e-12 * (1.0 + log_rhs.abs()) }
}

/// A random finite-energy configuration: `loops` single-vertex loops of
/// length 1 or 2 placed uniformly on the ball of radius `radius`, built
/// without jumps and with hard-core rejection.
pub fn sample_test_configuration<R: Rng + ?Sized>(
    p: &ModelParams,
    g: &Graph,
    radius: u32,
    loops: usize,
    rng: &mut R,
) -> LoopConfiguration {
    let still = ModelParams { lambda0: 0.0, k_max: p.k_max.max(2), ..p.clone() };
    let reference = Reference::new(&still, g);
    let em = EnergyModel::new(p, g);
    let sites = g.ball(g.origin(), radius);
    let mut out: Vec<Loop> = Vec::with_capacity(loops);
    let mut attempts = 0;
    while out.len() < loops && attempts < 100 * loops {
        attempts += 1;
        let v = sites[rng.random_range(0..sites.len())];
        let k = rng.random_range(1..=2);
        let x: Vec<f64> = (0..p.d).map(|_| rng.random()).collect();
        let (l, _) = reference.sample_loop(&x, v, k, rng).expect("a loop at a fixed vertex always exists");
        let mut e = em.self_energy(l.track()).total;
        for o in &out {
            e += em.pair_energy(l.track(), o.track()).total;
        }
        if e.is_finite() {
            out.push(l);
        }
    }
    LoopConfiguration { m: p.m_tau, d: p.d, loops: out }
}

/// One row of the tail-bound experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailRow {
    pub n: usize,
    pub rbar: usize,
    pub draws: u64,
    pub escapes: u64,
    pub frequency: f64,
    pub std_error: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    /// Fitted constant in `C / (r̄ + 1)!`.
    pub c: f64,
    pub rows: Vec<TailRow>,
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Escape frequency of length-`β` paths pinned at the origin beyond the
/// plateau `r̄(n)`, against `C/(r̄(n)+1)!` with `C` fitted (upper 3σ) at
/// the first `n`. The square lattice is truncated at radius
/// `min(n, r̄ + 12)`, far beyond any observed excursion.
pub fn tail_probability_bound(p: &ModelParams, ns: &[usize], draws: u64, seed: u64) -> TailReport {
    let chunks = 64u64;
    let mut rows = Vec::with_capacity(ns.len());
    for (idx, &n) in ns.iter().enumerate() {
        let rb = rbar(n);
        let g = Graph::lattice_ball(LatticeKind::Square, (rb + 12).min(n));
        let params = ModelParams { k_max: 1, ..p.clone() };
        let reference = Reference::new(&params, &g);
        let o = g.origin();
        let escapes: u64 = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = chain_rng(seed.wrapping_add(idx as u64), c);
                let per = draws / chunks + u64::from(c < draws % chunks);
                let mut hits = 0;
                for _ in 0..per {
                    let x = [rng.random::<f64>()];
                    let (_, sk) = reference.sample_open_path(&x, o, &x, o, 1, &mut rng).expect("loop at the origin");
                    hits += u64::from(sk.max_distance(&g, o) as usize > rb);
                }
                hits
            })
            .sum();
        let f = escapes as f64 / draws as f64;
        let se = (f * (1.0 - f) / draws as f64).sqrt();
        rows.push(TailRow { n, rbar: rb, draws, escapes, frequency: f, std_error: se, bound: 0.0, ok: true });
    }
    let c = rows.first().map_or(0.0, |r| (r.frequency + 3.0 * r.std_error) * factorial(r.rbar + 1));
    for r in &mut rows {
        r.bound = c / factorial(r.rbar + 1);
        r.ok = r.frequency - 3.0 * r.std_error <= r.bound;
    }
    TailReport { c, rows }
}

/// Ratios `q(gΩ̄)/q(Ω̄)` and `q(g⁻¹Ω̄)/q(Ω̄)` at one boundary distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvarianceRow {
    pub n: usize,
    pub ratio_plus: f64,
    pub se_plus: f64,
    pub ratio_minus: f64,
    pub se_minus: f64,
}

impl InvarianceRow {
    /// Mean deviation of the two ratios from 1.
    pub fn deviation(&self) -> f64 {
        ((self.ratio_plus - 1.0).abs() + (self.ratio_minus - 1.0).abs()) / 2.0
    }

    pub fn deviation_se(&self) -> f64 {
        self.se_plus.hypot(self.se_minus) / 2.0
    }
}

/// The fixed open path at the origin used by [`invariance_test`]: the first
/// reference draw of length `β` from `(0.1, o)` to `(0.3, o)` that never
/// leaves `o`.
pub fn invariance_path(p: &ModelParams, g: &Graph, seed: u64) -> OpenPath {
    let reference = Reference::new(p, g);
    let mut rng = chain_rng(seed, 0);
    let o = g.origin();
    loop {
        let (path, sk) = reference.sample_open_path(&[0.1], o, &[0.3], o, 1, &mut rng).expect("path at the origin");
        if sk.jumps() == 0 {
            return path;
        }
    }
}

/// Conditional density ratios of the origin path and its translates by
/// `g^{±1}` given loops in `Λ = Λ(n-1)` on the square lattice, with
/// boundary particles at `x̄ = 0.5` on the sphere of radius `n` when
/// `with_boundary`. Loops carry no β-section at the origin, which is the
/// law the conditional density averages over.
pub fn invariance_test(
    p: &ModelParams,
    ns: &[usize],
    theta: &GroupElement,
    with_boundary: bool,
    cfg: &RunConfig,
) -> Result<Vec<InvarianceRow>, GibbsError> {
    if !p.potentials.translation_invariant() {
        return Err(GibbsError::NoConvergence("invariance test needs translation-invariant potentials".into()));
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let g = Graph::lattice_ball(LatticeKind::Square, n);
        let o = g.origin();
        let path = invariance_path(p, &g, cfg.seed);
        let shifted = |sign: f64| {
            let mut q = path.clone();
            for x in q.pos.chunks_mut(p.d) {
                theta.apply_scaled_in_place(x, sign);
            }
            q
        };
        let paths = [shifted(1.0), path.clone(), shifted(-1.0)];
        let boundary = if with_boundary {
            Boundary { points: g.sphere(o, n as u32).iter().map(|&v| (v as u32, vec![0.5; p.d])).collect() }
        } else {
            Boundary::default()
        };
        let em = EnergyModel::new(p, &g);
        let h0: Vec<f64> = paths
            .iter()
            .map(|q| em.self_energy(q.track()).total + em.boundary_energy(q.track(), &boundary).total)
            .collect();
        let volume: Vec<bool> = (0..g.vertex_count()).map(|v| (g.dist(o, v) as usize) < n).collect();
        let base: Vec<bool> = (0..g.vertex_count()).map(|v| volume[v] && v != o).collect();
        let prefactor = |i: usize| (h0[1] - h0[i]).exp();
        if !base.iter().any(|&b| b) {
            rows.push(InvarianceRow { n, ratio_plus: prefactor(0), se_plus: 0.0, ratio_minus: prefactor(2), se_minus: 0.0 });
            continue;
        }
        let mut avoid = vec![false; g.vertex_count()];
        avoid[o] = true;
        let spec = SamplerSpec {
            container: volume.clone(),
            base: volume,
            avoid,
            frozen: Vec::new(),
            boundary: boundary.clone(),
            window: (p.m_tau / 2).max(1),
            weights: Default::default(),
        };
        let reference = Reference::new(p, &g);
        let out = run_chains(
            cfg,
            3,
            |rng| GibbsSampler::new(p, &g, &reference, spec.clone(), rng),
            |s, buf| {
                let loops: Vec<TrackRef<'_>> = s.state.iter().map(Loop::track).collect();
                for q in &paths {
                    buf.push((-s.energy_model().cross(&[q.track()], &loops).total).exp());
                }
            },
        )?;
        let mean = |i: usize| batch_means(&out.series[i]).mean;
        let a0 = mean(1);
        let ratio = |i: usize| -> (f64, f64) {
            let r = mean(i) / a0;
            let resid: Vec<Vec<f64>> = out.series[i]
                .iter()
                .zip(&out.series[1])
                .map(|(x, y)| x.iter().zip(y).map(|(a, b)| a - r * b).collect())
                .collect();
            let se = batch_means(&resid).std_error / a0;
            (prefactor(i) * r, prefactor(i) * se)
        };
        let (rp, sp) = ratio(0);
        let (rm, sm) = ratio(2);
        rows.push(InvarianceRow { n, ratio_plus: rp, se_plus: sp, ratio_minus: rm, se_minus: sm });
    }
    Ok(rows)
}

/// Parameters of the tuned-action experiments: translation-invariant
/// potentials, nearest-neighbour coupling, and a hard core with `κ = 1`.
pub fn default_tuning_params(v0: f64) -> ModelParams {
    ModelParams {
        d: 1,
        beta: 1.0,
        z: 0.01,
        potentials: Potentials { u1: 0.3, u2: 0.2, v0, v_wave: vec![1.0], rho_hc: 0.6, ..Default::default() },
        lambda0: 0.0,
        decay: DecayProfile::Nearest { amp: 1.0 },
        m_tau: 8,
        k_max: 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn profile_function_examples() {
        assert_eq!(zeta(1.0), 1.0);
        assert_eq!(zeta(2.0), 1.0);
        let e2 = std::f64::consts::E.powi(2);
        assert_abs_diff_eq!(zeta(e2), 1.0 / (2.0 * e2), epsilon = 1e-12);
        assert_eq!(q_profile(2.0).unwrap(), 2.0);
        assert_abs_diff_eq!(q_profile(10.0).unwrap(), 2.0 + 10f64.ln().ln() - 2f64.ln().ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(q_profile(10.0).unwrap(), 3.2005, epsilon = 1e-4);
        assert!(q_profile(0.0).is_err());
        assert_eq!(vartheta(-1.0, 5.0), 1.0);
        assert_eq!(vartheta(3.0, 3.0), 0.0);
        assert_abs_diff_eq!(vartheta(1.0, 2.0), 0.5, epsilon = 1e-15);
        assert_eq!(rbar(20), 4);
        assert_eq!((rbar(8), rbar(55), rbar(403)), (3, 5, 7));
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for b in [3.0, 10.0, 1e3, 1e6, 1e9] {
            assert_abs_diff_eq!(q_profile(b).unwrap(), q_profile_quadrature(b, 24).unwrap(), epsilon = 1e-10);
        }
    }

    #[test]
    fn q_grows_like_log_log_from_above() {
        // Q(b) - ln ln b is the constant 2 - ln ln 2, so the ratio falls to 1
        // from above without reaching it at any finite b.
        let r: Vec<f64> = [1e3, 1e6, 1e9].iter().map(|&b: &f64| q_profile(b).unwrap() / b.ln().ln()).collect();
        assert!(r[0] > r[1] && r[1] > r[2] && r[2] > 1.0, "{r:?}");
    }

    #[test]
    fn profile_plateau_and_edge() {
        let g = Graph::lattice_ball(LatticeKind::Square, 22);
        let p = build_profile(&g, 20).unwrap();
        assert_eq!(p.rbar, 4);
        for (j, &d) in p.dist.iter().enumerate() {
            if d <= 4 {
                assert_eq!(p.v[j], 1.0);
            }
            if d >= 20 {
                assert_eq!(p.v[j], 0.0);
            }
        }
        let j = p.dist.iter().position(|&d| d == 5).unwrap();
        let q16 = q_profile(16.0).unwrap();
        assert_abs_diff_eq!(p.v[j], (q16 - 1.0) / q16, epsilon = 1e-14);
        assert!(build_profile(&g, 2).is_err());
    }

    #[test]
    fn lipschitz_scan_small_ball() {
        let g = Graph::lattice_ball(LatticeKind::Square, 12);
        let p = build_profile(&g, 12).unwrap();
        let s = lipschitz_scan(&g, &p);
        assert_eq!(s.violations, 0);
        assert_eq!(s.pairs, (g.vertex_count() * (g.vertex_count() - 1) / 2) as u64);
        assert_eq!(lipschitz_step_bound(&p, 3, 3, 0).lhs, 0.0);
    }

    #[test]
    fn upsilon_vanishes_without_tuning_or_coupling() {
        let g = Graph::lattice_ball(LatticeKind::Square, 20);
        let prof = build_profile(&g, 16).unwrap();
        let p = default_tuning_params(0.2);
        assert_eq!(upsilon(&p, &g, &prof, 0.0).unwrap().upsilon, 0.0);
        let none = ModelParams { decay: DecayProfile::Zero, ..p.clone() };
        assert_eq!(upsilon(&none, &g, &prof, 0.3).unwrap().upsilon, 0.0);
        let r = upsilon(&p, &g, &prof, 0.3).unwrap();
        assert!(r.upsilon > 0.0 && r.chain_holds(), "{r:?}");
        assert_abs_diff_eq!(r.jstar, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn tuned_action_plateau_and_outside() {
        let g = Graph::lattice_ball(LatticeKind::Square, 12);
        let prof = build_profile(&g, 10).unwrap();
        let p = default_tuning_params(0.2);
        let theta = GroupElement::coordinate(vec![0.1], 1).unwrap();
        let mut rng = chain_rng(5, 0);
        let inner = sample_test_configuration(&p, &g, prof.rbar as u32, 4, &mut rng);
        let moved = apply_tuned_action(&prof, &theta, &inner);
        for (a, b) in inner.loops.iter().zip(&moved.loops) {
            for (x, y) in a.pos.iter().zip(&b.pos) {
                assert_abs_diff_eq!(crate::torus::wrap(x + 0.1), *y, epsilon = 1e-12);
            }
        }
        let zero = GroupElement::coordinate(vec![0.0], 1).unwrap();
        assert_eq!(apply_tuned_action(&prof, &zero, &inner), inner);
    }

    #[test]
    fn tuned_action_keeps_reference_density() {
        let g = Graph::lattice_ball(LatticeKind::Square, 8);
        let prof = build_profile(&g, 6).unwrap();
        let p = default_tuning_params(0.2);
        let r = Reference::new(&ModelParams { lambda0: 0.7, ..p.clone() }, &g);
        let theta = GroupElement::coordinate(vec![0.37], 1).unwrap();
        let mut rng = chain_rng(9, 0);
        for _ in 0..50 {
            let v = rng.random_range(0..g.vertex_count());
            let (l, _) = r.sample_loop(&[rng.random()], v, 2, &mut rng).unwrap();
            let t = tune_loop(&prof, &theta, &l, 1.0);
            assert_abs_diff_eq!(r.log_loop_density(&l), r.log_loop_density(&t), epsilon = 1e-9);
        }
    }

    #[test]
    fn potentials_without_coupling_cancel_exactly() {
        let g = Graph::lattice_ball(LatticeKind::Square, 20);
        let prof = build_profile(&g, 16).unwrap();
        let p = default_tuning_params(0.0);
        let theta = GroupElement::coordinate(vec![0.2], 1).unwrap();
        let bound = TuningBound { c_fit: calibrate_c_fit(&p.potentials, 1, 64), upsilon: 1.0 };
        assert_eq!(bound.c_fit, 0.0);
        let mut rng = chain_rng(2, 0);
        for _ in 0..20 {
            let c = sample_test_configuration(&p, &g, 18, 30, &mut rng);
            let sd = second_difference_check(&p, &g, &prof, &theta, &c, &Environment::default(), &bound);
            assert!(sd.delta.abs() < 1e-12, "{sd:?}");
        }
    }

    #[test]
    fn c_fit_approaches_curvature() {
        let p = default_tuning_params(0.2);
        let c = calibrate_c_fit(&p.potentials, 1, 200);
        let curv = 4.0 * std::f64::consts::PI.powi(2) * 0.2;
        assert!(c <= curv * (1.0 + 1e-9) && c > 0.99 * curv, "{c} vs {curv}");
    }

    #[test]
    fn tail_is_empty_without_jumps() {
        let p = ModelParams { lambda0: 0.0, m_tau: 4, ..default_tuning_params(0.0) };
        let r = tail_probability_bound(&p, &[8], 2000, 1);
        assert_eq!(r.rows[0].escapes, 0);
    }

    proptest! {
        #[test]
        fn am_gm_step(h1 in -20.0f64..20.0, h2 in -20.0f64..20.0) {
            let lhs = ((-h1).exp() + (-h2).exp()) / 2.0;
            prop_assert!(lhs >= (-(h1 + h2) / 2.0).exp() * (1.0 - 1e-12));
        }

        #[test]
        fn vartheta_is_monotone(a in -2.0f64..40.0, da in 0.0f64..10.0, b in 0.5f64..50.0) {
            prop_assert!(vartheta(a, b) >= vartheta(a + da, b) - 1e-15);
            prop_assert!((0.0..=1.0).contains(&vartheta(a, b)));
        }
    }
}
