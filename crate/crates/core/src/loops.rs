//! Grid-discretized paths and loops in `M x Γ`, the reference path measure
//! and its samplers, matchings, and loop configurations.
//!
//! A trajectory of time-length `kβ` is stored on `k·M` slices of width
//! `δ = β/M`. Between consecutive slices the exact one-step kernel is
//!
//! ```text
//! K_δ((x,v),(x',v')) = 1(v=v') e^{-δ r_v} p^δ(x,x') + W^δ_{vv'}
//! ```
//!
//! where `W^δ` is the mass of index trajectories with at least one jump.
//! A jump resets the position to a uniform point, so a step either diffuses
//! at a fixed vertex or carries a jump flag and an independent position.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::graph::Graph;
use crate::jumps::{pick, JumpError, JumpKernel, JumpRates, JumpSkeleton};
use crate::params::ModelParams;
use crate::torus::{self, free_step, HeatKernel, TorusPoint};

#[derive(Debug, Error, PartialEq)]
pub enum LoopError {
    #[error("path {from} ends at ({end_vertex}, {end_pos:?}) but path {to} starts at ({start_vertex}, {start_pos:?})")]
    EndpointMismatch { from: usize, to: usize, end_vertex: u32, end_pos: Vec<f64>, start_vertex: u32, start_pos: Vec<f64> },
    #[error("matching is not a bijection")]
    NotBijection,
    #[error("merging needs k = 1 paths with a shared grid")]
    Shape,
    #[error("record parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Jump(#[from] JumpError),
}

/// Interior points of a torus Brownian bridge from `x` to `y` over `steps`
/// steps of duration `dt`, flattened (`(steps - 1) * d` values).
///
/// Each coordinate first draws a winding number with the exact wrapped
/// Gaussian weights, then follows the Gaussian bridge to the lifted endpoint.
pub fn bridge_interior<R: Rng + ?Sized>(x: &[f64], y: &[f64], dt: f64, steps: usize, rng: &mut R) -> Vec<f64> {
    let d = x.len();
    if steps <= 1 {
        return Vec::new();
    }
    let total = dt * steps as f64;
    let wmax = HeatKernel::new(d).n_max(total);
    let mut out = vec![0.0; (steps - 1) * d];
    for c in 0..d {
        let delta = torus::min_image(y[c] - x[c]);
        let weights: Vec<f64> =
            (-wmax..=wmax).map(|w| (-(delta + w as f64).powi(2) / (2.0 * total)).exp()).collect();
        let w = pick(&weights, rng).expect("wrapped Gaussian weights are positive") as i64 - wmax;
        let target = x[c] + delta + w as f64;
        let mut cur = x[c];
        for s in 1..steps {
            let remaining = total - (s - 1) as f64 * dt;
            let mean = cur + (target - cur) * dt / remaining;
            let var = dt * (remaining - dt) / remaining;
            let g: f64 = StandardNormal.sample(rng);
            cur = mean + var.sqrt() * g;
            out[(s - 1) * d + c] = torus::wrap(cur);
        }
    }
    out
}

/// Bridge pinned at `x` and `y` over time `t`, returned on `slices + 1`
/// equally spaced points including both endpoints.
pub fn sample_bridge<R: Rng + ?Sized>(x: &TorusPoint, y: &TorusPoint, t: f64, slices: usize, rng: &mut R) -> Vec<TorusPoint> {
    let slices = slices.max(1);
    let inner = bridge_interior(x.coords(), y.coords(), t / slices as f64, slices, rng);
    let mut pts = vec![x.clone()];
    pts.extend(inner.chunks(x.dim()).map(|c| TorusPoint::new(c.to_vec())));
    pts.push(y.clone());
    pts
}

/// A closed trajectory of time-length `kβ` on `k·M` slices. Slice `s`
/// sits at absolute time `sδ`, so slices `t + mM` are the `k` temporal
/// sections at time `t`. Storage is rotation-normalized: any rotation by a
/// multiple of `M` describes the same unrooted loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Loop {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub vertex: Vec<u32>,
    /// `jump[s]`: the step from slice `s` to `s + 1` (cyclically) contains a jump.
    pub jump: Vec<bool>,
    pub pos: Vec<f64>,
}

/// An open trajectory from `(x,i)` to `(y,j)` of time-length `kβ`, on
/// `k·M + 1` slices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenPath {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub vertex: Vec<u32>,
    pub jump: Vec<bool>,
    pub pos: Vec<f64>,
}

/// Borrowed view of the first `k·M` slices of a loop or path.
#[derive(Debug, Clone, Copy)]
pub struct TrackRef<'a> {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub vertex: &'a [u32],
    pub pos: &'a [f64],
}

impl<'a> TrackRef<'a> {
    pub fn slices(&self) -> usize {
        self.k * self.m
    }

    #[inline]
    pub fn x(&self, s: usize) -> &'a [f64] {
        &self.pos[s * self.d..(s + 1) * self.d]
    }

    #[inline]
    pub fn v(&self, s: usize) -> usize {
        self.vertex[s] as usize
    }
}

impl Loop {
    pub fn slices(&self) -> usize {
        self.k * self.m
    }

    pub fn track(&self) -> TrackRef<'_> {
        TrackRef { k: self.k, m: self.m, d: self.d, vertex: &self.vertex, pos: &self.pos }
    }

    pub fn x(&self, s: usize) -> &[f64] {
        &self.pos[s * self.d..(s + 1) * self.d]
    }

    /// Base point: the section at slice 0.
    pub fn base(&self) -> (TorusPoint, usize) {
        (TorusPoint::new(self.x(0).to_vec()), self.vertex[0] as usize)
    }

    /// Vertices at the β-multiples `0, β, ..., (k-1)β`.
    pub fn beta_sections(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.k).map(move |m| self.vertex[m * self.m] as usize)
    }

    /// Rotates storage so that old slice `by` becomes slice 0.
    pub fn rotate(&mut self, by: usize) {
        let s = self.slices();
        let by = by % s;
        self.vertex.rotate_left(by);
        self.jump.rotate_left(by);
        self.pos.rotate_left(by * self.d);
    }

    /// Jump skeleton read off the grid: every step carrying a jump becomes
    /// one event at the end of the step. Several jumps within one step
    /// collapse to their net effect.
    pub fn grid_skeleton(&self, beta: f64) -> JumpSkeleton {
        let dt = beta / self.m as f64;
        let mut sk = JumpSkeleton { k: self.k, jump_times: Vec::new(), vertex_seq: vec![self.vertex[0]] };
        let s = self.slices();
        for step in 0..s {
            if self.jump[step] {
                sk.jump_times.push((step + 1) as f64 * dt);
                sk.vertex_seq.push(self.vertex[(step + 1) % s]);
            }
        }
        sk
    }

    /// One-line text record:
    /// `loop k=<k> base=<i> x=<coords> jumps=[(t,v),...] positions=[...]`.
    pub fn to_record(&self, beta: f64) -> String {
        let fmt_list = |v: &[f64]| v.iter().map(|c| format!("{c:e}")).collect::<Vec<_>>().join(",");
        let sk = self.grid_skeleton(beta);
        let mut jumps = String::new();
        for (n, (t, v)) in sk.jump_times.iter().zip(&sk.vertex_seq[1..]).enumerate() {
            if n > 0 {
                jumps.push(',');
            }
            let _ = write!(jumps, "({t:e},{v})");
        }
        format!(
            "loop k={} base={} x={} jumps=[{}] positions=[{}]",
            self.k,
            self.vertex[0],
            fmt_list(self.x(0)),
            jumps,
            fmt_list(&self.pos)
        )
    }

    pub fn from_record(line: &str, beta: f64, m: usize, d: usize) -> Result<Self, LoopError> {
        let bad = |s: &str| LoopError::Parse(s.to_string());
        let field = |key: &str| -> Result<&str, LoopError> {
            let start = line.find(&format!("{key}=")).ok_or_else(|| bad(key))? + key.len() + 1;
            let rest = &line[start..];
            let end = if rest.starts_with('[') { rest.find(']').map(|e| e + 1) } else { rest.find(' ') };
            Ok(&rest[..end.unwrap_or(rest.len())])
        };
        if !line.starts_with("loop ") {
            return Err(bad("missing `loop` tag"));
        }
        let k: usize = field("k")?.parse().map_err(|_| bad("k"))?;
        let base: u32 = field("base")?.parse().map_err(|_| bad("base"))?;
        let floats = |s: &str| -> Result<Vec<f64>, LoopError> {
            s.trim_matches(|c| c == '[' || c == ']')
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| bad("number")))
                .collect()
        };
        let pos = floats(field("positions")?)?;
        let slices = k * m;
        if pos.len() != slices * d {
            return Err(bad("position count"));
        }
        let dt = beta / m as f64;
        let mut events = Vec::new();
        let body = field("jumps")?.trim_matches(|c| c == '[' || c == ']');
        for ev in body.split(')').filter(|e| !e.trim_matches(',').is_empty()) {
            let ev = ev.trim_start_matches(',').trim_start_matches('(');
            let (t, v) = ev.split_once(',').ok_or_else(|| bad("jump"))?;
            let t: f64 = t.parse().map_err(|_| bad("jump time"))?;
            let v: u32 = v.parse().map_err(|_| bad("jump vertex"))?;
            events.push(((t / dt).round() as usize - 1, v));
        }
        let mut vertex = vec![base; slices];
        let mut jump = vec![false; slices];
        let mut cur = base;
        let mut it = events.iter().peekable();
        for s in 0..slices {
            vertex[s] = cur;
            if let Some(&&(step, v)) = it.peek() {
                if step == s {
                    jump[s] = true;
                    cur = v;
                    it.next();
                }
            }
        }
        if cur != base {
            return Err(bad("loop does not close"));
        }
        Ok(Self { k, m, d, vertex, jump, pos })
    }
}

impl OpenPath {
    pub fn slices(&self) -> usize {
        self.k * self.m
    }

    pub fn track(&self) -> TrackRef<'_> {
        TrackRef { k: self.k, m: self.m, d: self.d, vertex: &self.vertex[..self.slices()], pos: &self.pos[..self.slices() * self.d] }
    }

    pub fn x(&self, s: usize) -> &[f64] {
        &self.pos[s * self.d..(s + 1) * self.d]
    }

    pub fn start(&self) -> (&[f64], usize) {
        (self.x(0), self.vertex[0] as usize)
    }

    pub fn end(&self) -> (&[f64], usize) {
        let s = self.slices();
        (self.x(s), self.vertex[s] as usize)
    }

    /// Vertices at the interior β-multiples `β, ..., (k-1)β`.
    pub fn interior_beta_sections(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.k).map(move |m| self.vertex[m * self.m] as usize)
    }
}

/// A finite collection of loops sharing one time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopConfiguration {
    pub m: usize,
    pub d: usize,
    pub loops: Vec<Loop>,
}

impl LoopConfiguration {
    pub fn empty(m: usize, d: usize) -> Self {
        Self { m, d, loops: Vec::new() }
    }

    pub fn total_k(&self) -> usize {
        self.loops.iter().map(|l| l.k).sum()
    }

    /// Section counts `occ[t][v]` on the `M` grid times of `[0, β)`.
    pub fn occupancy_profile(&self, vertex_count: usize) -> Vec<Vec<u16>> {
        occupancy_of(self.loops.iter().map(Loop::track), self.m, vertex_count)
    }

    pub fn max_occupancy(&self, vertex_count: usize) -> u16 {
        self.occupancy_profile(vertex_count).iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn to_records(&self, beta: f64) -> String {
        self.loops.iter().map(|l| l.to_record(beta) + "\n").collect()
    }
}

/// Occupancy table of arbitrary tracks on an `m`-slice period.
pub fn occupancy_of<'a>(tracks: impl Iterator<Item = TrackRef<'a>>, m: usize, vertex_count: usize) -> Vec<Vec<u16>> {
    let mut occ = vec![vec![0u16; vertex_count]; m];
    for t in tracks {
        for s in 0..t.slices() {
            occ[s % m][t.v(s)] += 1;
        }
    }
    occ
}

/// A bijection on path labels: path `p` continues into path `γ(p)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching(Vec<usize>);

impl Matching {
    pub fn new(perm: Vec<usize>) -> Result<Self, LoopError> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(LoopError::NotBijection);
            }
        }
        Ok(Self(perm))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn image(&self, p: usize) -> usize {
        self.0[p]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Cycles, each listed from its smallest label.
    pub fn cycles(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.0.len()];
        let mut out = Vec::new();
        for s in 0..self.0.len() {
            if seen[s] {
                continue;
            }
            let mut c = Vec::new();
            let mut p = s;
            while !seen[p] {
                seen[p] = true;
                c.push(p);
                p = self.0[p];
            }
            out.push(c);
        }
        out
    }

    /// All bijections of `n` labels in lexicographic order.
    pub fn all(n: usize) -> Vec<Self> {
        fn rec(cur: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Matching>) {
            if cur.len() == used.len() {
                out.push(Matching(cur.clone()));
                return;
            }
            for i in 0..used.len() {
                if !used[i] {
                    used[i] = true;
                    cur.push(i);
                    rec(cur, used, out);
                    cur.pop();
                    used[i] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), &mut vec![false; n], &mut out);
        out
    }
}

/// Concatenates `k = 1` paths along the cycles of `γ` into loops whose
/// multiplicities are the cycle lengths.
pub fn merge_cycles(paths: &[OpenPath], matching: &Matching) -> Result<LoopConfiguration, LoopError> {
    if paths.len() != matching.len() {
        return Err(LoopError::NotBijection);
    }
    let (m, d) = match paths.first() {
        Some(p) => (p.m, p.d),
        None => return Ok(LoopConfiguration::empty(1, 1)),
    };
    if paths.iter().any(|p| p.k != 1 || p.m != m || p.d != d) {
        return Err(LoopError::Shape);
    }
    for (p, path) in paths.iter().enumerate() {
        let q = matching.image(p);
        let (ye, je) = path.end();
        let (xs, is) = paths[q].start();
        if je != is || torus::dist(ye, xs) > 1e-12 {
            return Err(LoopError::EndpointMismatch {
                from: p,
                to: q,
                end_vertex: je as u32,
                end_pos: ye.to_vec(),
                start_vertex: is as u32,
                start_pos: xs.to_vec(),
            });
        }
    }
    let loops = matching
        .cycles()
        .into_iter()
        .map(|cycle| {
            let mut l = Loop { k: cycle.len(), m, d, vertex: Vec::new(), jump: Vec::new(), pos: Vec::new() };
            for &p in &cycle {
                let path = &paths[p];
                l.vertex.extend_from_slice(&path.vertex[..m]);
                l.jump.extend_from_slice(&path.jump);
                l.pos.extend_from_slice(&path.pos[..m * d]);
            }
            l
        })
        .collect();
    Ok(LoopConfiguration { m, d, loops })
}

/// Grid data of a freshly sampled trajectory on `S + 1` slices.
struct Sampled {
    vertex: Vec<u32>,
    jump: Vec<bool>,
    pos: Vec<f64>,
    skeleton: JumpSkeleton,
}

/// The reference (free) path measure on a fixed graph and time grid.
#[derive(Debug)]
pub struct Reference {
    pub d: usize,
    pub beta: f64,
    pub m: usize,
    pub hk: HeatKernel,
    pub jumps: JumpKernel,
}

impl Reference {
    pub fn new(params: &ModelParams, g: &Graph) -> Self {
        Self::with_rates(params, JumpRates::uniform(g, params.lambda0))
    }

    pub fn with_rates(params: &ModelParams, rates: JumpRates) -> Self {
        let t_max = (params.k_max + 1) as f64 * params.beta;
        Self {
            d: params.d,
            beta: params.beta,
            m: params.m_tau,
            hk: HeatKernel::new(params.d),
            jumps: JumpKernel::new(rates, t_max),
        }
    }

    pub fn delta(&self) -> f64 {
        self.beta / self.m as f64
    }

    fn exit(&self, v: usize) -> f64 {
        self.jumps.rates().exit_rate(v)
    }

    /// Total mass `m_k(x,i; y,j)` of trajectories of length `kβ`.
    pub fn path_mass(&self, x: &[f64], i: usize, y: &[f64], j: usize, k: usize) -> f64 {
        let t = k as f64 * self.beta;
        let free = if i == j { (-t * self.exit(i)).exp() * self.hk.eval_slices(t, x, y) } else { 0.0 };
        free + self.jumps.jump_mass(i, j, t)
    }

    /// Mass of loops of length `kβ` through a fixed point at vertex `i`.
    pub fn loop_mass(&self, i: usize, k: usize) -> f64 {
        let t = k as f64 * self.beta;
        (-t * self.exit(i)).exp() * self.hk.diagonal(t) + self.jumps.jump_mass(i, i, t)
    }

    /// Log of the one-step kernel between consecutive slices.
    pub fn log_step(&self, v0: usize, x0: &[f64], v1: usize, x1: &[f64], jump: bool) -> f64 {
        let dt = self.delta();
        if jump {
            self.jumps.jump_mass(v0, v1, dt).ln()
        } else if v0 == v1 {
            -dt * self.exit(v0) + self.hk.log_step(dt, x0, x1)
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Log density of a loop under the product of one-step kernels.
    pub fn log_loop_density(&self, l: &Loop) -> f64 {
        let s = l.slices();
        (0..s)
            .map(|a| {
                let b = (a + 1) % s;
                self.log_step(l.vertex[a] as usize, l.x(a), l.vertex[b] as usize, l.x(b), l.jump[a])
            })
            .sum()
    }

    pub fn log_path_density(&self, p: &OpenPath) -> f64 {
        (0..p.slices())
            .map(|a| self.log_step(p.vertex[a] as usize, p.x(a), p.vertex[a + 1] as usize, p.x(a + 1), p.jump[a]))
            .sum()
    }

    /// Log density of a bridge window: free steps over the pinned kernel.
    pub fn log_bridge_density(&self, points: &[&[f64]]) -> f64 {
        let dt = self.delta();
        let n = points.len() - 1;
        let steps: f64 = points.windows(2).map(|w| self.hk.log_step(dt, w[0], w[1])).sum();
        steps - self.hk.log_step(dt * n as f64, points[0], points[n])
    }

    fn sample_grid<R: Rng + ?Sized>(&self, x: &[f64], i: usize, y: &[f64], j: usize, k: usize, rng: &mut R) -> Result<Sampled, LoopError> {
        let slices = k * self.m;
        let t = k as f64 * self.beta;
        let dt = self.delta();
        let d = self.d;
        let w0 = if i == j { (-t * self.exit(i)).exp() * self.hk.eval_slices(t, x, y) } else { 0.0 };
        let w1 = self.jumps.jump_mass(i, j, t);
        if !(w0 + w1 > 0.0) {
            return Err(JumpError::Unreachable { from: i, to: j }.into());
        }
        let mut pos = vec![0.0; (slices + 1) * d];
        pos[..d].copy_from_slice(x);
        pos[slices * d..].copy_from_slice(y);
        if rng.random::<f64>() * (w0 + w1) < w0 {
            let inner = bridge_interior(x, y, dt, slices, rng);
            pos[d..slices * d].copy_from_slice(&inner);
            return Ok(Sampled {
                vertex: vec![i as u32; slices + 1],
                jump: vec![false; slices],
                pos,
                skeleton: JumpSkeleton { k, jump_times: Vec::new(), vertex_seq: vec![i as u32] },
            });
        }
        let events = self.jumps.sample_with_jumps(i, j, t, rng)?;
        let mut vertex = vec![i as u32; slices + 1];
        let mut jump = vec![false; slices];
        let mut cur = i as u32;
        let mut it = events.iter().peekable();
        for s in 0..slices {
            while let Some(&&(tau, v)) = it.peek() {
                let step = ((tau / dt) as usize).min(slices - 1);
                if step != s {
                    break;
                }
                jump[s] = true;
                cur = v;
                it.next();
            }
            vertex[s + 1] = cur;
        }
        let jump_steps: Vec<usize> = (0..slices).filter(|&s| jump[s]).collect();
        let first = jump_steps[0];
        let last = *jump_steps.last().unwrap();
        let mut buf = vec![0.0; d];
        // Free walk out of x up to the first jump.
        for s in 0..first {
            free_step(&pos[s * d..(s + 1) * d], dt, rng, &mut buf);
            pos[(s + 1) * d..(s + 2) * d].copy_from_slice(&buf);
        }
        // Between jumps: a uniform restart then a free walk.
        for w in jump_steps.windows(2) {
            let (a, b) = (w[0] + 1, w[1]);
            for c in 0..d {
                pos[a * d + c] = rng.random::<f64>();
            }
            for s in a..b {
                free_step(&pos[s * d..(s + 1) * d], dt, rng, &mut buf);
                pos[(s + 1) * d..(s + 2) * d].copy_from_slice(&buf);
            }
        }
        // The final segment walks backward from y.
        for s in ((last + 1)..slices).rev() {
            free_step(&pos[(s + 1) * d..(s + 2) * d], dt, rng, &mut buf);
            pos[s * d..(s + 1) * d].copy_from_slice(&buf);
        }
        let mut vertex_seq = vec![i as u32];
        vertex_seq.extend(events.iter().map(|e| e.1));
        Ok(Sampled {
            vertex,
            jump,
            pos,
            skeleton: JumpSkeleton { k, jump_times: events.iter().map(|e| e.0).collect(), vertex_seq },
        })
    }

    /// Draws a loop through `(x, i)` from the normalized reference measure
    /// of length-`kβ` loops with that base point.
    pub fn sample_loop<R: Rng + ?Sized>(&self, x: &[f64], i: usize, k: usize, rng: &mut R) -> Result<(Loop, JumpSkeleton), LoopError> {
        let s = self.sample_grid(x, i, x, i, k, rng)?;
        let n = k * self.m;
        let mut vertex = s.vertex;
        vertex.pop();
        let mut pos = s.pos;
        pos.truncate(n * self.d);
        Ok((Loop { k, m: self.m, d: self.d, vertex, jump: s.jump, pos }, s.skeleton))
    }

    /// Draws a path `(x,i) -> (y,j)` of length `kβ` from the normalized
    /// reference measure. The normalizing mass is [`Self::path_mass`].
    pub fn sample_open_path<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        i: usize,
        y: &[f64],
        j: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<(OpenPath, JumpSkeleton), LoopError> {
        let s = self.sample_grid(x, i, y, j, k, rng)?;
        Ok((OpenPath { k, m: self.m, d: self.d, vertex: s.vertex, jump: s.jump, pos: s.pos }, s.skeleton))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DecayProfile;
    use crate::params::Potentials;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn params(lambda0: f64, m: usize) -> ModelParams {
        ModelParams {
            d: 1,
            beta: 1.0,
            z: 0.1,
            potentials: Potentials::default(),
            lambda0,
            decay: DecayProfile::Zero,
            m_tau: m,
            k_max: 4,
        }
    }

    fn path_from(vertex: Vec<u32>, xs: Vec<f64>) -> OpenPath {
        let s = vertex.len() - 1;
        OpenPath { k: s / 2, m: 2, d: 1, jump: vec![false; s], vertex, pos: xs }
    }

    #[test]
    fn bridge_endpoints_and_midpoint_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = TorusPoint::new(vec![0.2]);
        let y = TorusPoint::new(vec![0.7]);
        let pts = sample_bridge(&x, &y, 1.0, 1, &mut rng);
        assert_eq!(pts, vec![x.clone(), y.clone()]);

        // Midpoint of a bridge 0 -> 0 over t = 1: the density is
        // p^{1/2}(0,u)^2 / p^1(0,0). Compare the mean of sin²(πu).
        let hk = HeatKernel::new(1);
        let (nodes, w) = crate::quad::gauss_legendre(200, -0.5, 0.5);
        let exact: f64 = nodes
            .iter()
            .zip(&w)
            .map(|(u, w)| w * (std::f64::consts::PI * u).sin().powi(2) * hk.kernel_1d(0.5, *u).powi(2))
            .sum::<f64>()
            / hk.kernel_1d(1.0, 0.0);
        let o = TorusPoint::origin(1);
        let n = 40_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let p = sample_bridge(&o, &o, 1.0, 2, &mut rng);
                (std::f64::consts::PI * p[1].coords()[0]).sin().powi(2)
            })
            .collect();
        let (m, se) = crate::stats::mean_se(&vals);
        assert!((m - exact).abs() < 4.0 * se, "{m} vs {exact} ± {se}");
    }

    #[test]
    fn matching_and_merge() {
        assert!(Matching::new(vec![0, 0]).is_err());
        let g = Matching::new(vec![1, 2, 0]).unwrap();
        assert_eq!(g.cycles(), vec![vec![0, 1, 2]]);
        assert_eq!(Matching::all(3).len(), 6);
        // Three k=1 paths forming a 3-cycle at one vertex, m = 2.
        let paths = vec![
            path_from(vec![0, 0, 0], vec![0.1, 0.15, 0.2]),
            path_from(vec![0, 0, 0], vec![0.2, 0.25, 0.3]),
            path_from(vec![0, 0, 0], vec![0.3, 0.2, 0.1]),
        ];
        let c = merge_cycles(&paths, &g).unwrap();
        assert_eq!(c.loops.len(), 1);
        assert_eq!(c.loops[0].k, 3);
        assert_eq!(c.loops[0].pos, vec![0.1, 0.15, 0.2, 0.25, 0.3, 0.2]);
        assert!(merge_cycles(&paths, &Matching::identity(3)).is_err());
        let closed: Vec<OpenPath> = (0..4).map(|i| path_from(vec![i, i, i], vec![0.5, 0.6, 0.5])).collect();
        let c = merge_cycles(&closed, &Matching::identity(4)).unwrap();
        assert_eq!(c.loops.iter().map(|l| l.k).collect::<Vec<_>>(), vec![1; 4]);
    }

    #[test]
    fn occupancy_examples() {
        assert!(LoopConfiguration::empty(4, 1).occupancy_profile(3).iter().flatten().all(|&c| c == 0));
        let l = Loop { k: 2, m: 2, d: 1, vertex: vec![1; 4], jump: vec![false; 4], pos: vec![0.1, 0.2, 0.6, 0.7] };
        let c = LoopConfiguration { m: 2, d: 1, loops: vec![l] };
        assert_eq!(c.occupancy_profile(3), vec![vec![0, 2, 0], vec![0, 2, 0]]);
        let l = Loop { k: 1, m: 4, d: 1, vertex: vec![0, 1, 1, 0], jump: vec![true, false, true, false], pos: vec![0.0; 4] };
        let c = LoopConfiguration { m: 4, d: 1, loops: vec![l] };
        assert_eq!(c.occupancy_profile(2), vec![vec![1, 0], vec![0, 1], vec![0, 1], vec![1, 0]]);
    }

    #[test]
    fn sampled_loops_close_and_follow_edges() {
        let g = Graph::lattice_ball(crate::graph::LatticeKind::Square, 2);
        let p = params(1.5, 8);
        let r = Reference::new(&p, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut jumped = 0;
        for _ in 0..500 {
            let x = [rng.random::<f64>()];
            let (l, sk) = r.sample_loop(&x, 0, 2, &mut rng).unwrap();
            assert_eq!(l.vertex[0], 0);
            assert_eq!(l.x(0), &x);
            for s in 0..l.slices() {
                let b = (s + 1) % l.slices();
                if !l.jump[s] {
                    assert_eq!(l.vertex[s], l.vertex[b]);
                }
            }
            for w in sk.vertex_seq.windows(2) {
                assert!(g.is_edge(w[0] as usize, w[1] as usize));
            }
            assert_eq!(*sk.vertex_seq.last().unwrap(), 0);
            assert!(r.log_loop_density(&l).is_finite());
            jumped += usize::from(sk.jumps() > 0);
        }
        assert!(jumped > 0);
    }

    #[test]
    fn record_roundtrip() {
        let g = Graph::path(3);
        let p = params(2.0, 4);
        let r = Reference::new(&p, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (l, _) = r.sample_loop(&[0.3], 1, 2, &mut rng).unwrap();
            let back = Loop::from_record(&l.to_record(1.0), 1.0, 4, 1).unwrap();
            assert_eq!(back, l);
        }
    }

    #[test]
    fn open_path_zero_rate_is_bridge() {
        let g = Graph::path(2);
        let r = Reference::new(&params(0.0, 4), &g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, sk) = r.sample_open_path(&[0.1], 0, &[0.4], 0, 1, &mut rng).unwrap();
        assert_eq!(sk.jumps(), 0);
        assert!(p.jump.iter().all(|j| !j));
        assert_eq!(p.end().0, &[0.4]);
        assert!(r.sample_open_path(&[0.1], 0, &[0.4], 1, 1, &mut rng).is_err());
    }
}
