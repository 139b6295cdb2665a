//! Metropolis–Hastings sampling of the finite-volume loop-gas measure and
//! the partition-function estimator.
//!
//! The chain state is a list of unrooted loops. The target density of a
//! state `{l_1, ..., l_N}` with respect to the product of reference loop
//! densities `ρ(l)` is
//!
//! ```text
//! π ∝ ∏ z^{k_l} ρ(l) · exp(-h)
//! ```
//!
//! where `h` collects the loop energies, their interaction with frozen
//! tracks, and the boundary term. The `1/k` of the rooted weight is
//! absorbed by identifying the `k` rotations of a loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::energy::{Boundary, EnergyError, EnergyModel};
use crate::graph::Graph;
use crate::jumps::pick;
use crate::loops::{bridge_interior, occupancy_of, Loop, LoopConfiguration, LoopError, OpenPath, Reference, TrackRef};
use crate::params::ModelParams;
use crate::quad::gauss_legendre;
use crate::stats::{batch_means, Diagnostics, EstimatorReport, MIN_BATCHES};

#[derive(Debug, Error)]
pub enum GibbsError {
    #[error("window of {window} slices must be shorter than the period {m}")]
    Window { window: usize, m: usize },
    #[error("insertion set is empty")]
    EmptyBase,
    #[error(transparent)]
    Boundary(#[from] EnergyError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error("estimator did not converge: {0}")]
    NoConvergence(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MoveKind {
    Insert,
    Delete,
    Wiggle,
    Skeleton,
    Merge,
    Split,
}

impl MoveKind {
    pub const ALL: [MoveKind; 6] =
        [MoveKind::Insert, MoveKind::Delete, MoveKind::Wiggle, MoveKind::Skeleton, MoveKind::Merge, MoveKind::Split];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Relative frequencies of the move kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoveWeights(pub [f64; 6]);

impl Default for MoveWeights {
    fn default() -> Self {
        Self([0.2, 0.2, 0.3, 0.1, 0.1, 0.1])
    }
}

impl MoveWeights {
    fn prob(&self, k: MoveKind) -> f64 {
        self.0[k.index()] / self.0.iter().sum::<f64>()
    }
}

/// A frozen trajectory: an environment loop or an open path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrozenTrack {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub vertex: Vec<u32>,
    pub pos: Vec<f64>,
}

impl FrozenTrack {
    pub fn track(&self) -> TrackRef<'_> {
        TrackRef { k: self.k, m: self.m, d: self.d, vertex: &self.vertex, pos: &self.pos }
    }
}

impl From<&Loop> for FrozenTrack {
    fn from(l: &Loop) -> Self {
        Self { k: l.k, m: l.m, d: l.d, vertex: l.vertex.clone(), pos: l.pos.clone() }
    }
}

impl From<&OpenPath> for FrozenTrack {
    fn from(p: &OpenPath) -> Self {
        let t = p.track();
        Self { k: p.k, m: p.m, d: p.d, vertex: t.vertex.to_vec(), pos: t.pos.to_vec() }
    }
}

/// Which loops the chain samples and what they interact with.
#[derive(Debug, Clone, Serialize)]
pub struct SamplerSpec {
    /// Every section of every loop stays here.
    pub container: Vec<bool>,
    /// Every loop has at least one β-section here.
    pub base: Vec<bool>,
    /// No β-section of any loop lies here.
    pub avoid: Vec<bool>,
    pub frozen: Vec<FrozenTrack>,
    pub boundary: Boundary,
    /// Bridge window length in slices, below the period.
    pub window: usize,
    pub weights: MoveWeights,
}

impl SamplerSpec {
    /// Unconstrained sampling of the volume `mask`.
    pub fn volume(mask: Vec<bool>, m: usize) -> Self {
        let n = mask.len();
        Self {
            base: mask.clone(),
            container: mask,
            avoid: vec![false; n],
            frozen: Vec::new(),
            boundary: Boundary::default(),
            window: (m / 2).max(1),
            weights: MoveWeights::default(),
        }
    }

    pub fn admissible(&self, l: &Loop) -> bool {
        l.vertex.iter().all(|&v| self.container[v as usize])
            && l.beta_sections().all(|v| !self.avoid[v])
            && l.beta_sections().any(|v| self.base[v])
    }
}

/// Per-kind proposal and acceptance counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MoveStat {
    pub proposed: u64,
    pub accepted: u64,
}

/// The choices behind a proposal, enough to recompute its density.
#[derive(Debug, Clone, PartialEq)]
pub enum MoveInfo {
    Insert,
    Delete { idx: usize },
    Wiggle { idx: usize, s0: usize },
    Skeleton { idx: usize, m: usize },
    Merge { i1: usize, i2: usize, t0: usize, m1: usize, m2: usize },
    Split { idx: usize, t0: usize, m1: usize, m2: usize },
}

/// A proposed transition with its Metropolis–Hastings log ratio.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub kind: MoveKind,
    pub info: MoveInfo,
    pub removed: Vec<usize>,
    pub replaced: Option<(usize, Loop)>,
    pub added: Vec<Loop>,
    pub log_accept: f64,
}

/// A Markov chain on loop configurations of one volume.
pub struct GibbsSampler<'a> {
    pub params: &'a ModelParams,
    pub graph: &'a Graph,
    pub reference: &'a Reference,
    pub spec: SamplerSpec,
    pub state: Vec<Loop>,
    pub stats: [MoveStat; 6],
    pub rng: ChaCha8Rng,
    em: EnergyModel<'a>,
    base_list: Vec<usize>,
    pk: Vec<f64>,
    mk: Vec<f64>,
}

fn ln_choose2(n: usize) -> f64 {
    ((n * (n - 1) / 2) as f64).ln()
}

/// Independent RNG stream for chain `chain` of a run seeded with `seed`.
/// Per-chain samples, one series per observable, and move statistics.
type ChainSamples = (Vec<Vec<f64>>, [MoveStat; 6]);

pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

impl<'a> GibbsSampler<'a> {
    pub fn new(
        params: &'a ModelParams,
        graph: &'a Graph,
        reference: &'a Reference,
        spec: SamplerSpec,
        rng: ChaCha8Rng,
    ) -> Result<Self, GibbsError> {
        let m = params.m_tau;
        if spec.window == 0 || spec.window >= m {
            return Err(GibbsError::Window { window: spec.window, m });
        }
        spec.boundary.check_occupancy(params.kappa(), graph.vertex_count())?;
        let nv = graph.vertex_count();
        let base_list: Vec<usize> = (0..nv).filter(|&v| spec.base[v] && spec.container[v] && !spec.avoid[v]).collect();
        if base_list.is_empty() {
            return Err(GibbsError::EmptyBase);
        }
        let mut mk = vec![f64::NAN; params.k_max * nv];
        let mut pk = Vec::with_capacity(params.k_max);
        for k in 1..=params.k_max {
            let mut mean = 0.0;
            for &v in &base_list {
                let w = reference.loop_mass(v, k);
                mk[(k - 1) * nv + v] = w;
                mean += w / base_list.len() as f64;
            }
            pk.push(if params.z > 0.0 { (k as f64 * params.z.ln()).exp() * mean / k as f64 } else { 1.0 });
        }
        let total: f64 = pk.iter().sum();
        pk.iter_mut().for_each(|p| *p /= total);
        Ok(Self {
            params,
            graph,
            reference,
            em: EnergyModel::new(params, graph),
            spec,
            state: Vec::new(),
            stats: [MoveStat::default(); 6],
            rng,
            base_list,
            pk,
            mk,
        })
    }

    pub fn energy_model(&self) -> &EnergyModel<'a> {
        &self.em
    }

    pub fn configuration(&self) -> LoopConfiguration {
        LoopConfiguration { m: self.params.m_tau, d: self.params.d, loops: self.state.clone() }
    }

    pub fn total_k(&self) -> usize {
        self.state.iter().map(|l| l.k).sum()
    }

    fn loop_mass(&self, v: usize, k: usize) -> f64 {
        self.mk[(k - 1) * self.graph.vertex_count() + v]
    }

    /// `ln Σ_m 1(v_m ∈ B) / (|B| m_k(v_m))` over the β-sections of `l`.
    fn log_insert_sum(&self, l: &Loop) -> f64 {
        let nb = self.base_list.len() as f64;
        let s: f64 = l
            .beta_sections()
            .filter(|&v| self.spec.base[v] && !self.spec.avoid[v])
            .map(|v| 1.0 / (nb * self.loop_mass(v, l.k)))
            .sum();
        s.ln()
    }

    /// Energy terms involving `t`: self, all state loops except `skip`,
    /// frozen tracks, and the boundary.
    pub fn env_energy(&self, t: TrackRef<'_>, skip: &[usize]) -> f64 {
        let mut e = self.em.self_energy(t).total;
        if e.is_infinite() {
            return e;
        }
        for (j, o) in self.state.iter().enumerate() {
            if skip.contains(&j) {
                continue;
            }
            e += self.em.pair_energy(t, o.track()).total;
            if e.is_infinite() {
                return e;
            }
        }
        for f in &self.spec.frozen {
            e += self.em.pair_energy(t, f.track()).total;
            if e.is_infinite() {
                return e;
            }
        }
        e + self.em.boundary_energy(t, &self.spec.boundary).total
    }

    /// Full log target density of `loops` relative to nothing but the
    /// reference measure (used by the balance harness).
    pub fn log_target(&self, loops: &[Loop]) -> f64 {
        if loops.iter().any(|l| !self.spec.admissible(l) || l.k > self.params.k_max) {
            return f64::NEG_INFINITY;
        }
        let tracks: Vec<_> = loops.iter().map(Loop::track).collect();
        let mut h = self.em.total(&tracks, &self.spec.boundary).total;
        let frozen: Vec<_> = self.spec.frozen.iter().map(FrozenTrack::track).collect();
        h += self.em.cross(&tracks, &frozen).total;
        let w: f64 = loops
            .iter()
            .map(|l| l.k as f64 * self.params.z.ln() + self.reference.log_loop_density(l))
            .sum();
        w - h
    }

    /// Log density of proposing `info` from `from` and landing on `to`,
    /// recomputed from the move definitions.
    pub fn proposal_log_density(&self, from: &[Loop], to: &[Loop], info: &MoveInfo) -> f64 {
        let w = &self.spec.weights;
        let n = from.len() as f64;
        let m = self.params.m_tau as f64;
        let window = self.spec.window;
        let bridge = |l: &Loop, s0: usize, len: usize| -> f64 {
            let s = l.slices();
            let pts: Vec<&[f64]> = (0..=len).map(|j| l.x((s0 + j) % s)).collect();
            self.reference.log_bridge_density(&pts)
        };
        match *info {
            MoveInfo::Insert => {
                let l = to.last().expect("insert adds a loop");
                w.prob(MoveKind::Insert).ln()
                    + self.pk[l.k - 1].ln()
                    + self.log_insert_sum(l)
                    + self.reference.log_loop_density(l)
            }
            MoveInfo::Delete { .. } => w.prob(MoveKind::Delete).ln() - n.ln(),
            MoveInfo::Wiggle { idx, s0 } => {
                let l = &to[idx];
                let len = window.min(l.slices());
                w.prob(MoveKind::Wiggle).ln() - n.ln() - (l.slices() as f64).ln() + bridge(l, s0, len)
            }
            MoveInfo::Skeleton { idx, m: anchor } => {
                let l = &to[idx];
                w.prob(MoveKind::Skeleton).ln() - n.ln() - (l.k as f64).ln() + self.reference.log_loop_density(l)
                    - self.loop_mass(l.vertex[anchor * l.m] as usize, l.k).ln()
            }
            MoveInfo::Merge { i1, i2, t0, .. } => {
                let c = to.last().expect("merge adds a loop");
                let (k1, k2) = (from[i1].k as f64, from[i2].k as f64);
                let sb = from[i2].slices();
                w.prob(MoveKind::Merge).ln() - ln_choose2(from.len()) - m.ln() - k1.ln() - k2.ln()
                    + bridge(c, t0, window)
                    + bridge(c, t0 + sb, window)
            }
            MoveInfo::Split { idx, t0, .. } => {
                let k = from[idx].k;
                let (c1, c2) = (&to[to.len() - 2], &to[to.len() - 1]);
                w.prob(MoveKind::Split).ln() - n.ln() - m.ln() - ln_choose2(k) + bridge(c1, t0, window) + bridge(c2, t0, window)
            }
        }
    }

    /// Applies a proposal to a state list.
    pub fn apply_to(state: &mut Vec<Loop>, p: &Proposal) {
        if let Some((idx, l)) = &p.replaced {
            state[*idx] = l.clone();
        }
        let mut removed = p.removed.clone();
        removed.sort_unstable_by(|a, b| b.cmp(a));
        for idx in removed {
            state.remove(idx);
        }
        state.extend(p.added.iter().cloned());
    }

    pub fn propose(&mut self, kind: MoveKind) -> Option<Proposal> {
        match kind {
            MoveKind::Insert => self.propose_insert(),
            MoveKind::Delete => self.propose_delete(),
            MoveKind::Wiggle => self.propose_wiggle(),
            MoveKind::Skeleton => self.propose_skeleton(),
            MoveKind::Merge => self.propose_merge(),
            MoveKind::Split => self.propose_split(),
        }
    }

    fn propose_insert(&mut self) -> Option<Proposal> {
        let k = pick(&self.pk, &mut self.rng)? + 1;
        let v = self.base_list[self.rng.random_range(0..self.base_list.len())];
        let x: Vec<f64> = (0..self.params.d).map(|_| self.rng.random::<f64>()).collect();
        let (l, _) = self.reference.sample_loop(&x, v, k, &mut self.rng).ok()?;
        if !self.spec.admissible(&l) {
            return None;
        }
        let h = self.env_energy(l.track(), &[]);
        let w = &self.spec.weights;
        let log_accept = k as f64 * self.params.z.ln() - h + w.prob(MoveKind::Delete).ln()
            - ((self.state.len() + 1) as f64).ln()
            - w.prob(MoveKind::Insert).ln()
            - self.pk[k - 1].ln()
            - self.log_insert_sum(&l);
        Some(Proposal { kind: MoveKind::Insert, info: MoveInfo::Insert, removed: vec![], replaced: None, added: vec![l], log_accept })
    }

    fn propose_delete(&mut self) -> Option<Proposal> {
        let n = self.state.len();
        if n == 0 {
            return None;
        }
        let idx = self.rng.random_range(0..n);
        let l = &self.state[idx];
        let h = self.env_energy(l.track(), &[idx]);
        let w = &self.spec.weights;
        let log_accept = -(l.k as f64 * self.params.z.ln() - h + w.prob(MoveKind::Delete).ln()
            - (n as f64).ln()
            - w.prob(MoveKind::Insert).ln()
            - self.pk[l.k - 1].ln()
            - self.log_insert_sum(l));
        Some(Proposal {
            kind: MoveKind::Delete,
            info: MoveInfo::Delete { idx },
            removed: vec![idx],
            replaced: None,
            added: vec![],
            log_accept,
        })
    }

    fn propose_wiggle(&mut self) -> Option<Proposal> {
        let n = self.state.len();
        if n == 0 {
            return None;
        }
        let idx = self.rng.random_range(0..n);
        let old = self.state[idx].clone();
        let s = old.slices();
        let s0 = self.rng.random_range(0..s);
        let len = self.spec.window.min(s);
        if (0..len).any(|j| old.jump[(s0 + j) % s]) {
            return None;
        }
        let d = old.d;
        let inner = bridge_interior(old.x(s0), old.x((s0 + len) % s), self.reference.delta(), len, &mut self.rng);
        let mut new = old.clone();
        for j in 1..len {
            let slot = (s0 + j) % s;
            new.pos[slot * d..(slot + 1) * d].copy_from_slice(&inner[(j - 1) * d..j * d]);
        }
        let dh = self.env_energy(new.track(), &[idx]) - self.env_energy(old.track(), &[idx]);
        Some(Proposal {
            kind: MoveKind::Wiggle,
            info: MoveInfo::Wiggle { idx, s0 },
            removed: vec![],
            replaced: Some((idx, new)),
            added: vec![],
            log_accept: -dh,
        })
    }

    fn propose_skeleton(&mut self) -> Option<Proposal> {
        let n = self.state.len();
        if n == 0 {
            return None;
        }
        let idx = self.rng.random_range(0..n);
        let old = self.state[idx].clone();
        let m = self.rng.random_range(0..old.k);
        let anchor = m * old.m;
        let x = old.x(anchor).to_vec();
        let v = old.vertex[anchor] as usize;
        let (mut new, _) = self.reference.sample_loop(&x, v, old.k, &mut self.rng).ok()?;
        // Keep the anchor at its original slice.
        new.rotate(new.slices() - anchor);
        if !self.spec.admissible(&new) {
            return None;
        }
        let dh = self.env_energy(new.track(), &[idx]) - self.env_energy(old.track(), &[idx]);
        Some(Proposal {
            kind: MoveKind::Skeleton,
            info: MoveInfo::Skeleton { idx, m },
            removed: vec![],
            replaced: Some((idx, new)),
            added: vec![],
            log_accept: -dh,
        })
    }

    fn window_free(l: &Loop, start: usize, len: usize) -> bool {
        let s = l.slices();
        (0..len).all(|j| !l.jump[(start + j) % s])
    }

    fn ln_kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        self.reference.hk.log_step(self.spec.window as f64 * self.reference.delta(), x, y)
    }

    fn propose_merge(&mut self) -> Option<Proposal> {
        let n = self.state.len();
        if n < 2 {
            return None;
        }
        let i1 = self.rng.random_range(0..n);
        let mut i2 = self.rng.random_range(0..n - 1);
        if i2 >= i1 {
            i2 += 1;
        }
        let mm = self.params.m_tau;
        let t0 = self.rng.random_range(0..mm);
        let (a, b) = (self.state[i1].clone(), self.state[i2].clone());
        let (k1, k2) = (a.k, b.k);
        if k1 + k2 > self.params.k_max {
            return None;
        }
        let m1 = self.rng.random_range(0..k1);
        let m2 = self.rng.random_range(0..k2);
        let (sa, sb) = (t0 + m1 * mm, t0 + m2 * mm);
        let len = self.spec.window;
        if !Self::window_free(&a, sa, len) || !Self::window_free(&b, sb, len) || a.vertex[sa] != b.vertex[sb] {
            return None;
        }
        let (na, nb) = (a.slices(), b.slices());
        let dt = self.reference.delta();
        let br1 = bridge_interior(a.x(sa), b.x((sb + len) % nb), dt, len, &mut self.rng);
        let br2 = bridge_interior(b.x(sb), a.x((sa + len) % na), dt, len, &mut self.rng);
        let c = splice_merge(&a, sa, &b, sb, len, &br1, &br2, t0);
        let h_old = self.env_energy(a.track(), &[i1, i2])
            + self.env_energy(b.track(), &[i1, i2])
            + self.em.pair_energy(a.track(), b.track()).total;
        let h_new = self.env_energy(c.track(), &[i1, i2]);
        let w = &self.spec.weights;
        let k = k1 + k2;
        let log_accept = -(h_new - h_old)
            + self.ln_kernel(a.x(sa), b.x((sb + len) % nb))
            + self.ln_kernel(b.x(sb), a.x((sa + len) % na))
            - self.ln_kernel(a.x(sa), a.x((sa + len) % na))
            - self.ln_kernel(b.x(sb), b.x((sb + len) % nb))
            + w.prob(MoveKind::Split).ln()
            + ln_choose2(n)
            + (k1 as f64).ln()
            + (k2 as f64).ln()
            - w.prob(MoveKind::Merge).ln()
            - ((n - 1) as f64).ln()
            - ln_choose2(k);
        Some(Proposal {
            kind: MoveKind::Merge,
            info: MoveInfo::Merge { i1, i2, t0, m1, m2 },
            removed: vec![i1, i2],
            replaced: None,
            added: vec![c],
            log_accept,
        })
    }

    fn propose_split(&mut self) -> Option<Proposal> {
        let n = self.state.len();
        if n == 0 {
            return None;
        }
        let idx = self.rng.random_range(0..n);
        let c = self.state[idx].clone();
        let k = c.k;
        if k < 2 {
            return None;
        }
        let mm = self.params.m_tau;
        let t0 = self.rng.random_range(0..mm);
        // Uniform unordered pair m1 < m2.
        let p = self.rng.random_range(0..k * (k - 1) / 2);
        let (m1, m2) = unrank_pair(p, k);
        let (c1s, c2s) = (t0 + m1 * mm, t0 + m2 * mm);
        let len = self.spec.window;
        if !Self::window_free(&c, c1s, len) || !Self::window_free(&c, c2s, len) || c.vertex[c1s] != c.vertex[c2s] {
            return None;
        }
        let s = c.slices();
        let dt = self.reference.delta();
        let br1 = bridge_interior(c.x(c1s), c.x((c2s + len) % s), dt, len, &mut self.rng);
        let br2 = bridge_interior(c.x(c2s), c.x((c1s + len) % s), dt, len, &mut self.rng);
        let (l1, l2) = splice_split(&c, c1s, c2s, len, &br1, &br2, t0);
        if !self.spec.admissible(&l1) || !self.spec.admissible(&l2) {
            return None;
        }
        let h_old = self.env_energy(c.track(), &[idx]);
        let h_new = self.env_energy(l1.track(), &[idx]) + self.env_energy(l2.track(), &[idx])
            + self.em.pair_energy(l1.track(), l2.track()).total;
        let w = &self.spec.weights;
        let log_accept = -(h_new - h_old)
            + self.ln_kernel(c.x(c1s), c.x((c2s + len) % s))
            + self.ln_kernel(c.x(c2s), c.x((c1s + len) % s))
            - self.ln_kernel(c.x(c1s), c.x((c1s + len) % s))
            - self.ln_kernel(c.x(c2s), c.x((c2s + len) % s))
            + w.prob(MoveKind::Merge).ln()
            + (n as f64).ln()
            + ln_choose2(k)
            - w.prob(MoveKind::Split).ln()
            - ln_choose2(n + 1)
            - (l1.k as f64).ln()
            - (l2.k as f64).ln();
        Some(Proposal {
            kind: MoveKind::Split,
            info: MoveInfo::Split { idx, t0, m1, m2 },
            removed: vec![idx],
            replaced: None,
            added: vec![l1, l2],
            log_accept,
        })
    }

    /// One Metropolis–Hastings step. Returns the move kind and whether it
    /// was accepted.
    pub fn step(&mut self) -> (MoveKind, bool) {
        let w = self.spec.weights.0;
        let kind = MoveKind::ALL[pick(&w, &mut self.rng).expect("positive move weights")];
        self.stats[kind.index()].proposed += 1;
        let accepted = match self.propose(kind) {
            Some(p) if p.log_accept.is_finite() || p.log_accept == f64::INFINITY => {
                let u: f64 = self.rng.random();
                if p.log_accept >= 0.0 || u.ln() < p.log_accept {
                    Self::apply_to(&mut self.state, &p);
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        if accepted {
            self.stats[kind.index()].accepted += 1;
        }
        (kind, accepted)
    }

    pub fn sweep(&mut self, steps: usize) {
        for _ in 0..steps {
            self.step();
        }
    }

    /// Draws a proposal of `kind` from the current state and returns the
    /// gap between its incremental log ratio and the ratio recomputed from
    /// the full target and both proposal densities. Zero (to rounding) for
    /// a move satisfying detailed balance; `None` when nothing was proposed.
    pub fn balance_residual(&mut self, kind: MoveKind) -> Option<f64> {
        let p = self.propose(kind)?;
        let a = self.state.clone();
        let mut b = a.clone();
        Self::apply_to(&mut b, &p);
        let to_end = |v: &[Loop], idx: &[usize]| -> Vec<Loop> {
            let mut out: Vec<Loop> = v.iter().enumerate().filter(|(j, _)| !idx.contains(j)).map(|(_, l)| l.clone()).collect();
            out.extend(idx.iter().map(|&j| v[j].clone()));
            out
        };
        let fwd = self.log_target(&a) + self.proposal_log_density(&a, &b, &p.info);
        let rev = match p.info {
            MoveInfo::Insert => self.proposal_log_density(&b, &a, &MoveInfo::Delete { idx: a.len() }),
            MoveInfo::Delete { idx } => self.proposal_log_density(&b, &to_end(&a, &[idx]), &MoveInfo::Insert),
            MoveInfo::Wiggle { .. } | MoveInfo::Skeleton { .. } => self.proposal_log_density(&b, &a, &p.info),
            // Rotations by multiples of M leave loops unchanged; they line
            // the windows up with the slice indices the reverse move uses.
            MoveInfo::Merge { i1, i2, t0, m1, m2 } => {
                let mut back = to_end(&a, &[i1, i2]);
                let n = back.len();
                back[n - 2].rotate(m1 * self.params.m_tau);
                back[n - 1].rotate(m2 * self.params.m_tau);
                let info = MoveInfo::Split { idx: b.len() - 1, t0, m1: 0, m2: a[i2].k };
                self.proposal_log_density(&b, &back, &info)
            }
            MoveInfo::Split { idx, t0, m1, .. } => {
                let mut back = to_end(&a, &[idx]);
                let n = back.len();
                back[n - 1].rotate(m1 * self.params.m_tau);
                let info = MoveInfo::Merge { i1: b.len() - 2, i2: b.len() - 1, t0, m1: 0, m2: 0 };
                self.proposal_log_density(&b, &back, &info)
            }
        };
        let exact = self.log_target(&b) + rev - fwd;
        if exact == f64::NEG_INFINITY && p.log_accept == f64::NEG_INFINITY {
            return Some(0.0);
        }
        Some(p.log_accept - exact)
    }

    /// Occupancy cap and confinement over the state and frozen tracks.
    pub fn check_invariants(&self) -> Result<(), String> {
        let nv = self.graph.vertex_count();
        for (i, l) in self.state.iter().enumerate() {
            if !l.vertex.iter().all(|&v| self.spec.container[v as usize]) {
                return Err(format!("loop {i} leaves the container"));
            }
        }
        if let Some(kappa) = self.params.kappa() {
            let tracks = self.state.iter().map(Loop::track).chain(self.spec.frozen.iter().map(FrozenTrack::track));
            let occ = occupancy_of(tracks, self.params.m_tau, nv);
            for (t, row) in occ.iter().enumerate() {
                for (v, &c) in row.iter().enumerate() {
                    if c as usize > kappa {
                        return Err(format!("occupancy {c} > {kappa} at vertex {v}, slice {t}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.stats.iter().map(|s| if s.proposed == 0 { 0.0 } else { s.accepted as f64 / s.proposed as f64 }).collect()
    }

    /// Whether any loop has a β-section in `set`.
    pub fn occupies_at_zero(&self, set: &[bool]) -> bool {
        self.state.iter().any(|l| l.beta_sections().any(|v| set[v]))
    }
}

fn unrank_pair(mut p: usize, k: usize) -> (usize, usize) {
    for a in 0..k {
        let row = k - a - 1;
        if p < row {
            return (a, a + 1 + p);
        }
        p -= row;
    }
    unreachable!("pair rank out of range")
}

struct Builder {
    vertex: Vec<u32>,
    jump: Vec<bool>,
    pos: Vec<f64>,
    d: usize,
}

impl Builder {
    fn new(d: usize) -> Self {
        Self { vertex: Vec::new(), jump: Vec::new(), pos: Vec::new(), d }
    }

    fn slice(&mut self, l: &Loop, s: usize, jump: bool) {
        let s = s % l.slices();
        self.vertex.push(l.vertex[s]);
        self.jump.push(jump);
        self.pos.extend_from_slice(l.x(s));
    }

    fn bridge(&mut self, v: u32, pts: &[f64]) {
        for p in pts.chunks(self.d) {
            self.vertex.push(v);
            self.jump.push(false);
            self.pos.extend_from_slice(p);
        }
    }

    /// Finishes a loop whose first slice sits at absolute time `t0`.
    fn finish(self, m: usize, t0: usize) -> Loop {
        let s = self.vertex.len();
        let mut l = Loop { k: s / m, m, d: self.d, vertex: self.vertex, jump: self.jump, pos: self.pos };
        l.rotate(s - t0 % s);
        l
    }
}

/// Joins `a` and `b` by cross-connecting the windows at `sa` and `sb`.
#[allow(clippy::too_many_arguments)]
fn splice_merge(a: &Loop, sa: usize, b: &Loop, sb: usize, len: usize, br1: &[f64], br2: &[f64], t0: usize) -> Loop {
    let (na, nb) = (a.slices(), b.slices());
    let v = a.vertex[sa];
    let mut out = Builder::new(a.d);
    out.slice(a, sa, false);
    out.bridge(v, br1);
    for j in 0..=(nb - len) {
        let s = sb + len + j;
        let last = j == nb - len;
        out.slice(b, s, !last && b.jump[s % nb]);
    }
    out.bridge(v, br2);
    for j in 0..(na - len) {
        let s = sa + len + j;
        out.slice(a, s, a.jump[s % na]);
    }
    out.finish(a.m, t0)
}

/// Cuts `c` at the windows starting at `c1 < c2` into two loops.
fn splice_split(c: &Loop, c1: usize, c2: usize, len: usize, br1: &[f64], br2: &[f64], t0: usize) -> (Loop, Loop) {
    let s = c.slices();
    let v = c.vertex[c1 % s];
    let gap = c2 - c1;
    let mut first = Builder::new(c.d);
    first.slice(c, c1, false);
    first.bridge(v, br1);
    for j in 0..(s - gap - len) {
        let t = c2 + len + j;
        first.slice(c, t, c.jump[t % s]);
    }
    let mut second = Builder::new(c.d);
    second.slice(c, c2, false);
    second.bridge(v, br2);
    for j in 0..(gap - len) {
        let t = c1 + len + j;
        second.slice(c, t, c.jump[t % s]);
    }
    (first.finish(c.m, t0), second.finish(c.m, t0))
}

/// Burn-in, sampling and thinning of a batch of independent chains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    /// Steps between recorded samples.
    pub thin: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Output of [`run_chains`]: per-observable series per chain.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// `series[obs][chain]`.
    pub series: Vec<Vec<Vec<f64>>>,
    pub acceptance: Vec<f64>,
}

impl ChainOutput {
    pub fn report(&self, obs: usize, seed: u64) -> Result<EstimatorReport, GibbsError> {
        let s = batch_means(&self.series[obs]);
        if s.batches < MIN_BATCHES || !s.std_error.is_finite() {
            return Err(GibbsError::NoConvergence(format!("only {} batches", s.batches)));
        }
        Ok(EstimatorReport {
            value: s.mean,
            std_error: s.std_error,
            n_samples: s.n,
            seed,
            diagnostics: Diagnostics { acceptance: self.acceptance.clone(), tau_int: s.tau_int, batches: s.batches },
        })
    }
}

/// Runs `cfg.chains` chains in parallel. `make` builds the sampler for a
/// chain from its RNG; `observe` records one value per observable. The
/// output is independent of the thread count.
pub fn run_chains<'a, M, O>(cfg: &RunConfig, n_obs: usize, make: M, observe: O) -> Result<ChainOutput, GibbsError>
where
    M: Fn(ChaCha8Rng) -> Result<GibbsSampler<'a>, GibbsError> + Sync,
    O: Fn(&mut GibbsSampler<'a>, &mut Vec<f64>) + Sync,
{
    let per_chain: Vec<Result<ChainSamples, GibbsError>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut s = make(chain_rng(cfg.seed, c as u64))?;
            s.sweep(cfg.burn_in);
            let mut out = vec![Vec::with_capacity(cfg.samples); n_obs];
            let mut buf = Vec::with_capacity(n_obs);
            for _ in 0..cfg.samples {
                s.sweep(cfg.thin.max(1));
                buf.clear();
                observe(&mut s, &mut buf);
                for (o, v) in out.iter_mut().zip(&buf) {
                    o.push(*v);
                }
            }
            Ok((out, s.stats))
        })
        .collect();
    let mut series = vec![Vec::with_capacity(cfg.chains); n_obs];
    let mut stats = [MoveStat::default(); 6];
    for r in per_chain {
        let (out, st) = r?;
        for (dst, src) in series.iter_mut().zip(out) {
            dst.push(src);
        }
        for (a, b) in stats.iter_mut().zip(st) {
            a.proposed += b.proposed;
            a.accepted += b.accepted;
        }
    }
    let acceptance = stats.iter().map(|s| if s.proposed == 0 { 0.0 } else { s.accepted as f64 / s.proposed as f64 }).collect();
    Ok(ChainOutput { series, acceptance })
}

/// `ln Ξ` by thermodynamic integration: `d ln Ξ / d ln z = ⟨Σk⟩`, so
/// `ln Ξ(z) = ∫_0^1 ⟨Σk⟩_{sz} / s ds`, evaluated with Gauss–Legendre
/// nodes in `s` and an independent run per node.
pub fn estimate_xi(
    params: &ModelParams,
    graph: &Graph,
    spec: &SamplerSpec,
    cfg: &RunConfig,
    nodes: usize,
) -> Result<EstimatorReport, GibbsError> {
    if params.z == 0.0 {
        return Ok(EstimatorReport::exact(0.0, cfg.seed));
    }
    let (s_nodes, s_weights) = gauss_legendre(nodes, 0.0, 1.0);
    let mut value = 0.0;
    let mut var = 0.0;
    let mut n = 0;
    let mut acc = vec![0.0; 6];
    for (q, (s, w)) in s_nodes.iter().zip(&s_weights).enumerate() {
        let p = ModelParams { z: params.z * s, ..params.clone() };
        let reference = Reference::new(&p, graph);
        let run = cfg.with_seed(cfg.seed.wrapping_add(q as u64 * 0x9E37_79B9));
        let out = run_chains(
            &run,
            1,
            |rng| GibbsSampler::new(&p, graph, &reference, spec.clone(), rng),
            |s, buf| buf.push(s.total_k() as f64),
        )?;
        let r = out.report(0, run.seed)?;
        value += w * r.value / s;
        var += (w * r.std_error / s).powi(2);
        n += r.n_samples;
        for (a, b) in acc.iter_mut().zip(&r.diagnostics.acceptance) {
            *a += b / nodes as f64;
        }
    }
    Ok(EstimatorReport {
        value,
        std_error: var.sqrt(),
        n_samples: n,
        seed: cfg.seed,
        diagnostics: Diagnostics { acceptance: acc, tau_int: f64::NAN, batches: MIN_BATCHES * nodes },
    })
}
