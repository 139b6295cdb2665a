//! Energy functionals of loops and paths on the time grid, bosonic
//! weights, and the confinement and sieve indicators.
//!
//! Every time integral is a Riemann sum with weight `δ = β/M` over grid
//! slices. Two sections at the same absolute time interact through `U2`
//! when they sit on the same vertex and through `J(d)·V` otherwise; this
//! applies between different tracks and between the legs of one track.

use serde::Serialize;
use thiserror::Error;

use crate::graph::{Graph, UNREACHABLE};
use crate::loops::{LoopConfiguration, OpenPath, TrackRef};
use crate::params::{ModelParams, Potentials};

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("boundary holds {count} points at vertex {vertex}, above the cap {kappa}")]
    BoundaryOccupancy { vertex: usize, count: usize, kappa: usize },
}

/// Fixed particles outside the volume: `(vertex, position)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Boundary {
    pub points: Vec<(u32, Vec<f64>)>,
}

impl Boundary {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_occupancy(&self, kappa: Option<usize>, vertex_count: usize) -> Result<(), EnergyError> {
        let Some(kappa) = kappa else { return Ok(()) };
        let mut counts = vec![0usize; vertex_count];
        for (v, _) in &self.points {
            counts[*v as usize] += 1;
        }
        match counts.iter().position(|&c| c > kappa) {
            Some(v) => Err(EnergyError::BoundaryOccupancy { vertex: v, count: counts[v], kappa }),
            None => Ok(()),
        }
    }
}

/// Location of the first hard-core clash found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub vertex: usize,
    /// Slice index in the first track involved.
    pub slice: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub one_body: f64,
    pub same_site_pair: f64,
    pub cross_site_pair: f64,
    pub boundary: f64,
    pub total: f64,
    pub violation: Option<Violation>,
}

impl EnergyBreakdown {
    fn finish(mut self) -> Self {
        self.total = if self.violation.is_some() {
            f64::INFINITY
        } else {
            self.one_body + self.same_site_pair + self.cross_site_pair + self.boundary
        };
        self
    }

    fn clash(vertex: usize, slice: usize) -> Self {
        Self { violation: Some(Violation { vertex, slice }), ..Self::default() }.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.violation.is_none()
    }

    /// Field-wise sum; the first violation wins.
    pub fn plus(self, o: Self) -> Self {
        Self {
            one_body: self.one_body + o.one_body,
            same_site_pair: self.same_site_pair + o.same_site_pair,
            cross_site_pair: self.cross_site_pair + o.cross_site_pair,
            boundary: self.boundary + o.boundary,
            total: 0.0,
            violation: self.violation.or(o.violation),
        }
        .finish()
    }
}

/// Evaluator bound to one parameter set and graph.
#[derive(Debug, Clone)]
pub struct EnergyModel<'a> {
    pot: &'a Potentials,
    g: &'a Graph,
    dt: f64,
    jtab: Vec<f64>,
    same_site: bool,
    cross_site: bool,
}

impl<'a> EnergyModel<'a> {
    pub fn new(p: &'a ModelParams, g: &'a Graph) -> Self {
        let range = match p.decay.support_radius() {
            Some(r) => r as usize,
            None => g.vertex_count(),
        };
        let jtab: Vec<f64> = (0..=range.min(g.vertex_count())).map(|r| p.decay.value(r as u32)).collect();
        Self {
            pot: &p.potentials,
            g,
            dt: p.delta(),
            cross_site: p.potentials.v0 != 0.0 && jtab.iter().any(|&j| j != 0.0),
            same_site: p.potentials.has_hard_core() || p.potentials.u2 != 0.0,
            jtab,
        }
    }

    pub fn graph(&self) -> &'a Graph {
        self.g
    }

    pub fn potentials(&self) -> &'a Potentials {
        self.pot
    }

    #[inline]
    fn coupling(&self, a: usize, b: usize) -> f64 {
        let d = self.g.dist(a, b);
        if d == UNREACHABLE {
            0.0
        } else {
            self.jtab.get(d as usize).copied().unwrap_or(0.0)
        }
    }

    /// Adds the interaction of two sections into `e`; false on a clash.
    #[inline]
    fn section_pair(&self, va: usize, xa: &[f64], vb: usize, xb: &[f64], e: &mut EnergyBreakdown, boundary: bool) -> bool {
        if va == vb {
            if self.same_site {
                let u = self.pot.u2_at(xa, xb);
                if u.is_infinite() {
                    return false;
                }
                if boundary {
                    e.boundary += self.dt * u;
                } else {
                    e.same_site_pair += self.dt * u;
                }
            }
        } else if self.cross_site {
            let j = self.coupling(va, vb);
            if j != 0.0 {
                let w = self.dt * j * self.pot.v_at(xa, xb);
                if boundary {
                    e.boundary += w;
                } else {
                    e.cross_site_pair += w;
                }
            }
        }
        true
    }

    /// One-body energy plus interactions between the legs of one track.
    pub fn self_energy(&self, t: TrackRef<'_>) -> EnergyBreakdown {
        let mut e = EnergyBreakdown::default();
        if self.pot.u1 != 0.0 {
            e.one_body = self.dt * (0..t.slices()).map(|s| self.pot.u1_at(t.x(s))).sum::<f64>();
        }
        if t.k > 1 && (self.same_site || self.cross_site) {
            for tau in 0..t.m {
                for ma in 0..t.k {
                    let sa = tau + ma * t.m;
                    for mb in (ma + 1)..t.k {
                        let sb = tau + mb * t.m;
                        if !self.section_pair(t.v(sa), t.x(sa), t.v(sb), t.x(sb), &mut e, false) {
                            return EnergyBreakdown::clash(t.v(sa), sa);
                        }
                    }
                }
            }
        }
        e.finish()
    }

    /// Interaction between two distinct tracks on the same grid.
    pub fn pair_energy(&self, a: TrackRef<'_>, b: TrackRef<'_>) -> EnergyBreakdown {
        let mut e = EnergyBreakdown::default();
        if !(self.same_site || self.cross_site) {
            return e.finish();
        }
        for tau in 0..a.m {
            for ma in 0..a.k {
                let sa = tau + ma * a.m;
                let (va, xa) = (a.v(sa), a.x(sa));
                for mb in 0..b.k {
                    let sb = tau + mb * b.m;
                    if !self.section_pair(va, xa, b.v(sb), b.x(sb), &mut e, false) {
                        return EnergyBreakdown::clash(va, sa);
                    }
                }
            }
        }
        e.finish()
    }

    /// Interaction of a track with static boundary particles.
    pub fn boundary_energy(&self, t: TrackRef<'_>, bd: &Boundary) -> EnergyBreakdown {
        let mut e = EnergyBreakdown::default();
        if bd.is_empty() || !(self.same_site || self.cross_site) {
            return e.finish();
        }
        for s in 0..t.slices() {
            let (v, x) = (t.v(s), t.x(s));
            for (bv, bx) in &bd.points {
                if !self.section_pair(v, x, *bv as usize, bx, &mut e, true) {
                    return EnergyBreakdown::clash(v, s);
                }
            }
        }
        e.finish()
    }

    /// Full energy of a set of tracks, optionally against a boundary.
    pub fn total(&self, tracks: &[TrackRef<'_>], bd: &Boundary) -> EnergyBreakdown {
        let mut e = EnergyBreakdown::default().finish();
        for (i, a) in tracks.iter().enumerate() {
            e = e.plus(self.self_energy(*a));
            for b in &tracks[i + 1..] {
                e = e.plus(self.pair_energy(*a, *b));
            }
            e = e.plus(self.boundary_energy(*a, bd));
            if !e.is_finite() {
                return e;
            }
        }
        e
    }

    /// Interaction energy between two groups of tracks (no self terms).
    pub fn cross(&self, a: &[TrackRef<'_>], b: &[TrackRef<'_>]) -> EnergyBreakdown {
        let mut e = EnergyBreakdown::default().finish();
        for x in a {
            for y in b {
                e = e.plus(self.pair_energy(*x, *y));
                if !e.is_finite() {
                    return e;
                }
            }
        }
        e
    }
}

/// `h^Λ` of a loop configuration.
pub fn loop_energy(p: &ModelParams, g: &Graph, c: &LoopConfiguration) -> EnergyBreakdown {
    let tracks: Vec<_> = c.loops.iter().map(|l| l.track()).collect();
    EnergyModel::new(p, g).total(&tracks, &Boundary::default())
}

/// `h^{Λ⁰}` of a family of open paths.
pub fn open_path_energy(p: &ModelParams, g: &Graph, paths: &[OpenPath]) -> EnergyBreakdown {
    let tracks: Vec<_> = paths.iter().map(|l| l.track()).collect();
    EnergyModel::new(p, g).total(&tracks, &Boundary::default())
}

/// `h(Ω ∥ x̄)`: interaction of tracks with boundary particles only.
pub fn boundary_energy(p: &ModelParams, g: &Graph, tracks: &[TrackRef<'_>], bd: &Boundary) -> Result<f64, EnergyError> {
    bd.check_occupancy(p.kappa(), g.vertex_count())?;
    let em = EnergyModel::new(p, g);
    Ok(tracks.iter().map(|t| em.boundary_energy(*t, bd).total).sum())
}

/// `ln B = Σ (k ln z - ln k)` over loops.
pub fn log_bosonic_weight(c: &LoopConfiguration, z: f64) -> f64 {
    c.loops.iter().map(|l| l.k as f64 * z.ln() - (l.k as f64).ln()).sum()
}

pub fn bosonic_weight(c: &LoopConfiguration, z: f64) -> f64 {
    if c.loops.is_empty() {
        1.0
    } else {
        log_bosonic_weight(c, z).exp()
    }
}

/// `B̄ = ∏ z^k` over open paths.
pub fn open_path_weight(paths: &[OpenPath], z: f64) -> f64 {
    z.powi(paths.iter().map(|p| p.k as i32).sum())
}

/// Whether every section of every track lies in `container`.
pub fn confinement_indicator(tracks: &[TrackRef<'_>], container: &[bool]) -> bool {
    tracks.iter().all(|t| t.vertex.iter().all(|&v| container[v as usize]))
}

/// Whether every interior β-multiple section `lβ`, `1 <= l < k`, avoids
/// `forbidden`.
pub fn f_sieve(tracks: &[TrackRef<'_>], forbidden: &[bool]) -> bool {
    tracks.iter().all(|t| (1..t.k).all(|l| !forbidden[t.v(l * t.m)]))
}
