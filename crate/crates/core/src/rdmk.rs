//! Reduced density matrix kernels and the conditional (DLR) check.
//!
//! For a subvolume `Λ⁰` and arguments `x = (x_1..x_n)`, `y = (y_1..y_n)`
//! the kernel is estimated as `E_μ[X]` over the loop gas of `Λ`, where
//! `X` vanishes when a loop has a β-section in `Λ⁰` and otherwise sums,
//! over matchings `γ`, the weight of open paths `x_p -> y_γ(p)` sampled
//! from the reference measure and reweighted by their energy, their
//! interaction with the loops, and the boundary.

use rand::Rng;
use serde::Serialize;

use crate::energy::{confinement_indicator, f_sieve};
use crate::gibbs::{chain_rng, run_chains, FrozenTrack, GibbsError, GibbsSampler, RunConfig, SamplerSpec};
use crate::graph::Graph;
use crate::jumps::pick;
use crate::loops::{Loop, Matching, OpenPath, Reference, TrackRef};
use crate::params::{phi, ModelParams};
use crate::stats::EstimatorReport;

/// A point of the single-particle space: vertex and torus position.
pub type Site = (usize, Vec<f64>);

/// Arguments `(x, y)` of a kernel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Arguments {
    pub x: Vec<Site>,
    pub y: Vec<Site>,
}

impl Arguments {
    pub fn empty() -> Self {
        Self { x: Vec::new(), y: Vec::new() }
    }

    pub fn diagonal(x: Vec<Site>) -> Self {
        Self { y: x.clone(), x }
    }
}

/// `z^k m_k(x,i; y,j)` for `k = 1..=k_max`.
pub fn path_weights(reference: &Reference, p: &ModelParams, from: &Site, to: &Site) -> Vec<f64> {
    (1..=p.k_max)
        .map(|k| p.z.powi(k as i32) * reference.path_mass(&from.1, from.0, &to.1, to.0, k))
        .collect()
}

/// Energy weight `exp(-h)` of a family of open paths against the current
/// state of `s`, including indicator factors. Zero when a path leaves the
/// container or has an interior β-section in `lambda0`.
pub fn path_family_weight(s: &GibbsSampler<'_>, lambda0: &[bool], paths: &[OpenPath]) -> f64 {
    let tracks: Vec<TrackRef<'_>> = paths.iter().map(OpenPath::track).collect();
    let ends_inside = paths.iter().all(|p| s.spec.container[p.vertex[p.slices()] as usize]);
    if !ends_inside || !confinement_indicator(&tracks, &s.spec.container) || !f_sieve(&tracks, lambda0) {
        return 0.0;
    }
    let em = s.energy_model();
    let mut h = em.total(&tracks, &s.spec.boundary).total;
    let loops: Vec<TrackRef<'_>> = s.state.iter().map(Loop::track).collect();
    h += em.cross(&tracks, &loops).total;
    let frozen: Vec<TrackRef<'_>> = s.spec.frozen.iter().map(FrozenTrack::track).collect();
    h += em.cross(&tracks, &frozen).total;
    (-h).exp()
}

/// One draw of the kernel integrand `X` at the sampler's current state,
/// averaging `replicas` path families per matching.
pub fn rdmk_integrand(s: &mut GibbsSampler<'_>, lambda0: &[bool], args: &Arguments, replicas: usize) -> f64 {
    if args.x.len() != args.y.len() || s.occupies_at_zero(lambda0) {
        return 0.0;
    }
    let n = args.x.len();
    if n == 0 {
        return 1.0;
    }
    let weights: Vec<Vec<Vec<f64>>> = args
        .x
        .iter()
        .map(|x| args.y.iter().map(|y| path_weights(s.reference, s.params, x, y)).collect())
        .collect();
    let mut total = 0.0;
    for gamma in Matching::all(n) {
        let z: f64 = (0..n).map(|p| weights[p][gamma.image(p)].iter().sum::<f64>()).product();
        if z == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for _ in 0..replicas {
            let mut paths = Vec::with_capacity(n);
            for p in 0..n {
                let (x, y) = (&args.x[p], &args.y[gamma.image(p)]);
                let k = pick(&weights[p][gamma.image(p)], &mut s.rng).expect("positive path weight") + 1;
                let (path, _) = s.reference.sample_open_path(&x.1, x.0, &y.1, y.0, k, &mut s.rng).expect("reachable endpoints");
                paths.push(path);
            }
            acc += path_family_weight(s, lambda0, &paths);
        }
        total += z * acc / replicas as f64;
    }
    total
}

/// Monte Carlo estimate of the kernel at `args`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_rdmk(
    params: &ModelParams,
    graph: &Graph,
    reference: &Reference,
    spec: &SamplerSpec,
    lambda0: &[bool],
    args: &Arguments,
    cfg: &RunConfig,
    replicas: usize,
) -> Result<EstimatorReport, GibbsError> {
    let out = run_chains(
        cfg,
        1,
        |rng| GibbsSampler::new(params, graph, reference, spec.clone(), rng),
        |s, buf| buf.push(rdmk_integrand(s, lambda0, args, replicas)),
    )?;
    out.report(0, cfg.seed)
}

/// `(κ♯Λ⁰)! p̂^{κ♯Λ⁰} Φ^{♯Λ⁰}`, the a-priori bound on kernel values.
/// `None` without a hard core or above the fugacity gate.
pub fn kernel_bound(params: &ModelParams, graph: &Graph, reference: &Reference, lambda0: &[bool]) -> Option<f64> {
    let kappa = params.kappa()?;
    let phi = phi(params.z, params.theta(graph))?;
    let sites = lambda0.iter().filter(|&&b| b).count();
    let n = kappa * sites;
    let fact: f64 = (1..=n).map(|i| i as f64).product();
    Some(fact * reference.hk.phat(params.beta, params.k_max).powi(n as i32) * phi.powi(sites as i32))
}

/// Monte Carlo estimate of the trace `Σ_n (1/n!) ∫ F(x,x) dx` over up to
/// `n_max` particles in `Λ⁰`, with arguments drawn uniformly.
#[allow(clippy::too_many_arguments)]
pub fn estimate_trace(
    params: &ModelParams,
    graph: &Graph,
    reference: &Reference,
    spec: &SamplerSpec,
    lambda0: &[bool],
    n_max: usize,
    cfg: &RunConfig,
    replicas: usize,
) -> Result<EstimatorReport, GibbsError> {
    let sites: Vec<usize> = (0..lambda0.len()).filter(|&v| lambda0[v]).collect();
    let out = run_chains(
        cfg,
        1,
        |rng| GibbsSampler::new(params, graph, reference, spec.clone(), rng),
        |s, buf| {
            let mut total = 0.0;
            let mut volume = 1.0;
            for n in 0..=n_max {
                if n > 0 {
                    volume *= sites.len() as f64 / n as f64;
                }
                let x: Vec<Site> = (0..n)
                    .map(|_| {
                        let v = sites[s.rng.random_range(0..sites.len())];
                        (v, (0..params.d).map(|_| s.rng.random()).collect())
                    })
                    .collect();
                total += volume * rdmk_integrand(s, lambda0, &Arguments::diagonal(x), replicas);
            }
            buf.push(total);
        },
    )?;
    out.report(0, cfg.seed)
}

/// Splits loops into those with a β-section in `set` and the rest.
pub fn split_by_beta(loops: &[Loop], set: &[bool]) -> (Vec<Loop>, Vec<Loop>) {
    loops.iter().cloned().partition(|l| l.beta_sections().any(|v| set[v]))
}

fn inner_spec(outer: &SamplerSpec, lambda_prime: &[bool], env: &[Loop]) -> SamplerSpec {
    let mut frozen = outer.frozen.clone();
    frozen.extend(env.iter().map(FrozenTrack::from));
    SamplerSpec {
        base: lambda_prime.iter().zip(&outer.base).map(|(a, b)| *a && *b).collect(),
        frozen,
        ..outer.clone()
    }
}

/// The conditional density `q^{Λ⁰}_{Λ'}(Ω̄⁰ | env)`: the weight of the
/// fixed paths `omega0` given the environment loops `env` (none of which
/// has a β-section in `Λ'`), averaged over loops hitting `Λ'`.
#[allow(clippy::too_many_arguments)]
pub fn conditional_rdmf(
    params: &ModelParams,
    graph: &Graph,
    reference: &Reference,
    spec: &SamplerSpec,
    lambda0: &[bool],
    lambda_prime: &[bool],
    omega0: &[OpenPath],
    env: &[Loop],
    cfg: &RunConfig,
) -> Result<EstimatorReport, GibbsError> {
    let inner = inner_spec(spec, lambda_prime, env);
    let probe = GibbsSampler::new(params, graph, reference, inner.clone(), chain_rng(cfg.seed, u64::MAX))?;
    let prefactor = path_family_weight(&probe, lambda0, omega0);
    if prefactor == 0.0 {
        return Ok(EstimatorReport::exact(0.0, cfg.seed));
    }
    let tracks: Vec<TrackRef<'_>> = omega0.iter().map(OpenPath::track).collect();
    let out = run_chains(
        cfg,
        1,
        |rng| GibbsSampler::new(params, graph, reference, inner.clone(), rng),
        |s, buf| {
            let v = if s.occupies_at_zero(lambda0) {
                0.0
            } else {
                let loops: Vec<TrackRef<'_>> = s.state.iter().map(Loop::track).collect();
                (-s.energy_model().cross(&tracks, &loops).total).exp()
            };
            buf.push(prefactor * v);
        },
    )?;
    out.report(0, cfg.seed)
}

/// Inner-chain budget for the nested estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InnerConfig {
    pub samples: usize,
    pub thin: usize,
}

/// Direct and nested estimates of one kernel value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DlrRow {
    pub direct: f64,
    pub direct_se: f64,
    pub conditional: f64,
    pub conditional_se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DlrReport {
    pub rows: Vec<DlrRow>,
    pub max_discrepancy: f64,
    pub max_abs_z: f64,
}

/// Compares the direct kernel estimate in `Λ` with the average, over the
/// environment outside `Λ'`, of the conditional estimate given that
/// environment. The inner chain starts from the outer chain's own loops
/// in `Λ'`, which are an exact draw from the conditional law.
#[allow(clippy::too_many_arguments)]
pub fn verify_dlr(
    params: &ModelParams,
    graph: &Graph,
    reference: &Reference,
    spec: &SamplerSpec,
    lambda0: &[bool],
    lambda_prime: &[bool],
    args: &[Arguments],
    outer: &RunConfig,
    inner: &InnerConfig,
    replicas: usize,
) -> Result<DlrReport, GibbsError> {
    let direct = run_chains(
        outer,
        args.len(),
        |rng| GibbsSampler::new(params, graph, reference, spec.clone(), rng),
        |s, buf| buf.extend(args.iter().map(|a| rdmk_integrand(s, lambda0, a, replicas))),
    )?;
    let nested_cfg = outer.with_seed(outer.seed ^ 0x5EED_D1A5);
    let nested = run_chains(
        &nested_cfg,
        args.len(),
        |rng| GibbsSampler::new(params, graph, reference, spec.clone(), rng),
        |s, buf| {
            let (inside, env) = split_by_beta(&s.state, lambda_prime);
            let seed: u64 = s.rng.random();
            let mut sub = GibbsSampler::new(s.params, s.graph, s.reference, inner_spec(&s.spec, lambda_prime, &env), chain_rng(seed, 0))
                .expect("inner spec inherits a valid outer spec");
            sub.state = inside;
            let mut sums = vec![0.0; args.len()];
            for _ in 0..inner.samples {
                sub.sweep(inner.thin.max(1));
                for (acc, a) in sums.iter_mut().zip(args) {
                    *acc += rdmk_integrand(&mut sub, lambda0, a, replicas);
                }
            }
            buf.extend(sums.iter().map(|v| v / inner.samples as f64));
        },
    )?;
    let mut rows = Vec::with_capacity(args.len());
    for i in 0..args.len() {
        let d = direct.report(i, outer.seed)?;
        let c = nested.report(i, nested_cfg.seed)?;
        let se = d.std_error.hypot(c.std_error);
        let z = if se > 0.0 { (d.value - c.value) / se } else if d.value == c.value { 0.0 } else { f64::INFINITY };
        rows.push(DlrRow { direct: d.value, direct_se: d.std_error, conditional: c.value, conditional_se: c.std_error, z });
    }
    let max_discrepancy = rows.iter().map(|r| (r.direct - r.conditional).abs()).fold(0.0, f64::max);
    let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    Ok(DlrReport { rows, max_discrepancy, max_abs_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DecayProfile;
    use crate::params::Potentials;

    fn params(rho: f64) -> ModelParams {
        ModelParams {
            d: 1,
            beta: 1.0,
            z: 0.3,
            potentials: Potentials { u1: 0.1, u1_wave: vec![1.0], rho_hc: rho, ..Default::default() },
            lambda0: 0.5,
            decay: DecayProfile::Nearest { amp: 0.5 },
            m_tau: 4,
            k_max: 4,
        }
    }

    fn cfg(samples: usize) -> RunConfig {
        RunConfig { chains: 4, burn_in: 200, samples, thin: 5, seed: 3 }
    }

    #[test]
    fn empty_arguments_give_the_empty_set_probability() {
        let p = params(0.0);
        let g = Graph::path(2);
        let r = Reference::new(&p, &g);
        let spec = SamplerSpec::volume(vec![true; 2], 4);
        let none = vec![false; 2];
        let all = estimate_rdmk(&p, &g, &r, &spec, &none, &Arguments::empty(), &cfg(200), 1).unwrap();
        assert_eq!((all.value, all.std_error), (1.0, 0.0));
        let mismatch = Arguments { x: vec![(0, vec![0.1])], y: vec![] };
        let zero = estimate_rdmk(&p, &g, &r, &spec, &none, &mismatch, &cfg(200), 1).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn conditional_density_of_nothing_is_one() {
        let p = params(0.3);
        let g = Graph::path(2);
        let r = Reference::new(&p, &g);
        let spec = SamplerSpec::volume(vec![true; 2], 4);
        let q = conditional_rdmf(&p, &g, &r, &spec, &[false; 2], &[true, false], &[], &[], &cfg(200)).unwrap();
        assert_eq!((q.value, q.std_error), (1.0, 0.0));
    }

    #[test]
    fn hard_core_blocks_overfull_arguments() {
        // κ = 1 at ρ = 0.6: two particles on one vertex are excluded.
        let p = params(0.6);
        let g = Graph::path(2);
        let r = Reference::new(&p, &g);
        let spec = SamplerSpec::volume(vec![true; 2], 4);
        let args = Arguments::diagonal(vec![(0, vec![0.1]), (0, vec![0.6])]);
        let f = estimate_rdmk(&p, &g, &r, &spec, &[true, false], &args, &cfg(100), 2).unwrap();
        assert_eq!(f.value, 0.0);
    }
}
