//! One function per command. Each fills tables; the caller writes them,
//! also when a command stops early.

use std::path::PathBuf;

use anyhow::anyhow;
use clap::ValueEnum;
use fkloopgas::energy::Boundary;
use fkloopgas::gibbs::{estimate_xi, run_chains, GibbsError, GibbsSampler, MoveKind, SamplerSpec};
use fkloopgas::graph::{check_bidimensional, jbar, jstar, Graph, LatticeKind};
use fkloopgas::loops::Reference;
use fkloopgas::mw::{build_profile, invariance_test, lipschitz_scan, q_profile, tail_probability_bound, upsilon};
use fkloopgas::oracle::{
    noninteracting_log_xi, singlevertex_quadrature, surrogate_path_expansion, surrogate_xi, trotter_xi, SurrogateModel,
};
use fkloopgas::params::{check_gate, phi, phi_prime};
use fkloopgas::quad::gauss_legendre;
use fkloopgas::rdmk::{estimate_rdmk, estimate_trace, kernel_bound, verify_dlr, Arguments, InnerConfig};
use fkloopgas::torus::{GroupElement, HeatKernel};
use log::info;

use crate::config::{ExperimentConfig, GraphSpec};
use crate::report::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    ValidateGraph,
    HeatKernel,
    Gate,
    Sample,
    Xi,
    Rdmk,
    DlrCheck,
    Oracle,
    MwProfile,
    MwUpsilon,
    MwInvariance,
    TailBound,
}

impl Command {
    pub fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }

    fn gated(self) -> bool {
        matches!(self, Command::Xi | Command::Rdmk | Command::DlrCheck)
    }
}

/// Failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }

    fn gate(msg: String) -> Self {
        Self { code: 3, error: anyhow!(msg) }
    }

    pub fn other(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: error.into() }
    }
}

impl From<GibbsError> for Failure {
    fn from(e: GibbsError) -> Self {
        let code = if matches!(e, GibbsError::NoConvergence(_)) { 4 } else { 1 };
        Self { code, error: e.into() }
    }
}

/// Everything a command needs, plus the tables it produces.
pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    pub hash: String,
    pub tables: Vec<Table>,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        Self { seed: cfg.run.seed, hash: cfg.params_hash(), cfg, tables: Vec::new() }
    }

    fn table(&mut self, name: &str) -> &mut Table {
        self.tables.push(Table::estimates(name, self.seed, &self.hash));
        self.tables.last_mut().expect("just pushed")
    }

    fn mw_table(&mut self, name: &str) -> &mut Table {
        self.tables.push(Table::mw(name, self.seed, &self.hash));
        self.tables.last_mut().expect("just pushed")
    }

    fn last(&mut self) -> &mut Table {
        self.tables.last_mut().expect("a table was opened")
    }
}

fn mask(n: usize, set: &[usize]) -> Result<Vec<bool>, Failure> {
    let mut m = vec![false; n];
    for &v in set {
        *m.get_mut(v).ok_or_else(|| Failure::config(anyhow!("vertex {v} out of range (graph has {n})")))? = true;
    }
    Ok(m)
}

fn sampler_spec(cfg: &ExperimentConfig, g: &Graph) -> Result<SamplerSpec, Failure> {
    let n = g.vertex_count();
    let volume = match &cfg.volumes.lambda {
        Some(set) => mask(n, set)?,
        None => vec![true; n],
    };
    let mut spec = SamplerSpec::volume(volume, cfg.model.m_tau);
    spec.boundary = Boundary { points: cfg.volumes.boundary.clone() };
    spec.boundary.check_occupancy(cfg.model.kappa(), n).map_err(Failure::config)?;
    Ok(spec)
}

fn lattice_kind(cfg: &ExperimentConfig) -> Result<LatticeKind, Failure> {
    match cfg.graph {
        GraphSpec::Lattice { lattice, .. } => Ok(lattice),
        _ => Err(Failure::config(anyhow!("tuning commands need a lattice graph"))),
    }
}

fn arguments(cfg: &ExperimentConfig) -> Vec<Arguments> {
    cfg.rdmk.arguments.iter().map(|a| Arguments { x: a.x.clone(), y: a.y.clone() }).collect()
}

/// The configured override, else the Θ derived from the model.
fn gate_theta(cfg: &ExperimentConfig, g: &Graph) -> f64 {
    cfg.gate.theta.unwrap_or_else(|| cfg.model.theta(g))
}

pub fn run(cmd: Command, ctx: &mut Ctx<'_>) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let g = cfg.build_graph().map_err(Failure::config)?;
    info!("{} on {} vertices, params_hash {}", cmd.name(), g.vertex_count(), ctx.hash);
    if cmd.gated() {
        let theta = gate_theta(cfg, &g);
        if !check_gate(cfg.model.z, theta).ok {
            return Err(Failure::gate(format!("fugacity gate fails: z e^Θ = {:.4} (Θ = {theta:.4})", cfg.model.z * theta.exp())));
        }
    }
    match cmd {
        Command::ValidateGraph => validate_graph(ctx, &g),
        Command::HeatKernel => heat_kernel(ctx),
        Command::Gate => gate(ctx, &g),
        Command::Sample => sample(ctx, &g),
        Command::Xi => xi(ctx, &g),
        Command::Rdmk => rdmk(ctx, &g),
        Command::DlrCheck => dlr_check(ctx, &g),
        Command::Oracle => oracle(ctx, &g),
        Command::MwProfile => mw_profile(ctx),
        Command::MwUpsilon => mw_upsilon(ctx),
        Command::MwInvariance => mw_invariance(ctx),
        Command::TailBound => tail_bound(ctx),
    }
}

fn validate_graph(ctx: &mut Ctx<'_>, g: &Graph) -> Result<(), Failure> {
    let n_max = (g.eccentricity(g.origin()) as usize).clamp(1, 64);
    let r = check_bidimensional(g, n_max);
    let decay = ctx.cfg.model.decay.clone();
    let t = ctx.table("validate_graph");
    t.exact("vertices", g.vertex_count() as f64);
    t.exact("edges", g.edge_count() as f64);
    t.exact("degree_bound", r.degree_bound as f64);
    t.exact("sup_sphere_ratio", r.sup_sphere_ratio);
    t.exact("superlinear_flag", f64::from(u8::from(r.superlinear_flag)));
    for (n, ratio) in r.ratio_by_n.iter().enumerate() {
        t.exact(&format!("sphere_ratio[n={}]", n + 1), *ratio);
    }
    t.exact("jbar1", jbar(&decay, g, 1));
    if g.vertex_count() <= 5_000 {
        t.exact("jstar", jstar(&decay, g));
    }
    println!("degree bound {}, sup |S_n|/n = {:.4}", r.degree_bound, r.sup_sphere_ratio);
    Ok(())
}

fn heat_kernel(ctx: &mut Ctx<'_>) -> Result<(), Failure> {
    let p = ctx.cfg.model.clone();
    let block = ctx.cfg.heat_kernel.clone();
    let hk = HeatKernel::new(p.d);
    let (nodes, weights) = gauss_legendre(block.nodes.max(2), 0.0, 1.0);
    let pts = [0.0, 0.137, 0.5, 0.81];
    let t = ctx.table("heat_kernel");
    for &time in &block.times {
        if !(time > 0.0) {
            return Err(Failure::config(anyhow!("heat-kernel times must be positive")));
        }
        let (mut norm, mut semi, mut series): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for &x in &pts {
            let mass: f64 = nodes.iter().zip(&weights).map(|(y, w)| w * hk.kernel_1d(time, x - y)).sum();
            norm = norm.max((mass - 1.0).abs());
            for &y in &pts {
                series = series.max((hk.kernel_1d(time, x - y) - hk.kernel_1d_fourier(time, x - y)).abs());
                let s = time / 2.0;
                let conv: f64 = nodes.iter().zip(&weights).map(|(m, w)| w * hk.kernel_1d(s, x - m) * hk.kernel_1d(s, m - y)).sum();
                semi = semi.max((conv - hk.kernel_1d(time, x - y)).abs());
            }
        }
        t.exact(&format!("diagonal[t={time}]"), hk.diagonal(time));
        t.exact(&format!("normalization_error[t={time}]"), norm);
        t.exact(&format!("semigroup_error[t={time}]"), semi);
        t.exact(&format!("series_gap[t={time}]"), series);
    }
    t.exact("phat", hk.phat(p.beta, p.k_max));
    Ok(())
}

fn gate(ctx: &mut Ctx<'_>, g: &Graph) -> Result<(), Failure> {
    let p = ctx.cfg.model.clone();
    let theta = gate_theta(ctx.cfg, g);
    let report = check_gate(p.z, theta);
    let t = ctx.table("gate");
    t.exact("kappa", p.kappa().map_or(f64::INFINITY, |k| k as f64));
    t.exact("theta", theta);
    t.exact("z_exp_theta", p.z * theta.exp());
    t.exact("margin", report.margin);
    t.exact("phi", phi(p.z, theta).unwrap_or(f64::INFINITY));
    t.exact("phi_prime", phi_prime(p.z, theta).unwrap_or(f64::INFINITY));
    println!("gate {}: margin {:.6}", if report.ok { "holds" } else { "fails" }, report.margin);
    if report.ok {
        Ok(())
    } else {
        Err(Failure::gate(format!("fugacity gate fails; disabled modes: {}", report.disabled_modes.join(", "))))
    }
}

fn sample(ctx: &mut Ctx<'_>, g: &Graph) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let spec = sampler_spec(cfg, g)?;
    let p = &cfg.model;
    let r = Reference::new(p, g);
    let run = cfg.run.run_config().with_seed(ctx.seed);
    let out = run_chains(
        &run,
        3,
        |rng| GibbsSampler::new(p, g, &r, spec.clone(), rng),
        |s, buf| {
            buf.push(s.total_k() as f64);
            buf.push(s.state.len() as f64);
            buf.push(f64::from(u8::from(s.check_invariants().is_err())));
        },
    );
    let t = ctx.table("sample");
    let out = out?;
    for (i, name) in ["total_k", "loops", "invariant_violations"].iter().enumerate() {
        let e = out.report(i, run.seed)?;
        t.estimate(name, e.value, e.std_error, e.n_samples);
    }
    for kind in MoveKind::ALL {
        t.exact(&format!("acceptance[{kind:?}]"), out.acceptance[kind.index()]);
    }
    Ok(())
}

fn xi(ctx: &mut Ctx<'_>, g: &Graph) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let spec = sampler_spec(cfg, g)?;
    let run = cfg.run.run_config().with_seed(ctx.seed);
    let t = ctx.table("xi");
    let e = estimate_xi(&cfg.model, g, &spec, &run, cfg.run.nodes)?;
    t.estimate("log_xi", e.value, e.std_error, e.n_samples);
    println!("ln Ξ = {:.6} ± {:.6}", e.value, e.std_error);
    Ok(())
}

fn rdmk(ctx: &mut Ctx<'_>, g: &Graph) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let spec = sampler_spec(cfg, g)?;
    let lambda0 = mask(g.vertex_count(), &cfg.volumes.lambda0)?;
    let p = &cfg.model;
    let r = Reference::new(p, g);
    let run = cfg.run.run_config().with_seed(ctx.seed);
    ctx.table("rdmk");
    if let Some(b) = kernel_bound(p, g, &r, &lambda0) {
        ctx.last().exact("kernel_bound", b);
    }
    for (i, a) in arguments(cfg).iter().enumerate() {
        let e = estimate_rdmk(p, g, &r, &spec, &lambda0, a, &run.with_seed(run.seed.wrapping_add(i as u64)), cfg.rdmk.replicas)?;
        ctx.last().estimate(&format!("rdmk[{i}]"), e.value, e.std_error, e.n_samples);
    }
    if let Some(kappa) = p.kappa() {
        let n_max = kappa * cfg.volumes.lambda0.len();
        let e = estimate_trace(p, g, &r, &spec, &lambda0, n_max, &run, cfg.rdmk.replicas)?;
        ctx.last().estimate("trace", e.value, e.std_error, e.n_samples);
    }
    Ok(())
}

fn dlr_check(ctx: &mut Ctx<'_>, g: &Graph) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let spec = sampler_spec(cfg, g)?;
    let n = g.vertex_count();
    let lambda0 = mask(n, &cfg.volumes.lambda0)?;
    let lambda_prime = mask(n, &cfg.volumes.lambda_prime)?;
    if lambda0.iter().zip(&lambda_prime).any(|(a, b)| *a && !*b) {
        return Err(Failure::config(anyhow!("lambda0 must lie inside lambda_prime")));
    }
    let p = &cfg.model;
    let r = Reference::new(p, g);
    let run = cfg.run.run_config().with_seed(ctx.seed);
    let inner = InnerConfig { samples: cfg.rdmk.inner_samples, thin: cfg.rdmk.inner_thin };
    let t = ctx.table("dlr_check");
    let rep = verify_dlr(p, g, &r, &spec, &lambda0, &lambda_prime, &arguments(cfg), &run, &inner, cfg.rdmk.replicas)?;
    for (i, row) in rep.rows.iter().enumerate() {
        t.estimate(&format!("direct[{i}]"), row.direct, row.direct_se, 0);
        t.estimate(&format!("conditional[{i}]"), row.conditional, row.conditional_se, 0);
        t.exact(&format!("z[{i}]"), row.z);
    }
    t.exact("max_discrepancy", rep.max_discrepancy);
    t.exact("max_abs_z", rep.max_abs_z);
    println!("max |z| = {:.3} over {} arguments", rep.max_abs_z, rep.rows.len());
    Ok(())
}

fn oracle(ctx: &mut Ctx<'_>, g: &Graph) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let p = &cfg.model;
    let o = &cfg.oracle;
    let t = ctx.table("oracle");
    let model = SurrogateModel::grid(p, g, o.grid_points).map_err(Failure::config)?;
    let n_cap = p.kappa().map_or(o.n_cap, |k| k * g.vertex_count());
    let direct = surrogate_xi(&model, p.z, p.beta, n_cap);
    let paths = surrogate_path_expansion(&model, p.z, p.beta, n_cap, o.k_cap);
    t.exact("grid_log_xi", direct);
    t.exact("grid_path_expansion_log_xi", paths.log_xi);
    t.exact("grid_identity_gap", (direct - paths.log_xi).abs());
    if let Ok(fourier) = SurrogateModel::fourier(p, g, o.fourier_modes) {
        t.exact("trotter_log_xi", trotter_xi(&fourier, p.z, p.beta, p.m_tau, o.n_cap));
        let pot = &p.potentials;
        if pot.u2 == 0.0 && pot.v0 == 0.0 {
            if let Ok(v) = noninteracting_log_xi(&fourier, p.z, p.beta) {
                t.exact("noninteracting_log_xi", v);
            }
        }
    }
    if let Ok(sv) = singlevertex_quadrature(p, g, 64, o.k_cap) {
        t.exact("singlevertex_log_xi", sv.log_xi);
        for (k, w) in sv.loop_weights.iter().enumerate() {
            t.exact(&format!("loop_weight[k={}]", k + 1), *w);
        }
    }
    Ok(())
}

fn mw_profile(ctx: &mut Ctx<'_>) -> Result<(), Failure> {
    let kind = lattice_kind(ctx.cfg)?;
    let block = ctx.cfg.mw.clone();
    let t = ctx.table("mw_profile");
    for &n in &block.ns {
        let g = Graph::lattice_ball(kind, n);
        let prof = build_profile(&g, n).map_err(Failure::config)?;
        t.exact(&format!("rbar[n={n}]"), prof.rbar as f64);
        t.exact(&format!("Q[n={n}]"), prof.q);
        for d in 0..=n as u32 {
            t.exact(&format!("v[n={n},d={d}]"), prof.weight_at_distance(d));
        }
        if n <= block.scan_limit {
            let s = lipschitz_scan(&g, &prof);
            t.exact(&format!("lipschitz_pairs[n={n}]"), s.pairs as f64);
            t.exact(&format!("lipschitz_violations[n={n}]"), s.violations as f64);
            t.exact(&format!("lipschitz_worst_excess[n={n}]"), s.worst_excess);
        }
    }
    Ok(())
}

fn mw_upsilon(ctx: &mut Ctx<'_>) -> Result<(), Failure> {
    let kind = lattice_kind(ctx.cfg)?;
    let p = ctx.cfg.model.clone();
    let block = ctx.cfg.mw.clone();
    let r0 = p.decay.support_radius().ok_or_else(|| Failure::config(anyhow!("mw-upsilon needs a finite-range decay")))? as usize;
    let mut rows = Vec::new();
    for &n in &block.ns {
        let g = Graph::lattice_ball(kind, n + r0);
        let prof = build_profile(&g, n).map_err(Failure::config)?;
        let u = upsilon(&p, &g, &prof, block.theta).map_err(Failure::config)?;
        rows.push(u);
    }
    let t = ctx.mw_table("mw_upsilon");
    for u in &rows {
        t.mw_row(u.n, u.rbar, u.upsilon, u.form4, u.q, f64::NAN, f64::NAN);
    }
    let t = ctx.table("mw_upsilon_chain");
    for u in &rows {
        t.exact(&format!("upsilon[n={}]", u.n), u.upsilon);
        t.exact(&format!("form2[n={}]", u.n), u.form2);
        t.exact(&format!("form3[n={}]", u.n), u.form3);
        t.exact(&format!("form4[n={}]", u.n), u.form4);
        t.exact(&format!("upsilon_times_Q[n={}]", u.n), u.upsilon * q_profile((u.n - u.rbar) as f64).unwrap_or(f64::NAN));
        t.exact(&format!("jstar[n={}]", u.n), u.jstar);
    }
    Ok(())
}

fn mw_invariance(ctx: &mut Ctx<'_>) -> Result<(), Failure> {
    let p = ctx.cfg.model.clone();
    let block = ctx.cfg.mw.clone();
    let run = ctx.cfg.run.run_config().with_seed(ctx.seed);
    let theta = GroupElement::coordinate(vec![block.theta; p.d], p.d).map_err(Failure::config)?;
    let rows = invariance_test(&p, &block.invariance_ns, &theta, block.with_boundary, &run);
    let t = ctx.mw_table("mw_invariance");
    for r in rows.as_ref().map(Vec::as_slice).unwrap_or(&[]) {
        t.mw_row(r.n, fkloopgas::mw::rbar(r.n), f64::NAN, f64::NAN, f64::NAN, r.deviation(), r.deviation_se());
    }
    let rows = rows?;
    let t = ctx.table("mw_invariance_ratios");
    for r in &rows {
        t.estimate(&format!("ratio_plus[n={}]", r.n), r.ratio_plus, r.se_plus, run.samples * run.chains);
        t.estimate(&format!("ratio_minus[n={}]", r.n), r.ratio_minus, r.se_minus, run.samples * run.chains);
    }
    Ok(())
}

fn tail_bound(ctx: &mut Ctx<'_>) -> Result<(), Failure> {
    let p = ctx.cfg.model.clone();
    let block = ctx.cfg.tail.clone();
    if block.ns.is_empty() || block.draws == 0 {
        return Err(Failure::config(anyhow!("tail.ns and tail.draws must be nonempty")));
    }
    let rep = tail_probability_bound(&p, &block.ns, block.draws, ctx.seed);
    let t = ctx.table("tail_bound");
    t.exact("C", rep.c);
    for r in &rep.rows {
        t.estimate(&format!("escape_frequency[n={}]", r.n), r.frequency, r.std_error, r.draws as usize);
        t.exact(&format!("bound[n={}]", r.n), r.bound);
        t.exact(&format!("ok[n={}]", r.n), f64::from(u8::from(r.ok)));
    }
    Ok(())
}

/// Writes every table; returns the CSV paths.
pub fn write_all(ctx: &Ctx<'_>, out: &std::path::Path, cmd: Command) -> anyhow::Result<Vec<PathBuf>> {
    ctx.tables.iter().map(|t| t.write(out, &cmd.name())).collect()
}
