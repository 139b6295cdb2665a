use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fkloopgas::energy::EnergyModel;
use fkloopgas::gibbs::{chain_rng, GibbsSampler, SamplerSpec};
use fkloopgas::graph::{DecayProfile, Graph, LatticeKind};
use fkloopgas::loops::Reference;
use fkloopgas::params::{ModelParams, Potentials};
use fkloopgas::torus::HeatKernel;

fn params() -> ModelParams {
    ModelParams {
        d: 1,
        beta: 1.0,
        z: 0.2,
        potentials: Potentials { u1: 0.3, u2: 0.2, v0: 0.4, rho_hc: 0.3, ..Default::default() },
        lambda0: 0.5,
        decay: DecayProfile::Nearest { amp: 1.0 },
        m_tau: 16,
        k_max: 4,
    }
}

fn heat_kernel(c: &mut Criterion) {
    let hk = HeatKernel::new(1);
    c.bench_function("heat_kernel_1d", |b| b.iter(|| hk.kernel_1d(black_box(0.3), black_box(0.137))));
    c.bench_function("heat_kernel_1d_fourier", |b| b.iter(|| hk.kernel_1d_fourier(black_box(0.3), black_box(0.137))));
}

fn loops_and_energy(c: &mut Criterion) {
    let p = params();
    let g = Graph::lattice_ball(LatticeKind::Square, 4);
    let r = Reference::new(&p, &g);
    let em = EnergyModel::new(&p, &g);
    let mut rng = chain_rng(1, 0);
    c.bench_function("sample_loop_k2", |b| b.iter(|| r.sample_loop(&[0.25], g.origin(), 2, &mut rng).unwrap()));
    let (a, _) = r.sample_loop(&[0.1], g.origin(), 2, &mut rng).unwrap();
    let (l, _) = r.sample_loop(&[0.6], g.origin(), 2, &mut rng).unwrap();
    c.bench_function("pair_energy_k2", |b| b.iter(|| em.pair_energy(a.track(), l.track())));
}

fn mcmc(c: &mut Criterion) {
    let p = params();
    let g = Graph::lattice_ball(LatticeKind::Square, 4);
    let r = Reference::new(&p, &g);
    let spec = SamplerSpec::volume(vec![true; g.vertex_count()], p.m_tau);
    let mut s = GibbsSampler::new(&p, &g, &r, spec.clone(), chain_rng(2, 0)).unwrap();
    s.sweep(20_000);
    c.bench_function("gibbs_step", |b| b.iter(|| s.step()));
    c.bench_function("gibbs_sweep_1000_cold", |b| {
        b.iter_batched(
            || GibbsSampler::new(&p, &g, &r, spec.clone(), chain_rng(3, 0)).unwrap(),
            |mut s| s.sweep(1_000),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, heat_kernel, loops_and_energy, mcmc);
criterion_main!(benches);
