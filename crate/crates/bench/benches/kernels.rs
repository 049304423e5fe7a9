use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use psfsort::baseline::{rank_two_state, simulate_tomography, Copies, Reconstructor, TomographyConfig};
use psfsort::estimation::SwapBranches;
use psfsort::numkit::{eigh, ONE};
use psfsort::qpca::PhotonSource;
use psfsort::qsp::{build_step_poly, plan, FilterEngine, PlanMode, StepSpec};

fn state(dim: usize) -> psfsort::DensityOperator {
    rank_two_state(dim, 0.9, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0
}

fn eigensolver(c: &mut Criterion) {
    for dim in [16, 64] {
        let rho = state(dim);
        c.bench_function(&format!("eigh dim {dim}"), |b| b.iter(|| eigh(black_box(rho.matrix())).unwrap()));
    }
}

fn step_polynomial(c: &mut Criterion) {
    let spec = StepSpec::new(0.5, 0.25, 0.05).unwrap();
    c.bench_function("step polynomial", |b| b.iter(|| build_step_poly(black_box(&spec)).unwrap()));
}

fn filter_branches(c: &mut Criterion) {
    let engine = FilterEngine::new(&PhotonSource::new(state(16)).unwrap());
    let p = plan(0.9, 0.1, 0.05, PlanMode::Noiseless).unwrap();
    c.bench_function("density branches dim 16", |b| b.iter(|| engine.density_branches(black_box(&p))));
}

fn swap_expectation(c: &mut Criterion) {
    let rho = state(16);
    let sw = SwapBranches::new(&rho, &rho, ONE).unwrap();
    let o = rho.matrix().clone();
    c.bench_function("swap branch expectation dim 16", |b| b.iter(|| sw.expectation(0, black_box(&o), &o).unwrap()));
}

fn tomography(c: &mut Criterion) {
    let rho = state(8);
    let cfg = TomographyConfig::new(Copies::Finite(100_000), Reconstructor::LinearInversion, 3);
    c.bench_function("tomography dim 8", |b| b.iter(|| simulate_tomography(black_box(&rho), &cfg).unwrap()));
}

criterion_group!(kernels, eigensolver, step_polynomial, filter_branches, swap_expectation, tomography);
criterion_main!(kernels);
