use criterion::{black_box, criterion_group, criterion_main, Criterion};
use gasnet_bench::bundled;
use gasnet_core::optimize::{evaluate, gradient, Objective};
use gasnet_core::{optimize, DiscreteOperator};

fn assembly(c: &mut Criterion) {
    let m = bundled("figure_one.toml");
    c.bench_function("assemble_figure_one", |b| {
        b.iter(|| DiscreteOperator::assemble(black_box(&m.topology), black_box(&m.op.grid)).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    for name in ["single_pipe.toml", "figure_one.toml"] {
        let m = bundled(name);
        c.bench_function(&format!("picard_solve/{name}"), |b| b.iter(|| m.solve(black_box(&m.control)).unwrap()));
    }
}

fn adjoint_gradient(c: &mut Criterion) {
    let m = bundled("figure_one.toml");
    let h = m.control.reduced(&m.phi_e);
    let obj = Objective {
        bounds: &m.constraint_bounds,
        rho: 0.0,
    };
    let eval = evaluate(&m, &h, &obj).unwrap();
    c.bench_function("gradient/figure_one", |b| b.iter(|| gradient(&m, black_box(&h), &obj, &eval).unwrap()));
}

fn optimization(c: &mut Criterion) {
    let m = bundled("constrained.toml");
    let mut group = c.benchmark_group("optimize");
    group.sample_size(10);
    group.bench_function("constrained", |b| b.iter(|| optimize(&m, &m.constraint_bounds).unwrap()));
    group.finish();
}

criterion_group!(benches, assembly, forward, adjoint_gradient, optimization);
criterion_main!(benches);
