use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use nlschwarz::outer::{initial_coarse_space, subdomain_dofs, LinearSchwarz};
use nlschwarz::schwarz::local_correction;
use nlschwarz::sparse::gmres;
use nlschwarz::{Factorization, GmresConfig, NonlinearSchwarz, TangentMode};
use nlschwarz_bench::{cavity, diffusion};

fn assembly(c: &mut Criterion) {
    let (model, u0, _, _) = cavity(48, 4, 100.0);
    c.bench_function("cavity_residual_and_tangent_48", |b| {
        b.iter(|| model.residual_and_tangent(black_box(&u0)).unwrap())
    });
    let (model, u0) = diffusion(96);
    c.bench_function("diffusion_residual_and_tangent_96", |b| {
        b.iter(|| model.residual_and_tangent(black_box(&u0)).unwrap())
    });
}

fn factorization(c: &mut Criterion) {
    let (model, u0, _, _) = cavity(32, 4, 100.0);
    let a = model.tangent(&u0).unwrap();
    c.bench_function("lu_factor_cavity_32", |b| b.iter(|| Factorization::new(black_box(&a)).unwrap()));
    let lu = Factorization::new(&a).unwrap();
    let rhs = vec![1.0; a.nrows()];
    c.bench_function("lu_solve_cavity_32", |b| b.iter(|| lu.solve(black_box(&rhs))));
}

fn krylov(c: &mut Criterion) {
    let (model, u0, decomp, cfg) = cavity(32, 4, 100.0);
    let a = model.tangent(&u0).unwrap();
    let space = initial_coarse_space(&model, &decomp, &cfg).unwrap().unwrap();
    let p0t = space.p0.transpose();
    let dofs = subdomain_dofs(&model, &decomp);
    let pre = LinearSchwarz::new(&a, &dofs, Some((&space.p0, &p0t))).unwrap();
    let rhs = model.residual(&u0).unwrap();
    let gcfg = GmresConfig { rel_tol: 1e-6, max_iter: 500, restart: 100 };
    c.bench_function("gmres_two_level_cavity_32", |b| {
        b.iter(|| {
            gmres(
                |x: &[f64], y: &mut [f64]| {
                    y.copy_from_slice(&a.mul_vec(x));
                    Ok(())
                },
                Some(|x: &[f64], y: &mut [f64]| {
                    pre.apply(x, y);
                    Ok(())
                }),
                black_box(&rhs),
                &gcfg,
            )
            .unwrap()
        })
    });
}

fn nonlinear(c: &mut Criterion) {
    let (model, u0, decomp, cfg) = cavity(32, 4, 100.0);
    let space = initial_coarse_space(&model, &decomp, &cfg).unwrap().unwrap();
    let op = NonlinearSchwarz::new(&model, &decomp, Some(&space), cfg.variant, cfg.inner, cfg.coarse).unwrap();
    // Subdomain 3 touches the lid, so its correction is nonzero at the initial guess.
    let local = &op.spaces()[3];
    c.bench_function("local_correction_cavity_32", |b| {
        b.iter(|| local_correction(&model, local, 3, black_box(&u0), &cfg.inner, TangentMode::Exact).unwrap())
    });
    c.bench_function("hybrid_evaluate_cavity_32", |b| {
        b.iter_batched(
            || NonlinearSchwarz::new(&model, &decomp, Some(&space), cfg.variant, cfg.inner, cfg.coarse).unwrap(),
            |mut op| op.evaluate(black_box(&u0)).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = assembly, factorization, krylov, nonlinear
}
criterion_main!(benches);
