use std::hint::black_box;

use ballworld::avoidance::{avoidance_step, assemble_main_qp, LoopState};
use ballworld::sim::{ball_world_for, LinearPlant, Scenario};
use ballworld::verify::{random_configuration, random_qp};
use ballworld::{solve_qp, AvoidanceGains, ClassKappa, Diffeo, DiffeoParams, LinearSystem, Matrix, Vector};
use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn qp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let problems: Vec<_> = (0..64).map(|_| random_qp(&mut rng, 4, 6, false)).collect();
    c.bench_function("qp/random d=4 m=6", |b| {
        b.iter(|| problems.iter().map(|p| solve_qp(black_box(p)).unwrap().iterations).sum::<usize>())
    });

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gamma = ClassKappa::new(10.0).unwrap();
    let mains: Vec<_> = (0..64)
        .map(|_| {
            let (world, q, qdot) = random_configuration(&mut rng, 5);
            assemble_main_qp(&world, &q, &qdot, AvoidanceGains::default(), gamma).unwrap().qp
        })
        .collect();
    c.bench_function("qp/main QP M<=5", |b| {
        b.iter(|| mains.iter().map(|p| solve_qp(black_box(p)).unwrap().iterations).sum::<usize>())
    });
}

fn fig3() -> (Diffeo, ballworld::BallWorld) {
    let scn = Scenario::builtin("fig3-right").unwrap();
    let world = scn.world.unwrap().build().unwrap();
    let balls = ball_world_for(&world, None, None).unwrap();
    (Diffeo::new(DiffeoParams::default(), world).unwrap(), balls)
}

fn diffeo(c: &mut Criterion) {
    let (f, balls) = fig3();
    let x = Vector2::new(-1.3, 4.2);
    let q = f.eval2(&balls, x).unwrap();
    c.bench_function("diffeo/eval", |b| b.iter(|| f.eval2(&balls, black_box(x)).unwrap()));
    c.bench_function("diffeo/jacobian", |b| b.iter(|| f.jacobian2(&balls, black_box(x)).unwrap()));
    c.bench_function("diffeo/inverse", |b| {
        b.iter(|| f.inverse2(&balls, black_box(q), x + Vector2::new(0.05, -0.05)).unwrap())
    });
}

fn step(c: &mut Criterion) {
    let (f, balls) = fig3();
    let a = Matrix::from_row_slice(2, 2, &[-6.0, 0.0, 0.0, -1.0]);
    let plant = LinearPlant {
        system: LinearSystem::fully_actuated(a).unwrap(),
        goal: Vector::zeros(2),
        nominal_gain: 0.0,
    };
    let state = LoopState::new(&plant, &f, balls, Vector::from_vec(vec![-1.0, 5.5]), 1e-3).unwrap();
    let gamma = ClassKappa::new(10.0).unwrap();
    c.bench_function("avoidance/step", |b| {
        b.iter(|| avoidance_step(black_box(&state), &plant, &f, AvoidanceGains::default(), gamma).unwrap())
    });
}

criterion_group!(benches, qp, diffeo, step);
criterion_main!(benches);
