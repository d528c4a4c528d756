use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use macfn_core::autodiff::{Activation, Init, Matrix, Mlp, ParamStore, Tape};
use macfn_core::sampler::rollout;
use macfn_core::trainer::{build_models, flow_matching_loss, LossConfig};
use macfn_core::{Policy, RunConfig, Scenario, SelectMode};

fn mlp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let acts = [Activation::Tanh, Activation::Tanh];
    let net = Mlp::new(
        &mut store,
        "bench",
        &[8, 64, 64, 1],
        &acts,
        Init::Uniform,
        &mut rng,
    )
    .unwrap();
    let data = (0..160 * 8).map(|i| (i as f64 * 0.37).sin()).collect();
    let input = Matrix::from_vec(160, 8, data).unwrap();
    c.bench_function("mlp_forward_160x8", |b| {
        b.iter(|| net.eval(store.values(), black_box(&input)).unwrap())
    });
    c.bench_function("mlp_forward_backward_160x8", |b| {
        b.iter(|| {
            let mut tape = Tape::new(store.values());
            let x = tape.leaf(input.clone());
            let y = net.forward_tape(&mut tape, x).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s, 1.0).unwrap())
        })
    });
}

fn loss_and_rollout(c: &mut Criterion) {
    let config = RunConfig::for_scenario(Scenario::RobotNavigation);
    let (spec, flow, inverse) = build_models(&config).unwrap();
    let policy = Policy::Flow {
        model: &flow,
        mode: SelectMode::Sample,
        k_hat: config.train.k_hat,
        temperature: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("rollout_robot_navigation", |b| {
        b.iter(|| rollout(&spec, policy, &mut rng).unwrap())
    });
    let traj = rollout(&spec, policy, &mut rng).unwrap();
    let cfg = LossConfig {
        epsilon: config.train.epsilon,
        k_hat: config.train.k_hat,
        terminal_mode: config.train.terminal_outflow_mode,
        inflow: config.train.inflow_estimator,
        initial_inflow: config.train.initial_inflow,
        action_bound: spec.action_bound,
        parent_region: None,
    };
    c.bench_function("flow_matching_loss_robot_navigation", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(2),
            |mut r| flow_matching_loss(&flow, &inverse, &traj, &cfg, &mut r).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, mlp, loss_and_rollout);
criterion_main!(benches);
