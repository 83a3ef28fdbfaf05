use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use ecosim::scenarios::ecosystem::{build_ecosystem_story, EcosystemConfig};
use ecosim::scenarios::porl::{build_porl_story, PorlConfig};
use ecosim::scenarios::toy::BinaryDbn;
use ecosim::{log_probability_from_value_trajectory, ObservedTrajectory, ParamSet, Runtime, Tape, Tensor};

fn tensor_ops(c: &mut Criterion) {
    let a = Tensor::from_fn([64, 64], |i| (i as f64 * 0.01).sin());
    let b = Tensor::from_fn([64, 64], |i| (i as f64 * 0.02).cos());
    c.bench_function("matmul 64x64", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    c.bench_function("log_softmax 64x64", |bench| bench.iter(|| black_box(&a).log_softmax().unwrap()));
    c.bench_function("backward matmul+tanh", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let x = tape.leaf(&a);
            let y = x.matmul(&b).unwrap().tanh().reduce_sum();
            tape.backward(&y).unwrap().wrt(&x).unwrap()
        })
    });
}

fn runtime(c: &mut Criterion) {
    let cfg = PorlConfig::default();
    let story = build_porl_story(&cfg).unwrap();
    let rt = Runtime::new(&story.network).with_params(&story.params).retain_fields(false);
    c.bench_function("porl trajectory (default)", |bench| bench.iter(|| rt.execute(cfg.horizon - 1, 0).unwrap()));

    let eco = EcosystemConfig { horizon: 10, ..EcosystemConfig::default() };
    let net = build_ecosystem_story(&eco).unwrap();
    let rt = Runtime::new(&net).retain_fields(false);
    c.bench_function("ecosystem 10 periods (desk)", |bench| bench.iter(|| rt.execute(9, 0).unwrap()));
}

fn logprob(c: &mut Criterion) {
    let dbn = BinaryDbn {
        init_a: [0.3, 0.7],
        b_given_a: [[0.6, 0.4], [0.1, 0.9]],
        a_given_ab: [[[0.5, 0.5], [0.2, 0.8]], [[0.9, 0.1], [0.35, 0.65]]],
        b_given_ab: [[[0.7, 0.3], [0.4, 0.6]], [[0.25, 0.75], [0.5, 0.5]]],
    };
    let net = dbn.network(256).unwrap();
    let traj = Runtime::new(&net).trajectory(50, 0).unwrap();
    let obs = ObservedTrajectory::from_trajectory(&net, &traj).unwrap();
    let params = ParamSet::new();
    c.bench_function("dbn log-probability 256x50", |bench| {
        bench.iter(|| log_probability_from_value_trajectory(&net, &params, &obs, 49).unwrap())
    });
}

criterion_group!(benches, tensor_ops, runtime, logprob);
criterion_main!(benches);
