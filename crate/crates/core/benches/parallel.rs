//! Sequential vs data-parallel execution of the hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use co4_core::bench::{BenchModel, BenchNet};
use co4_core::mod_laws::BurstRegime;
use co4_core::rl::{train_es, CartPoleParams, EsConfig, Policy, PolicyKind, SensoryConfig};
use co4_core::spiking::{self, NeuronParams, SimConfig};
use co4_core::{par, Tensor};

const MODES: [(&str, bool); 2] = [("sequential", true), ("parallel", false)];

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_256x256x256");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[4, 256, 256], 1.0, &mut rng);
    let b = Tensor::randn(&[256, 256], 1.0, &mut rng);
    for (name, seq) in MODES {
        g.bench_function(name, |bch| {
            par::set_sequential(seq);
            bch.iter(|| a.matmul(&b).unwrap());
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn layer_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("layer_forward");
    g.sample_size(10);
    for model in BenchModel::ALL {
        let net = BenchNet::new(model, 1024, 128, 32, 0).unwrap();
        let x = Tensor::randn(&[1, 1024, 128], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        for (name, seq) in MODES {
            g.bench_with_input(BenchmarkId::new(model.as_str(), name), &x, |bch, x| {
                par::set_sequential(seq);
                bch.iter(|| net.run(x).unwrap());
            });
        }
    }
    par::set_sequential(false);
    g.finish();
}

fn es_generations(c: &mut Criterion) {
    let mut g = c.benchmark_group("es_5_generations");
    g.sample_size(10);
    let policy = Policy::new(PolicyKind::Co4, SensoryConfig::default()).unwrap();
    let env = CartPoleParams::default();
    let cfg = EsConfig {
        generations: 5,
        pop_size: 32,
        ..EsConfig::default()
    };
    for (name, seq) in MODES {
        g.bench_function(name, |bch| {
            par::set_sequential(seq);
            bch.iter(|| train_es(&policy, &env, &cfg, None).unwrap());
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn spiking_population(c: &mut Criterion) {
    let mut g = c.benchmark_group("spiking_grid_40x1s");
    g.sample_size(10);
    let cfg = SimConfig {
        population: 40,
        duration_ms: 1000.0,
        ..SimConfig::default()
    };
    let p = NeuronParams::default();
    for (name, seq) in MODES {
        g.bench_function(name, |bch| {
            par::set_sequential(seq);
            bch.iter(|| spiking::run_regime_grid(&BurstRegime::ALL, &cfg, &p, 0).unwrap());
        });
    }
    par::set_sequential(false);
    g.finish();
}

criterion_group!(benches, matmul, layer_forward, es_generations, spiking_population);
criterion_main!(benches);
