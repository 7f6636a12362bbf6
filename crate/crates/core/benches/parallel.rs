//! Sequential vs data-parallel execution of the hot loops.
//!
//! With the `parallel` feature disabled both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use golden_layer::attribution::{lga_scores, LgaOptions};
use golden_layer::corpus::{build_edit_set, generate_world, EditQuery, FactWorld};
use golden_layer::editors::{estimate_covariances, CovarianceEstimate, CovarianceSite, EditorKind, EditorSpec};
use golden_layer::eval::{layer_sweep, SweepOptions};
use golden_layer::model::{ModelConfig, ToyModel};
use golden_layer::par::{self, Exec};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

struct Fixture {
    world: FactWorld,
    model: ToyModel,
    edits: Vec<EditQuery>,
    covs: Vec<CovarianceEstimate>,
}

fn fixture() -> Fixture {
    let world = generate_world(3, 16, 3, 30).unwrap();
    let config = ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_mlp: 128,
        context_len: 16,
        vocab_size: world.vocab.len(),
    };
    let model = ToyModel::init(config, 3).unwrap();
    let edits = build_edit_set(&world, 16, 3).unwrap();
    let covs = estimate_covariances(
        &model,
        &world.training_sequences(),
        &world.entities,
        1e-2,
        CovarianceSite::AllPositions,
        Exec::Parallel,
    )
    .unwrap();
    Fixture {
        world,
        model,
        edits,
        covs,
    }
}

fn bench(c: &mut Criterion) {
    let f = fixture();
    let seqs = f.world.training_sequences();
    let total = f.model.layout.total;

    let mut g = c.benchmark_group("gradient_batch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::sum_vectors(exec, &seqs[..32], total, 4, |s, acc| {
                    f.model.accumulate_gradient(s, acc).unwrap();
                })
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("lga_scores");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = LgaOptions { exec, ..LgaOptions::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| lga_scores(&f.model, &f.edits, &opts).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("covariance");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate_covariances(&f.model, &seqs, &f.world.entities, 1e-2, CovarianceSite::AllPositions, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("layer_sweep");
    g.sample_size(10);
    let mut spec = EditorSpec::new(EditorKind::RRome, 0);
    spec.value.steps = 5;
    for (name, exec) in MODES {
        let opts = SweepOptions { exec, ..SweepOptions::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| layer_sweep(&f.model, &f.edits[..4], &spec, &f.covs, &opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
