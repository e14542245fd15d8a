use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use layerfit::codec::LatentCodec;
use layerfit::dataset::{self, SynthConfig};
use layerfit::gmf::{DiffusionExample, GmfConfig, GmfModel, SampleConfig, SamplerKind, TryOnInputs};
use layerfit::metrics::{self, EvalConfig, EvalItem};
use layerfit::parallel::Execution;
use layerfit::training::batch_gradients;
use layerfit::unet::UNetConfig;
use layerfit::Tensor;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn corpus(n: usize) -> Vec<dataset::Quadruplet> {
    dataset::generate(&SynthConfig::default(), n, Execution::Sequential).expect("synthetic corpus")
}

fn model(samples: &[dataset::Quadruplet]) -> (GmfModel, layerfit::ParamStore, Vec<DiffusionExample>) {
    let config = GmfConfig {
        unet: UNetConfig {
            channels: vec![8, 16],
            time_dim: 8,
        },
        ..GmfConfig::default()
    };
    let codec = LatentCodec::fixed();
    let examples: Vec<DiffusionExample> = samples
        .iter()
        .map(|q| DiffusionExample::from_sample(&codec, q).expect("example"))
        .collect();
    let mut model = GmfModel::new(config, codec).expect("model");
    model.config.latent_shift = Some(layerfit::gmf::fit_latent_shift(&examples).expect("shift"));
    let store = model.init(&mut ChaCha8Rng::seed_from_u64(0)).expect("params");
    (model, store, examples)
}

fn batch_eval(c: &mut Criterion) {
    let samples = corpus(32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let items: Vec<EvalItem> = samples
        .iter()
        .map(|q| EvalItem {
            id: q.id.clone(),
            ground_truth: q.person.clone(),
            generated: q.person.zip_with(&Tensor::rand_uniform(q.person.shape(), -0.1, 0.1, &mut rng), |a, b| (a + b).clamp(0.0, 1.0)).expect("noisy copy"),
            layers: q.visible_layers(),
        })
        .collect();
    let config = EvalConfig::default();
    let mut group = c.benchmark_group("batch_eval");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| metrics::evaluate(&items, &config, exec).expect("evaluate"))
        });
    }
    group.finish();
}

fn batch_grads(c: &mut Criterion) {
    let samples = corpus(8);
    let (model, store, examples) = model(&samples);
    let draws: Vec<_> = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| (ex, model.draw(ex, &mut ChaCha8Rng::seed_from_u64(i as u64)).expect("draw")))
        .collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                batch_gradients(exec, &store, &draws, |g, s, (ex, draw)| Ok(model.loss(g, s, ex, draw)?.0)).expect("gradients")
            })
        });
    }
    group.finish();
}

fn sampling_chains(c: &mut Criterion) {
    let samples = corpus(4);
    let (model, store, _) = model(&samples);
    let inputs: Vec<TryOnInputs> = samples.iter().map(TryOnInputs::from_sample).collect();
    let config = SampleConfig {
        sampler: SamplerKind::Ddim,
        ddim_steps: 10,
        ..SampleConfig::default()
    };
    let mut group = c.benchmark_group("sampling_chains");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| model.sample_batch(&store, &inputs, &config, exec).expect("sampling"))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_eval, batch_grads, sampling_chains);
criterion_main!(benches);
