//! Throughput of the hot kernels: convolution, a mini-model training step,
//! Gibbs sweeps, fold-in inference, augmentation and the set metrics.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use herbrx_core::augment::{apply, sample_transform, AugmentConfig, FillMode};
use herbrx_core::data::{synth_generate, SynthConfig};
use herbrx_core::lda::{fit, gibbs_sweep, infer_topics, GibbsState, LdaConfig};
use herbrx_core::metrics::MetricsReport;
use herbrx_core::model::{build_model, forward, train, ArchitectureSpec, Mode, TrainConfig, Variant};
use herbrx_core::tensor::ops::{conv2d, conv2d_backward};
use herbrx_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn convolution(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&[8, 32, 32, 8], &mut rng);
    let kernel = random(&[3, 3, 8, 8], &mut rng);
    let bias = random(&[8], &mut rng);
    let out = conv2d(&input, &kernel, &bias).unwrap();
    c.bench_function("conv2d 8x32x32x8 k3", |b| b.iter(|| conv2d(&input, &kernel, &bias).unwrap()));
    c.bench_function("conv2d backward 8x32x32x8 k3", |b| b.iter(|| conv2d_backward(&input, &kernel, &out).unwrap()));
}

fn model(c: &mut Criterion) {
    let synth = SynthConfig { samples: 32, ..Default::default() };
    let (mut ds, _) = synth_generate(&synth).unwrap();
    for s in &mut ds.samples {
        s.topics = Some(vec![1.0 / 6.0; 6]);
    }
    let spec = ArchitectureSpec::mini(Variant::DualChannelAux, ds.herb_count, Some(6));
    let params = build_model(&spec, 0).unwrap();
    let images: Vec<&Tensor> = ds.samples.iter().map(|s| &s.image).collect();
    let batch = Tensor::stack(&images).unwrap();
    c.bench_function("mini 2cnn-aux forward, batch 32", |b| b.iter(|| forward(&params, &batch, Mode::Infer).unwrap()));
    let cfg = TrainConfig { epochs: 1, batch_size: 32, ..Default::default() };
    let refs = ds.refs();
    c.bench_function("mini 2cnn-aux train epoch, 32 samples", |b| {
        b.iter_batched(|| params.clone(), |p| train(p, &refs, &refs[..4], &cfg).unwrap(), BatchSize::LargeInput)
    });
}

fn gibbs(c: &mut Criterion) {
    let synth = SynthConfig { samples: 500, ..Default::default() };
    let (ds, _) = synth_generate(&synth).unwrap();
    let corpus = ds.prescriptions();
    let cfg = LdaConfig { topics: 6, alpha: 0.5, burn_in: 20, samples: 5, ..LdaConfig::with_topics(6) };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let state = GibbsState::random(&corpus, 6, ds.herb_count, &mut rng).unwrap();
    c.bench_function("gibbs sweep, 500 documents", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| gibbs_sweep(&mut s, &corpus, &cfg, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let (model, _) = fit(&corpus, ds.herb_count, &cfg).unwrap();
    c.bench_function("fold-in inference, one prescription", |b| {
        b.iter(|| infer_topics(&model, &corpus[0], &cfg).unwrap())
    });
}

fn augmentation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = random(&[224, 224, 3], &mut rng);
    let cfg = AugmentConfig::default();
    c.bench_function("affine augment 224x224", |b| {
        b.iter(|| {
            let t = sample_transform(&mut rng, &cfg, (224, 224));
            apply(&image, &t, FillMode::Nearest).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut set = |len: usize| -> Vec<usize> { (0..len).map(|_| rng.random_range(0..400)).collect() };
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..500).map(|_| (set(12), set(12))).collect();
    c.bench_function("metrics report, 500 pairs", |b| b.iter(|| MetricsReport::compute(&pairs, None).unwrap()));
}

criterion_group!(benches, convolution, model, gibbs, augmentation, metrics);
criterion_main!(benches);
