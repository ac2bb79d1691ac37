//! Shared helpers for the integration suites: finite-difference gradient
//! checks and the synthetic end-to-end experiment.
#![allow(dead_code)]

use herbrx_core::data::{most_frequent_herbs, synth_generate, Sample, SynthConfig};
use herbrx_core::lda::{fit, LdaConfig};
use herbrx_core::metrics::{kl_t_metric, MetricsReport};
use herbrx_core::model::{
    build_model, predict_batched, predict_prescription, record_forward, record_losses, train, ArchitectureSpec, Mode,
    TrainConfig, Variant,
};
use herbrx_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Gradients below this magnitude are compared absolutely: at `h = 1e-5` a
/// few ulps of an O(1) loss already move the central difference by ~1e-10.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Max relative error between the analytic gradient and central differences
/// over up to `coords` randomly chosen coordinates of `leaf`.
pub fn check_leaf(tape: &mut Tape, loss: Var, leaf: Var, analytic: &Tensor, coords: usize, rng: &mut impl Rng) -> f64 {
    let base = tape.value(leaf).clone();
    let picks: Vec<usize> = if base.len() <= coords {
        (0..base.len()).collect()
    } else {
        rand::seq::index::sample(rng, base.len(), coords).into_vec()
    };
    let mut worst = 0.0f64;
    for i in picks {
        let mut probe = |delta: f64| {
            let mut t = base.clone();
            t.data_mut()[i] += delta;
            tape.set_leaf(leaf, t).unwrap();
            tape.replay(loss).unwrap().item()
        };
        let numeric = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    tape.set_leaf(leaf, base).unwrap();
    worst
}

/// Checks every listed leaf of a scalar loss.
pub fn check_all(tape: &mut Tape, loss: Var, leaves: &[Var], coords: usize, rng: &mut impl Rng) -> f64 {
    let grads = tape.backward(loss).unwrap();
    leaves
        .iter()
        .map(|&v| {
            let g = grads.get_or_zeros(v, tape.value(v));
            check_leaf(tape, loss, v, &g, coords, rng)
        })
        .fold(0.0, f64::max)
}

/// Random linear read-out to a scalar, so every output coordinate carries a
/// distinct upstream gradient.
pub fn project(tape: &mut Tape, y: Var, rng: &mut impl Rng) -> Var {
    let flat = tape.flatten(y).unwrap();
    let width = tape.value(flat).shape()[1];
    let w = tape.leaf(random_tensor(&[width, 1], -1.0, 1.0, rng));
    let b = tape.leaf(Tensor::zeros([1]));
    let out = tape.dense(flat, w, b).unwrap();
    tape.sum(out)
}

/// Gradient check of each differentiable primitive; returns `(name, max error)`.
pub fn primitive_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let coords = 32;

    let mut run = |name: &'static str, build: &dyn Fn(&mut Tape, &mut ChaCha8Rng) -> (Var, Vec<Var>)| {
        let mut tape = Tape::new();
        let (loss, leaves) = build(&mut tape, &mut rng);
        let err = check_all(&mut tape, loss, &leaves, coords, &mut rng);
        out.push((name, err));
    };

    run("conv2d", &|t, r| {
        let x = t.leaf(random_tensor(&[2, 5, 6, 3], -1.0, 1.0, r));
        let k = t.leaf(random_tensor(&[3, 3, 3, 4], -0.5, 0.5, r));
        let b = t.leaf(random_tensor(&[4], -0.5, 0.5, r));
        let y = t.conv2d(x, k, b).unwrap();
        (project(t, y, r), vec![x, k, b])
    });
    run("maxpool2", &|t, r| {
        let x = t.leaf(random_tensor(&[2, 5, 4, 3], -1.0, 1.0, r));
        let y = t.maxpool2(x).unwrap();
        (project(t, y, r), vec![x])
    });
    run("relu", &|t, r| {
        let x = t.leaf(random_tensor(&[3, 7], -1.0, 1.0, r));
        let y = t.relu(x);
        (project(t, y, r), vec![x])
    });
    run("sigmoid", &|t, r| {
        let x = t.leaf(random_tensor(&[3, 7], -3.0, 3.0, r));
        let y = t.sigmoid(x);
        (project(t, y, r), vec![x])
    });
    run("softmax", &|t, r| {
        let x = t.leaf(random_tensor(&[3, 6], -2.0, 2.0, r));
        let y = t.softmax(x);
        (project(t, y, r), vec![x])
    });
    run("dense", &|t, r| {
        let x = t.leaf(random_tensor(&[4, 5], -1.0, 1.0, r));
        let w = t.leaf(random_tensor(&[5, 3], -1.0, 1.0, r));
        let b = t.leaf(random_tensor(&[3], -1.0, 1.0, r));
        let y = t.dense(x, w, b).unwrap();
        (project(t, y, r), vec![x, w, b])
    });
    run("batchnorm_train", &|t, r| {
        let x = t.leaf(random_tensor(&[3, 4, 4, 3], -2.0, 2.0, r));
        let g = t.leaf(random_tensor(&[3], 0.5, 1.5, r));
        let b = t.leaf(random_tensor(&[3], -0.5, 0.5, r));
        let (y, _) = t.batchnorm_train(x, g, b).unwrap();
        (project(t, y, r), vec![x, g, b])
    });
    run("batchnorm_infer", &|t, r| {
        let x = t.leaf(random_tensor(&[2, 3, 3, 2], -2.0, 2.0, r));
        let g = t.leaf(random_tensor(&[2], 0.5, 1.5, r));
        let b = t.leaf(random_tensor(&[2], -0.5, 0.5, r));
        let stats = herbrx_core::tensor::ops::ChannelStats { mean: vec![0.3, -0.2], var: vec![1.5, 0.7] };
        let y = t.batchnorm_frozen(x, g, b, &stats).unwrap();
        (project(t, y, r), vec![x, g, b])
    });
    run("dropout", &|t, r| {
        let x = t.leaf(random_tensor(&[4, 6], -1.0, 1.0, r));
        let y = t.dropout(x, 0.5, r).unwrap();
        (project(t, y, r), vec![x])
    });
    run("concat", &|t, r| {
        let a = t.leaf(random_tensor(&[3, 4], -1.0, 1.0, r));
        let b = t.leaf(random_tensor(&[3, 2], -1.0, 1.0, r));
        let y = t.concat(a, b).unwrap();
        (project(t, y, r), vec![a, b])
    });
    run("bce", &|t, r| {
        let p = t.leaf(random_tensor(&[3, 5], 0.05, 0.95, r));
        let labels = Tensor::new([3, 5], (0..15).map(|i| (i % 3 == 0) as i32 as f64).collect()).unwrap();
        let l = t.bce_mean(p, &labels).unwrap();
        (l, vec![p])
    });
    run("kl", &|t, r| {
        let raw = t.leaf(random_tensor(&[3, 4], -1.0, 1.0, r));
        let p = t.softmax(raw);
        let target = Tensor::new([3, 4], vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1]).unwrap();
        let l = t.kl_mean(p, &target).unwrap();
        (l, vec![raw])
    });
    run("add_scale", &|t, r| {
        let a = t.leaf(random_tensor(&[2, 3], -1.0, 1.0, r));
        let b = t.leaf(random_tensor(&[2, 3], -1.0, 1.0, r));
        let s = t.scale(b, 0.37);
        let y = t.add(a, s).unwrap();
        (project(t, y, r), vec![a, b])
    });
    out
}

/// Gradient check of the full joint loss for one variant at the mini preset,
/// in train mode with a fixed dropout stream. Returns `(parameter, max error)`.
pub fn variant_check(variant: Variant, seed: u64) -> Vec<(String, f64)> {
    let herbs = 10;
    let topics = 4;
    let spec = ArchitectureSpec::mini(variant, herbs, Some(topics));
    let params = build_model(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let batch = random_tensor(&[2, 32, 32, 3], 0.0, 1.0, &mut rng);
    let labels = Tensor::new([2, herbs], (0..2 * herbs).map(|i| (i % 3 == 0) as i32 as f64).collect()).unwrap();
    let topic_gt = Tensor::new([2, topics], vec![0.4, 0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.7]).unwrap();
    let mut dropout = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut pass = record_forward(&params, &batch, Mode::Train(&mut dropout)).unwrap();
    let gt = variant.has_topic_head().then_some(&topic_gt);
    let losses = record_losses(&mut pass, &labels, gt, 0.5).unwrap();
    let grads = pass.tape.backward(losses.total).unwrap();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let leaves: Vec<(String, Var)> = pass.params.iter().map(|(n, v)| (n.clone(), *v)).collect();
    leaves
        .into_iter()
        .map(|(name, v)| {
            let g = grads.get_or_zeros(v, pass.tape.value(v));
            let err = check_leaf(&mut pass.tape, losses.total, v, &g, 32, &mut sample_rng);
            (name, err)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub held_out: usize,
    pub valid_fraction: f64,
    pub lda: LdaConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn standard(seed: u64, train_samples: usize, held_out: usize, epochs: usize) -> Self {
        let synth = SynthConfig { samples: train_samples + held_out, seed, ..SynthConfig::default() };
        let lda = LdaConfig { alpha: 0.5, seed, ..LdaConfig::with_topics(synth.topics) };
        let train = TrainConfig { epochs, seed, ..TrainConfig::default() };
        ExperimentConfig { synth, held_out, valid_fraction: 0.1, lda, train }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub iou: f64,
    pub kl_t: f64,
    pub baseline_iou: f64,
    pub empty_predictions: usize,
}

/// Synthesizes a world, fits topics on the training part, trains `variant`
/// and scores the held-out part.
pub fn run_experiment(variant: Variant, cfg: &ExperimentConfig) -> ExperimentResult {
    let (mut dataset, _) = synth_generate(&cfg.synth).unwrap();
    let n_train = dataset.len() - cfg.held_out;
    let corpus: Vec<Vec<usize>> = dataset.samples[..n_train].iter().map(|s| s.herbs.clone()).collect();
    let (topic_model, dists) = fit(&corpus, dataset.herb_count, &cfg.lda).unwrap();
    for (s, d) in dataset.samples.iter_mut().zip(&dists) {
        s.topics = Some(d.0.clone());
    }
    let train_part: Vec<&Sample> = dataset.samples[..n_train].iter().collect();
    let test_part: Vec<&Sample> = dataset.samples[n_train..].iter().collect();
    let n_valid = (n_train as f64 * cfg.valid_fraction).round() as usize;
    let (valid, fit_set) = train_part.split_at(n_valid);

    let spec = ArchitectureSpec::mini(variant, dataset.herb_count, Some(cfg.lda.topics));
    let params = build_model(&spec, cfg.train.seed).unwrap();
    let outcome = train(params, fit_set, valid, &cfg.train).unwrap();

    let images: Vec<&Tensor> = test_part.iter().map(|s| &s.image).collect();
    let probs = predict_batched(&outcome.params, &images, 64).unwrap().herb_probs;
    let mut empty = 0;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = test_part
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rx = predict_prescription(probs.row(i), cfg.train.threshold);
            empty += rx.empty as usize;
            (rx.herbs, s.herbs.clone())
        })
        .collect();
    let kl = kl_t_metric(&pairs, &topic_model, &cfg.lda).unwrap();
    let report = MetricsReport::compute(&pairs, Some(kl.mean)).unwrap();

    let mean_size = corpus.iter().map(Vec::len).sum::<usize>() as f64 / corpus.len() as f64;
    let top = most_frequent_herbs(&corpus, dataset.herb_count, mean_size.round() as usize).unwrap();
    let baseline_pairs: Vec<(Vec<usize>, Vec<usize>)> =
        test_part.iter().map(|s| (top.clone(), s.herbs.clone())).collect();
    let baseline = MetricsReport::compute(&baseline_pairs, None).unwrap();

    ExperimentResult { iou: report.iou_sim, kl_t: kl.mean, baseline_iou: baseline.iou_sim, empty_predictions: empty }
}
