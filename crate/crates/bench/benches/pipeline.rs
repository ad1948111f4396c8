use std::hint::black_box;
use std::ops::ControlFlow;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylecap::autodiff::Tape;
use stylecap::cvae::{kl_divergence, GaussianParams, LossSettings};
use stylecap::embed::{contrastive_loss, AlignedFeature, FeatureSource};
use stylecap::metrics::{bleu, cider, perplexity, Smoothing, TrigramLm};
use stylecap::toy::{self, ToyConfig};
use stylecap::{RunConfig, TrainOutcome};

fn trained() -> (toy::ToyDataset, TrainOutcome) {
    let data = toy::generate(&ToyConfig {
        n_paired: 64,
        n_unpaired_per_style: 48,
        n_test: 8,
        feature_dim: 256,
        ..ToyConfig::default()
    })
    .unwrap();
    let cfg = RunConfig {
        feature_dim: 256,
        epochs: 2,
        ..RunConfig::toy()
    };
    let outcome = stylecap::train(&data.data, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
    (data, outcome)
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, dim: usize, source: FeatureSource) -> Vec<AlignedFeature> {
    (0..n)
        .map(|_| AlignedFeature::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), source).unwrap())
        .collect()
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = random_features(&mut rng, 64, 128, FeatureSource::Image);
    let objects = random_features(&mut rng, 64, 128, FeatureSource::ObjectWords);
    c.bench_function("contrastive_loss_64x128", |b| {
        b.iter(|| contrastive_loss(black_box(&images), black_box(&objects), 0.1).unwrap())
    });

    let post = GaussianParams {
        mean: (0..100).map(|i| i as f64 * 0.01).collect(),
        log_var: vec![-0.5; 100],
    };
    let prior = GaussianParams::unit(vec![0.1; 100]);
    c.bench_function("kl_divergence_100d", |b| b.iter(|| kl_divergence(black_box(&post), black_box(&prior)).unwrap()));
}

fn model(c: &mut Criterion) {
    let (data, outcome) = trained();
    let captioner = &outcome.captioner;
    let settings = LossSettings::from_config(&captioner.config);
    let batch: Vec<_> = outcome.train_examples.iter().filter(|e| e.image.is_some()).take(16).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    c.bench_function("cvae_batch16_loss_and_grad", |b| {
        b.iter(|| {
            let model = &captioner.model;
            let mut tape = Tape::new(&model.store);
            let (total, _) = model.batch_loss_on_tape(&mut tape, &batch, &settings, &mut rng).unwrap();
            black_box(tape.backward(total))
        })
    });

    let style = captioner.style("romantic").unwrap().clone();
    let image = &data.test[0].feature;
    let mut seed = 0u64;
    c.bench_function("caption_image_with_recheck", |b| {
        b.iter(|| {
            seed += 1;
            captioner.caption_image(black_box(image), &style, seed).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let data = toy::generate(&ToyConfig {
        n_test: 200,
        feature_dim: 8,
        ..ToyConfig::default()
    })
    .unwrap();
    let refs: Vec<Vec<Vec<String>>> = data.test.iter().map(|img| img.references("romantic")).collect();
    let cands: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
    c.bench_function("bleu4_200", |b| b.iter(|| bleu(black_box(&cands), black_box(&refs), 4).unwrap()));
    c.bench_function("cider_200", |b| b.iter(|| cider(black_box(&cands), black_box(&refs)).unwrap()));

    let corpus: Vec<Vec<String>> = data.data.unpaired.iter().map(|s| s.caption.tokens.clone()).collect();
    let lm = TrigramLm::train(&corpus, TrigramLm::DEFAULT_WEIGHTS, Smoothing::AddOne).unwrap();
    c.bench_function("trigram_perplexity_200", |b| b.iter(|| perplexity(&lm, black_box(&cands)).unwrap()));
}

criterion_group!(benches, losses, model, metrics);
criterion_main!(benches);
