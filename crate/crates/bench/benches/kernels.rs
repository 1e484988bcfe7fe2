use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use dtvit_core::heads::combined_loss;
use dtvit_core::morph::{erode_disk, fill_holes, BinaryMask, Connectivity};
use dtvit_core::phantom::{generate, PhantomClass, PhantomSpec};
use dtvit_core::{Dtvit, DtvitConfig, Graph, ImageTensor, Location, Presence, SplitMix64};

fn batch(n: usize, side: usize) -> Vec<ImageTensor> {
    let mut rng = SplitMix64::new(1);
    (0..n)
        .map(|_| {
            let data = (0..3 * side * side).map(|_| rng.normal() as f32).collect();
            ImageTensor::new(3, side, side, data, (-5.0, 5.0)).unwrap()
        })
        .collect()
}

fn encoder(c: &mut Criterion) {
    let model: Dtvit<f32> = Dtvit::init(DtvitConfig::tiny(), 0).unwrap();
    let images = batch(16, 32);
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let presence = [Presence::Normal, Presence::Ich].repeat(8);
    let location: Vec<Option<Location>> = (0..16).map(|i| (i % 2 == 1).then_some(Location::Lobar)).collect();

    c.bench_function("tiny forward, batch 16", |b| b.iter(|| model.logits(black_box(&refs)).unwrap()));
    c.bench_function("tiny forward+backward, batch 16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true).unwrap();
            let (l1, l2) = model.forward(&mut g, &vars, &refs).unwrap();
            let loss = combined_loss(&mut g, l1, &presence, l2, &location).unwrap();
            g.backward(loss.combined).unwrap()
        })
    });
}

fn morphology(c: &mut Criterion) {
    let p = generate(PhantomClass::Lobar, &PhantomSpec::default(), 3).unwrap();
    let head = &p.head;
    for r in [1, 10] {
        c.bench_function(&format!("erode_disk 256² r={r}"), |b| b.iter(|| erode_disk(black_box(head), r)));
    }
    let mut rng = SplitMix64::new(5);
    let bits = (0..256 * 256).map(|_| rng.bernoulli(0.6)).collect();
    let noisy = BinaryMask::new(256, 256, bits).unwrap();
    c.bench_function("fill_holes 256² noisy", |b| {
        b.iter_batched(|| noisy.clone(), |m| fill_holes(&m, Connectivity::Four), BatchSize::SmallInput)
    });
}

criterion_group!(benches, encoder, morphology);
criterion_main!(benches);
