//! Shared helpers for integration and acceptance tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use dtvit_core::heads::combined_loss;
use dtvit_core::morph::{BinaryMask, Connectivity};
use dtvit_core::{Dtvit, DtvitConfig, Graph, ImageTensor, Location, Presence, SplitMix64, Tensor};

pub const H: f64 = 1e-5;

/// |a − n| / max(|a|, |n|, 1e-6). The floor keeps entries whose true
/// gradient is ~0 from turning round-off into a large ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` along `dir` at `x`.
pub fn directional_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn random_image(rng: &mut SplitMix64, side: usize) -> ImageTensor {
    let data: Vec<f32> = (0..3 * side * side).map(|_| rng.normal() as f32).collect();
    ImageTensor::new(3, side, side, data, (-5.0, 5.0)).unwrap()
}

/// One sample of every class so both heads contribute.
pub fn mixed_labels() -> (Vec<Presence>, Vec<Option<Location>>) {
    (
        vec![Presence::Normal, Presence::Ich, Presence::Ich, Presence::Ich],
        vec![None, Some(Location::Deep), Some(Location::Lobar), Some(Location::Subtentorial)],
    )
}

pub fn model_loss(
    model: &Dtvit<f64>,
    images: &[ImageTensor],
    presence: &[Presence],
    location: &[Option<Location>],
) -> f64 {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false).unwrap();
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let (l1, l2) = model.forward(&mut g, &vars, &refs).unwrap();
    let loss = combined_loss(&mut g, l1, presence, l2, location).unwrap();
    g.value(loss.combined).item()
}

pub fn model_grads(
    model: &Dtvit<f64>,
    images: &[ImageTensor],
    presence: &[Presence],
    location: &[Option<Location>],
) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true).unwrap();
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let (l1, l2) = model.forward(&mut g, &vars, &refs).unwrap();
    let loss = combined_loss(&mut g, l1, presence, l2, location).unwrap();
    let grads = g.backward(loss.combined).unwrap();
    model.params().collect_grads(&vars.bindings, &grads)
}

#[derive(Debug)]
pub struct GradCheck {
    /// (tensor name, worst relative error over its checked entries)
    pub per_tensor: Vec<(String, f64)>,
    pub directional: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(self.directional, f64::max)
    }
}

/// Finite-difference check of the tiny model's combined loss in f64.
///
/// Every tensor gets `entries` probes: its largest-gradient entry plus
/// random ones. A random direction over all parameters at once covers
/// the entries not probed individually.
pub fn tiny_model_gradcheck(seed: u64, entries: usize) -> GradCheck {
    let cfg = DtvitConfig::tiny();
    let model: Dtvit<f64> = Dtvit::init(cfg, seed).unwrap();
    let mut rng = SplitMix64::stream(seed, "gradcheck");
    let side = cfg.encoder.patch.height;
    let images: Vec<ImageTensor> = (0..4).map(|_| random_image(&mut rng, side)).collect();
    let (presence, location) = mixed_labels();
    let analytic = model_grads(&model, &images, &presence, &location);

    let names: Vec<String> = model.params().names().to_vec();
    let mut per_tensor = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let g = analytic[k].data();
        let mut idx: Vec<usize> = vec![(0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap()];
        while idx.len() < entries.min(g.len()) {
            idx.push(rng.below(g.len() as u64) as usize);
        }
        let mut worst = 0.0f64;
        for &i in &idx {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(name).unwrap().data_mut()[i] += delta;
                model_loss(&m, &images, &presence, &location)
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            worst = worst.max(rel_err(g[i], numeric));
        }
        per_tensor.push((name.clone(), worst));
    }

    let flat: Vec<f64> = model.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let dir: Vec<f64> = (0..flat.len()).map(|_| rng.normal()).collect();
    let unflatten = |x: &[f64]| {
        let mut m = model.clone();
        let mut off = 0;
        for (_, t) in m.params_mut().iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        m
    };
    let f = |x: &[f64]| model_loss(&unflatten(x), &images, &presence, &location);
    let numeric = directional_fd(&f, &flat, &dir, H);
    let analytic_dir: f64 = analytic
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .zip(&dir)
        .map(|(a, d)| a * d)
        .sum();
    GradCheck {
        per_tensor,
        directional: rel_err(analytic_dir, numeric),
    }
}

/// Desk-scale settings: 64×64 phantoms, brain window, halved to 32×32.
pub fn tiny_pipeline() -> (
    dtvit_core::phantom::PhantomSpec,
    dtvit_core::morph::MorphParams,
    dtvit_core::datapipe::AugmentConfig,
) {
    use dtvit_core::datapipe::AugmentConfig;
    use dtvit_core::morph::{MorphParams, Window};
    use dtvit_core::phantom::PhantomSpec;
    let spec = PhantomSpec::default().with_size(64);
    let morph = MorphParams {
        erosion_radius: 1,
        window: Some(Window {
            center: 50.0,
            width: 100.0,
        }),
        ..MorphParams::default()
    };
    let augment = AugmentConfig {
        downsample: 2,
        crop_size: 32,
        ..AugmentConfig::default()
    };
    (spec, morph, augment)
}

/// `per_class` preprocessed phantoms of every class, classes interleaved.
pub fn phantom_samples(per_class: usize, seed: u64) -> Vec<dtvit_core::LabeledSample> {
    use dtvit_core::phantom::{generate, PhantomClass};
    let (spec, morph, _) = tiny_pipeline();
    let mut out = Vec::with_capacity(4 * per_class);
    for i in 0..per_class {
        for class in PhantomClass::ALL {
            let s = SplitMix64::keyed(seed, "test-phantom", &[class.index() as u64, i as u64]).next_u64();
            out.push(generate(class, &spec, s).unwrap().to_sample(&morph).unwrap());
        }
    }
    out
}

pub fn random_mask(rng: &mut SplitMix64, side: usize) -> BinaryMask {
    let density = rng.uniform(0.3, 0.95);
    let bits = (0..side * side).map(|_| rng.bernoulli(density)).collect();
    BinaryMask::new(side, side, bits).unwrap()
}

/// Keeps a pixel iff every grid offset within the radius lands on a set pixel.
pub fn naive_erode(m: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let r = r as isize;
    BinaryMask::from_fn(m.height(), m.width(), |y, x| {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h || xx >= w || !m.get(yy as usize, xx as usize) {
                    return false;
                }
            }
        }
        true
    })
}

/// Breadth-first search from every border background pixel; whatever
/// background it cannot reach is a hole.
pub fn naive_fill(m: &BinaryMask, conn: Connectivity) -> BinaryMask {
    let (h, w) = (m.height(), m.width());
    let mut reached = vec![false; h * w];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && !m.get(y, x) {
                reached[y * w + x] = true;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for &(dy, dx) in conn.offsets() {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                continue;
            }
            let i = yy as usize * w + xx as usize;
            if !reached[i] && !m.get(yy as usize, xx as usize) {
                reached[i] = true;
                queue.push_back((yy as usize, xx as usize));
            }
        }
    }
    BinaryMask::from_fn(h, w, |y, x| m.get(y, x) || !reached[y * w + x])
}

/// Fraction of brace pixels removed and of brain pixels kept by the default
/// preprocessing mask, pooled over phantom seeds at full size.
pub fn brace_and_brain_coverage(seeds: std::ops::Range<u64>) -> (f64, f64) {
    use dtvit_core::morph::{build_mask, MorphParams};
    use dtvit_core::phantom::{generate, PhantomClass, PhantomSpec};
    let (spec, params) = (PhantomSpec::default(), MorphParams::default());
    let (mut brace, mut brace_kept, mut brain, mut brain_kept) = (0usize, 0usize, 0usize, 0usize);
    for seed in seeds {
        let p = generate(PhantomClass::ALL[seed as usize % 4], &spec, seed).unwrap();
        let mask = build_mask(&p.scan, &params).unwrap();
        brace += p.brace.count();
        brace_kept += p.brace.overlap(&mask);
        brain += p.brain.count();
        brain_kept += p.brain.overlap(&mask);
    }
    (1.0 - brace_kept as f64 / brace as f64, brain_kept as f64 / brain as f64)
}
