//! Synthetic head slices with optional hyperdense blob and fixation-brace arcs.
//!
//! Geometry scales with the image size `S`. The head is an axis-aligned
//! ellipse centered in the image; its outer band is skull, the rest brain.
//! Normalized brain coordinates `(u, v)` map the brain ellipse to the unit
//! disk, with `v < 0` toward the top of the image. Blob centers obey:
//!
//! * Deep: `√(u²+v²) ≤ 0.3`.
//! * Lobar: `0.75 ≤ √(u²+v²) < 1`, within 45° of straight up.
//! * Subtentorial: in the lowest 30% of the head's vertical extent.
//!
//! Brace arcs are circular bands concentric with the head, placed beyond
//! the head's largest semi-axis plus a gap, on the lower left and lower right.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datapipe::{DatasetIndex, IndexRecord};
use crate::error::{Error, Result};
use crate::heads::{LabeledSample, Location, Presence};
use crate::image::ImageTensor;
use crate::morph::{preprocess, BinaryMask, MorphParams};
use crate::raster::{RawScan, MIN_SCAN_EXTENT};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhantomClass {
    Normal,
    Deep,
    Lobar,
    Subtentorial,
}

impl PhantomClass {
    /// Order used for per-class counts.
    pub const ALL: [PhantomClass; 4] = [
        PhantomClass::Normal,
        PhantomClass::Deep,
        PhantomClass::Lobar,
        PhantomClass::Subtentorial,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn presence(self) -> Presence {
        match self {
            PhantomClass::Normal => Presence::Normal,
            _ => Presence::Ich,
        }
    }

    pub fn location(self) -> Option<Location> {
        match self {
            PhantomClass::Normal => None,
            PhantomClass::Deep => Some(Location::Deep),
            PhantomClass::Lobar => Some(Location::Lobar),
            PhantomClass::Subtentorial => Some(Location::Subtentorial),
        }
    }

    pub fn from_labels(presence: Presence, location: Option<Location>) -> Result<Self> {
        crate::heads::check_labels(presence, location)?;
        Ok(match location {
            None => PhantomClass::Normal,
            Some(Location::Deep) => PhantomClass::Deep,
            Some(Location::Lobar) => PhantomClass::Lobar,
            Some(Location::Subtentorial) => PhantomClass::Subtentorial,
        })
    }
}

impl fmt::Display for PhantomClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomClass::Normal => "normal",
            PhantomClass::Deep => "deep",
            PhantomClass::Lobar => "lobar",
            PhantomClass::Subtentorial => "subtentorial",
        })
    }
}

impl FromStr for PhantomClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PhantomClass::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown phantom class `{s}`")))
    }
}

/// Fractions are relative to the image size; pixel quantities are rounded
/// and floored at the stated minimums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub size: usize,
    /// Head semi-axes (x, y) as fractions of size.
    pub head_axes: (f64, f64),
    /// Skull band thickness, fraction of size (at least 4 px).
    pub skull_thickness: f64,
    pub background_level: i16,
    pub skull_level: i16,
    pub brain_level: i16,
    /// Half-width of the uniform integer noise added to every pixel.
    pub noise_amplitude: i16,
    pub blob_level: i16,
    /// Blob radius range, fractions of size.
    pub blob_radius: (f64, f64),
    pub brace_level: i16,
    /// Arc band thickness, fraction of size (at least 1 px).
    pub brace_thickness: f64,
    /// Clearance between head and arcs, fraction of size (at least 2 px).
    pub brace_gap: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 256,
            head_axes: (0.36, 0.42),
            skull_thickness: 0.04,
            background_level: -1000,
            skull_level: 1400,
            brain_level: 40,
            noise_amplitude: 5,
            blob_level: 90,
            blob_radius: (0.04, 0.06),
            brace_level: 1800,
            brace_thickness: 0.015,
            brace_gap: 0.03,
        }
    }
}

const MAX_PLACEMENT_TRIES: usize = 2000;

/// Pixel-space geometry derived from a spec.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: f64,
    head: (f64, f64),
    brain: (f64, f64),
    brace_radius: f64,
    brace_half: f64,
    blob_radius: (f64, f64),
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SCAN_EXTENT {
            return Err(Error::invalid(format!("phantom size must be at least {MIN_SCAN_EXTENT}")));
        }
        let (ax, ay) = self.head_axes;
        if !(ax > 0.0 && ay > 0.0 && ax < 0.5 && ay < 0.5) {
            return Err(Error::invalid("head axes must lie in (0, 0.5)"));
        }
        if self.noise_amplitude < 0 {
            return Err(Error::invalid("noise amplitude must be non-negative"));
        }
        if i32::from(self.blob_level) - i32::from(self.brain_level) < 4 * i32::from(self.noise_amplitude) {
            return Err(Error::invalid("blob level must exceed brain level by at least 4× the noise amplitude"));
        }
        let (r0, r1) = self.blob_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::invalid("blob radius range must be positive and ordered"));
        }
        let g = self.geometry();
        if g.brain.0 <= 0.0 || g.brain.1 <= 0.0 {
            return Err(Error::Geometry("skull band leaves no brain".into()));
        }
        Ok(())
    }

    fn px(&self, frac: f64, min: f64) -> f64 {
        (frac * self.size as f64).round().max(min)
    }

    fn geometry(&self) -> Geometry {
        let s = self.size as f64;
        let head = (self.head_axes.0 * s, self.head_axes.1 * s);
        let skull = self.px(self.skull_thickness, 4.0);
        let thick = self.px(self.brace_thickness, 1.0);
        let gap = self.px(self.brace_gap, 2.0);
        Geometry {
            c: (s - 1.0) / 2.0,
            head,
            brain: (head.0 - skull, head.1 - skull),
            brace_radius: head.0.max(head.1) + gap + thick / 2.0,
            brace_half: thick / 2.0,
            blob_radius: (self.blob_radius.0 * s, self.blob_radius.1 * s),
        }
    }

    /// Same spec with a different image size.
    pub fn with_size(self, size: usize) -> Self {
        PhantomSpec { size, ..self }
    }
}

fn in_ellipse(x: f64, y: f64, c: f64, axes: (f64, f64)) -> bool {
    let (dx, dy) = ((x - c) / axes.0, (y - c) / axes.1);
    dx * dx + dy * dy <= 1.0
}

/// One generated slice with its ground-truth masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub class: PhantomClass,
    pub scan: RawScan,
    pub head: BinaryMask,
    pub brain: BinaryMask,
    pub blob: BinaryMask,
    pub brace: BinaryMask,
    /// (x, y) in pixels.
    pub blob_center: Option<(f64, f64)>,
}

impl Phantom {
    pub fn presence(&self) -> Presence {
        self.class.presence()
    }

    pub fn location(&self) -> Option<Location> {
        self.class.location()
    }

    /// Runs the morphology pipeline and wraps the 8-bit result with its labels.
    pub fn to_sample(&self, morph: &MorphParams) -> Result<LabeledSample> {
        let img = preprocess(&self.scan, morph)?;
        let image = ImageTensor::from_gray8(img.height(), img.width(), img.pixels())?;
        LabeledSample::new(image, self.presence(), self.location())
    }
}

/// Normalized brain coordinates (u, v) of a pixel position.
pub fn brain_coords(spec: &PhantomSpec, x: f64, y: f64) -> (f64, f64) {
    let g = spec.geometry();
    ((x - g.c) / g.brain.0, (y - g.c) / g.brain.1)
}

/// Whether a blob center at (x, y) satisfies the class's region rule.
pub fn center_in_region(spec: &PhantomSpec, class: PhantomClass, x: f64, y: f64) -> bool {
    let g = spec.geometry();
    let (u, v) = brain_coords(spec, x, y);
    let rho = (u * u + v * v).sqrt();
    match class {
        PhantomClass::Normal => false,
        PhantomClass::Deep => rho <= 0.3,
        PhantomClass::Lobar => (0.75..1.0).contains(&rho) && v < 0.0 && u.abs() <= -v,
        PhantomClass::Subtentorial => (y - g.c) / g.head.1 >= 0.4,
    }
}

fn sample_center(class: PhantomClass, g: &Geometry, rng: &mut SplitMix64) -> (f64, f64) {
    let (u, v) = match class {
        PhantomClass::Normal => (0.0, 0.0),
        PhantomClass::Deep => loop {
            let (u, v) = (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
            if u * u + v * v <= 0.09 {
                break (u, v);
            }
        },
        PhantomClass::Lobar => {
            let rho = rng.uniform(0.75, 1.0);
            let phi = rng.uniform(-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4);
            (rho * phi.sin(), -rho * phi.cos())
        }
        PhantomClass::Subtentorial => {
            // Sampled in head-normalized units, then mapped to brain units.
            let yh = rng.uniform(0.4, 1.0);
            let xh = rng.uniform(-0.5, 0.5);
            (xh * g.head.0 / g.brain.0, yh * g.head.1 / g.brain.1)
        }
    };
    (g.c + u * g.brain.0, g.c + v * g.brain.1)
}

/// Every pixel within `r + 1` of the center lies inside the brain.
fn blob_fits(g: &Geometry, cx: f64, cy: f64, r: f64) -> bool {
    let reach = r + 1.0;
    (0..32).all(|k| {
        let t = k as f64 * std::f64::consts::TAU / 32.0;
        in_ellipse(cx + reach * t.cos(), cy + reach * t.sin(), g.c, g.brain)
    }) && in_ellipse(cx, cy, g.c, g.brain)
}

pub fn generate(class: PhantomClass, spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let g = spec.geometry();
    let n = spec.size;
    let mut rng = SplitMix64::keyed(seed, "phantom", &[class.index() as u64]);

    let (blob_center, blob_r) = if class == PhantomClass::Normal {
        (None, 0.0)
    } else {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let r = rng.uniform(g.blob_radius.0, g.blob_radius.1);
            let (x, y) = sample_center(class, &g, &mut rng);
            if center_in_region(spec, class, x, y) && blob_fits(&g, x, y, r) {
                placed = Some(((x, y), r));
                break;
            }
        }
        let Some((c, r)) = placed else {
            return Err(Error::Geometry(format!(
                "no {class} blob of radius {:.1}..{:.1} px fits a {n}×{n} phantom",
                g.blob_radius.0, g.blob_radius.1
            )));
        };
        (Some(c), r)
    };

    let head = BinaryMask::from_fn(n, n, |y, x| in_ellipse(x as f64, y as f64, g.c, g.head));
    let brain = BinaryMask::from_fn(n, n, |y, x| in_ellipse(x as f64, y as f64, g.c, g.brain));
    let blob = BinaryMask::from_fn(n, n, |y, x| match blob_center {
        Some((bx, by)) => (x as f64 - bx).powi(2) + (y as f64 - by).powi(2) <= blob_r * blob_r,
        None => false,
    });
    let brace = BinaryMask::from_fn(n, n, |y, x| {
        let (dx, dy) = (x as f64 - g.c, y as f64 - g.c);
        let d = (dx * dx + dy * dy).sqrt();
        let deg = dy.atan2(dx).to_degrees();
        let on_arc = (20.0..=70.0).contains(&deg) || (110.0..=160.0).contains(&deg);
        on_arc && (d - g.brace_radius).abs() <= g.brace_half
    });

    let amp = spec.noise_amplitude as u64;
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let base = if blob.get(y, x) {
                spec.blob_level
            } else if brain.get(y, x) {
                spec.brain_level
            } else if head.get(y, x) {
                spec.skull_level
            } else if brace.get(y, x) {
                spec.brace_level
            } else {
                spec.background_level
            };
            let noise = rng.below(2 * amp + 1) as i32 - amp as i32;
            let v = (i32::from(base) + noise).clamp(i32::from(i16::MIN), i32::from(i16::MAX));
            pixels.push(v as i16);
        }
    }
    Ok(Phantom {
        class,
        scan: RawScan::new(n, n, pixels)?,
        head,
        brain,
        blob,
        brace,
        blob_center,
    })
}

/// Writes `counts[k]` slices of class `PhantomClass::ALL[k]` as DTR1 files
/// plus `index.tsv` into `dir`. Slices are shuffled into synthetic patients
/// of `slices_per_patient` each.
pub fn generate_dataset(
    counts: [usize; 4],
    spec: &PhantomSpec,
    seed: u64,
    slices_per_patient: usize,
    dir: &Path,
) -> Result<DatasetIndex> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDataset("all phantom counts are zero".into()));
    }
    if slices_per_patient == 0 {
        return Err(Error::invalid("slices per patient must be positive"));
    }
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(total);
    for (class, &count) in PhantomClass::ALL.iter().zip(&counts) {
        for i in 0..count {
            items.push((*class, i));
        }
    }
    let mut order: Vec<usize> = (0..total).collect();
    SplitMix64::stream(seed, "patients").shuffle(&mut order);
    let mut patient = vec![0usize; total];
    for (slot, &item) in order.iter().enumerate() {
        patient[item] = slot / slices_per_patient;
    }
    let mut records = Vec::with_capacity(total);
    for (k, &(class, i)) in items.iter().enumerate() {
        let sample_seed = SplitMix64::keyed(seed, "phantom-sample", &[class.index() as u64, i as u64]).next_u64();
        let p = generate(class, spec, sample_seed)?;
        let id = format!("{class}_{i:05}");
        let path = format!("{id}.dtr");
        p.scan.write_dtr1(&dir.join(&path))?;
        records.push(IndexRecord {
            id,
            path,
            presence: class.presence(),
            location: class.location(),
            patient: format!("p{:04}", patient[k]),
            split: None,
        });
    }
    let index = DatasetIndex::new(records)?;
    index.write(&dir.join("index.tsv"))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled() {
        let spec = PhantomSpec::default();
        let a = generate(PhantomClass::Lobar, &spec, 9).unwrap();
        let b = generate(PhantomClass::Lobar, &spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.location(), Some(Location::Lobar));
        let n = generate(PhantomClass::Normal, &spec, 9).unwrap();
        assert_eq!(n.blob.count(), 0);
        assert_eq!(n.presence(), Presence::Normal);
    }

    #[test]
    fn masks_are_disjoint_where_required() {
        for class in PhantomClass::ALL {
            for size in [64, 256] {
                let spec = PhantomSpec::default().with_size(size);
                let p = generate(class, &spec, 1).unwrap();
                assert!(p.blob.is_subset_of(&p.brain));
                assert_eq!(p.brace.overlap(&p.head), 0);
                assert!(p.brace.count() > 0);
            }
        }
    }

    #[test]
    fn blob_is_hyperdense() {
        let spec = PhantomSpec::default();
        let p = generate(PhantomClass::Deep, &spec, 4).unwrap();
        let (mut sum, mut n) = (0i64, 0i64);
        for y in 0..spec.size {
            for x in 0..spec.size {
                if p.blob.get(y, x) {
                    sum += i64::from(p.scan.get(y, x));
                    n += 1;
                }
            }
        }
        assert!(sum as f64 / n as f64 >= f64::from(spec.brain_level + 4 * spec.noise_amplitude));
    }

    #[test]
    fn infeasible_blob_is_reported() {
        let spec = PhantomSpec {
            blob_radius: (0.3, 0.3),
            ..Default::default()
        };
        assert!(matches!(generate(PhantomClass::Lobar, &spec, 0), Err(Error::Geometry(_))));
        let spec = PhantomSpec {
            blob_level: 50,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dataset_files_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::default().with_size(64);
        let idx = generate_dataset([0, 0, 0, 5], &spec, 3, 64, dir.path()).unwrap();
        assert_eq!(idx.len(), 5);
        assert!(idx.records.iter().all(|r| r.presence == Presence::Ich && r.id.starts_with("subtentorial")));
        assert!(dir.path().join("subtentorial_00004.dtr").exists());
        assert!(generate_dataset([0; 4], &spec, 3, 64, dir.path()).is_err());
    }
}
