//! Dataset index, class balancing, image transforms and patient-level splits.
//!
//! Index files are tab-separated, one record per line:
//!
//! ```text
//! id  path  presence  location|-  patient  [split]
//! ```
//!
//! `presence` is `normal` or `ich`, `location` is `deep`, `lobar`,
//! `subtentorial` or `-`, and the optional `split` column is `train`, `val`
//! or `test`. Lines starting with `#` are comments; paths are relative to the
//! index file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{check_labels, Location, Presence};
use crate::image::ImageTensor;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Anything carrying the two-task labels.
pub trait Labeled {
    fn presence(&self) -> Presence;
    fn location(&self) -> Option<Location>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexRecord {
    pub id: String,
    pub path: String,
    pub presence: Presence,
    pub location: Option<Location>,
    pub patient: String,
    pub split: Option<Split>,
}

impl Labeled for IndexRecord {
    fn presence(&self) -> Presence {
        self.presence
    }

    fn location(&self) -> Option<Location> {
        self.location
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<IndexRecord>,
}

impl DatasetIndex {
    pub fn new(records: Vec<IndexRecord>) -> Result<Self> {
        let idx = DatasetIndex { records };
        idx.validate()?;
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Label consistency and patient-disjoint splits.
    pub fn validate(&self) -> Result<()> {
        let mut patient_split: BTreeMap<&str, Option<Split>> = BTreeMap::new();
        for r in &self.records {
            check_labels(r.presence, r.location).map_err(|e| Error::invalid(format!("record `{}`: {e}", r.id)))?;
            if let Some(prev) = patient_split.insert(&r.patient, r.split) {
                if prev != r.split {
                    return Err(Error::invalid(format!("patient `{}` appears in more than one split", r.patient)));
                }
            }
        }
        Ok(())
    }

    pub fn in_split(&self, split: Split) -> Vec<&IndexRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            if row.len() != 5 && row.len() != 6 {
                return Err(Error::format(
                    "dataset index",
                    format!("record {} has {} fields, expected 5 or 6", line + 1, row.len()),
                ));
            }
            let location = match &row[3] {
                "-" => None,
                s => Some(s.parse()?),
            };
            records.push(IndexRecord {
                id: row[0].to_string(),
                path: row[1].to_string(),
                presence: row[2].parse()?,
                location,
                patient: row[4].to_string(),
                split: row.get(5).map(str::parse).transpose()?,
            });
        }
        DatasetIndex::new(records)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# id\tpath\tpresence\tlocation\tpatient\tsplit\n");
        for r in &self.records {
            let loc = r.location.map_or_else(|| "-".to_string(), |l| l.to_string());
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}", r.id, r.path, r.presence, loc, r.patient));
            if let Some(s) = r.split {
                out.push_str(&format!("\t{s}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Appends copies of `group` so that it reaches `target` entries:
/// (target / n − 1) extra full passes, then the first (target mod n) once more.
fn replicate_extra<R: Clone>(group: &[&R], target: usize) -> Vec<R> {
    let n = group.len();
    let (passes, rem) = (target / n, target % n);
    let mut extra = Vec::with_capacity(target - n);
    for _ in 1..passes {
        extra.extend(group.iter().map(|&r| r.clone()));
    }
    extra.extend(group[..rem].iter().map(|&r| r.clone()));
    extra
}

/// Replicates records so the three location classes are equally frequent
/// and Normal matches the ICH total. The input order is kept and the
/// copies are appended after it.
pub fn balance<R: Labeled + Clone>(records: &[R]) -> Result<Vec<R>> {
    let mut by_loc: [Vec<&R>; 3] = Default::default();
    let mut normals = Vec::new();
    for r in records {
        check_labels(r.presence(), r.location())?;
        match r.location() {
            Some(l) => by_loc[l.index()].push(r),
            None => normals.push(r),
        }
    }
    for (l, g) in Location::ALL.iter().zip(&by_loc) {
        if g.is_empty() {
            return Err(Error::EmptyDataset(format!("no `{l}` records to balance")));
        }
    }
    if normals.is_empty() {
        return Err(Error::EmptyDataset("no `normal` records to balance".into()));
    }
    let largest = by_loc.iter().map(Vec::len).max().unwrap_or(0);
    // Normal can only grow, so the per-location target rises if Normal already exceeds 3·largest.
    let per_location = largest.max(normals.len().div_ceil(3));
    let mut out: Vec<R> = records.to_vec();
    for g in &by_loc {
        out.extend(replicate_extra(g, per_location));
    }
    out.extend(replicate_extra(&normals, 3 * per_location));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Integer box-filter reduction applied before cropping (1 = none).
    pub downsample: usize,
    pub crop_size: usize,
    pub max_rotation_degrees: f64,
    pub sharpness_factor: f64,
    pub sharpness_probability: f64,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            downsample: 1,
            crop_size: 224,
            max_rotation_degrees: 15.0,
            sharpness_factor: 2.0,
            sharpness_probability: 0.5,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.crop_size == 0 {
            return Err(Error::invalid("downsample and crop_size must be positive"));
        }
        if self.channel_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("channel std components must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sharpness_probability) || self.sharpness_factor < 0.0 {
            return Err(Error::invalid("invalid sharpness settings"));
        }
        Ok(())
    }
}

/// Mean over non-overlapping factor×factor blocks.
pub fn downsample(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 1 {
        return Ok(img.clone());
    }
    if factor == 0 || !img.height().is_multiple_of(factor) || !img.width().is_multiple_of(factor) {
        return Err(Error::invalid(format!(
            "{}x{} image is not divisible by downsample factor {factor}",
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (img.height() / factor, img.width() / factor);
    let norm = (factor * factor) as f32;
    let mut data = Vec::with_capacity(img.channels() * h * w);
    for c in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += img.get(c, y * factor + dy, x * factor + dx);
                    }
                }
                data.push(s / norm);
            }
        }
    }
    ImageTensor::new(img.channels(), h, w, data, img.range())
}

/// Centered size×size window; odd margins put the extra pixel right/bottom.
pub fn center_crop(img: &ImageTensor, size: usize) -> Result<ImageTensor> {
    if img.height() < size || img.width() < size || size == 0 {
        return Err(Error::invalid(format!(
            "cannot crop {size}x{size} from {}x{}",
            img.height(),
            img.width()
        )));
    }
    let top = (img.height() - size) / 2;
    let left = (img.width() - size) / 2;
    let mut data = Vec::with_capacity(img.channels() * size * size);
    for c in 0..img.channels() {
        for y in 0..size {
            for x in 0..size {
                data.push(img.get(c, top + y, left + x));
            }
        }
    }
    ImageTensor::new(img.channels(), size, size, data, img.range())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    /// Exact index mapping; used for oracle tests.
    Nearest,
}

/// Counter-clockwise rotation about the image center; samples falling
/// outside the source are zero.
pub fn rotate(img: &ImageTensor, degrees: f64, interp: Interpolation) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = vec![0.0f32; img.data().len()];
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            f64::from(img.get(ch, y as usize, x as usize))
        }
    };
    for ch in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cx + dx * c - dy * s;
                let sy = cy + dx * s + dy * c;
                let v = match interp {
                    Interpolation::Nearest => at(ch, sy.round() as isize, sx.round() as isize),
                    Interpolation::Bilinear => {
                        let (x0, y0) = (sx.floor(), sy.floor());
                        let (fx, fy) = (sx - x0, sy - y0);
                        let (x0, y0) = (x0 as isize, y0 as isize);
                        at(ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
                            + at(ch, y0, x0 + 1) * fx * (1.0 - fy)
                            + at(ch, y0 + 1, x0) * (1.0 - fx) * fy
                            + at(ch, y0 + 1, x0 + 1) * fx * fy
                    }
                };
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    img.with_data(out)
}

/// Blends the image with a 3×3 smoothed copy: `factor·orig + (1−factor)·smooth`,
/// clamped to the image range. Border pixels keep their original value in the
/// smoothed copy.
pub fn adjust_sharpness(img: &ImageTensor, factor: f64) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let (lo, hi) = img.range();
    let mut out = img.data().to_vec();
    for ch in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                let orig = f64::from(img.get(ch, y, x));
                let smooth = if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                    orig
                } else {
                    let mut s = 0.0;
                    for yy in y - 1..=y + 1 {
                        for xx in x - 1..=x + 1 {
                            s += f64::from(img.get(ch, yy, xx));
                        }
                    }
                    (s + 4.0 * orig) / 13.0
                };
                let v = factor * orig + (1.0 - factor) * smooth;
                out[(ch * h + y) * w + x] = (v as f32).clamp(lo, hi);
            }
        }
    }
    img.with_data(out)
}

/// Scales 8-bit intensities to [0, 1], replicates to three channels and
/// standardizes each channel.
pub fn to_model_input(img: &ImageTensor, cfg: &AugmentConfig) -> Result<ImageTensor> {
    if img.channels() != 1 {
        return Err(Error::invalid(format!("expected one channel, got {}", img.channels())));
    }
    let plane = img.plane(0);
    let mut data = Vec::with_capacity(plane.len() * 3);
    for c in 0..3 {
        let (m, s) = (cfg.channel_mean[c], cfg.channel_std[c]);
        data.extend(plane.iter().map(|&v| ((f64::from(v) / 255.0 - m) / s) as f32));
    }
    let lo = (0..3).map(|c| -cfg.channel_mean[c] / cfg.channel_std[c]).fold(f64::INFINITY, f64::min);
    let hi = (0..3)
        .map(|c| (1.0 - cfg.channel_mean[c]) / cfg.channel_std[c])
        .fold(f64::NEG_INFINITY, f64::max);
    ImageTensor::new(3, img.height(), img.width(), data, (lo as f32, hi as f32))
}

/// Deterministic evaluation chain: downsample, center crop, normalize.
pub fn eval_transform(img: &ImageTensor, cfg: &AugmentConfig) -> Result<ImageTensor> {
    let x = downsample(img, cfg.downsample)?;
    let x = center_crop(&x, cfg.crop_size)?;
    to_model_input(&x, cfg)
}

/// Training chain with random rotation and sharpness drawn from `rng`.
pub fn train_transform(img: &ImageTensor, cfg: &AugmentConfig, rng: &mut SplitMix64) -> Result<ImageTensor> {
    let x = downsample(img, cfg.downsample)?;
    let x = center_crop(&x, cfg.crop_size)?;
    let angle = rng.uniform(-cfg.max_rotation_degrees, cfg.max_rotation_degrees);
    let sharpen = rng.bernoulli(cfg.sharpness_probability);
    let mut x = rotate(&x, angle, Interpolation::Bilinear);
    if sharpen {
        x = adjust_sharpness(&x, cfg.sharpness_factor);
    }
    to_model_input(&x, cfg)
}

/// Assigns every record a split by shuffling patients and cutting the
/// shuffled list at the cumulative ratios.
pub fn split(records: &[IndexRecord], ratios: [f64; 3], seed: u64) -> Result<DatasetIndex> {
    if ratios.iter().any(|&r| !(r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let patients: BTreeSet<&str> = records.iter().map(|r| r.patient.as_str()).collect();
    let mut patients: Vec<&str> = patients.into_iter().collect();
    if patients.is_empty() {
        return Err(Error::EmptyDataset("no records to split".into()));
    }
    SplitMix64::stream(seed, "split").shuffle(&mut patients);
    let n = patients.len() as f64;
    let cut1 = (ratios[0] * n).round() as usize;
    let cut2 = ((ratios[0] + ratios[1]) * n).round() as usize;
    let bounds = [(0, cut1), (cut1, cut2), (cut2, patients.len())];
    let mut assign = BTreeMap::new();
    for ((split, &(a, b)), &ratio) in Split::ALL.iter().zip(&bounds).zip(&ratios) {
        if ratio > 0.0 && a == b {
            return Err(Error::EmptyDataset(format!(
                "{split} split receives no patients ({} patients, ratios {ratios:?})",
                patients.len()
            )));
        }
        for p in &patients[a..b] {
            assign.insert(*p, *split);
        }
    }
    let records = records
        .iter()
        .map(|r| IndexRecord {
            split: Some(assign[r.patient.as_str()]),
            ..r.clone()
        })
        .collect();
    DatasetIndex::new(records)
}
