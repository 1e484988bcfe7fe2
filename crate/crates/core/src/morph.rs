//! Brace removal by morphological masking.
//!
//! A mask is derived from a copy of the raw scan (binarize, disk erosion,
//! edge-column suppression, hole filling) and then applied to the untouched
//! scan, which is rescaled to 8 bits.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Gray8, RawScan};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![height, width],
                rhs: vec![bits.len()],
            });
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        BinaryMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Number of pixels set in both masks.
    pub fn overlap(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::invalid(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Linear display window in raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphParams {
    /// Raw-unit threshold; `None` means 10% of the scan's maximum.
    pub threshold: Option<f64>,
    pub erosion_radius: usize,
    pub edge_columns: usize,
    pub fill_connectivity: u8,
    pub window: Option<Window>,
}

impl Default for MorphParams {
    fn default() -> Self {
        MorphParams {
            threshold: None,
            erosion_radius: 3,
            edge_columns: 2,
            fill_connectivity: 4,
            window: None,
        }
    }
}

impl MorphParams {
    pub fn validate(&self) -> Result<()> {
        Connectivity::from_number(self.fill_connectivity)?;
        if let Some(t) = self.threshold {
            if !(f64::from(i16::MIN)..=f64::from(i16::MAX)).contains(&t) {
                return Err(Error::invalid(format!("threshold {t} outside the 16-bit range")));
            }
        }
        if let Some(w) = self.window {
            if !(w.width > 0.0) || !w.center.is_finite() {
                return Err(Error::invalid("window width must be positive"));
            }
        }
        Ok(())
    }

    pub fn threshold_for(&self, scan: &RawScan) -> f64 {
        self.threshold.unwrap_or_else(|| 0.1 * f64::from(scan.max_value()))
    }
}

pub fn binarize(scan: &RawScan, threshold: f64) -> BinaryMask {
    let bits = scan.pixels().iter().map(|&p| f64::from(p) > threshold).collect();
    BinaryMask {
        height: scan.height(),
        width: scan.width(),
        bits,
    }
}

/// Disk structuring element: offsets with dx² + dy² ≤ r².
/// Returns, for each row offset dy ∈ [-r, r], the horizontal half-width.
fn disk_half_widths(radius: usize) -> Vec<usize> {
    let r = radius as i64;
    (-r..=r)
        .map(|dy| {
            let mut hw = 0i64;
            while (hw + 1) * (hw + 1) + dy * dy <= r * r {
                hw += 1;
            }
            hw as usize
        })
        .collect()
}

/// Erosion by a disk of the given radius; pixels outside the grid count as false.
///
/// Each disk row is a horizontal segment, so a row prefix count of set
/// pixels answers "is the whole segment set" in O(1).
pub fn erode_disk(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height, mask.width);
    let mut prefix = vec![0u32; h * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            prefix[y * (w + 1) + x + 1] = prefix[y * (w + 1) + x] + u32::from(mask.get(y, x));
        }
    }
    let halves = disk_half_widths(radius);
    let r = radius;
    let mut out = BinaryMask::filled(h, w, false);
    for y in 0..h {
        if y < r || y + r >= h {
            continue;
        }
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let full = halves.iter().enumerate().all(|(i, &hw)| {
                let yy = y + i - r;
                if x < hw || x + hw >= w {
                    return false;
                }
                let row = &prefix[yy * (w + 1)..(yy + 1) * (w + 1)];
                (row[x + hw + 1] - row[x - hw]) as usize == 2 * hw + 1
            });
            out.set(y, x, full);
        }
    }
    out
}

pub fn zero_edge_columns(mask: &BinaryMask, k: usize) -> Result<BinaryMask> {
    if 2 * k > mask.width {
        return Err(Error::invalid(format!(
            "cannot zero {k} columns per side of a {}-wide mask",
            mask.width
        )));
    }
    let mut out = mask.clone();
    for y in 0..mask.height {
        for x in (0..k).chain(mask.width - k..mask.width) {
            out.set(y, x, false);
        }
    }
    Ok(out)
}

/// Fills background regions that are not connected to the image border.
///
/// Background components are labelled with a two-pass union-find sweep;
/// components touching the border stay background, all others become set.
pub fn fill_holes(mask: &BinaryMask, connectivity: Connectivity) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let n = h * w;
    let mut parent: Vec<usize> = (0..n).collect();

    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    // Backward neighbours already visited in raster order.
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                continue;
            }
            for &(dy, dx) in back {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || xx >= w as isize {
                    continue;
                }
                let (yy, xx) = (yy as usize, xx as usize);
                if !mask.get(yy, xx) {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, yy * w + xx);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut border = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let on_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if on_border && !mask.get(y, x) {
                let root = find(&mut parent, y * w + x);
                border[root] = true;
            }
        }
    }
    let mut out = mask.clone();
    for i in 0..n {
        if !mask.bits[i] {
            let root = find(&mut parent, i);
            out.bits[i] = !border[root];
        }
    }
    out
}

/// Sets the background region connected to `seed` (no-op when `seed` is set).
pub fn flood_fill_from(mask: &BinaryMask, seed: (usize, usize), connectivity: Connectivity) -> Result<BinaryMask> {
    let (h, w) = (mask.height, mask.width);
    if seed.0 >= h || seed.1 >= w {
        return Err(Error::invalid(format!("seed {seed:?} outside {h}x{w} mask")));
    }
    let mut out = mask.clone();
    if out.get(seed.0, seed.1) {
        return Ok(out);
    }
    let mut queue = VecDeque::from([seed]);
    out.set(seed.0, seed.1, true);
    while let Some((y, x)) = queue.pop_front() {
        for &(dy, dx) in connectivity.offsets() {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                continue;
            }
            let (yy, xx) = (yy as usize, xx as usize);
            if !out.get(yy, xx) {
                out.set(yy, xx, true);
                queue.push_back((yy, xx));
            }
        }
    }
    Ok(out)
}

/// Zeroes pixels outside `mask` and maps the rest linearly onto [0, 255].
pub fn mask_and_export(scan: &RawScan, mask: &BinaryMask, window: Option<Window>) -> Result<Gray8> {
    if scan.height() != mask.height || scan.width() != mask.width {
        return Err(Error::Shape {
            op: "mask_and_export",
            lhs: vec![scan.height(), scan.width()],
            rhs: vec![mask.height, mask.width],
        });
    }
    let inside = || {
        scan.pixels()
            .iter()
            .zip(&mask.bits)
            .filter(|(_, &m)| m)
            .map(|(&p, _)| f64::from(p))
    };
    let (lo, hi) = match window {
        Some(wd) => (wd.center - wd.width / 2.0, wd.center + wd.width / 2.0),
        None => inside().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v))),
    };
    let span = hi - lo;
    let pixels = scan
        .pixels()
        .iter()
        .zip(&mask.bits)
        .map(|(&p, &m)| {
            if !m || !(span > 0.0) {
                return 0u8;
            }
            let t = ((f64::from(p) - lo) / span).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect();
    Gray8::new(scan.height(), scan.width(), pixels)
}

pub fn build_mask(scan: &RawScan, params: &MorphParams) -> Result<BinaryMask> {
    params.validate()?;
    let conn = Connectivity::from_number(params.fill_connectivity)?;
    let m = binarize(scan, params.threshold_for(scan));
    let m = erode_disk(&m, params.erosion_radius);
    let m = zero_edge_columns(&m, params.edge_columns)?;
    Ok(fill_holes(&m, conn))
}

pub fn preprocess(scan: &RawScan, params: &MorphParams) -> Result<Gray8> {
    let mask = build_mask(scan, params)?;
    mask_and_export(scan, &mask, params.window)
}
