use crate::error::{Error, Result};

/// Channel-major (c×h×w) floating-point raster.
///
/// `range` records the nominal value interval, e.g. `(0, 255)` for decoded
/// 8-bit pixels; transforms that clamp use it as their bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    range: (f32, f32),
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>, range: (f32, f32)) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![channels, height, width],
                rhs: vec![data.len()],
            });
        }
        if range.0 > range.1 {
            return Err(Error::invalid(format!("inverted value range {range:?}")));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            range: (0.0, 255.0),
        }
    }

    /// Single-channel image from 8-bit pixels, range (0, 255).
    pub fn from_gray8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        ImageTensor::new(1, height, width, pixels.iter().map(|&p| f32::from(p)).collect(), (0.0, 255.0))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> (f32, f32) {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        ImageTensor { data, ..self.clone() }
    }
}
