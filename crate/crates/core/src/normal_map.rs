//! Dense surface-normal rasters and plain intensity images.

use crate::error::{Error, Result};

/// Per-pixel surface normals stored channel-major (`3 x H x W`) together with a
/// validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        let hw = width * height;
        if values.len() != 3 * hw || mask.len() != hw {
            return Err(Error::Dimension(format!(
                "normal map {width}x{height} needs {} values and {hw} mask entries, got {} and {}",
                3 * hw,
                values.len(),
                mask.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            mask,
        })
    }

    /// Every pixel valid and equal to `n`.
    pub fn constant(width: usize, height: usize, n: [f32; 3]) -> Self {
        let hw = width * height;
        let mut values = vec![0.0; 3 * hw];
        for (c, &v) in n.iter().enumerate() {
            values[c * hw..(c + 1) * hw].fill(v);
        }
        Self {
            width,
            height,
            values,
            mask: vec![true; hw],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.at(y * self.width + x)
    }

    /// Normal at flat pixel index `p`.
    pub fn at(&self, p: usize) -> [f32; 3] {
        let hw = self.pixels();
        [self.values[p], self.values[hw + p], self.values[2 * hw + p]]
    }

    pub fn set(&mut self, p: usize, n: [f32; 3]) {
        let hw = self.pixels();
        self.values[p] = n[0];
        self.values[hw + p] = n[1];
        self.values[2 * hw + p] = n[2];
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Single-channel `H x W` image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }
}
