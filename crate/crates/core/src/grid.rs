//! Spatial containers: 2D planes (images, masks) and `H x W x C` feature grids.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// A row-major 2D array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Grayscale intensities.
pub type Image = Plane<f32>;
/// Binary mask with values in `{0, 1}`.
pub type Mask = Plane<u8>;

impl<T: Copy + Default> Plane<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::default(); height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }
}

impl<T: Copy> Plane<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid!(
                "plane data has {} values, expected {}x{}",
                data.len(),
                height,
                width
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rows reversed top to bottom.
    pub fn flip_vertical(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

impl Mask {
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

/// Which encoder or module produced a [`FeatureGrid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Sam,
    Mae,
    Aligned,
    Fused,
    Activated,
}

impl Source {
    pub fn tag(self) -> u8 {
        match self {
            Source::Sam => 0,
            Source::Mae => 1,
            Source::Aligned => 2,
            Source::Fused => 3,
            Source::Activated => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Source::Sam,
            1 => Source::Mae,
            2 => Source::Aligned,
            3 => Source::Fused,
            4 => Source::Activated,
            _ => return None,
        })
    }
}

/// An `H x W x C` grid of finite `f32` features, channel-last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    source: Source,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        source: Source,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid!(
                "feature grid dimensions must be positive, got {height}x{width}x{channels}"
            ));
        }
        if data.len() != height * width * channels {
            return Err(invalid!(
                "feature grid has {} values, expected {}",
                data.len(),
                height * width * channels
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite feature at flat index {i}"));
        }
        Ok(Self {
            height,
            width,
            channels,
            source,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, source: Source) -> Self {
        Self {
            height,
            width,
            channels,
            source,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn vector(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn vector_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// `(H*W) x C` view in `f64` for the differentiable stack.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.height * self.width,
            self.channels,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor, height: usize, width: usize, source: Source) -> Result<Self> {
        if t.rows() != height * width {
            return Err(invalid!(
                "tensor has {} rows, expected {}x{}",
                t.rows(),
                height,
                width
            ));
        }
        Self::new(
            height,
            width,
            t.cols(),
            source,
            t.data().iter().map(|&v| v as f32).collect(),
        )
    }
}
