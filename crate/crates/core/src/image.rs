//! Planar multi-channel image used for inputs, layers, masks and feature maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Planar `channels x height x width` array, stored channel-major.
///
/// Layers and inputs hold values in `[0, 1]`; network activations use the
/// same container without a range constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "buffer of {} values cannot hold {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image by evaluating `f(channel, row, col)` at every sample.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
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

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Single-channel image holding channel `c`.
    pub fn channel(&self, c: usize) -> Self {
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn same_spatial(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two equally shaped images.
    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Self {
        assert!(self.same_shape(other), "zip_map on mismatched shapes");
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::from_usize_lossy(self.data.len())
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn channel_mean(&self, c: usize) -> T {
        let p = self.plane(c);
        p.iter().copied().sum::<T>() / T::from_usize_lossy(p.len().max(1))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Repeats a single-channel image `channels` times.
    pub fn broadcast_channels(&self, channels: usize) -> Self {
        assert_eq!(self.channels, 1);
        let mut data = Vec::with_capacity(channels * self.data.len());
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Image {
            channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Spatial window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width);
        Image::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, y + top, x + left)
        })
    }

    /// Stacks channels of `self` followed by channels of `other`.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert!(self.same_spatial(other));
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Image {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Per-channel mean over all pixels.
    pub fn mean_color(&self) -> Vec<T> {
        (0..self.channels).map(|c| self.channel_mean(c)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Index into `0..n` after mirroring out-of-range coordinates without
/// repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

#[inline]
pub(crate) fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}
