//! Dense tensors and the forward kernels every stage of the pipeline is built from.
//!
//! Everything is `f64`, row-major, channel-outermost. There is no autodiff.

mod ops;
mod params;

pub use ops::{
    channel_max, conv2d, l2norm_channels, relu, sigmoid, sigmoid_scalar, softmax_over_stack,
    upsample2x, Conv2dLayer,
};
pub use params::{ParamSet, Tensor, BN_EPS, DEFAULT_L2NORM_SCALE};

use crate::error::{Error, Result};

/// A `(channels, height, width)` grid of reals.
///
/// Carries BEV inputs, encoder features, hidden states and collaborative maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "grid dims must be >= 1");
        FeatureGrid { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!("grid dims must be >= 1, got {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("grid contains non-finite values"));
        }
        Ok(FeatureGrid { channels, height, width, data })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut grid = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    grid.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        grid
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel vector at one cell.
    pub fn cell(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn same_dims(&self, other: &FeatureGrid) -> bool {
        self.dims() == other.dims()
    }

    pub fn same_spatial(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_same_dims(&self, other: &FeatureGrid, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: {:?} vs {:?}", self.dims(), other.dims())))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureGrid {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped grids.
    pub fn zip_map(&self, other: &FeatureGrid, f: impl Fn(f64, f64) -> f64) -> Result<FeatureGrid> {
        self.check_same_dims(other, "zip_map")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(self.with_data(data))
    }

    /// Multiplies every channel by a single-channel map of the same spatial size.
    pub fn broadcast_mul(&self, map: &FeatureGrid) -> Result<FeatureGrid> {
        if map.channels != 1 || !self.same_spatial(map) {
            return Err(Error::shape(format!(
                "broadcast_mul needs a 1x{}x{} map, got {:?}",
                self.height,
                self.width,
                map.dims()
            )));
        }
        let n = self.plane_len();
        let mut out = self.clone();
        for plane in out.data.chunks_mut(n) {
            for (v, &m) in plane.iter_mut().zip(&map.data) {
                *v *= m;
            }
        }
        Ok(out)
    }

    /// Stacks grids along the channel axis.
    pub fn concat_channels(grids: &[&FeatureGrid]) -> Result<FeatureGrid> {
        let first = grids.first().ok_or_else(|| Error::shape("concat of zero grids"))?;
        if let Some(bad) = grids.iter().find(|g| !g.same_spatial(first)) {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                first.dims(),
                bad.dims()
            )));
        }
        let channels = grids.iter().map(|g| g.channels).sum();
        let mut data = Vec::with_capacity(channels * first.plane_len());
        for g in grids {
            data.extend_from_slice(&g.data);
        }
        Ok(FeatureGrid { channels, height: first.height, width: first.width, data })
    }

    pub fn max_abs_diff(&self, other: &FeatureGrid) -> f64 {
        assert!(self.same_dims(other));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn with_data(&self, data: Vec<f64>) -> FeatureGrid {
        debug_assert_eq!(data.len(), self.data.len());
        FeatureGrid { channels: self.channels, height: self.height, width: self.width, data }
    }
}
