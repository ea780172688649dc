//! Gridded fields, series, min-max normalisation, the GWF container format
//! and a synthetic advection generator.

mod gwf;
mod norm;
mod synthetic;

use std::ops::Range;
use std::sync::Arc;

pub use gwf::{load_series, read_series, save_series, write_series, GwfHeader, GWF_MAGIC};
pub use norm::{fit_norm, NormStats};
pub use synthetic::{make_synthetic, SyntheticConfig};

use crate::error::{Error, Result};

/// Coordinates and channel names shared by every frame of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lat_deg: Vec<f64>,
    lon_deg: Vec<f64>,
    channel_names: Vec<String>,
}

impl GridSpec {
    pub fn new(lat_deg: Vec<f64>, lon_deg: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        if lat_deg.len() < 2 || lon_deg.len() < 2 || channel_names.is_empty() {
            return Err(Error::Coordinates(format!(
                "need H >= 2, W >= 2, C >= 1; got H={}, W={}, C={}",
                lat_deg.len(),
                lon_deg.len(),
                channel_names.len()
            )));
        }
        if lat_deg.iter().any(|&p| !(p > -90.0 && p < 90.0)) {
            return Err(Error::Coordinates("latitudes must lie in (-90, 90)".into()));
        }
        if lon_deg.iter().any(|&l| !(0.0..360.0).contains(&l)) {
            return Err(Error::Coordinates("longitudes must lie in [0, 360)".into()));
        }
        if lat_deg.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Coordinates("latitudes must be strictly increasing".into()));
        }
        if lon_deg.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Coordinates("longitudes must be strictly increasing".into()));
        }
        Ok(Self {
            lat_deg,
            lon_deg,
            channel_names,
        })
    }

    /// Cell-centred equiangular grid: `lat_h = -90 + (h + 0.5) * 180 / H`,
    /// `lon_w = w * 360 / W`.
    pub fn equiangular(h: usize, w: usize, channel_names: Vec<String>) -> Result<Self> {
        let lat = (0..h).map(|i| -90.0 + (i as f64 + 0.5) * 180.0 / h as f64).collect();
        let lon = (0..w).map(|j| j as f64 * 360.0 / w as f64).collect();
        Self::new(lat, lon, channel_names)
    }

    pub fn h(&self) -> usize {
        self.lat_deg.len()
    }

    pub fn w(&self) -> usize {
        self.lon_deg.len()
    }

    pub fn c(&self) -> usize {
        self.channel_names.len()
    }

    pub fn frame_len(&self) -> usize {
        self.h() * self.w() * self.c()
    }

    pub fn lat_deg(&self) -> &[f64] {
        &self.lat_deg
    }

    pub fn lon_deg(&self) -> &[f64] {
        &self.lon_deg
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }
}

/// One time slice, `values[(h * W + w) * C + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    spec: Arc<GridSpec>,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(spec: Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.frame_len() {
            return Err(Error::shape(format!(
                "field needs {} values for {}x{}x{}, got {}",
                spec.frame_len(),
                spec.h(),
                spec.w(),
                spec.c(),
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: Arc<GridSpec>) -> Self {
        let n = spec.frame_len();
        Self {
            spec,
            values: vec![0.0; n],
        }
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, h: usize, w: usize, c: usize) -> f64 {
        self.values[(h * self.spec.w() + w) * self.spec.c() + c]
    }

    pub fn h(&self) -> usize {
        self.spec.h()
    }

    pub fn w(&self) -> usize {
        self.spec.w()
    }

    pub fn c(&self) -> usize {
        self.spec.c()
    }

    /// Values as `f32`, the network's working precision.
    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(spec: Arc<GridSpec>, values: &[f32]) -> Result<Self> {
        Self::new(spec, values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn same_layout(&self, other: &GridField) -> bool {
        Arc::ptr_eq(&self.spec, &other.spec) || *self.spec == *other.spec
    }
}

/// Time-ordered frames on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSeries {
    spec: Arc<GridSpec>,
    frames: Vec<GridField>,
    step_hours: f64,
}

impl GridSeries {
    pub fn new(spec: Arc<GridSpec>, frames: Vec<GridField>, step_hours: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("series has no frames"));
        }
        if !(step_hours > 0.0 && step_hours.is_finite()) {
            return Err(Error::invalid(format!("step_hours must be positive, got {step_hours}")));
        }
        if let Some(i) = frames.iter().position(|f| *f.spec != *spec) {
            return Err(Error::shape(format!("frame {i} does not share the series grid")));
        }
        let frames = frames
            .into_iter()
            .map(|f| GridField {
                spec: spec.clone(),
                values: f.values,
            })
            .collect();
        Ok(Self {
            spec,
            frames,
            step_hours,
        })
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn frames(&self) -> &[GridField] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &GridField {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn step_hours(&self) -> f64 {
        self.step_hours
    }

    pub fn slice(&self, range: Range<usize>) -> Result<GridSeries> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::invalid(format!(
                "slice {range:?} out of bounds for {} frames",
                self.len()
            )));
        }
        GridSeries::new(self.spec.clone(), self.frames[range].to_vec(), self.step_hours)
    }
}
