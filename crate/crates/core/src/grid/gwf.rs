//! GWF: one UTF-8 JSON header line, then `T*H*W*C` little-endian `f32`
//! values in `[t][h][w][c]` order.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GridField, GridSeries, GridSpec};
use crate::error::{Error, Result};

pub const GWF_MAGIC: &str = "GWF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GwfHeader {
    pub magic: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub step_hours: f64,
    pub channel_names: Vec<String>,
    pub lat_deg: Vec<f64>,
    pub lon_deg: Vec<f64>,
    pub dtype: String,
    pub layout: String,
}

impl GwfHeader {
    fn validate(&self) -> Result<()> {
        if self.magic != GWF_MAGIC {
            return Err(Error::Header(format!("magic is {:?}, expected \"GWF1\"", self.magic)));
        }
        if self.dtype != "f32le" {
            return Err(Error::Header(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.layout != "THWC" {
            return Err(Error::Header(format!("unsupported layout {:?}", self.layout)));
        }
        if self.lat_deg.len() != self.h || self.lon_deg.len() != self.w {
            return Err(Error::Header(format!(
                "coordinate lengths ({}, {}) disagree with H={}, W={}",
                self.lat_deg.len(),
                self.lon_deg.len(),
                self.h,
                self.w
            )));
        }
        if self.channel_names.len() != self.c {
            return Err(Error::Header(format!(
                "{} channel names for C={}",
                self.channel_names.len(),
                self.c
            )));
        }
        if self.t == 0 {
            return Err(Error::Header("T must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn write_series(series: &GridSeries) -> Result<Vec<u8>> {
    let spec = series.spec();
    let header = GwfHeader {
        magic: GWF_MAGIC.into(),
        t: series.len(),
        h: spec.h(),
        w: spec.w(),
        c: spec.c(),
        step_hours: series.step_hours(),
        channel_names: spec.channel_names().to_vec(),
        lat_deg: spec.lat_deg().to_vec(),
        lon_deg: spec.lon_deg().to_vec(),
        dtype: "f32le".into(),
        layout: "THWC".into(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(series.len() * spec.frame_len() * 4);
    for frame in series.frames() {
        for &v in frame.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_series(bytes: &[u8]) -> Result<GridSeries> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("missing header terminator".into()))?;
    let text = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Header("header is not UTF-8".into()))?;
    let header: GwfHeader =
        serde_json::from_str(text).map_err(|e| Error::Header(e.to_string()))?;
    header.validate()?;
    let payload = &bytes[nl + 1..];
    let frame_len = header.h * header.w * header.c;
    let expected = header.t * frame_len * 4;
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            found: payload.len(),
        });
    }
    let spec = Arc::new(GridSpec::new(header.lat_deg, header.lon_deg, header.channel_names)?);
    let mut frames = Vec::with_capacity(header.t);
    for (t, chunk) in payload.chunks_exact(frame_len * 4).enumerate() {
        let values: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let field = GridField::new(spec.clone(), values).map_err(|e| match e {
            Error::NonFinite { index } => Error::NonFinite {
                index: t * frame_len + index,
            },
            other => other,
        })?;
        frames.push(field);
    }
    GridSeries::new(spec, frames, header.step_hours)
}

pub fn save_series(path: &Path, series: &GridSeries) -> Result<()> {
    let bytes = write_series(series)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_series(path: &Path) -> Result<GridSeries> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_series(&bytes)
}
