//! Binary greyscale (P5) dumps of single field channels.

use std::path::Path;

use codicast::grid::GridField;

use crate::error::{CliError, CliResult};

/// One channel as `P5` bytes with `maxval` 255, rows in storage order. Values
/// map linearly from the channel's own min (0) to max (255); a constant
/// channel is all zeros.
pub fn encode(field: &GridField, channel: usize) -> Vec<u8> {
    let (h, w, c) = (field.h(), field.w(), field.c());
    let vals: Vec<f64> = field.values().iter().skip(channel).step_by(c).copied().collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(vals.iter().map(|v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write(path: &Path, field: &GridField, channel: usize) -> CliResult<()> {
    std::fs::write(path, encode(field, channel))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
