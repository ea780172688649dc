//! Latitude-weighted RMSE and anomaly correlation, climatology and simple
//! reference forecasts.
//!
//! Trajectories are slices of frames with identical layout; index `m` in
//! the formulas runs over frames. All metrics are reported per channel.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::{GridField, GridSeries};

/// `L(h) = cos(lat_h) / mean_h' cos(lat_h')`, so the weights average to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LatWeights {
    pub lat_deg: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn lat_weights(lat_deg: &[f64]) -> Result<LatWeights> {
    if lat_deg.is_empty() {
        return Err(Error::Coordinates("no latitudes".into()));
    }
    if let Some(p) = lat_deg.iter().find(|p| !(p.abs() < 90.0)) {
        return Err(Error::Coordinates(format!("latitude {p} outside (-90, 90)")));
    }
    let cos: Vec<f64> = lat_deg.iter().map(|p| p.to_radians().cos()).collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    Ok(LatWeights {
        lat_deg: lat_deg.to_vec(),
        weights: cos.iter().map(|c| c / mean).collect(),
    })
}

impl LatWeights {
    pub fn uniform(h: usize) -> Self {
        Self {
            lat_deg: vec![0.0; h],
            weights: vec![1.0; h],
        }
    }

    pub fn for_field(f: &GridField) -> Result<Self> {
        lat_weights(f.spec().lat_deg())
    }
}

fn check_pair(pred: &[GridField], truth: &[GridField], w: &LatWeights) -> Result<(usize, usize, usize)> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predicted frames vs {} true frames",
            pred.len(),
            truth.len()
        )));
    }
    let (h, wd, c) = (truth[0].h(), truth[0].w(), truth[0].c());
    for f in pred.iter().chain(truth) {
        if (f.h(), f.w(), f.c()) != (h, wd, c) {
            return Err(Error::shape("frames differ in dimensions"));
        }
    }
    if w.weights.len() != h {
        return Err(Error::shape(format!("{} weights for {h} latitude rows", w.weights.len())));
    }
    Ok((h, wd, c))
}

/// Mean over frames of `sqrt(mean_{h,w} L(h) (pred - truth)^2)`, per
/// channel.
pub fn rmse_weighted(pred: &[GridField], truth: &[GridField], w: &LatWeights) -> Result<Vec<f64>> {
    let (h, wd, c) = check_pair(pred, truth, w)?;
    let mut out = vec![0.0; c];
    for (p, t) in pred.iter().zip(truth) {
        let mut sq = vec![0.0; c];
        for y in 0..h {
            let l = w.weights[y];
            for x in 0..wd {
                let base = (y * wd + x) * c;
                for ch in 0..c {
                    let d = p.values()[base + ch] - t.values()[base + ch];
                    sq[ch] += l * d * d;
                }
            }
        }
        for ch in 0..c {
            out[ch] += (sq[ch] / (h * wd) as f64).sqrt();
        }
    }
    Ok(out.into_iter().map(|v| v / pred.len() as f64).collect())
}

/// Temporal mean of a reference trajectory at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub mean: GridField,
}

pub fn climatology(reference: &[GridField]) -> Result<Climatology> {
    let first = reference
        .first()
        .ok_or_else(|| Error::invalid("climatology of an empty reference"))?;
    let mut acc = vec![0.0; first.values().len()];
    for f in reference {
        if !f.same_layout(first) {
            return Err(Error::shape("reference frames differ in layout"));
        }
        for (a, v) in acc.iter_mut().zip(f.values()) {
            *a += v;
        }
    }
    let n = reference.len() as f64;
    let mean = GridField::new(first.spec().clone(), acc.into_iter().map(|a| a / n).collect())?;
    Ok(Climatology { mean })
}

/// Anomaly correlation over the joint `(m, h, w)` sum, per channel.
/// A channel with zero anomaly energy in either argument is an error.
pub fn acc(pred: &[GridField], truth: &[GridField], clim: &Climatology, w: &LatWeights) -> Result<Vec<f64>> {
    let (h, wd, c) = check_pair(pred, truth, w)?;
    let cm = clim.mean.values();
    if (clim.mean.h(), clim.mean.w(), clim.mean.c()) != (h, wd, c) {
        return Err(Error::shape("climatology dimensions differ from the forecast"));
    }
    let mut cross = vec![0.0; c];
    let mut pp = vec![0.0; c];
    let mut tt = vec![0.0; c];
    for (p, t) in pred.iter().zip(truth) {
        for y in 0..h {
            let l = w.weights[y];
            for x in 0..wd {
                let base = (y * wd + x) * c;
                for ch in 0..c {
                    let i = base + ch;
                    let (a, b) = (p.values()[i] - cm[i], t.values()[i] - cm[i]);
                    cross[ch] += l * a * b;
                    pp[ch] += l * a * a;
                    tt[ch] += l * b * b;
                }
            }
        }
    }
    (0..c)
        .map(|ch| {
            let denom = (pp[ch] * tt[ch]).sqrt();
            if denom == 0.0 || !denom.is_finite() {
                Err(Error::UndefinedAcc)
            } else {
                Ok((cross[ch] / denom).clamp(-1.0, 1.0))
            }
        })
        .collect()
}

/// The last observed frame repeated `t` times.
pub fn persistence_baseline(series: &GridSeries, t: usize) -> Vec<GridField> {
    let last = series.frame(series.len() - 1);
    vec![last.clone(); t]
}

pub fn climatology_baseline(clim: &Climatology, t: usize) -> Vec<GridField> {
    vec![clim.mean.clone(); t]
}

/// One line of the evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub channel: String,
    pub lead_hours: f64,
    pub rmse: f64,
    /// `None` when the anomaly correlation is undefined.
    pub acc: Option<f64>,
    pub ensemble_spread: f64,
    pub coverage_1sigma: f64,
    pub coverage_2sigma: f64,
}

pub const CSV_HEADER: &str = "channel,lead_hours,rmse,acc,ensemble_spread,coverage_1sigma,coverage_2sigma";

pub fn write_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        let acc = r.acc.map_or_else(|| "nan".to_string(), |a| a.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.channel, r.lead_hours, r.rmse, acc, r.ensemble_spread, r.coverage_1sigma, r.coverage_2sigma
        )?;
    }
    Ok(())
}
