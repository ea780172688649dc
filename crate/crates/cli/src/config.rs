//! The run configuration: one JSON document whose sections mirror the
//! pipeline stages. Missing keys take their defaults; unknown keys and
//! invalid values are all reported together.

use std::path::{Path, PathBuf};

use codicast::nn::layers::NORM_GROUPS;
use codicast::diffusion::{DenoiserSettings, DiffusionConfig};
use codicast::encoder::AutoencoderArch;
use codicast::schedule::ScheduleParams;
use codicast::train::TrainSettings;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub seed: u64,
}

impl Default for SyntheticDims {
    fn default() -> Self {
        Self {
            t: 300,
            h: 8,
            w: 16,
            c: 2,
            seed: 0,
        }
    }
}

/// A GWF file when `path` is set, otherwise a synthetic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticDims,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_e: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let t = TrainSettings::autoencoder();
        Self {
            d_e: 32,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    /// Lead steps `T`.
    pub steps: usize,
    /// Ensemble size `M`.
    pub members: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            steps: 24,
            members: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub output_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub schedule: ScheduleParams,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserSettings,
    pub train: TrainSettings,
    pub forecast: ForecastConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            schedule: ScheduleParams::default(),
            encoder: EncoderConfig::default(),
            denoiser: DenoiserSettings::default(),
            train: TrainSettings::denoiser(),
            forecast: ForecastConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults when `None`), applies
    /// `key.path=value` overrides, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(vec![format!(
                    "cannot read config {}: {e}",
                    p.display()
                )]))?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Config(vec![format!("{}: invalid JSON: {e}", p.display())])
                })?
            }
            None => Value::Object(Map::new()),
        };
        Self::from_value(doc, overrides)
    }

    pub fn from_json(text: &str, overrides: &[String]) -> CliResult<Self> {
        let doc = serde_json::from_str(text)
            .map_err(|e| CliError::Config(vec![format!("invalid JSON: {e}")]))?;
        Self::from_value(doc, overrides)
    }

    pub fn from_value(mut doc: Value, overrides: &[String]) -> CliResult<Self> {
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(p) = apply_override(&mut doc, o) {
                problems.push(p);
            }
        }
        let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialise");
        merge_checked(&mut merged, &doc, "", &mut problems);
        if !problems.is_empty() {
            return Err(CliError::Config(problems));
        }
        // Deserialise section by section so every mistyped section is named.
        let obj = merged.as_object().expect("object");
        macro_rules! section {
            ($name:literal) => {
                match serde_json::from_value(obj[$name].clone()) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        problems.push(format!("{}: {e}", $name));
                        None
                    }
                }
            };
        }
        let data = section!("data");
        let schedule = section!("schedule");
        let encoder = section!("encoder");
        let denoiser = section!("denoiser");
        let train = section!("train");
        let forecast = section!("forecast");
        let io = section!("io");
        let (
            Some(data),
            Some(schedule),
            Some(encoder),
            Some(denoiser),
            Some(train),
            Some(forecast),
            Some(io),
        ) = (data, schedule, encoder, denoiser, train, forecast, io)
        else {
            return Err(CliError::Config(problems));
        };
        let cfg = RunConfig {
            data,
            schedule,
            encoder,
            denoiser,
            train,
            forecast,
            io,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let mut bad = Vec::new();
        let s = &self.data.synthetic;
        if self.data.path.is_none() && (s.h < 2 || s.w < 2 || s.c < 1 || s.t < 3) {
            bad.push(format!(
                "data.synthetic: need t >= 3, h >= 2, w >= 2, c >= 1, got {}x{}x{}x{}",
                s.t, s.h, s.w, s.c
            ));
        }
        if let Err(e) = self.schedule.build() {
            bad.push(format!("schedule: {}", unwrap_msg(e)));
        }
        if self.encoder.d_e == 0 {
            bad.push("encoder.d_e must be positive".into());
        }
        collect("encoder", self.encoder_settings().validate(), &mut bad);
        if self.denoiser.base_width == 0 || self.denoiser.base_width % NORM_GROUPS != 0 {
            bad.push(format!(
                "denoiser.base_width must be a positive multiple of {NORM_GROUPS}, got {}",
                self.denoiser.base_width
            ));
        }
        if self.denoiser.d == 0 {
            bad.push("denoiser.d must be positive".into());
        }
        collect("train", self.train.validate(), &mut bad);
        if self.forecast.steps == 0 {
            bad.push("forecast.steps must be positive".into());
        }
        if self.forecast.members == 0 {
            bad.push("forecast.members must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }

    /// Autoencoder loop settings: the encoder section plus the decay and
    /// seed of the train section.
    pub fn encoder_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.encoder.epochs,
            batch: self.encoder.batch,
            lr: self.encoder.lr,
            ..self.train
        }
    }

    pub fn encoder_arch(&self, channels: usize) -> codicast::Result<AutoencoderArch> {
        AutoencoderArch::with_latent(channels, self.encoder.d_e)
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            schedule: self.schedule,
            denoiser: self.denoiser,
            train: self.train,
        }
    }
}

fn unwrap_msg(e: codicast::Error) -> String {
    match e {
        codicast::Error::Config(v) => v.join("; "),
        codicast::Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}

fn collect(section: &str, r: codicast::Result<()>, bad: &mut Vec<String>) {
    match r {
        Ok(()) => {}
        Err(codicast::Error::Config(v)) => bad.extend(v.into_iter().map(|m| format!("{section}.{m}"))),
        Err(e) => bad.push(format!("{section}: {e}")),
    }
}

/// Copies `src` over `dst`, recording every key of `src` that `dst` does not
/// have.
fn merge_checked(dst: &mut Value, src: &Value, at: &str, problems: &mut Vec<String>) {
    let (Some(d), Some(s)) = (dst.as_object_mut(), src.as_object()) else {
        problems.push(format!("`{}` must be an object", display(at)));
        return;
    };
    for (k, v) in s {
        let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match d.get_mut(k) {
            None => problems.push(format!("unknown key `{path}`")),
            Some(slot) if slot.is_object() => merge_checked(slot, v, &path, problems),
            Some(slot) => *slot = v.clone(),
        }
    }
}

fn display(at: &str) -> &str {
    if at.is_empty() {
        "<root>"
    } else {
        at
    }
}

/// `a.b.c=value`; the value is parsed as JSON when it can be, otherwise it is
/// taken as a string.
fn apply_override(doc: &mut Value, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        let obj = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Err(format!("override `{spec}` has an empty key"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use codicast::schedule::Mode;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.schedule.n, 1000);
        assert_eq!(c.schedule.mode, Mode::Linear);
        assert_eq!((c.train.epochs, c.train.batch, c.train.lr), (800, 256, 2e-4));
        assert_eq!((c.encoder.epochs, c.encoder.batch, c.encoder.lr), (100, 128, 1e-4));
        assert_eq!((c.train.decay_steps, c.train.decay_rate), (10_000, 0.95));
        assert_eq!(c.forecast.members, 5);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = RunConfig::from_json(
            r#"{"schedule": {"steps": 5}, "bogus": 1, "train": {"epochz": 2, "lr": 1e-3}}"#,
            &[],
        )
        .unwrap_err();
        let CliError::Config(v) = err else { panic!() };
        assert_eq!(v.len(), 3, "{v:?}");
        for key in ["schedule.steps", "bogus", "train.epochz"] {
            assert!(v.iter().any(|m| m.contains(key)), "{key} missing from {v:?}");
        }
    }

    #[test]
    fn every_invalid_value_is_listed() {
        let err = RunConfig::from_json(
            r#"{"train": {"epochs": 0, "batch": 0}, "denoiser": {"base_width": 12}}"#,
            &[],
        )
        .unwrap_err();
        let CliError::Config(v) = err else { panic!() };
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn overrides_win_over_file_values() {
        let c = RunConfig::from_json(
            r#"{"schedule": {"n": 10}}"#,
            &["schedule.n=50".into(), "schedule.mode=quadratic".into()],
        )
        .unwrap();
        assert_eq!(c.schedule.n, 50);
        assert_eq!(c.schedule.mode, Mode::Quadratic);
    }

    #[test]
    fn override_of_unknown_key_is_rejected() {
        assert!(matches!(
            RunConfig::from_json("{}", &["schedule.q=1".into()]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn type_errors_name_the_section() {
        let err = RunConfig::from_json(r#"{"schedule": {"n": "many"}}"#, &[]).unwrap_err();
        let CliError::Config(v) = err else { panic!() };
        assert!(v[0].starts_with("schedule"), "{v:?}");
    }
}
