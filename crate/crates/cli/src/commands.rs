//! The work behind each subcommand, callable without going through argument
//! parsing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use codicast::diffusion::{train, TrainedModel};
use codicast::encoder::{pretrain_autoencoder, Autoencoder};
use codicast::forecast::{ensemble_forecast, Execution, ForecastEnsemble, Manifest};
use codicast::grid::{fit_norm, load_series, GridField, GridSeries, SyntheticConfig};
use codicast::metrics::{acc, climatology, rmse_weighted, write_csv, Climatology, LatWeights, MetricsRow};
use codicast::seed::fnv1a;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pgm;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// `<path>.loss.csv`, next to a checkpoint.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn loss_csv(initial: Option<f64>, losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    if let Some(v) = initial {
        let _ = writeln!(out, "0,{v}");
    }
    for (i, v) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{v}", i + 1);
    }
    out
}

/// Writes a synthetic series and returns its summary line.
pub fn make_synthetic(out: &Path, dims: [usize; 4], seed: u64) -> CliResult<String> {
    let [t, h, w, c] = dims;
    let series = SyntheticConfig::new(h, w, c, t, seed).generate()?;
    let bytes = codicast::grid::write_series(&series)?;
    write(out, &bytes)?;
    Ok(format!(
        "wrote {}: T={t} H={h} W={w} C={c} checksum={:016x}",
        out.display(),
        fnv1a(&bytes)
    ))
}

/// The series named on the command line, else the config's data section.
pub fn load_data(cfg: &RunConfig, data: Option<&Path>) -> CliResult<GridSeries> {
    match data.or(cfg.data.path.as_deref()) {
        Some(p) => Ok(load_series(p)?),
        None => {
            let s = cfg.data.synthetic;
            Ok(SyntheticConfig::new(s.h, s.w, s.c, s.t, s.seed).generate()?)
        }
    }
}

pub fn pretrain_encoder(cfg: &RunConfig, data: &GridSeries, out: &Path) -> CliResult<Autoencoder> {
    let norm = fit_norm(data)?;
    let normed = norm.normalize_series(data)?;
    let frames: Vec<&GridField> = normed.frames().iter().collect();
    let arch = cfg.encoder_arch(data.spec().c())?;
    let (mut model, report) = pretrain_autoencoder(&frames, arch, &cfg.encoder_settings())?;
    model.norm = Some(norm);
    model.channel_names = Some(data.spec().channel_names().to_vec());
    model.save(out)?;
    write(&loss_csv_path(out), loss_csv(Some(report.initial_mse), &report.epoch_loss).as_bytes())?;
    Ok(model)
}

pub fn train_denoiser(cfg: &RunConfig, data: &GridSeries, encoder: &Path, out: &Path) -> CliResult<TrainedModel> {
    let enc = Autoencoder::load(encoder)?;
    let norm = match &enc.norm {
        Some(n) => n.clone(),
        None => fit_norm(data)?,
    };
    if let Some(names) = &enc.channel_names {
        if names.as_slice() != data.spec().channel_names() {
            return Err(codicast::Error::Shape(format!(
                "encoder channels {names:?} differ from data channels {:?}",
                data.spec().channel_names()
            ))
            .into());
        }
    }
    let model = train(&cfg.diffusion(), data, &norm, Arc::new(enc))?;
    model.save(out)?;
    write(&loss_csv_path(out), loss_csv(None, &model.loss_history).as_bytes())?;
    Ok(model)
}

/// The last two frames of `init` are the initial conditions.
pub fn initial_frames(init: &GridSeries) -> CliResult<(&GridField, &GridField)> {
    let n = init.len();
    if n < 2 {
        return Err(CliError::Data(format!(
            "initial conditions need at least 2 frames, the file has {n}"
        )));
    }
    Ok((init.frame(n - 2), init.frame(n - 1)))
}

pub struct ForecastArgs {
    pub steps: usize,
    pub members: usize,
    pub seed: u64,
    pub exec: Execution,
}

pub fn forecast(model: &TrainedModel, init: &GridSeries, args: &ForecastArgs) -> CliResult<ForecastEnsemble> {
    let (prev, curr) = initial_frames(init)?;
    Ok(ensemble_forecast(
        model,
        &model.norm,
        prev,
        curr,
        args.steps,
        args.members,
        args.seed,
        init.step_hours(),
        args.exec,
    )?)
}

pub fn forecast_to_dir(
    model_path: &Path,
    init_path: &Path,
    args: &ForecastArgs,
    out: &Path,
) -> CliResult<Manifest> {
    let model = TrainedModel::load(model_path)?;
    let init = load_series(init_path)?;
    let ens = forecast(&model, &init, args)?;
    Ok(ens.export(out, args.seed)?)
}

/// Members, mean and std read back from a forecast directory.
pub fn read_forecast_dir(dir: &Path) -> CliResult<ForecastEnsemble> {
    let manifest_path = dir.join("manifest.json");
    let text = read(&manifest_path)?;
    let m: Manifest = serde_json::from_slice(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    let members = m
        .member_files
        .iter()
        .map(|f| Ok(load_series(&dir.join(f))?.frames().to_vec()))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(ForecastEnsemble {
        members,
        member_seeds: m.member_seeds,
        lead_hours: m.lead_hours,
    })
}

/// One row per lead time and channel. The climatology defaults to the
/// temporal mean of the true trajectory.
pub fn evaluate(
    ens: &ForecastEnsemble,
    truth: &[GridField],
    clim: Option<&Climatology>,
) -> CliResult<Vec<MetricsRow>> {
    if truth.len() < ens.steps() {
        return Err(CliError::Data(format!(
            "truth has {} frames, the forecast {} lead times",
            truth.len(),
            ens.steps()
        )));
    }
    let truth = &truth[..ens.steps()];
    let own;
    let clim = match clim {
        Some(c) => c,
        None => {
            own = climatology(truth)?;
            &own
        }
    };
    let w = LatWeights::for_field(&truth[0])?;
    let unc = ens.uncertainty()?;
    let c1 = ens.coverage(truth, 1.0)?;
    let c2 = ens.coverage(truth, 2.0)?;
    let names = truth[0].spec().channel_names();
    let mut rows = Vec::new();
    for (k, u) in unc.iter().enumerate() {
        let pred = std::slice::from_ref(&u.mean);
        let t = std::slice::from_ref(&truth[k]);
        let rmse = rmse_weighted(pred, t, &w)?;
        let acc = match acc(pred, t, clim, &w) {
            Ok(v) => v.into_iter().map(Some).collect(),
            Err(codicast::Error::UndefinedAcc) => per_channel_acc(pred, t, clim, &w),
            Err(e) => return Err(e.into()),
        };
        let spread = u.mean_spread();
        for (ch, name) in names.iter().enumerate() {
            rows.push(MetricsRow {
                channel: name.clone(),
                lead_hours: ens.lead_hours[k],
                rmse: rmse[ch],
                acc: acc[ch],
                ensemble_spread: spread[ch],
                coverage_1sigma: c1[k][ch],
                coverage_2sigma: c2[k][ch],
            });
        }
    }
    Ok(rows)
}

/// ACC channel by channel, so one degenerate channel does not hide the
/// others.
fn per_channel_acc(pred: &[GridField], truth: &[GridField], clim: &Climatology, w: &LatWeights) -> Vec<Option<f64>> {
    let c = truth[0].c();
    (0..c)
        .map(|ch| {
            let pick = |f: &GridField| single_channel(f, ch);
            let p: Vec<GridField> = pred.iter().map(pick).collect();
            let t: Vec<GridField> = truth.iter().map(pick).collect();
            let cl = Climatology { mean: pick(&clim.mean) };
            acc(&p, &t, &cl, w).ok().map(|v| v[0])
        })
        .collect()
}

fn single_channel(f: &GridField, ch: usize) -> GridField {
    let spec = f.spec();
    let one = Arc::new(
        codicast::grid::GridSpec::new(
            spec.lat_deg().to_vec(),
            spec.lon_deg().to_vec(),
            vec![spec.channel_names()[ch].clone()],
        )
        .expect("valid spec"),
    );
    let v = f.values().iter().skip(ch).step_by(f.c()).copied().collect();
    GridField::new(one, v).expect("matching length")
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> CliResult<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    write(path, &buf)
}

/// `lead<k>_<channel>_{truth,pred,diff}.pgm` for every lead and channel.
pub fn dump_fields(dir: &Path, ens: &ForecastEnsemble, truth: &[GridField]) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let unc = ens.uncertainty()?;
    let mut written = Vec::new();
    for (k, (u, t)) in unc.iter().zip(truth).enumerate() {
        let diff: Vec<f64> = u.mean.values().iter().zip(t.values()).map(|(p, t)| p - t).collect();
        let diff = GridField::new(t.spec().clone(), diff)?;
        for (ch, name) in t.spec().channel_names().iter().enumerate() {
            for (kind, field) in [("truth", t), ("pred", &u.mean), ("diff", &diff)] {
                let p = dir.join(format!("lead{}_{name}_{kind}.pgm", k + 1));
                pgm::write(&p, field, ch)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
