use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use codicast::diffusion::TrainedModel;
use codicast::forecast::Execution;
use codicast::grid::load_series;
use codicast::metrics::climatology;
use codicast_cli::commands::{self, ForecastArgs};
use codicast_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "codicast", version, about = "Conditional diffusion forecasts on gridded fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set schedule.n=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic advection series as GWF.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Frames, rows, columns and channels.
        #[arg(long, value_name = "T,H,W,C", value_delimiter = ',', default_value = "300,8,16,2")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the frame autoencoder.
    PretrainEncoder {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// GWF training series; falls back to the config's data section.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional denoiser against a frozen encoder.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out an ensemble from the last two frames of `--init`.
    Forecast {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        init: PathBuf,
        /// Lead steps; defaults to `forecast.steps` of the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Ensemble size; defaults to `forecast.members` of the config.
        #[arg(long)]
        members: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a forecast against the truth and write the metrics table.
    ///
    /// With `--forecast DIR`, lead k is compared with frame k-1 of
    /// `--truth`. With `--model`, the first two frames of `--truth` are the
    /// initial conditions and the forecast covers the remaining frames.
    Evaluate {
        #[arg(long, conflicts_with = "forecast", required_unless_present = "forecast")]
        model: Option<PathBuf>,
        #[arg(long)]
        forecast: Option<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        /// Reference series whose temporal mean is the climatology;
        /// defaults to the verifying frames themselves.
        #[arg(long)]
        climatology: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        members: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Directory for truth/prediction/difference PGM images.
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MakeSynthetic { out, dims, seed } => {
            let dims: [usize; 4] = dims
                .try_into()
                .map_err(|_| CliError::Config(vec!["--dims takes exactly T,H,W,C".into()]))?;
            println!("{}", commands::make_synthetic(&out, dims, seed)?);
        }
        Command::PretrainEncoder { cfg, data, out } => {
            let cfg = cfg.load()?;
            let series = commands::load_data(&cfg, data.as_deref())?;
            commands::pretrain_encoder(&cfg, &series, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train {
            cfg,
            data,
            encoder,
            out,
        } => {
            let cfg = cfg.load()?;
            let series = commands::load_data(&cfg, data.as_deref())?;
            let model = commands::train_denoiser(&cfg, &series, &encoder, &out)?;
            println!(
                "wrote {} (final loss {:.6})",
                out.display(),
                model.loss_history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Forecast {
            cfg,
            model,
            init,
            steps,
            members,
            seed,
            out,
        } => {
            let cfg = cfg.load()?;
            let args = ForecastArgs {
                steps: steps.unwrap_or(cfg.forecast.steps),
                members: members.unwrap_or(cfg.forecast.members),
                seed,
                exec: Execution::from_env()?,
            };
            let m = commands::forecast_to_dir(&model, &init, &args, &out)?;
            println!("wrote {} members x {} steps to {}", m.members, m.steps, out.display());
        }
        Command::Evaluate {
            model,
            forecast,
            truth,
            climatology: clim_path,
            members,
            seed,
            out,
            pgm_dir,
        } => {
            let truth = load_series(&truth)?;
            let (ens, verifying) = match (model, forecast) {
                (Some(m), _) => {
                    let model = TrainedModel::load(&m)?;
                    if truth.len() < 3 {
                        return Err(CliError::Data(format!(
                            "--truth needs 2 initial frames plus at least one target, got {}",
                            truth.len()
                        )));
                    }
                    let init = truth.slice(0..2)?;
                    let args = ForecastArgs {
                        steps: truth.len() - 2,
                        members,
                        seed,
                        exec: Execution::from_env()?,
                    };
                    (commands::forecast(&model, &init, &args)?, truth.frames()[2..].to_vec())
                }
                (None, Some(dir)) => (commands::read_forecast_dir(&dir)?, truth.frames().to_vec()),
                (None, None) => unreachable!("clap enforces one of --model/--forecast"),
            };
            let clim = match clim_path {
                Some(p) => Some(climatology(load_series(&p)?.frames())?),
                None => None,
            };
            let rows = commands::evaluate(&ens, &verifying, clim.as_ref())?;
            commands::write_metrics(&out, &rows)?;
            if let Some(dir) = pgm_dir {
                commands::dump_fields(&dir, &ens, &verifying)?;
            }
            println!("wrote {} ({} rows)", out.display(), rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
