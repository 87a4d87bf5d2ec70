//! Command-line front end. Exit codes: 0 success, 1 validation or runtime failure
//! (one `error: kind=... msg=...` line on stderr), 2 usage errors and missing paths.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::error::{GidError, Result};
use crate::garmentnoise::{default_profiles, NoiseProfiles};
use crate::gidnet::{Gid, GID_MAGIC};
use crate::kinematics::{denormalize_root_relative, normalize_root_relative, SensorLayout, Skeleton};
use crate::metrics::{evaluate, rows_to_csv};
use crate::numerics::gradcheck::{kernel_suite, network_suite, GradCheckReport};
use crate::posenet::{Predictor, POSE_MAGIC};
use crate::trainer::{
    generate, train_direct, train_gid, train_predictor, EpochLog, GenConfig, PoseExample, Provenance, RunConfig,
    TrainLog, Variant,
};

use super::ablation::{ablation_rows, train_all, train_val_features};
use super::calibration::{calibrate_tpose, Calibration};
use super::data::{load_dataset, save_dataset};
use super::files::{ImuSequenceFile, PoseSequenceFile};
use super::stream::{max_deviation, offline_reference, stream_replay, StreamConfig};

/// Keyword accepted in place of a denoiser checkpoint to skip denoising.
pub const PASSTHROUGH: &str = "passthrough";
/// Fraction of clips `ablate` holds out as its test split when no `--test` is given.
pub const ABLATE_HOLDOUT: f64 = 0.2;

#[derive(Parser, Debug)]
#[command(name = "gid", version, about = "Denoise loose-wear IMU streams and estimate body pose")]
pub struct Cli {
    /// Seed for data synthesis and training (overrides config files)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel evaluation
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Training precision
    #[arg(long, global = true, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config (`train.*`, `gid.*`, `pose.*` keys)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write; the epoch log goes next to it
    #[arg(long)]
    pub out: PathBuf,
    /// Override train.max_epochs
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize paired tight/loose IMU data with ground-truth poses
    GenData {
        #[arg(long, default_value_t = 10.0)]
        minutes: f64,
        /// Noise profile file; defaults to the built-in garment profiles
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        clip_seconds: f64,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
    },
    /// Train a denoiser on loose → tight pairs
    TrainGid {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long, default_value = "full", value_parser = ["full", "no_lsd", "no_acf"])]
        variant: String,
    },
    /// Train the pose predictor on tight data
    TrainPose {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Train a predictor directly on loose data (no denoiser)
    TrainDirect {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Evaluate pose metrics with and without the denoiser
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Denoiser checkpoint or `passthrough`
        #[arg(long)]
        gid: String,
        #[arg(long)]
        pose: PathBuf,
        /// CSV report; a JSON copy is written alongside
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate the full/no_lsd/no_acf/no_fps matrix
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset; defaults to the last clips of --data
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Denoise a loose IMU file
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        gid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skeleton file; defaults to the built-in 16-joint skeleton
        #[arg(long)]
        skeleton: Option<PathBuf>,
    },
    /// Replay an IMU file through the causal pipeline in real time
    Stream {
        #[arg(long = "in")]
        input: PathBuf,
        /// Denoiser checkpoint or `passthrough`
        #[arg(long)]
        gid: String,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long, default_value_t = 40.0)]
        rate: f64,
        /// Replay as fast as possible instead of at the sensor rate
        #[arg(long)]
        unpaced: bool,
        /// Still T-pose capture used to calibrate the stream first
        #[arg(long)]
        tpose: Option<PathBuf>,
        /// Pose file for the streamed output
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        skeleton: Option<PathBuf>,
    },
    /// Finite-difference check of every kernel and both networks
    GradCheck,
}

enum Failure {
    Usage(String),
    Run(GidError),
}

impl From<GidError> for Failure {
    fn from(e: GidError) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}

fn existing(p: &Path) -> CliResult<&Path> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Failure::Usage(format!("no such path: {}", p.display())))
    }
}

fn run_config(cli: &Cli, file: Option<&Path>, epochs: Option<usize>) -> CliResult<RunConfig> {
    let mut c = match file {
        Some(p) => RunConfig::parse(&fs::read_to_string(existing(p)?)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.train.seed = s;
    }
    if let Some(p) = &cli.precision {
        c.train.precision = p.parse().map_err(|_| Failure::Usage(format!("bad precision {p}")))?;
    }
    if let Some(e) = epochs {
        c.train.max_epochs = e;
    }
    c.train.validate()?;
    Ok(c)
}

fn load_gid(spec: &str) -> CliResult<Option<Gid>> {
    if spec == PASSTHROUGH {
        return Ok(None);
    }
    let p = existing(Path::new(spec))?;
    Ok(Some(Gid::from_checkpoint(&Checkpoint::load(p, GID_MAGIC)?)?))
}

fn load_predictor(p: &Path) -> CliResult<Predictor> {
    Ok(Predictor::from_checkpoint(&Checkpoint::load(existing(p)?, POSE_MAGIC)?)?)
}

fn load_skeleton(p: Option<&Path>) -> CliResult<Skeleton> {
    Ok(match p {
        Some(p) => Skeleton::load(existing(p)?)?,
        None => Skeleton::default_16(),
    })
}

fn progress(tag: &str) -> impl FnMut(&EpochLog) + '_ {
    move |e: &EpochLog| {
        eprintln!(
            "[{tag}] epoch {} train {:.5} val {:.5} lr {:.2e} {:.1}s",
            e.epoch, e.train_loss, e.val_loss, e.lr, e.wallclock_s
        )
    }
}

fn save_log(out: &Path, log: &TrainLog, train_col: &str, val_col: &str) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".train.csv");
    fs::write(PathBuf::from(name), log.to_csv(train_col, val_col))?;
    Ok(())
}

fn metadata(cmd: &str, run: &RunConfig, log: &TrainLog) -> String {
    format!(
        "command={cmd}\nseed={}\nbest_epoch={}\nbest_val={}\n",
        run.train.seed, log.best_epoch, log.best_val
    )
}

fn execute(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot set {n} threads: {e}")))?;
    }
    match &cli.command {
        Command::GenData {
            minutes,
            profile,
            out,
            clip_seconds,
            amplitude,
        } => {
            let profiles = match profile {
                Some(p) => NoiseProfiles::load(existing(p)?)?,
                None => default_profiles(),
            };
            let skel = Skeleton::default_16();
            let layout = SensorLayout::default_for(&skel)?;
            let gen = GenConfig {
                seed: cli.seed.unwrap_or(GenConfig::default().seed),
                minutes: *minutes,
                clip_seconds: *clip_seconds,
                amplitude_scale: *amplitude,
                ..GenConfig::default()
            };
            let data = generate(&skel, &layout, &profiles, &gen)?;
            save_dataset(out, &data, &gen, &profiles)?;
            println!("wrote {} clips ({} frames) to {}", data.clips.len(), data.frames(), out.display());
        }
        Command::TrainGid { args, variant } => {
            let run = run_config(cli, args.config.as_deref(), args.epochs)?;
            let data = load_dataset(existing(&args.data)?)?;
            let v: Variant = variant.parse()?;
            let (tr, va) = train_val_features(&data)?;
            let mut cb = progress(v.tag());
            let (gid, log) = train_gid(&run.gid, v, &tr, &va, &run.train, Some(&mut cb))?;
            let meta = format!("{}variant={}\n", metadata("train-gid", &run, &log), v.tag());
            gid.to_checkpoint(&meta).save(&args.out)?;
            save_log(&args.out, &log, "train_mae", "val_mae")?;
            println!("best epoch {} val_mae {:.5} -> {}", log.best_epoch, log.best_val, args.out.display());
        }
        Command::TrainPose { args } | Command::TrainDirect { args } => {
            let direct = matches!(cli.command, Command::TrainDirect { .. });
            let run = run_config(cli, args.config.as_deref(), args.epochs)?;
            let data = load_dataset(existing(&args.data)?)?;
            let (tr, va) = train_val_features(&data)?;
            let pick = if direct { PoseExample::loose } else { PoseExample::tight };
            let tr: Vec<PoseExample> = tr.iter().map(pick).collect();
            let va: Vec<PoseExample> = va.iter().map(pick).collect();
            let (cmd, tag) = if direct {
                ("train-direct", "no_fps")
            } else {
                ("train-pose", "predictor")
            };
            let mut cb = progress(tag);
            let (pred, log) = if direct {
                train_direct(&run.pose, &tr, &va, &data.skeleton, &run.train, Some(&mut cb))?
            } else {
                train_predictor(&run.pose, &tr, &va, &data.skeleton, &run.train, Some(&mut cb))?
            };
            pred.to_checkpoint(&metadata(cmd, &run, &log)).save(&args.out)?;
            save_log(&args.out, &log, "train_loss", "val_loss")?;
            println!("best epoch {} val_loss {:.5} -> {}", log.best_epoch, log.best_val, args.out.display());
        }
        Command::Eval {
            data,
            gid,
            pose,
            report,
        } => {
            let data = load_dataset(existing(data)?)?;
            let gid = load_gid(gid)?;
            let pred = load_predictor(pose)?;
            let rep = evaluate(&data.features()?, gid.as_ref(), &pred, &data.skeleton, data.rate_hz)?;
            fs::write(report, rep.to_csv())?;
            fs::write(report.with_extension("json"), rep.to_json())?;
            print!("{}", rep.to_table());
        }
        Command::Ablate {
            data,
            test,
            config,
            out,
            epochs,
        } => {
            let run = run_config(cli, config.as_deref(), *epochs)?;
            let all = load_dataset(existing(data)?)?;
            let (train, test) = match test {
                Some(t) => (all, load_dataset(existing(t)?)?),
                None => all.split_validation(ABLATE_HOLDOUT)?,
            };
            crate::trainer::Split::new(&train, &test)?;
            fs::create_dir_all(out)?;
            let mut cb = |tag: &str, e: &EpochLog| progress(tag)(e);
            let models = train_all(&train, &run, Some(&mut cb))?;
            for (v, g) in &models.gids {
                g.to_checkpoint(&format!("command=ablate\nvariant={}\n", v.tag()))
                    .save(&out.join(format!("{}.gid", v.tag())))?;
            }
            models.predictor.to_checkpoint("command=ablate\n").save(&out.join("predictor.pose"))?;
            models.direct.to_checkpoint("command=ablate\nvariant=no_fps\n").save(&out.join("no_fps.pose"))?;
            for (tag, log) in &models.logs {
                fs::write(out.join(format!("{tag}.train.csv")), log.to_csv("train_loss", "val_loss"))?;
            }
            let rows = ablation_rows(&test.features()?, &models, &train)?;
            let csv = rows_to_csv(&rows);
            fs::write(out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Denoise {
            input,
            gid,
            out,
            skeleton,
        } => {
            let skel = load_skeleton(skeleton.as_deref())?;
            let layout = SensorLayout::default_for(&skel)?;
            let file = ImuSequenceFile::load(existing(input)?)?;
            file.check_layout(&layout)?;
            if file.provenance != Provenance::Loose {
                return Err(GidError::Provenance {
                    expected: Provenance::Loose.to_string(),
                    found: file.provenance.to_string(),
                }
                .into());
            }
            let gid = Gid::from_checkpoint(&Checkpoint::load(existing(gid)?, GID_MAGIC)?)?;
            let x = normalize_root_relative(&file.frames, &layout)?;
            let den = gid.denoise_sequence(&x)?;
            let times: Vec<f64> = file.frames.iter().map(|f| f.t).collect();
            let frames = denormalize_root_relative(&den, &layout, &times)?;
            ImuSequenceFile::new(&layout, file.rate_hz, Provenance::Denoised, frames).save(out)?;
            println!("denoised {} frames -> {}", times.len(), out.display());
        }
        Command::Stream {
            input,
            gid,
            pose,
            rate,
            unpaced,
            tpose,
            out,
            skeleton,
        } => {
            let skel = load_skeleton(skeleton.as_deref())?;
            let layout = SensorLayout::default_for(&skel)?;
            let file = ImuSequenceFile::load(existing(input)?)?;
            file.check_layout(&layout)?;
            let cal = match tpose {
                Some(p) => calibrate_tpose(&ImuSequenceFile::load(existing(p)?)?.frames, &layout, *rate)?,
                None => Calibration::identity(layout.len()),
            };
            let frames = cal.apply(&file.frames)?;
            let gid = load_gid(gid)?;
            let pred = load_predictor(pose)?;
            let cfg = StreamConfig {
                rate_hz: *rate,
                paced: !unpaced,
            };
            let rep = stream_replay(&frames, &layout, gid.as_ref(), &pred, &cfg)?;
            println!("{}", rep.summary());
            if rep.overrun_warning() {
                eprintln!(
                    "warning: {} of {} frames exceeded the {:.1} ms frame period",
                    rep.overruns,
                    rep.frames,
                    1e3 / rate
                );
            }
            if rep.frames > 0 {
                let x = normalize_root_relative(&frames, &layout)?;
                let (den, poses) = offline_reference(&x, gid.as_ref(), &pred, *rate)?;
                println!("max_offline_deviation={:.3e}", max_deviation(&rep, &den, &poses)?);
            }
            if let Some(o) = out {
                PoseSequenceFile::new(skel.len(), *rate, "skeleton.txt", rep.poses).save(o)?;
            }
        }
        Command::GradCheck => {
            let mut reports: Vec<GradCheckReport> = kernel_suite(cli.seed.unwrap_or(1))?;
            reports.extend(network_suite(cli.seed.unwrap_or(1))?);
            let mut failed = 0;
            for r in &reports {
                let ok = r.passed();
                failed += usize::from(!ok);
                println!(
                    "{:<28} probes={:<3} max_rel_err={:.3e} tol={:.0e} {}",
                    r.name,
                    r.probes,
                    r.max_rel_err,
                    r.tolerance,
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(GidError::GradCheck(format!("{failed} of {} checks failed", reports.len())).into());
            }
        }
    }
    Ok(())
}
