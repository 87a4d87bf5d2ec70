//! The full / no_lsd / no_acf / no_fps matrix at toy scale. Use the `ablate`
//! subcommand of the `gid` binary for real runs.
//!
//! ```bash
//! cargo run --release --example ablation
//! ```

use gid::garmentnoise::default_profiles;
use gid::gidnet::GidConfig;
use gid::kinematics::{SensorLayout, Skeleton};
use gid::metrics::rows_to_csv;
use gid::pipeline::{ablation_rows, train_all};
use gid::posenet::PoseNetConfig;
use gid::trainer::{generate, EpochLog, GenConfig, RunConfig, TrainConfig};

fn main() -> gid::Result<()> {
    let skel = Skeleton::default_16();
    let layout = SensorLayout::default_for(&skel)?;
    let gen = GenConfig { minutes: 1.0, clip_seconds: 10.0, ..Default::default() };
    let train = generate(&skel, &layout, &default_profiles(), &gen)?;
    let test = generate(&skel, &layout, &default_profiles(), &GenConfig { seed: 1001, minutes: 0.5, ..gen })?;
    let run = RunConfig {
        train: TrainConfig { max_epochs: 4, ..Default::default() },
        gid: GidConfig { window: 32, model_dim: 32, ffn_hidden: 64, expert_hidden: 64, refine_dim: 16, ..Default::default() },
        pose: PoseNetConfig { window: 32, model_dim: 32, ffn_hidden: 64, ..Default::default() },
    };
    let mut show = |tag: &str, e: &EpochLog| println!("[{tag}] epoch {} val {:.4}", e.epoch, e.val_loss);
    let models = train_all(&train, &run, Some(&mut show))?;
    print!("{}", rows_to_csv(&ablation_rows(&test.features()?, &models, &train)?));
    Ok(())
}
