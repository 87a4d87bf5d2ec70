//! Trains a small denoiser on a minute of synthetic data and compares the
//! feature-space error before and after on held-out clips.
//!
//! ```bash
//! cargo run --release --example train_denoiser
//! ```

use gid::garmentnoise::default_profiles;
use gid::gidnet::GidConfig;
use gid::kinematics::{SensorLayout, Skeleton};
use gid::metrics::imu_mae;
use gid::trainer::{generate, train_gid, EpochLog, GenConfig, TrainConfig, Variant};

fn main() -> gid::Result<()> {
    let skel = Skeleton::default_16();
    let layout = SensorLayout::default_for(&skel)?;
    let gen = GenConfig { minutes: 1.0, clip_seconds: 10.0, ..Default::default() };
    let (train, val) = generate(&skel, &layout, &default_profiles(), &gen)?.split_validation(0.2)?;
    let test = generate(&skel, &layout, &default_profiles(), &GenConfig { seed: 99, minutes: 0.5, ..gen })?;
    let cfg = GidConfig { window: 32, model_dim: 32, ffn_hidden: 64, expert_hidden: 64, refine_dim: 16, ..Default::default() };
    let run = TrainConfig { max_epochs: 8, ..Default::default() };
    let mut show = |e: &EpochLog| println!("epoch {:>2} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss);
    let (gid, log) = train_gid(&cfg, Variant::Full, &train.features()?, &val.features()?, &run, Some(&mut show))?;
    println!("kept epoch {}", log.best_epoch);
    let (mut raw, mut den) = (0.0, 0.0);
    let clips = test.features()?;
    for c in &clips {
        raw += imu_mae(&c.loose.seq, &c.tight.seq)?;
        den += imu_mae(&gid.denoise_sequence(&c.loose.seq)?, &c.tight.seq)?;
    }
    let n = clips.len() as f64;
    println!("held-out imu_mae: loose {:.4}, denoised {:.4}", raw / n, den / n);
    Ok(())
}
