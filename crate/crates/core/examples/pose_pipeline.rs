//! Denoise-then-predict: a predictor trained on tight data only is applied to
//! loose data, with and without the denoiser in front.
//!
//! ```bash
//! cargo run --release --example pose_pipeline
//! ```

use gid::garmentnoise::default_profiles;
use gid::gidnet::GidConfig;
use gid::kinematics::{SensorLayout, Skeleton};
use gid::metrics::angular_error;
use gid::posenet::{pipeline_predict, PoseNetConfig};
use gid::trainer::{generate, train_gid, train_predictor, GenConfig, PoseExample, TrainConfig, Variant};

fn main() -> gid::Result<()> {
    let skel = Skeleton::default_16();
    let layout = SensorLayout::default_for(&skel)?;
    let gen = GenConfig { minutes: 1.0, clip_seconds: 10.0, ..Default::default() };
    let (train, val) = generate(&skel, &layout, &default_profiles(), &gen)?.split_validation(0.2)?;
    let (tr, va) = (train.features()?, val.features()?);
    let run = TrainConfig { max_epochs: 6, ..Default::default() };
    let gcfg = GidConfig { window: 32, model_dim: 32, ffn_hidden: 64, expert_hidden: 64, refine_dim: 16, ..Default::default() };
    let (gid, _) = train_gid(&gcfg, Variant::Full, &tr, &va, &run, None)?;
    let pcfg = PoseNetConfig { window: 32, model_dim: 32, ffn_hidden: 64, ..Default::default() };
    let tight_tr: Vec<PoseExample> = tr.iter().map(PoseExample::tight).collect();
    let tight_va: Vec<PoseExample> = va.iter().map(PoseExample::tight).collect();
    let (pred, _) = train_predictor(&pcfg, &tight_tr, &tight_va, &skel, &run, None)?;

    let test = generate(&skel, &layout, &default_profiles(), &GenConfig { seed: 77, minutes: 0.25, ..gen })?;
    for c in test.features()? {
        let with = pipeline_predict(&c.loose.seq, Some(&gid), &pred, test.rate_hz)?;
        let without = pipeline_predict(&c.loose.seq, None, &pred, test.rate_hz)?;
        println!(
            "{}: angular error {:.2}° with denoiser, {:.2}° without",
            c.name,
            angular_error(&with, &c.poses, &skel)?,
            angular_error(&without, &c.poses, &skel)?
        );
    }
    Ok(())
}
