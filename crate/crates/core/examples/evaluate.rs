//! Pose metrics on synthetic ground truth: angular, root-aligned positional and
//! jitter, printed as a table and serialized to CSV.
//!
//! ```bash
//! cargo run --release --example evaluate
//! ```

use gid::garmentnoise::default_profiles;
use gid::kinematics::{SensorLayout, Skeleton};
use gid::metrics::{angular_error, evaluate, jitter, positional_error};
use gid::posenet::{PoseNetConfig, Predictor};
use gid::trainer::{generate, GenConfig};

fn main() -> gid::Result<()> {
    let skel = Skeleton::default_16();
    let layout = SensorLayout::default_for(&skel)?;
    let gen = GenConfig { minutes: 0.25, clip_seconds: 5.0, ..Default::default() };
    let data = generate(&skel, &layout, &default_profiles(), &gen)?;
    let clip = &data.clips[0];
    // A delayed copy of the ground truth stands in for a predictor's output.
    let mut lagged = clip.poses.clone();
    lagged.rotate_right(4);
    println!("angular error of a 100 ms lag: {:.2}°", angular_error(&lagged, &clip.poses, &skel)?);
    println!("positional error of a 100 ms lag: {:.2} cm", positional_error(&lagged, &clip.poses, &skel)?);
    println!("ground-truth jitter: {:.1} m/s³", jitter(&clip.poses, &skel, data.rate_hz)?);

    // An untrained predictor without a denoiser: both report columns coincide.
    let pred = Predictor::new(&PoseNetConfig::default(), 1)?;
    let report = evaluate(&data.features()?, None, &pred, &skel, data.rate_hz)?;
    print!("{}", report.to_table());
    print!("{}", report.to_csv());
    Ok(())
}
