//! Frame-by-frame replay at 40 Hz with a producer thread, compared against the
//! batched causal computation.
//!
//! ```bash
//! cargo run --release --example streaming
//! ```

use gid::garmentnoise::{corrupt, default_profiles};
use gid::gidnet::{Gid, GidConfig};
use gid::kinematics::{normalize_root_relative, synth_motion, tight_imu_from_motion, MotionConfig, SensorLayout, Skeleton};
use gid::pipeline::stream::max_deviation;
use gid::pipeline::{offline_reference, stream_replay, StreamConfig};
use gid::posenet::{PoseNetConfig, Predictor};

// Per-frame inference churns through MB-sized buffers; keep them mapped.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> gid::Result<()> {
    let skel = Skeleton::default_16();
    let layout = SensorLayout::default_for(&skel)?;
    let poses = synth_motion(&skel, 4, &MotionConfig { duration_s: 5.0, ..Default::default() })?;
    let tight = tight_imu_from_motion(&skel, &layout, &poses)?;
    let loose = corrupt(&tight, &default_profiles().for_layout(&layout)?, 4)?;
    let gid = Gid::new(&GidConfig::default(), 1)?;
    let pred = Predictor::new(&PoseNetConfig::default(), 1)?;
    let cfg = StreamConfig { rate_hz: 40.0, paced: true };
    let report = stream_replay(&loose, &layout, Some(&gid), &pred, &cfg)?;
    println!("{}", report.summary());
    let x = normalize_root_relative(&loose, &layout)?;
    let (den, ref_poses) = offline_reference(&x, Some(&gid), &pred, 40.0)?;
    println!("max deviation from offline: {:.2e}", max_deviation(&report, &den, &ref_poses)?);
    Ok(())
}
