//! Procedural motion on the 16-joint skeleton and the ideal (tight) IMU readings
//! it produces.
//!
//! ```bash
//! cargo run --release --example synth_motion
//! ```

use gid::kinematics::{forward_kinematics, synth_motion, tight_imu_from_motion, MotionConfig, SensorLayout, Skeleton};

fn main() -> gid::Result<()> {
    let skel = Skeleton::default_16();
    let layout = SensorLayout::default_for(&skel)?;
    let poses = synth_motion(&skel, 42, &MotionConfig { duration_s: 5.0, ..Default::default() })?;
    let imu = tight_imu_from_motion(&skel, &layout, &poses)?;
    println!("{} frames, {} joints, {} sensors", poses.len(), skel.len(), layout.len());
    for i in [0, poses.len() / 2, poses.len() - 1] {
        let (_, pos) = forward_kinematics(&skel, &poses[i]);
        let head = skel.index_of("head").unwrap_or(0);
        println!(
            "t={:.3}s head at {:.3?}, {} accel {:.2?}",
            poses[i].t,
            pos[head].as_slice(),
            layout.sensors()[0].id,
            imu[i].accel[0].as_slice()
        );
    }
    Ok(())
}
