//! How loose garments corrupt each sensor: per-site orientation and acceleration
//! error against the tight reference.
//!
//! ```bash
//! cargo run --release --example garment_noise
//! ```

use gid::garmentnoise::{corrupt, default_profiles};
use gid::kinematics::{synth_motion, tight_imu_from_motion, MotionConfig, SensorLayout, Skeleton};
use gid::rotmath::quat_angle_deg;

fn main() -> gid::Result<()> {
    let skel = Skeleton::default_16();
    let layout = SensorLayout::default_for(&skel)?;
    let poses = synth_motion(&skel, 3, &MotionConfig { duration_s: 20.0, ..Default::default() })?;
    let tight = tight_imu_from_motion(&skel, &layout, &poses)?;
    let profiles = default_profiles();
    let loose = corrupt(&tight, &profiles.for_layout(&layout)?, 3)?;
    println!("{:<14} {:>12} {:>14}", "sensor", "orient(deg)", "accel(m/s²)");
    for (k, s) in layout.sensors().iter().enumerate() {
        let n = tight.len() as f64;
        let ang: f64 = tight.iter().zip(&loose).map(|(a, b)| quat_angle_deg(&a.orientation[k], &b.orientation[k])).sum();
        let acc: f64 = tight.iter().zip(&loose).map(|(a, b)| (a.accel[k] - b.accel[k]).norm()).sum();
        println!("{:<14} {:>12.2} {:>14.2}", s.id, ang / n, acc / n);
    }
    Ok(())
}
