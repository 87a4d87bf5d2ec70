//! T-pose calibration: sensors strapped on with unknown reference frames are
//! brought back into the body frame from three seconds of standing still.
//!
//! ```bash
//! cargo run --release --example calibration
//! ```

use gid::kinematics::{synth_motion, tight_imu_from_motion, MotionConfig, PoseFrame, SensorLayout, Skeleton};
use gid::pipeline::{calibrate_tpose, Calibration};
use gid::rotmath::{quat_angle_deg, AxisAngle, UnitQuaternion};

fn main() -> gid::Result<()> {
    let skel = Skeleton::default_16();
    let layout = SensorLayout::default_for(&skel)?;
    let still: Vec<PoseFrame> = (0..200).map(|i| PoseFrame::rest(skel.len(), i as f64 / 40.0)).collect();
    let motion = synth_motion(&skel, 8, &MotionConfig { duration_s: 4.0, ..Default::default() })?;
    let truth = tight_imu_from_motion(&skel, &layout, &motion)?;

    // Each sensor reports in its own arbitrary frame.
    let skew: Vec<UnitQuaternion> = (0..layout.len())
        .map(|k| AxisAngle::new(0.4, -0.2 * k as f64, 0.7).to_quat())
        .collect();
    let raw = Calibration { offsets: skew, frames: 0, spread_deg: vec![0.0; layout.len()] };
    let tpose = raw.apply(&tight_imu_from_motion(&skel, &layout, &still)?)?;
    let recorded = raw.apply(&truth)?;

    let cal = calibrate_tpose(&tpose, &layout, 40.0)?;
    let fixed = cal.apply(&recorded)?;
    for (k, s) in layout.sensors().iter().enumerate() {
        let before = quat_angle_deg(&recorded[50].orientation[k], &truth[50].orientation[k]);
        let after = quat_angle_deg(&fixed[50].orientation[k], &truth[50].orientation[k]);
        println!(
            "{:<14} spread {:.3}°  error {:7.2}° -> {:.2e}°",
            s.id, cal.spread_deg[k], before, after
        );
    }
    Ok(())
}
