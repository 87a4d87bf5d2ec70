//! T-pose calibration: aligns each sensor's own reference frame with the body frame.

use crate::error::{GidError, Result};
use crate::kinematics::{ImuFrame, SensorLayout};
use crate::rotmath::{chordal_mean, quat_angle_deg, UnitQuaternion};

pub const MIN_TPOSE_SECONDS: f64 = 3.0;
/// A sensor whose readings wander further than this from their mean was moving.
pub const MAX_TPOSE_SPREAD_DEG: f64 = 5.0;

/// Per-sensor rotation taking raw readings into the body-aligned global frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub offsets: Vec<UnitQuaternion>,
    /// Frames in the capture window.
    pub frames: usize,
    /// Largest angle between any sample and the sensor's mean orientation.
    pub spread_deg: Vec<f64>,
}

/// Estimates offsets from a still T-pose recording. In the T-pose every bone has
/// identity global rotation, so each sensor should read its mounting rotation.
pub fn calibrate_tpose(frames: &[ImuFrame], layout: &SensorLayout, rate_hz: f64) -> Result<Calibration> {
    let need = (MIN_TPOSE_SECONDS * rate_hz).ceil() as usize;
    if frames.len() < need {
        return Err(GidError::InsufficientData(format!(
            "T-pose needs {MIN_TPOSE_SECONDS} s ({need} frames), got {}",
            frames.len()
        )));
    }
    let m = layout.len();
    if let Some(f) = frames.iter().find(|f| f.orientation.len() != m) {
        return Err(GidError::InvalidInput(format!(
            "frame at t={} has {} sensors, layout has {m}",
            f.t,
            f.orientation.len()
        )));
    }
    let (offsets, spread_deg) = layout
        .sensors()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let qs: Vec<UnitQuaternion> = frames.iter().map(|f| f.orientation[k]).collect();
            let mean = chordal_mean(&qs)?;
            let spread = qs.iter().map(|q| quat_angle_deg(q, &mean)).fold(0.0, f64::max);
            if spread >= MAX_TPOSE_SPREAD_DEG {
                return Err(GidError::CalibrationMotion {
                    sensor: k,
                    spread_deg: spread,
                    limit_deg: MAX_TPOSE_SPREAD_DEG,
                });
            }
            Ok(((s.mounting * mean.inverse()).canonicalize(), spread))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(Calibration {
        offsets,
        frames: frames.len(),
        spread_deg,
    })
}

impl Calibration {
    pub fn identity(sensors: usize) -> Self {
        Calibration {
            offsets: vec![UnitQuaternion::identity(); sensors],
            frames: 0,
            spread_deg: vec![0.0; sensors],
        }
    }

    /// Pre-multiplies orientations and rotates accelerations by each sensor's offset.
    pub fn apply(&self, frames: &[ImuFrame]) -> Result<Vec<ImuFrame>> {
        frames
            .iter()
            .map(|f| {
                if f.orientation.len() != self.offsets.len() {
                    return Err(GidError::InvalidInput(format!(
                        "frame has {} sensors, calibration has {}",
                        f.orientation.len(),
                        self.offsets.len()
                    )));
                }
                Ok(ImuFrame {
                    t: f.t,
                    orientation: f
                        .orientation
                        .iter()
                        .zip(&self.offsets)
                        .map(|(q, c)| (*c * *q).canonicalize())
                        .collect(),
                    accel: f.accel.iter().zip(&self.offsets).map(|(a, c)| c.rotate(*a)).collect(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{synth_motion, tight_imu_from_motion, MotionConfig, PoseFrame, Skeleton};
    use crate::rotmath::AxisAngle;
    use nalgebra::Vector3;

    fn world_tilt(frames: &[ImuFrame], w: &[UnitQuaternion]) -> Vec<ImuFrame> {
        Calibration {
            offsets: w.to_vec(),
            frames: 0,
            spread_deg: vec![0.0; w.len()],
        }
        .apply(frames)
        .unwrap()
    }

    #[test]
    fn recovers_unknown_sensor_frames() {
        let skel = Skeleton::default_16();
        let layout = SensorLayout::default_for(&skel).unwrap();
        let still: Vec<PoseFrame> = (0..160).map(|i| PoseFrame::rest(skel.len(), i as f64 / 40.0)).collect();
        let tpose = tight_imu_from_motion(&skel, &layout, &still).unwrap();
        let motion = synth_motion(&skel, 5, &MotionConfig { duration_s: 2.0, ..Default::default() }).unwrap();
        let truth = tight_imu_from_motion(&skel, &layout, &motion).unwrap();
        let w: Vec<UnitQuaternion> = (0..layout.len())
            .map(|k| AxisAngle::new(0.3 * k as f64, -0.5, 0.2 + 0.1 * k as f64).to_quat())
            .collect();
        let aligned = calibrate_tpose(&tpose, &layout, 40.0).unwrap();
        for q in &aligned.offsets {
            assert!(q.angle() < 1e-6);
        }
        let cal = calibrate_tpose(&world_tilt(&tpose, &w), &layout, 40.0).unwrap();
        assert_eq!(cal.frames, 160);
        for (c, wk) in cal.offsets.iter().zip(&w) {
            assert!(quat_angle_deg(c, &wk.inverse()) < 1e-5);
        }
        // idempotent: recalibrating the corrected capture gives identity
        let again = calibrate_tpose(&cal.apply(&world_tilt(&tpose, &w)).unwrap(), &layout, 40.0).unwrap();
        assert!(again.offsets.iter().all(|q| q.angle() < 1e-6));
        let fixed = cal.apply(&world_tilt(&truth, &w)).unwrap();
        for (a, b) in fixed.iter().zip(&truth) {
            for k in 0..layout.len() {
                let d = quat_angle_deg(&a.orientation[k], &b.orientation[k]);
                assert!(d < 1e-5, "{d}");
                assert!((a.accel[k] - b.accel[k]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_short_or_moving_tpose() {
        let skel = Skeleton::default_16();
        let layout = SensorLayout::default_for(&skel).unwrap();
        let still: Vec<PoseFrame> = (0..80).map(|i| PoseFrame::rest(skel.len(), i as f64 / 40.0)).collect();
        let short = tight_imu_from_motion(&skel, &layout, &still).unwrap();
        assert!(matches!(
            calibrate_tpose(&short, &layout, 40.0),
            Err(GidError::InsufficientData(_))
        ));
        let mut moving: Vec<PoseFrame> = (0..160).map(|i| PoseFrame::rest(skel.len(), i as f64 / 40.0)).collect();
        let elbow = skel.index_of("l_elbow").unwrap();
        for (i, p) in moving.iter_mut().enumerate() {
            p.theta[elbow] = AxisAngle(Vector3::new(0.0, 0.0, 0.004 * i as f64));
        }
        let imu = tight_imu_from_motion(&skel, &layout, &moving).unwrap();
        match calibrate_tpose(&imu, &layout, 40.0) {
            Err(GidError::CalibrationMotion { sensor, spread_deg, .. }) => {
                assert_eq!(layout.sensors()[sensor].id, "left_forearm");
                assert!(spread_deg >= MAX_TPOSE_SPREAD_DEG);
            }
            other => panic!("expected calibration-motion error, got {other:?}"),
        }
    }
}
