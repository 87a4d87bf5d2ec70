//! Real-time replay: a producer thread emits recorded frames at the sensor rate
//! while the consumer runs the causal pipeline one frame at a time.

use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{GidError, Result};
use crate::gidnet::Gid;
use crate::kinematics::{normalize_root_relative, ImuFrame, PoseFrame, SensorLayout, SequenceWindow};
use crate::posenet::{Predictor, StreamingPipeline};

pub const CHANNEL_CAPACITY: usize = 4;
/// Overruns above this fraction of frames are worth a warning.
pub const OVERRUN_WARN_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub rate_hz: f64,
    /// Sleep between frames like a live sensor; off replays as fast as possible.
    pub paced: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamReport {
    pub frames: usize,
    /// Arrival-to-output time per frame, milliseconds.
    pub latencies_ms: Vec<f64>,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// Frames whose latency exceeded one frame period.
    pub overruns: usize,
    pub denoised: SequenceWindow,
    pub poses: Vec<PoseFrame>,
}

impl StreamReport {
    pub fn overrun_warning(&self) -> bool {
        self.frames > 0 && self.overruns as f64 > OVERRUN_WARN_FRACTION * self.frames as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "frames={} p50_ms={:.3} p99_ms={:.3} max_ms={:.3} overruns={}",
            self.frames, self.p50_ms, self.p99_ms, self.max_ms, self.overruns
        )
    }
}

/// Nearest-rank percentile of unsorted samples; zero for an empty slice.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

/// Replays raw loose frames through the streaming pipeline.
pub fn stream_replay(
    frames: &[ImuFrame],
    layout: &SensorLayout,
    gid: Option<&Gid>,
    pred: &Predictor,
    cfg: &StreamConfig,
) -> Result<StreamReport> {
    if !(cfg.rate_hz > 0.0) {
        return Err(GidError::Config(format!("stream rate must be positive, got {}", cfg.rate_hz)));
    }
    let mut pipe = StreamingPipeline::new(gid, pred, cfg.rate_hz)?;
    let m = layout.len();
    let period = Duration::from_secs_f64(1.0 / cfg.rate_hz);
    let mut latencies = Vec::with_capacity(frames.len());
    let mut denoised = SequenceWindow::zeros(0, m);
    let mut poses = Vec::with_capacity(frames.len());
    thread::scope(|s| -> Result<()> {
        let (tx, rx) = sync_channel::<(ImuFrame, Instant)>(CHANNEL_CAPACITY);
        s.spawn(move || {
            let start = Instant::now();
            for (i, f) in frames.iter().enumerate() {
                if cfg.paced {
                    let due = start + period.mul_f64(i as f64);
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        thread::sleep(wait);
                    }
                }
                if tx.send((f.clone(), Instant::now())).is_err() {
                    break;
                }
            }
        });
        for (frame, arrived) in rx {
            let x = normalize_root_relative(std::slice::from_ref(&frame), layout)?;
            let (den, pose) = pipe.push(&x.data)?;
            latencies.push(arrived.elapsed().as_secs_f64() * 1e3);
            denoised.data.extend(den);
            denoised.frames += 1;
            poses.push(pose);
        }
        Ok(())
    })?;
    let limit = period.as_secs_f64() * 1e3;
    Ok(StreamReport {
        frames: latencies.len(),
        p50_ms: percentile(&latencies, 50.0),
        p99_ms: percentile(&latencies, 99.0),
        max_ms: latencies.iter().copied().fold(0.0, f64::max),
        overruns: latencies.iter().filter(|&&l| l > limit).count(),
        latencies_ms: latencies,
        denoised,
        poses,
    })
}

/// Batched offline computation of what the stream should produce.
pub fn offline_reference(
    loose: &SequenceWindow,
    gid: Option<&Gid>,
    pred: &Predictor,
    rate_hz: f64,
) -> Result<(SequenceWindow, Vec<PoseFrame>)> {
    let den = match gid {
        Some(g) => g.denoise_causal(loose)?,
        None => loose.clone(),
    };
    let poses = pred.predict_causal(&den, rate_hz)?;
    Ok((den, poses))
}

/// Largest absolute difference over denoised features and pose rotation matrices.
pub fn max_deviation(report: &StreamReport, den: &SequenceWindow, poses: &[PoseFrame]) -> Result<f64> {
    if report.denoised.data.len() != den.data.len() || report.poses.len() != poses.len() {
        return Err(GidError::InvalidInput(format!(
            "stream produced {} frames, reference has {}",
            report.frames, den.frames
        )));
    }
    let feat = report
        .denoised
        .data
        .iter()
        .zip(&den.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let pose = report
        .poses
        .iter()
        .zip(poses)
        .flat_map(|(a, b)| a.theta.iter().zip(&b.theta))
        .flat_map(|(a, b)| {
            let (ra, rb) = (a.to_matrix().to_row_major(), b.to_matrix().to_row_major());
            (0..9).map(move |i| (ra[i] - rb[i]).abs())
        })
        .fold(0.0, f64::max);
    Ok(feat.max(pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gidnet::GidConfig;
    use crate::kinematics::{synth_motion, tight_imu_from_motion, MotionConfig, Skeleton};
    use crate::posenet::PoseNetConfig;

    #[test]
    fn percentiles_use_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn unpaced_stream_matches_offline() {
        let skel = Skeleton::default_16();
        let layout = SensorLayout::default_for(&skel).unwrap();
        let poses = synth_motion(&skel, 2, &MotionConfig { duration_s: 1.0, ..Default::default() }).unwrap();
        let imu = tight_imu_from_motion(&skel, &layout, &poses).unwrap();
        let gcfg = GidConfig {
            window: 16,
            model_dim: 16,
            ..Default::default()
        };
        let pcfg = PoseNetConfig {
            window: 16,
            model_dim: 16,
            ..Default::default()
        };
        let gid = Gid::new(&gcfg, 1).unwrap();
        let pred = Predictor::new(&pcfg, 1).unwrap();
        let cfg = StreamConfig { rate_hz: 40.0, paced: false };
        let rep = stream_replay(&imu, &layout, Some(&gid), &pred, &cfg).unwrap();
        assert_eq!(rep.frames, imu.len());
        let x = normalize_root_relative(&imu, &layout).unwrap();
        let (den, ps) = offline_reference(&x, Some(&gid), &pred, 40.0).unwrap();
        assert!(max_deviation(&rep, &den, &ps).unwrap() < 1e-4);
        let empty = stream_replay(&[], &layout, Some(&gid), &pred, &cfg).unwrap();
        assert_eq!(empty.frames, 0);
        assert!(!empty.overrun_warning());
    }
}
