//! Articulated body, forward kinematics, procedural motion and ideal IMU synthesis.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GidError, Result};
use crate::rotmath::{AxisAngle, RotationMatrix, UnitQuaternion};

pub const GRAVITY: [f64; 3] = [0.0, 9.81, 0.0];
/// Accelerations are divided by this before they reach a network.
pub const ACC_SCALE: f64 = 30.0;
pub const CHANNELS: usize = 12;
pub const DEFAULT_RATE_HZ: f64 = 40.0;
/// Allowed relative deviation of any frame interval from the mean interval.
pub const MAX_JITTER: f64 = 0.01;

const DEFAULT_SKELETON: &str = include_str!("../data/skeleton16.txt");

pub fn gravity() -> Vector3<f64> {
    Vector3::from(GRAVITY)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vector3<f64>,
}

/// Joints in topological order (every parent precedes its children).
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(GidError::Config("skeleton has no joints".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            match j.parent {
                None if i != 0 => {
                    return Err(GidError::Config(format!("joint {i} ({}) has no parent", j.name)))
                }
                Some(_) if i == 0 => return Err(GidError::Config("root joint has a parent".into())),
                Some(p) if p >= i => {
                    return Err(GidError::Config(format!(
                        "joint {i} ({}) has parent {p}; parents must precede children",
                        j.name
                    )))
                }
                Some(_) if j.offset.norm() <= 0.0 => {
                    return Err(GidError::Config(format!("joint {i} ({}) has a zero-length bone", j.name)))
                }
                _ => {}
            }
        }
        Ok(Skeleton { joints })
    }

    /// The shipped 16-joint body.
    pub fn default_16() -> Self {
        Self::parse(DEFAULT_SKELETON, Path::new("<builtin skeleton>")).expect("builtin skeleton is valid")
    }

    /// Parses `index name parent_index dx dy dz` lines; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut joints = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(GidError::parse(path, n + 1, format!("expected 6 fields, got {}", f.len())));
            }
            let idx: usize = f[0]
                .parse()
                .map_err(|_| GidError::parse(path, n + 1, format!("bad index {:?}", f[0])))?;
            if idx != joints.len() {
                return Err(GidError::parse(path, n + 1, format!("index {idx} out of sequence")));
            }
            let parent: i64 = f[2]
                .parse()
                .map_err(|_| GidError::parse(path, n + 1, format!("bad parent {:?}", f[2])))?;
            let mut off = [0.0; 3];
            for (k, o) in off.iter_mut().enumerate() {
                *o = f[3 + k]
                    .parse()
                    .map_err(|_| GidError::parse(path, n + 1, format!("bad offset {:?}", f[3 + k])))?;
            }
            joints.push(Joint {
                name: f[1].to_string(),
                parent: if parent < 0 { None } else { Some(parent as usize) },
                offset: Vector3::from(off),
            });
        }
        Self::new(joints)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# index name parent_index dx dy dz\n");
        for (i, j) in self.joints.iter().enumerate() {
            let p = j.parent.map_or(-1, |p| p as i64);
            s.push_str(&format!(
                "{i} {} {p} {} {} {}\n",
                j.name, j.offset.x, j.offset.y, j.offset.z
            ));
        }
        s
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.joints.iter().map(|j| j.parent).collect()
    }

    pub fn offsets(&self) -> Vec<[f64; 3]> {
        self.joints.iter().map(|j| [j.offset.x, j.offset.y, j.offset.z]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sensor {
    pub id: String,
    pub joint: usize,
    /// Sensor frame relative to the joint frame.
    pub mounting: UnitQuaternion,
    /// Sensor position in the joint frame, meters.
    pub lever: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorLayout {
    sensors: Vec<Sensor>,
    root: usize,
}

impl SensorLayout {
    pub fn new(sensors: Vec<Sensor>, root: usize) -> Result<Self> {
        if root >= sensors.len() {
            return Err(GidError::Config(format!(
                "root sensor {root} out of range for {} sensors",
                sensors.len()
            )));
        }
        for (i, s) in sensors.iter().enumerate() {
            if sensors[..i].iter().any(|o| o.id == s.id) {
                return Err(GidError::Config(format!("duplicate sensor id {}", s.id)));
            }
        }
        Ok(SensorLayout { sensors, root })
    }

    /// Six garment sites: both forearms, back, waistline (root), left and right waist.
    pub fn default_for(skel: &Skeleton) -> Result<Self> {
        let site = |id: &str, joint: &str, mounting: RotationMatrix, lever: [f64; 3]| -> Result<Sensor> {
            let j = skel
                .index_of(joint)
                .ok_or_else(|| GidError::Config(format!("skeleton lacks joint {joint} for sensor {id}")))?;
            Ok(Sensor {
                id: id.to_string(),
                joint: j,
                mounting: mounting.to_quat(),
                lever: Vector3::from(lever),
            })
        };
        let h = PI / 2.0;
        Self::new(
            vec![
                site("left_forearm", "l_elbow", RotationMatrix::rot_x(h), [0.15, 0.0, 0.04])?,
                site("right_forearm", "r_elbow", RotationMatrix::rot_x(-h), [-0.15, 0.0, 0.04])?,
                site("back", "chest_back", RotationMatrix::rot_y(PI), [0.0, 0.0, -0.02])?,
                site("waist", "pelvis", RotationMatrix::identity(), [0.0, 0.02, 0.10])?,
                site("left_waist", "l_hip", RotationMatrix::rot_y(h), [0.04, -0.08, 0.06])?,
                site("right_waist", "r_hip", RotationMatrix::rot_y(-h), [-0.04, -0.08, 0.06])?,
            ],
            3,
        )
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn ids(&self) -> Vec<String> {
        self.sensors.iter().map(|s| s.id.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub t: f64,
    pub theta: Vec<AxisAngle>,
    pub root: Vector3<f64>,
}

impl PoseFrame {
    pub fn rest(joints: usize, t: f64) -> Self {
        PoseFrame {
            t,
            theta: vec![AxisAngle::zero(); joints],
            root: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImuFrame {
    pub t: f64,
    /// Sensor-to-global orientation.
    pub orientation: Vec<UnitQuaternion>,
    /// Global frame, gravity-inclusive, m/s².
    pub accel: Vec<Vector3<f64>>,
}

/// Global joint rotations and positions.
pub fn forward_kinematics(skel: &Skeleton, pose: &PoseFrame) -> (Vec<RotationMatrix>, Vec<Vector3<f64>>) {
    let n = skel.len();
    let mut rot: Vec<RotationMatrix> = Vec::with_capacity(n);
    let mut pos: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for (i, j) in skel.joints.iter().enumerate() {
        let local = pose.theta.get(i).map_or(RotationMatrix::identity(), |a| a.to_matrix());
        match j.parent {
            None => {
                rot.push(local);
                pos.push(pose.root);
            }
            Some(p) => {
                pos.push(pos[p] + rot[p].apply(j.offset));
                rot.push(rot[p] * local);
            }
        }
    }
    (rot, pos)
}

/// Controls [`synth_motion`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionConfig {
    pub duration_s: f64,
    pub rate_hz: f64,
    /// Multiplies every joint amplitude and the root excursion; 0 gives a still T-pose.
    pub amplitude_scale: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            duration_s: 60.0,
            rate_hz: DEFAULT_RATE_HZ,
            amplitude_scale: 1.0,
        }
    }
}

/// Height of the pelvis above the ground in the rest pose.
pub const PELVIS_HEIGHT: f64 = 0.95;
/// Cap on Σ amplitude·angular-frequency per axis-angle component, rad/s.
pub const COMPONENT_SPEED_LIMIT: f64 = 5.0;

/// Per-axis amplitude limits (radians) by joint name.
fn amplitude_limits(name: &str) -> [f64; 3] {
    match name {
        "pelvis" => [0.3, 0.6, 0.2],
        "spine" => [0.15, 0.15, 0.15],
        "chest" => [0.2, 0.2, 0.2],
        "neck" => [0.2, 0.3, 0.2],
        "head" => [0.15, 0.2, 0.15],
        "l_shoulder" | "r_shoulder" => [0.8, 0.6, 0.8],
        "l_elbow" | "r_elbow" => [0.3, 0.9, 0.4],
        "l_wrist" | "r_wrist" => [0.25, 0.25, 0.25],
        "l_hip" | "r_hip" => [0.6, 0.2, 0.25],
        "l_knee" | "r_knee" => [0.6, 0.05, 0.05],
        "chest_back" => [0.0, 0.0, 0.0],
        _ => [0.2, 0.2, 0.2],
    }
}

#[derive(Clone, Debug)]
struct Wave {
    amp: f64,
    omega: f64,
    phase: f64,
}

fn eval(waves: &[Wave], t: f64) -> f64 {
    waves.iter().map(|w| w.amp * (w.omega * t + w.phase).sin()).sum()
}

fn draw_waves(rng: &mut ChaCha8Rng, limit: f64, freq: (f64, f64), speed_limit: f64) -> Vec<Wave> {
    let k = rng.random_range(2..=4usize);
    let mut waves: Vec<Wave> = (0..k)
        .map(|_| Wave {
            amp: rng.random_range(0.2..1.0),
            omega: 2.0 * PI * rng.random_range(freq.0..freq.1),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.amp).sum();
    let share = rng.random_range(0.5..1.0);
    for w in &mut waves {
        w.amp *= limit * share / total;
    }
    let speed: f64 = waves.iter().map(|w| w.amp * w.omega).sum();
    if speed > speed_limit {
        for w in &mut waves {
            w.amp *= speed_limit / speed;
        }
    }
    waves
}

/// Smooth procedural motion: every joint's axis-angle components are sums of 2–4
/// sinusoids between 0.3 and 3 Hz within per-joint amplitude limits, plus a slow
/// wandering root translation. Deterministic in `seed`.
pub fn synth_motion(skel: &Skeleton, seed: u64, cfg: &MotionConfig) -> Result<Vec<PoseFrame>> {
    if !(cfg.duration_s > 0.0) || !(cfg.rate_hz > 0.0) || !(cfg.amplitude_scale >= 0.0) {
        return Err(GidError::InvalidInput(format!(
            "motion needs positive duration and rate, got {} s at {} Hz (scale {})",
            cfg.duration_s, cfg.rate_hz, cfg.amplitude_scale
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint_waves: Vec<[Vec<Wave>; 3]> = skel
        .joints
        .iter()
        .map(|j| {
            let lim = amplitude_limits(&j.name);
            std::array::from_fn(|a| draw_waves(&mut rng, lim[a], (0.3, 3.0), COMPONENT_SPEED_LIMIT))
        })
        .collect();
    let root_waves: [Vec<Wave>; 3] = [
        draw_waves(&mut rng, 0.3, (0.1, 0.5), 1.5),
        draw_waves(&mut rng, 0.03, (1.0, 2.0), 1.0),
        draw_waves(&mut rng, 0.3, (0.1, 0.5), 1.5),
    ];
    let frames = (cfg.duration_s * cfg.rate_hz).round().max(1.0) as usize;
    let s = cfg.amplitude_scale;
    Ok((0..frames)
        .map(|i| {
            let t = i as f64 / cfg.rate_hz;
            let theta = joint_waves
                .iter()
                .map(|w| AxisAngle::new(s * eval(&w[0], t), s * eval(&w[1], t), s * eval(&w[2], t)).canonicalize())
                .collect();
            let root = Vector3::new(
                s * eval(&root_waves[0], t),
                PELVIS_HEIGHT + s * eval(&root_waves[1], t),
                s * eval(&root_waves[2], t),
            );
            PoseFrame { t, theta, root }
        })
        .collect())
}

/// Checks timestamps are strictly increasing with at most [`MAX_JITTER`] relative
/// deviation; returns the mean interval.
pub fn uniform_interval(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(GidError::InsufficientData(format!("{} frames", times.len())));
    }
    let h = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(h > 0.0) {
        return Err(GidError::InvalidInput("timestamps not increasing".into()));
    }
    for (i, w) in times.windows(2).enumerate() {
        let d = w[1] - w[0];
        if !((d - h).abs() <= MAX_JITTER * h) {
            return Err(GidError::InvalidInput(format!(
                "non-uniform timestamps: interval {d:.6} s at frame {} vs mean {h:.6} s",
                i + 1
            )));
        }
    }
    Ok(h)
}

/// Second derivative of a uniformly sampled track; endpoints use one-sided
/// second-order stencils.
fn second_difference(p: &[Vector3<f64>], h: f64) -> Vec<Vector3<f64>> {
    let n = p.len();
    let h2 = h * h;
    (0..n)
        .map(|i| {
            if i == 0 {
                ((p[0] - p[1]) * 2.0 - (p[1] - p[2]) * 3.0 + (p[2] - p[3])) / h2
            } else if i == n - 1 {
                ((p[n - 1] - p[n - 2]) * 2.0 - (p[n - 2] - p[n - 3]) * 3.0 + (p[n - 3] - p[n - 4])) / h2
            } else {
                ((p[i + 1] - p[i]) - (p[i] - p[i - 1])) / h2
            }
        })
        .collect()
}

/// Ideal strapped-on sensor readings for a pose sequence.
pub fn tight_imu_from_motion(skel: &Skeleton, layout: &SensorLayout, poses: &[PoseFrame]) -> Result<Vec<ImuFrame>> {
    if poses.len() < 5 {
        return Err(GidError::InsufficientData(format!(
            "IMU synthesis needs at least 5 frames, got {}",
            poses.len()
        )));
    }
    let times: Vec<f64> = poses.iter().map(|p| p.t).collect();
    let h = uniform_interval(&times)?;
    let m = layout.len();
    let mut orient = vec![Vec::with_capacity(poses.len()); m];
    let mut track = vec![Vec::with_capacity(poses.len()); m];
    for pose in poses {
        let (rot, pos) = forward_kinematics(skel, pose);
        for (k, s) in layout.sensors.iter().enumerate() {
            let r = rot[s.joint];
            orient[k].push((r.to_quat() * s.mounting).canonicalize());
            track[k].push(pos[s.joint] + r.apply(s.lever));
        }
    }
    let accel: Vec<Vec<Vector3<f64>>> = track.iter().map(|p| second_difference(p, h)).collect();
    let g = gravity();
    Ok((0..poses.len())
        .map(|i| ImuFrame {
            t: poses[i].t,
            orientation: (0..m).map(|k| orient[k][i]).collect(),
            accel: (0..m).map(|k| accel[k][i] + g).collect(),
        })
        .collect())
}

/// `frames × sensors × CHANNELS` feature block, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceWindow {
    pub frames: usize,
    pub sensors: usize,
    pub data: Vec<f64>,
}

impl SequenceWindow {
    pub fn zeros(frames: usize, sensors: usize) -> Self {
        SequenceWindow {
            frames,
            sensors,
            data: vec![0.0; frames * sensors * CHANNELS],
        }
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn at(&self, t: usize, m: usize) -> &[f64] {
        let o = (t * self.sensors + m) * CHANNELS;
        &self.data[o..o + CHANNELS]
    }

    pub fn at_mut(&mut self, t: usize, m: usize) -> &mut [f64] {
        let o = (t * self.sensors + m) * CHANNELS;
        &mut self.data[o..o + CHANNELS]
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> SequenceWindow {
        let row = self.sensors * CHANNELS;
        SequenceWindow {
            frames: len,
            sensors: self.sensors,
            data: self.data[start * row..(start + len) * row].to_vec(),
        }
    }
}

/// Expresses non-root sensors in the root sensor's frame; the root keeps its own
/// global quantities. Per sensor: 9 rotation entries (row-major), then acceleration
/// divided by [`ACC_SCALE`].
pub fn normalize_root_relative(frames: &[ImuFrame], layout: &SensorLayout) -> Result<SequenceWindow> {
    let m = layout.len();
    let r0 = layout.root();
    let mut out = SequenceWindow::zeros(frames.len(), m);
    for (t, f) in frames.iter().enumerate() {
        if f.orientation.len() != m || f.accel.len() != m {
            return Err(GidError::Config(format!(
                "frame {t} has {} sensors, layout has {m}",
                f.orientation.len()
            )));
        }
        let root_inv = f.orientation[r0].to_matrix().transpose();
        for k in 0..m {
            let r = f.orientation[k].to_matrix();
            let (rel, acc) = if k == r0 {
                (r, f.accel[k])
            } else {
                (root_inv * r, root_inv.apply(f.accel[k]))
            };
            let dst = out.at_mut(t, k);
            dst[..9].copy_from_slice(&rel.to_row_major());
            for a in 0..3 {
                dst[9 + a] = acc[a] / ACC_SCALE;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`normalize_root_relative`]. Rotation blocks that are not exactly
/// orthonormal (network outputs) are projected onto the nearest rotation.
pub fn denormalize_root_relative(window: &SequenceWindow, layout: &SensorLayout, times: &[f64]) -> Result<Vec<ImuFrame>> {
    let m = layout.len();
    if window.sensors != m || times.len() != window.frames {
        return Err(GidError::Config(format!(
            "window {}×{} does not match layout of {m} sensors and {} timestamps",
            window.frames,
            window.sensors,
            times.len()
        )));
    }
    let r0 = layout.root();
    let to_rot = |v: &[f64]| RotationMatrix::project(&nalgebra::Matrix3::from_row_slice(&v[..9]));
    (0..window.frames)
        .map(|t| {
            let root_ch = window.at(t, r0);
            let root = to_rot(root_ch)?;
            let mut orientation = Vec::with_capacity(m);
            let mut accel = Vec::with_capacity(m);
            for k in 0..m {
                let ch = window.at(t, k);
                let a = Vector3::new(ch[9], ch[10], ch[11]) * ACC_SCALE;
                if k == r0 {
                    orientation.push(root.to_quat());
                    accel.push(a);
                } else {
                    orientation.push((root * to_rot(ch)?).to_quat());
                    accel.push(root.apply(a));
                }
            }
            Ok(ImuFrame {
                t: times[t],
                orientation,
                accel,
            })
        })
        .collect()
}
