//! Location-dependent garment disturbance that turns tight-wear IMU streams into
//! loose-wear ones: slip, swing, impacts and deformation smoothing.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{GidError, Result};
use crate::kinematics::{uniform_interval, ImuFrame, SensorLayout};
use crate::rotmath::{slerp, UnitQuaternion};

pub const SCHEMA_VERSION: u32 = 1;

const DEFAULT_PROFILES: &str = include_str!("../data/profiles.txt");

/// Disturbance parameters for one sensor site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// Orientation random-walk scale, rad/√s.
    pub slip_sigma: f64,
    /// Reflecting cap on the slip angle, rad.
    pub slip_bound: f64,
    pub swing_freq: f64,
    /// Damping ratio ζ of the swing oscillator.
    pub swing_damping: f64,
    /// Swing forcing, rad per m/s² of sensed acceleration magnitude.
    pub swing_gain: f64,
    pub impact_rate: f64,
    pub impact_accel: f64,
    /// Orientation low-pass corner in Hz; 0 disables smoothing.
    pub deform_cutoff: f64,
    /// Lever from the garment pivot to the sensor; converts swing angular
    /// acceleration into linear acceleration.
    pub swing_radius: f64,
    /// Wobble axis in the sensor frame (unit length).
    pub swing_axis: Vector3<f64>,
}

impl NoiseParams {
    pub fn zero() -> Self {
        NoiseParams {
            slip_sigma: 0.0,
            slip_bound: 0.0,
            swing_freq: 0.0,
            swing_damping: 0.0,
            swing_gain: 0.0,
            impact_rate: 0.0,
            impact_accel: 0.0,
            deform_cutoff: 0.0,
            swing_radius: 0.0,
            swing_axis: Vector3::x(),
        }
    }

    fn scalars(&self) -> [(&'static str, f64); 9] {
        [
            ("slip_sigma", self.slip_sigma),
            ("slip_bound", self.slip_bound),
            ("swing_freq", self.swing_freq),
            ("swing_damping", self.swing_damping),
            ("swing_gain", self.swing_gain),
            ("impact_rate", self.impact_rate),
            ("impact_accel", self.impact_accel),
            ("deform_cutoff", self.deform_cutoff),
            ("swing_radius", self.swing_radius),
        ]
    }

    fn scalar_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "slip_sigma" => &mut self.slip_sigma,
            "slip_bound" => &mut self.slip_bound,
            "swing_freq" => &mut self.swing_freq,
            "swing_damping" => &mut self.swing_damping,
            "swing_gain" => &mut self.swing_gain,
            "impact_rate" => &mut self.impact_rate,
            "impact_accel" => &mut self.impact_accel,
            "deform_cutoff" => &mut self.deform_cutoff,
            "swing_radius" => &mut self.swing_radius,
            _ => return None,
        })
    }

    fn slip_on(&self) -> bool {
        self.slip_sigma > 0.0
    }

    fn swing_on(&self) -> bool {
        self.swing_gain > 0.0 || self.swing_radius > 0.0
    }

    fn impact_on(&self) -> bool {
        self.impact_rate > 0.0 && self.impact_accel > 0.0
    }

    fn deform_on(&self) -> bool {
        self.deform_cutoff > 0.0
    }

    pub fn is_identity(&self) -> bool {
        !(self.slip_on() || self.swing_on() || self.impact_on() || self.deform_on())
    }

    /// Checks ranges for a stream sampled at `rate_hz`.
    pub fn validate(&self, rate_hz: f64) -> Result<()> {
        for (k, v) in self.scalars() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GidError::Config(format!("{k}={v} must be finite and non-negative")));
            }
        }
        if self.swing_on() && !(self.swing_damping > 0.0 && self.swing_damping < 1.0 && self.swing_freq > 0.0) {
            return Err(GidError::Config(format!(
                "swing needs 0 < swing_damping < 1 and swing_freq > 0, got {} and {}",
                self.swing_damping, self.swing_freq
            )));
        }
        if self.deform_cutoff > rate_hz / 2.0 {
            return Err(GidError::Config(format!(
                "deform_cutoff {} Hz above Nyquist {} Hz",
                self.deform_cutoff,
                rate_hz / 2.0
            )));
        }
        let n = self.swing_axis.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(GidError::Config(format!("swing_axis must be unit length, has norm {n}")));
        }
        Ok(())
    }

    /// Every scalar multiplied by an independent factor in `[1 - frac, 1 + frac]`.
    pub fn perturbed<R: Rng + ?Sized>(&self, frac: f64, rng: &mut R) -> Self {
        let mut p = *self;
        for (k, _) in self.scalars() {
            let f = 1.0 + rng.random_range(-frac..=frac);
            *p.scalar_mut(k).expect("known key") *= f;
        }
        p.swing_damping = p.swing_damping.min(0.99);
        p
    }
}

/// Named per-site parameter table, stored as a sectioned key=value file.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseProfiles {
    entries: Vec<(String, NoiseParams)>,
}

impl NoiseProfiles {
    pub fn new(entries: Vec<(String, NoiseParams)>) -> Self {
        NoiseProfiles { entries }
    }

    pub fn entries(&self) -> &[(String, NoiseParams)] {
        &self.entries
    }

    pub fn get(&self, site: &str) -> Option<&NoiseParams> {
        self.entries.iter().find(|(n, _)| n == site).map(|(_, p)| p)
    }

    /// Parameters ordered like the layout's sensors.
    pub fn for_layout(&self, layout: &SensorLayout) -> Result<Vec<NoiseParams>> {
        layout
            .sensors()
            .iter()
            .map(|s| {
                self.get(&s.id)
                    .copied()
                    .ok_or_else(|| GidError::Config(format!("no noise profile for sensor {}", s.id)))
            })
            .collect()
    }

    /// Same table with every scalar perturbed by up to `frac`.
    pub fn perturbed(&self, frac: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NoiseProfiles {
            entries: self.entries.iter().map(|(n, p)| (n.clone(), p.perturbed(frac, &mut rng))).collect(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut version = None;
        let mut entries: Vec<(String, NoiseParams)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| GidError::parse(path, n + 1, msg);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if entries.iter().any(|(e, _)| e == name) {
                    return Err(err(format!("duplicate section [{name}]")));
                }
                entries.push((name.trim().to_string(), NoiseParams::zero()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            if k == "schema_version" {
                let ver: u32 = v.parse().map_err(|_| err(format!("bad schema_version {v:?}")))?;
                if ver != SCHEMA_VERSION {
                    return Err(err(format!("unsupported schema_version {ver}")));
                }
                version = Some(ver);
                continue;
            }
            let (_, params) = entries
                .last_mut()
                .ok_or_else(|| err(format!("key {k:?} outside a section")))?;
            if k == "swing_axis" {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(format!("bad swing_axis {v:?}")))?;
                if parts.len() != 3 {
                    return Err(err(format!("swing_axis needs 3 components, got {}", parts.len())));
                }
                let a = Vector3::new(parts[0], parts[1], parts[2]);
                if !(a.norm() > 0.0) {
                    return Err(err("swing_axis is zero".into()));
                }
                params.swing_axis = a.normalize();
                continue;
            }
            let slot = params.scalar_mut(k).ok_or_else(|| err(format!("unknown key {k:?}")))?;
            *slot = v.parse().map_err(|_| err(format!("bad value for {k}: {v:?}")))?;
        }
        if version.is_none() {
            return Err(GidError::parse(path, 1, "missing schema_version"));
        }
        Ok(NoiseProfiles { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("schema_version={SCHEMA_VERSION}\n");
        for (name, p) in &self.entries {
            let _ = writeln!(s, "\n[{name}]");
            for (k, v) in p.scalars() {
                let _ = writeln!(s, "{k}={v}");
            }
            let a = p.swing_axis;
            let _ = writeln!(s, "swing_axis={},{},{}", a.x, a.y, a.z);
        }
        s
    }
}

/// The shipped table: forearms disturbed most, then the waist band, then the back.
pub fn default_profiles() -> NoiseProfiles {
    NoiseProfiles::parse(DEFAULT_PROFILES, Path::new("<builtin profiles>")).expect("builtin profiles are valid")
}

fn rotvec_quat(v: Vector3<f64>) -> UnitQuaternion {
    let n = v.norm();
    if n == 0.0 {
        return UnitQuaternion::IDENTITY;
    }
    UnitQuaternion::from_axis_angle(v, n).expect("finite rotation vector")
}

/// Second-order oscillator integrated exactly under a zero-order hold on the forcing.
#[derive(Clone, Copy, Debug)]
struct Oscillator {
    omega: f64,
    zeta: f64,
    x: f64,
    v: f64,
}

impl Oscillator {
    fn at_rest(omega: f64, zeta: f64, forcing: f64) -> Self {
        Oscillator {
            omega,
            zeta,
            x: forcing / (omega * omega),
            v: 0.0,
        }
    }

    fn accel(&self, forcing: f64) -> f64 {
        forcing - 2.0 * self.zeta * self.omega * self.v - self.omega * self.omega * self.x
    }

    fn step(&mut self, forcing: f64, h: f64) {
        let w2 = self.omega * self.omega;
        let sigma = self.zeta * self.omega;
        let wd = self.omega * (1.0 - self.zeta * self.zeta).sqrt();
        let (s, c) = (wd * h).sin_cos();
        let e = (-sigma * h).exp();
        let xs = forcing / w2;
        let dx = self.x - xs;
        let x = xs + e * ((c + sigma / wd * s) * dx + s / wd * self.v);
        let v = e * (-(w2 / wd) * s * dx + (c - sigma / wd * s) * self.v);
        self.x = x;
        self.v = v;
    }
}

fn perpendicular(axis: Vector3<f64>) -> Vector3<f64> {
    let probe = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    axis.cross(&probe).normalize()
}

/// One sensor's stream: orientations and accelerations.
fn corrupt_sensor(
    orient: &mut [UnitQuaternion],
    accel: &mut [Vector3<f64>],
    p: &NoiseParams,
    h: f64,
    rng: &mut ChaCha8Rng,
) {
    let n = orient.len();
    if p.slip_on() {
        let mut s = Vector3::zeros();
        let step = p.slip_sigma * h.sqrt();
        for q in orient.iter_mut() {
            let d: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
            s += Vector3::from(d) * step;
            let r = s.norm();
            if r > p.slip_bound {
                // reflect the radius off the bound
                let reflected = (2.0 * p.slip_bound - r).max(0.0);
                s *= reflected / r;
            }
            *q = rotvec_quat(s) * *q;
        }
    }
    if p.swing_on() {
        let omega = 2.0 * PI * p.swing_freq;
        let drive = |a: &Vector3<f64>| p.swing_gain * a.norm();
        let mut osc = Oscillator::at_rest(omega, p.swing_damping, drive(&accel[0]));
        let u = perpendicular(p.swing_axis);
        for i in 0..n {
            let f = drive(&accel[i]);
            let xdd = osc.accel(f);
            let wobble = rotvec_quat(p.swing_axis * osc.x);
            orient[i] = orient[i] * wobble;
            accel[i] += orient[i].rotate(u * (p.swing_radius * xdd));
            osc.step(f, h);
        }
    }
    if p.impact_on() {
        let prob = (p.impact_rate * h).min(1.0);
        let mut i = 0;
        while i < n {
            if rng.random::<f64>() < prob {
                let d: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
                let dir = Vector3::from(d).normalize();
                for a in accel.iter_mut().skip(i).take(2) {
                    *a += dir * p.impact_accel;
                }
                i += 2;
            } else {
                i += 1;
            }
        }
    }
    if p.deform_on() {
        let beta = 1.0 - (-2.0 * PI * p.deform_cutoff * h).exp();
        let mut y = orient[0];
        for q in orient.iter_mut() {
            y = slerp(&y, q, beta);
            *q = y;
        }
    }
    if p.slip_on() || p.swing_on() || p.deform_on() {
        for q in orient.iter_mut() {
            *q = q.canonicalize();
        }
    }
}

/// Applies per-sensor disturbance; `params[k]` belongs to sensor slot `k`.
/// Deterministic in `seed`; all-zero parameters return the input unchanged.
pub fn corrupt(tight: &[ImuFrame], params: &[NoiseParams], seed: u64) -> Result<Vec<ImuFrame>> {
    if tight.is_empty() {
        return Ok(Vec::new());
    }
    let m = tight[0].orientation.len();
    if params.len() != m {
        return Err(GidError::Config(format!("{} noise profiles for {m} sensors", params.len())));
    }
    if params.iter().all(|p| p.is_identity()) {
        for p in params {
            p.validate(f64::INFINITY)?;
        }
        return Ok(tight.to_vec());
    }
    let times: Vec<f64> = tight.iter().map(|f| f.t).collect();
    let h = uniform_interval(&times)?;
    for p in params {
        p.validate(1.0 / h)?;
    }
    let mut out = tight.to_vec();
    for (k, p) in params.iter().enumerate() {
        if p.is_identity() {
            continue;
        }
        let mut orient: Vec<UnitQuaternion> = tight.iter().map(|f| f.orientation[k]).collect();
        let mut accel: Vec<Vector3<f64>> = tight.iter().map(|f| f.accel[k]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        corrupt_sensor(&mut orient, &mut accel, p, h, &mut rng);
        for (i, f) in out.iter_mut().enumerate() {
            f.orientation[k] = orient[i];
            f.accel[k] = accel[i];
        }
    }
    Ok(out)
}
