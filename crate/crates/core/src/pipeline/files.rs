//! Text sequence files: a `key=value` header, a `---` separator, then CSV rows.
//! Numbers are written with a fixed number of decimals declared in the header, so
//! values already on that grid survive a write/read cycle bit for bit.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{GidError, Result};
use crate::kinematics::{ImuFrame, PoseFrame, SensorLayout, ACC_SCALE, GRAVITY};
use crate::rotmath::{AxisAngle, UnitQuaternion};
use crate::trainer::Provenance;

pub const FILE_VERSION: u32 = 1;
pub const DEFAULT_DECIMALS: usize = 9;
const UNIT_TOL: f64 = 1e-6;

struct Parsed<'a> {
    header: Vec<(String, String, usize)>,
    rows: Vec<(usize, Vec<f64>)>,
    path: &'a Path,
}

impl Parsed<'_> {
    fn get(&self, key: &str) -> Result<&str> {
        self.header
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
            .ok_or_else(|| GidError::parse(self.path, 1, format!("header lacks {key}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        let line = self.header.iter().find(|(k, _, _)| k == key).map_or(1, |h| h.2);
        v.parse()
            .map_err(|_| GidError::parse(self.path, line, format!("bad value for {key}: {v:?}")))
    }
}

fn split<'a>(text: &str, path: &'a Path, magic: &str) -> Result<Parsed<'a>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == magic => {}
        _ => return Err(GidError::parse(path, 1, format!("expected first line {magic:?}"))),
    }
    let mut header = Vec::new();
    let mut body = false;
    let mut rows = Vec::new();
    for (i, raw) in lines {
        let n = i + 1;
        let line = raw.trim();
        if !body {
            if line == "---" {
                body = true;
                continue;
            }
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GidError::parse(path, n, format!("expected key=value, got {line:?}")))?;
            header.push((k.trim().to_string(), v.trim().to_string(), n));
        } else if !line.is_empty() {
            let vals = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| GidError::parse(path, n, format!("bad number {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((n, vals));
        }
    }
    if !body {
        return Err(GidError::parse(path, 1, "missing --- separator"));
    }
    let p = Parsed { header, rows, path };
    let version: u32 = p.num("version")?;
    if version != FILE_VERSION {
        return Err(GidError::parse(path, 2, format!("unsupported version {version}")));
    }
    Ok(p)
}

fn check_times(p: &Parsed) -> Result<()> {
    for w in p.rows.windows(2) {
        if !(w[1].1[0] > w[0].1[0]) {
            return Err(GidError::parse(p.path, w[1].0, "timestamps must increase"));
        }
    }
    Ok(())
}

fn push_row(out: &mut String, vals: impl Iterator<Item = f64>, dec: usize) {
    let mut first = true;
    for v in vals {
        if !first {
            out.push(',');
        }
        first = false;
        // avoid "-0.000000000" so equal grid values always print identically
        let v = if v == 0.0 { 0.0 } else { v };
        out.push_str(&format!("{v:.dec$}"));
    }
    out.push('\n');
}

/// Timestamped per-sensor orientation (w, x, y, z) and acceleration (m/s², global).
#[derive(Clone, Debug, PartialEq)]
pub struct ImuSequenceFile {
    pub rate_hz: f64,
    pub sensor_names: Vec<String>,
    pub provenance: Provenance,
    pub root_sensor: String,
    pub decimals: usize,
    pub frames: Vec<ImuFrame>,
}

impl ImuSequenceFile {
    pub const MAGIC: &'static str = "# gid imu sequence";

    pub fn new(layout: &SensorLayout, rate_hz: f64, provenance: Provenance, frames: Vec<ImuFrame>) -> Self {
        let names = layout.ids();
        ImuSequenceFile {
            rate_hz,
            root_sensor: names[layout.root()].clone(),
            sensor_names: names,
            provenance,
            decimals: DEFAULT_DECIMALS,
            frames,
        }
    }

    /// Checks the sensor names match `layout` slot for slot.
    pub fn check_layout(&self, layout: &SensorLayout) -> Result<()> {
        let ids = layout.ids();
        if self.sensor_names != ids || self.root_sensor != ids[layout.root()] {
            return Err(GidError::Config(format!(
                "file sensors {:?} (root {}) do not match layout {:?}",
                self.sensor_names, self.root_sensor, ids
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let d = self.decimals;
        let mut s = format!(
            "{}\nversion={FILE_VERSION}\nsensors={}\nrate_hz={}\nsensor_names={}\nprovenance={}\n\
             root_sensor={}\nacc_scale={ACC_SCALE}\ngravity={},{},{}\ndecimals={d}\n\
             columns=t;per sensor qw,qx,qy,qz,ax,ay,az\n---\n",
            Self::MAGIC,
            self.sensor_names.len(),
            self.rate_hz,
            self.sensor_names.join(","),
            self.provenance,
            self.root_sensor,
            GRAVITY[0],
            GRAVITY[1],
            GRAVITY[2],
        );
        for f in &self.frames {
            let vals = std::iter::once(f.t).chain(f.orientation.iter().zip(&f.accel).flat_map(|(q, a)| {
                let q = q.to_array();
                [q[0], q[1], q[2], q[3], a.x, a.y, a.z]
            }));
            push_row(&mut s, vals, d);
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let p = split(text, path, Self::MAGIC)?;
        let m: usize = p.num("sensors")?;
        let names: Vec<String> = p.get("sensor_names")?.split(',').map(|s| s.trim().to_string()).collect();
        if names.len() != m {
            return Err(GidError::parse(path, 1, format!("{} sensor names for {m} sensors", names.len())));
        }
        let provenance: Provenance = p.get("provenance")?.parse()?;
        let frames = p
            .rows
            .iter()
            .map(|(n, r)| {
                if r.len() != 1 + 7 * m {
                    return Err(GidError::parse(path, *n, format!("expected {} fields, got {}", 1 + 7 * m, r.len())));
                }
                let mut orientation = Vec::with_capacity(m);
                let mut accel = Vec::with_capacity(m);
                for k in 0..m {
                    let v = &r[1 + 7 * k..1 + 7 * (k + 1)];
                    let q = UnitQuaternion::from_unit(v[0], v[1], v[2], v[3], UNIT_TOL)
                        .map_err(|e| GidError::parse(path, *n, format!("sensor {k}: {e}")))?;
                    orientation.push(q);
                    accel.push(Vector3::new(v[4], v[5], v[6]));
                }
                Ok(ImuFrame {
                    t: r[0],
                    orientation,
                    accel,
                })
            })
            .collect::<Result<_>>()?;
        check_times(&p)?;
        Ok(ImuSequenceFile {
            rate_hz: p.num("rate_hz")?,
            root_sensor: p.get("root_sensor")?.to_string(),
            sensor_names: names,
            provenance,
            decimals: p.num("decimals")?,
            frames,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }
}

/// Timestamped root translation and per-joint axis-angle rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequenceFile {
    pub rate_hz: f64,
    pub joints: usize,
    /// Skeleton file, relative to this file's directory.
    pub skeleton: String,
    pub decimals: usize,
    pub frames: Vec<PoseFrame>,
}

impl PoseSequenceFile {
    pub const MAGIC: &'static str = "# gid pose sequence";

    pub fn new(joints: usize, rate_hz: f64, skeleton: &str, frames: Vec<PoseFrame>) -> Self {
        PoseSequenceFile {
            rate_hz,
            joints,
            skeleton: skeleton.to_string(),
            decimals: DEFAULT_DECIMALS,
            frames,
        }
    }

    pub fn to_text(&self) -> String {
        let d = self.decimals;
        let mut s = format!(
            "{}\nversion={FILE_VERSION}\njoints={}\nrate_hz={}\nskeleton={}\ndecimals={d}\n\
             columns=t,tx,ty,tz;per joint ax,ay,az\n---\n",
            Self::MAGIC,
            self.joints,
            self.rate_hz,
            self.skeleton
        );
        for f in &self.frames {
            let vals = [f.t, f.root.x, f.root.y, f.root.z]
                .into_iter()
                .chain(f.theta.iter().flat_map(|a| [a.0.x, a.0.y, a.0.z]));
            push_row(&mut s, vals, d);
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let p = split(text, path, Self::MAGIC)?;
        let j: usize = p.num("joints")?;
        let frames = p
            .rows
            .iter()
            .map(|(n, r)| {
                if r.len() != 4 + 3 * j {
                    return Err(GidError::parse(path, *n, format!("expected {} fields, got {}", 4 + 3 * j, r.len())));
                }
                Ok(PoseFrame {
                    t: r[0],
                    root: Vector3::new(r[1], r[2], r[3]),
                    theta: r[4..].chunks(3).map(|v| AxisAngle::new(v[0], v[1], v[2])).collect(),
                })
            })
            .collect::<Result<_>>()?;
        check_times(&p)?;
        Ok(PoseSequenceFile {
            rate_hz: p.num("rate_hz")?,
            joints: j,
            skeleton: p.get("skeleton")?.to_string(),
            decimals: p.num("decimals")?,
            frames,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::garmentnoise::default_profiles;
    use crate::kinematics::{synth_motion, tight_imu_from_motion, MotionConfig, Skeleton};

    fn sample() -> (ImuSequenceFile, PoseSequenceFile) {
        let skel = Skeleton::default_16();
        let layout = SensorLayout::default_for(&skel).unwrap();
        let poses = synth_motion(&skel, 3, &MotionConfig { duration_s: 0.5, ..Default::default() }).unwrap();
        let tight = tight_imu_from_motion(&skel, &layout, &poses).unwrap();
        let loose = crate::garmentnoise::corrupt(&tight, &default_profiles().for_layout(&layout).unwrap(), 3).unwrap();
        (
            ImuSequenceFile::new(&layout, 40.0, Provenance::Loose, loose),
            PoseSequenceFile::new(16, 40.0, "skeleton.txt", poses),
        )
    }

    #[test]
    fn round_trip_on_the_grid() {
        let (imu, pose) = sample();
        let p = Path::new("x");
        let once = ImuSequenceFile::parse(&imu.to_text(), p).unwrap();
        assert_eq!(once.provenance, Provenance::Loose);
        assert_eq!(once.frames.len(), imu.frames.len());
        let twice = ImuSequenceFile::parse(&once.to_text(), p).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.to_text(), imu.to_text());
        let once = PoseSequenceFile::parse(&pose.to_text(), p).unwrap();
        assert_eq!(PoseSequenceFile::parse(&once.to_text(), p).unwrap(), once);
        for (a, b) in once.frames.iter().zip(&pose.frames) {
            assert!((a.root - b.root).norm() < 1e-8);
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let (imu, _) = sample();
        let p = Path::new("bad.imu");
        let text = imu.to_text();
        let short = text.replacen(",0.", ";", 1);
        assert!(matches!(ImuSequenceFile::parse(&short, p), Err(GidError::Parse { .. })));
        let mut lines: Vec<&str> = text.lines().collect();
        let n = lines.len();
        lines.swap(n - 1, n - 2);
        assert!(ImuSequenceFile::parse(&lines.join("\n"), p).is_err());
        assert!(ImuSequenceFile::parse("nope", p).is_err());
        let unnorm = text.replace("provenance=loose", "provenance=soggy");
        assert!(ImuSequenceFile::parse(&unnorm, p).is_err());
    }
}
