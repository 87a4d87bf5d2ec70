//! On-disk dataset directories: a manifest, the skeleton, the noise profiles and
//! one tight IMU, loose IMU and pose file per clip.

use std::fs;
use std::path::Path;

use crate::checkpoint::{kv_get, parse_kv};
use crate::error::{GidError, Result};
use crate::garmentnoise::NoiseProfiles;
use crate::kinematics::{SensorLayout, Skeleton};
use crate::trainer::{Clip, Dataset, GenConfig, Provenance};

use super::files::{ImuSequenceFile, PoseSequenceFile};

pub const MANIFEST: &str = "manifest.txt";
pub const SKELETON: &str = "skeleton.txt";
pub const PROFILES: &str = "profiles.txt";

/// Writes `data` to `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, data: &Dataset, gen: &GenConfig, profiles: &NoiseProfiles) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut m = format!(
        "# gid dataset\nseed={}\nminutes={}\nclip_seconds={}\nrate_hz={}\namplitude_scale={}\nclips={}\n",
        gen.seed,
        gen.minutes,
        gen.clip_seconds,
        data.rate_hz,
        gen.amplitude_scale,
        data.clips.len()
    );
    for c in &data.clips {
        m.push_str(&format!("clip.{}={},{}\n", c.name, c.seed, c.poses.len()));
    }
    fs::write(dir.join(MANIFEST), m)?;
    fs::write(dir.join(SKELETON), data.skeleton.to_text())?;
    fs::write(dir.join(PROFILES), profiles.to_text())?;
    for c in &data.clips {
        ImuSequenceFile::new(&data.layout, data.rate_hz, Provenance::Tight, c.tight.clone())
            .save(&dir.join(format!("{}.tight.imu", c.name)))?;
        ImuSequenceFile::new(&data.layout, data.rate_hz, Provenance::Loose, c.loose.clone())
            .save(&dir.join(format!("{}.loose.imu", c.name)))?;
        PoseSequenceFile::new(data.skeleton.len(), data.rate_hz, SKELETON, c.poses.clone())
            .save(&dir.join(format!("{}.pose", c.name)))?;
    }
    Ok(())
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    if !mpath.is_file() {
        return Err(GidError::InvalidInput(format!("{} is not a dataset directory", dir.display())));
    }
    let kv = parse_kv(&fs::read_to_string(&mpath)?)?;
    let rate_hz: f64 = kv_get(&kv, "rate_hz")?;
    let skeleton = Skeleton::load(&dir.join(SKELETON))?;
    let layout = SensorLayout::default_for(&skeleton)?;
    let mut clips = Vec::new();
    for (k, v) in &kv {
        let Some(name) = k.strip_prefix("clip.") else { continue };
        let seed = v
            .split(',')
            .next()
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| GidError::parse(&mpath, 1, format!("bad clip entry {k}={v}")))?;
        let tight = ImuSequenceFile::load(&dir.join(format!("{name}.tight.imu")))?;
        let loose = ImuSequenceFile::load(&dir.join(format!("{name}.loose.imu")))?;
        let pose = PoseSequenceFile::load(&dir.join(format!("{name}.pose")))?;
        for (f, want) in [(&tight, Provenance::Tight), (&loose, Provenance::Loose)] {
            f.check_layout(&layout)?;
            if f.provenance != want {
                return Err(GidError::Provenance {
                    expected: want.to_string(),
                    found: f.provenance.to_string(),
                });
            }
        }
        if pose.joints != skeleton.len() || tight.frames.len() != pose.frames.len() || loose.frames.len() != pose.frames.len() {
            return Err(GidError::InvalidInput(format!("clip {name}: streams disagree in length or joint count")));
        }
        clips.push(Clip {
            name: name.to_string(),
            seed,
            poses: pose.frames,
            tight: tight.frames,
            loose: loose.frames,
        });
    }
    clips.sort_by(|a, b| a.name.cmp(&b.name));
    let declared: usize = kv_get(&kv, "clips")?;
    if clips.len() != declared {
        return Err(GidError::InvalidInput(format!("manifest declares {declared} clips, lists {}", clips.len())));
    }
    Ok(Dataset {
        skeleton,
        layout,
        rate_hz,
        clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::garmentnoise::default_profiles;
    use crate::trainer::generate;

    #[test]
    fn directory_round_trip() {
        let skel = Skeleton::default_16();
        let layout = SensorLayout::default_for(&skel).unwrap();
        let gen = GenConfig {
            minutes: 0.05,
            clip_seconds: 2.0,
            ..Default::default()
        };
        let data = generate(&skel, &layout, &default_profiles(), &gen).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data, &gen, &default_profiles()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.seeds(), data.seeds());
        assert_eq!(back.frames(), data.frames());
        for (a, b) in back.clips.iter().zip(&data.clips) {
            for (fa, fb) in a.loose.iter().zip(&b.loose) {
                assert!((fa.accel[0] - fb.accel[0]).norm() < 1e-8);
                let d = fa.orientation[0].dot(&fb.orientation[0]).abs();
                assert!(d > 1.0 - 1e-8, "{d}");
            }
        }
        assert!(load_dataset(&dir.path().join("nope")).is_err());
    }
}
