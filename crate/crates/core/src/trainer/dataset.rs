//! Paired tight/loose datasets, provenance tags and windowing.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GidError, Result};
use crate::garmentnoise::{corrupt, NoiseProfiles};
use crate::kinematics::{
    normalize_root_relative, synth_motion, tight_imu_from_motion, ImuFrame, MotionConfig, PoseFrame, SensorLayout,
    SequenceWindow, Skeleton, DEFAULT_RATE_HZ,
};

/// Where an IMU stream came from. Training entry points check these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Tight,
    Loose,
    Denoised,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Tight => "tight",
            Provenance::Loose => "loose",
            Provenance::Denoised => "denoised",
        })
    }
}

impl FromStr for Provenance {
    type Err = GidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tight" => Ok(Provenance::Tight),
            "loose" => Ok(Provenance::Loose),
            "denoised" => Ok(Provenance::Denoised),
            _ => Err(GidError::Provenance {
                expected: "tight|loose|denoised".into(),
                found: s.to_string(),
            }),
        }
    }
}

/// Normalized features with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Tagged {
    pub provenance: Provenance,
    pub seq: SequenceWindow,
}

impl Tagged {
    pub fn require(&self, want: Provenance) -> Result<&SequenceWindow> {
        if self.provenance != want {
            return Err(GidError::Provenance {
                expected: want.to_string(),
                found: self.provenance.to_string(),
            });
        }
        Ok(&self.seq)
    }
}

/// One recorded (or synthesized) take: ground-truth motion and both IMU streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub name: String,
    pub seed: u64,
    pub poses: Vec<PoseFrame>,
    pub tight: Vec<ImuFrame>,
    pub loose: Vec<ImuFrame>,
}

/// A clip in network feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub name: String,
    pub tight: Tagged,
    pub loose: Tagged,
    pub poses: Vec<PoseFrame>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub layout: SensorLayout,
    pub rate_hz: f64,
    pub clips: Vec<Clip>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub minutes: f64,
    /// Clips are synthesized independently, each with its own motion seed.
    pub clip_seconds: f64,
    pub rate_hz: f64,
    pub amplitude_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            minutes: 10.0,
            clip_seconds: 30.0,
            rate_hz: DEFAULT_RATE_HZ,
            amplitude_scale: 1.0,
        }
    }
}

/// Per-clip seeds drawn from the master seed. The top bit is reserved for noise
/// streams so motion and noise seeds never collide.
pub fn clip_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.random::<u64>() >> 1).collect()
}

/// Synthesizes paired tight/loose clips totalling `minutes`.
pub fn generate(skel: &Skeleton, layout: &SensorLayout, profiles: &NoiseProfiles, cfg: &GenConfig) -> Result<Dataset> {
    if !(cfg.minutes > 0.0) || !(cfg.clip_seconds > 0.0) {
        return Err(GidError::Config(format!(
            "need positive duration, got {} min in {} s clips",
            cfg.minutes, cfg.clip_seconds
        )));
    }
    let params = profiles.for_layout(layout)?;
    let total = cfg.minutes * 60.0;
    let n = (total / cfg.clip_seconds).ceil() as usize;
    let clips = clip_seeds(cfg.seed, n)
        .into_iter()
        .enumerate()
        .map(|(i, seed)| {
            let dur = (total - i as f64 * cfg.clip_seconds).min(cfg.clip_seconds);
            let motion = MotionConfig {
                duration_s: dur,
                rate_hz: cfg.rate_hz,
                amplitude_scale: cfg.amplitude_scale,
            };
            let poses = synth_motion(skel, seed, &motion)?;
            let tight = tight_imu_from_motion(skel, layout, &poses)?;
            let loose = corrupt(&tight, &params, seed | 1 << 63)?;
            Ok(Clip {
                name: format!("clip{i:03}"),
                seed,
                poses,
                tight,
                loose,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        skeleton: skel.clone(),
        layout: layout.clone(),
        rate_hz: cfg.rate_hz,
        clips,
    })
}

impl Dataset {
    pub fn seeds(&self) -> BTreeSet<u64> {
        self.clips.iter().map(|c| c.seed).collect()
    }

    pub fn frames(&self) -> usize {
        self.clips.iter().map(|c| c.poses.len()).sum()
    }

    pub fn features(&self) -> Result<Vec<ClipFeatures>> {
        self.clips
            .iter()
            .map(|c| {
                Ok(ClipFeatures {
                    name: c.name.clone(),
                    tight: Tagged {
                        provenance: Provenance::Tight,
                        seq: normalize_root_relative(&c.tight, &self.layout)?,
                    },
                    loose: Tagged {
                        provenance: Provenance::Loose,
                        seq: normalize_root_relative(&c.loose, &self.layout)?,
                    },
                    poses: c.poses.clone(),
                })
            })
            .collect()
    }

    /// Moves the last `ceil(frac · clips)` clips into a validation set.
    pub fn split_validation(mut self, frac: f64) -> Result<(Dataset, Dataset)> {
        let n = self.clips.len();
        let k = ((n as f64 * frac).ceil() as usize).min(n.saturating_sub(1));
        if k == 0 {
            return Err(GidError::InsufficientData(format!(
                "{n} clips cannot be split into training and validation"
            )));
        }
        let val = self.clips.split_off(n - k);
        let mut v = self.clone();
        v.clips = val;
        Ok((self, v))
    }
}

/// Train and test clip seeds; must be disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
}

impl Split {
    pub fn new(train: &Dataset, test: &Dataset) -> Result<Self> {
        let s = Split {
            train: train.seeds(),
            test: test.seeds(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let shared: Vec<_> = self.train.intersection(&self.test).collect();
        if !shared.is_empty() {
            return Err(GidError::Config(format!("train and test share clip seeds {shared:?}")));
        }
        Ok(())
    }
}

/// Window starts at stride T/2; a trailing partial window is dropped.
pub fn window_starts(frames: usize, window: usize) -> Vec<usize> {
    if frames < window {
        return Vec::new();
    }
    (0..=frames - window).step_by((window / 2).max(1)).collect()
}
