//! Evaluation suite: global joint rotation error, root-aligned joint position
//! error, jitter (jerk) and feature-space IMU MAE, plus the paired with/without
//! denoiser report.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GidError, Result};
use crate::gidnet::Gid;
use crate::kinematics::{forward_kinematics, PoseFrame, SequenceWindow, Skeleton};
use crate::posenet::{check_compatible, Predictor};
use crate::rotmath::geodesic_angle_deg;
use crate::trainer::{mae_loss, ClipFeatures};

/// Divisor for the `jitter_scaled` column.
pub const JITTER_SCALE: f64 = 100.0;
pub const MESH_NOT_COMPUTED: &str = "not_computed";

fn check_pair(pred: &[PoseFrame], gt: &[PoseFrame], skel: &Skeleton) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(GidError::InvalidInput(format!(
            "{} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(GidError::InsufficientData("no frames to evaluate".into()));
    }
    let j = skel.len();
    if pred.iter().chain(gt).any(|p| p.theta.len() != j) {
        return Err(GidError::InvalidInput(format!("poses must carry {j} joints")));
    }
    Ok(())
}

/// Mean global rotation error per joint, degrees.
pub fn angular_error_per_joint(pred: &[PoseFrame], gt: &[PoseFrame], skel: &Skeleton) -> Result<Vec<f64>> {
    check_pair(pred, gt, skel)?;
    let mut acc = vec![0.0; skel.len()];
    for (p, g) in pred.iter().zip(gt) {
        let (rp, _) = forward_kinematics(skel, p);
        let (rg, _) = forward_kinematics(skel, g);
        for (a, (x, y)) in acc.iter_mut().zip(rp.iter().zip(&rg)) {
            *a += geodesic_angle_deg(x, y);
        }
    }
    Ok(acc.into_iter().map(|a| a / pred.len() as f64).collect())
}

/// Mean global rotation error over all joints and frames, degrees.
pub fn angular_error(pred: &[PoseFrame], gt: &[PoseFrame], skel: &Skeleton) -> Result<f64> {
    let per = angular_error_per_joint(pred, gt, skel)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn root_aligned(skel: &Skeleton, pose: &PoseFrame) -> Vec<Vector3<f64>> {
    let (_, pos) = forward_kinematics(skel, pose);
    pos.iter().map(|p| p - pos[0]).collect()
}

/// Mean root-aligned joint distance per joint, centimeters.
pub fn positional_error_per_joint(pred: &[PoseFrame], gt: &[PoseFrame], skel: &Skeleton) -> Result<Vec<f64>> {
    check_pair(pred, gt, skel)?;
    let mut acc = vec![0.0; skel.len()];
    for (p, g) in pred.iter().zip(gt) {
        let a = root_aligned(skel, p);
        let b = root_aligned(skel, g);
        for (s, (x, y)) in acc.iter_mut().zip(a.iter().zip(&b)) {
            *s += (x - y).norm() * 100.0;
        }
    }
    Ok(acc.into_iter().map(|a| a / pred.len() as f64).collect())
}

/// Mean root-aligned joint distance over all joints and frames, centimeters.
pub fn positional_error(pred: &[PoseFrame], gt: &[PoseFrame], skel: &Skeleton) -> Result<f64> {
    let per = positional_error_per_joint(pred, gt, skel)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mean jerk magnitude of per-frame point sets sampled at `rate_hz`, using the
/// 4-point third difference `(p[i+2] − 3p[i+1] + 3p[i] − p[i−1]) / h³`.
pub fn jitter_of_positions(frames: &[Vec<Vector3<f64>>], rate_hz: f64) -> Result<f64> {
    if frames.len() < 4 {
        return Err(GidError::InsufficientData(format!(
            "jitter needs at least 4 frames, got {}",
            frames.len()
        )));
    }
    if !(rate_hz > 0.0) {
        return Err(GidError::InvalidInput(format!("rate {rate_hz} Hz")));
    }
    let h3 = (1.0 / rate_hz).powi(3);
    let j = frames[0].len();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 1..frames.len() - 2 {
        for k in 0..j {
            // grouped as differences so a static point gives exactly zero
            let d = (frames[i + 2][k] - frames[i - 1][k]) - 3.0 * (frames[i + 1][k] - frames[i][k]);
            total += d.norm() / h3;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Mean jerk of global joint positions, m/s³.
pub fn jitter(poses: &[PoseFrame], skel: &Skeleton, rate_hz: f64) -> Result<f64> {
    let pos: Vec<Vec<Vector3<f64>>> = poses.iter().map(|p| forward_kinematics(skel, p).1).collect();
    jitter_of_positions(&pos, rate_hz)
}

/// Feature-space MAE; the same computation as the training objective.
pub fn imu_mae(denoised: &SequenceWindow, tight: &SequenceWindow) -> Result<f64> {
    mae_loss(denoised, tight)
}

/// One table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub tag: String,
    pub ang_deg: f64,
    pub pos_cm: f64,
    pub mesh: String,
    pub jitter: f64,
    pub jitter_scaled: f64,
    pub imu_mae: f64,
}

impl MetricRow {
    pub fn new(tag: &str, ang_deg: f64, pos_cm: f64, jitter: f64, imu_mae: f64) -> Self {
        MetricRow {
            tag: tag.to_string(),
            ang_deg,
            pos_cm,
            mesh: MESH_NOT_COMPUTED.to_string(),
            jitter,
            jitter_scaled: jitter / JITTER_SCALE,
            imu_mae,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub joint: String,
    pub ang_with: f64,
    pub ang_without: f64,
    pub pos_with: f64,
    pub pos_without: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub frames: usize,
    pub rows: Vec<MetricRow>,
    pub per_joint: Vec<JointRow>,
}

pub const CSV_HEADER: &str = "tag,ang_deg,pos_cm,mesh,jitter,jitter_scaled,imu_mae";

impl EvalReport {
    pub fn row(&self, tag: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GidError::InvalidInput(format!("report JSON: {e}")))
    }

    /// Summary rows only; full precision so the file parses back exactly.
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>9} {:>8} {:>13} {:>10} {:>9} {:>8}\n",
            "", "ang(deg)", "pos(cm)", "mesh", "jitter", "jit/100", "imu_mae"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>9.2} {:>8.2} {:>13} {:>10.2} {:>9.3} {:>8.3}\n",
                r.tag, r.ang_deg, r.pos_cm, r.mesh, r.jitter, r.jitter_scaled, r.imu_mae
            ));
        }
        if !self.per_joint.is_empty() {
            s.push_str(&format!(
                "\n{:<12} {:>10} {:>10} {:>10} {:>10}\n",
                "joint", "ang w/", "ang w/o", "pos w/", "pos w/o"
            ));
            for j in &self.per_joint {
                s.push_str(&format!(
                    "{:<12} {:>10.2} {:>10.2} {:>10.2} {:>10.2}\n",
                    j.joint, j.ang_with, j.ang_without, j.pos_with, j.pos_without
                ));
            }
        }
        s
    }
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.tag, r.ang_deg, r.pos_cm, r.mesh, r.jitter, r.jitter_scaled, r.imu_mae
        ));
    }
    s
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let path = std::path::Path::new("<report>");
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(GidError::parse(path, 1, format!("expected header {CSV_HEADER}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(GidError::parse(path, i + 2, format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| GidError::parse(path, i + 2, format!("bad number {s:?}")))
            };
            Ok(MetricRow {
                tag: f[0].to_string(),
                ang_deg: num(f[1])?,
                pos_cm: num(f[2])?,
                mesh: f[3].to_string(),
                jitter: num(f[4])?,
                jitter_scaled: num(f[5])?,
                imu_mae: num(f[6])?,
            })
        })
        .collect()
}

/// Per-sequence outputs of one inference path.
struct PathOutput {
    poses: Vec<PoseFrame>,
    imu_mae_sum: f64,
}

/// Frame-weighted metrics over many sequences.
#[derive(Default)]
struct Accum {
    ang: Vec<f64>,
    pos: Vec<f64>,
    jitter: f64,
    imu: f64,
    frames: usize,
}

impl Accum {
    fn add(&mut self, skel: &Skeleton, pred: &[PoseFrame], gt: &[PoseFrame], rate: f64, imu: f64) -> Result<()> {
        let n = pred.len() as f64;
        let ang = angular_error_per_joint(pred, gt, skel)?;
        let pos = positional_error_per_joint(pred, gt, skel)?;
        if self.ang.is_empty() {
            self.ang = vec![0.0; ang.len()];
            self.pos = vec![0.0; pos.len()];
        }
        for (a, v) in self.ang.iter_mut().zip(ang) {
            *a += v * n;
        }
        for (a, v) in self.pos.iter_mut().zip(pos) {
            *a += v * n;
        }
        self.jitter += jitter(pred, skel, rate)? * n;
        self.imu += imu * n;
        self.frames += pred.len();
        Ok(())
    }

    fn per_joint(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.frames.max(1) as f64;
        (
            self.ang.iter().map(|a| a / n).collect(),
            self.pos.iter().map(|a| a / n).collect(),
        )
    }

    fn row(&self, tag: &str) -> MetricRow {
        let n = self.frames.max(1) as f64;
        let (ang, pos) = self.per_joint();
        MetricRow::new(
            tag,
            ang.iter().sum::<f64>() / ang.len().max(1) as f64,
            pos.iter().sum::<f64>() / pos.len().max(1) as f64,
            self.jitter / n,
            self.imu / n,
        )
    }
}

fn run_path(clip: &ClipFeatures, gid: Option<&Gid>, pred: &Predictor, rate: f64) -> Result<PathOutput> {
    let loose = &clip.loose.seq;
    let tight = &clip.tight.seq;
    let (input, imu) = match gid {
        Some(g) => {
            let d = g.denoise_sequence(loose)?;
            let m = imu_mae(&d, tight)?;
            (d, m)
        }
        None => (loose.clone(), imu_mae(loose, tight)?),
    };
    Ok(PathOutput {
        poses: pred.predict_sequence(&input, rate)?,
        imu_mae_sum: imu,
    })
}

/// Evaluates one inference path (denoiser or passthrough, then predictor) over
/// every clip; returns the row and per-joint angular/positional errors.
pub fn evaluate_path(
    tag: &str,
    data: &[ClipFeatures],
    gid: Option<&Gid>,
    pred: &Predictor,
    skel: &Skeleton,
    rate_hz: f64,
) -> Result<(MetricRow, Vec<f64>, Vec<f64>)> {
    if let Some(g) = gid {
        check_compatible(g, pred)?;
    }
    let outs: Vec<PathOutput> = data
        .par_iter()
        .map(|c| run_path(c, gid, pred, rate_hz))
        .collect::<Result<_>>()?;
    let mut acc = Accum::default();
    for (c, o) in data.iter().zip(&outs) {
        acc.add(skel, &o.poses, &c.poses, rate_hz, o.imu_mae_sum)?;
    }
    let (a, p) = acc.per_joint();
    Ok((acc.row(tag), a, p))
}

/// Metrics for the with-denoiser and passthrough paths side by side. `gid = None`
/// makes both paths passthrough, so their columns coincide.
pub fn evaluate(
    data: &[ClipFeatures],
    gid: Option<&Gid>,
    pred: &Predictor,
    skel: &Skeleton,
    rate_hz: f64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(GidError::InsufficientData("empty evaluation set".into()));
    }
    let (with, aw, pw) = evaluate_path("with_gid", data, gid, pred, skel, rate_hz)?;
    let (without, ao, po) = evaluate_path("without_gid", data, None, pred, skel, rate_hz)?;
    let per_joint = skel
        .joints()
        .iter()
        .enumerate()
        .map(|(i, j)| JointRow {
            joint: j.name.clone(),
            ang_with: aw[i],
            ang_without: ao[i],
            pos_with: pw[i],
            pos_without: po[i],
        })
        .collect();
    Ok(EvalReport {
        sequences: data.len(),
        frames: data.iter().map(|c| c.poses.len()).sum(),
        rows: vec![with, without],
        per_joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotmath::{AxisAngle, RotationMatrix};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use std::f64::consts::PI;
    use std::path::Path;

    fn chain2() -> Skeleton {
        Skeleton::parse("0 root -1 0 0 0\n1 wrist 0 0.5 0 0\n", Path::new("chain")).unwrap()
    }

    fn pose(theta: &[[f64; 3]], root: [f64; 3], t: f64) -> PoseFrame {
        PoseFrame {
            t,
            theta: theta.iter().map(|v| AxisAngle::new(v[0], v[1], v[2])).collect(),
            root: Vector3::from(root),
        }
    }

    #[test]
    fn geodesic_quarter_turn() {
        let d = geodesic_angle_deg(&RotationMatrix::identity(), &RotationMatrix::rot_z(PI / 2.0));
        assert!((d - 90.0).abs() < 1e-9);
    }

    #[test]
    fn root_rotation_propagates_to_the_chain() {
        let skel = chain2();
        let gt = vec![pose(&[[0.0, 0.0, 30f64.to_radians()], [0.0; 3]], [0.0; 3], 0.0)];
        let pred = vec![pose(&[[0.0; 3], [0.0; 3]], [0.0; 3], 0.0)];
        let per = angular_error_per_joint(&pred, &gt, &skel).unwrap();
        assert!((per[0] - 30.0).abs() < 1e-9 && (per[1] - 30.0).abs() < 1e-9);
        assert!((angular_error(&pred, &gt, &skel).unwrap() - 30.0).abs() < 1e-9);
        assert_eq!(angular_error(&gt, &gt, &skel).unwrap(), 0.0);
        assert!(angular_error(&pred, &[], &skel).is_err());
    }

    #[test]
    fn hand_chain_positional_error() {
        // rotating the root by φ moves the 0.5 m wrist by 2·0.5·sin(φ/2) = 5 cm
        let skel = chain2();
        let phi = 2.0 * (0.05f64 / (2.0 * 0.5)).asin();
        let gt = vec![pose(&[[0.0, 0.0, phi], [0.0; 3]], [0.3, 1.0, 0.0], 0.0)];
        let pred = vec![pose(&[[0.0; 3], [0.0; 3]], [0.0; 3], 0.0)];
        let e = positional_error(&pred, &gt, &skel).unwrap();
        assert!((e - 2.5).abs() < 1e-9, "{e}");
    }

    #[test]
    fn cubic_and_quadratic_jerk() {
        for rate in [40.0, 60.0, 100.0] {
            let cubic: Vec<Vec<Vector3<f64>>> = (0..20)
                .map(|i| {
                    let t = i as f64 / rate;
                    vec![Vector3::new(t * t * t, 0.0, 0.0)]
                })
                .collect();
            assert!((jitter_of_positions(&cubic, rate).unwrap() - 6.0).abs() < 1e-6);
            let quad: Vec<Vec<Vector3<f64>>> = (0..20)
                .map(|i| {
                    let t = i as f64 / rate;
                    vec![Vector3::new(0.5 * 3.0 * t * t, -0.5 * 9.81 * t * t, 1.0)]
                })
                .collect();
            assert!(jitter_of_positions(&quad, rate).unwrap() < 1e-9);
        }
        let still = vec![pose(&[[0.1, 0.2, 0.3], [0.0; 3]], [1.0, 2.0, 3.0], 0.0); 6];
        assert_eq!(jitter(&still, &chain2(), 40.0).unwrap(), 0.0);
        assert!(jitter(&still[..3], &chain2(), 40.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metric_symmetry_and_rigid_invariance(a in proptest::collection::vec(-1.5f64..1.5, 12), yaw in -3.0f64..3.0) {
            let skel = chain2();
            let p: Vec<PoseFrame> = a.chunks(6).map(|c| pose(&[[c[0], c[1], c[2]], [c[3], c[4], c[5]]], [0.0; 3], 0.0)).collect();
            let g: Vec<PoseFrame> = a.chunks(6).map(|c| pose(&[[c[5], c[3], c[4]], [c[1], c[2], c[0]]], [0.0; 3], 0.0)).collect();
            let ab = angular_error(&p, &g, &skel).unwrap();
            let ba = angular_error(&g, &p, &skel).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9 && ab >= 0.0);
            // a rigid rotation of both poses at the root leaves the position error unchanged
            let rot = |v: &PoseFrame| {
                let r = RotationMatrix::rot_y(yaw) * v.theta[0].to_matrix();
                let mut o = v.clone();
                o.theta[0] = crate::rotmath::matrix_to_axis_angle(&r);
                o
            };
            let pr: Vec<PoseFrame> = p.iter().map(rot).collect();
            let gr: Vec<PoseFrame> = g.iter().map(rot).collect();
            let e0 = positional_error(&p, &g, &skel).unwrap();
            let e1 = positional_error(&pr, &gr, &skel).unwrap();
            prop_assert!((e0 - e1).abs() < 1e-9);
            // joint relabeling of frame order leaves the mean unchanged
            let rp: Vec<PoseFrame> = p.iter().rev().cloned().collect();
            let rg: Vec<PoseFrame> = g.iter().rev().cloned().collect();
            prop_assert!((angular_error(&rp, &rg, &skel).unwrap() - ab).abs() < 1e-9);
        }
    }

    #[test]
    fn report_round_trips() {
        let r = EvalReport {
            sequences: 2,
            frames: 10,
            rows: vec![MetricRow::new("with_gid", 12.345678901234, 4.5, 123.25, 0.0312), MetricRow::new("without_gid", 20.0, 7.0, 99.0, 0.1)],
            per_joint: vec![JointRow {
                joint: "pelvis".into(),
                ang_with: 1.0,
                ang_without: 2.0,
                pos_with: 0.0,
                pos_without: 0.0,
            }],
        };
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(rows_from_csv(&r.to_csv()).unwrap(), r.rows);
        assert!(r.to_csv().starts_with("tag,ang_deg,pos_cm,mesh,jitter,jitter_scaled,imu_mae\nwith_gid,12.345678901234,4.5,not_computed,"));
        assert!(r.to_table().contains("not_computed"));
        assert!(rows_from_csv("bad\n").is_err());
    }
}
