//! Reference pose predictor: normalized tight-wear IMU windows to per-frame joint
//! rotations. A small temporal transformer over the concatenated sensor channels.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{kv_get, kv_text, parse_kv, Checkpoint};
use crate::error::{GidError, Result};
use crate::gidnet::{tent, window_starts, Gid, INFER_BATCH};
use crate::kinematics::{forward_kinematics, PoseFrame, SequenceWindow, Skeleton, CHANNELS};
use crate::numerics::nn::{Block, Init, LayerNorm, Linear, SeqAxis};
use crate::numerics::{Bound, Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use crate::rotmath::{AxisAngle, UnitQuaternion};

pub const POSE_MAGIC: [u8; 4] = *b"POSC";
/// Weight of the forward-kinematics position term (meters, L1) in the loss.
pub const POSITION_WEIGHT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseNetConfig {
    pub window: usize,
    pub sensors: usize,
    pub channels: usize,
    pub joints: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig {
            window: 64,
            sensors: 6,
            channels: CHANNELS,
            joints: 16,
            model_dim: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 128,
        }
    }
}

impl PoseNetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GidError::Config(m));
        if self.window < 8 {
            return fail(format!("window {} shorter than 8 frames", self.window));
        }
        if self.sensors == 0 || self.channels != CHANNELS || self.joints == 0 {
            return fail(format!(
                "need sensors, {CHANNELS} channels and joints, got {}×{} → {}",
                self.sensors, self.channels, self.joints
            ));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.layers == 0 || self.ffn_hidden == 0 {
            return fail("predictor needs at least one layer".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        kv_text(&[
            ("window", self.window.to_string()),
            ("sensors", self.sensors.to_string()),
            ("channels", self.channels.to_string()),
            ("joints", self.joints.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
        ])
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let cfg = PoseNetConfig {
            window: kv_get(&kv, "window")?,
            sensors: kv_get(&kv, "sensors")?,
            channels: kv_get(&kv, "channels")?,
            joints: kv_get(&kv, "joints")?,
            model_dim: kv_get(&kv, "model_dim")?,
            layers: kv_get(&kv, "layers")?,
            heads: kv_get(&kv, "heads")?,
            ffn_hidden: kv_get(&kv, "ffn_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Layer structure of the predictor.
#[derive(Clone, Debug)]
pub struct PoseNet {
    cfg: PoseNetConfig,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
    head: Linear,
}

impl PoseNet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(cfg: &PoseNetConfig, ps: &mut ParamSet<S>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let embed = Linear::new(ps, "pose.embed", cfg.sensors * cfg.channels, d, Init::Xavier, rng);
        let pos = ps.push("pose.pos", Tensor::randn(&[cfg.window, 1, d], 0.02, rng));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(ps, &format!("pose.block{i}"), SeqAxis::Time, d, cfg.heads, cfg.ffn_hidden, rng))
            .collect::<Result<_>>()?;
        Ok(PoseNet {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
            ln: LayerNorm::new(ps, "pose.ln", d),
            head: Linear::new(ps, "pose.head", d, cfg.joints * 3, Init::Xavier, rng),
        })
    }

    pub fn config(&self) -> &PoseNetConfig {
        &self.cfg
    }

    /// `[B, T, M, C]` → axis-angle `[B, T, J, 3]` (not wrapped; see [`Predictor`]).
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        let c = &self.cfg;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != c.window || s[2] != c.sensors || s[3] != c.channels {
            let want = [s.first().copied().unwrap_or(0), c.window, c.sensors, c.channels];
            return Err(GidError::shape("predictor_forward", &s, &want));
        }
        let b = s[0];
        let h = g.reshape(x, &[b, c.window, 1, c.sensors * c.channels])?;
        let h = self.embed.forward(g, p, h)?;
        let pos = g.expand(p[self.pos], &[b, c.window, 1, c.model_dim])?;
        let mut h = g.add(h, pos)?;
        for blk in &self.blocks {
            h = blk.forward(g, p, h, causal)?;
        }
        let h = self.ln.forward(g, p, h)?;
        let out = self.head.forward(g, p, h)?;
        g.reshape(out, &[b, c.window, c.joints, 3])
    }

    /// Geodesic loss on FK global rotations plus [`POSITION_WEIGHT`] × L1 on
    /// root-aligned joint positions. `target` is `[B, T, J, 12]` as produced by
    /// [`fk_targets`].
    pub fn loss<S: Scalar>(&self, g: &mut Graph<S>, pred: Var, target: &Tensor<S>, skel: &Skeleton) -> Result<Var> {
        let rot = g.axis_angle_to_matrix(pred)?;
        let fk = g.forward_kinematics(rot, &skel.parents(), &skel.offsets())?;
        let shape = g.shape(fk).to_vec();
        if target.shape() != shape.as_slice() {
            return Err(GidError::shape("pose_loss", target.shape(), &shape));
        }
        let r = g.slice(fk, 3, 0, 9)?;
        let p = g.slice(fk, 3, 9, 3)?;
        let (rt, pt) = split_targets(target)?;
        let geo = g.geodesic_loss(r, rt)?;
        let pt = g.constant(pt);
        let pos = g.mae(p, pt)?;
        let pos = g.scale(pos, S::lit(POSITION_WEIGHT));
        g.add(geo, pos)
    }
}

fn split_targets<S: Scalar>(target: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut rs = target.shape().to_vec();
    let mut ps = rs.clone();
    *rs.last_mut().expect("rank ≥ 1") = 9;
    *ps.last_mut().expect("rank ≥ 1") = 3;
    let mut r = Vec::with_capacity(target.len() / 12 * 9);
    let mut p = Vec::with_capacity(target.len() / 12 * 3);
    for row in target.data().chunks(12) {
        r.extend_from_slice(&row[..9]);
        p.extend_from_slice(&row[9..]);
    }
    Ok((Tensor::new(&rs, r)?, Tensor::new(&ps, p)?))
}

/// Per-frame FK targets: `J × 12` values (global rotation row-major, then the
/// joint position relative to the root joint).
pub fn fk_targets(skel: &Skeleton, poses: &[PoseFrame]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len() * skel.len() * 12);
    for pose in poses {
        let (rots, pos) = forward_kinematics(skel, pose);
        for (r, p) in rots.iter().zip(&pos) {
            out.extend_from_slice(&r.to_row_major());
            let rel = p - pos[0];
            out.extend_from_slice(&[rel.x, rel.y, rel.z]);
        }
    }
    out
}

/// A predictor together with its 32-bit weights.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub net: PoseNet,
    pub params: ParamSet<f32>,
}

impl Predictor {
    pub fn new(cfg: &PoseNetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = PoseNet::new(cfg, &mut params, &mut rng)?;
        Ok(Predictor { net, params })
    }

    pub fn config(&self) -> &PoseNetConfig {
        self.net.config()
    }

    pub fn forward_windows(&self, x: &Tensor<f32>, causal: bool) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = self.net.forward(&mut g, &p, xv, causal)?;
        Ok(g.value(y).clone())
    }

    fn run_batched(&self, windows: &[Vec<f32>], causal: bool) -> Result<Vec<Vec<f32>>> {
        let c = self.config();
        let per = c.window * c.joints * 3;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFER_BATCH) {
            let data: Vec<f32> = chunk.iter().flatten().copied().collect();
            let x = Tensor::new(&[chunk.len(), c.window, c.sensors, c.channels], data)?;
            out.extend(self.forward_windows(&x, causal)?.data().chunks(per).map(|c| c.to_vec()));
        }
        Ok(out)
    }

    fn check_sequence(&self, seq: &SequenceWindow) -> Result<()> {
        if seq.sensors != self.config().sensors {
            return Err(GidError::Config(format!(
                "sequence has {} sensors, predictor expects {}",
                seq.sensors,
                self.config().sensors
            )));
        }
        Ok(())
    }

    /// Offline prediction over a whole normalized sequence. Overlapping windows
    /// (stride T/2) are blended per joint with tent-weighted quaternion averaging.
    pub fn predict_sequence(&self, seq: &SequenceWindow, rate_hz: f64) -> Result<Vec<PoseFrame>> {
        self.check_sequence(seq)?;
        if seq.frames == 0 {
            return Ok(Vec::new());
        }
        let c = self.config();
        let (t, j) = (c.window, c.joints);
        let row = seq.sensors * CHANNELS;
        let n = seq.frames.max(t);
        let frame = |i: usize| {
            let i = i.min(seq.frames - 1);
            &seq.data[i * row..(i + 1) * row]
        };
        let starts = window_starts(n, t);
        let windows: Vec<Vec<f32>> = starts
            .iter()
            .map(|&s| (s..s + t).flat_map(|i| frame(i).iter().map(|&v| v as f32)).collect())
            .collect();
        let outs = self.run_batched(&windows, false)?;
        // per frame and joint: weighted quaternion sum, signs aligned to the first
        let mut acc = vec![[0.0f64; 4]; n * j];
        for (&s, y) in starts.iter().zip(&outs) {
            for i in 0..t {
                let w = tent(i, t);
                for k in 0..j {
                    let o = (i * j + k) * 3;
                    let q = aa_quat(y[o], y[o + 1], y[o + 2]).to_array();
                    let a = &mut acc[(s + i) * j + k];
                    let sign = if a.iter().zip(&q).map(|(x, y)| x * y).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
                    for (x, y) in a.iter_mut().zip(q) {
                        *x += sign * w * y;
                    }
                }
            }
        }
        Ok((0..seq.frames)
            .map(|i| PoseFrame {
                t: i as f64 / rate_hz,
                theta: acc[i * j..(i + 1) * j]
                    .iter()
                    .map(|a| {
                        UnitQuaternion::new(a[0], a[1], a[2], a[3])
                            .map(|q| q.to_axis_angle())
                            .unwrap_or_else(|_| AxisAngle::zero())
                    })
                    .collect(),
                root: Vector3::zeros(),
            })
            .collect())
    }

    /// Causal reference for streaming: frame `i` comes from the causal window ending
    /// at `i`, front-padded with frame 0.
    pub fn predict_causal(&self, seq: &SequenceWindow, rate_hz: f64) -> Result<Vec<PoseFrame>> {
        self.check_sequence(seq)?;
        let c = self.config();
        let row = seq.sensors * CHANNELS;
        let mut out = Vec::with_capacity(seq.frames);
        let idx: Vec<usize> = (0..seq.frames).collect();
        for chunk in idx.chunks(INFER_BATCH) {
            let windows: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&i| {
                    (0..c.window)
                        .flat_map(|k| {
                            let src = (i + k + 1).saturating_sub(c.window);
                            seq.data[src * row..(src + 1) * row].iter().map(|&v| v as f32)
                        })
                        .collect()
                })
                .collect();
            for (y, &i) in self.run_batched(&windows, true)?.iter().zip(chunk) {
                out.push(last_frame_pose(y, c, i as f64 / rate_hz));
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, metadata: &str) -> Checkpoint {
        Checkpoint {
            magic: POSE_MAGIC,
            config: self.config().to_text(),
            metadata: metadata.to_string(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.magic != POSE_MAGIC {
            return Err(GidError::Checkpoint("not a predictor checkpoint".into()));
        }
        let cfg = PoseNetConfig::from_text(&ck.config)?;
        let fresh = Predictor::new(&cfg, 0)?;
        ck.check_layout(&fresh.params)?;
        Ok(Predictor {
            net: fresh.net,
            params: ck.params.clone(),
        })
    }
}

fn aa_quat(x: f32, y: f32, z: f32) -> UnitQuaternion {
    AxisAngle::new(x as f64, y as f64, z as f64).to_quat()
}

fn last_frame_pose(y: &[f32], c: &PoseNetConfig, t: f64) -> PoseFrame {
    let o = (c.window - 1) * c.joints * 3;
    PoseFrame {
        t,
        theta: y[o..o + c.joints * 3]
            .chunks(3)
            .map(|v| aa_quat(v[0], v[1], v[2]).to_axis_angle())
            .collect(),
        root: Vector3::zeros(),
    }
}

/// `predictor(gid(loose))` on a normalized sequence; `gid = None` is the passthrough
/// baseline. Normalize, then denoise, then predict is the only supported order.
pub fn pipeline_predict(loose: &SequenceWindow, gid: Option<&Gid>, pred: &Predictor, rate_hz: f64) -> Result<Vec<PoseFrame>> {
    match gid {
        None => pred.predict_sequence(loose, rate_hz),
        Some(gid) => {
            check_compatible(gid, pred)?;
            pred.predict_sequence(&gid.denoise_sequence(loose)?, rate_hz)
        }
    }
}

pub fn check_compatible(gid: &Gid, pred: &Predictor) -> Result<()> {
    let (a, b) = (gid.config(), pred.config());
    if a.window != b.window || a.sensors != b.sensors || a.channels != b.channels {
        return Err(GidError::Config(format!(
            "denoiser (T={}, M={}, C={}) and predictor (T={}, M={}, C={}) disagree",
            a.window, a.sensors, a.channels, b.window, b.sensors, b.channels
        )));
    }
    Ok(())
}

/// Frame-by-frame causal denoise-then-predict.
pub struct StreamingPipeline<'a> {
    gid: Option<crate::gidnet::StreamingDenoiser<'a>>,
    pred: &'a Predictor,
    buf: VecDeque<Vec<f32>>,
    frames: usize,
    rate_hz: f64,
}

impl<'a> StreamingPipeline<'a> {
    pub fn new(gid: Option<&'a Gid>, pred: &'a Predictor, rate_hz: f64) -> Result<Self> {
        if let Some(g) = gid {
            check_compatible(g, pred)?;
        }
        Ok(StreamingPipeline {
            gid: gid.map(crate::gidnet::StreamingDenoiser::new),
            pred,
            buf: VecDeque::with_capacity(pred.config().window),
            frames: 0,
            rate_hz,
        })
    }

    /// Feeds one normalized loose frame; returns the denoised frame and the pose.
    pub fn push(&mut self, frame: &[f64]) -> Result<(Vec<f64>, PoseFrame)> {
        let den = match &mut self.gid {
            Some(s) => s.push(frame)?,
            None => frame.to_vec(),
        };
        let c = self.pred.config();
        let row = c.sensors * c.channels;
        if den.len() != row {
            return Err(GidError::shape("stream.push", &[den.len()], &[row]));
        }
        let f: Vec<f32> = den.iter().map(|&v| v as f32).collect();
        if self.buf.is_empty() {
            self.buf.extend(std::iter::repeat_n(f, c.window));
        } else {
            self.buf.pop_front();
            self.buf.push_back(f);
        }
        let data: Vec<f32> = self.buf.iter().flatten().copied().collect();
        let x = Tensor::new(&[1, c.window, c.sensors, c.channels], data)?;
        let y = self.pred.forward_windows(&x, true)?;
        let pose = last_frame_pose(y.data(), c, self.frames as f64 / self.rate_hz);
        self.frames += 1;
        Ok((den, pose))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gidnet::GidConfig;
    use crate::numerics::gradcheck::{check, TOL_COMPOSITE};

    fn tiny() -> PoseNetConfig {
        PoseNetConfig {
            window: 8,
            sensors: 2,
            joints: 4,
            model_dim: 8,
            layers: 1,
            heads: 2,
            ffn_hidden: 12,
            ..Default::default()
        }
    }

    fn chain4() -> Skeleton {
        Skeleton::parse("0 a -1 0 0 0\n1 b 0 0 0.3 0\n2 c 1 0.2 0 0\n3 d 0 0 -0.4 0\n", std::path::Path::new("chain")).unwrap()
    }

    #[test]
    fn config_round_trip_and_shapes() {
        let c = PoseNetConfig::default();
        assert_eq!(PoseNetConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(PoseNetConfig { heads: 5, ..c }.validate().is_err());
        let p = Predictor::new(&tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[3, 8, 2, 12], 1.0, &mut rng);
        let y = p.forward_windows(&x, false).unwrap();
        assert_eq!(y.shape(), &[3, 8, 4, 3]);
        assert_eq!(y, p.forward_windows(&x, false).unwrap());
        assert!(p.forward_windows(&Tensor::zeros(&[1, 7, 2, 12]), false).is_err());
    }

    #[test]
    fn loss_gradients() {
        let skel = chain4();
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::<f64>::new();
        let net = PoseNet::new(&cfg, &mut ps, &mut rng).unwrap();
        let poses: Vec<PoseFrame> = (0..8)
            .map(|i| PoseFrame {
                t: i as f64,
                theta: (0..4).map(|k| AxisAngle::new(0.1 * k as f64, 0.2, -0.05 * i as f64)).collect(),
                root: Vector3::zeros(),
            })
            .collect();
        let target = Tensor::from_f64(&[1, 8, 4, 12], &fk_targets(&skel, &poses)).unwrap();
        let mut inputs = vec![Tensor::randn(&[1, 8, 2, 12], 1.0, &mut rng)];
        inputs.extend(ps.tensors().iter().cloned());
        let r = check("posenet", &inputs, 40, TOL_COMPOSITE, 3, |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = net.forward(g, &p, v[0], true)?;
            net.loss(g, y, &target, &skel)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn loss_is_zero_on_exact_prediction() {
        let skel = chain4();
        let theta: Vec<f64> = vec![0.1, 0.2, 0.3, -0.4, 0.0, 0.2, 0.0, 0.0, 0.0, 0.5, -0.1, 0.0];
        let pose = PoseFrame {
            t: 0.0,
            theta: theta.chunks(3).map(|v| AxisAngle::new(v[0], v[1], v[2])).collect(),
            root: Vector3::new(1.0, 2.0, 3.0),
        };
        let target = Tensor::from_f64(&[1, 1, 4, 12], &fk_targets(&skel, &[pose])).unwrap();
        let net = PoseNet::new(&tiny(), &mut ParamSet::<f64>::new(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::from_f64(&[1, 1, 4, 3], &theta).unwrap());
        let l = net.loss(&mut g, pred, &target, &skel).unwrap();
        let v = g.value(l).data()[0];
        // the smoothed geodesic bottoms out at sqrt(GEODESIC_EPS)
        assert!(v.abs() < 2e-5, "{v}");
    }

    #[test]
    fn passthrough_pipeline_equals_predictor() {
        let p = Predictor::new(&tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = SequenceWindow {
            frames: 21,
            sensors: 2,
            data: (0..21 * 24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let direct = p.predict_sequence(&seq, 40.0).unwrap();
        assert_eq!(pipeline_predict(&seq, None, &p, 40.0).unwrap(), direct);
        let gid = Gid::new(&GidConfig { window: 8, sensors: 2, model_dim: 8, heads: 2, refine_dim: 4, ..Default::default() }, 1).unwrap();
        let with = pipeline_predict(&seq, Some(&gid), &p, 40.0).unwrap();
        for (a, b) in with.iter().zip(&direct) {
            for (x, y) in a.theta.iter().zip(&b.theta) {
                assert!((x.vector() - y.vector()).norm() < 1e-5);
            }
        }
        let wrong = Gid::new(&GidConfig { window: 16, sensors: 2, model_dim: 8, heads: 2, refine_dim: 4, ..Default::default() }, 1).unwrap();
        assert!(matches!(pipeline_predict(&seq, Some(&wrong), &p, 40.0), Err(GidError::Config(_))));
    }

    #[test]
    fn streaming_matches_causal_reference() {
        let p = Predictor::new(&tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = SequenceWindow {
            frames: 20,
            sensors: 2,
            data: (0..20 * 24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let reference = p.predict_causal(&seq, 40.0).unwrap();
        let mut s = StreamingPipeline::new(None, &p, 40.0).unwrap();
        for (i, r) in reference.iter().enumerate() {
            let (_, pose) = s.push(&seq.data[i * 24..(i + 1) * 24]).unwrap();
            for (a, b) in pose.theta.iter().zip(&r.theta) {
                assert!((a.vector() - b.vector()).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = Predictor::new(&tiny(), 7).unwrap();
        let ck = Checkpoint::from_bytes(&p.to_checkpoint("").to_bytes(), POSE_MAGIC).unwrap();
        assert_eq!(Predictor::from_checkpoint(&ck).unwrap().params, p.params);
        assert!(Checkpoint::from_bytes(&p.to_checkpoint("").to_bytes(), crate::gidnet::GID_MAGIC).is_err());
    }
}
