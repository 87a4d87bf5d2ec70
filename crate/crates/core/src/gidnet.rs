//! Garment inertial denoiser: a temporal-spatial transformer backbone, one expert
//! head per sensor site, a learned blend with the raw loose input, and a small
//! refinement transformer.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{kv_get, kv_text, parse_kv, Checkpoint};
use crate::error::{GidError, Result};
use crate::kinematics::{SequenceWindow, CHANNELS};
use crate::numerics::nn::{Block, GroupedLinear, Init, LayerNorm, Linear, SeqAxis};
use crate::numerics::{Bound, Graph, ParamId, ParamSet, Scalar, Tensor, Var};

pub const GID_MAGIC: [u8; 4] = *b"GIDC";
/// Windows per forward pass during batched inference.
pub const INFER_BATCH: usize = 16;
const EMBED_STD: f64 = 0.02;

/// How many blend weights the fusion stage learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Scalar,
    PerSensor,
    PerChannel,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Scalar => "scalar",
            Fusion::PerSensor => "per-sensor",
            Fusion::PerChannel => "per-channel",
        })
    }
}

impl FromStr for Fusion {
    type Err = GidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Fusion::Scalar),
            "per-sensor" => Ok(Fusion::PerSensor),
            "per-channel" => Ok(Fusion::PerChannel),
            _ => Err(GidError::Config(format!("unknown fusion granularity {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GidConfig {
    /// Frames per window (T).
    pub window: usize,
    /// Sensors (M).
    pub sensors: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub temporal_blocks: usize,
    pub spatial_blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub expert_hidden: usize,
    /// Temporal+spatial block pairs in the refinement stage; 0 removes it.
    pub refine_blocks: usize,
    pub refine_dim: usize,
    pub fusion: Fusion,
    /// One backbone for all experts, or one backbone per sensor.
    pub shared_backbone: bool,
    /// Per-sensor expert heads; `false` uses one head shared by every sensor.
    pub location_experts: bool,
    /// Learned blend with the loose input; `false` passes the expert output through.
    pub adaptive_fusion: bool,
}

impl Default for GidConfig {
    fn default() -> Self {
        GidConfig {
            window: 64,
            sensors: 6,
            channels: CHANNELS,
            model_dim: 64,
            temporal_blocks: 2,
            spatial_blocks: 1,
            heads: 4,
            ffn_hidden: 128,
            expert_hidden: 128,
            refine_blocks: 1,
            refine_dim: 32,
            fusion: Fusion::PerSensor,
            shared_backbone: true,
            location_experts: true,
            adaptive_fusion: true,
        }
    }
}

impl GidConfig {
    /// Ablation variants: `full`, `no_lsd` (shared head), `no_acf` (no blend).
    pub fn variant(mut self, name: &str) -> Result<Self> {
        match name {
            "full" => {}
            "no_lsd" => self.location_experts = false,
            "no_acf" => self.adaptive_fusion = false,
            _ => return Err(GidError::Config(format!("unknown denoiser variant {name:?}"))),
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GidError::Config(m));
        if self.window < 8 {
            return fail(format!("window {} shorter than 8 frames", self.window));
        }
        if self.sensors == 0 || self.channels != CHANNELS {
            return fail(format!(
                "need at least one sensor with {CHANNELS} channels, got {}×{}",
                self.sensors, self.channels
            ));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.refine_blocks > 0 && self.refine_dim % self.heads != 0 {
            return fail(format!("refine_dim {} not divisible by {} heads", self.refine_dim, self.heads));
        }
        if self.temporal_blocks + self.spatial_blocks == 0 {
            return fail("backbone needs at least one block".into());
        }
        if [self.model_dim, self.ffn_hidden, self.expert_hidden].contains(&0) {
            return fail("zero-width layer".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        kv_text(&[
            ("window", self.window.to_string()),
            ("sensors", self.sensors.to_string()),
            ("channels", self.channels.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("temporal_blocks", self.temporal_blocks.to_string()),
            ("spatial_blocks", self.spatial_blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("expert_hidden", self.expert_hidden.to_string()),
            ("refine_blocks", self.refine_blocks.to_string()),
            ("refine_dim", self.refine_dim.to_string()),
            ("fusion", self.fusion.to_string()),
            ("shared_backbone", self.shared_backbone.to_string()),
            ("location_experts", self.location_experts.to_string()),
            ("adaptive_fusion", self.adaptive_fusion.to_string()),
        ])
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let cfg = GidConfig {
            window: kv_get(&kv, "window")?,
            sensors: kv_get(&kv, "sensors")?,
            channels: kv_get(&kv, "channels")?,
            model_dim: kv_get(&kv, "model_dim")?,
            temporal_blocks: kv_get(&kv, "temporal_blocks")?,
            spatial_blocks: kv_get(&kv, "spatial_blocks")?,
            heads: kv_get(&kv, "heads")?,
            ffn_hidden: kv_get(&kv, "ffn_hidden")?,
            expert_hidden: kv_get(&kv, "expert_hidden")?,
            refine_blocks: kv_get(&kv, "refine_blocks")?,
            refine_dim: kv_get(&kv, "refine_dim")?,
            fusion: kv_get::<String>(&kv, "fusion")?.parse()?,
            shared_backbone: kv_get(&kv, "shared_backbone")?,
            location_experts: kv_get(&kv, "location_experts")?,
            adaptive_fusion: kv_get(&kv, "adaptive_fusion")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Backbone block order: temporal first, alternating while both kinds remain.
    pub fn block_axes(&self) -> Vec<SeqAxis> {
        let (mut t, mut s) = (self.temporal_blocks, self.spatial_blocks);
        let mut out = Vec::with_capacity(t + s);
        let mut next_time = true;
        while t + s > 0 {
            if (next_time && t > 0) || s == 0 {
                out.push(SeqAxis::Time);
                t -= 1;
            } else {
                out.push(SeqAxis::Sensor);
                s -= 1;
            }
            next_time = !next_time;
        }
        out
    }
}

/// Token embedding with learned time-position and sensor-identity terms.
#[derive(Clone, Debug)]
struct Embedding {
    proj: Linear,
    pos: ParamId,
    sensor: ParamId,
}

impl Embedding {
    fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<S>, name: &str, cfg: &GidConfig, dim: usize, rng: &mut R) -> Self {
        Embedding {
            proj: Linear::new(ps, &format!("{name}.proj"), cfg.channels, dim, Init::Xavier, rng),
            pos: ps.push(format!("{name}.pos"), Tensor::randn(&[cfg.window, 1, dim], EMBED_STD, rng)),
            sensor: ps.push(format!("{name}.sensor"), Tensor::randn(&[cfg.sensors, dim], EMBED_STD, rng)),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.proj.forward(g, p, x)?;
        let shape = g.shape(h).to_vec();
        let pos = g.expand(p[self.pos], &shape)?;
        let sen = g.expand(p[self.sensor], &shape)?;
        let h = g.add(h, pos)?;
        g.add(h, sen)
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    embed: Embedding,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

impl Backbone {
    fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<S>, name: &str, cfg: &GidConfig, rng: &mut R) -> Result<Self> {
        let embed = Embedding::new(ps, &format!("{name}.embed"), cfg, cfg.model_dim, rng);
        let blocks = cfg
            .block_axes()
            .into_iter()
            .enumerate()
            .map(|(i, axis)| Block::new(ps, &format!("{name}.block{i}"), axis, cfg.model_dim, cfg.heads, cfg.ffn_hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Backbone {
            embed,
            blocks,
            ln: LayerNorm::new(ps, &format!("{name}.ln"), cfg.model_dim),
        })
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        let mut h = self.embed.forward(g, p, x)?;
        for b in &self.blocks {
            h = b.forward(g, p, h, causal)?;
        }
        self.ln.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
enum Experts {
    PerSensor { up: GroupedLinear, down: GroupedLinear },
    Shared { up: Linear, down: Linear },
}

#[derive(Clone, Debug)]
struct Refine {
    embed: Embedding,
    blocks: Vec<Block>,
    ln: LayerNorm,
    out: Linear,
}

/// Layer structure of the denoiser; the weights live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct GidNet {
    cfg: GidConfig,
    backbones: Vec<Backbone>,
    experts: Experts,
    fusion: Option<ParamId>,
    refine: Option<Refine>,
}

impl GidNet {
    /// Registers parameters in `ps`. Every residual output layer starts at zero and
    /// the fusion logits at 0, so a fresh network is the identity map.
    pub fn new<S: Scalar, R: Rng + ?Sized>(cfg: &GidConfig, ps: &mut ParamSet<S>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let n_backbones = if cfg.shared_backbone { 1 } else { cfg.sensors };
        let backbones = (0..n_backbones)
            .map(|i| {
                let name = if cfg.shared_backbone { "backbone".to_string() } else { format!("backbone{i}") };
                Backbone::new(ps, &name, cfg, rng)
            })
            .collect::<Result<_>>()?;
        let (d, hd, c, m) = (cfg.model_dim, cfg.expert_hidden, cfg.channels, cfg.sensors);
        let experts = if cfg.location_experts {
            Experts::PerSensor {
                up: GroupedLinear::new(ps, "experts.up", m, d, hd, Init::Xavier, rng),
                down: GroupedLinear::new(ps, "experts.down", m, hd, c, Init::Zero, rng),
            }
        } else {
            Experts::Shared {
                up: Linear::new(ps, "experts.up", d, hd, Init::Xavier, rng),
                down: Linear::new(ps, "experts.down", hd, c, Init::Zero, rng),
            }
        };
        let fusion = cfg.adaptive_fusion.then(|| {
            let shape: &[usize] = match cfg.fusion {
                Fusion::Scalar => &[1],
                Fusion::PerSensor => &[m, 1],
                Fusion::PerChannel => &[m, c],
            };
            ps.push("fusion.a", Tensor::zeros(shape))
        });
        let refine = if cfg.refine_blocks > 0 {
            let dr = cfg.refine_dim;
            let embed = Embedding::new(ps, "refine.embed", cfg, dr, rng);
            let mut blocks = Vec::new();
            for i in 0..cfg.refine_blocks {
                for (j, axis) in [SeqAxis::Time, SeqAxis::Sensor].into_iter().enumerate() {
                    blocks.push(Block::new(ps, &format!("refine.block{}", 2 * i + j), axis, dr, cfg.heads, 2 * dr, rng)?);
                }
            }
            Some(Refine {
                embed,
                blocks,
                ln: LayerNorm::new(ps, "refine.ln", dr),
                out: Linear::new(ps, "refine.out", dr, c, Init::Zero, rng),
            })
        } else {
            None
        };
        Ok(GidNet {
            cfg: cfg.clone(),
            backbones,
            experts,
            fusion,
            refine,
        })
    }

    pub fn config(&self) -> &GidConfig {
        &self.cfg
    }

    fn check_input<S: Scalar>(&self, g: &Graph<S>, x: Var) -> Result<()> {
        let s = g.shape(x);
        let want = [s.first().copied().unwrap_or(0), self.cfg.window, self.cfg.sensors, self.cfg.channels];
        if s.len() != 4 || s[1..] != want[1..] {
            return Err(GidError::shape("gid_forward", s, &want));
        }
        Ok(())
    }

    /// `[B, T, M, C]` → features `[B, T, M, d]`. With per-sensor backbones, sensor `m`
    /// takes its features from backbone `m`.
    pub fn backbone_forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        self.check_input(g, x)?;
        if self.backbones.len() == 1 {
            return self.backbones[0].forward(g, p, x, causal);
        }
        let mut parts = Vec::with_capacity(self.backbones.len());
        for (m, b) in self.backbones.iter().enumerate() {
            let f = b.forward(g, p, x, causal)?;
            parts.push(g.slice(f, 2, m, 1)?);
        }
        g.concat(&parts, 2)
    }

    /// Residual denoising per sensor: `x + head_m(features_m)`.
    pub fn experts_forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, feat: Var, x: Var) -> Result<Var> {
        let r = match &self.experts {
            Experts::PerSensor { up, down } => {
                let h = up.forward(g, p, feat)?;
                let h = g.gelu(h);
                down.forward(g, p, h)?
            }
            Experts::Shared { up, down } => {
                let h = up.forward(g, p, feat)?;
                let h = g.gelu(h);
                down.forward(g, p, h)?
            }
        };
        g.add(x, r)
    }

    /// `loose + α ⊙ (denoised − loose)` with `α = sigmoid(a)` broadcast per granularity.
    pub fn fuse<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, denoised: Var, loose: Var) -> Result<Var> {
        let Some(a) = self.fusion else {
            return Ok(denoised);
        };
        let shape = g.shape(loose).to_vec();
        let alpha = g.sigmoid(p[a]);
        let alpha = g.expand(alpha, &shape)?;
        let diff = g.sub(denoised, loose)?;
        let step = g.mul(alpha, diff)?;
        g.add(loose, step)
    }

    pub fn refine_forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, fused: Var, causal: bool) -> Result<Var> {
        let Some(r) = &self.refine else {
            return Ok(fused);
        };
        let mut h = r.embed.forward(g, p, fused)?;
        for b in &r.blocks {
            h = b.forward(g, p, h, causal)?;
        }
        let h = r.ln.forward(g, p, h)?;
        let delta = r.out.forward(g, p, h)?;
        g.add(fused, delta)
    }

    /// Full denoiser on normalized loose windows `[B, T, M, C]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        let feat = self.backbone_forward(g, p, x, causal)?;
        let den = self.experts_forward(g, p, feat, x)?;
        let fused = self.fuse(g, p, den, x)?;
        self.refine_forward(g, p, fused, causal)
    }

    /// Current blend weights α, flattened in parameter order.
    pub fn alpha<S: Scalar>(&self, ps: &ParamSet<S>) -> Vec<f64> {
        match self.fusion {
            Some(a) => ps.get(a).data().iter().map(|v| 1.0 / (1.0 + (-v.as_f64()).exp())).collect(),
            None => Vec::new(),
        }
    }

    /// Parameter ids of sensor `m`'s expert head (slices `m` of each tensor).
    pub fn expert_params(&self, m: usize) -> Result<Vec<ParamId>> {
        if m >= self.cfg.sensors {
            return Err(GidError::Config(format!("unknown sensor id {m}")));
        }
        Ok(match &self.experts {
            Experts::PerSensor { up, down } => vec![up.w, up.b, down.w, down.b],
            Experts::Shared { up, down } => vec![up.w, up.b, down.w, down.b],
        })
    }
}

/// Window start frames at stride T/2 covering `n ≥ t` frames; the last window is
/// aligned to the end.
pub(crate) fn window_starts(n: usize, t: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=n - t).step_by((t / 2).max(1)).collect();
    if *starts.last().expect("n >= t") != n - t {
        starts.push(n - t);
    }
    starts
}

/// Triangular cross-fade weight of frame `i` inside a window of `t` frames.
pub(crate) fn tent(i: usize, t: usize) -> f64 {
    (i + 1).min(t - i) as f64
}

/// A denoiser together with its 32-bit weights.
#[derive(Clone, Debug)]
pub struct Gid {
    pub net: GidNet,
    pub params: ParamSet<f32>,
}

impl Gid {
    pub fn new(cfg: &GidConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = GidNet::new(cfg, &mut params, &mut rng)?;
        Ok(Gid { net, params })
    }

    pub fn config(&self) -> &GidConfig {
        self.net.config()
    }

    /// Runs `[B, T, M, C]` windows through the network.
    pub fn forward_windows(&self, x: &Tensor<f32>, causal: bool) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = self.net.forward(&mut g, &p, xv, causal)?;
        Ok(g.value(y).clone())
    }

    fn run_batched(&self, windows: &[Vec<f32>], causal: bool) -> Result<Vec<Vec<f32>>> {
        let cfg = self.config();
        let per = cfg.window * cfg.sensors * cfg.channels;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFER_BATCH) {
            let data: Vec<f32> = chunk.iter().flatten().copied().collect();
            let x = Tensor::new(&[chunk.len(), cfg.window, cfg.sensors, cfg.channels], data)?;
            let y = self.forward_windows(&x, causal)?;
            out.extend(y.data().chunks(per).map(|c| c.to_vec()));
        }
        Ok(out)
    }

    fn check_sequence(&self, seq: &SequenceWindow) -> Result<()> {
        if seq.sensors != self.config().sensors {
            return Err(GidError::Config(format!(
                "sequence has {} sensors, denoiser expects {}",
                seq.sensors,
                self.config().sensors
            )));
        }
        if seq.frames == 0 {
            return Err(GidError::InsufficientData("empty sequence".into()));
        }
        Ok(())
    }

    /// Offline denoising of a whole sequence: windows at stride T/2 blended with
    /// triangular weights; short sequences are padded with their last frame.
    pub fn denoise_sequence(&self, seq: &SequenceWindow) -> Result<SequenceWindow> {
        self.check_sequence(seq)?;
        let t = self.config().window;
        let row = seq.sensors * CHANNELS;
        let n = seq.frames.max(t);
        let frame = |i: usize| &seq.data[i.min(seq.frames - 1) * row..(i.min(seq.frames - 1) + 1) * row];
        let starts = window_starts(n, t);
        let windows: Vec<Vec<f32>> = starts
            .iter()
            .map(|&s| (s..s + t).flat_map(|i| frame(i).iter().map(|&v| v as f32)).collect())
            .collect();
        let outs = self.run_batched(&windows, false)?;
        let mut acc = vec![0.0f64; n * row];
        let mut wsum = vec![0.0f64; n];
        for (&s, y) in starts.iter().zip(&outs) {
            for i in 0..t {
                let w = tent(i, t);
                wsum[s + i] += w;
                for (a, v) in acc[(s + i) * row..(s + i + 1) * row].iter_mut().zip(&y[i * row..(i + 1) * row]) {
                    *a += w * *v as f64;
                }
            }
        }
        for (i, chunk) in acc.chunks_mut(row).enumerate() {
            chunk.iter_mut().for_each(|v| *v /= wsum[i]);
        }
        acc.truncate(seq.frames * row);
        Ok(SequenceWindow {
            frames: seq.frames,
            sensors: seq.sensors,
            data: acc,
        })
    }

    /// Causal window ending at frame `i`, front-padded with frame 0 during warm-up.
    fn causal_window(&self, seq: &SequenceWindow, i: usize) -> Vec<f32> {
        let t = self.config().window;
        let row = seq.sensors * CHANNELS;
        (0..t)
            .flat_map(|k| {
                let src = (i + k + 1).saturating_sub(t);
                seq.data[src * row..(src + 1) * row].iter().map(|&v| v as f32)
            })
            .collect()
    }

    /// Reference for streaming mode: frame `i` is the last frame of the causal window
    /// ending at `i`, computed in batches.
    pub fn denoise_causal(&self, seq: &SequenceWindow) -> Result<SequenceWindow> {
        self.check_sequence(seq)?;
        let t = self.config().window;
        let row = seq.sensors * CHANNELS;
        let mut data = Vec::with_capacity(seq.frames * row);
        let idx: Vec<usize> = (0..seq.frames).collect();
        for chunk in idx.chunks(INFER_BATCH) {
            let windows: Vec<Vec<f32>> = chunk.iter().map(|&i| self.causal_window(seq, i)).collect();
            for y in self.run_batched(&windows, true)? {
                data.extend(y[(t - 1) * row..].iter().map(|&v| v as f64));
            }
        }
        Ok(SequenceWindow {
            frames: seq.frames,
            sensors: seq.sensors,
            data,
        })
    }

    pub fn to_checkpoint(&self, metadata: &str) -> Checkpoint {
        Checkpoint {
            magic: GID_MAGIC,
            config: self.config().to_text(),
            metadata: metadata.to_string(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.magic != GID_MAGIC {
            return Err(GidError::Checkpoint("not a denoiser checkpoint".into()));
        }
        let cfg = GidConfig::from_text(&ck.config)?;
        let fresh = Gid::new(&cfg, 0)?;
        ck.check_layout(&fresh.params)?;
        Ok(Gid {
            net: fresh.net,
            params: ck.params.clone(),
        })
    }
}

/// Frame-by-frame denoising with causal attention over the last T frames.
pub struct StreamingDenoiser<'a> {
    gid: &'a Gid,
    buf: VecDeque<Vec<f32>>,
}

impl<'a> StreamingDenoiser<'a> {
    pub fn new(gid: &'a Gid) -> Self {
        StreamingDenoiser {
            gid,
            buf: VecDeque::with_capacity(gid.config().window),
        }
    }

    /// Feeds one normalized frame (`M × C` values) and returns its denoised version.
    pub fn push(&mut self, frame: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.gid.config();
        let row = cfg.sensors * cfg.channels;
        if frame.len() != row {
            return Err(GidError::shape("stream.push", &[frame.len()], &[row]));
        }
        let f: Vec<f32> = frame.iter().map(|&v| v as f32).collect();
        if self.buf.is_empty() {
            for _ in 0..cfg.window {
                self.buf.push_back(f.clone());
            }
        } else {
            self.buf.pop_front();
            self.buf.push_back(f);
        }
        let data: Vec<f32> = self.buf.iter().flatten().copied().collect();
        let x = Tensor::new(&[1, cfg.window, cfg.sensors, cfg.channels], data)?;
        let y = self.gid.forward_windows(&x, true)?;
        Ok(y.data()[(cfg.window - 1) * row..].iter().map(|&v| v as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check, TOL_COMPOSITE};
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    fn tiny() -> GidConfig {
        GidConfig {
            window: 8,
            sensors: 2,
            model_dim: 8,
            heads: 2,
            ffn_hidden: 12,
            expert_hidden: 10,
            refine_dim: 4,
            ..Default::default()
        }
    }

    fn randomize<S: Scalar>(ps: &mut ParamSet<S>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in ps.tensors_mut() {
            for v in t.data_mut() {
                *v += S::lit(rng.random_range(-0.3..0.3));
            }
        }
    }

    #[test]
    fn default_config_is_lightweight() {
        let g = Gid::new(&GidConfig::default(), 1).unwrap();
        assert!(g.params.count() < 1_000_000, "{}", g.params.count());
        assert_eq!(
            GidConfig::default().block_axes(),
            vec![SeqAxis::Time, SeqAxis::Sensor, SeqAxis::Time]
        );
    }

    #[test]
    fn config_validation_and_text() {
        let c = GidConfig::default();
        assert_eq!(GidConfig::from_text(&c.to_text()).unwrap(), c);
        let bad = GidConfig { model_dim: 30, ..c.clone() };
        assert!(matches!(bad.validate(), Err(GidError::Config(_))));
        assert!(GidConfig { window: 4, ..c.clone() }.validate().is_err());
        assert!(c.clone().variant("no_fps").is_err());
    }

    #[test]
    fn identity_at_init() {
        for variant in ["full", "no_lsd", "no_acf"] {
            let cfg = tiny().variant(variant).unwrap();
            let gid = Gid::new(&cfg, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x = Tensor::<f32>::randn(&[3, 8, 2, 12], 1.0, &mut rng);
            assert_eq!(gid.forward_windows(&x, false).unwrap(), x, "{variant}");
        }
        assert_eq!(Gid::new(&tiny(), 0).unwrap().net.alpha(&Gid::new(&tiny(), 0).unwrap().params), vec![0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let gid = Gid::new(&tiny(), 3).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 8, 3, 12]);
        assert!(matches!(gid.forward_windows(&x, false), Err(GidError::Shape { .. })));
    }

    #[test]
    fn fusion_limits_and_midpoint() {
        let gid = Gid::new(&tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Tensor::<f64>::randn(&[1, 8, 2, 12], 1.0, &mut rng);
        let l = Tensor::<f64>::randn(&[1, 8, 2, 12], 1.0, &mut rng);
        let ps64: ParamSet<f64> = gid.params.cast();
        let a_id = ps64.find("fusion.a").unwrap();
        for (a, want) in [(0.0, 0.5), (40.0, 1.0), (-40.0, 0.0)] {
            let mut ps = ps64.clone();
            ps.get_mut(a_id).data_mut().iter_mut().for_each(|v| *v = a);
            let mut g = Graph::new();
            let p = ps.bind_frozen(&mut g);
            let dv = g.constant(d.clone());
            let lv = g.constant(l.clone());
            let f = gid.net.fuse(&mut g, &p, dv, lv).unwrap();
            for ((x, y), z) in d.data().iter().zip(l.data()).zip(g.value(f).data()) {
                assert!((z - (want * x + (1.0 - want) * y)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fusion_is_convex(a in prop::collection::vec(-8.0f64..8.0, 2), seed in 0u64..1000) {
            let gid = Gid::new(&tiny(), 3).unwrap();
            let mut ps: ParamSet<f64> = gid.params.cast();
            let a_id = ps.find("fusion.a").unwrap();
            ps.get_mut(a_id).data_mut().copy_from_slice(&a);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Tensor::<f64>::randn(&[1, 8, 2, 12], 2.0, &mut rng);
            let l = Tensor::<f64>::randn(&[1, 8, 2, 12], 2.0, &mut rng);
            let mut g = Graph::new();
            let p = ps.bind_frozen(&mut g);
            let dv = g.constant(d.clone());
            let lv = g.constant(l.clone());
            let f = gid.net.fuse(&mut g, &p, dv, lv).unwrap();
            for ((x, y), z) in d.data().iter().zip(l.data()).zip(g.value(f).data()) {
                prop_assert!(*z >= x.min(*y) - 1e-12 && *z <= x.max(*y) + 1e-12);
            }
        }
    }

    #[test]
    fn expert_heads_are_isolated() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::<f64>::new();
        let net = GidNet::new(&cfg, &mut ps, &mut rng).unwrap();
        randomize(&mut ps, 6);
        let feat = Tensor::<f64>::randn(&[1, 8, 2, 8], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 8, 2, 12], 1.0, &mut rng);
        let run = |ps: &ParamSet<f64>| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g);
            let f = g.constant(feat.clone());
            let xv = g.constant(x.clone());
            let y = net.experts_forward(&mut g, &p, f, xv).unwrap();
            (g.value(y).clone(), g, p, y)
        };
        // perturb head 1 only: sensor 0's channels must not move
        let mut ps2 = ps.clone();
        for id in net.expert_params(1).unwrap() {
            let t = ps2.get_mut(id);
            let per = t.len() / 2;
            t.data_mut()[per..].iter_mut().for_each(|v| *v += 0.5);
        }
        let (a, ..) = run(&ps);
        let (b, ..) = run(&ps2);
        for t in 0..8 {
            for c in 0..12 {
                assert_eq!(a.get(&[0, t, 0, c]), b.get(&[0, t, 0, c]));
                assert_ne!(a.get(&[0, t, 1, c]), b.get(&[0, t, 1, c]));
            }
        }
        // loss on sensor 0 only: head 1 slices get zero gradient
        let (_, mut g, p, y) = run(&ps);
        let s0 = g.slice(y, 2, 0, 1).unwrap();
        let loss = g.sum(s0);
        let mut grads = g.backward(loss).unwrap();
        for id in net.expert_params(1).unwrap() {
            let gr = grads.take(p[id]).unwrap();
            let per = gr.len() / 2;
            assert!(gr.data()[per..].iter().all(|v| *v == 0.0));
            assert!(gr.data()[..per].iter().any(|v| *v != 0.0));
        }
        assert!(net.expert_params(2).is_err());
    }

    #[test]
    fn spatial_attention_is_sensor_equivariant() {
        let cfg = GidConfig { sensors: 3, ..tiny() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::<f64>::new();
        let net = GidNet::new(&cfg, &mut ps, &mut rng).unwrap();
        randomize(&mut ps, 8);
        let x = Tensor::<f64>::randn(&[1, 8, 3, 12], 1.0, &mut rng);
        let perm = [2usize, 0, 1];
        let mut xp = x.clone();
        for t in 0..8 {
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..12 {
                    xp.set(&[0, t, new, c], x.get(&[0, t, old, c]));
                }
            }
        }
        let mut psp = ps.clone();
        let sid = ps.find("backbone.embed.sensor").unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..8 {
                psp.get_mut(sid).set(&[new, k], ps.get(sid).get(&[old, k]));
            }
        }
        let feats = |ps: &ParamSet<f64>, x: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = ps.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            let f = net.backbone_forward(&mut g, &p, xv, false).unwrap();
            g.value(f).clone()
        };
        let a = feats(&ps, &x);
        let b = feats(&psp, &xp);
        for t in 0..8 {
            for (new, &old) in perm.iter().enumerate() {
                for k in 0..8 {
                    assert!((b.get(&[0, t, new, k]) - a.get(&[0, t, old, k])).abs() < 1e-12);
                }
            }
        }
    }

    fn end_to_end_check(cfg: &GidConfig, causal: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::<f64>::new();
        let net = GidNet::new(cfg, &mut ps, &mut rng).unwrap();
        randomize(&mut ps, 12);
        let mut inputs = vec![Tensor::randn(&[1, cfg.window, cfg.sensors, 12], 1.0, &mut rng)];
        inputs.extend(ps.tensors().iter().cloned());
        let r = check("gid", &inputs, inputs.len().max(20), TOL_COMPOSITE, 13, |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            net.forward(g, &p, v[0], causal)
        })
        .unwrap();
        r.max_rel_err
    }

    #[test]
    fn end_to_end_gradients() {
        assert!(end_to_end_check(&tiny(), false) < 1e-4);
        assert!(end_to_end_check(&tiny(), true) < 1e-4);
        let per_sensor = GidConfig { shared_backbone: false, fusion: Fusion::PerChannel, ..tiny() };
        assert!(end_to_end_check(&per_sensor, false) < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut gid = Gid::new(&tiny(), 9).unwrap();
        randomize(&mut gid.params, 1);
        let ck = gid.to_checkpoint("seed=9\n");
        let back = Gid::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes(), GID_MAGIC).unwrap()).unwrap();
        assert_eq!(back.params, gid.params);
        let mut wrong = ck.clone();
        wrong.config = GidConfig { expert_hidden: 11, ..tiny() }.to_text();
        assert!(matches!(Gid::from_checkpoint(&wrong), Err(GidError::Checkpoint(_))));
    }

    #[test]
    fn stitching_and_streaming() {
        let mut gid = Gid::new(&tiny(), 2).unwrap();
        randomize(&mut gid.params, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = SequenceWindow {
            frames: 29,
            sensors: 2,
            data: (0..29 * 24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let off = gid.denoise_sequence(&seq).unwrap();
        assert_eq!(off.frames, 29);
        let short = seq.slice(0, 5);
        assert_eq!(gid.denoise_sequence(&short).unwrap().frames, 5);
        let reference = gid.denoise_causal(&seq).unwrap();
        let mut stream = StreamingDenoiser::new(&gid);
        for t in 0..seq.frames {
            let y = stream.push(&seq.data[t * 24..(t + 1) * 24]).unwrap();
            for (a, b) in y.iter().zip(&reference.data[t * 24..(t + 1) * 24]) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        // an identity network stitches back to the input
        let id = Gid::new(&tiny(), 2).unwrap();
        let same = id.denoise_sequence(&seq).unwrap();
        for (a, b) in same.data.iter().zip(&seq.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
