//! Objectives, training loops and ablation variants for the denoiser and the pose
//! predictor.

pub mod dataset;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use dataset::{
    clip_seeds, generate, window_starts, Clip, ClipFeatures, Dataset, GenConfig, Provenance, Split, Tagged,
};

use crate::checkpoint::{kv_text, parse_kv};
use crate::error::{GidError, Result};
use crate::gidnet::{Gid, GidConfig, GidNet};
use crate::kinematics::{PoseFrame, SequenceWindow, Skeleton, CHANNELS};
use crate::numerics::{clip_grad_norm, cosine_lr, Adam, AdamConfig, Bound, Graph, ParamSet, Scalar, Tensor, Var};
use crate::posenet::{fk_targets, PoseNet, PoseNetConfig, Predictor};

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// One expert head shared by every sensor.
    NoLsd,
    /// No fusion stage: the expert output goes straight to refinement.
    NoAcf,
    /// No denoiser: the predictor is trained directly on loose data.
    NoFps,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoLsd, Variant::NoAcf, Variant::NoFps];

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLsd => "no_lsd",
            Variant::NoAcf => "no_acf",
            Variant::NoFps => "no_fps",
        }
    }

    /// Denoiser assembly for this variant, or `None` for the direct predictor.
    pub fn gid_config(&self, base: &GidConfig) -> Option<GidConfig> {
        match self {
            Variant::NoFps => None,
            v => Some(base.clone().variant(v.tag()).expect("known variant")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = GidError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| GidError::Config(format!("unknown variant {s:?} (full, no_lsd, no_acf, no_fps)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub clip_norm: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// 32 or 64.
    pub precision: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            max_epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            lr_floor: 1e-5,
            clip_norm: 1.0,
            patience: 10,
            precision: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(GidError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_floor >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(GidError::Config("learning rates and clip norm must be positive".into()));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(GidError::Config(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        Ok(())
    }
}

/// Everything a run config file can set: `train.*`, `gid.*` and `pose.*` keys
/// override the defaults.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub gid: GidConfig,
    pub pose: PoseNetConfig,
}

fn set<T: FromStr>(slot: &mut T, key: &str, v: &str) -> Result<()> {
    *slot = v
        .parse()
        .map_err(|_| GidError::Config(format!("bad value for {key}: {v:?}")))?;
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            let v = v.as_str();
            let key = k.as_str();
            match key {
                "train.seed" => set(&mut c.train.seed, key, v)?,
                "train.max_epochs" => set(&mut c.train.max_epochs, key, v)?,
                "train.batch_size" => set(&mut c.train.batch_size, key, v)?,
                "train.lr" => set(&mut c.train.lr, key, v)?,
                "train.lr_floor" => set(&mut c.train.lr_floor, key, v)?,
                "train.clip_norm" => set(&mut c.train.clip_norm, key, v)?,
                "train.patience" => set(&mut c.train.patience, key, v)?,
                "train.precision" => set(&mut c.train.precision, key, v)?,
                "gid.window" | "pose.window" => {
                    set(&mut c.gid.window, key, v)?;
                    c.pose.window = c.gid.window;
                }
                "gid.model_dim" => set(&mut c.gid.model_dim, key, v)?,
                "gid.temporal_blocks" => set(&mut c.gid.temporal_blocks, key, v)?,
                "gid.spatial_blocks" => set(&mut c.gid.spatial_blocks, key, v)?,
                "gid.heads" => set(&mut c.gid.heads, key, v)?,
                "gid.ffn_hidden" => set(&mut c.gid.ffn_hidden, key, v)?,
                "gid.expert_hidden" => set(&mut c.gid.expert_hidden, key, v)?,
                "gid.refine_blocks" => set(&mut c.gid.refine_blocks, key, v)?,
                "gid.refine_dim" => set(&mut c.gid.refine_dim, key, v)?,
                "gid.fusion" => set(&mut c.gid.fusion, key, v)?,
                "gid.shared_backbone" => set(&mut c.gid.shared_backbone, key, v)?,
                "pose.model_dim" => set(&mut c.pose.model_dim, key, v)?,
                "pose.layers" => set(&mut c.pose.layers, key, v)?,
                "pose.heads" => set(&mut c.pose.heads, key, v)?,
                "pose.ffn_hidden" => set(&mut c.pose.ffn_hidden, key, v)?,
                _ => return Err(GidError::Config(format!("unknown run config key {k:?}"))),
            }
        }
        c.train.validate()?;
        c.gid.validate()?;
        c.pose.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let (t, g, p) = (&self.train, &self.gid, &self.pose);
        kv_text(&[
            ("train.seed", t.seed.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_floor", t.lr_floor.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.precision", t.precision.to_string()),
            ("gid.window", g.window.to_string()),
            ("gid.model_dim", g.model_dim.to_string()),
            ("gid.temporal_blocks", g.temporal_blocks.to_string()),
            ("gid.spatial_blocks", g.spatial_blocks.to_string()),
            ("gid.heads", g.heads.to_string()),
            ("gid.ffn_hidden", g.ffn_hidden.to_string()),
            ("gid.expert_hidden", g.expert_hidden.to_string()),
            ("gid.refine_blocks", g.refine_blocks.to_string()),
            ("gid.refine_dim", g.refine_dim.to_string()),
            ("gid.fusion", g.fusion.to_string()),
            ("gid.shared_backbone", g.shared_backbone.to_string()),
            ("pose.model_dim", p.model_dim.to_string()),
            ("pose.layers", p.layers.to_string()),
            ("pose.heads", p.heads.to_string()),
            ("pose.ffn_hidden", p.ffn_hidden.to_string()),
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept (best validation loss).
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    /// CSV with the given loss column names.
    pub fn to_csv(&self, train_col: &str, val_col: &str) -> String {
        let mut s = format!("epoch,{train_col},{val_col},lr,wallclock_s\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.3e},{:.2}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.wallclock_s
            ));
        }
        s
    }

    /// Exponential moving average (factor 0.5) of the training loss per epoch.
    pub fn train_ema(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.epochs.len());
        let mut ema = None;
        for e in &self.epochs {
            let v = match ema {
                None => e.train_loss,
                Some(p) => 0.5 * p + 0.5 * e.train_loss,
            };
            ema = Some(v);
            out.push(v);
        }
        out
    }

    /// True when the EMA at the end of every 10-epoch span is no higher than at
    /// its start. A cheap divergence detector.
    pub fn ema_non_increasing(&self) -> bool {
        let ema = self.train_ema();
        ema.windows(11).all(|w| w[10] <= w[0])
    }
}

/// Mean absolute difference over all elements of two feature sequences.
pub fn mae_loss(pred: &SequenceWindow, target: &SequenceWindow) -> Result<f64> {
    if pred.frames != target.frames || pred.sensors != target.sensors || pred.data.len() != target.data.len() {
        return Err(GidError::shape(
            "mae_loss",
            &[pred.frames, pred.sensors, CHANNELS],
            &[target.frames, target.sensors, CHANNELS],
        ));
    }
    let n = pred.data.len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(pred.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64)
}

/// Parameter section carrying the largest (or first non-finite) gradient.
fn worst_section<S: Scalar>(names: &[String], grads: &[Tensor<S>]) -> String {
    let mut worst = (f64::NEG_INFINITY, String::from("<none>"));
    for (n, g) in names.iter().zip(grads) {
        let v = if g.is_finite() { g.sum_sq() } else { f64::INFINITY };
        if v > worst.0 {
            worst = (v, n.clone());
        }
    }
    worst.1
}

/// Window references `(clip, start)` over a set of sequences.
fn index_windows<'a>(seqs: impl Iterator<Item = &'a SequenceWindow>, t: usize) -> Vec<(usize, usize)> {
    seqs.enumerate()
        .flat_map(|(c, s)| window_starts(s.frames, t).into_iter().map(move |st| (c, st)))
        .collect()
}

fn stack<S: Scalar>(seqs: &[&SequenceWindow], idx: &[(usize, usize)], t: usize) -> Result<Tensor<S>> {
    let m = seqs[0].sensors;
    let row = m * CHANNELS;
    let mut data = Vec::with_capacity(idx.len() * t * row);
    for &(c, s) in idx {
        data.extend(seqs[c].data[s * row..(s + t) * row].iter().map(|&v| S::lit(v)));
    }
    Tensor::new(&[idx.len(), t, m, CHANNELS], data)
}

/// Shared optimization loop: shuffled mini-batches, Adam with cosine decay, global
/// gradient clipping, early stopping on `validate`, best weights restored.
struct Loop<'a, S: Scalar> {
    run: &'a TrainConfig,
    windows: usize,
    loss: &'a dyn Fn(&mut Graph<S>, &Bound, &[usize]) -> Result<Var>,
    validate: &'a dyn Fn(&ParamSet<S>) -> Result<f64>,
}

impl<S: Scalar> Loop<'_, S> {
    fn fit(&self, params: &mut ParamSet<S>, mut progress: Option<&mut dyn FnMut(&EpochLog)>) -> Result<TrainLog> {
        let run = self.run;
        run.validate()?;
        if self.windows == 0 {
            return Err(GidError::InsufficientData("no complete training windows".into()));
        }
        let per_epoch = self.windows.div_ceil(run.batch_size);
        let total = per_epoch * run.max_epochs;
        let names = params.names().to_vec();
        let mut adam = Adam::new(AdamConfig::default(), params.tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5eed_0f_ba7c4e5);
        let mut order: Vec<usize> = (0..self.windows).collect();
        let start = Instant::now();
        let mut log = TrainLog {
            best_val: (self.validate)(params)?,
            ..Default::default()
        };
        let mut best = params.clone();
        let mut step = 0;
        for epoch in 1..=run.max_epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut lr = run.lr;
            for (b, batch) in order.chunks(run.batch_size).enumerate() {
                lr = cosine_lr(run.lr, run.lr_floor, step, total);
                let mut g = Graph::new();
                let p = params.bind(&mut g);
                let loss = (self.loss)(&mut g, &p, batch)?;
                let lv = g.value(loss).data()[0].as_f64();
                let mut grads = g.backward(loss)?;
                let mut gs = params.collect_grads(&p, &mut grads);
                if !lv.is_finite() {
                    return Err(GidError::NonFinite {
                        epoch,
                        batch: b,
                        section: worst_section(&names, &gs),
                    });
                }
                clip_grad_norm(&mut gs, run.clip_norm);
                adam.step(params.tensors_mut(), &gs, &names, lr).map_err(|e| match e {
                    GidError::NonFiniteGradient(section) => GidError::NonFinite { epoch, batch: b, section },
                    e => e,
                })?;
                sum += lv * batch.len() as f64;
                step += 1;
            }
            let val = (self.validate)(params)?;
            let row = EpochLog {
                epoch,
                train_loss: sum / self.windows as f64,
                val_loss: val,
                lr,
                wallclock_s: start.elapsed().as_secs_f64(),
            };
            if let Some(cb) = progress.as_mut() {
                cb(&row);
            }
            log.epochs.push(row);
            if val < log.best_val {
                log.best_val = val;
                log.best_epoch = epoch;
                best = params.clone();
            } else if epoch - log.best_epoch >= run.patience {
                log.stopped_early = true;
                break;
            }
        }
        *params = best;
        Ok(log)
    }
}

fn loose_tight<'a>(data: &'a [ClipFeatures]) -> Result<(Vec<&'a SequenceWindow>, Vec<&'a SequenceWindow>)> {
    let mut loose = Vec::with_capacity(data.len());
    let mut tight = Vec::with_capacity(data.len());
    for c in data {
        loose.push(c.loose.require(Provenance::Loose)?);
        tight.push(c.tight.require(Provenance::Tight)?);
    }
    Ok((loose, tight))
}

fn gid_val<S: Scalar>(
    net: &GidNet,
    ps: &ParamSet<S>,
    loose: &[&SequenceWindow],
    tight: &[&SequenceWindow],
    batch: usize,
) -> Result<f64> {
    let t = net.config().window;
    let idx = index_windows(loose.iter().copied(), t);
    if idx.is_empty() {
        return Err(GidError::InsufficientData("no complete validation windows".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch) {
        let mut g = Graph::<S>::new();
        let p = ps.bind_frozen(&mut g);
        let x = g.constant(stack(loose, chunk, t)?);
        let y = net.forward(&mut g, &p, x, false)?;
        let target = stack::<S>(tight, chunk, t)?;
        total += g
            .value(y)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .sum::<f64>();
        count += target.len();
    }
    Ok(total / count as f64)
}

fn train_gid_in<S: Scalar>(
    cfg: &GidConfig,
    train: &[ClipFeatures],
    val: &[ClipFeatures],
    run: &TrainConfig,
    progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<(Gid, TrainLog)> {
    let (tl, tt) = loose_tight(train)?;
    let (vl, vt) = loose_tight(val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut params = ParamSet::<S>::new();
    let net = GidNet::new(cfg, &mut params, &mut rng)?;
    let t = cfg.window;
    let idx = index_windows(tl.iter().copied(), t);
    let loss = |g: &mut Graph<S>, p: &Bound, batch: &[usize]| -> Result<Var> {
        let sel: Vec<(usize, usize)> = batch.iter().map(|&i| idx[i]).collect();
        let x = g.constant(stack(&tl, &sel, t)?);
        let y = net.forward(g, p, x, false)?;
        let target = g.constant(stack(&tt, &sel, t)?);
        g.mae(y, target)
    };
    let validate = |ps: &ParamSet<S>| gid_val(&net, ps, &vl, &vt, run.batch_size.max(1));
    let lp = Loop {
        run,
        windows: idx.len(),
        loss: &loss,
        validate: &validate,
    };
    let log = lp.fit(&mut params, progress)?;
    Ok((
        Gid {
            net: GidNet::new(cfg, &mut ParamSet::<f32>::new(), &mut ChaCha8Rng::seed_from_u64(run.seed))?,
            params: params.cast(),
        },
        log,
    ))
}

/// Trains a denoiser on (loose → tight) pairs, minimizing feature-space MAE. The
/// variant must be one of full, no_lsd, no_acf.
pub fn train_gid(
    cfg: &GidConfig,
    variant: Variant,
    train: &[ClipFeatures],
    val: &[ClipFeatures],
    run: &TrainConfig,
    progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<(Gid, TrainLog)> {
    let cfg = variant
        .gid_config(cfg)
        .ok_or_else(|| GidError::Config("no_fps has no denoiser; use train_direct".into()))?;
    if run.precision == 64 {
        train_gid_in::<f64>(&cfg, train, val, run, progress)
    } else {
        train_gid_in::<f32>(&cfg, train, val, run, progress)
    }
}

/// Predictor training example: an IMU stream and its ground-truth poses.
#[derive(Clone, Copy, Debug)]
pub struct PoseExample<'a> {
    pub imu: &'a Tagged,
    pub poses: &'a [PoseFrame],
}

impl<'a> PoseExample<'a> {
    pub fn tight(c: &'a ClipFeatures) -> Self {
        PoseExample {
            imu: &c.tight,
            poses: &c.poses,
        }
    }

    pub fn loose(c: &'a ClipFeatures) -> Self {
        PoseExample {
            imu: &c.loose,
            poses: &c.poses,
        }
    }
}

type PosePrep<'a> = (Vec<&'a SequenceWindow>, Vec<Vec<f64>>);

fn pose_prep<'a>(set: &[PoseExample<'a>], want: Provenance, skel: &Skeleton) -> Result<PosePrep<'a>> {
    let mut seqs = Vec::with_capacity(set.len());
    let mut targets = Vec::with_capacity(set.len());
    for ex in set {
        let s = ex.imu.require(want)?;
        if ex.poses.len() != s.frames {
            return Err(GidError::InvalidInput(format!(
                "{} IMU frames but {} poses",
                s.frames,
                ex.poses.len()
            )));
        }
        seqs.push(s);
        targets.push(fk_targets(skel, ex.poses));
    }
    Ok((seqs, targets))
}

fn train_pose_in<S: Scalar>(
    cfg: &PoseNetConfig,
    want: Provenance,
    train: &[PoseExample],
    val: &[PoseExample],
    skel: &Skeleton,
    run: &TrainConfig,
    progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<(Predictor, TrainLog)> {
    if cfg.joints != skel.len() {
        return Err(GidError::Config(format!(
            "predictor outputs {} joints, skeleton has {}",
            cfg.joints,
            skel.len()
        )));
    }
    let (ts, tt) = pose_prep(train, want, skel)?;
    let (vs, vt) = pose_prep(val, want, skel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut params = ParamSet::<S>::new();
    let net = PoseNet::new(cfg, &mut params, &mut rng)?;
    let (t, j) = (cfg.window, cfg.joints);
    let targets = |tg: &[Vec<f64>], sel: &[(usize, usize)]| -> Result<Tensor<S>> {
        let mut d = Vec::with_capacity(sel.len() * t * j * 12);
        for &(c, s) in sel {
            d.extend(tg[c][s * j * 12..(s + t) * j * 12].iter().map(|&v| S::lit(v)));
        }
        Tensor::new(&[sel.len(), t, j, 12], d)
    };
    let idx = index_windows(ts.iter().copied(), t);
    let vidx = index_windows(vs.iter().copied(), t);
    if vidx.is_empty() {
        return Err(GidError::InsufficientData("no complete validation windows".into()));
    }
    let loss = |g: &mut Graph<S>, p: &Bound, batch: &[usize]| -> Result<Var> {
        let sel: Vec<(usize, usize)> = batch.iter().map(|&i| idx[i]).collect();
        let x = g.constant(stack(&ts, &sel, t)?);
        let y = net.forward(g, p, x, false)?;
        net.loss(g, y, &targets(&tt, &sel)?, skel)
    };
    let validate = |ps: &ParamSet<S>| -> Result<f64> {
        let mut total = 0.0;
        for chunk in vidx.chunks(run.batch_size) {
            let mut g = Graph::<S>::new();
            let p = ps.bind_frozen(&mut g);
            let x = g.constant(stack(&vs, chunk, t)?);
            let y = net.forward(&mut g, &p, x, false)?;
            let l = net.loss(&mut g, y, &targets(&vt, chunk)?, skel)?;
            total += g.value(l).data()[0].as_f64() * chunk.len() as f64;
        }
        Ok(total / vidx.len() as f64)
    };
    let lp = Loop {
        run,
        windows: idx.len(),
        loss: &loss,
        validate: &validate,
    };
    let log = lp.fit(&mut params, progress)?;
    let fresh = Predictor::new(cfg, 0)?;
    Ok((
        Predictor {
            net: fresh.net,
            params: params.cast(),
        },
        log,
    ))
}

fn train_pose(
    cfg: &PoseNetConfig,
    want: Provenance,
    train: &[PoseExample],
    val: &[PoseExample],
    skel: &Skeleton,
    run: &TrainConfig,
    progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<(Predictor, TrainLog)> {
    if run.precision == 64 {
        train_pose_in::<f64>(cfg, want, train, val, skel, run, progress)
    } else {
        train_pose_in::<f32>(cfg, want, train, val, skel, run, progress)
    }
}

/// Supervised predictor training on tight-wear data only; anything else is a
/// provenance error.
pub fn train_predictor(
    cfg: &PoseNetConfig,
    train: &[PoseExample],
    val: &[PoseExample],
    skel: &Skeleton,
    run: &TrainConfig,
    progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<(Predictor, TrainLog)> {
    train_pose(cfg, Provenance::Tight, train, val, skel, run, progress)
}

/// The no_fps variant: the predictor learns loose-wear IMU → pose directly.
pub fn train_direct(
    cfg: &PoseNetConfig,
    train: &[PoseExample],
    val: &[PoseExample],
    skel: &Skeleton,
    run: &TrainConfig,
    progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<(Predictor, TrainLog)> {
    train_pose(cfg, Provenance::Loose, train, val, skel, run, progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn seq(frames: usize, vals: impl Fn(usize) -> f64) -> SequenceWindow {
        SequenceWindow {
            frames,
            sensors: 1,
            data: (0..frames * CHANNELS).map(vals).collect(),
        }
    }

    #[test]
    fn mae_basics() {
        let a = seq(3, |i| i as f64 * 0.1);
        assert_eq!(mae_loss(&a, &a).unwrap(), 0.0);
        let b = seq(3, |i| i as f64 * 0.1 + 1.0);
        assert!((mae_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(mae_loss(&a, &seq(2, |_| 0.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mae_matches_scalar_loop(v in proptest::collection::vec(-5.0f64..5.0, 48), w in proptest::collection::vec(-5.0f64..5.0, 48)) {
            let a = SequenceWindow { frames: 2, sensors: 2, data: v.clone() };
            let b = SequenceWindow { frames: 2, sensors: 2, data: w.clone() };
            let mut acc = 0.0;
            for i in 0..48 {
                let d = v[i] - w[i];
                acc += if d < 0.0 { -d } else { d };
            }
            prop_assert!((mae_loss(&a, &b).unwrap() - acc / 48.0).abs() < 1e-7);
        }
    }

    #[test]
    fn variants_and_run_config() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert!("no_xyz".parse::<Variant>().is_err());
        assert!(Variant::NoFps.gid_config(&GidConfig::default()).is_none());
        let full = Gid::new(&Variant::Full.gid_config(&GidConfig::default()).unwrap(), 1).unwrap();
        let lsd = Gid::new(&Variant::NoLsd.gid_config(&GidConfig::default()).unwrap(), 1).unwrap();
        assert!(lsd.params.count() < full.params.count());
        let rc = RunConfig::parse("train.max_epochs=3\ngid.window=32\ngid.fusion=scalar\n").unwrap();
        assert_eq!(rc.train.max_epochs, 3);
        assert_eq!((rc.gid.window, rc.pose.window), (32, 32));
        assert_eq!(RunConfig::parse(&rc.to_text()).unwrap(), rc);
        assert!(RunConfig::parse("train.nope=1").is_err());
        assert!(RunConfig::parse("train.precision=16").is_err());
    }

    #[test]
    fn ema_detector() {
        let mk = |v: &[f64]| TrainLog {
            epochs: v
                .iter()
                .enumerate()
                .map(|(i, &l)| EpochLog { epoch: i + 1, train_loss: l, val_loss: l, lr: 0.0, wallclock_s: 0.0 })
                .collect(),
            ..Default::default()
        };
        assert!(mk(&(0..15).map(|i| 1.0 / (i + 1) as f64).collect::<Vec<_>>()).ema_non_increasing());
        assert!(!mk(&(0..15).map(|i| i as f64).collect::<Vec<_>>()).ema_non_increasing());
        let csv = mk(&[0.5]).to_csv("train_mae", "val_mae");
        assert!(csv.starts_with("epoch,train_mae,val_mae,lr,wallclock_s\n1,0.500000"));
    }
}
