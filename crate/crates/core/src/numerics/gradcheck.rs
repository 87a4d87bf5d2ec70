//! Central finite-difference verification of the analytic backward rules.
//!
//! Each probe draws a random direction `u` for one input and compares the analytic
//! directional derivative `<∇L, u>` against `(L(x + εu) - L(x - εu)) / 2ε`, where `L`
//! is a fixed random projection of the kernel output to a scalar.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::nn::{Block, MultiHeadAttention, SeqAxis};
use super::params::{Bound, ParamSet};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_EPS: f64 = 1e-5;
/// Tolerance for elementwise kernels and matmul.
pub const TOL_ELEMENTWISE: f64 = 1e-6;
/// Tolerance for attention and end-to-end networks.
pub const TOL_COMPOSITE: f64 = 1e-5;
pub const MIN_PROBES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.probes >= MIN_PROBES
    }
}

/// `loss_scale` bounds the round-off of the central difference; the floor it sets keeps
/// exactly-zero directions (key biases under softmax) from reporting a relative error of one.
fn rel_err(a: f64, n: f64, loss_scale: f64) -> f64 {
    // One ulp of the loss divided by 2ε, scaled so a single ulp stays below 1e-6.
    let noise = 1e6 * f64::EPSILON * loss_scale / FD_EPS;
    (a - n).abs() / a.abs().max(n.abs()).max(noise).max(1e-6)
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    probes: usize,
    tolerance: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Output projection weights, fixed once.
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let w = weights
            .get_or_insert_with(|| {
                let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                Tensor::randn(g.shape(out), 1.0, &mut r)
            })
            .clone();
        let wv = g.constant(w);
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod);
        let value = g.value(loss).data()[0];
        let mut grads = Vec::new();
        if want_grads {
            let mut gr = g.backward(loss)?;
            for (v, x) in vars.iter().zip(xs) {
                grads.push(gr.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape())));
            }
        }
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut max_err: f64 = 0.0;
    for p in 0..probes {
        let which = p % inputs.len();
        let dir: Tensor<f64> = Tensor::randn(inputs[which].shape(), 1.0, &mut rng);
        let a: f64 = analytic[which]
            .data()
            .iter()
            .zip(dir.data())
            .map(|(g, u)| g * u)
            .sum();
        let shifted = |sign: f64| {
            let mut xs = inputs.to_vec();
            for (x, u) in xs[which].data_mut().iter_mut().zip(dir.data()) {
                *x += sign * FD_EPS * u;
            }
            xs
        };
        let (lp, _) = eval(&shifted(1.0), false)?;
        let (lm, _) = eval(&shifted(-1.0), false)?;
        let n = (lp - lm) / (2.0 * FD_EPS);
        max_err = max_err.max(rel_err(a, n, lp.abs().max(lm.abs())));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        probes,
        max_rel_err: max_err,
        tolerance,
    })
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Gradient checks for every differentiable kernel on the tape.
pub fn kernel_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = MIN_PROBES;
    let e = TOL_ELEMENTWISE;
    let c = TOL_COMPOSITE;
    let mut out = Vec::new();
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_add(1);
        s
    };

    out.push(check("matmul", &[randn(&[2, 3, 4], &mut rng), randn(&[4, 5], &mut rng)], n, e, next(), |g, v| g.matmul(v[0], v[1]))?);
    out.push(check("matmul.batched", &[randn(&[2, 3, 4], &mut rng), randn(&[2, 4, 2], &mut rng)], n, e, next(), |g, v| g.matmul(v[0], v[1]))?);
    out.push(check("linear", &[randn(&[3, 2, 4], &mut rng), randn(&[4, 3], &mut rng), randn(&[3], &mut rng)], n, e, next(), |g, v| g.linear(v[0], v[1], Some(v[2])))?);
    out.push(check("grouped_linear", &[randn(&[2, 3, 4], &mut rng), randn(&[3, 4, 2], &mut rng), randn(&[3, 2], &mut rng)], n, e, next(), |g, v| g.grouped_linear(v[0], v[1], Some(v[2])))?);
    out.push(check("add", &[randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)], n, e, next(), |g, v| g.add(v[0], v[1]))?);
    out.push(check("sub", &[randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)], n, e, next(), |g, v| g.sub(v[0], v[1]))?);
    out.push(check("mul", &[randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)], n, e, next(), |g, v| g.mul(v[0], v[1]))?);
    out.push(check("scale", &[randn(&[5], &mut rng)], n, e, next(), |g, v| Ok(g.scale(v[0], -1.7)))?);
    out.push(check("relu", &[randn(&[4, 5], &mut rng)], n, e, next(), |g, v| Ok(g.relu(v[0])))?);
    out.push(check("gelu", &[randn(&[4, 5], &mut rng)], n, e, next(), |g, v| Ok(g.gelu(v[0])))?);
    out.push(check("sigmoid", &[randn(&[4, 5], &mut rng)], n, e, next(), |g, v| Ok(g.sigmoid(v[0])))?);
    out.push(check("softmax", &[randn(&[3, 6], &mut rng)], n, e, next(), |g, v| Ok(g.softmax(v[0])))?);
    out.push(check("layer_norm", &[randn(&[3, 6], &mut rng), randn(&[6], &mut rng), randn(&[6], &mut rng)], n, e, next(), |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?);
    out.push(check("permute", &[randn(&[2, 3, 4], &mut rng)], n, e, next(), |g, v| g.permute(v[0], &[2, 0, 1]))?);
    out.push(check("reshape", &[randn(&[2, 6], &mut rng)], n, e, next(), |g, v| g.reshape(v[0], &[3, 4]))?);
    out.push(check("expand", &[randn(&[3, 1], &mut rng)], n, e, next(), |g, v| g.expand(v[0], &[2, 3, 4]))?);
    out.push(check("concat", &[randn(&[2, 2, 3], &mut rng), randn(&[2, 1, 3], &mut rng)], n, e, next(), |g, v| g.concat(&[v[0], v[1]], 1))?);
    out.push(check("slice", &[randn(&[2, 5, 3], &mut rng)], n, e, next(), |g, v| g.slice(v[0], 1, 1, 3))?);
    out.push(check("sum", &[randn(&[3, 4], &mut rng)], n, e, next(), |g, v| Ok(g.sum(v[0])))?);
    out.push(check("mean", &[randn(&[3, 4], &mut rng)], n, e, next(), |g, v| Ok(g.mean(v[0])))?);
    out.push(check("mae", &[randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)], n, e, next(), |g, v| g.mae(v[0], v[1]))?);
    out.push(check("axis_angle", &[randn(&[4, 3], &mut rng)], n, e, next(), |g, v| g.axis_angle_to_matrix(v[0]))?);
    let small = randn(&[4, 3], &mut rng).map(|x| x * 0.01);
    out.push(check("axis_angle.small", &[small], n, e, next(), |g, v| g.axis_angle_to_matrix(v[0]))?);
    let parents = [None, Some(0), Some(1), Some(0)];
    let offsets = [[0.0, 0.0, 0.0], [0.0, 0.3, 0.1], [0.25, 0.0, 0.0], [-0.1, -0.4, 0.0]];
    out.push(check("forward_kinematics", &[randn(&[2, 4, 9], &mut rng)], n, e, next(), move |g, v| g.forward_kinematics(v[0], &parents, &offsets))?);
    let target = {
        let mut g = Graph::<f64>::new();
        let aa = g.constant(randn(&[5, 3], &mut rng));
        let m = g.axis_angle_to_matrix(aa)?;
        g.value(m).clone()
    };
    out.push(check("geodesic", &[randn(&[5, 3], &mut rng)], n, e, next(), move |g, v| {
        let m = g.axis_angle_to_matrix(v[0])?;
        g.geodesic_loss(m, target.clone())
    })?);
    let qkv = || randn(&[2, 5, 3, 8], &mut ChaCha8Rng::seed_from_u64(99));
    let (q, k, v) = (qkv(), randn(&[2, 5, 3, 8], &mut rng), randn(&[2, 5, 3, 8], &mut rng));
    out.push(check("attention", &[q.clone(), k.clone(), v.clone()], n, c, next(), |g, x| g.attention(x[0], x[1], x[2], 2, false))?);
    out.push(check("attention.causal", &[q, k, v], n, c, next(), |g, x| g.attention(x[0], x[1], x[2], 2, true))?);

    let mut ps = ParamSet::<f64>::new();
    let mha = MultiHeadAttention::new(&mut ps, "mha", 8, 2, &mut rng)?;
    let mut inputs = vec![randn(&[2, 4, 3, 8], &mut rng)];
    inputs.extend(ps.tensors().iter().cloned());
    out.push(check("multihead_attention", &inputs, n.max(inputs.len()), c, next(), |g, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        mha.forward(g, &bound, v[0], false)
    })?);

    for axis in [SeqAxis::Time, SeqAxis::Sensor] {
        let mut ps = ParamSet::<f64>::new();
        let block = Block::new(&mut ps, "blk", axis, 8, 2, 12, &mut rng)?;
        let mut inputs = vec![randn(&[1, 4, 3, 8], &mut rng)];
        inputs.extend(ps.tensors().iter().cloned());
        let name = format!("block.{axis:?}").to_lowercase();
        out.push(check(&name, &inputs, n.max(inputs.len()), c, next(), |g, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            block.forward(g, &bound, v[0], false)
        })?);
    }
    Ok(out)
}

/// Small configurations for the end-to-end checks; parameters are randomized so
/// zero-initialized layers carry gradient too.
pub fn network_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    use crate::gidnet::{GidConfig, GidNet};
    use crate::kinematics::{synth_motion, MotionConfig, Skeleton};
    use crate::posenet::{fk_targets, PoseNet, PoseNetConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = TOL_COMPOSITE;
    let mut out = Vec::new();
    let gid_base = GidConfig {
        window: 8,
        sensors: 3,
        model_dim: 8,
        temporal_blocks: 1,
        spatial_blocks: 1,
        heads: 2,
        ffn_hidden: 12,
        expert_hidden: 6,
        refine_blocks: 1,
        refine_dim: 8,
        ..GidConfig::default()
    };
    let x = randn(&[2, 8, 3, 12], &mut rng);
    for (k, (name, causal)) in [("full", false), ("full", true), ("no_lsd", false), ("no_acf", false)]
        .into_iter()
        .enumerate()
    {
        let cfg = gid_base.clone().variant(name)?;
        let mut ps = ParamSet::<f64>::new();
        let net = GidNet::new(&cfg, &mut ps, &mut rng)?;
        let mut inputs = vec![x.clone()];
        inputs.extend(ps.tensors().iter().map(|t| Tensor::randn(t.shape(), 0.3, &mut rng)));
        let tag = format!("gidnet.{name}{}", if causal { ".causal" } else { "" });
        out.push(check(&tag, &inputs, MIN_PROBES.max(inputs.len()), c, seed + k as u64, |g, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            net.forward(g, &bound, v[0], causal)
        })?);
    }

    let skel = Skeleton::default_16();
    let pcfg = PoseNetConfig {
        window: 8,
        sensors: 3,
        model_dim: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 12,
        ..PoseNetConfig::default()
    };
    let mut ps = ParamSet::<f64>::new();
    let net = PoseNet::new(&pcfg, &mut ps, &mut rng)?;
    let mut inputs = vec![x];
    inputs.extend(ps.tensors().iter().map(|t| Tensor::randn(t.shape(), 0.3, &mut rng)));
    let probes = MIN_PROBES.max(inputs.len());
    out.push(check("posenet", &inputs, probes, c, seed + 10, |g, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        net.forward(g, &bound, v[0], false)
    })?);
    let motion = MotionConfig {
        duration_s: 16.0 / 40.0,
        ..MotionConfig::default()
    };
    let poses = synth_motion(&skel, seed, &motion)?;
    let target = Tensor::from_f64(&[2, 8, skel.len(), 12], &fk_targets(&skel, &poses))?;
    out.push(check("posenet.loss", &inputs, probes, c, seed + 11, |g, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        let y = net.forward(g, &bound, v[0], false)?;
        net.loss(g, y, &target, &skel)
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kernel_passes() {
        let reports = kernel_suite(7).unwrap();
        for r in &reports {
            assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_err);
        }
        assert!(reports.len() >= 25);
    }

    #[test]
    fn both_networks_pass() {
        let reports = network_suite(3).unwrap();
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // |x| has derivative sign(x); pretending it is x must be caught.
        let x = Tensor::<f64>::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let r = check("square-vs-linear", &[x], 20, 1e-6, 1, |g, v| {
            // value x*x but gradient path through a detached copy for half of it
            let c = g.constant(g.value(v[0]).clone());
            g.mul(v[0], c)
        })
        .unwrap();
        assert!(!r.passed());
    }
}
