//! Forward and backward loops for the non-trivial differentiable kernels.

use super::tensor::{gemm, strides, MatLayout, Scalar};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanhf` dominated inference time.
fn fast_tanh<S: Scalar>(u: S) -> S {
    let two = S::lit(2.0);
    S::one() - two / ((two * u).exp() + S::one())
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let k = S::lit(GELU_K);
    let half = S::lit(0.5);
    let t = fast_tanh(c * (x + k * x * x * x));
    half * x * (S::one() + t)
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let k = S::lit(GELU_K);
    let half = S::lit(0.5);
    let t = fast_tanh(c * (x + k * x * x * x));
    let dt = (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x);
    half * (S::one() + t) + half * x * dt
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Row-wise softmax over contiguous rows of length `cols`, in place.
pub(crate) fn softmax_rows<S: Scalar>(data: &mut [S], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        softmax_row(row, cols);
    }
}

/// Softmax over the first `valid` entries of `row`; the rest are set to zero.
fn softmax_row<S: Scalar>(row: &mut [S], valid: usize) {
    let mut max = S::neg_infinity();
    for &v in &row[..valid] {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row[..valid].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row[..valid].iter_mut() {
        *v *= inv;
    }
    for v in row[valid..].iter_mut() {
        *v = S::zero();
    }
}

pub(crate) fn softmax_rows_backward<S: Scalar>(y: &[S], g: &[S], cols: usize, out: &mut [S]) {
    for ((yr, gr), or) in y
        .chunks(cols)
        .zip(g.chunks(cols))
        .zip(out.chunks_mut(cols))
    {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o += yv * (gv - dot);
        }
    }
}

/// Layer normalization over rows; returns (output, per-row [mean, rstd]).
pub(crate) fn layer_norm_forward<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    cols: usize,
    eps: S,
) -> (Vec<S>, Vec<S>) {
    let rows = x.len() / cols;
    let mut out = vec![S::zero(); x.len()];
    let mut stats = Vec::with_capacity(rows * 2);
    let n = S::lit(cols as f64);
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = xr.iter().copied().sum::<S>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rstd = S::one() / (var + eps).sqrt();
        for (j, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
            *o = (v - mean) * rstd * gain[j] + bias[j];
        }
        stats.push(mean);
        stats.push(rstd);
    }
    (out, stats)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<S: Scalar>(
    x: &[S],
    gain: &[S],
    stats: &[S],
    g: &[S],
    cols: usize,
    dx: Option<&mut [S]>,
    dgain: Option<&mut [S]>,
    dbias: Option<&mut [S]>,
) {
    let n = S::lit(cols as f64);
    let mut dxhat = vec![S::zero(); cols];
    let mut dx = dx;
    let mut dgain = dgain;
    let mut dbias = dbias;
    for (r, (xr, gr)) in x.chunks(cols).zip(g.chunks(cols)).enumerate() {
        let mean = stats[2 * r];
        let rstd = stats[2 * r + 1];
        let mut sum_d = S::zero();
        let mut sum_dx = S::zero();
        for j in 0..cols {
            let xhat = (xr[j] - mean) * rstd;
            dxhat[j] = gr[j] * gain[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xhat;
            if let Some(dg) = dgain.as_deref_mut() {
                dg[j] += gr[j] * xhat;
            }
            if let Some(db) = dbias.as_deref_mut() {
                db[j] += gr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mean_d = sum_d / n;
            let mean_dx = sum_dx / n;
            let row = &mut dx[r * cols..(r + 1) * cols];
            for j in 0..cols {
                let xhat = (xr[j] - mean) * rstd;
                row[j] += rstd * (dxhat[j] - mean_d - xhat * mean_dx);
            }
        }
    }
}

/// Geometry of a scaled dot-product attention call over a `[A, L, B, D]` buffer:
/// attention runs along `L` independently for every `(a, b)` pair and head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub outer: usize,
    pub seq: usize,
    pub inner: usize,
    pub dim: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn groups(&self) -> usize {
        self.outer * self.inner * self.heads
    }

    /// Layout of the `(a, b, h)` head slice: `seq × head_dim`.
    fn slice(&self, a: usize, b: usize, h: usize) -> MatLayout {
        MatLayout {
            offset: (a * self.seq * self.inner + b) * self.dim + h * self.head_dim(),
            rs: self.inner * self.dim,
            cs: 1,
        }
    }

    fn for_each_group(&self, mut f: impl FnMut(usize, MatLayout)) {
        let mut gi = 0;
        for a in 0..self.outer {
            for b in 0..self.inner {
                for h in 0..self.heads {
                    f(gi, self.slice(a, b, h));
                    gi += 1;
                }
            }
        }
    }
}

/// Returns (output, attention probabilities) for `softmax(QKᵀ/√d)·V`.
pub(crate) fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    dims: AttnDims,
) -> (Vec<S>, Vec<S>) {
    let l = dims.seq;
    let dh = dims.head_dim();
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let mut out = vec![S::zero(); q.len()];
    let mut probs = vec![S::zero(); dims.groups() * l * l];
    dims.for_each_group(|gi, lay| {
        let p = &mut probs[gi * l * l..(gi + 1) * l * l];
        let pl = MatLayout::row_major(0, l);
        gemm(l, dh, l, scale, q, lay, k, lay.t(), false, p, pl);
        for (i, row) in p.chunks_mut(l).enumerate() {
            let valid = if dims.causal { i + 1 } else { l };
            softmax_row(row, valid);
        }
        gemm(l, l, dh, S::one(), p, pl, v, lay, false, &mut out, lay);
    });
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    g: &[S],
    dims: AttnDims,
    dq: &mut [S],
    dk: &mut [S],
    dv: &mut [S],
) {
    let l = dims.seq;
    let dh = dims.head_dim();
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let pl = MatLayout::row_major(0, l);
    let mut ds = vec![S::zero(); l * l];
    dims.for_each_group(|gi, lay| {
        let p = &probs[gi * l * l..(gi + 1) * l * l];
        // dP = dO · Vᵀ
        gemm(l, dh, l, S::one(), g, lay, v, lay.t(), false, &mut ds, pl);
        // dV += Pᵀ · dO
        gemm(l, l, dh, S::one(), p, pl.t(), g, lay, true, dv, lay);
        for (pr, dr) in p.chunks(l).zip(ds.chunks_mut(l)) {
            let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot);
            }
        }
        // dQ += scale · dS · K ; dK += scale · dSᵀ · Q
        gemm(l, l, dh, scale, &ds, pl, k, lay, true, dq, lay);
        gemm(l, l, dh, scale, &ds, pl.t(), q, lay, true, dk, lay);
    });
}

/// Generic axis permutation: `out.shape[i] = shape[perm[i]]`.
pub(crate) fn permute<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = (0..rank).map(|i| idx[i] * in_strides[perm[i]]).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// For each output element of a broadcast, the flat index of its source element.
pub(crate) fn expand_index(src_shape: &[usize], dst_shape: &[usize]) -> Vec<usize> {
    let rank = dst_shape.len();
    let pad = rank - src_shape.len();
    let src_strides = strides(src_shape);
    // Source stride per destination axis; zero along broadcast axes.
    let step: Vec<usize> = (0..rank)
        .map(|ax| match ax.checked_sub(pad) {
            Some(a) if src_shape[a] != 1 => src_strides[a],
            _ => 0,
        })
        .collect();
    let mut map = Vec::with_capacity(dst_shape.iter().product());
    fn fill(ax: usize, base: usize, dst: &[usize], step: &[usize], map: &mut Vec<usize>) {
        if ax + 1 == dst.len() {
            map.extend((0..dst[ax]).map(|i| base + i * step[ax]));
        } else {
            for i in 0..dst[ax] {
                fill(ax + 1, base + i * step[ax], dst, step, map);
            }
        }
    }
    if rank == 0 {
        map.push(0);
    } else {
        fill(0, 0, dst_shape, &step, &mut map);
    }
    map
}

/// Coefficients of R = cosθ·I + A·[v]× + B·v·vᵀ and the radial derivatives
/// a1 = A'(θ)/θ, b1 = B'(θ)/θ.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    if theta < 0.05 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let a = 1.0 - t2 / 6.0 + t4 / 120.0;
        let b = 0.5 - t2 / 24.0 + t4 / 720.0;
        let a1 = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0;
        let b1 = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0;
        (a, b, a1, b1)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let a = s / theta;
        let b = (1.0 - c) / t2;
        let a1 = (theta * c - s) / (t2 * theta);
        let b1 = (theta * s - 2.0 * (1.0 - c)) / (t2 * t2);
        (a, b, a1, b1)
    }
}

pub(crate) fn axis_angle_forward<S: Scalar>(v: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(v.len() * 3);
    for r in v.chunks(3) {
        let (x, y, z) = (r[0].as_f64(), r[1].as_f64(), r[2].as_f64());
        let theta = (x * x + y * y + z * z).sqrt();
        let (a, b, _, _) = rodrigues_coeffs(theta);
        let c = 1.0 - b * theta * theta;
        let m = [
            c + b * x * x,
            -a * z + b * x * y,
            a * y + b * x * z,
            a * z + b * y * x,
            c + b * y * y,
            -a * x + b * y * z,
            -a * y + b * z * x,
            a * x + b * z * y,
            c + b * z * z,
        ];
        out.extend(m.iter().map(|&e| S::lit(e)));
    }
    out
}

pub(crate) fn axis_angle_backward<S: Scalar>(v: &[S], g: &[S], dv: &mut [S]) {
    for ((r, gm), d) in v.chunks(3).zip(g.chunks(9)).zip(dv.chunks_mut(3)) {
        let vv = [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()];
        let gg: Vec<f64> = gm.iter().map(|e| e.as_f64()).collect();
        let theta = (vv[0] * vv[0] + vv[1] * vv[1] + vv[2] * vv[2]).sqrt();
        let (a, b, a1, b1) = rodrigues_coeffs(theta);
        let tr = gg[0] + gg[4] + gg[8];
        let w = [gg[7] - gg[5], gg[2] - gg[6], gg[3] - gg[1]];
        let vw = vv[0] * w[0] + vv[1] * w[1] + vv[2] * w[2];
        let mut gv = [0.0; 3];
        let mut gtv = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                gv[i] += gg[i * 3 + j] * vv[j];
                gtv[i] += gg[j * 3 + i] * vv[j];
            }
        }
        let vgv = vv[0] * gv[0] + vv[1] * gv[1] + vv[2] * gv[2];
        let radial = -a * tr + a1 * vw + b1 * vgv;
        for i in 0..3 {
            let val = vv[i] * radial + a * w[i] + b * (gv[i] + gtv[i]);
            d[i] += S::lit(val);
        }
    }
}

fn mat3_mul(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
    c
}

/// `A · Bᵀ`
fn mat3_mul_bt(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = a[i * 3] * b[j * 3] + a[i * 3 + 1] * b[j * 3 + 1] + a[i * 3 + 2] * b[j * 3 + 2];
        }
    }
    c
}

/// `Aᵀ · B`
fn mat3_mul_at(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = a[i] * b[j] + a[3 + i] * b[3 + j] + a[6 + i] * b[6 + j];
        }
    }
    c
}

fn mat3_vec(a: &[f64], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

/// Forward kinematics over `[N, J, 9]` local rotations → `[N, J, 12]`
/// (global rotation, then root-relative position).
pub(crate) fn fk_forward<S: Scalar>(
    local: &[S],
    parents: &[Option<usize>],
    offsets: &[[f64; 3]],
) -> Vec<S> {
    let j = parents.len();
    let frames = local.len() / (9 * j);
    let mut out = Vec::with_capacity(frames * j * 12);
    let mut glob = vec![[0.0f64; 9]; j];
    let mut pos = vec![[0.0f64; 3]; j];
    for f in 0..frames {
        for ji in 0..j {
            let l: Vec<f64> = local[(f * j + ji) * 9..(f * j + ji + 1) * 9]
                .iter()
                .map(|e| e.as_f64())
                .collect();
            match parents[ji] {
                None => {
                    glob[ji].copy_from_slice(&l);
                    pos[ji] = [0.0; 3];
                }
                Some(p) => {
                    glob[ji] = mat3_mul(&glob[p], &l);
                    let d = mat3_vec(&glob[p], &offsets[ji]);
                    pos[ji] = [pos[p][0] + d[0], pos[p][1] + d[1], pos[p][2] + d[2]];
                }
            }
        }
        for ji in 0..j {
            out.extend(glob[ji].iter().map(|&e| S::lit(e)));
            out.extend(pos[ji].iter().map(|&e| S::lit(e)));
        }
    }
    out
}

pub(crate) fn fk_backward<S: Scalar>(
    local: &[S],
    out: &[S],
    g: &[S],
    parents: &[Option<usize>],
    offsets: &[[f64; 3]],
    dlocal: &mut [S],
) {
    let j = parents.len();
    let frames = local.len() / (9 * j);
    for f in 0..frames {
        let mut dg: Vec<[f64; 9]> = (0..j)
            .map(|ji| {
                let base = (f * j + ji) * 12;
                let mut m = [0.0; 9];
                for (e, v) in m.iter_mut().zip(&g[base..base + 9]) {
                    *e = v.as_f64();
                }
                m
            })
            .collect();
        let mut dp: Vec<[f64; 3]> = (0..j)
            .map(|ji| {
                let base = (f * j + ji) * 12 + 9;
                [g[base].as_f64(), g[base + 1].as_f64(), g[base + 2].as_f64()]
            })
            .collect();
        for ji in (0..j).rev() {
            let lbase = (f * j + ji) * 9;
            let l: Vec<f64> = local[lbase..lbase + 9].iter().map(|e| e.as_f64()).collect();
            match parents[ji] {
                None => {
                    for (d, &v) in dlocal[lbase..lbase + 9].iter_mut().zip(dg[ji].iter()) {
                        *d += S::lit(v);
                    }
                }
                Some(p) => {
                    let pbase = (f * j + p) * 12;
                    let gp: Vec<f64> = out[pbase..pbase + 9].iter().map(|e| e.as_f64()).collect();
                    // G_j = G_p · L_j
                    let dl = mat3_mul_at(&gp, &dg[ji]);
                    for (d, &v) in dlocal[lbase..lbase + 9].iter_mut().zip(dl.iter()) {
                        *d += S::lit(v);
                    }
                    let dgp = mat3_mul_bt(&dg[ji], &l);
                    // P_j = P_p + G_p · o_j
                    let o = offsets[ji];
                    let dpj = dp[ji];
                    for r in 0..3 {
                        for c in 0..3 {
                            dg[p][r * 3 + c] += dgp[r * 3 + c] + dpj[r] * o[c];
                        }
                        dp[p][r] += dpj[r];
                    }
                }
            }
        }
    }
}

const GEODESIC_EPS: f64 = 1e-10;

/// Per-row geodesic angle (radians) between rotation matrices, smoothed at zero.
pub(crate) fn geodesic_rows<S: Scalar>(pred: &[S], target: &[S]) -> Vec<f64> {
    pred.chunks(9)
        .zip(target.chunks(9))
        .map(|(p, t)| {
            let (c, u) = geodesic_parts(p, t);
            let s = ((u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) / 4.0 + GEODESIC_EPS).sqrt();
            s.atan2(c)
        })
        .collect()
}

/// cos θ and the skew vector of `Pᵀ·T`.
fn geodesic_parts<S: Scalar>(p: &[S], t: &[S]) -> (f64, [f64; 3]) {
    let pf: Vec<f64> = p.iter().map(|e| e.as_f64()).collect();
    let tf: Vec<f64> = t.iter().map(|e| e.as_f64()).collect();
    let r = mat3_mul_at(&pf, &tf);
    let c = (r[0] + r[4] + r[8] - 1.0) / 2.0;
    let u = [r[7] - r[5], r[2] - r[6], r[3] - r[1]];
    (c, u)
}

pub(crate) fn geodesic_backward<S: Scalar>(pred: &[S], target: &[S], scale: f64, dpred: &mut [S]) {
    for ((p, t), d) in pred.chunks(9).zip(target.chunks(9)).zip(dpred.chunks_mut(9)) {
        let (c, u) = geodesic_parts(p, t);
        let s = ((u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) / 4.0 + GEODESIC_EPS).sqrt();
        let den = s * s + c * c;
        let dtheta_ds = c / den;
        let dtheta_dc = -s / den;
        let du: [f64; 3] = [
            dtheta_ds * u[0] / (4.0 * s),
            dtheta_ds * u[1] / (4.0 * s),
            dtheta_ds * u[2] / (4.0 * s),
        ];
        let tf: Vec<f64> = t.iter().map(|e| e.as_f64()).collect();
        let mut gp = [0.0; 9];
        for i in 0..3 {
            for a in 0..3 {
                // dc/dP_ia = T_ia / 2
                gp[i * 3 + a] += dtheta_dc * tf[i * 3 + a] / 2.0;
            }
            // u0 = R21 - R12 (0-based: R[2][1] - R[1][2]), R_ab = Σ_i P_ia T_ib
            gp[i * 3 + 2] += du[0] * tf[i * 3 + 1];
            gp[i * 3 + 1] -= du[0] * tf[i * 3 + 2];
            // u1 = R02 - R20
            gp[i * 3] += du[1] * tf[i * 3 + 2];
            gp[i * 3 + 2] -= du[1] * tf[i * 3];
            // u2 = R10 - R01
            gp[i * 3 + 1] += du[2] * tf[i * 3];
            gp[i * 3] -= du[2] * tf[i * 3 + 1];
        }
        for (dd, v) in d.iter_mut().zip(gp.iter()) {
            *dd += S::lit(v * scale);
        }
    }
}
