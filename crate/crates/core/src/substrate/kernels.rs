//! Forward/backward kernels shared by the tape and the plain-tensor API.

use super::mask::AttentionMask;
use super::tensor::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Multi-head masked attention. `q` is `[n, d]`, `k`/`v` are `[m, d]`.
///
/// Returns the output and the dense softmax weights `probs[(h * n + i) * m + j]`,
/// exactly zero wherever the mask hides key `j` from query `i`. Masked logits
/// are never read, so masked keys cannot influence the result.
pub(crate) fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    n: usize,
    d: usize,
    heads: usize,
    mask: &AttentionMask,
) -> (Vec<S>, Vec<S>) {
    let m = mask.cols();
    let dh = d / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let (rs, one) = (d as isize, 1isize);
    let mut out = vec![S::zero(); n * d];
    let mut probs = vec![S::zero(); heads * n * m];
    let mut logits = vec![S::zero(); n * m];
    for h in 0..heads {
        let off = h * dh;
        // logits = scale · Q_h K_hᵀ
        S::gemm(
            n, dh, m, scale,
            &q[off..], rs, one,
            &k[off..], one, rs,
            S::zero(), &mut logits, m as isize, one,
        );
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        for i in 0..n {
            let keys = mask.row_keys(i);
            let row = &logits[i * m..(i + 1) * m];
            let mut max = S::neg_infinity();
            for &j in keys {
                max = max.max(row[j as usize]);
            }
            let pr = &mut p[i * m..(i + 1) * m];
            let mut denom = S::zero();
            for &j in keys {
                let e = (row[j as usize] - max).exp();
                pr[j as usize] = e;
                denom = denom + e;
            }
            let inv = S::one() / denom;
            for &j in keys {
                pr[j as usize] = pr[j as usize] * inv;
            }
        }
        // out_h = P V_h
        S::gemm(
            n, m, dh, S::one(),
            p, m as isize, one,
            &v[off..], rs, one,
            S::zero(), &mut out[off..], rs, one,
        );
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
    mask: &AttentionMask,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let (rs, one, ms) = (d as isize, 1isize, m as isize);
    let mut dq = vec![S::zero(); n * d];
    let mut dk = vec![S::zero(); m * d];
    let mut dv = vec![S::zero(); m * d];
    let mut ds = vec![S::zero(); n * m];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * n * m..(h + 1) * n * m];
        // dV_h = Pᵀ dO_h
        S::gemm(
            m, n, dh, S::one(),
            p, one, ms,
            &dout[off..], rs, one,
            S::zero(), &mut dv[off..], rs, one,
        );
        // dP = dO_h V_hᵀ, then dS = P ⊙ (dP − rowsum(P ⊙ dP)) · scale on visible entries.
        S::gemm(
            n, dh, m, S::one(),
            &dout[off..], rs, one,
            &v[off..], one, rs,
            S::zero(), &mut ds, ms, one,
        );
        for i in 0..n {
            let keys = mask.row_keys(i);
            let pr = &p[i * m..(i + 1) * m];
            let row = &mut ds[i * m..(i + 1) * m];
            let mut dot = S::zero();
            for &j in keys {
                dot = dot + pr[j as usize] * row[j as usize];
            }
            let mut next = 0usize;
            for &j in keys {
                let j = j as usize;
                for r in &mut row[next..j] {
                    *r = S::zero();
                }
                row[j] = pr[j] * (row[j] - dot) * scale;
                next = j + 1;
            }
            for r in &mut row[next..] {
                *r = S::zero();
            }
        }
        // dQ_h = dS K_h, dK_h = dSᵀ Q_h
        S::gemm(
            n, m, dh, S::one(),
            &ds, ms, one,
            &k[off..], rs, one,
            S::zero(), &mut dq[off..], rs, one,
        );
        S::gemm(
            m, n, dh, S::one(),
            &ds, one, ms,
            &q[off..], rs, one,
            S::zero(), &mut dk[off..], rs, one,
        );
    }
    (dq, dk, dv)
}

/// Row-wise normalization; returns output plus per-row mean and inverse std.
pub(crate) fn layer_norm_forward<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    d: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = x.len() / d;
    let eps = S::from_f64(LAYER_NORM_EPS).unwrap();
    let dn = S::from_usize(d).unwrap();
    let mut out = vec![S::zero(); x.len()];
    let mut means = Vec::with_capacity(n);
    let mut rstds = Vec::with_capacity(n);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let rstd = S::one() / (var + eps).sqrt();
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * rstd * gain[c] + bias[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<S: Scalar>(
    x: &[S],
    gain: &[S],
    means: &[S],
    rstds: &[S],
    dy: &[S],
    d: usize,
    dgain: &mut [S],
    dbias: &mut [S],
) -> Vec<S> {
    let n = x.len() / d;
    let dn = S::from_usize(d).unwrap();
    let mut dx = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); d];
    let mut dxhat = vec![S::zero(); d];
    for r in 0..n {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for c in 0..d {
            xhat[c] = (x[r * d + c] - mean) * rstd;
            let g = dy[r * d + c];
            dgain[c] = dgain[c] + g * xhat[c];
            dbias[c] = dbias[c] + g;
            dxhat[c] = g * gain[c];
            sum_dxhat = sum_dxhat + dxhat[c];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[c] * xhat[c];
        }
        for c in 0..d {
            dx[r * d + c] = rstd * (dxhat[c] - sum_dxhat / dn - xhat[c] * sum_dxhat_xhat / dn);
        }
    }
    dx
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4).unwrap();
    let a = S::from_f64(0.044_715).unwrap();
    let half = S::from_f64(0.5).unwrap();
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4).unwrap();
    let a = S::from_f64(0.044_715).unwrap();
    let half = S::from_f64(0.5).unwrap();
    let three = S::from_f64(3.0).unwrap();
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + three * a * x * x)
}
