//! Full-sequence forward pass with a recorded trace, and its hand-derived
//! reverse pass.

use super::layout::{LayerOffsets, Layout};
use super::linalg::{gelu, gelu_grad, gemm, layernorm, layernorm_backward, softmax_in_place};
use super::ModelConfig;
use crate::vocab::TokenId;

struct LayerTrace {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × T × T`, lower triangle populated.
    probs: Vec<f64>,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct Trace {
    tokens: Vec<TokenId>,
    layers: Vec<LayerTrace>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    /// Final normalized hidden states, `T × d`.
    pub f: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

fn slice(p: &[f64], at: usize, n: usize) -> &[f64] {
    &p[at..at + n]
}

pub(crate) fn forward(cfg: &ModelConfig, lay: &Layout, p: &[f64], tokens: &[TokenId]) -> Trace {
    let t_len = tokens.len();
    let d = cfg.embed_dim;
    let hd = d / cfg.num_heads;
    let h = cfg.mlp_dim;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = vec![0.0; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = slice(p, lay.tok_emb + tok as usize * d, d);
        let pe = slice(p, lay.pos_emb + t * d, d);
        for j in 0..d {
            x[t * d + j] = e[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lo in &lay.layers {
        let mut xhat1 = vec![0.0; t_len * d];
        let mut a = vec![0.0; t_len * d];
        let rstd1 = layernorm(&x, t_len, d, slice(p, lo.ln1_g, d), slice(p, lo.ln1_b, d), &mut xhat1, &mut a);
        let mut q = vec![0.0; t_len * d];
        let mut k = vec![0.0; t_len * d];
        let mut v = vec![0.0; t_len * d];
        gemm(t_len, d, d, &a, false, slice(p, lo.wq, d * d), false, &mut q, false);
        gemm(t_len, d, d, &a, false, slice(p, lo.wk, d * d), false, &mut k, false);
        gemm(t_len, d, d, &a, false, slice(p, lo.wv, d * d), false, &mut v, false);

        let mut probs = vec![0.0; cfg.num_heads * t_len * t_len];
        let mut o = vec![0.0; t_len * d];
        for head in 0..cfg.num_heads {
            let c0 = head * hd;
            for t in 0..t_len {
                let row = &mut probs[(head * t_len + t) * t_len..(head * t_len + t) * t_len + t + 1];
                let qt = &q[t * d + c0..t * d + c0 + hd];
                for (u, s) in row.iter_mut().enumerate() {
                    let ku = &k[u * d + c0..u * d + c0 + hd];
                    *s = qt.iter().zip(ku).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                let ot = &mut o[t * d + c0..t * d + c0 + hd];
                for (u, &pr) in row.iter().enumerate() {
                    let vu = &v[u * d + c0..u * d + c0 + hd];
                    for j in 0..hd {
                        ot[j] += pr * vu[j];
                    }
                }
            }
        }
        // x += o Wo
        gemm(t_len, d, d, &o, false, slice(p, lo.wo, d * d), false, &mut x, true);

        let mut xhat2 = vec![0.0; t_len * d];
        let mut b = vec![0.0; t_len * d];
        let rstd2 = layernorm(&x, t_len, d, slice(p, lo.ln2_g, d), slice(p, lo.ln2_b, d), &mut xhat2, &mut b);
        let mut u = vec![0.0; t_len * h];
        for t in 0..t_len {
            u[t * h..(t + 1) * h].copy_from_slice(slice(p, lo.b1, h));
        }
        gemm(t_len, d, h, &b, false, slice(p, lo.w1, d * h), false, &mut u, true);
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let b2 = slice(p, lo.b2, d);
        for t in 0..t_len {
            for j in 0..d {
                x[t * d + j] += b2[j];
            }
        }
        gemm(t_len, h, d, &g, false, slice(p, lo.w2, h * d), false, &mut x, true);

        layers.push(LayerTrace {
            xhat1,
            rstd1,
            a,
            q,
            k,
            v,
            probs,
            o,
            xhat2,
            rstd2,
            b,
            u,
            g,
        });
    }

    let mut xhatf = vec![0.0; t_len * d];
    let mut f = vec![0.0; t_len * d];
    let rstdf = layernorm(&x, t_len, d, slice(p, lay.lnf_g, d), slice(p, lay.lnf_b, d), &mut xhatf, &mut f);
    Trace {
        tokens: tokens.to_vec(),
        layers,
        xhatf,
        rstdf,
        f,
    }
}

/// Logits for the selected positions, `rows.len() × V`.
pub(crate) fn logits_at(cfg: &ModelConfig, lay: &Layout, p: &[f64], tr: &Trace, rows: &[usize]) -> Vec<f64> {
    let d = cfg.embed_dim;
    let vsz = cfg.vocab_size;
    let mut fr = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        fr.extend_from_slice(&tr.f[r * d..(r + 1) * d]);
    }
    let mut out = Vec::with_capacity(rows.len() * vsz);
    for _ in rows {
        out.extend_from_slice(slice(p, lay.b_out, vsz));
    }
    gemm(rows.len(), d, vsz, &fr, false, slice(p, lay.w_out, d * vsz), false, &mut out, true);
    out
}

/// Accumulates `∂J/∂θ` into `grad`, where `dlogits` (`rows.len() × V`) is the
/// gradient of the objective `J` with respect to the logits at `rows`.
pub(crate) fn backward(
    cfg: &ModelConfig,
    lay: &Layout,
    p: &[f64],
    tr: &Trace,
    rows: &[usize],
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let t_len = tr.len();
    let d = cfg.embed_dim;
    let vsz = cfg.vocab_size;

    // Output head.
    let mut fr = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        fr.extend_from_slice(&tr.f[r * d..(r + 1) * d]);
    }
    gemm(d, rows.len(), vsz, &fr, true, dlogits, false, &mut grad[lay.w_out..lay.w_out + d * vsz], true);
    for (i, _) in rows.iter().enumerate() {
        for j in 0..vsz {
            grad[lay.b_out + j] += dlogits[i * vsz + j];
        }
    }
    let mut dfr = vec![0.0; rows.len() * d];
    gemm(rows.len(), vsz, d, dlogits, false, slice(p, lay.w_out, d * vsz), true, &mut dfr, false);
    let mut df = vec![0.0; t_len * d];
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..d {
            df[r * d + j] += dfr[i * d + j];
        }
    }

    let mut dx = vec![0.0; t_len * d];
    {
        let (dg, db) = split_pair(grad, lay.lnf_g, lay.lnf_b, d);
        layernorm_backward(&df, &tr.xhatf, &tr.rstdf, t_len, d, slice(p, lay.lnf_g, d), &mut dx, dg, db);
    }

    for (lo, lt) in lay.layers.iter().zip(&tr.layers).rev() {
        layer_backward(cfg, lo, p, lt, t_len, &mut dx, grad);
    }

    for (t, &tok) in tr.tokens.iter().enumerate() {
        let te = lay.tok_emb + tok as usize * d;
        let pe = lay.pos_emb + t * d;
        for j in 0..d {
            grad[te + j] += dx[t * d + j];
            grad[pe + j] += dx[t * d + j];
        }
    }
}

/// Disjoint mutable views of two `d`-long parameter blocks.
fn split_pair(grad: &mut [f64], a: usize, b: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + d <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + d], &mut hi[..d])
}

/// `dx` holds the gradient w.r.t. the layer output on entry and the gradient
/// w.r.t. the layer input on exit.
fn layer_backward(
    cfg: &ModelConfig,
    lo: &LayerOffsets,
    p: &[f64],
    lt: &LayerTrace,
    t_len: usize,
    dx: &mut [f64],
    grad: &mut [f64],
) {
    let d = cfg.embed_dim;
    let h = cfg.mlp_dim;
    let nh = cfg.num_heads;
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();

    // MLP: x_out = x_mid + gelu(b W1 + b1) W2 + b2
    gemm(h, t_len, d, &lt.g, true, dx, false, &mut grad[lo.w2..lo.w2 + h * d], true);
    for t in 0..t_len {
        for j in 0..d {
            grad[lo.b2 + j] += dx[t * d + j];
        }
    }
    let mut du = vec![0.0; t_len * h];
    gemm(t_len, d, h, dx, false, slice(p, lo.w2, h * d), true, &mut du, false);
    for (dz, &z) in du.iter_mut().zip(&lt.u) {
        *dz *= gelu_grad(z);
    }
    gemm(d, t_len, h, &lt.b, true, &du, false, &mut grad[lo.w1..lo.w1 + d * h], true);
    for t in 0..t_len {
        for j in 0..h {
            grad[lo.b1 + j] += du[t * h + j];
        }
    }
    let mut db = vec![0.0; t_len * d];
    gemm(t_len, h, d, &du, false, slice(p, lo.w1, d * h), true, &mut db, false);
    {
        let (dg, dbias) = split_pair(grad, lo.ln2_g, lo.ln2_b, d);
        // dx (grad w.r.t. x_mid) = dx_out + LN2 backward
        layernorm_backward(&db, &lt.xhat2, &lt.rstd2, t_len, d, slice(p, lo.ln2_g, d), dx, dg, dbias);
    }

    // Attention: x_mid = x_in + o Wo
    gemm(d, t_len, d, &lt.o, true, dx, false, &mut grad[lo.wo..lo.wo + d * d], true);
    let mut dout = vec![0.0; t_len * d];
    gemm(t_len, d, d, dx, false, slice(p, lo.wo, d * d), true, &mut dout, false);

    let mut dq = vec![0.0; t_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let mut dprow = vec![0.0; t_len];
    for head in 0..nh {
        let c0 = head * hd;
        for t in 0..t_len {
            let prow = &lt.probs[(head * t_len + t) * t_len..(head * t_len + t) * t_len + t + 1];
            let dot = &dout[t * d + c0..t * d + c0 + hd];
            let mut weighted = 0.0;
            for (u, &pr) in prow.iter().enumerate() {
                let vu = &lt.v[u * d + c0..u * d + c0 + hd];
                let dpu: f64 = dot.iter().zip(vu).map(|(a, b)| a * b).sum();
                dprow[u] = dpu;
                weighted += pr * dpu;
                let dvu = &mut dv[u * d + c0..u * d + c0 + hd];
                for j in 0..hd {
                    dvu[j] += pr * dot[j];
                }
            }
            let qt = &lt.q[t * d + c0..t * d + c0 + hd];
            for (u, &pr) in prow.iter().enumerate() {
                let ds = pr * (dprow[u] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let ku = &lt.k[u * d + c0..u * d + c0 + hd];
                for j in 0..hd {
                    dq[t * d + c0 + j] += ds * ku[j];
                    dk[u * d + c0 + j] += ds * qt[j];
                }
            }
        }
    }
    gemm(d, t_len, d, &lt.a, true, &dq, false, &mut grad[lo.wq..lo.wq + d * d], true);
    gemm(d, t_len, d, &lt.a, true, &dk, false, &mut grad[lo.wk..lo.wk + d * d], true);
    gemm(d, t_len, d, &lt.a, true, &dv, false, &mut grad[lo.wv..lo.wv + d * d], true);
    let mut da = vec![0.0; t_len * d];
    gemm(t_len, d, d, &dq, false, slice(p, lo.wq, d * d), true, &mut da, true);
    gemm(t_len, d, d, &dk, false, slice(p, lo.wk, d * d), true, &mut da, true);
    gemm(t_len, d, d, &dv, false, slice(p, lo.wv, d * d), true, &mut da, true);
    let (dg, dbias) = split_pair(grad, lo.ln1_g, lo.ln1_b, d);
    layernorm_backward(&da, &lt.xhat1, &lt.rstd1, t_len, d, slice(p, lo.ln1_g, d), dx, dg, dbias);
}
