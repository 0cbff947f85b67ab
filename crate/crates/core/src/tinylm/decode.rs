//! Incremental single-token forward with cached keys and values.

use super::layout::Layout;
use super::linalg::{gelu, gemm, layernorm, softmax_in_place};
use super::ModelConfig;
use crate::vocab::TokenId;

pub(crate) struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.num_layers],
            values: vec![Vec::new(); cfg.num_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

/// Feeds one token and returns the next-token logits.
pub(crate) fn step(cfg: &ModelConfig, lay: &Layout, p: &[f64], st: &mut DecodeState, tok: TokenId) -> Vec<f64> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_dim;
    let nh = cfg.num_heads;
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();
    let pos = st.len;

    let mut x: Vec<f64> = p[lay.tok_emb + tok as usize * d..][..d]
        .iter()
        .zip(&p[lay.pos_emb + pos * d..][..d])
        .map(|(a, b)| a + b)
        .collect();
    let mut xhat = vec![0.0; d];
    let mut a = vec![0.0; d];

    for (li, lo) in lay.layers.iter().enumerate() {
        layernorm(&x, 1, d, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], &mut xhat, &mut a);
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        gemm(1, d, d, &a, false, &p[lo.wq..][..d * d], false, &mut q, false);
        gemm(1, d, d, &a, false, &p[lo.wk..][..d * d], false, &mut k, false);
        gemm(1, d, d, &a, false, &p[lo.wv..][..d * d], false, &mut v, false);
        st.keys[li].extend_from_slice(&k);
        st.values[li].extend_from_slice(&v);
        let keys = &st.keys[li];
        let values = &st.values[li];
        let n = pos + 1;

        let mut o = vec![0.0; d];
        let mut row = vec![0.0; n];
        for head in 0..nh {
            let c0 = head * hd;
            for (u, s) in row.iter_mut().enumerate() {
                *s = q[c0..c0 + hd]
                    .iter()
                    .zip(&keys[u * d + c0..u * d + c0 + hd])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale;
            }
            softmax_in_place(&mut row);
            for (u, &pr) in row.iter().enumerate() {
                for j in 0..hd {
                    o[c0 + j] += pr * values[u * d + c0 + j];
                }
            }
        }
        gemm(1, d, d, &o, false, &p[lo.wo..][..d * d], false, &mut x, true);

        layernorm(&x, 1, d, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], &mut xhat, &mut a);
        let mut u = p[lo.b1..][..h].to_vec();
        gemm(1, d, h, &a, false, &p[lo.w1..][..d * h], false, &mut u, true);
        for z in u.iter_mut() {
            *z = gelu(*z);
        }
        for j in 0..d {
            x[j] += p[lo.b2 + j];
        }
        gemm(1, h, d, &u, false, &p[lo.w2..][..h * d], false, &mut x, true);
    }
    st.len += 1;

    layernorm(&x, 1, d, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d], &mut xhat, &mut a);
    let vsz = cfg.vocab_size;
    let mut logits = p[lay.b_out..][..vsz].to_vec();
    gemm(1, d, vsz, &a, false, &p[lay.w_out..][..d * vsz], false, &mut logits, true);
    logits
}
