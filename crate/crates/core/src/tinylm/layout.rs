//! Offsets of every tensor inside the flat parameter vector.

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Weight matrices are stored row-major as `[in × out]`, so a row vector is
/// multiplied on the left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, h, c) = (cfg.vocab_size, cfg.embed_dim, cfg.mlp_dim, cfg.context_len);
        let mut at = 0usize;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(v * d);
        let pos_emb = take(c * d);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * h),
                b1: take(h),
                w2: take(h * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * v);
        let b_out = take(v);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: at,
        }
    }

    /// Ranges holding layer-norm gains (initialized to one).
    pub fn gain_ranges(&self, d: usize) -> Vec<std::ops::Range<usize>> {
        let mut r: Vec<_> = self
            .layers
            .iter()
            .flat_map(|l| [l.ln1_g..l.ln1_g + d, l.ln2_g..l.ln2_g + d])
            .collect();
        r.push(self.lnf_g..self.lnf_g + d);
        r
    }
}
