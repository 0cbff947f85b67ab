//! First-order optimizers over a flat parameter vector, plus the fixed-order
//! parallel gradient accumulation used by every training loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

impl Optimizer {
    /// AdamW defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8, no weight decay.
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adamw => Optimizer::AdamW {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
                t: 0,
            },
        }
    }

    /// One descent step on a loss whose gradient is `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                m,
                v,
                t,
            } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    params[i] -= lr * (mhat / (vhat.sqrt() + *eps) + *weight_decay * params[i]);
                }
            }
        }
    }
}

/// Items per parallel work unit. Fixed, so partial sums do not depend on the
/// number of worker threads.
pub(crate) const ACCUM_CHUNK: usize = 4;

/// Sums per-item gradient contributions and collects per-item outputs. Each
/// chunk of [`ACCUM_CHUNK`] items accumulates into its own buffer; chunk
/// buffers are then added in order.
pub(crate) fn accumulate<T, R, F, E>(items: &[T], num_params: usize, f: F) -> Result<(Vec<f64>, Vec<R>), E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T, &mut [f64]) -> Result<R, E> + Sync,
{
    let partials: Result<Vec<(Vec<f64>, Vec<R>)>, E> = items
        .par_chunks(ACCUM_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; num_params];
            let mut outs = Vec::with_capacity(chunk.len());
            for it in chunk {
                outs.push(f(it, &mut g)?);
            }
            Ok((g, outs))
        })
        .collect();
    let mut total = vec![0.0; num_params];
    let mut outs = Vec::with_capacity(items.len());
    for (i, (p, o)) in partials?.into_iter().enumerate() {
        if i == 0 {
            total = p;
        } else {
            for (t, x) in total.iter_mut().zip(&p) {
                *t += x;
            }
        }
        outs.extend(o);
    }
    Ok((total, outs))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adamw] {
            let mut p = vec![0.5, -1.0, 2.0];
            let mut opt = Optimizer::new(kind, 3);
            opt.step(&mut p, &[1.0, 2.0, -3.0], 0.0);
            assert_eq!(p, vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr_times_sign() {
        let mut p = vec![0.0, 0.0];
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 2);
        opt.step(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn accumulation_is_order_fixed() {
        let items: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let run = || {
            accumulate::<_, _, _, ()>(&items, 2, |x, g| {
                g[0] += x;
                g[1] += x * x;
                Ok(*x)
            })
            .unwrap()
        };
        let (g, outs) = run();
        assert!((g[0] - 5.5).abs() < 1e-12);
        assert_eq!(outs, items);
        assert_eq!(run(), (g, outs));
    }
}
