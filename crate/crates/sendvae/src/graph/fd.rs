//! Central finite-difference gradient checking.
//!
//! The checker never looks inside the graph: it re-evaluates a caller-supplied
//! loss closure at perturbed leaf values, which keeps it an independent oracle
//! for the analytic gradients produced by [`super::Graph::backward`].

use ndarray::ArrayD;
use rand::Rng;

pub struct FdSettings {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per leaf (all coordinates if the leaf is smaller).
    pub samples_per_leaf: usize,
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            step: 1e-5,
            samples_per_leaf: 24,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug)]
pub struct FdOutcome {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients against central differences of `loss_fn`.
///
/// `analytic[i]` must hold the gradient for `leaves[i]` (zeros are fine for
/// leaves the loss genuinely ignores).
pub fn check_gradients(
    leaves: &[ArrayD<f64>],
    loss_fn: &dyn Fn(&[ArrayD<f64>]) -> f64,
    analytic: &[ArrayD<f64>],
    settings: &FdSettings,
) -> FdOutcome {
    assert_eq!(leaves.len(), analytic.len());
    let mut rng = crate::rng::stream(settings.seed, "fdcheck", 0);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    let mut work: Vec<ArrayD<f64>> = leaves.to_vec();
    for li in 0..leaves.len() {
        let n = leaves[li].len();
        if n == 0 {
            continue;
        }
        let coords: Vec<usize> = if n <= settings.samples_per_leaf {
            (0..n).collect()
        } else {
            (0..settings.samples_per_leaf)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        for &ci in &coords {
            let orig = leaves[li].as_slice().unwrap()[ci];
            let h = settings.step * orig.abs().max(1.0);

            work[li].as_slice_mut().unwrap()[ci] = orig + h;
            let up = loss_fn(&work);
            work[li].as_slice_mut().unwrap()[ci] = orig - h;
            let down = loss_fn(&work);
            work[li].as_slice_mut().unwrap()[ci] = orig;

            let fd = (up - down) / (2.0 * h);
            let an = analytic[li].as_slice().unwrap()[ci];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(settings.floor);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    FdOutcome {
        max_rel_err: max_rel,
        checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::{ArrayD, IxDyn};

    fn random_leaf(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::stream(seed, "fdleaf", 0);
        let mut v = vec![0.0f64; shape.iter().product()];
        crate::rng::fill_normal(&mut rng, &mut v);
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Composite graph touching most op families, checked against FD.
    #[test]
    fn composite_graph_gradients_match_fd() {
        let leaves = vec![
            random_leaf(&[2, 3, 4, 4], 1), // image-like input
            random_leaf(&[2, 3, 3, 3], 2), // conv weights
            random_leaf(&[4], 3),          // layernorm gain over last dim
            random_leaf(&[4], 4),          // layernorm bias
        ];
        let run = |ls: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
            let mut g = Graph::<f64>::new();
            let x = g.variable(ls[0].clone());
            let w = g.variable(ls[1].clone());
            let gain = g.variable(ls[2].clone());
            let bias = g.variable(ls[3].clone());

            let c = g.conv2d(x, w, 1, 1, 1); // (2,2,4,4)
            let c = g.silu(c);
            let t = g.patchify(c, 2); // (2,4,8)
            let t = g.reshape(t, &[2, 4, 2, 4]);
            let t = g.layer_norm(t, gain, bias, 1e-5);
            let t = g.softmax(t, 3);
            let t = g.gelu(t);
            let s = g.sum_axis(t, 2, false);
            let m = g.mean_all(s);
            let sq = g.square(m);
            let grads = g.backward(sq);
            (
                g.scalar(sq),
                vec![
                    grads.get_or_zeros(x, ls[0].shape()),
                    grads.get_or_zeros(w, ls[1].shape()),
                    grads.get_or_zeros(gain, ls[2].shape()),
                    grads.get_or_zeros(bias, ls[3].shape()),
                ],
            )
        };
        let (_, analytic) = run(&leaves);
        let outcome = check_gradients(
            &leaves,
            &|ls| run(ls).0,
            &analytic,
            &FdSettings {
                samples_per_leaf: 16,
                ..Default::default()
            },
        );
        assert!(
            outcome.max_rel_err < 1e-6,
            "max rel err {}",
            outcome.max_rel_err
        );
    }

    #[test]
    fn attention_shaped_gradients_match_fd() {
        let leaves = vec![
            random_leaf(&[2, 4, 6], 10), // tokens
            random_leaf(&[6, 6], 11),    // projection
        ];
        let run = |ls: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
            let mut g = Graph::<f64>::new();
            let t = g.variable(ls[0].clone());
            let w = g.variable(ls[1].clone());
            let flat = g.reshape(t, &[8, 6]);
            let q = g.matmul(flat, w);
            let q = g.reshape(q, &[2, 4, 6]);
            let scores = g.bat_matmul(q, q, true); // (2,4,4)
            let scores = g.scale(scores, 1.0 / (6f64).sqrt());
            let attn = g.softmax(scores, 2);
            let out = g.bat_matmul(attn, q, false);
            let loss = g.mean_all(out);
            let loss = g.square(loss);
            let grads = g.backward(loss);
            (
                g.scalar(loss),
                vec![
                    grads.get_or_zeros(t, ls[0].shape()),
                    grads.get_or_zeros(w, ls[1].shape()),
                ],
            )
        };
        let (_, analytic) = run(&leaves);
        let outcome = check_gradients(&leaves, &|ls| run(ls).0, &analytic, &Default::default());
        assert!(
            outcome.max_rel_err < 1e-6,
            "max rel err {}",
            outcome.max_rel_err
        );
    }

    #[test]
    fn pooling_upsample_embedding_ce_match_fd() {
        let leaves = vec![
            random_leaf(&[2, 2, 4, 4], 20), // feature map
            random_leaf(&[5, 8], 21),       // embedding table
        ];
        let labels = vec![1usize, 3];
        let run = |ls: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
            let mut g = Graph::<f64>::new();
            let x = g.variable(ls[0].clone());
            let table = g.variable(ls[1].clone());
            let up = g.upsample2x(x); // (2,2,8,8)
            let pooled = g.avg_pool2d(up, 4); // (2,2,2,2)
            let flat = g.reshape(pooled, &[2, 8]);
            let emb = g.embedding(table, &[0, 4]); // (2,8)
            let mixed = g.add(flat, emb);
            let loss = g.cross_entropy(mixed, &labels);
            let grads = g.backward(loss);
            (
                g.scalar(loss),
                vec![
                    grads.get_or_zeros(x, ls[0].shape()),
                    grads.get_or_zeros(table, ls[1].shape()),
                ],
            )
        };
        let (_, analytic) = run(&leaves);
        let outcome = check_gradients(&leaves, &|ls| run(ls).0, &analytic, &Default::default());
        assert!(
            outcome.max_rel_err < 1e-6,
            "max rel err {}",
            outcome.max_rel_err
        );
    }
}
