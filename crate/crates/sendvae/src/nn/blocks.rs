//! Pre-norm transformer encoder blocks shared by the mapper, the latent flow
//! model and the learned teacher.

use super::{linear, normal_init, ones, xavier, Bound, ParamStore};
use crate::graph::{Graph, NodeId, Real};
use ndarray::{ArrayD, IxDyn};

#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    /// Feed-forward expansion ratio.
    pub ff_mult: usize,
}

/// Registers one block's parameters under `prefix`.
pub fn init_block<F: Real>(store: &mut ParamStore<F>, prefix: &str, cfg: BlockConfig, seed: u64) {
    let d = cfg.dim;
    let ff = d * cfg.ff_mult;
    store.insert(format!("{prefix}ln1.g"), ones(&[d]));
    store.insert(format!("{prefix}ln1.b"), super::zeros(&[d]));
    for name in ["wq", "wk", "wv", "wo"] {
        let key = format!("{prefix}attn.{name}");
        store.insert(key.clone(), xavier(seed, &key, &[d, d], d, d));
        store.insert(format!("{prefix}attn.{name}.b"), super::zeros(&[d]));
    }
    store.insert(format!("{prefix}ln2.g"), ones(&[d]));
    store.insert(format!("{prefix}ln2.b"), super::zeros(&[d]));
    let k1 = format!("{prefix}mlp.w1");
    store.insert(k1.clone(), xavier(seed, &k1, &[d, ff], d, ff));
    store.insert(format!("{prefix}mlp.b1"), super::zeros(&[ff]));
    let k2 = format!("{prefix}mlp.w2");
    store.insert(k2.clone(), xavier(seed, &k2, &[ff, d], ff, d));
    store.insert(format!("{prefix}mlp.b2"), super::zeros(&[d]));
}

/// Multi-head self-attention over `(B, N, C)` tokens.
fn attention<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
    cfg: BlockConfig,
) -> NodeId {
    let shape = g.shape(x).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let h = cfg.heads;
    let dh = c / h;

    let to_heads = |g: &mut Graph<F>, t: NodeId| -> NodeId {
        let t = g.reshape(t, &[b, n, h, dh]);
        let t = g.permute(t, &[0, 2, 1, 3]);
        g.reshape(t, &[b * h, n, dh])
    };

    let q = linear(g, x, bound.id(&format!("{prefix}attn.wq")), Some(bound.id(&format!("{prefix}attn.wq.b"))));
    let k = linear(g, x, bound.id(&format!("{prefix}attn.wk")), Some(bound.id(&format!("{prefix}attn.wk.b"))));
    let v = linear(g, x, bound.id(&format!("{prefix}attn.wv")), Some(bound.id(&format!("{prefix}attn.wv.b"))));
    let (q, k, v) = (to_heads(g, q), to_heads(g, k), to_heads(g, v));

    let scores = g.bat_matmul(q, k, true);
    let scores = g.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = g.softmax(scores, 2);
    let out = g.bat_matmul(attn, v, false);

    let out = g.reshape(out, &[b, h, n, dh]);
    let out = g.permute(out, &[0, 2, 1, 3]);
    let out = g.reshape(out, &[b, n, c]);
    linear(g, out, bound.id(&format!("{prefix}attn.wo")), Some(bound.id(&format!("{prefix}attn.wo.b"))))
}

/// Pre-norm encoder block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub fn block_forward<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
    cfg: BlockConfig,
) -> NodeId {
    let eps = F::from_f64(1e-5);
    let normed = g.layer_norm(
        x,
        bound.id(&format!("{prefix}ln1.g")),
        bound.id(&format!("{prefix}ln1.b")),
        eps,
    );
    let att = attention(g, bound, prefix, normed, cfg);
    let x = g.add(x, att);

    let normed = g.layer_norm(
        x,
        bound.id(&format!("{prefix}ln2.g")),
        bound.id(&format!("{prefix}ln2.b")),
        eps,
    );
    let hmid = linear(
        g,
        normed,
        bound.id(&format!("{prefix}mlp.w1")),
        Some(bound.id(&format!("{prefix}mlp.b1"))),
    );
    let hmid = g.gelu(hmid);
    let out = linear(
        g,
        hmid,
        bound.id(&format!("{prefix}mlp.w2")),
        Some(bound.id(&format!("{prefix}mlp.b2"))),
    );
    g.add(x, out)
}

/// Learned positional table `(N, C)`.
pub fn init_pos_embedding<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    n: usize,
    dim: usize,
    seed: u64,
) {
    store.insert(name.to_string(), normal_init(seed, name, &[n, dim], 0.02));
}

/// Sinusoidal features for scalar positions (diffusion time conditioning).
pub fn sinusoidal_features<F: Real>(ts: &[f64], dim: usize) -> ArrayD<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); ts.len() * dim];
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            out[r * dim + 2 * i] = F::from_f64((t * freq * std::f64::consts::TAU).sin());
            out[r * dim + 2 * i + 1] = F::from_f64((t * freq * std::f64::consts::TAU).cos());
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[ts.len(), dim]), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fd::{check_gradients, FdSettings};

    #[test]
    fn block_keeps_token_shape() {
        let cfg = BlockConfig {
            dim: 8,
            heads: 2,
            ff_mult: 4,
        };
        let mut store = ParamStore::<f64>::new();
        init_block(&mut store, "blk.", cfg, 3);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(normal_init::<f64>(9, "x", &[2, 5, 8], 1.0));
        let y = block_forward(&mut g, &bound, "blk.", x, cfg);
        assert_eq!(g.shape(y), &[2, 5, 8]);
    }

    #[test]
    fn block_gradients_match_fd() {
        let cfg = BlockConfig {
            dim: 6,
            heads: 2,
            ff_mult: 2,
        };
        let mut store = ParamStore::<f64>::new();
        init_block(&mut store, "b.", cfg, 5);
        let x0 = normal_init::<f64>(7, "x", &[1, 3, 6], 1.0);

        let leaves: Vec<_> = std::iter::once(x0.clone())
            .chain(store.iter().map(|(_, v)| v.clone()))
            .collect();
        let names: Vec<String> = store.names().map(String::from).collect();

        let run = |ls: &[ndarray::ArrayD<f64>]| -> (f64, Vec<ndarray::ArrayD<f64>>) {
            let mut st = ParamStore::<f64>::new();
            for (name, val) in names.iter().zip(&ls[1..]) {
                st.insert(name.clone(), val.clone());
            }
            let mut g = Graph::new();
            let bound = st.bind(&mut g);
            let x = g.variable(ls[0].clone());
            let y = block_forward(&mut g, &bound, "b.", x, cfg);
            let sq = g.square(y);
            let loss = g.mean_all(sq);
            let grads = g.backward(loss);
            let mut out = vec![grads.get_or_zeros(x, ls[0].shape())];
            out.extend(bound.collect_grads(&grads, &st));
            (g.scalar(loss), out)
        };
        let (_, analytic) = run(&leaves);
        let outcome = check_gradients(
            &leaves,
            &|ls| run(ls).0,
            &analytic,
            &FdSettings {
                samples_per_leaf: 6,
                ..Default::default()
            },
        );
        assert!(
            outcome.max_rel_err < 1e-5,
            "max rel err {}",
            outcome.max_rel_err
        );
    }
}
