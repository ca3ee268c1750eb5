//! The trainable mapper from (noisy) VAE latents into teacher feature space:
//! patch embedding with learned positions, a configurable stack of pre-norm
//! transformer layers, and a two-layer projector.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Real};
use crate::nn::blocks::{block_forward, init_block, init_pos_embedding, BlockConfig};
use crate::nn::{linear, xavier, Bound, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    /// Patch size over the latent grid (1 keeps one token per latent cell).
    pub patch_size: usize,
    /// Transformer layers; 0 means patch embedding + projector only.
    pub depth: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    /// Output feature dimension (the teacher's D).
    pub out_dim: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            patch_size: 1,
            depth: 1,
            heads: 12,
            hidden_dim: 96,
            out_dim: 64,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self, latent_side: usize) -> Result<()> {
        if self.patch_size == 0 || latent_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "latent side {latent_side} not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide hidden_dim {}",
                self.heads, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn tokens(&self, latent_side: usize) -> usize {
        (latent_side / self.patch_size).pow(2)
    }

    fn block_cfg(&self) -> BlockConfig {
        BlockConfig {
            dim: self.hidden_dim,
            heads: self.heads,
            ff_mult: 4,
        }
    }
}

/// Registers mapper parameters (un-prefixed; callers namespace via
/// `ParamStore::adopt`).
pub fn init_mapper_params<F: Real>(
    cfg: &MapperConfig,
    latent_channels: usize,
    latent_side: usize,
    seed: u64,
) -> Result<ParamStore<F>> {
    cfg.validate(latent_side)?;
    let mut store = ParamStore::new();
    let pdim = latent_channels * cfg.patch_size * cfg.patch_size;
    let n = cfg.tokens(latent_side);
    store.insert(
        "embed.w",
        xavier(seed, "mapper.embed.w", &[pdim, cfg.hidden_dim], pdim, cfg.hidden_dim),
    );
    store.insert("embed.b", crate::nn::zeros(&[cfg.hidden_dim]));
    init_pos_embedding(&mut store, "pos", n, cfg.hidden_dim, seed);
    for d in 0..cfg.depth {
        init_block(&mut store, &format!("blk{d}."), cfg.block_cfg(), seed);
    }
    store.insert(
        "proj.w1",
        xavier(
            seed,
            "mapper.proj.w1",
            &[cfg.hidden_dim, cfg.hidden_dim],
            cfg.hidden_dim,
            cfg.hidden_dim,
        ),
    );
    store.insert("proj.b1", crate::nn::zeros(&[cfg.hidden_dim]));
    store.insert(
        "proj.w2",
        xavier(
            seed,
            "mapper.proj.w2",
            &[cfg.hidden_dim, cfg.out_dim],
            cfg.hidden_dim,
            cfg.out_dim,
        ),
    );
    store.insert("proj.b2", crate::nn::zeros(&[cfg.out_dim]));
    Ok(store)
}

/// Total scalar parameter count for a config (used by the depth ablation).
pub fn mapper_param_count(
    cfg: &MapperConfig,
    latent_channels: usize,
    latent_side: usize,
) -> usize {
    init_mapper_params::<f32>(cfg, latent_channels, latent_side, 0)
        .map(|s| s.num_scalars())
        .unwrap_or(0)
}

/// Mapper forward: `(B, d, h, w)` latent node to `(B, N, out_dim)` features.
///
/// `expected_tokens` is the teacher patch count; a mismatch is a
/// configuration error.
pub fn mapper_forward<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    cfg: &MapperConfig,
    z: NodeId,
    expected_tokens: usize,
) -> Result<NodeId> {
    let shape = g.shape(z).to_vec();
    let side = shape[2];
    cfg.validate(side)?;
    let n = cfg.tokens(side);
    if n != expected_tokens {
        return Err(Error::Config(format!(
            "mapper produces {n} tokens but the teacher expects {expected_tokens}"
        )));
    }
    let tokens = g.patchify(z, cfg.patch_size);
    let t = linear(
        g,
        tokens,
        bound.id(&format!("{prefix}embed.w")),
        Some(bound.id(&format!("{prefix}embed.b"))),
    );
    let mut t = g.add(t, bound.id(&format!("{prefix}pos")));
    for d in 0..cfg.depth {
        t = block_forward(g, bound, &format!("{prefix}blk{d}."), t, cfg.block_cfg());
    }
    let h = linear(
        g,
        t,
        bound.id(&format!("{prefix}proj.w1")),
        Some(bound.id(&format!("{prefix}proj.b1"))),
    );
    let h = g.gelu(h);
    Ok(linear(
        g,
        h,
        bound.id(&format!("{prefix}proj.w2")),
        Some(bound.id(&format!("{prefix}proj.b2"))),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fd::{check_gradients, FdSettings};
    use crate::nn::normal_init;
    use ndarray::ArrayD;

    fn forward_once(
        cfg: &MapperConfig,
        z: ArrayD<f32>,
        seed: u64,
    ) -> ndarray::Array3<f32> {
        let side = z.shape()[2];
        let d = z.shape()[1];
        let params = init_mapper_params::<f32>(cfg, d, side, seed).unwrap();
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let zn = g.constant(z);
        let out = mapper_forward(&mut g, &bound, "", cfg, zn, cfg.tokens(side)).unwrap();
        g.value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
    }

    #[test]
    fn shape_contract_depth1_heads12() {
        let cfg = MapperConfig::default(); // depth 1, heads 12, hidden 96
        let z = normal_init::<f32>(3, "z", &[2, 4, 8, 8], 1.0);
        let out = forward_once(&cfg, z, 5);
        assert_eq!(out.shape(), &[2, 64, 64]);
    }

    #[test]
    fn depth_zero_is_embed_plus_projector() {
        let cfg = MapperConfig {
            depth: 0,
            ..Default::default()
        };
        let params = init_mapper_params::<f32>(&cfg, 4, 8, 1).unwrap();
        assert!(
            params.names().all(|n| !n.starts_with("blk")),
            "depth 0 must register no transformer blocks"
        );
        let z = normal_init::<f32>(4, "z", &[1, 4, 8, 8], 1.0);
        let out = forward_once(&cfg, z, 1);
        assert_eq!(out.shape(), &[1, 64, 64]);
    }

    #[test]
    fn token_count_mismatch_is_config_error() {
        let cfg = MapperConfig::default();
        let params = init_mapper_params::<f32>(&cfg, 4, 8, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = params.bind_frozen(&mut g);
        let z = g.constant(normal_init::<f32>(4, "z", &[1, 4, 8, 8], 1.0));
        assert!(matches!(
            mapper_forward(&mut g, &bound, "", &cfg, z, 16),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn parameter_count_grows_with_depth() {
        let base = MapperConfig::default();
        let mut prev = 0usize;
        for depth in 0..3 {
            let cfg = MapperConfig { depth, ..base };
            let count = mapper_param_count(&cfg, 4, 8);
            assert!(count > prev, "depth {depth}: {count} <= {prev}");
            prev = count;
        }
    }

    #[test]
    fn depth_one_is_position_sensitive() {
        let cfg = MapperConfig {
            hidden_dim: 24,
            heads: 4,
            ..Default::default()
        };
        let z = normal_init::<f32>(8, "z", &[1, 4, 4, 4], 1.0);
        // swap two latent columns: a patch permutation under patch_size 1
        let mut swapped = z.clone();
        let col_a = z.index_axis(ndarray::Axis(3), 0).to_owned();
        let col_b = z.index_axis(ndarray::Axis(3), 3).to_owned();
        swapped.index_axis_mut(ndarray::Axis(3), 0).assign(&col_b);
        swapped.index_axis_mut(ndarray::Axis(3), 3).assign(&col_a);

        let a = forward_once(&cfg, z, 9);
        let b = forward_once(&cfg, swapped, 9);
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(
            max_diff > 1e-4,
            "patch permutation left the mapper output unchanged"
        );
    }

    #[test]
    fn mapper_gradients_match_finite_differences() {
        // two-token toy config
        let cfg = MapperConfig {
            patch_size: 1,
            depth: 1,
            heads: 2,
            hidden_dim: 8,
            out_dim: 6,
        };
        let params = init_mapper_params::<f64>(&cfg, 2, 2, 13).unwrap();
        let z0 = normal_init::<f64>(17, "z", &[1, 2, 2, 2], 1.0);
        let names: Vec<String> = params.names().map(String::from).collect();
        let leaves: Vec<ArrayD<f64>> = std::iter::once(z0.clone())
            .chain(params.iter().map(|(_, v)| v.clone()))
            .collect();
        let run = |ls: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
            let mut st = ParamStore::<f64>::new();
            for (n, v) in names.iter().zip(&ls[1..]) {
                st.insert(n.clone(), v.clone());
            }
            let mut g = Graph::<f64>::new();
            let bound = st.bind(&mut g);
            let z = g.variable(ls[0].clone());
            let out = mapper_forward(&mut g, &bound, "", &cfg, z, 4).unwrap();
            let sq = g.square(out);
            let loss = g.mean_all(sq);
            let grads = g.backward(loss);
            let mut res = vec![grads.get_or_zeros(z, ls[0].shape())];
            res.extend(bound.collect_grads(&grads, &st));
            (g.scalar(loss), res)
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
            outcome.max_rel_err <= 1e-4,
            "mapper FD mismatch: {}",
            outcome.max_rel_err
        );
    }
}
