//! Class-conditional latent flow model: linear-interpolant velocity
//! matching with EMA, classifier-free guidance, an optional hidden-state
//! alignment regularizer, and Euler / Euler-Maruyama samplers.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Real};
use crate::nn::adamw::{AdamW, Ema, OptimizerConfig};
use crate::nn::blocks::{
    block_forward, init_block, init_pos_embedding, sinusoidal_features, BlockConfig,
};
use crate::nn::{linear, normal_init, ones, xavier, Bound, ParamStore};
use crate::rng;
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Patch size over the latent grid.
    pub patch_size: usize,
    pub num_classes: usize,
    pub label_dropout: f64,
    pub repa_enabled: bool,
    pub repa_layer: usize,
    pub repa_weight: f64,
    pub ema_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    /// SDE diffusion scale in `g(t) = sigma_g * (1 - t)`.
    pub sigma_g: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            depth: 6,
            width: 256,
            heads: 8,
            patch_size: 1,
            num_classes: 12,
            label_dropout: 0.1,
            repa_enabled: false,
            repa_layer: 2,
            repa_weight: 0.5,
            ema_decay: 0.9999,
            steps: 4000,
            batch: 64,
            optimizer: OptimizerConfig {
                learning_rate: 1e-4,
                ..Default::default()
            },
            sigma_g: 1.0,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self, latent_side: usize) -> Result<()> {
        if self.patch_size == 0 || latent_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "latent side {latent_side} not divisible by flow patch size {}",
                self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide width {}",
                self.heads, self.width
            )));
        }
        if self.repa_enabled && self.repa_layer >= self.depth {
            return Err(Error::Config(format!(
                "repa_layer {} must be < depth {}",
                self.repa_layer, self.depth
            )));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::Config("label_dropout must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn tokens(&self, latent_side: usize) -> usize {
        (latent_side / self.patch_size).pow(2)
    }

    /// The embedding index used for the unconditional branch.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    fn block_cfg(&self) -> BlockConfig {
        BlockConfig {
            dim: self.width,
            heads: self.heads,
            ff_mult: 4,
        }
    }
}

/// One draw of the linear interpolant `x_t = t z + (1-t) eps`,
/// `velocity_target = z - eps`.
#[derive(Clone, Debug)]
pub struct InterpolantSample {
    pub x_t: Array4<f32>,
    pub t: Vec<f64>,
    pub velocity_target: Array4<f32>,
    pub epsilon: Array4<f32>,
}

/// Draws fresh noise and forms the interpolant at per-sample times.
pub fn interpolant_targets<R: Rng>(
    z: &Array4<f32>,
    t: &[f64],
    rng: &mut R,
) -> Result<InterpolantSample> {
    let b = z.shape()[0];
    if t.len() != b {
        return Err(Error::Config(format!(
            "got {} times for a batch of {b}",
            t.len()
        )));
    }
    for &tv in t {
        if !(0.0..=1.0).contains(&tv) {
            return Err(Error::Domain(format!("t = {tv} outside [0,1]")));
        }
    }
    let mut epsilon = Array4::<f32>::zeros(z.raw_dim());
    for v in epsilon.iter_mut() {
        *v = rng::normal(rng) as f32;
    }
    let mut x_t = Array4::<f32>::zeros(z.raw_dim());
    let mut velocity = Array4::<f32>::zeros(z.raw_dim());
    for bi in 0..b {
        let tv = t[bi] as f32;
        let zs = z.index_axis(Axis(0), bi);
        let es = epsilon.index_axis(Axis(0), bi);
        let mut xs = x_t.index_axis_mut(Axis(0), bi);
        let mut vs = velocity.index_axis_mut(Axis(0), bi);
        ndarray::Zip::from(&mut xs)
            .and(&mut vs)
            .and(&zs)
            .and(&es)
            .for_each(|x, v, &zv, &ev| {
                *x = tv * zv + (1.0 - tv) * ev;
                *v = zv - ev;
            });
    }
    Ok(InterpolantSample {
        x_t,
        t: t.to_vec(),
        velocity_target: velocity,
        epsilon,
    })
}

/// Classifier-free guidance combination `v_u + w (v_c - v_u)`.
pub fn cfg_velocity(v_cond: &Array4<f32>, v_uncond: &Array4<f32>, w: f64) -> Array4<f32> {
    let mut out = v_uncond.clone();
    ndarray::Zip::from(&mut out).and(v_cond).for_each(|u, &c| {
        *u += w as f32 * (c - *u);
    });
    out
}

pub fn init_flow_params<F: Real>(
    cfg: &FlowConfig,
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
        xavier(seed, "flow.embed.w", &[pdim, cfg.width], pdim, cfg.width),
    );
    store.insert("embed.b", crate::nn::zeros(&[cfg.width]));
    init_pos_embedding(&mut store, "pos", n, cfg.width, seed);
    store.insert(
        "time.w1",
        xavier(seed, "flow.time.w1", &[cfg.width, cfg.width], cfg.width, cfg.width),
    );
    store.insert("time.b1", crate::nn::zeros(&[cfg.width]));
    store.insert(
        "time.w2",
        xavier(seed, "flow.time.w2", &[cfg.width, cfg.width], cfg.width, cfg.width),
    );
    store.insert("time.b2", crate::nn::zeros(&[cfg.width]));
    store.insert(
        "class.table",
        normal_init(seed, "flow.class.table", &[cfg.num_classes + 1, cfg.width], 0.02),
    );
    for d in 0..cfg.depth {
        init_block(&mut store, &format!("blk{d}."), cfg.block_cfg(), seed);
    }
    if cfg.repa_enabled {
        store.insert(
            "repa.w1",
            xavier(seed, "flow.repa.w1", &[cfg.width, cfg.width], cfg.width, cfg.width),
        );
        store.insert("repa.b1", crate::nn::zeros(&[cfg.width]));
        // out_dim fixed up at training time to the teacher dim
    }
    store.insert("final_ln.g", ones(&[cfg.width]));
    store.insert("final_ln.b", crate::nn::zeros(&[cfg.width]));
    store.insert(
        "head.w",
        normal_init(seed, "flow.head.w", &[cfg.width, pdim], 0.02),
    );
    store.insert("head.b", crate::nn::zeros(&[pdim]));
    Ok(store)
}

/// Adds the teacher-dim projector tail for the hidden-state regularizer.
pub fn add_repa_projector<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &FlowConfig,
    teacher_dim: usize,
    seed: u64,
) {
    store.insert(
        "repa.w2",
        xavier(
            seed,
            "flow.repa.w2",
            &[cfg.width, teacher_dim],
            cfg.width,
            teacher_dim,
        ),
    );
    store.insert("repa.b2", crate::nn::zeros(&[teacher_dim]));
}

/// Velocity prediction graph. Returns `(velocity, hidden_at_repa_layer)`.
pub fn flow_forward<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    cfg: &FlowConfig,
    x_t: NodeId,
    t: &[f64],
    labels: &[usize],
) -> (NodeId, Option<NodeId>) {
    let shape = g.shape(x_t).to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let tokens = g.patchify(x_t, cfg.patch_size);
    let mut tk = linear(
        g,
        tokens,
        bound.id(&format!("{prefix}embed.w")),
        Some(bound.id(&format!("{prefix}embed.b"))),
    );
    tk = g.add(tk, bound.id(&format!("{prefix}pos")));

    // conditioning: sinusoidal time features through a 2-layer MLP, plus a
    // class embedding, added to every token
    let tf = g.constant(sinusoidal_features::<F>(t, cfg.width));
    let tmlp = linear(
        g,
        tf,
        bound.id(&format!("{prefix}time.w1")),
        Some(bound.id(&format!("{prefix}time.b1"))),
    );
    let tmlp = g.silu(tmlp);
    let tmlp = linear(
        g,
        tmlp,
        bound.id(&format!("{prefix}time.w2")),
        Some(bound.id(&format!("{prefix}time.b2"))),
    );
    let cls = g.embedding(bound.id(&format!("{prefix}class.table")), labels);
    let cond = g.add(tmlp, cls); // (B, width)
    let cond = g.reshape(cond, &[b, 1, cfg.width]);
    tk = g.add(tk, cond);

    let mut hidden_at = None;
    for d in 0..cfg.depth {
        tk = block_forward(g, bound, &format!("{prefix}blk{d}."), tk, cfg.block_cfg());
        if cfg.repa_enabled && d == cfg.repa_layer {
            hidden_at = Some(tk);
        }
    }
    let tk = g.layer_norm(
        tk,
        bound.id(&format!("{prefix}final_ln.g")),
        bound.id(&format!("{prefix}final_ln.b")),
        F::from_f64(1e-5),
    );
    let out = linear(
        g,
        tk,
        bound.id(&format!("{prefix}head.w")),
        Some(bound.id(&format!("{prefix}head.b"))),
    );
    let v = g.unpatchify(out, cfg.patch_size, c, h, w);
    (v, hidden_at)
}

/// Velocity-matching loss node: MSE between prediction and target.
pub fn flow_loss_graph<F: Real>(g: &mut Graph<F>, v_pred: NodeId, v_target: NodeId) -> NodeId {
    let d = g.sub(v_pred, v_target);
    let d2 = g.square(d);
    g.mean_all(d2)
}

/// Hidden-state alignment regularizer: projector then mean `1 - cos` against
/// teacher features of the clean image.
pub fn repa_regularizer_graph<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    hidden: NodeId,
    teacher_feats: NodeId,
) -> NodeId {
    let h = linear(
        g,
        hidden,
        bound.id(&format!("{prefix}repa.w1")),
        Some(bound.id(&format!("{prefix}repa.b1"))),
    );
    let h = g.gelu(h);
    let proj = linear(
        g,
        h,
        bound.id(&format!("{prefix}repa.w2")),
        Some(bound.id(&format!("{prefix}repa.b2"))),
    );
    crate::align::alignment_loss_graph(g, proj, teacher_feats)
}

/// Label dropout for one step: a pure function of `(seed, step)`.
pub fn dropped_labels(cfg: &FlowConfig, step: u64, labels: &[usize]) -> Vec<usize> {
    let mut r = rng::stream(cfg.seed, "label-drop", step);
    labels
        .iter()
        .map(|&l| {
            if r.gen::<f64>() < cfg.label_dropout {
                cfg.null_class()
            } else {
                l
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FlowLogRecord {
    pub step: usize,
    pub loss: f64,
    pub repa: f64,
    pub total: f64,
}

/// Trained flow model: online parameters plus their EMA shadow.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub cfg: FlowConfig,
    pub latent_channels: usize,
    pub latent_side: usize,
    pub params: ParamStore<f32>,
    pub ema_params: ParamStore<f32>,
    pub step: u64,
}

impl FlowState {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut combined = ParamStore::new();
        combined.adopt("model.", self.params.clone());
        combined.adopt("ema.", self.ema_params.clone());
        let meta = serde_json::json!({
            "kind": "flow",
            "config": self.cfg,
            "latent_channels": self.latent_channels,
            "latent_side": self.latent_side,
        });
        crate::checkpoint::save(dir, &combined, None, self.step, self.cfg.seed, meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<FlowState> {
        let (combined, manifest) = crate::checkpoint::load(dir)?;
        let cfg: FlowConfig = serde_json::from_value(
            manifest
                .meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Data("missing flow config".into()))?,
        )?;
        let latent_channels = manifest.meta["latent_channels"]
            .as_u64()
            .ok_or_else(|| Error::Data("missing latent_channels".into()))? as usize;
        let latent_side = manifest.meta["latent_side"]
            .as_u64()
            .ok_or_else(|| Error::Data("missing latent_side".into()))? as usize;
        Ok(FlowState {
            cfg,
            latent_channels,
            latent_side,
            params: combined.subset("model.").strip_prefix("model."),
            ema_params: combined.subset("ema.").strip_prefix("ema."),
            step: manifest.step,
        })
    }

    fn velocity_with(&self, params: &ParamStore<f32>, x: &Array4<f32>, t: f64, labels: &[usize]) -> Array4<f32> {
        let mut g = Graph::<f32>::new();
        let bound = params.bind_frozen(&mut g);
        let xn = g.constant(x.clone().into_dyn());
        let ts = vec![t; x.shape()[0]];
        let (v, _) = flow_forward(&mut g, &bound, "", &self.cfg, xn, &ts, labels);
        g.value(v).clone().into_dimensionality().unwrap()
    }
}

/// Anything that predicts a velocity field over latents.
pub trait VelocityField {
    fn velocity(&self, x: &Array4<f32>, t: f64, labels: &[usize]) -> Array4<f32>;
}

/// Sampling uses the EMA parameters.
impl VelocityField for FlowState {
    fn velocity(&self, x: &Array4<f32>, t: f64, labels: &[usize]) -> Array4<f32> {
        self.velocity_with(&self.ema_params, x, t, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    Ode,
    Sde,
}

/// Integrates the velocity field from `t = 0` (pure noise) to `t = 1`.
///
/// ODE: `x += v dt`. SDE: the score is recovered from the velocity as
/// `s = (t v - x) / (1 - t)` and the update is
/// `x += (v + g(t)^2/2 s) dt + g(t) sqrt(dt) xi` with `g(t) = sigma_g (1-t)`.
/// The final step is always the deterministic Euler update.
#[allow(clippy::too_many_arguments)]
pub fn sample<V: VelocityField>(
    field: &V,
    latent_shape: (usize, usize, usize),
    labels: &[usize],
    null_class: usize,
    n_steps: usize,
    mode: SampleMode,
    cfg_scale: f64,
    sigma_g: f64,
    seed: u64,
) -> Result<Array4<f32>> {
    if n_steps == 0 {
        return Err(Error::Domain("n_steps must be >= 1".into()));
    }
    let n = labels.len();
    let (c, h, w) = latent_shape;
    let mut rng = rng::stream(seed, "sample", 0);
    let mut x = Array4::<f32>::zeros((n, c, h, w));
    for v in x.iter_mut() {
        *v = rng::normal(&mut rng) as f32;
    }
    let null_labels = vec![null_class; n];
    let dt = 1.0f64 / n_steps as f64;
    for i in 0..n_steps {
        let t = i as f64 * dt;
        let v = if (cfg_scale - 1.0).abs() < 1e-12 {
            field.velocity(&x, t, labels)
        } else {
            let v_c = field.velocity(&x, t, labels);
            let v_u = field.velocity(&x, t, &null_labels);
            cfg_velocity(&v_c, &v_u, cfg_scale)
        };
        let last = i + 1 == n_steps;
        if last || mode == SampleMode::Ode {
            ndarray::Zip::from(&mut x).and(&v).for_each(|x, &vv| {
                *x += (dt as f32) * vv;
            });
        } else {
            let g_t = sigma_g * (1.0 - t);
            let half_g2 = 0.5 * g_t * g_t;
            let noise_scale = (g_t * dt.sqrt()) as f32;
            ndarray::Zip::from(&mut x).and(&v).for_each(|x, &vv| {
                let score = (t as f32 * vv - *x) / (1.0 - t as f32);
                let xi = rng::normal(&mut rng) as f32;
                *x += (dt as f32) * (vv + half_g2 as f32 * score) + noise_scale * xi;
            });
        }
    }
    Ok(x)
}

/// Trains the flow model on fixed latents (VAE frozen upstream).
///
/// `repa_targets`, when the regularizer is enabled, holds teacher features
/// of the clean image for every latent row.
pub fn train_flow(
    latents: &Array4<f32>,
    labels: &[usize],
    cfg: &FlowConfig,
    repa_targets: Option<&Array3<f32>>,
    out_dir: Option<&Path>,
) -> Result<(FlowState, Vec<FlowLogRecord>)> {
    let n = latents.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::Config(format!(
            "latents ({n}) and labels ({}) must align",
            labels.len()
        )));
    }
    let (d, side) = (latents.shape()[1], latents.shape()[2]);
    cfg.validate(side)?;
    let mut params = init_flow_params::<f32>(cfg, d, side, cfg.seed)?;
    if cfg.repa_enabled {
        let teacher_dim = repa_targets
            .ok_or_else(|| Error::Config("repa enabled but no teacher targets given".into()))?
            .shape()[2];
        add_repa_projector(&mut params, cfg, teacher_dim, cfg.seed);
    }
    let mut opt = AdamW::new(cfg.optimizer, &params);
    let mut ema = Ema::new(cfg.ema_decay, &params);

    let mut log = Vec::with_capacity(cfg.steps);
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(
                std::fs::File::create(dir.join("train_log.jsonl"))?,
            ))
        }
        None => None,
    };
    let mut last_good = (params.clone(), ema.params.clone());

    for step in 0..cfg.steps {
        let idx = rng::batch_indices(cfg.seed, step as u64, cfg.batch, n);
        let mut zb = Array4::<f32>::zeros((cfg.batch, d, side, side));
        let mut yb = Vec::with_capacity(cfg.batch);
        for (r, &i) in idx.iter().enumerate() {
            zb.index_axis_mut(Axis(0), r)
                .assign(&latents.index_axis(Axis(0), i));
            yb.push(labels[i]);
        }
        let yb = dropped_labels(cfg, step as u64, &yb);

        let mut trng = rng::stream(cfg.seed, "interp", step as u64);
        let ts: Vec<f64> = (0..cfg.batch).map(|_| trng.gen::<f64>()).collect();
        let sample = interpolant_targets(&zb, &ts, &mut trng)?;

        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g);
        let x_t = g.constant(sample.x_t.into_dyn());
        let target = g.constant(sample.velocity_target.into_dyn());
        let (v, hidden) = flow_forward(&mut g, &bound, "", cfg, x_t, &sample.t, &yb);
        let loss = flow_loss_graph(&mut g, v, target);
        let mut total = loss;
        let mut repa_val = 0.0f64;
        if let (true, Some(hid)) = (cfg.repa_enabled, hidden) {
            let targets = repa_targets.unwrap();
            let mut tf = Array3::<f32>::zeros((cfg.batch, targets.shape()[1], targets.shape()[2]));
            for (r, &i) in idx.iter().enumerate() {
                tf.index_axis_mut(Axis(0), r)
                    .assign(&targets.index_axis(Axis(0), i));
            }
            let tf_node = g.constant(tf.into_dyn());
            let repa = repa_regularizer_graph(&mut g, &bound, "", hid, tf_node);
            repa_val = g.scalar(repa) as f64;
            let weighted = g.scale(repa, cfg.repa_weight as f32);
            total = g.add(total, weighted);
        }

        let record = FlowLogRecord {
            step,
            loss: g.scalar(loss) as f64,
            repa: repa_val,
            total: g.scalar(total) as f64,
        };
        if !record.total.is_finite() {
            let state = FlowState {
                cfg: cfg.clone(),
                latent_channels: d,
                latent_side: side,
                params: last_good.0,
                ema_params: last_good.1,
                step: step as u64,
            };
            if let Some(dir) = out_dir {
                state.save(dir.join("checkpoint"))?;
            }
            return Err(Error::Numeric(format!(
                "non-finite flow loss at step {step}; last good state preserved"
            )));
        }

        let grads = g.backward(total);
        let gvec = bound.collect_grads(&grads, &params);
        last_good = (params.clone(), ema.params.clone());
        opt.update(&mut params, &gvec);
        ema.update(&params);

        if let Some(wr) = log_file.as_mut() {
            use std::io::Write;
            serde_json::to_writer(&mut *wr, &record)?;
            writeln!(wr)?;
        }
        log.push(record);
    }
    if let Some(mut wr) = log_file {
        use std::io::Write;
        wr.flush()?;
    }

    let state = FlowState {
        cfg: cfg.clone(),
        latent_channels: d,
        latent_side: side,
        params,
        ema_params: ema.params,
        step: cfg.steps as u64,
    };
    if let Some(dir) = out_dir {
        state.save(dir.join("checkpoint"))?;
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fd::{check_gradients, FdSettings};
    use ndarray::ArrayD;

    fn toy_cfg() -> FlowConfig {
        FlowConfig {
            depth: 1,
            width: 16,
            heads: 2,
            patch_size: 1,
            num_classes: 4,
            label_dropout: 0.1,
            steps: 40,
            batch: 8,
            ema_decay: 0.99,
            optimizer: OptimizerConfig {
                learning_rate: 2e-3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn interpolant_endpoints_and_identity() {
        let z = normal_init::<f32>(1, "z", &[2, 1, 2, 2], 1.0)
            .into_dimensionality()
            .unwrap();
        let mut rng = rng::stream(0, "it", 0);
        let s1 = interpolant_targets(&z, &[1.0, 1.0], &mut rng).unwrap();
        assert_eq!(s1.x_t, z);
        // velocity = z - eps, exactly
        let mut check = z.clone();
        ndarray::Zip::from(&mut check).and(&s1.epsilon).for_each(|c, &e| *c -= e);
        assert_eq!(s1.velocity_target, check);

        let s0 = interpolant_targets(&z, &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(s0.x_t, s0.epsilon);

        // interpolant identity holds exactly elementwise at interior t
        let s = interpolant_targets(&z, &[0.25, 0.75], &mut rng).unwrap();
        for bi in 0..2 {
            let t = s.t[bi] as f32;
            for ((x, &zz), &e) in s
                .x_t
                .index_axis(Axis(0), bi)
                .iter()
                .zip(z.index_axis(Axis(0), bi).iter())
                .zip(s.epsilon.index_axis(Axis(0), bi).iter())
            {
                assert_eq!(*x, t * zz + (1.0 - t) * e);
            }
        }

        assert!(matches!(
            interpolant_targets(&z, &[0.5, 1.5], &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn interpolant_second_moment_matches_monte_carlo() {
        // z = 0, t = 0.5: E ||x_t||^2 = 0.25 * dim
        let z = Array4::<f32>::zeros((1, 1, 2, 2));
        let dim = 4.0;
        let n = 100_000;
        let mut rng = rng::stream(3, "mom", 0);
        let mut acc = 0.0f64;
        for _ in 0..n {
            let s = interpolant_targets(&z, &[0.5], &mut rng).unwrap();
            acc += s.x_t.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        let mean = acc / n as f64;
        let expect = 0.25 * dim;
        // variance of ||x||^2 for iid normals scales like 2 dim sigma^4
        let tol = 3.0 * (2.0 * dim * 0.0625f64).sqrt() / (n as f64).sqrt() + 1e-3;
        assert!((mean - expect).abs() < tol, "{mean} vs {expect}");
    }

    #[test]
    fn cfg_velocity_is_affine_and_hits_paper_scale() {
        let v_c = Array4::<f32>::from_elem((1, 1, 1, 1), 1.0);
        let v_u = Array4::<f32>::zeros((1, 1, 1, 1));
        assert_eq!(cfg_velocity(&v_c, &v_u, 1.0)[[0, 0, 0, 0]], 1.0);
        assert_eq!(cfg_velocity(&v_c, &v_u, 0.0)[[0, 0, 0, 0]], 0.0);
        assert_eq!(cfg_velocity(&v_c, &v_u, 2.5)[[0, 0, 0, 0]], 2.5);

        // affine check on random tensors
        let a = normal_init::<f32>(5, "a", &[2, 1, 2, 2], 1.0)
            .into_dimensionality()
            .unwrap();
        let b = normal_init::<f32>(6, "b", &[2, 1, 2, 2], 1.0)
            .into_dimensionality()
            .unwrap();
        let w = 1.7;
        let out = cfg_velocity(&a, &b, w);
        ndarray::Zip::from(&out).and(&a).and(&b).for_each(|&o, &c, &u| {
            assert!((o - (u + w as f32 * (c - u))).abs() < 1e-6);
        });
    }

    #[test]
    fn flow_loss_zero_when_prediction_equals_target() {
        let t = normal_init::<f32>(7, "t", &[2, 1, 2, 2], 1.0);
        let mut g = Graph::<f32>::new();
        let a = g.constant(t.clone());
        let b = g.constant(t);
        let loss = flow_loss_graph(&mut g, a, b);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn flow_loss_matches_hand_mse() {
        let a = ndarray::arr1(&[1.0f32, 2.0, 3.0, 4.0])
            .into_shape_with_order((1, 1, 2, 2))
            .unwrap()
            .into_dyn();
        let b = ndarray::arr1(&[0.0f32, 0.0, 0.0, 0.0])
            .into_shape_with_order((1, 1, 2, 2))
            .unwrap()
            .into_dyn();
        let mut g = Graph::<f32>::new();
        let an = g.constant(a);
        let bn = g.constant(b);
        let loss = flow_loss_graph(&mut g, an, bn);
        let hand = (1.0 + 4.0 + 9.0 + 16.0) / 4.0;
        assert!((g.scalar(loss) - hand).abs() < 1e-6);
    }

    #[test]
    fn flow_gradients_match_finite_differences() {
        let cfg = FlowConfig {
            depth: 2,
            width: 8,
            heads: 2,
            patch_size: 1,
            num_classes: 3,
            ..Default::default()
        };
        let params = init_flow_params::<f64>(&cfg, 2, 2, 1).unwrap();
        let x0 = normal_init::<f64>(2, "x", &[1, 2, 2, 2], 1.0);
        let target = normal_init::<f64>(3, "v", &[1, 2, 2, 2], 1.0);
        let names: Vec<String> = params.names().map(String::from).collect();
        let leaves: Vec<ArrayD<f64>> = std::iter::once(x0.clone())
            .chain(params.iter().map(|(_, v)| v.clone()))
            .collect();
        let run = |ls: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
            let mut st = ParamStore::<f64>::new();
            for (n, v) in names.iter().zip(&ls[1..]) {
                st.insert(n.clone(), v.clone());
            }
            let mut g = Graph::<f64>::new();
            let bound = st.bind(&mut g);
            let x = g.variable(ls[0].clone());
            let (v, _) = flow_forward(&mut g, &bound, "", &cfg, x, &[0.4], &[1]);
            let tn = g.constant(target.clone());
            let loss = flow_loss_graph(&mut g, v, tn);
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
                samples_per_leaf: 5,
                ..Default::default()
            },
        );
        assert!(
            outcome.max_rel_err <= 1e-4,
            "flow FD mismatch {}",
            outcome.max_rel_err
        );
    }

    #[test]
    fn repa_regularizer_extremes_and_brute_force() {
        // projector fixed to identity-ish: test through the graph with the
        // projected value compared against brute force cosine
        let cfg = FlowConfig {
            repa_enabled: true,
            repa_layer: 0,
            depth: 1,
            width: 4,
            heads: 1,
            ..toy_cfg()
        };
        let mut params = ParamStore::<f32>::new();
        // projector: w1 = I, b1 = 0, w2 = I, b2 = 0 (width == teacher dim)
        let eye = ndarray::Array2::<f32>::eye(cfg.width).into_dyn();
        params.insert("repa.w1", eye.clone());
        params.insert("repa.b1", crate::nn::zeros(&[cfg.width]));
        params.insert("repa.w2", eye);
        params.insert("repa.b2", crate::nn::zeros(&[cfg.width]));

        let hidden = normal_init::<f32>(9, "h", &[2, 3, 4], 1.0);
        // gelu is applied between the two layers; push through the same path
        // for the expected value via the public alignment loss
        let mut g = Graph::<f32>::new();
        let bound = params.bind_frozen(&mut g);
        let h = g.constant(hidden.clone());
        let target = {
            // teacher features equal to the projected hidden: loss must be 0
            let hg = g.gelu(h);
            g.value(hg).clone()
        };
        let tnode = g.constant(target.clone());
        let loss = repa_regularizer_graph(&mut g, &bound, "", h, tnode);
        assert!(g.scalar(loss).abs() < 1e-6);

        let mut g2 = Graph::<f32>::new();
        let bound2 = params.bind_frozen(&mut g2);
        let h2 = g2.constant(hidden);
        let neg = g2.constant(target.mapv(|v| -v));
        let loss2 = repa_regularizer_graph(&mut g2, &bound2, "", h2, neg);
        assert!((g2.scalar(loss2) - 2.0).abs() < 1e-5);
    }

    #[test]
    fn label_dropout_fraction_is_binomial() {
        let cfg = FlowConfig {
            label_dropout: 0.1,
            ..toy_cfg()
        };
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let mut dropped = 0usize;
        let trials = 100u64;
        for step in 0..trials {
            let out = dropped_labels(&cfg, step, &labels);
            dropped += out.iter().filter(|&&l| l == cfg.null_class()).count();
        }
        let n_total = (trials as usize * labels.len()) as f64;
        let frac = dropped as f64 / n_total;
        let sigma = (0.1 * 0.9 / n_total).sqrt();
        assert!(
            (frac - 0.1).abs() < 3.0 * sigma,
            "dropout fraction {frac} vs 0.1 +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn single_ode_step_is_plain_euler() {
        struct Const;
        impl VelocityField for Const {
            fn velocity(&self, x: &Array4<f32>, _t: f64, _l: &[usize]) -> Array4<f32> {
                x.mapv(|v| 2.0 * v + 1.0)
            }
        }
        let out = sample(&Const, (1, 1, 1), &[0], 0, 1, SampleMode::Ode, 1.0, 1.0, 9)
            .unwrap();
        // x0 = eps, x1 = eps + v(eps, 0) * 1
        let mut rng = rng::stream(9, "sample", 0);
        let eps = rng::normal(&mut rng) as f32;
        let expect = eps + 2.0 * eps + 1.0;
        assert!((out[[0, 0, 0, 0]] - expect).abs() < 1e-6);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        struct Zero;
        impl VelocityField for Zero {
            fn velocity(&self, x: &Array4<f32>, _t: f64, _l: &[usize]) -> Array4<f32> {
                Array4::zeros(x.raw_dim())
            }
        }
        let a = sample(&Zero, (1, 2, 2), &[0, 1], 0, 8, SampleMode::Sde, 1.0, 1.0, 4).unwrap();
        let b = sample(&Zero, (1, 2, 2), &[0, 1], 0, 8, SampleMode::Sde, 1.0, 1.0, 4).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample(&Zero, (1, 2, 2), &[0], 0, 0, SampleMode::Ode, 1.0, 1.0, 4),
            Err(Error::Domain(_))
        ));
    }

    /// Closed-form optimal velocity for a 1-D Gaussian target N(m, s^2).
    pub struct GaussianOracle {
        pub mean: f64,
        pub var: f64,
    }

    impl GaussianOracle {
        pub fn velocity_scalar(&self, x: f64, t: f64) -> f64 {
            let s = t * t * self.var + (1.0 - t) * (1.0 - t);
            self.mean + ((t * self.var - (1.0 - t)) / s) * (x - t * self.mean)
        }

        pub fn marginal_score(&self, x: f64, t: f64) -> f64 {
            let s = t * t * self.var + (1.0 - t) * (1.0 - t);
            -(x - t * self.mean) / s
        }
    }

    impl VelocityField for GaussianOracle {
        fn velocity(&self, x: &Array4<f32>, t: f64, _l: &[usize]) -> Array4<f32> {
            x.mapv(|v| self.velocity_scalar(v as f64, t) as f32)
        }
    }

    #[test]
    fn score_recovery_matches_analytic_marginal_score() {
        let oracle = GaussianOracle {
            mean: 2.0,
            var: 0.25,
        };
        for i in 0..=18 {
            let t = 0.05 + 0.05 * i as f64;
            if t > 0.95 {
                break;
            }
            for &x in &[-1.0f64, 0.0, 0.7, 2.0, 3.5] {
                let v = oracle.velocity_scalar(x, t);
                let recovered = (t * v - x) / (1.0 - t);
                let analytic = oracle.marginal_score(x, t);
                assert!(
                    (recovered - analytic).abs() < 1e-6,
                    "t={t} x={x}: {recovered} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn both_samplers_recover_gaussian_target_moments() {
        let oracle = GaussianOracle {
            mean: 2.0,
            var: 0.25,
        };
        for mode in [SampleMode::Ode, SampleMode::Sde] {
            let labels = vec![0usize; 10_000];
            let out = sample(&oracle, (1, 1, 1), &labels, 0, 100, mode, 1.0, 1.0, 77).unwrap();
            let vals: Vec<f64> = out.iter().map(|&v| v as f64).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(
                (mean - 2.0).abs() / 2.0 < 0.05,
                "{mode:?} mean {mean} off target"
            );
            assert!(
                (var - 0.25).abs() / 0.25 < 0.05,
                "{mode:?} var {var} off target"
            );
        }
    }

    #[test]
    fn training_smoke_reduces_loss_and_ema_stays_gradient_free() {
        let mut cfg = toy_cfg();
        cfg.steps = 2000;
        cfg.batch = 16;
        let latents = normal_init::<f32>(21, "lat", &[256, 1, 2, 2], 1.0)
            .into_dimensionality()
            .unwrap();
        // give latents class-dependent structure so there is something to learn
        let labels: Vec<usize> = (0..256).map(|i| i % 4).collect();
        let mut latents = latents;
        for (i, mut row) in latents.outer_iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v += (i % 4) as f32 - 1.5;
            }
        }
        let (state, log) = train_flow(&latents, &labels, &cfg, None, None).unwrap();
        let smooth = |at: usize| {
            let lo = at.saturating_sub(50);
            let hi = (at + 50).min(log.len() - 1);
            log[lo..=hi].iter().map(|r| r.total).sum::<f64>() / (hi - lo + 1) as f64
        };
        assert!(
            smooth(1999) < smooth(100),
            "flow smoke loss: {} -> {}",
            smooth(100),
            smooth(1999)
        );
        assert_ne!(state.params.checksum(), state.ema_params.checksum());
    }

    use crate::nn::normal_init;
}
