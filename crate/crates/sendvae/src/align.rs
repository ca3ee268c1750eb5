//! Noise-injected latent alignment and the joint VAE+mapper fine-tuning
//! loop.
//!
//! A latent sample is mixed with Gaussian noise (`z_t = (1-a) eps + a z`,
//! `a ~ U(0,1)` per sample), pushed through the mapper, and pulled toward the
//! frozen teacher's patch features by a mean patch-wise `1 - cosine` loss.
//! The usual reconstruction objective (MSE, teacher-feature perceptual
//! distance, KL, optional adversarial term) trains alongside it.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Real};
use crate::mapper::{init_mapper_params, mapper_forward, MapperConfig};
use crate::nn::adamw::{AdamW, OptimizerConfig};
use crate::nn::ParamStore;
use crate::rng;
use crate::synthdata::dataset::Dataset;
use crate::teacher::{PatchFeatureMap, TeacherHandle};
use crate::vae::{
    decode_graph, encode_graph, gan_discriminator_graph, gan_generator_graph, kl_graph,
    mse_graph, perceptual_graph, reparameterize_graph, LossBreakdown, LossWeights,
    PatchDiscriminator, Vae, VaeConfig,
};
use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const COSINE_NORM_FLOOR: f64 = 1e-8;

/// A noised latent batch with its per-sample mixing coefficients.
#[derive(Clone, Debug)]
pub struct NoisyLatent {
    pub z_t: Array4<f32>,
    /// Mixing coefficient per sample, in `[0,1]`; 1 means "clean".
    pub alpha: Vec<f32>,
    /// Provenance tag of the noise stream.
    pub epsilon_seed: u64,
}

/// Draws noise and mixes it into the latent. Disabled means pass-through
/// with `alpha = 1`.
pub fn inject_noise<R: Rng>(z: &Array4<f32>, rng: &mut R, enabled: bool) -> NoisyLatent {
    let b = z.shape()[0];
    if !enabled {
        return NoisyLatent {
            z_t: z.clone(),
            alpha: vec![1.0; b],
            epsilon_seed: 0,
        };
    }
    let epsilon_seed: u64 = rng.gen();
    let alpha: Vec<f32> = (0..b).map(|_| rng.gen::<f32>()).collect();
    let mut z_t = z.clone();
    for (bi, mut sample) in z_t.outer_iter_mut().enumerate() {
        let a = alpha[bi];
        for v in sample.iter_mut() {
            let eps = rng::normal(rng) as f32;
            *v = (1.0 - a) * eps + a * *v;
        }
    }
    NoisyLatent {
        z_t,
        alpha,
        epsilon_seed,
    }
}

/// Graph version: `z_t = alpha * z + (1 - alpha) * eps` with `alpha`, `eps`
/// fixed; gradients flow through `z` only.
pub fn inject_noise_graph<F: Real>(
    g: &mut Graph<F>,
    z: NodeId,
    alpha: &[f32],
    eps: &Array4<f32>,
) -> NodeId {
    let b = alpha.len();
    let mut a = ArrayD::<F>::zeros(IxDyn(&[b, 1, 1, 1]));
    let mut one_minus = ArrayD::<F>::zeros(IxDyn(&[b, 1, 1, 1]));
    for (i, &v) in alpha.iter().enumerate() {
        a[[i, 0, 0, 0]] = F::from_f64(v as f64);
        one_minus[[i, 0, 0, 0]] = F::from_f64(1.0 - v as f64);
    }
    let a = g.constant(a);
    let one_minus = g.constant(one_minus);
    let eps = g.constant(eps.mapv(|v| F::from_f64(v as f64)).into_dyn());
    let za = g.mul(z, a);
    let ea = g.mul(eps, one_minus);
    g.add(za, ea)
}

/// Mean patch-wise `1 - cos` between mapped latents and teacher features,
/// as a graph node. `teacher_feats` must already be a graph node (with
/// strictly positive patch norms; enforce via [`check_teacher_norms`]).
pub fn alignment_loss_graph<F: Real>(
    g: &mut Graph<F>,
    mapped: NodeId,
    teacher_feats: NodeId,
) -> NodeId {
    let prod = g.mul(mapped, teacher_feats);
    let dot = g.sum_axis(prod, 2, false); // (B,N)
    let m2 = g.square(mapped);
    let m2 = g.sum_axis(m2, 2, false);
    let mnorm = g.sqrt(m2);
    let mnorm = g.clamp_min(mnorm, F::from_f64(COSINE_NORM_FLOOR));
    let t2 = g.square(teacher_feats);
    let t2 = g.sum_axis(t2, 2, false);
    let tnorm = g.sqrt(t2);
    let denom = g.mul(mnorm, tnorm);
    let cos = g.div(dot, denom);
    let neg = g.neg(cos);
    let one_minus = g.add_scalar(neg, F::one());
    g.mean_all(one_minus)
}

/// Rejects teacher feature maps containing a zero-norm patch.
pub fn check_teacher_norms(features: &Array3<f32>) -> Result<()> {
    for (bi, img) in features.outer_iter().enumerate() {
        for (n, patch) in img.outer_iter().enumerate() {
            let norm: f32 = patch.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::Data(format!(
                    "teacher patch norm {norm} at (sample {bi}, patch {n})"
                )));
            }
        }
    }
    Ok(())
}

/// Plain evaluation of the alignment loss.
pub fn alignment_loss(mapped: &Array3<f32>, teacher_feats: &PatchFeatureMap) -> Result<f64> {
    if mapped.shape() != teacher_feats.features.shape() {
        return Err(Error::Config(format!(
            "shape mismatch {:?} vs {:?}",
            mapped.shape(),
            teacher_feats.features.shape()
        )));
    }
    check_teacher_norms(&teacher_feats.features)?;
    let mut g = Graph::<f32>::new();
    let m = g.constant(mapped.clone().into_dyn());
    let t = g.constant(teacher_feats.features.clone().into_dyn());
    let loss = alignment_loss_graph(&mut g, m, t);
    Ok(g.scalar(loss) as f64)
}

/// Serializable alignment-training configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignConfig {
    pub lambda_align: f64,
    pub noise_enabled: bool,
    pub mapper: MapperConfig,
    pub optimizer: OptimizerConfig,
    pub loss_weights: LossWeights,
    pub gan_enabled: bool,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda_align: 1.0,
            noise_enabled: true,
            mapper: MapperConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss_weights: LossWeights::default(),
            gan_enabled: false,
            steps: 5000,
            batch: 64,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_align < 0.0 {
            return Err(Error::Config("lambda_align must be >= 0".into()));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_mapper(&self) -> bool {
        self.lambda_align > 0.0
    }
}

/// Fills `total` from the weighted parts under this config.
pub fn total_objective(parts: &LossBreakdown, cfg: &AlignConfig) -> LossBreakdown {
    let w = &cfg.loss_weights;
    let mut out = *parts;
    out.total = cfg.lambda_align * parts.align
        + w.mse * parts.mse
        + w.perceptual * parts.perceptual
        + w.kl * parts.kl
        + if cfg.gan_enabled { w.gan * parts.gan_g } else { 0.0 };
    out
}

/// One line of the training log (JSONL on disk).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub mse: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub align: f64,
    pub total: f64,
    pub alpha_mean: f64,
}

/// A VAE (and possibly mapper) after alignment training. Parameters live in
/// one store under the `vae.` / `mapper.` namespaces.
#[derive(Clone, Debug)]
pub struct TrainedVae {
    pub vae_cfg: VaeConfig,
    pub mapper_cfg: Option<MapperConfig>,
    pub params: ParamStore<f32>,
    pub step: u64,
    pub seed: u64,
}

impl TrainedVae {
    pub fn vae(&self) -> Vae {
        Vae {
            cfg: self.vae_cfg.clone(),
            params: self.params.subset("vae.").strip_prefix("vae."),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "vae",
            "vae": self.vae_cfg,
            "mapper": self.mapper_cfg,
        });
        crate::checkpoint::save(dir, &self.params, None, self.step, self.seed, meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<TrainedVae> {
        let (params, manifest) = crate::checkpoint::load(dir)?;
        let vae_cfg: VaeConfig = serde_json::from_value(
            manifest
                .meta
                .get("vae")
                .cloned()
                .ok_or_else(|| Error::Data("missing vae config in checkpoint".into()))?,
        )?;
        let mapper_cfg: Option<MapperConfig> = match manifest.meta.get("mapper") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => None,
        };
        Ok(TrainedVae {
            vae_cfg,
            mapper_cfg,
            params,
            step: manifest.step,
            seed: manifest.seed,
        })
    }
}

/// Precomputed teacher features for every dataset image.
pub fn teacher_feature_cache(teacher: &TeacherHandle, dataset: &Dataset) -> Result<Array3<f32>> {
    let n = dataset.len();
    let (gr, gc) = teacher.grid();
    let d = teacher.feature_dim();
    let mut out = Array3::<f32>::zeros((n, gr * gc, d));
    let chunk = 128;
    let mut at = 0;
    while at < n {
        let to = (at + chunk).min(n);
        let feats = teacher.forward(&dataset.image_slice(at, to))?;
        check_teacher_norms(&feats.features)?;
        out.slice_mut(ndarray::s![at..to, .., ..])
            .assign(&feats.features);
        at = to;
    }
    Ok(out)
}

struct StepOutcome {
    record: TrainLogRecord,
    finite: bool,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &ParamStore<f32>,
    disc: Option<&PatchDiscriminator>,
    vae_cfg: &VaeConfig,
    cfg: &AlignConfig,
    teacher: &TeacherHandle,
    dataset: &Dataset,
    feature_cache: &Array3<f32>,
    step: usize,
) -> (Graph<f32>, crate::nn::Bound, NodeId, StepOutcome) {
    let n = dataset.len();
    let idx = rng::batch_indices(cfg.seed, step as u64, cfg.batch, n);
    let canvas = vae_cfg.canvas_size;
    let mut xb = Array4::<f32>::zeros((cfg.batch, 3, canvas, canvas));
    let (gr, gc) = teacher.grid();
    let dfeat = teacher.feature_dim();
    let mut tf = Array3::<f32>::zeros((cfg.batch, gr * gc, dfeat));
    for (r, &i) in idx.iter().enumerate() {
        xb.index_axis_mut(Axis(0), r)
            .assign(&dataset.images.index_axis(Axis(0), i));
        tf.index_axis_mut(Axis(0), r)
            .assign(&feature_cache.index_axis(Axis(0), i));
    }

    // per-step noise streams; pure functions of (seed, step)
    let side = vae_cfg.latent_side();
    let d = vae_cfg.latent_channels;
    let mut reparam_rng = rng::stream(cfg.seed, "reparam", step as u64);
    let mut eps_reparam = Array4::<f32>::zeros((cfg.batch, d, side, side));
    for v in eps_reparam.iter_mut() {
        *v = rng::normal(&mut reparam_rng) as f32;
    }
    let mut noise_rng = rng::stream(cfg.seed, "inject", step as u64);
    let (alpha, eps_mix): (Vec<f32>, Array4<f32>) = if cfg.noise_enabled {
        let a: Vec<f32> = (0..cfg.batch).map(|_| noise_rng.gen::<f32>()).collect();
        let mut e = Array4::<f32>::zeros((cfg.batch, d, side, side));
        for v in e.iter_mut() {
            *v = rng::normal(&mut noise_rng) as f32;
        }
        (a, e)
    } else {
        (
            vec![1.0; cfg.batch],
            Array4::<f32>::zeros((cfg.batch, d, side, side)),
        )
    };
    let alpha_mean = alpha.iter().map(|&a| a as f64).sum::<f64>() / alpha.len() as f64;

    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let x = g.constant(xb.into_dyn());
    let tf_node = g.constant(tf.into_dyn());

    let (mu, logvar) = encode_graph(&mut g, &bound, "vae.", vae_cfg, x);
    let eps_node = g.constant(eps_reparam.into_dyn());
    let z = reparameterize_graph(&mut g, mu, logvar, eps_node);

    let align_node = if cfg.uses_mapper() {
        let z_t = inject_noise_graph(&mut g, z, &alpha, &eps_mix);
        let mapped = mapper_forward(&mut g, &bound, "mapper.", &cfg.mapper, z_t, gr * gc)
            .expect("mapper/teacher token mismatch was validated at setup");
        Some(alignment_loss_graph(&mut g, mapped, tf_node))
    } else {
        None
    };

    let xhat = decode_graph(&mut g, &bound, "vae.", vae_cfg, z);
    let mse = mse_graph(&mut g, xhat, x);
    let perceptual = perceptual_graph(&mut g, teacher, xhat, tf_node);
    let kl = kl_graph(&mut g, mu, logvar);

    let gan_g_node = if let Some(disc) = disc {
        let dbound = disc.params.bind_frozen(&mut g);
        let fake_logits = disc.logits_graph(&mut g, &dbound, xhat);
        Some(gan_generator_graph(&mut g, fake_logits))
    } else {
        None
    };

    // total = lambda*align + w_mse*mse + w_p*perceptual + w_kl*kl (+ w_gan*gan_g)
    let w = &cfg.loss_weights;
    let mut total = g.scale(mse, w.mse as f32);
    let wp = g.scale(perceptual, w.perceptual as f32);
    total = g.add(total, wp);
    let wk = g.scale(kl, w.kl as f32);
    total = g.add(total, wk);
    if let Some(a) = align_node {
        let wa = g.scale(a, cfg.lambda_align as f32);
        total = g.add(total, wa);
    }
    if let Some(gg) = gan_g_node {
        let wg = g.scale(gg, w.gan as f32);
        total = g.add(total, wg);
    }

    let record = TrainLogRecord {
        step,
        mse: g.scalar(mse) as f64,
        perceptual: g.scalar(perceptual) as f64,
        kl: g.scalar(kl) as f64,
        align: align_node.map(|a| g.scalar(a) as f64).unwrap_or(0.0),
        total: g.scalar(total) as f64,
        alpha_mean,
    };
    let finite = record.total.is_finite();
    (
        g,
        bound,
        total,
        StepOutcome { record, finite },
    )
}

/// Joint fine-tuning of VAE and mapper on the combined objective.
///
/// Deterministic given `cfg.seed`; resumable: pass `resume = true` with an
/// `out_dir` containing a mid-run checkpoint and training continues from the
/// recorded step with identical results.
pub fn train_vae_aligned(
    init: &Vae,
    dataset: &Dataset,
    teacher: &TeacherHandle,
    cfg: &AlignConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<(TrainedVae, Vec<TrainLogRecord>)> {
    cfg.validate()?;
    init.cfg.validate()?;
    if init.cfg.canvas_size != teacher.canvas_size() {
        return Err(Error::Config(format!(
            "teacher canvas {} != vae canvas {}",
            teacher.canvas_size(),
            init.cfg.canvas_size
        )));
    }
    let (gr, gc) = teacher.grid();
    if cfg.uses_mapper() {
        cfg.mapper.validate(init.cfg.latent_side())?;
        if cfg.mapper.tokens(init.cfg.latent_side()) != gr * gc {
            return Err(Error::Config(format!(
                "mapper tokens {} != teacher patches {}",
                cfg.mapper.tokens(init.cfg.latent_side()),
                gr * gc
            )));
        }
        if cfg.mapper.out_dim != teacher.feature_dim() {
            return Err(Error::Config(format!(
                "mapper out_dim {} != teacher dim {}",
                cfg.mapper.out_dim,
                teacher.feature_dim()
            )));
        }
    }

    let teacher_checksum = teacher.checksum();

    // assemble the joint parameter store
    let mut params = ParamStore::<f32>::new();
    params.adopt("vae.", init.params.clone());
    if cfg.uses_mapper() {
        let mapper = init_mapper_params::<f32>(
            &cfg.mapper,
            init.cfg.latent_channels,
            init.cfg.latent_side(),
            cfg.seed ^ 0x6d61_7070,
        )?;
        params.adopt("mapper.", mapper);
    }
    let mut opt = AdamW::new(cfg.optimizer, &params);
    let mut start_step = 0usize;

    if resume {
        if let Some(dir) = out_dir {
            let ck = dir.join("checkpoint");
            if ck.join("manifest.json").exists() {
                let (loaded, manifest) = crate::checkpoint::load(&ck)?;
                if manifest.has_optimizer_state {
                    let (m, v, s) = crate::checkpoint::load_opt_state(&ck, loaded.len())?;
                    opt.restore_state(m, v, s);
                }
                params = loaded;
                start_step = manifest.step as usize;
            }
        }
    }

    let disc = if cfg.gan_enabled {
        Some(PatchDiscriminator::init(16, cfg.seed ^ 0x6469_7363))
    } else {
        None
    };
    let mut disc = disc;
    let mut disc_opt = disc.as_ref().map(|d| {
        AdamW::new(
            OptimizerConfig {
                learning_rate: cfg.optimizer.learning_rate,
                ..cfg.optimizer
            },
            &d.params,
        )
    });

    let feature_cache = teacher_feature_cache(teacher, dataset)?;
    let mut log = Vec::with_capacity(cfg.steps.saturating_sub(start_step));
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("train_log.jsonl"))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };

    let mut last_good = params.clone();
    for step in start_step..cfg.steps {
        let (mut g, bound, total, outcome) = train_step(
            &params,
            disc.as_ref(),
            &init.cfg,
            cfg,
            teacher,
            dataset,
            &feature_cache,
            step,
        );
        if !outcome.finite {
            let trained = TrainedVae {
                vae_cfg: init.cfg.clone(),
                mapper_cfg: cfg.uses_mapper().then(|| cfg.mapper),
                params: last_good,
                step: step as u64,
                seed: cfg.seed,
            };
            if let Some(dir) = out_dir {
                trained.save(dir.join("checkpoint"))?;
            }
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}; last good checkpoint preserved"
            )));
        }
        let grads = g.backward(total);
        let gvec = bound.collect_grads(&grads, &params);
        last_good = params.clone();
        opt.update(&mut params, &gvec);

        // discriminator update on its own objective
        if let (Some(d), Some(dopt)) = (disc.as_mut(), disc_opt.as_mut()) {
            update_discriminator(d, dopt, &params, &init.cfg, cfg, dataset, step)?;
        }

        if let Some(w) = log_file.as_mut() {
            use std::io::Write;
            serde_json::to_writer(&mut *w, &outcome.record)?;
            writeln!(w)?;
        }
        log.push(outcome.record);
    }
    if let Some(mut w) = log_file {
        use std::io::Write;
        w.flush()?;
    }

    if teacher.checksum() != teacher_checksum {
        return Err(Error::Data(
            "teacher parameters changed during VAE training".into(),
        ));
    }

    let trained = TrainedVae {
        vae_cfg: init.cfg.clone(),
        mapper_cfg: cfg.uses_mapper().then(|| cfg.mapper),
        params,
        step: cfg.steps as u64,
        seed: cfg.seed,
    };
    if let Some(dir) = out_dir {
        let ck = dir.join("checkpoint");
        trained.save(&ck)?;
        let (m, v) = opt.state_tensors();
        crate::checkpoint::save(
            &ck,
            &trained.params,
            Some((m, v, opt.step)),
            trained.step,
            trained.seed,
            serde_json::json!({
                "kind": "vae",
                "vae": trained.vae_cfg,
                "mapper": trained.mapper_cfg,
            }),
        )?;
    }
    Ok((trained, log))
}

fn update_discriminator(
    disc: &mut PatchDiscriminator,
    opt: &mut AdamW<f32>,
    joint_params: &ParamStore<f32>,
    vae_cfg: &VaeConfig,
    cfg: &AlignConfig,
    dataset: &Dataset,
    step: usize,
) -> Result<()> {
    // reconstruct current decoder output without gradients, then train D
    let vae = Vae {
        cfg: vae_cfg.clone(),
        params: joint_params.subset("vae.").strip_prefix("vae."),
    };
    let idx = rng::batch_indices(cfg.seed ^ 0xd15c, step as u64, cfg.batch.min(16), dataset.len());
    let canvas = vae_cfg.canvas_size;
    let mut xb = Array4::<f32>::zeros((idx.len(), 3, canvas, canvas));
    for (r, &i) in idx.iter().enumerate() {
        xb.index_axis_mut(Axis(0), r)
            .assign(&dataset.images.index_axis(Axis(0), i));
    }
    let enc = vae.encode(&xb)?;
    let xhat = vae.decode(&enc.mu)?;

    let mut g = Graph::<f32>::new();
    let bound = disc.params.bind(&mut g);
    let real = g.constant(xb.into_dyn());
    let fake = g.constant(xhat.into_dyn());
    let rl = disc.logits_graph(&mut g, &bound, real);
    let fl = disc.logits_graph(&mut g, &bound, fake);
    let loss = gan_discriminator_graph(&mut g, rl, fl);
    let grads = g.backward(loss);
    let gvec = bound.collect_grads(&grads, &disc.params);
    opt.update(&mut disc.params, &gvec);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fd::{check_gradients, FdSettings};
    use crate::nn::normal_init;
    use crate::synthdata::DatasetConfig;
    use crate::teacher::AnalyticTeacherConfig;

    #[test]
    fn disabled_injection_is_identity() {
        let z = normal_init::<f32>(2, "z", &[3, 2, 4, 4], 1.0)
            .into_dimensionality()
            .unwrap();
        let mut rng = rng::stream(0, "t", 0);
        let out = inject_noise(&z, &mut rng, false);
        assert_eq!(out.z_t, z);
        assert_eq!(out.alpha, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn alpha_one_returns_clean_latent_in_graph() {
        let z = normal_init::<f32>(3, "z", &[2, 1, 2, 2], 1.0);
        let eps = normal_init::<f32>(4, "e", &[2, 1, 2, 2], 1.0)
            .into_dimensionality()
            .unwrap();
        let mut g = Graph::<f32>::new();
        let zn = g.constant(z.clone());
        let zt = inject_noise_graph(&mut g, zn, &[1.0, 1.0], &eps);
        assert_eq!(g.value(zt), &z);
    }

    #[test]
    fn mixed_mean_matches_monte_carlo() {
        // z fixed at 1, alpha = 0.3: E[z_t] = 0.3
        let n = 100_000usize;
        let mut rng = rng::stream(5, "mix", 0);
        let mut acc = 0.0f64;
        for _ in 0..n {
            let eps = rng::normal(&mut rng);
            acc += 0.7 * eps + 0.3;
        }
        let mean = acc / n as f64;
        let tol = 3.0 * 0.7 / (n as f64).sqrt();
        assert!((mean - 0.3).abs() < tol, "mean {mean}");
    }

    fn feat_map(f: Array3<f32>) -> PatchFeatureMap {
        PatchFeatureMap {
            features: f,
            patch_grid: (1, 1),
            teacher_id: "test".into(),
        }
    }

    #[test]
    fn alignment_loss_extremes_and_orthogonal() {
        let t = normal_init::<f32>(7, "t", &[2, 3, 4], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let same = alignment_loss(&t.clone(), &feat_map(t.clone())).unwrap();
        assert!(same.abs() < 1e-6);
        let neg = alignment_loss(&t.mapv(|v| -v), &feat_map(t.clone())).unwrap();
        assert!((neg - 2.0).abs() < 1e-6);

        let mapped =
            Array3::from_shape_vec((1, 1, 2), vec![1.0f32, 0.0]).unwrap();
        let teach = Array3::from_shape_vec((1, 1, 2), vec![0.0f32, 1.0]).unwrap();
        let orth = alignment_loss(&mapped, &feat_map(teach)).unwrap();
        assert!((orth - 1.0).abs() < 1e-7);
    }

    #[test]
    fn alignment_loss_matches_per_patch_brute_force() {
        let mapped = normal_init::<f32>(9, "m", &[2, 3, 4], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let teach = normal_init::<f32>(10, "t", &[2, 3, 4], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let got = alignment_loss(&mapped, &feat_map(teach.clone())).unwrap();

        let mut acc = 0.0f64;
        for b in 0..2 {
            for n in 0..3 {
                let mut dot = 0.0f64;
                let mut nm = 0.0f64;
                let mut nt = 0.0f64;
                for d in 0..4 {
                    let m = mapped[[b, n, d]] as f64;
                    let t = teach[[b, n, d]] as f64;
                    dot += m * t;
                    nm += m * m;
                    nt += t * t;
                }
                acc += 1.0 - dot / (nm.sqrt().max(1e-8) * nt.sqrt());
            }
        }
        let brute = acc / 6.0;
        assert!((got - brute).abs() < 1e-6, "{got} vs {brute}");
    }

    #[test]
    fn alignment_loss_rejects_zero_norm_teacher_patch() {
        let mapped = normal_init::<f32>(11, "m", &[1, 2, 3], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let mut teach = mapped.clone();
        teach.index_axis_mut(Axis(1), 1).fill(0.0);
        assert!(matches!(
            alignment_loss(&mapped, &feat_map(teach)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn alignment_is_scale_invariant_in_mapped() {
        let mapped = normal_init::<f32>(12, "m", &[2, 2, 5], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let teach = normal_init::<f32>(13, "t", &[2, 2, 5], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let a = alignment_loss(&mapped, &feat_map(teach.clone())).unwrap();
        let b = alignment_loss(&mapped.mapv(|v| v * 37.5), &feat_map(teach)).unwrap();
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn alignment_gradients_match_finite_differences() {
        let mapped0 = normal_init::<f64>(14, "m", &[2, 3, 4], 1.0);
        let teach = normal_init::<f64>(15, "t", &[2, 3, 4], 1.0);
        let leaves = vec![mapped0];
        let run = |ls: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
            let mut g = Graph::<f64>::new();
            let m = g.variable(ls[0].clone());
            let t = g.constant(teach.clone());
            let loss = alignment_loss_graph(&mut g, m, t);
            let grads = g.backward(loss);
            (g.scalar(loss), vec![grads.get_or_zeros(m, ls[0].shape())])
        };
        let (_, analytic) = run(&leaves);
        let outcome = check_gradients(
            &leaves,
            &|ls| run(ls).0,
            &analytic,
            &FdSettings {
                samples_per_leaf: 24,
                ..Default::default()
            },
        );
        assert!(
            outcome.max_rel_err <= 1e-4,
            "alignment FD mismatch {}",
            outcome.max_rel_err
        );
    }

    #[test]
    fn total_objective_weighted_sum_is_exact() {
        let cfg = AlignConfig::default();
        let parts = LossBreakdown {
            mse: 0.25,
            perceptual: 0.5,
            kl: 3.0,
            align: 0.75,
            gan_g: 0.0,
            gan_d: 0.0,
            total: 0.0,
        };
        let out = total_objective(&parts, &cfg);
        let hand = 1.0 * 0.75 + 1.0 * 0.25 + 0.5 * 0.5 + 1e-4 * 3.0;
        assert!((out.total - hand).abs() < 1e-12);

        let degenerate = AlignConfig {
            lambda_align: 0.0,
            ..cfg
        };
        let out = total_objective(&parts, &degenerate);
        let vae_only = 1.0 * 0.25 + 0.5 * 0.5 + 1e-4 * 3.0;
        assert!((out.total - vae_only).abs() < 1e-12);
    }

    fn tiny_setup() -> (Vae, Dataset, TeacherHandle, AlignConfig) {
        let vae_cfg = VaeConfig {
            downsample: 4,
            latent_channels: 2,
            base_width: 6,
            canvas_size: 32,
        };
        let vae = Vae::init(vae_cfg, 1).unwrap();
        let dataset = Dataset::generate(3, 64, &DatasetConfig::default()).unwrap();
        let teacher = TeacherHandle::analytic(AnalyticTeacherConfig::default()).unwrap();
        let cfg = AlignConfig {
            lambda_align: 1.0,
            noise_enabled: true,
            mapper: MapperConfig {
                patch_size: 1,
                depth: 0,
                heads: 4,
                hidden_dim: 32,
                out_dim: 64,
            },
            optimizer: OptimizerConfig {
                learning_rate: 2e-3,
                ..Default::default()
            },
            steps: 30,
            batch: 8,
            seed: 11,
            ..Default::default()
        };
        (vae, dataset, teacher, cfg)
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let (vae, dataset, teacher, cfg) = tiny_setup();
        let (a, _) = train_vae_aligned(&vae, &dataset, &teacher, &cfg, None, false).unwrap();
        let (b, _) = train_vae_aligned(&vae, &dataset, &teacher, &cfg, None, false).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (vae, dataset, teacher, cfg) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();

        // uninterrupted
        let (full, log_full) =
            train_vae_aligned(&vae, &dataset, &teacher, &cfg, None, false).unwrap();

        // first half, checkpointed
        let half = AlignConfig {
            steps: 15,
            ..cfg.clone()
        };
        train_vae_aligned(&vae, &dataset, &teacher, &half, Some(dir.path()), false).unwrap();
        // second half, resumed
        let (resumed, log_tail) =
            train_vae_aligned(&vae, &dataset, &teacher, &cfg, Some(dir.path()), true).unwrap();

        assert_eq!(full.params.checksum(), resumed.params.checksum());
        let last_full = log_full.last().unwrap();
        let last_tail = log_tail.last().unwrap();
        assert_eq!(last_full.total, last_tail.total);
    }

    #[test]
    fn training_reduces_smoothed_loss() {
        let (vae, dataset, teacher, mut cfg) = tiny_setup();
        cfg.steps = 500;
        cfg.batch = 8;
        let (_, log) = train_vae_aligned(&vae, &dataset, &teacher, &cfg, None, false).unwrap();
        let smooth = |at: usize| -> f64 {
            let lo = at.saturating_sub(10);
            let hi = (at + 10).min(log.len() - 1);
            let span = &log[lo..=hi];
            span.iter().map(|r| r.total).sum::<f64>() / span.len() as f64
        };
        let early = smooth(50);
        let late = smooth(499);
        assert!(
            late < early,
            "smoothed loss did not decrease: {early} -> {late}"
        );
    }

    #[test]
    fn teacher_is_frozen_through_training() {
        let (vae, dataset, teacher, mut cfg) = tiny_setup();
        cfg.steps = 5;
        let before = teacher.checksum();
        train_vae_aligned(&vae, &dataset, &teacher, &cfg, None, false).unwrap();
        assert_eq!(before, teacher.checksum());
    }
}
