//! Convolutional VAE: encoder, reparameterized sampling, decoder, and the
//! non-adversarial reconstruction/KL losses (plus an optional flag-gated
//! hinge-loss patch discriminator).

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Real};
use crate::nn::{xavier, Bound, ParamStore};
use crate::teacher::TeacherHandle;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Spatial downsample factor (2 or 4 at this scale).
    pub downsample: usize,
    /// Latent channels.
    pub latent_channels: usize,
    pub base_width: usize,
    pub canvas_size: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            downsample: 4,
            latent_channels: 4,
            base_width: 24,
            canvas_size: 32,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.downsample, 2 | 4) {
            return Err(Error::Config(format!(
                "downsample must be 2 or 4, got {}",
                self.downsample
            )));
        }
        if self.latent_channels < 1 {
            return Err(Error::Config("latent_channels must be >= 1".into()));
        }
        if self.canvas_size % self.downsample != 0 {
            return Err(Error::Config(format!(
                "canvas {} not divisible by downsample {}",
                self.canvas_size, self.downsample
            )));
        }
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.canvas_size / self.downsample
    }

    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Encoder widths per downsampling level.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| self.base_width << i).collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.latent_side() * self.latent_side()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub mu: Array4<f32>,
    pub logvar: Array4<f32>,
}

/// Per-term losses of one training step; `total` is the weighted sum under
/// the config in force.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub align: f64,
    pub total: f64,
}

/// Weights of the VAE objective terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mse: 1.0,
            perceptual: 0.5,
            kl: 1e-4,
            gan: 0.1,
        }
    }
}

fn conv_init<F: Real>(
    store: &mut ParamStore<F>,
    seed: u64,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) {
    let fan_in = in_c * k * k;
    let fan_out = out_c * k * k;
    store.insert(
        format!("{name}.w"),
        xavier(seed, name, &[out_c, in_c, k, k], fan_in, fan_out),
    );
    store.insert(format!("{name}.b"), crate::nn::zeros(&[out_c, 1, 1]));
}

/// Registers encoder and decoder parameters under `enc.` / `dec.`.
pub fn init_vae_params<F: Real>(cfg: &VaeConfig, seed: u64) -> ParamStore<F> {
    let mut store = ParamStore::new();
    let widths = cfg.widths();
    let top = *widths.last().unwrap();

    let mut in_c = 3;
    for (i, &w) in widths.iter().enumerate() {
        conv_init(&mut store, seed, &format!("enc.down{i}"), w, in_c, 3);
        in_c = w;
    }
    conv_init(&mut store, seed, "enc.mid", top, top, 3);
    conv_init(&mut store, seed, "enc.head", 2 * cfg.latent_channels, top, 1);

    conv_init(&mut store, seed, "dec.stem", top, cfg.latent_channels, 1);
    conv_init(&mut store, seed, "dec.mid", top, top, 3);
    for i in (0..widths.len()).rev() {
        let out_c = if i == 0 { widths[0] } else { widths[i - 1] };
        conv_init(&mut store, seed, &format!("dec.up{i}"), out_c, widths[i], 3);
    }
    conv_init(&mut store, seed, "dec.out", 3, widths[0], 3);
    store
}

fn conv_block<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
    silu: bool,
) -> NodeId {
    let y = g.conv2d(x, bound.id(&format!("{name}.w")), stride, pad, pad);
    let y = g.add(y, bound.id(&format!("{name}.b")));
    if silu {
        g.silu(y)
    } else {
        y
    }
}

/// Encoder graph: image node to `(mu, logvar)`, logvar clamped.
/// `prefix` namespaces parameter lookups (e.g. `"vae."` in a joint store).
pub fn encode_graph<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    cfg: &VaeConfig,
    x: NodeId,
) -> (NodeId, NodeId) {
    let mut h = x;
    for i in 0..cfg.levels() {
        h = conv_block(g, bound, &format!("{prefix}enc.down{i}"), h, 2, 1, true);
    }
    h = conv_block(g, bound, &format!("{prefix}enc.mid"), h, 1, 1, true);
    let head = conv_block(g, bound, &format!("{prefix}enc.head"), h, 1, 0, false);
    let d = cfg.latent_channels;
    let mu = g.slice_axis(head, 1, 0, d);
    let logvar_raw = g.slice_axis(head, 1, d, 2 * d);
    let logvar = g.clamp(logvar_raw, F::from_f64(LOGVAR_MIN), F::from_f64(LOGVAR_MAX));
    (mu, logvar)
}

/// Decoder graph: latent node to an image in `[0,1]`.
pub fn decode_graph<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    cfg: &VaeConfig,
    z: NodeId,
) -> NodeId {
    let mut h = conv_block(g, bound, &format!("{prefix}dec.stem"), z, 1, 0, true);
    h = conv_block(g, bound, &format!("{prefix}dec.mid"), h, 1, 1, true);
    for i in (0..cfg.levels()).rev() {
        h = g.upsample2x(h);
        h = conv_block(g, bound, &format!("{prefix}dec.up{i}"), h, 1, 1, true);
    }
    let out = conv_block(g, bound, &format!("{prefix}dec.out"), h, 1, 1, false);
    g.sigmoid(out)
}

/// Reparameterization graph node: `z = mu + exp(0.5 logvar) * eps`.
pub fn reparameterize_graph<F: Real>(
    g: &mut Graph<F>,
    mu: NodeId,
    logvar: NodeId,
    eps: NodeId,
) -> NodeId {
    let half = g.scale(logvar, F::from_f64(0.5));
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps);
    g.add(mu, noise)
}

/// KL(q || N(0,I)) graph node: batch mean of per-sample sums.
pub fn kl_graph<F: Real>(g: &mut Graph<F>, mu: NodeId, logvar: NodeId) -> NodeId {
    let batch = g.shape(mu)[0];
    let mu2 = g.square(mu);
    let ev = g.exp(logvar);
    let s = g.add(mu2, ev);
    let s = g.sub(s, logvar);
    let s = g.add_scalar(s, F::from_f64(-1.0));
    let total = g.sum_all(s);
    g.scale(total, F::from_f64(0.5 / batch as f64))
}

/// The trainable VAE with its parameter store (namespaces `enc.`, `dec.`).
#[derive(Clone, Debug)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub params: ParamStore<f32>,
}

impl Vae {
    pub fn init(cfg: VaeConfig, seed: u64) -> Result<Vae> {
        cfg.validate()?;
        Ok(Vae {
            params: init_vae_params(&cfg, seed),
            cfg,
        })
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let s = x.shape();
        if s[1] != 3 || s[2] != self.cfg.canvas_size || s[3] != self.cfg.canvas_size {
            return Err(Error::Config(format!(
                "input {:?} does not match canvas {}",
                s, self.cfg.canvas_size
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Array4<f32>) -> Result<EncoderOutput> {
        self.check_input(x)?;
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let xn = g.constant(x.clone().into_dyn());
        let (mu, logvar) = encode_graph(&mut g, &bound, "", &self.cfg, xn);
        let mu = g.value(mu).clone().into_dimensionality().unwrap();
        let logvar = g.value(logvar).clone().into_dimensionality().unwrap();
        if !mu.iter().all(|v: &f32| v.is_finite()) || !logvar.iter().all(|v: &f32| v.is_finite()) {
            return Err(Error::Numeric("non-finite encoder activations".into()));
        }
        Ok(EncoderOutput { mu, logvar })
    }

    pub fn decode(&self, z: &Array4<f32>) -> Result<Array4<f32>> {
        let side = self.cfg.latent_side();
        let s = z.shape();
        if s[1] != self.cfg.latent_channels || s[2] != side || s[3] != side {
            return Err(Error::Config(format!(
                "latent {:?} does not match (d={}, side={})",
                s, self.cfg.latent_channels, side
            )));
        }
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let zn = g.constant(z.clone().into_dyn());
        let out = decode_graph(&mut g, &bound, "", &self.cfg, zn);
        Ok(g.value(out).clone().into_dimensionality().unwrap())
    }
}

/// Samples `z = mu + exp(0.5 logvar) * eps` with fresh standard normals.
pub fn reparameterize<R: rand::Rng>(
    mu: &Array4<f32>,
    logvar: &Array4<f32>,
    rng: &mut R,
) -> Array4<f32> {
    let mut z = mu.clone();
    ndarray::Zip::from(&mut z).and(logvar).for_each(|z, &lv| {
        let eps = crate::rng::normal(rng) as f32;
        *z += (0.5 * lv).exp() * eps;
    });
    z
}

/// Mean-over-batch KL divergence to the standard normal (plain evaluation).
pub fn kl_divergence(mu: &Array4<f32>, logvar: &Array4<f32>) -> f64 {
    let b = mu.shape()[0] as f64;
    let mut acc = 0.0f64;
    ndarray::Zip::from(mu).and(logvar).for_each(|&m, &lv| {
        let m = m as f64;
        let lv = lv as f64;
        acc += m * m + lv.exp() - 1.0 - lv;
    });
    0.5 * acc / b
}

/// Pixel MSE and teacher-feature distance (perceptual proxy).
pub fn reconstruction_losses(
    x: &Array4<f32>,
    xhat: &Array4<f32>,
    teacher: &TeacherHandle,
) -> Result<(f64, f64)> {
    if x.shape() != xhat.shape() {
        return Err(Error::Config(format!(
            "shape mismatch {:?} vs {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    let mut mse = 0.0f64;
    ndarray::Zip::from(x).and(xhat).for_each(|&a, &b| {
        let d = (a - b) as f64;
        mse += d * d;
    });
    mse /= x.len() as f64;

    let fx = teacher.forward(x)?;
    let fh = teacher.forward(xhat)?;
    let mut per = 0.0f64;
    ndarray::Zip::from(&fx.features)
        .and(&fh.features)
        .for_each(|&a, &b| {
            let d = (a - b) as f64;
            per += d * d;
        });
    per /= fx.features.len() as f64;
    Ok((mse, per))
}

// ---- optional adversarial branch ----

#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub params: ParamStore<f32>,
    pub width: usize,
}

impl PatchDiscriminator {
    pub fn init(width: usize, seed: u64) -> PatchDiscriminator {
        let mut store = ParamStore::new();
        conv_init(&mut store, seed, "disc.c0", width, 3, 3);
        conv_init(&mut store, seed, "disc.c1", width * 2, width, 3);
        conv_init(&mut store, seed, "disc.head", 1, width * 2, 1);
        PatchDiscriminator {
            params: store,
            width,
        }
    }

    pub fn logits_graph<F: Real>(&self, g: &mut Graph<F>, bound: &Bound, x: NodeId) -> NodeId {
        let h = conv_block(g, bound, "disc.c0", x, 2, 1, true);
        let h = conv_block(g, bound, "disc.c1", h, 2, 1, true);
        conv_block(g, bound, "disc.head", h, 1, 0, false)
    }

    pub fn logits(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let xn = g.constant(x.clone().into_dyn());
        let out = self.logits_graph(&mut g, &bound, xn);
        g.value(out).clone().into_dimensionality().unwrap()
    }
}

/// Hinge losses from precomputed logit maps:
/// `gan_d = mean(relu(1 - D(x)) + relu(1 + D(xhat)))`, `gan_g = -mean(D(xhat))`.
pub fn hinge_losses(real_logits: &Array4<f32>, fake_logits: &Array4<f32>) -> (f64, f64) {
    let n = real_logits.len() as f64;
    let mut d = 0.0f64;
    ndarray::Zip::from(real_logits)
        .and(fake_logits)
        .for_each(|&r, &f| {
            d += (1.0 - r as f64).max(0.0) + (1.0 + f as f64).max(0.0);
        });
    let g = -fake_logits.iter().map(|&v| v as f64).sum::<f64>() / n;
    (g, d / n)
}

/// Hinge generator loss as a graph node (for backprop into the decoder).
pub fn gan_generator_graph<F: Real>(g: &mut Graph<F>, fake_logits: NodeId) -> NodeId {
    let m = g.mean_all(fake_logits);
    g.neg(m)
}

/// Hinge discriminator loss as a graph node (for the discriminator update).
pub fn gan_discriminator_graph<F: Real>(
    g: &mut Graph<F>,
    real_logits: NodeId,
    fake_logits: NodeId,
) -> NodeId {
    let one = F::one();
    let r = g.neg(real_logits);
    let r = g.add_scalar(r, one);
    let r = g.clamp_min(r, F::zero());
    let f = g.add_scalar(fake_logits, one);
    let f = g.clamp_min(f, F::zero());
    let rm = g.mean_all(r);
    let fm = g.mean_all(f);
    g.add(rm, fm)
}

/// MSE between two image nodes.
pub fn mse_graph<F: Real>(g: &mut Graph<F>, a: NodeId, b: NodeId) -> NodeId {
    let d = g.sub(a, b);
    let d2 = g.square(d);
    g.mean_all(d2)
}

/// Perceptual term: mean squared distance between teacher features of the
/// reconstruction (differentiable) and precomputed clean-image features.
pub fn perceptual_graph<F: Real>(
    g: &mut Graph<F>,
    teacher: &TeacherHandle,
    xhat: NodeId,
    clean_features: NodeId,
) -> NodeId {
    let fh = teacher.forward_graph(g, xhat);
    mse_graph(g, fh, clean_features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fd::{check_gradients, FdSettings};
    use crate::synthdata::{generate_batch, DatasetConfig};
    use crate::teacher::AnalyticTeacherConfig;
    use ndarray::{ArrayD, IxDyn};

    fn small_batch(n: usize) -> Array4<f32> {
        let (batch, _, _) = generate_batch(11, n, &DatasetConfig::default()).unwrap();
        batch.data
    }

    #[test]
    fn encode_decode_shapes() {
        let vae = Vae::init(VaeConfig::default(), 3).unwrap();
        let x = small_batch(2);
        let enc = vae.encode(&x).unwrap();
        assert_eq!(enc.mu.shape(), &[2, 4, 8, 8]);
        assert_eq!(enc.logvar.shape(), &[2, 4, 8, 8]);
        for &lv in enc.logvar.iter() {
            assert!((LOGVAR_MIN as f32..=LOGVAR_MAX as f32).contains(&lv));
        }
        let z = enc.mu.clone();
        let xhat = vae.decode(&z).unwrap();
        assert_eq!(xhat.shape(), &[2, 3, 32, 32]);
        for &v in xhat.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn reparameterize_identity_and_moments() {
        // mu = 0, logvar = 0 with a captured eps stream: z equals eps
        let mu = Array4::<f32>::zeros((1, 1, 2, 2));
        let logvar = Array4::<f32>::zeros((1, 1, 2, 2));
        let mut r1 = crate::rng::stream(5, "reparam", 0);
        let z = reparameterize(&mu, &logvar, &mut r1);
        let mut r2 = crate::rng::stream(5, "reparam", 0);
        let mut eps = Array4::<f32>::zeros((1, 1, 2, 2));
        for v in eps.iter_mut() {
            *v = crate::rng::normal(&mut r2) as f32;
        }
        assert_eq!(z, eps);

        // Monte-Carlo mean approaches mu within 3 sigma / sqrt(n)
        let mu = Array4::<f32>::from_elem((1, 1, 1, 4), 0.7);
        let logvar = Array4::<f32>::from_elem((1, 1, 1, 4), 0.3f32);
        let n = 100_000;
        let mut acc = vec![0.0f64; 4];
        let mut rng = crate::rng::stream(9, "mc", 0);
        for _ in 0..n {
            let z = reparameterize(&mu, &logvar, &mut rng);
            for (a, &v) in acc.iter_mut().zip(z.iter()) {
                *a += v as f64;
            }
        }
        let sigma = (0.3f64 / 2.0).exp();
        let tol = 3.0 * sigma / (n as f64).sqrt();
        for a in acc {
            assert!((a / n as f64 - 0.7).abs() < tol);
        }
    }

    #[test]
    fn reparameterize_jacobian_wrt_mu_is_identity() {
        let mut g = Graph::<f64>::new();
        let mu = g.variable(ArrayD::from_elem(IxDyn(&[1, 1, 1, 3]), 0.2));
        let logvar = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 3]), -0.4));
        let eps = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 3]), 1.3));
        let z = reparameterize_graph(&mut g, mu, logvar, eps);
        let s = g.sum_all(z);
        let grads = g.backward(s);
        // d sum(z) / d mu = 1 elementwise
        for &v in grads.get(mu).unwrap().iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_closed_forms() {
        let zeros = Array4::<f32>::zeros((1, 1, 1, 1));
        assert!(kl_divergence(&zeros, &zeros).abs() < 1e-12);
        let mu = Array4::<f32>::from_elem((1, 1, 1, 1), 1.0);
        assert!((kl_divergence(&mu, &zeros) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn kl_matches_monte_carlo_within_one_percent() {
        let mu_v = [0.4f32, -0.8, 1.2, 0.1];
        let lv_v = [0.5f32, -0.7, 0.2, -1.1];
        let mu = Array4::from_shape_vec((1, 1, 1, 4), mu_v.to_vec()).unwrap();
        let lv = Array4::from_shape_vec((1, 1, 1, 4), lv_v.to_vec()).unwrap();
        let analytic = kl_divergence(&mu, &lv);

        let n = 1_000_000usize;
        let mut rng = crate::rng::stream(123, "klmc", 0);
        let mut acc = 0.0f64;
        for _ in 0..n {
            for k in 0..4 {
                let m = mu_v[k] as f64;
                let l = lv_v[k] as f64;
                let s = (0.5 * l).exp();
                let z = m + s * crate::rng::normal(&mut rng);
                // log q - log p, per coordinate
                acc += 0.5 * (z * z - (z - m) * (z - m) / s / s - l);
            }
        }
        let mc = acc / n as f64;
        let rel = (mc - analytic).abs() / analytic.abs();
        assert!(rel < 0.01, "MC {mc} vs analytic {analytic} (rel {rel})");
    }

    #[test]
    fn reconstruction_losses_identity_and_offset() {
        let teacher = TeacherHandle::analytic(AnalyticTeacherConfig::default()).unwrap();
        let x = small_batch(2);
        let (mse, per) = reconstruction_losses(&x, &x, &teacher).unwrap();
        assert_eq!(mse, 0.0);
        assert_eq!(per, 0.0);

        let shifted = x.mapv(|v| v + 0.1);
        let (mse, _) = reconstruction_losses(&x, &shifted, &teacher).unwrap();
        assert!((mse - 0.01).abs() < 1e-9, "mse {mse}");
    }

    #[test]
    fn perceptual_matches_direct_teacher_distance() {
        let teacher = TeacherHandle::analytic(AnalyticTeacherConfig::default()).unwrap();
        let x = small_batch(2);
        let y = small_batch(2).mapv(|v| (v * 0.9 + 0.03).clamp(0.0, 1.0));
        let (_, per) = reconstruction_losses(&x, &y, &teacher).unwrap();
        let fx = teacher.forward(&x).unwrap().features;
        let fy = teacher.forward(&y).unwrap().features;
        let mut direct = 0.0f64;
        ndarray::Zip::from(&fx).and(&fy).for_each(|&a, &b| {
            let d = (a - b) as f64;
            direct += d * d;
        });
        direct /= fx.len() as f64;
        assert!((per - direct).abs() < 1e-12);
    }

    #[test]
    fn hinge_losses_zero_cases_and_hand_formula() {
        let real = Array4::<f32>::from_elem((1, 1, 2, 2), 1.0);
        let fake = Array4::<f32>::from_elem((1, 1, 2, 2), -1.0);
        let (_, d) = hinge_losses(&real, &fake);
        assert_eq!(d, 0.0);

        let fake0 = Array4::<f32>::zeros((1, 1, 2, 2));
        let (g, _) = hinge_losses(&real, &fake0);
        assert_eq!(g, 0.0);

        let real = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5f32, 2.0]).unwrap();
        let fake = Array4::from_shape_vec((1, 1, 1, 2), vec![-0.25f32, 0.5]).unwrap();
        let (g, d) = hinge_losses(&real, &fake);
        let expect_d = ((1.0 - 0.5f64).max(0.0)
            + (1.0 - 2.0f64).max(0.0)
            + (1.0 + (-0.25f64)).max(0.0)
            + (1.0 + 0.5f64).max(0.0))
            / 2.0;
        assert!((d - expect_d).abs() < 1e-9);
        assert!((g - -(-0.25f64 + 0.5) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = VaeConfig {
            downsample: 2,
            latent_channels: 2,
            base_width: 4,
            canvas_size: 8,
        };
        let params = init_vae_params::<f64>(&cfg, 21);
        let x0 = crate::nn::normal_init::<f64>(31, "x", &[1, 3, 8, 8], 0.2).mapv(|v| v + 0.5);
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
            let (mu, _) = encode_graph(&mut g, &bound, "", &cfg, x);
            let loss = g.mean_all(mu);
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
                samples_per_leaf: 8,
                ..Default::default()
            },
        );
        assert!(
            outcome.max_rel_err <= 1e-4,
            "encoder FD mismatch: {}",
            outcome.max_rel_err
        );
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let cfg = VaeConfig {
            downsample: 2,
            latent_channels: 2,
            base_width: 4,
            canvas_size: 8,
        };
        let params = init_vae_params::<f64>(&cfg, 22);
        let z0 = crate::nn::normal_init::<f64>(33, "z", &[1, 2, 4, 4], 0.8);
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
            let out = decode_graph(&mut g, &bound, "", &cfg, z);
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
                samples_per_leaf: 8,
                ..Default::default()
            },
        );
        assert!(
            outcome.max_rel_err <= 1e-4,
            "decoder FD mismatch: {}",
            outcome.max_rel_err
        );
    }

    #[test]
    fn kl_is_nonnegative_on_random_inputs() {
        let mut rng = crate::rng::stream(77, "klprop", 0);
        for _ in 0..50 {
            let mut mu = Array4::<f32>::zeros((2, 2, 2, 2));
            let mut lv = Array4::<f32>::zeros((2, 2, 2, 2));
            for v in mu.iter_mut() {
                *v = crate::rng::normal(&mut rng) as f32 * 2.0;
            }
            for v in lv.iter_mut() {
                *v = crate::rng::normal(&mut rng) as f32 * 2.0;
            }
            assert!(kl_divergence(&mu, &lv) >= -1e-9);
        }
    }
}
