//! Frozen patch-feature teachers.
//!
//! Two kinds share one interface: an analytic teacher whose per-patch
//! descriptor is built from fixed image statistics (so attribute information
//! is linearly decodable by construction), and a small learned patch
//! transformer pretrained as a classifier and then frozen. Both evaluate as
//! pure functions of the pixels, and both can be spliced into an autograd
//! graph so losses may differentiate through them with respect to the image.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Real};
use crate::nn::adamw::{AdamW, OptimizerConfig};
use crate::nn::blocks::{block_forward, init_block, init_pos_embedding, BlockConfig};
use crate::nn::{linear, normal_init, ones, xavier, Bound, ParamStore};
use crate::rng;
use crate::synthdata::dataset::Dataset;
use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Raw descriptor width before projection.
pub const DESCRIPTOR_DIM: usize = 21;

/// Per-channel scales applied to the raw descriptor before projection, so no
/// coordinate family numerically dominates cosine alignment.
/// Order: mean RGB (3), hue histogram (8), stripe bands DC+3 (4),
/// edge/orientation stats (3), presence (1), weighted center (2).
pub const DESCRIPTOR_SCALES: [f64; DESCRIPTOR_DIM] = [
    1.0, 1.0, 1.0, // mean RGB
    1.5, 1.5, 1.5, 1.5, 1.5, 1.5, 1.5, 1.5, // hue histogram
    1.0, 5.0, 5.0, 5.0, // stripe bands
    6.0, 8.0, 8.0, // edge energy, 4-fold alignment stats
    1.0, // presence
    2.0, 2.0, // presence-weighted patch center
];

/// Patch features `y` of shape `(B, N, D)` with row-major patch order.
#[derive(Clone, Debug)]
pub struct PatchFeatureMap {
    pub features: Array3<f32>,
    pub patch_grid: (usize, usize),
    pub teacher_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTeacherConfig {
    pub canvas_size: usize,
    pub grid: (usize, usize),
    pub feature_dim: usize,
    pub projection_seed: u64,
}

impl Default for AnalyticTeacherConfig {
    fn default() -> Self {
        AnalyticTeacherConfig {
            canvas_size: 32,
            grid: (8, 8),
            feature_dim: 64,
            projection_seed: 1_000,
        }
    }
}

/// Analytic teacher: fixed descriptor statistics mapped through a frozen
/// orthonormal-column projection.
#[derive(Clone, Debug)]
pub struct AnalyticTeacher {
    pub cfg: AnalyticTeacherConfig,
    /// `(D, 21)` with orthonormal columns; kept in f64, cast at bind time.
    pub projection: Array2<f64>,
}

/// Orthonormal columns from a seeded Gaussian draw (modified Gram-Schmidt,
/// applied twice for stability).
pub fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    assert!(rows >= cols);
    let mut r = rng::stream(seed, "teacher-proj", 0);
    let mut m = Array2::<f64>::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng::normal(&mut r);
    }
    for j in 0..cols {
        for _ in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..rows).map(|k| m[[k, i]] * m[[k, j]]).sum();
                for k in 0..rows {
                    m[[k, j]] -= dot * m[[k, i]];
                }
            }
        }
        let norm: f64 = (0..rows).map(|k| m[[k, j]] * m[[k, j]]).sum::<f64>().sqrt();
        for k in 0..rows {
            m[[k, j]] /= norm;
        }
    }
    m
}

impl AnalyticTeacher {
    pub fn new(cfg: AnalyticTeacherConfig) -> Result<AnalyticTeacher> {
        if cfg.feature_dim < DESCRIPTOR_DIM {
            return Err(Error::Config(format!(
                "feature_dim must be >= {DESCRIPTOR_DIM}, got {}",
                cfg.feature_dim
            )));
        }
        let (gr, gc) = cfg.grid;
        if gr == 0 || gc == 0 || cfg.canvas_size % gr != 0 || cfg.canvas_size % gc != 0 {
            return Err(Error::Config(format!(
                "canvas {} not divisible by grid {:?}",
                cfg.canvas_size, cfg.grid
            )));
        }
        let projection = orthonormal_columns(cfg.feature_dim, DESCRIPTOR_DIM, cfg.projection_seed);
        Ok(AnalyticTeacher { cfg, projection })
    }

    pub fn patch_px(&self) -> usize {
        self.cfg.canvas_size / self.cfg.grid.0
    }

    /// Raw per-patch descriptors `(B, N, 21)` (already channel-scaled),
    /// spliced into `g` so gradients can flow to `x`.
    pub fn descriptor_graph<F: Real>(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        let shape = g.shape(x).to_vec();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let p = self.patch_px();
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;

        // value channel and objectness
        let value = g.max_axis(x, 1); // (B,1,H,W)
        let shifted = g.add_scalar(value, F::from_f64(-0.30));
        let scaled = g.scale(shifted, F::from_f64(25.0));
        let obj = g.sigmoid(scaled); // (B,1,H,W)

        // mean RGB per patch
        let rgb = g.avg_pool2d(x, p); // (B,3,gh,gw)

        // hue histogram: soft palette assignment on chromaticity, weighted by
        // objectness
        let sums = g.sum_axis(x, 1, true); // (B,1,H,W)
        let sums = g.add_scalar(sums, F::from_f64(1e-6));
        let chroma = g.div(x, sums); // (B,3,H,W)
        let mut pal = Array4::<f32>::zeros((8, 3, 1, 1));
        let mut pal_sq = vec![0f64; 8];
        for k in 0..8 {
            let c = crate::synthdata::palette_color(k, 8);
            let s: f32 = c[0] + c[1] + c[2];
            let e = [c[0] / s, c[1] / s, c[2] / s];
            for ci in 0..3 {
                pal[[k, ci, 0, 0]] = e[ci];
            }
            pal_sq[k] = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]) as f64;
        }
        let pal_node = g.constant(pal.mapv(|v| F::from_f64(v as f64)).into_dyn());
        let qe = g.conv2d(chroma, pal_node, 1, 0, 0); // (B,8,H,W)
        let q2 = g.square(chroma);
        let q2 = g.sum_axis(q2, 1, true); // (B,1,H,W)
        let e2 = {
            let mut a = ArrayD::<F>::zeros(IxDyn(&[1, 8, 1, 1]));
            for k in 0..8 {
                a[[0, k, 0, 0]] = F::from_f64(pal_sq[k]);
            }
            g.constant(a)
        };
        let qe2 = g.scale(qe, F::from_f64(-2.0));
        let d = g.add(qe2, q2); // broadcast (B,8,H,W)
        let d = g.add(d, e2);
        let logits = g.scale(d, F::from_f64(-1.0 / 0.004)); // sharp soft-assign
        let assign = g.softmax(logits, 1); // (B,8,H,W)
        let hue_px = g.mul(assign, obj); // broadcast over channel
        let hue = g.avg_pool2d(hue_px, p); // (B,8,gh,gw)

        // stripe bands on the value channel: DC plus three matched periods
        let dc = g.avg_pool2d(value, p); // (B,1,gh,gw)
        let mut bands = Vec::new();
        for period in [8usize, 4, 2] {
            let mut k = Array4::<f32>::zeros((2, 1, 1, period));
            for t in 0..period {
                let ang = std::f64::consts::TAU * t as f64 / period as f64;
                k[[0, 0, 0, t]] = (ang.cos() * 2.0 / period as f64) as f32;
                k[[1, 0, 0, t]] = (ang.sin() * 2.0 / period as f64) as f32;
            }
            let k_node = g.constant(k.mapv(|v| F::from_f64(v as f64)).into_dyn());
            let resp = g.conv2d(value, k_node, 1, 0, period / 2); // (B,2,H,W+1)
            let resp = g.slice_axis(resp, 3, 0, w);
            let resp = g.square(resp);
            let energy = g.sum_axis(resp, 1, true); // (B,1,H,W)
            bands.push(g.avg_pool2d(energy, p));
        }

        // orientation statistics of the objectness gradient
        let sobel = |vals: [[f64; 3]; 3], g: &mut Graph<F>| {
            let mut k = Array4::<f32>::zeros((1, 1, 3, 3));
            for (dy, row) in vals.iter().enumerate() {
                for (dx, &v) in row.iter().enumerate() {
                    k[[0, 0, dy, dx]] = (v / 8.0) as f32;
                }
            }
            g.constant(k.mapv(|v| F::from_f64(v as f64)).into_dyn())
        };
        let kx = sobel([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], g);
        let ky = sobel([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]], g);
        let gx = g.conv2d(obj, kx, 1, 1, 1);
        let gy = g.conv2d(obj, ky, 1, 1, 1);
        let gx2 = g.square(gx);
        let gy2 = g.square(gy);
        let edge = g.add(gx2, gy2); // (B,1,H,W)
        let u = g.sub(gx2, gy2);
        let gxy = g.mul(gx, gy);
        let v2 = g.scale(gxy, F::from_f64(2.0));
        let denom = g.add_scalar(edge, F::from_f64(1e-3));
        let u2 = g.square(u);
        let v22 = g.square(v2);
        let c4num = g.sub(u2, v22);
        let c4 = g.div(c4num, denom); // ~ |grad|^2 cos(4 theta)
        let uv = g.mul(u, v2);
        let s4num = g.scale(uv, F::from_f64(2.0));
        let s4 = g.div(s4num, denom); // ~ |grad|^2 sin(4 theta)
        let edge_p = g.avg_pool2d(edge, p);
        let c4_p = g.avg_pool2d(c4, p);
        let s4_p = g.avg_pool2d(s4, p);

        // presence and presence-weighted patch center
        let presence = g.avg_pool2d(obj, p);
        let (cx_map, cy_map) = {
            let mut cx = Array4::<f32>::zeros((1, 1, h, w));
            let mut cy = Array4::<f32>::zeros((1, 1, h, w));
            for y in 0..h {
                for x_ in 0..w {
                    cx[[0, 0, y, x_]] = (x_ as f32 + 0.5) / w as f32;
                    cy[[0, 0, y, x_]] = (y as f32 + 0.5) / h as f32;
                }
            }
            (
                g.constant(cx.mapv(|v| F::from_f64(v as f64)).into_dyn()),
                g.constant(cy.mapv(|v| F::from_f64(v as f64)).into_dyn()),
            )
        };
        let wx = g.mul(obj, cx_map);
        let wy = g.mul(obj, cy_map);
        let wx_p = g.avg_pool2d(wx, p);
        let wy_p = g.avg_pool2d(wy, p);

        let parts = [
            rgb, hue, dc, bands[0], bands[1], bands[2], edge_p, c4_p, s4_p, presence, wx_p,
            wy_p,
        ];
        let desc = g.concat(&parts, 1); // (B,21,gh,gw)
        let scales = {
            let mut a = ArrayD::<F>::zeros(IxDyn(&[1, DESCRIPTOR_DIM, 1, 1]));
            for (i, &s) in DESCRIPTOR_SCALES.iter().enumerate() {
                a[[0, i, 0, 0]] = F::from_f64(s);
            }
            g.constant(a)
        };
        let desc = g.mul(desc, scales);
        let desc = g.permute(desc, &[0, 2, 3, 1]); // (B,gh,gw,21)
        g.reshape(desc, &[b, n, DESCRIPTOR_DIM])
    }

    /// Projected features `(B, N, D)` inside an existing graph.
    pub fn features_graph<F: Real>(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        let desc = self.descriptor_graph(g, x);
        let wt = self
            .projection
            .t()
            .mapv(|v| F::from_f64(v))
            .into_dyn();
        let w = g.constant(wt); // (21, D)
        linear(g, desc, w, None)
    }

    /// Plain evaluation path.
    pub fn features(&self, images: &Array4<f32>) -> Result<PatchFeatureMap> {
        self.check_size(images)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone().into_dyn());
        let y = self.features_graph(&mut g, x);
        let features = g
            .value(y)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        Ok(PatchFeatureMap {
            features,
            patch_grid: self.cfg.grid,
            teacher_id: format!("analytic-d{}-s{}", self.cfg.feature_dim, self.cfg.projection_seed),
        })
    }

    /// Raw (scaled) descriptors without projection, for diagnostics/tests.
    pub fn descriptors(&self, images: &Array4<f32>) -> Result<Array3<f32>> {
        self.check_size(images)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone().into_dyn());
        let d = self.descriptor_graph(&mut g, x);
        Ok(g.value(d)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap())
    }

    fn check_size(&self, images: &Array4<f32>) -> Result<()> {
        let s = images.shape();
        if s[2] != self.cfg.canvas_size || s[3] != self.cfg.canvas_size || s[1] != 3 {
            return Err(Error::Config(format!(
                "image batch {:?} does not match teacher canvas {}",
                s, self.cfg.canvas_size
            )));
        }
        Ok(())
    }
}

// ---- learned teacher ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedTeacherConfig {
    pub canvas_size: usize,
    pub patch_px: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for LearnedTeacherConfig {
    fn default() -> Self {
        LearnedTeacherConfig {
            canvas_size: 32,
            patch_px: 4,
            dim: 64,
            depth: 1,
            heads: 4,
            num_classes: 12,
            steps: 1200,
            batch: 64,
            learning_rate: 1e-3,
            seed: 77,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LearnedTeacher {
    pub cfg: LearnedTeacherConfig,
    pub params: ParamStore<f32>,
    /// Held-out accuracy reached at freeze time.
    pub val_accuracy: f64,
}

fn learned_init(cfg: &LearnedTeacherConfig) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    let seed = cfg.seed;
    let pdim = 3 * cfg.patch_px * cfg.patch_px;
    let n = (cfg.canvas_size / cfg.patch_px).pow(2);
    store.insert(
        "embed.w",
        xavier(seed, "teacher.embed.w", &[pdim, cfg.dim], pdim, cfg.dim),
    );
    store.insert("embed.b", crate::nn::zeros(&[cfg.dim]));
    init_pos_embedding(&mut store, "pos", n, cfg.dim, seed);
    let block_cfg = BlockConfig {
        dim: cfg.dim,
        heads: cfg.heads,
        ff_mult: 4,
    };
    for d in 0..cfg.depth {
        init_block(&mut store, &format!("blk{d}."), block_cfg, seed);
    }
    store.insert("final_ln.g", ones(&[cfg.dim]));
    store.insert("final_ln.b", crate::nn::zeros(&[cfg.dim]));
    store.insert(
        "head.w",
        normal_init(seed, "teacher.head.w", &[cfg.dim, cfg.num_classes], 0.02),
    );
    store.insert("head.b", crate::nn::zeros(&[cfg.num_classes]));
    store
}

/// Token features `(B, N, dim)` after the final layer norm.
fn learned_tokens<F: Real>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &LearnedTeacherConfig,
    x: NodeId,
) -> NodeId {
    let tokens = g.patchify(x, cfg.patch_px);
    let t = linear(g, tokens, bound.id("embed.w"), Some(bound.id("embed.b")));
    let t = g.add(t, bound.id("pos"));
    let block_cfg = BlockConfig {
        dim: cfg.dim,
        heads: cfg.heads,
        ff_mult: 4,
    };
    let mut t = t;
    for d in 0..cfg.depth {
        t = block_forward(g, bound, &format!("blk{d}."), t, block_cfg);
    }
    g.layer_norm(t, bound.id("final_ln.g"), bound.id("final_ln.b"), F::from_f64(1e-5))
}

/// Trains the patch-transformer classifier on class labels, then freezes it.
pub fn pretrain_learned_teacher(
    dataset: &Dataset,
    cfg: &LearnedTeacherConfig,
) -> Result<LearnedTeacher> {
    if dataset.config.canvas_size != cfg.canvas_size {
        return Err(Error::Config(format!(
            "dataset canvas {} != teacher canvas {}",
            dataset.config.canvas_size, cfg.canvas_size
        )));
    }
    let n = dataset.len();
    let n_val = (n / 8).clamp(32.min(n / 2), 512);
    let n_train = n - n_val;
    let mut params = learned_init(cfg);
    let mut opt = AdamW::new(
        OptimizerConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            ..Default::default()
        },
        &params,
    );

    for step in 0..cfg.steps {
        let idx = rng::batch_indices(cfg.seed, step as u64, cfg.batch, n_train);
        let mut xb = Array4::<f32>::zeros((
            cfg.batch,
            3,
            cfg.canvas_size,
            cfg.canvas_size,
        ));
        let mut yb = Vec::with_capacity(cfg.batch);
        for (r, &i) in idx.iter().enumerate() {
            xb.index_axis_mut(ndarray::Axis(0), r)
                .assign(&dataset.images.index_axis(ndarray::Axis(0), i));
            yb.push(dataset.labels[i]);
        }
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g);
        let x = g.constant(xb.into_dyn());
        let tokens = learned_tokens(&mut g, &bound, cfg, x);
        let pooled = g.mean_axis(tokens, 1, false); // (B, dim)
        let logits = linear(&mut g, pooled, bound.id("head.w"), Some(bound.id("head.b")));
        let loss = g.cross_entropy(logits, &yb);
        if !g.scalar(loss).is_finite() {
            return Err(Error::TrainingFailure(format!(
                "non-finite loss at step {step}"
            )));
        }
        let grads = g.backward(loss);
        let gvec = bound.collect_grads(&grads, &params);
        opt.update(&mut params, &gvec);
    }

    // held-out accuracy, evaluated frozen
    let teacher = LearnedTeacher {
        cfg: cfg.clone(),
        params,
        val_accuracy: 0.0,
    };
    let mut correct = 0usize;
    let chunk = 64;
    let mut seen = 0usize;
    let mut at = n_train;
    while at < n {
        let to = (at + chunk).min(n);
        let xb = dataset.image_slice(at, to);
        let logits = teacher.classify(&xb)?;
        for (r, i) in (at..to).enumerate() {
            let row = logits.row(r);
            let mut best = 0usize;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            if best == dataset.labels[i] {
                correct += 1;
            }
            seen += 1;
        }
        at = to;
    }
    let acc = correct as f64 / seen as f64;
    let chance = 1.0 / cfg.num_classes as f64;
    if acc < 2.0 * chance {
        return Err(Error::TrainingFailure(format!(
            "learned teacher failed to converge: held-out accuracy {acc:.4} < {:.4}",
            2.0 * chance
        )));
    }
    Ok(LearnedTeacher {
        val_accuracy: acc,
        ..teacher
    })
}

impl LearnedTeacher {
    pub fn grid(&self) -> (usize, usize) {
        let side = self.cfg.canvas_size / self.cfg.patch_px;
        (side, side)
    }

    /// Frozen token features inside an existing graph.
    pub fn features_graph<F: Real>(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        let params = self.params.cast::<F>();
        let bound = params.bind_frozen(g);
        learned_tokens(g, &bound, &self.cfg, x)
    }

    pub fn features(&self, images: &Array4<f32>) -> Result<PatchFeatureMap> {
        self.check_size(images)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone().into_dyn());
        let y = self.features_graph(&mut g, x);
        Ok(PatchFeatureMap {
            features: g
                .value(y)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap(),
            patch_grid: self.grid(),
            teacher_id: format!("learned-d{}-s{}", self.cfg.dim, self.cfg.seed),
        })
    }

    /// Classifier logits (used during pretraining evaluation).
    pub fn classify(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        self.check_size(images)?;
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(images.clone().into_dyn());
        let tokens = learned_tokens(&mut g, &bound, &self.cfg, x);
        let pooled = g.mean_axis(tokens, 1, false);
        let logits = linear(&mut g, pooled, bound.id("head.w"), Some(bound.id("head.b")));
        Ok(g.value(logits)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }

    fn check_size(&self, images: &Array4<f32>) -> Result<()> {
        let s = images.shape();
        if s[2] != self.cfg.canvas_size || s[3] != self.cfg.canvas_size {
            return Err(Error::Config(format!(
                "image batch {:?} does not match teacher canvas {}",
                s, self.cfg.canvas_size
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "learned",
            "feature_dim": self.cfg.dim,
            "grid": self.grid(),
            "config": self.cfg,
            "val_accuracy": self.val_accuracy,
        });
        crate::checkpoint::save(dir, &self.params, None, self.cfg.steps as u64, self.cfg.seed, meta)
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<LearnedTeacher> {
        let (params, manifest) = crate::checkpoint::load(dir)?;
        let cfg: LearnedTeacherConfig = serde_json::from_value(
            manifest
                .meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Data("missing teacher config in manifest".into()))?,
        )?;
        let val_accuracy = manifest
            .meta
            .get("val_accuracy")
            .and_then(|v| v.as_f64())
            .unwrap_or(0.0);
        Ok(LearnedTeacher {
            cfg,
            params,
            val_accuracy,
        })
    }
}

// ---- unified handle ----

/// A frozen teacher of either kind.
#[derive(Clone, Debug)]
pub enum TeacherHandle {
    Analytic(AnalyticTeacher),
    Learned(Box<LearnedTeacher>),
}

impl TeacherHandle {
    pub fn analytic(cfg: AnalyticTeacherConfig) -> Result<TeacherHandle> {
        Ok(TeacherHandle::Analytic(AnalyticTeacher::new(cfg)?))
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            TeacherHandle::Analytic(t) => t.cfg.feature_dim,
            TeacherHandle::Learned(t) => t.cfg.dim,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        match self {
            TeacherHandle::Analytic(t) => t.cfg.grid,
            TeacherHandle::Learned(t) => t.grid(),
        }
    }

    pub fn canvas_size(&self) -> usize {
        match self {
            TeacherHandle::Analytic(t) => t.cfg.canvas_size,
            TeacherHandle::Learned(t) => t.cfg.canvas_size,
        }
    }

    pub fn id(&self) -> String {
        match self {
            TeacherHandle::Analytic(t) => {
                format!("analytic-d{}-s{}", t.cfg.feature_dim, t.cfg.projection_seed)
            }
            TeacherHandle::Learned(t) => format!("learned-d{}-s{}", t.cfg.dim, t.cfg.seed),
        }
    }

    /// Checksum over everything that defines the frozen forward pass.
    pub fn checksum(&self) -> String {
        match self {
            TeacherHandle::Analytic(t) => {
                use sha2::{Digest, Sha256};
                let mut h = Sha256::new();
                for v in t.projection.iter() {
                    h.update(v.to_le_bytes());
                }
                crate::nn::hex(&h.finalize())
            }
            TeacherHandle::Learned(t) => t.params.checksum(),
        }
    }

    /// Dispatching forward pass; a pure function of (handle, images).
    pub fn forward(&self, images: &Array4<f32>) -> Result<PatchFeatureMap> {
        match self {
            TeacherHandle::Analytic(t) => t.features(images),
            TeacherHandle::Learned(t) => t.features(images),
        }
    }

    /// Frozen forward spliced into a caller's graph (differentiable w.r.t.
    /// the image node only).
    pub fn forward_graph<F: Real>(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        match self {
            TeacherHandle::Analytic(t) => t.features_graph(g, x),
            TeacherHandle::Learned(t) => t.features_graph(g, x),
        }
    }
}
