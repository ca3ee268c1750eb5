//! Latent-space evaluation: linear probes, density uniformity (KDE Gini),
//! mixture discrimination (diagonal GMM), Frechet distances over teacher
//! embeddings, pixel metrics, and correlation.

pub mod linalg;

use crate::error::{Error, Result};
use crate::rng;
use crate::teacher::TeacherHandle;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------- probes --

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeTask {
    AttributeMultilabel,
    ClassMulticlass,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-4,
            max_iters: 5000,
            grad_tol: 1e-5,
            seed: 0,
        }
    }
}

/// Labels for probe fitting.
pub enum ProbeLabels<'a> {
    /// `(B, A)` binary matrix.
    Attributes(&'a Array2<u8>),
    /// One class id per row.
    Classes(&'a [usize]),
}

/// A purely linear decision head over standardized inputs.
#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub task: ProbeTask,
    /// `(outputs, D+1)`; last column is the bias.
    pub weights: Array2<f64>,
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    /// Multilabel only: outputs dropped because their training column was
    /// constant (all 0 or all 1).
    pub excluded: Vec<usize>,
}

fn standardize_fit(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(x.ncols());
    for row in x.outer_iter() {
        for (j, &v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let std = var.mapv(|v| (v / n).sqrt().max(1e-8));
    (mean, std)
}

fn standardized(x: &Array2<f64>, mean: &Array1<f64>, std: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[j]) / std[j];
        }
    }
    out
}

fn with_bias(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::<f64>::ones((n, d + 1));
    out.slice_mut(ndarray::s![.., 0..d]).assign(x);
    out
}

/// Largest eigenvalue of `X^T X` by power iteration (deterministic).
fn spectral_sq(x: &Array2<f64>) -> f64 {
    let g = x.t().dot(x);
    let d = g.nrows();
    let mut v = Array1::<f64>::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = g.dot(&v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        lambda = norm;
        v = w / norm;
    }
    lambda
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Fits a linear probe by full-batch gradient descent with L2 weight decay
/// (step size `1/L` from the logistic Lipschitz bound). Deterministic.
pub fn fit_linear_probe(
    latents: &Array2<f64>,
    labels: ProbeLabels<'_>,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    let (n, d) = latents.dim();
    let (task, targets, excluded) = match labels {
        ProbeLabels::Attributes(a) => {
            if a.nrows() != n {
                return Err(Error::Config("latents/labels row mismatch".into()));
            }
            let n_attr = a.ncols();
            if n < 10 * n_attr {
                return Err(Error::SampleSize(format!(
                    "need >= {} rows for {} attributes, got {n}",
                    10 * n_attr,
                    n_attr
                )));
            }
            let mut excluded = Vec::new();
            for j in 0..n_attr {
                let pos: usize = a.column(j).iter().map(|&b| b as usize).sum();
                if pos == 0 || pos == n {
                    excluded.push(j);
                }
            }
            let mut t = Array2::<f64>::zeros((n, n_attr));
            for i in 0..n {
                for j in 0..n_attr {
                    t[[i, j]] = a[[i, j]] as f64;
                }
            }
            (ProbeTask::AttributeMultilabel, t, excluded)
        }
        ProbeLabels::Classes(c) => {
            if c.len() != n {
                return Err(Error::Config("latents/labels row mismatch".into()));
            }
            let k = c.iter().copied().max().unwrap_or(0) + 1;
            if n < 10 * k {
                return Err(Error::SampleSize(format!(
                    "need >= {} rows for {k} classes, got {n}",
                    10 * k
                )));
            }
            let mut t = Array2::<f64>::zeros((n, k));
            for (i, &ci) in c.iter().enumerate() {
                t[[i, ci]] = 1.0;
            }
            (ProbeTask::ClassMulticlass, t, Vec::new())
        }
    };

    let (mean, std) = standardize_fit(latents);
    let xs = with_bias(&standardized(latents, &mean, &std));
    let outputs = targets.ncols();
    let mut w = Array2::<f64>::zeros((outputs, d + 1));

    // Lipschitz constant of the (averaged) logistic/softmax gradient
    let lips = spectral_sq(&xs) / (4.0 * n as f64) + config.l2;
    let lr = 1.0 / lips;

    for _iter in 0..config.max_iters {
        // scores (n, outputs)
        let scores = xs.dot(&w.t());
        let probs = match task {
            ProbeTask::AttributeMultilabel => scores.mapv(sigmoid),
            ProbeTask::ClassMulticlass => {
                let mut p = scores.clone();
                for mut row in p.outer_iter_mut() {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        s += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
                p
            }
        };
        let resid = &probs - &targets;
        let mut grad = resid.t().dot(&xs) / n as f64;
        grad = grad + &(w.mapv(|v| v * config.l2));
        // excluded outputs do not train
        for &j in &excluded {
            grad.row_mut(j).fill(0.0);
        }
        let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < config.grad_tol {
            break;
        }
        w = w - &(grad.mapv(|v| v * lr));
    }

    Ok(ProbeModel {
        task,
        weights: w,
        mean,
        std,
        excluded,
    })
}

impl ProbeModel {
    /// Raw decision scores (pre-sigmoid / pre-softmax).
    pub fn scores(&self, latents: &Array2<f64>) -> Array2<f64> {
        let xs = with_bias(&standardized(latents, &self.mean, &self.std));
        xs.dot(&self.weights.t())
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        crate::svtf::write(
            dir.join("weights.svtf"),
            &crate::svtf::Tensor::F64(self.weights.clone().into_dyn()),
        )?;
        crate::svtf::write(
            dir.join("mean.svtf"),
            &crate::svtf::Tensor::F64(self.mean.clone().into_dyn()),
        )?;
        crate::svtf::write(
            dir.join("std.svtf"),
            &crate::svtf::Tensor::F64(self.std.clone().into_dyn()),
        )?;
        let meta = serde_json::json!({
            "task": self.task,
            "excluded": self.excluded,
        });
        std::fs::write(dir.join("probe.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<ProbeModel> {
        let dir = dir.as_ref();
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("probe.json"))?)?;
        Ok(ProbeModel {
            task: serde_json::from_value(meta["task"].clone())?,
            weights: crate::svtf::read(dir.join("weights.svtf"))?
                .as_f64()?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Data(format!("weights not 2-d: {e}")))?,
            mean: crate::svtf::read(dir.join("mean.svtf"))?
                .as_f64()?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Data(format!("mean not 1-d: {e}")))?,
            std: crate::svtf::read(dir.join("std.svtf"))?
                .as_f64()?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Data(format!("std not 1-d: {e}")))?,
            excluded: serde_json::from_value(meta["excluded"].clone())?,
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ProbeEvaluation {
    pub macro_f1: Option<f64>,
    pub top5_recall: Option<f64>,
    pub accuracy: Option<f64>,
    /// Images skipped in the top-5 denominator for lacking positives.
    pub skipped_images: usize,
    pub excluded_attributes: Vec<usize>,
}

/// Held-out evaluation: macro F1 at threshold 0.5 and recall@5 for the
/// multilabel task, accuracy for the multiclass task.
pub fn evaluate_probe(
    model: &ProbeModel,
    latents: &Array2<f64>,
    labels: ProbeLabels<'_>,
) -> Result<ProbeEvaluation> {
    let scores = model.scores(latents);
    match (model.task, labels) {
        (ProbeTask::AttributeMultilabel, ProbeLabels::Attributes(y)) => {
            let (n, a) = y.dim();
            let included: Vec<usize> =
                (0..a).filter(|j| !model.excluded.contains(j)).collect();
            // per-attribute F1 at p = 0.5, i.e. score >= 0
            let mut f1s = Vec::with_capacity(included.len());
            for &j in &included {
                let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
                for i in 0..n {
                    let pred = scores[[i, j]] >= 0.0;
                    let truth = y[[i, j]] != 0;
                    match (pred, truth) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                        _ => {}
                    }
                }
                let denom = 2 * tp + fp + fneg;
                f1s.push(if denom == 0 {
                    1.0 // attribute absent and never predicted
                } else {
                    2.0 * tp as f64 / denom as f64
                });
            }
            let macro_f1 = f1s.iter().sum::<f64>() / f1s.len().max(1) as f64;

            // recall@5 over included attributes
            let mut recall_sum = 0.0f64;
            let mut counted = 0usize;
            let mut skipped = 0usize;
            for i in 0..n {
                let truths: Vec<usize> = included
                    .iter()
                    .copied()
                    .filter(|&j| y[[i, j]] != 0)
                    .collect();
                if truths.is_empty() {
                    skipped += 1;
                    continue;
                }
                let mut ranked: Vec<usize> = included.clone();
                ranked.sort_by(|&p, &q| {
                    scores[[i, q]]
                        .partial_cmp(&scores[[i, p]])
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                let top5: Vec<usize> = ranked.into_iter().take(5).collect();
                let hits = truths.iter().filter(|t| top5.contains(t)).count();
                recall_sum += hits as f64 / truths.len() as f64;
                counted += 1;
            }
            Ok(ProbeEvaluation {
                macro_f1: Some(macro_f1),
                top5_recall: Some(recall_sum / counted.max(1) as f64),
                accuracy: None,
                skipped_images: skipped,
                excluded_attributes: model.excluded.clone(),
            })
        }
        (ProbeTask::ClassMulticlass, ProbeLabels::Classes(c)) => {
            let n = c.len();
            let mut correct = 0usize;
            for (i, &ci) in c.iter().enumerate() {
                let row = scores.row(i);
                let mut best = 0usize;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                if best == ci {
                    correct += 1;
                }
            }
            Ok(ProbeEvaluation {
                macro_f1: None,
                top5_recall: None,
                accuracy: Some(correct as f64 / n as f64),
                skipped_images: 0,
                excluded_attributes: Vec::new(),
            })
        }
        _ => Err(Error::Config("probe task and label kind disagree".into())),
    }
}

// ---------------------------------------------------------------- gini ----

/// Gini coefficient of a non-negative value vector:
/// `sum_ij |d_i - d_j| / (2 n^2 mean)`.
pub fn gini_of_values(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::DegenerateInput("empty value vector".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "mean density {mean} is not positive"
        )));
    }
    let mut acc = 0.0f64;
    for &a in values {
        for &b in values {
            acc += (a - b).abs();
        }
    }
    Ok(acc / (2.0 * n * n * mean))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KdeGiniConfig {
    /// Dimensionality of the PCA projection applied first.
    pub pca_dims: usize,
    pub subsample_cap: usize,
    pub seed: u64,
}

impl Default for KdeGiniConfig {
    fn default() -> Self {
        KdeGiniConfig {
            pca_dims: 8,
            subsample_cap: 1024,
            seed: 0,
        }
    }
}

/// Gini coefficient of Gaussian-KDE density values at the sample points
/// (Scott bandwidth, per-dimension), after PCA reduction.
pub fn kde_gini(vectors: &Array2<f64>, config: &KdeGiniConfig) -> Result<f64> {
    let n0 = vectors.nrows();
    if n0 < 64 {
        return Err(Error::SampleSize(format!(
            "kde_gini needs >= 64 vectors, got {n0}"
        )));
    }
    let rows = if n0 > config.subsample_cap {
        let mut idx: Vec<usize> = (0..n0).collect();
        idx.shuffle(&mut rng::stream(config.seed, "kde-sub", 0));
        idx.truncate(config.subsample_cap);
        idx.sort_unstable();
        let mut out = Array2::<f64>::zeros((idx.len(), vectors.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&vectors.row(i));
        }
        out
    } else {
        vectors.clone()
    };

    let proj = linalg::pca_project(&rows, config.pca_dims);
    let (n, d) = proj.dim();

    // Scott's rule per dimension
    let mut bw = vec![0.0f64; d];
    for j in 0..d {
        let col = proj.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        bw[j] = var.sqrt() * (n as f64).powf(-1.0 / (d as f64 + 4.0));
        if !(bw[j].is_finite() && bw[j] > 0.0) {
            return Err(Error::DegenerateInput(format!(
                "zero bandwidth along dimension {j} (identical points?)"
            )));
        }
    }
    let norm: f64 = bw
        .iter()
        .map(|h| 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h))
        .product();

    let mut density = vec![0.0f64; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            let mut e = 0.0;
            for k in 0..d {
                let z = (proj[[i, k]] - proj[[j, k]]) / bw[k];
                e += z * z;
            }
            acc += (-0.5 * e).exp();
        }
        density[i] = acc * norm / n as f64;
    }
    gini_of_values(&density)
}

// ---------------------------------------------------------------- gmm -----

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub means: Array2<f64>,
    /// Diagonal covariances, one row per component.
    pub vars: Array2<f64>,
    pub weights: Vec<f64>,
    /// Training log-likelihood after each iteration.
    pub loglik_trace: Vec<f64>,
    pub heldout_nll: f64,
    /// `(iteration, component)` pairs where an empty component was reseeded.
    pub reseeds: Vec<(usize, usize)>,
}

const GMM_VAR_FLOOR: f64 = 1e-6;

fn log_gauss_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let d = x[i] - mean[i];
        acc += -0.5 * (d * d / var[i] + var[i].ln() + (2.0 * std::f64::consts::PI).ln());
    }
    acc
}

/// Diagonal-covariance EM with seeded kmeans++-style initialization.
pub fn gmm_em(
    points: &Array2<f64>,
    k: usize,
    iterations: usize,
    heldout: &Array2<f64>,
    seed: u64,
) -> Result<GmmFit> {
    let (n, d) = points.dim();
    if k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if n < 10 * k {
        return Err(Error::SampleSize(format!(
            "gmm needs >= {} points for k = {k}, got {n}",
            10 * k
        )));
    }
    let mut r = rng::stream(seed, "gmm-init", 0);

    // kmeans++ seeding
    let mut centers: Vec<usize> = vec![r.gen_range(0..n)];
    let mut dist2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = *centers.last().unwrap();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                let diff = points[[i, j]] - points[[last, j]];
                acc += diff * diff;
            }
            dist2[i] = dist2[i].min(acc);
        }
        let total: f64 = dist2.iter().sum();
        if total <= 0.0 {
            centers.push(r.gen_range(0..n));
            continue;
        }
        let mut target = r.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in dist2.iter().enumerate() {
            if target <= w {
                pick = i;
                break;
            }
            target -= w;
        }
        centers.push(pick);
    }

    let mut means = Array2::<f64>::zeros((k, d));
    for (c, &i) in centers.iter().enumerate() {
        means.row_mut(c).assign(&points.row(i));
    }
    let global_mean = points.sum_axis(Axis(0)) / n as f64;
    let mut gvar = Array1::<f64>::zeros(d);
    for row in points.outer_iter() {
        for j in 0..d {
            let diff = row[j] - global_mean[j];
            gvar[j] += diff * diff;
        }
    }
    gvar.mapv_inplace(|v| (v / n as f64).max(GMM_VAR_FLOOR));
    let mut vars = Array2::<f64>::zeros((k, d));
    for c in 0..k {
        vars.row_mut(c).assign(&gvar);
    }
    let mut weights = vec![1.0 / k as f64; k];

    let mut trace = Vec::with_capacity(iterations);
    let mut reseeds = Vec::new();
    let mut resp = Array2::<f64>::zeros((n, k));

    for iter in 0..iterations {
        // E step with log-sum-exp; accumulate data log-likelihood
        let mut loglik = 0.0f64;
        let mut point_ll = vec![0.0f64; n];
        for i in 0..n {
            let x: Vec<f64> = points.row(i).to_vec();
            let mut logs = vec![0.0f64; k];
            for c in 0..k {
                logs[c] = weights[c].max(1e-300).ln()
                    + log_gauss_diag(
                        &x,
                        means.row(c).as_slice().unwrap(),
                        vars.row(c).as_slice().unwrap(),
                    );
            }
            let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for l in &logs {
                s += (l - mx).exp();
            }
            let lse = mx + s.ln();
            loglik += lse;
            point_ll[i] = lse;
            for c in 0..k {
                resp[[i, c]] = (logs[c] - lse).exp();
            }
        }
        trace.push(loglik);

        // M step
        for c in 0..k {
            let nc: f64 = (0..n).map(|i| resp[[i, c]]).sum();
            if nc < 1e-8 {
                // reseed at the worst-fit point
                let mut worst = 0usize;
                for i in 1..n {
                    if point_ll[i] < point_ll[worst] {
                        worst = i;
                    }
                }
                means.row_mut(c).assign(&points.row(worst));
                vars.row_mut(c).assign(&gvar);
                weights[c] = 1.0 / n as f64;
                reseeds.push((iter, c));
                continue;
            }
            weights[c] = nc / n as f64;
            for j in 0..d {
                let mu: f64 = (0..n).map(|i| resp[[i, c]] * points[[i, j]]).sum::<f64>() / nc;
                means[[c, j]] = mu;
            }
            for j in 0..d {
                let var: f64 = (0..n)
                    .map(|i| {
                        let diff = points[[i, j]] - means[[c, j]];
                        resp[[i, c]] * diff * diff
                    })
                    .sum::<f64>()
                    / nc;
                vars[[c, j]] = var.max(GMM_VAR_FLOOR);
            }
        }
        let wsum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= wsum;
        }
    }

    // held-out mean negative log-likelihood
    let mut nll = 0.0f64;
    for row in heldout.outer_iter() {
        let x: Vec<f64> = row.to_vec();
        let mut logs = vec![0.0f64; k];
        for c in 0..k {
            logs[c] = weights[c].max(1e-300).ln()
                + log_gauss_diag(
                    &x,
                    means.row(c).as_slice().unwrap(),
                    vars.row(c).as_slice().unwrap(),
                );
        }
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for l in &logs {
            s += (l - mx).exp();
        }
        nll -= mx + s.ln();
    }
    let heldout_nll = nll / heldout.nrows().max(1) as f64;

    Ok(GmmFit {
        means,
        vars,
        weights,
        loglik_trace: trace,
        heldout_nll,
        reseeds,
    })
}

// ---------------------------------------------------------------- frechet -

/// Frechet distance between Gaussians:
/// `||mu1-mu2||^2 + tr(c1 + c2 - 2 (c1 c2)^{1/2})`, with the matrix square
/// root evaluated through the symmetrized product
/// `c1^{1/2} c2 c1^{1/2}`. Eigenvalues in `[-1e-8, 0)` clamp to zero; below
/// that the covariance is rejected.
pub fn frechet_distance(
    mu1: &Array1<f64>,
    cov1: &Array2<f64>,
    mu2: &Array1<f64>,
    cov2: &Array2<f64>,
) -> Result<f64> {
    let sym = |c: &Array2<f64>| (c + &c.t()) * 0.5;
    let c1 = sym(cov1);
    let c2 = sym(cov2);

    let s1 = linalg::sqrtm_psd(&c1, 1e-8)
        .map_err(|l| Error::Numeric(format!("covariance eigenvalue {l} < -1e-8")))?;
    let inner = s1.dot(&c2).dot(&s1);
    let inner = sym(&inner);
    let (vals, _) = linalg::eigh(&inner);
    let mut tr_sqrt = 0.0f64;
    for &l in vals.iter() {
        if l < -1e-8 {
            return Err(Error::Numeric(format!(
                "product eigenvalue {l} < -1e-8 (invalid covariance)"
            )));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let mut mean_term = 0.0f64;
    for (a, b) in mu1.iter().zip(mu2.iter()) {
        mean_term += (a - b) * (a - b);
    }
    let tr1: f64 = (0..c1.nrows()).map(|i| c1[[i, i]]).sum();
    let tr2: f64 = (0..c2.nrows()).map(|i| c2[[i, i]]).sum();
    Ok(mean_term + tr1 + tr2 - 2.0 * tr_sqrt)
}

/// Mean and (unbiased) covariance of rows.
pub fn gaussian_fit(rows: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = rows.dim();
    let mean = rows.sum_axis(Axis(0)) / n as f64;
    let centered = rows - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0).max(1.0);
    (mean, Array2::from_shape_vec((d, d), cov.iter().copied().collect()).unwrap())
}

/// Mean-pooled teacher embedding of every image, `(B, D)` in f64.
pub fn teacher_embeddings(teacher: &TeacherHandle, images: &Array4<f32>) -> Result<Array2<f64>> {
    let n = images.shape()[0];
    let d = teacher.feature_dim();
    let mut out = Array2::<f64>::zeros((n, d));
    let chunk = 128;
    let mut at = 0;
    while at < n {
        let to = (at + chunk).min(n);
        let feats = teacher.forward(&images.slice(ndarray::s![at..to, .., .., ..]).to_owned())?;
        for (r, img) in feats.features.outer_iter().enumerate() {
            let pooled = img.sum_axis(Axis(0)) / img.shape()[0] as f32;
            for (j, &v) in pooled.iter().enumerate() {
                out[[at + r, j]] = v as f64;
            }
        }
        at = to;
    }
    Ok(out)
}

pub const PROXY_FID_MIN_SAMPLES: usize = 256;

/// Frechet distance between Gaussian fits of mean-pooled teacher embeddings
/// of two image sets (used for both reconstruction- and generation-side
/// scores; a desk-scale stand-in for inception-feature FID).
pub fn proxy_fid(
    samples_a: &Array4<f32>,
    samples_b: &Array4<f32>,
    teacher: &TeacherHandle,
) -> Result<f64> {
    let (na, nb) = (samples_a.shape()[0], samples_b.shape()[0]);
    if na < PROXY_FID_MIN_SAMPLES || nb < PROXY_FID_MIN_SAMPLES {
        return Err(Error::SampleSize(format!(
            "proxy_fid needs >= {PROXY_FID_MIN_SAMPLES} images per side, got {na} and {nb}"
        )));
    }
    let ea = teacher_embeddings(teacher, samples_a)?;
    let eb = teacher_embeddings(teacher, samples_b)?;
    let (mu_a, cov_a) = gaussian_fit(&ea);
    let (mu_b, cov_b) = gaussian_fit(&eb);
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

// ---------------------------------------------------------------- pixels --

/// PSNR (peak 1.0, capped at 100 dB) and tiled SSIM with 8x8 uniform
/// windows, `C1 = 0.01^2`, `C2 = 0.03^2`.
pub fn pixel_metrics(x: &Array4<f32>, xhat: &Array4<f32>) -> (f64, f64) {
    assert_eq!(x.shape(), xhat.shape(), "pixel_metrics shape mismatch");
    let mut mse = 0.0f64;
    ndarray::Zip::from(x).and(xhat).for_each(|&a, &b| {
        let d = (a - b) as f64;
        mse += d * d;
    });
    mse /= x.len() as f64;
    let psnr = if mse < 1e-10 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    };

    let (b, c, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let win = 8usize.min(h).min(w);
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            for ty in 0..h / win {
                for tx in 0..w / win {
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    let area = (win * win) as f64;
                    for dy in 0..win {
                        for dx in 0..win {
                            let a = x[[bi, ci, ty * win + dy, tx * win + dx]] as f64;
                            let bb = xhat[[bi, ci, ty * win + dy, tx * win + dx]] as f64;
                            sx += a;
                            sy += bb;
                            sxx += a * a;
                            syy += bb * bb;
                            sxy += a * bb;
                        }
                    }
                    let mx = sx / area;
                    let my = sy / area;
                    let vx = sxx / area - mx * mx;
                    let vy = syy / area - my * my;
                    let cxy = sxy / area - mx * my;
                    let ssim = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    acc += ssim;
                    count += 1;
                }
            }
        }
    }
    (psnr, acc / count.max(1) as f64)
}

// ---------------------------------------------------------------- pearson -

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Config("series length mismatch".into()));
    }
    if x.len() < 3 {
        return Err(Error::SampleSize(format!(
            "pearson needs >= 3 points, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a series is constant; correlation undefined".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
