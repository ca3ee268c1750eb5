//! Per-variant evaluation: probes on flattened encoder latents, latent-space
//! diagnostics, reconstruction metrics and generation scoring.

use super::ExperimentConfig;
use crate::error::Result;
use crate::flow::{sample, FlowState};
use crate::metrics::{
    evaluate_probe, fit_linear_probe, gmm_em, kde_gini, pixel_metrics, proxy_fid, ProbeLabels,
};
use crate::report::{GmmEntry, MetricReport, MetricValue, Provenance, REPORT_SCHEMA_VERSION};
use crate::synthdata::dataset::Dataset;
use crate::teacher::TeacherHandle;
use crate::vae::{reconstruction_losses, Vae};
use ndarray::{Array2, Array4, Axis};

pub struct ProvenanceHashes {
    pub dataset: String,
    pub vae: String,
    pub flow: String,
}

/// Flattened encoder means for a dataset slice, `(B, d*h*w)` in f64.
pub fn flattened_latents(vae: &Vae, ds: &Dataset, range: (usize, usize)) -> Result<Array2<f64>> {
    let (from, to) = range;
    let n = to - from;
    let dim = vae.cfg.latent_dim();
    let mut out = Array2::<f64>::zeros((n, dim));
    let chunk = 128;
    let mut at = from;
    while at < to {
        let hi = (at + chunk).min(to);
        let enc = vae.encode(&ds.image_slice(at, hi))?;
        for (r, i) in (at..hi).enumerate() {
            let flat: Vec<f64> = enc
                .mu
                .index_axis(Axis(0), r)
                .iter()
                .map(|&v| v as f64)
                .collect();
            for (j, v) in flat.into_iter().enumerate() {
                out[[i - from, j]] = v;
            }
        }
        at = hi;
    }
    Ok(out)
}

fn decode_chunked(vae: &Vae, latents: &Array4<f32>) -> Result<Array4<f32>> {
    let n = latents.shape()[0];
    let canvas = vae.cfg.canvas_size;
    let mut out = Array4::<f32>::zeros((n, 3, canvas, canvas));
    let chunk = 128;
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let part = vae.decode(&latents.slice(ndarray::s![at..hi, .., .., ..]).to_owned())?;
        out.slice_mut(ndarray::s![at..hi, .., .., ..]).assign(&part);
        at = hi;
    }
    Ok(out)
}

fn reconstruct_chunked(vae: &Vae, images: &Array4<f32>) -> Result<Array4<f32>> {
    let n = images.shape()[0];
    let canvas = vae.cfg.canvas_size;
    let mut out = Array4::<f32>::zeros((n, 3, canvas, canvas));
    let chunk = 128;
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let block = images.slice(ndarray::s![at..hi, .., .., ..]).to_owned();
        let enc = vae.encode(&block)?;
        let dec = vae.decode(&enc.mu)?;
        out.slice_mut(ndarray::s![at..hi, .., .., ..]).assign(&dec);
        at = hi;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_variant(
    cfg: &ExperimentConfig,
    variant: &str,
    ds: &Dataset,
    teacher: &TeacherHandle,
    vae_ckpt: &std::path::Path,
    flow_ckpt: &std::path::Path,
    hashes: ProvenanceHashes,
) -> Result<MetricReport> {
    let trained = crate::align::TrainedVae::load(vae_ckpt)?;
    let vae = trained.vae();
    let flow = FlowState::load(flow_ckpt)?;
    let splits = &cfg.dataset.splits;

    // ---- probes on flattened latents ----
    let train_lat = flattened_latents(&vae, ds, splits.probe_train_range())?;
    let val_lat = flattened_latents(&vae, ds, splits.probe_val_range())?;
    let (tr_from, tr_to) = splits.probe_train_range();
    let (va_from, va_to) = splits.probe_val_range();
    let train_attrs = ds.attrs.slice(ndarray::s![tr_from..tr_to, ..]).to_owned();
    let val_attrs = ds.attrs.slice(ndarray::s![va_from..va_to, ..]).to_owned();
    let train_classes: Vec<usize> = ds.labels[tr_from..tr_to].to_vec();
    let val_classes: Vec<usize> = ds.labels[va_from..va_to].to_vec();

    let (probe_f1, probe_top5, excluded) = match fit_linear_probe(
        &train_lat,
        ProbeLabels::Attributes(&train_attrs),
        &cfg.eval.probe,
    ) {
        Ok(model) => {
            let ev = evaluate_probe(&model, &val_lat, ProbeLabels::Attributes(&val_attrs))?;
            (
                ev.macro_f1
                    .map(MetricValue::ok)
                    .unwrap_or_else(|| MetricValue::missing("no attribute F1 computed")),
                ev.top5_recall
                    .map(MetricValue::ok)
                    .unwrap_or_else(|| MetricValue::missing("no recall computed")),
                ev.excluded_attributes,
            )
        }
        Err(e) => (
            MetricValue::missing(e.to_string()),
            MetricValue::missing(e.to_string()),
            Vec::new(),
        ),
    };

    let class_accuracy = match fit_linear_probe(
        &train_lat,
        ProbeLabels::Classes(&train_classes),
        &cfg.eval.probe,
    ) {
        Ok(model) => {
            let ev = evaluate_probe(&model, &val_lat, ProbeLabels::Classes(&val_classes))?;
            ev.accuracy
                .map(MetricValue::ok)
                .unwrap_or_else(|| MetricValue::missing("no accuracy computed"))
        }
        Err(e) => MetricValue::missing(e.to_string()),
    };

    // ---- latent-space diagnostics ----
    let gini = match kde_gini(&val_lat, &cfg.eval.kde) {
        Ok(v) => MetricValue::ok(v),
        Err(e) => MetricValue::missing(e.to_string()),
    };
    let mut gmm_entries = Vec::new();
    for &k in &cfg.eval.gmm_ks {
        let entry = match gmm_em(&train_lat, k, cfg.eval.gmm_iterations, &val_lat, cfg.eval.seed) {
            Ok(fit) => MetricValue::ok(fit.heldout_nll),
            Err(e) => MetricValue::missing(e.to_string()),
        };
        gmm_entries.push(GmmEntry {
            k,
            heldout_nll: entry,
        });
    }

    // ---- reconstruction ----
    let (fid_from, fid_to) = splits.fid_real_range();
    let real = ds.image_slice(fid_from, fid_to);
    let recon = reconstruct_chunked(&vae, &real)?;
    let (psnr, ssim) = pixel_metrics(&real, &recon);
    let (_, perceptual) = reconstruction_losses(&real, &recon, teacher)?;
    let proxy_rfid = match proxy_fid(&recon, &real, teacher) {
        Ok(v) => MetricValue::ok(v),
        Err(e) => MetricValue::missing(e.to_string()),
    };

    // ---- generation ----
    let n_samples = cfg.eval.sample_count;
    let labels: Vec<usize> = (0..n_samples)
        .map(|i| i % cfg.flow.num_classes)
        .collect();
    let latents = sample(
        &flow,
        (
            vae.cfg.latent_channels,
            vae.cfg.latent_side(),
            vae.cfg.latent_side(),
        ),
        &labels,
        cfg.flow.null_class(),
        cfg.eval.sample_steps,
        cfg.eval.sample_mode,
        cfg.eval.cfg_scale,
        cfg.flow.sigma_g,
        cfg.eval.seed,
    )?;
    let generated = decode_chunked(&vae, &latents)?;
    let proxy_gfid = match proxy_fid(&generated, &real, teacher) {
        Ok(v) => MetricValue::ok(v),
        Err(e) => MetricValue::missing(e.to_string()),
    };

    let mut seeds = std::collections::BTreeMap::new();
    seeds.insert("dataset".into(), cfg.dataset.seed);
    seeds.insert("pretrain".into(), cfg.pretrain.seed);
    seeds.insert("align".into(), cfg.align.seed);
    seeds.insert("flow".into(), cfg.flow.seed);
    seeds.insert("eval".into(), cfg.eval.seed);

    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        variant: variant.to_string(),
        notes: MetricReport::standard_notes(),
        probe_f1,
        probe_top5_recall: probe_top5,
        class_accuracy,
        gini,
        gmm_heldout_nll: gmm_entries,
        proxy_rfid,
        proxy_gfid,
        psnr: MetricValue::ok(psnr),
        ssim: MetricValue::ok(ssim),
        perceptual: MetricValue::ok(perceptual),
        excluded_attributes: excluded,
        pearson: Vec::new(),
        provenance: Provenance {
            dataset_hash: hashes.dataset,
            teacher_checksum: teacher.checksum(),
            vae_checkpoint_hash: hashes.vae,
            flow_checkpoint_hash: hashes.flow,
            seeds,
        },
    })
}
