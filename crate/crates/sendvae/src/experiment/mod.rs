//! Manifest-driven experiment pipeline: dataset generation, teacher setup,
//! baseline VAE pretraining, per-variant alignment fine-tuning, flow
//! training and evaluation, with content-hash based stage skipping.

pub mod eval;
pub mod plot;

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowConfig, SampleMode};
use crate::metrics::{KdeGiniConfig, ProbeConfig};
use crate::nn::adamw::OptimizerConfig;
use crate::report::SweepReport;
use crate::rng;
use crate::synthdata::dataset::Dataset;
use crate::synthdata::DatasetConfig;
use crate::teacher::{
    pretrain_learned_teacher, AnalyticTeacherConfig, LearnedTeacher, LearnedTeacherConfig,
    TeacherHandle,
};
use crate::vae::{Vae, VaeConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Splits {
    pub vae_train: usize,
    pub probe_train: usize,
    pub probe_val: usize,
    pub fid_real: usize,
}

impl Splits {
    pub fn total(&self) -> usize {
        self.vae_train + self.probe_train + self.probe_val + self.fid_real
    }

    pub fn vae_range(&self) -> (usize, usize) {
        (0, self.vae_train)
    }

    pub fn probe_train_range(&self) -> (usize, usize) {
        (self.vae_train, self.vae_train + self.probe_train)
    }

    pub fn probe_val_range(&self) -> (usize, usize) {
        let s = self.vae_train + self.probe_train;
        (s, s + self.probe_val)
    }

    pub fn fid_real_range(&self) -> (usize, usize) {
        let s = self.vae_train + self.probe_train + self.probe_val;
        (s, s + self.fid_real)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSection {
    pub seed: u64,
    pub count: usize,
    pub config: DatasetConfig,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Analytic,
    Learned,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    pub grid: (usize, usize),
    pub feature_dim: usize,
    pub projection_seed: u64,
    #[serde(default)]
    pub learned: Option<LearnedTeacherConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSection {
    pub probe: ProbeConfig,
    pub gmm_ks: Vec<usize>,
    pub gmm_iterations: usize,
    pub kde: KdeGiniConfig,
    pub sample_count: usize,
    pub sample_steps: usize,
    pub sample_mode: SampleMode,
    pub cfg_scale: f64,
    pub seed: u64,
}

/// One sweep variant: overrides applied to the base alignment config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub lambda_align: f64,
    pub noise_enabled: bool,
    pub mapper_depth: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub dataset: DatasetSection,
    pub teacher: TeacherSection,
    pub vae: VaeConfig,
    pub pretrain: PretrainSection,
    pub align: AlignConfig,
    pub flow: FlowConfig,
    pub eval: EvalSection,
    #[serde(default)]
    pub variants: Vec<VariantSpec>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.dataset.config.validate()?;
        if self.dataset.splits.total() > self.dataset.count {
            return Err(Error::Config(format!(
                "splits need {} images but dataset count is {}",
                self.dataset.splits.total(),
                self.dataset.count
            )));
        }
        self.vae.validate()?;
        self.align.validate()?;
        if self.vae.canvas_size != self.dataset.config.canvas_size {
            return Err(Error::Config("vae/dataset canvas mismatch".into()));
        }
        let (gr, gc) = self.teacher.grid;
        if gr == 0 || gc == 0 || self.dataset.config.canvas_size % gr != 0 {
            return Err(Error::Config("teacher grid does not divide canvas".into()));
        }
        self.flow.validate(self.vae.latent_side())?;
        Ok(())
    }

    /// XORs a CLI seed override into every stage seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed ^= seed;
        self.pretrain.seed ^= seed;
        self.align.seed ^= seed;
        self.flow.seed ^= seed;
        self.eval.seed ^= seed;
        self.teacher.projection_seed ^= seed;
        if let Some(l) = self.teacher.learned.as_mut() {
            l.seed ^= seed;
        }
    }

    /// Effective variant list (a single default when none are configured).
    pub fn variant_list(&self) -> Vec<VariantSpec> {
        if self.variants.is_empty() {
            vec![VariantSpec {
                name: "default".into(),
                lambda_align: self.align.lambda_align,
                noise_enabled: self.align.noise_enabled,
                mapper_depth: self.align.mapper.depth,
            }]
        } else {
            self.variants.clone()
        }
    }

    pub fn align_for(&self, v: &VariantSpec) -> AlignConfig {
        let mut a = self.align.clone();
        a.lambda_align = v.lambda_align;
        a.noise_enabled = v.noise_enabled;
        a.mapper.depth = v.mapper_depth;
        a
    }

    pub fn teacher_handle(&self, out: &Path) -> Result<TeacherHandle> {
        match self.teacher.kind {
            TeacherKind::Analytic => TeacherHandle::analytic(AnalyticTeacherConfig {
                canvas_size: self.dataset.config.canvas_size,
                grid: self.teacher.grid,
                feature_dim: self.teacher.feature_dim,
                projection_seed: self.teacher.projection_seed,
            }),
            TeacherKind::Learned => {
                let dir = out.join("teacher/checkpoint");
                Ok(TeacherHandle::Learned(Box::new(LearnedTeacher::load(dir)?)))
            }
        }
    }
}

// ------------------------------------------------------------- hashing ----

pub fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    crate::nn::hex(&h.finalize())
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha_hex(serde_json::to_string(value).expect("serializable").as_bytes())
}

/// Content hash of a directory tree (sorted relative paths + bytes),
/// skipping `stage.json`.
pub fn hash_tree(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        if rel == "stage.json" {
            continue;
        }
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(std::fs::read(dir.join(&rel))?);
    }
    Ok(crate::nn::hex(&h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(
                path.strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/"),
            );
        }
    }
    Ok(())
}

// ------------------------------------------------------------- manifest ---

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub output: String,
    pub input_hash: String,
    pub artifact_hash: String,
    /// Changes whenever the stage actually executes.
    pub completed_unix_nanos: u128,
    pub wall_clock_secs: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartialFailure {
    pub stage: String,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_hash: String,
    pub code_version: String,
    pub variant: String,
    pub stages: Vec<StageRecord>,
    pub seeds: BTreeMap<String, u64>,
    pub report_path: Option<String>,
    pub partial: Option<PartialFailure>,
}

impl ExperimentManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentManifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Re-hashes every stage artifact against its recorded hash.
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for s in &self.stages {
            let dir = out_dir.join(&s.output);
            if !dir.exists() {
                return Err(Error::Data(format!(
                    "stage {} artifact missing: {}",
                    s.name,
                    dir.display()
                )));
            }
            let h = hash_tree(&dir)?;
            if h != s.artifact_hash {
                return Err(Error::Data(format!(
                    "stage {} artifact hash mismatch: recorded {} found {h}",
                    s.name, s.artifact_hash
                )));
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------- stages -----

#[derive(Serialize, Deserialize)]
struct StageStamp {
    input_hash: String,
    artifact_hash: String,
    completed_unix_nanos: u128,
}

fn now_nanos() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0)
}

/// Runs (or skips) one stage: `body` must (re)create the artifacts in `dir`.
fn run_stage(
    name: &str,
    out_root: &Path,
    rel_dir: &str,
    input_hash: &str,
    body: impl FnOnce(&Path) -> Result<()>,
) -> Result<StageRecord> {
    let dir = out_root.join(rel_dir);
    let stamp_path = dir.join("stage.json");
    if stamp_path.exists() {
        if let Ok(stamp) = serde_json::from_str::<StageStamp>(&std::fs::read_to_string(
            &stamp_path,
        )?) {
            if stamp.input_hash == input_hash {
                let actual = hash_tree(&dir)?;
                if actual == stamp.artifact_hash {
                    return Ok(StageRecord {
                        name: name.into(),
                        output: rel_dir.into(),
                        input_hash: input_hash.into(),
                        artifact_hash: stamp.artifact_hash,
                        completed_unix_nanos: stamp.completed_unix_nanos,
                        wall_clock_secs: 0.0,
                        skipped: true,
                    });
                }
            }
        }
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let t0 = Instant::now();
    body(&dir)?;
    let artifact_hash = hash_tree(&dir)?;
    let completed = now_nanos();
    let stamp = StageStamp {
        input_hash: input_hash.into(),
        artifact_hash: artifact_hash.clone(),
        completed_unix_nanos: completed,
    };
    std::fs::write(&stamp_path, serde_json::to_string_pretty(&stamp)?)?;
    Ok(StageRecord {
        name: name.into(),
        output: rel_dir.into(),
        input_hash: input_hash.into(),
        artifact_hash,
        completed_unix_nanos: completed,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        skipped: false,
    })
}

/// Stage chaining token: upstream identity that downstream inputs hash over.
fn stage_token(r: &StageRecord) -> String {
    format!("{}:{}:{}", r.name, r.artifact_hash, r.completed_unix_nanos)
}

/// How far to run the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageUpTo {
    Dataset,
    Vae,
    Flow,
    Eval,
}

pub struct PipelineOutcome {
    pub manifest: ExperimentManifest,
    pub report: Option<crate::report::MetricReport>,
}

/// Runs the pipeline for one variant up to the requested stage.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    variant: &VariantSpec,
    out_root: &Path,
    up_to: StageUpTo,
    resume: bool,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_root)?;
    let mut seeds = BTreeMap::new();
    seeds.insert("dataset".into(), cfg.dataset.seed);
    seeds.insert("pretrain".into(), cfg.pretrain.seed);
    seeds.insert("align".into(), cfg.align.seed);
    seeds.insert("flow".into(), cfg.flow.seed);
    seeds.insert("eval".into(), cfg.eval.seed);

    let mut manifest = ExperimentManifest {
        config_hash: hash_json(cfg),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        variant: variant.name.clone(),
        stages: Vec::new(),
        seeds,
        report_path: None,
        partial: None,
    };
    let manifest_path = out_root
        .join("variants")
        .join(&variant.name)
        .join("manifest.json");

    macro_rules! try_stage {
        ($expr:expr, $stage:literal) => {
            match $expr {
                Ok(v) => v,
                Err(e) => {
                    manifest.partial = Some(PartialFailure {
                        stage: $stage.into(),
                        error: e.to_string(),
                    });
                    manifest.save(&manifest_path)?;
                    return Ok(PipelineOutcome {
                        manifest,
                        report: None,
                    });
                }
            }
        };
    }

    // ---- dataset ----
    let ds_input = hash_json(&(&cfg.dataset, CONFIG_VERSION));
    let ds_rec = try_stage!(
        run_stage("dataset", out_root, "dataset", &ds_input, |dir| {
            let ds = Dataset::generate(cfg.dataset.seed, cfg.dataset.count, &cfg.dataset.config)?;
            ds.save(dir)
        }),
        "dataset"
    );
    manifest.stages.push(ds_rec.clone());
    if up_to == StageUpTo::Dataset {
        manifest.save(&manifest_path)?;
        return Ok(PipelineOutcome {
            manifest,
            report: None,
        });
    }

    // ---- teacher ----
    let teacher_input = hash_json(&(&cfg.teacher, stage_token(&ds_rec)));
    let ds_dir = out_root.join("dataset");
    let teacher_rec = try_stage!(
        run_stage("teacher", out_root, "teacher", &teacher_input, |dir| {
            match cfg.teacher.kind {
                TeacherKind::Analytic => {
                    let handle = TeacherHandle::analytic(AnalyticTeacherConfig {
                        canvas_size: cfg.dataset.config.canvas_size,
                        grid: cfg.teacher.grid,
                        feature_dim: cfg.teacher.feature_dim,
                        projection_seed: cfg.teacher.projection_seed,
                    })?;
                    let info = serde_json::json!({
                        "kind": "analytic",
                        "feature_dim": cfg.teacher.feature_dim,
                        "grid": cfg.teacher.grid,
                        "checksum": handle.checksum(),
                    });
                    std::fs::write(
                        dir.join("teacher.json"),
                        serde_json::to_string_pretty(&info)?,
                    )?;
                    Ok(())
                }
                TeacherKind::Learned => {
                    let mut lcfg = cfg.teacher.learned.clone().ok_or_else(|| {
                        Error::Config("teacher.kind = learned requires teacher.learned".into())
                    })?;
                    lcfg.canvas_size = cfg.dataset.config.canvas_size;
                    lcfg.num_classes = cfg.dataset.config.num_classes();
                    let ds = Dataset::load(&ds_dir)?;
                    let teacher = pretrain_learned_teacher(&ds, &lcfg)?;
                    teacher.save(dir.join("checkpoint"))?;
                    let info = serde_json::json!({
                        "kind": "learned",
                        "feature_dim": lcfg.dim,
                        "checksum": teacher.params.checksum(),
                        "val_accuracy": teacher.val_accuracy,
                    });
                    std::fs::write(
                        dir.join("teacher.json"),
                        serde_json::to_string_pretty(&info)?,
                    )?;
                    Ok(())
                }
            }
        }),
        "teacher"
    );
    manifest.stages.push(teacher_rec.clone());

    // ---- baseline pretraining (shared by variants) ----
    let pre_input = hash_json(&(
        &cfg.pretrain,
        &cfg.vae,
        &cfg.align.loss_weights,
        stage_token(&ds_rec),
        stage_token(&teacher_rec),
    ));
    let pre_rec = try_stage!(
        run_stage("pretrain-vae", out_root, "pretrain", &pre_input, |dir| {
            let ds = Dataset::load(&ds_dir)?;
            let train = slice_dataset(&ds, cfg.dataset.splits.vae_range());
            let teacher = cfg.teacher_handle(out_root)?;
            let vae = Vae::init(cfg.vae.clone(), cfg.pretrain.seed)?;
            let pre_cfg = AlignConfig {
                lambda_align: 0.0,
                noise_enabled: false,
                optimizer: cfg.pretrain.optimizer,
                loss_weights: cfg.align.loss_weights,
                gan_enabled: false,
                steps: cfg.pretrain.steps,
                batch: cfg.pretrain.batch,
                seed: cfg.pretrain.seed,
                ..cfg.align.clone()
            };
            crate::align::train_vae_aligned(&vae, &train, &teacher, &pre_cfg, Some(dir), resume)
                .map(|_| ())
        }),
        "pretrain-vae"
    );
    manifest.stages.push(pre_rec.clone());

    // ---- per-variant alignment fine-tuning ----
    let variant_rel = format!("variants/{}", variant.name);
    let align_cfg = cfg.align_for(variant);
    let align_input = hash_json(&(
        &align_cfg,
        stage_token(&pre_rec),
        stage_token(&teacher_rec),
    ));
    let vae_rel = format!("{variant_rel}/vae");
    let align_rec = try_stage!(
        run_stage("align-vae", out_root, &vae_rel, &align_input, |dir| {
            let ds = Dataset::load(&ds_dir)?;
            let train = slice_dataset(&ds, cfg.dataset.splits.vae_range());
            let teacher = cfg.teacher_handle(out_root)?;
            let init = crate::align::TrainedVae::load(out_root.join("pretrain/checkpoint"))?;
            let vae = init.vae();
            crate::align::train_vae_aligned(&vae, &train, &teacher, &align_cfg, Some(dir), resume)
                .map(|_| ())
        }),
        "align-vae"
    );
    manifest.stages.push(align_rec.clone());
    if up_to == StageUpTo::Vae {
        manifest.save(&manifest_path)?;
        return Ok(PipelineOutcome {
            manifest,
            report: None,
        });
    }

    // ---- flow training ----
    let flow_input = hash_json(&(&cfg.flow, stage_token(&align_rec), stage_token(&teacher_rec)));
    let flow_rel = format!("{variant_rel}/flow");
    let vae_ckpt_dir = out_root.join(&vae_rel).join("checkpoint");
    let flow_rec = try_stage!(
        run_stage("train-flow", out_root, &flow_rel, &flow_input, |dir| {
            let ds = Dataset::load(&ds_dir)?;
            let train = slice_dataset(&ds, cfg.dataset.splits.vae_range());
            let trained = crate::align::TrainedVae::load(&vae_ckpt_dir)?;
            let vae = trained.vae();
            let latents = encode_latents_sampled(&vae, &train, cfg.flow.seed)?;
            let repa_targets = if cfg.flow.repa_enabled {
                let teacher = cfg.teacher_handle(out_root)?;
                Some(crate::align::teacher_feature_cache(&teacher, &train)?)
            } else {
                None
            };
            train_flow(
                &latents,
                &train.labels,
                &cfg.flow,
                repa_targets.as_ref(),
                Some(dir),
            )
            .map(|_| ())
        }),
        "train-flow"
    );
    manifest.stages.push(flow_rec.clone());
    if up_to == StageUpTo::Flow {
        manifest.save(&manifest_path)?;
        return Ok(PipelineOutcome {
            manifest,
            report: None,
        });
    }

    // ---- evaluation ----
    let eval_input = hash_json(&(
        &cfg.eval,
        stage_token(&align_rec),
        stage_token(&flow_rec),
        stage_token(&ds_rec),
    ));
    let eval_rel = format!("{variant_rel}/eval");
    let flow_ckpt_dir = out_root.join(&flow_rel).join("checkpoint");
    let eval_rec = try_stage!(
        run_stage("eval", out_root, &eval_rel, &eval_input, |dir| {
            let ds = Dataset::load(&ds_dir)?;
            let teacher = cfg.teacher_handle(out_root)?;
            let report = eval::evaluate_variant(
                cfg,
                &variant.name,
                &ds,
                &teacher,
                &vae_ckpt_dir,
                &flow_ckpt_dir,
                eval::ProvenanceHashes {
                    dataset: ds_rec.artifact_hash.clone(),
                    vae: align_rec.artifact_hash.clone(),
                    flow: flow_rec.artifact_hash.clone(),
                },
            )?;
            report.validate()?;
            std::fs::write(
                dir.join("report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            Ok(())
        }),
        "eval"
    );
    manifest.stages.push(eval_rec);
    manifest.report_path = Some(format!("{eval_rel}/report.json"));
    manifest.save(&manifest_path)?;

    let report = serde_json::from_str(&std::fs::read_to_string(
        out_root.join(format!("{eval_rel}/report.json")),
    )?)?;
    Ok(PipelineOutcome {
        manifest,
        report: Some(report),
    })
}

/// Owned contiguous slice of a dataset.
pub fn slice_dataset(ds: &Dataset, range: (usize, usize)) -> Dataset {
    let (from, to) = range;
    Dataset {
        config: ds.config.clone(),
        seed: ds.seed,
        images: ds.images.slice(ndarray::s![from..to, .., .., ..]).to_owned(),
        attrs: ds.attrs.slice(ndarray::s![from..to, ..]).to_owned(),
        labels: ds.labels[from..to].to_vec(),
        schema: ds.schema.clone(),
    }
}

/// Posterior samples per image with a per-index noise stream (deterministic
/// and independent of batch order).
pub fn encode_latents_sampled(
    vae: &Vae,
    ds: &Dataset,
    seed: u64,
) -> Result<ndarray::Array4<f32>> {
    let n = ds.len();
    let side = vae.cfg.latent_side();
    let d = vae.cfg.latent_channels;
    let mut out = ndarray::Array4::<f32>::zeros((n, d, side, side));
    let chunk = 128;
    let mut at = 0;
    while at < n {
        let to = (at + chunk).min(n);
        let enc = vae.encode(&ds.image_slice(at, to))?;
        for (r, i) in (at..to).enumerate() {
            let mut rng_i = rng::stream(seed, "latent", i as u64);
            let mu = enc.mu.index_axis(ndarray::Axis(0), r);
            let lv = enc.logvar.index_axis(ndarray::Axis(0), r);
            let mut dst = out.index_axis_mut(ndarray::Axis(0), i);
            ndarray::Zip::from(&mut dst).and(&mu).and(&lv).for_each(|o, &m, &l| {
                *o = m + (0.5 * l).exp() * (rng::normal(&mut rng_i) as f32);
            });
        }
        at = to;
    }
    Ok(out)
}

/// Runs every variant end to end, then writes the sweep report.
/// Returns the per-variant manifests; `partial_failures` counts variants
/// whose pipeline stopped early.
pub struct SweepOutcome {
    pub manifests: Vec<ExperimentManifest>,
    pub report: Option<SweepReport>,
    pub partial_failures: usize,
}

pub fn run_sweep(cfg: &ExperimentConfig, out_root: &Path, resume: bool) -> Result<SweepOutcome> {
    let variants = cfg.variant_list();
    let mut manifests = Vec::new();
    let mut rows = Vec::new();
    let mut failures = 0usize;
    for v in &variants {
        let outcome = run_pipeline(cfg, v, out_root, StageUpTo::Eval, resume)?;
        if outcome.manifest.partial.is_some() {
            failures += 1;
        }
        if let Some(r) = outcome.report {
            rows.push(r);
        }
        manifests.push(outcome.manifest);
    }
    let report = if rows.is_empty() {
        None
    } else {
        let sweep = SweepReport::from_rows(rows);
        sweep.validate()?;
        std::fs::write(
            out_root.join("report.json"),
            serde_json::to_string_pretty(&sweep)?,
        )?;
        std::fs::write(out_root.join("report.md"), sweep.to_markdown())?;
        Some(sweep)
    };
    Ok(SweepOutcome {
        manifests,
        report,
        partial_failures: failures,
    })
}

/// Rebuilds the sweep report from the per-variant reports on disk.
pub fn emit_report(out_root: &Path) -> Result<SweepReport> {
    let variants_dir = out_root.join("variants");
    let mut rows = Vec::new();
    if variants_dir.exists() {
        let mut names: Vec<String> = std::fs::read_dir(&variants_dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            let path = variants_dir.join(&name).join("eval/report.json");
            if path.exists() {
                let report: crate::report::MetricReport =
                    serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                rows.push(report);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "no variant reports found under {}",
            variants_dir.display()
        )));
    }
    let sweep = SweepReport::from_rows(rows);
    sweep.validate()?;
    std::fs::write(
        out_root.join("report.json"),
        serde_json::to_string_pretty(&sweep)?,
    )?;
    std::fs::write(out_root.join("report.md"), sweep.to_markdown())?;
    Ok(sweep)
}

/// A small, fast configuration for smoke tests and examples.
pub fn smoke_config() -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        name: "smoke".into(),
        dataset: DatasetSection {
            seed: 7,
            count: 832,
            config: DatasetConfig::default(),
            splits: Splits {
                vae_train: 256,
                probe_train: 224,
                probe_val: 96,
                fid_real: 256,
            },
        },
        teacher: TeacherSection {
            kind: TeacherKind::Analytic,
            grid: (8, 8),
            feature_dim: 64,
            projection_seed: 1000,
            learned: None,
        },
        vae: VaeConfig {
            downsample: 4,
            latent_channels: 2,
            base_width: 6,
            canvas_size: 32,
        },
        pretrain: PretrainSection {
            steps: 40,
            batch: 8,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            seed: 11,
        },
        align: AlignConfig {
            lambda_align: 1.0,
            noise_enabled: true,
            mapper: crate::mapper::MapperConfig {
                patch_size: 1,
                depth: 0,
                heads: 4,
                hidden_dim: 32,
                out_dim: 64,
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            steps: 40,
            batch: 8,
            seed: 13,
            ..Default::default()
        },
        flow: FlowConfig {
            depth: 1,
            width: 32,
            heads: 4,
            patch_size: 2,
            num_classes: 12,
            steps: 60,
            batch: 16,
            ema_decay: 0.95,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            seed: 17,
            ..Default::default()
        },
        eval: EvalSection {
            probe: ProbeConfig {
                max_iters: 600,
                ..Default::default()
            },
            gmm_ks: vec![4],
            gmm_iterations: 25,
            kde: KdeGiniConfig::default(),
            sample_count: 256,
            sample_steps: 8,
            sample_mode: SampleMode::Sde,
            cfg_scale: 1.0,
            seed: 23,
        },
        variants: Vec::new(),
    }
}
