//! Experiment orchestration: configuration, the staged pipeline
//! (pretrain, source generation, adaptation, evaluation), artifact
//! persistence and plotting.

pub mod chart;
pub mod manifest;
pub mod plots;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    build_unida_task, ingest_folder_dataset, DatasetError, DomainDataset, DomainRole, UniDATask,
};
use crate::eval::{self, EvalError, MetricsReport};
use crate::exec::ExecMode;
use crate::ma::{self, MaConfig, MaError, MaOutcome, ProbeGroup, SourceSide, WeightFlags};
use crate::nn::io::{self as ckpt, Arch, Component};
use crate::nn::models::{
    pretrain_source_model, DomainDiscriminator, Generator, PretrainedModel, StyleNetwork,
};
use crate::nn::NnError;
use crate::rng::{self, Stream};
use crate::sdg::{self, SdgConfig, SdgReport};
use crate::synth::{synthesize_dataset, SynthError, SyntheticDomainSpec};

pub use manifest::{Artifact, RunManifest, RunSummary};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("adaptation stage: {0}")]
    Adaptation(#[from] MaError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(#[from] plots::PlotError),
}

/// Ablation and pipeline-branch switches.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Drop the domain-similarity term from the transferable weights.
    pub disable_domain_similarity: bool,
    /// Drop the confidence term from the transferable weights.
    pub disable_confidence: bool,
    /// Train the generator without the style loss.
    pub disable_style_loss: bool,
    /// Train the generator without the classifier loss.
    pub disable_classifier_loss: bool,
    /// Skip generator training: adapt against a randomly initialized
    /// generator (the "adaptation only" baseline).
    pub ma_only: bool,
    /// Real source data is available: skip generation, adapt directly.
    pub source_available: bool,
}

impl AblationFlags {
    pub fn weight_flags(&self) -> WeightFlags {
        WeightFlags {
            disable_domain_similarity: self.disable_domain_similarity,
            disable_confidence: self.disable_confidence,
        }
    }
}

/// Full experiment configuration. Serializes as TOML for config files;
/// every path and the seed can be overridden by CLI flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Square image resolution (multiple of 8).
    pub image_size: usize,
    /// Length of the generator's noise vector.
    pub z_dim: usize,
    pub batch_size: usize,
    pub pretrain_iterations: usize,
    pub sdg_iterations: usize,
    pub ma_iterations: usize,
    pub pretrain_lr: f64,
    pub sdg_lr: f64,
    pub ma_lr: f64,
    /// Multiplier on the style term of the generation objective.
    pub style_weight: f64,
    /// Decision threshold w0. `None` picks by task overlap: 0.8 when the
    /// Jaccard index is below 0.2, otherwise 0.6.
    pub threshold: Option<f64>,
    pub seed: u64,
    /// Repeat the full pipeline this many times (seed, seed+1, ...) and
    /// aggregate; 1 keeps a single run.
    pub runs: usize,
    pub flags: AblationFlags,
    /// Synthetic task description; when absent, `source_dir`/`target_dir`
    /// must point at class-folder datasets.
    pub synthetic: Option<SyntheticDomainSpec>,
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    /// Externally reported overlap value to surface next to the formula
    /// value in reports.
    pub reference_jaccard: Option<f64>,
    /// Number of thresholds in the [0, 2] sweep; 0 skips the sweep.
    pub sweep_points: usize,
    /// Export per-sample feature embeddings.
    pub export_embeddings: bool,
    /// Cap on probe samples per group for the ordering diagnostic.
    pub probe_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            image_size: 32,
            z_dim: 10,
            batch_size: 32,
            pretrain_iterations: 600,
            sdg_iterations: 2000,
            ma_iterations: 4000,
            pretrain_lr: 0.001,
            sdg_lr: 0.001,
            ma_lr: 0.001,
            style_weight: 1.0,
            threshold: None,
            seed: 0,
            runs: 1,
            flags: AblationFlags::default(),
            synthetic: None,
            source_dir: None,
            target_dir: None,
            reference_jaccard: None,
            sweep_points: 0,
            export_embeddings: false,
            probe_samples: 200,
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale default experiment on the built-in synthetic task.
    pub fn desk_default(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            synthetic: Some(crate::synth::desk_spec(seed)),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidConfig(m.to_string()));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return bad("image_size must be a positive multiple of 8");
        }
        if self.z_dim == 0 || self.batch_size == 0 || self.runs == 0 {
            return bad("z_dim, batch_size and runs must be positive");
        }
        if let Some(w0) = self.threshold {
            if w0 < 0.0 {
                return bad("threshold must be nonnegative");
            }
        }
        if self.synthetic.is_none() && (self.source_dir.is_none() || self.target_dir.is_none()) {
            return bad("either a synthetic spec or both dataset directories are required");
        }
        if let Some(spec) = &self.synthetic {
            if spec.samples_per_class == 0 {
                return bad("samples_per_class must be positive");
            }
        }
        if self.flags.ma_only && self.flags.source_available {
            return bad("ma_only and source_available are mutually exclusive");
        }
        Ok(())
    }

    /// Decision threshold for a task: the configured value, or the
    /// overlap-based default (0.8 below 0.2 overlap, 0.6 at or above).
    pub fn effective_threshold(&self, task: &UniDATask) -> f64 {
        self.threshold
            .unwrap_or(if task.jaccard < 0.2 { 0.8 } else { 0.6 })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))
    }

    fn sdg_config(&self, seed: u64) -> SdgConfig {
        SdgConfig {
            iterations: self.sdg_iterations,
            batch_size: self.batch_size,
            learning_rate: self.sdg_lr,
            style_weight: self.style_weight,
            disable_classifier_loss: self.flags.disable_classifier_loss,
            disable_style_loss: self.flags.disable_style_loss,
            seed,
            ..SdgConfig::default()
        }
    }

    fn ma_config(&self, seed: u64) -> MaConfig {
        MaConfig {
            iterations: self.ma_iterations,
            batch_size: self.batch_size,
            learning_rate: self.ma_lr,
            weight_flags: self.flags.weight_flags(),
            seed,
            ..MaConfig::default()
        }
    }
}

/// Everything a finished run keeps in memory (the files are authoritative;
/// this is for callers that keep going, e.g. the acceptance suite).
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub task: UniDATask,
    pub report: MetricsReport,
    pub sdg_report: Option<SdgReport>,
    pub ordering: ma::OrderingDiagnostic,
    pub outcome: MaOutcome,
    pub pretrained: PretrainedModel,
}

/// Run the configured experiment. With `runs > 1` each repetition lands in
/// `out_dir/run_<i>` with seed `seed + i` and a top-level aggregate
/// manifest is written; the returned outcome is the first run's.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    mode: ExecMode,
) -> Result<RunOutcome, ExperimentError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    if config.runs == 1 {
        return run_single(config, out_dir, config.seed, mode);
    }
    let mut first: Option<RunOutcome> = None;
    let mut per_run = Vec::new();
    let mut aggregate = RunManifest::new(config.clone(), config.seed);
    for r in 0..config.runs {
        let sub = out_dir.join(format!("run_{r}"));
        fs::create_dir_all(&sub)?;
        let outcome = run_single(config, &sub, config.seed + r as u64, mode)?;
        per_run.push(outcome.report.avg_all);
        aggregate.artifacts.push(Artifact {
            name: format!("run_{r}_manifest"),
            path: format!("run_{r}/{}", manifest::MANIFEST_NAME),
            sha256: String::new(),
        });
        if first.is_none() {
            first = Some(outcome);
        }
    }
    aggregate.summary.status = "ok".into();
    aggregate.summary.avg_all =
        Some(per_run.iter().sum::<f64>() / per_run.len() as f64);
    aggregate.summary.per_run_avg_all = per_run;
    aggregate.write(out_dir)?;
    let mut first = first.expect("runs >= 1");
    first.manifest.summary.per_run_avg_all =
        aggregate.summary.per_run_avg_all.clone();
    Ok(first)
}

fn run_single(
    config: &ExperimentConfig,
    run_dir: &Path,
    seed: u64,
    mode: ExecMode,
) -> Result<RunOutcome, ExperimentError> {
    fs::create_dir_all(run_dir)?;
    let mut m = RunManifest::new(config.clone(), seed);
    let result = run_single_inner(config, run_dir, seed, mode, &mut m);
    if let Err(e) = &result {
        // Preserve partial artifacts, flag the failure.
        m.summary.status = format!("failed: {e}");
        let _ = m.write(run_dir);
    }
    result
}

fn run_single_inner(
    config: &ExperimentConfig,
    run_dir: &Path,
    seed: u64,
    mode: ExecMode,
    m: &mut RunManifest,
) -> Result<RunOutcome, ExperimentError> {
    let config_path = run_dir.join("config.toml");
    let mut cfg_snapshot = config.clone();
    cfg_snapshot.seed = seed;
    fs::write(&config_path, cfg_snapshot.to_toml())?;
    m.add_artifact(run_dir, "config", &config_path)?;
    let config_json = serde_json::to_value(&cfg_snapshot).expect("config serializes");

    // --- datasets --------------------------------------------------------
    let t0 = Instant::now();
    let (source, target) = load_datasets(config, seed, mode, &mut m.input_hashes)?;
    let task = build_unida_task(source.label_set(), target.label_set())?;
    m.stage_seconds.insert("data".into(), t0.elapsed().as_secs_f64());

    // --- pretrain ----------------------------------------------------------
    let t0 = Instant::now();
    let pretrained = pretrain_source_model(
        &source,
        config.pretrain_iterations,
        config.batch_size,
        config.pretrain_lr,
        seed,
        mode,
    )?;
    m.summary.source_train_accuracy = Some(pretrained.train_accuracy);
    let arch = Arch {
        image_size: config.image_size,
        num_classes: task.source_labels.len(),
        z_dim: config.z_dim,
    };
    let mf = run_dir.join("pretrained_feature.ckpt");
    ckpt::save(&mf, Component::FeatureExtractor, seed, arch.clone(), config_json.clone(), &pretrained.feature.net)?;
    m.add_artifact(run_dir, "pretrained_feature", &mf)?;
    let mc = run_dir.join("pretrained_classifier.ckpt");
    ckpt::save(&mc, Component::Classifier, seed, arch.clone(), config_json.clone(), &pretrained.classifier.net)?;
    m.add_artifact(run_dir, "pretrained_classifier", &mc)?;
    m.stage_seconds.insert("pretrain".into(), t0.elapsed().as_secs_f64());

    // --- components --------------------------------------------------------
    let mut generator = Generator::new(
        task.source_labels.len(),
        config.z_dim,
        config.image_size,
        &mut rng::stream(seed, Stream::InitGenerator),
    )?;
    let mut disc_adv = DomainDiscriminator::new(&mut rng::stream(seed, Stream::InitDiscAdv));
    let mut disc_sim = DomainDiscriminator::new(&mut rng::stream(seed, Stream::InitDiscSim));
    let style = StyleNetwork::fixed();

    // --- source data generation -------------------------------------------
    let mut pretrained = pretrained;
    let mut sdg_report = None;
    if !config.flags.source_available && !config.flags.ma_only {
        let t0 = Instant::now();
        let report = sdg::train_sdg(
            &mut pretrained,
            &style,
            &mut generator,
            &target,
            &config.sdg_config(seed),
            mode,
        );
        if let Some(w) = &report.warning {
            eprintln!("warning: {w}");
        }
        let log_path = run_dir.join("sdg_log.csv");
        write_sdg_log(&log_path, &report)?;
        m.add_artifact(run_dir, "sdg_log", &log_path)?;
        let sheetipath = run_dir.join("sdg_samples.png");
        write_contact_sheet(&sheetipath, &generator, &task, seed, mode)?;
        m.add_artifact(run_dir, "sdg_samples", &sheetipath)?;
        m.summary.sdg_best_recovery = Some(report.best_recovery);
        sdg_report = Some(report);
        m.stage_seconds.insert("sdg".into(), t0.elapsed().as_secs_f64());
    }
    let gp = run_dir.join("generator.ckpt");
    ckpt::save(&gp, Component::Generator, seed, arch.clone(), config_json.clone(), &generator.net)?;
    m.add_artifact(run_dir, "generator", &gp)?;

    // --- adaptation ---------------------------------------------------------
    let t0 = Instant::now();
    let ma_cfg = config.ma_config(seed);
    let source_side = if config.flags.source_available {
        SourceSide::Real(&source)
    } else {
        SourceSide::Generated(&generator)
    };
    let outcome = ma::train_ma(
        source_side,
        &target,
        &pretrained,
        &mut disc_adv,
        &mut disc_sim,
        &ma_cfg,
        mode,
    )?;
    let log_path = run_dir.join("ma_log.csv");
    write_ma_log(&log_path, &outcome.log)?;
    m.add_artifact(run_dir, "ma_log", &log_path)?;
    for (name, comp, net) in [
        ("feature", Component::FeatureExtractor, &outcome.feature.net),
        ("classifier", Component::Classifier, &outcome.classifier.net),
        ("disc_adv", Component::DiscriminatorAdv, &outcome.disc_adv.net),
        ("disc_sim", Component::DiscriminatorSim, &outcome.disc_sim.net),
    ] {
        let p = run_dir.join(format!("{name}.ckpt"));
        ckpt::save(&p, comp, seed, arch.clone(), config_json.clone(), net)?;
        m.add_artifact(run_dir, name, &p)?;
    }
    m.stage_seconds.insert("ma".into(), t0.elapsed().as_secs_f64());

    // --- evaluation ----------------------------------------------------------
    let t0 = Instant::now();
    let w0 = config.effective_threshold(&task);
    let truths = eval::ground_truth(&task, &target)?;
    let cache = eval::cache_scores(
        &outcome.feature,
        &outcome.classifier,
        &outcome.disc_sim,
        &target,
        config.batch_size,
        mode,
    );
    let predictions = eval::predictions_from_cache(&cache, w0, config.flags.weight_flags())?;
    let mut report =
        eval::score_with_reference(&predictions, &truths, &task, config.reference_jaccard)?;
    if config.sweep_points >= 2 {
        let grid: Vec<f64> = (0..config.sweep_points)
            .map(|i| 2.0 * i as f64 / (config.sweep_points - 1) as f64)
            .collect();
        let curve =
            eval::threshold_sweep(&cache, &truths, &task, &grid, config.flags.weight_flags())?;
        let sweep_path = run_dir.join("sweep.csv");
        write_sweep_csv(&sweep_path, &curve)?;
        m.add_artifact(run_dir, "sweep", &sweep_path)?;
        report.threshold_curve = Some(curve);
    }

    let pred_path = run_dir.join("predictions.csv");
    write_predictions_csv(&pred_path, &predictions, &task)?;
    m.add_artifact(run_dir, "predictions", &pred_path)?;

    let metrics_json = run_dir.join("metrics.json");
    fs::write(&metrics_json, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    m.add_artifact(run_dir, "metrics_json", &metrics_json)?;
    let metrics_csv = run_dir.join("metrics.csv");
    report.write_csv(fs::File::create(&metrics_csv)?)?;
    m.add_artifact(run_dir, "metrics_csv", &metrics_csv)?;

    // ordering diagnostic over probe sets
    let probes = build_probes(config, &task, &source, &target, &generator, seed, mode);
    let ordering = ma::ordering_diagnostic(
        &outcome.feature,
        &outcome.classifier,
        &outcome.disc_sim,
        &probes,
        mode,
    );
    let ordering_path = run_dir.join("ordering.json");
    fs::write(&ordering_path, serde_json::to_string_pretty(&ordering).expect("serializes"))?;
    m.add_artifact(run_dir, "ordering", &ordering_path)?;

    if config.export_embeddings {
        let emb = eval::export_embeddings(
            &outcome.feature,
            &[("source", &source), ("target", &target)],
            config.batch_size,
            mode,
        );
        let emb_path = run_dir.join("embeddings.csv");
        eval::write_embeddings_csv(&emb, fs::File::create(&emb_path)?)?;
        m.add_artifact(run_dir, "embeddings", &emb_path)?;
    }
    m.stage_seconds.insert("eval".into(), t0.elapsed().as_secs_f64());

    m.summary.status = "ok".into();
    m.summary.avg_all = Some(report.avg_all);
    m.summary.avg_shared = report.avg_shared;
    m.summary.unknown_accuracy = report.unknown_accuracy();
    m.summary.jaccard = Some(task.jaccard);
    m.summary.jaccard_reference = config.reference_jaccard;
    m.summary.threshold = Some(w0);
    m.write(run_dir)?;

    Ok(RunOutcome {
        manifest: m.clone(),
        task,
        report,
        sdg_report,
        ordering,
        outcome,
        pretrained,
    })
}

fn load_datasets(
    config: &ExperimentConfig,
    seed: u64,
    mode: ExecMode,
    hashes: &mut BTreeMap<String, String>,
) -> Result<(DomainDataset, DomainDataset), ExperimentError> {
    if let Some(spec) = &config.synthetic {
        let mut spec = spec.clone();
        spec.seed = seed;
        spec.image_size = config.image_size;
        let spec_json = serde_json::to_vec(&spec).expect("spec serializes");
        hashes.insert("synthetic_spec".into(), manifest::hex_digest(&spec_json));
        Ok(synthesize_dataset(&spec, mode)?)
    } else {
        let src_dir = config.source_dir.as_ref().expect("validated");
        let tgt_dir = config.target_dir.as_ref().expect("validated");
        hashes.insert("source_dir".into(), hash_dir_listing(src_dir)?);
        hashes.insert("target_dir".into(), hash_dir_listing(tgt_dir)?);
        let source = ingest_folder_dataset(src_dir, DomainRole::RealSource, config.image_size)?;
        let target = ingest_folder_dataset(tgt_dir, DomainRole::Target, config.image_size)?;
        Ok((source, target))
    }
}

/// Cheap content fingerprint of a dataset tree: sorted relative paths and
/// file sizes.
fn hash_dir_listing(dir: &Path) -> std::io::Result<String> {
    let mut entries = Vec::new();
    collect_listing(dir, dir, &mut entries)?;
    entries.sort();
    let joined = entries.join("\n");
    Ok(manifest::hex_digest(joined.as_bytes()))
}

fn collect_listing(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_listing(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().into_owned();
            out.push(format!("{rel}:{}", entry.metadata()?.len()));
        }
    }
    Ok(())
}

/// Probe sets for the ordering diagnostic: source split into shared and
/// private by label name (synthetic-source samples are drawn from the
/// generator when the real source is withheld), target split by its
/// evaluation labels.
fn build_probes(
    config: &ExperimentConfig,
    task: &UniDATask,
    source: &DomainDataset,
    target: &DomainDataset,
    generator: &Generator,
    seed: u64,
    mode: ExecMode,
) -> Vec<(ProbeGroup, ndarray::Array4<f64>)> {
    let cap = config.probe_samples.max(1);
    let source_ds;
    let source_ref = if config.flags.source_available {
        source
    } else {
        source_ds = sdg::synthesize_source_dataset(
            generator,
            &task.source_labels,
            cap * 2,
            seed ^ 0x9e37,
            mode,
        );
        &source_ds
    };
    let mut groups: Vec<(ProbeGroup, Vec<usize>)> = vec![
        (ProbeGroup::SourcePrivate, Vec::new()),
        (ProbeGroup::SourceShared, Vec::new()),
        (ProbeGroup::TargetShared, Vec::new()),
        (ProbeGroup::TargetPrivate, Vec::new()),
    ];
    for i in 0..source_ref.len() {
        if let Some(l) = source_ref.eval_label(i) {
            let name = source_ref.label_set().name(l);
            let g = if task.shared.contains(name) { 1 } else { 0 };
            if groups[g].1.len() < cap {
                groups[g].1.push(i);
            }
        }
    }
    for i in 0..target.len() {
        if let Some(l) = target.eval_label(i) {
            let name = target.label_set().name(l);
            let g = if task.shared.contains(name) { 2 } else { 3 };
            if groups[g].1.len() < cap {
                groups[g].1.push(i);
            }
        }
    }
    groups
        .into_iter()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(g, idx)| {
            let ds = match g {
                ProbeGroup::SourcePrivate | ProbeGroup::SourceShared => source_ref,
                _ => target,
            };
            (g, ds.batch(&idx))
        })
        .collect()
}

fn write_sdg_log(path: &Path, report: &SdgReport) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "classifier_loss", "style_loss", "recovery_accuracy"])?;
    for row in &report.rows {
        w.write_record([
            row.step.to_string(),
            format!("{:.6}", row.classifier_loss),
            format!("{:.6}", row.style_loss),
            format!("{:.6}", row.recovery_accuracy),
        ])?;
    }
    w.flush().map_err(|e| ExperimentError::Io(e))?;
    Ok(())
}

fn write_ma_log(path: &Path, log: &[ma::MaRow]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "adversarial_loss",
        "source_ce_loss",
        "similarity_loss",
        "mean_weight_source",
        "mean_weight_target",
        "grl_lambda",
    ])?;
    for row in log {
        w.write_record([
            row.step.to_string(),
            format!("{:.6}", row.adversarial_loss),
            format!("{:.6}", row.source_ce_loss),
            format!("{:.6}", row.similarity_loss),
            format!("{:.6}", row.mean_weight_source),
            format!("{:.6}", row.mean_weight_target),
            format!("{:.6}", row.grl_lambda),
        ])?;
    }
    w.flush().map_err(ExperimentError::Io)?;
    Ok(())
}

fn write_sweep_csv(path: &Path, curve: &[eval::SweepPoint]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["w0", "avg_all", "unknown_accuracy"])?;
    for p in curve {
        w.write_record([
            format!("{:.6}", p.w0),
            format!("{:.6}", p.avg_all),
            format!("{:.6}", p.unknown_accuracy),
        ])?;
    }
    w.flush().map_err(ExperimentError::Io)?;
    Ok(())
}

fn write_predictions_csv(
    path: &Path,
    predictions: &[ma::Prediction],
    task: &UniDATask,
) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "w_t", "d", "confidence", "decision"])?;
    for p in predictions {
        let decision = match p.class_index {
            Some(ci) => task.source_labels.name(ci).to_string(),
            None => eval::UNKNOWN_CLASS.to_string(),
        };
        w.write_record([
            p.sample_id.to_string(),
            format!("{:.6}", p.w_t),
            format!("{:.6}", p.d),
            format!("{:.6}", p.conf),
            decision,
        ])?;
    }
    w.flush().map_err(ExperimentError::Io)?;
    Ok(())
}

/// A contact sheet of generated samples: one row per source class.
fn write_contact_sheet(
    path: &Path,
    generator: &Generator,
    task: &UniDATask,
    seed: u64,
    mode: ExecMode,
) -> Result<(), ExperimentError> {
    let k = task.source_labels.len();
    let per_class = 8usize;
    let size = generator.image_size;
    let mut latent_rng = rng::stream(seed ^ 0xC0, Stream::Latent);
    let labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat(c).take(per_class)).collect();
    let y = crate::nn::ops::one_hot(&labels, k);
    let z = {
        use rand_distr::{Distribution, StandardNormal};
        let normal = StandardNormal;
        ndarray::Array2::from_shape_fn((labels.len(), generator.z_dim), |_| {
            normal.sample(&mut latent_rng)
        })
    };
    let imgs = generator.generate(&generator.latent_input(&y, &z), mode);
    let mut canvas = image::RgbImage::new((per_class * size) as u32, (k * size) as u32);
    for (row, _) in labels.iter().enumerate() {
        let (cy, cx) = (row / per_class, row % per_class);
        let img = imgs.index_axis(Axis(0), row);
        for yy in 0..size {
            for xx in 0..size {
                let px = image::Rgb([
                    (img[[0, yy, xx]] * 255.0).round() as u8,
                    (img[[1, yy, xx]] * 255.0).round() as u8,
                    (img[[2, yy, xx]] * 255.0).round() as u8,
                ]);
                canvas.put_pixel((cx * size + xx) as u32, (cy * size + yy) as u32, px);
            }
        }
    }
    canvas
        .save(path)
        .map_err(|e| ExperimentError::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Render plots for a finished run directory; updates the manifest with
/// the new image artifacts.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut m = RunManifest::load(run_dir)?;
    let written = plots::emit_all(run_dir, &m)?;
    for p in &written {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "plot".into());
        m.artifacts.retain(|a| a.path != p.strip_prefix(run_dir).unwrap_or(p).to_string_lossy());
        m.add_artifact(run_dir, &name, p)?;
    }
    m.write(run_dir)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_roundtrip() {
        let cfg = ExperimentConfig::desk_default(7);
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.image_size, cfg.image_size);
        assert!(back.synthetic.is_some());
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = ExperimentConfig::desk_default(1);
        cfg.image_size = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk_default(1);
        cfg.threshold = Some(-0.5);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk_default(1);
        cfg.flags.ma_only = true;
        cfg.flags.source_available = true;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.synthetic = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn threshold_rule_follows_overlap() {
        use crate::dataset::LabelSet;
        let cfg = ExperimentConfig::desk_default(1);
        let low = build_unida_task(
            &LabelSet::new(["a", "b", "c", "d", "e", "f", "g"]).unwrap(),
            &LabelSet::new((0..21).map(|i| if i < 4 {
                ["a", "b", "c", "d"][i].to_string()
            } else {
                format!("t{i}")
            }))
            .unwrap(),
        )
        .unwrap();
        assert!(low.jaccard < 0.2);
        assert_eq!(cfg.effective_threshold(&low), 0.8);
        let high = build_unida_task(
            &LabelSet::new(["a", "b", "c"]).unwrap(),
            &LabelSet::new(["a", "b", "c", "d"]).unwrap(),
        )
        .unwrap();
        assert!(high.jaccard >= 0.2);
        assert_eq!(cfg.effective_threshold(&high), 0.6);
        let mut cfg = cfg;
        cfg.threshold = Some(1.0);
        assert_eq!(cfg.effective_threshold(&high), 1.0);
    }
}
