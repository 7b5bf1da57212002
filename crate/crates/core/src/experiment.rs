//! Config-driven experiment runner: single runs, fusion-ratio sweeps, sampler
//! and selection ablations, diagnostics, and content-hashed manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{load_checkpoint, save_checkpoint};
use crate::data::{
    load_dataset, longtail_counts, partition_splits, save_dataset, synth_gaussian_longtail,
    ClassCounts, DatasetBundle, Split, SplitPartition, SyntheticData,
};
use crate::diagnostics::{
    boundary_grid, dump_embeddings, evaluate, prediction_histogram, rationale_measure, split_mass,
    GridBounds, MetricsReport,
};
use crate::error::{Error, Result};
use crate::fusion::{select_channels, SelectionStrategy};
use crate::model::{BackboneSpec, ModelState};
use crate::rng;
use crate::sampling::SamplerKind;
use crate::train::{
    finetune_stage2_h2t, train_stage1_from, FusionSettings, RunRecord, TrainSchedule,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub n_max: usize,
    pub rho: f64,
    pub in_dims: usize,
    pub separation: f32,
    pub test_per_class: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Fraction of feature channels replaced by the fusing branch.
    pub p: f64,
    pub strategy: SelectionStrategy,
    /// Seeds the stage-II samplers (and a re-initialized classifier).
    pub seed: u64,
    /// Seeds the random channel masks.
    pub mask_seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            p: 0.3,
            strategy: SelectionStrategy::Random,
            seed: 0,
            mask_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub fused: SamplerKind,
    pub fusing: SamplerKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            fused: SamplerKind::ClassBalanced,
            fusing: SamplerKind::InstanceWise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub head_threshold: usize,
    pub tail_threshold: usize,
    /// Multiplies both thresholds (rounded to the nearest count).
    pub threshold_scale: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            head_threshold: 100,
            tail_threshold: 20,
            threshold_scale: 1.0,
        }
    }
}

impl SplitConfig {
    pub fn thresholds(&self) -> (usize, usize) {
        let s = |t: usize| (t as f64 * self.threshold_scale).round() as usize;
        (s(self.head_threshold), s(self.tail_threshold))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub samplers: SamplerConfig,
    #[serde(default)]
    pub splits: SplitConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// The desk-scale profile shipped as `configs/default.toml`.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("bundled default config parses")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, reason: String| Err(Error::Config(format!("{name}: {reason}")));
        let d = &self.dataset;
        if d.in_dims != self.backbone.in_dims() {
            return field(
                "dataset.in_dims",
                format!(
                    "{} does not match the backbone input width {}",
                    d.in_dims,
                    self.backbone.in_dims()
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.fusion.p) {
            return field("fusion.p", format!("{} is outside [0, 1]", self.fusion.p));
        }
        if !(self.splits.threshold_scale > 0.0) || !self.splits.threshold_scale.is_finite() {
            return field("splits.threshold_scale", "must be positive".into());
        }
        let (head, tail) = self.splits.thresholds();
        if head <= tail {
            return field(
                "splits",
                format!("scaled head threshold {head} must exceed tail threshold {tail}"),
            );
        }
        if d.test_per_class == 0 {
            return field("dataset.test_per_class", "must be at least 1".into());
        }
        let as_config = |e: Error| match e {
            Error::Validation { field, reason } => Error::Config(format!("{field}: {reason}")),
            other => other,
        };
        self.backbone.validate().map_err(as_config)?;
        self.schedule.validate().map_err(as_config)?;
        longtail_counts(d.n_max, d.rho, d.classes).map_err(|e| match e {
            Error::Validation { field, reason } => {
                Error::Config(format!("dataset.{field}: {reason}"))
            }
            other => other,
        })?;
        if !(d.separation > 0.0) || !d.separation.is_finite() {
            return field("dataset.separation", "must be positive".into());
        }
        Ok(())
    }

    pub fn counts(&self) -> Result<ClassCounts> {
        longtail_counts(self.dataset.n_max, self.dataset.rho, self.dataset.classes)
    }

    pub fn partition(&self, counts: &ClassCounts) -> Result<SplitPartition> {
        let (head, tail) = self.splits.thresholds();
        partition_splits(counts, head, tail)
    }

    pub fn fusion_settings(&self) -> FusionSettings {
        FusionSettings {
            p: self.fusion.p,
            strategy: self.fusion.strategy,
            fused_sampler: self.samplers.fused,
            fusing_sampler: self.samplers.fusing,
            seed: self.fusion.seed,
            mask_seed: self.fusion.mask_seed,
        }
    }

    /// Applies a run seed to stage I and stage II. The dataset seed is left
    /// alone so runs with different seeds share one dataset.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.schedule.seed = seed;
        self.fusion.seed = seed;
        self.fusion.mask_seed = seed;
        self
    }
}

/// Training and test data plus their split partition.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: SyntheticData,
    pub partition: SplitPartition,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let counts = cfg.counts()?;
    let d = &cfg.dataset;
    let data = synth_gaussian_longtail(&counts, d.in_dims, d.separation, d.seed, d.test_per_class)?;
    Ok(Prepared {
        partition: cfg.partition(&counts)?,
        data,
    })
}

pub fn run_stage1(
    cfg: &ExperimentConfig,
    train: &DatasetBundle,
) -> Result<(ModelState, RunRecord)> {
    let model = ModelState::init(
        cfg.backbone.clone(),
        train.classes(),
        cfg.classifier.bias,
        cfg.schedule.seed,
    )?;
    train_stage1_from(model, train, &cfg.schedule)
}

// ---------------------------------------------------------------------------
// Artifact helpers.
// ---------------------------------------------------------------------------

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub const MANIFEST: &str = "MANIFEST";

/// Writes `dir/MANIFEST` with one `sha256  relative/path` line per file under
/// `dir`, sorted by path. Returns the lines.
pub fn write_manifest(dir: &Path) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .expect("walk stays under its root")
            .to_string_lossy()
            .replace('\\', "/");
        if rel == MANIFEST {
            continue;
        }
        let bytes = std::fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        lines.push(format!("{}  {rel}", hex::encode(Sha256::digest(&bytes))));
    }
    lines.sort_by(|a, b| a[66..].cmp(&b[66..]));
    let mut text = lines.join("\n");
    text.push('\n');
    write_text(&dir.join(MANIFEST), &text)?;
    Ok(lines)
}

fn write_data(dir: &Path, data: &SyntheticData) -> Result<()> {
    let data_dir = dir.join("data");
    create_dir(&data_dir)?;
    save_dataset(&data_dir.join("train.h2t"), &data.train)?;
    save_dataset(&data_dir.join("test.h2t"), &data.test)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage1: Option<MetricsReport>,
    pub stage2: MetricsReport,
}

/// Stage I and stage II end to end. With `stage1_from`, stage I is skipped and
/// the given checkpoint is fine-tuned instead.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    stage1_from: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    create_dir(out)?;
    let prep = prepare_data(cfg)?;
    write_config(out, cfg)?;
    write_data(out, &prep.data)?;

    let (stage1, stage1_metrics) = match stage1_from {
        Some(path) => {
            let model = load_checkpoint(path, cfg.backbone.clone())?;
            if model.classes != prep.data.train.classes() {
                return Err(Error::invalid(
                    "checkpoint",
                    "class count differs from the config",
                ));
            }
            log::info!("stage II only, starting from {}", path.display());
            (model, None)
        }
        None => {
            let (model, record) = run_stage1(cfg, &prep.data.train)?;
            save_checkpoint(&out.join("stage1.ckpt"), &model)?;
            write_json(&out.join("stage1_record.json"), &record)?;
            let metrics = evaluate(&model, &prep.data.test, &prep.partition)?;
            write_json(&out.join("stage1_metrics.json"), &metrics)?;
            (model, Some(metrics))
        }
    };

    let (model, record) = finetune_stage2_h2t(
        &stage1,
        &prep.data.train,
        &cfg.schedule,
        &cfg.fusion_settings(),
    )?;
    save_checkpoint(&out.join("stage2.ckpt"), &model)?;
    write_json(&out.join("stage2_record.json"), &record)?;
    let metrics = evaluate(&model, &prep.data.test, &prep.partition)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_text(&out.join("metrics.csv"), &metrics.to_csv())?;
    write_manifest(out)?;
    Ok(TrainSummary {
        stage1: stage1_metrics,
        stage2: metrics,
    })
}

/// Writes the configured dataset under `out/data` plus a manifest.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Prepared> {
    cfg.validate()?;
    create_dir(out)?;
    let prep = prepare_data(cfg)?;
    write_config(out, cfg)?;
    write_data(out, &prep.data)?;
    write_json(&out.join("partition.json"), &prep.partition)?;
    write_manifest(out)?;
    Ok(prep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: String,
    pub points: Vec<SweepPoint>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl SweepResult {
    /// Axis values in first-seen order.
    pub fn axis_values(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for p in &self.points {
            if !seen.contains(&p.value.as_str()) {
                seen.push(&p.value);
            }
        }
        seen
    }

    /// Median over seeds of one metric at one axis value. Splits absent from
    /// every run give `None`.
    pub fn median_of(
        &self,
        value: &str,
        metric: impl Fn(&MetricsReport) -> Option<f64>,
    ) -> Option<f64> {
        let v: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.value == value)
            .filter_map(|p| metric(&p.metrics))
            .collect();
        median(&v)
    }

    /// Data rows in run order, then one `median` row per axis value.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |a| format!("{a:.6}"));
        let mut out = format!("{},seed,head,med,tail,all\n", self.axis);
        for p in &self.points {
            let m = &p.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                p.value,
                p.seed,
                fmt(m.head),
                fmt(m.medium),
                fmt(m.tail),
                fmt(Some(m.overall))
            );
        }
        for value in self.axis_values() {
            let _ = writeln!(
                out,
                "{value},median,{},{},{},{}",
                fmt(self.median_of(value, |m| m.head)),
                fmt(self.median_of(value, |m| m.medium)),
                fmt(self.median_of(value, |m| m.tail)),
                fmt(self.median_of(value, |m| Some(m.overall))),
            );
        }
        out
    }
}

/// Runs `count` jobs on up to `workers` threads. Results come back in job
/// order regardless of scheduling; the first failing job (by index) wins.
pub fn run_jobs<T, F>(count: usize, workers: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let r = job(i);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// One stage-II variant of a sweep.
#[derive(Debug, Clone)]
pub struct SweepJob {
    pub value: String,
    pub seed: u64,
    pub fusion: FusionSettings,
}

/// Shared stage I, then one stage-II run per job, each in its own
/// subdirectory of `out/points`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: &str,
    jobs: &[SweepJob],
    out: &Path,
    workers: usize,
) -> Result<SweepResult> {
    cfg.validate()?;
    for j in jobs {
        if !(0.0..=1.0).contains(&j.fusion.p) {
            return Err(Error::Config(format!(
                "p = {} is outside [0, 1]",
                j.fusion.p
            )));
        }
    }
    create_dir(out)?;
    let prep = prepare_data(cfg)?;
    write_config(out, cfg)?;
    write_data(out, &prep.data)?;
    let (stage1, record) = run_stage1(cfg, &prep.data.train)?;
    save_checkpoint(&out.join("stage1.ckpt"), &stage1)?;
    write_json(&out.join("stage1_record.json"), &record)?;

    let points = run_jobs(jobs.len(), workers, |i| {
        let job = &jobs[i];
        let (model, record) =
            finetune_stage2_h2t(&stage1, &prep.data.train, &cfg.schedule, &job.fusion)?;
        let metrics = evaluate(&model, &prep.data.test, &prep.partition)?;
        let dir = out
            .join("points")
            .join(format!("{axis}={}_seed={}", job.value, job.seed));
        create_dir(&dir)?;
        write_json(&dir.join("stage2_record.json"), &record)?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        log::info!(
            "{axis}={} seed={} all={:.4}",
            job.value,
            job.seed,
            metrics.overall
        );
        Ok(SweepPoint {
            value: job.value.clone(),
            seed: job.seed,
            metrics,
        })
    })?;
    let result = SweepResult {
        axis: axis.to_string(),
        points,
    };
    write_text(&out.join("sweep.csv"), &result.to_csv())?;
    write_json(&out.join("sweep.json"), &result)?;
    write_manifest(out)?;
    Ok(result)
}

fn seeded(cfg: &ExperimentConfig, seed: u64) -> FusionSettings {
    FusionSettings {
        seed,
        mask_seed: seed,
        ..cfg.fusion_settings()
    }
}

pub fn format_p(p: f64) -> String {
    format!("{p}")
}

/// Stage-II runs for every `(p, seed)` pair over a single stage-I model.
pub fn cmd_sweep_p(
    cfg: &ExperimentConfig,
    p_values: &[f64],
    seeds: &[u64],
    out: &Path,
    workers: usize,
) -> Result<SweepResult> {
    let jobs: Vec<SweepJob> = p_values
        .iter()
        .flat_map(|&p| {
            seeds.iter().map(move |&seed| SweepJob {
                value: format_p(p),
                seed,
                fusion: FusionSettings {
                    p,
                    ..seeded(cfg, seed)
                },
            })
        })
        .collect();
    run_sweep(cfg, "p", &jobs, out, workers)
}

/// Label of a sampler pair, e.g. `BS+IS`.
pub fn sampler_pair_label(fused: SamplerKind, fusing: SamplerKind) -> String {
    let short = |k: SamplerKind| match k {
        SamplerKind::ClassBalanced => "BS",
        SamplerKind::InstanceWise => "IS",
        SamplerKind::Reverse => "RS",
    };
    format!("{}+{}", short(fused), short(fusing))
}

/// Fused branch fixed to class-balanced sampling; the fusing branch varies.
pub fn cmd_ablate_sampler(
    cfg: &ExperimentConfig,
    kinds: &[SamplerKind],
    seeds: &[u64],
    out: &Path,
    workers: usize,
) -> Result<SweepResult> {
    let jobs: Vec<SweepJob> = kinds
        .iter()
        .flat_map(|&kind| {
            seeds.iter().map(move |&seed| SweepJob {
                value: sampler_pair_label(SamplerKind::ClassBalanced, kind),
                seed,
                fusion: FusionSettings {
                    fused_sampler: SamplerKind::ClassBalanced,
                    fusing_sampler: kind,
                    ..seeded(cfg, seed)
                },
            })
        })
        .collect();
    run_sweep(cfg, "sampler", &jobs, out, workers)
}

/// Sequential strategies run once with the first seed; the random strategy
/// runs once per seed as `random_1..random_n`, with the sampler streams held
/// at the first seed so only the mask varies.
pub fn cmd_ablate_selection(
    cfg: &ExperimentConfig,
    strategies: &[SelectionStrategy],
    seeds: &[u64],
    out: &Path,
    workers: usize,
) -> Result<SweepResult> {
    let Some(&base) = seeds.first() else {
        return Err(Error::Config("at least one seed is required".into()));
    };
    let mut jobs = Vec::new();
    for &strategy in strategies {
        let fusion = FusionSettings {
            strategy,
            ..seeded(cfg, base)
        };
        if strategy == SelectionStrategy::Random {
            for (i, &seed) in seeds.iter().enumerate() {
                jobs.push(SweepJob {
                    value: format!("random_{}", i + 1),
                    seed,
                    fusion: FusionSettings {
                        mask_seed: seed,
                        ..fusion.clone()
                    },
                });
            }
        } else {
            jobs.push(SweepJob {
                value: strategy.name().to_string(),
                seed: base,
                fusion,
            });
        }
    }
    run_sweep(cfg, "strategy", &jobs, out, workers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    /// Head, medium and tail mass of the stage-I tail-sample histogram.
    pub stage1_split_mass: Option<[f64; 3]>,
    pub stage2_split_mass: [f64; 3],
    pub boundary_written: bool,
}

fn histogram_csv(hist: &[f64], partition: &SplitPartition) -> String {
    let mut out = String::from("class,split,frequency\n");
    for (c, h) in hist.iter().enumerate() {
        let _ = writeln!(out, "{c},{},{h}", partition.of(c).name());
    }
    out
}

/// Reads a finished run directory and writes `diagnostics/` inside it.
pub fn cmd_diagnose(run_dir: &Path) -> Result<DiagnoseSummary> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let train = load_dataset(&run_dir.join("data").join("train.h2t"))?;
    let test = load_dataset(&run_dir.join("data").join("test.h2t"))?;
    let partition = cfg.partition(&train.counts)?;
    let stage2 = load_checkpoint(&run_dir.join("stage2.ckpt"), cfg.backbone.clone())?;
    let stage1_path = run_dir.join("stage1.ckpt");
    let stage1 = if stage1_path.exists() {
        Some(load_checkpoint(&stage1_path, cfg.backbone.clone())?)
    } else {
        None
    };
    let out = run_dir.join("diagnostics");
    create_dir(&out)?;

    let has_tail = partition.members(Split::Tail).next().is_some();
    let mut stage1_split_mass = None;
    let mut stage2_split_mass = [0.0; 3];
    if has_tail {
        if let Some(m) = &stage1 {
            let h = prediction_histogram(m, &test, &partition)?;
            write_text(
                &out.join("histogram_stage1.csv"),
                &histogram_csv(&h, &partition),
            )?;
            stage1_split_mass = Some(split_mass(&h, &partition));
        }
        let h = prediction_histogram(&stage2, &test, &partition)?;
        write_text(
            &out.join("histogram_stage2.csv"),
            &histogram_csv(&h, &partition),
        )?;
        stage2_split_mass = split_mass(&h, &partition);
    } else {
        log::warn!("no tail classes under the configured thresholds; histograms skipped");
    }

    let boundary_written = cfg.backbone.in_dims() == 2;
    if boundary_written {
        let (mut lo, mut hi) = ([f32::MAX; 2], [f32::MIN; 2]);
        for i in 0..train.len() {
            for (a, &v) in train.features.row(i).iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        let bounds = GridBounds {
            x_min: lo[0] - 1.0,
            x_max: hi[0] + 1.0,
            y_min: lo[1] - 1.0,
            y_max: hi[1] + 1.0,
        };
        let grid = boundary_grid(&stage2, bounds, 200)?;
        write_text(&out.join("boundary.csv"), &grid.to_csv())?;
        write_text(
            &out.join("boundary.svg"),
            &grid.to_svg(Some((&train.features, &train.labels))),
        )?;
    } else {
        log::warn!(
            "boundary grid skipped: inputs are {}-dimensional, grids need 2",
            cfg.backbone.in_dims()
        );
        write_text(
            &out.join("boundary_skipped.txt"),
            &format!(
                "inputs are {}-dimensional; boundary grids need 2\n",
                cfg.backbone.in_dims()
            ),
        )?;
    }

    let d = cfg.backbone.feature_dim();
    let mut mask_rng = rng::stream(cfg.fusion.mask_seed, "diagnose.mask", 0);
    let mask = select_channels(d, cfg.fusion.p, cfg.fusion.strategy, &mut mask_rng)?;
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |a| format!("{a:.9}"));
    let mut table = String::from(
        "model,head,tail,fused_head,fused_tail,retained_tail,retained_head,fused_gap,retained_gap\n",
    );
    let models = [("stage1", stage1.as_ref()), ("stage2", Some(&stage2))];
    for (name, model) in models {
        let Some(model) = model else { continue };
        for h in partition.members(Split::Head) {
            for t in partition.members(Split::Tail) {
                let f = rationale_measure(model, &train, &mask, h, t)?;
                let _ = writeln!(
                    table,
                    "{name},{h},{t},{},{},{},{},{},{}",
                    fmt(f.fused_head),
                    fmt(f.fused_tail),
                    fmt(f.retained_tail),
                    fmt(f.retained_head),
                    fmt(f.fused_gap),
                    fmt(f.retained_gap)
                );
            }
        }
    }
    write_text(&out.join("rationale.csv"), &table)?;
    dump_embeddings(&out.join("embeddings_train.h2t"), &stage2, &train)?;
    dump_embeddings(&out.join("embeddings_test.h2t"), &stage2, &test)?;

    let summary = DiagnoseSummary {
        stage1_split_mass,
        stage2_split_mass,
        boundary_written,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_manifest(&out)?;
    Ok(summary)
}
