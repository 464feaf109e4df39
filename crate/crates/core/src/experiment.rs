//! Reproducible experiments driven by one TOML document: dataset generation,
//! training, evaluation, the ablation matrix and mask/distance conversion.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//!
//! [dataset]
//! dir = "data/demo"
//! count = 50
//! test_count = 10
//! shape = [32, 32, 32]
//! labeled_fraction = 0.2
//!
//! [train]
//! total_iterations = 300
//! crop_shape = [32, 32, 16]
//! ```
//!
//! Every command writes `resolved_config.toml` next to its outputs; running
//! that file again reproduces them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::io::{self as dio, Role};
use crate::data::{
    generate_synthetic_with, load_split, load_test, split_indices, DatasetSplit,
    Manifest, ManifestEntry, SyntheticStyle,
};
use crate::error::{DtmlError, Result};
use crate::grid::{Shape3, SignedDistanceMap, Spacing3};
use crate::metrics::MetricsReport;
use crate::nn::Head;
use crate::sdm::{compute_sdm, normalize_sdm, sdm_to_soft_mask, TransformConfig, DEFAULT_K};
use crate::trainer::{
    evaluate_cases, evaluate_mask, train, SupervisedMode, TrainConfig, TrainOutputs, Variant,
};

/// Environment variable holding the number of crop-preparation threads.
pub const WORKERS_ENV: &str = "DTML_NUM_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory written by `generate`.
    pub dir: PathBuf,
    /// Manifest read by the other commands; defaults to `dir/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub count: usize,
    pub test_count: usize,
    pub shape: Shape3,
    pub spacing: Spacing3,
    pub labeled_fraction: f64,
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
    /// Load unlabeled masks for analysis. Training never reads them.
    pub diagnostics: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let style = SyntheticStyle::default();
        Self {
            dir: PathBuf::from("data"),
            manifest: None,
            count: 50,
            test_count: 10,
            shape: [32, 32, 32],
            spacing: style.spacing,
            labeled_fraction: 0.2,
            foreground_mean: style.foreground_mean,
            background_mean: style.background_mean,
            texture_amplitude: style.texture_amplitude,
            noise_std: style.noise_std,
            diagnostics: false,
        }
    }
}

impl DatasetConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.dir.join("manifest.json"))
    }

    pub fn style(&self) -> SyntheticStyle {
        SyntheticStyle {
            foreground_mean: self.foreground_mean,
            background_mean: self.background_mean,
            texture_amplitude: self.texture_amplitude,
            noise_std: self.noise_std,
            spacing: self.spacing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Defaults to `out_dir/best.ckpt`, falling back to `out_dir/final.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub threshold: f64,
    /// Head to score; defaults to the one the training variant deploys.
    pub head: Option<HeadName>,
    /// Score the ground truth against itself, bypassing the network.
    pub inject_ground_truth: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            threshold: 0.5,
            head: None,
            inject_ground_truth: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadName {
    Seg,
    Dis,
}

impl From<HeadName> for Head {
    fn from(h: HeadName) -> Head {
        match h {
            HeadName::Seg => Head::Seg,
            HeadName::Dis => Head::Dis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub modes: Vec<SupervisedMode>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            variants: Variant::ALL.to_vec(),
            modes: SupervisedMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MaskToSdm,
    SdmToMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub direction: Direction,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_k() -> f64 {
    DEFAULT_K
}

fn default_threshold() -> f64 {
    0.5
}

/// The whole experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; generation, splitting, initialization and sampling derive
    /// from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    /// The `seed` field here is ignored; the master seed is used.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convert: Option<ConvertConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1337,
            out_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            convert: None,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub k: Option<f64>,
    pub threshold: Option<f64>,
    pub num_workers: Option<usize>,
}

impl Overrides {
    /// Reads the worker count from the environment.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            let n = v.trim().parse().map_err(|_| {
                DtmlError::InvalidConfig(format!("{WORKERS_ENV} must be an integer, got {v:?}"))
            })?;
            self.num_workers = Some(n);
        }
        Ok(self)
    }
}

enum Stream {
    Generate = 1,
    Split = 2,
}

fn derived_seed(master: u64, s: Stream) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(s as u64);
    r.gen()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DtmlError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DtmlError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies overrides and pushes the master seed into the training
    /// section.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(v) = o.variant {
            self.train.variant = v;
        }
        if let Some(k) = o.k {
            self.train.k = k;
            if let Some(c) = &mut self.convert {
                c.k = k;
            }
        }
        if let Some(t) = o.threshold {
            self.eval.threshold = t;
            self.train.threshold = t;
            if let Some(c) = &mut self.convert {
                c.threshold = t;
            }
        }
        if let Some(n) = o.num_workers {
            self.train.num_workers = n;
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if !(d.labeled_fraction > 0.0 && d.labeled_fraction < 1.0) {
            return Err(DtmlError::InvalidConfig(format!(
                "labeled_fraction must lie in (0, 1), got {}",
                d.labeled_fraction
            )));
        }
        if d.test_count > d.count {
            return Err(DtmlError::InvalidConfig(format!(
                "test_count {} exceeds count {}",
                d.test_count, d.count
            )));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(DtmlError::InvalidConfig(format!(
                "threshold must lie in (0, 1), got {}",
                self.eval.threshold
            )));
        }
        if self.ablate.seeds.is_empty() {
            return Err(DtmlError::InvalidConfig("ablate.seeds is empty".into()));
        }
        if let Some(c) = &self.convert {
            TransformConfig::new(c.k)?;
        }
        self.train.validate()
    }

    /// SHA-256 of the resolved TOML, reported alongside results.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DtmlError::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| DtmlError::io(&path, e))
    }
}

/// Writes synthetic images, masks and a manifest under `dataset.dir`. The
/// last `test_count` cases form the test partition; the rest are split by
/// `labeled_fraction`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let d = &cfg.dataset;
    let samples = generate_synthetic_with(
        d.count,
        d.shape,
        derived_seed(cfg.seed, Stream::Generate),
        &d.style(),
    )?;
    let n_train = d.count - d.test_count;
    let (labeled, unlabeled) = split_indices(
        n_train,
        d.labeled_fraction,
        derived_seed(cfg.seed, Stream::Split),
    )?;
    let entry = |i: usize| ManifestEntry {
        id: format!("case_{i:03}"),
        image: PathBuf::from(format!("images/case_{i:03}.raw")),
        mask: Some(PathBuf::from(format!("masks/case_{i:03}.raw"))),
    };
    for (i, (v, m)) in samples.iter().enumerate() {
        let e = entry(i);
        dio::write_volume(&d.dir.join(&e.image), v)?;
        dio::write_mask(&d.dir.join(e.mask.as_ref().expect("set above")), m)?;
    }
    let manifest = Manifest {
        labeled: labeled.into_iter().map(entry).collect(),
        unlabeled: unlabeled.into_iter().map(entry).collect(),
        test: (n_train..d.count).map(entry).collect(),
    };
    manifest.save(&d.dir.join("manifest.json"))?;
    cfg.write_snapshot(&d.dir)?;
    Ok(manifest)
}

/// Summary of a finished training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub best_iteration: Option<usize>,
    pub best_labeled_dice: Option<f64>,
    pub config_hash: String,
}

/// Trains on the manifest's labeled and unlabeled partitions and writes
/// `final.ckpt`, `best.ckpt`, `loss_log.csv` and the config snapshot into
/// `out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let split = load_split(&cfg.dataset.manifest_path(), cfg.dataset.diagnostics)?;
    cfg.write_snapshot(&cfg.out_dir)?;
    let outputs = TrainOutputs {
        dir: cfg.out_dir.clone(),
    };
    let outcome = train(&split, &cfg.train, Some(&outputs))?;
    let summary = TrainSummary {
        iterations: outcome.state.iteration,
        best_iteration: outcome.best.as_ref().map(|b| b.iteration),
        best_labeled_dice: outcome.best.as_ref().map(|b| b.labeled_dice),
        config_hash: cfg.hash(),
    };
    let path = cfg.out_dir.join("train_summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| DtmlError::io(&path, e))?;
    Ok(summary)
}

/// Per-case metrics and their mean and standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub head: HeadName,
    pub threshold: f64,
    pub cases: Vec<(String, MetricsReport)>,
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

fn summarize(reports: &[MetricsReport]) -> (MetricsReport, MetricsReport) {
    let n = reports.len().max(1) as f64;
    let col = |f: fn(&MetricsReport) -> f64| {
        let mean = reports.iter().map(f).sum::<f64>() / n;
        let var = reports.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (d, j, a, h) = (
        col(|r| r.dice),
        col(|r| r.jaccard),
        col(|r| r.asd),
        col(|r| r.hd95),
    );
    (
        MetricsReport {
            dice: d.0,
            jaccard: j.0,
            asd: a.0,
            hd95: h.0,
        },
        MetricsReport {
            dice: d.1,
            jaccard: j.1,
            asd: a.1,
            hd95: h.1,
        },
    )
}

fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let err = |e: csv::Error| DtmlError::format(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["case", "dice", "jaccard", "asd", "hd95"]).map_err(err)?;
    for (id, r) in &report.cases {
        w.write_record([
            id.clone(),
            r.dice.to_string(),
            r.jaccard.to_string(),
            r.asd.to_string(),
            r.hd95.to_string(),
        ])
        .map_err(err)?;
    }
    let (m, s) = (&report.mean, &report.std);
    w.write_record([
        "mean±std".to_string(),
        format!("{:.6}±{:.6}", m.dice, s.dice),
        format!("{:.6}±{:.6}", m.jaccard, s.jaccard),
        format!("{:.6}±{:.6}", m.asd, s.asd),
        format!("{:.6}±{:.6}", m.hd95, s.hd95),
    ])
    .map_err(err)?;
    w.flush().map_err(|e| DtmlError::io(path, e))
}

fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = &cfg.eval.checkpoint {
        return p.clone();
    }
    let best = cfg.out_dir.join("best.ckpt");
    if best.exists() {
        best
    } else {
        cfg.out_dir.join("final.ckpt")
    }
}

/// Scores a checkpoint on the test partition and writes `eval.csv` and
/// `eval.json` into `out_dir`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let head = cfg.eval.head.unwrap_or(match cfg.train.variant.eval_head() {
        Head::Seg => HeadName::Seg,
        Head::Dis => HeadName::Dis,
    });
    let test = load_test(&cfg.dataset.manifest_path())?;
    if test.is_empty() {
        return Err(DtmlError::EmptyPartition("manifest has no test cases".into()));
    }
    let (checkpoint, reports) = if cfg.eval.inject_ground_truth {
        let reports = test
            .iter()
            .map(|c| evaluate_mask(&c.mask, &c.mask))
            .collect::<Result<Vec<_>>>()?;
        (None, reports)
    } else {
        let path = default_checkpoint(cfg);
        let ckpt = Checkpoint::load(&path)?;
        let params = match head {
            HeadName::Seg => &ckpt.seg,
            HeadName::Dis => &ckpt.dis,
        };
        let mut settings = cfg.train.inference();
        settings.threshold = cfg.eval.threshold;
        (Some(path), evaluate_cases(params, head.into(), &test, &settings)?)
    };
    let (mean, std) = summarize(&reports);
    let report = EvalReport {
        config_hash: cfg.hash(),
        checkpoint,
        head,
        threshold: cfg.eval.threshold,
        cases: test.iter().map(|c| c.id.clone()).zip(reports).collect(),
        mean,
        std,
    };
    cfg.write_snapshot(&cfg.out_dir)?;
    write_eval_csv(&cfg.out_dir.join("eval.csv"), &report)?;
    let json = cfg.out_dir.join("eval.json");
    fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| DtmlError::io(&json, e))?;
    Ok(report)
}

/// One cell of the ablation matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// `None` for the segmentation-only baseline, which has no `M_d`.
    pub mode: Option<SupervisedMode>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

impl AblationRow {
    pub fn label(&self) -> String {
        match self.mode {
            None => self.variant.name().to_string(),
            Some(m) => format!("{}({})", self.variant.name(), m.name()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

/// Cells of the matrix: the baseline once, the others once per mode.
pub fn ablation_cells(cfg: &AblateConfig) -> Vec<(Variant, Option<SupervisedMode>)> {
    let mut cells = Vec::new();
    for &v in &cfg.variants {
        if v == Variant::MsOnly {
            cells.push((v, None));
        } else {
            cells.extend(cfg.modes.iter().map(|&m| (v, Some(m))));
        }
    }
    cells
}

/// Trains one cell for one seed and scores its selected checkpoint, at
/// checkpoint precision, on the test partition at `threshold`.
pub fn run_cell(
    split: &DatasetSplit,
    base: &TrainConfig,
    variant: Variant,
    mode: Option<SupervisedMode>,
    seed: u64,
    threshold: f64,
    log_dir: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    let mut tc = base.clone();
    tc.variant = variant;
    tc.seed = seed;
    if let Some(m) = mode {
        tc.supervised_mode_md = m;
    }
    let outputs = log_dir.map(|d| TrainOutputs { dir: d.to_path_buf() });
    let outcome = train(split, &tc, outputs.as_ref())?;
    let chosen = outcome.chosen();
    let head = variant.eval_head();
    let params = match head {
        Head::Seg => chosen.seg.rounded_to_f32(),
        Head::Dis => chosen.dis.rounded_to_f32(),
    };
    let mut settings = tc.inference();
    settings.threshold = threshold;
    evaluate_cases(&params, head, &split.test, &settings)
}

/// Runs the ablation matrix over `ablate.seeds` and writes `ablation.csv`
/// and `ablation.json`. `--variant` narrows the matrix to one variant.
pub fn cmd_ablate(cfg: &ExperimentConfig, only: Option<Variant>) -> Result<AblationReport> {
    let split = load_split(&cfg.dataset.manifest_path(), false)?;
    if split.test.is_empty() {
        return Err(DtmlError::EmptyPartition("manifest has no test cases".into()));
    }
    cfg.write_snapshot(&cfg.out_dir)?;
    let mut ab = cfg.ablate.clone();
    if let Some(v) = only {
        ab.variants = vec![v];
    }
    let mut rows = Vec::new();
    for (variant, mode) in ablation_cells(&ab) {
        let mut per_seed = Vec::new();
        for &seed in &ab.seeds {
            let name = format!(
                "{}_{}_seed{seed}",
                variant.name(),
                mode.map_or("none", SupervisedMode::name)
            );
            log::info!("ablation cell {name}");
            let dir = cfg.out_dir.join("cells").join(&name);
            let reports = run_cell(
                &split,
                &cfg.train,
                variant,
                mode,
                seed,
                cfg.eval.threshold,
                Some(&dir),
            )?;
            let (mean, _) = summarize(&reports);
            per_seed.push(mean);
        }
        let (mean, std) = summarize(&per_seed);
        rows.push(AblationRow {
            variant,
            mode,
            seeds: ab.seeds.clone(),
            per_seed,
            mean,
            std,
        });
    }
    let report = AblationReport {
        config_hash: cfg.hash(),
        rows,
    };
    write_ablation_csv(&cfg.out_dir.join("ablation.csv"), &report)?;
    let json = cfg.out_dir.join("ablation.json");
    fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| DtmlError::io(&json, e))?;
    Ok(report)
}

fn write_ablation_csv(path: &Path, report: &AblationReport) -> Result<()> {
    let err = |e: csv::Error| DtmlError::format(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "method", "seeds", "dice", "dice_std", "jaccard", "asd", "hd95",
    ])
    .map_err(err)?;
    for r in &report.rows {
        w.write_record([
            r.label(),
            r.seeds.len().to_string(),
            r.mean.dice.to_string(),
            r.std.dice.to_string(),
            r.mean.jaccard.to_string(),
            r.mean.asd.to_string(),
            r.mean.hd95.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| DtmlError::io(path, e))
}

/// Converts a mask to a normalized signed distance map, or a signed
/// distance map to the thresholded soft mask.
pub fn cmd_convert(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let c = cfg
        .convert
        .as_ref()
        .ok_or_else(|| DtmlError::InvalidConfig("missing [convert] section".into()))?;
    let transform = TransformConfig::new(c.k)?;
    match c.direction {
        Direction::MaskToSdm => {
            let mask = dio::read_mask(&c.input)?;
            let sdm = normalize_sdm(&compute_sdm(&mask)?)?;
            dio::write_f32(&c.output, sdm.geometry(), sdm.data(), Role::Image)?;
        }
        Direction::SdmToMask => {
            let (_, geom, values) = dio::read_values(&c.input)?;
            let normalized = values.iter().all(|v| v.abs() <= 1.0);
            let sdm = SignedDistanceMap::new(geom, values, normalized)
                .map_err(|e| DtmlError::format(&c.input, e))?;
            let mask = crate::grid::binarize(&sdm_to_soft_mask(&sdm, transform), c.threshold)?;
            dio::write_mask(&c.output, &mask)?;
        }
    }
    if let Some(dir) = c.output.parent() {
        cfg.write_snapshot(dir)?;
    }
    Ok(c.output.clone())
}

/// Exit status for an error: 2 for configuration problems, 3 otherwise.
pub fn exit_code(e: &DtmlError) -> i32 {
    match e {
        DtmlError::InvalidConfig(_) | DtmlError::InvalidDescriptor(_) => 2,
        _ => 3,
    }
}
