//! Sweep orchestration: a declarative experiment configuration, model
//! training from it, resumable grid sweeps producing per-cell failure rates
//! and Fréchet distances, and the tables and correlations built from the
//! resulting report.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counting::Counter;
use crate::diffusion::{NoiseSchedule, ScheduleKind, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::jdm::{joint_training_set, train_jdm, JdmConfig, JointSample};
use crate::metrics::{extract_features, extractor_by_name, failure_rates, frechet_distance, pearson, spearman, CorrelationResult};
use crate::pipeline::{evaluate_samples, Resolution};
use crate::rng::mix_label;
use crate::sampler::{sample, InitNoise, SamplerConfig, SolverKind};
use crate::score::{load_checkpoint, save_checkpoint, Architecture, Skip, TinyNet, TrainConfig, TrainReport};
use crate::tensor::Tensor;
use crate::toyshape::{generate_dataset, generate_gray_dataset, CountProfile, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// White shapes on black.
    Binary,
    /// Shapes of random intensity on a noisy gray background.
    Gray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub profile: String,
    pub variant: Variant,
    /// Training images; also the pool for diffused initial noise.
    pub size: usize,
    pub image_size: usize,
    /// Average-pooling factor from image to model resolution.
    pub factor: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { profile: "paper".into(), variant: Variant::Binary, size: 20_000, image_size: 64, factor: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, steps: DEFAULT_STEPS, beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Relative paths resolve against the output directory.
    pub checkpoint: PathBuf,
    /// Train on image + occupancy mask.
    pub joint: bool,
    pub hidden: Vec<usize>,
    /// Width of the per-element branch (0 disables it).
    pub pointwise: usize,
    pub time_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { checkpoint: "model.ck".into(), joint: false, hidden: vec![512, 512], pointwise: 32, time_dim: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// 0 disables weight averaging.
    pub ema: f64,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { steps: 20_000, lr: 1e-3, batch: 128, ema: 0.999, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub solvers: Vec<SolverKind>,
    pub steps: Vec<usize>,
    pub inits: Vec<InitNoise>,
    pub seeds: Vec<u64>,
    /// Initial-noise settings for ancestral cells (run at T steps); empty
    /// skips the ancestral sampler.
    pub ancestral: Vec<InitNoise>,
    pub samples: usize,
    pub features: String,
    /// Training images the Fréchet distance compares against.
    pub fid_reference: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            solvers: vec![SolverKind::Solver1, SolverKind::Solver2],
            steps: vec![25, 50, 100],
            inits: vec![InitNoise::Normal, InitNoise::Diffused],
            seeds: vec![0, 1, 2],
            ancestral: vec![InitNoise::Normal],
            samples: 4000,
            features: "pooled".into(),
            fid_reference: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// Everything a sweep needs; parsed from key = value text with `[section]`
/// headers (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub master_seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.profile()?;
        self.resolution().validate()?;
        let s = &self.sweep;
        if s.seeds.is_empty() || (s.ancestral.is_empty() && (s.solvers.is_empty() || s.steps.is_empty() || s.inits.is_empty())) {
            return Err(Error::InvalidConfig("sweep grid is empty".into()));
        }
        let mut seeds = s.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != s.seeds.len() {
            return Err(Error::InvalidConfig("sweep seeds must be distinct".into()));
        }
        if s.solvers.iter().any(|k| !matches!(k, SolverKind::Solver1 | SolverKind::Solver2)) {
            return Err(Error::InvalidConfig("grid solvers must be solver1 or solver2; use `ancestral` for the ancestral sampler".into()));
        }
        if s.steps.contains(&0) {
            return Err(Error::InvalidConfig("step counts must be positive".into()));
        }
        let dim = extractor_by_name(&s.features)?.dim();
        if s.samples <= dim || s.fid_reference <= dim {
            return Err(Error::InvalidConfig(format!("samples and fid_reference must exceed the feature dimension {dim}")));
        }
        if s.fid_reference > self.dataset.size {
            return Err(Error::InvalidConfig("fid_reference exceeds the dataset size".into()));
        }
        if self.model.joint && self.dataset.variant != Variant::Gray {
            return Err(Error::InvalidConfig("joint models need the gray dataset variant".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::build(s.kind, s.steps, s.beta_min, s.beta_max)
    }

    pub fn profile(&self) -> Result<CountProfile> {
        CountProfile::by_name(&self.dataset.profile)
    }

    pub fn resolution(&self) -> Resolution {
        Resolution { image_size: self.dataset.image_size, factor: self.dataset.factor }
    }

    pub fn channels(&self) -> usize {
        if self.model.joint {
            JointSample::CHANNELS
        } else {
            1
        }
    }

    pub fn counter(&self) -> Counter {
        match self.dataset.variant {
            Variant::Binary => Counter::default(),
            Variant::Gray => Counter::gray(),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.model.checkpoint.is_absolute() {
            self.model.checkpoint.clone()
        } else {
            self.output.dir.join(&self.model.checkpoint)
        }
    }

    /// Seed of the named sub-stream (`dataset`, `init`, `train`, `cell:…`).
    pub fn stream_seed(&self, label: &str) -> u64 {
        mix_label(self.master_seed, label)
    }

    /// Grid cells in report order: ODE cells (solver × steps × init × seed),
    /// then ancestral cells at T steps.
    pub fn cells(&self) -> Vec<Cell> {
        let s = &self.sweep;
        let mut out = Vec::new();
        for &solver in &s.solvers {
            for &steps in &s.steps {
                for &init in &s.inits {
                    for &seed in &s.seeds {
                        out.push(Cell { solver, steps, init, seed });
                    }
                }
            }
        }
        for &init in &s.ancestral {
            for &seed in &s.seeds {
                out.push(Cell { solver: SolverKind::Ancestral, steps: self.schedule.steps, init, seed });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub solver: SolverKind,
    pub steps: usize,
    pub init: InitNoise,
    pub seed: u64,
}

impl Cell {
    /// Identifies the configuration independent of the seed.
    pub fn config_id(&self) -> String {
        format!("{}-{}-{}", self.solver, self.steps, self.init)
    }
}

/// Training tensors in model space and full-resolution reference images.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub items: Vec<Tensor>,
    pub images: Vec<RasterImage>,
}

pub fn build_training_data(config: &ExperimentConfig) -> Result<TrainingData> {
    let d = &config.dataset;
    let profile = config.profile()?;
    let seed = config.stream_seed("dataset");
    let res = config.resolution();
    match (d.variant, config.model.joint) {
        (Variant::Binary, _) => {
            let data = generate_dataset(d.size, &profile, seed, d.image_size)?;
            Ok(TrainingData { items: res.encode_all(&data.images)?, images: data.images })
        }
        (Variant::Gray, false) => {
            let data = generate_gray_dataset(d.size, &profile, seed, d.image_size)?;
            Ok(TrainingData { items: res.encode_all(&data.images)?, images: data.images })
        }
        (Variant::Gray, true) => {
            let data = generate_gray_dataset(d.size, &profile, seed, d.image_size)?;
            let items = joint_training_set(&data, &res)?.into_iter().map(|j| j.tensor).collect();
            Ok(TrainingData { items, images: data.images })
        }
    }
}

/// Network layout for the configured data; the skip statistics come from
/// the training tensors.
pub fn architecture(config: &ExperimentConfig, data: &TrainingData) -> Result<Architecture> {
    let m = &config.model;
    let dim = config.channels() * config.resolution().model_pixels();
    Ok(Architecture {
        time_dim: m.time_dim,
        channels: config.channels(),
        skip: Some(Skip::from_data(&data.items)?),
        pointwise: m.pointwise,
        ..Architecture::mlp(dim, m.hidden.clone())
    })
}

/// Joint models go through [`train_jdm`]; both paths build the same
/// architecture from the same seeds.
pub fn train_model(config: &ExperimentConfig, data: &TrainingData) -> Result<(TinyNet, TrainReport)> {
    let t = &config.train;
    let tc = TrainConfig {
        lr: t.lr,
        steps: t.steps,
        batch: t.batch,
        seed: config.stream_seed("train"),
        clip_norm: t.clip_norm,
        ema_decay: (t.ema > 0.0).then_some(t.ema),
        validation_size: 256,
        log_every: 500,
    };
    let schedule = config.schedule()?;
    if config.model.joint {
        let side = config.resolution().model_side();
        let joint: Vec<JointSample> =
            data.items.iter().map(|t| JointSample { height: side, width: side, tensor: t.clone() }).collect();
        let jc = JdmConfig { hidden: config.model.hidden.clone(), pointwise: config.model.pointwise, time_dim: config.model.time_dim, init_seed: config.stream_seed("init") };
        let (net, report) = train_jdm(&joint, &schedule, &jc, &tc)?;
        if net.architecture() != &architecture(config, data)? {
            return Err(Error::InvalidConfig("joint architecture differs from the configured one".into()));
        }
        return Ok((net, report));
    }
    let net = TinyNet::init(architecture(config, data)?, config.stream_seed("init"))?;
    net.train(&data.items, &schedule, &tc)
}

/// Trains and writes the checkpoint to the configured path.
pub fn train_and_save(config: &ExperimentConfig) -> Result<(TinyNet, TrainReport)> {
    let data = build_training_data(config)?;
    let (net, report) = train_model(config, &data)?;
    let path = config.checkpoint_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&net, &path)?;
    Ok((net, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_id: String,
    pub solver: SolverKind,
    pub steps: usize,
    pub init: InitNoise,
    pub seed: u64,
    pub chr: f64,
    pub ncfr: f64,
    pub tfr: f64,
    pub fid: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["config_id", "solver", "steps", "init", "seed", "chr", "ncfr", "tfr", "fid", "n_samples"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        for row in &rows {
            let ok = [row.chr, row.ncfr, row.tfr].iter().all(|v| (0.0..=1.0).contains(v));
            if !ok {
                return Err(Error::InvalidConfig(format!("rates outside [0, 1] in row {}", row.config_id)));
            }
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(fs::File::open(path)?)
    }
}

/// Seed-averaged rates of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub config_id: String,
    pub solver: SolverKind,
    pub steps: usize,
    pub init: InitNoise,
    pub seeds: usize,
    pub chr: f64,
    pub ncfr: f64,
    pub tfr: f64,
    pub fid: f64,
    pub n_samples: usize,
}

/// Means over seeds, in order of each configuration's first row.
pub fn cell_means(report: &ExperimentReport) -> Vec<CellMean> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for r in &report.rows {
        let key = format!("{}|{}|{}|{}", r.config_id, r.solver, r.steps, r.init);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .iter()
        .map(|k| {
            let g = &groups[k];
            let n = g.len() as f64;
            let mean = |f: fn(&ReportRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            CellMean {
                config_id: g[0].config_id.clone(),
                solver: g[0].solver,
                steps: g[0].steps,
                init: g[0].init,
                seeds: g.len(),
                chr: mean(|r| r.chr),
                ncfr: mean(|r| r.ncfr),
                tfr: mean(|r| r.tfr),
                fid: mean(|r| r.fid),
                n_samples: g.iter().map(|r| r.n_samples).sum(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub report: ExperimentReport,
    /// Cells that failed; the report then holds only the completed rows.
    pub failures: Vec<CellFailure>,
    /// Cells served from the cache of an earlier run.
    pub reused: usize,
    pub report_path: PathBuf,
}

impl SweepOutcome {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Shared, read-only state of one sweep.
struct SweepContext<'a> {
    config: &'a ExperimentConfig,
    model: &'a TinyNet,
    schedule: NoiseSchedule,
    profile: CountProfile,
    data: TrainingData,
    reference: Vec<Vec<f64>>,
}

fn run_cell(ctx: &SweepContext<'_>, cell: &Cell) -> Result<ReportRow> {
    let cfg = ctx.config;
    let seed = cfg.stream_seed(&format!("cell:{}:{}", cell.config_id(), cell.seed));
    let sc = SamplerConfig::new(cell.solver, cell.steps, cell.init, seed).with_samples(cfg.sweep.samples);
    let out = sample(ctx.model, &sc, &ctx.schedule, &ctx.data.items)?;
    let res = cfg.resolution();
    let verdicts = evaluate_samples(&out.samples, cfg.channels(), &res, &cfg.counter(), &ctx.profile)?;
    let rates = failure_rates(&verdicts)?;
    let extractor = extractor_by_name(&cfg.sweep.features)?;
    let images = res.decode_samples(&out.samples, cfg.channels())?;
    let fid = frechet_distance(&extract_features(extractor.as_ref(), &images), &ctx.reference)?;
    Ok(ReportRow {
        config_id: cell.config_id(),
        solver: cell.solver,
        steps: cell.steps,
        init: cell.init,
        seed: cell.seed,
        chr: rates.chr,
        ncfr: rates.ncfr,
        tfr: rates.tfr,
        fid,
        n_samples: rates.n,
    })
}

/// Content hash of everything that determines a cell's row.
fn cell_hash(config: &ExperimentConfig, checkpoint: &[u8], cell: &Cell) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        master_seed: u64,
        dataset: &'a DatasetSection,
        schedule: &'a ScheduleSection,
        joint: bool,
        samples: usize,
        features: &'a str,
        fid_reference: usize,
        cell: &'a Cell,
    }
    let key = Key {
        master_seed: config.master_seed,
        dataset: &config.dataset,
        schedule: &config.schedule,
        joint: config.model.joint,
        samples: config.sweep.samples,
        features: &config.sweep.features,
        fid_reference: config.sweep.fid_reference,
        cell,
    };
    let mut h = Sha256::new();
    h.update(Sha256::digest(checkpoint));
    h.update(serde_json::to_vec(&key)?);
    Ok(hex::encode(h.finalize()))
}

/// Runs every grid cell against the configured checkpoint. Completed cells
/// are cached under `<output>/cells/` by content hash, so an interrupted
/// sweep resumes where it stopped and a rerun reproduces the report bytes.
/// The report is written to `<output>/report.csv`, or to
/// `report.partial.csv` when some cell failed.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let ck_path = config.checkpoint_path();
    if !ck_path.exists() {
        return Err(Error::MissingCheckpoint(ck_path));
    }
    let checkpoint = fs::read(&ck_path)?;
    let model = load_checkpoint(&ck_path)?;
    let data = build_training_data(config)?;
    if model.architecture().dim != data.items[0].len() {
        return Err(Error::DimensionMismatch { expected: data.items[0].len(), got: model.architecture().dim });
    }
    let extractor = extractor_by_name(&config.sweep.features)?;
    let reference = extract_features(extractor.as_ref(), &data.images[..config.sweep.fid_reference]);
    let ctx = SweepContext { config, model: &model, schedule: config.schedule()?, profile: config.profile()?, data, reference };

    let cache = config.output.dir.join("cells");
    fs::create_dir_all(&cache)?;
    let mut report = ExperimentReport::default();
    let mut failures = Vec::new();
    let mut reused = 0;
    for cell in config.cells() {
        let path = cache.join(format!("{}.json", cell_hash(config, &checkpoint, &cell)?));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(row) = serde_json::from_str::<ReportRow>(&text) {
                report.rows.push(row);
                reused += 1;
                continue;
            }
        }
        log::info!("cell {} seed {}", cell.config_id(), cell.seed);
        match run_cell(&ctx, &cell) {
            Ok(row) => {
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, serde_json::to_string(&row)?)?;
                fs::rename(&tmp, &path)?;
                report.rows.push(row);
            }
            Err(e) => failures.push(CellFailure { cell, error: e.to_string() }),
        }
    }
    let name = if failures.is_empty() { "report.csv" } else { "report.partial.csv" };
    let report_path = config.output.dir.join(name);
    report.save(&report_path)?;
    Ok(SweepOutcome { report, failures, reused, report_path })
}

/// Seed-averaged table with one line per (solver, steps) and the two
/// initial-noise settings side by side.
pub fn table1(report: &ExperimentReport) -> Vec<CellMean> {
    let mut means = cell_means(report);
    means.sort_by(|a, b| (a.solver, a.steps, a.init).cmp(&(b.solver, b.steps, b.init)));
    means
}

pub fn table1_csv<W: Write>(means: &[CellMean], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in means {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn table1_text(means: &[CellMean]) -> String {
    let mut rows: BTreeMap<(SolverKind, usize), BTreeMap<InitNoise, &CellMean>> = BTreeMap::new();
    for m in means {
        rows.entry((m.solver, m.steps)).or_default().insert(m.init, m);
    }
    let mut s = format!(
        "{:<10} {:>6} | {:>9} {:>9} | {:>9} {:>9} | {:>9} {:>9} | {:>9} {:>9}\n",
        "solver", "steps", "CHR dif", "CHR nor", "NCFR dif", "NCFR nor", "TFR dif", "TFR nor", "FID dif", "FID nor"
    );
    let cell = |v: Option<f64>, pct: bool| match v {
        Some(v) if pct => format!("{:>9.2}", 100.0 * v),
        Some(v) => format!("{v:>9.3}"),
        None => format!("{:>9}", "-"),
    };
    for ((solver, steps), by_init) in &rows {
        let get = |i: InitNoise, f: fn(&CellMean) -> f64| by_init.get(&i).map(|m| f(m));
        let (d, n) = (InitNoise::Diffused, InitNoise::Normal);
        s.push_str(&format!(
            "{:<10} {:>6} | {} {} | {} {} | {} {} | {} {}\n",
            solver.to_string(),
            steps,
            cell(get(d, |m| m.chr), true),
            cell(get(n, |m| m.chr), true),
            cell(get(d, |m| m.ncfr), true),
            cell(get(n, |m| m.ncfr), true),
            cell(get(d, |m| m.tfr), true),
            cell(get(n, |m| m.tfr), true),
            cell(get(d, |m| m.fid), false),
            cell(get(n, |m| m.fid), false),
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Pearson,
    PearsonInclAncestral,
    Spearman,
    SpearmanInclAncestral,
}

/// One line of the correlation table: each failure rate against FID across
/// seed-averaged configurations. Undefined correlations (constant input,
/// too few configurations) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub measure: Measure,
    pub n: usize,
    pub chr_r: Option<f64>,
    pub chr_p: Option<f64>,
    pub ncfr_r: Option<f64>,
    pub ncfr_p: Option<f64>,
    pub tfr_r: Option<f64>,
    pub tfr_p: Option<f64>,
}

pub fn correlate(report: &ExperimentReport) -> Vec<CorrelationRow> {
    let means = cell_means(report);
    let mut out = Vec::new();
    for (incl, p, s) in [(false, Measure::Pearson, Measure::Spearman), (true, Measure::PearsonInclAncestral, Measure::SpearmanInclAncestral)] {
        let pts: Vec<&CellMean> = means.iter().filter(|m| incl || m.solver != SolverKind::Ancestral).collect();
        let fid: Vec<f64> = pts.iter().map(|m| m.fid).collect();
        for (measure, f) in [(p, pearson as fn(&[f64], &[f64]) -> Result<CorrelationResult>), (s, spearman)] {
            let pair = |g: fn(&CellMean) -> f64| {
                let xs: Vec<f64> = pts.iter().map(|m| g(m)).collect();
                f(&xs, &fid).ok().map(|c| (c.coefficient, c.p_value))
            };
            let (chr, ncfr, tfr) = (pair(|m| m.chr), pair(|m| m.ncfr), pair(|m| m.tfr));
            out.push(CorrelationRow {
                measure,
                n: pts.len(),
                chr_r: chr.map(|c| c.0),
                chr_p: chr.map(|c| c.1),
                ncfr_r: ncfr.map(|c| c.0),
                ncfr_p: ncfr.map(|c| c.1),
                tfr_r: tfr.map(|c| c.0),
                tfr_p: tfr.map(|c| c.1),
            });
        }
    }
    out.sort_by_key(|r| r.measure as u8);
    out
}

pub fn correlations_csv<W: Write>(rows: &[CorrelationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn correlations_text(rows: &[CorrelationRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| format!("{:>9}", "-"), |v| format!("{v:>9.4}"));
    let mut s = format!(
        "{:<26} {:>3} | {:>9} {:>9} | {:>9} {:>9} | {:>9} {:>9}\n",
        "measure", "n", "CHR r", "p", "NCFR r", "p", "TFR r", "p"
    );
    for r in rows {
        let name = match r.measure {
            Measure::Pearson => "pearson",
            Measure::PearsonInclAncestral => "pearson (incl. ancestral)",
            Measure::Spearman => "spearman",
            Measure::SpearmanInclAncestral => "spearman (incl. ancestral)",
        };
        s.push_str(&format!(
            "{:<26} {:>3} | {} {} | {} {} | {} {}\n",
            name,
            r.n,
            f(r.chr_r),
            f(r.chr_p),
            f(r.ncfr_r),
            f(r.ncfr_p),
            f(r.tfr_r),
            f(r.tfr_p)
        ));
    }
    s
}
