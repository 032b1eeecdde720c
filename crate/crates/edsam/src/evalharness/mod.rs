//! Experiment orchestration: run the full pipeline over a grid of
//! (transform, budget, variants-per-source) cells and a list of seeds,
//! aggregate the accuracy metrics, and emit reports.
//!
//! The emitted [`Report`] is a pure function of the configuration: no
//! wall-clock data goes into it (timings live in the run manifest), and
//! all maps are ordered, so two runs of the same config serialize to
//! identical bytes.

mod report;

pub use report::{emit_report, write_manifest, ReportFormat};

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::advgen::{generate_adversarial, generate_random, AdaConfig, GenConfig};
use crate::contrastive::{
    linear_probe, train_baseline, train_edsam, zero_shot, ContrastiveModel, TrainConfig,
};
use crate::datagen::{gen_dataset_seeded, shift_domain, Dataset, DomainSpec, ShiftName, ALL_SHIFTS};
use crate::diffusion::{train_denoiser, Denoiser, DiffusionTrainConfig, ScheduleParams};
use crate::error::{Error, Result};
use crate::{Real, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    /// Baseline contrastive training, no generated samples.
    None,
    /// Inversion + budgeted transport + decoding.
    Transport,
    /// Fresh `N(rho*1, I)` latents, ignoring the source.
    Random,
    /// Iterative gradient-ascent perturbation during training.
    Ada,
}

impl TransformKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::Transport => "transport",
            TransformKind::Random => "random",
            TransformKind::Ada => "ada",
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TransformKind::None),
            "transport" => Ok(TransformKind::Transport),
            "random" => Ok(TransformKind::Random),
            "ada" => Ok(TransformKind::Ada),
            other => Err(Error::invalid(format!(
                "unknown transform '{other}' (expected none|transport|random|ada)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetCfg {
    pub spec: DomainSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub shifts: Vec<ShiftName>,
}

impl Default for DatasetCfg {
    fn default() -> Self {
        DatasetCfg {
            spec: DomainSpec::default(),
            n_train: 400,
            n_test: 400,
            shifts: ALL_SHIFTS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenGrid {
    pub rhos: Vec<Real>,
    pub ms: Vec<usize>,
    pub transforms: Vec<TransformKind>,
    pub ddim_steps: usize,
    pub ada: AdaConfig,
}

impl Default for GenGrid {
    fn default() -> Self {
        GenGrid {
            rhos: vec![0.5],
            ms: vec![10],
            transforms: vec![TransformKind::None, TransformKind::Transport],
            ddim_steps: 10,
            ada: AdaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetCfg,
    pub schedule: ScheduleParams,
    pub diffusion: DiffusionTrainConfig,
    pub generation: GenGrid,
    pub contrastive: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetCfg::default(),
            schedule: ScheduleParams::default(),
            diffusion: DiffusionTrainConfig::default(),
            generation: GenGrid::default(),
            contrastive: TrainConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("experiment needs at least one seed"));
        }
        if self.generation.transforms.is_empty() {
            return Err(Error::invalid("experiment needs at least one transform"));
        }
        if self.generation.rhos.is_empty() || self.generation.ms.is_empty() {
            return Err(Error::invalid("rho and m grids must be nonempty"));
        }
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return Err(Error::invalid("dataset sizes must be >= 1"));
        }
        Ok(())
    }

    /// Canonical grid cells: the generated-sample transforms expand over
    /// (rho, m); the baseline and the on-the-fly ada route collapse to one
    /// cell each.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut keys = Vec::new();
        for &t in &self.generation.transforms {
            match t {
                TransformKind::None | TransformKind::Ada => {
                    keys.push(CellKey {
                        transform: t,
                        rho: 0.0,
                        m: 0,
                    });
                }
                TransformKind::Transport | TransformKind::Random => {
                    for &rho in &self.generation.rhos {
                        for &m in &self.generation.ms {
                            keys.push(CellKey {
                                transform: t,
                                rho,
                                m,
                            });
                        }
                    }
                }
            }
        }
        keys.dedup();
        let mut seen = Vec::new();
        keys.retain(|k| {
            if seen.contains(k) {
                false
            } else {
                seen.push(*k);
                true
            }
        });
        keys
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CellKey {
    pub transform: TransformKind,
    pub rho: Real,
    pub m: usize,
}

impl CellKey {
    pub fn id(&self) -> String {
        match self.transform {
            TransformKind::None => "none".into(),
            TransformKind::Ada => "ada".into(),
            t => format!("{}_rho{}_m{}", t.as_str(), self.rho, self.m),
        }
    }
}

pub const METRIC_IN_DOMAIN: &str = "in_domain_zero_shot";
pub const METRIC_SHIFTED_MEAN: &str = "shifted_zero_shot_mean";
pub const METRIC_PROBE: &str = "linear_probe";

/// Names of every metric a seed produces, in emission order.
pub fn metric_names(shifts: &[ShiftName]) -> Vec<String> {
    let mut names = vec![METRIC_IN_DOMAIN.to_string()];
    for s in shifts {
        names.push(format!("shifted_zero_shot:{s}"));
    }
    names.push(METRIC_SHIFTED_MEAN.to_string());
    names.push(METRIC_PROBE.to_string());
    names
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    /// metric name -> value, ordered.
    pub metrics: BTreeMap<String, Real>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aggregate {
    pub mean: BTreeMap<String, Real>,
    pub std: BTreeMap<String, Real>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CellReport {
    pub id: String,
    pub cell: CellKey,
    pub per_seed: Vec<SeedMetrics>,
    pub aggregate: Aggregate,
    /// Populated when the cell failed; other cells still run.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Report {
    pub cells: Vec<CellReport>,
    pub shifts: Vec<ShiftName>,
    pub provenance: Provenance,
}

impl Report {
    pub fn cell(&self, id: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.id == id)
    }

    pub fn mean_of(&self, id: &str, metric: &str) -> Option<Real> {
        self.cell(id)?.aggregate.mean.get(metric).copied()
    }
}

/// Wall-clock seconds per pipeline stage, reported in the manifest only.
pub type StageTimings = BTreeMap<String, f64>;

// Stable sub-seed lineage: each pipeline stage draws from its own stream
// of the per-run seed.
fn subseed(seed: u64, tag: u64) -> u64 {
    SeededRng::new(seed).derive(tag).next_u64()
}

pub(crate) const TAG_TRAIN_DATA: u64 = 1;
pub(crate) const TAG_TEST_DATA: u64 = 2;
pub(crate) const TAG_SHIFT_BASE: u64 = 100;
pub(crate) const TAG_DIFFUSION: u64 = 3;
pub(crate) const TAG_GENERATION: u64 = 4;
pub(crate) const TAG_CLIP: u64 = 5;

/// Everything derived from one seed that is shared across grid cells.
struct SeedArtifacts {
    train: Dataset,
    test_in: Dataset,
    test_shifted: Vec<(ShiftName, Dataset)>,
    denoiser: Denoiser,
}

fn build_seed_artifacts(
    cfg: &ExperimentConfig,
    seed: u64,
    timings: &mut StageTimings,
) -> Result<SeedArtifacts> {
    let t0 = Instant::now();
    let train = gen_dataset_seeded(&cfg.dataset.spec, cfg.dataset.n_train, subseed(seed, TAG_TRAIN_DATA))?;
    let test_in = gen_dataset_seeded(&cfg.dataset.spec, cfg.dataset.n_test, subseed(seed, TAG_TEST_DATA))?;
    let mut test_shifted = Vec::new();
    for (i, &shift) in cfg.dataset.shifts.iter().enumerate() {
        let spec = shift_domain(&cfg.dataset.spec, shift);
        let ds = gen_dataset_seeded(&spec, cfg.dataset.n_test, subseed(seed, TAG_SHIFT_BASE + i as u64))?;
        test_shifted.push((shift, ds));
    }
    *timings.entry("datagen".into()).or_default() += t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let schedule = cfg.schedule.build()?;
    let mut dcfg = cfg.diffusion.clone();
    dcfg.seed = subseed(seed, TAG_DIFFUSION);
    let denoiser = train_denoiser(&train, &schedule, &dcfg)?;
    *timings.entry("diffusion".into()).or_default() += t0.elapsed().as_secs_f64();

    Ok(SeedArtifacts {
        train,
        test_in,
        test_shifted,
        denoiser,
    })
}

fn evaluate(
    model: &ContrastiveModel,
    artifacts: &SeedArtifacts,
    seed: u64,
) -> Result<SeedMetrics> {
    let mut metrics = BTreeMap::new();
    metrics.insert(METRIC_IN_DOMAIN.into(), zero_shot(model, &artifacts.test_in)?);
    let mut shifted_sum = 0.0;
    for (shift, ds) in &artifacts.test_shifted {
        let acc = zero_shot(model, ds)?;
        shifted_sum += acc;
        metrics.insert(format!("shifted_zero_shot:{shift}"), acc);
    }
    let shifted_mean = if artifacts.test_shifted.is_empty() {
        0.0
    } else {
        shifted_sum / artifacts.test_shifted.len() as Real
    };
    metrics.insert(METRIC_SHIFTED_MEAN.into(), shifted_mean);
    metrics.insert(
        METRIC_PROBE.into(),
        linear_probe(model, &artifacts.train, &artifacts.test_in)?,
    );
    Ok(SeedMetrics { seed, metrics })
}

fn run_cell_for_seed(
    cfg: &ExperimentConfig,
    cell: &CellKey,
    seed: u64,
    artifacts: &SeedArtifacts,
    timings: &mut StageTimings,
) -> Result<SeedMetrics> {
    let schedule = cfg.schedule.build()?;
    let mut clip_cfg = cfg.contrastive.clone();
    clip_cfg.seed = subseed(seed, TAG_CLIP);

    let t0 = Instant::now();
    let model = match cell.transform {
        TransformKind::None => {
            clip_cfg.adversarial_mix = false;
            train_baseline(&artifacts.train, &clip_cfg)?.model
        }
        TransformKind::Ada => {
            clip_cfg.adversarial_mix = true;
            crate::advgen::train_ada(&artifacts.train, &clip_cfg, &cfg.generation.ada)?.model
        }
        TransformKind::Transport | TransformKind::Random => {
            let gen_cfg = GenConfig {
                m: cell.m,
                rho: cell.rho,
                ddim_steps: cfg.generation.ddim_steps,
                seed: subseed(seed, TAG_GENERATION),
            };
            let tg = Instant::now();
            let (advset, _warnings) = if cell.transform == TransformKind::Transport {
                generate_adversarial(&artifacts.train, &artifacts.denoiser, &schedule, &gen_cfg)?
            } else {
                generate_random(&artifacts.train, &artifacts.denoiser, &schedule, &gen_cfg)?
            };
            *timings.entry("generation".into()).or_default() += tg.elapsed().as_secs_f64();
            if !advset.skipped.is_empty() {
                return Err(Error::invalid(format!(
                    "{} sources skipped during generation",
                    advset.skipped.len()
                )));
            }
            clip_cfg.adversarial_mix = true;
            train_edsam(&artifacts.train, &advset, &clip_cfg)?.model
        }
    };
    *timings.entry("contrastive".into()).or_default() += t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let metrics = evaluate(&model, artifacts, seed);
    *timings.entry("evaluation".into()).or_default() += t0.elapsed().as_secs_f64();
    metrics
}

fn aggregate(per_seed: &[SeedMetrics]) -> Aggregate {
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    if per_seed.is_empty() {
        return Aggregate { mean, std };
    }
    let names: Vec<String> = per_seed[0].metrics.keys().cloned().collect();
    let n = per_seed.len() as Real;
    for name in names {
        let values: Vec<Real> = per_seed
            .iter()
            .filter_map(|s| s.metrics.get(&name).copied())
            .collect();
        let m = values.iter().sum::<Real>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - m) * (v - m)).sum::<Real>() / (n - 1.0)
        } else {
            0.0
        };
        mean.insert(name.clone(), m);
        std.insert(name, var.sqrt());
    }
    Aggregate { mean, std }
}

/// Execute the full grid. Per seed the dataset and denoiser are built once
/// and shared by every cell; cells are independent otherwise. A failing
/// cell is recorded in its report entry and the remaining cells still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Report, StageTimings)> {
    cfg.validate()?;
    let mut timings = StageTimings::new();
    let cells = cfg.cells();
    let mut per_cell: Vec<(CellKey, Vec<SeedMetrics>, Option<String>)> = cells
        .iter()
        .map(|c| (*c, Vec::new(), None))
        .collect();
    for &seed in &cfg.seeds {
        let artifacts = build_seed_artifacts(cfg, seed, &mut timings)?;
        for (cell, seeds_out, error) in per_cell.iter_mut() {
            if error.is_some() {
                continue;
            }
            match run_cell_for_seed(cfg, cell, seed, &artifacts, &mut timings) {
                Ok(metrics) => seeds_out.push(metrics),
                Err(e) => *error = Some(format!("seed {seed}: {e}")),
            }
        }
    }
    let cells = per_cell
        .into_iter()
        .map(|(cell, per_seed, error)| CellReport {
            id: cell.id(),
            cell,
            aggregate: aggregate(&per_seed),
            per_seed,
            error,
        })
        .collect();
    Ok((
        Report {
            cells,
            shifts: cfg.dataset.shifts.clone(),
            provenance: Provenance {
                config_hash: cfg.hash(),
                seeds: cfg.seeds.clone(),
            },
        },
        timings,
    ))
}
