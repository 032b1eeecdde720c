//! Adversarial-sample generation.
//!
//! The diffusion route inverts each source image to its deterministic
//! sampler latent, applies the budgeted transport, and decodes the moved
//! latent back under the source prompt, producing `M` variants per source,
//! all offline and reproducible from the seed. The gradient-ascent route
//! (`ada_perturb` / `train_ada`) is the comparison baseline that perturbs
//! images directly against the contrastive loss with a squared-displacement
//! penalty.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::contrastive::{
    clip_loss, joint_loss_and_grads, ContrastiveModel, TrainConfig, TrainOutput,
};
use crate::coremath::SeededRng;
use crate::datagen::{Dataset, PairedSample};
use crate::diffusion::{ddim_invert, ddim_sample, Denoiser, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::io_util;
use crate::transport::{apply_transport, TransportRecord};
use crate::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    /// Variants generated per source image.
    pub m: usize,
    /// Transport budget.
    pub rho: Real,
    pub ddim_steps: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            m: 10,
            rho: 0.5,
            ddim_steps: 10,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("generation needs m >= 1 variants"));
        }
        if self.rho < 0.0 || !self.rho.is_finite() {
            return Err(Error::invalid("rho must be >= 0"));
        }
        if self.ddim_steps == 0 {
            return Err(Error::invalid("ddim_steps must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvEntry {
    pub source: usize,
    pub variant: usize,
    pub image: Tensor,
    pub prompt: usize,
    pub record: TransportRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvDataset {
    pub entries: Vec<AdvEntry>,
    pub config: GenConfig,
    /// `(source index, diagnostic)` for every skipped entry group.
    pub skipped: Vec<(usize, String)>,
}

impl AdvDataset {
    pub fn n_sources(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.source + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Generate `M` transported variants per source image.
///
/// Per source `i`: invert to the deterministic latent under the source
/// prompt, then decode `M` independently transported latents under the same
/// prompt, clamping to the data range. Each `(source, variant)` pair uses
/// an RNG stream derived from `(seed, source, variant)`, so the output is
/// reproducible regardless of execution order. Inversion failures skip the
/// source with a diagnostic instead of silently shrinking the set.
pub fn generate_adversarial(
    dataset: &Dataset,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    cfg: &GenConfig,
) -> Result<(AdvDataset, Vec<String>)> {
    cfg.validate()?;
    if denoiser.data_dim != dataset.dim() {
        return Err(Error::shape(
            format!("denoiser dim {}", denoiser.data_dim),
            format!("dataset dim {}", dataset.dim()),
        ));
    }
    if denoiser.n_classes != dataset.k {
        return Err(Error::invalid(format!(
            "denoiser conditions on {} classes but the dataset has {}",
            denoiser.n_classes, dataset.k
        )));
    }
    let mut warnings = Vec::new();
    if denoiser.loss_trace.is_none() {
        warnings.push(
            "denoiser carries no training loss trace; generating from an apparently \
             untrained model"
                .to_string(),
        );
    }
    let sampler = SamplerConfig {
        steps: cfg.ddim_steps,
        eta: 0.0,
    };
    sampler.grid(schedule.t_steps)?;
    let base = SeededRng::new(cfg.seed);
    let per_source: Vec<(Vec<AdvEntry>, Option<(usize, String)>)> = (0..dataset.n())
        .into_par_iter()
        .map(|i| {
            let sample = &dataset.samples[i];
            let z_s = match ddim_invert(denoiser, schedule, &sample.image, Some(sample.prompt), &sampler) {
                Ok(z) => z,
                Err(e) => return (Vec::new(), Some((i, format!("inversion failed: {e}")))),
            };
            let source_rng = base.derive(i as u64);
            let mut entries = Vec::with_capacity(cfg.m);
            let mut skip = None;
            for m in 0..cfg.m {
                let mut rng = source_rng.derive(m as u64);
                let mut step = || -> Result<AdvEntry> {
                    let (z_star, record) = apply_transport(&z_s, cfg.rho, &mut rng, i)?;
                    let image =
                        ddim_sample(denoiser, schedule, &z_star, Some(sample.prompt), &sampler, None)?
                            .clamp(0.0, 1.0);
                    Ok(AdvEntry {
                        source: i,
                        variant: m,
                        image,
                        prompt: sample.prompt,
                        record,
                    })
                };
                match step() {
                    Ok(entry) => entries.push(entry),
                    Err(e) => {
                        skip = Some((i, format!("variant {m} failed: {e}")));
                        break;
                    }
                }
            }
            (entries, skip)
        })
        .collect();

    let mut entries = Vec::with_capacity(dataset.n() * cfg.m);
    let mut skipped = Vec::new();
    for (mut group, skip) in per_source {
        entries.append(&mut group);
        if let Some(s) = skip {
            skipped.push(s);
        }
    }
    Ok((
        AdvDataset {
            entries,
            config: *cfg,
            skipped,
        },
        warnings,
    ))
}

/// Ablation counterpart of [`generate_adversarial`]: latents are drawn
/// fresh from `N(rho*1, I)` and never see the source image. Entries keep
/// the source/prompt pairing so the training loop is unchanged; the stored
/// offset is the distribution's fixed mean shift `rho`.
pub fn generate_random(
    dataset: &Dataset,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    cfg: &GenConfig,
) -> Result<(AdvDataset, Vec<String>)> {
    cfg.validate()?;
    if denoiser.data_dim != dataset.dim() || denoiser.n_classes != dataset.k {
        return Err(Error::invalid(
            "denoiser does not match the dataset (dim or class count)",
        ));
    }
    let mut warnings = Vec::new();
    if denoiser.loss_trace.is_none() {
        warnings.push("denoiser carries no training loss trace".to_string());
    }
    let sampler = SamplerConfig {
        steps: cfg.ddim_steps,
        eta: 0.0,
    };
    sampler.grid(schedule.t_steps)?;
    let base = SeededRng::new(cfg.seed);
    let per_source: Vec<(Vec<AdvEntry>, Option<(usize, String)>)> = (0..dataset.n())
        .into_par_iter()
        .map(|i| {
            let sample = &dataset.samples[i];
            let source_rng = base.derive(i as u64);
            let mut entries = Vec::with_capacity(cfg.m);
            let mut skip = None;
            for m in 0..cfg.m {
                let mut rng = source_rng.derive(m as u64);
                let mut step = || -> Result<AdvEntry> {
                    let z_star =
                        crate::transport::random_transform(cfg.rho, dataset.dim(), &mut rng)?;
                    let image =
                        ddim_sample(denoiser, schedule, &z_star, Some(sample.prompt), &sampler, None)?
                            .clamp(0.0, 1.0);
                    Ok(AdvEntry {
                        source: i,
                        variant: m,
                        image,
                        prompt: sample.prompt,
                        record: TransportRecord {
                            alpha: cfg.rho,
                            rho: cfg.rho,
                            source: i,
                        },
                    })
                };
                match step() {
                    Ok(entry) => entries.push(entry),
                    Err(e) => {
                        skip = Some((i, format!("variant {m} failed: {e}")));
                        break;
                    }
                }
            }
            (entries, skip)
        })
        .collect();
    let mut entries = Vec::with_capacity(dataset.n() * cfg.m);
    let mut skipped = Vec::new();
    for (mut group, skip) in per_source {
        entries.append(&mut group);
        if let Some(s) = skip {
            skipped.push(s);
        }
    }
    Ok((
        AdvDataset {
            entries,
            config: *cfg,
            skipped,
        },
        warnings,
    ))
}

/// Gradient-ascent perturbation parameters: objective
/// `L_contrastive(x, p) - lambda * |x - x_source|^2`, fixed step size,
/// output clamped to the data range.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaConfig {
    pub lambda: Real,
    pub steps: usize,
    pub step_size: Real,
}

impl Default for AdaConfig {
    fn default() -> Self {
        AdaConfig {
            lambda: 1.0,
            steps: 5,
            step_size: 0.05,
        }
    }
}

impl AdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if self.step_size <= 0.0 {
            return Err(Error::invalid("step_size must be > 0"));
        }
        Ok(())
    }
}

/// Iterative gradient ascent on the penalized contrastive objective,
/// starting at the source images. `steps = 0` returns the inputs exactly.
pub fn ada_perturb(
    model: &ContrastiveModel,
    batch: &[PairedSample],
    cfg: &AdaConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let mut current: Vec<PairedSample> = batch.to_vec();
    for _ in 0..cfg.steps {
        let out = clip_loss(model, &current)?;
        for (i, sample) in current.iter_mut().enumerate() {
            let grad = &out.input_grads[i];
            let data: Vec<Real> = sample
                .image
                .data()
                .iter()
                .zip(grad.data())
                .zip(batch[i].image.data())
                .map(|((&x, &g), &x0)| {
                    let ascent = g - 2.0 * cfg.lambda * (x - x0);
                    (x + cfg.step_size * ascent).clamp(0.0, 1.0)
                })
                .collect();
            sample.image = Tensor::from_vec_unchecked(sample.image.shape().to_vec(), data);
        }
    }
    Ok(current.into_iter().map(|s| s.image).collect())
}

/// Iterative adversarial training: each step perturbs the current real
/// batch against the current model and trains on both, the comparison
/// baseline to the offline diffusion route.
pub fn train_ada(real: &Dataset, cfg: &TrainConfig, ada: &AdaConfig) -> Result<TrainOutput> {
    ada.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::invalid("contrastive training needs batch_size >= 2"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut model = ContrastiveModel::default_for(real.dim(), real.k, &mut rng)?;
    let mut adam = crate::contrastive::train::adam_for(&model, cfg.lr);
    let by_class = real.by_class();
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every class needs at least one sample"));
    }
    let steps = cfg.epochs * real.n().div_ceil(cfg.batch_size);
    let mut trace = Vec::new();
    for _step in 0..steps {
        let idx =
            crate::contrastive::train::stratified_batch(&by_class, cfg.batch_size, &mut rng);
        let real_batch: Vec<PairedSample> =
            idx.iter().map(|&i| real.samples[i].clone()).collect();
        let perturbed = ada_perturb(&model, &real_batch, ada)?;
        let adv_batch: Vec<PairedSample> = perturbed
            .into_iter()
            .zip(&real_batch)
            .map(|(image, s)| PairedSample {
                image,
                prompt: s.prompt,
            })
            .collect();
        let (loss, grads) = joint_loss_and_grads(&model, &real_batch, &adv_batch)?;
        crate::contrastive::train::apply_grads(&mut model, &mut adam, &grads)?;
        trace.push(loss);
    }
    Ok(TrainOutput {
        model,
        loss_trace: trace,
    })
}

const MAGIC: &str = "EDSA";
const VERSION: u16 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Trailer {
    config: GenConfig,
    skipped: Vec<(usize, String)>,
}

/// File layout: magic `EDSA`, version u16, m u16, rho f64, source count
/// u32, dim u32, entry count u64, then entries as (source u32, variant
/// u16, class u8, alpha f64, image payload), then a JSON trailer with the
/// generation config and skip diagnostics.
pub fn save_advset(advset: &AdvDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let dim = advset.entries.first().map_or(0, |e| e.image.len());
    io_util::write_bytes(&mut w, path, MAGIC.as_bytes())?;
    io_util::write_u16(&mut w, path, VERSION)?;
    io_util::write_u16(&mut w, path, advset.config.m as u16)?;
    io_util::write_f64(&mut w, path, advset.config.rho)?;
    io_util::write_u32(&mut w, path, advset.n_sources() as u32)?;
    io_util::write_u32(&mut w, path, dim as u32)?;
    io_util::write_u64(&mut w, path, advset.entries.len() as u64)?;
    for e in &advset.entries {
        io_util::write_u32(&mut w, path, e.source as u32)?;
        io_util::write_u16(&mut w, path, e.variant as u16)?;
        io_util::write_bytes(&mut w, path, &[e.prompt as u8])?;
        io_util::write_f64(&mut w, path, e.record.alpha)?;
        for &v in e.image.data() {
            io_util::write_f64(&mut w, path, v)?;
        }
    }
    let trailer = Trailer {
        config: advset.config,
        skipped: advset.skipped.clone(),
    };
    io_util::write_bytes(&mut w, path, &serde_json::to_vec(&trailer)?)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_advset(path: &Path) -> Result<AdvDataset> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = BufReader::new(file);
    io_util::expect_magic(&mut r, path, MAGIC)?;
    io_util::expect_version(&mut r, path, VERSION)?;
    let _m = io_util::read_u16(&mut r, path)? as usize;
    let rho = io_util::read_f64(&mut r, path)?;
    let _n_sources = io_util::read_u32(&mut r, path)? as usize;
    let dim = io_util::read_u32(&mut r, path)? as usize;
    let count = io_util::read_u64(&mut r, path)? as usize;
    if dim > 1 << 20 || count > 1 << 30 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("implausible header dim={dim} count={count}"),
        });
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let source = io_util::read_u32(&mut r, path)? as usize;
        let variant = io_util::read_u16(&mut r, path)? as usize;
        let prompt = io_util::read_u8(&mut r, path)? as usize;
        let alpha = io_util::read_f64(&mut r, path)?;
        let mut data = Vec::with_capacity(dim);
        for _ in 0..dim {
            data.push(io_util::read_f64(&mut r, path)?);
        }
        entries.push(AdvEntry {
            source,
            variant,
            image: Tensor::from_vec(&[dim], data).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
            prompt,
            record: TransportRecord {
                alpha,
                rho,
                source,
            },
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    let trailer: Trailer = serde_json::from_slice(&rest).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: format!("bad JSON trailer: {e}"),
    })?;
    Ok(AdvDataset {
        entries,
        config: trailer.config,
        skipped: trailer.skipped,
    })
}
