//! The conditional noise-prediction network and its training loop.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::coremath::{
    mlp_backward, mlp_forward, Activation, MlpSpec, SeededRng,
};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::io_util;
use crate::{AdamConfig, AdamState, MlpParams, Real, Tensor};

use super::{q_sample, DiffusionSchedule, ScheduleParams};

/// Sinusoidal step-embedding width.
pub const TIME_EMBED_DIM: usize = 16;
/// Learned prompt-embedding width.
pub const COND_EMBED_DIM: usize = 8;

/// Sinusoidal features of the step index, transformer-style: half sines,
/// half cosines over a geometric frequency ladder.
pub fn time_embedding(i: usize) -> [Real; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..half {
        let freq = (10_000.0f64).powf(-(k as f64) / (half as f64 - 1.0));
        let angle = i as f64 * freq;
        out[k] = angle.sin();
        out[half + k] = angle.cos();
    }
    out
}

/// Conditional noise predictor: an MLP over the noisy input concatenated
/// with a sinusoidal step embedding and a learned prompt embedding. The
/// embedding table has one extra row used as the null (unconditional)
/// condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub data_dim: usize,
    pub n_classes: usize,
    pub mlp: MlpParams,
    /// `(n_classes + 1) x COND_EMBED_DIM`; the last row is the null row.
    pub cond_table: Tensor,
    pub loss_trace: Option<Vec<Real>>,
}

impl Denoiser {
    pub fn new(
        data_dim: usize,
        n_classes: usize,
        hidden: &[usize],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if data_dim == 0 || n_classes == 0 || hidden.is_empty() {
            return Err(Error::invalid(
                "denoiser needs data_dim >= 1, n_classes >= 1 and a hidden layer",
            ));
        }
        let mut widths = vec![data_dim + TIME_EMBED_DIM + COND_EMBED_DIM];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let spec = MlpSpec::uniform(widths, Activation::Gelu)?;
        let mlp = MlpParams::init(&spec, rng);
        let rows = n_classes + 1;
        let std = (1.0 / COND_EMBED_DIM as f64).sqrt();
        let table: Vec<Real> = (0..rows * COND_EMBED_DIM)
            .map(|_| std * rng.normal())
            .collect();
        Ok(Denoiser {
            data_dim,
            n_classes,
            mlp,
            cond_table: Tensor::from_vec_unchecked(vec![rows, COND_EMBED_DIM], table),
            loss_trace: None,
        })
    }

    /// Row index of the null (unconditional) embedding.
    pub fn null_row(&self) -> usize {
        self.n_classes
    }

    fn cond_row(&self, cond: Option<usize>) -> Result<usize> {
        match cond {
            None => Ok(self.null_row()),
            Some(c) if c < self.n_classes => Ok(c),
            Some(c) => Err(Error::invalid(format!(
                "condition id {c} out of range (n_classes = {})",
                self.n_classes
            ))),
        }
    }

    fn assemble_input(&self, x: &[Real], step: usize, row: usize) -> Tensor {
        let mut input = Vec::with_capacity(self.data_dim + TIME_EMBED_DIM + COND_EMBED_DIM);
        input.extend_from_slice(x);
        input.extend_from_slice(&time_embedding(step));
        let table = self.cond_table.data();
        input.extend_from_slice(&table[row * COND_EMBED_DIM..(row + 1) * COND_EMBED_DIM]);
        Tensor::from_vec_unchecked(vec![input.len()], input)
    }

    /// Predicted noise for `x` at step `step` under condition `cond`
    /// (`None` = unconditional).
    pub fn predict(&self, x: &Tensor, step: usize, cond: Option<usize>) -> Result<Tensor> {
        if x.shape() != [self.data_dim] {
            return Err(Error::shape(
                format!("[{}]", self.data_dim),
                format!("{:?}", x.shape()),
            ));
        }
        let row = self.cond_row(cond)?;
        let input = self.assemble_input(x.data(), step, row);
        let acts = mlp_forward(&self.mlp, &input)?;
        Tensor::from_vec(&[self.data_dim], acts.output().to_vec())
    }

    /// Zeroed copy of all trainable parameters, used as a gradient container.
    fn zero_grads(&self) -> DenoiserGrads {
        DenoiserGrads {
            mlp: self.mlp.zeros_like(),
            cond_table: Tensor::zeros(self.cond_table.shape()),
        }
    }
}

/// Gradients for every trainable block of a [`Denoiser`].
#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub mlp: MlpParams,
    pub cond_table: Tensor,
}

/// One prepared training example: the noised input, its step index, the
/// embedding row to condition on (may be the null row) and the target noise.
#[derive(Debug, Clone)]
pub struct NoisePredictionExample {
    pub x_noisy: Tensor,
    pub step: usize,
    pub cond_row: usize,
    pub target_eps: Tensor,
}

/// Mean over the batch of the squared noise-prediction error, with exact
/// gradients for the MLP and the condition table.
pub fn denoiser_loss_and_grads(
    denoiser: &Denoiser,
    batch: &[NoisePredictionExample],
) -> Result<(Real, DenoiserGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty denoiser batch"));
    }
    let inv_b = 1.0 / batch.len() as Real;
    let mut loss = 0.0;
    let mut grads = denoiser.zero_grads();
    for ex in batch {
        if ex.cond_row > denoiser.n_classes {
            return Err(Error::invalid(format!(
                "condition row {} out of table",
                ex.cond_row
            )));
        }
        let input = denoiser.assemble_input(ex.x_noisy.data(), ex.step, ex.cond_row);
        let acts = mlp_forward(&denoiser.mlp, &input)?;
        let out = acts.output();
        let mut grad_out = Vec::with_capacity(denoiser.data_dim);
        for (o, t) in out.iter().zip(ex.target_eps.data()) {
            let diff = o - t;
            loss += diff * diff * inv_b;
            grad_out.push(2.0 * diff * inv_b);
        }
        let grad_out = Tensor::from_vec_unchecked(vec![denoiser.data_dim], grad_out);
        let (g_mlp, g_input) = mlp_backward(&denoiser.mlp, &acts, &grad_out)?;
        grads.mlp.add_scaled(&g_mlp, 1.0)?;
        let cond_offset = denoiser.data_dim + TIME_EMBED_DIM;
        let row_slice = &mut grads.cond_table.data_mut()
            [ex.cond_row * COND_EMBED_DIM..(ex.cond_row + 1) * COND_EMBED_DIM];
        for (slot, g) in row_slice.iter_mut().zip(&g_input.data()[cond_offset..]) {
            *slot += g;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("denoiser loss".into()));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: Real,
    /// Probability of replacing the condition with the null row during
    /// training, enabling an unconditional score.
    pub p_uncond: Real,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 4000,
            batch_size: 32,
            lr: 1e-3,
            p_uncond: 0.1,
            hidden: vec![128, 128],
            seed: 0,
        }
    }
}

/// Minimize the expected squared noise-prediction error over uniformly
/// sampled steps and Gaussian noise. Returns the trained model with its
/// loss trace attached. Aborts with a diagnostic on divergence.
pub fn train_denoiser(
    dataset: &Dataset,
    schedule: &DiffusionSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<Denoiser> {
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::invalid("training needs steps >= 1 and batch >= 1"));
    }
    if !(0.0..=1.0).contains(&cfg.p_uncond) {
        return Err(Error::invalid("p_uncond must be in [0,1]"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut denoiser = Denoiser::new(dataset.dim(), dataset.k, &cfg.hidden, &mut rng)?;
    let block_sizes: Vec<usize> = denoiser
        .mlp
        .blocks()
        .iter()
        .map(|b| b.len())
        .chain([denoiser.cond_table.len()])
        .collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &block_sizes);
    let mut trace = Vec::with_capacity(cfg.steps);
    let n = dataset.n();
    for step_no in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.below(n);
            let sample = &dataset.samples[idx];
            let i = 1 + rng.below(schedule.t_steps);
            let cond_row = if rng.next_f64() < cfg.p_uncond {
                denoiser.null_row()
            } else {
                sample.prompt
            };
            let eps = crate::coremath::standard_normal(&mut rng, &[dataset.dim()]);
            let x_noisy = q_sample(schedule, &sample.image, i, &eps)?;
            batch.push(NoisePredictionExample {
                x_noisy,
                step: i,
                cond_row,
                target_eps: eps,
            });
        }
        let (loss, grads) = denoiser_loss_and_grads(&denoiser, &batch).map_err(|e| {
            match e {
                Error::NonFinite(_) => Error::Diverged {
                    step: step_no,
                    reason: "non-finite training loss".into(),
                },
                other => other,
            }
        })?;
        let grad_blocks: Vec<&[Real]> = grads
            .mlp
            .blocks()
            .into_iter()
            .chain([grads.cond_table.data()])
            .collect();
        let mut param_blocks: Vec<&mut [Real]> = denoiser
            .mlp
            .blocks_mut()
            .into_iter()
            .chain([denoiser.cond_table.data_mut()])
            .collect();
        adam.step_blocks(&mut param_blocks, &grad_blocks)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    step: step_no,
                    reason: "non-finite gradient".into(),
                },
                other => other,
            })?;
        trace.push(loss);
    }
    denoiser.loss_trace = Some(trace);
    Ok(denoiser)
}

const VERSION: u16 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Sidecar {
    schedule: ScheduleParams,
    data_dim: usize,
    n_classes: usize,
    time_embed_dim: usize,
    cond_embed_dim: usize,
    loss_trace: Option<Vec<Real>>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Checkpoint: the MLP in the shared binary format, followed by the
/// condition table, plus a JSON sidecar (`<path>.json`) with the schedule
/// parameters, embedding dims, condition count and loss trace.
pub fn save_denoiser(
    denoiser: &Denoiser,
    schedule: &ScheduleParams,
    path: &Path,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    denoiser.mlp.write_to(&mut w, path)?;
    io_util::write_u16(&mut w, path, VERSION)?;
    io_util::write_u32(&mut w, path, denoiser.cond_table.shape()[0] as u32)?;
    io_util::write_u32(&mut w, path, denoiser.cond_table.shape()[1] as u32)?;
    for &v in denoiser.cond_table.data() {
        io_util::write_f64(&mut w, path, v)?;
    }
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        schedule: *schedule,
        data_dim: denoiser.data_dim,
        n_classes: denoiser.n_classes,
        time_embed_dim: TIME_EMBED_DIM,
        cond_embed_dim: COND_EMBED_DIM,
        loss_trace: denoiser.loss_trace.clone(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&sp, e))
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, ScheduleParams)> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = BufReader::new(file);
    let mlp = MlpParams::read_from(&mut r, path)?;
    let version = io_util::read_u16(&mut r, path)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: VERSION,
        });
    }
    let rows = io_util::read_u32(&mut r, path)? as usize;
    let cols = io_util::read_u32(&mut r, path)? as usize;
    if cols != COND_EMBED_DIM || rows < 2 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("implausible condition table {rows}x{cols}"),
        });
    }
    let mut table = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        table.push(io_util::read_f64(&mut r, path)?);
    }
    let sp = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_slice(
        &std::fs::read(&sp).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(sp.clone())
            } else {
                Error::io(&sp, e)
            }
        })?,
    )
    .map_err(|e| Error::Malformed {
        path: sp.clone(),
        reason: format!("bad sidecar JSON: {e}"),
    })?;
    if sidecar.n_classes + 1 != rows || sidecar.data_dim != mlp.spec.output_dim() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: "sidecar does not match checkpoint dimensions".into(),
        });
    }
    Ok((
        Denoiser {
            data_dim: sidecar.data_dim,
            n_classes: sidecar.n_classes,
            mlp,
            cond_table: Tensor::from_vec(&[rows, cols], table).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
            loss_trace: sidecar.loss_trace,
        },
        sidecar.schedule,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::PairedSample;

    pub(crate) fn tiny_dataset(n: usize, dim: usize, k: usize, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed);
        let samples = (0..n)
            .map(|i| {
                let class = i % k;
                let center = if class == 0 { -1.0 } else { 1.0 };
                let data: Vec<Real> = (0..dim).map(|_| center + 0.05 * rng.normal()).collect();
                PairedSample {
                    image: Tensor::from_vec_unchecked(vec![dim], data),
                    prompt: class,
                }
            })
            .collect();
        Dataset::from_samples(samples, k, crate::datagen::DomainSpec::default(), seed).unwrap()
    }

    #[test]
    fn predict_validates_inputs() {
        let mut rng = SeededRng::new(1);
        let d = Denoiser::new(4, 3, &[8], &mut rng).unwrap();
        assert!(d.predict(&Tensor::zeros(&[5]), 1, None).is_err());
        assert!(d.predict(&Tensor::zeros(&[4]), 1, Some(3)).is_err());
        assert!(d.predict(&Tensor::zeros(&[4]), 1, Some(2)).is_ok());
    }

    #[test]
    fn time_embedding_is_bounded_and_distinct() {
        let a = time_embedding(1);
        let b = time_embedding(900);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let ds = tiny_dataset(16, 2, 2, 3);
        let schedule = make_schedule_for_tests();
        let cfg = DiffusionTrainConfig {
            steps: 5,
            batch_size: 4,
            lr: 0.0,
            hidden: vec![8],
            seed: 7,
            ..Default::default()
        };
        let trained = train_denoiser(&ds, &schedule, &cfg).unwrap();
        let mut rng = SeededRng::new(cfg.seed);
        let fresh = Denoiser::new(ds.dim(), ds.k, &cfg.hidden, &mut rng).unwrap();
        assert_eq!(trained.mlp, fresh.mlp);
        assert_eq!(trained.cond_table, fresh.cond_table);
    }

    fn make_schedule_for_tests() -> DiffusionSchedule {
        super::super::make_schedule(50, 1e-4, 0.05).unwrap()
    }

    // Exact gradients against central finite differences over every block.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(5);
        let mut d = Denoiser::new(3, 2, &[6], &mut rng).unwrap();
        let batch: Vec<NoisePredictionExample> = (0..4)
            .map(|b| NoisePredictionExample {
                x_noisy: crate::coremath::standard_normal(&mut rng, &[3]),
                step: 1 + b * 7,
                cond_row: b % 3,
                target_eps: crate::coremath::standard_normal(&mut rng, &[3]),
            })
            .collect();
        let (_, grads) = denoiser_loss_and_grads(&d, &batch).unwrap();
        let h = 1e-5;
        let loss_of = |d: &Denoiser| denoiser_loss_and_grads(d, &batch).unwrap().0;
        // mlp blocks
        for block in 0..d.mlp.blocks().len() {
            for i in 0..d.mlp.blocks()[block].len() {
                let orig = d.mlp.blocks()[block][i];
                d.mlp.blocks_mut()[block][i] = orig + h;
                let up = loss_of(&d);
                d.mlp.blocks_mut()[block][i] = orig - h;
                let down = loss_of(&d);
                d.mlp.blocks_mut()[block][i] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads.mlp.blocks()[block][i];
                assert!(
                    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6) < 1e-4,
                    "block {block} idx {i}: fd {fd} vs {g}"
                );
            }
        }
        // condition table
        for i in 0..d.cond_table.len() {
            let orig = d.cond_table.data()[i];
            d.cond_table.data_mut()[i] = orig + h;
            let up = loss_of(&d);
            d.cond_table.data_mut()[i] = orig - h;
            let down = loss_of(&d);
            d.cond_table.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grads.cond_table.data()[i];
            assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(16, 2, 2, 3);
        let schedule = make_schedule_for_tests();
        let cfg = DiffusionTrainConfig {
            steps: 20,
            batch_size: 8,
            hidden: vec![8],
            seed: 11,
            ..Default::default()
        };
        let a = train_denoiser(&ds, &schedule, &cfg).unwrap();
        let b = train_denoiser(&ds, &schedule, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("denoiser.ckpt");
        let mut rng = SeededRng::new(2);
        let mut d = Denoiser::new(4, 3, &[8, 8], &mut rng).unwrap();
        d.loss_trace = Some(vec![1.0, 0.5, 0.25]);
        let params = ScheduleParams::default();
        save_denoiser(&d, &params, &path).unwrap();
        let (loaded, sched) = load_denoiser(&path).unwrap();
        assert_eq!(d, loaded);
        assert_eq!(sched, params);
    }
}
