//! Two-tower contrastive model: an image encoder with unit-normalized
//! output, a learned prompt-embedding table (unit-normalized on read) and a
//! learnable log-parameterized temperature.
//!
//! The loss is the symmetric InfoNCE over cosine similarities. Prompts here
//! are categorical, so two batch entries can share a prompt id; the loss
//! masks those false-negative pairs out of the softmax denominators (the
//! diagonal pairing term always stays).

pub(crate) mod train;

pub use train::{
    joint_loss_and_grads, linear_probe, train_baseline, train_edsam, zero_shot, TrainConfig,
    TrainOutput,
};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::coremath::{mlp_backward, mlp_forward, Activation, MlpSpec, SeededRng};
use crate::datagen::PairedSample;
use crate::error::{Error, Result};
use crate::io_util;
use crate::{MlpParams, Real, Tensor};

/// Embedding width shared by both towers.
pub const EMBED_DIM: usize = 16;
/// Standard temperature initialization.
pub const TAU_INIT: Real = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveModel {
    pub data_dim: usize,
    pub k: usize,
    pub encoder: MlpParams,
    /// `k x EMBED_DIM`, unnormalized; rows are unit-normalized on read.
    pub prompt_table: Tensor,
    /// Temperature is `exp(log_tau)`, learnable.
    pub log_tau: Real,
}

impl ContrastiveModel {
    pub fn new(data_dim: usize, k: usize, hidden: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("contrastive model needs k >= 2 classes"));
        }
        let mut widths = vec![data_dim];
        widths.extend_from_slice(hidden);
        widths.push(EMBED_DIM);
        let spec = MlpSpec::uniform(widths, Activation::Gelu)?;
        let encoder = MlpParams::init(&spec, rng);
        let table: Vec<Real> = (0..k * EMBED_DIM).map(|_| rng.normal()).collect();
        Ok(ContrastiveModel {
            data_dim,
            k,
            encoder,
            prompt_table: Tensor::from_vec_unchecked(vec![k, EMBED_DIM], table),
            log_tau: TAU_INIT.ln(),
        })
    }

    /// The default tower for 8x8 images: 64 -> 64 -> 32 -> 16.
    pub fn default_for(data_dim: usize, k: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::new(data_dim, k, &[64, 32], rng)
    }

    pub fn tau(&self) -> Real {
        self.log_tau.exp()
    }

    /// L2-normalized image embedding.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let acts = mlp_forward(&self.encoder, image)?;
        let (f, _) = normalize(acts.output())?;
        Tensor::from_vec(&[EMBED_DIM], f)
    }

    /// L2-normalized prompt embedding for a class id.
    pub fn prompt_embedding(&self, class: usize) -> Result<Tensor> {
        if class >= self.k {
            return Err(Error::invalid(format!(
                "prompt id {class} out of range (k = {})",
                self.k
            )));
        }
        let row = &self.prompt_table.data()[class * EMBED_DIM..(class + 1) * EMBED_DIM];
        let (p, _) = normalize(row)?;
        Tensor::from_vec(&[EMBED_DIM], p)
    }
}

fn normalize(v: &[Real]) -> Result<(Vec<Real>, Real)> {
    let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if norm < 1e-300 {
        return Err(Error::NonFinite("normalize of zero vector".into()));
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

/// Backward through `f = u / |u|`: `(g - (g . f) f) / |u|`.
fn normalize_backward(f: &[Real], norm: Real, grad_f: &[Real]) -> Vec<Real> {
    let dot: Real = grad_f.iter().zip(f).map(|(g, fi)| g * fi).sum();
    grad_f
        .iter()
        .zip(f)
        .map(|(g, fi)| (g - dot * fi) / norm)
        .collect()
}

/// Symmetric masked InfoNCE over a similarity matrix.
///
/// `sims` is the row-major `n x n` cosine-similarity matrix (row = image,
/// column = prompt), `classes` the prompt id of each batch entry. Pairs
/// `i != j` with equal class ids are masked out of both denominators.
///
/// Returns `(loss, d loss / d sims, d loss / d log_tau)`.
pub fn symmetric_infonce(
    sims: &[Real],
    classes: &[usize],
    tau: Real,
) -> Result<(Real, Vec<Real>, Real)> {
    let n = classes.len();
    if n < 2 || sims.len() != n * n {
        return Err(Error::invalid(format!(
            "contrastive batch needs n >= 2 with an n x n similarity matrix (n = {n})"
        )));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mask = |i: usize, j: usize| i == j || classes[i] != classes[j];
    let logits: Vec<Real> = sims.iter().map(|a| a / tau).collect();

    // masked log-softmax terms, rows then columns
    let mut grad_logits = vec![0.0; n * n];
    let inv = 1.0 / (2.0 * n as Real);
    let mut loss = 0.0;
    for dir in 0..2 {
        for a in 0..n {
            // row a (dir 0) or column a (dir 1)
            let get = |b: usize| if dir == 0 { logits[a * n + b] } else { logits[b * n + a] };
            let keep = |b: usize| if dir == 0 { mask(a, b) } else { mask(b, a) };
            let mut max = Real::NEG_INFINITY;
            for b in 0..n {
                if keep(b) {
                    max = max.max(get(b));
                }
            }
            let mut denom = 0.0;
            for b in 0..n {
                if keep(b) {
                    denom += (get(b) - max).exp();
                }
            }
            let log_denom = max + denom.ln();
            loss += inv * (log_denom - get(a));
            for b in 0..n {
                if keep(b) {
                    let p = (get(b) - max).exp() / denom;
                    let g = inv * (p - if a == b { 1.0 } else { 0.0 });
                    if dir == 0 {
                        grad_logits[a * n + b] += g;
                    } else {
                        grad_logits[b * n + a] += g;
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    let grad_sims: Vec<Real> = grad_logits.iter().map(|g| g / tau).collect();
    // logits = sims * exp(-log_tau), so d logits / d log_tau = -logits
    let grad_log_tau = -grad_logits
        .iter()
        .zip(&logits)
        .map(|(g, l)| g * l)
        .sum::<Real>();
    Ok((loss, grad_sims, grad_log_tau))
}

/// Gradients for every trainable block of a [`ContrastiveModel`].
#[derive(Debug, Clone)]
pub struct ClipGrads {
    pub encoder: MlpParams,
    pub prompt_table: Tensor,
    pub log_tau: Real,
}

#[derive(Debug, Clone)]
pub struct ClipLossOutput {
    pub loss: Real,
    pub grads: ClipGrads,
    /// Per-sample gradient of the loss with respect to the input image.
    pub input_grads: Vec<Tensor>,
    /// Whether the batch contained repeated prompt ids (masked pairs).
    pub duplicate_prompts: bool,
}

/// Symmetric contrastive loss over a batch with exact gradients for the
/// encoder, the prompt table, the temperature and the input images.
pub fn clip_loss(model: &ContrastiveModel, batch: &[PairedSample]) -> Result<ClipLossOutput> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::invalid(
            "contrastive loss needs a batch of at least 2 (negatives required)",
        ));
    }
    let tau = model.tau();
    let mut feats = Vec::with_capacity(n);
    let mut feat_norms = Vec::with_capacity(n);
    let mut acts_all = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for s in batch {
        if s.prompt >= model.k {
            return Err(Error::invalid(format!(
                "prompt id {} out of range (k = {})",
                s.prompt, model.k
            )));
        }
        let acts = mlp_forward(&model.encoder, &s.image)?;
        let (f, norm) = normalize(acts.output())?;
        feats.push(f);
        feat_norms.push(norm);
        acts_all.push(acts);
        classes.push(s.prompt);
    }
    let mut prompts = Vec::with_capacity(n);
    let mut prompt_norms = Vec::with_capacity(n);
    for &c in &classes {
        let row = &model.prompt_table.data()[c * EMBED_DIM..(c + 1) * EMBED_DIM];
        let (p, norm) = normalize(row)?;
        prompts.push(p);
        prompt_norms.push(norm);
    }
    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sims[i * n + j] = feats[i]
                .iter()
                .zip(&prompts[j])
                .map(|(a, b)| a * b)
                .sum::<Real>();
        }
    }
    let (loss, grad_sims, grad_log_tau) = symmetric_infonce(&sims, &classes, tau)?;

    let mut grads = ClipGrads {
        encoder: model.encoder.zeros_like(),
        prompt_table: Tensor::zeros(model.prompt_table.shape()),
        log_tau: grad_log_tau,
    };
    let mut input_grads = Vec::with_capacity(n);
    let mut duplicate_prompts = false;
    for i in 0..n {
        for j in 0..n {
            if i != j && classes[i] == classes[j] {
                duplicate_prompts = true;
            }
        }
        // d loss / d f_i = sum_j grad_sims[i][j] p_j
        let mut grad_f = vec![0.0; EMBED_DIM];
        for j in 0..n {
            let g = grad_sims[i * n + j];
            for (slot, &p) in grad_f.iter_mut().zip(&prompts[j]) {
                *slot += g * p;
            }
        }
        let grad_u = normalize_backward(&feats[i], feat_norms[i], &grad_f);
        let grad_u = Tensor::from_vec_unchecked(vec![EMBED_DIM], grad_u);
        let (g_enc, g_input) = mlp_backward(&model.encoder, &acts_all[i], &grad_u)?;
        grads.encoder.add_scaled(&g_enc, 1.0)?;
        input_grads.push(g_input);
    }
    for j in 0..n {
        // d loss / d p_j = sum_i grad_sims[i][j] f_i
        let mut grad_p = vec![0.0; EMBED_DIM];
        for i in 0..n {
            let g = grad_sims[i * n + j];
            for (slot, &f) in grad_p.iter_mut().zip(&feats[i]) {
                *slot += g * f;
            }
        }
        let grad_row = normalize_backward(&prompts[j], prompt_norms[j], &grad_p);
        let c = classes[j];
        let slot = &mut grads.prompt_table.data_mut()[c * EMBED_DIM..(c + 1) * EMBED_DIM];
        for (s, g) in slot.iter_mut().zip(&grad_row) {
            *s += g;
        }
    }
    Ok(ClipLossOutput {
        loss,
        grads,
        input_grads,
        duplicate_prompts,
    })
}

const VERSION: u16 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Sidecar {
    k: usize,
    data_dim: usize,
    embed_dim: usize,
    tau: Real,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Checkpoint: the encoder in the shared binary format, the prompt table
/// and log-temperature, plus a JSON sidecar with `{k, dims, tau}`.
pub fn save_model(model: &ContrastiveModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    model.encoder.write_to(&mut w, path)?;
    io_util::write_u16(&mut w, path, VERSION)?;
    io_util::write_u32(&mut w, path, model.k as u32)?;
    io_util::write_u32(&mut w, path, EMBED_DIM as u32)?;
    for &v in model.prompt_table.data() {
        io_util::write_f64(&mut w, path, v)?;
    }
    io_util::write_f64(&mut w, path, model.log_tau)?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        k: model.k,
        data_dim: model.data_dim,
        embed_dim: EMBED_DIM,
        tau: model.tau(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&sp, e))
}

pub fn load_model(path: &Path) -> Result<ContrastiveModel> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = BufReader::new(file);
    let encoder = MlpParams::read_from(&mut r, path)?;
    let version = io_util::read_u16(&mut r, path)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: VERSION,
        });
    }
    let k = io_util::read_u32(&mut r, path)? as usize;
    let embed = io_util::read_u32(&mut r, path)? as usize;
    if embed != EMBED_DIM || k < 2 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("implausible header k={k} embed={embed}"),
        });
    }
    let mut table = Vec::with_capacity(k * EMBED_DIM);
    for _ in 0..k * EMBED_DIM {
        table.push(io_util::read_f64(&mut r, path)?);
    }
    let log_tau = io_util::read_f64(&mut r, path)?;
    let sp = sidecar_path(path);
    let sidecar: Sidecar =
        serde_json::from_slice(&std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?).map_err(
            |e| Error::Malformed {
                path: sp.clone(),
                reason: format!("bad sidecar JSON: {e}"),
            },
        )?;
    if sidecar.k != k || sidecar.data_dim != encoder.spec.input_dim() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: "sidecar does not match checkpoint dimensions".into(),
        });
    }
    Ok(ContrastiveModel {
        data_dim: sidecar.data_dim,
        k,
        encoder,
        prompt_table: Tensor::from_vec(&[k, EMBED_DIM], table).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?,
        log_tau,
    })
}
