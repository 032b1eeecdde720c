//! Contrastive training loops and evaluation.

use crate::advgen::AdvDataset;
use crate::coremath::SeededRng;
use crate::datagen::{Dataset, PairedSample};
use crate::error::{Error, Result};
use crate::{AdamConfig, AdamState, Real, Tensor};

use super::{clip_loss, ClipGrads, ContrastiveModel, EMBED_DIM};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Contrastive training needs negatives, so batch >= 2.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: Real,
    pub seed: u64,
    /// Whether the caller intends to mix adversarial samples in (drives the
    /// CLI mode selection; `train_edsam` is the mixing loop).
    pub adversarial_mix: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 30,
            lr: 3e-3,
            seed: 0,
            adversarial_mix: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "contrastive training needs batch_size >= 2 (negatives required)",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        Ok(())
    }

    fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ContrastiveModel,
    pub loss_trace: Vec<Real>,
}

/// Class-stratified batch indices: distinct classes while the batch fits
/// within `k`, round-robin classes beyond that (duplicates are masked by
/// the loss).
pub(crate) fn stratified_batch(
    by_class: &[Vec<usize>],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Vec<usize> {
    let k = by_class.len();
    let mut classes: Vec<usize> = (0..k).collect();
    rng.shuffle(&mut classes);
    (0..batch_size)
        .map(|slot| {
            let class = classes[slot % k];
            let members = &by_class[class];
            members[rng.below(members.len())]
        })
        .collect()
}

pub(crate) fn adam_for(model: &ContrastiveModel, lr: Real) -> AdamState {
    let sizes: Vec<usize> = model
        .encoder
        .blocks()
        .iter()
        .map(|b| b.len())
        .chain([model.prompt_table.len(), 1])
        .collect();
    AdamState::new(AdamConfig::with_lr(lr), &sizes)
}

pub(crate) fn apply_grads(
    model: &mut ContrastiveModel,
    adam: &mut AdamState,
    grads: &ClipGrads,
) -> Result<()> {
    let tau_grad = [grads.log_tau];
    let grad_blocks: Vec<&[Real]> = grads
        .encoder
        .blocks()
        .into_iter()
        .chain([grads.prompt_table.data(), &tau_grad[..]])
        .collect();
    let mut log_tau = [model.log_tau];
    {
        let mut param_blocks: Vec<&mut [Real]> = model
            .encoder
            .blocks_mut()
            .into_iter()
            .chain([model.prompt_table.data_mut()])
            .collect();
        param_blocks.push(&mut log_tau);
        adam.step_blocks(&mut param_blocks, &grad_blocks)?;
    }
    model.log_tau = log_tau[0];
    Ok(())
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            step,
            reason: "non-finite contrastive loss".into(),
        },
        other => other,
    }
}

/// Minimize the symmetric contrastive loss on real pairs only.
pub fn train_baseline(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut model = ContrastiveModel::default_for(dataset.dim(), dataset.k, &mut rng)?;
    let mut adam = adam_for(&model, cfg.lr);
    let by_class = dataset.by_class();
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every class needs at least one sample"));
    }
    let mut trace = Vec::new();
    for step in 0..cfg.steps_for(dataset.n()) {
        let idx = stratified_batch(&by_class, cfg.batch_size, &mut rng);
        let batch: Vec<PairedSample> =
            idx.iter().map(|&i| dataset.samples[i].clone()).collect();
        let out = clip_loss(&model, &batch).map_err(|e| diverged(e, step))?;
        apply_grads(&mut model, &mut adam, &out.grads).map_err(|e| diverged(e, step))?;
        trace.push(out.loss);
    }
    Ok(TrainOutput {
        model,
        loss_trace: trace,
    })
}

/// One joint step objective: `clip_loss(real) + clip_loss(adv)` with summed
/// gradients.
pub fn joint_loss_and_grads(
    model: &ContrastiveModel,
    real_batch: &[PairedSample],
    adv_batch: &[PairedSample],
) -> Result<(Real, ClipGrads)> {
    let real = clip_loss(model, real_batch)?;
    let adv = clip_loss(model, adv_batch)?;
    let mut grads = real.grads;
    grads.encoder.add_scaled(&adv.grads.encoder, 1.0)?;
    for (a, b) in grads
        .prompt_table
        .data_mut()
        .iter_mut()
        .zip(adv.grads.prompt_table.data())
    {
        *a += b;
    }
    grads.log_tau += adv.grads.log_tau;
    Ok((real.loss + adv.loss, grads))
}

/// Joint training on real pairs plus adversarial variants: each step draws
/// a stratified real batch and, for every element, one of its generated
/// variants uniformly; the step objective is the sum of both contrastive
/// losses, each adversarial image paired with its source prompt.
pub fn train_edsam(
    real: &Dataset,
    adv: &AdvDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if adv.entries.is_empty() {
        return Err(Error::invalid(
            "empty adversarial set; use train_baseline instead",
        ));
    }
    let mut by_source: Vec<Vec<usize>> = vec![Vec::new(); real.n()];
    for (e_idx, entry) in adv.entries.iter().enumerate() {
        if entry.source >= real.n() {
            return Err(Error::invalid(format!(
                "adversarial entry references source {} beyond dataset size {}",
                entry.source,
                real.n()
            )));
        }
        if entry.prompt != real.samples[entry.source].prompt {
            return Err(Error::invalid(format!(
                "adversarial entry for source {} carries prompt {} but the source has {}",
                entry.source, entry.prompt, real.samples[entry.source].prompt
            )));
        }
        by_source[entry.source].push(e_idx);
    }
    if let Some(missing) = by_source.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!(
            "adversarial set has no variants for source {missing}"
        )));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut model = ContrastiveModel::default_for(real.dim(), real.k, &mut rng)?;
    let mut adam = adam_for(&model, cfg.lr);
    let by_class = real.by_class();
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every class needs at least one sample"));
    }
    let mut trace = Vec::new();
    for step in 0..cfg.steps_for(real.n()) {
        let idx = stratified_batch(&by_class, cfg.batch_size, &mut rng);
        let real_batch: Vec<PairedSample> =
            idx.iter().map(|&i| real.samples[i].clone()).collect();
        let adv_batch: Vec<PairedSample> = idx
            .iter()
            .map(|&i| {
                let variants = &by_source[i];
                let entry = &adv.entries[variants[rng.below(variants.len())]];
                PairedSample {
                    image: entry.image.clone(),
                    prompt: entry.prompt,
                }
            })
            .collect();
        let (loss, grads) =
            joint_loss_and_grads(&model, &real_batch, &adv_batch).map_err(|e| diverged(e, step))?;
        apply_grads(&mut model, &mut adam, &grads).map_err(|e| diverged(e, step))?;
        trace.push(loss);
    }
    Ok(TrainOutput {
        model,
        loss_trace: trace,
    })
}

/// First index of the maximal score (ties resolve to the lowest class id).
pub(crate) fn argmax_lowest_tie(scores: &[Real]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Zero-shot accuracy: predict the class whose prompt embedding has the
/// highest cosine similarity to the image embedding.
pub fn zero_shot(model: &ContrastiveModel, dataset: &Dataset) -> Result<Real> {
    if model.k != dataset.k {
        return Err(Error::invalid(format!(
            "model has {} classes but the dataset has {}",
            model.k, dataset.k
        )));
    }
    let prompts: Vec<Tensor> = (0..model.k)
        .map(|c| model.prompt_embedding(c))
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    for s in &dataset.samples {
        let f = model.encode_image(&s.image)?;
        let scores: Vec<Real> = prompts.iter().map(|p| f.dot(p).unwrap()).collect();
        if argmax_lowest_tie(&scores) == s.prompt {
            correct += 1;
        }
    }
    Ok(correct as Real / dataset.n() as Real)
}

/// Multinomial logistic regression on frozen embeddings, full-batch
/// gradient descent until the gradient norm drops below 1e-6 or 10^4
/// iterations. Returns accuracy on `test`.
pub fn linear_probe(
    model: &ContrastiveModel,
    train: &Dataset,
    test: &Dataset,
) -> Result<Real> {
    if model.k != train.k || model.k != test.k {
        return Err(Error::invalid("probe class counts do not match"));
    }
    let k = model.k;
    let embed = |ds: &Dataset| -> Result<Vec<Tensor>> {
        ds.samples.iter().map(|s| model.encode_image(&s.image)).collect()
    };
    let train_emb = embed(train)?;
    let test_emb = embed(test)?;
    let n = train_emb.len() as Real;
    let mut weights = vec![0.0; k * EMBED_DIM];
    let mut bias = vec![0.0; k];
    let lr = 1.0;
    for _ in 0..10_000 {
        let mut gw = vec![0.0; k * EMBED_DIM];
        let mut gb = vec![0.0; k];
        for (e, s) in train_emb.iter().zip(&train.samples) {
            let probs = softmax_logits(&weights, &bias, e, k);
            for c in 0..k {
                let delta = (probs[c] - if c == s.prompt { 1.0 } else { 0.0 }) / n;
                gb[c] += delta;
                for (slot, &x) in gw[c * EMBED_DIM..(c + 1) * EMBED_DIM]
                    .iter_mut()
                    .zip(e.data())
                {
                    *slot += delta * x;
                }
            }
        }
        let grad_norm = gw
            .iter()
            .chain(&gb)
            .map(|g| g * g)
            .sum::<Real>()
            .sqrt();
        if grad_norm < 1e-6 {
            break;
        }
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        for (b, g) in bias.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
    }
    let mut correct = 0usize;
    for (e, s) in test_emb.iter().zip(&test.samples) {
        let scores: Vec<Real> = (0..k)
            .map(|c| {
                bias[c]
                    + weights[c * EMBED_DIM..(c + 1) * EMBED_DIM]
                        .iter()
                        .zip(e.data())
                        .map(|(w, x)| w * x)
                        .sum::<Real>()
            })
            .collect();
        if argmax_lowest_tie(&scores) == s.prompt {
            correct += 1;
        }
    }
    Ok(correct as Real / test.samples.len() as Real)
}

fn softmax_logits(weights: &[Real], bias: &[Real], e: &Tensor, k: usize) -> Vec<Real> {
    let mut logits: Vec<Real> = (0..k)
        .map(|c| {
            bias[c]
                + weights[c * EMBED_DIM..(c + 1) * EMBED_DIM]
                    .iter()
                    .zip(e.data())
                    .map(|(w, x)| w * x)
                    .sum::<Real>()
        })
        .collect();
    let max = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut denom = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        denom += *l;
    }
    for l in logits.iter_mut() {
        *l /= denom;
    }
    logits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coremath::{Activation, MlpSpec};
    use crate::datagen::DomainSpec;
    use crate::MlpParams;

    /// Dataset of one-hot 16-d "images", one per class, repeated.
    fn one_hot_dataset(k: usize, reps: usize) -> Dataset {
        let samples = (0..k * reps)
            .map(|i| {
                let class = i % k;
                let mut data = vec![0.0; EMBED_DIM];
                data[class] = 1.0;
                PairedSample {
                    image: Tensor::from_vec_unchecked(vec![EMBED_DIM], data),
                    prompt: class,
                }
            })
            .collect();
        Dataset::from_samples(samples, k, DomainSpec::default(), 0).unwrap()
    }

    /// Model whose encoder is a relu identity over 16-d inputs and whose
    /// prompt table is the identity, so class-c inputs embed exactly on
    /// prompt c.
    fn identity_model(k: usize) -> ContrastiveModel {
        let spec =
            MlpSpec::uniform(vec![EMBED_DIM, EMBED_DIM, EMBED_DIM], Activation::Relu).unwrap();
        let mut encoder = MlpParams::zeros(&spec);
        for l in 0..2 {
            for i in 0..EMBED_DIM {
                encoder.weights[l].data_mut()[i * EMBED_DIM + i] = 1.0;
            }
        }
        let mut table = Tensor::zeros(&[k, EMBED_DIM]);
        for c in 0..k {
            table.data_mut()[c * EMBED_DIM + c] = 1.0;
        }
        ContrastiveModel {
            data_dim: EMBED_DIM,
            k,
            encoder,
            prompt_table: table,
            log_tau: (0.07f64).ln(),
        }
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let ds = one_hot_dataset(4, 4);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            seed: 5,
            ..Default::default()
        };
        let out = train_baseline(&ds, &cfg).unwrap();
        let mut rng = SeededRng::new(5);
        let fresh = ContrastiveModel::default_for(ds.dim(), ds.k, &mut rng).unwrap();
        assert_eq!(out.model, fresh);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = one_hot_dataset(4, 4);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let a = train_baseline(&ds, &cfg).unwrap();
        let b = train_baseline(&ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn batch_of_one_rejected() {
        let ds = one_hot_dataset(4, 4);
        let cfg = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(train_baseline(&ds, &cfg).is_err());
    }

    #[test]
    fn zero_shot_perfect_on_orthogonal_embeddings() {
        let ds = one_hot_dataset(4, 8);
        let m = identity_model(4);
        assert_eq!(zero_shot(&m, &ds).unwrap(), 1.0);
    }

    #[test]
    fn zero_shot_rejects_class_mismatch() {
        let ds = one_hot_dataset(4, 2);
        let m = identity_model(3);
        assert!(zero_shot(&m, &ds).is_err());
    }

    // An untrained model predicts with no relation to the labels, so over
    // many random initializations the accuracy averages to chance.
    #[test]
    fn zero_shot_chance_level_for_random_models() {
        let mut spec = DomainSpec::default();
        spec.center_jitter = 1;
        let ds = crate::datagen::gen_dataset_seeded(&spec, 400, 77).unwrap();
        let mut total = 0.0;
        let runs = 100;
        for seed in 0..runs {
            let mut rng = SeededRng::new(1000 + seed);
            let m = ContrastiveModel::default_for(ds.dim(), ds.k, &mut rng).unwrap();
            total += zero_shot(&m, &ds).unwrap();
        }
        let mean = total / runs as f64;
        assert!((mean - 0.25).abs() < 0.05, "chance-level mean {mean}");
    }

    #[test]
    fn argmax_breaks_ties_low_and_ignores_positive_scaling() {
        assert_eq!(argmax_lowest_tie(&[0.3, 0.3, 0.1]), 0);
        assert_eq!(argmax_lowest_tie(&[0.1, 0.5, 0.5]), 1);
        let scores = [0.2, -0.4, 0.9, 0.9];
        for scale in [0.5, 1.0, 7.3] {
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            assert_eq!(argmax_lowest_tie(&scaled), argmax_lowest_tie(&scores));
        }
    }

    #[test]
    fn probe_perfect_on_separable_embeddings() {
        let ds = one_hot_dataset(4, 8);
        let m = identity_model(4);
        let acc = linear_probe(&m, &ds, &ds).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_with_shuffled_labels_is_chance() {
        let m = identity_model(4);
        let test = one_hot_dataset(4, 16);
        let mut total = 0.0;
        let runs = 100;
        for seed in 0..runs {
            let mut train = one_hot_dataset(4, 16);
            let mut labels: Vec<usize> =
                train.samples.iter().map(|s| s.prompt).collect();
            let mut rng = SeededRng::new(2000 + seed);
            rng.shuffle(&mut labels);
            for (s, l) in train.samples.iter_mut().zip(labels) {
                s.prompt = l;
            }
            total += linear_probe(&m, &train, &test).unwrap();
        }
        let mean = total / runs as f64;
        assert!((mean - 0.25).abs() < 0.05, "shuffled-label mean {mean}");
    }

    #[test]
    fn joint_step_on_duplicated_data_doubles_the_baseline() {
        let mut rng = SeededRng::new(8);
        let m = ContrastiveModel::new(6, 4, &[8], &mut rng).unwrap();
        let batch: Vec<PairedSample> = (0..4)
            .map(|c| {
                let data: Vec<Real> = (0..6).map(|_| rng.normal()).collect();
                PairedSample {
                    image: Tensor::from_vec_unchecked(vec![6], data),
                    prompt: c,
                }
            })
            .collect();
        let base = clip_loss(&m, &batch).unwrap();
        let (joint_loss, joint_grads) = joint_loss_and_grads(&m, &batch, &batch).unwrap();
        assert!((joint_loss - 2.0 * base.loss).abs() < 1e-12);
        // gradient direction identical: cosine similarity of flattened grads
        let flatten = |g: &ClipGrads| -> Vec<Real> {
            let mut v = Vec::new();
            for b in g.encoder.blocks() {
                v.extend_from_slice(b);
            }
            v.extend_from_slice(g.prompt_table.data());
            v.push(g.log_tau);
            v
        };
        let a = flatten(&base.grads);
        let b = flatten(&joint_grads);
        let dot: Real = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: Real = a.iter().map(|x| x * x).sum::<Real>().sqrt();
        let nb: Real = b.iter().map(|x| x * x).sum::<Real>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn edsam_rejects_empty_adv_set() {
        let ds = one_hot_dataset(4, 4);
        let adv = AdvDataset {
            entries: Vec::new(),
            config: crate::advgen::GenConfig::default(),
            skipped: Vec::new(),
        };
        assert!(train_edsam(&ds, &adv, &TrainConfig::default()).is_err());
    }
}
