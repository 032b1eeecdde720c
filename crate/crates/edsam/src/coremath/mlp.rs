//! Fully-connected network with hand-derived reverse-mode gradients.
//!
//! The network family is fixed: a stack of linear layers with an elementwise
//! activation after every hidden layer and a linear final layer. Forward
//! returns every intermediate, backward consumes them and produces exact
//! gradients; there is no general autodiff graph.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util;

use super::rng::SeededRng;
use super::scalar::Scalar;
use super::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Gelu => {
                let c = S::from_f64(SQRT_2_OVER_PI);
                let a = S::from_f64(GELU_CUBIC);
                let u = c * (x + a * x * x * x);
                S::from_f64(0.5) * x * (S::one() + u.tanh())
            }
            Activation::Relu => {
                if x > S::zero() {
                    x
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Gelu => {
                let c = S::from_f64(SQRT_2_OVER_PI);
                let a = S::from_f64(GELU_CUBIC);
                let half = S::from_f64(0.5);
                let u = c * (x + a * x * x * x);
                let t = u.tanh();
                let du = c * (S::one() + S::from_f64(3.0) * a * x * x);
                half * (S::one() + t) + half * x * (S::one() - t * t) * du
            }
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Layer widths `[input, hidden.., output]` plus one activation per hidden
/// layer. At least one hidden layer; the final layer is always linear.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::invalid(format!(
                "mlp needs at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("mlp widths must be >= 1".to_string()));
        }
        if activations.len() != widths.len() - 2 {
            return Err(Error::invalid(format!(
                "expected {} activations for widths {widths:?}, got {}",
                widths.len() - 2,
                activations.len()
            )));
        }
        Ok(MlpSpec {
            widths,
            activations,
        })
    }

    /// Same activation after every hidden layer.
    pub fn uniform(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        MlpSpec::new(widths, vec![activation; hidden])
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    fn activation_for_layer(&self, layer: usize) -> Option<Activation> {
        if layer + 1 < self.layer_count() {
            Some(self.activations[layer])
        } else {
            None // final layer linear
        }
    }
}

/// Per-layer weight matrices (row-major, `[out, in]`) and bias vectors.
///
/// Doubles as the gradient container: `mlp_backward` returns gradients in an
/// `MlpParams` of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<S> {
    pub spec: MlpSpec,
    pub weights: Vec<Tensor<S>>,
    pub biases: Vec<Tensor<S>>,
}

impl<S: Scalar> MlpParams<S> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.layer_count() {
            weights.push(Tensor::zeros(&[spec.widths[l + 1], spec.widths[l]]));
            biases.push(Tensor::zeros(&[spec.widths[l + 1]]));
        }
        MlpParams {
            spec: spec.clone(),
            weights,
            biases,
        }
    }

    /// He-style initialization, deterministic from `rng`.
    pub fn init(spec: &MlpSpec, rng: &mut SeededRng) -> Self {
        let mut params = Self::zeros(spec);
        for l in 0..spec.layer_count() {
            let fan_in = spec.widths[l] as f64;
            let gain = if spec.activation_for_layer(l).is_some() {
                2.0
            } else {
                1.0
            };
            let std = S::from_f64((gain / fan_in).sqrt());
            for w in params.weights[l].data_mut() {
                *w = std * S::from_f64(rng.normal());
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.spec)
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>()
            + self.biases.iter().map(Tensor::len).sum::<usize>()
    }

    /// Parameter blocks in a stable order (weights then bias per layer).
    pub fn blocks(&self) -> Vec<&[S]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for l in 0..self.weights.len() {
            out.push(self.weights[l].data());
            out.push(self.biases[l].data());
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.data_mut());
        }
        out
    }

    /// Elementwise `self += other * factor`. Shapes must match.
    pub fn add_scaled(&mut self, other: &Self, factor: S) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::shape(
                format!("{:?}", self.spec.widths),
                format!("{:?}", other.spec.widths),
            ));
        }
        for (mine, theirs) in self
            .blocks_mut()
            .into_iter()
            .zip(other.blocks().into_iter())
        {
            for (m, t) in mine.iter_mut().zip(theirs.iter()) {
                *m += *t * factor;
            }
        }
        Ok(())
    }
}

/// Everything `mlp_forward` computed: the input, each layer's pre-activation
/// and each layer's output. Required by `mlp_backward`.
#[derive(Debug, Clone)]
pub struct MlpActivations<S> {
    pub input: Vec<S>,
    pub pre: Vec<Vec<S>>,
    pub post: Vec<Vec<S>>,
}

impl<S: Scalar> MlpActivations<S> {
    pub fn output(&self) -> &[S] {
        self.post.last().expect("at least one layer")
    }
}

/// Matrix-vector product plus bias: `y = W x + b` with `W` row-major `[out, in]`.
fn affine<S: Scalar>(weight: &Tensor<S>, bias: &Tensor<S>, x: &[S]) -> Vec<S> {
    let out_dim = weight.shape()[0];
    let in_dim = weight.shape()[1];
    debug_assert_eq!(x.len(), in_dim);
    let w = weight.data();
    let b = bias.data();
    let mut y = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += *wi * *xi;
        }
        y.push(acc);
    }
    y
}

/// Forward pass over a single input vector, keeping all intermediates.
pub fn mlp_forward<S: Scalar>(params: &MlpParams<S>, input: &Tensor<S>) -> Result<MlpActivations<S>> {
    let spec = &params.spec;
    if input.shape() != [spec.input_dim()] {
        return Err(Error::shape(
            format!("[{}]", spec.input_dim()),
            format!("{:?}", input.shape()),
        ));
    }
    let mut pre = Vec::with_capacity(spec.layer_count());
    let mut post = Vec::with_capacity(spec.layer_count());
    let mut current = input.data().to_vec();
    for l in 0..spec.layer_count() {
        let z = affine(&params.weights[l], &params.biases[l], &current);
        let a = match spec.activation_for_layer(l) {
            Some(act) => z.iter().map(|&v| act.apply(v)).collect(),
            None => z.clone(),
        };
        pre.push(z);
        current = a.clone();
        post.push(a);
    }
    if current.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mlp_forward output".into()));
    }
    Ok(MlpActivations {
        input: input.data().to_vec(),
        pre,
        post,
    })
}

/// Reverse-mode gradients for the scalar whose output-gradient is
/// `grad_output`. Returns `(grad_params, grad_input)`.
pub fn mlp_backward<S: Scalar>(
    params: &MlpParams<S>,
    acts: &MlpActivations<S>,
    grad_output: &Tensor<S>,
) -> Result<(MlpParams<S>, Tensor<S>)> {
    let spec = &params.spec;
    let layers = spec.layer_count();
    if acts.pre.len() != layers
        || acts.post.len() != layers
        || acts.input.len() != spec.input_dim()
        || (0..layers).any(|l| acts.pre[l].len() != spec.widths[l + 1])
    {
        return Err(Error::invalid(
            "activations do not match these params (stale or from another network)".to_string(),
        ));
    }
    if grad_output.shape() != [spec.output_dim()] {
        return Err(Error::shape(
            format!("[{}]", spec.output_dim()),
            format!("{:?}", grad_output.shape()),
        ));
    }

    let mut grads = params.zeros_like();
    // dL/da for the layer currently being processed.
    let mut grad_a = grad_output.data().to_vec();
    for l in (0..layers).rev() {
        // dL/dz = dL/da * act'(z); final layer is linear.
        let grad_z: Vec<S> = match spec.activation_for_layer(l) {
            Some(act) => acts.pre[l]
                .iter()
                .zip(grad_a.iter())
                .map(|(&z, &g)| g * act.derivative(z))
                .collect(),
            None => grad_a.clone(),
        };
        let layer_in: &[S] = if l == 0 { &acts.input } else { &acts.post[l - 1] };
        let in_dim = spec.widths[l];
        {
            let gw = grads.weights[l].data_mut();
            for (o, &gz) in grad_z.iter().enumerate() {
                let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                for (slot, &xi) in row.iter_mut().zip(layer_in.iter()) {
                    *slot += gz * xi;
                }
            }
        }
        grads.biases[l].data_mut().copy_from_slice(&grad_z);
        // dL/d(layer input) = W^T dL/dz
        let w = params.weights[l].data();
        let mut next = vec![S::zero(); in_dim];
        for (o, &gz) in grad_z.iter().enumerate() {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            for (slot, &wi) in next.iter_mut().zip(row.iter()) {
                *slot += wi * gz;
            }
        }
        grad_a = next;
    }
    let grad_input = Tensor::from_vec(vec![spec.input_dim()].as_slice(), grad_a)
        .map_err(|_| Error::NonFinite("mlp_backward grad_input".into()))?;
    Ok((grads, grad_input))
}

const MAGIC: &str = "EDSAM\0";
const VERSION: u16 = 1;

impl<S: Scalar> MlpParams<S> {
    /// Versioned binary checkpoint: magic `EDSAM\0`, format version u16,
    /// widths, activation ids, then weights and biases row-major as
    /// little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w, path)
    }

    pub(crate) fn write_to(&self, w: &mut impl std::io::Write, path: &Path) -> Result<()> {
        io_util::write_bytes(w, path, MAGIC.as_bytes())?;
        io_util::write_u16(w, path, VERSION)?;
        io_util::write_u32(w, path, self.spec.widths.len() as u32)?;
        for &width in &self.spec.widths {
            io_util::write_u32(w, path, width as u32)?;
        }
        for act in &self.spec.activations {
            io_util::write_bytes(w, path, &[act.id()])?;
        }
        for l in 0..self.spec.layer_count() {
            for &v in self.weights[l].data() {
                io_util::write_f64(w, path, v.to_f64())?;
            }
            for &v in self.biases[l].data() {
                io_util::write_f64(w, path, v.to_f64())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r, path)
    }

    pub(crate) fn read_from(r: &mut impl std::io::Read, path: &Path) -> Result<Self> {
        io_util::expect_magic(r, path, MAGIC)?;
        io_util::expect_version(r, path, VERSION)?;
        let n_widths = io_util::read_u32(r, path)? as usize;
        if !(3..=64).contains(&n_widths) {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("implausible width count {n_widths}"),
            });
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(io_util::read_u32(r, path)? as usize);
        }
        let mut activations = Vec::with_capacity(n_widths - 2);
        for _ in 0..n_widths - 2 {
            let id = io_util::read_u8(r, path)?;
            let act = Activation::from_id(id).ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("unknown activation id {id}"),
            })?;
            activations.push(act);
        }
        let spec = MlpSpec::new(widths, activations).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut params = Self::zeros(&spec);
        for l in 0..spec.layer_count() {
            for slot in params.weights[l].data_mut() {
                *slot = S::from_f64(io_util::read_f64(r, path)?);
            }
            for slot in params.biases[l].data_mut() {
                *slot = S::from_f64(io_util::read_f64(r, path)?);
            }
        }
        Ok(params)
    }
}
