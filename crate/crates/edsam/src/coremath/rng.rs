use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seeded generator.
///
/// Output `k` is `mix(key + (k+1)*GOLDEN)`, so the stream is a pure function
/// of `(seed, counter)`: identical seed and call sequence give an identical,
/// platform-independent stream. `derive` builds statistically independent
/// child streams for per-sample work without consuming parent state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    key: u64,
    counter: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Child stream for `(self, stream)`. Deterministic, order-independent.
    pub fn derive(&self, stream: u64) -> Self {
        SeededRng {
            key: mix(self.key ^ mix(stream.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal draw via Box-Muller.
    ///
    /// Uses `libm` for the transcendentals so the stream stays bit-exact
    /// across platforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        r * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. normal draws with per-coordinate `mean` and common `std`.
///
/// `mean` must either match `shape` or be a single value broadcast to every
/// coordinate. `std == 0` degenerates to the mean exactly.
pub fn gaussian_sample<S: Scalar>(
    rng: &mut SeededRng,
    mean: &Tensor<S>,
    std: S,
    shape: &[usize],
) -> Result<Tensor<S>> {
    if std < S::zero() {
        return Err(Error::invalid(format!(
            "gaussian_sample requires std >= 0, got {std}"
        )));
    }
    let len: usize = shape.iter().product();
    let broadcast = mean.len() == 1;
    if !broadcast && mean.shape() != shape {
        return Err(Error::shape(
            format!("{:?} (or scalar mean)", shape),
            format!("{:?}", mean.shape()),
        ));
    }
    let mean_data = mean.data();
    let data = (0..len)
        .map(|i| {
            let m = if broadcast { mean_data[0] } else { mean_data[i] };
            m + std * S::from_f64(rng.normal())
        })
        .collect();
    let out = Tensor::from_vec_unchecked(shape.to_vec(), data);
    out.validate_finite("gaussian_sample")?;
    Ok(out)
}

/// Standard normal tensor, mean 0 / std 1.
pub fn standard_normal<S: Scalar>(rng: &mut SeededRng, shape: &[usize]) -> Tensor<S> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| S::from_f64(rng.normal())).collect();
    Tensor::from_vec_unchecked(shape.to_vec(), data)
}
