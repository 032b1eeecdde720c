//! Synthetic paired image/prompt data with controllable nuisance factors.
//!
//! Four shape classes rendered onto an 8x8 grayscale grid. A [`DomainSpec`]
//! controls the nuisances (background level, foreground intensity, shape
//! placement jitter, pixel noise, contrast inversion); shifted copies of a
//! spec stand in for unseen test distributions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::coremath::SeededRng;
use crate::error::{Error, Result};
use crate::io_util;
use crate::{Real, Tensor};

pub const IMG_SIDE: usize = 8;
pub const IMG_DIM: usize = IMG_SIDE * IMG_SIDE;
pub const N_CLASSES: usize = 4;

/// One image with its categorical prompt id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub image: Tensor,
    pub prompt: usize,
}

/// Nuisance parameters of a rendering domain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    pub background_mean: f64,
    pub background_jitter: f64,
    pub foreground_mean: f64,
    pub foreground_jitter: f64,
    /// Placement jitter radius in pixels for the shapes that have a center
    /// (disc and plus); the stripe classes keep a fixed phase.
    pub center_jitter: usize,
    pub pixel_noise_std: f64,
    pub contrast_flip_prob: f64,
}

impl Default for DomainSpec {
    /// The source training domain: narrow nuisances, so unseen shifts are
    /// genuinely out of distribution.
    fn default() -> Self {
        DomainSpec {
            background_mean: 0.10,
            background_jitter: 0.05,
            foreground_mean: 0.90,
            foreground_jitter: 0.05,
            center_jitter: 0,
            pixel_noise_std: 0.05,
            contrast_flip_prob: 0.0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.background_jitter < 0.0
            || self.foreground_jitter < 0.0
            || self.pixel_noise_std < 0.0
        {
            return Err(Error::invalid("jitter and noise std must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.contrast_flip_prob) {
            return Err(Error::invalid("contrast_flip_prob must be in [0,1]"));
        }
        Ok(())
    }
}

/// The named domain shifts used as unseen test distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftName {
    Background,
    Intensity,
    Noise,
    Contrast,
}

pub const ALL_SHIFTS: [ShiftName; 4] = [
    ShiftName::Background,
    ShiftName::Intensity,
    ShiftName::Noise,
    ShiftName::Contrast,
];

impl ShiftName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftName::Background => "background",
            ShiftName::Intensity => "intensity",
            ShiftName::Noise => "noise",
            ShiftName::Contrast => "contrast",
        }
    }
}

impl std::fmt::Display for ShiftName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background" => Ok(ShiftName::Background),
            "intensity" => Ok(ShiftName::Intensity),
            "noise" => Ok(ShiftName::Noise),
            "contrast" => Ok(ShiftName::Contrast),
            other => Err(Error::invalid(format!(
                "unknown shift '{other}' (expected background|intensity|noise|contrast)"
            ))),
        }
    }
}

/// Modified copy of `spec` with exactly the named field changed.
pub fn shift_domain(spec: &DomainSpec, shift: ShiftName) -> DomainSpec {
    let mut out = spec.clone();
    match shift {
        ShiftName::Background => out.background_mean += 0.3,
        ShiftName::Intensity => out.foreground_mean *= 0.6,
        ShiftName::Noise => out.pixel_noise_std += 0.15,
        ShiftName::Contrast => out.contrast_flip_prob = 1.0,
    }
    out
}

/// Samples plus the domain they were rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub domain: DomainSpec,
    pub seed: u64,
    pub k: usize,
}

impl Dataset {
    pub fn from_samples(
        samples: Vec<PairedSample>,
        k: usize,
        domain: DomainSpec,
        seed: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("dataset must be nonempty"));
        }
        let dim = samples[0].image.len();
        for (i, s) in samples.iter().enumerate() {
            if s.image.len() != dim {
                return Err(Error::shape(
                    format!("image dim {dim}"),
                    format!("dim {} at sample {i}", s.image.len()),
                ));
            }
            if s.prompt >= k {
                return Err(Error::invalid(format!(
                    "prompt id {} out of range (k = {k}) at sample {i}",
                    s.prompt
                )));
            }
        }
        Ok(Dataset {
            samples,
            domain,
            seed,
            k,
        })
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].image.len()
    }

    /// Sample indices grouped by class id.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.prompt].push(i);
        }
        groups
    }

    /// Per-class mean images.
    pub fn class_means(&self) -> Vec<Tensor> {
        let dim = self.dim();
        let mut sums = vec![vec![0.0; dim]; self.k];
        let mut counts = vec![0usize; self.k];
        for s in &self.samples {
            counts[s.prompt] += 1;
            for (acc, &v) in sums[s.prompt].iter_mut().zip(s.image.data()) {
                *acc += v;
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(sum, c)| {
                let c = c.max(1) as f64;
                Tensor::vector(&sum.iter().map(|v| v / c).collect::<Vec<_>>()).unwrap()
            })
            .collect()
    }
}

fn render_mask(class: usize, dx: i64, dy: i64) -> [bool; IMG_DIM] {
    let mut mask = [false; IMG_DIM];
    let side = IMG_SIDE as i64;
    for r in 0..side {
        for c in 0..side {
            let on = match class {
                // filled disc
                0 => {
                    let rr = r as f64 - (3.5 + dy as f64);
                    let cc = c as f64 - (3.5 + dx as f64);
                    rr * rr + cc * cc <= 2.5 * 2.5
                }
                // plus: two full-width rows and two full-height columns
                1 => {
                    let row_on = r == 3 + dy || r == 4 + dy;
                    let col_on = c == 3 + dx || c == 4 + dx;
                    row_on || col_on
                }
                // horizontal stripes, fixed phase (no center to jitter)
                2 => r % 2 == 0,
                // vertical stripes, fixed phase
                3 => c % 2 == 0,
                _ => unreachable!("class id out of range"),
            };
            if on {
                mask[(r * side + c) as usize] = true;
            }
        }
    }
    mask
}

fn render_sample(class: usize, spec: &DomainSpec, rng: &mut SeededRng) -> PairedSample {
    let j = spec.background_jitter;
    let bg = spec.background_mean + rng.uniform(-j, j);
    let j = spec.foreground_jitter;
    let fg = spec.foreground_mean + rng.uniform(-j, j);
    let r = spec.center_jitter as i64;
    let dx = if r == 0 { 0 } else { rng.below((2 * r + 1) as usize) as i64 - r };
    let dy = if r == 0 { 0 } else { rng.below((2 * r + 1) as usize) as i64 - r };
    let flip = spec.contrast_flip_prob > 0.0 && rng.next_f64() < spec.contrast_flip_prob;
    let mask = render_mask(class, dx, dy);
    let mut data = Vec::with_capacity(IMG_DIM);
    for on in mask {
        let base = if on { fg } else { bg };
        let mut v = base + spec.pixel_noise_std * rng.normal();
        if flip {
            v = 1.0 - v;
        }
        data.push(v.clamp(0.0, 1.0));
    }
    PairedSample {
        image: Tensor::from_vec_unchecked(vec![IMG_DIM], data),
        prompt: class,
    }
}

/// Render `n` samples with classes assigned round-robin (balanced within 1).
pub fn gen_dataset(spec: &DomainSpec, n: usize, rng: &mut SeededRng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("gen_dataset requires n >= 1"));
    }
    spec.validate()?;
    let samples = (0..n)
        .map(|i| render_sample(i % N_CLASSES, spec, rng))
        .collect();
    Dataset::from_samples(samples, N_CLASSES, spec.clone(), 0)
}

/// Convenience wrapper fixing the dataset seed and rng together.
pub fn gen_dataset_seeded(spec: &DomainSpec, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = SeededRng::new(seed);
    let mut ds = gen_dataset(spec, n, &mut rng)?;
    ds.seed = seed;
    Ok(ds)
}

const MAGIC: &str = "EDSD";
const VERSION: u16 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Trailer {
    domain: DomainSpec,
    seed: u64,
}

/// Dataset file: magic `EDSD`, version u16, k/n/dim u32, then per-sample
/// (class u8, dim little-endian f64), then a JSON trailer with the domain
/// spec and seed.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    io_util::write_bytes(&mut w, path, MAGIC.as_bytes())?;
    io_util::write_u16(&mut w, path, VERSION)?;
    io_util::write_u32(&mut w, path, dataset.k as u32)?;
    io_util::write_u32(&mut w, path, dataset.n() as u32)?;
    io_util::write_u32(&mut w, path, dataset.dim() as u32)?;
    for s in &dataset.samples {
        io_util::write_bytes(&mut w, path, &[s.prompt as u8])?;
        for &v in s.image.data() {
            io_util::write_f64(&mut w, path, v)?;
        }
    }
    let trailer = Trailer {
        domain: dataset.domain.clone(),
        seed: dataset.seed,
    };
    let json = serde_json::to_vec(&trailer)?;
    io_util::write_bytes(&mut w, path, &json)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
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
    let k = io_util::read_u32(&mut r, path)? as usize;
    let n = io_util::read_u32(&mut r, path)? as usize;
    let dim = io_util::read_u32(&mut r, path)? as usize;
    if k == 0 || n == 0 || dim == 0 || dim > 1 << 20 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("implausible header k={k} n={n} dim={dim}"),
        });
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let class = io_util::read_u8(&mut r, path)? as usize;
        let mut data = Vec::with_capacity(dim);
        for _ in 0..dim {
            data.push(io_util::read_f64(&mut r, path)?);
        }
        samples.push(PairedSample {
            image: Tensor::from_vec(&[dim], data).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
            prompt: class,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    let trailer: Trailer = serde_json::from_slice(&rest).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: format!("bad JSON trailer: {e}"),
    })?;
    Dataset::from_samples(samples, k, trailer.domain, trailer.seed).map_err(|e| {
        Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}

/// Mean intensity of a dataset, a quick scalar summary used in tests.
pub fn mean_pixel(dataset: &Dataset) -> Real {
    let total: f64 = dataset
        .samples
        .iter()
        .map(|s| s.image.data().iter().sum::<f64>())
        .sum();
    total / (dataset.n() * dataset.dim()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate_spec() -> DomainSpec {
        DomainSpec {
            background_mean: 0.1,
            background_jitter: 0.0,
            foreground_mean: 0.9,
            foreground_jitter: 0.0,
            center_jitter: 0,
            pixel_noise_std: 0.0,
            contrast_flip_prob: 0.0,
        }
    }

    #[test]
    fn degenerate_nuisances_render_identically_per_class() {
        let ds = gen_dataset_seeded(&degenerate_spec(), 40, 7).unwrap();
        for class in 0..N_CLASSES {
            let idx = ds.by_class()[class].clone();
            let first = &ds.samples[idx[0]].image;
            for &i in &idx[1..] {
                assert_eq!(&ds.samples[i].image, first, "class {class}");
            }
        }
    }

    #[test]
    fn class_histogram_balanced() {
        let ds = gen_dataset_seeded(&DomainSpec::default(), 1000, 1).unwrap();
        let counts: Vec<usize> = ds.by_class().iter().map(Vec::len).collect();
        for c in counts {
            assert!((c as i64 - 250).abs() <= 1, "count {c}");
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        let mut spec = DomainSpec::default();
        spec.pixel_noise_std = 0.4;
        spec.contrast_flip_prob = 0.5;
        let ds = gen_dataset_seeded(&spec, 200, 3).unwrap();
        for s in &ds.samples {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn determinism_by_seed() {
        let a = gen_dataset_seeded(&DomainSpec::default(), 64, 5).unwrap();
        let b = gen_dataset_seeded(&DomainSpec::default(), 64, 5).unwrap();
        assert_eq!(a, b);
        let c = gen_dataset_seeded(&DomainSpec::default(), 64, 6).unwrap();
        assert_ne!(a, c);
    }

    // The four classes must be far easier to tell apart than their
    // within-class nuisance spread.
    #[test]
    fn classes_are_distinguishable_under_default_spec() {
        let ds = gen_dataset_seeded(&DomainSpec::default(), 400, 11).unwrap();
        let means = ds.class_means();
        let mut inter = Vec::new();
        for a in 0..N_CLASSES {
            for b in (a + 1)..N_CLASSES {
                inter.push(means[a].sub(&means[b]).unwrap().norm_l2());
            }
        }
        let mut intra = Vec::new();
        for class in 0..N_CLASSES {
            for &i in &ds.by_class()[class] {
                intra.push(ds.samples[i].image.sub(&means[class]).unwrap().norm_l2());
            }
        }
        let mean_inter: f64 = inter.iter().sum::<f64>() / inter.len() as f64;
        let mean_intra: f64 = intra.iter().sum::<f64>() / intra.len() as f64;
        assert!(
            mean_inter > 3.0 * mean_intra,
            "inter {mean_inter} intra {mean_intra}"
        );
    }

    #[test]
    fn shift_changes_only_the_named_field() {
        let base = DomainSpec::default();
        let shifted = shift_domain(&base, ShiftName::Noise);
        assert!((shifted.pixel_noise_std - (base.pixel_noise_std + 0.15)).abs() < 1e-15);
        let mut expect = base.clone();
        expect.pixel_noise_std = shifted.pixel_noise_std;
        assert_eq!(shifted, expect);
    }

    #[test]
    fn background_shift_on_zero_background() {
        let mut base = DomainSpec::default();
        base.background_mean = 0.0;
        let shifted = shift_domain(&base, ShiftName::Background);
        assert!((shifted.background_mean - 0.3).abs() < 1e-15);
    }

    #[test]
    fn unknown_shift_name_rejected() {
        assert!(ShiftName::from_str("blur").is_err());
        assert_eq!(ShiftName::from_str("contrast").unwrap(), ShiftName::Contrast);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.edsd");
        let ds = gen_dataset_seeded(&DomainSpec::default(), 32, 9).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.edsd");
        let ds = gen_dataset_seeded(&DomainSpec::default(), 8, 9).unwrap();
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..40]).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.edsd");
        let mut bytes = b"EDSD".to_vec();
        bytes.extend_from_slice(&42u16.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 64]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::UnsupportedVersion { found: 42, .. })
        ));
    }
}
