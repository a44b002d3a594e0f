//! Deterministic synthetic segmentation data with per-client heterogeneity.
//!
//! Each sample is a small scene of rectangles and discs laid out in a latent
//! world frame `[-1, 1]²`. Every client observes the world through its own
//! pose (rotation + translation) and draws shape classes from its own class
//! prior, which gives two independent sources of non-IID data: input
//! geometry and label skew.
//!
//! Inputs are a 3×3 box-smoothed one-hot encoding of the mask, mixed into
//! `F` channels by a fixed matrix shared by all clients, plus Gaussian noise.
//!
//! All randomness comes from ChaCha streams keyed by `(seed, index, field)`,
//! so a sample depends only on its profile and position, never on
//! generation order.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub features: usize,
    pub classes: usize,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.height * self.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate grid {}x{}",
                self.height, self.width
            )));
        }
        if self.features == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument(
                "features and classes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    /// Radians.
    pub rotation: f64,
    pub translation: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: usize,
    pub n_samples: usize,
    pub class_prior: Vec<f64>,
    pub pose: Pose,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ClientProfile {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {}: n_samples must be at least 1",
                self.client_id
            )));
        }
        if self.class_prior.len() != classes {
            return Err(Error::LengthMismatch {
                expected: classes,
                actual: self.class_prior.len(),
            });
        }
        if self
            .class_prior
            .iter()
            .any(|&p| !(p >= 0.0) || !p.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "client {}: class prior entries must be finite and non-negative",
                self.client_id
            )));
        }
        let total: f64 = self.class_prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "client {}: class prior sums to {total}, expected 1",
                self.client_id
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "client {}: noise_sigma must be finite and non-negative",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// One `(input, mask)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub input: Grid<T>,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset<T> {
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

// Stream identifiers for the counter-based generator.
const FIELD_SCENE: u64 = 1;
const FIELD_NOISE: u64 = 2;
const FIELD_MIXING: u64 = 3;
const FIELD_DIRICHLET: u64 = 4;
const MIXING_SEED: u64 = 0x5EED_0FF1_E1D5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, index, field)`.
pub fn keyed_rng(seed: u64, index: u64, field: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ index) ^ field);
    ChaCha8Rng::seed_from_u64(key)
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Rect { half_w: f64, half_h: f64 },
    Disc { radius: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    class: usize,
    center: [f64; 2],
    kind: ShapeKind,
}

impl Shape {
    fn contains(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        match self.kind {
            ShapeKind::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            ShapeKind::Disc { radius } => dx * dx + dy * dy <= radius * radius,
        }
    }
}

fn sample_class<R: Rng>(rng: &mut R, prior: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding slack; take the last class with mass
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn render_mask(profile: &ClientProfile, geometry: &Geometry, index: u64) -> Mask {
    let mut rng = keyed_rng(profile.seed, index, FIELD_SCENE);
    let n_shapes = rng.random_range(3..=5);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let class = sample_class(&mut rng, &profile.class_prior);
            let center = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
            let kind = if rng.random::<bool>() {
                ShapeKind::Rect {
                    half_w: rng.random_range(0.15..0.45),
                    half_h: rng.random_range(0.15..0.45),
                }
            } else {
                ShapeKind::Disc {
                    radius: rng.random_range(0.15..0.45),
                }
            };
            Shape {
                class,
                center,
                kind,
            }
        })
        .collect();

    let (sin, cos) = profile.pose.rotation.sin_cos();
    let [tx, ty] = profile.pose.translation;
    let (h, w) = (geometry.height, geometry.width);
    let mut labels = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            let world = [cos * u - sin * v + tx, sin * u + cos * v + ty];
            if let Some(s) = shapes.iter().rev().find(|s| s.contains(world)) {
                labels[y * w + x] = s.class;
            }
        }
    }
    Mask::new(h, w, labels).expect("sized by construction")
}

/// Fixed class-to-feature mixing matrix, `[features][classes]`.
fn mixing_matrix(geometry: &Geometry) -> Vec<f64> {
    let (f, k) = (geometry.features, geometry.classes);
    let mut rng = keyed_rng(MIXING_SEED, (f * 1_000_003 + k) as u64, FIELD_MIXING);
    let mut a = vec![0.0; f * k];
    for fi in 0..f {
        for ki in 0..k {
            let base = if fi % k == ki { 1.0 } else { 0.0 };
            let jitter: f64 = rng.sample(StandardNormal);
            a[fi * k + ki] = base + 0.3 * jitter;
        }
    }
    a
}

fn render_input<T: Scalar>(
    mask: &Mask,
    mixing: &[f64],
    profile: &ClientProfile,
    geometry: &Geometry,
    index: u64,
) -> Grid<T> {
    let (h, w, f, k) = (
        geometry.height,
        geometry.width,
        geometry.features,
        geometry.classes,
    );
    let mut rng = keyed_rng(profile.seed, index, FIELD_NOISE);
    let mut data = Vec::with_capacity(h * w * f);
    let mut smooth = vec![0.0; k];
    for y in 0..h {
        for x in 0..w {
            smooth.iter_mut().for_each(|s| *s = 0.0);
            let mut count = 0.0;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    smooth[mask.get(ny, nx)] += 1.0;
                    count += 1.0;
                }
            }
            for fi in 0..f {
                let clean: f64 = (0..k)
                    .map(|ki| mixing[fi * k + ki] * smooth[ki] / count)
                    .sum();
                let noise: f64 = rng.sample(StandardNormal);
                data.push(T::of(clean + profile.noise_sigma * noise));
            }
        }
    }
    Grid::from_vec(h, w, f, data).expect("sized by construction")
}

/// Number of held-out samples: the last fifth, by generation order.
pub fn test_count(n_samples: usize) -> usize {
    n_samples / 5
}

pub fn generate_sample<T: Scalar>(
    profile: &ClientProfile,
    geometry: &Geometry,
    index: usize,
) -> Sample<T> {
    let mixing = mixing_matrix(geometry);
    let mask = render_mask(profile, geometry, index as u64);
    let input = render_input(&mask, &mixing, profile, geometry, index as u64);
    Sample { input, mask }
}

pub fn generate_client_dataset<T: Scalar>(
    profile: &ClientProfile,
    geometry: &Geometry,
) -> Result<ClientDataset<T>> {
    geometry.validate()?;
    profile.validate(geometry.classes)?;
    let mixing = mixing_matrix(geometry);
    let mut samples: Vec<Sample<T>> = (0..profile.n_samples as u64)
        .map(|i| {
            let mask = render_mask(profile, geometry, i);
            let input = render_input(&mask, &mixing, profile, geometry, i);
            Sample { input, mask }
        })
        .collect();
    let test = samples.split_off(profile.n_samples - test_count(profile.n_samples));
    Ok(ClientDataset {
        train: samples,
        test,
    })
}

/// `m` class priors drawn from a symmetric Dirichlet(`alpha`) over `k` classes.
///
/// Gamma variates are drawn in log space (`Γ(α) = Γ(α+1)·U^{1/α}`) so very
/// small concentrations do not underflow to an all-zero vector.
pub fn dirichlet_priors(alpha: f64, k: usize, m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "dirichlet concentration must be positive, got {alpha}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("gamma({alpha}): {e}")))?;
    Ok((0..m as u64)
        .map(|i| {
            let mut rng = keyed_rng(seed, i, FIELD_DIRICHLET);
            let logs: Vec<f64> = (0..k)
                .map(|_| {
                    let g: f64 = gamma.sample(&mut rng);
                    let u: f64 = 1.0 - rng.random::<f64>();
                    g.ln() + u.ln() / alpha
                })
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            weights.iter().map(|w| w / total).collect()
        })
        .collect())
}

pub fn label_histogram<T>(samples: &[Sample<T>], classes: usize) -> Vec<usize> {
    let mut hist = vec![0; classes];
    for s in samples {
        for &l in s.mask.labels() {
            hist[l] += 1;
        }
    }
    hist
}

// Dataset dump, all integers and floats little-endian:
//
//   magic    8 bytes  "FDWADSET"
//   version  u32      1
//   H, W, F, K  u32 each
//   n        u64      number of samples
//   then per sample:
//     input  H*W*F f64, row-major, channel fastest
//     mask   H*W   u32
const DATASET_MAGIC: &[u8; 8] = b"FDWADSET";
const DATASET_VERSION: u32 = 1;

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("dimension {v} exceeds u32")))
}

pub fn write_dataset<T: Scalar, W: Write>(
    out: &mut W,
    geometry: &Geometry,
    samples: &[Sample<T>],
) -> Result<()> {
    geometry.validate()?;
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    for d in [
        geometry.height,
        geometry.width,
        geometry.features,
        geometry.classes,
    ] {
        out.write_all(&dim_u32(d)?.to_le_bytes())?;
    }
    out.write_all(&(samples.len() as u64).to_le_bytes())?;
    let expected = (geometry.height, geometry.width, geometry.features);
    for s in samples {
        if s.input.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: s.input.shape(),
            });
        }
        s.mask.validate(geometry.classes)?;
        for v in s.input.as_slice() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
        for &l in s.mask.labels() {
            out.write_all(&dim_u32(l)?.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated dataset: {e}")))?;
    Ok(buf)
}

pub fn read_dataset<T: Scalar, R: Read>(input: &mut R) -> Result<(Geometry, Vec<Sample<T>>)> {
    if &read_array::<8, _>(input)? != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = u32::from_le_bytes(read_array(input)?);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32::from_le_bytes(read_array(input)?) as usize;
    }
    let geometry = Geometry {
        height: dims[0],
        width: dims[1],
        features: dims[2],
        classes: dims[3],
    };
    geometry
        .validate()
        .map_err(|e| Error::Format(e.to_string()))?;
    let n = u64::from_le_bytes(read_array(input)?);
    let (h, w, f) = (geometry.height, geometry.width, geometry.features);
    let mut samples = Vec::new();
    for _ in 0..n {
        let data = (0..h * w * f)
            .map(|_| Ok(T::of(f64::from_le_bytes(read_array(input)?))))
            .collect::<Result<Vec<T>>>()?;
        let labels = (0..h * w)
            .map(|_| Ok(u32::from_le_bytes(read_array(input)?) as usize))
            .collect::<Result<Vec<usize>>>()?;
        let mask = Mask::new(h, w, labels)?;
        mask.validate(geometry.classes)
            .map_err(|e| Error::Format(e.to_string()))?;
        samples.push(Sample {
            input: Grid::from_vec(h, w, f, data)?,
            mask,
        });
    }
    Ok((geometry, samples))
}
