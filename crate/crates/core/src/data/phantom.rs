//! Deterministic synthetic retina phantoms for the two imaging domains.
//!
//! Domain A ("speckled"): curved layered retina, multiplicative speckle and
//! salt/pepper impulses on a dim background. Domain B ("flattened"): the RPE
//! is flattened to a horizontal line, the image is Gaussian-blurred and then
//! contrast-stretched with a gamma curve that crushes the inner layers.
//!
//! Randomness is derived from `(seed, volume_index, bscan_index)` only, so
//! volumes can be generated independently and in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, ImageTensor, SegMask, Volume, MIN_DIM};
use crate::error::{config, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomStyle {
    ASpeckled,
    BFlattened,
}

impl PhantomStyle {
    pub fn domain(self) -> Domain {
        match self {
            PhantomStyle::ASpeckled => Domain::A,
            PhantomStyle::BFlattened => Domain::B,
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::A => PhantomStyle::ASpeckled,
            Domain::B => PhantomStyle::BFlattened,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub n_volumes: usize,
    pub bscans_per_volume: usize,
    pub height: usize,
    pub width: usize,
    /// Number of intra-retinal layers, the RPE included.
    pub layer_count: usize,
    /// Peak vertical excursion of the curved retina, in pixels (domain A).
    pub curvature_amplitude: f32,
    /// Variance of the multiplicative speckle at intensity 128, in intensity².
    pub speckle_variance: f32,
    pub style: PhantomStyle,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_volumes: 4,
            bscans_per_volume: 128,
            height: 128,
            width: 128,
            layer_count: 6,
            curvature_amplitude: 12.0,
            speckle_variance: 900.0,
            style: PhantomStyle::ASpeckled,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_DIM || self.width < MIN_DIM {
            return Err(config(format!(
                "phantom size {}x{} below the {MIN_DIM}x{MIN_DIM} minimum",
                self.height, self.width
            )));
        }
        if self.n_volumes == 0 || self.bscans_per_volume == 0 {
            return Err(config("phantom needs at least one volume and one B-scan"));
        }
        if self.layer_count < 2 {
            return Err(config("layer_count must be at least 2 (inner layer + RPE)"));
        }
        if !(self.curvature_amplitude >= 0.0) || !(self.speckle_variance >= 0.0) {
            return Err(config(
                "curvature_amplitude and speckle_variance must be non-negative",
            ));
        }
        Ok(())
    }
}

const BACKGROUND_A: f32 = 28.0;
const RPE_A: f32 = 230.0;
const INNER_LEVELS: [f32; 6] = [150.0, 96.0, 140.0, 86.0, 124.0, 104.0];
const SALT_PEPPER: f64 = 0.003;
const BLUR_SIGMA: f32 = 1.2;
const STRETCH_GAMMA: f32 = 2.2;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed_0c7a_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Per-volume anatomy, slowly varying across B-scans.
struct Anatomy {
    top: f32,
    thickness: f32,
    center: f32,
    center_drift: f32,
    tilt: f32,
    amp_jitter: f32,
    boundaries: Vec<f32>,
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng, cfg: &PhantomConfig) -> Self {
        let h = cfg.height as f32;
        let inner = cfg.layer_count - 1;
        // Fractions of thickness where each inner layer ends; the RPE takes the last ~12%.
        let mut cuts: Vec<f32> = (1..inner)
            .map(|i| i as f32 / inner as f32 + rng.random_range(-0.04..0.04))
            .collect();
        cuts.push(1.0);
        let boundaries = cuts.into_iter().map(|c| c * 0.88).chain([1.0]).collect();
        Self {
            top: rng.random_range(0.30..0.40) * h,
            thickness: rng.random_range(0.24..0.30) * h,
            center: rng.random_range(0.38..0.62),
            center_drift: rng.random_range(-0.08..0.08),
            tilt: rng.random_range(-0.04..0.04) * h,
            amp_jitter: rng.random_range(0.8..1.2),
            boundaries,
        }
    }

    /// `(top, bottom)` of the retina at column `x` of B-scan `b` (of `nb`).
    fn extent(&self, cfg: &PhantomConfig, x: usize, b: usize, nb: usize) -> (f32, f32) {
        let w = cfg.width as f32;
        let phase = if nb > 1 {
            b as f32 / (nb - 1) as f32 - 0.5
        } else {
            0.0
        };
        let c = self.center + self.center_drift * phase;
        let u = (x as f32 + 0.5) / w - c;
        // Foveal pit: thinning of the inner retina near the center.
        let pit = 1.0 - 0.35 * (-(u / 0.07).powi(2)).exp() * (1.0 - 2.0 * phase.abs());
        let thickness = self.thickness * pit;
        match cfg.style {
            PhantomStyle::ASpeckled => {
                let bowl = cfg.curvature_amplitude * self.amp_jitter * (4.0 * u * u - 0.5);
                let top = self.top + bowl + self.tilt * u;
                (top, top + thickness)
            }
            PhantomStyle::BFlattened => {
                let bottom = self.top + self.thickness;
                (bottom - thickness, bottom)
            }
        }
    }
}

fn rayleigh_unit(rng: &mut ChaCha8Rng) -> f32 {
    // Standardized Rayleigh(1): mean sqrt(pi/2), std sqrt((4-pi)/2).
    let u: f32 = rng.random_range(f32::EPSILON..1.0);
    let r = (-2.0 * u.ln()).sqrt();
    (r - 1.253_314_1) / 0.655_136_4
}

fn gaussian_blur(img: &mut [f32], h: usize, w: usize, sigma: f32) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            img[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
}

fn render_bscan(
    cfg: &PhantomConfig,
    anat: &Anatomy,
    vol: usize,
    b: usize,
) -> (ImageTensor, SegMask) {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, vol as u64, b as u64, 1]));
    let mut clean = vec![BACKGROUND_A; h * w];
    let mut labels = vec![0u8; h * w];
    for x in 0..w {
        let (top, bottom) = anat.extent(cfg, x, b, cfg.bscans_per_volume);
        let thick = bottom - top;
        for y in 0..h {
            let yc = y as f32 + 0.5;
            if yc < top || yc >= bottom {
                continue;
            }
            labels[y * w + x] = 1;
            let frac = (yc - top) / thick;
            let layer = anat
                .boundaries
                .iter()
                .position(|&bd| frac < bd)
                .unwrap_or(anat.boundaries.len() - 1);
            clean[y * w + x] = if layer == anat.boundaries.len() - 1 {
                RPE_A
            } else {
                INNER_LEVELS[layer % INNER_LEVELS.len()]
            };
        }
    }

    let rel_std = cfg.speckle_variance.sqrt() / 128.0;
    let mut img: Vec<f32> = clean
        .iter()
        .map(|&v| (v * (1.0 + rel_std * rayleigh_unit(&mut rng))).max(0.0))
        .collect();
    match cfg.style {
        PhantomStyle::ASpeckled => {
            for v in img.iter_mut() {
                let p: f64 = rng.random();
                if p < SALT_PEPPER {
                    *v = 0.0;
                } else if p < 2.0 * SALT_PEPPER {
                    *v = 255.0;
                }
            }
        }
        PhantomStyle::BFlattened => {
            gaussian_blur(&mut img, h, w, BLUR_SIGMA);
            for v in img.iter_mut() {
                let t = ((*v - BACKGROUND_A) / (RPE_A - BACKGROUND_A)).clamp(0.0, 1.0);
                *v = 255.0 * t.powf(STRETCH_GAMMA);
            }
        }
    }
    let values = img
        .into_iter()
        .map(|v| v.round().clamp(0.0, 255.0))
        .collect();
    (
        ImageTensor::new(h, w, values, super::RangeTag::RawU8)
            .expect("phantom respects image invariants"),
        SegMask::new(h, w, labels).expect("phantom respects mask invariants"),
    )
}

/// Generate `cfg.n_volumes` volumes with ground-truth masks.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Vec<Volume>> {
    cfg.validate()?;
    let tag = match cfg.style {
        PhantomStyle::ASpeckled => "A",
        PhantomStyle::BFlattened => "B",
    };
    (0..cfg.n_volumes)
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, v as u64, 0]));
            let anat = Anatomy::sample(&mut rng, cfg);
            let (bscans, masks) = (0..cfg.bscans_per_volume)
                .map(|b| render_bscan(cfg, &anat, v, b))
                .unzip();
            Volume::new(
                format!("phantom{tag}-s{}-v{v:03}", cfg.seed),
                cfg.style.domain(),
                bscans,
                Some(masks),
            )
        })
        .collect()
}
