//! Rule-based adaptation: local-density intensity rewriting followed by
//! Gaussian noise injection on the pixels the rules leave open.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, ImageTensor, RangeTag, Volume};
use crate::error::{config, contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraditionalParams {
    /// Side of the square density window (odd).
    pub density_window: usize,
    /// Pixels whose density exceeds this are set to `set_intensity`.
    pub density_threshold: f32,
    pub bright_threshold: f32,
    pub set_intensity: f32,
    /// A bright pixel with density at or below this shields its neighbors.
    pub low_density_threshold: f32,
    pub noise_mu: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for TraditionalParams {
    fn default() -> Self {
        Self {
            density_window: 7,
            density_threshold: 170.0,
            bright_threshold: 225.0,
            set_intensity: 196.0,
            low_density_threshold: 64.0,
            noise_mu: 0.0,
            noise_sigma: 25.0,
            seed: 0,
        }
    }
}

impl TraditionalParams {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=255.0;
        for (name, v) in [
            ("density_threshold", self.density_threshold),
            ("low_density_threshold", self.low_density_threshold),
            ("bright_threshold", self.bright_threshold),
            ("set_intensity", self.set_intensity),
        ] {
            if !unit.contains(&v) {
                return Err(config(format!("{name} = {v} is outside [0, 255]")));
            }
        }
        if self.set_intensity.fract() != 0.0 {
            return Err(config("set_intensity must be an integer intensity"));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_mu.is_finite() {
            return Err(config("noise_sigma must be positive and noise_mu finite"));
        }
        if self.density_window < 3 || self.density_window.is_multiple_of(2) {
            return Err(config(format!(
                "density_window {} must be odd and >= 3",
                self.density_window
            )));
        }
        Ok(())
    }
}

/// Local mean intensity, one value per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Mean over the `window × window` neighborhood of each pixel, replicating
/// edge pixels outward.
pub fn density_map(img: &ImageTensor, window: usize) -> Result<DensityMap> {
    let (h, w) = img.dims();
    if window.is_multiple_of(2) || window == 0 {
        return Err(contract(format!("density window {window} must be odd")));
    }
    if window > h.min(w) {
        return Err(contract(format!(
            "density window {window} exceeds image {h}x{w}"
        )));
    }
    let r = (window / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    // Summed-area table over the edge-padded image.
    let (ph, pw) = (h + window - 1, w + window - 1);
    let mut sat = vec![0f64; (ph + 1) * (pw + 1)];
    for y in 0..ph {
        let sy = clampi(y as isize - r, h);
        let mut row = 0.0;
        for x in 0..pw {
            row += img.get(sy, clampi(x as isize - r, w)) as f64;
            sat[(y + 1) * (pw + 1) + x + 1] = sat[y * (pw + 1) + x + 1] + row;
        }
    }
    let area = (window * window) as f64;
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (y1, x1) = (y + window, x + window);
            let s = sat[y1 * (pw + 1) + x1] - sat[y * (pw + 1) + x1] - sat[y1 * (pw + 1) + x]
                + sat[y * (pw + 1) + x];
            values.push(s / area);
        }
    }
    Ok(DensityMap {
        height: h,
        width: w,
        values,
    })
}

/// Apply the two rules. Returns the rewritten image and the mask of pixels
/// that may receive noise.
///
/// 1. density > `density_threshold`: value becomes `set_intensity`, no noise.
/// 2. original value > `bright_threshold` with density ≤
///    `low_density_threshold`: its 8 neighbors receive no noise.
pub fn build_noise_mask(
    img: &ImageTensor,
    density: &DensityMap,
    p: &TraditionalParams,
) -> Result<(ImageTensor, Vec<bool>)> {
    let (h, w) = img.dims();
    if (density.height, density.width) != (h, w) {
        return Err(contract("density map dimensions differ from the image"));
    }
    if img.range() != RangeTag::RawU8 {
        return Err(contract(
            "traditional adaptation expects raw [0, 255] intensities",
        ));
    }
    let mut values = img.values().to_vec();
    let mut mask = vec![true; h * w];
    for i in 0..h * w {
        if density.values[i] > p.density_threshold as f64 {
            values[i] = p.set_intensity;
            mask[i] = false;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if img.values()[i] > p.bright_threshold
                && density.values[i] <= p.low_density_threshold as f64
            {
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if (ny, nx) != (y, x) {
                            mask[ny * w + nx] = false;
                        }
                    }
                }
            }
        }
    }
    Ok((ImageTensor::new(h, w, values, RangeTag::RawU8)?, mask))
}

/// Add `Normal(μ, σ²)` noise where `mask` is set, round, and saturate to
/// `[0, 255]`.
pub fn inject_gaussian(
    img: &ImageTensor,
    mask: &[bool],
    p: &TraditionalParams,
) -> Result<ImageTensor> {
    inject_with(img, mask, p, &mut ChaCha8Rng::seed_from_u64(p.seed))
}

fn inject_with(
    img: &ImageTensor,
    mask: &[bool],
    p: &TraditionalParams,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    if mask.len() != img.values().len() {
        return Err(contract("noise mask dimensions differ from the image"));
    }
    let normal = Normal::new(p.noise_mu as f64, p.noise_sigma as f64)
        .ok()
        .filter(|_| p.noise_sigma > 0.0)
        .ok_or_else(|| contract(format!("noise sigma {} must be positive", p.noise_sigma)))?;
    let values = img
        .values()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if m {
                (v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as f32
            } else {
                v
            }
        })
        .collect();
    ImageTensor::new(img.height(), img.width(), values, RangeTag::RawU8)
}

fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Run density → rules → injection on every B-scan. The result is tagged
/// with the other domain and keeps the input's masks.
pub fn adapt_traditional(vol: &Volume, p: &TraditionalParams) -> Result<Volume> {
    p.validate()?;
    let base = derive_seed(&[p.seed, id_hash(&vol.id)]);
    let bscans = vol
        .bscans()
        .iter()
        .enumerate()
        .map(|(k, img)| {
            if img.range() != RangeTag::RawU8 {
                return Err(contract(
                    "traditional adaptation expects raw [0, 255] intensities",
                ));
            }
            let density = density_map(img, p.density_window)?;
            let (rewritten, mask) = build_noise_mask(img, &density, p)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[base, k as u64]));
            inject_with(&rewritten, &mask, p, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Volume::new(
        format!("{}-trad", vol.id),
        vol.domain.other(),
        bscans,
        vol.masks().map(<[_]>::to_vec),
    )
}
