//! B-scan images, masks, volumes and datasets.

mod container;
mod phantom;

pub use container::{load_volume, save_volume, VOLUME_MAGIC};
pub(crate) use phantom::derive_seed;
pub use phantom::{generate_phantom, PhantomConfig, PhantomStyle};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::Tensor;

/// Smallest height/width the 2×-downsampling generator accepts.
pub const MIN_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    /// Integer intensities in `[0, 255]`.
    RawU8,
    /// Intensities in `[-1, 1]`.
    Norm,
}

impl RangeTag {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            RangeTag::RawU8 => (0.0, 255.0),
            RangeTag::Norm => (-1.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A single grayscale B-scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    values: Vec<f32>,
    range: RangeTag,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, values: Vec<f32>, range: RangeTag) -> Result<Self> {
        if height < MIN_DIM || width < MIN_DIM {
            return Err(contract(format!(
                "image {height}x{width} is below the {MIN_DIM}x{MIN_DIM} minimum"
            )));
        }
        if values.len() != height * width {
            return Err(contract(format!(
                "{} values for a {height}x{width} image",
                values.len()
            )));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(contract(format!("value {v} outside {range:?} bounds")));
        }
        if range == RangeTag::RawU8 && values.iter().any(|v| v.fract() != 0.0) {
            return Err(contract("raw intensities must be integers"));
        }
        Ok(Self {
            height,
            width,
            values,
            range,
        })
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32).collect(),
            RangeTag::RawU8,
        )
    }

    pub fn filled(height: usize, width: usize, value: f32, range: RangeTag) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Raw intensities as bytes. Panics on normalized images.
    pub fn to_u8(&self) -> Vec<u8> {
        assert_eq!(self.range, RangeTag::RawU8);
        self.values.iter().map(|&v| v as u8).collect()
    }

    /// `1×1×H×W` tensor view of the intensities.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.values.clone())
    }

    /// Build a normalized image from a `1×1×H×W` (or `H×W`) tensor, clamping to `[-1, 1]`.
    pub fn from_norm_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if t.numel() != h * w {
            return Err(contract("expected a single-image tensor"));
        }
        Self::new(
            h,
            w,
            t.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            RangeTag::Norm,
        )
    }

    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        self.values
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n
    }
}

/// Affine map `v ↦ v/127.5 − 1` from raw to normalized intensities.
pub fn normalize(img: &ImageTensor) -> Result<ImageTensor> {
    if img.range != RangeTag::RawU8 {
        return Err(contract("normalize expects a raw [0,255] image"));
    }
    let values = img.values.iter().map(|&v| v / 127.5 - 1.0).collect();
    Ok(ImageTensor {
        values,
        range: RangeTag::Norm,
        ..*img
    })
}

/// Inverse of [`normalize`], rounding to the nearest integer intensity.
pub fn denormalize(img: &ImageTensor) -> Result<ImageTensor> {
    if img.range != RangeTag::Norm {
        return Err(contract("denormalize expects a normalized [-1,1] image"));
    }
    let values = img
        .values
        .iter()
        .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0))
        .collect();
    Ok(ImageTensor {
        values,
        range: RangeTag::RawU8,
        ..*img
    })
}

/// Per-pixel labels: 0 background, 1 retina (ILM to RPE).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(contract(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(contract("mask labels must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn retina_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.labels.len() as f64
    }

    /// One-hot `1×2×H×W` tensor (channel 0 background, channel 1 retina).
    pub fn to_one_hot(&self) -> Tensor {
        let plane = self.labels.len();
        let mut data = vec![0f32; 2 * plane];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * plane + i] = 1.0;
        }
        Tensor::new(&[1, 2, self.height, self.width], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    pub domain: Domain,
    bscans: Vec<ImageTensor>,
    masks: Option<Vec<SegMask>>,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        domain: Domain,
        bscans: Vec<ImageTensor>,
        masks: Option<Vec<SegMask>>,
    ) -> Result<Self> {
        if bscans.is_empty() {
            return Err(contract("a volume needs at least one B-scan"));
        }
        let dims = bscans[0].dims();
        if bscans.iter().any(|b| b.dims() != dims) {
            return Err(contract("all B-scans in a volume must share dimensions"));
        }
        if let Some(masks) = &masks {
            if masks.len() != bscans.len() {
                return Err(contract(format!(
                    "{} masks for {} B-scans",
                    masks.len(),
                    bscans.len()
                )));
            }
            if masks.iter().any(|m| m.dims() != dims) {
                return Err(contract("mask dimensions differ from B-scan dimensions"));
            }
        }
        Ok(Self {
            id: id.into(),
            domain,
            bscans,
            masks,
        })
    }

    pub fn bscans(&self) -> &[ImageTensor] {
        &self.bscans
    }

    pub fn masks(&self) -> Option<&[SegMask]> {
        self.masks.as_deref()
    }

    pub fn len(&self) -> usize {
        self.bscans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bscans.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.bscans[0].dims()
    }

    /// Same volume with masks removed.
    pub fn without_masks(mut self) -> Self {
        self.masks = None;
        self
    }

    /// Replace the B-scans, keeping id, domain and masks.
    pub fn with_bscans(&self, bscans: Vec<ImageTensor>) -> Result<Self> {
        Volume::new(self.id.clone(), self.domain, bscans, self.masks.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub split: Split,
    volumes: Vec<Volume>,
}

impl DomainDataset {
    pub fn new(domain: Domain, split: Split, volumes: Vec<Volume>) -> Result<Self> {
        if let Some(v) = volumes.iter().find(|v| v.domain != domain) {
            return Err(contract(format!(
                "volume {} is tagged {} but the dataset is {}",
                v.id, v.domain, domain
            )));
        }
        Ok(Self {
            domain,
            split,
            volumes,
        })
    }

    pub fn volumes(&self) -> &[Volume] {
        &self.volumes
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.iter().all(Volume::is_empty)
    }

    pub fn num_bscans(&self) -> usize {
        self.volumes.iter().map(Volume::len).sum()
    }

    pub fn has_masks(&self) -> bool {
        !self.volumes.is_empty() && self.volumes.iter().all(|v| v.masks().is_some())
    }

    /// Flat `(image, mask)` view over every B-scan.
    pub fn samples(&self) -> impl Iterator<Item = (&ImageTensor, Option<&SegMask>)> {
        self.volumes.iter().flat_map(|v| {
            v.bscans()
                .iter()
                .enumerate()
                .map(move |(i, b)| (b, v.masks().map(|m| &m[i])))
        })
    }
}
