//! Residual image-translation generator, multi-level discriminator with a
//! feature probe, and the building blocks they share.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{normalize, ImageTensor, RangeTag};
use crate::error::{config, contract, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};

const NORM_EPS: f32 = 1e-5;
const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutActivation {
    Tanh,
}

/// Weight initialization for freshly built layers.
pub(crate) enum Init {
    /// `N(0, std²)` weights, zero biases.
    Normal(f32),
    /// He/Kaiming normal for ReLU networks.
    He,
}

pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    init: Init,
}

impl Initializer {
    pub fn new(seed: u64, init: Init) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            init,
        }
    }

    fn weights(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = match self.init {
            Init::Normal(s) => s,
            Init::He => (2.0 / fan_in as f32).sqrt(),
        };
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }
}

/// A (possibly transposed) square convolution with bias.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.push(
            format!("{name}.weight"),
            init.weights(&[cout, cin, k, k], cin * k * k),
        );
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride,
            pad,
            transpose: false,
        }
    }

    /// Stride-2 transposed convolution doubling the spatial size.
    pub fn up2(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = store.push(
            format!("{name}.weight"),
            init.weights(&[cin, cout, 3, 3], cin * 9),
        );
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride: 2,
            pad: 1,
            transpose: true,
        }
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        if self.transpose {
            x.conv_transpose2d(p[self.w], Some(p[self.b]), self.stride, self.pad, 1)
        } else {
            x.conv2d(p[self.w], Some(p[self.b]), self.stride, self.pad)
        }
    }
}

/// Two reflection-padded 3×3 convolutions with instance normalization and a
/// ReLU in between, added onto the input through an identity skip.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResidualBlock {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            conv1: Conv::new(
                store,
                init,
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                1,
                0,
            ),
            conv2: Conv::new(
                store,
                init,
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                1,
                0,
            ),
        }
    }

    /// The residual branch alone, without the skip connection.
    pub fn branch<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        let h = self
            .conv1
            .forward(p, x.reflect_pad(1))
            .instance_norm(NORM_EPS)
            .relu();
        self.conv2
            .forward(p, h.reflect_pad(1))
            .instance_norm(NORM_EPS)
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        self.branch(p, x).add(x)
    }

    /// Indices of the second convolution's weight and bias in the owning store.
    pub fn output_conv_params(&self) -> [usize; 2] {
        [self.conv2.w, self.conv2.b]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_downsamples: usize,
    pub n_residual_blocks: usize,
    pub norm_kind: NormKind,
    pub out_activation: OutActivation,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 64,
            n_downsamples: 2,
            n_residual_blocks: 9,
            norm_kind: NormKind::Instance,
            out_activation: OutActivation::Tanh,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(config("generator channel counts must be positive"));
        }
        if self.n_residual_blocks == 0 {
            return Err(config("generator needs at least one residual block"));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.n_downsamples
    }
}

/// Residual translation network: 7×7 ingress, strided downsampling, a chain
/// of residual blocks, transposed-convolution upsampling, 7×7 egress and tanh.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    ingress: Conv,
    down: Vec<Conv>,
    blocks: Vec<ResidualBlock>,
    up: Vec<Conv>,
    egress: Conv,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed, Init::Normal(0.02));
        let c = config.base_channels;
        let ingress = Conv::new(
            &mut store,
            &mut init,
            "ingress",
            config.in_channels,
            c,
            7,
            1,
            0,
        );
        let down = (0..config.n_downsamples)
            .map(|i| {
                Conv::new(
                    &mut store,
                    &mut init,
                    &format!("down{i}"),
                    c << i,
                    c << (i + 1),
                    3,
                    2,
                    1,
                )
            })
            .collect();
        let inner = c << config.n_downsamples;
        let blocks = (0..config.n_residual_blocks)
            .map(|i| ResidualBlock::new(&mut store, &mut init, &format!("res{i}"), inner))
            .collect();
        let up = (0..config.n_downsamples)
            .rev()
            .map(|i| {
                Conv::up2(
                    &mut store,
                    &mut init,
                    &format!("up{i}"),
                    c << (i + 1),
                    c << i,
                )
            })
            .collect();
        let egress = Conv::new(
            &mut store,
            &mut init,
            "egress",
            c,
            config.in_channels,
            7,
            1,
            0,
        );
        Ok(Self {
            config,
            params: store,
            ingress,
            down,
            blocks,
            up,
            egress,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn residual_blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(contract(format!(
                "generator expects N×C×H×W input, got {shape:?}"
            )));
        };
        let d = self.config.divisor();
        if c != self.config.in_channels {
            return Err(contract(format!(
                "generator expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % d != 0 || w % d != 0 {
            return Err(contract(format!("input {h}x{w} is not divisible by {d}")));
        }
        if h <= 3 || w <= 3 {
            return Err(contract("input too small for 7×7 reflection padding"));
        }
        Ok(())
    }

    /// Translate a batch `N×C×H×W` of normalized images. `p` are this
    /// generator's parameters bound into `x`'s graph.
    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        self.check_input(&x.shape())?;
        let mut h = self
            .ingress
            .forward(p, x.reflect_pad(3))
            .instance_norm(NORM_EPS)
            .relu();
        for d in &self.down {
            h = d.forward(p, h).instance_norm(NORM_EPS).relu();
        }
        for b in &self.blocks {
            h = b.forward(p, h);
        }
        for u in &self.up {
            h = u.forward(p, h).instance_norm(NORM_EPS).relu();
        }
        Ok(self.egress.forward(p, h.reflect_pad(3)).tanh())
    }

    /// Inference on a batch tensor.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = g.bind(&self.params, false);
        let y = self.forward(&p, g.constant(x.clone()))?;
        Ok((*y.value()).clone())
    }

    /// Translate one image. Raw inputs are normalized first; the output is
    /// always normalized.
    pub fn translate(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let img = match img.range() {
            RangeTag::RawU8 => normalize(img)?,
            RangeTag::Norm => img.clone(),
        };
        ImageTensor::from_norm_tensor(&self.forward_tensor(&img.to_tensor())?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("generator", serde_json::to_value(&self.config).unwrap());
        c.push_store("generator", &self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("generator")?;
        Self::from_checkpoint_prefix(c, "generator", c.config.clone())
    }

    pub(crate) fn from_checkpoint_prefix(
        c: &Checkpoint,
        prefix: &str,
        cfg: serde_json::Value,
    ) -> Result<Self> {
        let cfg: GeneratorConfig = serde_json::from_value(cfg)
            .map_err(|e| crate::error::format(format!("generator config: {e}")))?;
        let mut g = Self::new(cfg, 0)?;
        c.fill_store(prefix, &mut g.params)?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub n_levels: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            n_levels: 4,
            base_channels: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return Err(config(
                "discriminator needs positive levels and channel counts",
            ));
        }
        Ok(())
    }

    /// Spatial reduction factor between input and feature map.
    pub fn feature_stride(&self) -> usize {
        1 << (self.n_levels - 1)
    }
}

pub struct DiscriminatorOutput<'g> {
    /// Pre-sigmoid realness logit per sample, shape `N`.
    pub score: Var<'g>,
    /// Classification-layer map before pooling, `N×1×H/s×W/s`.
    pub features: Var<'g>,
}

/// Stacked conv/norm/LeakyReLU levels (all but the last downsample by 2), a
/// one-channel classification convolution, then global average pooling.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    levels: Vec<Conv>,
    classifier: Conv,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed, Init::Normal(0.02));
        let mut cin = config.in_channels;
        let mut levels = Vec::new();
        for i in 0..config.n_levels {
            let cout = config.base_channels << i.min(3);
            let stride = if i + 1 < config.n_levels { 2 } else { 1 };
            levels.push(Conv::new(
                &mut store,
                &mut init,
                &format!("level{i}"),
                cin,
                cout,
                3,
                stride,
                1,
            ));
            cin = cout;
        }
        let classifier = Conv::new(&mut store, &mut init, "classifier", cin, 1, 3, 1, 1);
        Ok(Self {
            config,
            params: store,
            levels,
            classifier,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Result<DiscriminatorOutput<'g>> {
        let shape = x.shape();
        let &[n, c, h, w] = &shape[..] else {
            return Err(contract("discriminator expects N×C×H×W input"));
        };
        if c != self.config.in_channels {
            return Err(contract(format!(
                "discriminator expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        let s = self.config.feature_stride();
        if h % s != 0 || w % s != 0 {
            return Err(contract(format!("input {h}x{w} is not divisible by {s}")));
        }
        let mut f = x;
        for l in &self.levels {
            f = l
                .forward(p, f)
                .instance_norm(NORM_EPS)
                .leaky_relu(LEAKY_SLOPE);
        }
        let features = self.classifier.forward(p, f);
        let score = features.mean_spatial().reshape(&[n]);
        Ok(DiscriminatorOutput { score, features })
    }

    /// Realness logits for a batch, in inference mode.
    pub fn score_tensor(&self, x: &Tensor) -> Result<Vec<f32>> {
        let g = Graph::new();
        let p = g.bind(&self.params, false);
        let out = self.forward(&p, g.constant(x.clone()))?;
        let v = out.score.value();
        Ok(v.data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("discriminator", serde_json::to_value(&self.config).unwrap());
        c.push_store("discriminator", &self.params);
        c
    }

    pub(crate) fn from_checkpoint_prefix(
        c: &Checkpoint,
        prefix: &str,
        cfg: serde_json::Value,
    ) -> Result<Self> {
        let cfg: DiscriminatorConfig = serde_json::from_value(cfg)
            .map_err(|e| crate::error::format(format!("discriminator config: {e}")))?;
        let mut d = Self::new(cfg, 0)?;
        c.fill_store(prefix, &mut d.params)?;
        Ok(d)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("discriminator")?;
        Self::from_checkpoint_prefix(c, "discriminator", c.config.clone())
    }
}
