//! Frozen retina segmenter used by the segmentation loss and by evaluation.
//!
//! [`Segmenter`] is the pluggable interface; [`MiniUNet`] is a small U-Net
//! reference implementation trained on domain-A phantoms.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{normalize, DomainDataset, ImageTensor, RangeTag, SegMask, Volume};
use crate::error::{config, contract, format, Result};
use crate::losses::{ce_loss_logits, dice_loss};
use crate::networks::{Conv, Init, Initializer};
use crate::nn::graph::softmax_channels;
use crate::nn::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};

/// Per-pixel class probabilities (`1×2×H×W`: background, retina).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    probs: Tensor,
}

impl ProbMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        let (n, c, _, _) = probs.dims4();
        if n != 1 || c != 2 {
            return Err(contract(format!(
                "expected 1×2×H×W probabilities, got {:?}",
                probs.shape()
            )));
        }
        Ok(Self { probs })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, _, h, w) = self.probs.dims4();
        (h, w)
    }

    fn plane(&self) -> usize {
        let (h, w) = self.dims();
        h * w
    }

    pub fn background(&self) -> &[f32] {
        &self.probs.data()[..self.plane()]
    }

    pub fn retina(&self) -> &[f32] {
        &self.probs.data()[self.plane()..]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    /// Argmax labels; ties go to background.
    pub fn labels(&self) -> SegMask {
        let (h, w) = self.dims();
        let labels = self
            .background()
            .iter()
            .zip(self.retina())
            .map(|(b, r)| u8::from(r > b))
            .collect();
        SegMask::new(h, w, labels).expect("binary labels")
    }
}

pub trait Segmenter: Send + Sync {
    /// Class logits `N×2×H×W` for a normalized batch, recorded on `g` with
    /// the segmenter's parameters as constants.
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>>;

    fn is_frozen(&self) -> bool;

    /// Hash of the parameter bytes, for freeze verification.
    fn fingerprint(&self) -> u64;

    /// Softmax probabilities, differentiable with respect to `x`.
    fn probs<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.logits(g, x)?.softmax_channels())
    }

    fn predict_probs(&self, img: &ImageTensor) -> Result<ProbMap> {
        let img = match img.range() {
            RangeTag::RawU8 => normalize(img)?,
            RangeTag::Norm => img.clone(),
        };
        let g = Graph::new();
        let logits = self.logits(&g, g.constant(img.to_tensor()))?;
        ProbMap::new(softmax_channels(&logits.value()))
    }

    fn predict_labels(&self, img: &ImageTensor) -> Result<SegMask> {
        Ok(self.predict_probs(img)?.labels())
    }
}

/// One mask per B-scan.
pub fn segment_volume(s: &dyn Segmenter, vol: &Volume) -> Result<Vec<SegMask>> {
    vol.bscans().iter().map(|b| s.predict_labels(b)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiniUNetConfig {
    /// Number of resolution levels (pooling steps + 1).
    pub depth: usize,
    pub base_channels: usize,
    pub classes: usize,
}

impl Default for MiniUNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            classes: 2,
        }
    }
}

impl MiniUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(config("U-Net depth and base_channels must be positive"));
        }
        if self.classes != 2 {
            return Err(config(
                "only two-class (background/retina) segmentation is supported",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv,
    b: Conv,
}

impl DoubleConv {
    fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            a: Conv::new(store, init, &format!("{name}.a"), cin, cout, 3, 1, 1),
            b: Conv::new(store, init, &format!("{name}.b"), cout, cout, 3, 1, 1),
        }
    }

    fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        self.b.forward(p, self.a.forward(p, x).relu()).relu()
    }
}

/// U-Net with max-pool contraction, transposed-conv expansion and skip
/// concatenation.
#[derive(Clone, Debug)]
pub struct MiniUNet {
    config: MiniUNetConfig,
    params: ParamStore,
    enc: Vec<DoubleConv>,
    up: Vec<Conv>,
    dec: Vec<DoubleConv>,
    head: Conv,
    frozen: bool,
}

impl MiniUNet {
    pub fn new(config: MiniUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed, Init::He);
        let c = config.base_channels;
        let enc = (0..config.depth)
            .map(|i| {
                let cin = if i == 0 { 1 } else { c << (i - 1) };
                DoubleConv::new(&mut store, &mut init, &format!("enc{i}"), cin, c << i)
            })
            .collect();
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for i in (0..config.depth - 1).rev() {
            up.push(Conv::up2(
                &mut store,
                &mut init,
                &format!("up{i}"),
                c << (i + 1),
                c << i,
            ));
            dec.push(DoubleConv::new(
                &mut store,
                &mut init,
                &format!("dec{i}"),
                2 * (c << i),
                c << i,
            ));
        }
        let head = Conv::new(&mut store, &mut init, "head", c, config.classes, 1, 1, 0);
        Ok(Self {
            config,
            params: store,
            enc,
            up,
            dec,
            head,
            frozen: false,
        })
    }

    pub fn config(&self) -> &MiniUNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameters; refused once the network is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(contract(
                "segmenter is frozen; its parameters cannot be updated",
            ));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Forward pass with explicitly bound parameters.
    pub fn forward_with<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let &[_, 1, h, w] = &shape[..] else {
            return Err(contract(format!(
                "segmenter expects N×1×H×W input, got {shape:?}"
            )));
        };
        let d = 1 << (self.config.depth - 1);
        if h % d != 0 || w % d != 0 {
            return Err(contract(format!("input {h}x{w} is not divisible by {d}")));
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for (i, e) in self.enc.iter().enumerate() {
            if i > 0 {
                h = h.max_pool2();
            }
            h = e.forward(p, h);
            skips.push(h);
        }
        skips.pop();
        for (u, d) in self.up.iter().zip(&self.dec) {
            let skip = skips.pop().expect("one skip per decoder level");
            h = d.forward(p, u.forward(p, h).relu().concat_channels(skip));
        }
        Ok(self.head.forward(p, h))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("segmenter", serde_json::to_value(&self.config).unwrap());
        c.meta = serde_json::json!({ "frozen": self.frozen });
        c.push_store("segmenter", &self.params);
        c
    }

    /// Load a checkpoint; the result is frozen.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("segmenter")?;
        let cfg: MiniUNetConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| format(format!("segmenter config: {e}")))?;
        let mut net = Self::new(cfg, 0)?;
        c.fill_store("segmenter", &mut net.params)?;
        Ok(net.freeze())
    }
}

impl Segmenter for MiniUNet {
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let p = g.bind(&self.params, false);
        self.forward_with(&p, x)
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterTrainConfig {
    pub unet: MiniUNetConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for SegmenterTrainConfig {
    fn default() -> Self {
        Self {
            unet: MiniUNetConfig::default(),
            steps: 600,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub(crate) fn batch_of<'a>(items: impl Iterator<Item = &'a ImageTensor>) -> Result<Tensor> {
    let ts: Vec<Tensor> = items
        .map(|img| {
            Ok(match img.range() {
                RangeTag::RawU8 => normalize(img)?.to_tensor(),
                RangeTag::Norm => img.to_tensor(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&ts))
}

/// Train a [`MiniUNet`] on masked domain-A B-scans with dice + cross-entropy,
/// returning it frozen.
pub fn train_reference_segmenter(
    trainset: &DomainDataset,
    cfg: &SegmenterTrainConfig,
) -> Result<MiniUNet> {
    if !trainset.has_masks() {
        return Err(contract("segmenter training requires ground-truth masks"));
    }
    if trainset.is_empty() || cfg.batch_size == 0 {
        return Err(config(
            "segmenter training needs data and a positive batch size",
        ));
    }
    let samples: Vec<(&ImageTensor, &SegMask)> =
        trainset.samples().map(|(i, m)| (i, m.unwrap())).collect();
    let mut net = MiniUNet::new(cfg.unet.clone(), cfg.seed)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &net.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e9);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..samples.len()))
            .collect();
        let x = batch_of(picks.iter().map(|&i| samples[i].0))?;
        let target = Tensor::stack(
            &picks
                .iter()
                .map(|&i| samples[i].1.to_one_hot())
                .collect::<Vec<_>>(),
        );
        let g = Graph::new();
        let p = g.bind(&net.params, true);
        let logits = net.forward_with(&p, g.constant(x))?;
        let retina = logits.softmax_channels().select_channel(1);
        let retina_target = retina_channel(&target);
        let loss = dice_loss(retina, &retina_target).add(ce_loss_logits(logits, &target));
        let value = loss.item();
        if !value.is_finite() {
            return Err(crate::Error::Divergence {
                epoch: 0,
                step,
                component: "segmenter loss".into(),
                value,
            });
        }
        let grads = g.backward(loss);
        let grads: Vec<Tensor> = p.iter().map(|&v| grads.get_or_zeros(v)).collect();
        opt.update(&mut net.params, &grads);
        if step % 50 == 0 || step + 1 == cfg.steps {
            debug!("segmenter step {step}: loss {value:.4}");
        }
    }
    info!(
        "trained reference segmenter ({} parameters)",
        net.params.num_scalars()
    );
    Ok(net.freeze())
}

/// Channel 1 of a `N×2×H×W` one-hot tensor.
pub(crate) fn retina_channel(one_hot: &Tensor) -> Tensor {
    let (n, _, h, w) = one_hot.dims4();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        out.extend_from_slice(&one_hot.data()[(2 * s + 1) * plane..(2 * s + 2) * plane]);
    }
    Tensor::new(&[n, 1, h, w], out)
}
