//! CycleGAN training: alternating generator and discriminator updates,
//! replay buffers, loss logging and resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::data::{
    derive_seed, normalize, Domain, DomainDataset, ImageTensor, RangeTag, SegMask, Volume,
};
use crate::error::{config, contract, format, Error, Result};
use crate::losses::{
    cycle_loss, discriminator_loss, feature_weighted_cycle_loss, generator_loss, schedule,
    segmentation_loss, total_loss, AdversarialKind, LossBundle, LossTerms, LossWeights,
    ScheduleParams, SegTarget,
};
use crate::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::segmenter::Segmenter;

pub const CYCLEGAN_KIND: &str = "cyclegan";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    #[default]
    Cpu,
    Accelerator,
}

/// Where the segmentation loss takes its targets from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegTargetMode {
    /// Ground-truth masks when the source batch has them, else the
    /// segmenter's own labels on the untranslated input.
    #[default]
    Auto,
    SelfConsistency,
    /// Disable the segmentation term.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Iterations per epoch; each draws a fresh random batch per domain.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    /// From this epoch on, both learning rates fall linearly towards zero at
    /// the end of the run. `None` keeps them constant.
    pub lr_decay_start: Option<usize>,
    pub beta1: f32,
    pub beta2: f32,
    pub seed: u64,
    /// Generated images kept per direction for discriminator updates; 0 disables.
    pub replay_capacity: usize,
    /// `total_epochs = 0` spans the run, reaching the end values in the last epoch.
    pub schedule: ScheduleParams,
    pub weights: LossWeights,
    pub weight_cycle_by_d: bool,
    pub seg_target: SegTargetMode,
    /// Train on random square crops of this side instead of full B-scans.
    pub crop_size: Option<usize>,
    pub checkpoint_every: usize,
    pub device: Device,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            steps_per_epoch: 100,
            batch_size: 1,
            lr_g: 2e-4,
            lr_d: 2e-4,
            lr_decay_start: None,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            replay_capacity: 50,
            schedule: ScheduleParams::default(),
            weights: LossWeights::default(),
            weight_cycle_by_d: false,
            seg_target: SegTargetMode::Auto,
            crop_size: None,
            checkpoint_every: 10,
            device: Device::Cpu,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(config(
                "epochs, steps_per_epoch and batch_size must be at least 1",
            ));
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0)
            || !self.lr_g.is_finite()
            || !self.lr_d.is_finite()
        {
            return Err(config("learning rates must be finite and non-negative"));
        }
        if self.checkpoint_every == 0 {
            return Err(config("checkpoint_every must be at least 1"));
        }
        if self.device == Device::Accelerator {
            return Err(config(
                "no accelerator backend is compiled in; use device = \"cpu\"",
            ));
        }
        if let Some(c) = self.crop_size {
            let d = self
                .generator
                .divisor()
                .max(self.discriminator.feature_stride());
            if c == 0 || c % d != 0 {
                return Err(config(format!(
                    "crop_size {c} must be a positive multiple of {d}"
                )));
            }
        }
        self.schedule.validate()?;
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()
    }

    /// The schedule with an automatic span filled in.
    pub fn resolved_schedule(&self) -> ScheduleParams {
        let mut s = self.schedule;
        if s.total_epochs == 0 {
            s.total_epochs = self.epochs.saturating_sub(1);
        }
        s
    }

    /// Learning-rate multiplier for `epoch`.
    pub fn lr_factor(&self, epoch: usize) -> f32 {
        match self.lr_decay_start {
            Some(start) if epoch >= start && start < self.epochs => {
                (self.epochs - epoch) as f32 / (self.epochs - start + 1) as f32
            }
            _ => 1.0,
        }
    }

    fn adam(&self, lr: f32) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// Translation direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    A2B,
    B2A,
}

impl Direction {
    pub fn target(self) -> Domain {
        match self {
            Direction::A2B => Domain::B,
            Direction::B2A => Domain::A,
        }
    }
}

/// Bounded pool of past generated images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Tensor>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Swap each sample of `batch` against the pool: while filling, store and
    /// return it; once full, with probability ½ return a stored image and
    /// keep the new one in its place.
    pub fn query(&mut self, batch: &Tensor, rng: &mut impl Rng) -> Tensor {
        if self.capacity == 0 {
            return batch.clone();
        }
        let n = batch.shape()[0];
        let out: Vec<Tensor> = (0..n)
            .map(|i| {
                let img = batch.batch_item(i);
                if self.items.len() < self.capacity {
                    self.items.push(img.clone());
                    img
                } else if rng.random::<f32>() < 0.5 {
                    let k = rng.random_range(0..self.capacity);
                    std::mem::replace(&mut self.items[k], img)
                } else {
                    img
                }
            })
            .collect();
        Tensor::stack(&out)
    }
}

/// The four networks of the translation model.
#[derive(Clone, Debug)]
pub struct CycleGan {
    pub g_a2b: Generator,
    pub g_b2a: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
}

impl CycleGan {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let s = |k: u64| derive_seed(&[cfg.seed, 0x9e7, k]);
        Ok(Self {
            g_a2b: Generator::new(cfg.generator.clone(), s(0))?,
            g_b2a: Generator::new(cfg.generator.clone(), s(1))?,
            d_a: Discriminator::new(cfg.discriminator.clone(), s(2))?,
            d_b: Discriminator::new(cfg.discriminator.clone(), s(3))?,
        })
    }

    pub fn generator(&self, dir: Direction) -> &Generator {
        match dir {
            Direction::A2B => &self.g_a2b,
            Direction::B2A => &self.g_b2a,
        }
    }
}

/// One row of the JSON-lines loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub gamma: f32,
    pub lambda: f32,
    #[serde(flatten)]
    pub losses: LossBundle,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub nets: CycleGan,
    opt_g_a2b: Adam,
    opt_g_b2a: Adam,
    opt_d_a: Adam,
    opt_d_b: Adam,
    pub replay_a: ReplayBuffer,
    pub replay_b: ReplayBuffer,
    /// Next epoch to run.
    pub epoch: usize,
    /// Global iteration counter.
    pub step: usize,
}

/// A training batch: normalized images and optional one-hot masks.
pub struct Batch {
    pub images: Tensor,
    pub masks: Option<Tensor>,
}

impl Batch {
    pub fn new(images: Tensor, masks: Option<Tensor>) -> Result<Self> {
        let (n, c, h, w) = images.dims4();
        if let Some(m) = &masks {
            if m.shape() != [n, 2, h, w] {
                return Err(contract(format!(
                    "mask batch {:?} does not match images {n}×{c}×{h}×{w}",
                    m.shape()
                )));
            }
        }
        Ok(Self { images, masks })
    }
}

fn relabel(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Divergence {
            component, value, ..
        } => Error::Divergence {
            epoch,
            step,
            component,
            value,
        },
        other => other,
    }
}

fn ensure_finite(v: f32, what: &str, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            step,
            component: what.into(),
            value: v,
        })
    }
}

fn grads_of(grads: &crate::nn::Grads, p: &[Var<'_>]) -> Vec<Tensor> {
    p.iter().map(|&v| grads.get_or_zeros(v)).collect()
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = CycleGan::new(&config)?;
        let (gc, dc) = (config.adam(config.lr_g), config.adam(config.lr_d));
        Ok(Self {
            opt_g_a2b: Adam::new(gc, nets.g_a2b.params()),
            opt_g_b2a: Adam::new(gc, nets.g_b2a.params()),
            opt_d_a: Adam::new(dc, nets.d_a.params()),
            opt_d_b: Adam::new(dc, nets.d_b.params()),
            replay_a: ReplayBuffer::new(config.replay_capacity),
            replay_b: ReplayBuffer::new(config.replay_capacity),
            nets,
            config,
            epoch: 0,
            step: 0,
        })
    }

    /// `(γ_t, λ_t)` for the current epoch.
    pub fn weights_now(&self) -> Result<(f32, f32)> {
        let s = self.config.resolved_schedule();
        schedule(self.epoch.min(s.total_epochs) as f32, &s)
    }

    /// Generator half-step: update both generators against fixed
    /// discriminators. Returns the loss terms and the generated batches
    /// `(fake_a, fake_b)`.
    pub fn generator_step(
        &mut self,
        a: &Batch,
        b: &Batch,
        s: &dyn Segmenter,
    ) -> Result<(LossBundle, Tensor, Tensor)> {
        let (gamma, lambda) = self.weights_now()?;
        let (epoch, step) = (self.epoch, self.step);
        let cfg = &self.config;
        let w = cfg.weights;
        let nets = &self.nets;
        let g = Graph::new();
        let pa2b = g.bind(nets.g_a2b.params(), true);
        let pb2a = g.bind(nets.g_b2a.params(), true);
        let pda = g.bind(nets.d_a.params(), false);
        let pdb = g.bind(nets.d_b.params(), false);
        let x = g.constant(a.images.clone());
        let y = g.constant(b.images.clone());

        let fake_b = nets.g_a2b.forward(&pa2b, x)?;
        let rec_a = nets.g_b2a.forward(&pb2a, fake_b)?;
        let fake_a = nets.g_b2a.forward(&pb2a, y)?;
        let rec_b = nets.g_a2b.forward(&pa2b, fake_a)?;

        let kind = w.adversarial_kind;
        let run = || -> Result<LossTerms<Var<'_>>> {
            let gan_g = generator_loss(nets.d_b.forward(&pdb, fake_b)?.score, kind)?;
            let gan_f = generator_loss(nets.d_a.forward(&pda, fake_a)?.score, kind)?;
            let cyc_fwd = feature_weighted_cycle_loss(
                &nets.d_a,
                &pda,
                x,
                rec_a,
                gamma,
                cfg.weight_cycle_by_d,
            )?;
            let cyc_bwd = feature_weighted_cycle_loss(
                &nets.d_b,
                &pdb,
                y,
                rec_b,
                gamma,
                cfg.weight_cycle_by_d,
            )?;
            let identity = if w.w_identity > 0.0 {
                cycle_loss(x, nets.g_b2a.forward(&pb2a, x)?)
                    .add(cycle_loss(y, nets.g_a2b.forward(&pa2b, y)?))
            } else {
                g.constant(Tensor::scalar(0.0))
            };
            let seg = match cfg.seg_target {
                SegTargetMode::Off => g.constant(Tensor::scalar(0.0)),
                mode => {
                    let target = |batch: &Batch, input: Var<'_>| -> SegTargetOwned {
                        match (&batch.masks, mode) {
                            (Some(m), SegTargetMode::Auto) => SegTargetOwned::Mask(m.clone()),
                            _ => SegTargetOwned::SelfOf(input.value()),
                        }
                    };
                    let ta = target(a, x);
                    let tb = target(b, y);
                    let fwd = segmentation_loss(s, fake_b, ta.as_target(&g))?;
                    let bwd = segmentation_loss(s, fake_a, tb.as_target(&g))?;
                    fwd.add(bwd)
                }
            };
            Ok(LossTerms {
                gan_g,
                gan_f,
                cyc_fwd,
                cyc_bwd,
                identity,
                seg,
            })
        };
        let terms = run().map_err(|e| relabel(e, epoch, step))?;
        let values = LossTerms {
            gan_g: terms.gan_g.item() as f64,
            gan_f: terms.gan_f.item() as f64,
            cyc_fwd: terms.cyc_fwd.item() as f64,
            cyc_bwd: terms.cyc_bwd.item() as f64,
            identity: terms.identity.item() as f64,
            seg: terms.seg.item() as f64,
        };
        let mut bundle = LossBundle::compose(values, lambda, &w);
        bundle.l_cyc_pixel =
            mean_abs_diff(&x.value(), &rec_a.value()) + mean_abs_diff(&y.value(), &rec_b.value());
        for (name, v) in bundle.components() {
            ensure_finite(v as f32, name, epoch, step)?;
        }
        let total = total_loss(&terms, lambda, &w);
        let grads = g.backward(total);
        let (ga, gb) = (grads_of(&grads, &pa2b), grads_of(&grads, &pb2a));
        let (fa, fb) = ((*fake_a.value()).clone(), (*fake_b.value()).clone());
        drop(g);
        let lr = self.config.lr_g * self.config.lr_factor(self.epoch);
        self.opt_g_a2b.config.lr = lr;
        self.opt_g_b2a.config.lr = lr;
        self.opt_g_a2b.update(self.nets.g_a2b.params_mut(), &ga);
        self.opt_g_b2a.update(self.nets.g_b2a.params_mut(), &gb);
        Ok((bundle, fa, fb))
    }

    /// Discriminator half-step on real batches versus replayed fakes.
    /// Returns `(l_disc_a, l_disc_b)`.
    pub fn discriminator_step(
        &mut self,
        real_a: &Tensor,
        real_b: &Tensor,
        fake_a: &Tensor,
        fake_b: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64)> {
        let (epoch, step) = (self.epoch, self.step);
        let kind = self.config.weights.adversarial_kind;
        let pool_a = self.replay_a.query(fake_a, rng);
        let pool_b = self.replay_b.query(fake_b, rng);
        let g = Graph::new();
        let pda = g.bind(self.nets.d_a.params(), true);
        let pdb = g.bind(self.nets.d_b.params(), true);
        let la = disc_objective(&g, &self.nets.d_a, &pda, real_a, pool_a, kind)
            .map_err(|e| relabel(e, epoch, step))?;
        let lb = disc_objective(&g, &self.nets.d_b, &pdb, real_b, pool_b, kind)
            .map_err(|e| relabel(e, epoch, step))?;
        let (va, vb) = (la.item(), lb.item());
        ensure_finite(va, "l_disc_a", epoch, step)?;
        ensure_finite(vb, "l_disc_b", epoch, step)?;
        let grads = g.backward(la.add(lb));
        let (ga, gb) = (grads_of(&grads, &pda), grads_of(&grads, &pdb));
        drop(g);
        let lr = self.config.lr_d * self.config.lr_factor(self.epoch);
        self.opt_d_a.config.lr = lr;
        self.opt_d_b.config.lr = lr;
        self.opt_d_a.update(self.nets.d_a.params_mut(), &ga);
        self.opt_d_b.update(self.nets.d_b.params_mut(), &gb);
        Ok((va as f64, vb as f64))
    }

    /// One full iteration: generator update, then both discriminators.
    pub fn train_step(&mut self, a: &Batch, b: &Batch, s: &dyn Segmenter) -> Result<LossBundle> {
        if !s.is_frozen() {
            return Err(contract("training requires a frozen segmenter"));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, self.step as u64, 0xd15c]));
        let (mut bundle, fake_a, fake_b) = self.generator_step(a, b, s)?;
        let (da, db) = self.discriminator_step(&a.images, &b.images, &fake_a, &fake_b, &mut rng)?;
        bundle.l_disc_a = da;
        bundle.l_disc_b = db;
        self.step += 1;
        Ok(bundle)
    }

    /// Run one epoch of `steps_per_epoch` iterations on random batches.
    pub fn run_epoch(
        &mut self,
        a: &DomainDataset,
        b: &DomainDataset,
        s: &dyn Segmenter,
    ) -> Result<Vec<LogRow>> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::MissingInput(
                "both training datasets must be non-empty".into(),
            ));
        }
        let sa: Vec<_> = a.samples().collect();
        let sb: Vec<_> = b.samples().collect();
        let (gamma, lambda) = self.weights_now()?;
        let mut rows = Vec::with_capacity(self.config.steps_per_epoch);
        for _ in 0..self.config.steps_per_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                self.config.seed,
                self.step as u64,
                0xba7c,
            ]));
            let ba = sample_batch(&sa, self.config.batch_size, self.config.crop_size, &mut rng)?;
            let bb = sample_batch(&sb, self.config.batch_size, self.config.crop_size, &mut rng)?;
            let step = self.step;
            let losses = self.train_step(&ba, &bb, s)?;
            rows.push(LogRow {
                epoch: self.epoch,
                step,
                gamma,
                lambda,
                losses,
            });
        }
        let n = rows.len() as f64;
        let cyc = rows.iter().map(|r| r.losses.l_cyc_pixel).sum::<f64>() / n;
        let seg = rows.iter().map(|r| r.losses.l_seg).sum::<f64>() / n;
        info!("epoch {}: mean cycle {cyc:.4}, mean seg {seg:.4} (gamma {gamma:.3}, lambda {lambda:.3})", self.epoch);
        self.epoch += 1;
        Ok(rows)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(
            CYCLEGAN_KIND,
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        c.push_store("g_a2b", self.nets.g_a2b.params());
        c.push_store("g_b2a", self.nets.g_b2a.params());
        c.push_store("d_a", self.nets.d_a.params());
        c.push_store("d_b", self.nets.d_b.params());
        let opts = [
            ("g_a2b", &self.opt_g_a2b, self.nets.g_a2b.params()),
            ("g_b2a", &self.opt_g_b2a, self.nets.g_b2a.params()),
            ("d_a", &self.opt_d_a, self.nets.d_a.params()),
            ("d_b", &self.opt_d_b, self.nets.d_b.params()),
        ];
        let mut opt_steps = serde_json::Map::new();
        for (name, opt, store) in opts {
            for (i, pname) in store.names().iter().enumerate() {
                c.push(format!("adam/{name}/m/{pname}"), opt.m[i].clone());
                c.push(format!("adam/{name}/v/{pname}"), opt.v[i].clone());
            }
            opt_steps.insert(name.into(), json!(opt.step));
        }
        for (name, buf) in [("replay_a", &self.replay_a), ("replay_b", &self.replay_b)] {
            for (i, t) in buf.items.iter().enumerate() {
                c.push(format!("{name}/{i}"), t.clone());
            }
        }
        c.meta = json!({
            "epoch": self.epoch,
            "step": self.step,
            "adam_steps": opt_steps,
            "replay_a": self.replay_a.len(),
            "replay_b": self.replay_b.len(),
            "generator_config": self.config.generator,
            "discriminator_config": self.config.discriminator,
        });
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CYCLEGAN_KIND)?;
        let config: TrainConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| format(format!("training config: {e}")))?;
        let mut st = Self::new(config)?;
        c.fill_store("g_a2b", st.nets.g_a2b.params_mut())?;
        c.fill_store("g_b2a", st.nets.g_b2a.params_mut())?;
        c.fill_store("d_a", st.nets.d_a.params_mut())?;
        c.fill_store("d_b", st.nets.d_b.params_mut())?;
        let meta_usize = |path: &[&str]| -> Result<usize> {
            let mut v = &c.meta;
            for p in path {
                v = &v[*p];
            }
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| format(format!("checkpoint meta lacks {}", path.join("."))))
        };
        let nets = &st.nets;
        let stores: [(&str, &ParamStore, &mut Adam); 4] = [
            ("g_a2b", nets.g_a2b.params(), &mut st.opt_g_a2b),
            ("g_b2a", nets.g_b2a.params(), &mut st.opt_g_b2a),
            ("d_a", nets.d_a.params(), &mut st.opt_d_a),
            ("d_b", nets.d_b.params(), &mut st.opt_d_b),
        ];
        for (name, store, opt) in stores {
            for (i, pname) in store.names().iter().enumerate() {
                opt.m[i] = c.require(&format!("adam/{name}/m/{pname}"))?.clone();
                opt.v[i] = c.require(&format!("adam/{name}/v/{pname}"))?.clone();
            }
            opt.step = meta_usize(&["adam_steps", name])? as u64;
        }
        for (name, buf) in [
            ("replay_a", &mut st.replay_a),
            ("replay_b", &mut st.replay_b),
        ] {
            let n = meta_usize(&[name])?;
            buf.items = (0..n)
                .map(|i| c.require(&format!("{name}/{i}")).cloned())
                .collect::<Result<_>>()?;
        }
        st.epoch = meta_usize(&["epoch"])?;
        st.step = meta_usize(&["step"])?;
        Ok(st)
    }
}

fn disc_objective<'g>(
    g: &'g Graph,
    net: &Discriminator,
    p: &[Var<'g>],
    real: &Tensor,
    fake: Tensor,
    kind: AdversarialKind,
) -> Result<Var<'g>> {
    let r = net.forward(p, g.constant(real.clone()))?.score;
    let f = net.forward(p, g.constant(fake))?.score;
    discriminator_loss(r, f, kind)
}

/// Owned form of a segmentation target, resolved per batch.
enum SegTargetOwned {
    Mask(Tensor),
    SelfOf(std::sync::Arc<Tensor>),
}

impl SegTargetOwned {
    fn as_target<'a, 'g>(&'a self, g: &'g Graph) -> SegTarget<'a, 'g> {
        match self {
            SegTargetOwned::Mask(m) => SegTarget::Mask(m),
            SegTargetOwned::SelfOf(x) => SegTarget::SelfConsistency(g.constant((**x).clone())),
        }
    }
}

fn crop_image(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let (n, c, h, w) = t.dims4();
    debug_assert!(y0 + size <= h && x0 + size <= w);
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in t.data().chunks(h * w) {
        for y in y0..y0 + size {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + size]);
        }
    }
    Tensor::new(&[n, c, size, size], out)
}

fn normalized(img: &ImageTensor) -> Result<Tensor> {
    Ok(match img.range() {
        RangeTag::RawU8 => normalize(img)?.to_tensor(),
        RangeTag::Norm => img.to_tensor(),
    })
}

/// Draw `n` samples uniformly with replacement, optionally cropping each.
pub fn sample_batch(
    samples: &[(&ImageTensor, Option<&SegMask>)],
    n: usize,
    crop: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let (img, mask) = samples[rng.random_range(0..samples.len())];
        let mut t = normalized(img)?;
        let mut m = mask.map(SegMask::to_one_hot);
        if let Some(size) = crop {
            let (h, w) = img.dims();
            if size > h || size > w {
                return Err(config(format!("crop {size} exceeds image {h}x{w}")));
            }
            let (y0, x0) = (
                rng.random_range(0..=h - size),
                rng.random_range(0..=w - size),
            );
            t = crop_image(&t, y0, x0, size);
            m = m.map(|m| crop_image(&m, y0, x0, size));
        }
        images.push(t);
        masks.push(m);
    }
    let masks = masks
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .map(|m| Tensor::stack(&m));
    Batch::new(Tensor::stack(&images), masks)
}

/// Outcome of [`fit`].
pub struct FitOutput {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Train from scratch. See [`fit_from`].
pub fn fit(
    cfg: &TrainConfig,
    a: &DomainDataset,
    b: &DomainDataset,
    s: &dyn Segmenter,
    out_dir: Option<&Path>,
) -> Result<FitOutput> {
    fit_from(TrainState::new(cfg.clone())?, a, b, s, out_dir)
}

/// Continue training until `state.config.epochs`. With `out_dir`, appends to
/// `loss_log.jsonl`, writes `checkpoint_e<epoch>.ckpt` every
/// `checkpoint_every` epochs and `final.ckpt` at the end.
pub fn fit_from(
    mut state: TrainState,
    a: &DomainDataset,
    b: &DomainDataset,
    s: &dyn Segmenter,
    out_dir: Option<&Path>,
) -> Result<FitOutput> {
    if a.domain != Domain::A || b.domain != Domain::B {
        return Err(contract("fit expects a domain-A and a domain-B dataset"));
    }
    let fingerprint = s.fingerprint();
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("loss_log.jsonl"))?,
            )
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    while state.epoch < state.config.epochs {
        let rows = state.run_epoch(a, b, s)?;
        if let Some(f) = log_file.as_mut() {
            for r in &rows {
                serde_json::to_writer(&mut *f, r).map_err(|e| format(e.to_string()))?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        log.extend(rows);
        if let Some(dir) = out_dir {
            let last = state.epoch == state.config.epochs;
            if last || state.epoch.is_multiple_of(state.config.checkpoint_every) {
                let path = if last {
                    dir.join("final.ckpt")
                } else {
                    dir.join(format!("checkpoint_e{:04}.ckpt", state.epoch))
                };
                state.to_checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if s.fingerprint() != fingerprint {
        return Err(contract("segmenter parameters changed during training"));
    }
    Ok(FitOutput {
        state,
        log,
        checkpoints,
    })
}

/// Read a JSON-lines loss log.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format(format!("loss log: {e}"))))
        .collect()
}

/// Mean pixel-space cycle loss (`l_cyc_pixel`) per epoch, in epoch order.
pub fn epoch_cycle_means(log: &[LogRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log {
        let v = r.losses.l_cyc_pixel;
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += v;
                *n += 1;
            }
            _ => out.push((r.epoch, v, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Load the generator for `dir` from a training or a single-generator checkpoint.
pub fn generator_from_checkpoint(c: &Checkpoint, dir: Direction) -> Result<Generator> {
    if c.kind == CYCLEGAN_KIND {
        let prefix = match dir {
            Direction::A2B => "g_a2b",
            Direction::B2A => "g_b2a",
        };
        Generator::from_checkpoint_prefix(c, prefix, c.meta["generator_config"].clone())
    } else {
        Generator::from_checkpoint(c)
    }
}

/// Translate every B-scan with the generator for `dir`; the result is raw
/// `[0, 255]`, tagged with the target domain, and keeps the input masks.
pub fn adapt_volume(c: &Checkpoint, vol: &Volume, dir: Direction) -> Result<Volume> {
    let g = generator_from_checkpoint(c, dir)?;
    adapt_with(&g, vol, dir)
}

pub fn adapt_with(g: &Generator, vol: &Volume, dir: Direction) -> Result<Volume> {
    let source = match dir {
        Direction::A2B => Domain::A,
        Direction::B2A => Domain::B,
    };
    if vol.domain != source {
        return Err(contract(format!(
            "volume {} is domain {}, expected {source}",
            vol.id, vol.domain
        )));
    }
    let bscans = vol
        .bscans()
        .iter()
        .map(|img| crate::data::denormalize(&g.translate(img)?))
        .collect::<Result<Vec<_>>>()?;
    Volume::new(
        format!("{}-cyclegan", vol.id),
        dir.target(),
        bscans,
        vol.masks().map(<[_]>::to_vec),
    )
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs() as f64)
        .sum::<f64>()
        / n
}
