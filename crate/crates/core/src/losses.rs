//! Adversarial, cycle, identity, segmentation and feature-weighted cycle
//! losses, the γ/λ schedule, and the composite generator objective.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::networks::Discriminator;
use crate::nn::graph::softmax_channels;
use crate::nn::{Tensor, Var};
use crate::segmenter::Segmenter;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f32 = 1e-12;
/// Smoothing term of the soft dice ratio; keeps empty-vs-empty finite.
pub const DICE_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    /// Log-likelihood (binary cross-entropy on logits).
    #[default]
    LogBce,
    LeastSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Generator,
    Discriminator,
}

fn check_scores(v: Var<'_>, what: &str) -> Result<()> {
    let t = v.value();
    if let Some(&bad) = t.data().iter().find(|x| !x.is_finite()) {
        return Err(Error::Divergence {
            epoch: 0,
            step: 0,
            component: what.into(),
            value: bad,
        });
    }
    Ok(())
}

/// Discriminator objective: the negated adversarial value
/// `-(E[log D(real)] + E[log(1 - D(fake))])` for [`AdversarialKind::LogBce`],
/// or `E[(D(real) - 1)²] + E[D(fake)²]` for least squares. Scores are logits.
pub fn discriminator_loss<'g>(
    real: Var<'g>,
    fake: Var<'g>,
    kind: AdversarialKind,
) -> Result<Var<'g>> {
    check_scores(real, "real score")?;
    check_scores(fake, "fake score")?;
    Ok(match kind {
        AdversarialKind::LogBce => real
            .scale(-1.0)
            .softplus()
            .mean_all()
            .add(fake.softplus().mean_all()),
        AdversarialKind::LeastSquares => real
            .add_scalar(-1.0)
            .square()
            .mean_all()
            .add(fake.square().mean_all()),
    })
}

/// Non-saturating generator objective `-E[log D(fake)]` (or `E[(D(fake)-1)²]`).
pub fn generator_loss<'g>(fake: Var<'g>, kind: AdversarialKind) -> Result<Var<'g>> {
    check_scores(fake, "fake score")?;
    Ok(match kind {
        AdversarialKind::LogBce => fake.scale(-1.0).softplus().mean_all(),
        AdversarialKind::LeastSquares => fake.add_scalar(-1.0).square().mean_all(),
    })
}

/// Dispatching form of [`generator_loss`] / [`discriminator_loss`]; the
/// generator side ignores `real`.
pub fn adversarial_loss<'g>(
    real: Var<'g>,
    fake: Var<'g>,
    side: Side,
    kind: AdversarialKind,
) -> Result<Var<'g>> {
    match side {
        Side::Generator => generator_loss(fake, kind),
        Side::Discriminator => discriminator_loss(real, fake, kind),
    }
}

/// Mean absolute difference per sample, averaged over the batch.
pub fn cycle_loss<'g>(x: Var<'g>, x_rec: Var<'g>) -> Var<'g> {
    x_rec.sub(x).abs().mean_per_sample().mean_all()
}

/// `E‖F(x) − x‖₁ + E‖G(y) − y‖₁`.
pub fn identity_loss<'g>(
    g: impl Fn(Var<'g>) -> Result<Var<'g>>,
    f: impl Fn(Var<'g>) -> Result<Var<'g>>,
    x: Var<'g>,
    y: Var<'g>,
) -> Result<Var<'g>> {
    Ok(cycle_loss(x, f(x)?).add(cycle_loss(y, g(y)?)))
}

/// Soft dice loss `1 − 2Σ(p·t)/(Σp + Σt)` per sample, averaged over the
/// batch. `probs` and `target` are `N×1×H×W` foreground maps.
pub fn dice_loss<'g>(probs: Var<'g>, target: &Tensor) -> Var<'g> {
    let g = probs.graph();
    let inter = probs.mul_const(target).sum_per_sample();
    let t_sum: Vec<f32> = target
        .data()
        .chunks(target.numel() / target.shape()[0])
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    let n = t_sum.len();
    let denom = probs
        .sum_per_sample()
        .add(g.constant(Tensor::new(&[n], t_sum)))
        .add_scalar(DICE_EPS);
    let ratio = inter.scale(2.0).add_scalar(DICE_EPS).div(denom);
    ratio.scale(-1.0).add_scalar(1.0).mean_all()
}

/// Mean per-pixel cross-entropy `−Σ_c t_c log p_c` for `N×C×H×W`
/// probabilities against a target distribution (or one-hot labels).
pub fn ce_loss<'g>(probs: Var<'g>, target: &Tensor) -> Var<'g> {
    let (n, _, h, w) = target.dims4();
    probs
        .ln_clamped(PROB_FLOOR)
        .mul_const(target)
        .sum_all()
        .scale(-1.0 / (n * h * w) as f32)
}

/// [`ce_loss`] evaluated from logits through a log-softmax.
pub fn ce_loss_logits<'g>(logits: Var<'g>, target: &Tensor) -> Var<'g> {
    let (n, _, h, w) = target.dims4();
    logits
        .log_softmax_channels()
        .mul_const(target)
        .sum_all()
        .scale(-1.0 / (n * h * w) as f32)
}

/// Where the segmentation loss takes its target from.
pub enum SegTarget<'a, 'g> {
    /// Ground-truth one-hot masks `N×2×H×W`.
    Mask(&'a Tensor),
    /// Hard labels of the segmenter on the untranslated input.
    SelfConsistency(Var<'g>),
}

/// Dice + cross-entropy between the frozen segmenter's output on a
/// generated batch and `target`. Gradients reach `generated` only.
pub fn segmentation_loss<'g>(
    s: &dyn Segmenter,
    generated: Var<'g>,
    target: SegTarget<'_, 'g>,
) -> Result<Var<'g>> {
    if !s.is_frozen() {
        return Err(contract("segmentation loss requires a frozen segmenter"));
    }
    let g = generated.graph();
    let one_hot = match target {
        SegTarget::Mask(t) => t.clone(),
        SegTarget::SelfConsistency(input) => {
            let logits = s.logits(g, input.detach())?;
            hard_one_hot(&softmax_channels(&logits.value()))
        }
    };
    let logits = s.logits(g, generated)?;
    let retina = logits.softmax_channels().select_channel(1);
    let dice = dice_loss(retina, &crate::segmenter::retina_channel(&one_hot));
    Ok(dice.add(ce_loss_logits(logits, &one_hot)))
}

/// Argmax one-hot of a `N×2×H×W` probability tensor (ties to background).
pub(crate) fn hard_one_hot(probs: &Tensor) -> Tensor {
    let (n, c, h, w) = probs.dims4();
    assert_eq!(c, 2);
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, 2, h, w]);
    for s in 0..n {
        for p in 0..plane {
            let (b, r) = (
                probs.data()[2 * s * plane + p],
                probs.data()[(2 * s + 1) * plane + p],
            );
            let k = usize::from(r > b);
            out.data_mut()[(2 * s + k) * plane + p] = 1.0;
        }
    }
    out
}

/// Cycle loss blending discriminator-feature and pixel reconstruction error:
/// `E[w · (γ‖f_D(x_rec) − f_D(x)‖₁ + (1−γ)‖x_rec − x‖₁)]`, where
/// `w = sigmoid(D(x))` (detached) when `weight_by_d`, else 1.
/// `d_params` are the discriminator's bound parameters.
pub fn feature_weighted_cycle_loss<'g>(
    d: &Discriminator,
    d_params: &[Var<'g>],
    x: Var<'g>,
    x_rec: Var<'g>,
    gamma: f32,
    weight_by_d: bool,
) -> Result<Var<'g>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(contract(format!("gamma {gamma} outside [0, 1]")));
    }
    let pixel = x_rec.sub(x).abs().mean_per_sample();
    let need_real = gamma > 0.0 || weight_by_d;
    let real = if need_real {
        Some(d.forward(d_params, x.detach())?)
    } else {
        None
    };
    let blend = if gamma > 0.0 {
        let real_f = real.as_ref().unwrap().features.detach();
        let rec_f = d.forward(d_params, x_rec)?.features;
        let feat = rec_f.sub(real_f).abs().mean_per_sample();
        feat.scale(gamma).add(pixel.scale(1.0 - gamma))
    } else {
        pixel
    };
    let weighted = if weight_by_d {
        let w = real
            .unwrap()
            .score
            .value()
            .map(crate::nn::graph::stable_sigmoid);
        blend.mul_const(&w)
    } else {
        blend
    };
    Ok(weighted.mean_all())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub gamma_start: f32,
    pub gamma_end: f32,
    pub lambda_start: f32,
    pub lambda_end: f32,
    /// Epoch at which the end values are reached. The trainer treats 0 as
    /// "the last epoch of the run".
    pub total_epochs: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            gamma_start: 0.0,
            gamma_end: 0.7,
            lambda_start: 10.0,
            lambda_end: 4.0,
            total_epochs: 0,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.gamma_start) || !unit.contains(&self.gamma_end) {
            return Err(config("gamma endpoints must lie in [0, 1]"));
        }
        if self.gamma_end < self.gamma_start {
            return Err(config("gamma must be non-decreasing"));
        }
        if !(self.lambda_end >= 0.0) || self.lambda_end > self.lambda_start {
            return Err(config("lambda must be non-negative and non-increasing"));
        }
        Ok(())
    }
}

/// Linear `(γ_t, λ_t)` at epoch `t ∈ [0, total_epochs]`.
pub fn schedule(t: f32, p: &ScheduleParams) -> Result<(f32, f32)> {
    p.validate()?;
    let total = p.total_epochs as f32;
    if !(0.0..=total).contains(&t) {
        return Err(contract(format!("epoch {t} outside [0, {total}]")));
    }
    if t == 0.0 || p.total_epochs == 0 {
        return Ok((p.gamma_start, p.lambda_start));
    }
    if t == total {
        return Ok((p.gamma_end, p.lambda_end));
    }
    let a = t / total;
    let lerp = |s: f32, e: f32| s + (e - s) * a;
    Ok((
        lerp(p.gamma_start, p.gamma_end).clamp(p.gamma_start, p.gamma_end),
        lerp(p.lambda_start, p.lambda_end).clamp(p.lambda_end, p.lambda_start),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_identity: f32,
    pub w_seg: f32,
    pub adversarial_kind: AdversarialKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_identity: 5.0,
            w_seg: 1.0,
            adversarial_kind: AdversarialKind::LogBce,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_identity >= 0.0) || !(self.w_seg >= 0.0) {
            return Err(config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// The generator-objective components, either as graph nodes or as values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub gan_g: T,
    pub gan_f: T,
    pub cyc_fwd: T,
    pub cyc_bwd: T,
    pub identity: T,
    pub seg: T,
}

/// `L_GAN(G) + L_GAN(F) + λ_t (L_cyc,fwd + L_cyc,bwd + w_seg·L_seg) + w_id·L_id`.
pub fn total_loss<'g>(terms: &LossTerms<Var<'g>>, lambda_t: f32, w: &LossWeights) -> Var<'g> {
    let cyc = terms
        .cyc_fwd
        .add(terms.cyc_bwd)
        .add(terms.seg.scale(w.w_seg));
    terms
        .gan_g
        .add(terms.gan_f)
        .add(cyc.scale(lambda_t))
        .add(terms.identity.scale(w.w_identity))
}

/// Scalar losses of one training iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_gan_g: f64,
    pub l_gan_f: f64,
    pub l_cyc_fwd: f64,
    pub l_cyc_bwd: f64,
    pub l_id: f64,
    pub l_seg: f64,
    /// Plain pixel-space reconstruction L1, both directions summed. Logged
    /// for monitoring; the objective uses the blended `l_cyc_*` terms.
    #[serde(default)]
    pub l_cyc_pixel: f64,
    /// Generator objective, composed as in [`total_loss`].
    pub total: f64,
    /// Discriminator objectives (not part of `total`).
    pub l_disc_a: f64,
    pub l_disc_b: f64,
}

impl LossBundle {
    pub fn compose(terms: LossTerms<f64>, lambda_t: f32, w: &LossWeights) -> Self {
        let lambda = lambda_t as f64;
        let total = terms.gan_g
            + terms.gan_f
            + lambda * (terms.cyc_fwd + terms.cyc_bwd + w.w_seg as f64 * terms.seg)
            + w.w_identity as f64 * terms.identity;
        Self {
            l_gan_g: terms.gan_g,
            l_gan_f: terms.gan_f,
            l_cyc_fwd: terms.cyc_fwd,
            l_cyc_bwd: terms.cyc_bwd,
            l_id: terms.identity,
            l_seg: terms.seg,
            l_cyc_pixel: 0.0,
            total,
            l_disc_a: 0.0,
            l_disc_b: 0.0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.components().iter().all(|(_, v)| v.is_finite())
    }

    pub fn components(&self) -> [(&'static str, f64); 10] {
        [
            ("l_gan_g", self.l_gan_g),
            ("l_gan_f", self.l_gan_f),
            ("l_cyc_fwd", self.l_cyc_fwd),
            ("l_cyc_bwd", self.l_cyc_bwd),
            ("l_id", self.l_id),
            ("l_seg", self.l_seg),
            ("l_cyc_pixel", self.l_cyc_pixel),
            ("total", self.total),
            ("l_disc_a", self.l_disc_a),
            ("l_disc_b", self.l_disc_b),
        ]
    }
}
