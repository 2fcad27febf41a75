//! Acceptance harness: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails. Oracles here are written independently of the
//! library code they check.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use oct_adapt::checkpoint::Checkpoint;
use oct_adapt::cli::{self, RunConfig};
use oct_adapt::data::{
    generate_phantom, Domain, DomainDataset, ImageTensor, PhantomConfig, PhantomStyle, RangeTag,
    SegMask, Split,
};
use oct_adapt::losses::{
    ce_loss, ce_loss_logits, cycle_loss, dice_loss, discriminator_loss,
    feature_weighted_cycle_loss, generator_loss, identity_loss, schedule, segmentation_loss,
    total_loss, AdversarialKind, LossBundle, LossTerms, LossWeights, ScheduleParams, SegTarget,
    DICE_EPS,
};
use oct_adapt::metrics::{self, Method, MetricKind};
use oct_adapt::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use oct_adapt::nn::{Graph, Tensor, Var};
use oct_adapt::noise::{
    adapt_traditional, build_noise_mask, density_map, inject_gaussian, TraditionalParams,
};
use oct_adapt::segmenter::{MiniUNet, MiniUNetConfig, Segmenter, SegmenterTrainConfig};
use oct_adapt::trainer::{epoch_cycle_means, fit, read_loss_log, Direction, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances.
const AUC_TOL: f64 = 1e-9;
const DICE_IDENTITY_TOL: f64 = 1e-12;
const METRICS_BUDGET: Duration = Duration::from_secs(60);
const PVALUE_TOL: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-3;
const FD_STEP: f32 = 1e-3;
const LOSS_BUDGET: Duration = Duration::from_secs(300);
const NOISE_STAT_TOL: f64 = 0.5;
const SEG_DICE_MIN: f64 = 0.90;
const CYCLEGAN_DICE_MIN: f64 = 0.85;
const MAX_EPOCHS: usize = 50;
const ALPHA: f64 = 0.05;
const CYCLE_RATIO_MAX: f64 = 0.5;
const DETERMINISM_MIN_ITERS: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Collects sub-check failures so a criterion reports every problem at once.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn finish(self) -> Outcome {
        if self.failures.is_empty() {
            outcome(true, self.notes.join("; "))
        } else {
            let mut f = self.failures;
            let n = f.len();
            f.truncate(5);
            outcome(false, format!("{n} failure(s): {}", f.join(" | ")))
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1. metrics

fn brute_counts(pred: &[u8], gt: &[u8]) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Probability that a random positive outranks a random negative, by
/// enumerating every pair.
fn brute_auc(scores: &[f32], gt: &[u8]) -> Option<f64> {
    let pos: Vec<f32> = scores
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f32> = scores
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() as f64 * neg.len() as f64))
}

fn criterion_metrics() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut c = Checks::default();
    for case in 0..500 {
        let h = r.random_range(1..=64usize);
        let w = r.random_range(1..=64usize);
        let n = h * w;
        let pg = r.random_range(0.0..1.0f64);
        let pp = r.random_range(0.0..1.0f64);
        // A few degenerate masks: empty, full, identical.
        let gt: Vec<u8> = match case % 50 {
            0 => vec![0; n],
            1 => vec![1; n],
            _ => (0..n).map(|_| u8::from(r.random_bool(pg))).collect(),
        };
        let pred: Vec<u8> = match case % 50 {
            2 => gt.clone(),
            3 => vec![0; n],
            _ => (0..n).map(|_| u8::from(r.random_bool(pp))).collect(),
        };
        // Half of the score maps are quantized to force ties.
        let levels = if case % 2 == 0 {
            r.random_range(2..12u32)
        } else {
            0
        };
        let scores: Vec<f32> = (0..n)
            .map(|_| {
                let s: f32 = r.random();
                if levels > 0 {
                    (s * levels as f32).floor() / levels as f32
                } else {
                    s
                }
            })
            .collect();

        let pm = SegMask::new(h, w, pred.clone()).unwrap();
        let gm = SegMask::new(h, w, gt.clone()).unwrap();
        let (tp, fp, fn_, tn) = brute_counts(&pred, &gt);
        let acc_o = (tp + tn) as f64 / n as f64;
        let dice_o = if 2 * tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        let jac_o = if tp + fp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp + fn_) as f64
        };
        let acc = metrics::accuracy(&pm, &gm).unwrap();
        let dice = metrics::dice(&pm, &gm).unwrap();
        let jac = metrics::jaccard(&pm, &gm).unwrap();
        c.check(acc == acc_o, || {
            format!("case {case}: accuracy {acc} vs {acc_o}")
        });
        c.check(dice == dice_o, || {
            format!("case {case}: dice {dice} vs {dice_o}")
        });
        c.check(jac == jac_o, || {
            format!("case {case}: jaccard {jac} vs {jac_o}")
        });
        let ident = 2.0 * jac / (1.0 + jac);
        c.check((dice - ident).abs() <= DICE_IDENTITY_TOL, || {
            format!("case {case}: dice {dice} vs 2J/(1+J) {ident}")
        });

        let auc = metrics::auc(&scores, &gm).unwrap();
        let auc_o = brute_auc(&scores, &gt);
        match (auc, auc_o) {
            (Some(a), Some(b)) => c.check((a - b).abs() <= AUC_TOL, || {
                format!("case {case}: auc {a} vs {b}")
            }),
            (None, None) => {}
            (a, b) => c.check(false, || {
                format!("case {case}: auc definedness {a:?} vs {b:?}")
            }),
        }
    }
    let elapsed = start.elapsed();
    c.check(elapsed < METRICS_BUDGET, || {
        format!("runtime {elapsed:?} over budget")
    });
    c.note(format!("500 cases in {:.1}s", elapsed.as_secs_f64()));
    c.finish()
}

// ---------------------------------------------------------------- 2. Welch

/// Lanczos approximation (g = 7, 9 terms) of ln Γ(x) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-tailed p of Welch's test computed from the raw samples.
fn welch_oracle(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = inc_beta(df / 2.0, 0.5, df / (df + t * t));
    (t, df, p)
}

fn criterion_welch() -> Outcome {
    let mut r = rng(202);
    let mut c = Checks::default();
    let mut worst = 0.0f64;
    for case in 0..50 {
        let na = r.random_range(2..40usize);
        let nb = r.random_range(2..40usize);
        let (ma, mb) = (r.random_range(-2.0..2.0f64), r.random_range(-2.0..2.0f64));
        let (sa, sb) = (r.random_range(0.05..3.0f64), r.random_range(0.05..3.0f64));
        let a: Vec<f64> = (0..na)
            .map(|_| ma + sa * r.random_range(-1.7..1.7f64))
            .collect();
        let b: Vec<f64> = (0..nb)
            .map(|_| mb + sb * r.random_range(-1.7..1.7f64))
            .collect();
        let got = metrics::ttest(&a, &b).unwrap();
        let (t, df, p) = welch_oracle(&a, &b);
        let err = (got.p - p).abs();
        worst = worst.max(err);
        c.check(err <= PVALUE_TOL, || {
            format!("fixture {case}: p {} vs oracle {p}", got.p)
        });
        c.check((got.t - t).abs() <= 1e-9 * t.abs().max(1.0), || {
            format!("fixture {case}: t {} vs {t}", got.t)
        });
        c.check((got.df - df).abs() <= 1e-9 * df, || {
            format!("fixture {case}: df {} vs {df}", got.df)
        });
    }
    for n in [2usize, 5, 30] {
        let a: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let p = metrics::ttest(&a, &a).unwrap().p;
        c.check(p == 1.0, || format!("ttest(a, a) with n={n} gave p={p}"));
    }
    c.note(format!("50 fixtures, max |Δp| {worst:.2e}; ttest(a,a)=1"));
    c.finish()
}

// ---------------------------------------------------------------- 3. losses

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn softplus64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mean_abs_per_sample(a: &[f32], b: &[f32], n: usize) -> Vec<f64> {
    let per = a.len() / n;
    (0..n)
        .map(|s| {
            (s * per..(s + 1) * per)
                .map(|i| (a[i] as f64 - b[i] as f64).abs())
                .sum::<f64>()
                / per as f64
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Compare the analytic gradient of `f` with central differences along
/// several directions. Directions carry the sign of the analytic gradient
/// with random positive magnitudes (no cancellation, so f32 round-off stays
/// far below the tolerance), plus random ±1 directions whose error is
/// measured against Σ|g·v|. For `piecewise` losses, directions whose
/// stencil straddles a kink are skipped. Returns the largest relative
/// discrepancy, or infinity when more than two directions were skipped.
fn grad_check(
    inputs: &[Tensor],
    f: &dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
    seed: u64,
    piecewise: bool,
) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |shift: &[Tensor], k: f32| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(shift)
            .map(|(t, d)| g.variable(t.zip_map(d, |a, b| a + k * b)))
            .collect();
        f(&g, &vars).item() as f64
    };
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for trial in 0..8 {
        let signed = trial < 4;
        let dirs: Vec<Tensor> = analytic
            .iter()
            .map(|ga| {
                Tensor::from_fn(ga.shape(), |i| {
                    let gi = ga.data()[i];
                    if signed {
                        let m: f32 = r.random_range(0.5..1.5);
                        if gi > 0.0 {
                            m
                        } else if gi < 0.0 {
                            -m
                        } else {
                            0.0
                        }
                    } else if r.random_bool(0.5) {
                        1.0
                    } else {
                        -1.0
                    }
                })
            })
            .collect();
        let dot: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(a, d)| {
                a.data()
                    .iter()
                    .zip(d.data())
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum::<f64>()
            })
            .sum();
        let scale: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(a, d)| {
                a.data()
                    .iter()
                    .zip(d.data())
                    .map(|(&x, &y)| (x as f64 * y as f64).abs())
                    .sum::<f64>()
            })
            .sum();
        if scale == 0.0 {
            continue;
        }
        let f0 = eval(&dirs, 0.0);
        let (up, down) = (eval(&dirs, FD_STEP), eval(&dirs, -FD_STEP));
        // A kink inside the stencil shows up as disagreeing one-sided
        // slopes; the derivative is undefined there, so the direction is
        // skipped rather than scored.
        let (fwd, bwd) = ((up - f0) / FD_STEP as f64, (f0 - down) / FD_STEP as f64);
        if piecewise && (fwd - bwd).abs() > 2e-3 * scale {
            kinks += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * FD_STEP as f64);
        worst = worst.max((fd - dot).abs() / scale.max(fd.abs()));
    }
    if kinks > 2 {
        return f64::INFINITY;
    }
    worst
}

/// Segmenter wrapper recording where its parameters land on the tape.
struct Probe {
    net: MiniUNet,
    trainable: bool,
    ids: Mutex<Vec<usize>>,
}

impl Segmenter for Probe {
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> oct_adapt::Result<Var<'g>> {
        let p = g.bind(self.net.params(), self.trainable);
        self.ids.lock().unwrap().extend(p.iter().map(Var::node_id));
        self.net.forward_with(&p, x)
    }

    fn is_frozen(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> u64 {
        self.net.fingerprint()
    }
}

fn criterion_losses() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut r = rng(303);
    let mut worst_val = 0.0f64;
    let mut worst_grad = 0.0f64;
    let mut value = |c: &mut Checks, name: &str, got: f32, want: f64| {
        // Absolute below 1, relative above: an f32 loss near 30 cannot be
        // represented to 1e-6 absolute.
        let err = (got as f64 - want).abs() / want.abs().max(1.0);
        worst_val = worst_val.max(err);
        c.check(err <= LOSS_TOL, || {
            format!("{name}: {got} vs oracle {want}")
        });
    };
    let mut gradient = |c: &mut Checks, name: &str, err: f64| {
        worst_grad = worst_grad.max(err);
        c.check(err <= GRAD_REL_TOL, || {
            format!("{name}: gradient rel error {err:.2e}")
        });
    };
    let (n, hw) = (2usize, 8usize);
    let img = [n, 1, hw, hw];

    for rep in 0..3 {
        // Adversarial log-BCE.
        let real = rand_tensor(&mut r, &[hw * hw], -3.0, 3.0);
        let fake = rand_tensor(&mut r, &[hw * hw], -3.0, 3.0);
        let g = Graph::new();
        let dl = discriminator_loss(
            g.constant(real.clone()),
            g.constant(fake.clone()),
            AdversarialKind::LogBce,
        )
        .unwrap();
        let gl = generator_loss(g.constant(fake.clone()), AdversarialKind::LogBce).unwrap();
        let rd: Vec<f64> = real.data().iter().map(|&v| v as f64).collect();
        let fk: Vec<f64> = fake.data().iter().map(|&v| v as f64).collect();
        let d_o = mean(&rd.iter().map(|&v| softplus64(-v)).collect::<Vec<_>>())
            + mean(&fk.iter().map(|&v| softplus64(v)).collect::<Vec<_>>());
        let g_o = mean(&fk.iter().map(|&v| softplus64(-v)).collect::<Vec<_>>());
        value(&mut c, "discriminator log-bce", dl.item(), d_o);
        value(&mut c, "generator log-bce", gl.item(), g_o);
        gradient(
            &mut c,
            "discriminator log-bce",
            grad_check(
                &[real, fake.clone()],
                &|_, v| discriminator_loss(v[0], v[1], AdversarialKind::LogBce).unwrap(),
                rep,
                false,
            ),
        );
        gradient(
            &mut c,
            "generator log-bce",
            grad_check(
                &[fake],
                &|_, v| generator_loss(v[0], AdversarialKind::LogBce).unwrap(),
                rep,
                false,
            ),
        );

        // Cycle L1, keeping every residual away from the kink at zero.
        let x = rand_tensor(&mut r, &img, -1.0, 1.0);
        let x_rec = x.map(|v| {
            let d: f32 = rng(v.to_bits() as u64).random_range(0.05..0.6);
            if v > 0.0 {
                v - d
            } else {
                v + d
            }
        });
        let g = Graph::new();
        let cl = cycle_loss(g.constant(x.clone()), g.constant(x_rec.clone()));
        value(
            &mut c,
            "cycle L1",
            cl.item(),
            mean(&mean_abs_per_sample(x.data(), x_rec.data(), n)),
        );
        gradient(
            &mut c,
            "cycle L1",
            grad_check(
                &[x.clone(), x_rec.clone()],
                &|_, v| cycle_loss(v[0], v[1]),
                rep,
                false,
            ),
        );

        // Identity through two smooth stand-in generators.
        let gmap = |v: f32| (0.8 * v + 0.1).tanh();
        let fmap = |v: f32| (1.2 * v - 0.2).tanh();
        let pick = |r: &mut ChaCha8Rng, m: &dyn Fn(f32) -> f32| {
            Tensor::from_fn(&img, |_| loop {
                let v: f32 = r.random_range(-2.0..2.0);
                if (m(v) - v).abs() > 0.02 {
                    break v;
                }
            })
        };
        let xi = pick(&mut r, &fmap);
        let yi = pick(&mut r, &gmap);
        let g = Graph::new();
        let il = id_fn(&[g.constant(xi.clone()), g.constant(yi.clone())]);
        let fx: Vec<f32> = xi.data().iter().map(|&v| fmap(v)).collect();
        let gy: Vec<f32> = yi.data().iter().map(|&v| gmap(v)).collect();
        let il_o = mean(&mean_abs_per_sample(xi.data(), &fx, n))
            + mean(&mean_abs_per_sample(yi.data(), &gy, n));
        value(&mut c, "identity", il.item(), il_o);
        gradient(
            &mut c,
            "identity",
            grad_check(&[xi, yi], &|_, v| id_fn(v), rep, false),
        );

        // Soft dice.
        let probs = rand_tensor(&mut r, &img, 0.05, 0.95);
        let target = Tensor::from_fn(&img, |_| f32::from(r.random_bool(0.4)));
        let g = Graph::new();
        let dv = dice_loss(g.constant(probs.clone()), &target);
        let per = hw * hw;
        let dice_o = mean(
            &(0..n)
                .map(|s| {
                    let (mut pt, mut ps, mut ts) = (0.0f64, 0.0, 0.0);
                    for i in s * per..(s + 1) * per {
                        let (p, t) = (probs.data()[i] as f64, target.data()[i] as f64);
                        pt += p * t;
                        ps += p;
                        ts += t;
                    }
                    1.0 - (2.0 * pt + DICE_EPS as f64) / (ps + ts + DICE_EPS as f64)
                })
                .collect::<Vec<_>>(),
        );
        value(&mut c, "dice", dv.item(), dice_o);
        let tgt = target.clone();
        gradient(
            &mut c,
            "dice",
            grad_check(&[probs], &|_, v| dice_loss(v[0], &tgt), rep, false),
        );

        // Cross-entropy, on probabilities and on logits.
        // Logits stay within ±1.5 so no probability falls below ~0.05, where
        // the finite-difference truncation error of ln p would dominate.
        let logits = rand_tensor(&mut r, &[n, 2, hw, hw], -1.5, 1.5);
        let labels: Vec<u8> = (0..n * per).map(|_| u8::from(r.random_bool(0.5))).collect();
        let onehot = Tensor::from_fn(&[n, 2, hw, hw], |i| {
            let (s, ch, p) = (i / (2 * per), (i / per) % 2, i % per);
            f32::from(labels[s * per + p] as usize == ch)
        });
        let probs2 = Tensor::from_fn(&[n, 2, hw, hw], |i| {
            let (s, ch, p) = (i / (2 * per), (i / per) % 2, i % per);
            let l0 = logits.data()[(2 * s) * per + p] as f64;
            let l1 = logits.data()[(2 * s + 1) * per + p] as f64;
            let z = if ch == 0 { l0 } else { l1 };
            (z.exp() / (l0.exp() + l1.exp())) as f32
        });
        let mut ce_o = 0.0f64;
        let mut ce_logit_o = 0.0f64;
        for s in 0..n {
            for p in 0..per {
                let k = labels[s * per + p] as usize;
                ce_o -= (probs2.data()[(2 * s + k) * per + p] as f64).ln();
                let l0 = logits.data()[(2 * s) * per + p] as f64;
                let l1 = logits.data()[(2 * s + 1) * per + p] as f64;
                let lk = if k == 0 { l0 } else { l1 };
                ce_logit_o -= lk - (l0.exp() + l1.exp()).ln();
            }
        }
        ce_o /= (n * per) as f64;
        ce_logit_o /= (n * per) as f64;
        let g = Graph::new();
        value(
            &mut c,
            "cross-entropy",
            ce_loss(g.constant(probs2.clone()), &onehot).item(),
            ce_o,
        );
        value(
            &mut c,
            "cross-entropy (logits)",
            ce_loss_logits(g.constant(logits.clone()), &onehot).item(),
            ce_logit_o,
        );
        let oh = onehot.clone();
        gradient(
            &mut c,
            "cross-entropy",
            grad_check(&[probs2], &|_, v| ce_loss(v[0], &oh), rep, false),
        );
        gradient(
            &mut c,
            "cross-entropy (logits)",
            grad_check(&[logits], &|_, v| ce_loss_logits(v[0], &oh), rep, false),
        );

        // Feature-weighted blend through a small discriminator.
        let d = Discriminator::new(
            DiscriminatorConfig {
                n_levels: 2,
                base_channels: 4,
                ..DiscriminatorConfig::default()
            },
            40 + rep,
        )
        .unwrap();
        let gamma: f32 = r.random_range(0.2..0.8);
        let (fx, sx) = d_eval(&d, &x);
        // The blend has kinks where a feature residual is zero. Draw the
        // reconstruction until every residual clears what a finite-difference
        // step can move it by, with a 4x margin.
        let x_rec = loop {
            let cand = rand_tensor(&mut r, &img, -1.0, 1.0);
            let (fr, _) = d_eval(&d, &cand);
            let min_res = fx
                .iter()
                .zip(&fr)
                .map(|(a, b)| (a - b).abs())
                .fold(f32::MAX, f32::min);
            let pix_ok = x
                .data()
                .iter()
                .zip(cand.data())
                .all(|(a, b)| (a - b).abs() > 0.01);
            let mut reach = 0.0f32;
            for k in 0..4 {
                let mut rr = rng(1000 + k);
                let bumped = Tensor::from_fn(cand.shape(), |i| {
                    cand.data()[i] + 1.5 * FD_STEP * if rr.random_bool(0.5) { 1.0 } else { -1.0 }
                });
                let (fb, _) = d_eval(&d, &bumped);
                reach = fr
                    .iter()
                    .zip(&fb)
                    .map(|(a, b)| (a - b).abs())
                    .fold(reach, f32::max);
            }
            if pix_ok && min_res > 4.0 * reach {
                break cand;
            }
        };
        let (fr, _) = d_eval(&d, &x_rec);
        let pix = mean_abs_per_sample(x.data(), x_rec.data(), n);
        let feat = mean_abs_per_sample(&fx, &fr, n);
        for by_d in [false, true] {
            let blend: Vec<f64> = (0..n)
                .map(|s| {
                    let w = if by_d { sigmoid64(sx[s] as f64) } else { 1.0 };
                    w * (gamma as f64 * feat[s] + (1.0 - gamma as f64) * pix[s])
                })
                .collect();
            let g = Graph::new();
            let p = g.bind(d.params(), false);
            let got = feature_weighted_cycle_loss(
                &d,
                &p,
                g.constant(x.clone()),
                g.constant(x_rec.clone()),
                gamma,
                by_d,
            )
            .unwrap();
            let name = if by_d {
                "feature blend (D-weighted)"
            } else {
                "feature blend"
            };
            value(&mut c, name, got.item(), mean(&blend));
            // Features of the genuine sample are a detached target, so the
            // reconstruction is the input to differentiate.
            let (dd, xc) = (&d, &x);
            gradient(
                &mut c,
                name,
                grad_check(
                    std::slice::from_ref(&x_rec),
                    &|g, v| {
                        let p = g.bind(dd.params(), false);
                        feature_weighted_cycle_loss(
                            dd,
                            &p,
                            g.constant(xc.clone()),
                            v[0],
                            gamma,
                            by_d,
                        )
                        .unwrap()
                    },
                    rep,
                    true,
                ),
            );
        }

        // Total composition.
        let t: Vec<f32> = (0..6).map(|_| r.random_range(0.0..3.0)).collect();
        let lambda: f32 = r.random_range(1.0..10.0);
        let w = LossWeights {
            w_identity: r.random_range(0.0..10.0),
            w_seg: r.random_range(0.0..2.0),
            ..LossWeights::default()
        };
        let tot_o = t[0] as f64
            + t[1] as f64
            + lambda as f64 * (t[2] as f64 + t[3] as f64 + w.w_seg as f64 * t[5] as f64)
            + w.w_identity as f64 * t[4] as f64;
        let tt: Vec<Tensor> = t.iter().map(|&v| Tensor::scalar(v)).collect();
        let g = Graph::new();
        let leaves: Vec<Var> = tt.iter().map(|v| g.constant(v.clone())).collect();
        let total = total_loss(&terms_of(&leaves), lambda, &w);
        value(&mut c, "total", total.item(), tot_o);
        let vals = LossTerms {
            gan_g: t[0] as f64,
            gan_f: t[1] as f64,
            cyc_fwd: t[2] as f64,
            cyc_bwd: t[3] as f64,
            identity: t[4] as f64,
            seg: t[5] as f64,
        };
        let bundle = LossBundle::compose(vals, lambda, &w);
        c.check(
            (bundle.total - tot_o).abs() <= 1e-9 * tot_o.abs().max(1.0),
            || format!("bundle total {} vs {tot_o}", bundle.total),
        );
        gradient(
            &mut c,
            "total",
            grad_check(
                &tt,
                &|_, v| total_loss(&terms_of(v), lambda, &w),
                rep,
                false,
            ),
        );
    }

    // Segmentation loss: gradient reaches the generated image, never the
    // frozen segmenter's parameters.
    let net = MiniUNet::new(
        MiniUNetConfig {
            base_channels: 4,
            ..MiniUNetConfig::default()
        },
        9,
    )
    .unwrap()
    .freeze();
    let gen_img = rand_tensor(&mut r, &img, -1.0, 1.0);
    let mask = Tensor::from_fn(&[n, 2, hw, hw], |i| {
        let (s, ch, p) = (i / (2 * hw * hw), (i / (hw * hw)) % 2, i % (hw * hw));
        f32::from(usize::from((p + s) % 3 == 0) == ch)
    });
    for trainable in [false, true] {
        let probe = Probe {
            net: net.clone(),
            trainable,
            ids: Mutex::new(Vec::new()),
        };
        let g = Graph::new();
        let x = g.variable(gen_img.clone());
        let loss = segmentation_loss(&probe, x, SegTarget::Mask(&mask)).unwrap();
        let grads = g.backward(loss);
        let ids = probe.ids.lock().unwrap().clone();
        let param_mass: f64 = ids
            .iter()
            .filter_map(|&id| grads.get_node(id))
            .map(|t| t.data().iter().map(|v| v.abs() as f64).sum::<f64>())
            .sum();
        let input_mass: f64 = grads
            .get_or_zeros(x)
            .data()
            .iter()
            .map(|v| v.abs() as f64)
            .sum();
        if trainable {
            // Control: the same probe with trainable parameters does see gradient.
            c.check(param_mass > 0.0, || {
                "control run produced no parameter gradient".into()
            });
        } else {
            c.check(!ids.is_empty() && param_mass == 0.0, || {
                format!("frozen segmenter parameters received gradient mass {param_mass}")
            });
            c.check(input_mass > 0.0, || {
                "no gradient reached the generated image".into()
            });
        }
    }
    // Oracle value of the segmentation loss from the frozen network's logits.
    {
        let g = Graph::new();
        let seg =
            segmentation_loss(&net, g.constant(gen_img.clone()), SegTarget::Mask(&mask)).unwrap();
        let gl = Graph::new();
        let lv = net
            .logits(&gl, gl.constant(gen_img.clone()))
            .unwrap()
            .value();
        let per = hw * hw;
        let (mut ce, mut dsum) = (0.0f64, 0.0f64);
        for s in 0..n {
            let (mut pt, mut ps, mut ts) = (0.0f64, 0.0, 0.0);
            for p in 0..per {
                let l0 = lv.data()[(2 * s) * per + p] as f64;
                let l1 = lv.data()[(2 * s + 1) * per + p] as f64;
                let t1 = mask.data()[(2 * s + 1) * per + p] as f64;
                let p1 = sigmoid64(l1 - l0);
                let lse = l0.max(l1) + (-(l0 - l1).abs()).exp().ln_1p();
                ce -= if t1 == 1.0 { l1 - lse } else { l0 - lse };
                pt += p1 * t1;
                ps += p1;
                ts += t1;
            }
            dsum += 1.0 - (2.0 * pt + DICE_EPS as f64) / (ps + ts + DICE_EPS as f64);
        }
        let want = dsum / n as f64 + ce / (n * per) as f64;
        value(&mut c, "segmentation (dice + ce)", seg.item(), want);
    }

    let elapsed = start.elapsed();
    c.check(elapsed < LOSS_BUDGET, || {
        format!("runtime {elapsed:?} over budget")
    });
    c.note(format!(
        "max |value err| {worst_val:.1e}, max grad rel err {worst_grad:.1e}, frozen-S gradient 0, {:.1}s",
        elapsed.as_secs_f64()
    ));
    c.finish()
}

fn id_fn<'g>(v: &[Var<'g>]) -> Var<'g> {
    identity_loss(
        |t: Var<'g>| Ok(t.scale(0.8).add_scalar(0.1).tanh()),
        |t: Var<'g>| Ok(t.scale(1.2).add_scalar(-0.2).tanh()),
        v[0],
        v[1],
    )
    .unwrap()
}

fn terms_of<'g>(v: &[Var<'g>]) -> LossTerms<Var<'g>> {
    LossTerms {
        gan_g: v[0],
        gan_f: v[1],
        cyc_fwd: v[2],
        cyc_bwd: v[3],
        identity: v[4],
        seg: v[5],
    }
}

fn d_eval(d: &Discriminator, x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let g = Graph::new();
    let p = g.bind(d.params(), false);
    let out = d.forward(&p, g.constant(x.clone())).unwrap();
    let f = out.features.value().data().to_vec();
    let s = out.score.value().data().to_vec();
    (f, s)
}

// ---------------------------------------------------------------- 4. schedule

fn criterion_schedule() -> Outcome {
    let mut c = Checks::default();
    let mut r = rng(404);
    let mut cases = vec![ScheduleParams {
        total_epochs: 49,
        ..ScheduleParams::default()
    }];
    for _ in 0..20 {
        let g0: f32 = r.random_range(0.0..1.0);
        let l1: f32 = r.random_range(0.0..5.0);
        cases.push(ScheduleParams {
            gamma_start: g0,
            gamma_end: r.random_range(g0..=1.0),
            lambda_start: r.random_range(l1..20.0),
            lambda_end: l1,
            total_epochs: r.random_range(1..200),
        });
    }
    // The trainer's resolution of the "span the run" default.
    let tc = TrainConfig {
        epochs: 17,
        ..TrainConfig::default()
    };
    cases.push(tc.resolved_schedule());
    c.check(tc.resolved_schedule().total_epochs == 16, || {
        "trainer schedule does not end at the last epoch".into()
    });

    for p in &cases {
        let t_end = p.total_epochs as f32;
        let s0 = schedule(0.0, p).unwrap();
        let s1 = schedule(t_end, p).unwrap();
        c.check(s0 == (p.gamma_start, p.lambda_start), || {
            format!("{p:?}: start {s0:?}")
        });
        c.check(s1 == (p.gamma_end, p.lambda_end), || {
            format!("{p:?}: end {s1:?}")
        });
        let mut prev = s0;
        for t in 1..=p.total_epochs {
            let s = schedule(t as f32, p).unwrap();
            c.check(s.0 >= prev.0 && s.1 <= prev.1, || {
                format!("{p:?}: not monotone at epoch {t}: {prev:?} -> {s:?}")
            });
            prev = s;
        }
    }
    c.note(format!("{} schedules, every epoch checked", cases.len()));
    c.finish()
}

// ---------------------------------------------------------------- 5. architecture

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn criterion_architecture() -> Outcome {
    let mut c = Checks::default();
    let mut r = rng(505);
    let gen = Generator::new(GeneratorConfig::default(), 11).unwrap();
    for i in 0..200 {
        let h = 4 * r.random_range(2..=8usize);
        let w = 4 * r.random_range(2..=8usize);
        let n = 1 + i % 2;
        let shape = [n, 1, h, w];
        let x = match i % 5 {
            0 => Tensor::full(&shape, 1.0),
            1 => Tensor::full(&shape, -1.0),
            2 => Tensor::from_fn(
                &shape,
                |k| if (k / w + k % w) % 2 == 0 { 1.0 } else { -1.0 },
            ),
            3 => Tensor::from_fn(&shape, |_| if r.random_bool(0.5) { 1.0 } else { -1.0 }),
            _ => rand_tensor(&mut r, &shape, -1.0, 1.0),
        };
        let y = gen.forward_tensor(&x).unwrap();
        c.check(y.shape() == x.shape(), || {
            format!("input {:?} -> output {:?}", x.shape(), y.shape())
        });
        c.check(
            y.data()
                .iter()
                .all(|v| v.is_finite() && (-1.0..=1.0).contains(v)),
            || format!("input {i}: output outside [-1, 1]"),
        );
    }

    // Zero the residual branch's last convolution: the block is the identity.
    let mut zeroed = Generator::new(
        GeneratorConfig {
            base_channels: 8,
            n_residual_blocks: 3,
            ..GeneratorConfig::default()
        },
        12,
    )
    .unwrap();
    let targets: Vec<[usize; 2]> = zeroed
        .residual_blocks()
        .iter()
        .map(|b| b.output_conv_params())
        .collect();
    for idx in targets.iter().flatten() {
        zeroed.params_mut().get_mut(*idx).data_mut().fill(0.0);
    }
    let x = rand_tensor(&mut r, &[2, 32, 6, 6], -2.0, 2.0);
    for (k, block) in zeroed.residual_blocks().iter().enumerate() {
        let g = Graph::new();
        let p = g.bind(zeroed.params(), false);
        let xv = g.constant(x.clone());
        let branch = block.branch(&p, xv).value();
        let out = block.forward(&p, xv).value();
        c.check(branch.data().iter().all(|&v| v == 0.0), || {
            format!("block {k}: zeroed branch is not zero")
        });
        c.check(bits(&out) == bits(&x), || {
            format!("block {k}: output differs from input")
        });
    }

    // Checkpoint round trips are bit-exact.
    let dir = tempfile::tempdir().unwrap();
    let img = rand_tensor(&mut r, &[2, 1, 32, 32], -1.0, 1.0);
    let g1 = Generator::new(
        GeneratorConfig {
            base_channels: 8,
            ..GeneratorConfig::default()
        },
        13,
    )
    .unwrap();
    g1.to_checkpoint().save(dir.path().join("g.ckpt")).unwrap();
    let g2 =
        Generator::from_checkpoint(&Checkpoint::load(dir.path().join("g.ckpt")).unwrap()).unwrap();
    c.check(
        bits(&g1.forward_tensor(&img).unwrap()) == bits(&g2.forward_tensor(&img).unwrap()),
        || "generator forward differs after reload".into(),
    );
    let d1 = Discriminator::new(DiscriminatorConfig::default(), 14).unwrap();
    d1.to_checkpoint().save(dir.path().join("d.ckpt")).unwrap();
    let d2 = Discriminator::from_checkpoint(&Checkpoint::load(dir.path().join("d.ckpt")).unwrap())
        .unwrap();
    let (f1, s1) = d_eval(&d1, &img);
    let (f2, s2) = d_eval(&d2, &img);
    let same = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    c.check(same(&f1, &f2) && same(&s1, &s2), || {
        "discriminator forward differs after reload".into()
    });
    let u1 = MiniUNet::new(MiniUNetConfig::default(), 15)
        .unwrap()
        .freeze();
    u1.to_checkpoint().save(dir.path().join("s.ckpt")).unwrap();
    let u2 =
        MiniUNet::from_checkpoint(&Checkpoint::load(dir.path().join("s.ckpt")).unwrap()).unwrap();
    let (ga, gb) = (Graph::new(), Graph::new());
    let la = u1.logits(&ga, ga.constant(img.clone())).unwrap().value();
    let lb = u2.logits(&gb, gb.constant(img.clone())).unwrap().value();
    c.check(bits(&la) == bits(&lb), || {
        "segmenter forward differs after reload".into()
    });
    c.note("200 generator inputs in range, zero-branch identity on 3 blocks, 3 bit-exact reloads");
    c.finish()
}

// ---------------------------------------------------------------- 6. traditional

/// The two rules written out directly with a 5×5 window.
fn rule_oracle(img: &[f32], h: usize, w: usize, p: &TraditionalParams) -> (Vec<f32>, Vec<bool>) {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        img[yy * w + xx] as f64
    };
    let mut dens = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -2..=2 {
                for dx in -2..=2 {
                    s += at(y + dy, x + dx);
                }
            }
            dens[y as usize * w + x as usize] = s / 25.0;
        }
    }
    let mut out = img.to_vec();
    let mut mask = vec![true; h * w];
    for i in 0..h * w {
        if dens[i] > p.density_threshold as f64 {
            out[i] = p.set_intensity;
            mask[i] = false;
        }
    }
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if img[i] > p.bright_threshold && dens[i] <= p.low_density_threshold as f64 {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (ny, nx) = (y + dy, x + dx);
                        if (dy, dx) != (0, 0)
                            && ny >= 0
                            && nx >= 0
                            && ny < h as isize
                            && nx < w as isize
                        {
                            mask[ny as usize * w + nx as usize] = false;
                        }
                    }
                }
            }
        }
    }
    (out, mask)
}

fn criterion_traditional() -> Outcome {
    let mut c = Checks::default();
    let mut r = rng(606);
    let p = TraditionalParams {
        density_window: 5,
        ..TraditionalParams::default()
    };
    let mut fired = (0usize, 0usize);
    for case in 0..100 {
        let h = r.random_range(32..48usize);
        let w = r.random_range(32..48usize);
        let mut v: Vec<f32> = (0..h * w).map(|_| r.random_range(0..60u8) as f32).collect();
        // Isolated bright dots trigger rule 2, bright patches rule 1.
        for _ in 0..r.random_range(0..12) {
            v[r.random_range(0..h * w)] = r.random_range(226..=255u8) as f32;
        }
        for _ in 0..r.random_range(0..4) {
            let (y0, x0) = (r.random_range(0..h - 6), r.random_range(0..w - 6));
            let (ph, pw) = (r.random_range(3..7), r.random_range(3..7));
            let val = r.random_range(150..=255u8) as f32;
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    v[y * w + x] = val;
                }
            }
        }
        let img = ImageTensor::new(h, w, v.clone(), RangeTag::RawU8).unwrap();
        let dens = density_map(&img, p.density_window).unwrap();
        let (out, mask) = build_noise_mask(&img, &dens, &p).unwrap();
        let (out_o, mask_o) = rule_oracle(&v, h, w, &p);
        c.check(out.values() == out_o.as_slice(), || {
            format!("case {case}: rewritten image differs")
        });
        c.check(mask == mask_o, || {
            format!("case {case}: noise mask differs")
        });
        fired.0 += out_o.iter().zip(&v).filter(|(a, b)| a != b).count();
        fired.1 += mask_o.iter().filter(|m| !**m).count();
    }
    c.check(fired.0 > 0, || "rule 1 never fired".into());

    // Rule-1 pixels are exactly the set intensity after full adaptation.
    let vol = generate_phantom(&PhantomConfig {
        n_volumes: 1,
        bscans_per_volume: 4,
        height: 64,
        width: 64,
        ..PhantomConfig::default()
    })
    .unwrap()
    .remove(0);
    let tp = TraditionalParams {
        density_threshold: 120.0,
        ..TraditionalParams::default()
    };
    let adapted = adapt_traditional(&vol, &tp).unwrap();
    let mut rewritten = 0usize;
    for (src, dst) in vol.bscans().iter().zip(adapted.bscans()) {
        let dens = density_map(src, tp.density_window).unwrap();
        for (i, &d) in dens.values.iter().enumerate() {
            if d > tp.density_threshold as f64 {
                rewritten += 1;
                let got = dst.values()[i];
                c.check(got == 196.0, || format!("rewritten pixel {i} is {got}"));
            }
        }
    }
    c.check(rewritten > 0, || {
        "no pixel exceeded the density threshold".into()
    });

    // Injection statistics on an all-permitted flat field.
    let (mu, sigma) = (7.0f32, 20.0f32);
    let np = TraditionalParams {
        noise_mu: mu,
        noise_sigma: sigma,
        seed: 66,
        ..TraditionalParams::default()
    };
    let side = 320;
    let flat = ImageTensor::filled(side, side, 128.0, RangeTag::RawU8).unwrap();
    let noisy = inject_gaussian(&flat, &vec![true; side * side], &np).unwrap();
    let added: Vec<f64> = noisy
        .values()
        .iter()
        .filter(|&&v| v > 0.0 && v < 255.0)
        .map(|&v| v as f64 - 128.0)
        .collect();
    let m = mean(&added);
    let sd =
        (added.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (added.len() - 1) as f64).sqrt();
    c.check(added.len() >= 10_000, || {
        format!("only {} unclamped pixels", added.len())
    });
    c.check((m - mu as f64).abs() <= NOISE_STAT_TOL, || {
        format!("noise mean {m} vs {mu}")
    });
    c.check((sd - sigma as f64).abs() <= NOISE_STAT_TOL, || {
        format!("noise std {sd} vs {sigma}")
    });

    // Determinism under a fixed seed.
    let again = adapt_traditional(&vol, &tp).unwrap();
    c.check(again == adapted, || {
        "same seed gave different output".into()
    });
    let other = adapt_traditional(
        &vol,
        &TraditionalParams {
            seed: 1,
            ..tp.clone()
        },
    )
    .unwrap();
    c.check(other.bscans() != adapted.bscans(), || {
        "different seeds gave identical output".into()
    });

    c.note(format!(
        "100 images match, {} rule-1 pixels all 196, noise mean {m:.3} std {sd:.3} over {} px",
        rewritten,
        added.len()
    ));
    c.finish()
}

// ---------------------------------------------------------------- 7. end to end

fn desk_config() -> RunConfig {
    let mut rc = RunConfig {
        seed: Some(1),
        ..RunConfig::default()
    };
    rc.phantom.train_volumes = 10;
    rc.phantom.test_volumes = 3;
    rc.phantom.base.bscans_per_volume = 128;
    rc.phantom.base.height = 128;
    rc.phantom.base.width = 128;
    rc.phantom.base.speckle_variance = 400.0;
    rc.segmenter = SegmenterTrainConfig {
        steps: 400,
        unet: MiniUNetConfig {
            base_channels: 8,
            ..MiniUNetConfig::default()
        },
        ..SegmenterTrainConfig::default()
    };
    rc.traditional = TraditionalParams {
        density_threshold: 200.0,
        noise_mu: 30.0,
        noise_sigma: 25.0,
        ..TraditionalParams::default()
    };
    rc.train = TrainConfig {
        epochs: 30,
        steps_per_epoch: 50,
        crop_size: Some(64),
        generator: GeneratorConfig {
            base_channels: 8,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig {
            base_channels: 8,
            ..DiscriminatorConfig::default()
        },
        ..TrainConfig::default()
    };
    rc.resolve(None)
}

fn criterion_end_to_end(root: &Path) -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let rc = desk_config();
    let data = root.join("data");
    let mut run = || -> oct_adapt::Result<()> {
        cli::cmd_phantom(&rc, &data)?;
        let seg = cli::cmd_train_segmenter(&rc, &data.join("A/train"), &root.join("segmenter"))?;
        let seg_path = root.join("segmenter/segmenter.ckpt");
        let a_test = cli::load_dataset(&data, Domain::A, Split::Test)?;
        let rows = cli::evaluate_volumes(&seg, Method::Unprocessed, a_test.volumes())?;
        let a_dice = metrics::summarize(&metrics::metric_values(
            &rows,
            Method::Unprocessed,
            MetricKind::Dice,
        ))
        .map_or(0.0, |s| s.mean);
        c.check(a_dice >= SEG_DICE_MIN, || {
            format!("segmenter Dice on held-out A {a_dice:.4}")
        });

        c.check(rc.train.epochs <= MAX_EPOCHS, || {
            format!("{} epochs configured", rc.train.epochs)
        });
        let gan_dir = root.join("cyclegan");
        let ckpt = cli::cmd_train_cyclegan(&rc, &data, &seg_path, &gan_dir, None)?;
        let log = read_loss_log(gan_dir.join("loss_log.jsonl"))?;
        let means = epoch_cycle_means(&log);
        let epochs_run = means.len();
        c.check(epochs_run <= MAX_EPOCHS, || {
            format!("{epochs_run} epochs run")
        });
        let (first, last) = (means[0].1, means[means.len() - 1].1);
        c.check(last < CYCLE_RATIO_MAX * first, || {
            format!(
                "cycle loss first epoch {first:.4}, last {last:.4} (ratio {:.3})",
                last / first
            )
        });

        let b_test = data.join("B/test");
        cli::cmd_adapt(
            &ckpt,
            &b_test,
            Direction::B2A,
            &root.join("adapted_cyclegan"),
            &rc,
        )?;
        cli::cmd_adapt_traditional(&rc, &b_test, &root.join("adapted_traditional"))?;
        let variants = [
            (Method::Unprocessed, b_test.clone()),
            (Method::Traditional, root.join("adapted_traditional")),
            (Method::Cyclegan, root.join("adapted_cyclegan")),
        ];
        let report = cli::cmd_compare(&seg_path, &variants, &root.join("compare"), &rc)?;
        let dice = |m| {
            report
                .summary(m, MetricKind::Dice)
                .map_or(f64::NAN, |s| s.mean)
        };
        let (du, dt, dc) = (
            dice(Method::Unprocessed),
            dice(Method::Traditional),
            dice(Method::Cyclegan),
        );
        let p = |a, b| {
            report
                .comparison(MetricKind::Dice, a, b)
                .map_or(f64::NAN, |c| c.test.p)
        };
        let (p_ct, p_tu) = (
            p(Method::Cyclegan, Method::Traditional),
            p(Method::Traditional, Method::Unprocessed),
        );
        c.check(dc > dt && dt > du, || {
            format!("Dice ordering cyclegan {dc:.4}, traditional {dt:.4}, unprocessed {du:.4}")
        });
        c.check(p_ct < ALPHA, || {
            format!("cyclegan vs traditional p = {p_ct:.3e}")
        });
        c.check(p_tu < ALPHA, || {
            format!("traditional vs unprocessed p = {p_tu:.3e}")
        });
        c.check(dc >= CYCLEGAN_DICE_MIN, || format!("cyclegan Dice {dc:.4}"));
        c.note(format!(
            "A Dice {a_dice:.4}; B Dice cyclegan {dc:.4} > traditional {dt:.4} > unprocessed {du:.4}; \
             p {p_ct:.1e}, {p_tu:.1e}; cycle loss {first:.3} -> {last:.3} over {epochs_run} epochs; {:.0}s",
            start.elapsed().as_secs_f64()
        ));
        Ok(())
    };
    if let Err(e) = run() {
        c.check(false, || format!("pipeline error: {e}"));
    }
    c.finish()
}

// ---------------------------------------------------------------- 8. determinism

fn criterion_determinism() -> Outcome {
    let mut c = Checks::default();
    let mk = |style, seed| {
        generate_phantom(&PhantomConfig {
            seed,
            n_volumes: 2,
            bscans_per_volume: 4,
            height: 32,
            width: 32,
            style,
            ..PhantomConfig::default()
        })
        .unwrap()
    };
    let a = DomainDataset::new(Domain::A, Split::Train, mk(PhantomStyle::ASpeckled, 1)).unwrap();
    let b = DomainDataset::new(Domain::B, Split::Train, mk(PhantomStyle::BFlattened, 2)).unwrap();
    let s = MiniUNet::new(
        MiniUNetConfig {
            base_channels: 4,
            ..MiniUNetConfig::default()
        },
        3,
    )
    .unwrap()
    .freeze();
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: 6,
        seed: 77,
        generator: GeneratorConfig {
            base_channels: 4,
            n_residual_blocks: 2,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig {
            base_channels: 4,
            n_levels: 3,
            ..DiscriminatorConfig::default()
        },
        ..TrainConfig::default()
    };
    let r1 = fit(&cfg, &a, &b, &s, None).unwrap();
    let r2 = fit(&cfg, &a, &b, &s, None).unwrap();
    let j1: Vec<String> = r1
        .log
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();
    let j2: Vec<String> = r2
        .log
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();
    c.check(r1.log.len() >= DETERMINISM_MIN_ITERS, || {
        format!("only {} iterations", r1.log.len())
    });
    c.check(j1 == j2, || "loss logs differ".into());
    let b1 = r1.state.to_checkpoint().to_bytes();
    let b2 = r2.state.to_checkpoint().to_bytes();
    c.check(b1 == b2, || "final training states differ".into());
    c.note(format!(
        "{} identical iterations and identical final state",
        r1.log.len()
    ));
    c.finish()
}

// ---------------------------------------------------------------- driver

type Criterion<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Criterion)> = vec![
        (
            "metrics match brute-force oracles",
            Box::new(criterion_metrics),
        ),
        (
            "Welch p-values match t-CDF oracle",
            Box::new(criterion_welch),
        ),
        ("loss values and gradients", Box::new(criterion_losses)),
        (
            "schedule endpoints and monotonicity",
            Box::new(criterion_schedule),
        ),
        ("architecture invariants", Box::new(criterion_architecture)),
        ("traditional method", Box::new(criterion_traditional)),
        (
            "end-to-end desk-scale ordering",
            Box::new(|| criterion_end_to_end(work.path())),
        ),
        (
            "seeded training determinism",
            Box::new(criterion_determinism),
        ),
    ];
    // ACCEPTANCE_ONLY=3,5 runs a subset while iterating; the rest report SKIP.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut skipped = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            println!("SKIP [{}] {name}", i + 1);
            skipped += 1;
            continue;
        }
        let t = Instant::now();
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| outcome(false, "panicked"));
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!(
            "{tag} [{}] {name} ({:.1}s): {}",
            i + 1,
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed",
        8 - failed - skipped,
        8 - skipped
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
