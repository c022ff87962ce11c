//! Finite-difference verification of every primitive backward rule and of
//! each full model in 64-bit mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{gen_scene, SceneConfig};
use crate::error::Result;
use crate::fusion::{FusionMode, ReadKind, ReassembleConfig};
use crate::loss::{total_loss, LossWeights, ValidMask};
use crate::model::{DepthModel, ModelConfig};
use crate::nn::Ctx;
use crate::tensor::{grad_check_with, relative_error, Tape, Tensor, Var};
use crate::vit::EncoderConfig;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;
/// Central-difference step for primitive checks.
pub const PRIMITIVE_EPS: f64 = 1e-5;

pub type ScalarFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// One differentiable function of a single input, grouped under `op`.
pub struct Case {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub f: ScalarFn,
}

impl Case {
    pub fn new(op: &'static str, shape: &[usize], f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static) -> Self {
        Case {
            op,
            shape: shape.to_vec(),
            f: Box::new(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Probes left unscored because every step crossed a kink.
    pub skipped: usize,
    /// Scored probes with a non-zero analytic gradient.
    pub nonzero: usize,
}

impl CheckResult {
    /// Below tolerance, with something scored and at most a quarter of the
    /// probes left unscored.
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.nonzero > 0 && 4 * self.skipped <= self.checked + self.skipped
    }

    fn merge(&mut self, o: &CheckResult) {
        self.max_rel_error = self.max_rel_error.max(o.max_rel_error);
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.nonzero += o.nonzero;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub primitives: Vec<CheckResult>,
    pub models: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.primitives.iter().chain(&self.models).all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (title, rows) in [("primitive", &self.primitives), ("model", &self.models)] {
            for r in rows {
                writeln!(
                    s,
                    "{title:<9} {:<20} max_rel_err={:.3e} tol={:.0e} checked={:<5} skipped={:<4} {}",
                    r.name,
                    r.max_rel_error,
                    r.tolerance,
                    r.checked,
                    r.skipped,
                    if r.passed() { "PASS" } else { "FAIL" }
                )
                .unwrap();
            }
        }
        let fails = self.primitives.iter().chain(&self.models).filter(|r| !r.passed()).count();
        writeln!(
            s,
            "{} primitive ops, {} model checks, {fails} failures",
            self.primitives.len(),
            self.models.len()
        )
        .unwrap();
        s
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Normal-ish values with `|x| ≥ 0.1`, clear of the kinks of relu and abs.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ W` for a fixed random `W`, so every output element carries a
/// distinct upstream gradient.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = normal(t.shape(y), &mut rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// The primitive suite for one seed; constants are drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = |shape: &[usize]| normal(shape, &mut rng);
    let (c34, c42, c23, c24, c25, c3323, c2223) =
        (c(&[3, 4]), c(&[4, 2]), c(&[2, 3]), c(&[2, 4]), c(&[2, 5]), c(&[3, 3, 2, 3]), c(&[2, 2, 2, 3]));
    let (x552, x332) = (c(&[5, 5, 2]), c(&[3, 3, 2]));
    let ws = move |t: &mut Tape<f64>, y: Var| weighted_sum(t, y, seed);
    let k = |t: &mut Tape<f64>, v: &Tensor<f64>| t.constant(v.clone());
    vec![
        Case::new("add", &[3, 4], {
            let c34 = c34.clone();
            move |t, x| {
                let b = k(t, &c34);
                let y = t.add(x, b)?;
                let y = t.mul(y, y)?;
                ws(t, y)
            }
        }),
        Case::new("sub", &[3, 4], {
            let c34 = c34.clone();
            move |t, x| {
                let b = k(t, &c34);
                let y = t.sub(b, x)?;
                let y = t.mul(y, y)?;
                ws(t, y)
            }
        }),
        Case::new("mul", &[3, 4], {
            let c34 = c34.clone();
            move |t, x| {
                let b = k(t, &c34);
                let y = t.mul(x, b)?;
                let y = t.mul(y, x)?;
                ws(t, y)
            }
        }),
        Case::new("scale", &[3, 4], move |t, x| {
            let y = t.scale(x, -1.7)?;
            let y = t.mul(y, x)?;
            ws(t, y)
        }),
        Case::new("matmul", &[3, 4], {
            let c42 = c42.clone();
            move |t, x| {
                let b = k(t, &c42);
                let y = t.matmul(x, b)?;
                ws(t, y)
            }
        }),
        Case::new("matmul", &[3, 4], {
            let c23 = c23.clone();
            move |t, x| {
                let a = k(t, &c23);
                let y = t.matmul(a, x)?;
                let y = t.mul(y, y)?;
                ws(t, y)
            }
        }),
        Case::new("concat", &[3, 4], {
            let c24 = c24.clone();
            move |t, x| {
                let b = k(t, &c24);
                let y = t.concat(&[b, x], 0)?;
                let y = t.mul(y, y)?;
                ws(t, y)
            }
        }),
        Case::new("concat", &[2, 3], {
            let c25 = c25.clone();
            move |t, x| {
                let b = k(t, &c25);
                let y = t.concat(&[x, b, x], 1)?;
                let y = t.mul(y, y)?;
                ws(t, y)
            }
        }),
        Case::new("reshape", &[3, 4], move |t, x| {
            let y = t.reshape(x, &[2, 6])?;
            let y = t.mul(y, y)?;
            ws(t, y)
        }),
        Case::new("permute", &[2, 3, 4], move |t, x| {
            let y = t.permute(x, &[2, 0, 1])?;
            let y = t.mul(y, y)?;
            ws(t, y)
        }),
        Case::new("transpose", &[3, 4], move |t, x| {
            let y = t.transpose(x)?;
            let y = t.mul(y, y)?;
            ws(t, y)
        }),
        Case::new("softmax", &[3, 5], move |t, x| {
            let y = t.softmax(x)?;
            let y = t.mul(y, y)?;
            ws(t, y)
        }),
        Case::new("gelu", &[3, 4], move |t, x| {
            let y = t.gelu(x)?;
            ws(t, y)
        }),
        Case::new("relu", &[3, 4], move |t, x| {
            let y = t.relu(x)?;
            let y = t.mul(y, y)?;
            ws(t, y)
        }),
        Case::new("exp", &[3, 4], move |t, x| {
            let y = t.exp(x)?;
            ws(t, y)
        }),
        Case::new("abs", &[3, 4], move |t, x| {
            let y = t.abs(x)?;
            let y = t.mul(y, x)?;
            ws(t, y)
        }),
        Case::new("sum", &[3, 4], move |t, x| {
            let s = t.sum(x)?;
            t.mul(s, s)
        }),
        Case::new("mean", &[3, 4], move |t, x| {
            let sq = t.mul(x, x)?;
            let m = t.mean(sq)?;
            t.mul(m, m)
        }),
        Case::new("layernorm", &[3, 6], move |t, x| {
            let y = t.layernorm(x, 1e-5)?;
            ws(t, y)
        }),
        Case::new("conv2d", &[5, 5, 2], {
            let w = c3323.clone();
            move |t, x| {
                let w = k(t, &w);
                let y = t.conv2d(x, w, 2, 1)?;
                ws(t, y)
            }
        }),
        Case::new("conv2d", &[3, 3, 2, 3], {
            let x552 = x552.clone();
            move |t, w| {
                let x = k(t, &x552);
                let y = t.conv2d(x, w, 1, 1)?;
                let y = t.mul(y, y)?;
                ws(t, y)
            }
        }),
        Case::new("conv_transpose2d", &[3, 3, 2], {
            let w = c2223.clone();
            move |t, x| {
                let w = k(t, &w);
                let y = t.conv_transpose2d(x, w, 2)?;
                ws(t, y)
            }
        }),
        Case::new("conv_transpose2d", &[2, 2, 2, 3], {
            let x332 = x332.clone();
            move |t, w| {
                let x = k(t, &x332);
                let y = t.conv_transpose2d(x, w, 2)?;
                let y = t.mul(y, y)?;
                ws(t, y)
            }
        }),
        Case::new("upsample_bilinear", &[3, 4, 2], move |t, x| {
            let y = t.upsample_bilinear(x, 2)?;
            let y = t.mul(y, y)?;
            ws(t, y)
        }),
        Case::new("resize_bilinear", &[3, 4, 2], move |t, x| {
            let y = t.resize_bilinear(x, 5, 7)?;
            ws(t, y)
        }),
        Case::new("spatial_gradient", &[4, 5, 2], move |t, x| {
            let u = t.spatial_gradient(x, 1)?;
            let v = t.spatial_gradient(x, 0)?;
            let y = t.mul(u, v)?;
            ws(t, y)
        }),
    ]
}

/// Runs `cases_for(seed)` for every seed and keeps each op's worst error.
pub fn check_cases(seeds: &[u64], cases_for: impl Fn(u64) -> Vec<Case>) -> Result<Vec<CheckResult>> {
    let mut worst: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
        for case in cases_for(seed) {
            let x = away_from_zero(&case.shape, &mut rng);
            let r = grad_check_with(&case.f, &x, PRIMITIVE_EPS, None)?;
            let e = worst.entry(case.op).or_insert_with(|| {
                order.push(case.op);
                (0.0, 0)
            });
            e.0 = e.0.max(r.max_rel_error);
            e.1 += r.checked;
        }
    }
    Ok(order
        .into_iter()
        .map(|op| CheckResult {
            name: op.to_string(),
            max_rel_error: worst[op].0,
            tolerance: PRIMITIVE_TOLERANCE,
            checked: worst[op].1,
            skipped: 0,
            nonzero: worst[op].1,
        })
        .collect())
}

/// Small model used for end-to-end checks: 16×16 input, p=8.
pub fn gradcheck_model_config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        mode,
        encoder: EncoderConfig {
            patch_size: 8,
            token_dim: 8,
            num_layers: 4,
            num_heads: 2,
            mlp_ratio: 2,
            tap_layers: vec![1, 2, 3, 4],
            in_channels: 3,
        },
        radar_channels: 3,
        reassemble: ReassembleConfig {
            scales: vec![4, 8, 16, 32],
            out_dim: 8,
            patch_size: 8,
            input: (16, 16),
            read: ReadKind::Linear,
        },
    }
}

/// Model probes need `|∂L/∂θ| ≥ GRADIENT_FLOOR · max(|L|, 1)`. A forward
/// pass carries roundoff of about κ ulp of `L` (κ in the low hundreds for
/// the toy models), and the stencil turns that into `1.5·κ·ulp(L)/ε` of
/// derivative noise; at ε = 1e-3 that stays under the model tolerance only
/// for gradients above roughly 1e-5·|L|.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Std of the offsets added to every bias and all-zero tensor before a
/// model check.
pub const BIAS_JITTER: f64 = 0.05;

/// Steps tried per probe, largest first.
pub const MODEL_EPS_LADDER: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Checks `∂L/∂θ` of a whole model on one synthetic scene. Per parameter
/// tensor, the `per_tensor` coordinates with the largest analytic gradient
/// are probed. Each probe uses the largest step of [`MODEL_EPS_LADDER`]
/// whose `θ ± ε` evaluations keep every relu/abs input on the same side of
/// its kink; probes with no such step are counted as skipped. Biases and
/// all-zero tensors get small random offsets first, and coordinates whose gradient is under
/// [`GRADIENT_FLOOR`] are not probed.
pub fn check_model(mode: FusionMode, seed: u64, per_tensor: usize) -> Result<CheckResult> {
    let cfg = gradcheck_model_config(mode);
    let mut model = DepthModel::<f64>::new(&cfg, seed)?;
    // zero-initialised biases put many relu inputs exactly on the kink, and
    // the zero head weights would block every gradient above the head
    let mut jrng = ChaCha8Rng::seed_from_u64(seed ^ 0x1177);
    let names = model.params.names().to_vec();
    for (name, t) in names.iter().zip(model.params.tensors_mut()) {
        if name.ends_with(".bias") || t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v += BIAS_JITTER * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut jrng);
            }
        }
    }
    let s = gen_scene(seed, 16, 16, &SceneConfig::default())?;
    let (image, radar, lidar) = (s.image.cast::<f64>(), s.radar.cast::<f64>(), s.lidar.cast::<f64>());
    let mask = ValidMask::from_target(&lidar)?;
    let weights = LossWeights::default();

    let eval = |m: &DepthModel<f64>| -> Result<(f64, Vec<i8>)> {
        let mut ctx = Ctx::new(&m.params);
        let y = m.forward(&mut ctx, &image, &radar)?;
        let l = total_loss(&mut ctx.tape, y, &lidar, &image, &mask, weights)?;
        Ok((ctx.value(l).item()?, ctx.tape.kink_pattern()))
    };
    let (l0, base) = eval(&model)?;
    // gradients below this floor are lost in finite-difference roundoff
    let floor = GRADIENT_FLOOR * l0.abs().max(1.0);
    let grads = {
        let mut ctx = Ctx::new(&model.params);
        let y = model.forward(&mut ctx, &image, &radar)?;
        let l = total_loss(&mut ctx.tape, y, &lidar, &image, &mask, weights)?;
        ctx.backward(l)?
    };

    let mut res = CheckResult {
        name: mode.to_string(),
        max_rel_error: 0.0,
        tolerance: MODEL_TOLERANCE,
        checked: 0,
        skipped: 0,
        nonzero: 0,
    };
    for (pi, g) in grads.iter().enumerate() {
        let mut idx: Vec<usize> = (0..g.numel()).collect();
        idx.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()).then(a.cmp(&b)));
        for &i in idx.iter().take(per_tensor).filter(|&&i| g.data()[i].abs() >= floor) {
            let orig = model.params.tensors_mut()[pi].data()[i];
            let mut numeric = None;
            for eps in MODEL_EPS_LADDER {
                // five-point stencil: truncation error O(ε⁴)
                let mut f = [0.0; 4];
                let mut smooth = true;
                for (k, off) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
                    model.params.tensors_mut()[pi].data_mut()[i] = orig + off * eps;
                    let (v, pat) = eval(&model)?;
                    f[k] = v;
                    smooth &= pat == base;
                }
                model.params.tensors_mut()[pi].data_mut()[i] = orig;
                if smooth {
                    numeric = Some((f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * eps));
                    break;
                }
            }
            let Some(n) = numeric else {
                res.skipped += 1;
                continue;
            };
            let a = g.data()[i];
            let e = relative_error(a, n);
            res.max_rel_error = res.max_rel_error.max(e);
            res.checked += 1;
            res.nonzero += (a != 0.0) as usize;
        }
    }
    Ok(res)
}

/// The full report: the primitive suite over `seeds`, then one model check
/// per fusion mode merged over `model_seeds`.
pub fn gradcheck_report(seeds: &[u64], model_seeds: &[u64], per_tensor: usize) -> Result<GradcheckReport> {
    let primitives = check_cases(seeds, primitive_cases)?;
    let mut models = Vec::new();
    for m in FusionMode::ALL {
        let mut acc: Option<CheckResult> = None;
        for &seed in model_seeds {
            let r = check_model(m, seed, per_tensor)?;
            match acc.as_mut() {
                Some(a) => a.merge(&r),
                None => acc = Some(r),
            }
        }
        models.extend(acc);
    }
    Ok(GradcheckReport { primitives, models })
}
