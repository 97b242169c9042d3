//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::io::Write;

use blendcon_core::config::TrainConfig;
use blendcon_core::contrast::{cross_contrast_loss, ContrastConfig, ContrastInput, Directions, View};
use blendcon_core::labels::LabelMap;
use blendcon_core::metrics::BinaryMask;
use blendcon_core::model::ModelConfig;
use blendcon_core::numerics::{softmax_channels, Graph, Tensor};
use blendcon_core::objectives::{ce_loss, consistency_loss, dice_loss_labels};
use blendcon_core::trainer::{step_gradients, StepBatch, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Writes straight to the process stderr so the line survives output capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn rand_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize, h: usize, w: usize) -> Vec<LabelMap> {
    (0..n)
        .map(|_| LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes) as u8).collect()).unwrap())
        .collect()
}

pub fn rand_probs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    softmax_channels(&rand_tensor(rng, shape, -2.0, 2.0), false).unwrap()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximised over entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `inputs`, one tensor of derivatives per input.
pub fn numeric_grads(f: &mut dyn FnMut(&[Tensor<f64>]) -> f64, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut d = Tensor::zeros(inputs[k].shape().to_vec());
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + FD_STEP;
            let up = f(&work);
            work[k].data_mut()[i] = x0 - FD_STEP;
            let down = f(&work);
            work[k].data_mut()[i] = x0;
            d.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(d);
    }
    out
}

/// Value and analytic gradients of a scalar graph built from leaf inputs.
pub fn graph_value_grad(
    build: &dyn Fn(&mut Graph<f64>, &[blendcon_core::numerics::Var]) -> blendcon_core::numerics::Var,
    inputs: &[Tensor<f64>],
) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let value = g.value(loss).item();
    g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec())))
        .collect();
    (value, grads)
}

/// Worst relative error between graph gradients and finite differences.
pub fn check_graph(
    build: &dyn Fn(&mut Graph<f64>, &[blendcon_core::numerics::Var]) -> blendcon_core::numerics::Var,
    inputs: &[Tensor<f64>],
) -> f64 {
    let (_, analytic) = graph_value_grad(build, inputs);
    let numeric = numeric_grads(&mut |x| graph_value_grad(build, x).0, inputs);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_err(a.data(), n.data()))
        .fold(0.0, f64::max)
}

pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

pub fn draw_dims(rng: &mut ChaCha8Rng) -> Dims {
    let side = rng.random_range(3..=8);
    Dims {
        n: rng.random_range(1..=2),
        c: rng.random_range(2..=4),
        h: side,
        w: side,
        d: rng.random_range(2..=8),
    }
}

pub fn ce_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let Dims { n, c, h, w, .. } = draw_dims(&mut r);
    let labels = rand_labels(&mut r, n, c, h, w);
    let x = rand_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
    check_graph(
        &|g, v| {
            let p = g.softmax(v[0]).unwrap();
            ce_loss(g, p, &labels).unwrap()
        },
        &[x],
    )
}

pub fn dice_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let Dims { n, c, h, w, .. } = draw_dims(&mut r);
    let labels = rand_labels(&mut r, n, c, h, w);
    let first = r.random_range(0..2);
    let x = rand_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
    check_graph(
        &|g, v| {
            let p = g.softmax(v[0]).unwrap();
            dice_loss_labels(g, p, &labels, first).unwrap()
        },
        &[x],
    )
}

pub fn con_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let Dims { n, c, h, w, .. } = draw_dims(&mut r);
    let teacher = rand_probs(&mut r, &[n, c, h, w]);
    let x = rand_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
    check_graph(
        &|g, v| {
            let p = g.softmax(v[0]).unwrap();
            consistency_loss(g, p, &teacher, 0).unwrap()
        },
        &[x],
    )
}

fn rand_protos(r: &mut ChaCha8Rng, c: usize, d: usize) -> Vec<Option<Vec<f64>>> {
    (0..c).map(|_| Some((0..d).map(|_| r.random_range(-1.0..1.0)).collect())).collect()
}

/// One contrast direction; `weak` selects which feature map is differentiated.
pub fn ctr_instance(seed: u64, weak: bool) -> f64 {
    let mut r = rng(seed);
    let Dims { n, c, h, w, d } = draw_dims(&mut r);
    let protos_weak = rand_protos(&mut r, c, d);
    let protos_strong = rand_protos(&mut r, c, d);
    let labels_weak = rand_labels(&mut r, n, c, h, w);
    let labels_strong = rand_labels(&mut r, n, c, h, w);
    let cfg = ContrastConfig {
        tau: [0.5, 1.0][r.random_range(0..2)],
        ..ContrastConfig::default()
    };
    let zw = rand_tensor(&mut r, &[n, d, h, w], -1.0, 1.0);
    let zs = rand_tensor(&mut r, &[n, d, h, w], -1.0, 1.0);
    check_graph(
        &|g, v| {
            let input = ContrastInput {
                z_weak: v[0],
                z_strong: v[1],
                protos_weak: &protos_weak,
                protos_strong: &protos_strong,
                labels_weak: &labels_weak,
                labels_strong: &labels_strong,
                keep_weak: None,
                keep_strong: None,
            };
            let dirs = Directions { weak, strong: !weak };
            cross_contrast_loss(g, &input, dirs, &cfg).unwrap().loss.unwrap()
        },
        &[zw, zs],
    )
}

pub fn tiny_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 4,
        iterations: 100,
        model: ModelConfig {
            num_classes: 3,
            base_width: 2,
            embed_dim: 4,
            height: 8,
            width: 8,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.loss.t_ramp = Some(1);
    cfg
}

/// Total training loss of one step against finite differences over every
/// student parameter, with all loss terms active. `None` when some parameter
/// sits within one step of a ReLU or max-pool kink, where the central
/// difference is meaningless.
pub fn composite_instance(seed: u64) -> Option<f64> {
    let mut cfg = tiny_train_config();
    cfg.pixel_s2w_on = seed % 2 == 1;
    composite_with(seed, cfg)
}

pub fn composite_with(seed: u64, mut cfg: TrainConfig) -> Option<f64> {
    let mut r = rng(seed);
    cfg.seed = seed;
    let mut state = TrainState::<f64>::new(&cfg).unwrap();
    state.t = 5;
    let jitter = |p: &mut [Tensor<f64>], r: &mut ChaCha8Rng| {
        for v in p.iter_mut().flat_map(|t| t.data_mut()) {
            *v += r.random_range(-0.1..0.1);
        }
    };
    jitter(state.student.params_mut(), &mut r);
    jitter(state.teacher.model_mut().params_mut(), &mut r);
    for view in [View::Weak, View::Strong] {
        for class in 0..3 {
            let p: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            state.bank.push_entry(view, class, p, r.random_range(0.1..1.0)).unwrap();
        }
    }
    let batch = StepBatch {
        labeled: rand_tensor(&mut r, &[2, 1, 8, 8], 0.0, 1.0),
        masks: rand_labels(&mut r, 2, 3, 8, 8),
        weak: rand_tensor(&mut r, &[2, 1, 8, 8], 0.0, 1.0),
        strong: rand_tensor(&mut r, &[2, 1, 8, 8], 0.0, 1.0),
    };
    let step = step_gradients(&state, &batch, &cfg).unwrap();
    assert_eq!(step.parts.lambda, 1.0);
    assert!(!cfg.ctr_on || step.parts.ctr > 0.0);
    let mut work = state.clone();
    let mut worst = 0.0f64;
    for (k, analytic) in step.grads.iter().enumerate() {
        for i in 0..analytic.len() {
            let x0 = state.student.params()[k].data()[i];
            let mut eval = |x: f64| {
                work.student.params_mut()[k].data_mut()[i] = x;
                let v = step_gradients(&work, &batch, &cfg).unwrap().parts.total;
                work.student.params_mut()[k].data_mut()[i] = x0;
                v
            };
            let central = |h: f64, eval: &mut dyn FnMut(f64) -> f64| (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
            let c = central(FD_STEP, &mut eval);
            let fine = central(FD_STEP / 4.0, &mut eval);
            if (c - fine).abs() > KINK_TOL * c.abs() + 1e-9 {
                return None;
            }
            worst = worst.max(max_rel_err(&[analytic.data()[i]], &[c]));
        }
    }
    Some(worst)
}

/// Central differences at `h` and `h / 4` agree to `O(h^2)` on smooth
/// points. A gap this large means a kink inside the stencil, where the
/// difference quotient is no oracle at the tolerance being checked.
pub const KINK_TOL: f64 = 2e-5;

pub struct FamilyResult {
    pub name: &'static str,
    pub instances: u64,
    /// Drawn instances rejected for sitting on a kink.
    pub skipped: u64,
    pub worst: f64,
}

/// Every gradient family over `instances` seeds; the composite draws until it
/// has `instances` differentiable ones.
pub fn gradient_suite(instances: u64) -> Vec<FamilyResult> {
    let fams: [(&'static str, &dyn Fn(u64) -> f64); 5] = [
        ("ce", &ce_instance),
        ("dice", &dice_instance),
        ("con", &con_instance),
        ("ctr_w", &|s| ctr_instance(s, true)),
        ("ctr_s", &|s| ctr_instance(s, false)),
    ];
    let mut out: Vec<_> = fams
        .iter()
        .map(|(name, f)| FamilyResult {
            name,
            instances,
            skipped: 0,
            worst: (0..instances).map(|s| f(1000 + s)).fold(0.0, f64::max),
        })
        .collect();
    let mut composite = FamilyResult {
        name: "composite",
        instances: 0,
        skipped: 0,
        worst: 0.0,
    };
    let mut seed = 1000;
    while composite.instances < instances && composite.skipped < instances {
        match composite_instance(seed) {
            Some(e) => {
                composite.instances += 1;
                composite.worst = composite.worst.max(e);
            }
            None => composite.skipped += 1,
        }
        seed += 1;
    }
    out.push(composite);
    out
}

/// `sum Z P_c / sum P_c` by explicit loops over `[D, H, W]` and `[C, H, W]`.
pub fn prototype_oracle(z: &Tensor<f64>, p: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let c = p.shape()[0];
    let mut out = vec![vec![0.0; d]; c];
    for (cls, proto) in out.iter_mut().enumerate() {
        let mut mass = 0.0;
        for y in 0..h {
            for x in 0..w {
                mass += p.data()[(cls * h + y) * w + x];
            }
        }
        for (k, v) in proto.iter_mut().enumerate() {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += z.data()[(k * h + y) * w + x] * p.data()[(cls * h + y) * w + x];
                }
            }
            *v = acc / mass;
        }
    }
    out
}

/// Weighted (`sum w P / sum w`) or literal (`sum P / sum w`) bank aggregate.
pub fn aggregate_oracle(entries: &[(Vec<f64>, f64)], weighted: bool) -> Vec<f64> {
    let d = entries[0].0.len();
    let total: f64 = entries.iter().map(|e| e.1).sum();
    (0..d)
        .map(|k| {
            let mut s = 0.0;
            for (p, w) in entries {
                s += if weighted { w * p[k] } else { p[k] };
            }
            s / total
        })
        .collect()
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density = r.random_range(0.05..0.6);
    BinaryMask::new(h, w, (0..h * w).map(|_| r.random_bool(density)).collect()).unwrap()
}

fn inside(m: &BinaryMask, y: isize, x: isize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < m.height() && (x as usize) < m.width() && m.data()[y as usize * m.width() + x as usize]
}

/// Boundary pixels found independently: a mask pixel with a 4-neighbour
/// outside the mask or the image.
pub fn boundary_oracle(m: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.height() as isize {
        for x in 0..m.width() as isize {
            if inside(m, y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(m, y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Mean over `s` boundary pixels of the distance to the closest `g` boundary
/// pixel, by checking every pair.
pub fn asd_oracle(s: &BinaryMask, g: &BinaryMask) -> Option<f64> {
    let (bs, bg) = (boundary_oracle(s), boundary_oracle(g));
    if bs.is_empty() || bg.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &(sy, sx) in &bs {
        let mut best = u64::MAX;
        for &(gy, gx) in &bg {
            let dy = sy.abs_diff(gy) as u64;
            let dx = sx.abs_diff(gx) as u64;
            best = best.min(dy * dy + dx * dx);
        }
        sum += (best as f64).sqrt();
    }
    Some(sum / bs.len() as f64)
}
