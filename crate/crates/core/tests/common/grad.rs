//! Central-difference gradient checks shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spiro_core::model::{example_gradient, example_loss, ModelConfig, ModelParams};
use spiro_core::preproc::{patchify, FlowVolumeCurve};
use spiro_core::tensorcore::{Graph, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TRIALS: usize = 100;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce any `[..., d]` output to a scalar through a fixed projection and BCE.
pub fn head(g: &mut Graph, out: Var, proj: &Tensor, targets: &[f64]) -> Var {
    let w = g.constant(proj.clone());
    let z = g.linear(out, w, None).unwrap();
    g.bce_with_logits(z, targets).unwrap()
}

/// Compare analytic gradients with central differences for every input.
/// Returns the worst relative error (max-norm per input).
pub fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut xs = inputs.to_vec();
        let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
        for e in 0..inputs[i].len() {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + H;
            let up = eval(&xs);
            xs[i].data_mut()[e] = orig - H;
            let down = eval(&xs);
            xs[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[e];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        if scale > 1e-7 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}

pub fn targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect()
}

/// Worst error over `TRIALS` random cases.
pub fn worst<F>(seed: u64, mut trial: F) -> f64
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..TRIALS).map(|_| trial(&mut rng)).fold(0.0, f64::max)
}

pub fn linear() -> f64 {
    worst(1, |rng| {
        let (l, din, dout) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
        let bias = rng.random_bool(0.5);
        let proj = random(rng, &[1, dout], 1.0);
        let y = targets(rng, l);
        let mut inputs = vec![random(rng, &[l, din], 1.0), random(rng, &[dout, din], 1.0)];
        if bias {
            inputs.push(random(rng, &[dout], 1.0));
        }
        check(&inputs, |g, v| {
            let o = g.linear(v[0], v[1], v.get(2).copied()).unwrap();
            head(g, o, &proj, &y)
        })
    })
}

pub fn add_concat_slice() -> f64 {
    worst(2, |rng| {
        let (l, d) = (rng.random_range(1..4), rng.random_range(1..5));
        let l2 = rng.random_range(1..4);
        let start = rng.random_range(0..l + l2);
        let len = rng.random_range(1..=l + l2 - start);
        let proj = random(rng, &[1, d], 1.0);
        let y = targets(rng, len);
        let inputs = vec![
            random(rng, &[l, d], 1.0),
            random(rng, &[l, d], 1.0),
            random(rng, &[l2, d], 1.0),
        ];
        check(&inputs, |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let c = g.concat_rows(s, v[2]).unwrap();
            let sl = g.slice_rows(c, start, len).unwrap();
            head(g, sl, &proj, &y)
        })
    })
}

pub fn gelu_mul_const() -> f64 {
    worst(3, |rng| {
        let (l, d) = (rng.random_range(1..4), rng.random_range(1..6));
        let proj = random(rng, &[1, d], 1.0);
        let y = targets(rng, l);
        let mask: Vec<f64> = (0..l * d)
            .map(|_| if rng.random_bool(0.8) { 1.25 } else { 0.0 })
            .collect();
        let mask = Tensor::new(vec![l, d], mask).unwrap();
        let inputs = vec![random(rng, &[l, d], 4.0)];
        check(&inputs, |g, v| {
            let a = g.gelu(v[0]);
            let m = g.mul_const(a, mask.clone()).unwrap();
            head(g, m, &proj, &y)
        })
    })
}

pub fn layer_norm() -> f64 {
    worst(4, |rng| {
        let (l, d) = (rng.random_range(1..4), rng.random_range(2..7));
        let proj = random(rng, &[1, d], 1.0);
        let y = targets(rng, l);
        let inputs = vec![
            random(rng, &[l, d], 2.0),
            random(rng, &[d], 1.0),
            random(rng, &[d], 1.0),
        ];
        check(&inputs, |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            head(g, o, &proj, &y)
        })
    })
}

pub fn layer_norm_near_constant() -> f64 {
    worst(5, |rng| {
        let d = rng.random_range(2..6);
        let proj = random(rng, &[1, d], 1.0);
        let y = targets(rng, 1);
        let base = rng.random_range(-3.0..3.0);
        let row: Vec<f64> = (0..d).map(|_| base + rng.random_range(-1.0..1.0) * 1e-2).collect();
        let inputs = vec![
            Tensor::new(vec![1, d], row).unwrap(),
            random(rng, &[d], 1.0),
            random(rng, &[d], 1.0),
        ];
        check(&inputs, |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            head(g, o, &proj, &y)
        })
    })
}

pub fn attention() -> f64 {
    worst(6, |rng| {
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..4);
        let l = rng.random_range(1..6);
        let mut mask: Vec<bool> = (0..l).map(|_| rng.random_bool(0.3)).collect();
        let keep = rng.random_range(0..l);
        mask[keep] = false;
        let proj = random(rng, &[1, d], 1.0);
        let y = targets(rng, l);
        let inputs = vec![
            random(rng, &[l, d], 1.5),
            random(rng, &[l, d], 1.5),
            random(rng, &[l, d], 1.5),
        ];
        check(&inputs, |g, v| {
            let o = g.attention(v[0], v[1], v[2], &mask, heads).unwrap();
            head(g, o, &proj, &y)
        })
    })
}

pub fn bce() -> f64 {
    worst(9, |rng| {
        let n = rng.random_range(1..8);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let inputs = vec![random(rng, &[n], 5.0)];
        check(&inputs, |g, v| g.bce_with_logits(v[0], &y).unwrap())
    })
}

pub fn softmax_ce() -> f64 {
    worst(10, |rng| {
        let c = rng.random_range(2..7);
        let label = rng.random_range(0..c);
        let inputs = vec![random(rng, &[c], 5.0)];
        check(&inputs, |g, v| g.softmax_cross_entropy(v[0], label).unwrap())
    })
}

/// Whole model, tiny config (T=60, P=30, d=8, one layer, two heads), on a
/// random subset of coordinates of every parameter tensor.
pub fn tiny_model() -> f64 {
    worst(13, |rng| {
        let cfg = ModelConfig {
            patch_len: 30,
            d_embed: 8,
            layers: 1,
            heads: 2,
            head_hidden: 4,
            dropout: 0.0,
            seed: rng.random(),
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(&cfg, 2).unwrap();
        for t in params.weights.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let valid_len = rng.random_range(1..=60);
        let flow: Vec<f64> = (0..60)
            .map(|i| if i < valid_len { rng.random_range(-2.0..2.0) } else { 0.0 })
            .collect();
        let seq = patchify(
            &FlowVolumeCurve {
                flow_lps: flow,
                valid_len,
                dv_l: 0.01,
            },
            30,
        )
        .unwrap();
        let label = rng.random_range(0..2u8);
        let (_, grads) = example_gradient(&params, &seq, label, 0.0, 0).unwrap();
        let mut err: f64 = 0.0;
        for (k, grad) in grads.iter().enumerate() {
            let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
            for _ in 0..4 {
                let e = rng.random_range(0..grad.len());
                let mut p = params.clone();
                let orig = p.weights.values_mut()[k].data()[e];
                p.weights.values_mut()[k].data_mut()[e] = orig + H;
                let up = example_loss(&p, &seq, label).unwrap();
                p.weights.values_mut()[k].data_mut()[e] = orig - H;
                let down = example_loss(&p, &seq, label).unwrap();
                let numeric = (up - down) / (2.0 * H);
                diff = diff.max((grad.data()[e] - numeric).abs());
                scale = scale.max(grad.data()[e].abs()).max(numeric.abs());
            }
            err = err.max(if scale > 1e-7 { diff / scale } else { diff });
        }
        err
    })
}

pub type Check = (&'static str, fn() -> f64, f64);

/// `(name, check, tolerance)` for every kernel plus the end-to-end model.
pub const SUITE: [Check; 9] = [
    ("linear", linear as fn() -> f64, 1e-6),
    ("add_concat_slice", add_concat_slice as fn() -> f64, 1e-4),
    ("gelu_mul_const", gelu_mul_const as fn() -> f64, 1e-4),
    ("layer_norm", layer_norm as fn() -> f64, 1e-4),
    ("layer_norm_near_constant", layer_norm_near_constant as fn() -> f64, 1e-4),
    ("attention", attention as fn() -> f64, 1e-5),
    ("bce", bce as fn() -> f64, 1e-4),
    ("softmax_ce", softmax_ce as fn() -> f64, 1e-4),
    ("tiny_model", tiny_model as fn() -> f64, 1e-4),
];
