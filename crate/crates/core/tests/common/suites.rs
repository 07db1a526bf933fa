//! Oracle suites that both the integration tests and the acceptance runner
//! execute. Each returns the worst observed error so callers can apply
//! their own tolerance.

use std::cell::RefCell;

use ssimgan::autograd::{Activation, Graph, Mode, RunningStats, Var};
use ssimgan::classifier::ClassifierConfig;
use ssimgan::gan::GanConfig;
use ssimgan::image::Image;
use ssimgan::nn::Model;
use ssimgan::ssim::{ssim, SsimParams};
use ssimgan::{Result, Rng, Scalar, Tensor};

use super::*;

pub struct OpResult {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
}

fn run(
    out: &mut Vec<OpResult>,
    name: &'static str,
    trials: usize,
    rng: &mut Rng,
    mut case: impl FnMut(&mut Rng) -> f64,
) {
    let worst = (0..trials).map(|_| case(rng)).fold(0.0, f64::max);
    out.push(OpResult { name, trials, worst });
}

fn check<T: Scalar>(inputs: &[Tensor<T>], build: &Build<T>, h: f64, rng: &mut Rng) -> f64 {
    fd_check(inputs, &vec![true; inputs.len()], build, h, rng)
}

/// Finite-difference checks of every differentiable op on `trials` random
/// small inputs each, at step `h`.
pub fn gradient_suite<T: Scalar>(trials: usize, h: f64, seed: u64) -> Vec<OpResult> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    // Kinks and pooling ties stay this far from any perturbation.
    let gap = 5.0 * h.max(1e-3);

    run(&mut out, "conv2d", trials, &mut rng, |rng| {
        let k = range(rng, 1, 3);
        let (stride, pad) = (range(rng, 1, 2), rng.below(k));
        let (n, c, o) = (range(rng, 1, 2), range(rng, 1, 3), range(rng, 1, 3));
        let (hh, ww) = (range(rng, k.max(2), 6), range(rng, k.max(2), 6));
        let inputs = [
            randn::<T>(vec![n, c, hh, ww], rng),
            randn::<T>(vec![o, c, k, k], rng),
            randn::<T>(vec![o], rng),
        ];
        check(&inputs, &|g: &mut Graph<T>, v: &[Var]| g.conv2d(v[0], v[1], v[2], stride, pad), h, rng)
    });

    run(&mut out, "conv_transpose2d", trials, &mut rng, |rng| loop {
        let k = range(rng, 1, 4);
        let (stride, pad) = (range(rng, 1, 2), rng.below(k));
        let hh = range(rng, 1, 4);
        if (hh - 1) * stride + k <= 2 * pad {
            continue;
        }
        let (n, c, o) = (range(rng, 1, 2), range(rng, 1, 3), range(rng, 1, 3));
        let inputs = [
            randn::<T>(vec![n, c, hh, hh], rng),
            randn::<T>(vec![c, o, k, k], rng),
            randn::<T>(vec![o], rng),
        ];
        break check(
            &inputs,
            &|g: &mut Graph<T>, v: &[Var]| g.conv_transpose2d(v[0], v[1], v[2], stride, pad),
            h,
            rng,
        );
    });

    run(&mut out, "maxpool2d", trials, &mut rng, |rng| {
        let k = range(rng, 1, 3);
        let stride = range(rng, 1, 3);
        let shape = vec![range(rng, 1, 2), range(rng, 1, 2), range(rng, k, k + 4), range(rng, k, k + 4)];
        let x = distinct::<T>(shape, 2.0 * gap, rng);
        check(&[x], &|g: &mut Graph<T>, v: &[Var]| g.maxpool2d(v[0], k, stride), h, rng)
    });

    for (name, act) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu(0.2)),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        run(&mut out, name, trials, &mut rng, |rng| {
            let mut x = Tensor::<T>::randn(vec![range(rng, 1, 3), range(rng, 1, 8)], 2.0, rng);
            away_from_zero(&mut x, gap);
            check(&[x], &|g: &mut Graph<T>, v: &[Var]| g.activation(act, v[0]), h, rng)
        });
    }

    run(&mut out, "batchnorm2d_train", trials, &mut rng, |rng| {
        let c = range(rng, 1, 3);
        let shape = vec![range(rng, 2, 3), c, range(rng, 2, 3), range(rng, 2, 3)];
        let inputs = [
            Tensor::<T>::randn(shape, 1.5, rng),
            randn::<T>(vec![c], rng),
            randn::<T>(vec![c], rng),
        ];
        let build = |g: &mut Graph<T>, v: &[Var]| {
            let mut stats = RunningStats::new(c);
            g.batchnorm2d(v[0], v[1], v[2], &mut stats, 1e-5, 0.1, Mode::Train)
        };
        check(&inputs, &build, h, rng)
    });

    run(&mut out, "batchnorm2d_eval", trials, &mut rng, |rng| {
        let c = range(rng, 1, 3);
        let shape = vec![range(rng, 1, 3), c, range(rng, 1, 3), range(rng, 1, 3)];
        let inputs = [randn::<T>(shape, rng), randn::<T>(vec![c], rng), randn::<T>(vec![c], rng)];
        let stats = RunningStats {
            mean: randn::<T>(vec![c], rng).into_data(),
            var: Tensor::<T>::uniform(vec![c], 0.5, 2.0, rng).into_data(),
        };
        let build = |g: &mut Graph<T>, v: &[Var]| {
            let mut s = stats.clone();
            g.batchnorm2d(v[0], v[1], v[2], &mut s, 1e-5, 0.1, Mode::Eval)
        };
        check(&inputs, &build, h, rng)
    });

    run(&mut out, "dropout", trials, &mut rng, |rng| {
        let seed = rng.below(1 << 30) as u64;
        let x = randn::<T>(vec![range(rng, 1, 3), range(rng, 2, 12)], rng);
        let build = |g: &mut Graph<T>, v: &[Var]| g.dropout(v[0], 0.4, Mode::Train, &mut Rng::new(seed));
        check(&[x], &build, h, rng)
    });

    run(&mut out, "linear", trials, &mut rng, |rng| {
        let (n, f, o) = (range(rng, 1, 4), range(rng, 1, 6), range(rng, 1, 5));
        let inputs = [randn::<T>(vec![n, f], rng), randn::<T>(vec![f, o], rng), randn::<T>(vec![o], rng)];
        check(&inputs, &|g: &mut Graph<T>, v: &[Var]| g.linear(v[0], v[1], v[2]), h, rng)
    });

    run(&mut out, "reshape_flatten", trials, &mut rng, |rng| {
        let (n, a, b) = (range(rng, 1, 3), range(rng, 1, 4), range(rng, 1, 4));
        let x = randn::<T>(vec![n, a * b], rng);
        let build = |g: &mut Graph<T>, v: &[Var]| {
            let r = g.reshape(v[0], vec![n, a, b])?;
            g.flatten(r)
        };
        check(&[x], &build, h, rng)
    });

    run(&mut out, "softmax_cross_entropy", trials, &mut rng, |rng| {
        let (n, k) = (range(rng, 1, 5), range(rng, 2, 5));
        let targets: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let x = Tensor::<T>::randn(vec![n, k], 2.0, rng);
        check(&[x], &|g: &mut Graph<T>, v: &[Var]| g.softmax_cross_entropy(v[0], &targets), h, rng)
    });

    run(&mut out, "bce_loss", trials, &mut rng, |rng| {
        let n = range(rng, 1, 8);
        let y: Vec<T> = (0..n)
            .map(|_| T::from_f64_lossy(if rng.bernoulli(0.5) { 1.0 } else { 0.0 }))
            .collect();
        let p = Tensor::<T>::uniform(vec![n], 0.05, 0.95, rng);
        // The logs curve sharply near the ends; a shorter step keeps the
        // truncation error of the difference quotient small.
        check(&[p], &|g: &mut Graph<T>, v: &[Var]| g.bce_loss(v[0], &y), h * 0.2, rng)
    });

    run(&mut out, "sum", trials, &mut rng, |rng| {
        let x = randn::<T>(vec![range(rng, 1, 3), range(rng, 1, 5)], rng);
        check(&[x], &|g: &mut Graph<T>, v: &[Var]| g.sum(v[0]), h, rng)
    });

    run(&mut out, "dot", trials, &mut rng, |rng| {
        let shape = vec![range(rng, 1, 3), range(rng, 1, 5)];
        let w = randn::<T>(shape.clone(), rng);
        let x = randn::<T>(shape, rng);
        check(&[x], &|g: &mut Graph<T>, v: &[Var]| g.dot(v[0], w.clone()), h, rng)
    });

    run(&mut out, "add", trials, &mut rng, |rng| {
        let shape = vec![range(rng, 1, 3), range(rng, 1, 5)];
        let inputs = [randn::<T>(shape.clone(), rng), randn::<T>(shape, rng)];
        check(&inputs, &|g: &mut Graph<T>, v: &[Var]| g.add(v[0], v[1]), h, rng)
    });

    out
}

/// Check a whole model: input and every parameter are perturbed. The
/// forward runs in train mode with a fixed dropout stream. The error is
/// taken over the concatenated gradient, since some parameters (biases
/// feeding batch norm) have an exactly zero true gradient that no
/// per-tensor relative measure can resolve.
fn model_check<T: Scalar>(model: Model<T>, input: Tensor<T>, h: f64, rng: &mut Rng, tail: &dyn Fn(&mut Graph<T>, Var) -> Result<Var>) -> f64 {
    let mut inputs = vec![input];
    inputs.extend(model.params().iter().cloned());
    let cell = RefCell::new(model);
    let build = |g: &mut Graph<T>, v: &[Var]| {
        let mut m = cell.borrow_mut();
        let fwd = m.forward_with(g, v[0], v[1..].to_vec(), &mut Rng::new(11))?;
        tail(g, fwd.output)
    };
    let pairs = fd_grads(&inputs, &vec![true; inputs.len()], &build, h, rng);
    let analytic: Vec<f64> = pairs.iter().flat_map(|(a, _)| a.iter().copied()).collect();
    let numeric: Vec<f64> = pairs.iter().flat_map(|(_, n)| n.iter().copied()).collect();
    rel_err(&analytic, &numeric)
}

fn randomize(m: &mut Model<f64>, std: f64, rng: &mut Rng) {
    for p in m.params_mut() {
        *p = Tensor::randn(p.shape().to_vec(), std, rng);
    }
}

/// End-to-end checks of the classifier, generator and discriminator in
/// 64-bit check mode. Kinks inside a full network cannot be steered away
/// from, so these run in f64 only where the step is tiny.
pub fn model_gradient_suite(trials: usize, h: f64, seed: u64) -> Vec<OpResult> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let clf = ClassifierConfig {
        input_size: 8,
        conv1_out: 2,
        conv2_out: 3,
        fc_units: 16,
        ..Default::default()
    };
    let gan = GanConfig {
        latent_dim: 4,
        image_size: 16,
        base_channels: 4,
        disc_base_channels: 2,
        ..Default::default()
    };

    run(&mut out, "classifier_model", trials, &mut rng, |rng| {
        let mut m = Model::<f64>::new(clf.layer_specs().unwrap()).unwrap();
        randomize(&mut m, 0.2, rng);
        m.train();
        let x = randn::<f64>(vec![2, 3, 8, 8], rng);
        let targets = [rng.below(2), rng.below(2)];
        model_check(m, x, h, rng, &|g, o| g.softmax_cross_entropy(o, &targets))
    });

    run(&mut out, "generator_model", trials, &mut rng, |rng| {
        let mut m = Model::<f64>::new(gan.generator_specs().unwrap()).unwrap();
        randomize(&mut m, 0.5, rng);
        m.train();
        let z = randn::<f64>(vec![2, 4], rng);
        model_check(m, z, h, rng, &|_, o| Ok(o))
    });

    run(&mut out, "discriminator_model", trials, &mut rng, |rng| {
        let mut m = Model::<f64>::new(gan.discriminator_specs().unwrap()).unwrap();
        randomize(&mut m, 0.1, rng);
        m.train();
        let x = randn::<f64>(vec![2, 3, 16, 16], rng);
        model_check(m, x, h, rng, &|g, o| g.bce_loss(o, &[1.0, 0.0]))
    });

    out
}

pub struct OracleResult {
    pub configs: usize,
    pub worst: f64,
}

fn shape4(t: &Tensor<f64>) -> (usize, usize, usize, usize) {
    t.dims4().unwrap()
}

/// conv2d forward against the direct loop on random configurations.
pub fn conv_oracle(configs: usize, seed: u64) -> OracleResult {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let k = range(&mut rng, 1, 5);
        let (stride, pad) = (range(&mut rng, 1, 3), rng.below(k.min(3)));
        let (n, c, o) = (range(&mut rng, 1, 3), range(&mut rng, 1, 4), range(&mut rng, 1, 4));
        let (h, w) = (range(&mut rng, k, 12), range(&mut rng, k, 12));
        let x = randn::<f64>(vec![n, c, h, w], &mut rng);
        let wt = randn::<f64>(vec![o, c, k, k], &mut rng);
        let b = randn::<f64>(vec![o], &mut rng);
        let (expect, oh, ow) = naive_conv2d(x.data(), shape4(&x), wt.data(), o, k, b.data(), stride, pad);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(wt), g.constant(b));
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(g.value(y).shape(), [n, o, oh, ow]);
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            worst = worst.max((a - e).abs());
        }
    }
    OracleResult { configs, worst }
}

/// maxpool2d values and gradient routing against the direct loop. The
/// input has deliberate ties so first-maximum routing is exercised.
pub fn maxpool_oracle(configs: usize, seed: u64) -> OracleResult {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let k = range(&mut rng, 1, 4);
        let stride = range(&mut rng, 1, 3);
        let (n, c) = (range(&mut rng, 1, 3), range(&mut rng, 1, 3));
        let (h, w) = (range(&mut rng, k, 11), range(&mut rng, k, 11));
        let x = Tensor::<f64>::from_fn(vec![n, c, h, w], |_| (rng.below(7) as f64 - 3.0) * 0.5);
        let (expect, arg, oh, ow) = naive_maxpool2d(x.data(), shape4(&x), k, stride);
        let mut grad = vec![0.0; x.numel()];
        for &i in &arg {
            grad[i] += 1.0;
        }
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let y = g.maxpool2d(xv, k, stride).unwrap();
        assert_eq!(g.value(y).shape(), [n, c, oh, ow]);
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            worst = worst.max((a - e).abs());
        }
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        for (a, e) in g.grad(xv).unwrap().data().iter().zip(&grad) {
            worst = worst.max((a - e).abs());
        }
    }
    OracleResult { configs, worst }
}

/// `<convT(y), x> = <y, conv(x)>` with shared weights and zero bias, plus
/// the forward against the scatter loop. Reports the worst relative error.
pub fn conv_transpose_adjoint(configs: usize, seed: u64) -> OracleResult {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < configs {
        let k = range(&mut rng, 1, 5);
        let (stride, pad) = (range(&mut rng, 1, 3), rng.below(k));
        let (oh, ow) = (range(&mut rng, 1, 6), range(&mut rng, 1, 6));
        let (h, w) = ((oh - 1) * stride + k, (ow - 1) * stride + k);
        if h <= 2 * pad || w <= 2 * pad {
            continue;
        }
        let (h, w) = (h - 2 * pad, w - 2 * pad);
        let (n, c, o) = (range(&mut rng, 1, 2), range(&mut rng, 1, 3), range(&mut rng, 1, 3));
        let x = randn::<f64>(vec![n, c, h, w], &mut rng);
        let y = randn::<f64>(vec![n, o, oh, ow], &mut rng);
        let wt = randn::<f64>(vec![o, c, k, k], &mut rng);
        let mut g = Graph::new();
        let (xv, yv, wv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(wt.clone()));
        let zo = g.constant(Tensor::zeros(vec![o]));
        let zc = g.constant(Tensor::zeros(vec![c]));
        let cx = g.conv2d(xv, wv, zo, stride, pad).unwrap();
        let ty = g.conv_transpose2d(yv, wv, zc, stride, pad).unwrap();
        assert_eq!(g.value(cx).shape(), y.shape());
        assert_eq!(g.value(ty).shape(), x.shape());
        let lhs = g.value(ty).dot(&x);
        let rhs = y.dot(g.value(cx));
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));

        let b = randn::<f64>(vec![c], &mut rng);
        let (expect, eh, ew) = naive_conv_transpose2d(y.data(), shape4(&y), wt.data(), c, k, b.data(), stride, pad);
        assert_eq!((eh, ew), (h, w));
        let bv = g.constant(b);
        let t = g.conv_transpose2d(yv, wv, bv, stride, pad).unwrap();
        for (a, e) in g.value(t).data().iter().zip(&expect) {
            worst = worst.max((a - e).abs());
        }
        done += 1;
    }
    OracleResult { configs, worst }
}

fn noise_image(size: usize, rng: &mut Rng) -> Image {
    Image::new(size, size, 1, (0..size * size).map(|_| rng.uniform() as f32).collect()).unwrap()
}

/// SSIM against the per-window evaluator on random pairs. Pairs alternate
/// between independent noise and a noisy copy so high scores are covered.
pub fn ssim_oracle(pairs: usize, seed: u64) -> OracleResult {
    let mut rng = Rng::new(seed);
    let p = SsimParams::default();
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let x = noise_image(32, &mut rng);
        let y = if i % 2 == 0 {
            noise_image(32, &mut rng)
        } else {
            let px = x.pixels.iter().map(|&v| (v + 0.1 * rng.normal() as f32).clamp(0.0, 1.0)).collect();
            Image::new(32, 32, 1, px).unwrap()
        };
        let fast = ssim(&x, &y, &p).unwrap();
        let slow = brute_ssim(&x, &y, p.k1, p.k2, p.dynamic_range, p.window, p.sigma);
        worst = worst.max((fast - slow).abs());
    }
    OracleResult { configs: pairs, worst }
}
