//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. Nothing here calls into the library's
//! kernels; everything is written as direct loops in f64.
#![allow(dead_code)]

use ssimgan::autograd::{Graph, Var};
use ssimgan::image::Image;
use ssimgan::{Result, Rng, Scalar, Tensor};

pub mod suites;

/// Direct-loop convolution of `x[n,c,h,w]` with `w[o,c,k,k]` and bias.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    o: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * c + ic) * k + ky) * k + kx;
                                acc += x[xi] * wt[wi];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Scatter form of the transposed convolution: every input pixel adds
/// `x · w[ic, oc]` into its `k×k` output footprint.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv_transpose2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    o: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (w - 1) * stride + k - 2 * pad;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for v in &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow] {
                *v = bias[oc];
            }
        }
        for ic in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = x[((b * c + ic) * h + iy) * w + ix];
                    for oc in 0..o {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let wi = ((ic * o + oc) * k + ky) * k + kx;
                                out[((b * o + oc) * oh + oy as usize) * ow + ox as usize] += xv * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Max pooling without padding. Returns values and, per output, the flat
/// input index of the first maximum in row-major window order.
pub fn naive_maxpool2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut vals = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (plane * h + oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            at = i;
                        }
                    }
                }
                vals.push(best);
                arg.push(at);
            }
        }
    }
    (vals, arg, oh, ow)
}

/// Mean SSIM over all valid window positions, each window evaluated from
/// scratch with a 2-D Gaussian weight.
pub fn brute_ssim(x: &Image, y: &Image, k1: f64, k2: f64, range: f64, win: usize, sigma: f64) -> f64 {
    let (w, h) = (x.width, x.height);
    let half = (win as f64 - 1.0) / 2.0;
    let mut weights = vec![0.0; win * win];
    for v in 0..win {
        for u in 0..win {
            let d2 = (u as f64 - half).powi(2) + (v as f64 - half).powi(2);
            weights[v * win + u] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let px = |img: &Image, i: usize, j: usize| img.pixels[j * w + i] as f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for j0 in 0..=h - win {
        for i0 in 0..=w - win {
            let (mut mx, mut my) = (0.0, 0.0);
            for v in 0..win {
                for u in 0..win {
                    let wt = weights[v * win + u];
                    mx += wt * px(x, i0 + u, j0 + v);
                    my += wt * px(y, i0 + u, j0 + v);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for v in 0..win {
                for u in 0..win {
                    let wt = weights[v * win + u];
                    let dx = px(x, i0 + u, j0 + v) - mx;
                    let dy = px(y, i0 + u, j0 + v) - my;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub type Build<'a, T> = dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var> + 'a;

/// Worst per-input relative error of [`fd_grads`].
pub fn fd_check<T: Scalar>(inputs: &[Tensor<T>], check: &[bool], build: &Build<T>, h: f64, rng: &mut Rng) -> f64 {
    fd_grads(inputs, check, build, h, rng)
        .iter()
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradients of `build` at `inputs`. The op output is
/// contracted with a fixed random tensor to get a scalar. Returns
/// `(analytic, numeric)` for each input flagged in `check`.
pub fn fd_grads<T: Scalar>(
    inputs: &[Tensor<T>],
    check: &[bool],
    build: &Build<T>,
    h: f64,
    rng: &mut Rng,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(check)
        .map(|(t, &c)| g.leaf(t.clone(), c))
        .collect();
    let out = build(&mut g, &vars).expect("forward");
    let proj = Tensor::<T>::randn(g.value(out).shape().to_vec(), 1.0, rng);
    let proj64 = to_f64(&proj);
    let loss = g.dot(out, proj.clone()).expect("dot");
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(to_f64).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |xs: &[Tensor<T>]| -> f64 {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        to_f64(g.value(out)).iter().zip(&proj64).map(|(a, b)| a * b).sum()
    };

    let mut pairs = Vec::new();
    for (idx, grad) in analytic.into_iter().enumerate() {
        if !check[idx] {
            continue;
        }
        let mut numeric = vec![0.0; grad.len()];
        let mut xs = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[idx].data()[j];
            let plus = orig + T::from_f64_lossy(h);
            let minus = orig - T::from_f64_lossy(h);
            xs[idx].data_mut()[j] = plus;
            let fp = eval(&xs);
            xs[idx].data_mut()[j] = minus;
            let fm = eval(&xs);
            xs[idx].data_mut()[j] = orig;
            *slot = (fp - fm) / (plus.as_f64() - minus.as_f64());
        }
        pairs.push((grad, numeric));
    }
    pairs
}

/// Push every entry at least `gap` away from zero, keeping its sign.
pub fn away_from_zero<T: Scalar>(t: &mut Tensor<T>, gap: f64) {
    for v in t.data_mut() {
        let f = v.as_f64();
        if f.abs() < gap {
            *v = T::from_f64_lossy(if f < 0.0 { -gap - f.abs() } else { gap + f });
        }
    }
}

/// Distinct values on a grid of spacing `gap` in random order.
pub fn distinct<T: Scalar>(shape: Vec<usize>, gap: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mid = n as f64 / 2.0;
    Tensor::new(shape, order.iter().map(|&i| T::from_f64_lossy((i as f64 - mid) * gap)).collect()).unwrap()
}

pub fn randn<T: Scalar>(shape: Vec<usize>, rng: &mut Rng) -> Tensor<T> {
    Tensor::randn(shape, 1.0, rng)
}

pub fn range(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}
