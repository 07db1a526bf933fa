//! Grad-CAM heatmaps for a trained classifier.

use crate::autograd::{Graph, Mode};
use crate::error::{Error, Result};
use crate::image::{resize_bilinear, resize_plane, rgb_to_luma, Image};
use crate::nn::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Blend weight of the colour-mapped heatmap in [`overlay`].
pub const OVERLAY_ALPHA: f32 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Row-major `height × width` values in `[0, 1]`.
    pub values: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub target_class: usize,
    /// Index of the layer whose output was weighted.
    pub source_layer: usize,
}

impl Heatmap {
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// The heatmap as a grey image.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels: self.values.clone(),
        }
    }
}

/// `ReLU(Σ_k α_k A_k)` with `α_k` the spatial mean of `grads[k]`, for
/// `[K, h, w]` activations and their gradients.
pub fn weighted_map(acts: &Tensor<f32>, grads: &Tensor<f32>) -> Result<Vec<f32>> {
    if acts.shape() != grads.shape() || acts.ndim() != 3 {
        return Err(Error::Shape(format!(
            "grad-cam expects matching [K,h,w], got {:?} and {:?}",
            acts.shape(),
            grads.shape()
        )));
    }
    let plane = acts.shape()[1] * acts.shape()[2];
    let mut map = vec![0.0f64; plane];
    for (a, g) in acts.data().chunks(plane).zip(grads.data().chunks(plane)) {
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        for (m, &v) in map.iter_mut().zip(a) {
            *m += alpha * v as f64;
        }
    }
    Ok(map.into_iter().map(|v| v.max(0.0) as f32).collect())
}

/// Min-max scaling to `[0, 1]`. A map that is identically zero stays zero;
/// a constant positive map becomes all ones.
pub fn normalize_map(values: &mut [f32]) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > 0.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else if hi - lo <= 0.0 {
        values.iter_mut().for_each(|v| *v = 1.0);
    } else {
        values.iter_mut().for_each(|v| *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0));
    }
}

/// Grad-CAM of `target_class` at the output of layer `layer` for a single
/// `[C,H,W]` (or `[1,C,H,W]`) input. The model runs in eval mode and its
/// previous mode is restored.
pub fn gradcam(model: &mut Model<f32>, input: &Tensor<f32>, target_class: usize, layer: usize) -> Result<Heatmap> {
    if layer >= model.specs().len() {
        return Err(Error::LayerNotFound(layer));
    }
    let x = match input.shape() {
        [c, h, w] => input.clone().reshape(vec![1, *c, *h, *w])?,
        [1, _, _, _] => input.clone(),
        s => return Err(Error::Shape(format!("grad-cam input {s:?}"))),
    };
    let (_, _, height, width) = x.dims4()?;
    let prev = model.mode();
    model.eval();
    let result = (|| -> Result<Heatmap> {
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let params = model.bind_params(&mut g, false);
        let fwd = model.forward_with(&mut g, xv, params, &mut Rng::new(0))?;
        let k = g.value(fwd.output).numel();
        if target_class >= k {
            return Err(Error::Index {
                what: "target class",
                index: target_class,
                size: k,
            });
        }
        let act_var = fwd.layers[layer];
        let act = g.value(act_var).clone();
        let (_, ch, h, w) = act
            .dims4()
            .map_err(|_| Error::Shape(format!("layer {layer} output {:?} is not a feature map", act.shape())))?;
        let mut onehot = Tensor::zeros(vec![1, k]);
        onehot.data_mut()[target_class] = 1.0;
        let logit = g.dot(fwd.output, onehot)?;
        g.backward(logit)?;
        let grad = g
            .grad(act_var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(act.shape().to_vec()));
        let raw = weighted_map(&act.reshape(vec![ch, h, w])?, &grad.reshape(vec![ch, h, w])?)?;
        let mut values = resize_plane(&raw, w, h, width, height);
        normalize_map(&mut values);
        Ok(Heatmap {
            values,
            width,
            height,
            target_class,
            source_layer: layer,
        })
    })();
    if prev == Mode::Train {
        model.train();
    }
    result
}

/// `0.6·grey + 0.4·(h, 0, 1−h)` per pixel, where grey is the luma of `img`
/// resized to the heatmap. A zero heatmap therefore yields
/// `(0.6g, 0.6g, 0.6g + 0.4)` and an all-ones heatmap `(0.6g + 0.4, 0.6g, 0.6g)`.
pub fn overlay(heatmap: &Heatmap, img: &Image) -> Result<Image> {
    let grey = rgb_to_luma(img);
    let grey = if (grey.width, grey.height) == (heatmap.width, heatmap.height) {
        grey
    } else {
        resize_bilinear(&grey, heatmap.width, heatmap.height)?
    };
    let a = OVERLAY_ALPHA;
    let mut pixels = Vec::with_capacity(grey.pixels.len() * 3);
    for (&g, &h) in grey.pixels.iter().zip(&heatmap.values) {
        let base = (1.0 - a) * g;
        pixels.push((base + a * h).clamp(0.0, 1.0));
        pixels.push(base.clamp(0.0, 1.0));
        pixels.push((base + a * (1.0 - h)).clamp(0.0, 1.0));
    }
    Image::new(heatmap.width, heatmap.height, 3, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Activation;
    use crate::nn::LayerSpec;

    /// conv(1→1, 1×1, weight 1) → relu → flatten → linear(16→2).
    fn probe_model(w_class0: f32) -> Model<f32> {
        let mut m = Model::new(vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 1,
                kernel: 1,
                stride: 1,
                pad: 0,
            },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 16,
                out_features: 2,
            },
        ])
        .unwrap();
        m.params_mut()[0] = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let mut w = Tensor::zeros(vec![16, 2]);
        for i in 0..16 {
            w.data_mut()[i * 2] = w_class0;
            w.data_mut()[i * 2 + 1] = 1.0;
        }
        m.params_mut()[2] = w;
        m
    }

    fn probe_input() -> Tensor<f32> {
        Tensor::from_fn(vec![1, 4, 4], |i| i as f32 / 15.0 - 0.3)
    }

    #[test]
    fn positive_gradient_gives_normalised_activation() {
        let mut m = probe_model(0.5);
        let x = probe_input();
        let h = gradcam(&mut m, &x, 0, 1).unwrap();
        // α = 0.5 everywhere, so the map is 0.5·ReLU(x) before scaling.
        let mut expect: Vec<f32> = x.data().iter().map(|v| v.max(0.0)).collect();
        normalize_map(&mut expect);
        for (a, b) in h.values.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!((h.width, h.height), (4, 4));
        assert_eq!(h.argmax(), (3, 3));
        assert_eq!(h.values.iter().copied().fold(0.0, f32::max), 1.0);
    }

    #[test]
    fn negative_weights_give_zero_map() {
        let mut m = probe_model(-0.5);
        let h = gradcam(&mut m, &probe_input(), 0, 1).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));
        let acts = Tensor::full(vec![2, 3, 3], 1.0);
        let grads = Tensor::full(vec![2, 3, 3], -0.25);
        assert!(weighted_map(&acts, &grads).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        let mut m = probe_model(1.0);
        let x = probe_input();
        assert!(matches!(gradcam(&mut m, &x, 0, 9), Err(Error::LayerNotFound(9))));
        assert!(matches!(gradcam(&mut m, &x, 2, 1), Err(Error::Index { .. })));
        assert!(matches!(gradcam(&mut m, &x, 0, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn logit_scale_keeps_argmax() {
        let mut a = probe_model(0.5);
        let mut b = probe_model(5.0);
        let x = probe_input();
        let ha = gradcam(&mut a, &x, 0, 1).unwrap();
        let hb = gradcam(&mut b, &x, 0, 1).unwrap();
        assert_eq!(ha.argmax(), hb.argmax());
    }

    #[test]
    fn overlay_formula() {
        let img = Image::filled(4, 4, 1, 0.5);
        let mut h = Heatmap {
            values: vec![0.0; 16],
            width: 4,
            height: 4,
            target_class: 0,
            source_layer: 0,
        };
        let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6);
        let o = overlay(&h, &img).unwrap();
        assert!(close(&o.pixels[..3], &[0.3, 0.3, 0.7]));
        h.values = vec![1.0; 16];
        let o = overlay(&h, &img).unwrap();
        assert!(close(&o.pixels[..3], &[0.7, 0.3, 0.3]));
        assert!(o.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
