//! DCGAN-style generator and discriminator with an alternating BCE
//! training loop.
//!
//! The generator projects a latent vector to a small `h×h` map (`h` is 3 or
//! 4) and doubles the resolution with stride-2 transposed convolutions until
//! it reaches `image_size`. The discriminator mirrors it with stride-2
//! convolutions and ends in a single sigmoid unit.

use std::path::{Path, PathBuf};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::image::{denormalize, write_image, Image, DEFAULT_MEAN, DEFAULT_STD};
use crate::nn::{Init, LayerSpec, Model};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;
const GEN_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub image_size: usize,
    /// Channels of the generator's projected head.
    pub base_channels: usize,
    /// Channels of the discriminator's first stage; doubled per stage.
    pub disc_base_channels: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Adam β1 for both networks.
    pub beta1: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Save samples after every this many epochs; 0 disables saving.
    pub save_every_epochs: usize,
    /// Images written at each save.
    pub n_samples: usize,
    pub label_real: f64,
    pub label_fake: f64,
    pub leaky_slope: f64,
    pub disc_dropout: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 100,
            image_size: 192,
            base_channels: 512,
            disc_base_channels: 16,
            lr_g: 2e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            batch_size: 32,
            epochs: 200,
            save_every_epochs: 10,
            n_samples: 16,
            label_real: 1.0,
            label_fake: 0.0,
            leaky_slope: 0.2,
            disc_dropout: 0.3,
            seed: 0,
        }
    }
}

impl GanConfig {
    /// Head side and number of 2× stages for `image_size`: `3·2^s` is
    /// preferred, then `4·2^s`, with `s ≥ 2`.
    pub fn geometry(&self) -> Result<(usize, usize)> {
        for head in [3usize, 4] {
            let mut side = head;
            let mut stages = 0;
            while side < self.image_size {
                side *= 2;
                stages += 1;
            }
            if side == self.image_size && stages >= 2 {
                return Ok((head, stages));
            }
        }
        Err(Error::Config(format!(
            "image_size {} is not 3·2^s or 4·2^s with s ≥ 2",
            self.image_size
        )))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (_, stages) = self.geometry()?;
        if self.latent_dim == 0 {
            return bad("latent_dim must be ≥ 1".into());
        }
        if self.base_channels >> (stages - 1) == 0 || self.disc_base_channels == 0 {
            return bad(format!(
                "base_channels {} too small for {stages} stages",
                self.base_channels
            ));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad(format!("learning rates {} / {} must be > 0", self.lr_g, self.lr_d));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        for (name, v) in [("label_real", self.label_real), ("label_fake", self.label_fake)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} not in [0,1]"));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} not in (0,1)", self.leaky_slope));
        }
        if !(0.0..1.0).contains(&self.disc_dropout) {
            return bad(format!("disc_dropout {} not in [0,1)", self.disc_dropout));
        }
        self.adam(self.lr_g).validate()
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            ..AdamConfig::default()
        }
    }

    pub fn generator_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let (head, stages) = self.geometry()?;
        let c0 = self.base_channels;
        let mut specs = vec![
            LayerSpec::Linear {
                in_features: self.latent_dim,
                out_features: c0 * head * head,
            },
            LayerSpec::Reshape {
                dims: vec![c0, head, head],
            },
            LayerSpec::BatchNorm2d {
                channels: c0,
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
            LayerSpec::Activation(Activation::Relu),
        ];
        for i in 0..stages {
            let in_ch = c0 >> i;
            let last = i + 1 == stages;
            let out_ch = if last { 3 } else { c0 >> (i + 1) };
            specs.push(LayerSpec::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel: 4,
                stride: 2,
                pad: 1,
            });
            if last {
                specs.push(LayerSpec::Activation(Activation::Tanh));
            } else {
                specs.push(LayerSpec::BatchNorm2d {
                    channels: out_ch,
                    eps: BN_EPS,
                    momentum: BN_MOMENTUM,
                });
                specs.push(LayerSpec::Activation(Activation::Relu));
            }
        }
        Ok(specs)
    }

    pub fn discriminator_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let (head, stages) = self.geometry()?;
        let mut specs = Vec::new();
        let mut in_ch = 3;
        for i in 0..stages {
            let out_ch = self.disc_base_channels << i;
            specs.push(LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel: 4,
                stride: 2,
                pad: 1,
            });
            specs.push(LayerSpec::Activation(Activation::LeakyRelu(self.leaky_slope)));
            specs.push(LayerSpec::Dropout {
                p: self.disc_dropout,
            });
            in_ch = out_ch;
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Linear {
            in_features: in_ch * head * head,
            out_features: 1,
        });
        specs.push(LayerSpec::Activation(Activation::Sigmoid));
        Ok(specs)
    }
}

/// `N(0, 0.02)`-initialised generator.
pub fn build_generator(cfg: &GanConfig, rng: &mut Rng) -> Result<Model<f32>> {
    let mut m = Model::new(cfg.generator_specs()?)?;
    m.init(Init::Normal { std: INIT_STD }, rng);
    Ok(m)
}

/// `N(0, 0.02)`-initialised discriminator.
pub fn build_discriminator(cfg: &GanConfig, rng: &mut Rng) -> Result<Model<f32>> {
    let mut m = Model::new(cfg.discriminator_specs()?)?;
    m.init(Init::Normal { std: INIT_STD }, rng);
    Ok(m)
}

/// Fraction of real samples scored above `threshold` plus fake samples
/// scored at or below it, over all samples. Zero for empty input.
pub fn discriminator_accuracy(p_real: &[f32], p_fake: &[f32], threshold: f32) -> f64 {
    let total = p_real.len() + p_fake.len();
    if total == 0 {
        return 0.0;
    }
    let hits = p_real.iter().filter(|&&p| p > threshold).count()
        + p_fake.iter().filter(|&&p| p <= threshold).count();
    hits as f64 / total as f64
}

/// Standard-normal latent batch `[n, latent_dim]`.
pub fn sample_latent(n: usize, latent_dim: usize, rng: &mut Rng) -> Tensor<f32> {
    Tensor::randn(vec![n, latent_dim], 1.0, rng)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanReport {
    pub g_loss: Vec<f64>,
    pub d_loss: Vec<f64>,
    pub d_accuracy: Vec<f64>,
    pub saved: Vec<PathBuf>,
}

impl GanReport {
    pub fn steps(&self) -> usize {
        self.g_loss.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub g_loss: f64,
    pub d_loss: f64,
    pub d_accuracy: f64,
}

type DiscPass = (Graph<f32>, Var, Vec<Var>, Vec<f32>, Vec<f32>);

/// Both networks with their optimisers.
pub struct Gan {
    pub generator: Model<f32>,
    pub discriminator: Model<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    cfg: GanConfig,
}

fn numeric_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e.root() {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        _ => e.context(format!("step {step}")),
    }
}

impl Gan {
    pub fn new(cfg: &GanConfig, rng: &mut Rng) -> Result<Self> {
        let generator = build_generator(cfg, rng)?;
        let discriminator = build_discriminator(cfg, rng)?;
        Ok(Self {
            generator,
            discriminator,
            opt_g: Adam::new(cfg.adam(cfg.lr_g))?,
            opt_d: Adam::new(cfg.adam(cfg.lr_d))?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }

    fn labels(&self, n: usize, value: f64) -> Vec<f32> {
        vec![value as f32; n]
    }

    /// Discriminator BCE on `real` (labelled real) plus `fake` (labelled
    /// fake), recorded on a fresh graph. Returns the graph, the loss node,
    /// the parameter handles and both probability vectors.
    fn disc_graph(
        &mut self,
        real: &Tensor<f32>,
        fake: &Tensor<f32>,
        rng: &mut Rng,
    ) -> Result<DiscPass> {
        let (nr, nf) = (real.shape()[0], fake.shape()[0]);
        let mut g = Graph::new();
        let params = self.discriminator.bind_params(&mut g, true);
        let xr = g.constant(real.clone());
        let xf = g.constant(fake.clone());
        let out_r = self
            .discriminator
            .forward_with(&mut g, xr, params.clone(), rng)?
            .output;
        let out_f = self
            .discriminator
            .forward_with(&mut g, xf, params.clone(), rng)?
            .output;
        let l_r = g.bce_loss(out_r, &self.labels(nr, self.cfg.label_real))?;
        let l_f = g.bce_loss(out_f, &self.labels(nf, self.cfg.label_fake))?;
        let loss = g.add(l_r, l_f)?;
        let pr = g.value(out_r).data().to_vec();
        let pf = g.value(out_f).data().to_vec();
        Ok((g, loss, params, pr, pf))
    }

    /// Discriminator loss on a fixed batch without updating anything.
    pub fn discriminator_loss(
        &mut self,
        real: &Tensor<f32>,
        fake: &Tensor<f32>,
        rng: &mut Rng,
    ) -> Result<f64> {
        let (g, loss, ..) = self.disc_graph(real, fake, rng)?;
        Ok(g.value(loss).data()[0] as f64)
    }

    /// One Adam step of the discriminator on `real` and (detached) `fake`.
    /// Returns the pre-update loss and accuracy.
    pub fn discriminator_step(
        &mut self,
        real: &Tensor<f32>,
        fake: &Tensor<f32>,
        rng: &mut Rng,
    ) -> Result<(f64, f64)> {
        let (mut g, loss, params, pr, pf) = self.disc_graph(real, fake, rng)?;
        let lv = g.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("discriminator loss {lv}")));
        }
        g.backward(loss)?;
        let grads = self.discriminator.collect_grads(&g, &params);
        self.opt_d.step(self.discriminator.params_mut(), &grads)?;
        Ok((lv, discriminator_accuracy(&pr, &pf, 0.5)))
    }

    /// One adversarial step: a discriminator update on `real` and a fresh
    /// fake batch, then a generator update that pushes the (updated)
    /// discriminator's score of that same fake batch towards the real
    /// label. The generator runs forward once per step.
    pub fn train_step(&mut self, real: &Tensor<f32>, rng: &mut Rng) -> Result<StepStats> {
        let n = real.shape()[0];
        self.generator.train();
        self.discriminator.train();
        let mut gg = Graph::new();
        let z = gg.constant(sample_latent(n, self.cfg.latent_dim, rng));
        let fwd_g = self.generator.forward(&mut gg, z, rng)?;
        let fake = gg.value(fwd_g.output).clone();

        let (d_loss, d_accuracy) = self.discriminator_step(real, &fake, rng)?;

        // Discriminator weights enter the generator graph as constants, so
        // no gradient reaches them from this pass.
        let d_params = self.discriminator.bind_params(&mut gg, false);
        let p = self
            .discriminator
            .forward_with(&mut gg, fwd_g.output, d_params, rng)?
            .output;
        let loss = gg.bce_loss(p, &self.labels(n, self.cfg.label_real))?;
        let g_loss = gg.value(loss).data()[0] as f64;
        if !g_loss.is_finite() {
            return Err(Error::Numeric(format!("generator loss {g_loss}")));
        }
        gg.backward(loss)?;
        let grads = self.generator.collect_grads(&gg, &fwd_g.params);
        self.opt_g.step(self.generator.params_mut(), &grads)?;
        Ok(StepStats {
            g_loss,
            d_loss,
            d_accuracy,
        })
    }
}

/// Train on normalised `[3, S, S]` images for `cfg.epochs` epochs, seeded
/// from `cfg.seed`. When `out_dir` is given, `cfg.n_samples` images from a
/// fixed latent batch are written there every `cfg.save_every_epochs`
/// epochs as `gen_<epoch>_<index>.ppm`.
pub fn train_gan(images: &[Tensor<f32>], cfg: &GanConfig, out_dir: Option<&Path>) -> Result<(Gan, GanReport)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset("no images to train the GAN on".into()));
    }
    let want = [3, cfg.image_size, cfg.image_size];
    if let Some(bad) = images.iter().find(|t| t.shape() != want) {
        return Err(Error::Shape(format!(
            "GAN input {:?}, expected {want:?}",
            bad.shape()
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut gan = Gan::new(cfg, &mut rng)?;
    let fixed_z = sample_latent(cfg.n_samples.max(1), cfg.latent_dim, &mut rng.fork(1));
    let mut report = GanReport::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<&Tensor<f32>> = batch.iter().map(|&i| &images[i]).collect();
            let real = Tensor::stack(&parts)?;
            let s = gan.train_step(&real, &mut rng).map_err(numeric_at(step))?;
            report.g_loss.push(s.g_loss);
            report.d_loss.push(s.d_loss);
            report.d_accuracy.push(s.d_accuracy);
            step += 1;
        }
        let last = report.steps() - 1;
        debug!(
            "epoch {epoch}: g_loss {:.4} d_loss {:.4} d_acc {:.3}",
            report.g_loss[last], report.d_loss[last], report.d_accuracy[last]
        );
        let due = cfg.save_every_epochs > 0 && (epoch + 1) % cfg.save_every_epochs == 0;
        if let (true, Some(dir)) = (due && cfg.n_samples > 0, out_dir) {
            let imgs = render(&mut gan.generator, &fixed_z)?;
            for (i, img) in imgs.iter().enumerate() {
                let path = dir.join(format!("gen_{:04}_{i:03}.ppm", epoch + 1));
                write_image(&path, img)?;
                report.saved.push(path);
            }
        }
    }
    gan.generator.eval();
    gan.discriminator.eval();
    Ok((gan, report))
}

/// Generator output for latent batch `z` in eval mode, denormalised to
/// `[0,1]` images. The generator's mode is restored afterwards.
pub fn render(generator: &mut Model<f32>, z: &Tensor<f32>) -> Result<Vec<Image>> {
    let prev = generator.mode();
    generator.eval();
    let result = render_eval(generator, z);
    if prev == Mode::Train {
        generator.train();
    }
    result
}

fn render_eval(generator: &mut Model<f32>, z: &Tensor<f32>) -> Result<Vec<Image>> {
    let (n, d) = z.dims2()?;
    let mut rng = Rng::new(0);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(GEN_CHUNK) {
        let end = (start + GEN_CHUNK).min(n);
        let chunk = Tensor::new(vec![end - start, d], z.data()[start * d..end * d].to_vec())?;
        let imgs = generator.predict(chunk, &mut rng)?;
        for i in 0..end - start {
            out.push(denormalize(&imgs.index_outer(i)?, DEFAULT_MEAN, DEFAULT_STD)?);
        }
    }
    Ok(out)
}

/// Draw `n` latents from `rng`, render them, and when `out_dir` is given
/// write `<out_dir>/<prefix><index>.ppm`.
pub fn generate_batch(
    generator: &mut Model<f32>,
    latent_dim: usize,
    n: usize,
    rng: &mut Rng,
    out_dir: Option<&Path>,
    prefix: &str,
) -> Result<(Vec<Image>, Vec<PathBuf>)> {
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let z = sample_latent(n, latent_dim, rng);
    let images = render(generator, &z)?;
    let mut paths = Vec::new();
    if let Some(dir) = out_dir {
        for (i, img) in images.iter().enumerate() {
            let path = dir.join(format!("{prefix}{i:05}.ppm"));
            write_image(&path, img)?;
            paths.push(path);
        }
    }
    Ok((images, paths))
}
