//! Flat binary model checkpoints.
//!
//! Layout: integers are little-endian `u32`, layer hyperparameters
//! little-endian `f64`, weights and buffers little-endian `f32`.
//!
//! ```text
//! "SGCK"  version(=1)
//! meta_len  meta_json[meta_len]            -- ModelMeta as UTF-8 JSON
//! layer_count  layer_record*
//! parameter arrays, declaration order      -- shapes implied by the layers
//! per batch-norm layer: running_mean[C] running_var[C]
//! ```
//!
//! Layer records start with a tag byte:
//!
//! | tag | layer            | fields                                  |
//! |-----|------------------|-----------------------------------------|
//! | 1   | Conv2d           | in, out, kernel, stride, pad            |
//! | 2   | ConvTranspose2d  | in, out, kernel, stride, pad            |
//! | 3   | MaxPool2d        | kernel, stride                          |
//! | 4   | Activation       | kind u8 (0 relu, 1 leaky, 2 sigmoid, 3 tanh), slope f64 |
//! | 5   | BatchNorm2d      | channels, eps f64, momentum f64         |
//! | 6   | Dropout          | p f64                                   |
//! | 7   | Flatten          |                                         |
//! | 8   | Reshape          | ndims, dims[ndims]                      |
//! | 9   | Linear           | in_features, out_features               |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, RunningStats};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;
const MAX_LAYERS: u32 = 4096;
const MAX_EXTENT: u32 = 1 << 20;
const MAX_META: u32 = 1 << 20;

/// Free-form description stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelMeta {
    /// `classifier` or `generator` or `discriminator`.
    pub kind: String,
    pub class_names: Vec<String>,
    pub input_size: usize,
    pub latent_dim: usize,
    pub epochs: usize,
}

pub fn encode(model: &Model<f32>, meta: &ModelMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let meta = serde_json::to_vec(meta)?;
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(&meta);
    put_u32(&mut out, model.specs().len() as u32);
    for spec in model.specs() {
        encode_layer(&mut out, spec);
    }
    for p in model.params() {
        for &v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for b in model.buffers() {
        for &v in b.mean.iter().chain(&b.var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn encode_layer(out: &mut Vec<u8>, spec: &LayerSpec) {
    match spec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => {
            out.push(1);
            for v in [in_ch, out_ch, kernel, stride, pad] {
                put_u32(out, *v as u32);
            }
        }
        LayerSpec::ConvTranspose2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => {
            out.push(2);
            for v in [in_ch, out_ch, kernel, stride, pad] {
                put_u32(out, *v as u32);
            }
        }
        LayerSpec::MaxPool2d { kernel, stride } => {
            out.push(3);
            put_u32(out, *kernel as u32);
            put_u32(out, *stride as u32);
        }
        LayerSpec::Activation(a) => {
            out.push(4);
            let (kind, slope) = match a {
                Activation::Relu => (0u8, 0.0),
                Activation::LeakyRelu(s) => (1, *s),
                Activation::Sigmoid => (2, 0.0),
                Activation::Tanh => (3, 0.0),
            };
            out.push(kind);
            put_f64(out, slope);
        }
        LayerSpec::BatchNorm2d {
            channels,
            eps,
            momentum,
        } => {
            out.push(5);
            put_u32(out, *channels as u32);
            put_f64(out, *eps);
            put_f64(out, *momentum);
        }
        LayerSpec::Dropout { p } => {
            out.push(6);
            put_f64(out, *p);
        }
        LayerSpec::Flatten => out.push(7),
        LayerSpec::Reshape { dims } => {
            out.push(8);
            put_u32(out, dims.len() as u32);
            for d in dims {
                put_u32(out, *d as u32);
            }
        }
        LayerSpec::Linear {
            in_features,
            out_features,
        } => {
            out.push(9);
            put_u32(out, *in_features as u32);
            put_u32(out, *out_features as u32);
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn extent(&mut self) -> Result<usize> {
        let v = self.u32()?;
        if v > MAX_EXTENT {
            return Err(Error::Format(format!("extent {v} exceeds limit")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn f32_array(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format("array size overflow".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_layer(r: &mut Reader<'_>) -> Result<LayerSpec> {
    let tag = r.u8()?;
    Ok(match tag {
        1 | 2 => {
            let (in_ch, out_ch, kernel, stride, pad) =
                (r.extent()?, r.extent()?, r.extent()?, r.extent()?, r.extent()?);
            if tag == 1 {
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                }
            } else {
                LayerSpec::ConvTranspose2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                }
            }
        }
        3 => LayerSpec::MaxPool2d {
            kernel: r.extent()?,
            stride: r.extent()?,
        },
        4 => {
            let kind = r.u8()?;
            let slope = r.f64()?;
            LayerSpec::Activation(match kind {
                0 => Activation::Relu,
                1 => Activation::LeakyRelu(slope),
                2 => Activation::Sigmoid,
                3 => Activation::Tanh,
                k => return Err(Error::Format(format!("unknown activation kind {k}"))),
            })
        }
        5 => LayerSpec::BatchNorm2d {
            channels: r.extent()?,
            eps: r.f64()?,
            momentum: r.f64()?,
        },
        6 => LayerSpec::Dropout { p: r.f64()? },
        7 => LayerSpec::Flatten,
        8 => {
            let nd = r.u32()?;
            if nd > 8 {
                return Err(Error::Format(format!("reshape rank {nd} too large")));
            }
            let dims = (0..nd).map(|_| r.extent()).collect::<Result<Vec<_>>>()?;
            LayerSpec::Reshape { dims }
        }
        9 => LayerSpec::Linear {
            in_features: r.extent()?,
            out_features: r.extent()?,
        },
        t => return Err(Error::Format(format!("unknown layer tag {t}"))),
    })
}

/// Parse a checkpoint produced by [`encode`]. Rejects trailing bytes.
pub fn decode(bytes: &[u8]) -> Result<(Model<f32>, ModelMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Unsupported(format!("checkpoint version {version}")));
    }
    let meta_len = r.u32()?;
    if meta_len > MAX_META {
        return Err(Error::Format(format!("metadata length {meta_len} exceeds limit")));
    }
    let meta: ModelMeta = serde_json::from_slice(r.take(meta_len as usize)?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let n_layers = r.u32()?;
    if n_layers > MAX_LAYERS {
        return Err(Error::Format(format!("{n_layers} layers exceeds limit")));
    }
    let specs = (0..n_layers)
        .map(|_| decode_layer(&mut r))
        .collect::<Result<Vec<_>>>()?;

    // Size everything before allocating so hostile headers cannot request
    // more memory than the payload could describe.
    let mut shapes = Vec::new();
    let mut floats = 0usize;
    for spec in &specs {
        for shape in spec.param_shapes() {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("parameter size overflow".into()))?;
            floats = floats
                .checked_add(n)
                .ok_or_else(|| Error::Format("parameter size overflow".into()))?;
            shapes.push(shape);
        }
        if let LayerSpec::BatchNorm2d { channels, .. } = spec {
            floats = floats.saturating_add(2 * channels);
        }
    }
    if floats.saturating_mul(4) != r.remaining() {
        return Err(Error::Format(format!(
            "checkpoint payload is {} bytes, layers need {}",
            r.remaining(),
            floats.saturating_mul(4)
        )));
    }
    let mut model = Model::<f32>::new(specs.clone()).map_err(|e| match e {
        Error::Config(m) => Error::Format(format!("invalid layer in checkpoint: {m}")),
        other => other,
    })?;
    let params = shapes
        .into_iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s, r.f32_array(n)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut buffers = Vec::new();
    for spec in &specs {
        if let LayerSpec::BatchNorm2d { channels, .. } = spec {
            buffers.push(RunningStats {
                mean: r.f32_array(*channels)?,
                var: r.f32_array(*channels)?,
            });
        }
    }
    model.load_state(params, buffers)?;
    model.eval();
    Ok((model, meta))
}

pub fn save(path: &Path, model: &Model<f32>, meta: &ModelMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model<f32>, ModelMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display().to_string()))
}
