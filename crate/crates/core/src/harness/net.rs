//! Quantized network description and its JSON fixture format.
//!
//! ```text
//! { "format": "hcim-net", "version": 1,
//!   "input": { "channels", "height", "width", "bits", "scale" },
//!   "layers": [ { "type": "conv", "in_ch", "out_ch", "kernel", "stride", "pad",
//!                 "weight_scale", "weights": <blob>, "bias": <blob> },
//!               { "type": "relu" }, { "type": "quantize", "bits", "scale" },
//!               { "type": "pool", "size" },
//!               { "type": "fc", "in", "out", "weight_scale", "weights", "bias" } ] }
//! ```
//!
//! A blob is `{ "dtype": "i8" | "i32", "shape": [...], "data": <base64> }` holding
//! little-endian integers in row-major order. Conv weights have shape
//! `(out_ch, in_ch, kernel, kernel)`; patches are flattened in the same
//! `(channel, row, col)` order.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::quant::QuantTensor;
use crate::{Error, Result};

pub const NET_FORMAT: &str = "hcim-net";
pub const NET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bits: u8,
    pub scale: f64,
}

/// Convolution or fully connected layer; a fully connected layer is a 1x1 conv
/// over a 1x1 map with `in` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight_scale: f64,
    /// `(out_ch, in_ch * kernel * kernel)`.
    pub weights: QuantTensor,
    pub bias: Vec<i32>,
}

impl ComputeLayer {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ComputeLayer),
    Fc(ComputeLayer),
    Relu,
    Quantize { bits: u8, scale: f64 },
    Pool { size: usize },
}

impl Layer {
    pub fn compute(&self) -> Option<&ComputeLayer> {
        match self {
            Layer::Conv(c) | Layer::Fc(c) => Some(c),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Fc(_) => "fc",
            Layer::Relu => "relu",
            Layer::Quantize { .. } => "quantize",
            Layer::Pool { .. } => "pool",
        }
    }
}

/// Activation shape `(channels, height, width)`.
pub type Shape3 = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct NetDescription {
    pub input: InputSpec,
    pub layers: Vec<Layer>,
}

impl NetDescription {
    pub fn new(input: InputSpec, layers: Vec<Layer>) -> Result<Self> {
        let net = Self { input, layers };
        net.shapes()?;
        Ok(net)
    }

    /// Output shape after every layer; fails on the first incompatible layer.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        let mut cur = (self.input.channels, self.input.height, self.input.width);
        if cur.0 == 0 || cur.1 == 0 || cur.2 == 0 {
            return Err(Error::Shape("input has an empty dimension".into()));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = match l {
                Layer::Conv(c) => {
                    check_compute(i, c)?;
                    if c.in_ch != cur.0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv expects {} channels, input has {}",
                            c.in_ch, cur.0
                        )));
                    }
                    if c.stride == 0 || c.kernel > cur.1 + 2 * c.pad || c.kernel > cur.2 + 2 * c.pad {
                        return Err(Error::Shape(format!(
                            "layer {i}: kernel {} (stride {}, pad {}) does not fit {}x{}",
                            c.kernel, c.stride, c.pad, cur.1, cur.2
                        )));
                    }
                    (
                        c.out_ch,
                        (cur.1 + 2 * c.pad - c.kernel) / c.stride + 1,
                        (cur.2 + 2 * c.pad - c.kernel) / c.stride + 1,
                    )
                }
                Layer::Fc(c) => {
                    check_compute(i, c)?;
                    if c.in_ch != cur.0 * cur.1 * cur.2 {
                        return Err(Error::Shape(format!(
                            "layer {i}: fc expects {} inputs, got {}",
                            c.in_ch,
                            cur.0 * cur.1 * cur.2
                        )));
                    }
                    (c.out_ch, 1, 1)
                }
                Layer::Relu => cur,
                Layer::Quantize { bits, scale } => {
                    if *bits == 0 || *bits > crate::quant::MAX_BITS || !(*scale > 0.0) {
                        return Err(Error::Config(format!(
                            "layer {i}: bad quantize bits {bits} scale {scale}"
                        )));
                    }
                    cur
                }
                Layer::Pool { size } => {
                    if *size == 0 || *size > cur.1 || *size > cur.2 {
                        return Err(Error::Shape(format!(
                            "layer {i}: pool {size} does not fit {}x{}",
                            cur.1, cur.2
                        )));
                    }
                    (cur.0, cur.1 / size, cur.2 / size)
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn output_len(&self) -> Result<usize> {
        let s = self.shapes()?;
        let last = s.last().copied().unwrap_or((
            self.input.channels,
            self.input.height,
            self.input.width,
        ));
        Ok(last.0 * last.1 * last.2)
    }

    /// Indices of compute layers.
    pub fn compute_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].compute().is_some())
            .collect()
    }

    /// Real-valued scale of the final integer output.
    pub fn output_scale(&self) -> f64 {
        let mut s = self.input.scale;
        for l in &self.layers {
            match l {
                Layer::Conv(c) | Layer::Fc(c) => s *= c.weight_scale,
                Layer::Quantize { scale, .. } => s = *scale,
                _ => {}
            }
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawNet = serde_json::from_str(text).map_err(|e| fmt_err(e.to_string()))?;
        if raw.format != NET_FORMAT || raw.version != NET_VERSION {
            return Err(fmt_err(format!(
                "expected {NET_FORMAT} v{NET_VERSION}, got {} v{}",
                raw.format, raw.version
            )));
        }
        let layers = raw
            .layers
            .into_iter()
            .map(RawLayer::into_layer)
            .collect::<Result<Vec<_>>>()?;
        Self::new(raw.input, layers)
    }

    pub fn to_json(&self) -> String {
        let raw = RawNet {
            format: NET_FORMAT.into(),
            version: NET_VERSION,
            input: self.input,
            layers: self.layers.iter().map(RawLayer::from_layer).collect(),
        };
        serde_json::to_string_pretty(&raw).expect("net serializes")
    }
}

fn check_compute(i: usize, c: &ComputeLayer) -> Result<()> {
    if c.weights.shape() != [c.out_ch, c.patch_len()] || c.bias.len() != c.out_ch {
        return Err(Error::Shape(format!(
            "layer {i}: weights {:?} / bias {} do not match ({}, {})",
            c.weights.shape(),
            c.bias.len(),
            c.out_ch,
            c.patch_len()
        )));
    }
    if !(c.weight_scale > 0.0) {
        return Err(Error::Config(format!("layer {i}: weight_scale must be > 0")));
    }
    Ok(())
}

fn fmt_err(msg: String) -> Error {
    Error::Format {
        path: "<net>".into(),
        msg,
    }
}

#[derive(Serialize, Deserialize)]
struct RawNet {
    format: String,
    version: u32,
    input: InputSpec,
    layers: Vec<RawLayer>,
}

#[derive(Serialize, Deserialize)]
struct Blob {
    dtype: String,
    shape: Vec<usize>,
    data: String,
}

impl Blob {
    fn decode(&self) -> Result<Vec<i32>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| fmt_err(format!("bad base64: {e}")))?;
        let n: usize = self.shape.iter().product();
        let vals: Vec<i32> = match self.dtype.as_str() {
            "i8" => bytes.iter().map(|&b| b as i8 as i32).collect(),
            "i32" => {
                if bytes.len() % 4 != 0 {
                    return Err(fmt_err("i32 blob length not a multiple of 4".into()));
                }
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            }
            d => return Err(fmt_err(format!("unsupported dtype {d}"))),
        };
        if vals.len() != n {
            return Err(fmt_err(format!(
                "blob holds {} values, shape {:?} needs {n}",
                vals.len(),
                self.shape
            )));
        }
        Ok(vals)
    }

    fn encode(dtype: &str, shape: Vec<usize>, vals: &[i32]) -> Self {
        let bytes: Vec<u8> = match dtype {
            "i8" => vals.iter().map(|&v| v as i8 as u8).collect(),
            _ => vals.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        Self {
            dtype: dtype.into(),
            shape,
            data: STANDARD.encode(bytes),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum RawLayer {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weight_scale: f64,
        weights: Blob,
        bias: Blob,
    },
    Fc {
        #[serde(rename = "in")]
        in_: usize,
        out: usize,
        weight_scale: f64,
        weights: Blob,
        bias: Blob,
    },
    Relu,
    Quantize {
        bits: u8,
        scale: f64,
    },
    Pool {
        size: usize,
    },
}

fn weight_bits(dtype: &str) -> Result<u8> {
    match dtype {
        "i8" => Ok(8),
        "i32" => Ok(32),
        d => Err(fmt_err(format!("unsupported weight dtype {d}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn compute_from_raw(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weight_scale: f64,
    weights: Blob,
    bias: Blob,
) -> Result<ComputeLayer> {
    let bits = weight_bits(&weights.dtype)?;
    if bits > crate::quant::MAX_BITS {
        return Err(fmt_err("weights wider than 16 bits".into()));
    }
    let w = weights.decode()?;
    let patch = in_ch * kernel * kernel;
    let expected = if kernel == 1 && weights.shape.len() == 2 {
        vec![out_ch, in_ch]
    } else {
        vec![out_ch, in_ch, kernel, kernel]
    };
    if weights.shape != expected {
        return Err(Error::Shape(format!(
            "weights shape {:?}, expected {expected:?}",
            weights.shape
        )));
    }
    if bias.dtype != "i32" {
        return Err(fmt_err(format!("bias dtype must be i32, got {}", bias.dtype)));
    }
    Ok(ComputeLayer {
        in_ch,
        out_ch,
        kernel,
        stride,
        pad,
        weight_scale,
        weights: QuantTensor::new(vec![out_ch, patch], w, bits, true, weight_scale)?,
        bias: bias.decode()?,
    })
}

impl RawLayer {
    fn into_layer(self) -> Result<Layer> {
        Ok(match self {
            RawLayer::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                weight_scale,
                weights,
                bias,
            } => Layer::Conv(compute_from_raw(
                in_ch, out_ch, kernel, stride, pad, weight_scale, weights, bias,
            )?),
            RawLayer::Fc {
                in_,
                out,
                weight_scale,
                weights,
                bias,
            } => Layer::Fc(compute_from_raw(in_, out, 1, 1, 0, weight_scale, weights, bias)?),
            RawLayer::Relu => Layer::Relu,
            RawLayer::Quantize { bits, scale } => Layer::Quantize { bits, scale },
            RawLayer::Pool { size } => Layer::Pool { size },
        })
    }

    fn from_layer(l: &Layer) -> Self {
        let dtype = |c: &ComputeLayer| if c.weights.bits() <= 8 { "i8" } else { "i32" };
        match l {
            Layer::Conv(c) => RawLayer::Conv {
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.pad,
                weight_scale: c.weight_scale,
                weights: Blob::encode(
                    dtype(c),
                    vec![c.out_ch, c.in_ch, c.kernel, c.kernel],
                    c.weights.values(),
                ),
                bias: Blob::encode("i32", vec![c.out_ch], &c.bias),
            },
            Layer::Fc(c) => RawLayer::Fc {
                in_: c.in_ch,
                out: c.out_ch,
                weight_scale: c.weight_scale,
                weights: Blob::encode(dtype(c), vec![c.out_ch, c.in_ch], c.weights.values()),
                bias: Blob::encode("i32", vec![c.out_ch], &c.bias),
            },
            Layer::Relu => RawLayer::Relu,
            Layer::Quantize { bits, scale } => RawLayer::Quantize {
                bits: *bits,
                scale: *scale,
            },
            Layer::Pool { size } => RawLayer::Pool { size: *size },
        }
    }
}
