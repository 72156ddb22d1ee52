//! Per-pixel boundary maps of a convolutional layer.
//!
//! A pixel whose patch spans several column tiles or channel groups records the
//! largest (least precise) boundary among its invocations.

use serde::{Deserialize, Serialize};

use crate::cim_macro::MacroConfig;
use crate::partition::max_boundary;
use crate::{Error, Result};

use super::infer::CompiledNet;
use super::net::Layer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencyGrid {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub boundaries: Vec<usize>,
    /// Largest legal boundary, used as the PGM maximum.
    pub max_value: usize,
}

impl SaliencyGrid {
    pub fn get(&self, row: usize, col: usize) -> usize {
        self.boundaries[row * self.width + col]
    }

    /// ASCII PGM; grey level equals the boundary.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n{}\n", self.width, self.height, self.max_value.max(1));
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| self.get(r, c).to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    /// Header `row,col,boundary`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,boundary\n");
        for r in 0..self.height {
            for c in 0..self.width {
                s.push_str(&format!("{r},{c},{}\n", self.get(r, c)));
            }
        }
        s
    }

    /// Mean boundary over the pixels where `mask(row, col)` holds.
    pub fn mean_where(&self, mask: impl Fn(usize, usize) -> bool) -> Option<f64> {
        let v: Vec<usize> = (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| mask(r, c))
            .map(|(r, c)| self.get(r, c))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<usize>() as f64 / v.len() as f64)
    }
}

/// Full-scale square over the central half of each side, zero elsewhere.
pub fn bright_square(channels: usize, height: usize, width: usize) -> Vec<u8> {
    let inside = |v: usize, n: usize| v >= n / 4 && v < n - n / 4;
    let mut img = Vec::with_capacity(channels * height * width);
    for _ in 0..channels {
        for r in 0..height {
            for c in 0..width {
                img.push(if inside(r, height) && inside(c, width) { 255 } else { 0 });
            }
        }
    }
    img
}

pub fn saliency_map(
    net: &CompiledNet,
    image: &[u8],
    image_id: u64,
    layer: usize,
    cfg: &MacroConfig,
    seed: u64,
) -> Result<SaliencyGrid> {
    let d = net.net();
    match d.layers.get(layer) {
        Some(Layer::Conv(_)) => {}
        Some(l) => {
            return Err(Error::Usage(format!(
                "layer {layer} is {}, not convolutional",
                l.kind()
            )))
        }
        None => {
            return Err(Error::Usage(format!(
                "layer {layer} out of range ({} layers)",
                d.layers.len()
            )))
        }
    }
    let (_, height, width) = d.shapes()?[layer];
    let slot = d.compute_layers().iter().position(|&i| i == layer).expect("conv is compute");
    let run = net.run_image(image, image_id, cfg, seed)?;
    let boundaries = run.maps[slot].clone().expect("conv layers record maps");
    Ok(SaliencyGrid {
        layer,
        height,
        width,
        boundaries,
        max_value: max_boundary(cfg.w as usize, cfg.a as usize, cfg.s),
    })
}
