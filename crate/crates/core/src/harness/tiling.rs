//! Mapping of compute layers onto the macro: each output pixel's patch is cut into
//! column tiles of at most `cols` inputs, output channels into groups of
//! `logical_rows`. A tile's columns beyond the patch stay idle; a short last group
//! is padded with zero-weight rows. Tile partial sums and the bias are added
//! exactly afterwards.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::cim_macro::{load_weights, run_mac, MacResult, MacroConfig, MacroState};
use crate::quant::QuantTensor;
use crate::rng::derive_seed;
use crate::scheduler::EventClass;
use crate::{Error, Result};

use super::net::{ComputeLayer, Layer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub col_tiles: Vec<Range<usize>>,
    /// Output-channel ranges, one per invocation group.
    pub groups: Vec<Range<usize>>,
    pub rows_per_group: usize,
}

impl TilePlan {
    pub fn invocations_per_pixel(&self) -> usize {
        self.col_tiles.len() * self.groups.len()
    }

    /// Flat tile id of `(group, col_tile)` at output pixel `pixel`.
    pub fn tile_id(&self, pixel: usize, group: usize, col_tile: usize) -> u64 {
        ((pixel * self.groups.len() + group) * self.col_tiles.len() + col_tile) as u64
    }
}

fn split(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(size))
        .map(|i| i * size..((i + 1) * size).min(n))
        .collect()
}

pub fn map_layer(layer: &Layer, cfg: &MacroConfig) -> Result<TilePlan> {
    let c = layer.compute().ok_or_else(|| {
        Error::Usage(format!("{} layer has no dot products to map", layer.kind()))
    })?;
    plan_for(c, cfg)
}

fn plan_for(c: &ComputeLayer, cfg: &MacroConfig) -> Result<TilePlan> {
    if c.patch_len() == 0 || c.out_ch == 0 {
        return Err(Error::Shape("compute layer is empty".into()));
    }
    Ok(TilePlan {
        col_tiles: split(c.patch_len(), cfg.cols),
        groups: split(c.out_ch, cfg.logical_rows()),
        rows_per_group: cfg.logical_rows(),
    })
}

/// Event counts and boundary usage accumulated over invocations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub invocations: u64,
    pub boundary_counts: BTreeMap<usize, u64>,
    pub events: BTreeMap<EventClass, u64>,
    pub makespan: f64,
}

impl Tally {
    pub fn record(&mut self, r: &MacResult) {
        self.invocations += 1;
        *self.boundary_counts.entry(r.chosen_boundary).or_insert(0) += 1;
        for (&c, &n) in &r.schedule.events {
            *self.events.entry(c).or_insert(0) += n;
        }
        self.makespan += r.schedule.makespan;
    }

    pub fn merge(&mut self, o: &Tally) {
        self.invocations += o.invocations;
        for (&b, &n) in &o.boundary_counts {
            *self.boundary_counts.entry(b).or_insert(0) += n;
        }
        for (&c, &n) in &o.events {
            *self.events.entry(c).or_insert(0) += n;
        }
        self.makespan += o.makespan;
    }
}

/// A compute layer with its weights resident, one macro state per `(group, tile)`.
#[derive(Debug, Clone)]
pub struct CompiledLayer {
    pub plan: TilePlan,
    states: Vec<MacroState>,
    bias: Vec<i32>,
    out_ch: usize,
}

impl CompiledLayer {
    pub fn new(c: &ComputeLayer, cfg: &MacroConfig) -> Result<Self> {
        let plan = plan_for(c, cfg)?;
        let mut states = Vec::with_capacity(plan.invocations_per_pixel());
        for g in &plan.groups {
            for t in &plan.col_tiles {
                let mut vals = Vec::with_capacity(plan.rows_per_group * t.len());
                for r in 0..plan.rows_per_group {
                    let o = g.start + r;
                    if o < g.end {
                        vals.extend_from_slice(&c.weights.row(o)?[t.clone()]);
                    } else {
                        vals.extend(std::iter::repeat_n(0, t.len()));
                    }
                }
                let w = QuantTensor::new(
                    vec![plan.rows_per_group, t.len()],
                    vals,
                    c.weights.bits(),
                    c.weights.is_signed(),
                    c.weights.scale(),
                )?;
                states.push(load_weights(&w, cfg)?);
            }
        }
        Ok(Self {
            plan,
            states,
            bias: c.bias.clone(),
            out_ch: c.out_ch,
        })
    }

    /// All `out_ch` outputs of one patch plus the boundary of every invocation
    /// (group-major). `seed` is the layer-level seed; each tile derives its own.
    pub fn run_patch(
        &self,
        patch: &[i32],
        pixel: usize,
        cfg: &MacroConfig,
        seed: u64,
        tally: &mut Tally,
    ) -> Result<(Vec<i64>, Vec<usize>)> {
        let mut out: Vec<i64> = self.bias.iter().map(|&b| b as i64).collect();
        let mut bounds = Vec::with_capacity(self.states.len());
        let a = cfg.a;
        for (gi, g) in self.plan.groups.iter().enumerate() {
            for (ti, t) in self.plan.col_tiles.iter().enumerate() {
                let acts = QuantTensor::unsigned(patch[t.clone()].to_vec(), a)?;
                let st = &self.states[gi * self.plan.col_tiles.len() + ti];
                let s = derive_seed(seed, &[self.plan.tile_id(pixel, gi, ti)]);
                let r = run_mac(st, &acts, cfg, s)?;
                for (k, o) in g.clone().enumerate() {
                    out[o] += r.outputs[k];
                }
                bounds.push(r.chosen_boundary);
                tally.record(&r);
            }
        }
        debug_assert_eq!(out.len(), self.out_ch);
        Ok((out, bounds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(in_ch: usize, out_ch: usize) -> Layer {
        let n = in_ch * 9;
        Layer::Conv(ComputeLayer {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            pad: 1,
            weight_scale: 1.0,
            weights: QuantTensor::new(vec![out_ch, n], vec![1; out_ch * n], 8, true, 1.0).unwrap(),
            bias: vec![0; out_ch],
        })
    }

    #[test]
    fn plan_examples() {
        let cfg = MacroConfig::default();
        let p = map_layer(&conv(16, 8), &cfg).unwrap();
        assert_eq!(p.col_tiles, vec![0..144]);
        let p = map_layer(&conv(32, 8), &cfg).unwrap();
        assert_eq!(p.col_tiles, vec![0..144, 144..288]);
        let p = map_layer(&conv(1, 20), &cfg).unwrap();
        assert_eq!(p.groups, vec![0..8, 8..16, 16..20]);
        assert!(matches!(map_layer(&Layer::Relu, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn tiles_sum_exactly() {
        let cfg = MacroConfig::default().with_fixed(0);
        let Layer::Conv(c) = conv(32, 20) else { unreachable!() };
        let cl = CompiledLayer::new(&c, &cfg).unwrap();
        let patch: Vec<i32> = (0..288).map(|i| (i * 7 % 256) as i32).collect();
        let mut t = Tally::default();
        let (out, bounds) = cl.run_patch(&patch, 0, &cfg, 1, &mut t).unwrap();
        let expect: i64 = patch.iter().map(|&v| v as i64).sum();
        assert!(out.iter().all(|&o| o == expect));
        assert_eq!(bounds, vec![0; 6]);
        assert_eq!(t.invocations, 6);
    }
}
