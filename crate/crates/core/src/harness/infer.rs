//! Integer network inference, either exact or through the simulated macro.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::LossOracle;
use crate::cim_macro::{MacMode, MacroConfig};
use crate::ose::BoundaryTable;
use crate::rng::derive_seed;
use crate::scheduler::{EnergyModel, EnergyReport, Schedule};
use crate::{Error, Result};

use super::dataset::Dataset;
use super::net::{ComputeLayer, Layer, NetDescription};
use super::tiling::{CompiledLayer, Tally};

/// Activation map `(channels, height, width)` in row-major order.
#[derive(Debug, Clone)]
struct Act {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<i64>,
}

impl Act {
    fn at(&self, c: usize, y: isize, x: isize) -> i64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            0
        } else {
            self.v[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

fn patch_at(a: &Act, l: &ComputeLayer, oy: usize, ox: usize) -> Result<Vec<i32>> {
    let mut p = Vec::with_capacity(l.patch_len());
    for c in 0..l.in_ch {
        for ky in 0..l.kernel {
            for kx in 0..l.kernel {
                let y = (oy * l.stride + ky) as isize - l.pad as isize;
                let x = (ox * l.stride + kx) as isize - l.pad as isize;
                p.push(to_i32(a.at(c, y, x))?);
            }
        }
    }
    Ok(p)
}

fn to_i32(v: i64) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::Range {
        value: v,
        bits: 32,
        kind: "signed",
    })
}

fn requantize(acc: i64, mult: f64, bits: u8) -> i64 {
    let q = (acc as f64 * mult + 0.5).floor();
    q.clamp(0.0, ((1u64 << bits) - 1) as f64) as i64
}

/// Per-image outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRun {
    pub logits: Vec<i64>,
    /// One tally per compute layer.
    pub tallies: Vec<Tally>,
    /// Per compute layer: for conv layers, the largest boundary of each output pixel.
    pub maps: Vec<Option<Vec<usize>>>,
}

enum Engine<'a> {
    Exact,
    Macro {
        layers: &'a [Option<CompiledLayer>],
        cfg: &'a MacroConfig,
        seed: u64,
    },
}

fn forward(net: &NetDescription, image: &[u8], engine: &Engine) -> Result<ImageRun> {
    let inp = net.input;
    if image.len() != inp.channels * inp.height * inp.width {
        return Err(Error::Shape(format!(
            "image has {} values, network expects {}x{}x{}",
            image.len(),
            inp.channels,
            inp.height,
            inp.width
        )));
    }
    let mut a = Act {
        c: inp.channels,
        h: inp.height,
        w: inp.width,
        v: image.iter().map(|&p| p as i64).collect(),
    };
    let mut scale = inp.scale;
    let mut tallies = Vec::new();
    let mut maps = Vec::new();
    for (li, layer) in net.layers.iter().enumerate() {
        a = match layer {
            Layer::Conv(c) | Layer::Fc(c) => {
                let is_conv = matches!(layer, Layer::Conv(_));
                let (oh, ow) = if is_conv {
                    (
                        (a.h + 2 * c.pad - c.kernel) / c.stride + 1,
                        (a.w + 2 * c.pad - c.kernel) / c.stride + 1,
                    )
                } else {
                    (1, 1)
                };
                let mut out = vec![0i64; c.out_ch * oh * ow];
                let mut tally = Tally::default();
                let mut map = Vec::with_capacity(oh * ow);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let patch = if is_conv {
                            patch_at(&a, c, oy, ox)?
                        } else {
                            a.v.iter().map(|&v| to_i32(v)).collect::<Result<_>>()?
                        };
                        let pixel = oy * ow + ox;
                        let vals = match engine {
                            Engine::Exact => exact_patch(c, &patch)?,
                            Engine::Macro { layers, cfg, seed } => {
                                let cl = layers[li].as_ref().expect("compute layer compiled");
                                let (vals, bounds) = cl.run_patch(
                                    &patch,
                                    pixel,
                                    cfg,
                                    derive_seed(*seed, &[li as u64]),
                                    &mut tally,
                                )?;
                                map.push(bounds.into_iter().max().unwrap_or(0));
                                vals
                            }
                        };
                        for (o, v) in vals.into_iter().enumerate() {
                            out[o * oh * ow + pixel] = v;
                        }
                    }
                }
                scale *= c.weight_scale;
                tallies.push(tally);
                maps.push((is_conv && !map.is_empty()).then_some(map));
                Act {
                    c: c.out_ch,
                    h: oh,
                    w: ow,
                    v: out,
                }
            }
            Layer::Relu => {
                a.v.iter_mut().for_each(|v| *v = (*v).max(0));
                a
            }
            Layer::Quantize { bits, scale: s_out } => {
                let mult = scale / s_out;
                a.v.iter_mut().for_each(|v| *v = requantize(*v, mult, *bits));
                scale = *s_out;
                a
            }
            Layer::Pool { size } => {
                let (oh, ow) = (a.h / size, a.w / size);
                let mut v = Vec::with_capacity(a.c * oh * ow);
                for c in 0..a.c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut m = i64::MIN;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    m = m.max(a.at(c, (y * size + dy) as isize, (x * size + dx) as isize));
                                }
                            }
                            v.push(m);
                        }
                    }
                }
                Act { c: a.c, h: oh, w: ow, v }
            }
        };
    }
    Ok(ImageRun {
        logits: a.v,
        tallies,
        maps,
    })
}

fn exact_patch(c: &ComputeLayer, patch: &[i32]) -> Result<Vec<i64>> {
    (0..c.out_ch)
        .map(|o| {
            let w = c.weights.row(o)?;
            Ok(c.bias[o] as i64
                + w.iter().zip(patch).map(|(&w, &x)| w as i64 * x as i64).sum::<i64>())
        })
        .collect()
}

/// Untiled pure-integer inference.
pub fn reference_infer(net: &NetDescription, image: &[u8]) -> Result<Vec<i64>> {
    Ok(forward(net, image, &Engine::Exact)?.logits)
}

/// A network with weights resident in macro tiles.
#[derive(Debug, Clone)]
pub struct CompiledNet {
    net: NetDescription,
    layers: Vec<Option<CompiledLayer>>,
}

impl CompiledNet {
    pub fn new(net: &NetDescription, cfg: &MacroConfig) -> Result<Self> {
        cfg.validate()?;
        net.shapes()?;
        if net.input.bits > cfg.a {
            return Err(Error::Config(format!(
                "{}-bit input does not fit {}-bit activations",
                net.input.bits, cfg.a
            )));
        }
        for l in &net.layers {
            if let Layer::Quantize { bits, .. } = l {
                if *bits > cfg.a {
                    return Err(Error::Config(format!(
                        "{bits}-bit activations do not fit the {}-bit macro",
                        cfg.a
                    )));
                }
            }
        }
        let layers = net
            .layers
            .iter()
            .map(|l| l.compute().map(|c| CompiledLayer::new(c, cfg)).transpose())
            .collect::<Result<_>>()?;
        Ok(Self {
            net: net.clone(),
            layers,
        })
    }

    pub fn net(&self) -> &NetDescription {
        &self.net
    }

    /// Runs one image; `image_id` keys its noise streams.
    pub fn run_image(
        &self,
        image: &[u8],
        image_id: u64,
        cfg: &MacroConfig,
        seed: u64,
    ) -> Result<ImageRun> {
        forward(
            &self.net,
            image,
            &Engine::Macro {
                layers: &self.layers,
                cfg,
                seed: derive_seed(seed, &[image_id]),
            },
        )
    }

    pub fn run_all(&self, data: &Dataset, cfg: &MacroConfig, seed: u64) -> Result<Vec<ImageRun>> {
        if data.is_empty() {
            return Err(Error::Degenerate("dataset is empty".into()));
        }
        (0..data.len())
            .into_par_iter()
            .map(|i| self.run_image(data.image(i), i as u64, cfg, seed))
            .collect()
    }

    pub fn infer(&self, data: &Dataset, cfg: &MacroConfig, seed: u64) -> Result<InferenceReport> {
        let runs = self.run_all(data, cfg, seed)?;
        build_report(&self.net, data, &runs, cfg, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// Index into the network's layer list.
    pub layer: usize,
    pub kind: String,
    pub invocations: u64,
    pub boundary_counts: BTreeMap<usize, u64>,
    pub boundary_proportions: BTreeMap<usize, f64>,
    pub energy: EnergyReport,
    pub mean_makespan: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub images: usize,
    pub top1: f64,
    pub mean_loss: f64,
    pub mode: MacMode,
    pub seed: u64,
    pub invocations: u64,
    /// Mean makespan per macro invocation.
    pub mean_makespan: f64,
    pub energy_per_image: f64,
    pub total_energy: EnergyReport,
    pub layers: Vec<LayerReport>,
    pub predictions: Vec<u8>,
}

pub fn argmax(v: &[i64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy of real-valued logits `scale * logits`.
pub fn cross_entropy(logits: &[i64], scale: f64, label: usize) -> f64 {
    let z: Vec<f64> = logits.iter().map(|&l| l as f64 * scale).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

fn energy_of(events: &BTreeMap<crate::scheduler::EventClass, u64>, m: &EnergyModel) -> Result<EnergyReport> {
    let s = Schedule {
        events: events.clone(),
        ..Schedule::empty()
    };
    crate::scheduler::account_energy(&s, m)
}

fn build_report(
    net: &NetDescription,
    data: &Dataset,
    runs: &[ImageRun],
    cfg: &MacroConfig,
    seed: u64,
) -> Result<InferenceReport> {
    let scale = net.output_scale();
    let compute = net.compute_layers();
    let mut tallies = vec![Tally::default(); compute.len()];
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(runs.len());
    for (i, r) in runs.iter().enumerate() {
        let label = data.label(i) as usize;
        if label >= r.logits.len() {
            return Err(Error::Shape(format!(
                "label {label} outside {} logits",
                r.logits.len()
            )));
        }
        let p = argmax(&r.logits);
        correct += (p == label) as usize;
        predictions.push(p as u8);
        loss += cross_entropy(&r.logits, scale, label);
        for (t, x) in tallies.iter_mut().zip(&r.tallies) {
            t.merge(x);
        }
    }
    let mut layers = Vec::with_capacity(compute.len());
    let mut total_energy = EnergyReport::default();
    let mut total = Tally::default();
    for (&li, t) in compute.iter().zip(&tallies) {
        let energy = energy_of(&t.events, &cfg.energy)?;
        total_energy.add(&energy);
        total.merge(t);
        let n = t.invocations.max(1) as f64;
        layers.push(LayerReport {
            layer: li,
            kind: net.layers[li].kind().into(),
            invocations: t.invocations,
            boundary_counts: t.boundary_counts.clone(),
            boundary_proportions: t
                .boundary_counts
                .iter()
                .map(|(&b, &c)| (b, c as f64 / n))
                .collect(),
            energy,
            mean_makespan: t.makespan / n,
        });
    }
    let n = runs.len() as f64;
    Ok(InferenceReport {
        images: runs.len(),
        top1: correct as f64 / n,
        mean_loss: loss / n,
        mode: cfg.mode,
        seed,
        invocations: total.invocations,
        mean_makespan: total.makespan / total.invocations.max(1) as f64,
        energy_per_image: total_energy.total / n,
        total_energy,
        layers,
        predictions,
    })
}

pub fn infer(
    net: &NetDescription,
    data: &Dataset,
    cfg: &MacroConfig,
    seed: u64,
) -> Result<InferenceReport> {
    CompiledNet::new(net, cfg)?.infer(data, cfg, seed)
}

impl InferenceReport {
    /// Header `layer,kind,invocations,energy,mean_makespan,boundary,count,proportion`;
    /// one row per layer and used boundary.
    pub fn layers_csv(&self) -> String {
        let mut s = String::from("layer,kind,invocations,energy,mean_makespan,boundary,count,proportion\n");
        for l in &self.layers {
            for (b, c) in &l.boundary_counts {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    l.layer,
                    l.kind,
                    l.invocations,
                    l.energy.total,
                    l.mean_makespan,
                    b,
                    c,
                    l.boundary_proportions[b]
                ));
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: usize,
    pub kind: String,
    pub proportions: BTreeMap<usize, f64>,
}

/// Boundary usage proportions per compute layer.
pub fn boundary_histogram(report: &InferenceReport) -> Vec<LayerHistogram> {
    report
        .layers
        .iter()
        .map(|l| {
            let n: u64 = l.boundary_counts.values().sum();
            LayerHistogram {
                layer: l.layer,
                kind: l.kind.clone(),
                proportions: l
                    .boundary_counts
                    .iter()
                    .map(|(&b, &c)| (b, c as f64 / n.max(1) as f64))
                    .collect(),
            }
        })
        .collect()
}

/// Header `layer,kind,boundary,proportion`, one row per candidate of `table`.
pub fn histogram_csv(h: &[LayerHistogram], table: &BoundaryTable) -> String {
    let mut s = String::from("layer,kind,boundary,proportion\n");
    for l in h {
        for b in table.candidates() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                l.layer,
                l.kind,
                b,
                l.proportions.get(b).copied().unwrap_or(0.0)
            ));
        }
    }
    s
}

/// Mean cross-entropy of a labelled set under a boundary table.
pub struct ImageLoss<'a> {
    net: &'a CompiledNet,
    data: &'a Dataset,
    cfg: MacroConfig,
    seed: u64,
}

impl<'a> ImageLoss<'a> {
    pub fn new(net: &'a CompiledNet, data: &'a Dataset, cfg: &MacroConfig, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Degenerate("empty calibration set".into()));
        }
        Ok(Self {
            net,
            data,
            cfg: cfg.clone().with_mode(MacMode::Osa),
            seed,
        })
    }

    pub fn report(&self, table: &BoundaryTable) -> Result<InferenceReport> {
        let mut cfg = self.cfg.clone();
        cfg.boundary_table = table.clone();
        self.net.infer(self.data, &cfg, self.seed)
    }
}

impl LossOracle for ImageLoss<'_> {
    fn eval_loss(&self, table: &BoundaryTable) -> Result<f64> {
        Ok(self.report(table)?.mean_loss)
    }

    fn precision(&self) -> Option<(usize, usize, usize)> {
        Some((self.cfg.w as usize, self.cfg.a as usize, self.cfg.s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::net::tests::tiny_net;

    fn tiny_data() -> Dataset {
        let px: Vec<u8> = (0..16 * 6).map(|i| (i * 37 % 256) as u8).collect();
        Dataset::new((1, 4, 4), px, vec![0, 1, 2, 0, 1, 2]).unwrap()
    }

    #[test]
    fn full_digital_matches_reference() {
        let net = tiny_net();
        let cfg = MacroConfig::default().with_fixed(0);
        let cn = CompiledNet::new(&net, &cfg).unwrap();
        let data = tiny_data();
        for i in 0..data.len() {
            let run = cn.run_image(data.image(i), i as u64, &cfg, 7).unwrap();
            assert_eq!(run.logits, reference_infer(&net, data.image(i)).unwrap());
        }
    }

    #[test]
    fn reference_by_hand() {
        // conv, relu, requantize, pool, fc written out directly
        let net = tiny_net();
        let img: Vec<u8> = (0..16).map(|i| (i * 13) as u8).collect();
        let (Layer::Conv(c), Layer::Fc(f)) = (&net.layers[0], &net.layers[4]) else { unreachable!() };
        let mut conv = vec![0i64; 2 * 16];
        for o in 0..2 {
            for y in 0..4i64 {
                for x in 0..4i64 {
                    let mut acc = c.bias[o] as i64;
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (iy, ix) = (y + ky - 1, x + kx - 1);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                acc += c.weights.values()[o * 9 + (ky * 3 + kx) as usize] as i64
                                    * img[(iy * 4 + ix) as usize] as i64;
                            }
                        }
                    }
                    let mult = (net.input.scale * c.weight_scale) / 0.05;
                    let q = ((acc.max(0) as f64) * mult + 0.5).floor().clamp(0.0, 255.0) as i64;
                    conv[o * 16 + (y * 4 + x) as usize] = q;
                }
            }
        }
        let mut pooled = Vec::new();
        for o in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| conv[o * 16 + (2 * y + dy) * 4 + 2 * x + dx])
                        .max()
                        .unwrap();
                    pooled.push(m);
                }
            }
        }
        let logits: Vec<i64> = (0..3)
            .map(|o| {
                f.bias[o] as i64
                    + (0..8).map(|i| f.weights.values()[o * 8 + i] as i64 * pooled[i]).sum::<i64>()
            })
            .collect();
        assert_eq!(reference_infer(&net, &img).unwrap(), logits);
    }

    #[test]
    fn report_invariants() {
        let net = tiny_net();
        let cfg = MacroConfig::default();
        let data = tiny_data();
        let r = infer(&net, &data, &cfg, 3).unwrap();
        assert_eq!(r, infer(&net, &data, &cfg, 3).unwrap());
        for l in &r.layers {
            let s: f64 = l.boundary_proportions.values().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(l.boundary_counts.keys().all(|b| cfg.boundary_table.index_of(*b).is_some()));
        }
        let fixed = infer(&net, &data, &cfg.clone().with_fixed(0), 3).unwrap();
        for h in boundary_histogram(&fixed) {
            assert_eq!(h.proportions.len(), 1);
            assert_eq!(h.proportions[&0], 1.0);
        }
    }

    #[test]
    fn energy_is_sum_of_invocations() {
        let net = tiny_net();
        let cfg = MacroConfig::default();
        let cn = CompiledNet::new(&net, &cfg).unwrap();
        let data = tiny_data();
        // rebuild every invocation's report from its boundary and sum them
        let report = cn.infer(&data.take(1), &cfg, 1).unwrap();
        let mut direct = EnergyReport::default();
        let one = cn.run_image(data.image(0), 0, &cfg, 1).unwrap();
        for t in &one.tallies {
            for (&b, &n) in &t.boundary_counts {
                let s = crate::scheduler::build_schedule(&cfg.partition(b).unwrap(), &cfg.timing);
                let e = crate::scheduler::account_energy(&s, &cfg.energy).unwrap();
                for _ in 0..n {
                    direct.add(&e);
                }
            }
        }
        assert!((report.total_energy.total - direct.total).abs() <= 1e-9 * direct.total);
    }

    #[test]
    fn empty_data_is_degenerate() {
        let net = tiny_net();
        let cfg = MacroConfig::default();
        let empty = Dataset::new((1, 4, 4), vec![], vec![]).unwrap();
        assert!(matches!(infer(&net, &empty, &cfg, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cross_entropy_known() {
        let ce = cross_entropy(&[0, 0], 1.0, 0);
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1000, 0], 1.0, 0) < 1e-12);
        assert_eq!(argmax(&[3, 7, 7, 1]), 1);
    }
}
