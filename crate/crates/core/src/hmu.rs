//! One Hybrid MAC Unit row: every one-bit partial sum `p_ij = popcount(W_i & A_j)`
//! is formed once, then routed to the exact accumulator, the analog groups, or
//! dropped according to the partition.
//!
//! An analog group's charge `sum_c W_i[c] * level_c` equals
//! `sum_{j in group} 2^(j - j_lo) * p_ij`, so the DAC levels never need to be
//! materialized per column on this path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acim::{amac_from_charge, decode_amac, AnalogParams, Amac};
use crate::dcim::{nq_quantize, Dmac};
use crate::partition::{AnalogGroup, Cell, Partition};
use crate::quant::BitPlanes;
use crate::{Error, Result};

/// One-bit partial sums of a single dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPartials {
    w: usize,
    a: usize,
    cols: usize,
    weight_msb_negative: bool,
    act_msb_negative: bool,
    sums: Vec<u32>,
}

impl RowPartials {
    pub fn new(acts: &BitPlanes, weights: &BitPlanes) -> Result<Self> {
        if acts.len() != weights.len() {
            return Err(Error::Shape(format!(
                "activation length {} != weight length {}",
                acts.len(),
                weights.len()
            )));
        }
        let w = weights.bits() as usize;
        let a = acts.bits() as usize;
        let mut sums = Vec::with_capacity(w * a);
        for i in 0..w {
            for j in 0..a {
                sums.push(weights.plane(i).and_count(acts.plane(j)));
            }
        }
        Ok(Self {
            w,
            a,
            cols: acts.len(),
            weight_msb_negative: weights.msb_negative(),
            act_msb_negative: acts.msb_negative(),
            sums,
        })
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn a(&self) -> usize {
        self.a
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, cell: Cell) -> u32 {
        self.sums[cell.weight_bit * self.a + cell.act_bit]
    }

    pub fn dmac(&self, cell: Cell) -> Dmac {
        Dmac {
            value: self.get(cell),
            active_cols: self.cols as u32,
            order: cell.order(),
        }
    }

    /// Sign of a cell's contribution under two's complement planes.
    pub fn sign(&self, cell: Cell) -> i64 {
        let wneg = self.weight_msb_negative && cell.weight_bit + 1 == self.w;
        let aneg = self.act_msb_negative && cell.act_bit + 1 == self.a;
        if wneg ^ aneg {
            -1
        } else {
            1
        }
    }

    /// Exact contribution `sign * 2^k * p_ij` of one cell.
    pub fn exact_contribution(&self, cell: Cell) -> i64 {
        self.sign(cell) * ((self.get(cell) as i64) << cell.order())
    }

    /// Ideal charge of an analog group in level units.
    pub fn group_charge(&self, g: &AnalogGroup) -> u64 {
        (g.act_lo..=g.act_hi)
            .map(|j| (self.get(Cell::new(g.weight_bit, j)) as u64) << (j - g.act_lo))
            .sum()
    }

    /// Exact value of an analog group's cells, before any conversion.
    pub fn group_exact(&self, g: &AnalogGroup) -> i64 {
        g.cells().map(|c| self.exact_contribution(c)).sum()
    }
}

/// 3-bit evaluator codes of the eval cells, in partition (cycle) order.
pub fn eval_codes(partials: &RowPartials, partition: &Partition) -> Result<Vec<u8>> {
    partition
        .eval_cells
        .iter()
        .map(|&c| nq_quantize(&partials.dmac(c)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOutcome {
    pub output: i64,
    /// Sum over eval and digital cells.
    pub digital_part: i64,
    /// Sum of decoded analog groups.
    pub analog_part: i64,
    pub amacs: Vec<Amac>,
}

/// Computes one hybrid dot product under `partition`.
pub fn hybrid_row<R: Rng + ?Sized>(
    partials: &RowPartials,
    partition: &Partition,
    params: &AnalogParams,
    noise: &mut R,
) -> Result<RowOutcome> {
    if partials.w != partition.w || partials.a != partition.a {
        return Err(Error::Shape(format!(
            "partials are {}x{}, partition is {}x{}",
            partials.w, partials.a, partition.w, partition.a
        )));
    }
    if partials.act_msb_negative && !partition.analog_groups.is_empty() {
        return Err(Error::Config(
            "analog path needs unsigned activations".into(),
        ));
    }
    let digital_part: i64 = partition
        .exact_cells()
        .map(|&c| partials.exact_contribution(c))
        .sum();
    let mut analog_part = 0i64;
    let mut amacs = Vec::with_capacity(partition.analog_groups.len());
    for g in &partition.analog_groups {
        let charge = partials.group_charge(g);
        let m = amac_from_charge(charge, partials.cols, *g, params, noise)?;
        let sign = partials.sign(Cell::new(g.weight_bit, g.act_lo));
        analog_part += sign * decode_amac(&m, partials.cols, params);
        amacs.push(m);
    }
    Ok(RowOutcome {
        output: digital_part + analog_part,
        digital_part,
        analog_part,
        amacs,
    })
}

/// Worst-case magnitude lost to discarded cells: `sum_{k < B-V} 2^k * count_k * cols`.
pub fn discard_bound(partition: &Partition, cols: usize) -> i64 {
    partition
        .discard_cells
        .iter()
        .map(|c| (cols as i64) << c.order())
        .sum()
}

/// Worst-case conversion error of all analog groups: one ADC step
/// (`cols * (2^width - 1) / (2^adc_bits - 1)` partial-sum units) per group,
/// scaled by the group significance.
pub fn adc_step_bound(partition: &Partition, cols: usize, params: &AnalogParams) -> f64 {
    partition
        .analog_groups
        .iter()
        .map(|g| {
            let full = (cols as f64) * ((1u64 << g.width()) - 1) as f64;
            full / params.adc_max_code() as f64 * (1u64 << g.order()) as f64
        })
        .sum()
}
