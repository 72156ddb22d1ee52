//! One macro invocation: saliency evaluation on the top output orders, boundary
//! selection, then hybrid computation of the remaining cells on every HMU.
//!
//! All HMUs share a single boundary per invocation because the evaluator score is
//! macro-global.

use serde::{Deserialize, Serialize};

use crate::acim::AnalogParams;
use crate::dcim::{nq_quantize, reference_mac, DEFAULT_COLS};
use crate::hmu::{hybrid_row, RowOutcome, RowPartials};
use crate::ose::{saliency_accumulate, select_boundary, BoundaryTable, SaliencyScore};
use crate::partition::{check_partition_args, eval_min_order, partition_grid, Partition};
use crate::quant::{decompose_bits, BitPlanes, QuantTensor};
use crate::rng;
use crate::scheduler::{
    account_energy, build_schedule, EnergyModel, EnergyReport, Schedule, TimingParams,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// One weight of up to 8 bits per HCIMA.
    Single8,
    /// Two weights of up to 4 bits per HCIMA; each HMU produces two outputs.
    Dual4,
}

impl WeightMode {
    pub fn weights_per_hcima(&self) -> usize {
        match self {
            WeightMode::Single8 => 1,
            WeightMode::Dual4 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MacMode {
    Fixed { boundary: usize },
    Osa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroConfig {
    pub rows: usize,
    pub cols: usize,
    pub hmus: usize,
    pub cells_per_hcima: usize,
    pub weight_mode: WeightMode,
    pub w: u8,
    pub a: u8,
    pub s: usize,
    pub window: usize,
    pub boundary_table: BoundaryTable,
    pub analog: AnalogParams,
    pub timing: TimingParams,
    pub energy: EnergyModel,
    pub mode: MacMode,
}

/// Candidate boundaries of the shipped table.
pub const DEFAULT_CANDIDATES: [usize; 4] = [5, 7, 9, 11];
/// Thresholds of the shipped table, from `hcim calibrate` on the bundled digits set.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [21.0, 0.984375, 0.0];

pub fn default_boundary_table() -> BoundaryTable {
    BoundaryTable::new(DEFAULT_CANDIDATES.to_vec(), DEFAULT_THRESHOLDS.to_vec())
        .expect("shipped table is valid")
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: DEFAULT_COLS,
            hmus: 8,
            cells_per_hcima: 8,
            weight_mode: WeightMode::Single8,
            w: 8,
            a: 8,
            s: 2,
            window: crate::partition::DEFAULT_WINDOW,
            boundary_table: default_boundary_table(),
            analog: AnalogParams::default(),
            timing: TimingParams::default(),
            energy: EnergyModel::default(),
            mode: MacMode::Osa,
        }
    }
}

impl MacroConfig {
    /// Dual 4-bit configuration (4-bit weights and activations, 16 outputs).
    pub fn dual4() -> Self {
        Self {
            weight_mode: WeightMode::Dual4,
            w: 4,
            a: 4,
            s: 1,
            boundary_table: BoundaryTable::fixed(0),
            mode: MacMode::Fixed { boundary: 0 },
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: MacMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_fixed(self, boundary: usize) -> Self {
        self.with_mode(MacMode::Fixed { boundary })
    }

    /// Output rows per invocation.
    pub fn logical_rows(&self) -> usize {
        self.hmus * self.weight_mode.weights_per_hcima()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hmus == 0 || self.cols == 0 || self.cells_per_hcima == 0 {
            return Err(Error::Config("macro geometry must be non-empty".into()));
        }
        if self.rows != self.hmus * self.cells_per_hcima {
            return Err(Error::Config(format!(
                "rows {} != hmus {} x cells_per_hcima {}",
                self.rows, self.hmus, self.cells_per_hcima
            )));
        }
        let max_w = self.cells_per_hcima / self.weight_mode.weights_per_hcima();
        if self.w == 0 || self.w as usize > max_w {
            return Err(Error::Config(format!(
                "weight width {} does not fit {:?} ({} cells per HCIMA)",
                self.w, self.weight_mode, self.cells_per_hcima
            )));
        }
        if self.a == 0 || self.a > crate::quant::MAX_BITS {
            return Err(Error::Config(format!("activation width {} unsupported", self.a)));
        }
        let (w, a) = (self.w as usize, self.a as usize);
        check_partition_args(w, a, self.s, 0, self.window)?;
        self.analog.validate()?;
        if self.window > self.analog.dac_bits_max as usize {
            return Err(Error::Config(format!(
                "analog window {} exceeds DAC width {}",
                self.window, self.analog.dac_bits_max
            )));
        }
        self.timing.validate()?;
        self.energy.validate()?;
        self.boundary_table.validate_for(w, a, self.s)?;
        if let MacMode::Fixed { boundary } = self.mode {
            check_partition_args(w, a, self.s, boundary, self.window)?;
        }
        Ok(())
    }

    pub fn partition(&self, boundary: usize) -> Result<Partition> {
        partition_grid(
            self.w as usize,
            self.a as usize,
            self.s,
            boundary,
            self.window,
        )
    }

    pub fn k_min_eval(&self) -> usize {
        eval_min_order(self.w as usize, self.a as usize, self.s)
    }
}

/// Weights resident in the macro.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    weights: QuantTensor,
    planes: Vec<BitPlanes>,
}

impl MacroState {
    /// Reads the stored weights back.
    pub fn read_back(&self) -> &QuantTensor {
        &self.weights
    }

    pub fn active_cols(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.planes.len()
    }
}

/// Stores a `(logical_rows, n)` weight tensor, `n <= cols`. Columns past `n` stay
/// idle and do not take part in normalization.
pub fn load_weights(weights: &QuantTensor, cfg: &MacroConfig) -> Result<MacroState> {
    cfg.validate()?;
    let rows = cfg.logical_rows();
    let shape = weights.shape();
    if shape.len() != 2 || shape[0] != rows || shape[1] == 0 || shape[1] > cfg.cols {
        return Err(Error::Config(format!(
            "weights must be ({rows}, 1..={}) for {:?}, got {shape:?}",
            cfg.cols, cfg.weight_mode
        )));
    }
    if weights.bits() != cfg.w {
        return Err(Error::Config(format!(
            "weights are {}-bit, macro expects {}",
            weights.bits(),
            cfg.w
        )));
    }
    let planes = (0..rows)
        .map(|r| {
            let row = weights.row(r)?;
            crate::quant::decompose_values(row, weights.bits(), weights.is_signed())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MacroState {
        weights: weights.clone(),
        planes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacResult {
    pub outputs: Vec<i64>,
    pub exact: Vec<i64>,
    pub error: Vec<i64>,
    pub chosen_boundary: usize,
    pub saliency: SaliencyScore,
    pub schedule: Schedule,
    pub energy: EnergyReport,
    pub rows: Vec<RowOutcome>,
}

/// Saliency score of an invocation from its row partials.
pub fn evaluate_saliency(partials: &[RowPartials], cfg: &MacroConfig) -> Result<SaliencyScore> {
    let eval_cells = cfg.partition(0)?.eval_cells;
    let per_cycle = eval_cells
        .iter()
        .map(|&c| {
            let codes = partials
                .iter()
                .map(|p| nq_quantize(&p.dmac(c)))
                .collect::<Result<Vec<u8>>>()?;
            Ok((c.order(), codes))
        })
        .collect::<Result<Vec<_>>>()?;
    saliency_accumulate(&per_cycle, cfg.k_min_eval())
}

pub fn run_mac(
    state: &MacroState,
    acts: &QuantTensor,
    cfg: &MacroConfig,
    seed: u64,
) -> Result<MacResult> {
    if acts.len() != state.active_cols() {
        return Err(Error::Shape(format!(
            "{} activations for {} loaded columns",
            acts.len(),
            state.active_cols()
        )));
    }
    if acts.bits() != cfg.a || acts.is_signed() {
        return Err(Error::Config(format!(
            "activations must be unsigned {}-bit",
            cfg.a
        )));
    }
    if state.rows() != cfg.logical_rows() || state.weights.bits() != cfg.w {
        return Err(Error::Config(
            "macro state was loaded under a different configuration".into(),
        ));
    }
    let act_planes = decompose_bits(acts)?;
    let partials = state
        .planes
        .iter()
        .map(|wp| RowPartials::new(&act_planes, wp))
        .collect::<Result<Vec<_>>>()?;

    let saliency = evaluate_saliency(&partials, cfg)?;
    let chosen_boundary = match cfg.mode {
        MacMode::Fixed { boundary } => boundary,
        MacMode::Osa => {
            let b = select_boundary(&saliency, &cfg.boundary_table);
            if cfg.boundary_table.index_of(b).is_none() {
                return Err(Error::Invariant(format!(
                    "selected boundary {b} is not a candidate"
                )));
            }
            b
        }
    };
    let partition = cfg.partition(chosen_boundary)?;

    let mut rows = Vec::with_capacity(partials.len());
    let mut outputs = Vec::with_capacity(partials.len());
    let mut exact = Vec::with_capacity(partials.len());
    for (r, p) in partials.iter().enumerate() {
        let mut noise = rng::stream(seed, &[r as u64]);
        let out = hybrid_row(p, &partition, &cfg.analog, &mut noise)?;
        outputs.push(out.output);
        exact.push(reference_mac(acts.values(), state.weights.row(r)?)?);
        rows.push(out);
    }
    let error = outputs.iter().zip(&exact).map(|(o, e)| o - e).collect();

    let schedule = build_schedule(&partition, &cfg.timing)
        .repeated(cfg.weight_mode.weights_per_hcima() as u32);
    let energy = account_energy(&schedule, &cfg.energy)?;
    Ok(MacResult {
        outputs,
        exact,
        error,
        chosen_boundary,
        saliency,
        schedule,
        energy,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_weights(r: &mut impl Rng, rows: usize, cols: usize, bits: u8) -> QuantTensor {
        let (lo, hi) = crate::quant::value_range(bits, true);
        let v = (0..rows * cols)
            .map(|_| r.random_range(lo..=hi) as i32)
            .collect();
        QuantTensor::new(vec![rows, cols], v, bits, true, 1.0).unwrap()
    }

    fn random_acts(r: &mut impl Rng, cols: usize, bits: u8) -> QuantTensor {
        QuantTensor::unsigned((0..cols).map(|_| r.random_range(0..(1 << bits))).collect(), bits)
            .unwrap()
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut cfg = MacroConfig::default();
        cfg.analog.noise_sigma = 0.0;
        let w = QuantTensor::new(vec![8, 144], vec![0; 8 * 144], 8, true, 1.0).unwrap();
        let st = load_weights(&w, &cfg).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let res = run_mac(&st, &random_acts(&mut r, 144, 8), &cfg, 3).unwrap();
        assert!(res.outputs.iter().all(|&o| o == 0));
        assert_eq!(res.saliency.value, 0);
        // the shipped last threshold is 0, so S = 0 stops at 9
        assert_eq!(res.chosen_boundary, 9);

        cfg.boundary_table = BoundaryTable::new(vec![5, 7, 9, 11], vec![96.0, 48.0, 16.0]).unwrap();
        let res = run_mac(&st, &random_acts(&mut r, 144, 8), &cfg, 3).unwrap();
        assert_eq!(res.chosen_boundary, 11);
    }

    #[test]
    fn dual4_round_trip() {
        let cfg = MacroConfig::dual4();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let w = random_weights(&mut r, 16, 144, 4);
        let st = load_weights(&w, &cfg).unwrap();
        assert_eq!(st.read_back(), &w);
        let acts = random_acts(&mut r, 144, 4);
        let res = run_mac(&st, &acts, &cfg, 0).unwrap();
        assert_eq!(res.outputs.len(), 16);
        assert_eq!(res.outputs, res.exact);
        let single = build_schedule(&cfg.partition(0).unwrap(), &cfg.timing);
        assert_eq!(res.schedule.makespan, 2.0 * single.makespan);
    }

    #[test]
    fn load_validation() {
        let cfg = MacroConfig::default();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        assert!(load_weights(&random_weights(&mut r, 7, 144, 8), &cfg).is_err());
        assert!(load_weights(&random_weights(&mut r, 8, 145, 8), &cfg).is_err());
        assert!(load_weights(&random_weights(&mut r, 8, 144, 4), &cfg).is_err());
        assert!(load_weights(&random_weights(&mut r, 16, 144, 8), &MacroConfig::dual4()).is_err());
        // out-of-range weights never become a tensor
        assert!(QuantTensor::new(vec![1, 1], vec![200], 8, true, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MacroConfig::default().validate().is_ok());
        let mut c = MacroConfig::default();
        c.rows = 60;
        assert!(c.validate().is_err());
        let mut c = MacroConfig::default();
        c.weight_mode = WeightMode::Dual4;
        assert!(c.validate().is_err());
        let c = MacroConfig::default().with_fixed(14);
        assert!(c.validate().is_err());
        let mut c = MacroConfig::default();
        c.analog.dac_bits_max = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn activation_validation() {
        let cfg = MacroConfig::default();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let st = load_weights(&random_weights(&mut r, 8, 16, 8), &cfg).unwrap();
        assert!(run_mac(&st, &random_acts(&mut r, 15, 8), &cfg, 0).is_err());
        let signed = QuantTensor::signed(vec![0; 16], 8).unwrap();
        assert!(run_mac(&st, &signed, &cfg, 0).is_err());
    }

    #[test]
    fn full_digital_exact_and_deterministic() {
        let cfg = MacroConfig::default().with_fixed(0);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let st = load_weights(&random_weights(&mut r, 8, 144, 8), &cfg).unwrap();
            let res = run_mac(&st, &random_acts(&mut r, 144, 8), &cfg, r.random()).unwrap();
            assert_eq!(res.outputs, res.exact);
            assert!(res.error.iter().all(|&e| e == 0));
        }
        let osa = MacroConfig::default();
        let st = load_weights(&random_weights(&mut r, 8, 144, 8), &osa).unwrap();
        let acts = random_acts(&mut r, 144, 8);
        assert_eq!(run_mac(&st, &acts, &osa, 9).unwrap(), run_mac(&st, &acts, &osa, 9).unwrap());
    }

    #[test]
    fn osa_boundary_is_candidate() {
        let cfg = MacroConfig::default();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let st = load_weights(&random_weights(&mut r, 8, 144, 8), &cfg).unwrap();
            let bits = r.random_range(1..=8);
            let acts: Vec<i32> = (0..144).map(|_| r.random_range(0..(1 << bits))).collect();
            let res = run_mac(&st, &QuantTensor::unsigned(acts, 8).unwrap(), &cfg, 1).unwrap();
            assert!(cfg.boundary_table.index_of(res.chosen_boundary).is_some());
        }
    }

    #[test]
    fn error_decomposes_into_discard_and_adc() {
        // sigma = 0: total error = discarded cells + (decoded - exact) of each group
        let mut cfg = MacroConfig::default().with_fixed(9);
        cfg.analog.noise_sigma = 0.0;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let st = load_weights(&random_weights(&mut r, 8, 144, 8), &cfg).unwrap();
        let acts = random_acts(&mut r, 144, 8);
        let res = run_mac(&st, &acts, &cfg, 0).unwrap();
        let part = cfg.partition(9).unwrap();
        let ap = decompose_bits(&acts).unwrap();
        for (row, wp) in st.planes.iter().enumerate() {
            let p = RowPartials::new(&ap, wp).unwrap();
            let discard: i64 = part.discard_cells.iter().map(|&c| p.exact_contribution(c)).sum();
            let analog_exact: i64 = part.analog_groups.iter().map(|g| p.group_exact(g)).sum();
            let adc_err = res.rows[row].analog_part - analog_exact;
            assert_eq!(res.error[row], adc_err - discard);
        }
    }
}
