//! Workload allocation and cycle accounting for one macro invocation, plus the
//! event-cost energy model.
//!
//! Eval cells run first on the digital engine, then the evaluator decides, then
//! the digital and analog engines work concurrently: digital cells one per
//! (double-clocked) cycle, analog groups as DAC setup plus SAR conversion.
//! Event counts are per invocation; one event of a class stands for that step
//! performed by all HMUs in parallel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::partition::{partition_grid, Partition};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingParams {
    /// Digital cycle in time units; the adder tree runs at twice the analog clock.
    pub digital_cycle: f64,
    pub analog_cycle: f64,
    pub adc_conversion_cycles: u32,
    pub dac_setup_cycles: u32,
    pub ose_decision_cycles: u32,
    /// Back-to-back SAR conversions after a single DAC setup.
    pub analog_pipelined: bool,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self {
            digital_cycle: 0.5,
            analog_cycle: 1.0,
            adc_conversion_cycles: 3,
            dac_setup_cycles: 1,
            ose_decision_cycles: 1,
            analog_pipelined: false,
        }
    }
}

impl TimingParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.digital_cycle) || !positive(self.analog_cycle) {
            return Err(Error::Config("cycle times must be positive".into()));
        }
        if self.adc_conversion_cycles == 0
            || self.dac_setup_cycles == 0
            || self.ose_decision_cycles == 0
        {
            return Err(Error::Config("cycle counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    DigitalMacCycle,
    DatReduce,
    Nq,
    OseEval,
    DacConvert,
    ChargeShare,
    AdcConvert,
    Accumulate,
}

impl EventClass {
    pub const ALL: [EventClass; 8] = [
        EventClass::DigitalMacCycle,
        EventClass::DatReduce,
        EventClass::Nq,
        EventClass::OseEval,
        EventClass::DacConvert,
        EventClass::ChargeShare,
        EventClass::AdcConvert,
        EventClass::Accumulate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EventClass::DigitalMacCycle => "digital_mac_cycle",
            EventClass::DatReduce => "dat_reduce",
            EventClass::Nq => "nq",
            EventClass::OseEval => "ose_eval",
            EventClass::DacConvert => "dac_convert",
            EventClass::ChargeShare => "charge_share",
            EventClass::AdcConvert => "adc_convert",
            EventClass::Accumulate => "accumulate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub eval_span: f64,
    pub ose_span: f64,
    pub digital_span: f64,
    pub analog_span: f64,
    pub makespan: f64,
    pub events: BTreeMap<EventClass, u64>,
}

impl Schedule {
    pub fn empty() -> Self {
        Self {
            eval_span: 0.0,
            ose_span: 0.0,
            digital_span: 0.0,
            analog_span: 0.0,
            makespan: 0.0,
            events: EventClass::ALL.iter().map(|&c| (c, 0)).collect(),
        }
    }

    pub fn count(&self, class: EventClass) -> u64 {
        self.events.get(&class).copied().unwrap_or(0)
    }

    /// The same invocation repeated `n` times back to back (dual 4-bit weights).
    pub fn repeated(&self, n: u32) -> Self {
        let f = n as f64;
        Self {
            eval_span: self.eval_span * f,
            ose_span: self.ose_span * f,
            digital_span: self.digital_span * f,
            analog_span: self.analog_span * f,
            makespan: self.makespan * f,
            events: self.events.iter().map(|(&c, &v)| (c, v * n as u64)).collect(),
        }
    }
}

pub fn build_schedule(p: &Partition, t: &TimingParams) -> Schedule {
    let eval = p.eval_cells.len() as u64;
    let digital = p.digital_cells.len() as u64;
    let groups = p.analog_groups.len() as u64;

    let eval_span = eval as f64 * t.digital_cycle;
    let digital_span = digital as f64 * t.digital_cycle;
    let analog_span = if groups == 0 {
        0.0
    } else if t.analog_pipelined {
        (t.dac_setup_cycles as f64 + groups as f64 * t.adc_conversion_cycles as f64)
            * t.analog_cycle
    } else {
        groups as f64 * (t.dac_setup_cycles + t.adc_conversion_cycles) as f64 * t.analog_cycle
    };
    let ose_span = t.ose_decision_cycles as f64 * t.analog_cycle;
    let makespan = eval_span + ose_span + digital_span.max(analog_span);

    let events = BTreeMap::from([
        (EventClass::DigitalMacCycle, eval + digital),
        (EventClass::DatReduce, eval + digital),
        (EventClass::Nq, eval),
        (EventClass::OseEval, eval),
        (EventClass::DacConvert, groups),
        (EventClass::ChargeShare, groups),
        (EventClass::AdcConvert, groups),
        (EventClass::Accumulate, eval + digital + groups),
    ]);
    Schedule {
        eval_span,
        ose_span,
        digital_span,
        analog_span,
        makespan,
        events,
    }
}

/// Unit energy per event class (arbitrary energy units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub costs: BTreeMap<EventClass, f64>,
    /// Operations counted per MAC (a MAC is two ops).
    #[serde(default = "default_ops_per_mac")]
    pub ops_per_mac: f64,
}

fn default_ops_per_mac() -> f64 {
    2.0
}

/// Share targets the default model is fitted to: ADC and evaluator fractions
/// of total energy on [`reference_schedule`].
pub const ADC_SHARE_TARGET: f64 = 0.17;
pub const OSE_SHARE_TARGET: f64 = 0.01;

/// Unit costs of the classes that are not fitted, relative to one adder-tree
/// reduction across the macro.
pub fn default_cost_priors() -> BTreeMap<EventClass, f64> {
    BTreeMap::from([
        (EventClass::DigitalMacCycle, 0.55),
        (EventClass::DatReduce, 0.35),
        (EventClass::Nq, 0.02),
        (EventClass::DacConvert, 0.08),
        (EventClass::ChargeShare, 0.06),
        (EventClass::Accumulate, 0.04),
    ])
}

/// Reference workload for the breakdown fit: one 8b x 8b invocation with s = 2,
/// window 4 and boundary 9 under default timing.
pub fn reference_schedule() -> Schedule {
    let p = partition_grid(8, 8, 2, 9, crate::partition::DEFAULT_WINDOW)
        .expect("reference partition is legal");
    build_schedule(&p, &TimingParams::default())
}

/// Solves the ADC and evaluator unit costs so that, on `reference`, they take
/// exactly `adc_share` and `ose_share` of the total energy; all other classes keep
/// their prior cost.
pub fn fit_energy_model(
    priors: &BTreeMap<EventClass, f64>,
    reference: &Schedule,
    adc_share: f64,
    ose_share: f64,
) -> Result<EnergyModel> {
    if !(adc_share > 0.0 && ose_share > 0.0 && adc_share + ose_share < 1.0) {
        return Err(Error::Config(format!(
            "shares {adc_share}, {ose_share} must be positive and sum below 1"
        )));
    }
    let n_adc = reference.count(EventClass::AdcConvert);
    let n_ose = reference.count(EventClass::OseEval);
    if n_adc == 0 || n_ose == 0 {
        return Err(Error::Degenerate(
            "reference schedule has no ADC or evaluator events".into(),
        ));
    }
    let mut rest = 0.0;
    for class in EventClass::ALL {
        if matches!(class, EventClass::AdcConvert | EventClass::OseEval) {
            continue;
        }
        let c = priors
            .get(&class)
            .copied()
            .ok_or_else(|| Error::Config(format!("no prior cost for {}", class.name())))?;
        rest += c * reference.count(class) as f64;
    }
    let total = rest / (1.0 - adc_share - ose_share);
    let mut costs: BTreeMap<EventClass, f64> = priors
        .iter()
        .filter(|(c, _)| !matches!(c, EventClass::AdcConvert | EventClass::OseEval))
        .map(|(&c, &v)| (c, v))
        .collect();
    costs.insert(EventClass::AdcConvert, adc_share * total / n_adc as f64);
    costs.insert(EventClass::OseEval, ose_share * total / n_ose as f64);
    Ok(EnergyModel {
        costs,
        ops_per_mac: default_ops_per_mac(),
    })
}

impl Default for EnergyModel {
    fn default() -> Self {
        fit_energy_model(
            &default_cost_priors(),
            &reference_schedule(),
            ADC_SHARE_TARGET,
            OSE_SHARE_TARGET,
        )
        .expect("default priors fit")
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        for class in EventClass::ALL {
            match self.costs.get(&class) {
                None => {
                    return Err(Error::Config(format!(
                        "energy model has no cost for {}",
                        class.name()
                    )))
                }
                Some(&c) if !(c >= 0.0 && c.is_finite()) => {
                    return Err(Error::Config(format!(
                        "cost of {} must be finite and >= 0, got {c}",
                        class.name()
                    )))
                }
                _ => {}
            }
        }
        if !(self.ops_per_mac > 0.0) {
            return Err(Error::Config("ops_per_mac must be positive".into()));
        }
        Ok(())
    }

    /// Operations of `outputs` dot products over `cols` columns at `w x a` bits,
    /// normalized to 8b x 8b MACs.
    pub fn normalized_ops(&self, w: usize, a: usize, cols: usize, outputs: usize) -> f64 {
        self.ops_per_mac * (cols * outputs) as f64 * (w * a) as f64 / 64.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyReport {
    pub per_class: BTreeMap<EventClass, f64>,
    pub total: f64,
}

impl EnergyReport {
    pub fn share(&self, class: EventClass) -> f64 {
        if self.total == 0.0 {
            0.0
        } else {
            self.per_class.get(&class).copied().unwrap_or(0.0) / self.total
        }
    }

    pub fn shares(&self) -> BTreeMap<EventClass, f64> {
        self.per_class.keys().map(|&c| (c, self.share(c))).collect()
    }

    pub fn add(&mut self, other: &EnergyReport) {
        for (&c, &v) in &other.per_class {
            *self.per_class.entry(c).or_insert(0.0) += v;
        }
        self.total += other.total;
    }
}

pub fn account_energy(s: &Schedule, m: &EnergyModel) -> Result<EnergyReport> {
    let mut per_class = BTreeMap::new();
    let mut total = 0.0;
    for class in EventClass::ALL {
        let cost = m.costs.get(&class).copied().ok_or_else(|| {
            Error::Config(format!("energy model has no cost for {}", class.name()))
        })?;
        let e = cost * s.count(class) as f64;
        per_class.insert(class, e);
        total += e;
    }
    Ok(EnergyReport { per_class, total })
}
