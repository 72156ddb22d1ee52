//! Synthetic MAC workloads: random jobs with varied activation magnitude and the
//! mean-squared-error loss they induce through the macro.

use rand::Rng;
use rayon::prelude::*;

use crate::calibration::LossOracle;
use crate::cim_macro::{load_weights, run_mac, MacMode, MacResult, MacroConfig};
use crate::ose::BoundaryTable;
use crate::quant::{value_range, QuantTensor};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MacJob {
    pub weights: QuantTensor,
    pub acts: QuantTensor,
}

/// Activations are uniform on `[0, 2^m)` with `m` drawn from `1..=a` per job, so
/// jobs span small to large magnitudes; weights are uniform signed.
pub fn random_job<R: Rng + ?Sized>(cfg: &MacroConfig, cols: usize, r: &mut R) -> Result<MacJob> {
    let rows = cfg.logical_rows();
    let (lo, hi) = value_range(cfg.w, true);
    let weights = (0..rows * cols)
        .map(|_| r.random_range(lo..=hi) as i32)
        .collect();
    let m = r.random_range(1..=cfg.a as u32);
    let acts = (0..cols).map(|_| r.random_range(0..(1i32 << m))).collect();
    Ok(MacJob {
        weights: QuantTensor::new(vec![rows, cols], weights, cfg.w, true, 1.0)?,
        acts: QuantTensor::unsigned(acts, cfg.a)?,
    })
}

pub fn random_jobs(cfg: &MacroConfig, n: usize, seed: u64) -> Result<Vec<MacJob>> {
    (0..n)
        .map(|i| random_job(cfg, cfg.cols, &mut rng::stream(seed, &[0x10B, i as u64])))
        .collect()
}

/// Runs every job; job `i` draws noise from `(seed, i)`.
pub fn run_jobs(jobs: &[MacJob], cfg: &MacroConfig, seed: u64) -> Result<Vec<MacResult>> {
    jobs.par_iter()
        .enumerate()
        .map(|(i, j)| {
            let st = load_weights(&j.weights, cfg)?;
            run_mac(&st, &j.acts, cfg, rng::derive_seed(seed, &[i as u64]))
        })
        .collect()
}

/// `sum err^2 / sum exact^2` over all outputs.
pub fn nmse(results: &[MacResult]) -> Result<f64> {
    let (mut err, mut sig) = (0.0f64, 0.0f64);
    for r in results {
        for (e, x) in r.error.iter().zip(&r.exact) {
            err += (*e as f64).powi(2);
            sig += (*x as f64).powi(2);
        }
    }
    if sig == 0.0 {
        return Err(Error::Degenerate("probe jobs have zero signal".into()));
    }
    Ok(err / sig)
}

/// Normalized MSE of a job set under a boundary table.
pub struct ProbeLoss {
    jobs: Vec<MacJob>,
    cfg: MacroConfig,
    seed: u64,
}

impl ProbeLoss {
    pub fn new(jobs: Vec<MacJob>, cfg: &MacroConfig, seed: u64) -> Result<Self> {
        if jobs.is_empty() {
            return Err(Error::Degenerate("empty calibration set".into()));
        }
        Ok(Self {
            jobs,
            cfg: cfg.clone().with_mode(MacMode::Osa),
            seed,
        })
    }

    pub fn jobs(&self) -> &[MacJob] {
        &self.jobs
    }

    pub fn run(&self, table: &BoundaryTable) -> Result<Vec<MacResult>> {
        let mut cfg = self.cfg.clone();
        cfg.boundary_table = table.clone();
        run_jobs(&self.jobs, &cfg, self.seed)
    }
}

impl LossOracle for ProbeLoss {
    fn eval_loss(&self, table: &BoundaryTable) -> Result<f64> {
        nmse(&self.run(table)?)
    }

    fn precision(&self) -> Option<(usize, usize, usize)> {
        Some((self.cfg.w as usize, self.cfg.a as usize, self.cfg.s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{calibrate_thresholds, LossConstraints};

    #[test]
    fn degenerate_tables_match_fixed_runs() {
        let cfg = MacroConfig::default();
        let jobs = random_jobs(&cfg, 40, 1).unwrap();
        let oracle = ProbeLoss::new(jobs.clone(), &cfg, 2).unwrap();
        let t = cfg.boundary_table.with_thresholds(vec![0.0; 3]).unwrap();
        let fixed = nmse(&run_jobs(&jobs, &cfg.clone().with_fixed(5), 2).unwrap()).unwrap();
        assert_eq!(oracle.eval_loss(&t).unwrap(), fixed);
        let t = cfg.boundary_table.with_thresholds(vec![1e9; 3]).unwrap();
        let fixed = nmse(&run_jobs(&jobs, &cfg.clone().with_fixed(11), 2).unwrap()).unwrap();
        assert_eq!(oracle.eval_loss(&t).unwrap(), fixed);
    }

    #[test]
    fn empty_set_is_degenerate() {
        assert!(matches!(
            ProbeLoss::new(Vec::new(), &MacroConfig::default(), 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn loss_grows_with_threshold() {
        let cfg = MacroConfig::default();
        let oracle = ProbeLoss::new(random_jobs(&cfg, 60, 3).unwrap(), &cfg, 4).unwrap();
        let mut last = 0.0;
        for t in [0.0, 20.0, 60.0, 120.0, 250.0] {
            let table = BoundaryTable::new(vec![5, 11], vec![t]).unwrap();
            let l = oracle.eval_loss(&table).unwrap();
            assert!(l >= last, "loss {l} < {last} at T = {t}");
            last = l;
        }
    }

    #[test]
    fn loose_constraints_raise_thresholds() {
        let cfg = MacroConfig::default();
        let oracle = ProbeLoss::new(random_jobs(&cfg, 60, 5).unwrap(), &cfg, 6).unwrap();
        let lo = oracle.eval_loss(&BoundaryTable::new(vec![5, 11], vec![0.0]).unwrap()).unwrap();
        let hi = oracle.eval_loss(&BoundaryTable::new(vec![5, 11], vec![1e9]).unwrap()).unwrap();
        let run = |f: f64| {
            let c = LossConstraints {
                targets: vec![lo + f * (hi - lo)],
                epsilon: 0.02 * (hi - lo),
                t_max: 300.0,
                ..LossConstraints::default()
            };
            calibrate_thresholds(&[5, 11], &c, &oracle).unwrap().table.thresholds()[0]
        };
        assert!(run(0.2) <= run(0.7));
    }
}
