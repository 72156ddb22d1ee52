//! Threshold search: chooses each `T_i` so the task loss measured through the
//! simulator lands within `epsilon` of the user constraint `L_i`.
//!
//! Stages run in order. While stage `i` is searched, earlier thresholds stay frozen
//! and later ones sit at `t_min`, so raising `T_i` only moves scores from candidate
//! `i` to candidate `i + 1`. Each stage bisects under the assumption that loss
//! grows with `T_i`; once a measurement contradicts that, the stage continues with
//! fixed steps that halve on every direction change.

use serde::{Deserialize, Serialize};

use crate::ose::BoundaryTable;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConstraints {
    /// One target per threshold.
    pub targets: Vec<f64>,
    pub epsilon: f64,
    /// Loss evaluations allowed per stage.
    pub max_iters: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub initial_step: f64,
    /// Interval width below which thresholds are indistinguishable.
    pub resolution: f64,
}

impl Default for LossConstraints {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            epsilon: 0.01,
            max_iters: 40,
            t_min: 0.0,
            t_max: 256.0,
            initial_step: 16.0,
            resolution: 0.5,
        }
    }
}

impl LossConstraints {
    pub fn validate(&self, candidates: usize) -> Result<()> {
        if self.targets.len() + 1 != candidates {
            return Err(Error::Config(format!(
                "{candidates} candidates need {} loss targets, got {}",
                candidates.saturating_sub(1),
                self.targets.len()
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be > 0".into()));
        }
        if !(self.t_min.is_finite() && self.t_max.is_finite() && self.t_min <= self.t_max) {
            return Err(Error::Config(format!(
                "bad threshold bounds [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if !(self.initial_step > 0.0) || !(self.resolution > 0.0) {
            return Err(Error::Config("initial_step and resolution must be > 0".into()));
        }
        if self.targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("loss targets must be finite".into()));
        }
        Ok(())
    }
}

/// Mean task loss of a calibration set under a boundary table.
pub trait LossOracle {
    fn eval_loss(&self, table: &BoundaryTable) -> Result<f64>;

    /// `(w, a, s)` the candidates must be legal for, when known.
    fn precision(&self) -> Option<(usize, usize, usize)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStep {
    Bound,
    Bisect,
    Step,
}

impl SearchStep {
    pub fn name(&self) -> &'static str {
        match self {
            SearchStep::Bound => "bound",
            SearchStep::Bisect => "bisect",
            SearchStep::Step => "step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: usize,
    pub iter: usize,
    pub threshold: f64,
    pub loss: f64,
    pub target: f64,
    pub step: SearchStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub threshold: f64,
    pub loss: f64,
    pub converged: bool,
    /// The answer sits on a search bound because the target is out of reach there.
    pub at_bound: bool,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub table: BoundaryTable,
    pub stages: Vec<StageResult>,
    pub trace: Vec<TraceRow>,
    pub eval_calls: usize,
}

impl CalibrationOutcome {
    pub fn converged(&self) -> bool {
        self.stages.iter().all(|s| s.converged)
    }

    pub fn flagged(&self) -> bool {
        self.stages.iter().any(|s| !s.converged || s.at_bound)
    }

    /// Header `stage,iter,threshold,loss,target,step`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("stage,iter,threshold,loss,target,step\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.stage,
                r.iter,
                r.threshold,
                r.loss,
                r.target,
                r.step.name()
            ));
        }
        out
    }
}

struct Stage<'a> {
    oracle: &'a dyn LossOracle,
    candidates: &'a [usize],
    thresholds: Vec<f64>,
    index: usize,
    target: f64,
    eps: f64,
    evals: usize,
    trace: Vec<TraceRow>,
    best: Option<(f64, f64)>,
}

impl Stage<'_> {
    fn eval(&mut self, t: f64, step: SearchStep) -> Result<f64> {
        self.thresholds[self.index] = t;
        let table = BoundaryTable::new(self.candidates.to_vec(), self.thresholds.clone())?;
        let loss = self.oracle.eval_loss(&table)?;
        if !loss.is_finite() {
            return Err(Error::Degenerate(format!("loss is {loss} at threshold {t}")));
        }
        self.trace.push(TraceRow {
            stage: self.index,
            iter: self.evals,
            threshold: t,
            loss,
            target: self.target,
            step,
        });
        self.evals += 1;
        let gap = (loss - self.target).abs();
        if self.best.is_none_or(|(_, l)| gap < (l - self.target).abs()) {
            self.best = Some((t, loss));
        }
        Ok(loss)
    }

    fn hit(&self, loss: f64) -> bool {
        (loss - self.target).abs() <= self.eps
    }
}

/// Searches thresholds for `candidates` against `constraints`.
pub fn calibrate_thresholds(
    candidates: &[usize],
    constraints: &LossConstraints,
    oracle: &dyn LossOracle,
) -> Result<CalibrationOutcome> {
    constraints.validate(candidates.len())?;
    let c = constraints;
    let mut thresholds = vec![c.t_min; candidates.len() - 1];
    let probe = BoundaryTable::new(candidates.to_vec(), thresholds.clone())?;
    if let Some((w, a, s)) = oracle.precision() {
        probe.validate_for(w, a, s)?;
    }

    let mut stages = Vec::with_capacity(thresholds.len());
    let mut trace = Vec::new();
    let mut eval_calls = 0;
    for i in 0..thresholds.len() {
        let upper = if i == 0 { c.t_max } else { c.t_max.min(thresholds[i - 1]) };
        let mut st = Stage {
            oracle,
            candidates,
            thresholds: thresholds.clone(),
            index: i,
            target: c.targets[i],
            eps: c.epsilon,
            evals: 0,
            trace: Vec::new(),
            best: None,
        };
        let result = search_stage(&mut st, c.t_min, upper, c)?;
        thresholds[i] = result.threshold;
        eval_calls += st.evals;
        trace.append(&mut st.trace);
        stages.push(result);
    }
    Ok(CalibrationOutcome {
        table: BoundaryTable::new(candidates.to_vec(), thresholds)?,
        stages,
        trace,
        eval_calls,
    })
}

fn done(t: f64, loss: f64, converged: bool, at_bound: bool, fell_back: bool) -> StageResult {
    StageResult {
        threshold: t,
        loss,
        converged,
        at_bound,
        fell_back,
    }
}

fn search_stage(st: &mut Stage, lo: f64, hi: f64, c: &LossConstraints) -> Result<StageResult> {
    let loss_lo = st.eval(lo, SearchStep::Bound)?;
    if loss_lo > st.target + st.eps || lo == hi {
        return Ok(done(lo, loss_lo, st.hit(loss_lo), true, false));
    }
    let loss_hi = st.eval(hi, SearchStep::Bound)?;
    if loss_hi <= st.target + st.eps {
        // even the least precise setting allowed here meets the target
        return Ok(done(hi, loss_hi, st.hit(loss_hi), !st.hit(loss_hi), false));
    }
    let (mut a, mut b) = ((lo, loss_lo), (hi, loss_hi));
    let mut violated = false;
    while st.evals < c.max_iters {
        if b.0 - a.0 <= c.resolution {
            break;
        }
        let mid = 0.5 * (a.0 + b.0);
        let loss = st.eval(mid, SearchStep::Bisect)?;
        if loss < a.1 || loss > b.1 {
            violated = true;
            break;
        }
        if st.hit(loss) {
            return Ok(done(mid, loss, true, false, false));
        }
        if loss > st.target {
            b = (mid, loss);
        } else {
            a = (mid, loss);
        }
    }
    if violated {
        return step_search(st, lo, hi, c);
    }
    // Interval exhausted without a hit inside it: keep the side under the target.
    Ok(done(a.0, a.1, st.hit(a.1), false, false))
}

fn step_search(st: &mut Stage, lo: f64, hi: f64, c: &LossConstraints) -> Result<StageResult> {
    let (mut t, _) = st.best.expect("bounds were evaluated");
    let mut step = c.initial_step;
    let mut last_dir = 0i8;
    while st.evals < c.max_iters && step >= c.resolution {
        let loss = st.eval(t, SearchStep::Step)?;
        if st.hit(loss) {
            return Ok(done(t, loss, true, false, true));
        }
        let dir = if loss > st.target { -1 } else { 1 };
        if last_dir != 0 && dir != last_dir {
            step *= 0.5;
        }
        last_dir = dir;
        t = (t + dir as f64 * step).clamp(lo, hi);
    }
    let (t, loss) = st.best.expect("at least one evaluation");
    Ok(done(t, loss, st.hit(loss), false, true))
}
