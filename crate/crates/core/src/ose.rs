//! On-the-fly saliency evaluator: accumulates the normalized high-order DMAC codes
//! of all HMUs into a score `S` and maps it to a boundary through thresholds.

use serde::{Deserialize, Serialize};

use crate::dcim::NQ_BITS;
use crate::partition::max_boundary;
use crate::{Error, Result};

/// Candidate boundaries (most precise first) and the thresholds between them.
///
/// A score passes threshold `T_i` when `S >= T_i`; the selected candidate index is
/// the number of failed thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTable {
    candidates: Vec<usize>,
    thresholds: Vec<f64>,
}

impl BoundaryTable {
    pub fn new(candidates: Vec<usize>, thresholds: Vec<f64>) -> Result<Self> {
        let t = Self {
            candidates,
            thresholds,
        };
        t.validate()?;
        Ok(t)
    }

    /// Single-candidate table.
    pub fn fixed(boundary: usize) -> Self {
        Self {
            candidates: vec![boundary],
            thresholds: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Config("boundary table has no candidates".into()));
        }
        if self.candidates.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!(
                "candidates must be strictly increasing: {:?}",
                self.candidates
            )));
        }
        if self.thresholds.len() + 1 != self.candidates.len() {
            return Err(Error::Config(format!(
                "{} candidates need {} thresholds, got {}",
                self.candidates.len(),
                self.candidates.len() - 1,
                self.thresholds.len()
            )));
        }
        if self.thresholds.iter().any(|t| t.is_nan()) {
            return Err(Error::Config("threshold is NaN".into()));
        }
        if self.thresholds.windows(2).any(|p| p[0] < p[1]) {
            return Err(Error::Config(format!(
                "thresholds must be non-increasing: {:?}",
                self.thresholds
            )));
        }
        Ok(())
    }

    /// Checks every candidate against the legal range for `(w, a, s)`.
    pub fn validate_for(&self, w: usize, a: usize, s: usize) -> Result<()> {
        self.validate()?;
        let max_b = max_boundary(w, a, s);
        if let Some(&bad) = self.candidates.iter().find(|&&b| b > max_b) {
            return Err(Error::Config(format!(
                "candidate boundary {bad} exceeds {max_b} for w={w} a={a} s={s}"
            )));
        }
        Ok(())
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Replaces the thresholds, revalidating.
    pub fn with_thresholds(&self, thresholds: Vec<f64>) -> Result<Self> {
        Self::new(self.candidates.clone(), thresholds)
    }

    /// Position of `boundary` in the candidate list.
    pub fn index_of(&self, boundary: usize) -> Option<usize> {
        self.candidates.iter().position(|&b| b == boundary)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencyScore {
    pub value: u64,
    pub cycles_used: usize,
    /// `(order k, sum of codes over HMUs)` per evaluation cycle.
    pub per_cycle: Vec<(usize, u32)>,
}

/// Sums each cycle's codes over HMUs and weights the cycle by `2^(k - k_min_eval)`.
pub fn saliency_accumulate(
    per_cycle_codes: &[(usize, Vec<u8>)],
    k_min_eval: usize,
) -> Result<SaliencyScore> {
    let code_max = (1u8 << NQ_BITS) - 1;
    let mut value = 0u64;
    let mut per_cycle = Vec::with_capacity(per_cycle_codes.len());
    for (order, codes) in per_cycle_codes {
        if *order < k_min_eval {
            return Err(Error::Config(format!(
                "order {order} is below the evaluation window starting at {k_min_eval}"
            )));
        }
        let mut sum = 0u32;
        for &c in codes {
            if c > code_max {
                return Err(Error::Range {
                    value: c as i64,
                    bits: NQ_BITS,
                    kind: "unsigned",
                });
            }
            sum += c as u32;
        }
        value += (sum as u64) << (order - k_min_eval);
        per_cycle.push((*order, sum));
    }
    Ok(SaliencyScore {
        value,
        cycles_used: per_cycle.len(),
        per_cycle,
    })
}

/// Largest reachable score for the eval window of `(w, a, s)` across `rows` code
/// sources.
pub fn saliency_max(w: usize, a: usize, s: usize, rows: usize) -> u64 {
    let k_min = crate::partition::eval_min_order(w, a, s);
    let code_max = (1u64 << NQ_BITS) - 1;
    (k_min..w + a - 1)
        .map(|k| (crate::partition::cells_at_order(w, a, k) as u64 * code_max * rows as u64) << (k - k_min))
        .sum()
}

/// Number of thresholds the score fails.
pub fn select_index(score: u64, table: &BoundaryTable) -> usize {
    let s = score as f64;
    table.thresholds.iter().filter(|&&t| s < t).count()
}

pub fn select_boundary(score: &SaliencyScore, table: &BoundaryTable) -> usize {
    table.candidates[select_index(score.value, table)]
}
