//! Partition of the `w x a` one-bit MAC grid into eval, digital, analog and
//! discarded cells for a given digital/analog boundary.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest analog window, bounded by the 4-bit DAC.
pub const MAX_WINDOW: usize = 4;
pub const DEFAULT_WINDOW: usize = 4;

/// One-bit MAC between weight bit `weight_bit` and activation bit `act_bit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub weight_bit: usize,
    pub act_bit: usize,
}

impl Cell {
    pub fn new(weight_bit: usize, act_bit: usize) -> Self {
        Self {
            weight_bit,
            act_bit,
        }
    }

    /// Output order `k = i + j`.
    pub fn order(&self) -> usize {
        self.weight_bit + self.act_bit
    }
}

/// Bit-parallel analog job: one weight bit against activation bits `act_lo..=act_hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnalogGroup {
    pub weight_bit: usize,
    pub act_lo: usize,
    pub act_hi: usize,
}

impl AnalogGroup {
    /// DAC width of the activation slice.
    pub fn width(&self) -> usize {
        self.act_hi - self.act_lo + 1
    }

    /// Order of the group's least significant cell.
    pub fn order(&self) -> usize {
        self.weight_bit + self.act_lo
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (self.act_lo..=self.act_hi).map(move |j| Cell::new(self.weight_bit, j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellMode {
    Eval,
    Digital,
    Analog,
    Discard,
}

/// Lowest order evaluated during saliency evaluation.
pub fn eval_min_order(w: usize, a: usize, s: usize) -> usize {
    w + a - 1 - s
}

/// Largest legal boundary for `(w, a, s)`.
pub fn max_boundary(w: usize, a: usize, s: usize) -> usize {
    eval_min_order(w, a, s)
}

/// Number of cells of order `k` in a `w x a` grid.
pub fn cells_at_order(w: usize, a: usize, k: usize) -> usize {
    (0..w).filter(|&i| k >= i && k - i < a).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub w: usize,
    pub a: usize,
    pub s: usize,
    pub boundary: usize,
    pub window: usize,
    /// Saliency-evaluation cells, highest order first.
    pub eval_cells: Vec<Cell>,
    /// Remaining exact cells, highest order first.
    pub digital_cells: Vec<Cell>,
    pub discard_cells: Vec<Cell>,
    /// One group per weight bit that has analog cells, ascending weight bit.
    pub analog_groups: Vec<AnalogGroup>,
}

impl Partition {
    pub fn analog_cell_count(&self) -> usize {
        self.analog_groups.iter().map(AnalogGroup::width).sum()
    }

    pub fn mode_of(&self, cell: Cell) -> CellMode {
        let k = cell.order();
        if k >= eval_min_order(self.w, self.a, self.s) {
            CellMode::Eval
        } else if k >= self.boundary {
            CellMode::Digital
        } else if k + self.window >= self.boundary {
            CellMode::Analog
        } else {
            CellMode::Discard
        }
    }

    /// Cells that end up in the exact accumulator (eval results are reused).
    pub fn exact_cells(&self) -> impl Iterator<Item = &Cell> {
        self.eval_cells.iter().chain(&self.digital_cells)
    }

    pub fn is_full_digital(&self) -> bool {
        self.analog_groups.is_empty() && self.discard_cells.is_empty()
    }
}

fn sort_desc(cells: &mut [Cell]) {
    cells.sort_by(|x, y| {
        y.order()
            .cmp(&x.order())
            .then(y.weight_bit.cmp(&x.weight_bit))
    });
}

pub fn check_partition_args(
    w: usize,
    a: usize,
    s: usize,
    boundary: usize,
    window: usize,
) -> Result<()> {
    if w == 0 || a == 0 {
        return Err(Error::Config(format!("widths must be positive, got w={w} a={a}")));
    }
    if s == 0 || s > w + a - 1 {
        return Err(Error::Config(format!(
            "saliency diagonals s={s} outside 1..={}",
            w + a - 1
        )));
    }
    if window == 0 || window > MAX_WINDOW {
        return Err(Error::Config(format!(
            "analog window {window} outside 1..={MAX_WINDOW}"
        )));
    }
    let max_b = max_boundary(w, a, s);
    if boundary > max_b {
        return Err(Error::Config(format!(
            "boundary {boundary} outside 0..={max_b} for w={w} a={a} s={s}"
        )));
    }
    Ok(())
}

/// Labels every cell of the grid for boundary `boundary` and analog window `window`.
pub fn partition_grid(
    w: usize,
    a: usize,
    s: usize,
    boundary: usize,
    window: usize,
) -> Result<Partition> {
    check_partition_args(w, a, s, boundary, window)?;
    let k_eval = eval_min_order(w, a, s);
    let mut eval_cells = Vec::new();
    let mut digital_cells = Vec::new();
    let mut discard_cells = Vec::new();
    let mut analog_groups = Vec::new();

    for i in 0..w {
        let mut run: Option<(usize, usize)> = None;
        for j in 0..a {
            let cell = Cell::new(i, j);
            let k = cell.order();
            if k >= k_eval {
                eval_cells.push(cell);
            } else if k >= boundary {
                digital_cells.push(cell);
            } else if k + window >= boundary {
                run = Some(match run {
                    None => (j, j),
                    Some((lo, _)) => (lo, j),
                });
            } else {
                discard_cells.push(cell);
            }
        }
        if let Some((act_lo, act_hi)) = run {
            analog_groups.push(AnalogGroup {
                weight_bit: i,
                act_lo,
                act_hi,
            });
        }
    }
    sort_desc(&mut eval_cells);
    sort_desc(&mut digital_cells);
    sort_desc(&mut discard_cells);

    Ok(Partition {
        w,
        a,
        s,
        boundary,
        window,
        eval_cells,
        digital_cells,
        discard_cells,
        analog_groups,
    })
}
