//! Pseudo-data for ICE evaluation.
//!
//! For an instance `x` and a constrained column `j`, a pseudo-batch holds
//! copies of `x` with column `j` replaced by grid values: either every grid
//! value (global) or an `omega`-wide window around the instance's own value
//! (local). Evaluating the shared network row-wise over a pseudo-batch gives
//! the ICE block the penalties consume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::penalties::IceBlock;
use crate::schema::{ColumnRef, Grid, TabularDataset};
use crate::tensor::Matrix;

/// Width of the local window. Always odd and at least 5 so that a window
/// holds at least two third differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct WindowSpec(usize);

impl WindowSpec {
    pub fn new(omega: usize) -> Result<Self> {
        if omega < 5 || omega.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "window size must be odd and >= 5, got {omega}"
            )));
        }
        Ok(Self(omega))
    }

    pub fn omega(self) -> usize {
        self.0
    }

    pub fn half(self) -> usize {
        (self.0 - 1) / 2
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self(5)
    }
}

impl TryFrom<usize> for WindowSpec {
    type Error = Error;

    fn try_from(v: usize) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WindowSpec> for usize {
    fn from(w: WindowSpec) -> usize {
        w.0
    }
}

/// Where pseudo-rows come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IceScope {
    Full,
    Window(WindowSpec),
}

/// Current network-input value of `kind` for one instance.
pub fn current_value(kind: ColumnRef, x_cont: &[f64], x_cat: &[u32]) -> f64 {
    match kind {
        ColumnRef::Continuous(i) => x_cont[i],
        ColumnRef::Categorical(t) => x_cat[t] as f64,
    }
}

/// Index of the grid value nearest to `value`; ties go to the lower index.
pub fn nearest_grid_index(grid: &Grid, value: f64) -> usize {
    let g = &grid.scaled;
    let pos = g.partition_point(|&a| a < value);
    if pos == 0 {
        return 0;
    }
    if pos == g.len() {
        return g.len() - 1;
    }
    if value - g[pos - 1] <= g[pos] - value {
        pos - 1
    } else {
        pos
    }
}

/// Grid indices of a window of `omega` around `center`, shifted inwards at
/// the ends so it always holds `min(omega, K)` indices.
pub fn window_range(k: usize, center: usize, window: WindowSpec) -> std::ops::Range<usize> {
    let w = window.omega();
    if w >= k {
        return 0..k;
    }
    let start = center.saturating_sub(window.half()).min(k - w);
    start..start + w
}

pub fn grid_indices(grid: &Grid, scope: IceScope, x_cont: &[f64], x_cat: &[u32]) -> Vec<usize> {
    match scope {
        IceScope::Full => (0..grid.len()).collect(),
        IceScope::Window(w) => {
            let center = nearest_grid_index(grid, current_value(grid.kind, x_cont, x_cat));
            window_range(grid.len(), center, w).collect()
        }
    }
}

/// Copies of one instance that differ only in one column.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    pub kind: ColumnRef,
    /// Grid indices, strictly increasing.
    pub indices: Vec<usize>,
    pub x_cont: Matrix,
    pub x_cat: Vec<u32>,
}

impl PseudoBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn fill_rows(
    grid: &Grid,
    indices: &[usize],
    x_cont: &[f64],
    x_cat: &[u32],
    out_cont: &mut Matrix,
    out_cat: &mut Vec<u32>,
    first_row: usize,
) {
    for (k, &u) in indices.iter().enumerate() {
        let row = out_cont.row_mut(first_row + k);
        row.copy_from_slice(x_cont);
        let cat_start = out_cat.len();
        out_cat.extend_from_slice(x_cat);
        match grid.kind {
            ColumnRef::Continuous(i) => row[i] = grid.scaled[u],
            ColumnRef::Categorical(t) => out_cat[cat_start + t] = grid.scaled[u] as u32,
        }
    }
}

fn build(grid: &Grid, indices: Vec<usize>, x_cont: &[f64], x_cat: &[u32]) -> PseudoBatch {
    let mut m = Matrix::zeros(indices.len(), x_cont.len());
    let mut cat = Vec::with_capacity(indices.len() * x_cat.len());
    fill_rows(grid, &indices, x_cont, x_cat, &mut m, &mut cat, 0);
    PseudoBatch {
        kind: grid.kind,
        indices,
        x_cont: m,
        x_cat: cat,
    }
}

fn check_instance(grid: &Grid, x_cont: &[f64], x_cat: &[u32]) -> Result<()> {
    let ok = match grid.kind {
        ColumnRef::Continuous(i) => i < x_cont.len(),
        ColumnRef::Categorical(t) => t < x_cat.len(),
    };
    if ok && !grid.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "grid for `{}` does not fit the instance",
            grid.column
        )))
    }
}

/// One pseudo-row per grid value.
pub fn build_full(x_cont: &[f64], x_cat: &[u32], grid: &Grid) -> Result<PseudoBatch> {
    check_instance(grid, x_cont, x_cat)?;
    Ok(build(grid, (0..grid.len()).collect(), x_cont, x_cat))
}

/// Pseudo-rows for the `omega` grid values around the instance's value.
pub fn build_window(
    x_cont: &[f64],
    x_cat: &[u32],
    grid: &Grid,
    window: WindowSpec,
) -> Result<PseudoBatch> {
    check_instance(grid, x_cont, x_cat)?;
    let idx = grid_indices(grid, IceScope::Window(window), x_cont, x_cat);
    Ok(build(grid, idx, x_cont, x_cat))
}

/// Pseudo-rows for whichever scope the caller trains or audits with.
pub fn build_scoped(x_cont: &[f64], x_cat: &[u32], grid: &Grid, scope: IceScope) -> Result<PseudoBatch> {
    check_instance(grid, x_cont, x_cat)?;
    let idx = grid_indices(grid, scope, x_cont, x_cat);
    Ok(build(grid, idx, x_cont, x_cat))
}

/// Evaluates the network on every pseudo-row (`mu` scale).
pub fn evaluate_block(params: &NetworkParams, batch: &PseudoBatch, constraint: usize) -> Result<IceBlock> {
    let values = params.predict(&batch.x_cont, &batch.x_cat)?;
    Ok(IceBlock {
        constraint,
        indices: batch.indices.clone(),
        values,
    })
}

/// Pseudo-rows of many instances for one grid, stacked so a single forward
/// pass covers them all. Instance `i` owns rows `ranges[i]`.
#[derive(Debug, Clone)]
pub struct StackedPseudo {
    pub x_cont: Matrix,
    pub x_cat: Vec<u32>,
    pub indices: Vec<usize>,
    pub ranges: Vec<std::ops::Range<usize>>,
}

impl StackedPseudo {
    pub fn build(data: &TabularDataset, rows: &[usize], grid: &Grid, scope: IceScope) -> Self {
        let q = data.x_cont.cols();
        let per_row: Vec<Vec<usize>> = rows
            .iter()
            .map(|&r| grid_indices(grid, scope, data.x_cont.row(r), data.cat_row(r)))
            .collect();
        let total: usize = per_row.iter().map(Vec::len).sum();
        let mut x_cont = Matrix::zeros(total, q);
        let mut x_cat = Vec::with_capacity(total * data.n_cat);
        let mut indices = Vec::with_capacity(total);
        let mut ranges = Vec::with_capacity(rows.len());
        let mut at = 0;
        for (&r, idx) in rows.iter().zip(&per_row) {
            fill_rows(grid, idx, data.x_cont.row(r), data.cat_row(r), &mut x_cont, &mut x_cat, at);
            indices.extend_from_slice(idx);
            ranges.push(at..at + idx.len());
            at += idx.len();
        }
        Self {
            x_cont,
            x_cat,
            indices,
            ranges,
        }
    }

    pub fn rows(&self) -> usize {
        self.indices.len()
    }
}
