//! Loop-based reference implementations, written from the definitions and
//! sharing no code with the library beyond parameter accessors.
#![allow(dead_code)]

use icenet_core::penalties::ResolvedConstraint;
use icenet_core::schema::{ColumnRef, Grid};
use icenet_core::{Direction, IceScope, LossParts, NetworkParams, Schema, TabularDataset};

pub fn third_differences(a: &[f64]) -> Vec<f64> {
    (0..a.len().saturating_sub(3))
        .map(|i| a[i + 3] - 3.0 * a[i + 2] + 3.0 * a[i + 1] - a[i])
        .collect()
}

pub fn brute_smoothing(a: &[f64], lambda: f64) -> f64 {
    lambda * third_differences(a).iter().map(|d| d * d).sum::<f64>()
}

pub fn brute_monotonicity(a: &[f64], lambda: f64, direction: Direction) -> f64 {
    let delta = match direction {
        Direction::Increasing => -1.0,
        Direction::Decreasing => 1.0,
    };
    lambda
        * (1..a.len())
            .map(|i| (delta * (a[i] - a[i - 1])).max(0.0))
            .sum::<f64>()
}

pub fn brute_deviance(y: f64, yhat: f64) -> f64 {
    if y == 0.0 {
        2.0 * yhat
    } else {
        2.0 * (yhat - y + y * (y / yhat).ln())
    }
}

/// `mu` of one row. `margin` shrinks to the smallest distance of any
/// pre-activation from a ReLU kink or of `eta` from the link clamp.
pub fn forward_row(p: &NetworkParams, x_cont: &[f64], codes: &[u32], margin: &mut f64) -> f64 {
    let arch = p.arch();
    let mut x: Vec<f64> = x_cont.to_vec();
    for (t, &code) in codes.iter().enumerate() {
        let e = p.embedding(t);
        for j in 0..e.cols() {
            x.push(e.get(code as usize - 1, j));
        }
    }
    for layer in 0..arch.hidden.len() {
        let w = p.weight(layer);
        let b = p.bias(layer);
        let mut z = Vec::with_capacity(w.rows());
        for i in 0..w.rows() {
            let mut s = b.get(0, i);
            for (j, xj) in x.iter().enumerate() {
                s += w.get(i, j) * xj;
            }
            *margin = margin.min(s.abs());
            z.push(if s > 0.0 { s } else { 0.0 });
        }
        x = z;
    }
    let hw = p.head_weight();
    let mut eta = p.head_bias();
    for (j, xj) in x.iter().enumerate() {
        eta += hw.get(0, j) * xj;
    }
    *margin = margin.min(30.0 - eta.abs());
    eta.clamp(-30.0, 30.0).exp()
}

/// Grid indices a scope covers, recomputed from the definition: the window
/// is centred on the nearest grid value (lower index on ties) and shifted
/// inwards at the ends.
pub fn scope_indices(grid: &Grid, scope: IceScope, current: f64) -> Vec<usize> {
    let k = grid.scaled.len();
    match scope {
        IceScope::Full => (0..k).collect(),
        IceScope::Window(w) => {
            let omega = w.omega();
            if omega >= k {
                return (0..k).collect();
            }
            let mut centre = 0;
            for j in 1..k {
                if (grid.scaled[j] - current).abs() < (grid.scaled[centre] - current).abs() {
                    centre = j;
                }
            }
            let start = (centre as i64 - (omega / 2) as i64).max(0).min((k - omega) as i64) as usize;
            (start..start + omega).collect()
        }
    }
}

/// ICE values of one instance over the chosen grid indices.
pub fn ice_values(
    p: &NetworkParams,
    x_cont: &[f64],
    codes: &[u32],
    grid: &Grid,
    indices: &[usize],
    margin: &mut f64,
) -> Vec<f64> {
    indices
        .iter()
        .map(|&u| {
            let mut xc = x_cont.to_vec();
            let mut cc = codes.to_vec();
            match grid.kind {
                ColumnRef::Continuous(i) => xc[i] = grid.scaled[u],
                ColumnRef::Categorical(t) => cc[t] = grid.scaled[u] as u32,
            }
            forward_row(p, &xc, &cc, margin)
        })
        .collect()
}

pub struct OracleLoss {
    pub parts: LossParts,
    /// Distance of the evaluation point from the nearest non-smooth point.
    pub margin: f64,
}

/// Mean compound loss over `rows`, one instance at a time.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    p: &NetworkParams,
    schema: &Schema,
    data: &TabularDataset,
    rows: &[usize],
    constraints: &[ResolvedConstraint],
    scope: Option<IceScope>,
    exposure_scale: bool,
) -> OracleLoss {
    let mut parts = LossParts::default();
    let mut margin = f64::INFINITY;
    for &r in rows {
        let xc = data.x_cont.row(r);
        let codes = data.cat_row(r);
        let mu = forward_row(p, xc, codes, &mut margin);
        parts.deviance += brute_deviance(data.y[r], mu * data.v[r]);
        let Some(scope) = scope else { continue };
        for c in constraints {
            let grid = &schema.grids[c.grid_index];
            let current = match grid.kind {
                ColumnRef::Continuous(i) => xc[i],
                ColumnRef::Categorical(t) => codes[t] as f64,
            };
            let idx = scope_indices(grid, scope, current);
            let s = if exposure_scale { data.v[r] } else { 1.0 };
            let block: Vec<f64> = ice_values(p, xc, codes, grid, &idx, &mut margin)
                .into_iter()
                .map(|m| m * s)
                .collect();
            parts.smoothing += brute_smoothing(&block, c.smooth_lambda);
            parts.monotonicity += brute_monotonicity(&block, c.mono_lambda, c.direction);
            if c.mono_lambda > 0.0 {
                for w in block.windows(2) {
                    margin = margin.min((w[1] - w[0]).abs());
                }
            }
        }
    }
    let n = rows.len() as f64;
    OracleLoss {
        parts: parts.scaled(1.0 / n),
        margin,
    }
}
