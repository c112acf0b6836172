//! ICE curves, partial dependence, per-instance constraint audits and their
//! CSV exports.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ice::{build_full, build_scoped, IceScope};
use crate::network::NetworkParams;
use crate::penalties::{monotonicity_loss, smoothing_loss, ConstraintSpec};
use crate::schema::{Grid, Schema, TabularDataset};

pub const ICE_HEADER: [&str; 5] = ["instance_id", "column", "grid_index", "grid_value", "prediction"];
pub const PDP_HEADER: [&str; 4] = ["column", "grid_index", "grid_value", "mean_prediction"];
pub const AUDIT_HEADER: [&str; 4] = ["instance_id", "column", "smooth_score", "mono_score"];

/// `[mu(x~(1)) v, .., mu(x~(K)) v]` for one instance.
pub fn ice_curve(
    params: &NetworkParams,
    x_cont: &[f64],
    x_cat: &[u32],
    exposure: f64,
    grid: &Grid,
) -> Result<Vec<f64>> {
    let batch = build_full(x_cont, x_cat, grid)?;
    Ok(params
        .predict(&batch.x_cont, &batch.x_cat)?
        .into_iter()
        .map(|m| m * exposure)
        .collect())
}

/// ICE curves of every row in `data`, in row order.
pub fn ice_curves(params: &NetworkParams, data: &TabularDataset, grid: &Grid) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .into_par_iter()
        .map(|n| ice_curve(params, data.x_cont.row(n), data.cat_row(n), data.v[n], grid))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PdpWeighting {
    /// `sum_n mu_n v_n / N`
    #[default]
    Mean,
    /// `sum_n mu_n v_n / sum_n v_n`
    Exposure,
}

pub fn pdp(
    params: &NetworkParams,
    data: &TabularDataset,
    grid: &Grid,
    weighting: PdpWeighting,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Invalid("partial dependence over an empty dataset".into()));
    }
    let curves = ice_curves(params, data, grid)?;
    let mut acc = vec![0.0; grid.len()];
    for c in &curves {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let denom = match weighting {
        PdpWeighting::Mean => data.len() as f64,
        PdpWeighting::Exposure => data.v.iter().sum(),
    };
    acc.iter_mut().for_each(|a| *a /= denom);
    Ok(acc)
}

/// Unit-weight smoothing and monotonicity values of one instance's ICE
/// block for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditScore {
    pub instance_id: usize,
    pub column: String,
    pub smooth_score: f64,
    pub mono_score: f64,
}

/// Scores every instance on every column listed in `spec`, using the
/// `mu`-scale network outputs over `scope` and λ = 1. Rows come out ordered
/// by instance, then by the spec's column order.
pub fn audit(
    params: &NetworkParams,
    data: &TabularDataset,
    schema: &Schema,
    spec: &ConstraintSpec,
    scope: IceScope,
) -> Result<Vec<AuditScore>> {
    let cols: Vec<(&Grid, _)> = spec
        .columns
        .iter()
        .map(|c| {
            schema
                .grid(&c.column)
                .map(|g| (g, c.direction))
                .ok_or_else(|| Error::Schema(format!("no grid for audited column `{}`", c.column)))
        })
        .collect::<Result<_>>()?;
    let per_row: Vec<Vec<AuditScore>> = (0..data.len())
        .into_par_iter()
        .map(|n| {
            let xc = data.x_cont.row(n);
            let xk = data.cat_row(n);
            cols.iter()
                .map(|(grid, dir)| {
                    let batch = build_scoped(xc, xk, grid, scope)?;
                    let block = params.predict(&batch.x_cont, &batch.x_cat)?;
                    Ok(AuditScore {
                        instance_id: data.ids[n],
                        column: grid.column.clone(),
                        smooth_score: smoothing_loss(&block, 1.0),
                        mono_score: monotonicity_loss(&block, 1.0, *dir),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_row.into_iter().flatten().collect())
}

/// Mean scores per column, in first-appearance order.
pub fn mean_scores(scores: &[AuditScore]) -> Vec<(String, f64, f64)> {
    let mut out: Vec<(String, f64, f64, usize)> = Vec::new();
    for s in scores {
        match out.iter_mut().find(|o| o.0 == s.column) {
            Some(o) => {
                o.1 += s.smooth_score;
                o.2 += s.mono_score;
                o.3 += 1;
            }
            None => out.push((s.column.clone(), s.smooth_score, s.mono_score, 1)),
        }
    }
    out.into_iter()
        .map(|(c, s, m, n)| (c, s / n as f64, m / n as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Smooth,
    Mono,
}

/// The `k` highest-scoring instances for `column`, ties broken by
/// ascending instance id.
pub fn worst_offenders(scores: &[AuditScore], column: &str, kind: ScoreKind, k: usize) -> Vec<AuditScore> {
    let mut rows: Vec<&AuditScore> = scores.iter().filter(|s| s.column == column).collect();
    let key = |s: &AuditScore| match kind {
        ScoreKind::Smooth => s.smooth_score,
        ScoreKind::Mono => s.mono_score,
    };
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.instance_id.cmp(&b.instance_id)));
    rows.into_iter().take(k).cloned().collect()
}

/// Per-instance `a - b` for scores matched on (instance, column).
pub fn score_differences(a: &[AuditScore], b: &[AuditScore]) -> Result<Vec<AuditScore>> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "audits have {} and {} rows",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.instance_id != y.instance_id || x.column != y.column {
                return Err(Error::Invalid(format!(
                    "audit rows out of step: ({}, {}) vs ({}, {})",
                    x.instance_id, x.column, y.instance_id, y.column
                )));
            }
            Ok(AuditScore {
                instance_id: x.instance_id,
                column: x.column.clone(),
                smooth_score: x.smooth_score - y.smooth_score,
                mono_score: x.mono_score - y.mono_score,
            })
        })
        .collect()
}

/// One row of an ICE export.
#[derive(Debug, Clone, PartialEq)]
pub struct IcePoint {
    pub instance_id: usize,
    pub column: String,
    pub grid_index: usize,
    pub grid_value: f64,
    pub prediction: f64,
}

pub fn ice_points(instance_id: usize, grid: &Grid, curve: &[f64]) -> Vec<IcePoint> {
    curve
        .iter()
        .enumerate()
        .map(|(u, &p)| IcePoint {
            instance_id,
            column: grid.column.clone(),
            grid_index: u + 1,
            grid_value: grid.raw[u],
            prediction: p,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdpPoint {
    pub column: String,
    pub grid_index: usize,
    pub grid_value: f64,
    pub mean_prediction: f64,
}

pub fn pdp_points(grid: &Grid, values: &[f64]) -> Vec<PdpPoint> {
    values
        .iter()
        .enumerate()
        .map(|(u, &v)| PdpPoint {
            column: grid.column.clone(),
            grid_index: u + 1,
            grid_value: grid.raw[u],
            mean_prediction: v,
        })
        .collect()
}

/// Decimal rendering with 12 significant digits, trailing zeros trimmed.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".to_string() } else { v.to_string() };
    }
    let sci = format!("{v:.11e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{exp}")
    }
}

fn writer<W: Write>(w: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    Ok(out)
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn export_curves<W: Write>(points: &[IcePoint], w: W) -> Result<()> {
    let mut out = writer(w, &ICE_HEADER)?;
    for p in points {
        out.write_record([
            p.instance_id.to_string(),
            p.column.clone(),
            p.grid_index.to_string(),
            fmt_num(p.grid_value),
            fmt_num(p.prediction),
        ])?;
    }
    finish(out)
}

pub fn export_pdp<W: Write>(points: &[PdpPoint], w: W) -> Result<()> {
    let mut out = writer(w, &PDP_HEADER)?;
    for p in points {
        out.write_record([
            p.column.clone(),
            p.grid_index.to_string(),
            fmt_num(p.grid_value),
            fmt_num(p.mean_prediction),
        ])?;
    }
    finish(out)
}

pub fn export_audit<W: Write>(scores: &[AuditScore], w: W) -> Result<()> {
    let mut out = writer(w, &AUDIT_HEADER)?;
    for s in scores {
        out.write_record([
            s.instance_id.to_string(),
            s.column.clone(),
            fmt_num(s.smooth_score),
            fmt_num(s.mono_score),
        ])?;
    }
    finish(out)
}

fn parse_num(s: &str, row: usize) -> Result<f64> {
    s.parse().map_err(|_| Error::Row {
        row,
        msg: format!("bad number `{s}`"),
    })
}

fn parse_index(s: &str, row: usize) -> Result<usize> {
    s.parse().map_err(|_| Error::Row {
        row,
        msg: format!("bad index `{s}`"),
    })
}

pub fn read_pdp<R: Read>(r: R) -> Result<Vec<PdpPoint>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        out.push(PdpPoint {
            column: rec[0].to_string(),
            grid_index: parse_index(&rec[1], i + 1)?,
            grid_value: parse_num(&rec[2], i + 1)?,
            mean_prediction: parse_num(&rec[3], i + 1)?,
        });
    }
    Ok(out)
}

pub fn read_audit<R: Read>(r: R) -> Result<Vec<AuditScore>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        out.push(AuditScore {
            instance_id: parse_index(&rec[0], i + 1)?,
            column: rec[1].to_string(),
            smooth_score: parse_num(&rec[2], i + 1)?,
            mono_score: parse_num(&rec[3], i + 1)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;
    use crate::schema::ColumnRef;

    fn grid() -> Grid {
        Grid {
            column: "g".into(),
            kind: ColumnRef::Continuous(0),
            raw: vec![10.0, 20.0, 30.0],
            scaled: vec![0.0, 0.5, 1.0],
        }
    }

    fn constant_net(beta: f64) -> NetworkParams {
        let arch = Architecture::standard(2, vec![3]).with_embedding_dim(2).with_hidden(vec![4]);
        let mut p = NetworkParams::init(&arch, 0).unwrap();
        for s in p.slots_mut() {
            s.fill(0.0);
        }
        p.set_head_bias(beta);
        p
    }

    #[test]
    fn constant_network_gives_flat_curve_scaled_by_exposure() {
        let p = constant_net(0.3);
        let c1 = ice_curve(&p, &[0.2, 0.7], &[1], 1.0, &grid()).unwrap();
        assert!(c1.iter().all(|&v| (v - 0.3f64.exp()).abs() < 1e-15));
        let c2 = ice_curve(&p, &[0.2, 0.7], &[1], 2.0, &grid()).unwrap();
        for (a, b) in c1.iter().zip(&c2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn ties_break_by_instance_id() {
        let s = |id, m| AuditScore {
            instance_id: id,
            column: "g".into(),
            smooth_score: 0.0,
            mono_score: m,
        };
        let scores = vec![s(5, 1.0), s(2, 1.0), s(9, 3.0), s(1, 0.5)];
        let top: Vec<usize> = worst_offenders(&scores, "g", ScoreKind::Mono, 3)
            .iter()
            .map(|a| a.instance_id)
            .collect();
        assert_eq!(top, vec![9, 2, 5]);
    }

    #[test]
    fn number_formatting() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(0.5), "0.5");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(123456.789), "123456.789");
        assert_eq!(fmt_num(-2.5e-9), "-2.5e-9");
        assert_eq!(fmt_num(6.02214076e23), "6.02214076e23");
    }

    #[test]
    fn empty_and_single_curve_exports() {
        let mut buf = Vec::new();
        export_curves(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "instance_id,column,grid_index,grid_value,prediction\n");
        let mut buf = Vec::new();
        export_curves(&ice_points(7, &grid(), &[0.1, 0.2, 0.3]), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().nth(1).unwrap(), "7,g,1,10,0.1");
    }

    #[test]
    fn pdp_round_trip() {
        let values = [0.0712345678912345, 1.0 / 7.0, 2.0e-7];
        let pts = pdp_points(&grid(), &values);
        let mut buf = Vec::new();
        export_pdp(&pts, &mut buf).unwrap();
        let back = read_pdp(buf.as_slice()).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            assert_eq!(a.grid_index, b.grid_index);
            assert!((a.mean_prediction - b.mean_prediction).abs() < 1e-10);
        }
    }
}
