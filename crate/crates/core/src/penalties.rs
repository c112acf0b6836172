//! Poisson deviance, the third-difference smoothing penalty and the
//! first-difference monotonicity hinge, with exact gradients with respect to
//! the ICE outputs they consume.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::schema::{ColumnRef, Schema};

/// Order of the smoothing differences.
pub const SMOOTH_ORDER: usize = 3;

/// Required direction of a monotone covariate effect.
///
/// Serialised as the sign `delta` multiplying first differences in the
/// hinge: `-1` penalises decreases (enforces an increasing effect) and `+1`
/// penalises increases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    Increasing,
    Decreasing,
}

impl Direction {
    pub fn delta(self) -> f64 {
        match self {
            Direction::Increasing => -1.0,
            Direction::Decreasing => 1.0,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Direction::Increasing => Direction::Decreasing,
            Direction::Decreasing => Direction::Increasing,
        }
    }
}

impl Serialize for Direction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.delta() as i8)
    }
}

impl<'de> Deserialize<'de> for Direction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match i64::deserialize(d)? {
            -1 => Ok(Direction::Increasing),
            1 => Ok(Direction::Decreasing),
            other => Err(serde::de::Error::custom(format!(
                "direction must be -1 or 1, got {other}"
            ))),
        }
    }
}

/// Differences of order `order`: `len - order` values.
pub fn diff(seq: &[f64], order: usize) -> Result<Vec<f64>> {
    if order == 0 || seq.len() <= order {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            order,
        });
    }
    let mut cur = seq.to_vec();
    for _ in 0..order {
        cur = cur.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(cur)
}

/// Adjoint of the first difference operator: maps `g` of length `m` to a
/// vector of length `m + 1`.
fn diff1_adjoint(g: &[f64]) -> Vec<f64> {
    let m = g.len();
    let mut out = vec![0.0; m + 1];
    for (k, &gk) in g.iter().enumerate() {
        out[k + 1] += gk;
        out[k] -= gk;
    }
    out
}

/// `lambda * sum (third difference)^2`; blocks shorter than 4 contribute 0.
pub fn smoothing_loss(block: &[f64], lambda: f64) -> f64 {
    if lambda == 0.0 || block.len() <= SMOOTH_ORDER {
        return 0.0;
    }
    let d3 = diff(block, SMOOTH_ORDER).expect("length checked");
    lambda * d3.iter().map(|d| d * d).sum::<f64>()
}

/// `lambda * sum max(delta * first difference, 0)`.
pub fn monotonicity_loss(block: &[f64], lambda: f64, direction: Direction) -> f64 {
    if lambda == 0.0 || block.len() < 2 {
        return 0.0;
    }
    let delta = direction.delta();
    lambda
        * block
            .windows(2)
            .map(|w| (delta * (w[1] - w[0])).max(0.0))
            .sum::<f64>()
}

pub fn smoothing_grad(block: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 0.0 || block.len() <= SMOOTH_ORDER {
        return vec![0.0; block.len()];
    }
    let d3 = diff(block, SMOOTH_ORDER).expect("length checked");
    let mut g: Vec<f64> = d3.iter().map(|d| 2.0 * lambda * d).collect();
    for _ in 0..SMOOTH_ORDER {
        g = diff1_adjoint(&g);
    }
    g
}

/// Subgradient of [`monotonicity_loss`]; inactive or exactly-zero hinge
/// terms contribute nothing.
pub fn monotonicity_grad(block: &[f64], lambda: f64, direction: Direction) -> Vec<f64> {
    let mut g = vec![0.0; block.len()];
    if lambda == 0.0 {
        return g;
    }
    let delta = direction.delta();
    for k in 1..block.len() {
        if delta * (block[k] - block[k - 1]) > 0.0 {
            g[k] += lambda * delta;
            g[k - 1] -= lambda * delta;
        }
    }
    g
}

/// Poisson unit deviance `2 (yhat - y + y ln(y / yhat))`, with the log term
/// zero at `y = 0`.
pub fn poisson_deviance(y: f64, yhat: f64) -> Result<f64> {
    if !(yhat > 0.0) || !yhat.is_finite() {
        return Err(Error::Invalid(format!("prediction must be positive, got {yhat}")));
    }
    if y < 0.0 {
        return Err(Error::Invalid(format!("response must be non-negative, got {y}")));
    }
    Ok(unit_deviance(y, yhat))
}

#[inline]
pub(crate) fn unit_deviance(y: f64, yhat: f64) -> f64 {
    let log_term = if y > 0.0 { y * (y / yhat).ln() } else { 0.0 };
    2.0 * (yhat - y + log_term)
}

/// Mean unit deviance over observations.
pub fn mean_poisson_deviance(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::dim(
            "mean_poisson_deviance",
            format!("{} responses, {} predictions", y.len(), yhat.len()),
        ));
    }
    let mut s = 0.0;
    for (&yi, &pi) in y.iter().zip(yhat) {
        s += poisson_deviance(yi, pi)?;
    }
    Ok(s / y.len() as f64)
}

/// `d deviance / d yhat`.
#[inline]
pub fn poisson_deviance_grad(y: f64, yhat: f64) -> f64 {
    2.0 * (1.0 - y / yhat)
}

/// Penalty settings for one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnConstraint {
    pub column: String,
    #[serde(default)]
    pub smooth_lambda: f64,
    #[serde(default)]
    pub mono_lambda: f64,
    #[serde(default)]
    pub direction: Direction,
}

impl ColumnConstraint {
    pub fn new(column: &str, smooth_lambda: f64, mono_lambda: f64, direction: Direction) -> Self {
        Self {
            column: column.to_string(),
            smooth_lambda,
            mono_lambda,
            direction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ConstraintSpec {
    #[serde(default)]
    pub columns: Vec<ColumnConstraint>,
    /// Penalise ICE outputs on the `mu * v` scale instead of the `mu` scale.
    #[serde(default)]
    pub penalty_on_exposure_scale: bool,
}

impl ConstraintSpec {
    pub fn new(columns: Vec<ColumnConstraint>) -> Self {
        Self {
            columns,
            penalty_on_exposure_scale: false,
        }
    }

    /// Penalties for the French MTPL covariates used by the global ICEnet.
    pub fn mtpl_global() -> Self {
        use Direction::Increasing as Inc;
        Self::new(vec![
            ColumnConstraint::new("DrivAge", 10.0, 0.0, Inc),
            ColumnConstraint::new("VehAge", 1.0, 0.0, Inc),
            ColumnConstraint::new("BonusMalus", 1.0, 100.0, Inc),
            ColumnConstraint::new("Density", 1.0, 100.0, Inc),
            ColumnConstraint::new("VehPower", 1.0, 100.0, Inc),
        ])
    }

    /// Stronger penalties used with the windowed (local) variant.
    pub fn mtpl_local() -> Self {
        use Direction::Increasing as Inc;
        Self::new(vec![
            ColumnConstraint::new("DrivAge", 200.0, 0.0, Inc),
            ColumnConstraint::new("VehAge", 10.0, 0.0, Inc),
            ColumnConstraint::new("BonusMalus", 10.0, 200.0, Inc),
            ColumnConstraint::new("Density", 10.0, 200.0, Inc),
            ColumnConstraint::new("VehPower", 10.0, 200.0, Inc),
        ])
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.column.clone()).collect()
    }

    /// Every λ multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for c in &mut s.columns {
            c.smooth_lambda *= factor;
            c.mono_lambda *= factor;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for c in &self.columns {
            if !(c.smooth_lambda >= 0.0 && c.smooth_lambda.is_finite()) {
                problems.push(format!("{}: smooth_lambda must be >= 0", c.column));
            }
            if !(c.mono_lambda >= 0.0 && c.mono_lambda.is_finite()) {
                problems.push(format!("{}: mono_lambda must be >= 0", c.column));
            }
        }
        let mut names: Vec<&str> = self.columns.iter().map(|c| c.column.as_str()).collect();
        names.sort_unstable();
        for w in names.windows(2) {
            if w[0] == w[1] {
                problems.push(format!("{} listed twice", w[0]));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }

    /// Binds the spec to a schema's grids. Columns with no active penalty
    /// are dropped.
    pub fn resolve(&self, schema: &Schema) -> Result<Vec<ResolvedConstraint>> {
        self.validate()?;
        let mut out = Vec::new();
        for c in &self.columns {
            if c.smooth_lambda == 0.0 && c.mono_lambda == 0.0 {
                continue;
            }
            let grid_index = schema
                .grids
                .iter()
                .position(|g| g.column == c.column)
                .ok_or_else(|| Error::Schema(format!("no grid for constrained column `{}`", c.column)))?;
            let grid = &schema.grids[grid_index];
            let mut smooth_lambda = c.smooth_lambda;
            if smooth_lambda > 0.0 && grid.len() <= SMOOTH_ORDER {
                log::warn!(
                    "column `{}` has {} grid points; smoothing needs at least {}, skipped",
                    c.column,
                    grid.len(),
                    SMOOTH_ORDER + 1
                );
                smooth_lambda = 0.0;
            }
            out.push(ResolvedConstraint {
                column: c.column.clone(),
                grid_index,
                kind: grid.kind,
                smooth_lambda,
                mono_lambda: c.mono_lambda,
                direction: c.direction,
            });
        }
        Ok(out)
    }
}

/// A constraint bound to a schema grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConstraint {
    pub column: String,
    pub grid_index: usize,
    pub kind: ColumnRef,
    pub smooth_lambda: f64,
    pub mono_lambda: f64,
    pub direction: Direction,
}

impl ResolvedConstraint {
    pub fn smoothing(&self, block: &[f64]) -> f64 {
        smoothing_loss(block, self.smooth_lambda)
    }

    pub fn monotonicity(&self, block: &[f64]) -> f64 {
        monotonicity_loss(block, self.mono_lambda, self.direction)
    }

    /// Gradient of smoothing plus monotonicity penalty w.r.t. the block.
    pub fn grad(&self, block: &[f64]) -> Vec<f64> {
        let mut g = smoothing_grad(block, self.smooth_lambda);
        for (a, b) in g
            .iter_mut()
            .zip(monotonicity_grad(block, self.mono_lambda, self.direction))
        {
            *a += b;
        }
        g
    }
}

/// ICE outputs of one instance for one constrained column.
#[derive(Debug, Clone, PartialEq)]
pub struct IceBlock {
    /// Position in the resolved constraint list.
    pub constraint: usize,
    /// Grid indices the values belong to.
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub deviance: f64,
    pub smoothing: f64,
    pub monotonicity: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.deviance + self.smoothing + self.monotonicity
    }

    pub fn add(&mut self, other: &LossParts) {
        self.deviance += other.deviance;
        self.smoothing += other.smoothing;
        self.monotonicity += other.monotonicity;
    }

    pub fn scaled(&self, f: f64) -> LossParts {
        LossParts {
            deviance: self.deviance * f,
            smoothing: self.smoothing * f,
            monotonicity: self.monotonicity * f,
        }
    }
}

/// Compound per-observation loss: deviance plus both penalties over every
/// constrained column.
pub fn compound_loss(
    y: f64,
    yhat: f64,
    blocks: &[IceBlock],
    constraints: &[ResolvedConstraint],
) -> Result<LossParts> {
    let mut parts = LossParts {
        deviance: poisson_deviance(y, yhat)?,
        ..Default::default()
    };
    for (k, c) in constraints.iter().enumerate() {
        let block = blocks
            .iter()
            .find(|b| b.constraint == k)
            .ok_or_else(|| Error::Invalid(format!("no ICE block for column `{}`", c.column)))?;
        parts.smoothing += c.smoothing(&block.values);
        parts.monotonicity += c.monotonicity(&block.values);
    }
    Ok(parts)
}

/// Gradient of the penalty part of [`compound_loss`] w.r.t. every block.
pub fn penalty_grads(blocks: &[IceBlock], constraints: &[ResolvedConstraint]) -> Vec<Vec<f64>> {
    blocks
        .iter()
        .map(|b| constraints[b.constraint].grad(&b.values))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diff_examples() {
        assert_eq!(diff(&[4.0; 6], 2).unwrap(), vec![0.0; 4]);
        let quad: Vec<f64> = (0..8).map(|u| (u * u) as f64).collect();
        assert_eq!(diff(&quad, 3).unwrap(), vec![0.0; 5]);
        assert_eq!(diff(&[0.0, 0.0, 0.0, 1.0], 3).unwrap(), vec![1.0]);
        assert!(matches!(
            diff(&[1.0, 2.0, 3.0], 3),
            Err(Error::SequenceTooShort { len: 3, order: 3 })
        ));
    }

    #[test]
    fn smoothing_examples() {
        let lin: Vec<f64> = (0..7).map(|u| 0.5 + 2.0 * u as f64).collect();
        assert_eq!(smoothing_loss(&lin, 3.0), 0.0);
        assert_eq!(smoothing_loss(&[0.0, 0.0, 0.0, 1.0], 1.0), 1.0);
        assert_eq!(smoothing_loss(&[3.0, -1.0, 8.0, 0.2, 5.0], 0.0), 0.0);
        assert_eq!(smoothing_loss(&[3.0, -1.0, 8.0], 1.0), 0.0);
    }

    #[test]
    fn monotonicity_examples() {
        use Direction::*;
        assert_eq!(monotonicity_loss(&[0.1, 0.2, 0.5, 0.9], 100.0, Increasing), 0.0);
        assert_eq!(monotonicity_loss(&[2.0, 1.0], 100.0, Increasing), 100.0);
        assert_eq!(monotonicity_loss(&[2.0, 1.0], 100.0, Decreasing), 0.0);
    }

    #[test]
    fn direction_serialises_as_sign() {
        assert_eq!(serde_json::to_string(&Direction::Increasing).unwrap(), "-1");
        let d: Direction = serde_json::from_str("1").unwrap();
        assert_eq!(d, Direction::Decreasing);
        assert!(serde_json::from_str::<Direction>("0").is_err());
    }

    #[test]
    fn deviance_examples() {
        assert_eq!(poisson_deviance(3.0, 3.0).unwrap(), 0.0);
        assert!((poisson_deviance(0.0, 0.35).unwrap() - 0.7).abs() < 1e-15);
        let expect = 2.0 * (2.0 - 1.0 + (0.5f64).ln());
        assert!((poisson_deviance(1.0, 2.0).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.61371).abs() < 1e-5);
        assert!(poisson_deviance(1.0, 0.0).is_err());
        assert!(poisson_deviance(1.0, -2.0).is_err());
    }

    fn one_constraint(s: f64, m: f64) -> Vec<ResolvedConstraint> {
        vec![ResolvedConstraint {
            column: "x".into(),
            grid_index: 0,
            kind: ColumnRef::Continuous(0),
            smooth_lambda: s,
            mono_lambda: m,
            direction: Direction::Increasing,
        }]
    }

    fn block(values: Vec<f64>) -> IceBlock {
        IceBlock {
            constraint: 0,
            indices: (0..values.len()).collect(),
            values,
        }
    }

    #[test]
    fn compound_loss_reduces_and_recomposes() {
        let b = vec![block(vec![0.3, 0.1, 0.6, 0.2, 0.9])];
        let p = compound_loss(1.0, 0.4, &b, &one_constraint(0.0, 0.0)).unwrap();
        assert_eq!(p.total(), poisson_deviance(1.0, 0.4).unwrap());

        let p = compound_loss(2.0, 2.0, &[block(vec![1.0, 2.0, 3.0, 4.0])], &one_constraint(5.0, 50.0)).unwrap();
        assert_eq!(p.total(), 0.0);

        let c = one_constraint(2.5, 7.0);
        let p = compound_loss(1.0, 0.4, &b, &c).unwrap();
        let expect = poisson_deviance(1.0, 0.4).unwrap()
            + smoothing_loss(&b[0].values, 2.5)
            + monotonicity_loss(&b[0].values, 7.0, Direction::Increasing);
        assert!((p.total() - expect).abs() < 1e-14);
        assert!(compound_loss(1.0, 0.4, &[], &c).is_err());
    }

    #[test]
    fn zero_gradients_where_constraints_hold() {
        let lin: Vec<f64> = (0..6).map(|u| u as f64 * 0.3).collect();
        assert!(smoothing_grad(&lin, 4.0).iter().all(|&g| g.abs() < 1e-12));
        assert!(monotonicity_grad(&lin, 4.0, Direction::Increasing)
            .iter()
            .all(|&g| g == 0.0));
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn penalty_gradients_match_finite_differences(
            block in prop::collection::vec(-2.0f64..2.0, 2..15),
            ls in 0.0f64..20.0, lm in 0.0f64..200.0, inc in any::<bool>())
        {
            let dir = if inc { Direction::Increasing } else { Direction::Decreasing };
            // keep clear of hinge kinks
            prop_assume!(block.windows(2).all(|w| (w[1] - w[0]).abs() > 1e-4));
            let h = 1e-6;
            let f = |b: &[f64]| smoothing_loss(b, ls) + monotonicity_loss(b, lm, dir);
            let fd = central_diff(f, &block, h);
            let mut an = smoothing_grad(&block, ls);
            for (a, m) in an.iter_mut().zip(monotonicity_grad(&block, lm, dir)) {
                *a += m;
            }
            let abs_tol = 1e-9 * (1.0 + ls + lm);
            for (a, n) in an.iter().zip(&fd) {
                let err = (a - n).abs();
                prop_assert!(err < abs_tol || err / a.abs().max(n.abs()) < 1e-5, "{a} vs {n}");
            }
        }

        #[test]
        fn penalties_are_nonnegative_and_symmetric(
            block in prop::collection::vec(-5.0f64..5.0, 1..20), lam in 0.0f64..100.0)
        {
            prop_assert!(smoothing_loss(&block, lam) >= 0.0);
            let inc = monotonicity_loss(&block, lam, Direction::Increasing);
            prop_assert!(inc >= 0.0);
            let rev: Vec<f64> = block.iter().rev().copied().collect();
            let back = monotonicity_loss(&rev, lam, Direction::Decreasing);
            prop_assert!((inc - back).abs() <= 1e-12 * (1.0 + inc.abs()));
        }

        #[test]
        fn smoothing_ignores_added_quadratics(
            block in prop::collection::vec(-1.0f64..1.0, 4..15),
            a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0)
        {
            let base = smoothing_loss(&block, 1.0);
            let shifted: Vec<f64> = block.iter().enumerate()
                .map(|(u, v)| { let u = u as f64; v + a + b * u + c * u * u })
                .collect();
            prop_assert!((smoothing_loss(&shifted, 1.0) - base).abs() < 1e-9 * (1.0 + base));
        }

        #[test]
        fn monotone_blocks_have_zero_hinge(mut block in prop::collection::vec(-5.0f64..5.0, 2..20)) {
            block.sort_by(f64::total_cmp);
            prop_assert_eq!(monotonicity_loss(&block, 10.0, Direction::Increasing), 0.0);
            block.reverse();
            prop_assert_eq!(monotonicity_loss(&block, 10.0, Direction::Decreasing), 0.0);
        }
    }
}
