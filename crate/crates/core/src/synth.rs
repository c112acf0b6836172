//! Synthetic claim-count portfolios with a known multiplicative rate.
//!
//! Every covariate contributes `exp(f_j(x_j))` to the true frequency
//! `mu*(x) = base * prod_j exp(f_j(x_j))`, and counts are drawn as
//! `Poisson(mu*(x) v)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ColumnRoles, RawRecord};

/// Effect of a numeric covariate, as a function of its position
/// `s = (x - lo) / (hi - lo)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Effect {
    Zero,
    /// `scale * s^power`: smooth and increasing for positive scale.
    Power { scale: f64, power: f64 },
    /// `height * floor(steps * s) / steps`: increasing staircase.
    Steps { height: f64, steps: usize },
    /// `amplitude * (exp(-decay s) + 0.5 sin(2 pi cycles s))`: smooth, not
    /// monotone.
    Wave {
        amplitude: f64,
        decay: f64,
        cycles: f64,
    },
}

impl Effect {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Effect::Zero => 0.0,
            Effect::Power { scale, power } => scale * s.max(0.0).powf(power),
            Effect::Steps { height, steps } => {
                let k = (steps as f64 * s).floor().clamp(0.0, steps as f64 - 1.0);
                height * k / (steps as f64 - 1.0).max(1.0)
            }
            Effect::Wave {
                amplitude,
                decay,
                cycles,
            } => amplitude * ((-decay * s).exp() + 0.5 * (2.0 * PI * cycles * s).sin()),
        }
    }

    fn bound(&self) -> f64 {
        match *self {
            Effect::Zero => 0.0,
            Effect::Power { scale, .. } => scale.abs(),
            Effect::Steps { height, .. } => height.abs(),
            Effect::Wave { amplitude, .. } => 1.5 * amplitude.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Covariate {
    /// Integers drawn uniformly from `lo..=hi`.
    Integer {
        name: String,
        lo: i64,
        hi: i64,
        effect: Effect,
    },
    /// Reals drawn uniformly from `[lo, hi)`.
    Real {
        name: String,
        lo: f64,
        hi: f64,
        effect: Effect,
    },
    /// Levels `<prefix>1..<prefix>K` drawn uniformly, one log-effect each.
    Levels { name: String, effects: Vec<f64> },
}

impl Covariate {
    pub fn name(&self) -> &str {
        match self {
            Covariate::Integer { name, .. }
            | Covariate::Real { name, .. }
            | Covariate::Levels { name, .. } => name,
        }
    }

    fn is_numeric(&self) -> bool {
        !matches!(self, Covariate::Levels { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub rows: usize,
    pub base_frequency: f64,
    /// Share of policies with a full year of exposure; the rest are uniform
    /// on `[min_exposure, 1)`.
    pub full_year_share: f64,
    pub min_exposure: f64,
    pub covariates: Vec<Covariate>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rows: 50_000,
            base_frequency: 0.07,
            full_year_share: 0.5,
            min_exposure: 0.05,
            covariates: vec![
                Covariate::Integer {
                    name: "age".into(),
                    lo: 18,
                    hi: 77,
                    effect: Effect::Wave {
                        amplitude: 0.6,
                        decay: 6.0,
                        cycles: 1.0,
                    },
                },
                Covariate::Integer {
                    name: "bonus".into(),
                    lo: 50,
                    hi: 100,
                    effect: Effect::Power {
                        scale: 1.2,
                        power: 1.5,
                    },
                },
                Covariate::Real {
                    name: "density".into(),
                    lo: 0.0,
                    hi: 10.0,
                    effect: Effect::Steps {
                        height: 0.8,
                        steps: 5,
                    },
                },
                Covariate::Levels {
                    name: "brand".into(),
                    effects: vec![-0.3, -0.2, -0.1, 0.0, 0.0, 0.05, 0.1, 0.15, 0.2, 0.3],
                },
                Covariate::Levels {
                    name: "area".into(),
                    effects: vec![-0.2, 0.0, 0.1, 0.3],
                },
            ],
            seed: 2024,
        }
    }
}

/// Column name of the generated response.
pub const RESPONSE: &str = "claims";
/// Column name of the generated exposure.
pub const EXPOSURE: &str = "exposure";

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.rows == 0 {
            problems.push("rows must be positive".to_string());
        }
        if !(self.base_frequency > 0.0 && self.base_frequency.is_finite()) {
            problems.push("base_frequency must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.full_year_share) {
            problems.push("full_year_share must lie in [0, 1]".to_string());
        }
        if !(self.min_exposure > 0.0 && self.min_exposure < 1.0) {
            problems.push("min_exposure must lie in (0, 1)".to_string());
        }
        for c in &self.covariates {
            match c {
                Covariate::Integer { name, lo, hi, effect } => {
                    if hi <= lo {
                        problems.push(format!("{name}: need lo < hi"));
                    }
                    if !effect.bound().is_finite() {
                        problems.push(format!("{name}: effect must be bounded"));
                    }
                }
                Covariate::Real { name, lo, hi, effect } => {
                    if !(hi > lo) {
                        problems.push(format!("{name}: need lo < hi"));
                    }
                    if !effect.bound().is_finite() {
                        problems.push(format!("{name}: effect must be bounded"));
                    }
                }
                Covariate::Levels { name, effects } => {
                    if effects.len() < 2 {
                        problems.push(format!("{name}: need at least 2 levels"));
                    }
                    if effects.iter().any(|e| !e.is_finite()) {
                        problems.push(format!("{name}: effects must be finite"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }

    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles {
            response: RESPONSE.into(),
            exposure: EXPOSURE.into(),
            continuous: self
                .covariates
                .iter()
                .filter(|c| c.is_numeric())
                .map(|c| c.name().to_string())
                .collect(),
            categorical: self
                .covariates
                .iter()
                .filter(|c| !c.is_numeric())
                .map(|c| c.name().to_string())
                .collect(),
        }
    }

    /// True frequency `mu*(x)` of a record laid out as [`SynthSpec::roles`].
    pub fn true_frequency(&self, rec: &RawRecord) -> f64 {
        let mut log_mu = self.base_frequency.ln();
        let (mut i, mut t) = (0, 0);
        for c in &self.covariates {
            match c {
                Covariate::Integer { lo, hi, effect, .. } => {
                    let s = (rec.continuous[i] - *lo as f64) / (*hi - *lo) as f64;
                    log_mu += effect.eval(s);
                    i += 1;
                }
                Covariate::Real { lo, hi, effect, .. } => {
                    log_mu += effect.eval((rec.continuous[i] - lo) / (hi - lo));
                    i += 1;
                }
                Covariate::Levels { effects, .. } => {
                    let k: usize = rec.categorical[t][1..].parse().expect("generated level");
                    log_mu += effects[k - 1];
                    t += 1;
                }
            }
        }
        log_mu.exp()
    }

    pub fn generate(&self) -> Result<Vec<RawRecord>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.rows);
        for row in 1..=self.rows {
            let mut continuous = Vec::new();
            let mut categorical = Vec::new();
            for c in &self.covariates {
                match c {
                    Covariate::Integer { lo, hi, .. } => {
                        continuous.push(rng.random_range(*lo..=*hi) as f64)
                    }
                    Covariate::Real { lo, hi, .. } => continuous.push(rng.random_range(*lo..*hi)),
                    Covariate::Levels { effects, .. } => {
                        categorical.push(format!("L{}", rng.random_range(1..=effects.len())))
                    }
                }
            }
            let exposure = if rng.random::<f64>() < self.full_year_share {
                1.0
            } else {
                rng.random_range(self.min_exposure..1.0)
            };
            let mut rec = RawRecord {
                row,
                response: 0.0,
                exposure,
                continuous,
                categorical,
            };
            let lambda = self.true_frequency(&rec) * exposure;
            rec.response = Poisson::new(lambda)
                .map_err(|e| Error::Invalid(format!("poisson rate {lambda}: {e}")))?
                .sample(&mut rng);
            out.push(rec);
        }
        Ok(out)
    }
}
