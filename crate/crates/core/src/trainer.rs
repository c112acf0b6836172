//! Minibatch training of the compound loss.
//!
//! Each minibatch is cut into fixed-size chunks. A chunk runs the main
//! forward/backward pass and, for every constrained column, one stacked
//! forward/backward pass over all of its pseudo-rows. Chunk tapes are summed
//! in chunk order, so results do not depend on how many threads ran them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ice::{IceScope, StackedPseudo, WindowSpec};
use crate::network::{backward_into, Architecture, NetworkParams};
use crate::penalties::{unit_deviance, ConstraintSpec, LossParts, ResolvedConstraint};
use crate::schema::{Schema, TabularDataset};
use crate::tensor::{GradTape, Matrix};

/// Rows per unit of work inside a minibatch.
pub const CHUNK_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Deviance only.
    #[default]
    Fcn,
    /// Penalties over the full grid of every constrained column.
    IcenetGlobal,
    /// Penalties over a window around each instance's own value.
    IcenetLocal,
}

impl Mode {
    pub fn scope(self, window: WindowSpec) -> Option<IceScope> {
        match self {
            Mode::Fcn => None,
            Mode::IcenetGlobal => Some(IceScope::Full),
            Mode::IcenetLocal => Some(IceScope::Window(window)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub runs: usize,
    pub mode: Mode,
    pub window: WindowSpec,
    /// Spread chunks (and independent runs) over the rayon pool.
    pub parallel: bool,
    /// Let the starting parameters (epoch 0) win early stopping.
    pub keep_initial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 1024,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 1,
            runs: 10,
            mode: Mode::Fcn,
            window: WindowSpec::default(),
            parallel: true,
            keep_initial: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.runs == 0 {
            problems.push("runs must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("adam betas must lie in [0, 1)".to_string());
        }
        if !(self.epsilon > 0.0) {
            problems.push("adam epsilon must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }
}

/// Adam moment estimates, one pair of matrices per parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(arch: &Architecture) -> Self {
        let zeros: Vec<Matrix> = arch
            .slot_shapes()
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut NetworkParams,
    tape: &GradTape,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if tape.shapes() != params.arch().slot_shapes() || state.m.len() != tape.slots().len() {
        return Err(Error::dim("adam_step", "tape/state shapes do not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let slots = params.slots_mut();
    for (k, slot) in slots.iter_mut().enumerate() {
        let g = tape.slot(k).as_slice();
        let m = state.m[k].as_mut_slice();
        let v = state.v[k].as_mut_slice();
        for (((p, &gi), mi), vi) in slot.as_mut_slice().iter_mut().zip(g).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// The per-observation compound loss averaged over a set of rows.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    schema: &'a Schema,
    constraints: Vec<ResolvedConstraint>,
    scope: Option<IceScope>,
    exposure_scale: bool,
    parallel: bool,
}

/// Sums over a set of rows (not yet averaged).
#[derive(Debug, Clone)]
struct ChunkOutput {
    parts: LossParts,
    tape: Option<GradTape>,
    clamped: usize,
}

impl<'a> Objective<'a> {
    pub fn new(
        schema: &'a Schema,
        spec: &ConstraintSpec,
        mode: Mode,
        window: WindowSpec,
    ) -> Result<Self> {
        let scope = mode.scope(window);
        let constraints = match scope {
            Some(_) => spec.resolve(schema)?,
            None => Vec::new(),
        };
        Ok(Self {
            schema,
            constraints,
            scope,
            exposure_scale: spec.penalty_on_exposure_scale,
            parallel: true,
        })
    }

    /// Uses an already-resolved constraint list as is, including
    /// zero-weight entries.
    pub fn with_constraints(
        schema: &'a Schema,
        constraints: Vec<ResolvedConstraint>,
        scope: Option<IceScope>,
        exposure_scale: bool,
    ) -> Self {
        Self {
            schema,
            constraints,
            scope,
            exposure_scale,
            parallel: true,
        }
    }

    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn constraints(&self) -> &[ResolvedConstraint] {
        &self.constraints
    }

    fn chunk(
        &self,
        params: &NetworkParams,
        data: &TabularDataset,
        rows: &[usize],
        with_grad: bool,
    ) -> Result<ChunkOutput> {
        let sub = data.subset(rows);
        let (mu, cache) = params.forward(&sub.x_cont, &sub.x_cat)?;
        let mut parts = LossParts::default();
        let mut dl_dmu = Vec::with_capacity(rows.len());
        for ((&m, &y), &v) in mu.iter().zip(&sub.y).zip(&sub.v) {
            parts.deviance += unit_deviance(y, m * v);
            dl_dmu.push(2.0 * (v - y / m));
        }
        let clamped = cache.clamped_rows();
        let mut tape = with_grad.then(|| params.arch().zero_tape());
        if let Some(t) = tape.as_mut() {
            backward_into(params, &cache, &dl_dmu, t)?;
        }
        drop(cache);

        if let Some(scope) = self.scope {
            let local: Vec<usize> = (0..rows.len()).collect();
            for c in &self.constraints {
                let grid = &self.schema.grids[c.grid_index];
                let stacked = StackedPseudo::build(&sub, &local, grid, scope);
                let (pmu, pcache) = params.forward(&stacked.x_cont, &stacked.x_cat)?;
                let mut upstream = vec![0.0; pmu.len()];
                for (n, range) in stacked.ranges.iter().enumerate() {
                    let scale = if self.exposure_scale { sub.v[n] } else { 1.0 };
                    let block: Vec<f64> = pmu[range.clone()].iter().map(|m| m * scale).collect();
                    parts.smoothing += c.smoothing(&block);
                    parts.monotonicity += c.monotonicity(&block);
                    if with_grad {
                        for (u, g) in range.clone().zip(c.grad(&block)) {
                            upstream[u] = g * scale;
                        }
                    }
                }
                if let Some(t) = tape.as_mut() {
                    backward_into(params, &pcache, &upstream, t)?;
                }
            }
        }
        Ok(ChunkOutput {
            parts,
            tape,
            clamped,
        })
    }

    fn run(
        &self,
        params: &NetworkParams,
        data: &TabularDataset,
        rows: &[usize],
        with_grad: bool,
    ) -> Result<(LossParts, Option<GradTape>, usize)> {
        if rows.is_empty() {
            return Err(Error::Invalid("objective over zero rows".into()));
        }
        let chunks: Vec<&[usize]> = rows.chunks(CHUNK_ROWS).collect();
        let outs: Vec<ChunkOutput> = if self.parallel && chunks.len() > 1 {
            chunks
                .par_iter()
                .map(|c| self.chunk(params, data, c, with_grad))
                .collect::<Result<_>>()?
        } else {
            chunks
                .iter()
                .map(|c| self.chunk(params, data, c, with_grad))
                .collect::<Result<_>>()?
        };
        let mut parts = LossParts::default();
        let mut tape: Option<GradTape> = None;
        let mut clamped = 0;
        for o in outs {
            parts.add(&o.parts);
            clamped += o.clamped;
            if let Some(t) = o.tape {
                match tape.as_mut() {
                    None => tape = Some(t),
                    Some(acc) => acc.merge(&t)?,
                }
            }
        }
        let inv = 1.0 / rows.len() as f64;
        if let Some(t) = tape.as_mut() {
            t.scale(inv);
        }
        Ok((parts.scaled(inv), tape, clamped))
    }

    /// Mean compound loss over `rows`.
    pub fn loss(&self, params: &NetworkParams, data: &TabularDataset, rows: &[usize]) -> Result<LossParts> {
        Ok(self.run(params, data, rows, false)?.0)
    }

    /// Mean compound loss and its gradient. The third value counts main
    /// rows whose link input hit the clamp.
    pub fn loss_and_grad(
        &self,
        params: &NetworkParams,
        data: &TabularDataset,
        rows: &[usize],
    ) -> Result<(LossParts, GradTape, usize)> {
        let (p, t, c) = self.run(params, data, rows, true)?;
        Ok((p, t.expect("gradient requested"), c))
    }
}

/// `mu` for every row, computed in chunks.
pub fn predict_mu(params: &NetworkParams, data: &TabularDataset) -> Result<Vec<f64>> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Vec<f64>> = rows
        .par_chunks(4096)
        .map(|c| {
            let sub = data.subset(c);
            params.predict(&sub.x_cont, &sub.x_cat)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Expected counts `mu * v` for every row.
pub fn predict_counts(params: &NetworkParams, data: &TabularDataset) -> Result<Vec<f64>> {
    Ok(predict_mu(params, data)?
        .into_iter()
        .zip(&data.v)
        .map(|(m, v)| m * v)
        .collect())
}

/// Mean Poisson deviance of the model's expected counts.
pub fn mean_deviance(params: &NetworkParams, data: &TabularDataset) -> Result<f64> {
    let yhat = predict_counts(params, data)?;
    crate::penalties::mean_poisson_deviance(&data.y, &yhat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learn_dev: f64,
    pub valid_dev: f64,
    /// Mean penalty parts over the epoch's minibatches (0 at epoch 0).
    pub smooth_part: f64,
    pub mono_part: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub learn: f64,
    pub validation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub params: NetworkParams,
    pub trace: Vec<EpochRecord>,
    pub report: MetricReport,
}

impl RunResult {
    pub fn with_test(mut self, test: &TabularDataset) -> Result<Self> {
        self.report.test = Some(mean_deviance(&self.params, test)?);
        Ok(self)
    }
}

/// Learning and validation data sharing one schema.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub schema: &'a Schema,
    pub learn: &'a TabularDataset,
    pub validation: &'a TabularDataset,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains from `init` (or a fresh initialisation from `cfg.seed`) and
/// returns the parameters of the epoch with the lowest validation deviance.
/// Epoch 0 is the starting point; with `cfg.keep_initial` it is a candidate
/// too, so the result is never worse on the validation set than where
/// training began.
pub fn train(
    data: TrainData<'_>,
    arch: &Architecture,
    spec: &ConstraintSpec,
    cfg: &TrainConfig,
    init: Option<NetworkParams>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunResult> {
    cfg.validate()?;
    if data.learn.is_empty() || data.validation.is_empty() {
        return Err(Error::Invalid("learning and validation sets must be non-empty".into()));
    }
    let objective = Objective::new(data.schema, spec, cfg.mode, cfg.window)?.parallel(cfg.parallel);
    let mut params = match init {
        Some(p) => {
            if p.arch() != arch {
                return Err(Error::Invalid("warm-start parameters have a different architecture".into()));
            }
            p
        }
        None => NetworkParams::init(arch, cfg.seed)?,
    };
    let mut adam = AdamState::new(arch);

    let record0 = EpochRecord {
        epoch: 0,
        learn_dev: mean_deviance(&params, data.learn)?,
        valid_dev: mean_deviance(&params, data.validation)?,
        smooth_part: 0.0,
        mono_part: 0.0,
    };
    on_epoch(&record0);
    let mut trace = vec![record0];
    let mut best = cfg.keep_initial.then(|| (0usize, record0.valid_dev, params.clone()));

    let mut order: Vec<usize> = (0..data.learn.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut penalty_sum = LossParts::default();
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (parts, tape, clamped) = objective.loss_and_grad(&params, data.learn, batch)?;
            if !parts.total().is_finite() || !tape.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    reason: format!("non-finite loss {parts:?}"),
                });
            }
            if clamped * 100 > batch.len() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    reason: format!("{clamped} of {} predictions hit the link clamp", batch.len()),
                });
            }
            adam_step(&mut params, &tape, &mut adam, cfg)?;
            penalty_sum.add(&parts);
            batches += 1;
        }
        let rec = EpochRecord {
            epoch,
            learn_dev: mean_deviance(&params, data.learn)?,
            valid_dev: mean_deviance(&params, data.validation)?,
            smooth_part: penalty_sum.smoothing / batches as f64,
            mono_part: penalty_sum.monotonicity / batches as f64,
        };
        if !rec.valid_dev.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: batches,
                reason: "non-finite validation deviance".into(),
            });
        }
        on_epoch(&rec);
        if best.as_ref().is_none_or(|b| rec.valid_dev < b.1) {
            best = Some((epoch, rec.valid_dev, params.clone()));
        }
        trace.push(rec);
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    let report = MetricReport {
        learn: trace[best_epoch].learn_dev,
        validation: trace[best_epoch].valid_dev,
        test: None,
    };
    Ok(RunResult {
        seed: cfg.seed,
        best_epoch,
        params: best_params,
        trace,
        report,
    })
}

/// `cfg.runs` independent runs with seeds `cfg.seed + r`.
pub fn train_runs(
    data: TrainData<'_>,
    arch: &Architecture,
    spec: &ConstraintSpec,
    cfg: &TrainConfig,
) -> Result<Vec<RunResult>> {
    let one = |r: usize| {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(r as u64);
        train(data, arch, spec, &c, None, |rec| {
            log::info!(
                "seed {} epoch {:>3}  learn {:.6}  valid {:.6}  smooth {:.3e}  mono {:.3e}",
                c.seed,
                rec.epoch,
                rec.learn_dev,
                rec.valid_dev,
                rec.smooth_part,
                rec.mono_part
            )
        })
    };
    if cfg.parallel {
        (0..cfg.runs).into_par_iter().map(one).collect()
    } else {
        (0..cfg.runs).map(one).collect()
    }
}

/// Ensemble mean of expected counts `mu_m(x) * v` over models.
pub fn nagging(models: &[&NetworkParams], data: &TabularDataset) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Invalid("nagging needs at least one model".into()))?;
    if models.iter().any(|m| m.arch().n_continuous != first.arch().n_continuous
        || m.arch().cardinalities != first.arch().cardinalities)
    {
        return Err(Error::Schema("nagging models disagree on their inputs".into()));
    }
    let mut acc = vec![0.0; data.len()];
    for m in models {
        for (a, p) in acc.iter_mut().zip(predict_counts(m, data)?) {
            *a += p;
        }
    }
    let k = models.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Fits a network to teacher expected counts, used as continuous
/// pseudo-responses under the Poisson deviance.
pub fn distill(
    data: TrainData<'_>,
    teacher_learn: &[f64],
    teacher_valid: &[f64],
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    if teacher_learn.iter().chain(teacher_valid).any(|&t| !(t > 0.0)) {
        return Err(Error::Invalid("teacher predictions must be positive".into()));
    }
    let learn = data.learn.with_response(teacher_learn.to_vec())?;
    let validation = data.validation.with_response(teacher_valid.to_vec())?;
    let mut c = cfg.clone();
    c.mode = Mode::Fcn;
    train(
        TrainData {
            schema: data.schema,
            learn: &learn,
            validation: &validation,
        },
        arch,
        &ConstraintSpec::default(),
        &c,
        None,
        |rec| log::info!("distill epoch {:>3}  valid {:.6e}", rec.epoch, rec.valid_dev),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the unconstrained starting model.
    pub scale: Option<f64>,
    pub learn: f64,
    pub validation: f64,
    pub test: f64,
}

impl SweepRow {
    pub fn label(&self) -> String {
        match self.scale {
            None => "meta-model".to_string(),
            Some(s) if s > 0.0 => format!("{}", s.log10().round()),
            Some(s) => format!("{s}"),
        }
    }
}

/// Decades `10^lo ..= 10^hi`.
pub fn decade_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| 10f64.powi(e)).collect()
}

/// Fine-tunes `base` once per scale with every λ multiplied by the scale,
/// early-stopping over the fine-tuning epochs only. The first row reports
/// `base` itself.
pub fn lambda_sweep(
    base: &NetworkParams,
    scales: &[f64],
    data: TrainData<'_>,
    test: &TabularDataset,
    spec: &ConstraintSpec,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let mut c = cfg.clone();
    if c.mode == Mode::Fcn {
        c.mode = Mode::IcenetGlobal;
    }
    c.keep_initial = false;
    let mut rows = vec![SweepRow {
        scale: None,
        learn: mean_deviance(base, data.learn)?,
        validation: mean_deviance(base, data.validation)?,
        test: mean_deviance(base, test)?,
    }];
    for &s in scales {
        let r = train(data, base.arch(), &spec.scaled(s), &c, Some(base.clone()), |rec| {
            log::info!("scale {s:e} epoch {:>3}  valid {:.6}", rec.epoch, rec.valid_dev)
        })?;
        rows.push(SweepRow {
            scale: Some(s),
            learn: r.report.learn,
            validation: r.report.validation,
            test: mean_deviance(&r.params, test)?,
        });
    }
    Ok(rows)
}
