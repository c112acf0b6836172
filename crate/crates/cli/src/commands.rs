//! One function per subcommand. Each validates the whole configuration
//! first and derives every output from (config, seed, input files).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use icenet_core::interpret::{
    audit, export_audit, export_curves, export_pdp, ice_curve, ice_points, mean_scores, pdp, pdp_points,
    score_differences, worst_offenders, AuditScore, IcePoint, ScoreKind,
};
use icenet_core::schema::{ingest_csv, write_records};
use icenet_core::trainer::{
    decade_grid, distill, lambda_sweep, mean_deviance, nagging, train_runs, RunResult,
};
use icenet_core::{
    IceScope, Mode, NetworkParams, RawRecord, Schema, SplitIndices, TabularDataset, TrainData, WindowSpec,
};
use serde::Serialize;

use crate::config::{Overrides, Partition, RunConfig};
use crate::output::OutDir;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Prepare,
    Train,
    Audit,
    Ice,
    Pdp,
    Sweep,
    Synth,
}

impl Command {
    fn needs_data(self) -> bool {
        self != Command::Synth
    }
}

/// Loads and validates the config, then runs `cmd`. With `dry_run` the
/// resolved config is returned as JSON and nothing is written.
pub fn run(cmd: Command, config: &Path, overrides: &Overrides, dry_run: bool) -> Result<String, CliError> {
    let cfg = RunConfig::load(config, overrides)?;
    cfg.validate(cmd.needs_data())?;
    let effective = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Other(e.to_string()))?;
    if dry_run {
        return Ok(effective);
    }
    let out = OutDir::new(&cfg.output.dir);
    out.write("effective_config.json", format!("{effective}\n").as_bytes())?;
    match cmd {
        Command::Prepare => cmd_prepare(&cfg, &out),
        Command::Train => cmd_train(&cfg, &out),
        Command::Audit => cmd_audit(&cfg, &out),
        Command::Ice => cmd_ice(&cfg, &out),
        Command::Pdp => cmd_pdp(&cfg, &out),
        Command::Sweep => cmd_sweep(&cfg, &out),
        Command::Synth => cmd_synth(&cfg, &out),
    }
}

/// Ingested data with its split and fitted schema.
pub struct Prepared {
    pub records: Vec<RawRecord>,
    pub split: SplitIndices,
    pub schema: Schema,
    pub learn: TabularDataset,
    pub validation: TabularDataset,
    pub test: TabularDataset,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let path = cfg
            .data
            .path
            .as_ref()
            .ok_or_else(|| CliError::Config("data.path is required".into()))?;
        let records = ingest_csv(path, &cfg.data.roles())?;
        let split = SplitIndices::new(
            records.len(),
            cfg.data.test_ratio,
            cfg.data.validation_ratio,
            cfg.data.split_seed,
        )?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
        let mut grids: Vec<String> = cfg.constraint_spec().column_names();
        for c in &cfg.interpret.columns {
            if !grids.contains(c) {
                grids.push(c.clone());
            }
        }
        let schema = Schema::fit(&pick(&split.fit_rows()), &cfg.data.roles(), &grids, cfg.schema)?;
        let learn = schema.transform(&pick(&split.learn))?;
        let validation = schema.transform(&pick(&split.validation))?;
        let test = schema.transform(&pick(&split.test))?;
        Ok(Self {
            records,
            split,
            schema,
            learn,
            validation,
            test,
        })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            schema: &self.schema,
            learn: &self.learn,
            validation: &self.validation,
        }
    }

    fn partition(&self, p: Partition) -> Result<TabularDataset, CliError> {
        Ok(match p {
            Partition::Learn => self.learn.clone(),
            Partition::Validation => self.validation.clone(),
            Partition::Test => self.test.clone(),
            Partition::All => self.schema.transform(&self.records)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionSummary {
    pub rows: usize,
    pub exposure: f64,
    pub claims: f64,
    pub frequency: f64,
}

impl PartitionSummary {
    fn of(records: &[RawRecord], idx: &[usize]) -> Self {
        let exposure: f64 = idx.iter().map(|&i| records[i].exposure).sum();
        let claims: f64 = idx.iter().map(|&i| records[i].response).sum();
        Self {
            rows: idx.len(),
            exposure,
            claims,
            frequency: if exposure > 0.0 { claims / exposure } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepReport {
    pub rows: usize,
    /// Learning and validation rows together.
    pub learn: PartitionSummary,
    pub test: PartitionSummary,
    pub learn_fit: PartitionSummary,
    pub validation: PartitionSummary,
    pub grids: Vec<(String, usize)>,
}

/// 1-based data-file rows of each partition.
#[derive(Serialize)]
struct SplitFile {
    learn: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
}

fn row_ids(records: &[RawRecord], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| records[i].row).collect()
}

pub fn cmd_prepare(cfg: &RunConfig, out: &OutDir) -> Result<String, CliError> {
    let p = Prepared::load(cfg)?;
    let recs = &p.records;
    let report = PrepReport {
        rows: recs.len(),
        learn: PartitionSummary::of(recs, &p.split.fit_rows()),
        test: PartitionSummary::of(recs, &p.split.test),
        learn_fit: PartitionSummary::of(recs, &p.split.learn),
        validation: PartitionSummary::of(recs, &p.split.validation),
        grids: p.schema.grids.iter().map(|g| (g.column.clone(), g.len())).collect(),
    };
    out.write("schema.json", p.schema.to_json()?.as_bytes())?;
    out.write_json(
        "split.json",
        &SplitFile {
            learn: row_ids(recs, &p.split.learn),
            validation: row_ids(recs, &p.split.validation),
            test: row_ids(recs, &p.split.test),
        },
    )?;
    out.write_json("prep_report.json", &report)?;
    let mut s = format!("{:<10} {:>10} {:>14} {:>10} {:>10}\n", "", "rows", "exposure", "claims", "frequency");
    for (name, r) in [("learn", &report.learn), ("test", &report.test)] {
        s.push_str(&format!(
            "{name:<10} {:>10} {:>14.2} {:>10} {:>10.4}\n",
            r.rows, r.exposure, r.claims, r.frequency
        ));
    }
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    seed: u64,
    best_epoch: usize,
    learn: f64,
    validation: f64,
    test: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub mode: Mode,
    runs: Vec<RunSummary>,
    pub mean_test: f64,
    pub nagging_test: f64,
    /// The ensemble's deviance does not exceed the mean run deviance.
    pub nagging_not_worse: bool,
}

fn model_json(p: &NetworkParams) -> Result<Vec<u8>, CliError> {
    Ok(p.to_json()?.into_bytes())
}

fn write_trace(out: &OutDir, rel: &str, r: &RunResult) -> Result<(), CliError> {
    out.write_with(rel, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let e = |e: csv::Error| CliError::Other(e.to_string());
        w.write_record(["epoch", "learn_dev", "valid_dev", "smooth_part", "mono_part"]).map_err(e)?;
        for t in &r.trace {
            w.write_record([
                t.epoch.to_string(),
                t.learn_dev.to_string(),
                t.valid_dev.to_string(),
                t.smooth_part.to_string(),
                t.mono_part.to_string(),
            ])
            .map_err(e)?;
        }
        w.flush().map_err(|x| CliError::Other(x.to_string()))
    })?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &OutDir) -> Result<String, CliError> {
    let p = Prepared::load(cfg)?;
    let tc = cfg.train_config()?;
    let arch = cfg.architecture(p.schema.n_continuous(), p.schema.cardinalities());
    let results = train_runs(p.train_data(), &arch, &cfg.constraint_spec(), &tc)?;
    let results: Vec<RunResult> = results
        .into_iter()
        .map(|r| r.with_test(&p.test))
        .collect::<Result<_, _>>()?;

    out.write("schema.json", p.schema.to_json()?.as_bytes())?;
    let mut log = String::new();
    let mut runs = Vec::new();
    for (k, r) in results.iter().enumerate() {
        let tag = format!("run_{:02}", k + 1);
        out.write(&format!("models/{tag}.json"), &model_json(&r.params)?)?;
        write_trace(out, &format!("traces/{tag}.csv"), r)?;
        for t in &r.trace {
            let mut line = serde_json::to_value(t).map_err(|e| CliError::Other(e.to_string()))?;
            line["seed"] = r.seed.into();
            log.push_str(&line.to_string());
            log.push('\n');
        }
        runs.push(RunSummary {
            seed: r.seed,
            best_epoch: r.best_epoch,
            learn: r.report.learn,
            validation: r.report.validation,
            test: r.report.test.unwrap_or(f64::NAN),
        });
    }
    out.write("train_log.jsonl", log.as_bytes())?;

    let models: Vec<&NetworkParams> = results.iter().map(|r| &r.params).collect();
    let ens = nagging(&models, &p.test)?;
    let nagging_test = icenet_core::penalties::mean_poisson_deviance(&p.test.y, &ens)?;
    let mean_test = runs.iter().map(|r| r.test).sum::<f64>() / runs.len() as f64;
    out.write_with("nagging.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let e = |e: csv::Error| CliError::Other(e.to_string());
        w.write_record(["instance_id", "exposure", "response", "prediction"]).map_err(e)?;
        for (n, pred) in ens.iter().enumerate() {
            w.write_record([
                p.test.ids[n].to_string(),
                p.test.v[n].to_string(),
                p.test.y[n].to_string(),
                pred.to_string(),
            ])
            .map_err(e)?;
        }
        w.flush().map_err(|x| CliError::Other(x.to_string()))
    })?;
    let report = TrainReport {
        mode: cfg.mode,
        runs,
        mean_test,
        nagging_test,
        nagging_not_worse: nagging_test <= mean_test + 1e-12,
    };
    out.write_json("report.json", &report)?;
    Ok(format!(
        "{} runs, mean test deviance {mean_test:.6}, nagging test deviance {nagging_test:.6}\n",
        results.len()
    ))
}

/// Models named in the config, or every model the train command wrote.
fn load_models(cfg: &RunConfig, out: &OutDir) -> Result<Vec<(String, NetworkParams)>, CliError> {
    let paths: Vec<PathBuf> = if cfg.interpret.models.is_empty() {
        out.json_files("models")
    } else {
        cfg.interpret.models.clone()
    };
    if paths.is_empty() {
        return Err(CliError::Config(
            "no models: set interpret.models or run `icenet train` first".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            let params = NetworkParams::from_json(&text)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let mut label = stem.to_string();
            let mut k = 2;
            while !seen.insert(label.clone()) {
                label = format!("{stem}_{k}");
                k += 1;
            }
            Ok((label, params))
        })
        .collect()
}

fn check_models(models: &[(String, NetworkParams)], schema: &Schema) -> Result<(), CliError> {
    for (label, m) in models {
        if m.arch().n_continuous != schema.n_continuous() || m.arch().cardinalities != schema.cardinalities() {
            return Err(CliError::Data(format!("model `{label}` does not match the data's covariates")));
        }
    }
    Ok(())
}

fn interpret_columns(cfg: &RunConfig) -> Vec<String> {
    if cfg.interpret.columns.is_empty() {
        cfg.constraint_spec().column_names()
    } else {
        cfg.interpret.columns.clone()
    }
}

fn curves_for(
    params: &NetworkParams,
    data: &TabularDataset,
    schema: &Schema,
    rows: &[usize],
    columns: &[String],
) -> Result<Vec<IcePoint>, CliError> {
    let mut points = Vec::new();
    for &n in rows {
        for c in columns {
            let grid = schema
                .grid(c)
                .ok_or_else(|| CliError::Config(format!("no grid for column `{c}`")))?;
            let curve = ice_curve(params, data.x_cont.row(n), data.cat_row(n), data.v[n], grid)?;
            points.extend(ice_points(data.ids[n], grid, &curve));
        }
    }
    Ok(points)
}

#[derive(Serialize)]
struct ColumnMeans {
    column: String,
    mean_smooth: f64,
    mean_mono: f64,
}

pub fn cmd_audit(cfg: &RunConfig, out: &OutDir) -> Result<String, CliError> {
    let p = Prepared::load(cfg)?;
    let models = load_models(cfg, out)?;
    check_models(&models, &p.schema)?;
    let data = p.partition(cfg.interpret.partition)?;
    let spec = cfg.constraint_spec();
    let scope = match cfg.interpret.audit_window {
        Some(w) => IceScope::Window(WindowSpec::new(w)?),
        None => IceScope::Full,
    };
    let mut all: Vec<Vec<AuditScore>> = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut text = String::new();
    for (label, m) in &models {
        let scores = audit(m, &data, &p.schema, &spec, scope)?;
        out.write_with(&format!("audit_{label}.csv"), |b| Ok(export_audit(&scores, b)?))?;
        let means: Vec<ColumnMeans> = mean_scores(&scores)
            .into_iter()
            .map(|(column, mean_smooth, mean_mono)| {
                text.push_str(&format!(
                    "{label:<16} {column:<14} smooth {mean_smooth:.3e}  mono {mean_mono:.3e}\n"
                ));
                ColumnMeans {
                    column,
                    mean_smooth,
                    mean_mono,
                }
            })
            .collect();
        summary.insert(
            label.clone(),
            serde_json::to_value(means).map_err(|e| CliError::Other(e.to_string()))?,
        );
        all.push(scores);
    }
    out.write_json("audit_summary.json", &summary)?;

    let ranking = if all.len() >= 2 {
        let diff = score_differences(&all[0], &all[1])?;
        out.write_with("audit_diff.csv", |b| Ok(export_audit(&diff, b)?))?;
        diff
    } else {
        all[0].clone()
    };
    let mut worst_rows = Vec::new();
    for c in &spec.columns {
        let kind = if c.mono_lambda > 0.0 { ScoreKind::Mono } else { ScoreKind::Smooth };
        for s in worst_offenders(&ranking, &c.column, kind, cfg.interpret.top_k) {
            let n = data.ids.iter().position(|&id| id == s.instance_id).expect("audited instance");
            worst_rows.push((n, c.column.clone()));
        }
    }
    for (label, m) in &models {
        let mut points = Vec::new();
        for (n, col) in &worst_rows {
            points.extend(curves_for(m, &data, &p.schema, &[*n], std::slice::from_ref(col))?);
        }
        out.write_with(&format!("audit_worst_ice_{label}.csv"), |b| Ok(export_curves(&points, b)?))?;
    }
    Ok(text)
}

fn instance_rows(cfg: &RunConfig, data: &TabularDataset) -> Result<Vec<usize>, CliError> {
    if cfg.interpret.instances.is_empty() {
        return Ok((0..data.len().min(cfg.interpret.max_instances)).collect());
    }
    cfg.interpret
        .instances
        .iter()
        .map(|id| {
            data.ids
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| CliError::Data(format!("instance {id} is not in the selected partition")))
        })
        .collect()
}

pub fn cmd_ice(cfg: &RunConfig, out: &OutDir) -> Result<String, CliError> {
    let p = Prepared::load(cfg)?;
    let models = load_models(cfg, out)?;
    check_models(&models, &p.schema)?;
    let data = p.partition(cfg.interpret.partition)?;
    let rows = instance_rows(cfg, &data)?;
    let columns = interpret_columns(cfg);
    let mut text = String::new();
    for (label, m) in &models {
        let points = curves_for(m, &data, &p.schema, &rows, &columns)?;
        let path = out.write_with(&format!("ice_{label}.csv"), |b| Ok(export_curves(&points, b)?))?;
        text.push_str(&format!("{}\n", path.display()));
    }
    Ok(text)
}

pub fn cmd_pdp(cfg: &RunConfig, out: &OutDir) -> Result<String, CliError> {
    let p = Prepared::load(cfg)?;
    let models = load_models(cfg, out)?;
    check_models(&models, &p.schema)?;
    let data = p.partition(cfg.interpret.partition)?;
    let columns = interpret_columns(cfg);
    let mut text = String::new();
    for (label, m) in &models {
        let mut points = Vec::new();
        for c in &columns {
            let grid = p
                .schema
                .grid(c)
                .ok_or_else(|| CliError::Config(format!("no grid for column `{c}`")))?;
            points.extend(pdp_points(grid, &pdp(m, &data, grid, cfg.interpret.pdp_weighting)?));
        }
        let path = out.write_with(&format!("pdp_{label}.csv"), |b| Ok(export_pdp(&points, b)?))?;
        text.push_str(&format!("{}\n", path.display()));
    }
    Ok(text)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &OutDir) -> Result<String, CliError> {
    let p = Prepared::load(cfg)?;
    let mut tc = cfg.train_config()?;
    let arch = cfg.architecture(p.schema.n_continuous(), p.schema.cardinalities());
    let teachers: Vec<NetworkParams> = if cfg.sweep.teachers.is_empty() {
        let mut fcn = tc.clone();
        fcn.mode = Mode::Fcn;
        train_runs(p.train_data(), &arch, &Default::default(), &fcn)?
            .into_iter()
            .map(|r| r.params)
            .collect()
    } else {
        cfg.sweep
            .teachers
            .iter()
            .map(|path| {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
                Ok(NetworkParams::from_json(&text)?)
            })
            .collect::<Result<_, CliError>>()?
    };
    let refs: Vec<&NetworkParams> = teachers.iter().collect();
    let t_learn = nagging(&refs, &p.learn)?;
    let t_valid = nagging(&refs, &p.validation)?;
    let meta = distill(p.train_data(), &t_learn, &t_valid, refs[0].arch(), &tc)?;
    out.write("meta_model.json", &model_json(&meta.params)?)?;

    if tc.mode == Mode::Fcn {
        tc.mode = Mode::IcenetGlobal;
    }
    let scales = decade_grid(cfg.sweep.lo, cfg.sweep.hi);
    let rows = lambda_sweep(&meta.params, &scales, p.train_data(), &p.test, &cfg.constraint_spec(), &tc)?;
    let mut text = format!("{:<12} {:>12} {:>12} {:>12}\n", "scale", "learn", "validation", "test");
    out.write_with("sweep.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let e = |e: csv::Error| CliError::Other(e.to_string());
        w.write_record(["label", "scale", "learn", "validation", "test"]).map_err(e)?;
        for r in &rows {
            let scale = r.scale.map(|s| s.to_string()).unwrap_or_default();
            w.write_record([r.label(), scale, r.learn.to_string(), r.validation.to_string(), r.test.to_string()])
                .map_err(e)?;
            text.push_str(&format!(
                "{:<12} {:>12.6} {:>12.6} {:>12.6}\n",
                r.label(),
                r.learn,
                r.validation,
                r.test
            ));
        }
        w.flush().map_err(|x| CliError::Other(x.to_string()))
    })?;
    log::info!("meta-model test deviance {:.6}", mean_deviance(&meta.params, &p.test)?);
    Ok(text)
}

pub fn cmd_synth(cfg: &RunConfig, out: &OutDir) -> Result<String, CliError> {
    let spec = &cfg.synth;
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let records = spec.generate()?;
    let path = out.write_with("synthetic.csv", |b| Ok(write_records(b, &spec.roles(), &records)?))?;
    out.write_json("synth_spec.json", spec)?;
    Ok(format!("{} rows written to {}\n", records.len(), path.display()))
}
