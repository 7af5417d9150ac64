//! One function per subcommand; each ends by writing the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use guidelab::approx::{collect_trajectories, fphi_sample, train_fphi, FeedForwardModel, TrainConfig, TrajectoryDataset};
use guidelab::metrics::{fit_gaussian, frechet_distance, GaussianSummary};
use guidelab::{
    guided_sample, EmbeddingMap, GaussianMixtureWorld, GuidancePrompt, GuidanceSchedule, OpCounts, Point,
    SampleRun, SamplerConfig, Window,
};

use crate::config::{ExperimentConfig, FrechetReference, LoadedConfig};
use crate::output::{write_samples_csv, CellRecord, FailureRecord, RunManifest, RunRecorder, Table, METRICS_HEADER};
use crate::plot::{line_svg, scatter_svg, ScatterPoint, Series};

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Sample,
    SweepKm,
    Ablate,
    Switch,
    Dump,
    TrainFphi,
    EvalFphi,
    Plot { inputs: Vec<PathBuf>, x: Option<String>, y: Option<String>, series: Option<String> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::SweepKm => "sweep-km",
            Command::Ablate => "ablate",
            Command::Switch => "switch",
            Command::Dump => "dump",
            Command::TrainFphi => "train-fphi",
            Command::EvalFphi => "eval-fphi",
            Command::Plot { .. } => "plot",
        }
    }
}

/// Shared, immutable pieces of an experiment.
struct Setup {
    world: GaussianMixtureWorld,
    map: EmbeddingMap,
}

impl Setup {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let world = cfg.build_world()?;
        let map = cfg.build_map(world.dim())?;
        Ok(Self { world, map })
    }
}

pub fn run_command(command: &Command, loaded: &LoadedConfig) -> Result<RunManifest> {
    let cfg = &loaded.config;
    let mut rec = RunRecorder::start(&cfg.output.dir, command.name(), cfg, &loaded.defaults_applied)?;
    match command {
        Command::Sample => sample(cfg, &mut rec)?,
        Command::SweepKm => sweep_km(cfg, &mut rec)?,
        Command::Ablate => ablate(cfg, &mut rec)?,
        Command::Switch => switch(cfg, &mut rec)?,
        Command::Dump => dump(cfg, &mut rec)?,
        Command::TrainFphi => train(cfg, &mut rec)?,
        Command::EvalFphi => eval_fphi(cfg, &mut rec)?,
        Command::Plot { inputs, x, y, series } => plot(inputs, x.as_deref(), y.as_deref(), series.as_deref(), &mut rec)?,
    }
    rec.finish()
}

/// Moments of the mixture restricted to `label`, or of the whole mixture.
fn reference(cfg: &ExperimentConfig, world: &GaussianMixtureWorld, label: usize) -> Result<GaussianSummary> {
    let (mean, cov) = match cfg.metrics.frechet_reference {
        FrechetReference::Target => world.label_moments(label)?,
        FrechetReference::Mixture => {
            let d = world.dim();
            let mut mean = Point::zeros(d);
            let mut second = DMatrix::zeros(d, d);
            for c in world.components() {
                mean += &c.mean * c.weight;
                second += (c.cov.matrix() + &c.mean * c.mean.transpose()) * c.weight;
            }
            let cov = second - &mean * mean.transpose();
            (mean, cov)
        }
    };
    Ok(GaussianSummary::from_moments(mean, cov)?)
}

struct CellOutcome {
    run: SampleRun,
    consistency: BTreeMap<usize, f64>,
    frechet: f64,
}

/// Runs one sampler cell, records it and writes its samples (and a scatter
/// plot) into `dir`.
fn run_cell(
    cfg: &ExperimentConfig,
    setup: &Setup,
    schedule: &GuidanceSchedule,
    labels: &[usize],
    name: &str,
    dir: &Path,
    rec: &mut RunRecorder,
) -> Result<CellOutcome> {
    std::fs::create_dir_all(dir)?;
    let sampler_cfg = cfg.sampler_config(setup.world.dim());
    let run = guided_sample(&sampler_cfg, &setup.world, schedule, &setup.map)?;
    let points = run.points();
    let mut consistency = BTreeMap::new();
    for &l in labels {
        consistency.insert(l, if points.is_empty() { f64::NAN } else { setup.world.consistency(&points, l)? });
    }
    let frechet = if points.len() >= 2 {
        frechet_distance(&fit_gaussian(&points)?, &reference(cfg, &setup.world, labels[0])?)?
    } else {
        f64::NAN
    };
    let samples = dir.join("samples.csv");
    write_samples_csv(&samples, &setup.world, &run.samples)?;
    rec.record_output(&samples);
    if cfg.output.plots {
        write_scatter(&dir.join("samples.svg"), &setup.world, &run.samples, name, rec)?;
    }
    for f in &run.failures {
        rec.failures.push(FailureRecord { cell: name.to_string(), chain_id: f.chain_id, t: f.t, message: f.message.clone() });
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("wall_seconds".to_string(), json!(run.elapsed));
    metrics.insert("frechet".to_string(), json!(frechet));
    for (l, c) in &consistency {
        metrics.insert(format!("consistency_label_{l}"), json!(c));
    }
    metrics.insert("completed_chains".to_string(), json!(run.samples.len()));
    rec.cells.push(CellRecord { name: name.to_string(), op_counts: run.counts, timing: run.timing, metrics });
    log::info!("{name}: frechet {frechet:.4} consistency {:?} in {:.2}s", consistency, run.elapsed);
    Ok(CellOutcome { run, consistency, frechet })
}

/// A per-cell directory that is self-describing: config snapshot plus manifest.
fn cell_manifest(cfg: &ExperimentConfig, dir: &Path, command: &str, cell: &CellRecord, outputs: &[&str]) -> Result<()> {
    let mut rec = RunRecorder::start(dir, command, cfg, &[])?;
    rec.cells.push(cell.clone());
    for o in outputs {
        let p = dir.join(o);
        if p.exists() {
            rec.record_output(&p);
        }
    }
    rec.finish()?;
    Ok(())
}

fn write_scatter(path: &Path, world: &GaussianMixtureWorld, samples: &[(u64, Point)], title: &str, rec: &mut RunRecorder) -> Result<()> {
    let pts: Vec<ScatterPoint> = samples
        .iter()
        .map(|(_, p)| ScatterPoint { x: p[0], y: if p.len() > 1 { p[1] } else { 0.0 }, label: world.classify(p) })
        .collect();
    std::fs::write(path, scatter_svg(&pts, title))?;
    rec.record_output(path);
    Ok(())
}

fn write_line(path: &Path, series: &[Series], title: &str, x: &str, y: &str, rec: &mut RunRecorder) -> Result<()> {
    std::fs::write(path, line_svg(series, title, x, y)?)?;
    rec.record_output(path);
    Ok(())
}

fn metrics_row(k: usize, m: usize, out: &CellOutcome, label: usize) -> Vec<String> {
    vec![
        k.to_string(),
        m.to_string(),
        out.run.elapsed.to_string(),
        out.frechet.to_string(),
        out.consistency[&label].to_string(),
        out.run.counts.forward_guidance_calls.to_string(),
        out.run.counts.backward_gradient_steps.to_string(),
    ]
}

fn sample(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let setup = Setup::new(cfg)?;
    let schedule = cfg.build_schedule(&setup.world, &setup.map)?;
    let g = &cfg.guidance;
    let mut labels = vec![g.label];
    if matches!(schedule.window, Window::Switch { .. }) && g.switch_label != g.label {
        labels.push(g.switch_label);
    }
    let dir = rec.dir.clone();
    let out = run_cell(cfg, &setup, &schedule, &labels, "sample", &dir, rec)?;
    let mut table = Table::new(&METRICS_HEADER);
    table.push(metrics_row(g.k, g.m, &out, g.label));
    let path = dir.join("metrics.csv");
    table.write(&path)?;
    rec.record_output(&path);
    rec.metric("consistency", out.consistency[&g.label]);
    rec.metric("frechet", out.frechet);
    rec.metric("wall_seconds", out.run.elapsed);
    Ok(())
}

fn sweep_km(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let setup = Setup::new(cfg)?;
    let label = cfg.guidance.label;
    let prompt = cfg.prompt_for(label, &setup.world, &setup.map)?;
    let mut table = Table::new(&METRICS_HEADER);
    let mut by_m: BTreeMap<usize, (Vec<(f64, f64)>, Vec<(f64, f64)>)> = BTreeMap::new();
    for &k in &cfg.sweep.k {
        for &m in &cfg.sweep.m {
            let mut cell_cfg = cfg.clone();
            cell_cfg.guidance.k = k;
            cell_cfg.guidance.m = m;
            cell_cfg.guidance.mode = crate::config::WindowMode::Always;
            let name = format!("k{k}_m{m}");
            let dir = rec.dir.join(&name);
            let schedule = cfg.schedule_with(prompt.clone(), Window::Always, k, m)?;
            let out = run_cell(&cell_cfg, &setup, &schedule, &[label], &name, &dir, rec)?;
            cell_manifest(&cell_cfg, &dir, "sweep-km", rec.cells.last().expect("cell recorded"), &["samples.csv", "samples.svg"])?;
            rec.record_output(&dir.join("manifest.json"));
            table.push(metrics_row(k, m, &out, label));
            let e = by_m.entry(m).or_default();
            e.0.push((k as f64, out.frechet));
            e.1.push((k as f64, out.run.elapsed));
        }
    }
    let path = rec.dir.join("metrics.csv");
    table.write(&path)?;
    rec.record_output(&path);
    rec.metric("cells", table.rows.len());
    if cfg.output.plots && !table.rows.is_empty() {
        let series = |pick: fn(&(Vec<(f64, f64)>, Vec<(f64, f64)>)) -> &Vec<(f64, f64)>| -> Vec<Series> {
            by_m.iter().map(|(m, v)| Series { name: format!("m={m}"), points: pick(v).clone() }).collect()
        };
        write_line(&rec.dir.join("frechet_vs_k.svg"), &series(|v| &v.0), "Frechet distance vs k", "k", "frechet", rec)?;
        write_line(&rec.dir.join("wall_vs_k.svg"), &series(|v| &v.1), "Wall time vs k", "k", "seconds", rec)?;
    }
    Ok(())
}

fn window_name(w: &Window) -> String {
    match w {
        Window::Always => "always".into(),
        Window::OnThenOff(p) => format!("on-then-off({p})"),
        Window::OffThenOn(p) => format!("off-then-on({p})"),
        Window::Switch { p, .. } => format!("switch({p})"),
    }
}

pub const ABLATE_HEADER: [&str; 9] =
    ["p", "window", "k", "m", "wall_seconds", "frechet", "consistency", "forward_calls", "backward_steps"];

fn ablate(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let setup = Setup::new(cfg)?;
    let g = &cfg.guidance;
    let prompt = cfg.prompt_for(g.label, &setup.world, &setup.map)?;
    let mut table = Table::new(&ABLATE_HEADER);
    let mut curve = (Vec::new(), Vec::new());
    for &p in &cfg.ablate.p {
        let window = Window::from_signed(p)?;
        let name = format!("p{p}");
        let dir = rec.dir.join(&name);
        let schedule = cfg.schedule_with(prompt.clone(), window.clone(), g.k, g.m)?;
        let out = run_cell(cfg, &setup, &schedule, &[g.label], &name, &dir, rec)?;
        cell_manifest(cfg, &dir, "ablate", rec.cells.last().expect("cell recorded"), &["samples.csv", "samples.svg"])?;
        rec.record_output(&dir.join("manifest.json"));
        table.push(vec![
            p.to_string(),
            window_name(&window),
            g.k.to_string(),
            g.m.to_string(),
            out.run.elapsed.to_string(),
            out.frechet.to_string(),
            out.consistency[&g.label].to_string(),
            out.run.counts.forward_guidance_calls.to_string(),
            out.run.counts.backward_gradient_steps.to_string(),
        ]);
        curve.0.push((p, out.consistency[&g.label]));
        curve.1.push((p, out.run.elapsed));
    }
    let path = rec.dir.join("metrics.csv");
    table.write(&path)?;
    rec.record_output(&path);
    rec.metric("cells", table.rows.len());
    if cfg.output.plots && !table.rows.is_empty() {
        let by_p = |v: &Vec<(f64, f64)>| {
            let mut v = v.clone();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            v
        };
        let cons = vec![Series { name: "consistency".into(), points: by_p(&curve.0) }];
        write_line(&rec.dir.join("consistency_vs_p.svg"), &cons, "Consistency vs signed p", "p", "consistency", rec)?;
        let wall = vec![Series { name: "wall seconds".into(), points: by_p(&curve.1) }];
        write_line(&rec.dir.join("wall_vs_p.svg"), &wall, "Wall time vs signed p", "p", "seconds", rec)?;
    }
    Ok(())
}

pub const SWITCH_HEADER: [&str; 8] =
    ["first", "second", "p", "wall_seconds", "consistency_first", "consistency_second", "forward_calls", "backward_steps"];

fn switch(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let setup = Setup::new(cfg)?;
    cfg.validate_switch_grid(&setup.world)?;
    let g = &cfg.guidance;
    let mut table = Table::new(&SWITCH_HEADER);
    let mut series = Vec::new();
    for &c1 in &cfg.switch.first {
        for &c2 in &cfg.switch.second {
            let first = cfg.prompt_for(c1, &setup.world, &setup.map)?;
            let second = cfg.prompt_for(c2, &setup.world, &setup.map)?;
            let mut pts1 = Vec::new();
            let mut pts2 = Vec::new();
            for &p in &cfg.switch.p {
                let name = format!("c{c1}_c{c2}_p{p}");
                let dir = rec.dir.join(&name);
                let window = Window::Switch { p, then: second.clone() };
                let schedule = cfg.schedule_with(first.clone(), window, g.k, g.m)?;
                let labels: Vec<usize> = if c1 == c2 { vec![c1] } else { vec![c1, c2] };
                let out = run_cell(cfg, &setup, &schedule, &labels, &name, &dir, rec)?;
                cell_manifest(cfg, &dir, "switch", rec.cells.last().expect("cell recorded"), &["samples.csv", "samples.svg"])?;
                rec.record_output(&dir.join("manifest.json"));
                let (a, b) = (out.consistency[&c1], out.consistency[&c2]);
                table.push(vec![
                    c1.to_string(),
                    c2.to_string(),
                    p.to_string(),
                    out.run.elapsed.to_string(),
                    a.to_string(),
                    b.to_string(),
                    out.run.counts.forward_guidance_calls.to_string(),
                    out.run.counts.backward_gradient_steps.to_string(),
                ]);
                pts1.push((p, a));
                pts2.push((p, b));
            }
            series.push(Series { name: format!("{c1}->{c2}: first"), points: pts1 });
            series.push(Series { name: format!("{c1}->{c2}: second"), points: pts2 });
        }
    }
    let path = rec.dir.join("metrics.csv");
    table.write(&path)?;
    rec.record_output(&path);
    rec.metric("cells", table.rows.len());
    if cfg.output.plots && !table.rows.is_empty() {
        write_line(&rec.dir.join("consistency_vs_p.svg"), &series, "Consistency vs switch point", "p", "consistency", rec)?;
    }
    Ok(())
}

fn dataset_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.fphi.dataset.clone().unwrap_or_else(|| cfg.output.dir.join("trajectories.bin"))
}

fn model_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.fphi.model.clone().unwrap_or_else(|| cfg.output.dir.join("fphi_model.bin"))
}

fn dump(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let setup = Setup::new(cfg)?;
    let schedule = cfg.build_schedule(&setup.world, &setup.map)?;
    let sampler_cfg = SamplerConfig { chains: cfg.fphi.dump_chains, ..cfg.sampler_config(setup.world.dim()) };
    let started = std::time::Instant::now();
    let data = collect_trajectories(&sampler_cfg, &setup.world, &schedule, &setup.map)?;
    let path = dataset_path(cfg);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    data.save(&path).with_context(|| format!("writing dataset {}", path.display()))?;
    rec.record_output(&path);
    let expected = sampler_cfg.chains * sampler_cfg.steps;
    if data.len() != expected {
        rec.failures.push(FailureRecord {
            cell: "dump".into(),
            chain_id: u64::MAX,
            t: 0,
            message: format!("{} of {expected} records written; some chains aborted", data.len()),
        });
    }
    rec.metric("records", data.len());
    rec.metric("dataset", path.to_string_lossy().into_owned());
    rec.metric("wall_seconds", started.elapsed().as_secs_f64());
    Ok(())
}

fn train(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let path = dataset_path(cfg);
    let data = TrajectoryDataset::load(&path).with_context(|| format!("reading dataset {}", path.display()))?;
    let f = &cfg.fphi;
    let tc = TrainConfig {
        learning_rate: f.learning_rate,
        batch_size: f.batch_size,
        max_epochs: f.max_epochs,
        patience: f.patience,
        seed: f.train_seed,
    };
    let started = std::time::Instant::now();
    let outcome = train_fphi(&data, &tc)?;
    let model = model_path(cfg);
    if let Some(parent) = model.parent() {
        std::fs::create_dir_all(parent)?;
    }
    outcome.model.save(&model)?;
    rec.record_output(&model);
    rec.record_output(&model.with_extension("json"));

    let mut table = Table::new(&["epoch", "train_mse", "validation_mse"]);
    for e in &outcome.curves {
        table.push(vec![e.epoch.to_string(), e.train_mse.to_string(), e.validation_mse.to_string()]);
    }
    let curves = rec.dir.join("curves.csv");
    table.write(&curves)?;
    rec.record_output(&curves);
    if cfg.output.plots {
        let series = vec![
            Series { name: "train".into(), points: outcome.curves.iter().skip(1).map(|e| (e.epoch as f64, e.train_mse)).collect() },
            Series { name: "validation".into(), points: outcome.curves.iter().map(|e| (e.epoch as f64, e.validation_mse)).collect() },
        ];
        write_line(&rec.dir.join("loss.svg"), &series, "Step-model MSE", "epoch", "mse", rec)?;
    }
    let epoch0 = outcome.curves[0].validation_mse;
    rec.metric("records", data.len());
    rec.metric("epochs_run", outcome.curves.len() - 1);
    rec.metric("best_epoch", outcome.best_epoch);
    rec.metric("epoch0_validation_mse", epoch0);
    rec.metric("best_validation_mse", outcome.best_validation_mse);
    rec.metric("test_mse", outcome.test_mse);
    rec.metric("baseline_validation_mse", outcome.baseline_validation_mse);
    rec.metric("baseline_test_mse", outcome.baseline_test_mse);
    rec.metric("improved_over_epoch0", outcome.best_validation_mse < epoch0);
    rec.metric("beats_baseline", outcome.test_mse < outcome.baseline_test_mse);
    rec.metric("wall_seconds", started.elapsed().as_secs_f64());
    Ok(())
}

pub const EVAL_HEADER: [&str; 8] =
    ["method", "wall_seconds", "frechet", "consistency", "denoiser_calls", "approximator_calls", "forward_calls", "backward_steps"];

fn eval_fphi(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let setup = Setup::new(cfg)?;
    let path = model_path(cfg);
    let model = FeedForwardModel::load(&path).with_context(|| format!("reading model {}", path.display()))?;
    let sampler_cfg = cfg.sampler_config(setup.world.dim());
    if model.noise().steps() != sampler_cfg.steps || model.noise().kind() != sampler_cfg.schedule_kind {
        bail!(
            "model was trained for {} {:?} steps but the sampler is configured for {} {:?} steps",
            model.noise().steps(),
            model.noise().kind(),
            sampler_cfg.steps,
            sampler_cfg.schedule_kind
        );
    }
    let label = cfg.guidance.label;
    let prompt: GuidancePrompt = cfg.prompt_for(label, &setup.world, &setup.map)?;
    let reference = reference(cfg, &setup.world, label)?;
    let score = |pts: &[Point]| -> Result<(f64, f64)> {
        if pts.len() < 2 {
            return Ok((f64::NAN, f64::NAN));
        }
        Ok((frechet_distance(&fit_gaussian(pts)?, &reference)?, setup.world.consistency(pts, label)?))
    };

    let approx = fphi_sample(&model, &sampler_cfg, &setup.world, &setup.map, &prompt)?;
    for (chain_id, message) in &approx.failures {
        rec.failures.push(FailureRecord { cell: "fphi".into(), chain_id: *chain_id, t: 0, message: message.clone() });
    }
    let schedule = cfg.build_schedule(&setup.world, &setup.map)?;
    let guided = guided_sample(&sampler_cfg, &setup.world, &schedule, &setup.map)?;
    for f in &guided.failures {
        rec.failures.push(FailureRecord { cell: "guided".into(), chain_id: f.chain_id, t: f.t, message: f.message.clone() });
    }
    let (f_approx, c_approx) = score(&approx.points())?;
    let (f_guided, c_guided) = score(&guided.points())?;

    let mut table = Table::new(&EVAL_HEADER);
    let row = |method: &str, secs: f64, f: f64, c: f64, counts: &OpCounts| {
        vec![
            method.to_string(),
            secs.to_string(),
            f.to_string(),
            c.to_string(),
            counts.denoiser_calls.to_string(),
            counts.approximator_calls.to_string(),
            counts.forward_guidance_calls.to_string(),
            counts.backward_gradient_steps.to_string(),
        ]
    };
    table.push(row("fphi", approx.elapsed, f_approx, c_approx, &approx.counts));
    table.push(row("guided", guided.elapsed, f_guided, c_guided, &guided.counts));
    let csv = rec.dir.join("metrics.csv");
    table.write(&csv)?;
    rec.record_output(&csv);
    for (name, samples) in [("samples_fphi", &approx.samples), ("samples_guided", &guided.samples)] {
        let p = rec.dir.join(format!("{name}.csv"));
        write_samples_csv(&p, &setup.world, samples)?;
        rec.record_output(&p);
        if cfg.output.plots {
            write_scatter(&rec.dir.join(format!("{name}.svg")), &setup.world, samples, name, rec)?;
        }
    }
    let steps = (sampler_cfg.steps * approx.samples.len().max(1)) as f64;
    let gap = f_approx - f_guided;
    rec.cells.push(CellRecord {
        name: "fphi".into(),
        op_counts: approx.counts,
        timing: Default::default(),
        metrics: BTreeMap::from([("frechet".into(), json!(f_approx)), ("consistency".into(), json!(c_approx))]),
    });
    rec.cells.push(CellRecord {
        name: "guided".into(),
        op_counts: guided.counts,
        timing: guided.timing,
        metrics: BTreeMap::from([("frechet".into(), json!(f_guided)), ("consistency".into(), json!(c_guided))]),
    });
    rec.metric("frechet_fphi", f_approx);
    rec.metric("frechet_guided", f_guided);
    rec.metric("consistency_fphi", c_approx);
    rec.metric("consistency_guided", c_guided);
    rec.metric("quality_gap_frechet", gap);
    rec.metric("quality_gap_consistency", c_guided - c_approx);
    rec.metric(
        "model_passes_per_step",
        (approx.counts.denoiser_calls + approx.counts.approximator_calls) as f64 / steps,
    );
    rec.metric("wall_seconds_fphi", approx.elapsed);
    rec.metric("wall_seconds_guided", guided.elapsed);
    if gap > 0.0 {
        log::warn!("step model trails true guidance: Frechet {f_approx:.4} vs {f_guided:.4} (gap {gap:.4})");
    }
    Ok(())
}

fn plot(inputs: &[PathBuf], x: Option<&str>, y: Option<&str>, series: Option<&str>, rec: &mut RunRecorder) -> Result<()> {
    if inputs.is_empty() {
        bail!("plot needs at least one CSV input");
    }
    for input in inputs {
        let mut reader = csv::Reader::from_path(input).with_context(|| format!("reading {}", input.display()))?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
        let out = rec.dir.join(format!("{stem}.svg"));
        let col = |name: &str| -> Result<usize> {
            header.iter().position(|h| h == name).with_context(|| format!("{} has no column `{name}`", input.display()))
        };
        let num = |r: &csv::StringRecord, i: usize| -> Result<f64> {
            r[i].parse::<f64>().with_context(|| format!("non-numeric value `{}` in {}", &r[i], input.display()))
        };
        if header.first().map(String::as_str) == Some("chain_id") {
            let label = col("label")?;
            let pts = rows
                .iter()
                .map(|r| {
                    Ok(ScatterPoint {
                        x: num(r, 1)?,
                        y: if header.len() > 3 { num(r, 2)? } else { 0.0 },
                        label: r[label].parse().unwrap_or(0),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            std::fs::write(&out, scatter_svg(&pts, &stem))?;
        } else {
            let xi = col(x.unwrap_or(&header[0]))?;
            let y_name = y.map(str::to_string).unwrap_or_else(|| {
                ["frechet", "consistency", "validation_mse"]
                    .into_iter()
                    .find(|c| header.iter().any(|h| h == c))
                    .unwrap_or(header.last().map(String::as_str).unwrap_or(""))
                    .to_string()
            });
            let yi = col(&y_name)?;
            let si = series.map(col).transpose()?;
            let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &rows {
                let key = si.map(|i| format!("{}={}", header[i], &r[i])).unwrap_or_else(|| y_name.clone());
                groups.entry(key).or_default().push((num(r, xi)?, num(r, yi)?));
            }
            let series: Vec<Series> = groups.into_iter().map(|(name, points)| Series { name, points }).collect();
            std::fs::write(&out, line_svg(&series, &stem, &header[xi], &y_name)?)?;
        }
        rec.record_output(&out);
        rec.metric(&format!("plotted_{stem}"), Value::from(rows.len()));
    }
    Ok(())
}
