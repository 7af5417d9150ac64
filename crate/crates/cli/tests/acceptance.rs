//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use nalgebra::linalg::Schur;
use nalgebra::DMatrix;

use guidelab::approx::{Activation, Batch, FeedForwardModel};
use guidelab::guidance::{apply_backward_to_eps, guidance_loss, DEFAULT_STRENGTH};
use guidelab::sampler::{op_counts, predict_z0};
use guidelab::{
    fit_gaussian, frechet_distance, guided_sample, unguided_sample, EmbeddingMap, GaussianMixtureWorld,
    GaussianSummary, GuidancePrompt, GuidanceSchedule, NoiseSchedule, OpCounts, Point, RngStream, SampleRun,
    SamplerConfig, ScheduleKind, Window,
};
use guidelab_cli::config::ExperimentConfig;
use guidelab_cli::output::read_manifest;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

struct Bench {
    cfg: ExperimentConfig,
    world: GaussianMixtureWorld,
    map: EmbeddingMap,
}

impl Bench {
    fn new() -> Result<Self> {
        let cfg = ExperimentConfig::default();
        let world = cfg.build_world()?;
        let map = cfg.build_map(world.dim())?;
        Ok(Self { cfg, world, map })
    }

    fn schedule(&self, label: usize, window: Window, k: usize, m: usize) -> Result<GuidanceSchedule> {
        self.cfg.schedule_with(GuidancePrompt::class(label, DEFAULT_STRENGTH)?, window, k, m)
    }

    fn sampler(&self, steps: usize, chains: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps,
            chains,
            seed,
            ..self.cfg.sampler_config(self.world.dim())
        }
    }

    fn run(&self, sampler: &SamplerConfig, schedule: &GuidanceSchedule) -> Result<SampleRun> {
        let run = guided_sample(sampler, &self.world, schedule, &self.map)?;
        ensure!(run.failures.is_empty(), "{} chains failed", run.failures.len());
        Ok(run)
    }

    fn consistency(&self, run: &SampleRun, label: usize) -> Result<f64> {
        Ok(self.world.consistency(&run.points(), label)?)
    }

    fn frechet_to_label(&self, run: &SampleRun, label: usize) -> Result<f64> {
        let (mean, cov) = self.world.label_moments(label)?;
        Ok(frechet_distance(&fit_gaussian(&run.points())?, &GaussianSummary::from_moments(mean, cov)?)?)
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(1).build()?.install(f))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn uniform(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_open01()
}

fn random_point(rng: &mut RngStream, d: usize, scale: f64) -> Point {
    Point::from_fn(d, |_, _| uniform(rng, -scale, scale))
}

fn cost_accounting() -> Result<Verdict> {
    let bench = Bench::new()?;
    let started = Instant::now();
    let mut rng = RngStream::new(2024, 0);
    let mut mismatches = Vec::new();
    for i in 0..20 {
        let steps = 1 + rng.next_index(40);
        let k = 1 + rng.next_index(6);
        let m = rng.next_index(8);
        let chains = 1 + rng.next_index(4);
        let run = bench.run(&bench.sampler(steps, chains, i), &bench.schedule(0, Window::Always, k, m)?)?;
        let expected: OpCounts = std::iter::repeat_n(op_counts(steps, k, m), chains).sum();
        if run.counts != expected {
            mismatches.push(format!("T={steps} k={k} m={m}: {:?} != {expected:?}", run.counts));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        mismatches.is_empty() && secs < 60.0,
        format!("20 configs, {} mismatches, {secs:.1}s {}", mismatches.len(), mismatches.join("; ")),
    )
}

fn runtime_scaling() -> Result<Verdict> {
    let bench = Bench::new()?;
    let sampler = bench.sampler(100, 200, 0);
    let schedules = [1, 5, 10].map(|k| bench.schedule(0, Window::Always, k, 10));
    let mut times = [Vec::new(), Vec::new(), Vec::new()];
    single_thread(|| -> Result<()> {
        for _ in 0..5 {
            for (i, s) in schedules.iter().enumerate() {
                let s = s.as_ref().map_err(|e| anyhow::anyhow!("{e}"))?;
                times[i].push(bench.run(&sampler, s)?.elapsed);
            }
        }
        Ok(())
    })??;
    let [t1, t5, t10] = times.map(median);
    let (r5, r10) = (t5 / t1, t10 / t1);
    verdict(
        (4.0..=6.0).contains(&r5) && (8.0..=12.0).contains(&r10),
        format!("k=1 {t1:.3}s, k=5/k=1 = {r5:.2}, k=10/k=1 = {r10:.2}"),
    )
}

fn early_guidance() -> Result<Verdict> {
    let bench = Bench::new()?;
    let sampler = bench.sampler(100, 500, 0);
    let full = bench.schedule(0, Window::Always, 5, 10)?;
    let early = bench.schedule(0, Window::OnThenOff(0.6), 5, 10)?;
    let late = bench.schedule(0, Window::OffThenOn(0.6), 5, 10)?;
    let (mut t_full, mut t_early) = (Vec::new(), Vec::new());
    let (full_run, early_run) = single_thread(|| -> Result<(SampleRun, SampleRun)> {
        let mut last = None;
        for _ in 0..3 {
            let f = bench.run(&sampler, &full)?;
            let e = bench.run(&sampler, &early)?;
            t_full.push(f.elapsed);
            t_early.push(e.elapsed);
            last = Some((f, e));
        }
        Ok(last.expect("three repeats"))
    })??;
    let late_run = bench.run(&sampler, &late)?;
    let c_full = bench.consistency(&full_run, 0)?;
    let c_early = bench.consistency(&early_run, 0)?;
    let c_late = bench.consistency(&late_run, 0)?;
    let b_full = full_run.counts.backward_gradient_steps as f64;
    let step_cut = 1.0 - early_run.counts.backward_gradient_steps as f64 / b_full;
    let time_cut = 1.0 - median(t_early) / median(t_full);
    verdict(
        (c_full - c_early).abs() <= 0.05 && step_cut >= 0.35 && time_cut >= 0.30 && c_full - c_late >= 0.2,
        format!(
            "consistency full {c_full:.3}, on-then-off {c_early:.3}, off-then-on {c_late:.3}; \
             backward steps -{:.0}%, wall time -{:.0}%",
            100.0 * step_cut,
            100.0 * time_cut
        ),
    )
}

fn prompt_switching() -> Result<Verdict> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/calibration.toml");
    let calib: toml::Table = toml::from_str(&std::fs::read_to_string(&path)?)?;
    let bench = Bench::new()?;
    let run_spec = calib["run"].as_table().context("[run]")?;
    let int = |k: &str| run_spec[k].as_integer().map(|v| v as usize).with_context(|| format!("run.{k}"));
    let sampler = bench.sampler(int("steps")?, int("chains")?, int("seed")? as u64);
    let (first, second) = (int("first_label")?, int("second_label")?);
    let mut pass = true;
    let mut notes = Vec::new();
    for case in ["switch_late", "switch_early"] {
        let c = calib[case].as_table().with_context(|| format!("[{case}]"))?;
        let float = |k: &str| c[k].as_float().with_context(|| format!("{case}.{k}"));
        let p = float("p")?;
        let scored = c["scored_label"].as_integer().context("scored_label")? as usize;
        let then = GuidancePrompt::class(second, DEFAULT_STRENGTH)?;
        let schedule = bench.schedule(first, Window::Switch { p, then }, int("k")?, int("m")?)?;
        let got = bench.consistency(&bench.run(&sampler, &schedule)?, scored)?;
        pass &= got >= float("threshold")?;
        notes.push(format!("p={p}: c{scored} {got:.3} (calibrated {:.3})", float("observed")?));
    }
    verdict(pass, notes.join(", "))
}

fn quality_ordering() -> Result<Verdict> {
    let bench = Bench::new()?;
    let one = bench.schedule(0, Window::Always, 1, 10)?;
    let five = bench.schedule(0, Window::Always, 5, 10)?;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let sampler = bench.sampler(100, 1000, seed);
        let f1 = bench.frechet_to_label(&bench.run(&sampler, &one)?, 0)?;
        let f5 = bench.frechet_to_label(&bench.run(&sampler, &five)?, 0)?;
        if f5 <= f1 {
            wins += 1;
        }
        pairs.push(format!("{f5:.3}/{f1:.3}"));
    }
    verdict(wins >= 9, format!("F(5) <= F(1) in {wins}/10 seeds [{}]", pairs.join(" ")))
}

fn relative_error(analytic: &Point, numeric: &Point) -> f64 {
    (analytic - numeric).amax() / analytic.amax().max(numeric.amax()).max(1e-8)
}

fn central_difference(f: impl Fn(&Point) -> f64, x: &Point) -> Point {
    let h = 1e-5;
    Point::from_fn(x.len(), |i, _| {
        let mut up = x.clone();
        let mut down = x.clone();
        up[i] += h;
        down[i] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

fn model_gradient_error(model: &FeedForwardModel, batch: &Batch, target: &DMatrix<f64>, indices: &[usize]) -> Result<f64> {
    let (_, grad) = model.loss_and_gradient(batch, target)?;
    let base = model.parameters();
    let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        let mut p = base.clone();
        p[i] += h;
        probe.set_parameters(&p)?;
        let up = probe.mse(batch, target)?;
        p[i] -= 2.0 * h;
        probe.set_parameters(&p)?;
        let down = probe.mse(batch, target)?;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1e-3 * scale).max(1e-8));
    }
    Ok(worst)
}

fn random_batch(rng: &mut RngStream, n: usize, d: usize, e: usize, steps: usize) -> (Batch, DMatrix<f64>) {
    let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gaussian(1)[0]);
    let batch = Batch {
        z_in: mat(n, d),
        eps_in: mat(n, d),
        prompt: mat(n, e),
        t: Vec::new(),
    };
    let target = mat(n, d);
    let t = (0..n).map(|_| 1 + rng.next_index(steps)).collect();
    (Batch { t, ..batch }, target)
}

fn spd(rng: &mut RngStream) -> DMatrix<f64> {
    let l = DMatrix::from_fn(2, 2, |_, _| uniform(rng, -2.0, 2.0));
    &l * l.transpose() + DMatrix::identity(2, 2) * uniform(rng, 0.05, 1.0)
}

/// Trace of `(Sa Sb)^{1/2}` from the eigenvalues of the nonsymmetric product.
fn frechet_oracle(ma: &Point, sa: &DMatrix<f64>, mb: &Point, sb: &DMatrix<f64>) -> Result<f64> {
    let eig = Schur::new(sa * sb).eigenvalues().context("product has complex eigenvalues")?;
    let cross: f64 = eig.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((ma - mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross)
}

fn numerical_suite() -> Result<Verdict> {
    let bench = Bench::new()?;
    let mut rng = RngStream::new(77, 0);
    let mut notes = Vec::new();

    // (a) loss gradients, the denoiser jacobian and model layers
    let class = GuidancePrompt::class(0, 1.0)?;
    let embed = GuidancePrompt::embedding(bench.map.class_embedding(&bench.world, 1)?, 1.0)?;
    let mut loss_err = 0.0f64;
    for _ in 0..200 {
        let x = random_point(&mut rng, 2, 7.0);
        for prompt in [&class, &embed] {
            let (_, g) = guidance_loss(prompt, &bench.map, &bench.world, &x)?;
            let fd = central_difference(|y| guidance_loss(prompt, &bench.map, &bench.world, y).map(|v| v.0).unwrap_or(f64::NAN), &x);
            loss_err = loss_err.max(relative_error(&g, &fd));
        }
    }
    let noise = NoiseSchedule::new(100, ScheduleKind::Cosine)?;
    let mut jac_err = 0.0f64;
    for _ in 0..200 {
        let t = 1 + rng.next_index(100);
        let level = bench.world.at_noise(noise.abar(t))?;
        let z = random_point(&mut rng, 2, 6.0);
        let jac = level.mean_jacobian(&z);
        for i in 0..2 {
            let fd = central_difference(|y| level.posterior_mean(y)[i], &z);
            jac_err = jac_err.max(relative_error(&jac.row(i).transpose(), &fd));
        }
    }
    let mut layer_err = 0.0f64;
    let small = NoiseSchedule::new(5, ScheduleKind::Cosine)?;
    for acts in [
        [Activation::Tanh, Activation::Identity],
        [Activation::Relu, Activation::Identity],
        [Activation::Identity, Activation::Tanh],
    ] {
        let model = FeedForwardModel::with_layers(2, 3, &small, &[(6, acts[0]), (2, acts[1])], 4, false)?;
        let (batch, target) = random_batch(&mut rng, 9, 2, 3, 5);
        let all: Vec<usize> = (0..model.parameter_count()).collect();
        layer_err = layer_err.max(model_gradient_error(&model, &batch, &target, &all)?);
    }
    let deep_noise = NoiseSchedule::new(6, ScheduleKind::Linear)?;
    let widths = [(5, Activation::Tanh), (4, Activation::Tanh), (4, Activation::Tanh), (2, Activation::Identity)];
    let deep = FeedForwardModel::with_layers(2, 2, &deep_noise, &widths, 9, false)?;
    let (batch, target) = random_batch(&mut rng, 6, 2, 2, 6);
    let all: Vec<usize> = (0..deep.parameter_count()).collect();
    let mut deep_err = model_gradient_error(&deep, &batch, &target, &all)?;
    let standard = FeedForwardModel::with_layers(
        2,
        8,
        &small,
        &[(128, Activation::Tanh), (128, Activation::Tanh), (2, Activation::Identity)],
        3,
        false,
    )?;
    let (batch, target) = random_batch(&mut rng, 8, 2, 8, 5);
    let sampled: Vec<usize> = (0..300).map(|_| rng.next_index(standard.parameter_count())).collect();
    deep_err = deep_err.max(model_gradient_error(&standard, &batch, &target, &sampled)?);
    let grads_ok = loss_err < 1e-5 && jac_err < 1e-5 && layer_err < 1e-5 && deep_err < 1e-4;
    notes.push(format!(
        "gradients: loss {loss_err:.1e}, jacobian {jac_err:.1e}, layers {layer_err:.1e}, deep {deep_err:.1e}"
    ));

    // (b) closed forms and the eigenvalue oracle
    let summary = |m: [f64; 2], c: [f64; 4]| GaussianSummary::from_moments(Point::from_column_slice(&m), DMatrix::from_row_slice(2, 2, &c));
    let a = summary([0.0, 0.0], [1.0, 0.2, 0.2, 2.0])?;
    let b = summary([3.0, 4.0], [1.0, 0.2, 0.2, 2.0])?;
    let c = summary([0.0, 0.0], [4.0, 0.0, 0.0, 9.0])?;
    let d = summary([0.0, 0.0], [1.0, 0.0, 0.0, 1.0])?;
    let closed = [
        (frechet_distance(&a, &a)?, 0.0),
        (frechet_distance(&a, &b)?, 25.0),
        (frechet_distance(&c, &d)?, 5.0),
    ];
    let closed_err = closed.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    let mut oracle_err = 0.0f64;
    for _ in 0..1000 {
        let (ma, mb) = (random_point(&mut rng, 2, 5.0), random_point(&mut rng, 2, 5.0));
        let (sa, sb) = (spd(&mut rng), spd(&mut rng));
        let want = frechet_oracle(&ma, &sa, &mb, &sb)?;
        let got = frechet_distance(
            &GaussianSummary::from_moments(ma, sa)?,
            &GaussianSummary::from_moments(mb, sb)?,
        )?;
        oracle_err = oracle_err.max((got - want).abs() / want.abs().max(1.0));
    }
    let frechet_ok = closed_err < 1e-9 && oracle_err < 1e-8;
    notes.push(format!("frechet: closed forms {closed_err:.1e}, oracle {oracle_err:.1e}"));

    // (c) the backward correction shifts the clean estimate by exactly delta
    let mut identity_err = 0.0f64;
    for _ in 0..1000 {
        let t = 1 + rng.next_index(100);
        let z = random_point(&mut rng, 2, 3.0);
        let eps = random_point(&mut rng, 2, 3.0);
        let delta = random_point(&mut rng, 2, 1.0);
        let shifted = apply_backward_to_eps(&eps, &delta, t, &noise)?;
        let want = predict_z0(&z, &eps, t, &noise) + &delta;
        let got = predict_z0(&z, &shifted, t, &noise);
        identity_err = identity_err.max((got - &want).amax() / want.amax().max(1.0));
    }
    notes.push(format!("backward identity {identity_err:.1e}"));
    verdict(grads_ok && frechet_ok && identity_err < 1e-12, notes.join("; "))
}

fn sampler_correctness() -> Result<Verdict> {
    let normal = GaussianMixtureWorld::standard_normal(2)?;
    let cfg = SamplerConfig {
        steps: 100,
        dim: 2,
        chains: 10_000,
        seed: 5,
        schedule_kind: ScheduleKind::Cosine,
        record_traces: false,
    };
    let points = unguided_sample(&cfg, &normal)?;
    let reference = GaussianSummary::from_moments(Point::zeros(2), DMatrix::identity(2, 2))?;
    let f = frechet_distance(&fit_gaussian(&points)?, &reference)?;

    let bench = Bench::new()?;
    let sampler = bench.sampler(100, 200, 3);
    let plain = unguided_sample(&sampler, &bench.world)?;
    let zero = bench.cfg.schedule_with(GuidancePrompt::class(0, 0.0)?, Window::Always, 4, 7)?;
    let never = bench.schedule(0, Window::OffThenOn(1.0), 5, 10)?;
    let bits = |ps: &[Point]| ps.iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect::<Vec<u64>>();
    let neutral_zero = bits(&bench.run(&sampler, &zero)?.points()) == bits(&plain);
    let neutral_never = bits(&bench.run(&sampler, &never)?.points()) == bits(&plain);
    verdict(
        f < 0.05 && neutral_zero && neutral_never,
        format!("unguided F = {f:.4}; bit-identical at s=0: {neutral_zero}, off-then-on(1): {neutral_never}"),
    )
}

fn guidelab(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_guidelab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()?;
    ensure!(out.status.success(), "guidelab {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn approximator_pipeline() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().to_str().context("utf-8 temp path")?;
    guidelab(&["dump", "--out", out, "--set", "output.plots=false"])?;
    let records = read_manifest(dir.path())?.metrics["records"].as_u64().context("records")?;
    guidelab(&["train-fphi", "--out", out, "--set", "output.plots=false"])?;
    let train = read_manifest(dir.path())?.metrics;
    let num = |k: &str| train[k].as_f64().with_context(|| k.to_string());
    let (best, epoch0, baseline) = (num("best_validation_mse")?, num("epoch0_validation_mse")?, num("baseline_validation_mse")?);
    guidelab(&["eval-fphi", "--out", out, "--set", "output.plots=false"])?;
    let eval = read_manifest(dir.path())?;
    let steps = eval.config.sampler.steps as u64;
    let chains = eval.config.sampler.chains as u64;
    let fphi = eval.cells.iter().find(|c| c.op_counts.approximator_calls > 0).context("fphi cell")?;
    let counts = fphi.op_counts;
    let two_passes = counts.approximator_calls == steps * chains && counts.denoiser_calls == steps * chains;
    let gap = eval.metrics.get("quality_gap_frechet").and_then(|v| v.as_f64());
    let pass = records >= 30_000
        && best < epoch0
        && best < baseline
        && two_passes
        && counts.backward_gradient_steps == 0
        && eval.metrics.get("model_passes_per_step").and_then(|v| v.as_f64()) == Some(2.0)
        && gap.is_some();
    verdict(
        pass,
        format!(
            "{records} records; validation MSE best {best:.4} vs epoch 0 {epoch0:.4}, baseline {baseline:.4}; \
             fphi passes/step 2: {two_passes}, backward steps {}; Frechet gap {:.3} (guided {:.4}, fphi {:.4})",
            counts.backward_gradient_steps,
            gap.unwrap_or(f64::NAN),
            eval.metrics["frechet_guided"].as_f64().unwrap_or(f64::NAN),
            eval.metrics["frechet_fphi"].as_f64().unwrap_or(f64::NAN),
        ),
    )
}

fn determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let mut files = Vec::new();
    for threads in ["1", "4", "8"] {
        let out = dir.path().join(format!("threads{threads}"));
        guidelab(&["sample", "--out", out.to_str().context("utf-8")?, "--threads", threads, "--chains", "300", "--set", "output.plots=false"])?;
        files.push(std::fs::read(out.join("samples.csv"))?);
    }
    let same = files.windows(2).all(|w| w[0] == w[1]);
    verdict(same && !files[0].is_empty(), format!("samples.csv bit-identical across 1/4/8 threads: {same}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Verdict>); 9] = [
        ("cost accounting", cost_accounting),
        ("runtime scales with k", runtime_scaling),
        ("early guidance dominance", early_guidance),
        ("prompt switching", prompt_switching),
        ("quality ordering in k", quality_ordering),
        ("numerical property suite", numerical_suite),
        ("sampler correctness", sampler_correctness),
        ("approximator pipeline", approximator_pipeline),
        ("determinism across threads", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let (status, detail) = match check() {
            Ok(v) => (if v.pass { "PASS" } else { "FAIL" }, v.detail),
            Err(e) => ("FAIL", format!("error: {e:#}")),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {} ({name}): {status} [{:.1}s] {detail}", i + 1, started.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
