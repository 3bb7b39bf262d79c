use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hscope::harness::{run_invariance_suite, run_neighbor_sweep, run_noise_sweep, SweepSpec, SweepVariable};
use hscope::hslayer::{hs_encoder_forward, EncoderArch};
use hscope::metrics::{read_records, MetricsReport, MIN_IOU_SAMPLES};
use hscope::params::ParamVector;
use hscope::pointcloud::{generate_shape, load_pointcloud, save_pointcloud, PointFormat, ShapeKind, ShapeSpec};
use hscope::training::{
    gradcheck, pose_case, train_toy_rotation, PoseModel, ToyTask, ToyTaskSpec, TrainConfig, DEFAULT_STEP,
};

use crate::{Cli, Command, EncodeArgs, EvalArgs, GenArgs, GradcheckArgs, NeighborSweepArgs, NoiseSweepArgs, TaskArgs};

pub enum Outcome {
    Ok,
    CheckFailed,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let mut ctx = Ctx { cli, lines: Vec::new() };
    let outcome = match &cli.command {
        Command::Gen(a) => ctx.gen(a),
        Command::Encode(a) => ctx.encode(a),
        Command::Gradcheck(a) => ctx.gradcheck(a),
        Command::Train(a) => ctx.train(&a.task),
        Command::NoiseSweep(a) => ctx.noise_sweep(a),
        Command::NeighborSweep(a) => ctx.neighbor_sweep(a),
        Command::Invariance => ctx.invariance(),
        Command::Eval(a) => ctx.eval(a),
    }?;
    if !cli.quiet {
        for l in &ctx.lines {
            println!("{l}");
        }
    }
    Ok(outcome)
}

struct Ctx<'a> {
    cli: &'a Cli,
    lines: Vec<String>,
}

impl Ctx<'_> {
    fn arch(&self) -> Result<EncoderArch> {
        let arch = match &self.cli.config {
            Some(p) => EncoderArch::load(p).with_context(|| format!("--config {}", p.display()))?,
            None => EncoderArch::default(),
        };
        Ok(arch.with_seed(self.cli.seed))
    }

    fn out_file(&self, default: String) -> PathBuf {
        self.cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).with_context(|| format!("--out {}", dir.display()))?;
        Ok(dir)
    }

    fn write(&self, path: &Path, text: &str) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn gen(&mut self, a: &GenArgs) -> Result<Outcome> {
        let Some(kind) = ShapeKind::from_name(&a.shape) else {
            bail!(
                "--shape: unknown shape `{}` (sphere, box, cylinder, mug, laptop)",
                a.shape
            );
        };
        let pc = generate_shape(&ShapeSpec::new(kind, self.cli.seed)?, a.n as usize)?;
        let path = self.out_file(format!("{}_{}.ply", a.shape, self.cli.seed));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        save_pointcloud(&pc, &path, PointFormat::from_path(&path))
            .with_context(|| format!("--out {}", path.display()))?;
        self.lines.push(format!(
            "gen: wrote {} {} points to {}",
            pc.len(),
            a.shape,
            path.display()
        ));
        Ok(Outcome::Ok)
    }

    fn encode(&mut self, a: &EncodeArgs) -> Result<Outcome> {
        let pc = load_pointcloud(&a.input, PointFormat::from_path(&a.input))
            .with_context(|| format!("--input {}", a.input.display()))?;
        let mut model = PoseModel::new(&self.arch()?)?;
        if let Some(p) = &a.params {
            let pv = ParamVector::load_text(p).with_context(|| format!("--params {}", p.display()))?;
            model
                .load_params(&pv)
                .with_context(|| format!("--params {} does not match --config", p.display()))?;
        }
        let (cloud, features) = hs_encoder_forward(&pc, &model.encoder).context("--input")?;
        let mut s = String::from("# x y z");
        for j in 0..features.cols() {
            let _ = write!(s, " f{j}");
        }
        s.push('\n');
        for i in 0..cloud.len() {
            let p = cloud.point(i);
            let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
            for v in features.row(i) {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        let path = self.out_file(format!("features_{}.txt", self.cli.seed));
        self.write(&path, &s)?;
        self.lines.push(format!(
            "encode: {} points -> {} x {} features in {}",
            pc.len(),
            features.rows(),
            features.cols(),
            path.display()
        ));
        Ok(Outcome::Ok)
    }

    fn gradcheck(&mut self, a: &GradcheckArgs) -> Result<Outcome> {
        if !(a.tol > 0.0) {
            bail!("--tol must be positive, got {}", a.tol);
        }
        let arch = self.arch()?;
        let n = a.points.unwrap_or_else(|| arch.min_points().max(32));
        if n < arch.min_points() {
            bail!("--points: encoder needs at least {} points, got {n}", arch.min_points());
        }
        let report = gradcheck(
            |s| pose_case(&arch, n, s),
            a.tol,
            a.samples as usize,
            DEFAULT_STEP,
            self.cli.seed,
        )?;
        let mut s = format!(
            "# gradcheck, seed {}, instance seed {} after {} redraws, {n} points, tol {:e}\n",
            self.cli.seed, report.seed, report.resamples, report.tol
        );
        for g in &report.groups {
            let _ = writeln!(
                s,
                "{:<12} checked {:>4} skipped {:>3} max_rel_err {:.3e}",
                g.group, g.checked, g.skipped, g.max_rel_err
            );
        }
        for c in report.failing() {
            let _ = writeln!(
                s,
                "FAIL {}[{}] analytic {:e} numeric {:e} rel_err {:.3e}",
                c.tensor, c.index, c.analytic, c.numeric, c.rel_err
            );
        }
        let _ = writeln!(s, "{}", if report.passed() { "PASS" } else { "FAIL" });
        self.write(&self.out_dir()?.join(format!("gradcheck_{}.txt", self.cli.seed)), &s)?;
        self.lines.push(format!(
            "gradcheck: {} max relative error {:.3e} (tol {:e})",
            if report.passed() { "PASS" } else { "FAIL" },
            report.max_rel_err(),
            a.tol
        ));
        Ok(if report.passed() {
            Outcome::Ok
        } else {
            Outcome::CheckFailed
        })
    }

    fn task_spec(&self, t: &TaskArgs) -> Result<(ToyTaskSpec, TrainConfig)> {
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            bail!("--lr must be positive, got {}", t.lr);
        }
        if t.n_train == 0 || t.n_test == 0 {
            bail!("--n-train and --n-test must be positive");
        }
        let spec = ToyTaskSpec {
            n_points: t.points,
            n_train: t.n_train,
            n_test: t.n_test,
            max_tilt_deg: t.max_tilt,
            constant_label: false,
            seed: self.cli.seed,
        };
        let train = TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch as usize,
            seed: self.cli.seed,
        };
        Ok((spec, train))
    }

    fn check_points(&self, arch: &EncoderArch, points: usize) -> Result<()> {
        if points < arch.min_points() {
            bail!(
                "--points: encoder needs at least {} points, got {points}",
                arch.min_points()
            );
        }
        Ok(())
    }

    fn train(&mut self, t: &TaskArgs) -> Result<Outcome> {
        let arch = self.arch()?;
        let (spec, cfg) = self.task_spec(t)?;
        self.check_points(&arch, spec.n_points)?;
        let task = ToyTask::generate(&spec).context("--max-tilt")?;
        let mut model = PoseModel::new(&arch)?;
        let report = train_toy_rotation(&task, &mut model, &cfg)?;
        let dir = self.out_dir()?;
        self.write(&dir.join(format!("train_{}.log", self.cli.seed)), &report.to_log())?;
        self.write(
            &dir.join(format!("params_{}.txt", self.cli.seed)),
            &model.to_params().to_text(),
        )?;
        self.lines.push(format!(
            "train: median test error {:.3} deg after {} epochs",
            report.median_error_deg, cfg.epochs
        ));
        Ok(Outcome::Ok)
    }

    fn sweep_spec(&self, variable: SweepVariable, values: Vec<f64>, trials: usize, t: &TaskArgs) -> Result<SweepSpec> {
        let arch = self.arch()?;
        let (task, train) = self.task_spec(t)?;
        self.check_points(&arch, task.n_points)?;
        Ok(SweepSpec {
            variable,
            values,
            trials,
            arch,
            task,
            train,
            seed: self.cli.seed,
        })
    }

    fn noise_sweep(&mut self, a: &NoiseSweepArgs) -> Result<Outcome> {
        let spec = self.sweep_spec(SweepVariable::OutlierRatio, a.ratios.clone(), a.trials, &a.task)?;
        spec.validate().context("--ratios/--trials")?;
        let sweep = run_noise_sweep(&spec).context("--ratios")?;
        let dir = self.out_dir()?;
        let csv = spec.csv_path(&dir, "noise_sweep");
        self.write(&csv, &sweep.to_csv())?;
        self.write(&csv.with_extension("txt"), &sweep.summary())?;
        let (hs, plain) = sweep.median_increase();
        self.lines.push(format!(
            "noise-sweep: error increase hs {hs:.3} deg, plain_gc {plain:.3} deg ({} trials) -> {}",
            a.trials,
            csv.display()
        ));
        Ok(Outcome::Ok)
    }

    fn neighbor_sweep(&mut self, a: &NeighborSweepArgs) -> Result<Outcome> {
        let variable = match SweepVariable::from_name(&a.variable) {
            Some(v) if v != SweepVariable::OutlierRatio => v,
            _ => bail!("--variable must be m_rff, m_orl or m_both, got `{}`", a.variable),
        };
        let spec = self.sweep_spec(variable, a.values.clone(), a.trials, &a.task)?;
        spec.validate().context("--values/--trials")?;
        let sweep = run_neighbor_sweep(&spec, a.timing).context("--values")?;
        let dir = self.out_dir()?;
        let csv = spec.csv_path(&dir, "neighbor_sweep");
        self.write(&csv, &sweep.to_csv())?;
        self.write(&csv.with_extension("txt"), &sweep.summary())?;
        if let Some(t) = sweep.timing_csv() {
            self.write(&spec.csv_path(&dir, "neighbor_timing"), &t)?;
        }
        self.lines.push(format!(
            "neighbor-sweep: {} values of {} -> {}",
            sweep.values.len(),
            variable.name(),
            csv.display()
        ));
        Ok(Outcome::Ok)
    }

    fn invariance(&mut self) -> Result<Outcome> {
        let cfg = self.arch()?.build()?;
        let report = run_invariance_suite(&cfg, self.cli.seed)?;
        self.write(
            &self.out_dir()?.join(format!("invariance_{}.txt", self.cli.seed)),
            &report.to_text(),
        )?;
        let count = |s| report.checks.iter().filter(|c| c.status == s).count();
        use hscope::harness::CheckStatus::*;
        self.lines.push(format!(
            "invariance: {} passed, {} failed, {} skipped",
            count(Pass),
            count(Fail),
            count(Skipped)
        ));
        Ok(if report.passed() {
            Outcome::Ok
        } else {
            Outcome::CheckFailed
        })
    }

    fn eval(&mut self, a: &EvalArgs) -> Result<Outcome> {
        if a.samples < MIN_IOU_SAMPLES {
            bail!("--samples must be at least {MIN_IOU_SAMPLES}, got {}", a.samples);
        }
        let records = read_records(&a.records).with_context(|| format!("--records {}", a.records.display()))?;
        if records.is_empty() {
            bail!("--records {}: no records", a.records.display());
        }
        let report = MetricsReport::compute(&records, a.samples, self.cli.seed)?;
        let table = report.to_table();
        match &self.cli.out {
            Some(p) => {
                self.write(p, &table)?;
                self.lines.push(format!(
                    "eval: {} records in {} categories -> {}",
                    report.count,
                    report.per_category.len(),
                    p.display()
                ));
            }
            None => print!("{table}"),
        }
        Ok(Outcome::Ok)
    }
}
