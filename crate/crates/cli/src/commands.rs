//! Argument parsing and command dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hjkam::action::{minimal_action_with, ActionOptions};
use hjkam::export::{self, fmt_f64};
use hjkam::flow::{integrate_flow, monodromy, resolve_sigma, PhaseState, SigmaEff};
use hjkam::generating::{generating_s, Dynamics};
use hjkam::hamiltonian::{HamiltonianModel, ModelSpec, SampleBox};
use hjkam::laxoleinik::{second_difference_bound, GridFunction, LaxOleinik};
use hjkam::weakkam::{
    aubry_set, calibrated_curve, critical_value, invariant_set, mane_potential, weak_kam_solve, IterationSettings,
    ManeOptions,
};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::acceptance::{run_criteria, CRITERIA};
use crate::config::{load_model, resolve_tolerances, sigma_policy, RunConfig, RunError, Tolerances};

#[derive(Debug, Parser)]
#[command(name = "hjkam", version, about = "Weak KAM numerics for convex Hamiltonians on the torus")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Model description file, or a built-in name (`free`, `pendulum`).
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// JSON run configuration; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Grid nodes per dimension.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "HJKAM_JOBS")]
    pub jobs: Option<usize>,
    /// Twist window override, checked by a twist scan over |p| <= p-max.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    #[arg(long = "p-max", global = true)]
    pub p_max: Option<f64>,
    /// `declared` or `empirical` (ignored when --sigma is given).
    #[arg(long = "sigma-policy", global = true)]
    pub sigma_policy: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the structural hypotheses of the model.
    Check {
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Integrate one orbit.
    Flow(FlowArgs),
    /// Linearized flow along one orbit.
    Monodromy(FlowArgs),
    /// Generating function and endpoint momenta.
    GenS {
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        tau: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        q0: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        q1: Vec<f64>,
    },
    /// Minimal action over broken geodesics.
    Action {
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        tau: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        q0: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        q1: Vec<f64>,
        #[arg(long)]
        segments: Option<usize>,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
    },
    /// Lax-Oleinik operator on a grid function.
    Lax {
        #[arg(long)]
        t: f64,
        /// `zero`, `hat`, `cos`, or a grid CSV file.
        #[arg(long, default_value = "hat")]
        initial: String,
        /// Apply the backward operator instead.
        #[arg(long)]
        dual: bool,
    },
    /// Semi-concave/convex regularization of a grid function.
    Regularize {
        #[arg(long)]
        t: f64,
        #[arg(long, default_value = "hat")]
        initial: String,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Critical value.
    Alpha,
    /// Weak KAM solution at the critical level.
    Weakkam {
        /// Use this level instead of computing the critical value.
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
    },
    /// Mañé potential from a base point.
    Mane {
        #[arg(long, allow_negative_numbers = true)]
        a: f64,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        base: Vec<f64>,
    },
    /// Aubry mask and invariant set of the weak KAM solution.
    Aubry {
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Calibrated orbit realizing the Mañé potential between two points.
    Calibrate {
        #[arg(long, allow_negative_numbers = true)]
        a: f64,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        q0: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        q1: Vec<f64>,
        #[arg(long, default_value_t = 8.0)]
        cap: f64,
    },
    /// Run the acceptance criteria.
    Accept {
        /// Comma-separated criterion numbers.
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub q0: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub p0: Vec<f64>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub t0: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub t1: f64,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Check { .. } => "check",
            Command::Flow(_) => "flow",
            Command::Monodromy(_) => "monodromy",
            Command::GenS { .. } => "gen-s",
            Command::Action { .. } => "action",
            Command::Lax { .. } => "lax",
            Command::Regularize { .. } => "regularize",
            Command::Alpha => "alpha",
            Command::Weakkam { .. } => "weakkam",
            Command::Mane { .. } => "mane",
            Command::Aubry { .. } => "aubry",
            Command::Calibrate { .. } => "calibrate",
            Command::Accept { .. } => "accept",
        }
    }
}

/// Everything resolved before a command runs.
struct Context {
    out: PathBuf,
    seed: u64,
    grid_n: usize,
    tol: Tolerances,
    spec: Option<ModelSpec>,
    model: Option<HamiltonianModel>,
    sigma: Option<SigmaEff>,
    log: Vec<String>,
}

impl Context {
    fn dynamics(&self) -> Result<Dynamics, RunError> {
        match (&self.model, &self.sigma) {
            (Some(m), Some(s)) => Ok(Dynamics::new(m.clone(), s.clone())),
            _ => Err(RunError::Config("this command needs --model (or `model` in the config file)".into())),
        }
    }

    fn model(&self) -> Result<&HamiltonianModel, RunError> {
        self.model.as_ref().ok_or_else(|| RunError::Config("this command needs --model (or `model` in the config file)".into()))
    }

    fn settings(&self) -> IterationSettings {
        IterationSettings {
            grid_n: self.grid_n,
            t_step: self.tol.t_step,
            t_max: self.tol.t_max,
            tol_alpha: self.tol.tol_alpha,
            tol_wk: self.tol.tol_wk,
        }
    }

    fn log(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), RunError> {
        Ok(export::write_file(&self.out.join(name), contents)?)
    }
}

/// Output of one command: a JSON summary plus named CSV datasets.
struct Output {
    summary: Value,
    files: Vec<(String, String)>,
    failed: Option<String>,
}

impl Output {
    fn new(summary: Value) -> Self {
        Self { summary, files: Vec::new(), failed: None }
    }

    fn file(mut self, name: &str, contents: String) -> Self {
        self.files.push((name.to_string(), contents));
        self
    }
}

fn model_hash(spec: &ModelSpec) -> String {
    let canonical = serde_json::to_string(spec).expect("model spec serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve(global: &GlobalArgs, command: &Command) -> Result<Context, RunError> {
    let cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &cfg.command {
        if name != command.name() {
            return Err(RunError::Config(format!("config command `{name}` does not match `{}`", command.name())));
        }
    }
    let tol = resolve_tolerances(&cfg)?;
    let spec = match &global.model {
        Some(arg) => Some(load_model(arg)?),
        None => cfg.model.clone(),
    };
    let model = spec.as_ref().map(|s| s.build()).transpose()?;
    let mut sigma_cfg = cfg.sigma.clone();
    if let Some(p) = &global.sigma_policy {
        sigma_cfg = Some(crate::config::SigmaConfig { policy: p.clone(), value: None, p_max: global.p_max });
    }
    let policy = sigma_policy(sigma_cfg.as_ref(), global.sigma, global.p_max)?;
    let sigma = model.as_ref().map(|m| resolve_sigma(m, policy)).transpose()?;
    let grid_n = global.grid.or(cfg.grid_n).unwrap_or(256);
    if grid_n < 4 {
        return Err(RunError::Config(format!("grid_n must be at least 4, got {grid_n}")));
    }
    Ok(Context {
        out: global.out.clone().or(cfg.out).unwrap_or_else(|| PathBuf::from("hjkam-out")),
        seed: global.seed.or(cfg.seed).unwrap_or(0),
        grid_n,
        tol,
        spec,
        model,
        sigma,
        log: Vec::new(),
    })
}

fn initial_function(name: &str, d: usize, n: usize) -> Result<GridFunction, RunError> {
    let pi = std::f64::consts::PI;
    match name {
        "zero" => Ok(GridFunction::constant(d, n, 0.0)),
        "hat" => Ok(GridFunction::from_fn(d, n, |q| q.iter().map(|x| (x - 0.5).abs()).sum())),
        "cos" => Ok(GridFunction::from_fn(d, n, |q| q.iter().map(|x| (2.0 * pi * x).cos() / (2.0 * pi)).sum())),
        path => read_grid_csv(Path::new(path), d),
    }
}

/// Reads the value column of a grid CSV as written by `export::grid_csv`.
fn read_grid_csv(path: &Path, d: usize) -> Result<GridFunction, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        RunError::Config(format!("--initial: `{}` is not zero|hat|cos and cannot be read: {e}", path.display()))
    })?;
    let mut values = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let last = line.rsplit(',').next().unwrap_or("");
        let v: f64 = last
            .trim()
            .parse()
            .map_err(|_| RunError::Config(format!("{}: line {}: cannot parse value `{last}`", path.display(), k + 1)))?;
        values.push(v);
    }
    let n = (values.len() as f64).powf(1.0 / d as f64).round() as usize;
    Ok(GridFunction::new(d, n, values)?)
}

fn check_dim(name: &str, v: &[f64], d: usize) -> Result<(), RunError> {
    if v.len() != d {
        return Err(RunError::Config(format!("--{name} needs {d} comma-separated values, got {}", v.len())));
    }
    Ok(())
}

fn execute(ctx: &mut Context, command: &Command) -> Result<Output, RunError> {
    match command {
        Command::Check { samples } => {
            let model = ctx.model()?;
            let report = model.check_hypotheses(&SampleBox::standard(model.dim()), *samples, ctx.seed);
            ctx.log(format!("hypotheses pass: {}", report.all_pass()));
            Ok(Output::new(serde_json::to_value(&report).expect("report serializes")))
        }
        Command::Flow(a) | Command::Monodromy(a) => {
            let dy = ctx.dynamics()?;
            check_dim("q0", &a.q0, dy.dim())?;
            check_dim("p0", &a.p0, dy.dim())?;
            let x0 = PhaseState::new(a.q0.clone(), a.p0.clone());
            if matches!(command, Command::Monodromy(_)) {
                let m = monodromy(&dy.model, &x0, a.t0, a.t1, dy.step())?;
                ctx.log(format!("symplectic defect {:.3e}", m.symplectic_defect()));
                let mut summary = serde_json::to_value(&m).expect("monodromy serializes");
                summary["symplectic_defect"] = json!(m.symplectic_defect());
                Ok(Output::new(summary))
            } else {
                let traj = integrate_flow(&dy.model, &x0, a.t0, a.t1, dy.step())?;
                ctx.log(format!("{} steps, energy drift {:.3e}", traj.times.len() - 1, traj.max_energy_drift()));
                Ok(Output::new(json!({
                    "terminal": traj.terminal(),
                    "steps": traj.times.len() - 1,
                    "max_energy_drift": traj.max_energy_drift(),
                }))
                .file("trajectory.csv", export::trajectory_csv(&traj)))
            }
        }
        Command::GenS { tau, t, q0, q1 } => {
            let dy = ctx.dynamics()?;
            check_dim("q0", q0, dy.dim())?;
            check_dim("q1", q1, dy.dim())?;
            let g = generating_s(&dy, *tau, *t, q0, q1)?;
            ctx.log(format!("S = {}", fmt_f64(g.s)));
            let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";");
            let csv = format!(
                "tau,t,q0,q1,S,rho0,rho1\n{},{},{},{},{},{},{}\n",
                fmt_f64(*tau),
                fmt_f64(*t),
                join(q0),
                join(q1),
                fmt_f64(g.s),
                join(&g.rho0),
                join(&g.rho1)
            );
            print!("{csv}");
            Ok(Output::new(json!({"tau": tau, "t": t, "q0": q0, "q1": q1, "S": g.s, "rho0": g.rho0, "rho1": g.rho1}))
                .file("gen_s.csv", csv))
        }
        Command::Action { tau, t, q0, q1, segments, restarts } => {
            let dy = ctx.dynamics()?;
            check_dim("q0", q0, dy.dim())?;
            check_dim("q1", q1, dy.dim())?;
            let opts = ActionOptions { n: *segments, restarts: *restarts, seed: ctx.seed, ..ActionOptions::default() };
            let (a, path) = minimal_action_with(&dy, *tau, *t, q0, q1, &opts)?;
            ctx.log(format!("A = {} with n = {}, max jump {:.3e}", fmt_f64(a), path.n, path.max_jump()));
            Ok(Output::new(json!({"A": a, "n": path.n, "max_jump": path.max_jump(), "nodes": path.nodes}))
                .file("minimizer.csv", export::minimizer_csv(&path)))
        }
        Command::Lax { t, initial, dual } => {
            let lo = LaxOleinik::new(ctx.dynamics()?)?;
            let u = initial_function(initial, lo.dynamics.dim(), ctx.grid_n)?;
            let v = if *dual { lo.apply_t_dual(&u, *t, 0.0)? } else { lo.apply_t(&u, 0.0, *t)? };
            ctx.log(format!("{} {} over t = {t}", if *dual { "backward" } else { "forward" }, initial));
            export::write_grid(&ctx.out, "initial", &u)?;
            export::write_grid(&ctx.out, "result", &v)?;
            Ok(Output::new(json!({"t": t, "dual": dual, "min": v.min(), "max": v.max(), "second_difference_bound": second_difference_bound(&v)})))
        }
        Command::Regularize { t, initial, delta } => {
            let lo = LaxOleinik::new(ctx.dynamics()?)?;
            let u = initial_function(initial, lo.dynamics.dim(), ctx.grid_n)?;
            let delta = delta.unwrap_or_else(|| lo.default_delta());
            let v = lo.regularize_r(&u, 0.0, *t, delta)?;
            ctx.log(format!("R^t with t = {t}, delta = {delta}"));
            export::write_grid(&ctx.out, "initial", &u)?;
            export::write_grid(&ctx.out, "result", &v)?;
            Ok(Output::new(json!({
                "t": t,
                "delta": delta,
                "second_difference_bound_before": second_difference_bound(&u),
                "second_difference_bound_after": second_difference_bound(&v),
            })))
        }
        Command::Alpha => {
            let lo = LaxOleinik::new(ctx.dynamics()?)?;
            let r = critical_value(&lo, &ctx.settings())?;
            ctx.log(format!("alpha = {} after {} iterations", fmt_f64(r.alpha), r.iterations));
            let mut csv = String::from("t,a_plus,a_minus\n");
            for h in &r.history {
                csv.push_str(&format!("{},{},{}\n", fmt_f64(h.t), fmt_f64(h.a_plus), fmt_f64(h.a_minus)));
            }
            Ok(Output::new(json!({"alpha": r.alpha, "iterations": r.iterations})).file("history.csv", csv))
        }
        Command::Weakkam { alpha } => {
            let lo = LaxOleinik::new(ctx.dynamics()?)?;
            let s = ctx.settings();
            let alpha = match alpha {
                Some(a) => *a,
                None => critical_value(&lo, &s)?.alpha,
            };
            let r = weak_kam_solve(&lo, alpha, &s)?;
            let u = r.u.as_ref().expect("solver returns u");
            ctx.log(format!("alpha = {}, residual {:.3e}", fmt_f64(alpha), r.residual.unwrap_or(f64::NAN)));
            export::write_grid(&ctx.out, "u", u)?;
            let mut du = String::from("q,u,du\n");
            for i in 0..u.len() {
                let q = u.node(i);
                du.push_str(&format!("{},{},{}\n", fmt_f64(q[0]), fmt_f64(u.values[i]), fmt_f64(u.gradient_fd(i)[0])));
            }
            let out = Output::new(json!({
                "alpha": alpha,
                "residual": r.residual,
                "t_probe": r.t_probe,
                "iterations": r.iterations,
            }));
            Ok(if u.d == 1 { out.file("u_du.csv", du) } else { out })
        }
        Command::Mane { a, base } => {
            let lo = LaxOleinik::new(ctx.dynamics()?)?;
            let base = if base.is_empty() { vec![0.0; lo.dynamics.dim()] } else { base.clone() };
            check_dim("base", &base, lo.dynamics.dim())?;
            let opts = ManeOptions { t_max: ctx.tol.mane_t_max, t_step: ctx.tol.t_step, ..ManeOptions::default() };
            let field = mane_potential(&lo, *a, &base, ctx.grid_n, &opts)?;
            ctx.log(format!("Mane potential at level {a}, max {}", fmt_f64(field.phi.max())));
            export::write_grid(&ctx.out, "phi", &field.phi)?;
            Ok(Output::new(json!({"a": a, "q_base": base, "max": field.phi.max(), "t_argmin": field.t_argmin})))
        }
        Command::Aubry { eps } => {
            let lo = LaxOleinik::new(ctx.dynamics()?)?;
            let s = ctx.settings();
            let alpha = critical_value(&lo, &s)?.alpha;
            let aubry = aubry_set(&lo, alpha, &s, *eps)?;
            let wk = weak_kam_solve(&lo, alpha, &s)?;
            let u = wk.u.expect("solver returns u");
            let inv = invariant_set(&lo, &u, ctx.tol.t_step, 30, ctx.tol.tol_graph)?;
            let defect = inv.stability_defect(&lo, &u, ctx.tol.t_step)?;
            ctx.log(format!("{} marked nodes, {} invariant points", aubry.marked_nodes().len(), inv.points.len()));
            let mut inv_csv = String::new();
            for p in &inv.points {
                inv_csv.push_str(
                    &p.q.iter().chain(&p.p).map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(","),
                );
                inv_csv.push('\n');
            }
            Ok(Output::new(json!({
                "alpha": alpha,
                "eps": aubry.eps,
                "marked_nodes": aubry.marked_nodes(),
                "invariant_points": inv.points,
                "invariant_dropped": inv.dropped,
                "invariant_seeds": inv.seeds,
                "stability_defect": defect,
            }))
            .file("aubry.csv", export::aubry_csv(&aubry))
            .file("invariant.csv", inv_csv))
        }
        Command::Calibrate { a, q0, q1, cap } => {
            let dy = ctx.dynamics()?;
            check_dim("q0", q0, dy.dim())?;
            check_dim("q1", q1, dy.dim())?;
            let c = calibrated_curve(&dy, *a, q0, q1, *cap)?;
            ctx.log(format!("tau = {}, attained: {}", fmt_f64(c.tau), c.attained));
            Ok(Output::new(json!({
                "a": c.a,
                "q0": c.q0,
                "q1": c.q1,
                "tau": c.tau,
                "attained": c.attained,
                "max_energy_deviation": c.max_energy_deviation,
            }))
            .file("trajectory.csv", export::trajectory_csv(&c.trajectory)))
        }
        Command::Accept { only } => {
            let ids: Vec<usize> = if only.is_empty() { CRITERIA.iter().map(|c| c.0).collect() } else { only.clone() };
            if let Some(bad) = ids.iter().find(|i| !CRITERIA.iter().any(|c| c.0 == **i)) {
                return Err(RunError::Config(format!("--only: no criterion {bad} (valid: 1-12)")));
            }
            let results = run_criteria(&ids, ctx.seed);
            for r in &results {
                println!("{}", r.line());
                ctx.log(r.line());
            }
            let failed: Vec<usize> = results.iter().filter(|r| !r.pass).map(|r| r.id).collect();
            let mut out = Output::new(json!({ "criteria": results }));
            if !failed.is_empty() {
                out.failed = Some(format!("criteria failed: {failed:?}"));
            }
            Ok(out)
        }
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    grid_n: usize,
    model: Option<&'a ModelSpec>,
    model_sha256: Option<String>,
    sigma: Option<&'a SigmaEff>,
    tolerances: &'a Tolerances,
}

/// Runs a parsed command line and writes its outputs.
pub fn dispatch(cli: &Cli) -> Result<(), RunError> {
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(RunError::Config("--jobs must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let mut ctx = resolve(&cli.global, &cli.command)?;
    let name = cli.command.name();
    let meta = Meta {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        seed: ctx.seed,
        grid_n: ctx.grid_n,
        model: ctx.spec.as_ref(),
        model_sha256: ctx.spec.as_ref().map(model_hash),
        sigma: ctx.sigma.as_ref(),
        tolerances: &ctx.tol,
    };
    let meta_json = export::to_json(&meta)?;
    ctx.write("meta.json", &meta_json)?;
    ctx.log(format!("hjkam {name} seed={} grid_n={}", ctx.seed, ctx.grid_n));
    if let Some(s) = &ctx.sigma {
        ctx.log(format!("sigma_eff = {} ({:?})", s.value, s.policy));
    }
    let result = execute(&mut ctx, &cli.command);
    let output = match result {
        Ok(o) => o,
        Err(e) => {
            ctx.log(format!("error: {e}"));
            ctx.write("run.log", &(ctx.log.join("\n") + "\n"))?;
            return Err(e);
        }
    };
    let mut summary = json!({ "command": name, "seed": ctx.seed });
    if let (Value::Object(dst), Value::Object(src)) = (&mut summary, output.summary.clone()) {
        dst.extend(src);
    } else {
        summary["result"] = output.summary.clone();
    }
    let summary_json = export::to_json(&summary)?;
    ctx.write("summary.json", &summary_json)?;
    for (file, contents) in &output.files {
        ctx.write(file, contents)?;
    }
    ctx.log(format!("wrote {}", ctx.out.display()));
    ctx.write("run.log", &(ctx.log.join("\n") + "\n"))?;
    if !matches!(cli.command, Command::GenS { .. } | Command::Accept { .. }) {
        print!("{summary_json}");
    }
    match output.failed {
        Some(m) => Err(RunError::Solver(hjkam::Error::NonConvergence { what: "acceptance", detail: m })),
        None => Ok(()),
    }
}
