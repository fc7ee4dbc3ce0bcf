//! `homoglab`: cell problems, Dirichlet solves, sweeps and probes from the command line.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use homoglab_core::cell::CorrectorSet;
use homoglab_core::config::{hash_str, ExperimentConfig};
use homoglab_core::dyadic::{self, GridFunction, RootCube};
use homoglab_core::estimates::{self, ConstantEstimate, FluxGenerator, HardyTrial, RhsFamily};
use homoglab_core::fem::{self, AssemblyOptions, CoefficientField, ProblemData, SolverConfig, DIM};
use homoglab_core::geometry::{self, Ball, BallKind, PolygonDomain, TriMesh, DEFAULT_C0};
use homoglab_core::io::{self, CellCache};
use homoglab_core::report::{self, CsvRow};
use homoglab_core::weights::{self, Sampling, Weight};

#[derive(Debug, Parser)]
#[command(name = "homoglab", version, about = "Weighted estimates in periodic homogenization")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory for CSV and SVG files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory for HLMESH1 mesh files.
    #[arg(long, global = true)]
    mesh_cache: Option<PathBuf>,
    /// Exit 1 when a measured quantity violates its acceptance threshold.
    #[arg(long, global = true)]
    assert: bool,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Relative residual target of the linear solver.
    #[arg(long, global = true, default_value_t = SolverConfig::default().tol)]
    tol: f64,
    #[arg(long, global = true, default_value_t = SolverConfig::default().max_iter)]
    max_iter: usize,
    /// Skip the h <= eps/8 resolution rule.
    #[arg(long, global = true)]
    allow_coarse: bool,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    fn assembly(&self) -> AssemblyOptions {
        AssemblyOptions {
            allow_coarse: self.allow_coarse,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Periodic correctors, homogenized matrix and cell diagnostics.
    Cell {
        #[arg(long)]
        coef: String,
        #[arg(long, default_value_t = 64)]
        res: usize,
    },
    /// One Dirichlet solve with a seeded random flux.
    Solve {
        #[arg(long, default_value = "square")]
        domain: String,
        #[arg(long)]
        coef: String,
        #[arg(long, default_value_t = 0.125)]
        eps: f64,
        /// Grid cells per unit length.
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// `constant` or `sigma:<s>`.
        #[arg(long, default_value = "constant")]
        weight: String,
    },
    /// Dirichlet constants over an eps x sigma grid described by a JSON config.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        coef: Option<String>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        eps: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        sigma: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Single-inequality probes.
    Probe {
        #[command(subcommand)]
        probe: Probe,
    },
    /// A_p and reverse Hölder constants of a weight.
    Weights {
        #[arg(long, default_value = "square")]
        domain: String,
        #[arg(long, default_value = "sigma:-0.5")]
        weight: String,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        #[arg(long, default_value_t = 2000)]
        balls: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Boundary,
    Interior,
}

impl From<Kind> for BallKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Boundary => BallKind::Boundary,
            Kind::Interior => BallKind::Interior,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Probe {
    /// Reverse Hölder ratio of local solutions.
    Rh {
        #[arg(long, default_value = "lshape")]
        domain: String,
        #[arg(long, default_value = "laminate")]
        coef: String,
        /// Use the homogenized matrix of the coefficient.
        #[arg(long)]
        homogenized: bool,
        #[arg(long, default_value_t = 64)]
        cell_res: usize,
        #[arg(long, default_value_t = 0.125)]
        eps: f64,
        #[arg(long, default_value_t = 128)]
        res: usize,
        #[arg(long, default_value = "sigma:-0.5")]
        weight: String,
        #[arg(long, default_value_t = 32)]
        balls: usize,
        #[arg(long, value_enum, default_value_t = Kind::Boundary)]
        kind: Kind,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Hardy constant over the distance trial and random bubbles.
    Hardy {
        #[arg(long, default_value = "square")]
        domain: String,
        #[arg(long, default_value_t = 128)]
        res: usize,
        #[arg(long, default_value_t = 50)]
        balls: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Local decomposition ratios on interior balls.
    Decomp {
        #[arg(long, default_value = "square")]
        domain: String,
        #[arg(long, default_value = "checkerboard")]
        coef: String,
        #[arg(long, default_value_t = 0.25)]
        eps: f64,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value = "sigma:-0.5")]
        weight: String,
        #[arg(long, default_value_t = 50)]
        balls: usize,
        #[arg(long, default_value_t = 4)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Truncated maximal comparison and weighted bounds on random grid functions.
    Maximal {
        /// Grid level: 2^level cells per side of the unit square.
        #[arg(long, default_value_t = 6)]
        level: u32,
        #[arg(long, default_value = "sigma:-0.5")]
        weight: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn of(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    fn label(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        }
    }
}

/// Run-wide settings shared by every command.
struct Ctx {
    out: Option<PathBuf>,
    mesh_cache: PathBuf,
    solver: SolverConfig,
    opts: AssemblyOptions,
}

impl Ctx {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn solver_json(&self) -> serde_json::Value {
        json!({"tol": self.solver.tol, "max_iter": self.solver.max_iter, "allow_coarse": self.opts.allow_coarse})
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok((verdict, assert)) => {
            if assert && verdict == Verdict::Fail {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(Verdict, bool)> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("building the worker pool")?;
    }
    let ctx = Ctx {
        out: cli.out,
        mesh_cache: cli.mesh_cache.unwrap_or_else(|| io::cache_dir().join("mesh")),
        solver: cli.solver.config(),
        opts: cli.solver.assembly(),
    };
    let start = Instant::now();
    let verdict = match cli.command {
        Command::Cell { coef, res } => cmd_cell(&coef, res)?,
        Command::Solve {
            domain,
            coef,
            eps,
            res,
            seed,
            weight,
        } => cmd_solve(&ctx, &domain, &coef, eps, res, seed, &weight)?,
        Command::Sweep {
            config,
            coef,
            eps,
            sigma,
            trials,
            seed,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(c) = coef {
                cfg.coef = c;
            }
            if let Some(e) = eps {
                cfg.eps = e;
            }
            if let Some(s) = sigma {
                cfg.sigma = s;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            cmd_sweep(&ctx, &cfg)?
        }
        Command::Probe { probe } => cmd_probe(&ctx, probe)?,
        Command::Weights {
            domain,
            weight,
            p,
            balls,
            seed,
        } => cmd_weights(&ctx, &domain, &weight, p, balls, seed)?,
    };
    info!("finished in {:.1} s", start.elapsed().as_secs_f64());
    Ok((verdict, cli.assert))
}

/// `constant` or `sigma:<s>`; returns the weight and its sigma.
fn parse_weight(spec: &str, domain: &PolygonDomain) -> Result<(Weight, f64)> {
    if spec == "constant" {
        return Ok((Weight::constant(1.0), 0.0));
    }
    let s: f64 = spec
        .strip_prefix("sigma:")
        .with_context(|| format!("weight must be `constant` or `sigma:<s>`, got `{spec}`"))?
        .parse()
        .with_context(|| format!("bad sigma in `{spec}`"))?;
    Ok((weights::make_distance_weight(domain.clone(), s)?, s))
}

fn load_domain(name: &str) -> Result<PolygonDomain> {
    Ok(PolygonDomain::by_name(name)?)
}

fn resolution_h(res: usize) -> Result<f64> {
    if res == 0 {
        bail!("--res must be positive");
    }
    Ok(1.0 / res as f64)
}

/// Triangulation, read from the mesh cache when present.
fn mesh_for(ctx: &Ctx, domain: &PolygonDomain, res: usize) -> Result<TriMesh> {
    let h = resolution_h(res)?;
    let path = ctx.mesh_cache.join(format!("{}-{}.hlmesh", domain.name(), res));
    if path.exists() {
        match io::load(&path, |r| io::read_mesh(r, domain)) {
            Ok(mesh) => {
                info!("mesh from {}", path.display());
                return Ok(mesh);
            }
            Err(e) => log::warn!("ignoring mesh cache {}: {e}", path.display()),
        }
    }
    let mesh = geometry::triangulate(domain, h)?;
    io::save(&path, &mesh, io::write_mesh)?;
    Ok(mesh)
}

fn hash_of(value: &serde_json::Value) -> String {
    hash_str(&serde_json::to_string(value).expect("json serializes"))
}

fn write_rows(ctx: &Ctx, stem: &str, hash: &str, rows: &[CsvRow]) -> Result<PathBuf> {
    let dir = ctx.out_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{stem}-{}.csv", &hash[..16]));
    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    report::write_csv(std::io::BufWriter::new(file), rows)?;
    Ok(path)
}

fn verdict_line(name: &str, verdict: Verdict, detail: &str) {
    println!("{name}: {} {detail}", verdict.label());
}

fn cmd_cell(coef: &str, res: usize) -> Result<Verdict> {
    let field = CoefficientField::by_name(coef)?;
    let set = CorrectorSet::compute(&field, res).context("cell problem failed")?;
    let d = set.diagnostics;
    let s = set.correctors.size();
    println!("coefficient {coef}, resolution {res}, m = {}", field.m());
    println!("A_hat:");
    for r in 0..s {
        let row: Vec<String> = (0..s).map(|c| format!("{:>20}", report::fmt_float(set.a_hat[r * s + c]))).collect();
        println!("  {}", row.join(""));
    }
    println!("chi H1 norm            {}", report::fmt_float(d.chi_h1));
    println!("chi mean               {}", report::fmt_float(d.chi_mean));
    println!("weak residual          {}", report::fmt_float(d.weak_residual));
    println!("b average              {}", report::fmt_float(d.b_average));
    println!("b weak divergence      {}", report::fmt_float(d.b_divergence));
    println!("phi antisymmetry       {}", report::fmt_float(d.phi_antisymmetry));
    println!("phi reconstruction     {}", report::fmt_float(d.phi_reconstruction));
    let path = io::cache_dir().join("cell").join(format!("{coef}-{res}.hlcell"));
    io::save(&path, &CellCache::from_set(&set), io::write_cell)?;
    println!("cache {}", path.display());
    let ok = d.b_average <= 1e-6 && d.b_divergence <= 1e-4 && d.phi_antisymmetry == 0.0 && d.phi_reconstruction <= 1e-4;
    let verdict = Verdict::of(ok);
    verdict_line("cell", verdict, "b average <= 1e-6, b divergence <= 1e-4, phi reconstruction <= 1e-4");
    Ok(verdict)
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(ctx: &Ctx, domain: &str, coef: &str, eps: f64, res: usize, seed: u64, weight: &str) -> Result<Verdict> {
    let dom = load_domain(domain)?;
    let field = CoefficientField::by_name(coef)?;
    let (w, sigma) = parse_weight(weight, &dom)?;
    let hash = hash_of(&json!({
        "command": "solve", "domain": domain, "coef": coef, "eps": eps, "res": res,
        "seed": seed, "weight": weight, "solver": ctx.solver_json(),
    }));
    let mesh = mesh_for(ctx, &dom, res)?;
    let m = field.m();
    let comps = m * DIM;
    let mut f = estimates::trial_flux(&mesh, m, FluxGenerator::Trig, seed);
    let norm = fem::weighted_norm(&f, comps, &Weight::constant(1.0), &mesh, None)?.sqrt();
    if norm > 0.0 {
        f.iter_mut().for_each(|v| *v /= norm);
    }
    let data = ProblemData::flux_only(&mesh, m, f);
    // the solution does not depend on the weight
    let key = hash_of(&json!({
        "domain": domain, "coef": coef, "eps": eps, "res": res, "seed": seed, "solver": ctx.solver_json(),
    }));
    let path = io::cache_dir().join("solve").join(format!("{}.hlsol", &key[..16]));
    let cached = path
        .exists()
        .then(|| io::load(&path, io::read_solution).ok())
        .flatten()
        .filter(|(v, mm, _)| *mm == m && v.len() == mesh.n_vertices() * m);
    let (values, stats) = match cached {
        Some((v, _, s)) => {
            info!("solution from {}", path.display());
            (v, s)
        }
        None => {
            let sol = fem::solve_problem(&mesh, &field, eps, &data, ctx.opts, ctx.solver)?;
            io::save(&path, &sol, io::write_solution)?;
            (sol.values, sol.stats)
        }
    };
    let grads = fem::gradient(&values, m, &mesh);
    let flux = data.flux.as_deref().unwrap_or_default();
    let num = fem::weighted_norm(&grads, comps, &w, &mesh, None)?;
    let den = fem::weighted_norm(flux, comps, &w, &mesh, None)?;
    let ratio = num / den;
    println!(
        "{} vertices, {} triangles, h = {}",
        mesh.n_vertices(),
        mesh.n_triangles(),
        report::fmt_float(mesh.h())
    );
    println!("solver: {} iterations, residual {}", stats.iterations, report::fmt_float(stats.residual));
    println!("weighted |grad u|^2 / |f|^2 = {}", report::fmt_float(ratio));
    println!("cache {}", path.display());
    let est = ConstantEstimate {
        inequality: "dirichlet".into(),
        constant: ratio,
        trials: 1,
        worst_trial: format!("trig#{seed}"),
        config_hash: hash.clone(),
    };
    let rows = [CsvRow::new(&est, dom.name(), coef).eps(eps).sigma(sigma)];
    let csv = write_rows(ctx, "solve", &hash, &rows)?;
    println!("csv {}", csv.display());
    let bound = field.mu().powi(-2);
    let verdict = Verdict::of(ratio.is_finite() && (sigma != 0.0 || ratio <= bound * (1.0 + 1e-8)));
    verdict_line("solve", verdict, &format!("ratio {}", report::fmt_float(ratio)));
    Ok(verdict)
}

/// Max/min spread per sigma row allowed by the uniformity check.
const SPREAD_LIMIT: f64 = 2.0;

fn cmd_sweep(ctx: &Ctx, cfg: &ExperimentConfig) -> Result<Verdict> {
    let dom = cfg.domain.load()?;
    let field = CoefficientField::by_name(&cfg.coef)?;
    let hash = cfg.hash();
    let sigmas = cfg.sigmas();
    let rep = estimates::epsilon_sigma_sweep(
        &dom,
        &field,
        &cfg.eps,
        &sigmas,
        &cfg.family(),
        cfg.per_period,
        cfg.assembly(),
        cfg.solver(),
    );
    let out = Ctx {
        out: ctx.out.clone().or_else(|| Some(cfg.out.clone())),
        mesh_cache: ctx.mesh_cache.clone(),
        solver: ctx.solver,
        opts: ctx.opts,
    };
    let csv = write_rows(&out, "sweep", &hash, &report::sweep_rows(&rep, &hash))?;
    let svg = csv.with_extension("svg");
    std::fs::write(&svg, report::sweep_chart(&rep).to_svg()).with_context(|| format!("writing {}", svg.display()))?;
    println!("csv {}", csv.display());
    println!("svg {}", svg.display());
    let bound = field.mu().powi(-2);
    let mut ok = true;
    for (si, &s) in sigmas.iter().enumerate() {
        let row = rep.sigma_row(si);
        let shown: Vec<String> = row
            .iter()
            .map(|c| c.map_or_else(|| "failed".to_string(), report::fmt_float))
            .collect();
        match rep.spread(si) {
            Some(spread) => {
                ok &= spread <= SPREAD_LIMIT;
                println!("sigma {s:+.3}: max/min {spread:.4} [{}]", shown.join(", "));
            }
            None => println!("sigma {s:+.3}: max/min n/a [{}]", shown.join(", ")),
        }
        if s == 0.0 {
            let within = row.iter().flatten().all(|c| *c <= bound * (1.0 + 1e-8));
            ok &= within;
            println!("sigma +0.000: all <= mu^-2 = {}: {within}", report::fmt_float(bound));
        }
    }
    let failed: Vec<&str> = rep.cells.iter().filter_map(|c| c.error.as_deref()).collect();
    if !failed.is_empty() {
        bail!("{} sweep cells failed (marked in {}): {}", failed.len(), csv.display(), failed[0]);
    }
    let verdict = Verdict::of(ok);
    verdict_line("sweep", verdict, &format!("per-sigma max/min <= {SPREAD_LIMIT}"));
    Ok(verdict)
}

fn cmd_probe(ctx: &Ctx, probe: Probe) -> Result<Verdict> {
    match probe {
        Probe::Rh {
            domain,
            coef,
            homogenized,
            cell_res,
            eps,
            res,
            weight,
            balls,
            kind,
            trials,
            seed,
        } => {
            let dom = load_domain(&domain)?;
            let (w, sigma) = parse_weight(&weight, &dom)?;
            let base = CoefficientField::by_name(&coef)?;
            let field = if homogenized {
                CorrectorSet::compute(&base, cell_res)?.homogenized_field()
            } else {
                base
            };
            let hash = hash_of(&json!({
                "command": "probe rh", "domain": domain, "coef": coef, "homogenized": homogenized,
                "cell_res": cell_res, "eps": eps, "res": res, "weight": weight, "balls": balls,
                "kind": format!("{kind:?}"), "trials": trials, "seed": seed, "solver": ctx.solver_json(),
            }));
            let mesh = mesh_for(ctx, &dom, res)?;
            let cap = DEFAULT_C0 * dom.diameter();
            let specs = geometry::sample_balls(&dom, kind.into(), balls, (0.3 * cap, 0.85 * cap), seed, DEFAULT_C0)?;
            let est = estimates::check_reverse_holder(&mesh, &field, eps, &w, &specs, trials, seed, ctx.opts, ctx.solver)?
                .with_hash(&hash);
            let kind: BallKind = kind.into();
            let rows = [CsvRow::new(&est, dom.name(), field.name())
                .eps(eps)
                .sigma(sigma)
                .ball_kind(kind.as_str())];
            let csv = write_rows(ctx, "probe-rh", &hash, &rows)?;
            println!("csv {}", csv.display());
            let verdict = Verdict::of(est.constant.is_finite());
            verdict_line(
                "rh",
                verdict,
                &format!("C = {} over {} trials (worst {})", report::fmt_float(est.constant), est.trials, est.worst_trial),
            );
            Ok(verdict)
        }
        Probe::Hardy {
            domain,
            res,
            balls,
            seed,
        } => {
            let dom = load_domain(&domain)?;
            let hash = hash_of(&json!({
                "command": "probe hardy", "domain": domain, "res": res, "balls": balls, "seed": seed,
            }));
            let mesh = mesh_for(ctx, &dom, res)?;
            let bb = dom.bbox();
            let scale = bb.width().min(bb.height());
            let mut trials = vec![HardyTrial::Distance];
            trials.extend(estimates::random_bubbles(&dom, balls, (0.05 * scale, 0.25 * scale), seed));
            let dist = estimates::hardy_check(&mesh, &trials[..1])?.with_hash(&hash);
            let all = estimates::hardy_check(&mesh, &trials)?.with_hash(&hash);
            let rows = [
                CsvRow::new(&dist, dom.name(), "").ball_kind("dist"),
                CsvRow::new(&all, dom.name(), "").ball_kind("bubble"),
            ];
            let csv = write_rows(ctx, "probe-hardy", &hash, &rows)?;
            println!("csv {}", csv.display());
            println!("dist trial ratio {}", report::fmt_float(dist.constant));
            let verdict = Verdict::of(all.constant.is_finite() && (dist.constant - 1.0).abs() <= 1e-3);
            verdict_line(
                "hardy",
                verdict,
                &format!("C = {} over {} trials (worst {})", report::fmt_float(all.constant), all.trials, all.worst_trial),
            );
            Ok(verdict)
        }
        Probe::Decomp {
            domain,
            coef,
            eps,
            res,
            weight,
            balls,
            trials,
            seed,
        } => {
            let dom = load_domain(&domain)?;
            let (w, sigma) = parse_weight(&weight, &dom)?;
            let field = CoefficientField::by_name(&coef)?;
            let hash = hash_of(&json!({
                "command": "probe decomp", "domain": domain, "coef": coef, "eps": eps, "res": res,
                "weight": weight, "balls": balls, "trials": trials, "seed": seed, "solver": ctx.solver_json(),
            }));
            let mesh = mesh_for(ctx, &dom, res)?;
            let cap = DEFAULT_C0 * dom.diameter();
            let specs = geometry::sample_balls(&dom, BallKind::Interior, balls, (0.15 * cap, 0.45 * cap), seed, DEFAULT_C0)?;
            let family = RhsFamily {
                count: trials,
                seed,
                generator: FluxGenerator::Trig,
            };
            let ball_list: Vec<Ball> = specs.iter().map(|b| b.ball).collect();
            let probe = estimates::decomposition_probe(
                &mesh, &field, eps, &w, &ball_list, &family, 2.0, 3.0, ctx.opts, ctx.solver,
            )?;
            let worst = |key: fn(&estimates::BallRecord) -> f64| {
                probe
                    .records
                    .iter()
                    .enumerate()
                    .fold(None::<(usize, f64)>, |b, (i, r)| match b {
                        Some((_, v)) if key(r) <= v => b,
                        _ => Some((i, key(r))),
                    })
            };
            let mut rows = Vec::new();
            for (name, key) in [
                ("decomposition_n1", (|r: &estimates::BallRecord| r.n1_ratio) as fn(&estimates::BallRecord) -> f64),
                ("decomposition_r", |r: &estimates::BallRecord| r.r_ratio),
            ] {
                if let Some((i, v)) = worst(key) {
                    let r = &probe.records[i];
                    let est = ConstantEstimate {
                        inequality: name.into(),
                        constant: v,
                        trials: probe.records.len(),
                        worst_trial: format!("interior#{}/{}", ball_list.iter().position(|b| *b == r.ball).unwrap_or(0), r.trial),
                        config_hash: hash.clone(),
                    };
                    rows.push(CsvRow::new(&est, dom.name(), &coef).eps(eps).sigma(sigma).ball_kind("interior"));
                }
            }
            let csv = write_rows(ctx, "probe-decomp", &hash, &rows)?;
            println!("csv {}", csv.display());
            let verdict = Verdict::of(!probe.records.is_empty() && probe.all_finite() && probe.violations() == 0);
            verdict_line(
                "decomp",
                verdict,
                &format!(
                    "N1 = {}, R = {}, {} records, {} triangle-inequality violations",
                    report::fmt_float(probe.max_n1()),
                    report::fmt_float(probe.max_r()),
                    probe.records.len(),
                    probe.violations()
                ),
            );
            Ok(verdict)
        }
        Probe::Maximal {
            level,
            weight,
            trials,
            seed,
        } => {
            let dom = PolygonDomain::unit_square();
            let (w, sigma) = parse_weight(&weight, &dom)?;
            let hash = hash_of(&json!({
                "command": "probe maximal", "level": level, "weight": weight, "trials": trials, "seed": seed,
            }));
            if trials == 0 {
                bail!("--trials must be positive");
            }
            let root = RootCube::unit();
            let ball = Ball::new([0.5, 0.5], 0.5);
            let per_trial: Vec<(f64, f64, f64)> = (0..trials as u64)
                .map(|k| -> Result<(f64, f64, f64)> {
                    let f = GridFunction::random(root, level, seed.wrapping_add(k));
                    let t = dyadic::truncation_ratio(&f, &ball, 4.0 * f.h(), 2.0)?;
                    let b = dyadic::verify_weighted_maximal_bounds(&f, &w, &ball, 2.0, None)?;
                    Ok((t, b.strong_ratio, b.weak_ratio))
                })
                .collect::<Result<_>>()?;
            let sup = |pick: fn(&(f64, f64, f64)) -> f64, name: &str| {
                let (k, v) = per_trial
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, r)| if pick(r) > b.1 { (i, pick(r)) } else { b });
                ConstantEstimate {
                    inequality: name.into(),
                    constant: v,
                    trials,
                    worst_trial: format!("grid#{k}"),
                    config_hash: hash.clone(),
                }
            };
            let ests = [
                sup(|r| r.0, "maximal_truncation"),
                sup(|r| r.1, "maximal_strong"),
                sup(|r| r.2, "maximal_weak"),
            ];
            let rows: Vec<CsvRow> = ests.iter().map(|e| CsvRow::new(e, dom.name(), "").sigma(sigma)).collect();
            let csv = write_rows(ctx, "probe-maximal", &hash, &rows)?;
            println!("csv {}", csv.display());
            let verdict = Verdict::of(ests[0].constant <= 4.0 && ests[1].constant.is_finite() && ests[2].constant.is_finite());
            verdict_line(
                "maximal",
                verdict,
                &format!(
                    "M^eps/M^(2eps) <= {} (limit 4), strong {}, weak {}",
                    report::fmt_float(ests[0].constant),
                    report::fmt_float(ests[1].constant),
                    report::fmt_float(ests[2].constant)
                ),
            );
            Ok(verdict)
        }
    }
}

fn cmd_weights(ctx: &Ctx, domain: &str, weight: &str, p: f64, balls: usize, seed: u64) -> Result<Verdict> {
    let dom = load_domain(domain)?;
    let (w, sigma) = parse_weight(weight, &dom)?;
    let hash = hash_of(&json!({
        "command": "weights", "domain": domain, "weight": weight, "p": p, "balls": balls, "seed": seed,
    }));
    let sampling = Sampling {
        n_balls: balls,
        seed,
        ..Sampling::default()
    };
    let region = dom.bbox();
    let ap = weights::estimate_ap_constant(&w, p, &region, &sampling)?;
    let rh = weights::probe_reverse_holder(&w, &region, &sampling, weights::REVERSE_HOLDER_CAP)?;
    let ball_id = |b: &Ball| format!("ball({:.4},{:.4};{:.4})", b.center[0], b.center[1], b.radius);
    let ap_est = ConstantEstimate {
        inequality: format!("a{p}"),
        constant: ap.constant,
        trials: ap.n_balls,
        worst_trial: ball_id(&ap.worst_ball),
        config_hash: hash.clone(),
    };
    let rh_est = ConstantEstimate {
        inequality: format!("weight_rh_s{}", rh.exponent),
        constant: rh.constant,
        trials: balls,
        worst_trial: String::new(),
        config_hash: hash.clone(),
    };
    let rows = [
        CsvRow::new(&ap_est, dom.name(), "").sigma(sigma),
        CsvRow::new(&rh_est, dom.name(), "").sigma(sigma),
    ];
    let csv = write_rows(ctx, "weights", &hash, &rows)?;
    println!("csv {}", csv.display());
    println!("A_{p} constant {} (worst {})", report::fmt_float(ap.constant), ap_est.worst_trial);
    for (s, c) in &rh.ladder {
        println!("  reverse Hölder s = {s:.1}: {}", report::fmt_float(*c));
    }
    let verdict = Verdict::of(ap.constant.is_finite() && rh.exponent > 0.0);
    verdict_line(
        "weights",
        verdict,
        &format!("reverse Hölder exponent {} with constant {}", rh.exponent, report::fmt_float(rh.constant)),
    );
    Ok(verdict)
}
