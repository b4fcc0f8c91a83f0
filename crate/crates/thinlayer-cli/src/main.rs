use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thinlayer::discretization::{mesh_bulk, mesh_micro};
use thinlayer::geometry::{tile_layer, Scale};
use thinlayer::harness::{read_report, run_convergence_study, run_mms_study, write_mms_report, ExperimentConfig};
use thinlayer::macro_solver::{flux_jump_residual, macro_mass, push_forward, solve_macro, write_evolved_cells, write_flux_csv, MacroProblem};
use thinlayer::micro::{solve_micro, MicroProblem};
use thinlayer::transform::{check_assumptions, limit_transform, AuditCeilings};
use thinlayer::unfolding::unfold_check;

mod config;

use config::{keys_help, parse_config, CliConfig, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "thinlayer", version, about = "Thin-layer reaction–diffusion–advection workbench")]
#[command(after_long_help = keys_help(), after_help = "Run with --help to list every configuration key.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build and export the micro meshes of every ε and the macro meshes.
    Mesh(Common),
    /// Audit the transform assumptions over the ε list.
    CheckTransform(Common),
    /// Solve the micro problem for every ε.
    RunMicro(Common),
    /// Solve the limit problem and report flux residuals.
    RunMacro(Common),
    /// ε sweep against the limit problem.
    Converge(Common),
    /// Manufactured-solution order study.
    Mms(Common),
    /// Check the unfolding identities on random fields.
    UnfoldCheck(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Write SVG plots.
    #[arg(long)]
    plot: bool,
    /// Overrides of the form section.key=value.
    overrides: Vec<String>,
}

enum Failure {
    Config(ConfigError),
    Numerical(thinlayer::Error),
}

impl From<thinlayer::Error> for Failure {
    fn from(e: thinlayer::Error) -> Self {
        match e {
            thinlayer::Error::Config { key, reason } => Failure::Config(ConfigError { key, reason }),
            other => Failure::Numerical(other),
        }
    }
}

macro_rules! numerical_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Numerical(e.into())
            }
        }
    )*};
}

numerical_from!(
    std::io::Error,
    thinlayer::geometry::GeometryError,
    thinlayer::discretization::DiscretizationError,
    thinlayer::transform::TransformError
);

type Outcome = Result<(), Failure>;

fn load(common: &Common) -> Result<CliConfig, Failure> {
    if let Some(p) = &common.config {
        if !p.exists() {
            return Err(Failure::Config(ConfigError::new("config", format!("file {} does not exist", p.display()))));
        }
    }
    let mut cfg = parse_config(common.config.as_deref(), &common.overrides).map_err(Failure::Config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
        cfg.experiment.output_dir = Some(out.clone());
    }
    if common.plot {
        cfg.experiment.plot = true;
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn eps_dir(dir: &Path, eps: f64) -> PathBuf {
    dir.join(format!("eps_1_{}", (1.0 / eps).round() as usize))
}

fn cmd_mesh(cfg: &CliConfig) -> Outcome {
    let c = &cfg.experiment;
    let geom = c.geometry()?;
    for &eps in &c.eps {
        let micro = mesh_micro(&geom, &tile_layer(&geom, eps)?, c.resolution)?;
        micro.mesh.export(create(&cfg.output_dir, &format!("micro_eps_1_{}.mesh", (1.0 / eps).round() as usize))?)?;
        println!(
            "eps = {eps}: {} vertices, {} triangles, {} facets",
            micro.mesh.n_dofs(),
            micro.mesh.triangles.len(),
            micro.mesh.facets.len()
        );
    }
    let r = c.resolution;
    for (upper, name) in [(true, "macro_plus.mesh"), (false, "macro_minus.mesh")] {
        let m = mesh_bulk(c.half_height, 16 * r, 8 * r, upper)?;
        m.export(create(&cfg.output_dir, name)?)?;
        println!("{name}: {} vertices, {} triangles", m.n_dofs(), m.triangles.len());
    }
    let cell = thinlayer::discretization::mesh_cell(&geom, r)?;
    cell.export(create(&cfg.output_dir, "cell.mesh")?)?;
    println!("cell.mesh: {} vertices, {} triangles", cell.n_dofs(), cell.triangles.len());
    Ok(())
}

fn cmd_check_transform(cfg: &CliConfig) -> Outcome {
    let c = &cfg.experiment;
    let spec = c.transform_spec()?;
    let scales: Vec<Scale> = c.eps.iter().map(|&e| Scale::from_eps(e)).collect::<Result<_, _>>()?;
    let report = check_assumptions(&spec, &scales, c.audit_density, &AuditCeilings::default());
    println!("transform `{}`", report.spec_name);
    println!("{:>8} {:>12} {:>12} {:>10} {:>10} {:>10}", "eps", "disp/eps", "vel/eps", "|F|", "J_min", "J_max");
    for r in &report.rows {
        println!(
            "{:>8.5} {:>12.5e} {:>12.5e} {:>10.4} {:>10.4} {:>10.4}",
            r.eps, r.displacement, r.velocity, r.jacobian_norm, r.j_min, r.j_max
        );
        for f in &r.flags {
            println!("  FLAG: {f}");
        }
    }
    if !report.flagged() {
        println!("no audit flags");
    }
    Ok(())
}

fn cmd_run_micro(cfg: &CliConfig) -> Outcome {
    let c = &cfg.experiment;
    let geom = c.geometry()?;
    let spec = c.transform_spec()?;
    for &eps in &c.eps {
        let p = MicroProblem::new(&geom, &tile_layer(&geom, eps)?, c.resolution, spec.clone(), c.problem_data())?;
        let traj = solve_micro(&p, c.dt, c.t_end, cfg.every)?;
        traj.write_csv(&eps_dir(&cfg.output_dir, eps))?;
        let first = &traj.diagnostics[0];
        let last = traj.diagnostics.iter().rev().find(|d| d.species == 0).expect("diagnostics recorded");
        let drift = (last.mass - first.mass).abs() / first.mass.abs().max(f64::MIN_POSITIVE);
        println!(
            "eps = {eps}: dofs {}, mass {:.10e} (relative drift {drift:.2e}), ‖u‖_L = {:.6e}, ‖u‖_H = {:.6e} at T = {}",
            p.mesh().n_dofs(),
            last.mass,
            last.norm_l,
            last.norm_h,
            last.t
        );
    }
    Ok(())
}

fn cmd_run_macro(cfg: &CliConfig) -> Outcome {
    let c = &cfg.experiment;
    let geom = c.geometry()?;
    let spec = c.transform_spec()?;
    let p = MacroProblem::new(&geom, limit_transform(&spec)?, c.problem_data(), c.resolution)?;
    let traj = solve_macro(&p, c.dt, c.t_end, cfg.every)?;
    let mut rows = Vec::new();
    let mut evolved = create(&cfg.output_dir, "evolved_cells.txt")?;
    for s in &traj.states {
        for j in 0..c.species.len() {
            for r in flux_jump_residual(&p, s, j)? {
                rows.push((s.t, j, r));
            }
        }
        write_evolved_cells(&push_forward(&p, s)?, s.t, &mut evolved)?;
    }
    write_flux_csv(&rows, create(&cfg.output_dir, "fluxjump.csv")?)?;
    let m0 = macro_mass(&p, &traj.states[0])?;
    let m1 = macro_mass(&p, traj.last())?;
    let last_t = traj.last().t;
    let worst = rows.iter().filter(|r| r.0 == last_t).map(|r| r.2.residual()).fold(0.0, f64::max);
    println!("macro: {} unknowns per species, {} interface nodes", p.n_unknowns(), p.quad.len());
    for (j, (a, b)) in m0.iter().zip(&m1).enumerate() {
        println!("species {j}: mass {b:.10e} (relative drift {:.2e})", (b - a).abs() / a.abs().max(f64::MIN_POSITIVE));
    }
    println!("max flux residual at T = {last_t}: {worst:.3e}");
    Ok(())
}

fn cmd_converge(cfg: &CliConfig) -> Outcome {
    let report = run_convergence_study(&cfg.experiment)?;
    let back = read_report(&cfg.output_dir)?;
    if back.rows != report.rows {
        return Err(Failure::Numerical(thinlayer::Error::Io("report read-back differs".into())));
    }
    println!("{:>8} {:>12} {:>12} {:>12} {:>10} {:>10} {:>10}", "eps", "err_bulk+", "err_bulk-", "err_layer", "drift", "sup‖u‖_L", "trace C");
    for r in &report.rows {
        println!(
            "{:>8.5} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.2e} {:>10.4} {:>10.4}",
            r.eps, r.err_bulk_plus, r.err_bulk_minus, r.err_layer_2s, r.mass_drift, r.norm_l_sup, r.trace_c
        );
    }
    for r in &report.rates {
        match (r.ratio, r.rate) {
            (Some(q), Some(p)) => println!("{} {} -> {}: ratio {q:.3}, rate {p:.3}", r.metric, r.eps_coarse, r.eps_fine),
            _ => println!("{} {} -> {}: rate undefined (zero error)", r.metric, r.eps_coarse, r.eps_fine),
        }
    }
    println!("max macro flux residual: {:.3e}", report.max_flux_residual());
    if report.audit_flagged() {
        for a in report.audit.iter().filter(|a| !a.flags.is_empty()) {
            println!("audit flag at eps = {}: {}", a.eps, a.flags);
        }
    }
    println!("report written to {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_mms(cfg: &CliConfig) -> Outcome {
    let r = run_mms_study(&cfg.experiment)?;
    write_mms_report(&r, &cfg.output_dir)?;
    for (res, e) in &r.spatial_errors {
        println!("r = {res}: bulk L2 error {e:.4e}");
    }
    println!("spatial order {:.3}", r.spatial_order);
    for (dt, e) in &r.temporal_errors {
        println!("dt = {dt}: bulk L2 error {e:.4e}");
    }
    println!("temporal order {:.3}", r.temporal_order);
    Ok(())
}

fn cmd_unfold_check(cfg: &CliConfig) -> Outcome {
    let c: &ExperimentConfig = &cfg.experiment;
    let geom = c.geometry()?;
    let mut ok = true;
    for &eps in &c.eps {
        let micro = mesh_micro(&geom, &tile_layer(&geom, eps)?, c.resolution)?;
        let r = unfold_check(&micro, 100, c.seed)?;
        let pass = r.norm_identity <= 1e-10
            && r.adjointness <= 1e-12
            && r.gradient <= 1e-13
            && r.average_bound <= 1.0 + 1e-10;
        ok &= pass;
        println!(
            "eps = {eps}: norm identity {:.2e}, adjointness {:.2e}, gradient {:.2e}, ‖Uφ‖/(√ε‖φ‖) {:.12} {}",
            r.norm_identity,
            r.adjointness,
            r.gradient,
            r.average_bound,
            if pass { "ok" } else { "FAILED" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Numerical(thinlayer::Error::Io("unfolding identities violated".into())))
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("THINLAYER_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    configure_threads();
    let (common, run): (&Common, fn(&CliConfig) -> Outcome) = match &cli.command {
        Command::Mesh(c) => (c, cmd_mesh),
        Command::CheckTransform(c) => (c, cmd_check_transform),
        Command::RunMicro(c) => (c, cmd_run_micro),
        Command::RunMacro(c) => (c, cmd_run_macro),
        Command::Converge(c) => (c, cmd_converge),
        Command::Mms(c) => (c, cmd_mms),
        Command::UnfoldCheck(c) => (c, cmd_unfold_check),
    };
    match load(common).and_then(|cfg| run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
