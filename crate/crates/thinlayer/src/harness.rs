//! Experiment orchestration: ε sweeps against one macro solve, manufactured-solution order
//! studies, and report persistence.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::discretization::quadrature::{bary_point, TRI_MIDPOINT};
use crate::discretization::{PointLocator, Region};
use crate::error::{Error, Result};
use crate::geometry::{build_reference_geometry, tile_layer, ChannelSpec, ReferenceGeometry, Scale, WidthProfile};
use crate::macro_solver::{flux_jump_residual, solve_macro, MacroProblem};
use crate::micro::{fmt_f64, solve_micro, verify_trace_inequality, MicroProblem, MicroState, TraceSample};
use crate::problem::{InitialData, ProblemData, Reaction, SourceKey, SpeciesData};
use crate::transform::{check_assumptions, limit_transform, AuditCeilings, Mat2, PinchParams, TransformSpec, Vec2};
use crate::unfolding::two_scale_error;

#[derive(Clone, Debug, PartialEq)]
pub enum TransformChoice {
    Static,
    Pinch(PinchParams),
}

/// Constant coefficients and registry selections of one species.
#[derive(Clone, Debug)]
pub struct SpeciesConfig {
    pub d_plus: f64,
    pub d_minus: f64,
    pub d_layer: f64,
    pub q_plus: [f64; 2],
    pub q_minus: [f64; 2],
    pub q_layer: [f64; 2],
    pub f: Reaction,
    pub g: Reaction,
    pub h: Reaction,
    pub initial: InitialData,
    pub source: Option<SourceKey>,
}

impl Default for SpeciesConfig {
    fn default() -> Self {
        SpeciesConfig {
            d_plus: 1.0,
            d_minus: 1.0,
            d_layer: 1.0,
            q_plus: [0.0; 2],
            q_minus: [0.0; 2],
            q_layer: [0.0; 2],
            f: Reaction::Zero,
            g: Reaction::Zero,
            h: Reaction::Zero,
            initial: InitialData::GaussianBump { x1: 0.3, x2: 0.2, sigma: 0.3 },
            source: None,
        }
    }
}

impl SpeciesConfig {
    pub fn species_data(&self) -> SpeciesData {
        let v = |q: [f64; 2]| Vec2::new(q[0], q[1]);
        let mut s = SpeciesData::uniform(Mat2::identity() * self.d_plus, v(self.q_plus), self.initial.clone())
            .with_layer_constant(Mat2::identity() * self.d_layer, v(self.q_layer))
            .with_reactions(self.f.clone(), self.g.clone(), self.h.clone());
        s.d_minus = Mat2::identity() * self.d_minus;
        s.q_minus = v(self.q_minus);
        s.source = self.source;
        s
    }

    fn advection_free(&self) -> bool {
        self.q_plus == [0.0; 2] && self.q_minus == [0.0; 2] && self.q_layer == [0.0; 2]
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub width: WidthProfile,
    pub center: f64,
    pub half_height: f64,
    pub transform: TransformChoice,
    pub det_floor: f64,
    pub species: Vec<SpeciesConfig>,
    /// Strictly decreasing, each `1/ε` an integer.
    pub eps: Vec<f64>,
    pub resolution: usize,
    pub dt: f64,
    pub t_end: f64,
    /// Mesh resolutions and time steps of the manufactured-solution study.
    pub mms_resolutions: Vec<usize>,
    pub mms_dts: Vec<f64>,
    pub mms_t_end: f64,
    pub audit_density: usize,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub plot: bool,
    /// Record wall-clock seconds; when off the `seconds` column is 0 and output is bitwise reproducible.
    pub timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            width: WidthProfile::Constant(0.5),
            center: 0.5,
            half_height: 1.0,
            transform: TransformChoice::Pinch(PinchParams::default()),
            det_floor: 0.1,
            species: vec![SpeciesConfig::default()],
            eps: vec![0.25, 0.125],
            resolution: 4,
            dt: 1e-2,
            t_end: 0.5,
            mms_resolutions: vec![4, 8, 16],
            mms_dts: vec![1.0 / 25.0, 1.0 / 50.0, 1.0 / 100.0],
            mms_t_end: 1.0,
            audit_density: 16,
            output_dir: None,
            seed: 7,
            plot: false,
            timings: true,
        }
    }
}

fn config_error(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), reason: reason.into() }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps.is_empty() {
            return Err(config_error("eps", "at least one ε is required"));
        }
        for &e in &self.eps {
            Scale::from_eps(e).map_err(|_| {
                if e > 0.0 && e <= 1.0 {
                    config_error("eps", "1/ε must be an integer")
                } else {
                    config_error("eps", "ε must lie in (0, 1]")
                }
            })?;
            if e >= self.half_height {
                return Err(config_error("eps", "ε must be smaller than the half height H"));
            }
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(config_error("eps", "ε list must be strictly decreasing"));
        }
        if !(self.t_end > 0.0) {
            return Err(config_error("T", "T must be positive"));
        }
        if !(self.dt > 0.0 && self.dt <= self.t_end) {
            return Err(config_error("dt", "need 0 < Δt ≤ T"));
        }
        crate::micro::step_count(self.dt, self.t_end).map_err(|e| config_error("dt", e.to_string()))?;
        if self.resolution < 2 {
            return Err(config_error("resolution", "resolution must be at least 2"));
        }
        if self.species.is_empty() {
            return Err(config_error("species", "at least one species is required"));
        }
        for (i, s) in self.species.iter().enumerate() {
            for (key, d) in [("d_plus", s.d_plus), ("d_minus", s.d_minus), ("d_layer", s.d_layer)] {
                if !(d > 0.0 && d.is_finite()) {
                    return Err(config_error(key, format!("species {i}: diffusion must be positive")));
                }
            }
        }
        if !(self.det_floor > 0.0) {
            return Err(config_error("det_floor", "must be positive"));
        }
        self.geometry()?;
        self.transform_spec()?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<ReferenceGeometry> {
        let channel = ChannelSpec { width: self.width.clone(), center: self.center, boundary_margin: 0.01 };
        build_reference_geometry(channel, self.half_height).map_err(|e| config_error("geometry", e.to_string()))
    }

    /// Transform on the horizon `[0, T]`.
    pub fn transform_spec(&self) -> Result<TransformSpec> {
        self.transform_spec_on(self.t_end)
    }

    fn transform_spec_on(&self, horizon: f64) -> Result<TransformSpec> {
        let mut spec = match &self.transform {
            TransformChoice::Static => TransformSpec::identity(horizon),
            TransformChoice::Pinch(p) => {
                TransformSpec::pinch(*p, horizon).map_err(|e| config_error("transform", e.to_string()))?
            }
        };
        spec.det_floor = self.det_floor;
        Ok(spec)
    }

    pub fn problem_data(&self) -> ProblemData {
        ProblemData::new(self.species.iter().map(SpeciesConfig::species_data).collect())
    }

    fn has_source(&self) -> bool {
        self.species.iter().any(|s| s.source.is_some())
    }
}

/// Per-ε metrics. Errors are `L²(0,T)` trapezoid averages, combined over species in `ℓ²`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub err_bulk_plus: f64,
    pub err_bulk_minus: f64,
    pub err_layer_2s: f64,
    pub mass_drift: f64,
    pub norm_l_sup: f64,
    pub norm_h_l2: f64,
    pub trace_c: f64,
    pub seconds: f64,
}

/// Final-time errors, reported alongside the time-averaged ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinalRow {
    pub eps: f64,
    pub err_bulk_plus: f64,
    pub err_bulk_minus: f64,
    pub err_layer_2s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRow {
    pub metric: String,
    pub eps_coarse: f64,
    pub eps_fine: f64,
    /// `e_fine / e_coarse`; `None` when either error vanishes.
    pub ratio: Option<f64>,
    /// `log(e_coarse/e_fine) / log(ε_coarse/ε_fine)`.
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FluxRow {
    pub t: f64,
    pub node: usize,
    pub species: usize,
    pub flux_plus: f64,
    pub flux_minus: f64,
    pub jump: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditSummary {
    pub eps: f64,
    pub displacement: f64,
    pub velocity: f64,
    pub jacobian_norm: f64,
    pub j_min: f64,
    pub j_max: f64,
    pub shift_1: f64,
    pub shift_2: f64,
    pub dt_j_pointwise: f64,
    /// Audit flags joined by `"; "`, empty when clean.
    pub flags: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ConvergenceRow>,
    pub finals: Vec<FinalRow>,
    pub rates: Vec<RateRow>,
    pub flux: Vec<FluxRow>,
    pub audit: Vec<AuditSummary>,
    pub macro_seconds: f64,
}

impl ExperimentReport {
    pub fn max_flux_residual(&self) -> f64 {
        self.flux.iter().map(|r| r.residual).fold(0.0, f64::max)
    }

    pub fn audit_flagged(&self) -> bool {
        self.audit.iter().any(|a| !a.flags.is_empty())
    }
}

pub const RATE_METRICS: [&str; 3] = ["err_bulk_plus", "err_bulk_minus", "err_layer_2s"];

fn metric(row: &ConvergenceRow, name: &str) -> f64 {
    match name {
        "err_bulk_plus" => row.err_bulk_plus,
        "err_bulk_minus" => row.err_bulk_minus,
        _ => row.err_layer_2s,
    }
}

/// Rates between consecutive rows.
pub fn compute_rates(rows: &[ConvergenceRow]) -> Vec<RateRow> {
    let mut out = Vec::new();
    for name in RATE_METRICS {
        for w in rows.windows(2) {
            let (ec, ef) = (metric(&w[0], name), metric(&w[1], name));
            let ok = ec > 0.0 && ef > 0.0 && ec.is_finite() && ef.is_finite();
            out.push(RateRow {
                metric: name.to_string(),
                eps_coarse: w[0].eps,
                eps_fine: w[1].eps,
                ratio: ok.then(|| ef / ec),
                rate: ok.then(|| (ec / ef).ln() / (w[0].eps / w[1].eps).ln()),
            });
        }
    }
    out
}

fn audit_summaries(spec: &TransformSpec, eps: &[f64], density: usize) -> Vec<AuditSummary> {
    let scales: Vec<Scale> = eps.iter().filter_map(|&e| Scale::from_eps(e).ok()).collect();
    check_assumptions(spec, &scales, density, &AuditCeilings::default())
        .rows
        .into_iter()
        .map(|r| AuditSummary {
            eps: r.eps,
            displacement: r.displacement,
            velocity: r.velocity,
            jacobian_norm: r.jacobian_norm,
            j_min: r.j_min,
            j_max: r.j_max,
            shift_1: r.shift[0],
            shift_2: r.shift[1],
            dt_j_pointwise: r.dt_j_pointwise,
            flags: r.flags.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "),
        })
        .collect()
}

fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dt * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1])),
    }
}

fn relative_drift(masses: &[f64]) -> f64 {
    let Some(&m0) = masses.first() else { return 0.0 };
    let scale = if m0 != 0.0 { m0.abs() } else { 1.0 };
    masses.iter().map(|m| (m - m0).abs() / scale).fold(0.0, f64::max)
}

struct EpsOutcome {
    row: ConvergenceRow,
    fin: FinalRow,
}

fn run_eps(
    config: &ExperimentConfig,
    geom: &ReferenceGeometry,
    spec: &TransformSpec,
    data: &ProblemData,
    macro_problem: &MacroProblem,
    macro_states: &[crate::macro_solver::MacroState],
    eps: f64,
) -> Result<EpsOutcome> {
    let start = Instant::now();
    let tiling = tile_layer(geom, eps)?;
    let problem = MicroProblem::new(geom, &tiling, config.resolution, spec.clone(), data.clone())?;
    let traj = solve_micro(&problem, config.dt, config.t_end, 1)?;
    let n_species = data.n_species();
    let mut sq = [Vec::new(), Vec::new(), Vec::new()];
    let mut last = [0.0; 3];
    for (a, b) in traj.states.iter().zip(macro_states) {
        let errs = two_scale_error(&problem, a, macro_problem, b)?;
        let e = [
            errs.iter().map(|e| e.bulk_plus.powi(2)).sum::<f64>(),
            errs.iter().map(|e| e.bulk_minus.powi(2)).sum::<f64>(),
            errs.iter().map(|e| e.layer.powi(2)).sum::<f64>(),
        ];
        for i in 0..3 {
            sq[i].push(e[i]);
            last[i] = e[i].sqrt();
        }
    }
    let avg: Vec<f64> = sq.iter().map(|v| trapezoid(v, config.dt).sqrt()).collect();
    let mut drift = 0.0f64;
    let mut norm_l_sup = 0.0f64;
    let mut h2 = 0.0;
    for j in 0..n_species {
        let rows: Vec<_> = traj.diagnostics.iter().filter(|d| d.species == j).collect();
        drift = drift.max(relative_drift(&rows.iter().map(|d| d.mass).collect::<Vec<_>>()));
        norm_l_sup = norm_l_sup.max(rows.iter().map(|d| d.norm_l).fold(0.0, f64::max));
        h2 += trapezoid(&rows.iter().map(|d| d.norm_h.powi(2)).collect::<Vec<_>>(), config.dt);
    }
    let trace = verify_trace_inequality(
        &problem.micro,
        &[1.0],
        &[TraceSample::Constants, TraceSample::CellLinears, TraceSample::Random { count: 20, seed: config.seed }],
    )?;
    let seconds = if config.timings { start.elapsed().as_secs_f64() } else { 0.0 };
    Ok(EpsOutcome {
        row: ConvergenceRow {
            eps,
            err_bulk_plus: avg[0],
            err_bulk_minus: avg[1],
            err_layer_2s: avg[2],
            mass_drift: drift,
            norm_l_sup,
            norm_h_l2: h2.sqrt(),
            trace_c: trace[0].constant,
            seconds,
        },
        fin: FinalRow { eps, err_bulk_plus: last[0], err_bulk_minus: last[1], err_layer_2s: last[2] },
    })
}

/// One macro solve and one micro solve per ε (concurrently); partial results are written
/// to the output directory when a run fails.
pub fn run_convergence_study(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let geom = config.geometry()?;
    let spec = config.transform_spec()?;
    let data = config.problem_data();
    let mut report = ExperimentReport { audit: audit_summaries(&spec, &config.eps, config.audit_density), ..Default::default() };

    let start = Instant::now();
    let limit = limit_transform(&spec)?;
    let macro_problem = MacroProblem::new(&geom, limit, data.clone(), config.resolution)?;
    let macro_traj = solve_macro(&macro_problem, config.dt, config.t_end, 1)?;
    let final_state = macro_traj.last();
    for j in 0..data.n_species() {
        for r in flux_jump_residual(&macro_problem, final_state, j)? {
            report.flux.push(FluxRow {
                t: final_state.t,
                node: r.node,
                species: j,
                flux_plus: r.flux_plus,
                flux_minus: r.flux_minus,
                jump: r.jump(),
                residual: r.residual(),
            });
        }
    }
    report.macro_seconds = if config.timings { start.elapsed().as_secs_f64() } else { 0.0 };

    let outcomes: Vec<Result<EpsOutcome>> = config
        .eps
        .par_iter()
        .map(|&e| run_eps(config, &geom, &spec, &data, &macro_problem, &macro_traj.states, e))
        .collect();
    let mut failure = None;
    for o in outcomes {
        match o {
            Ok(o) => {
                report.rows.push(o.row);
                report.finals.push(o.fin);
            }
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    report.rates = compute_rates(&report.rows);
    if let Some(dir) = &config.output_dir {
        write_report(&report, dir, config.plot)?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Observed orders of the manufactured-solution study.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MmsReport {
    pub eps: f64,
    /// `(r, ‖u_r − exact‖)` in the bulk at the final time.
    pub spatial_errors: Vec<(usize, f64)>,
    /// `‖u_r − u_{2r}‖` for consecutive resolutions.
    pub spatial_differences: Vec<f64>,
    pub spatial_order: f64,
    pub temporal_errors: Vec<(f64, f64)>,
    pub temporal_differences: Vec<f64>,
    pub temporal_order: f64,
}

fn bulk_l2_error(problem: &MicroProblem, state: &MicroState, exact: &dyn Fn([f64; 2], Region) -> f64) -> f64 {
    let mesh = problem.mesh();
    let u = &state.u[0];
    let mut sq = 0.0;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if mesh.regions[t] == Region::Channel {
            continue;
        }
        let p = mesh.corners(t);
        for (l, w) in TRI_MIDPOINT {
            let uh: f64 = (0..3).map(|a| l[a] * u[tri[a]]).sum();
            sq += w * mesh.area(t) * (uh - exact(bary_point(p, l), mesh.regions[t])).powi(2);
        }
    }
    sq.sqrt()
}

/// Bulk `L²` norm of `coarse − fine`, integrated on the finer mesh.
fn bulk_difference(coarse: (&MicroProblem, &MicroState), fine: (&MicroProblem, &MicroState)) -> Result<f64> {
    let cm = coarse.0.mesh();
    let loc = PointLocator::new(cm);
    let cu = &coarse.1.u[0];
    let lookup = |x: [f64; 2], _: Region| loc.eval(cm, cu, x, 1e-9).unwrap_or(f64::NAN);
    let d = bulk_l2_error(fine.0, fine.1, &lookup);
    if !d.is_finite() {
        return Err(Error::MeshMismatch("fine mesh leaves the coarse mesh".into()));
    }
    Ok(d)
}

fn order(diffs: &[f64]) -> f64 {
    match diffs {
        [.., a, b] if *a > 0.0 && *b > 0.0 => (a / b).log2(),
        _ => f64::NAN,
    }
}

/// Spatial and temporal orders for the cosine manufactured solution on the static problem
/// at the first configured ε. Uses the static transform and requires `q = 0`.
pub fn run_mms_study(config: &ExperimentConfig) -> Result<MmsReport> {
    config.validate()?;
    if !config.has_source() {
        return Err(config_error("source", "the manufactured-solution study needs a manufactured source (source = \"cosine\")"));
    }
    if config.species.iter().any(|s| !s.advection_free()) {
        return Err(config_error("q", "the manufactured solution requires zero advection"));
    }
    if config.mms_resolutions.len() < 3 || config.mms_dts.len() < 3 {
        return Err(config_error("mms", "need three resolutions and three time steps"));
    }
    let mut cfg = config.clone();
    cfg.species.truncate(1);
    cfg.species[0].source = Some(SourceKey::Cosine);
    let geom = cfg.geometry()?;
    let spec = cfg.transform_spec_on(cfg.mms_t_end)?;
    let spec = if spec.is_static() { spec } else { TransformSpec::identity(cfg.mms_t_end) };
    let data = cfg.problem_data();
    let eps = cfg.eps[0];
    let tiling = tile_layer(&geom, eps)?;
    let mms = data.species[0].manufactured(eps, geom.half_height).expect("source set above");
    let t_end = cfg.mms_t_end;
    let exact = |x: [f64; 2], r: Region| mms.exact(t_end, x, r);

    let run = |r: usize, dt: f64| -> Result<(MicroProblem, MicroState)> {
        let p = MicroProblem::new(&geom, &tiling, r, spec.clone(), data.clone())?;
        let traj = solve_micro(&p, dt, t_end, usize::MAX)?;
        let s = traj.last().clone();
        Ok((p, s))
    };

    let spatial_dt = cfg.mms_dts[0];
    let spatial: Vec<(MicroProblem, MicroState)> =
        cfg.mms_resolutions.par_iter().map(|&r| run(r, spatial_dt)).collect::<Result<_>>()?;
    let r0 = cfg.resolution;
    let temporal: Vec<(MicroProblem, MicroState)> = cfg.mms_dts.par_iter().map(|&dt| run(r0, dt)).collect::<Result<_>>()?;

    let spatial_errors =
        spatial.iter().zip(&cfg.mms_resolutions).map(|((p, s), &r)| (r, bulk_l2_error(p, s, &exact))).collect();
    let spatial_differences = spatial
        .windows(2)
        .map(|w| bulk_difference((&w[0].0, &w[0].1), (&w[1].0, &w[1].1)))
        .collect::<Result<Vec<_>>>()?;
    let temporal_errors = temporal.iter().zip(&cfg.mms_dts).map(|((p, s), &dt)| (dt, bulk_l2_error(p, s, &exact))).collect();
    let temporal_differences: Vec<f64> = temporal
        .windows(2)
        .map(|w| {
            let diff: Vec<f64> = w[1].1.u[0].iter().zip(&w[0].1.u[0]).map(|(a, b)| a - b).collect();
            let state = MicroState { u: vec![diff], ..w[1].1.clone() };
            bulk_l2_error(&w[1].0, &state, &|_, _| 0.0)
        })
        .collect();
    Ok(MmsReport {
        eps,
        spatial_order: order(&spatial_differences),
        temporal_order: order(&temporal_differences),
        spatial_errors,
        spatial_differences,
        temporal_errors,
        temporal_differences,
    })
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_writer(File::create(dir.join(name))?))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const CONVERGENCE_HEADER: [&str; 9] =
    ["eps", "err_bulk_plus", "err_bulk_minus", "err_layer_2s", "mass_drift", "norm_L_sup", "norm_H_l2", "trace_C", "seconds"];
pub const FINAL_HEADER: [&str; 4] = ["eps", "err_bulk_plus", "err_bulk_minus", "err_layer_2s"];
pub const RATES_HEADER: [&str; 6] = ["metric", "eps_coarse", "eps_fine", "ratio", "rate", "status"];
pub const FLUX_HEADER: [&str; 7] = ["t", "node", "species", "flux_plus", "flux_minus", "jump", "residual"];
pub const AUDIT_HEADER: [&str; 10] =
    ["eps", "displacement", "velocity", "jacobian_norm", "j_min", "j_max", "shift_1", "shift_2", "dt_j_pointwise", "flags"];

/// Writes `convergence.csv`, `final.csv`, `rates.csv`, `fluxjump.csv`, `audit.csv`, and
/// `convergence.svg` when `plot` is set.
pub fn write_report(report: &ExperimentReport, dir: &Path, plot: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv_writer(dir, "convergence.csv")?;
    w.write_record(CONVERGENCE_HEADER)?;
    for r in &report.rows {
        w.write_record(
            [r.eps, r.err_bulk_plus, r.err_bulk_minus, r.err_layer_2s, r.mass_drift, r.norm_l_sup, r.norm_h_l2, r.trace_c, r.seconds]
                .map(fmt_f64),
        )?;
    }
    w.flush()?;

    let mut w = csv_writer(dir, "final.csv")?;
    w.write_record(FINAL_HEADER)?;
    for r in &report.finals {
        w.write_record([r.eps, r.err_bulk_plus, r.err_bulk_minus, r.err_layer_2s].map(fmt_f64))?;
    }
    w.flush()?;

    let mut w = csv_writer(dir, "rates.csv")?;
    w.write_record(RATES_HEADER)?;
    for r in &report.rates {
        let status = if r.ratio.is_some() { "ok" } else { "undefined" };
        w.write_record([r.metric.clone(), fmt_f64(r.eps_coarse), fmt_f64(r.eps_fine), opt(r.ratio), opt(r.rate), status.into()])?;
    }
    w.flush()?;

    let mut w = csv_writer(dir, "fluxjump.csv")?;
    w.write_record(FLUX_HEADER)?;
    for r in &report.flux {
        w.write_record([
            fmt_f64(r.t),
            r.node.to_string(),
            r.species.to_string(),
            fmt_f64(r.flux_plus),
            fmt_f64(r.flux_minus),
            fmt_f64(r.jump),
            fmt_f64(r.residual),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(dir, "audit.csv")?;
    w.write_record(AUDIT_HEADER)?;
    for a in &report.audit {
        let mut rec: Vec<String> =
            [a.eps, a.displacement, a.velocity, a.jacobian_norm, a.j_min, a.j_max, a.shift_1, a.shift_2, a.dt_j_pointwise]
                .map(fmt_f64)
                .to_vec();
        rec.push(a.flags.clone());
        w.write_record(rec)?;
    }
    w.flush()?;

    if plot {
        File::create(dir.join("convergence.svg"))?.write_all(convergence_svg(&report.rows).as_bytes())?;
    }
    Ok(())
}

fn parse_f64(s: &str, file: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Io(format!("{file}: `{s}` is not a number")))
}

fn read_rows(dir: &Path, file: &str, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(dir.join(file))?;
    if r.headers()?.iter().ne(header.iter().copied()) {
        return Err(Error::Io(format!("{file}: unexpected header")));
    }
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

fn numbers(rec: &csv::StringRecord, file: &str, n: usize) -> Result<Vec<f64>> {
    rec.iter().take(n).map(|s| parse_f64(s, file)).collect()
}

/// Reads back a report written by [`write_report`]. The macro timing is not persisted.
pub fn read_report(dir: &Path) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    for rec in read_rows(dir, "convergence.csv", &CONVERGENCE_HEADER)? {
        let v = numbers(&rec, "convergence.csv", 9)?;
        report.rows.push(ConvergenceRow {
            eps: v[0],
            err_bulk_plus: v[1],
            err_bulk_minus: v[2],
            err_layer_2s: v[3],
            mass_drift: v[4],
            norm_l_sup: v[5],
            norm_h_l2: v[6],
            trace_c: v[7],
            seconds: v[8],
        });
    }
    for rec in read_rows(dir, "final.csv", &FINAL_HEADER)? {
        let v = numbers(&rec, "final.csv", 4)?;
        report.finals.push(FinalRow { eps: v[0], err_bulk_plus: v[1], err_bulk_minus: v[2], err_layer_2s: v[3] });
    }
    for rec in read_rows(dir, "rates.csv", &RATES_HEADER)? {
        let o = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { parse_f64(s, "rates.csv").map(Some) } };
        report.rates.push(RateRow {
            metric: rec[0].to_string(),
            eps_coarse: parse_f64(&rec[1], "rates.csv")?,
            eps_fine: parse_f64(&rec[2], "rates.csv")?,
            ratio: o(&rec[3])?,
            rate: o(&rec[4])?,
        });
    }
    for rec in read_rows(dir, "fluxjump.csv", &FLUX_HEADER)? {
        let idx = |s: &str| s.parse::<usize>().map_err(|_| Error::Io(format!("fluxjump.csv: `{s}` is not an index")));
        report.flux.push(FluxRow {
            t: parse_f64(&rec[0], "fluxjump.csv")?,
            node: idx(&rec[1])?,
            species: idx(&rec[2])?,
            flux_plus: parse_f64(&rec[3], "fluxjump.csv")?,
            flux_minus: parse_f64(&rec[4], "fluxjump.csv")?,
            jump: parse_f64(&rec[5], "fluxjump.csv")?,
            residual: parse_f64(&rec[6], "fluxjump.csv")?,
        });
    }
    for rec in read_rows(dir, "audit.csv", &AUDIT_HEADER)? {
        let v = numbers(&rec, "audit.csv", 9)?;
        report.audit.push(AuditSummary {
            eps: v[0],
            displacement: v[1],
            velocity: v[2],
            jacobian_norm: v[3],
            j_min: v[4],
            j_max: v[5],
            shift_1: v[6],
            shift_2: v[7],
            dt_j_pointwise: v[8],
            flags: rec[9].to_string(),
        });
    }
    Ok(report)
}

/// Writes `kind, value, error, difference` rows and the two orders.
pub fn write_mms_report(report: &MmsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv_writer(dir, "mms.csv")?;
    w.write_record(["kind", "value", "error", "difference", "order"])?;
    for (i, (r, e)) in report.spatial_errors.iter().enumerate() {
        let d = if i > 0 { fmt_f64(report.spatial_differences[i - 1]) } else { String::new() };
        let o = if i + 1 == report.spatial_errors.len() { fmt_f64(report.spatial_order) } else { String::new() };
        w.write_record(["space".to_string(), r.to_string(), fmt_f64(*e), d, o])?;
    }
    for (i, (dt, e)) in report.temporal_errors.iter().enumerate() {
        let d = if i > 0 { fmt_f64(report.temporal_differences[i - 1]) } else { String::new() };
        let o = if i + 1 == report.temporal_errors.len() { fmt_f64(report.temporal_order) } else { String::new() };
        w.write_record(["time".to_string(), fmt_f64(*dt), fmt_f64(*e), d, o])?;
    }
    w.flush()?;
    Ok(())
}

/// Log–log plot of the three error metrics against ε.
pub fn convergence_svg(rows: &[ConvergenceRow]) -> String {
    let (w, h, m) = (480.0, 360.0, 50.0);
    let pts: Vec<(f64, [f64; 3])> = rows
        .iter()
        .filter(|r| r.eps > 0.0)
        .map(|r| (r.eps.log10(), [r.err_bulk_plus, r.err_bulk_minus, r.err_layer_2s].map(|e| e.max(1e-300).log10())))
        .collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    svg += &format!("<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", h - m, w - m, h - m);
    svg += &format!("<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n", h - m);
    svg += &format!("<text x=\"{}\" y=\"{}\" font-size=\"12\">log10 eps</text>\n", w / 2.0 - 30.0, h - 15.0);
    svg += &format!("<text x=\"10\" y=\"{}\" font-size=\"12\">log10 error</text>\n", m - 20.0);
    if pts.is_empty() {
        return svg + "</svg>\n";
    }
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts.iter().flat_map(|p| p.1).fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| (a.0.min(v), a.1.max(v)));
    let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * m);
    for (k, (name, color)) in RATE_METRICS.iter().zip(["#1f77b4", "#d62728", "#2ca02c"]).enumerate() {
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1[k]))).collect();
        svg += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", line.join(" "));
        svg += &format!("<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n", w - m - 110.0, m + 15.0 * k as f64);
    }
    svg + "</svg>\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.eps, vec![0.25, 0.125]);
        assert_eq!((c.resolution, c.dt, c.t_end), (4, 0.01, 0.5));
    }

    #[test]
    fn non_integer_inverse_eps_is_rejected() {
        let c = ExperimentConfig { eps: vec![0.3], ..Default::default() };
        match c.validate() {
            Err(Error::Config { key, reason }) => {
                assert_eq!(key, "eps");
                assert_eq!(reason, "1/ε must be an integer");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eps_must_decrease() {
        let c = ExperimentConfig { eps: vec![0.125, 0.25], ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "eps"));
    }

    #[test]
    fn rates_of_halving_errors() {
        let rows: Vec<ConvergenceRow> = [0.25, 0.125, 0.0625]
            .iter()
            .map(|&e| ConvergenceRow { eps: e, err_bulk_plus: e, err_bulk_minus: e * e, err_layer_2s: 0.0, ..Default::default() })
            .collect();
        let rates = compute_rates(&rows);
        assert_eq!(rates.len(), 6);
        assert!((rates[0].rate.unwrap() - 1.0).abs() < 1e-14);
        assert!((rates[2].rate.unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(rates[4].ratio, None);
    }

    #[test]
    fn mms_without_source_is_a_config_error() {
        let c = ExperimentConfig::default();
        assert!(matches!(run_mms_study(&c), Err(Error::Config { key, .. }) if key == "source"));
    }
}
