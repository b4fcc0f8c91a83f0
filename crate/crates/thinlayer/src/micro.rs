//! Semi-implicit Euler time stepping of the transformed micro problem on the fixed reference mesh.
//!
//! Per species and step:
//!
//! ```text
//! (1/Δt) M[J^{k+1}] u^{k+1} + A^{k+1} u^{k+1} = (1/Δt) M[J^k] u^k + F(u^k) + G(u^k) − H(u^k) + S^{k+1}
//! ```
//!
//! with layer weights `1/ε` on mass and reaction loads, `ε` on diffusion and `1` on advection.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra_sparse::CsrMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::discretization::{
    assemble_boundary_load, assemble_boundary_mass, assemble_load, assemble_operator, assemble_weighted_mass,
    bilinear, combine, eval_at, eval_on_facet, mesh_micro, solve_with_guess, FacetPoint, FacetTag, MicroMesh,
    QuadPoint, Region, RegionScale, SolverOptions,
};
use crate::error::{Error, Result};
use crate::geometry::{ReferenceGeometry, TilingIndex};
use crate::problem::{DataError, ProblemData, SpeciesData};
use crate::transform::{JacobianData, Mat2, TransformError, TransformSpec, Vec2};

/// The micro problem for one scale: mesh, evolution, data and solver settings.
#[derive(Debug)]
pub struct MicroProblem {
    pub geom: ReferenceGeometry,
    pub micro: Arc<MicroMesh>,
    pub spec: TransformSpec,
    pub data: ProblemData,
    pub solver: SolverOptions,
    norm_mats: OnceLock<(CsrMatrix<f64>, CsrMatrix<f64>)>,
    bulk_mats: OnceLock<(CsrMatrix<f64>, Vec<CsrMatrix<f64>>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroState {
    pub t: f64,
    /// One dof vector per species.
    pub u: Vec<Vec<f64>>,
    /// `J_ε` at the three quadrature points of every triangle (1 in the bulks).
    pub jw: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub species: usize,
    pub mass: f64,
    pub norm_l: f64,
    pub norm_h: f64,
}

#[derive(Clone, Debug)]
pub struct MicroTrajectory {
    pub states: Vec<MicroState>,
    pub diagnostics: Vec<DiagnosticsRow>,
}

pub fn default_solver() -> SolverOptions {
    SolverOptions { tol: 1e-12, max_iter: 20_000, restarts: 3 }
}

impl MicroProblem {
    pub fn new(
        geom: &ReferenceGeometry,
        tiling: &TilingIndex,
        resolution: usize,
        spec: TransformSpec,
        data: ProblemData,
    ) -> Result<Self> {
        let micro = mesh_micro(geom, tiling, resolution)?;
        Ok(Self::with_mesh(geom.clone(), Arc::new(micro), spec, data))
    }

    pub fn with_mesh(geom: ReferenceGeometry, micro: Arc<MicroMesh>, spec: TransformSpec, data: ProblemData) -> Self {
        MicroProblem {
            geom,
            micro,
            spec,
            data,
            solver: default_solver(),
            norm_mats: OnceLock::new(),
            bulk_mats: OnceLock::new(),
        }
    }

    pub fn eps(&self) -> f64 {
        self.micro.eps()
    }

    pub fn mesh(&self) -> &crate::discretization::Mesh {
        &self.micro.mesh
    }

    /// Cell index, macro position `εk` and cell coordinates of a channel point in triangle `t`.
    pub fn cell_point(&self, triangle: usize, x: [f64; 2]) -> (usize, f64, [f64; 2]) {
        let k = self.micro.triangle_cell[triangle].expect("channel triangle");
        (k, self.eps() * k as f64, self.micro.to_cell(k, x))
    }

    /// Transform data at a channel point; fails below the determinant floor.
    pub fn layer_data(&self, t: f64, triangle: usize, x: [f64; 2]) -> std::result::Result<JacobianData, TransformError> {
        let (_, xp, z) = self.cell_point(triangle, x);
        let d = self.spec.local_data(t, xp, z, self.eps());
        if !(d.j >= self.spec.det_floor) {
            return Err(TransformError::SingularJacobian { t, xp, z, det: d.j, floor: self.spec.det_floor });
        }
        Ok(d)
    }

    fn jacobian_weights(&self, t: f64) -> Result<Vec<f64>> {
        let mesh = self.mesh();
        let out: std::result::Result<Vec<[f64; 3]>, TransformError> = (0..mesh.triangles.len())
            .into_par_iter()
            .map(|tri| {
                if mesh.regions[tri] != Region::Channel || self.spec.is_static() {
                    return Ok([1.0; 3]);
                }
                let p = mesh.corners(tri);
                let mut w = [0.0; 3];
                for (i, (l, _)) in crate::discretization::quadrature::TRI_MIDPOINT.iter().enumerate() {
                    w[i] = self.layer_data(t, tri, crate::discretization::quadrature::bary_point(p, *l))?.j;
                }
                Ok(w)
            })
            .collect();
        Ok(out?.into_iter().flatten().collect())
    }

    fn layer_mass(&self, jw: &[f64]) -> Result<CsrMatrix<f64>> {
        let eps = self.eps();
        let w = |q: &QuadPoint| jw[3 * q.triangle + quad_index(q)];
        Ok(assemble_weighted_mass(self.mesh(), &w, RegionScale::only(Region::Channel, 1.0 / eps))?)
    }

    fn layer_operator(&self, s: &SpeciesData, t: f64) -> Result<CsrMatrix<f64>> {
        let eps = self.eps();
        let static_spec = self.spec.is_static();
        let diff = |q: &QuadPoint| -> Mat2 {
            let (_, _, z) = self.cell_point(q.triangle, q.x);
            let d = (s.d_layer)(t, q.x[0], z);
            if static_spec {
                return d;
            }
            let jd = self.layer_data(t, q.triangle, q.x).expect("checked by the Jacobian weights");
            let dt = jd.f_inv * d * jd.f_inv.transpose();
            0.5 * (dt + dt.transpose()) * jd.j
        };
        let vel = |q: &QuadPoint| -> [f64; 2] {
            let (_, _, z) = self.cell_point(q.triangle, q.x);
            let qbar = (s.q_layer)(t, q.x[0], z);
            if static_spec {
                return [qbar[0], qbar[1]];
            }
            let jd = self.layer_data(t, q.triangle, q.x).expect("checked by the Jacobian weights");
            let v: Vec2 = (jd.f_inv * qbar - jd.b_tilde / eps) * jd.j;
            [v[0], v[1]]
        };
        Ok(assemble_operator(
            self.mesh(),
            &diff,
            &vel,
            RegionScale::only(Region::Channel, eps),
            RegionScale::only(Region::Channel, 1.0),
        )?)
    }

    fn bulk_matrices(&self) -> Result<&(CsrMatrix<f64>, Vec<CsrMatrix<f64>>)> {
        if let Some(m) = self.bulk_mats.get() {
            return Ok(m);
        }
        let mesh = self.mesh();
        let bulk = RegionScale::bulk_layer(1.0, 0.0);
        let mass = assemble_weighted_mass(mesh, &|_| 1.0, bulk)?;
        let ops = self
            .data
            .species
            .iter()
            .map(|s| {
                let diff = |q: &QuadPoint| if q.region == Region::BulkPlus { s.d_plus } else { s.d_minus };
                let vel = |q: &QuadPoint| {
                    let v = if q.region == Region::BulkPlus { s.q_plus } else { s.q_minus };
                    [v[0], v[1]]
                };
                assemble_operator(mesh, &diff, &vel, bulk, bulk)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let _ = self.bulk_mats.set((mass, ops));
        Ok(self.bulk_mats.get().expect("just set"))
    }

    /// Unweighted `𝓛_ε` mass and `𝓗_ε` gradient matrices.
    pub fn norm_matrices(&self) -> Result<&(CsrMatrix<f64>, CsrMatrix<f64>)> {
        if let Some(m) = self.norm_mats.get() {
            return Ok(m);
        }
        let eps = self.eps();
        let mesh = self.mesh();
        let l = assemble_weighted_mass(mesh, &|_| 1.0, RegionScale::bulk_layer(1.0, 1.0 / eps))?;
        let g = assemble_operator(
            mesh,
            &|_| Mat2::identity(),
            &|_| [0.0; 2],
            RegionScale::bulk_layer(1.0, eps),
            RegionScale::uniform(0.0),
        )?;
        let _ = self.norm_mats.set((l, g));
        Ok(self.norm_mats.get().expect("just set"))
    }

    fn check_data(&self) -> Result<()> {
        if self.data.species.is_empty() {
            return Err(DataError::DataMismatch("no species".into()).into());
        }
        Ok(())
    }
}

fn quad_index(q: &QuadPoint) -> usize {
    // edge-midpoint rule: the vanishing barycentric coordinate identifies the point
    if q.bary[2] == 0.0 {
        0
    } else if q.bary[0] == 0.0 {
        1
    } else {
        2
    }
}

fn values_at(mesh: &crate::discretization::Mesh, u: &[Vec<f64>], q: &QuadPoint) -> Vec<f64> {
    u.iter().map(|v| eval_at(mesh, v, q)).collect()
}

/// Interpolates the initial data; bulk data are read at `(x′, x_n ∓ ε)`, channel data at
/// `(x′, z)`, and manufactured species start from the exact solution.
pub fn init_micro(problem: &MicroProblem) -> Result<MicroState> {
    problem.check_data()?;
    let micro = &problem.micro;
    let mesh = &micro.mesh;
    let eps = problem.eps();
    let mut channel_cell = vec![None; mesh.n_dofs()];
    for (k, vs) in micro.channel_vertices.iter().enumerate() {
        for &v in vs {
            channel_cell[v] = Some(k);
        }
    }
    let u = problem
        .data
        .species
        .iter()
        .map(|s| {
            let mms = s.manufactured(eps, problem.geom.half_height);
            mesh.vertices
                .iter()
                .enumerate()
                .map(|(v, x)| {
                    let region = match channel_cell[v] {
                        Some(_) => Region::Channel,
                        None if x[1] > 0.0 => Region::BulkPlus,
                        None => Region::BulkMinus,
                    };
                    if let Some(m) = mms {
                        return m.exact(0.0, *x, region);
                    }
                    match (region, channel_cell[v]) {
                        (Region::Channel, Some(k)) => s.initial.layer(x[0], micro.to_cell(k, *x)),
                        (Region::BulkPlus, _) => s.initial.bulk([x[0], x[1] - eps]),
                        _ => s.initial.bulk([x[0], x[1] + eps]),
                    }
                })
                .collect()
        })
        .collect();
    let jw = problem.jacobian_weights(0.0)?;
    Ok(MicroState { t: 0.0, u, jw })
}

/// Explicit right-hand side contributions of species `j` evaluated with `u^k`.
fn explicit_loads(problem: &MicroProblem, state: &MicroState, j: usize, t1: f64) -> Result<Vec<f64>> {
    let s = &problem.data.species[j];
    let mesh = problem.mesh();
    let eps = problem.eps();
    let mut rhs = vec![0.0; mesh.n_dofs()];
    let mut add = |v: Vec<f64>| rhs.iter_mut().zip(v).for_each(|(r, x)| *r += x);
    if !s.f.is_zero() {
        let f = |q: &QuadPoint| s.f.eval(&values_at(mesh, &state.u, q), j);
        add(assemble_load(mesh, &f, RegionScale::bulk_layer(1.0, 0.0)));
    }
    if !s.g.is_zero() {
        let g = |q: &QuadPoint| state.jw[3 * q.triangle + quad_index(q)] * s.g.eval(&values_at(mesh, &state.u, q), j);
        add(assemble_load(mesh, &g, RegionScale::only(Region::Channel, 1.0 / eps)));
    }
    if !s.h.is_zero() {
        let spec_static = problem.spec.is_static();
        let h = |p: &FacetPoint| -> f64 {
            let vals: Vec<f64> = state.u.iter().map(|v| eval_on_facet(v, p)).collect();
            let factor = if spec_static {
                1.0
            } else {
                problem
                    .layer_data(state.t, p.owner, p.x)
                    .map(|jd| jd.surface_factor(p.normal))
                    .unwrap_or(f64::NAN)
            };
            -factor * s.h.eval(&vals, j)
        };
        let load = assemble_boundary_load(mesh, FacetTag::Wall, &h)?;
        if load.iter().any(|v| !v.is_finite()) {
            return Err(Error::Transform(TransformError::InvalidSpec("singular wall transform".into())));
        }
        add(load);
    }
    if let Some(m) = s.manufactured(eps, problem.geom.half_height) {
        let src = |q: &QuadPoint| m.source(t1, q.x, q.region);
        add(assemble_load(mesh, &src, RegionScale::bulk_layer(1.0, 1.0 / eps)));
    }
    Ok(rhs)
}

/// Advances all species by one semi-implicit Euler step.
pub fn step_micro(problem: &MicroProblem, state: &MicroState, dt: f64) -> Result<MicroState> {
    let t1 = state.t + dt;
    if !(dt > 0.0) {
        return Err(Error::TimeStepping(format!("Δt = {dt} must be positive")));
    }
    problem.spec.check_time(t1)?;
    problem.check_data()?;
    let jw1 = problem.jacobian_weights(t1)?;
    let (bulk_mass, bulk_ops) = problem.bulk_matrices()?;
    let m0 = combine(&[(1.0, bulk_mass), (1.0, &problem.layer_mass(&state.jw)?)])?;
    let m1 = if problem.spec.is_static() { m0.clone() } else { combine(&[(1.0, bulk_mass), (1.0, &problem.layer_mass(&jw1)?)])? };
    let u = (0..problem.data.n_species())
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let layer_op = problem.layer_operator(&problem.data.species[j], t1)?;
            let a = combine(&[(1.0 / dt, &m1), (1.0, &bulk_ops[j]), (1.0, &layer_op)])?;
            let mut rhs = vec![0.0; state.u[j].len()];
            crate::discretization::matvec(&m0, &state.u[j], &mut rhs);
            rhs.iter_mut().for_each(|r| *r /= dt);
            for (r, l) in rhs.iter_mut().zip(explicit_loads(problem, state, j, t1)?) {
                *r += l;
            }
            Ok(solve_with_guess(&a, &rhs, &state.u[j], problem.solver)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MicroState { t: t1, u, jw: jw1 })
}

/// Number of steps of size `dt` that reach `t_end` exactly.
pub fn step_count(dt: f64, t_end: f64) -> Result<usize> {
    if t_end == 0.0 {
        return Ok(0);
    }
    if !(dt > 0.0 && t_end > 0.0) {
        return Err(Error::TimeStepping(format!("need Δt > 0 and T ≥ 0, got Δt = {dt}, T = {t_end}")));
    }
    let n = (t_end / dt).round();
    if n < 1.0 || (n * dt - t_end).abs() > 1e-9 * t_end {
        return Err(Error::TimeStepping(format!("Δt = {dt} does not divide T = {t_end}")));
    }
    Ok(n as usize)
}

/// Time-steps from the initial data to `t_end`, storing every `output_every`-th state and
/// per-step diagnostics.
pub fn solve_micro(problem: &MicroProblem, dt: f64, t_end: f64, output_every: usize) -> Result<MicroTrajectory> {
    let n = step_count(dt, t_end)?;
    let every = output_every.max(1);
    let mut state = init_micro(problem)?;
    let mut diagnostics = Vec::new();
    record(problem, &state, &mut diagnostics)?;
    let mut states = vec![state.clone()];
    for k in 1..=n {
        let mut next = step_micro(problem, &state, dt)?;
        if k == n {
            next.t = t_end;
        }
        state = next;
        record(problem, &state, &mut diagnostics)?;
        if k % every == 0 || k == n {
            states.push(state.clone());
        }
    }
    Ok(MicroTrajectory { states, diagnostics })
}

fn record(problem: &MicroProblem, state: &MicroState, out: &mut Vec<DiagnosticsRow>) -> Result<()> {
    let masses = total_mass(problem, state)?;
    let norms = scaled_norms(problem, state)?;
    for (j, (m, (l, h))) in masses.into_iter().zip(norms).enumerate() {
        out.push(DiagnosticsRow { t: state.t, species: j, mass: m, norm_l: l, norm_h: h });
    }
    Ok(())
}

/// `(‖u‖_{𝓛_ε}, ‖u‖_{𝓗_ε})` per species.
pub fn scaled_norms(problem: &MicroProblem, state: &MicroState) -> Result<Vec<(f64, f64)>> {
    let (l, g) = problem.norm_matrices()?;
    Ok(state
        .u
        .iter()
        .map(|u| {
            let l2 = bilinear(l, u, u).max(0.0);
            let h2 = l2 + bilinear(g, u, u).max(0.0);
            (l2.sqrt(), h2.sqrt())
        })
        .collect())
}

/// `Σ± ∫ u + ε⁻¹ ∫_layer J_ε u` per species.
pub fn total_mass(problem: &MicroProblem, state: &MicroState) -> Result<Vec<f64>> {
    let eps = problem.eps();
    let mesh = problem.mesh();
    Ok(state
        .u
        .iter()
        .map(|u| {
            let w = |q: &QuadPoint| state.jw[3 * q.triangle + quad_index(q)] * eval_at(mesh, u, q);
            assemble_load(mesh, &w, RegionScale::bulk_layer(1.0, 1.0 / eps)).iter().sum()
        })
        .collect())
}

/// Sample families for the trace inequality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceSample {
    Constants,
    CellLinears,
    Random { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceConstant {
    pub theta: f64,
    /// Maximum over every sample.
    pub constant: f64,
    /// Maximum over the random fields only.
    pub random: f64,
}

/// `C(θ) = max ∫_{N_ε} v² / (θε ∫|∇v|² + (θε)⁻¹ ∫ v²)` over layer fields; null fields are skipped.
pub fn verify_trace_inequality(
    micro: &MicroMesh,
    thetas: &[f64],
    samples: &[TraceSample],
) -> Result<Vec<TraceConstant>> {
    let mesh = &micro.mesh;
    let eps = micro.eps();
    let mass = assemble_weighted_mass(mesh, &|_| 1.0, RegionScale::only(Region::Channel, 1.0))?;
    let stiff = assemble_operator(
        mesh,
        &|_| Mat2::identity(),
        &|_| [0.0; 2],
        RegionScale::only(Region::Channel, 1.0),
        RegionScale::uniform(0.0),
    )?;
    let wall = assemble_boundary_mass(mesh, FacetTag::Wall, &|_| 1.0)?;
    let mut fields: Vec<(bool, Vec<f64>)> = Vec::new();
    let n = mesh.n_dofs();
    let cell_field = |f: &dyn Fn([f64; 2]) -> f64| {
        let mut v = vec![0.0; n];
        for (k, vs) in micro.channel_vertices.iter().enumerate() {
            for &d in vs {
                v[d] = f(micro.to_cell(k, mesh.vertices[d]));
            }
        }
        v
    };
    for s in samples {
        match *s {
            TraceSample::Constants => fields.push((false, cell_field(&|_| 1.0))),
            TraceSample::CellLinears => {
                fields.push((false, cell_field(&|z| z[0])));
                fields.push((false, cell_field(&|z| z[1])));
                fields.push((false, cell_field(&|z| 1.0 + z[0] - 0.5 * z[1])));
            }
            TraceSample::Random { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask = cell_field(&|_| 1.0);
                for _ in 0..count {
                    let v = mask.iter().map(|m| m * rng.gen_range(-1.0..1.0)).collect();
                    fields.push((true, v));
                }
            }
        }
    }
    let parts: Vec<(bool, f64, f64, f64)> = fields
        .iter()
        .map(|(random, v)| (*random, bilinear(&wall, v, v), bilinear(&stiff, v, v), bilinear(&mass, v, v)))
        .filter(|p| p.3 > 0.0)
        .collect();
    Ok(thetas
        .iter()
        .map(|&theta| {
            let ratio = |p: &(bool, f64, f64, f64)| p.1 / (theta * eps * p.2 + p.3 / (theta * eps));
            let constant = parts.iter().map(ratio).fold(0.0, f64::max);
            let random = parts.iter().filter(|p| p.0).map(ratio).fold(0.0, f64::max);
            TraceConstant { theta, constant, random }
        })
        .collect())
}

/// Writes `t, dof_id, species, value` rows.
pub fn write_snapshots_csv<W: Write>(states: &[MicroState], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "dof_id", "species", "value"])?;
    for s in states {
        for (j, u) in s.u.iter().enumerate() {
            for (d, v) in u.iter().enumerate() {
                out.write_record([fmt_f64(s.t), d.to_string(), j.to_string(), fmt_f64(*v)])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes `t, species, mass, norm_L, norm_H` rows.
pub fn write_diagnostics_csv<W: Write>(rows: &[DiagnosticsRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "species", "mass", "norm_L", "norm_H"])?;
    for r in rows {
        out.write_record([fmt_f64(r.t), r.species.to_string(), fmt_f64(r.mass), fmt_f64(r.norm_l), fmt_f64(r.norm_h)])?;
    }
    out.flush()?;
    Ok(())
}

impl MicroTrajectory {
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_snapshots_csv(&self.states, std::fs::File::create(dir.join("micro_snapshots.csv"))?)?;
        write_diagnostics_csv(&self.diagnostics, std::fs::File::create(dir.join("micro_diagnostics.csv"))?)?;
        Ok(())
    }

    pub fn last(&self) -> &MicroState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
