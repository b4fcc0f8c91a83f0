//! The homogenized problem: bulk problems on `Ω±` coupled through one cell problem on `Z*`
//! per interface node, solved monolithically per species.
//!
//! Cell degrees of freedom on `S*±` are not unknowns of their own: they are the bulk dof at
//! `(x′ᵢ, 0±)`, which realizes the coupling `u^M = u±(x′, 0)` on `S*±` exactly.

use std::io::Write;

use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rayon::prelude::*;

use crate::discretization::quadrature::{bary_point, integrate_triangle, TRI_MIDPOINT};
use crate::discretization::{
    assemble_boundary_load, assemble_load, assemble_operator, assemble_weighted_mass, eval_at, eval_on_facet,
    mesh_bulk, mesh_cell, signed_area, solve_with_guess, FacetPoint, FacetTag, Mesh, QuadPoint, RegionScale,
    SolverOptions,
};
use crate::error::{Error, Result};
use crate::geometry::ReferenceGeometry;
use crate::micro::{fmt_f64, step_count};
use crate::problem::{DataError, ProblemData, SpeciesData};
use crate::transform::{JacobianData, LimitTransform, Mat2, TransformError, Vec2};

/// Trapezoid rule on `Σ` collocated with the bulk interface vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct InterfaceQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Bulk dof of node `i` on `Ω⁺` and on `Ω⁻`.
    pub plus_dofs: Vec<usize>,
    pub minus_dofs: Vec<usize>,
}

fn sigma_vertices(mesh: &Mesh) -> Vec<(f64, usize)> {
    let mut vs: Vec<usize> =
        mesh.facets.iter().filter(|f| f.tag == FacetTag::Sigma).flat_map(|f| f.v).collect();
    vs.sort_unstable();
    vs.dedup();
    let mut out: Vec<(f64, usize)> = vs.into_iter().map(|v| (mesh.vertices[v][0], v)).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

impl InterfaceQuadrature {
    pub fn new(plus: &Mesh, minus: &Mesh) -> Result<Self> {
        let p = sigma_vertices(plus);
        let m = sigma_vertices(minus);
        if p.len() < 2 || p.len() != m.len() || p.iter().zip(&m).any(|(a, b)| (a.0 - b.0).abs() > 1e-12) {
            return Err(Error::MeshMismatch("interface vertices of the two bulk meshes differ".into()));
        }
        let nodes: Vec<f64> = p.iter().map(|a| a.0).collect();
        let n = nodes.len();
        let weights = (0..n)
            .map(|i| {
                let left = if i > 0 { nodes[i] - nodes[i - 1] } else { 0.0 };
                let right = if i + 1 < n { nodes[i + 1] - nodes[i] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect();
        Ok(InterfaceQuadrature {
            nodes,
            weights,
            plus_dofs: p.iter().map(|a| a.1).collect(),
            minus_dofs: m.iter().map(|a| a.1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index of the node at `x′`, if any lies within `tol`.
    pub fn node_at(&self, xp: f64, tol: f64) -> Option<usize> {
        let i = self.nodes.partition_point(|&x| x < xp - tol);
        (i < self.nodes.len() && (self.nodes[i] - xp).abs() <= tol).then_some(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CellDof {
    Top,
    Bottom,
    Interior(usize),
}

/// Meshes, coupling layout and data of the limit problem.
#[derive(Debug)]
pub struct MacroProblem {
    pub geom: ReferenceGeometry,
    pub limit: LimitTransform,
    pub data: ProblemData,
    pub bulk_plus: Mesh,
    pub bulk_minus: Mesh,
    pub cell: Mesh,
    pub quad: InterfaceQuadrature,
    pub solver: SolverOptions,
    cell_dofs: Vec<CellDof>,
    n_interior: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroState {
    pub t: f64,
    /// Per species, dof vectors on the two bulk meshes.
    pub bulk_plus: Vec<Vec<f64>>,
    pub bulk_minus: Vec<Vec<f64>>,
    /// Per species, node-major cell dof values (`node · n_cell + dof`), tied dofs included.
    pub cells: Vec<Vec<f64>>,
}

impl MacroState {
    pub fn cell_values<'a>(&'a self, j: usize, node: usize, n_cell: usize) -> &'a [f64] {
        &self.cells[j][node * n_cell..(node + 1) * n_cell]
    }
}

#[derive(Clone, Debug)]
pub struct MacroTrajectory {
    pub states: Vec<MacroState>,
}

impl MacroTrajectory {
    pub fn last(&self) -> &MacroState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

impl MacroProblem {
    /// Bulk meshes with `16r` columns and `8r` rows, cell mesh at resolution `r`.
    pub fn new(geom: &ReferenceGeometry, limit: LimitTransform, data: ProblemData, r: usize) -> Result<Self> {
        let h = geom.half_height;
        let plus = mesh_bulk(h, 16 * r, 8 * r, true)?;
        let minus = mesh_bulk(h, 16 * r, 8 * r, false)?;
        let cell = mesh_cell(geom, r)?;
        Self::with_meshes(geom.clone(), limit, data, plus, minus, cell)
    }

    pub fn with_meshes(
        geom: ReferenceGeometry,
        limit: LimitTransform,
        data: ProblemData,
        bulk_plus: Mesh,
        bulk_minus: Mesh,
        cell: Mesh,
    ) -> Result<Self> {
        let quad = InterfaceQuadrature::new(&bulk_plus, &bulk_minus)?;
        let mut cell_dofs = vec![CellDof::Interior(0); cell.n_dofs()];
        for f in &cell.facets {
            let class = match f.tag {
                FacetTag::InterfacePlus => CellDof::Top,
                FacetTag::InterfaceMinus => CellDof::Bottom,
                _ => continue,
            };
            for v in f.v {
                cell_dofs[v] = class;
            }
        }
        if !cell_dofs.contains(&CellDof::Top) || !cell_dofs.contains(&CellDof::Bottom) {
            return Err(Error::MeshMismatch("cell mesh lacks S+ or S- facets".into()));
        }
        let mut n_interior = 0;
        for c in cell_dofs.iter_mut() {
            if let CellDof::Interior(i) = c {
                *i = n_interior;
                n_interior += 1;
            }
        }
        if data.species.is_empty() {
            return Err(DataError::DataMismatch("no species".into()).into());
        }
        Ok(MacroProblem {
            geom,
            limit,
            data,
            bulk_plus,
            bulk_minus,
            cell,
            quad,
            solver: crate::micro::default_solver(),
            cell_dofs,
            n_interior,
        })
    }

    pub fn n_cell(&self) -> usize {
        self.cell.n_dofs()
    }

    /// Size of the monolithic system of one species.
    pub fn n_unknowns(&self) -> usize {
        self.bulk_plus.n_dofs() + self.bulk_minus.n_dofs() + self.quad.len() * self.n_interior
    }

    fn global_cell_dof(&self, node: usize, c: usize) -> usize {
        match self.cell_dofs[c] {
            CellDof::Top => self.quad.plus_dofs[node],
            CellDof::Bottom => self.bulk_plus.n_dofs() + self.quad.minus_dofs[node],
            CellDof::Interior(i) => self.bulk_plus.n_dofs() + self.bulk_minus.n_dofs() + node * self.n_interior + i,
        }
    }

    /// Limit transform data at a cell point of node `i`.
    pub fn cell_data(&self, t: f64, node: usize, z: [f64; 2]) -> std::result::Result<JacobianData, TransformError> {
        let xp = self.quad.nodes[node];
        let d = self.limit.data(t, xp, z);
        let floor = self.limit.spec.det_floor;
        if !(d.j >= floor) {
            return Err(TransformError::SingularJacobian { t, xp, z, det: d.j, floor });
        }
        Ok(d)
    }

    fn cell_j(&self, t: f64, node: usize) -> Result<Vec<f64>> {
        let static_spec = self.limit.spec.is_static();
        let mut out = Vec::with_capacity(3 * self.cell.triangles.len());
        for tri in 0..self.cell.triangles.len() {
            let p = self.cell.corners(tri);
            for (l, _) in TRI_MIDPOINT {
                out.push(if static_spec { 1.0 } else { self.cell_data(t, node, bary_point(p, l))?.j });
            }
        }
        Ok(out)
    }

    /// `J₀`-weighted cell mass matrix of node `i`.
    pub fn cell_mass(&self, t: f64, node: usize) -> Result<CsrMatrix<f64>> {
        let jw = self.cell_j(t, node)?;
        let w = |q: &QuadPoint| jw[3 * q.triangle + quad_slot(q)];
        Ok(assemble_weighted_mass(&self.cell, &w, RegionScale::uniform(1.0))?)
    }

    /// Cell operator `∫ J₀D̃₀∇u·∇φ − ∫ J₀F₀⁻¹(q̄ − ∂_tψ*) u·∇φ` of node `i`.
    pub fn cell_operator(&self, s: &SpeciesData, t: f64, node: usize) -> Result<CsrMatrix<f64>> {
        let xp = self.quad.nodes[node];
        let static_spec = self.limit.spec.is_static();
        let diff = |q: &QuadPoint| -> Mat2 {
            let d = (s.d_layer)(t, xp, q.x);
            if static_spec {
                return d;
            }
            let jd = self.cell_data(t, node, q.x).expect("checked by the Jacobian weights");
            let dt = jd.f_inv * d * jd.f_inv.transpose();
            0.5 * (dt + dt.transpose()) * jd.j
        };
        let vel = |q: &QuadPoint| -> [f64; 2] {
            let qbar = (s.q_layer)(t, xp, q.x);
            if static_spec {
                return [qbar[0], qbar[1]];
            }
            let jd = self.cell_data(t, node, q.x).expect("checked by the Jacobian weights");
            let v: Vec2 = (jd.f_inv * qbar - jd.b_tilde) * jd.j;
            [v[0], v[1]]
        };
        if !static_spec {
            self.cell_j(t, node)?;
        }
        Ok(assemble_operator(&self.cell, &diff, &vel, RegionScale::uniform(1.0), RegionScale::uniform(1.0))?)
    }

    fn bulk_operator(&self, s: &SpeciesData, upper: bool) -> Result<CsrMatrix<f64>> {
        let (mesh, d, q) = if upper { (&self.bulk_plus, s.d_plus, s.q_plus) } else { (&self.bulk_minus, s.d_minus, s.q_minus) };
        Ok(assemble_operator(mesh, &|_| d, &|_| [q[0], q[1]], RegionScale::uniform(1.0), RegionScale::uniform(1.0))?)
    }

    /// Gathers the monolithic unknown vector of species `j`.
    pub fn gather(&self, state: &MacroState, j: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_unknowns());
        x.extend_from_slice(&state.bulk_plus[j]);
        x.extend_from_slice(&state.bulk_minus[j]);
        let nc = self.n_cell();
        for node in 0..self.quad.len() {
            for c in 0..nc {
                if let CellDof::Interior(_) = self.cell_dofs[c] {
                    x.push(state.cells[j][node * nc + c]);
                }
            }
        }
        x
    }

    /// Splits a monolithic vector into bulk and (tied) cell values.
    pub fn scatter(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let np = self.bulk_plus.n_dofs();
        let nm = self.bulk_minus.n_dofs();
        let nc = self.n_cell();
        let mut cells = vec![0.0; self.quad.len() * nc];
        for node in 0..self.quad.len() {
            for c in 0..nc {
                cells[node * nc + c] = x[self.global_cell_dof(node, c)];
            }
        }
        (x[..np].to_vec(), x[np..np + nm].to_vec(), cells)
    }
}

fn quad_slot(q: &QuadPoint) -> usize {
    if q.bary[2] == 0.0 {
        0
    } else if q.bary[0] == 0.0 {
        1
    } else {
        2
    }
}

fn push_mapped(coo: &mut CooMatrix<f64>, m: &CsrMatrix<f64>, scale: f64, map: &dyn Fn(usize) -> usize) {
    for (r, row) in m.row_iter().enumerate() {
        let gr = map(r);
        for (c, v) in row.col_indices().iter().zip(row.values()) {
            if *v != 0.0 {
                coo.push(gr, map(*c), scale * v);
            }
        }
    }
}

fn mat_vec(m: &CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m.nrows()];
    crate::discretization::matvec(m, x, &mut y);
    y
}

/// Interpolates the initial data; tied cell dofs take the bulk interface values.
pub fn init_macro(problem: &MacroProblem) -> Result<MacroState> {
    let nc = problem.n_cell();
    let mut bp = Vec::new();
    let mut bm = Vec::new();
    let mut cells = Vec::new();
    for s in &problem.data.species {
        let up: Vec<f64> = problem.bulk_plus.vertices.iter().map(|x| s.initial.bulk([x[0], x[1].max(0.0)])).collect();
        let dn: Vec<f64> = problem.bulk_minus.vertices.iter().map(|x| s.initial.bulk([x[0], x[1].min(-0.0)])).collect();
        let mut c = vec![0.0; problem.quad.len() * nc];
        for (node, &xp) in problem.quad.nodes.iter().enumerate() {
            for (d, z) in problem.cell.vertices.iter().enumerate() {
                c[node * nc + d] = match problem.cell_dofs[d] {
                    CellDof::Top => up[problem.quad.plus_dofs[node]],
                    CellDof::Bottom => dn[problem.quad.minus_dofs[node]],
                    CellDof::Interior(_) => s.initial.layer(xp, *z),
                };
            }
        }
        bp.push(up);
        bm.push(dn);
        cells.push(c);
    }
    Ok(MacroState { t: 0.0, bulk_plus: bp, bulk_minus: bm, cells })
}

/// Per-node cell contributions for one species and step.
struct CellBlock {
    lhs: CsrMatrix<f64>,
    rhs: Vec<f64>,
}

fn cell_block(problem: &MacroProblem, state: &MacroState, j: usize, node: usize, t1: f64, dt: f64) -> Result<CellBlock> {
    let s = &problem.data.species[j];
    let nc = problem.n_cell();
    let u0 = state.cell_values(j, node, nc);
    let m1 = problem.cell_mass(t1, node)?;
    let m0 = if problem.limit.spec.is_static() { m1.clone() } else { problem.cell_mass(state.t, node)? };
    let a = problem.cell_operator(s, t1, node)?;
    let lhs = crate::discretization::combine(&[(1.0 / dt, &m1), (1.0, &a)])?;
    let mut rhs: Vec<f64> = mat_vec(&m0, u0).into_iter().map(|v| v / dt).collect();
    let cell_vals = |q: &QuadPoint| -> Vec<f64> {
        (0..problem.data.n_species()).map(|i| eval_at(&problem.cell, state.cell_values(i, node, nc), q)).collect()
    };
    if !s.g.is_zero() {
        let jw = problem.cell_j(state.t, node)?;
        let g = |q: &QuadPoint| jw[3 * q.triangle + quad_slot(q)] * s.g.eval(&cell_vals(q), j);
        for (r, v) in rhs.iter_mut().zip(assemble_load(&problem.cell, &g, RegionScale::uniform(1.0))) {
            *r += v;
        }
    }
    if !s.h.is_zero() {
        let static_spec = problem.limit.spec.is_static();
        let h = |p: &FacetPoint| -> f64 {
            let vals: Vec<f64> = (0..problem.data.n_species())
                .map(|i| eval_on_facet(state.cell_values(i, node, nc), p))
                .collect();
            let factor = if static_spec {
                1.0
            } else {
                problem.cell_data(state.t, node, p.x).map(|d| d.surface_factor(p.normal)).unwrap_or(f64::NAN)
            };
            -factor * s.h.eval(&vals, j)
        };
        let load = assemble_boundary_load(&problem.cell, FacetTag::Wall, &h)?;
        if load.iter().any(|v| !v.is_finite()) {
            return Err(TransformError::InvalidSpec("singular wall transform".into()).into());
        }
        for (r, v) in rhs.iter_mut().zip(load) {
            *r += v;
        }
    }
    Ok(CellBlock { lhs, rhs })
}

/// Monolithic system of species `j` for the step `state.t → state.t + dt`.
pub fn assemble_macro(problem: &MacroProblem, state: &MacroState, j: usize, dt: f64) -> Result<(CsrMatrix<f64>, Vec<f64>)> {
    let t1 = state.t + dt;
    problem.limit.spec.check_time(t1)?;
    let s = &problem.data.species[j];
    let n = problem.n_unknowns();
    let np = problem.bulk_plus.n_dofs();
    let mut coo = CooMatrix::new(n, n);
    let mut rhs = vec![0.0; n];
    for (upper, mesh, u, off) in [
        (true, &problem.bulk_plus, &state.bulk_plus[j], 0),
        (false, &problem.bulk_minus, &state.bulk_minus[j], np),
    ] {
        let m = assemble_weighted_mass(mesh, &|_| 1.0, RegionScale::uniform(1.0))?;
        let a = problem.bulk_operator(s, upper)?;
        push_mapped(&mut coo, &m, 1.0 / dt, &|i| i + off);
        push_mapped(&mut coo, &a, 1.0, &|i| i + off);
        for (i, v) in mat_vec(&m, u).into_iter().enumerate() {
            rhs[off + i] += v / dt;
        }
        if !s.f.is_zero() {
            let all = if upper { &state.bulk_plus } else { &state.bulk_minus };
            let f = |q: &QuadPoint| {
                let vals: Vec<f64> = all.iter().map(|v| eval_at(mesh, v, q)).collect();
                s.f.eval(&vals, j)
            };
            for (i, v) in assemble_load(mesh, &f, RegionScale::uniform(1.0)).into_iter().enumerate() {
                rhs[off + i] += v;
            }
        }
    }
    let blocks = (0..problem.quad.len())
        .into_par_iter()
        .map(|node| cell_block(problem, state, j, node, t1, dt))
        .collect::<Result<Vec<_>>>()?;
    for (node, b) in blocks.into_iter().enumerate() {
        let w = problem.quad.weights[node];
        let map = |c: usize| problem.global_cell_dof(node, c);
        push_mapped(&mut coo, &b.lhs, w, &map);
        for (c, v) in b.rhs.into_iter().enumerate() {
            rhs[map(c)] += w * v;
        }
    }
    Ok((CsrMatrix::from(&coo), rhs))
}

pub fn step_macro(problem: &MacroProblem, state: &MacroState, dt: f64) -> Result<MacroState> {
    if !(dt > 0.0) {
        return Err(Error::TimeStepping(format!("Δt = {dt} must be positive")));
    }
    let solved = (0..problem.data.n_species())
        .into_par_iter()
        .map(|j| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let (a, b) = assemble_macro(problem, state, j, dt)?;
            let x = solve_with_guess(&a, &b, &problem.gather(state, j), problem.solver)?;
            Ok(problem.scatter(&x))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut next = MacroState { t: state.t + dt, bulk_plus: vec![], bulk_minus: vec![], cells: vec![] };
    for (p, m, c) in solved {
        next.bulk_plus.push(p);
        next.bulk_minus.push(m);
        next.cells.push(c);
    }
    Ok(next)
}

/// Semi-implicit Euler trajectory; every `output_every`-th state is kept.
pub fn solve_macro(problem: &MacroProblem, dt: f64, t_end: f64, output_every: usize) -> Result<MacroTrajectory> {
    let n = step_count(dt, t_end)?;
    let every = output_every.max(1);
    let mut state = init_macro(problem)?;
    let mut states = vec![state.clone()];
    for k in 1..=n {
        let mut next = step_macro(problem, &state, dt)?;
        if k == n {
            next.t = t_end;
        }
        state = next;
        if k % every == 0 || k == n {
            states.push(state.clone());
        }
    }
    Ok(MacroTrajectory { states })
}

/// `Σ± ∫ u± + Σᵢ wᵢ ∫_{Z*} J₀ u^M` per species.
pub fn macro_mass(problem: &MacroProblem, state: &MacroState) -> Result<Vec<f64>> {
    let nc = problem.n_cell();
    (0..problem.data.n_species())
        .map(|j| {
            let mut m = 0.0;
            for (mesh, u) in [(&problem.bulk_plus, &state.bulk_plus[j]), (&problem.bulk_minus, &state.bulk_minus[j])] {
                m += assemble_load(mesh, &|q| eval_at(mesh, u, q), RegionScale::uniform(1.0)).iter().sum::<f64>();
            }
            for node in 0..problem.quad.len() {
                let jw = problem.cell_j(state.t, node)?;
                let u = state.cell_values(j, node, nc);
                let f = |q: &QuadPoint| jw[3 * q.triangle + quad_slot(q)] * eval_at(&problem.cell, u, q);
                m += problem.quad.weights[node] * assemble_load(&problem.cell, &f, RegionScale::uniform(1.0)).iter().sum::<f64>();
            }
            Ok(m)
        })
        .collect()
}

/// Largest `|cell value − tied bulk value|` over nodes and `S*±` dofs.
pub fn coupling_defect(problem: &MacroProblem, state: &MacroState) -> f64 {
    let nc = problem.n_cell();
    let mut worst = 0.0f64;
    for j in 0..problem.data.n_species() {
        for node in 0..problem.quad.len() {
            let u = state.cell_values(j, node, nc);
            for c in 0..nc {
                let tied = match problem.cell_dofs[c] {
                    CellDof::Top => state.bulk_plus[j][problem.quad.plus_dofs[node]],
                    CellDof::Bottom => state.bulk_minus[j][problem.quad.minus_dofs[node]],
                    CellDof::Interior(_) => continue,
                };
                worst = worst.max((u[c] - tied).abs());
            }
        }
    }
    worst
}

/// One-sided flux identities and the two-sided jump at one node.
#[derive(Clone, Debug, PartialEq)]
pub struct FluxResidual {
    pub node: usize,
    pub x: f64,
    /// `(D⁺∇u⁺ − u⁺q⁺)·n⁺`, `n⁺ = (0, 1)`.
    pub flux_plus: f64,
    /// `(D⁻∇u⁻ − u⁻q⁻)·n⁻`, `n⁻ = (0, −1)`.
    pub flux_minus: f64,
    /// `∫_{S*±} (D̃₀∇u − u q̃₀)·n± dH`.
    pub cell_plus: f64,
    pub cell_minus: f64,
    pub r_plus: f64,
    pub r_minus: f64,
    pub r_jump: f64,
}

impl FluxResidual {
    pub fn jump(&self) -> f64 {
        self.flux_plus - self.flux_minus
    }

    pub fn residual(&self) -> f64 {
        self.r_plus.max(self.r_minus).max(self.r_jump)
    }
}

/// Area-weighted mean gradient of the triangles touching vertex `v`.
fn vertex_gradient(mesh: &Mesh, u: &[f64], v: usize) -> [f64; 2] {
    let mut g = [0.0; 2];
    let mut a = 0.0;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if tri.contains(&v) {
            let area = mesh.area(t);
            let gt = mesh.gradient(t, u);
            g[0] += area * gt[0];
            g[1] += area * gt[1];
            a += area;
        }
    }
    [g[0] / a, g[1] / a]
}

/// Flux residuals of species `j` at every node, with element-average recovered gradients.
pub fn flux_jump_residual(problem: &MacroProblem, state: &MacroState, j: usize) -> Result<Vec<FluxResidual>> {
    let s = &problem.data.species[j];
    let nc = problem.n_cell();
    let t = state.t;
    (0..problem.quad.len())
        .map(|node| {
            let xp = problem.quad.nodes[node];
            let bulk_flux = |mesh: &Mesh, u: &[f64], v: usize, d: Mat2, q: Vec2, ny: f64| {
                let g = vertex_gradient(mesh, u, v);
                let f = d * Vec2::new(g[0], g[1]) - q * u[v];
                f[1] * ny
            };
            let flux_plus = bulk_flux(&problem.bulk_plus, &state.bulk_plus[j], problem.quad.plus_dofs[node], s.d_plus, s.q_plus, 1.0);
            let flux_minus =
                bulk_flux(&problem.bulk_minus, &state.bulk_minus[j], problem.quad.minus_dofs[node], s.d_minus, s.q_minus, -1.0);
            let u = state.cell_values(j, node, nc);
            let mut cell = [0.0; 2];
            for f in &problem.cell.facets {
                let (slot, ny) = match f.tag {
                    FacetTag::InterfacePlus => (0, 1.0),
                    FacetTag::InterfaceMinus => (1, -1.0),
                    _ => continue,
                };
                let a = problem.cell.vertices[f.v[0]];
                let b = problem.cell.vertices[f.v[1]];
                let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
                let jd = problem.cell_data(t, node, mid)?;
                let dt = jd.f_inv * (s.d_layer)(t, xp, mid) * jd.f_inv.transpose();
                let qt = jd.f_inv * (s.q_layer)(t, xp, mid);
                let g = problem.cell.gradient(f.owner, u);
                let um = 0.5 * (u[f.v[0]] + u[f.v[1]]);
                let flux = dt * Vec2::new(g[0], g[1]) - qt * um;
                cell[slot] += problem.cell.facet_length(f) * flux[1] * ny;
            }
            // both sides in the direction n⁺
            let jump_bulk = flux_plus - flux_minus;
            let jump_cell = cell[0] - cell[1];
            Ok(FluxResidual {
                node,
                x: xp,
                flux_plus,
                flux_minus,
                cell_plus: cell[0],
                cell_minus: cell[1],
                r_plus: (flux_plus - cell[0]).abs(),
                r_minus: (flux_minus - cell[1]).abs(),
                r_jump: (jump_bulk - jump_cell).abs(),
            })
        })
        .collect()
}

/// Writes `t, node, species, flux_plus, flux_minus, jump, residual` rows.
pub fn write_flux_csv<W: Write>(rows: &[(f64, usize, FluxResidual)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "node", "species", "flux_plus", "flux_minus", "jump", "residual"])?;
    for (t, j, r) in rows {
        out.write_record([
            fmt_f64(*t),
            r.node.to_string(),
            j.to_string(),
            fmt_f64(r.flux_plus),
            fmt_f64(r.flux_minus),
            fmt_f64(r.jump()),
            fmt_f64(r.residual()),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// A cell mapped by `ψ₀(t, x′ᵢ, ·)` with the dof values carried to the mapped vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolvedCell {
    pub node: usize,
    pub x: f64,
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    /// Per species.
    pub values: Vec<Vec<f64>>,
    /// Polygon area of the mapped mesh.
    pub area: f64,
}

/// Evolving-cell representation of every node; fails on a folded mapped triangle.
pub fn push_forward(problem: &MacroProblem, state: &MacroState) -> Result<Vec<EvolvedCell>> {
    let nc = problem.n_cell();
    (0..problem.quad.len())
        .map(|node| {
            let mut cell = push_forward_mesh(&problem.limit, &problem.cell, state.t, problem.quad.nodes[node], node)?;
            cell.values = (0..problem.data.n_species()).map(|j| state.cell_values(j, node, nc).to_vec()).collect();
            Ok(cell)
        })
        .collect()
}

/// Maps a cell mesh by `ψ₀(t, x′, ·)`.
pub fn push_forward_mesh(limit: &LimitTransform, cell: &Mesh, t: f64, xp: f64, node: usize) -> Result<EvolvedCell> {
    let vertices: Vec<[f64; 2]> = cell.vertices.iter().map(|z| limit.psi0(t, xp, *z)).collect();
    let mut area = 0.0;
    for (k, tri) in cell.triangles.iter().enumerate() {
        let a = signed_area([vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]]);
        if !(a > 0.0) {
            return Err(Error::FoldedCell { node, triangle: k, area: a });
        }
        area += a;
    }
    Ok(EvolvedCell { node, x: xp, vertices, triangles: cell.triangles.clone(), values: Vec::new(), area })
}

/// `∫_{Z*} J₀(t, x′, z) dz` by the degree-five rule on `m²` subtriangles of every cell triangle.
pub fn evolved_area(limit: &LimitTransform, cell: &Mesh, t: f64, xp: f64, m: usize) -> f64 {
    (0..cell.triangles.len())
        .map(|k| integrate_triangle(cell.corners(k), m, &|z| limit.data(t, xp, z).j))
        .sum()
}

/// Writes the evolved cells as `node t v x y` and `node t t i j k` rows.
pub fn write_evolved_cells<W: Write>(cells: &[EvolvedCell], t: f64, mut w: W) -> Result<()> {
    for c in cells {
        for v in &c.vertices {
            writeln!(w, "{} {} v {} {}", c.node, fmt_f64(t), fmt_f64(v[0]), fmt_f64(v[1]))?;
        }
        for tri in &c.triangles {
            writeln!(w, "{} {} t {} {} {}", c.node, fmt_f64(t), tri[0], tri[1], tri[2])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_reference_geometry, ChannelSpec};
    use crate::problem::InitialData;
    use crate::transform::{limit_transform, TransformSpec};

    fn problem(init: InitialData) -> MacroProblem {
        let g = build_reference_geometry(ChannelSpec::straight(0.5, 0.5), 1.0).unwrap();
        let limit = limit_transform(&TransformSpec::identity(1.0)).unwrap();
        MacroProblem::new(&g, limit, ProblemData::single(SpeciesData::isotropic(1.0, init)), 2).unwrap()
    }

    #[test]
    fn trapezoid_weights_sum_to_one() {
        let p = problem(InitialData::Constant(0.0));
        assert_eq!(p.quad.len(), 33);
        assert!((p.quad.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(p.quad.node_at(0.25, 1e-9), Some(8));
    }

    #[test]
    fn constants_are_stationary() {
        let p = problem(InitialData::Constant(1.0));
        let s0 = init_macro(&p).unwrap();
        let s1 = step_macro(&p, &s0, 0.01).unwrap();
        let dev = s1.bulk_plus[0].iter().chain(&s1.bulk_minus[0]).chain(&s1.cells[0]).map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-12, "{dev}");
        let m = macro_mass(&p, &s1).unwrap()[0];
        assert!((m - 3.0).abs() < 1e-12, "{m}");
    }

    #[test]
    fn gather_scatter_round_trip() {
        let p = problem("two_reservoir(1, 0)".parse().unwrap());
        let s = init_macro(&p).unwrap();
        let (a, b, c) = p.scatter(&p.gather(&s, 0));
        assert_eq!(a, s.bulk_plus[0]);
        assert_eq!(b, s.bulk_minus[0]);
        assert_eq!(c, s.cells[0]);
        assert_eq!(coupling_defect(&p, &s), 0.0);
    }
}
