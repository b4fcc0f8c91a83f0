//! Discrete unfolding `T_ε`, averaging `U_ε` and the two-scale error.
//!
//! On the pulled-back cell mesh unfolding is a re-indexing of channel dofs. Channel cells
//! share no vertices, so the layer mass matrix is block diagonal with blocks `ε²M_Z` and
//! averaging is the inverse re-indexing.

use std::io::Write;

use nalgebra_sparse::CsrMatrix;

use crate::discretization::quadrature::{bary_point, TRI_MIDPOINT};
use crate::discretization::{assemble_weighted_mass, bilinear, MicroMesh, Mesh, PointLocator, RegionScale};
use crate::error::{Error, Result};
use crate::macro_solver::{MacroProblem, MacroState};
use crate::micro::{fmt_f64, MicroProblem, MicroState};

const LOCATE_TOL: f64 = 1e-9;

/// Values indexed by macro cell `k` and cell-mesh dof.
#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedField {
    pub cells: usize,
    pub dofs: usize,
    pub values: Vec<f64>,
}

impl UnfoldedField {
    pub fn zeros(cells: usize, dofs: usize) -> Self {
        UnfoldedField { cells, dofs, values: vec![0.0; cells * dofs] }
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        &self.values[k * self.dofs..(k + 1) * self.dofs]
    }

    pub fn cell_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dofs..(k + 1) * self.dofs]
    }

    /// `‖φ‖²_{L²(Σ×Z*)} = ε Σ_k φ_kᵀ M_Z φ_k`.
    pub fn norm_sq(&self, eps: f64, cell_mass: &CsrMatrix<f64>) -> f64 {
        eps * (0..self.cells).map(|k| bilinear(cell_mass, self.cell(k), self.cell(k))).sum::<f64>()
    }

    pub fn inner(&self, other: &UnfoldedField, eps: f64, cell_mass: &CsrMatrix<f64>) -> f64 {
        eps * (0..self.cells).map(|k| bilinear(cell_mass, self.cell(k), other.cell(k))).sum::<f64>()
    }

    /// Writes `k, dof, value` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "dof", "value"])?;
        for k in 0..self.cells {
            for (d, v) in self.cell(k).iter().enumerate() {
                out.write_record([k.to_string(), d.to_string(), fmt_f64(*v)])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Plain cell mass matrix on `Z*`.
pub fn cell_mass(cell: &Mesh) -> Result<CsrMatrix<f64>> {
    Ok(assemble_weighted_mass(cell, &|_| 1.0, RegionScale::uniform(1.0))?)
}

/// Layer mass matrix on the micro mesh (bulk rows vanish).
pub fn layer_mass(micro: &MicroMesh) -> Result<CsrMatrix<f64>> {
    Ok(assemble_weighted_mass(&micro.mesh, &|_| 1.0, RegionScale::bulk_layer(0.0, 1.0))?)
}

fn check_len(micro: &MicroMesh, field: &[f64]) -> Result<()> {
    if field.len() != micro.mesh.n_dofs() {
        return Err(Error::LayoutMismatch(format!("field has {} values, mesh {}", field.len(), micro.mesh.n_dofs())));
    }
    Ok(())
}

/// `T_ε v` on the pulled-back cell mesh.
pub fn unfold(micro: &MicroMesh, field: &[f64]) -> Result<UnfoldedField> {
    check_len(micro, field)?;
    let dofs = micro.cell_mesh.n_dofs();
    let mut out = UnfoldedField::zeros(micro.channel_vertices.len(), dofs);
    for (k, map) in micro.channel_vertices.iter().enumerate() {
        for (c, &v) in map.iter().enumerate() {
            out.values[k * dofs + c] = field[v];
        }
    }
    Ok(out)
}

/// `T_ε v` on an arbitrary mesh of `Z*` by P1 evaluation at `ε(k + z₁, z₂)`.
pub fn unfold_onto(micro: &MicroMesh, field: &[f64], cell: &Mesh) -> Result<UnfoldedField> {
    check_len(micro, field)?;
    let loc = PointLocator::new(&micro.cell_mesh);
    let eps = micro.eps();
    let dofs = cell.n_dofs();
    let mut out = UnfoldedField::zeros(micro.channel_vertices.len(), dofs);
    for (k, map) in micro.channel_vertices.iter().enumerate() {
        for (c, z) in cell.vertices.iter().enumerate() {
            let (t, l) = loc
                .locate(&micro.cell_mesh, *z, LOCATE_TOL)
                .ok_or(Error::OutOfLayer(eps * (k as f64 + z[0]), eps * z[1]))?;
            let tri = micro.cell_mesh.triangles[t];
            out.values[k * dofs + c] = (0..3).map(|a| l[a] * field[map[tri[a]]]).sum();
        }
    }
    Ok(out)
}

/// `U_ε φ`: the micro field with `⟨U_εφ, v⟩_{L²(layer)} = ε⟨φ, T_εv⟩` for all `v`; zero off the layer.
pub fn average(micro: &MicroMesh, phi: &UnfoldedField) -> Result<Vec<f64>> {
    if phi.cells != micro.channel_vertices.len() || phi.dofs != micro.cell_mesh.n_dofs() {
        return Err(Error::LayoutMismatch(format!(
            "unfolded field {}×{}, micro layer {}×{}",
            phi.cells,
            phi.dofs,
            micro.channel_vertices.len(),
            micro.cell_mesh.n_dofs()
        )));
    }
    let mut out = vec![0.0; micro.mesh.n_dofs()];
    for (k, map) in micro.channel_vertices.iter().enumerate() {
        for (c, &v) in map.iter().enumerate() {
            out[v] = phi.values[k * phi.dofs + c];
        }
    }
    Ok(out)
}

/// Largest `|∇_z(T_εv) − ε∇_x v|` over cells and cell triangles, on the pulled-back cell mesh.
pub fn gradient_commutation_check(micro: &MicroMesh, field: &[f64]) -> Result<f64> {
    let unfolded = unfold(micro, field)?;
    let eps = micro.eps();
    let mut worst = 0.0f64;
    for (k, tris) in micro.channel_triangles.iter().enumerate() {
        for (c, &t) in tris.iter().enumerate() {
            let gz = micro.cell_mesh.gradient(c, unfolded.cell(k));
            let gx = micro.mesh.gradient(t, field);
            worst = worst.max(((gz[0] - eps * gx[0]).powi(2) + (gz[1] - eps * gx[1]).powi(2)).sqrt());
        }
    }
    Ok(worst)
}

/// Same defect with `T_εv` interpolated onto `cell`, comparing at each cell-triangle centroid.
pub fn gradient_commutation_check_on(micro: &MicroMesh, field: &[f64], cell: &Mesh) -> Result<f64> {
    let unfolded = unfold_onto(micro, field, cell)?;
    let loc = PointLocator::new(&micro.cell_mesh);
    let eps = micro.eps();
    let mut worst = 0.0f64;
    for (k, tris) in micro.channel_triangles.iter().enumerate() {
        for c in 0..cell.triangles.len() {
            let p = cell.corners(c);
            let centroid = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
            let (t, _) = loc
                .locate(&micro.cell_mesh, centroid, LOCATE_TOL)
                .ok_or(Error::OutOfLayer(eps * (k as f64 + centroid[0]), eps * centroid[1]))?;
            let gz = cell.gradient(c, unfolded.cell(k));
            let gx = micro.mesh.gradient(tris[t], field);
            worst = worst.max(((gz[0] - eps * gx[0]).powi(2) + (gz[1] - eps * gx[1]).powi(2)).sqrt());
        }
    }
    Ok(worst)
}

/// Bulk `L²(Ω±)` errors and the layer error `‖T_εu_ε − u₀^M(ε⌊x′/ε⌋)‖_{L²(Σ×Z*)}` of one species.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TwoScaleError {
    pub bulk_plus: f64,
    pub bulk_minus: f64,
    pub layer: f64,
}

/// Two-scale error per species. Micro bulk points `x` are compared with `u₀±(x′, x_n ∓ ε)`.
pub fn two_scale_error(
    micro: &MicroProblem,
    micro_state: &MicroState,
    macro_problem: &MacroProblem,
    macro_state: &MacroState,
) -> Result<Vec<TwoScaleError>> {
    if (micro_state.t - macro_state.t).abs() > 1e-9 * micro_state.t.abs().max(1.0) {
        return Err(Error::TimeMismatch(micro_state.t, macro_state.t));
    }
    let n = micro_state.u.len();
    if macro_state.bulk_plus.len() != n {
        return Err(Error::LayoutMismatch(format!("{} micro species, {} macro species", n, macro_state.bulk_plus.len())));
    }
    let mm = &micro.micro;
    let eps = mm.eps();
    let mesh = &mm.mesh;
    let loc_plus = PointLocator::new(&macro_problem.bulk_plus);
    let loc_minus = PointLocator::new(&macro_problem.bulk_minus);
    let mc = cell_mass(&mm.cell_mesh)?;
    let same_cell = mm.cell_mesh.vertices == macro_problem.cell.vertices && mm.cell_mesh.triangles == macro_problem.cell.triangles;
    let cell_loc = PointLocator::new(&macro_problem.cell);
    let nodes: Vec<usize> = (0..mm.channel_vertices.len())
        .map(|k| {
            macro_problem
                .quad
                .node_at(eps * k as f64, 1e-9)
                .ok_or_else(|| Error::MeshMismatch(format!("no interface node at x′ = {}", eps * k as f64)))
        })
        .collect::<Result<_>>()?;
    let nc = macro_problem.n_cell();
    (0..n)
        .map(|j| {
            let u = &micro_state.u[j];
            let mut sq = [0.0f64; 2];
            for (t, tri) in mesh.triangles.iter().enumerate() {
                use crate::discretization::Region;
                let (slot, shift, bm, loc, vals) = match mesh.regions[t] {
                    Region::BulkPlus => (0, -eps, &macro_problem.bulk_plus, &loc_plus, &macro_state.bulk_plus[j]),
                    Region::BulkMinus => (1, eps, &macro_problem.bulk_minus, &loc_minus, &macro_state.bulk_minus[j]),
                    Region::Channel => continue,
                };
                let p = mesh.corners(t);
                let area = mesh.area(t);
                for (l, w) in TRI_MIDPOINT {
                    let x = bary_point(p, l);
                    let um: f64 = (0..3).map(|a| l[a] * u[tri[a]]).sum();
                    let y = [x[0], x[1] + shift];
                    let u0 = loc.eval(bm, vals, y, LOCATE_TOL).ok_or(Error::OutOfLayer(y[0], y[1]))?;
                    sq[slot] += w * area * (um - u0).powi(2);
                }
            }
            let unfolded = unfold(mm, u)?;
            let mut layer = 0.0;
            for (k, &node) in nodes.iter().enumerate() {
                let u0 = macro_state.cell_values(j, node, nc);
                let diff: Vec<f64> = if same_cell {
                    unfolded.cell(k).iter().zip(u0).map(|(a, b)| a - b).collect()
                } else {
                    mm.cell_mesh
                        .vertices
                        .iter()
                        .zip(unfolded.cell(k))
                        .map(|(z, a)| {
                            cell_loc.eval(&macro_problem.cell, u0, *z, LOCATE_TOL).map(|b| a - b).ok_or(Error::OutOfLayer(z[0], z[1]))
                        })
                        .collect::<Result<_>>()?
                };
                layer += eps * bilinear(&mc, &diff, &diff);
            }
            Ok(TwoScaleError { bulk_plus: sq[0].max(0.0).sqrt(), bulk_minus: sq[1].max(0.0).sqrt(), layer: layer.max(0.0).sqrt() })
        })
        .collect()
}

/// Worst relative defects of the unfolding identities over random fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnfoldCheck {
    pub eps: f64,
    /// `|‖T_εv‖² − ε⁻¹‖v‖²| / (ε⁻¹‖v‖²)`
    pub norm_identity: f64,
    /// `|⟨U_εφ, v⟩ − ε⟨φ, T_εv⟩| / (‖U_εφ‖‖v‖ + ε‖φ‖‖T_εv‖)`
    pub adjointness: f64,
    /// Absolute gradient commutation defect.
    pub gradient: f64,
    /// `max ‖U_εφ‖ / (√ε‖φ‖)`
    pub average_bound: f64,
}

/// Checks the unfolding identities on `count` random P1 fields and unfolded fields.
pub fn unfold_check(micro: &MicroMesh, count: usize, seed: u64) -> Result<UnfoldCheck> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let eps = micro.eps();
    let ml = layer_mass(micro)?;
    let mc = cell_mass(&micro.cell_mesh)?;
    let n = micro.mesh.n_dofs();
    let (cells, dofs) = (micro.channel_vertices.len(), micro.cell_mesh.n_dofs());
    let mut out = UnfoldCheck { eps, ..Default::default() };
    for _ in 0..count {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let phi = UnfoldedField { cells, dofs, values: (0..cells * dofs).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let tv = unfold(micro, &v)?;
        let lhs = tv.norm_sq(eps, &mc);
        let rhs = bilinear(&ml, &v, &v) / eps;
        out.norm_identity = out.norm_identity.max((lhs - rhs).abs() / rhs);
        let uphi = average(micro, &phi)?;
        let a = bilinear(&ml, &uphi, &v);
        let b = eps * phi.inner(&tv, eps, &mc);
        let scale = bilinear(&ml, &uphi, &uphi).sqrt() * bilinear(&ml, &v, &v).sqrt() + eps * phi.norm_sq(eps, &mc).sqrt() * lhs.sqrt();
        out.adjointness = out.adjointness.max((a - b).abs() / scale);
        out.gradient = out.gradient.max(gradient_commutation_check(micro, &v)?);
        let ratio = bilinear(&ml, &uphi, &uphi).sqrt() / (eps.sqrt() * phi.norm_sq(eps, &mc).sqrt());
        out.average_bound = out.average_bound.max(ratio);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::mesh_micro;
    use crate::geometry::{build_reference_geometry, tile_layer, ChannelSpec};

    fn micro(eps: f64) -> MicroMesh {
        let g = build_reference_geometry(ChannelSpec::straight(0.5, 0.5), 1.0).unwrap();
        mesh_micro(&g, &tile_layer(&g, eps).unwrap(), 4).unwrap()
    }

    #[test]
    fn unfolds_coordinate_by_definition() {
        let m = micro(0.25);
        let v: Vec<f64> = m.mesh.vertices.iter().map(|x| x[0]).collect();
        let u = unfold(&m, &v).unwrap();
        let c = m.cell_mesh.vertices.iter().position(|z| (z[0] - 0.5).abs() < 1e-12 && z[1].abs() < 1e-12).unwrap();
        assert!((u.cell(2)[c] - 0.625).abs() < 1e-15);
    }

    #[test]
    fn average_inverts_unfold_on_layer() {
        let m = micro(0.125);
        let v: Vec<f64> = m.mesh.vertices.iter().map(|x| (3.0 * x[0]).sin() + x[1]).collect();
        let back = average(&m, &unfold(&m, &v).unwrap()).unwrap();
        for map in &m.channel_vertices {
            for &d in map {
                assert_eq!(back[d], v[d]);
            }
        }
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let m = micro(0.25);
        assert!(matches!(unfold(&m, &[0.0; 3]), Err(Error::LayoutMismatch(_))));
        assert!(matches!(average(&m, &UnfoldedField::zeros(3, 2)), Err(Error::LayoutMismatch(_))));
    }
}
