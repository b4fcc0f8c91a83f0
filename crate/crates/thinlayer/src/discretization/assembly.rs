//! Element-by-element assembly of P1 mass, diffusion–advection, load and boundary forms.

use nalgebra_sparse::CsrMatrix;
use rayon::prelude::*;

use super::mesh::{FacetTag, Mesh, Region};
use super::quadrature::{bary_point, GAUSS2, TRI_MIDPOINT};
use super::DiscretizationError;
use crate::transform::Mat2;

/// A triangle quadrature point handed to coefficient callbacks.
#[derive(Clone, Copy, Debug)]
pub struct QuadPoint {
    pub x: [f64; 2],
    pub region: Region,
    pub triangle: usize,
    pub bary: [f64; 3],
}

/// A boundary quadrature point handed to coefficient callbacks.
#[derive(Clone, Copy, Debug)]
pub struct FacetPoint {
    pub x: [f64; 2],
    /// Outward unit normal of the owner triangle.
    pub normal: [f64; 2],
    pub facet: usize,
    pub owner: usize,
    pub vertices: [usize; 2],
    /// Weights of the two facet vertices at `x`.
    pub lambda: [f64; 2],
}

/// Multiplier applied to every contribution of a region; zero skips the region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionScale {
    pub bulk_plus: f64,
    pub channel: f64,
    pub bulk_minus: f64,
}

impl RegionScale {
    pub fn uniform(s: f64) -> Self {
        RegionScale { bulk_plus: s, channel: s, bulk_minus: s }
    }

    pub fn bulk_layer(bulk: f64, layer: f64) -> Self {
        RegionScale { bulk_plus: bulk, channel: layer, bulk_minus: bulk }
    }

    pub fn only(region: Region, s: f64) -> Self {
        let mut out = RegionScale::uniform(0.0);
        match region {
            Region::BulkPlus => out.bulk_plus = s,
            Region::Channel => out.channel = s,
            Region::BulkMinus => out.bulk_minus = s,
        }
        out
    }

    pub fn get(&self, region: Region) -> f64 {
        match region {
            Region::BulkPlus => self.bulk_plus,
            Region::Channel => self.channel,
            Region::BulkMinus => self.bulk_minus,
        }
    }
}

pub type ScalarField<'a> = &'a (dyn Fn(&QuadPoint) -> f64 + Sync);
pub type TensorField<'a> = &'a (dyn Fn(&QuadPoint) -> Mat2 + Sync);
pub type VectorField<'a> = &'a (dyn Fn(&QuadPoint) -> [f64; 2] + Sync);
pub type BoundaryField<'a> = &'a (dyn Fn(&FacetPoint) -> f64 + Sync);

fn quad_points(mesh: &Mesh, t: usize) -> [QuadPoint; 3] {
    let p = mesh.corners(t);
    let region = mesh.regions[t];
    TRI_MIDPOINT.map(|(l, _)| QuadPoint { x: bary_point(p, l), region, triangle: t, bary: l })
}

fn scatter(mesh: &Mesh, locals: Vec<Option<[f64; 9]>>) -> CsrMatrix<f64> {
    let cache = mesh.element_cache();
    let mut values = vec![0.0; cache.pattern.nnz()];
    for (t, local) in locals.into_iter().enumerate() {
        if let Some(local) = local {
            for (e, v) in cache.entry_index[t].iter().zip(local) {
                values[*e] += v;
            }
        }
    }
    CsrMatrix::try_from_pattern_and_values(cache.pattern.clone(), values)
        .expect("values sized to the pattern")
}

/// Matrix of zeros on the mesh pattern.
pub fn zero_matrix(mesh: &Mesh) -> CsrMatrix<f64> {
    let cache = mesh.element_cache();
    CsrMatrix::try_from_pattern_and_values(cache.pattern.clone(), vec![0.0; cache.pattern.nnz()])
        .expect("values sized to the pattern")
}

/// `Σ scale(region) ∫ weight φᵢφⱼ` with the edge-midpoint rule.
pub fn assemble_weighted_mass(
    mesh: &Mesh,
    weight: ScalarField,
    scale: RegionScale,
) -> Result<CsrMatrix<f64>, DiscretizationError> {
    let cache = mesh.element_cache();
    let locals = (0..mesh.triangles.len())
        .into_par_iter()
        .map(|t| {
            let s = scale.get(mesh.regions[t]);
            if s == 0.0 {
                return Ok(None);
            }
            let mut local = [0.0; 9];
            for (q, (_, w)) in quad_points(mesh, t).iter().zip(TRI_MIDPOINT) {
                let c = weight(q);
                if !(c > 0.0) {
                    return Err(DiscretizationError::NonpositiveWeight { value: c, x: q.x[0], y: q.x[1] });
                }
                let f = s * w * cache.area[t] * c;
                for a in 0..3 {
                    for b in 0..3 {
                        local[3 * a + b] += f * q.bary[a] * q.bary[b];
                    }
                }
            }
            Ok(Some(local))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scatter(mesh, locals))
}

fn check_psd(d: &Mat2, x: [f64; 2]) -> Result<(), DiscretizationError> {
    let scale = d.amax();
    let bad = (d[(0, 1)] - d[(1, 0)]).abs() > 1e-12 * scale.max(1e-300)
        || d[(0, 0)] < -1e-14 * scale
        || d[(1, 1)] < -1e-14 * scale
        || d.determinant() < -1e-12 * scale * scale
        || !scale.is_finite();
    if bad {
        return Err(DiscretizationError::NotSPD(format!("{d:?} at ({}, {})", x[0], x[1])));
    }
    Ok(())
}

/// `∫ s_d (D∇φⱼ)·∇φᵢ − ∫ s_a φⱼ v·∇φᵢ`, entry `(i, j)`.
pub fn assemble_operator(
    mesh: &Mesh,
    diffusion: TensorField,
    velocity: VectorField,
    diff_scale: RegionScale,
    adv_scale: RegionScale,
) -> Result<CsrMatrix<f64>, DiscretizationError> {
    let cache = mesh.element_cache();
    let locals = (0..mesh.triangles.len())
        .into_par_iter()
        .map(|t| {
            let (sd, sa) = (diff_scale.get(mesh.regions[t]), adv_scale.get(mesh.regions[t]));
            if sd == 0.0 && sa == 0.0 {
                return Ok(None);
            }
            let g = cache.grads[t];
            let area = cache.area[t];
            let mut local = [0.0; 9];
            for (q, (_, w)) in quad_points(mesh, t).iter().zip(TRI_MIDPOINT) {
                let f = w * area;
                if sd != 0.0 {
                    let d = diffusion(q);
                    check_psd(&d, q.x)?;
                    for a in 0..3 {
                        for b in 0..3 {
                            let dg = [
                                d[(0, 0)] * g[b][0] + d[(0, 1)] * g[b][1],
                                d[(1, 0)] * g[b][0] + d[(1, 1)] * g[b][1],
                            ];
                            local[3 * a + b] += sd * f * (dg[0] * g[a][0] + dg[1] * g[a][1]);
                        }
                    }
                }
                if sa != 0.0 {
                    let v = velocity(q);
                    for a in 0..3 {
                        let vg = v[0] * g[a][0] + v[1] * g[a][1];
                        for b in 0..3 {
                            local[3 * a + b] -= sa * f * q.bary[b] * vg;
                        }
                    }
                }
            }
            Ok(Some(local))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scatter(mesh, locals))
}

/// Load vector `Σ scale(region) ∫ f φᵢ` with the edge-midpoint rule.
pub fn assemble_load(mesh: &Mesh, f: ScalarField, scale: RegionScale) -> Vec<f64> {
    let cache = mesh.element_cache();
    let locals: Vec<Option<[f64; 3]>> = (0..mesh.triangles.len())
        .into_par_iter()
        .map(|t| {
            let s = scale.get(mesh.regions[t]);
            if s == 0.0 {
                return None;
            }
            let mut local = [0.0; 3];
            for (q, (_, w)) in quad_points(mesh, t).iter().zip(TRI_MIDPOINT) {
                let v = s * w * cache.area[t] * f(q);
                for a in 0..3 {
                    local[a] += v * q.bary[a];
                }
            }
            Some(local)
        })
        .collect();
    let mut out = vec![0.0; mesh.n_dofs()];
    for (tri, local) in mesh.triangles.iter().zip(locals) {
        if let Some(local) = local {
            for a in 0..3 {
                out[tri[a]] += local[a];
            }
        }
    }
    out
}

fn tagged_facets(mesh: &Mesh, tag: FacetTag) -> Result<Vec<usize>, DiscretizationError> {
    let ids: Vec<usize> = (0..mesh.facets.len()).filter(|&i| mesh.facets[i].tag == tag).collect();
    if ids.is_empty() {
        return Err(DiscretizationError::UnknownTag(format!("{tag} (no such facets in mesh)")));
    }
    Ok(ids)
}

fn facet_points(mesh: &Mesh, i: usize) -> ([FacetPoint; 2], f64) {
    let f = &mesh.facets[i];
    let a = mesh.vertices[f.v[0]];
    let b = mesh.vertices[f.v[1]];
    let normal = mesh.facet_normal(f);
    let len = mesh.facet_length(f);
    let pts = GAUSS2.map(|(s, _)| FacetPoint {
        x: [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])],
        normal,
        facet: i,
        owner: f.owner,
        vertices: f.v,
        lambda: [1.0 - s, s],
    });
    (pts, len)
}

/// `∫_Γ w φᵢφⱼ` over the facets carrying `tag`, two-point Gauss per edge.
pub fn assemble_boundary_mass(
    mesh: &Mesh,
    tag: FacetTag,
    weight: BoundaryField,
) -> Result<CsrMatrix<f64>, DiscretizationError> {
    let cache = mesh.element_cache();
    let ids = tagged_facets(mesh, tag)?;
    let mut values = vec![0.0; cache.pattern.nnz()];
    let offsets = cache.pattern.major_offsets();
    let cols = cache.pattern.minor_indices();
    let entry = |r: usize, c: usize| offsets[r] + cols[offsets[r]..offsets[r + 1]].binary_search(&c).unwrap();
    for i in ids {
        let (pts, len) = facet_points(mesh, i);
        for (p, (_, w)) in pts.iter().zip(GAUSS2) {
            let c = weight(p) * w * len;
            for a in 0..2 {
                for b in 0..2 {
                    values[entry(p.vertices[a], p.vertices[b])] += c * p.lambda[a] * p.lambda[b];
                }
            }
        }
    }
    Ok(CsrMatrix::try_from_pattern_and_values(cache.pattern.clone(), values).expect("sized"))
}

/// `∫_Γ g φᵢ` over the facets carrying `tag`, two-point Gauss per edge.
pub fn assemble_boundary_load(
    mesh: &Mesh,
    tag: FacetTag,
    g: BoundaryField,
) -> Result<Vec<f64>, DiscretizationError> {
    let ids = tagged_facets(mesh, tag)?;
    let mut out = vec![0.0; mesh.n_dofs()];
    for i in ids {
        let (pts, len) = facet_points(mesh, i);
        for (p, (_, w)) in pts.iter().zip(GAUSS2) {
            let c = g(p) * w * len;
            out[p.vertices[0]] += c * p.lambda[0];
            out[p.vertices[1]] += c * p.lambda[1];
        }
    }
    Ok(out)
}

pub enum BoundaryMode<'a> {
    Mass,
    Load(BoundaryField<'a>),
}

#[derive(Debug, Clone)]
pub enum BoundaryTerm {
    Matrix(CsrMatrix<f64>),
    Vector(Vec<f64>),
}

/// Boundary assembly addressed by tag name, as used by configuration-driven callers.
pub fn assemble_boundary(
    mesh: &Mesh,
    tag: &str,
    weight: BoundaryField,
    mode: BoundaryMode,
) -> Result<BoundaryTerm, DiscretizationError> {
    let tag: FacetTag = tag.parse()?;
    match mode {
        BoundaryMode::Mass => assemble_boundary_mass(mesh, tag, weight).map(BoundaryTerm::Matrix),
        BoundaryMode::Load(g) => {
            assemble_boundary_load(mesh, tag, &|p: &FacetPoint| weight(p) * g(p)).map(BoundaryTerm::Vector)
        }
    }
}

/// P1 value of `u` at a triangle quadrature point.
pub fn eval_at(mesh: &Mesh, u: &[f64], q: &QuadPoint) -> f64 {
    let tri = mesh.triangles[q.triangle];
    q.bary[0] * u[tri[0]] + q.bary[1] * u[tri[1]] + q.bary[2] * u[tri[2]]
}

/// P1 value of `u` at a boundary quadrature point.
pub fn eval_on_facet(u: &[f64], p: &FacetPoint) -> f64 {
    p.lambda[0] * u[p.vertices[0]] + p.lambda[1] * u[p.vertices[1]]
}

/// `vᵀ A w`.
pub fn bilinear(a: &CsrMatrix<f64>, v: &[f64], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, row) in a.row_iter().enumerate() {
        let mut r = 0.0;
        for (j, x) in row.col_indices().iter().zip(row.values()) {
            r += x * w[*j];
        }
        s += v[i] * r;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::mesh::{mesh_micro, mesh_unit_square};
    use crate::geometry::{build_reference_geometry, tile_layer, ChannelSpec};

    #[test]
    fn unit_square_mass_partition_of_unity() {
        let m = mesh_unit_square(1).unwrap();
        let mass = assemble_weighted_mass(&m, &|_| 1.0, RegionScale::uniform(1.0)).unwrap();
        let total: f64 = mass.values().iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_weight_is_rejected() {
        let m = mesh_unit_square(2).unwrap();
        let r = assemble_weighted_mass(&m, &|q| q.x[0] - 0.5, RegionScale::uniform(1.0));
        assert!(matches!(r, Err(DiscretizationError::NonpositiveWeight { .. })));
    }

    #[test]
    fn layer_scaled_mass_measures_domain() {
        let g = build_reference_geometry(ChannelSpec::straight(0.5, 0.5), 1.0).unwrap();
        let eps = 0.25;
        let micro = mesh_micro(&g, &tile_layer(&g, eps).unwrap(), 4).unwrap();
        let m = assemble_weighted_mass(&micro.mesh, &|_| 1.0, RegionScale::bulk_layer(1.0, 1.0 / eps)).unwrap();
        let one = vec![1.0; micro.mesh.n_dofs()];
        let v = bilinear(&m, &one, &one);
        assert!((v - (2.0 * (1.0 - eps) + 1.0)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn harmonic_linear_has_zero_interior_residual() {
        let m = mesh_unit_square(4).unwrap();
        let k = assemble_operator(&m, &|_| Mat2::identity(), &|_| [0.0; 2], RegionScale::uniform(1.0), RegionScale::uniform(0.0))
            .unwrap();
        let u: Vec<f64> = m.vertices.iter().map(|v| v[0]).collect();
        let r = &k * &nalgebra::DVector::from_vec(u);
        for (i, v) in m.vertices.iter().enumerate() {
            let interior = v[0] > 0.0 && v[0] < 1.0 && v[1] > 0.0 && v[1] < 1.0;
            if interior {
                assert!(r[i].abs() < 1e-13);
            }
        }
    }

    #[test]
    fn advection_annihilates_constants_columnwise() {
        let m = mesh_unit_square(3).unwrap();
        let a = assemble_operator(&m, &|_| Mat2::zeros(), &|_| [1.0, 0.0], RegionScale::uniform(1.0), RegionScale::uniform(1.0))
            .unwrap();
        let dense = nalgebra::DMatrix::from(&a);
        for j in 0..dense.ncols() {
            assert!(dense.column(j).sum().abs() < 1e-14);
        }
    }

    #[test]
    fn boundary_length_of_walls() {
        let g = build_reference_geometry(ChannelSpec::straight(0.5, 0.5), 1.0).unwrap();
        for eps in [0.25, 0.125] {
            let micro = mesh_micro(&g, &tile_layer(&g, eps).unwrap(), 4).unwrap();
            let b = assemble_boundary_mass(&micro.mesh, FacetTag::Wall, &|_| 1.0).unwrap();
            let one = vec![1.0; micro.mesh.n_dofs()];
            assert!((bilinear(&b, &one, &one) - 4.0).abs() < 1e-12);
            let z = assemble_boundary_mass(&micro.mesh, FacetTag::Wall, &|_| 0.0).unwrap();
            assert!(z.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bogus_tag() {
        let m = mesh_unit_square(1).unwrap();
        let r = assemble_boundary(&m, "bogus", &|_| 1.0, BoundaryMode::Mass);
        assert!(matches!(r, Err(DiscretizationError::UnknownTag(_))));
    }

    #[test]
    fn wall_normals_point_out_of_channel() {
        let g = build_reference_geometry(ChannelSpec::straight(0.5, 0.5), 1.0).unwrap();
        let micro = mesh_micro(&g, &tile_layer(&g, 0.5).unwrap(), 2).unwrap();
        for f in micro.mesh.facets.iter().filter(|f| f.tag == FacetTag::Wall) {
            let n = micro.mesh.facet_normal(f);
            let x = micro.mesh.vertices[f.v[0]];
            let (_, z) = (0, micro.to_cell(micro.scale.cell_of(x[0]), x));
            let side = if z[0] < 0.5 { -1.0 } else { 1.0 };
            assert!((n[0] - side).abs() < 1e-12 && n[1].abs() < 1e-12);
        }
        for f in micro.mesh.facets.iter().filter(|f| f.tag == FacetTag::InterfacePlus) {
            let n = micro.mesh.facet_normal(f);
            assert_eq!(micro.mesh.regions[f.owner], Region::Channel);
            assert!((n[1] - 1.0).abs() < 1e-12);
        }
    }
}
