//! Conforming triangular meshes with region and facet tags, and the structured builders for
//! the micro domain, the reference channel cell and the macroscopic bulk domains.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use nalgebra_sparse::pattern::SparsityPattern;

use super::DiscretizationError;
use crate::geometry::{ReferenceGeometry, Scale, TilingIndex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    BulkPlus,
    Channel,
    BulkMinus,
}

impl Region {
    pub fn name(&self) -> &'static str {
        match self {
            Region::BulkPlus => "bulk+",
            Region::Channel => "channel",
            Region::BulkMinus => "bulk-",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FacetTag {
    /// Outer boundary with homogeneous flux condition.
    Exterior,
    /// Lateral channel walls `N`.
    Wall,
    /// Top channel face `S+` (internal on the micro mesh).
    InterfacePlus,
    /// Bottom channel face `S−` (internal on the micro mesh).
    InterfaceMinus,
    /// The interface `Σ` of a macroscopic bulk mesh.
    Sigma,
}

impl FacetTag {
    pub fn name(&self) -> &'static str {
        match self {
            FacetTag::Exterior => "exterior",
            FacetTag::Wall => "N",
            FacetTag::InterfacePlus => "S+",
            FacetTag::InterfaceMinus => "S-",
            FacetTag::Sigma => "sigma",
        }
    }
}

impl fmt::Display for FacetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FacetTag {
    type Err = DiscretizationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exterior" => Ok(FacetTag::Exterior),
            "N" | "wall" => Ok(FacetTag::Wall),
            "S+" => Ok(FacetTag::InterfacePlus),
            "S-" => Ok(FacetTag::InterfaceMinus),
            "sigma" => Ok(FacetTag::Sigma),
            other => Err(DiscretizationError::UnknownTag(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Facet {
    pub v: [usize; 2],
    pub tag: FacetTag,
    /// Triangle whose outward normal orients the facet; the channel side for internal facets.
    pub owner: usize,
}

/// Per-triangle geometry and scatter indices, built once per mesh.
#[derive(Debug)]
pub struct ElementCache {
    pub pattern: SparsityPattern,
    /// Positions of the 3×3 local entries in the CSR value array, row major.
    pub entry_index: Vec<[usize; 9]>,
    pub area: Vec<f64>,
    /// Gradients of the three barycentric basis functions.
    pub grads: Vec<[[f64; 2]; 3]>,
}

/// A P1 mesh; the degree of freedom of a vertex is its index.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub regions: Vec<Region>,
    pub facets: Vec<Facet>,
    cache: OnceLock<Arc<ElementCache>>,
}

pub fn signed_area(p: [[f64; 2]; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

impl Mesh {
    /// Builds and audits a mesh from `(v0, v1, tag)` facet triples.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        regions: Vec<Region>,
        facets: Vec<([usize; 2], FacetTag)>,
    ) -> Result<Mesh, DiscretizationError> {
        let fail = |s: String| Err(DiscretizationError::MeshFailure(s));
        if regions.len() != triangles.len() {
            return fail("one region tag per triangle required".into());
        }
        let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return fail(format!("triangle {t} references a missing vertex"));
            }
            let p = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
            let a = signed_area(p);
            if !(a > 0.0) {
                return fail(format!("triangle {t} has nonpositive area {a}"));
            }
            for e in 0..3 {
                let (u, v) = (tri[e], tri[(e + 1) % 3]);
                edges.entry((u.min(v), u.max(v))).or_default().push(t);
            }
        }
        if edges.values().any(|ts| ts.len() > 2) {
            return fail("an edge is shared by more than two triangles".into());
        }
        let mut tagged = HashMap::new();
        let mut out = Vec::with_capacity(facets.len());
        for (v, tag) in facets {
            let key = (v[0].min(v[1]), v[0].max(v[1]));
            let Some(ts) = edges.get(&key) else {
                return fail(format!("facet {v:?} is not a mesh edge"));
            };
            let owner = *ts
                .iter()
                .find(|&&t| regions[t] == Region::Channel)
                .unwrap_or(&ts[0]);
            if tagged.insert(key, tag).is_some() {
                return fail(format!("facet {v:?} tagged twice"));
            }
            out.push(Facet { v, tag, owner });
        }
        for (key, ts) in &edges {
            if ts.len() == 1 && !tagged.contains_key(key) {
                return fail(format!("boundary edge {key:?} carries no tag"));
            }
        }
        Ok(Mesh { vertices, triangles, regions, facets: out, cache: OnceLock::new() })
    }

    pub fn n_dofs(&self) -> usize {
        self.vertices.len()
    }

    pub fn dof_of_vertex(&self, v: usize) -> usize {
        v
    }

    pub fn corners(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [self.vertices[tri[0]], self.vertices[tri[1]], self.vertices[tri[2]]]
    }

    pub fn area(&self, t: usize) -> f64 {
        signed_area(self.corners(t))
    }

    pub fn has_tag(&self, tag: FacetTag) -> bool {
        self.facets.iter().any(|f| f.tag == tag)
    }

    /// Outward unit normal of a facet with respect to its owner triangle.
    pub fn facet_normal(&self, f: &Facet) -> [f64; 2] {
        let a = self.vertices[f.v[0]];
        let b = self.vertices[f.v[1]];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        let mut n = [dy / len, -dx / len];
        let tri = self.triangles[f.owner];
        let c = tri.iter().find(|&&v| v != f.v[0] && v != f.v[1]).copied().unwrap_or(tri[0]);
        let p = self.vertices[c];
        if (p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1] > 0.0 {
            n = [-n[0], -n[1]];
        }
        n
    }

    pub fn facet_length(&self, f: &Facet) -> f64 {
        let a = self.vertices[f.v[0]];
        let b = self.vertices[f.v[1]];
        (b[0] - a[0]).hypot(b[1] - a[1])
    }

    pub fn region_area(&self, region: Region) -> f64 {
        (0..self.triangles.len()).filter(|&t| self.regions[t] == region).map(|t| self.area(t)).sum()
    }

    pub fn element_cache(&self) -> Arc<ElementCache> {
        self.cache.get_or_init(|| Arc::new(self.build_cache())).clone()
    }

    fn build_cache(&self) -> ElementCache {
        let n = self.vertices.len();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for tri in &self.triangles {
            for &a in tri {
                for &b in tri {
                    rows[a].push(b);
                }
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            cols.extend_from_slice(r);
            offsets.push(cols.len());
        }
        let pattern = SparsityPattern::try_from_offsets_and_indices(n, n, offsets.clone(), cols.clone())
            .expect("sorted unique column indices form a valid pattern");
        let find = |r: usize, c: usize| -> usize {
            let lane = &cols[offsets[r]..offsets[r + 1]];
            offsets[r] + lane.binary_search(&c).expect("entry present by construction")
        };
        let mut entry_index = Vec::with_capacity(self.triangles.len());
        let mut area = Vec::with_capacity(self.triangles.len());
        let mut grads = Vec::with_capacity(self.triangles.len());
        for (t, tri) in self.triangles.iter().enumerate() {
            let mut idx = [0usize; 9];
            for a in 0..3 {
                for b in 0..3 {
                    idx[3 * a + b] = find(tri[a], tri[b]);
                }
            }
            entry_index.push(idx);
            let p = self.corners(t);
            let a2 = 2.0 * signed_area(p);
            area.push(0.5 * a2);
            let mut g = [[0.0; 2]; 3];
            for i in 0..3 {
                let (j, k) = ((i + 1) % 3, (i + 2) % 3);
                g[i] = [(p[j][1] - p[k][1]) / a2, (p[k][0] - p[j][0]) / a2];
            }
            grads.push(g);
        }
        ElementCache { pattern, entry_index, area, grads }
    }

    /// Plain-text listing: `v x y`, `t i j k region`, `f i j tag`.
    pub fn export<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {}", v[0], v[1])?;
        }
        for (t, r) in self.triangles.iter().zip(&self.regions) {
            writeln!(w, "t {} {} {} {}", t[0], t[1], t[2], r.name())?;
        }
        for f in &self.facets {
            writeln!(w, "f {} {} {}", f.v[0], f.v[1], f.tag)?;
        }
        Ok(())
    }

    pub fn gradient(&self, t: usize, u: &[f64]) -> [f64; 2] {
        let c = self.element_cache();
        let g = c.grads[t];
        let tri = self.triangles[t];
        let mut out = [0.0; 2];
        for a in 0..3 {
            out[0] += u[tri[a]] * g[a][0];
            out[1] += u[tri[a]] * g[a][1];
        }
        out
    }
}

/// Grading exponent `β` for which the exponential map has first spacing
/// `ratio · (b − a)/n`; `0` means uniform.
pub fn grading_beta(ratio: f64) -> f64 {
    if ratio >= 1.0 {
        return 0.0;
    }
    // β/(e^β − 1) is decreasing from 1 to 0
    let (mut lo, mut hi) = (0.0f64, 200.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = mid / mid.exp_m1();
        if v > ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `n + 1` nodes on `[a, b]` under `ξ ↦ (e^{βξ} − 1)/(e^β − 1)`, clustered near `a`.
pub fn graded_nodes(a: f64, b: f64, n: usize, beta: f64) -> Vec<f64> {
    (0..=n)
        .map(|j| {
            if j == 0 {
                return a;
            }
            if j == n {
                return b;
            }
            let xi = j as f64 / n as f64;
            let g = if beta.abs() < 1e-12 { xi } else { (beta * xi).exp_m1() / beta.exp_m1() };
            a + (b - a) * g
        })
        .collect()
}

/// Tensor-product mesh of the rectangle `xs × ys` with per-row diagonals.
/// `flip` mirrors the diagonal direction; vertex ids may be supplied for the first row.
struct TensorBuilder<'a> {
    vertices: &'a mut Vec<[f64; 2]>,
    triangles: &'a mut Vec<[usize; 3]>,
    regions: &'a mut Vec<Region>,
}

impl TensorBuilder<'_> {
    fn grid(
        &mut self,
        xs: &[f64],
        ys: &[f64],
        region: Region,
        flip: bool,
        shared_row: Option<(usize, &[Option<usize>])>,
    ) -> Vec<Vec<usize>> {
        let mut ids = vec![vec![0usize; xs.len()]; ys.len()];
        for (j, &y) in ys.iter().enumerate() {
            for (i, &x) in xs.iter().enumerate() {
                let shared = shared_row.and_then(|(row, s)| if row == j { s[i] } else { None });
                ids[j][i] = match shared {
                    Some(v) => v,
                    None => {
                        self.vertices.push([x, y]);
                        self.vertices.len() - 1
                    }
                };
            }
        }
        for j in 0..ys.len() - 1 {
            for i in 0..xs.len() - 1 {
                let (a, b, c, d) = (ids[j][i], ids[j][i + 1], ids[j + 1][i + 1], ids[j + 1][i]);
                if flip {
                    self.triangles.push([a, b, d]);
                    self.triangles.push([b, c, d]);
                } else {
                    self.triangles.push([a, b, c]);
                    self.triangles.push([a, c, d]);
                }
                self.regions.push(region);
                self.regions.push(region);
            }
        }
        ids
    }
}

/// Layout of the structured channel grid shared by the cell mesh and every micro cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelGrid {
    pub nx: usize,
    pub nz: usize,
}

impl ChannelGrid {
    pub fn new(r: usize) -> Self {
        ChannelGrid { nx: r, nz: r }
    }

    pub fn vertex(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn z2(&self, j: usize) -> f64 {
        -1.0 + 2.0 * j as f64 / self.nz as f64
    }

    pub fn point(&self, geom: &ReferenceGeometry, i: usize, j: usize) -> [f64; 2] {
        let z2 = self.z2(j);
        let ch = &geom.channel;
        [ch.left(z2) + i as f64 * ch.width(z2) / self.nx as f64, z2]
    }

    /// Local triangles in a fixed order; the diagonals mirror about `z₂ = 0`.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(2 * self.nx * self.nz);
        for j in 0..self.nz {
            let upper = 2 * j >= self.nz;
            for i in 0..self.nx {
                let (a, b, c, d) =
                    (self.vertex(i, j), self.vertex(i + 1, j), self.vertex(i + 1, j + 1), self.vertex(i, j + 1));
                if upper {
                    out.push([a, b, c]);
                    out.push([a, c, d]);
                } else {
                    out.push([a, b, d]);
                    out.push([b, c, d]);
                }
            }
        }
        out
    }

    pub fn n_vertices(&self) -> usize {
        (self.nx + 1) * (self.nz + 1)
    }
}

/// Mesh of the reference channel `Z*` with facets `N`, `S+`, `S−`.
pub fn mesh_cell(geom: &ReferenceGeometry, r: usize) -> Result<Mesh, DiscretizationError> {
    if r < 2 {
        return Err(DiscretizationError::MeshFailure(format!("resolution r = {r} must be at least 2")));
    }
    let g = ChannelGrid::new(r);
    let mut vertices = Vec::with_capacity(g.n_vertices());
    for j in 0..=g.nz {
        for i in 0..=g.nx {
            vertices.push(g.point(geom, i, j));
        }
    }
    let triangles = g.triangles();
    let regions = vec![Region::Channel; triangles.len()];
    Mesh::new(vertices, triangles, regions, channel_facets(&g, &|v| v))
}

fn channel_facets(g: &ChannelGrid, map: &dyn Fn(usize) -> usize) -> Vec<([usize; 2], FacetTag)> {
    let mut f = Vec::new();
    for j in 0..g.nz {
        f.push(([map(g.vertex(0, j + 1)), map(g.vertex(0, j))], FacetTag::Wall));
        f.push(([map(g.vertex(g.nx, j)), map(g.vertex(g.nx, j + 1))], FacetTag::Wall));
    }
    for i in 0..g.nx {
        f.push(([map(g.vertex(i, 0)), map(g.vertex(i + 1, 0))], FacetTag::InterfaceMinus));
        f.push(([map(g.vertex(i + 1, g.nz)), map(g.vertex(i, g.nz))], FacetTag::InterfacePlus));
    }
    f
}

/// The micro mesh together with the bookkeeping that links it to the cell mesh.
#[derive(Debug, Clone)]
pub struct MicroMesh {
    pub mesh: Mesh,
    pub scale: Scale,
    pub resolution: usize,
    pub grid: ChannelGrid,
    pub cell_mesh: Mesh,
    /// `channel_vertices[k][c]`: micro vertex of cell-mesh vertex `c` in cell `k`.
    pub channel_vertices: Vec<Vec<usize>>,
    /// `channel_triangles[k][c]`: micro triangle of cell-mesh triangle `c` in cell `k`.
    pub channel_triangles: Vec<Vec<usize>>,
    /// Cell index of every channel triangle.
    pub triangle_cell: Vec<Option<usize>>,
}

impl MicroMesh {
    pub fn eps(&self) -> f64 {
        self.scale.eps()
    }

    /// Cell coordinates of a micro point lying in cell `k`.
    pub fn to_cell(&self, k: usize, x: [f64; 2]) -> [f64; 2] {
        let e = self.eps();
        [x[0] / e - k as f64, x[1] / e]
    }
}

/// Vertical layout of the bulk rows: `6r` rows, graded towards the layer when the layer
/// element height `2ε/r` is finer than a uniform row.
pub fn bulk_rows(eps: f64, h: f64, r: usize) -> Vec<f64> {
    let n = 6 * r;
    let ratio = 12.0 * eps / (h - eps);
    graded_nodes(eps, h, n, grading_beta(ratio))
}

fn segment_count(length: f64, spacing: f64) -> usize {
    ((length / spacing).round() as usize).max(1)
}

/// Micro mesh of `Ω_ε⁺ ∪ channels ∪ Ω_ε⁻` with `r` segments per channel wall and across.
pub fn mesh_micro(
    geom: &ReferenceGeometry,
    tiling: &TilingIndex,
    r: usize,
) -> Result<MicroMesh, DiscretizationError> {
    if r < 2 {
        return Err(DiscretizationError::MeshFailure(format!("resolution r = {r} must be at least 2")));
    }
    let scale = tiling.scale;
    let eps = scale.eps();
    let h = geom.half_height;
    if eps >= h {
        return Err(DiscretizationError::MeshFailure("ε must be smaller than H".into()));
    }
    let cell_mesh = mesh_cell(geom, r)?;
    let grid = ChannelGrid::new(r);
    let ch = &geom.channel;

    let mut vertices: Vec<[f64; 2]> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut regions: Vec<Region> = Vec::new();
    let mut facets: Vec<([usize; 2], FacetTag)> = Vec::new();
    let mut channel_vertices = Vec::with_capacity(scale.cells());
    let mut channel_triangles = Vec::with_capacity(scale.cells());
    let local_tris = grid.triangles();
    for k in 0..scale.cells() {
        let base = vertices.len();
        for j in 0..=grid.nz {
            for i in 0..=grid.nx {
                let z = grid.point(geom, i, j);
                vertices.push([eps * (k as f64 + z[0]), eps * z[1]]);
            }
        }
        let tbase = triangles.len();
        for t in &local_tris {
            triangles.push([base + t[0], base + t[1], base + t[2]]);
            regions.push(Region::Channel);
        }
        channel_vertices.push((0..grid.n_vertices()).map(|v| base + v).collect::<Vec<_>>());
        channel_triangles.push((0..local_tris.len()).map(|t| tbase + t).collect::<Vec<_>>());
        for (v, tag) in channel_facets(&grid, &|v| base + v) {
            if tag == FacetTag::Wall {
                facets.push((v, tag));
            }
        }
    }
    let n_channel_tris = triangles.len();

    // Abscissae of a bulk face row at z₂ = side, with links to channel face vertices.
    let face_row = |side: f64, j: usize| -> (Vec<f64>, Vec<Option<usize>>) {
        let (l, w) = (ch.left(side), ch.width(side));
        let spacing = w / grid.nx as f64;
        let nl = segment_count(l, spacing);
        let nr = segment_count(1.0 - l - w, spacing);
        let mut xs = Vec::new();
        let mut links = Vec::new();
        for k in 0..scale.cells() {
            let kf = k as f64;
            for s in 0..nl {
                xs.push(eps * (kf + l * s as f64 / nl as f64));
                links.push(None);
            }
            for i in 0..=grid.nx {
                let z = grid.point(geom, i, j);
                xs.push(eps * (kf + z[0]));
                links.push(Some(channel_vertices[k][grid.vertex(i, j)]));
            }
            for s in 1..nr {
                xs.push(eps * (kf + l + w + (1.0 - l - w) * s as f64 / nr as f64));
                links.push(None);
            }
        }
        xs.push(1.0);
        links.push(None);
        (xs, links)
    };

    let rows = bulk_rows(eps, h, r);
    let mut builder = TensorBuilder { vertices: &mut vertices, triangles: &mut triangles, regions: &mut regions };

    let (xs_top, links_top) = face_row(1.0, grid.nz);
    let ids_top = builder.grid(&xs_top, &rows, Region::BulkPlus, false, Some((0, &links_top)));
    let rows_minus: Vec<f64> = rows.iter().rev().map(|y| -y).collect();
    let (xs_bot, links_bot) = face_row(-1.0, 0);
    let last = rows_minus.len() - 1;
    let ids_bot = builder.grid(&xs_bot, &rows_minus, Region::BulkMinus, true, Some((last, &links_bot)));

    let mut bulk_facets = |ids: &Vec<Vec<usize>>, links: &Vec<Option<usize>>, face: usize, far: usize, tag: FacetTag| {
        let nx = ids[0].len();
        for i in 0..nx - 1 {
            let interface = links[i].is_some() && links[i + 1].is_some();
            facets.push(([ids[face][i], ids[face][i + 1]], if interface { tag } else { FacetTag::Exterior }));
            facets.push(([ids[far][i], ids[far][i + 1]], FacetTag::Exterior));
        }
        for j in 0..ids.len() - 1 {
            facets.push(([ids[j][0], ids[j + 1][0]], FacetTag::Exterior));
            facets.push(([ids[j][nx - 1], ids[j + 1][nx - 1]], FacetTag::Exterior));
        }
    };
    let top_far = ids_top.len() - 1;
    bulk_facets(&ids_top, &links_top, 0, top_far, FacetTag::InterfacePlus);
    bulk_facets(&ids_bot, &links_bot, last, 0, FacetTag::InterfaceMinus);

    let mut triangle_cell = vec![None; triangles.len()];
    for (k, ts) in channel_triangles.iter().enumerate() {
        for &t in ts {
            triangle_cell[t] = Some(k);
        }
    }
    debug_assert!(triangle_cell[..n_channel_tris].iter().all(|c| c.is_some()));
    let mesh = Mesh::new(vertices, triangles, regions, facets)?;
    Ok(MicroMesh {
        mesh,
        scale,
        resolution: r,
        grid,
        cell_mesh,
        channel_vertices,
        channel_triangles,
        triangle_cell,
    })
}

/// Macroscopic bulk mesh of `(0,1) × (0,H)` (`upper`) or its mirror image `(0,1) × (−H,0)`,
/// with the `Σ` facets tagged.
pub fn mesh_bulk(h: f64, nx: usize, ny: usize, upper: bool) -> Result<Mesh, DiscretizationError> {
    if nx < 1 || ny < 1 {
        return Err(DiscretizationError::MeshFailure("bulk mesh needs at least one cell".into()));
    }
    let xs: Vec<f64> = (0..=nx).map(|i| i as f64 / nx as f64).collect();
    let ys: Vec<f64> = if upper {
        (0..=ny).map(|j| h * j as f64 / ny as f64).collect()
    } else {
        (0..=ny).map(|j| -h + h * j as f64 / ny as f64).collect()
    };
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut regions = Vec::new();
    let region = if upper { Region::BulkPlus } else { Region::BulkMinus };
    let ids = TensorBuilder { vertices: &mut vertices, triangles: &mut triangles, regions: &mut regions }
        .grid(&xs, &ys, region, !upper, None);
    let (sigma, far) = if upper { (0, ny) } else { (ny, 0) };
    let mut facets = Vec::new();
    for i in 0..nx {
        facets.push(([ids[sigma][i], ids[sigma][i + 1]], FacetTag::Sigma));
        facets.push(([ids[far][i], ids[far][i + 1]], FacetTag::Exterior));
    }
    for j in 0..ny {
        facets.push(([ids[j][0], ids[j + 1][0]], FacetTag::Exterior));
        facets.push(([ids[j][nx], ids[j + 1][nx]], FacetTag::Exterior));
    }
    Mesh::new(vertices, triangles, regions, facets)
}

/// Structured mesh of the unit square split into `2n²` triangles, all facets exterior.
pub fn mesh_unit_square(n: usize) -> Result<Mesh, DiscretizationError> {
    let nodes: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut regions = Vec::new();
    let ids = TensorBuilder { vertices: &mut vertices, triangles: &mut triangles, regions: &mut regions }
        .grid(&nodes, &nodes, Region::BulkPlus, false, None);
    let mut facets = Vec::new();
    for i in 0..n {
        facets.push(([ids[0][i], ids[0][i + 1]], FacetTag::Exterior));
        facets.push(([ids[n][i], ids[n][i + 1]], FacetTag::Exterior));
        facets.push(([ids[i][0], ids[i + 1][0]], FacetTag::Exterior));
        facets.push(([ids[i][n], ids[i + 1][n]], FacetTag::Exterior));
    }
    Mesh::new(vertices, triangles, regions, facets)
}

/// Bucket grid for locating points in a mesh.
#[derive(Debug, Clone)]
pub struct PointLocator {
    lo: [f64; 2],
    cell: [f64; 2],
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl PointLocator {
    pub fn new(mesh: &Mesh) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &mesh.vertices {
            for c in 0..2 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        let side = (mesh.triangles.len() as f64).sqrt().ceil().max(1.0) as usize;
        let dims = [side, side];
        let cell = [((hi[0] - lo[0]) / side as f64).max(1e-300), ((hi[1] - lo[1]) / side as f64).max(1e-300)];
        let mut buckets = vec![Vec::new(); side * side];
        for t in 0..mesh.triangles.len() {
            let p = mesh.corners(t);
            let (mut a, mut b) = ([usize::MAX; 2], [0usize; 2]);
            for q in p {
                for c in 0..2 {
                    let i = (((q[c] - lo[c]) / cell[c]).floor().max(0.0) as usize).min(dims[c] - 1);
                    a[c] = a[c].min(i);
                    b[c] = b[c].max(i);
                }
            }
            for i in a[0]..=b[0] {
                for j in a[1]..=b[1] {
                    buckets[j * dims[0] + i].push(t);
                }
            }
        }
        PointLocator { lo, cell, dims, buckets }
    }

    /// Triangle containing `x` and its barycentric coordinates, within tolerance `tol`.
    pub fn locate(&self, mesh: &Mesh, x: [f64; 2], tol: f64) -> Option<(usize, [f64; 3])> {
        let mut idx = [0usize; 2];
        for c in 0..2 {
            let f = (x[c] - self.lo[c]) / self.cell[c];
            if f < -1.0 || f > self.dims[c] as f64 + 1.0 {
                return None;
            }
            idx[c] = (f.floor().max(0.0) as usize).min(self.dims[c] - 1);
        }
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &t in &self.buckets[idx[1] * self.dims[0] + idx[0]] {
            let l = barycentric(mesh.corners(t), x);
            let m = l[0].min(l[1]).min(l[2]);
            if m >= -tol && best.map_or(true, |b| m > b.2) {
                best = Some((t, l, m));
            }
        }
        best.map(|(t, l, _)| (t, l))
    }

    /// P1 value of `u` at `x`.
    pub fn eval(&self, mesh: &Mesh, u: &[f64], x: [f64; 2], tol: f64) -> Option<f64> {
        self.locate(mesh, x, tol).map(|(t, l)| {
            let tri = mesh.triangles[t];
            l[0] * u[tri[0]] + l[1] * u[tri[1]] + l[2] * u[tri[2]]
        })
    }
}

pub fn barycentric(p: [[f64; 2]; 3], x: [f64; 2]) -> [f64; 3] {
    let a = signed_area(p);
    let l1 = signed_area([p[0], x, p[2]]) / a;
    let l2 = signed_area([p[0], p[1], x]) / a;
    [1.0 - l1 - l2, l1, l2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_reference_geometry, tile_layer, ChannelSpec};

    fn geom() -> ReferenceGeometry {
        build_reference_geometry(ChannelSpec::straight(0.5, 0.5), 1.0).unwrap()
    }

    #[test]
    fn micro_mesh_half_scale() {
        let g = geom();
        let t = tile_layer(&g, 0.5).unwrap();
        let m = mesh_micro(&g, &t, 2).unwrap();
        assert!((m.mesh.region_area(Region::Channel) - 0.5).abs() < 1e-12);
        let total: f64 = (0..m.mesh.triangles.len()).map(|t| m.mesh.area(t)).sum();
        assert!((total - (2.0 - 1.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn interface_vertices_are_shared() {
        let g = geom();
        let t = tile_layer(&g, 0.25).unwrap();
        let m = mesh_micro(&g, &t, 4).unwrap();
        let mesh = &m.mesh;
        let mut on_face = std::collections::BTreeSet::new();
        for f in mesh.facets.iter().filter(|f| f.tag == FacetTag::InterfacePlus) {
            on_face.insert(f.v[0]);
            on_face.insert(f.v[1]);
        }
        assert_eq!(on_face.len(), 4 * 5);
        for v in on_face {
            let regs: Vec<Region> = mesh
                .triangles
                .iter()
                .zip(&mesh.regions)
                .filter(|(t, _)| t.contains(&v))
                .map(|(_, r)| *r)
                .collect();
            assert!(regs.contains(&Region::BulkPlus));
            assert!(regs.contains(&Region::Channel));
        }
    }

    #[test]
    fn resolution_one_fails() {
        let g = geom();
        let t = tile_layer(&g, 0.25).unwrap();
        assert!(matches!(mesh_micro(&g, &t, 1), Err(DiscretizationError::MeshFailure(_))));
    }

    #[test]
    fn unknown_tag() {
        assert!(matches!("bogus".parse::<FacetTag>(), Err(DiscretizationError::UnknownTag(_))));
        assert_eq!("N".parse::<FacetTag>().unwrap(), FacetTag::Wall);
    }

    #[test]
    fn micro_mesh_is_mirror_symmetric() {
        let g = geom();
        let t = tile_layer(&g, 0.25).unwrap();
        let m = mesh_micro(&g, &t, 4).unwrap();
        let loc = PointLocator::new(&m.mesh);
        let mut keys: Vec<(i64, i64)> =
            m.mesh.vertices.iter().map(|v| ((v[0] * 1e9).round() as i64, (v[1] * 1e9).round() as i64)).collect();
        keys.sort();
        for v in &m.mesh.vertices {
            let key = ((v[0] * 1e9).round() as i64, (-v[1] * 1e9).round() as i64);
            assert!(keys.binary_search(&key).is_ok());
        }
        // triangle centroids mirror onto centroids
        for tri in 0..m.mesh.triangles.len() {
            let p = m.mesh.corners(tri);
            let c = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, -(p[0][1] + p[1][1] + p[2][1]) / 3.0];
            let (t2, l) = loc.locate(&m.mesh, c, 1e-12).unwrap();
            assert!(l.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-9), "{tri} -> {t2}");
        }
    }

    #[test]
    fn graded_nodes_nest_under_refinement() {
        let beta = grading_beta(0.4);
        let a = graded_nodes(0.1, 1.0, 12, beta);
        let b = graded_nodes(0.1, 1.0, 24, beta);
        for (i, x) in a.iter().enumerate() {
            assert!((b[2 * i] - x).abs() < 1e-15);
        }
        let first = a[1] - a[0];
        assert!(first < 0.9 / 12.0);
    }

    #[test]
    fn locator_finds_vertices_and_interpolates_linears() {
        let m = mesh_bulk(1.0, 8, 5, false).unwrap();
        let loc = PointLocator::new(&m);
        let u: Vec<f64> = m.vertices.iter().map(|v| 2.0 * v[0] - v[1]).collect();
        for x in [[0.3, -0.2], [0.0, 0.0], [1.0, -1.0], [0.77, -0.51]] {
            let v = loc.eval(&m, &u, x, 1e-12).unwrap();
            assert!((v - (2.0 * x[0] - x[1])).abs() < 1e-13);
        }
        assert!(loc.eval(&m, &u, [0.5, 0.5], 1e-12).is_none());
    }

    #[test]
    fn export_format() {
        let m = mesh_unit_square(1).unwrap();
        let mut buf = Vec::new();
        m.export(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 4);
        assert_eq!(s.lines().filter(|l| l.starts_with("t ")).count(), 2);
        assert_eq!(s.lines().filter(|l| l.starts_with("f ")).count(), 4);
        assert!(s.contains("t 0 1 3 bulk+"));
    }
}
