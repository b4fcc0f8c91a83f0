//! Reference cell, channel shape, ε-tiling of the layer and point classification.
//!
//! The cell is `Z = (0,1) × (−1,1)`. A channel is the set
//! `{ z : |z₁ − c| < w(z₂)/2 }` with flat top and bottom faces `S*±` at `z₂ = ±1`
//! and two lateral walls `N`. The macroscopic domain is `Ω = (0,1) × (−H,H)`;
//! the layer `(0,1) × (−ε,ε)` is tiled by `1/ε` scaled copies of the cell.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Tolerance used for boundary ties in [`classify_point`].
pub const GEOM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("channel shape violation: {0}")]
    ShapeViolation(String),
    #[error("invalid scale ε = {eps}: {reason}")]
    InvalidScale { eps: f64, reason: String },
    #[error("point ({0}, {1}) lies outside the closed domain")]
    OutOfDomain(f64, f64),
}

type WidthFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Channel width as a function of `z₂ ∈ [−1, 1]`.
#[derive(Clone)]
pub enum WidthProfile {
    Constant(f64),
    /// `w0 + slope·z₂`
    Linear { w0: f64, slope: f64 },
    /// `w0 + amp·cos(π z₂)`
    Cosine { w0: f64, amp: f64 },
    /// Arbitrary Lipschitz profile; its derivative is taken by central differences.
    Custom(WidthFn),
}

impl fmt::Debug for WidthProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WidthProfile::Constant(w) => write!(f, "Constant({w})"),
            WidthProfile::Linear { w0, slope } => write!(f, "Linear({w0}, {slope})"),
            WidthProfile::Cosine { w0, amp } => write!(f, "Cosine({w0}, {amp})"),
            WidthProfile::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl WidthProfile {
    pub fn value(&self, z2: f64) -> f64 {
        match self {
            WidthProfile::Constant(w) => *w,
            WidthProfile::Linear { w0, slope } => w0 + slope * z2,
            WidthProfile::Cosine { w0, amp } => w0 + amp * (std::f64::consts::PI * z2).cos(),
            WidthProfile::Custom(f) => f(z2),
        }
    }

    pub fn derivative(&self, z2: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            WidthProfile::Constant(_) => 0.0,
            WidthProfile::Linear { slope, .. } => *slope,
            WidthProfile::Cosine { amp, .. } => -amp * PI * (PI * z2).sin(),
            WidthProfile::Custom(f) => {
                let h = 1e-6;
                let a = (z2 - h).max(-1.0);
                let b = (z2 + h).min(1.0);
                (f(b) - f(a)) / (b - a)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChannelSpec {
    pub width: WidthProfile,
    pub center: f64,
    pub boundary_margin: f64,
}

impl ChannelSpec {
    pub fn straight(width: f64, center: f64) -> Self {
        ChannelSpec { width: WidthProfile::Constant(width), center, boundary_margin: 0.01 }
    }

    pub fn width(&self, z2: f64) -> f64 {
        self.width.value(z2)
    }

    /// Left wall abscissa `c − w(z₂)/2`.
    pub fn left(&self, z2: f64) -> f64 {
        self.center - 0.5 * self.width(z2)
    }

    /// Right wall abscissa `c + w(z₂)/2`.
    pub fn right(&self, z2: f64) -> f64 {
        self.center + 0.5 * self.width(z2)
    }

    pub fn contains(&self, z: [f64; 2]) -> bool {
        z[1] >= -1.0 && z[1] <= 1.0 && z[0] >= self.left(z[1]) && z[0] <= self.right(z[1])
    }

    /// Checks the shape invariants on a dense sample of `z₂`.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |s: String| Err(GeometryError::ShapeViolation(s));
        if !(self.center > 0.0 && self.center < 1.0) {
            return bad(format!("center {} not in (0,1)", self.center));
        }
        if !(self.boundary_margin > 0.0) {
            return bad(format!("boundary margin {} must be positive", self.boundary_margin));
        }
        let n = 2000;
        let mut lip: f64 = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for i in 0..=n {
            let z2 = -1.0 + 2.0 * i as f64 / n as f64;
            let w = self.width(z2);
            if !w.is_finite() || w <= 0.0 {
                return bad(format!("width {w} at z2 = {z2} is not positive"));
            }
            if w >= 1.0 {
                return bad(format!("width {w} at z2 = {z2} is not below 1"));
            }
            if self.left(z2) < self.boundary_margin - GEOM_TOL
                || self.right(z2) > 1.0 - self.boundary_margin + GEOM_TOL
            {
                return bad(format!(
                    "channel [{}, {}] at z2 = {z2} comes closer than {} to the cell boundary",
                    self.left(z2),
                    self.right(z2),
                    self.boundary_margin
                ));
            }
            if let Some((pz, pw)) = prev {
                lip = lip.max((w - pw).abs() / (z2 - pz));
            }
            prev = Some((z2, w));
        }
        if !lip.is_finite() {
            return bad("width is not Lipschitz on the sample".into());
        }
        Ok(())
    }
}

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    // Split first so that a smooth integrand cannot fool the initial error estimate.
    let pieces = 16;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = lo + h;
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = h / 6.0 * (fa + 4.0 * fm + fb);
            rec(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct ReferenceGeometry {
    pub channel: ChannelSpec,
    pub half_height: f64,
    /// `|Z*| = ∫ w dz₂`
    pub channel_area: f64,
    /// Total arclength of both lateral walls.
    pub wall_length: f64,
    /// `|S*+| = w(1)`
    pub face_top: f64,
    /// `|S*−| = w(−1)`
    pub face_bottom: f64,
}

pub fn build_reference_geometry(
    channel: ChannelSpec,
    half_height: f64,
) -> Result<ReferenceGeometry, GeometryError> {
    channel.validate()?;
    if !(half_height > 0.0) {
        return Err(GeometryError::ShapeViolation(format!(
            "half height {half_height} must be positive"
        )));
    }
    let channel_area = adaptive_simpson(&|z| channel.width(z), -1.0, 1.0, 1e-14);
    let wall_length = 2.0
        * adaptive_simpson(
            &|z| {
                let d = 0.5 * channel.width.derivative(z);
                (1.0 + d * d).sqrt()
            },
            -1.0,
            1.0,
            1e-14,
        );
    Ok(ReferenceGeometry {
        face_top: channel.width(1.0),
        face_bottom: channel.width(-1.0),
        channel,
        half_height,
        channel_area,
        wall_length,
    })
}

/// Admissible scale `ε = 1/n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scale {
    cells: usize,
}

impl Scale {
    pub fn from_cells(cells: usize) -> Self {
        assert!(cells > 0, "a scale needs at least one cell");
        Scale { cells }
    }

    pub fn from_eps(eps: f64) -> Result<Self, GeometryError> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(GeometryError::InvalidScale { eps, reason: "ε must lie in (0,1]".into() });
        }
        let inv = 1.0 / eps;
        let n = inv.round();
        if (inv - n).abs() > 1e-9 * n {
            return Err(GeometryError::InvalidScale {
                eps,
                reason: "1/ε must be an integer".into(),
            });
        }
        Ok(Scale { cells: n as usize })
    }

    pub fn eps(&self) -> f64 {
        1.0 / self.cells as f64
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Index of the cell containing abscissa `x1`; the right end belongs to the last cell.
    pub fn cell_of(&self, x1: f64) -> usize {
        let k = (x1 * self.cells as f64).floor();
        (k.max(0.0) as usize).min(self.cells - 1)
    }
}

#[derive(Clone, Debug)]
pub struct TilingIndex {
    pub scale: Scale,
    pub cells: Vec<usize>,
}

impl TilingIndex {
    pub fn eps(&self) -> f64 {
        self.scale.eps()
    }

    pub fn cell_to_global(&self, k: usize, z: [f64; 2]) -> [f64; 2] {
        let e = self.eps();
        [e * (k as f64 + z[0]), e * z[1]]
    }

    pub fn global_to_cell(&self, x: [f64; 2]) -> (usize, [f64; 2]) {
        let e = self.eps();
        let k = self.scale.cell_of(x[0]);
        (k, [x[0] / e - k as f64, x[1] / e])
    }

    pub fn channel_area(&self, geom: &ReferenceGeometry) -> f64 {
        let e = self.eps();
        self.cells.len() as f64 * e * e * geom.channel_area
    }
}

pub fn tile_layer(geom: &ReferenceGeometry, eps: f64) -> Result<TilingIndex, GeometryError> {
    let scale = Scale::from_eps(eps)?;
    if scale.eps() >= geom.half_height {
        return Err(GeometryError::InvalidScale {
            eps,
            reason: format!("ε must be smaller than H = {}", geom.half_height),
        });
    }
    Ok(TilingIndex { scale, cells: (0..scale.cells()).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointClass {
    BulkPlus,
    BulkMinus,
    Channel,
    Hole,
    InterfacePlus,
    InterfaceMinus,
    Wall,
    Exterior,
}

pub fn classify_point(
    geom: &ReferenceGeometry,
    scale: Scale,
    x: [f64; 2],
) -> Result<PointClass, GeometryError> {
    let tol = GEOM_TOL;
    let h = geom.half_height;
    let eps = scale.eps();
    let [x1, xn] = x;
    if !(x1 >= -tol && x1 <= 1.0 + tol && xn >= -h - tol && xn <= h + tol) {
        return Err(GeometryError::OutOfDomain(x1, xn));
    }
    let on_outer = x1.abs() <= tol || (x1 - 1.0).abs() <= tol || (xn.abs() - h).abs() <= tol;
    if xn > eps + tol || xn < -eps - tol {
        if on_outer {
            return Ok(PointClass::Exterior);
        }
        return Ok(if xn > 0.0 { PointClass::BulkPlus } else { PointClass::BulkMinus });
    }
    let k = scale.cell_of(x1);
    let z1 = x1 / eps - k as f64;
    let z2 = (xn / eps).clamp(-1.0, 1.0);
    let ch = &geom.channel;
    let (l, r) = (ch.left(z2), ch.right(z2));
    if ((z1 - l) * eps).abs() <= tol || ((z1 - r) * eps).abs() <= tol {
        return Ok(PointClass::Wall);
    }
    let top = (xn - eps).abs() <= tol;
    let bottom = (xn + eps).abs() <= tol;
    if z1 > l && z1 < r {
        if top {
            return Ok(PointClass::InterfacePlus);
        }
        if bottom {
            return Ok(PointClass::InterfaceMinus);
        }
        return Ok(PointClass::Channel);
    }
    if top || bottom || on_outer {
        return Ok(PointClass::Exterior);
    }
    Ok(PointClass::Hole)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight() -> ReferenceGeometry {
        build_reference_geometry(ChannelSpec::straight(0.5, 0.5), 1.0).unwrap()
    }

    #[test]
    fn straight_channel_measures() {
        let g = straight();
        assert!((g.channel_area - 1.0).abs() < 1e-14);
        assert!((g.wall_length - 4.0).abs() < 1e-14);
        assert_eq!(g.face_top, 0.5);
        assert_eq!(g.face_bottom, 0.5);
    }

    #[test]
    fn linear_width_area_is_even_part() {
        let ch = ChannelSpec {
            width: WidthProfile::Linear { w0: 0.5, slope: 0.2 },
            center: 0.5,
            boundary_margin: 0.05,
        };
        let g = build_reference_geometry(ch, 1.0).unwrap();
        assert!((g.channel_area - 1.0).abs() < 1e-13);
        // each wall has slope 0.1 in z1 per unit z2
        assert!((g.wall_length - 4.0 * (1.0f64 + 0.01).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn touching_channel_is_rejected() {
        let ch = ChannelSpec { width: WidthProfile::Constant(0.5), center: 0.2, boundary_margin: 0.01 };
        assert!(matches!(build_reference_geometry(ch, 1.0), Err(GeometryError::ShapeViolation(_))));
        let ch = ChannelSpec {
            width: WidthProfile::Linear { w0: 0.2, slope: 0.3 },
            center: 0.5,
            boundary_margin: 0.01,
        };
        assert!(matches!(build_reference_geometry(ch, 1.0), Err(GeometryError::ShapeViolation(_))));
    }

    #[test]
    fn tiling_counts() {
        let g = straight();
        let t = tile_layer(&g, 0.25).unwrap();
        assert_eq!(t.cells.len(), 4);
        assert!((t.channel_area(&g) - 0.25).abs() < 1e-15);
        let t = tile_layer(&g, 0.5).unwrap();
        assert!((t.channel_area(&g) - 0.5).abs() < 1e-15);
        assert!(matches!(tile_layer(&g, 0.3), Err(GeometryError::InvalidScale { .. })));
        assert!(matches!(tile_layer(&g, 1.0), Err(GeometryError::InvalidScale { .. })));
    }

    #[test]
    fn classification_examples() {
        let g = straight();
        let s = Scale::from_cells(4);
        assert_eq!(classify_point(&g, s, [0.5, 0.5]).unwrap(), PointClass::BulkPlus);
        assert_eq!(classify_point(&g, s, [0.5, -0.5]).unwrap(), PointClass::BulkMinus);
        assert_eq!(classify_point(&g, s, [0.02, 0.0]).unwrap(), PointClass::Hole);
        // wall of cell 0 sits at x1 = ε(c − w/2) = 0.0625
        assert_eq!(classify_point(&g, s, [0.0625, 0.0]).unwrap(), PointClass::Wall);
        // centre of the top face of cell 0
        assert_eq!(classify_point(&g, s, [0.125, 0.25]).unwrap(), PointClass::InterfacePlus);
        assert_eq!(classify_point(&g, s, [0.125, -0.25]).unwrap(), PointClass::InterfaceMinus);
        assert_eq!(classify_point(&g, s, [0.125, 0.1]).unwrap(), PointClass::Channel);
        assert_eq!(classify_point(&g, s, [0.02, 0.25]).unwrap(), PointClass::Exterior);
        assert_eq!(classify_point(&g, s, [0.3, 1.0]).unwrap(), PointClass::Exterior);
        assert!(classify_point(&g, s, [0.3, 1.5]).is_err());
    }

    #[test]
    fn scale_parsing() {
        assert_eq!(Scale::from_eps(0.125).unwrap().cells(), 8);
        assert_eq!(Scale::from_eps(1.0 / 3.0).unwrap().cells(), 3);
        assert!(Scale::from_eps(0.3).is_err());
        assert!(Scale::from_eps(0.0).is_err());
        assert_eq!(Scale::from_cells(4).cell_of(1.0), 3);
    }
}
