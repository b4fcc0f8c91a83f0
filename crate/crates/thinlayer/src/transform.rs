//! Prescribed channel evolution `ψ*`, the derived layer map `ψ_ε`, its Jacobian data and the
//! limit map `ψ₀`.
//!
//! All maps are built from a per-cell evolution `ψ*(t, x′, z)` that equals the identity near
//! the cell boundary:
//!
//! ```text
//! ψ_ε(t, x) = ε(k, 0) + ε ψ*(t, εk, x/ε − (k, 0)),   k = ⌊x₁/ε⌋
//! ψ₀(t, x′, z) = (x′, 0) + ψ*(t, x′, z)
//! ```

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::geometry::Scale;

pub type Mat2 = Matrix2<f64>;
pub type Vec2 = Vector2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("point ({0}, {1}) lies outside the closed layer")]
    OutOfDomain(f64, f64),
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("Jacobian determinant {det} below floor {floor} at t = {t}, x' = {xp}, z = ({}, {})", z[0], z[1])]
    SingularJacobian { t: f64, xp: f64, z: [f64; 2], det: f64, floor: f64 },
    #[error("coefficient matrix is not symmetric positive definite: {0}")]
    NotSPD(String),
    #[error("transform spec invalid: {0}")]
    InvalidSpec(String),
}

/// A per-cell evolution `ψ*(t, x′, z)` with analytic derivatives.
pub trait CellEvolution: Send + Sync + fmt::Debug {
    fn psi(&self, t: f64, xp: f64, z: [f64; 2]) -> [f64; 2];
    /// `D_z ψ*`
    fn grad(&self, t: f64, xp: f64, z: [f64; 2]) -> Mat2;
    /// `∂_t ψ*`
    fn velocity(&self, t: f64, xp: f64, z: [f64; 2]) -> [f64; 2];
    /// Width of the boundary band on which `ψ*` is the identity.
    fn identity_band(&self) -> f64;
    fn name(&self) -> &str;
}

#[derive(Debug, Clone, Copy)]
pub struct Identity;

impl CellEvolution for Identity {
    fn psi(&self, _t: f64, _xp: f64, z: [f64; 2]) -> [f64; 2] {
        z
    }
    fn grad(&self, _t: f64, _xp: f64, _z: [f64; 2]) -> Mat2 {
        Mat2::identity()
    }
    fn velocity(&self, _t: f64, _xp: f64, _z: [f64; 2]) -> [f64; 2] {
        [0.0, 0.0]
    }
    fn identity_band(&self) -> f64 {
        0.5
    }
    fn name(&self) -> &str {
        "static"
    }
}

/// Parameters of the pinch evolution
/// `ψ* = (c + (z₁ − c)ρ, z₂)`, `ρ = 1 − a·s(t)·φ₁(z₁)φ₂(z₂)·(1 + μ sin 2πx′)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinchParams {
    pub center: f64,
    pub amplitude: f64,
    pub band: f64,
    /// Half width of the plateau of `φ₁` around the centre line.
    pub core_z1: f64,
    /// Half height of the plateau of `φ₂`.
    pub core_z2: f64,
    /// Duration of the smooth ramp `s`; `0` gives a fully developed, time independent pinch.
    pub ramp_time: f64,
    pub modulation: f64,
}

impl Default for PinchParams {
    fn default() -> Self {
        PinchParams {
            center: 0.5,
            amplitude: 0.3,
            band: 0.1,
            core_z1: 0.3,
            core_z2: 0.5,
            ramp_time: 1.0,
            modulation: 0.5,
        }
    }
}

fn edge(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

fn edge_prime(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp() / (x * x)
    } else {
        0.0
    }
}

/// Smooth step rising from 0 at `x ≤ 0` to 1 at `x ≥ 1`; returns value and derivative.
fn smooth_step(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0);
    }
    if x >= 1.0 {
        return (1.0, 0.0);
    }
    let (a, b) = (edge(x), edge(1.0 - x));
    let (da, db) = (edge_prime(x), -edge_prime(1.0 - x));
    let den = a + b;
    (a / den, (da * b - a * db) / (den * den))
}

/// Plateau of half width `p` that vanishes beyond `q`, as a function of the signed offset `s`.
fn plateau(s: f64, p: f64, q: f64) -> (f64, f64) {
    let (v, dv) = smooth_step((q - s.abs()) / (q - p));
    (v, -dv * s.signum() / (q - p))
}

#[derive(Debug, Clone)]
pub struct Pinch {
    pub params: PinchParams,
    outer_z1: f64,
    outer_z2: f64,
}

impl Pinch {
    pub fn new(params: PinchParams) -> Result<Self, TransformError> {
        let p = params;
        let outer_z1 = p.center.min(1.0 - p.center) - p.band;
        let outer_z2 = 1.0 - p.band;
        let bad = |s: &str| Err(TransformError::InvalidSpec(s.to_string()));
        if !(p.band > 0.0 && outer_z1 > 0.0) {
            return bad("band leaves no room for the bump around the centre");
        }
        if !(p.core_z1 >= 0.0 && p.core_z1 < outer_z1) {
            return bad("core_z1 must lie in [0, min(c, 1-c) - band)");
        }
        if !(p.core_z2 >= 0.0 && p.core_z2 < outer_z2) {
            return bad("core_z2 must lie in [0, 1 - band)");
        }
        if !(p.ramp_time >= 0.0) || !p.amplitude.is_finite() || !p.modulation.is_finite() {
            return bad("ramp time must be nonnegative and parameters finite");
        }
        Ok(Pinch { params, outer_z1, outer_z2 })
    }

    fn ramp(&self, t: f64) -> (f64, f64) {
        let tau = self.params.ramp_time;
        if tau <= 0.0 {
            return (1.0, 0.0);
        }
        let (s, ds) = smooth_step(t / tau);
        (s, ds / tau)
    }

    fn modulation(&self, xp: f64) -> f64 {
        1.0 + self.params.modulation * (2.0 * std::f64::consts::PI * xp).sin()
    }

    /// `(φ, ∂₁φ, ∂₂φ)`
    fn bump(&self, z: [f64; 2]) -> (f64, f64, f64) {
        let (b1, d1) = plateau(z[0] - self.params.center, self.params.core_z1, self.outer_z1);
        let (b2, d2) = plateau(z[1], self.params.core_z2, self.outer_z2);
        (b1 * b2, d1 * b2, b1 * d2)
    }
}

impl CellEvolution for Pinch {
    fn psi(&self, t: f64, xp: f64, z: [f64; 2]) -> [f64; 2] {
        let (s, _) = self.ramp(t);
        let (phi, _, _) = self.bump(z);
        let rho = 1.0 - self.params.amplitude * s * phi * self.modulation(xp);
        let c = self.params.center;
        [c + (z[0] - c) * rho, z[1]]
    }

    fn grad(&self, t: f64, xp: f64, z: [f64; 2]) -> Mat2 {
        let (s, _) = self.ramp(t);
        let (phi, d1, d2) = self.bump(z);
        let k = self.params.amplitude * s * self.modulation(xp);
        let rho = 1.0 - k * phi;
        let off = z[0] - self.params.center;
        Mat2::new(rho - off * k * d1, -off * k * d2, 0.0, 1.0)
    }

    fn velocity(&self, t: f64, xp: f64, z: [f64; 2]) -> [f64; 2] {
        let (_, ds) = self.ramp(t);
        let (phi, _, _) = self.bump(z);
        let drho = -self.params.amplitude * ds * phi * self.modulation(xp);
        [(z[0] - self.params.center) * drho, 0.0]
    }

    fn identity_band(&self) -> f64 {
        self.params.band
    }

    fn name(&self) -> &str {
        "pinch"
    }
}

#[derive(Clone, Debug)]
pub struct TransformSpec {
    pub evolution: Arc<dyn CellEvolution>,
    pub horizon: f64,
    /// Uniform floor `c₀` for the Jacobian determinant.
    pub det_floor: f64,
}

impl TransformSpec {
    pub fn new(evolution: Arc<dyn CellEvolution>, horizon: f64) -> Self {
        TransformSpec { evolution, horizon, det_floor: 0.1 }
    }

    pub fn identity(horizon: f64) -> Self {
        Self::new(Arc::new(Identity), horizon)
    }

    pub fn pinch(params: PinchParams, horizon: f64) -> Result<Self, TransformError> {
        Ok(Self::new(Arc::new(Pinch::new(params)?), horizon))
    }

    pub fn is_static(&self) -> bool {
        self.evolution.name() == "static"
    }

    pub fn check_time(&self, t: f64) -> Result<(), TransformError> {
        if t < -1e-12 || t > self.horizon * (1.0 + 1e-12) + 1e-12 {
            return Err(TransformError::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }

    /// Jacobian data of `ψ*` at one cell point; `time_scale` multiplies `∂_tψ*`
    /// (`ε` for the layer map, `1` for the limit map).
    pub fn local_data(&self, t: f64, xp: f64, z: [f64; 2], time_scale: f64) -> JacobianData {
        let f = self.evolution.grad(t, xp, z);
        let j = f.determinant();
        let f_inv = Mat2::new(f[(1, 1)], -f[(0, 1)], -f[(1, 0)], f[(0, 0)]) / j;
        let v = self.evolution.velocity(t, xp, z);
        let psi_dot = Vec2::new(v[0], v[1]) * time_scale;
        JacobianData { f, f_inv, j, psi_dot, b_tilde: f_inv * psi_dot }
    }

    /// Checks the identity band, the determinant floor and the analytic derivatives on a grid.
    pub fn validate(&self, density: usize) -> Result<(), TransformError> {
        let evo = &self.evolution;
        let band = evo.identity_band();
        let n = density.max(4);
        for it in 0..=n {
            let t = self.horizon * it as f64 / n as f64;
            for ix in 0..n {
                let xp = (ix as f64 + 0.5) / n as f64;
                for i in 0..=n {
                    for j in 0..=n {
                        let z = [i as f64 / n as f64, -1.0 + 2.0 * j as f64 / n as f64];
                        let dist = z[0].min(1.0 - z[0]).min(1.0 - z[1].abs());
                        let p = evo.psi(t, xp, z);
                        if dist < band && ((p[0] - z[0]).abs() > 1e-14 || (p[1] - z[1]).abs() > 1e-14)
                        {
                            return Err(TransformError::InvalidSpec(format!(
                                "psi is not the identity at z = ({}, {}) inside the band",
                                z[0], z[1]
                            )));
                        }
                        let f = evo.grad(t, xp, z);
                        let det = f.determinant();
                        if det < self.det_floor {
                            return Err(TransformError::SingularJacobian {
                                t,
                                xp,
                                z,
                                det,
                                floor: self.det_floor,
                            });
                        }
                        let fd = fd_grad(evo.as_ref(), t, xp, z, 1e-5);
                        let fv = fd_velocity(evo.as_ref(), t, xp, z, 1e-5);
                        let v = evo.velocity(t, xp, z);
                        if (f - fd).amax() > 1e-6 || (v[0] - fv[0]).abs().max((v[1] - fv[1]).abs()) > 1e-6 {
                            return Err(TransformError::InvalidSpec(format!(
                                "analytic derivatives disagree with finite differences at z = ({}, {})",
                                z[0], z[1]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Central difference approximation of `D_z ψ*`.
pub fn fd_grad(evo: &dyn CellEvolution, t: f64, xp: f64, z: [f64; 2], h: f64) -> Mat2 {
    let mut m = Mat2::zeros();
    for c in 0..2 {
        let mut zp = z;
        let mut zm = z;
        zp[c] += h;
        zm[c] -= h;
        let (p, q) = (evo.psi(t, xp, zp), evo.psi(t, xp, zm));
        m[(0, c)] = (p[0] - q[0]) / (2.0 * h);
        m[(1, c)] = (p[1] - q[1]) / (2.0 * h);
    }
    m
}

/// Central difference approximation of `∂_tψ*`; times outside the horizon are clamped by the ramp.
pub fn fd_velocity(evo: &dyn CellEvolution, t: f64, xp: f64, z: [f64; 2], h: f64) -> [f64; 2] {
    let (p, q) = (evo.psi(t + h, xp, z), evo.psi(t - h, xp, z));
    [(p[0] - q[0]) / (2.0 * h), (p[1] - q[1]) / (2.0 * h)]
}

/// Jacobian data of a transform at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianData {
    pub f: Mat2,
    pub f_inv: Mat2,
    pub j: f64,
    pub psi_dot: Vec2,
    pub b_tilde: Vec2,
}

impl JacobianData {
    /// `J ‖F^{-T} ν‖`, the surface measure factor for a reference normal `ν`.
    pub fn surface_factor(&self, normal: [f64; 2]) -> f64 {
        let n = self.f_inv.transpose() * Vec2::new(normal[0], normal[1]);
        self.j * n.norm()
    }
}

fn check_layer_point(scale: Scale, x: [f64; 2]) -> Result<(), TransformError> {
    let eps = scale.eps();
    let tol = 1e-12;
    if !(x[0] >= -tol && x[0] <= 1.0 + tol && x[1].abs() <= eps + tol) {
        return Err(TransformError::OutOfDomain(x[0], x[1]));
    }
    Ok(())
}

fn unfold_point(scale: Scale, x: [f64; 2]) -> (usize, [f64; 2]) {
    let eps = scale.eps();
    let k = scale.cell_of(x[0]);
    (k, [x[0] / eps - k as f64, x[1] / eps])
}

/// `ψ_ε(t, x)` for a point of the closed layer.
pub fn eval_psi_eps(
    spec: &TransformSpec,
    scale: Scale,
    t: f64,
    x: [f64; 2],
) -> Result<[f64; 2], TransformError> {
    spec.check_time(t)?;
    check_layer_point(scale, x)?;
    let eps = scale.eps();
    let (k, z) = unfold_point(scale, x);
    let p = spec.evolution.psi(t, eps * k as f64, z);
    Ok([eps * (k as f64 + p[0]), eps * p[1]])
}

/// `F_ε`, `J_ε`, `F_ε⁻¹`, `∂_tψ_ε` and `b̃_ε` at layer points.
pub fn jacobian_data(
    spec: &TransformSpec,
    scale: Scale,
    t: f64,
    points: &[[f64; 2]],
) -> Result<Vec<JacobianData>, TransformError> {
    spec.check_time(t)?;
    let eps = scale.eps();
    points
        .iter()
        .map(|&x| {
            check_layer_point(scale, x)?;
            let (k, z) = unfold_point(scale, x);
            let xp = eps * k as f64;
            let d = spec.local_data(t, xp, z, eps);
            if !(d.j >= spec.det_floor) {
                return Err(TransformError::SingularJacobian { t, xp, z, det: d.j, floor: spec.det_floor });
            }
            Ok(d)
        })
        .collect()
}

/// Checks that `d` is symmetric (to 1e−12, relative) and positive definite.
pub fn check_spd(d: &Mat2) -> Result<(), TransformError> {
    let scale = d.amax().max(1e-300);
    if (d[(0, 1)] - d[(1, 0)]).abs() > 1e-12 * scale {
        return Err(TransformError::NotSPD(format!("asymmetric matrix {d}")));
    }
    let lmin = d.symmetric_eigenvalues().min();
    if !(lmin > 0.0) {
        return Err(TransformError::NotSPD(format!("smallest eigenvalue {lmin}")));
    }
    Ok(())
}

/// `D̃ = F⁻¹ D F⁻ᵀ` and `q̃ = F⁻¹ q`.
pub fn transformed_coefficients(
    d: &Mat2,
    q: &Vec2,
    jd: &JacobianData,
) -> Result<(Mat2, Vec2), TransformError> {
    check_spd(d)?;
    let dt = jd.f_inv * d * jd.f_inv.transpose();
    let dt = 0.5 * (dt + dt.transpose());
    Ok((dt, jd.f_inv * q))
}

/// The limit transform `ψ₀(t, x′, z) = (x′, 0) + ψ*(t, x′, z)`.
#[derive(Clone, Debug)]
pub struct LimitTransform {
    pub spec: TransformSpec,
}

impl LimitTransform {
    /// Wraps a spec without any checks; used by diagnostics that must accept folding maps.
    pub fn unchecked(spec: TransformSpec) -> Self {
        LimitTransform { spec }
    }

    pub fn psi0(&self, t: f64, xp: f64, z: [f64; 2]) -> [f64; 2] {
        let p = self.spec.evolution.psi(t, xp, z);
        [xp + p[0], p[1]]
    }

    /// `F₀`, `J₀`, `∂_tψ₀` and `b̃₀` at a cell point.
    pub fn data(&self, t: f64, xp: f64, z: [f64; 2]) -> JacobianData {
        self.spec.local_data(t, xp, z, 1.0)
    }
}

pub fn limit_transform(spec: &TransformSpec) -> Result<LimitTransform, TransformError> {
    let lt = LimitTransform { spec: spec.clone() };
    let n = 20;
    for it in 0..=n {
        let t = spec.horizon * it as f64 / n as f64;
        for ix in 0..=n {
            let xp = ix as f64 / n as f64;
            for i in 0..=4 * n {
                let z1 = i as f64 / (4 * n) as f64;
                for z2 in [-1.0, 1.0] {
                    let d = lt.data(t, xp, [z1, z2]);
                    if (d.j - 1.0).abs() > 1e-12 {
                        return Err(TransformError::InvalidSpec(format!(
                            "J0 = {} on the face z2 = {z2}",
                            d.j
                        )));
                    }
                }
            }
            for i in 0..=n {
                for j in 0..=n {
                    let z = [i as f64 / n as f64, -1.0 + 2.0 * j as f64 / n as f64];
                    let d = lt.data(t, xp, z);
                    if d.j < spec.det_floor {
                        return Err(TransformError::SingularJacobian {
                            t,
                            xp,
                            z,
                            det: d.j,
                            floor: spec.det_floor,
                        });
                    }
                }
            }
        }
    }
    Ok(lt)
}

/// Ceilings for the sampled audit quantities; exceeding one adds a flag to the report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditCeilings {
    pub displacement: f64,
    pub velocity: f64,
    pub jacobian_norm: f64,
    pub shift: f64,
}

impl Default for AuditCeilings {
    fn default() -> Self {
        AuditCeilings { displacement: 1.0, velocity: 10.0, jacobian_norm: 10.0, shift: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuditFlag {
    /// `det D_zψ* ≤ 0` at some samples.
    SingularJacobian { samples: usize, t: f64, xp: f64, z: [f64; 2], det: f64 },
    BelowFloor { j_min: f64, floor: f64 },
    Ceiling { quantity: &'static str, value: f64, ceiling: f64 },
}

impl fmt::Display for AuditFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuditFlag::SingularJacobian { samples, t, xp, z, det } => write!(
                f,
                "SingularJacobian region: {samples} samples with det <= 0, e.g. det = {det:.4} at t = {t:.3}, x' = {xp:.4}, z = ({:.3}, {:.3})",
                z[0], z[1]
            ),
            AuditFlag::BelowFloor { j_min, floor } => {
                write!(f, "BelowFloor: min J = {j_min:.4} < c0 = {floor}")
            }
            AuditFlag::Ceiling { quantity, value, ceiling } => {
                write!(f, "Ceiling: {quantity} = {value:.4e} exceeds {ceiling:.4e}")
            }
        }
    }
}

/// Sampled transformation diagnostics for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub eps: f64,
    /// `sup ε⁻¹|ψ_ε − id|`
    pub displacement: f64,
    /// `sup ε⁻¹|∂_tψ_ε|`
    pub velocity: f64,
    /// `sup ‖F_ε‖` (spectral norm)
    pub jacobian_norm: f64,
    pub j_min: f64,
    pub j_max: f64,
    /// `sup ‖F_ε(· + εl′e₁) − F_ε‖ / (l′ε)` for `l′ = 1, 2`.
    pub shift: [f64; 2],
    /// Pointwise `sup |∂_t J_ε|`; a stronger quantity than the dual norm the theory asks for.
    pub dt_j_pointwise: f64,
    pub flags: Vec<AuditFlag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub spec_name: String,
    pub rows: Vec<AuditRow>,
}

impl AssumptionReport {
    pub fn flagged(&self) -> bool {
        self.rows.iter().any(|r| !r.flags.is_empty())
    }
}

pub fn check_assumptions(
    spec: &TransformSpec,
    scales: &[Scale],
    density: usize,
    ceilings: &AuditCeilings,
) -> AssumptionReport {
    let n = density.max(2);
    let evo = spec.evolution.as_ref();
    let rows = scales
        .iter()
        .map(|&scale| {
            let eps = scale.eps();
            let cells = scale.cells();
            let mut row = AuditRow {
                eps,
                displacement: 0.0,
                velocity: 0.0,
                jacobian_norm: 0.0,
                j_min: f64::INFINITY,
                j_max: f64::NEG_INFINITY,
                shift: [0.0; 2],
                dt_j_pointwise: 0.0,
                flags: Vec::new(),
            };
            let mut singular: Option<AuditFlag> = None;
            let mut singular_count = 0;
            for it in 0..=n {
                let t = spec.horizon * it as f64 / n as f64;
                for k in 0..cells {
                    let xp = eps * k as f64;
                    for i in 0..n {
                        for j in 0..n {
                            let z = [(i as f64 + 0.5) / n as f64, -1.0 + 2.0 * (j as f64 + 0.5) / n as f64];
                            let x = [eps * (k as f64 + z[0]), eps * z[1]];
                            let p = evo.psi(t, xp, z);
                            let y = [eps * (k as f64 + p[0]), eps * p[1]];
                            let disp = ((y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2)).sqrt() / eps;
                            row.displacement = row.displacement.max(disp);
                            let v = evo.velocity(t, xp, z);
                            let vel = (eps * v[0]).hypot(eps * v[1]) / eps;
                            row.velocity = row.velocity.max(vel);
                            let f = evo.grad(t, xp, z);
                            let det = f.determinant();
                            row.jacobian_norm = row.jacobian_norm.max(f.singular_values().max());
                            row.j_min = row.j_min.min(det);
                            row.j_max = row.j_max.max(det);
                            if det <= 0.0 {
                                singular_count += 1;
                                if singular.is_none() {
                                    singular = Some(AuditFlag::SingularJacobian { samples: 0, t, xp, z, det });
                                }
                            }
                            for (l, slot) in row.shift.iter_mut().enumerate() {
                                let lp = l + 1;
                                if k + lp < cells {
                                    let g = evo.grad(t, eps * (k + lp) as f64, z);
                                    let q = (g - f).norm() / (lp as f64 * eps);
                                    *slot = slot.max(q);
                                }
                            }
                            let h = 1e-5;
                            let lo = (t - h).max(0.0);
                            let hi = (t + h).min(spec.horizon);
                            let djdt =
                                (evo.grad(hi, xp, z).determinant() - evo.grad(lo, xp, z).determinant()) / (hi - lo);
                            row.dt_j_pointwise = row.dt_j_pointwise.max(djdt.abs());
                        }
                    }
                }
            }
            if let Some(AuditFlag::SingularJacobian { t, xp, z, det, .. }) = singular {
                row.flags.push(AuditFlag::SingularJacobian { samples: singular_count, t, xp, z, det });
            } else if row.j_min < spec.det_floor {
                row.flags.push(AuditFlag::BelowFloor { j_min: row.j_min, floor: spec.det_floor });
            }
            let checks = [
                ("displacement", row.displacement, ceilings.displacement),
                ("velocity", row.velocity, ceilings.velocity),
                ("jacobian_norm", row.jacobian_norm, ceilings.jacobian_norm),
                ("shift", row.shift[0].max(row.shift[1]), ceilings.shift),
            ];
            for (quantity, value, ceiling) in checks {
                if value > ceiling {
                    row.flags.push(AuditFlag::Ceiling { quantity, value, ceiling });
                }
            }
            row
        })
        .collect();
    AssumptionReport { spec_name: evo.name().to_string(), rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pinch() -> TransformSpec {
        TransformSpec::pinch(PinchParams::default(), 1.0).unwrap()
    }

    #[test]
    fn smooth_step_is_monotone_and_matches_derivative() {
        let mut prev = 0.0;
        for i in 1..100 {
            let x = i as f64 / 100.0;
            let (v, d) = smooth_step(x);
            assert!(v >= prev);
            prev = v;
            let h = 1e-6;
            let fd = (smooth_step(x + h).0 - smooth_step(x - h).0) / (2.0 * h);
            assert!((fd - d).abs() < 1e-6, "{x}: {fd} vs {d}");
        }
    }

    #[test]
    fn identity_spec_data() {
        let spec = TransformSpec::identity(1.0);
        let s = Scale::from_cells(4);
        let d = jacobian_data(&spec, s, 0.3, &[[0.3, 0.1]]).unwrap()[0];
        assert_eq!(d.f, Mat2::identity());
        assert_eq!(d.j, 1.0);
        assert_eq!(d.b_tilde, Vec2::zeros());
        assert_eq!(eval_psi_eps(&spec, s, 0.5, [0.3, 0.1]).unwrap(), [0.3, 0.1]);
    }

    #[test]
    fn core_scaling_is_diagonal() {
        let params = PinchParams { amplitude: 0.3, modulation: 0.0, ramp_time: 0.0, ..Default::default() };
        let spec = TransformSpec::pinch(params, 1.0).unwrap();
        let s = Scale::from_cells(4);
        let d = jacobian_data(&spec, s, 0.0, &[[0.25 * 1.5, 0.0]]).unwrap()[0];
        assert!((d.f - Mat2::new(0.7, 0.0, 0.0, 1.0)).amax() < 1e-15);
        assert!((d.j - 0.7).abs() < 1e-15);
    }

    #[test]
    fn pinch_validates() {
        pinch().validate(12).unwrap();
    }

    #[test]
    fn out_of_range_inputs() {
        let spec = pinch();
        let s = Scale::from_cells(4);
        assert!(matches!(eval_psi_eps(&spec, s, 1.5, [0.1, 0.0]), Err(TransformError::TimeOutOfRange { .. })));
        assert!(matches!(eval_psi_eps(&spec, s, 0.5, [0.1, 0.3]), Err(TransformError::OutOfDomain(..))));
    }

    #[test]
    fn coefficient_examples() {
        let jd = TransformSpec::identity(1.0).local_data(0.0, 0.0, [0.5, 0.0], 1.0);
        let d = Mat2::new(2.0, 0.5, 0.5, 1.0);
        let q = Vec2::new(0.3, -1.0);
        let (dt, qt) = transformed_coefficients(&d, &q, &jd).unwrap();
        assert_eq!(dt, d);
        assert_eq!(qt, q);
        let f = Mat2::new(2.0, 0.0, 0.0, 1.0);
        let jd = JacobianData { f, f_inv: f.try_inverse().unwrap(), j: 2.0, psi_dot: Vec2::zeros(), b_tilde: Vec2::zeros() };
        let (dt, _) = transformed_coefficients(&Mat2::identity(), &q, &jd).unwrap();
        assert!((dt - Mat2::new(0.25, 0.0, 0.0, 1.0)).amax() < 1e-16);
        let asym = Mat2::new(1.0, 0.2, 0.0, 1.0);
        assert!(matches!(transformed_coefficients(&asym, &q, &jd), Err(TransformError::NotSPD(_))));
        let indefinite = Mat2::new(1.0, 2.0, 2.0, 1.0);
        assert!(matches!(transformed_coefficients(&indefinite, &q, &jd), Err(TransformError::NotSPD(_))));
    }

    #[test]
    fn limit_transform_examples() {
        let lt = limit_transform(&TransformSpec::identity(1.0)).unwrap();
        assert_eq!(lt.psi0(0.4, 0.3, [0.2, 0.5]), [0.5, 0.5]);
        let lt = limit_transform(&pinch()).unwrap();
        for i in 0..=10 {
            for j in 0..=10 {
                let z = [i as f64 / 10.0, -1.0 + j as f64 / 5.0];
                assert_eq!(lt.data(0.0, 0.37, z).j, 1.0);
            }
        }
    }

    #[test]
    fn folding_amplitude_is_rejected_by_limit_transform() {
        let spec = TransformSpec::pinch(PinchParams { amplitude: 1.0, ..Default::default() }, 1.0).unwrap();
        assert!(matches!(limit_transform(&spec), Err(TransformError::SingularJacobian { .. })));
    }
}
