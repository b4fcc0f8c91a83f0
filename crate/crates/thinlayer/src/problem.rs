//! Coefficients, reactions, initial data and manufactured sources of the
//! reaction–diffusion–advection system, with their validation.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::discretization::Region;
use crate::transform::{Mat2, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("unknown registry key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse `{input}`: {reason}")]
    Parse { input: String, reason: String },
    #[error("diffusion tensor not uniformly elliptic: smallest eigenvalue {lambda} < {floor} ({where_})")]
    Ellipticity { lambda: f64, floor: f64, where_: String },
    #[error("reaction `{name}` exceeds its declared Lipschitz constant {declared}: sampled {sampled}")]
    Lipschitz { name: String, declared: f64, sampled: f64 },
    #[error("advection field is not bounded ({0})")]
    Unbounded(String),
    #[error("data mismatch: {0}")]
    DataMismatch(String),
}

fn parse_call(input: &str) -> Result<(String, Vec<f64>), DataError> {
    let s = input.trim();
    let err = |reason: &str| DataError::Parse { input: input.to_string(), reason: reason.to_string() };
    let Some(open) = s.find('(') else {
        return Ok((s.to_string(), Vec::new()));
    };
    if !s.ends_with(')') {
        return Err(err("missing closing parenthesis"));
    }
    let name = s[..open].trim().to_string();
    let inner = s[open + 1..s.len() - 1].trim();
    if inner.is_empty() {
        return Ok((name, Vec::new()));
    }
    let args = inner
        .split(',')
        .map(|a| a.trim().parse::<f64>().map_err(|_| err(&format!("argument `{}` is not a number", a.trim()))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((name, args))
}

fn arity(input: &str, args: &[f64], n: usize) -> Result<(), DataError> {
    if args.len() != n {
        return Err(DataError::Parse { input: input.to_string(), reason: format!("expected {n} arguments") });
    }
    if args.iter().any(|a| !a.is_finite()) {
        return Err(DataError::Parse { input: input.to_string(), reason: "arguments must be finite".into() });
    }
    Ok(())
}

/// A globally Lipschitz reaction acting on the species' own concentration.
#[derive(Clone)]
pub enum Reaction {
    Zero,
    LinearDecay { k: f64 },
    LogisticClipped { r: f64, k: f64, cap: f64 },
    LangmuirClipped { ka: f64, kd: f64, cap: f64 },
    /// Reaction of all species values with a declared Lipschitz constant.
    Custom { name: String, f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>, lipschitz: f64 },
}

impl fmt::Debug for Reaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for Reaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reaction::Zero => write!(f, "zero"),
            Reaction::LinearDecay { k } => write!(f, "linear_decay({k})"),
            Reaction::LogisticClipped { r, k, cap } => write!(f, "logistic_clipped({r}, {k}, {cap})"),
            Reaction::LangmuirClipped { ka, kd, cap } => write!(f, "langmuir_clipped({ka}, {kd}, {cap})"),
            Reaction::Custom { name, .. } => write!(f, "{name}"),
        }
    }
}

impl FromStr for Reaction {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        let (name, a) = parse_call(s)?;
        match name.as_str() {
            "zero" => arity(s, &a, 0).map(|_| Reaction::Zero),
            "linear_decay" => arity(s, &a, 1).map(|_| Reaction::LinearDecay { k: a[0] }),
            "logistic_clipped" => {
                arity(s, &a, 3)?;
                if !(a[1] > 0.0 && a[2] >= 0.0) {
                    return Err(DataError::Parse { input: s.into(), reason: "need K > 0 and cap ≥ 0".into() });
                }
                Ok(Reaction::LogisticClipped { r: a[0], k: a[1], cap: a[2] })
            }
            "langmuir_clipped" => {
                arity(s, &a, 3)?;
                if !(a[2] > 0.0) {
                    return Err(DataError::Parse { input: s.into(), reason: "need cap > 0".into() });
                }
                Ok(Reaction::LangmuirClipped { ka: a[0], kd: a[1], cap: a[2] })
            }
            _ => Err(DataError::UnknownKey(name)),
        }
    }
}

impl Reaction {
    /// Value for species `j` given all species values `u`.
    pub fn eval(&self, u: &[f64], j: usize) -> f64 {
        let x = u[j];
        match self {
            Reaction::Zero => 0.0,
            Reaction::LinearDecay { k } => -k * x,
            Reaction::LogisticClipped { r, k, cap } => {
                let v = x.clamp(0.0, *cap);
                r * v * (1.0 - v / k)
            }
            Reaction::LangmuirClipped { ka, kd, cap } => {
                let v = x.clamp(0.0, *cap);
                ka * v * (1.0 - v / cap) - kd * v
            }
            Reaction::Custom { f, .. } => f(u),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Reaction::Zero => 0.0,
            Reaction::LinearDecay { k } => k.abs(),
            Reaction::LogisticClipped { r, k, cap } => r.abs() * 1f64.max((1.0 - 2.0 * cap / k).abs()),
            Reaction::LangmuirClipped { ka, kd, .. } => ka.abs() + kd.abs(),
            Reaction::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Reaction::Zero)
    }

    /// Largest sampled `|f(a) − f(b)|/|a − b|` over random pairs in `[−range, range]^m`.
    pub fn sampled_lipschitz(&self, species: usize, j: usize, pairs: usize, range: f64, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = 0.0f64;
        let mut a = vec![0.0; species];
        let mut b = vec![0.0; species];
        for _ in 0..pairs {
            for i in 0..species {
                a[i] = rng.gen_range(-range..range);
                b[i] = rng.gen_range(-range..range);
            }
            let d = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if d > 0.0 {
                best = best.max((self.eval(&a, j) - self.eval(&b, j)).abs() / d);
            }
        }
        best
    }
}

/// Initial data in macroscopic coordinates: `bulk(x′, y)` with `y ∈ (0,H)` above and
/// `y ∈ (−H,0)` below the interface, and `layer(x′, z)` on the cell.
#[derive(Clone)]
pub enum InitialData {
    Constant(f64),
    /// `a` above, `b` below, linear in `z₂` across the layer.
    TwoReservoir { a: f64, b: f64 },
    /// Gaussian centred at `(x1, x2)` of width `sigma`; the layer takes the interface value.
    GaussianBump { x1: f64, x2: f64, sigma: f64 },
    Custom {
        name: String,
        bulk: Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>,
        layer: Arc<dyn Fn(f64, [f64; 2]) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialData::Constant(c) => write!(f, "constant({c})"),
            InitialData::TwoReservoir { a, b } => write!(f, "two_reservoir({a}, {b})"),
            InitialData::GaussianBump { x1, x2, sigma } => write!(f, "gaussian_bump({x1}, {x2}, {sigma})"),
            InitialData::Custom { name, .. } => write!(f, "{name}"),
        }
    }
}

impl FromStr for InitialData {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        let (name, a) = parse_call(s)?;
        match name.as_str() {
            "constant" => arity(s, &a, 1).map(|_| InitialData::Constant(a[0])),
            "two_reservoir" => arity(s, &a, 2).map(|_| InitialData::TwoReservoir { a: a[0], b: a[1] }),
            "gaussian_bump" => {
                // gaussian_bump(x0, σ) is centred on the interface
                let a = if a.len() == 2 { vec![a[0], 0.0, a[1]] } else { a };
                arity(s, &a, 3)?;
                if !(a[2] > 0.0) {
                    return Err(DataError::Parse { input: s.into(), reason: "sigma must be positive".into() });
                }
                Ok(InitialData::GaussianBump { x1: a[0], x2: a[1], sigma: a[2] })
            }
            _ => Err(DataError::UnknownKey(name)),
        }
    }
}

impl InitialData {
    pub fn bulk(&self, x: [f64; 2]) -> f64 {
        match self {
            InitialData::Constant(c) => *c,
            InitialData::TwoReservoir { a, b } => {
                if x[1] >= 0.0 {
                    *a
                } else {
                    *b
                }
            }
            InitialData::GaussianBump { x1, x2, sigma } => {
                let r2 = (x[0] - x1).powi(2) + (x[1] - x2).powi(2);
                (-r2 / (2.0 * sigma * sigma)).exp()
            }
            InitialData::Custom { bulk, .. } => bulk(x),
        }
    }

    pub fn layer(&self, xp: f64, z: [f64; 2]) -> f64 {
        match self {
            InitialData::Constant(c) => *c,
            InitialData::TwoReservoir { a, b } => b + (a - b) * (z[1] + 1.0) / 2.0,
            InitialData::GaussianBump { .. } => self.bulk([xp, 0.0]),
            InitialData::Custom { layer, .. } => layer(xp, z),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, InitialData::Constant(c) if *c == 0.0)
    }
}

/// Manufactured solution used for order studies on the static micro problem:
/// `u± = e^{−t} cos(π(x_n ∓ ε)/(H − ε))` in the bulks and `u = e^{−t}` in the channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineManufactured {
    pub eps: f64,
    pub half_height: f64,
    /// `D₂₂` above and below.
    pub d_plus: f64,
    pub d_minus: f64,
}

impl CosineManufactured {
    fn wave(&self) -> f64 {
        std::f64::consts::PI / (self.half_height - self.eps)
    }

    pub fn exact(&self, t: f64, x: [f64; 2], region: Region) -> f64 {
        let k = self.wave();
        let e = (-t).exp();
        match region {
            Region::BulkPlus => e * (k * (x[1] - self.eps)).cos(),
            Region::BulkMinus => e * (k * (x[1] + self.eps)).cos(),
            Region::Channel => e,
        }
    }

    /// Source density; channel values enter with the layer weight `1/ε` like `g`.
    pub fn source(&self, t: f64, x: [f64; 2], region: Region) -> f64 {
        let k2 = self.wave().powi(2);
        match region {
            Region::BulkPlus => (self.d_plus * k2 - 1.0) * self.exact(t, x, region),
            Region::BulkMinus => (self.d_minus * k2 - 1.0) * self.exact(t, x, region),
            Region::Channel => -(-t).exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKey {
    Cosine,
}

impl FromStr for SourceKey {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s.trim() {
            "cosine" => Ok(SourceKey::Cosine),
            other => Err(DataError::UnknownKey(other.to_string())),
        }
    }
}

impl fmt::Display for SourceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceKey::Cosine => write!(f, "cosine"),
        }
    }
}

pub type LayerTensor = Arc<dyn Fn(f64, f64, [f64; 2]) -> Mat2 + Send + Sync>;
pub type LayerVector = Arc<dyn Fn(f64, f64, [f64; 2]) -> Vec2 + Send + Sync>;

/// Coefficients of one species. Layer callbacks take `(t, x′, z)`.
#[derive(Clone)]
pub struct SpeciesData {
    pub d_plus: Mat2,
    pub d_minus: Mat2,
    pub d_layer: LayerTensor,
    pub q_plus: Vec2,
    pub q_minus: Vec2,
    pub q_layer: LayerVector,
    pub f: Reaction,
    pub g: Reaction,
    pub h: Reaction,
    pub initial: InitialData,
    pub source: Option<SourceKey>,
    /// Set when the layer callbacks are constant, for cheap validation.
    pub layer_constant: Option<(Mat2, Vec2)>,
}

impl fmt::Debug for SpeciesData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpeciesData")
            .field("d_plus", &self.d_plus)
            .field("d_minus", &self.d_minus)
            .field("q_plus", &self.q_plus)
            .field("q_minus", &self.q_minus)
            .field("f", &self.f)
            .field("g", &self.g)
            .field("h", &self.h)
            .field("initial", &self.initial)
            .field("source", &self.source)
            .finish()
    }
}

impl SpeciesData {
    /// Isotropic diffusion `d` everywhere, no advection, zero reactions.
    pub fn isotropic(d: f64, initial: InitialData) -> Self {
        SpeciesData::uniform(Mat2::identity() * d, Vec2::zeros(), initial)
    }

    /// Same constant coefficients in both bulks and the layer.
    pub fn uniform(d: Mat2, q: Vec2, initial: InitialData) -> Self {
        SpeciesData {
            d_plus: d,
            d_minus: d,
            d_layer: Arc::new(move |_, _, _| d),
            q_plus: q,
            q_minus: q,
            q_layer: Arc::new(move |_, _, _| q),
            f: Reaction::Zero,
            g: Reaction::Zero,
            h: Reaction::Zero,
            initial,
            source: None,
            layer_constant: Some((d, q)),
        }
    }

    pub fn with_layer_constant(mut self, d: Mat2, q: Vec2) -> Self {
        self.d_layer = Arc::new(move |_, _, _| d);
        self.q_layer = Arc::new(move |_, _, _| q);
        self.layer_constant = Some((d, q));
        self
    }

    pub fn with_reactions(mut self, f: Reaction, g: Reaction, h: Reaction) -> Self {
        self.f = f;
        self.g = g;
        self.h = h;
        self
    }

    pub fn advection_free(&self) -> bool {
        match self.layer_constant {
            Some((_, q)) => self.q_plus == Vec2::zeros() && self.q_minus == Vec2::zeros() && q == Vec2::zeros(),
            None => false,
        }
    }

    pub fn manufactured(&self, eps: f64, half_height: f64) -> Option<CosineManufactured> {
        self.source.map(|SourceKey::Cosine| CosineManufactured {
            eps,
            half_height,
            d_plus: self.d_plus[(1, 1)],
            d_minus: self.d_minus[(1, 1)],
        })
    }
}

/// Validation thresholds for the data assumptions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationOptions {
    pub ellipticity_floor: f64,
    pub lipschitz_pairs: usize,
    pub lipschitz_slack: f64,
    pub sample_range: f64,
    pub grid: usize,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            ellipticity_floor: 1e-6,
            lipschitz_pairs: 10_000,
            lipschitz_slack: 1.05,
            sample_range: 10.0,
            grid: 8,
            horizon: 1.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProblemData {
    pub species: Vec<SpeciesData>,
}

fn lambda_min(d: &Mat2) -> f64 {
    let s = 0.5 * (d + d.transpose());
    if (d - d.transpose()).amax() > 1e-12 * d.amax().max(1e-300) {
        return f64::NEG_INFINITY;
    }
    s.symmetric_eigenvalues().min()
}

impl ProblemData {
    pub fn new(species: Vec<SpeciesData>) -> Self {
        ProblemData { species }
    }

    pub fn single(s: SpeciesData) -> Self {
        ProblemData { species: vec![s] }
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn has_source(&self) -> bool {
        self.species.iter().any(|s| s.source.is_some())
    }

    /// Checks uniform ellipticity, bounded advection and the declared Lipschitz constants.
    pub fn validate(&self, opts: &ValidationOptions) -> Result<(), DataError> {
        if self.species.is_empty() {
            return Err(DataError::DataMismatch("at least one species required".into()));
        }
        let m = self.species.len();
        for (j, s) in self.species.iter().enumerate() {
            let check = |d: &Mat2, where_: String| {
                let l = lambda_min(d);
                if !(l >= opts.ellipticity_floor) {
                    return Err(DataError::Ellipticity { lambda: l, floor: opts.ellipticity_floor, where_ });
                }
                Ok(())
            };
            check(&s.d_plus, format!("species {j}, bulk+"))?;
            check(&s.d_minus, format!("species {j}, bulk-"))?;
            let n = opts.grid.max(2);
            for it in 0..=n {
                let t = opts.horizon * it as f64 / n as f64;
                for ix in 0..n {
                    let xp = (ix as f64 + 0.5) / n as f64;
                    for a in 0..=n {
                        for b in 0..=n {
                            let z = [a as f64 / n as f64, -1.0 + 2.0 * b as f64 / n as f64];
                            check(&(s.d_layer)(t, xp, z), format!("species {j}, layer at t = {t}, x' = {xp}, z = {z:?}"))?;
                            let q = (s.q_layer)(t, xp, z);
                            if !q.iter().all(|v| v.is_finite()) {
                                return Err(DataError::Unbounded(format!("species {j}, layer")));
                            }
                        }
                    }
                    if s.layer_constant.is_some() {
                        break;
                    }
                }
                if s.layer_constant.is_some() {
                    break;
                }
            }
            for q in [s.q_plus, s.q_minus] {
                if !q.iter().all(|v| v.is_finite()) {
                    return Err(DataError::Unbounded(format!("species {j}, bulk")));
                }
            }
            for (name, r) in [("f", &s.f), ("g", &s.g), ("h", &s.h)] {
                let declared = r.lipschitz();
                let sampled =
                    r.sampled_lipschitz(m, j, opts.lipschitz_pairs, opts.sample_range, opts.seed.wrapping_add(j as u64));
                if sampled > opts.lipschitz_slack * declared + 1e-12 {
                    return Err(DataError::Lipschitz { name: format!("{name}{j} = {r}"), declared, sampled });
                }
            }
            if s.source.is_some() && !s.advection_free() {
                return Err(DataError::DataMismatch(format!(
                    "species {j}: the manufactured source assumes zero advection"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_parsing() {
        assert!(matches!("zero".parse::<Reaction>().unwrap(), Reaction::Zero));
        assert!(matches!("linear_decay(2)".parse::<Reaction>().unwrap(), Reaction::LinearDecay { k } if k == 2.0));
        let r: Reaction = "logistic_clipped(1, 2, 3)".parse().unwrap();
        assert_eq!(r.to_string(), "logistic_clipped(1, 2, 3)");
        assert!(matches!("mystery(1)".parse::<Reaction>(), Err(DataError::UnknownKey(_))));
        assert!(matches!("linear_decay(1, 2)".parse::<Reaction>(), Err(DataError::Parse { .. })));
        assert!(matches!("linear_decay(x)".parse::<Reaction>(), Err(DataError::Parse { .. })));
        let u: InitialData = "two_reservoir(1, 0)".parse().unwrap();
        assert_eq!(u.bulk([0.3, 0.5]), 1.0);
        assert_eq!(u.bulk([0.3, -0.5]), 0.0);
        assert_eq!(u.layer(0.3, [0.5, 0.0]), 0.5);
        assert!(matches!("gaussian_bump(0.5, 0.2, 0)".parse::<InitialData>(), Err(DataError::Parse { .. })));
    }

    #[test]
    fn declared_constants_bound_sampled_quotients() {
        for key in ["linear_decay(1.5)", "logistic_clipped(2, 1, 3)", "langmuir_clipped(1, 0.5, 2)", "zero"] {
            let r: Reaction = key.parse().unwrap();
            let s = r.sampled_lipschitz(1, 0, 10_000, 10.0, 3);
            assert!(s <= 1.05 * r.lipschitz() + 1e-12, "{key}: {s} vs {}", r.lipschitz());
        }
    }

    #[test]
    fn understated_lipschitz_constant_is_rejected() {
        let mut s = SpeciesData::isotropic(1.0, InitialData::Constant(1.0));
        s.f = Reaction::Custom { name: "cube".into(), f: Arc::new(|u| u[0].powi(3)), lipschitz: 1.0 };
        let r = ProblemData::single(s).validate(&ValidationOptions::default());
        assert!(matches!(r, Err(DataError::Lipschitz { .. })));
    }

    #[test]
    fn degenerate_diffusion_is_rejected() {
        let s = SpeciesData::uniform(Mat2::new(1.0, 0.0, 0.0, 0.0), Vec2::zeros(), InitialData::Constant(0.0));
        let r = ProblemData::single(s).validate(&ValidationOptions::default());
        assert!(matches!(r, Err(DataError::Ellipticity { .. })));
    }

    #[test]
    fn manufactured_solution_is_continuous_and_flux_free_at_the_faces() {
        let m = CosineManufactured { eps: 0.25, half_height: 1.0, d_plus: 1.0, d_minus: 2.0 };
        let t = 0.3;
        assert!((m.exact(t, [0.4, 0.25], Region::BulkPlus) - m.exact(t, [0.4, 0.0], Region::Channel)).abs() < 1e-15);
        assert!((m.exact(t, [0.4, -0.25], Region::BulkMinus) - m.exact(t, [0.4, 0.0], Region::Channel)).abs() < 1e-15);
        // ∂_t u − D u'' = s, checked by central differences
        let x = [0.2, 0.6];
        let h = 1e-4;
        let u = |t: f64, y: f64| m.exact(t, [x[0], y], Region::BulkPlus);
        let ut = (u(t + h, x[1]) - u(t - h, x[1])) / (2.0 * h);
        let uyy = (u(t, x[1] + h) - 2.0 * u(t, x[1]) + u(t, x[1] - h)) / (h * h);
        assert!((ut - uyy - m.source(t, x, Region::BulkPlus)).abs() < 1e-6);
    }
}
