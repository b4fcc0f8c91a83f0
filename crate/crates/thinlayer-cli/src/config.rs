//! TOML configuration with sections `[geometry]`, `[transform]`, `[problem]`, `[numerics]`
//! and `[output]`. Unknown keys are rejected; `section.key=value` overrides apply last.

use std::path::{Path, PathBuf};

use thinlayer::geometry::WidthProfile;
use thinlayer::harness::{ExperimentConfig, SpeciesConfig, TransformChoice};
use thinlayer::transform::PinchParams;
use toml::{Table, Value};

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("configuration error for `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError { key: key.into(), reason: reason.into() }
    }
}

/// One documented key: section, name, unit, default.
pub struct KeyDoc {
    pub section: &'static str,
    pub key: &'static str,
    pub unit: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc { section: "geometry", key: "width", unit: "cell length", default: "0.5", help: "channel width: a number, constant(w), linear(w0, slope) or cosine(w0, amp)" },
    KeyDoc { section: "geometry", key: "center", unit: "cell length", default: "0.5", help: "channel centre line z1" },
    KeyDoc { section: "geometry", key: "half_height", unit: "length", default: "1.0", help: "bulk half height H" },
    KeyDoc { section: "transform", key: "kind", unit: "-", default: "\"pinch\"", help: "static or pinch" },
    KeyDoc { section: "transform", key: "amplitude", unit: "-", default: "0.3", help: "pinch amplitude a" },
    KeyDoc { section: "transform", key: "center", unit: "cell length", default: "0.5", help: "pinch centre" },
    KeyDoc { section: "transform", key: "band", unit: "cell length", default: "0.1", help: "identity band next to walls and faces" },
    KeyDoc { section: "transform", key: "core_z1", unit: "cell length", default: "0.3", help: "plateau half width of the bump in z1" },
    KeyDoc { section: "transform", key: "core_z2", unit: "cell length", default: "0.5", help: "plateau half height of the bump in z2" },
    KeyDoc { section: "transform", key: "ramp_time", unit: "time", default: "1.0", help: "duration of the smooth onset (0: fully developed)" },
    KeyDoc { section: "transform", key: "modulation", unit: "-", default: "0.5", help: "x'-modulation 1 + mu sin(2 pi x')" },
    KeyDoc { section: "transform", key: "det_floor", unit: "-", default: "0.1", help: "smallest admissible Jacobian determinant" },
    KeyDoc { section: "problem", key: "d_plus", unit: "length^2/time", default: "1.0", help: "isotropic diffusion in the upper bulk" },
    KeyDoc { section: "problem", key: "d_minus", unit: "length^2/time", default: "1.0", help: "isotropic diffusion in the lower bulk" },
    KeyDoc { section: "problem", key: "d_layer", unit: "length^2/time", default: "1.0", help: "isotropic diffusion in the channels" },
    KeyDoc { section: "problem", key: "q_plus", unit: "length/time", default: "[0.0, 0.0]", help: "advection velocity in the upper bulk" },
    KeyDoc { section: "problem", key: "q_minus", unit: "length/time", default: "[0.0, 0.0]", help: "advection velocity in the lower bulk" },
    KeyDoc { section: "problem", key: "q_layer", unit: "length/time", default: "[0.0, 0.0]", help: "advection velocity in the channels" },
    KeyDoc { section: "problem", key: "f", unit: "1/time", default: "\"zero\"", help: "bulk reaction: zero, linear_decay(k), logistic_clipped(r, K, cap), langmuir_clipped(ka, kd, cap)" },
    KeyDoc { section: "problem", key: "g", unit: "1/time", default: "\"zero\"", help: "channel reaction (same registry)" },
    KeyDoc { section: "problem", key: "h", unit: "length/time", default: "\"zero\"", help: "wall reaction (same registry)" },
    KeyDoc { section: "problem", key: "initial", unit: "concentration", default: "\"gaussian_bump(0.3, 0.2, 0.3)\"", help: "constant(c), two_reservoir(a, b), gaussian_bump(x0, sigma) or gaussian_bump(x1, x2, sigma)" },
    KeyDoc { section: "problem", key: "source", unit: "-", default: "none", help: "manufactured source: cosine" },
    KeyDoc { section: "numerics", key: "eps", unit: "-", default: "[0.25, 0.125]", help: "strictly decreasing scale list, 1/eps integer" },
    KeyDoc { section: "numerics", key: "resolution", unit: "elements per cell side", default: "4", help: "mesh resolution r" },
    KeyDoc { section: "numerics", key: "dt", unit: "time", default: "0.01", help: "time step" },
    KeyDoc { section: "numerics", key: "T", unit: "time", default: "0.5", help: "final time" },
    KeyDoc { section: "numerics", key: "seed", unit: "-", default: "7", help: "random seed for sampled checks" },
    KeyDoc { section: "numerics", key: "audit_density", unit: "samples per axis", default: "16", help: "assumption audit sampling density" },
    KeyDoc { section: "numerics", key: "mms_resolutions", unit: "-", default: "[4, 8, 16]", help: "resolutions of the manufactured-solution study" },
    KeyDoc { section: "numerics", key: "mms_dts", unit: "time", default: "[0.04, 0.02, 0.01]", help: "time steps of the manufactured-solution study" },
    KeyDoc { section: "numerics", key: "mms_T", unit: "time", default: "1.0", help: "final time of the manufactured-solution study" },
    KeyDoc { section: "output", key: "dir", unit: "path", default: "\"output\"", help: "output directory" },
    KeyDoc { section: "output", key: "plot", unit: "-", default: "false", help: "write convergence.svg" },
    KeyDoc { section: "output", key: "timings", unit: "-", default: "true", help: "record wall-clock seconds (false: bitwise reproducible CSVs)" },
    KeyDoc { section: "output", key: "every", unit: "steps", default: "10", help: "snapshot interval of run-micro and run-macro" },
];

/// Help text listing every key.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (section.key [unit] default: description):\n");
    let mut section = "";
    for k in KEYS {
        if k.section != section {
            section = k.section;
            s += &format!("  [{section}]\n");
        }
        s += &format!("    {}.{} [{}] default {}: {}\n", k.section, k.key, k.unit, k.default, k.help);
    }
    s
}

/// Parsed configuration plus CLI-only output settings.
#[derive(Clone, Debug)]
pub struct CliConfig {
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
    pub every: usize,
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` overrides to a parsed table.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (path, value) = o.split_once('=').ok_or_else(|| ConfigError::new(o.clone(), "override must read section.key=value"))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| ConfigError::new(path.trim(), "override key must read section.key"))?;
        let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
        let Value::Table(t) = entry else {
            return Err(ConfigError::new(section, "not a section"));
        };
        t.insert(key.to_string(), parse_value(value));
    }
    Ok(())
}

pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<CliConfig, ConfigError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::new("config", format!("{}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| ConfigError::new("config", format!("{}: {}", p.display(), e.message())))?
        }
        None => Table::new(),
    };
    apply_overrides(&mut table, overrides)?;
    from_table(&table)
}

struct Section<'a> {
    table: Option<&'a Table>,
}

impl<'a> Section<'a> {
    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn err(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::new(key, reason)
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Float(v)) => Ok(*v),
            Some(Value::Integer(v)) => Ok(*v as f64),
            Some(v) => Err(self.err(key, format!("expected a number, got {v}"))),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(v) => Err(self.err(key, format!("expected a nonnegative integer, got {v}"))),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(v) => Err(self.err(key, format!("expected true or false, got {v}"))),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(self.err(key, format!("expected a string, got {v}"))),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Float(x) => Ok(*x),
                    Value::Integer(x) => Ok(*x as f64),
                    other => Err(self.err(key, format!("expected numbers, got {other}"))),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(v) => Err(self.err(key, format!("expected a list of numbers, got {v}"))),
        }
    }

    fn vec2(&self, key: &str) -> Result<[f64; 2], ConfigError> {
        match self.f64_list(key)? {
            None => Ok([0.0; 2]),
            Some(v) if v.len() == 2 => Ok([v[0], v[1]]),
            Some(_) => Err(self.err(key, "expected two components")),
        }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.string(key)? {
            None => Ok(default),
            Some(s) => s.parse().map_err(|e: T::Err| self.err(key, e.to_string())),
        }
    }
}

fn allowed(section: &str) -> Vec<&'static str> {
    KEYS.iter().filter(|k| k.section == section).map(|k| k.key).collect()
}

fn sections(table: &Table) -> Result<[Section<'_>; 5], ConfigError> {
    const NAMES: [&str; 5] = ["geometry", "transform", "problem", "numerics", "output"];
    for (name, value) in table {
        if !NAMES.contains(&name.as_str()) {
            return Err(ConfigError::new(name.clone(), "unknown section"));
        }
        let Value::Table(t) = value else {
            return Err(ConfigError::new(name.clone(), "expected a section"));
        };
        let keys = allowed(name);
        if let Some(k) = t.keys().find(|k| !keys.contains(&k.as_str())) {
            return Err(ConfigError::new(format!("{name}.{k}"), "unknown key"));
        }
    }
    Ok(NAMES.map(|name| Section { table: table.get(name).and_then(Value::as_table) }))
}

fn width_profile(s: &Section) -> Result<WidthProfile, ConfigError> {
    match s.get("width") {
        None => Ok(WidthProfile::Constant(0.5)),
        Some(Value::Float(w)) => Ok(WidthProfile::Constant(*w)),
        Some(Value::Integer(w)) => Ok(WidthProfile::Constant(*w as f64)),
        Some(Value::String(text)) => {
            let bad = |r: &str| ConfigError::new("width", format!("`{text}`: {r}"));
            let t = text.trim();
            let open = t.find('(').ok_or_else(|| bad("expected name(args)"))?;
            if !t.ends_with(')') {
                return Err(bad("missing closing parenthesis"));
            }
            let args = t[open + 1..t.len() - 1]
                .split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|_| bad("arguments must be numbers")))
                .collect::<Result<Vec<_>, _>>()?;
            match (&t[..open], args.as_slice()) {
                ("constant", [w]) => Ok(WidthProfile::Constant(*w)),
                ("linear", [w0, slope]) => Ok(WidthProfile::Linear { w0: *w0, slope: *slope }),
                ("cosine", [w0, amp]) => Ok(WidthProfile::Cosine { w0: *w0, amp: *amp }),
                _ => Err(bad("expected constant(w), linear(w0, slope) or cosine(w0, amp)")),
            }
        }
        Some(v) => Err(ConfigError::new("width", format!("expected a number or profile string, got {v}"))),
    }
}

pub fn from_table(table: &Table) -> Result<CliConfig, ConfigError> {
    let [geo, tr, pb, num, out] = sections(table)?;
    let d = ExperimentConfig::default();
    let dp = PinchParams::default();
    let transform = match tr.string("kind")?.as_deref() {
        None | Some("pinch") => TransformChoice::Pinch(PinchParams {
            center: tr.f64("center", dp.center)?,
            amplitude: tr.f64("amplitude", dp.amplitude)?,
            band: tr.f64("band", dp.band)?,
            core_z1: tr.f64("core_z1", dp.core_z1)?,
            core_z2: tr.f64("core_z2", dp.core_z2)?,
            ramp_time: tr.f64("ramp_time", dp.ramp_time)?,
            modulation: tr.f64("modulation", dp.modulation)?,
        }),
        Some("static") => TransformChoice::Static,
        Some(other) => return Err(ConfigError::new("kind", format!("unknown transform `{other}` (static or pinch)"))),
    };
    let ds = SpeciesConfig::default();
    let species = SpeciesConfig {
        d_plus: pb.f64("d_plus", ds.d_plus)?,
        d_minus: pb.f64("d_minus", ds.d_minus)?,
        d_layer: pb.f64("d_layer", ds.d_layer)?,
        q_plus: pb.vec2("q_plus")?,
        q_minus: pb.vec2("q_minus")?,
        q_layer: pb.vec2("q_layer")?,
        f: pb.parsed("f", ds.f.clone())?,
        g: pb.parsed("g", ds.g.clone())?,
        h: pb.parsed("h", ds.h.clone())?,
        initial: pb.parsed("initial", ds.initial.clone())?,
        source: match pb.string("source")?.as_deref() {
            None | Some("") | Some("none") => None,
            Some(s) => Some(s.parse().map_err(|e: thinlayer::problem::DataError| ConfigError::new("source", e.to_string()))?),
        },
    };
    let usize_list = |key: &str, default: Vec<usize>| -> Result<Vec<usize>, ConfigError> {
        match num.f64_list(key)? {
            None => Ok(default),
            Some(v) => v
                .into_iter()
                .map(|x| if x >= 1.0 && x.fract() == 0.0 { Ok(x as usize) } else { Err(ConfigError::new(key, "expected positive integers")) })
                .collect(),
        }
    };
    let experiment = ExperimentConfig {
        width: width_profile(&geo)?,
        center: geo.f64("center", d.center)?,
        half_height: geo.f64("half_height", d.half_height)?,
        transform,
        det_floor: tr.f64("det_floor", d.det_floor)?,
        species: vec![species],
        eps: num.f64_list("eps")?.unwrap_or(d.eps.clone()),
        resolution: num.usize("resolution", d.resolution)?,
        dt: num.f64("dt", d.dt)?,
        t_end: num.f64("T", d.t_end)?,
        mms_resolutions: usize_list("mms_resolutions", d.mms_resolutions.clone())?,
        mms_dts: num.f64_list("mms_dts")?.unwrap_or(d.mms_dts.clone()),
        mms_t_end: num.f64("mms_T", d.mms_t_end)?,
        audit_density: num.usize("audit_density", d.audit_density)?,
        output_dir: None,
        seed: num.usize("seed", d.seed as usize)? as u64,
        plot: out.bool("plot", d.plot)?,
        timings: out.bool("timings", d.timings)?,
    };
    let output_dir = PathBuf::from(out.string("dir")?.unwrap_or_else(|| "output".into()));
    let every = out.usize("every", 10)?.max(1);
    experiment.validate().map_err(|e| match e {
        thinlayer::Error::Config { key, reason } => ConfigError { key, reason },
        other => ConfigError::new("config", other.to_string()),
    })?;
    Ok(CliConfig { experiment: ExperimentConfig { output_dir: Some(output_dir.clone()), ..experiment }, output_dir, every })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, overrides: &[&str]) -> Result<CliConfig, ConfigError> {
        let mut t: Table = text.parse().unwrap();
        apply_overrides(&mut t, &overrides.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
        from_table(&t)
    }

    #[test]
    fn empty_file_gives_documented_defaults() {
        let c = parse("", &[]).unwrap().experiment;
        assert_eq!(c.eps, vec![0.25, 0.125]);
        assert_eq!(c.resolution, 4);
        assert_eq!(c.dt, 1e-2);
        assert_eq!(c.t_end, 0.5);
    }

    #[test]
    fn non_integer_inverse_eps() {
        let e = parse("[numerics]\neps = [0.3]\n", &[]).unwrap_err();
        assert_eq!(e, ConfigError::new("eps", "1/ε must be an integer"));
    }

    #[test]
    fn override_wins_over_file() {
        let c = parse("[numerics]\ndt = 0.01\n", &["numerics.dt=0.005"]).unwrap().experiment;
        assert_eq!(c.dt, 0.005);
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(parse("[numerics]\nfoo = 1\n", &[]).unwrap_err().key, "numerics.foo");
        assert_eq!(parse("[bogus]\n", &[]).unwrap_err().key, "bogus");
    }

    #[test]
    fn string_overrides_and_profiles() {
        let c = parse(
            "[geometry]\nwidth = \"linear(0.4, 0.05)\"\n",
            &["problem.initial=two_reservoir(1, 0)", "transform.kind=static"],
        )
        .unwrap()
        .experiment;
        assert!(matches!(c.width, WidthProfile::Linear { .. }));
        assert_eq!(c.transform, TransformChoice::Static);
        assert_eq!(c.species[0].initial.to_string(), "two_reservoir(1, 0)");
    }

    #[test]
    fn bad_registry_key_is_reported() {
        let e = parse("[problem]\nf = \"explode(2)\"\n", &[]).unwrap_err();
        assert_eq!(e.key, "f");
    }

    #[test]
    fn every_key_is_documented_in_help() {
        let help = keys_help();
        for k in KEYS {
            assert!(help.contains(&format!("{}.{}", k.section, k.key)));
        }
    }
}
