//! Flat `key = value` run configuration with dotted namespaces.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use steinlab::functions::TestFunctionSpec;
use steinlab::model::{ModelSpec, ThetaParams};
use steinlab::pair::CltDistribution;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("key `{0}` is set twice")]
    Duplicate(String),

    #[error("missing required key `{0}`")]
    Missing(String),

    #[error("`{key}` = `{value}`: {reason}")]
    Invalid { key: String, value: String, reason: String },

    #[error("`{key}` = {value} is out of range: {bound}")]
    OutOfRange { key: String, value: String, bound: String },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey(k) | ConfigError::Duplicate(k) | ConfigError::Missing(k) => Some(k),
            ConfigError::Invalid { key, .. } | ConfigError::OutOfRange { key, .. } => Some(key),
            _ => None,
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Every accepted key with its flag help. Flags are `--<key>`.
pub const KEYS: &[(&str, &str)] = &[
    ("command", "experiment to run"),
    ("seed", "64-bit master seed"),
    ("workers", "worker threads (0 = one per core)"),
    ("out", "output directory"),
    ("model.kind", "linear | power | counterexample"),
    ("model.A", "linear drift matrix: `identity` or rows `a,b;c,d`"),
    ("model.d", "dimension"),
    ("model.c", "power/counterexample coefficient"),
    ("model.p", "power/counterexample exponent"),
    ("model.theta", "declared theta0..theta4 for the counterexample"),
    ("h.kind", "coordinate | coordinate_square | square_norm | abs | sin | linear | constant"),
    ("h.i", "coordinate index for h"),
    ("h.a", "coefficients of a linear h"),
    ("h.c", "value of a constant h"),
    ("x", "evaluation point"),
    ("u", "first direction"),
    ("u2", "second direction"),
    ("grid.T", "horizon"),
    ("grid.dt", "time step"),
    ("grid.t", "identity-check time"),
    ("budget.replicas", "Monte Carlo replicas"),
    ("budget.paths", "simulated paths"),
    ("budget.seeds", "replicate seeds for exponent fits"),
    ("budget.samples", "samples per measure"),
    ("budget.pair_replicas", "exchangeable pairs per grid point"),
    ("cache.nodes", "plug-in cache nodes per axis"),
    ("cache.half_width", "plug-in cache half-width in target sd"),
    ("cache.replicas", "replicas per cache node"),
    ("stein.hess", "also estimate the Hessian (builds a gradient cache)"),
    ("stein.richardson", "Richardson-extrapolate the value"),
    ("stein.control_variates", "martingale control variates for the value"),
    ("ula.step", "ULA step s"),
    ("ula.steps", "ULA step grid"),
    ("pair.lambda", "declared pair lambda (defaults to the step)"),
    ("clt.dist", "rademacher | bounded_uniform"),
    ("clt.d", "CLT dimension"),
    ("clt.n_grid", "CLT sample sizes"),
    ("contraction.x0", "contraction start point"),
    ("contraction.t_grid", "contraction times"),
    ("simulate.dump", "number of per-replica path dumps"),
];

/// Short spellings accepted in files and on the command line.
pub const ALIASES: &[(&str, &str)] = &[("model", "model.kind"), ("A", "model.A"), ("d", "model.d"), ("step", "ula.step"), ("steps", "ula.steps")];

pub fn canonical_key(key: &str) -> Result<&'static str> {
    if let Some((_, k)) = ALIASES.iter().find(|(a, _)| *a == key) {
        return Ok(k);
    }
    KEYS.iter().map(|(k, _)| *k).find(|k| *k == key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))
}

pub type RawConfig = BTreeMap<&'static str, String>;

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str) -> Result<RawConfig> {
    let mut map = RawConfig::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: n + 1, text: line.to_string() })?;
        let k = canonical_key(k.trim())?;
        if map.insert(k, v.trim().to_string()).is_some() {
            return Err(ConfigError::Duplicate(k.to_string()));
        }
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Probe,
    Simulate,
    BismutCheck,
    SteinSolve,
    Residual,
    PairBound,
    UlaScaling,
    CltRate,
    Contraction,
    LemmaSuite,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Probe,
        Command::Simulate,
        Command::BismutCheck,
        Command::SteinSolve,
        Command::Residual,
        Command::PairBound,
        Command::UlaScaling,
        Command::CltRate,
        Command::Contraction,
        Command::LemmaSuite,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Probe => "probe",
            Command::Simulate => "simulate",
            Command::BismutCheck => "bismut-check",
            Command::SteinSolve => "stein-solve",
            Command::Residual => "residual",
            Command::PairBound => "pair-bound",
            Command::UlaScaling => "ula-scaling",
            Command::CltRate => "clt-rate",
            Command::Contraction => "contraction",
            Command::LemmaSuite => "lemma-suite",
        }
    }

    /// Defaults filled in before validation. Keys whose default depends on
    /// the dimension (`x`, `u`, `u2`, `contraction.x0`) are filled later.
    fn defaults(&self) -> Vec<(&'static str, &'static str)> {
        let mut v = vec![
            ("seed", "0"),
            ("workers", "0"),
            ("out", "out"),
            ("model.kind", "linear"),
            ("model.A", "identity"),
            ("model.d", "1"),
            ("h.kind", "coordinate"),
            ("h.i", "0"),
            ("grid.T", "10"),
            ("grid.dt", "0.001"),
            ("grid.t", "1"),
            ("budget.replicas", "10000"),
            ("budget.paths", "1000"),
            ("budget.seeds", "5"),
            ("budget.samples", "4000"),
            ("budget.pair_replicas", "2000"),
            ("cache.nodes", "17"),
            ("cache.half_width", "4"),
            ("cache.replicas", "1000"),
            ("stein.hess", "false"),
            ("stein.richardson", "true"),
            ("stein.control_variates", "true"),
            ("ula.step", "0.05"),
            ("ula.steps", "0.2,0.1,0.05,0.025"),
            ("clt.dist", "rademacher"),
            ("clt.d", "1"),
            ("clt.n_grid", "8,16,32,64,128"),
            ("contraction.t_grid", "0.5,1,1.5,2,2.5,3"),
            ("simulate.dump", "0"),
        ];
        let specific: &[(&str, &str)] = match self {
            Command::Simulate => &[("grid.T", "2")],
            Command::Residual => &[("grid.dt", "0.002"), ("budget.replicas", "20000")],
            Command::PairBound => &[("budget.samples", "20000")],
            Command::CltRate => &[("budget.samples", "200000")],
            Command::LemmaSuite => &[("grid.T", "2"), ("budget.paths", "10000"), ("budget.replicas", "20000")],
            _ => &[],
        };
        for (k, val) in specific {
            v.retain(|(key, _)| key != k);
            v.push((k, val));
        }
        v
    }
}

impl FromStr for Command {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| ConfigError::Invalid {
            key: "command".into(),
            value: s.into(),
            reason: format!("expected one of {}", Command::ALL.map(|c| c.name()).join(", ")),
        })
    }
}

/// Fully resolved run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub model: ModelSpec,
    pub h: TestFunctionSpec,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub u2: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub t: f64,
    pub replicas: usize,
    pub paths: usize,
    pub seeds: usize,
    pub samples: usize,
    pub pair_replicas: usize,
    pub cache_nodes: usize,
    pub cache_half_width: f64,
    pub cache_replicas: usize,
    pub hess: bool,
    pub richardson: bool,
    pub control_variates: bool,
    pub step: f64,
    pub steps: Vec<f64>,
    pub lambda: f64,
    pub clt_dist: CltDistribution,
    pub clt_d: usize,
    pub n_grid: Vec<usize>,
    pub x0: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub dump: usize,
}

pub const MAX_DIM: usize = 3;
pub const MIN_SEEDS: usize = steinlab::experiments::MIN_SEEDS;

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), value: value.into(), reason: reason.into() }
}

fn out_of_range(key: &str, value: impl Display, bound: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange { key: key.into(), value: value.to_string(), bound: bound.into() }
}

fn scalar<T: FromStr>(key: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| invalid(key, s, format!("expected {}", std::any::type_name::<T>())))
}

fn list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',').map(|p| scalar(key, p.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn unit(d: usize, i: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = scale;
    v
}

struct Lookup<'a> {
    map: &'a RawConfig,
    user: &'a RawConfig,
}

impl Lookup<'_> {
    fn raw(&self, key: &str) -> Result<&str> {
        self.map.get(key).map(|s| s.as_str()).ok_or_else(|| ConfigError::Missing(key.into()))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        scalar(key, self.raw(key)?)
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        list(key, self.raw(key)?)
    }

    fn positive(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(out_of_range(key, v, "must be finite and > 0"));
        }
        Ok(v)
    }

    fn at_least(&self, key: &str, min: usize) -> Result<usize> {
        let v: usize = self.get(key)?;
        if v < min {
            return Err(out_of_range(key, v, format!("must be >= {min}")));
        }
        Ok(v)
    }

    fn vector(&self, key: &str, d: usize, default: Vec<f64>) -> Result<Vec<f64>> {
        let v = match self.map.get(key) {
            Some(s) => list(key, s)?,
            None => default,
        };
        if v.len() != d {
            return Err(invalid(key, &join(&v), format!("expected {d} components")));
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(invalid(key, &join(&v), "components must be finite"));
        }
        Ok(v)
    }
}

fn check_step(key: &str, s: f64) -> Result<()> {
    if !(s > 0.0 && s < (-1.0f64).exp()) {
        return Err(out_of_range(key, s, "step must satisfy 0 < s < 1/e"));
    }
    Ok(())
}

fn parse_model(l: &Lookup) -> Result<ModelSpec> {
    let kind = l.raw("model.kind")?;
    let d = l.at_least("model.d", 1)?;
    let spec = match kind {
        "linear" => {
            let raw = l.raw("model.A")?;
            let a = if raw == "identity" {
                (0..d).map(|i| unit(d, i, 1.0)).collect()
            } else {
                let rows: Vec<Vec<f64>> = raw.split(';').map(|r| list("model.A", r)).collect::<Result<_>>()?;
                if rows.iter().any(|r| r.len() != rows.len()) {
                    return Err(invalid("model.A", raw, "matrix must be square"));
                }
                if l.user.contains_key("model.d") && rows.len() != d {
                    return Err(invalid("model.d", &d.to_string(), format!("model.A is {0} x {0}", rows.len())));
                }
                rows
            };
            ModelSpec::Linear { a }
        }
        "power" | "counterexample" => {
            let c = l.positive("model.c")?;
            let p: f64 = l.get("model.p")?;
            if !(p >= 0.0 && p.is_finite()) {
                return Err(out_of_range("model.p", p, "must be finite and >= 0"));
            }
            if kind == "power" {
                ModelSpec::Power { c, p, d }
            } else {
                let t: Vec<f64> = l.list("model.theta")?;
                if t.len() != 5 {
                    return Err(invalid("model.theta", l.raw("model.theta")?, "expected theta0,theta1,theta2,theta3,theta4"));
                }
                let theta = ThetaParams { theta0: t[0], theta1: t[1], theta2: t[2], theta3: t[3], theta4: t[4] };
                ModelSpec::Counterexample { c, p, d, theta }
            }
        }
        other => return Err(invalid("model.kind", other, "expected linear, power or counterexample")),
    };
    if spec.dim() > MAX_DIM {
        return Err(out_of_range("model.d", spec.dim(), format!("dimension must be <= {MAX_DIM}")));
    }
    Ok(spec)
}

fn parse_h(l: &Lookup, d: usize) -> Result<TestFunctionSpec> {
    let index = || -> Result<usize> {
        let i: usize = l.get("h.i")?;
        if i >= d {
            return Err(out_of_range("h.i", i, format!("index must be < d = {d}")));
        }
        Ok(i)
    };
    Ok(match l.raw("h.kind")? {
        "coordinate" => TestFunctionSpec::Coordinate { i: index()? },
        "coordinate_square" => TestFunctionSpec::CoordinateSquare { i: index()? },
        "sin" => TestFunctionSpec::Sin { i: index()? },
        "square_norm" => TestFunctionSpec::SquareNorm,
        "abs" => TestFunctionSpec::Abs,
        "linear" => TestFunctionSpec::Linear { a: l.vector("h.a", d, unit(d, 0, 1.0))? },
        "constant" => TestFunctionSpec::Constant { c: l.map.get("h.c").map(|s| scalar("h.c", s)).transpose()?.unwrap_or(1.0) },
        other => return Err(invalid("h.kind", other, "expected coordinate, coordinate_square, square_norm, abs, sin, linear or constant")),
    })
}

impl RunConfig {
    /// Fills defaults for the command and validates. `user` holds only the
    /// keys that were set explicitly.
    pub fn from_raw(user: &RawConfig) -> Result<Self> {
        let command: Command = user.get("command").ok_or_else(|| ConfigError::Missing("command".into()))?.parse()?;
        let mut map: RawConfig = command.defaults().into_iter().map(|(k, v)| (k, v.to_string())).collect();
        if user.get("model.kind").is_some_and(|k| k != "linear") {
            map.insert("model.c", "1".into());
            map.insert("model.p", "2".into());
        }
        map.extend(user.iter().map(|(k, v)| (*k, v.clone())));
        let l = Lookup { map: &map, user };

        let model = parse_model(&l)?;
        let d = model.dim();
        let h = parse_h(&l, d)?;
        let x = l.vector("x", d, unit(d, 0, 0.5))?;
        let u = l.vector("u", d, unit(d, 0, 1.0))?;
        let u2 = l.vector("u2", d, unit(d, d - 1, 1.0))?;
        for (key, v) in [("u", &u), ("u2", &u2)] {
            if v.iter().all(|c| *c == 0.0) {
                return Err(invalid(key, &join(v), "direction must be nonzero"));
            }
        }

        let horizon = l.positive("grid.T")?;
        let dt = l.positive("grid.dt")?;
        if dt > horizon {
            return Err(out_of_range("grid.dt", dt, format!("must be <= grid.T = {horizon}")));
        }
        let t = l.positive("grid.t")?;
        if command == Command::BismutCheck && t < 4.0 * dt {
            return Err(out_of_range("grid.t", t, format!("weights need t >= 4 dt = {}", 4.0 * dt)));
        }

        let step = l.positive("ula.step")?;
        check_step("ula.step", step)?;
        let steps: Vec<f64> = l.list("ula.steps")?;
        if steps.len() < 2 {
            return Err(invalid("ula.steps", l.raw("ula.steps")?, "need at least two steps"));
        }
        for &s in &steps {
            check_step("ula.steps", s)?;
        }
        let lambda = match map.get("pair.lambda") {
            Some(_) => l.positive("pair.lambda")?,
            None => step,
        };

        let clt_dist = match l.raw("clt.dist")? {
            "rademacher" => CltDistribution::Rademacher,
            "bounded_uniform" => CltDistribution::BoundedUniform,
            other => return Err(invalid("clt.dist", other, "expected rademacher or bounded_uniform")),
        };
        let clt_d = l.at_least("clt.d", 1)?;
        if clt_d > MAX_DIM {
            return Err(out_of_range("clt.d", clt_d, format!("dimension must be <= {MAX_DIM}")));
        }
        let n_grid: Vec<usize> = l.list("clt.n_grid")?;
        if n_grid.len() < 2 || n_grid.contains(&0) {
            return Err(invalid("clt.n_grid", l.raw("clt.n_grid")?, "need at least two positive sizes"));
        }
        let t_grid: Vec<f64> = l.list("contraction.t_grid")?;
        if t_grid.len() < 2 || t_grid.iter().any(|t| !(*t > 0.0)) {
            return Err(invalid("contraction.t_grid", l.raw("contraction.t_grid")?, "need at least two positive times"));
        }

        Ok(RunConfig {
            command,
            seed: l.get("seed")?,
            workers: l.get("workers")?,
            out: PathBuf::from(l.raw("out")?),
            h,
            x,
            u,
            u2,
            horizon,
            dt,
            t,
            replicas: l.at_least("budget.replicas", 2)?,
            paths: l.at_least("budget.paths", 1)?,
            seeds: {
                let s: usize = l.get("budget.seeds")?;
                if s < MIN_SEEDS {
                    return Err(out_of_range("budget.seeds", s, format!("exponent SEs need at least {MIN_SEEDS} replicate seeds")));
                }
                s
            },
            samples: l.at_least("budget.samples", 2)?,
            pair_replicas: l.at_least("budget.pair_replicas", 2)?,
            cache_nodes: l.at_least("cache.nodes", 2)?,
            cache_half_width: l.positive("cache.half_width")?,
            cache_replicas: l.at_least("cache.replicas", 2)?,
            hess: l.get("stein.hess")?,
            richardson: l.get("stein.richardson")?,
            control_variates: l.get("stein.control_variates")?,
            step,
            steps,
            lambda,
            clt_dist,
            clt_d,
            n_grid,
            x0: l.vector("contraction.x0", d, unit(d, 0, 3.0))?,
            t_grid,
            dump: l.get("simulate.dump")?,
            model,
        })
    }

    /// Resolved `key = value` pairs in `KEYS` order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v: Vec<(&'static str, String)> = vec![
            ("command", self.command.name().into()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("out", self.out.display().to_string()),
        ];
        match &self.model {
            ModelSpec::Linear { a } => {
                v.push(("model.kind", "linear".into()));
                v.push(("model.A", a.iter().map(|r| join(r)).collect::<Vec<_>>().join(";")));
                v.push(("model.d", a.len().to_string()));
            }
            ModelSpec::Power { c, p, d } => {
                v.push(("model.kind", "power".into()));
                v.push(("model.d", d.to_string()));
                v.push(("model.c", c.to_string()));
                v.push(("model.p", p.to_string()));
            }
            ModelSpec::Counterexample { c, p, d, theta } => {
                v.push(("model.kind", "counterexample".into()));
                v.push(("model.d", d.to_string()));
                v.push(("model.c", c.to_string()));
                v.push(("model.p", p.to_string()));
                v.push(("model.theta", join(&[theta.theta0, theta.theta1, theta.theta2, theta.theta3, theta.theta4])));
            }
        }
        let (kind, extra) = match &self.h {
            TestFunctionSpec::Coordinate { i } => ("coordinate", Some(("h.i", i.to_string()))),
            TestFunctionSpec::CoordinateSquare { i } => ("coordinate_square", Some(("h.i", i.to_string()))),
            TestFunctionSpec::Sin { i } => ("sin", Some(("h.i", i.to_string()))),
            TestFunctionSpec::SquareNorm => ("square_norm", None),
            TestFunctionSpec::Abs => ("abs", None),
            TestFunctionSpec::Linear { a } => ("linear", Some(("h.a", join(a)))),
            TestFunctionSpec::Constant { c } => ("constant", Some(("h.c", c.to_string()))),
        };
        v.push(("h.kind", kind.into()));
        v.extend(extra);
        v.extend([
            ("x", join(&self.x)),
            ("u", join(&self.u)),
            ("u2", join(&self.u2)),
            ("grid.T", self.horizon.to_string()),
            ("grid.dt", self.dt.to_string()),
            ("grid.t", self.t.to_string()),
            ("budget.replicas", self.replicas.to_string()),
            ("budget.paths", self.paths.to_string()),
            ("budget.seeds", self.seeds.to_string()),
            ("budget.samples", self.samples.to_string()),
            ("budget.pair_replicas", self.pair_replicas.to_string()),
            ("cache.nodes", self.cache_nodes.to_string()),
            ("cache.half_width", self.cache_half_width.to_string()),
            ("cache.replicas", self.cache_replicas.to_string()),
            ("stein.hess", self.hess.to_string()),
            ("stein.richardson", self.richardson.to_string()),
            ("stein.control_variates", self.control_variates.to_string()),
            ("ula.step", self.step.to_string()),
            ("ula.steps", join(&self.steps)),
            ("pair.lambda", self.lambda.to_string()),
            (
                "clt.dist",
                match self.clt_dist {
                    CltDistribution::Rademacher => "rademacher",
                    CltDistribution::BoundedUniform => "bounded_uniform",
                }
                .into(),
            ),
            ("clt.d", self.clt_d.to_string()),
            ("clt.n_grid", join(&self.n_grid)),
            ("contraction.x0", join(&self.x0)),
            ("contraction.t_grid", join(&self.t_grid)),
            ("simulate.dump", self.dump.to_string()),
        ]);
        v
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the resolved config without `out`, so runs that differ only
    /// in where they write produce identical files.
    pub fn hash(&self) -> String {
        let text: String = self.to_pairs().into_iter().filter(|(k, _)| *k != "out").map(|(k, v)| format!("{k} = {v}\n")).collect();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads the optional file, lays the flag values over it and resolves.
pub fn parse_config(file: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig> {
    let mut raw = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?;
            parse_text(&text)?
        }
        None => RawConfig::new(),
    };
    for (k, v) in flags {
        raw.insert(canonical_key(k)?, v.clone());
    }
    RunConfig::from_raw(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> RawConfig {
        parse_text(text).unwrap()
    }

    #[test]
    fn minimal_lemma_suite() {
        let c = RunConfig::from_raw(&raw("command = lemma-suite\nmodel = linear\nA = identity\nd = 1\nseed = 42")).unwrap();
        assert_eq!(c.command, Command::LemmaSuite);
        assert_eq!(c.model, ModelSpec::Linear { a: vec![vec![1.0]] });
        assert_eq!(c.seed, 42);
        assert_eq!((c.horizon, c.paths, c.replicas), (2.0, 10_000, 20_000));
    }

    #[test]
    fn large_step_cites_the_bound() {
        let e = RunConfig::from_raw(&raw("command = ula-scaling\nstep = 0.5")).unwrap_err();
        assert!(e.to_string().contains("s < 1/e"), "{e}");
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_text("command = probe\ngrid.dtt = 0.1").unwrap_err();
        assert_eq!(e.key(), Some("grid.dtt"));
        assert!(e.to_string().contains("grid.dtt"));
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::from_raw(&raw("command = residual\nmodel.kind = power\nmodel.d = 2\nx = 0.25,-1\nh.kind = sin\nh.i = 1")).unwrap();
        let again = RunConfig::from_raw(&parse_text(&c.to_text()).unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn matrix_rows_set_the_dimension() {
        let c = RunConfig::from_raw(&raw("command = probe\nmodel.A = 2,0;0,1")).unwrap();
        assert_eq!(c.model.dim(), 2);
        assert_eq!(c.x, vec![0.5, 0.0]);
        assert!(RunConfig::from_raw(&raw("command = probe\nmodel.A = 2,0;0,1\nmodel.d = 3")).is_err());
    }
}
