//! Dispatch of a resolved config to the library and artifact emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rayon::prelude::*;
use serde_json::{json, Value};
use steinlab::bismut::{self, McConfig};
use steinlab::experiments::{self, CltConfig, ContractionConfig, LemmaBudget, ScalingResult, UlaScalingConfig};
use steinlab::functions::TestFunction;
use steinlab::model::{self, DriftKind, DriftModel, ThetaParams};
use steinlab::pair::{self, PairBatch, R1Mode, R2Mode};
use steinlab::paths::{self, BrownianPath, FlowRequest, TimeGrid};
use steinlab::rng;
use steinlab::stein::{self, CacheSpec, Plugins, Quantity, SteinConfig, SteinProblem, TargetMeanMethod};
use thiserror::Error;

use crate::config::{Command, ConfigError, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Module(#[from] steinlab::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("cannot start worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    pub fn to_json(&self) -> Value {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Module(_) => "module",
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => "io",
            CliError::Pool(_) => "workers",
        };
        let mut v = json!({ "status": "error", "kind": kind, "message": self.to_string() });
        if let CliError::Config(e) = self {
            if let Some(k) = e.key() {
                v["key"] = json!(k);
            }
        }
        v
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Outcome of a run: whether every asserted check passed, and the JSON
/// summary that was written.
#[derive(Debug)]
pub struct Report {
    pub pass: bool,
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

struct Sink {
    dir: PathBuf,
    hash: String,
    files: Vec<PathBuf>,
}

impl Sink {
    fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let mut f = BufWriter::new(File::create(&path)?);
        writeln!(f, "# config_hash={}", self.hash)?;
        self.files.push(path);
        Ok(f)
    }

    /// CSV with a leading `schema_version` column.
    fn csv(&mut self, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(self.file(name)?);
        w.write_record(std::iter::once("schema_version").chain(header.iter().map(|s| s.as_str())))?;
        let v = SCHEMA_VERSION.to_string();
        for row in rows {
            w.write_record(std::iter::once(v.clone()).chain(row))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn indexed(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Sets the worker pool, writes the resolved-config sidecar, runs the
/// command and writes `summary.json`.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    if cfg.workers > 0 {
        // The global pool can only be set once per process; later calls keep
        // the first setting.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    std::fs::create_dir_all(&cfg.out)?;
    let mut sink = Sink { dir: cfg.out.clone(), hash: cfg.hash(), files: Vec::new() };
    let mut side = sink.file("config.resolved")?;
    side.write_all(cfg.to_text().as_bytes())?;
    side.flush()?;

    let (pass, body) = match cfg.command {
        Command::Probe => probe(cfg, &mut sink)?,
        Command::Simulate => simulate(cfg, &mut sink)?,
        Command::BismutCheck => bismut_check(cfg, &mut sink)?,
        Command::SteinSolve => stein_solve(cfg, &mut sink)?,
        Command::Residual => residual(cfg, &mut sink)?,
        Command::PairBound => pair_bound(cfg, &mut sink)?,
        Command::UlaScaling => {
            let (m, t) = cfg.model.build()?;
            let r = experiments::ula_scaling(&m, &t, &UlaScalingConfig { steps: cfg.steps.clone(), n_samples: cfg.samples, seeds: cfg.seeds, seed: cfg.seed })?;
            scaling(&r, &mut sink)?
        }
        Command::CltRate => {
            let r = experiments::clt_rate(&CltConfig {
                dist: cfg.clt_dist,
                d: cfg.clt_d,
                n_grid: cfg.n_grid.clone(),
                samples: cfg.samples,
                pair_replicas: cfg.pair_replicas,
                seeds: cfg.seeds,
                seed: cfg.seed,
            })?;
            scaling(&r, &mut sink)?
        }
        Command::Contraction => {
            let (m, t) = cfg.model.build()?;
            let c = ContractionConfig { x0: cfg.x0.clone(), t_grid: cfg.t_grid.clone(), n_samples: cfg.samples, dt: cfg.dt, seeds: cfg.seeds, seed: cfg.seed };
            let r = experiments::contraction_decay(&m, &t, &c)?;
            scaling(&r, &mut sink)?
        }
        Command::LemmaSuite => lemma_suite(cfg, &mut sink)?,
    };

    let summary = json!({
        "status": if pass { "pass" } else { "fail" },
        "command": cfg.command.name(),
        "config_hash": sink.hash,
        "result": body,
    });
    let mut f = BufWriter::new(File::create(sink.dir.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    f.flush()?;
    sink.files.push(sink.dir.join("summary.json"));
    Ok(Report { pass, summary, files: sink.files })
}

type Outcome = Result<(bool, Value)>;

fn probe(cfg: &RunConfig, sink: &mut Sink) -> Outcome {
    let (m, t) = cfg.model.build()?;
    let d = m.dim();
    let probes = model::default_probe_grid(d, 10.0, 21, 16, cfg.seed);
    let r = model::probe_assumption(&m, &t, &probes)?;
    let mut header = indexed("x", d);
    header.extend(cols(&["a2", "a3", "a1a", "a1b"]));
    let rows = probes.iter().zip(&r.slacks).map(|(p, s)| {
        let mut row: Vec<String> = p.x.iter().copied().map(num).collect();
        row.extend([s.a2, s.a3, s.a1a, s.a1b].map(num));
        row
    });
    sink.csv("probe.csv", &header, rows)?;
    Ok((
        r.pass,
        json!({
            "model": m.name(),
            "theta": t,
            "probes": probes.len(),
            "worst_a2": r.worst_a2,
            "worst_a3": r.worst_a3,
            "worst_a1a": r.worst_a1a,
            "worst_a1b": r.worst_a1b,
            "pass": r.pass,
        }),
    ))
}

/// Per-path Jacobian bound `|grad_u X_t| <= e^{-theta0 t} |u|`, up to the
/// multiplicative discretization slack `1 + 10 dt`.
fn simulate(cfg: &RunConfig, sink: &mut Sink) -> Outcome {
    let (m, t) = cfg.model.build()?;
    let d = m.dim();
    let grid = TimeGrid::with_dt(cfg.horizon, cfg.dt)?;
    let req = FlowRequest::first(cfg.u.clone());
    let bundles: Vec<(Vec<f64>, f64, f64)> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let noise = BrownianPath::sample(d, grid, cfg.seed, i as u64);
            let b = paths::simulate_bundle(&m, &cfg.x, &noise, &req)?;
            Ok((b.state.terminal().to_vec(), b.state.max_norm(), b.variation_bound_ratio(t.theta0)))
        })
        .collect::<Result<_>>()?;
    let slack = 1.0 + 10.0 * grid.dt();
    let mut header = cols(&["replica"]);
    header.extend(indexed("x_T", d));
    header.extend(cols(&["max_norm", "bound_ratio"]));
    sink.csv(
        "paths.csv",
        &header,
        bundles.iter().enumerate().map(|(i, (xt, mx, r))| {
            let mut row = vec![i.to_string()];
            row.extend(xt.iter().copied().map(num));
            row.extend([num(*mx), num(*r)]);
            row
        }),
    )?;
    for i in 0..cfg.dump.min(cfg.paths) {
        let noise = BrownianPath::sample(d, grid, cfg.seed, i as u64);
        let b = paths::simulate_bundle(&m, &cfg.x, &noise, &req)?;
        let mut buf = Vec::new();
        b.write_csv(&mut buf)?;
        let text = String::from_utf8(buf).expect("csv is ascii");
        let mut f = sink.file(&format!("path_{i}.csv"))?;
        for (k, line) in text.lines().enumerate() {
            writeln!(f, "{},{line}", if k == 0 { "schema_version".to_string() } else { SCHEMA_VERSION.to_string() })?;
        }
        f.flush()?;
    }
    let worst = bundles.iter().map(|b| b.2).fold(0.0, f64::max);
    let within = bundles.iter().filter(|b| b.2 <= slack).count();
    let pass = within == bundles.len();
    Ok((
        pass,
        json!({
            "model": m.name(),
            "paths": cfg.paths,
            "dt": grid.dt(),
            "max_bound_ratio": worst,
            "allowed_ratio": slack,
            "paths_within_bound": within,
            "pass": pass,
        }),
    ))
}

fn bismut_check(cfg: &RunConfig, sink: &mut Sink) -> Outcome {
    let (m, _) = cfg.model.build()?;
    let h = cfg.h.build(m.dim())?;
    let mc = |k: u64| McConfig { replicas: cfg.replicas, dt: cfg.dt, seed: rng::derive_seed(cfg.seed, k) };
    let ibp = bismut::verify_ibp(&m, &cfg.x, cfg.t, &h, &cfg.u, &mc(1))?;
    let bel = bismut::verify_bel(&m, &cfg.x, cfg.t, &h, &cfg.u, 1e-3, &mc(2))?;
    let second = bismut::verify_second_order(&m, &cfg.x, cfg.t, &h, &cfg.u, &cfg.u2, &mc(3))?;
    let rows = [
        ("ibp", ibp.lhs, ibp.rhs, ibp.se, ibp.pass),
        ("bel", bel.fd_value, bel.bismut_value, bel.se, bel.pass),
        ("second_order", second.lhs, second.rhs, second.se, second.pass),
    ];
    sink.csv(
        "checks.csv",
        &cols(&["check", "lhs", "rhs", "se", "pass"]),
        rows.iter().map(|(n, l, r, se, p)| vec![n.to_string(), num(*l), num(*r), num(*se), p.to_string()]),
    )?;
    let pass = rows.iter().all(|r| r.4);
    Ok((pass, json!({ "model": m.name(), "h": h.name(), "t": cfg.t, "ibp": ibp, "bel": bel, "second_order": second, "pass": pass })))
}

fn target_mean_method(m: &DriftModel, seed: u64) -> TargetMeanMethod {
    match (m.kind(), m.dim()) {
        (DriftKind::Linear(_), _) => TargetMeanMethod::GaussQuadrature { nodes: 40 },
        (_, 1) => TargetMeanMethod::DensityQuadrature { intervals: 20_000 },
        _ => TargetMeanMethod::ErgodicAverage { time_per_chain: 200.0, dt: 1e-2, chains: 16, seed },
    }
}

fn problem(cfg: &RunConfig, m: DriftModel, t: ThetaParams, h: TestFunction) -> Result<SteinProblem> {
    let mu = stein::target_mean(&m, &t, &h, &target_mean_method(&m, rng::derive_seed(cfg.seed, 0x3a)))?;
    Ok(SteinProblem::new(m, t, h, mu)?)
}

/// `grid.T` is a floor: the estimators need at least `5/c`.
fn stein_config(cfg: &RunConfig, p: &SteinProblem) -> SteinConfig {
    SteinConfig {
        horizon: cfg.horizon.max(p.min_horizon().ceil()),
        dt: cfg.dt,
        replicas: cfg.replicas,
        seed: cfg.seed,
        control_variates: cfg.control_variates,
        gradient_control_variates: false,
        richardson: cfg.richardson,
    }
}

fn grad_cache(cfg: &RunConfig, p: &SteinProblem, base: SteinConfig) -> Result<stein::FieldCache> {
    let spec = CacheSpec {
        nodes_per_axis: cfg.cache_nodes,
        half_width_sd: cfg.cache_half_width,
        config: SteinConfig { replicas: cfg.cache_replicas, richardson: false, seed: rng::derive_seed(cfg.seed, 0xc), ..base },
    };
    Ok(p.build_grad_cache(&spec)?)
}

fn stein_solve(cfg: &RunConfig, sink: &mut Sink) -> Outcome {
    let (m, t) = cfg.model.build()?;
    let h = cfg.h.build(m.dim())?;
    let p = problem(cfg, m, t, h)?;
    let sc = stein_config(cfg, &p);
    let mut qs = vec![Quantity::Value, Quantity::Grad { u: cfg.u.clone() }];
    let cache = if cfg.hess {
        qs.push(Quantity::Hess { u1: cfg.u.clone(), u2: cfg.u2.clone() });
        Some(grad_cache(cfg, &p, sc)?)
    } else {
        None
    };
    let plugins = Plugins { f: None, grad: cache.as_ref().map(|c| c as &dyn stein::VectorField) };
    let est = p.estimate_many(&cfg.x, &qs, &sc, plugins)?;
    sink.csv(
        "estimates.csv",
        &cols(&["quantity", "value", "std_error", "mc_error", "plugin_error", "truncation_tail", "horizon", "dt", "replicas"]),
        est.iter().map(|e| {
            vec![
                e.quantity.clone(),
                num(e.value),
                num(e.std_error),
                num(e.mc_error),
                num(e.plugin_error),
                num(e.truncation_tail),
                num(e.horizon),
                num(e.dt),
                e.replicas.to_string(),
            ]
        }),
    )?;
    Ok((true, json!({ "model": p.model().name(), "h": p.test_function().name(), "target_mean": p.target_mean(), "estimates": est })))
}

fn residual(cfg: &RunConfig, sink: &mut Sink) -> Outcome {
    let (m, t) = cfg.model.build()?;
    let h = cfg.h.build(m.dim())?;
    let p = problem(cfg, m, t, h)?;
    let sc = stein_config(cfg, &p);
    let cache = grad_cache(cfg, &p, sc)?;
    let r = p.stein_residual(&cfg.x, &sc, &cache)?;
    sink.csv(
        "residual.csv",
        &cols(&["residual", "se", "mc_error", "plugin_error", "truncation_tail", "pass"]),
        [vec![num(r.residual), num(r.se), num(r.mc_error), num(r.plugin_error), num(r.truncation_tail), r.pass.to_string()]],
    )?;
    Ok((
        r.pass,
        json!({
            "model": p.model().name(),
            "h": p.test_function().name(),
            "point": r.point,
            "residual": r.residual,
            "se": r.se,
            "mc_error": r.mc_error,
            "plugin_error": r.plugin_error,
            "truncation_tail": r.truncation_tail,
            "horizon": sc.horizon,
            "pass": r.pass,
        }),
    ))
}

/// ULA exchangeable pair at `ula.step`. A `pair.lambda` different from the
/// step declares a wrong scaling with no analytic `R2`, the negative control.
fn pair_bound(cfg: &RunConfig, sink: &mut Sink) -> Outcome {
    let (m, t) = cfg.model.build()?;
    let d = m.dim();
    let chain = pair::ula_stationary_samples(&m, t.theta0, cfg.step, &vec![0.0; d], cfg.samples, cfg.seed)?;
    let honest = pair::ula_pair(&m, cfg.step, &chain.samples, rng::derive_seed(cfg.seed, 1))?;
    let declared_ok = cfg.lambda == cfg.step;
    let batch = if declared_ok {
        honest
    } else {
        let n = honest.len();
        let w: Vec<f64> = (0..n).flat_map(|i| honest.w(i).to_vec()).collect();
        let wp: Vec<f64> = (0..n).flat_map(|i| honest.w_prime(i).to_vec()).collect();
        PairBatch::new(d, w, wp, cfg.lambda, R1Mode::Analytic(vec![0.0; n * d]), R2Mode::Regression)?
    };
    let diag = pair::regress_conditional_structure(&batch, &m)?;
    let bound = if declared_ok { pair::bound_terms(&batch)? } else { pair::bound_terms_regressed(&batch, &diag)? };
    let mut header = cols(&["bin", "count"]);
    header.extend(indexed("lo", d));
    header.extend(indexed("hi", d));
    header.extend(indexed("r1_", d));
    header.extend(indexed("r1_se", d));
    sink.csv(
        "bins.csv",
        &header,
        diag.bins.iter().enumerate().map(|(i, b)| {
            let mut row = vec![i.to_string(), b.count.to_string()];
            for v in [&b.lo, &b.hi, &b.r1, &b.r1_se] {
                row.extend(v.iter().copied().map(num));
            }
            row
        }),
    )?;
    let pass = diag.conforms && chain.stationary;
    Ok((
        pass,
        json!({
            "model": m.name(),
            "step": cfg.step,
            "lambda_declared": diag.lambda_declared,
            "lambda_hat": diag.lambda_hat,
            "lambda_se": diag.lambda_se,
            "max_r1_z": diag.max_r1_z,
            "max_r2_z": diag.max_r2_z,
            "z_critical": diag.z_critical,
            "exchangeability": diag.exchangeability,
            "stationary": chain.stationary,
            "geweke_z": chain.geweke_z,
            "conforms": diag.conforms,
            "findings": diag.findings,
            "bound_terms": bound,
            "pass": pass,
        }),
    ))
}

fn scaling(r: &ScalingResult, sink: &mut Sink) -> Outcome {
    sink.csv(
        "rows.csv",
        &cols(&["parameter", "seed", "raw_w1", "baseline_w1", "corrected_w1", "reference_w1", "bound", "term_delta3", "term_r1", "term_r2"]),
        r.rows.iter().map(|row| {
            let t = row.bound_terms.as_ref();
            vec![
                num(row.parameter),
                row.seed.to_string(),
                num(row.raw_w1),
                num(row.baseline_w1),
                num(row.corrected_w1),
                opt(row.reference_w1),
                opt(row.bound),
                opt(t.map(|t| t.term_delta3)),
                opt(t.map(|t| t.term_r1)),
                opt(t.map(|t| t.term_r2)),
            ]
        }),
    )?;
    let pass = r.pass();
    Ok((
        pass,
        json!({
            "experiment": r.experiment,
            "model": r.model,
            "summary": r.summary,
            "fit": r.fit,
            "reference_fit": r.reference_fit,
            "checks": r.checks,
            "pass": pass,
        }),
    ))
}

fn lemma_suite(cfg: &RunConfig, sink: &mut Sink) -> Outcome {
    let (m, t) = cfg.model.build()?;
    let budget = LemmaBudget { paths: cfg.paths, horizon: cfg.horizon, dt: cfg.dt, replicas: cfg.replicas, seed: cfg.seed };
    let ledger = experiments::lemma_suite(&m, &t, &budget)?;
    sink.csv(
        "ledger.csv",
        &cols(&["name", "pass", "value", "bound", "detail"]),
        ledger.entries.iter().map(|e| vec![e.name.clone(), e.pass.to_string(), num(e.value), num(e.bound), e.detail.clone()]),
    )?;
    Ok((ledger.pass, serde_json::to_value(&ledger)?))
}
