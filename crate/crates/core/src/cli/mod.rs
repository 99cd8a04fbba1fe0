//! Command-line surface: argument parsing, dispatch, and JSON/CSV output.

pub mod selftest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::asepsim::{mc_expectation, InitialData, Observable, SimConfig};
use crate::bosegas::{self, KbarForm, SheBudgets, SheParams};
use crate::error::{Error, Result};
use crate::flatmoments::{moment_flat, moment_flat_nu, moment_halfflat, t_eff, KflatParams, Model};
use crate::genfunc::{exptau_transform, GenFuncParams, Method};
use crate::goe::{fgoe_det, fgoe_pf, GoeParams};
use crate::skewlin::{identity_check, Identity};
use crate::{Complex64, Estimate};

/// One evaluation, as written to stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub command: String,
    pub params: BTreeMap<String, Value>,
    pub value: JsonComplex,
    pub error_estimate: f64,
    #[serde(rename = "stderr")]
    pub stderr_mc: Option<f64>,
    pub runtime_ms: u64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JsonComplex {
    pub re: f64,
    pub im: f64,
}

impl From<Complex64> for JsonComplex {
    fn from(z: Complex64) -> Self {
        Self { re: z.re, im: z.im }
    }
}

impl RunResult {
    fn csv_row(&self) -> String {
        let params: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={}", plain(v))).collect();
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.command,
            params.join(";"),
            self.value.re,
            self.value.im,
            self.error_estimate,
            opt(self.stderr_mc.map(|s| s.to_string())),
            self.runtime_ms,
            opt(self.seed.map(|s| s.to_string())),
        )
    }

    fn human(&self) -> String {
        let mut s = format!("{}: {:.12}", self.command, self.value.re);
        if self.value.im != 0.0 {
            s += &format!(" {:+.3e}i", self.value.im);
        }
        s += &format!("  (err {:.2e}", self.error_estimate);
        if let Some(se) = self.stderr_mc {
            s += &format!(", stderr {se:.2e}");
        }
        s += &format!(", {} ms)", self.runtime_ms);
        let params: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={}", plain(v))).collect();
        s + "  " + &params.join(" ")
    }
}

const CSV_HEADER: &str = "command,params,re,im,error_estimate,stderr,runtime_ms,seed";

fn plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_complex(s: &str) -> std::result::Result<Complex64, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let num = |p: &str| f64::from_str(p.trim()).map_err(|e| format!("`{p}`: {e}"));
    match parts.as_slice() {
        [re] => Ok(Complex64::new(num(re)?, 0.0)),
        [re, im] => Ok(Complex64::new(num(re)?, num(im)?)),
        _ => Err(format!("expected re or re,im, got `{s}`")),
    }
}

#[derive(Parser, Debug)]
#[command(name = "flatasep", version, about = "Flat ASEP moment formulas, Fredholm Pfaffians and their oracles")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Asymmetry tau = p/q in (0, 1); default 0.5.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Right jump rate in [0, 1/2); tau = p/(1-p).
    #[arg(long, global = true)]
    p: Option<f64>,
    /// Physical time.
    #[arg(long, global = true, default_value_t = 1.0)]
    t: f64,
    /// Machine-readable output only (one JSON object per line).
    #[arg(long, global = true)]
    json: bool,
    /// Override the main quadrature budget of the subcommand.
    #[arg(long, global = true)]
    nodes: Option<usize>,
    /// Relative error tolerance; a larger error estimate exits with code 3.
    #[arg(long, global = true, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; default is the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Sweep one flag, e.g. `r=-4:4:0.5`; output is CSV.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Write output to FILE instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum Both2 {
    Pf,
    Nu,
    Both,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum GfMethod {
    Series,
    Fredholm,
    Both,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum GoeMethod {
    Pf,
    Det,
    Both,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum InitKind {
    Flat,
    Halfflat,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum FormArg {
    Physical,
    Printed,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Flat moments E[tau^{m h(t,0)/2}].
    Moments {
        #[arg(long)]
        m: usize,
        #[arg(long, value_enum, default_value = "pf")]
        method: Both2,
    },
    /// Half-flat moments E[tau^{m N_x(t)}].
    Halfflat {
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        x: i64,
    },
    /// Monte Carlo estimate of a moment or of the q-exponential transform.
    Simulate {
        #[arg(long, default_value_t = 1)]
        m: u32,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, value_enum, default_value = "flat")]
        init: InitKind,
        /// Site for half-flat N_x.
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        x: i64,
        /// Estimate E[exp_tau(zeta tau^{h/2})] instead of a moment.
        #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
        zeta: Option<Complex64>,
    },
    /// Generating function E[exp_tau(zeta tau^{h/2}; xi)].
    Genfunc {
        #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
        zeta: Complex64,
        /// Default tau^{1/4}.
        #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
        xi: Option<Complex64>,
        #[arg(long, value_enum, default_value = "both")]
        method: GfMethod,
    },
    /// GOE Tracy-Widom distribution at r.
    Goe {
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        r: f64,
        #[arg(long, value_enum, default_value = "both")]
        method: GoeMethod,
    },
    /// Stochastic heat equation moments (t is the SHE time).
    Bosegas {
        #[arg(long)]
        m: usize,
        #[arg(long, value_enum, default_value = "flat")]
        init: InitKind,
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        x: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "physical")]
        form: FormArg,
        #[arg(long, value_enum, default_value = "pf")]
        route: Both2,
    },
    /// Pfaffian identity catalog; value is the worst relative residual.
    Identities {
        /// One tag; default all.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Run the acceptance suite and print a pass/fail table.
    Selftest {
        /// 10^5 Monte Carlo samples instead of 10^6.
        #[arg(long)]
        quick: bool,
    },
}

impl Common {
    fn tau(&self) -> Result<f64> {
        match (self.tau, self.p) {
            (Some(_), Some(_)) => Err(Error::Domain("--tau and --p are mutually exclusive".into())),
            (Some(t), None) => Ok(t),
            (None, Some(p)) => {
                if !(0.0..0.5).contains(&p) {
                    return Err(Error::Domain(format!("p must lie in [0, 1/2), got {p}")));
                }
                Ok(p / (1.0 - p))
            }
            (None, None) => Ok(0.5),
        }
    }

    fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }

    fn check(&self, e: &Estimate) -> Result<()> {
        if e.err > self.tol * e.value.norm().max(1.0) {
            return Err(Error::Truncation(format!(
                "error estimate {:.3e} exceeds tolerance {:.1e} (value {})",
                e.err, self.tol, e.value
            )));
        }
        Ok(())
    }
}

struct Builder {
    command: &'static str,
    params: BTreeMap<String, Value>,
    start: Instant,
}

impl Builder {
    fn new(command: &'static str, params: Value) -> Self {
        let params = match params {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        Self { command, params, start: Instant::now() }
    }

    fn with(&self, key: &str, v: impl Into<Value>) -> Self {
        let mut params = self.params.clone();
        params.insert(key.into(), v.into());
        Self { command: self.command, params, start: self.start }
    }

    fn finish(&self, e: Estimate, stderr: Option<f64>, seed: Option<u64>) -> RunResult {
        RunResult {
            command: self.command.into(),
            params: self.params.clone(),
            value: e.value.into(),
            error_estimate: e.err,
            stderr_mc: stderr,
            runtime_ms: self.start.elapsed().as_millis() as u64,
            seed,
        }
    }
}

fn exact(v: Complex64) -> Estimate {
    Estimate::new(v, 0.0)
}

fn dispatch(cmd: &Command, c: &Common) -> Result<Vec<RunResult>> {
    let t = c.t;
    let mut out = Vec::new();
    match *cmd {
        Command::Moments { m, method } => {
            let tau = c.tau()?;
            let b = Builder::new("moments", json!({"m": m, "tau": tau, "t": t}));
            if matches!(method, Both2::Pf | Both2::Both) {
                let b = b.with("method", "pf");
                let mut kp = KflatParams::new(tau, t)?;
                if let Some(n) = c.nodes {
                    kp.circle_nodes = n;
                }
                let e = moment_flat(m, &kp)?;
                c.check(&e)?;
                out.push(b.finish(e, None, None));
            }
            if matches!(method, Both2::Nu | Both2::Both) {
                let b = b.with("method", "nu");
                let md = Model::new(tau, t_eff(tau, t))?;
                let v = moment_flat_nu(m, md, c.nodes.unwrap_or(96))?;
                out.push(b.finish(exact(v), None, None));
            }
        }
        Command::Halfflat { m, x } => {
            let tau = c.tau()?;
            let b = Builder::new("halfflat", json!({"m": m, "x": x, "tau": tau, "t": t}));
            let md = Model::new(tau, t_eff(tau, t))?;
            let v = moment_halfflat(m, md, x, c.nodes.unwrap_or(64))?;
            out.push(b.finish(exact(v), None, None));
        }
        Command::Simulate { m, samples, init, x, zeta } => {
            let tau = c.tau()?;
            let seed = c.seed.unwrap_or(0);
            let (idata, obs) = match (init, zeta) {
                (InitKind::Flat, Some(z)) => (InitialData::Flat, Observable::ExpTauGen(z)),
                (InitKind::Flat, None) => (InitialData::Flat, Observable::TauPowHalfHeight(m)),
                (InitKind::Halfflat, None) => (InitialData::HalfFlat, Observable::TauPowN(m, x)),
                (InitKind::Halfflat, Some(_)) => {
                    return Err(Error::Domain("--zeta applies to flat data only".into()));
                }
            };
            let mut params = json!({"tau": tau, "t": t, "samples": samples, "init": format!("{init:?}").to_lowercase()});
            match obs {
                Observable::ExpTauGen(z) => params["zeta"] = json!(format!("{},{}", z.re, z.im)),
                Observable::TauPowN(..) => {
                    params["m"] = json!(m);
                    params["x"] = json!(x);
                }
                Observable::TauPowHalfHeight(_) => params["m"] = json!(m),
            }
            let b = Builder::new("simulate", params);
            let cfg = SimConfig::new(tau / (1.0 + tau), t, idata, seed)?;
            let ens = mc_expectation(obs, &cfg, samples, c.workers())?;
            out.push(b.finish(exact(ens.mean), Some(ens.stderr), Some(seed)));
        }
        Command::Genfunc { zeta, xi, method } => {
            let tau = c.tau()?;
            let mut p = GenFuncParams::new(zeta, tau, t)?;
            if let Some(xi) = xi {
                p = p.with_xi(xi)?;
            }
            if let Some(n) = c.nodes {
                p.budgets.lambda_nodes = n;
            }
            let b = Builder::new(
                "genfunc",
                json!({"zeta": format!("{},{}", zeta.re, zeta.im), "xi": format!("{},{}", p.xi.re, p.xi.im), "tau": tau, "t": t}),
            );
            let mut run = |name: &str, m: Method| -> Result<()> {
                let e = exptau_transform(&p, m)?;
                c.check(&e)?;
                out.push(b.with("method", name).finish(e, None, None));
                Ok(())
            };
            if matches!(method, GfMethod::Series | GfMethod::Both) {
                run("series", Method::MomentSeries)?;
            }
            if matches!(method, GfMethod::Fredholm | GfMethod::Both) {
                run("fredholm", Method::FredholmPf)?;
            }
        }
        Command::Goe { r, method } => {
            let b = Builder::new("goe", json!({"r": r}));
            if matches!(method, GoeMethod::Pf | GoeMethod::Both) {
                let p = GoeParams::with_budget(r, c.nodes.unwrap_or(80))?;
                let v = fgoe_pf(&p)?;
                out.push(b.with("method", "pf").finish(exact(Complex64::new(v, 0.0)), None, None));
            }
            if matches!(method, GoeMethod::Det | GoeMethod::Both) {
                let n = c.nodes.unwrap_or(48);
                let (a, d) = (fgoe_det(r, n)?, fgoe_det(r, 2 * n)?);
                let e = Estimate::new(Complex64::new(d, 0.0), (a - d).abs());
                c.check(&e)?;
                out.push(b.with("method", "det").finish(e, None, None));
            }
        }
        Command::Bosegas { m, init, theta, x, alpha, form, route } => {
            let mut budgets = SheBudgets::default();
            if let Some(n) = c.nodes {
                // nodes per unit length of the iR and vertical-line parametrizations
                budgets.sinh_step = 1.0 / n.max(1) as f64;
                budgets.vline_step = 1.0 / n.max(1) as f64;
            }
            let form = match form {
                FormArg::Physical => KbarForm::Physical,
                FormArg::Printed => KbarForm::Printed,
            };
            match init {
                InitKind::Halfflat => {
                    let b = Builder::new(
                        "bosegas",
                        json!({"m": m, "init": "halfflat", "t": t, "theta": theta, "x": x, "alpha": alpha}),
                    );
                    let p = SheParams { t, theta, x, alpha, budgets };
                    let v = bosegas::she_moment_halfflat(m, &p)?;
                    out.push(b.finish(exact(Complex64::new(v, 0.0)), None, None));
                }
                InitKind::Flat => {
                    let b = Builder::new("bosegas", json!({"m": m, "init": "flat", "t": t}));
                    if matches!(route, Both2::Pf | Both2::Both) {
                        let name = if form == KbarForm::Printed { "pf-printed" } else { "pf" };
                        let e = bosegas::she_moment_flat(m, t, &budgets, form)?;
                        c.check(&e)?;
                        out.push(b.with("route", name).finish(e, None, None));
                    }
                    if matches!(route, Both2::Nu | Both2::Both) {
                        let v = bosegas::she_moment_flat_nu(m, t, &budgets)?;
                        out.push(b.with("route", "nu").finish(exact(Complex64::new(v, 0.0)), None, None));
                    }
                }
            }
        }
        Command::Identities { ref name, size, trials } => {
            let ids = match name {
                Some(n) => vec![Identity::from_str(n)?],
                None => Identity::ALL.to_vec(),
            };
            let seed = c.seed.unwrap_or(1);
            for id in ids {
                let size = size.or(c.nodes).unwrap_or_else(|| id.default_size());
                let b = Builder::new("identities", json!({"name": id.as_str(), "size": size, "trials": trials}));
                let rep = identity_check(id, size, trials, seed)?;
                out.push(b.finish(exact(Complex64::new(rep.residual, 0.0)), None, Some(seed)));
            }
        }
        Command::Selftest { .. } => unreachable!("selftest is handled by run"),
    }
    Ok(out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Domain(_) | Error::Numerical(_) => 2,
        Error::Truncation(_) => 3,
    }
}

/// `key=a:b:h` to the flag name and its values.
fn parse_grid(spec: &str) -> Result<(String, Vec<f64>)> {
    let bad = || Error::Domain(format!("grid must look like key=a:b:h, got `{spec}`"));
    let (key, range) = spec.split_once('=').ok_or_else(bad)?;
    let nums: Vec<f64> = range.split(':').map(f64::from_str).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    let [a, b, h] = nums[..] else { return Err(bad()) };
    if !(h > 0.0) || b < a {
        return Err(bad());
    }
    let n = ((b - a) / h + 1e-9).floor() as usize;
    Ok((key.to_string(), (0..=n).map(|i| a + i as f64 * h).collect()))
}

/// argv with `--key v` / `--key=v` removed.
fn strip_flag(argv: &[OsString], key: &str) -> Vec<OsString> {
    let long = format!("--{key}");
    let eq = format!("--{key}=");
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
            continue;
        }
        let s = a.to_string_lossy();
        if s == long {
            skip = true;
        } else if !s.starts_with(&eq) {
            out.push(a.clone());
        }
    }
    out
}

fn emit(text: &str, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Domain(format!("{}: {e}", path.display()))),
        None => {
            let mut so = std::io::stdout().lock();
            // a closed pipe is not an error worth reporting
            let _ = so.write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Numerical(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Evaluates argv and returns the results, without printing.
pub fn execute<I, T>(argv: I) -> Result<Vec<RunResult>>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Domain(e.to_string()))?;
    if let Command::Selftest { .. } = cli.cmd {
        return Err(Error::Domain("selftest produces a table, not results; use run".into()));
    }
    let workers = cli.common.workers();
    with_pool(workers, || dispatch(&cli.cmd, &cli.common))?
}

/// Runs the program on argv, prints, and returns the exit code: 0 on success,
/// 2 on a domain error, 3 when an error estimate exceeds its tolerance.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.cmd {
        Command::Selftest { quick } => return run_selftest(*quick, &cli.common),
        _ => match cli.common.grid.clone() {
            Some(g) => run_grid(&argv, &g),
            None => execute(argv.clone()).map(|rs| {
                rs.iter()
                    .map(|r| {
                        if cli.common.json {
                            serde_json::to_string(r).expect("RunResult serializes")
                        } else {
                            r.human()
                        }
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
                    + "\n"
            }),
        },
    };
    match result.and_then(|text| emit(&text, &cli.common.out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run_grid(argv: &[OsString], spec: &str) -> Result<String> {
    let (key, values) = parse_grid(spec)?;
    let base = strip_flag(&strip_flag(argv, "grid"), &key);
    let mut text = String::from(CSV_HEADER) + "\n";
    for v in values {
        let mut args = base.clone();
        args.push(format!("--{key}").into());
        args.push(v.to_string().into());
        for r in execute(args)? {
            text += &r.csv_row();
            text.push('\n');
        }
    }
    Ok(text)
}

fn run_selftest(quick: bool, c: &Common) -> i32 {
    let mut opts = if quick { selftest::Options::quick() } else { selftest::Options::full() };
    opts.workers = c.workers();
    if let Some(s) = c.seed {
        opts.seed = s;
    }
    let crit = selftest::run_all(&opts);
    let text = if c.json {
        serde_json::to_string_pretty(&crit).expect("criteria serialize") + "\n"
    } else {
        crit.iter().map(|k| k.line() + "\n").collect()
    };
    if let Err(e) = emit(&text, &c.out) {
        eprintln!("error: {e}");
        return 2;
    }
    if crit.iter().all(|k| k.pass) {
        0
    } else {
        1
    }
}
