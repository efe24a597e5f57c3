//! Run configuration and the batch commands behind the `equity-alloc` binary.
//!
//! A run is described by one TOML document; every section rejects unknown
//! keys. Each command writes into its own subdirectory of the output
//! directory and returns a process exit code:
//! 0 success, 1 infeasible or failed check, 2 configuration error,
//! 3 numerical failure.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{chebyshev_containment, ConstraintConfig, Evaluation};
use crate::contracts::{generate_universe, verify_hypotheses, ContractUniverse, GenSpec, Runoff, DEFAULT_HYPOTHESIS_TOL};
use crate::forms::{spectrum, write_spectrum_csv};
use crate::linear::Layout;
use crate::optimizer::report::{summary, write_report};
use crate::optimizer::{
    solve_basic, solve_quadratic_model, solve_relaxed, BasicConfig, RelaxedConfig, SolveError, SolveReport, SolverSettings,
    Status,
};
use crate::portfolio::{DividendPolicy, PortfolioVariable};
use crate::tree::{AdaptedProcess, TreeSpec};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing artifact {0}; run the producing command first")]
    Missing(PathBuf),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        EXIT_CONFIG
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Certain run-off amounts `ξ^{(j)}(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunoffEntry {
    pub j: usize,
    pub k: i64,
    pub amounts: Vec<f64>,
}

/// Replaces `u^{(j)}(to, t)` by the final utility of the contract written
/// at `from`, for `t > to`. Produces universes violating the independence
/// hypotheses, for auditing `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyFinal {
    pub j: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Tolerance of the hypothesis checks.
    pub hypothesis_tol: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), hypothesis_tol: DEFAULT_HYPOTHESIS_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base branching; the generator refines it as the increments require.
    #[serde(default = "empty_tree")]
    pub tree: TreeSpec,
    pub gen: GenSpec,
    #[serde(default)]
    pub runoff: Vec<RunoffEntry>,
    #[serde(default)]
    pub copy_final: Vec<CopyFinal>,
    #[serde(default)]
    pub constraints: ConstraintConfig,
    #[serde(default)]
    pub policy: DividendPolicy,
    #[serde(default)]
    pub basic: Option<BasicConfig>,
    /// Defaults to `k0`, `eps_quad` and `delta` of `[constraints]`.
    #[serde(default)]
    pub relaxed: Option<RelaxedConfig>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub output: OutputConfig,
}

fn empty_tree() -> TreeSpec {
    TreeSpec::new(vec![])
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Schema checks that need no universe.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.gen.subsidiaries.is_empty() {
            return bad("gen.subsidiaries must list at least one subsidiary".into());
        }
        self.constraints.validate(self.gen.subsidiaries.len()).map_err(|e| CliError::Config(format!("constraints: {e}")))?;
        self.policy.validate().map_err(|e| CliError::Config(format!("policy: {e}")))?;
        let s = &self.solver;
        if !(s.kkt_tol > 0.0 && s.feas_tol > 0.0 && s.phase1_tol > 0.0 && s.rho0 > 0.0 && s.rho_max >= s.rho0) {
            return bad("solver tolerances and penalties must be positive".into());
        }
        if s.max_iter == 0 || s.max_outer == 0 || s.max_inner == 0 || s.max_dim == 0 {
            return bad("solver iteration limits and max_dim must be positive".into());
        }
        if let Some(b) = &self.basic {
            if !(b.sigma2 >= 0.0) {
                return bad(format!("basic.sigma2 must be nonnegative, got {}", b.sigma2));
            }
        }
        Ok(())
    }

    pub fn runoff(&self) -> Result<Runoff, CliError> {
        let mut xi = Runoff::new();
        for e in &self.runoff {
            xi.insert(e.j, e.k, e.amounts.clone()).map_err(|e| CliError::Config(format!("runoff: {e}")))?;
        }
        Ok(xi)
    }

    pub fn universe(&self) -> Result<ContractUniverse, CliError> {
        let mut u = generate_universe(&self.gen, &self.tree).map_err(|e| CliError::Config(format!("gen: {e}")))?;
        for c in &self.copy_final {
            if c.j >= u.aleph() || c.from > u.t_bar() || c.to > u.t_bar() {
                return Err(CliError::Config(format!("copy_final: index out of range in {c:?}")));
            }
            let tree = Arc::clone(u.tree());
            let src = u.writing(c.j, c.from).clone();
            let fd = u.final_depth(c.from as i64);
            let copy = AdaptedProcess::from_fn(&tree, src.dim(), 0..=tree.horizon(), |id, out| {
                let d = tree.depth(id);
                if d > c.to {
                    out.copy_from_slice(src.value(tree.ancestor(id, d.min(fd))));
                }
            });
            u.replace_writing(c.j, c.to, copy).map_err(|e| CliError::Config(format!("copy_final: {e}")))?;
        }
        self.runoff()?.validate(&u).map_err(|e| CliError::Config(format!("runoff: {e}")))?;
        Ok(u)
    }

    pub fn relaxed_config(&self) -> Result<RelaxedConfig, CliError> {
        if let Some(r) = &self.relaxed {
            return Ok(r.clone());
        }
        let c = &self.constraints;
        match (&c.eps_quad, &c.delta) {
            (Some(e), Some(d)) => Ok(RelaxedConfig { k0: c.k0, eps_quad: e.clone(), delta: d.clone() }),
            _ => Err(CliError::Config("solve-relaxed needs [relaxed] or constraints.eps_quad and constraints.delta".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Verify,
    SolveBasic,
    SolveQuadratic,
    SolveRelaxed,
    Spectrum,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Generate,
        Command::Verify,
        Command::SolveBasic,
        Command::SolveQuadratic,
        Command::SolveRelaxed,
        Command::Spectrum,
        Command::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Verify => "verify",
            Command::SolveBasic => "solve-basic",
            Command::SolveQuadratic => "solve-quadratic",
            Command::SolveRelaxed => "solve-relaxed",
            Command::Spectrum => "spectrum",
            Command::Report => "report",
        }
    }

    /// Subdirectory of the output directory.
    pub fn dir(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Verify => "verify",
            Command::SolveBasic => "basic",
            Command::SolveQuadratic => "quadratic",
            Command::SolveRelaxed => "relaxed",
            Command::Spectrum => "spectrum",
            Command::Report => ".",
        }
    }
}

/// Result of one command.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub code: u8,
    /// Human-readable summary, also written to disk.
    pub text: String,
    pub files: Vec<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn csv_out(path: &Path, r: csv::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| CliError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// `block,node,component,value` for `alpha`, `beta`, `k0` and `d`.
pub fn write_portfolio_csv<W: std::io::Write>(x: &PortfolioVariable, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["block", "node", "component", "value"])?;
    let proc = |w: &mut csv::Writer<W>, name: &str, p: &AdaptedProcess| -> csv::Result<()> {
        let tree = p.tree();
        for n in 0..tree.len() {
            if !p.is_active(tree.depth(n)) {
                continue;
            }
            for (c, v) in p.value(n).iter().enumerate() {
                w.write_record([name.to_string(), n.to_string(), c.to_string(), v.to_string()])?;
            }
        }
        Ok(())
    };
    proc(&mut w, "alpha", &x.alpha)?;
    proc(&mut w, "beta", &x.beta)?;
    for (j, v) in x.k0.iter().enumerate() {
        w.write_record(["k0".to_string(), String::new(), j.to_string(), v.to_string()])?;
    }
    proc(&mut w, "d", &x.d)?;
    w.flush()?;
    Ok(())
}

pub fn read_portfolio_csv(universe: &ContractUniverse, path: &Path) -> Result<PortfolioVariable, CliError> {
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let mut x = PortfolioVariable::zeros(universe);
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        let value: f64 = field(3).parse().map_err(|e| bad(format!("{:?}: {e}", field(3))))?;
        let c = num(field(2))?;
        let target = match field(0) {
            "k0" => {
                *x.k0.get_mut(c).ok_or_else(|| bad(format!("k0 index {c}")))? = value;
                continue;
            }
            "alpha" => &mut x.alpha,
            "beta" => &mut x.beta,
            "d" => &mut x.d,
            other => return Err(bad(format!("unknown block {other:?}"))),
        };
        let n = num(field(1))?;
        if n >= target.tree().len() || c >= target.dim() || !target.is_active(target.tree().depth(n)) {
            return Err(bad(format!("entry ({n}, {c}) outside the process")));
        }
        target.set(n, c, value);
    }
    Ok(x)
}

fn status_code(s: Status) -> u8 {
    match s {
        Status::Optimal => EXIT_OK,
        Status::Infeasible | Status::Unbounded => EXIT_FAILED,
        Status::MaxIter | Status::NumericalFailure => EXIT_NUMERICAL,
    }
}

fn solve_error(e: SolveError, dir: &Path) -> Result<Outcome, CliError> {
    let (code, text) = match &e {
        SolveError::Precondition { .. } => (EXIT_FAILED, format!("refused: {e}\n")),
        SolveError::Forms(_) => (EXIT_NUMERICAL, format!("error: {e}\n")),
        _ => return Err(CliError::Config(e.to_string())),
    };
    let path = dir.join("summary.txt");
    write_text(&path, &text)?;
    Ok(Outcome { code, text, files: vec![path] })
}

fn finish_solve(report: &SolveReport, layout: Option<&Layout>, dir: &Path) -> Result<Outcome, CliError> {
    let mut files = write_report(report, layout, dir).map_err(io_err(dir))?;
    if let Some(x) = &report.portfolio {
        let p = dir.join("portfolio.csv");
        csv_out(&p, write_portfolio_csv(x, create(&p)?))?;
        files.push(p);
    }
    Ok(Outcome { code: status_code(report.status), text: summary(report), files })
}

pub fn run(cmd: Command, config: &RunConfig) -> Result<Outcome, CliError> {
    let root = &config.output.dir;
    let dir = root.join(cmd.dir());
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    match cmd {
        Command::Generate => generate(config, &dir),
        Command::Verify => verify(config, &dir),
        Command::SolveBasic => {
            let u = config.universe()?;
            let basic = config.basic.as_ref().ok_or_else(|| CliError::Config("solve-basic needs a [basic] section".into()))?;
            match solve_basic(&u, basic, &config.solver) {
                Ok(r) => finish_solve(&r, None, &dir),
                Err(e) => solve_error(e, &dir),
            }
        }
        Command::SolveQuadratic => {
            let u = config.universe()?;
            let xi = config.runoff()?;
            match solve_quadratic_model(&u, &xi, &config.constraints, &config.policy, &config.solver) {
                Ok(r) => finish_solve(&r, Some(&Layout::new(&u)), &dir),
                Err(e) => solve_error(e, &dir),
            }
        }
        Command::SolveRelaxed => {
            let u = config.universe()?;
            let rc = config.relaxed_config()?;
            match solve_relaxed(&u, &rc, &config.solver) {
                Ok(r) => finish_solve(&r, Some(&Layout::new(&u)), &dir),
                Err(e) => solve_error(e, &dir),
            }
        }
        Command::Spectrum => spectrum_cmd(config, &dir),
        Command::Report => report(config, root),
    }
}

fn generate(config: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let u = config.universe()?;
    let tree = u.tree();
    let tp = dir.join("tree.csv");
    csv_out(&tp, tree.write_csv(create(&tp)?))?;
    let up = dir.join("universe.csv");
    csv_out(&up, u.write_csv(create(&up)?))?;
    let mut text = String::new();
    let _ = writeln!(text, "nodes                 {}", tree.len());
    let _ = writeln!(text, "leaves                {}", tree.leaves().len());
    let _ = writeln!(text, "horizon               {}", u.horizon());
    let _ = writeln!(text, "t_bar                 {}", u.t_bar());
    let _ = writeln!(text, "subsidiaries          {}", u.aleph());
    let _ = writeln!(text, "components            {}", u.total_dim());
    let _ = writeln!(text, "decision_dim          {}", Layout::new(&u).len());
    let sp = dir.join("summary.txt");
    write_text(&sp, &text)?;
    Ok(Outcome { code: EXIT_OK, text, files: vec![tp, up, sp] })
}

fn verify(config: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let u = config.universe()?;
    let xi = config.runoff()?;
    let mut text = String::new();
    let mut failed = vec![];
    let mut check = |text: &mut String, name: &str, ok: bool, detail: String| {
        let _ = writeln!(text, "{:<5} {name:<16}{detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name.to_string());
        }
    };
    let h = verify_hypotheses(&u, config.output.hypothesis_tol);
    let pair = |p: &Option<crate::contracts::CrossPair>| {
        p.as_ref().map_or(String::new(), |p| format!(" worst (j={}, k={}, i={}) vs (j={}, k={}, i={})", p.j, p.k, p.i, p.r, p.m, p.l))
    };
    check(&mut text, "h1", h.h1_ok, format!("max indicator covariance {:.3e}", h.h1_max_indicator_cov));
    let min_eig = h.h2_min_eigenvalues.iter().map(|e| e.min_eigenvalue).fold(f64::INFINITY, f64::min);
    check(&mut text, "h2", h.h2_ok, format!("min covariance eigenvalue {min_eig:.3e}"));
    check(&mut text, "h3", h.h3_ok, format!("max cross covariance {:.3e}{}", h.h3_max_cross_cov, pair(&h.h3_worst)));
    check(&mut text, "h4", h.h4_ok, format!("max cross covariance {:.3e}{}", h.h4_max_cross_cov, pair(&h.h4_worst)));
    let eps = config.constraints.check_epsilon_sums(u.aleph(), u.horizon());
    check(&mut text, "epsilon_sums", eps.is_ok(), eps.as_ref().err().map_or(String::new(), |e| e.to_string()));

    // the quadratic solution when present, else no underwriting with K(0) split equally
    let artifact = config.output.dir.join(Command::SolveQuadratic.dir()).join("portfolio.csv");
    let (x, source) = if artifact.exists() {
        (read_portfolio_csv(&u, &artifact)?, artifact.display().to_string())
    } else {
        let mut x = PortfolioVariable::zeros(&u);
        x.k0 = vec![config.constraints.k0 / u.aleph() as f64; u.aleph()];
        (x, "neutral portfolio".to_string())
    };
    let _ = writeln!(text, "candidate             {source}");
    let mut files = vec![];
    let ev = Evaluation::new(&u, &x, &xi, &config.constraints, &config.policy).map_err(|e| CliError::Config(e.to_string()))?;
    let mut feas = ev.exact_model().map_err(|e| CliError::Config(e.to_string()))?;
    let has_quad = config.constraints.eps_quad.is_some() || !config.constraints.eps_quad_sub.is_empty();
    if has_quad {
        feas.extend(ev.quadratic_model().map_err(|e| CliError::Config(e.to_string()))?);
    }
    let fp = dir.join("feasibility.csv");
    csv_out(&fp, feas.write_csv(create(&fp)?))?;
    files.push(fp);
    let worst = feas.worst().map_or(String::new(), |w| {
        let o = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        format!("tightest {} t={} j={} slack {:.3e}", w.constraint, o(w.t), o(w.j), w.slack)
    });
    if artifact.exists() {
        check(&mut text, "feasibility", feas.feasible(), worst);
    } else {
        let _ = writeln!(text, "INFO  feasibility     {} {worst}", feas.feasible());
    }
    if eps.is_ok() && has_quad {
        let c = chebyshev_containment(&u, &x, &xi, &config.constraints).map_err(|e| CliError::Config(e.to_string()))?;
        check(
            &mut text,
            "containment",
            !c.counterexample,
            format!("strictly quad feasible {}, exact feasible {}", c.quad_feasible, c.exact_feasible),
        );
    }
    let sp = dir.join("summary.txt");
    write_text(&sp, &text)?;
    files.push(sp);
    let code = if failed.is_empty() { EXIT_OK } else { EXIT_FAILED };
    Ok(Outcome { code, text, files })
}

fn spectrum_cmd(config: &RunConfig, dir: &Path) -> Result<Outcome, CliError> {
    let u = config.universe()?;
    let s = match spectrum(&u, config.solver.max_dim) {
        Ok(s) => s,
        Err(e) => return solve_error(e.into(), dir),
    };
    let ep = dir.join("eigenvalues.csv");
    csv_out(&ep, write_spectrum_csv(&s, create(&ep)?))?;
    let mut text = String::new();
    let _ = writeln!(text, "dim                   {}", s.dim);
    let _ = writeln!(text, "method                {:?}", s.method);
    let _ = writeln!(text, "c_lower               {:.12e}", s.c_lower);
    let _ = writeln!(text, "c_upper               {:.12e}", s.c_upper);
    let _ = writeln!(text, "degenerate            {}", s.degenerate());
    let sp = dir.join("summary.txt");
    write_text(&sp, &text)?;
    let code = if s.degenerate() { EXIT_FAILED } else { EXIT_OK };
    Ok(Outcome { code, text, files: vec![ep, sp] })
}

/// Concatenates the summaries present in the output directory.
fn report(config: &RunConfig, root: &Path) -> Result<Outcome, CliError> {
    let mut text = String::new();
    let mut found = 0;
    for cmd in Command::ALL.iter().filter(|c| **c != Command::Report) {
        let p = root.join(cmd.dir()).join("summary.txt");
        if let Ok(s) = std::fs::read_to_string(&p) {
            found += 1;
            let _ = writeln!(text, "== {} ==\n{s}", cmd.name());
        }
    }
    if found == 0 {
        return Err(CliError::Missing(root.join("*").join("summary.txt")));
    }
    let _ = writeln!(text, "seed                  {}", config.solver.seed);
    let p = root.join("report.txt");
    write_text(&p, &text)?;
    Ok(Outcome { code: EXIT_OK, text, files: vec![p] })
}
