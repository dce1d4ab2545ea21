//! Benchmark problems, the adaptive driver, run records and rate fitting.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adaptivity::{doerfler_mark, refine, translate_marks, uniform_marking, MarkingResult};
use crate::estimators::{indicators, indicators_weighted, local_bound_check, IndicatorKind, PatchWeight, ResidualField};
use crate::geometry::{builtin, MeshPartition, Point};
use crate::operators::{assemble_rhs, Assembler, DiscreteSpace, Method, ProblemSpec, Rhs, RhsEvaluator};
use crate::quadrature::{adaptive_gauss, neumaier_sum, QuadOrders, RuleSet};
use crate::solve::{aitken_extrapolate, collocation_error_from, energy_norm_sq, galerkin_error_sq, galerkin_error_sq_stationary, solve_dense, DenseSystem};
use crate::splines::{insert_knot, KnotVector, WeightVector};
use crate::{Error, Result};

/// A benchmark problem with its initial space.
#[derive(Clone, Debug)]
pub struct BuiltinProblem {
    pub spec: ProblemSpec,
    /// Bi-Lipschitz constant when known exactly (straight curves).
    pub c_gamma: Option<f64>,
}

/// Names accepted by [`builtin_problem`].
pub const PROBLEMS: [&str; 3] = ["pacman", "square", "slit"];

/// `u = r^tau cos(tau beta)` on the pacman.
fn pacman_u(x: Point) -> f64 {
    let tau = builtin::PACMAN_TAU;
    let r = x[0].hypot(x[1]);
    r.powf(tau) * (tau * x[1].atan2(x[0])).cos()
}

fn pacman_flux(x: Point, nu: Point) -> f64 {
    let tau = builtin::PACMAN_TAU;
    let r = x[0].hypot(x[1]);
    let b = x[1].atan2(x[0]);
    let (er, eb) = ([b.cos(), b.sin()], [-b.sin(), b.cos()]);
    let f = tau * r.powf(tau - 1.0);
    let (c, s) = ((tau * b).cos(), (tau * b).sin());
    f * (c * (er[0] * nu[0] + er[1] * nu[1]) - s * (eb[0] * nu[0] + eb[1] * nu[1]))
}

fn square_u(x: Point) -> f64 {
    (2.0 * PI * x[0]).sinh() * (2.0 * PI * x[1]).cos()
}

fn square_flux(x: Point, nu: Point) -> f64 {
    let k = 2.0 * PI;
    let gx = k * (k * x[0]).cosh() * (k * x[1]).cos();
    let gy = -k * (k * x[0]).sinh() * (k * x[1]).sin();
    gx * nu[0] + gy * nu[1]
}

/// `phi(x, 0) = -x / sqrt(1 - x^2)` on the slit.
pub fn slit_phi(x: Point) -> f64 {
    -x[0] / ((1.0 - x[0]) * (1.0 + x[0])).sqrt()
}

/// Problem by name.
pub fn builtin_problem(name: &str) -> Result<BuiltinProblem> {
    match name {
        "pacman" => {
            let curve = Arc::new(builtin::pacman());
            let mut spec = ProblemSpec::new("pacman", curve, Rhs::Dirichlet(Arc::new(pacman_u)))?;
            spec.exact_solution = Some(Arc::new(pacman_flux));
            spec.rhs_tol = 1e-16;
            Ok(BuiltinProblem { spec, c_gamma: None })
        }
        "square" => {
            let curve = Arc::new(builtin::square());
            let mut spec = ProblemSpec::new("square", curve, Rhs::Dirichlet(Arc::new(square_u)))?;
            spec.exact_solution = Some(Arc::new(square_flux));
            spec.rhs_tol = 1e-14;
            Ok(BuiltinProblem { spec, c_gamma: None })
        }
        "slit" => {
            let curve = Arc::new(builtin::slit());
            let mut spec = ProblemSpec::new("slit", curve, Rhs::Analytic(Arc::new(|x: Point| -x[0] / 2.0)))?;
            spec.exact_solution = Some(Arc::new(|x: Point, _| slit_phi(x)));
            spec.exact_energy = Some(PI / 4.0);
            Ok(BuiltinProblem { spec, c_gamma: Some(1.0) })
        }
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}

/// Initial space of a problem: the curve's own knots and weights. Collocation
/// on a closed curve additionally needs full multiplicity at the seam.
pub fn initial_space(problem: &ProblemSpec, method: Method) -> Result<DiscreteSpace> {
    let space = DiscreteSpace::from_curve(problem.curve.clone())?;
    if method == Method::Galerkin || !problem.curve.is_closed() {
        return Ok(space);
    }
    let p = space.degree();
    let mut knots: KnotVector = space.knots().clone();
    let mut weights: WeightVector = space.weights().clone();
    while knots.multiplicities()[0] < p + 1 {
        (knots, weights, _) = insert_knot(&knots, &weights, &[], problem.curve.b())?;
    }
    let mesh = space.mesh();
    let levels = mesh.levels().to_vec();
    let mesh = MeshPartition::new(mesh.curve().clone(), knots.breakpoints().to_vec(), knots.multiplicities().to_vec(), levels)?;
    DiscreteSpace::new(mesh, p, weights)
}

/// Where a reference energy came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergySource {
    Analytic,
    /// `int f phi dx` with the exact density.
    Duality,
    /// Aitken extrapolation of uniform Galerkin energies.
    Aitken,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEnergy {
    pub value: f64,
    pub source: EnergySource,
}

/// `|||phi|||^2 = <f, phi>` by nested adaptive quadrature.
pub fn duality_energy(problem: &ProblemSpec) -> Result<f64> {
    let phi = problem
        .exact_solution
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} has no exact density", problem.name)))?;
    let curve = &problem.curve;
    let mut parts = Vec::new();
    let mut err = 0.0;
    for w in curve.breakpoints().windows(2) {
        let (v, e) = adaptive_gauss(
            &mut |t: f64| {
                let x = curve.point(t);
                problem.f_at(t) * phi(x, curve.normal(t)) * curve.speed(t)
            },
            w[0],
            w[1],
            1e-16,
            600,
        );
        parts.push(v);
        err += e;
    }
    let value = neumaier_sum(parts);
    log::info!("{}: duality energy {value:.17e} (quadrature estimate {err:.2e})", problem.name);
    Ok(value)
}

/// Galerkin energies `c^T A c` on `levels` uniform refinements of the initial
/// space, and their Aitken limit.
pub fn aitken_energy(problem: &ProblemSpec, levels: usize, rules: &RuleSet) -> Result<(f64, Vec<f64>)> {
    let rhs = RhsEvaluator::new(problem.clone());
    let mut space = initial_space(problem, Method::Galerkin)?;
    let mut energies = Vec::with_capacity(levels);
    for level in 0..levels {
        let a = Assembler::new(&space, rules).galerkin();
        let b = assemble_rhs(&space, &rhs, Method::Galerkin, rules)?;
        let c = solve_dense(&DenseSystem::new(a.clone(), b)?)?;
        energies.push(energy_norm_sq(&a, &c));
        if level + 1 < levels {
            space = refine(&space, &uniform_marking(&space)?)?.0;
        }
    }
    let limit = aitken_extrapolate(&energies)?;
    Ok((limit.value, energies))
}

fn energy_memo() -> &'static Mutex<HashMap<String, ReferenceEnergy>> {
    static MEMO: OnceLock<Mutex<HashMap<String, ReferenceEnergy>>> = OnceLock::new();
    MEMO.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Reference energy: analytic if attached, else duality with the exact
/// density, else Aitken. Memoized per process and optionally in a sidecar
/// file `<cache_dir>/<name>_p<p>_energy.json`.
pub fn reference_energy(problem: &ProblemSpec, cache_dir: Option<&Path>, rules: &RuleSet) -> Result<ReferenceEnergy> {
    if let Some(v) = problem.exact_energy {
        return Ok(ReferenceEnergy {
            value: v,
            source: EnergySource::Analytic,
        });
    }
    let key = format!("{}_p{}", problem.name, problem.curve.degree());
    if let Some(r) = energy_memo().lock().expect("memo lock").get(&key) {
        return Ok(*r);
    }
    let sidecar = cache_dir.map(|d| d.join(format!("{key}_energy.json")));
    if let Some(path) = &sidecar {
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(r) = serde_json::from_str::<ReferenceEnergy>(&text) {
                energy_memo().lock().expect("memo lock").insert(key, r);
                return Ok(r);
            }
        }
    }
    let r = if problem.exact_solution.is_some() {
        ReferenceEnergy {
            value: duality_energy(problem)?,
            source: EnergySource::Duality,
        }
    } else {
        ReferenceEnergy {
            value: aitken_energy(problem, 7, rules)?.0,
            source: EnergySource::Aitken,
        }
    };
    if let Some(path) = &sidecar {
        std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(path, serde_json::to_string_pretty(&r).map_err(|e| Error::Parse(e.to_string()))?)?;
    }
    energy_memo().lock().expect("memo lock").insert(key, r);
    Ok(r)
}

/// Settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    pub method: Method,
    pub estimator: IndicatorKind,
    pub theta: f64,
    pub uniform: bool,
    /// Stop before solving on a space with more functions than this.
    pub max_dofs: usize,
    pub max_iterations: usize,
    pub quad_order: usize,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: "slit".into(),
            method: Method::Galerkin,
            estimator: IndicatorKind::Faermann,
            theta: 0.75,
            uniform: false,
            max_dofs: 200,
            max_iterations: 200,
            quad_order: 16,
            out: None,
            cache_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta = {} outside (0, 1]", self.theta)));
        }
        if !PROBLEMS.contains(&self.problem.as_str()) {
            return Err(Error::UnknownProblem(self.problem.clone()));
        }
        if !(2..=40).contains(&self.quad_order) {
            return Err(Error::Config(format!("quadrature order {} outside 2..=40", self.quad_order)));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn rules(&self) -> RuleSet {
        RuleSet::new(QuadOrders::uniform(self.quad_order))
    }
}

/// One iteration of the adaptive loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub iter: usize,
    pub n_dofs: usize,
    pub n_elements: usize,
    pub eta: f64,
    pub mu: f64,
    pub err_sq: f64,
    pub eff_eta: f64,
    pub eff_mu: f64,
    pub wall_ms: f64,
    /// Collocation only: the same identity with a minus sign.
    pub err_sq_minus_variant: Option<f64>,
    /// `max_z (eta(z) - sqrt(2) C mu(z))` with the arclength weight, when `C` is known.
    pub local_bound_margin: Option<f64>,
    pub marked: usize,
    pub bisected: usize,
    pub raised: usize,
    pub breakpoints: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub levels: Vec<u32>,
    pub weights: Vec<f64>,
    pub c_gal: Vec<f64>,
    pub c_col: Option<Vec<f64>>,
}

/// Final-mesh breakpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotEntry {
    pub t: f64,
    pub multiplicity: usize,
    pub is_max: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub degree: usize,
    pub reference_energy: ReferenceEnergy,
    pub rows: Vec<RunRow>,
    pub knot_histogram: Vec<KnotEntry>,
    /// Set when the loop stopped on an error.
    pub terminated: Option<String>,
}

/// CSV header of the iteration table.
pub const CSV_HEADER: [&str; 9] = ["iter", "N", "n_elements", "eta", "mu", "err_sq", "eff_eta", "eff_mu", "wall_ms"];

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl RunRecord {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let e = |e: csv::Error| Error::Parse(e.to_string());
        out.write_record(CSV_HEADER).map_err(e)?;
        for r in &self.rows {
            out.write_record([
                r.iter.to_string(),
                r.n_dofs.to_string(),
                r.n_elements.to_string(),
                fmt17(r.eta),
                fmt17(r.mu),
                fmt17(r.err_sq),
                fmt17(r.eff_eta),
                fmt17(r.eff_mu),
                fmt17(r.wall_ms),
            ])
            .map_err(e)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_histogram_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let e = |e: csv::Error| Error::Parse(e.to_string());
        out.write_record(["t", "multiplicity", "is_max"]).map_err(e)?;
        for k in &self.knot_histogram {
            out.write_record([fmt17(k.t), k.multiplicity.to_string(), k.is_max.to_string()]).map_err(e)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Writes `<stem>.csv`, `<stem>_knots.csv` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let with = |suffix: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        self.write_csv(std::fs::File::create(with(".csv"))?)?;
        self.write_histogram_csv(std::fs::File::create(with("_knots.csv"))?)?;
        std::fs::write(with(".json"), self.to_json()?)?;
        Ok(())
    }

    /// Column values by CSV name, plus `err` for `sqrt(err_sq)`.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                Ok(match name {
                    "N" => r.n_dofs as f64,
                    "n_elements" => r.n_elements as f64,
                    "eta" => r.eta,
                    "mu" => r.mu,
                    "err_sq" => r.err_sq,
                    "err" => r.err_sq.sqrt(),
                    "eff_eta" => r.eff_eta,
                    "eff_mu" => r.eff_mu,
                    "wall_ms" => r.wall_ms,
                    other => return Err(Error::Config(format!("unknown column `{other}`"))),
                })
            })
            .collect()
    }
}

/// Iteration table read back from CSV.
pub fn read_csv(r: impl Read) -> Result<Vec<HashMap<String, f64>>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let mut row = HashMap::new();
        for (h, v) in headers.iter().zip(rec.iter()) {
            let x: f64 = v.trim().parse().map_err(|_| Error::Parse(format!("bad number `{v}` in column {h}")))?;
            row.insert(h.to_string(), x);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Least-squares slope of `log y` against `log N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
    pub points: usize,
}

/// Fits over the last `ceil(n/2)` points.
pub fn fit_rate(n: &[f64], y: &[f64]) -> Result<RateFit> {
    if n.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: n.len(),
            got: y.len(),
        });
    }
    if n.len() < 4 {
        return Err(Error::Config("rate fitting needs at least four rows".into()));
    }
    let k = n.len().div_ceil(2);
    let (n, y) = (&n[n.len() - k..], &y[y.len() - k..]);
    if n.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(Error::Config("rate fitting needs positive values".into()));
    }
    let xs: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k as f64;
    let my = ys.iter().sum::<f64>() / k as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("rate fitting needs distinct N".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / k as f64).sqrt();
    Ok(RateFit {
        slope,
        intercept,
        residual,
        points: k,
    })
}

/// Rate of a record column against `N`.
pub fn fit_record(record: &RunRecord, column: &str) -> Result<RateFit> {
    fit_rate(&record.column("N")?, &record.column(column)?)
}

/// Galerkin coefficients, collocation coefficients, squared error, and the
/// squared error of the variant (collocation) when one was solved.
type Solved = (Vec<f64>, Option<Vec<f64>>, f64, Option<f64>);

fn solve_iteration(
    space: &DiscreteSpace,
    rhs: &RhsEvaluator,
    method: Method,
    energy: f64,
    rules: &RuleSet,
) -> Result<Solved> {
    let asm = Assembler::new(space, rules);
    let a = asm.galerkin();
    let b = assemble_rhs(space, rhs, Method::Galerkin, rules)?;
    let c_gal = solve_dense(&DenseSystem::new(a.clone(), b.clone())?)?;
    let gal = galerkin_error_sq(energy, &a, &c_gal);
    let stationary = galerkin_error_sq_stationary(energy, &a, &b, &c_gal);
    if (gal.raw - stationary.raw).abs() > 1e-2 * gal.value.max(1e-15 * energy.abs()) {
        log::warn!("N={}: error identity sensitive to solver error ({:e} vs {:e})", space.dim(), gal.raw, stationary.raw);
    }
    match method {
        Method::Galerkin => Ok((c_gal, None, gal.value, None)),
        Method::Collocation => {
            let pts = space.collocation_points()?;
            let bm = asm.collocation(&pts);
            let bc = assemble_rhs(space, rhs, Method::Collocation, rules)?;
            let c_col = solve_dense(&DenseSystem::new(bm, bc)?)?;
            let e = collocation_error_from(gal, &a, &c_gal, &c_col);
            Ok((c_gal, Some(c_col), e.error.value, Some(e.minus_variant)))
        }
    }
}

/// Runs the adaptive (or uniform) loop.
pub fn run(config: &RunConfig) -> Result<RunRecord> {
    config.validate()?;
    let problem = builtin_problem(&config.problem)?;
    let rules = config.rules();
    let energy = reference_energy(&problem.spec, config.cache_dir.as_deref(), &rules)?;
    run_problem(config, &problem, energy, &rules)
}

/// As [`run`] with an explicit problem and reference energy.
pub fn run_problem(config: &RunConfig, problem: &BuiltinProblem, energy: ReferenceEnergy, rules: &RuleSet) -> Result<RunRecord> {
    let rhs = RhsEvaluator::new(problem.spec.clone());
    let mut space = initial_space(&problem.spec, config.method)?;
    let p = space.degree();
    let mut rows: Vec<RunRow> = Vec::new();
    let mut terminated = None;
    for iter in 0..config.max_iterations {
        let start = Instant::now();
        let (c_gal, c_col, err_sq, minus) = match solve_iteration(&space, &rhs, config.method, energy.value, rules) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("run stopped at iteration {iter}: {e}");
                terminated = Some(e.to_string());
                break;
            }
        };
        let density = c_col.as_ref().unwrap_or(&c_gal);
        let field = ResidualField::from_solution(&space, &rhs, density, rules);
        let mesh = space.mesh();
        let eta = indicators(&field, mesh, IndicatorKind::Faermann, rules)?;
        let mu = indicators(&field, mesh, IndicatorKind::WeightedResidual, rules)?;
        let local_bound_margin = match problem.c_gamma {
            Some(c) => {
                let mu_arc = indicators_weighted(&field, mesh, IndicatorKind::WeightedResidual, PatchWeight::Arclength, rules)?;
                Some(local_bound_check(&eta, &mu_arc, c, mesh)?.max_margin)
            }
            None => None,
        };
        let err = err_sq.sqrt();
        let (eta_t, mu_t) = (eta.total(), mu.total());
        let marking = if config.uniform {
            uniform_marking(&space)?
        } else {
            let ind = match config.estimator {
                IndicatorKind::Faermann => &eta,
                IndicatorKind::WeightedResidual => &mu,
            };
            translate_marks(&space, &doerfler_mark(ind, config.theta)?)?
        };
        let row = RunRow {
            iter,
            n_dofs: space.dim(),
            n_elements: space.n_elements(),
            eta: eta_t,
            mu: mu_t,
            err_sq,
            eff_eta: eta_t / err,
            eff_mu: mu_t / err,
            wall_ms: 0.0,
            err_sq_minus_variant: minus,
            local_bound_margin,
            marked: marking.marked.len(),
            bisected: marking.bisect.len(),
            raised: marking.raise.len(),
            breakpoints: mesh.breakpoints().to_vec(),
            multiplicities: mesh.multiplicities().to_vec(),
            levels: mesh.levels().to_vec(),
            weights: space.weights().as_slice().to_vec(),
            c_gal,
            c_col,
        };
        log::info!(
            "{} {:?} iter {iter}: N = {}, err^2 = {:.3e}, eta = {:.3e}, mu = {:.3e}",
            problem.spec.name,
            config.method,
            row.n_dofs,
            err_sq,
            eta_t,
            mu_t
        );
        let done = marking == MarkingResult::default() || iter + 1 == config.max_iterations;
        let next = if done { None } else { Some(refine(&space, &marking)?.0) };
        let mut row = row;
        row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        rows.push(row);
        match next {
            Some(s) if s.dim() <= config.max_dofs => space = s,
            _ => break,
        }
    }
    let mesh = space.mesh();
    let knot_histogram = if let Some(last) = rows.last() {
        last.breakpoints
            .iter()
            .zip(&last.multiplicities)
            .map(|(&t, &m)| KnotEntry {
                t,
                multiplicity: m,
                is_max: m == p + 1,
            })
            .collect()
    } else {
        mesh.breakpoints()
            .iter()
            .zip(mesh.multiplicities())
            .map(|(&t, &m)| KnotEntry {
                t,
                multiplicity: m,
                is_max: m == p + 1,
            })
            .collect()
    };
    let record = RunRecord {
        config: config.clone(),
        degree: p,
        reference_energy: energy,
        rows,
        knot_histogram,
        terminated,
    };
    if let Some(out) = &config.out {
        record.save(out)?;
    }
    Ok(record)
}

/// Rebuilds the space of a logged row.
pub fn space_of_row(problem: &ProblemSpec, degree: usize, row: &RunRow) -> Result<DiscreteSpace> {
    let mesh = MeshPartition::new(problem.curve.clone(), row.breakpoints.clone(), row.multiplicities.clone(), row.levels.clone())?;
    let knots = if problem.curve.is_closed() {
        KnotVector::periodic(row.breakpoints.clone(), row.multiplicities.clone(), degree)?
    } else {
        KnotVector::open(row.breakpoints.clone(), row.multiplicities.clone(), degree)?
    };
    DiscreteSpace::new(mesh, degree, WeightVector::new(row.weights.clone(), &knots)?)
}

/// Outcome of one verification check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Quick oracle and property checks for the command line.
pub fn verify_suite() -> Result<Vec<Check>> {
    let rules = RuleSet::standard();
    let mut out = Vec::new();

    let slit = builtin_problem("slit")?;
    let space = DiscreteSpace::new(
        MeshPartition::new(slit.spec.curve.clone(), vec![0.0, 1.0], vec![1, 1], vec![0])?,
        0,
        WeightVector::new(vec![1.0], &KnotVector::open(vec![0.0, 1.0], vec![1, 1], 0)?)?,
    )?;
    let a = Assembler::new(&space, rules).galerkin();
    let exact = 2.0 / PI * (1.5 - 2f64.ln());
    out.push(check("slit one-element Galerkin entry", (a[(0, 0)] - exact).abs() < 1e-10, format!("{:.16e} vs {exact:.16e}", a[(0, 0)])));
    let v = Assembler::new(&space, rules).single_layer_at(&[1.0], 0.5);
    out.push(check("V1(0) on the slit", (v - 1.0 / PI).abs() < 1e-10, format!("{v:.16e}")));

    for name in PROBLEMS {
        let prob = builtin_problem(name)?;
        let s = initial_space(&prob.spec, Method::Galerkin)?;
        let a = Assembler::new(&s, rules).galerkin();
        let asym = (&a - a.transpose()).amax() / a.amax();
        let spd = a.clone().cholesky().is_some();
        out.push(check(&format!("{name}: Galerkin symmetric and SPD"), asym <= 1e-10 && spd, format!("asymmetry {asym:.2e}")));
        let m = s.degree().div_ceil(2);
        let r = crate::operators::verify_a1a2(&s, m, rules)?;
        out.push(check(&format!("{name}: (A1)-(A2)"), r.q_min > 0.0 && r.support_ok, format!("q_min = {:.4}", r.q_min)));
    }

    let pac = builtin_problem("pacman")?;
    let s = DiscreteSpace::from_curve(pac.spec.curve.clone())?;
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let t = (k as f64 + 0.37) / 200.0;
        let ones = vec![1.0; s.dim()];
        worst = worst.max((s.eval_density(&ones, t) - 1.0).abs());
    }
    out.push(check("pacman: partition of unity", worst < 1e-13, format!("{worst:.2e}")));
    Ok(out)
}
