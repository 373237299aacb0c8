//! Config-driven experiment runner.
//!
//! A config is a flat JSON object. Every experiment has a resolved form with
//! defaults; user keys overlay it, unknown keys are rejected by name, and the
//! resolved config is written back into `report.json`. Exit status is 0 when
//! every verdict holds, 2 on a verdict failure and 1 on any error.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::evo_solver::{check_causality, solve};
use crate::homogenize::{
    gaussian_time, longitudinal_experiment, neumann_limit_law, orthogonal_experiment, periodic_moments, periodic_offset, static_criterion, CoefficientFamily,
    GConvergenceReport, LongitudinalSetup, OrthogonalSetup, Profile, TestSet,
};
use crate::material_law::{certify_accretivity, certify_on_grid, MaterialLaw};
use crate::space_ops::{periodic_derivative, Axis, SpaceGrid, SpatialOperator};
use crate::time_axis::{antiderivative, antiderivative_spectral, fourier_laplace, inverse_fourier_laplace, time_derivative, truncate_before, TimeGrid, WeightedSignal};

/// Key holding the wall-clock time of a run; the only non-reproducible field.
pub const TIMESTAMP_KEY: &str = "generated_at";

#[derive(Parser, Debug)]
#[command(name = "evolab", version, about = "Fourier-Laplace solver and G-convergence laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct IoArgs {
    /// Flat JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Transform unitarity, ∂t/∂t⁻¹ inverse pair and skew-adjointness suites.
    Selftest(IoArgs),
    /// Certify a material law and solve one evolutionary problem.
    Solve(IoArgs),
    /// Sample the accretivity certificate of a material law.
    Certify(IoArgs),
    /// Static G-convergence criterion against the analytic limit law.
    GconvStatic(IoArgs),
    /// Longitudinal homogenisation example.
    ExampleLongitudinal(IoArgs),
    /// Orthogonal homogenisation example with the Neumann-series limit law.
    ExampleOrthogonal(IoArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Selftest(_) => "selftest",
            Command::Solve(_) => "solve",
            Command::Certify(_) => "certify",
            Command::GconvStatic(_) => "gconv-static",
            Command::ExampleLongitudinal(_) => "example-longitudinal",
            Command::ExampleOrthogonal(_) => "example-orthogonal",
        }
    }

    pub fn io(&self) -> &IoArgs {
        match self {
            Command::Selftest(a) | Command::Solve(a) | Command::Certify(a) | Command::GconvStatic(a) | Command::ExampleLongitudinal(a) | Command::ExampleOrthogonal(a) => a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
struct Report<'a> {
    experiment: &'a str,
    passed: bool,
    verdicts: &'a [Verdict],
    config: &'a Value,
    results: &'a Value,
    generated_at: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub passed: bool,
    pub verdicts: Vec<Verdict>,
    pub report_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawChoice {
    ReciprocalCoefficient,
    ShiftedByAOverZ,
    InverseZ,
    NeumannLimit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestConfig {
    pub seed: u64,
    pub t_min: f64,
    pub t_max: f64,
    pub n_samples: usize,
    pub rho: f64,
    pub length_x: f64,
    pub n_x: usize,
    pub n_y: usize,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t_min: -16.0,
            t_max: 16.0,
            n_samples: 16384,
            rho: 1.0,
            length_x: 1.0,
            n_x: 32,
            n_y: 16,
        }
    }
}

/// Shared by `solve` and `certify`: a law built from `profile` at oscillation index `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawConfig {
    pub seed: u64,
    pub law: LawChoice,
    pub profile: Profile,
    pub n: usize,
    pub length_x: f64,
    pub n_x: usize,
    /// `0` for a one-dimensional grid; coefficients then oscillate along `x`.
    pub n_y: usize,
    pub rho: f64,
    /// Certification lines; empty means `[rho]`.
    pub rho_list: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
    pub n_samples: usize,
    pub n_freq: usize,
    pub time_width: f64,
    pub source_center: f64,
    pub source_width: f64,
    pub k_trunc: usize,
    pub l_trunc: usize,
}

impl Default for LawConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            law: LawChoice::ReciprocalCoefficient,
            profile: Profile::TwoPlusSine,
            n: 4,
            length_x: 1.0,
            n_x: 256,
            n_y: 0,
            rho: 10.0,
            rho_list: Vec::new(),
            t_min: -2.0,
            t_max: 2.0,
            n_samples: 256,
            n_freq: 65,
            time_width: 0.3,
            source_center: 0.5,
            source_width: 0.1,
            k_trunc: 24,
            l_trunc: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticConfig {
    pub seed: u64,
    /// `reciprocal_coefficient` (longitudinal, limit `b_inv`) or
    /// `shifted_by_a_over_z` (orthogonal, Neumann limit).
    pub law: LawChoice,
    pub profile: Profile,
    pub n_list: Vec<usize>,
    pub length_x: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub rho_list: Vec<f64>,
    pub source_center: f64,
    pub source_width: f64,
    pub tolerance: f64,
    pub k_trunc: usize,
    pub l_trunc: usize,
}

impl Default for StaticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            law: LawChoice::ReciprocalCoefficient,
            profile: Profile::TwoPlusSine,
            n_list: vec![4, 8, 16, 32, 64],
            length_x: 1.0,
            n_x: 1024,
            n_y: 512,
            rho_list: vec![10.0, 20.0],
            source_center: 0.5,
            source_width: 0.1,
            tolerance: 2e-3,
            k_trunc: 24,
            l_trunc: 24,
        }
    }
}

/// `"profile": "constant", "profile_value": 2` ⇄ `{"name": "constant", "value": 2}`.
fn unflatten_profile(map: &mut Map<String, Value>) -> Result<()> {
    let value = map.remove("profile_value");
    let samples = map.remove("profile_samples");
    if value.is_none() && samples.is_none() && !map.contains_key("profile") {
        return Ok(());
    }
    let name = match map.remove("profile") {
        Some(Value::String(s)) => s,
        Some(other) => return Err(Error::Parse(format!("field `profile`: expected a profile name string, got {other}"))),
        None => return Err(Error::Parse("`profile_value`/`profile_samples` given without `profile`".into())),
    };
    if name != "constant" && value.is_some() || name != "custom_samples" && samples.is_some() {
        return Err(Error::Parse(format!("profile `{name}` takes no `profile_value`/`profile_samples` beyond its own parameter")));
    }
    let mut p = Map::new();
    match name.as_str() {
        "constant" => {
            p.insert("value".into(), value.ok_or_else(|| Error::Parse("profile `constant` requires `profile_value`".into()))?);
        }
        "custom_samples" => {
            p.insert("samples".into(), samples.ok_or_else(|| Error::Parse("profile `custom_samples` requires `profile_samples`".into()))?);
        }
        "two_plus_sine" => {}
        other => {
            return Err(Error::Parse(format!(
                "field `profile`: unknown profile `{other}`; expected constant, two_plus_sine or custom_samples"
            )))
        }
    }
    p.insert("name".into(), Value::String(name));
    map.insert("profile".into(), Value::Object(p));
    Ok(())
}

fn flatten_profile(map: &mut Map<String, Value>) {
    if let Some(Value::Object(mut p)) = map.remove("profile") {
        if let Some(name) = p.remove("name") {
            map.insert("profile".into(), name);
        }
        if let Some(v) = p.remove("value") {
            map.insert("profile_value".into(), v);
        }
        if let Some(s) = p.remove("samples") {
            map.insert("profile_samples".into(), s);
        }
    }
}

/// Overlays the user's keys on the defaults of `T`, rejecting unknown keys and
/// naming the field whose value fails to deserialize.
pub fn resolve_config<T: Serialize + DeserializeOwned + Default>(experiment: &str, text: &str) -> Result<(T, Value)> {
    let user: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("config is not valid JSON: {e}")))?;
    let Value::Object(mut user) = user else {
        return Err(Error::Parse("config must be a JSON object".into()));
    };
    if !user.contains_key("seed") {
        return Err(Error::Parse("field `seed` is mandatory".into()));
    }
    unflatten_profile(&mut user)?;
    let Value::Object(defaults) = serde_json::to_value(T::default())? else {
        unreachable!("config structs serialize to objects")
    };
    let mut merged = defaults.clone();
    for (k, v) in &user {
        if !defaults.contains_key(k) {
            let mut known: Vec<&String> = defaults.keys().collect();
            known.sort();
            return Err(Error::Parse(format!("unknown field `{k}` for experiment `{experiment}`; known fields: {known:?}")));
        }
        merged.insert(k.clone(), v.clone());
    }
    match serde_json::from_value::<T>(Value::Object(merged.clone())) {
        Ok(t) => {
            let mut resolved = serde_json::to_value(&t)?;
            if let Value::Object(m) = &mut resolved {
                flatten_profile(m);
            }
            Ok((t, resolved))
        }
        Err(e) => {
            for k in user.keys() {
                let mut trial = merged.clone();
                trial.insert(k.clone(), defaults[k].clone());
                if serde_json::from_value::<T>(Value::Object(trial)).is_ok() {
                    return Err(Error::Parse(format!("field `{k}`: {e}")));
                }
            }
            Err(Error::Parse(e.to_string()))
        }
    }
}

/// Certificates carry process-local law ids; they are dropped from reports.
fn strip_law_ids(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("law_id");
            m.values_mut().for_each(strip_law_ids);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_law_ids),
        _ => {}
    }
}

fn verdicts(list: Vec<(&str, bool)>) -> Vec<Verdict> {
    list.into_iter().map(|(n, p)| Verdict { name: n.to_string(), pass: p }).collect()
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_report(out: &Path, experiment: &str, verdicts: &[Verdict], config: &Value, mut results: Value) -> Result<PathBuf> {
    strip_law_ids(&mut results);
    let report = Report {
        experiment,
        passed: verdicts.iter().all(|v| v.pass),
        verdicts,
        config,
        results: &results,
        generated_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let path = out.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(path)
}

fn gaussian_bump(space: &SpaceGrid, center: f64, width: f64) -> Vec<Complex64> {
    let lx = space.length_x;
    let two_d = space.y.is_some();
    space.sample(|x, y| {
        let g = (-(periodic_offset(x, center * lx, lx) / (width * lx)).powi(2)).exp();
        let m = if two_d { 1.0 + 0.5 * (2.0 * std::f64::consts::PI * y).sin() } else { 1.0 };
        Complex64::new(g * m, 0.0)
    })
}

fn run_selftest(cfg: &SelftestConfig) -> Result<(Vec<Verdict>, Value)> {
    let grid = TimeGrid::new(cfg.t_min, cfg.t_max, cfg.n_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // a few random Gaussians well inside the window
    let span = grid.span();
    let mid = 0.5 * (grid.t_min() + grid.t_max());
    let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| (mid + rng.gen_range(-0.1..0.1) * span, rng.gen_range(0.02..0.05) * span, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let f = WeightedSignal::from_fn(grid, cfg.rho, 2, |t, o| {
        for (i, &(c, w, re, im)) in bumps.iter().enumerate() {
            let g = (-((t - c) / w).powi(2)).exp();
            o[i % 2] += Complex64::new(re * g, im * g);
        }
    })?;
    let n = f.weighted_norm();
    let spec = fourier_laplace(&f);
    let unitarity = (spec.norm() / n - 1.0).abs();
    let roundtrip = inverse_fourier_laplace(&spec).sub(&f)?.weighted_norm() / n;
    let pair_spectral = antiderivative_spectral(&time_derivative(&f))
        .sub(&f)?
        .weighted_norm()
        .max(time_derivative(&antiderivative_spectral(&f)).sub(&f)?.weighted_norm())
        / n;
    let pair_causal = antiderivative(&time_derivative(&f)).sub(&f)?.weighted_norm() / n;

    // ∂t⁻¹ of 1_{[0,1)} is the ramp, with the trapezoid splitting the jump at 0
    let ramp_grid = TimeGrid::new(-2.0, 2.0, 256)?;
    let ind = WeightedSignal::from_fn(ramp_grid, cfg.rho, 1, |t, o| o[0] = Complex64::new(if (0.0..1.0).contains(&t) { 1.0 } else { 0.0 }, 0.0))?;
    let r = antiderivative(&ind);
    let ramp_error = (0..256)
        .map(|s| {
            let t = ramp_grid.time(s);
            let expect = if t < 0.0 {
                0.0
            } else if t >= 1.0 {
                1.0
            } else {
                t + 0.5 * ramp_grid.dt()
            };
            (r.sample(s)[0].re - expect).abs()
        })
        .fold(0.0, f64::max);

    let mut skew_defect = 0.0f64;
    let mut skew_tagged = true;
    let grids = [SpaceGrid::new_1d(cfg.length_x, cfg.n_x)?, SpaceGrid::new_2d(cfg.length_x, cfg.n_x, 1.0, cfg.n_y)?];
    for (g, axes) in grids.iter().zip([&[Axis::X][..], &[Axis::X, Axis::Y][..]]) {
        for &axis in axes {
            let d = periodic_derivative(g, axis)?;
            skew_tagged &= d.is_skew_adjoint();
            let m = d.to_dense();
            skew_defect = skew_defect.max((&m + m.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max));
        }
    }

    let v = verdicts(vec![
        ("transform_unitarity", unitarity <= 1e-8),
        ("transform_roundtrip", roundtrip <= 1e-8),
        ("inverse_pair_spectral", pair_spectral <= 1e-8),
        ("inverse_pair_causal", pair_causal <= 1e-6),
        ("antiderivative_ramp", ramp_error <= 1e-12),
        ("derivative_skew_adjoint", skew_tagged && skew_defect == 0.0),
    ]);
    let results = serde_json::json!({
        "unitarity_defect": unitarity,
        "roundtrip_defect": roundtrip,
        "inverse_pair_spectral_defect": pair_spectral,
        "inverse_pair_causal_defect": pair_causal,
        "ramp_max_error": ramp_error,
        "skew_defect": skew_defect,
    });
    Ok((v, results))
}

struct BuiltLaw {
    law: MaterialLaw,
    space: SpaceGrid,
    a: SpatialOperator,
}

fn build_law(cfg: &LawConfig, rho_min: f64) -> Result<BuiltLaw> {
    let space = if cfg.n_y == 0 {
        SpaceGrid::new_1d(cfg.length_x, cfg.n_x)?
    } else {
        SpaceGrid::new_2d(cfg.length_x, cfg.n_x, 1.0, cfg.n_y)?
    };
    let a = periodic_derivative(&space, Axis::X)?;
    let family = CoefficientFamily::new(cfg.profile.clone())?;
    let axis = if cfg.n_y == 0 { Axis::X } else { Axis::Y };
    let law = match cfg.law {
        LawChoice::ReciprocalCoefficient => MaterialLaw::reciprocal_coefficient(&family.samples(&space, axis, cfg.n)?, rho_min / family.sup)?,
        // Herm(z + a) ≥ ρ + α_c on Re z ≥ ρ
        LawChoice::ShiftedByAOverZ => MaterialLaw::shifted_by_a_over_z(&family.samples(&space, axis, cfg.n)?, rho_min + family.alpha_c)?,
        LawChoice::InverseZ => MaterialLaw::inverse_z(space.dim())?,
        LawChoice::NeumannLimit => {
            if cfg.n_y == 0 {
                return Err(Error::Parse("law `neumann_limit` needs a two-dimensional grid (n_y > 0)".into()));
            }
            let moments = periodic_moments(&family, cfg.k_trunc.max(2))?;
            neumann_limit_law(&moments, &a, rho_min, cfg.k_trunc, cfg.l_trunc)?
        }
    };
    Ok(BuiltLaw { law, space, a })
}

fn run_certify(cfg: &LawConfig, out: &Path) -> Result<(Vec<Verdict>, Value)> {
    let grid = TimeGrid::new(cfg.t_min, cfg.t_max, cfg.n_samples)?;
    let lines = if cfg.rho_list.is_empty() { vec![cfg.rho] } else { cfg.rho_list.clone() };
    let rho_min = lines.iter().copied().fold(f64::INFINITY, f64::min);
    let built = build_law(cfg, rho_min)?;
    let cert = certify_accretivity(&built.law, &lines, cfg.n_freq, grid.nyquist())?;
    let mut w = create(out, "certificate_samples.csv")?;
    use std::io::Write;
    writeln!(w, "rho,xi,lambda_min,norm_zm")?;
    for s in &cert.samples {
        writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e}", s.rho, s.xi, s.lambda_min, s.norm_zm)?;
    }
    w.flush()?;
    let v = verdicts(vec![("accretive", cert.accretive)]);
    Ok((v, serde_json::json!({ "certificate": cert, "tail_estimate": built.law.tail_estimate() })))
}

fn run_solve(cfg: &LawConfig, out: &Path) -> Result<(Vec<Verdict>, Value)> {
    let grid = TimeGrid::new(cfg.t_min, cfg.t_max, cfg.n_samples)?;
    let built = build_law(cfg, cfg.rho)?;
    let psi = gaussian_bump(&built.space, cfg.source_center, cfg.source_width);
    let center = 0.5 * (cfg.t_min + cfg.t_max);
    let f = WeightedSignal::separable(grid, cfg.rho, gaussian_time(center, cfg.time_width), &psi)?;
    let cert = certify_on_grid(&built.law, &grid, cfg.rho)?;
    if !cert.accretive {
        let v = verdicts(vec![("certified", false)]);
        return Ok((v, serde_json::json!({ "certificate": cert })));
    }
    let (u, mut report) = solve(&built.law, &cert, &built.a, &f)?;
    report.causality_defect = Some(check_causality(&built.law, &cert, &built.a, &f, center)?);
    u.write_csv(create(out, "solution.csv")?)?;
    let v = verdicts(vec![("certified", true), ("norm_bound", report.within_norm_bound(1e-6))]);
    let early = truncate_before(&u, center).sub(&u)?.weighted_norm() / u.weighted_norm().max(f64::MIN_POSITIVE);
    Ok((v, serde_json::json!({ "solve": report, "pre_cut_fraction": early, "tail_estimate": built.law.tail_estimate() })))
}

fn write_pairings(out: &Path, name: &str, r: &GConvergenceReport) -> Result<()> {
    use std::io::Write;
    let mut w = create(out, name)?;
    r.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run_static(cfg: &StaticConfig, out: &Path) -> Result<(Vec<Verdict>, Value)> {
    let family = CoefficientFamily::new(cfg.profile.clone())?;
    let (space, axis) = match cfg.law {
        LawChoice::ReciprocalCoefficient => (SpaceGrid::new_1d(cfg.length_x, cfg.n_x)?, Axis::X),
        LawChoice::ShiftedByAOverZ => (SpaceGrid::new_2d(cfg.length_x, cfg.n_x, 1.0, cfg.n_y)?, Axis::Y),
        _ => return Err(Error::Parse("field `law`: gconv-static supports reciprocal_coefficient or shifted_by_a_over_z".into())),
    };
    let a = periodic_derivative(&space, Axis::X)?;
    let coefficients = cfg.n_list.iter().map(|&n| family.samples(&space, axis, n)).collect::<Result<Vec<_>>>()?;
    if cfg.rho_list.is_empty() || cfg.rho_list.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Parse("field `rho_list`: needs at least one positive rho".into()));
    }
    let psi = gaussian_bump(&space, cfg.source_center, cfg.source_width);
    let tests = TestSet::standard(&space, cfg.seed);
    let mut reports = Vec::new();
    for &rho in &cfg.rho_list {
        let (laws, limit) = match cfg.law {
            LawChoice::ReciprocalCoefficient => {
                let moments = periodic_moments(&family, 1)?;
                let laws = cfg
                    .n_list
                    .iter()
                    .zip(&coefficients)
                    .map(|(&n, c)| Ok((n, MaterialLaw::reciprocal_coefficient(c, rho / family.sup)?)))
                    .collect::<Result<Vec<_>>>()?;
                let limit = MaterialLaw::constant(SpatialOperator::identity(space.dim()).scale(Complex64::new(moments.b_inv, 0.0)), rho * moments.b_inv)?;
                (laws, limit)
            }
            _ => {
                let laws = cfg
                    .n_list
                    .iter()
                    .zip(&coefficients)
                    .map(|(&n, c)| Ok((n, MaterialLaw::shifted_by_a_over_z(c, rho + family.alpha_c)?)))
                    .collect::<Result<Vec<_>>>()?;
                let moments = periodic_moments(&family, cfg.k_trunc.max(2))?;
                (laws, neumann_limit_law(&moments, &a, rho, cfg.k_trunc, cfg.l_trunc)?)
            }
        };
        let r = static_criterion(&format!("static_rho_{rho}"), &laws, &a, rho, &psi, &space, &tests, Some(&limit), cfg.tolerance)?;
        write_pairings(out, &format!("pairings_rho_{rho}.csv"), &r)?;
        reports.push(r);
    }
    let v = verdicts(reports.iter().map(|r| (r.label.as_str(), r.verdict)).collect());
    Ok((v, serde_json::json!({ "reports": reports })))
}

/// Checks grids and oscillation indices before any heavy computation.
fn validate_longitudinal(s: &LongitudinalSetup) -> Result<()> {
    TimeGrid::new(s.t_min, s.t_max, s.n_samples)?;
    TimeGrid::new(s.t_min, s.t_max, s.causality_n_samples)?;
    let fam = CoefficientFamily::new(s.profile.clone())?;
    for &n in &s.n_list {
        fam.check_resolution(n, s.length_x / s.n_x as f64)?;
    }
    fam.check_resolution(s.causality_n, s.length_x / s.causality_n_x as f64)
}

fn validate_orthogonal(s: &OrthogonalSetup) -> Result<()> {
    TimeGrid::new(s.t_min, s.t_max, s.n_samples)?;
    TimeGrid::new(s.t_min, s.t_max, s.causality_n_samples)?;
    let fam = CoefficientFamily::new(s.profile.clone())?;
    let kappa = fam.sup + 1.0;
    if !(s.rho > 4.0 * kappa) {
        return Err(crate::error::contract(
            "example-orthogonal",
            format!("precondition rho > 4*kappa violated: rho = {}, 4*kappa = {} (kappa = ||a||_inf + 1)", s.rho, 4.0 * kappa),
        ));
    }
    for &n in &s.n_list {
        fam.check_resolution(n, 1.0 / s.n_y as f64)?;
    }
    fam.check_resolution(s.causality_n, 1.0 / s.causality_n_y as f64)
}

fn run_longitudinal(s: &LongitudinalSetup, out: &Path) -> Result<(Vec<Verdict>, Value)> {
    validate_longitudinal(s)?;
    let o = longitudinal_experiment(s)?;
    for (r, rho) in o.static_reports.iter().zip(&s.static_rhos) {
        write_pairings(out, &format!("static_rho_{rho}.csv"), r)?;
    }
    write_pairings(out, "dynamic.csv", &o.dynamic_report)?;
    Ok((verdicts(o.verdicts()), serde_json::to_value(&o)?))
}

fn run_orthogonal(s: &OrthogonalSetup, out: &Path) -> Result<(Vec<Verdict>, Value)> {
    validate_orthogonal(s)?;
    let o = orthogonal_experiment(s)?;
    write_pairings(out, "static.csv", &o.static_report)?;
    write_pairings(out, "dynamic.csv", &o.dynamic_report)?;
    Ok((verdicts(o.verdicts()), serde_json::to_value(&o)?))
}

/// Runs one experiment from config text, writing `report.json` and CSVs into `out`.
pub fn run(command: &str, config_text: &str, out: &Path) -> Result<RunOutcome> {
    // resolve before touching the output directory
    macro_rules! resolved {
        ($t:ty) => {
            resolve_config::<$t>(command, config_text)?
        };
    }
    enum Resolved {
        Selftest(SelftestConfig),
        Solve(LawConfig),
        Certify(LawConfig),
        Static(StaticConfig),
        Longitudinal(LongitudinalSetup),
        Orthogonal(OrthogonalSetup),
    }
    let (cfg, config_value) = match command {
        "selftest" => {
            let (c, v) = resolved!(SelftestConfig);
            (Resolved::Selftest(c), v)
        }
        "solve" => {
            let (c, v) = resolved!(LawConfig);
            (Resolved::Solve(c), v)
        }
        "certify" => {
            let (c, v) = resolved!(LawConfig);
            (Resolved::Certify(c), v)
        }
        "gconv-static" => {
            let (c, v) = resolved!(StaticConfig);
            (Resolved::Static(c), v)
        }
        "example-longitudinal" => {
            let (c, v) = resolved!(LongitudinalSetup);
            (Resolved::Longitudinal(c), v)
        }
        "example-orthogonal" => {
            let (c, v) = resolved!(OrthogonalSetup);
            (Resolved::Orthogonal(c), v)
        }
        other => return Err(Error::Parse(format!("unknown experiment `{other}`"))),
    };
    match &cfg {
        Resolved::Longitudinal(s) => validate_longitudinal(s)?,
        Resolved::Orthogonal(s) => validate_orthogonal(s)?,
        _ => {}
    }
    fs::create_dir_all(out)?;
    let (verdicts, results) = match &cfg {
        Resolved::Selftest(c) => run_selftest(c)?,
        Resolved::Solve(c) => run_solve(c, out)?,
        Resolved::Certify(c) => run_certify(c, out)?,
        Resolved::Static(c) => run_static(c, out)?,
        Resolved::Longitudinal(s) => run_longitudinal(s, out)?,
        Resolved::Orthogonal(s) => run_orthogonal(s, out)?,
    };
    let report_path = write_report(out, command, &verdicts, &config_value, results)?;
    Ok(RunOutcome {
        passed: verdicts.iter().all(|v| v.pass),
        verdicts,
        report_path,
    })
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("EVOLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Parse(format!("EVOLAB_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Parse(format!("cannot configure thread pool: {e}")))
}

/// Entry point of the `evolab` binary.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    let io = cli.command.io().clone();
    let result = configure_threads().and_then(|_| {
        let text = fs::read_to_string(&io.config).map_err(|e| Error::Parse(format!("cannot read config {}: {e}", io.config.display())))?;
        run(cli.command.name(), &text, &io.out)
    });
    match result {
        Ok(o) => {
            for v in &o.verdicts {
                println!("{} {}", if v.pass { "PASS" } else { "FAIL" }, v.name);
            }
            println!("report: {}", o.report_path.display());
            if o.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_seed_and_known_fields() {
        assert!(resolve_config::<SelftestConfig>("selftest", "{}").unwrap_err().to_string().contains("seed"));
        let e = resolve_config::<SelftestConfig>("selftest", r#"{"seed": 1, "n_sample": 8}"#).unwrap_err();
        assert!(e.to_string().contains("n_sample"));
        let e = resolve_config::<SelftestConfig>("selftest", r#"{"seed": 1, "rho": "big"}"#).unwrap_err();
        assert!(e.to_string().contains("`rho`"), "{e}");
        let e = resolve_config::<SelftestConfig>("selftest", "{\"seed\": 1,\n \"rho\": }").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn defaults_are_written_back() {
        let (c, v) = resolve_config::<LongitudinalSetup>("example-longitudinal", r#"{"seed": 7, "rho": 12}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.rho, 12.0);
        assert_eq!(v["n_x"], 1024);
        assert_eq!(v["profile"], "two_plus_sine");
    }

    #[test]
    fn profile_flattening_roundtrips() {
        let (c, v) = resolve_config::<LawConfig>("solve", r#"{"seed": 1, "profile": "constant", "profile_value": 2.5}"#).unwrap();
        assert_eq!(c.profile, Profile::Constant { value: 2.5 });
        assert_eq!(v["profile_value"], 2.5);
        let (c, _) = resolve_config::<LawConfig>("solve", r#"{"seed": 1, "profile": "custom_samples", "profile_samples": [1, 2]}"#).unwrap();
        assert_eq!(c.profile, Profile::CustomSamples { samples: vec![1.0, 2.0] });
        assert!(resolve_config::<LawConfig>("solve", r#"{"seed": 1, "profile": "constant"}"#).is_err());
        assert!(resolve_config::<LawConfig>("solve", r#"{"seed": 1, "profile": "square"}"#).is_err());
    }

    #[test]
    fn orthogonal_precondition_is_named() {
        let e = validate_orthogonal(&OrthogonalSetup { rho: 16.0, ..Default::default() }).unwrap_err();
        assert!(e.to_string().contains("rho > 4*kappa"), "{e}");
    }

    #[test]
    fn law_ids_are_stripped() {
        let mut v = serde_json::json!({"a": {"law_id": 3, "x": [{"law_id": 4}]}});
        strip_law_ids(&mut v);
        assert_eq!(v, serde_json::json!({"a": {"x": [{}]}}));
    }
}
