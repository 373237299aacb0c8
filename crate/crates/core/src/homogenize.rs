//! G-convergence laboratory: oscillatory coefficient families `a_n(x) = a(n·x)`,
//! their weak-* moment limits, pairing-based detection of weak convergence,
//! and the longitudinal and orthogonal transport examples.
//!
//! Weak convergence is operationalised as convergence of pairings against a
//! fixed test set; limits are supplied analytically and verified, never fitted.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::evo_solver::{check_causality, solve, SolveReport};
use crate::linalg::{self, CMat};
use crate::material_law::{
    certify_accretivity, certify_on_grid, check_f_membership, linear_growth_bound_check, sample_frequencies, sup_norm, LawKind, MaterialLaw,
};
use crate::space_ops::{periodic_derivative, resolvent_solve, Axis, SpaceGrid, SpatialOperator};
use crate::time_axis::{TimeGrid, WeightedSignal};

/// Minimum number of grid samples per oscillation period of `a(n·x)`.
pub const MIN_SAMPLES_PER_PERIOD: f64 = 8.0;

/// Relative floor below which a defect counts as zero.
pub const NOISE_FLOOR: f64 = 1e-12;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// A unit-periodic coefficient profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Profile {
    Constant { value: f64 },
    /// `2 + sin(2πy)`.
    TwoPlusSine,
    /// Piecewise constant on `m` equal cells of `[0, 1)`.
    CustomSamples { samples: Vec<f64> },
}

impl Profile {
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            Profile::Constant { value } => *value,
            Profile::TwoPlusSine => 2.0 + (2.0 * PI * y).sin(),
            Profile::CustomSamples { samples } => {
                let m = samples.len();
                let frac = y - y.floor();
                samples[((frac * m as f64) as usize).min(m - 1)]
            }
        }
    }

    /// `(min, max)` over a period.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Profile::Constant { value } => (*value, *value),
            Profile::TwoPlusSine => (1.0, 3.0),
            Profile::CustomSamples { samples } => samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        }
    }

    pub fn oscillates(&self) -> bool {
        let (lo, hi) = self.bounds();
        hi > lo
    }
}

/// `n ↦ a_n(x) = profile(n·x)` with `α_c ≤ profile ≤ ‖a‖∞`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFamily {
    pub profile: Profile,
    pub alpha_c: f64,
    pub sup: f64,
}

impl CoefficientFamily {
    pub fn new(profile: Profile) -> Result<Self> {
        if let Profile::CustomSamples { samples } = &profile {
            if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
                return Err(contract("CoefficientFamily", "custom samples must be non-empty and finite"));
            }
        }
        let (alpha_c, sup) = profile.bounds();
        if !(alpha_c > 0.0) {
            return Err(contract("CoefficientFamily", format!("profile must be bounded below by a positive constant, min = {alpha_c}")));
        }
        Ok(Self { profile, alpha_c, sup })
    }

    /// Rejects `n` whose oscillation period `1/n` spans fewer than 8 samples.
    pub fn check_resolution(&self, n: usize, h: f64) -> Result<()> {
        if n == 0 {
            return Err(Error::Resolution("oscillation index must be positive".into()));
        }
        if !self.profile.oscillates() {
            return Ok(());
        }
        let per_period = 1.0 / (n as f64 * h);
        if per_period < MIN_SAMPLES_PER_PERIOD * (1.0 - 1e-12) {
            return Err(Error::Resolution(format!(
                "n = {n} leaves {per_period:.2} samples per oscillation period (spacing {h}); at least {MIN_SAMPLES_PER_PERIOD} required"
            )));
        }
        Ok(())
    }

    /// `a_n` sampled on `grid`, oscillating along `axis`.
    pub fn samples(&self, grid: &SpaceGrid, axis: Axis, n: usize) -> Result<Vec<f64>> {
        let h = match axis {
            Axis::X => grid.h_x(),
            Axis::Y if grid.y.is_some() => grid.h_y(),
            Axis::Y => return Err(contract("CoefficientFamily::samples", "grid has no y axis")),
        };
        self.check_resolution(n, h)?;
        Ok((0..grid.dim())
            .map(|i| {
                let (x, y) = grid.coords(i);
                self.profile.eval(n as f64 * if axis == Axis::X { x } else { y })
            })
            .collect())
    }
}

/// Cell averages `b_k = ∫₀¹ a^k` and `b_inv = ∫₀¹ a⁻¹`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub k_max: usize,
    /// `b[k-1] = b_k`.
    pub b: Vec<f64>,
    pub b_inv: f64,
    /// `‖a‖∞ + 1`.
    pub kappa: f64,
    pub alpha_c: f64,
    pub sup: f64,
}

impl MomentTable {
    pub fn b_k(&self, k: usize) -> f64 {
        self.b[k - 1]
    }
}

/// Periodic trapezoid rule on `[0,1)`, doubled until two levels agree.
fn cell_mean(f: impl Fn(f64) -> f64) -> Result<f64> {
    let rule = |n: usize| (0..n).map(|i| f(i as f64 / n as f64)).sum::<f64>() / n as f64;
    let mut n = 64;
    let mut prev = rule(n);
    while n < (1 << 22) {
        n *= 2;
        let next = rule(n);
        if (next - prev).abs() <= 1e-14 * next.abs().max(1.0) {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Quadrature(format!("cell mean not converged at {n} points (last change {:.3e})", (rule(n) - prev).abs())))
}

pub fn periodic_moments(family: &CoefficientFamily, k_max: usize) -> Result<MomentTable> {
    if k_max == 0 {
        return Err(contract("periodic_moments", "k_max must be at least 1"));
    }
    let (b, b_inv) = match &family.profile {
        Profile::CustomSamples { samples } => {
            let m = samples.len() as f64;
            (
                (1..=k_max).map(|k| samples.iter().map(|v| v.powi(k as i32)).sum::<f64>() / m).collect(),
                samples.iter().map(|v| 1.0 / v).sum::<f64>() / m,
            )
        }
        p => {
            let b = (1..=k_max).map(|k| cell_mean(|y| p.eval(y).powi(k as i32))).collect::<Result<Vec<_>>>()?;
            (b, cell_mean(|y| 1.0 / p.eval(y))?)
        }
    };
    Ok(MomentTable {
        k_max,
        b,
        b_inv,
        kappa: family.sup + 1.0,
        alpha_c: family.alpha_c,
        sup: family.sup,
    })
}

/// The fixed test set against which weak convergence is detected: 12
/// Gaussians, 4 indicators and 8 seeded band-limited random fields, each
/// normalised to unit grid norm.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<Complex64>>,
}

const GAUSSIANS: [(f64, f64); 12] = [
    (0.20, 0.03),
    (0.35, 0.05),
    (0.50, 0.08),
    (0.65, 0.12),
    (0.80, 0.20),
    (0.30, 0.04),
    (0.45, 0.10),
    (0.60, 0.06),
    (0.70, 0.15),
    (0.40, 0.25),
    (0.55, 0.035),
    (0.25, 0.09),
];

// Endpoints on multiples of 1/4 sit at the same phase of every oscillation
// period 1/n with 4 | n, so indicator pairings isolate the n-dependence.
const INDICATORS: [(f64, f64); 4] = [(0.25, 0.5), (0.5, 0.75), (0.25, 0.75), (0.0, 0.5)];

const RANDOM_MODES: i32 = 4;

pub(crate) fn periodic_offset(x: f64, c: f64, l: f64) -> f64 {
    let d = (x - c) / l;
    (d - d.round()) * l
}

impl TestSet {
    pub fn standard(grid: &SpaceGrid, seed: u64) -> Self {
        let (lx, ly) = (grid.length_x, grid.length_y());
        let two_d = grid.y.is_some();
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        for (j, &(c, w)) in GAUSSIANS.iter().enumerate() {
            let (cy, wy) = GAUSSIANS[(j + 5) % GAUSSIANS.len()];
            ids.push(format!("gauss{j:02}"));
            vectors.push(grid.sample(|x, y| {
                let gx = (-(periodic_offset(x, c * lx, lx) / (w * lx)).powi(2)).exp();
                let gy = if two_d { (-(periodic_offset(y, cy * ly, ly) / (wy * ly)).powi(2)).exp() } else { 1.0 };
                Complex64::new(gx * gy, 0.0)
            }));
        }
        for (j, &(lo, hi)) in INDICATORS.iter().enumerate() {
            let (ylo, yhi) = INDICATORS[(j + 1) % INDICATORS.len()];
            ids.push(format!("indicator{j}"));
            vectors.push(grid.sample(|x, y| {
                let inx = x >= lo * lx && x < hi * lx;
                let iny = !two_d || (y >= ylo * ly && y < yhi * ly);
                Complex64::new(if inx && iny { 1.0 } else { 0.0 }, 0.0)
            }));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ky_range = if two_d { RANDOM_MODES } else { 0 };
        for j in 0..8 {
            let mut coeffs = Vec::new();
            for kx in -RANDOM_MODES..=RANDOM_MODES {
                for ky in -ky_range..=ky_range {
                    coeffs.push((kx, ky, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
                }
            }
            ids.push(format!("random{j}"));
            vectors.push(grid.sample(|x, y| {
                coeffs
                    .iter()
                    .map(|&(kx, ky, c)| c * Complex64::from_polar(1.0, 2.0 * PI * (kx as f64 * x / lx + ky as f64 * y / ly)))
                    .sum()
            }));
        }
        for v in &mut vectors {
            let n = grid.norm(v);
            for c in v.iter_mut() {
                *c /= n;
            }
        }
        Self { ids, vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `⟨χ_j, φ⟩` for every test.
    pub fn pair(&self, grid: &SpaceGrid, phi: &[Complex64]) -> Vec<Complex64> {
        self.vectors.iter().map(|chi| grid.inner(chi, phi)).collect()
    }
}

/// Separable space-time tests `χ_j(t, x) = θ_j(t) v_j(x)`, each of unit
/// weighted norm. Time profiles are `e^{ρt}` times Gaussians inside the
/// interior of the window.
#[derive(Clone, Debug)]
pub struct SpaceTimeTests {
    pub spatial: TestSet,
    time: Vec<Vec<f64>>,
    grid: TimeGrid,
    rho: f64,
}

const TIME_PROFILES: [(f64, f64); 4] = [(0.5, 0.15), (0.65, 0.15), (0.8, 0.2), (0.4, 0.1)];

impl SpaceTimeTests {
    pub fn new(spatial: TestSet, grid: TimeGrid, rho: f64) -> Self {
        let (lo, hi) = grid.interior();
        let time = TIME_PROFILES
            .iter()
            .map(|&(c, w)| {
                let (c, w) = (lo + c * (hi - lo), w * (hi - lo));
                let theta: Vec<f64> = grid.times().iter().map(|&t| (rho * t - ((t - c) / w).powi(2)).exp()).collect();
                let norm: f64 = theta
                    .iter()
                    .enumerate()
                    .map(|(s, v)| grid.trapezoid_weight(s) * (-2.0 * rho * grid.time(s)).exp() * v * v)
                    .sum::<f64>()
                    .sqrt();
                theta.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        Self { spatial, time, grid, rho }
    }

    /// `⟨χ_j, u⟩_ρ` for every test, with the grid inner product in space.
    pub fn pair(&self, space: &SpaceGrid, u: &WeightedSignal) -> Result<Vec<Complex64>> {
        if *u.grid() != self.grid || u.rho() != self.rho || u.dim() != space.dim() {
            return Err(contract("SpaceTimeTests::pair", "signal does not match the test grid, weight or dimension"));
        }
        let weights: Vec<f64> = (0..self.grid.n_samples())
            .map(|s| self.grid.trapezoid_weight(s) * (-2.0 * self.rho * self.grid.time(s)).exp())
            .collect();
        Ok(self
            .spatial
            .vectors
            .par_iter()
            .enumerate()
            .map(|(j, v)| {
                let theta = &self.time[j % self.time.len()];
                (0..self.grid.n_samples()).map(|s| space.inner(v, u.sample(s)) * (weights[s] * theta[s])).sum()
            })
            .collect())
    }
}

/// Pairing tables over an oscillation index and their convergence diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GConvergenceReport {
    pub label: String,
    pub n_list: Vec<usize>,
    pub test_ids: Vec<String>,
    /// `pairings[i][j] = ⟨χ_j, φ_{n_i}⟩`.
    pub pairings: Vec<Vec<Complex64>>,
    pub limit: Option<Vec<Complex64>>,
    /// Defects are divided by this (the largest limit pairing, or the largest pairing).
    pub scale: f64,
    /// `max_j |P[i][j] − L[j]| / scale`, when a limit is supplied.
    pub defects: Vec<f64>,
    /// `max_j |P[i+1][j] − P[i][j]| / scale`.
    pub cauchy: Vec<f64>,
    /// Least-squares slope of `log defect` against `log n` (negative when converging).
    pub rate: Option<f64>,
    pub monotone: bool,
    pub tolerance: f64,
    pub verdict: bool,
}

/// Each step strictly decreases, or is already below the noise floor.
pub fn decreasing_within_noise(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0] || w[1] <= NOISE_FLOOR)
}

fn fitted_rate(n_list: &[usize], defects: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = n_list
        .iter()
        .zip(defects)
        .filter(|(_, &d)| d > NOISE_FLOOR)
        .map(|(&n, &d)| ((n as f64).ln(), d.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / m, sy / m);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn max_gap(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

impl GConvergenceReport {
    pub fn assemble(label: impl Into<String>, n_list: Vec<usize>, test_ids: Vec<String>, pairings: Vec<Vec<Complex64>>, limit: Option<Vec<Complex64>>, tolerance: f64) -> Self {
        let max_abs = |rows: &mut dyn Iterator<Item = &Complex64>| rows.map(|c| c.norm()).fold(0.0, f64::max);
        let raw_scale = match &limit {
            Some(l) => max_abs(&mut l.iter()),
            None => max_abs(&mut pairings.iter().flatten()),
        };
        let scale = if raw_scale > 0.0 { raw_scale } else { 1.0 };
        let defects: Vec<f64> = match &limit {
            Some(l) => pairings.iter().map(|p| max_gap(p, l) / scale).collect(),
            None => Vec::new(),
        };
        let cauchy: Vec<f64> = pairings.windows(2).map(|w| max_gap(&w[0], &w[1]) / scale).collect();
        let (monotone, final_defect) = if limit.is_some() {
            (decreasing_within_noise(&defects) && decreasing_within_noise(&cauchy), defects.last().copied())
        } else {
            (decreasing_within_noise(&cauchy), cauchy.last().copied())
        };
        let rate = if limit.is_some() { fitted_rate(&n_list, &defects) } else { None };
        let verdict = monotone && final_defect.is_some_and(|d| d <= tolerance);
        Self {
            label: label.into(),
            n_list,
            test_ids,
            pairings,
            limit,
            scale,
            defects,
            cauchy,
            rate,
            monotone,
            tolerance,
            verdict,
        }
    }

    pub fn final_defect(&self) -> Option<f64> {
        if self.limit.is_some() {
            self.defects.last().copied()
        } else {
            self.cauchy.last().copied()
        }
    }

    /// `n,test_id,re,im,defect`; the defect is against the limit when one is
    /// supplied, otherwise against the previous index (`nan` on the first row).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n,test_id,re,im,defect")?;
        for (i, (n, row)) in self.n_list.iter().zip(&self.pairings).enumerate() {
            for (j, p) in row.iter().enumerate() {
                let defect = match (&self.limit, i) {
                    (Some(l), _) => (p - l[j]).norm() / self.scale,
                    (None, 0) => f64::NAN,
                    (None, _) => (p - self.pairings[i - 1][j]).norm() / self.scale,
                };
                writeln!(w, "{n},{},{:.16e},{:.16e},{:.16e}", self.test_ids[j], p.re, p.im, defect)?;
            }
        }
        Ok(())
    }
}

/// Certifies `law` at the single point `z = ρ` used by the static problem.
fn require_static_certificate(law: &MaterialLaw, rho: f64) -> Result<()> {
    let cert = certify_accretivity(law, &[rho], 1, 1.0)?;
    if !cert.accretive {
        return Err(contract(
            "static_criterion",
            format!("law '{}' is not certified {}-accretive at z = {rho}", law.name(), law.alpha()),
        ));
    }
    Ok(())
}

fn static_solution(law: &MaterialLaw, a: &SpatialOperator, rho: f64, psi: &[Complex64]) -> Result<Vec<Complex64>> {
    require_static_certificate(law, rho)?;
    let c = law.eval_zm(Complex64::new(rho, 0.0))?;
    Ok(resolvent_solve(&c, a, psi, law.alpha())?.phi)
}

/// Solves `(ρM_n(ρ) + A) φ_n = ψ` for each law and tracks the pairings
/// `⟨χ_j, φ_n⟩`; with a candidate limit law, compares against
/// `⟨χ_j, (ρM(ρ) + A)⁻¹ψ⟩`.
#[allow(clippy::too_many_arguments)]
pub fn static_criterion(
    label: &str,
    laws: &[(usize, MaterialLaw)],
    a: &SpatialOperator,
    rho: f64,
    psi: &[Complex64],
    grid: &SpaceGrid,
    tests: &TestSet,
    limit: Option<&MaterialLaw>,
    tolerance: f64,
) -> Result<GConvergenceReport> {
    let pairings = laws
        .par_iter()
        .map(|(_, law)| Ok(tests.pair(grid, &static_solution(law, a, rho, psi)?)))
        .collect::<Result<Vec<_>>>()?;
    let limit_pairings = limit.map(|l| static_solution(l, a, rho, psi).map(|phi| tests.pair(grid, &phi))).transpose()?;
    Ok(GConvergenceReport::assemble(
        label,
        laws.iter().map(|(n, _)| *n).collect(),
        tests.ids.clone(),
        pairings,
        limit_pairings,
        tolerance,
    ))
}

/// Solution of `φ' + ρ a⁻¹ φ = ψ` on the periodic cell through the kernel
/// `e^{−ρ∫_ξ^x a⁻¹}`: exact integration cell by cell with `a⁻¹` averaged by the
/// trapezoid rule and `ψ` linear inside each cell, closed periodically.
pub fn longitudinal_exact(a: &[f64], h: f64, rho: f64, psi: &[Complex64]) -> Result<Vec<Complex64>> {
    let m = a.len();
    if m != psi.len() || m < 2 {
        return Err(contract("longitudinal_exact", "coefficient and source lengths differ"));
    }
    if a.iter().any(|&v| !(v > 0.0)) || !(rho > 0.0 && h > 0.0) {
        return Err(contract("longitudinal_exact", "need positive coefficients, rho and spacing"));
    }
    // Per-cell decay and response to the two endpoint values of ψ.
    let cells: Vec<(f64, f64, f64)> = (0..m)
        .map(|j| {
            let c = 0.5 * rho * (1.0 / a[j] + 1.0 / a[(j + 1) % m]);
            let ch = c * h;
            let one_minus_e = -(-ch).exp_m1();
            let e = 1.0 - one_minus_e;
            let flat = one_minus_e / c;
            // ∫₀ʰ e^{−c(h−s)} s/h ds
            let ramp = flat - (one_minus_e - ch * e) / (c * c * h);
            (e, flat - ramp, ramp)
        })
        .collect();
    let sweep = |phi0: Complex64| {
        let mut out = Vec::with_capacity(m + 1);
        out.push(phi0);
        let mut phi = phi0;
        for j in 0..m {
            let (e, w0, w1) = cells[j];
            phi = e * phi + w0 * psi[j] + w1 * psi[(j + 1) % m];
            out.push(phi);
        }
        out
    };
    let e_total: f64 = cells.iter().map(|c| c.0).product();
    let q = sweep(ZERO)[m];
    let mut out = sweep(q / (1.0 - e_total));
    out.truncate(m);
    Ok(out)
}

/// `N(z) = 1 + z⁻¹ Σ_{ℓ=1..L} S^{ℓ−1} T^ℓ` with `S = (z + A_x)⁻¹` and
/// `T = Σ_{k=1..K} (−S)^{k−1} b_k`, acting identically on every `y`-slice.
///
/// Equivalently `1 + z⁻¹T − z⁻¹Σ_{ℓ≥2}(−S)^{ℓ−1}(−T)^ℓ`. For a constant profile
/// `c` the series resums to `1 + c/z`.
pub fn neumann_limit_law(moments: &MomentTable, a_x: &SpatialOperator, rho: f64, k: usize, l: usize) -> Result<MaterialLaw> {
    let nu = 4.0 * moments.kappa;
    if !(rho > nu) {
        return Err(contract(
            "neumann_limit_law",
            format!("requires rho > 4*kappa = {nu} for the Neumann series bound, got rho = {rho}"),
        ));
    }
    if k < 2 || l < 2 || k > moments.k_max {
        return Err(contract("neumann_limit_law", format!("need 2 <= K <= k_max = {} and L >= 2, got K = {k}, L = {l}", moments.k_max)));
    }
    if !a_x.is_skew_adjoint() {
        return Err(contract("neumann_limit_law", "A_x must be skew-adjoint"));
    }
    let Some((b, block)) = a_x.uniform_block() else {
        return Err(contract("neumann_limit_law", "A_x must act identically on every slice"));
    };
    let copies = a_x.dim() / b;
    let moments_b: Vec<f64> = moments.b[..k].to_vec();
    let r = moments.kappa / rho;
    let q = r / (1.0 - r);
    let tail = r.powi(k as i32 + 1) / (1.0 - r) / (1.0 - q).powi(2) + q.powi(l as i32 + 1) / (1.0 - q);
    let eval = move |z: Complex64| -> Result<SpatialOperator> {
        let m = neumann_block(&block, &moments_b, l, z)?;
        SpatialOperator::repeated_block(m, copies)
    };
    Ok(MaterialLaw::new("neumann_limit", LawKind::NeumannLimit, a_x.dim(), nu, 1.0, Arc::new(eval))?.with_tail_estimate(tail))
}

fn slice_resolvent(block: &CMat, z: Complex64) -> Result<CMat> {
    let n = block.nrows();
    (CMat::identity(n, n) * z + block).try_inverse().ok_or(Error::LawEval {
        re: z.re,
        im: z.im,
        msg: "z + A_x is singular".into(),
    })
}

fn neumann_block(block: &CMat, b: &[f64], l: usize, z: Complex64) -> Result<CMat> {
    let n = block.nrows();
    let id = CMat::identity(n, n);
    let s = slice_resolvent(block, z)?;
    let minus_s = -&s;
    // Horner: T = b_1 + (−S)(b_2 + (−S)(b_3 + …))
    let mut t = &id * Complex64::new(b[b.len() - 1], 0.0);
    for &bk in b.iter().rev().skip(1) {
        t = &minus_s * t + &id * Complex64::new(bk, 0.0);
    }
    // Σ_{ℓ=1..L} S^{ℓ−1}T^ℓ = T (1 + ST(1 + ST(…)))
    let st = &s * &t;
    let mut acc = id.clone();
    for _ in 1..l {
        acc = &id + &st * acc;
    }
    Ok(id + t * acc * z.inv())
}

/// Norms of the partial sums `Σ_{k=1..K}(−S_z)^k c^k` for every `K ≤ k_max`,
/// for each scalar coefficient value `c` and each moment sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailBoundReport {
    pub rho: f64,
    pub kappa: f64,
    pub k_max: usize,
    pub bound: f64,
    pub max_partial_sum_norm: f64,
    pub n_partial_sums: usize,
    pub holds: bool,
}

/// Checks `‖Σ_{k=1..K}(−S)^k a^k‖ ≤ 1/3` (prelimit, per distinct value of `a`)
/// and `‖Σ_{k=1..K}(−S)^k b_k‖ ≤ 1/3` (limit) at every sample `z`.
pub fn neumann_tail_bound(a_x: &SpatialOperator, coefficient_values: &[f64], moments: &MomentTable, zs: &[Complex64], tol: f64) -> Result<TailBoundReport> {
    let Some((_, block)) = a_x.uniform_block() else {
        return Err(contract("neumann_tail_bound", "A_x must act identically on every slice"));
    };
    let rho = zs.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    if !(moments.kappa / rho <= 0.25) {
        return Err(contract("neumann_tail_bound", format!("bound requires kappa/rho <= 1/4, got {}", moments.kappa / rho)));
    }
    let mut distinct: Vec<f64> = coefficient_values.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    let sequences: Vec<Vec<f64>> = distinct
        .iter()
        .map(|&c| (1..=moments.k_max).map(|k| c.powi(k as i32)).collect())
        .chain(std::iter::once(moments.b.clone()))
        .collect();
    let results: Vec<(f64, usize)> = zs
        .par_iter()
        .map(|&z| {
            let minus_s = -slice_resolvent(&block, z)?;
            let mut worst = 0.0f64;
            let mut count = 0;
            for seq in &sequences {
                let mut power = CMat::identity(block.nrows(), block.nrows());
                let mut partial = CMat::zeros(block.nrows(), block.nrows());
                for &c in seq {
                    power = &minus_s * power;
                    partial += &power * Complex64::new(c, 0.0);
                    worst = worst.max(linalg::spectral_norm(&partial));
                    count += 1;
                }
            }
            Ok((worst, count))
        })
        .collect::<Result<_>>()?;
    let max_partial_sum_norm = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let bound = 1.0 / 3.0;
    Ok(TailBoundReport {
        rho,
        kappa: moments.kappa,
        k_max: moments.k_max,
        bound,
        max_partial_sum_norm,
        n_partial_sums: results.iter().map(|r| r.1).sum(),
        holds: max_partial_sum_norm <= bound + tol,
    })
}

/// Prelimit constants `(α, β)` of a family of static operators: `α` is the
/// smallest Hermitian eigenvalue and `β` the smallest constant with
/// `‖Cφ‖² ≤ β Re⟨φ,Cφ⟩` for every member.
pub fn family_f_constants(ops: &[SpatialOperator]) -> Result<(f64, f64)> {
    let mut alpha = f64::INFINITY;
    let mut beta = 0.0f64;
    for c in ops {
        alpha = alpha.min(c.hermitian_min().0);
        beta = beta.max(c.relative_bound().ok_or_else(|| contract("family_f_constants", "Hermitian part not positive definite"))?);
    }
    if !(alpha > 0.0) {
        return Err(contract("family_f_constants", "family is not uniformly accretive"));
    }
    // F(α, β) needs α < β; equality only happens for scalar multiples of I.
    if beta <= alpha {
        beta = alpha * (1.0 + 1e-12);
    }
    Ok((alpha, beta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FClosureReport {
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tolerance: f64,
    pub accretivity_margin: f64,
    pub boundedness_margin: f64,
    pub member: bool,
}

/// Whether the limit static operator `ρM(ρ)` lies in the prelimit class `F(α, β)`.
pub fn f_closure(prelimit: &[SpatialOperator], limit: &SpatialOperator, rho: f64, tol: f64) -> Result<FClosureReport> {
    let (alpha, beta) = family_f_constants(prelimit)?;
    let m = check_f_membership(limit, alpha, beta, tol)?;
    Ok(FClosureReport {
        rho,
        alpha,
        beta,
        tolerance: tol,
        accretivity_margin: m.accretivity_margin,
        boundedness_margin: m.boundedness_margin,
        member: m.member,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub sup_bound: f64,
    pub alpha: f64,
    pub n_samples: usize,
    /// Largest sampled `‖M(z)‖` of the limit law.
    pub sup_sampled_norm: f64,
    pub passes: bool,
}

pub fn growth_report(law: &MaterialLaw, sup_bound: f64, alpha: f64, zs: &[Complex64]) -> Result<GrowthReport> {
    Ok(GrowthReport {
        sup_bound,
        alpha,
        n_samples: zs.len(),
        sup_sampled_norm: sup_norm(law, zs)?,
        passes: linear_growth_bound_check(law, sup_bound, alpha, zs, 1e-12)?,
    })
}

/// Static⇔dynamic agreement: when the dynamic pairings converge, every static
/// report must reach its limit within `tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub tolerance: f64,
    pub dynamic_converged: bool,
    pub static_final_defects: Vec<f64>,
    pub consistent: bool,
}

pub fn consistency(dynamic: &GConvergenceReport, statics: &[GConvergenceReport], tolerance: f64) -> ConsistencyReport {
    let defects: Vec<f64> = statics.iter().map(|r| r.final_defect().unwrap_or(f64::INFINITY)).collect();
    let consistent = !dynamic.verdict || statics.iter().all(|r| r.monotone) && defects.iter().all(|&d| d <= tolerance);
    ConsistencyReport {
        tolerance,
        dynamic_converged: dynamic.verdict,
        static_final_defects: defects,
        consistent,
    }
}

/// Causality defects at a grid and its refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityStudy {
    pub n_samples: Vec<usize>,
    pub defects: Vec<f64>,
    pub tolerance: f64,
    pub passes: bool,
}

/// Measures the causality defect at `grid` and `levels − 1` refinements,
/// cutting at the middle of the window.
pub fn causality_study(law_for: impl Fn() -> Result<MaterialLaw>, a: &SpatialOperator, source: impl Fn(TimeGrid) -> Result<WeightedSignal>, grid: TimeGrid, levels: usize, tolerance: f64) -> Result<CausalityStudy> {
    let mut g = grid;
    let mut n_samples = Vec::new();
    let mut defects = Vec::new();
    for _ in 0..levels {
        let law = law_for()?;
        let f = source(g)?;
        let cert = certify_on_grid(&law, &g, f.rho())?;
        let cut = 0.5 * (g.t_min() + g.t_max());
        defects.push(check_causality(&law, &cert, a, &f, cut)?);
        n_samples.push(g.n_samples());
        g = g.refined();
    }
    let passes = defects[0] <= tolerance && decreasing_within_noise(&defects);
    Ok(CausalityStudy {
        n_samples,
        defects,
        tolerance,
        passes,
    })
}

pub(crate) fn gaussian_time(center: f64, width: f64) -> impl Fn(f64) -> Complex64 {
    move |t| Complex64::new((-((t - center) / width).powi(2)).exp(), 0.0)
}

pub(crate) fn line_samples(rho: f64, xi_max: f64) -> Vec<Complex64> {
    sample_frequencies(33, xi_max).into_iter().map(|x| Complex64::new(rho, x)).collect()
}

/// Solves with a freshly certified law; the certificate covers exactly the grid.
fn certified_solve(law: &MaterialLaw, a: &SpatialOperator, f: &WeightedSignal) -> Result<(WeightedSignal, SolveReport)> {
    let cert = certify_on_grid(law, f.grid(), f.rho())?;
    if !cert.accretive {
        return Err(contract("certified_solve", format!("law '{}' failed certification on Re z = {}", law.name(), f.rho())));
    }
    solve(law, &cert, a, f)
}

fn dynamic_report(
    label: &str,
    n_list: &[usize],
    solves: &[(WeightedSignal, SolveReport)],
    limit: &(WeightedSignal, SolveReport),
    tests: &SpaceTimeTests,
    space: &SpaceGrid,
    tolerance: f64,
) -> Result<GConvergenceReport> {
    let pairings = solves.iter().map(|(u, _)| tests.pair(space, u)).collect::<Result<Vec<_>>>()?;
    let limit_pairings = tests.pair(space, &limit.0)?;
    Ok(GConvergenceReport::assemble(label, n_list.to_vec(), tests.spatial.ids.clone(), pairings, Some(limit_pairings), tolerance))
}

/// Reference configuration of the longitudinal example `(∂t a_n⁻¹ + ∂x) u = f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalSetup {
    pub profile: Profile,
    pub rho: f64,
    pub static_rhos: Vec<f64>,
    pub length_x: f64,
    pub n_x: usize,
    pub n_list: Vec<usize>,
    pub t_min: f64,
    pub t_max: f64,
    pub n_samples: usize,
    pub source_center: f64,
    pub source_width: f64,
    pub time_width: f64,
    pub tolerance: f64,
    pub consistency_tolerance: f64,
    pub f_tolerance: f64,
    pub seed: u64,
    /// Causality study: spatial points, oscillation index and base time samples.
    pub causality_n_x: usize,
    pub causality_n: usize,
    pub causality_n_samples: usize,
    pub causality_tolerance: f64,
}

impl Default for LongitudinalSetup {
    fn default() -> Self {
        Self {
            profile: Profile::TwoPlusSine,
            rho: 10.0,
            static_rhos: vec![10.0, 20.0],
            length_x: 1.0,
            n_x: 1024,
            n_list: vec![4, 8, 16, 32, 64],
            t_min: -2.0,
            t_max: 2.0,
            n_samples: 256,
            source_center: 0.5,
            source_width: 0.1,
            time_width: 0.3,
            tolerance: 2e-3,
            consistency_tolerance: 5e-3,
            f_tolerance: 1e-8,
            seed: 20240607,
            causality_n_x: 256,
            causality_n: 8,
            causality_n_samples: 1024,
            causality_tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalOutcome {
    pub moments: MomentTable,
    pub static_reports: Vec<GConvergenceReport>,
    pub dynamic_report: GConvergenceReport,
    pub solve_reports: Vec<SolveReport>,
    pub limit_solve_report: SolveReport,
    pub norm_bound_holds: bool,
    /// Largest relative gap between the matrix solve and the kernel quadrature, per `n`.
    pub kernel_oracle_gaps: Vec<f64>,
    pub f_closure: FClosureReport,
    pub growth: GrowthReport,
    pub consistency: ConsistencyReport,
    pub causality: CausalityStudy,
}

impl LongitudinalOutcome {
    pub fn verdicts(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("static_convergence", self.static_reports.iter().all(|r| r.verdict)),
            ("dynamic_convergence", self.dynamic_report.verdict),
            ("norm_bound", self.norm_bound_holds),
            ("f_closure", self.f_closure.member),
            ("growth_bound", self.growth.passes),
            ("static_dynamic_consistency", self.consistency.consistent),
            ("causality", self.causality.passes),
        ]
    }
}

pub fn longitudinal_experiment(setup: &LongitudinalSetup) -> Result<LongitudinalOutcome> {
    if !(setup.rho > 0.0) || setup.static_rhos.iter().any(|r| !(*r > 0.0)) {
        return Err(contract("longitudinal_experiment", "rho must be positive"));
    }
    if setup.n_list.is_empty() {
        return Err(contract("longitudinal_experiment", "n_list is empty"));
    }
    let family = CoefficientFamily::new(setup.profile.clone())?;
    let moments = periodic_moments(&family, 2)?;
    let space = SpaceGrid::new_1d(setup.length_x, setup.n_x)?;
    let a_op = periodic_derivative(&space, Axis::X)?;
    let psi = space.sample(|x, _| Complex64::new((-(periodic_offset(x, setup.source_center * setup.length_x, setup.length_x) / (setup.source_width * setup.length_x)).powi(2)).exp(), 0.0));
    let tests = TestSet::standard(&space, setup.seed);
    let coefficients = setup.n_list.iter().map(|&n| family.samples(&space, Axis::X, n)).collect::<Result<Vec<_>>>()?;
    // accretivity constant of z a⁻¹ on Re z = ρ is ρ/‖a‖∞
    let laws_at = |rho: f64| -> Result<Vec<(usize, MaterialLaw)>> {
        setup
            .n_list
            .iter()
            .zip(&coefficients)
            .map(|(&n, a)| Ok((n, MaterialLaw::reciprocal_coefficient(a, rho / family.sup)?)))
            .collect()
    };
    let limit_at = |rho: f64| MaterialLaw::constant(SpatialOperator::identity(space.dim()).scale(Complex64::new(moments.b_inv, 0.0)), rho * moments.b_inv);

    let static_reports = setup
        .static_rhos
        .iter()
        .map(|&rho| {
            static_criterion(
                &format!("longitudinal_static_rho_{rho}"),
                &laws_at(rho)?,
                &a_op,
                rho,
                &psi,
                &space,
                &tests,
                Some(&limit_at(rho)?),
                setup.tolerance,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let kernel_oracle_gaps = coefficients
        .par_iter()
        .map(|a| {
            let exact = longitudinal_exact(a, space.h_x(), setup.rho, &psi)?;
            let c = SpatialOperator::diagonal(a.iter().map(|v| Complex64::new(setup.rho / v, 0.0)).collect());
            let phi = resolvent_solve(&c, &a_op, &psi, setup.rho / family.sup)?.phi;
            Ok(space.norm(&phi.iter().zip(&exact).map(|(x, y)| x - y).collect::<Vec<_>>()) / space.norm(&exact))
        })
        .collect::<Result<Vec<_>>>()?;

    let time = TimeGrid::new(setup.t_min, setup.t_max, setup.n_samples)?;
    let t_center = 0.5 * (setup.t_min + setup.t_max);
    let f = WeightedSignal::separable(time, setup.rho, gaussian_time(t_center, setup.time_width), &psi)?;
    let laws = laws_at(setup.rho)?;
    let solves = laws.par_iter().map(|(_, law)| certified_solve(law, &a_op, &f)).collect::<Result<Vec<_>>>()?;
    let limit_law = limit_at(setup.rho)?;
    let limit_solve = certified_solve(&limit_law, &a_op, &f)?;
    let st_tests = SpaceTimeTests::new(tests.clone(), time, setup.rho);
    let dynamic = dynamic_report("longitudinal_dynamic", &setup.n_list, &solves, &limit_solve, &st_tests, &space, setup.tolerance)?;
    let norm_bound_holds = solves.iter().chain(std::iter::once(&limit_solve)).all(|(_, r)| r.within_norm_bound(1e-6));

    let rho = setup.rho;
    let prelimit_ops: Vec<SpatialOperator> = laws.iter().map(|(_, l)| l.eval_zm(Complex64::new(rho, 0.0))).collect::<Result<_>>()?;
    let f_closure = f_closure(&prelimit_ops, &limit_law.eval_zm(Complex64::new(rho, 0.0))?, rho, setup.f_tolerance)?;
    // sup_n sup_z ‖a_n⁻¹‖ = 1/α_c, with the prelimit accretivity constant ρ/‖a‖∞
    let growth = growth_report(&limit_law, 1.0 / family.alpha_c, rho / family.sup, &line_samples(rho, time.nyquist()))?;
    let consistency = consistency(&dynamic, &static_reports, setup.consistency_tolerance);

    let c_space = SpaceGrid::new_1d(setup.length_x, setup.causality_n_x)?;
    let c_a = periodic_derivative(&c_space, Axis::X)?;
    let c_coeff = family.samples(&c_space, Axis::X, setup.causality_n)?;
    let c_psi = c_space.sample(|x, _| Complex64::new((-(periodic_offset(x, setup.source_center * setup.length_x, setup.length_x) / (setup.source_width * setup.length_x)).powi(2)).exp(), 0.0));
    let causality = causality_study(
        || MaterialLaw::reciprocal_coefficient(&c_coeff, rho / family.sup),
        &c_a,
        |g| WeightedSignal::separable(g, rho, gaussian_time(t_center, setup.time_width), &c_psi),
        TimeGrid::new(setup.t_min, setup.t_max, setup.causality_n_samples)?,
        2,
        setup.causality_tolerance,
    )?;

    Ok(LongitudinalOutcome {
        moments,
        static_reports,
        dynamic_report: dynamic,
        solve_reports: solves.into_iter().map(|s| s.1).collect(),
        limit_solve_report: limit_solve.1,
        norm_bound_holds,
        kernel_oracle_gaps,
        f_closure,
        growth,
        consistency,
        causality,
    })
}

/// Reference configuration of the orthogonal example `(∂t + a_n(y) + ∂x) u = f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalSetup {
    pub profile: Profile,
    pub rho: f64,
    pub length_x: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub n_list: Vec<usize>,
    pub k_trunc: usize,
    pub l_trunc: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub n_samples: usize,
    pub time_width: f64,
    pub tolerance: f64,
    pub consistency_tolerance: f64,
    pub f_tolerance: f64,
    pub seed: u64,
    pub causality_n_y: usize,
    pub causality_n: usize,
    pub causality_n_samples: usize,
    pub causality_tolerance: f64,
}

impl Default for OrthogonalSetup {
    fn default() -> Self {
        Self {
            profile: Profile::TwoPlusSine,
            rho: 17.0,
            length_x: 1.0,
            n_x: 16,
            n_y: 512,
            n_list: vec![4, 8, 16, 32, 64],
            k_trunc: 24,
            l_trunc: 24,
            t_min: -2.0,
            t_max: 2.0,
            n_samples: 256,
            time_width: 0.3,
            tolerance: 5e-3,
            consistency_tolerance: 5e-3,
            f_tolerance: 1e-8,
            seed: 20240607,
            causality_n_y: 32,
            causality_n: 4,
            causality_n_samples: 1024,
            causality_tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantSanity {
    pub value: f64,
    pub tail_estimate: f64,
    /// `max_z ‖N(z) − (1 + c/z)‖` over the sampled line.
    pub law_gap: f64,
    /// `‖u_limit − u_c‖_ρ / ‖u_c‖_ρ` for the same source.
    pub solve_gap: f64,
    pub passes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalOutcome {
    pub moments: MomentTable,
    pub tail_estimate: f64,
    pub tail_bound: TailBoundReport,
    pub constant_sanity: ConstantSanity,
    pub static_report: GConvergenceReport,
    pub dynamic_report: GConvergenceReport,
    pub solve_reports: Vec<SolveReport>,
    pub limit_solve_report: SolveReport,
    pub norm_bound_holds: bool,
    pub f_closure: FClosureReport,
    pub growth: GrowthReport,
    pub consistency: ConsistencyReport,
    pub causality: CausalityStudy,
}

impl OrthogonalOutcome {
    pub fn verdicts(&self) -> Vec<(&'static str, bool)> {
        let d = &self.dynamic_report.defects;
        vec![
            ("tail_bound", self.tail_bound.holds),
            ("constant_sanity", self.constant_sanity.passes),
            ("dynamic_defect_decreases", d.len() >= 2 && d[d.len() - 1] < d[0]),
            ("static_convergence", self.static_report.verdict),
            ("norm_bound", self.norm_bound_holds),
            ("f_closure", self.f_closure.member),
            ("growth_bound", self.growth.passes),
            ("static_dynamic_consistency", self.consistency.consistent),
            ("causality", self.causality.passes),
        ]
    }
}

fn orthogonal_source(space: &SpaceGrid) -> Vec<Complex64> {
    let lx = space.length_x;
    space.sample(|x, y| {
        let gx = (-(periodic_offset(x, 0.5 * lx, lx) / (0.15 * lx)).powi(2)).exp();
        Complex64::new(gx * (1.0 + 0.5 * (2.0 * PI * y).sin()), 0.0)
    })
}

/// Neumann limit law for `setup`; `rho ≤ 4κ` is rejected.
pub fn orthogonal_limit_law(setup: &OrthogonalSetup, space: &SpaceGrid) -> Result<(MomentTable, MaterialLaw)> {
    let family = CoefficientFamily::new(setup.profile.clone())?;
    let moments = periodic_moments(&family, setup.k_trunc.max(2))?;
    let a_x = periodic_derivative(space, Axis::X)?;
    let law = neumann_limit_law(&moments, &a_x, setup.rho, setup.k_trunc, setup.l_trunc)?;
    Ok((moments, law))
}

pub fn orthogonal_experiment(setup: &OrthogonalSetup) -> Result<OrthogonalOutcome> {
    if setup.n_list.is_empty() {
        return Err(contract("orthogonal_experiment", "n_list is empty"));
    }
    let family = CoefficientFamily::new(setup.profile.clone())?;
    let kappa = family.sup + 1.0;
    if !(setup.rho > 4.0 * kappa) {
        return Err(contract(
            "orthogonal_experiment",
            format!("requires rho > 4*kappa = {} (kappa = ||a||_inf + 1), got rho = {}", 4.0 * kappa, setup.rho),
        ));
    }
    let space = SpaceGrid::new_2d(setup.length_x, setup.n_x, 1.0, setup.n_y)?;
    let a_op = periodic_derivative(&space, Axis::X)?;
    let (moments, limit_law) = orthogonal_limit_law(setup, &space)?;
    let tail_estimate = limit_law.tail_estimate().unwrap_or(f64::NAN);
    let rho = setup.rho;
    let time = TimeGrid::new(setup.t_min, setup.t_max, setup.n_samples)?;
    let zs = line_samples(rho, time.nyquist());

    let coefficients = setup.n_list.iter().map(|&n| family.samples(&space, Axis::Y, n)).collect::<Result<Vec<_>>>()?;
    let all_values: Vec<f64> = coefficients.iter().flatten().copied().collect();
    let tail_bound = neumann_tail_bound(&a_op, &all_values, &moments, &zs, 1e-9)?;

    let psi = orthogonal_source(&space);
    let t_center = 0.5 * (setup.t_min + setup.t_max);
    let f = WeightedSignal::separable(time, rho, gaussian_time(t_center, setup.time_width), &psi)?;

    // constant-profile sanity: the limit law of a ≡ c must be 1 + c/z
    let c = moments.b_k(1);
    let const_setup = OrthogonalSetup {
        profile: Profile::Constant { value: c },
        ..setup.clone()
    };
    let (_, const_limit) = orthogonal_limit_law(&const_setup, &space)?;
    let const_tail = const_limit.tail_estimate().unwrap_or(f64::NAN);
    let direct = MaterialLaw::shifted_by_a_over_z(&vec![c; space.dim()], 1.0)?;
    let mut law_gap = 0.0f64;
    for &z in &zs {
        let gap = const_limit.eval(z)?.add(&direct.eval(z)?.scale(-ONE))?.operator_norm();
        law_gap = law_gap.max(gap);
    }
    let (u_direct, _) = certified_solve(&direct, &a_op, &f)?;
    let (u_const_limit, _) = certified_solve(&const_limit, &a_op, &f)?;
    let solve_gap = u_const_limit.sub(&u_direct)?.weighted_norm() / u_direct.weighted_norm();
    // the truncation tail can sit below double precision; allow for roundoff
    let floor = const_tail + 1e-12;
    let constant_sanity = ConstantSanity {
        value: c,
        tail_estimate: const_tail,
        law_gap,
        solve_gap,
        passes: law_gap <= floor && solve_gap <= floor,
    };

    let tests = TestSet::standard(&space, setup.seed);
    let laws: Vec<(usize, MaterialLaw)> = setup
        .n_list
        .iter()
        .zip(&coefficients)
        .map(|(&n, a)| Ok((n, MaterialLaw::shifted_by_a_over_z(a, 1.0)?)))
        .collect::<Result<_>>()?;
    let static_report = static_criterion("orthogonal_static", &laws, &a_op, rho, &psi, &space, &tests, Some(&limit_law), setup.tolerance)?;

    let solves = laws.par_iter().map(|(_, law)| certified_solve(law, &a_op, &f)).collect::<Result<Vec<_>>>()?;
    let limit_solve = certified_solve(&limit_law, &a_op, &f)?;
    let st_tests = SpaceTimeTests::new(tests, time, rho);
    let dynamic = dynamic_report("orthogonal_dynamic", &setup.n_list, &solves, &limit_solve, &st_tests, &space, setup.tolerance)?;
    let norm_bound_holds = solves.iter().chain(std::iter::once(&limit_solve)).all(|(_, r)| r.within_norm_bound(1e-6));

    let z0 = Complex64::new(rho, 0.0);
    let prelimit_ops: Vec<SpatialOperator> = laws.iter().map(|(_, l)| l.eval_zm(z0)).collect::<Result<_>>()?;
    let f_closure = f_closure(&prelimit_ops, &limit_law.eval_zm(z0)?, rho, setup.f_tolerance)?;
    // sup_n sup_{Re z ≥ ρ} ‖1 + a_n/z‖ = 1 + ‖a‖∞/ρ; the laws are declared 1-accretive
    let growth = growth_report(&limit_law, 1.0 + family.sup / rho, 1.0, &zs)?;
    let consistency = consistency(&dynamic, std::slice::from_ref(&static_report), setup.consistency_tolerance);

    let c_space = SpaceGrid::new_2d(setup.length_x, setup.n_x, 1.0, setup.causality_n_y)?;
    let c_a = periodic_derivative(&c_space, Axis::X)?;
    let c_coeff = family.samples(&c_space, Axis::Y, setup.causality_n)?;
    let c_psi = orthogonal_source(&c_space);
    let causality = causality_study(
        || MaterialLaw::shifted_by_a_over_z(&c_coeff, 1.0),
        &c_a,
        |g| WeightedSignal::separable(g, rho, gaussian_time(t_center, setup.time_width), &c_psi),
        TimeGrid::new(setup.t_min, setup.t_max, setup.causality_n_samples)?,
        2,
        setup.causality_tolerance,
    )?;

    Ok(OrthogonalOutcome {
        moments,
        tail_estimate,
        tail_bound,
        constant_sanity,
        static_report,
        dynamic_report: dynamic,
        solve_reports: solves.into_iter().map(|s| s.1).collect(),
        limit_solve_report: limit_solve.1,
        norm_bound_holds,
        f_closure,
        growth,
        consistency,
        causality,
    })
}

/// A dense `b×b` block of `z + A_x`, exposed for tests of the limit law.
pub fn slice_operator(a_x: &SpatialOperator, z: Complex64) -> Option<DMatrix<Complex64>> {
    a_x.uniform_block().map(|(b, m)| m + DMatrix::<Complex64>::identity(b, b) * z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_constant_and_sine_profiles() {
        let c = periodic_moments(&CoefficientFamily::new(Profile::Constant { value: 2.5 }).unwrap(), 4).unwrap();
        for k in 1..=4 {
            assert_eq!(c.b_k(k), 2.5f64.powi(k as i32));
        }
        assert!((c.b_inv - 0.4).abs() < 1e-15);
        let s = periodic_moments(&CoefficientFamily::new(Profile::TwoPlusSine).unwrap(), 3).unwrap();
        assert!((s.b_k(1) - 2.0).abs() < 1e-14);
        assert!((s.b_k(2) - 4.5).abs() < 1e-14);
        // ∫(2+sin)³ = 8 + 3·2·½ = 11
        assert!((s.b_k(3) - 11.0).abs() < 1e-13);
        assert!((s.b_inv - 1.0 / 3f64.sqrt()).abs() < 1e-14);
        assert_eq!(s.kappa, 4.0);
    }

    #[test]
    fn moments_satisfy_jensen() {
        let profiles = [
            Profile::TwoPlusSine,
            Profile::Constant { value: 1.7 },
            Profile::CustomSamples { samples: vec![1.0, 4.0, 2.0, 0.5, 3.0] },
        ];
        for p in profiles {
            let m = periodic_moments(&CoefficientFamily::new(p).unwrap(), 2).unwrap();
            assert!(m.b_k(2) >= m.b_k(1).powi(2) - 1e-14);
            assert!(m.b_inv >= 1.0 / m.b_k(1) - 1e-14);
            assert!(m.b_inv >= 1.0 / m.sup - 1e-14 && m.b_inv <= 1.0 / m.alpha_c + 1e-14);
        }
    }

    #[test]
    fn family_rejects_bad_profiles_and_resolution() {
        assert!(CoefficientFamily::new(Profile::Constant { value: 0.0 }).is_err());
        assert!(CoefficientFamily::new(Profile::CustomSamples { samples: vec![] }).is_err());
        let fam = CoefficientFamily::new(Profile::TwoPlusSine).unwrap();
        let g = SpaceGrid::new_1d(1.0, 512).unwrap();
        assert!(fam.samples(&g, Axis::X, 64).is_ok());
        assert!(matches!(fam.samples(&g, Axis::X, 65), Err(Error::Resolution(_))));
        assert!(fam.samples(&g, Axis::Y, 4).is_err());
        let flat = CoefficientFamily::new(Profile::Constant { value: 1.0 }).unwrap();
        assert!(flat.samples(&g, Axis::X, 1000).is_ok());
    }

    #[test]
    fn test_set_layout() {
        let g = SpaceGrid::new_1d(1.0, 256).unwrap();
        let t = TestSet::standard(&g, 3);
        assert_eq!(t.len(), 24);
        assert_eq!(t.ids.iter().filter(|i| i.starts_with("gauss")).count(), 12);
        assert_eq!(t.ids.iter().filter(|i| i.starts_with("indicator")).count(), 4);
        for v in &t.vectors {
            assert!((g.norm(v) - 1.0).abs() < 1e-12);
        }
        let again = TestSet::standard(&g, 3);
        assert_eq!(t.vectors, again.vectors);
        assert_ne!(TestSet::standard(&g, 4).vectors[20], t.vectors[20]);
        let g2 = SpaceGrid::new_2d(1.0, 16, 1.0, 32).unwrap();
        assert_eq!(TestSet::standard(&g2, 1).vectors[0].len(), 512);
    }

    #[test]
    fn longitudinal_exact_constant_coefficient() {
        // a ≡ c on a long cell with ψ = 1_{[0,1]}: φ = (c/ρ)(1 − e^{−ρx/c}) on [0, 1]
        let (c, rho, len, n) = (2.0, 3.0, 8.0, 8192);
        let g = SpaceGrid::new_1d(len, n).unwrap();
        let psi = g.sample(|x, _| Complex64::new(if x < 1.0 { 1.0 } else { 0.0 }, 0.0));
        let phi = longitudinal_exact(&vec![c; n], g.h_x(), rho, &psi).unwrap();
        for i in (0..n).filter(|&i| g.x(i) <= 1.0 - g.h_x()) {
            let x = g.x(i);
            let expect = c / rho * (1.0 - (-rho * x / c).exp());
            // the jump at x = 0 is linearly interpolated over one cell (error ≲ h/2);
            // wrap-around from the previous period is e^{−ρ(L−1)/c}
            assert!((phi[i].re - expect).abs() < 0.6 * g.h_x() + 1e-4, "x = {x}: {} vs {expect}", phi[i].re);
        }
        let zero = longitudinal_exact(&vec![c; n], g.h_x(), rho, &vec![ZERO; n]).unwrap();
        assert!(zero.iter().all(|v| *v == ZERO));
    }

    #[test]
    fn longitudinal_exact_agrees_with_matrix_solve() {
        let rho = 4.0;
        let gaps: Vec<f64> = [512usize, 1024, 2048]
            .iter()
            .map(|&n| {
                let g = SpaceGrid::new_1d(1.0, n).unwrap();
                let a: Vec<f64> = (0..n).map(|i| 2.0 + (2.0 * PI * g.x(i)).sin()).collect();
                let psi = g.sample(|x, _| Complex64::new((-((x - 0.5) / 0.1).powi(2)).exp(), 0.0));
                let exact = longitudinal_exact(&a, g.h_x(), rho, &psi).unwrap();
                let c = SpatialOperator::diagonal(a.iter().map(|v| Complex64::new(rho / v, 0.0)).collect());
                let d = periodic_derivative(&g, Axis::X).unwrap();
                let phi = resolvent_solve(&c, &d, &psi, rho / 3.0).unwrap().phi;
                phi.iter().zip(&exact).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
            })
            .collect();
        assert!(gaps[1] < gaps[0] / 3.5 && gaps[2] < gaps[1] / 3.5, "{gaps:?}");
        assert!(gaps[2] < 1e-5, "{gaps:?}");
    }

    #[test]
    fn static_criterion_constant_and_alternating() {
        let g = SpaceGrid::new_1d(1.0, 64).unwrap();
        let d = periodic_derivative(&g, Axis::X).unwrap();
        let tests = TestSet::standard(&g, 1);
        let psi = g.sample(|x, _| Complex64::new((-((x - 0.5) / 0.1).powi(2)).exp(), 0.0));
        let rho = 2.0;
        let same: Vec<(usize, MaterialLaw)> = (1..=4).map(|n| (n, MaterialLaw::reciprocal_coefficient(&[2.0; 64], 1.0).unwrap())).collect();
        let limit = MaterialLaw::reciprocal_coefficient(&[2.0; 64], 1.0).unwrap();
        let r = static_criterion("same", &same, &d, rho, &psi, &g, &tests, Some(&limit), 1e-10).unwrap();
        assert!(r.verdict);
        assert!(r.defects.iter().all(|&x| x == 0.0));
        let alternating: Vec<(usize, MaterialLaw)> = (1..=6)
            .map(|n| {
                let v = if n % 2 == 0 { 1.0 } else { 3.0 };
                (n, MaterialLaw::reciprocal_coefficient(&[v; 64], rho / 3.0).unwrap())
            })
            .collect();
        let r = static_criterion("alternating", &alternating, &d, rho, &psi, &g, &tests, None, 1e-3).unwrap();
        assert!(!r.verdict);
        assert!(r.cauchy.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12 * w[0]));
        let greedy: Vec<(usize, MaterialLaw)> = vec![(1, MaterialLaw::reciprocal_coefficient(&[1.0; 64], 5.0).unwrap())];
        assert!(matches!(static_criterion("bad", &greedy, &d, rho, &psi, &g, &tests, None, 1.0), Err(Error::Contract { .. })));
    }

    #[test]
    fn report_csv_and_rate() {
        let r = GConvergenceReport::assemble(
            "t",
            vec![2, 4, 8],
            vec!["a".into()],
            vec![vec![Complex64::new(1.1, 0.0)], vec![Complex64::new(1.01, 0.0)], vec![Complex64::new(1.001, 0.0)]],
            Some(vec![ONE]),
            0.01,
        );
        assert!(r.verdict);
        assert!((r.rate.unwrap() + 10f64.ln() / 2f64.ln()).abs() < 1e-9);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "n,test_id,re,im,defect");
        assert_eq!(text.lines().count(), 4);
    }

    fn small_orthogonal(rho: f64, k: usize, l: usize, profile: Profile) -> (SpaceGrid, SpatialOperator, MomentTable, MaterialLaw) {
        let g = SpaceGrid::new_2d(1.0, 8, 1.0, 16).unwrap();
        let d = periodic_derivative(&g, Axis::X).unwrap();
        let m = periodic_moments(&CoefficientFamily::new(profile).unwrap(), k).unwrap();
        let law = neumann_limit_law(&m, &d, rho, k, l).unwrap();
        (g, d, m, law)
    }

    #[test]
    fn neumann_law_constant_profile_resums() {
        let c = 2.0;
        let (_, _, _, law) = small_orthogonal(13.0, 24, 24, Profile::Constant { value: c });
        for xi in [0.0, 1.0, -7.0, 300.0] {
            let z = Complex64::new(13.5, xi);
            let m = law.eval(z).unwrap();
            let expect = SpatialOperator::identity(m.dim()).scale(1.0 + c / z);
            let gap = m.add(&expect.scale(-ONE)).unwrap().operator_norm();
            assert!(gap <= law.tail_estimate().unwrap() + 1e-13, "xi = {xi}: {gap}");
        }
    }

    #[test]
    fn neumann_law_requires_strict_rho_bound() {
        let g = SpaceGrid::new_2d(1.0, 8, 1.0, 16).unwrap();
        let d = periodic_derivative(&g, Axis::X).unwrap();
        let m = periodic_moments(&CoefficientFamily::new(Profile::TwoPlusSine).unwrap(), 8).unwrap();
        let err = neumann_limit_law(&m, &d, 16.0, 6, 6).unwrap_err();
        assert!(err.to_string().contains("4*kappa"));
        assert!(neumann_limit_law(&m, &d, 17.0, 9, 6).is_err());
        let law = neumann_limit_law(&m, &d, 17.0, 6, 6).unwrap();
        assert!(law.eval(Complex64::new(15.0, 0.0)).is_err());
    }

    #[test]
    fn neumann_k_sensitivity_within_tail() {
        let (_, _, _, law6) = small_orthogonal(17.0, 6, 30, Profile::TwoPlusSine);
        let (_, _, _, law12) = small_orthogonal(17.0, 12, 30, Profile::TwoPlusSine);
        let tail6 = 0.25f64.powi(7) / 0.75;
        for xi in [0.0, 2.0, -40.0] {
            let z = Complex64::new(17.0, xi);
            let gap = law6.eval(z).unwrap().add(&law12.eval(z).unwrap().scale(-ONE)).unwrap().operator_norm();
            assert!(gap < tail6, "xi = {xi}: {gap}");
            assert!(gap <= law6.tail_estimate().unwrap());
        }
    }

    #[test]
    fn neumann_law_matches_direct_harmonic_mean() {
        // All operators commute; per Fourier mode of A_x with eigenvalue iλ the limit
        // solution operator is the cell mean of (w + a)⁻¹, w = z + iλ.
        let (g, d, _, law) = small_orthogonal(17.0, 40, 40, Profile::TwoPlusSine);
        let z = Complex64::new(17.5, 3.0);
        let nx = g.n_x;
        let h = g.h_x();
        let m = law.eval(z).unwrap();
        let block = slice_operator(&d, Complex64::new(0.0, 0.0)).unwrap();
        for k in 0..nx {
            let lam = (2.0 * PI * k as f64 / nx as f64).sin() / h;
            let v: Vec<Complex64> = (0..nx).map(|j| Complex64::from_polar(1.0 / (nx as f64).sqrt(), 2.0 * PI * (k * j) as f64 / nx as f64)).collect();
            let av = &block * nalgebra::DVector::from_vec(v.clone());
            assert!((av[1] - Complex64::new(0.0, lam) * v[1]).norm() < 1e-9);
            let w = z + Complex64::new(0.0, lam);
            let mean_res = cell_mean(|y| 0.0 + (1.0 / (w + Profile::TwoPlusSine.eval(y))).re).unwrap()
                + Complex64::new(0.0, cell_mean(|y| (1.0 / (w + Profile::TwoPlusSine.eval(y))).im).unwrap());
            // zM + iλ = 1/mean ⇒ M = (1/mean − iλ)/z
            let expect = (1.0 / mean_res - Complex64::new(0.0, lam)) / z;
            let mut full = vec![ZERO; m.dim()];
            full[..nx].copy_from_slice(&v);
            let mv = m.apply(&full);
            assert!((mv[1] - expect * v[1]).norm() < 1e-10, "k = {k}");
        }
    }

    #[test]
    fn neumann_tail_bound_holds() {
        let (_, d, m, _) = small_orthogonal(17.0, 20, 20, Profile::TwoPlusSine);
        let zs = line_samples(17.0, 500.0);
        let values: Vec<f64> = (0..16).map(|i| 2.0 + (2.0 * PI * i as f64 / 16.0).sin()).collect();
        let r = neumann_tail_bound(&d, &values, &m, &zs, 1e-9).unwrap();
        assert!(r.holds && r.max_partial_sum_norm < 0.25);
        assert!(neumann_tail_bound(&d, &values, &m, &[Complex64::new(15.0, 0.0)], 1e-9).is_err());
    }

    #[test]
    fn f_constants_and_closure() {
        let ops: Vec<SpatialOperator> = [1.0, 2.0, 3.0].iter().map(|&c| SpatialOperator::identity(3).scale(Complex64::new(c, 0.0))).collect();
        let (a, b) = family_f_constants(&ops).unwrap();
        assert_eq!(a, 1.0);
        assert!((b - 3.0).abs() < 1e-14);
        let mid = SpatialOperator::identity(3).scale(Complex64::new(1.5, 0.0));
        assert!(f_closure(&ops, &mid, 1.0, 1e-8).unwrap().member);
        let out = SpatialOperator::identity(3).scale(Complex64::new(0.5, 0.0));
        assert!(!f_closure(&ops, &out, 1.0, 1e-8).unwrap().member);
    }
}
