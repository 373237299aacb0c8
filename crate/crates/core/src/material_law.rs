//! Material laws `z ↦ M(z)`, their realisation `M(∂t)` on weighted signals, and
//! sampled certification of accretivity and the `F(α, β)` classes.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg::{self, CMat};
use crate::space_ops::SpatialOperator;
use crate::time_axis::{fourier_laplace, inverse_fourier_laplace, Spectrum, TimeGrid, WeightedSignal};

static NEXT_LAW_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_LAW_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    Constant,
    ReciprocalCoefficient,
    ShiftedByAOverZ,
    NeumannLimit,
    Custom,
}

pub type LawFn = dyn Fn(Complex64) -> Result<SpatialOperator> + Send + Sync;

/// An evaluable material law with declared abscissa `ν` and accretivity constant `α`.
#[derive(Clone)]
pub struct MaterialLaw {
    id: u64,
    name: String,
    kind: LawKind,
    dim: usize,
    nu: f64,
    alpha: f64,
    eval: Arc<LawFn>,
    tail_estimate: Option<f64>,
}

impl fmt::Debug for MaterialLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaterialLaw")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .field("nu", &self.nu)
            .field("alpha", &self.alpha)
            .finish()
    }
}

fn real_diag(samples: impl Iterator<Item = f64>) -> Vec<Complex64> {
    samples.map(|v| Complex64::new(v, 0.0)).collect()
}

impl MaterialLaw {
    pub fn new(name: impl Into<String>, kind: LawKind, dim: usize, nu: f64, alpha: f64, eval: Arc<LawFn>) -> Result<Self> {
        if dim == 0 {
            return Err(contract("MaterialLaw", "dimension must be positive"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(contract("MaterialLaw", format!("alpha must be > 0, got {alpha}")));
        }
        if !nu.is_finite() {
            return Err(contract("MaterialLaw", "nu must be finite"));
        }
        Ok(Self {
            id: next_id(),
            name: name.into(),
            kind,
            dim,
            nu,
            alpha,
            eval,
            tail_estimate: None,
        })
    }

    /// `M(z) = C` for every `z`.
    pub fn constant(op: SpatialOperator, alpha: f64) -> Result<Self> {
        let dim = op.dim();
        Self::new("constant", LawKind::Constant, dim, 0.0, alpha, Arc::new(move |_| Ok(op.clone())))
    }

    /// `M(z) = a⁻¹` (pointwise reciprocal of positive samples).
    pub fn reciprocal_coefficient(a: &[f64], alpha: f64) -> Result<Self> {
        if a.iter().any(|&v| !(v > 0.0)) {
            return Err(contract("reciprocal_coefficient", "coefficient samples must be positive"));
        }
        let op = SpatialOperator::diagonal(real_diag(a.iter().map(|v| 1.0 / v)));
        let mut law = Self::constant(op, alpha)?;
        law.kind = LawKind::ReciprocalCoefficient;
        law.name = "reciprocal_coefficient".into();
        Ok(law)
    }

    /// `M(z) = 1 + a/z`.
    pub fn shifted_by_a_over_z(a: &[f64], alpha: f64) -> Result<Self> {
        let a = real_diag(a.iter().copied());
        Self::new(
            "shifted_by_a_over_z",
            LawKind::ShiftedByAOverZ,
            a.len(),
            0.0,
            alpha,
            Arc::new(move |z: Complex64| {
                if z.re <= 0.0 {
                    return Err(Error::LawEval {
                        re: z.re,
                        im: z.im,
                        msg: "1 + a/z requires Re z > 0".into(),
                    });
                }
                let zi = z.inv();
                Ok(SpatialOperator::diagonal(a.iter().map(|v| 1.0 + v * zi).collect()))
            }),
        )
    }

    /// `M(z) = z⁻¹`, so that `zM(z) = I` and `M(∂t) = ∂t⁻¹`.
    pub fn inverse_z(dim: usize) -> Result<Self> {
        Self::new(
            "inverse_z",
            LawKind::Custom,
            dim,
            0.0,
            1.0,
            Arc::new(move |z: Complex64| {
                if z.re <= 0.0 {
                    return Err(Error::LawEval {
                        re: z.re,
                        im: z.im,
                        msg: "1/z requires Re z > 0".into(),
                    });
                }
                Ok(SpatialOperator::identity(dim).scale(z.inv()))
            }),
        )
    }

    pub fn custom(name: impl Into<String>, dim: usize, nu: f64, alpha: f64, eval: impl Fn(Complex64) -> Result<SpatialOperator> + Send + Sync + 'static) -> Result<Self> {
        Self::new(name, LawKind::Custom, dim, nu, alpha, Arc::new(eval))
    }

    pub fn with_tail_estimate(mut self, tail: f64) -> Self {
        self.tail_estimate = Some(tail);
        self
    }

    /// Same law with a different declared `α`; gets a fresh identity.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut law = Self::new(self.name.clone(), self.kind, self.dim, self.nu, alpha, self.eval.clone())?;
        law.tail_estimate = self.tail_estimate;
        Ok(law)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LawKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tail_estimate(&self) -> Option<f64> {
        self.tail_estimate
    }

    pub fn eval(&self, z: Complex64) -> Result<SpatialOperator> {
        if z.re <= self.nu {
            return Err(Error::LawEval {
                re: z.re,
                im: z.im,
                msg: format!("outside the half-plane Re z > {}", self.nu),
            });
        }
        let m = (self.eval)(z)?;
        if m.dim() != self.dim {
            return Err(Error::LawEval {
                re: z.re,
                im: z.im,
                msg: format!("law returned dimension {}, expected {}", m.dim(), self.dim),
            });
        }
        Ok(m)
    }

    /// `z·M(z)`.
    pub fn eval_zm(&self, z: Complex64) -> Result<SpatialOperator> {
        Ok(self.eval(z)?.scale(z))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateSample {
    pub rho: f64,
    pub xi: f64,
    /// `λ_min(Herm(zM(z)))`.
    pub lambda_min: f64,
    pub norm_zm: f64,
}

/// Sampled evidence for the accretivity condition `Re⟨φ, zM(z)φ⟩ ≥ α‖φ‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawCertificate {
    pub law_id: u64,
    pub law_name: String,
    pub kind: LawKind,
    pub nu: f64,
    pub alpha: f64,
    pub rho_lines: Vec<f64>,
    pub samples: Vec<CertificateSample>,
    /// Relative tolerance: a sample passes if `λ_min ≥ α − tol·‖zM(z)‖`.
    pub tolerance: f64,
    pub worst_margin: f64,
    pub worst_sample: Option<CertificateSample>,
    pub accretive: bool,
    pub f_beta: Option<f64>,
    pub f_membership: Option<bool>,
    pub growth_beta: Option<f64>,
    pub growth_class: Option<bool>,
}

pub const CERT_REL_TOL: f64 = 1e-9;

impl LawCertificate {
    /// Whether this certificate licenses solving `law` on the line `Re z = rho`
    /// up to the frequencies of `grid`.
    pub fn covers(&self, law: &MaterialLaw, rho: f64, grid: &TimeGrid) -> bool {
        let on_line = |s: &&CertificateSample| (s.rho - rho).abs() <= 1e-12 * rho.abs().max(1.0);
        let reach = self.samples.iter().filter(on_line).map(|s| s.xi.abs()).fold(0.0, f64::max);
        self.law_id == law.id() && self.accretive && reach >= grid.nyquist() * (1.0 - 1e-12)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Symmetric log-spaced frequencies in `[xi_max·1e-3, xi_max]`, plus `ξ = 0`.
pub fn sample_frequencies(n_freq: usize, xi_max: f64) -> Vec<f64> {
    let half = (n_freq.max(1) - 1) / 2;
    let lo = (xi_max * 1e-3).ln();
    let hi = xi_max.ln();
    let mut out = vec![0.0];
    for i in 0..half {
        let t = if half == 1 { 1.0 } else { i as f64 / (half - 1) as f64 };
        let xi = (lo + t * (hi - lo)).exp();
        out.push(-xi);
        out.push(xi);
    }
    out.sort_by(|a, b| a.total_cmp(b));
    out
}

fn certify_points(law: &MaterialLaw, rho_lines: &[f64], points: Vec<(f64, f64)>) -> Result<LawCertificate> {
    for &rho in rho_lines {
        if !(rho > law.nu()) {
            return Err(contract("certify_accretivity", format!("line rho = {rho} does not exceed nu = {}", law.nu())));
        }
    }
    let samples: Vec<CertificateSample> = points
        .par_iter()
        .map(|&(rho, xi)| {
            let z = Complex64::new(rho, xi);
            let zm = law.eval_zm(z)?;
            let (lambda_min, _) = zm.hermitian_min();
            Ok(CertificateSample {
                rho,
                xi,
                lambda_min,
                norm_zm: zm.operator_norm(),
            })
        })
        .collect::<Result<_>>()?;
    let mut worst_margin = f64::INFINITY;
    let mut worst_sample = None;
    for s in &samples {
        let margin = s.lambda_min - law.alpha() + CERT_REL_TOL * s.norm_zm;
        if margin < worst_margin {
            worst_margin = margin;
            worst_sample = Some(s.clone());
        }
    }
    Ok(LawCertificate {
        law_id: law.id(),
        law_name: law.name().to_string(),
        kind: law.kind(),
        nu: law.nu(),
        alpha: law.alpha(),
        rho_lines: rho_lines.to_vec(),
        accretive: worst_margin >= 0.0,
        samples,
        tolerance: CERT_REL_TOL,
        worst_margin,
        worst_sample,
        f_beta: None,
        f_membership: None,
        growth_beta: None,
        growth_class: None,
    })
}

/// Samples `λ_min(Herm(zM(z)))` at `n_freq` points on each line `Re z = ρ`.
pub fn certify_accretivity(law: &MaterialLaw, rho_lines: &[f64], n_freq: usize, xi_max: f64) -> Result<LawCertificate> {
    if rho_lines.is_empty() {
        return Err(contract("certify_accretivity", "no lines to sample"));
    }
    if !(xi_max > 0.0) {
        return Err(contract("certify_accretivity", "xi_max must be positive"));
    }
    let freqs = sample_frequencies(n_freq, xi_max);
    let points = rho_lines.iter().flat_map(|&r| freqs.iter().map(move |&x| (r, x))).collect();
    certify_points(law, rho_lines, points)
}

/// Certifies exactly the frequencies a solve on `grid` at weight `rho` uses.
pub fn certify_on_grid(law: &MaterialLaw, grid: &TimeGrid, rho: f64) -> Result<LawCertificate> {
    let mut freqs = grid.frequencies();
    freqs.sort_by(|a, b| a.total_cmp(b));
    certify_points(law, &[rho], freqs.into_iter().map(|x| (rho, x)).collect())
}

/// Outcome of an `F(α, β)` membership check.
#[derive(Clone, Debug)]
pub struct FMembership {
    pub member: bool,
    /// `λ_min(Herm C − αI)`.
    pub accretivity_margin: f64,
    /// `λ_min(Herm C − C*C/β)`.
    pub boundedness_margin: f64,
    /// Eigenvector of the violated condition, when membership fails.
    pub witness: Option<Vec<Complex64>>,
}

fn f_margins(c: &SpatialOperator, alpha: f64, beta: f64) -> ((f64, Vec<Complex64>), (f64, Vec<Complex64>)) {
    let acc = c.block_eigen(|m: &CMat| {
        let (v, w) = linalg::min_eigenpair(&linalg::hermitian_part(m));
        (v - alpha, w)
    });
    let bnd = c.block_eigen(|m: &CMat| {
        let h = linalg::hermitian_part(m) - m.adjoint() * m * Complex64::new(1.0 / beta, 0.0);
        linalg::min_eigenpair(&linalg::hermitian_part(&h))
    });
    (acc, bnd)
}

/// `C ∈ F(α, β)`: `Re⟨φ,Cφ⟩ ≥ α‖φ‖²` and `‖Cφ‖² ≤ β Re⟨φ,Cφ⟩`, checked through
/// the smallest eigenvalues of the two Hermitian forms.
pub fn check_f_membership(c: &SpatialOperator, alpha: f64, beta: f64, tol: f64) -> Result<FMembership> {
    if !(0.0 < alpha && alpha < beta) {
        return Err(contract("check_f_membership", format!("need 0 < alpha < beta, got alpha = {alpha}, beta = {beta}")));
    }
    let ((acc, w_acc), (bnd, w_bnd)) = f_margins(c, alpha, beta);
    let witness = if acc < -tol {
        Some(w_acc)
    } else if bnd < -tol {
        Some(w_bnd)
    } else {
        None
    };
    Ok(FMembership {
        member: witness.is_none(),
        accretivity_margin: acc,
        boundedness_margin: bnd,
        witness,
    })
}

/// Whether `zM(z) ∈ F(α, β|z|)` at every sample `z`. Requires `β·ν ≥ α`.
pub fn check_growth_class(law: &MaterialLaw, nu: f64, alpha: f64, beta: f64, zs: &[Complex64], tol: f64) -> Result<bool> {
    if !(alpha > 0.0 && beta > 0.0 && beta * nu >= alpha) {
        return Err(contract(
            "check_growth_class",
            format!("incompatible constants: need beta*nu >= alpha > 0, got beta = {beta}, nu = {nu}, alpha = {alpha}"),
        ));
    }
    for &z in zs {
        let zm = law.eval_zm(z)?;
        let b = beta * z.norm();
        let ((acc, _), (bnd, _)) = f_margins(&zm, alpha, b);
        let scale = tol * (1.0 + zm.operator_norm());
        if acc < -scale || bnd < -scale {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Certificate extended by `F(α, β)` membership of `zM(z)` at every sample.
pub fn certify_with_f_class(law: &MaterialLaw, rho_lines: &[f64], n_freq: usize, xi_max: f64, beta: f64) -> Result<LawCertificate> {
    let mut cert = certify_accretivity(law, rho_lines, n_freq, xi_max)?;
    let mut ok = true;
    for s in &cert.samples {
        let zm = law.eval_zm(Complex64::new(s.rho, s.xi))?;
        ok &= check_f_membership(&zm, law.alpha(), beta, CERT_REL_TOL * (1.0 + s.norm_zm))?.member;
    }
    cert.f_beta = Some(beta);
    cert.f_membership = Some(ok);
    Ok(cert)
}

fn map_spectrum(law: &MaterialLaw, spec: &Spectrum, op: impl Fn(&SpatialOperator, &[Complex64]) -> Vec<Complex64> + Sync) -> Result<Spectrum> {
    let n = spec.grid().n_samples();
    let slots: Vec<Vec<Complex64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let z = spec.z(k);
            let m = law.eval(z).map_err(|e| Error::Frequency { xi: z.im, source: Box::new(e) })?;
            Ok(op(&m, spec.slot(k)))
        })
        .collect::<Result<_>>()?;
    Spectrum::from_coeffs(*spec.grid(), spec.rho(), spec.dim(), slots.concat())
}

/// `M(∂t) f`: multiplies the transform of `f` by `M(iξ_k + ρ)` slot by slot.
pub fn apply_material_law(law: &MaterialLaw, f: &WeightedSignal) -> Result<WeightedSignal> {
    if !(f.rho() > law.nu()) {
        return Err(contract("apply_material_law", format!("rho = {} must exceed nu = {}", f.rho(), law.nu())));
    }
    if f.dim() != law.dim() {
        return Err(contract("apply_material_law", "signal and law dimensions differ"));
    }
    let spec = map_spectrum(law, &fourier_laplace(f), |m, v| m.apply(v))?;
    Ok(inverse_fourier_laplace(&spec))
}

/// `‖M(z)‖ ≤ (sup_bound²/α)|z| + tol` at every sample.
pub fn linear_growth_bound_check(law: &MaterialLaw, sup_bound: f64, alpha: f64, zs: &[Complex64], tol: f64) -> Result<bool> {
    if !(alpha > 0.0) {
        return Err(contract("linear_growth_bound_check", "alpha must be positive"));
    }
    for &z in zs {
        if law.eval(z)?.operator_norm() > sup_bound * sup_bound / alpha * z.norm() + tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Largest `‖M(z)‖` over the samples.
pub fn sup_norm(law: &MaterialLaw, zs: &[Complex64]) -> Result<f64> {
    zs.iter().try_fold(0.0f64, |acc, &z| Ok(acc.max(law.eval(z)?.operator_norm())))
}

/// Cauchy–Riemann surrogate: the max-entry gap between the real-direction and
/// imaginary-direction centered difference quotients of `M` at `z`.
pub fn holomorphy_defect(law: &MaterialLaw, z: Complex64, h: f64) -> Result<f64> {
    let hr = Complex64::new(h, 0.0);
    let hi = Complex64::new(0.0, h);
    let d_real = law.eval(z + hr)?.add(&law.eval(z - hr)?.scale(-Complex64::new(1.0, 0.0)))?.scale((2.0 * hr).inv());
    let d_imag = law.eval(z + hi)?.add(&law.eval(z - hi)?.scale(-Complex64::new(1.0, 0.0)))?.scale((2.0 * hi).inv());
    Ok(d_real.add(&d_imag.scale(Complex64::new(-1.0, 0.0)))?.max_abs_entry())
}
