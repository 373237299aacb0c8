//! The solution operator of `(∂t M(∂t) + A) u = f`, applied one frequency at a
//! time, and measurements of its structural properties.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::material_law::{certify_on_grid, LawCertificate, MaterialLaw};
use crate::space_ops::{resolvent_solve, SpatialOperator};
use crate::time_axis::{fourier_laplace, inverse_fourier_laplace, time_shift, truncate_before, Spectrum, WeightedSignal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub rho: f64,
    pub n_samples: usize,
    pub dim: usize,
    /// Largest per-frequency relative residual.
    pub residual: f64,
    /// `‖u‖_ρ / ‖f‖_ρ`.
    pub norm_ratio: f64,
    pub alpha_used: f64,
    /// Filled in by [`check_causality`]; `None` when not measured.
    pub causality_defect: Option<f64>,
    pub boundary_leakage: f64,
}

impl SolveReport {
    /// `‖u‖_ρ ≤ ‖f‖_ρ/α` up to the relative slack `tol`.
    pub fn within_norm_bound(&self, tol: f64) -> bool {
        self.norm_ratio <= (1.0 / self.alpha_used) * (1.0 + tol)
    }
}

fn check_inputs(law: &MaterialLaw, cert: &LawCertificate, a: &SpatialOperator, f: &WeightedSignal) -> Result<()> {
    if !(f.rho() > law.nu()) {
        return Err(contract("solve", format!("rho = {} must exceed the abscissa nu = {}", f.rho(), law.nu())));
    }
    if !a.is_skew_adjoint() {
        return Err(contract("solve", "A must be skew-adjoint"));
    }
    if a.dim() != law.dim() || f.dim() != law.dim() {
        return Err(contract("solve", "law, operator and signal dimensions differ"));
    }
    if !cert.covers(law, f.rho(), f.grid()) {
        return Err(contract(
            "solve",
            format!("no accretivity certificate for law '{}' on the line Re z = {} covering the grid", law.name(), f.rho()),
        ));
    }
    Ok(())
}

/// `u = S f` with `û(ξ_k) = (z_k M(z_k) + A)⁻¹ f̂(ξ_k)`, `z_k = iξ_k + ρ`.
///
/// Refuses to run unless `cert` certifies `law` on the line `Re z = f.rho()`
/// up to the grid's Nyquist frequency.
pub fn solve(law: &MaterialLaw, cert: &LawCertificate, a: &SpatialOperator, f: &WeightedSignal) -> Result<(WeightedSignal, SolveReport)> {
    check_inputs(law, cert, a, f)?;
    let spec = fourier_laplace(f);
    let n = f.grid().n_samples();
    let alpha = law.alpha();
    let slots: Vec<(Vec<Complex64>, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let z = spec.z(k);
            let at = |e: Error| Error::Frequency { xi: z.im, source: Box::new(e) };
            let zm = law.eval_zm(z).map_err(at)?;
            let sol = resolvent_solve(&zm, a, spec.slot(k), alpha).map_err(at)?;
            Ok((sol.phi, sol.relative_residual))
        })
        .collect::<Result<_>>()?;
    let residual = slots.iter().map(|s| s.1).fold(0.0, f64::max);
    let coeffs: Vec<Complex64> = slots.into_iter().flat_map(|s| s.0).collect();
    let u = inverse_fourier_laplace(&Spectrum::from_coeffs(*f.grid(), f.rho(), f.dim(), coeffs)?);
    let f_norm = f.weighted_norm();
    let report = SolveReport {
        rho: f.rho(),
        n_samples: n,
        dim: f.dim(),
        residual,
        norm_ratio: if f_norm > 0.0 { u.weighted_norm() / f_norm } else { 0.0 },
        alpha_used: alpha,
        causality_defect: None,
        boundary_leakage: u.boundary_leakage(),
    };
    Ok((u, report))
}

/// Certifies `law` on exactly the frequencies of `f`'s grid, then solves.
pub fn certify_and_solve(law: &MaterialLaw, a: &SpatialOperator, f: &WeightedSignal) -> Result<(WeightedSignal, SolveReport, LawCertificate)> {
    let cert = certify_on_grid(law, f.grid(), f.rho())?;
    if !cert.accretive {
        return Err(contract(
            "certify_and_solve",
            format!("law '{}' is not {}-accretive on Re z = {} (worst margin {:.3e})", law.name(), law.alpha(), f.rho(), cert.worst_margin),
        ));
    }
    let (u, report) = solve(law, &cert, a, f)?;
    Ok((u, report, cert))
}

/// `‖1_{(−∞,a]}(S f − S 1_{(−∞,a]} f)‖_ρ / ‖f‖_ρ`.
pub fn check_causality(law: &MaterialLaw, cert: &LawCertificate, a: &SpatialOperator, f: &WeightedSignal, a_cut: f64) -> Result<f64> {
    let (lo, hi) = (f.grid().t_min(), f.grid().t_max());
    if !(a_cut > lo && a_cut < hi) {
        return Err(contract("check_causality", format!("cut {a_cut} outside the window ({lo}, {hi})")));
    }
    let (u_full, _) = solve(law, cert, a, f)?;
    let (u_cut, _) = solve(law, cert, a, &truncate_before(f, a_cut))?;
    let gap = truncate_before(&u_full.sub(&u_cut)?, a_cut);
    let scale = f.weighted_norm();
    Ok(if scale > 0.0 { gap.weighted_norm() / scale } else { 0.0 })
}

/// `‖τ_h S f − S τ_h f‖_ρ / (e^{ρh} ‖f‖_ρ)`; `h` snaps to the grid.
pub fn check_autonomy(law: &MaterialLaw, cert: &LawCertificate, a: &SpatialOperator, f: &WeightedSignal, h: f64) -> Result<f64> {
    let (u, _) = solve(law, cert, a, f)?;
    let (u_shifted_input, _) = solve(law, cert, a, &time_shift(f, h))?;
    let gap = time_shift(&u, h).sub(&u_shifted_input)?;
    let h_snapped = (h / f.grid().dt()).round() * f.grid().dt();
    let scale = (f.rho() * h_snapped).exp() * f.weighted_norm();
    Ok(if scale > 0.0 { gap.weighted_norm() / scale } else { 0.0 })
}

/// Solves at two weights and returns the largest pointwise gap on the interior
/// of the window, relative to the largest interior value of the first solution.
pub fn check_rho_consistency(
    law: &MaterialLaw,
    certs: (&LawCertificate, &LawCertificate),
    a: &SpatialOperator,
    f: &WeightedSignal,
    rho1: f64,
    rho2: f64,
) -> Result<f64> {
    for rho in [rho1, rho2] {
        if !(rho > law.nu()) {
            return Err(contract("check_rho_consistency", format!("rho = {rho} must exceed nu = {}", law.nu())));
        }
    }
    let (u1, _) = solve(law, certs.0, a, &f.with_rho(rho1)?)?;
    let (u2, _) = solve(law, certs.1, a, &f.with_rho(rho2)?)?;
    let (lo, hi) = f.grid().interior();
    let scale = u1.max_abs_in(lo, hi);
    let gap = u1.with_rho(rho2)?.sub(&u2)?.max_abs_in(lo, hi);
    Ok(if scale > 0.0 { gap / scale } else { gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material_law::apply_material_law;
    use crate::space_ops::{multiplication_operator_real, periodic_derivative, Axis, SpaceGrid};
    use crate::time_axis::{weighted_inner, TimeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn bump_signal(grid: TimeGrid, rho: f64, space: &[Complex64], center: f64, width: f64) -> WeightedSignal {
        WeightedSignal::separable(grid, rho, |t| Complex64::new((-((t - center) / width).powi(2)).exp(), 0.0), space).unwrap()
    }

    fn gaussian_space(g: &SpaceGrid, c: f64, w: f64) -> Vec<Complex64> {
        g.sample(|x, _| Complex64::new((-((x - c) / w).powi(2)).exp(), 0.0))
    }

    #[test]
    fn scalar_law_reproduces_inverse_z() {
        let grid = TimeGrid::new(-8.0, 8.0, 1024).unwrap();
        let f = bump_signal(grid, 1.0, &[Complex64::new(1.0, 0.0), Complex64::new(0.0, 2.0)], 0.0, 0.5);
        let id = MaterialLaw::constant(SpatialOperator::identity(2), 1.0).unwrap();
        let (u, report, _) = certify_and_solve(&id, &SpatialOperator::zero(2), &f).unwrap();
        let expect = apply_material_law(&MaterialLaw::inverse_z(2).unwrap(), &f).unwrap();
        assert!(u.sub(&expect).unwrap().weighted_norm() < 1e-12 * expect.weighted_norm());
        assert!(report.residual < 1e-14);
        assert!(report.within_norm_bound(1e-6));
    }

    #[test]
    fn solve_requires_a_matching_certificate() {
        let grid = TimeGrid::new(-4.0, 4.0, 64).unwrap();
        let f = bump_signal(grid, 1.0, &[Complex64::new(1.0, 0.0)], 0.0, 0.5);
        let law = MaterialLaw::constant(SpatialOperator::identity(1), 1.0).unwrap();
        let other = MaterialLaw::constant(SpatialOperator::identity(1), 1.0).unwrap();
        let cert_other = certify_on_grid(&other, &grid, 1.0).unwrap();
        assert!(matches!(solve(&law, &cert_other, &SpatialOperator::zero(1), &f), Err(Error::Contract { .. })));
        let cert_wrong_line = certify_on_grid(&law, &grid, 2.0).unwrap();
        assert!(solve(&law, &cert_wrong_line, &SpatialOperator::zero(1), &f).is_err());
        // a certificate whose verdict failed does not license the solve
        let greedy = MaterialLaw::constant(SpatialOperator::identity(1), 1.5).unwrap();
        let failed = certify_on_grid(&greedy, &grid, 1.0).unwrap();
        assert!(!failed.accretive);
        assert!(solve(&greedy, &failed, &SpatialOperator::zero(1), &f).is_err());
        assert!(certify_and_solve(&greedy, &SpatialOperator::zero(1), &f).is_err());
        // non-skew A
        let cert = certify_on_grid(&law, &grid, 1.0).unwrap();
        assert!(solve(&law, &cert, &SpatialOperator::identity(1), &f).is_err());
    }

    #[test]
    fn static_slice_matches_resolvent() {
        let sg = SpaceGrid::new_1d(1.0, 64).unwrap();
        let a: Vec<f64> = (0..64).map(|i| 2.0 + (2.0 * PI * sg.x(i)).sin()).collect();
        let rho = 3.0;
        let law = MaterialLaw::reciprocal_coefficient(&a, rho / 3.0).unwrap();
        let d = periodic_derivative(&sg, Axis::X).unwrap();
        let grid = TimeGrid::new(-4.0, 4.0, 64).unwrap();
        let psi = gaussian_space(&sg, 0.5, 0.1);
        let f = bump_signal(grid, rho, &psi, 0.0, 0.6);
        let cert = certify_on_grid(&law, &grid, rho).unwrap();
        let (u, _) = solve(&law, &cert, &d, &f).unwrap();
        let u_hat = fourier_laplace(&u);
        let f_hat = fourier_laplace(&f);
        let c = multiplication_operator_real(&a.iter().map(|v| rho / v).collect::<Vec<_>>());
        let expect = resolvent_solve(&c, &d, f_hat.slot(0), rho / 3.0).unwrap().phi;
        for (x, y) in u_hat.slot(0).iter().zip(&expect) {
            assert!((x - y).norm() < 1e-10 * (1.0 + y.norm()));
        }
    }

    #[test]
    fn norm_bound_on_random_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let sg = SpaceGrid::new_1d(1.0, 32).unwrap();
        let d = periodic_derivative(&sg, Axis::X).unwrap();
        let grid = TimeGrid::new(-4.0, 4.0, 128).unwrap();
        for case in 0..50 {
            let rho = rng.gen_range(0.5..4.0);
            let a: Vec<f64> = (0..32).map(|_| rng.gen_range(0.5..3.0)).collect();
            let law = match case % 3 {
                0 => MaterialLaw::reciprocal_coefficient(&a, rho / 3.0).unwrap(),
                1 => MaterialLaw::shifted_by_a_over_z(&a, rho).unwrap(),
                _ => MaterialLaw::constant(SpatialOperator::identity(32), rho).unwrap(),
            };
            let space: Vec<Complex64> = (0..32).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let f = bump_signal(grid, rho, &space, rng.gen_range(-1.0..1.0), rng.gen_range(0.2..0.8));
            let (_, report, _) = certify_and_solve(&law, &d, &f).unwrap();
            assert!(report.within_norm_bound(1e-6), "case {case}: {report:?}");
            assert!(report.residual <= 1e-10);
        }
    }

    #[test]
    fn solve_is_linear() {
        let sg = SpaceGrid::new_1d(1.0, 16).unwrap();
        let d = periodic_derivative(&sg, Axis::X).unwrap();
        let grid = TimeGrid::new(-4.0, 4.0, 64).unwrap();
        let a: Vec<f64> = (0..16).map(|i| 2.0 + (2.0 * PI * sg.x(i)).cos()).collect();
        let law = MaterialLaw::shifted_by_a_over_z(&a, 1.0).unwrap();
        let cert = certify_on_grid(&law, &grid, 1.0).unwrap();
        let f = bump_signal(grid, 1.0, &gaussian_space(&sg, 0.5, 0.1), 0.0, 0.5);
        let g = bump_signal(grid, 1.0, &gaussian_space(&sg, 0.3, 0.2), 0.4, 0.3);
        let (p, q) = (Complex64::new(0.3, -1.0), Complex64::new(2.0, 0.5));
        let (uf, _) = solve(&law, &cert, &d, &f).unwrap();
        let (ug, _) = solve(&law, &cert, &d, &g).unwrap();
        let (uc, _) = solve(&law, &cert, &d, &f.combine(p, &g, q).unwrap()).unwrap();
        let gap = uc.sub(&uf.combine(p, &ug, q).unwrap()).unwrap();
        assert!(gap.weighted_norm() <= 1e-9 * uc.weighted_norm());
    }

    #[test]
    // The time window must be long enough that wrap-around, of order
    // e^{−ρ(t_max − support)}, stays below the tolerance.
    fn causality_trivial_cases() {
        let grid = TimeGrid::new(-8.0, 8.0, 1024).unwrap();
        let law = MaterialLaw::constant(SpatialOperator::identity(1), 1.0).unwrap();
        let cert = certify_on_grid(&law, &grid, 3.0).unwrap();
        let z = SpatialOperator::zero(1);
        let one = [Complex64::new(1.0, 0.0)];
        let before = bump_signal(grid, 3.0, &one, -1.0, 0.15);
        assert!(check_causality(&law, &cert, &z, &before, 1.0).unwrap() < 1e-12);
        let after = bump_signal(grid, 3.0, &one, 1.0, 0.15);
        let d = check_causality(&law, &cert, &z, &after, -0.5).unwrap();
        assert!(d < 1e-6, "{d}");
        assert!(check_causality(&law, &cert, &z, &after, 10.0).is_err());
    }

    #[test]
    fn causality_improves_with_refinement() {
        let sg = SpaceGrid::new_1d(1.0, 64).unwrap();
        let d = periodic_derivative(&sg, Axis::X).unwrap();
        let a: Vec<f64> = (0..64).map(|i| 2.0 + (2.0 * PI * 4.0 * sg.x(i)).sin()).collect();
        let rho = 10.0;
        let law = MaterialLaw::reciprocal_coefficient(&a, rho / 3.0).unwrap();
        let psi = gaussian_space(&sg, 0.5, 0.1);
        let defects: Vec<f64> = [256usize, 512, 1024]
            .iter()
            .map(|&n| {
                let grid = TimeGrid::new(-2.0, 2.0, n).unwrap();
                let f = bump_signal(grid, rho, &psi, 0.0, 0.4);
                let cert = certify_on_grid(&law, &grid, rho).unwrap();
                check_causality(&law, &cert, &d, &f, 0.0).unwrap()
            })
            .collect();
        assert!(defects[1] < defects[0] && defects[2] < defects[1], "{defects:?}");
        assert!(defects[2] < 1e-5, "{defects:?}");
    }

    #[test]
    fn autonomy() {
        let sg = SpaceGrid::new_1d(1.0, 16).unwrap();
        let d = periodic_derivative(&sg, Axis::X).unwrap();
        let a: Vec<f64> = (0..16).map(|i| 2.0 + (2.0 * PI * sg.x(i)).sin()).collect();
        let law = MaterialLaw::shifted_by_a_over_z(&a, 1.0).unwrap();
        let grid = TimeGrid::new(-8.0, 8.0, 1024).unwrap();
        let cert = certify_on_grid(&law, &grid, 1.0).unwrap();
        let f = bump_signal(grid, 1.0, &gaussian_space(&sg, 0.5, 0.15), 0.0, 0.5);
        assert_eq!(check_autonomy(&law, &cert, &d, &f, 0.0).unwrap(), 0.0);
        assert!(check_autonomy(&law, &cert, &d, &f, grid.dt()).unwrap() < 1e-8);
        assert!(check_autonomy(&law, &cert, &d, &f, 0.5).unwrap() < 1e-6);
    }

    #[test]
    fn rho_consistency_scalar() {
        let grid = TimeGrid::new(-16.0, 16.0, 4096).unwrap();
        let law = MaterialLaw::constant(SpatialOperator::identity(1), 1.0).unwrap();
        let f = bump_signal(grid, 1.0, &[Complex64::new(1.0, 0.0)], -2.0, 0.8);
        let c1 = certify_on_grid(&law, &grid, 1.0).unwrap();
        let c2 = certify_on_grid(&law, &grid, 1.5).unwrap();
        let gap = check_rho_consistency(&law, (&c1, &c2), &SpatialOperator::zero(1), &f, 1.0, 1.5).unwrap();
        assert!(gap < 1e-8, "{gap}");
        let below = MaterialLaw::custom("above-two", 1, 2.0, 1.0, |_| Ok(SpatialOperator::identity(1))).unwrap();
        assert!(check_rho_consistency(&below, (&c1, &c2), &SpatialOperator::zero(1), &f, 1.0, 3.0).is_err());
    }

    #[test]
    fn parallel_schedule_does_not_change_result() {
        let sg = SpaceGrid::new_1d(1.0, 32).unwrap();
        let d = periodic_derivative(&sg, Axis::X).unwrap();
        let a: Vec<f64> = (0..32).map(|i| 2.0 + (2.0 * PI * sg.x(i)).sin()).collect();
        let law = MaterialLaw::reciprocal_coefficient(&a, 1.0).unwrap();
        let grid = TimeGrid::new(-2.0, 2.0, 128).unwrap();
        let f = bump_signal(grid, 3.0, &gaussian_space(&sg, 0.5, 0.1), 0.0, 0.3);
        let cert = certify_on_grid(&law, &grid, 3.0).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| solve(&law, &cert, &d, &f).unwrap())
        };
        let (u1, r1) = run(1);
        let (u4, r4) = run(4);
        assert_eq!(u1, u4);
        assert_eq!(r1, r4);
        let _ = weighted_inner(&u1, &u4).unwrap();
    }
}
