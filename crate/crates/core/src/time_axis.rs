//! Exponentially weighted signals on a truncated time axis.
//!
//! The real line is replaced by a uniform periodic grid `[t_min, t_max)`
//! with a power-of-two number of samples. A signal `f` lives in the weighted
//! space with norm `(∫ |f(s)|² e^{-2ρs} ds)^{1/2}`; the Fourier–Laplace
//! transform is computed as one FFT of the pre-weighted samples `e^{-ρs} f(s)`.
//!
//! Signals are stored time-major: sample `s` occupies `values[s*dim..(s+1)*dim]`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Uniform sampling of `[t_min, t_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_min: f64,
    t_max: f64,
    n_samples: usize,
}

impl TimeGrid {
    pub fn new(t_min: f64, t_max: f64, n_samples: usize) -> Result<Self> {
        if !(t_min.is_finite() && t_max.is_finite() && t_min < t_max) {
            return Err(contract("TimeGrid::new", format!("need t_min < t_max, got [{t_min}, {t_max}]")));
        }
        if n_samples < 4 || !n_samples.is_power_of_two() {
            return Err(contract(
                "TimeGrid::new",
                format!("n_samples must be a power of two >= 4, got {n_samples}"),
            ));
        }
        Ok(Self { t_min, t_max, n_samples })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn span(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn dt(&self) -> f64 {
        self.span() / self.n_samples as f64
    }

    pub fn time(&self, s: usize) -> f64 {
        self.t_min + s as f64 * self.dt()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples).map(|s| self.time(s)).collect()
    }

    /// Signed frequency index of FFT slot `k` (symmetric set `-n/2..n/2`).
    pub fn frequency_index(&self, k: usize) -> i64 {
        let n = self.n_samples as i64;
        let k = k as i64;
        if k < n / 2 {
            k
        } else {
            k - n
        }
    }

    /// Angular frequency `ξ_k = 2πk/(t_max - t_min)` of FFT slot `k`.
    pub fn frequency(&self, k: usize) -> f64 {
        2.0 * PI * self.frequency_index(k) as f64 / self.span()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_samples).map(|k| self.frequency(k)).collect()
    }

    pub fn frequency_spacing(&self) -> f64 {
        2.0 * PI / self.span()
    }

    pub fn nyquist(&self) -> f64 {
        PI / self.dt()
    }

    /// The middle half of the window, where experiment inputs must live.
    pub fn interior(&self) -> (f64, f64) {
        let q = 0.25 * self.span();
        (self.t_min + q, self.t_max - q)
    }

    /// Same window with twice the samples.
    pub fn refined(&self) -> Self {
        Self {
            n_samples: 2 * self.n_samples,
            ..*self
        }
    }

    /// Trapezoidal quadrature weight of sample `s`.
    pub fn trapezoid_weight(&self, s: usize) -> f64 {
        if s == 0 || s + 1 == self.n_samples {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }
}

/// A vector-valued signal sampled on a [`TimeGrid`], paired with its weight `ρ > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSignal {
    grid: TimeGrid,
    rho: f64,
    dim: usize,
    values: Vec<Complex64>,
}

fn check_rho(op: &'static str, rho: f64) -> Result<()> {
    if rho > 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(contract(op, format!("weight rho must be > 0, got {rho}")))
    }
}

impl WeightedSignal {
    pub fn zeros(grid: TimeGrid, rho: f64, dim: usize) -> Result<Self> {
        Self::from_values(grid, rho, dim, vec![Complex64::new(0.0, 0.0); grid.n_samples * dim])
    }

    pub fn from_values(grid: TimeGrid, rho: f64, dim: usize, values: Vec<Complex64>) -> Result<Self> {
        check_rho("WeightedSignal", rho)?;
        if dim == 0 {
            return Err(contract("WeightedSignal", "spatial dimension must be >= 1"));
        }
        if values.len() != grid.n_samples * dim {
            return Err(contract(
                "WeightedSignal",
                format!("expected {} values, got {}", grid.n_samples * dim, values.len()),
            ));
        }
        Ok(Self { grid, rho, dim, values })
    }

    /// Samples `f(t)` into a signal; `f` writes the `dim` components at time `t`.
    pub fn from_fn<F>(grid: TimeGrid, rho: f64, dim: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(f64, &mut [Complex64]),
    {
        let mut sig = Self::zeros(grid, rho, dim)?;
        for s in 0..grid.n_samples {
            let t = grid.time(s);
            f(t, &mut sig.values[s * dim..(s + 1) * dim]);
        }
        Ok(sig)
    }

    /// Scalar signal `g(t)` times a fixed spatial profile.
    pub fn separable(grid: TimeGrid, rho: f64, time: impl Fn(f64) -> Complex64, space: &[Complex64]) -> Result<Self> {
        Self::from_fn(grid, rho, space.len(), |t, out| {
            let g = time(t);
            for (o, &p) in out.iter_mut().zip(space) {
                *o = g * p;
            }
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn sample(&self, s: usize) -> &[Complex64] {
        &self.values[s * self.dim..(s + 1) * self.dim]
    }

    pub fn sample_mut(&mut self, s: usize) -> &mut [Complex64] {
        &mut self.values[s * self.dim..(s + 1) * self.dim]
    }

    /// The same samples regarded as an element of a different weighted space.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        check_rho("WeightedSignal::with_rho", rho)?;
        Ok(Self { rho, ..self.clone() })
    }

    fn check_compatible(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.grid != other.grid {
            return Err(contract(op, "time grids differ"));
        }
        if self.rho != other.rho {
            return Err(contract(op, format!("weights differ ({} vs {})", self.rho, other.rho)));
        }
        if self.dim != other.dim {
            return Err(contract(op, format!("dimensions differ ({} vs {})", self.dim, other.dim)));
        }
        Ok(())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: Complex64, other: &Self, b: Complex64) -> Result<Self> {
        self.check_compatible(other, "WeightedSignal::combine")?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Self { values, ..self.clone() })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.combine(Complex64::new(1.0, 0.0), other, Complex64::new(-1.0, 0.0))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            values: self.values.iter().map(|x| c * x).collect(),
            ..self.clone()
        }
    }

    pub fn weighted_norm(&self) -> f64 {
        weighted_norm_sq(self).sqrt()
    }

    /// Weighted-norm fraction carried before the interior window. For a causal
    /// response to an interior-supported input this mass is purely artifact
    /// (time wrap-around and band-limiting).
    pub fn boundary_leakage(&self) -> f64 {
        let total = weighted_norm_sq(self);
        if total == 0.0 {
            return 0.0;
        }
        let (start, _) = self.grid.interior();
        let early = truncate_before(self, start);
        (weighted_norm_sq(&early) / total).sqrt()
    }

    /// Largest modulus over all samples with `lo <= t <= hi`.
    pub fn max_abs_in(&self, lo: f64, hi: f64) -> f64 {
        (0..self.grid.n_samples)
            .filter(|&s| {
                let t = self.grid.time(s);
                t >= lo && t <= hi
            })
            .flat_map(|s| self.sample(s).iter().map(|v| v.norm()))
            .fold(0.0, f64::max)
    }

    /// Writes `t,re_0,im_0,...` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("t");
        for i in 0..self.dim {
            header.push_str(&format!(",re_{i},im_{i}"));
        }
        writeln!(w, "{header}")?;
        for s in 0..self.grid.n_samples {
            let mut row = format!("{:.16e}", self.grid.time(s));
            for v in self.sample(s) {
                row.push_str(&format!(",{:.16e},{:.16e}", v.re, v.im));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    /// Reads the format produced by [`write_csv`](Self::write_csv). The grid is
    /// recovered from the time column; the weight is not part of the file.
    pub fn read_csv<R: BufRead>(r: R, rho: f64) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty signal file".into()))??;
        let cols = header.split(',').count();
        if cols < 3 || (cols - 1) % 2 != 0 {
            return Err(Error::Parse(format!("bad signal header '{header}'")));
        }
        let dim = (cols - 1) / 2;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
            if fields.len() != cols {
                return Err(Error::Parse(format!("line {}: expected {cols} fields", lineno + 2)));
            }
            times.push(fields[0]);
            values.extend(fields[1..].chunks(2).map(|p| Complex64::new(p[0], p[1])));
        }
        if times.len() < 2 {
            return Err(Error::Parse("signal needs at least two samples".into()));
        }
        let dt = times[1] - times[0];
        let grid = TimeGrid::new(times[0], times[0] + dt * times.len() as f64, times.len())?;
        Self::from_values(grid, rho, dim, values)
    }
}

/// The Fourier–Laplace image of a [`WeightedSignal`], indexed by FFT slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    grid: TimeGrid,
    rho: f64,
    dim: usize,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn from_coeffs(grid: TimeGrid, rho: f64, dim: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        check_rho("Spectrum", rho)?;
        if dim == 0 || coeffs.len() != grid.n_samples * dim {
            return Err(contract("Spectrum", "coefficient count does not match grid and dimension"));
        }
        Ok(Self { grid, rho, dim, coeffs })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn slot(&self, k: usize) -> &[Complex64] {
        &self.coeffs[k * self.dim..(k + 1) * self.dim]
    }

    pub fn slot_mut(&mut self, k: usize) -> &mut [Complex64] {
        &mut self.coeffs[k * self.dim..(k + 1) * self.dim]
    }

    /// Point `z_k = iξ_k + ρ` of the vertical line associated with slot `k`.
    pub fn z(&self, k: usize) -> Complex64 {
        Complex64::new(self.rho, self.grid.frequency(k))
    }

    /// Plain `L₂(ℝ)` norm on the frequency side.
    pub fn norm(&self) -> f64 {
        let sum: f64 = self.coeffs.iter().map(|c| c.norm_sqr()).sum();
        (sum * self.grid.frequency_spacing()).sqrt()
    }

    /// Multiplies slot `k` by the scalar `m(z_k)`.
    pub fn map_scalar(&self, m: impl Fn(Complex64) -> Complex64) -> Self {
        let mut out = self.clone();
        for k in 0..self.grid.n_samples {
            let factor = m(self.z(k));
            for c in out.slot_mut(k) {
                *c *= factor;
            }
        }
        out
    }
}

fn weighted_norm_sq(f: &WeightedSignal) -> f64 {
    (0..f.grid.n_samples)
        .map(|s| {
            let t = f.grid.time(s);
            let w = f.grid.trapezoid_weight(s) * (-2.0 * f.rho * t).exp();
            w * f.sample(s).iter().map(|v| v.norm_sqr()).sum::<f64>()
        })
        .sum()
}

/// `Σ_s ⟨f(s), g(s)⟩ e^{-2ρs} w_s` with trapezoidal weights `w_s`; conjugate-linear in `f`.
pub fn weighted_inner(f: &WeightedSignal, g: &WeightedSignal) -> Result<Complex64> {
    f.check_compatible(g, "weighted_inner")?;
    let mut acc = Complex64::new(0.0, 0.0);
    for s in 0..f.grid.n_samples {
        let t = f.grid.time(s);
        let w = f.grid.trapezoid_weight(s) * (-2.0 * f.rho * t).exp();
        let dot: Complex64 = f.sample(s).iter().zip(g.sample(s)).map(|(a, b)| a.conj() * b).sum();
        acc += dot * w;
    }
    Ok(acc)
}

pub fn weighted_norm(f: &WeightedSignal) -> f64 {
    f.weighted_norm()
}

/// Runs `op` on every spatial component's time series (length `n`), in parallel.
fn per_component(values: &[Complex64], n: usize, dim: usize, op: impl Fn(&mut [Complex64]) + Sync) -> Vec<Complex64> {
    let mut columns = vec![Complex64::new(0.0, 0.0); n * dim];
    for s in 0..n {
        for i in 0..dim {
            columns[i * n + s] = values[s * dim + i];
        }
    }
    #[allow(clippy::redundant_closure)] // the closure is Send; `op` itself need not be
    columns.par_chunks_mut(n).for_each(|col| op(col));
    let mut out = vec![Complex64::new(0.0, 0.0); n * dim];
    for i in 0..dim {
        for s in 0..n {
            out[s * dim + i] = columns[i * n + s];
        }
    }
    out
}

/// `coeffs[k] = (2π)^{-1/2} Σ_s e^{-(iξ_k+ρ)t_s} f(t_s) dt`, via one FFT per component.
pub fn fourier_laplace(f: &WeightedSignal) -> Spectrum {
    let grid = f.grid;
    let n = grid.n_samples;
    let dim = f.dim;
    let dt = grid.dt();
    let weighted: Vec<Complex64> = (0..n)
        .flat_map(|s| {
            let w = (-f.rho * grid.time(s)).exp();
            f.sample(s).iter().map(move |v| v * w)
        })
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut coeffs = per_component(&weighted, n, dim, |col| fft.process(col));
    for k in 0..n {
        let phase = Complex64::from_polar(dt / SQRT_2PI, -grid.frequency(k) * grid.t_min);
        for c in &mut coeffs[k * dim..(k + 1) * dim] {
            *c *= phase;
        }
    }
    Spectrum {
        grid,
        rho: f.rho,
        dim,
        coeffs,
    }
}

pub fn inverse_fourier_laplace(spec: &Spectrum) -> WeightedSignal {
    let grid = spec.grid;
    let n = grid.n_samples;
    let dim = spec.dim;
    let dt = grid.dt();
    let mut unphased = spec.coeffs.clone();
    for k in 0..n {
        let phase = Complex64::from_polar(SQRT_2PI / (dt * n as f64), grid.frequency(k) * grid.t_min);
        for c in &mut unphased[k * dim..(k + 1) * dim] {
            *c *= phase;
        }
    }
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut values = per_component(&unphased, n, dim, |col| ifft.process(col));
    for s in 0..n {
        let w = (spec.rho * grid.time(s)).exp();
        for v in &mut values[s * dim..(s + 1) * dim] {
            *v *= w;
        }
    }
    WeightedSignal {
        grid,
        rho: spec.rho,
        dim,
        values,
    }
}

/// `∂t f`, computed as multiplication by `iξ + ρ` on the transform side.
pub fn time_derivative(f: &WeightedSignal) -> WeightedSignal {
    inverse_fourier_laplace(&fourier_laplace(f).map_scalar(|z| z))
}

/// `∂t⁻¹ f(t) = ∫_{-∞}^t f`, as a running trapezoid from the left edge of the
/// window. Sample `s` of the output reads only input samples `0..=s`.
pub fn antiderivative(f: &WeightedSignal) -> WeightedSignal {
    let dim = f.dim;
    let dt = f.grid.dt();
    let mut out = f.clone();
    let mut acc = vec![Complex64::new(0.0, 0.0); dim];
    out.sample_mut(0).fill(Complex64::new(0.0, 0.0));
    for s in 1..f.grid.n_samples {
        let (prev, cur) = (f.sample(s - 1), f.sample(s));
        for i in 0..dim {
            acc[i] += 0.5 * dt * (prev[i] + cur[i]);
        }
        out.sample_mut(s).copy_from_slice(&acc);
    }
    out
}

/// Spectral form of `∂t⁻¹`: division by `iξ + ρ`. Agrees with
/// [`antiderivative`] up to quadrature and wrap-around error.
pub fn antiderivative_spectral(f: &WeightedSignal) -> WeightedSignal {
    inverse_fourier_laplace(&fourier_laplace(f).map_scalar(|z| z.inv()))
}

/// `τ_m f(t) = f(t + m·dt)`: whole-sample shift, vacated samples set to zero.
pub fn shift_samples(f: &WeightedSignal, m: i64) -> WeightedSignal {
    let n = f.grid.n_samples as i64;
    let mut out = WeightedSignal {
        values: vec![Complex64::new(0.0, 0.0); f.values.len()],
        ..f.clone()
    };
    for s in 0..n {
        let src = s + m;
        if (0..n).contains(&src) {
            out.sample_mut(s as usize).copy_from_slice(f.sample(src as usize));
        }
    }
    out
}

/// `τ_h f(t) = f(t + h)`, with `h` snapped to the nearest multiple of `dt`.
pub fn time_shift(f: &WeightedSignal, h: f64) -> WeightedSignal {
    shift_samples(f, (h / f.grid.dt()).round() as i64)
}

/// `1_{(-∞, a]} f`.
pub fn truncate_before(f: &WeightedSignal, a: f64) -> WeightedSignal {
    let mut out = f.clone();
    for s in 0..f.grid.n_samples {
        if f.grid.time(s) > a {
            out.sample_mut(s).fill(Complex64::new(0.0, 0.0));
        }
    }
    out
}
