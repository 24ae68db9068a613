//! Dominant eigentriplet (λ, N, φ) of the growth-fragmentation operator.
//!
//! The discrete generator is
//!
//! ```text
//! (A n)_i = −(g_i n_i − g_{i−1} n_{i−1})/Δx − B_i n_i + Σ_j K[i][j] B_j n_j Δx
//! ```
//!
//! with zero inflow at the left boundary and outflow at `x_max`.  Rather than
//! iterating `I + τA`, the solver runs power iteration directly on the
//! positivity-preserving one-step operator `P(dt)` used by the time stepper
//! (upwind transport, then exponential loss plus fragmentation gain) and
//! reads off `λ = log(μ)/dt` from its dominant eigenvalue `μ`.  Because the
//! stepper and the eigensolver share the exact same operator, the conserved
//! quantity `⟨n(t), φ⟩ e^{−λt}` and the entropy monotonicity certified by the
//! entropy module hold to roundoff along discrete trajectories, not merely up
//! to discretization error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{discretize_kernel, validate_assumptions, CoefficientSet, KernelMatrix};
use crate::grid::{Grid, PhiSamples};
use crate::{Error, Result};

/// Below this size the gain products run serially; above, rows are computed
/// in parallel.  Either path produces bitwise-identical results because each
/// output entry is an independent left-to-right sum.
const PARALLEL_THRESHOLD: usize = 128;

/// Tolerance used when checking structural assumptions at build time.
const BUILD_VALIDATION_TOL: f64 = 1e-8;

/// Discrete growth-fragmentation operator on a fixed grid: sampled
/// coefficients plus the moment-corrected kernel, with both generator and
/// one-step (semigroup) actions.
#[derive(Debug, Clone)]
pub struct Generator {
    pub grid: Grid,
    pub coeffs: CoefficientSet,
    /// Growth rate at cell centres.
    pub g: Vec<f64>,
    /// Division rate at cell centres.
    pub b: Vec<f64>,
    /// Moment-corrected kernel (column view: fragments per parent cell).
    pub kernel: KernelMatrix,
    /// Row view of the kernel for cache-friendly gain products.
    rows: Vec<Vec<f64>>,
}

/// Validate coefficients and assemble the discrete operator.
///
/// Coefficient sets failing the structural checks are rejected unless
/// `allow_non_conforming` waives the failures.
pub fn build_generator(coeffs: &CoefficientSet, grid: &Grid) -> Result<Generator> {
    let report = validate_assumptions(coeffs, grid, BUILD_VALIDATION_TOL)?;
    if !report.admissible() {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(Error::NonConforming(failed.join(", ")));
    }
    let g = coeffs.growth.sample(grid)?;
    let b = coeffs.division.sample(grid)?;
    let kernel = discretize_kernel(coeffs, grid)?;
    let rows = (0..grid.m)
        .map(|i| (0..grid.m).map(|j| kernel.value(i, j)).collect())
        .collect();
    Ok(Generator {
        grid: *grid,
        coeffs: coeffs.clone(),
        g,
        b,
        kernel,
        rows,
    })
}

impl Generator {
    /// Row `i` of the kernel matrix (fragment size `x_i` against every
    /// parent column), for cache-friendly double sums.
    pub(crate) fn kernel_row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// Largest stable step scaled by `cfl`: the upwind transport bound
    /// `Δx / max g` and the reaction accuracy bound `1 / (3 max B)`.
    pub fn cfl_limit(&self, cfl: f64) -> f64 {
        let g_max = self.g.iter().cloned().fold(0.0f64, f64::max);
        let b_max = self.b.iter().cloned().fold(0.0f64, f64::max);
        let transport = if g_max > 0.0 {
            self.grid.dx() / g_max
        } else {
            f64::INFINITY
        };
        let reaction = if b_max > 0.0 {
            1.0 / (3.0 * b_max)
        } else {
            f64::INFINITY
        };
        cfl * transport.min(reaction)
    }

    /// Reject steps beyond the hard stability bound.
    pub fn check_dt(&self, dt: f64) -> Result<()> {
        let limit = self.cfl_limit(1.0);
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, limit });
        }
        Ok(())
    }

    /// Upwind transport step `(I + dt T) n` with zero inflow at `x = 0`.
    pub(crate) fn transport_step(&self, n: &[f64], dt: f64) -> Vec<f64> {
        let m = self.grid.m;
        let r = dt / self.grid.dx();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let inflow = if i > 0 { self.g[i - 1] * n[i - 1] } else { 0.0 };
            out.push(n[i] * (1.0 - r * self.g[i]) + r * inflow);
        }
        out
    }

    /// Reaction step `E n + dt G n`: exponential survival `e^{−B_i dt}` plus
    /// fragmentation gain fed by the pre-loss density.  Feeding the gain with
    /// the pre-loss density makes the per-step number growth factor
    /// `e^{−B dt} + 2 B dt = e^{B dt} + O(dt³)`, which is what keeps
    /// long-horizon population counts accurate to second order.
    pub(crate) fn reaction_step(&self, n: &[f64], dt: f64) -> Vec<f64> {
        let m = self.grid.m;
        let dx = self.grid.dx();
        let weights: Vec<f64> = (0..m).map(|j| dt * self.b[j] * dx * n[j]).collect();
        let body = |i: usize| {
            let row = &self.rows[i];
            let mut acc = (-self.b[i] * dt).exp() * n[i];
            for j in i..m {
                acc += row[j] * weights[j];
            }
            acc
        };
        if m >= PARALLEL_THRESHOLD {
            (0..m).into_par_iter().map(body).collect()
        } else {
            (0..m).map(body).collect()
        }
    }

    /// One step of the split scheme on a density vector:
    /// transport, then reaction.  Non-negativity is preserved for any
    /// `dt ≤ Δx / max g`.
    pub fn apply_step(&self, n: &[f64], dt: f64) -> Vec<f64> {
        let transported = self.transport_step(n, dt);
        self.reaction_step(&transported, dt)
    }

    /// Exact transpose of [`Generator::apply_step`]: reaction transpose, then
    /// transport transpose.
    pub fn apply_step_transpose(&self, phi: &[f64], dt: f64) -> Vec<f64> {
        let m = self.grid.m;
        let dx = self.grid.dx();
        let body = |j: usize| {
            let col = self.kernel.column(j);
            let mut acc = 0.0;
            for i in 0..=j {
                acc += col[i] * phi[i];
            }
            (-self.b[j] * dt).exp() * phi[j] + dt * self.b[j] * dx * acc
        };
        let v: Vec<f64> = if m >= PARALLEL_THRESHOLD {
            (0..m).into_par_iter().map(body).collect()
        } else {
            (0..m).map(body).collect()
        };
        let r = dt / dx;
        let mut out = Vec::with_capacity(m);
        for j in 0..m {
            let next = if j + 1 < m { v[j + 1] } else { 0.0 };
            out.push(v[j] + r * self.g[j] * (next - v[j]));
        }
        out
    }

    /// Dense generator matrix `A` (for diagnostics and balance tests).
    pub fn dense_matrix(&self) -> Vec<Vec<f64>> {
        let m = self.grid.m;
        let dx = self.grid.dx();
        let mut a = vec![vec![0.0; m]; m];
        for i in 0..m {
            a[i][i] -= self.g[i] / dx + self.b[i];
            if i > 0 {
                a[i][i - 1] += self.g[i - 1] / dx;
            }
            for j in i..m {
                a[i][j] += self.kernel.value(i, j) * self.b[j] * dx;
            }
        }
        a
    }

    /// Generator action `A n` (reference implementation for tests).
    pub fn apply_generator(&self, n: &[f64]) -> Vec<f64> {
        let m = self.grid.m;
        let dx = self.grid.dx();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let inflow = if i > 0 { self.g[i - 1] * n[i - 1] } else { 0.0 };
            let mut acc = -(self.g[i] * n[i] - inflow) / dx - self.b[i] * n[i];
            let row = &self.rows[i];
            for j in i..m {
                acc += row[j] * self.b[j] * dx * n[j];
            }
            out.push(acc);
        }
        out
    }
}

/// Options for the eigensolver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Convergence tolerance for both the eigenvalue increment and the
    /// rate-scaled residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Iteration step; `None` uses half the stability limit.  Time-marching
    /// code passes its own step here so that the triple is an exact fixed
    /// point of the trajectory's one-step operator.
    pub dt: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 200_000,
            dt: None,
        }
    }
}

/// Converged primal pair (λ, N) plus certificates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimalSolution {
    pub lambda: f64,
    pub n: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub dt: f64,
}

/// The dominant eigentriplet with residual certificates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenTriple {
    pub lambda: f64,
    /// Stationary profile, `Σ N_i Δx = 1`.
    pub n: Vec<f64>,
    /// Dual weight, `Σ φ_i N_i Δx = 1`.
    pub phi: Vec<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Step of the one-step operator the triple is a fixed point of.
    pub dt: f64,
}

impl EigenTriple {
    /// Dual weight as an interpolating sample set (for atom positions).
    pub fn phi_samples(&self, grid: &Grid) -> Result<PhiSamples> {
        PhiSamples::new(grid, self.phi.clone())
    }

    /// One-step growth factor `μ = e^{λ dt}`.
    pub fn growth_factor(&self) -> f64 {
        (self.lambda * self.dt).exp()
    }
}

fn resolve_dt(gen: &Generator, opts: &SolveOptions) -> Result<f64> {
    let dt = opts.dt.unwrap_or_else(|| gen.cfl_limit(0.5));
    gen.check_dt(dt)?;
    Ok(dt)
}

fn assert_nonnegative(v: &[f64], what: &str) -> Result<()> {
    if let Some((i, bad)) = v
        .iter()
        .enumerate()
        .find(|(_, x)| !x.is_finite() || **x < -1e-14)
    {
        return Err(Error::Positivity(format!(
            "{what} produced {bad} in cell {i}"
        )));
    }
    Ok(())
}

/// Power iteration for the dominant (λ, N).
///
/// Each sweep applies the one-step operator, reads the growth factor `μ` off
/// the L¹ functional, renormalizes to `Σ N_i Δx = 1` and estimates
/// `λ = log(μ)/dt`.  Convergence requires both a settled eigenvalue and a
/// small rate-scaled residual `‖P v − μ v‖₁ / (μ dt ‖v‖₁)`.
pub fn solve_primal(gen: &Generator, opts: &SolveOptions) -> Result<PrimalSolution> {
    let init = vec![1.0 / gen.grid.x_max; gen.grid.m];
    solve_primal_from(gen, opts, &init)
}

/// As [`solve_primal`] but starting from a caller-supplied positive iterate.
pub fn solve_primal_from(gen: &Generator, opts: &SolveOptions, init: &[f64]) -> Result<PrimalSolution> {
    let dt = resolve_dt(gen, opts)?;
    let dx = gen.grid.dx();
    let mass = |v: &[f64]| v.iter().sum::<f64>() * dx;

    let m0 = mass(init);
    if !(m0 > 0.0) {
        return Err(Error::Domain(
            "primal iteration needs an initial vector with positive mass".into(),
        ));
    }
    let mut v: Vec<f64> = init.iter().map(|x| x / m0).collect();
    let mut lambda_prev = f64::NAN;
    let mut residual = f64::INFINITY;

    for iter in 1..=opts.max_iter {
        let w = gen.apply_step(&v, dt);
        assert_nonnegative(&w, "primal step")?;
        let mu = mass(&w);
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Positivity(format!(
                "primal growth factor degenerated to {mu}"
            )));
        }
        let lambda = mu.ln() / dt;
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi / mu - vi).abs())
            .sum::<f64>()
            * dx
            / dt;
        let settled = (lambda - lambda_prev).abs() < opts.tol && residual < opts.tol;
        lambda_prev = lambda;
        // Renormalize: v ← P v / μ keeps Σ v Δx = 1 up to roundoff.
        let s = 1.0 / mu;
        v = w.into_iter().map(|x| x * s).collect();
        if settled {
            let total = mass(&v);
            v.iter_mut().for_each(|x| *x /= total);
            if let Some((i, _)) = v.iter().enumerate().find(|(_, x)| **x <= 0.0) {
                return Err(Error::Positivity(format!(
                    "stationary profile vanished in cell {i}"
                )));
            }
            return Ok(PrimalSolution {
                lambda,
                n: v,
                residual,
                iterations: iter,
                dt,
            });
        }
    }
    Err(Error::NoConvergence {
        residual,
        iterations: opts.max_iter,
    })
}

/// Power iteration on the transpose operator for the dual weight φ.
///
/// The residual is measured in the N-weighted L¹ norm and the dual
/// eigenvalue must match the primal one within `10 × tol`.
pub fn solve_dual(gen: &Generator, primal: &PrimalSolution, opts: &SolveOptions) -> Result<Vec<f64>> {
    let dt = primal.dt;
    gen.check_dt(dt)?;
    let dx = gen.grid.dx();
    let weighted = |v: &[f64]| {
        v.iter()
            .zip(&primal.n)
            .map(|(vi, ni)| vi * ni)
            .sum::<f64>()
            * dx
    };

    let mut phi = vec![1.0; gen.grid.m];
    let mut lambda_prev = f64::NAN;
    let mut residual = f64::INFINITY;

    for _ in 1..=opts.max_iter {
        let w = gen.apply_step_transpose(&phi, dt);
        assert_nonnegative(&w, "dual step")?;
        let mu = weighted(&w) / weighted(&phi);
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Positivity(format!(
                "dual growth factor degenerated to {mu}"
            )));
        }
        let lambda = mu.ln() / dt;
        residual = w
            .iter()
            .zip(&phi)
            .zip(&primal.n)
            .map(|((wi, pi), ni)| (wi / mu - pi).abs() * ni)
            .sum::<f64>()
            * dx
            / dt;
        let settled = (lambda - lambda_prev).abs() < opts.tol && residual < opts.tol;
        lambda_prev = lambda;
        let s = 1.0 / weighted(&w);
        phi = w.into_iter().map(|x| x * s).collect();
        if settled {
            if lambda.is_finite() && (lambda - primal.lambda).abs() > 10.0 * opts.tol {
                return Err(Error::EigenMismatch {
                    primal: primal.lambda,
                    dual: lambda,
                });
            }
            if let Some((j, _)) = phi.iter().enumerate().find(|(_, x)| **x <= 0.0) {
                return Err(Error::Positivity(format!(
                    "dual weight vanished in cell {j}"
                )));
            }
            return Ok(phi);
        }
    }
    Err(Error::NoConvergence {
        residual,
        iterations: opts.max_iter,
    })
}

/// Solve both eigenproblems and assemble the certified triple.
pub fn solve_triple(gen: &Generator, opts: &SolveOptions) -> Result<EigenTriple> {
    let primal = solve_primal(gen, opts)?;
    let phi = solve_dual(gen, &primal, opts)?;
    // Recompute the dual residual for the report.
    let dx = gen.grid.dx();
    let w = gen.apply_step_transpose(&phi, primal.dt);
    let mu = (primal.lambda * primal.dt).exp();
    let dual_residual = w
        .iter()
        .zip(&phi)
        .zip(&primal.n)
        .map(|((wi, pi), ni)| (wi / mu - pi).abs() * ni)
        .sum::<f64>()
        * dx
        / primal.dt;
    Ok(EigenTriple {
        lambda: primal.lambda,
        n: primal.n,
        phi,
        primal_residual: primal.residual,
        dual_residual,
        iterations: primal.iterations,
        dt: primal.dt,
    })
}

/// Integral identities satisfied by the converged triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityReport {
    /// `|λ − Σ B_i N_i Δx|`: growth rate versus mean division rate.
    pub number_defect: f64,
    /// `|λ Σ x_i N_i Δx − Σ g_i N_i Δx|`: mean-size balance.
    pub mass_defect: f64,
    /// `Σ x_i N_i Δx`.
    pub mean_size: f64,
    /// `Σ B_i N_i Δx`.
    pub division_mean: f64,
    /// `Σ g_i N_i Δx`.
    pub growth_mean: f64,
}

/// Check the integral identities `λ = ∫B N` and `λ ∫x N = ∫g N` implied by
/// integrating the stationary equation against 1 and against x.
pub fn eigen_identities(triple: &EigenTriple, gen: &Generator) -> IdentityReport {
    let dx = gen.grid.dx();
    let division_mean: f64 = triple
        .n
        .iter()
        .zip(&gen.b)
        .map(|(ni, bi)| ni * bi)
        .sum::<f64>()
        * dx;
    let growth_mean: f64 = triple
        .n
        .iter()
        .zip(&gen.g)
        .map(|(ni, gi)| ni * gi)
        .sum::<f64>()
        * dx;
    let mean_size: f64 = triple
        .n
        .iter()
        .enumerate()
        .map(|(i, ni)| gen.grid.center(i) * ni)
        .sum::<f64>()
        * dx;
    IdentityReport {
        number_defect: (triple.lambda - division_mean).abs(),
        mass_defect: (triple.lambda * mean_size - growth_mean).abs(),
        mean_size,
        division_mean,
        growth_mean,
    }
}
