//! Convex relative-entropy functionals and their dissipation.
//!
//! For a trajectory `n(t)` with eigentriple `(λ, N, φ)`, write
//! `u(t, x) = n(t, x) e^{−λt} / N(x)`.  A convex profile `H` induces
//!
//! ```text
//! H[n](t) = ∫ φ(x) N(x) H(u(t, x)) dx + H∞ · Σ_a φ(y_a) w_a e^{−λt},
//! ```
//!
//! where `H∞ = lim H(s)/s` prices the singular (atom) part.  Along solutions
//! this functional dissipates at the fragmentation rate
//!
//! ```text
//! D(t) = ∫∫ φ(x) N(y) B(y) k(x, y) [H(u_y) − H(u_x) − H'(u_x)(u_y − u_x)] dx dy
//!      + Σ_a w_a e^{−λt} B(y_a) ∫ φ(x) k(x, y_a) [H∞ − H'(u_x)] dx ≥ 0,
//! ```
//!
//! the Bregman gap of `H` between parent and fragment saturation states.
//! The balance check certifies `dH/dt = −D` against the trajectory and flags
//! any non-monotone interval.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::{EigenTriple, Generator};
use crate::grid::{Grid, HybridMeasure};
use crate::dynamics::Trajectory;
use crate::{Error, Result};

/// How many density steps are run serially before switching to rayon.
const PARALLEL_THRESHOLD: usize = 128;

/// Absolute per-interval allowance in the monotonicity check.  A state that
/// starts at (or reaches) the stationary profile has entropy zero up to
/// roundoff, where a purely relative tolerance would flag noise-level
/// wiggles of order 1e-14 as violations.
const MONOTONE_ABS_FLOOR: f64 = 1e-12;

/// Convex profiles for the relative entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyFamily {
    /// `H(u) = (u − c)²`: strongly convex, but grows too fast to price atoms.
    Quadratic,
    /// `H(u) = sqrt(δ² + (u − c)²) − δ`: smooth with linear growth, so both
    /// densities and atoms are admissible.
    PseudoHuber,
    /// `H(u) = |u − c|`: the weighted total-variation metric; not
    /// differentiable, so it has no pointwise dissipation rate.
    Abs,
}

/// A concrete entropy: family, center `c`, and (for pseudo-Huber) the
/// smoothing scale `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySpec {
    pub family: EntropyFamily,
    pub center: f64,
    /// Smoothing scale; `None` except for [`EntropyFamily::PseudoHuber`].
    pub delta: Option<f64>,
}

impl EntropySpec {
    pub fn quadratic(center: f64) -> Self {
        EntropySpec {
            family: EntropyFamily::Quadratic,
            center,
            delta: None,
        }
    }

    pub fn pseudo_huber(center: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Entropy(format!(
                "pseudo-Huber smoothing scale must be positive, got {delta}"
            )));
        }
        Ok(EntropySpec {
            family: EntropyFamily::PseudoHuber,
            center,
            delta: Some(delta),
        })
    }

    pub fn abs(center: f64) -> Self {
        EntropySpec {
            family: EntropyFamily::Abs,
            center,
            delta: None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.family {
            EntropyFamily::Quadratic => "quadratic",
            EntropyFamily::PseudoHuber => "pseudo_huber",
            EntropyFamily::Abs => "abs",
        }
    }

    /// `H(u)`.
    pub fn value(&self, u: f64) -> f64 {
        let s = u - self.center;
        match self.family {
            EntropyFamily::Quadratic => s * s,
            EntropyFamily::PseudoHuber => {
                let d = self.delta.expect("pseudo-Huber carries delta");
                (d * d + s * s).sqrt() - d
            }
            EntropyFamily::Abs => s.abs(),
        }
    }

    /// `H'(u)`; undefined for the non-smooth family.
    pub fn derivative(&self, u: f64) -> Result<f64> {
        let s = u - self.center;
        match self.family {
            EntropyFamily::Quadratic => Ok(2.0 * s),
            EntropyFamily::PseudoHuber => {
                let d = self.delta.expect("pseudo-Huber carries delta");
                Ok(s / (d * d + s * s).sqrt())
            }
            EntropyFamily::Abs => Err(Error::Entropy(
                "the absolute-value entropy is not differentiable; \
                 it admits no pointwise dissipation rate"
                    .into(),
            )),
        }
    }

    /// Recession slope `H∞ = lim H(s)/s`, the per-unit price of singular
    /// mass; `None` when the profile grows superlinearly.
    pub fn recession(&self) -> Option<f64> {
        match self.family {
            EntropyFamily::Quadratic => None,
            EntropyFamily::PseudoHuber | EntropyFamily::Abs => Some(1.0),
        }
    }

    pub fn differentiable(&self) -> bool {
        self.family != EntropyFamily::Abs
    }

    /// Bregman gap `H(a) − H(b) − H'(b)(a − b) ≥ 0`.
    pub fn bregman(&self, a: f64, b: f64) -> Result<f64> {
        Ok(self.value(a) - self.value(b) - self.derivative(b)? * (a - b))
    }

    fn require_atoms_admissible(&self, state: &HybridMeasure) -> Result<()> {
        if !state.atoms.is_empty() && self.recession().is_none() {
            return Err(Error::Entropy(format!(
                "the {} entropy has no recession slope and cannot price point \
                 masses; use a linearly growing family for hybrid data",
                self.label()
            )));
        }
        Ok(())
    }
}

/// Relative entropy of a state at time `t` against the scaled profile.
pub fn relative_entropy(
    state: &HybridMeasure,
    triple: &EigenTriple,
    grid: &Grid,
    t: f64,
    spec: &EntropySpec,
) -> Result<f64> {
    spec.require_atoms_admissible(state)?;
    let scale = (-triple.lambda * t).exp();
    let dx = grid.dx();
    let mut acc = 0.0;
    for i in 0..grid.m {
        let u = state.densities[i] * scale / triple.n[i];
        acc += triple.phi[i] * triple.n[i] * spec.value(u) * dx;
    }
    if !state.atoms.is_empty() {
        let recession = spec.recession().expect("admissibility checked above");
        let phi = triple.phi_samples(grid)?;
        for atom in &state.atoms {
            acc += recession * phi.eval(atom.position) * atom.mass * scale;
        }
    }
    Ok(acc)
}

/// Entropy dissipation rate of a state at time `t`.
///
/// Density pairs contribute Bregman gaps weighted by the fragmentation
/// pathway `φ(x_i) N(y_j) B(y_j) K[i][j]`; each atom contributes the gap
/// between the recession slope and `H'` at its fragment destinations.
pub fn dissipation(
    state: &HybridMeasure,
    triple: &EigenTriple,
    gen: &Generator,
    t: f64,
    spec: &EntropySpec,
) -> Result<f64> {
    if !spec.differentiable() {
        // Surface the family-specific message.
        spec.derivative(spec.center)?;
    }
    spec.require_atoms_admissible(state)?;
    let grid = &gen.grid;
    let m = grid.m;
    let dx = grid.dx();
    let scale = (-triple.lambda * t).exp();

    let u: Vec<f64> = (0..m)
        .map(|i| state.densities[i] * scale / triple.n[i])
        .collect();
    let h: Vec<f64> = u.iter().map(|&v| spec.value(v)).collect();
    let hp: Vec<f64> = u
        .iter()
        .map(|&v| spec.derivative(v))
        .collect::<Result<_>>()?;
    let parent_weight: Vec<f64> = (0..m).map(|j| triple.n[j] * gen.b[j] * dx).collect();

    // Row sum for fragment cell i: Σ_{j ≥ i} K[i][j] N_j B_j breg(u_j; u_i).
    let row_sum = |i: usize| -> f64 {
        let row = gen.kernel_row(i);
        let (h_i, hp_i, u_i) = (h[i], hp[i], u[i]);
        let mut acc = 0.0;
        for j in i..m {
            let breg = h[j] - h_i - hp_i * (u[j] - u_i);
            acc += row[j] * parent_weight[j] * breg;
        }
        acc
    };
    let rows: Vec<f64> = if m >= PARALLEL_THRESHOLD {
        (0..m).into_par_iter().map(row_sum).collect()
    } else {
        (0..m).map(row_sum).collect()
    };
    let mut total = rows
        .iter()
        .enumerate()
        .map(|(i, r)| triple.phi[i] * r * dx)
        .sum::<f64>();

    if !state.atoms.is_empty() {
        let recession = spec.recession().expect("admissibility checked above");
        for atom in &state.atoms {
            let y = atom.position;
            let b_at = gen.coeffs.division.eval_at(y, grid)?;
            let col = gen.kernel.column(grid.cell_of(y));
            let mut gap = 0.0;
            for (i, k) in col.iter().enumerate() {
                gap += triple.phi[i] * k * (recession - hp[i]);
            }
            total += atom.mass * scale * b_at * gap * dx;
        }
    }
    Ok(total)
}

/// One row of the entropy balance along a trajectory.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BalanceRow {
    pub t: f64,
    pub h: f64,
    /// Dissipation rate; NaN for non-differentiable families.
    pub d: f64,
    /// `|ΔH/Δt + D_mid|` over the interval ending here (0 on the first row).
    pub defect: f64,
    /// Whether `H` failed to increase beyond tolerance over that interval.
    pub monotone_ok: bool,
}

/// Entropy balance of a whole trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceSeries {
    pub rows: Vec<BalanceRow>,
    pub h0: f64,
    /// Worst interval defect (NaN for non-differentiable families).
    pub max_defect: f64,
    pub monotone: bool,
}

/// Certify `dH/dt = −D` and monotone decay along a trajectory.
///
/// Requires snapshots dense enough to resolve the balance
/// (`output_every ≤ 10 dt`).  Each interval compares the entropy difference
/// quotient against the trapezoid of the dissipation; monotonicity is
/// enforced up to `mono_tol_per_step · H(0)` per underlying time step plus
/// an absolute roundoff floor per interval.  For the non-smooth family only
/// the entropy series and monotonicity are reported (the dissipation
/// columns stay NaN).
pub fn entropy_balance_check(
    traj: &Trajectory,
    triple: &EigenTriple,
    gen: &Generator,
    spec: &EntropySpec,
    mono_tol_per_step: f64,
) -> Result<BalanceSeries> {
    let cadence = traj.output_every();
    if traj.snapshots.len() < 2 {
        return Err(Error::Cadence(
            "balance check needs at least two snapshots".into(),
        ));
    }
    if cadence > 10.0 * traj.dt * (1.0 + 1e-9) {
        return Err(Error::Cadence(format!(
            "snapshots every {cadence:.6} are too sparse for a step of {:.6}; \
             need output_every <= 10 dt",
            traj.dt
        )));
    }
    let steps_per_interval = (cadence / traj.dt).round().max(1.0);

    let smooth = spec.differentiable();
    let mut h_series = Vec::with_capacity(traj.snapshots.len());
    let mut d_series = Vec::with_capacity(traj.snapshots.len());
    for (t, state) in &traj.snapshots {
        h_series.push(relative_entropy(state, triple, &traj.grid, *t, spec)?);
        d_series.push(if smooth {
            dissipation(state, triple, gen, *t, spec)?
        } else {
            f64::NAN
        });
    }
    let h0 = h_series[0];
    let tol = mono_tol_per_step * h0.abs() * steps_per_interval + MONOTONE_ABS_FLOOR;

    let mut rows = Vec::with_capacity(traj.snapshots.len());
    let mut max_defect: f64 = if smooth { 0.0 } else { f64::NAN };
    let mut monotone = true;
    for (k, (t, _)) in traj.snapshots.iter().enumerate() {
        let (defect, monotone_ok) = if k == 0 {
            (0.0, true)
        } else {
            let dt_k = t - traj.snapshots[k - 1].0;
            let rate = (h_series[k] - h_series[k - 1]) / dt_k;
            let defect = if smooth {
                (rate + 0.5 * (d_series[k] + d_series[k - 1])).abs()
            } else {
                f64::NAN
            };
            let ok = h_series[k] <= h_series[k - 1] + tol;
            (defect, ok)
        };
        if smooth {
            max_defect = max_defect.max(defect);
        }
        monotone &= monotone_ok;
        rows.push(BalanceRow {
            t: *t,
            h: h_series[k],
            d: d_series[k],
            defect,
            monotone_ok,
        });
    }
    Ok(BalanceSeries {
        rows,
        h0,
        max_defect,
        monotone,
    })
}

/// Time-integrated dissipation versus its a-priori budget.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DissipationBudget {
    /// Trapezoid of `D(t)` over the trajectory.
    pub integral: f64,
    /// The initial entropy `H(0)` — total dissipation can never exceed it.
    pub bound: f64,
}

/// Integrate the dissipation along a trajectory and report it against the
/// initial entropy, which bounds it from above for nonnegative `H`.
pub fn dissipation_budget(
    traj: &Trajectory,
    triple: &EigenTriple,
    gen: &Generator,
    spec: &EntropySpec,
) -> Result<DissipationBudget> {
    if !spec.differentiable() {
        spec.derivative(spec.center)?;
    }
    let mut integral = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for (t, state) in &traj.snapshots {
        let d = dissipation(state, triple, gen, *t, spec)?;
        if let Some((t0, d0)) = prev {
            integral += 0.5 * (t - t0) * (d0 + d);
        }
        prev = Some((*t, d));
    }
    let (t0, state0) = &traj.snapshots[0];
    let bound = relative_entropy(state0, triple, &traj.grid, *t0, spec)?;
    Ok(DissipationBudget { integral, bound })
}
