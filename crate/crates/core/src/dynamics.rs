//! Time integration of hybrid density/atom states.
//!
//! One step applies, in order: upwind transport of the density (zero inflow
//! at the origin, outflow at `x_max`), exponential division loss combined
//! with the fragmentation gain, then the atoms — positions advance along the
//! characteristics `ẏ = g(y)` by a fourth-order Runge–Kutta step, each atom
//! deposits its fragmentation output `dt · K[·][j(y)] B(y) w` into the
//! density and its mass decays by `e^{−B(y) dt}`.  Atoms below the absorb
//! threshold are converted into density; atoms leaving the domain are
//! dropped as boundary outflux.
//!
//! The density part of the step is exactly the operator the eigensolver
//! diagonalizes, so trajectories inherit its conservation and entropy-decay
//! structure to roundoff.

use serde::{Deserialize, Serialize};

use crate::eigen::{EigenTriple, Generator};
use crate::grid::{Atom, Grid, HybridMeasure, PhiSamples};
use crate::{Error, Result};

/// Time-stepping configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Fraction of the stability limit used as the step, in `(0, 1]`.
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    /// Snapshot cadence; must divide `t_end`.
    #[serde(default = "default_output_every")]
    pub output_every: f64,
    /// Atoms lighter than this fraction of the initial total variation are
    /// absorbed into the density.
    #[serde(default = "default_atom_absorb_threshold")]
    pub atom_absorb_threshold: f64,
    /// Abort when the weighted mass fraction beyond `0.9 x_max` exceeds this.
    #[serde(default = "default_boundary_mass_limit")]
    pub boundary_mass_limit: f64,
}

fn default_cfl() -> f64 {
    0.5
}
fn default_t_end() -> f64 {
    10.0
}
fn default_output_every() -> f64 {
    0.1
}
fn default_atom_absorb_threshold() -> f64 {
    1e-12
}
fn default_boundary_mass_limit() -> f64 {
    1e-6
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            cfl: default_cfl(),
            t_end: default_t_end(),
            output_every: default_output_every(),
            atom_absorb_threshold: default_atom_absorb_threshold(),
            boundary_mass_limit: default_boundary_mass_limit(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::Domain(format!(
                "cfl must lie in (0, 1], got {}",
                self.cfl
            )));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(Error::Domain(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        if !(self.output_every > 0.0) || self.output_every > self.t_end * (1.0 + 1e-9) {
            return Err(Error::Domain(format!(
                "output_every must lie in (0, t_end], got {}",
                self.output_every
            )));
        }
        let blocks = self.t_end / self.output_every;
        if (blocks - blocks.round()).abs() > 1e-9 * blocks.max(1.0) {
            return Err(Error::Cadence(format!(
                "t_end = {} is not an integer multiple of output_every = {}",
                self.t_end, self.output_every
            )));
        }
        if !(self.atom_absorb_threshold >= 0.0) || !(self.boundary_mass_limit >= 0.0) {
            return Err(Error::Domain(
                "atom_absorb_threshold and boundary_mass_limit must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Discrete time layout of a run: the step divides the snapshot cadence,
/// which divides the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub dt: f64,
    pub steps_per_output: usize,
    pub blocks: usize,
}

/// Choose the largest step at or below the CFL-scaled stability limit that
/// divides the output cadence exactly.  Using this step for the eigensolver
/// as well makes the triple an exact fixed point of the trajectory operator.
pub fn step_plan(gen: &Generator, config: &SolverConfig) -> Result<StepPlan> {
    config.validate()?;
    let dt_raw = gen.cfl_limit(config.cfl);
    if !(dt_raw > 0.0) || !dt_raw.is_finite() {
        return Err(Error::Domain(format!(
            "stability limit degenerated to {dt_raw}"
        )));
    }
    let steps_per_output = (config.output_every / dt_raw - 1e-12).ceil().max(1.0) as usize;
    let dt = config.output_every / steps_per_output as f64;
    gen.check_dt(dt)?;
    let blocks = (config.t_end / config.output_every).round() as usize;
    Ok(StepPlan {
        dt,
        steps_per_output,
        blocks,
    })
}

fn rk4_position(gen: &Generator, y: f64, dt: f64) -> Result<f64> {
    let g = |x: f64| gen.coeffs.growth.eval_at(x, &gen.grid);
    let k1 = g(y)?;
    let k2 = g(y + 0.5 * dt * k1)?;
    let k3 = g(y + 0.5 * dt * k2)?;
    let k4 = g(y + dt * k3)?;
    Ok(y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// One split step of the full hybrid dynamics.
///
/// `absorb_threshold` is an absolute mass below which atoms are folded into
/// the density (pass 0 to keep every atom).  Atoms advected beyond `x_max`
/// leave the domain and are removed, mirroring the density outflux.
pub fn step(
    state: &HybridMeasure,
    gen: &Generator,
    dt: f64,
    absorb_threshold: f64,
) -> Result<HybridMeasure> {
    gen.check_dt(dt)?;
    let grid = &gen.grid;
    let dx = grid.dx();

    // Density: transport then loss + fragmentation gain.
    let mut densities = gen.apply_step(&state.densities, dt);

    // Atoms: advance, deposit fragmentation output, decay, absorb.
    let mut atoms = Vec::with_capacity(state.atoms.len());
    for atom in &state.atoms {
        let y_new = rk4_position(gen, atom.position, dt)?;
        if y_new > grid.x_max {
            continue; // boundary outflux: the atom leaves the domain
        }
        let j = grid.cell_of(y_new);
        let b_at = gen.coeffs.division.eval_at(y_new, grid)?;
        if b_at < 0.0 {
            return Err(Error::Positivity(format!(
                "division rate B({y_new:.6e}) = {b_at:.6e}"
            )));
        }
        // Fragmentation output of the whole step, fed by the pre-decay mass
        // (the fragments of those who divided during the step).
        let col = gen.kernel.column(j);
        let feed = dt * b_at * atom.mass;
        for (i, k) in col.iter().enumerate().take(j + 1) {
            densities[i] += feed * k;
        }
        let mass = atom.mass * (-b_at * dt).exp();
        if mass < absorb_threshold {
            densities[j] += mass / dx;
        } else {
            atoms.push(Atom {
                position: y_new,
                mass,
            });
        }
    }

    for (i, d) in densities.iter().enumerate() {
        if !d.is_finite() || *d < -1e-14 {
            return Err(Error::Positivity(format!(
                "density in cell {i} became {d} after a step"
            )));
        }
    }
    Ok(HybridMeasure { densities, atoms })
}

/// One diagnostics row, sampled at snapshot times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    /// Unweighted total variation (population count).
    pub tv: f64,
    /// `⟨n(t), φ⟩` (NaN when no dual weight is available).
    pub weighted_mass_phi: f64,
    /// `⟨n(t), φ⟩ e^{−λt}` — conserved along exact dynamics.
    pub conserved_c: f64,
    /// Weighted mass fraction beyond `0.9 x_max`.
    pub boundary_fraction: f64,
    pub n_atoms: usize,
}

/// Snapshots plus diagnostics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: Grid,
    pub dt: f64,
    pub snapshots: Vec<(f64, HybridMeasure)>,
    pub diagnostics: Vec<DiagnosticsRow>,
}

impl Trajectory {
    pub fn final_state(&self) -> &HybridMeasure {
        &self.snapshots.last().expect("trajectory has snapshots").1
    }

    pub fn output_every(&self) -> f64 {
        if self.snapshots.len() > 1 {
            self.snapshots[1].0 - self.snapshots[0].0
        } else {
            0.0
        }
    }
}

fn diagnostics_row(
    state: &HybridMeasure,
    grid: &Grid,
    t: f64,
    triple: Option<&EigenTriple>,
    phi: Option<&PhiSamples>,
) -> DiagnosticsRow {
    let tv = state.total_variation(grid);
    let (weighted, conserved) = match (triple, phi) {
        (Some(triple), Some(phi)) => {
            let w = state.weighted_mass(grid, |x| phi.eval(x));
            (w, w * (-triple.lambda * t).exp())
        }
        _ => (f64::NAN, f64::NAN),
    };
    let edge = 0.9 * grid.x_max;
    let weight_at = |x: f64| phi.map_or(1.0, |p| p.eval(x));
    let total: f64 = state.weighted_mass(grid, weight_at);
    let beyond: f64 = state.weighted_mass(grid, |x| if x >= edge { weight_at(x) } else { 0.0 });
    let boundary_fraction = if total > 0.0 { beyond / total } else { 0.0 };
    DiagnosticsRow {
        t,
        tv,
        weighted_mass_phi: weighted,
        conserved_c: conserved,
        boundary_fraction,
        n_atoms: state.atoms.len(),
    }
}

/// March the dynamics from `n0` to `t_end`, snapshotting at the output
/// cadence and enforcing the boundary-mass monitor.
///
/// The dual weight (when given) feeds the conserved-quantity and
/// boundary-monitor diagnostics; without it the monitor falls back to
/// unweighted mass.
pub fn simulate(
    n0: &HybridMeasure,
    gen: &Generator,
    config: &SolverConfig,
    triple: Option<&EigenTriple>,
) -> Result<Trajectory> {
    let grid = &gen.grid;
    // Re-validate the initial state against this grid.
    let state0 = HybridMeasure::new(grid, n0.densities.clone(), n0.atoms.clone())?;
    let plan = step_plan(gen, config)?;
    let absorb = config.atom_absorb_threshold * state0.total_variation(grid);
    let phi = match triple {
        Some(t) => Some(t.phi_samples(grid)?),
        None => None,
    };

    let mut snapshots = Vec::with_capacity(plan.blocks + 1);
    let mut diagnostics = Vec::with_capacity(plan.blocks + 1);
    snapshots.push((0.0, state0.clone()));
    diagnostics.push(diagnostics_row(&state0, grid, 0.0, triple, phi.as_ref()));

    let mut state = state0;
    for block in 0..plan.blocks {
        for _ in 0..plan.steps_per_output {
            state = step(&state, gen, plan.dt, absorb)?;
        }
        let t = (block + 1) as f64 * config.output_every;
        let row = diagnostics_row(&state, grid, t, triple, phi.as_ref());
        if row.boundary_fraction > config.boundary_mass_limit {
            return Err(Error::BoundaryMass {
                t,
                fraction: row.boundary_fraction,
                limit: config.boundary_mass_limit,
            });
        }
        snapshots.push((t, state.clone()));
        diagnostics.push(row);
    }
    Ok(Trajectory {
        grid: *grid,
        dt: plan.dt,
        snapshots,
        diagnostics,
    })
}

/// Conserved-quantity series and its worst relative drift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConservationReport {
    /// `(t, ⟨n(t), φ⟩ e^{−λt})`.
    pub series: Vec<(f64, f64)>,
    pub c0: f64,
    pub max_relative_drift: f64,
}

/// Evaluate `c(t) = ⟨n(t), φ⟩ e^{−λt}` along the trajectory; exact dynamics
/// keep it constant.
pub fn conservation_check(traj: &Trajectory, triple: &EigenTriple) -> Result<ConservationReport> {
    let phi = triple.phi_samples(&traj.grid)?;
    let series: Vec<(f64, f64)> = traj
        .snapshots
        .iter()
        .map(|(t, state)| {
            let c = state.weighted_mass(&traj.grid, |x| phi.eval(x)) * (-triple.lambda * t).exp();
            (*t, c)
        })
        .collect();
    let c0 = series.first().map_or(0.0, |(_, c)| *c);
    let max_relative_drift = if c0 != 0.0 {
        series
            .iter()
            .map(|(_, c)| (c - c0).abs() / c0.abs())
            .fold(0.0, f64::max)
    } else if series.iter().all(|(_, c)| *c == 0.0) {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ConservationReport {
        series,
        c0,
        max_relative_drift,
    })
}

/// A compactly supported space-time test function with its first derivatives.
pub struct WeakTestFunction {
    pub value: Box<dyn Fn(f64, f64) -> f64 + Sync>,
    pub time_derivative: Box<dyn Fn(f64, f64) -> f64 + Sync>,
    pub space_derivative: Box<dyn Fn(f64, f64) -> f64 + Sync>,
    /// The function vanishes for `t ≥ support_t`.
    pub support_t: f64,
    /// The function vanishes for `x ≥ support_x`.
    pub support_x: f64,
}

impl WeakTestFunction {
    /// Smooth product bump supported on `[0, support_t) × (margin, support_x)`
    /// with analytic derivatives — a convenient default probe.
    pub fn product_bump(support_t: f64, x_lo: f64, x_hi: f64) -> Self {
        fn bump(s: f64) -> f64 {
            if s.abs() < 1.0 {
                (-1.0 / (1.0 - s * s)).exp()
            } else {
                0.0
            }
        }
        fn dbump(s: f64) -> f64 {
            if s.abs() < 1.0 {
                let d = 1.0 - s * s;
                bump(s) * (-2.0 * s / (d * d))
            } else {
                0.0
            }
        }
        let t_mid = 0.0;
        let t_half = support_t;
        let x_mid = 0.5 * (x_lo + x_hi);
        let x_half = 0.5 * (x_hi - x_lo);
        // In time: one-sided bump equal to bump(t / support_t) for t ∈ [0, support_t).
        let tv = move |t: f64| bump((t - t_mid) / t_half);
        let dtv = move |t: f64| dbump((t - t_mid) / t_half) / t_half;
        let xv = move |x: f64| bump((x - x_mid) / x_half);
        let dxv = move |x: f64| dbump((x - x_mid) / x_half) / x_half;
        WeakTestFunction {
            value: Box::new(move |t, x| tv(t) * xv(x)),
            time_derivative: Box::new(move |t, x| dtv(t) * xv(x)),
            space_derivative: Box::new(move |t, x| tv(t) * dxv(x)),
            support_t,
            support_x: x_hi,
        }
    }

    fn verify_support(&self, t_end: f64, grid: &Grid) -> Result<()> {
        if self.support_t > t_end || self.support_x > grid.x_max {
            return Err(Error::Support(format!(
                "declared support ({}, {}) exceeds the domain ({t_end}, {})",
                self.support_t, self.support_x, grid.x_max
            )));
        }
        let probes = 17;
        for k in 0..=probes {
            let x = grid.x_max * k as f64 / probes as f64;
            let v = (self.value)(self.support_t, x);
            if v.abs() > 1e-12 {
                return Err(Error::Support(format!(
                    "test function does not vanish at t = {} (value {v:.3e} at x = {x})",
                    self.support_t
                )));
            }
            let t = t_end * k as f64 / probes as f64;
            let v = (self.value)(t, self.support_x);
            if v.abs() > 1e-12 {
                return Err(Error::Support(format!(
                    "test function does not vanish at x = {} (value {v:.3e} at t = {t})",
                    self.support_x
                )));
            }
        }
        Ok(())
    }
}

/// Defect of the space-time weak formulation along a trajectory.
///
/// For a test function vanishing at the final time and near `x_max`, a weak
/// solution satisfies
///
/// ```text
/// ∫₀^T ⟨n_t, ∂_t ψ + g ∂_x ψ + B (Kψ − ψ)⟩ dt + ⟨n⁰, ψ(0, ·)⟩ = 0,
/// ```
///
/// where `(Kψ)(y) = ∫ k(x, y) ψ(x) dx`.  This evaluates the left side with
/// midpoint quadrature in size (exact pairing for atoms) and trapezoid
/// quadrature in time, returning its absolute value.
pub fn weak_form_residual(
    traj: &Trajectory,
    gen: &Generator,
    psi: &WeakTestFunction,
) -> Result<f64> {
    let grid = &gen.grid;
    let t_end = traj.snapshots.last().map_or(0.0, |(t, _)| *t);
    psi.verify_support(t_end, grid)?;
    let dx = grid.dx();

    // ⟨n, ∂_tψ + g ∂_xψ + B (Kψ − ψ)⟩ at one time.
    let pair = |t: f64, state: &HybridMeasure| -> Result<f64> {
        // ψ weighted against every fragment column once per time.
        let psi_cells: Vec<f64> = (0..grid.m)
            .map(|i| (psi.value)(t, grid.center(i)))
            .collect();
        let k_psi = |j: usize| -> f64 {
            gen.kernel
                .column(j)
                .iter()
                .zip(&psi_cells)
                .map(|(k, p)| k * p)
                .sum::<f64>()
                * dx
        };
        let mut acc = 0.0;
        for (i, n_i) in state.densities.iter().enumerate() {
            if *n_i == 0.0 {
                continue;
            }
            let x = grid.center(i);
            let advect = (psi.time_derivative)(t, x) + gen.g[i] * (psi.space_derivative)(t, x);
            let frag = gen.b[i] * (k_psi(i) - psi_cells[i]);
            acc += n_i * (advect + frag) * dx;
        }
        for atom in &state.atoms {
            let y = atom.position;
            let g_at = gen.coeffs.growth.eval_at(y, grid)?;
            let b_at = gen.coeffs.division.eval_at(y, grid)?;
            let advect =
                (psi.time_derivative)(t, y) + g_at * (psi.space_derivative)(t, y);
            let frag = b_at * (k_psi(grid.cell_of(y)) - (psi.value)(t, y));
            acc += atom.mass * (advect + frag);
        }
        Ok(acc)
    };

    let mut integral = 0.0;
    for w in traj.snapshots.windows(2) {
        let (t0, ref s0) = w[0];
        let (t1, ref s1) = w[1];
        integral += 0.5 * (t1 - t0) * (pair(t0, s0)? + pair(t1, s1)?);
    }
    let initial = traj
        .snapshots
        .first()
        .map(|(_, s)| {
            s.weighted_mass(grid, |x| (psi.value)(0.0, x))
        })
        .unwrap_or(0.0);
    Ok((integral + initial).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientSet, FunctionSpec, KernelSpec};
    use crate::eigen::{build_generator, solve_triple, SolveOptions};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn constant_set(b: f64) -> CoefficientSet {
        CoefficientSet {
            growth: FunctionSpec::Constant { value: 1.0 },
            division: FunctionSpec::Constant { value: b },
            kernel: KernelSpec::Uniform,
            g_floor: 1e-8,
            allow_non_conforming: b <= 0.0,
        }
    }

    fn bump_density(grid: &Grid, center: f64, width: f64, mass: f64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..grid.m)
            .map(|i| {
                let s = (grid.center(i) - center) / width;
                if s.abs() < 1.0 {
                    (-1.0 / (1.0 - s * s)).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = v.iter().sum::<f64>() * grid.dx();
        v.iter_mut().for_each(|x| *x *= mass / total);
        v
    }

    #[test]
    fn zero_state_stays_zero() {
        let grid = Grid::new(50, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let zero = HybridMeasure::zero(&grid);
        let next = step(&zero, &gen, 0.01, 0.0).unwrap();
        assert_eq!(next, zero);
    }

    #[test]
    fn transport_only_atom_moves_exactly() {
        let grid = Grid::new(50, 10.0).unwrap();
        let gen = build_generator(&constant_set(0.0), &grid).unwrap();
        let state = HybridMeasure::new(
            &grid,
            vec![0.0; 50],
            vec![Atom {
                position: 1.0,
                mass: 1.0,
            }],
        )
        .unwrap();
        let next = step(&state, &gen, 0.1, 0.0).unwrap();
        assert_eq!(next.atoms.len(), 1);
        // RK4 is exact for constant g; no decay with B ≡ 0.
        assert_abs_diff_eq!(next.atoms[0].position, 1.1, epsilon = 1e-14);
        assert_abs_diff_eq!(next.atoms[0].mass, 1.0, epsilon = 1e-15);
        assert!(next.densities.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn atom_decay_and_fragment_deposit_are_consistent() {
        let grid = Grid::new(100, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let dt = 0.01;
        let state = HybridMeasure::new(
            &grid,
            vec![0.0; 100],
            vec![Atom {
                position: 2.0,
                mass: 1.0,
            }],
        )
        .unwrap();
        let next = step(&state, &gen, dt, 0.0).unwrap();
        assert_abs_diff_eq!(next.atoms[0].mass, (-dt).exp(), epsilon = 1e-15);
        // Deposited fragment count: dt · B · w · (number moment 2), exact by
        // the kernel correction.
        let deposited: f64 = next.densities.iter().sum::<f64>() * grid.dx();
        assert_abs_diff_eq!(deposited, 2.0 * dt, epsilon = 1e-14);
    }

    #[test]
    fn splitting_defect_shrinks_with_the_step() {
        let grid = Grid::new(100, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let densities = bump_density(&grid, 2.0, 0.8, 1.0);
        let state = HybridMeasure::new(
            &grid,
            densities,
            vec![Atom {
                position: 3.0,
                mass: 0.5,
            }],
        )
        .unwrap();
        let defect = |dt: f64| {
            let full = step(&state, &gen, dt, 0.0).unwrap();
            let half = step(
                &step(&state, &gen, dt / 2.0, 0.0).unwrap(),
                &gen,
                dt / 2.0,
                0.0,
            )
            .unwrap();
            full.densities
                .iter()
                .zip(&half.densities)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                * grid.dx()
                + full
                    .atoms
                    .iter()
                    .zip(&half.atoms)
                    .map(|(a, b)| (a.mass - b.mass).abs())
                    .sum::<f64>()
        };
        let d1 = defect(0.04);
        let d2 = defect(0.02);
        let ratio = d1 / d2;
        assert!(
            (1.5..=5.0).contains(&ratio),
            "splitting defect ratio {ratio} outside the first/second-order band (d1 = {d1}, d2 = {d2})"
        );
    }

    #[test]
    fn step_rejects_oversized_dt() {
        let grid = Grid::new(100, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let state = HybridMeasure::zero(&grid);
        let dt = 2.0 * gen.cfl_limit(1.0);
        assert!(matches!(
            step(&state, &gen, dt, 0.0),
            Err(Error::CflViolation { .. })
        ));
    }

    #[test]
    fn number_growth_matches_exponential() {
        // With B ≡ 1 the continuum population grows like e^t.
        let grid = Grid::new(100, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let n0 = HybridMeasure::new(&grid, bump_density(&grid, 1.0, 0.5, 1.0), vec![]).unwrap();
        let config = SolverConfig {
            t_end: 2.0,
            output_every: 0.5,
            ..SolverConfig::default()
        };
        let traj = simulate(&n0, &gen, &config, None).unwrap();
        let final_tv = traj.final_state().total_variation(&grid);
        let expected = 2.0f64.exp();
        assert!(
            ((final_tv - expected) / expected).abs() < 5e-3,
            "population at t = 2: {final_tv} vs e² = {expected}"
        );
    }

    #[test]
    fn steady_profile_keeps_its_shape() {
        let grid = Grid::new(200, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let config = SolverConfig {
            t_end: 2.0,
            output_every: 0.1,
            ..SolverConfig::default()
        };
        let plan = step_plan(&gen, &config).unwrap();
        let opts = SolveOptions {
            dt: Some(plan.dt),
            ..SolveOptions::default()
        };
        let triple = solve_triple(&gen, &opts).unwrap();
        let n0 = HybridMeasure::new(&grid, triple.n.clone(), vec![]).unwrap();
        let traj = simulate(&n0, &gen, &config, Some(&triple)).unwrap();
        // The profile is an exact eigenvector of the step: after rescaling,
        // the final state matches it to roundoff.
        let final_state = traj.final_state();
        let total: f64 = final_state.densities.iter().sum::<f64>() * grid.dx();
        let worst = final_state
            .densities
            .iter()
            .zip(&triple.n)
            .map(|(a, b)| (a / total - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "normalized shape drift {worst}");
    }

    #[test]
    fn conserved_quantity_is_flat_for_density_data() {
        let grid = Grid::new(200, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let config = SolverConfig {
            t_end: 3.0,
            output_every: 0.1,
            ..SolverConfig::default()
        };
        let plan = step_plan(&gen, &config).unwrap();
        let opts = SolveOptions {
            dt: Some(plan.dt),
            tol: 1e-12,
            ..SolveOptions::default()
        };
        let triple = solve_triple(&gen, &opts).unwrap();
        let n0 = HybridMeasure::new(&grid, bump_density(&grid, 1.5, 0.7, 1.0), vec![]).unwrap();
        let traj = simulate(&n0, &gen, &config, Some(&triple)).unwrap();
        let report = conservation_check(&traj, &triple).unwrap();
        // The density stepper is the exact adjoint of the dual problem, so
        // the drift is bounded by t_end × (dual residual): solver noise, not
        // a discretisation error.
        assert!(
            report.max_relative_drift < 1e-9,
            "drift {}",
            report.max_relative_drift
        );
    }

    #[test]
    fn dirac_datum_conserves_and_populates_reachable_cells() {
        let grid = Grid::new(200, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let config = SolverConfig {
            t_end: 3.0,
            output_every: 0.1,
            ..SolverConfig::default()
        };
        let plan = step_plan(&gen, &config).unwrap();
        let opts = SolveOptions {
            dt: Some(plan.dt),
            ..SolveOptions::default()
        };
        let triple = solve_triple(&gen, &opts).unwrap();
        let n0 = HybridMeasure::new(
            &grid,
            vec![0.0; 200],
            vec![Atom {
                position: 2.0,
                mass: 1.0,
            }],
        )
        .unwrap();
        let traj = simulate(&n0, &gen, &config, Some(&triple)).unwrap();
        let report = conservation_check(&traj, &triple).unwrap();
        assert!(
            report.max_relative_drift < 1e-2,
            "drift {}",
            report.max_relative_drift
        );
        // c(0) = φ(x₀) · mass.
        let phi = triple.phi_samples(&grid).unwrap();
        assert_abs_diff_eq!(report.c0, phi.eval(2.0), epsilon = 1e-12);
        // Fragmentation reaches every size below the (advected) atom.
        let final_state = traj.final_state();
        let reachable = grid.cell_of(2.0);
        assert!(
            final_state.densities[..reachable].iter().all(|d| *d > 0.0),
            "cells below the atom must be populated"
        );
    }

    #[test]
    fn atoms_below_threshold_are_absorbed() {
        let grid = Grid::new(100, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let state = HybridMeasure::new(
            &grid,
            vec![0.0; 100],
            vec![Atom {
                position: 1.0,
                mass: 1.0,
            }],
        )
        .unwrap();
        // Threshold above the decayed mass: the atom must be absorbed.
        let next = step(&state, &gen, 0.01, 1.0).unwrap();
        assert!(next.atoms.is_empty());
        // Total variation is conserved up to the decay/deposit exchange.
        assert!(next.total_variation(&grid) > 0.0);
    }

    #[test]
    fn atom_leaving_the_domain_is_dropped() {
        let grid = Grid::new(100, 10.0).unwrap();
        let gen = build_generator(&constant_set(0.0), &grid).unwrap();
        let state = HybridMeasure::new(
            &grid,
            vec![0.0; 100],
            vec![Atom {
                position: 9.99,
                mass: 1.0,
            }],
        )
        .unwrap();
        let next = step(&state, &gen, 0.05, 0.0).unwrap();
        assert!(next.atoms.is_empty());
        assert_eq!(next.total_variation(&grid), 0.0);
    }

    #[test]
    fn simulate_composes_steps_bitwise() {
        let grid = Grid::new(100, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let n0 = HybridMeasure::new(
            &grid,
            bump_density(&grid, 1.5, 0.7, 1.0),
            vec![Atom {
                position: 2.5,
                mass: 0.3,
            }],
        )
        .unwrap();
        let config = SolverConfig {
            t_end: 1.0,
            output_every: 1.0,
            ..SolverConfig::default()
        };
        let traj = simulate(&n0, &gen, &config, None).unwrap();
        let plan = step_plan(&gen, &config).unwrap();
        let absorb = config.atom_absorb_threshold * n0.total_variation(&grid);
        let mut state = n0.clone();
        for _ in 0..plan.steps_per_output {
            state = step(&state, &gen, plan.dt, absorb).unwrap();
        }
        assert_eq!(traj.final_state(), &state);
    }

    #[test]
    fn boundary_monitor_trips_on_zero_limit() {
        let grid = Grid::new(100, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let n0 = HybridMeasure::new(&grid, bump_density(&grid, 8.0, 0.7, 1.0), vec![]).unwrap();
        let config = SolverConfig {
            t_end: 2.0,
            output_every: 0.1,
            boundary_mass_limit: 0.0,
            ..SolverConfig::default()
        };
        assert!(matches!(
            simulate(&n0, &gen, &config, None),
            Err(Error::BoundaryMass { .. })
        ));
    }

    #[test]
    fn cadence_must_divide_horizon() {
        let config = SolverConfig {
            t_end: 1.0,
            output_every: 0.3,
            ..SolverConfig::default()
        };
        assert!(matches!(config.validate(), Err(Error::Cadence(_))));
    }

    #[test]
    fn weak_residual_vanishes_for_zero_cases() {
        let grid = Grid::new(60, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let config = SolverConfig {
            t_end: 1.0,
            output_every: 0.25,
            ..SolverConfig::default()
        };
        let zero = HybridMeasure::zero(&grid);
        let traj = simulate(&zero, &gen, &config, None).unwrap();
        // Zero data: residual 0 for any test function.
        let psi = WeakTestFunction::product_bump(0.9, 1.0, 8.0);
        assert_eq!(weak_form_residual(&traj, &gen, &psi).unwrap(), 0.0);
        // The zero test function gives residual 0 for any data.
        let n0 = HybridMeasure::new(&grid, bump_density(&grid, 2.0, 0.6, 1.0), vec![]).unwrap();
        let traj = simulate(&n0, &gen, &config, None).unwrap();
        let zero_psi = WeakTestFunction {
            value: Box::new(|_, _| 0.0),
            time_derivative: Box::new(|_, _| 0.0),
            space_derivative: Box::new(|_, _| 0.0),
            support_t: 0.5,
            support_x: 5.0,
        };
        assert_eq!(weak_form_residual(&traj, &gen, &zero_psi).unwrap(), 0.0);
    }

    #[test]
    fn weak_residual_shrinks_under_refinement() {
        let defect = |m: usize| {
            let grid = Grid::new(m, 10.0).unwrap();
            let gen = build_generator(&constant_set(1.0), &grid).unwrap();
            let config = SolverConfig {
                t_end: 2.0,
                output_every: 0.1,
                ..SolverConfig::default()
            };
            let n0 =
                HybridMeasure::new(&grid, bump_density(&grid, 2.0, 0.8, 1.0), vec![]).unwrap();
            let traj = simulate(&n0, &gen, &config, None).unwrap();
            let psi = WeakTestFunction::product_bump(1.8, 1.0, 8.0);
            weak_form_residual(&traj, &gen, &psi).unwrap()
        };
        let d1 = defect(100);
        let d2 = defect(200);
        assert!(
            d2 < d1,
            "weak-form residual must shrink under refinement: {d1} vs {d2}"
        );
    }

    #[test]
    fn unsupported_test_function_is_rejected() {
        let grid = Grid::new(60, 10.0).unwrap();
        let gen = build_generator(&constant_set(1.0), &grid).unwrap();
        let config = SolverConfig {
            t_end: 1.0,
            output_every: 0.25,
            ..SolverConfig::default()
        };
        let zero = HybridMeasure::zero(&grid);
        let traj = simulate(&zero, &gen, &config, None).unwrap();
        // Claims support beyond the horizon.
        let psi = WeakTestFunction {
            value: Box::new(|_, _| 1.0),
            time_derivative: Box::new(|_, _| 0.0),
            space_derivative: Box::new(|_, _| 0.0),
            support_t: 2.0,
            support_x: 5.0,
        };
        assert!(matches!(
            weak_form_residual(&traj, &gen, &psi),
            Err(Error::Support(_))
        ));
        // Declared support is fine but the function does not actually vanish.
        let psi = WeakTestFunction {
            value: Box::new(|_, _| 1.0),
            time_derivative: Box::new(|_, _| 0.0),
            space_derivative: Box::new(|_, _| 0.0),
            support_t: 0.5,
            support_x: 5.0,
        };
        assert!(matches!(
            weak_form_residual(&traj, &gen, &psi),
            Err(Error::Support(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn steps_preserve_positivity(
            seedlings in proptest::collection::vec(0.0..2.0f64, 50),
            atom_pos in 0.5..9.0f64,
            atom_mass in 0.0..2.0f64,
        ) {
            let grid = Grid::new(50, 10.0).unwrap();
            let gen = build_generator(&constant_set(1.0), &grid).unwrap();
            let mut state = HybridMeasure::new(
                &grid,
                seedlings,
                vec![Atom { position: atom_pos, mass: atom_mass }],
            )
            .unwrap();
            let dt = gen.cfl_limit(1.0); // right at the stability limit
            for _ in 0..5 {
                state = step(&state, &gen, dt, 0.0).unwrap();
                prop_assert!(state.densities.iter().all(|d| *d >= 0.0));
                prop_assert!(state.atoms.iter().all(|a| a.mass >= 0.0));
            }
        }
    }
}
