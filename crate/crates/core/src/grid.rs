//! Uniform size grid and hybrid density/atom states.
//!
//! A state is a non-negative measure on `[0, x_max]` stored as a per-cell
//! density (finite-volume averages at cell centres) plus a list of point
//! masses.  Atoms keep exact positions; densities live on the grid.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Uniform grid of `m` cells on `[0, x_max]`; cell `i` (0-based) spans
/// `[i*dx, (i+1)*dx)` with centre `(i + 1/2)*dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub m: usize,
    pub x_max: f64,
}

impl Grid {
    pub fn new(m: usize, x_max: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Domain("grid needs at least two cells".into()));
        }
        if !(x_max > 0.0) || !x_max.is_finite() {
            return Err(Error::Domain(format!("x_max must be positive, got {x_max}")));
        }
        Ok(Grid { m, x_max })
    }

    /// Cell width.
    pub fn dx(&self) -> f64 {
        self.x_max / self.m as f64
    }

    /// Centre of cell `i` (0-based).
    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx()
    }

    /// All cell centres.
    pub fn centers(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.center(i)).collect()
    }

    /// Index of the cell containing `x`, clamped to the grid.
    pub fn cell_of(&self, x: f64) -> usize {
        let i = (x / self.dx()).floor() as isize;
        i.clamp(0, self.m as isize - 1) as usize
    }
}

/// A point mass at `position` carrying `mass`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub position: f64,
    pub mass: f64,
}

/// Hybrid state: cell-centre densities plus point masses.
///
/// Densities are non-negative; atom positions lie in `(0, x_max]` and atom
/// masses are non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridMeasure {
    pub densities: Vec<f64>,
    pub atoms: Vec<Atom>,
}

impl HybridMeasure {
    /// Validating constructor.
    pub fn new(grid: &Grid, densities: Vec<f64>, atoms: Vec<Atom>) -> Result<Self> {
        if densities.len() != grid.m {
            return Err(Error::Domain(format!(
                "density length {} does not match grid with {} cells",
                densities.len(),
                grid.m
            )));
        }
        for (i, d) in densities.iter().enumerate() {
            if !d.is_finite() || *d < 0.0 {
                return Err(Error::Positivity(format!("density in cell {i} is {d}")));
            }
        }
        for (j, a) in atoms.iter().enumerate() {
            if !a.position.is_finite() || a.position <= 0.0 || a.position > grid.x_max {
                return Err(Error::Domain(format!(
                    "atom {j} position {} outside (0, {}]",
                    a.position, grid.x_max
                )));
            }
            if !a.mass.is_finite() || a.mass < 0.0 {
                return Err(Error::Positivity(format!("atom {j} mass is {}", a.mass)));
            }
        }
        Ok(HybridMeasure { densities, atoms })
    }

    /// The zero measure.
    pub fn zero(grid: &Grid) -> Self {
        HybridMeasure {
            densities: vec![0.0; grid.m],
            atoms: Vec::new(),
        }
    }

    /// Total variation: integral of the density plus all atom masses.
    pub fn total_variation(&self, grid: &Grid) -> f64 {
        let dx = grid.dx();
        let dens: f64 = self.densities.iter().sum::<f64>() * dx;
        let atoms: f64 = self.atoms.iter().map(|a| a.mass).sum();
        dens + atoms
    }

    /// Integral of a weight against the measure: midpoint quadrature on the
    /// density part plus exact evaluation at atom positions.
    pub fn weighted_mass(&self, grid: &Grid, w: impl Fn(f64) -> f64) -> f64 {
        let dx = grid.dx();
        let mut total = 0.0;
        for (i, d) in self.densities.iter().enumerate() {
            total += w(grid.center(i)) * d * dx;
        }
        for a in &self.atoms {
            total += w(a.position) * a.mass;
        }
        total
    }

    /// Same measure with densities and atom masses scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        HybridMeasure {
            densities: self.densities.iter().map(|d| d * factor).collect(),
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    position: a.position,
                    mass: a.mass * factor,
                })
                .collect(),
        }
    }

    /// Convert atom `j` into density on the cell containing it.  Total
    /// variation is preserved exactly; the weighted mass against a Lipschitz
    /// weight moves by at most `Lip(w) * dx * mass`.
    pub fn absorb_atom(&self, grid: &Grid, j: usize) -> Result<Self> {
        let atom = *self
            .atoms
            .get(j)
            .ok_or_else(|| Error::Index(format!("atom {j} of {}", self.atoms.len())))?;
        let mut densities = self.densities.clone();
        densities[grid.cell_of(atom.position)] += atom.mass / grid.dx();
        let mut atoms = self.atoms.clone();
        atoms.remove(j);
        Ok(HybridMeasure { densities, atoms })
    }
}

/// A weight sampled at cell centres, evaluated elsewhere by linear
/// interpolation (linear extrapolation beyond the first/last centre, clamped
/// at zero so weights stay admissible).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhiSamples {
    pub values: Vec<f64>,
    pub grid: Grid,
}

impl PhiSamples {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.m {
            return Err(Error::Domain(format!(
                "weight sample length {} does not match grid with {} cells",
                values.len(),
                grid.m
            )));
        }
        Ok(PhiSamples {
            values,
            grid: *grid,
        })
    }

    /// Piecewise-linear evaluation through the centre samples.
    pub fn eval(&self, x: f64) -> f64 {
        let m = self.values.len();
        if m == 1 {
            return self.values[0];
        }
        let dx = self.grid.dx();
        // Segment index: centres sit at (i + 1/2) dx.
        let s = (x / dx - 0.5).floor();
        let i = (s as isize).clamp(0, m as isize - 2) as usize;
        let x_i = self.grid.center(i);
        let slope = (self.values[i + 1] - self.values[i]) / dx;
        (self.values[i] + slope * (x - x_i)).max(0.0)
    }
}

/// Weighted total-variation distance between a hybrid measure and an
/// absolutely continuous reference density on the same grid.
///
/// Atoms are mutually singular with any density, so they contribute their
/// full weighted mass.
pub fn tv_phi_distance(
    mu: &HybridMeasure,
    grid: &Grid,
    reference: &[f64],
    phi: &PhiSamples,
) -> Result<f64> {
    if reference.len() != grid.m {
        return Err(Error::Domain(format!(
            "reference length {} does not match grid with {} cells",
            reference.len(),
            grid.m
        )));
    }
    let dx = grid.dx();
    let mut total = 0.0;
    for i in 0..grid.m {
        total += phi.values[i] * (mu.densities[i] - reference[i]).abs() * dx;
    }
    for a in &mu.atoms {
        total += phi.eval(a.position) * a.mass;
    }
    Ok(total)
}
