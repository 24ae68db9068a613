//! Artifact layout: JSON reports and CSV series under one output directory.
//!
//! ```text
//! out/
//!   validation.json        coefficient assumption checks
//!   eigen.json             full eigentriple (reloadable)
//!   eigen.csv              x, n, phi
//!   trajectory.json        full trajectory (reloadable)
//!   snapshots/snap_0000.csv            x, density per snapshot
//!   snapshots/snap_0000_atoms.csv      position, mass (when atoms exist)
//!   diagnostics.csv        t, tv, weighted_mass_phi, conserved_c, …
//!   entropy_<label>.csv    t, h, d, defect, monotone_ok
//!   study.json             refinement study report
//!   summary.json           stage status and metrics
//! ```
//!
//! Floats in CSV files carry 17 significant digits so values round-trip
//! exactly; rows end with a bare line feed.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::eigen::EigenTriple;
use crate::entropy::BalanceSeries;
use crate::grid::Grid;
use crate::Result;

/// Shortest exact decimal for a float: 17 significant digits round-trip.
fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serialize a value as pretty JSON under `dir/name`.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut file = File::create(dir.join(name))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Read a JSON artifact back.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(file)?)
}

/// Write `eigen.json` (the full reloadable triple) and the human-oriented
/// `eigen.csv` with the profile and weight per cell center.
pub fn write_eigen_artifacts(dir: &Path, triple: &EigenTriple, grid: &Grid) -> Result<()> {
    write_json(dir, "eigen.json", triple)?;
    let mut w = csv::Writer::from_path(dir.join("eigen.csv"))?;
    w.write_record(["x", "n", "phi"])?;
    for i in 0..grid.m {
        w.write_record([
            fmt_f(grid.center(i)),
            fmt_f(triple.n[i]),
            fmt_f(triple.phi[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eigen(dir: &Path) -> Result<EigenTriple> {
    read_json(dir.join("eigen.json").as_path())
}

/// Write `trajectory.json`, per-snapshot CSVs and the diagnostics series.
pub fn write_trajectory_artifacts(dir: &Path, traj: &Trajectory) -> Result<()> {
    write_json(dir, "trajectory.json", traj)?;
    let snaps = dir.join("snapshots");
    std::fs::create_dir_all(&snaps)?;
    for (k, (_, state)) in traj.snapshots.iter().enumerate() {
        let mut w = csv::Writer::from_path(snaps.join(format!("snap_{k:04}.csv")))?;
        w.write_record(["x", "density"])?;
        for i in 0..traj.grid.m {
            w.write_record([fmt_f(traj.grid.center(i)), fmt_f(state.densities[i])])?;
        }
        w.flush()?;
        if !state.atoms.is_empty() {
            let mut w = csv::Writer::from_path(snaps.join(format!("snap_{k:04}_atoms.csv")))?;
            w.write_record(["position", "mass"])?;
            for atom in &state.atoms {
                w.write_record([fmt_f(atom.position), fmt_f(atom.mass)])?;
            }
            w.flush()?;
        }
    }
    let mut w = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
    w.write_record([
        "t",
        "tv",
        "weighted_mass_phi",
        "conserved_c",
        "boundary_fraction",
        "n_atoms",
    ])?;
    for row in &traj.diagnostics {
        w.write_record([
            fmt_f(row.t),
            fmt_f(row.tv),
            fmt_f(row.weighted_mass_phi),
            fmt_f(row.conserved_c),
            fmt_f(row.boundary_fraction),
            row.n_atoms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(dir: &Path) -> Result<Trajectory> {
    read_json(dir.join("trajectory.json").as_path())
}

/// Write one entropy balance series as `entropy_<label>.csv`.
pub fn write_entropy_series(dir: &Path, label: &str, series: &BalanceSeries) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("entropy_{label}.csv")))?;
    w.write_record(["t", "h", "d", "defect", "monotone_ok"])?;
    for row in &series.rows {
        w.write_record([
            fmt_f(row.t),
            fmt_f(row.h),
            fmt_f(row.d),
            fmt_f(row.defect),
            row.monotone_ok.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
