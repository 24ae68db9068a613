//! Stage orchestration: validate → eigen → simulate → entropy → converge.
//!
//! Each stage writes its artifacts into the output directory and records a
//! pass/fail status with metrics in `summary.json`.  Requested stages pull
//! in their dependencies automatically; a failed stage marks everything
//! downstream of it as skipped, and the summary is written regardless of
//! how far the pipeline got.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::coefficients::validate_assumptions;
use crate::dynamics::{
    conservation_check, simulate, step_plan, weak_form_residual, Trajectory, WeakTestFunction,
};
use crate::eigen::{
    build_generator, eigen_identities, solve_triple, EigenTriple, Generator, SolveOptions,
};
use crate::entropy::{dissipation_budget, entropy_balance_check, EntropySpec};
use crate::grid::{Grid, HybridMeasure};
use crate::io;
use crate::scenario::Scenario;
use crate::{Error, Result};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Validate,
    Eigen,
    Simulate,
    Entropy,
    Converge,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Validate,
        Stage::Eigen,
        Stage::Simulate,
        Stage::Entropy,
        Stage::Converge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Eigen => "eigen",
            Stage::Simulate => "simulate",
            Stage::Entropy => "entropy",
            Stage::Converge => "converge",
        }
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Validate => &[],
            Stage::Eigen => &[Stage::Validate],
            Stage::Simulate => &[Stage::Validate, Stage::Eigen],
            Stage::Entropy => &[Stage::Validate, Stage::Eigen, Stage::Simulate],
            Stage::Converge => &[Stage::Validate],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown stage \"{s}\"")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pass,
    Fail,
    Skipped,
}

/// Outcome of one stage: status plus free-form metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub status: StageStatus,
    pub metrics: Map<String, Value>,
}

/// What `summary.json` contains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: BTreeMap<String, StageReport>,
    /// True when every executed stage passed its contracts.
    pub passed: bool,
}

/// Mutable state threaded through the stages.
#[derive(Default)]
struct Context {
    grid: Option<Grid>,
    gen: Option<Generator>,
    triple: Option<EigenTriple>,
    n0: Option<HybridMeasure>,
    traj: Option<Trajectory>,
}

/// Run the requested stages (plus their dependencies) and write artifacts
/// and `summary.json` under `out_dir`.
///
/// Stage contract violations and stage computation errors are recorded in
/// the report, not returned as `Err`; the error path is reserved for an
/// invalid scenario or an unwritable output directory.
pub fn run_pipeline(scenario: &Scenario, stages: &[Stage], out_dir: &Path) -> Result<PipelineReport> {
    scenario.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut wanted = [false; 5];
    fn mark(stage: Stage, wanted: &mut [bool; 5]) {
        if !wanted[stage as usize] {
            wanted[stage as usize] = true;
            for dep in stage.deps() {
                mark(*dep, wanted);
            }
        }
    }
    for stage in stages {
        mark(*stage, &mut wanted);
    }

    let mut report = PipelineReport {
        stages: BTreeMap::new(),
        passed: true,
    };
    let mut unusable = [false; 5];
    let mut ctx = Context::default();

    for stage in Stage::ALL {
        if !wanted[stage as usize] {
            continue;
        }
        if stage.deps().iter().any(|d| unusable[*d as usize]) {
            unusable[stage as usize] = true;
            let mut metrics = Map::new();
            metrics.insert(
                "reason".into(),
                Value::String("a dependency failed".into()),
            );
            report
                .stages
                .insert(stage.name().into(), StageReport {
                    status: StageStatus::Skipped,
                    metrics,
                });
            continue;
        }
        let outcome = run_stage(stage, scenario, out_dir, &mut ctx);
        let stage_report = match outcome {
            Ok((true, metrics)) => StageReport {
                status: StageStatus::Pass,
                metrics,
            },
            Ok((false, metrics)) => {
                unusable[stage as usize] = true;
                report.passed = false;
                StageReport {
                    status: StageStatus::Fail,
                    metrics,
                }
            }
            Err(e) => {
                unusable[stage as usize] = true;
                report.passed = false;
                let mut metrics = Map::new();
                metrics.insert("error".into(), Value::String(e.to_string()));
                StageReport {
                    status: StageStatus::Fail,
                    metrics,
                }
            }
        };
        report.stages.insert(stage.name().into(), stage_report);
    }

    io::write_json(out_dir, "summary.json", &report)?;
    Ok(report)
}

fn run_stage(
    stage: Stage,
    scenario: &Scenario,
    out_dir: &Path,
    ctx: &mut Context,
) -> Result<(bool, Map<String, Value>)> {
    let tol = scenario.output.tolerances;
    match stage {
        Stage::Validate => {
            let grid = scenario.grid.to_grid()?;
            let vr = validate_assumptions(&scenario.coefficients, &grid, tol.validation_tol)?;
            io::write_json(out_dir, "validation.json", &vr)?;
            let mut checks = Map::new();
            for c in &vr.checks {
                checks.insert(
                    c.name.clone(),
                    json!({"passed": c.passed, "waived": c.waived, "worst": c.worst}),
                );
            }
            let pass = vr.admissible();
            let mut metrics = Map::new();
            metrics.insert("conforming".into(), Value::Bool(vr.conforming()));
            metrics.insert("admissible".into(), Value::Bool(pass));
            metrics.insert("checks".into(), Value::Object(checks));
            ctx.grid = Some(grid);
            Ok((pass, metrics))
        }
        Stage::Eigen => {
            let grid = ctx.grid.as_ref().expect("validate ran first");
            let gen = build_generator(&scenario.coefficients, grid)?;
            let plan = step_plan(&gen, &scenario.solver)?;
            let opts = SolveOptions {
                tol: tol.eigen_tol,
                max_iter: tol.eigen_max_iter,
                dt: Some(plan.dt),
            };
            let triple = solve_triple(&gen, &opts)?;
            let ids = eigen_identities(&triple, &gen);
            io::write_eigen_artifacts(out_dir, &triple, grid)?;
            let pass = triple.primal_residual <= tol.eigen_tol
                && triple.dual_residual <= 20.0 * tol.eigen_tol;
            let mut metrics = Map::new();
            metrics.insert("lambda".into(), json!(triple.lambda));
            metrics.insert("primal_residual".into(), json!(triple.primal_residual));
            metrics.insert("dual_residual".into(), json!(triple.dual_residual));
            metrics.insert("iterations".into(), json!(triple.iterations));
            metrics.insert("dt".into(), json!(triple.dt));
            metrics.insert("number_balance_defect".into(), json!(ids.number_defect));
            metrics.insert("mass_balance_defect".into(), json!(ids.mass_defect));
            ctx.gen = Some(gen);
            ctx.triple = Some(triple);
            Ok((pass, metrics))
        }
        Stage::Simulate => {
            let grid = ctx.grid.as_ref().expect("validate ran first");
            let gen = ctx.gen.as_ref().expect("eigen ran first");
            let triple = ctx.triple.as_ref().expect("eigen ran first");
            let n0 = scenario.initial_measure(grid, Some(&triple.n))?;
            let traj = simulate(&n0, gen, &scenario.solver, Some(triple))?;
            let cons = conservation_check(&traj, triple)?;
            io::write_trajectory_artifacts(out_dir, &traj)?;
            let max_boundary = traj
                .diagnostics
                .iter()
                .map(|r| r.boundary_fraction)
                .fold(0.0f64, f64::max);
            let final_row = traj.diagnostics.last().expect("diagnostics nonempty");
            let pass = cons.max_relative_drift <= tol.drift_limit;
            let mut metrics = Map::new();
            metrics.insert("conserved_c0".into(), json!(cons.c0));
            metrics.insert("conservation_drift".into(), json!(cons.max_relative_drift));
            metrics.insert("n_snapshots".into(), json!(traj.snapshots.len()));
            metrics.insert("final_tv".into(), json!(final_row.tv));
            metrics.insert("final_n_atoms".into(), json!(final_row.n_atoms));
            metrics.insert("max_boundary_fraction".into(), json!(max_boundary));
            ctx.n0 = Some(n0);
            ctx.traj = Some(traj);
            Ok((pass, metrics))
        }
        Stage::Entropy => {
            let grid = ctx.grid.as_ref().expect("validate ran first");
            let gen = ctx.gen.as_ref().expect("eigen ran first");
            let triple = ctx.triple.as_ref().expect("eigen ran first");
            let n0 = ctx.n0.as_ref().expect("simulate ran first");
            let traj = ctx.traj.as_ref().expect("simulate ran first");
            let phi = triple.phi_samples(grid)?;
            let auto_center = n0.weighted_mass(grid, |x| phi.eval(x));
            let mut pass = true;
            let mut specs = Map::new();
            let mut seen: BTreeMap<&'static str, usize> = BTreeMap::new();
            for cfg in &scenario.entropy {
                let spec = cfg.resolve(auto_center)?;
                let n = seen.entry(spec.label()).or_insert(0);
                *n += 1;
                let label = if *n == 1 {
                    spec.label().to_string()
                } else {
                    format!("{}_{n}", spec.label())
                };
                let series =
                    entropy_balance_check(traj, triple, gen, &spec, tol.mono_tol_per_step)?;
                io::write_entropy_series(out_dir, &label, &series)?;
                let mut one = Map::new();
                one.insert("center".into(), json!(spec.center));
                one.insert("h0".into(), json!(series.h0));
                one.insert(
                    "h_final".into(),
                    json!(series.rows.last().map(|r| r.h)),
                );
                one.insert("monotone".into(), Value::Bool(series.monotone));
                one.insert("max_defect".into(), json!(series.max_defect));
                let mut ok = series.monotone;
                if spec.differentiable() {
                    let budget = dissipation_budget(traj, triple, gen, &spec)?;
                    let budget_ok = budget.integral <= budget.bound + tol.budget_slack;
                    one.insert("dissipation_integral".into(), json!(budget.integral));
                    one.insert("dissipation_bound".into(), json!(budget.bound));
                    one.insert("budget_ok".into(), Value::Bool(budget_ok));
                    ok &= budget_ok;
                }
                pass &= ok;
                specs.insert(label, Value::Object(one));
            }
            let mut metrics = Map::new();
            metrics.insert("auto_center".into(), json!(auto_center));
            metrics.insert("n_specs".into(), json!(scenario.entropy.len()));
            metrics.insert("specs".into(), Value::Object(specs));
            Ok((pass, metrics))
        }
        Stage::Converge => {
            let study = convergence_study(scenario, &scenario.output.study_levels)?;
            io::write_json(out_dir, "study.json", &study)?;
            let orders_ok = study
                .orders
                .iter()
                .all(|p| *p >= tol.order_min && *p <= tol.order_max);
            let errors: Vec<f64> = study
                .levels
                .iter()
                .map(|l| l.error_vs_reference)
                .collect();
            let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
            let pass = orders_ok && decreasing;
            let mut metrics = Map::new();
            metrics.insert("reference_m".into(), json!(study.reference_m));
            metrics.insert("orders".into(), json!(study.orders));
            metrics.insert("consecutive_diffs".into(), json!(study.consecutive_diffs));
            metrics.insert("errors".into(), json!(errors));
            metrics.insert(
                "weak_residuals".into(),
                json!(study
                    .levels
                    .iter()
                    .map(|l| l.weak_residual)
                    .collect::<Vec<_>>()),
            );
            metrics.insert("orders_ok".into(), Value::Bool(orders_ok));
            metrics.insert("errors_decreasing".into(), Value::Bool(decreasing));
            Ok((pass, metrics))
        }
    }
}

/// Per-level measurements of a refinement study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelReport {
    pub m: usize,
    pub dt: f64,
    pub lambda: f64,
    pub conservation_drift: f64,
    /// Balance defect of the first smooth entropy in the scenario (NaN when
    /// none is requested).
    pub max_balance_defect: f64,
    /// Weak-form residual against a fixed smooth space-time test function.
    pub weak_residual: f64,
    /// L¹ distance of the scaled final density to the restricted reference.
    pub error_vs_reference: f64,
}

/// Refinement study against a reference run at twice the finest level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub levels: Vec<LevelReport>,
    pub reference_m: usize,
    pub reference_lambda: f64,
    /// L¹ differences between consecutive levels (the last entry compares
    /// the finest level against the reference).
    pub consecutive_diffs: Vec<f64>,
    /// Observed convergence orders, from ratios of consecutive differences.
    /// Unlike ratios of errors against one shared reference, these are not
    /// biased when a level approaches the reference resolution.
    pub orders: Vec<f64>,
}

struct LevelData {
    report: LevelReport,
    scaled_final: Vec<f64>,
}

fn run_level(scenario: &Scenario, m: usize) -> Result<LevelData> {
    let tol = scenario.output.tolerances;
    let grid = Grid::new(m, scenario.grid.x_max)?;
    let gen = build_generator(&scenario.coefficients, &grid)?;
    let plan = step_plan(&gen, &scenario.solver)?;
    let opts = SolveOptions {
        tol: tol.eigen_tol,
        max_iter: tol.eigen_max_iter,
        dt: Some(plan.dt),
    };
    let triple = solve_triple(&gen, &opts)?;
    let n0 = scenario.initial_measure(&grid, Some(&triple.n))?;
    let traj = simulate(&n0, &gen, &scenario.solver, Some(&triple))?;
    let cons = conservation_check(&traj, &triple)?;

    let t_end = scenario.solver.t_end;
    let psi = WeakTestFunction::product_bump(
        0.9 * t_end,
        0.15 * scenario.grid.x_max,
        0.75 * scenario.grid.x_max,
    );
    let weak_residual = weak_form_residual(&traj, &gen, &psi)?;

    let phi = triple.phi_samples(&grid)?;
    let auto_center = n0.weighted_mass(&grid, |x| phi.eval(x));
    let mut max_balance_defect = f64::NAN;
    for cfg in &scenario.entropy {
        let spec: EntropySpec = cfg.resolve(auto_center)?;
        if spec.differentiable() {
            let series = entropy_balance_check(&traj, &triple, &gen, &spec, tol.mono_tol_per_step)?;
            max_balance_defect = series.max_defect;
            break;
        }
    }

    let scale = (-triple.lambda * t_end).exp();
    let scaled_final: Vec<f64> = traj
        .final_state()
        .densities
        .iter()
        .map(|d| d * scale)
        .collect();
    Ok(LevelData {
        report: LevelReport {
            m,
            dt: plan.dt,
            lambda: triple.lambda,
            conservation_drift: cons.max_relative_drift,
            max_balance_defect,
            weak_residual,
            error_vs_reference: f64::NAN,
        },
        scaled_final,
    })
}

/// Average blocks of `factor` fine cells down to the coarse grid.
fn restrict(fine: &[f64], factor: usize) -> Vec<f64> {
    fine.chunks_exact(factor)
        .map(|block| block.iter().sum::<f64>() / factor as f64)
        .collect()
}

/// Run the scenario across the given grid sizes plus a doubled reference,
/// and measure self-convergence of the scaled final density.
///
/// The error metric compares cell averages, so it is meaningful for
/// density-dominated data; the conserved drift and the balance defect are
/// recorded per level as well.
pub fn convergence_study(scenario: &Scenario, levels: &[usize]) -> Result<StudyReport> {
    scenario.validate()?;
    if levels.len() < 2 {
        return Err(Error::Study(
            "need at least two refinement levels".into(),
        ));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) || levels[0] < 2 {
        return Err(Error::Study(format!(
            "levels must be strictly increasing grid sizes, got {levels:?}"
        )));
    }
    if levels.windows(2).any(|w| w[1] % w[0] != 0) {
        return Err(Error::Study(format!(
            "each level must divide the next for cell-average comparison, got {levels:?}"
        )));
    }
    let reference_m = 2 * levels.last().unwrap();

    let l1_diff = |coarse: &[f64], fine: &[f64], m: usize| {
        let restricted = restrict(fine, fine.len() / m);
        let dx = scenario.grid.x_max / m as f64;
        coarse
            .iter()
            .zip(&restricted)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * dx
    };

    let reference = run_level(scenario, reference_m)?;
    let mut reports = Vec::with_capacity(levels.len());
    let mut finals = Vec::with_capacity(levels.len());
    for &m in levels {
        let mut data = run_level(scenario, m)?;
        data.report.error_vs_reference = l1_diff(&data.scaled_final, &reference.scaled_final, m);
        reports.push(data.report);
        finals.push(data.scaled_final);
    }
    let mut consecutive_diffs = Vec::with_capacity(levels.len());
    for (k, &m) in levels.iter().enumerate() {
        let next = finals.get(k + 1).unwrap_or(&reference.scaled_final);
        consecutive_diffs.push(l1_diff(&finals[k], next, m));
    }
    let orders = consecutive_diffs
        .windows(2)
        .zip(levels.windows(2))
        .map(|(d, m)| (d[0] / d[1]).ln() / (m[1] as f64 / m[0] as f64).ln())
        .collect();
    Ok(StudyReport {
        levels: reports,
        reference_m,
        reference_lambda: reference.report.lambda,
        consecutive_diffs,
        orders,
    })
}
