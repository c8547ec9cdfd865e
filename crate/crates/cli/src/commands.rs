//! The four batch commands: identity suites, energy minimization, the
//! Poincare constant sweep, and crossed parameter sweeps.

use std::array::from_fn;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use nlgrad_core::energy::{DetTerm, StoredEnergy};
use nlgrad_core::functions::{sample_vector, ScalarFn, VectorFn};
use nlgrad_core::grid::{BoxDomain, Grid};
use nlgrad_core::kernels::KernelParams;
use nlgrad_core::operators::{assemble_gradient, load_gradient, save_gradient, GradientOperator};
use nlgrad_core::solve::{estimate_poincare, minimize, DirichletProblem, OptimizerConfig};

use crate::battery::run_battery;
use crate::config::{Config, DatumBlock, EnergyBlock, KernelBlock};
use crate::output::{self, fmt_f64, identities_csv, write_atomic};

pub struct RunContext {
    pub config: Config,
    pub out_dir: PathBuf,
    pub hash: String,
}

#[derive(Debug)]
pub enum RunError {
    Stage(&'static str, String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let RunError::Stage(stage, msg) = self;
        write!(f, "stage `{stage}` failed: {msg}")
    }
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> RunError {
    move |e| RunError::Stage(name, e.to_string())
}

/// Whether every configured tolerance passed (drives the exit status).
pub type AllPass = bool;

pub fn dispatch(ctx: &RunContext) -> Result<AllPass, RunError> {
    match ctx.config.kernel.n {
        2 => run_dim::<2>(ctx),
        3 => run_dim::<3>(ctx),
        _ => unreachable!("validated"),
    }
}

fn to_arr<const N: usize>(v: &[f64]) -> [f64; N] {
    from_fn(|i| v[i])
}

fn h_levels(cfg: &Config) -> Vec<f64> {
    let mut h = if cfg.sweep.h.is_empty() {
        vec![cfg.grid.h]
    } else {
        cfg.sweep.h.clone()
    };
    // coarse to fine
    h.sort_by(|a, b| b.partial_cmp(a).unwrap());
    h
}

fn run_dim<const N: usize>(ctx: &RunContext) -> Result<AllPass, RunError> {
    match ctx.config.command {
        crate::config::CommandKind::Identities => identities::<N>(ctx),
        crate::config::CommandKind::Minimize => minimize_cmd::<N>(ctx),
        crate::config::CommandKind::Poincare => poincare_cmd::<N>(ctx),
        crate::config::CommandKind::Sweep => sweep_cmd::<N>(ctx),
    }
}

fn identities<const N: usize>(ctx: &RunContext) -> Result<AllPass, RunError> {
    let cfg = &ctx.config;
    let levels = h_levels(cfg);
    let report = run_battery::<N>(
        &cfg.kernel,
        to_arr(&cfg.grid.lower),
        to_arr(&cfg.grid.upper),
        &levels,
        cfg.seed,
        cfg.bound_trials,
    )
    .map_err(stage("identities"))?;

    let csv = identities_csv("identities", &ctx.hash, &cfg.kernel, &report.csv_rows());
    write_atomic(&ctx.out_dir.join("identities.csv"), &csv)
        .map_err(stage("write identities.csv"))?;

    // radial profile of Q for plotting, downsampled to ~2k knots
    {
        let params = KernelParams::new(
            N,
            cfg.kernel.s,
            cfg.kernel.delta,
            cfg.kernel.a0,
            cfg.kernel.b0,
        )
        .map_err(stage("kernel"))?;
        let profile = params
            .q_profile(nlgrad_core::kernels::Q_PROFILE_DEFAULT_RESOLUTION)
            .map_err(stage("profile"))?;
        let stride = (profile.radii.len() / 2048).max(1);
        let mut pcsv = output::header_comment("identities", &ctx.hash, &cfg.kernel);
        pcsv.push_str("radius,value\n");
        for (i, (r, v)) in profile.rows().enumerate() {
            if i % stride == 0 || i + 1 == profile.radii.len() {
                pcsv.push_str(&format!("{},{}\n", fmt_f64(r), fmt_f64(v)));
            }
        }
        write_atomic(&ctx.out_dir.join("q_profile.csv"), &pcsv)
            .map_err(stage("write q_profile.csv"))?;
    }
    let summary = battery_summary(ctx, std::slice::from_ref(&report));
    write_atomic(
        &ctx.out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).unwrap(),
    )
    .map_err(stage("write summary.json"))?;
    Ok(report.all_pass())
}

fn battery_summary(
    ctx: &RunContext,
    reports: &[crate::battery::BatteryReport],
) -> serde_json::Value {
    json!({
        "command": ctx.config.command.name(),
        "config_sha256": ctx.hash,
        "seed": ctx.config.seed,
        "all_pass": reports.iter().all(|r| r.all_pass()),
        "points": reports.iter().map(|r| json!({
            "s": r.s,
            "delta": r.delta,
            "identities": r.outcomes.iter().map(|o| json!({
                "name": o.name,
                "tolerance": o.tolerance,
                "pass": o.pass,
                "rows": o.rows.iter().map(|(h, abs, rel)| json!({
                    "h": h, "abs_residual": abs, "rel_residual": rel,
                })).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    })
}

fn datum_fn<const N: usize>(datum: &DatumBlock) -> VectorFn<f64, N> {
    match datum {
        DatumBlock::Zero => VectorFn::Zero,
        DatumBlock::Identity => VectorFn::Identity,
        DatumBlock::Affine {
            matrix,
            offset,
            amp,
        } => {
            let mat: [[f64; N]; N] = from_fn(|i| from_fn(|j| matrix[i][j]));
            if *amp == 0.0 {
                VectorFn::Affine {
                    matrix: mat,
                    offset: to_arr(offset),
                }
            } else {
                // A x + b + amp (sin(pi x_{i+1 mod N}))_i
                let comps: [ScalarFn<f64, N>; N] = from_fn(|i| {
                    ScalarFn::Sum(
                        Box::new(ScalarFn::Affine {
                            coef: mat[i],
                            offset: offset[i],
                        }),
                        Box::new(ScalarFn::TiltedCosine {
                            tilt: [0.0; N],
                            wave: from_fn(|j| {
                                if j == (i + 1) % N {
                                    std::f64::consts::PI
                                } else {
                                    0.0
                                }
                            }),
                            phase: -0.5 * std::f64::consts::PI,
                            amp: *amp,
                        }),
                    )
                });
                VectorFn::Components(Box::new(comps))
            }
        }
    }
}

fn energy_of(block: &EnergyBlock) -> StoredEnergy<f64> {
    match block {
        EnergyBlock::Quadratic { alpha } => StoredEnergy::Quadratic { alpha: *alpha },
        EnergyBlock::PolyCoercive {
            alpha,
            beta,
            gamma1,
            p,
            q,
            barrier_gamma2,
        } => StoredEnergy::PolyCoercive {
            alpha: *alpha,
            beta: *beta,
            p: *p,
            q: *q,
            det_term: match barrier_gamma2 {
                Some(g2) => DetTerm::Barrier {
                    gamma1: *gamma1,
                    gamma2: *g2,
                },
                None => DetTerm::Square { gamma1: *gamma1 },
            },
        },
    }
}

/// Assemble the gradient operator, consulting the on-disk cache when one
/// is configured. A cache hit rebuilds the grid deterministically from
/// the dump header, so callers must take the grid from the returned
/// operator.
fn gradient_operator<const N: usize>(
    cache_dir: &Option<String>,
    lower: [f64; N],
    upper: [f64; N],
    h: f64,
    params: &KernelParams<f64>,
) -> Result<GradientOperator<f64, N>, nlgrad_core::Error> {
    let key_src = format!(
        "grad n={N} s={} delta={} a0={} b0={} h={} lo={lower:?} hi={upper:?}",
        fmt_f64(params.s),
        fmt_f64(params.delta),
        fmt_f64(params.a0),
        fmt_f64(params.b0),
        fmt_f64(h),
    );
    let path = cache_dir
        .as_ref()
        .map(|d| Path::new(d).join(format!("{}.nlop", output::config_hash(&key_src))));
    if let Some(p) = &path {
        if let Ok(file) = fs::File::open(p) {
            if let Ok(op) = load_gradient::<f64, N>(std::io::BufReader::new(file)) {
                if op.params() == params
                    && op.grid().h == h
                    && op.grid().domain.lower == lower
                    && op.grid().domain.upper == upper
                {
                    return Ok(op);
                }
            }
        }
    }
    let grid = Grid::build(BoxDomain::new(lower, upper, params.delta)?, h)?;
    let op = assemble_gradient(&grid, params)?;
    if let Some(p) = &path {
        if let Some(parent) = p.parent() {
            let _ = fs::create_dir_all(parent);
        }
        if let Ok(file) = fs::File::create(p) {
            let _ = save_gradient(&op, std::io::BufWriter::new(file));
        }
    }
    Ok(op)
}

fn minimize_cmd<const N: usize>(ctx: &RunContext) -> Result<AllPass, RunError> {
    let cfg = &ctx.config;
    let kernel = &cfg.kernel;
    let params = KernelParams::new(N, kernel.s, kernel.delta, kernel.a0, kernel.b0)
        .map_err(stage("kernel"))?;
    let op = Arc::new(
        gradient_operator(
            &cfg.operator_cache,
            to_arr::<N>(&cfg.grid.lower),
            to_arr::<N>(&cfg.grid.upper),
            cfg.grid.h,
            &params,
        )
        .map_err(stage("assembly"))?,
    );
    let grid = op.grid().clone();
    let datum_desc = datum_fn::<N>(cfg.datum.as_ref().expect("validated"));
    let datum = sample_vector(&grid, &datum_desc, nlgrad_core::grid::Support::AllNodes);
    let energy = energy_of(cfg.energy.as_ref().expect("validated"));
    let problem =
        DirichletProblem::new(op, energy, datum.clone()).map_err(stage("problem setup"))?;
    let opt = OptimizerConfig {
        max_iter: cfg.optimizer.max_iter,
        grad_tol: cfg.optimizer.grad_tol,
        memory: cfg.optimizer.memory,
        ls_c1: cfg.optimizer.ls_c1,
        ls_c2: cfg.optimizer.ls_c2,
        ls_max_steps: cfg.optimizer.ls_max_steps,
    };
    let report = minimize(&problem, &opt).map_err(stage("minimize"))?;

    // per-node state dump with the deviation from the datum
    let mut csv = output::header_comment("minimize", &ctx.hash, kernel);
    let mut cols = String::from("index");
    for i in 0..N {
        cols.push_str(&format!(",x{}", i + 1));
    }
    cols.push_str(",class");
    for i in 0..N {
        cols.push_str(&format!(",v{}", i + 1));
    }
    cols.push_str(",deviation\n");
    csv.push_str(&cols);
    let mut deviation_max = 0.0f64;
    for i in 0..grid.node_count() {
        let x = grid.position(i as u32);
        let v = report.state.vector_at(i);
        let d = datum.vector_at(i);
        let dev = (0..N).fold(0.0f64, |a, k| a.max((v[k] - d[k]).abs()));
        deviation_max = deviation_max.max(dev);
        let class = match grid.class(i as u32) {
            nlgrad_core::grid::NodeClass::Interior => "interior",
            nlgrad_core::grid::NodeClass::Core => "core",
            nlgrad_core::grid::NodeClass::Collar => "collar",
        };
        csv.push_str(&format!("{i}"));
        for xv in &x {
            csv.push_str(&format!(",{}", fmt_f64(*xv)));
        }
        csv.push_str(&format!(",{class}"));
        for vv in &v {
            csv.push_str(&format!(",{}", fmt_f64(*vv)));
        }
        csv.push_str(&format!(",{}\n", fmt_f64(dev)));
    }
    write_atomic(&ctx.out_dir.join("state.csv"), &csv).map_err(stage("write state.csv"))?;

    // direct-solve cross check for the quadratic energy
    let direct_gap = if matches!(problem.energy, StoredEnergy::Quadratic { .. }) {
        let direct =
            nlgrad_core::solve::solve_quadratic_direct(&problem).map_err(stage("direct solve"))?;
        let e_it = nlgrad_core::energy::eval_energy(&report.state, &problem.op, &problem.energy)
            .map_err(stage("energy"))?;
        let e_di = nlgrad_core::energy::eval_energy(&direct, &problem.op, &problem.energy)
            .map_err(stage("energy"))?;
        Some((e_it - e_di).abs() / e_di.abs().max(f64::MIN_POSITIVE))
    } else {
        None
    };

    let final_energy = *report.energy_history.last().unwrap();
    let doc = json!({
        "command": "minimize",
        "config_sha256": ctx.hash,
        "converged": report.converged,
        "failure": report.failure,
        "iterations": report.iterations,
        "final_energy": final_energy,
        "final_grad_norm": report.final_grad_norm,
        "datum_deviation_max": deviation_max,
        "energy_history": report.energy_history,
        "el_residuals": report.el_residuals.iter().map(|e| json!({
            "name": e.name, "pairing": e.pairing, "scale": e.scale,
        })).collect::<Vec<_>>(),
        "direct_energy_rel_gap": direct_gap,
        "wall_seconds": report.wall_seconds,
    });
    write_atomic(
        &ctx.out_dir.join("solve_report.json"),
        &serde_json::to_string_pretty(&doc).unwrap(),
    )
    .map_err(stage("write solve_report.json"))?;
    Ok(report.converged)
}

fn poincare_cmd<const N: usize>(ctx: &RunContext) -> Result<AllPass, RunError> {
    let cfg = &ctx.config;
    let s_axis = if cfg.sweep.s.is_empty() {
        vec![cfg.kernel.s]
    } else {
        cfg.sweep.s.clone()
    };
    let d_axis = if cfg.sweep.delta.is_empty() {
        vec![cfg.kernel.delta]
    } else {
        cfg.sweep.delta.clone()
    };
    let h_axis = h_levels(cfg);

    let mut csv = output::header_comment("poincare", &ctx.hash, &cfg.kernel);
    csv.push_str("n,s,delta,h,constant\n");
    let mut ok = true;
    for &s in &s_axis {
        for &delta in &d_axis {
            for &h in &h_axis {
                let params = KernelParams::new(N, s, delta, cfg.kernel.a0, cfg.kernel.b0)
                    .map_err(stage("kernel"))?;
                let op = gradient_operator(
                    &cfg.operator_cache,
                    to_arr::<N>(&cfg.grid.lower),
                    to_arr::<N>(&cfg.grid.upper),
                    h,
                    &params,
                )
                .map_err(stage("assembly"))?;
                match estimate_poincare(&op, 1e-6, 10_000) {
                    Ok(c) => {
                        csv.push_str(&format!(
                            "{N},{},{},{},{}\n",
                            fmt_f64(s),
                            fmt_f64(delta),
                            fmt_f64(h),
                            fmt_f64(c)
                        ));
                        if !(c.is_finite() && c > 0.0) {
                            ok = false;
                        }
                    }
                    Err(e) => return Err(RunError::Stage("poincare estimate", e.to_string())),
                }
            }
        }
    }
    write_atomic(&ctx.out_dir.join("poincare.csv"), &csv).map_err(stage("write poincare.csv"))?;
    Ok(ok)
}

fn sweep_cmd<const N: usize>(ctx: &RunContext) -> Result<AllPass, RunError> {
    let cfg = &ctx.config;
    let s_axis = if cfg.sweep.s.is_empty() {
        vec![cfg.kernel.s]
    } else {
        cfg.sweep.s.clone()
    };
    let d_axis = if cfg.sweep.delta.is_empty() {
        vec![cfg.kernel.delta]
    } else {
        cfg.sweep.delta.clone()
    };
    let levels = h_levels(cfg);

    let points: Vec<(f64, f64)> = s_axis
        .iter()
        .flat_map(|&s| d_axis.iter().map(move |&d| (s, d)))
        .collect();

    // points run concurrently; outputs are gathered and written in the
    // deterministic point order afterwards
    use rayon::prelude::*;
    let results: Vec<Result<crate::battery::BatteryReport, nlgrad_core::Error>> = points
        .par_iter()
        .map(|&(s, delta)| {
            let kernel = KernelBlock {
                s,
                delta,
                ..cfg.kernel
            };
            run_battery::<N>(
                &kernel,
                to_arr(&cfg.grid.lower),
                to_arr(&cfg.grid.upper),
                &levels,
                cfg.seed,
                cfg.bound_trials,
            )
        })
        .collect();

    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        reports.push(r.map_err(stage("sweep point"))?);
    }

    // per-point artifacts plus the aggregate, written last
    let mut aggregate_rows = Vec::new();
    for report in &reports {
        let rows = report.csv_rows();
        let point_csv = identities_csv("sweep", &ctx.hash, &cfg.kernel, &rows);
        let name = format!("identities_s{}_delta{}.csv", report.s, report.delta);
        write_atomic(&ctx.out_dir.join(name), &point_csv).map_err(stage("write sweep point"))?;
        aggregate_rows.extend(rows);
    }
    let csv = identities_csv("sweep", &ctx.hash, &cfg.kernel, &aggregate_rows);
    write_atomic(&ctx.out_dir.join("sweep.csv"), &csv).map_err(stage("write sweep.csv"))?;
    let summary = battery_summary(ctx, &reports);
    write_atomic(
        &ctx.out_dir.join("sweep_summary.json"),
        &serde_json::to_string_pretty(&summary).unwrap(),
    )
    .map_err(stage("write sweep_summary.json"))?;
    Ok(reports.iter().all(|r| r.all_pass()))
}
