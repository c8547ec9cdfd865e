//! The identity battery behind `identities` and `sweep`: every exact and
//! quadrature identity with its pinned tolerance, evaluated over a list of
//! refinement levels.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlgrad_core::calculus::{self, battery as fields};
use nlgrad_core::functions::{sample_scalar, sample_vector, ScalarFn, VectorFn};
use nlgrad_core::grid::{BoxDomain, Field, FieldKind, Grid, Support};
use nlgrad_core::kernels::{KernelParams, Q_PROFILE_DEFAULT_RESOLUTION};
use nlgrad_core::operators::{
    assemble_convolution, assemble_gradient, ConvolutionOperator, GradientOperator, KVariant,
};

use crate::config::KernelBlock;
use crate::output::IdentityRow;

/// Outcome of one identity over the refinement levels.
pub struct IdentityOutcome {
    pub name: String,
    pub rows: Vec<(f64, f64, f64)>, // (h, abs, rel)
    pub tolerance: String,
    pub pass: bool,
}

pub struct BatteryReport {
    pub outcomes: Vec<IdentityOutcome>,
    pub s: f64,
    pub delta: f64,
}

impl BatteryReport {
    pub fn all_pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.pass)
    }

    pub fn csv_rows(&self) -> Vec<IdentityRow> {
        let mut rows = Vec::new();
        for o in &self.outcomes {
            for &(h, abs, rel) in &o.rows {
                rows.push(IdentityRow {
                    identity: o.name.clone(),
                    h,
                    s: self.s,
                    delta: self.delta,
                    abs_residual: abs,
                    rel_residual: rel,
                });
            }
        }
        rows
    }
}

/// Pass rule for refining residuals: finest level under `tol`; across
/// consecutive levels that actually halve the spacing, the residual must
/// shrink by at least the `ratio` factor (the ratio law is calibrated to
/// halvings; other refinement steps are only held to the tolerance).
fn refining_pass(rows: &[(f64, f64, f64)], tol: f64, ratio: f64) -> bool {
    let last = rows.last().map(|r| r.2).unwrap_or(f64::INFINITY);
    if last > tol {
        return false;
    }
    rows.windows(2).all(|w| !is_halving(w[0].0, w[1].0) || w[1].2 <= ratio * w[0].2)
}

fn is_halving(h_coarse: f64, h_fine: f64) -> bool {
    (h_fine - 0.5 * h_coarse).abs() <= 0.01 * h_coarse
}

fn every_level_pass(rows: &[(f64, f64, f64)], tol: f64) -> bool {
    rows.iter().all(|r| r.2 <= tol)
}

fn random_field<const N: usize>(
    grid: &Arc<Grid<f64, N>>,
    kind: FieldKind,
    rng: &mut ChaCha8Rng,
) -> Field<f64, N> {
    let mut f = Field::zeros(grid.clone(), kind, Support::AllNodes);
    for v in f.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    f
}

/// Run the full battery for one kernel over the provided spacings
/// (coarse to fine). `seed` fixes the random inputs; `trials` sizes the
/// operator-bound sample.
pub fn run_battery<const N: usize>(
    kernel: &KernelBlock,
    lower: [f64; N],
    upper: [f64; N],
    h_levels: &[f64],
    seed: u64,
    trials: usize,
) -> Result<BatteryReport, nlgrad_core::Error> {
    let params = KernelParams::new(N, kernel.s, kernel.delta, kernel.a0, kernel.b0)?;
    let profile = params.q_profile(Q_PROFILE_DEFAULT_RESOLUTION)?;
    let m = params.affine_factor();

    struct Level<const N: usize> {
        h: f64,
        grid: Arc<Grid<f64, N>>,
        op: GradientOperator<f64, N>,
        conv: ConvolutionOperator<f64, N>,
    }
    let mut levels = Vec::new();
    for &h in h_levels {
        let grid = Grid::build(BoxDomain::new(lower, upper, kernel.delta)?, h)?;
        let op = assemble_gradient(&grid, &params)?;
        let conv = assemble_convolution(&grid, &params, &profile)?;
        levels.push(Level { h, grid, op, conv });
    }

    let mut outcomes: Vec<IdentityOutcome> = Vec::new();
    let mut push = |name: &str, rows: Vec<(f64, f64, f64)>, tolerance: String, pass: bool| {
        outcomes.push(IdentityOutcome {
            name: name.into(),
            rows,
            tolerance,
            pass,
        });
    };

    // kernel-level identities (h-independent; reported at the first level)
    let h0 = h_levels[0];
    {
        let expect = m;
        let rel = (profile.mass() - expect).abs() / expect;
        push(
            "q_mass_identity",
            vec![(h0, (profile.mass() - expect).abs(), rel)],
            "rel <= 1e-8".into(),
            rel <= 1e-8,
        );
        let nu = params.nu();
        let mut worst = 0.0f64;
        for i in 1..profile.radii.len() - 1 {
            let r = profile.radii[i];
            if params.cutoff(r) < 0.1 {
                continue;
            }
            let expect = -nu * params.rho(r)? / r;
            worst = worst.max((profile.fd_slope(i) - expect).abs() / expect.abs());
        }
        push(
            "q_slope_relation",
            vec![(h0, worst, worst)],
            "rel <= 1e-6".into(),
            worst <= 1e-6,
        );
    }

    // per-level identities
    let mut rows_const = Vec::new();
    let mut rows_affine = Vec::new();
    let mut rows_trace = Vec::new();
    let mut rows_ps = Vec::new();
    let mut rows_pv = Vec::new();
    let mut rows_pdv = Vec::new();
    let mut rows_pdm = Vec::new();
    let mut rows_ktr = Vec::new();
    let mut rows_conv = Vec::new();
    let mut rows_dual = Vec::new();
    let mut rows_eqv = Vec::new();
    let mut rows_piola = Vec::new();
    let mut rows_piola_aff = Vec::new();
    let mut rows_ibp = Vec::new();

    for level in &levels {
        let grid = &level.grid;
        let op = &level.op;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);

        // constant annihilation
        let c = sample_scalar(grid, &ScalarFn::Constant(1.0), Support::AllNodes);
        let gc = op.apply_scalar(&c)?;
        let dev = gc.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        rows_const.push((level.h, dev, dev / m));

        // affine battery
        let b: [f64; N] = std::array::from_fn(|i| 0.7 - i as f64);
        let u = sample_scalar(
            grid,
            &ScalarFn::Affine {
                coef: b,
                offset: 0.1,
            },
            Support::AllNodes,
        );
        let gu = op.apply_scalar(&u)?;
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut worst = 0.0f64;
        for row in 0..gu.len() {
            let g = gu.vector_at(row);
            let mut d2 = 0.0;
            for i in 0..N {
                d2 += (g[i] - m * b[i]).powi(2);
            }
            worst = worst.max(d2.sqrt() / (m * bnorm));
        }
        rows_affine.push((level.h, worst * m * bnorm, worst));

        // trace and product rules on random data
        let v = random_field(grid, FieldKind::Vector, &mut rng);
        let tr = calculus::residual_trace(op, &v)?;
        rows_trace.push((level.h, tr.abs_residual, tr.rel_residual));

        let mut draw = || rng.gen_range(-1.0f64..1.0);
        let phi_fn = fields::random_smooth_scalar(grid, &mut draw);
        let phi = sample_scalar(grid, &phi_fn, Support::AllNodes);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let g_s = random_field(grid, FieldKind::Scalar, &mut rng2);
        let g_v = random_field(grid, FieldKind::Vector, &mut rng2);
        let g_m = random_field(grid, FieldKind::Matrix, &mut rng2);
        let r = calculus::residual_product_scalar(op, &phi, &g_s)?;
        rows_ps.push((level.h, r.abs_residual, r.rel_residual));
        let r = calculus::residual_product_vector(op, &phi, &g_v)?;
        rows_pv.push((level.h, r.abs_residual, r.rel_residual));
        let r = calculus::residual_product_divergence_vec(op, &phi, &g_v)?;
        rows_pdv.push((level.h, r.abs_residual, r.rel_residual));
        let r = calculus::residual_product_divergence_mat(op, &phi, &g_m)?;
        rows_pdm.push((level.h, r.abs_residual, r.rel_residual));
        let r = calculus::residual_k_trace(op, &phi, &g_v)?;
        rows_ktr.push((level.h, r.abs_residual, r.rel_residual));

        // convolution mass
        let ones = sample_scalar(grid, &ScalarFn::Constant(1.0), Support::AllNodes);
        let mass = level.conv.apply_scalar(&ones)?;
        let expect = profile.mass();
        let mut worst = 0.0f64;
        for row in 0..mass.len() {
            worst = worst.max((mass.scalar_at(row) - expect).abs() / expect);
        }
        rows_conv.push((level.h, worst * expect, worst));

        // duality
        let (ud, phid) = fields::duality_fields(grid);
        let r = calculus::residual_duality(op, &ud, &phid)?;
        rows_dual.push((level.h, r.abs_residual, r.rel_residual));

        // gradient equivalence
        let bump = fields::equivalence_bump(grid);
        let r = calculus::residual_gradient_equivalence(op, &level.conv, &bump)?;
        rows_eqv.push((level.h, r.abs_residual, r.rel_residual));

        // piola (smooth and affine)
        let pid = fields::perturbed_identity_map(grid, 0.1);
        let tests = fields::scalar_test_battery(grid.as_ref());
        let rp = calculus::residual_piola(op, &pid, &tests)?;
        rows_piola.push((level.h, rp.weak.abs_residual, rp.weak.rel_residual));
        let aff = sample_vector(
            grid,
            &VectorFn::Affine {
                matrix: std::array::from_fn(|i| {
                    std::array::from_fn(|j| if i == j { 1.0 + 0.1 * i as f64 } else { 0.2 })
                }),
                offset: [0.0; N],
            },
            Support::AllNodes,
        );
        let ra = calculus::residual_piola(op, &aff, &tests)?;
        rows_piola_aff.push((
            level.h,
            ra.pointwise.abs_residual,
            ra.pointwise.rel_residual,
        ));

        // determinant integration by parts
        let r = calculus::residual_det_ibp(op, &level.conv, &pid, &tests[0])?;
        rows_ibp.push((level.h, r.abs_residual, r.rel_residual));
    }

    let multi = levels.len() > 1;
    push(
        "constant_annihilation",
        rows_const.clone(),
        "rel <= 1e-14".into(),
        every_level_pass(&rows_const, 1e-14),
    );
    push(
        "affine_gradient",
        rows_affine.clone(),
        "rel(finest) <= 0.02; ratio <= 0.7".into(),
        if multi {
            refining_pass(&rows_affine, 0.02, 0.7)
        } else {
            every_level_pass(&rows_affine, 0.02)
        },
    );
    for (name, rows) in [
        ("trace_divergence", &rows_trace),
        ("product_scalar", &rows_ps),
        ("product_vector", &rows_pv),
        ("product_divergence_vec", &rows_pdv),
        ("product_divergence_mat", &rows_pdm),
        ("k_trace", &rows_ktr),
    ] {
        push(
            name,
            rows.clone(),
            "rel <= 1e-12".into(),
            every_level_pass(rows, 1e-12),
        );
    }
    push(
        "convolution_mass",
        rows_conv.clone(),
        "rel <= 0.01".into(),
        every_level_pass(&rows_conv, 0.01),
    );
    push(
        "duality",
        rows_dual.clone(),
        "rel(finest) <= 0.02; ratio <= 0.7".into(),
        if multi {
            refining_pass(&rows_dual, 0.02, 0.7)
        } else {
            every_level_pass(&rows_dual, 0.02)
        },
    );
    push(
        "gradient_equivalence",
        rows_eqv.clone(),
        "rel(finest) <= 0.05; decreasing per halving".into(),
        rows_eqv.last().map(|r| r.2).unwrap_or(1.0) <= 0.05
            && rows_eqv
                .windows(2)
                .all(|w| !is_halving(w[0].0, w[1].0) || w[1].2 < w[0].2),
    );
    push(
        "piola_weak",
        rows_piola.clone(),
        "rel(finest) <= 0.02; ratio <= 0.7".into(),
        if multi {
            refining_pass(&rows_piola, 0.02, 0.7)
        } else {
            every_level_pass(&rows_piola, 0.02)
        },
    );
    push(
        "piola_affine_pointwise",
        rows_piola_aff.clone(),
        "rel <= 1e-12".into(),
        every_level_pass(&rows_piola_aff, 1e-12),
    );
    push(
        "det_integration_by_parts",
        rows_ibp.clone(),
        "rel(finest) <= 0.02; ratio <= 0.7".into(),
        if multi {
            refining_pass(&rows_ibp, 0.02, 0.7)
        } else {
            every_level_pass(&rows_ibp, 0.02)
        },
    );

    // operator bounds at the coarsest level (cheapest assembly)
    {
        let level = &levels[0];
        let grid = &level.grid;
        let hn = grid.cell_volume();
        let bound_const = (N as f64 - 1.0 + kernel.s) * params.rho_l1_norm();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b0);
        let mut worst_k = 0.0f64;
        let mut worst_g = 0.0f64;
        for _ in 0..trials {
            let mut draw = || rng.gen_range(-1.0f64..1.0);
            let phi_fn = fields::random_smooth_scalar(grid, &mut draw);
            let phi = sample_scalar(grid, &phi_fn, Support::AllNodes);
            let lip = (0..grid.node_count())
                .map(|i| {
                    let g = phi_fn.grad(&grid.position(i as u32));
                    g.iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .fold(0.0f64, f64::max);
            let mut rng2 = ChaCha8Rng::seed_from_u64(rng.gen());
            let u = random_field(grid, FieldKind::Scalar, &mut rng2);
            let k = level.op.apply_k(&phi, &u, KVariant::ScalarTimesDirection)?;
            let lhs = (k.data().iter().map(|v| v * v).sum::<f64>() * hn).sqrt();
            let rhs = bound_const * lip * (u.data().iter().map(|v| v * v).sum::<f64>() * hn).sqrt();
            worst_k = worst_k.max(lhs / rhs);

            let mut draw = || rng.gen_range(-1.0f64..1.0);
            let u_fn = fields::random_smooth_scalar(grid, &mut draw);
            let us = sample_scalar(grid, &u_fn, Support::AllNodes);
            let gu = level.op.apply_scalar(&us)?;
            let lhs = (gu.data().iter().map(|v| v * v).sum::<f64>() * hn).sqrt();
            let du2: f64 = (0..grid.node_count())
                .map(|i| {
                    let g = u_fn.grad(&grid.position(i as u32));
                    g.iter().map(|v| v * v).sum::<f64>()
                })
                .sum();
            let rhs = bound_const * (du2 * hn).sqrt();
            worst_g = worst_g.max(lhs / rhs);
        }
        push(
            "k_operator_bound",
            vec![(levels[0].h, worst_k, worst_k)],
            "ratio <= 1.05".into(),
            worst_k <= 1.05,
        );
        push(
            "gradient_bound",
            vec![(levels[0].h, worst_g, worst_g)],
            "ratio <= 1.05".into(),
            worst_g <= 1.05,
        );
    }

    // weak-continuity probe at the finest level
    {
        let level = levels.last().unwrap();
        let u = sample_vector(
            &level.grid,
            &VectorFn::PerturbedIdentity { amp: 0.05 },
            Support::AllNodes,
        );
        let phi = fields::probe_test_fn::<f64, N>();
        let schedule = [2u32, 4, 8, 16, 32];
        let reports = calculus::weak_continuity_probe(&level.op, &u, &schedule, &phi, 1.0)?;
        let init_det = reports[0].gap_det.max(f64::MIN_POSITIVE);
        let init_first = reports[0].gap_first.max(f64::MIN_POSITIVE);
        let det_rows: Vec<(f64, f64, f64)> = reports
            .iter()
            .map(|r| (level.h, r.gap_det, r.gap_det / init_det))
            .collect();
        let first_rows: Vec<(f64, f64, f64)> = reports
            .iter()
            .map(|r| (level.h, r.gap_first, r.gap_first / init_first))
            .collect();
        let reliable: Vec<&calculus::ProbeReport<f64>> =
            reports.iter().filter(|r| r.reliable).collect();
        // strict monotonicity and the -1 slope model apply inside the
        // kernel's low-attenuation window (the oscillatory pairing can
        // genuinely wiggle with j outside it); gate on j_max * delta
        let calibrated = schedule.last().copied().unwrap_or(0) as f64 * kernel.delta <= 2.01;
        let monotone = !calibrated
            || reliable
                .windows(2)
                .all(|w| w[1].gap_det <= w[0].gap_det && w[1].gap_cof <= w[0].gap_cof);
        let final_ok = reliable
            .last()
            .map(|r| r.gap_det <= 0.1 * reports[0].gap_det && r.gap_cof <= 0.1 * reports[0].gap_cof)
            .unwrap_or(false);
        let slope_gated = calibrated;
        let mut slope_ok = true;
        let mut slope = 0.0;
        if slope_gated {
            let (mut sx, mut sy, mut sxx, mut sxy) = (0.0f64, 0.0, 0.0, 0.0);
            for r in &reports {
                let (x, y) = ((r.j as f64).ln(), r.gap_first.ln());
                sx += x;
                sy += y;
                sxx += x * x;
                sxy += x * y;
            }
            let nr = reports.len() as f64;
            slope = (nr * sxy - sx * sy) / (nr * sxx - sx * sx);
            slope_ok = (slope + 1.0).abs() <= 0.3;
        }
        push(
            "weak_continuity_det",
            det_rows,
            if calibrated {
                "monotone; final <= 0.1 initial".into()
            } else {
                "final <= 0.1 initial (monotonicity gated: j_max * delta > 2)".to_string()
            },
            monotone && final_ok,
        );
        push(
            "weak_continuity_first_order",
            first_rows,
            if slope_gated {
                format!("log-log slope -1 +/- 0.3 (measured {slope:.2})")
            } else {
                "slope check skipped (j_max * delta > 2)".into()
            },
            slope_ok,
        );
    }

    Ok(BatteryReport {
        outcomes,
        s: kernel.s,
        delta: kernel.delta,
    })
}
