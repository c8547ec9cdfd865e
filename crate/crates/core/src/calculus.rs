//! Numerical verification of the exact identities of the nonlocal
//! calculus: duality with its boundary pairing, product rules, the trace
//! identity, the local-nonlocal equivalence through `Q`, the Piola
//! identity, the integration by parts of the determinant, the oscillation
//! surrogate for weak continuity of minors, and the natural norm.
//!
//! Identity integrals over `Omega` use the face-absorbing quadrature
//! weights of the grid; norms and energies keep plain `h^n` cells.

use crate::energy::{cof, det};
use crate::functions::ScalarFn;
use crate::grid::{Field, FieldKind, NodeClass, Support};
use crate::la;
use crate::operators::{ConvolutionOperator, GradientOperator, KVariant};
use crate::{Error, Real, Result};

/// Outcome of one identity check.
#[derive(Clone, Debug)]
pub struct IdentityReport<R> {
    pub name: String,
    pub lhs: Vec<R>,
    pub rhs: Vec<R>,
    pub abs_residual: R,
    pub rel_residual: R,
    pub h: R,
    pub s: R,
    pub delta: R,
}

impl<R: Real> IdentityReport<R> {
    fn new<const N: usize>(
        name: &str,
        op: &GradientOperator<R, N>,
        lhs: Vec<R>,
        rhs: Vec<R>,
        abs: R,
        rel: R,
    ) -> Self {
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            abs_residual: abs,
            rel_residual: rel,
            h: op.grid().h,
            s: op.params().s,
            delta: op.params().delta,
        }
    }
}

fn check_zero_on_collar<R: Real, const N: usize>(phi: &Field<R, N>) -> Result<()> {
    let grid = phi.grid();
    let comps = phi.kind().components(N);
    for &c in grid.collar_nodes() {
        for k in 0..comps {
            if phi.data()[c as usize * comps + k] != R::zero() {
                return Err(Error::SupportViolation(
                    "test function must vanish on the collar".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Duality: `int_Omega D u . phi = -int_Omega u div phi + boundary pairing`.
///
/// The boundary pairing reuses the assembled row weights restricted to
/// collar sources, so all three terms share one quadrature.
pub fn residual_duality<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    u: &Field<R, N>,
    phi: &Field<R, N>,
) -> Result<IdentityReport<R>> {
    check_zero_on_collar(phi)?;
    let grid = op.grid();
    let wq = grid.omega_quad_weights();
    let gu = op.apply_scalar(u)?;
    let div_phi = op.divergence(phi)?;
    let pairing = op.collar_pairing(u)?;

    let mut a = R::zero();
    let mut b = R::zero();
    let mut c = R::zero();
    for (row, &node) in grid.omega_nodes().iter().enumerate() {
        let pv = phi.vector_at(node as usize);
        a += wq[row] * la::dot(&gu.vector_at(row), &pv);
        b -= wq[row] * u.scalar_at(node as usize) * div_phi.scalar_at(row);
        c += wq[row] * la::dot(&pv, &pairing[row]);
    }
    let abs = (a - b - c).abs();
    let scale = a.abs().max(b.abs()).max(c.abs());
    let rel = if scale > R::zero() {
        abs / scale
    } else {
        R::zero()
    };
    Ok(IdentityReport::new(
        "duality",
        op,
        vec![a],
        vec![b, c],
        abs,
        rel,
    ))
}

fn max_norm_report<R: Real, const N: usize>(
    name: &str,
    op: &GradientOperator<R, N>,
    dev: R,
    scale: R,
) -> IdentityReport<R> {
    let rel = if scale > R::zero() {
        dev / scale
    } else {
        R::zero()
    };
    IdentityReport::new(name, op, vec![dev], vec![scale], dev, rel)
}

/// Scalar product rule `D(phi g) = phi D g + K_phi(g)`; exact per sample,
/// so the residual sits at rounding level.
pub fn residual_product_scalar<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    phi: &Field<R, N>,
    g: &Field<R, N>,
) -> Result<IdentityReport<R>> {
    let grid = op.grid();
    let mut prod = g.clone();
    for i in 0..grid.node_count() {
        let v = phi.scalar_at(i) * g.scalar_at(i);
        prod.set_scalar(i, v);
    }
    let d_prod = op.apply_scalar(&prod)?;
    let dg = op.apply_scalar(g)?;
    let k = op.apply_k(phi, g, KVariant::ScalarTimesDirection)?;
    let mut dev = R::zero();
    let mut scale = R::zero();
    for (row, &node) in grid.omega_nodes().iter().enumerate() {
        let pv = phi.scalar_at(node as usize);
        let lhs = d_prod.vector_at(row);
        let d = dg.vector_at(row);
        let kv = k.vector_at(row);
        for i in 0..N {
            dev = dev.max((lhs[i] - pv * d[i] - kv[i]).abs());
            scale = scale
                .max(lhs[i].abs())
                .max((pv * d[i]).abs())
                .max(kv[i].abs());
        }
    }
    Ok(max_norm_report("product_scalar", op, dev, scale))
}

/// Vector product rule `D(phi g) = phi D g + K_phi(g^T)` (outer variant).
pub fn residual_product_vector<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    phi: &Field<R, N>,
    g: &Field<R, N>,
) -> Result<IdentityReport<R>> {
    let grid = op.grid();
    let mut prod = g.clone();
    for i in 0..grid.node_count() {
        let mut v = g.vector_at(i);
        let p = phi.scalar_at(i);
        for c in v.iter_mut() {
            *c *= p;
        }
        prod.set_vector(i, v);
    }
    let d_prod = op.apply_vector(&prod)?;
    let dg = op.apply_vector(g)?;
    let k = op.apply_k(phi, g, KVariant::VectorOuter)?;
    let mut dev = R::zero();
    let mut scale = R::zero();
    for (row, &node) in grid.omega_nodes().iter().enumerate() {
        let pv = phi.scalar_at(node as usize);
        let lhs = d_prod.matrix_at(row);
        let d = dg.matrix_at(row);
        let km = k.matrix_at(row);
        for i in 0..N {
            for j in 0..N {
                dev = dev.max((lhs[i][j] - pv * d[i][j] - km[i][j]).abs());
                scale = scale
                    .max(lhs[i][j].abs())
                    .max((pv * d[i][j]).abs())
                    .max(km[i][j].abs());
            }
        }
    }
    Ok(max_norm_report("product_vector", op, dev, scale))
}

/// Divergence product rule for vector fields:
/// `div(phi g) = phi div g + K_phi(g)` (dot variant).
pub fn residual_product_divergence_vec<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    phi: &Field<R, N>,
    g: &Field<R, N>,
) -> Result<IdentityReport<R>> {
    let grid = op.grid();
    let mut prod = g.clone();
    for i in 0..grid.node_count() {
        let mut v = g.vector_at(i);
        let p = phi.scalar_at(i);
        for c in v.iter_mut() {
            *c *= p;
        }
        prod.set_vector(i, v);
    }
    let d_prod = op.divergence(&prod)?;
    let dg = op.divergence(g)?;
    let k = op.apply_k(phi, g, KVariant::VectorDot)?;
    let mut dev = R::zero();
    let mut scale = R::zero();
    for (row, &node) in grid.omega_nodes().iter().enumerate() {
        let pv = phi.scalar_at(node as usize);
        let r = (d_prod.scalar_at(row) - pv * dg.scalar_at(row) - k.scalar_at(row)).abs();
        dev = dev.max(r);
        scale = scale
            .max(d_prod.scalar_at(row).abs())
            .max((pv * dg.scalar_at(row)).abs())
            .max(k.scalar_at(row).abs());
    }
    Ok(max_norm_report("product_divergence_vec", op, dev, scale))
}

/// Divergence product rule for matrix fields:
/// `div(phi M) = phi div M + K_phi(M)` (matrix variant).
pub fn residual_product_divergence_mat<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    phi: &Field<R, N>,
    m: &Field<R, N>,
) -> Result<IdentityReport<R>> {
    let grid = op.grid();
    let mut prod = m.clone();
    for i in 0..grid.node_count() {
        let mut v = m.matrix_at(i);
        let p = phi.scalar_at(i);
        for r in v.iter_mut() {
            for c in r.iter_mut() {
                *c *= p;
            }
        }
        prod.set_matrix(i, v);
    }
    let d_prod = op.divergence_matrix(&prod)?;
    let dm = op.divergence_matrix(m)?;
    let k = op.apply_k(phi, m, KVariant::MatrixTimesDirection)?;
    let mut dev = R::zero();
    let mut scale = R::zero();
    for (row, &node) in grid.omega_nodes().iter().enumerate() {
        let pv = phi.scalar_at(node as usize);
        let lhs = d_prod.vector_at(row);
        let d = dm.vector_at(row);
        let kv = k.vector_at(row);
        for i in 0..N {
            dev = dev.max((lhs[i] - pv * d[i] - kv[i]).abs());
            scale = scale
                .max(lhs[i].abs())
                .max((pv * d[i]).abs())
                .max(kv[i].abs());
        }
    }
    Ok(max_norm_report("product_divergence_mat", op, dev, scale))
}

/// Trace identity `tr D phi = div phi`, shared weights.
pub fn residual_trace<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    phi: &Field<R, N>,
) -> Result<IdentityReport<R>> {
    let d = op.apply_vector(phi)?;
    let dv = op.divergence(phi)?;
    let mut dev = R::zero();
    let mut scale = R::zero();
    for row in 0..dv.len() {
        let m = d.matrix_at(row);
        let mut tr = R::zero();
        for i in 0..N {
            tr += m[i][i];
        }
        dev = dev.max((tr - dv.scalar_at(row)).abs());
        scale = scale.max(tr.abs()).max(dv.scalar_at(row).abs());
    }
    Ok(max_norm_report("trace_divergence", op, dev, scale))
}

/// K trace identity `tr K_phi(U^T) = K_phi(U)` for vector `U`.
pub fn residual_k_trace<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    phi: &Field<R, N>,
    u: &Field<R, N>,
) -> Result<IdentityReport<R>> {
    let outer = op.apply_k(phi, u, KVariant::VectorOuter)?;
    let dot = op.apply_k(phi, u, KVariant::VectorDot)?;
    let mut dev = R::zero();
    let mut scale = R::zero();
    for row in 0..dot.len() {
        let m = outer.matrix_at(row);
        let mut tr = R::zero();
        for i in 0..N {
            tr += m[i][i];
        }
        dev = dev.max((tr - dot.scalar_at(row)).abs());
        scale = scale.max(tr.abs()).max(dot.scalar_at(row).abs());
    }
    Ok(max_norm_report("k_trace", op, dev, scale))
}

/// Local-nonlocal equivalence: the nonlocal gradient against central
/// finite differences of the convolution, compared at interior nodes.
/// Requires the input to vanish on the outermost layer of the closure.
pub fn residual_gradient_equivalence<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    conv: &ConvolutionOperator<R, N>,
    u: &Field<R, N>,
) -> Result<IdentityReport<R>> {
    let grid = op.grid();
    for i in 0..grid.node_count() {
        if grid.is_outer_layer(i as u32) && u.scalar_at(i) != R::zero() {
            return Err(Error::SupportViolation(
                "input must vanish on the outermost collar layer".into(),
            ));
        }
    }
    let gu = op.apply_scalar(u)?;
    let qu = conv.apply_scalar(u)?;
    let two_h = R::of(2.0) * grid.h;
    let mut dev = R::zero();
    let mut scale = R::zero();
    for row in 0..gu.len() {
        scale = scale.max(la::norm(&gu.vector_at(row)));
    }
    for &t in grid.interior_nodes() {
        let row = grid.omega_pos(t).unwrap() as usize;
        let g = gu.vector_at(row);
        let mut fd = [R::zero(); N];
        for ax in 0..N {
            let p = grid.neighbor(t, ax, 1).unwrap();
            let m = grid.neighbor(t, ax, -1).unwrap();
            let qp = qu.scalar_at(grid.omega_pos(p).unwrap() as usize);
            let qm = qu.scalar_at(grid.omega_pos(m).unwrap() as usize);
            fd[ax] = (qp - qm) / two_h;
        }
        let mut d2 = R::zero();
        for i in 0..N {
            let d = g[i] - fd[i];
            d2 += d * d;
        }
        dev = dev.max(d2.sqrt());
    }
    Ok(max_norm_report("gradient_equivalence", op, dev, scale))
}

/// Piola identity outcomes: the pointwise divergence of the cofactor field
/// and the weak pairing against analytic test gradients.
#[derive(Clone, Debug)]
pub struct PiolaReport<R> {
    pub pointwise: IdentityReport<R>,
    pub weak: IdentityReport<R>,
}

pub fn residual_piola<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    u: &Field<R, N>,
    tests: &[ScalarFn<R, N>],
) -> Result<PiolaReport<R>> {
    let grid = op.grid();
    let f = op.apply_vector(u)?;
    let n_omega = grid.omega_nodes().len();
    let mut cofs = vec![[[R::zero(); N]; N]; n_omega];
    for (row, c) in cofs.iter_mut().enumerate() {
        *c = cof(&f.matrix_at(row));
    }

    // pointwise: central differences of the cofactor rows at interior nodes
    let two_h = R::of(2.0) * grid.h;
    let mut dev = R::zero();
    let mut cof_scale = R::zero();
    for c in &cofs {
        cof_scale = cof_scale.max(la::frobenius_norm(c));
    }
    for &t in grid.interior_nodes() {
        for i in 0..N {
            let mut acc = R::zero();
            for j in 0..N {
                let p = grid.omega_pos(grid.neighbor(t, j, 1).unwrap()).unwrap() as usize;
                let m = grid.omega_pos(grid.neighbor(t, j, -1).unwrap()).unwrap() as usize;
                acc += (cofs[p][i][j] - cofs[m][i][j]) / two_h;
            }
            dev = dev.max(acc.abs());
        }
    }
    let pointwise = max_norm_report("piola_pointwise", op, dev, cof_scale / grid.h);

    // weak: | sum w cof(Du) grad(test) | against its natural scale
    let wq = grid.omega_quad_weights();
    let mut worst_rel = R::zero();
    let mut worst_abs = R::zero();
    let mut worst_scale = R::zero();
    for test in tests {
        let mut acc = [R::zero(); N];
        let mut scale = R::zero();
        for (row, &node) in grid.omega_nodes().iter().enumerate() {
            let gphi = test.grad(&grid.position(node));
            let cg = la::matvec(&cofs[row], &gphi);
            for i in 0..N {
                acc[i] += wq[row] * cg[i];
            }
            scale += wq[row] * la::frobenius_norm(&cofs[row]) * la::norm(&gphi);
        }
        let abs = acc.iter().fold(R::zero(), |m, v| m.max(v.abs()));
        let rel = if scale > R::zero() {
            abs / scale
        } else {
            R::zero()
        };
        if rel >= worst_rel {
            worst_rel = rel;
            worst_abs = abs;
            worst_scale = scale;
        }
    }
    let weak = IdentityReport::new(
        "piola_weak",
        op,
        vec![worst_abs],
        vec![worst_scale],
        worst_abs,
        worst_rel,
    );
    Ok(PiolaReport { pointwise, weak })
}

/// Integration by parts of the determinant:
/// `int det(Du) phi = -(1/n) int (Q*u) . cof(Du) grad(phi)`.
pub fn residual_det_ibp<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    conv: &ConvolutionOperator<R, N>,
    u: &Field<R, N>,
    phi: &ScalarFn<R, N>,
) -> Result<IdentityReport<R>> {
    let grid = op.grid();
    let f = op.apply_vector(u)?;
    let qu = conv.apply_vector(u)?;
    let wq = grid.omega_quad_weights();
    let mut lhs = R::zero();
    let mut rhs = R::zero();
    let n_inv = R::one() / R::of(N as f64);
    for (row, &node) in grid.omega_nodes().iter().enumerate() {
        let x = grid.position(node);
        let m = f.matrix_at(row);
        lhs += wq[row] * det(&m) * phi.eval(&x);
        let cg = la::matvec(&cof(&m), &phi.grad(&x));
        rhs -= wq[row] * n_inv * la::dot(&qu.vector_at(row), &cg);
    }
    let abs = (lhs - rhs).abs();
    let scale = lhs.abs().max(rhs.abs());
    let rel = if scale > R::zero() {
        abs / scale
    } else {
        R::zero()
    };
    Ok(IdentityReport::new(
        "det_ibp",
        op,
        vec![lhs],
        vec![rhs],
        abs,
        rel,
    ))
}

/// One frequency step of the weak-continuity surrogate.
#[derive(Clone, Debug)]
pub struct ProbeReport<R> {
    pub j: u32,
    pub gap_det: R,
    pub gap_cof: R,
    pub gap_first: R,
    /// false when the oscillation is not resolved by the grid (j h > pi)
    pub reliable: bool,
}

/// Oscillation surrogate for weak continuity of the minors: perturb by
/// `(amplitude/j) sin(j x_1) e_1` and pair every minor against a fixed
/// test field.
pub fn weak_continuity_probe<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    u: &Field<R, N>,
    schedule: &[u32],
    phi: &ScalarFn<R, N>,
    amplitude: R,
) -> Result<Vec<ProbeReport<R>>> {
    let grid = op.grid();
    let wq = grid.omega_quad_weights();
    let phi_vals: Vec<R> = grid
        .omega_nodes()
        .iter()
        .map(|&n| phi.eval(&grid.position(n)))
        .collect();

    type Pairings<R, const N: usize> = (R, [[R; N]; N], [[R; N]; N]);
    let pair = |field: &Field<R, N>| -> Result<Pairings<R, N>> {
        let f = op.apply_vector(field)?;
        let mut p_det = R::zero();
        let mut p_cof = [[R::zero(); N]; N];
        let mut p_first = [[R::zero(); N]; N];
        for row in 0..f.len() {
            let m = f.matrix_at(row);
            let c = cof(&m);
            let w = wq[row] * phi_vals[row];
            p_det += w * det(&m);
            for i in 0..N {
                for j in 0..N {
                    p_cof[i][j] += w * c[i][j];
                    p_first[i][j] += w * m[i][j];
                }
            }
        }
        Ok((p_det, p_cof, p_first))
    };

    let (d0, c0, f0) = pair(u)?;
    let mut out = Vec::with_capacity(schedule.len());
    for &j in schedule {
        let mut uj = u.clone();
        let jf = R::of(j as f64);
        for i in 0..grid.node_count() {
            let x = grid.position(i as u32);
            let mut v = uj.vector_at(i);
            v[0] += amplitude * (jf * x[0]).sin() / jf;
            uj.set_vector(i, v);
        }
        let (dj, cj, fj) = pair(&uj)?;
        let mut gap_cof = R::zero();
        let mut gap_first = R::zero();
        for i in 0..N {
            for k in 0..N {
                gap_cof = gap_cof.max((cj[i][k] - c0[i][k]).abs());
                gap_first = gap_first.max((fj[i][k] - f0[i][k]).abs());
            }
        }
        out.push(ProbeReport {
            j,
            gap_det: (dj - d0).abs(),
            gap_cof,
            gap_first,
            reliable: jf * grid.h <= R::PI(),
        });
    }
    Ok(out)
}

/// The natural norm `( ||u||_p^p over the closure + ||D u||_p^p over
/// Omega )^{1/p}`, with plain `h^n` cells.
pub fn hspd_norm<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    u: &Field<R, N>,
    p: R,
) -> Result<R> {
    if p < R::one() {
        return Err(Error::InvalidParameter(format!(
            "norm exponent must be at least 1, got {p}"
        )));
    }
    let grid = op.grid();
    let hn = grid.cell_volume();
    let mut acc = R::zero();
    match u.kind() {
        FieldKind::Scalar => {
            for i in 0..grid.node_count() {
                acc += hn * u.scalar_at(i).abs().powf(p);
            }
            let gu = op.apply_scalar(u)?;
            for row in 0..gu.len() {
                acc += hn * la::norm(&gu.vector_at(row)).powf(p);
            }
        }
        FieldKind::Vector => {
            for i in 0..grid.node_count() {
                acc += hn * la::norm(&u.vector_at(i)).powf(p);
            }
            let gu = op.apply_vector(u)?;
            for row in 0..gu.len() {
                acc += hn * la::frobenius_norm(&gu.matrix_at(row)).powf(p);
            }
        }
        FieldKind::Matrix => {
            return Err(Error::ShapeMismatch(
                "the natural norm applies to scalar or vector fields".into(),
            ));
        }
    }
    Ok(acc.powf(R::one() / p))
}

/// Convenience: does a field vanish at every non-interior node (support
/// inside the eroded interior)?
pub fn supported_in_eroded_interior<R: Real, const N: usize>(u: &Field<R, N>) -> bool {
    let grid = u.grid();
    let comps = u.kind().components(N);
    for i in 0..grid.node_count() {
        if grid.class(i as u32) != NodeClass::Interior {
            for k in 0..comps {
                if u.data()[i * comps + k] != R::zero() {
                    return false;
                }
            }
        }
    }
    true
}

/// Support check used by `residual_duality` callers building fields by
/// hand.
pub fn assert_omega_supported<R: Real, const N: usize>(phi: &Field<R, N>) -> Result<()> {
    if phi.support() != Support::AllNodes {
        return Err(Error::ShapeMismatch("expected an all-nodes field".into()));
    }
    check_zero_on_collar(phi)
}

pub mod battery {
    //! The standard test fields of the identity battery: smooth bump pairs
    //! for duality, a compact bump for the local-nonlocal equivalence, a
    //! perturbed identity map for the determinant identities, and tilted
    //! sine products as scalar test functions. Geometry scales with the
    //! grid's box.

    use std::array::from_fn;
    use std::sync::Arc;

    use crate::functions::{sample_scalar, sample_vector, zero_on_collar, ScalarFn, VectorFn};
    use crate::grid::{Field, Grid, Support};
    use crate::Real;

    fn box_geometry<R: Real, const N: usize>(grid: &Grid<R, N>) -> ([R; N], [R; N], R) {
        let lo = grid.domain.lower;
        let hi = grid.domain.upper;
        let mut min_edge = R::infinity();
        for i in 0..N {
            min_edge = min_edge.min(hi[i] - lo[i]);
        }
        (lo, hi, min_edge)
    }

    fn lerp<R: Real, const N: usize>(lo: &[R; N], hi: &[R; N], t: &[f64; N]) -> [R; N] {
        from_fn(|i| lo[i] + (hi[i] - lo[i]) * R::of(t[i]))
    }

    /// Smooth scalar field and a compactly supported vector test function
    /// for the duality identity (the test function is zeroed on the
    /// collar, where it already vanishes smoothly).
    pub fn duality_fields<R: Real, const N: usize>(
        grid: &Arc<Grid<R, N>>,
    ) -> (Field<R, N>, Field<R, N>) {
        let (lo, hi, min_edge) = box_geometry(grid);
        let u_fn = ScalarFn::TiltedCosine {
            tilt: from_fn(|i| R::of(0.4 - 0.2 * i as f64)),
            wave: from_fn(|i| R::of(2.0 - 3.0 * i as f64 + i as f64 * i as f64)),
            phase: R::zero(),
            amp: R::one(),
        };
        let u = sample_scalar(grid, &u_fn, Support::AllNodes);
        let comps: [ScalarFn<R, N>; N] = from_fn(|i| ScalarFn::PolyBump {
            center: lerp(&lo, &hi, &from_fn(|j| 0.45 + 0.1 * ((i + j) % 2) as f64)),
            radius: R::of(0.44 - 0.02 * i as f64) * min_edge,
            power: 5,
            amp: if i % 2 == 0 { R::one() } else { R::of(-0.6) },
        });
        let mut phi = sample_vector(
            grid,
            &VectorFn::Components(Box::new(comps)),
            Support::AllNodes,
        );
        zero_on_collar(&mut phi);
        (u, phi)
    }

    /// Compact smooth bump vanishing well inside the box, for the
    /// local-nonlocal equivalence check.
    pub fn equivalence_bump<R: Real, const N: usize>(grid: &Arc<Grid<R, N>>) -> Field<R, N> {
        let (lo, hi, min_edge) = box_geometry(grid);
        let f = ScalarFn::PolyBump {
            center: lerp(&lo, &hi, &from_fn(|i| 0.48 + 0.04 * (i % 2) as f64)),
            radius: R::of(0.47) * min_edge,
            power: 5,
            amp: R::one(),
        };
        sample_scalar(grid, &f, Support::AllNodes)
    }

    /// Identity map plus a smooth tilted sine perturbation, the workhorse
    /// deformation for the Piola and determinant identities.
    pub fn perturbed_identity_map<R: Real, const N: usize>(
        grid: &Arc<Grid<R, N>>,
        amp: f64,
    ) -> Field<R, N> {
        let comps: [ScalarFn<R, N>; N] = from_fn(|i| {
            let row: [R; N] = from_fn(|j| if i == j { R::one() } else { R::zero() });
            ScalarFn::Sum(
                Box::new(ScalarFn::Affine {
                    coef: row,
                    offset: R::zero(),
                }),
                Box::new(ScalarFn::TiltedCosine {
                    tilt: from_fn(|j| {
                        R::of(if j == i {
                            0.3 - 0.5 * (i % 2) as f64
                        } else {
                            0.0
                        })
                    }),
                    wave: from_fn(|j| if j == (i + 1) % N { R::PI() } else { R::zero() }),
                    phase: R::of(-0.5) * R::PI(),
                    amp: R::of(amp),
                }),
            )
        });
        sample_vector(
            grid,
            &VectorFn::Components(Box::new(comps)),
            Support::AllNodes,
        )
    }

    /// Scalar test functions vanishing on the box boundary, with analytic
    /// gradients: tilted tensor sine bumps at three frequencies.
    pub fn scalar_test_battery<R: Real, const N: usize>(grid: &Grid<R, N>) -> Vec<ScalarFn<R, N>> {
        let lo = grid.domain.lower;
        let hi = grid.domain.upper;
        (1..=3u32)
            .map(|k| {
                ScalarFn::Product(
                    Box::new(ScalarFn::TrigBump {
                        k: [k; N],
                        amp: R::one(),
                        lower: lo,
                        upper: hi,
                    }),
                    Box::new(ScalarFn::TiltedCosine {
                        tilt: from_fn(|i| R::of(0.5 - 0.4 * i as f64 + 0.1 * k as f64)),
                        wave: [R::zero(); N],
                        phase: R::zero(),
                        amp: R::one(),
                    }),
                )
            })
            .collect()
    }

    /// Test field for the weak-continuity probe: smooth, positive, not
    /// vanishing at the boundary (the pairing sees the sharp oscillation
    /// decay then).
    pub fn probe_test_fn<R: Real, const N: usize>() -> ScalarFn<R, N> {
        ScalarFn::TiltedCosine {
            tilt: from_fn(|i| R::of(0.3 - 0.5 * i as f64)),
            wave: [R::zero(); N],
            phase: R::zero(),
            amp: R::one(),
        }
    }

    /// Random smooth multiplier for the product rules: affine plus a
    /// tensor sine bump with coefficients from the caller's generator.
    pub fn random_smooth_scalar<R: Real, const N: usize>(
        grid: &Grid<R, N>,
        draw: &mut impl FnMut() -> f64,
    ) -> ScalarFn<R, N> {
        let lo = grid.domain.lower;
        let hi = grid.domain.upper;
        let delta = grid.domain.delta;
        let mut lo_pad = lo;
        let mut hi_pad = hi;
        for i in 0..N {
            lo_pad[i] -= delta;
            hi_pad[i] += delta;
        }
        ScalarFn::Sum(
            Box::new(ScalarFn::Affine {
                coef: from_fn(|_| R::of(draw())),
                offset: R::of(draw()),
            }),
            Box::new(ScalarFn::TrigBump {
                k: from_fn(|_| 1 + (draw().abs() * 3.0) as u32),
                amp: R::of(0.5 * draw()),
                lower: lo_pad,
                upper: hi_pad,
            }),
        )
    }
}
