//! Discrete direct method: limited-memory quasi-Newton descent over the
//! free (interior) nodes with the boundary datum held fixed on the rest of
//! the closure, Euler-Lagrange residual certification, a direct linear
//! solve for the quadratic energy, and the discrete Poincare constant.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use crate::energy::{eval_energy, eval_energy_gradient, StoredEnergy};
use crate::functions::{ScalarFn, VectorFn};
use crate::grid::{Field, FieldKind, Grid, NodeClass, Support};
use crate::la;
use crate::operators::GradientOperator;
use crate::{Error, Real, Result};

/// A volumetric Dirichlet problem: minimize the stored energy over the
/// interior nodes while the datum stays pinned on core and collar.
pub struct DirichletProblem<R: Real, const N: usize> {
    pub op: Arc<GradientOperator<R, N>>,
    pub energy: StoredEnergy<R>,
    pub datum: Field<R, N>,
}

impl<R: Real, const N: usize> DirichletProblem<R, N> {
    pub fn new(
        op: Arc<GradientOperator<R, N>>,
        energy: StoredEnergy<R>,
        datum: Field<R, N>,
    ) -> Result<Self> {
        if !Arc::ptr_eq(datum.grid(), op.grid()) {
            return Err(Error::GridMismatch);
        }
        if datum.kind() != FieldKind::Vector || datum.support() != Support::AllNodes {
            return Err(Error::ShapeMismatch(
                "boundary datum must be a vector field on all nodes".into(),
            ));
        }
        energy.validate(N)?;
        Ok(Self { op, energy, datum })
    }

    pub fn grid(&self) -> &Arc<Grid<R, N>> {
        self.op.grid()
    }

    /// Free node set: the eroded interior.
    pub fn free(&self) -> &[u32] {
        self.grid().interior_nodes()
    }

    /// Embed free-node values into a full field equal to the datum
    /// elsewhere.
    pub fn embed(&self, x: &[R]) -> Field<R, N> {
        let mut field = self.datum.clone();
        for (k, &node) in self.free().iter().enumerate() {
            let mut v = [R::zero(); N];
            v.copy_from_slice(&x[k * N..(k + 1) * N]);
            field.set_vector(node as usize, v);
        }
        field
    }

    fn restrict(&self, field: &Field<R, N>) -> Vec<R> {
        let mut x = Vec::with_capacity(self.free().len() * N);
        for &node in self.free() {
            x.extend_from_slice(&field.vector_at(node as usize));
        }
        x
    }
}

/// Optimizer knobs: iteration cap, absolute gradient tolerance, quasi-
/// Newton memory, and Wolfe line-search constants.
#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig<R> {
    pub max_iter: usize,
    pub grad_tol: R,
    pub memory: usize,
    pub ls_c1: R,
    pub ls_c2: R,
    pub ls_max_steps: usize,
}

impl<R: Real> Default for OptimizerConfig<R> {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: R::of(1e-8),
            memory: 10,
            ls_c1: R::of(1e-4),
            ls_c2: R::of(0.9),
            ls_max_steps: 40,
        }
    }
}

/// One Euler-Lagrange pairing against a test field.
#[derive(Clone, Debug)]
pub struct ElResidual<R> {
    pub name: String,
    pub pairing: R,
    pub scale: R,
}

/// Minimization outcome.
pub struct SolveReport<R: Real, const N: usize> {
    pub state: Field<R, N>,
    /// Energies of the accepted iterates, starting with the initial one;
    /// strictly nonincreasing.
    pub energy_history: Vec<R>,
    pub final_grad_norm: R,
    pub iterations: usize,
    pub el_residuals: Vec<ElResidual<R>>,
    pub wall_seconds: f64,
    pub converged: bool,
    pub failure: Option<String>,
}

fn flat_norm<R: Real>(v: &[R]) -> R {
    v.iter().map(|x| *x * *x).sum::<R>().sqrt()
}

fn flat_dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// Minimize the problem's energy over the free nodes starting from the
/// datum. Limited-memory quasi-Newton directions with a strong Wolfe line
/// search; steepest descent when the quasi-Newton direction fails the
/// descent test. Termination at an absolute free-gradient norm.
pub fn minimize<R: Real, const N: usize>(
    problem: &DirichletProblem<R, N>,
    config: &OptimizerConfig<R>,
) -> Result<SolveReport<R, N>> {
    let started = Instant::now();
    let free = problem.free();
    let mut x = problem.restrict(&problem.datum);

    let energy_of =
        |x: &[R]| -> Result<R> { eval_energy(&problem.embed(x), &problem.op, &problem.energy) };
    let grad_of = |x: &[R]| -> Result<Vec<R>> {
        let g = eval_energy_gradient(&problem.embed(x), &problem.op, &problem.energy, free)?;
        Ok(g.into_iter().flatten().collect())
    };

    // a non-finite start is a hard error; later non-finite trial points are
    // handled by the line search (barrier variant)
    let mut e = energy_of(&x)?;
    let mut g = grad_of(&x)?;
    let mut history = vec![e];
    let mut memory: VecDeque<(Vec<R>, Vec<R>, R)> = VecDeque::new();
    let mut iterations = 0usize;
    let mut failure = None;

    while iterations < config.max_iter {
        let gnorm = flat_norm(&g);
        if gnorm <= config.grad_tol {
            break;
        }
        let mut d = two_loop(&memory, &g);
        let mut slope = flat_dot(&g, &d);
        let descent_floor = -R::of(1e-14) * gnorm * flat_norm(&d);
        if slope >= descent_floor || slope.is_nan() {
            // not a descent direction: fall back to steepest descent
            memory.clear();
            d = g.iter().map(|v| -*v).collect();
            slope = -gnorm * gnorm;
        }
        match wolfe_search(&energy_of, &grad_of, &x, &d, e, slope, config) {
            Ok((alpha, e_new, g_new)) => {
                let mut s = vec![R::zero(); x.len()];
                let mut yv = vec![R::zero(); x.len()];
                for i in 0..x.len() {
                    s[i] = alpha * d[i];
                    x[i] += s[i];
                    yv[i] = g_new[i] - g[i];
                }
                let ys = flat_dot(&yv, &s);
                if ys > R::of(1e-12) * flat_norm(&yv) * flat_norm(&s) {
                    if memory.len() == config.memory {
                        memory.pop_front();
                    }
                    memory.push_back((s, yv, R::one() / ys));
                }
                e = e_new;
                g = g_new;
                history.push(e);
                iterations += 1;
            }
            Err(msg) => {
                failure = Some(msg);
                break;
            }
        }
    }

    let final_grad_norm = flat_norm(&g);
    let converged = failure.is_none() && final_grad_norm <= config.grad_tol;
    let state = problem.embed(&x);
    let battery = default_el_battery(problem.grid());
    let el_residuals = el_residual(&state, problem, &battery)?;
    Ok(SolveReport {
        state,
        energy_history: history,
        final_grad_norm,
        iterations,
        el_residuals,
        wall_seconds: started.elapsed().as_secs_f64(),
        converged,
        failure,
    })
}

fn two_loop<R: Real>(memory: &VecDeque<(Vec<R>, Vec<R>, R)>, g: &[R]) -> Vec<R> {
    let mut q: Vec<R> = g.iter().map(|v| -*v).collect();
    if memory.is_empty() {
        return q;
    }
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = *rho * flat_dot(s, &q);
        for i in 0..q.len() {
            q[i] -= a * y[i];
        }
        alphas.push(a);
    }
    // initial Hessian scaling from the most recent pair
    let (s_last, y_last, _) = memory.back().unwrap();
    let gamma = flat_dot(s_last, y_last) / flat_dot(y_last, y_last);
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * flat_dot(y, &q);
        for i in 0..q.len() {
            q[i] += (a - b) * s[i];
        }
    }
    q
}

/// Strong Wolfe line search (bracket and zoom). Returns the accepted step
/// with its energy and gradient. Non-finite trial energies are treated as
/// infinitely bad, which backtracks the barrier variant into the feasible
/// region. Near a minimizer the energy decrease per step falls below the
/// floating-point resolution of the energy itself while gradients remain
/// accurate, so a step is also accepted on the derivative-only
/// (approximate Wolfe) conditions provided the energy did not go up.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<R: Real>(
    energy_of: &impl Fn(&[R]) -> Result<R>,
    grad_of: &impl Fn(&[R]) -> Result<Vec<R>>,
    x: &[R],
    d: &[R],
    e0: R,
    slope0: R,
    config: &OptimizerConfig<R>,
) -> std::result::Result<(R, R, Vec<R>), String> {
    let probe = |alpha: R| -> (R, Option<Vec<R>>, R) {
        let xt: Vec<R> = x.iter().zip(d).map(|(xi, di)| *xi + alpha * *di).collect();
        match energy_of(&xt) {
            Ok(e) if e.is_finite() => {
                let g = grad_of(&xt).ok();
                let slope = g.as_ref().map_or(R::infinity(), |g| flat_dot(g, d));
                (e, g, slope)
            }
            _ => (R::infinity(), None, R::infinity()),
        }
    };

    let c1 = config.ls_c1;
    let c2 = config.ls_c2;
    let accepts = |e_a: R, slope_a: R, alpha: R| -> bool {
        if !e_a.is_finite() {
            return false;
        }
        let wolfe = e_a <= e0 + c1 * alpha * slope0 && slope_a.abs() <= -c2 * slope0;
        // Hager-Zhang style approximate Wolfe for the rounding-limited tail
        let approx =
            e_a <= e0 && slope_a >= c2 * slope0 && slope_a <= (R::of(2.0) * c1 - R::one()) * slope0;
        wolfe || approx
    };

    let mut alpha_prev = R::zero();
    let mut e_prev = e0;
    let mut alpha = R::one();
    let mut bracket: Option<(R, R)> = None; // (lo, hi)

    for i in 0..config.ls_max_steps {
        let (e_a, g_a, slope_a) = probe(alpha);
        if accepts(e_a, slope_a, alpha) {
            return Ok((alpha, e_a, g_a.expect("finite point has gradient")));
        }
        if !e_a.is_finite() || e_a > e0 + c1 * alpha * slope0 || (i > 0 && e_a >= e_prev) {
            bracket = Some((alpha_prev, alpha));
            break;
        }
        if slope_a >= R::zero() {
            bracket = Some((alpha, alpha_prev));
            break;
        }
        alpha_prev = alpha;
        e_prev = e_a;
        alpha *= R::of(2.0);
    }

    let (mut lo, mut hi) = match bracket {
        Some(b) => b,
        None => return Err("line search failed to bracket a Wolfe step".into()),
    };
    let mut e_lo = if lo == R::zero() { e0 } else { probe(lo).0 };

    for _ in 0..config.ls_max_steps {
        let mid = (lo + hi) / R::of(2.0);
        let (e_m, g_m, slope_m) = probe(mid);
        if accepts(e_m, slope_m, mid) {
            return Ok((mid, e_m, g_m.expect("finite point has gradient")));
        }
        if !e_m.is_finite() || e_m > e0 + c1 * mid * slope0 || e_m >= e_lo {
            hi = mid;
        } else {
            if slope_m * (hi - lo) >= R::zero() {
                hi = lo;
            }
            lo = mid;
            e_lo = e_m;
        }
        if (hi - lo).abs() < R::of(1e-16) {
            break;
        }
    }
    // last resort: the best sufficient-decrease point without curvature
    if e_lo < e0 && lo > R::zero() {
        let (e_l, g_l, _) = probe(lo);
        if e_l.is_finite() {
            if let Some(g) = g_l {
                return Ok((lo, e_l, g));
            }
        }
    }
    Err("line search failed (no sufficient-decrease step)".into())
}

/// Default Euler-Lagrange test battery: tensor sine bumps supported in the
/// eroded interior, one per frequency and direction.
pub fn default_el_battery<R: Real, const N: usize>(grid: &Arc<Grid<R, N>>) -> Vec<Field<R, N>> {
    let lower = grid.domain.lower;
    let upper = grid.domain.upper;
    let delta = grid.domain.delta;
    let mut lo = lower;
    let mut hi = upper;
    for i in 0..N {
        lo[i] += delta;
        hi[i] -= delta;
    }
    let mut battery = Vec::new();
    for k in 1..=3u32 {
        for dir in 0..N {
            let mut comps: Vec<ScalarFn<R, N>> = Vec::with_capacity(N);
            for i in 0..N {
                if i == dir {
                    comps.push(ScalarFn::TrigBump {
                        k: [k; N],
                        amp: R::one(),
                        lower: lo,
                        upper: hi,
                    });
                } else {
                    comps.push(ScalarFn::Constant(R::zero()));
                }
            }
            let f = VectorFn::Components(Box::new(
                comps.try_into().unwrap_or_else(|_| unreachable!()),
            ));
            let mut field = crate::functions::sample_vector(grid, &f, Support::AllNodes);
            crate::functions::zero_outside_interior(&mut field);
            battery.push(field);
        }
    }
    battery
}

/// Euler-Lagrange pairings `sum_Omega h^n [D_y W . phi + D_F W : D phi]`
/// for every test field in the battery. Test fields must vanish outside
/// the eroded interior.
pub fn el_residual<R: Real, const N: usize>(
    state: &Field<R, N>,
    problem: &DirichletProblem<R, N>,
    battery: &[Field<R, N>],
) -> Result<Vec<ElResidual<R>>> {
    let grid = problem.grid();
    let op = &problem.op;
    let f = op.apply_vector(state)?;
    let hn = grid.cell_volume();
    let mut duals = vec![[[R::zero(); N]; N]; grid.omega_nodes().len()];
    let mut dys = vec![[R::zero(); N]; grid.omega_nodes().len()];
    for (row, &node) in grid.omega_nodes().iter().enumerate() {
        let x = grid.position(node);
        let y = state.vector_at(node as usize);
        let fm = f.matrix_at(row);
        duals[row] = problem.energy.eval_df_w(&x, &y, &fm);
        dys[row] = problem.energy.eval_dy_w(&x, &y, &fm);
    }
    let mut out = Vec::with_capacity(battery.len());
    for (bi, phi) in battery.iter().enumerate() {
        for i in 0..grid.node_count() {
            if grid.class(i as u32) != NodeClass::Interior {
                let v = phi.vector_at(i);
                if v.iter().any(|c| *c != R::zero()) {
                    return Err(Error::SupportViolation(
                        "EL test field must vanish outside the eroded interior".into(),
                    ));
                }
            }
        }
        let gphi = op.apply_vector(phi)?;
        let mut pairing = R::zero();
        for (row, &node) in grid.omega_nodes().iter().enumerate() {
            pairing += hn
                * (la::dot(&dys[row], &phi.vector_at(node as usize))
                    + la::frobenius(&duals[row], &gphi.matrix_at(row)));
        }
        out.push(ElResidual {
            name: format!("el_test_{bi}"),
            pairing,
            scale: flat_norm(phi.data()),
        });
    }
    Ok(out)
}

/// Conjugate-gradient solve of `apply(x) = b` for a symmetric positive
/// definite matrix-free operator.
fn conjugate_gradient<R: Real>(
    apply: &impl Fn(&[R]) -> Vec<R>,
    b: &[R],
    x0: Option<Vec<R>>,
    tol_rel: R,
    max_iter: usize,
) -> Result<Vec<R>> {
    let mut x = x0.unwrap_or_else(|| vec![R::zero(); b.len()]);
    let ax = apply(&x);
    let mut r: Vec<R> = b.iter().zip(&ax).map(|(bi, ai)| *bi - *ai).collect();
    let mut p = r.clone();
    let mut rs = flat_dot(&r, &r);
    let b_norm = flat_norm(b).max(R::of(f64::MIN_POSITIVE));
    for _ in 0..max_iter {
        if rs.sqrt() <= tol_rel * b_norm {
            return Ok(x);
        }
        let ap = apply(&p);
        let alpha = rs / flat_dot(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = flat_dot(&r, &r);
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rs.sqrt() <= tol_rel * b_norm * R::of(10.0) {
        return Ok(x);
    }
    Err(Error::NoConvergence(format!(
        "conjugate gradient stalled at relative residual {}",
        (rs.sqrt() / b_norm)
    )))
}

/// Direct sparse solve of the quadratic problem's normal equations by
/// conjugate gradients; exact cross-check for `minimize`.
pub fn solve_quadratic_direct<R: Real, const N: usize>(
    problem: &DirichletProblem<R, N>,
) -> Result<Field<R, N>> {
    if !matches!(problem.energy, StoredEnergy::Quadratic { .. }) {
        return Err(Error::InvalidParameter(
            "direct solve applies to the quadratic energy only".into(),
        ));
    }
    let free = problem.free();
    let dof = free.len() * N;
    let zero_datum = {
        let mut f = problem.datum.clone();
        for v in f.data_mut() {
            *v = R::zero();
        }
        f
    };
    let embed_zero = |x: &[R]| -> Field<R, N> {
        let mut field = zero_datum.clone();
        for (k, &node) in free.iter().enumerate() {
            let mut v = [R::zero(); N];
            v.copy_from_slice(&x[k * N..(k + 1) * N]);
            field.set_vector(node as usize, v);
        }
        field
    };
    let apply_a = |x: &[R]| -> Vec<R> {
        eval_energy_gradient(&embed_zero(x), &problem.op, &problem.energy, free)
            .expect("quadratic energy is finite")
            .into_iter()
            .flatten()
            .collect()
    };
    // gradient at the datum-only state (free nodes zeroed)
    let c: Vec<R> = eval_energy_gradient(
        &problem.embed(&vec![R::zero(); dof]),
        &problem.op,
        &problem.energy,
        free,
    )?
    .into_iter()
    .flatten()
    .collect();
    let b: Vec<R> = c.iter().map(|v| -*v).collect();
    let x = conjugate_gradient(&apply_a, &b, None, R::of(1e-12), 40 * dof.max(50))?;
    Ok(problem.embed(&x))
}

/// Discrete Poincare constant for p = q = 2: the best `C` with
/// `||u||_{L2(Omega)} <= C ||D u||_{L2(Omega)}` over scalar fields
/// vanishing outside the eroded interior, through the smallest eigenvalue
/// of the free-restricted normal operator by inverse power iteration.
pub fn estimate_poincare<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    tol_rel: R,
    max_outer: usize,
) -> Result<R> {
    let grid = op.grid().clone();
    let free: Vec<u32> = grid.interior_nodes().to_vec();
    if free.is_empty() {
        return Err(Error::InvalidParameter(
            "no interior nodes: the eroded interior is empty".into(),
        ));
    }
    let hn = grid.cell_volume();
    let apply_a = |v: &[R]| -> Vec<R> {
        let mut field = Field::zeros(grid.clone(), FieldKind::Scalar, Support::AllNodes);
        for (k, &node) in free.iter().enumerate() {
            field.set_scalar(node as usize, v[k]);
        }
        let gu = op.apply_scalar(&field).expect("scalar field on own grid");
        let duals: Vec<[R; N]> = (0..gu.len())
            .map(|row| {
                let mut g = gu.vector_at(row);
                for c in g.iter_mut() {
                    *c = hn * *c;
                }
                g
            })
            .collect();
        let adj = op.adjoint_scalar(&duals);
        free.iter().map(|&node| adj[node as usize]).collect()
    };

    let dof = free.len();
    let mut v = vec![R::one() / R::of(dof as f64).sqrt(); dof];
    let mut lambda_prev = R::infinity();
    let mut warm: Option<Vec<R>> = None;
    for _ in 0..max_outer {
        let z = conjugate_gradient(&apply_a, &v, warm.clone(), R::of(1e-10), 200 * dof)?;
        let zn = flat_norm(&z);
        for i in 0..dof {
            v[i] = z[i] / zn;
        }
        warm = Some(z);
        let av = apply_a(&v);
        let lambda = flat_dot(&v, &av);
        if (lambda - lambda_prev).abs() <= tol_rel * lambda.abs() {
            return Ok((hn / lambda).sqrt());
        }
        lambda_prev = lambda;
    }
    Err(Error::NoConvergence(format!(
        "inverse power iteration did not settle within {max_outer} steps"
    )))
}
