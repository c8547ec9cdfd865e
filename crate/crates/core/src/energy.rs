//! Polyconvex stored-energy functions, cofactor/determinant/minor algebra
//! for 2x2 and 3x3 matrices, and the discrete total energy with its exact
//! nodal gradient.
//!
//! Sign conventions: `cof` satisfies `cof(A) A^T = det(A) I`, so the
//! derivative of the determinant is the cofactor matrix.

use crate::grid::{Field, FieldKind, Support};
use crate::la;
use crate::operators::GradientOperator;
use crate::{Error, Real, Result};

/// Cofactor matrix, hardcoded for n = 2 and n = 3.
pub fn cof<R: Real, const N: usize>(f: &[[R; N]; N]) -> [[R; N]; N] {
    let mut c = [[R::zero(); N]; N];
    match N {
        2 => {
            c[0][0] = f[1][1];
            c[0][1] = -f[1][0];
            c[1][0] = -f[0][1];
            c[1][1] = f[0][0];
        }
        3 => {
            for i in 0..3 {
                for j in 0..3 {
                    let (r0, r1) = other_two(i);
                    let (c0, c1) = other_two(j);
                    let minor = f[r0][c0] * f[r1][c1] - f[r0][c1] * f[r1][c0];
                    c[i][j] = if (i + j) % 2 == 0 { minor } else { -minor };
                }
            }
        }
        _ => unreachable!("only dimensions 2 and 3 are supported"),
    }
    c
}

/// Determinant, hardcoded for n = 2 and n = 3.
pub fn det<R: Real, const N: usize>(f: &[[R; N]; N]) -> R {
    match N {
        2 => f[0][0] * f[1][1] - f[0][1] * f[1][0],
        3 => {
            f[0][0] * (f[1][1] * f[2][2] - f[1][2] * f[2][1])
                - f[0][1] * (f[1][0] * f[2][2] - f[1][2] * f[2][0])
                + f[0][2] * (f[1][0] * f[2][1] - f[1][1] * f[2][0])
        }
        _ => unreachable!("only dimensions 2 and 3 are supported"),
    }
}

fn other_two(i: usize) -> (usize, usize) {
    match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Adjoint of the cofactor derivative: `T(M)` with
/// `<d cof(F)[H], M> = <H, T(M)>`. Linear (constant) for n = 2.
pub fn cof_derivative_adjoint<R: Real, const N: usize>(
    f: &[[R; N]; N],
    m: &[[R; N]; N],
) -> [[R; N]; N] {
    let mut t = [[R::zero(); N]; N];
    match N {
        2 => {
            // cof is linear and self-adjoint in 2d
            t[0][0] = m[1][1];
            t[0][1] = -m[1][0];
            t[1][0] = -m[0][1];
            t[1][1] = m[0][0];
        }
        3 => {
            for i in 0..3 {
                for j in 0..3 {
                    let (r0, r1) = other_two(i);
                    let (c0, c1) = other_two(j);
                    let sign = if (i + j) % 2 == 0 {
                        R::one()
                    } else {
                        -R::one()
                    };
                    let mij = sign * m[i][j];
                    t[r0][c0] += mij * f[r1][c1];
                    t[r1][c1] += mij * f[r0][c0];
                    t[r0][c1] -= mij * f[r1][c0];
                    t[r1][c0] -= mij * f[r0][c1];
                }
            }
        }
        _ => unreachable!("only dimensions 2 and 3 are supported"),
    }
    t
}

/// The minor vector: matrix entries row-major, then (for n = 3) the
/// cofactor entries row-major, then the determinant. For n = 2 the
/// first-order minors are the entries and the single second-order minor
/// is the determinant, giving 5 components; for n = 3 there are 19.
#[derive(Clone, Debug, PartialEq)]
pub struct MinorVector<R> {
    pub data: Vec<R>,
    pub dim: usize,
}

impl<R: Real> MinorVector<R> {
    pub fn from_matrix<const N: usize>(f: &[[R; N]; N]) -> Self {
        let mut data = Vec::with_capacity(if N == 2 { 5 } else { 19 });
        for row in f.iter() {
            data.extend_from_slice(row);
        }
        if N == 3 {
            let c = cof(f);
            for row in c.iter() {
                data.extend_from_slice(row);
            }
        }
        data.push(det(f));
        Self { data, dim: N }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn det_entry(&self) -> R {
        *self.data.last().unwrap()
    }

    /// Frobenius norm of the matrix-entry block.
    pub fn entry_norm(&self) -> R {
        let nn = self.dim * self.dim;
        self.data[..nn].iter().map(|v| *v * *v).sum::<R>().sqrt()
    }

    /// Frobenius norm of the cofactor block (identical to the entry norm
    /// for n = 2, where the rotated entries are the cofactors).
    pub fn cof_norm(&self) -> R {
        let nn = self.dim * self.dim;
        if self.dim == 2 {
            self.entry_norm()
        } else {
            self.data[nn..2 * nn]
                .iter()
                .map(|v| *v * *v)
                .sum::<R>()
                .sqrt()
        }
    }

    /// Determinant reconstructed by first-column cofactor expansion from
    /// the stored blocks (consistency check against `det_entry`).
    pub fn det_by_cofactor_expansion<const N: usize>(&self, f: &[[R; N]; N]) -> R {
        let c = cof(f);
        let mut acc = R::zero();
        for i in 0..N {
            acc += f[i][0] * c[i][0];
        }
        acc
    }
}

/// Regularization floor applied to the Frobenius norms when an exponent
/// below 2 would make the derivative singular at zero.
const NORM_REG_EPS: f64 = 1e-10;

/// The determinant term of the polyconvex energy: a smooth square well or
/// an optional logarithmic barrier confined to positive determinants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DetTerm<R> {
    /// `gamma1 (t - 1)^2`
    Square { gamma1: R },
    /// `gamma1 t^2 - gamma2 ln t`, infinite for `t <= 0`
    Barrier { gamma1: R, gamma2: R },
}

impl<R: Real> DetTerm<R> {
    fn eval(&self, t: R) -> R {
        match self {
            DetTerm::Square { gamma1 } => {
                let d = t - R::one();
                *gamma1 * d * d
            }
            DetTerm::Barrier { gamma1, gamma2 } => {
                if t <= R::zero() {
                    R::infinity()
                } else {
                    *gamma1 * t * t - *gamma2 * t.ln()
                }
            }
        }
    }

    fn deriv(&self, t: R) -> R {
        match self {
            DetTerm::Square { gamma1 } => R::of(2.0) * *gamma1 * (t - R::one()),
            DetTerm::Barrier { gamma1, gamma2 } => {
                if t <= R::zero() {
                    R::infinity()
                } else {
                    R::of(2.0) * *gamma1 * t - *gamma2 / t
                }
            }
        }
    }
}

/// Built-in stored-energy families.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StoredEnergy<R> {
    /// `W(F) = alpha |F|^2`
    Quadratic { alpha: R },
    /// `W(F) = alpha |F|^p + beta |cof F|^q + h(det F)`
    PolyCoercive {
        alpha: R,
        beta: R,
        p: R,
        q: R,
        det_term: DetTerm<R>,
    },
}

impl<R: Real> StoredEnergy<R> {
    pub fn poly_defaults() -> Self {
        StoredEnergy::PolyCoercive {
            alpha: R::one(),
            beta: R::one(),
            p: R::of(2.0),
            q: R::of(2.0),
            det_term: DetTerm::Square { gamma1: R::one() },
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            StoredEnergy::Quadratic { alpha } => {
                if *alpha < R::zero() {
                    return Err(Error::InvalidParameter("alpha must be nonnegative".into()));
                }
            }
            StoredEnergy::PolyCoercive {
                alpha, beta, p, q, ..
            } => {
                if *alpha <= R::zero() || *beta < R::zero() {
                    return Err(Error::InvalidParameter(
                        "poly-coercive energy needs alpha > 0, beta >= 0".into(),
                    ));
                }
                let n = R::of(dim as f64);
                if *p < n - R::one() || *p <= R::one() {
                    return Err(Error::InvalidParameter(
                        "exponent p must satisfy p >= n-1 and p > 1".into(),
                    ));
                }
                if *q < n / (n - R::one()) {
                    return Err(Error::InvalidParameter(
                        "exponent q must satisfy q >= n/(n-1)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Regularized Frobenius norm used when p or q is below 2.
    fn reg_norm<const N: usize>(f: &[[R; N]; N], needs_reg: bool) -> R {
        let n2 = la::frobenius(f, f);
        if needs_reg {
            (n2 + R::of(NORM_REG_EPS * NORM_REG_EPS)).sqrt()
        } else {
            n2.sqrt()
        }
    }

    /// Energy density `W(x, y, F)`. The built-in families have no explicit
    /// dependence on position or deformation value; the arguments are part
    /// of the contract and keep call sites honest about the full signature.
    pub fn eval_w<const N: usize>(&self, _x: &[R; N], _y: &[R; N], f: &[[R; N]; N]) -> R {
        match self {
            StoredEnergy::Quadratic { alpha } => *alpha * la::frobenius(f, f),
            StoredEnergy::PolyCoercive {
                alpha,
                beta,
                p,
                q,
                det_term,
            } => {
                let nf = Self::reg_norm(f, *p < R::of(2.0));
                let c = cof(f);
                let nc = Self::reg_norm(&c, *q < R::of(2.0));
                *alpha * nf.powf(*p) + *beta * nc.powf(*q) + det_term.eval(det(f))
            }
        }
    }

    /// Derivative in the deformation value; identically zero for the
    /// built-in families.
    pub fn eval_dy_w<const N: usize>(&self, _x: &[R; N], _y: &[R; N], _f: &[[R; N]; N]) -> [R; N] {
        [R::zero(); N]
    }

    /// Derivative in the deformation gradient.
    pub fn eval_df_w<const N: usize>(
        &self,
        _x: &[R; N],
        _y: &[R; N],
        f: &[[R; N]; N],
    ) -> [[R; N]; N] {
        match self {
            StoredEnergy::Quadratic { alpha } => {
                let mut out = *f;
                for r in out.iter_mut() {
                    for v in r.iter_mut() {
                        *v *= R::of(2.0) * *alpha;
                    }
                }
                out
            }
            StoredEnergy::PolyCoercive {
                alpha,
                beta,
                p,
                q,
                det_term,
            } => {
                let nf = Self::reg_norm(f, *p < R::of(2.0));
                let c = cof(f);
                let nc = Self::reg_norm(&c, *q < R::of(2.0));
                let mut out = [[R::zero(); N]; N];
                // alpha p |F|^{p-2} F
                let cf = *alpha * *p * nf.powf(*p - R::of(2.0));
                // beta q |cof F|^{q-2} (d cof)^T [cof F]
                let cc = *beta * *q * nc.powf(*q - R::of(2.0));
                let adj = cof_derivative_adjoint(f, &c);
                // h'(det F) cof F
                let cd = det_term.deriv(det(f));
                for i in 0..N {
                    for j in 0..N {
                        out[i][j] = cf * f[i][j] + cc * adj[i][j] + cd * c[i][j];
                    }
                }
                out
            }
        }
    }

    /// The convex function of the minor vector realizing this energy
    /// (polyconvexity witness). For n = 2 the cofactor norm equals the
    /// entry norm, so the same expression works on the 5-component vector.
    pub fn eval_phi_minors(&self, mu: &MinorVector<R>) -> R {
        match self {
            StoredEnergy::Quadratic { alpha } => {
                let e = mu.entry_norm();
                *alpha * e * e
            }
            StoredEnergy::PolyCoercive {
                alpha,
                beta,
                p,
                q,
                det_term,
            } => {
                *alpha * mu.entry_norm().powf(*p)
                    + *beta * mu.cof_norm().powf(*q)
                    + det_term.eval(mu.det_entry())
            }
        }
    }
}

/// Total discrete energy `sum over Omega nodes of h^n W(x, u(x), (D u)(x))`.
pub fn eval_energy<R: Real, const N: usize>(
    u: &Field<R, N>,
    op: &GradientOperator<R, N>,
    w: &StoredEnergy<R>,
) -> Result<R> {
    if u.kind() != FieldKind::Vector || u.support() != Support::AllNodes {
        return Err(Error::ShapeMismatch(
            "energy expects a vector field on all nodes".into(),
        ));
    }
    let grid = op.grid();
    let f = op.apply_vector(u)?;
    let hn = grid.cell_volume();
    let mut acc = R::zero();
    for (row, &node) in grid.omega_nodes().iter().enumerate() {
        let x = grid.position(node);
        let y = u.vector_at(node as usize);
        let val = w.eval_w(&x, &y, &f.matrix_at(row));
        if !val.is_finite() {
            return Err(Error::NonFiniteEnergy {
                node: node as usize,
            });
        }
        acc += hn * val;
    }
    Ok(acc)
}

/// Exact gradient of the discrete energy with respect to the nodal values
/// on the free nodes: the direct `D_y W` term plus the adjoint of the
/// sparse gradient applied to `h^n D_F W`.
pub fn eval_energy_gradient<R: Real, const N: usize>(
    u: &Field<R, N>,
    op: &GradientOperator<R, N>,
    w: &StoredEnergy<R>,
    free: &[u32],
) -> Result<Vec<[R; N]>> {
    if u.kind() != FieldKind::Vector || u.support() != Support::AllNodes {
        return Err(Error::ShapeMismatch(
            "energy expects a vector field on all nodes".into(),
        ));
    }
    let grid = op.grid();
    let f = op.apply_vector(u)?;
    let hn = grid.cell_volume();
    let mut duals = vec![[[R::zero(); N]; N]; grid.omega_nodes().len()];
    for (row, &node) in grid.omega_nodes().iter().enumerate() {
        let x = grid.position(node);
        let y = u.vector_at(node as usize);
        let fm = f.matrix_at(row);
        if !w.eval_w(&x, &y, &fm).is_finite() {
            return Err(Error::NonFiniteEnergy {
                node: node as usize,
            });
        }
        let mut dw = w.eval_df_w(&x, &y, &fm);
        for r in dw.iter_mut() {
            for v in r.iter_mut() {
                *v *= hn;
            }
        }
        duals[row] = dw;
    }
    let adj = op.adjoint_vector(&duals);
    let mut out = Vec::with_capacity(free.len());
    for &node in free {
        let mut g = adj[node as usize];
        if let Some(row) = grid.omega_pos(node) {
            let x = grid.position(node);
            let y = u.vector_at(node as usize);
            let dy = w.eval_dy_w(&x, &y, &f.matrix_at(row as usize));
            for i in 0..N {
                g[i] += hn * dy[i];
            }
        }
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::{sample_vector, VectorFn};
    use crate::grid::BoxDomain;
    use crate::kernels::KernelParams;
    use crate::operators::assemble_gradient;
    use crate::Grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_mat2(rng: &mut ChaCha8Rng) -> [[f64; 2]; 2] {
        std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))
    }

    fn rand_mat3(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
        std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))
    }

    #[test]
    fn cofactor_and_determinant_closed_forms() {
        let f = [[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(cof(&f), [[4.0, -3.0], [-2.0, 1.0]]);
        assert_eq!(det(&f), -2.0);
        let id = [[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cof(&id), id);
        assert_eq!(det(&id), 1.0);
        let mu = MinorVector::from_matrix(&id);
        assert_eq!(mu.data, vec![1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn cofactor_transpose_identity_on_random_matrices() {
        // cof(A) A^T = det(A) I, a thousand times in both dimensions
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let f = rand_mat2(&mut rng);
            let c = cof(&f);
            let d = det(&f);
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..2 {
                        acc += c[i][k] * f[j][k];
                    }
                    let expect = if i == j { d } else { 0.0 };
                    assert!((acc - expect).abs() < 1e-12 * (1.0 + d.abs()));
                }
            }
            let g = rand_mat3(&mut rng);
            let c3 = cof(&g);
            let d3 = det(&g);
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += c3[i][k] * g[j][k];
                    }
                    let expect = if i == j { d3 } else { 0.0 };
                    assert!((acc - expect).abs() < 1e-11 * (1.0 + d3.abs()));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn determinant_is_multiplicative(
            a in proptest::array::uniform4(-3.0f64..3.0),
            b in proptest::array::uniform4(-3.0f64..3.0),
        ) {
            let f = [[a[0], a[1]], [a[2], a[3]]];
            let g = [[b[0], b[1]], [b[2], b[3]]];
            let mut fg = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        fg[i][j] += f[i][k] * g[k][j];
                    }
                }
            }
            let lhs = det(&fg);
            let rhs = det(&f) * det(&g);
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn minor_vector_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let f = rand_mat3(&mut rng);
            let mu = MinorVector::from_matrix(&f);
            assert_eq!(mu.len(), 19);
            let expand = mu.det_by_cofactor_expansion(&f);
            assert!((expand - mu.det_entry()).abs() < 1e-12 * (1.0 + expand.abs()));
            let f2 = rand_mat2(&mut rng);
            let mu2 = MinorVector::from_matrix(&f2);
            assert_eq!(mu2.len(), 5);
            assert!((mu2.det_by_cofactor_expansion(&f2) - mu2.det_entry()).abs() < 1e-13);
        }
    }

    #[test]
    fn cof_derivative_adjoint_matches_finite_differences() {
        // <d cof(F)[H], M> = <H, T(M)>
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-6;
        for _ in 0..100 {
            let f = rand_mat3(&mut rng);
            let h = rand_mat3(&mut rng);
            let m = rand_mat3(&mut rng);
            let mut fp = f;
            let mut fm = f;
            for i in 0..3 {
                for j in 0..3 {
                    fp[i][j] += eps * h[i][j];
                    fm[i][j] -= eps * h[i][j];
                }
            }
            let (cp, cm) = (cof(&fp), cof(&fm));
            let mut lhs = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    lhs += (cp[i][j] - cm[i][j]) / (2.0 * eps) * m[i][j];
                }
            }
            let t = cof_derivative_adjoint(&f, &m);
            let mut rhs = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    rhs += h[i][j] * t[i][j];
                }
            }
            assert!(
                (lhs - rhs).abs() < 1e-7 * (1.0 + rhs.abs()),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn stored_energy_reference_values() {
        let id = [[1.0, 0.0], [0.0, 1.0]];
        let x = [0.0, 0.0];
        let quad = StoredEnergy::Quadratic { alpha: 1.0 };
        assert_eq!(quad.eval_w(&x, &x, &id), 2.0);
        assert_eq!(quad.eval_df_w(&x, &x, &id), [[2.0, 0.0], [0.0, 2.0]]);
        assert_eq!(quad.eval_dy_w(&x, &x, &id), [0.0, 0.0]);
        let poly = StoredEnergy::<f64>::poly_defaults();
        // alpha |I|^2 + beta |cof I|^2 + gamma (det - 1)^2 = 2 + 2 + 0
        assert!((poly.eval_w(&x, &x, &id) - 4.0f64).abs() < 1e-14);
    }

    #[test]
    fn energy_derivative_matches_finite_differences() {
        // directional derivatives across both families, 100 random trials
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = [0.0, 0.0];
        let energies = [
            StoredEnergy::Quadratic { alpha: 0.8 },
            StoredEnergy::poly_defaults(),
            StoredEnergy::PolyCoercive {
                alpha: 1.3,
                beta: 0.5,
                p: 3.0,
                q: 2.0,
                det_term: DetTerm::Square { gamma1: 2.0 },
            },
        ];
        let eps = 1e-5;
        for w in &energies {
            for _ in 0..100 {
                let f = rand_mat2(&mut rng);
                let dir = rand_mat2(&mut rng);
                let mut fp = f;
                let mut fm = f;
                for i in 0..2 {
                    for j in 0..2 {
                        fp[i][j] += eps * dir[i][j];
                        fm[i][j] -= eps * dir[i][j];
                    }
                }
                let fd = (w.eval_w(&x0, &x0, &fp) - w.eval_w(&x0, &x0, &fm)) / (2.0 * eps);
                let dw = w.eval_df_w(&x0, &x0, &f);
                let mut analytic = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        analytic += dw[i][j] * dir[i][j];
                    }
                }
                assert!(
                    (fd - analytic).abs() < 1e-6 * (1.0 + analytic.abs()),
                    "fd {fd} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn barrier_derivative_and_infeasible_region() {
        let x0 = [0.0, 0.0];
        let w = StoredEnergy::<f64>::PolyCoercive {
            alpha: 1.0,
            beta: 0.2,
            p: 2.0,
            q: 2.0,
            det_term: DetTerm::Barrier {
                gamma1: 1.0,
                gamma2: 0.5,
            },
        };
        let flipped = [[-1.0, 0.0], [0.0, 1.0]]; // det < 0
        assert!(w.eval_w(&x0, &x0, &flipped).is_infinite());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = 1e-6;
        for _ in 0..50 {
            // positive-determinant sample
            let mut f = rand_mat2(&mut rng);
            if det(&f) <= 0.1 {
                f[0][0] += 2.0;
                f[1][1] += 2.0;
            }
            let dir = rand_mat2(&mut rng);
            let mut fp = f;
            let mut fm = f;
            for i in 0..2 {
                for j in 0..2 {
                    fp[i][j] += eps * dir[i][j];
                    fm[i][j] -= eps * dir[i][j];
                }
            }
            if det(&fp) <= 0.0 || det(&fm) <= 0.0 {
                continue;
            }
            let fd = (w.eval_w(&x0, &x0, &fp) - w.eval_w(&x0, &x0, &fm)) / (2.0 * eps);
            let dw = w.eval_df_w(&x0, &x0, &f);
            let mut analytic = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    analytic += dw[i][j] * dir[i][j];
                }
            }
            assert!((fd - analytic).abs() < 1e-5 * (1.0 + analytic.abs()));
        }
    }

    #[test]
    fn coercivity_lower_bound() {
        // W >= alpha |F|^p when the other terms are nonnegative
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = StoredEnergy::poly_defaults();
        let x0 = [0.0, 0.0];
        for _ in 0..500 {
            let f = rand_mat2(&mut rng);
            let norm2 = f.iter().flatten().map(|v| v * v).sum::<f64>();
            assert!(w.eval_w(&x0, &x0, &f) >= norm2 - 1e-12);
        }
    }

    #[test]
    fn minor_space_midpoint_convexity() {
        // Phi evaluated on arbitrary minor vectors is midpoint convex
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = StoredEnergy::poly_defaults();
        for _ in 0..1000 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let (ma, mb, mm) = (
                MinorVector { data: a, dim: 2 },
                MinorVector { data: b, dim: 2 },
                MinorVector { data: mid, dim: 2 },
            );
            let lhs = w.eval_phi_minors(&mm);
            let rhs = 0.5 * (w.eval_phi_minors(&ma) + w.eval_phi_minors(&mb));
            assert!(
                lhs <= rhs + 1e-12,
                "midpoint convexity violated: {lhs} > {rhs}"
            );
        }
    }

    fn problem_setup() -> (
        Arc<Grid<f64, 2>>,
        crate::operators::GradientOperator<f64, 2>,
    ) {
        let params = KernelParams::with_defaults(2, 0.5, 0.25).unwrap();
        let grid = Grid::build(
            BoxDomain::new([0.0, 0.0], [1.0, 1.0], 0.25).unwrap(),
            0.25 / 4.0,
        )
        .unwrap();
        let op = assemble_gradient(&grid, &params).unwrap();
        (grid, op)
    }

    #[test]
    fn energy_of_zero_and_scaling() {
        let (grid, op) = problem_setup();
        let w = StoredEnergy::Quadratic { alpha: 1.0 };
        let zero = sample_vector(&grid, &VectorFn::Zero, Support::AllNodes);
        assert_eq!(eval_energy(&zero, &op, &w).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut u = Field::zeros(grid.clone(), FieldKind::Vector, Support::AllNodes);
        for v in u.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let e1 = eval_energy(&u, &op, &w).unwrap();
        let mut u2 = u.clone();
        for v in u2.data_mut() {
            *v *= 2.0;
        }
        let e2 = eval_energy(&u2, &op, &w).unwrap();
        assert!((e2 - 4.0 * e1).abs() < 1e-12 * e1.abs().max(1.0));
    }

    #[test]
    fn energy_of_the_identity_map() {
        // G(x) is close to m I, so the quadratic energy is about 2 m^2 |Omega|
        let (grid, op) = problem_setup();
        let w = StoredEnergy::Quadratic { alpha: 1.0 };
        let id = sample_vector(&grid, &VectorFn::Identity, Support::AllNodes);
        let e = eval_energy(&id, &op, &w).unwrap();
        let m = op.params().affine_factor();
        let quad_volume = grid.cell_volume() * grid.omega_nodes().len() as f64;
        let expect = 2.0 * m * m * quad_volume;
        assert!((e - expect).abs() < 0.05 * expect, "{e} vs {expect}");
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let (grid, op) = problem_setup();
        let free: Vec<u32> = grid.interior_nodes().to_vec();
        for w in [
            StoredEnergy::Quadratic { alpha: 0.7 },
            StoredEnergy::poly_defaults(),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut u = sample_vector(&grid, &VectorFn::Identity, Support::AllNodes);
            for v in u.data_mut() {
                *v += 0.1 * rng.gen_range(-1.0..1.0);
            }
            let g = eval_energy_gradient(&u, &op, &w, &free).unwrap();
            let eps = 1e-6;
            for _ in 0..50 {
                let k = rng.gen_range(0..free.len());
                let c = rng.gen_range(0..2);
                let node = free[k] as usize;
                let mut up = u.clone();
                let mut um = u.clone();
                up.data_mut()[node * 2 + c] += eps;
                um.data_mut()[node * 2 + c] -= eps;
                let fd = (eval_energy(&up, &op, &w).unwrap() - eval_energy(&um, &op, &w).unwrap())
                    / (2.0 * eps);
                let an = g[k][c];
                assert!(
                    (fd - an).abs() < 1e-5 * (1.0 + an.abs()),
                    "node {k} comp {c}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn zero_parameter_energy_has_zero_gradient() {
        let (grid, op) = problem_setup();
        let w = StoredEnergy::Quadratic { alpha: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut u = Field::zeros(grid.clone(), FieldKind::Vector, Support::AllNodes);
        for v in u.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let free: Vec<u32> = grid.interior_nodes().to_vec();
        let g = eval_energy_gradient(&u, &op, &w, &free).unwrap();
        assert!(g.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn non_finite_energy_reports_the_node() {
        let (grid, op) = problem_setup();
        let w = StoredEnergy::PolyCoercive {
            alpha: 1.0,
            beta: 0.0,
            p: 2.0,
            q: 2.0,
            det_term: DetTerm::Barrier {
                gamma1: 1.0,
                gamma2: 1.0,
            },
        };
        // the zero map has det(G u) = 0 everywhere: infeasible for the barrier
        let zero = sample_vector(&grid, &VectorFn::Zero, Support::AllNodes);
        assert!(matches!(
            eval_energy(&zero, &op, &w),
            Err(crate::Error::NonFiniteEnergy { .. })
        ));
    }

    #[test]
    fn validation_rejects_bad_exponents() {
        let bad = StoredEnergy::<f64>::PolyCoercive {
            alpha: 1.0,
            beta: 1.0,
            p: 0.9,
            q: 2.0,
            det_term: DetTerm::Square { gamma1: 1.0 },
        };
        assert!(bad.validate(2).is_err());
        let bad_q = StoredEnergy::PolyCoercive {
            alpha: 1.0,
            beta: 1.0,
            p: 2.0,
            q: 1.2,
            det_term: DetTerm::Square { gamma1: 1.0 },
        };
        assert!(bad_q.validate(2).is_err());
        assert!(StoredEnergy::<f64>::poly_defaults().validate(2).is_ok());
    }
}
