//! Closed-form scalar and vector field descriptors: evaluation, analytic
//! derivatives, and sampling onto grids. These are the building blocks of
//! boundary data and of the test batteries in `calculus` and `solve`.

use std::sync::Arc;

use crate::grid::{Field, FieldKind, Grid, Support};
use crate::Real;

/// Scalar closed forms. `Sum` and `Product` allow small compositions.
#[derive(Clone, Debug)]
pub enum ScalarFn<R, const N: usize> {
    Constant(R),
    /// `coef . x + offset`
    Affine {
        coef: [R; N],
        offset: R,
    },
    /// `amp * prod_i sin(k_i pi (x_i - lo_i) / (hi_i - lo_i))` inside the
    /// box, zero outside.
    TrigBump {
        k: [u32; N],
        amp: R,
        lower: [R; N],
        upper: [R; N],
    },
    /// `amp * (1 - |x-c|^2/R^2)^power` inside the ball, zero outside.
    PolyBump {
        center: [R; N],
        radius: R,
        power: u32,
        amp: R,
    },
    /// `amp * exp(tilt . x) * cos(wave . x + phase)`
    TiltedCosine {
        tilt: [R; N],
        wave: [R; N],
        phase: R,
        amp: R,
    },
    /// `amp * sin(freq * x_axis)`
    SineAxis {
        axis: usize,
        freq: R,
        amp: R,
    },
    /// Radial plateau window: 1 inside `inner`, 0 outside `outer`, smooth
    /// monotone transition in between.
    PlateauWindow {
        center: [R; N],
        inner: R,
        outer: R,
    },
    Sum(Box<ScalarFn<R, N>>, Box<ScalarFn<R, N>>),
    Product(Box<ScalarFn<R, N>>, Box<ScalarFn<R, N>>),
}

impl<R: Real, const N: usize> ScalarFn<R, N> {
    pub fn eval(&self, x: &[R; N]) -> R {
        match self {
            ScalarFn::Constant(c) => *c,
            ScalarFn::Affine { coef, offset } => {
                let mut v = *offset;
                for i in 0..N {
                    v += coef[i] * x[i];
                }
                v
            }
            ScalarFn::TrigBump {
                k,
                amp,
                lower,
                upper,
            } => {
                let mut v = *amp;
                for i in 0..N {
                    if x[i] <= lower[i] || x[i] >= upper[i] {
                        return R::zero();
                    }
                    let t = (x[i] - lower[i]) / (upper[i] - lower[i]);
                    v *= (R::of(k[i] as f64) * R::PI() * t).sin();
                }
                v
            }
            ScalarFn::PolyBump {
                center,
                radius,
                power,
                amp,
            } => {
                let mut r2 = R::zero();
                for i in 0..N {
                    let d = x[i] - center[i];
                    r2 += d * d;
                }
                let t = R::one() - r2 / (*radius * *radius);
                if t <= R::zero() {
                    R::zero()
                } else {
                    *amp * t.powi(*power as i32)
                }
            }
            ScalarFn::TiltedCosine {
                tilt,
                wave,
                phase,
                amp,
            } => {
                let mut e = R::zero();
                let mut w = *phase;
                for i in 0..N {
                    e += tilt[i] * x[i];
                    w += wave[i] * x[i];
                }
                *amp * e.exp() * w.cos()
            }
            ScalarFn::SineAxis { axis, freq, amp } => *amp * (*freq * x[*axis]).sin(),
            ScalarFn::PlateauWindow {
                center,
                inner,
                outer,
            } => {
                let mut r2 = R::zero();
                for i in 0..N {
                    let d = x[i] - center[i];
                    r2 += d * d;
                }
                let r = r2.sqrt();
                if r <= *inner {
                    R::one()
                } else if r >= *outer {
                    R::zero()
                } else {
                    smooth_step((r - *inner) / (*outer - *inner))
                }
            }
            ScalarFn::Sum(a, b) => a.eval(x) + b.eval(x),
            ScalarFn::Product(a, b) => a.eval(x) * b.eval(x),
        }
    }

    /// Analytic gradient.
    pub fn grad(&self, x: &[R; N]) -> [R; N] {
        let mut g = [R::zero(); N];
        match self {
            ScalarFn::Constant(_) => {}
            ScalarFn::Affine { coef, .. } => g = *coef,
            ScalarFn::TrigBump {
                k,
                amp,
                lower,
                upper,
            } => {
                for i in 0..N {
                    if x[i] <= lower[i] || x[i] >= upper[i] {
                        return [R::zero(); N];
                    }
                }
                for d in 0..N {
                    let mut v = *amp;
                    for i in 0..N {
                        let li = upper[i] - lower[i];
                        let arg = R::of(k[i] as f64) * R::PI() * (x[i] - lower[i]) / li;
                        if i == d {
                            v *= R::of(k[i] as f64) * R::PI() / li * arg.cos();
                        } else {
                            v *= arg.sin();
                        }
                    }
                    g[d] = v;
                }
            }
            ScalarFn::PolyBump {
                center,
                radius,
                power,
                amp,
            } => {
                let mut r2 = R::zero();
                for i in 0..N {
                    let d = x[i] - center[i];
                    r2 += d * d;
                }
                let t = R::one() - r2 / (*radius * *radius);
                if t > R::zero() {
                    let p = R::of(*power as f64);
                    let c =
                        -*amp * p * t.powi(*power as i32 - 1) * R::of(2.0) / (*radius * *radius);
                    for i in 0..N {
                        g[i] = c * (x[i] - center[i]);
                    }
                }
            }
            ScalarFn::TiltedCosine {
                tilt,
                wave,
                phase,
                amp,
            } => {
                let mut e = R::zero();
                let mut w = *phase;
                for i in 0..N {
                    e += tilt[i] * x[i];
                    w += wave[i] * x[i];
                }
                let ex = e.exp();
                for i in 0..N {
                    g[i] = *amp * ex * (tilt[i] * w.cos() - wave[i] * w.sin());
                }
            }
            ScalarFn::SineAxis { axis, freq, amp } => {
                g[*axis] = *amp * *freq * (*freq * x[*axis]).cos();
            }
            ScalarFn::PlateauWindow {
                center,
                inner,
                outer,
            } => {
                let mut r2 = R::zero();
                for i in 0..N {
                    let d = x[i] - center[i];
                    r2 += d * d;
                }
                let r = r2.sqrt();
                if r > *inner && r < *outer && r > R::zero() {
                    let c = smooth_step_deriv((r - *inner) / (*outer - *inner)) / (*outer - *inner);
                    for i in 0..N {
                        g[i] = c * (x[i] - center[i]) / r;
                    }
                }
            }
            ScalarFn::Sum(a, b) => {
                let ga = a.grad(x);
                let gb = b.grad(x);
                for i in 0..N {
                    g[i] = ga[i] + gb[i];
                }
            }
            ScalarFn::Product(a, b) => {
                let ga = a.grad(x);
                let gb = b.grad(x);
                let fa = a.eval(x);
                let fb = b.eval(x);
                for i in 0..N {
                    g[i] = ga[i] * fb + fa * gb[i];
                }
            }
        }
        g
    }
}

/// Vector closed forms.
#[derive(Clone, Debug)]
pub enum VectorFn<R, const N: usize> {
    Zero,
    Constant([R; N]),
    /// `A x + b`
    Affine {
        matrix: [[R; N]; N],
        offset: [R; N],
    },
    Identity,
    /// `x + amp (sin(pi x_{i+1 mod N}))_i`
    PerturbedIdentity {
        amp: R,
    },
    Components(Box<[ScalarFn<R, N>; N]>),
}

impl<R: Real, const N: usize> VectorFn<R, N> {
    pub fn eval(&self, x: &[R; N]) -> [R; N] {
        match self {
            VectorFn::Zero => [R::zero(); N],
            VectorFn::Constant(c) => *c,
            VectorFn::Affine { matrix, offset } => {
                let mut v = *offset;
                for i in 0..N {
                    for j in 0..N {
                        v[i] += matrix[i][j] * x[j];
                    }
                }
                v
            }
            VectorFn::Identity => *x,
            VectorFn::PerturbedIdentity { amp } => {
                let mut v = *x;
                for i in 0..N {
                    v[i] += *amp * (R::PI() * x[(i + 1) % N]).sin();
                }
                v
            }
            VectorFn::Components(c) => {
                let mut v = [R::zero(); N];
                for i in 0..N {
                    v[i] = c[i].eval(x);
                }
                v
            }
        }
    }

    /// Analytic Jacobian; row `i` is the gradient of component `i`.
    pub fn jacobian(&self, x: &[R; N]) -> [[R; N]; N] {
        match self {
            VectorFn::Zero | VectorFn::Constant(_) => [[R::zero(); N]; N],
            VectorFn::Affine { matrix, .. } => *matrix,
            VectorFn::Identity => identity_matrix(),
            VectorFn::PerturbedIdentity { amp } => {
                let mut j = identity_matrix();
                for i in 0..N {
                    let a = (i + 1) % N;
                    j[i][a] += *amp * R::PI() * (R::PI() * x[a]).cos();
                }
                j
            }
            VectorFn::Components(c) => {
                let mut j = [[R::zero(); N]; N];
                for i in 0..N {
                    j[i] = c[i].grad(x);
                }
                j
            }
        }
    }
}

pub fn identity_matrix<R: Real, const N: usize>() -> [[R; N]; N] {
    let mut m = [[R::zero(); N]; N];
    for i in 0..N {
        m[i][i] = R::one();
    }
    m
}

/// Sample a scalar closed form at every node of the chosen support.
pub fn sample_scalar<R: Real, const N: usize>(
    grid: &Arc<Grid<R, N>>,
    f: &ScalarFn<R, N>,
    support: Support,
) -> Field<R, N> {
    let mut field = Field::zeros(grid.clone(), FieldKind::Scalar, support);
    match support {
        Support::AllNodes => {
            for i in 0..grid.node_count() {
                field.set_scalar(i, f.eval(&grid.position(i as u32)));
            }
        }
        Support::OmegaNodes => {
            for (pos, &node) in grid.omega_nodes().iter().enumerate() {
                field.set_scalar(pos, f.eval(&grid.position(node)));
            }
        }
    }
    field
}

/// Sample a vector closed form at every node of the chosen support.
pub fn sample_vector<R: Real, const N: usize>(
    grid: &Arc<Grid<R, N>>,
    f: &VectorFn<R, N>,
    support: Support,
) -> Field<R, N> {
    let mut field = Field::zeros(grid.clone(), FieldKind::Vector, support);
    match support {
        Support::AllNodes => {
            for i in 0..grid.node_count() {
                field.set_vector(i, f.eval(&grid.position(i as u32)));
            }
        }
        Support::OmegaNodes => {
            for (pos, &node) in grid.omega_nodes().iter().enumerate() {
                field.set_vector(pos, f.eval(&grid.position(node)));
            }
        }
    }
    field
}

/// Zero out a sampled field on the collar (for test functions supported
/// in `Omega`).
pub fn zero_on_collar<R: Real, const N: usize>(field: &mut Field<R, N>) {
    assert_eq!(field.support(), Support::AllNodes);
    let grid = field.grid().clone();
    let comps = field.kind().components(N);
    for &c in grid.collar_nodes() {
        for k in 0..comps {
            field.data_mut()[c as usize * comps + k] = R::zero();
        }
    }
}

/// Zero out a sampled field outside the eroded interior (for test
/// functions supported in `Omega_{-delta}`).
pub fn zero_outside_interior<R: Real, const N: usize>(field: &mut Field<R, N>) {
    assert_eq!(field.support(), Support::AllNodes);
    let grid = field.grid().clone();
    let comps = field.kind().components(N);
    for i in 0..grid.node_count() {
        if grid.class(i as u32) != crate::grid::NodeClass::Interior {
            for k in 0..comps {
                field.data_mut()[i * comps + k] = R::zero();
            }
        }
    }
}

use crate::kernels::smooth_step;

fn smooth_step_deriv<R: Real>(t: R) -> R {
    if t <= R::zero() || t >= R::one() {
        R::zero()
    } else {
        let one = R::one();
        let a = (-(one / (one - t))).exp();
        let b = (-(one / t)).exp();
        let da = -a / ((one - t) * (one - t));
        let db = b / (t * t);
        (da * b - a * db) / ((a + b) * (a + b))
    }
}
