//! Discrete realizations of the nonlocal gradient/divergence, the
//! convolution with `Q`, and the product-rule operator `K` as sparse
//! stencils on a uniform grid.
//!
//! Discretization: every target node in `Omega` sees the same set of far
//! lattice offsets (midpoint rule per cell, difference form, so constants
//! are annihilated exactly). Cells within a small Chebyshev block around
//! the target are covered by an exact radial/corner integral of the kernel
//! paired with central differences, plus a fourth-difference term that
//! restores damping of grid-frequency oscillation the symmetric stencil
//! cannot see. Assembly is parallel over target rows; application is a
//! read-only sparse product.

use std::io::{Read as IoRead, Write as IoWrite};
use std::sync::Arc;

use rayon::prelude::*;

use crate::grid::{BoxDomain, Field, FieldKind, Grid, NodeClass, Support};
use crate::kernels::{sphere_area, KernelParams, RadialProfile};
use crate::la;
use crate::{Error, Real, Result};

/// Chebyshev radius (in cells) of the near-field block.
pub const NEAR_BLOCK_RADIUS: i64 = 2;
/// Fourth-difference stabilizer strength relative to `c_near / h`.
pub const STABILIZER_FRACTION: f64 = 0.05;
/// Subcell refinement per axis for the block corner integrals.
const BLOCK_SUBCELL_2D: usize = 16;
const BLOCK_SUBCELL_3D: usize = 8;

/// The four variants of the product-rule operator `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KVariant {
    /// scalar input, vector output
    ScalarTimesDirection,
    /// matrix input, vector output (matrix times direction)
    MatrixTimesDirection,
    /// vector input, scalar output (dot with direction)
    VectorDot,
    /// vector input, matrix output (outer with direction)
    VectorOuter,
}

/// Sparse nonlocal gradient/divergence operator.
///
/// All rows share the far-offset table; per row only the source indices
/// differ. Near-field data: `c_near` multiplies central differences,
/// `s4` the fourth difference along each axis.
#[derive(Debug)]
pub struct GradientOperator<R, const N: usize> {
    grid: Arc<Grid<R, N>>,
    params: KernelParams<R>,
    offsets: Vec<[i64; N]>,
    weights: Vec<[R; N]>,
    /// row-major `[targets x offsets]`
    srcs: Vec<u32>,
    /// row-major `[targets x N x 4]`, order per axis: +1, -1, +2, -2
    nbr: Vec<u32>,
    c_near: R,
    s4: R,
}

/// Sparse convolution operator with the radial kernel `Q`.
#[derive(Debug)]
pub struct ConvolutionOperator<R, const N: usize> {
    grid: Arc<Grid<R, N>>,
    params: KernelParams<R>,
    offsets: Vec<[i64; N]>,
    weights: Vec<R>,
    srcs: Vec<u32>,
    near_mass: R,
}

/// Either operator kind behind one handle.
#[derive(Debug)]
pub enum NonlocalOperator<R, const N: usize> {
    Gradient(GradientOperator<R, N>),
    Convolution(ConvolutionOperator<R, N>),
}

impl<R: Real, const N: usize> NonlocalOperator<R, N> {
    pub fn kind(&self) -> &'static str {
        match self {
            NonlocalOperator::Gradient(_) => "gradient",
            NonlocalOperator::Convolution(_) => "convolution",
        }
    }

    pub fn as_gradient(&self) -> Result<&GradientOperator<R, N>> {
        match self {
            NonlocalOperator::Gradient(g) => Ok(g),
            NonlocalOperator::Convolution(_) => Err(Error::KindMismatch {
                expected: "gradient",
                found: "convolution",
            }),
        }
    }

    pub fn as_convolution(&self) -> Result<&ConvolutionOperator<R, N>> {
        match self {
            NonlocalOperator::Convolution(c) => Ok(c),
            NonlocalOperator::Gradient(_) => Err(Error::KindMismatch {
                expected: "convolution",
                found: "gradient",
            }),
        }
    }
}

/// Far offsets shared by every row: cells beyond the near block whose
/// midpoint lies inside the horizon ball (the cut-off vanishes smoothly at
/// the horizon, so skipping zero-weight cells loses nothing).
fn far_offsets<R: Real, const N: usize>(params: &KernelParams<R>, h: R) -> Vec<[i64; N]> {
    let reach = (params.delta / h).to_f64().unwrap().ceil() as i64 + 1;
    let mut offsets = Vec::new();
    let mut o = [-reach; N];
    'outer: loop {
        let cheb = o.iter().map(|v| v.abs()).max().unwrap();
        if cheb > NEAR_BLOCK_RADIUS {
            let r2: f64 = o.iter().map(|&v| (v * v) as f64).sum();
            let r = h * R::of(r2.sqrt());
            if r < params.delta && params.cutoff(r) > R::zero() {
                offsets.push(o);
            }
        }
        for i in (0..N).rev() {
            o[i] += 1;
            if o[i] <= reach {
                continue 'outer;
            }
            o[i] = -reach;
        }
        break;
    }
    offsets
}

/// `int over the near block of w(|z|) |z|^{-(n-1+s)} dz` and, when a
/// profile is given, the same block integral of `Q`.
fn block_integrals<R: Real, const N: usize>(
    params: &KernelParams<R>,
    profile: Option<&RadialProfile<R>>,
    h: R,
) -> (R, R) {
    let r_in = (R::of(NEAR_BLOCK_RADIUS as f64) + R::of(0.5)) * h;
    let sigma = sphere_area::<R>(N);
    // radial part over the inscribed ball
    let mut b_rho = sigma * params.cutoff_power_integral(R::zero(), r_in, -params.s);
    let mut b_q = profile.map_or(R::zero(), |q| q.near_ball_mass(params, r_in));
    // corner part by subcell midpoints
    let sub = if N == 2 {
        BLOCK_SUBCELL_2D
    } else {
        BLOCK_SUBCELL_3D
    };
    let cells_per_axis = (2 * NEAR_BLOCK_RADIUS + 1) as usize;
    let steps = cells_per_axis * sub;
    let hs = h / R::of(sub as f64);
    let vol = (0..N).fold(R::one(), |v, _| v * hs);
    let start = -(R::of(cells_per_axis as f64) / R::of(2.0)) * h + hs / R::of(2.0);
    let nu = params.nu();
    let mut idx = [0usize; N];
    'outer: loop {
        let mut r2 = R::zero();
        for i in 0..N {
            let z = start + hs * R::of(idx[i] as f64);
            r2 += z * z;
        }
        let r = r2.sqrt();
        if r > r_in {
            let w = params.cutoff(r);
            if w > R::zero() {
                b_rho += w * r.powf(-nu) * vol;
            }
            if let Some(q) = profile {
                b_q += q.eval(r) * vol;
            }
        }
        for i in (0..N).rev() {
            idx[i] += 1;
            if idx[i] < steps {
                continue 'outer;
            }
            idx[i] = 0;
        }
        break;
    }
    (b_rho, b_q)
}

fn neighbor_table<R: Real, const N: usize>(grid: &Grid<R, N>, targets: &[u32]) -> Vec<u32> {
    targets
        .par_iter()
        .map(|&t| {
            let mut row = [0u32; 64]; // N*4 <= 12
            for ax in 0..N {
                for (slot, step) in [(0usize, 1i64), (1, -1), (2, 2), (3, -2)] {
                    row[ax * 4 + slot] = grid
                        .neighbor(t, ax, step)
                        .expect("near-block neighbors exist for every Omega node");
                }
            }
            row
        })
        .flat_map_iter(|row| row.into_iter().take(N * 4).collect::<Vec<_>>())
        .collect()
}

/// Assemble the nonlocal gradient operator for a grid/kernel pair.
pub fn assemble_gradient<R: Real, const N: usize>(
    grid: &Arc<Grid<R, N>>,
    params: &KernelParams<R>,
) -> Result<GradientOperator<R, N>> {
    if params.dim != N {
        return Err(Error::InvalidParameter(format!(
            "kernel dimension {} does not match grid dimension {N}",
            params.dim
        )));
    }
    if (params.delta - grid.domain.delta).abs() > params.delta * R::of(1e-12) {
        return Err(Error::InvalidParameter(
            "kernel horizon does not match grid horizon".into(),
        ));
    }
    let h = grid.h;
    let offsets = far_offsets::<R, N>(params, h);
    let cns = params.cns();
    let hn = grid.cell_volume();
    let exponent = R::of(N as f64) + R::one() + params.s;
    let weights: Vec<[R; N]> = offsets
        .iter()
        .map(|o| {
            let mut d = [R::zero(); N];
            let mut r2 = R::zero();
            for i in 0..N {
                d[i] = -h * R::of(o[i] as f64);
                r2 += d[i] * d[i];
            }
            let r = r2.sqrt();
            let c = cns * hn * params.cutoff(r) / r.powf(exponent);
            let mut w = [R::zero(); N];
            for i in 0..N {
                w[i] = c * d[i];
            }
            w
        })
        .collect();

    let targets = grid.omega_nodes();
    let noffs = offsets.len();
    let srcs: Vec<u32> = targets
        .par_iter()
        .map(|&t| {
            let k = grid.lattice_coords(t);
            let mut row = Vec::with_capacity(noffs);
            for o in &offsets {
                let mut ky = k;
                for i in 0..N {
                    ky[i] += o[i];
                }
                row.push(
                    grid.node_at(&ky)
                        .expect("horizon ball sources exist for every Omega node"),
                );
            }
            row
        })
        .flatten()
        .collect();
    let nbr = neighbor_table(grid, targets);

    let (b_rho, _) = block_integrals::<R, N>(params, None, h);
    let c_near = cns / R::of(N as f64) * b_rho;
    let s4 = R::of(STABILIZER_FRACTION) * c_near / h;

    Ok(GradientOperator {
        grid: grid.clone(),
        params: *params,
        offsets,
        weights,
        srcs,
        nbr,
        c_near,
        s4,
    })
}

/// Assemble the convolution operator with a tabulated `Q` profile.
pub fn assemble_convolution<R: Real, const N: usize>(
    grid: &Arc<Grid<R, N>>,
    params: &KernelParams<R>,
    profile: &RadialProfile<R>,
) -> Result<ConvolutionOperator<R, N>> {
    if params.dim != N || profile.dim != N {
        return Err(Error::InvalidParameter(
            "profile/kernel dimension does not match grid dimension".into(),
        ));
    }
    if (profile.delta - grid.domain.delta).abs() > profile.delta * R::of(1e-12) {
        return Err(Error::InvalidParameter(
            "profile horizon does not match grid horizon".into(),
        ));
    }
    let h = grid.h;
    let offsets = far_offsets::<R, N>(params, h);
    let hn = grid.cell_volume();
    let weights: Vec<R> = offsets
        .iter()
        .map(|o| {
            let r2: f64 = o.iter().map(|&v| (v * v) as f64).sum();
            hn * profile.eval(h * R::of(r2.sqrt()))
        })
        .collect();
    let targets = grid.omega_nodes();
    let srcs: Vec<u32> = targets
        .par_iter()
        .map(|&t| {
            let k = grid.lattice_coords(t);
            let mut row = Vec::with_capacity(offsets.len());
            for o in &offsets {
                let mut ky = k;
                for i in 0..N {
                    ky[i] += o[i];
                }
                row.push(grid.node_at(&ky).expect("sources exist"));
            }
            row
        })
        .flatten()
        .collect();
    let (_, b_q) = block_integrals::<R, N>(params, Some(profile), h);
    Ok(ConvolutionOperator {
        grid: grid.clone(),
        params: *params,
        offsets,
        weights,
        srcs,
        near_mass: b_q,
    })
}

impl<R: Real, const N: usize> GradientOperator<R, N> {
    pub fn grid(&self) -> &Arc<Grid<R, N>> {
        &self.grid
    }

    pub fn params(&self) -> &KernelParams<R> {
        &self.params
    }

    pub fn c_near(&self) -> R {
        self.c_near
    }

    pub fn s4(&self) -> R {
        self.s4
    }

    pub fn offsets(&self) -> &[[i64; N]] {
        &self.offsets
    }

    pub fn far_weights(&self) -> &[[R; N]] {
        &self.weights
    }

    fn n_targets(&self) -> usize {
        self.grid.omega_nodes().len()
    }

    fn row_srcs(&self, row: usize) -> &[u32] {
        let n = self.offsets.len();
        &self.srcs[row * n..(row + 1) * n]
    }

    fn row_nbr(&self, row: usize, axis: usize) -> [u32; 4] {
        let base = row * N * 4 + axis * 4;
        [
            self.nbr[base],
            self.nbr[base + 1],
            self.nbr[base + 2],
            self.nbr[base + 3],
        ]
    }

    fn check_input(&self, u: &Field<R, N>, kind: FieldKind) -> Result<()> {
        if !Arc::ptr_eq(u.grid(), &self.grid) {
            return Err(Error::GridMismatch);
        }
        if u.kind() != kind {
            return Err(Error::ShapeMismatch(format!(
                "expected {:?} input field, got {:?}",
                kind,
                u.kind()
            )));
        }
        if u.support() != Support::AllNodes {
            return Err(Error::ShapeMismatch(
                "operator inputs live on all nodes of the closure".into(),
            ));
        }
        Ok(())
    }

    /// Gradient row for one target, reading values through `get`.
    #[inline]
    fn row_gradient(&self, row: usize, target: u32, get: &impl Fn(u32) -> R) -> [R; N] {
        let ut = get(target);
        let mut out = [R::zero(); N];
        for (j, src) in self.row_srcs(row).iter().enumerate() {
            let diff = ut - get(*src);
            let w = &self.weights[j];
            for i in 0..N {
                out[i] += w[i] * diff;
            }
        }
        let two_h = R::of(2.0) * self.grid.h;
        let four = R::of(4.0);
        for ax in 0..N {
            let [p1, m1, p2, m2] = self.row_nbr(row, ax);
            let (up1, um1, up2, um2) = (get(p1), get(m1), get(p2), get(m2));
            out[ax] += self.c_near * (up1 - um1) / two_h;
            out[ax] += self.s4 * ((up2 - ut) - four * (up1 - ut) - four * (um1 - ut) + (um2 - ut));
        }
        out
    }

    /// Nonlocal gradient of a scalar field: vector field on the `Omega`
    /// nodes. Applying to a constant field yields exact zeros.
    pub fn apply_scalar(&self, u: &Field<R, N>) -> Result<Field<R, N>> {
        self.check_input(u, FieldKind::Scalar)?;
        let data = u.data();
        let rows: Vec<[R; N]> = self
            .grid
            .omega_nodes()
            .par_iter()
            .enumerate()
            .map(|(row, &t)| self.row_gradient(row, t, &|i| data[i as usize]))
            .collect();
        let mut out = Field::zeros(self.grid.clone(), FieldKind::Vector, Support::OmegaNodes);
        for (i, v) in rows.into_iter().enumerate() {
            out.set_vector(i, v);
        }
        Ok(out)
    }

    /// Nonlocal gradient of a vector field: matrix field on `Omega`, row
    /// `i` holding the gradient of component `i`.
    pub fn apply_vector(&self, u: &Field<R, N>) -> Result<Field<R, N>> {
        self.check_input(u, FieldKind::Vector)?;
        let data = u.data();
        let rows: Vec<[[R; N]; N]> = self
            .grid
            .omega_nodes()
            .par_iter()
            .enumerate()
            .map(|(row, &t)| {
                let mut m = [[R::zero(); N]; N];
                for c in 0..N {
                    m[c] = self.row_gradient(row, t, &|i| data[i as usize * N + c]);
                }
                m
            })
            .collect();
        let mut out = Field::zeros(self.grid.clone(), FieldKind::Matrix, Support::OmegaNodes);
        for (i, m) in rows.into_iter().enumerate() {
            out.set_matrix(i, m);
        }
        Ok(out)
    }

    /// Nonlocal divergence of a vector field (dot-contraction of the same
    /// weights, hence identical to the trace of `apply_vector`).
    pub fn divergence(&self, u: &Field<R, N>) -> Result<Field<R, N>> {
        self.check_input(u, FieldKind::Vector)?;
        let data = u.data();
        let vals: Vec<R> = self
            .grid
            .omega_nodes()
            .par_iter()
            .enumerate()
            .map(|(row, &t)| {
                let mut acc = R::zero();
                for c in 0..N {
                    acc += self.row_gradient(row, t, &|i| data[i as usize * N + c])[c];
                }
                acc
            })
            .collect();
        let mut out = Field::zeros(self.grid.clone(), FieldKind::Scalar, Support::OmegaNodes);
        out.data_mut().copy_from_slice(&vals);
        Ok(out)
    }

    /// Nonlocal divergence of a matrix field: the vector whose component
    /// `i` is the divergence of row `i`.
    pub fn divergence_matrix(&self, m: &Field<R, N>) -> Result<Field<R, N>> {
        self.check_input(m, FieldKind::Matrix)?;
        let data = m.data();
        let nn = N * N;
        let rows: Vec<[R; N]> = self
            .grid
            .omega_nodes()
            .par_iter()
            .enumerate()
            .map(|(row, &t)| {
                let mut v = [R::zero(); N];
                for i in 0..N {
                    for c in 0..N {
                        v[i] += self
                            .row_gradient(row, t, &|nid| data[nid as usize * nn + i * N + c])[c];
                    }
                }
                v
            })
            .collect();
        let mut out = Field::zeros(self.grid.clone(), FieldKind::Vector, Support::OmegaNodes);
        for (i, v) in rows.into_iter().enumerate() {
            out.set_vector(i, v);
        }
        Ok(out)
    }

    /// The product-rule operator `K_phi` in its four variants. `phi` is a
    /// scalar field on all nodes; the quadrature reuses the gradient
    /// weights, so the product rules hold per sample.
    pub fn apply_k(
        &self,
        phi: &Field<R, N>,
        u: &Field<R, N>,
        variant: KVariant,
    ) -> Result<Field<R, N>> {
        self.check_input(phi, FieldKind::Scalar)?;
        if !Arc::ptr_eq(u.grid(), &self.grid) {
            return Err(Error::GridMismatch);
        }
        if u.support() != Support::AllNodes {
            return Err(Error::ShapeMismatch("K input lives on all nodes".into()));
        }
        let expected = match variant {
            KVariant::ScalarTimesDirection => FieldKind::Scalar,
            KVariant::MatrixTimesDirection => FieldKind::Matrix,
            KVariant::VectorDot | KVariant::VectorOuter => FieldKind::Vector,
        };
        if u.kind() != expected {
            return Err(Error::ShapeMismatch(format!(
                "K variant {:?} expects {:?} input, got {:?}",
                variant,
                expected,
                u.kind()
            )));
        }
        let (out_kind, out_comps) = match variant {
            KVariant::ScalarTimesDirection | KVariant::MatrixTimesDirection => {
                (FieldKind::Vector, N)
            }
            KVariant::VectorDot => (FieldKind::Scalar, 1),
            KVariant::VectorOuter => (FieldKind::Matrix, N * N),
        };
        let pd = phi.data();
        let ud = u.data();
        let ucomps = u.kind().components(N);
        let two_h = R::of(2.0) * self.grid.h;
        let four = R::of(4.0);

        let rows: Vec<Vec<R>> = self
            .grid
            .omega_nodes()
            .par_iter()
            .enumerate()
            .map(|(row, &t)| {
                let pt = pd[t as usize];
                let mut out = vec![R::zero(); out_comps];
                // far part: (phi(x) - phi(y)) (U(y) ⊙ w)
                for (j, src) in self.row_srcs(row).iter().enumerate() {
                    let f = pt - pd[*src as usize];
                    let w = &self.weights[j];
                    let ub = &ud[*src as usize * ucomps..(*src as usize + 1) * ucomps];
                    accumulate_k::<R, N>(&mut out, variant, f, ub, |i| w[i]);
                }
                // near part: same structure against the direction e_ax
                for ax in 0..N {
                    let [p1, m1, p2, m2] = self.row_nbr(row, ax);
                    let cd = self.c_near / two_h;
                    for (nid, coef) in [
                        (p1, cd - four * self.s4),
                        (m1, -cd - four * self.s4),
                        (p2, self.s4),
                        (m2, self.s4),
                    ] {
                        let f = (pd[nid as usize] - pt) * coef;
                        let ub = &ud[nid as usize * ucomps..(nid as usize + 1) * ucomps];
                        accumulate_k::<R, N>(&mut out, variant, f, ub, |i| {
                            if i == ax {
                                R::one()
                            } else {
                                R::zero()
                            }
                        });
                    }
                }
                out
            })
            .collect();
        let mut out = Field::zeros(self.grid.clone(), out_kind, Support::OmegaNodes);
        for (i, vals) in rows.into_iter().enumerate() {
            out.data_mut()[i * out_comps..(i + 1) * out_comps].copy_from_slice(&vals);
        }
        Ok(out)
    }

    /// Row weights restricted to collar sources, applied to `u`: the
    /// discrete counterpart of the boundary pairing in the duality
    /// identity. One vector per `Omega` node.
    pub fn collar_pairing(&self, u: &Field<R, N>) -> Result<Vec<[R; N]>> {
        self.check_input(u, FieldKind::Scalar)?;
        let data = u.data();
        let grid = &self.grid;
        let two_h = R::of(2.0) * grid.h;
        let four = R::of(4.0);
        Ok(grid
            .omega_nodes()
            .par_iter()
            .enumerate()
            .map(|(row, _)| {
                let mut acc = [R::zero(); N];
                for (j, src) in self.row_srcs(row).iter().enumerate() {
                    if grid.class(*src) == NodeClass::Collar {
                        let w = &self.weights[j];
                        let uy = data[*src as usize];
                        for i in 0..N {
                            acc[i] -= w[i] * uy;
                        }
                    }
                }
                for ax in 0..N {
                    let [p1, m1, p2, m2] = self.row_nbr(row, ax);
                    let cd = self.c_near / two_h;
                    for (nid, coef) in [
                        (p1, cd - four * self.s4),
                        (m1, -cd - four * self.s4),
                        (p2, self.s4),
                        (m2, self.s4),
                    ] {
                        if grid.class(nid) == NodeClass::Collar {
                            acc[ax] += coef * data[nid as usize];
                        }
                    }
                }
                acc
            })
            .collect())
    }

    /// Adjoint action on a vector-valued dual field over the `Omega` rows:
    /// accumulates `sum_rows p(row) . d(G u)(row) / d u(node)` into a
    /// scalar per node. Deterministic sequential accumulation.
    pub fn adjoint_scalar(&self, p: &[[R; N]]) -> Vec<R> {
        assert_eq!(p.len(), self.n_targets());
        let mut out = vec![R::zero(); self.grid.node_count()];
        let two_h = R::of(2.0) * self.grid.h;
        let four = R::of(4.0);
        let six = R::of(6.0);
        for (row, &t) in self.grid.omega_nodes().iter().enumerate() {
            let pr = &p[row];
            let mut diag = R::zero();
            for (j, src) in self.row_srcs(row).iter().enumerate() {
                let c = la::dot(&self.weights[j], pr);
                out[*src as usize] -= c;
                diag += c;
            }
            out[t as usize] += diag;
            for ax in 0..N {
                let [p1, m1, p2, m2] = self.row_nbr(row, ax);
                let cd = self.c_near / two_h;
                let pa = pr[ax];
                out[p1 as usize] += (cd - four * self.s4) * pa;
                out[m1 as usize] += (-cd - four * self.s4) * pa;
                out[p2 as usize] += self.s4 * pa;
                out[m2 as usize] += self.s4 * pa;
                out[t as usize] += six * self.s4 * pa;
            }
        }
        out
    }

    /// Adjoint action on a matrix-valued dual field: component `i` of the
    /// output gets the adjoint of row `i` of the dual matrices.
    pub fn adjoint_vector(&self, p: &[[[R; N]; N]]) -> Vec<[R; N]> {
        assert_eq!(p.len(), self.n_targets());
        let mut out = vec![[R::zero(); N]; self.grid.node_count()];
        let two_h = R::of(2.0) * self.grid.h;
        let four = R::of(4.0);
        let six = R::of(6.0);
        for (row, &t) in self.grid.omega_nodes().iter().enumerate() {
            for i in 0..N {
                let pr = &p[row][i];
                let mut diag = R::zero();
                for (j, src) in self.row_srcs(row).iter().enumerate() {
                    let c = la::dot(&self.weights[j], pr);
                    out[*src as usize][i] -= c;
                    diag += c;
                }
                out[t as usize][i] += diag;
                for ax in 0..N {
                    let [p1, m1, p2, m2] = self.row_nbr(row, ax);
                    let cd = self.c_near / two_h;
                    let pa = pr[ax];
                    out[p1 as usize][i] += (cd - four * self.s4) * pa;
                    out[m1 as usize][i] += (-cd - four * self.s4) * pa;
                    out[p2 as usize][i] += self.s4 * pa;
                    out[m2 as usize][i] += self.s4 * pa;
                    out[t as usize][i] += six * self.s4 * pa;
                }
            }
        }
        out
    }
}

#[inline]
fn accumulate_k<R: Real, const N: usize>(
    out: &mut [R],
    variant: KVariant,
    f: R,
    u: &[R],
    w: impl Fn(usize) -> R,
) {
    match variant {
        KVariant::ScalarTimesDirection => {
            let fu = f * u[0];
            for i in 0..N {
                out[i] += fu * w(i);
            }
        }
        KVariant::MatrixTimesDirection => {
            for i in 0..N {
                let mut acc = R::zero();
                for j in 0..N {
                    acc += u[i * N + j] * w(j);
                }
                out[i] += f * acc;
            }
        }
        KVariant::VectorDot => {
            let mut acc = R::zero();
            for i in 0..N {
                acc += u[i] * w(i);
            }
            out[0] += f * acc;
        }
        KVariant::VectorOuter => {
            for i in 0..N {
                let fu = f * u[i];
                for j in 0..N {
                    out[i * N + j] += fu * w(j);
                }
            }
        }
    }
}

impl<R: Real, const N: usize> ConvolutionOperator<R, N> {
    pub fn grid(&self) -> &Arc<Grid<R, N>> {
        &self.grid
    }

    pub fn params(&self) -> &KernelParams<R> {
        &self.params
    }

    pub fn near_mass(&self) -> R {
        self.near_mass
    }

    fn row_srcs(&self, row: usize) -> &[u32] {
        let n = self.offsets.len();
        &self.srcs[row * n..(row + 1) * n]
    }

    /// Convolution `Q * u` of a scalar field, on the `Omega` nodes.
    /// Inputs are taken as extension-by-zero outside the closure (all
    /// sources for `Omega` targets exist, so no extension is ever hit).
    pub fn apply_scalar(&self, u: &Field<R, N>) -> Result<Field<R, N>> {
        if !Arc::ptr_eq(u.grid(), &self.grid) {
            return Err(Error::GridMismatch);
        }
        if u.kind() != FieldKind::Scalar || u.support() != Support::AllNodes {
            return Err(Error::ShapeMismatch(
                "convolution expects a scalar field on all nodes".into(),
            ));
        }
        let data = u.data();
        let vals: Vec<R> = self
            .grid
            .omega_nodes()
            .par_iter()
            .enumerate()
            .map(|(row, &t)| {
                let mut acc = self.near_mass * data[t as usize];
                for (j, src) in self.row_srcs(row).iter().enumerate() {
                    acc += self.weights[j] * data[*src as usize];
                }
                acc
            })
            .collect();
        let mut out = Field::zeros(self.grid.clone(), FieldKind::Scalar, Support::OmegaNodes);
        out.data_mut().copy_from_slice(&vals);
        Ok(out)
    }

    /// Componentwise convolution of a vector field.
    pub fn apply_vector(&self, u: &Field<R, N>) -> Result<Field<R, N>> {
        if !Arc::ptr_eq(u.grid(), &self.grid) {
            return Err(Error::GridMismatch);
        }
        if u.kind() != FieldKind::Vector || u.support() != Support::AllNodes {
            return Err(Error::ShapeMismatch(
                "convolution expects a vector field on all nodes".into(),
            ));
        }
        let data = u.data();
        let rows: Vec<[R; N]> = self
            .grid
            .omega_nodes()
            .par_iter()
            .enumerate()
            .map(|(row, &t)| {
                let mut acc = [R::zero(); N];
                for c in 0..N {
                    acc[c] = self.near_mass * data[t as usize * N + c];
                }
                for (j, src) in self.row_srcs(row).iter().enumerate() {
                    let w = self.weights[j];
                    for c in 0..N {
                        acc[c] += w * data[*src as usize * N + c];
                    }
                }
                acc
            })
            .collect();
        let mut out = Field::zeros(self.grid.clone(), FieldKind::Vector, Support::OmegaNodes);
        for (i, v) in rows.into_iter().enumerate() {
            out.set_vector(i, v);
        }
        Ok(out)
    }
}

const DUMP_MAGIC: &[u8; 4] = b"NLOP";
const DUMP_VERSION: u32 = 1;

/// Serialize an assembled gradient operator (weights in `f64`).
pub fn save_gradient<R: Real, const N: usize>(
    op: &GradientOperator<R, N>,
    mut w: impl IoWrite,
) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&[0u8, N as u8])?; // kind = gradient, dimension
    let p = &op.params;
    for v in [p.s, p.delta, p.a0, p.b0, op.grid.h] {
        w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
    }
    for i in 0..N {
        w.write_all(&op.grid.domain.lower[i].to_f64().unwrap().to_le_bytes())?;
    }
    for i in 0..N {
        w.write_all(&op.grid.domain.upper[i].to_f64().unwrap().to_le_bytes())?;
    }
    w.write_all(&(op.n_targets() as u64).to_le_bytes())?;
    w.write_all(&(op.offsets.len() as u64).to_le_bytes())?;
    for o in &op.offsets {
        for i in 0..N {
            w.write_all(&o[i].to_le_bytes())?;
        }
    }
    for wt in &op.weights {
        for i in 0..N {
            w.write_all(&wt[i].to_f64().unwrap().to_le_bytes())?;
        }
    }
    for s in &op.srcs {
        w.write_all(&s.to_le_bytes())?;
    }
    for n in &op.nbr {
        w.write_all(&n.to_le_bytes())?;
    }
    for v in [op.c_near, op.s4] {
        w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
    }
    Ok(())
}

/// Load a gradient operator dump, rebuilding grid and kernel from the
/// header and validating counts.
pub fn load_gradient<R: Real, const N: usize>(
    mut r: impl IoRead,
) -> Result<GradientOperator<R, N>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::InvalidFormat("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DUMP_VERSION {
        return Err(Error::InvalidFormat(format!(
            "unsupported version {version}"
        )));
    }
    let mut kd = [0u8; 2];
    r.read_exact(&mut kd)?;
    if kd[0] != 0 {
        return Err(Error::InvalidFormat("not a gradient dump".into()));
    }
    if kd[1] as usize != N {
        return Err(Error::InvalidFormat(format!(
            "dump dimension {} does not match {N}",
            kd[1]
        )));
    }
    let s = read_f64(&mut r)?;
    let delta = read_f64(&mut r)?;
    let a0 = read_f64(&mut r)?;
    let b0 = read_f64(&mut r)?;
    let h = read_f64(&mut r)?;
    let mut lower = [R::zero(); N];
    let mut upper = [R::zero(); N];
    for v in lower.iter_mut() {
        *v = R::of(read_f64(&mut r)?);
    }
    for v in upper.iter_mut() {
        *v = R::of(read_f64(&mut r)?);
    }
    let params = KernelParams::new(N, R::of(s), R::of(delta), R::of(a0), R::of(b0))?;
    let grid = Grid::build(BoxDomain::new(lower, upper, R::of(delta))?, R::of(h))?;
    let n_targets = read_u64(&mut r)? as usize;
    let n_offsets = read_u64(&mut r)? as usize;
    if n_targets != grid.omega_nodes().len() {
        return Err(Error::InvalidFormat(
            "target count does not match rebuilt grid".into(),
        ));
    }
    let mut offsets = Vec::with_capacity(n_offsets);
    for _ in 0..n_offsets {
        let mut o = [0i64; N];
        for v in o.iter_mut() {
            *v = read_i64(&mut r)?;
        }
        offsets.push(o);
    }
    let mut weights = Vec::with_capacity(n_offsets);
    for _ in 0..n_offsets {
        let mut wv = [R::zero(); N];
        for v in wv.iter_mut() {
            *v = R::of(read_f64(&mut r)?);
        }
        weights.push(wv);
    }
    let n_nodes = grid.node_count() as u32;
    let mut srcs = vec![0u32; n_targets * n_offsets];
    for v in srcs.iter_mut() {
        *v = read_u32(&mut r)?;
        if *v >= n_nodes {
            return Err(Error::InvalidFormat("source index out of range".into()));
        }
    }
    let mut nbr = vec![0u32; n_targets * N * 4];
    for v in nbr.iter_mut() {
        *v = read_u32(&mut r)?;
        if *v >= n_nodes {
            return Err(Error::InvalidFormat("neighbor index out of range".into()));
        }
    }
    let c_near = R::of(read_f64(&mut r)?);
    let s4 = R::of(read_f64(&mut r)?);
    Ok(GradientOperator {
        grid,
        params,
        offsets,
        weights,
        srcs,
        nbr,
        c_near,
        s4,
    })
}

fn read_u32(r: &mut impl IoRead) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl IoRead) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_i64(r: &mut impl IoRead) -> Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(i64::from_le_bytes(b))
}

fn read_f64(r: &mut impl IoRead) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
