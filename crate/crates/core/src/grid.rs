//! Uniform Cartesian discretization of a box domain and its nonlocal
//! closure, with node classification into interior, core and collar sets,
//! plus the nodal field container.

use std::sync::Arc;

use crate::{Error, Real, Result};

/// Node classification relative to the box `Omega` and the horizon:
/// `Interior` nodes lie deeper than `delta` inside, `Core` nodes are the
/// rest of the open box, `Collar` nodes make up the nonlocal boundary
/// (closure minus the open box).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeClass {
    Interior,
    Core,
    Collar,
}

/// Open box `Omega` together with the horizon that defines its nonlocal
/// closure `Omega + B(0, delta)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDomain<R, const N: usize> {
    pub lower: [R; N],
    pub upper: [R; N],
    pub delta: R,
}

impl<R: Real, const N: usize> BoxDomain<R, N> {
    pub fn new(lower: [R; N], upper: [R; N], delta: R) -> Result<Self> {
        if delta <= R::zero() || !delta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {delta}"
            )));
        }
        for i in 0..N {
            if lower[i] >= upper[i] || lower[i].is_nan() || upper[i].is_nan() {
                return Err(Error::InvalidParameter(format!(
                    "box.lower[{i}] must be below box.upper[{i}]"
                )));
            }
            if upper[i] - lower[i] <= R::of(2.0) * delta {
                return Err(Error::InvalidParameter(format!(
                    "eroded interior is empty: edge {i} must exceed twice the horizon"
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            delta,
        })
    }

    /// Euclidean distance to the closed box (zero inside).
    pub fn dist_outside(&self, x: &[R; N]) -> R {
        let mut acc = R::zero();
        for i in 0..N {
            let d = (self.lower[i] - x[i])
                .max(x[i] - self.upper[i])
                .max(R::zero());
            acc += d * d;
        }
        acc.sqrt()
    }

    pub fn inside_open(&self, x: &[R; N]) -> bool {
        (0..N).all(|i| x[i] > self.lower[i] && x[i] < self.upper[i])
    }

    /// Distance to the boundary, for points inside the open box.
    pub fn dist_to_boundary(&self, x: &[R; N]) -> R {
        let mut d = R::infinity();
        for i in 0..N {
            d = d.min(x[i] - self.lower[i]).min(self.upper[i] - x[i]);
        }
        d
    }

    pub fn volume(&self) -> R {
        (0..N).fold(R::one(), |v, i| v * (self.upper[i] - self.lower[i]))
    }
}

/// Uniform lattice covering the nonlocal closure of a box domain.
///
/// Nodes are the lattice points `lower + k h` (integer `k`) whose distance
/// to the box is below the horizon. Enumeration is lexicographic in `k`
/// with the last coordinate fastest, so reconstruction is deterministic.
#[derive(Debug)]
pub struct Grid<R, const N: usize> {
    pub domain: BoxDomain<R, N>,
    pub h: R,
    k_min: [i64; N],
    extent: [usize; N],
    lookup: Vec<u32>,
    lattice: Vec<[i64; N]>,
    class: Vec<NodeClass>,
    positions: Vec<[R; N]>,
    omega: Vec<u32>,
    interior: Vec<u32>,
    collar: Vec<u32>,
    omega_pos: Vec<u32>,
    outer_layer: Vec<bool>,
}

const ABSENT: u32 = u32::MAX;

impl<R: Real, const N: usize> Grid<R, N> {
    /// Build the lattice covering `Omega_delta`. Requires at least four
    /// cells across the horizon (`h <= delta / 4`).
    pub fn build(domain: BoxDomain<R, N>, h: R) -> Result<Arc<Self>> {
        if h <= R::zero() || !h.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "grid spacing must be positive, got {h}"
            )));
        }
        if h > domain.delta / R::of(4.0) {
            return Err(Error::InvalidParameter(format!(
                "grid spacing {h} exceeds a quarter horizon {}",
                domain.delta / R::of(4.0)
            )));
        }
        let mut k_min = [0i64; N];
        let mut extent = [0usize; N];
        for i in 0..N {
            let lo = -(domain.delta / h).to_f64().unwrap().ceil() as i64 - 1;
            let hi = (((domain.upper[i] - domain.lower[i] + domain.delta) / h)
                .to_f64()
                .unwrap())
            .ceil() as i64
                + 2;
            k_min[i] = lo;
            extent[i] = (hi - lo + 1) as usize;
        }
        let total: usize = extent.iter().product();
        let mut lookup = vec![ABSENT; total];
        let mut lattice = Vec::new();
        let mut class = Vec::new();
        let mut positions = Vec::new();

        let mut k = k_min;
        'outer: loop {
            let mut x = [R::zero(); N];
            for i in 0..N {
                x[i] = domain.lower[i] + R::of(k[i] as f64) * h;
            }
            let keep = if domain.inside_open(&x) {
                true
            } else {
                domain.dist_outside(&x) < domain.delta
            };
            if keep {
                let c = if domain.inside_open(&x) {
                    if domain.dist_to_boundary(&x) > domain.delta {
                        NodeClass::Interior
                    } else {
                        NodeClass::Core
                    }
                } else {
                    NodeClass::Collar
                };
                let flat = flat_index::<N>(&k, &k_min, &extent);
                lookup[flat] = lattice.len() as u32;
                lattice.push(k);
                class.push(c);
                positions.push(x);
            }
            // advance k lexicographically, last axis fastest
            for i in (0..N).rev() {
                k[i] += 1;
                if k[i] < k_min[i] + extent[i] as i64 {
                    continue 'outer;
                }
                k[i] = k_min[i];
            }
            break;
        }

        let mut omega = Vec::new();
        let mut interior = Vec::new();
        let mut collar = Vec::new();
        let mut omega_pos = vec![ABSENT; lattice.len()];
        for (i, c) in class.iter().enumerate() {
            match c {
                NodeClass::Interior => {
                    omega_pos[i] = omega.len() as u32;
                    omega.push(i as u32);
                    interior.push(i as u32);
                }
                NodeClass::Core => {
                    omega_pos[i] = omega.len() as u32;
                    omega.push(i as u32);
                }
                NodeClass::Collar => collar.push(i as u32),
            }
        }

        let mut grid = Self {
            domain,
            h,
            k_min,
            extent,
            lookup,
            lattice,
            class,
            positions,
            omega,
            interior,
            collar,
            omega_pos,
            outer_layer: Vec::new(),
        };
        let outer = (0..grid.node_count())
            .map(|i| {
                let k = grid.lattice[i];
                (0..N).any(|ax| {
                    let mut kp = k;
                    kp[ax] += 1;
                    let mut km = k;
                    km[ax] -= 1;
                    grid.node_at(&kp).is_none() || grid.node_at(&km).is_none()
                })
            })
            .collect();
        grid.outer_layer = outer;
        Ok(Arc::new(grid))
    }

    pub fn node_count(&self) -> usize {
        self.lattice.len()
    }

    pub fn position(&self, node: u32) -> [R; N] {
        self.positions[node as usize]
    }

    pub fn class(&self, node: u32) -> NodeClass {
        self.class[node as usize]
    }

    pub fn lattice_coords(&self, node: u32) -> [i64; N] {
        self.lattice[node as usize]
    }

    /// Node id at the given lattice coordinates, if present.
    pub fn node_at(&self, k: &[i64; N]) -> Option<u32> {
        for i in 0..N {
            if k[i] < self.k_min[i] || k[i] >= self.k_min[i] + self.extent[i] as i64 {
                return None;
            }
        }
        let v = self.lookup[flat_index::<N>(k, &self.k_min, &self.extent)];
        (v != ABSENT).then_some(v)
    }

    /// Neighbor at lattice offset `step` along `axis`; `None` if absent.
    pub fn neighbor(&self, node: u32, axis: usize, step: i64) -> Option<u32> {
        let mut k = self.lattice[node as usize];
        k[axis] += step;
        self.node_at(&k)
    }

    /// Nodes of `Omega` (core plus interior), in enumeration order.
    pub fn omega_nodes(&self) -> &[u32] {
        &self.omega
    }

    pub fn interior_nodes(&self) -> &[u32] {
        &self.interior
    }

    pub fn collar_nodes(&self) -> &[u32] {
        &self.collar
    }

    /// Position of a node in the `omega_nodes` list (`None` for collar).
    pub fn omega_pos(&self, node: u32) -> Option<u32> {
        let v = self.omega_pos[node as usize];
        (v != ABSENT).then_some(v)
    }

    /// True for nodes on the outermost layer of the node set (some lattice
    /// neighbor is missing).
    pub fn is_outer_layer(&self, node: u32) -> bool {
        self.outer_layer[node as usize]
    }

    /// Per-`Omega`-node quadrature weights for integrals over `Omega`.
    ///
    /// Bulk nodes own an `h^n` cell; the first layer next to each face
    /// absorbs the sliver between its cell and the boundary, so the weights
    /// sum exactly to `|Omega|`.
    pub fn omega_quad_weights(&self) -> Vec<R> {
        let h = self.h;
        let half = h / R::of(2.0);
        let tol = h * R::of(1e-9);
        self.omega
            .iter()
            .map(|&n| {
                let x = self.position(n);
                let mut w = R::one();
                for i in 0..N {
                    let down = if x[i] - h > self.domain.lower[i] + tol {
                        half
                    } else {
                        x[i] - self.domain.lower[i]
                    };
                    let up = if x[i] + h < self.domain.upper[i] - tol {
                        half
                    } else {
                        self.domain.upper[i] - x[i]
                    };
                    w *= down + up;
                }
                w
            })
            .collect()
    }

    /// Cell volume `h^n`.
    pub fn cell_volume(&self) -> R {
        (0..N).fold(R::one(), |v, _| v * self.h)
    }
}

fn flat_index<const N: usize>(k: &[i64; N], k_min: &[i64; N], extent: &[usize; N]) -> usize {
    let mut idx = 0usize;
    for i in 0..N {
        idx = idx * extent[i] + (k[i] - k_min[i]) as usize;
    }
    idx
}

/// Field kind: 1, `n` or `n x n` components per node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Scalar,
    Vector,
    Matrix,
}

impl FieldKind {
    pub fn components(&self, dim: usize) -> usize {
        match self {
            FieldKind::Scalar => 1,
            FieldKind::Vector => dim,
            FieldKind::Matrix => dim * dim,
        }
    }
}

/// Node set a field lives on: scalar and vector data on the whole closure,
/// operator outputs (gradients, matrix fields) on the `Omega` nodes only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    AllNodes,
    OmegaNodes,
}

/// Nodal values over a grid. Plain value semantics: cloning yields
/// independent storage.
#[derive(Clone, Debug)]
pub struct Field<R, const N: usize> {
    grid: Arc<Grid<R, N>>,
    kind: FieldKind,
    support: Support,
    data: Vec<R>,
}

impl<R: Real, const N: usize> Field<R, N> {
    pub fn zeros(grid: Arc<Grid<R, N>>, kind: FieldKind, support: Support) -> Self {
        let n = match support {
            Support::AllNodes => grid.node_count(),
            Support::OmegaNodes => grid.omega_nodes().len(),
        };
        let data = vec![R::zero(); n * kind.components(N)];
        Self {
            grid,
            kind,
            support,
            data,
        }
    }

    pub fn grid(&self) -> &Arc<Grid<R, N>> {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn support(&self) -> Support {
        self.support
    }

    /// Number of entries (nodes in this field's support).
    pub fn len(&self) -> usize {
        self.data.len() / self.kind.components(N)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn scalar_at(&self, i: usize) -> R {
        debug_assert_eq!(self.kind, FieldKind::Scalar);
        self.data[i]
    }

    pub fn set_scalar(&mut self, i: usize, v: R) {
        debug_assert_eq!(self.kind, FieldKind::Scalar);
        self.data[i] = v;
    }

    pub fn vector_at(&self, i: usize) -> [R; N] {
        debug_assert_eq!(self.kind, FieldKind::Vector);
        let mut out = [R::zero(); N];
        out.copy_from_slice(&self.data[i * N..(i + 1) * N]);
        out
    }

    pub fn set_vector(&mut self, i: usize, v: [R; N]) {
        debug_assert_eq!(self.kind, FieldKind::Vector);
        self.data[i * N..(i + 1) * N].copy_from_slice(&v);
    }

    /// Matrix entries are stored row-major: component `(i, j)` at `i*N + j`.
    pub fn matrix_at(&self, i: usize) -> [[R; N]; N] {
        debug_assert_eq!(self.kind, FieldKind::Matrix);
        let mut out = [[R::zero(); N]; N];
        for r in 0..N {
            out[r].copy_from_slice(&self.data[i * N * N + r * N..i * N * N + (r + 1) * N]);
        }
        out
    }

    pub fn set_matrix(&mut self, i: usize, m: [[R; N]; N]) {
        debug_assert_eq!(self.kind, FieldKind::Matrix);
        for r in 0..N {
            self.data[i * N * N + r * N..i * N * N + (r + 1) * N].copy_from_slice(&m[r]);
        }
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_square(delta: f64) -> BoxDomain<f64, 2> {
        BoxDomain::new([0.0, 0.0], [1.0, 1.0], delta).unwrap()
    }

    #[test]
    fn interior_count_matches_enumeration_oracle() {
        // lattice points with both coordinates strictly between delta and
        // 1 - delta, counted directly
        let delta = 0.25;
        let h = 0.0625;
        let grid = Grid::build(unit_square(delta), h).unwrap();
        let mut expect = 0;
        let per_axis = (1.0f64 / h) as i64;
        for i in 0..=per_axis {
            for j in 0..=per_axis {
                let (x, y) = (i as f64 * h, j as f64 * h);
                let d = x.min(1.0 - x).min(y).min(1.0 - y);
                if d > delta && x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0 {
                    expect += 1;
                }
            }
        }
        assert_eq!(expect, 49);
        assert_eq!(grid.interior_nodes().len(), 49);
    }

    #[test]
    fn thin_box_and_large_spacing_are_rejected() {
        assert!(BoxDomain::new([0.0, 0.0], [1.0, 1.0], 0.5f64).is_err());
        assert!(BoxDomain::new([0.0, 0.0], [1.0, 1.0], 0.6f64).is_err());
        let domain = unit_square(0.25);
        assert!(Grid::build(domain, 0.1f64).is_err()); // > delta/4
        assert!(Grid::build(domain, 0.0625f64).is_ok());
    }

    #[test]
    fn boundary_lattice_points_belong_to_the_collar() {
        let grid = Grid::build(unit_square(0.25), 0.0625).unwrap();
        let node = grid.node_at(&[0, 8]).unwrap();
        assert_eq!(grid.position(node), [0.0, 0.5]);
        assert_eq!(grid.class(node), NodeClass::Collar);
        // one beyond the horizon is not a node
        assert!(grid.node_at(&[-4, 8]).is_none());
        assert!(grid.node_at(&[-3, 8]).is_some());
    }

    #[test]
    fn covering_property_around_core_nodes() {
        let grid = Grid::build(unit_square(0.25), 0.0625).unwrap();
        let reach = (0.25f64 / 0.0625) as i64;
        for &node in grid.omega_nodes() {
            let k = grid.lattice_coords(node);
            for di in -reach..=reach {
                for dj in -reach..=reach {
                    let r = 0.0625 * ((di * di + dj * dj) as f64).sqrt();
                    if r < 0.25 {
                        assert!(
                            grid.node_at(&[k[0] + di, k[1] + dj]).is_some(),
                            "missing source at offset ({di},{dj}) from {k:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn quadrature_weights_sum_to_the_box_volume() {
        for h in [0.0625, 0.03125] {
            let grid = Grid::build(unit_square(0.25), h).unwrap();
            let total: f64 = grid.omega_quad_weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-13, "sum = {total}");
        }
    }

    #[test]
    fn refinement_scales_node_count_geometrically() {
        let g1 = Grid::build(unit_square(0.25), 0.0625).unwrap();
        let g2 = Grid::build(unit_square(0.25), 0.03125).unwrap();
        let ratio = g2.node_count() as f64 / g1.node_count() as f64;
        assert!((ratio - 4.0).abs() < 0.35, "ratio = {ratio}");
    }

    #[test]
    fn deterministic_rebuild() {
        let a = Grid::build(unit_square(0.25), 0.03125).unwrap();
        let b = Grid::build(unit_square(0.25), 0.03125).unwrap();
        assert_eq!(a.node_count(), b.node_count());
        for i in 0..a.node_count() {
            assert_eq!(a.lattice_coords(i as u32), b.lattice_coords(i as u32));
            assert_eq!(a.class(i as u32), b.class(i as u32));
            assert_eq!(a.position(i as u32), b.position(i as u32));
        }
    }

    #[test]
    fn three_dimensional_classification() {
        let domain = BoxDomain::new([0.0; 3], [1.0; 3], 0.25f64).unwrap();
        let grid = Grid::build(domain, 0.0625).unwrap();
        let parts = grid.interior_nodes().len()
            + grid.collar_nodes().len()
            + (grid.omega_nodes().len() - grid.interior_nodes().len());
        assert_eq!(parts, grid.node_count());
        assert_eq!(grid.interior_nodes().len(), 7 * 7 * 7);
    }

    proptest! {
        #[test]
        fn classes_partition_the_node_set(
            edge in 0.8f64..2.0,
            delta in 0.1f64..0.3,
            refine in 4usize..7,
        ) {
            prop_assume!(edge > 2.0 * delta + 0.05);
            let domain = BoxDomain::new([0.0, 0.0], [edge, edge], delta).unwrap();
            let grid = Grid::build(domain, delta / refine as f64).unwrap();
            let mut counts = [0usize; 3];
            for i in 0..grid.node_count() {
                counts[match grid.class(i as u32) {
                    NodeClass::Interior => 0,
                    NodeClass::Core => 1,
                    NodeClass::Collar => 2,
                }] += 1;
            }
            prop_assert_eq!(counts.iter().sum::<usize>(), grid.node_count());
            prop_assert_eq!(counts[0], grid.interior_nodes().len());
            prop_assert_eq!(counts[2], grid.collar_nodes().len());
            prop_assert_eq!(counts[0] + counts[1], grid.omega_nodes().len());
            // interior nodes really are deeper than the horizon; collar
            // nodes lie outside the open box within the horizon
            for i in 0..grid.node_count() {
                let x = grid.position(i as u32);
                match grid.class(i as u32) {
                    NodeClass::Interior => {
                        prop_assert!(domain.inside_open(&x));
                        prop_assert!(domain.dist_to_boundary(&x) > delta);
                    }
                    NodeClass::Core => prop_assert!(domain.inside_open(&x)),
                    NodeClass::Collar => {
                        prop_assert!(!domain.inside_open(&x));
                        prop_assert!(domain.dist_outside(&x) < delta);
                    }
                }
            }
        }
    }

    #[test]
    fn field_round_trip_accessors() {
        let grid = Grid::build(unit_square(0.25), 0.0625).unwrap();
        let mut f = Field::zeros(grid.clone(), FieldKind::Matrix, Support::OmegaNodes);
        let m = [[1.0, 2.0], [3.0, 4.0]];
        f.set_matrix(3, m);
        assert_eq!(f.matrix_at(3), m);
        let mut v = Field::zeros(grid.clone(), FieldKind::Vector, Support::AllNodes);
        v.set_vector(5, [0.5, -0.5]);
        assert_eq!(v.vector_at(5), [0.5, -0.5]);
        assert!(v.all_finite());
        let w = v.clone();
        v.set_vector(5, [1.0, 1.0]);
        assert_eq!(w.vector_at(5), [0.5, -0.5]); // clone is independent
    }
}
