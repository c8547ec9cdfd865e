//! Kernel family of the truncated nonlocal gradient: the plateau cut-off
//! `w_delta`, the singular kernel `rho_delta`, the normalization constants
//! `gamma(s)` and `c_{n,s}`, and the radial profile of the convolution
//! kernel `Q` whose classical gradient reproduces the nonlocal one.

use crate::{Error, Real, Result};

/// Lanczos coefficients, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)] // published coefficients, kept verbatim
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Euler gamma function via the Lanczos approximation (relative error
/// around 2e-15 on the range used here). Computed in `f64` and cast.
pub fn gamma_fn<R: Real>(x: R) -> R {
    R::of(gamma_f64(x.to_f64().expect("finite argument")))
}

fn gamma_f64(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma_f64(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut acc = LANCZOS[0];
        for (i, c) in LANCZOS.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + LANCZOS_G + 0.5;
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * acc
    }
}

/// Surface area of the unit sphere in `R^n`.
pub fn sphere_area<R: Real>(dim: usize) -> R {
    let n = R::of(dim as f64);
    let two = R::of(2.0);
    two * R::PI().powf(n / two) / gamma_fn(n / two)
}

/// The Riesz-potential normalization
/// `gamma(s) = pi^{n/2} 2^s Gamma(s/2) / Gamma((n-s)/2)`.
pub fn gamma_const<R: Real>(s: R, dim: usize) -> Result<R> {
    let n = R::of(dim as f64);
    if s <= R::zero() || s >= n {
        return Err(Error::InvalidParameter(format!(
            "gamma_const requires 0 < s < n, got s = {s}, n = {dim}"
        )));
    }
    let two = R::of(2.0);
    Ok(R::PI().powf(n / two) * two.powf(s) * gamma_fn(s / two) / gamma_fn((n - s) / two))
}

/// The gradient normalization `c_{n,s} = (n - 1 + s) / gamma(1 - s)`.
pub fn cns_const<R: Real>(s: R, dim: usize) -> Result<R> {
    if s <= R::zero() || s >= R::one() {
        return Err(Error::InvalidParameter(format!(
            "cns_const requires 0 < s < 1, got s = {s}"
        )));
    }
    let n = R::of(dim as f64);
    Ok((n - R::one() + s) / gamma_const(R::one() - s, dim)?)
}

/// Parameters of the kernel family: dimension, differentiability order,
/// horizon, plateau height and plateau fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams<R> {
    pub dim: usize,
    pub s: R,
    pub delta: R,
    pub a0: R,
    pub b0: R,
}

impl<R: Real> KernelParams<R> {
    pub fn new(dim: usize, s: R, delta: R, a0: R, b0: R) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidParameter(format!(
                "spatial dimension must be 2 or 3, got {dim}"
            )));
        }
        if s <= R::zero() || s >= R::one() {
            return Err(Error::InvalidParameter(format!(
                "differentiability order must satisfy 0 < s < 1, got {s}"
            )));
        }
        if delta <= R::zero() || !delta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {delta}"
            )));
        }
        if a0 <= R::zero() {
            return Err(Error::InvalidParameter(format!(
                "plateau height must be positive, got {a0}"
            )));
        }
        if b0 <= R::zero() || b0 >= R::one() {
            return Err(Error::InvalidParameter(format!(
                "plateau fraction must satisfy 0 < b0 < 1, got {b0}"
            )));
        }
        Ok(Self {
            dim,
            s,
            delta,
            a0,
            b0,
        })
    }

    /// Defaults used throughout: a0 = 1, b0 = 1/2.
    pub fn with_defaults(dim: usize, s: R, delta: R) -> Result<Self> {
        Self::new(dim, s, delta, R::one(), R::of(0.5))
    }

    /// Singular exponent `n - 1 + s`.
    pub fn nu(&self) -> R {
        R::of(self.dim as f64) - R::one() + self.s
    }

    /// `gamma(1 - s)` for this dimension.
    pub fn gamma_one_minus_s(&self) -> R {
        gamma_const(R::one() - self.s, self.dim).expect("validated parameters")
    }

    /// `c_{n,s}`.
    pub fn cns(&self) -> R {
        cns_const(self.s, self.dim).expect("validated parameters")
    }

    /// The radial cut-off `w_delta`: equals `a0` on `[0, b0 delta]`,
    /// vanishes (with all derivatives) outside `[0, delta)`, and decreases
    /// smoothly in between.
    pub fn cutoff(&self, r: R) -> R {
        let b = self.b0 * self.delta;
        if r >= self.delta {
            R::zero()
        } else if r <= b {
            self.a0
        } else {
            self.a0 * smooth_step((r - b) / (self.delta - b))
        }
    }

    /// The singular kernel `rho_delta(r) = w_delta(r) / (gamma(1-s) r^{n-1+s})`.
    ///
    /// Errors at `r = 0`; callers that need mass near the origin must use the
    /// analytic radial integrals instead.
    pub fn rho(&self, r: R) -> Result<R> {
        if r <= R::zero() {
            return Err(Error::Singularity(
                "rho is singular at r = 0; integrate the radial moment analytically".into(),
            ));
        }
        Ok(self.cutoff(r) / (self.gamma_one_minus_s() * r.powf(self.nu())))
    }

    /// `int_lo^hi w(t) t^p dt`, with the plateau handled in closed form and
    /// the smooth transition region by composite Gauss-Legendre panels.
    ///
    /// Valid for any `p > -(n+1)` with `p != -1`; the two powers used by the
    /// crate are `-s` and `-(n+s)`.
    pub fn cutoff_power_integral(&self, lo: R, hi: R, p: R) -> R {
        debug_assert!((p + R::one()).abs() > R::of(1e-9));
        let b = self.b0 * self.delta;
        let lo = lo.max(R::zero());
        let hi = hi.min(self.delta);
        if hi <= lo {
            return R::zero();
        }
        let mut acc = R::zero();
        // plateau part [lo, min(hi, b)]
        if lo < b {
            let top = hi.min(b);
            let q = p + R::one();
            acc += self.a0 * (top.powf(q) - lo.powf(q)) / q;
        }
        // transition part [max(lo, b), hi]
        if hi > b {
            let t0 = lo.max(b);
            acc += gauss_panels(t0, hi, 4, 24, |t| self.cutoff(t) * t.powf(p));
        }
        acc
    }

    /// `L^1(R^n)` norm of `rho_delta`, to near machine precision.
    pub fn rho_l1_norm(&self) -> R {
        sphere_area::<R>(self.dim) / self.gamma_one_minus_s()
            * self.cutoff_power_integral(R::zero(), self.delta, -self.s)
    }

    /// `int_{R^n} Q = ((n-1+s)/n) ||rho||_1`, the affine-gradient factor.
    pub fn affine_factor(&self) -> R {
        self.nu() / R::of(self.dim as f64) * self.rho_l1_norm()
    }

    /// Tabulate the radial profile of `Q` on a log-spaced grid with
    /// `resolution` cells. `Q(r) = c_{n,s} int_r^delta w(t) t^{-(n+s)} dt`,
    /// accumulated with per-interval closed forms on the plateau.
    pub fn q_profile(&self, resolution: usize) -> Result<RadialProfile<R>> {
        if resolution < 64 {
            return Err(Error::InvalidParameter(format!(
                "Q profile needs at least 64 radial cells, got {resolution}"
            )));
        }
        let cns = self.cns();
        let nu = self.nu();
        let n = R::of(self.dim as f64);
        let npows = -(n + self.s);
        let r_min = self.delta * R::of(Q_RMIN_FRACTION);
        let mut radii: Vec<R> = (0..=resolution)
            .map(|i| {
                let t = R::of(i as f64 / resolution as f64);
                r_min * (self.delta / r_min).powf(t)
            })
            .collect();
        radii[0] = r_min;
        radii[resolution] = self.delta;
        // make the plateau edge a knot so no interval straddles it, unless
        // it would sit on top of an existing one
        let b = self.b0 * self.delta;
        if let Err(pos) = radii.binary_search_by(|r| r.partial_cmp(&b).unwrap()) {
            if pos > 0 && pos < radii.len() {
                let gap = (radii[pos] - radii[pos - 1]) * R::of(1e-6);
                if b - radii[pos - 1] > gap && radii[pos] - b > gap {
                    radii.insert(pos, b);
                }
            }
        }
        let m = radii.len();
        let mut values = vec![R::zero(); m];
        for i in (0..m - 1).rev() {
            let seg = cns * self.cutoff_power_integral(radii[i], radii[i + 1], npows);
            values[i] = values[i + 1] + seg;
        }

        // total mass int_{R^n} Q by direct radial quadrature: on the
        // plateau Q(r) = A r^{-nu} + C is integrated in closed form, on the
        // transition Q is rebuilt from its defining integral under Gauss
        // panels (smooth there, flat at the horizon).
        let sigma = sphere_area::<R>(self.dim);
        let a_plateau = cns * self.a0 / nu;
        let one_ms = R::one() - self.s;
        let q_at_b = cns * self.cutoff_power_integral(b, self.delta, npows);
        let c_plateau = q_at_b - a_plateau * b.powf(-nu);
        let mut mass = a_plateau * b.powf(one_ms) / one_ms + c_plateau * b.powf(n) / n;
        mass += gauss_panels(b, self.delta, 8, 32, |r| {
            cns * self.cutoff_power_integral(r, self.delta, npows) * r.powf(n - R::one())
        });
        mass *= sigma;

        let g = radii
            .iter()
            .zip(&values)
            .map(|(&r, &q)| q * r.powf(nu))
            .collect();
        let log_radii = radii.iter().map(|r| r.ln()).collect();
        Ok(RadialProfile {
            radii,
            values,
            singular_exponent: nu,
            tail_value: R::zero(),
            delta: self.delta,
            dim: self.dim,
            g,
            log_radii,
            mass,
        })
    }
}

/// Smooth monotone step: 1 at t <= 0, 0 at t >= 1, C-infinity in between.
pub(crate) fn smooth_step<R: Real>(t: R) -> R {
    if t <= R::zero() {
        R::one()
    } else if t >= R::one() {
        R::zero()
    } else {
        let a = (-(R::one() / (R::one() - t))).exp();
        let b = (-(R::one() / t)).exp();
        a / (a + b)
    }
}

/// Minimum tabulated radius as a fraction of the horizon.
const Q_RMIN_FRACTION: f64 = 1e-5;

/// Default radial resolution; fine enough for the finite-difference
/// slope check of `Q` at 1e-6 relative accuracy away from the flat tail.
pub const Q_PROFILE_DEFAULT_RESOLUTION: usize = 131_072;

/// Tabulated radial profile of the convolution kernel `Q`.
///
/// `values[i] * radii[i]^{singular_exponent}` stays bounded as the radius
/// goes to zero, which is what the interpolation works on.
#[derive(Clone, Debug)]
pub struct RadialProfile<R> {
    pub radii: Vec<R>,
    pub values: Vec<R>,
    pub singular_exponent: R,
    pub tail_value: R,
    pub delta: R,
    pub dim: usize,
    g: Vec<R>,
    log_radii: Vec<R>,
    mass: R,
}

impl<R: Real> RadialProfile<R> {
    /// Interpolated evaluation; exact zero at and beyond the horizon.
    pub fn eval(&self, r: R) -> R {
        if r >= self.delta {
            return R::zero();
        }
        let rn = r.powf(self.singular_exponent);
        if r <= self.radii[0] {
            return self.g[0] / rn;
        }
        let lr = r.ln();
        let mut lo = 0usize;
        let mut hi = self.log_radii.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.log_radii[mid] <= lr {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = (lr - self.log_radii[lo]) / (self.log_radii[hi] - self.log_radii[lo]);
        let g = self.g[lo] + t * (self.g[hi] - self.g[lo]);
        g / rn
    }

    /// `int_{R^n} Q`, integrated from the tabulation at build time.
    pub fn mass(&self) -> R {
        self.mass
    }

    /// Mass of `Q` over the ball of radius `rc`, using the radial
    /// integration-by-parts closed form (plateau part analytic).
    pub fn near_ball_mass(&self, params: &KernelParams<R>, rc: R) -> R {
        let n = R::of(self.dim as f64);
        let sigma = sphere_area::<R>(self.dim);
        let q_rc = self.eval(rc);
        sigma
            * (q_rc * rc.powf(n) / n
                + params.cns() / n * params.cutoff_power_integral(R::zero(), rc, -params.s))
    }

    /// Non-uniform central-difference slope at an interior tabulated radius.
    pub fn fd_slope(&self, i: usize) -> R {
        assert!(i > 0 && i + 1 < self.radii.len());
        let hp = self.radii[i + 1] - self.radii[i];
        let hm = self.radii[i] - self.radii[i - 1];
        let fp = self.values[i + 1];
        let f0 = self.values[i];
        let fm = self.values[i - 1];
        (hm / (hp * (hp + hm))) * fp + ((hp - hm) / (hp * hm)) * f0 - (hp / (hm * (hp + hm))) * fm
    }

    /// Two-column (radius, value) rows for CSV export.
    pub fn rows(&self) -> impl Iterator<Item = (R, R)> + '_ {
        self.radii.iter().copied().zip(self.values.iter().copied())
    }
}

/// Composite Gauss-Legendre quadrature with `panels` equal panels of
/// `order` nodes each.
pub(crate) fn gauss_panels<R: Real>(
    lo: R,
    hi: R,
    panels: usize,
    order: usize,
    f: impl Fn(R) -> R,
) -> R {
    let (nodes, weights) = gauss_legendre(order);
    let width = (hi - lo) / R::of(panels as f64);
    let half = width / R::of(2.0);
    let mut acc = R::zero();
    for p in 0..panels {
        let mid = lo + width * R::of(p as f64) + half;
        for (x, w) in nodes.iter().zip(&weights) {
            acc += R::of(*w) * f(mid + half * R::of(*x));
        }
    }
    acc * half
}

/// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration.
pub(crate) fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    for i in 0..order.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = order as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent gamma oracle: Spouge's approximation with a = 20,
    /// a different construction from the Lanczos path in `gamma_fn`.
    fn gamma_spouge(z: f64) -> f64 {
        const A: usize = 20;
        if z < 0.5 {
            return std::f64::consts::PI
                / ((std::f64::consts::PI * z).sin() * gamma_spouge(1.0 - z));
        }
        let z = z - 1.0;
        let mut acc = (2.0 * std::f64::consts::PI).sqrt();
        let mut fact = 1.0f64;
        for k in 1..A {
            let kf = k as f64;
            let c = ((A as f64 - kf).powf(kf - 0.5) * (A as f64 - kf).exp()) / fact;
            acc += if k % 2 == 1 { c } else { -c } / (z + kf);
            fact *= kf;
        }
        (z + A as f64).powf(z + 0.5) * (-(z + A as f64)).exp() * acc
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn gamma_matches_reference_points() {
        // frozen from a 40-digit computation
        assert!(rel(gamma_fn(0.25f64), 3.625609908221908311931) < 1e-13);
        assert!(rel(gamma_fn(0.75f64), 1.225416702465177645129) < 1e-13);
        assert!(rel(gamma_fn(1.5f64), 0.8862269254527580136491) < 1e-13);
        assert!(rel(gamma_fn(0.125f64), 7.533941598797611904699) < 1e-13);
    }

    #[test]
    fn gamma_matches_independent_oracle() {
        let mut x = 0.05f64;
        while x < 6.0 {
            assert!(
                rel(gamma_fn(x), gamma_spouge(x)) < 1e-11,
                "gamma mismatch at {x}: {} vs {}",
                gamma_fn(x),
                gamma_spouge(x)
            );
            x += 0.037;
        }
    }

    #[test]
    fn gamma_const_reference_values() {
        // gamma_n(s) = pi^(n/2) 2^s Gamma(s/2)/Gamma((n-s)/2), frozen at 40 digits
        assert!(rel(gamma_const(0.5f64, 2).unwrap(), 13.14504720659687441286) < 1e-12);
        assert!(rel(gamma_const(1.0f64, 2).unwrap(), 6.283185307179586476925) < 1e-13);
        assert!(rel(gamma_const(0.5f64, 3).unwrap(), 31.49921989144483948858) < 1e-12);
        assert!(rel(gamma_const(0.25f64, 2).unwrap(), 25.83102609672717354484) < 1e-12);
        assert!(rel(gamma_const(0.75f64, 2).unwrap(), 8.730605779998869061804) < 1e-12);
        assert!(rel(gamma_const(0.25f64, 3).unwrap(), 56.12353550158203179466) < 1e-12);
        assert!(rel(gamma_const(0.75f64, 3).unwrap(), 23.57183060314332731256) < 1e-12);
    }

    #[test]
    fn gamma_const_rejects_out_of_range() {
        assert!(gamma_const(0.0f64, 2).is_err());
        assert!(gamma_const(2.0f64, 2).is_err());
        assert!(gamma_const(-0.5f64, 3).is_err());
    }

    #[test]
    fn cns_reference_values_and_cancellation() {
        assert!(rel(cns_const(0.5f64, 2).unwrap(), 0.1141114197937015619501) < 1e-12);
        assert!(rel(cns_const(0.5f64, 3).unwrap(), 0.0793670449178012122322) < 1e-12);
        // c_{n,s} gamma(1-s) = n - 1 + s to machine precision
        for &n in &[2usize, 3] {
            for &s in &[0.1f64, 0.25, 0.5, 0.75, 0.9] {
                let lhs = cns_const(s, n).unwrap() * gamma_const(1.0 - s, n).unwrap();
                assert!(rel(lhs, (n - 1) as f64 + s) < 1e-14);
            }
        }
    }

    fn params(n: usize, s: f64, delta: f64) -> KernelParams<f64> {
        KernelParams::with_defaults(n, s, delta).unwrap()
    }

    #[test]
    fn cutoff_plateau_support_monotone() {
        let p = params(2, 0.5, 0.25);
        assert_eq!(p.cutoff(0.0), 1.0);
        assert_eq!(p.cutoff(0.125), 1.0); // b0 delta
        assert_eq!(p.cutoff(0.25), 0.0);
        assert_eq!(p.cutoff(0.3), 0.0);
        let mut prev = f64::INFINITY;
        let mut r = 0.0;
        while r < 0.3 {
            let w = p.cutoff(r);
            assert!(w <= prev + 1e-15, "cutoff must be nonincreasing");
            assert!((0.0..=1.0).contains(&w));
            prev = w;
            r += 1e-3;
        }
    }

    #[test]
    fn rho_plateau_value_and_singularity() {
        let p = params(2, 0.5, 0.25);
        assert_eq!(p.rho(0.25).unwrap(), 0.0);
        assert_eq!(p.rho(0.4).unwrap(), 0.0);
        let r = 0.125f64;
        let expect = 1.0 / (p.gamma_one_minus_s() * r.powf(1.5));
        assert!(rel(p.rho(r).unwrap(), expect) < 1e-14);
        assert!(matches!(p.rho(0.0), Err(crate::Error::Singularity(_))));
    }

    /// Frozen 40-digit values of ||rho||_1 for the whole parameter matrix.
    const RHO_L1_TABLE: [(usize, f64, f64, f64); 12] = [
        (2, 0.25, 0.125, 0.1623911253476328263205),
        (2, 0.25, 0.25, 0.2731082303476821250983),
        (2, 0.5, 0.125, 0.2922658163093506387135),
        (2, 0.5, 0.25, 0.4133262812427273896809),
        (2, 0.75, 0.125, 0.5377723447356368849693),
        (2, 0.75, 0.25, 0.6395226986113154920908),
        (3, 0.25, 0.125, 0.1202938305005044934434),
        (3, 0.25, 0.25, 0.2023093016900243569257),
        (3, 0.5, 0.125, 0.2439328951955681523915),
        (3, 0.5, 0.25, 0.3449732086945072788447),
        (3, 0.75, 0.125, 0.4950226797658828036529),
        (3, 0.75, 0.25, 0.5886844928653013540985),
    ];

    #[test]
    fn rho_l1_norm_matches_frozen_matrix() {
        for &(n, s, delta, expect) in &RHO_L1_TABLE {
            let got = params(n, s, delta).rho_l1_norm();
            assert!(
                rel(got, expect) < 1e-11,
                "rho L1({n},{s},{delta}) = {got}, expected {expect}"
            );
        }
    }

    #[test]
    fn rho_l1_norm_scales_linearly_in_plateau_height() {
        let p1 = params(2, 0.5, 0.25);
        let p2 = KernelParams::new(2, 0.5, 0.25, 2.0, 0.5).unwrap();
        assert!(rel(p2.rho_l1_norm(), 2.0 * p1.rho_l1_norm()) < 1e-14);
    }

    /// Independent 1-d radial oracle for the mass of Q: integration by
    /// parts turns it into (sigma c_{n,s} / n) int w(r) r^{-s} dr, which
    /// is evaluated here with adaptive Simpson on the transition region
    /// (a quadrature family the implementation does not use).
    fn q_mass_oracle(p: &KernelParams<f64>) -> f64 {
        fn simpson(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, depth: u32, whole: f64) -> f64 {
            let mid = 0.5 * (lo + hi);
            let left = (hi - lo) / 12.0 * (f(lo) + 4.0 * f(0.5 * (lo + mid)) + f(mid));
            let right = (hi - lo) / 12.0 * (f(mid) + 4.0 * f(0.5 * (mid + hi)) + f(hi));
            if depth == 0 || (left + right - whole).abs() < 1e-13 * whole.abs().max(1e-16) {
                left + right
            } else {
                simpson(f, lo, mid, depth - 1, left) + simpson(f, mid, hi, depth - 1, right)
            }
        }
        let b = p.b0 * p.delta;
        let s = p.s;
        let plateau = p.a0 * b.powf(1.0 - s) / (1.0 - s);
        let f = |r: f64| p.cutoff(r) * r.powf(-s);
        let start = (p.delta - b) / 6.0;
        let whole = start * (f(b) + 4.0 * f(b + start / 2.0) + f(b + start));
        let transition = simpson(&f, b, p.delta, 40, whole);
        sphere_area::<f64>(p.dim) * p.cns() / p.dim as f64 * (plateau + transition)
    }

    #[test]
    fn q_profile_shape_and_tail() {
        let p = params(2, 0.5, 0.25);
        let q = p.q_profile(256).unwrap();
        assert_eq!(*q.radii.last().unwrap(), 0.25);
        assert_eq!(*q.values.last().unwrap(), 0.0);
        assert_eq!(q.tail_value, 0.0);
        assert!(q.radii.windows(2).all(|w| w[0] < w[1]));
        assert!(q.values.iter().all(|v| v.is_finite()));
        assert_eq!(q.singular_exponent, 1.5);
        assert!(p.q_profile(32).is_err());
    }

    #[test]
    fn q_profile_matches_frozen_point_values() {
        let p = params(2, 0.5, 0.25);
        let q = p.q_profile(Q_PROFILE_DEFAULT_RESOLUTION).unwrap();
        for &(r, expect) in &[
            (0.01, 75.11552354111519673893),
            (0.0625, 3.909997589845422082041),
            (0.125, 0.7626081319157810049926),
            (0.2, 0.02074416639342808305033),
        ] {
            assert!(
                rel(q.eval(r), expect) < 1e-6,
                "Q({r}) = {}, expected {expect}",
                q.eval(r)
            );
        }
    }

    #[test]
    fn q_slope_matches_kernel_relation() {
        // dQ/dr = -(n-1+s) rho(r)/r, checked at every interior knot
        let p = params(2, 0.5, 0.25);
        let q = p.q_profile(Q_PROFILE_DEFAULT_RESOLUTION).unwrap();
        let nu = p.nu();
        // the cutoff is flat to all orders at the horizon, so the relative
        // check is meaningful where w still has size
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        for i in 1..q.radii.len() - 1 {
            let r = q.radii[i];
            if p.cutoff(r) < 0.1 {
                continue;
            }
            let expect = -nu * p.rho(r).unwrap() / r;
            worst = worst.max(rel(q.fd_slope(i), expect));
            checked += 1;
        }
        assert!(checked > 1000);
        assert!(worst < 1e-6, "worst slope deviation {worst}");
    }

    #[test]
    fn q_mass_identity_over_parameter_matrix() {
        // int Q = ((n-1+s)/n) ||rho||_1, and both agree with the
        // independent Simpson oracle
        for &(n, s, delta, rho_l1) in &RHO_L1_TABLE {
            let p = params(n, s, delta);
            let q = p.q_profile(4096).unwrap();
            let expect = (p.nu() / n as f64) * rho_l1;
            assert!(
                rel(q.mass(), expect) < 1e-8,
                "mass({n},{s},{delta}) = {}, expected {expect}",
                q.mass()
            );
            assert!(rel(q_mass_oracle(&p), expect) < 1e-9);
        }
    }

    #[test]
    fn q_near_ball_mass_recovers_total() {
        let p = params(2, 0.5, 0.25);
        let q = p.q_profile(4096).unwrap();
        assert!(rel(q.near_ball_mass(&p, 0.25), q.mass()) < 1e-7);
        // and the affine factor is the same number
        assert!(rel(p.affine_factor(), 0.3099947109320455422607) < 1e-11);
    }

    #[test]
    fn works_in_single_precision() {
        let p = KernelParams::<f32>::with_defaults(2, 0.5, 0.25).unwrap();
        assert!((p.rho_l1_norm() - 0.41332628).abs() < 1e-4);
        assert_eq!(p.cutoff(0.3), 0.0);
    }

    #[test]
    fn parameter_validation() {
        assert!(KernelParams::new(4, 0.5f64, 0.25, 1.0, 0.5).is_err());
        assert!(KernelParams::new(2, 1.5f64, 0.25, 1.0, 0.5).is_err());
        assert!(KernelParams::new(2, 0.5f64, -0.1, 1.0, 0.5).is_err());
        assert!(KernelParams::new(2, 0.5f64, 0.25, 0.0, 0.5).is_err());
        assert!(KernelParams::new(2, 0.5f64, 0.25, 1.0, 1.0).is_err());
    }
}
