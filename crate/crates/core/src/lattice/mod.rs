//! Periodic square lattice, U(1) link angles, Wilson action and topology.
//!
//! Conventions used throughout the crate:
//!
//! * direction `mu = 0` is the x direction, `mu = 1` the y direction;
//! * link angles are stored direction-major as `[mu][x][y]`;
//! * the plaquette anchored at site `n` (its lower-left corner) is
//!   `x_P(n) = x_0(n) + x_1(n + e_x) - x_0(n + e_y) - x_1(n)`;
//! * the action is `S = beta * sum_P (1 - cos x_P)`.
//!
//! Configurations are never wrapped implicitly. Observables that need the
//! principal value of an angle wrap internally.

mod exact;

pub use exact::{bessel_i, exact_average_plaquette, exact_log_partition};

use std::f64::consts::{PI, TAU};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Size of an `lx * ly` periodic lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Geometry {
    lx: usize,
    ly: usize,
}

impl Geometry {
    pub fn new(lx: usize, ly: usize) -> Result<Self> {
        if lx < 2 || ly < 2 {
            return Err(Error::domain(format!(
                "lattice extents must be at least 2, got {lx}x{ly}"
            )));
        }
        Ok(Self { lx, ly })
    }

    pub fn square(l: usize) -> Result<Self> {
        Self::new(l, l)
    }

    #[inline]
    pub fn lx(&self) -> usize {
        self.lx
    }

    #[inline]
    pub fn ly(&self) -> usize {
        self.ly
    }

    /// Number of sites, which equals the number of plaquettes.
    #[inline]
    pub fn volume(&self) -> usize {
        self.lx * self.ly
    }

    #[inline]
    pub fn n_plaquettes(&self) -> usize {
        self.volume()
    }

    #[inline]
    pub fn n_links(&self) -> usize {
        2 * self.volume()
    }

    /// Flat index of site `(x, y)` within one direction plane.
    #[inline]
    pub fn site(&self, x: usize, y: usize) -> usize {
        x * self.ly + y
    }

    /// Flat index of link `x_mu(x, y)` in the `[mu][x][y]` layout.
    #[inline]
    pub fn link(&self, mu: usize, x: usize, y: usize) -> usize {
        mu * self.volume() + self.site(x, y)
    }

    #[inline]
    fn up_x(&self, x: usize) -> usize {
        if x + 1 == self.lx {
            0
        } else {
            x + 1
        }
    }

    #[inline]
    fn up_y(&self, y: usize) -> usize {
        if y + 1 == self.ly {
            0
        } else {
            y + 1
        }
    }

    #[inline]
    fn down_x(&self, x: usize) -> usize {
        if x == 0 {
            self.lx - 1
        } else {
            x - 1
        }
    }

    #[inline]
    fn down_y(&self, y: usize) -> usize {
        if y == 0 {
            self.ly - 1
        } else {
            y - 1
        }
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.lx, self.ly)
    }
}

/// Inverse gauge coupling `beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coupling(f64);

impl Coupling {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::domain(format!("beta must be positive, got {beta}")));
        }
        Ok(Self(beta))
    }

    #[inline]
    pub fn beta(&self) -> f64 {
        self.0
    }
}

/// Link angles `x_mu(n)` of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GaugeConfig {
    geom: Geometry,
    angles: Vec<f64>,
}

impl GaugeConfig {
    /// All links zero: the unique minimum of the action.
    pub fn cold(geom: Geometry) -> Self {
        Self {
            geom,
            angles: vec![0.0; geom.n_links()],
        }
    }

    /// Independent uniform angles in `(-pi, pi]`.
    pub fn random<R: Rng + ?Sized>(geom: Geometry, rng: &mut R) -> Self {
        let angles = (0..geom.n_links()).map(|_| rng::uniform_angle(rng)).collect();
        Self { geom, angles }
    }

    /// Same as [`GaugeConfig::random`] on a fresh stream derived from `seed`.
    pub fn random_seeded(geom: Geometry, seed: u64) -> Self {
        Self::random(geom, &mut rng::stream(seed, 0))
    }

    pub fn from_angles(geom: Geometry, angles: Vec<f64>) -> Result<Self> {
        if angles.len() != geom.n_links() {
            return Err(Error::Shape {
                op: "GaugeConfig::from_angles",
                lhs: vec![2, geom.lx(), geom.ly()],
                rhs: vec![angles.len()],
            });
        }
        if let Some(i) = angles.iter().position(|a| !a.is_finite()) {
            return Err(Error::domain(format!("link angle {i} is not finite")));
        }
        Ok(Self { geom, angles })
    }

    pub(crate) fn from_angles_unchecked(geom: Geometry, angles: Vec<f64>) -> Self {
        debug_assert_eq!(angles.len(), geom.n_links());
        Self { geom, angles }
    }

    #[inline]
    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    #[inline]
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    #[inline]
    pub fn angles_mut(&mut self) -> &mut [f64] {
        &mut self.angles
    }

    pub fn into_angles(self) -> Vec<f64> {
        self.angles
    }

    #[inline]
    pub fn link(&self, mu: usize, x: usize, y: usize) -> f64 {
        self.angles[self.geom.link(mu, x, y)]
    }

    #[inline]
    pub fn set_link(&mut self, mu: usize, x: usize, y: usize, value: f64) {
        let i = self.geom.link(mu, x, y);
        self.angles[i] = value;
    }

    /// Wrap every angle into `(-pi, pi]`.
    pub fn canonicalize(&mut self) {
        for a in &mut self.angles {
            *a = wrap(*a);
        }
    }

    pub fn canonicalized(&self) -> Self {
        let mut c = self.clone();
        c.canonicalize();
        c
    }

    pub fn is_finite(&self) -> bool {
        self.angles.iter().all(|a| a.is_finite())
    }
}

/// Principal value of an angle in `(-pi, pi]`, without input checking.
#[inline]
pub fn wrap(theta: f64) -> f64 {
    let mut r = theta - TAU * ((theta - PI) / TAU).ceil();
    if r <= -PI {
        r += TAU;
    } else if r > PI {
        r -= TAU;
    }
    r
}

/// Principal value of `theta` in `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::domain(format!("cannot wrap non-finite angle {theta}")));
    }
    Ok(wrap(theta))
}

/// Unwrapped plaquette angles `x_P(n)` in `[x][y]` order.
pub fn plaquette_field(cfg: &GaugeConfig) -> Vec<f64> {
    let g = cfg.geom;
    let (lx, ly) = (g.lx, g.ly);
    let v = g.volume();
    let (x0, x1) = cfg.angles.split_at(v);
    let mut out = vec![0.0; v];
    for x in 0..lx {
        let xp = g.up_x(x);
        for y in 0..ly {
            let yp = g.up_y(y);
            out[x * ly + y] = x0[x * ly + y] + x1[xp * ly + y] - x0[x * ly + yp] - x1[x * ly + y];
        }
    }
    out
}

/// `beta * sum_P (1 - cos x_P)`.
pub fn wilson_action(cfg: &GaugeConfig, coupling: Coupling) -> f64 {
    let sum: f64 = plaquette_field(cfg).iter().map(|p| 1.0 - p.cos()).sum();
    coupling.beta() * sum
}

/// Analytic `dS/dx_mu(n)` in the `[mu][x][y]` layout.
///
/// A link enters two plaquettes with opposite signs: `x_0(n)` is the bottom
/// edge of `P(n)` and the top edge of `P(n - e_y)`; `x_1(n)` is the left edge
/// of `P(n)` and the right edge of `P(n - e_x)`.
pub fn action_gradient(cfg: &GaugeConfig, coupling: Coupling) -> Vec<f64> {
    let mut out = vec![0.0; cfg.geom.n_links()];
    action_gradient_into(cfg, coupling, &mut out);
    out
}

pub(crate) fn action_gradient_into(cfg: &GaugeConfig, coupling: Coupling, out: &mut [f64]) {
    let g = cfg.geom;
    let (lx, ly) = (g.lx, g.ly);
    let v = g.volume();
    let beta = coupling.beta();
    let sin_p: Vec<f64> = plaquette_field(cfg).iter().map(|p| p.sin()).collect();
    let (f0, f1) = out.split_at_mut(v);
    for x in 0..lx {
        let xm = g.down_x(x);
        for y in 0..ly {
            let ym = g.down_y(y);
            let here = sin_p[x * ly + y];
            f0[x * ly + y] = beta * (here - sin_p[x * ly + ym]);
            f1[x * ly + y] = beta * (sin_p[xm * ly + y] - here);
        }
    }
}

/// `(1 / V) * sum_P cos x_P`.
pub fn average_plaquette(cfg: &GaugeConfig) -> f64 {
    let p = plaquette_field(cfg);
    p.iter().map(|a| a.cos()).sum::<f64>() / p.len() as f64
}

/// Real-valued charge `(1 / 2pi) * sum_P wrap(x_P)` before rounding.
pub fn topological_charge_raw(cfg: &GaugeConfig) -> f64 {
    plaquette_field(cfg).iter().map(|&p| wrap(p)).sum::<f64>() / TAU
}

/// Integer topological charge.
pub fn topological_charge(cfg: &GaugeConfig) -> Result<i64> {
    let raw = topological_charge_raw(cfg);
    let q = raw.round();
    if !raw.is_finite() || (raw - q).abs() > 1e-6 {
        return Err(Error::numerical(format!(
            "topological charge {raw} is not close to an integer"
        )));
    }
    Ok(q as i64)
}

/// Uniform-flux configuration carrying charge `q`.
///
/// `x_1(n) = 2 pi q n_x / V` everywhere and `x_0(n) = -2 pi q n_y / L_y` on the
/// last column, so every plaquette angle wraps to `2 pi q / V`.
pub fn instanton_config(geom: Geometry, q: i64) -> Result<GaugeConfig> {
    let v = geom.volume() as f64;
    if (2 * q.unsigned_abs()) as f64 >= v {
        return Err(Error::domain(format!(
            "charge {q} too large for a {geom} lattice (need |q| < {})",
            v / 2.0
        )));
    }
    let mut cfg = GaugeConfig::cold(geom);
    let qf = q as f64;
    for x in 0..geom.lx {
        for y in 0..geom.ly {
            cfg.set_link(1, x, y, TAU * qf * x as f64 / v);
        }
    }
    let last = geom.lx - 1;
    for y in 0..geom.ly {
        cfg.set_link(0, last, y, -TAU * qf * y as f64 / geom.ly as f64);
    }
    Ok(cfg)
}

/// Apply the gauge rotation `x_mu(n) -> x_mu(n) + phi(n) - phi(n + e_mu)`.
pub fn gauge_transform(cfg: &GaugeConfig, phi: &[f64]) -> Result<GaugeConfig> {
    let g = cfg.geom;
    if phi.len() != g.volume() {
        return Err(Error::Shape {
            op: "gauge_transform",
            lhs: vec![g.lx, g.ly],
            rhs: vec![phi.len()],
        });
    }
    let mut out = cfg.clone();
    for x in 0..g.lx {
        for y in 0..g.ly {
            let here = phi[g.site(x, y)];
            let i0 = g.link(0, x, y);
            let i1 = g.link(1, x, y);
            out.angles[i0] += here - phi[g.site(g.up_x(x), y)];
            out.angles[i1] += here - phi[g.site(x, g.up_y(y))];
        }
    }
    Ok(out)
}
