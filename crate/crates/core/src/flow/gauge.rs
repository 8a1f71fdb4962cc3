//! Gauge-equivariant plaquette coupling layers.
//!
//! A layer updates links of one direction `mu`. Plaquettes are split by
//! their coordinate perpendicular to `mu` (stripes of period
//! [`MASK_PERIOD`]): the *active* row `offset` has one link moved per
//! plaquette, the *passive* row directly below shares those links and
//! changes as a side effect, and every other row is *frozen* and feeds the
//! conditioning network. Consecutive layers alternate `mu` and advance the
//! offset so that eight layers touch every link of a lattice whose sides
//! are at least four.

use crate::autodiff::{BoundParams, Tensor, Var};
use crate::error::{Error, Result};
use crate::lattice::Geometry;

/// Only mask pattern implemented: stripes of period four.
pub const STRIPES4: u32 = 0;
/// Translation period of the mask pattern, in lattice units.
pub const MASK_PERIOD: usize = 4;

/// Link direction and active-row offset of layer `index`.
pub fn layer_pattern(index: usize) -> (usize, usize) {
    (index % 2, (index / 2) % MASK_PERIOD)
}

/// One coupling layer bound to a geometry.
#[derive(Clone, Debug)]
pub struct PlaquetteCouplingLayer {
    mu: usize,
    offset: usize,
    geom: Geometry,
    active: Tensor,
    passive: Tensor,
    frozen: Tensor,
    /// `(kernel, bias)` parameter ids, input layer first.
    convs: Vec<(usize, usize)>,
}

impl PlaquetteCouplingLayer {
    pub fn new(geom: Geometry, mu: usize, offset: usize, convs: Vec<(usize, usize)>) -> Result<Self> {
        if mu > 1 || offset >= MASK_PERIOD {
            return Err(Error::domain(format!("invalid layer pattern mu={mu} offset={offset}")));
        }
        let (lx, ly) = (geom.lx(), geom.ly());
        // coordinate perpendicular to the updated links
        let perp_len = if mu == 0 { ly } else { lx };
        let row_is_active = |r: usize| r % MASK_PERIOD == offset;
        let row_is_passive = |r: usize| row_is_active((r + 1) % perp_len);
        if let Some(r) = (0..perp_len).find(|&r| row_is_active(r) && row_is_passive(r)) {
            return Err(Error::domain(format!(
                "mask pattern inconsistent on {geom}: row {r} is both active and passive for mu={mu} offset={offset}"
            )));
        }
        let mut active = vec![0.0; lx * ly];
        let mut passive = vec![0.0; lx * ly];
        let mut frozen = vec![0.0; lx * ly];
        for x in 0..lx {
            for y in 0..ly {
                let r = if mu == 0 { y } else { x };
                let slot = if row_is_active(r) {
                    &mut active
                } else if row_is_passive(r) {
                    &mut passive
                } else {
                    &mut frozen
                };
                slot[x * ly + y] = 1.0;
            }
        }
        let mask = |d| Tensor::new(vec![lx, ly], d).expect("mask shape");
        Ok(Self {
            mu,
            offset,
            geom,
            active: mask(active),
            passive: mask(passive),
            frozen: mask(frozen),
            convs,
        })
    }

    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    /// 0/1 masks over plaquettes in `[x][y]` order.
    pub fn active_mask(&self) -> &[f64] {
        self.active.data()
    }

    pub fn passive_mask(&self) -> &[f64] {
        self.passive.data()
    }

    pub fn frozen_mask(&self) -> &[f64] {
        self.frozen.data()
    }

    pub fn convs(&self) -> &[(usize, usize)] {
        &self.convs
    }

    /// Storage indices of the links this layer moves, one per active
    /// plaquette: `x_0(n)` for `mu = 0` and `x_1(n)` for `mu = 1`.
    pub fn assigned_links(&self) -> Vec<usize> {
        let v = self.geom.volume();
        self.active
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == 1.0)
            .map(|(site, _)| self.mu * v + site)
            .collect()
    }

    /// Apply the layer (or its inverse) to a batch of link tensors `[B, 2, Lx, Ly]`.
    ///
    /// Returns the new links and the per-sample log-Jacobian `[B]`.
    pub fn apply<'t>(&self, links: Var<'t>, params: &BoundParams<'t>, inverse: bool) -> Result<(Var<'t>, Var<'t>)> {
        let tape = links.tape();
        let p = plaquettes(links)?;
        let frozen = tape.constant(self.frozen.clone());
        let active = tape.constant(self.active.clone());
        let mut h = tape.concat(&[p.cos().mul(frozen)?, p.sin().mul(frozen)?], 1)?;
        for (i, &(k, b)) in self.convs.iter().enumerate() {
            h = h.conv2d_periodic(params.get(k), Some(params.get(b)))?;
            if i + 1 < self.convs.len() {
                h = h.tanh();
            }
        }
        let s = h.slice(1, 0, 1)?;
        let t = h.slice(1, 1, 1)?;
        let (delta, log_jac) = if inverse {
            // undo the shift, then apply the map with -s; periodicity makes
            // wrapping unnecessary
            let u = p.sub(t)?;
            let ns = s.neg();
            (u.ncp_shift(ns)?.sub(t)?, u.ncp_log_jacobian(ns)?)
        } else {
            (p.ncp_shift(s)?.add(t)?, p.ncp_log_jacobian(s)?)
        };
        let delta = delta.mul(active)?;
        let log_jac = sum_sites(log_jac.mul(active)?)?;
        let zeros = tape.constant(Tensor::zeros(&delta.shape()));
        // x_0(n) enters P(n) with +, x_1(n) with -
        let update = if self.mu == 0 {
            tape.concat(&[delta, zeros], 1)?
        } else {
            tape.concat(&[zeros, delta.neg()], 1)?
        };
        Ok((links.add(update)?, log_jac))
    }
}

/// Plaquette angles `[B, 1, Lx, Ly]` of link tensors `[B, 2, Lx, Ly]`, unwrapped.
pub fn plaquettes<'t>(links: Var<'t>) -> Result<Var<'t>> {
    let shape = links.shape();
    if shape.len() != 4 || shape[1] != 2 {
        return Err(Error::Shape {
            op: "plaquettes",
            lhs: vec![0, 2, 0, 0],
            rhs: shape,
        });
    }
    let x0 = links.slice(1, 0, 1)?;
    let x1 = links.slice(1, 1, 1)?;
    // roll by -1 reads the neighbour at +1
    x0.add(x1.roll(2, -1)?)?.sub(x0.roll(3, -1)?)?.sub(x1)
}

/// Wilson action `[B]` of link tensors `[B, 2, Lx, Ly]`.
pub fn wilson_action_batch<'t>(links: Var<'t>, beta: f64) -> Result<Var<'t>> {
    let p = plaquettes(links)?;
    let shape = p.shape();
    let n_plaq = (shape[2] * shape[3]) as f64;
    Ok(sum_sites(p.cos())?.scale(-beta).add_scalar(beta * n_plaq))
}

/// Sum `[B, C, X, Y]` over everything but the batch axis.
fn sum_sites(v: Var<'_>) -> Result<Var<'_>> {
    v.sum_axis(3)?.sum_axis(2)?.sum_axis(1)
}

/// Stack configurations' angles into `[B, 2, Lx, Ly]`.
pub(crate) fn batch_tensor(geom: Geometry, angles: &[&[f64]]) -> Tensor {
    let mut data = Vec::with_capacity(angles.len() * geom.n_links());
    for a in angles {
        data.extend_from_slice(a);
    }
    Tensor::new(vec![angles.len(), 2, geom.lx(), geom.ly()], data).expect("batch shape")
}

