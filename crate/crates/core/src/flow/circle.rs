//! Scalar circle diffeomorphism used by the plaquette coupling layers.

use crate::autodiff::{ncp_log_jacobian, ncp_shift};
use crate::lattice::wrap;

/// `theta' = wrap(2 atan(e^s tan(theta / 2)) + t)` and `log dtheta'/dtheta`.
///
/// The map is evaluated through a seam-free formulation, so `theta = pi`
/// needs no special case and lands on `wrap(pi + t)`.
pub fn circle_map_forward(theta: f64, s: f64, t: f64) -> (f64, f64) {
    (wrap(theta + ncp_shift(theta, s) + t), ncp_log_jacobian(theta, s))
}

/// Inverse of [`circle_map_forward`]; the log-Jacobian is that of the inverse map.
pub fn circle_map_inverse(theta: f64, s: f64, t: f64) -> (f64, f64) {
    let u = theta - t;
    (wrap(u + ncp_shift(u, -s)), ncp_log_jacobian(u, -s))
}
