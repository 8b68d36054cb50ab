//! Elementary float functions for `no_std`, backed by libm so results do not
//! depend on whether std happens to be linked.

pub(crate) use libm::{atan, ceil, cos, exp, floor, log as ln, sin, sqrt};

pub(crate) fn sin_cos(x: f64) -> (f64, f64) {
    libm::sincos(x)
}

pub(crate) fn sq(x: f64) -> f64 {
    x * x
}

pub(crate) fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, f64::from(n))
}
