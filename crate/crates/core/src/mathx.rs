//! Float helpers routed through `libm` so results are identical with and
//! without the standard library.

#[inline]
pub fn abs(x: f64) -> f64 {
    if x.is_sign_negative() {
        -x
    } else {
        x
    }
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub const TAU: f64 = core::f64::consts::TAU;
