//! Unit helpers and reference constants.

use std::f64::consts::PI;

/// Convert a frequency quoted in MHz (cycles per μs) to rad/μs.
pub fn mhz(f: f64) -> f64 {
    2.0 * PI * f
}

/// Convert an angular frequency in rad/μs back to MHz.
pub fn to_mhz(w: f64) -> f64 {
    w / (2.0 * PI)
}

/// Spin-field scaling dimension of the (1+1)d Ising CFT.
pub const DELTA_SIGMA_1D: f64 = 0.125;
/// Spin-field scaling dimension of the (2+1)d Ising CFT (conformal bootstrap estimate).
pub const DELTA_SIGMA_2D: f64 = 0.518149;
/// Energy-field scaling dimension of the (1+1)d Ising CFT.
pub const DELTA_EPSILON_1D: f64 = 1.0;
/// Energy-field scaling dimension of the (2+1)d Ising CFT (approximate).
pub const DELTA_EPSILON_2D: f64 = 1.4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mhz_round_trip() {
        assert!((to_mhz(mhz(1.6)) - 1.6).abs() < 1e-15);
        assert!((mhz(1.0) - 2.0 * PI).abs() < 1e-15);
    }
}
