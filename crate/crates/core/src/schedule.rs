//! Sine-shaped curriculum weights for the auxiliary losses.
//!
//! Each weight is `sin(π/2 · progress + π/2 · easiness)` where `progress` is
//! the fraction of the epoch budget elapsed since the term switched on and
//! `easiness` places the sample on [0, 1]. The argument is deliberately not
//! clamped: late in training it passes π/2 and the weight of easy samples
//! falls again.

use std::f64::consts::FRAC_PI_2;

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

fn progress(e: usize, start: usize, e_all: usize) -> f64 {
    ratio(e as f64 - start as f64, e_all as f64)
}

/// Weight of the sequence-alignment loss for a uniform sequence with interval variance `v`.
pub fn sequence_weight(e: usize, e_b: usize, e_all: usize, v: f64, v_max: f64, v_min: f64) -> f64 {
    (FRAC_PI_2 * progress(e, e_b, e_all) + FRAC_PI_2 * ratio(v_max - v, v_max - v_min)).sin()
}

/// Weight of the transfer-network loss for a frequent item with count `f`.
pub fn item_weight(e: usize, e_b: usize, e_all: usize, f: f64, f_min: f64, f_max: f64) -> f64 {
    (FRAC_PI_2 * progress(e, e_b, e_all) + FRAC_PI_2 * ratio(f - f_min, f_max - f_min)).sin()
}

/// Weight of the less-frequent refinement loss.
pub fn lowfreq_weight(e: usize, e_t: usize, e_all: usize) -> f64 {
    (FRAC_PI_2 * progress(e, e_t, e_all)).sin()
}
