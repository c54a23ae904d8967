//! Per-record noise scale.

use crate::real::Real;

/// Lower bound on any estimated scale, seconds.
pub const NOISE_FLOOR: f64 = 0.5;

/// Median of `|e_0 - (e_-1 + e_1) / 2|` for i.i.d. unit-scale Laplace `e`.
const MEDIAN_INTERP_RESIDUAL: f64 = 1.0089;

/// Laplace scale from the readings alone.
///
/// Each interior reading is compared with the time-weighted interpolation of its
/// two neighbours; the median absolute residual, rescaled to the Laplace
/// parameter, is the estimate. Slow trends cancel in the interpolation, so only
/// curvature leaks into the estimate. Fewer than three readings give the floor.
pub fn estimate_noise_scale<R: Real>(observations: &[(usize, R)]) -> R {
    let floor = R::lit(NOISE_FLOOR);
    if observations.len() < 3 {
        return floor;
    }
    let mut res: Vec<R> = observations
        .windows(3)
        .map(|w| {
            let (t0, y0) = w[0];
            let (t1, y1) = w[1];
            let (t2, y2) = w[2];
            let span = R::from_usize(t2 - t0).unwrap();
            let a = R::from_usize(t2 - t1).unwrap() / span;
            (y1 - (a * y0 + (R::one() - a) * y2)).abs()
        })
        .collect();
    res.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = res.len();
    let med = if n % 2 == 1 {
        res[n / 2]
    } else {
        (res[n / 2 - 1] + res[n / 2]) / R::lit(2.0)
    };
    (med / R::lit(MEDIAN_INTERP_RESIDUAL)).max(floor)
}
