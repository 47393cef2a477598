use statrs::function::erf::erfc;

use crate::stats;

pub const BANDWIDTH_FLOOR: f64 = 1e-3;

/// Silverman's rule `0.9 min(sd, IQR / 1.34) n^(-1/5)`, falling back to `sd`
/// when the IQR is zero, floored at [`BANDWIDTH_FLOOR`].
pub fn silverman_bandwidth(row: &[f64]) -> f64 {
    let sd = stats::sample_sd(row);
    let s = stats::sorted(row);
    let iqr = stats::quantile_sorted(&s, 0.75) - stats::quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    (0.9 * spread * (row.len() as f64).powf(-0.2)).max(BANDWIDTH_FLOOR)
}

/// Mass above `t` of the Gaussian KDE with bandwidth `h` centred on `row`.
pub fn kde_tail_mass(row: &[f64], h: f64, t: f64) -> f64 {
    if t == f64::INFINITY {
        return 0.0;
    }
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    let z = std::f64::consts::SQRT_2 * h;
    row.iter().map(|x| 0.5 * erfc((t - x) / z)).sum::<f64>() / row.len() as f64
}
