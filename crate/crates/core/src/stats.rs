//! Small order-statistics helpers.

/// Linear-interpolated percentile (`p` in `[0, 100]`), the same convention as
/// numpy's default. Returns `NaN` for an empty slice.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut buf = values.to_vec();
    percentile_in_place(&mut buf, p)
}

/// As [`percentile`], reordering `buf` instead of copying it.
pub fn percentile_in_place(buf: &mut [f64], p: f64) -> f64 {
    let n = buf.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = (p.clamp(0.0, 100.0) / 100.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_val, rest) = buf.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return lo_val;
    }
    let hi_val = rest.iter().cloned().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// Difference between the 99th and 1st percentiles.
pub fn signal_range(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    let hi = percentile_in_place(&mut buf, 99.0);
    let lo = percentile_in_place(&mut buf, 1.0);
    hi - lo
}

pub fn mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return 0.0;
    };
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let first = values[0];
    let n = values.len() as f64;
    let (s, ss) = values
        .iter()
        .map(|v| v - first)
        .fold((0.0, 0.0), |(s, ss), d| (s + d, ss + d * d));
    ((ss - s * s / n).max(0.0) / (n - 1.0)).sqrt()
}
