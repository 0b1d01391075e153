use statrs::function::erf::erfc;

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// `ln(erfc(x))`, accurate far into the upper tail where `erfc` underflows.
pub fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return erfc(x).ln();
    }
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * LN_PI + series.ln()
}

/// `ln(Phi(z))` for the standard normal CDF.
pub fn log_ndtr(z: f64) -> f64 {
    (0.5f64).ln() + log_erfc(-z / std::f64::consts::SQRT_2)
}

pub fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (-(a - b).abs()).exp().ln_1p()
}

/// `ln(e^a - e^b)` for `a >= b`.
pub fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp_m1()).ln()
}
