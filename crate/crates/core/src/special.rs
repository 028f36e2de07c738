//! Distribution functions used for calibration.

use statrs::function::gamma::{gamma_lr, ln_gamma};

/// CDF of a Gamma(shape, scale) variable.
pub fn gamma_cdf(shape: f64, scale: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma_lr(shape, x / scale)
    }
}

fn gamma_pdf(shape: f64, scale: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let z = x / scale;
    ((shape - 1.0) * z.ln() - z - ln_gamma(shape)).exp() / scale
}

/// Quantile of Gamma(shape, scale) by bracketing, bisection and a Newton
/// polish, accurate to about 1e-10 in probability.
pub fn gamma_quantile(shape: f64, scale: f64, p: f64) -> f64 {
    assert!(shape > 0.0 && scale > 0.0, "gamma parameters must be positive");
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let cdf = |x: f64| gamma_cdf(shape, scale, x);
    let mut lo = 0.0;
    let mut hi = shape * scale;
    while cdf(hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    // the lower tail of small shapes sits many decades below the mean
    while hi - lo > 1e-6 * hi {
        let mid = if lo > 0.0 && hi / lo > 4.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        let mid = if mid <= 0.0 { 0.5 * hi } else { mid };
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi < 1e-300 {
            return hi;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..50 {
        let f = cdf(x) - p;
        let d = gamma_pdf(shape, scale, x);
        if d <= 0.0 || !d.is_finite() {
            break;
        }
        let next = x - f / d;
        let next = if next <= lo || next >= hi { 0.5 * (lo + hi) } else { next };
        if f < 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        if (next - x).abs() <= 1e-14 * x {
            x = next;
            break;
        }
        x = next;
    }
    x
}

pub fn chi2_cdf(df: f64, x: f64) -> f64 {
    gamma_cdf(0.5 * df, 2.0, x)
}

pub fn chi2_quantile(df: f64, p: f64) -> f64 {
    gamma_quantile(0.5 * df, 2.0, p)
}

/// `P(χ²_{k+2} ≤ a) / P(χ²_k ≤ a)`, the variance factor left on each
/// direction by a spherical acceptance region of squared radius `a`.
pub fn truncated_chi2_factor(k: usize, a: f64) -> f64 {
    if a.is_infinite() {
        return 1.0;
    }
    if a <= 0.0 {
        return 0.0;
    }
    let num = chi2_cdf(k as f64 + 2.0, a);
    let den = chi2_cdf(k as f64, a);
    if den <= 0.0 {
        // both underflow: leading term of the series ratio
        return a / (k as f64 + 2.0);
    }
    (num / den).min(1.0)
}

/// Constant in the small-ellipsoid approximation of the variance factors:
/// `2π/(d+2)` times the unit-ball volume raised to `-2/d`.
pub fn ball_constant(d: usize) -> f64 {
    let d = d as f64;
    let ln_vol = 0.5 * d * std::f64::consts::PI.ln() - ln_gamma(0.5 * d + 1.0);
    2.0 * std::f64::consts::PI / (d + 2.0) * (-2.0 / d * ln_vol).exp()
}
