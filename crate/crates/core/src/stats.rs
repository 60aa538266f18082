//! Numerical helpers: order-independent summation, sample moments, and the
//! Student-t distribution.

use std::f64::consts::PI;

/// Compensated (Neumaier) sum of the values in the given order.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sum that does not depend on the order of `values`: the terms are sorted
/// by total order before compensated accumulation.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    kahan_sum(sorted)
}

/// Order-independent mean. Returns NaN for an empty slice.
pub fn stable_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    stable_sum(values) / values.len() as f64
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    kahan_sum(values.iter().copied()) / values.len() as f64
}

/// Unbiased sample variance (denominator `n - 1`); 0 for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    kahan_sum(values.iter().map(|v| (v - m) * (v - m))) / (n - 1) as f64
}

pub fn sample_std(values: &[f64]) -> f64 {
    sample_variance(values).sqrt()
}

/// Standard error of the mean.
pub fn std_error(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    sample_std(values) / (values.len() as f64).sqrt()
}

// ── Special functions ───────────────────────────────────────────────────

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Stirling series remainder `ln_gamma(x) - [(x - 1/2) ln x - x + ln(2 pi)/2]`.
fn stirling_correction(x: f64) -> f64 {
    let x2 = x * x;
    (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * x2)) / x2) / x2) / x
}

fn ln_beta(a: f64, b: f64) -> f64 {
    let (small, big) = if a < b { (a, b) } else { (b, a) };
    if big < 10.0 {
        return ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    }
    // ln_gamma(big) - ln_gamma(big + small) without cancellation
    let diff = -(big - 0.5) * (small / big).ln_1p() - small * (big + small).ln()
        + small
        + stirling_correction(big)
        - stirling_correction(big + small);
    ln_gamma(small) + diff
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    inc_beta_split(a, b, x, 1.0 - x)
}

/// `I_x(a, b)` with the complement `y = 1 - x` supplied by the caller, which
/// keeps full precision when `x` is within rounding of 1.
fn inc_beta_split(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * y.ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, y) / b
    }
}

/// Upper tail `P(T > |t|)` of Student's t.
fn student_t_tail(t: f64, dof: f64) -> f64 {
    let t2 = t * t;
    0.5 * inc_beta_split(0.5 * dof, 0.5, dof / (dof + t2), t2 / (dof + t2))
}

/// CDF of Student's t distribution with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = student_t_tail(t, dof);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

pub fn student_t_pdf(t: f64, dof: f64) -> f64 {
    let ln_norm = ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof) - 0.5 * (dof * PI).ln();
    (ln_norm - 0.5 * (dof + 1.0) * (1.0 + t * t / dof).ln()).exp()
}

/// Inverse CDF of Student's t distribution.
///
/// Safeguarded Newton iteration on the CDF inside a bisection bracket; the
/// result is accurate to well below `1e-8` for `p` in `[1e-12, 1 - 1e-12]`.
pub fn student_t_quantile(p: f64, dof: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    assert!(dof > 0.0, "degrees of freedom must be positive");
    if p == 0.5 {
        return 0.0;
    }
    if p < 0.5 {
        return -student_t_quantile(1.0 - p, dof);
    }
    // Upper tail: work with q = 1 - p to keep precision.
    let q = 1.0 - p;
    let upper = |t: f64| student_t_tail(t, dof);
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while upper(hi) > q {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = upper(t) - q;
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let deriv = -student_t_pdf(t, dof);
        let mut next = t - f / deriv;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-15 * t.abs().max(1.0) || hi - lo <= 1e-15 * hi.max(1.0) {
            return next;
        }
        t = next;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stable_sum_is_permutation_invariant() {
        let a = [1e16, 1.0, -1e16, 3.5, 1e-3, -2.25];
        let mut b = a;
        b.reverse();
        assert_eq!(stable_sum(&a).to_bits(), stable_sum(&b).to_bits());
        assert_relative_eq!(stable_sum(&a), 2.251, epsilon = 1e-12);
    }

    #[test]
    fn variance_of_constant_is_zero() {
        assert_eq!(sample_variance(&[2.0; 10]), 0.0);
        assert_eq!(sample_variance(&[2.0]), 0.0);
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0_f64;
        for k in 1..20 {
            fact *= k as f64;
            assert_relative_eq!(ln_gamma(k as f64 + 1.0), fact.ln(), epsilon = 1e-12);
        }
        assert_relative_eq!(ln_gamma(0.5), PI.sqrt().ln(), epsilon = 1e-13);
    }

    #[test]
    fn ln_beta_large_arguments() {
        // recurrence B(a + 1, b) = B(a, b) a / (a + b)
        let mut lb = ln_beta(10.0, 0.5);
        assert_relative_eq!(
            lb,
            ln_gamma(10.0) + ln_gamma(0.5) - ln_gamma(10.5),
            epsilon = 1e-12
        );
        for k in 10..2000 {
            let a = k as f64;
            lb += (a / (a + 0.5)).ln();
            assert_relative_eq!(ln_beta(a + 1.0, 0.5), lb, epsilon = 1e-11);
        }
    }

    #[test]
    fn t_cdf_of_one_dof_is_cauchy() {
        for &t in &[-3.0, -0.5, 0.0, 0.7, 2.0, 10.0] {
            let cauchy = 0.5 + f64::atan(t) / PI;
            assert_relative_eq!(student_t_cdf(t, 1.0), cauchy, epsilon = 1e-13);
        }
    }

    #[test]
    fn t_quantile_textbook_values() {
        assert_relative_eq!(
            student_t_quantile(0.975, 3.0),
            3.182_446_305_284_263,
            epsilon = 1e-9
        );
        assert_relative_eq!(
            student_t_quantile(0.975, 1.0),
            12.706_204_736_174_7,
            epsilon = 1e-8
        );
        assert_relative_eq!(
            student_t_quantile(0.95, 10.0),
            1.812_461_122_811_676,
            epsilon = 1e-9
        );
        assert_relative_eq!(
            student_t_quantile(0.025, 3.0),
            -3.182_446_305_284_263,
            epsilon = 1e-9
        );
    }

    #[test]
    fn t_quantile_inverts_cdf() {
        for &dof in &[1.0, 2.5, 7.0, 49.0, 999.0, 1e5] {
            for &p in &[0.6, 0.9, 0.975, 0.995, 0.999_99] {
                let t = student_t_quantile(p, dof);
                assert_relative_eq!(student_t_cdf(t, dof), p, epsilon = 1e-12);
            }
        }
    }
}
