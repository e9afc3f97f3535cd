//! Calibrated paired t-test and the Student-t tail it needs.

use super::EvalError;

/// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-15 for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
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
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta, modified Lentz.
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
    for m in 1..=500 {
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

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // the fraction converges fast on the side of the mean
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided Student-t tail probability `P(|T| >= |t|)` with `df` degrees
/// of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub p_value: f64,
    pub df: f64,
    /// Variance inflation `rho` added to `1/n`.
    pub variance_correction: f64,
    /// Zero variance with a non-zero mean difference: `t` is infinite.
    pub degenerate: bool,
}

/// Paired test on per-run scores with the variance inflated to
/// `(1/n + rho) * var(d)`; `rho = 0` gives the ordinary paired t-test.
pub fn calibrated_t_test(a: &[f64], b: &[f64], rho: f64, df: f64) -> Result<TTestResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Invalid(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::Invalid("paired t-test needs at least 2 pairs".into()));
    }
    if !(df > 0.0) || rho < 0.0 {
        return Err(EvalError::Invalid(format!("bad df {df} or rho {rho}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let base = TTestResult {
        t_statistic: 0.0,
        p_value: 1.0,
        df,
        variance_correction: rho,
        degenerate: false,
    };
    // differences equal up to rounding count as zero variance
    let scale = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if var.sqrt() <= 1e-12 * scale || var == 0.0 {
        if mean.abs() <= 1e-12 * scale {
            return Ok(base);
        }
        return Ok(TTestResult {
            t_statistic: mean.signum() * f64::INFINITY,
            p_value: 0.0,
            degenerate: true,
            ..base
        });
    }
    let t = mean / ((1.0 / nf + rho) * var).sqrt();
    Ok(TTestResult {
        t_statistic: t,
        p_value: student_t_two_sided(t, df),
        ..base
    })
}
