//! Log-Gamma, Beta and double-exponential quadrature.
//!
//! These are evaluated in `f64` regardless of the scalar type used by the
//! field computations; callers convert the results.

use std::f64::consts::PI;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
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

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = LANCZOS[0];
        let t = x + LANCZOS_G + 0.5;
        for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// `ln B(a, b)`.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// `int_0^T (T - t)^a t^b dt = T^(1+a+b) B(1+a, 1+b)` for `a, b > -1`.
pub fn weighted_power_integral(t_final: f64, a: f64, b: f64) -> f64 {
    ((1.0 + a + b) * t_final.ln() + ln_beta(1.0 + a, 1.0 + b)).exp()
}

/// Tanh-sinh quadrature of `f` on `[a, b]`, tolerant of integrable endpoint
/// singularities. Refines the step until two successive levels agree to
/// `rel_tol`.
pub fn tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    tanh_sinh_ends(|x, _, _| f(x), a, b, rel_tol)
}

/// As [`tanh_sinh`], but `f(x, x - a, b - x)` also receives the distances to
/// both endpoints, computed without cancellation. Use these when the
/// integrand is singular at an endpoint.
pub fn tanh_sinh_ends(f: impl Fn(f64, f64, f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    let half = 0.5 * (b - a);
    let tmax = 4.0;
    // node at parameter t: x = mid + half * tanh(pi/2 sinh t); weight w
    let eval = |t: f64| -> f64 {
        let s = 0.5 * PI * t.sinh();
        let c = s.cosh();
        let u = s.tanh();
        let w = 0.5 * PI * t.cosh() / (c * c);
        // distance to the nearer endpoint, computed without cancellation
        let comp = 1.0 / (s.abs().exp() * c); // = 1 - |u|
        let near = half * comp;
        if near <= 0.0 || w == 0.0 {
            return 0.0;
        }
        let (x, da, db) = if u >= 0.0 { (b - near, 2.0 * half - near, near) } else { (a + near, near, 2.0 * half - near) };
        let v = f(x, da, db);
        if v.is_finite() {
            half * w * v
        } else {
            0.0
        }
    };
    let mut step = 0.5;
    let mut sum = eval(0.0);
    let mut k = 1;
    while (k as f64) * step <= tmax {
        let t = k as f64 * step;
        sum += eval(t) + eval(-t);
        k += 1;
    }
    let mut estimate = sum * step;
    for _ in 0..12 {
        step *= 0.5;
        let mut add = 0.0;
        let mut k = 1;
        while (k as f64) * step <= tmax {
            let t = k as f64 * step;
            add += eval(t) + eval(-t);
            k += 2;
        }
        sum += add;
        let next = sum * step;
        let done = (next - estimate).abs() <= rel_tol * next.abs().max(f64::MIN_POSITIVE);
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}
