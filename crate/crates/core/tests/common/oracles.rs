//! Independent reference computations, written from the defining formulas.
#![allow(dead_code)]

use std::f64::consts::PI;

/// `(t, beta, alpha, alpha_bar, sigma)` rows, 1-indexed.
pub type Row = (usize, f64, f64, f64, f64);

pub fn schedule_rows(kind: &str, steps: usize) -> Vec<Row> {
    let (lo, hi) = if kind == "scaled_linear" { (0.00085, 0.012) } else { (1e-4, 0.02) };
    let frac = |t: usize| if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
    let s = 0.008;
    let cum = |t: f64| {
        let c = ((t / steps as f64 + s) / (1.0 + s) * PI / 2.0).cos();
        let c0 = (s / (1.0 + s) * PI / 2.0).cos();
        (c * c) / (c0 * c0)
    };
    let mut out = Vec::with_capacity(steps);
    let mut bar = 1.0;
    for t in 1..=steps {
        let beta = match kind {
            "linear" => lo + (hi - lo) * frac(t),
            "scaled_linear" => {
                let r = lo.sqrt() + frac(t) * (hi.sqrt() - lo.sqrt());
                r * r
            }
            "glide_softmax" => (1.0 - cum(t as f64) / cum(t as f64 - 1.0)).min(0.999),
            "geodiff_sigmoid" => {
                let u = -6.0 + 12.0 * frac(t);
                (hi - lo) / (1.0 + (-u).exp()) + lo
            }
            other => panic!("no oracle for {other}"),
        };
        bar *= 1.0 - beta;
        out.push((t, beta, 1.0 - beta, bar, beta.sqrt()));
    }
    out
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Two-sided Student-t tail by integrating the density over `[0, |t|]`.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * PI).sqrt();
    let pdf = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    1.0 - 2.0 * simpson(pdf, 0.0, t.abs(), 200_000)
}

/// Two-sided normal tail by integrating the density over `[0, |z|]`.
pub fn normal_two_sided(z: f64) -> f64 {
    let pdf = |x: f64| (-x * x / 2.0).exp() / (2.0 * PI).sqrt();
    1.0 - 2.0 * simpson(pdf, 0.0, z.abs(), 200_000)
}

/// Welch statistic, Welch-Satterthwaite degrees of freedom and quadrature p.
pub fn welch(a: &[f64], b: &[f64]) -> (f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (qa, qb) = (va / na, vb / nb);
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    (t, student_t_two_sided(t, df))
}

/// U of `a` by enumerating every pair; ties count one half.
pub fn brute_force_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Normal approximation with tie correction and continuity correction,
/// its tail integrated numerically.
pub fn mann_whitney_p(a: &[f64], b: &[f64], u: f64) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < all.len() {
        let j = all[i..].iter().take_while(|&&x| x == all[i]).count();
        let t = j as f64;
        ties += t * t * t - t;
        i += j;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - na * nb / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    normal_two_sided(z)
}
