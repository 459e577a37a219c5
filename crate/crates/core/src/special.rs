//! Special functions used by the fractional operator and the Burgers
//! reference solution.

use std::f64::consts::PI;

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

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection keeps the series in its accurate range
        (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = LANCZOS_COEF[0];
        let t = x + LANCZOS_G + 0.5;
        for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

pub fn gamma(x: f64) -> f64 {
    ln_gamma(x).exp()
}

const SHIFT: f64 = 10.0;

/// Digamma ψ(x) for `x > 0`.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    let series = r
        * (1.0 / 12.0
            - r * (1.0 / 120.0 - r * (1.0 / 252.0 - r * (1.0 / 240.0 - r * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 / x - series
}

/// Trigamma ψ₁(x) for `x > 0`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    let series = 1.0 / x
        + r / 2.0
        + r / x
            * (1.0 / 6.0 - r * (1.0 / 30.0 - r * (1.0 / 42.0 - r * (1.0 / 30.0 - r * 5.0 / 66.0))));
    acc + series
}

/// Tetragamma ψ₂(x) for `x > 0`.
pub fn tetragamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    let series = -r
        - r / x
        - r * r
            * (0.5 - r * (1.0 / 6.0 - r * (1.0 / 6.0 - r * (3.0 / 10.0 - r * 5.0 / 6.0))));
    acc + series
}

/// Gauss–Hermite nodes and weights for `∫ e^{-z²} g(z) dz` with `n` nodes,
/// returned in ascending node order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let pim4 = PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // orthonormal Hermite recurrence
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        nodes[i] = z;
        weights[i] = 2.0 / (pp * pp);
    }
    // nodes[0..m] are descending positive roots; mirror and sort
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    for i in 0..m {
        pairs.push((nodes[i], weights[i]));
        if !(n % 2 == 1 && i == m - 1) {
            pairs.push((-nodes[i], weights[i]));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(4.0) - 6f64.ln()).abs() < 1e-13);
        // Γ(1/2) = √π
        assert!((ln_gamma(0.5) - 0.5 * PI.ln()).abs() < 1e-13);
        // Γ(3/2) = √π/2
        assert!((gamma(1.5) - PI.sqrt() / 2.0).abs() < 1e-13);
    }

    #[test]
    fn digamma_at_one_is_minus_euler_gamma() {
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-13);
        // ψ(1/2) = -γ - 2 ln 2
        assert!((digamma(0.5) + EULER_GAMMA + 2.0 * 2f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn trigamma_and_tetragamma_at_one() {
        // ψ₁(1) = π²/6, ψ₂(1) = -2ζ(3)
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-13);
        let zeta3 = 1.202_056_903_159_594_2;
        assert!((tetragamma(1.0) + 2.0 * zeta3).abs() < 1e-12);
    }

    #[test]
    fn polygammas_match_finite_differences() {
        for &x in &[0.3, 0.9, 1.7, 3.2, 12.5] {
            let h = 1e-5;
            let d1 = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((d1 - digamma(x)).abs() < 1e-8, "digamma {x}");
            let d2 = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((d2 - trigamma(x)).abs() < 1e-7 * trigamma(x).abs().max(1.0));
            let d3 = (trigamma(x + h) - trigamma(x - h)) / (2.0 * h);
            assert!((d3 - tetragamma(x)).abs() < 1e-6 * tetragamma(x).abs().max(1.0));
        }
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        for &n in &[8usize, 64, 65, 128] {
            let (z, w) = gauss_hermite(n);
            assert_eq!(z.len(), n);
            let m0: f64 = w.iter().sum();
            assert!((m0 - PI.sqrt()).abs() < 1e-12, "n={n} m0={m0}");
            let m2: f64 = z.iter().zip(&w).map(|(z, w)| z * z * w).sum();
            assert!((m2 - PI.sqrt() / 2.0).abs() < 1e-12);
            assert!(z.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
