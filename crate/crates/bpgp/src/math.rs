//! Scalar special functions and seeded RNG streams used across the crate.
//!
//! The normal CDF is computed through `erfc` (power series for small
//! arguments, Lentz continued fraction in the tail) so tail probabilities
//! keep full relative accuracy. The quantile function refines an asymptotic
//! starting point with Newton steps on the CDF. Polygamma functions use the
//! standard recurrence to shift the argument into the asymptotic regime.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Complementary error function, accurate in both the bulk and the far tail.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

// Maclaurin series of erf, adequate for |x| < 2.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        let nf = n as f64;
        term *= -x2 / nf;
        let contrib = term / (2.0 * nf + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

// Continued fraction sqrt(pi) e^{x^2} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
// evaluated with the modified Lentz algorithm.
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = x.max(tiny);
    let mut c = f;
    let mut d = 0.0f64;
    let mut k = 0.5f64;
    for _ in 0..300 {
        d = x + k * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + k / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
        k += 0.5;
    }
    // f now holds the continued fraction denominator value.
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}

/// Standard normal cumulative distribution function.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn standard_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile function on (0, 1).
///
/// Panics outside (0, 1); callers clamp first where the input may touch the
/// boundary.
pub fn standard_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must lie in (0,1)");
    if p == 0.5 {
        return 0.0;
    }
    if p > 0.5 {
        return -standard_normal_quantile(1.0 - p);
    }
    // p <= 0.5: start from the tail asymptote or a crude bulk guess, then
    // polish with Newton on the CDF (quadratic convergence, ~4 steps).
    let mut z = if p < 0.02 {
        let l = -2.0 * p.ln();
        -(l - l.ln() - (2.0 * std::f64::consts::PI).ln()).max(0.0).sqrt()
    } else {
        // Rough logistic-style bulk guess.
        -1.702f64.recip() * ((1.0 - p) / p).ln()
    };
    for _ in 0..8 {
        let err = standard_normal_cdf(z) - p;
        // Relative Newton step in the tail: err/phi(z) underflows gracefully.
        let step = err / standard_normal_pdf(z);
        let step = step.clamp(-1.0, 1.0);
        z -= step;
        if step.abs() < 1e-13 * (1.0 + z.abs()) {
            break;
        }
    }
    z
}

/// Digamma function for positive arguments.
pub fn digamma(x: f64) -> f64 {
    assert!(x > 0.0, "digamma requires a positive argument");
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    // Asymptotic series with Bernoulli coefficients.
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))))
}

/// Trigamma function for positive arguments.
pub fn trigamma(x: f64) -> f64 {
    assert!(x > 0.0, "trigamma requires a positive argument");
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv * (1.0 + 0.5 * inv)
        + inv * inv2
            * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))))
}

/// log N(x | mean, var) for a scalar Gaussian.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

/// Gaussian CDF with location and scale; `sd = 0` degenerates to a step.
pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return if x >= mean { 1.0 } else { 0.0 };
    }
    standard_normal_cdf((x - mean) / sd)
}

/// SplitMix64 mixer, used to derive independent stream keys.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic counter-based RNG stream keyed by (seed, stream, epoch).
pub fn stream_rng(seed: u64, stream: u64, epoch: u64) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09e667f3bcc908;
    let mut seed_bytes = [0u8; 32];
    let words = [
        splitmix64(&mut state),
        splitmix64(&mut state) ^ stream.wrapping_mul(0x9e3779b97f4a7c15),
        splitmix64(&mut state) ^ epoch.wrapping_mul(0xbf58476d1ce4e5b9),
        {
            let mut mix = stream.rotate_left(32) ^ epoch ^ seed;
            splitmix64(&mut mix)
        },
    ];
    for (i, w) in words.iter().enumerate() {
        seed_bytes[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed_bytes)
}

/// Double factorial (k)!! as f64; (−1)!! = 0!! = 1.
pub fn double_factorial(k: i64) -> f64 {
    let mut acc = 1.0;
    let mut i = k;
    while i > 1 {
        acc *= i as f64;
        i -= 2;
    }
    acc
}

/// Raw moment E[x^k] of N(mean, var) via the recurrence
/// M_k = mean*M_{k-1} + (k-1)*var*M_{k-2}.
pub fn normal_raw_moment(mean: f64, var: f64, k: usize) -> f64 {
    let mut m_prev = 1.0; // M_0
    if k == 0 {
        return m_prev;
    }
    let mut m = mean; // M_1
    for j in 2..=k {
        let next = mean * m + (j as f64 - 1.0) * var * m_prev;
        m_prev = m;
        m = next;
    }
    m
}
