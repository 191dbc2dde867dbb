//! Exact random variates: Poisson counts and uniform subsets.

use std::collections::HashSet;

use rand::Rng;
use statrs::function::gamma::ln_gamma;

/// Rates below this use sequential-search inversion, at or above it PTRS.
const PTRS_THRESHOLD: f64 = 10.0;

/// One Poisson(`lambda`) draw. `lambda` must be positive and finite.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    debug_assert!(lambda > 0.0 && lambda.is_finite());
    if lambda < PTRS_THRESHOLD {
        poisson_inversion(rng, lambda)
    } else {
        poisson_ptrs(rng, lambda)
    }
}

fn poisson_inversion<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= lambda / k as f64;
        let next = cdf + p;
        // The tail has been exhausted to machine precision.
        if next == cdf {
            break;
        }
        cdf = next;
    }
    k
}

/// Hörmann's transformed rejection with squeeze (PTRS).
fn poisson_ptrs<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if (v * inv_alpha / (a / (us * us) + b)).ln() <= -lambda + k * loglam - ln_gamma(k + 1.0) {
            return k as u64;
        }
    }
}

/// `size` distinct values from `0..population`, sorted, every subset of that
/// cardinality equally likely. Uses Floyd's algorithm on whichever of the
/// subset and its complement is smaller.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    rng: &mut R,
    population: usize,
    size: usize,
) -> Vec<usize> {
    assert!(size <= population, "sample size exceeds population");
    if size * 2 <= population {
        floyd(rng, population, size)
    } else {
        let excluded = floyd(rng, population, population - size);
        let mut out = Vec::with_capacity(size);
        let mut next = 0;
        for &e in &excluded {
            out.extend(next..e);
            next = e + 1;
        }
        out.extend(next..population);
        out
    }
}

fn floyd<R: Rng + ?Sized>(rng: &mut R, population: usize, size: usize) -> Vec<usize> {
    let mut chosen = HashSet::with_capacity(size);
    for j in population - size..population {
        let t = rng.random_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    let mut out: Vec<usize> = chosen.into_iter().collect();
    out.sort_unstable();
    out
}
