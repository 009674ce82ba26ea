//! Classical fixed sampling-pattern generators: variable-density, lowpass and
//! uniform-random line selection. All are pure functions of their parameters
//! and seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::{line_frequency, LineMask};

/// Parameters for variable-density sampling. Lines are drawn without
/// replacement with weight `(1 - |k_c|/k_max)^density_exponent`, where `k_c`
/// is the signed distance from the DC line.
#[derive(Debug, Clone, Copy)]
pub struct VdsParams {
    pub side: usize,
    pub budget: usize,
    pub density_exponent: f64,
    pub seed: u64,
}

fn check_budget(side: usize, budget: usize) -> Result<()> {
    if budget == 0 || budget > side {
        return Err(Error::budget(format!(
            "budget {budget} out of range (0, {side}]"
        )));
    }
    Ok(())
}

/// Variable-density line pattern. The DC line is always included; the
/// remaining budget-1 lines are a weighted without-replacement draw,
/// deterministic for a given seed. Lines whose weight is zero (the Nyquist
/// line for any positive exponent) are only picked once every positively
/// weighted line is exhausted.
pub fn vds_pattern(p: &VdsParams) -> Result<LineMask> {
    check_budget(p.side, p.budget)?;
    if p.density_exponent < 0.0 {
        return Err(Error::contract("density_exponent must be nonnegative"));
    }
    let k_max = (p.side / 2).max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut mask = LineMask::empty(p.side);
    mask.set(0, true);
    let mut weights: Vec<f64> = (0..p.side)
        .map(|k| {
            let kc = line_frequency(k, p.side).unsigned_abs() as f64;
            (1.0 - kc / k_max).max(0.0).powf(p.density_exponent)
        })
        .collect();
    weights[0] = 0.0; // already sampled
    for _ in 1..p.budget {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = p.side - 1;
            for (k, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if u < w {
                    chosen = k;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            // Only zero-weight lines remain; fall back to a uniform draw.
            let remaining: Vec<usize> = (0..p.side).filter(|&k| !mask.is_sampled(k)).collect();
            remaining[rng.random_range(0..remaining.len())]
        };
        mask.set(pick, true);
        weights[pick] = 0.0;
    }
    Ok(mask)
}

/// The `budget` lines closest to DC by |signed frequency|; ties at equal
/// distance go to the lower line index, so DC, +1, -1, +2, -2, ...
pub fn lpf_pattern(side: usize, budget: usize) -> Result<LineMask> {
    check_budget(side, budget)?;
    let mut order: Vec<usize> = (0..side).collect();
    order.sort_by_key(|&k| (line_frequency(k, side).unsigned_abs(), k));
    LineMask::from_lines(side, &order[..budget])
}

/// Uniform without-replacement line draw, deterministic per seed.
pub fn uniform_random_pattern(side: usize, budget: usize, seed: u64) -> Result<LineMask> {
    check_budget(side, budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines: Vec<usize> = (0..side).collect();
    lines.shuffle(&mut rng);
    LineMask::from_lines(side, &lines[..budget])
}
