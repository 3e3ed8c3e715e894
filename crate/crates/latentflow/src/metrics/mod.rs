//! Evaluation metrics: jerk-based and spectral trajectory smoothness, task
//! success aggregation across seeds, and policy response-time measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Third-order finite-difference jerk per step:
/// j_t = (a_{t+1} − 3·a_t + 3·a_{t−1} − a_{t−2}) / Δt³,
/// defined where all four stencil points exist (t = 3..T−1, one-based).
pub fn jerk(traj: &[Vec<f64>], dt: f64) -> Result<Vec<Vec<f64>>> {
    let t_len = traj.len();
    if t_len < 4 {
        return Err(Error::InvalidArgument(format!(
            "jerk needs at least 4 steps, got {t_len}"
        )));
    }
    let dim = traj[0].len();
    let dt3 = dt * dt * dt;
    let mut out = Vec::with_capacity(t_len - 3);
    // Zero-based: stencil centered at t uses t+1, t, t−1, t−2.
    for t in 2..t_len - 1 {
        let mut j = Vec::with_capacity(dim);
        for d in 0..dim {
            j.push(
                (traj[t + 1][d] - 3.0 * traj[t][d] + 3.0 * traj[t - 1][d] - traj[t - 2][d]) / dt3,
            );
        }
        out.push(j);
    }
    Ok(out)
}

/// Mean squared jerk with the 1/(T−2) normalizer. The 4-point stencil yields
/// T−3 valid terms while the normalizer divides by T−2; the off-by-one is
/// kept deliberately so reported numbers match the reference formula.
pub fn s_jerk(traj: &[Vec<f64>], dt: f64) -> Result<f64> {
    let js = jerk(traj, dt)?;
    let sum: f64 = js.iter().map(|j| j.iter().map(|v| v * v).sum::<f64>()).sum();
    Ok(sum / (traj.len() as f64 - 2.0))
}

/// Fraction of non-DC spectral energy strictly above the cutoff frequency.
///
/// Per-dimension DFT after mean removal; the DC bin is excluded from the
/// denominator (otherwise any non-zero-mean trajectory would report near-zero
/// ratios regardless of oscillation). An all-constant trajectory has zero
/// spectral energy and returns 0 by convention.
pub fn s_freq(traj: &[Vec<f64>], dt: f64, f_c: f64) -> Result<f64> {
    let t_len = traj.len();
    if t_len < 8 {
        return Err(Error::InvalidArgument(format!(
            "spectral ratio needs at least 8 steps, got {t_len}"
        )));
    }
    let nyquist = 0.5 / dt;
    if !(f_c > 0.0 && f_c < nyquist) {
        return Err(Error::InvalidArgument(format!(
            "cutoff {f_c} outside (0, {nyquist})"
        )));
    }
    let dim = traj[0].len();
    let mut total = 0.0;
    let mut high = 0.0;
    for d in 0..dim {
        let mean: f64 = traj.iter().map(|r| r[d]).sum::<f64>() / t_len as f64;
        let x: Vec<f64> = traj.iter().map(|r| r[d] - mean).collect();
        // Direct O(T²) DFT; trajectories are short enough that clarity wins.
        for k in 1..t_len {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, v) in x.iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * (k * n) as f64 / t_len as f64;
                re += v * phase.cos();
                im += v * phase.sin();
            }
            let energy = re * re + im * im;
            // Physical frequency of bin k, folding the conjugate mirror half.
            let folded = k.min(t_len - k) as f64 / (t_len as f64 * dt);
            total += energy;
            if folded > f_c {
                high += energy;
            }
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(high / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub s_jerk: f64,
    pub s_freq: f64,
    pub s_smooth: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cutoff_hz: f64,
    pub dt: f64,
    /// Reference jerk scale used to squash s_jerk into [0,1).
    pub jerk_ref: f64,
}

/// Combined smoothness score:
/// s_smooth = α·(1 − exp(−s_jerk/j_ref)) + β·s_freq with α=0.25, β=0.75.
/// Lower is smoother; bounded in [0, 1).
pub fn s_smooth(traj: &[Vec<f64>], dt: f64, f_c: f64, jerk_ref: f64) -> Result<SmoothnessReport> {
    if !(jerk_ref > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "jerk reference scale must be positive, got {jerk_ref}"
        )));
    }
    let (alpha, beta) = (0.25, 0.75);
    let sj = s_jerk(traj, dt)?;
    let sf = s_freq(traj, dt, f_c)?;
    Ok(SmoothnessReport {
        s_jerk: sj,
        s_freq: sf,
        s_smooth: alpha * (1.0 - (-sj / jerk_ref).exp()) + beta * sf,
        alpha,
        beta,
        cutoff_hz: f_c,
        dt,
        jerk_ref,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub calls: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Wall-clock inference latency: `warmup` discarded calls, then `calls`
/// measured ones. The closure should run exactly one observation→action
/// inference and nothing else.
pub fn measure_response_time<F: FnMut()>(mut infer: F, warmup: usize, calls: usize) -> LatencyStats {
    assert!(warmup >= 10, "need at least 10 warm-up calls");
    assert!(calls >= 100, "need at least 100 measured calls");
    for _ in 0..warmup {
        infer();
    }
    let mut samples_ms = Vec::with_capacity(calls);
    for _ in 0..calls {
        let t0 = Instant::now();
        infer();
        samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = samples_ms.iter().sum::<f64>() / calls as f64;
    samples_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    LatencyStats {
        calls,
        mean_ms,
        p50_ms: percentile(&samples_ms, 0.50),
        p95_ms: percentile(&samples_ms, 0.95),
    }
}

/// Nearest-rank percentile on a pre-sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Successes per seed, paired with the trial count.
    pub per_seed: Vec<(usize, usize)>,
    /// Mean success rate in percent.
    pub mean_pct: f64,
    /// Sample standard deviation across seeds, in percentage points.
    pub std_pct: f64,
    /// True when only one seed was run (std reported as 0 by convention).
    pub single_seed: bool,
}

/// Aggregate per-seed success counts into mean ± sample std (percent).
/// The std is over seeds, not pooled trials.
pub fn aggregate_eval(per_seed: &[(usize, usize)]) -> Result<EvalSummary> {
    if per_seed.is_empty() {
        return Err(Error::InvalidArgument("no seeds to aggregate".into()));
    }
    for (s, n) in per_seed {
        if *n == 0 || s > n {
            return Err(Error::InvalidArgument(format!("bad seed tally {s}/{n}")));
        }
    }
    let rates: Vec<f64> =
        per_seed.iter().map(|(s, n)| 100.0 * *s as f64 / *n as f64).collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let single = rates.len() == 1;
    let std = if single {
        0.0
    } else {
        let var =
            rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (rates.len() - 1) as f64;
        var.sqrt()
    };
    Ok(EvalSummary { per_seed: per_seed.to_vec(), mean_pct: mean, std_pct: std, single_seed: single })
}
