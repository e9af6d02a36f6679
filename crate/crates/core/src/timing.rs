//! Wall-clock measurement of generator forwards.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::generator::Generator;
use crate::tensor::Tensor;

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty sample");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_once(g: &Generator, z: &Tensor, noises: &[Tensor]) -> Result<f64> {
    let t = Instant::now();
    let out = g.forward(z, noises)?;
    let dt = t.elapsed().as_secs_f64();
    std::hint::black_box(out);
    Ok(dt)
}

/// Seconds per forward of a single image, `iters` timed runs after
/// `warmup` untimed ones.
pub fn time_forward(g: &Generator, seed: u64, warmup: usize, iters: usize) -> Result<Vec<f64>> {
    let (z, noises) = g.sample_inputs(seed, 1);
    for _ in 0..warmup {
        time_once(g, &z, &noises)?;
    }
    (0..iters).map(|_| time_once(g, &z, &noises)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTiming {
    pub iters: usize,
    pub a_median_s: f64,
    pub b_median_s: f64,
    pub a_samples_s: Vec<f64>,
    pub b_samples_s: Vec<f64>,
    /// `a_median / b_median`
    pub speedup: f64,
}

/// Times two generators on the same input, alternating which runs first
/// each iteration so drift affects both equally.
pub fn time_pair(a: &Generator, b: &Generator, seed: u64, warmup: usize, iters: usize) -> Result<PairTiming> {
    let (z, noises) = a.sample_inputs(seed, 1);
    for _ in 0..warmup {
        time_once(a, &z, &noises)?;
        time_once(b, &z, &noises)?;
    }
    let mut ta = Vec::with_capacity(iters);
    let mut tb = Vec::with_capacity(iters);
    for i in 0..iters {
        if i % 2 == 0 {
            ta.push(time_once(a, &z, &noises)?);
            tb.push(time_once(b, &z, &noises)?);
        } else {
            tb.push(time_once(b, &z, &noises)?);
            ta.push(time_once(a, &z, &noises)?);
        }
    }
    let (ma, mb) = (median(&ta), median(&tb));
    Ok(PairTiming {
        iters,
        a_median_s: ma,
        b_median_s: mb,
        a_samples_s: ta,
        b_samples_s: tb,
        speedup: ma / mb,
    })
}

/// Host description for timing tables: OS, architecture, CPU model.
pub fn machine_id() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{} {} / {cpu}", std::env::consts::OS, std::env::consts::ARCH)
}
