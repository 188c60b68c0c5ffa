//! Wall-clock comparison of DR1Conv against a per-position dynamic kernel.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamic_ops::{dr1conv, oracle_dense_dynamic_conv, DR1ConvLayer, PositionKernels, Rank1Factors};
use crate::error::{arg_err, Result};
use crate::numerics::{fan_in_uniform, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            height: 128,
            width: 128,
            kernel: 3,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub median_s: f64,
    pub samples_s: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    /// Oracle median over DR1Conv median.
    pub speedup: f64,
    /// Largest elementwise difference between the two outputs.
    pub max_abs_diff: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn time<F: FnMut() -> Result<Tensor>>(repeats: usize, mut f: F) -> Result<(Vec<f64>, Tensor)> {
    let mut samples = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let t0 = Instant::now();
        let y = f()?;
        samples.push(t0.elapsed().as_secs_f64());
        last = Some(y);
    }
    Ok((samples, last.expect("at least one repeat")))
}

/// Times both operators on identical random inputs.
pub fn bench_dr1conv(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 || cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 || cfg.kernel % 2 == 0 {
        return Err(arg_err("bench_dr1conv", "sizes and repeats must be positive and the kernel odd"));
    }
    let (c, h, w, k) = (cfg.channels, cfg.height, cfg.width, cfg.kernel);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor::rand_uniform(&mut rng, &[c, h, w], -1.0, 1.0);
    let factors = Rank1Factors::new(
        Tensor::rand_uniform(&mut rng, &[c, h, w], 0.5, 1.5),
        Tensor::rand_uniform(&mut rng, &[c, h, w], 0.5, 1.5),
    )?;
    let weight = fan_in_uniform(&mut rng, &[c, c, k, k], c * k * k);
    let layer = DR1ConvLayer::new(weight.clone(), None)?;
    let (fast, y_fast) = time(cfg.repeats, || dr1conv(&x, &factors, &layer))?;
    let kernels = PositionKernels::Rank1 {
        weight: &weight,
        factors: &factors,
    };
    let (slow, y_slow) = time(cfg.repeats, || oracle_dense_dynamic_conv(&x, &kernels))?;
    let speedup = median(&slow) / median(&fast);
    Ok(BenchReport {
        config: cfg.clone(),
        rows: vec![
            BenchRow {
                name: "dr1conv".into(),
                median_s: median(&fast),
                samples_s: fast,
            },
            BenchRow {
                name: "oracle_dense_dynamic_conv".into(),
                median_s: median(&slow),
                samples_s: slow,
            },
        ],
        speedup,
        max_abs_diff: y_fast.max_abs_diff(&y_slow),
    })
}

/// `bench.json` and `bench.csv` in `dir`.
pub fn write_bench(report: &BenchReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("bench.json"), serde_json::to_vec_pretty(report)?)?;
    let mut f = fs::File::create(dir.join("bench.csv"))?;
    writeln!(f, "name,channels,height,width,kernel,repeats,median_s")?;
    let c = &report.config;
    for r in &report.rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{:.9}",
            r.name, c.channels, c.height, c.width, c.kernel, c.repeats, r.median_s
        )?;
    }
    Ok(())
}
