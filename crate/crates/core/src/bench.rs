//! Scaling measurements for the linear and softmax attention kernels.
//!
//! Flops and peak bytes come from the [`counters`](crate::counters) of a
//! single forward pass in `f32`; wall time is the median over repeats.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::attention::{softmax_attention_on, ufo_attention_on, AttentionDims, AttentionParams, AttentionSpec, NormKind};
use crate::counters::{measure, OpCounters};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "mechanism,N,heads,h,batch,flops,peak_bytes,wall_ms";
/// Value written in the `wall_ms` column of a point that exceeded the budget.
pub const TRUNCATED: &str = "truncated";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Ufo,
    Softmax,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Ufo => "ufo",
            Mechanism::Softmax => "softmax",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ufo" => Ok(Mechanism::Ufo),
            "softmax" => Ok(Mechanism::Softmax),
            _ => Err(Error::usage(format!("unknown mechanism `{s}` (expected ufo or softmax)"))),
        }
    }
}

/// One measured point.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub batch: usize,
    pub flops: u64,
    pub peak_bytes: u64,
    pub wall_ms: f64,
    /// The point was skipped or exceeded the byte budget.
    pub truncated: bool,
}

/// Layer extents shared by every point of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepDims {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub batch: usize,
}

impl Default for SweepDims {
    fn default() -> Self {
        SweepDims { d_model: 32, heads: 8, head_dim: 16, batch: 1 }
    }
}

impl SweepDims {
    pub fn attention(&self, tokens: usize) -> Result<AttentionDims> {
        AttentionDims::new(tokens, self.d_model, self.heads * self.head_dim, self.heads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepOptions {
    /// Wall time is the median over this many runs.
    pub repeats: usize,
    /// Points whose footprint would exceed this are recorded as truncated.
    pub budget_bytes: Option<u64>,
    /// Run points concurrently, each in its own counter scope.
    pub parallel_points: bool,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { repeats: 5, budget_bytes: None, parallel_points: false, seed: 0 }
    }
}

struct Case {
    x: Tensor<f32>,
    params: AttentionParams<f32>,
    dims: AttentionDims,
}

fn make_case(tokens: usize, dims: &SweepDims, batch: usize, seed: u64) -> Result<Case> {
    let adims = dims.attention(tokens)?;
    let mut rng = SplitMix64::new(seed);
    let std = 1.0 / (dims.d_model as f64).sqrt();
    let params = AttentionParams::init(&adims, std, &mut rng)?;
    let x: Vec<f64> = (0..batch * tokens * dims.d_model).map(|_| rng.normal()).collect();
    Ok(Case { x: Tensor::from_f64(&[batch, tokens, dims.d_model], &x)?, params, dims: adims })
}

fn run_once(mech: Mechanism, case: &Case) -> Result<OpCounters> {
    let (res, counts) = measure(|| -> Result<()> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(case.x.clone())?;
        let vars = case.params.bind(&mut tape, false)?;
        match mech {
            Mechanism::Ufo => {
                let spec = AttentionSpec { heads: case.dims.heads, kind: NormKind::XNorm, eps: case.params.eps };
                ufo_attention_on(&mut tape, x, x, &vars, &spec, None)?;
            }
            Mechanism::Softmax => {
                softmax_attention_on(&mut tape, x, x, &vars, case.dims.heads)?;
            }
        }
        Ok(())
    });
    res.map(|_| counts)
}

/// Lower bound on the bytes a forward pass must allocate: the score matrices
/// of the softmax kernel, or the projected activations of either kernel.
fn footprint_lower_bound(mech: Mechanism, tokens: usize, dims: &SweepDims, batch: usize) -> u64 {
    let f = std::mem::size_of::<f32>() as u64;
    let (b, n, e) = (batch as u64, tokens as u64, (dims.heads * dims.head_dim) as u64);
    match mech {
        Mechanism::Ufo => 3 * b * n * e * f,
        Mechanism::Softmax => 2 * dims.heads as u64 * b * n * n * f,
    }
}

fn measure_point(mech: Mechanism, tokens: usize, dims: &SweepDims, opts: &SweepOptions) -> Result<BenchRecord> {
    let mut rec = BenchRecord {
        mechanism: mech,
        tokens,
        heads: dims.heads,
        head_dim: dims.head_dim,
        batch: dims.batch,
        flops: 0,
        peak_bytes: 0,
        wall_ms: f64::NAN,
        truncated: true,
    };
    if let Some(budget) = opts.budget_bytes {
        if footprint_lower_bound(mech, tokens, dims, dims.batch) > budget {
            return Ok(rec);
        }
    }
    let case = make_case(tokens, dims, dims.batch, opts.seed)?;
    let mut times = Vec::with_capacity(opts.repeats.max(1));
    let mut counts = None;
    for _ in 0..opts.repeats.max(1) {
        let t = Instant::now();
        let c = run_once(mech, &case)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        counts.get_or_insert(c);
    }
    let counts = counts.expect("at least one repeat");
    times.sort_by(f64::total_cmp);
    rec.flops = counts.flops;
    rec.peak_bytes = counts.peak_bytes;
    rec.wall_ms = times[times.len() / 2];
    rec.truncated = opts.budget_bytes.is_some_and(|b| counts.peak_bytes > b);
    Ok(rec)
}

/// Forward-pass measurements at each token count. `n_list` must be strictly
/// increasing with at least four points.
pub fn run_scaling_sweep(mech: Mechanism, n_list: &[usize], dims: &SweepDims, repeats: usize) -> Result<Vec<BenchRecord>> {
    run_scaling_sweep_with(mech, n_list, dims, &SweepOptions { repeats, ..Default::default() })
}

pub fn run_scaling_sweep_with(
    mech: Mechanism,
    n_list: &[usize],
    dims: &SweepDims,
    opts: &SweepOptions,
) -> Result<Vec<BenchRecord>> {
    if n_list.len() < 4 {
        return Err(Error::usage(format!("a sweep needs at least 4 token counts, got {}", n_list.len())));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] == 0 {
        return Err(Error::usage(format!("token counts must be positive and strictly increasing: {n_list:?}")));
    }
    if opts.parallel_points {
        parallel::map_collect(n_list.len(), |i| measure_point(mech, n_list[i], dims, opts)).into_iter().collect()
    } else {
        n_list.iter().map(|&n| measure_point(mech, n, dims, opts)).collect()
    }
}

/// Result of a log-log least-squares fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingFit {
    pub slope: f64,
    pub r2: f64,
    pub points: usize,
    /// `r2 < 0.99`.
    pub flagged: bool,
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<ScalingFit> {
    if xs.len() != ys.len() || xs.len() < 4 {
        return Err(Error::usage(format!("a fit needs at least 4 paired points, got {} and {}", xs.len(), ys.len())));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::usage("log-log fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::usage("log-log fit needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(ScalingFit { slope, r2, points: lx.len(), flagged: r2 < 0.99 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Flops,
    PeakBytes,
    WallMs,
}

/// Fit of `metric` against token count over the non-truncated records.
pub fn fit_records(records: &[BenchRecord], metric: Metric) -> Result<ScalingFit> {
    let used: Vec<&BenchRecord> = records.iter().filter(|r| !r.truncated).collect();
    let xs: Vec<f64> = used.iter().map(|r| r.tokens as f64).collect();
    let ys: Vec<f64> = used
        .iter()
        .map(|r| match metric {
            Metric::Flops => r.flops as f64,
            Metric::PeakBytes => r.peak_bytes as f64,
            Metric::WallMs => r.wall_ms,
        })
        .collect();
    fit_loglog_slope(&xs, &ys)
}

/// Counted peak bytes of one forward pass at `batch`.
pub fn sample_footprint(mech: Mechanism, tokens: usize, dims: &SweepDims, batch: usize) -> Result<u64> {
    let case = make_case(tokens, dims, batch, 0)?;
    Ok(run_once(mech, &case)?.peak_bytes)
}

/// Largest power-of-two batch whose counted peak stays within
/// `budget_bytes`, or 0 if batch 1 does not fit. Footprints are affine in
/// the batch size, so two probes at batch 1 and 2 predict every doubling;
/// the returned batch is confirmed by a real run.
pub fn max_batch_probe(mech: Mechanism, tokens: usize, dims: &SweepDims, budget_bytes: u64) -> Result<usize> {
    if footprint_lower_bound(mech, tokens, dims, 1) > budget_bytes {
        return Ok(0);
    }
    let p1 = sample_footprint(mech, tokens, dims, 1)?;
    if p1 > budget_bytes {
        return Ok(0);
    }
    if footprint_lower_bound(mech, tokens, dims, 2) > budget_bytes {
        return Ok(1);
    }
    let p2 = sample_footprint(mech, tokens, dims, 2)?;
    let per = p2.saturating_sub(p1);
    let predict = |b: u64| p1 + (b - 1) * per;
    let mut batch = 1u64;
    while predict(batch * 2) <= budget_bytes && batch < 1 << 20 {
        batch *= 2;
    }
    while batch > 1 && sample_footprint(mech, tokens, dims, batch as usize)? > budget_bytes {
        batch /= 2;
    }
    Ok(batch as usize)
}

/// Renders records as CSV with a header row.
pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let wall = if r.truncated { TRUNCATED.to_string() } else { format!("{:?}", r.wall_ms) };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.mechanism, r.tokens, r.heads, r.head_dim, r.batch, r.flops, r.peak_bytes, wall
        ));
    }
    out
}

/// Writes [`to_csv`] output to `path`.
pub fn emit_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(records)).map_err(|e| Error::io(path, e))
}

/// Parses text produced by [`to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::usage("bench CSV header is missing or different"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::usage(format!("bench CSV row {}: bad {what}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad("field count"));
            }
            let int = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(what));
            let truncated = f[7] == TRUNCATED;
            Ok(BenchRecord {
                mechanism: f[0].parse()?,
                tokens: int(f[1], "N")? as usize,
                heads: int(f[2], "heads")? as usize,
                head_dim: int(f[3], "h")? as usize,
                batch: int(f[4], "batch")? as usize,
                flops: int(f[5], "flops")?,
                peak_bytes: int(f[6], "peak_bytes")?,
                wall_ms: if truncated { f64::NAN } else { f[7].parse().map_err(|_| bad("wall_ms"))? },
                truncated,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{softmax_flops, ufo_flops};

    fn small() -> SweepDims {
        SweepDims { d_model: 8, heads: 2, head_dim: 4, batch: 1 }
    }

    #[test]
    fn short_list_is_usage_error() {
        assert!(matches!(run_scaling_sweep(Mechanism::Ufo, &[64], &small(), 1), Err(Error::Usage(_))));
        assert!(matches!(run_scaling_sweep(Mechanism::Ufo, &[8, 4, 16, 32], &small(), 1), Err(Error::Usage(_))));
    }

    #[test]
    fn analytic_slopes() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let fit = fit_loglog_slope(&xs, &sq).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12 && (fit.r2 - 1.0).abs() < 1e-12);
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        assert!((fit_loglog_slope(&xs, &lin).unwrap().slope - 1.0).abs() < 1e-12);
        assert!(matches!(fit_loglog_slope(&xs, &[1.0, 0.0, 1.0, 1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn counted_flops_match_closed_form() {
        let d = small();
        for mech in [Mechanism::Ufo, Mechanism::Softmax] {
            let recs = run_scaling_sweep(mech, &[4, 8, 16, 32], &d, 1).unwrap();
            for r in recs {
                let dims = d.attention(r.tokens).unwrap();
                let expect = match mech {
                    Mechanism::Ufo => ufo_flops(&dims, 1),
                    Mechanism::Softmax => softmax_flops(&dims, 1),
                };
                assert_eq!(r.flops, expect);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut recs = run_scaling_sweep(Mechanism::Ufo, &[4, 8, 16, 32], &small(), 1).unwrap();
        recs[3].truncated = true;
        recs[3].wall_ms = f64::NAN;
        let text = to_csv(&recs);
        assert_eq!(text.lines().count(), 5);
        let back = parse_csv(&text).unwrap();
        for (a, b) in back.iter().zip(&recs) {
            assert_eq!(a.flops, b.flops);
            assert_eq!(a.truncated, b.truncated);
            assert!(a.wall_ms == b.wall_ms || (a.wall_ms.is_nan() && b.wall_ms.is_nan()));
        }
        assert_eq!(parse_csv(CSV_HEADER).unwrap(), vec![]);
    }

    #[test]
    fn budget_boundaries() {
        let d = small();
        let one = sample_footprint(Mechanism::Ufo, 16, &d, 1).unwrap();
        assert_eq!(max_batch_probe(Mechanism::Ufo, 16, &d, one).unwrap(), 1);
        assert_eq!(max_batch_probe(Mechanism::Ufo, 16, &d, one - 1).unwrap(), 0);
        let mut last = 0;
        for k in 1..6 {
            let b = max_batch_probe(Mechanism::Ufo, 16, &d, one << k).unwrap();
            assert!(b >= last);
            assert!(sample_footprint(Mechanism::Ufo, 16, &d, b).unwrap() <= one << k);
            last = b;
        }
    }

    #[test]
    fn over_budget_point_is_truncated() {
        let opts = SweepOptions { repeats: 1, budget_bytes: Some(20_000), ..Default::default() };
        let recs = run_scaling_sweep_with(Mechanism::Softmax, &[4, 8, 16, 256], &small(), &opts).unwrap();
        assert!(!recs[0].truncated);
        assert!(recs[3].truncated);
    }
}
