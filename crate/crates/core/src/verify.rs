//! Property suites run by `ufo verify` and reused by the acceptance tests.
//!
//! Each property returns a one-line detail on success and a reason on
//! failure. Suites are grouped by a name prefix (`grad/`, `attention/`,
//! `scaling/`) that `--filter` matches against.

use std::time::Instant;

use crate::attention::{
    softmax_attention_on, ufo_attention, ufo_attention_on, ufo_attention_reference, ufo_attention_traced,
    AttentionDims, AttentionParams, AttentionSpec, NormKind,
};
use crate::bench::{fit_records, run_scaling_sweep, Mechanism, Metric, SweepDims};
use crate::counters::measure;
use crate::error::Result;
use crate::gradcheck;
use crate::model::{ForwardOptions, ModelConfig, UfoViT};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::cross_entropy_ls;

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// A differentiable function with inputs at which to check its gradient.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    /// Coordinates probed per input; `None` probes all.
    pub coords: Option<usize>,
    pub tolerance: f64,
    pub f: Forward,
}

impl GradCase {
    fn new(
        name: &str,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        GradCase { name: name.into(), inputs, coords: None, tolerance: 1e-4, f: Box::new(f) }
    }

    /// Runs the finite-difference comparison.
    pub fn check(&self, seed: u64) -> Result<gradcheck::GradReport> {
        gradcheck::check(&self.inputs, self.coords, seed, &self.f)
    }
}

fn rand(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).expect("extents")
}

fn positive(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    rand(shape, rng).map(|v| 0.5 + v.abs())
}

/// Gradient cases covering every differentiable tape primitive.
pub fn gradient_cases() -> Vec<GradCase> {
    gradient_cases_seeded(0x5EED)
}

/// [`gradient_cases`] with inputs drawn from `seed`.
pub fn gradient_cases_seeded(seed: u64) -> Vec<GradCase> {
    let mut r = SplitMix64::new(seed);
    let mut cases = vec![
        GradCase::new("matmul", vec![rand(&[2, 3, 4], &mut r), rand(&[4, 5], &mut r)], |t, v| t.matmul(v[0], v[1])),
        GradCase::new("matmul-batched", vec![rand(&[2, 3, 4], &mut r), rand(&[2, 4, 5], &mut r)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        GradCase::new("matmul-ta", vec![rand(&[2, 4, 3], &mut r), rand(&[2, 4, 5], &mut r)], |t, v| {
            t.matmul_t(v[0], v[1], true, false)
        }),
        GradCase::new("matmul-tb", vec![rand(&[2, 3, 4], &mut r), rand(&[5, 4], &mut r)], |t, v| {
            t.matmul_t(v[0], v[1], false, true)
        }),
        GradCase::new("matmul-tatb", vec![rand(&[2, 4, 3], &mut r), rand(&[2, 5, 4], &mut r)], |t, v| {
            t.matmul_t(v[0], v[1], true, true)
        }),
        GradCase::new("conv2d", vec![rand(&[2, 3, 7, 6], &mut r), rand(&[4, 3, 3, 3], &mut r)], |t, v| {
            t.conv2d(v[0], v[1], 2, 1, 1)
        }),
        GradCase::new("conv2d-depthwise", vec![rand(&[2, 4, 5, 5], &mut r), rand(&[4, 1, 3, 3], &mut r)], |t, v| {
            t.conv2d(v[0], v[1], 1, 1, 4)
        }),
        GradCase::new("conv2d-patch", vec![rand(&[1, 2, 8, 8], &mut r), rand(&[3, 2, 4, 4], &mut r)], |t, v| {
            t.conv2d(v[0], v[1], 4, 0, 1)
        }),
        GradCase::new("add-broadcast", vec![rand(&[2, 3, 4], &mut r), rand(&[4], &mut r)], |t, v| t.add(v[0], v[1])),
        GradCase::new("sub-broadcast", vec![rand(&[2, 3, 4], &mut r), rand(&[3, 1], &mut r)], |t, v| t.sub(v[0], v[1])),
        GradCase::new("mul-broadcast", vec![rand(&[2, 3, 4], &mut r), rand(&[2, 1, 1], &mut r)], |t, v| t.mul(v[0], v[1])),
        GradCase::new("scale", vec![rand(&[3, 4], &mut r)], |t, v| t.scale(v[0], -1.7)),
        GradCase::new("gelu", vec![rand(&[3, 5], &mut r)], |t, v| t.gelu(v[0])),
        GradCase::new("layer_norm", vec![rand(&[2, 3, 6], &mut r), rand(&[6], &mut r), rand(&[6], &mut r)], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-6)
        }),
        GradCase::new("l2_normalize-rows", vec![rand(&[2, 5, 4], &mut r), rand(&[1], &mut r)], |t, v| {
            t.l2_normalize(v[0], 2, v[1], 0.0)
        }),
        GradCase::new("l2_normalize-columns", vec![rand(&[2, 4, 4], &mut r), rand(&[1], &mut r)], |t, v| {
            t.l2_normalize(v[0], 1, v[1], 1e-6)
        }),
        GradCase::new("l2_normalize-per-slice-gamma", vec![rand(&[3, 4], &mut r), rand(&[3], &mut r)], |t, v| {
            t.l2_normalize(v[0], 1, v[1], 0.0)
        }),
        GradCase::new(
            "p_normalize",
            vec![rand(&[2, 4, 3], &mut r), rand(&[1], &mut r), Tensor::scalar(2.0)],
            |t, v| t.p_normalize(v[0], 2, v[1], v[2], 1e-6),
        ),
        GradCase::new(
            "p_normalize-exponent",
            vec![rand(&[3, 5], &mut r), rand(&[1], &mut r), Tensor::scalar(2.7)],
            |t, v| t.p_normalize(v[0], 0, v[1], v[2], 1e-6),
        ),
        GradCase::new("standardize", vec![rand(&[2, 4, 6], &mut r), rand(&[1], &mut r)], |t, v| {
            t.standardize(v[0], &[2], v[1], 1e-6)
        }),
        GradCase::new("standardize-grouped", vec![rand(&[2, 3, 2, 4], &mut r), rand(&[1], &mut r)], |t, v| {
            t.standardize(v[0], &[1, 3], v[1], 1e-6)
        }),
        GradCase::new("softmax", vec![rand(&[3, 6], &mut r)], |t, v| t.softmax(v[0])),
        GradCase::new("log_softmax", vec![rand(&[3, 6], &mut r)], |t, v| t.log_softmax(v[0])),
        GradCase::new("sum", vec![rand(&[3, 4], &mut r)], |t, v| t.sum(v[0])),
        GradCase::new("mean", vec![rand(&[3, 4], &mut r)], |t, v| t.mean(v[0])),
        GradCase::new("transpose", vec![rand(&[2, 3, 4], &mut r)], |t, v| t.transpose(v[0])),
        GradCase::new("reshape", vec![rand(&[2, 6], &mut r)], |t, v| t.reshape(v[0], &[3, 4])),
        GradCase::new("concat", vec![rand(&[2, 3, 2], &mut r), rand(&[2, 1, 2], &mut r)], |t, v| {
            t.concat(&[v[0], v[1], v[0]], 1)
        }),
        GradCase::new("slice", vec![rand(&[3, 5, 2], &mut r)], |t, v| t.slice(v[0], 1, 1, 3)),
        GradCase::new("bicubic_resize2d-up", vec![rand(&[2, 4, 4], &mut r)], |t, v| t.bicubic_resize2d(v[0], 7, 6)),
        GradCase::new("bicubic_resize2d-down", vec![rand(&[1, 6, 5], &mut r)], |t, v| t.bicubic_resize2d(v[0], 3, 4)),
        GradCase::new("cross_entropy_ls", vec![rand(&[4, 5], &mut r)], |t, v| cross_entropy_ls(t, v[0], &[0, 3, 4, 1], 0.1)),
    ];

    let dims = AttentionDims::new(5, 6, 8, 2).expect("dims");
    let mut inputs = vec![rand(&[1, 5, 6], &mut r)];
    for shape in [[6, 8], [6, 8], [6, 8], [8, 6]] {
        inputs.push(rand(&shape, &mut r).map(|v| 0.5 * v));
    }
    inputs.push(positive(&[2], &mut r));
    inputs.push(positive(&[2], &mut r));
    for kind in NormKind::ALL {
        let mut ins = inputs.clone();
        let exps = kind.has_exponent();
        if exps {
            ins.push(Tensor::from_vec(&[2], vec![2.0, 2.5]).expect("extents"));
            ins.push(Tensor::from_vec(&[2], vec![3.0, 2.0]).expect("extents"));
        }
        let spec = AttentionSpec { heads: dims.heads, kind, eps: 1e-6 };
        cases.push(GradCase::new(&format!("ufo_attention-{kind}"), ins, move |t, v| {
            let vars = crate::attention::AttentionVars {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_proj: v[4],
                gamma_q: v[5],
                gamma_kv: v[6],
                p_q: exps.then(|| v[7]),
                p_kv: exps.then(|| v[8]),
            };
            ufo_attention_on(t, v[0], v[0], &vars, &spec, None)
        }));
    }
    cases.push(GradCase::new("softmax_attention", inputs[..5].to_vec(), move |t, v| {
        let vars = crate::attention::AttentionVars {
            w_q: v[1],
            w_k: v[2],
            w_v: v[3],
            w_proj: v[4],
            gamma_q: v[1],
            gamma_kv: v[1],
            p_q: None,
            p_kv: None,
        };
        softmax_attention_on(t, v[0], v[0], &vars, 2)
    }));
    cases
}

/// Smallest model exercising every layer type: under 5k parameters.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        dim: 8,
        embed: 4,
        heads: 2,
        patch_size: 4,
        input_resolution: 8,
        num_classes: 3,
        in_chans: 1,
        droppath_rate: 0.2,
        class_attn_depth: 2,
        ffn_ratio: 2,
        ..ModelConfig::tiny()
    }
}

fn model_case(name: &str, config: &ModelConfig, coords: Option<usize>, seed: u64) -> Result<GradCase> {
    let mut model = UfoViT::<f64>::build(config, seed)?;
    // Move every parameter off its initial value so no gradient is trivially
    // zero (affine scales start at 1e-4, biases at 0).
    let mut rng = SplitMix64::new(seed ^ 0xA5A5);
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let res = config.input_resolution;
    let images = rand(&[2, config.in_chans, res, res], &mut rng);
    let labels = vec![0, config.num_classes - 1];
    let mut inputs = vec![images];
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    let drop_seed = seed + 1;
    let mut case = GradCase::new(name, inputs, move |t, v| {
        let mut rng = SplitMix64::new(drop_seed);
        let opts = ForwardOptions { train: true, trainable: crate::model::Trainable::Nothing, rng: Some(&mut rng), probe: false };
        let out = model.forward_bound(t, v[0], &v[1..], opts)?;
        cross_entropy_ls(t, out.logits, &labels, 0.1)
    });
    case.coords = coords;
    case.tolerance = 1e-3;
    Ok(case)
}

/// End-to-end cases: every coordinate of the micro model, then a random
/// subset of coordinates of the Tiny model.
pub fn model_gradient_cases(tiny_coords: usize) -> Result<Vec<GradCase>> {
    let tiny = ModelConfig { in_chans: 1, ..ModelConfig::tiny() };
    Ok(vec![
        model_case("model-micro", &micro_config(), None, 7)?,
        model_case("model-tiny", &tiny, Some(tiny_coords), 8)?,
    ])
}

/// Coordinates probed per input of the Tiny end-to-end check.
pub const TINY_COORDS: usize = 8;

/// Random attention problem for the property suites.
pub struct AttentionCase {
    pub x: Tensor<f64>,
    pub params: AttentionParams<f64>,
    pub dims: AttentionDims,
}

/// Configuration `i` of the random family: N in 1..=64, heads in {1, 2, 4},
/// h in 2..=16, d_model in 2..=24, eps 0.
pub fn attention_case(i: u64) -> AttentionCase {
    let mut rng = SplitMix64::new(0xC0FFEE ^ i.wrapping_mul(0x9E37_79B9));
    let tokens = 1 + rng.below(64) as usize;
    let heads = [1, 2, 4][rng.below(3) as usize];
    let h = 2 + rng.below(15) as usize;
    let d_model = 2 + rng.below(23) as usize;
    let dims = AttentionDims::new(tokens, d_model, heads * h, heads).expect("valid dims");
    let mut params = AttentionParams::init(&dims, 1.0 / (d_model as f64).sqrt(), &mut rng).expect("init");
    params.eps = 0.0;
    for g in params.gamma_q.data_mut().iter_mut().chain(params.gamma_kv.data_mut()) {
        *g = 0.5 + rng.next_f64() * 1.5;
    }
    let x = rand(&[tokens, d_model], &mut rng);
    AttentionCase { x, params, dims }
}

/// Worst relative deviation of fused from reference over `cases` configurations.
pub fn oracle_equivalence(cases: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let c = attention_case(i);
        let fused = ufo_attention(&c.x, &c.params, &c.dims)?;
        let reference = ufo_attention_reference(&c.x, &c.params, &c.dims)?;
        worst = worst.max(fused.max_rel_diff(&reference));
    }
    Ok(worst)
}

/// Worst deviation of `f(π x)` from `π f(x)`.
pub fn permutation_equivariance(cases: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let c = attention_case(i);
        let (n, d) = (c.dims.tokens, c.dims.d_model);
        let mut perm: Vec<usize> = (0..n).collect();
        SplitMix64::new(i).shuffle(&mut perm);
        let permute = |t: &Tensor<f64>| {
            let data: Vec<f64> = perm.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec()).collect();
            Tensor::from_vec(&[n, d], data).expect("extents")
        };
        let y = ufo_attention(&c.x, &c.params, &c.dims)?;
        let yp = ufo_attention(&permute(&c.x), &c.params, &c.dims)?;
        worst = worst.max(yp.max_abs_diff(&permute(&y)));
    }
    Ok(worst)
}

/// Worst relative change when each of W_Q, W_K, W_V is scaled by a random
/// positive constant.
pub fn scale_invariance(cases: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let c = attention_case(i);
        let base = ufo_attention(&c.x, &c.params, &c.dims)?;
        let mut rng = SplitMix64::new(i ^ 0x51);
        for which in 0..3 {
            let factor = (rng.normal() * 2.0).exp();
            let mut p = c.params.clone();
            let w = match which {
                0 => &mut p.w_q,
                1 => &mut p.w_k,
                _ => &mut p.w_v,
            };
            *w = w.map(|v| v * factor);
            let y = ufo_attention(&c.x, &p, &c.dims)?;
            worst = worst.max(y.max_rel_diff(&base));
        }
    }
    Ok(worst)
}

/// Worst `| ‖slice‖ − |γ| |` over every non-zero normalized query row and
/// `KᵀV` column.
pub fn norm_constraint(cases: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let c = attention_case(i);
        let tr = ufo_attention_traced(&c.x, &c.params, &c.dims)?;
        let h = c.dims.head_dim();
        for head in 0..c.dims.heads {
            let gq = c.params.gamma_q.data()[head].abs();
            let gkv = c.params.gamma_kv.data()[head].abs();
            for row in tr.q_hat[head].data().chunks(h) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm != 0.0 {
                    worst = worst.max((norm - gq).abs());
                }
            }
            let m = tr.m_hat[head].data();
            for j in 0..h {
                let norm = (0..h).map(|r| m[r * h + j].powi(2)).sum::<f64>().sqrt();
                if norm != 0.0 {
                    worst = worst.max((norm - gkv).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Worst `|row sum − 1|` of softmax attention matrices.
pub fn softmax_rows(cases: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let c = attention_case(i);
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(c.x.reshape(&[1, c.dims.tokens, c.dims.d_model])?)?;
        let vars = c.params.bind(&mut tape, false)?;
        let h = c.dims.head_dim();
        let wq = tape.slice(vars.w_q, 1, 0, h)?;
        let wk = tape.slice(vars.w_k, 1, 0, h)?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let s = tape.matmul_t(q, k, false, true)?;
        let s = tape.scale(s, 1.0 / (h as f64).sqrt())?;
        let p = tape.softmax(s)?;
        for row in tape.value(p).data().chunks(c.dims.tokens) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Peak live bytes of one forward pass relative to input plus parameter
/// bytes, at `tokens` tokens, one head of width 16 and `d_model` 16.
pub fn memory_ratio(mech: Mechanism, tokens: usize) -> Result<f64> {
    let dims = AttentionDims::new(tokens, 16, 16, 1)?;
    let mut rng = SplitMix64::new(3);
    let params = AttentionParams::<f32>::init(&dims, 0.25, &mut rng)?;
    let xs: Vec<f64> = (0..tokens * 16).map(|_| rng.normal()).collect();
    let x = Tensor::<f32>::from_f64(&[1, tokens, 16], &xs)?;
    let footprint = x.size_bytes()
        + [&params.w_q, &params.w_k, &params.w_v, &params.w_proj, &params.gamma_q, &params.gamma_kv]
            .iter()
            .map(|t| t.size_bytes())
            .sum::<usize>();
    let (res, counts) = measure(|| -> Result<()> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone())?;
        let vars = params.bind(&mut tape, false)?;
        match mech {
            Mechanism::Ufo => {
                let spec = AttentionSpec { heads: 1, kind: NormKind::XNorm, eps: 1e-6 };
                ufo_attention_on(&mut tape, xv, xv, &vars, &spec, None)?;
            }
            Mechanism::Softmax => {
                softmax_attention_on(&mut tape, xv, xv, &vars, 1)?;
            }
        }
        Ok(())
    });
    res?;
    Ok(counts.peak_bytes as f64 / footprint as f64)
}

/// Outcome of one property.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = Box<dyn Fn() -> std::result::Result<String, String>>;

/// A named property.
pub struct Property {
    pub name: String,
    check: Check,
}

impl Property {
    fn new(name: impl Into<String>, check: impl Fn() -> std::result::Result<String, String> + 'static) -> Self {
        Property { name: name.into(), check: Box::new(check) }
    }

    pub fn run(&self) -> Outcome {
        let t = Instant::now();
        let (passed, detail) = match (self.check)() {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        Outcome { name: self.name.clone(), passed, detail, seconds: t.elapsed().as_secs_f64() }
    }
}

fn bound(name: &str, value: Result<f64>, limit: f64) -> std::result::Result<String, String> {
    match value {
        Ok(v) if v <= limit => Ok(format!("{name} = {v:.3e} <= {limit:.0e}")),
        Ok(v) => Err(format!("{name} = {v:.3e} exceeds {limit:.0e}")),
        Err(e) => Err(e.to_string()),
    }
}

fn slope_in(mech: Mechanism, metric: Metric, lo: f64, hi: f64) -> std::result::Result<String, String> {
    let recs = run_scaling_sweep(mech, &[64, 128, 256, 512, 1024], &SweepDims::default(), 1).map_err(|e| e.to_string())?;
    let fit = fit_records(&recs, metric).map_err(|e| e.to_string())?;
    let msg = format!("slope {:.3} (r2 {:.4}), expected [{lo}, {hi}]", fit.slope, fit.r2);
    if (lo..=hi).contains(&fit.slope) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Every property, in execution order. The norm constraint runs first among
/// the attention suites.
pub fn properties() -> Vec<Property> {
    let mut out = Vec::new();
    for (i, case) in gradient_cases().into_iter().enumerate() {
        let name = format!("grad/{}", case.name);
        out.push(Property::new(name, move || match case.check(i as u64) {
            Ok(r) if r.max_rel_err < case.tolerance => {
                Ok(format!("max rel err {:.2e} over {} coords", r.max_rel_err, r.checked))
            }
            Ok(r) => Err(format!("max rel err {:.2e} at {:?} exceeds {:.0e}", r.max_rel_err, r.worst, case.tolerance)),
            Err(e) => Err(e.to_string()),
        }));
    }
    for (i, name) in ["grad/model-micro", "grad/model-tiny"].into_iter().enumerate() {
        out.push(Property::new(name, move || {
            let cases = model_gradient_cases(TINY_COORDS).map_err(|e| e.to_string())?;
            let case = &cases[i];
            let r = case.check(1).map_err(|e| e.to_string())?;
            if r.max_rel_err < case.tolerance {
                Ok(format!("max rel err {:.2e} over {} coords", r.max_rel_err, r.checked))
            } else {
                Err(format!("max rel err {:.2e} at {:?}", r.max_rel_err, r.worst))
            }
        }));
    }
    out.push(Property::new("attention/norm-constraint", || bound("max deviation", norm_constraint(100), 1e-12)));
    out.push(Property::new("attention/oracle-equivalence", || bound("max rel err", oracle_equivalence(100), 1e-10)));
    out.push(Property::new("attention/permutation-equivariance", || {
        bound("max abs err", permutation_equivariance(100), 1e-12)
    }));
    out.push(Property::new("attention/scale-invariance", || bound("max rel err", scale_invariance(100), 1e-10)));
    out.push(Property::new("attention/softmax-rows", || bound("max |sum - 1|", softmax_rows(100), 1e-12)));
    out.push(Property::new("scaling/ufo-flops", || slope_in(Mechanism::Ufo, Metric::Flops, 0.9, 1.15)));
    out.push(Property::new("scaling/softmax-flops", || slope_in(Mechanism::Softmax, Metric::Flops, 1.8, 2.05)));
    out.push(Property::new("scaling/ufo-memory", || slope_in(Mechanism::Ufo, Metric::PeakBytes, 0.9, 1.15)));
    out.push(Property::new("scaling/no-quadratic-buffer", || {
        let u = memory_ratio(Mechanism::Ufo, 4096).map_err(|e| e.to_string())?;
        let s = memory_ratio(Mechanism::Softmax, 4096).map_err(|e| e.to_string())?;
        let msg = format!("peak/footprint ufo {u:.2}, softmax {s:.1}");
        if u < 10.0 && s > 10.0 {
            Ok(msg)
        } else {
            Err(msg)
        }
    }));
    out
}

/// Runs the properties whose name contains `filter`, reporting each as it
/// finishes.
pub fn run(filter: Option<&str>, mut on_result: impl FnMut(&Outcome)) -> Vec<Outcome> {
    properties()
        .into_iter()
        .filter(|p| filter.is_none_or(|f| p.name.contains(f)))
        .map(|p| {
            let o = p.run();
            on_result(&o);
            o
        })
        .collect()
}
