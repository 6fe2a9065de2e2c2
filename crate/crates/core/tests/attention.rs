use proptest::prelude::*;

use ufo_core::attention::{
    attention_map_approx, softmax_attention, softmax_flops, ufo_attention, ufo_attention_reference, ufo_flops,
    AttentionDims, AttentionParams, NormKind,
};
use ufo_core::counters::measure;
use ufo_core::rng::SplitMix64;
use ufo_core::Tensor;

fn case(n: usize, d: usize, heads: usize, h: usize, seed: u64) -> (Tensor<f64>, AttentionParams<f64>, AttentionDims) {
    let dims = AttentionDims::new(n, d, heads * h, heads).unwrap();
    let mut rng = SplitMix64::new(seed);
    let mut params = AttentionParams::init(&dims, 0.4, &mut rng).unwrap();
    params.eps = 0.0;
    let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    (Tensor::from_vec(&[n, d], x).unwrap(), params, dims)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_matches_reference(n in 1usize..40, d in 2usize..16, heads in 1usize..4, h in 2usize..8, seed in any::<u64>()) {
        let (x, p, dims) = case(n, d, heads, h, seed);
        let fused = ufo_attention(&x, &p, &dims).unwrap();
        let reference = ufo_attention_reference(&x, &p, &dims).unwrap();
        prop_assert!(fused.max_rel_diff(&reference) <= 1e-10);
    }

    #[test]
    fn token_permutation_permutes_output(n in 2usize..40, heads in 1usize..4, seed in any::<u64>()) {
        let (x, p, dims) = case(n, 8, heads, 4, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        SplitMix64::new(seed ^ 1).shuffle(&mut perm);
        let rows = |t: &Tensor<f64>| -> Tensor<f64> {
            let data = perm.iter().flat_map(|&r| t.data()[r * 8..(r + 1) * 8].to_vec()).collect();
            Tensor::from_vec(&[n, 8], data).unwrap()
        };
        let y = ufo_attention(&x, &p, &dims).unwrap();
        let yp = ufo_attention(&rows(&x), &p, &dims).unwrap();
        prop_assert!(yp.max_abs_diff(&rows(&y)) <= 1e-12);
    }

    #[test]
    fn output_ignores_input_scale(n in 1usize..30, seed in any::<u64>(), log_scale in -3.0f64..3.0) {
        // q, k and v are linear in x, and both normalizations remove the scale.
        let (x, p, dims) = case(n, 6, 2, 3, seed);
        let y = ufo_attention(&x, &p, &dims).unwrap();
        let ys = ufo_attention(&x.map(|v| v * log_scale.exp()), &p, &dims).unwrap();
        prop_assert!(ys.max_rel_diff(&y) <= 1e-9);
    }

    #[test]
    fn attention_map_is_a_distribution(n in 1usize..24, seed in any::<u64>()) {
        let (x, p, dims) = case(n, 8, 2, 4, seed);
        let q = Tensor::from_vec(&[1, 8], x.data()[..8].to_vec()).unwrap();
        let w = attention_map_approx(&x, &q, &p, &dims, 1e-4).unwrap();
        prop_assert_eq!(w.shape(), &[n]);
        prop_assert!(w.data().iter().all(|&v| v >= 0.0));
        prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn counted_flops_match_closed_forms() {
    for n in [16, 64, 200] {
        let (x, p, dims) = case(n, 12, 3, 4, 5);
        let (_, ufo) = measure(|| ufo_attention(&x, &p, &dims).unwrap());
        let (_, soft) = measure(|| softmax_attention(&x, &p, &dims).unwrap());
        let (uf, sf) = (ufo_flops(&dims, 1) as f64, softmax_flops(&dims, 1) as f64);
        assert!((ufo.flops as f64 / uf - 1.0).abs() < 0.1, "ufo {} vs {uf}", ufo.flops);
        assert!((soft.flops as f64 / sf - 1.0).abs() < 0.1, "softmax {} vs {sf}", soft.flops);
    }
}

#[test]
fn every_variant_runs_and_stays_finite() {
    for kind in NormKind::ALL {
        let (x, mut p, dims) = case(10, 8, 2, 4, 9);
        p.kind = kind;
        p.eps = 1e-6;
        let y = ufo_attention(&x, &p, &dims).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()), "{kind}");
    }
}

#[test]
fn f32_tracks_f64() {
    let (x, p, dims) = case(32, 8, 2, 4, 11);
    let cast = |t: &Tensor<f64>| Tensor::<f32>::from_f64(t.shape(), t.data()).unwrap();
    let p32 = AttentionParams {
        w_q: cast(&p.w_q),
        w_k: cast(&p.w_k),
        w_v: cast(&p.w_v),
        w_proj: cast(&p.w_proj),
        gamma_q: cast(&p.gamma_q),
        gamma_kv: cast(&p.gamma_kv),
        p_q: cast(&p.p_q),
        p_kv: cast(&p.p_kv),
        eps: p.eps,
        kind: p.kind,
    };
    let y = ufo_attention(&x, &p, &dims).unwrap();
    let y32 = ufo_attention(&cast(&x), &p32, &dims).unwrap();
    let back = Tensor::from_vec(&[32, 8], y32.to_f64_vec()).unwrap();
    assert!(back.max_rel_diff(&y) < 1e-5);
}
