use std::collections::BTreeSet;

use nattn_core::fused::fused_forward;
use nattn_core::reference::{dense_oracle, na_forward};
use nattn_core::tiled::{plan_tiles, tiled_forward};
use nattn_core::{
    halo_range, inverse_neighborhood, neighborhood_contains, partition_dilated, validate,
    window_start, AxisParams, NaParams, ProblemSpec, Tensor, TileConfig,
};
use proptest::prelude::*;

fn coords(extents: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &e in extents {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..e).map(move |i| {
                    let mut v = p.clone();
                    v.push(i);
                    v
                })
            })
            .collect();
    }
    out
}

/// One axis: (extent, window, dilation, causal), always valid.
fn axis(max_dilation: usize) -> impl Strategy<Value = (usize, AxisParams)> {
    (1usize..=8, 1..=max_dilation, any::<bool>(), any::<u8>()).prop_filter_map(
        "axis needs a residue class",
        |(extent, dilation, causal, pick)| {
            let smallest = extent / dilation;
            if smallest == 0 {
                return None;
            }
            let windows: Vec<usize> = (1..=smallest).filter(|w| causal || w % 2 == 1).collect();
            let window = windows[pick as usize % windows.len()];
            Some((extent, AxisParams::new(window, dilation, causal)))
        },
    )
}

fn problem(max_dilation: usize, head_dim: usize) -> impl Strategy<Value = (ProblemSpec, NaParams)> {
    prop::collection::vec(axis(max_dilation), 1..=3).prop_map(move |axes| {
        let extents: Vec<usize> = axes.iter().map(|a| a.0).collect();
        let p = ProblemSpec::new(1, 1, &extents, head_dim);
        let params = NaParams::new(axes.into_iter().map(|a| a.1).collect(), head_dim);
        validate(&p, &params).expect("generator yields valid problems");
        (p, params)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn self_is_always_attended((p, params) in problem(2, 1)) {
        for q in coords(&p.extents) {
            prop_assert!(neighborhood_contains(&q, &q, &p, &params));
        }
    }

    #[test]
    fn inverse_matches_forward_predicate((p, params) in problem(2, 1)) {
        let all = coords(&p.extents);
        let mut forward_pairs = 0;
        let mut inverse_pairs = 0;
        for c in &all {
            let inv: BTreeSet<Vec<usize>> = inverse_neighborhood(c, &p, &params).into_iter().collect();
            let expect: BTreeSet<Vec<usize>> = all
                .iter()
                .filter(|q| neighborhood_contains(q, c, &p, &params))
                .cloned()
                .collect();
            prop_assert_eq!(&inv, &expect);
            inverse_pairs += inv.len();
        }
        for q in &all {
            forward_pairs += all.iter().filter(|c| neighborhood_contains(q, c, &p, &params)).count();
        }
        prop_assert_eq!(forward_pairs, inverse_pairs);
    }

    #[test]
    fn window_member_counts((p, params) in problem(1, 1)) {
        for q in coords(&p.extents) {
            let count = coords(&p.extents)
                .iter()
                .filter(|c| neighborhood_contains(&q, c, &p, &params))
                .count();
            let expect: usize = params
                .axes
                .iter()
                .zip(&q)
                .map(|(a, &i)| if a.causal { a.window.min(i + 1) } else { a.window })
                .product();
            prop_assert_eq!(count, expect);
        }
    }

    #[test]
    fn halo_is_minimal_cover((p, params) in problem(1, 1), seed in any::<u64>()) {
        let q_range: Vec<(usize, usize)> = p
            .extents
            .iter()
            .enumerate()
            .map(|(a, &e)| {
                let x = (seed >> (8 * a)) as usize % e;
                let y = (seed >> (8 * a + 4)) as usize % e;
                (x.min(y), x.max(y))
            })
            .collect();
        let halo = halo_range(&q_range, &p, &params);
        for a in 0..p.rank() {
            let (mut lo, mut hi) = (usize::MAX, 0);
            for qi in q_range[a].0..=q_range[a].1 {
                let s = window_start(qi, p.extents[a], params.axes[a]);
                let e = if params.axes[a].causal { qi } else { s + params.axes[a].window - 1 };
                lo = lo.min(s);
                hi = hi.max(e);
            }
            prop_assert_eq!(halo[a], (lo, hi));
        }
    }

    #[test]
    fn partition_is_a_partition((p, params) in problem(2, 1)) {
        let subs = partition_dilated(&p, &params);
        let expected: usize = params.axes.iter().map(|a| a.dilation).product();
        prop_assert_eq!(subs.len(), expected);
        let mut seen = BTreeSet::new();
        for sub in &subs {
            prop_assert!(!sub.params.is_dilated());
            for c in coords(&sub.problem.extents) {
                prop_assert!(seen.insert(sub.to_original(&c)), "overlap");
            }
        }
        prop_assert_eq!(seen.len(), p.num_tokens());
    }

    #[test]
    fn tile_plan_covers_disjointly((p, params) in problem(1, 1), t0 in 1usize..5, t1 in 1usize..5, t2 in 1usize..5) {
        let tile: Vec<usize> = [t0, t1, t2][..p.rank()].to_vec();
        let items = plan_tiles(&p, &params, &TileConfig::square(tile));
        let mut seen = BTreeSet::new();
        for item in &items {
            prop_assert_eq!(&item.halo, &halo_range(&item.q_range, &p, &params));
            let block: Vec<usize> = item.q_range.iter().map(|r| r.1 - r.0 + 1).collect();
            for c in coords(&block) {
                let q: Vec<usize> = c.iter().zip(&item.q_range).map(|(o, r)| o + r.0).collect();
                prop_assert!(seen.insert(q));
            }
        }
        prop_assert_eq!(seen.len(), p.num_tokens());
    }

    #[test]
    fn strategies_agree_with_oracle((p, params) in problem(2, 3), seed in any::<u64>(), t in 1usize..5, kv in 1usize..4) {
        let shape = p.qkv_shape();
        let q = Tensor::<f64>::random(&shape, seed);
        let k = Tensor::<f64>::random(&shape, seed.wrapping_add(1));
        let v = Tensor::<f64>::random(&shape, seed.wrapping_add(2));
        let oracle = dense_oracle(&q, &k, &v, &p, &params).unwrap();
        let (out, lse, _) = na_forward(&q, &k, &v, &p, &params).unwrap();
        prop_assert!(out.max_abs_diff(&oracle) <= 1e-12);
        let cfg = TileConfig::new(vec![t; p.rank()], vec![kv; p.rank()]);
        let tiled = tiled_forward(&q, &k, &v, &p, &params, &cfg).unwrap();
        prop_assert!(tiled.out.max_abs_diff(&oracle) <= 1e-12);
        let fused = fused_forward(&q, &k, &v, &p, &params, &cfg).unwrap();
        prop_assert!(fused.out.max_abs_diff(&oracle) <= 1e-12);
        prop_assert!(fused.lse.0.max_abs_diff(&lse.0) <= 1e-12);
    }
}

#[test]
fn batch_and_head_permutation_equivariance() {
    let p = ProblemSpec::new(3, 2, &[6, 5], 4);
    let params = NaParams::new(vec![AxisParams::window(3), AxisParams::causal(2)], 4);
    let shape = p.qkv_shape();
    let q = Tensor::<f64>::random(&shape, 1);
    let k = Tensor::<f64>::random(&shape, 2);
    let v = Tensor::<f64>::random(&shape, 3);
    let perm_b = [2, 0, 1];
    let perm_h = [1, 0];
    let permute = |t: &Tensor<f64>| {
        Tensor::from_fn(t.shape(), |i| {
            let mut j = i.to_vec();
            j[0] = perm_b[i[0]];
            j[1] = perm_h[i[1]];
            t.get(&j)
        })
    };
    let (out, _, _) = na_forward(&q, &k, &v, &p, &params).unwrap();
    let (pout, _, _) = na_forward(&permute(&q), &permute(&k), &permute(&v), &p, &params).unwrap();
    assert!(pout.bitwise_eq(&permute(&out)));
    let cfg = TileConfig::default_for_rank(2);
    let f = fused_forward(&permute(&q), &permute(&k), &permute(&v), &p, &params, &cfg).unwrap();
    let f0 = fused_forward(&q, &k, &v, &p, &params, &cfg).unwrap();
    assert!(f.out.bitwise_eq(&permute(&f0.out)));
}

#[test]
fn strided_inputs_are_accepted() {
    let p = ProblemSpec::new(1, 1, &[5], 3);
    let params = NaParams::new(vec![AxisParams::window(3)], 3);
    let q = Tensor::<f64>::random(&p.qkv_shape(), 1);
    // same values stored as [dim, token] and viewed back as [.., token, dim]
    let stored = q.permuted(&[0, 1, 3, 2]).to_contiguous();
    let view = stored.permuted(&[0, 1, 3, 2]);
    assert!(!view.is_contiguous());
    let (a, _, _) = na_forward(&q, &q, &q, &p, &params).unwrap();
    let (b, _, _) = na_forward(&view, &view, &view, &p, &params).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn output_independent_of_tile_config() {
    let p = ProblemSpec::new(1, 2, &[12, 9], 8);
    let params = NaParams::new(vec![AxisParams::window(5), AxisParams::new(3, 2, false)], 8);
    let shape = p.qkv_shape();
    let q = Tensor::<f32>::random(&shape, 1);
    let k = Tensor::<f32>::random(&shape, 2);
    let v = Tensor::<f32>::random(&shape, 3);
    let configs = nattn_core::autotune::candidate_configs(&p, &params, true);
    let base = fused_forward(&q, &k, &v, &p, &params, &configs[0])
        .unwrap()
        .out;
    for cfg in &configs[1..] {
        let f = fused_forward(&q, &k, &v, &p, &params, cfg).unwrap().out;
        let t = tiled_forward(&q, &k, &v, &p, &params, cfg).unwrap().out;
        assert!(f.max_abs_diff(&base) <= 1e-5, "{cfg:?}");
        assert!(t.max_abs_diff(&base) <= 1e-5, "{cfg:?}");
    }
}
