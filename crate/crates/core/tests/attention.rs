mod common;

use common::{attention_oracle, conv_naive, random, worst_grad_error, OracleLayer};
use pforecast_core::attention::{
    build_masks, multi_head, AgentMask, AttendMask, Attention, AttentionInputs, AttentionSpec, MaskMode, TokenLayout,
    Variant,
};
use pforecast_core::{Graph, ParamStore, SeededRng, Tensor};

const ALL: [Variant; 4] = [
    Variant::Dot,
    Variant::Difference,
    Variant::AgentAware,
    Variant::AgentAwareDifference,
];

fn build(variant: Variant, width: usize, heads: usize, out: bool, rng: &mut SeededRng) -> (ParamStore, Attention) {
    let mut store = ParamStore::new();
    let mut spec = AttentionSpec::rows(variant, width, heads);
    spec.output_projection = out;
    let a = Attention::new(&mut store, "attn", spec, rng).unwrap();
    (store, a)
}

fn oracle_layer(a: &Attention) -> OracleLayer<'static> {
    OracleLayer {
        name: "attn",
        difference: a.variant.is_difference(),
        agent_aware: a.variant.is_agent_aware(),
        heads: a.heads,
        output_projection: a.out.is_some(),
    }
}

fn random_masks(m1: usize, m2: usize, rng: &mut SeededRng) -> (AgentMask, AttendMask) {
    let ids1: Vec<usize> = (0..m1).map(|_| rng.below(3)).collect();
    let ids2: Vec<usize> = (0..m2).map(|_| rng.below(3)).collect();
    let mut allowed = Tensor::zeros(&[m1, m2]);
    for i in 0..m1 {
        for j in 0..m2 {
            if rng.bernoulli(0.7) {
                allowed.set2(i, j, 1.0);
            }
        }
        allowed.set2(i, rng.below(m2), 1.0);
    }
    (AgentMask::from_ids(&ids1, &ids2), AttendMask::new(allowed).unwrap())
}

#[test]
fn every_variant_matches_loop_oracle_with_heads_and_masks() {
    let mut rng = SeededRng::new(11);
    for trial in 0..12 {
        for variant in ALL {
            let heads = [1, 2, 4][trial % 3];
            let (store, a) = build(variant, 8, heads, heads > 1, &mut rng);
            let (m1, m2) = (1 + rng.below(6), 1 + rng.below(6));
            let xs = random(&[m1, 8], &mut rng);
            let xo = random(&[m2, 8], &mut rng);
            let (agent, attend) = random_masks(m1, m2, &mut rng);
            let y = multi_head(&AttentionInputs::new(xs.clone(), xo.clone()).unwrap(), &a, &store, Some(&agent), &attend)
                .unwrap();
            let want = attention_oracle(&oracle_layer(&a), &store, &xs, &xo, Some(agent.tensor()), attend.tensor());
            assert!(y.max_abs_diff(&want) < 1e-10, "{variant:?} heads={heads}: {}", y.max_abs_diff(&want));
        }
    }
}

/// Copies every parameter of `src` whose name (after renaming) exists in `dst`.
fn copy_params(src: &ParamStore, dst: &mut ParamStore, rename: &[(&str, &str)]) {
    for p in src.iter() {
        let mut name = p.name.clone();
        for (from, to) in rename {
            if let Some(rest) = name.strip_prefix(&format!("attn.{from}.")) {
                name = format!("attn.{to}.{rest}");
                break;
            }
        }
        if let Some(d) = dst.by_name_mut(&name) {
            d.value = p.value.clone();
        }
    }
}

#[test]
fn difference_with_zero_kb_and_vs_degenerates_to_dot() {
    let mut rng = SeededRng::new(21);
    for _ in 0..10 {
        let (mut ds, da) = build(Variant::Difference, 8, 1, false, &mut rng);
        da.k_b.as_ref().unwrap().zero(&mut ds);
        da.v_s.as_ref().unwrap().zero(&mut ds);
        let (mut ps, pa) = build(Variant::Dot, 8, 1, false, &mut rng);
        copy_params(&ds, &mut ps, &[]);
        let inputs = AttentionInputs::new(random(&[4, 8], &mut rng), random(&[5, 8], &mut rng)).unwrap();
        let attend = AttendMask::all(4, 5);
        let y1 = multi_head(&inputs, &da, &ds, None, &attend).unwrap();
        let y2 = multi_head(&inputs, &pa, &ps, None, &attend).unwrap();
        assert!(y1.max_abs_diff(&y2) < 1e-12);
    }
}

#[test]
fn agent_mask_selects_branch() {
    let mut rng = SeededRng::new(31);
    for (aware, plain) in [(Variant::AgentAware, Variant::Dot), (Variant::AgentAwareDifference, Variant::Difference)] {
        let (store, a) = build(aware, 8, 1, false, &mut rng);
        let inputs = AttentionInputs::new(random(&[3, 8], &mut rng), random(&[4, 8], &mut rng)).unwrap();
        let attend = AttendMask::all(3, 4);

        let (mut agent_store, agent_layer) = build(plain, 8, 1, false, &mut rng);
        copy_params(&store, &mut agent_store, &[]);
        let ones = multi_head(&inputs, &a, &store, Some(&AgentMask::full(3, 4, true)), &attend).unwrap();
        let want = multi_head(&inputs, &agent_layer, &agent_store, None, &attend).unwrap();
        assert!(ones.max_abs_diff(&want) < 1e-12, "{aware:?} all-ones");

        let (mut ctx_store, ctx_layer) = build(plain, 8, 1, false, &mut rng);
        copy_params(&store, &mut ctx_store, &[("q_ctx", "q"), ("k_r_ctx", "k_r"), ("k_b_ctx", "k_b")]);
        let zeros = multi_head(&inputs, &a, &store, Some(&AgentMask::full(3, 4, false)), &attend).unwrap();
        let want = multi_head(&inputs, &ctx_layer, &ctx_store, None, &attend).unwrap();
        assert!(zeros.max_abs_diff(&want) < 1e-12, "{aware:?} all-zeros");
    }
}

#[test]
fn one_head_with_identity_output_equals_single_head() {
    let mut rng = SeededRng::new(41);
    for variant in ALL {
        let (mut store, a) = build(variant, 6, 1, true, &mut rng);
        let (w, b) = a.out.as_ref().unwrap().weight_bias();
        store.get_mut(w).value = Tensor::identity(6);
        store.get_mut(b).value.data_mut().fill(0.0);
        let (mut bare_store, bare) = build(variant, 6, 1, false, &mut rng);
        copy_params(&store, &mut bare_store, &[]);
        let inputs = AttentionInputs::new(random(&[3, 6], &mut rng), random(&[3, 6], &mut rng)).unwrap();
        let agent = AgentMask::from_ids(&[0, 1, 1], &[1, 0, 1]);
        let attend = AttendMask::all(3, 3);
        let y1 = multi_head(&inputs, &a, &store, Some(&agent), &attend).unwrap();
        let y2 = multi_head(&inputs, &bare, &bare_store, Some(&agent), &attend).unwrap();
        assert!(y1.max_abs_diff(&y2) < 1e-12);
    }
}

#[test]
fn masked_keys_never_influence_output() {
    let mut rng = SeededRng::new(51);
    for variant in ALL {
        for _ in 0..5 {
            let (store, a) = build(variant, 8, 2, true, &mut rng);
            let xs = random(&[3, 8], &mut rng);
            let mut xo = random(&[5, 8], &mut rng);
            let mut allowed = Tensor::ones(&[3, 5]);
            for i in 0..3 {
                allowed.set2(i, 1, 0.0);
                allowed.set2(i, 3, 0.0);
            }
            let attend = AttendMask::new(allowed).unwrap();
            let agent = AgentMask::from_ids(&[0, 1, 2], &[0, 1, 2, 0, 1]);
            let y1 = multi_head(&AttentionInputs::new(xs.clone(), xo.clone()).unwrap(), &a, &store, Some(&agent), &attend)
                .unwrap();
            for c in 0..8 {
                xo.data_mut()[8 + c] += 100.0 * rng.normal();
                xo.data_mut()[3 * 8 + c] -= 50.0;
            }
            let y2 = multi_head(&AttentionInputs::new(xs, xo).unwrap(), &a, &store, Some(&agent), &attend).unwrap();
            assert_eq!(y1.data(), y2.data(), "{variant:?}");
        }
    }
}

#[test]
fn agent_permutation_permutes_outputs() {
    let mut rng = SeededRng::new(61);
    for variant in ALL {
        let (store, a) = build(variant, 8, 2, true, &mut rng);
        let (n, t) = (3, 2);
        let mut presence = Tensor::ones(&[n, t]);
        presence.set2(2, 0, 0.0);
        let ids = [0, 1, 2];
        let x = random(&[n * t, 8], &mut rng);
        let run = |x: &Tensor, presence: &Tensor, ids: &[usize]| {
            let (agent, attend) = build_masks(presence, MaskMode::Encoder, ids).unwrap();
            let keep: Vec<usize> = (0..n * t).filter(|&k| presence.data()[k] != 0.0).collect();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let xv = g.index_select(xv, &keep).unwrap();
            let y = a
                .forward(&mut g, &store, xv, xv, Some(&agent.select(&keep, &keep)), &attend.select(&keep, &keep))
                .unwrap();
            (keep, g.value(y).clone())
        };
        let (keep, y) = run(&x, &presence, &ids);

        let perm = [2, 0, 1];
        let mut xp = Tensor::zeros(&[n * t, 8]);
        let mut pp = Tensor::zeros(&[n, t]);
        for (new, &old) in perm.iter().enumerate() {
            for s in 0..t {
                pp.set2(new, s, presence.at2(old, s));
                for c in 0..8 {
                    xp.set2(new * t + s, c, x.at2(old * t + s, c));
                }
            }
        }
        let idp: Vec<usize> = perm.iter().map(|&o| ids[o]).collect();
        let (keep_p, yp) = run(&xp, &pp, &idp);
        for (row_p, &flat_p) in keep_p.iter().enumerate() {
            let old_flat = perm[flat_p / t] * t + flat_p % t;
            let row = keep.iter().position(|&k| k == old_flat).unwrap();
            for c in 0..8 {
                assert!((yp.at2(row_p, c) - y.at2(row, c)).abs() < 1e-12, "{variant:?}");
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences_for_all_variants() {
    let mut rng = SeededRng::new(71);
    for variant in ALL {
        for seed in 0..3 {
            let (store, a) = build(variant, 4, 2, seed % 2 == 0, &mut rng);
            let xs = random(&[3, 4], &mut rng);
            let xo = random(&[4, 4], &mut rng);
            let r = random(&[3, 4], &mut rng);
            let (agent, attend) = random_masks(3, 4, &mut rng);
            let e = worst_grad_error(&store, &[xs, xo], |g, st, v| {
                let y = a.forward(g, st, v[0], v[1], Some(&agent), &attend)?;
                let rv = g.constant(r.clone());
                let p = g.mul(y, rv)?;
                Ok(g.sum(p))
            });
            assert!(e < 1e-4, "{variant:?}: {e}");
        }
    }
}

#[test]
fn conv_attention_matches_per_location_oracle() {
    let mut rng = SeededRng::new(81);
    let (m, c, h, w) = (3, 2, 3, 3);
    let mut store = ParamStore::new();
    let spec = AttentionSpec {
        variant: Variant::Dot,
        layout: TokenLayout::Maps { height: h, width: w },
        width: c,
        heads: 1,
        kernel: 3,
        output_projection: false,
    };
    let a = Attention::new(&mut store, "attn", spec, &mut rng).unwrap();
    let x = random(&[m, c, h, w], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let attend = AttendMask::all(m, m);
    let y = a.forward(&mut g, &store, xv, xv, None, &attend).unwrap();
    let y = g.value(y);

    let conv = |name: &str, tok: usize| {
        let wt = &store.by_name(&format!("attn.{name}.weight")).unwrap().value;
        let b = &store.by_name(&format!("attn.{name}.bias")).unwrap().value;
        let xt = Tensor::new(&[c, h, w], x.data()[tok * c * h * w..(tok + 1) * c * h * w].to_vec()).unwrap();
        conv_naive(&xt, wt, b)
    };
    let q: Vec<Tensor> = (0..m).map(|i| conv("q", i)).collect();
    let k: Vec<Tensor> = (0..m).map(|i| conv("k_r", i)).collect();
    let v: Vec<Tensor> = (0..m).map(|i| conv("v_o", i)).collect();
    let at = |t: &Tensor, ch: usize, p: usize| t.data()[ch * h * w + p];
    for p in 0..h * w {
        for i in 0..m {
            let s: Vec<f64> = (0..m)
                .map(|j| (0..c).map(|ch| at(&q[i], ch, p) * at(&k[j], ch, p)).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|z| (z - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for ch in 0..c {
                let want: f64 = (0..m).map(|j| e[j] / tot * at(&v[j], ch, p)).sum();
                let got = y.data()[(i * c + ch) * h * w + p];
                assert!((got - want).abs() < 1e-10);
            }
        }
    }
}
