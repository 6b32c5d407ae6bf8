use super::*;
use crate::linalg::random_tensor;

fn inputs(h: usize, w: usize, c_bg: usize, q: f64, rng: &mut SeededRng) -> RefineInputs {
    let depth = Tensor::new(&[h, w], (0..h * w).map(|_| 2.0 + 8.0 * rng.uniform(0.0, 1.0)).collect()).unwrap();
    RefineInputs {
        d_tilde: DepthMap {
            depth,
            valid: Tensor::full(&[h, w], q),
        },
        bg_logits: random_tensor(&[c_bg, h, w], rng, 1.0),
        instances: Vec::new(),
    }
}

fn instance(mask: Tensor, depth: f64, class: usize) -> Instance {
    Instance {
        mask,
        depth,
        presence_logit: 3.0,
        class,
    }
}

fn head(c_bg: usize, seed: u64) -> (ParamStore, RefineHead) {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(seed);
    let h = RefineHead::new(&mut store, c_bg, RefineConfig::default(), &mut rng).unwrap();
    (store, h)
}

#[test]
fn full_mask_passes_depth_through_bitwise() {
    let (mut store, head) = head(3, 1);
    head.depth.zero_bias_head(&mut store);
    let inp = inputs(6, 7, 3, 1.0, &mut SeededRng::new(2));
    let mut g = Graph::new();
    let out = head.depth.forward(&mut g, &store, &inp).unwrap();
    assert_eq!(g.value(out.depth), &inp.d_tilde.depth);
}

#[test]
fn empty_mask_gives_fill() {
    let (mut store, head) = head(2, 3);
    head.depth.zero_bias_head(&mut store);
    let inp = inputs(5, 5, 2, 0.0, &mut SeededRng::new(4));
    let mut g = Graph::new();
    let out = head.depth.forward(&mut g, &store, &inp).unwrap();
    assert_eq!(g.value(out.depth), g.value(out.fill));
}

#[test]
fn constant_survives_down_and_up_sampling() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 7, 5], 3.25));
    let d = g.resize_bilinear(x, 4, 3).unwrap();
    let u = g.resize_bilinear(d, 7, 5).unwrap();
    assert!(g.value(u).data().iter().all(|&v| v == 3.25));
}

#[test]
fn mask_out_examples() {
    let m = mask_out(&[1.0, 2.0, 4.0, 5.0], &Tensor::zeros(&[3, 3]), 6, 6).unwrap();
    for r in 0..6 {
        for c in 0..6 {
            let inside = (2..5).contains(&r) && (1..4).contains(&c);
            assert_eq!(m.at2(r, c), if inside { 0.5 } else { 0.0 });
        }
    }
    let logits = random_tensor(&[4, 5], &mut SeededRng::new(9), 2.0);
    let full = mask_out(&[0.0, 0.0, 5.0, 4.0], &logits, 4, 5).unwrap();
    assert_eq!(full, logits.map(sigmoid));
    assert_eq!(mask_out(&[2.0, 2.0, 2.0, 4.0], &logits, 4, 5).unwrap().sum(), 0.0);
}

#[test]
fn mask_out_hand_bilinear() {
    let logits = Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 2.0]]).unwrap();
    let p = logits.map(sigmoid);
    let m = mask_out(&[0.0, 0.0, 4.0, 4.0], &logits, 4, 4).unwrap();
    let f = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    for r in 0..4 {
        for c in 0..4 {
            let (fy, fx) = (f[r], f[c]);
            let want = p.at2(0, 0) * (1.0 - fy) * (1.0 - fx)
                + p.at2(0, 1) * (1.0 - fy) * fx
                + p.at2(1, 0) * fy * (1.0 - fx)
                + p.at2(1, 1) * fy * fx;
            assert!((m.at2(r, c) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn aggregate_depth_rules() {
    let mut inp = inputs(2, 2, 1, 1.0, &mut SeededRng::new(5));
    inp.instances.push(instance(Tensor::full(&[2, 2], 0.3), 4.0, 1));
    inp.instances.push(instance(Tensor::vector(&[0.7, 0.2, 0.5, 0.49]).reshape(&[2, 2]).unwrap(), 6.0, 1));
    let mut g = Graph::new();
    let d = g.constant(inp.d_tilde.depth.clone());
    let agg = build_aggregate_depth(&mut g, d, &inp, &[true, true], 1e4).unwrap();
    let a = g.value(agg);
    assert_eq!(a.shape(), [2, 2, 3]);
    for p in 0..4 {
        assert_eq!(a.data()[p * 3], inp.d_tilde.depth.data()[p]);
        assert_eq!(a.data()[p * 3 + 1], 1e4);
    }
    let ch2: Vec<f64> = (0..4).map(|p| a.data()[p * 3 + 2]).collect();
    assert_eq!(ch2, [6.0, 1e4, 6.0, 1e4]);

    inp.instances.clear();
    let agg = build_aggregate_depth(&mut g, d, &inp, &[], 1e4).unwrap();
    assert_eq!(g.value(agg).data(), inp.d_tilde.depth.data());
}

#[test]
fn selection_hand_oracle_and_dominance() {
    let mut rng = SeededRng::new(11);
    let d = random_tensor(&[1, 1, 3], &mut rng, 1.0);
    let v = random_tensor(&[1, 1, 3], &mut rng, 1.0).map(f64::abs);
    let mut g = Graph::new();
    let (dv, vv) = (g.constant(d.clone()), g.constant(v.clone()));
    let p = object_select(&mut g, dv, vv, 1.0).unwrap();
    let z: f64 = d.data().iter().map(|x| (-x).exp()).sum();
    for i in 0..3 {
        let want = (-d.data()[i]).exp() / z * v.data()[i];
        assert!((g.value(p).data()[i] - want).abs() < 1e-15);
    }

    for trial in 0..20 {
        let n = 1 + trial % 4;
        let winner = trial % (n + 1);
        let mut data = Vec::new();
        for _ in 0..6 {
            for c in 0..=n {
                data.push(if c == winner { 5.0 } else { 25.0 + 10.0 * rng.uniform(0.0, 1.0) });
            }
        }
        let d = g.constant(Tensor::new(&[2, 3, n + 1], data).unwrap());
        let v = g.constant(Tensor::full(&[2, 3, n + 1], 0.7));
        let p = object_select(&mut g, d, v, 1.0).unwrap();
        let sel = SelectionMap::from_scores(g.value(p).clone());
        assert!(sel.argmax.iter().all(|&a| a == winner));
    }

    let d = g.constant(Tensor::full(&[2, 2, 1], 3.0));
    let v = g.constant(Tensor::full(&[2, 2, 1], 0.5));
    let p = object_select(&mut g, d, v, 1.0).unwrap();
    assert_eq!(SelectionMap::from_scores(g.value(p).clone()).argmax, vec![0; 4]);
}

#[test]
fn argmax_ties_prefer_background() {
    let sel = SelectionMap::from_scores(Tensor::new(&[1, 2, 3], vec![0.2, 0.2, 0.1, 0.1, 0.3, 0.3]).unwrap());
    assert_eq!(sel.argmax, vec![0, 1]);
}

#[test]
fn merge_examples() {
    let mut rng = SeededRng::new(6);
    let logits = random_tensor(&[3, 4, 4], &mut rng, 1.0);
    let bg_argmax: Vec<usize> = (0..16)
        .map(|p| (0..3).max_by(|&a, &b| logits.data()[a * 16 + p].total_cmp(&logits.data()[b * 16 + p]).then(b.cmp(&a))).unwrap())
        .collect();

    let none = SelectionMap::from_scores(Tensor::ones(&[4, 4, 1]));
    let m = merge_panoptic(&none, &logits, &[], &[], 3).unwrap();
    assert_eq!(m.class_id, bg_argmax);
    assert!(m.instance_id.iter().all(|&i| i == 0));

    let full = instance(Tensor::ones(&[4, 4]), 1.0, 4);
    let one = SelectionMap::from_scores(Tensor::new(&[4, 4, 2], [0.0, 1.0].repeat(16)).unwrap());
    let m = merge_panoptic(&one, &logits, std::slice::from_ref(&full), &[true], 3).unwrap();
    assert!(m.instance_id.iter().all(|&i| i == 4) && m.class_id.iter().all(|&c| c == 4));

    let checker: Vec<f64> = (0..16).flat_map(|p| if (p / 4 + p % 4) % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let sel = SelectionMap::from_scores(Tensor::new(&[4, 4, 2], checker).unwrap());
    let m = merge_panoptic(&sel, &logits, std::slice::from_ref(&full), &[true], 3).unwrap();
    for p in 0..16 {
        let want = if sel.argmax[p] == 1 { 4 } else { 0 };
        assert_eq!(m.instance_id[p], want);
    }
}

#[test]
fn predicted_ids_are_background_or_kept() {
    let (store, head) = head(2, 8);
    let mut rng = SeededRng::new(12);
    for trial in 0..10 {
        let mut inp = inputs(6, 6, 2, 0.5, &mut rng);
        for i in 0..4 {
            let mask = random_tensor(&[6, 6], &mut rng, 1.0).map(sigmoid);
            let mut inst = instance(mask, 1.0 + i as f64, 2 + i % 2);
            inst.presence_logit = if (trial + i) % 3 == 0 { -1.0 } else { 1.0 };
            inp.instances.push(inst);
        }
        let out = head.predict(&store, &inp).unwrap();
        let allowed: Vec<usize> = out.kept.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| 2 + i + 1).collect();
        for &id in &out.panoptic.instance_id {
            assert!(id == 0 || allowed.contains(&id), "id {id} not in {allowed:?}");
        }
    }
}

#[test]
fn constant_value_selects_min_depth() {
    let mut rng = SeededRng::new(21);
    let mut g = Graph::new();
    for _ in 0..20 {
        let d = random_tensor(&[3, 3, 4], &mut rng, 5.0);
        let dv = g.constant(d.clone());
        let v = g.constant(Tensor::full(&[3, 3, 4], 1.3));
        let p = object_select(&mut g, dv, v, 1.0).unwrap();
        let sel = SelectionMap::from_scores(g.value(p).clone());
        for (px, &a) in d.data().chunks(4).zip(&sel.argmax) {
            let min = (0..4).min_by(|&i, &j| px[i].total_cmp(&px[j])).unwrap();
            assert_eq!(a, min);
        }
    }
}

#[test]
fn bad_inputs_rejected() {
    let (store, head) = head(2, 1);
    let mut inp = inputs(3, 3, 2, 1.0, &mut SeededRng::new(1));
    inp.instances.push(instance(Tensor::full(&[3, 3], 1.5), 1.0, 2));
    assert!(head.predict(&store, &inp).is_err());
    let inp = inputs(3, 3, 3, 1.0, &mut SeededRng::new(1));
    assert!(head.predict(&store, &inp).is_err());
}
