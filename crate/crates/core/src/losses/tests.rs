use super::*;
use crate::linalg::gradcheck::{finite_diff_grad, relative_error, DEFAULT_STEP};
use crate::linalg::{random_tensor, SeededRng};

const LN2: f64 = std::f64::consts::LN_2;

#[test]
fn smooth_l1_branches() {
    let z = Tensor::zeros(&[3]);
    assert_eq!(smooth_l1(&Tensor::full(&[3], 0.5), &z).unwrap(), 3.0 * 0.125);
    assert_eq!(smooth_l1(&Tensor::full(&[3], -2.0), &z).unwrap(), 3.0 * 1.5);
    assert_eq!(smooth_l1(&Tensor::vector(&[1.0]), &Tensor::vector(&[0.0])).unwrap(), 0.5);
    assert_eq!(smooth_l1(&Tensor::vector(&[1.0 - 1e-12]), &Tensor::vector(&[0.0])).unwrap(), 0.5 * (1.0 - 1e-12f64).powi(2));
    assert!(smooth_l1(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
}

#[test]
fn iou_examples() {
    let b = |v: [f64; 4]| Tensor::vector(&v);
    assert_eq!(box_iou(&b([0.0, 0.0, 2.0, 2.0]), &b([0.0, 0.0, 2.0, 2.0])).unwrap(), 1.0);
    assert_eq!(box_iou(&b([0.0, 0.0, 1.0, 1.0]), &b([2.0, 2.0, 3.0, 3.0])).unwrap(), 0.0);
    let third = box_iou(&b([0.0, 0.0, 2.0, 2.0]), &b([1.0, 0.0, 3.0, 2.0])).unwrap();
    assert!((third - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(box_iou(&b([1.0, 1.0, 1.0, 1.0]), &b([1.0, 1.0, 1.0, 1.0])).unwrap(), 0.0);
}

#[test]
fn loc_loss_examples() {
    let w = LossWeights::default();
    let t = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 1.0, 5.0], vec![0.2, 0.2, 0.4, 0.5, 9.0]]).unwrap();
    let all = Tensor::ones(&[2]);
    assert_eq!(loc_loss(&t, &t, &all, &w, IouSign::AsWritten).unwrap(), 100.0);
    assert_eq!(loc_loss(&t, &t, &all, &w, IouSign::OneMinus).unwrap(), 0.0);
    assert_eq!(loc_loss(&t, &t, &all, &w, IouSign::Negated).unwrap(), -100.0);
    assert_eq!(loc_loss(&t, &t, &Tensor::zeros(&[2]), &w, IouSign::AsWritten).unwrap(), 0.0);

    let target = Tensor::from_rows(&[vec![0.0, 0.0, 0.4, 0.4, 5.0]]).unwrap();
    let pred = Tensor::from_rows(&[vec![0.5, 0.5, 0.9, 0.9, 5.0]]).unwrap();
    let l = loc_loss(&pred, &target, &Tensor::ones(&[1]), &w, IouSign::AsWritten).unwrap();
    assert!((l - 0.5).abs() < 1e-15);
}

#[test]
fn presence_loss_examples() {
    let w = LossWeights::default();
    let one = presence_loss(&Tensor::vector(&[0.0]), &Tensor::vector(&[1.0]), &w).unwrap();
    assert!((one - 10.0 * LN2).abs() < 1e-14);
    let big = presence_loss(&Tensor::vector(&[50.0]), &Tensor::vector(&[1.0]), &w).unwrap();
    assert!(big < 1e-20);
    let two = presence_loss(&Tensor::zeros(&[1, 2]), &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &w).unwrap();
    assert!((two - 10.0 * LN2).abs() < 1e-14);
}

#[test]
fn appearance_loss_examples() {
    let w = LossWeights::default();
    let mut rng = SeededRng::new(3);
    let r = random_tensor(&[3, 2, 2, 2], &mut rng, 1.0);
    assert_eq!(appearance_loss(&r, &r, &Tensor::ones(&[3]), &w).unwrap(), 0.0);
    let shifted = r.map(|v| v + 0.3);
    let l = appearance_loss(&shifted, &r, &Tensor::ones(&[3]), &w).unwrap();
    assert!((l - 10.0 * 0.09).abs() < 1e-12);

    let other = random_tensor(&[3, 2, 2, 2], &mut rng, 1.0);
    let mask = [1.0, 0.0, 1.0];
    let mut acc = 0.0;
    for i in 0..3 {
        for j in 0..8 {
            let d = other.data()[i * 8 + j] - r.data()[i * 8 + j];
            acc += mask[i] * d * d;
        }
    }
    let want = 10.0 * acc / (2.0 * 8.0);
    let got = appearance_loss(&other, &r, &Tensor::vector(&mask), &w).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn velocity_loss_examples() {
    let w = LossWeights::default();
    // one agent, T = 3, T' = 4, constant velocity 0.1 per box coordinate
    let x: Vec<f64> = (0..4).flat_map(|t| [0.1 * t as f64, 0.0, 0.1 * t as f64 + 0.2, 0.2, 5.0]).collect();
    let x = Tensor::new(&[1, 4, 5], x).unwrap();
    let p = Tensor::ones(&[1, 4]);
    let exact = Tensor::new(&[1, 3, 4], [0.1, 0.0, 0.1, 0.0].repeat(3)).unwrap();
    assert!(velocity_loss(&exact, &x, &p, &w).unwrap() < 1e-30);
    let zero = Tensor::zeros(&[1, 3, 4]);
    let l = velocity_loss(&zero, &x, &p, &w).unwrap();
    let per_pair = 2.0 * 0.5 * 0.1f64.powi(2);
    assert!((l - per_pair).abs() < 1e-12, "{l}");

    // a gap at frame 2 removes pairs (1,2) and (2,3)
    let gap = Tensor::from_rows(&[vec![1.0, 1.0, 0.0, 1.0]]).unwrap();
    let mut v = zero.clone();
    for c in 0..4 {
        v.data_mut()[4 + c] = 7.0;
        v.data_mut()[8 + c] = -7.0;
    }
    let l2 = velocity_loss(&v, &x, &gap, &w).unwrap();
    assert!((l2 - per_pair).abs() < 1e-12);
}

#[test]
fn bg_refine_examples() {
    let onehot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
    assert_eq!(bg_refine_loss(&onehot, &[1, 0], &[1.0, 1.0]).unwrap(), 0.0);
    let uniform = Tensor::full(&[2, 4], 0.25);
    assert!((bg_refine_loss(&uniform, &[3, 2], &[1.0, 1.0]).unwrap() - 4f64.ln()).abs() < 1e-15);
    let two = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8], vec![0.9, 0.1]]).unwrap();
    let want = -(0.5f64.ln() + 0.8f64.ln()) / 2.0;
    let got = bg_refine_loss(&two, &[0, 1, 7], &[1.0, 1.0, 0.0]).unwrap();
    assert!((got - want).abs() < 1e-15);
    assert_eq!(bg_refine_loss(&two, &[0, 1, 0], &[0.0, 0.0, 0.0]).unwrap(), 0.0);
}

#[test]
fn refinement_examples() {
    let scores = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0], vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
    let bias = Tensor::zeros(&[2, 2]);
    let (sel, b) = refinement_loss(&scores, &[0, 1, 1, 0], &bias).unwrap();
    assert_eq!(b, 0.0);
    let want = -((2.0f64 / 3.0).ln() + 0.75f64.ln() + 0.5f64.ln() + 0.0) / 4.0;
    assert!((sel - want).abs() < 1e-15);
    let (_, b) = refinement_loss(&scores, &[0, 1, 1, 0], &Tensor::vector(&[1.0, -1.0, 2.0, 0.0])).unwrap();
    assert!((b - 6.0 / 4.0).abs() < 1e-15);
}

#[test]
fn breakdown_total_is_left_to_right_sum() {
    let b = LossBreakdown::foreground(0.1, 0.2, 0.3, 0.4);
    assert_eq!(b.total_fg, ((0.1 + 0.2) + 0.3) + 0.4);
}

#[test]
fn masked_rows_get_zero_gradient() {
    let mut rng = SeededRng::new(5);
    let pred = random_tensor(&[3, 5], &mut rng, 0.5);
    let target = random_tensor(&[3, 5], &mut rng, 0.5);
    let mask = [1.0, 0.0, 1.0];
    let mut g = Graph::new();
    let p = g.leaf(pred.clone());
    let l = tape::loc_loss(&mut g, p, &target, &mask, &LossWeights::default(), IouSign::OneMinus).unwrap();
    let grads = g.backward(l).unwrap();
    let gp = grads.get(p).unwrap();
    assert!(gp.row(1).iter().all(|&v| v == 0.0));
    let numeric = finite_diff_grad(
        |x| loc_loss(x, &target, &Tensor::vector(&mask), &LossWeights::default(), IouSign::OneMinus).unwrap(),
        &pred,
        DEFAULT_STEP,
    );
    assert!(relative_error(gp, &numeric) < 1e-4);
}
