//! Finite-difference checks of every hand-written backward path, at toy
//! dimensions. Used by the `gradcheck` command.

use crate::attention::{AgentMask, AttendMask, Attention, AttentionSpec, Variant};
use crate::encdec::{DecodeMode, Dropout, EncDecConfig, Forecaster};
use crate::error::Result;
use crate::geometry::DepthMap;
use crate::linalg::gradcheck::{finite_diff_grad, random_direction, relative_error, scalar_relative_error, DEFAULT_STEP};
use crate::linalg::{random_tensor, Graph, ParamStore, SeededRng, Tensor, Var};
use crate::losses::{tape, IouSign, LossWeights};
use crate::refine::{Instance, RefineConfig, RefineHead, RefineInputs};

/// Tolerance for single operations.
pub const PER_OP_TOL: f64 = 1e-4;
/// Tolerance for composite paths.
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

/// Worst norm-wise relative error between the analytic gradient of `f`
/// and central differences, over every input and every stored parameter.
pub fn worst_grad_error(store: &ParamStore, inputs: &[Tensor], f: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>) -> Result<f64> {
    let eval = |st: &ParamStore, xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        match f(&mut g, st, &vars) {
            Ok(v) => g.value(v).item(),
            Err(_) => f64::NAN,
        }
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let grads = g.backward(out)?;
    let mut st = store.clone();
    st.zero_grad();
    st.accumulate(&g, &grads);

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x);
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                eval(store, &xs)
            },
            x,
            DEFAULT_STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    for (k, p) in st.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut s2 = store.clone();
                s2.iter_mut().nth(k).expect("same store").value = probe.clone();
                eval(&s2, inputs)
            },
            &p.value,
            DEFAULT_STEP,
        );
        worst = worst.max(relative_error(&p.grad, &numeric));
    }
    Ok(if worst.is_nan() { f64::INFINITY } else { worst })
}

fn check(name: impl Into<String>, error: Result<f64>, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        error: error.unwrap_or(f64::INFINITY),
        tolerance,
    }
}

/// Cross-attention from 3 to 4 tokens of width 4 with two heads.
pub fn attention_checks(seed: u64) -> Vec<Check> {
    let mut rng = SeededRng::new(seed);
    [Variant::Difference, Variant::AgentAware, Variant::AgentAwareDifference]
        .into_iter()
        .map(|variant| {
            let mut store = ParamStore::new();
            let attn = Attention::new(&mut store, "attn", AttentionSpec::rows(variant, 4, 2), &mut rng);
            let ids1: Vec<usize> = (0..3).map(|_| rng.below(2)).collect();
            let ids2: Vec<usize> = (0..4).map(|_| rng.below(2)).collect();
            let agent = AgentMask::from_ids(&ids1, &ids2);
            let attend = AttendMask::all(3, 4);
            let xs = vec![random_tensor(&[3, 4], &mut rng, 1.0), random_tensor(&[4, 4], &mut rng, 1.0)];
            let err = attn.and_then(|a| {
                worst_grad_error(&store, &xs, |g, st, v| {
                    let y = a.forward(g, st, v[0], v[1], Some(&agent), &attend)?;
                    let sq = g.square(y);
                    Ok(g.sum(sq))
                })
            });
            check(format!("attention/{}", variant.name()), err, PER_OP_TOL)
        })
        .collect()
}

fn boxes(k: usize, rng: &mut SeededRng) -> Tensor {
    let mut d = Vec::with_capacity(k * 5);
    for _ in 0..k {
        let (x0, y0) = (rng.uniform(-1.0, 0.0), rng.uniform(-1.0, 0.0));
        d.extend([x0, y0, x0 + rng.uniform(0.3, 1.0), y0 + rng.uniform(0.3, 1.0), rng.uniform(0.1, 0.9)]);
    }
    Tensor::new(&[k, 5], d).expect("rows")
}

pub fn loss_checks(seed: u64) -> Vec<Check> {
    let mut rng = SeededRng::new(seed);
    let w = LossWeights::default();
    let empty = ParamStore::new();
    let mut out = Vec::new();

    let pred = boxes(4, &mut rng);
    let target = boxes(4, &mut rng);
    let mask = [1.0, 1.0, 0.0, 1.0];
    for sign in [IouSign::AsWritten, IouSign::Negated, IouSign::OneMinus] {
        let err = worst_grad_error(&empty, std::slice::from_ref(&pred), |g, _, v| tape::loc_loss(g, v[0], &target, &mask, &w, sign));
        out.push(check(format!("loss/loc/{}", sign.name()), err, PER_OP_TOL));
    }

    let logits = random_tensor(&[6], &mut rng, 2.0);
    let p: Vec<f64> = (0..6).map(|i| f64::from(u8::from(i % 3 != 0))).collect();
    let pt = Tensor::vector(&p);
    let err = worst_grad_error(&empty, &[logits], |g, _, v| tape::presence_loss(g, v[0], &pt, &w));
    out.push(check("loss/presence", err, PER_OP_TOL));

    let r = random_tensor(&[3, 2, 2, 2], &mut rng, 1.0);
    let rt = random_tensor(&[3, 2, 2, 2], &mut rng, 1.0);
    let err = worst_grad_error(&empty, &[r], |g, _, v| tape::appearance_loss(g, v[0], &rt, &[1.0, 0.0, 1.0], &w));
    out.push(check("loss/appearance", err, PER_OP_TOL));

    let v = random_tensor(&[5, 4], &mut rng, 1.5);
    let vt = random_tensor(&[5, 4], &mut rng, 1.5);
    let err = worst_grad_error(&empty, &[v], |g, _, x| tape::velocity_loss(g, x[0], &vt, &[1.0, 1.0, 0.0, 1.0, 1.0], &w));
    out.push(check("loss/velocity", err, PER_OP_TOL));

    let z = random_tensor(&[6, 3], &mut rng, 1.0);
    let labels = [0, 2, 1, 1, 0, 2];
    let bg = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    let err = worst_grad_error(&empty, &[z.clone()], |g, _, x| {
        let p = g.softmax_last(x[0]);
        tape::bg_refine_loss(g, p, &labels, &bg)
    });
    out.push(check("loss/bg_refine", err, PER_OP_TOL));

    let bias = random_tensor(&[6], &mut rng, 0.5);
    let target = [0, 1, 2, 2, 0, 1];
    let err = worst_grad_error(&empty, &[z, bias], |g, _, x| {
        let s = g.softplus(x[0]);
        let (sel, b) = tape::refinement_loss(g, s, &target, x[1])?;
        g.add(sel, b)
    });
    out.push(check("loss/refinement", err, PER_OP_TOL));
    out
}

/// Small refinement problem: 6×6 frame, two background classes, two
/// instances of which one is kept.
pub fn refine_problem(seed: u64) -> Result<(ParamStore, RefineHead, RefineInputs, Vec<usize>)> {
    let mut rng = SeededRng::new(seed);
    let (h, w, c_bg) = (6, 6, 2);
    let mut store = ParamStore::new();
    let cfg = RefineConfig {
        hidden: 4,
        temperature: 2.0,
        ..RefineConfig::default()
    };
    let head = RefineHead::new(&mut store, c_bg, cfg, &mut rng)?;
    let depth = Tensor::new(&[h, w], (0..h * w).map(|_| rng.uniform(2.0, 8.0)).collect())?;
    let valid = Tensor::new(&[h, w], (0..h * w).map(|_| f64::from(u8::from(rng.bernoulli(0.6)))).collect())?;
    let mask = |r0: usize, c0: usize| {
        let d = (0..h * w).map(|p| if p / w >= r0 && p % w >= c0 { 0.9 } else { 0.1 }).collect();
        Tensor::new(&[h, w], d).expect("frame")
    };
    let inputs = RefineInputs {
        d_tilde: DepthMap { depth, valid },
        bg_logits: random_tensor(&[c_bg, h, w], &mut rng, 1.0),
        instances: vec![
            Instance {
                mask: mask(2, 1),
                depth: 4.0,
                presence_logit: 2.0,
                class: c_bg,
            },
            Instance {
                mask: mask(0, 3),
                depth: 3.0,
                presence_logit: -2.0,
                class: c_bg + 1,
            },
        ],
    };
    let target = (0..h * w).map(|p| if p / w >= 2 && p % w >= 1 { 1 } else { 0 }).collect();
    Ok((store, head, inputs, target))
}

/// Refinement loss through depth completion, value net and selection,
/// against every refinement parameter.
pub fn refine_end_to_end(seed: u64) -> Check {
    let err = refine_problem(seed).and_then(|(store, head, inputs, target)| {
        worst_grad_error(&store, &[], |g, st, _| {
            let (sel, bias) = head.loss(g, st, &inputs, &target)?;
            g.add(sel, bias)
        })
    });
    check("end_to_end/refinement", err, END_TO_END_TOL)
}

/// Teacher-forced foreground loss along one random parameter direction.
pub fn forecaster_end_to_end(seed: u64) -> Check {
    let run = || -> Result<f64> {
        let mut rng = SeededRng::new(seed);
        let cfg = EncDecConfig {
            d_e: 8,
            d_tau: 4,
            ffn: 8,
            depth: 1,
            app_channels: 2,
            app_height: 2,
            app_width: 2,
            app_embed: 2,
            app_ffn: 4,
            app_heads: 1,
            head_hidden: [8, 6],
            ..EncDecConfig::default()
        };
        let opts = super::SceneOptions {
            n_agents: 3,
            t_in: 3,
            horizon: 2,
            app: [2, 2, 2],
            occlusion: 0.2,
            ..super::SceneOptions::default()
        };
        let scene = super::generate_scene(seed, &opts)?;
        let inputs = scene.forecast_inputs(&super::Normalizer::for_scene(&scene), &super::OdometryStats::fit(std::slice::from_ref(&scene)));
        let mut store = ParamStore::new();
        let model = Forecaster::new(&mut store, cfg, &mut rng)?;
        // The zero location head copies boxes forward, which ties predicted
        // and target edges on IoU kinks; check at a generic point instead.
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.05 * rng.normal();
            }
        }
        let w = LossWeights::default();
        let loss = |st: &ParamStore| -> Result<(f64, Graph, Var)> {
            let mut g = Graph::new();
            let l = model.foreground_loss(&mut g, st, &inputs, &w, IouSign::OneMinus, DecodeMode::TeacherForced, &mut Dropout::off())?;
            Ok((g.value(l.total).item(), g, l.total))
        };
        let (_, g, total) = loss(&store)?;
        let grads = g.backward(total)?;
        let mut st = store.clone();
        st.zero_grad();
        st.accumulate(&g, &grads);
        let dirs: Vec<Tensor> = st.iter().map(|p| random_direction(&p.value, &mut rng)).collect();
        let analytic: f64 = st.iter().zip(&dirs).map(|(p, d)| p.grad.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
        let shifted = |h: f64| -> Result<f64> {
            let mut s = store.clone();
            for (p, d) in s.iter_mut().zip(&dirs) {
                for (v, dv) in p.value.data_mut().iter_mut().zip(d.data()) {
                    *v += h * dv;
                }
            }
            Ok(loss(&s)?.0)
        };
        let numeric = (shifted(DEFAULT_STEP)? - shifted(-DEFAULT_STEP)?) / (2.0 * DEFAULT_STEP);
        Ok(scalar_relative_error(analytic, numeric))
    };
    check("end_to_end/foreground", run(), END_TO_END_TOL)
}

/// Every check at one seed.
pub fn run_suite(seed: u64) -> Vec<Check> {
    let mut out = attention_checks(seed);
    out.extend(loss_checks(seed));
    out.push(refine_end_to_end(seed));
    out.push(forecaster_end_to_end(seed));
    out
}
