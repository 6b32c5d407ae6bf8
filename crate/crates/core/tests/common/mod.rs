//! Independent oracles shared by the integration tests. Nothing here calls
//! the vectorized code paths it is compared against.
#![allow(dead_code)]

use pforecast_core::linalg::gradcheck::{finite_diff_grad, relative_error, DEFAULT_STEP};
use pforecast_core::{Graph, ParamStore, Result, SeededRng, Tensor, Var};

pub fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    pforecast_core::linalg::random_tensor(shape, rng, 1.0)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.last_dim();
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn param(store: &ParamStore, name: &str) -> Tensor {
    store.by_name(name).unwrap_or_else(|| panic!("missing {name}")).value.clone()
}

/// `x·W + b` by explicit loops; `W` is `[in×out]`.
pub fn affine(x: &[Vec<f64>], store: &ParamStore, name: &str) -> Vec<Vec<f64>> {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fout)
                .map(|j| b.data()[j] + (0..fin).map(|k| row[k] * w.at2(k, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Same-padded cross-correlation of `[C×H×W]` by explicit loops.
pub fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for r in 0..h {
            for s in 0..wd {
                let mut acc = b.data()[o];
                for i in 0..c {
                    for a in 0..k {
                        for bb in 0..k {
                            let (rr, ss) = (r as isize + a as isize - p, s as isize + bb as isize - p);
                            if rr < 0 || ss < 0 || rr >= h as isize || ss >= wd as isize {
                                continue;
                            }
                            let wv = w.data()[((o * c + i) * k + a) * k + bb];
                            acc += wv * x.data()[(i * h + rr as usize) * wd + ss as usize];
                        }
                    }
                }
                out[(o * h + r) * wd + s] = acc;
            }
        }
    }
    Tensor::new(&[co, h, wd], out).unwrap()
}

/// Description of the projections an attention layer named `name` owns.
pub struct OracleLayer<'a> {
    pub name: &'a str,
    pub difference: bool,
    pub agent_aware: bool,
    pub heads: usize,
    pub output_projection: bool,
}

/// Attention by explicit loops over `(i, j)` for row tokens.
///
/// Projections are looked up by their parameter names in `store`.
pub fn attention_oracle(
    layer: &OracleLayer,
    store: &ParamStore,
    x_self: &Tensor,
    x_other: &Tensor,
    agent: Option<&Tensor>,
    attend: &Tensor,
) -> Tensor {
    let n = layer.name;
    let (xs, xo) = (rows(x_self), rows(x_other));
    let q = affine(&xs, store, &format!("{n}.q"));
    let k_r = affine(&xo, store, &format!("{n}.k_r"));
    let v_o = affine(&xo, store, &format!("{n}.v_o"));
    let k_b = layer.difference.then(|| affine(&xo, store, &format!("{n}.k_b")));
    let v_s = layer.difference.then(|| affine(&xs, store, &format!("{n}.v_s")));
    let q_c = layer.agent_aware.then(|| affine(&xs, store, &format!("{n}.q_ctx")));
    let k_rc = layer.agent_aware.then(|| affine(&xo, store, &format!("{n}.k_r_ctx")));
    let k_bc = (layer.agent_aware && layer.difference).then(|| affine(&xo, store, &format!("{n}.k_b_ctx")));

    let d = x_self.last_dim();
    let dh = d / layer.heads;
    let (m1, m2) = (xs.len(), xo.len());
    let mut y = vec![vec![0.0; d]; m1];
    for h in 0..layer.heads {
        let r = h * dh..(h + 1) * dh;
        let score = |qq: &Vec<Vec<f64>>, kr: &Vec<Vec<f64>>, kb: &Option<Vec<Vec<f64>>>, i: usize, j: usize| {
            let mut z = dot(&qq[i][r.clone()], &kr[j][r.clone()]);
            if let Some(kb) = kb {
                z -= dot(&kb[j][r.clone()], &kr[j][r.clone()]);
            }
            z
        };
        for i in 0..m1 {
            let mut s = vec![f64::NEG_INFINITY; m2];
            for j in 0..m2 {
                if attend.at2(i, j) == 0.0 {
                    continue;
                }
                let same = agent.map_or(true, |m| m.at2(i, j) != 0.0);
                let z = if layer.agent_aware && !same {
                    score(q_c.as_ref().unwrap(), k_rc.as_ref().unwrap(), &k_bc, i, j)
                } else {
                    score(&q, &k_r, &k_b, i, j)
                };
                s[j] = z / (dh as f64).sqrt();
            }
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for c in r.clone() {
                let mut acc = 0.0;
                for j in 0..m2 {
                    acc += e[j] / tot * v_o[j][c];
                }
                if let Some(vs) = &v_s {
                    acc -= vs[i][c];
                }
                y[i][c] = acc;
            }
        }
    }
    if layer.output_projection {
        y = affine(&y, store, &format!("{n}.out"));
    }
    Tensor::from_rows(&y).unwrap()
}

/// Worst norm-wise relative error between the analytic gradient of `f` and
/// central differences, over every input and every parameter in `store`.
///
/// `f` builds a scalar from the input leaves; parameters are bound through
/// `Graph::param` inside `f`.
pub fn worst_grad_error(
    store: &ParamStore,
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |st: &ParamStore, xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, st, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, store, &vars).unwrap();
    let grads = g.backward(out).unwrap();
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
                s2.iter_mut().nth(k).unwrap().value = probe.clone();
                eval(&s2, inputs)
            },
            &p.value,
            DEFAULT_STEP,
        );
        let e = relative_error(&p.grad, &numeric);
        worst = worst.max(e);
    }
    worst
}

/// Central-difference check along one random direction in the joint
/// parameter space; cheaper than per-element FD for large models.
pub fn directional_grad_error(store: &ParamStore, rng: &mut SeededRng, f: impl Fn(&ParamStore) -> (f64, ParamStore)) -> f64 {
    let (_, with_grads) = f(store);
    let dirs: Vec<Tensor> = store
        .iter()
        .map(|p| random(p.value.shape(), rng))
        .collect();
    let analytic: f64 = with_grads
        .iter()
        .zip(&dirs)
        .map(|(p, d)| p.grad.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let shifted = |h: f64| {
        let mut s = store.clone();
        for (p, d) in s.iter_mut().zip(&dirs) {
            for (v, dv) in p.value.data_mut().iter_mut().zip(d.data()) {
                *v += h * dv;
            }
        }
        f(&s).0
    };
    let h = DEFAULT_STEP;
    let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
