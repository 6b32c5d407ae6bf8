//! Two-stage training: the forecaster first with teacher forcing, then the
//! refinement head with the forecaster frozen. Both stages use ADAM over the
//! mean gradient of all training scenes per step.

use std::io::Write;

use super::config::RunConfig;
use super::pipeline::Model;
use super::scene::{OdometryStats, SceneSequence};
use crate::encdec::{DecodeMode, Dropout, ForecastInputs, Forecaster};
use crate::error::{Error, Result};
use crate::linalg::{Adam, Graph, SeededRng, Tensor};
use crate::losses::{self, LossBreakdown};
use crate::refine::{RefineHead, RefineInputs};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["stage", "step", "lr"];
        header.extend(LossBreakdown::CSV_FIELDS);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.stage.to_string(), r.step.to_string(), r.lr.to_string()];
            rec.extend(r.loss.values().iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }
}

fn check_finite(step: usize, loss: &LossBreakdown) -> Result<()> {
    if loss.values().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

fn scene_inputs(model: &Model, scenes: &[SceneSequence]) -> Result<Vec<ForecastInputs>> {
    let norm = model.normalizer();
    scenes
        .iter()
        .map(|s| {
            model.check_scene(s)?;
            Ok(s.forecast_inputs(&norm, &model.odometry))
        })
        .collect()
}

/// Training-time copy of `inp`: every box moves by one common offset
/// `shift = (du, dv, dd)`, and track `i` additionally drifts by
/// `drift[i] = (ku, kd)` per frame, anchored at the last input frame.
/// Drift changes velocities but keeps accelerations, so the motion left to
/// learn is the same.
fn augmented(inp: &ForecastInputs, shift: [f64; 3], drift: &[[f64; 2]]) -> ForecastInputs {
    let mut out = inp.clone();
    let [du, dv, dd] = shift;
    let anchor = inp.t_in as f64 - 1.0;
    for (a, &[ku, kd]) in out.agents.iter_mut().zip(drift) {
        for (t, row) in a.track.x.data_mut().chunks_mut(5).enumerate() {
            let s = t as f64 - anchor;
            let (u, d) = (du + s * ku, dd + s * kd);
            for (v, o) in row.iter_mut().zip([u, dv, u, dv, d]) {
                *v += o;
            }
        }
    }
    out
}

/// Stage 1: teacher-forced foreground training of every `fg.` parameter.
pub fn train_foreground(model: &mut Model, scenes: &[SceneSequence], log: &mut TrainLog) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    let cfg = model.config.clone();
    let inputs = scene_inputs(model, scenes)?;
    let mut adam = Adam::new(&model.store);
    let mut drop_rng = SeededRng::new(cfg.seed).fork(0xd20b);
    let mut shift_rng = SeededRng::new(cfg.seed).fork(0x5417);
    let scale = 1.0 / scenes.len() as f64;
    for step in 0..cfg.steps {
        model.store.zero_grad();
        let mut sum = [0.0; 4];
        for base in &inputs {
            let (a, k) = (cfg.augment_shift, cfg.augment_drift);
            let aug;
            let inp = if a > 0.0 || k > 0.0 {
                let r = &mut shift_rng;
                let shift = [r.uniform(-a, a), 0.5 * r.uniform(-a, a), 0.25 * r.uniform(-a, a)];
                let drift: Vec<[f64; 2]> = base.agents.iter().map(|_| [r.uniform(-k, k), 0.25 * r.uniform(-k, k)]).collect();
                aug = augmented(base, shift, &drift);
                &aug
            } else {
                base
            };
            let mut g = Graph::new();
            let mut drop = if cfg.dropout > 0.0 { Dropout::new(cfg.dropout, &mut drop_rng) } else { Dropout::off() };
            let l = model.forecaster.foreground_loss(&mut g, &model.store, inp, &cfg.weights, cfg.iou_sign, DecodeMode::TeacherForced, &mut drop)?;
            for (s, v) in sum.iter_mut().zip([l.loc, l.presence, l.appearance, l.velocity]) {
                *s += g.value(v).item() * scale;
            }
            let grads = g.backward(l.total)?;
            model.store.accumulate(&g, &grads);
        }
        let loss = LossBreakdown::foreground(sum[0], sum[1], sum[2], sum[3]);
        check_finite(step, &loss)?;
        let lr = RunConfig::rate(cfg.lr, cfg.drop_step, cfg.drop_factor, step);
        adam.step_where(&mut model.store, lr, scale, Forecaster::owns);
        log.rows.push(LogRow { stage: 1, step, lr, loss });
    }
    Ok(())
}

/// Target selection with agents the head cannot select mapped to background.
fn refine_target(scene: &SceneSequence, inputs: &RefineInputs, threshold: f64) -> Vec<usize> {
    let kept = inputs.kept(threshold);
    scene.selection.iter().map(|&s| if s > 0 && kept[s - 1] { s } else { 0 }).collect()
}

/// Background cross-entropy of the given logits; a diagnostic, since the
/// background logits are inputs here.
fn bg_refine_value(scene: &SceneSequence, inputs: &RefineInputs) -> Result<f64> {
    let probs = inputs.bg_probabilities();
    let (c, hw) = (scene.c_bg, scene.height * scene.width);
    let flat = probs.reshape(&[c, hw])?.transpose();
    let sem = &scene.semantics[scene.total_frames() - 1];
    let labels: Vec<usize> = sem.labels.iter().map(|&l| if l < c { l } else { 0 }).collect();
    let mask: Vec<f64> = sem.background.iter().map(|&b| f64::from(u8::from(b))).collect();
    losses::bg_refine_loss(&flat, &labels, &mask)
}

/// Stage 2: refinement training; every foreground parameter stays fixed.
pub fn train_refinement(model: &mut Model, scenes: &[SceneSequence], log: &mut TrainLog) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    let cfg = model.config.clone();
    let mut prepared = Vec::with_capacity(scenes.len());
    for s in scenes {
        let f = model.forecast(s)?;
        let target = refine_target(s, &f.refine_inputs, cfg.presence_threshold);
        let bg = bg_refine_value(s, &f.refine_inputs)?;
        prepared.push((f.refine_inputs, target, bg));
    }
    let mut adam = Adam::new(&model.store);
    let scale = 1.0 / scenes.len() as f64;
    let owns = |n: &str| n.starts_with(&format!("{}.", RefineHead::PREFIX));
    for step in 0..cfg.refine_steps {
        model.store.zero_grad();
        let mut loss = LossBreakdown::default();
        for (inputs, target, bg) in &prepared {
            let mut g = Graph::new();
            let (sel, bias) = model.refine.loss(&mut g, &model.store, inputs, target)?;
            loss.refine_select += g.value(sel).item() * scale;
            loss.refine_bias += g.value(bias).item() * scale;
            loss.bg_refine += bg * scale;
            let total = g.add(sel, bias)?;
            let grads = g.backward(total)?;
            model.store.accumulate(&g, &grads);
        }
        check_finite(step, &loss)?;
        let lr = RunConfig::rate(cfg.refine_lr, cfg.refine_drop_step, cfg.drop_factor, step);
        adam.step_where(&mut model.store, lr, scale, owns);
        log.rows.push(LogRow { stage: 2, step, lr, loss });
    }
    Ok(())
}

/// Fits odometry statistics, then runs both stages.
pub fn train(config: &RunConfig, scenes: &[SceneSequence]) -> Result<(Model, TrainLog)> {
    let mut model = Model::new(config)?;
    model.odometry = OdometryStats::fit(scenes);
    let mut log = TrainLog::default();
    train_foreground(&mut model, scenes, &mut log)?;
    train_refinement(&mut model, scenes, &mut log)?;
    Ok((model, log))
}

/// Mean free-running location loss over the forecast agents of `scenes`,
/// in normalized coordinates.
pub fn validation_loc_loss(model: &Model, scenes: &[SceneSequence]) -> Result<f64> {
    let norm = model.normalizer();
    let cfg = &model.config;
    let mut total = 0.0;
    for s in scenes {
        let inp = s.forecast_inputs(&norm, &model.odometry);
        let out = model.forecaster.forecast(&model.store, &inp)?;
        let preds: Vec<Tensor> = out.agents.iter().map(|a| a.x_hat.clone()).collect();
        total += scene_loc_loss(&inp, &out.agents.iter().map(|a| a.agent).collect::<Vec<_>>(), &preds, cfg)?;
    }
    Ok(total / scenes.len().max(1) as f64)
}

/// Same loss for the copy-last baseline: every future box equals the box of
/// the last input frame.
pub fn copy_last_loc_loss(model: &Model, scenes: &[SceneSequence]) -> Result<f64> {
    extrapolation_loc_loss(model, scenes, false)
}

/// Same loss for extrapolation from the last input frame, either copying
/// it or continuing its velocity when the frame before is also present.
pub fn extrapolation_loc_loss(model: &Model, scenes: &[SceneSequence], with_velocity: bool) -> Result<f64> {
    let norm = model.normalizer();
    let mut total = 0.0;
    for s in scenes {
        let inp = s.forecast_inputs(&norm, &model.odometry);
        let (agents, _) = Forecaster::forecast_agents(&inp);
        let mut preds = Vec::with_capacity(agents.len());
        for &a in &agents {
            let tr = &inp.agents[a].track;
            let last = tr.x.row(inp.t_in - 1);
            let v: Vec<f64> = if with_velocity && inp.t_in >= 2 && tr.present(inp.t_in - 2) {
                last.iter().zip(tr.x.row(inp.t_in - 2)).map(|(p, q)| p - q).collect()
            } else {
                vec![0.0; last.len()]
            };
            let data = (1..=inp.horizon).flat_map(|j| last.iter().zip(&v).map(move |(x, d)| x + j as f64 * d)).collect();
            preds.push(Tensor::new(&[inp.horizon, last.len()], data)?);
        }
        total += scene_loc_loss(&inp, &agents, &preds, &model.config)?;
    }
    Ok(total / scenes.len().max(1) as f64)
}

fn scene_loc_loss(inp: &ForecastInputs, agents: &[usize], preds: &[Tensor], cfg: &RunConfig) -> Result<f64> {
    let f = inp.horizon;
    let (mut p, mut t, mut m) = (Vec::new(), Vec::new(), Vec::new());
    for (&a, pred) in agents.iter().zip(preds) {
        let tr = &inp.agents[a].track;
        p.extend_from_slice(pred.data());
        for j in 0..f {
            t.extend_from_slice(tr.x.row(inp.t_in + j));
            m.push(tr.presence.data()[inp.t_in + j]);
        }
    }
    let k = m.len();
    losses::loc_loss(&Tensor::new(&[k, 5], p)?, &Tensor::new(&[k, 5], t)?, &Tensor::new(&[k], m)?, &cfg.weights, cfg.iou_sign)
}
