use super::blocks::{AttendTo, BlockSpec, Dropout, Stack, Stream};
use super::{one_hot, temporal_encoding, EncDecConfig, ForecastInputs, LOC_DIM, ODO_DIM};
use crate::attention::{build_masks, AgentMask, AttendMask, MaskMode, Variant};
use crate::error::{Error, Result};
use crate::linalg::{Conv, Graph, Linear, Mlp, ParamStore, SeededRng, Tensor, Var};
use crate::losses::{tape, velocity_targets, IouSign, LossWeights};

/// Encoder outputs for every present `(agent, frame)` pair, agent-major.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `(agent index, frame row)` of each token.
    pub tokens: Vec<(usize, usize)>,
    /// `[P×d_e]`.
    pub loc: Var,
    /// `[P×C_e×h×w]`.
    pub app: Var,
    /// Encoder velocity estimates `[P×4]`.
    pub velocity: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Ground-truth previous rows feed every step; one causal pass.
    TeacherForced,
    /// Each step consumes the model's own previous prediction.
    FreeRunning,
}

/// Decoder outputs for the forecast agents, agent-major over future steps.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// Indices of agents present in the last input frame.
    pub agents: Vec<usize>,
    /// Agents absent in the last input frame, not forecast.
    pub skipped: Vec<usize>,
    /// `[K·F×5]`.
    pub x_hat: Var,
    /// `[K·F]`.
    pub p_logit: Var,
    /// `[K·F×C×h×w]`.
    pub r_hat: Var,
}

/// Forecast of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentForecast {
    pub agent: usize,
    pub id: usize,
    /// `[F×5]`.
    pub x_hat: Tensor,
    /// `[F]`.
    pub presence_logit: Tensor,
    /// `[F×C×h×w]`.
    pub appearance: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    pub agents: Vec<AgentForecast>,
    pub skipped: Vec<usize>,
    pub tokens: Vec<(usize, usize)>,
    /// `[P×4]`, one row per encoder token.
    pub encoder_velocity: Tensor,
}

/// The four foreground loss terms and their left-to-right sum.
#[derive(Debug, Clone)]
pub struct ForegroundLoss {
    pub total: Var,
    pub loc: Var,
    pub presence: Var,
    pub appearance: Var,
    pub velocity: Var,
    pub decoded: Decoded,
}

/// Foreground forecasting model. All parameters live under `fg.`.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub config: EncDecConfig,
    f_b: Linear,
    f_f: [Conv; 2],
    f_e1: Linear,
    f_e2: Linear,
    f_ae1: Conv,
    f_ae2: Conv,
    f_d1: Linear,
    f_d2: Linear,
    f_ad1: Conv,
    f_ad2: Conv,
    pub enc_loc: Stack,
    pub enc_app: Stack,
    pub dec_loc: Stack,
    pub dec_app: Stack,
    pub loc_out: Mlp,
    pub p_out: Mlp,
    pub vel: Mlp,
    pub app_out: Conv,
}

fn stack_agent_major(g: &mut Graph, steps: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(steps.len());
    for &s in steps {
        let mut shape = vec![1];
        shape.extend_from_slice(g.shape(s));
        parts.push(g.reshape(s, &shape)?);
    }
    let st = g.concat(&parts, 0)?;
    let rank = g.shape(st).len();
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(0, 1);
    let p = g.permute(st, &perm)?;
    let mut shape = g.shape(p).to_vec();
    let merged = shape[0] * shape[1];
    shape.splice(0..2, [merged]);
    g.reshape(p, &shape)
}

fn take_step(g: &mut Graph, seq: Var, k: usize, steps: usize, j: usize) -> Result<Var> {
    let rest = g.shape(seq)[1..].to_vec();
    let mut shape = vec![k, steps];
    shape.extend_from_slice(&rest);
    let r = g.reshape(seq, &shape)?;
    let s = g.slice(r, 1, j, 1)?;
    let mut out = vec![k];
    out.extend_from_slice(&rest);
    g.reshape(s, &out)
}

impl Forecaster {
    pub const PREFIX: &'static str = "fg";

    pub fn new(store: &mut ParamStore, config: EncDecConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let p = |s: &str| format!("{}.{s}", Self::PREFIX);
        let rows = Stream::Rows { width: c.d_e };
        let maps = Stream::Maps {
            channels: c.app_embed,
            height: c.app_height,
            width: c.app_width,
        };
        let spec = |stream, variant, heads, ffn, cross| BlockSpec {
            stream,
            variant,
            heads,
            ffn,
            cross,
        };
        let [h1, h2] = c.head_hidden;
        let model = Self {
            f_b: Linear::new(store, &p("f_b"), LOC_DIM + c.n_things, c.d_e, rng)?,
            f_f: [
                Conv::new(store, &p("f_f.0"), c.app_channels, c.d_e, 3, rng)?,
                Conv::new(store, &p("f_f.1"), c.d_e, c.d_e, 3, rng)?,
            ],
            f_e1: Linear::new(store, &p("f_e1"), 2 * c.d_e + ODO_DIM, c.d_e, rng)?,
            f_e2: Linear::new(store, &p("f_e2"), c.d_e + c.d_tau, c.d_e, rng)?,
            f_ae1: Conv::new(store, &p("f_ae1"), c.app_channels, c.app_embed, 3, rng)?,
            f_ae2: Conv::new(store, &p("f_ae2"), c.app_embed + c.d_tau, c.app_embed, 1, rng)?,
            f_d1: Linear::new(store, &p("f_d1"), LOC_DIM + c.n_things + ODO_DIM, c.d_e, rng)?,
            f_d2: Linear::new(store, &p("f_d2"), c.d_e + c.d_tau, c.d_e, rng)?,
            f_ad1: Conv::new(store, &p("f_ad1"), c.app_channels, c.app_embed, 3, rng)?,
            f_ad2: Conv::new(store, &p("f_ad2"), c.app_embed + c.d_tau, c.app_embed, 1, rng)?,
            enc_loc: Stack::new(store, &p("enc.loc"), c.depth, spec(rows, c.loc_attention, c.heads, c.ffn, false), rng)?,
            enc_app: Stack::new(store, &p("enc.app"), c.depth, spec(maps, Variant::Dot, c.app_heads, c.app_ffn, false), rng)?,
            dec_loc: Stack::new(store, &p("dec.loc"), c.depth, spec(rows, c.loc_attention, c.heads, c.ffn, true), rng)?,
            dec_app: Stack::new(store, &p("dec.app"), c.depth, spec(maps, Variant::AgentAware, c.app_heads, c.app_ffn, true), rng)?,
            loc_out: Mlp::new(store, &p("loc_out"), &[c.d_e, h1, h2, LOC_DIM], rng)?,
            p_out: Mlp::new(store, &p("p_out"), &[c.d_e, h1, h2, 1], rng)?,
            vel: Mlp::new(store, &p("vel"), &[c.d_e, h1, h2, 4], rng)?,
            app_out: Conv::new(store, &p("app_out"), c.app_embed, c.app_channels, 3, rng)?,
            config,
        };
        // Boxes start out copied forward; training learns the motion.
        model.loc_out.last().zero(store);
        Ok(model)
    }

    /// Whether a parameter name belongs to this model.
    pub fn owns(name: &str) -> bool {
        name.starts_with("fg.")
    }

    fn tau_rows(&self, frames: &[usize]) -> Result<Tensor> {
        let d = self.config.d_tau;
        let mut data = Vec::with_capacity(frames.len() * d);
        for &t in frames {
            data.extend(temporal_encoding(t, d)?.into_data());
        }
        Tensor::new(&[frames.len(), d], data)
    }

    /// `τ_t` copied over every spatial position: `[M×d_τ×h×w]`.
    fn tau_maps(&self, frames: &[usize]) -> Result<Tensor> {
        let (d, hw) = (self.config.d_tau, self.config.app_height * self.config.app_width);
        let mut data = Vec::with_capacity(frames.len() * d * hw);
        for &t in frames {
            for v in temporal_encoding(t, d)?.into_data() {
                data.extend(std::iter::repeat_n(v, hw));
            }
        }
        Tensor::new(&[frames.len(), d, self.config.app_height, self.config.app_width], data)
    }

    fn app_rows(&self, inp: &ForecastInputs, rows: &[(usize, usize)]) -> Result<Tensor> {
        let [c, h, w] = self.config.app_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(rows.len() * per);
        for &(a, t) in rows {
            data.extend_from_slice(&inp.agents[a].appearance.data()[t * per..(t + 1) * per]);
        }
        Tensor::new(&[rows.len(), c, h, w], data)
    }

    /// `x̄_Loc = f_e2([f_e1([f_b([x, onehot(c)]), AvgPool(f_f(r)), o]), τ])`
    /// for the given `(agent, frame row)` pairs, `[M×d_e]`.
    pub fn embed_location(&self, g: &mut Graph, store: &ParamStore, inp: &ForecastInputs, rows: &[(usize, usize)]) -> Result<Var> {
        let c = &self.config;
        let mut xc = Vec::with_capacity(rows.len() * (LOC_DIM + c.n_things));
        let mut odo = Vec::with_capacity(rows.len() * ODO_DIM);
        for &(a, t) in rows {
            let track = &inp.agents[a].track;
            if !track.present(t) {
                return Err(Error::Contract(format!("agent {a} is absent at frame {t}")));
            }
            xc.extend_from_slice(track.x.row(t));
            xc.extend(one_hot(track.class_id, c.n_things)?.into_data());
            odo.extend_from_slice(inp.odometry.row(t));
        }
        let m = rows.len();
        let xc = g.constant(Tensor::new(&[m, LOC_DIM + c.n_things], xc)?);
        let x1 = self.f_b.forward(g, store, xc)?;

        let r = g.constant(self.app_rows(inp, rows)?);
        let f = self.f_f[0].forward(g, store, r)?;
        let f = g.relu(f);
        let f = self.f_f[1].forward(g, store, f)?;
        let f = g.relu(f);
        let hw = c.app_height * c.app_width;
        let f = g.reshape(f, &[m, c.d_e, hw])?;
        let f = g.sum_axis(f, 2)?;
        let r1 = g.scale(f, 1.0 / hw as f64);

        let o = g.constant(Tensor::new(&[m, ODO_DIM], odo)?);
        let cat = g.concat(&[x1, r1, o], 1)?;
        let e1 = self.f_e1.forward(g, store, cat)?;
        let frames: Vec<usize> = rows.iter().map(|&(_, t)| t + 1).collect();
        let tau = g.constant(self.tau_rows(&frames)?);
        let cat = g.concat(&[e1, tau], 1)?;
        self.f_e2.forward(g, store, cat)
    }

    /// `x̄_App = f_ae2([f_ae1(r), τ̃])`, `[M×C_e×h×w]`.
    pub fn embed_appearance(&self, g: &mut Graph, store: &ParamStore, r: Var, frames: &[usize]) -> Result<Var> {
        let a = self.f_ae1.forward(g, store, r)?;
        let tau = g.constant(self.tau_maps(frames)?);
        let cat = g.concat(&[a, tau], 1)?;
        self.f_ae2.forward(g, store, cat)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, inp: &ForecastInputs, drop: &mut Dropout) -> Result<Encoded> {
        inp.validate(&self.config)?;
        let tokens: Vec<(usize, usize)> = (0..inp.agents.len())
            .flat_map(|a| (0..inp.t_in).map(move |t| (a, t)))
            .filter(|&(a, t)| inp.agents[a].track.present(t))
            .collect();
        if tokens.is_empty() {
            return Err(Error::EmptyScene);
        }
        let ids: Vec<usize> = tokens.iter().map(|&(a, _)| inp.agents[a].id).collect();
        let agent = AgentMask::from_ids(&ids, &ids);
        let attend = AttendMask::all(ids.len(), ids.len());
        let own = AttendTo {
            agent: &agent,
            attend: &attend,
        };

        let xl = self.embed_location(g, store, inp, &tokens)?;
        let loc = self.enc_loc.forward(g, store, xl, &own, None, drop)?;

        let r = g.constant(self.app_rows(inp, &tokens)?);
        let frames: Vec<usize> = tokens.iter().map(|&(_, t)| t + 1).collect();
        let xa = self.embed_appearance(g, store, r, &frames)?;
        let app = self.enc_app.forward(g, store, xa, &own, None, drop)?;

        let velocity = self.vel.forward(g, store, loc)?;
        Ok(Encoded {
            tokens,
            loc,
            app,
            velocity,
        })
    }

    /// Agents present in the last input frame, and the rest.
    pub fn forecast_agents(inp: &ForecastInputs) -> (Vec<usize>, Vec<usize>) {
        (0..inp.agents.len()).partition(|&a| inp.agents[a].track.present(inp.t_in - 1))
    }

    /// Decoder feature rows for future step `j` (frame row `t_in + j`) from
    /// the previous location `[K×5]` and appearance `[K×C×h×w]`.
    fn step_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inp: &ForecastInputs,
        agents: &[usize],
        j: usize,
        x_prev: Var,
        r_prev: Var,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let row = inp.t_in + j;
        let mut side = Vec::with_capacity(agents.len() * (c.n_things + ODO_DIM));
        for &a in agents {
            side.extend(one_hot(inp.agents[a].track.class_id, c.n_things)?.into_data());
            side.extend_from_slice(inp.odometry.row(row));
        }
        let side = g.constant(Tensor::new(&[agents.len(), c.n_things + ODO_DIM], side)?);
        let cat = g.concat(&[x_prev, side], 1)?;
        let d1 = self.f_d1.forward(g, store, cat)?;
        let frames = vec![row + 1; agents.len()];
        let tau = g.constant(self.tau_rows(&frames)?);
        let cat = g.concat(&[d1, tau], 1)?;
        let loc = self.f_d2.forward(g, store, cat)?;

        let a1 = self.f_ad1.forward(g, store, r_prev)?;
        let tau = g.constant(self.tau_maps(&frames)?);
        let cat = g.concat(&[a1, tau], 1)?;
        let app = self.f_ad2.forward(g, store, cat)?;
        Ok((loc, app))
    }

    /// Runs both decoder stacks over `s = features.len()` steps, returning
    /// `[K·s×d_e]` and `[K·s×C_e×h×w]`.
    #[allow(clippy::too_many_arguments)]
    fn run_decoder(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inp: &ForecastInputs,
        enc: &Encoded,
        agents: &[usize],
        features: &[(Var, Var)],
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let s = features.len();
        let ids: Vec<usize> = agents.iter().map(|&a| inp.agents[a].id).collect();
        let (self_agent, self_attend) = build_masks(&Tensor::ones(&[agents.len(), s]), MaskMode::DecoderCausal, &ids)?;
        let seq_ids: Vec<usize> = ids.iter().flat_map(|&i| std::iter::repeat_n(i, s)).collect();
        let mem_ids: Vec<usize> = enc.tokens.iter().map(|&(a, _)| inp.agents[a].id).collect();
        let cross_agent = AgentMask::from_ids(&seq_ids, &mem_ids);
        let cross_attend = AttendMask::all(seq_ids.len(), mem_ids.len());
        let own = AttendTo {
            agent: &self_agent,
            attend: &self_attend,
        };
        let mem = AttendTo {
            agent: &cross_agent,
            attend: &cross_attend,
        };
        let locs: Vec<Var> = features.iter().map(|f| f.0).collect();
        let apps: Vec<Var> = features.iter().map(|f| f.1).collect();
        let xl = stack_agent_major(g, &locs)?;
        let xa = stack_agent_major(g, &apps)?;
        let hl = self.dec_loc.forward(g, store, xl, &own, Some((enc.loc, &mem)), drop)?;
        let ha = self.dec_app.forward(g, store, xa, &own, Some((enc.app, &mem)), drop)?;
        Ok((hl, ha))
    }

    /// Decoder embeddings `(h̃_Loc [K×d_e], h̃_App [K×C_e×h×w])` for frame
    /// row `t_in + prev.len() − 1`, given previous predictions for frame rows
    /// `t_in − 1 … t_in + prev.len() − 2` in `prev`.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inp: &ForecastInputs,
        enc: &Encoded,
        agents: &[usize],
        prev: &[(Var, Var)],
        t: usize,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        if t < inp.t_in || t >= inp.total_frames() {
            return Err(Error::Sequencing(format!("frame row {t} is not a future frame")));
        }
        let j = t - inp.t_in;
        if prev.len() != j + 1 {
            return Err(Error::Sequencing(format!(
                "frame row {t} needs predictions for {} earlier frames, got {}",
                j + 1,
                prev.len()
            )));
        }
        let feats = prev
            .iter()
            .enumerate()
            .map(|(i, &(x, r))| self.step_features(g, store, inp, agents, i, x, r))
            .collect::<Result<Vec<_>>>()?;
        let (hl, ha) = self.run_decoder(g, store, inp, enc, agents, &feats, drop)?;
        let k = agents.len();
        Ok((take_step(g, hl, k, j + 1, j)?, take_step(g, ha, k, j + 1, j)?))
    }

    fn last_inputs(&self, g: &mut Graph, inp: &ForecastInputs, agents: &[usize], row: usize) -> Result<(Var, Var)> {
        let mut x = Vec::with_capacity(agents.len() * LOC_DIM);
        for &a in agents {
            x.extend_from_slice(inp.agents[a].track.x.row(row));
        }
        let rows: Vec<(usize, usize)> = agents.iter().map(|&a| (a, row)).collect();
        let xv = g.constant(Tensor::new(&[agents.len(), LOC_DIM], x)?);
        let rv = g.constant(self.app_rows(inp, &rows)?);
        Ok((xv, rv))
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inp: &ForecastInputs,
        enc: &Encoded,
        mode: DecodeMode,
        drop: &mut Dropout,
    ) -> Result<Decoded> {
        let (agents, skipped) = Self::forecast_agents(inp);
        if agents.is_empty() {
            return Err(Error::Contract("no agent is present in the last input frame".into()));
        }
        let (k, f) = (agents.len(), inp.horizon);
        let (x_hat, p_logit, r_hat) = match mode {
            DecodeMode::TeacherForced => {
                let mut prev = Vec::with_capacity(f);
                let mut feats = Vec::with_capacity(f);
                for j in 0..f {
                    let (x, r) = self.last_inputs(g, inp, &agents, inp.t_in - 1 + j)?;
                    feats.push(self.step_features(g, store, inp, &agents, j, x, r)?);
                    prev.push(x);
                }
                let (hl, ha) = self.run_decoder(g, store, inp, enc, &agents, &feats, drop)?;
                let delta = self.loc_out.forward(g, store, hl)?;
                let base = stack_agent_major(g, &prev)?;
                let x_hat = g.add(delta, base)?;
                let p = self.p_out.forward(g, store, hl)?;
                let p = g.reshape(p, &[k * f])?;
                let r = self.app_out.forward(g, store, ha)?;
                (x_hat, p, r)
            }
            DecodeMode::FreeRunning => {
                let mut prev = vec![self.last_inputs(g, inp, &agents, inp.t_in - 1)?];
                let (mut xs, mut ps, mut rs) = (Vec::new(), Vec::new(), Vec::new());
                for j in 0..f {
                    let (hl, ha) = self.decoder_step(g, store, inp, enc, &agents, &prev, inp.t_in + j, drop)?;
                    let delta = self.loc_out.forward(g, store, hl)?;
                    let x = g.add(delta, prev[j].0)?;
                    let p = self.p_out.forward(g, store, hl)?;
                    let r = self.app_out.forward(g, store, ha)?;
                    prev.push((x, r));
                    xs.push(x);
                    ps.push(p);
                    rs.push(r);
                }
                let x_hat = stack_agent_major(g, &xs)?;
                let p = stack_agent_major(g, &ps)?;
                let p = g.reshape(p, &[k * f])?;
                let r_hat = stack_agent_major(g, &rs)?;
                (x_hat, p, r_hat)
            }
        };
        Ok(Decoded {
            agents,
            skipped,
            x_hat,
            p_logit,
            r_hat,
        })
    }

    /// Encoder velocities scattered to `[N·t_in×4]`; absent rows are zero.
    fn velocity_grid(&self, g: &mut Graph, inp: &ForecastInputs, enc: &Encoded) -> Result<Var> {
        let p = enc.tokens.len();
        let zero = g.constant(Tensor::zeros(&[1, 4]));
        let padded = g.concat(&[enc.velocity, zero], 0)?;
        let mut idx = vec![p; inp.agents.len() * inp.t_in];
        for (i, &(a, t)) in enc.tokens.iter().enumerate() {
            idx[a * inp.t_in + t] = i;
        }
        g.index_select(padded, &idx)
    }

    /// `L_FG = L_Loc + L_P + L_App + L_Vel` over forecast agents.
    #[allow(clippy::too_many_arguments)]
    pub fn foreground_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inp: &ForecastInputs,
        w: &LossWeights,
        sign: IouSign,
        mode: DecodeMode,
        drop: &mut Dropout,
    ) -> Result<ForegroundLoss> {
        let enc = self.encode(g, store, inp, drop)?;
        let dec = self.decode(g, store, inp, &enc, mode, drop)?;
        let [c, h, wd] = self.config.app_shape();
        let per = c * h * wd;
        let (mut xt, mut pt, mut rt) = (Vec::new(), Vec::new(), Vec::new());
        for &a in &dec.agents {
            let ag = &inp.agents[a];
            for j in 0..inp.horizon {
                let row = inp.t_in + j;
                xt.extend_from_slice(ag.track.x.row(row));
                pt.push(ag.track.presence.data()[row]);
                rt.extend_from_slice(&ag.appearance.data()[row * per..(row + 1) * per]);
            }
        }
        let kf = pt.len();
        let x_star = Tensor::new(&[kf, LOC_DIM], xt)?;
        let loc = tape::loc_loss(g, dec.x_hat, &x_star, &pt, w, sign)?;
        let presence = tape::presence_loss(g, dec.p_logit, &Tensor::new(&[kf], pt.clone())?, w)?;
        let appearance = tape::appearance_loss(g, dec.r_hat, &Tensor::new(&[kf, c, h, wd], rt)?, &pt, w)?;

        let n = inp.agents.len();
        let tv = inp.t_in + 1;
        let mut xs = Vec::with_capacity(n * tv * LOC_DIM);
        let mut ps = Vec::with_capacity(n * tv);
        for ag in &inp.agents {
            xs.extend_from_slice(&ag.track.x.data()[..tv * LOC_DIM]);
            ps.extend_from_slice(&ag.track.presence.data()[..tv]);
        }
        let (vt, vmask) = velocity_targets(
            &[n, inp.t_in, 4],
            &Tensor::new(&[n, tv, LOC_DIM], xs)?,
            &Tensor::new(&[n, tv], ps)?,
        )?;
        let grid = self.velocity_grid(g, inp, &enc)?;
        let velocity = tape::velocity_loss(g, grid, &vt, &vmask, w)?;

        let total = g.add(loc, presence)?;
        let total = g.add(total, appearance)?;
        let total = g.add(total, velocity)?;
        Ok(ForegroundLoss {
            total,
            loc,
            presence,
            appearance,
            velocity,
            decoded: dec,
        })
    }

    /// Free-running forecast for every agent present in the last input frame.
    pub fn forecast(&self, store: &ParamStore, inp: &ForecastInputs) -> Result<ForecastOutput> {
        let mut g = Graph::new();
        let mut drop = Dropout::off();
        let enc = self.encode(&mut g, store, inp, &mut drop)?;
        let dec = self.decode(&mut g, store, inp, &enc, DecodeMode::FreeRunning, &mut drop)?;
        Ok(self.collect(&g, inp, &enc, &dec))
    }

    /// Reads decoded values out of a graph into per-agent forecasts.
    pub fn collect(&self, g: &Graph, inp: &ForecastInputs, enc: &Encoded, dec: &Decoded) -> ForecastOutput {
        let f = inp.horizon;
        let [c, h, w] = self.config.app_shape();
        let per = c * h * w;
        let (x, p, r) = (g.value(dec.x_hat), g.value(dec.p_logit), g.value(dec.r_hat));
        let agents = dec
            .agents
            .iter()
            .enumerate()
            .map(|(k, &a)| AgentForecast {
                agent: a,
                id: inp.agents[a].id,
                x_hat: Tensor::new(&[f, LOC_DIM], x.data()[k * f * LOC_DIM..(k + 1) * f * LOC_DIM].to_vec()).expect("rows"),
                presence_logit: Tensor::new(&[f], p.data()[k * f..(k + 1) * f].to_vec()).expect("rows"),
                appearance: Tensor::new(&[f, c, h, w], r.data()[k * f * per..(k + 1) * f * per].to_vec()).expect("rows"),
            })
            .collect();
        ForecastOutput {
            agents,
            skipped: dec.skipped.clone(),
            tokens: enc.tokens.clone(),
            encoder_velocity: g.value(enc.velocity).clone(),
        }
    }
}
