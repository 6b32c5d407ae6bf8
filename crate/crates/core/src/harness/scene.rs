use serde::{Deserialize, Serialize};

use crate::encdec::{AgentInput, ForecastInputs, InstanceTrack, LOC_DIM, ODO_DIM};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, RigidTransform, SemanticMap};
use crate::linalg::{SeededRng, Tensor};
use crate::refine::PanopticMap;

/// Background classes of the synthetic world.
pub const ROAD: usize = 0;
pub const BUILDING: usize = 1;
pub const SKY: usize = 2;
pub const NUM_BG: usize = 3;

const CAMERA_HEIGHT: f64 = 1.5;
const WALL_DEPTH: f64 = 30.0;
/// Frames by which a follower trails its leader.
pub const FOLLOW_LAG: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    #[default]
    ConstantVelocity,
    Accelerating,
    /// Agents come in pairs; the second trails the first by [`FOLLOW_LAG`]
    /// frames and the first changes velocity once.
    LeaderFollower,
}

impl Motion {
    pub fn name(self) -> &'static str {
        match self {
            Motion::ConstantVelocity => "constant_velocity",
            Motion::Accelerating => "accelerating",
            Motion::LeaderFollower => "leader_follower",
        }
    }
}

impl std::str::FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_velocity" => Ok(Motion::ConstantVelocity),
            "accelerating" => Ok(Motion::Accelerating),
            "leader_follower" => Ok(Motion::LeaderFollower),
            other => Err(Error::Config(format!("unknown motion {other:?}"))),
        }
    }
}

/// Everything `generate_scene` needs besides the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOptions {
    pub n_agents: usize,
    pub t_in: usize,
    pub horizon: usize,
    pub motion: Motion,
    pub height: usize,
    pub width: usize,
    pub n_things: usize,
    /// `[C, h, w]` of appearance features.
    pub app: [usize; 3],
    /// Probability that an agent is hidden in a given frame.
    pub occlusion: f64,
    /// Scales every velocity, including ego motion. Zero freezes the scene.
    pub speed: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            n_agents: 4,
            t_in: 4,
            horizon: 3,
            motion: Motion::LeaderFollower,
            height: 24,
            width: 32,
            n_things: 2,
            app: [4, 4, 4],
            occlusion: 0.0,
            speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    pub seed: u64,
    pub motion: Motion,
    pub height: usize,
    pub width: usize,
    pub c_bg: usize,
    pub n_things: usize,
    pub t_in: usize,
    pub horizon: usize,
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world pose per frame.
    pub poses: Vec<RigidTransform>,
    /// `[T_total×5]` rows `(speed, yaw rate, Δx, Δz, yaw)`, raw units.
    pub odometry: Tensor,
    /// Boxes in pixels, depth in metres.
    pub agents: Vec<AgentInput>,
    pub depth: Vec<DepthMap>,
    pub semantics: Vec<SemanticMap>,
    /// Ground-truth object selection at the last frame: 0 for background,
    /// `1 + agent` otherwise.
    pub selection: Vec<usize>,
    /// Ground-truth panoptic map at the last frame.
    pub panoptic: PanopticMap,
}

/// Maps pixel boxes and metric depth into `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub width: f64,
    pub height: f64,
    pub depth_max: f64,
}

impl Normalizer {
    pub fn for_scene(scene: &SceneSequence) -> Self {
        Self {
            width: scene.width as f64,
            height: scene.height as f64,
            depth_max: 60.0,
        }
    }

    fn scales(&self) -> [f64; 5] {
        [self.width, self.height, self.width, self.height, self.depth_max]
    }

    pub fn normalize(&self, row: &[f64]) -> [f64; 5] {
        let s = self.scales();
        std::array::from_fn(|i| 2.0 * row[i] / s[i] - 1.0)
    }

    pub fn denormalize(&self, row: &[f64]) -> [f64; 5] {
        let s = self.scales();
        std::array::from_fn(|i| (row[i] + 1.0) * 0.5 * s[i])
    }

    /// Applies [`Self::normalize`] to every `5`-wide row.
    pub fn normalize_rows(&self, x: &Tensor) -> Tensor {
        let data = x.data().chunks(LOC_DIM).flat_map(|r| self.normalize(r)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn denormalize_rows(&self, x: &Tensor) -> Tensor {
        let data = x.data().chunks(LOC_DIM).flat_map(|r| self.denormalize(r)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }
}

/// Per-column mean and standard deviation of odometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryStats {
    pub mean: [f64; ODO_DIM],
    pub std: [f64; ODO_DIM],
}

impl Default for OdometryStats {
    fn default() -> Self {
        Self {
            mean: [0.0; ODO_DIM],
            std: [1.0; ODO_DIM],
        }
    }
}

impl OdometryStats {
    /// Columns with (near) zero spread keep unit scale.
    pub fn fit(scenes: &[SceneSequence]) -> Self {
        let rows: Vec<&[f64]> = scenes.iter().flat_map(|s| s.odometry.data().chunks(ODO_DIM)).collect();
        if rows.is_empty() {
            return Self::default();
        }
        let n = rows.len() as f64;
        let mean: [f64; ODO_DIM] = std::array::from_fn(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n);
        let std = std::array::from_fn(|c| {
            let var = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
            if var.sqrt() < 1e-9 {
                1.0
            } else {
                var.sqrt()
            }
        });
        Self { mean, std }
    }

    pub fn standardize(&self, odo: &Tensor) -> Tensor {
        let data = odo
            .data()
            .chunks(ODO_DIM)
            .flat_map(|r| (0..ODO_DIM).map(move |c| (r[c] - self.mean[c]) / self.std[c]))
            .collect();
        Tensor::new(odo.shape(), data).expect("same shape")
    }

    pub fn restore(&self, odo: &Tensor) -> Tensor {
        let data = odo
            .data()
            .chunks(ODO_DIM)
            .flat_map(|r| (0..ODO_DIM).map(move |c| r[c] * self.std[c] + self.mean[c]))
            .collect();
        Tensor::new(odo.shape(), data).expect("same shape")
    }
}

/// Box `(x0, y0, x1, y1, d)` of an object of metric size `size` whose
/// ground contact projects to column `u`.
fn box_at(k: &CameraIntrinsics, u: f64, d: f64, size: [f64; 2]) -> [f64; 5] {
    let m = k.matrix();
    let (fx, fy, cy) = (m[0][0], m[1][1], m[1][2]);
    let w = fx * size[0] / d;
    let h = fy * size[1] / d;
    let y1 = cy + fy * CAMERA_HEIGHT / d;
    [u - w / 2.0, y1 - h, u + w / 2.0, y1, d]
}

/// Pixel range `[⌊a+½⌋, ⌊b+½⌋)` clamped to `0..n`, the rasterization used
/// for boxes everywhere.
pub fn pixel_span(a: f64, b: f64, n: usize) -> std::ops::Range<usize> {
    let lo = (a + 0.5).floor().clamp(0.0, n as f64) as usize;
    let hi = (b + 0.5).floor().clamp(0.0, n as f64) as usize;
    lo..hi.max(lo)
}

fn background(k: &CameraIntrinsics, height: usize, width: usize) -> (Vec<usize>, DepthMap) {
    let cy = k.matrix()[1][2];
    let fy = k.matrix()[1][1];
    let sky_rows = height / 4;
    let mut labels = vec![SKY; height * width];
    let mut dm = DepthMap::empty(height, width);
    for r in 0..height {
        let below = r as f64 - cy;
        let ground = if below > 0.0 { fy * CAMERA_HEIGHT / below } else { f64::INFINITY };
        let (label, depth) = if ground < WALL_DEPTH {
            (ROAD, ground)
        } else if r >= sky_rows {
            (BUILDING, WALL_DEPTH)
        } else {
            (SKY, 0.0)
        };
        for c in 0..width {
            labels[r * width + c] = label;
            if depth > 0.0 {
                dm.depth.set2(r, c, depth);
                dm.valid.set2(r, c, 1.0);
            }
        }
    }
    (labels, dm)
}

/// Background class most likely at row `r` without any observation.
pub fn background_prior(k: &CameraIntrinsics, height: usize, width: usize) -> Vec<usize> {
    background(k, height, width).0
}

type Path5 = Vec<[f64; 5]>;

fn add(a: [f64; 5], b: [f64; 5], s: f64) -> [f64; 5] {
    std::array::from_fn(|i| a[i] + s * b[i])
}

fn sub(a: [f64; 5], b: [f64; 5]) -> [f64; 5] {
    std::array::from_fn(|i| a[i] - b[i])
}

/// `b₀ + t·v + ½t²·a` for `t = 0 … frames−1`.
fn quadratic(b0: [f64; 5], v: [f64; 5], a: [f64; 5], frames: usize) -> Path5 {
    (0..frames)
        .map(|i| {
            let t = i as f64;
            add(add(b0, v, t), a, 0.5 * t * t)
        })
        .collect()
}

/// Velocity `v1` up to frame `turn` and `v2` afterwards; defined for
/// negative frames so followers can look back.
fn piecewise(b0: [f64; 5], v1: [f64; 5], v2: [f64; 5], turn: usize) -> impl Fn(isize) -> [f64; 5] {
    move |i: isize| {
        let (t, tc) = (i as f64, turn as f64);
        if t <= tc {
            add(b0, v1, t)
        } else {
            add(add(b0, v1, tc), v2, t - tc)
        }
    }
}

fn object_size(class: usize) -> [f64; 2] {
    match class {
        0 => [1.8, 1.5],
        1 => [0.8, 1.7],
        c => [1.0 + 0.3 * c as f64, 1.4],
    }
}

/// Deterministic synthetic scene with exact ground truth.
pub fn generate_scene(seed: u64, opts: &SceneOptions) -> Result<SceneSequence> {
    if opts.n_agents == 0 || opts.t_in == 0 || opts.horizon == 0 || opts.n_things == 0 {
        return Err(Error::Config("agents, t_in, horizon and n_things must be positive".into()));
    }
    if opts.height < 8 || opts.width < 8 {
        return Err(Error::Config("scene must be at least 8×8 pixels".into()));
    }
    if !(0.0..1.0).contains(&opts.occlusion) || opts.speed < 0.0 {
        return Err(Error::Config("occlusion must lie in [0, 1) and speed be non-negative".into()));
    }
    let (h, w) = (opts.height, opts.width);
    let tt = opts.t_in + opts.horizon;
    let mut rng = SeededRng::new(seed);
    let k = CameraIntrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?;
    let fx = w as f64;

    let mut ego = rng.fork(1);
    let ego_speed = opts.speed * ego.uniform(0.5, 1.5);
    let yaw_rate = opts.speed * ego.uniform(-0.02, 0.02);
    let mut poses = Vec::with_capacity(tt);
    let mut odo = Vec::with_capacity(tt * ODO_DIM);
    let mut pos = [0.0; 3];
    let mut yaw: f64 = 0.0;
    for t in 0..tt {
        if t > 0 {
            yaw += yaw_rate;
            pos[0] += ego_speed * yaw.sin();
            pos[2] += ego_speed * yaw.cos();
        }
        poses.push(RigidTransform::from_yaw(yaw, pos));
        let (dx, dz) = if t > 0 { (ego_speed * yaw.sin(), ego_speed * yaw.cos()) } else { (0.0, 0.0) };
        odo.extend([ego_speed, yaw_rate, dx, dz, yaw]);
    }
    // Ego yaw shifts every box sideways by a constant amount per frame.
    let pan = -fx * yaw_rate;
    let ego_shift = [pan, 0.0, pan, 0.0, 0.0];

    let mut agent_rng = rng.fork(2);
    let mut paths: Vec<Path5> = Vec::with_capacity(opts.n_agents);
    let mut classes = Vec::with_capacity(opts.n_agents);
    let s = opts.speed;
    while paths.len() < opts.n_agents {
        let r = &mut agent_rng;
        let class = r.below(opts.n_things);
        let size = object_size(class);
        let u0 = r.uniform(0.2, 0.8) * w as f64;
        let d0 = r.uniform(8.0, 20.0);
        let velocity = |r: &mut SeededRng| {
            let (vu, vd) = (s * r.uniform(-1.0, 1.0), s * r.uniform(-0.4, 0.4));
            add(sub(box_at(&k, u0 + vu, d0 + vd, size), box_at(&k, u0, d0, size)), ego_shift, 1.0)
        };
        let b0 = box_at(&k, u0, d0, size);
        let v1 = velocity(r);
        match opts.motion {
            Motion::ConstantVelocity => paths.push(quadratic(b0, v1, [0.0; 5], tt)),
            Motion::Accelerating => {
                let au = s * r.uniform(-0.2, 0.2);
                paths.push(quadratic(b0, v1, [au, 0.0, au, 0.0, 0.0], tt));
            }
            Motion::LeaderFollower if paths.len() + 1 < opts.n_agents => {
                let turn = 1 + r.below(tt.saturating_sub(2).max(1));
                let v2 = velocity(r);
                let lead = piecewise(b0, v1, v2, turn);
                let du = r.uniform(-4.0, 4.0);
                let offset = [du, 0.0, du, 0.0, r.uniform(2.0, 4.0)];
                let follower_class = r.below(opts.n_things);
                paths.push((0..tt).map(|i| lead(i as isize)).collect());
                paths.push((0..tt).map(|i| add(lead(i as isize - FOLLOW_LAG as isize), offset, 1.0)).collect());
                classes.push(class);
                classes.push(follower_class);
                continue;
            }
            Motion::LeaderFollower => paths.push(quadratic(b0, v1, [0.0; 5], tt)),
        }
        classes.push(class);
    }

    let mut app_rng = rng.fork(3);
    let mut occ_rng = rng.fork(4);
    let [ac, ah, aw] = opts.app;
    let per = ac * ah * aw;
    let mut agents = Vec::with_capacity(opts.n_agents);
    for (i, (path, &class)) in paths.iter().zip(&classes).enumerate() {
        let mut presence = Vec::with_capacity(tt);
        for b in path {
            let u = 0.5 * (b[0] + b[2]);
            let visible = u >= 0.0 && u < w as f64 && b[4] > 0.5;
            presence.push(f64::from(u8::from(visible && !occ_rng.bernoulli(opts.occlusion))));
        }
        if presence[..opts.t_in].iter().all(|&p| p == 0.0) {
            presence[opts.t_in - 1] = 1.0;
        }
        let pattern: Vec<f64> = (0..per).map(|j| 0.5 * app_rng.normal() + if j % (class + 2) == 0 { 1.0 } else { 0.0 }).collect();
        let mut app = Vec::with_capacity(tt * per);
        for b in path {
            let scale = 8.0 / b[4].max(2.0);
            app.extend(pattern.iter().map(|p| p * scale));
        }
        agents.push(AgentInput {
            id: i,
            track: InstanceTrack {
                x: Tensor::new(&[tt, LOC_DIM], path.iter().flatten().copied().collect())?,
                presence: Tensor::new(&[tt], presence)?,
                class_id: class,
            },
            appearance: Tensor::new(&[tt, ac, ah, aw], app)?,
        });
    }

    if agents.iter().all(|a| !a.track.present(opts.t_in - 1)) {
        agents[0].track.presence.data_mut()[opts.t_in - 1] = 1.0;
    }

    let (bg_labels, bg_depth) = background(&k, h, w);
    let mut depth = Vec::with_capacity(tt);
    let mut semantics = Vec::with_capacity(tt);
    let mut selection = vec![0; h * w];
    let mut panoptic = PanopticMap::filled(h, w, 0);
    for t in 0..tt {
        let mut labels = bg_labels.clone();
        let mut dm = bg_depth.clone();
        let mut owner = vec![0usize; h * w];
        let mut nearest = vec![f64::INFINITY; h * w];
        for (i, ag) in agents.iter().enumerate() {
            if !ag.track.present(t) {
                continue;
            }
            let b = ag.track.x.row(t);
            for r in pixel_span(b[1], b[3], h) {
                for c in pixel_span(b[0], b[2], w) {
                    let p = r * w + c;
                    if b[4] < nearest[p] {
                        nearest[p] = b[4];
                        owner[p] = i + 1;
                        labels[p] = NUM_BG + ag.track.class_id;
                        dm.depth.data_mut()[p] = b[4];
                        dm.valid.data_mut()[p] = 1.0;
                    }
                }
            }
        }
        if t + 1 == tt {
            for p in 0..h * w {
                selection[p] = owner[p];
                let inst = if owner[p] == 0 { 0 } else { NUM_BG + owner[p] };
                panoptic.set(p / w, p % w, labels[p], inst);
            }
        }
        semantics.push(SemanticMap::from_labels(h, w, labels, NUM_BG)?);
        depth.push(dm);
    }

    let scene = SceneSequence {
        seed,
        motion: opts.motion,
        height: h,
        width: w,
        c_bg: NUM_BG,
        n_things: opts.n_things,
        t_in: opts.t_in,
        horizon: opts.horizon,
        intrinsics: k,
        poses,
        odometry: Tensor::new(&[tt, ODO_DIM], odo)?,
        agents,
        depth,
        semantics,
        selection,
        panoptic,
    };
    scene.validate()?;
    Ok(scene)
}

impl SceneSequence {
    pub fn total_frames(&self) -> usize {
        self.t_in + self.horizon
    }

    pub fn num_classes(&self) -> usize {
        self.c_bg + self.n_things
    }

    pub fn app_shape(&self) -> [usize; 3] {
        let s = self.agents.first().map_or(&[0, 0, 0, 0][..], |a| a.appearance.shape());
        [s[1], s[2], s[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let tt = self.total_frames();
        let (h, w) = (self.height, self.width);
        if self.t_in == 0 || self.horizon == 0 {
            return Err(Error::Contract("scene needs T ≥ 1 and F ≥ 1".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::EmptyScene);
        }
        if self.poses.len() != tt || self.depth.len() != tt || self.semantics.len() != tt {
            return Err(Error::shape("per-frame scene data", &[tt], &[self.poses.len(), self.depth.len(), self.semantics.len()]));
        }
        if self.odometry.shape() != [tt, ODO_DIM] {
            return Err(Error::shape("odometry", self.odometry.shape(), &[tt, ODO_DIM]));
        }
        for d in &self.depth {
            if d.depth.shape() != [h, w] || d.valid.shape() != [h, w] {
                return Err(Error::shape("depth map", d.depth.shape(), &[h, w]));
            }
        }
        for s in &self.semantics {
            if s.height != h || s.width != w || s.labels.len() != h * w {
                return Err(Error::shape("semantic map", &[s.height, s.width], &[h, w]));
            }
        }
        if self.selection.len() != h * w || self.panoptic.height != h || self.panoptic.width != w {
            return Err(Error::shape("ground-truth maps", &[self.selection.len()], &[h * w]));
        }
        if self.selection.iter().any(|&s| s > self.agents.len()) {
            return Err(Error::Contract("selection map refers to a missing agent".into()));
        }
        let app = self.app_shape();
        for (i, a) in self.agents.iter().enumerate() {
            a.track.validate()?;
            if a.track.frames() != tt || a.appearance.shape() != [tt, app[0], app[1], app[2]] {
                return Err(Error::shape("agent frames", a.appearance.shape(), &[tt]));
            }
            if a.track.class_id >= self.n_things {
                return Err(Error::Contract(format!("agent {i} has class {} outside 0..{}", a.track.class_id, self.n_things)));
            }
            if (0..self.t_in).all(|t| !a.track.present(t)) {
                return Err(Error::Contract(format!("agent {i} is absent in every input frame")));
            }
            if (0..tt).any(|t| a.track.present(t) && a.track.x.row(t)[4] <= 0.0) {
                return Err(Error::Contract(format!("agent {i} has non-positive depth")));
            }
        }
        Ok(())
    }

    /// Model inputs with normalized locations and standardized odometry.
    pub fn forecast_inputs(&self, norm: &Normalizer, odo: &OdometryStats) -> ForecastInputs {
        ForecastInputs {
            agents: self
                .agents
                .iter()
                .map(|a| AgentInput {
                    track: InstanceTrack {
                        x: norm.normalize_rows(&a.track.x),
                        ..a.track.clone()
                    },
                    ..a.clone()
                })
                .collect(),
            odometry: odo.standardize(&self.odometry),
            t_in: self.t_in,
            horizon: self.horizon,
        }
    }
}
