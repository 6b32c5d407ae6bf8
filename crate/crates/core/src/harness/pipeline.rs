use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::scene::{background_prior, Normalizer, OdometryStats, SceneSequence};
use crate::encdec::{ForecastOutput, Forecaster};
use crate::error::{Error, Result};
use crate::geometry::{build_reprojected_maps, DepthMap, FrameObservation};
use crate::linalg::{ParamStore, ParamTensor, SeededRng, Tensor};
use crate::refine::{mask_out, Instance, RefineHead, RefineInputs, RefineOutput};

pub const CHECKPOINT_MAGIC: &str = "pforecast-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1.0";

/// Logit given to every cell of the square mask pasted for an instance.
const MASK_LOGIT: f64 = 4.0;
const MASK_SIDE: usize = 4;
/// Presence logit of agents that are not forecast.
const ABSENT_LOGIT: f64 = -30.0;

/// Forecaster and refinement head sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub forecaster: Forecaster,
    pub refine: RefineHead,
    pub odometry: OdometryStats,
}

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    config: String,
    odometry: OdometryStats,
    params: Vec<ParamTensor>,
}

/// One agent's forecast in pixels and metres.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub agent: usize,
    pub id: usize,
    /// `[F×5]`.
    pub boxes: Tensor,
    pub presence: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SceneForecast {
    /// Model outputs in normalized coordinates.
    pub output: ForecastOutput,
    pub tracks: Vec<AgentTrack>,
    pub refine_inputs: RefineInputs,
    pub refined: RefineOutput,
}

impl Model {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(config.seed).fork(0x5eed);
        let forecaster = Forecaster::new(&mut store, config.model(), &mut rng.fork(1))?;
        let refine = RefineHead::new(&mut store, super::scene::NUM_BG, config.refine(), &mut rng.fork(2))?;
        Ok(Self {
            config: config.clone(),
            store,
            forecaster,
            refine,
            odometry: OdometryStats::default(),
        })
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer {
            width: self.config.width as f64,
            height: self.config.height as f64,
            depth_max: 60.0,
        }
    }

    /// Whether `scene` has the dimensions this model was built for.
    pub fn check_scene(&self, scene: &SceneSequence) -> Result<()> {
        let c = &self.config;
        let want = [c.height, c.width, c.n_things, c.app_channels, c.app_size, c.app_size, super::scene::NUM_BG];
        let a = scene.app_shape();
        let got = [scene.height, scene.width, scene.n_things, a[0], a[1], a[2], scene.c_bg];
        if want != got {
            return Err(Error::shape("scene vs checkpoint (h, w, things, app c/h/w, c_bg)", &got, &want));
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        let body = CheckpointBody {
            config: self.config.to_text(),
            odometry: self.odometry,
            params: self.store.snapshot(),
        };
        serde_json::to_writer(&mut out, &body).map_err(|e| Error::Format {
            kind: "checkpoint",
            detail: e.to_string(),
        })?;
        writeln!(out)?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        if header.trim() != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(Error::Version {
                kind: "checkpoint",
                found: header.trim().to_string(),
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        let body: CheckpointBody = serde_json::from_reader(input).map_err(|e| Error::Format {
            kind: "checkpoint",
            detail: e.to_string(),
        })?;
        let mut model = Self::new(&RunConfig::parse(&body.config)?)?;
        model.store.load_values(&body.params)?;
        model.odometry = body.odometry;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Background depth, `Q`, background logits and forecast instances at
    /// the last frame of `scene`.
    pub fn refine_inputs(&self, scene: &SceneSequence, output: &ForecastOutput) -> Result<RefineInputs> {
        let (h, w, c_bg) = (scene.height, scene.width, scene.c_bg);
        let target = scene.total_frames() - 1;
        let frames: Vec<FrameObservation> = (0..scene.t_in)
            .map(|t| FrameObservation {
                depth: &scene.depth[t],
                semantics: &scene.semantics[t],
                pose: scene.poses[t],
            })
            .collect();
        let maps = build_reprojected_maps(&frames, &scene.intrinsics, &scene.poses[target])?;
        let (sem, dm) = &maps.merged;
        let prior = background_prior(&scene.intrinsics, h, w);
        let mut logits = Tensor::zeros(&[c_bg, h, w]);
        for p in 0..h * w {
            let (label, conf) = if dm.valid.data()[p] != 0.0 { (sem.labels[p], 4.0) } else { (prior[p], 2.0) };
            logits.data_mut()[label * h * w + p] = conf;
        }
        let norm = self.normalizer();
        let square = Tensor::full(&[MASK_SIDE, MASK_SIDE], MASK_LOGIT);
        let mut instances = Vec::with_capacity(scene.agents.len());
        for (i, ag) in scene.agents.iter().enumerate() {
            let class = c_bg + ag.track.class_id;
            let inst = match output.agents.iter().find(|a| a.agent == i) {
                Some(f) => {
                    let last = f.x_hat.shape()[0] - 1;
                    let b = norm.denormalize(f.x_hat.row(last));
                    Instance {
                        mask: mask_out(&[b[0], b[1], b[2], b[3]], &square, h, w)?,
                        depth: b[4].max(0.1),
                        presence_logit: f.presence_logit.data()[last],
                        class,
                    }
                }
                None => Instance {
                    mask: Tensor::zeros(&[h, w]),
                    depth: 1.0,
                    presence_logit: ABSENT_LOGIT,
                    class,
                },
            };
            instances.push(inst);
        }
        Ok(RefineInputs {
            d_tilde: DepthMap {
                depth: dm.depth.clone(),
                valid: dm.valid.clone(),
            },
            bg_logits: logits,
            instances,
        })
    }

    /// Free-running forecast, refinement and panoptic merge for one scene.
    pub fn forecast(&self, scene: &SceneSequence) -> Result<SceneForecast> {
        self.check_scene(scene)?;
        let norm = self.normalizer();
        let inputs = scene.forecast_inputs(&norm, &self.odometry);
        let output = self.forecaster.forecast(&self.store, &inputs)?;
        let tracks = output
            .agents
            .iter()
            .map(|a| AgentTrack {
                agent: a.agent,
                id: a.id,
                boxes: norm.denormalize_rows(&a.x_hat),
                presence: a.presence_logit.data().iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect(),
            })
            .collect();
        let refine_inputs = self.refine_inputs(scene, &output)?;
        let refined = self.refine.predict(&self.store, &refine_inputs)?;
        Ok(SceneForecast {
            output,
            tracks,
            refine_inputs,
            refined,
        })
    }
}
