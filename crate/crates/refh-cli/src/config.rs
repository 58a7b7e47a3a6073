//! Experiment configuration: TOML files, named presets, and resolution of
//! partial configs onto preset defaults.
//!
//! A config file may set `preset = "name"` to start from a named preset and
//! then override individual fields; without a preset, `kind` must be given
//! and task-appropriate defaults fill the rest. Every run writes the fully
//! resolved configuration next to its outputs.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use refh_core::exp_family::LayerSpec;
use refh_core::harmonium::HarmoniumParams;
use refh_core::rng::stream;
use refh_core::temporal::{
    MinibatchScheme, ModelKind, PredictOptions, PretrainSpec, TrainSchedule, TrajectorySource,
};
use refh_core::worldgen::{BounceSource, BounceWorld, LdsSource, LdsWorld, PpcCodec};

/// Stream tag for drawing the model's initial parameters.
pub const TAG_MODEL_INIT: u64 = 20;

/// Which synthetic task the experiment runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Damped oscillator on a ring, observed through Poisson population counts.
    Ring,
    /// Bouncing-ball movies, observed as binary pixel frames.
    Balls,
}

/// Which trainer drives the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Refh,
    Trbm,
    Rtrbm,
}

impl ModelVariant {
    pub fn kind(self) -> ModelKind {
        match self {
            ModelVariant::Refh => ModelKind::Refh,
            ModelVariant::Trbm => ModelKind::Trbm,
            ModelVariant::Rtrbm => ModelKind::Rtrbm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Refh => "refh",
            ModelVariant::Trbm => "trbm",
            ModelVariant::Rtrbm => "rtrbm",
        }
    }
}

/// Model family and size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub variant: ModelVariant,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_scale: f64,
}

/// Dataset sizes used by `generate`, `evaluate`, and `benchmark`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_trajectories: usize,
    pub traj_len: usize,
}

/// Ring-task world and codec parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RingConfig {
    #[serde(default)]
    pub world: LdsWorld,
    #[serde(default)]
    pub codec: PpcCodec,
}

/// Bouncing-ball world parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BallsConfig {
    #[serde(default)]
    pub world: BounceWorld,
}

/// EM baseline settings for `benchmark` and `evaluate --with-baselines`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub em_iters: usize,
    pub em_restarts: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            em_iters: 50,
            em_restarts: 20,
        }
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: TaskKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub data: DataConfig,
    pub ring: RingConfig,
    pub balls: BallsConfig,
    pub baselines: BaselineConfig,
    /// Next-frame prediction settings (movie evaluation).
    pub predict: PredictOptions,
}

// ---------------------------------------------------------------------------
// Partial (file-facing) form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialModel {
    hidden: Option<usize>,
    variant: Option<ModelVariant>,
    init_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialData {
    n_trajectories: Option<usize>,
    traj_len: Option<usize>,
}

/// Scalar knobs of the training schedule that configs may override without
/// restating the whole schedule.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOverrides {
    epochs: Option<usize>,
    cd_steps: Option<usize>,
    weight_decay: Option<f64>,
    batch_trajectories: Option<usize>,
    batch_len: Option<usize>,
    renewal_period: Option<usize>,
    /// Sets an across-trajectory minibatch of this many trajectories.
    minibatch_count: Option<usize>,
    /// Sets a contiguous-segment minibatch of this many steps.
    minibatch_steps: Option<usize>,
    pretrain_batches: Option<usize>,
    pretrain_cd: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialBaselines {
    em_iters: Option<usize>,
    em_restarts: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialPredict {
    n_gibbs: Option<usize>,
    average_last: Option<usize>,
}

/// What a config file may contain.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialConfig {
    preset: Option<String>,
    kind: Option<TaskKind>,
    seed: Option<u64>,
    #[serde(default)]
    model: PartialModel,
    #[serde(default)]
    train: TrainOverrides,
    #[serde(default)]
    data: PartialData,
    ring: Option<RingConfig>,
    balls: Option<BallsConfig>,
    #[serde(default)]
    baselines: PartialBaselines,
    #[serde(default)]
    predict: PartialPredict,
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Names accepted by `--preset` and the `preset` config key.
pub const PRESET_NAMES: &[&str] = &["lds-refh", "lds-trbm-rtrbm", "lds-test", "balls", "balls-desk"];

/// Build a named preset configuration.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        // Online-filtering trainer on the ring task at full scale.
        "lds-refh" => ExperimentConfig {
            kind: TaskKind::Ring,
            seed: 0,
            model: ModelConfig {
                hidden: 240,
                variant: ModelVariant::Refh,
                init_scale: 0.01,
            },
            schedule: TrainSchedule::lds_refh(),
            data: DataConfig {
                n_trajectories: 40,
                traj_len: 1000,
            },
            ring: RingConfig::default(),
            balls: BallsConfig::default(),
            baselines: BaselineConfig::default(),
            predict: PredictOptions::default(),
        },
        // Sequence-minibatch trainers on the ring task at full scale.
        "lds-trbm-rtrbm" => {
            let mut cfg = preset("lds-refh")?;
            cfg.model.variant = ModelVariant::Trbm;
            cfg.schedule = TrainSchedule::lds_sequence_full();
            cfg
        }
        // Generation-only alias: the standard 40x1000 test protocol.
        "lds-test" => preset("lds-refh")?,
        // Bouncing-ball movies at full scale.
        "balls" => ExperimentConfig {
            kind: TaskKind::Balls,
            seed: 0,
            model: ModelConfig {
                hidden: 400,
                variant: ModelVariant::Refh,
                init_scale: 0.01,
            },
            schedule: TrainSchedule::balls_full(),
            data: DataConfig {
                n_trajectories: 30,
                traj_len: 100,
            },
            ring: RingConfig::default(),
            balls: BallsConfig::default(),
            baselines: BaselineConfig::default(),
            predict: PredictOptions::default(),
        },
        // Reduced movie run for quick comparisons.
        "balls-desk" => {
            let mut cfg = preset("balls")?;
            cfg.schedule = TrainSchedule::balls_desk();
            cfg.data = DataConfig {
                n_trajectories: 10,
                traj_len: 100,
            };
            cfg
        }
        other => bail!(
            "unknown preset '{other}' (available: {})",
            PRESET_NAMES.join(", ")
        ),
    };
    Ok(cfg)
}

fn default_schedule(kind: TaskKind, variant: ModelVariant) -> TrainSchedule {
    match (kind, variant) {
        (TaskKind::Ring, ModelVariant::Refh) => TrainSchedule::lds_refh(),
        (TaskKind::Ring, _) => TrainSchedule::lds_sequence_full(),
        (TaskKind::Balls, _) => TrainSchedule::balls_full(),
    }
}

fn default_config(kind: TaskKind, variant: ModelVariant) -> Result<ExperimentConfig> {
    let mut cfg = match kind {
        TaskKind::Ring => preset("lds-refh")?,
        TaskKind::Balls => preset("balls")?,
    };
    cfg.model.variant = variant;
    cfg.schedule = default_schedule(kind, variant);
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// Load and resolve a configuration from a file and/or preset name, with an
/// optional seed override from the command line.
pub fn resolve(
    config_path: Option<&std::path::Path>,
    preset_name: Option<&str>,
    seed_override: Option<u64>,
) -> Result<ExperimentConfig> {
    if config_path.is_some() && preset_name.is_some() {
        bail!("pass either --config or --preset, not both");
    }
    let partial: PartialConfig = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?
        }
        None => PartialConfig {
            preset: Some(
                preset_name
                    .context("one of --config or --preset is required")?
                    .to_string(),
            ),
            ..PartialConfig::default()
        },
    };
    resolve_partial(partial, seed_override)
}

fn resolve_partial(partial: PartialConfig, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match (&partial.preset, partial.kind) {
        (Some(name), _) => {
            let mut cfg = preset(name)?;
            if let Some(kind) = partial.kind {
                if kind != cfg.kind {
                    bail!(
                        "config kind contradicts preset '{name}' (preset is for {:?})",
                        cfg.kind
                    );
                }
            }
            // A variant override may also change the default schedule when
            // the preset family keys the schedule off the trainer.
            if let Some(variant) = partial.model.variant {
                if name == "lds-refh" || name == "lds-trbm-rtrbm" {
                    cfg.schedule = default_schedule(cfg.kind, variant);
                }
                cfg.model.variant = variant;
            }
            cfg
        }
        (None, Some(kind)) => {
            let variant = partial.model.variant.unwrap_or(ModelVariant::Refh);
            default_config(kind, variant)?
        }
        (None, None) => bail!("config needs a 'preset' or a 'kind' entry"),
    };

    if let Some(seed) = partial.seed {
        cfg.seed = seed;
    }
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    if let Some(hidden) = partial.model.hidden {
        cfg.model.hidden = hidden;
    }
    if let Some(scale) = partial.model.init_scale {
        cfg.model.init_scale = scale;
    }
    if let Some(ring) = partial.ring {
        cfg.ring = ring;
    }
    if let Some(balls) = partial.balls {
        cfg.balls = balls;
    }
    if let Some(n) = partial.data.n_trajectories {
        cfg.data.n_trajectories = n;
    }
    if let Some(t) = partial.data.traj_len {
        cfg.data.traj_len = t;
    }
    if let Some(v) = partial.baselines.em_iters {
        cfg.baselines.em_iters = v;
    }
    if let Some(v) = partial.baselines.em_restarts {
        cfg.baselines.em_restarts = v;
    }
    if let Some(v) = partial.predict.n_gibbs {
        cfg.predict.n_gibbs = v;
    }
    if let Some(v) = partial.predict.average_last {
        cfg.predict.average_last = v;
    }

    let t = &partial.train;
    if let Some(v) = t.epochs {
        cfg.schedule.epochs = v;
    }
    if let Some(v) = t.cd_steps {
        cfg.schedule.cd_steps = v;
    }
    if let Some(v) = t.weight_decay {
        cfg.schedule.weight_decay = v;
    }
    if let Some(v) = t.batch_trajectories {
        cfg.schedule.batch.n_trajectories = v;
    }
    if let Some(v) = t.batch_len {
        cfg.schedule.batch.traj_len = v;
    }
    if let Some(v) = t.renewal_period {
        cfg.schedule.batch.renewal_period_epochs = v;
    }
    match (t.minibatch_count, t.minibatch_steps) {
        (Some(_), Some(_)) => {
            bail!("set only one of train.minibatch_count and train.minibatch_steps")
        }
        (Some(count), None) => {
            cfg.schedule.minibatch = MinibatchScheme::AcrossTrajectories { count };
        }
        (None, Some(steps)) => {
            cfg.schedule.minibatch = MinibatchScheme::Contiguous { time_steps: steps };
        }
        (None, None) => {}
    }
    match (t.pretrain_batches, t.pretrain_cd) {
        (Some(0), _) => cfg.schedule.pretrain = None,
        (nb, cd) => {
            if nb.is_some() || cd.is_some() {
                let current = cfg.schedule.pretrain.unwrap_or(PretrainSpec {
                    n_batches: 0,
                    cd_steps: 1,
                });
                let spec = PretrainSpec {
                    n_batches: nb.unwrap_or(current.n_batches),
                    cd_steps: cd.unwrap_or(current.cd_steps),
                };
                cfg.schedule.pretrain = (spec.n_batches > 0).then_some(spec);
            }
        }
    }

    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Cross-field checks beyond what the library validates at use time.
    pub fn validate(&self) -> Result<()> {
        if self.model.hidden == 0 {
            bail!("model.hidden must be at least 1");
        }
        if !(self.model.init_scale.is_finite() && self.model.init_scale >= 0.0) {
            bail!("model.init_scale must be a non-negative finite number");
        }
        if self.data.n_trajectories == 0 || self.data.traj_len == 0 {
            bail!("data.n_trajectories and data.traj_len must be at least 1");
        }
        match self.kind {
            TaskKind::Ring => {
                self.ring.world.validate()?;
                self.ring.codec.validate()?;
                if (self.ring.world.length - self.ring.codec.length).abs() > 1e-12 {
                    bail!("ring.world.length and ring.codec.length must agree");
                }
            }
            TaskKind::Balls => {
                self.balls.world.validate()?;
            }
        }
        if self.model.variant == ModelVariant::Rtrbm
            && !matches!(self.schedule.minibatch, MinibatchScheme::Contiguous { .. })
        {
            bail!("the rtrbm variant requires contiguous-segment minibatches (train.minibatch_steps)");
        }
        if self.schedule.epochs > 0 {
            self.schedule.validate()?;
        }
        if self.baselines.em_iters == 0 || self.baselines.em_restarts == 0 {
            bail!("baselines.em_iters and baselines.em_restarts must be at least 1");
        }
        Ok(())
    }

    /// Observation-layer description for this task.
    pub fn obs_spec(&self) -> LayerSpec {
        match self.kind {
            TaskKind::Ring => LayerSpec::poisson(self.ring.codec.n_units),
            TaskKind::Balls => {
                let px = self.balls.world.frame_size * self.balls.world.frame_size;
                LayerSpec::bernoulli(px)
            }
        }
    }

    /// Draw the initial model parameters for this experiment.
    pub fn init_params(&self) -> Result<HarmoniumParams> {
        let mut rng = stream(self.seed, &[TAG_MODEL_INIT]);
        Ok(HarmoniumParams::init(
            self.obs_spec(),
            LayerSpec::bernoulli(self.model.hidden),
            LayerSpec::bernoulli(self.model.hidden),
            self.model.init_scale,
            &mut rng,
        )?)
    }

    /// The generative training source for this experiment.
    pub fn train_source(&self) -> Box<dyn TrajectorySource> {
        match self.kind {
            TaskKind::Ring => Box::new(LdsSource {
                world: self.ring.world.clone(),
                codec: self.ring.codec.clone(),
                seed: self.seed,
            }),
            TaskKind::Balls => Box::new(BounceSource {
                world: self.balls.world.clone(),
                seed: self.seed,
            }),
        }
    }

    /// Deterministic TOML echo of the resolved configuration.
    pub fn resolved_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
