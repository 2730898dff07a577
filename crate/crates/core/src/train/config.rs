//! Flat `section.key=value` configuration files.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{LearnedKey, PeMode};
use crate::diffusion::{LossScope, Objective};
use crate::error::{Error, Result};
use crate::schedule::DEFAULT_EPS_MIN;

use super::optim::AdamHyper;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_mult: usize,
    pub pe_mode: PeMode,
    pub learned_key: LearnedKey,
    pub time_conditioning: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            depth: 12,
            heads: 12,
            width: 768,
            ffn_mult: 4,
            pe_mode: PeMode::Sinusoidal3d,
            learned_key: LearnedKey::Voxel,
            time_conditioning: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSettings,
    pub eps_min: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub objective: Objective,
    pub adam: AdamHyper,
    pub max_steps: u64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub seed: u64,
    pub t_min: f64,
    pub antithetic: bool,
    pub per_token_time: bool,
    /// Sequences per gradient shard. Fixed so results ignore thread count.
    pub shard_size: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub sample_steps: usize,
    pub mc_draws: usize,
    pub eval_scope: LossScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSettings::default(),
            eps_min: DEFAULT_EPS_MIN,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            objective: Objective::Continuous,
            adam: AdamHyper::default(),
            max_steps: 20_000,
            batch_size: 32,
            ema_decay: 0.9999,
            seed: 0,
            t_min: crate::diffusion::DEFAULT_T_MIN,
            antithetic: false,
            per_token_time: false,
            shard_size: 4,
            checkpoint_every: 1000,
            sample_steps: 256,
            mc_draws: 8,
            eval_scope: LossScope::AllSlots,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Parse config text. Relative paths resolve against `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        let mut discrete_steps = 1000;
        let mut objective = "continuous".to_string();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "model.depth" => c.model.depth = parse(key, value)?,
                "model.heads" => c.model.heads = parse(key, value)?,
                "model.width" => c.model.width = parse(key, value)?,
                "model.ffn_mult" => c.model.ffn_mult = parse(key, value)?,
                "model.pe" => {
                    c.model.pe_mode = match value {
                        "sinusoidal" | "sinusoidal_3d" => PeMode::Sinusoidal3d,
                        "learned" => PeMode::Learned,
                        _ => return Err(Error::Config(format!("{key}: unknown mode {value:?}"))),
                    }
                }
                "model.learned_key" => {
                    c.model.learned_key = match value {
                        "voxel" => LearnedKey::Voxel,
                        "slot" => LearnedKey::Slot,
                        _ => return Err(Error::Config(format!("{key}: unknown key {value:?}"))),
                    }
                }
                "model.time_conditioning" => c.model.time_conditioning = parse(key, value)?,
                "schedule.eps_min" => c.eps_min = parse(key, value)?,
                "data.dir" => c.data_dir = base.join(value),
                "train.out_dir" => c.out_dir = base.join(value),
                "train.objective" => objective = value.to_string(),
                "train.discrete_steps" => discrete_steps = parse(key, value)?,
                "train.lr" => c.adam.lr = parse(key, value)?,
                "train.beta1" => c.adam.beta1 = parse(key, value)?,
                "train.beta2" => c.adam.beta2 = parse(key, value)?,
                "train.adam_eps" => c.adam.eps = parse(key, value)?,
                "train.weight_decay" => c.adam.weight_decay = parse(key, value)?,
                "train.warmup_steps" => c.adam.warmup_steps = parse(key, value)?,
                "train.grad_clip" => {
                    let v: f64 = parse(key, value)?;
                    c.adam.clip = (v > 0.0).then_some(v);
                }
                "train.max_steps" => c.max_steps = parse(key, value)?,
                "train.batch_size" => c.batch_size = parse(key, value)?,
                "train.ema_decay" => c.ema_decay = parse(key, value)?,
                "train.seed" => c.seed = parse(key, value)?,
                "train.t_min" => c.t_min = parse(key, value)?,
                "train.antithetic" => c.antithetic = parse(key, value)?,
                "train.per_token_time" => c.per_token_time = parse(key, value)?,
                "train.shard_size" => c.shard_size = parse(key, value)?,
                "train.checkpoint_every" => c.checkpoint_every = parse(key, value)?,
                "sample.steps" => c.sample_steps = parse(key, value)?,
                "eval.mc_draws" => c.mc_draws = parse(key, value)?,
                "eval.scope" => {
                    c.eval_scope = match value {
                        "all" => LossScope::AllSlots,
                        "active" => LossScope::ActiveSlots,
                        _ => return Err(Error::Config(format!("{key}: unknown scope {value:?}"))),
                    }
                }
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        c.objective = match objective.as_str() {
            "continuous" => Objective::Continuous,
            "discrete" => Objective::Discrete { steps: discrete_steps },
            "autoregressive" | "ar" => Objective::Autoregressive,
            other => return Err(Error::Config(format!("train.objective: unknown {other:?}"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_path(path, e))?;
        Self::parse_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.adam.warmup_steps > self.max_steps {
            return bad("train.warmup_steps exceeds train.max_steps");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("train.ema_decay must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.shard_size == 0 {
            return bad("train.batch_size and train.shard_size must be positive");
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return bad("train.lr must be positive");
        }
        if self.mc_draws == 0 {
            return bad("eval.mc_draws must be at least 1");
        }
        if self.sample_steps == 0 {
            return bad("sample.steps must be at least 1");
        }
        if !(0.0..1.0).contains(&self.t_min) {
            return bad("train.t_min must lie in [0, 1)");
        }
        if let Objective::Discrete { steps: 0 } = self.objective {
            return bad("train.discrete_steps must be at least 1");
        }
        if self.per_token_time && self.time_conditioned() {
            return bad("train.per_token_time needs model.time_conditioning=false");
        }
        Ok(())
    }

    /// Next-token models never see `t`.
    pub fn time_conditioned(&self) -> bool {
        self.model.time_conditioning && self.objective != Objective::Autoregressive
    }
}
