//! Deterministic, resumable training.
//!
//! All randomness is keyed by `(seed, step)` or `(seed, epoch)`, so a run
//! resumed from a checkpoint replays exactly what an uninterrupted run does.

mod config;
mod optim;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    read_checkpoint, write_checkpoint, ArrayData, Backbone, BackboneConfig, Checkpoint, NamedArray,
    EMA_PREFIX,
};
use crate::diffusion::{build_items, loss_and_grad, LossOptions, LossScope, Model, Objective};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::CounterRng;
use crate::schedule::NoiseSchedule;
use crate::voxel::{extract_sequence, read_dataset, Dataset, TokenSequence, Vocabulary};

pub use config::{ModelSettings, TrainConfig};
pub use optim::{ema_update, optimizer_step, AdamHyper, OptimizerState, UpdateInfo};

const OPT_M: &str = "opt/m/";
const OPT_V: &str = "opt/v/";
const STATE: &str = "train/state";
const VOCAB: &str = "vocab/blocks";
const EPS_MIN: &str = "schedule/eps_min";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// A model restored from a checkpoint with everything needed to use it.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub vocab: Vocabulary,
    pub schedule: NoiseSchedule,
}

impl TrainedModel {
    pub fn is_autoregressive(&self) -> bool {
        self.model.backbone.config().causal
    }
}

/// Rebuild a model from a checkpoint, preferring the EMA weights when
/// `ema` is set and they are present.
pub fn load_trained(ck: &Checkpoint, ema: bool) -> Result<TrainedModel> {
    let backbone = Backbone::new(ck.config.clone())?;
    let prefix = if ema && ck.has_prefix(EMA_PREFIX) { EMA_PREFIX } else { "" };
    let params = ck.gather_flat(prefix, &backbone)?;
    let blocks = ck
        .get_u64(VOCAB)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {VOCAB}")))?;
    let vocab = Vocabulary::new(
        blocks
            .iter()
            .map(|&b| u8::try_from(b).map_err(|_| Error::Format(format!("block id {b}"))))
            .collect::<Result<_>>()?,
    )?;
    let schedule = match ck.get(EPS_MIN).map(|a| &a.data) {
        Some(ArrayData::F64(v)) if v.len() == 1 => NoiseSchedule::new(v[0])?,
        _ => return Err(Error::Format(format!("checkpoint lacks {EPS_MIN}"))),
    };
    if vocab.total() != backbone.config().vocab_total {
        return Err(Error::Format("vocabulary does not match the model".into()));
    }
    Ok(TrainedModel { model: Model::new(backbone, params)?, vocab, schedule })
}

pub fn read_trained(path: &Path, ema: bool) -> Result<TrainedModel> {
    load_trained(&read_checkpoint(path)?, ema)
}

pub fn backbone_config(cfg: &TrainConfig, seq_len: usize, vocab_total: usize, dim: u32) -> BackboneConfig {
    let m = &cfg.model;
    BackboneConfig {
        depth: m.depth,
        heads: m.heads,
        width: m.width,
        seq_len,
        vocab_total,
        dim,
        pe_mode: m.pe_mode,
        learned_key: m.learned_key,
        time_conditioning: cfg.time_conditioned(),
        causal: cfg.objective == Objective::Autoregressive,
        ffn_mult: m.ffn_mult,
    }
}

pub fn dataset_sequences(data: &Dataset) -> Result<Vec<TokenSequence>> {
    data.grids
        .iter()
        .map(|g| extract_sequence(g, data.seq_len, &data.vocab))
        .collect()
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    ema: Vec<f64>,
    opt: OptimizerState,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    data: Vec<TokenSequence>,
    perm: Option<(u64, Vec<usize>)>,
    exec: Execution,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: &Dataset, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        let data = dataset_sequences(dataset)?;
        if data.is_empty() {
            return Err(Error::Empty("training dataset"));
        }
        let backbone = Backbone::new(backbone_config(&cfg, dataset.seq_len, dataset.vocab.total(), dataset.dim))?;
        let mut rng = ChaCha8Rng::seed_from_u64(CounterRng::new(cfg.seed).bits(u64::MAX, 0, 0));
        let params = backbone.init(&mut rng);
        let ema = params.clone();
        let opt = OptimizerState::new(params.len());
        Ok(Self {
            schedule: NoiseSchedule::new(cfg.eps_min)?,
            model: Model::new(backbone, params)?,
            ema,
            opt,
            vocab: dataset.vocab.clone(),
            data,
            perm: None,
            exec,
            cfg,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, dataset: &Dataset, ck: &Checkpoint, exec: Execution) -> Result<Self> {
        let mut t = Self::new(cfg, dataset, exec)?;
        if &ck.config != t.model.backbone.config() {
            return Err(Error::Config("checkpoint model differs from the configured one".into()));
        }
        let state = ck
            .get_u64(STATE)
            .filter(|s| s.len() == 2)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {STATE}")))?;
        if state[1] != t.cfg.seed {
            return Err(Error::Config(format!("checkpoint seed {} differs from train.seed {}", state[1], t.cfg.seed)));
        }
        let bb = &t.model.backbone;
        t.model.params = ck.gather_flat("", bb)?;
        t.ema = ck.gather_flat(EMA_PREFIX, bb)?;
        t.opt = OptimizerState { m: ck.gather_flat(OPT_M, bb)?, v: ck.gather_flat(OPT_V, bb)?, step: state[0] };
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// The EMA shadow as a usable model.
    pub fn ema_model(&self) -> Model {
        Model { backbone: self.model.backbone.clone(), params: self.ema.clone() }
    }

    fn epoch_perm(&mut self, epoch: u64) -> &[usize] {
        if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(CounterRng::new(self.cfg.seed).bits(epoch, 0, 1));
            idx.shuffle(&mut rng);
            self.perm = Some((epoch, idx));
        }
        &self.perm.as_ref().expect("set above").1
    }

    /// Sequences used by update number `step` (1-based).
    fn batch_for(&mut self, step: u64) -> Vec<TokenSequence> {
        let n = self.data.len() as u64;
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|j| {
                let p = (step - 1) * b + j;
                let i = self.epoch_perm(p / n)[(p % n) as usize];
                self.data[i].clone()
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.opt.step + 1;
        let batch = self.batch_for(step);
        let mut rng = CounterRng::new(self.cfg.seed).stream(step, 0);
        let opts = LossOptions {
            t_min: self.cfg.t_min,
            antithetic: self.cfg.antithetic,
            per_token_time: self.cfg.per_token_time,
            scope: LossScope::AllSlots,
        };
        let v = self.model.backbone.config().vocab_total;
        let items = build_items(self.cfg.objective, &batch, v, &self.schedule, &opts, &mut rng)?;
        let (loss, grads) = loss_and_grad(&self.model, &items, &batch, self.exec, self.cfg.shard_size)?;
        if !loss.is_finite() {
            return Err(Error::Numeric { layer: "loss".into() });
        }
        let bb = &self.model.backbone;
        let info = optimizer_step(&mut self.model.params, &grads, &mut self.opt, &self.cfg.adam, &|i| {
            bb.param_name(i).to_string()
        })?;
        ema_update(&mut self.ema, &self.model.params, self.cfg.ema_decay);
        Ok(StepRecord { step, loss, lr: info.lr, grad_norm: info.grad_norm })
    }

    /// Parameters, EMA, optimizer moments, progress and metadata.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let bb = &self.model.backbone;
        let mut ck = Checkpoint::from_model(bb, &self.model.params, Some(&self.ema))?;
        ck.push_flat(OPT_M, bb, &self.opt.m)?;
        ck.push_flat(OPT_V, bb, &self.opt.v)?;
        ck.push_u64(STATE, vec![self.opt.step, self.cfg.seed]);
        ck.push_u64(VOCAB, self.vocab.blocks().iter().map(|&b| b as u64).collect());
        ck.arrays.push(NamedArray {
            name: EPS_MIN.into(),
            shape: vec![1],
            data: ArrayData::F64(vec![self.schedule.eps_min()]),
        });
        Ok(ck)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    /// Records produced by this invocation.
    pub curve: Vec<StepRecord>,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.sckp";

fn csv_line(r: &StepRecord) -> String {
    format!("{},{:e},{:e},{:e}\n", r.step, r.loss, r.lr, r.grad_norm)
}

/// Keep the header and rows up to `step`, so a resumed run appends cleanly.
fn truncate_csv(path: &Path, step: u64) -> Result<String> {
    let mut kept = String::from("step,loss,lr,grad_norm\n");
    if step == 0 || !path.exists() {
        return Ok(kept);
    }
    let f = File::open(path).map_err(|e| Error::io_path(path, e))?;
    for line in BufReader::new(f).lines().skip(1) {
        let line = line.map_err(|e| Error::io_path(path, e))?;
        match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(s) if s <= step => {
                kept.push_str(&line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    Ok(kept)
}

fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    write_checkpoint(path, &trainer.checkpoint()?).inspect_err(|e| {
        log::warn!(
            "checkpoint write to {} failed at step {}: {e}; earlier checkpoints are intact",
            path.display(),
            trainer.step_count()
        )
    })
}

/// Train from `cfg.data_dir` into `cfg.out_dir`, optionally resuming.
pub fn run(cfg: &TrainConfig, resume: Option<&Path>, exec: Execution) -> Result<TrainOutcome> {
    let dataset = read_dataset(&cfg.data_dir)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io_path(&cfg.out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), &dataset, &read_checkpoint(p)?, exec)?,
        None => Trainer::new(cfg.clone(), &dataset, exec)?,
    };
    let csv_path = cfg.out_dir.join(LOSS_CSV);
    let head = truncate_csv(&csv_path, trainer.step_count())?;
    let f = File::create(&csv_path).map_err(|e| Error::io_path(&csv_path, e))?;
    let mut csv = BufWriter::new(f);
    csv.write_all(head.as_bytes()).map_err(|e| Error::io_path(&csv_path, e))?;
    log::info!(
        "training {} parameters on {} structures from step {}",
        trainer.model().backbone.num_params(),
        dataset.grids.len(),
        trainer.step_count()
    );
    let mut curve = Vec::new();
    while trainer.step_count() < cfg.max_steps {
        let rec = trainer.step()?;
        csv.write_all(csv_line(&rec).as_bytes()).map_err(|e| Error::io_path(&csv_path, e))?;
        if rec.step % 100 == 0 {
            log::info!("step {} loss {:.4} lr {:.2e} |g| {:.3}", rec.step, rec.loss, rec.lr, rec.grad_norm);
        }
        curve.push(rec);
        if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 {
            csv.flush().map_err(|e| Error::io_path(&csv_path, e))?;
            save(&cfg.out_dir.join(format!("ckpt-{:08}.sckp", rec.step)), &trainer)?;
        }
    }
    csv.flush().map_err(|e| Error::io_path(&csv_path, e))?;
    let checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    save(&checkpoint, &trainer)?;
    Ok(TrainOutcome { checkpoint, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{write_dataset, Coord, VoxelGrid};

    fn dataset() -> Dataset {
        let grids: Vec<VoxelGrid> = (0..6u16)
            .map(|i| VoxelGrid::from_cells(4, (0..=i % 4).map(|j| (Coord::new(j, i % 2, 1), 1 + (j % 2) as u8))).unwrap())
            .collect();
        Dataset {
            dim: 4,
            seq_len: 6,
            vocab: Vocabulary::from_grids(&grids),
            ids: (0..6).map(|i| i.to_string()).collect(),
            grids,
        }
    }

    fn cfg(dir: &Path) -> TrainConfig {
        let text = "model.depth=1\nmodel.heads=2\nmodel.width=12\ntrain.lr=1e-2\ntrain.warmup_steps=3\n\
                    train.max_steps=10\ntrain.batch_size=4\ntrain.shard_size=2\ntrain.ema_decay=0.9\n\
                    train.checkpoint_every=4\ndata.dir=data\ntrain.out_dir=out\n";
        TrainConfig::parse_str(text, dir).unwrap()
    }

    #[test]
    fn resume_replays_the_same_curve() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dir.path().join("data"), &dataset()).unwrap();
        let c = cfg(dir.path());
        let full = run(&c, None, Execution::Parallel).unwrap();
        let full_ck = read_checkpoint(&full.checkpoint).unwrap();
        let resumed = run(&c, Some(&c.out_dir.join("ckpt-00000004.sckp")), Execution::Sequential).unwrap();
        assert_eq!(resumed.curve, full.curve[4..].to_vec());
        assert_eq!(read_checkpoint(&resumed.checkpoint).unwrap(), full_ck);
        let csv = fs::read_to_string(c.out_dir.join(LOSS_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.starts_with("step,loss,lr,grad_norm\n1,"));
    }

    #[test]
    fn checkpoint_restores_a_usable_model() {
        let t = Trainer::new(cfg(Path::new(".")), &dataset(), Execution::Sequential).unwrap();
        let back = load_trained(&t.checkpoint().unwrap(), true).unwrap();
        assert_eq!(back.vocab, dataset().vocab);
        assert_eq!(back.model.params, t.ema_model().params);
        assert!(!back.is_autoregressive());
    }

    #[test]
    fn loss_decreases_on_a_tiny_set() {
        let mut c = cfg(Path::new("."));
        c.max_steps = 60;
        let mut t = Trainer::new(c, &dataset(), Execution::Parallel).unwrap();
        let curve: Vec<f64> = (0..60).map(|_| t.step().unwrap().loss).collect();
        let head: f64 = curve[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = curve[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn learned_rows_of_unvisited_positions_get_no_gradient() {
        let mut c = cfg(Path::new("."));
        c.model.pe_mode = crate::backbone::PeMode::Learned;
        let t = Trainer::new(c, &dataset(), Execution::Sequential).unwrap();
        let batch = t.data.clone();
        let items = build_items(Objective::Continuous, &batch, t.vocab.total(), &t.schedule, &LossOptions { t_min: 0.5, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, g) = loss_and_grad(&t.model, &items, &batch, Execution::Sequential, 2).unwrap();
        let spec = t.model.backbone.spec("pos_table").unwrap();
        let w = spec.shape[1];
        let visited: std::collections::BTreeSet<usize> =
            batch.iter().flat_map(|s| s.positions.iter().flatten().map(|c| c.flat_index(4))).collect();
        let rows = spec.shape[0];
        for r in 0..rows {
            let row = &g[spec.offset + r * w..spec.offset + (r + 1) * w];
            if !visited.contains(&r) && r != rows - 1 {
                assert!(row.iter().all(|&x| x == 0.0), "row {r}");
            }
        }
    }
}
