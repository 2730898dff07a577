//! Likelihood evaluation, category statistics and batch generation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::diffusion::{
    loss_autoregressive, loss_continuous, sample, sample_autoregressive, write_trace_ndjson,
    LossOptions, LossScope, SampleOptions,
};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::CounterRng;
use crate::train::TrainedModel;
use crate::voxel::{write_voxels_binary, write_voxels_json, OccupancyMap, TokenSequence, VoxelGrid};

pub const DEFAULT_MC_DRAWS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean nats per token.
    pub nll: f64,
    pub perplexity: f64,
    /// Standard error of `nll` across structures.
    pub std_error: f64,
    pub structures: usize,
    /// Tokens counted by the chosen scope.
    pub tokens: usize,
    pub scope: &'static str,
    pub mc_draws: usize,
    pub seed: u64,
}

fn scope_name(scope: LossScope) -> &'static str {
    match scope {
        LossScope::AllSlots => "all",
        LossScope::ActiveSlots => "active",
    }
}

/// Held-out NLL. Diffusion models average the continuous-time estimator
/// over `mc_draws` corruptions per structure; next-token models are exact.
pub fn evaluate_nll(
    batch: &[TokenSequence],
    model: &TrainedModel,
    mc_draws: usize,
    scope: LossScope,
    seed: u64,
    exec: Execution,
) -> Result<EvalReport> {
    if batch.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    if mc_draws == 0 {
        return Err(Error::domain("mc_draws must be at least 1"));
    }
    let per_seq: Vec<f64> = if model.is_autoregressive() {
        loss_autoregressive(batch, &model.model, scope, exec)?.per_item
    } else {
        let opts = LossOptions { scope, ..Default::default() };
        let mut sums = vec![0.0; batch.len()];
        for d in 0..mc_draws {
            let mut rng = CounterRng::new(seed).stream(d as u64, 0);
            let est = loss_continuous(batch, &model.model, &model.schedule, &opts, &mut rng, exec)?;
            sums.iter_mut().zip(&est.per_item).for_each(|(s, v)| *s += v);
        }
        sums.into_iter().map(|s| s / mc_draws as f64).collect()
    };
    let n = per_seq.len() as f64;
    let nll = per_seq.iter().sum::<f64>() / n;
    if !nll.is_finite() {
        return Err(Error::Numeric { layer: "evaluation".into() });
    }
    let var = if per_seq.len() > 1 {
        per_seq.iter().map(|v| (v - nll).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let tokens = match scope {
        LossScope::AllSlots => batch.iter().map(|s| s.len()).sum(),
        LossScope::ActiveSlots => batch.iter().map(|s| s.k).sum(),
    };
    Ok(EvalReport {
        nll,
        perplexity: nll.exp(),
        std_error: (var / n).sqrt(),
        structures: batch.len(),
        tokens,
        scope: scope_name(scope),
        mc_draws: if model.is_autoregressive() { 1 } else { mc_draws },
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryHistogram {
    /// Voxel count per block id.
    pub counts: BTreeMap<u8, u64>,
    pub total: u64,
    /// Mean over non-empty structures of the share held by that
    /// structure's three most frequent block ids.
    pub collapse_score: f64,
    /// Top-3 share of the pooled counts.
    pub pooled_top3: f64,
}

impl CategoryHistogram {
    pub fn frequency(&self, block: u8) -> f64 {
        self.counts.get(&block).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

fn top3_share(counts: &BTreeMap<u8, u64>) -> f64 {
    let total: u64 = counts.values().sum();
    let mut v: Vec<u64> = counts.values().copied().collect();
    v.sort_unstable_by(|a, b| b.cmp(a));
    v.iter().take(3).sum::<u64>() as f64 / total as f64
}

pub fn category_histogram(structures: &[VoxelGrid]) -> Result<CategoryHistogram> {
    let mut pooled = BTreeMap::new();
    let mut shares = Vec::new();
    for g in structures.iter().filter(|g| !g.is_empty()) {
        let mut local = BTreeMap::new();
        for (_, b) in g.cells() {
            *local.entry(b).or_insert(0u64) += 1;
            *pooled.entry(b).or_insert(0u64) += 1;
        }
        shares.push(top3_share(&local));
    }
    if shares.is_empty() {
        return Err(Error::Empty("structures for a category histogram"));
    }
    Ok(CategoryHistogram {
        total: pooled.values().sum(),
        pooled_top3: top3_share(&pooled),
        collapse_score: shares.iter().sum::<f64>() / shares.len() as f64,
        counts: pooled,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExportFormats {
    pub json: bool,
    pub binary: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub steps: usize,
    pub cached: bool,
    pub autoregressive: bool,
    pub temperature: f64,
    pub trace: bool,
    pub formats: ExportFormats,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            steps: crate::diffusion::DEFAULT_SAMPLE_STEPS,
            cached: true,
            autoregressive: false,
            temperature: 1.0,
            trace: false,
            formats: ExportFormats { json: true, binary: false },
        }
    }
}

#[derive(Debug)]
pub struct Generated {
    pub label: String,
    pub seed: u64,
    pub result: Result<(VoxelGrid, Vec<PathBuf>)>,
}

/// `"{label}_seed{seed}_steps{steps}"`, with `ar` in place of the step
/// count for next-token sampling.
pub fn output_stem(label: &str, seed: u64, opts: &GenerateOptions) -> String {
    if opts.autoregressive {
        format!("{label}_seed{seed}_ar")
    } else {
        format!("{label}_seed{seed}_steps{}", opts.steps)
    }
}

fn generate_one(
    model: &TrainedModel,
    label: &str,
    occ: &OccupancyMap,
    seed: u64,
    opts: &GenerateOptions,
    out_dir: &Path,
) -> Result<(VoxelGrid, Vec<PathBuf>)> {
    let stem = output_stem(label, seed, opts);
    let path = |ext: &str| out_dir.join(format!("{stem}.{ext}"));
    let mut files = Vec::new();
    let grid = if opts.autoregressive {
        sample_autoregressive(occ, &model.model, &model.vocab, seed, opts.temperature)?.0
    } else {
        let so = SampleOptions { steps: opts.steps, seed, cached: opts.cached };
        let out = sample(occ, &model.model, &model.vocab, &model.schedule, &so)?;
        if opts.trace {
            let p = path("trace.ndjson");
            let f = File::create(&p).map_err(|e| Error::io_path(&p, e))?;
            write_trace_ndjson(&out.trace, model.vocab.total(), BufWriter::new(f))?;
            files.push(p);
        }
        out.grid
    };
    if opts.formats.json {
        let p = path("json");
        let f = File::create(&p).map_err(|e| Error::io_path(&p, e))?;
        write_voxels_json(&grid, BufWriter::new(f))?;
        files.push(p);
    }
    if opts.formats.binary {
        let p = path("scfd");
        let f = File::create(&p).map_err(|e| Error::io_path(&p, e))?;
        write_voxels_binary(&grid, BufWriter::new(f))?;
        files.push(p);
    }
    Ok((grid, files))
}

/// Sample every `(occupancy, seed)` pair and export the results. Failures
/// are reported per item and do not stop the batch.
pub fn generate_batch(
    model: &TrainedModel,
    occupancies: &[(String, OccupancyMap)],
    seeds: &[u64],
    opts: &GenerateOptions,
    out_dir: &Path,
    exec: Execution,
) -> Result<Vec<Generated>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io_path(out_dir, e))?;
    let jobs: Vec<(&str, &OccupancyMap, u64)> = occupancies
        .iter()
        .flat_map(|(l, o)| seeds.iter().map(move |&s| (l.as_str(), o, s)))
        .collect();
    Ok(par::map(exec, &jobs, |_, &(label, occ, seed)| Generated {
        label: label.to_string(),
        seed,
        result: generate_one(model, label, occ, seed, opts, out_dir),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::Coord;

    fn grid(blocks: &[u8]) -> VoxelGrid {
        VoxelGrid::from_cells(16, blocks.iter().enumerate().map(|(i, &b)| (Coord::new(i as u16 % 16, i as u16 / 16, 0), b))).unwrap()
    }

    #[test]
    fn collapse_score_oracles() {
        assert_eq!(category_histogram(&[grid(&[7; 12])]).unwrap().collapse_score, 1.0);
        let ten: Vec<u8> = (0..100).map(|i| 1 + (i % 10) as u8).collect();
        let h = category_histogram(&[grid(&ten)]).unwrap();
        assert!((h.collapse_score - 0.3).abs() < 1e-12);
        assert!((h.frequency(3) - 0.1).abs() < 1e-12);
        assert!(category_histogram(&[VoxelGrid::new(4)]).is_err());
    }

    #[test]
    fn stems_embed_seed_and_steps() {
        let o = GenerateOptions { steps: 64, ..Default::default() };
        assert_eq!(output_stem("occ", 3, &o), "occ_seed3_steps64");
        assert_eq!(output_stem("occ", 3, &GenerateOptions { autoregressive: true, ..o }), "occ_seed3_ar");
    }
}
