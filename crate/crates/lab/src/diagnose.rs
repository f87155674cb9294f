//! Engine-mismatch diagnosis: sample under the inference profile, rescore
//! under the training profile with and without replayed masks, and repeat
//! the training forward to measure its own run-to-run spread.

use std::path::{Path, PathBuf};

use r3_core::diagnostics::{
    extreme_fraction, kl_k3, records_for_sequence, repeated_forward_probe, routing_diff_corpus, scatter_csv, DiffLevel,
    DiffStats, TauCurve, TokenProbRecord, TAU_GRID,
};
use r3_core::model::{forward_logprobs, ForwardOptions, PolicyParams, Rollout, RoutingTrace};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::io;
use crate::policy::{prepare_policy, sample_group};
use crate::task::SortTask;

const DIAGNOSE_SEED_STREAM: u64 = 0x6469_6167;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauCurves {
    pub no_replay: TauCurve,
    pub replay: TauCurve,
    pub repeated: TauCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub no_replay: Vec<DiffStats>,
    pub replay: Vec<DiffStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseSummary {
    pub rollouts: usize,
    pub response_tokens: usize,
    pub inference_profile: String,
    pub training_profile: String,
    pub kl_no_replay: f64,
    pub kl_replay: f64,
    pub kl_repeated: f64,
    pub f_tau2_no_replay: f64,
    pub f_tau2_replay: f64,
    pub f_tau2_repeated: f64,
    pub router_diff_no_replay: f64,
    pub router_diff_replay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseReport {
    pub summary: DiagnoseSummary,
    pub tau: TauCurves,
    pub diffs: DiffReport,
    pub output_dir: PathBuf,
}

fn all_levels(pairs: &[(&RoutingTrace, &RoutingTrace)]) -> Result<Vec<DiffStats>> {
    [DiffLevel::Router, DiffLevel::Token, DiffLevel::Sequence]
        .into_iter()
        .map(|l| Ok(routing_diff_corpus(pairs, l)?))
        .collect()
}

fn rescore(
    rollouts: &[Rollout],
    params: &PolicyParams,
    cfg: &ExperimentConfig,
    replay: bool,
) -> Result<(Vec<TokenProbRecord>, Vec<RoutingTrace>)> {
    let mut records = Vec::new();
    let mut traces = Vec::with_capacity(rollouts.len());
    for (i, r) in rollouts.iter().enumerate() {
        let opts = ForwardOptions {
            replay: replay.then_some(&r.trace),
            temperature: r.scoring_temperature(),
            ..Default::default()
        };
        let f = forward_logprobs(&r.tokens(), r.prompt.len(), params, &cfg.train_engine, &opts)?;
        records.extend(records_for_sequence(&r.logprobs, &f.logprobs, i)?);
        traces.push(f.trace);
    }
    Ok((records, traces))
}

/// Run the diagnosis and write its artifacts under `cfg.output_dir`.
pub fn run_diagnose(cfg: &ExperimentConfig) -> Result<DiagnoseReport> {
    cfg.validate()?;
    let task = SortTask::new(cfg.task.clone());
    let (params, _) = prepare_policy(cfg, &task)?;
    let dir = &cfg.output_dir;
    io::create_dir(dir)?;

    let mut rollouts = Vec::with_capacity(cfg.diagnose.rollouts);
    let seed = r3_core::rng::hash3(cfg.seed, DIAGNOSE_SEED_STREAM, 0);
    for i in 0..cfg.diagnose.rollouts as u64 {
        let prompt = task.train_prompt(i);
        rollouts.extend(sample_group(&task, &params, &cfg.infer, &prompt, 1, cfg.temperature, seed, i)?);
    }

    let (rec_none, traces_none) = rescore(&rollouts, &params, cfg, false)?;
    let (rec_replay, traces_replay) = rescore(&rollouts, &params, cfg, true)?;
    let probe_seqs: Vec<(Vec<u32>, usize)> = rollouts
        .iter()
        .take(cfg.diagnose.repeat_sequences)
        .map(|r| (r.tokens(), r.prompt.len()))
        .collect();
    let probe = repeated_forward_probe(&params, &cfg.train_engine, &probe_seqs, cfg.diagnose.repeats)?;

    let pairs_none: Vec<_> = rollouts.iter().zip(&traces_none).map(|(r, t)| (&r.trace, t)).collect();
    let pairs_replay: Vec<_> = rollouts.iter().zip(&traces_replay).map(|(r, t)| (&r.trace, t)).collect();
    let diffs = DiffReport {
        no_replay: all_levels(&pairs_none)?,
        replay: all_levels(&pairs_replay)?,
    };
    let tau = TauCurves {
        no_replay: TauCurve::compute(&rec_none, &TAU_GRID)?,
        replay: TauCurve::compute(&rec_replay, &TAU_GRID)?,
        repeated: if probe.records.is_empty() {
            TauCurve {
                points: TAU_GRID.iter().map(|&t| (t, 0.0)).collect(),
            }
        } else {
            TauCurve::compute(&probe.records, &TAU_GRID)?
        },
    };
    let summary = DiagnoseSummary {
        rollouts: rollouts.len(),
        response_tokens: rec_none.len(),
        inference_profile: cfg.infer.name.clone(),
        training_profile: cfg.train_engine.name.clone(),
        kl_no_replay: kl_k3(&rec_none)?,
        kl_replay: kl_k3(&rec_replay)?,
        kl_repeated: probe.kl,
        f_tau2_no_replay: extreme_fraction(&rec_none, 2.0)?,
        f_tau2_replay: extreme_fraction(&rec_replay, 2.0)?,
        f_tau2_repeated: tau.repeated.at(2.0).unwrap_or(0.0),
        router_diff_no_replay: diffs.no_replay[0].nonzero_fraction,
        router_diff_replay: diffs.replay[0].nonzero_fraction,
    };

    io::write_bytes(&dir.join("scatter_no_replay.csv"), scatter_csv(&rec_none).as_bytes())?;
    io::write_bytes(&dir.join("scatter_replay.csv"), scatter_csv(&rec_replay).as_bytes())?;
    io::write_bytes(&dir.join("scatter_repeated.csv"), scatter_csv(&probe.records).as_bytes())?;
    io::write_json(&dir.join("tau_curve.json"), &tau)?;
    io::write_json(&dir.join("diff_stats.json"), &diffs)?;
    io::write_json(&dir.join("summary.json"), &summary)?;
    save_traces(&dir.join("traces"), &rollouts[..cfg.diagnose.save_traces.min(rollouts.len())])?;

    Ok(DiagnoseReport {
        summary,
        tau,
        diffs,
        output_dir: dir.clone(),
    })
}

fn save_traces(dir: &Path, rollouts: &[Rollout]) -> Result<()> {
    if rollouts.is_empty() {
        return Ok(());
    }
    io::create_dir(dir)?;
    for (i, r) in rollouts.iter().enumerate() {
        io::save_trace(&dir.join(format!("rollout_{i:05}.r3mk")), &r.trace)?;
    }
    Ok(())
}
