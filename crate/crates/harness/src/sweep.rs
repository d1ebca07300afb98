//! Grid search over planner hyperparameters.

use refplan::{Agent, PlannerConfig, PlannerKind};
use serde::{Deserialize, Serialize};

use crate::config::{compare_points, ExperimentConfig};
use crate::error::Result;
use crate::eval::{evaluate_agent, load_checked_agent, EvalSetting};
use crate::metrics::MetricsRecord;
use crate::stats::mean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepWinner {
    pub planner: PlannerKind,
    pub config: PlannerConfig,
    pub mean_normalized_score: f64,
    pub points_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<MetricsRecord>,
    pub winners: Vec<SweepWinner>,
}

/// Best grid point for `kind` by mean normalized score; ties go to the
/// lexicographically smallest hyperparameter tuple.
pub fn select_best(
    records: &[MetricsRecord],
    kind: PlannerKind,
    points: &[PlannerConfig],
) -> Option<(PlannerConfig, f64)> {
    let mut sorted = points.to_vec();
    sorted.sort_by(compare_points);
    let mut best: Option<(PlannerConfig, f64)> = None;
    for p in sorted {
        let scores: Vec<f64> = records
            .iter()
            .filter(|r| r.planner == kind && compare_points(&r.planner_config(p.gamma, p.latent_scale), &p).is_eq())
            .map(|r| r.normalized_score)
            .collect();
        if scores.is_empty() {
            continue;
        }
        let m = mean(&scores);
        if best.as_ref().is_none_or(|(_, b)| m > *b) {
            best = Some((p, m));
        }
    }
    best
}

pub fn sweep_with_agent(config: &ExperimentConfig, agent: &Agent) -> Result<SweepOutcome> {
    let setting = EvalSetting::new(config, config.eval.mode)?;
    let points = config.planner.points();
    let e = &config.eval;
    let records = evaluate_agent(agent, &setting, &e.kinds, &points, &e.seeds, e.episodes, e.workers)?;
    let winners = e
        .kinds
        .iter()
        .filter_map(|&kind| {
            select_best(&records, kind, &points).map(|(config, score)| SweepWinner {
                planner: kind,
                config,
                mean_normalized_score: score,
                points_evaluated: points.len(),
            })
        })
        .collect();
    Ok(SweepOutcome { records, winners })
}

pub fn cmd_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    config.validate()?;
    sweep_with_agent(config, &load_checked_agent(config)?)
}
