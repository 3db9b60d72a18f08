//! Hierarchical imputation schedule.
//!
//! Targets are imputed largest-missing-gap first. A gap in
//! `(floor(2^(L-l-1)), 2^(L-l)]` belongs to level `l`, level 0 being the
//! coarsest. After every step the imputed targets become anchors, gaps are
//! updated, and the next step is drawn from whatever level the new maximum
//! gap falls in. Each level is served by its own model except in
//! partial-dimension mode, which uses one shared model.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{count_missing_dims, GapTable, SeriesSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Deterministic,
    Irregular,
    Stochastic,
    PartialDims,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub max_level: u32,
    /// Band width for irregular mode.
    pub band_width: f64,
    /// Gaps above this are imputed one target at a time in stochastic mode.
    pub stochastic_threshold: f64,
    pub mode: ScheduleMode,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            max_level: 4,
            band_width: 1.0,
            stochastic_threshold: 4.0,
            mode: ScheduleMode::Deterministic,
        }
    }
}

impl SchedulerConfig {
    pub fn with_mode(mode: ScheduleMode) -> Self {
        SchedulerConfig {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_level > 30 {
            return Err(Error::Config(format!("max_level {} is too large", self.max_level)));
        }
        if !(self.band_width > 0.0) {
            return Err(Error::Config("band_width must be positive".into()));
        }
        if !(self.stochastic_threshold >= 0.0) {
            return Err(Error::Config("stochastic_threshold must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of distinct models a full run needs.
    pub fn model_count(&self) -> usize {
        match self.mode {
            ScheduleMode::PartialDims => 1,
            _ => self.max_level as usize + 1,
        }
    }

    /// Largest gap any level can serve.
    pub fn capacity(&self) -> f64 {
        2f64.powi(self.max_level as i32)
    }
}

/// Lower (exclusive) and upper (inclusive) gap bounds of `level`.
pub fn level_band(level: u32, max_level: u32) -> (f64, f64) {
    let hi = 2f64.powi((max_level - level) as i32);
    let lo = (2f64.powi(max_level as i32 - level as i32 - 1)).floor();
    (lo, hi)
}

/// The unique level whose band contains `gap`.
pub fn level_of(gap: f64, max_level: u32) -> Result<u32> {
    if !(gap > 0.0) {
        return Err(Error::NonPositiveGap(gap));
    }
    if gap > 2f64.powi(max_level as i32) {
        return Err(Error::GapExceedsCapacity { gap, max_level });
    }
    (0..=max_level)
        .find(|&l| {
            let (lo, hi) = level_band(l, max_level);
            lo < gap && gap <= hi
        })
        .ok_or(Error::NonPositiveGap(gap))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub level: u32,
    /// Ascending.
    pub target_times: Vec<f64>,
    pub model_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SchedulePlan {
    pub steps: Vec<ScheduleStep>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    level: u32,
    targets: Vec<f64>,
    model: usize,
}

impl SchedulePlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// All target times in plan order.
    pub fn all_targets(&self) -> Vec<f64> {
        self.steps
            .iter()
            .flat_map(|s| s.target_times.iter().copied())
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let rec = StepRecord {
                level: s.level,
                targets: s.target_times.clone(),
                model: s.model_id,
            };
            out.push_str(&serde_json::to_string(&rec).expect("plan records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut steps = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StepRecord = serde_json::from_str(&line).map_err(|e| Error::parse(path, e))?;
            steps.push(ScheduleStep {
                level: rec.level,
                target_times: rec.targets,
                model_id: rec.model,
            });
        }
        Ok(SchedulePlan { steps })
    }
}

/// Plans for the configured mode. In partial-dimension mode `targets` must
/// carry per-dimension masks and `observed` only contributes nothing.
pub fn plan(observed: &SeriesSet, targets: &SeriesSet, cfg: &SchedulerConfig) -> Result<SchedulePlan> {
    match cfg.mode {
        ScheduleMode::Deterministic => plan_deterministic(observed, targets, cfg),
        ScheduleMode::Irregular => plan_irregular(observed, targets, cfg),
        ScheduleMode::Stochastic => plan_stochastic(observed, targets, cfg),
        ScheduleMode::PartialDims => plan_partial_dims(targets, cfg),
    }
}

pub fn plan_deterministic(
    observed: &SeriesSet,
    targets: &SeriesSet,
    cfg: &SchedulerConfig,
) -> Result<SchedulePlan> {
    plan_times(&observed.times(), &targets.times(), cfg, Selection::Exact)
}

pub fn plan_irregular(
    observed: &SeriesSet,
    targets: &SeriesSet,
    cfg: &SchedulerConfig,
) -> Result<SchedulePlan> {
    plan_times(
        &observed.times(),
        &targets.times(),
        cfg,
        Selection::Band(cfg.band_width),
    )
}

pub fn plan_stochastic(
    observed: &SeriesSet,
    targets: &SeriesSet,
    cfg: &SchedulerConfig,
) -> Result<SchedulePlan> {
    plan_times(
        &observed.times(),
        &targets.times(),
        cfg,
        Selection::SingleAbove(cfg.stochastic_threshold),
    )
}

/// Steps ordered by descending missing-dimension count, one step per count.
/// Points with nothing to impute are skipped.
pub fn plan_partial_dims(points: &SeriesSet, _cfg: &SchedulerConfig) -> Result<SchedulePlan> {
    let mut by_count: Vec<(usize, f64)> = points
        .points()
        .iter()
        .map(|p| (count_missing_dims(p), p.time))
        .filter(|&(c, _)| c > 0)
        .collect();
    by_count.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)));
    let mut steps: Vec<ScheduleStep> = Vec::new();
    let mut current = None;
    for (count, t) in by_count {
        if current != Some(count) {
            steps.push(ScheduleStep {
                level: 0,
                target_times: Vec::new(),
                model_id: 0,
            });
            current = Some(count);
        }
        steps.last_mut().expect("step pushed").target_times.push(t);
    }
    Ok(SchedulePlan { steps })
}

#[derive(Clone, Copy, Debug)]
enum Selection {
    /// Every target holding the maximum gap.
    Exact,
    /// Every target of the current level with gap in `(max - width, max]`.
    Band(f64),
    /// One target at a time while the maximum gap exceeds the threshold.
    SingleAbove(f64),
}

/// Mode-agnostic planner over raw time stamps.
fn plan_times(
    observed: &[f64],
    targets: &[f64],
    cfg: &SchedulerConfig,
    selection: Selection,
) -> Result<SchedulePlan> {
    cfg.validate()?;
    if targets.is_empty() {
        return Ok(SchedulePlan::default());
    }
    let mut table = GapTable::from_times(observed, targets)?;
    if let Some(max) = table.max_gap() {
        level_of(max, cfg.max_level)?;
    }
    let mut steps = Vec::new();
    while let Some(max) = table.max_gap() {
        let level = level_of(max, cfg.max_level)?;
        let (level_lo, _) = level_band(level, cfg.max_level);
        let batch: Vec<f64> = match selection {
            Selection::Exact => table
                .entries()
                .iter()
                .filter(|e| e.1 == max)
                .map(|e| e.0)
                .collect(),
            Selection::Band(width) => {
                let lo = (max - width).max(level_lo);
                table
                    .entries()
                    .iter()
                    .filter(|e| e.1 > lo && e.1 <= max)
                    .map(|e| e.0)
                    .collect()
            }
            Selection::SingleAbove(threshold) if max > threshold => {
                // entries are time-sorted, so the first hit is the earliest
                let first = table
                    .entries()
                    .iter()
                    .find(|e| e.1 == max)
                    .expect("max gap is present");
                vec![first.0]
            }
            Selection::SingleAbove(_) => table
                .entries()
                .iter()
                .filter(|e| e.1 == max)
                .map(|e| e.0)
                .collect(),
        };
        table = table.update(&batch)?;
        steps.push(ScheduleStep {
            level,
            target_times: batch,
            model_id: level as usize,
        });
    }
    Ok(SchedulePlan { steps })
}

/// Convenience wrapper used by the trainer: plans from raw times for any
/// gap-driven mode.
pub fn plan_for_times(observed: &[f64], targets: &[f64], cfg: &SchedulerConfig) -> Result<SchedulePlan> {
    let selection = match cfg.mode {
        ScheduleMode::Deterministic => Selection::Exact,
        ScheduleMode::Irregular => Selection::Band(cfg.band_width),
        ScheduleMode::Stochastic => Selection::SingleAbove(cfg.stochastic_threshold),
        ScheduleMode::PartialDims => {
            return Err(Error::Config(
                "partial-dimension plans need per-point masks".into(),
            ))
        }
    };
    plan_times(observed, targets, cfg, selection)
}
