//! Level-wise teacher-forced training and hierarchical imputation.
//!
//! Levels are trained finest first, each starting from a copy of the
//! previous level's parameters. For one level, every epoch masks each
//! training series afresh, plans the imputation, and turns every step of
//! that level into a training unit whose inputs are the observed points
//! plus the ground truth of all earlier steps. Units are batched for Adam.

use std::collections::HashMap;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{adam_step, AdamHyper, AdamState, Container, Tape, Tensor, Var};
use crate::model::{encode_inputs, encode_partial, sample_with, Encoded, Model, ModelConfig};
use crate::schedule::{plan, plan_for_times, ScheduleMode, SchedulePlan, ScheduleStep, SchedulerConfig};
use crate::series::{SeriesSet, TimedPoint};
use crate::synth::{mask_series_with, MaskPolicy, Masked};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    GaussianNll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub start_lr: f64,
    pub decay_lr: f64,
    pub plateau_patience: usize,
    /// Smallest drop in the monitored loss that counts as progress.
    pub min_improvement: f64,
    /// Units per Adam step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub masking: MaskPolicy,
    /// Share of the training corpus held out when no validation set is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Mse,
            start_lr: 1e-4,
            decay_lr: 1e-5,
            plateau_patience: 10,
            min_improvement: 1e-5,
            batch_size: 16,
            max_epochs: 200,
            seed: 0,
            masking: MaskPolicy::Timestamps {
                min_hidden: 195,
                max_hidden: 195,
            },
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_lr > self.decay_lr && self.decay_lr > 0.0) {
            return Err(Error::Config("need start_lr > decay_lr > 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Training and validation corpora.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<SeriesSet>,
    pub val: Vec<SeriesSet>,
}

impl TrainData {
    /// Holds out `fraction` of `corpus` (seeded shuffle) for validation.
    pub fn split(corpus: Vec<SeriesSet>, fraction: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..corpus.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (corpus.len() as f64 * fraction).round() as usize;
        let mut slots: Vec<Option<SeriesSet>> = corpus.into_iter().map(Some).collect();
        let val = idx[..n_val].iter().map(|&i| slots[i].take().expect("unique")).collect();
        let mut rest: Vec<usize> = idx[n_val..].to_vec();
        rest.sort_unstable();
        let train = rest.iter().map(|&i| slots[i].take().expect("unique")).collect();
        TrainData { train, val }
    }
}

/// One teacher-forced prediction problem.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingUnit {
    pub level: u32,
    pub encoded: Encoded,
    /// Rows aligned with `encoded.target_indices`.
    pub truth: Tensor,
    /// 1 where a dimension is hidden and scored (partial mode only).
    pub loss_mask: Option<Tensor>,
}

fn time_key(t: f64) -> u64 {
    t.to_bits()
}

/// Plans `masked` and returns one unit per step at `level` (every step when
/// `level` is `None`). Earlier steps are revealed with ground truth.
pub fn level_units(
    masked: &Masked,
    level: Option<u32>,
    sched: &SchedulerConfig,
    mcfg: &ModelConfig,
) -> Result<Vec<TrainingUnit>> {
    if masked.targets.is_empty() {
        return Ok(Vec::new());
    }
    let truth: HashMap<u64, &Vec<f64>> = masked
        .targets
        .points()
        .iter()
        .zip(&masked.truth)
        .map(|(p, y)| (time_key(p.time), y))
        .collect();
    let d = masked.targets.dim();
    if sched.mode == ScheduleMode::PartialDims {
        let all = masked.observed.union(&masked.targets)?;
        let plan = plan(&masked.observed, &all, sched)?;
        let mut points: HashMap<u64, TimedPoint> =
            all.points().iter().map(|p| (time_key(p.time), p.clone())).collect();
        let order: Vec<u64> = all.points().iter().map(|p| time_key(p.time)).collect();
        let mut units = Vec::new();
        for step in &plan.steps {
            let current = SeriesSet::new(d, order.iter().map(|k| points[k].clone()).collect())?;
            let encoded = encode_partial(&current, &step.target_times, mcfg)?;
            let mut y = Tensor::zeros(step.target_times.len(), d);
            let mut m = Tensor::zeros(step.target_times.len(), d);
            for (r, t) in step.target_times.iter().enumerate() {
                y.row_mut(r).copy_from_slice(truth[&time_key(*t)]);
                for (k, &seen) in points[&time_key(*t)].dim_mask.iter().enumerate() {
                    m.set(r, k, if seen { 0.0 } else { 1.0 });
                }
            }
            units.push(TrainingUnit {
                level: step.level,
                encoded,
                truth: y,
                loss_mask: Some(m),
            });
            for t in &step.target_times {
                let k = time_key(*t);
                points.insert(k, TimedPoint::observation(*t, truth[&k].clone())?);
            }
        }
        return Ok(units);
    }
    let plan = plan_for_times(&masked.observed.times(), &masked.targets.times(), sched)?;
    let mut known = masked.observed.points().to_vec();
    let mut units = Vec::new();
    for step in &plan.steps {
        if level.is_none_or(|l| l == step.level) {
            let current = SeriesSet::new(d, known.clone())?;
            let encoded = encode_inputs(&current, &step.target_times, mcfg)?;
            let rows: Vec<Vec<f64>> = step.target_times.iter().map(|t| truth[&time_key(*t)].clone()).collect();
            units.push(TrainingUnit {
                level: step.level,
                encoded,
                truth: Tensor::from_rows(&rows)?,
                loss_mask: None,
            });
        }
        if level.is_some_and(|l| step.level > l) {
            break;
        }
        for t in &step.target_times {
            known.push(TimedPoint::observation(*t, truth[&time_key(*t)].clone())?);
        }
    }
    Ok(units)
}

fn unit_loss(model: &Model, tape: &mut Tape, pv: &[Var], unit: &TrainingUnit, loss: LossKind) -> Result<Var> {
    let fv = model.forward_on_tape(tape, pv, &unit.encoded)?;
    let y = tape.constant(unit.truth.clone());
    match (loss, &unit.loss_mask) {
        (LossKind::Mse, None) => tape.square_error(fv.mean, y),
        (LossKind::Mse, Some(m)) => {
            let diff = tape.sub(fv.mean, y)?;
            let hidden = tape.mul_const(diff, m)?;
            let zero = tape.constant(Tensor::zeros(m.rows(), m.cols()));
            tape.square_error(hidden, zero)
        }
        (LossKind::GaussianNll, None) => {
            let ls = fv.log_sigma.ok_or(Error::NoDistributionHead)?;
            tape.gaussian_nll(y, fv.mean, ls)
        }
        (LossKind::GaussianNll, Some(_)) => Err(Error::Config(
            "Gaussian likelihood is not supported with partial-dimension masks".into(),
        )),
    }
}

/// Loss value and parameter gradients of one unit.
pub fn unit_gradients(model: &Model, unit: &TrainingUnit, loss: LossKind) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let pv = model.bind(&mut tape);
    let l = unit_loss(model, &mut tape, &pv, unit, loss)?;
    let value = tape.value(l).item();
    let mut g = tape.backward(l)?;
    let grads = pv
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols())))
        .collect();
    Ok((value, grads))
}

pub fn unit_loss_value(model: &Model, unit: &TrainingUnit, loss: LossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let pv: Vec<Var> = model.params.iter().map(|p| tape.constant(p.value.clone())).collect();
    let l = unit_loss(model, &mut tape, &pv, unit, loss)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub level: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerState {
    pub epochs_done: usize,
    pub lr: f64,
    pub best: Option<f64>,
    pub stale: usize,
    pub plateaus: usize,
    pub finished: bool,
}

/// A level's model together with everything needed to resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelCheckpoint {
    pub level: u32,
    pub model: Model,
    pub adam: AdamState,
    pub state: TrainerState,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelMeta {
    level: u32,
    model: ModelConfig,
    state: TrainerState,
    history: Vec<EpochRecord>,
}

impl LevelCheckpoint {
    pub fn fresh(level: u32, model: Model, lr: f64) -> Self {
        let adam = AdamState::new(&model.params, AdamHyper::with_lr(lr));
        LevelCheckpoint {
            level,
            model,
            adam,
            state: TrainerState {
                epochs_done: 0,
                lr,
                best: None,
                stale: 0,
                plateaus: 0,
                finished: false,
            },
            history: Vec::new(),
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = LevelMeta {
            level: self.level,
            model: self.model.cfg.clone(),
            state: self.state.clone(),
            history: self.history.clone(),
        };
        Container {
            meta: serde_json::to_value(meta).expect("level meta serializes"),
            params: self.model.params.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: LevelMeta =
            serde_json::from_value(c.meta).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let adam = c
            .adam
            .ok_or_else(|| Error::CorruptCheckpoint("missing optimizer state".into()))?;
        Ok(LevelCheckpoint {
            level: meta.level,
            model: Model::from_params(meta.model, c.params)?,
            adam,
            state: meta.state,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Where a level's parameters come from.
pub enum LevelInit<'a> {
    /// Random initialisation; only valid for the finest level.
    Fresh(ModelConfig),
    /// Copy of the next finer level's trained model.
    Transfer(&'a LevelCheckpoint),
    /// Continue an interrupted run.
    Resume(LevelCheckpoint),
}

pub type EpochHook<'a> = dyn FnMut(&LevelCheckpoint) -> ControlFlow<()> + 'a;

/// Mixes seed, level and epoch into an independent stream.
fn epoch_rng(seed: u64, level: u32, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((level as u64 + 1) << 40) | epoch as u64);
    rng
}

fn validation_units(
    data: &TrainData,
    level: Option<u32>,
    cfg: &TrainConfig,
    sched: &SchedulerConfig,
    mcfg: &ModelConfig,
) -> Result<Vec<TrainingUnit>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut units = Vec::new();
    for s in &data.val {
        let masked = mask_series_with(s, &cfg.masking, &mut rng)?;
        units.extend(level_units(&masked, level, sched, mcfg)?);
    }
    Ok(units)
}

fn model_level(level: u32, sched: &SchedulerConfig) -> Option<u32> {
    (sched.mode != ScheduleMode::PartialDims).then_some(level)
}

/// Trains one level until the second plateau, `max_epochs`, or `on_epoch`
/// asks to stop. The returned checkpoint says which in `state.finished`.
pub fn train_level(
    level: u32,
    data: &TrainData,
    init: LevelInit<'_>,
    cfg: &TrainConfig,
    sched: &SchedulerConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<LevelCheckpoint> {
    cfg.validate()?;
    let partial = sched.mode == ScheduleMode::PartialDims;
    let mut ck = match init {
        LevelInit::Fresh(mcfg) => {
            if !partial && level < sched.max_level {
                return Err(Error::MissingModel(level as usize + 1));
            }
            LevelCheckpoint::fresh(level, Model::new(mcfg, cfg.seed)?, cfg.start_lr)
        }
        LevelInit::Transfer(prior) => {
            if !partial && prior.level != level + 1 {
                return Err(Error::MissingModel(level as usize + 1));
            }
            LevelCheckpoint::fresh(level, prior.model.clone(), cfg.start_lr)
        }
        LevelInit::Resume(ck) => {
            if ck.level != level {
                return Err(Error::Config(format!("resume checkpoint is for level {}", ck.level)));
            }
            ck
        }
    };
    let mcfg = ck.model.cfg.clone();
    if partial && cfg.loss == LossKind::GaussianNll {
        return Err(Error::Config("Gaussian likelihood is not supported with partial-dimension masks".into()));
    }
    let filter = model_level(level, sched);
    let val_units = validation_units(data, filter, cfg, sched, &mcfg)?;
    while !ck.state.finished {
        let epoch = ck.state.epochs_done;
        let mut rng = epoch_rng(cfg.seed, level, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut units = Vec::new();
        for &i in &order {
            let masked = mask_series_with(&data.train[i], &cfg.masking, &mut rng)?;
            units.extend(level_units(&masked, filter, sched, &mcfg)?);
        }
        if units.is_empty() {
            // nothing at this level under the masking policy; keep the
            // transferred parameters
            ck.state.finished = true;
            break;
        }
        units.shuffle(&mut rng);
        ck.adam.set_lr(ck.state.lr);
        let mut total = 0.0;
        for (b, batch) in units.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            for (u, unit) in batch.iter().enumerate() {
                let (l, g) = unit_gradients(&ck.model, unit, cfg.loss)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at level {level}, epoch {epoch}, batch {b}, unit {u} ({} rows)",
                        unit.encoded.elements.rows()
                    )));
                }
                total += l;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            grads.iter_mut().for_each(|g| g.scale_assign(1.0 / batch.len() as f64));
            adam_step(&mut ck.model.params, &grads, &mut ck.adam)?;
        }
        let train_loss = total / units.len() as f64;
        let val_loss = if val_units.is_empty() {
            train_loss
        } else {
            val_units
                .iter()
                .map(|u| unit_loss_value(&ck.model, u, cfg.loss))
                .sum::<Result<f64>>()?
                / val_units.len() as f64
        };
        ck.history.push(EpochRecord {
            epoch,
            level,
            train_loss,
            val_loss,
            lr: ck.state.lr,
        });
        let st = &mut ck.state;
        st.epochs_done += 1;
        if st.best.is_none_or(|b| val_loss < b - cfg.min_improvement) {
            st.best = Some(val_loss);
            st.stale = 0;
        } else {
            st.stale += 1;
        }
        if st.stale >= cfg.plateau_patience {
            st.stale = 0;
            st.plateaus += 1;
            if st.plateaus == 1 {
                st.lr = cfg.decay_lr;
            } else {
                st.finished = true;
            }
        }
        if st.epochs_done >= cfg.max_epochs {
            st.finished = true;
        }
        if on_epoch(&ck).is_break() {
            break;
        }
    }
    Ok(ck)
}

/// Checkpoints in training order, and whether every level finished.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<LevelCheckpoint>,
    pub complete: bool,
}

impl TrainOutcome {
    /// Models indexed by the plan's `model_id`.
    pub fn models(&self) -> Vec<Model> {
        let mut cks: Vec<&LevelCheckpoint> = self.checkpoints.iter().collect();
        cks.sort_by_key(|c| c.level);
        cks.into_iter().map(|c| c.model.clone()).collect()
    }
}

/// Levels in training order: finest first, or the single shared model.
pub fn training_levels(sched: &SchedulerConfig) -> Vec<u32> {
    if sched.mode == ScheduleMode::PartialDims {
        vec![0]
    } else {
        (0..=sched.max_level).rev().collect()
    }
}

/// Trains every level with chained transfer initialisation. `existing`
/// holds checkpoints from an earlier, possibly interrupted, run.
pub fn train_all_levels(
    data: &TrainData,
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    sched: &SchedulerConfig,
    existing: Vec<LevelCheckpoint>,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    sched.validate()?;
    let mut existing: HashMap<u32, LevelCheckpoint> = existing.into_iter().map(|c| (c.level, c)).collect();
    let mut done: Vec<LevelCheckpoint> = Vec::new();
    for level in training_levels(sched) {
        let ck = match existing.remove(&level) {
            Some(ck) if ck.state.finished => ck,
            Some(ck) => train_level(level, data, LevelInit::Resume(ck), cfg, sched, on_epoch)?,
            None => {
                let init = match done.last() {
                    Some(prior) => LevelInit::Transfer(prior),
                    None => LevelInit::Fresh(mcfg.clone()),
                };
                train_level(level, data, init, cfg, sched, on_epoch)?
            }
        };
        let finished = ck.state.finished;
        done.push(ck);
        if !finished {
            return Ok(TrainOutcome {
                checkpoints: done,
                complete: false,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoints: done,
        complete: true,
    })
}

/// One completed trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Imputation {
    /// Observed points plus every imputed target.
    pub completed: SeriesSet,
    /// Imputed values aligned with the `targets` argument's point order.
    pub values: Vec<Vec<f64>>,
    /// Steps in execution order.
    pub trace: Vec<ScheduleStep>,
}

impl Imputation {
    pub fn imputed_flags(&self, targets: &SeriesSet) -> Vec<bool> {
        let ts: Vec<u64> = targets.times().iter().map(|&t| time_key(t)).collect();
        self.completed
            .points()
            .iter()
            .map(|p| ts.contains(&time_key(p.time)))
            .collect()
    }
}

/// Runs the plan, feeding each step's predictions back as observations.
/// Stochastic models yield `n_samples` independent trajectories, others one.
pub fn impute(
    observed: &SeriesSet,
    targets: &SeriesSet,
    models: &[Model],
    sched: &SchedulerConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Imputation>> {
    let d = observed.dim().max(targets.dim());
    let partial = sched.mode == ScheduleMode::PartialDims;
    let plan: SchedulePlan = if targets.is_empty() {
        SchedulePlan::default()
    } else if partial {
        plan(observed, &observed.union(targets)?, sched)?
    } else {
        plan(observed, targets, sched)?
    };
    for s in &plan.steps {
        if models.get(s.model_id).is_none() {
            return Err(Error::MissingModel(s.model_id));
        }
    }
    let stochastic = plan
        .steps
        .first()
        .is_some_and(|s| models[s.model_id].cfg.stochastic_head);
    let runs = if stochastic { n_samples.max(1) } else { 1 };
    let mut out = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        out.push(run_plan(observed, targets, &plan, models, partial, d, &mut rng)?);
    }
    Ok(out)
}

fn run_plan(
    observed: &SeriesSet,
    targets: &SeriesSet,
    plan: &SchedulePlan,
    models: &[Model],
    partial: bool,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Imputation> {
    let mut points: Vec<TimedPoint> = observed.points().to_vec();
    if partial {
        points.extend(targets.points().iter().cloned());
    }
    let mut filled: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut trace = Vec::with_capacity(plan.len());
    for step in &plan.steps {
        let model = &models[step.model_id];
        let current = SeriesSet::new(d, points.clone())?;
        let enc = if partial {
            encode_partial(&current, &step.target_times, &model.cfg)?
        } else {
            encode_inputs(&current, &step.target_times, &model.cfg)?
        };
        let result = model.forward(&enc)?;
        let preds: Vec<Vec<f64>> = if model.cfg.stochastic_head {
            sample_with(&result, rng)?
        } else {
            result.mean.to_rows()
        };
        for (t, h) in enc.target_times.iter().zip(preds) {
            if partial {
                let slot = points
                    .iter_mut()
                    .find(|p| p.time == *t)
                    .ok_or(Error::UnknownTarget(*t))?;
                let merged: Vec<f64> = slot
                    .data
                    .iter()
                    .zip(&h)
                    .zip(&slot.dim_mask)
                    .map(|((&x, &p), &seen)| if seen { x } else { p })
                    .collect();
                *slot = TimedPoint::observation(*t, merged.clone())?;
                filled.insert(time_key(*t), merged);
            } else {
                points.push(TimedPoint::observation(*t, h.clone())?);
                filled.insert(time_key(*t), h);
            }
        }
        trace.push(step.clone());
    }
    let values = targets
        .points()
        .iter()
        .map(|p| filled.get(&time_key(p.time)).cloned().ok_or(Error::UnknownTarget(p.time)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Imputation {
        completed: SeriesSet::new(d, points)?,
        values,
        trace,
    })
}

/// Draws a fixed evaluation mask per series from `seed`.
pub fn mask_corpus(corpus: &[SeriesSet], policy: &MaskPolicy, seed: u64) -> Result<Vec<Masked>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|s| {
            let sub: u64 = rng.random();
            mask_series_with(s, policy, &mut ChaCha8Rng::seed_from_u64(sub))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::tests::grid;
    use crate::synth::{gen_billiards, BilliardsConfig};

    fn tiny(d: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            blocks: 1,
            heads: 2,
            head_dim: 8,
            ff_dim: 32,
            ..ModelConfig::desk(d)
        }
    }

    fn constant_corpus(n: usize, len: usize) -> Vec<SeriesSet> {
        (0..n)
            .map(|i| {
                let c = 0.3 + 0.0 * i as f64;
                let t: Vec<f64> = (0..len).map(|k| k as f64).collect();
                SeriesSet::from_observations(&t, &vec![vec![c]; len]).unwrap()
            })
            .collect()
    }

    fn grid_masked(n: usize, observed: &[usize]) -> Masked {
        let (obs, tgt) = grid(n, observed);
        let truth: Vec<Vec<f64>> = tgt.times().iter().map(|t| vec![t * 10.0]).collect();
        let obs = SeriesSet::from_observations(&obs.times(), &obs.times().iter().map(|t| vec![t * 10.0]).collect::<Vec<_>>()).unwrap();
        Masked {
            observed: obs,
            targets: tgt,
            truth,
        }
    }

    #[test]
    fn teacher_forcing_reveals_truth() {
        let masked = grid_masked(34, &[0, 33]);
        let mcfg = tiny(1);
        let units = level_units(&masked, None, &SchedulerConfig::default(), &mcfg).unwrap();
        assert_eq!(units.len(), 5);
        let tau = mcfg.codec.tau();
        for k in 0..units.len() - 1 {
            let next = &units[k + 1].encoded;
            let targets: Vec<f64> = units[k].encoded.target_times.clone();
            // every step-k target appears in step k+1's input as an observed
            // row carrying its ground truth (value = 10 t)
            for t in targets {
                let phi = mcfg.codec.encode(t);
                let row = (0..next.elements.rows())
                    .find(|&r| next.elements.row(r)[..tau] == phi[..] && !next.target_indices.contains(&r))
                    .expect("revealed row");
                assert_eq!(next.elements.row(row)[tau], t * 10.0);
                assert_eq!(next.elements.row(row)[tau + 1], 1.0);
            }
        }
        // level filter keeps only that level's steps and drops future targets
        let l2 = level_units(&masked, Some(2), &SchedulerConfig::default(), &mcfg).unwrap();
        assert_eq!(l2.len(), 1);
        assert_eq!(l2[0].encoded.elements.rows(), 2 + 2 + 2 + 4);
    }

    #[test]
    fn fresh_init_needs_finest_level() {
        let data = TrainData {
            train: constant_corpus(2, 10),
            val: vec![],
        };
        let err = train_level(
            2,
            &data,
            LevelInit::Fresh(tiny(1)),
            &TrainConfig::default(),
            &SchedulerConfig::default(),
            &mut |_| ControlFlow::Continue(()),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingModel(3)));
    }

    fn constant_setup() -> (TrainData, TrainConfig, SchedulerConfig, ModelConfig) {
        let data = TrainData::split(constant_corpus(20, 17), 0.1, 0);
        let cfg = TrainConfig {
            start_lr: 1e-2,
            decay_lr: 1e-3,
            batch_size: 4,
            max_epochs: 200,
            masking: MaskPolicy::Timestamps {
                min_hidden: 10,
                max_hidden: 15,
            },
            ..TrainConfig::default()
        };
        let sched = SchedulerConfig {
            max_level: 4,
            ..SchedulerConfig::default()
        };
        (data, cfg, sched, tiny(1))
    }

    #[test]
    fn constant_sequences_are_learned() {
        let (_, cfg, sched, _) = constant_setup();
        let data = TrainData::split(constant_corpus(100, 17), 0.1, 0);
        let cfg = TrainConfig {
            start_lr: 3e-4,
            decay_lr: 3e-6,
            batch_size: 1,
            plateau_patience: 20,
            min_improvement: 0.0,
            ..cfg
        };
        let mcfg = ModelConfig::desk(1);
        let ck = train_level(4, &data, LevelInit::Fresh(mcfg), &cfg, &sched, &mut |_| ControlFlow::Continue(())).unwrap();
        let last = ck.history.last().unwrap();
        assert!(last.train_loss < 1e-6, "{:?}", last);
        // smoothed loss trends down over the run
        let smooth: Vec<f64> = ck
            .history
            .windows(20)
            .map(|w| w.iter().map(|r| r.train_loss).sum::<f64>() / 20.0)
            .collect();
        for i in 0..smooth.len().saturating_sub(100) {
            assert!(smooth[i + 100] <= smooth[i], "smoothed loss rose from {i}");
        }
    }

    #[test]
    fn transfer_init_is_bit_identical() {
        let (data, cfg, sched, mcfg) = constant_setup();
        let cfg = TrainConfig { max_epochs: 2, ..cfg };
        let finest = train_level(4, &data, LevelInit::Fresh(mcfg), &cfg, &sched, &mut |_| ControlFlow::Continue(())).unwrap();
        let mut seen = None;
        let _ = train_level(3, &data, LevelInit::Transfer(&finest), &cfg, &sched, &mut |ck| {
            seen.get_or_insert_with(|| ck.history.len());
            ControlFlow::Break(())
        });
        // the model handed to level 3 before any update
        let start = LevelCheckpoint::fresh(3, finest.model.clone(), cfg.start_lr);
        assert_eq!(start.model.params, finest.model.params);
        let bits: Vec<u64> = start.model.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect();
        let want: Vec<u64> = finest.model.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect();
        assert_eq!(bits, want);
        let err = train_level(2, &data, LevelInit::Transfer(&finest), &cfg, &sched, &mut |_| ControlFlow::Continue(()));
        assert!(matches!(err, Err(Error::MissingModel(3))));
    }

    #[test]
    fn all_levels_and_resume() {
        let (data, cfg, sched, mcfg) = constant_setup();
        let cfg = TrainConfig { max_epochs: 3, ..cfg };
        let full = train_all_levels(&data, &mcfg, &cfg, &sched, vec![], &mut |_| ControlFlow::Continue(())).unwrap();
        assert!(full.complete);
        assert_eq!(full.checkpoints.len(), 5);
        assert_eq!(full.models().len(), 5);

        // stop after four epochs in total, round-trip through bytes, resume
        let mut epochs = 0;
        let part = train_all_levels(&data, &mcfg, &cfg, &sched, vec![], &mut |_| {
            epochs += 1;
            if epochs == 4 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert!(!part.complete);
        let saved: Vec<LevelCheckpoint> = part
            .checkpoints
            .iter()
            .map(|c| LevelCheckpoint::from_container(Container::from_bytes(&c.to_container().to_bytes()).unwrap()).unwrap())
            .collect();
        let resumed = train_all_levels(&data, &mcfg, &cfg, &sched, saved, &mut |_| ControlFlow::Continue(())).unwrap();
        assert!(resumed.complete);
        for (a, b) in resumed.checkpoints.iter().zip(&full.checkpoints) {
            assert_eq!(a.history, b.history);
            assert_eq!(a.model.params, b.model.params);
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (data, cfg, sched, mcfg) = constant_setup();
        let cfg = TrainConfig { max_epochs: 2, ..cfg };
        let run = || {
            train_level(4, &data, LevelInit::Fresh(mcfg.clone()), &cfg, &sched, &mut |_| ControlFlow::Continue(()))
                .unwrap()
                .to_container()
                .to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn partial_dims_single_model() {
        let times: Vec<f64> = (0..12).map(|t| t as f64).collect();
        let corpus: Vec<SeriesSet> = (0..6)
            .map(|i| SeriesSet::from_observations(&times, &times.iter().map(|t| vec![t * 0.1, i as f64 * 0.1, 0.5]).collect::<Vec<_>>()).unwrap())
            .collect();
        let data = TrainData {
            train: corpus,
            val: vec![],
        };
        let sched = SchedulerConfig::with_mode(ScheduleMode::PartialDims);
        let mcfg = ModelConfig {
            partial_dims: true,
            ..tiny(3)
        };
        let cfg = TrainConfig {
            masking: MaskPolicy::Dimensions { rate: 0.5 },
            max_epochs: 2,
            start_lr: 1e-3,
            decay_lr: 1e-4,
            ..TrainConfig::default()
        };
        let out = train_all_levels(&data, &mcfg, &cfg, &sched, vec![], &mut |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        let masked = mask_series_with(&data.train[0], &cfg.masking, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let res = impute(&masked.observed, &masked.targets, &out.models(), &sched, 1, 0).unwrap();
        assert_eq!(res[0].completed.len(), 12);
        for (p, v) in masked.targets.points().iter().zip(&res[0].values) {
            for k in 0..3 {
                if p.dim_mask[k] {
                    assert_eq!(v[k], p.data[k]);
                }
            }
        }
        let cnt: Vec<usize> = res[0].trace.iter().map(|s| s.target_times.len()).collect();
        assert_eq!(cnt.iter().sum::<usize>(), masked.targets.len());
    }

    #[test]
    fn impute_follows_plan() {
        let masked = grid_masked(34, &[0, 33]);
        let models: Vec<Model> = (0..5).map(|l| Model::new(tiny(1), l).unwrap()).collect();
        let sched = SchedulerConfig::default();
        let res = impute(&masked.observed, &masked.targets, &models, &sched, 3, 0).unwrap();
        assert_eq!(res.len(), 1);
        let plan = plan(&masked.observed, &masked.targets, &sched).unwrap();
        assert_eq!(res[0].trace, plan.steps);
        assert_eq!(res[0].completed.len(), 34);
        assert_eq!(res[0].values.len(), 32);
        assert!(matches!(
            impute(&masked.observed, &masked.targets, &models[..3], &sched, 1, 0),
            Err(Error::MissingModel(3))
        ));
        let none = impute(&masked.observed, &SeriesSet::empty(1).unwrap(), &models, &sched, 1, 0).unwrap();
        assert_eq!(crate::series::to_sequence(&none[0].completed), crate::series::to_sequence(&masked.observed));
    }

    #[test]
    fn stochastic_impute_draws_distinct_trajectories() {
        let masked = grid_masked(34, &[0, 33]);
        let mcfg = ModelConfig {
            stochastic_head: true,
            ..tiny(1)
        };
        let models: Vec<Model> = (0..5).map(|l| Model::new(mcfg.clone(), l).unwrap()).collect();
        let sched = SchedulerConfig::default();
        let a = impute(&masked.observed, &masked.targets, &models, &sched, 4, 9).unwrap();
        assert_eq!(a.len(), 4);
        assert_ne!(a[0].values, a[1].values);
        assert_eq!(a, impute(&masked.observed, &masked.targets, &models, &sched, 4, 9).unwrap());
    }

    #[test]
    fn billiards_units_respect_capacity() {
        let (train, _) = gen_billiards(&BilliardsConfig {
            n_train: 5,
            n_test: 0,
            ..BilliardsConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = MaskPolicy::Timestamps {
            min_hidden: 195,
            max_hidden: 195,
        };
        let sched8 = SchedulerConfig {
            max_level: 8,
            ..SchedulerConfig::default()
        };
        for s in &train {
            let m = mask_series_with(s, &policy, &mut rng).unwrap();
            let units = level_units(&m, None, &sched8, &tiny(2)).unwrap();
            let n: usize = units.iter().map(|u| u.truth.rows()).sum();
            assert_eq!(n, 195);
        }
    }

    #[test]
    fn split_is_a_partition() {
        let corpus = constant_corpus(30, 4);
        let d = TrainData::split(corpus, 0.1, 5);
        assert_eq!((d.train.len(), d.val.len()), (27, 3));
    }
}
