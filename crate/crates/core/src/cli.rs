//! Batch command line: `generate | train | impute | eval | export`.
//!
//! Every command reads one TOML config and works inside a run directory:
//!
//! ```text
//! <run-dir>/
//!   manifest.json        seed, config hash and finish time per command
//!   data/train/*.jsonl   generated series, one file each
//!   data/test/*.jsonl
//!   data/masked/         test series with hidden points (obs = 0)
//!   data/imputed/        completed series, `imputed: 1` on filled points
//!   data/plans/          executed imputation plans
//!   checkpoints/         level_<l>.ckpt
//!   logs/train_log.csv
//!   reports/             per-series JSON, aggregate JSON and CSV
//!   exports/             attention CSVs, trajectory CSV/SVG
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::linear_interpolate;
use crate::error::{Error, Result};
use crate::metrics::{mse, stochastic_scores, trajectory_stats, MetricReport, TrajectoryConfig};
use crate::model::{attention_to_csv, encode_inputs, encode_partial, ModelConfig};
use crate::schedule::{plan, ScheduleMode, SchedulerConfig};
use crate::series::{read_series_jsonl, series_to_csv, to_sequence, write_series_jsonl, SeriesSet, TimedPoint};
use crate::synth::{gen_billiards, gen_bimodal, gen_sinusoid, mask_series, BilliardsConfig, MaskPolicy, SinusoidConfig};
use crate::time_codec::TimeCodecConfig;
use crate::train::{impute, train_all_levels, training_levels, LevelCheckpoint, TrainConfig, TrainData};

#[derive(Debug, Parser)]
#[command(name = "setimpute", version, about = "Hierarchical set-based time-series imputation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus into data/.
    Generate(CommonArgs),
    /// Train one model per level (resumes from existing checkpoints).
    Train(TrainArgs),
    /// Mask the test split and impute it.
    Impute(CommonArgs),
    /// Score imputed series against the truth.
    Eval(CommonArgs),
    /// Write attention maps and trajectory plots.
    Export(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Stop after this many epochs in this invocation; rerun to resume.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Billiards,
    Sinusoid,
    Bimodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BimodalConfig {
    pub n_series: usize,
    pub points: usize,
}

impl Default for BimodalConfig {
    fn default() -> Self {
        BimodalConfig {
            n_series: 1000,
            points: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Share of sinusoid and bimodal series written to the test split.
    pub test_fraction: f64,
    pub billiards: BilliardsConfig,
    pub sinusoid: SinusoidConfig,
    pub bimodal: BimodalConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Billiards,
            test_fraction: 0.2,
            billiards: BilliardsConfig::default(),
            sinusoid: SinusoidConfig::default(),
            bimodal: BimodalConfig::default(),
        }
    }
}

/// A named preset with optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub hidden_dim: Option<usize>,
    pub blocks: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub ff_dim: Option<usize>,
    pub codec: Option<TimeCodecConfig>,
    pub stochastic_head: bool,
    pub residual: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            hidden_dim: None,
            blocks: None,
            heads: None,
            head_dim: None,
            ff_dim: None,
            codec: None,
            stochastic_head: false,
            residual: true,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, data_dim: usize, partial_dims: bool) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.preset, data_dim)?;
        if let Some(v) = self.hidden_dim {
            m.hidden_dim = v;
        }
        if let Some(v) = self.blocks {
            m.blocks = v;
        }
        if let Some(v) = self.heads {
            m.heads = v;
        }
        if let Some(v) = self.head_dim {
            m.head_dim = v;
        }
        if let Some(v) = self.ff_dim {
            m.ff_dim = v;
        }
        if let Some(c) = &self.codec {
            m.codec = c.clone();
        }
        m.stochastic_head = self.stochastic_head;
        m.residual = self.residual;
        m.partial_dims = partial_dims;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputeConfig {
    pub masking: MaskPolicy,
    /// Independent masks per test series.
    pub repeats: usize,
    /// Trajectories per mask; only stochastic models draw more than one.
    pub n_samples: usize,
    /// Only the first `max_series` test series, when set.
    pub max_series: Option<usize>,
    pub dump_plan: bool,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            masking: MaskPolicy::Timestamps {
                min_hidden: 180,
                max_hidden: 195,
            },
            repeats: 1,
            n_samples: 1,
            max_series: None,
            dump_plan: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trajectory: TrajectoryConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Number of imputed series to export.
    pub series: usize,
    pub attention: bool,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            series: 3,
            attention: true,
        }
    }
}

/// The whole config tree. The top-level `seed` drives every random stream
/// and replaces the seeds of the sub-sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub scheduler: SchedulerConfig,
    pub train: TrainConfig,
    pub impute: ImputeConfig,
    pub eval: EvalConfig,
    pub export: ExportConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(path, e.message()))
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, path)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.data.billiards.seed = cfg.seed;
        cfg.data.sinusoid.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.scheduler.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the effective config, as canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn partial(&self) -> bool {
        self.scheduler.mode == ScheduleMode::PartialDims
    }
}

/// Guard for `<run-dir>/.lock`; removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn mkdir(p: &Path) -> Result<PathBuf> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    Ok(p.to_path_buf())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn update_manifest(run_dir: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let path = run_dir.join("manifest.json");
    let mut doc: serde_json::Map<String, serde_json::Value> = match fs::read_to_string(&path) {
        Ok(t) => serde_json::from_str(&t).map_err(|e| Error::parse(&path, e))?,
        Err(_) => serde_json::Map::new(),
    };
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    doc.insert(
        command.to_string(),
        serde_json::json!({
            "seed": cfg.seed,
            "config_sha256": cfg.hash(),
            "finished_unix": now,
            "details": extra,
        }),
    );
    write_text(&path, &serde_json::to_string_pretty(&doc).expect("manifest serializes"))
}

/// `(id, series)` for every `*.jsonl` in `dir`, sorted by id.
pub fn read_split(dir: &Path) -> Result<Vec<(String, SeriesSet)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let id = p.file_stem().expect("named file").to_string_lossy().into_owned();
            read_series_jsonl(&p).map(|(s, _)| (id, s))
        })
        .collect()
}

fn write_split(dir: &Path, prefix: &str, series: &[SeriesSet]) -> Result<usize> {
    mkdir(dir)?;
    for (i, s) in series.iter().enumerate() {
        write_series_jsonl(&dir.join(format!("{prefix}-{i:05}.jsonl")), s, None)?;
    }
    Ok(series.len())
}

pub fn cmd_generate(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let data = run_dir.join("data");
    let (train, test) = match cfg.data.kind {
        DataKind::Billiards => gen_billiards(&cfg.data.billiards)?,
        DataKind::Sinusoid => split_tail(gen_sinusoid(&cfg.data.sinusoid)?, cfg.data.test_fraction),
        DataKind::Bimodal => split_tail(
            gen_bimodal(cfg.data.bimodal.n_series, cfg.data.bimodal.points, cfg.seed)?,
            cfg.data.test_fraction,
        ),
    };
    for split in ["train", "test"] {
        let dir = data.join(split);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let n_train = write_split(&data.join("train"), "train", &train)?;
    let n_test = write_split(&data.join("test"), "test", &test)?;
    update_manifest(
        run_dir,
        "generate",
        cfg,
        serde_json::json!({"kind": cfg.data.kind, "n_train": n_train, "n_test": n_test}),
    )
}

fn split_tail(mut all: Vec<SeriesSet>, fraction: f64) -> (Vec<SeriesSet>, Vec<SeriesSet>) {
    let n_test = (all.len() as f64 * fraction).round() as usize;
    let test = all.split_off(all.len() - n_test);
    (all, test)
}

pub fn checkpoint_path(run_dir: &Path, level: u32) -> PathBuf {
    run_dir.join("checkpoints").join(format!("level_{level}.ckpt"))
}

fn write_log(path: &Path, cks: &[&LevelCheckpoint]) -> Result<()> {
    let mut out = String::from("epoch,level,train_loss,val_loss,lr\n");
    for ck in cks {
        for r in &ck.history {
            let _ = writeln!(out, "{},{},{:?},{:?},{:?}", r.epoch, r.level, r.train_loss, r.val_loss, r.lr);
        }
    }
    write_text(path, &out)
}

/// Trains every level; returns whether all of them finished.
pub fn cmd_train(cfg: &RunConfig, run_dir: &Path, stop_after: Option<usize>) -> Result<bool> {
    let corpus: Vec<SeriesSet> = read_split(&run_dir.join("data/train"))?.into_iter().map(|(_, s)| s).collect();
    let dim = corpus
        .first()
        .map(|s| s.dim())
        .ok_or_else(|| Error::Config("training split is empty; run generate first".into()))?;
    let mcfg = cfg.model.resolve(dim, cfg.partial())?;
    let data = TrainData::split(corpus, cfg.train.val_fraction, cfg.seed);
    mkdir(&run_dir.join("checkpoints"))?;
    mkdir(&run_dir.join("logs"))?;
    let mut existing = Vec::new();
    for level in training_levels(&cfg.scheduler) {
        let p = checkpoint_path(run_dir, level);
        if p.exists() {
            let ck = LevelCheckpoint::load(&p)?;
            if ck.model.cfg != mcfg {
                return Err(Error::CorruptCheckpoint(format!(
                    "{} was trained with a different model config",
                    p.display()
                )));
            }
            existing.push(ck);
        }
    }
    let done: Vec<LevelCheckpoint> = existing.iter().filter(|c| c.state.finished).cloned().collect();
    let log = run_dir.join("logs/train_log.csv");
    let mut epochs = 0usize;
    let mut hook = |ck: &LevelCheckpoint| -> ControlFlow<()> {
        let res = ck.save(&checkpoint_path(run_dir, ck.level)).and_then(|_| {
            let mut all: Vec<&LevelCheckpoint> = done.iter().filter(|c| c.level != ck.level).collect();
            all.push(ck);
            write_log(&log, &all)
        });
        if let Err(e) = res {
            eprintln!("{}", error_json(&e));
            return ControlFlow::Break(());
        }
        epochs += 1;
        if stop_after.is_some_and(|n| epochs >= n) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    };
    let outcome = train_all_levels(&data, &mcfg, &cfg.train, &cfg.scheduler, existing, &mut hook)?;
    for ck in &outcome.checkpoints {
        ck.save(&checkpoint_path(run_dir, ck.level))?;
    }
    write_log(&log, &outcome.checkpoints.iter().collect::<Vec<_>>())?;
    update_manifest(
        run_dir,
        "train",
        cfg,
        serde_json::json!({"complete": outcome.complete, "levels": outcome.checkpoints.len()}),
    )?;
    Ok(outcome.complete)
}

fn load_models(cfg: &RunConfig, run_dir: &Path) -> Result<Vec<crate::model::Model>> {
    let mut levels = training_levels(&cfg.scheduler);
    levels.sort_unstable();
    levels
        .into_iter()
        .map(|l| {
            let p = checkpoint_path(run_dir, l);
            if !p.exists() {
                return Err(Error::MissingModel(l as usize));
            }
            Ok(LevelCheckpoint::load(&p)?.model)
        })
        .collect()
}

fn imputed_name(id: &str, rep: usize, sample: usize) -> String {
    format!("{id}__r{rep:03}__s{sample:02}.jsonl")
}

/// Splits `<id>__r<rep>__s<sample>` file stems.
fn parse_imputed_name(stem: &str) -> Option<(String, usize, usize)> {
    let mut parts = stem.split("__");
    let id = parts.next()?.to_string();
    let rep = parts.next()?.strip_prefix('r')?.parse().ok()?;
    let sample = parts.next()?.strip_prefix('s')?.parse().ok()?;
    Some((id, rep, sample))
}

fn mask_seed(seed: u64, rep: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((rep as u64) << 32) | index as u64);
    rng.random()
}

pub fn cmd_impute(cfg: &RunConfig, run_dir: &Path) -> Result<usize> {
    let mut test = read_split(&run_dir.join("data/test"))?;
    if let Some(n) = cfg.impute.max_series {
        test.truncate(n);
    }
    let models = load_models(cfg, run_dir)?;
    let data = run_dir.join("data");
    for sub in ["masked", "imputed", "plans"] {
        let d = data.join(sub);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        mkdir(&d)?;
    }
    let mut files = 0;
    for (index, (id, series)) in test.iter().enumerate() {
        for rep in 0..cfg.impute.repeats.max(1) {
            let seed = mask_seed(cfg.seed, rep, index);
            let masked = mask_series(series, &cfg.impute.masking, seed)?;
            let stem = format!("{id}__r{rep:03}");
            let both = masked.observed.union(&masked.targets)?;
            write_series_jsonl(&data.join(format!("masked/{stem}.jsonl")), &both, None)?;
            let runs = impute(&masked.observed, &masked.targets, &models, &cfg.scheduler, cfg.impute.n_samples, seed)?;
            if cfg.impute.dump_plan {
                let executed = crate::schedule::SchedulePlan {
                    steps: runs[0].trace.clone(),
                };
                executed.write_jsonl(&data.join(format!("plans/{stem}.jsonl")))?;
            }
            for (s, run) in runs.iter().enumerate() {
                let flags = run.imputed_flags(&masked.targets);
                write_series_jsonl(&data.join("imputed").join(imputed_name(id, rep, s)), &run.completed, Some(&flags))?;
                files += 1;
            }
        }
    }
    update_manifest(run_dir, "impute", cfg, serde_json::json!({"files": files}))?;
    Ok(files)
}

fn key(t: f64) -> u64 {
    t.to_bits()
}

fn xy(set: &SeriesSet) -> Vec<[f64; 2]> {
    to_sequence(set).iter().map(|p| [p.data[0], p.data[1]]).collect()
}

/// Per-(series, repeat) reports and their mean.
pub fn cmd_eval(cfg: &RunConfig, run_dir: &Path) -> Result<MetricReport> {
    let truth: BTreeMap<String, SeriesSet> = read_split(&run_dir.join("data/test"))?.into_iter().collect();
    let dir = run_dir.join("data/imputed");
    let mut groups: BTreeMap<(String, usize), Vec<(SeriesSet, Vec<bool>)>> = BTreeMap::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for p in paths {
        let stem = p.file_stem().expect("named file").to_string_lossy().into_owned();
        let (id, rep, _) =
            parse_imputed_name(&stem).ok_or_else(|| Error::parse(&p, "file name is not <id>__r<rep>__s<sample>"))?;
        if !truth.contains_key(&id) {
            return Err(Error::SeriesMismatch(format!("imputed series {id} has no truth file")));
        }
        groups.entry((id, rep)).or_default().push(read_series_jsonl(&p)?);
    }
    let reports_dir = mkdir(&run_dir.join("reports/series"))?;
    let tcfg = &cfg.eval.trajectory;
    let mut reports = Vec::new();
    for ((id, rep), samples) in &groups {
        let y = &truth[id];
        let truth_at: BTreeMap<u64, &Vec<f64>> = y.points().iter().map(|p| (key(p.time), &p.data)).collect();
        let mut report = MetricReport::default();
        let mut preds = Vec::new();
        let mut want = Vec::new();
        let mut observed = Vec::new();
        for (k, (set, flags)) in samples.iter().enumerate() {
            let ordered = to_sequence(set);
            let mut h = Vec::new();
            let mut yy = Vec::new();
            for (p, &imp) in ordered.iter().zip(flags) {
                let t = truth_at
                    .get(&key(p.time))
                    .ok_or_else(|| Error::SeriesMismatch(format!("{id}: time {} not in truth", p.time)))?;
                if imp {
                    h.push(p.data.clone());
                    yy.push((*t).clone());
                } else if k == 0 {
                    observed.push(p.clone());
                }
            }
            preds.push(h);
            want = yy;
        }
        let scores = stochastic_scores(&preds, &want)?;
        report.insert("mse", scores.avg_mse)?;
        if preds.len() > 1 {
            report.insert("min_mse", scores.min_mse)?;
            report.insert("avg_mse", scores.avg_mse)?;
            if scores.ratio.is_finite() {
                report.insert("ratio", scores.ratio)?;
            }
        }
        let observed = SeriesSet::new(y.dim(), observed)?;
        if !want.is_empty() && !cfg.partial() && !observed.is_empty() {
            let times: Vec<f64> = to_sequence(&samples[0].0)
                .iter()
                .zip(&samples[0].1)
                .filter(|(_, &f)| f)
                .map(|(p, _)| p.time)
                .collect();
            report.insert("linear_mse", mse(&linear_interpolate(&observed, &times)?, &want)?)?;
        }
        if y.dim() == 2 && y.len() >= 3 {
            let stats: Vec<_> = samples
                .iter()
                .map(|(s, _)| trajectory_stats(&xy(s), tcfg))
                .collect::<Result<_>>()?;
            let n = stats.len() as f64;
            report.insert("sinuosity", stats.iter().map(|s| s.sinuosity).sum::<f64>() / n)?;
            report.insert("step_change", stats.iter().map(|s| s.step_change).sum::<f64>() / n)?;
            report.insert("reflection_to_wall", stats.iter().map(|s| s.reflection_to_wall).sum::<f64>() / n)?;
            report.insert("avg_length", stats.iter().map(|s| s.avg_length).sum::<f64>() / n)?;
        }
        report
            .config
            .insert("n_samples".into(), serde_json::json!(samples.len()));
        report
            .config
            .insert("turn_angle_deg".into(), serde_json::json!(tcfg.turn_angle_deg));
        report.config.insert("side".into(), serde_json::json!(tcfg.side));
        write_text(&reports_dir.join(format!("{id}__r{rep:03}.json")), &report.to_json())?;
        reports.push(report);
    }
    let mut agg = MetricReport::mean_of(&reports)?;
    agg.config.insert("n_reports".into(), serde_json::json!(reports.len()));
    let rdir = run_dir.join("reports");
    write_text(&rdir.join("aggregate.json"), &agg.to_json())?;
    write_text(
        &rdir.join("aggregate.csv"),
        &format!("{}\n{}\n", agg.csv_header(), agg.csv_row("test")),
    )?;
    update_manifest(run_dir, "eval", cfg, serde_json::json!({"reports": reports.len()}))?;
    Ok(agg)
}

/// Observed points as circles, imputed as squares, truth as a polyline.
pub fn trajectory_svg(truth: &SeriesSet, completed: &SeriesSet, imputed: &[bool], side: f64) -> String {
    let scale = 500.0 / side;
    let pt = |p: &[f64]| (20.0 + p[0] * scale, 20.0 + (side - p[1]) * scale);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="540" height="540" viewBox="0 0 540 540">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="20" y="20" width="500" height="500" fill="none" stroke="black"/>"#
    );
    let line: Vec<String> = to_sequence(truth)
        .iter()
        .map(|p| {
            let (x, y) = pt(&p.data);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline class="truth" points="{}" fill="none" stroke="purple" stroke-width="1"/>"#,
        line.join(" ")
    );
    for (p, &imp) in completed.points().iter().zip(imputed) {
        let (x, y) = pt(&p.data);
        if imp {
            let _ = writeln!(
                s,
                r#"<rect class="imputed" x="{:.2}" y="{:.2}" width="4" height="4" fill="red"/>"#,
                x - 2.0,
                y - 2.0
            );
        } else {
            let _ = writeln!(s, r#"<circle class="observed" cx="{x:.2}" cy="{y:.2}" r="4" fill="green"/>"#);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Returns the number of files written.
pub fn cmd_export(cfg: &RunConfig, run_dir: &Path) -> Result<usize> {
    let out = mkdir(&run_dir.join("exports"))?;
    let truth: BTreeMap<String, SeriesSet> = read_split(&run_dir.join("data/test"))?.into_iter().collect();
    let models = if cfg.export.attention {
        Some(load_models(cfg, run_dir)?)
    } else {
        None
    };
    let dir = run_dir.join("data/imputed");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut written = 0;
    for p in paths.into_iter().take(cfg.export.series) {
        let stem = p.file_stem().expect("named file").to_string_lossy().into_owned();
        let (id, _, _) = parse_imputed_name(&stem).ok_or_else(|| Error::parse(&p, "unexpected file name"))?;
        let y = truth
            .get(&id)
            .ok_or_else(|| Error::SeriesMismatch(format!("imputed series {id} has no truth file")))?;
        let (completed, flags) = read_series_jsonl(&p)?;
        write_text(&out.join(format!("{stem}.csv")), &series_to_csv(&completed))?;
        written += 1;
        if completed.dim() == 2 {
            write_text(
                &out.join(format!("{stem}.svg")),
                &trajectory_svg(y, &completed, &flags, cfg.eval.trajectory.side),
            )?;
            written += 1;
        } else {
            eprintln!("notice: {stem} has {} dimensions; SVG skipped", completed.dim());
        }
        if let Some(models) = &models {
            let observed: Vec<TimedPoint> = completed
                .points()
                .iter()
                .zip(&flags)
                .filter(|(_, &f)| !f)
                .map(|(p, _)| p.clone())
                .collect();
            let targets: Vec<f64> = completed
                .points()
                .iter()
                .zip(&flags)
                .filter(|(_, &f)| f)
                .map(|(p, _)| p.time)
                .collect();
            if targets.is_empty() {
                continue;
            }
            let observed = SeriesSet::new(completed.dim(), observed)?;
            let targets = SeriesSet::targets_at(completed.dim(), &targets)?;
            // attention of the first step, the one that sees only observations
            let first = plan(&observed, &targets, &cfg.scheduler)?.steps.remove(0);
            let model = &models[first.model_id];
            let enc = if cfg.partial() {
                encode_partial(&observed, &first.target_times, &model.cfg)?
            } else {
                encode_inputs(&observed, &first.target_times, &model.cfg)?
            };
            let maps = model.export_attention(&enc)?;
            write_text(&out.join(format!("{stem}.attention.csv")), &attention_to_csv(&maps))?;
            written += 1;
        }
    }
    update_manifest(run_dir, "export", cfg, serde_json::json!({"files": written}))?;
    Ok(written)
}

pub fn error_json(e: &Error) -> String {
    serde_json::json!({"kind": e.kind(), "message": e.to_string()}).to_string()
}

pub fn run(cli: Cli) -> Result<()> {
    let (common, stop_after) = match &cli.command {
        Command::Train(a) => (&a.common, a.stop_after),
        Command::Generate(a) | Command::Impute(a) | Command::Eval(a) | Command::Export(a) => (a, None),
    };
    let cfg = RunConfig::load(&common.config, common.seed)?;
    let _lock = RunLock::acquire(&common.run_dir)?;
    let dir = &common.run_dir;
    match cli.command {
        Command::Generate(_) => cmd_generate(&cfg, dir),
        Command::Train(_) => {
            if !cmd_train(&cfg, dir, stop_after)? {
                eprintln!("notice: training stopped early; rerun train to resume");
            }
            Ok(())
        }
        Command::Impute(_) => cmd_impute(&cfg, dir).map(|_| ()),
        Command::Eval(_) => {
            let agg = cmd_eval(&cfg, dir)?;
            println!("{}", agg.to_json());
            Ok(())
        }
        Command::Export(_) => cmd_export(&cfg, dir).map(|_| ()),
    }
}
