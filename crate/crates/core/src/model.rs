//! Permutation-equivariant imputation network.
//!
//! Every point becomes one input row: `[phi(t), x, 1]` for observations and
//! `[phi(t), 0, 0]` for targets (or `[phi(t), x*m, m]` with per-dimension
//! masks). A linear embedding feeds `blocks` rounds of multi-head
//! self-attention and a ReLU feedforward layer, each wrapped in a residual
//! connection. Targets never attend to targets. A final linear read-out is
//! applied at target rows only; the stochastic variant adds mean and
//! log-scale maps on top of it.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{bind_params, AttentionMask, ParamTensor, Tape, Tensor, Var};
use crate::series::SeriesSet;
use crate::time_codec::TimeCodecConfig;

pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub codec: TimeCodecConfig,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    #[serde(default)]
    pub stochastic_head: bool,
    #[serde(default)]
    pub partial_dims: bool,
    #[serde(default = "yes")]
    pub residual: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Two blocks, four 32-wide heads, width 128.
    pub fn desk(data_dim: usize) -> Self {
        ModelConfig {
            data_dim,
            codec: TimeCodecConfig::default(),
            hidden_dim: 128,
            blocks: 2,
            heads: 4,
            head_dim: 32,
            ff_dim: 256,
            stochastic_head: false,
            partial_dims: false,
            residual: true,
        }
    }

    /// Eight blocks, twelve 128-wide heads, width 1024.
    pub fn full(data_dim: usize) -> Self {
        ModelConfig {
            data_dim,
            codec: TimeCodecConfig::default(),
            hidden_dim: 1024,
            blocks: 8,
            heads: 12,
            head_dim: 128,
            ff_dim: 2048,
            stochastic_head: false,
            partial_dims: false,
            residual: true,
        }
    }

    pub fn preset(name: &str, data_dim: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(data_dim)),
            "full" => Ok(Self::full(data_dim)),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.ff_dim <= self.hidden_dim {
            return Err(Error::Config(format!(
                "ff_dim {} must exceed hidden_dim {}",
                self.ff_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let tau = self.codec.tau();
        if self.partial_dims {
            tau + 2 * self.data_dim
        } else {
            tau + self.data_dim + 1
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, [usize; 2])> {
        let (h, a, f, d) = (self.hidden_dim, self.attn_dim(), self.ff_dim, self.data_dim);
        let mut out = vec![
            ("in.w".to_string(), [self.input_dim(), h]),
            ("in.b".to_string(), [1, h]),
        ];
        for b in 0..self.blocks {
            for (name, shape) in [
                ("q.w", [h, a]),
                ("q.b", [1, a]),
                ("k.w", [h, a]),
                ("k.b", [1, a]),
                ("v.w", [h, a]),
                ("v.b", [1, a]),
                ("o.w", [a, h]),
                ("o.b", [1, h]),
                ("ff1.w", [h, f]),
                ("ff1.b", [1, f]),
                ("ff2.w", [f, h]),
                ("ff2.b", [1, h]),
            ] {
                out.push((format!("block{b}.{name}"), shape));
            }
        }
        out.push(("out.w".to_string(), [h, d]));
        out.push(("out.b".to_string(), [1, d]));
        if self.stochastic_head {
            out.push(("mu.w".to_string(), [d, d]));
            out.push(("mu.b".to_string(), [1, d]));
            out.push(("sigma.w".to_string(), [d, d]));
            out.push(("sigma.b".to_string(), [1, d]));
        }
        out
    }
}

/// Encoded input rows plus which rows are targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub elements: Tensor,
    pub target_indices: Vec<usize>,
    pub target_times: Vec<f64>,
}

impl Encoded {
    pub fn is_target_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.elements.rows()];
        for &i in &self.target_indices {
            m[i] = true;
        }
        m
    }
}

/// Rows for every observed point (set order) followed by one row per target.
pub fn encode_inputs(observed: &SeriesSet, targets: &[f64], cfg: &ModelConfig) -> Result<Encoded> {
    if cfg.partial_dims {
        return Err(Error::Config("use encode_partial for partial-dimension models".into()));
    }
    let d = cfg.data_dim;
    if observed.dim() != d {
        return Err(Error::ShapeMismatch {
            op: "encode_inputs",
            left: vec![observed.dim()],
            right: vec![d],
        });
    }
    let tau = cfg.codec.tau();
    let width = cfg.input_dim();
    let n = observed.len() + targets.len();
    let mut elements = Tensor::zeros(n, width);
    for (i, p) in observed.points().iter().enumerate() {
        let row = elements.row_mut(i);
        cfg.codec.encode_into(p.time, row);
        row[tau..tau + d].copy_from_slice(&p.data);
        row[tau + d] = 1.0;
    }
    let mut target_indices = Vec::with_capacity(targets.len());
    for (j, &t) in targets.iter().enumerate() {
        let i = observed.len() + j;
        cfg.codec.encode_into(t, elements.row_mut(i));
        target_indices.push(i);
    }
    Ok(Encoded {
        elements,
        target_indices,
        target_times: targets.to_vec(),
    })
}

/// Partial-dimension rows `[phi(t), x*m, m]` for every point of `points`;
/// rows whose time is in `targets` are the ones to predict.
pub fn encode_partial(points: &SeriesSet, targets: &[f64], cfg: &ModelConfig) -> Result<Encoded> {
    if !cfg.partial_dims {
        return Err(Error::Config("model was not built for partial dimensions".into()));
    }
    let d = cfg.data_dim;
    if points.dim() != d {
        return Err(Error::ShapeMismatch {
            op: "encode_partial",
            left: vec![points.dim()],
            right: vec![d],
        });
    }
    let tau = cfg.codec.tau();
    let mut elements = Tensor::zeros(points.len(), cfg.input_dim());
    let mut target_indices = Vec::new();
    let mut target_times = Vec::new();
    for (i, p) in points.points().iter().enumerate() {
        let row = elements.row_mut(i);
        cfg.codec.encode_into(p.time, row);
        for k in 0..d {
            if p.dim_mask[k] {
                row[tau + k] = p.data[k];
                row[tau + d + k] = 1.0;
            }
        }
        if targets.contains(&p.time) {
            target_indices.push(i);
            target_times.push(p.time);
        }
    }
    if target_indices.len() != targets.len() {
        return Err(Error::UnknownTarget(
            *targets
                .iter()
                .find(|t| !target_times.contains(t))
                .expect("some target is missing"),
        ));
    }
    Ok(Encoded {
        elements,
        target_indices,
        target_times,
    })
}

/// Per-target predictions. `log_sigma` is present for stochastic models.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationResult {
    pub target_times: Vec<f64>,
    pub mean: Tensor,
    pub log_sigma: Option<Tensor>,
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    pub mean: Var,
    pub log_sigma: Option<Var>,
    /// `attention[block][head]`
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<ParamTensor>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = cfg
            .param_layout()
            .into_iter()
            .map(|(name, [r, c])| {
                let value = if name.ends_with(".b") {
                    Tensor::zeros(r, c)
                } else {
                    Tensor::xavier(r, c, &mut rng)
                };
                ParamTensor::new(name, value)
            })
            .collect();
        Ok(Model { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<ParamTensor>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.param_layout();
        if layout.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "model params",
                left: vec![layout.len()],
                right: vec![params.len()],
            });
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || *shape != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "model params",
                    left: shape.to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Attention mask forbidding every target-to-target pair.
    pub fn mask_for(is_target: &[bool]) -> AttentionMask {
        let n = is_target.len();
        let mut mask = AttentionMask::full(n, n);
        for i in (0..n).filter(|&i| is_target[i]) {
            for j in (0..n).filter(|&j| is_target[j]) {
                mask.forbid(i, j);
            }
        }
        mask
    }

    /// Records a forward pass. `pv` are this model's parameters bound on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, pv: &[Var], enc: &Encoded) -> Result<ForwardVars> {
        let cfg = &self.cfg;
        if enc.elements.cols() != cfg.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: enc.elements.shape().to_vec(),
                right: vec![cfg.input_dim()],
            });
        }
        if pv.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                op: "forward params",
                left: vec![pv.len()],
                right: vec![self.params.len()],
            });
        }
        let mask = Self::mask_for(&enc.is_target_mask());
        let x = tape.constant(enc.elements.clone());
        let mut h = tape.linear(x, pv[0], pv[1])?;
        let mut attention = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = &pv[2 + 12 * b..2 + 12 * (b + 1)];
            let q = tape.linear(h, p[0], p[1])?;
            let k = tape.linear(h, p[2], p[3])?;
            let v = tape.linear(h, p[4], p[5])?;
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut outs = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let s = hd * cfg.head_dim;
                let qh = tape.slice_cols(q, s, cfg.head_dim)?;
                let kh = tape.slice_cols(k, s, cfg.head_dim)?;
                let vh = tape.slice_cols(v, s, cfg.head_dim)?;
                let o = tape.scaled_dot_attention(qh, kh, vh, Some(&mask))?;
                heads.push(o);
                outs.push(o);
            }
            let cat = if outs.len() == 1 { outs[0] } else { tape.concat_last_dim(&outs)? };
            let proj = tape.linear(cat, p[6], p[7])?;
            h = if cfg.residual { tape.add(h, proj)? } else { proj };
            let f1 = tape.linear(h, p[8], p[9])?;
            let f1 = tape.relu(f1)?;
            let f2 = tape.linear(f1, p[10], p[11])?;
            h = if cfg.residual { tape.add(h, f2)? } else { f2 };
            attention.push(heads);
        }
        let base = 2 + 12 * cfg.blocks;
        let g = tape.slice_rows(h, &enc.target_indices)?;
        let out = tape.linear(g, pv[base], pv[base + 1])?;
        if cfg.stochastic_head {
            let mu = tape.linear(out, pv[base + 2], pv[base + 3])?;
            let ls = tape.linear(out, pv[base + 4], pv[base + 5])?;
            let ls = tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
            Ok(ForwardVars {
                mean: mu,
                log_sigma: Some(ls),
                attention,
            })
        } else {
            Ok(ForwardVars {
                mean: out,
                log_sigma: None,
                attention,
            })
        }
    }

    fn run(&self, enc: &Encoded) -> Result<(Tape, ForwardVars)> {
        let mut tape = Tape::new();
        let frozen: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let fv = self.forward_on_tape(&mut tape, &frozen, enc)?;
        Ok((tape, fv))
    }

    pub fn forward(&self, enc: &Encoded) -> Result<ImputationResult> {
        let (tape, fv) = self.run(enc)?;
        Ok(ImputationResult {
            target_times: enc.target_times.clone(),
            mean: tape.value(fv.mean).clone(),
            log_sigma: fv.log_sigma.map(|v| tape.value(v).clone()),
        })
    }

    /// Post-softmax weights of every block and head, as used by `forward`.
    pub fn export_attention(&self, enc: &Encoded) -> Result<Vec<AttentionMap>> {
        let (tape, fv) = self.run(enc)?;
        let mut out = Vec::new();
        for (b, heads) in fv.attention.iter().enumerate() {
            for (h, &v) in heads.iter().enumerate() {
                out.push(AttentionMap {
                    block: b,
                    head: h,
                    weights: tape.attention_weights(v).expect("attention node").clone(),
                });
            }
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        bind_params(tape, &self.params)
    }
}

/// One diagonal-Gaussian draw per target.
pub fn sample(result: &ImputationResult, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(result, &mut rng)
}

pub fn sample_with<R: Rng + ?Sized>(result: &ImputationResult, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let ls = result.log_sigma.as_ref().ok_or(Error::NoDistributionHead)?;
    Ok((0..result.mean.rows())
        .map(|r| {
            result
                .mean
                .row(r)
                .iter()
                .zip(ls.row(r))
                .map(|(&m, &s)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + s.exp() * z
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    pub head: usize,
    pub weights: Tensor,
}

/// CSV with columns `block,head,from_index,to_index,weight`. Weights use
/// the shortest representation that parses back to the same f64.
pub fn attention_to_csv(maps: &[AttentionMap]) -> String {
    let mut out = String::from("block,head,from_index,to_index,weight\n");
    for m in maps {
        for i in 0..m.weights.rows() {
            for j in 0..m.weights.cols() {
                let _ = writeln!(out, "{},{},{},{},{:?}", m.block, m.head, i, j, m.weights.get(i, j));
            }
        }
    }
    out
}

pub fn attention_from_csv(text: &str) -> Result<Vec<AttentionMap>> {
    let bad = |m: String| Error::Parse {
        path: "<attention csv>".into(),
        message: m,
    };
    let mut cells: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("line {}: expected 5 fields", n + 1)));
        }
        let u = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", n + 1)));
        let w = f[4].parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        cells.push((u(f[0])?, u(f[1])?, u(f[2])?, u(f[3])?, w));
    }
    let mut maps: Vec<AttentionMap> = Vec::new();
    let mut i = 0;
    while i < cells.len() {
        let (b, h) = (cells[i].0, cells[i].1);
        let mut j = i;
        while j < cells.len() && cells[j].0 == b && cells[j].1 == h {
            j += 1;
        }
        let rows = cells[i..j].iter().map(|c| c.2).max().unwrap_or(0) + 1;
        let cols = cells[i..j].iter().map(|c| c.3).max().unwrap_or(0) + 1;
        let mut weights = Tensor::zeros(rows, cols);
        for c in &cells[i..j] {
            weights.set(c.2, c.3, c.4);
        }
        maps.push(AttentionMap { block: b, head: h, weights });
        i = j;
    }
    Ok(maps)
}
