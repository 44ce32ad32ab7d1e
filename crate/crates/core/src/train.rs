//! Deep-supervised SGD training, the two-phase iterative strategy, loss
//! traces and checkpoints.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{self, NetworkSpec, ParamGroup};
use crate::scalar::Scalar;
use crate::tensor::{decode_container, encode_container, Graph, ParamSet, Tensor};

/// Learning rate of the reference schedule before any desk-scale scaling.
pub const REFERENCE_BASE_LR: f64 = 1e-6;
/// Desk-scale multiplier on [`REFERENCE_BASE_LR`] for training from scratch.
pub const DEFAULT_LR_MULTIPLIER: f64 = 5e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    EndToEnd,
    /// One alignment phase followed by `n` refinement phases.
    Iterative(usize),
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "end-to-end" {
            return Some(Strategy::EndToEnd);
        }
        let n = s.strip_prefix("iterative:")?.parse().ok()?;
        (n >= 1).then_some(Strategy::Iterative(n))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::EndToEnd => f.write_str("end-to-end"),
            Strategy::Iterative(n) => write!(f, "iterative:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_decay_period: u64,
    /// Per supervision point; empty means all 1.
    pub loss_weights: Vec<f64>,
    pub max_iters: u64,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: REFERENCE_BASE_LR,
            lr_multiplier: DEFAULT_LR_MULTIPLIER,
            momentum: 0.9,
            weight_decay: 0.002,
            batch_size: 1,
            lr_decay_period: 10_000,
            loss_weights: Vec::new(),
            max_iters: 5000,
            seed: 0,
            strategy: Strategy::EndToEnd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train config", msg));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.base_lr >= 0.0 && self.lr_multiplier >= 0.0) || !self.lr().is_finite() {
            return bad("learning rate must be finite and non-negative".into());
        }
        if self.lr_decay_period == 0 {
            return bad("lr decay period must be positive".into());
        }
        if self.batch_size != 1 {
            return bad(format!("only batch size 1 is supported, got {}", self.batch_size));
        }
        if let Some(w) = self.loss_weights.iter().find(|w| !(**w >= 0.0)) {
            return bad(format!("loss weights must be non-negative, got {w}"));
        }
        Ok(())
    }

    /// Base learning rate after the multiplier.
    pub fn lr(&self) -> f64 {
        self.base_lr * self.lr_multiplier
    }

    /// Decay coefficient handed to [`sgd_step`]. The multiplier makes up for
    /// the pixel-averaged loss, so decay is divided by it and the per-step
    /// shrink `lr * decay` stays what `base_lr` and `weight_decay` give.
    pub fn effective_weight_decay(&self) -> f64 {
        if self.lr_multiplier > 0.0 {
            self.weight_decay / self.lr_multiplier
        } else {
            self.weight_decay
        }
    }
}

/// Step schedule: one decade lower every `lr_decay_period` iterations.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let decades = iter / cfg.lr_decay_period;
    cfg.lr() / 10f64.powi(decades.min(i32::MAX as u64) as i32)
}

/// SGD with momentum and weight decay:
/// `buf = momentum * buf + grad + decay * param; param -= lr * buf`.
///
/// Every gradient is checked before anything is updated, so a non-finite
/// gradient leaves parameters and buffers untouched. Missing buffers start at
/// zero.
pub fn sgd_step<'a, T: Scalar>(
    params: &mut ParamSet<T>,
    grads: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    buffers: &mut ParamSet<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let grads: Vec<_> = grads.into_iter().collect();
    for (name, g) in &grads {
        let p = params.require(name)?;
        if p.dims() != g.dims() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: p.dims(),
                right: g.dims(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        if buffers.get(name).is_none() {
            buffers.insert(name, Tensor::zeros(g.dims()));
        }
        let b = buffers.get_mut(name).expect("inserted above");
        for ((pv, bv), &gv) in p.data_mut().iter_mut().zip(b.data_mut()).zip(g.data()) {
            *bv = mu * *bv + gv + wd * *pv;
            *pv -= lr * *bv;
        }
    }
    Ok(())
}

/// Hash of the network description, as 32 hex characters.
pub fn fingerprint(spec: &NetworkSpec) -> String {
    let digest = Sha256::digest(spec.to_config_text().as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

const BUFFER_PREFIX: &str = "buf.";
const TRAILER_LEN: usize = 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamSet<T>,
    /// Momentum buffers, keyed by parameter name.
    pub buffers: ParamSet<T>,
    pub iteration: u64,
    pub fingerprint: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        Checkpoint {
            params: spec.init_params(seed),
            buffers: ParamSet::new(),
            iteration: 0,
            fingerprint: fingerprint(spec),
        }
    }

    /// Container bytes followed by the iteration (`u64` LE) and fingerprint.
    /// Values are stored as 32-bit floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let names: Vec<String> = self.buffers.names().map(|n| format!("{BUFFER_PREFIX}{n}")).collect();
        let entries = self
            .params
            .iter()
            .chain(names.iter().map(String::as_str).zip(self.buffers.iter().map(|(_, t)| t)));
        let mut out = encode_container(entries);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(self.fingerprint.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (entries, used) = decode_container(bytes)?;
        let trailer = &bytes[used..];
        if trailer.len() != TRAILER_LEN {
            return Err(Error::Format {
                format: "checkpoint",
                offset: used,
                msg: format!("expected a {TRAILER_LEN}-byte trailer, found {} bytes", trailer.len()),
            });
        }
        let iteration = u64::from_le_bytes(trailer[..8].try_into().unwrap());
        let fp = std::str::from_utf8(&trailer[8..])
            .ok()
            .filter(|s| s.bytes().all(|b| b.is_ascii_hexdigit()))
            .ok_or_else(|| Error::Format {
                format: "checkpoint",
                offset: used + 8,
                msg: "fingerprint is not hex".into(),
            })?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        for (name, t) in entries {
            match name.strip_prefix(BUFFER_PREFIX) {
                Some(n) => buffers.insert(n, t.cast()),
                None => params.insert(name, t.cast()),
            };
        }
        Ok(Checkpoint {
            params,
            buffers,
            iteration,
            fingerprint: fp.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that every parameter the network needs is present with the
    /// right shape, naming the first that is not.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        for (name, dims, _) in spec.param_shapes() {
            let t = self.params.get(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.dims() != dims {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    left: dims,
                    right: t.dims(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: u64,
    pub lr: f64,
    pub total: f64,
    pub heads: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub head_names: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,total_loss");
        for n in &self.head_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.iter, r.lr, r.total);
            for h in &r.heads {
                let _ = write!(s, ",{h}");
            }
            s.push('\n');
        }
        s
    }

    /// Mean total loss over rows with `iter` in `range`.
    pub fn mean_total(&self, range: std::ops::Range<u64>) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| range.contains(&r.iter)).map(|r| r.total).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Iterations `[previous end, end)` train with `frozen` groups held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub end: u64,
    pub frozen: Vec<ParamGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLog {
    pub index: usize,
    pub start: u64,
    pub end: u64,
    pub frozen: Vec<ParamGroup>,
}

#[derive(Debug)]
pub struct TrainRun<T> {
    /// Last good state; on divergence, the state before the failing step.
    pub checkpoint: Checkpoint<T>,
    pub trace: LossTrace,
    pub phases: Vec<PhaseLog>,
    pub divergence: Option<Error>,
}

/// Phase schedule of the iterative strategy: alignment training with the
/// subspace span frozen, then `n` refinements with alignment frozen. The
/// iteration budget is split evenly.
pub fn iterative_phases(max_iters: u64, n: usize) -> Vec<Phase> {
    let parts = n as u64 + 1;
    (1..=parts)
        .map(|p| Phase {
            end: max_iters * p / parts,
            frozen: vec![if p == 1 { ParamGroup::SubspaceSpan } else { ParamGroup::Alignment }],
        })
        .collect()
}

/// Per-sample loss graph: weighted balanced cross-entropy summed over every
/// supervision point. Returns the graph, total node and head loss nodes.
pub fn loss_graph<T: Scalar>(
    spec: &NetworkSpec,
    params: ParamSet<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    weights: &[f64],
) -> Result<(Graph<T>, crate::tensor::NodeId, Vec<crate::tensor::NodeId>)> {
    let mut graph = Graph::new(params);
    let input = graph.input(image.clone());
    let nodes = model::record_forward(spec, &mut graph, input)?;
    let mut head_losses = Vec::with_capacity(spec.supervision.len());
    let mut weighted = Vec::with_capacity(spec.supervision.len());
    for (k, &(_, node)) in nodes.heads.iter().take(spec.supervision.len()).enumerate() {
        let l = graph.balanced_bce(node, target.clone())?;
        head_losses.push(l);
        let w = weights.get(k).copied().unwrap_or(1.0);
        weighted.push(if w == 1.0 { l } else { graph.scale(l, T::from_f64_lossy(w))? });
    }
    let total = graph.add(&weighted)?;
    Ok((graph, total, head_losses))
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains through `phases`, resuming from `resume` if given.
pub fn train_phased<T: Scalar>(
    spec: &NetworkSpec,
    samples: &[Sample],
    cfg: &TrainConfig,
    phases: &[Phase],
    resume: Option<Checkpoint<T>>,
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if !cfg.loss_weights.is_empty() && cfg.loss_weights.len() != spec.supervision.len() {
        return Err(Error::invalid(
            "train config",
            format!("{} loss weights for {} supervision points", cfg.loss_weights.len(), spec.supervision.len()),
        ));
    }
    let mut ck = match resume {
        Some(ck) => {
            if ck.fingerprint != fingerprint(spec) {
                return Err(Error::invalid("resume", "checkpoint was trained with a different network"));
            }
            ck.check_against(spec)?;
            ck
        }
        None => Checkpoint::init(spec, cfg.seed),
    };
    let data: Vec<(Tensor<T>, Tensor<T>)> = samples
        .iter()
        .map(|s| {
            let img = s.image_tensor();
            model::check_input_dims(spec, img.dims()).map_err(|e| Error::Dataset(format!("sample `{}`: {e}", s.id)))?;
            Ok((img, s.gt_tensor()))
        })
        .collect::<Result<_>>()?;
    let groups: Vec<(String, ParamGroup)> = spec.param_shapes().into_iter().map(|(n, _, g)| (n, g)).collect();
    let frozen_sets: Vec<HashSet<&str>> = phases
        .iter()
        .map(|p| {
            groups
                .iter()
                .filter(|(_, g)| p.frozen.contains(g))
                .map(|(n, _)| n.as_str())
                .collect()
        })
        .collect();

    let mut start = 0;
    let phase_logs = phases
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let log = PhaseLog {
                index,
                start,
                end: p.end.min(cfg.max_iters),
                frozen: p.frozen.clone(),
            };
            start = log.end;
            log
        })
        .collect();

    let mut trace = LossTrace {
        head_names: spec.supervision.iter().map(|&m| spec.map_label(m)).collect(),
        rows: Vec::new(),
    };
    let n = data.len() as u64;
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    for iter in ck.iteration..cfg.max_iters {
        let phase = phases.iter().position(|p| iter < p.end).unwrap_or(phases.len().saturating_sub(1));
        let epoch = iter / n;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, data.len());
            order_epoch = epoch;
        }
        let (image, target) = &data[order[(iter % n) as usize]];
        let params = std::mem::replace(&mut ck.params, ParamSet::new());
        let (graph, total, heads) = loss_graph(spec, params, image, target, &cfg.loss_weights)?;
        let loss = graph.value(total).item()?.as_f64();
        if !loss.is_finite() {
            ck.params = graph.into_params();
            ck.iteration = iter;
            return Ok(TrainRun {
                checkpoint: ck,
                trace,
                phases: phase_logs,
                divergence: Some(Error::Diverged { iter, loss }),
            });
        }
        let grads = graph.backward(total)?;
        let head_values = heads
            .iter()
            .map(|&h| graph.value(h).item().map(|v| v.as_f64()))
            .collect::<Result<Vec<_>>>()?;
        ck.params = graph.into_params();
        let lr = lr_at(iter, cfg);
        let frozen = frozen_sets.get(phase);
        let trainable = grads.iter().filter(|(name, _)| frozen.map_or(true, |f| !f.contains(name)));
        if let Err(e) = sgd_step(&mut ck.params, trainable, &mut ck.buffers, lr, cfg.momentum, cfg.effective_weight_decay()) {
            ck.iteration = iter;
            return Ok(TrainRun {
                checkpoint: ck,
                trace,
                phases: phase_logs,
                divergence: Some(e),
            });
        }
        trace.rows.push(TraceRow {
            iter,
            lr,
            total: loss,
            heads: head_values,
        });
        ck.iteration = iter + 1;
    }
    Ok(TrainRun {
        checkpoint: ck,
        trace,
        phases: phase_logs,
        divergence: None,
    })
}

pub fn train<T: Scalar>(spec: &NetworkSpec, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainRun<T>> {
    let phases = [Phase {
        end: cfg.max_iters,
        frozen: Vec::new(),
    }];
    train_phased(spec, samples, cfg, &phases, None)
}

pub fn train_iterative<T: Scalar>(spec: &NetworkSpec, samples: &[Sample], cfg: &TrainConfig, n_outer: usize) -> Result<TrainRun<T>> {
    if n_outer == 0 {
        return Err(Error::invalid("train_iterative", "needs at least one outer iteration"));
    }
    train_phased(spec, samples, cfg, &iterative_phases(cfg.max_iters, n_outer), None)
}

/// Runs the configured strategy, optionally resuming.
pub fn run<T: Scalar>(spec: &NetworkSpec, samples: &[Sample], cfg: &TrainConfig, resume: Option<Checkpoint<T>>) -> Result<TrainRun<T>> {
    let phases = match cfg.strategy {
        Strategy::EndToEnd => vec![Phase {
            end: cfg.max_iters,
            frozen: Vec::new(),
        }],
        Strategy::Iterative(n) => iterative_phases(cfg.max_iters, n),
    };
    train_phased(spec, samples, cfg, &phases, resume)
}

/// Sigmoid of the final output, row-major.
pub fn predict<T: Scalar>(spec: &NetworkSpec, params: &ParamSet<T>, sample: &Sample) -> Result<Vec<f64>> {
    let out = model::forward(spec, params, &sample.image_tensor::<T>())?;
    Ok(crate::tensor::kernels::sigmoid(out.final_logits())
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect())
}
