use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::nn::loss::{seg_losses_var, LossVars};
use crate::nn::{LossConfig, SegLosses};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::net::{as_batch, ToyNet};
use super::synth::{scene_rng, SynthScene};

pub const LOG_CSV_HEADER: &str = "epoch,iter,lr,loss_total,loss_seg,loss_edge";

/// `base · (1 − iter/total)^power`, clamped at 0 past the end.
pub fn poly_lr(base_lr: f64, iter: usize, total: usize, power: f64) -> f64 {
    if total == 0 || iter >= total {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / total as f64).powf(power)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub losses: SegLosses,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub total_iters: usize,
    /// Mean frequency-component weights over the training set after training
    /// (learnable variant only).
    pub frequency_weights: Option<Vec<f64>>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.iter, r.lr, r.losses.total, r.losses.seg, r.losses.edge
            )
            .unwrap();
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.losses.total)
    }
}

/// The loss of one scene built on `tape`.
pub fn scene_loss_var(
    net: &ToyNet,
    tape: &mut Tape,
    store: &ParamStore,
    scene: &SynthScene,
    loss: &LossConfig,
) -> Result<(LossVars, Option<crate::autodiff::Var>)> {
    let x = tape.constant(as_batch(&scene.image)?);
    let out = net.forward_with(tape, store, x)?;
    let s = net.cfg.input_size;
    let logits = tape.reshape(out.logits, &[net.cfg.classes, s, s])?;
    Ok((seg_losses_var(tape, logits, &scene.labels, loss)?, out.frequency_weights))
}

/// Mean of per-scene losses on one tape; used for whole-batch gradient checks.
pub fn batch_loss_var(
    net: &ToyNet,
    tape: &mut Tape,
    store: &ParamStore,
    scenes: &[&SynthScene],
    loss: &LossConfig,
) -> Result<crate::autodiff::Var> {
    let mut acc = None;
    for s in scenes {
        let (l, _) = scene_loss_var(net, tape, store, s, loss)?;
        acc = Some(match acc {
            None => l.total,
            Some(a) => tape.add(a, l.total)?,
        });
    }
    let acc = acc.ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    Ok(tape.scale(acc, 1.0 / scenes.len() as f64))
}

struct SceneResult {
    losses: SegLosses,
    grads: Vec<Option<Tensor>>,
    weights: Option<Vec<f64>>,
}

fn scene_pass(net: &ToyNet, scene: &SynthScene, loss: &LossConfig, with_grad: bool) -> Result<SceneResult> {
    let mut tape = Tape::new();
    let (v, w) = scene_loss_var(net, &mut tape, &net.store, scene, loss)?;
    let losses = SegLosses {
        total: tape.scalar(v.total),
        seg: tape.scalar(v.seg),
        edge: tape.scalar(v.edge),
    };
    let grads = if with_grad && losses.total.is_finite() {
        tape.param_gradients(v.total, net.store.len())?
    } else {
        Vec::new()
    };
    let weights = w.map(|w| tape.value(w).data().to_vec());
    Ok(SceneResult { losses, grads, weights })
}

/// Runs every scene through the network (in parallel when the pool has more than
/// one thread) and returns the results in input order.
fn run_scenes(
    pool: &rayon::ThreadPool,
    net: &ToyNet,
    scenes: &[&SynthScene],
    loss: &LossConfig,
    with_grad: bool,
) -> Result<Vec<SceneResult>> {
    if pool.current_num_threads() <= 1 {
        return scenes.iter().map(|s| scene_pass(net, s, loss, with_grad)).collect();
    }
    pool.install(|| scenes.par_iter().map(|s| scene_pass(net, s, loss, with_grad)).collect())
}

fn mean_losses(results: &[SceneResult]) -> SegLosses {
    let n = results.len() as f64;
    let mut m = SegLosses { total: 0.0, seg: 0.0, edge: 0.0 };
    for r in results {
        m.total += r.losses.total;
        m.seg += r.losses.seg;
        m.edge += r.losses.edge;
    }
    SegLosses { total: m.total / n, seg: m.seg / n, edge: m.edge / n }
}

/// SGD with momentum and coupled weight decay: `v ← μv + (g + λw)`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.iter().map(|(_, _, p)| Tensor::zeros(p.value.shape())).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            let w = p.value.data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *wi);
                *wi -= lr * *vi;
            }
        }
    }
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

/// Trains `net` in place. Rows are appended to `log` as they are produced, so the
/// log is usable even when training aborts.
///
/// On a non-finite loss or parameter the network is restored to the parameters of
/// the last iteration whose loss was finite and [`Error::Diverged`] is returned.
pub fn train(net: &mut ToyNet, data: &[SynthScene], cfg: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let pool = build_pool(cfg.threads)?;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    log.total_iters = total;
    let mut opt = Sgd::new(&net.store, cfg.momentum, cfg.weight_decay);
    let mut iter = 0;
    let mut last_good = snapshot(&net.store);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut scene_rng(cfg.seed, epoch, 2));
        for chunk in order.chunks(cfg.batch_size) {
            let lr = poly_lr(cfg.base_lr, iter, total, cfg.poly_power);
            let batch: Vec<&SynthScene> = chunk.iter().map(|&i| &data[i]).collect();
            let results = run_scenes(&pool, net, &batch, &cfg.loss, true)?;
            let losses = mean_losses(&results);
            log.rows.push(LogRow { epoch, iter, lr, losses });
            if !losses.total.is_finite() {
                restore(&mut net.store, last_good);
                return Err(diverged(iter));
            }
            last_good = snapshot(&net.store);

            net.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for r in &results {
                for (p, g) in net.store.iter_mut().zip(&r.grads) {
                    if let Some(g) = g {
                        for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                            *a += scale * b;
                        }
                    }
                }
            }
            opt.step(&mut net.store, lr);
            if !net.store.iter().all(|(_, _, p)| p.value.is_finite()) {
                restore(&mut net.store, last_good);
                return Err(diverged(iter + 1));
            }
            iter += 1;
        }
    }

    let all: Vec<&SynthScene> = data.iter().collect();
    let results = run_scenes(&pool, net, &all, &cfg.loss, false)?;
    let losses = mean_losses(&results);
    log.rows.push(LogRow { epoch: cfg.epochs, iter: total, lr: poly_lr(cfg.base_lr, total, total, cfg.poly_power), losses });
    if !losses.total.is_finite() {
        return Err(diverged(total));
    }
    log.frequency_weights = mean_weights(&results);
    Ok(())
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, _, p)| p.value.clone()).collect()
}

fn restore(store: &mut ParamStore, values: Vec<Tensor>) {
    for (p, v) in store.iter_mut().zip(values) {
        p.value = v;
    }
}

/// `iter` is the first iteration whose parameters are unusable.
fn diverged(iter: usize) -> Error {
    Error::Diverged {
        iter,
        last_good: if iter == 0 {
            "initial parameters".into()
        } else {
            format!("parameters used at iteration {}", iter - 1)
        },
    }
}

fn mean_weights(results: &[SceneResult]) -> Option<Vec<f64>> {
    let first = results.first()?.weights.as_ref()?;
    let mut acc = vec![0.0; first.len()];
    for r in results {
        for (a, w) in acc.iter_mut().zip(r.weights.as_ref()?) {
            *a += w;
        }
    }
    let n = results.len() as f64;
    Some(acc.into_iter().map(|a| a / n).collect())
}

/// Mean loss over `data` without updating anything.
pub fn evaluate_loss(net: &ToyNet, data: &[SynthScene], loss: &LossConfig, threads: usize) -> Result<SegLosses> {
    let pool = build_pool(threads)?;
    let all: Vec<&SynthScene> = data.iter().collect();
    Ok(mean_losses(&run_scenes(&pool, net, &all, loss, false)?))
}
