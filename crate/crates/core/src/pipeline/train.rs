use std::fs;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, synthetic_pairs, EvalPair};
use super::model::{forward_graph, Diagnostics, ModelParams, PairFeatures};
use super::weights::save_weights;
use super::ModelConfig;
use crate::assignment::matching_loss;
use crate::autodiff::{Backend, Eager, Tape, Var};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::error::{Error, Result};
use crate::featio::{generate_pair, SynthConfig};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor2;

/// Mixed into the training seed to draw the held-out evaluation pairs.
const EVAL_STREAM: u64 = 0x5EED_E7A1_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub synth: SynthConfig,
    pub eval_every: usize,
    pub eval_pairs: usize,
    /// Rewritten at every evaluation and at the end.
    pub checkpoint: Option<PathBuf>,
    /// JSON metric log, rewritten at every evaluation.
    pub metrics_log: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            steps: 2000,
            batch_size: 8,
            synth: SynthConfig::default(),
            eval_every: 250,
            eval_pairs: 32,
            checkpoint: None,
            metrics_log: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_pairs == 0 {
            return Err(Error::config(
                "steps, batch_size, eval_every and eval_pairs must be at least 1",
            ));
        }
        if self.synth.channels != model.channels {
            return Err(Error::config(format!(
                "synthetic descriptors have {} channels but the model expects {}",
                self.synth.channels, model.channels
            )));
        }
        self.synth.validate()?;
        model.validate()
    }
}

/// One line of the metric log. `loss` is the mean loss on the fixed
/// evaluation pairs; `train_loss` is the mean over the batches since the
/// previous record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub train_loss: Option<f64>,
    pub precision: f64,
    pub matching_score: f64,
    pub recall: f64,
    pub mean_matches: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<MetricRecord>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.log[0].loss
    }

    pub fn final_loss(&self) -> f64 {
        self.log[self.log.len() - 1].loss
    }
}

fn non_finite(context: &str, diag: &Diagnostics, err: Option<Error>) -> Error {
    let cause = err.map(|e| format!(" ({e})")).unwrap_or_default();
    Error::NonFinite(format!(
        "{context}{cause}; activation norms: {}",
        diag.describe_norms()
    ))
}

/// Loss of one pair with its parameter gradients (one entry per parameter
/// read, in tape order).
pub fn pair_loss(params: &ModelParams, pair: &EvalPair) -> Result<(f64, Vec<(ParamId, Tensor2)>)> {
    let features = PairFeatures::new(&pair.a, &pair.b)?;
    let mut tape = Tape::new();
    let mut diag = Diagnostics::default();
    let lp = match forward_graph(&mut tape, params, &features, None, &mut diag) {
        Ok(v) => v,
        Err(e @ Error::NonFinite(_)) => return Err(non_finite("forward pass", &diag, Some(e))),
        Err(e) => return Err(e),
    };
    let loss = matching_loss(&mut tape, &lp, &pair.gt)?;
    let value = tape.value(&loss).get(0, 0);
    if !value.is_finite() {
        return Err(non_finite(&format!("loss {value}"), &diag, None));
    }
    let grads = tape.backward(loss, &Tensor2::scalar(1.0))?;
    Ok((value, grads.param_grads(&tape)))
}

fn eval_loss(params: &ModelParams, pairs: &[EvalPair]) -> Result<f64> {
    let losses = pairs
        .par_iter()
        .map(|p| {
            let features = PairFeatures::new(&p.a, &p.b)?;
            let mut e = Eager::new();
            let mut diag = Diagnostics::default();
            let lp = forward_graph(&mut e, params, &features, None, &mut diag)?;
            let loss = matching_loss(&mut e, &lp, &p.gt)?;
            Ok(e.value(&loss).get(0, 0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / pairs.len() as f64)
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor2> = params
            .store
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor2]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, p) in params.store.iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (idx, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                m[idx] = beta1 * m[idx] + (1.0 - beta1) * g;
                v[idx] = beta2 * v[idx] + (1.0 - beta2) * g * g;
                *w -= lr * (m[idx] / c1) / ((v[idx] / c2).sqrt() + eps);
            }
        }
    }
}

pub fn train(train_cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    train_with(train_cfg, model_cfg, |_| {})
}

/// Trains from a fresh initialization, calling `on_record` for every metric
/// record as soon as it is computed.
pub fn train_with(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    train_cfg.validate(model_cfg)?;
    let mut params = ModelParams::new(model_cfg)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ EVAL_STREAM);
    let eval_set = synthetic_pairs(&train_cfg.synth.with_seed(eval_rng.next_u64()), train_cfg.eval_pairs)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut adam = Adam::new(train_cfg.adam.clone(), &params);
    let mut log = Vec::new();
    let (mut running, mut running_batches) = (0.0, 0usize);

    let mut record = |step: usize, params: &ModelParams, train_loss: Option<f64>, log: &mut Vec<MetricRecord>| -> Result<()> {
        let loss = eval_loss(params, &eval_set)?;
        let m = evaluate(params, &eval_set)?;
        let rec = MetricRecord {
            step,
            loss,
            train_loss,
            precision: m.precision,
            matching_score: m.matching_score,
            recall: m.recall,
            mean_matches: m.mean_matches,
        };
        on_record(&rec);
        log.push(rec);
        if let Some(path) = &train_cfg.metrics_log {
            let json = serde_json::to_string_pretty(log).expect("metric records serialize");
            fs::write(path, json).map_err(|e| Error::io(path, e))?;
        }
        if let Some(path) = &train_cfg.checkpoint {
            save_weights(params, path)?;
        }
        Ok(())
    };
    record(0, &params, None, &mut log)?;

    for step in 1..=train_cfg.steps {
        let batch = (0..train_cfg.batch_size)
            .map(|_| {
                let (a, b, gt) = generate_pair(&train_cfg.synth.with_seed(data_rng.next_u64()))?;
                Ok(EvalPair { a, b, gt })
            })
            .collect::<Result<Vec<_>>>()?;
        let results = batch
            .par_iter()
            .map(|p| pair_loss(&params, p))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
                other => other,
            })?;

        let scale = 1.0 / train_cfg.batch_size as f64;
        let mut grads: Vec<Tensor2> = params
            .store
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let mut batch_loss = 0.0;
        for (loss, pg) in &results {
            batch_loss += loss * scale;
            for (id, g) in pg {
                let slot = grads[id.index()].data_mut();
                for (s, &x) in slot.iter_mut().zip(g.data()) {
                    *s += scale * x;
                }
            }
        }
        adam.step(&mut params, &grads);
        running += batch_loss;
        running_batches += 1;

        if step % train_cfg.eval_every == 0 || step == train_cfg.steps {
            let train_loss = Some(running / running_batches as f64);
            running = 0.0;
            running_batches = 0;
            record(step, &params, train_loss, &mut log)?;
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Finite-difference check of the full network and loss on one synthetic
/// pair with `n_points` detections per image.
pub fn model_grad_check(cfg: &ModelConfig, n_points: usize, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let params = ModelParams::new(cfg)?;
    let synth = SynthConfig {
        n_points,
        channels: cfg.channels,
        rng_seed: seed,
        ..SynthConfig::default()
    };
    let (a, b, gt) = generate_pair(&synth)?;
    let features = PairFeatures::new(&a, &b)?;
    grad_check(
        &params.store,
        &[],
        |tape: &mut Tape, store: &ParamStore, _: &[Var]| {
            let view = ModelParams {
                store: store.clone(),
                ..params.clone()
            };
            let lp = forward_graph(tape, &view, &features, None, &mut Diagnostics::default())?;
            matching_loss(tape, &lp, &gt)
        },
        tolerance,
    )
}
