//! Joint training of backbone, parallel decoder and teacher.
//!
//! The parallel decoder is trained under the easy-first schedule with
//! teacher forcing: at each iteration the loss covers the positions still
//! holding MASK, the most confident of them (by the model's own
//! probabilities) are then committed with their *label* values.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;

use easyfirst_tensor::{Adam, AdamConfig, Element, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{parse_bool, parse_value, ExperimentConfig};
use crate::datagen::Sample;
use crate::easyfirst::{argmax, schedule_k, DecodeOptions};
use crate::harness::evaluate;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, Session};
use crate::teacher::teacher_forward;
use crate::transformer::{build_parallel_mask, SeqLayout};
use crate::vocab::{Vocab, EOS, MASK, NUM_CLASSES};
use crate::{Error, Result};

/// Cosine distance denominator guard.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// How many easy-first iterations contribute to the parallel loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationLoss {
    /// Every iteration of the schedule.
    Full,
    /// One uniformly drawn iteration; earlier ones run without gradients.
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// K, easy-first iterations.
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub precision: Precision,
    pub mimicking: bool,
    pub iteration_loss: IterationLoss,
    pub lambda_nat: f64,
    pub lambda_at: f64,
    pub lambda_ffn: f64,
    /// Metrics line every this many steps; 0 disables.
    pub log_every: usize,
    /// Validation every this many steps and at the end; 0 only at the end.
    pub eval_every: usize,
    /// Batches prepared ahead of the optimizer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5,
            lr: 1e-4,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            data_seed: 1,
            train_samples: 50_000,
            val_samples: 500,
            precision: Precision::F32,
            mimicking: true,
            iteration_loss: IterationLoss::Full,
            lambda_nat: 1.0,
            lambda_at: 1.0,
            lambda_ffn: 1.0,
            log_every: 50,
            eval_every: 0,
            queue_depth: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        schedule_k(model.max_len, self.iterations)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.queue_depth == 0 {
            return Err(Error::config("batch_size and queue_depth must be positive"));
        }
        if [self.lambda_nat, self.lambda_at, self.lambda_ffn]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "iterations" => self.iterations = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "data_seed" => self.data_seed = parse_value(key, value)?,
            "train_samples" => self.train_samples = parse_value(key, value)?,
            "val_samples" => self.val_samples = parse_value(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => {
                        return Err(Error::config(format!(
                            "precision must be f32 or f64, got {value:?}"
                        )))
                    }
                }
            }
            "mimicking" => self.mimicking = parse_bool(key, value)?,
            "iteration_loss" => {
                self.iteration_loss = match value {
                    "full" => IterationLoss::Full,
                    "sampled" => IterationLoss::Sampled,
                    _ => {
                        return Err(Error::config(format!(
                            "iteration_loss must be full or sampled, got {value:?}"
                        )))
                    }
                }
            }
            "lambda_nat" => self.lambda_nat = parse_value(key, value)?,
            "lambda_at" => self.lambda_at = parse_value(key, value)?,
            "lambda_ffn" => self.lambda_ffn = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "queue_depth" => self.queue_depth = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("iterations", self.iterations.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("val_samples", self.val_samples.to_string()),
            (
                "precision",
                match self.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
                .to_string(),
            ),
            ("mimicking", self.mimicking.to_string()),
            (
                "iteration_loss",
                match self.iteration_loss {
                    IterationLoss::Full => "full",
                    IterationLoss::Sampled => "sampled",
                }
                .to_string(),
            ),
            ("lambda_nat", self.lambda_nat.to_string()),
            ("lambda_at", self.lambda_at.to_string()),
            ("lambda_ffn", self.lambda_ffn.to_string()),
            ("log_every", self.log_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("queue_depth", self.queue_depth.to_string()),
        ]
    }

    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda_nat, self.lambda_at, self.lambda_ffn]
    }
}

/// Loss values of one step. `ffn` is measured even when mimicking is off
/// but then takes no part in `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub nat: f64,
    pub at: f64,
    pub ffn: f64,
    pub total: f64,
    pub lambdas: [f64; 3],
    pub mimicking: bool,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.nat, self.at, self.ffn, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L_nat={:.6} L_at={:.6} L_ffn={:.6} total={:.6}",
            self.nat, self.at, self.ffn, self.total
        )
    }
}

/// Tape handles produced by the parallel training pass.
#[derive(Debug, Clone)]
pub struct ParallelPass {
    /// Mean cross-entropy over all (iteration, MASK position) pairs.
    pub nat: Var,
    /// `[B·L × d]` FFN output of every differentiated iteration.
    pub ffn: Vec<Var>,
    /// Positions committed by each iteration, per sample, in rank order.
    pub commits: Vec<Vec<Vec<usize>>>,
}

/// Labels padded with EOS to `len`.
pub fn padded_targets(label: &[usize], len: usize) -> Vec<usize> {
    let mut t = label.to_vec();
    t.resize(len, EOS);
    t
}

/// Teacher-forced easy-first pass. Iterations before `first_graded` run
/// with gradients disabled and add no loss terms.
pub fn parallel_training_pass<T: Element>(
    model: &Model<T>,
    s: &mut Session<T>,
    labels: &[Vec<usize>],
    features: &crate::backbone::FeatureMap<T>,
    iterations: usize,
    first_graded: usize,
) -> Result<ParallelPass> {
    let len = model.config.max_len;
    let k = schedule_k(len, iterations)?;
    let batch = labels.len();
    let layout = SeqLayout::uniform(batch, len);
    let targets: Vec<usize> = labels.iter().flat_map(|l| padded_targets(l, len)).collect();
    let grids: Vec<usize> = (0..batch).collect();
    let grad = s.tape.grad_enabled();
    let memory = model.parallel.project_memory(s, features)?;
    let mut tokens = vec![MASK; batch * len];
    let mut commits = vec![Vec::new(); batch];
    let mut terms = Vec::new();
    let mut ffn = Vec::new();
    for it in 0..iterations {
        let graded = it >= first_graded;
        s.tape.set_grad_enabled(grad && graded);
        let masks = tokens
            .chunks(len)
            .map(|seq| build_parallel_mask(seq, MASK, None))
            .collect::<Result<Vec<_>>>()?;
        let pass = model
            .parallel
            .forward(s, &tokens, &layout, &masks, features, &grids, &memory)?;
        let open: Vec<bool> = tokens.iter().map(|&t| t == MASK).collect();
        if graded {
            let ignore: Vec<bool> = open.iter().map(|&o| !o).collect();
            let count = open.iter().filter(|&&o| o).count();
            terms.push((s.tape.cross_entropy(pass.logits, &targets, &ignore)?, count));
            ffn.push(pass.ffn);
        }
        let logits = s.tape.value(pass.logits);
        for b in 0..batch {
            let mut ranked: Vec<(usize, f64)> = (0..len)
                .filter(|&t| open[b * len + t])
                .map(|t| (t, max_prob(logits.row(b * len + t))))
                .collect();
            ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            ranked.truncate(k);
            let chosen: Vec<usize> = ranked.into_iter().map(|(t, _)| t).collect();
            for &t in &chosen {
                tokens[b * len + t] = targets[b * len + t];
            }
            commits[b].push(chosen);
        }
    }
    s.tape.set_grad_enabled(grad);
    let total: usize = terms.iter().map(|(_, n)| n).sum();
    let weighted: Vec<(Var, T)> = terms
        .iter()
        .map(|&(v, n)| (v, T::from_f64(n as f64 / total as f64)))
        .collect();
    let nat = s.tape.weighted_sum(&weighted)?;
    Ok(ParallelPass { nat, ffn, commits })
}

fn max_prob<T: Element>(logits: &[T]) -> f64 {
    let row: Vec<f64> = logits.iter().map(|&v| Element::to_f64(v)).collect();
    let (_, m) = argmax(&row);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    1.0 / z
}

/// Mean over iterations of the per-position cosine distance between each
/// parallel FFN output `[B·L × d]` and the teacher's `[Σ T_b × d]`, over
/// positions `t < T_b`. The teacher side is detached here.
pub fn mimic_loss<T: Element>(
    s: &mut Session<T>,
    f_par: &[Var],
    f_at: Var,
    teacher_layout: &SeqLayout,
    len: usize,
) -> Result<Var> {
    if f_par.is_empty() {
        return Err(Error::config(
            "mimic_loss needs at least one parallel iteration",
        ));
    }
    let mut index = Vec::with_capacity(teacher_layout.batch() * len);
    let mut valid = Vec::with_capacity(teacher_layout.batch() * len);
    for (&start, &n) in teacher_layout.starts.iter().zip(&teacher_layout.lens) {
        for t in 0..len {
            index.push(start + t.min(n - 1));
            valid.push(t < n);
        }
    }
    let detached = s.tape.stop_gradient(f_at);
    let aligned = s.tape.gather_rows(detached, &index)?;
    let eps = T::from_f64(COSINE_EPS);
    let weight = T::from_f64(1.0 / f_par.len() as f64);
    let mut terms = Vec::with_capacity(f_par.len());
    for &f in f_par {
        terms.push((s.tape.cosine_distance(f, aligned, &valid, eps)?, weight));
    }
    Ok(s.tape.weighted_sum(&terms)?)
}

/// Tape handles of the joint objective for one batch.
#[derive(Debug, Clone)]
pub struct StepGraph {
    pub nat: Var,
    pub at: Var,
    pub ffn: Var,
    pub total: Var,
}

pub fn encode_labels(samples: &[&Sample]) -> Result<Vec<Vec<usize>>> {
    samples.iter().map(|s| Vocab.encode(&s.label)).collect()
}

/// Builds the full objective for one batch on `s`. `first_graded` selects
/// the sampled iteration; 0 grades every iteration.
pub fn build_objective<T: Element>(
    model: &Model<T>,
    s: &mut Session<T>,
    samples: &[&Sample],
    config: &TrainConfig,
    first_graded: usize,
) -> Result<StepGraph> {
    let labels = encode_labels(samples)?;
    let images = model.image_input(s, samples)?;
    let features = model.backbone.encode(s, images)?;
    let teacher_memory = model.teacher.project_memory(s, &features)?;
    let teacher = teacher_forward(model, s, &labels, &features, &teacher_memory)?;
    let ignore = vec![false; teacher.targets.len()];
    let at = s
        .tape
        .cross_entropy(teacher.logits, &teacher.targets, &ignore)?;
    let par = parallel_training_pass(
        model,
        s,
        &labels,
        &features,
        config.iterations,
        first_graded,
    )?;
    let ffn = mimic_loss(
        s,
        &par.ffn,
        teacher.ffn,
        &teacher.layout,
        model.config.max_len,
    )?;
    let mut terms = vec![
        (par.nat, T::from_f64(config.lambda_nat)),
        (at, T::from_f64(config.lambda_at)),
    ];
    if config.mimicking {
        terms.push((ffn, T::from_f64(config.lambda_ffn)));
    }
    let total = s.tape.weighted_sum(&terms)?;
    Ok(StepGraph {
        nat: par.nat,
        at,
        ffn,
        total,
    })
}

pub fn breakdown<T: Element>(s: &Session<T>, g: &StepGraph, config: &TrainConfig) -> LossBreakdown {
    let v = |x: Var| s.tape.value(x).item().to_f64();
    LossBreakdown {
        nat: v(g.nat),
        at: v(g.at),
        ffn: v(g.ffn),
        total: v(g.total),
        lambdas: config.lambdas(),
        mimicking: config.mimicking,
    }
}

/// Loss of a batch without updating anything.
pub fn batch_loss<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    samples: &[&Sample],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut s = Session::inference(params);
    let g = build_objective(model, &mut s, samples, config, 0)?;
    Ok(breakdown(&s, &g, config))
}

/// Forward, backward and one Adam update.
pub struct Trainer<T> {
    pub config: TrainConfig,
    optimizer: Adam<T>,
    rng: ChaCha8Rng,
    steps: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(config: TrainConfig) -> Self {
        let optimizer = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
        Trainer {
            config,
            optimizer,
            rng,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Returns the pre-update losses of the batch.
    pub fn step(
        &mut self,
        model: &Model<T>,
        params: &mut ParamStore<T>,
        samples: &[&Sample],
    ) -> Result<LossBreakdown> {
        let first_graded = match self.config.iteration_loss {
            IterationLoss::Full => 0,
            IterationLoss::Sampled => self.rng.gen_range(0..self.config.iterations),
        };
        let (losses, grads) = {
            let mut s = Session::training(params);
            let g = build_objective(model, &mut s, samples, &self.config, first_graded)?;
            let losses = breakdown(&s, &g, &self.config);
            if !losses.is_finite() {
                let labels: Vec<&str> = samples.iter().map(|s| s.label.as_str()).collect();
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {} ({losses}); batch labels {labels:?}",
                    self.steps + 1
                )));
            }
            s.tape.backward(g.total)?;
            (losses, s.param_grads())
        };
        let grad_refs: Vec<Option<&[T]>> = grads.iter().map(|g| g.as_deref()).collect();
        self.optimizer.step(&mut params.tensors_mut(), &grad_refs)?;
        self.steps += 1;
        Ok(losses)
    }
}

/// One metrics log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub val_accuracy: Option<f64>,
}

impl MetricsRecord {
    pub const HEADER: &'static str = "step\tL_nat\tL_at\tL_ffn\ttotal\tval_accuracy";

    pub fn line(&self) -> String {
        let l = &self.losses;
        let acc = self
            .val_accuracy
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{acc}",
            self.step, l.nat, l.at, l.ffn, l.total
        )
    }
}

/// Where [`train`] reports progress.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    /// Written after every validation and at the end.
    pub checkpoint: Option<PathBuf>,
    /// Receives the offending batch's labels on a numerical abort.
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: u64,
    pub first: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub val_accuracy: Option<f64>,
}

/// Sample order of every epoch, fixed by `seed`.
pub fn epoch_order(count: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Trains in place. Batches are gathered by a producer thread into a
/// bounded queue; their order depends only on the seed.
pub fn train<T: Element>(
    model: &Model<T>,
    params: &mut ParamStore<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    experiment: &ExperimentConfig,
    mut outputs: TrainOutputs<'_>,
) -> Result<TrainReport> {
    let config = &experiment.train;
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let mut trainer = Trainer::new(config.clone());
    let mut report = TrainReport {
        steps: 0,
        first: None,
        last: None,
        val_accuracy: None,
    };
    if let Some(w) = outputs.metrics.as_deref_mut() {
        writeln!(w, "{}", MetricsRecord::HEADER)?;
    }
    let decode = DecodeOptions::new(model.config.max_len, config.iterations);
    let validate = |params: &ParamStore<T>| -> Result<Option<f64>> {
        if val_set.is_empty() {
            return Ok(None);
        }
        Ok(Some(
            evaluate(model, params, val_set, decode, config.batch_size)?
                .0
                .word_accuracy,
        ))
    };
    let batch_size = config.batch_size;
    let (tx, rx) = sync_channel::<Vec<usize>>(config.queue_depth);
    std::thread::scope(|scope| -> Result<()> {
        let epochs = config.epochs;
        let seed = config.seed;
        let count = train_set.len();
        scope.spawn(move || {
            for epoch in 0..epochs {
                for chunk in epoch_order(count, epoch, seed).chunks(batch_size) {
                    if tx.send(chunk.to_vec()).is_err() {
                        return;
                    }
                }
            }
        });
        for batch in rx {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train_set[i]).collect();
            let losses = match trainer.step(model, params, &samples) {
                Err(Error::Numerical(msg)) => {
                    if let Some(path) = &outputs.dump {
                        let labels: Vec<&str> = samples.iter().map(|s| s.label.as_str()).collect();
                        std::fs::write(path, format!("{msg}\n{}\n", labels.join("\n")))?;
                    }
                    return Err(Error::Numerical(msg));
                }
                other => other?,
            };
            report.first.get_or_insert(losses);
            report.last = Some(losses);
            let step = trainer.steps();
            let eval_now = config.eval_every > 0 && step % config.eval_every as u64 == 0;
            let val_accuracy = if eval_now { validate(params)? } else { None };
            if eval_now {
                if let Some(path) = &outputs.checkpoint {
                    checkpoint::save(path, experiment, params)?;
                }
            }
            let log_now = config.log_every > 0 && step % config.log_every as u64 == 0;
            if log_now || eval_now {
                if let Some(w) = outputs.metrics.as_deref_mut() {
                    let rec = MetricsRecord {
                        step,
                        losses,
                        val_accuracy,
                    };
                    writeln!(w, "{}", rec.line())?;
                    w.flush()?;
                }
            }
        }
        Ok(())
    })?;
    report.steps = trainer.steps();
    report.val_accuracy = validate(params)?;
    if let (Some(w), Some(last)) = (outputs.metrics.as_deref_mut(), report.last) {
        let rec = MetricsRecord {
            step: report.steps,
            losses: last,
            val_accuracy: report.val_accuracy,
        };
        writeln!(w, "{}", rec.line())?;
    }
    if let Some(path) = &outputs.checkpoint {
        checkpoint::save(path, experiment, params)?;
    }
    Ok(report)
}

/// Class probabilities of a logits row, for diagnostics and tests.
pub fn probabilities<T: Element>(logits: &Tensor<T>, row: usize) -> Vec<f64> {
    let r: Vec<f64> = logits
        .row(row)
        .iter()
        .map(|&v| Element::to_f64(v))
        .collect();
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
    debug_assert_eq!(r.len(), NUM_CLASSES);
    r.iter().map(|v| (v - m).exp() / z).collect()
}
