//! Easy-first iterative parallel decoding.
//!
//! Every iteration predicts all positions that still hold MASK, commits the
//! `k = ⌈L/K⌉` most confident of them, and reverts the rest to MASK.
//! Committed positions are never re-predicted. Once an EOS is committed,
//! the leftmost one fixes the text length: every later position becomes a
//! committed EOS and is hidden from subsequent self-attention.

use std::fmt::Write as _;

use easyfirst_tensor::{Element, Tensor};
use serde::Serialize;

use crate::backbone::FeatureMap;
use crate::datagen::Sample;
use crate::model::Model;
use crate::params::{ParamStore, Session};
use crate::transformer::{build_parallel_mask, ProjectedMemory, SeqLayout};
use crate::vocab::{Vocab, EOS, MASK, NUM_CLASSES};
use crate::{Error, Result};

/// Per-sample state of the easy-first loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub tokens: Vec<usize>,
    pub committed: Vec<bool>,
    /// Max-class probability at commit time; 0 for uncommitted and
    /// EOS-forced positions.
    pub confidence: Vec<f64>,
    /// Positions committed by EOS length post-processing rather than by
    /// confidence.
    pub forced: Vec<bool>,
    /// Iterations completed.
    pub iteration: usize,
    pub eos_cut: Option<usize>,
}

impl DecodeState {
    pub fn new(len: usize) -> Self {
        DecodeState {
            tokens: vec![MASK; len],
            committed: vec![false; len],
            confidence: vec![0.0; len],
            forced: vec![false; len],
            iteration: 0,
            eos_cut: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn committed_count(&self) -> usize {
        self.committed.iter().filter(|&&c| c).count()
    }

    pub fn is_complete(&self) -> bool {
        self.committed.iter().all(|&c| c)
    }

    /// Output tokens: everything before the EOS cut. Without a cut (no EOS
    /// committed, or post-processing disabled) every non-EOS token is kept.
    pub fn output_tokens(&self) -> Vec<usize> {
        match self.eos_cut {
            Some(cut) => self.tokens[..cut].to_vec(),
            None => self
                .tokens
                .iter()
                .copied()
                .filter(|&t| t != EOS && t != MASK)
                .collect(),
        }
    }

    pub fn text(&self) -> String {
        Vocab.decode(&self.output_tokens())
    }
}

/// Commits per iteration, `⌈L/K⌉`.
pub fn schedule_k(len: usize, iterations: usize) -> Result<usize> {
    if iterations < 1 || iterations > len {
        return Err(Error::config(format!(
            "iterations must lie in 1..={len}, got {iterations}"
        )));
    }
    Ok(len.div_ceil(iterations))
}

/// Commits made in each iteration when no EOS fires early.
pub fn commit_schedule(len: usize, iterations: usize) -> Result<Vec<usize>> {
    let k = schedule_k(len, iterations)?;
    let mut left = len;
    Ok((0..iterations)
        .map(|_| {
            let c = k.min(left);
            left -= c;
            c
        })
        .collect())
}

/// Row-major `[len × 37]` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    len: usize,
    data: Vec<f64>,
}

impl ProbTable {
    pub fn new(len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * NUM_CLASSES {
            return Err(Error::config(format!(
                "probability table needs {} entries, got {}",
                len * NUM_CLASSES,
                data.len()
            )));
        }
        Ok(ProbTable { len, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * NUM_CLASSES..(t + 1) * NUM_CLASSES]
    }

    /// `(argmax, max probability)`; ties go to the lower class index.
    pub fn argmax(&self, t: usize) -> (usize, f64) {
        argmax(self.row(t))
    }
}

pub(crate) fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (i, p);
        }
    }
    best
}

/// Source of per-position class probabilities for a batch of states.
pub trait ParallelPredictor {
    /// `samples[i]` identifies which input `states[i]` belongs to.
    fn predict(&mut self, samples: &[usize], states: &[&DecodeState]) -> Result<Vec<ProbTable>>;
}

/// Result of one prediction step.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: ProbTable,
    /// ŷ: argmax at MASK positions, the previous token elsewhere.
    pub tokens: Vec<usize>,
    /// Max-class probability at MASK positions, 0 elsewhere.
    pub confidence: Vec<f64>,
}

/// Applies the prediction rule to one state given its probabilities.
pub fn apply_prediction(state: &DecodeState, probs: ProbTable) -> Prediction {
    let mut tokens = state.tokens.clone();
    let mut confidence = vec![0.0; state.len()];
    for t in 0..state.len() {
        if !state.committed[t] {
            let (tok, p) = probs.argmax(t);
            tokens[t] = tok;
            confidence[t] = p;
        }
    }
    Prediction {
        probs,
        tokens,
        confidence,
    }
}

pub fn predict_step<P: ParallelPredictor + ?Sized>(
    predictor: &mut P,
    samples: &[usize],
    states: &[&DecodeState],
) -> Result<Vec<Prediction>> {
    let tables = predictor.predict(samples, states)?;
    if tables.len() != states.len() || tables.iter().zip(states).any(|(t, s)| t.len() != s.len()) {
        return Err(Error::config(
            "predictor returned tables that do not match the states",
        ));
    }
    Ok(states
        .iter()
        .zip(tables)
        .map(|(s, p)| apply_prediction(s, p))
        .collect())
}

/// Commits the `k` most confident MASK positions (ties → lower index) and
/// returns the new state with the committed positions in rank order.
pub fn update_step(
    state: &DecodeState,
    prediction: &Prediction,
    k: usize,
) -> (DecodeState, Vec<usize>) {
    let mut open: Vec<usize> = (0..state.len()).filter(|&t| !state.committed[t]).collect();
    open.sort_by(|&a, &b| {
        prediction.confidence[b]
            .total_cmp(&prediction.confidence[a])
            .then(a.cmp(&b))
    });
    open.truncate(k.max(1));
    let mut next = state.clone();
    for &t in &open {
        next.tokens[t] = prediction.tokens[t];
        next.committed[t] = true;
        next.confidence[t] = prediction.confidence[t];
    }
    next.iteration += 1;
    (next, open)
}

/// Fixes the length at the leftmost committed EOS. Returns the new state
/// and the positions it forced to EOS.
pub fn eos_postprocess(state: &DecodeState) -> (DecodeState, Vec<usize>) {
    let Some(cut) = (0..state.len()).find(|&t| state.committed[t] && state.tokens[t] == EOS) else {
        return (state.clone(), Vec::new());
    };
    let mut next = state.clone();
    next.eos_cut = Some(cut);
    let mut forced = Vec::new();
    for t in cut + 1..state.len() {
        if !(next.committed[t] && next.tokens[t] == EOS) {
            forced.push(t);
            next.tokens[t] = EOS;
            next.committed[t] = true;
            next.confidence[t] = 0.0;
            next.forced[t] = true;
        }
    }
    (next, forced)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub iterations: usize,
    pub max_len: usize,
    pub eos_postprocess: bool,
    pub record_probabilities: bool,
    /// Stop once every position is committed. Off, a decode always runs
    /// exactly `iterations` passes; later passes then commit nothing.
    pub early_stop: bool,
}

impl DecodeOptions {
    pub fn new(max_len: usize, iterations: usize) -> Self {
        DecodeOptions {
            iterations,
            max_len,
            eos_postprocess: true,
            record_probabilities: false,
            early_stop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommitRecord {
    pub pos: usize,
    pub token: String,
    pub confidence: f64,
}

/// One iteration of a decode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub k: usize,
    /// Committed this iteration, most confident first.
    pub committed: Vec<CommitRecord>,
    /// Predicted this iteration but reverted to MASK.
    pub abandoned: Vec<CommitRecord>,
    pub forced_eos: Vec<usize>,
    pub eos_cut: Option<usize>,
    /// y after the update: `_` = MASK, `#` = EOS.
    pub tokens: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One JSON object per iteration, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(step).expect("trace serializes")
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub text: String,
    pub state: DecodeState,
    pub trace: DecodeTrace,
    /// Sequential decoder passes executed.
    pub passes: usize,
}

/// Decodes a batch of inputs; `batch` is the number of samples the
/// predictor serves.
pub fn decode_batch<P: ParallelPredictor + ?Sized>(
    predictor: &mut P,
    batch: usize,
    options: DecodeOptions,
) -> Result<Vec<DecodeOutput>> {
    let k = schedule_k(options.max_len, options.iterations)?;
    let mut states: Vec<DecodeState> = (0..batch)
        .map(|_| DecodeState::new(options.max_len))
        .collect();
    let mut traces = vec![DecodeTrace::default(); batch];
    let mut passes = vec![0usize; batch];
    for iteration in 1..=options.iterations {
        let active: Vec<usize> = (0..batch)
            .filter(|&b| !options.early_stop || !states[b].is_complete())
            .collect();
        if active.is_empty() {
            break;
        }
        let refs: Vec<&DecodeState> = active.iter().map(|&b| &states[b]).collect();
        let predictions = predict_step(predictor, &active, &refs)?;
        for (&b, pred) in active.iter().zip(predictions) {
            let (mut next, chosen) = update_step(&states[b], &pred, k);
            let mut forced = Vec::new();
            if options.eos_postprocess {
                let (pp, f) = eos_postprocess(&next);
                next = pp;
                forced = f;
            }
            let record = |t: usize| CommitRecord {
                pos: t,
                token: Vocab.symbol(pred.tokens[t]),
                confidence: pred.confidence[t],
            };
            let abandoned = (0..next.len())
                .filter(|&t| !states[b].committed[t] && !chosen.contains(&t))
                .map(record)
                .collect();
            traces[b].steps.push(TraceStep {
                iteration,
                k,
                committed: chosen.iter().map(|&t| record(t)).collect(),
                abandoned,
                forced_eos: forced,
                eos_cut: next.eos_cut,
                tokens: Vocab.render(&next.tokens),
                probabilities: options.record_probabilities.then(|| {
                    (0..pred.probs.len())
                        .map(|t| pred.probs.row(t).to_vec())
                        .collect()
                }),
            });
            passes[b] += 1;
            states[b] = next;
        }
    }
    Ok(states
        .into_iter()
        .zip(traces)
        .zip(passes)
        .map(|((state, trace), passes)| DecodeOutput {
            text: state.text(),
            state,
            trace,
            passes,
        })
        .collect())
}

pub fn decode<P: ParallelPredictor + ?Sized>(
    predictor: &mut P,
    options: DecodeOptions,
) -> Result<DecodeOutput> {
    Ok(decode_batch(predictor, 1, options)?.remove(0))
}

/// Parallel decoder over an encoded image batch. The feature grid and its
/// cross-attention projections are computed once and reused by every
/// iteration.
pub struct ModelPredictor<'a, T> {
    model: &'a Model<T>,
    session: Session<'a, T>,
    features: FeatureMap<T>,
    memory: Vec<ProjectedMemory>,
    record_ffn: bool,
    ffn_history: Vec<(Vec<usize>, Tensor<T>)>,
    truncate: bool,
}

impl<'a, T: Element> ModelPredictor<'a, T> {
    pub fn new(
        model: &'a Model<T>,
        params: &'a ParamStore<T>,
        samples: &[&Sample],
    ) -> Result<Self> {
        let mut session = Session::inference(params);
        let images = model.image_input(&mut session, samples)?;
        let features = model.backbone.encode(&mut session, images)?;
        Self::from_features(model, session, features)
    }

    pub fn from_features(
        model: &'a Model<T>,
        mut session: Session<'a, T>,
        features: FeatureMap<T>,
    ) -> Result<Self> {
        let memory = model.parallel.project_memory(&mut session, &features)?;
        Ok(ModelPredictor {
            model,
            session,
            features,
            memory,
            record_ffn: false,
            ffn_history: Vec::new(),
            truncate: true,
        })
    }

    pub fn batch(&self) -> usize {
        self.features.batch
    }

    /// Keeps the FFN output of every predict call.
    pub fn record_ffn(&mut self, on: bool) {
        self.record_ffn = on;
    }

    /// `(samples, [samples·L × d])` per predict call, oldest first.
    pub fn ffn_history(&self) -> &[(Vec<usize>, Tensor<T>)] {
        &self.ffn_history
    }

    pub fn clear_history(&mut self) {
        self.ffn_history.clear();
    }

    /// On (the default), sequences with an EOS cut are run only up to the
    /// cut. Keys past it are hidden from every query, so the rows that are
    /// computed come out the same either way.
    pub fn truncate_at_cut(&mut self, on: bool) {
        self.truncate = on;
    }
}

impl<T: Element> ParallelPredictor for ModelPredictor<'_, T> {
    /// Rows past an EOS cut belong to positions already forced to EOS; when
    /// truncated they are reported as certain EOS and their FFN rows as zero.
    fn predict(&mut self, samples: &[usize], states: &[&DecodeState]) -> Result<Vec<ProbTable>> {
        let len = self.model.config.max_len;
        let lens: Vec<usize> = states
            .iter()
            .map(|s| match s.eos_cut {
                Some(cut) if self.truncate => cut + 1,
                _ => len,
            })
            .collect();
        let layout = SeqLayout::from_lens(lens.clone());
        let tokens: Vec<usize> = states
            .iter()
            .zip(&lens)
            .flat_map(|(s, &n)| s.tokens[..n].iter().copied())
            .collect();
        let masks = states
            .iter()
            .zip(&lens)
            .map(|(s, &n)| build_parallel_mask(&s.tokens[..n], MASK, s.eos_cut))
            .collect::<Result<Vec<_>>>()?;
        let pass = self.model.parallel.forward(
            &mut self.session,
            &tokens,
            &layout,
            &masks,
            &self.features,
            samples,
            &self.memory,
        )?;
        if self.record_ffn {
            let ffn = self.session.tape.value(pass.ffn);
            let d = ffn.cols();
            let mut padded = vec![T::zero(); states.len() * len * d];
            for (i, (&start, &n)) in layout.starts.iter().zip(&lens).enumerate() {
                padded[i * len * d..][..n * d]
                    .copy_from_slice(&ffn.data()[start * d..(start + n) * d]);
            }
            self.ffn_history.push((
                samples.to_vec(),
                Tensor::from_vec(vec![states.len() * len, d], padded)?,
            ));
        }
        let probs = self.session.tape.softmax(pass.logits);
        let values = self.session.tape.value(probs);
        layout
            .starts
            .iter()
            .zip(&lens)
            .map(|(&start, &n)| {
                let mut rows: Vec<f64> = values.data()
                    [start * NUM_CLASSES..(start + n) * NUM_CLASSES]
                    .iter()
                    .map(|&v| Element::to_f64(v))
                    .collect();
                for _ in n..len {
                    rows.extend((0..NUM_CLASSES).map(|c| if c == EOS { 1.0 } else { 0.0 }));
                }
                ProbTable::new(len, rows)
            })
            .collect()
    }
}
