//! Autoregressive teacher: the same decoder stack run left to right over
//! `[BOS, label…]` under a future mask. Used for training and as the
//! sequential latency baseline; never needed by the parallel decoder.

use easyfirst_tensor::{Element, Var};
use serde::Serialize;

use crate::backbone::FeatureMap;
use crate::datagen::Sample;
use crate::easyfirst::argmax;
use crate::model::Model;
use crate::params::{ParamStore, Session};
use crate::transformer::{build_future_mask, ProjectedMemory, SeqLayout};
use crate::vocab::{Vocab, BOS, EOS, NUM_CLASSES};
use crate::{Error, Result};

/// Teacher-forced pass over a batch of labels.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    /// `[Σ T_b × 37]`
    pub logits: Var,
    /// `[Σ T_b × d]`
    pub ffn: Var,
    /// `T_b = label length + 1`.
    pub layout: SeqLayout,
    /// Labels followed by EOS, concatenated.
    pub targets: Vec<usize>,
}

/// Right-shifted input and EOS-terminated targets of one label.
pub fn teacher_sequences(label: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(label.len() + 1);
    input.push(BOS);
    input.extend_from_slice(label);
    let mut targets = label.to_vec();
    targets.push(EOS);
    (input, targets)
}

/// `labels[i]` holds character tokens only; sample `i` reads feature grid `i`.
pub fn teacher_forward<T: Element>(
    model: &Model<T>,
    s: &mut Session<T>,
    labels: &[Vec<usize>],
    features: &FeatureMap<T>,
    memory: &[ProjectedMemory],
) -> Result<TeacherOutputs> {
    let max_len = model.config.max_len;
    if let Some(l) = labels.iter().find(|l| l.len() + 1 > max_len) {
        return Err(Error::data(format!(
            "label of length {} exceeds max_len {max_len} with EOS",
            l.len()
        )));
    }
    let layout = SeqLayout::from_lens(labels.iter().map(|l| l.len() + 1).collect());
    let mut inputs = Vec::with_capacity(layout.total());
    let mut targets = Vec::with_capacity(layout.total());
    for l in labels {
        let (i, t) = teacher_sequences(l);
        inputs.extend(i);
        targets.extend(t);
    }
    let masks = layout
        .lens
        .iter()
        .map(|&n| build_future_mask(n))
        .collect::<Result<Vec<_>>>()?;
    let grids: Vec<usize> = (0..labels.len()).collect();
    let pass = model
        .teacher
        .forward(s, &inputs, &layout, &masks, features, &grids, memory)?;
    Ok(TeacherOutputs {
        logits: pass.logits,
        ffn: pass.ffn,
        layout,
        targets,
    })
}

/// Next-symbol distribution given the input prefix (starting with BOS).
pub trait AutoregressivePredictor {
    fn next(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// One greedy pass: the emitted symbol and its probability.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyStep {
    pub pass: usize,
    pub token: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutput {
    pub text: String,
    pub tokens: Vec<usize>,
    /// Sequential decoder passes: output length + 1 when EOS is reached.
    pub passes: usize,
    pub steps: Vec<GreedyStep>,
}

impl GreedyOutput {
    /// One JSON object per pass, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("step serializes") + "\n")
            .collect()
    }
}

/// Feeds back the argmax symbol until EOS or `max_len` passes.
pub fn teacher_greedy_decode<P: AutoregressivePredictor + ?Sized>(
    predictor: &mut P,
    max_len: usize,
) -> Result<GreedyOutput> {
    let mut prefix = vec![BOS];
    let mut passes = 0;
    let mut steps = Vec::new();
    while passes < max_len {
        let probs = predictor.next(&prefix)?;
        if probs.len() != NUM_CLASSES {
            return Err(Error::config(format!(
                "predictor returned {} classes",
                probs.len()
            )));
        }
        passes += 1;
        let (tok, p) = argmax(&probs);
        steps.push(GreedyStep {
            pass: passes,
            token: Vocab.symbol(tok),
            confidence: p,
        });
        if tok == EOS {
            break;
        }
        prefix.push(tok);
    }
    let tokens = prefix[1..].to_vec();
    Ok(GreedyOutput {
        text: Vocab.decode(&tokens),
        tokens,
        passes,
        steps,
    })
}

/// Teacher over one encoded image. Each pass reruns the stack on the whole
/// prefix; the feature grid and its projections are computed once.
pub struct TeacherPredictor<'a, T> {
    model: &'a Model<T>,
    session: Session<'a, T>,
    features: FeatureMap<T>,
    memory: Vec<ProjectedMemory>,
}

impl<'a, T: Element> TeacherPredictor<'a, T> {
    pub fn new(model: &'a Model<T>, params: &'a ParamStore<T>, sample: &Sample) -> Result<Self> {
        let mut session = Session::inference(params);
        let images = model.image_input(&mut session, &[sample])?;
        let features = model.backbone.encode(&mut session, images)?;
        let memory = model.teacher.project_memory(&mut session, &features)?;
        Ok(TeacherPredictor {
            model,
            session,
            features,
            memory,
        })
    }
}

impl<T: Element> AutoregressivePredictor for TeacherPredictor<'_, T> {
    fn next(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let n = prefix.len();
        let layout = SeqLayout::from_lens(vec![n]);
        let mask = build_future_mask(n)?;
        let pass = self.model.teacher.forward(
            &mut self.session,
            prefix,
            &layout,
            &[mask],
            &self.features,
            &[0],
            &self.memory,
        )?;
        let last = self.session.tape.gather_rows(pass.logits, &[n - 1])?;
        let probs = self.session.tape.softmax(last);
        Ok(self
            .session
            .tape
            .value(probs)
            .data()
            .iter()
            .map(|&v| Element::to_f64(v))
            .collect())
    }
}

/// Greedy recognition of one image with the teacher.
pub fn greedy_recognize<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    sample: &Sample,
) -> Result<GreedyOutput> {
    let mut predictor = TeacherPredictor::new(model, params, sample)?;
    teacher_greedy_decode(&mut predictor, model.config.max_len)
}
