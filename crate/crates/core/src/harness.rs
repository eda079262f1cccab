//! Evaluation, iteration sweeps, latency benchmarks and analysis exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use easyfirst_tensor::{Element, Tensor};

use crate::datagen::Sample;
use crate::easyfirst::{
    decode_batch, DecodeOptions, DecodeOutput, ModelPredictor, ParallelPredictor,
};
use crate::model::Model;
use crate::params::{ParamStore, Session};
use crate::teacher::{greedy_recognize, teacher_forward};
use crate::vocab::Vocab;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Bucket {
    pub count: usize,
    pub correct: usize,
}

impl Bucket {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    /// Exact-match rate.
    pub word_accuracy: f64,
    /// Mean of `1 − lev(gt, pred) / max(|gt|, |pred|)`.
    pub char_accuracy: f64,
    /// Keyed by ground-truth length.
    pub by_length: BTreeMap<usize, Bucket>,
}

impl EvalReport {
    /// Exact-match accuracy over samples whose label length satisfies `keep`.
    pub fn accuracy_where(&self, keep: impl Fn(usize) -> bool) -> Option<f64> {
        let (n, c) = self
            .by_length
            .iter()
            .filter(|(len, _)| keep(**len))
            .fold((0, 0), |(n, c), (_, b)| (n + b.count, c + b.correct));
        (n > 0).then(|| c as f64 / n as f64)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "metric\tvalue");
        let _ = writeln!(out, "samples\t{}", self.samples);
        let _ = writeln!(out, "word_accuracy\t{:.6}", self.word_accuracy);
        let _ = writeln!(out, "char_accuracy\t{:.6}", self.char_accuracy);
        let _ = writeln!(out, "\nlength\tcount\tcorrect\taccuracy");
        for (len, b) in &self.by_length {
            let _ = writeln!(
                out,
                "{len}\t{}\t{}\t{:.6}",
                b.count,
                b.correct,
                b.accuracy()
            );
        }
        out
    }
}

/// Scores `(ground truth, prediction)` pairs.
pub fn score<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> EvalReport {
    let mut report = EvalReport::default();
    let (mut words, mut chars) = (0usize, 0.0f64);
    for (gt, pred) in pairs {
        report.samples += 1;
        let hit = gt == pred;
        words += hit as usize;
        let longest = gt.chars().count().max(pred.chars().count());
        chars += if longest == 0 {
            1.0
        } else {
            1.0 - strsim::levenshtein(gt, pred) as f64 / longest as f64
        };
        let bucket = report.by_length.entry(gt.chars().count()).or_default();
        bucket.count += 1;
        bucket.correct += hit as usize;
    }
    if report.samples > 0 {
        report.word_accuracy = words as f64 / report.samples as f64;
        report.char_accuracy = chars / report.samples as f64;
    }
    report
}

fn check_labels(samples: &[Sample]) -> Result<()> {
    for s in samples {
        Vocab.encode(&s.label).map_err(|e| {
            Error::data(format!(
                "label {:?} is outside the model vocabulary: {e}",
                s.label
            ))
        })?;
    }
    Ok(())
}

/// Decodes every sample with any predictor serving `labels.len()` inputs.
pub fn evaluate_predictor<P: ParallelPredictor + ?Sized>(
    predictor: &mut P,
    labels: &[&str],
    options: DecodeOptions,
) -> Result<(EvalReport, Vec<String>)> {
    let outputs = decode_batch(predictor, labels.len(), options)?;
    let preds: Vec<String> = outputs.into_iter().map(|o| o.text).collect();
    Ok((
        score(labels.iter().copied().zip(preds.iter().map(String::as_str))),
        preds,
    ))
}

/// Easy-first recognition of `samples` in batches of `batch`.
pub fn recognize<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    samples: &[Sample],
    options: DecodeOptions,
    batch: usize,
) -> Result<Vec<DecodeOutput>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut predictor = ModelPredictor::new(model, params, &refs)?;
        out.extend(decode_batch(&mut predictor, refs.len(), options)?);
    }
    Ok(out)
}

/// Word/char accuracy of easy-first decoding; also returns predictions.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    samples: &[Sample],
    options: DecodeOptions,
    batch: usize,
) -> Result<(EvalReport, Vec<String>)> {
    check_labels(samples)?;
    let preds: Vec<String> = recognize(model, params, samples, options, batch)?
        .into_iter()
        .map(|o| o.text)
        .collect();
    let report = score(
        samples
            .iter()
            .map(|s| s.label.as_str())
            .zip(preds.iter().map(String::as_str)),
    );
    Ok((report, preds))
}

/// Word accuracy of teacher greedy decoding.
pub fn evaluate_teacher<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    samples: &[Sample],
) -> Result<EvalReport> {
    check_labels(samples)?;
    let preds = samples
        .iter()
        .map(|s| greedy_recognize(model, params, s).map(|g| g.text))
        .collect::<Result<Vec<_>>>()?;
    Ok(score(
        samples
            .iter()
            .map(|s| s.label.as_str())
            .zip(preds.iter().map(String::as_str)),
    ))
}

/// Recognition strategy timed by the benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    EasyFirst { iterations: usize },
    TeacherGreedy,
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::EasyFirst { iterations } => format!("easy_first_k{iterations}"),
            Strategy::TeacherGreedy => "teacher_greedy".to_string(),
        }
    }
}

/// Recognizes one image from scratch (encoder included) and returns the
/// number of sequential decoder passes. Easy-first runs its full schedule
/// so the pass count is exactly K.
pub fn recognize_one<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    sample: &Sample,
    strategy: Strategy,
) -> Result<usize> {
    match strategy {
        Strategy::EasyFirst { iterations } => {
            let mut predictor = ModelPredictor::new(model, params, &[sample])?;
            let mut options = DecodeOptions::new(model.config.max_len, iterations);
            options.early_stop = false;
            Ok(decode_batch(&mut predictor, 1, options)?[0].passes)
        }
        Strategy::TeacherGreedy => Ok(greedy_recognize(model, params, sample)?.passes),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 20,
            runs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub runs: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub mean_steps: f64,
    pub min_steps: usize,
    pub max_steps: usize,
}

/// Times `runs` single-sample recognitions cycling through `samples`,
/// after `warmup` untimed ones.
pub fn time_strategy<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    samples: &[Sample],
    strategy: Strategy,
    config: BenchConfig,
) -> Result<BenchRow> {
    let mut cell = Cell::new(samples, strategy, config)?;
    for _ in 0..config.warmup {
        cell.run(model, params, false)?;
    }
    for _ in 0..config.runs {
        cell.run(model, params, true)?;
    }
    Ok(cell.finish())
}

/// One (sample set, strategy) pair being timed.
struct Cell<'a> {
    samples: &'a [Sample],
    strategy: Strategy,
    next: usize,
    times: Vec<f64>,
    steps: Vec<usize>,
}

impl<'a> Cell<'a> {
    fn new(samples: &'a [Sample], strategy: Strategy, config: BenchConfig) -> Result<Self> {
        if samples.is_empty() || config.runs == 0 {
            return Err(Error::data("benchmark needs samples and at least one run"));
        }
        Ok(Self {
            samples,
            strategy,
            next: 0,
            times: Vec::with_capacity(config.runs),
            steps: Vec::with_capacity(config.runs),
        })
    }

    fn run<T: Element>(
        &mut self,
        model: &Model<T>,
        params: &ParamStore<T>,
        timed: bool,
    ) -> Result<()> {
        let sample = &self.samples[self.next % self.samples.len()];
        self.next += 1;
        let start = Instant::now();
        let n = recognize_one(model, params, sample, self.strategy)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if timed {
            self.times.push(ms);
            self.steps.push(n);
        }
        Ok(())
    }

    fn finish(mut self) -> BenchRow {
        let mean_ms = self.times.iter().sum::<f64>() / self.times.len() as f64;
        self.times.sort_by(f64::total_cmp);
        let mid = self.times.len() / 2;
        let median_ms = if self.times.len() % 2 == 0 {
            (self.times[mid - 1] + self.times[mid]) / 2.0
        } else {
            self.times[mid]
        };
        BenchRow {
            strategy: self.strategy,
            runs: self.times.len(),
            mean_ms,
            median_ms,
            mean_steps: self.steps.iter().sum::<usize>() as f64 / self.steps.len() as f64,
            min_steps: *self.steps.iter().min().expect("nonempty"),
            max_steps: *self.steps.iter().max().expect("nonempty"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    /// `(label length or None for the whole set, row)`.
    pub rows: Vec<(Option<usize>, BenchRow)>,
}

impl BenchReport {
    pub fn get(&self, length: Option<usize>, strategy: Strategy) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|(l, r)| *l == length && r.strategy == strategy)
            .map(|(_, r)| r)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "strategy\tlength\truns\tmean_ms\tmedian_ms\tmean_steps\tmin_steps\tmax_steps\n",
        );
        for (len, r) in &self.rows {
            let len = len.map_or_else(|| "all".to_string(), |l| l.to_string());
            let _ = writeln!(
                out,
                "{}\t{len}\t{}\t{:.4}\t{:.4}\t{:.3}\t{}\t{}",
                r.strategy.name(),
                r.runs,
                r.mean_ms,
                r.median_ms,
                r.mean_steps,
                r.min_steps,
                r.max_steps
            );
        }
        out
    }
}

/// K=1, K=5 and teacher greedy over the whole set, then per label length
/// for every length in `lengths` present in `samples`.
///
/// Runs are interleaved round-robin over all cells, so slow drift in machine
/// speed lands on every cell alike instead of on whichever was timed last.
pub fn bench_latency<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    samples: &[Sample],
    lengths: &[usize],
    config: BenchConfig,
) -> Result<BenchReport> {
    let strategies = [
        Strategy::EasyFirst { iterations: 1 },
        Strategy::EasyFirst { iterations: 5 },
        Strategy::TeacherGreedy,
    ];
    let subsets: Vec<(Option<usize>, Vec<Sample>)> = std::iter::once((None, samples.to_vec()))
        .chain(lengths.iter().map(|&len| {
            (
                Some(len),
                samples
                    .iter()
                    .filter(|s| s.label_len() == len)
                    .cloned()
                    .collect(),
            )
        }))
        .filter(|(_, subset)| !subset.is_empty())
        .collect();
    let mut cells = Vec::new();
    for (len, subset) in &subsets {
        for s in strategies {
            cells.push((*len, Cell::new(subset, s, config)?));
        }
    }
    for timed in std::iter::repeat(false)
        .take(config.warmup)
        .chain(std::iter::repeat(true).take(config.runs))
    {
        for (_, cell) in &mut cells {
            cell.run(model, params, timed)?;
        }
    }
    Ok(BenchReport {
        rows: cells
            .into_iter()
            .map(|(len, cell)| (len, cell.finish()))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub iterations: usize,
    pub report: EvalReport,
    pub mean_latency_ms: f64,
}

/// Accuracy per K over `samples`, plus single-sample latency measured over
/// the first `latency_samples` of them.
pub fn iteration_sweep<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    samples: &[Sample],
    ks: &[usize],
    batch: usize,
    latency: BenchConfig,
) -> Result<Vec<SweepRow>> {
    ks.iter()
        .map(|&k| {
            let options = DecodeOptions::new(model.config.max_len, k);
            let (report, _) = evaluate(model, params, samples, options, batch)?;
            let row = time_strategy(
                model,
                params,
                samples,
                Strategy::EasyFirst { iterations: k },
                latency,
            )?;
            Ok(SweepRow {
                iterations: k,
                report,
                mean_latency_ms: row.mean_ms,
            })
        })
        .collect()
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("iterations\tword_accuracy\tchar_accuracy\tmean_latency_ms\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.4}",
            r.iterations, r.report.word_accuracy, r.report.char_accuracy, r.mean_latency_ms
        );
    }
    out
}

/// `cos(f_i, f_j)` over the rows of `x`.
pub fn cosine_matrix<T: Element>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|r| x.row(r).iter().map(|&v| Element::to_f64(v)).collect())
        .collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    (0..rows.len())
        .map(|i| {
            (0..rows.len())
                .map(|j| {
                    let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    dot / (norms[i] * norms[j]).max(f64::MIN_POSITIVE)
                })
                .collect()
        })
        .collect()
}

pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n < 2 {
        return 0.0;
    }
    let s: f64 = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .sum();
    s / (n * (n - 1)) as f64
}

/// FFN self-similarity of one sample over its `T = label length + 1`
/// positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnSimilarity {
    /// Parallel decoder, first easy-first iteration (all MASK input).
    pub parallel: Vec<Vec<f64>>,
    /// Teacher under teacher forcing with the ground-truth label.
    pub teacher: Vec<Vec<f64>>,
}

impl FfnSimilarity {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (name, m) in [("parallel", &self.parallel), ("teacher", &self.teacher)] {
            let _ = writeln!(out, "# {name}");
            for row in m {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                let _ = writeln!(out, "{}", line.join("\t"));
            }
        }
        out
    }
}

pub fn export_ffn_similarity<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    sample: &Sample,
) -> Result<FfnSimilarity> {
    let label = Vocab.encode(&sample.label)?;
    if label.len() < 2 {
        return Err(Error::data("FFN similarity needs a label of length ≥ 2"));
    }
    let t = label.len() + 1;
    let mut session = Session::inference(params);
    let images = model.image_input(&mut session, &[sample])?;
    let features = model.backbone.encode(&mut session, images)?;
    let teacher_memory = model.teacher.project_memory(&mut session, &features)?;
    let teacher = teacher_forward(model, &mut session, &[label], &features, &teacher_memory)?;
    let teacher_ffn = session.tape.value(teacher.ffn).clone();
    let mut predictor = ModelPredictor::from_features(model, session, features)?;
    predictor.record_ffn(true);
    decode_batch(
        &mut predictor,
        1,
        DecodeOptions::new(model.config.max_len, 1),
    )?;
    let (_, first) = &predictor.ffn_history()[0];
    let d = first.cols();
    let parallel = Tensor::from_vec(vec![t, d], first.data()[..t * d].to_vec())?;
    Ok(FfnSimilarity {
        parallel: cosine_matrix(&parallel),
        teacher: cosine_matrix(&teacher_ffn),
    })
}

/// Easy-first decode of one image with every iteration recorded.
pub fn decode_with_trace<T: Element>(
    model: &Model<T>,
    params: &ParamStore<T>,
    sample: &Sample,
    options: DecodeOptions,
) -> Result<DecodeOutput> {
    let mut predictor = ModelPredictor::new(model, params, &[sample])?;
    Ok(decode_batch(&mut predictor, 1, options)?.remove(0))
}
