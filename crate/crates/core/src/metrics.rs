//! Classification metrics: confusion matrices, precision/recall, accuracy,
//! Cohen's kappa and timed evaluation runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::{Grid, RgbImage};

/// K×K count grid, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        Self {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = class_names.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidConfig(format!(
                "confusion matrix must be {k}x{k}"
            )));
        }
        Ok(Self {
            class_names,
            counts,
        })
    }

    pub fn from_predictions(class_names: Vec<String>, truth: &[usize], pred: &[usize]) -> Self {
        let mut cm = Self::new(class_names);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.num_classes())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// `trace / total`, undefined for an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.trace() as f64 / t as f64)
    }

    /// One-vs-rest precision and recall of `class`; `None` marks a zero
    /// denominator.
    pub fn precision_recall(&self, class: usize) -> (Option<f64>, Option<f64>) {
        let tp = self.counts[class][class];
        let predicted = self.col_sums()[class];
        let actual = self.row_sums()[class];
        let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
        (ratio(tp, predicted), ratio(tp, actual))
    }

    /// Relabels classes: new class `i` is old class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.num_classes();
        let mut counts = vec![vec![0; k]; k];
        for i in 0..k {
            for j in 0..k {
                counts[i][j] = self.counts[perm[i]][perm[j]];
            }
        }
        Self {
            class_names: perm.iter().map(|&p| self.class_names[p].clone()).collect(),
            counts,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        let k = self.num_classes();
        (0..k).all(|i| (0..k).all(|j| i == j || self.counts[i][j] == 0))
    }

    /// Text table with precision in the last column and recall in the last row.
    pub fn to_text(&self) -> String {
        let k = self.num_classes();
        let w = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(4)
            .max(9);
        let mut s = String::new();
        let _ = write!(s, "{:>w$}", "truth\\pred");
        for n in &self.class_names {
            let _ = write!(s, " {n:>w$}");
        }
        let _ = writeln!(s, " {:>w$}", "precision");
        for i in 0..k {
            let _ = write!(s, "{:>w$}", self.class_names[i]);
            for j in 0..k {
                let _ = write!(s, " {:>w$}", self.counts[i][j]);
            }
            let _ = writeln!(s, " {:>w$}", fmt_opt(self.precision_recall(i).0));
        }
        let _ = write!(s, "{:>w$}", "recall");
        for j in 0..k {
            let _ = write!(s, " {:>w$}", fmt_opt(self.precision_recall(j).1));
        }
        let _ = writeln!(s, " {:>w$}", fmt_opt(self.accuracy()));
        s
    }

    /// Heat-map rendering: a K×K grid of count cells, plus a precision
    /// column on the right and a recall row at the bottom (green = 1).
    pub fn to_image(&self, cell: usize) -> RgbImage {
        let k = self.num_classes();
        let n = k + 1;
        let max_row = self.row_sums().into_iter().max().unwrap_or(1).max(1) as f64;
        Grid::from_fn(n * cell, n * cell, |x, y| {
            let (cx, cy) = (x / cell, y / cell);
            if x % cell == 0 || y % cell == 0 {
                return [255, 255, 255];
            }
            let score = |v: Option<f64>| match v {
                Some(v) => {
                    let g = (v * 255.0).round() as u8;
                    [255 - g, g, 64]
                }
                None => [128, 128, 128],
            };
            match (cx < k, cy < k) {
                (true, true) => {
                    let v = 255 - (self.counts[cy][cx] as f64 / max_row * 255.0).round() as u8;
                    [v, v, 255]
                }
                (false, true) => score(self.precision_recall(cy).0),
                (true, false) => score(self.precision_recall(cx).1),
                (false, false) => score(self.accuracy()),
            }
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |v| format!("{v:.4}"))
}

/// Observed-minus-chance agreement as an exact fraction
/// `(total·trace − Σ rᵢcᵢ) / (total² − Σ rᵢcᵢ)`. `Ok(None)` when chance
/// agreement is 1.
pub fn kappa_fraction(cm: &ConfusionMatrix) -> Result<Option<(i128, i128)>> {
    let total = cm.total() as i128;
    if total == 0 {
        return Err(Error::EmptyConfusionMatrix);
    }
    let chance: i128 = cm
        .row_sums()
        .iter()
        .zip(cm.col_sums())
        .map(|(&r, c)| r as i128 * c as i128)
        .sum();
    let num = total * cm.trace() as i128 - chance;
    let den = total * total - chance;
    Ok((den != 0).then_some((num, den)))
}

/// Unweighted Cohen's kappa, `(p_o − p_e) / (1 − p_e)`.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<Option<f64>> {
    Ok(kappa_fraction(cm)?.map(|(n, d)| n as f64 / d as f64))
}

/// Disagreement weights for the ordinal kappa variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeighting {
    Unweighted,
    Linear,
    Quadratic,
}

/// Weighted kappa `1 − Σ wᵢⱼ oᵢⱼ / Σ wᵢⱼ eᵢⱼ`; the unweighted case equals
/// [`cohens_kappa`].
pub fn weighted_kappa(cm: &ConfusionMatrix, weighting: KappaWeighting) -> Result<Option<f64>> {
    let total = cm.total() as f64;
    if total == 0.0 {
        return Err(Error::EmptyConfusionMatrix);
    }
    let k = cm.num_classes();
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let span = (k.max(2) - 1) as f64;
    let weight = |i: usize, j: usize| {
        let d = (i as f64 - j as f64).abs() / span;
        match weighting {
            KappaWeighting::Unweighted => f64::from(u8::from(i != j)),
            KappaWeighting::Linear => d,
            KappaWeighting::Quadratic => d * d,
        }
    };
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            observed += weight(i, j) * cm.counts[i][j] as f64 / total;
            expected += weight(i, j) * rows[i] as f64 * cols[j] as f64 / (total * total);
        }
    }
    Ok((expected != 0.0).then(|| 1.0 - observed / expected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Deterministic part of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: String,
    pub n_samples: usize,
    pub accuracy: f64,
    pub kappa: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub seed: u64,
    pub config_hash: String,
}

impl EvaluationReport {
    pub fn from_confusion(task: &str, cm: ConfusionMatrix, seed: u64, config_hash: &str) -> Result<Self> {
        let accuracy = cm.accuracy().ok_or(Error::EmptyConfusionMatrix)?;
        let kappa = cohens_kappa(&cm)?;
        let rows = cm.row_sums();
        let per_class = (0..cm.num_classes())
            .map(|i| {
                let (precision, recall) = cm.precision_recall(i);
                ClassMetrics {
                    name: cm.class_names[i].clone(),
                    support: rows[i],
                    precision,
                    recall,
                }
            })
            .collect();
        Ok(Self {
            task: task.to_string(),
            n_samples: cm.total() as usize,
            accuracy,
            kappa,
            per_class,
            confusion: cm,
            seed,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task: {}", self.task);
        let _ = writeln!(s, "samples: {}", self.n_samples);
        let _ = writeln!(s, "accuracy: {:.4}", self.accuracy);
        let _ = writeln!(s, "kappa: {}", fmt_opt(self.kappa));
        let _ = writeln!(s, "seed: {}  config: {}", self.seed, self.config_hash);
        let _ = writeln!(s);
        s.push_str(&self.confusion.to_text());
        s
    }
}

/// Steady-state per-sample latency, excluding the first (cold) call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub inferences: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Anything that maps one input to a class distribution.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    /// Returns `(argmax label, probabilities)` for one input. Takes `&mut`
    /// because forward passes cache activations.
    fn classify(&mut self, input: &Tensor) -> Result<(usize, Vec<f64>)>;
}

/// One evaluation sample.
pub struct EvalSample<'a> {
    pub examinee: u64,
    pub input: &'a Tensor,
    pub label: usize,
}

/// Settings for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub task: String,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    /// Minimum number of warm timed inferences.
    pub timed_inferences: usize,
    /// Refuse to run when a test examinee also appears in training.
    pub contamination_guard: bool,
}

/// Runs `model` on every sample and returns the report plus latency.
pub fn evaluate<C: Classifier + ?Sized>(
    model: &mut C,
    samples: &[EvalSample<'_>],
    train_examinees: &BTreeSet<u64>,
    opts: &EvalOptions,
) -> Result<(EvaluationReport, TimingReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    if opts.contamination_guard {
        if let Some(s) = samples.iter().find(|s| train_examinees.contains(&s.examinee)) {
            return Err(Error::Contamination {
                examinee: s.examinee,
                first: "train".into(),
                second: "test".into(),
            });
        }
    }
    let mut cm = ConfusionMatrix::new(opts.class_names.clone());
    for s in samples {
        let (pred, _) = model.classify(s.input)?;
        cm.add(s.label, pred);
    }
    let report = EvaluationReport::from_confusion(&opts.task, cm, opts.seed, &opts.config_hash)?;

    // Cold call, then timed warm calls cycling over the set.
    model.classify(samples[0].input)?;
    let n = opts.timed_inferences.max(1);
    let mut times = Vec::with_capacity(n);
    for i in 0..n {
        let input = samples[i % samples.len()].input;
        let t0 = Instant::now();
        model.classify(input)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / n as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((
        report,
        TimingReport {
            inferences: n,
            mean_ms: mean,
            std_ms: var.sqrt(),
        },
    ))
}
