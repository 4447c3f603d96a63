//! Sentence-level classifier: L2-regularized logistic regression with an
//! asymmetric decision threshold.
//!
//! The model scores the probability of the majority class, non-propaganda.
//! A sentence is labelled non-propaganda only when that probability strictly
//! exceeds `tau`; everything else is propaganda, even when most of the mass
//! sits on non-propaganda.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{SentenceExample, SentenceLabel, SentenceLabelRecord, Technique};
use crate::error::{Error, Result};
use crate::eval::SlcReport;
use crate::features::{FeatureVector, SentenceFeatureConfig};
use crate::par::{self, Execution};

/// Final operating threshold.
pub const DEFAULT_TAU: f64 = 0.70;
/// Threshold of the feature-combination experiments.
pub const EXPERIMENT_TAU: f64 = 0.80;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlcTrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SlcTrainConfig {
    fn default() -> Self {
        SlcTrainConfig {
            learning_rate: 0.5,
            l2: 1e-4,
            epochs: 3,
            batch_size: 16,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlcModel {
    pub tau: f64,
    pub features: SentenceFeatureConfig,
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
    /// Weights per dense source, in layout order.
    pub dense: Vec<(String, Vec<f64>)>,
    pub config: SlcTrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlcPrediction {
    pub article_id: String,
    pub sentence_index: usize,
    pub p_non_propaganda: f64,
    pub label: SentenceLabel,
}

impl SlcPrediction {
    pub fn record(&self) -> SentenceLabelRecord {
        SentenceLabelRecord {
            article_id: self.article_id.clone(),
            sentence_index: self.sentence_index,
            label: self.label,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// One example in indexed form; `target` is 1 for non-propaganda.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedExample {
    pub sparse: Vec<(usize, f64)>,
    pub dense: Vec<f64>,
    pub target: f64,
}

/// The training objective over indexed examples. Parameters are laid out as
/// `[sparse weights, dense weights, bias]`.
#[derive(Clone, Debug)]
pub struct LogisticProblem {
    pub examples: Vec<IndexedExample>,
    pub sparse_dim: usize,
    pub dense_dim: usize,
}

impl LogisticProblem {
    pub fn num_params(&self) -> usize {
        self.sparse_dim + self.dense_dim + 1
    }

    fn margin(&self, params: &[f64], ex: &IndexedExample) -> f64 {
        let dense = &params[self.sparse_dim..self.sparse_dim + self.dense_dim];
        let mut z = params[self.num_params() - 1];
        for &(i, v) in &ex.sparse {
            z += params[i] * v;
        }
        for (w, v) in dense.iter().zip(&ex.dense) {
            z += w * v;
        }
        z
    }

    /// Mean negative log-likelihood over `subset` plus `l2/2 · ‖w‖²` (bias
    /// excluded), and its gradient.
    pub fn loss_and_gradient(&self, params: &[f64], subset: &[usize], l2: f64) -> (f64, Vec<f64>) {
        let n = self.num_params();
        let mut grad = vec![0.0; n];
        let mut loss = 0.0;
        for &k in subset {
            let ex = &self.examples[k];
            let z = self.margin(params, ex);
            loss += softplus(z) - ex.target * z;
            let r = sigmoid(z) - ex.target;
            for &(i, v) in &ex.sparse {
                grad[i] += r * v;
            }
            for (j, v) in ex.dense.iter().enumerate() {
                grad[self.sparse_dim + j] += r * v;
            }
            grad[n - 1] += r;
        }
        let scale = if subset.is_empty() {
            0.0
        } else {
            1.0 / subset.len() as f64
        };
        loss *= scale;
        for g in &mut grad {
            *g *= scale;
        }
        for i in 0..n - 1 {
            loss += 0.5 * l2 * params[i] * params[i];
            grad[i] += l2 * params[i];
        }
        (loss, grad)
    }

    pub fn full_loss(&self, params: &[f64], l2: f64) -> f64 {
        let all: Vec<usize> = (0..self.examples.len()).collect();
        self.loss_and_gradient(params, &all, l2).0
    }
}

fn target(label: SentenceLabel) -> f64 {
    match label {
        SentenceLabel::NonPropaganda => 1.0,
        SentenceLabel::Propaganda => 0.0,
    }
}

struct Indexer {
    names: Vec<String>,
    layout: Vec<(String, usize)>,
}

impl Indexer {
    fn build(examples: &[(FeatureVector, SentenceLabel)]) -> Result<Self> {
        let names: BTreeSet<&String> = examples
            .iter()
            .flat_map(|(fv, _)| fv.sparse.keys())
            .collect();
        let layout = examples
            .first()
            .map(|(fv, _)| fv.layout().0)
            .unwrap_or_default();
        for (fv, _) in examples {
            if fv.layout().0 != layout {
                return Err(Error::invalid(
                    "dense feature layout differs between examples",
                ));
            }
        }
        Ok(Indexer {
            names: names.into_iter().cloned().collect(),
            layout,
        })
    }

    fn problem(&self, examples: &[(FeatureVector, SentenceLabel)]) -> LogisticProblem {
        let index: HashMap<&str, usize> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        LogisticProblem {
            examples: examples
                .iter()
                .map(|(fv, label)| IndexedExample {
                    sparse: fv
                        .sparse
                        .iter()
                        .map(|(k, &v)| (index[k.as_str()], v))
                        .collect(),
                    dense: fv.dense_values().collect(),
                    target: target(*label),
                })
                .collect(),
            sparse_dim: self.names.len(),
            dense_dim: self.layout.iter().map(|(_, d)| d).sum(),
        }
    }
}

impl LogisticProblem {
    /// Divide every feature column by its largest absolute value so all
    /// inputs lie in [-1, 1]. Returns the per-column scales (1 for all-zero
    /// columns); a weight `w` learned on the scaled problem is `w / scale`
    /// in the original space.
    pub fn scale_columns(&mut self) -> Vec<f64> {
        let mut scale = vec![0.0f64; self.sparse_dim + self.dense_dim];
        for ex in &self.examples {
            for &(i, v) in &ex.sparse {
                scale[i] = scale[i].max(v.abs());
            }
            for (j, v) in ex.dense.iter().enumerate() {
                scale[self.sparse_dim + j] = scale[self.sparse_dim + j].max(v.abs());
            }
        }
        for s in &mut scale {
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        for ex in &mut self.examples {
            for (i, v) in &mut ex.sparse {
                *v /= scale[*i];
            }
            for (j, v) in ex.dense.iter_mut().enumerate() {
                *v /= scale[self.sparse_dim + j];
            }
        }
        scale
    }
}

/// Train by mini-batch gradient descent on max-abs scaled features. Returns
/// the model (weights in the original feature space) and the full
/// regularized loss of the scaled problem before training and after every
/// epoch.
pub fn train_logreg_traced(
    examples: &[(FeatureVector, SentenceLabel)],
    config: &SlcTrainConfig,
) -> Result<(SlcModel, Vec<f64>)> {
    let labels: BTreeSet<_> = examples.iter().map(|(_, l)| l.as_str()).collect();
    if labels.len() < 2 {
        return Err(Error::invalid(
            "training data needs examples of both classes",
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let indexer = Indexer::build(examples)?;
    let mut problem = indexer.problem(examples);
    let scale = problem.scale_columns();
    let mut params = vec![0.0; problem.num_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = vec![problem.full_loss(&params, config.l2)];

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (_, grad) = problem.loss_and_gradient(&params, batch, config.l2);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
        }
        let loss = problem.full_loss(&params, config.l2);
        if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                last_finite_epoch: epoch - 1,
            });
        }
        history.push(loss);
    }

    for (p, s) in params.iter_mut().zip(&scale) {
        *p /= s;
    }
    let mut dense = Vec::new();
    let mut offset = problem.sparse_dim;
    for (source, dim) in &indexer.layout {
        dense.push((source.clone(), params[offset..offset + dim].to_vec()));
        offset += dim;
    }
    let model = SlcModel {
        tau: DEFAULT_TAU,
        features: SentenceFeatureConfig::default(),
        weights: indexer
            .names
            .iter()
            .cloned()
            .zip(params.iter().copied())
            .collect(),
        bias: params[problem.num_params() - 1],
        dense,
        config: *config,
    };
    Ok((model, history))
}

pub fn train_logreg(
    examples: &[(FeatureVector, SentenceLabel)],
    config: &SlcTrainConfig,
) -> Result<SlcModel> {
    train_logreg_traced(examples, config).map(|(m, _)| m)
}

impl SlcModel {
    pub fn margin(&self, fv: &FeatureVector) -> f64 {
        let mut z = self.bias;
        for (k, v) in &fv.sparse {
            if let Some(w) = self.weights.get(k) {
                z += w * v;
            }
        }
        for block in &fv.dense {
            if let Some((_, ws)) = self.dense.iter().find(|(s, _)| *s == block.source) {
                z += ws
                    .iter()
                    .zip(&block.values)
                    .map(|(w, v)| w * v)
                    .sum::<f64>();
            }
        }
        z
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights
            .values()
            .chain(self.dense.iter().flat_map(|(_, w)| w.iter()))
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }
}

/// Probability of the non-propaganda class.
pub fn predict_proba(model: &SlcModel, fv: &FeatureVector) -> f64 {
    sigmoid(model.margin(fv))
}

/// Non-propaganda iff `p_non_propaganda > tau`, strictly.
pub fn apply_threshold(p_non_propaganda: f64, tau: f64) -> SentenceLabel {
    if p_non_propaganda > tau {
        SentenceLabel::NonPropaganda
    } else {
        SentenceLabel::Propaganda
    }
}

/// Score and label a batch of featurized sentences at the model's threshold.
pub fn predict_batch(
    model: &SlcModel,
    examples: &[(&SentenceExample, FeatureVector)],
    exec: Execution,
) -> Vec<SlcPrediction> {
    par::map(exec, examples, |(ex, fv)| {
        let p = predict_proba(model, fv);
        SlcPrediction {
            article_id: ex.article_id.clone(),
            sentence_index: ex.sentence_index,
            p_non_propaganda: p,
            label: apply_threshold(p, model.tau),
        }
    })
}

/// Fraction of non-propaganda sentences, usable as a prior-matched threshold.
pub fn class_prior_tau(labels: impl IntoIterator<Item = SentenceLabel>) -> Result<f64> {
    let (mut non, mut total) = (0usize, 0usize);
    for l in labels {
        total += 1;
        if l == SentenceLabel::NonPropaganda {
            non += 1;
        }
    }
    let tau = non as f64 / total.max(1) as f64;
    if tau <= 0.0 || tau >= 1.0 {
        return Err(Error::invalid(
            "class prior threshold needs both classes present",
        ));
    }
    Ok(tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub report: SlcReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub rows: Vec<SweepRow>,
    pub best_tau: f64,
}

impl ThresholdSweep {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("tau\tP\tR\tF\n");
        for r in &self.rows {
            writeln!(
                s,
                "{:.2}\t{:.3}\t{:.3}\t{:.3}",
                r.tau, r.report.precision, r.report.recall, r.report.f1
            )
            .unwrap();
        }
        writeln!(s, "best\t{:.2}", self.best_tau).unwrap();
        s
    }
}

/// Thresholds 0.05, 0.10, …, 0.95.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// Evaluate the threshold rule at each grid value on `(p_non_propaganda,
/// gold)` pairs. The best-F threshold wins; ties go to the value closest to
/// 0.5, then to the smaller value.
pub fn sweep_threshold(
    scored: &[(f64, SentenceLabel)],
    grid: &[f64],
    exec: Execution,
) -> Result<ThresholdSweep> {
    if scored.is_empty() {
        return Err(Error::invalid("empty dev set"));
    }
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::invalid(format!("threshold {t} not in (0, 1)")));
    }
    let rows = par::map(exec, grid, |&tau| SweepRow {
        tau,
        report: SlcReport::from_pairs(scored.iter().map(|&(p, g)| (apply_threshold(p, tau), g))),
    });
    let best = rows
        .iter()
        .min_by(|a, b| {
            b.report
                .f1
                .total_cmp(&a.report.f1)
                .then((a.tau - 0.5).abs().total_cmp(&(b.tau - 0.5).abs()))
                .then(a.tau.total_cmp(&b.tau))
        })
        .map(|r| r.tau)
        .unwrap_or(0.5);
    Ok(ThresholdSweep {
        rows,
        best_tau: best,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TechniqueAccuracy {
    pub technique: Technique,
    pub count: usize,
    pub accuracy: f64,
}

/// Default minimum number of covering sentences for a technique to be listed.
pub const DEFAULT_MIN_COUNT: usize = 21;

/// Per technique with at least `min_count` covering gold sentences, the
/// fraction of those sentences predicted propaganda. Rows follow technique
/// frequency order.
pub fn analyze_by_technique(
    predictions: &[SentenceLabelRecord],
    gold: &[SentenceExample],
    min_count: usize,
) -> Result<Vec<TechniqueAccuracy>> {
    let by_key: HashMap<(&str, usize), SentenceLabel> = predictions
        .iter()
        .map(|p| ((p.article_id.as_str(), p.sentence_index), p.label))
        .collect();
    let mut counts = [(0usize, 0usize); Technique::COUNT];
    for g in gold {
        let label = by_key
            .get(&(g.article_id.as_str(), g.sentence_index))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "missing prediction for sentence {} of article {}",
                    g.sentence_index, g.article_id
                ))
            })?;
        for t in &g.covering_techniques {
            let c = &mut counts[t.rank()];
            c.0 += 1;
            if *label == SentenceLabel::Propaganda {
                c.1 += 1;
            }
        }
    }
    Ok(Technique::ALL
        .iter()
        .filter_map(|&t| {
            let (n, hit) = counts[t.rank()];
            (n >= min_count && n > 0).then(|| TechniqueAccuracy {
                technique: t,
                count: n,
                accuracy: hit as f64 / n as f64,
            })
        })
        .collect())
}

pub fn format_technique_accuracy(rows: &[TechniqueAccuracy]) -> String {
    let mut s = String::from("technique\tcount\taccuracy\n");
    for r in rows {
        writeln!(
            s,
            "{}\t{}\t{:.0}%",
            r.technique,
            r.count,
            r.accuracy * 100.0
        )
        .unwrap();
    }
    s
}

const MODEL_MAGIC: &str = "slc-model v1";

impl SlcModel {
    /// Versioned text serialization.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!("{MODEL_MAGIC} tau={}\n", self.tau);
        writeln!(s, "features\t{}", self.features).unwrap();
        writeln!(
            s,
            "config\tlearning_rate={}\tl2={}\tepochs={}\tbatch_size={}\tseed={}",
            c.learning_rate, c.l2, c.epochs, c.batch_size, c.seed
        )
        .unwrap();
        writeln!(s, "bias\t{}", self.bias).unwrap();
        writeln!(s, "[sparse {}]", self.weights.len()).unwrap();
        for (k, w) in &self.weights {
            writeln!(s, "{k}\t{w}").unwrap();
        }
        for (source, ws) in &self.dense {
            writeln!(s, "[dense {source} {}]", ws.len()).unwrap();
            for w in ws {
                writeln!(s, "{w}").unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let bad =
            |line: usize, what: &str| Error::format(line, format!("malformed model file: {what}"));
        let num = |line: usize, s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| bad(line, &format!("bad number {s:?}")))
        };

        let (l, header) = lines.next().ok_or_else(|| bad(1, "empty"))?;
        let tau = header
            .strip_prefix(MODEL_MAGIC)
            .and_then(|r| r.trim().strip_prefix("tau="))
            .ok_or_else(|| bad(l, "expected `slc-model v1 tau=<τ>` header"))?;
        let tau = num(l, tau)?;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(bad(l, "tau outside (0, 1)"));
        }

        let mut field = |name: &str| -> Result<(usize, String)> {
            let (l, line) = lines
                .next()
                .ok_or_else(|| bad(0, &format!("missing {name}")))?;
            let rest = line
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix('\t'))
                .ok_or_else(|| bad(l, &format!("expected {name}")))?;
            Ok((l, rest.to_string()))
        };
        let (l, features) = field("features")?;
        let features = features.parse().map_err(|_| bad(l, "bad feature list"))?;
        let (l, cfg) = field("config")?;
        let kv: HashMap<&str, &str> = cfg.split('\t').filter_map(|p| p.split_once('=')).collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| bad(l, &format!("missing config {k}")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| bad(l, &format!("bad config {k}")))
        };
        let config = SlcTrainConfig {
            learning_rate: num(l, get("learning_rate")?)?,
            l2: num(l, get("l2")?)?,
            epochs: int("epochs")? as usize,
            batch_size: int("batch_size")? as usize,
            seed: int("seed")?,
        };
        let (l, bias) = field("bias")?;
        let bias = num(l, &bias)?;

        let mut weights = BTreeMap::new();
        let mut dense: Vec<(String, Vec<f64>)> = Vec::new();
        let mut in_dense = false;
        for (l, line) in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(sec) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let parts: Vec<&str> = sec.split(' ').collect();
                match parts.as_slice() {
                    ["sparse", _] => in_dense = false,
                    ["dense", source, _] => {
                        in_dense = true;
                        dense.push((source.to_string(), Vec::new()));
                    }
                    _ => return Err(bad(l, "unknown section")),
                }
                continue;
            }
            if in_dense {
                dense.last_mut().unwrap().1.push(num(l, line)?);
            } else {
                let (k, w) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| bad(l, "expected `feature TAB weight`"))?;
                weights.insert(k.to_string(), num(l, w)?);
            }
        }
        if weights
            .values()
            .chain(dense.iter().flat_map(|(_, w)| w))
            .any(|w| !w.is_finite())
            || !bias.is_finite()
        {
            return Err(bad(0, "non-finite weight"));
        }
        Ok(SlcModel {
            tau,
            features,
            weights,
            bias,
            dense,
            config,
        })
    }
}
