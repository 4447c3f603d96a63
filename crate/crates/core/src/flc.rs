//! Fragment tagger: a linear-chain CRF over BIO tags.
//!
//! Emission scores are linear in the token features (sparse ids plus dense
//! blocks); transition scores form a `(L+2)×(L+2)` matrix including implicit
//! START and STOP states. Transitions that would produce an invalid BIO
//! sequence are fixed at −∞, so every decoded path is valid whatever the
//! learned weights. Inference (forward, backward, Viterbi) runs in log space.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{decode_spans, Article, FragmentAnnotation, Tag, TokenSequence, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::flc_prf;
use crate::features::{
    assemble_sequence_features, DenseLayout, FeatureVector, TokenFeatureConfig, TokenResources,
};
use crate::par::{self, Execution};

/// An ordered tag inventory with `O` at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    tags: Vec<Tag>,
    index: HashMap<Tag, usize>,
}

impl TagSet {
    /// O plus B/I for all eighteen techniques (37 tags).
    pub fn full() -> Self {
        TagSet::new(Tag::all()).expect("full inventory is valid")
    }

    pub fn new(tags: Vec<Tag>) -> Result<Self> {
        if tags.first() != Some(&Tag::O) {
            return Err(Error::invalid("tag set must start with O"));
        }
        let index: HashMap<Tag, usize> = tags.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        if index.len() != tags.len() {
            return Err(Error::invalid("duplicate tags in tag set"));
        }
        for t in &tags {
            if let Tag::I(x) = t {
                if !index.contains_key(&Tag::B(*x)) {
                    return Err(Error::invalid(format!("tag set has I-{x} without B-{x}")));
                }
            }
        }
        Ok(TagSet { tags, index })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn tag(&self, i: usize) -> Tag {
        self.tags[i]
    }

    pub fn index_of(&self, tag: Tag) -> Option<usize> {
        self.index.get(&tag).copied()
    }

    /// Whether `to` may follow `from` (`None` = START).
    pub fn allowed(&self, from: Option<usize>, to: usize) -> bool {
        self.tags[to].may_follow(from.map(|f| self.tags[f]))
    }
}

/// Sparse ids and dense values of one token, indexed against a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenFeatures {
    pub sparse: Vec<(u32, f64)>,
    pub dense: Vec<f64>,
}

/// CRF parameters. Also used as the gradient container, where forbidden
/// transition entries are zero instead of −∞.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfWeights {
    num_tags: usize,
    num_sparse: usize,
    num_dense: usize,
    allowed: Vec<bool>,
    /// `(L+2)²`, row = from, column = to; START = L, STOP = L+1.
    pub transitions: Vec<f64>,
    /// `F × L`, row per sparse feature.
    pub emissions: Vec<f64>,
    /// `D × L`, row per dense dimension.
    pub dense: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl CrfWeights {
    /// All-zero parameters with the BIO constraints of `tags` applied.
    pub fn new(tags: &TagSet, num_sparse: usize, num_dense: usize) -> Self {
        let l = tags.len();
        let s = l + 2;
        let mut allowed = vec![false; s * s];
        for to in 0..l {
            allowed[l * s + to] = tags.allowed(None, to);
            for from in 0..l {
                allowed[from * s + to] = tags.allowed(Some(from), to);
            }
        }
        for from in 0..l {
            allowed[from * s + l + 1] = true;
        }
        let transitions = allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        CrfWeights {
            num_tags: l,
            num_sparse,
            num_dense,
            allowed,
            transitions,
            emissions: vec![0.0; num_sparse * l],
            dense: vec![0.0; num_dense * l],
        }
    }

    fn zeros_like(&self) -> Self {
        CrfWeights {
            transitions: vec![0.0; self.transitions.len()],
            emissions: vec![0.0; self.emissions.len()],
            dense: vec![0.0; self.dense.len()],
            allowed: self.allowed.clone(),
            ..*self
        }
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn num_sparse(&self) -> usize {
        self.num_sparse
    }

    pub fn num_dense(&self) -> usize {
        self.num_dense
    }

    pub fn start(&self) -> usize {
        self.num_tags
    }

    pub fn stop(&self) -> usize {
        self.num_tags + 1
    }

    fn states(&self) -> usize {
        self.num_tags + 2
    }

    #[inline]
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * self.states() + to]
    }

    pub fn is_allowed(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.states() + to]
    }

    /// Number of free (finite) parameters.
    pub fn num_params(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count() + self.emissions.len() + self.dense.len()
    }

    /// Free parameters in a fixed order: allowed transitions, emissions, dense.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(
            self.transitions
                .iter()
                .zip(&self.allowed)
                .filter(|(_, &a)| a)
                .map(|(&t, _)| t),
        );
        out.extend_from_slice(&self.emissions);
        out.extend_from_slice(&self.dense);
        out
    }

    /// Inverse of [`CrfWeights::to_flat`]; forbidden transitions stay −∞.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut it = flat.iter().copied();
        for (t, &a) in self.transitions.iter_mut().zip(&self.allowed) {
            if a {
                *t = it.next().unwrap();
            }
        }
        for e in self.emissions.iter_mut().chain(self.dense.iter_mut()) {
            *e = it.next().unwrap();
        }
    }

    fn free_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.transitions
            .iter_mut()
            .zip(&self.allowed)
            .filter(|(_, &a)| a)
            .map(|(t, _)| t)
            .chain(self.emissions.iter_mut())
            .chain(self.dense.iter_mut())
    }

    fn free(&self) -> impl Iterator<Item = &f64> {
        self.transitions
            .iter()
            .zip(&self.allowed)
            .filter(|(_, &a)| a)
            .map(|(t, _)| t)
            .chain(self.emissions.iter())
            .chain(self.dense.iter())
    }

    pub fn squared_norm(&self) -> f64 {
        self.free().map(|w| w * w).sum()
    }

    /// `n × L` emission scores.
    pub fn emission_scores(&self, feats: &[TokenFeatures]) -> Vec<f64> {
        let l = self.num_tags;
        let mut out = vec![0.0; feats.len() * l];
        for (i, tf) in feats.iter().enumerate() {
            let row = &mut out[i * l..(i + 1) * l];
            for &(f, x) in &tf.sparse {
                let w = &self.emissions[f as usize * l..(f as usize + 1) * l];
                for (r, w) in row.iter_mut().zip(w) {
                    *r += w * x;
                }
            }
            for (d, &x) in tf.dense.iter().enumerate() {
                let w = &self.dense[d * l..(d + 1) * l];
                for (r, w) in row.iter_mut().zip(w) {
                    *r += w * x;
                }
            }
        }
        out
    }

    /// Allowed predecessors of each tag (START excluded).
    fn predecessors(&self) -> Vec<Vec<usize>> {
        (0..self.num_tags)
            .map(|to| {
                (0..self.num_tags)
                    .filter(|&from| self.is_allowed(from, to))
                    .collect()
            })
            .collect()
    }

    /// Emission plus transition score of a tag path, including START and STOP.
    pub fn sequence_score(&self, feats: &[TokenFeatures], tags: &[usize]) -> f64 {
        assert_eq!(feats.len(), tags.len(), "one tag per token");
        if tags.is_empty() {
            return 0.0;
        }
        let l = self.num_tags;
        let em = self.emission_scores(feats);
        let mut score = self.transition(self.start(), tags[0]) + em[tags[0]];
        for i in 1..tags.len() {
            score = score + self.transition(tags[i - 1], tags[i]) + em[i * l + tags[i]];
        }
        score + self.transition(tags[tags.len() - 1], self.stop())
    }

    fn forward(&self, em: &[f64], n: usize, preds: &[Vec<usize>]) -> Vec<f64> {
        let l = self.num_tags;
        let mut alpha = vec![f64::NEG_INFINITY; n * l];
        for y in 0..l {
            alpha[y] = self.transition(self.start(), y) + em[y];
        }
        for i in 1..n {
            let (done, rest) = alpha.split_at_mut(i * l);
            let prev = &done[(i - 1) * l..];
            for y in 0..l {
                let s = log_sum_exp(preds[y].iter().map(|&p| prev[p] + self.transition(p, y)));
                rest[y] = s + em[i * l + y];
            }
        }
        alpha
    }

    fn backward(&self, em: &[f64], n: usize) -> Vec<f64> {
        let l = self.num_tags;
        let mut beta = vec![f64::NEG_INFINITY; n * l];
        for y in 0..l {
            beta[(n - 1) * l + y] = self.transition(y, self.stop());
        }
        for i in (0..n - 1).rev() {
            for y in 0..l {
                let next = &beta[(i + 1) * l..(i + 2) * l];
                let e = &em[(i + 1) * l..(i + 2) * l];
                beta[i * l + y] = log_sum_exp(
                    (0..l)
                        .filter(|&z| self.is_allowed(y, z))
                        .map(|z| self.transition(y, z) + e[z] + next[z]),
                );
            }
        }
        beta
    }

    /// Log of the summed exponentiated scores of all valid tag paths.
    pub fn log_partition(&self, feats: &[TokenFeatures]) -> f64 {
        let n = feats.len();
        assert!(n > 0, "log partition of an empty sequence");
        let em = self.emission_scores(feats);
        let alpha = self.forward(&em, n, &self.predecessors());
        let l = self.num_tags;
        log_sum_exp((0..l).map(|y| alpha[(n - 1) * l + y] + self.transition(y, self.stop())))
    }

    /// Per-position tag marginals, `n × L`.
    pub fn marginals(&self, feats: &[TokenFeatures]) -> Vec<f64> {
        let n = feats.len();
        assert!(n > 0, "marginals of an empty sequence");
        let l = self.num_tags;
        let em = self.emission_scores(feats);
        let alpha = self.forward(&em, n, &self.predecessors());
        let beta = self.backward(&em, n);
        let log_z =
            log_sum_exp((0..l).map(|y| alpha[(n - 1) * l + y] + self.transition(y, self.stop())));
        alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a + b - log_z).exp())
            .collect()
    }

    /// Highest-scoring valid path and its score. Ties go to the lowest tag
    /// index at the latest differing position.
    pub fn viterbi(&self, feats: &[TokenFeatures]) -> (Vec<usize>, f64) {
        let n = feats.len();
        if n == 0 {
            return (Vec::new(), 0.0);
        }
        let l = self.num_tags;
        let em = self.emission_scores(feats);
        let preds = self.predecessors();
        let mut delta = vec![f64::NEG_INFINITY; n * l];
        let mut back = vec![0usize; n * l];
        for y in 0..l {
            delta[y] = self.transition(self.start(), y) + em[y];
        }
        for i in 1..n {
            for y in 0..l {
                let mut best = f64::NEG_INFINITY;
                let mut arg = preds[y].first().copied().unwrap_or(0);
                for &p in &preds[y] {
                    let s = delta[(i - 1) * l + p] + self.transition(p, y);
                    if s > best {
                        best = s;
                        arg = p;
                    }
                }
                delta[i * l + y] = best + em[i * l + y];
                back[i * l + y] = arg;
            }
        }
        let mut best = f64::NEG_INFINITY;
        let mut last = 0;
        for y in 0..l {
            let s = delta[(n - 1) * l + y] + self.transition(y, self.stop());
            if s > best {
                best = s;
                last = y;
            }
        }
        let mut path = vec![last; n];
        for i in (1..n).rev() {
            path[i - 1] = back[i * l + path[i]];
        }
        (path, best)
    }

    /// Negative log-likelihood of one sequence with the residuals needed for
    /// its gradient: node marginals minus gold indicators (`n × L`) and
    /// expected minus observed transition counts.
    fn sequence_statistics(
        &self,
        feats: &[TokenFeatures],
        gold: &[usize],
    ) -> (f64, Vec<f64>, Vec<f64>) {
        let n = feats.len();
        let l = self.num_tags;
        let s = self.states();
        let em = self.emission_scores(feats);
        let preds = self.predecessors();
        let alpha = self.forward(&em, n, &preds);
        let beta = self.backward(&em, n);
        let log_z =
            log_sum_exp((0..l).map(|y| alpha[(n - 1) * l + y] + self.transition(y, self.stop())));
        let gold_score = self.sequence_score(feats, gold);
        let loss = log_z - gold_score;

        let mut node: Vec<f64> = alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a + b - log_z).exp())
            .collect();
        let mut trans = vec![0.0; s * s];
        for y in 0..l {
            trans[self.start() * s + y] += node[y];
            trans[y * s + self.stop()] += node[(n - 1) * l + y];
        }
        for i in 1..n {
            for y in 0..l {
                let tail = em[i * l + y] + beta[i * l + y] - log_z;
                for &p in &preds[y] {
                    trans[p * s + y] +=
                        (alpha[(i - 1) * l + p] + self.transition(p, y) + tail).exp();
                }
            }
        }
        trans[self.start() * s + gold[0]] -= 1.0;
        trans[gold[n - 1] * s + self.stop()] -= 1.0;
        for i in 0..n {
            node[i * l + gold[i]] -= 1.0;
            if i > 0 {
                trans[gold[i - 1] * s + gold[i]] -= 1.0;
            }
        }
        (loss, node, trans)
    }
}

/// A training sequence: indexed token features and gold tag indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub features: Vec<TokenFeatures>,
    pub tags: Vec<usize>,
}

/// Summed negative log-likelihood of `batch` plus `l2/2 · ‖θ‖²`, and its
/// gradient (expected minus empirical feature counts, plus `l2 · θ`).
///
/// Per-sequence work may run in parallel; the reduction is sequential in
/// batch order, so the result is identical under either execution mode.
pub fn nll_and_gradient(
    weights: &CrfWeights,
    batch: &[LabeledSequence],
    l2: f64,
    exec: Execution,
) -> Result<(f64, CrfWeights)> {
    for seq in batch {
        if seq.features.len() != seq.tags.len() {
            return Err(Error::invalid("one gold tag per token required"));
        }
    }
    let stats = par::map(exec, batch, |seq| {
        (!seq.tags.is_empty()).then(|| weights.sequence_statistics(&seq.features, &seq.tags))
    });
    let l = weights.num_tags;
    let mut grad = weights.zeros_like();
    let mut loss = 0.0;
    for (seq, st) in batch.iter().zip(stats) {
        let Some((nll, node, trans)) = st else {
            continue;
        };
        loss += nll;
        for (g, t) in grad.transitions.iter_mut().zip(&trans) {
            *g += t;
        }
        for (i, tf) in seq.features.iter().enumerate() {
            let r = &node[i * l..(i + 1) * l];
            for &(f, x) in &tf.sparse {
                let g = &mut grad.emissions[f as usize * l..(f as usize + 1) * l];
                for (g, r) in g.iter_mut().zip(r) {
                    *g += r * x;
                }
            }
            for (d, &x) in tf.dense.iter().enumerate() {
                let g = &mut grad.dense[d * l..(d + 1) * l];
                for (g, r) in g.iter_mut().zip(r) {
                    *g += r * x;
                }
            }
        }
    }
    if l2 != 0.0 {
        loss += 0.5 * l2 * weights.squared_norm();
        for (g, w) in grad.free_mut().zip(weights.free()) {
            *g += l2 * w;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Diverged {
            last_finite_epoch: 0,
        });
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfTrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for CrfTrainConfig {
    fn default() -> Self {
        CrfTrainConfig {
            max_epochs: 150,
            learning_rate: 0.1,
            batch_size: 32,
            patience: 10,
            l2: 1e-4,
            seed: 1,
        }
    }
}

/// A trained tagger with its feature alphabet and featurization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfModel {
    pub tagset: TagSet,
    alphabet: Vec<String>,
    index: HashMap<String, u32>,
    pub layout: DenseLayout,
    pub token_config: TokenFeatureConfig,
    pub train_config: CrfTrainConfig,
    pub weights: CrfWeights,
}

impl CrfModel {
    /// Zero-weight model over `alphabet` (sorted and deduplicated).
    pub fn new(
        tagset: TagSet,
        alphabet: impl IntoIterator<Item = String>,
        layout: DenseLayout,
    ) -> Self {
        let alphabet: Vec<String> = alphabet
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let weights = CrfWeights::new(&tagset, alphabet.len(), layout.total());
        let index = alphabet
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        CrfModel {
            tagset,
            alphabet,
            index,
            layout,
            token_config: TokenFeatureConfig::default(),
            train_config: CrfTrainConfig::default(),
            weights,
        }
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    /// Index named features; ids outside the alphabet are dropped.
    pub fn index_features(&self, fvs: &[FeatureVector]) -> Result<Vec<TokenFeatures>> {
        fvs.iter()
            .map(|fv| {
                let layout = fv.layout();
                if layout != self.layout {
                    return Err(Error::LayoutMismatch {
                        expected: self.layout.to_string(),
                        found: layout.to_string(),
                    });
                }
                Ok(TokenFeatures {
                    sparse: fv
                        .sparse
                        .iter()
                        .filter_map(|(k, &v)| self.index.get(k).map(|&i| (i, v)))
                        .collect(),
                    dense: fv.dense_values().collect(),
                })
            })
            .collect()
    }

    pub fn tag_indices(&self, tags: &[Tag]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|&t| {
                self.tagset
                    .index_of(t)
                    .ok_or_else(|| Error::invalid(format!("tag {t} not in tag set")))
            })
            .collect()
    }

    pub fn sequence_score(&self, feats: &[TokenFeatures], tags: &[Tag]) -> f64 {
        match self.tag_indices(tags) {
            Ok(idx) if crate::corpus::is_valid_bio(tags) => {
                self.weights.sequence_score(feats, &idx)
            }
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn log_partition(&self, feats: &[TokenFeatures]) -> f64 {
        self.weights.log_partition(feats)
    }

    pub fn viterbi(&self, feats: &[TokenFeatures]) -> (Vec<Tag>, f64) {
        let (path, score) = self.weights.viterbi(feats);
        (
            path.into_iter().map(|i| self.tagset.tag(i)).collect(),
            score,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max-epochs",
            StopReason::EarlyStopping => "early-stopping",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub dev_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_nll\tdev_f1\n");
        for e in &self.epochs {
            writeln!(s, "{}\t{:.6}\t{:.6}", e.epoch, e.train_nll, e.dev_f1).unwrap();
        }
        writeln!(s, "selected\t{}", self.selected_epoch).unwrap();
        writeln!(s, "stop\t{}", self.stop_reason).unwrap();
        s
    }
}

/// Token features for every sequence.
pub fn featurize_sequences(
    seqs: &[TokenSequence],
    config: &TokenFeatureConfig,
    res: &TokenResources<'_>,
    exec: Execution,
) -> Result<Vec<Vec<FeatureVector>>> {
    par::try_map(exec, seqs, |s| {
        assemble_sequence_features(&s.tokens, config, res)
    })
}

fn decode_all(
    model: &CrfModel,
    seqs: &[TokenSequence],
    feats: &[Vec<TokenFeatures>],
    exec: Execution,
) -> Vec<FragmentAnnotation> {
    let decoded = par::map_range(exec, seqs.len(), |k| {
        let (tags, _) = model.viterbi(&feats[k]);
        let seq = TokenSequence {
            tags,
            ..seqs[k].clone()
        };
        decode_spans(&seq).0
    });
    decoded.into_iter().flatten().collect()
}

/// Mini-batch gradient descent with early stopping on dev span F1.
///
/// Stops once dev F1 has not improved for more than `patience` consecutive
/// epochs and returns the best-dev snapshot.
pub fn train_crf(
    train: &[TokenSequence],
    dev: &[TokenSequence],
    token_config: &TokenFeatureConfig,
    res: &TokenResources<'_>,
    config: &CrfTrainConfig,
    exec: Execution,
) -> Result<(CrfModel, TrainReport)> {
    if train.iter().all(|s| s.tokens.is_empty()) {
        return Err(Error::invalid("empty training set"));
    }
    if dev.is_empty() {
        return Err(Error::invalid("empty dev set"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let layout = token_config.layout(res)?;
    let train_fv = featurize_sequences(train, token_config, res, exec)?;
    let dev_fv = featurize_sequences(dev, token_config, res, exec)?;

    let alphabet = train_fv
        .iter()
        .flatten()
        .flat_map(|fv| fv.sparse.keys().cloned());
    let mut model = CrfModel::new(TagSet::full(), alphabet, layout);
    model.token_config = *token_config;
    model.train_config = *config;

    let labeled: Vec<LabeledSequence> = train
        .iter()
        .zip(&train_fv)
        .filter(|(s, _)| !s.tokens.is_empty())
        .map(|(s, fv)| {
            Ok(LabeledSequence {
                features: model.index_features(fv)?,
                tags: model.tag_indices(&s.tags)?,
            })
        })
        .collect::<Result<_>>()?;
    let dev_feats: Vec<Vec<TokenFeatures>> = dev_fv
        .iter()
        .map(|fv| model.index_features(fv))
        .collect::<Result<_>>()?;
    let dev_gold: Vec<FragmentAnnotation> = dev.iter().flat_map(|s| decode_spans(s).0).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        selected_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best: Option<(f64, CrfWeights)> = None;
    let mut stale = 0;
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| labeled[k].clone()));
            let (nll, grad) =
                nll_and_gradient(&model.weights, &batch, 0.0, exec).map_err(|_| {
                    Error::Diverged {
                        last_finite_epoch: epoch - 1,
                    }
                })?;
            epoch_nll += nll;
            let step = config.learning_rate / chunk.len() as f64;
            let decay = config.learning_rate * config.l2;
            for (w, g) in model.weights.free_mut().zip(grad.free()) {
                *w -= step * g + decay * *w;
            }
        }
        if !epoch_nll.is_finite() || model.weights.free().any(|w| !w.is_finite()) {
            return Err(Error::Diverged {
                last_finite_epoch: epoch - 1,
            });
        }
        let predicted = decode_all(&model, dev, &dev_feats, exec);
        let dev_f1 = flc_prf(&predicted, &dev_gold).overall.f1;
        report.epochs.push(EpochRecord {
            epoch,
            train_nll: epoch_nll,
            dev_f1,
        });
        if best.as_ref().is_none_or(|(f, _)| dev_f1 > *f) {
            best = Some((dev_f1, model.weights.clone()));
            report.selected_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                report.stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    if let Some((_, w)) = best {
        model.weights = w;
    }
    Ok((model, report))
}

/// Tag every sentence of `article` and return fragments with absolute
/// offsets.
pub fn predict_fragments<T: Tokenizer + ?Sized>(
    model: &CrfModel,
    article: &Article,
    tokenizer: &T,
    config: &TokenFeatureConfig,
    res: &TokenResources<'_>,
    exec: Execution,
) -> Result<Vec<FragmentAnnotation>> {
    if *config != model.token_config {
        return Err(Error::LayoutMismatch {
            expected: model.token_config.to_string(),
            found: config.to_string(),
        });
    }
    let layout = config.layout(res)?;
    if layout != model.layout {
        return Err(Error::LayoutMismatch {
            expected: model.layout.to_string(),
            found: layout.to_string(),
        });
    }
    let per_sentence = par::try_map(
        exec,
        &article.sentences,
        |s| -> Result<Vec<FragmentAnnotation>> {
            let tokens = tokenizer.tokenize(article.slice(*s), s.begin);
            if tokens.is_empty() {
                return Ok(Vec::new());
            }
            let fv = assemble_sequence_features(&tokens, config, res)?;
            let (tags, _) = model.viterbi(&model.index_features(&fv)?);
            let seq = TokenSequence {
                article_id: article.id.clone(),
                sentence_index: 0,
                tokens,
                tags,
            };
            Ok(decode_spans(&seq).0)
        },
    )?;
    Ok(per_sentence.into_iter().flatten().collect())
}

const MODEL_MAGIC: &str = "crf-model v1";

impl CrfModel {
    /// Versioned text serialization.
    pub fn to_text(&self) -> String {
        let c = &self.train_config;
        let w = &self.weights;
        let l = w.num_tags;
        let mut s = format!("{MODEL_MAGIC}\n");
        writeln!(s, "features\t{}", self.token_config).unwrap();
        writeln!(s, "dense\t{}", self.layout).unwrap();
        writeln!(
            s,
            "config\tmax_epochs={}\tlearning_rate={}\tbatch_size={}\tpatience={}\tl2={}\tseed={}",
            c.max_epochs, c.learning_rate, c.batch_size, c.patience, c.l2, c.seed
        )
        .unwrap();
        writeln!(s, "[tags {l}]").unwrap();
        for t in self.tagset.tags() {
            writeln!(s, "{t}").unwrap();
        }
        let states = l + 2;
        writeln!(s, "[transitions {states}]").unwrap();
        for row in w.transitions.chunks(states) {
            s.push_str(&join(row));
        }
        writeln!(s, "[emissions {}]", self.alphabet.len()).unwrap();
        for (name, row) in self.alphabet.iter().zip(w.emissions.chunks(l.max(1))) {
            s.push_str(name);
            s.push('\t');
            s.push_str(&join(row));
        }
        writeln!(s, "[dense {}]", w.num_dense).unwrap();
        for row in w.dense.chunks(l.max(1)) {
            s.push_str(&join(row));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = ModelReader {
            lines: text.lines().enumerate(),
            line: 0,
        };
        let header = r.next("header")?;
        if header != MODEL_MAGIC {
            return Err(r.bad("expected `crf-model v1` header"));
        }
        let token_config: TokenFeatureConfig = r
            .field("features")?
            .parse()
            .map_err(|_| r.bad("bad feature list"))?;
        let layout: DenseLayout = r
            .field("dense")?
            .parse()
            .map_err(|_| r.bad("bad dense layout"))?;
        let cfg = r.field("config")?;
        let kv: HashMap<&str, &str> = cfg.split('\t').filter_map(|p| p.split_once('=')).collect();
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .copied()
                .ok_or_else(|| r.bad(&format!("missing config {k}")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| r.bad(&format!("bad config {k}")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| r.bad(&format!("bad config {k}")))
        };
        let train_config = CrfTrainConfig {
            max_epochs: int("max_epochs")? as usize,
            learning_rate: float("learning_rate")?,
            batch_size: int("batch_size")? as usize,
            patience: int("patience")? as usize,
            l2: float("l2")?,
            seed: int("seed")?,
        };

        let n_tags = r.section("tags")?;
        let mut tags = Vec::with_capacity(n_tags);
        for _ in 0..n_tags {
            let line = r.next("tag")?;
            tags.push(line.parse::<Tag>().map_err(|_| r.bad("bad tag"))?);
        }
        let tagset = TagSet::new(tags)?;
        let states = r.section("transitions")?;
        if states != n_tags + 2 {
            return Err(r.bad("transition matrix size does not match tag set"));
        }
        let mut transitions = Vec::with_capacity(states * states);
        for _ in 0..states {
            let line = r.next("transition row")?;
            transitions.extend(r.row(line, states)?);
        }
        let n_feats = r.section("emissions")?;
        let mut alphabet = Vec::with_capacity(n_feats);
        let mut emissions = Vec::with_capacity(n_feats * n_tags);
        for _ in 0..n_feats {
            let line = r.next("emission row")?;
            let (name, row) = line
                .split_once('\t')
                .ok_or_else(|| r.bad("expected `feature TAB weights`"))?;
            alphabet.push(name.to_string());
            emissions.extend(r.row(row, n_tags)?);
        }
        let n_dense = r.section("dense")?;
        if n_dense != layout.total() {
            return Err(r.bad("dense block size does not match layout"));
        }
        let mut dense = Vec::with_capacity(n_dense * n_tags);
        for _ in 0..n_dense {
            let line = r.next("dense row")?;
            dense.extend(r.row(line, n_tags)?);
        }

        let mut model = CrfModel::new(tagset, alphabet.iter().cloned(), layout);
        if model.alphabet != alphabet {
            return Err(r.bad("emission rows not sorted or not unique"));
        }
        if transitions
            .iter()
            .zip(&model.weights.allowed)
            .any(|(t, &a)| a != t.is_finite())
        {
            return Err(r.bad("transition constraints violated"));
        }
        if emissions.iter().chain(&dense).any(|w| !w.is_finite()) {
            return Err(r.bad("non-finite emission weight"));
        }
        model.weights.transitions = transitions;
        model.weights.emissions = emissions;
        model.weights.dense = dense;
        model.token_config = token_config;
        model.train_config = train_config;
        Ok(model)
    }
}

struct ModelReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> ModelReader<'a> {
    fn bad(&self, what: &str) -> Error {
        Error::format(self.line, format!("malformed model file: {what}"))
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(self.bad(&format!("missing {what}"))),
        }
    }

    fn field(&mut self, name: &str) -> Result<&'a str> {
        let line = self.next(name)?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix('\t'))
            .ok_or_else(|| self.bad(&format!("expected {name}")))
    }

    fn section(&mut self, name: &str) -> Result<usize> {
        let line = self.next(name)?;
        line.strip_prefix(&format!("[{name} "))
            .and_then(|r| r.strip_suffix(']'))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| self.bad(&format!("expected [{name} N]")))
    }

    fn row(&self, row: &str, width: usize) -> Result<Vec<f64>> {
        let vals = row
            .split('\t')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| self.bad(&format!("bad number {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != width {
            return Err(self.bad(&format!("expected {width} values, found {}", vals.len())));
        }
        Ok(vals)
    }
}

fn join(row: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push('\t');
        }
        write!(s, "{v}").unwrap();
    }
    s.push('\n');
    s
}
