//! Frozen-embedding evaluation: clip embeddings, kNN and linear probes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{clip_to_patches, AudioClip, MelConfig, PatchGrid};
use crate::rng::{self, streams};
use crate::vit::{self, ParameterSet, TokenSequence, ViTConfig};
use crate::{Error, Real, Result, Tensor};

/// Labeled clip embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    vectors: Vec<Vec<f32>>,
    labels: Vec<usize>,
    ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f32>>, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        if labels.len() != vectors.len() {
            return Err(Error::LengthMismatch {
                expected: vectors.len(),
                actual: labels.len(),
            });
        }
        if ids.len() != vectors.len() {
            return Err(Error::LengthMismatch {
                expected: vectors.len(),
                actual: ids.len(),
            });
        }
        if let Some(first) = vectors.first() {
            if first.is_empty() {
                return Err(Error::EmptyInput);
            }
            for (i, v) in vectors.iter().enumerate() {
                if v.len() != first.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "embedding {i} has width {}, expected {}",
                        v.len(),
                        first.len()
                    )));
                }
                if let Some(k) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "embedding",
                        index: i * first.len() + k,
                    });
                }
            }
        }
        Ok(EmbeddingSet { vectors, labels, ids })
    }

    /// Set with ids `0`, `1`, ….
    pub fn unnamed(vectors: Vec<Vec<f32>>, labels: Vec<usize>) -> Result<Self> {
        let ids = (0..vectors.len()).map(|i| format!("{i}")).collect();
        Self::new(vectors, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Embedding width, 0 when empty.
    pub fn width(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// `1 − cos(a, b)`.
    Cosine,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub k: usize,
    pub metric: Metric,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            k: 5,
            metric: Metric::Cosine,
            epochs: 50,
            lr: 1e-3,
            batch_size: 64,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Mean-pooled target-encoder embedding of an already patchified clip.
pub fn embed_patches<T: Real>(params: &ParameterSet<T>, config: &ViTConfig, grid: &PatchGrid) -> Result<Vec<f32>> {
    let n = grid.num_patches();
    let data = grid.data().iter().map(|&v| T::from_f64(v as f64)).collect();
    let tokens = Tensor::from_vec(&[n, grid.patch_dim()], data)?;
    let positions = (0..n).map(|i| grid.position(i)).collect();
    let seq = TokenSequence::new(tokens, positions, (grid.grid_h(), grid.grid_w()))?;
    let out = vit::encode(params, config, &seq)?;
    let mut pooled = vec![0.0f64; out.width()];
    for i in 0..out.len() {
        for (p, &x) in pooled.iter_mut().zip(out.token(i)) {
            *p += x.to_f64();
        }
    }
    Ok(pooled.into_iter().map(|p| (p / n as f64) as f32).collect())
}

/// Waveform to one embedding: front end, target encoder over every patch,
/// mean over patch tokens.
pub fn embed_clip<T: Real>(
    params: &ParameterSet<T>,
    config: &ViTConfig,
    clip: &AudioClip,
    mel: &MelConfig,
    patch_side: usize,
) -> Result<Vec<f32>> {
    let grid = clip_to_patches(clip, mel, patch_side)?;
    embed_patches(params, config, &grid)
}

fn norm(v: &[f32]) -> f64 {
    libm::sqrt(v.iter().map(|&x| (x as f64) * (x as f64)).sum())
}

fn distance(metric: Metric, a: &[f32], a_norm: f64, b: &[f32], b_norm: f64) -> f64 {
    match metric {
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            1.0 - dot / (a_norm * b_norm)
        }
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum(),
    }
}

fn check_k(train: &EmbeddingSet, cfg: &ProbeConfig) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    if cfg.k == 0 || cfg.k > train.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {} must lie in [1, {}] for this training set",
            cfg.k,
            train.len()
        )));
    }
    Ok(())
}

fn train_norms(train: &EmbeddingSet, metric: Metric) -> Result<Vec<f64>> {
    let norms: Vec<f64> = train.vectors.iter().map(|v| norm(v)).collect();
    if metric == Metric::Cosine && norms.contains(&0.0) {
        return Err(Error::ZeroNorm);
    }
    Ok(norms)
}

fn vote(train: &EmbeddingSet, norms: &[f64], query: &[f32], cfg: &ProbeConfig) -> Result<usize> {
    if query.len() != train.width() {
        return Err(Error::ShapeMismatch(format!(
            "query width {} vs training width {}",
            query.len(),
            train.width()
        )));
    }
    let q_norm = norm(query);
    if cfg.metric == Metric::Cosine && q_norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let mut order: Vec<(f64, usize, usize)> = train
        .vectors
        .iter()
        .zip(norms)
        .zip(&train.labels)
        .enumerate()
        .map(|(i, ((v, &n), &label))| (distance(cfg.metric, query, q_norm, v, n), label, i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let neighbors = &order[..cfg.k];
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &(_, label, _) in neighbors {
        match counts.iter_mut().find(|(l, _)| *l == label) {
            Some((_, c)) => *c += 1,
            None => counts.push((label, 1)),
        }
    }
    let best = counts.iter().map(|&(_, c)| c).max().unwrap_or(0);
    // `counts` is in order of first appearance, i.e. of each class's nearest
    // neighbor, so the first maximal entry wins ties.
    Ok(counts.iter().find(|&&(_, c)| c == best).map(|&(l, _)| l).unwrap_or(0))
}

/// Majority label among the `k` nearest training vectors. Ties go to the
/// class holding the nearest neighbor; equidistant neighbors are ordered by
/// label.
pub fn knn_classify(train: &EmbeddingSet, query: &[f32], cfg: &ProbeConfig) -> Result<usize> {
    check_k(train, cfg)?;
    let norms = train_norms(train, cfg.metric)?;
    vote(train, &norms, query, cfg)
}

/// Accuracy of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccuracy {
    pub label: usize,
    pub correct: usize,
    pub total: usize,
}

impl ClassAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub predictions: Vec<usize>,
}

fn report(test: &EmbeddingSet, predictions: Vec<usize>) -> ProbeReport {
    let per_class: Vec<ClassAccuracy> = test
        .classes()
        .into_iter()
        .map(|label| {
            let (mut correct, mut total) = (0, 0);
            for (&t, &p) in test.labels.iter().zip(&predictions) {
                if t == label {
                    total += 1;
                    correct += usize::from(p == t);
                }
            }
            ClassAccuracy { label, correct, total }
        })
        .collect();
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    ProbeReport {
        accuracy: correct as f64 / test.len().max(1) as f64,
        per_class,
        predictions,
    }
}

fn check_test(train_width: usize, test: &EmbeddingSet) -> Result<()> {
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    if test.width() != train_width {
        return Err(Error::ShapeMismatch(format!(
            "test width {} vs training width {train_width}",
            test.width()
        )));
    }
    Ok(())
}

/// kNN accuracy over `test`, with per-class breakdown.
pub fn knn_evaluate(train: &EmbeddingSet, test: &EmbeddingSet, cfg: &ProbeConfig) -> Result<ProbeReport> {
    check_k(train, cfg)?;
    check_test(train.width(), test)?;
    let known = train.classes();
    if let Some(l) = test.labels.iter().find(|l| known.binary_search(l).is_err()) {
        return Err(Error::LabelMismatch(format!("test label {l} never appears in the training set")));
    }
    let norms = train_norms(train, cfg.metric)?;
    let predictions = test
        .vectors
        .iter()
        .map(|q| vote(train, &norms, q, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(test, predictions))
}

/// Affine map from embeddings to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub width: usize,
    pub num_classes: usize,
    /// Row-major `[width × num_classes]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Mean cross-entropy over the training set after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weights[i * self.num_classes..(i + 1) * self.num_classes];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi as f64 * w;
            }
        }
        out
    }

    /// Highest-logit class; lowest id on ties.
    pub fn predict(&self, x: &[f32]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        best
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn mean_cross_entropy(probe: &LinearProbe, set: &EmbeddingSet) -> f64 {
    let total: f64 = set
        .vectors
        .iter()
        .zip(&set.labels)
        .map(|(x, &y)| {
            let z = probe.logits(x);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(z.iter().map(|&v| libm::exp(v - max)).sum());
            lse - z[y]
        })
        .sum();
    total / set.len() as f64
}

/// Softmax-regression probe trained with mini-batch Adam. The number of
/// classes is `max label + 1`.
pub fn linear_probe_train(train: &EmbeddingSet, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let classes = train.classes();
    if classes.len() < 2 {
        return Err(Error::TooFewClasses(classes.len()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::InvalidConfig(String::from(
            "linear probe needs batch_size >= 1, lr > 0 and weight_decay >= 0",
        )));
    }
    let width = train.width();
    let nc = classes[classes.len() - 1] + 1;
    let mut init = rng::stream(cfg.seed, streams::PROBE);
    let weights = (0..width * nc)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut init);
            0.01 * z
        })
        .collect();
    let mut probe = LinearProbe {
        width,
        num_classes: nc,
        weights,
        bias: vec![0.0; nc],
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };

    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let n_params = width * nc + nc;
    let (mut m, mut v) = (vec![0.0f64; n_params], vec![0.0f64; n_params]);
    let mut grad = vec![0.0f64; n_params];
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, streams::PROBE + 1 + epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &train.vectors[i];
                let mut p = probe.logits(x);
                softmax_in_place(&mut p);
                p[train.labels[i]] -= 1.0;
                for (d, &xd) in x.iter().enumerate() {
                    let row = &mut grad[d * nc..(d + 1) * nc];
                    for (g, &e) in row.iter_mut().zip(&p) {
                        *g += scale * xd as f64 * e;
                    }
                }
                for (g, &e) in grad[width * nc..].iter_mut().zip(&p) {
                    *g += scale * e;
                }
            }
            for (g, &w) in grad.iter_mut().zip(&probe.weights) {
                *g += cfg.weight_decay * w;
            }
            t += 1;
            let bc1 = 1.0 - libm::pow(beta1, t as f64);
            let bc2 = 1.0 - libm::pow(beta2, t as f64);
            let params = probe.weights.iter_mut().chain(probe.bias.iter_mut());
            for (((p, &g), m), v) in params.zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= cfg.lr * (*m / bc1) / (libm::sqrt(*v / bc2) + eps);
            }
        }
        probe.epoch_losses.push(mean_cross_entropy(&probe, train));
    }
    Ok(probe)
}

/// Argmax accuracy of `probe` on `test`.
pub fn linear_probe_evaluate(probe: &LinearProbe, test: &EmbeddingSet) -> Result<ProbeReport> {
    check_test(probe.width, test)?;
    if let Some(l) = test.labels.iter().find(|&&l| l >= probe.num_classes) {
        return Err(Error::LabelMismatch(format!(
            "test label {l} is outside the probe's {} classes",
            probe.num_classes
        )));
    }
    let predictions = test.vectors.iter().map(|x| probe.predict(x)).collect();
    Ok(report(test, predictions))
}
