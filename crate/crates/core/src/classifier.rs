//! Cosine-similarity classifier trained on synthetic replay, incremental
//! accuracy bookkeeping, and memory accounting.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Ix2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cvae::{VaeDims, VaeModel, Variant};
use crate::dataio::{ClasswiseStats, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::nn::{AdamConfig, Moments};
use crate::priors::PriorBank;
use crate::rng::{derive_seed, rng_for, std_normal};

pub const DEFAULT_BETA: f64 = 0.05;
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier {
    beta: f64,
    classes: Vec<u32>,
    /// One row per class, in `classes` order.
    weights: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub samples_per_class: usize,
    /// Draw fresh synthetic samples for every minibatch.
    pub resample: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            epochs: 30,
            lr: 1e-2,
            batch_size: 64,
            samples_per_class: DEFAULT_SAMPLES_PER_CLASS,
            resample: false,
            seed: 0,
        }
    }
}

/// Anything that can produce labelled samples on demand.
pub trait SampleSource {
    fn classes(&self) -> BTreeSet<u32>;
    fn sample(&self, class: u32, n: usize, seed: u64) -> Result<Array2<f64>>;
}

pub enum TrainingSource<'a> {
    Materialized { x: &'a Array2<f64>, labels: &'a [u32] },
    Resample(&'a dyn SampleSource),
}

fn row_norms(x: ArrayView2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

fn normalized_rows(x: ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = row_norms(x);
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::invalid(format!("{what} row {i} has zero or non-finite norm")));
    }
    let mut out = x.to_owned();
    for (mut r, &n) in out.rows_mut().into_iter().zip(&norms) {
        r /= n;
    }
    Ok((out, norms))
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut r in logits.rows_mut() {
        let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        r.mapv_inplace(|v| (v - m).exp());
        let s = r.sum();
        r /= s;
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(r: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = i;
        }
    }
    best
}

impl CosineClassifier {
    /// Random weights for `classes`, reproducible from `seed`.
    pub fn new(classes: &BTreeSet<u32>, dim: usize, beta: f64, seed: u64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if classes.is_empty() || dim == 0 {
            return Err(Error::invalid("classifier needs at least one class and a positive width"));
        }
        let ids: Vec<u32> = classes.iter().copied().collect();
        let mut weights = Array2::zeros((ids.len(), dim));
        for (mut row, &c) in weights.rows_mut().into_iter().zip(&ids) {
            let mut rng = rng_for(seed, "classifier-init", u64::from(c));
            row.mapv_inplace(|_| std_normal(&mut rng));
        }
        Ok(Self {
            beta,
            classes: ids,
            weights,
        })
    }

    pub fn from_weights(weights: BTreeMap<u32, Array1<f64>>, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let dim = weights.values().next().map(Array1::len).ok_or_else(|| Error::invalid("no classes"))?;
        let mut m = Array2::zeros((weights.len(), dim));
        for (mut row, w) in m.rows_mut().into_iter().zip(weights.values()) {
            check_dim("classifier weight", dim, w.len())?;
            row.assign(w);
        }
        Ok(Self {
            beta,
            classes: weights.keys().copied().collect(),
            weights: m,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn weight(&self, class: u32) -> Option<ArrayView1<'_, f64>> {
        self.classes.iter().position(|&c| c == class).map(|i| self.weights.row(i))
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len()
    }

    /// Class probabilities, one row per input, columns in [`Self::classes`] order.
    pub fn probabilities(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("classifier input", self.dim(), x.ncols())?;
        let (xn, _) = normalized_rows(x, "input")?;
        let (wn, _) = normalized_rows(self.weights.view(), "weight")?;
        let mut logits = xn.dot(&wn.t()) / self.beta;
        softmax_rows(&mut logits);
        Ok(logits)
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<(u32, Array1<f64>)> {
        let p = self.probabilities(x.insert_axis(Axis(0)))?;
        let row = p.row(0).to_owned();
        Ok((self.classes[argmax(row.view())], row))
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<u32>> {
        let p = self.probabilities(x)?;
        Ok(p.rows().into_iter().map(|r| self.classes[argmax(r)]).collect())
    }

    /// Mean cross-entropy and its gradient with respect to the weights.
    fn loss_and_grad(&self, x: ArrayView2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
        let b = x.nrows() as f64;
        let (xn, _) = normalized_rows(x, "input")?;
        let (wn, wnorm) = normalized_rows(self.weights.view(), "weight")?;
        let cos = xn.dot(&wn.t());
        let mut p = &cos / self.beta;
        softmax_rows(&mut p);
        let mut loss = 0.0;
        let mut g = p.clone();
        for (i, &t) in targets.iter().enumerate() {
            loss -= p[[i, t]].max(f64::MIN_POSITIVE).ln();
            g[[i, t]] -= 1.0;
        }
        g /= b * self.beta;
        // d cos / d w = (x̂ − cos·ŵ) / ‖w‖
        let mut grad = g.t().dot(&xn);
        let radial = (&g * &cos).sum_axis(Axis(0));
        for (k, mut row) in grad.rows_mut().into_iter().enumerate() {
            row.scaled_add(-radial[k], &wn.row(k));
            row /= wnorm[k];
        }
        Ok((loss / b, grad))
    }

    fn target_indices(&self, labels: &[u32]) -> Result<Vec<usize>> {
        let index: BTreeMap<u32, usize> = self.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        labels
            .iter()
            .map(|y| index.get(y).copied().ok_or(Error::UnknownClass(*y)))
            .collect()
    }

    /// Trains from a fresh seeded initialization for `classes`.
    pub fn fit(
        classes: &BTreeSet<u32>,
        dim: usize,
        source: TrainingSource<'_>,
        cfg: &ClassifierConfig,
    ) -> Result<(Self, Vec<f64>)> {
        let clf = CosineClassifier::new(classes, dim, cfg.beta, cfg.seed)?;
        clf.train(source, cfg)
    }

    /// Continues training the current weights.
    pub fn train(mut self, source: TrainingSource<'_>, cfg: &ClassifierConfig) -> Result<(Self, Vec<f64>)> {
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let wanted: BTreeSet<u32> = self.classes.iter().copied().collect();
        let adam = AdamConfig::with_lr(cfg.lr);
        let mut moments = Moments::<Ix2>::zeros_like(&self.weights);
        let mut step = 0u64;
        let mut losses = Vec::with_capacity(cfg.epochs);
        let mut rng = rng_for(cfg.seed, "classifier-train", 0);

        match source {
            TrainingSource::Materialized { x, labels } => {
                check_dim("classifier labels", x.nrows(), labels.len())?;
                let present: BTreeSet<u32> = labels.iter().copied().collect();
                if let Some(&c) = wanted.difference(&present).next() {
                    return Err(Error::UnknownClass(c));
                }
                let targets = self.target_indices(labels)?;
                let mut order: Vec<usize> = (0..labels.len()).collect();
                for _ in 0..cfg.epochs {
                    order.shuffle(&mut rng);
                    let mut total = 0.0;
                    for chunk in order.chunks(cfg.batch_size) {
                        let xb = x.select(Axis(0), chunk);
                        let tb: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                        let (loss, grad) = self.loss_and_grad(xb.view(), &tb)?;
                        step += 1;
                        moments.update(&mut self.weights, &grad, step, &adam)?;
                        total += loss * chunk.len() as f64;
                    }
                    losses.push(total / labels.len() as f64);
                }
            }
            TrainingSource::Resample(src) => {
                let present = src.classes();
                if let Some(&c) = wanted.difference(&present).next() {
                    return Err(Error::UnknownClass(c));
                }
                // same number of samples per epoch as the materialized set
                let k = self.classes.len();
                let per_epoch = cfg.samples_per_class * k;
                let batches = per_epoch.div_ceil(cfg.batch_size);
                for epoch in 0..cfg.epochs {
                    let mut total = 0.0;
                    let mut seen = 0usize;
                    for b in 0..batches {
                        let size = cfg.batch_size.min(per_epoch - b * cfg.batch_size);
                        let seed = derive_seed(cfg.seed, "resample", (epoch * batches + b) as u64);
                        let (xb, tb) = self.resample_batch(src, size, seed, (epoch * batches + b) % k)?;
                        let (loss, grad) = self.loss_and_grad(xb.view(), &tb)?;
                        step += 1;
                        moments.update(&mut self.weights, &grad, step, &adam)?;
                        total += loss * size as f64;
                        seen += size;
                    }
                    losses.push(total / seen as f64);
                }
            }
        }
        Ok((self, losses))
    }

    /// A class-balanced batch: classes are dealt round-robin from `offset`.
    fn resample_batch(
        &self,
        src: &dyn SampleSource,
        size: usize,
        seed: u64,
        offset: usize,
    ) -> Result<(Array2<f64>, Vec<usize>)> {
        let k = self.classes.len();
        let mut counts = vec![0usize; k];
        for i in 0..size {
            counts[(offset + i) % k] += 1;
        }
        let mut rows = Vec::with_capacity(size);
        let mut targets = Vec::with_capacity(size);
        for (idx, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let c = self.classes[idx];
            let s = src.sample(c, n, derive_seed(seed, "class", u64::from(c)))?;
            check_dim("resampled width", self.dim(), s.ncols())?;
            rows.push(s);
            targets.extend(std::iter::repeat_n(idx, n));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
        Ok((x, targets))
    }
}

/// Correct counts and test sizes behind an accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// Test-set size of every task.
    pub test_sizes: Vec<usize>,
    /// `correct[t][i]`: correct predictions on task `i` after training task `t`.
    pub correct: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AiaMode {
    /// Accuracy over all seen test samples at each step.
    #[default]
    Pooled,
    /// Unweighted mean of the per-task accuracies at each step.
    TaskMean,
}

impl std::str::FromStr for AiaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(AiaMode::Pooled),
            "task-mean" | "task_mean" => Ok(AiaMode::TaskMean),
            _ => Err(Error::Config(format!("unknown aia mode '{s}'"))),
        }
    }
}

impl AccuracyMatrix {
    pub fn new(test_sizes: Vec<usize>) -> Result<Self> {
        if test_sizes.contains(&0) {
            return Err(Error::invalid("empty test split"));
        }
        Ok(Self {
            test_sizes,
            correct: Vec::new(),
        })
    }

    /// Builds a matrix from accuracies, rounding to correct counts.
    pub fn from_accuracies(rows: &[Vec<f64>], test_sizes: Vec<usize>) -> Result<Self> {
        let mut m = Self::new(test_sizes)?;
        for row in rows {
            let counts = row
                .iter()
                .zip(&m.test_sizes)
                .map(|(&a, &n)| (a * n as f64).round() as usize)
                .collect();
            m.push_row(counts)?;
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.test_sizes.len()
    }

    pub fn push_row(&mut self, correct: Vec<usize>) -> Result<()> {
        let t = self.correct.len();
        if t >= self.n_tasks() {
            return Err(Error::invalid("accuracy matrix is already complete"));
        }
        check_dim("accuracy row", t + 1, correct.len())?;
        if correct.iter().zip(&self.test_sizes).any(|(c, n)| c > n) {
            return Err(Error::invalid("more correct predictions than test records"));
        }
        self.correct.push(correct);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.correct.len() == self.n_tasks() && self.n_tasks() > 0
    }

    pub fn accuracy(&self, t: usize, i: usize) -> Option<f64> {
        self.correct
            .get(t)
            .and_then(|r| r.get(i))
            .map(|&c| c as f64 / self.test_sizes[i] as f64)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.correct.len())
            .map(|t| (0..=t).map(|i| self.accuracy(t, i).unwrap()).collect())
            .collect()
    }

    fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "accuracy matrix has {} of {} rows",
                self.correct.len(),
                self.n_tasks()
            )))
        }
    }

    pub fn faa(&self) -> Result<f64> {
        self.require_complete()?;
        let t = self.n_tasks() - 1;
        Ok((0..=t).map(|i| self.accuracy(t, i).unwrap()).sum::<f64>() / self.n_tasks() as f64)
    }

    /// Accuracy over all classes seen at step `t`.
    pub fn seen_accuracy(&self, t: usize, mode: AiaMode) -> Option<f64> {
        let row = self.correct.get(t)?;
        Some(match mode {
            AiaMode::Pooled => {
                let c: usize = row.iter().sum();
                let n: usize = self.test_sizes[..=t].iter().sum();
                c as f64 / n as f64
            }
            AiaMode::TaskMean => (0..=t).map(|i| self.accuracy(t, i).unwrap()).sum::<f64>() / (t + 1) as f64,
        })
    }

    pub fn avg_incremental_accuracy(&self, mode: AiaMode) -> Result<f64> {
        self.require_complete()?;
        let t = self.n_tasks();
        Ok((0..t).map(|s| self.seen_accuracy(s, mode).unwrap()).sum::<f64>() / t as f64)
    }

    /// `task,eval_task,accuracy` rows for plotting curves.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task,eval_task,accuracy\n");
        for (t, row) in self.rows().iter().enumerate() {
            for (i, a) in row.iter().enumerate() {
                out.push_str(&format!("{t},{i},{a}\n"));
            }
        }
        out
    }
}

/// Correct predictions on one task's test split, competing over every class
/// the classifier knows.
pub fn count_correct(clf: &CosineClassifier, test: &Dataset) -> Result<usize> {
    if test.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let pred = clf.predict_batch(test.matrix().view())?;
    Ok(pred.iter().zip(test.records()).filter(|(p, r)| **p == r.label).count())
}

/// Row `t` of the accuracy matrix: correct counts on the test splits of
/// tasks `0..=t`.
pub fn evaluate(clf: &CosineClassifier, tests: &[Dataset], t: usize) -> Result<Vec<usize>> {
    if t >= tests.len() {
        return Err(Error::UnknownTask(t));
    }
    tests[..=t].iter().map(|d| count_correct(clf, d)).collect()
}

/// What a method keeps between tasks in order to replay old classes.
pub enum ReplayMemory<'a> {
    Shared {
        model: &'a VaeModel,
        bank: &'a PriorBank,
        stats: Option<&'a ClasswiseStats>,
    },
    PerClass {
        models: &'a BTreeMap<u32, VaeModel>,
        stats: Option<&'a ClasswiseStats>,
    },
    Stored(&'a Dataset),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// Parameters needed to regenerate (or replay) every seen class.
    pub replay_total: usize,
    pub classifier_total: usize,
    /// Growth when one class is added: replay state plus its classifier
    /// weight. For stored features this is the mean per-class storage.
    pub per_class: usize,
}

/// Shape facts the analytic formula needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryShape {
    pub variant: Variant,
    pub dims: VaeDims,
    pub n_classes: usize,
    pub n_tasks: usize,
    pub normalized: bool,
    /// Stored records, for the upper bound.
    pub n_stored: usize,
}

/// Closed-form parameter count per variant.
pub fn memory_account(shape: &MemoryShape) -> MemoryReport {
    let VaeDims {
        input: d,
        hidden: h,
        latent: k,
        embed: e,
    } = shape.dims;
    let nc = shape.n_classes;
    let stats = if shape.normalized { 2 * d } else { 0 };
    let emb = if shape.variant.uses_embeddings() { e } else { 0 };
    let mean = if shape.variant.uses_class_prior() { k } else { 0 };
    // decoder widths with a conditioning block of `emb` on every layer
    let w0 = (k + emb) * h;
    let w1 = (h + emb) * h;
    let w2 = (h + emb) * d;
    let biases = h + h + d;
    let (replay, per_class) = match shape.variant {
        Variant::Ceo | Variant::Fo => (w0 + w1 + w2 + biases + nc * (mean + emb + stats), mean + emb + stats),
        Variant::Fod | Variant::Fodce => (
            w0 + w1 + shape.n_tasks * (w2 + biases) + nc * (mean + emb + stats),
            mean + emb + stats,
        ),
        Variant::CgilPerClass => {
            let dec = k * h + h * h + h * d + biases;
            (nc * (dec + stats), dec + stats)
        }
        Variant::UpperBound => (shape.n_stored * d, if nc == 0 { 0 } else { shape.n_stored * d / nc }),
    };
    MemoryReport {
        replay_total: replay,
        classifier_total: nc * d,
        per_class: per_class + d,
    }
}

/// Counts every stored tensor element of a replay memory and classifier.
pub fn memory_enumerate(memory: &ReplayMemory<'_>, clf: &CosineClassifier) -> usize {
    let stats_count = |s: Option<&ClasswiseStats>| {
        s.map(|st| {
            st.classes()
                .map(|c| {
                    let cs = st.get(c).unwrap();
                    cs.mean.len() + cs.std.len()
                })
                .sum::<usize>()
        })
        .unwrap_or(0)
    };
    let replay = match memory {
        ReplayMemory::Shared { model, bank, stats } => {
            let layers = model.decoder.layers();
            let shared: usize = if model.variant().uses_heads() {
                layers[..layers.len() - 1].iter().map(|l| l.weight.len()).sum()
            } else {
                layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
            };
            let heads: usize = model
                .heads()
                .values()
                .map(|h| h.last_weight.len() + h.biases.iter().map(|b| b.len()).sum::<usize>())
                .sum();
            let embeddings: usize = model.embeddings().values().map(|e| e.len()).sum();
            let means: usize = if model.variant().uses_class_prior() {
                bank.means().values().map(|m| m.len()).sum()
            } else {
                0
            };
            shared + heads + embeddings + means + stats_count(*stats)
        }
        ReplayMemory::PerClass { models, stats } => {
            let decoders: usize = models
                .values()
                .flat_map(|m| m.decoder.layers().iter())
                .map(|l| l.weight.len() + l.bias.len())
                .sum();
            decoders + stats_count(*stats)
        }
        ReplayMemory::Stored(data) => data.records().iter().map(|r| r.features.len()).sum(),
    };
    replay + clf.weights().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_class(w0: Array1<f64>, w1: Array1<f64>, beta: f64) -> CosineClassifier {
        CosineClassifier::from_weights(BTreeMap::from([(0, w0), (1, w1)]), beta).unwrap()
    }

    #[test]
    fn softmax_of_unit_and_zero() {
        let clf = two_class(array![1.0, 0.0], array![0.0, 1.0], 1.0);
        let (c, p) = clf.predict(array![1.0, 0.0].view()).unwrap();
        assert_eq!(c, 0);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn scale_invariance() {
        let clf = two_class(array![1.0, 0.3], array![-0.2, 1.0], 0.05);
        let x = array![0.4, 0.7];
        let (_, p) = clf.predict(x.view()).unwrap();
        for c in [1e-3, 2.0, 1e4] {
            let (_, q) = clf.predict((&x * c).view()).unwrap();
            assert!((&p - &q).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn temperature_sharpens() {
        let x = array![1.0, 0.0];
        let mut last = 0.0;
        for beta in [2.0, 1.0, 0.5, 0.1] {
            let (_, p) = two_class(array![1.0, 0.0], array![0.0, 1.0], beta).predict(x.view()).unwrap();
            assert!(p[0] > last);
            last = p[0];
        }
    }

    #[test]
    fn ties_pick_lowest_class() {
        let clf = two_class(array![1.0, 0.0], array![1.0, 0.0], 1.0);
        assert_eq!(clf.predict(array![1.0, 1.0].view()).unwrap().0, 0);
    }

    #[test]
    fn zero_norm_is_rejected() {
        let clf = two_class(array![1.0, 0.0], array![0.0, 1.0], 1.0);
        assert!(clf.predict(array![0.0, 0.0].view()).is_err());
        let bad = two_class(array![0.0, 0.0], array![0.0, 1.0], 1.0);
        assert!(bad.predict(array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_for(4, "clf-fd", 0);
        let x = Array2::from_shape_fn((5, 3), |_| std_normal(&mut rng));
        let t = vec![0, 1, 2, 1, 0];
        let w = Array2::from_shape_fn((3, 3), |_| std_normal(&mut rng));
        let mut clf = CosineClassifier {
            beta: 0.5,
            classes: vec![0, 1, 2],
            weights: w,
        };
        let (_, g) = clf.loss_and_grad(x.view(), &t).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let orig = clf.weights[[i, j]];
                clf.weights[[i, j]] = orig + h;
                let (lp, _) = clf.loss_and_grad(x.view(), &t).unwrap();
                clf.weights[[i, j]] = orig - h;
                let (lm, _) = clf.loss_and_grad(x.view(), &t).unwrap();
                clf.weights[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn separable_case_is_learned() {
        let mut rng = rng_for(1, "sep", 0);
        let n = 200;
        let mut x = Array2::zeros((2 * n, 2));
        let mut y = Vec::new();
        for i in 0..2 * n {
            let c = (i / n) as u32;
            let angle = if c == 0 { 0.3 } else { 1.9 } + 0.2 * std_normal(&mut rng);
            x[[i, 0]] = angle.cos();
            x[[i, 1]] = angle.sin();
            y.push(c);
        }
        let cfg = ClassifierConfig {
            epochs: 200,
            ..ClassifierConfig::default()
        };
        let (clf, _) = CosineClassifier::fit(
            &BTreeSet::from([0, 1]),
            2,
            TrainingSource::Materialized { x: &x, labels: &y },
            &cfg,
        )
        .unwrap();
        let pred = clf.predict_batch(x.view()).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn fit_is_reproducible_and_checks_coverage() {
        let x = array![[1.0, 0.1], [0.1, 1.0], [0.9, 0.2], [0.2, 0.8]];
        let y = [0, 1, 0, 1];
        let cfg = ClassifierConfig::default();
        let run = || {
            CosineClassifier::fit(&BTreeSet::from([0, 1]), 2, TrainingSource::Materialized { x: &x, labels: &y }, &cfg)
                .unwrap()
                .0
        };
        assert_eq!(run(), run());
        let err = CosineClassifier::fit(
            &BTreeSet::from([0, 1, 2]),
            2,
            TrainingSource::Materialized { x: &x, labels: &y },
            &cfg,
        );
        assert!(matches!(err, Err(Error::UnknownClass(2))));
    }

    struct Rays;

    impl SampleSource for Rays {
        fn classes(&self) -> BTreeSet<u32> {
            BTreeSet::from([0, 1, 2])
        }

        fn sample(&self, class: u32, n: usize, seed: u64) -> Result<Array2<f64>> {
            let mut rng = rng_for(seed, "rays", 0);
            let base = f64::from(class) * 2.0;
            Ok(Array2::from_shape_fn((n, 2), |(_, j)| {
                let a = base + 0.2 * std_normal(&mut rng);
                if j == 0 { a.cos() } else { a.sin() }
            }))
        }
    }

    #[test]
    fn resample_mode_learns() {
        let cfg = ClassifierConfig {
            epochs: 40,
            samples_per_class: 100,
            resample: true,
            ..ClassifierConfig::default()
        };
        let (clf, losses) =
            CosineClassifier::fit(&BTreeSet::from([0, 1, 2]), 2, TrainingSource::Resample(&Rays), &cfg).unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
        let test = Rays.sample(1, 100, 99).unwrap();
        let pred = clf.predict_batch(test.view()).unwrap();
        assert!(pred.iter().filter(|&&p| p == 1).count() >= 95);
    }

    #[test]
    fn perfect_and_chance_accuracy() {
        use crate::dataio::FeatureRecord;
        let clf = two_class(array![1.0, 0.0], array![0.0, 1.0], 0.05);
        let test = Dataset::new(
            2,
            vec![
                FeatureRecord {
                    label: 0,
                    features: vec![2.0, 0.1],
                },
                FeatureRecord {
                    label: 1,
                    features: vec![0.1, 3.0],
                },
            ],
        )
        .unwrap();
        assert_eq!(evaluate(&clf, &[test.clone()], 0).unwrap(), vec![2]);
        assert!(count_correct(&clf, &Dataset::new(2, vec![]).unwrap()).is_err());

        let mut rng = rng_for(11, "chance", 0);
        let ws: BTreeMap<u32, Array1<f64>> =
            (0..4).map(|c| (c, Array1::from_shape_fn(2, |_| std_normal(&mut rng)))).collect();
        let rnd = CosineClassifier::from_weights(ws, 0.05).unwrap();
        let n = 10_000;
        let x = Array2::from_shape_fn((n, 2), |_| std_normal(&mut rng));
        let labels: Vec<u32> = (0..n).map(|i| (i % 4) as u32).collect();
        let pred = rnd.predict_batch(x.view()).unwrap();
        let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / n as f64;
        assert!((acc - 0.25).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn metric_arithmetic() {
        let m = AccuracyMatrix::from_accuracies(&[vec![1.0], vec![0.5, 0.7]], vec![10, 10]).unwrap();
        assert!((m.faa().unwrap() - 0.6).abs() < 1e-12);
        assert!((m.avg_incremental_accuracy(AiaMode::Pooled).unwrap() - 0.8).abs() < 1e-12);
        assert!((m.avg_incremental_accuracy(AiaMode::TaskMean).unwrap() - 0.8).abs() < 1e-12);

        let single = AccuracyMatrix::from_accuracies(&[vec![0.42]], vec![50]).unwrap();
        assert_eq!(single.faa().unwrap(), 0.42);
        assert_eq!(single.avg_incremental_accuracy(AiaMode::Pooled).unwrap(), 0.42);

        let partial = AccuracyMatrix::from_accuracies(&[vec![1.0]], vec![10, 10]).unwrap();
        assert!(partial.faa().is_err());
    }

    #[test]
    fn pooled_and_task_mean_differ_on_unequal_sizes() {
        let m = AccuracyMatrix::from_accuracies(&[vec![1.0], vec![1.0, 0.0]], vec![30, 10]).unwrap();
        assert!((m.avg_incremental_accuracy(AiaMode::Pooled).unwrap() - (1.0 + 0.75) / 2.0).abs() < 1e-12);
        assert!((m.avg_incremental_accuracy(AiaMode::TaskMean).unwrap() - (1.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn fo_desk_increment() {
        let r = memory_account(&MemoryShape {
            variant: Variant::Fo,
            dims: VaeDims::desk(),
            n_classes: 20,
            n_tasks: 4,
            normalized: true,
            n_stored: 0,
        });
        assert_eq!(r.per_class, 16 + 128 + 64);
    }
}
