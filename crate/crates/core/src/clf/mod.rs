//! Patch-level binary classification.
//!
//! The built-in baseline is logistic regression on handcrafted patch
//! features. Any other model can supply predictions through the prediction
//! CSV, read by [`load_external_predictions`].

mod features;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imgcore::ImageError;
use crate::patches::{Patch, PatchSet};

pub use features::{feature_len, featurize, HIST_BINS, HIST_RANGE, PER_CHANNEL};

#[derive(Debug, thiserror::Error)]
pub enum ClfError {
    #[error("training data needs both labels; got only label {0}")]
    SingleClass(u8),
    #[error("training data is empty or unlabeled")]
    NoData,
    #[error("feature length {actual} does not match the model ({expected})")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("prediction file line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("model file: {0}")]
    Model(String),
}

/// Correctly rounded floating-point sum (Shewchuk's partials). Sums do not
/// depend on term order, and duplicating every term exactly doubles them.
#[derive(Clone, Debug, Default)]
pub(crate) struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub(crate) fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub(crate) fn value(&self) -> f64 {
        let p = &self.partials;
        let Some(mut n) = p.len().checked_sub(1) else {
            return 0.0;
        };
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            n -= 1;
            let x = hi;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // round half-even against the remaining partials
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

fn exact_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut s = ExactSum::default();
    let mut n = 0usize;
    for v in values {
        s.add(v);
        n += 1;
    }
    s.value() / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 0.5, l2: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|j| exact_mean(x.iter().map(|r| r[j]))).collect();
        let std = (0..d)
            .map(|j| {
                let var = exact_mean(x.iter().map(|r| (r[j] - mean[j]).powi(2)));
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_norm: FeatureNorm,
    /// Regularized cross-entropy after the last epoch.
    pub final_loss: f64,
    pub patch_size: usize,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Mean cross-entropy plus `l2/2 * |w|^2` on standardized features, and
/// its gradient with respect to `(w, b)` (bias last).
pub fn loss_and_gradient(w: &[f64], b: f64, x: &[Vec<f64>], y: &[u8], l2: f64) -> (f64, Vec<f64>) {
    let d = w.len();
    let mut loss = ExactSum::default();
    let mut grad: Vec<ExactSum> = vec![ExactSum::default(); d + 1];
    for (xi, &yi) in x.iter().zip(y) {
        let t = b + xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        // -log sigmoid(t) for y = 1, -log(1 - sigmoid(t)) for y = 0
        loss.add(if yi == 1 { softplus(-t) } else { softplus(t) });
        let r = sigmoid(t) - yi as f64;
        for j in 0..d {
            grad[j].add(r * xi[j]);
        }
        grad[d].add(r);
    }
    let n = x.len() as f64;
    let reg = 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    let mut g: Vec<f64> = grad.iter().map(|s| s.value() / n).collect();
    for j in 0..d {
        g[j] += l2 * w[j];
    }
    (loss.value() / n + reg, g)
}

/// Full-batch gradient descent with a constant learning rate.
pub fn train(features: &[Vec<f64>], labels: &[u8], patch_size: usize, cfg: &TrainConfig) -> Result<LogRegModel, ClfError> {
    if !(cfg.lr > 0.0) || !(cfg.l2 >= 0.0) {
        return Err(ClfError::InvalidConfig("lr must be positive and l2 nonnegative".into()));
    }
    if features.is_empty() || features.len() != labels.len() {
        return Err(ClfError::NoData);
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(ClfError::DimensionMismatch { expected: d, actual: bad.len() });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(ClfError::InvalidConfig("labels must be 0 or 1".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(ClfError::SingleClass(labels[0]));
    }
    let norm = FeatureNorm::fit(features);
    let x: Vec<Vec<f64>> = features.iter().map(|f| norm.apply(f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 0.01).expect("valid");
    let mut w: Vec<f64> = (0..d).map(|_| init.sample(&mut rng)).collect();
    let mut b = 0.0;
    let mut loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let (l, g) = loss_and_gradient(&w, b, &x, labels, cfg.l2);
        loss = l;
        for j in 0..d {
            w[j] -= cfg.lr * g[j];
        }
        b -= cfg.lr * g[d];
    }
    let final_loss = loss_and_gradient(&w, b, &x, labels, cfg.l2).0;
    if !final_loss.is_finite() && !loss.is_finite() {
        return Err(ClfError::InvalidConfig("training diverged".into()));
    }
    Ok(LogRegModel { weights: w, bias: b, feature_norm: norm, final_loss, patch_size })
}

/// Featurize a labeled patch set and train on it.
pub fn train_patches(set: &PatchSet, cfg: &TrainConfig) -> Result<LogRegModel, ClfError> {
    let mut feats = Vec::with_capacity(set.len());
    let mut labels = Vec::with_capacity(set.len());
    for p in &set.patches {
        let Some(l) = p.label else { return Err(ClfError::NoData) };
        feats.push(featurize(p, set.patch_size));
        labels.push(l);
    }
    train(&feats, &labels, set.patch_size, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPrediction {
    pub subject_id: String,
    pub z: usize,
    pub y: usize,
    pub x: usize,
    pub prob: f64,
    /// `prob >= 0.5`
    #[serde(skip)]
    pub positive: bool,
}

impl PatchPrediction {
    pub fn new(subject_id: impl Into<String>, z: usize, y: usize, x: usize, prob: f64) -> Self {
        Self { subject_id: subject_id.into(), z, y, x, prob, positive: prob >= 0.5 }
    }
}

/// Anything that scores patches with a Stage-4 probability.
pub trait PatchClassifier: Sync {
    fn probability(&self, p: &Patch) -> Result<f64, ClfError>;

    fn predict(&self, p: &Patch) -> Result<PatchPrediction, ClfError> {
        let prob = self.probability(p)?;
        Ok(PatchPrediction::new(p.subject_id.clone(), p.slice_index, p.grid_xy[1], p.grid_xy[0], prob))
    }
}

impl LogRegModel {
    pub fn probability_of(&self, features: &[f64]) -> Result<f64, ClfError> {
        if features.len() != self.weights.len() {
            return Err(ClfError::DimensionMismatch { expected: self.weights.len(), actual: features.len() });
        }
        let x = self.feature_norm.apply(features);
        Ok(sigmoid(self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClfError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| ClfError::Model(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| ImageError::io(path, e).into())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClfError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ImageError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ClfError::Model(format!("{}: {e}", path.display())))
    }
}

impl PatchClassifier for LogRegModel {
    fn probability(&self, p: &Patch) -> Result<f64, ClfError> {
        self.probability_of(&featurize(p, self.patch_size))
    }
}

/// Predict every patch in order.
pub fn predict_all(model: &dyn PatchClassifier, patches: &[Patch]) -> Result<Vec<PatchPrediction>, ClfError> {
    patches.iter().map(|p| model.predict(p)).collect()
}

#[derive(Deserialize, Serialize)]
struct CsvRow {
    subject_id: String,
    z: usize,
    y: usize,
    x: usize,
    prob: f64,
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[PatchPrediction]) -> Result<(), ClfError> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| ClfError::Model(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for p in preds {
        w.serialize(CsvRow { subject_id: p.subject_id.clone(), z: p.z, y: p.y, x: p.x, prob: p.prob })
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| ImageError::io(path, e).into())
}

/// Read a prediction CSV with header `subject_id,z,y,x,prob`. The binary
/// decision is recomputed from `prob`.
pub fn load_external_predictions(path: impl AsRef<Path>) -> Result<Vec<PatchPrediction>, ClfError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ImageError::io(path, e))?;
    parse_predictions(&text)
}

pub fn parse_predictions(text: &str) -> Result<Vec<PatchPrediction>, ClfError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| ClfError::Malformed { line: 1, msg: e.to_string() })?;
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "z", "y", "x", "prob"] {
        return Err(ClfError::Malformed { line: 1, msg: "expected header subject_id,z,y,x,prob".into() });
    }
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| ClfError::Malformed { line, msg: e.to_string() })?;
        if !(0.0..=1.0).contains(&row.prob) {
            return Err(ClfError::Malformed { line, msg: format!("prob {} outside [0, 1]", row.prob) });
        }
        out.push(PatchPrediction::new(row.subject_id, row.z, row.y, row.x, row.prob));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn blobs(n: usize, d: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let l = (i % 2) as u8;
            x.push((0..d).map(|j| g.sample(&mut rng) + if j == 0 { sep * l as f64 } else { 0.0 }).collect());
            y.push(l);
        }
        (x, y)
    }

    fn accuracy(m: &LogRegModel, x: &[Vec<f64>], y: &[u8]) -> f64 {
        let ok = x.iter().zip(y).filter(|(f, &l)| (m.probability_of(f).unwrap() >= 0.5) == (l == 1)).count();
        ok as f64 / y.len() as f64
    }

    #[test]
    fn exact_sum_is_correctly_rounded() {
        let mut s = ExactSum::default();
        for v in [1e100, 1.0, -1e100, 1e-16, 3.0] {
            s.add(v);
        }
        assert_eq!(s.value(), 4.0 + 1e-16);
        let mut t = ExactSum::default();
        for v in [0.1; 10] {
            t.add(v);
        }
        assert_eq!(t.value(), 1.0);
    }

    #[test]
    fn separable_blobs_train_perfectly() {
        let (x, y) = blobs(200, 4, 5.0, 1);
        let m = train(&x, &y, 16, &TrainConfig::default()).unwrap();
        assert_eq!(accuracy(&m, &x, &y), 1.0);
        assert!(m.final_loss.is_finite());
        let again = train(&x, &y, 16, &TrainConfig::default()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn random_labels_do_not_fit() {
        let (x, _) = blobs(1000, 40, 0.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut y: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
        for i in (1..y.len()).rev() {
            y.swap(i, rng.random_range(0..=i));
        }
        let m = train(&x, &y, 16, &TrainConfig::default()).unwrap();
        assert!(accuracy(&m, &x, &y) <= 0.65);
    }

    #[test]
    fn duplicated_data_gives_identical_model() {
        let (x, y) = blobs(60, 3, 1.0, 4);
        let x2: Vec<Vec<f64>> = x.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        let y2: Vec<u8> = y.iter().flat_map(|&l| [l, l]).collect();
        let cfg = TrainConfig { epochs: 50, ..Default::default() };
        assert_eq!(train(&x, &y, 16, &cfg).unwrap(), train(&x2, &y2, 16, &cfg).unwrap());
    }

    #[test]
    fn training_errors() {
        let (x, _) = blobs(10, 2, 0.0, 5);
        assert!(matches!(train(&x, &[1; 10], 16, &TrainConfig::default()), Err(ClfError::SingleClass(1))));
        assert!(matches!(train(&[], &[], 16, &TrainConfig::default()), Err(ClfError::NoData)));
    }

    #[test]
    fn prediction_rules() {
        let norm = FeatureNorm { mean: vec![0.0; 3], std: vec![1.0; 3] };
        let mut m = LogRegModel { weights: vec![0.0; 3], bias: 0.0, feature_norm: norm, final_loss: 0.0, patch_size: 16 };
        assert_eq!(m.probability_of(&[1.0, 2.0, 3.0]).unwrap(), 0.5);
        let p = PatchPrediction::new("a", 0, 0, 0, m.probability_of(&[0.0; 3]).unwrap());
        assert!(p.positive);
        m.bias = 50.0;
        let prob = m.probability_of(&[0.0; 3]).unwrap();
        assert!(prob > 1.0 - 1e-12 && prob <= 1.0);
        m.bias = -800.0;
        assert_eq!(m.probability_of(&[0.0; 3]).unwrap(), 0.0);
        assert!(matches!(m.probability_of(&[0.0; 2]), Err(ClfError::DimensionMismatch { .. })));
    }

    #[test]
    fn external_predictions() {
        let p = parse_predictions("subject_id,z,y,x,prob\nS001,12,8,24,0.91\nS001,3,0,0,0.5\nS002,1,2,3,0.2\n").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!((p[0].z, p[0].y, p[0].x), (12, 8, 24));
        assert!(p[0].positive && p[1].positive && !p[2].positive);
        assert!(parse_predictions("subject_id,z,y,x,prob\nS001,12,8,24,1.2\n").is_err());
        assert!(parse_predictions("subject_id,z,y,x,prob\nS001,twelve,8,24,0.2\n").is_err());
        assert!(parse_predictions("").unwrap().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_predictions(&path, &p).unwrap();
        assert_eq!(load_external_predictions(&path).unwrap(), p);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..1000) {
            let (x, y) = blobs(12, 3, 1.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = rng.random_range(-1.0..1.0);
            let l2 = 1e-4;
            let (_, g) = loss_and_gradient(&w, b, &x, &y, l2);
            let h = 1e-5;
            for j in 0..4 {
                let shifted = |d: f64| {
                    let mut w2 = w.clone();
                    let mut b2 = b;
                    if j < 3 { w2[j] += d } else { b2 += d }
                    loss_and_gradient(&w2, b2, &x, &y, l2).0
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let rel = (fd - g[j]).abs() / g[j].abs().max(1e-3);
                prop_assert!(rel < 1e-6, "{j}: {fd} vs {}", g[j]);
            }
        }

        #[test]
        fn probabilities_in_unit_interval(f in proptest::collection::vec(-1e6f64..1e6, 3), b in -1e3f64..1e3) {
            let norm = FeatureNorm { mean: vec![0.0; 3], std: vec![1.0; 3] };
            let m = LogRegModel { weights: vec![1.0, -2.0, 0.5], bias: b, feature_norm: norm, final_loss: 0.0, patch_size: 16 };
            let p = m.probability_of(&f).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
