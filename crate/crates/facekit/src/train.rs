//! Desk-scale Viola-Jones training: HAAR feature enumeration, optimal
//! decision stumps, discrete AdaBoost, and attentional-cascade assembly
//! with bootstrapped negatives.
//!
//! Feature values here are raw weighted rectangle sums (no variance
//! normalization); cascades produced by this trainer carry
//! `var_norm = false` so the detector evaluates them the same way.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{
    CascadeModel, FeatureKind, Features, HaarFeature, Stage, WeakClassifier, WeakKind,
    WeightedRect,
};
use crate::image::{GrayImage, ImageError, Rect};
use crate::integral::IntegralImage;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs both labels present")]
    DegenerateLabels,
    #[error("no positive samples")]
    EmptyPositives,
    #[error("no negative samples")]
    EmptyNegatives,
    #[error("sample {path} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    SampleSizeMismatch {
        path: String,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("training set of {0} samples exceeds the supported 65535")]
    TooManySamples(usize),
    #[error("boosting stalled before any weak classifier was accepted")]
    BoostingStalled,
    #[error("training directory {0} has no pgm files")]
    EmptyDirectory(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// One training window with its label and boosting weight.
#[derive(Debug, Clone)]
pub struct Sample {
    pub window: GrayImage,
    /// +1 face, -1 non-face.
    pub label: i8,
    pub weight: f64,
}

/// Attentional-cascade training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub train_w: usize,
    pub train_h: usize,
    /// Per-stage detection-rate target on the stage's own positives.
    pub stage_d_min: f64,
    /// Per-stage false-positive-rate target on the stage's own negatives.
    pub stage_f_max: f64,
    pub max_stages: usize,
    pub max_weak_per_stage: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_w: 19,
            train_h: 19,
            stage_d_min: 0.995,
            stage_f_max: 0.5,
            max_stages: 10,
            max_weak_per_stage: 50,
            seed: 42,
        }
    }
}

/// All upright two-, three- and checkerboard-rect prototypes at every
/// position and integer cell size fitting the window, in deterministic
/// (prototype, y, x, scale) order.
///
/// The checkerboard is encoded in three rects (whole block at -1 plus the
/// two aligned quarters at +2), which keeps every feature inside the 2-3
/// rect limit while staying zero-mean.
pub fn enumerate_features(w: usize, h: usize) -> Vec<HaarFeature> {
    assert!(w >= 4 && h >= 4, "window too small to enumerate");
    let mut out = Vec::new();
    let wr = |x: usize, y: usize, rw: usize, rh: usize, weight: f64| WeightedRect {
        rect: Rect::new(x, y, rw, rh),
        weight,
    };
    // cells (pw, ph) per prototype: two horizontal, two vertical,
    // three horizontal, three vertical, checkerboard
    for proto in 0..5usize {
        for y in 0..h {
            for x in 0..w {
                for sh in 1.. {
                    if y + sh > h {
                        break;
                    }
                    for sw in 1.. {
                        let rects = match proto {
                            0 => {
                                if x + 2 * sw > w {
                                    break;
                                }
                                vec![wr(x, y, sw, sh, 1.0), wr(x + sw, y, sw, sh, -1.0)]
                            }
                            1 => {
                                if x + sw > w || y + 2 * sh > h {
                                    break;
                                }
                                vec![wr(x, y, sw, sh, 1.0), wr(x, y + sh, sw, sh, -1.0)]
                            }
                            2 => {
                                if x + 3 * sw > w {
                                    break;
                                }
                                vec![
                                    wr(x, y, sw, sh, 1.0),
                                    wr(x + sw, y, sw, sh, -2.0),
                                    wr(x + 2 * sw, y, sw, sh, 1.0),
                                ]
                            }
                            3 => {
                                if x + sw > w || y + 3 * sh > h {
                                    break;
                                }
                                vec![
                                    wr(x, y, sw, sh, 1.0),
                                    wr(x, y + sh, sw, sh, -2.0),
                                    wr(x, y + 2 * sh, sw, sh, 1.0),
                                ]
                            }
                            _ => {
                                if x + 2 * sw > w || y + 2 * sh > h {
                                    break;
                                }
                                vec![
                                    wr(x, y, 2 * sw, 2 * sh, -1.0),
                                    wr(x, y, sw, sh, 2.0),
                                    wr(x + sw, y + sh, sw, sh, 2.0),
                                ]
                            }
                        };
                        out.push(HaarFeature {
                            rects,
                            tilted: false,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Optimal decision stump for one feature.
///
/// `polarity = +1` predicts face when `value < threshold`; `-1` predicts
/// face when `value >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stump {
    pub threshold: f64,
    pub polarity: i8,
    pub error: f64,
}

/// Single sorted sweep minimizing weighted misclassification; ties break
/// toward the smallest threshold (then polarity +1).
pub fn train_stump(values: &[f64], labels: &[i8], weights: &[f64]) -> Result<Stump, TrainError> {
    assert_eq!(values.len(), labels.len());
    assert_eq!(values.len(), weights.len());
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(TrainError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    Ok(sweep_stump(
        &order,
        |i| values[i],
        |i| labels[i],
        |i| weights[i],
    ))
}

/// The sweep shared by [`train_stump`] and the boosting engine.
fn sweep_stump(
    order: &[usize],
    value: impl Fn(usize) -> f64,
    label: impl Fn(usize) -> i8,
    weight: impl Fn(usize) -> f64,
) -> Stump {
    let n = order.len();
    let mut total_pos = 0.0;
    let mut total_neg = 0.0;
    for &i in order {
        if label(i) > 0 {
            total_pos += weight(i);
        } else {
            total_neg += weight(i);
        }
    }

    let mut best = Stump {
        threshold: f64::NEG_INFINITY,
        polarity: 1,
        error: f64::INFINITY,
    };
    let mut pos_below = 0.0;
    let mut neg_below = 0.0;
    for split in 0..=n {
        // a threshold exists at this split only where values change
        let threshold = if split == 0 {
            Some(value(order[0]) - 1.0)
        } else if split == n {
            Some(value(order[n - 1]) + 1.0)
        } else {
            let lo = value(order[split - 1]);
            let hi = value(order[split]);
            (lo < hi).then(|| 0.5 * (lo + hi))
        };
        if let Some(threshold) = threshold {
            // polarity +1: face iff value < threshold
            let err_plus = neg_below + (total_pos - pos_below);
            // polarity -1: face iff value >= threshold
            let err_minus = pos_below + (total_neg - neg_below);
            for (err, pol) in [(err_plus, 1i8), (err_minus, -1i8)] {
                if err < best.error - 1e-15 {
                    best = Stump {
                        threshold,
                        polarity: pol,
                        error: err,
                    };
                }
            }
        }
        if split < n {
            let i = order[split];
            if label(i) > 0 {
                pos_below += weight(i);
            } else {
                neg_below += weight(i);
            }
        }
    }
    best.error = best.error.max(0.0);
    best
}

impl Stump {
    /// +1 / -1 prediction for a feature value.
    pub fn predict(&self, value: f64) -> i8 {
        let below = value < self.threshold;
        if below == (self.polarity == 1) {
            1
        } else {
            -1
        }
    }
}

/// One weak classifier chosen by a boosting round.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedWeak {
    pub feature_index: usize,
    pub stump: Stump,
    pub alpha: f64,
}

/// Classic discrete AdaBoost over the full feature set.
///
/// Each round picks the minimum-weighted-error stump (ties to the lowest
/// feature index), sets `beta = eps/(1-eps)`, `alpha = ln(1/beta)`, and
/// shrinks the weights of correctly classified samples by `beta` before
/// renormalizing.
pub fn adaboost_select(
    samples: &[Sample],
    features: &[HaarFeature],
    rounds: usize,
) -> Result<Vec<SelectedWeak>, TrainError> {
    let windows: Vec<&GrayImage> = samples.iter().map(|s| &s.window).collect();
    let labels: Vec<i8> = samples.iter().map(|s| s.label).collect();
    let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let mut engine = BoostEngine::new(&windows, &labels, weights, features)?;
    for _ in 0..rounds {
        if engine.step().is_none() {
            break;
        }
    }
    Ok(engine.selected)
}

/// Feature-value matrix plus boosting state for one fixed sample set.
pub(crate) struct BoostEngine {
    nsamples: usize,
    labels: Vec<i8>,
    pub(crate) weights: Vec<f64>,
    /// nfeatures x nsamples raw feature values.
    values: Vec<i32>,
    /// nfeatures x nsamples per-feature ascending argsort (u16 indices).
    order: Vec<u16>,
    pub(crate) selected: Vec<SelectedWeak>,
    /// Running strong-classifier sum per sample (sum of +-alpha leaves).
    pub(crate) sums: Vec<f64>,
}

impl BoostEngine {
    pub(crate) fn new(
        windows: &[&GrayImage],
        labels: &[i8],
        weights: Vec<f64>,
        features: &[HaarFeature],
    ) -> Result<Self, TrainError> {
        let n = windows.len();
        if n > u16::MAX as usize {
            return Err(TrainError::TooManySamples(n));
        }
        if !labels.contains(&1) || !labels.contains(&-1) {
            return Err(TrainError::DegenerateLabels);
        }
        let (w, h) = (windows[0].width(), windows[0].height());
        // per-sample integral tables, one contiguous block
        let stride = w + 1;
        let table_len = stride * (h + 1);
        let mut tables = vec![0i32; n * table_len];
        for (si, win) in windows.iter().enumerate() {
            debug_assert_eq!((win.width(), win.height()), (w, h));
            let ii = IntegralImage::plain(win);
            let dst = &mut tables[si * table_len..(si + 1) * table_len];
            for (d, s) in dst.iter_mut().zip(ii.sums()) {
                *d = *s as i32;
            }
        }

        // compile features to corner offsets and weights
        let off = |x: usize, y: usize| y * stride + x;
        let compiled: Vec<Vec<([usize; 4], f64)>> = features
            .iter()
            .map(|f| {
                f.rects
                    .iter()
                    .map(|wrect| {
                        let r = wrect.rect;
                        (
                            [
                                off(r.right(), r.bottom()),
                                off(r.x, r.y),
                                off(r.right(), r.y),
                                off(r.x, r.bottom()),
                            ],
                            wrect.weight,
                        )
                    })
                    .collect()
            })
            .collect();

        let nfeat = features.len();
        let mut values = vec![0i32; nfeat * n];
        let mut order = vec![0u16; nfeat * n];
        values
            .par_chunks_mut(n)
            .zip(order.par_chunks_mut(n))
            .enumerate()
            .for_each(|(fi, (vrow, orow))| {
                for si in 0..n {
                    let t = &tables[si * table_len..(si + 1) * table_len];
                    let mut v = 0.0f64;
                    for (corners, weight) in &compiled[fi] {
                        let s = t[corners[0]] + t[corners[1]] - t[corners[2]] - t[corners[3]];
                        v += weight * s as f64;
                    }
                    vrow[si] = v as i32;
                }
                for (si, slot) in orow.iter_mut().enumerate() {
                    *slot = si as u16;
                }
                orow.sort_by_key(|&si| vrow[si as usize]);
            });

        let mut engine = BoostEngine {
            nsamples: n,
            labels: labels.to_vec(),
            weights,
            values,
            order,
            selected: Vec::new(),
            sums: vec![0.0; n],
        };
        engine.normalize_weights();
        Ok(engine)
    }

    fn normalize_weights(&mut self) {
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
    }

    /// Run one boosting round. Returns the chosen weak classifier, or
    /// `None` when no stump beats chance.
    pub(crate) fn step(&mut self) -> Option<SelectedWeak> {
        self.normalize_weights();
        let n = self.nsamples;
        let nfeat = self.values.len() / n;

        let (best_f, best_stump) = (0..nfeat)
            .into_par_iter()
            .map(|fi| {
                let vrow = &self.values[fi * n..(fi + 1) * n];
                let orow = &self.order[fi * n..(fi + 1) * n];
                let idx: Vec<usize> = orow.iter().map(|&i| i as usize).collect();
                let stump = sweep_stump(
                    &idx,
                    |i| vrow[i] as f64,
                    |i| self.labels[i],
                    |i| self.weights[i],
                );
                (fi, stump)
            })
            .min_by(|a, b| {
                (a.1.error, a.0)
                    .partial_cmp(&(b.1.error, b.0))
                    .expect("errors are finite")
            })?;

        if best_stump.error >= 0.5 - 1e-12 {
            return None; // no better than chance; boosting is stuck
        }
        let eps = best_stump.error.max(1e-10);
        let beta = eps / (1.0 - eps);
        let alpha = (1.0 / beta).ln();

        let vrow = &self.values[best_f * n..(best_f + 1) * n];
        for si in 0..n {
            let h = best_stump.predict(vrow[si] as f64);
            if h == self.labels[si] {
                self.weights[si] *= beta;
            }
            self.sums[si] += alpha * h as f64;
        }
        self.normalize_weights();

        let chosen = SelectedWeak {
            feature_index: best_f,
            stump: best_stump,
            alpha,
        };
        self.selected.push(chosen.clone());
        Some(chosen)
    }

    /// 0/1 training error of the current strong classifier
    /// `sign(sum of alpha*h)`.
    pub(crate) fn strong_training_error(&self) -> f64 {
        let mut wrong = 0usize;
        for si in 0..self.nsamples {
            let pred = if self.sums[si] >= 0.0 { 1 } else { -1 };
            if pred != self.labels[si] {
                wrong += 1;
            }
        }
        wrong as f64 / self.nsamples as f64
    }
}

/// A trained stage plus the rates it achieved on its own training data.
#[derive(Debug, Clone)]
pub struct TrainedStage {
    pub stage: Stage,
    /// Selected features, resolved to window coordinates.
    pub features: Vec<HaarFeature>,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    pub warnings: Vec<String>,
}

/// Train one attentional-cascade stage: add boosted stumps one at a time,
/// lower the stage threshold until `stage_d_min` holds on the positives,
/// and stop once the false-positive rate on the negatives reaches
/// `stage_f_max` (or `max_weak_per_stage` is exhausted, which returns the
/// best-effort stage plus a warning).
pub fn train_stage(
    pos: &[GrayImage],
    neg: &[GrayImage],
    cfg: &TrainConfig,
) -> Result<TrainedStage, TrainError> {
    let features = enumerate_features(cfg.train_w, cfg.train_h);
    train_stage_with_features(pos, neg, &features, cfg)
}

fn train_stage_with_features(
    pos: &[GrayImage],
    neg: &[GrayImage],
    features: &[HaarFeature],
    cfg: &TrainConfig,
) -> Result<TrainedStage, TrainError> {
    if pos.is_empty() {
        return Err(TrainError::EmptyPositives);
    }
    if neg.is_empty() {
        return Err(TrainError::EmptyNegatives);
    }
    let windows: Vec<&GrayImage> = pos.iter().chain(neg.iter()).collect();
    let labels: Vec<i8> = std::iter::repeat(1)
        .take(pos.len())
        .chain(std::iter::repeat(-1).take(neg.len()))
        .collect();
    // classic initialization: half the mass on each class
    let weights: Vec<f64> = labels
        .iter()
        .map(|&l| {
            if l > 0 {
                1.0 / (2.0 * pos.len() as f64)
            } else {
                1.0 / (2.0 * neg.len() as f64)
            }
        })
        .collect();
    let mut engine = BoostEngine::new(&windows, &labels, weights, features)?;

    let mut warnings = Vec::new();
    let mut threshold = 0.0;
    let mut rates = (0.0, 1.0);
    loop {
        if engine.step().is_none() {
            warnings.push("boosting stalled: no stump beats chance".to_string());
            break;
        }
        let pos_sums = &engine.sums[..pos.len()];
        let neg_sums = &engine.sums[pos.len()..];
        threshold = stage_threshold_for(pos_sums, cfg.stage_d_min);
        let d = rate_at_least(pos_sums, threshold);
        let f = rate_at_least(neg_sums, threshold);
        rates = (d, f);
        if f <= cfg.stage_f_max {
            break;
        }
        if engine.selected.len() >= cfg.max_weak_per_stage {
            warnings.push(format!(
                "stage targets unreachable with {} weak classifiers (fpr {:.3})",
                engine.selected.len(),
                f
            ));
            break;
        }
    }

    if engine.selected.is_empty() {
        return Err(TrainError::BoostingStalled);
    }
    let weak = engine
        .selected
        .iter()
        .map(|sel| {
            let (leaf_lt, leaf_ge) = if sel.stump.polarity == 1 {
                (sel.alpha, -sel.alpha)
            } else {
                (-sel.alpha, sel.alpha)
            };
            WeakClassifier {
                feature_index: sel.feature_index,
                kind: WeakKind::HaarStump {
                    threshold: sel.stump.threshold,
                    leaf_lt,
                    leaf_ge,
                },
            }
        })
        .collect();
    Ok(TrainedStage {
        stage: Stage { threshold, weak },
        features: engine
            .selected
            .iter()
            .map(|sel| features[sel.feature_index].clone())
            .collect(),
        detection_rate: rates.0,
        false_positive_rate: rates.1,
        warnings,
    })
}

/// Highest threshold (searched downward from the max positive sum in
/// steps of `1e-3 * range`) whose detection rate meets `d_min`.
fn stage_threshold_for(pos_sums: &[f64], d_min: f64) -> f64 {
    let max = pos_sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = pos_sums.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range <= 0.0 {
        return max;
    }
    let step = 1e-3 * range;
    let mut t = max;
    while rate_at_least(pos_sums, t) < d_min && t > min {
        t -= step;
    }
    if rate_at_least(pos_sums, t) < d_min {
        t = min;
    }
    t
}

fn rate_at_least(sums: &[f64], threshold: f64) -> f64 {
    sums.iter().filter(|&&s| s >= threshold).count() as f64 / sums.len() as f64
}

/// Per-stage record for the training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageLogEntry {
    pub weak_count: usize,
    pub threshold: f64,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    pub negatives_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct TrainLog {
    pub stages: Vec<StageLogEntry>,
}

/// Cascade training output: the model, its training log, and any
/// warnings (best-effort stages, exhausted negative pool).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CascadeModel,
    pub log: TrainLog,
    pub warnings: Vec<String>,
}

/// Train an attentional cascade from directories of PGM windows
/// (positives exactly `train_w x train_h`, negative-pool images at least
/// that size).
pub fn train_cascade(
    pos_dir: impl AsRef<Path>,
    neg_pool_dir: impl AsRef<Path>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let pos = load_pgm_dir(pos_dir.as_ref())?;
    if pos.is_empty() {
        return Err(TrainError::EmptyPositives);
    }
    for (path, img) in &pos {
        if img.width() != cfg.train_w || img.height() != cfg.train_h {
            return Err(TrainError::SampleSizeMismatch {
                path: path.clone(),
                got_w: img.width(),
                got_h: img.height(),
                want_w: cfg.train_w,
                want_h: cfg.train_h,
            });
        }
    }
    let pool = load_pgm_dir(neg_pool_dir.as_ref())?;
    if pool.is_empty() {
        return Err(TrainError::EmptyNegatives);
    }
    for (path, img) in &pool {
        if img.width() < cfg.train_w || img.height() < cfg.train_h {
            return Err(TrainError::SampleSizeMismatch {
                path: path.clone(),
                got_w: img.width(),
                got_h: img.height(),
                want_w: cfg.train_w,
                want_h: cfg.train_h,
            });
        }
    }
    let pos: Vec<GrayImage> = pos.into_iter().map(|(_, i)| i).collect();
    let pool: Vec<GrayImage> = pool.into_iter().map(|(_, i)| i).collect();
    train_cascade_from_images(&pos, &pool, cfg)
}

/// In-memory core of [`train_cascade`].
pub fn train_cascade_from_images(
    pos: &[GrayImage],
    neg_pool: &[GrayImage],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if pos.is_empty() {
        return Err(TrainError::EmptyPositives);
    }
    if neg_pool.is_empty() {
        return Err(TrainError::EmptyNegatives);
    }
    let features = enumerate_features(cfg.train_w, cfg.train_h);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let mut trained: Vec<TrainedStage> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut log = TrainLog::default();

    let mut negatives = harvest_negatives(neg_pool, &trained, cfg, &mut rng);
    for _ in 0..cfg.max_stages {
        if negatives.is_empty() {
            warnings.push("negative pool exhausted; stopping early".to_string());
            break;
        }
        let stage = train_stage_with_features(pos, &negatives, &features, cfg)?;
        warnings.extend(stage.warnings.iter().cloned());
        log.stages.push(StageLogEntry {
            weak_count: stage.stage.weak.len(),
            threshold: stage.stage.threshold,
            detection_rate: stage.detection_rate,
            false_positive_rate: stage.false_positive_rate,
            negatives_used: negatives.len(),
        });
        trained.push(stage);
        negatives = harvest_negatives(neg_pool, &trained, cfg, &mut rng);
    }

    Ok(TrainOutcome {
        model: assemble_model(&trained, cfg),
        log,
        warnings,
    })
}

/// Windows from the pool that the cascade-so-far still accepts, in seeded
/// random order. Pool images are tiled window-by-window.
fn harvest_negatives(
    pool: &[GrayImage],
    trained: &[TrainedStage],
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Vec<GrayImage> {
    let model = assemble_model(trained, cfg);
    let mut windows = Vec::new();
    for img in pool {
        let mut y = 0;
        while y + cfg.train_h <= img.height() {
            let mut x = 0;
            while x + cfg.train_w <= img.width() {
                let win = img
                    .crop(Rect::new(x, y, cfg.train_w, cfg.train_h))
                    .expect("tile in bounds");
                let keep = if trained.is_empty() {
                    true
                } else {
                    let plain = IntegralImage::plain(&win);
                    let ctx = crate::detect::WindowContext::new(
                        &plain,
                        None,
                        None,
                        0,
                        0,
                        cfg.train_w,
                        cfg.train_h,
                        false,
                    );
                    crate::detect::eval_window(&model, &ctx)
                };
                if keep {
                    windows.push(win);
                }
                x += cfg.train_w;
            }
            y += cfg.train_h;
        }
    }
    windows.shuffle(rng);
    windows
}

/// Build a cascade model from trained stages, keeping only the features
/// the stages reference (in first-use order).
fn assemble_model(trained: &[TrainedStage], cfg: &TrainConfig) -> CascadeModel {
    let mut features: Vec<HaarFeature> = Vec::new();
    let mut stages = Vec::new();
    for ts in trained {
        let mut stage = ts.stage.clone();
        for (wc, feat) in stage.weak.iter_mut().zip(&ts.features) {
            let idx = match features.iter().position(|f| f == feat) {
                Some(i) => i,
                None => {
                    features.push(feat.clone());
                    features.len() - 1
                }
            };
            wc.feature_index = idx;
        }
        stages.push(stage);
    }
    CascadeModel {
        feature_kind: FeatureKind::Haar,
        window_w: cfg.train_w,
        window_h: cfg.train_h,
        stages,
        features: Features::Haar(features),
        var_norm: false,
    }
}

fn load_pgm_dir(dir: &Path) -> Result<Vec<(String, GrayImage)>, TrainError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(ImageError::from)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |e| e == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(TrainError::EmptyDirectory(dir.display().to_string()));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        out.push((p.display().to_string(), crate::image::load_pgm(&p)?));
    }
    Ok(out)
}

/// Deterministic synthetic corpus: positives are 19x19 windows with a
/// dark horizontal band (rows 6-9) over a bright background, negatives
/// are uniform noise.
pub fn make_synthetic_corpus(
    seed: u64,
    n_pos: usize,
    n_neg: usize,
) -> (Vec<GrayImage>, Vec<GrayImage>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pos = Vec::with_capacity(n_pos);
    for _ in 0..n_pos {
        let img = GrayImage::from_fn(19, 19, |_, y| {
            let base: i32 = if (6..10).contains(&y) { 40 } else { 200 };
            (base + rng.gen_range(-15..=15)).clamp(0, 255) as u8
        })
        .expect("fixed dims");
        pos.push(img);
    }
    let mut neg = Vec::with_capacity(n_neg);
    for _ in 0..n_neg {
        neg.push(GrayImage::from_fn(19, 19, |_, _| rng.gen()).expect("fixed dims"));
    }
    (pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent combinatorial count of upright features: positions x
    /// integer scales per prototype cell shape.
    fn count_features_oracle(w: usize, h: usize) -> usize {
        let mut total = 0usize;
        for (pw, ph) in [(2, 1), (1, 2), (3, 1), (1, 3), (2, 2)] {
            for sw in 1..=w {
                for sh in 1..=h {
                    let fw = pw * sw;
                    let fh = ph * sh;
                    if fw <= w && fh <= h {
                        total += (w - fw + 1) * (h - fh + 1);
                    }
                }
            }
        }
        total
    }

    #[test]
    fn enumeration_matches_combinatorial_count() {
        for (w, h) in [(4, 4), (6, 5), (19, 19)] {
            let feats = enumerate_features(w, h);
            assert_eq!(feats.len(), count_features_oracle(w, h), "{w}x{h}");
        }
    }

    #[test]
    fn enumeration_for_24x24_is_in_the_low_hundred_thousands() {
        let feats = enumerate_features(24, 24);
        assert_eq!(feats.len(), count_features_oracle(24, 24));
        assert!((100_000..400_000).contains(&feats.len()), "{}", feats.len());
    }

    #[test]
    fn every_enumerated_feature_is_zero_mean_and_in_window() {
        for f in enumerate_features(7, 6) {
            assert_eq!(f.weighted_area(), 0.0);
            assert!(f.fits_window(7, 6));
        }
    }

    #[test]
    fn stump_on_separable_values() {
        let s = train_stump(
            &[1.0, 2.0, 3.0, 4.0],
            &[-1, -1, 1, 1],
            &[0.25, 0.25, 0.25, 0.25],
        )
        .unwrap();
        assert_eq!(s.error, 0.0);
        assert!(s.threshold > 2.0 && s.threshold <= 3.0, "t={}", s.threshold);
        assert_eq!(s.polarity, -1); // faces sit at high values
    }

    #[test]
    fn stump_on_alternating_labels_has_error_a_quarter() {
        let s = train_stump(
            &[1.0, 2.0, 3.0, 4.0],
            &[1, -1, 1, -1],
            &[0.25, 0.25, 0.25, 0.25],
        )
        .unwrap();
        assert!((s.error - 0.25).abs() < 1e-12, "error {}", s.error);
    }

    #[test]
    fn stump_on_constant_values_predicts_the_majority() {
        let s = train_stump(&[5.0, 5.0, 5.0], &[1, 1, -1], &[0.4, 0.4, 0.2]).unwrap();
        assert!((s.error - 0.2).abs() < 1e-12);
        let s = train_stump(&[5.0, 5.0, 5.0], &[1, -1, -1], &[0.3, 0.4, 0.3]).unwrap();
        assert!((s.error - 0.3).abs() < 1e-12);
    }

    #[test]
    fn stump_requires_both_labels() {
        assert!(matches!(
            train_stump(&[1.0, 2.0], &[1, 1], &[0.5, 0.5]),
            Err(TrainError::DegenerateLabels)
        ));
    }

    /// Four 6x6 windows with quadrant brightness chosen so the left-right
    /// feature orders them one way and the top-bottom feature another;
    /// labels follow neither single ordering.
    fn xor_like_fixture() -> (Vec<Sample>, Vec<HaarFeature>) {
        let quad = |q11: u8, q12: u8, q21: u8, q22: u8| {
            GrayImage::from_fn(6, 6, |x, y| match (x < 3, y < 3) {
                (true, true) => q11,
                (false, true) => q12,
                (true, false) => q21,
                (false, false) => q22,
            })
            .unwrap()
        };
        // (tA, tB) per sample, realized as quadrant offsets around 50
        let targets = [(4i32, 8i32), (8, 4), (12, 16), (16, 12)];
        let labels = [1i8, -1, -1, 1];
        let samples = targets
            .iter()
            .zip(labels)
            .map(|(&(ta, tb), label)| {
                let q11 = 50 + (ta + tb) / 4;
                let q22 = 50 - (ta + tb) / 4;
                let q21 = 50 + (ta - tb) / 4;
                let q12 = 50 - (ta - tb) / 4;
                Sample {
                    window: quad(q11 as u8, q12 as u8, q21 as u8, q22 as u8),
                    label,
                    weight: 0.25,
                }
            })
            .collect();
        let wr = |x, y, w, h, wt| WeightedRect {
            rect: Rect::new(x, y, w, h),
            weight: wt,
        };
        let features = vec![
            // left minus right
            HaarFeature {
                rects: vec![wr(0, 0, 3, 6, 1.0), wr(3, 0, 3, 6, -1.0)],
                tilted: false,
            },
            // top minus bottom
            HaarFeature {
                rects: vec![wr(0, 0, 6, 3, 1.0), wr(0, 3, 6, 3, -1.0)],
                tilted: false,
            },
        ];
        (samples, features)
    }

    #[test]
    fn adaboost_one_round_solves_a_separable_set() {
        let (mut samples, features) = xor_like_fixture();
        // relabel so the left-right feature alone separates
        for (i, s) in samples.iter_mut().enumerate() {
            s.label = if i < 2 { -1 } else { 1 };
        }
        let selected = adaboost_select(&samples, &features, 1).unwrap();
        assert_eq!(selected.len(), 1);
        assert_eq!(selected[0].stump.error, 0.0);
    }

    #[test]
    fn adaboost_three_rounds_fix_what_one_stump_cannot() {
        let (samples, features) = xor_like_fixture();
        let windows: Vec<&GrayImage> = samples.iter().map(|s| &s.window).collect();
        let labels: Vec<i8> = samples.iter().map(|s| s.label).collect();
        let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();
        let mut engine = BoostEngine::new(&windows, &labels, weights, &features).unwrap();
        let mut errors = Vec::new();
        for _ in 0..3 {
            engine.step().unwrap();
            errors.push(engine.strong_training_error());
            let total: f64 = engine.weights.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12, "weights sum {total}");
        }
        assert!(errors[0] > 0.0, "one stump cannot solve this set");
        assert_eq!(*errors.last().unwrap(), 0.0, "errors {errors:?}");
    }

    #[test]
    fn adaboost_is_deterministic() {
        let (samples, features) = xor_like_fixture();
        let a = adaboost_select(&samples, &features, 3).unwrap();
        let b = adaboost_select(&samples, &features, 3).unwrap();
        assert_eq!(a, b);
        let idx: Vec<usize> = a.iter().map(|s| s.feature_index).collect();
        assert_eq!(idx, vec![0, 0, 1]);
    }

    #[test]
    fn strong_training_error_is_non_increasing_on_the_corpus() {
        let (pos, neg) = make_synthetic_corpus(9, 40, 80);
        let windows: Vec<&GrayImage> = pos.iter().chain(neg.iter()).collect();
        let labels: Vec<i8> = std::iter::repeat(1)
            .take(pos.len())
            .chain(std::iter::repeat(-1).take(neg.len()))
            .collect();
        let weights = vec![1.0 / windows.len() as f64; windows.len()];
        let features = enumerate_features(19, 19);
        let mut engine = BoostEngine::new(&windows, &labels, weights, &features).unwrap();
        let mut prev = 1.0f64;
        for _ in 0..5 {
            if engine.step().is_none() {
                break;
            }
            let err = engine.strong_training_error();
            assert!(err <= prev + 1e-12, "training error grew: {prev} -> {err}");
            prev = err;
        }
        assert_eq!(prev, 0.0, "corpus should be boostable to zero error");
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_banded() {
        let (pos_a, neg_a) = make_synthetic_corpus(42, 20, 20);
        let (pos_b, neg_b) = make_synthetic_corpus(42, 20, 20);
        assert_eq!(pos_a, pos_b);
        assert_eq!(neg_a, neg_b);
        let (pos_c, _) = make_synthetic_corpus(43, 20, 20);
        assert_ne!(pos_a, pos_c);

        for p in &pos_a {
            let band: f64 = (6..10)
                .flat_map(|y| (0..19).map(move |x| (x, y)))
                .map(|(x, y)| p.get(x, y) as f64)
                .sum::<f64>()
                / (19.0 * 4.0);
            let rest: f64 = (0..19)
                .filter(|y| !(6..10).contains(y))
                .flat_map(|y| (0..19).map(move |x| (x, y)))
                .map(|(x, y)| p.get(x, y) as f64)
                .sum::<f64>()
                / (19.0 * 15.0);
            assert!(band < rest, "band {band} not darker than rest {rest}");
        }
    }

    #[test]
    fn one_hand_picked_feature_separates_the_corpus() {
        // band rows (6..10) against the rows just above: dark vs bright
        let feature = HaarFeature {
            rects: vec![
                WeightedRect {
                    rect: Rect::new(0, 6, 19, 4),
                    weight: 1.0,
                },
                WeightedRect {
                    rect: Rect::new(0, 2, 19, 4),
                    weight: -1.0,
                },
            ],
            tilted: false,
        };
        let (pos, neg) = make_synthetic_corpus(42, 300, 300);
        let value = |img: &GrayImage| {
            let ii = IntegralImage::plain(img);
            feature
                .rects
                .iter()
                .map(|wr| wr.weight * ii.rect_sum(wr.rect).unwrap() as f64)
                .sum::<f64>()
        };
        let threshold = -6000.0;
        let correct = pos.iter().filter(|p| value(p) < threshold).count()
            + neg.iter().filter(|n| value(n) >= threshold).count();
        assert!(
            correct as f64 >= 0.99 * 600.0,
            "only {correct}/600 separated"
        );
    }

    #[test]
    fn stage_on_separable_data_needs_one_weak_classifier() {
        let (pos, neg) = make_synthetic_corpus(5, 40, 40);
        let cfg = TrainConfig::default();
        let ts = train_stage(&pos, &neg, &cfg).unwrap();
        assert_eq!(ts.stage.weak.len(), 1);
        assert_eq!(ts.false_positive_rate, 0.0);
        assert!(ts.detection_rate >= cfg.stage_d_min);
        assert!(ts.warnings.is_empty());
    }

    #[test]
    fn stage_requires_negatives() {
        let (pos, _) = make_synthetic_corpus(5, 4, 1);
        assert!(matches!(
            train_stage(&pos, &[], &TrainConfig::default()),
            Err(TrainError::EmptyNegatives)
        ));
    }

    #[test]
    fn stage_meets_configured_targets_on_the_corpus() {
        let (pos, neg) = make_synthetic_corpus(42, 120, 240);
        let cfg = TrainConfig::default();
        let ts = train_stage(&pos, &neg, &cfg).unwrap();
        assert!(ts.detection_rate >= cfg.stage_d_min);
        assert!(ts.false_positive_rate <= cfg.stage_f_max);
    }

    #[test]
    fn cascade_respects_max_stages_and_is_deterministic() {
        let (pos, pool) = make_synthetic_corpus(7, 60, 120);
        let cfg = TrainConfig {
            max_stages: 1,
            ..TrainConfig::default()
        };
        let out = train_cascade_from_images(&pos, &pool, &cfg).unwrap();
        assert_eq!(out.model.stages.len(), 1);
        assert!(!out.model.var_norm);

        let again = train_cascade_from_images(&pos, &pool, &cfg).unwrap();
        assert_eq!(
            crate::cascade::serialize_cascade_xml(&out.model),
            crate::cascade::serialize_cascade_xml(&again.model)
        );
    }

    #[test]
    fn trained_cascade_detects_identically_after_an_xml_roundtrip() {
        let (pos, pool) = make_synthetic_corpus(11, 60, 120);
        let cfg = TrainConfig {
            max_stages: 2,
            ..TrainConfig::default()
        };
        let out = train_cascade_from_images(&pos, &pool, &cfg).unwrap();
        let xml = crate::cascade::serialize_cascade_xml(&out.model);
        let reparsed = crate::cascade::parse_cascade_xml(&xml).unwrap();

        let (probe_pos, probe_neg) = make_synthetic_corpus(99, 10, 10);
        for win in probe_pos.iter().chain(probe_neg.iter()) {
            let plain = IntegralImage::plain(win);
            let ctx =
                crate::detect::WindowContext::new(&plain, None, None, 0, 0, 19, 19, false);
            assert_eq!(
                crate::detect::eval_window(&out.model, &ctx),
                crate::detect::eval_window(&reparsed, &ctx)
            );
        }
    }

    #[test]
    fn per_stage_false_positive_bound_compounds_on_the_pool() {
        let (pos, pool) = make_synthetic_corpus(21, 80, 160);
        let cfg = TrainConfig {
            max_stages: 2,
            ..TrainConfig::default()
        };
        let out = train_cascade_from_images(&pos, &pool, &cfg).unwrap();
        for entry in &out.log.stages {
            assert!(entry.false_positive_rate <= cfg.stage_f_max + 1e-12);
            assert!(entry.detection_rate >= cfg.stage_d_min - 1e-12);
        }
        // cascade false-positive rate on the original pool is bounded by
        // the product of the per-stage targets
        let survivors = pool
            .iter()
            .filter(|win| {
                let plain = IntegralImage::plain(win);
                let ctx =
                    crate::detect::WindowContext::new(&plain, None, None, 0, 0, 19, 19, false);
                crate::detect::eval_window(&out.model, &ctx)
            })
            .count();
        let bound = cfg.stage_f_max.powi(out.model.stages.len() as i32);
        assert!(
            survivors as f64 / pool.len() as f64 <= bound + 1e-9,
            "{survivors}/{} > {bound}",
            pool.len()
        );
    }
}
