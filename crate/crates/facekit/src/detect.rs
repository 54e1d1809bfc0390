//! Multi-scale sliding-window detection for HAAR and MB-LBP cascades.
//!
//! The pyramid downscales the image while the window stays fixed, so one
//! feature-evaluation code path serves every level. The window slides 2
//! pixels per step on both axes, dropping to 1 pixel once the pyramid
//! scale exceeds 2 so that large faces still gather enough raw hits to
//! survive grouping (the same stepping rule the stock detector uses).
//! Raw hits are grouped with [`group_rectangles`] and the result is
//! sorted by `(y, x, w)`, which makes the output independent of internal
//! parallelism.

use rayon::prelude::*;

use crate::cascade::{CascadeModel, FeatureKind, Features, HaarFeature, LbpFeature, Stage, WeakKind};
use crate::image::{GrayImage, ImageError, Rect};
use crate::integral::IntegralImage;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("image {img_w}x{img_h} is smaller than the {win_w}x{win_h} cascade window")]
    ImageTooSmall {
        img_w: usize,
        img_h: usize,
        win_w: usize,
        win_h: usize,
    },
    #[error("bad detection parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Multi-scale detection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    /// Pyramid step ratio; must exceed 1.
    pub scale_factor: f64,
    /// Minimum cluster size a detection needs to survive grouping;
    /// 0 disables grouping entirely.
    pub min_neighbors: usize,
    /// Smallest face size (in original-image pixels) worth reporting;
    /// pyramid levels mapping below it are skipped.
    pub min_size: Option<usize>,
    /// Grouping similarity tolerance, in (0, 1).
    pub eps: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            scale_factor: 1.3,
            min_neighbors: 5,
            min_size: None,
            eps: 0.2,
        }
    }
}

/// One detection in original-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub rect: Rect,
    /// Pyramid level the (representative) hit came from.
    pub level: usize,
    /// Final-stage classifier sum of the (representative) hit.
    pub score: f64,
}

/// Per-window evaluation context: integral views for the current pyramid
/// level plus the window placement and its variance normalization.
///
/// For variance-normalizing cascades the statistics follow the stock
/// evaluator: they are taken over the window inset by one pixel on every
/// side, the normalization factor is `1/sqrt(area*sum_sq - sum^2)`, and
/// windows that are flat (`nf <= 0`) or nearly so (`sigma <= 10`) are
/// flagged for rejection before any stage runs. This convention was
/// locked in by comparing detections against a reference implementation
/// on the bundled images.
pub struct WindowContext<'a> {
    plain: &'a IntegralImage,
    rotated: Option<&'a IntegralImage>,
    pub x: usize,
    pub y: usize,
    pub window_w: usize,
    pub window_h: usize,
    /// Reciprocal of the normalization-rect area.
    pub inv_area: f64,
    /// Intensity standard deviation over the normalization rect (0 when
    /// normalization is off).
    pub sigma: f64,
    /// Factor multiplied into every HAAR feature value.
    norm_factor: f64,
    /// Variance gate: the window should not be evaluated at all.
    reject: bool,
}

impl<'a> WindowContext<'a> {
    /// Build a context for the window at `(x, y)`.
    ///
    /// `squared` and `rotated` may be omitted when the cascade does not
    /// use variance normalization / tilted features respectively.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        plain: &'a IntegralImage,
        squared: Option<&'a IntegralImage>,
        rotated: Option<&'a IntegralImage>,
        x: usize,
        y: usize,
        window_w: usize,
        window_h: usize,
        var_norm: bool,
    ) -> Self {
        let mut ctx = WindowContext {
            plain,
            rotated,
            x,
            y,
            window_w,
            window_h,
            inv_area: 1.0 / (window_w * window_h) as f64,
            sigma: 0.0,
            norm_factor: 1.0,
            reject: false,
        };
        if var_norm && window_w > 2 && window_h > 2 {
            let squared = squared.expect("variance normalization needs the squared table");
            let norm_rect = Rect::new(x + 1, y + 1, window_w - 2, window_h - 2);
            let area = norm_rect.area() as f64;
            ctx.inv_area = 1.0 / area;
            let sum = plain.rect_sum(norm_rect).expect("window in bounds") as f64;
            let sq = squared.rect_sum(norm_rect).expect("window in bounds") as f64;
            let nf = area * sq - sum * sum;
            if nf > 0.0 {
                let nf = nf.sqrt();
                ctx.norm_factor = 1.0 / nf;
                ctx.sigma = nf / area;
                ctx.reject = area * ctx.norm_factor >= 0.1; // sigma <= 10
            } else {
                ctx.norm_factor = 1.0;
                ctx.reject = true;
            }
        }
        ctx
    }

    /// Variance gate verdict (detection skips gated windows).
    pub fn rejected_by_variance_gate(&self) -> bool {
        self.reject
    }
}

/// Normalized HAAR feature value for the context's window.
pub fn eval_haar_feature(f: &HaarFeature, ctx: &WindowContext) -> f64 {
    let mut raw = 0.0;
    for wr in &f.rects {
        let r = Rect::new(wr.rect.x + ctx.x, wr.rect.y + ctx.y, wr.rect.w, wr.rect.h);
        let table = if f.tilted {
            ctx.rotated.expect("tilted feature needs the rotated table")
        } else {
            ctx.plain
        };
        raw += wr.weight * table.rect_sum(r).expect("feature rect in window") as f64;
    }
    raw * ctx.norm_factor
}

/// Multi-block LBP code in `[0, 255]` for the context's window.
///
/// Bit `p` (clockwise from the top-left neighbor cell) contributes
/// `2^(7-p)` and is set when that cell's pixel sum is `>=` the center
/// cell's.
pub fn mblbp_code(f: &LbpFeature, ctx: &WindowContext) -> u8 {
    let c = f.cell;
    let bx = ctx.x + c.x;
    let by = ctx.y + c.y;
    let cell = |i: usize, j: usize| -> i64 {
        ctx.plain
            .rect_sum(Rect::new(bx + j * c.w, by + i * c.h, c.w, c.h))
            .expect("cell in window")
    };
    let center = cell(1, 1);
    let mut code = 0u8;
    // clockwise from top-left, most significant bit first
    let neighbors = [
        (0, 0),
        (0, 1),
        (0, 2),
        (1, 2),
        (2, 2),
        (2, 1),
        (2, 0),
        (1, 0),
    ];
    for (p, &(i, j)) in neighbors.iter().enumerate() {
        if cell(i, j) >= center {
            code |= 1 << (7 - p);
        }
    }
    code
}

/// Evaluate one stage: the sum of selected leaves and whether it clears
/// the stage threshold.
pub fn eval_stage(stage: &Stage, model: &CascadeModel, ctx: &WindowContext) -> (bool, f64) {
    let mut sum = 0.0;
    for wc in &stage.weak {
        sum += match (&wc.kind, &model.features) {
            (
                WeakKind::HaarStump {
                    threshold,
                    leaf_lt,
                    leaf_ge,
                },
                Features::Haar(fs),
            ) => {
                let v = eval_haar_feature(&fs[wc.feature_index], ctx);
                if v < *threshold {
                    *leaf_lt
                } else {
                    *leaf_ge
                }
            }
            (
                WeakKind::LbpSubset {
                    subset,
                    leaf_in,
                    leaf_out,
                },
                Features::Lbp(fs),
            ) => {
                let code = mblbp_code(&fs[wc.feature_index], ctx) as usize;
                if subset[code >> 5] & (1u32 << (code & 31)) != 0 {
                    *leaf_in
                } else {
                    *leaf_out
                }
            }
            _ => panic!("weak classifier payload does not match the feature table"),
        };
    }
    (sum >= stage.threshold, sum)
}

/// True iff every stage passes, evaluated sequentially with early exit.
pub fn eval_window(model: &CascadeModel, ctx: &WindowContext) -> bool {
    eval_window_counted(model, ctx).0
}

/// As [`eval_window`] but also reports how many stages ran (used by the
/// early-exit tests) and the last stage sum.
pub(crate) fn eval_window_counted(model: &CascadeModel, ctx: &WindowContext) -> (bool, usize, f64) {
    let mut last = 0.0;
    for (i, stage) in model.stages.iter().enumerate() {
        let (pass, sum) = eval_stage(stage, model, ctx);
        last = sum;
        if !pass {
            return (false, i + 1, last);
        }
    }
    (true, model.stages.len(), last)
}

/// Group raw rectangles by similarity.
///
/// `min_neighbors == 0` returns the input unchanged. Otherwise rectangles
/// are clustered (two are similar when all of `|dx|`, `|dy|`, `|dw|`,
/// `|dh|` are at most `eps * 0.5 * (w1 + w2)`), clusters with at least
/// `min_neighbors` members emit the coordinate-wise rounded mean, and the
/// output is sorted by `(y, x, w)`.
pub fn group_rectangles(raw: &[Rect], min_neighbors: usize, eps: f64) -> Vec<Rect> {
    if min_neighbors == 0 {
        return raw.to_vec();
    }
    let clusters = cluster_rects(raw, eps);
    let mut out: Vec<Rect> = clusters
        .iter()
        .filter(|c| c.len() >= min_neighbors.max(1))
        .map(|c| mean_rect(raw, c))
        .collect();
    out.sort_by_key(|r| (r.y, r.x, r.w, r.h));
    out
}

/// Union-find clustering under the similarity relation; clusters are
/// returned ordered by their smallest member index.
fn cluster_rects(raw: &[Rect], eps: f64) -> Vec<Vec<usize>> {
    let n = raw.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = i;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    for i in 0..n {
        for j in i + 1..n {
            if similar(&raw[i], &raw[j], eps) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[rj.max(ri)] = rj.min(ri);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        match slot[root] {
            Some(s) => clusters[s].push(i),
            None => {
                slot[root] = Some(clusters.len());
                clusters.push(vec![i]);
            }
        }
    }
    clusters
}

fn similar(a: &Rect, b: &Rect, eps: f64) -> bool {
    let delta = eps * 0.5 * (a.w + b.w) as f64;
    let d = |x: usize, y: usize| (x as f64 - y as f64).abs();
    d(a.x, b.x) <= delta && d(a.y, b.y) <= delta && d(a.w, b.w) <= delta && d(a.h, b.h) <= delta
}

/// Is `a` inside `b` inflated by `eps * b.size` on every side?
fn nested_within(a: &Rect, b: &Rect, eps: f64) -> bool {
    let dx = b.w as f64 * eps;
    let dy = b.h as f64 * eps;
    a.x as f64 >= b.x as f64 - dx
        && a.y as f64 >= b.y as f64 - dy
        && a.right() as f64 <= b.right() as f64 + dx
        && a.bottom() as f64 <= b.bottom() as f64 + dy
}

fn mean_rect(raw: &[Rect], members: &[usize]) -> Rect {
    let n = members.len() as f64;
    let mean = |f: fn(&Rect) -> usize| -> usize {
        (members.iter().map(|&i| f(&raw[i])).sum::<usize>() as f64 / n).round() as usize
    };
    Rect::new(mean(|r| r.x), mean(|r| r.y), mean(|r| r.w), mean(|r| r.h))
}

/// Sliding-window detection over an image pyramid.
pub fn detect_multi_scale(
    model: &CascadeModel,
    img: &GrayImage,
    p: &DetectParams,
) -> Result<Vec<Detection>, DetectError> {
    if p.scale_factor <= 1.0 {
        return Err(DetectError::BadParams(format!(
            "scale_factor {} must exceed 1",
            p.scale_factor
        )));
    }
    if !(p.eps > 0.0 && p.eps < 1.0) {
        return Err(DetectError::BadParams(format!(
            "eps {} must lie in (0, 1)",
            p.eps
        )));
    }
    let (win_w, win_h) = (model.window_w, model.window_h);
    if img.width() < win_w || img.height() < win_h {
        return Err(DetectError::ImageTooSmall {
            img_w: img.width(),
            img_h: img.height(),
            win_w,
            win_h,
        });
    }

    let mut raw: Vec<Detection> = Vec::new();
    for level in 0.. {
        let scale = p.scale_factor.powi(level as i32);
        let lw = (img.width() as f64 / scale).round() as usize;
        let lh = (img.height() as f64 / scale).round() as usize;
        if lw < win_w || lh < win_h {
            break;
        }
        let mapped_w = (win_w as f64 * scale).round() as usize;
        let mapped_h = (win_h as f64 * scale).round() as usize;
        if let Some(min) = p.min_size {
            if mapped_w < min || mapped_h < min {
                continue;
            }
        }

        let level_img;
        let level_ref = if level == 0 {
            img
        } else {
            level_img = img.resize_bilinear(lw, lh)?;
            &level_img
        };

        let step = if scale > 2.0 { 1 } else { 2 };
        for (x, y, score) in scan_level(model, level_ref, step) {
            let rx = ((x as f64) * scale).round() as usize;
            let ry = ((y as f64) * scale).round() as usize;
            let rw = mapped_w.min(img.width());
            let rh = mapped_h.min(img.height());
            let rect = Rect::new(rx.min(img.width() - rw), ry.min(img.height() - rh), rw, rh);
            raw.push(Detection { rect, level, score });
        }
    }

    let mut out = if p.min_neighbors == 0 {
        raw
    } else {
        let rects: Vec<Rect> = raw.iter().map(|d| d.rect).collect();
        let clusters = cluster_rects(&rects, p.eps);
        let cands: Vec<(Detection, usize)> = clusters
            .iter()
            .filter(|c| c.len() >= p.min_neighbors.max(1))
            .map(|members| {
                // representative hit: strongest score, earliest on ties
                let rep = *members
                    .iter()
                    .reduce(|a, b| if raw[*b].score > raw[*a].score { b } else { a })
                    .expect("clusters are non-empty");
                (
                    Detection {
                        rect: mean_rect(&rects, members),
                        level: raw[rep].level,
                        score: raw[rep].score,
                    },
                    members.len(),
                )
            })
            .collect();
        // the same face fires on adjacent pyramid levels as concentric
        // clusters of slightly different size; drop a cluster nested in a
        // better-supported one (mirrors the stock detector's post-filter)
        cands
            .iter()
            .enumerate()
            .filter(|(i, (di, ni))| {
                !cands.iter().enumerate().any(|(j, (dj, nj))| {
                    *i != j
                        && nested_within(&di.rect, &dj.rect, p.eps)
                        && (*nj > 3.max(*ni) || *ni < 3)
                })
            })
            .map(|(_, (d, _))| *d)
            .collect()
    };
    out.sort_by_key(|d| (d.rect.y, d.rect.x, d.rect.w, d.rect.h, d.level));
    Ok(out)
}

/// Window sweep of one pyramid level; returns `(x, y, final stage sum)`
/// hits in row-major order.
fn scan_level(model: &CascadeModel, img: &GrayImage, step: usize) -> Vec<(usize, usize, f64)> {
    let (win_w, win_h) = (model.window_w, model.window_h);
    let plain = IntegralImage::plain(img);
    let squared = (model.feature_kind == FeatureKind::Haar && model.var_norm)
        .then(|| IntegralImage::squared(img));
    let rotated = model.has_tilted().then(|| IntegralImage::rotated(img));
    let compiled = CompiledCascade::new(model, img.width() + 1);

    let rows: Vec<usize> = (0..=img.height() - win_h).step_by(step).collect();
    let hits: Vec<Vec<(usize, usize, f64)>> = rows
        .par_iter()
        .map(|&y| {
            let mut row_hits = Vec::new();
            for x in (0..=img.width() - win_w).step_by(step) {
                if let Some(score) = compiled.eval(&plain, squared.as_ref(), rotated.as_ref(), x, y)
                {
                    row_hits.push((x, y, score));
                }
            }
            row_hits
        })
        .collect();
    hits.into_iter().flatten().collect()
}

/// Cascade compiled against a fixed integral-table stride: every rect
/// corner becomes a precomputed offset from the window-origin table
/// index, so a window evaluation is pure lookups.
struct CompiledCascade<'m> {
    model: &'m CascadeModel,
    features: Vec<CompiledFeature>,
    norm: Option<NormOffsets>,
}

enum CompiledFeature {
    /// Per rect: 4 corner offsets combined as `t0 + t1 - t2 - t3`, a
    /// weight, and whether the lookups hit the rotated table.
    Haar(Vec<([usize; 4], f64, bool)>),
    /// 16 corner offsets of the 4x4 lattice spanning the 3x3 cell grid.
    Lbp([usize; 16]),
}

struct NormOffsets {
    corners: [usize; 4],
    area: f64,
}

impl<'m> CompiledCascade<'m> {
    fn new(model: &'m CascadeModel, stride: usize) -> Self {
        let off = |x: usize, y: usize| y * stride + x;
        let features = match &model.features {
            Features::Haar(fs) => fs
                .iter()
                .map(|f| {
                    CompiledFeature::Haar(
                        f.rects
                            .iter()
                            .map(|wr| {
                                let r = wr.rect;
                                let corners = if f.tilted {
                                    [
                                        off(r.x, r.y),
                                        off(r.x + r.w - r.h, r.y + r.w + r.h),
                                        off(r.x + r.w, r.y + r.w),
                                        off(r.x - r.h, r.y + r.h),
                                    ]
                                } else {
                                    [
                                        off(r.right(), r.bottom()),
                                        off(r.x, r.y),
                                        off(r.right(), r.y),
                                        off(r.x, r.bottom()),
                                    ]
                                };
                                (corners, wr.weight, f.tilted)
                            })
                            .collect(),
                    )
                })
                .collect(),
            Features::Lbp(fs) => fs
                .iter()
                .map(|f| {
                    let c = f.cell;
                    let mut corners = [0usize; 16];
                    for i in 0..4 {
                        for j in 0..4 {
                            corners[i * 4 + j] = off(c.x + j * c.w, c.y + i * c.h);
                        }
                    }
                    CompiledFeature::Lbp(corners)
                })
                .collect(),
        };
        let norm = (model.feature_kind == FeatureKind::Haar
            && model.var_norm
            && model.window_w > 2
            && model.window_h > 2)
            .then(|| NormOffsets {
                corners: [
                    off(model.window_w - 1, model.window_h - 1),
                    off(1, 1),
                    off(model.window_w - 1, 1),
                    off(1, model.window_h - 1),
                ],
                area: ((model.window_w - 2) * (model.window_h - 2)) as f64,
            });
        CompiledCascade {
            model,
            features,
            norm,
        }
    }

    /// Evaluate the window at `(x, y)`; `Some(final stage sum)` when every
    /// stage passes.
    #[inline]
    fn eval(
        &self,
        plain: &IntegralImage,
        squared: Option<&IntegralImage>,
        rotated: Option<&IntegralImage>,
        x: usize,
        y: usize,
    ) -> Option<f64> {
        let base = y * plain.width() + x;
        let pt = plain.sums();
        let four = |t: &[i64], c: &[usize; 4]| -> i64 {
            t[base + c[0]] + t[base + c[1]] - t[base + c[2]] - t[base + c[3]]
        };

        let mut norm_factor = 1.0;
        if let Some(n) = &self.norm {
            let sq = squared.expect("squared table required").sums();
            let sum = four(pt, &n.corners) as f64;
            let sqsum = four(sq, &n.corners) as f64;
            let nf = n.area * sqsum - sum * sum;
            if nf <= 0.0 {
                return None;
            }
            norm_factor = 1.0 / nf.sqrt();
            if n.area * norm_factor >= 0.1 {
                return None; // sigma <= 10: too flat to be a face
            }
        }

        let rt = rotated.map(|r| r.sums());
        let mut last = 0.0;
        for stage in &self.model.stages {
            let mut sum = 0.0;
            for wc in &stage.weak {
                sum += match (&wc.kind, &self.features[wc.feature_index]) {
                    (
                        WeakKind::HaarStump {
                            threshold,
                            leaf_lt,
                            leaf_ge,
                        },
                        CompiledFeature::Haar(rects),
                    ) => {
                        let mut v = 0.0;
                        for (corners, weight, tilted) in rects {
                            let t = if *tilted {
                                rt.expect("rotated table required")
                            } else {
                                pt
                            };
                            v += weight * four(t, corners) as f64;
                        }
                        if v * norm_factor < *threshold {
                            *leaf_lt
                        } else {
                            *leaf_ge
                        }
                    }
                    (
                        WeakKind::LbpSubset {
                            subset,
                            leaf_in,
                            leaf_out,
                        },
                        CompiledFeature::Lbp(c),
                    ) => {
                        let p = |i: usize| pt[base + c[i]];
                        let cell = |tl: usize| p(tl) + p(tl + 5) - p(tl + 1) - p(tl + 4);
                        let center = cell(5);
                        let mut code = 0usize;
                        if cell(0) >= center {
                            code |= 128;
                        }
                        if cell(1) >= center {
                            code |= 64;
                        }
                        if cell(2) >= center {
                            code |= 32;
                        }
                        if cell(6) >= center {
                            code |= 16;
                        }
                        if cell(10) >= center {
                            code |= 8;
                        }
                        if cell(9) >= center {
                            code |= 4;
                        }
                        if cell(8) >= center {
                            code |= 2;
                        }
                        if cell(4) >= center {
                            code |= 1;
                        }
                        if subset[code >> 5] & (1u32 << (code & 31)) != 0 {
                            *leaf_in
                        } else {
                            *leaf_out
                        }
                    }
                    _ => unreachable!("payload checked at parse time"),
                };
            }
            last = sum;
            if sum < stage.threshold {
                return None;
            }
        }
        Some(last)
    }
}
