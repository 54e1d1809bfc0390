//! Boosted-cascade model and the stock cascade XML format.
//!
//! The parser accepts the modern cascade schema only (an `opencv_storage`
//! root holding a BOOST cascade with HAAR or LBP features and depth-1
//! weak classifiers), which is the schema every stock frontal-face and
//! eye cascade ships in. Legacy tree-structured documents are rejected
//! with [`CascadeError::UnsupportedCascade`].

use crate::image::Rect;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("malformed cascade xml at line {line}: {reason}")]
    XmlMalformed { line: usize, reason: String },
    #[error("unsupported cascade: {0}")]
    UnsupportedCascade(String),
    #[error("feature {0} escapes the detection window")]
    BoundsViolation(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Haar,
    Lbp,
}

/// One weighted rectangle of a HAAR feature, in window coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedRect {
    pub rect: Rect,
    pub weight: f64,
}

/// 2-3 weighted rectangles; zero-mean for well-formed cascades.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarFeature {
    pub rects: Vec<WeightedRect>,
    pub tilted: bool,
}

impl HaarFeature {
    /// `sum(weight * area)`; ~0 for well-formed features.
    pub fn weighted_area(&self) -> f64 {
        self.rects
            .iter()
            .map(|wr| wr.weight * wr.rect.area() as f64)
            .sum()
    }

    pub fn fits_window(&self, w: usize, h: usize) -> bool {
        self.rects.iter().all(|wr| {
            let r = wr.rect;
            if self.tilted {
                // four rotated-table lookups need a margin on the left and
                // below; see `IntegralImage::rect_sum` for the region
                r.w >= 1 && r.h >= 1 && r.x >= r.h && r.right() <= w && r.y + r.w + r.h <= h
            } else {
                r.fits_within(w, h)
            }
        })
    }
}

/// Anchor cell of a multi-block LBP feature: a 3x3 grid of `cell.w` x
/// `cell.h` blocks starting at `(cell.x, cell.y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbpFeature {
    pub cell: Rect,
}

impl LbpFeature {
    pub fn fits_window(&self, w: usize, h: usize) -> bool {
        let c = self.cell;
        c.w >= 1 && c.h >= 1 && c.x + 3 * c.w <= w && c.y + 3 * c.h <= h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Haar(Vec<HaarFeature>),
    Lbp(Vec<LbpFeature>),
}

impl Features {
    pub fn len(&self) -> usize {
        match self {
            Features::Haar(v) => v.len(),
            Features::Lbp(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            Features::Haar(_) => FeatureKind::Haar,
            Features::Lbp(_) => FeatureKind::Lbp,
        }
    }
}

/// Stump payload of a weak classifier; exactly one variant per cascade
/// feature type.
#[derive(Debug, Clone, PartialEq)]
pub enum WeakKind {
    /// Feature value `< threshold` selects `leaf_lt`, else `leaf_ge`.
    HaarStump {
        threshold: f64,
        leaf_lt: f64,
        leaf_ge: f64,
    },
    /// MB-LBP code bit set in `subset` selects `leaf_in`, else `leaf_out`.
    LbpSubset {
        subset: [u32; 8],
        leaf_in: f64,
        leaf_out: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakClassifier {
    pub feature_index: usize,
    pub kind: WeakKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub threshold: f64,
    pub weak: Vec<WeakClassifier>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub feature_kind: FeatureKind,
    pub window_w: usize,
    pub window_h: usize,
    pub stages: Vec<Stage>,
    pub features: Features,
    /// Variance-normalize HAAR feature values per window. Stock cascades
    /// are trained that way; cascades from the in-crate trainer set this
    /// to false and work on raw rectangle sums.
    pub var_norm: bool,
}

impl CascadeModel {
    pub fn total_weak(&self) -> usize {
        self.stages.iter().map(|s| s.weak.len()).sum()
    }

    pub fn has_tilted(&self) -> bool {
        match &self.features {
            Features::Haar(fs) => fs.iter().any(|f| f.tilted),
            Features::Lbp(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

/// A finding from [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelIssue {
    pub severity: Severity,
    pub message: String,
}

/// Check a model against the cascade invariants. Returns findings without
/// mutating; parsing already refuses models with `Error`-grade issues, so
/// this mainly guards hand-constructed models and flags soft oddities.
pub fn validate(model: &CascadeModel) -> Vec<ModelIssue> {
    let mut issues = Vec::new();
    let err = |msg: String| ModelIssue {
        severity: Severity::Error,
        message: msg,
    };
    let warn = |msg: String| ModelIssue {
        severity: Severity::Warning,
        message: msg,
    };

    if model.stages.is_empty() {
        issues.push(err("cascade has no stages".into()));
    }
    if model.features.kind() != model.feature_kind {
        issues.push(err("feature table kind does not match featureType".into()));
    }

    let nfeat = model.features.len();
    let mut referenced = vec![false; nfeat];
    for (si, stage) in model.stages.iter().enumerate() {
        if stage.weak.is_empty() {
            issues.push(err(format!("stage {si} has no weak classifiers")));
        }
        let mut max_sum = 0.0;
        let mut min_sum = 0.0;
        for wc in &stage.weak {
            if wc.feature_index >= nfeat {
                issues.push(err(format!(
                    "stage {si} references missing feature {}",
                    wc.feature_index
                )));
            } else {
                referenced[wc.feature_index] = true;
            }
            let payload_matches = matches!(
                (&wc.kind, model.feature_kind),
                (WeakKind::HaarStump { .. }, FeatureKind::Haar)
                    | (WeakKind::LbpSubset { .. }, FeatureKind::Lbp)
            );
            if !payload_matches {
                issues.push(err(format!(
                    "stage {si} weak classifier payload does not match feature type"
                )));
            }
            let (a, b) = match &wc.kind {
                WeakKind::HaarStump {
                    leaf_lt, leaf_ge, ..
                } => (*leaf_lt, *leaf_ge),
                WeakKind::LbpSubset {
                    leaf_in, leaf_out, ..
                } => (*leaf_in, *leaf_out),
            };
            max_sum += a.max(b);
            min_sum += a.min(b);
        }
        if !stage.weak.is_empty() && stage.threshold > max_sum {
            issues.push(warn(format!("stage {si} can never pass its threshold")));
        }
        if !stage.weak.is_empty() && stage.threshold <= min_sum {
            issues.push(warn(format!("stage {si} always passes its threshold")));
        }
    }

    match &model.features {
        Features::Haar(fs) => {
            for (i, f) in fs.iter().enumerate() {
                if !(2..=3).contains(&f.rects.len()) {
                    issues.push(err(format!("feature {i} has {} rects", f.rects.len())));
                }
                if !f.fits_window(model.window_w, model.window_h) {
                    issues.push(err(format!("feature {i} escapes the window")));
                }
                if f.weighted_area().abs() > 1e-6 {
                    issues.push(warn(format!(
                        "feature {i} is not zero-mean (sum weight*area = {})",
                        f.weighted_area()
                    )));
                }
            }
        }
        Features::Lbp(fs) => {
            for (i, f) in fs.iter().enumerate() {
                if !f.fits_window(model.window_w, model.window_h) {
                    issues.push(err(format!("feature {i} escapes the window")));
                }
            }
        }
    }

    for (i, seen) in referenced.iter().enumerate() {
        if !seen {
            issues.push(warn(format!("feature {i} is never referenced")));
        }
    }
    issues
}

/// Parse a cascade document in the modern stock schema.
pub fn parse_cascade_xml(text: &str) -> Result<CascadeModel, CascadeError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| CascadeError::XmlMalformed {
        line: e.pos().row as usize,
        reason: e.to_string(),
    })?;
    let parser = Parser { doc: &doc };
    parser.parse()
}

struct Parser<'a> {
    doc: &'a roxmltree::Document<'a>,
}

type XmlNode<'a> = roxmltree::Node<'a, 'a>;

impl<'a> Parser<'a> {
    fn line_of(&self, node: XmlNode) -> usize {
        self.doc.text_pos_at(node.range().start).row as usize
    }

    fn malformed(&self, node: XmlNode, reason: impl Into<String>) -> CascadeError {
        CascadeError::XmlMalformed {
            line: self.line_of(node),
            reason: reason.into(),
        }
    }

    fn child<'b>(&self, node: XmlNode<'b>, name: &str) -> Option<XmlNode<'b>>
    where
        'a: 'b,
    {
        node.children()
            .find(|c| c.is_element() && c.tag_name().name() == name)
    }

    fn required_child<'b>(&self, node: XmlNode<'b>, name: &str) -> Result<XmlNode<'b>, CascadeError>
    where
        'a: 'b,
    {
        self.child(node, name)
            .ok_or_else(|| self.malformed(node, format!("missing <{name}>")))
    }

    fn text_of(&self, node: XmlNode) -> String {
        node.text().unwrap_or("").trim().to_string()
    }

    fn numbers_of(&self, node: XmlNode) -> Result<Vec<f64>, CascadeError> {
        self.text_of(node)
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| self.malformed(node, format!("bad number {t:?}")))
            })
            .collect()
    }

    fn usize_of(&self, node: XmlNode) -> Result<usize, CascadeError> {
        let t = self.text_of(node);
        t.parse::<usize>()
            .map_err(|_| self.malformed(node, format!("bad integer {t:?}")))
    }

    fn parse(&self) -> Result<CascadeModel, CascadeError> {
        let root = self.doc.root_element();
        if root.tag_name().name() != "opencv_storage" {
            return Err(self.malformed(root, "root element is not <opencv_storage>"));
        }
        let cascade = root
            .children()
            .find(|c| c.is_element())
            .ok_or_else(|| self.malformed(root, "empty <opencv_storage>"))?;

        let stage_type = match self.child(cascade, "stageType") {
            Some(n) => self.text_of(n),
            None => {
                return Err(CascadeError::UnsupportedCascade(
                    "no <stageType>; this looks like the legacy tree-structured schema".into(),
                ))
            }
        };
        if stage_type != "BOOST" {
            return Err(CascadeError::UnsupportedCascade(format!(
                "stageType {stage_type:?} (only BOOST is supported)"
            )));
        }
        let feature_kind = match self
            .text_of(self.required_child(cascade, "featureType")?)
            .as_str()
        {
            "HAAR" => FeatureKind::Haar,
            "LBP" => FeatureKind::Lbp,
            other => {
                return Err(CascadeError::UnsupportedCascade(format!(
                    "featureType {other:?}"
                )))
            }
        };
        let window_h = self.usize_of(self.required_child(cascade, "height")?)?;
        let window_w = self.usize_of(self.required_child(cascade, "width")?)?;
        if window_w == 0 || window_h == 0 {
            return Err(self.malformed(cascade, "zero window dimension"));
        }
        let var_norm = !matches!(cascade.attribute("varNorm"), Some("false") | Some("0"));

        let features = self.parse_features(
            self.required_child(cascade, "features")?,
            feature_kind,
            window_w,
            window_h,
        )?;

        let stages_node = self.required_child(cascade, "stages")?;
        let mut stages = Vec::new();
        for stage_node in stages_node.children().filter(|c| c.is_element()) {
            stages.push(self.parse_stage(stage_node, feature_kind, features.len())?);
        }
        if stages.is_empty() {
            return Err(self.malformed(stages_node, "cascade has no stages"));
        }

        Ok(CascadeModel {
            feature_kind,
            window_w,
            window_h,
            stages,
            features,
            var_norm,
        })
    }

    fn parse_stage(
        &self,
        node: XmlNode,
        kind: FeatureKind,
        nfeatures: usize,
    ) -> Result<Stage, CascadeError> {
        let threshold_node = self.required_child(node, "stageThreshold")?;
        let threshold = self
            .text_of(threshold_node)
            .parse::<f64>()
            .map_err(|_| self.malformed(threshold_node, "bad stage threshold"))?;
        let weak_node = self.required_child(node, "weakClassifiers")?;
        let mut weak = Vec::new();
        for wc in weak_node.children().filter(|c| c.is_element()) {
            weak.push(self.parse_weak(wc, kind, nfeatures)?);
        }
        if weak.is_empty() {
            return Err(self.malformed(node, "stage has no weak classifiers"));
        }
        Ok(Stage { threshold, weak })
    }

    fn parse_weak(
        &self,
        node: XmlNode,
        kind: FeatureKind,
        nfeatures: usize,
    ) -> Result<WeakClassifier, CascadeError> {
        let nodes_el = self.required_child(node, "internalNodes")?;
        let nodes = self.numbers_of(nodes_el)?;
        let leaves_el = self.required_child(node, "leafValues")?;
        let leaves = self.numbers_of(leaves_el)?;
        if leaves.len() != 2 {
            return Err(self.malformed(
                leaves_el,
                format!("expected 2 leaf values, found {}", leaves.len()),
            ));
        }

        let expected = match kind {
            FeatureKind::Haar => 4,
            FeatureKind::Lbp => 11,
        };
        if nodes.len() != expected {
            // more tokens than one stump's worth means a deeper tree
            if nodes.len() > expected {
                return Err(CascadeError::UnsupportedCascade(format!(
                    "weak classifier with {} internal-node values (only depth-1 stumps are supported)",
                    nodes.len()
                )));
            }
            return Err(self.malformed(
                nodes_el,
                format!(
                    "expected {expected} internal-node values, found {}",
                    nodes.len()
                ),
            ));
        }
        if nodes[0] != 0.0 || nodes[1] != -1.0 {
            return Err(CascadeError::UnsupportedCascade(
                "weak classifier is not a depth-1 stump".into(),
            ));
        }
        let feature_index = nodes[2];
        if feature_index < 0.0 || feature_index.fract() != 0.0 {
            return Err(self.malformed(nodes_el, format!("bad feature index {feature_index}")));
        }
        let feature_index = feature_index as usize;
        if feature_index >= nfeatures {
            return Err(self.malformed(
                nodes_el,
                format!("feature index {feature_index} out of range ({nfeatures} features)"),
            ));
        }

        let kind = match kind {
            FeatureKind::Haar => WeakKind::HaarStump {
                threshold: nodes[3],
                leaf_lt: leaves[0],
                leaf_ge: leaves[1],
            },
            FeatureKind::Lbp => {
                let mut subset = [0u32; 8];
                for (i, slot) in subset.iter_mut().enumerate() {
                    let raw = nodes[3 + i];
                    if raw.fract() != 0.0 || raw < i32::MIN as f64 || raw > i32::MAX as f64 {
                        return Err(self.malformed(nodes_el, format!("bad subset word {raw}")));
                    }
                    *slot = (raw as i64 as i32) as u32;
                }
                WeakKind::LbpSubset {
                    subset,
                    leaf_in: leaves[0],
                    leaf_out: leaves[1],
                }
            }
        };
        Ok(WeakClassifier {
            feature_index,
            kind,
        })
    }

    fn parse_features(
        &self,
        node: XmlNode,
        kind: FeatureKind,
        window_w: usize,
        window_h: usize,
    ) -> Result<Features, CascadeError> {
        match kind {
            FeatureKind::Haar => {
                let mut out = Vec::new();
                for (idx, feat) in node.children().filter(|c| c.is_element()).enumerate() {
                    let rects_node = self.required_child(feat, "rects")?;
                    let mut rects = Vec::new();
                    for r in rects_node.children().filter(|c| c.is_element()) {
                        let nums = self.numbers_of(r)?;
                        if nums.len() != 5 {
                            return Err(self.malformed(
                                r,
                                format!("expected 5 rect values, found {}", nums.len()),
                            ));
                        }
                        let as_dim = |v: f64, what: &str| -> Result<usize, CascadeError> {
                            if v < 0.0 || v.fract() != 0.0 {
                                Err(self.malformed(r, format!("bad rect {what} {v}")))
                            } else {
                                Ok(v as usize)
                            }
                        };
                        rects.push(WeightedRect {
                            rect: Rect::new(
                                as_dim(nums[0], "x")?,
                                as_dim(nums[1], "y")?,
                                as_dim(nums[2], "w")?,
                                as_dim(nums[3], "h")?,
                            ),
                            weight: nums[4],
                        });
                    }
                    if !(2..=3).contains(&rects.len()) {
                        return Err(self.malformed(
                            feat,
                            format!("feature has {} rects, expected 2-3", rects.len()),
                        ));
                    }
                    let tilted = match self.child(feat, "tilted") {
                        Some(t) => self.text_of(t) != "0",
                        None => false,
                    };
                    let f = HaarFeature { rects, tilted };
                    if !f.fits_window(window_w, window_h) {
                        return Err(CascadeError::BoundsViolation(idx));
                    }
                    out.push(f);
                }
                Ok(Features::Haar(out))
            }
            FeatureKind::Lbp => {
                let mut out = Vec::new();
                for (idx, feat) in node.children().filter(|c| c.is_element()).enumerate() {
                    let rect_node = self.required_child(feat, "rect")?;
                    let nums = self.numbers_of(rect_node)?;
                    if nums.len() != 4 {
                        return Err(self.malformed(
                            rect_node,
                            format!("expected 4 rect values, found {}", nums.len()),
                        ));
                    }
                    if nums.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
                        return Err(self.malformed(rect_node, "bad cell rect"));
                    }
                    let f = LbpFeature {
                        cell: Rect::new(
                            nums[0] as usize,
                            nums[1] as usize,
                            nums[2] as usize,
                            nums[3] as usize,
                        ),
                    };
                    if !f.fits_window(window_w, window_h) {
                        return Err(CascadeError::BoundsViolation(idx));
                    }
                    out.push(f);
                }
                Ok(Features::Lbp(out))
            }
        }
    }
}

/// Serialize a model back to the stock schema. `parse(serialize(m))`
/// reproduces the model exactly (floats are printed with full round-trip
/// precision).
pub fn serialize_cascade_xml(model: &CascadeModel) -> String {
    let mut out = String::with_capacity(4096);
    out.push_str("<?xml version=\"1.0\"?>\n<opencv_storage>\n");
    if model.var_norm {
        out.push_str("<cascade type_id=\"opencv-cascade-classifier\">\n");
    } else {
        out.push_str("<cascade type_id=\"opencv-cascade-classifier\" varNorm=\"false\">\n");
    }
    out.push_str("  <stageType>BOOST</stageType>\n");
    out.push_str(match model.feature_kind {
        FeatureKind::Haar => "  <featureType>HAAR</featureType>\n",
        FeatureKind::Lbp => "  <featureType>LBP</featureType>\n",
    });
    out.push_str(&format!("  <height>{}</height>\n", model.window_h));
    out.push_str(&format!("  <width>{}</width>\n", model.window_w));
    let max_weak = model.stages.iter().map(|s| s.weak.len()).max().unwrap_or(0);
    out.push_str(&format!(
        "  <stageParams>\n    <maxWeakCount>{max_weak}</maxWeakCount></stageParams>\n"
    ));
    let max_cat = match model.feature_kind {
        FeatureKind::Haar => 0,
        FeatureKind::Lbp => 256,
    };
    out.push_str(&format!(
        "  <featureParams>\n    <maxCatCount>{max_cat}</maxCatCount></featureParams>\n"
    ));
    out.push_str(&format!("  <stageNum>{}</stageNum>\n", model.stages.len()));

    out.push_str("  <stages>\n");
    for stage in &model.stages {
        out.push_str("    <_>\n");
        out.push_str(&format!(
            "      <maxWeakCount>{}</maxWeakCount>\n",
            stage.weak.len()
        ));
        out.push_str(&format!(
            "      <stageThreshold>{}</stageThreshold>\n",
            fmt_f64(stage.threshold)
        ));
        out.push_str("      <weakClassifiers>\n");
        for wc in &stage.weak {
            out.push_str("        <_>\n");
            match &wc.kind {
                WeakKind::HaarStump {
                    threshold,
                    leaf_lt,
                    leaf_ge,
                } => {
                    out.push_str(&format!(
                        "          <internalNodes>0 -1 {} {}</internalNodes>\n",
                        wc.feature_index,
                        fmt_f64(*threshold)
                    ));
                    out.push_str(&format!(
                        "          <leafValues>{} {}</leafValues></_>\n",
                        fmt_f64(*leaf_lt),
                        fmt_f64(*leaf_ge)
                    ));
                }
                WeakKind::LbpSubset {
                    subset,
                    leaf_in,
                    leaf_out,
                } => {
                    let words: Vec<String> =
                        subset.iter().map(|&w| (w as i32).to_string()).collect();
                    out.push_str(&format!(
                        "          <internalNodes>0 -1 {} {}</internalNodes>\n",
                        wc.feature_index,
                        words.join(" ")
                    ));
                    out.push_str(&format!(
                        "          <leafValues>{} {}</leafValues></_>\n",
                        fmt_f64(*leaf_in),
                        fmt_f64(*leaf_out)
                    ));
                }
            }
        }
        out.push_str("      </weakClassifiers></_>\n");
    }
    out.push_str("  </stages>\n");

    out.push_str("  <features>\n");
    match &model.features {
        Features::Haar(fs) => {
            for f in fs {
                out.push_str("    <_>\n      <rects>\n");
                for wr in &f.rects {
                    out.push_str(&format!(
                        "        <_>{} {} {} {} {}</_>\n",
                        wr.rect.x,
                        wr.rect.y,
                        wr.rect.w,
                        wr.rect.h,
                        fmt_f64(wr.weight)
                    ));
                }
                out.push_str("      </rects>\n");
                out.push_str(&format!(
                    "      <tilted>{}</tilted></_>\n",
                    u8::from(f.tilted)
                ));
            }
        }
        Features::Lbp(fs) => {
            for f in fs {
                out.push_str(&format!(
                    "    <_>\n      <rect>{} {} {} {}</rect></_>\n",
                    f.cell.x, f.cell.y, f.cell.w, f.cell.h
                ));
            }
        }
    }
    out.push_str("  </features></cascade>\n</opencv_storage>\n");
    out
}

/// Full round-trip float formatting (shortest representation that parses
/// back to the identical bits).
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
