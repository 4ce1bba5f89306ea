//! Dense per-pixel tensors shared by every fusion rule.
//!
//! All tensors are row-major with the class axis varying fastest, so the
//! scores of pixel `(row, col)` live at `[(row * width + col) * C ..][..C]`.
//! Probabilities are stored as `f32`; every score derived from them is `f64`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σ p - 1|` and on each probability leaving `[0, 1]`.
pub const SIMPLEX_TOL: f64 = 1e-4;

/// Largest number of classes a mask byte can address.
pub const MAX_CLASSES: usize = 256;

/// Violations listed in a [`ValidationReport`] error message.
const REPORTED_VIOLATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_classes,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels() * self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.height, self.width, self.num_classes)
    }
}

/// Class names and an optional rendering palette.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSet {
    names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    palette: Option<Vec<[u8; 3]>>,
}

impl ClassSet {
    pub fn new(names: Vec<String>, palette: Option<Vec<[u8; 3]>>) -> Result<Self> {
        let set = Self { names, palette };
        set.check()?;
        Ok(set)
    }

    /// Classes named `class0 .. class{C-1}` without a palette.
    pub fn numbered(num_classes: usize) -> Result<Self> {
        Self::new(
            (0..num_classes).map(|k| format!("class{k}")).collect(),
            None,
        )
    }

    pub fn with_palette(mut self, palette: Vec<[u8; 3]>) -> Result<Self> {
        self.palette = Some(palette);
        self.check()?;
        Ok(self)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let c = self.names.len();
        if c < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {c}")));
        }
        if c > MAX_CLASSES {
            return Err(Error::invalid(format!(
                "at most {MAX_CLASSES} classes are supported, got {c}"
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Duplicate {
                    kind: "class name",
                    name: name.clone(),
                });
            }
        }
        if let Some(palette) = &self.palette {
            if palette.len() != c {
                return Err(Error::invalid(format!(
                    "palette has {} entries for {c} classes",
                    palette.len()
                )));
            }
            let mut seen = HashSet::new();
            for rgb in palette {
                if !seen.insert(*rgb) {
                    return Err(Error::Duplicate {
                        kind: "palette color",
                        name: format!("{rgb:?}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn palette(&self) -> Option<&[[u8; 3]]> {
        self.palette.as_deref()
    }
}

/// One pixel that failed the simplex check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexViolation {
    pub row: usize,
    pub col: usize,
    /// Largest of `|Σ p - 1|` and the distance of any `p` outside `[0, 1]`.
    /// Infinite for non-finite entries.
    pub deviation: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<SimplexViolation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} pixel(s) violate the probability simplex",
            self.violations.len()
        )?;
        for (i, v) in self.violations.iter().take(REPORTED_VIOLATIONS).enumerate() {
            let sep = if i == 0 { ": " } else { ", " };
            write!(f, "{sep}({}, {}) off by {:.3e}", v.row, v.col, v.deviation)?;
        }
        if self.violations.len() > REPORTED_VIOLATIONS {
            write!(f, ", ...")?;
        }
        Ok(())
    }
}

/// Checks every pixel of a raw `H×W×C` buffer against the simplex constraint.
///
/// Report-only: callers decide whether to reject.
pub fn validate_probmap(shape: Shape, data: &[f32]) -> ValidationReport {
    assert_eq!(
        data.len(),
        shape.len(),
        "buffer does not match shape {shape}"
    );
    let c = shape.num_classes;
    let mut violations = Vec::new();
    if c == 0 {
        return ValidationReport { violations };
    }
    for (idx, pixel) in data.chunks_exact(c).enumerate() {
        let deviation = pixel_deviation(pixel);
        if deviation.is_nan() || deviation > SIMPLEX_TOL {
            violations.push(SimplexViolation {
                row: idx / shape.width,
                col: idx % shape.width,
                deviation,
            });
        }
    }
    ValidationReport { violations }
}

fn pixel_deviation(pixel: &[f32]) -> f64 {
    let mut sum = 0.0f64;
    let mut outside = 0.0f64;
    for &p in pixel {
        if !p.is_finite() {
            return f64::INFINITY;
        }
        let p = f64::from(p);
        sum += p;
        outside = outside.max(-p).max(p - 1.0);
    }
    (sum - 1.0).abs().max(outside)
}

/// A per-pixel class-probability map for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    shape: Shape,
    data: Vec<f32>,
}

impl ProbMap {
    /// Validates `data` against the simplex tolerance, then clamps every
    /// entry into `[0, 1]`.
    pub fn new(shape: Shape, mut data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "buffer has {} values but shape {shape} needs {}",
                data.len(),
                shape.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let report = validate_probmap(shape, &data);
        if !report.passed() {
            return Err(Error::Simplex(report));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { shape, data })
    }

    /// Builds a map by applying [`softmax`] to every pixel of a logit tensor.
    pub fn from_logits(shape: Shape, logits: &[f64]) -> Result<Self> {
        check_shape(shape)?;
        if logits.len() != shape.len() {
            return Err(Error::invalid(format!(
                "logit buffer has {} values but shape {shape} needs {}",
                logits.len(),
                shape.len()
            )));
        }
        let mut data = Vec::with_capacity(shape.len());
        for (i, pixel) in logits.chunks_exact(shape.num_classes).enumerate() {
            let probs = softmax(pixel).map_err(|e| match e {
                Error::NonFinite { index } => Error::NonFinite {
                    index: i * shape.num_classes + index,
                },
                other => other,
            })?;
            data.extend(probs.into_iter().map(|p| p as f32));
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let c = self.shape.num_classes;
        let start = (row * self.shape.width + col) * c;
        &self.data[start..start + c]
    }

    /// Class-index mask of each pixel's most probable class.
    pub fn argmax(&self) -> LabelMask {
        let c = self.shape.num_classes;
        let labels = self
            .data
            .chunks_exact(c)
            .map(|p| select_f32(p) as u8)
            .collect();
        LabelMask {
            height: self.shape.height,
            width: self.shape.width,
            labels,
        }
    }
}

fn select_f32(pixel: &[f32]) -> usize {
    let mut best = 0;
    for (k, &p) in pixel.iter().enumerate().skip(1) {
        if p > pixel[best] {
            best = k;
        }
    }
    best
}

fn check_shape(shape: Shape) -> Result<()> {
    if shape.height == 0 || shape.width == 0 {
        return Err(Error::invalid(format!("empty image shape {shape}")));
    }
    if shape.num_classes < 2 || shape.num_classes > MAX_CLASSES {
        return Err(Error::invalid(format!(
            "class count must be in 2..={MAX_CLASSES}, got {}",
            shape.num_classes
        )));
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&y| (y - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Ordered probability maps of N models for the same image.
#[derive(Debug, Clone)]
pub struct ModelStack {
    models: Vec<(String, ProbMap)>,
}

impl ModelStack {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.models[0].1.shape()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.iter().map(|(name, _)| name.as_str())
    }

    pub fn maps(&self) -> impl Iterator<Item = &ProbMap> {
        self.models.iter().map(|(_, map)| map)
    }

    pub fn models(&self) -> &[(String, ProbMap)] {
        &self.models
    }
}

/// Groups maps into a stack, keeping their order.
pub fn stack_models(maps: Vec<(String, ProbMap)>) -> Result<ModelStack> {
    let Some((first_name, first)) = maps.first() else {
        return Err(Error::invalid("cannot stack zero models"));
    };
    for (name, map) in &maps[1..] {
        if map.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                first: first_name.clone(),
                first_shape: first.shape(),
                second: name.clone(),
                second_shape: map.shape(),
            });
        }
    }
    Ok(ModelStack { models: maps })
}

/// H×W class-index image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "mask has {} labels but {height}x{width} needs {}",
                labels.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub(crate) fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    /// Fails on the first label `>= num_classes`.
    pub fn check_classes(&self, num_classes: usize, context: &str) -> Result<()> {
        match self.labels.iter().find(|&&l| usize::from(l) >= num_classes) {
            Some(&label) => Err(Error::LabelOutOfRange {
                context: context.to_string(),
                label,
                num_classes,
            }),
            None => Ok(()),
        }
    }
}

/// Which direction of a score selects the winning class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Minimize,
    Maximize,
}

impl Decision {
    /// Index of the winning score; ties go to the lowest index.
    pub fn select(self, scores: &[f64]) -> usize {
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate().skip(1) {
            let better = match self {
                Decision::Maximize => s > scores[best],
                Decision::Minimize => s < scores[best],
            };
            if better {
                best = k;
            }
        }
        best
    }
}

/// Per-pixel fused class scores plus the direction that picks the winner.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScoreMap {
    shape: Shape,
    scores: Vec<f64>,
    decision: Decision,
}

impl FusedScoreMap {
    pub fn new(shape: Shape, scores: Vec<f64>, decision: Decision) -> Result<Self> {
        if scores.len() != shape.len() {
            return Err(Error::invalid(format!(
                "score buffer has {} values but shape {shape} needs {}",
                scores.len(),
                shape.len()
            )));
        }
        if let Some(index) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            shape,
            scores,
            decision,
        })
    }

    pub(crate) fn from_parts(shape: Shape, scores: Vec<f64>, decision: Decision) -> Self {
        debug_assert_eq!(scores.len(), shape.len());
        Self {
            shape,
            scores,
            decision,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn decision(&self) -> Decision {
        self.decision
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let c = self.shape.num_classes;
        let start = (row * self.shape.width + col) * c;
        &self.scores[start..start + c]
    }
}

/// Picks the winning class of every pixel according to the map's decision flag.
pub fn argmax_decide(scores: &FusedScoreMap) -> LabelMask {
    let c = scores.shape.num_classes;
    let labels = scores
        .scores
        .chunks_exact(c)
        .map(|p| scores.decision.select(p) as u8)
        .collect();
    LabelMask {
        height: scores.shape.height,
        width: scores.shape.width,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single(pixel: &[f32]) -> Result<ProbMap> {
        ProbMap::new(Shape::new(1, 1, pixel.len()), pixel.to_vec())
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for p in softmax(&[1000.0, 1000.0, 1000.0]).unwrap() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_names_non_finite_index() {
        match softmax(&[0.0, 1.0, f64::NAN]) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 2),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn validate_examples() {
        let shape = Shape::new(1, 1, 2);
        assert!(validate_probmap(shape, &[0.5, 0.5]).passed());

        let report = validate_probmap(shape, &[0.6, 0.6]);
        assert_eq!(report.violations.len(), 1);
        assert_abs_diff_eq!(report.violations[0].deviation, 0.2, epsilon = 1e-6);

        assert!(validate_probmap(shape, &[1.00005, -0.00005]).passed());
        let map = single(&[1.00005, -0.00005]).unwrap();
        assert_eq!(map.data(), &[1.0, 0.0]);
    }

    #[test]
    fn validate_flags_out_of_range_and_nan() {
        let shape = Shape::new(1, 2, 2);
        let report = validate_probmap(shape, &[1.5, -0.5, f32::NAN, 1.0]);
        assert_eq!(report.violations.len(), 2);
        assert_eq!((report.violations[0].row, report.violations[0].col), (0, 0));
        assert_abs_diff_eq!(report.violations[0].deviation, 0.5, epsilon = 1e-12);
        assert!(report.violations[1].deviation.is_infinite());
    }

    #[test]
    fn probmap_rejects_bad_input() {
        assert!(matches!(single(&[0.6, 0.6]), Err(Error::Simplex(_))));
        assert!(matches!(
            single(&[f32::NAN, 1.0]),
            Err(Error::NonFinite { index: 0 })
        ));
        assert!(single(&[1.0]).is_err());
        assert!(ProbMap::new(Shape::new(1, 1, 2), vec![0.5]).is_err());
    }

    #[test]
    fn simplex_error_lists_at_most_ten_pixels() {
        let shape = Shape::new(3, 5, 2);
        let report = validate_probmap(shape, &vec![0.0; shape.len()]);
        assert_eq!(report.violations.len(), 15);
        let msg = report.to_string();
        assert!(msg.starts_with("15 pixel(s)"));
        assert_eq!(msg.matches(" off by ").count(), 10);
        assert!(!msg.contains("(2, 4)"));
    }

    #[test]
    fn argmax_decide_examples() {
        let shape = Shape::new(1, 1, 3);
        let m = FusedScoreMap::new(shape, vec![0.2, 0.5, 0.3], Decision::Maximize).unwrap();
        assert_eq!(argmax_decide(&m).labels(), &[1]);

        let shape = Shape::new(1, 1, 2);
        let m = FusedScoreMap::new(shape, vec![0.5, 0.5], Decision::Maximize).unwrap();
        assert_eq!(argmax_decide(&m).labels(), &[0]);

        let m = FusedScoreMap::new(shape, vec![0.14, 0.28], Decision::Minimize).unwrap();
        assert_eq!(argmax_decide(&m).labels(), &[0]);

        let m = FusedScoreMap::new(shape, vec![0.3, 0.3], Decision::Minimize).unwrap();
        assert_eq!(argmax_decide(&m).labels(), &[0]);
    }

    #[test]
    fn stack_examples() {
        let uniform = |c: usize| {
            ProbMap::new(Shape::new(224, 224, c), vec![1.0 / c as f32; 224 * 224 * c]).unwrap()
        };
        let stack = stack_models(vec![("U".into(), uniform(5)), ("S".into(), uniform(5))]).unwrap();
        assert_eq!(stack.len(), 2);
        assert_eq!(stack.names().collect::<Vec<_>>(), vec!["U", "S"]);

        let err =
            stack_models(vec![("U".into(), uniform(5)), ("S".into(), uniform(2))]).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("'U'") && msg.contains("(224, 224, 5)"),
            "{msg}"
        );
        assert!(
            msg.contains("'S'") && msg.contains("(224, 224, 2)"),
            "{msg}"
        );

        assert_eq!(
            stack_models(vec![("U".into(), uniform(2))]).unwrap().len(),
            1
        );
        assert!(stack_models(vec![]).is_err());
    }

    #[test]
    fn class_set_invariants() {
        assert!(ClassSet::numbered(1).is_err());
        assert!(ClassSet::new(vec!["a".into(), "a".into()], None).is_err());
        let set = ClassSet::numbered(2).unwrap();
        assert!(set.clone().with_palette(vec![[0, 0, 0]]).is_err());
        assert!(set
            .clone()
            .with_palette(vec![[1, 2, 3], [1, 2, 3]])
            .is_err());
        assert!(set.with_palette(vec![[0, 0, 0], [255, 255, 255]]).is_ok());
    }

    #[test]
    fn mask_label_range() {
        let mask = LabelMask::new(1, 3, vec![0, 1, 4]).unwrap();
        assert!(mask.check_classes(5, "img").is_ok());
        let err = mask.check_classes(4, "img").unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 4, .. }));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-1e3f64..1e3, 1..16)) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let arg_in = Decision::Maximize.select(&logits);
            let arg_out = Decision::Maximize.select(&p);
            // Distinct logits can underflow to equal probabilities only far from the max.
            prop_assert_eq!(p[arg_in], p[arg_out]);
        }

        #[test]
        fn validate_accepts_softmax_output(
            logits in prop::collection::vec(-1e3f64..1e3, 2..9),
        ) {
            let c = logits.len();
            let map = ProbMap::from_logits(Shape::new(1, 1, c), &logits);
            prop_assert!(map.is_ok());
        }

        #[test]
        fn argmax_invariant_to_shift_and_scale(
            scores in prop::collection::vec(-10f64..10.0, 2..9),
            shift in -100f64..100.0,
            scale in 0.01f64..100.0,
        ) {
            let c = scores.len();
            let base = Decision::Maximize.select(&scores);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            // Float rounding may merge near-ties; only compare with a clear margin.
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            let shape = Shape::new(1, 1, c);
            for s in [shifted, scaled] {
                let m = FusedScoreMap::new(shape, s, Decision::Maximize).unwrap();
                prop_assert_eq!(usize::from(argmax_decide(&m).labels()[0]), base);
            }
        }
    }
}
