//! Per-pixel late-fusion rules.
//!
//! Every rule maps a [`ModelStack`] to a [`FusedScoreMap`] and then to a
//! [`LabelMask`]. Pixels are processed in parallel; the reduction over models
//! inside one pixel always runs in stack order, so results are bit-identical
//! for any thread count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probmap::{argmax_decide, Decision, FusedScoreMap, LabelMask, ModelStack};

/// Tanh-based membership `1 - tanh((p - 1)^2 / 2)`.
#[inline]
pub fn tanh_membership(p: f64) -> f64 {
    let d = p - 1.0;
    1.0 - (0.5 * d * d).tanh()
}

/// Exponential membership `1 - exp(-(p - 1)^2 / 2)`.
#[inline]
pub fn exp_membership(p: f64) -> f64 {
    let d = p - 1.0;
    // exp_m1 keeps full precision as p approaches 1.
    -(-0.5 * d * d).exp_m1()
}

/// Fuzzy rank score of one class probability: the product of both
/// memberships. Zero at `p = 1`, strictly decreasing on `[0, 1]`.
///
/// Both memberships come from one `exp_m1`: with `e = exp(-q)`,
/// `1 - tanh(q) = 2e^2 / (1 + e^2)`.
#[inline]
pub fn fuzzy_rank_score(p: f64) -> f64 {
    let d = p - 1.0;
    let m = (-0.5 * d * d).exp_m1();
    let e2 = (1.0 + m) * (1.0 + m);
    (2.0 * e2 / (1.0 + e2)) * -m
}

/// Largest fuzzy rank score, reached at `p = 0`.
pub fn fuzzy_rank_max() -> f64 {
    fuzzy_rank_score(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionRule {
    #[serde(rename = "fuzzy")]
    FuzzyRank,
    #[serde(rename = "avg")]
    Average,
    #[serde(rename = "geo")]
    Geometric,
    Median,
    Max,
    Min,
    Borda,
    Majority,
}

impl FusionRule {
    pub const ALL: [FusionRule; 8] = [
        FusionRule::Average,
        FusionRule::Geometric,
        FusionRule::Median,
        FusionRule::Max,
        FusionRule::Min,
        FusionRule::Borda,
        FusionRule::FuzzyRank,
        FusionRule::Majority,
    ];

    /// The seven rules of the comparison table, in column order.
    pub const COMPARISON: [FusionRule; 7] = [
        FusionRule::Average,
        FusionRule::Geometric,
        FusionRule::Median,
        FusionRule::Max,
        FusionRule::Min,
        FusionRule::Borda,
        FusionRule::FuzzyRank,
    ];

    /// Command-line identifier.
    pub fn id(self) -> &'static str {
        match self {
            FusionRule::FuzzyRank => "fuzzy",
            FusionRule::Average => "avg",
            FusionRule::Geometric => "geo",
            FusionRule::Median => "median",
            FusionRule::Max => "max",
            FusionRule::Min => "min",
            FusionRule::Borda => "borda",
            FusionRule::Majority => "majority",
        }
    }

    /// Column heading used in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            FusionRule::FuzzyRank => "Fuzzy Rank based Voting",
            FusionRule::Average => "Average Probability",
            FusionRule::Geometric => "Geometric Mean",
            FusionRule::Median => "Median",
            FusionRule::Max => "Maxrule",
            FusionRule::Min => "Minrule",
            FusionRule::Borda => "BC-Rule",
            FusionRule::Majority => "Majority Voting",
        }
    }

    pub fn decision(self) -> Decision {
        match self {
            FusionRule::FuzzyRank => Decision::Minimize,
            _ => Decision::Maximize,
        }
    }
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for FusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionRule::ALL
            .into_iter()
            .find(|r| r.id() == s)
            .ok_or_else(|| Error::UnknownRule(s.to_string()))
    }
}

/// Runs `kernel` on every pixel. The kernel sees the pixel's class
/// probabilities from each model in stack order and writes C scores.
fn fuse_pixels<K>(stack: &ModelStack, decision: Decision, kernel: K) -> FusedScoreMap
where
    K: Fn(&[&[f32]], &mut [f64], &mut Vec<f64>) + Sync,
{
    let shape = stack.shape();
    let (w, c) = (shape.width, shape.num_classes);
    let maps: Vec<&[f32]> = stack.maps().map(|m| m.data()).collect();
    let mut scores = vec![0.0f64; shape.len()];
    scores
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(row, out_row)| {
            let mut pixel: Vec<&[f32]> = Vec::with_capacity(maps.len());
            let mut scratch = Vec::with_capacity(maps.len().max(c));
            for (col, out) in out_row.chunks_exact_mut(c).enumerate() {
                let start = (row * w + col) * c;
                pixel.clear();
                pixel.extend(maps.iter().map(|m| &m[start..start + c]));
                kernel(&pixel, out, &mut scratch);
            }
        });
    FusedScoreMap::from_parts(shape, scores, decision)
}

fn fuzzy_kernel(pixel: &[&[f32]], out: &mut [f64], _: &mut Vec<f64>) {
    out.fill(0.0);
    for probs in pixel {
        for (fs, &p) in out.iter_mut().zip(probs.iter()) {
            *fs += fuzzy_rank_score(f64::from(p));
        }
    }
}

fn average_kernel(pixel: &[&[f32]], out: &mut [f64], _: &mut Vec<f64>) {
    out.fill(0.0);
    for probs in pixel {
        for (s, &p) in out.iter_mut().zip(probs.iter()) {
            *s += f64::from(p);
        }
    }
    let n = pixel.len() as f64;
    for s in out.iter_mut() {
        *s /= n;
    }
}

fn geometric_kernel(pixel: &[&[f32]], out: &mut [f64], _: &mut Vec<f64>) {
    out.fill(1.0);
    for probs in pixel {
        for (s, &p) in out.iter_mut().zip(probs.iter()) {
            *s *= f64::from(p);
        }
    }
}

fn median_kernel(pixel: &[&[f32]], out: &mut [f64], scratch: &mut Vec<f64>) {
    let n = pixel.len();
    for (k, s) in out.iter_mut().enumerate() {
        scratch.clear();
        scratch.extend(pixel.iter().map(|probs| f64::from(probs[k])));
        scratch.sort_unstable_by(f64::total_cmp);
        *s = if n % 2 == 1 {
            scratch[n / 2]
        } else {
            0.5 * (scratch[n / 2 - 1] + scratch[n / 2])
        };
    }
}

fn max_kernel(pixel: &[&[f32]], out: &mut [f64], _: &mut Vec<f64>) {
    out.fill(f64::NEG_INFINITY);
    for probs in pixel {
        for (s, &p) in out.iter_mut().zip(probs.iter()) {
            *s = s.max(f64::from(p));
        }
    }
}

fn min_kernel(pixel: &[&[f32]], out: &mut [f64], _: &mut Vec<f64>) {
    out.fill(f64::INFINITY);
    for probs in pixel {
        for (s, &p) in out.iter_mut().zip(probs.iter()) {
            *s = s.min(f64::from(p));
        }
    }
}

/// 1-based descending rank of class `k`; equal probabilities are ranked in
/// ascending class order.
#[inline]
fn borda_rank(probs: &[f32], k: usize) -> usize {
    let pk = probs[k];
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > pk || (p == pk && i < k))
        .count();
    ahead + 1
}

fn borda_kernel(pixel: &[&[f32]], out: &mut [f64], _: &mut Vec<f64>) {
    let c = out.len();
    out.fill(0.0);
    for probs in pixel {
        for (k, v) in out.iter_mut().enumerate() {
            *v += (c - borda_rank(probs, k)) as f64;
        }
    }
}

fn majority_kernel(pixel: &[&[f32]], out: &mut [f64], scratch: &mut Vec<f64>) {
    out.fill(0.0);
    for probs in pixel {
        scratch.clear();
        scratch.extend(probs.iter().map(|&p| f64::from(p)));
        out[Decision::Maximize.select(scratch)] += 1.0;
    }
}

/// Fused class scores of `rule`. Majority voting yields per-class vote counts.
pub fn fused_scores(rule: FusionRule, stack: &ModelStack) -> FusedScoreMap {
    let decision = rule.decision();
    match rule {
        FusionRule::FuzzyRank => fuse_pixels(stack, decision, fuzzy_kernel),
        FusionRule::Average => fuse_pixels(stack, decision, average_kernel),
        FusionRule::Geometric => fuse_pixels(stack, decision, geometric_kernel),
        FusionRule::Median => fuse_pixels(stack, decision, median_kernel),
        FusionRule::Max => fuse_pixels(stack, decision, max_kernel),
        FusionRule::Min => fuse_pixels(stack, decision, min_kernel),
        FusionRule::Borda => fuse_pixels(stack, decision, borda_kernel),
        FusionRule::Majority => fuse_pixels(stack, decision, majority_kernel),
    }
}

fn scored(rule: FusionRule, stack: &ModelStack) -> (FusedScoreMap, LabelMask) {
    let scores = fused_scores(rule, stack);
    let labels = argmax_decide(&scores);
    (scores, labels)
}

/// Fuzzy rank-based voting: `fs_k = Σ_j rs(P_k^j)`, label = argmin.
pub fn fuse_fuzzy_rank(stack: &ModelStack) -> (FusedScoreMap, LabelMask) {
    scored(FusionRule::FuzzyRank, stack)
}

pub fn fuse_average(stack: &ModelStack) -> (FusedScoreMap, LabelMask) {
    scored(FusionRule::Average, stack)
}

/// Product of class probabilities. The constant `1/N` factor is omitted since
/// it cannot move the argmax.
pub fn fuse_geometric(stack: &ModelStack) -> (FusedScoreMap, LabelMask) {
    scored(FusionRule::Geometric, stack)
}

/// Median over models; for even N, the mean of the two middle values.
pub fn fuse_median(stack: &ModelStack) -> (FusedScoreMap, LabelMask) {
    scored(FusionRule::Median, stack)
}

pub fn fuse_max(stack: &ModelStack) -> (FusedScoreMap, LabelMask) {
    scored(FusionRule::Max, stack)
}

pub fn fuse_min(stack: &ModelStack) -> (FusedScoreMap, LabelMask) {
    scored(FusionRule::Min, stack)
}

/// Borda count: `v_k = Σ_j (C - r_k^j)` with 1-based descending ranks.
pub fn fuse_borda(stack: &ModelStack) -> (FusedScoreMap, LabelMask) {
    scored(FusionRule::Borda, stack)
}

/// Each model votes its argmax; the modal label wins, ties to the lowest class.
pub fn fuse_majority(stack: &ModelStack) -> LabelMask {
    scored(FusionRule::Majority, stack).1
}

/// Dispatches to the rule-specific fusion.
pub fn fuse(rule: FusionRule, stack: &ModelStack) -> LabelMask {
    match rule {
        FusionRule::FuzzyRank => fuse_fuzzy_rank(stack).1,
        FusionRule::Average => fuse_average(stack).1,
        FusionRule::Geometric => fuse_geometric(stack).1,
        FusionRule::Median => fuse_median(stack).1,
        FusionRule::Max => fuse_max(stack).1,
        FusionRule::Min => fuse_min(stack).1,
        FusionRule::Borda => fuse_borda(stack).1,
        FusionRule::Majority => fuse_majority(stack),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probmap::{stack_models, ProbMap, Shape};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    /// Stack of 1×1 maps, one per model, from literal probability rows.
    fn pixel_stack(models: &[&[f32]]) -> ModelStack {
        let maps = models
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let map = ProbMap::new(Shape::new(1, 1, p.len()), p.to_vec()).unwrap();
                (format!("m{j}"), map)
            })
            .collect();
        stack_models(maps).unwrap()
    }

    fn label(mask: &LabelMask) -> u8 {
        mask.labels()[0]
    }

    #[test]
    fn rule_ids_round_trip() {
        for rule in FusionRule::ALL {
            assert_eq!(rule.id().parse::<FusionRule>().unwrap(), rule);
            assert_eq!(
                serde_json::to_string(&rule).unwrap(),
                format!("\"{}\"", rule.id())
            );
        }
        assert!(matches!(
            "mean".parse::<FusionRule>(),
            Err(Error::UnknownRule(_))
        ));
    }

    #[test]
    fn fuzzy_single_model_certain_pixel() {
        let (scores, mask) = fuse_fuzzy_rank(&pixel_stack(&[&[1.0, 0.0]]));
        assert_eq!(scores.decision(), Decision::Minimize);
        assert_eq!(scores.scores()[0], 0.0);
        assert_abs_diff_eq!(scores.scores()[1], fuzzy_rank_max(), epsilon = 0.0);
        assert_abs_diff_eq!(scores.scores()[1], 0.21164, epsilon = 1e-5);
        assert_eq!(label(&mask), 0);
    }

    #[test]
    fn fuzzy_two_models() {
        let (scores, mask) = fuse_fuzzy_rank(&pixel_stack(&[&[0.9, 0.1], &[0.4, 0.6]]));
        assert_abs_diff_eq!(scores.scores()[0], 0.140_357_1, epsilon = 1e-6);
        assert_abs_diff_eq!(scores.scores()[1], 0.275_815_4, epsilon = 1e-6);
        assert_eq!(label(&mask), 0);
    }

    #[test]
    fn average_examples() {
        let (scores, mask) = fuse_average(&pixel_stack(&[&[0.6, 0.4], &[0.2, 0.8]]));
        assert_abs_diff_eq!(scores.scores()[0], 0.4, epsilon = 1e-7);
        assert_abs_diff_eq!(scores.scores()[1], 0.6, epsilon = 1e-7);
        assert_eq!(label(&mask), 1);

        let p: &[f32] = &[0.2, 0.5, 0.3];
        let (scores, _) = fuse_average(&pixel_stack(&[p, p, p]));
        for (s, &q) in scores.scores().iter().zip(p) {
            assert_abs_diff_eq!(*s, f64::from(q), epsilon = 1e-15);
        }
        let (scores, _) = fuse_average(&pixel_stack(&[p]));
        let expected: Vec<f64> = p.iter().map(|&q| f64::from(q)).collect();
        assert_eq!(scores.scores(), expected.as_slice());
    }

    #[test]
    fn geometric_examples() {
        let (scores, mask) = fuse_geometric(&pixel_stack(&[&[0.6, 0.4], &[0.5, 0.5]]));
        assert_abs_diff_eq!(scores.scores()[0], 0.30, epsilon = 1e-7);
        assert_abs_diff_eq!(scores.scores()[1], 0.20, epsilon = 1e-7);
        assert_eq!(label(&mask), 0);

        let (scores, mask) = fuse_geometric(&pixel_stack(&[&[0.0, 1.0], &[0.9, 0.1]]));
        assert_eq!(scores.scores()[0], 0.0);
        assert_abs_diff_eq!(scores.scores()[1], 0.1, epsilon = 1e-7);
        assert_eq!(label(&mask), 1);
    }

    #[test]
    fn median_examples() {
        let stack = pixel_stack(&[&[0.2, 0.8], &[0.7, 0.3], &[0.4, 0.6]]);
        let (scores, mask) = fuse_median(&stack);
        assert_abs_diff_eq!(scores.scores()[0], 0.4, epsilon = 1e-7);
        assert_abs_diff_eq!(scores.scores()[1], 0.6, epsilon = 1e-7);
        assert_eq!(label(&mask), 1);

        let stack = pixel_stack(&[&[0.2, 0.8], &[0.7, 0.3]]);
        let (scores, _) = fuse_median(&stack);
        assert_abs_diff_eq!(scores.scores()[0], 0.45, epsilon = 1e-7);
    }

    #[test]
    fn max_min_examples() {
        let stack = pixel_stack(&[&[0.6, 0.4], &[0.1, 0.9]]);
        let (scores, mask) = fuse_max(&stack);
        assert_abs_diff_eq!(scores.scores()[0], 0.6, epsilon = 1e-7);
        assert_abs_diff_eq!(scores.scores()[1], 0.9, epsilon = 1e-7);
        assert_eq!(label(&mask), 1);

        let (scores, mask) = fuse_min(&stack);
        assert_abs_diff_eq!(scores.scores()[0], 0.1, epsilon = 1e-7);
        assert_abs_diff_eq!(scores.scores()[1], 0.4, epsilon = 1e-7);
        assert_eq!(label(&mask), 1);
    }

    #[test]
    fn borda_examples() {
        let stack = pixel_stack(&[&[0.5, 0.3, 0.2], &[0.2, 0.5, 0.3]]);
        let (scores, mask) = fuse_borda(&stack);
        assert_eq!(scores.scores(), &[2.0, 3.0, 1.0]);
        assert_eq!(label(&mask), 1);

        let (scores, mask) = fuse_borda(&pixel_stack(&[&[0.25; 4]]));
        // Equal probabilities rank in class order: 3, 2, 1, 0.
        assert_eq!(scores.scores(), &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(label(&mask), 0);

        let flat: &[f32] = &[0.25; 4];
        let (scores, mask) = fuse_borda(&pixel_stack(&[flat, flat]));
        assert_eq!(scores.scores(), &[6.0, 4.0, 2.0, 0.0]);
        assert_eq!(label(&mask), 0);
    }

    #[test]
    fn majority_examples() {
        let stack = pixel_stack(&[&[0.4, 0.6], &[0.3, 0.7], &[0.9, 0.1]]);
        assert_eq!(label(&fuse_majority(&stack)), 1);

        let stack = pixel_stack(&[&[0.4, 0.6], &[0.9, 0.1]]);
        assert_eq!(label(&fuse_majority(&stack)), 0);

        let stack = pixel_stack(&[&[0.1, 0.2, 0.7]]);
        assert_eq!(label(&fuse_majority(&stack)), 2);
    }

    #[test]
    fn dispatch_matches_direct_calls() {
        let stack = pixel_stack(&[&[0.5, 0.3, 0.2], &[0.2, 0.5, 0.3], &[0.1, 0.1, 0.8]]);
        assert_eq!(fuse(FusionRule::Average, &stack), fuse_average(&stack).1);
        assert_eq!(fuse(FusionRule::Borda, &stack), fuse_borda(&stack).1);
        assert_eq!(fuse(FusionRule::Majority, &stack), fuse_majority(&stack));
        let single = pixel_stack(&[&[0.1, 0.2, 0.7]]);
        assert_eq!(label(&fuse(FusionRule::FuzzyRank, &single)), 2);
    }

    #[test]
    fn fuzzy_score_bounds() {
        assert_eq!(fuzzy_rank_score(1.0), 0.0);
        let rs_max = fuzzy_rank_max();
        for i in 0..=1000 {
            let p = f64::from(i) / 1000.0;
            let t = tanh_membership(p);
            let e = exp_membership(p);
            assert!((1.0 - 0.5f64.tanh()..=1.0).contains(&t));
            assert!((0.0..=1.0 - (-0.5f64).exp() + 1e-15).contains(&e));
            assert!((0.0..=rs_max).contains(&fuzzy_rank_score(p)));
            assert_relative_eq!(fuzzy_rank_score(p), t * e, max_relative = 1e-14);
        }
    }

    #[test]
    fn fuzzy_zero_only_when_all_models_certain() {
        let stack = pixel_stack(&[&[1.0, 0.0, 0.0], &[0.999, 0.001, 0.0]]);
        let (scores, _) = fuse_fuzzy_rank(&stack);
        assert!(scores.scores()[0] > 0.0);
        let stack = pixel_stack(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let (scores, _) = fuse_fuzzy_rank(&stack);
        assert_eq!(scores.scores()[0], 0.0);
        assert_abs_diff_eq!(scores.scores()[1], 2.0 * fuzzy_rank_max(), epsilon = 1e-15);
    }
}
