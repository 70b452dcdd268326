//! Confidence-based density selection.
//!
//! Each candidate density is scored by the mean confidence of the detector's
//! well-matched predictions. Scores are weighted by the smoothed share of
//! past selections, `(count + 1) / (total + N)`, and the lowest weighted
//! score wins.

use rayon::prelude::*;

use crate::beams::{make_beam_variants, BeamVariantSpec, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{match_predictions, Box3D, Detection, IouCriterion, MatchedObject};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfidence {
    pub variant_name: String,
    pub score: f64,
    /// Matches above the IoU threshold.
    pub matched_count: usize,
    pub had_valid_matches: bool,
}

/// Mean confidence over matches whose IoU exceeds `iou_th`; zero when none do.
pub fn frame_confidence(
    variant_name: &str,
    matches: &[MatchedObject],
    iou_th: f64,
) -> FrameConfidence {
    let mut sum = 0.0;
    let mut n = 0usize;
    for m in matches.iter().filter(|m| m.iou > iou_th) {
        sum += m.prediction.confidence;
        n += 1;
    }
    FrameConfidence {
        variant_name: variant_name.to_string(),
        score: if n == 0 { 0.0 } else { sum / n as f64 },
        matched_count: n,
        had_valid_matches: n > 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    /// Selection counts in variant order.
    pub counts: Vec<(String, u64)>,
    pub iou_threshold: f64,
}

impl SelectionState {
    pub fn new<S: AsRef<str>>(names: &[S], iou_threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&iou_threshold) {
            return Err(Error::Invalid(format!("IoU threshold {iou_threshold} outside [0, 1]")));
        }
        Ok(Self {
            counts: names.iter().map(|n| (n.as_ref().to_string(), 0)).collect(),
            iou_threshold,
        })
    }

    pub fn for_variants(specs: &[BeamVariantSpec], iou_threshold: f64) -> Result<Self> {
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        Self::new(&names, iou_threshold)
    }

    pub fn count(&self, name: &str) -> Option<u64> {
        self.counts.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|(_, c)| c).sum()
    }

    fn slot(&self, name: &str) -> Result<usize> {
        self.counts
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::UnknownVariant(name.to_string()))
    }
}

/// Proportion-weighted scores `S_i * (count_i + 1) / (total + N)`.
pub fn weighted_scores(scores: &[FrameConfidence], state: &SelectionState) -> Result<Vec<f64>> {
    let total = state.total() as f64;
    let n = scores.len() as f64;
    scores
        .iter()
        .map(|s| {
            let count = state.counts[state.slot(&s.variant_name)?].1 as f64;
            Ok(s.score * (count + 1.0) / (total + n))
        })
        .collect()
}

/// Picks the variant with the lowest weighted score and records the pick.
///
/// Ties fall back to the lower raw score, then the lower selection count,
/// then the lower index.
pub fn weighted_select(scores: &[FrameConfidence], state: &mut SelectionState) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::NoVariants);
    }
    let weighted = weighted_scores(scores, state)?;
    let counts: Vec<u64> = scores
        .iter()
        .map(|s| state.counts[state.slot(&s.variant_name).unwrap()].1)
        .collect();
    let winner = (0..scores.len())
        .min_by(|&a, &b| {
            weighted[a]
                .total_cmp(&weighted[b])
                .then(scores[a].score.total_cmp(&scores[b].score))
                .then(counts[a].cmp(&counts[b]))
        })
        .expect("non-empty");
    let slot = state.slot(&scores[winner].variant_name)?;
    state.counts[slot].1 += 1;
    Ok(winner)
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub index: usize,
    pub cloud: PointCloud,
    pub confidences: Vec<FrameConfidence>,
}

impl Selection {
    pub fn chosen(&self) -> &FrameConfidence {
        &self.confidences[self.index]
    }
}

/// Scores already-built variants with `detector` and picks one.
pub fn select_among<F>(
    variants: &[PointCloud],
    specs: &[BeamVariantSpec],
    gts: &[Box3D],
    detector: F,
    criterion: IouCriterion,
    state: &mut SelectionState,
) -> Result<Selection>
where
    F: Fn(&PointCloud) -> Result<Vec<Detection>> + Sync,
{
    if variants.len() != specs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} variant clouds for {} specs",
            variants.len(),
            specs.len()
        )));
    }
    let iou_th = state.iou_threshold;
    let confidences: Vec<FrameConfidence> = variants
        .par_iter()
        .zip(specs)
        .map(|(cloud, spec)| {
            let preds = detector(cloud)?;
            let matches = match_predictions(&preds, gts, criterion);
            Ok(frame_confidence(&spec.name, &matches, iou_th))
        })
        .collect::<Result<_>>()?;
    let index = weighted_select(&confidences, state)?;
    Ok(Selection { index, cloud: variants[index].clone(), confidences })
}

/// Full selection round: build every density variant of `cloud`, score each
/// with the detector and return the least confident one (after weighting).
pub fn select_augmentation<F>(
    cloud: &PointCloud,
    source_beams: usize,
    gts: &[Box3D],
    detector: F,
    specs: &[BeamVariantSpec],
    state: &mut SelectionState,
) -> Result<Selection>
where
    F: Fn(&PointCloud) -> Result<Vec<Detection>> + Sync,
{
    let variants = make_beam_variants(cloud, source_beams, specs)?;
    select_among(&variants, specs, gts, detector, IouCriterion::Bev, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(iou: f64, conf: f64) -> MatchedObject {
        let b = Box3D::new([0.0; 3], [1.0; 3], 0.0);
        MatchedObject { pred_index: 0, prediction: Detection { bbox: b, confidence: conf }, gt_index: 0, iou }
    }

    fn fc(name: &str, score: f64) -> FrameConfidence {
        FrameConfidence {
            variant_name: name.into(),
            score,
            matched_count: usize::from(score > 0.0),
            had_valid_matches: score > 0.0,
        }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(frame_confidence("a", &[m(0.8, 0.9)], 0.5).score, 0.9);
        let two = frame_confidence("a", &[m(0.8, 0.9), m(0.4, 0.3)], 0.5);
        assert_eq!(two.score, 0.9);
        assert_eq!(two.matched_count, 1);
        let none = frame_confidence("a", &[], 0.5);
        assert_eq!(none.score, 0.0);
        assert!(!none.had_valid_matches);
        // strict threshold
        assert!(!frame_confidence("a", &[m(0.5, 0.9)], 0.5).had_valid_matches);
    }

    #[test]
    fn selection_examples() {
        let mut st = SelectionState::new(&["a", "b"], 0.5).unwrap();
        assert_eq!(weighted_select(&[fc("a", 0.4), fc("b", 0.4)], &mut st).unwrap(), 0);

        let mut st = SelectionState::new(&["a", "b"], 0.5).unwrap();
        st.counts[0].1 = 5;
        st.counts[1].1 = 5;
        assert_eq!(weighted_select(&[fc("a", 0.9), fc("b", 0.1)], &mut st).unwrap(), 1);
        assert_eq!(st.count("b"), Some(6));

        let mut st = SelectionState::new(&["a", "b"], 0.5).unwrap();
        st.counts[1].1 = 10;
        let w = weighted_scores(&[fc("a", 0.2), fc("b", 0.8)], &st).unwrap();
        assert!((w[0] - 0.2 / 12.0).abs() < 1e-15);
        assert!((w[1] - 0.8 * 11.0 / 12.0).abs() < 1e-15);
        assert_eq!(weighted_select(&[fc("a", 0.2), fc("b", 0.8)], &mut st).unwrap(), 0);
    }

    #[test]
    fn unknown_variant_rejected() {
        let mut st = SelectionState::new(&["a"], 0.5).unwrap();
        assert!(matches!(
            weighted_select(&[fc("zzz", 0.3)], &mut st),
            Err(Error::UnknownVariant(_))
        ));
        assert!(SelectionState::new(&["a"], 1.5).is_err());
    }

    #[test]
    fn zero_scores_rotate_through_variants() {
        let mut st = SelectionState::new(&["a", "b", "c"], 0.5).unwrap();
        let s = [fc("a", 0.0), fc("b", 0.0), fc("c", 0.0)];
        let picks: Vec<usize> = (0..6).map(|_| weighted_select(&s, &mut st).unwrap()).collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1, 2]);
    }

    proptest! {
        #[test]
        fn equal_scores_stay_balanced(n in 1usize..6, rounds in 0usize..120, score in 0.0..1.0f64) {
            let names: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
            let mut st = SelectionState::new(&names, 0.5).unwrap();
            let s: Vec<FrameConfidence> = names.iter().map(|nm| fc(nm, score)).collect();
            for _ in 0..rounds {
                weighted_select(&s, &mut st).unwrap();
            }
            let max = st.counts.iter().map(|c| c.1).max().unwrap();
            let min = st.counts.iter().map(|c| c.1).min().unwrap();
            prop_assert!(max - min <= 1);
        }

        #[test]
        fn choice_invariant_to_power_of_two_scaling(
            raw in proptest::collection::vec(0.0..1.0f64, 1..6),
            counts in proptest::collection::vec(0u64..20, 6),
            exp in -8i32..8,
        ) {
            let names: Vec<String> = (0..raw.len()).map(|i| format!("v{i}")).collect();
            let mut a = SelectionState::new(&names, 0.5).unwrap();
            for (slot, c) in a.counts.iter_mut().zip(&counts) { slot.1 = *c; }
            let mut b = a.clone();
            let k = 2f64.powi(exp);
            let s1: Vec<FrameConfidence> = names.iter().zip(&raw).map(|(nm, v)| fc(nm, *v)).collect();
            let s2: Vec<FrameConfidence> = names.iter().zip(&raw).map(|(nm, v)| fc(nm, v * k)).collect();
            prop_assert_eq!(weighted_select(&s1, &mut a).unwrap(), weighted_select(&s2, &mut b).unwrap());
        }

        #[test]
        fn zero_scored_variant_with_least_share_wins(
            raw in proptest::collection::vec(prop_oneof![Just(0.0), 0.01..1.0f64], 2..6),
            counts in proptest::collection::vec(0u64..20, 6),
        ) {
            let names: Vec<String> = (0..raw.len()).map(|i| format!("v{i}")).collect();
            let mut st = SelectionState::new(&names, 0.5).unwrap();
            for (slot, c) in st.counts.iter_mut().zip(&counts) { slot.1 = *c; }
            let zero: Vec<usize> = (0..raw.len()).filter(|i| raw[*i] == 0.0).collect();
            prop_assume!(!zero.is_empty());
            let least = *zero.iter().min_by_key(|i| (st.counts[**i].1, **i)).unwrap();
            let s: Vec<FrameConfidence> = names.iter().zip(&raw).map(|(nm, v)| fc(nm, *v)).collect();
            prop_assert_eq!(weighted_select(&s, &mut st).unwrap(), least);
        }
    }
}
