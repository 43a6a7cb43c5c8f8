//! Probabilistic anchor assignment.
//!
//! For every ground truth box the anchors that prefer it (by IoU) are scored
//! with the model's own losses, the top `k` per pyramid level become
//! candidates, a two-component mixture is fitted to the candidate scores and
//! a separation scheme turns the mixture into positive, ignored and negative
//! anchors. Anchors that never become candidates are negative.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorSet, BoxXYXY};
use crate::gmm::{self, EmOptions, EmReport, Gmm1D, MIN_SCORE_RANGE};
use crate::losses::{anchor_score, background_loss, score_loss, LossConfig, ModelOutput};
use crate::scenario::{GroundTruth, Scene};

/// Score of one anchor against the ground truth it was allocated to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorScore {
    pub anchor: usize,
    pub gt: usize,
    pub score: f64,
    pub level: usize,
}

/// Rule turning candidate scores (and the fitted mixture) into labels.
///
/// The mixture-based schemes share a *posterior cut*: walking the candidates
/// from the highest score down, the longest run whose positive-component
/// posterior exceeds 0.5.
///
/// * `A`: the posterior cut is positive, everything else negative.
/// * `B`: inside the cut, scores `>= m2` are positive and the rest ignored;
///   below the cut negative.
/// * `C`: as `B`, but the top candidate is promoted to positive when no
///   candidate reaches `m2`.
/// * `D`: scores `>= (m1 + m2) / 2` positive, the rest negative.
/// * `Fnp(n)`: the `n` highest scores positive, the rest negative.
/// * `Fsr(t)`: scores `> t` positive, the rest negative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SeparationScheme {
    A,
    B,
    #[default]
    C,
    D,
    Fnp(usize),
    Fsr(f64),
}

impl SeparationScheme {
    pub fn uses_mixture(&self) -> bool {
        matches!(self, Self::A | Self::B | Self::C | Self::D)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Fnp(0) => Err(Error::InvalidConfig("fnp needs at least one positive".into())),
            Self::Fsr(t) if !(t > 0.0 && t < 1.0) => {
                Err(Error::InvalidConfig(format!("fsr threshold must be in (0, 1), got {t}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SeparationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::A => f.write_str("A"),
            Self::B => f.write_str("B"),
            Self::C => f.write_str("C"),
            Self::D => f.write_str("D"),
            Self::Fnp(n) => write!(f, "fnp:{n}"),
            Self::Fsr(t) => write!(f, "fsr:{t}"),
        }
    }
}

impl FromStr for SeparationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown separation scheme `{s}`"));
        let scheme = match s.trim().to_ascii_lowercase().as_str() {
            "a" => Self::A,
            "b" => Self::B,
            "c" => Self::C,
            "d" => Self::D,
            other => {
                let (kind, arg) = other.split_once(':').ok_or_else(bad)?;
                match kind {
                    "fnp" => Self::Fnp(arg.parse().map_err(|_| bad())?),
                    "fsr" => Self::Fsr(arg.parse().map_err(|_| bad())?),
                    _ => return Err(bad()),
                }
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl TryFrom<String> for SeparationScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SeparationScheme> for String {
    fn from(s: SeparationScheme) -> Self {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Ignored,
}

/// For each ground truth, the anchors whose highest-IoU ground truth it is.
///
/// Ties go to the lower ground-truth index; anchors overlapping no ground
/// truth are not allocated at all.
pub fn best_gt_allocation(anchors: &[BoxXYXY], gts: &[BoxXYXY]) -> Vec<Vec<usize>> {
    let mut allocation = vec![Vec::new(); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let overlap = iou(anchor, gt);
            if overlap > 0.0 && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            allocation[g].push(a);
        }
    }
    allocation
}

/// Scores `allocated` anchors against ground truth `gt_index`.
pub fn score_anchors(
    allocated: &[usize],
    anchors: &AnchorSet,
    outputs: &[ModelOutput],
    gt_index: usize,
    gt: &GroundTruth,
    cfg: &LossConfig,
) -> Vec<AnchorScore> {
    allocated
        .iter()
        .map(|&a| AnchorScore {
            anchor: a,
            gt: gt_index,
            score: anchor_score(&outputs[a], &gt.bbox, gt.cls, cfg),
            level: anchors.levels[a],
        })
        .collect()
}

/// Per level, every anchor scoring at least the level's `k`-th largest
/// score (all of them when the level has fewer than `k`). Ties at the
/// threshold are all admitted. Input order is preserved.
pub fn topk_candidates(scored: &[AnchorScore], num_levels: usize, k: usize) -> Vec<AnchorScore> {
    assert!(k >= 1, "k must be at least 1");
    let mut thresholds = vec![f64::NEG_INFINITY; num_levels];
    let mut per_level: Vec<Vec<f64>> = vec![Vec::new(); num_levels];
    for s in scored {
        per_level[s.level].push(s.score);
    }
    for (level, scores) in per_level.iter_mut().enumerate() {
        if scores.len() > k {
            let (_, kth, _) = scores.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
            thresholds[level] = *kth;
        }
    }
    scored
        .iter()
        .filter(|s| s.score >= thresholds[s.level])
        .copied()
        .collect()
}

fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Labels candidate `scores` under `scheme`.
///
/// Mixture schemes need the fitted `gmm`; passing `None` marks the
/// candidates as inseparable and labels all of them positive. `Fnp` and
/// `Fsr` ignore the mixture.
pub fn separate(scores: &[f64], gmm: Option<&Gmm1D>, scheme: SeparationScheme) -> Vec<Label> {
    let mut labels = vec![Label::Negative; scores.len()];
    let order = descending_order(scores);
    match scheme {
        SeparationScheme::Fnp(n) => {
            for &i in order.iter().take(n) {
                labels[i] = Label::Positive;
            }
        }
        SeparationScheme::Fsr(t) => {
            for (label, &s) in labels.iter_mut().zip(scores) {
                if s > t {
                    *label = Label::Positive;
                }
            }
        }
        _ => {
            let Some(g) = gmm else {
                labels.fill(Label::Positive);
                return labels;
            };
            let cut = order
                .iter()
                .take_while(|&&i| g.posterior(scores[i]).1 > 0.5)
                .count();
            match scheme {
                SeparationScheme::A => {
                    for &i in &order[..cut] {
                        labels[i] = Label::Positive;
                    }
                }
                SeparationScheme::B | SeparationScheme::C => {
                    for &i in &order[..cut] {
                        labels[i] = if scores[i] >= g.m2 {
                            Label::Positive
                        } else {
                            Label::Ignored
                        };
                    }
                    if scheme == SeparationScheme::C
                        && !labels.contains(&Label::Positive)
                        && !order.is_empty()
                    {
                        labels[order[0]] = Label::Positive;
                    }
                }
                SeparationScheme::D => {
                    let mid = 0.5 * (g.m1 + g.m2);
                    for (label, &s) in labels.iter_mut().zip(scores) {
                        if s >= mid {
                            *label = Label::Positive;
                        }
                    }
                }
                SeparationScheme::Fnp(_) | SeparationScheme::Fsr(_) => unreachable!(),
            }
        }
    }
    labels
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignConfig {
    pub loss: LossConfig,
    pub scheme: SeparationScheme,
    /// Candidates kept per pyramid level.
    pub k: usize,
    pub em: EmOptions,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            scheme: SeparationScheme::C,
            k: 9,
            em: EmOptions::default(),
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.scheme.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Diagnostics for one ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub gt: usize,
    /// Number of anchors allocated to this ground truth.
    pub allocated: usize,
    pub candidates: Vec<AnchorScore>,
    /// Candidates were too few or too uniform to fit a mixture.
    pub degenerate: bool,
    pub gmm: Option<Gmm1D>,
    pub em: Option<EmReport>,
    pub positives: Vec<usize>,
    pub ignored: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Partition of a scene's anchors into positives, negatives and ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub scene_id: String,
    pub num_anchors: usize,
    /// Positive anchors, ascending.
    pub positives: Vec<usize>,
    /// Ground truth matched to each entry of `positives`.
    pub positive_gts: Vec<usize>,
    pub negatives: Vec<usize>,
    pub ignored: Vec<usize>,
    pub per_gt: Vec<GtRecord>,
}

impl AssignmentResult {
    pub fn labels(&self) -> Vec<Option<Label>> {
        let mut labels = vec![None; self.num_anchors];
        for (set, label) in [
            (&self.positives, Label::Positive),
            (&self.negatives, Label::Negative),
            (&self.ignored, Label::Ignored),
        ] {
            for &a in set {
                if let Some(slot) = labels.get_mut(a) {
                    *slot = Some(label);
                }
            }
        }
        labels
    }

    /// Checks that the three sets are disjoint and cover every anchor.
    pub fn validate_partition(&self) -> Result<()> {
        let mut seen = vec![false; self.num_anchors];
        for &a in self.positives.iter().chain(&self.negatives).chain(&self.ignored) {
            match seen.get_mut(a) {
                None => {
                    return Err(Error::InvalidScene {
                        id: self.scene_id.clone(),
                        reason: format!("anchor {a} out of range"),
                    })
                }
                Some(true) => {
                    return Err(Error::InvalidScene {
                        id: self.scene_id.clone(),
                        reason: format!("anchor {a} carries two labels"),
                    })
                }
                Some(flag) => *flag = true,
            }
        }
        if let Some(a) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidScene {
                id: self.scene_id.clone(),
                reason: format!("anchor {a} is unlabeled"),
            });
        }
        if self.positive_gts.len() != self.positives.len() {
            return Err(Error::InvalidScene {
                id: self.scene_id.clone(),
                reason: "positive_gts does not match positives".into(),
            });
        }
        Ok(())
    }
}

/// Labels, degenerate flag and the fitted mixture with its EM report.
type Separation = (Vec<Label>, bool, Option<Gmm1D>, Option<EmReport>);

/// Labels one ground truth's candidates, fitting the mixture when needed.
fn separate_candidates(candidates: &[AnchorScore], cfg: &AssignConfig) -> Result<Separation> {
    let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    if !cfg.scheme.uses_mixture() || scores.is_empty() {
        return Ok((separate(&scores, None, cfg.scheme), false, None, None));
    }
    let (lo, hi) = gmm::min_max(&scores);
    if scores.len() == 1 || hi - lo < MIN_SCORE_RANGE {
        return Ok((separate(&scores, None, cfg.scheme), true, None, None));
    }
    let (fitted, report) = gmm::fit(&scores, &cfg.em)?;
    Ok((separate(&scores, Some(&fitted), cfg.scheme), false, Some(fitted), Some(report)))
}

/// Runs the full assignment for one scene.
pub fn assign(scene: &Scene, cfg: &AssignConfig) -> Result<AssignmentResult> {
    let anchors = scene.anchors();
    let gt_boxes: Vec<BoxXYXY> = scene.gts.iter().map(|g| g.bbox).collect();
    let allocation = best_gt_allocation(&anchors.boxes, &gt_boxes);

    // (label, gt, score) per anchor; positives > ignored > negatives on conflict
    let mut claims: Vec<Option<(Label, usize, f64)>> = vec![None; anchors.len()];
    let mut per_gt = Vec::with_capacity(scene.gts.len());

    for (g, (gt, allocated)) in scene.gts.iter().zip(&allocation).enumerate() {
        let scored = score_anchors(allocated, &anchors, &scene.outputs, g, gt, &cfg.loss);
        let candidates = topk_candidates(&scored, anchors.num_levels(), cfg.k);
        let (labels, degenerate, fitted, report) = separate_candidates(&candidates, cfg)?;

        let mut record = GtRecord {
            gt: g,
            allocated: allocated.len(),
            candidates: Vec::new(),
            degenerate,
            gmm: fitted,
            em: report,
            positives: Vec::new(),
            ignored: Vec::new(),
            negatives: Vec::new(),
        };
        for (c, label) in candidates.iter().zip(labels) {
            match label {
                Label::Positive => record.positives.push(c.anchor),
                Label::Ignored => record.ignored.push(c.anchor),
                Label::Negative => record.negatives.push(c.anchor),
            }
            let slot = &mut claims[c.anchor];
            let wins = match *slot {
                None => true,
                Some((held, _, held_score)) => {
                    rank(label) > rank(held) || (label == held && c.score > held_score)
                }
            };
            if wins {
                *slot = Some((label, g, c.score));
            }
        }
        record.candidates = candidates;
        per_gt.push(record);
    }

    let mut result = AssignmentResult {
        scene_id: scene.id.clone(),
        num_anchors: anchors.len(),
        positives: Vec::new(),
        positive_gts: Vec::new(),
        negatives: Vec::new(),
        ignored: Vec::new(),
        per_gt,
    };
    for (a, claim) in claims.into_iter().enumerate() {
        match claim {
            Some((Label::Positive, g, _)) => {
                result.positives.push(a);
                result.positive_gts.push(g);
            }
            Some((Label::Ignored, _, _)) => result.ignored.push(a),
            Some((Label::Negative, _, _)) | None => result.negatives.push(a),
        }
    }
    Ok(result)
}

fn rank(label: Label) -> u8 {
    match label {
        Label::Negative => 0,
        Label::Ignored => 1,
        Label::Positive => 2,
    }
}

/// Log of the hard-assignment likelihood: positive anchors contribute the
/// log of their anchor score, negative anchors the log of their background
/// score and ignored anchors nothing. Never positive.
pub fn evaluate_objective(result: &AssignmentResult, scene: &Scene, cfg: &LossConfig) -> f64 {
    let pos: f64 = result
        .positives
        .iter()
        .zip(&result.positive_gts)
        .map(|(&a, &g)| {
            let gt = &scene.gts[g];
            -score_loss(&scene.outputs[a], &gt.bbox, gt.cls, cfg)
        })
        .sum();
    let neg: f64 = result
        .negatives
        .iter()
        .map(|&a| -background_loss(&scene.outputs[a], cfg))
        .sum();
    pos + neg
}
