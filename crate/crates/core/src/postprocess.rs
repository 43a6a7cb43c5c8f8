//! Test-time ranking, non-maximum suppression and score voting.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};

/// Classification score times predicted IoU raised to `lambda`.
pub fn unified_score(p: f64, q: f64, lambda: f64) -> f64 {
    p * q.powf(lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub cls: usize,
    /// Classification score.
    pub p: f64,
    /// Predicted IoU.
    pub q: f64,
    /// Unified score used for ranking and voting.
    pub u: f64,
}

impl Detection {
    pub fn new(bbox: BoxXYXY, cls: usize, p: f64, q: f64, lambda_rank: f64) -> Self {
        Self {
            bbox,
            cls,
            p,
            q,
            u: unified_score(p, q, lambda_rank),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankBy {
    /// Classification score only.
    Cls,
    #[default]
    Unified,
}

impl RankBy {
    pub fn key(self, d: &Detection) -> f64 {
        match self {
            RankBy::Cls => d.p,
            RankBy::Unified => d.u,
        }
    }
}

impl std::str::FromStr for RankBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(RankBy::Cls),
            "unified" => Ok(RankBy::Unified),
            other => Err(Error::InvalidConfig(format!("unknown ranking `{other}`"))),
        }
    }
}

/// Orders `a` before `b` when it ranks higher: larger key, then larger
/// predicted IoU, then smaller input index.
pub fn rank_cmp(dets: &[Detection], rank: RankBy, a: usize, b: usize) -> Ordering {
    rank.key(&dets[b])
        .total_cmp(&rank.key(&dets[a]))
        .then_with(|| dets[b].q.total_cmp(&dets[a].q))
        .then_with(|| a.cmp(&b))
}

/// Greedy per-class NMS. Returns indices of kept detections, best first.
///
/// A detection is suppressed by a kept detection of the same class when
/// their IoU exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64, rank: RankBy) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_unstable_by(|&a, &b| rank_cmp(dets, rank, a, b));

    // per-class lanes, each already in rank order
    let num_classes = dets.iter().map(|d| d.cls + 1).max().unwrap_or(0);
    let mut lanes: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &i in &order {
        lanes[dets[i].cls].push(i);
    }

    let mut kept_flag = vec![false; dets.len()];
    for lane in &lanes {
        let mut suppressed = vec![false; lane.len()];
        for (pos, &i) in lane.iter().enumerate() {
            if suppressed[pos] {
                continue;
            }
            kept_flag[i] = true;
            for (later, &j) in lane.iter().enumerate().skip(pos + 1) {
                if !suppressed[later] && iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                    suppressed[later] = true;
                }
            }
        }
    }
    order.into_iter().filter(|&i| kept_flag[i]).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    /// All detections that entered NMS.
    #[default]
    PreNms,
    /// Only the detections NMS kept.
    PostNms,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VotingConfig {
    pub sigma_t: f64,
    pub pool: PoolSource,
    pub include_self: bool,
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self {
            sigma_t: 0.025,
            pool: PoolSource::PreNms,
            include_self: true,
        }
    }
}

impl VotingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_t > 0.0 && self.sigma_t.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "voting.sigma_t must be positive, got {}",
                self.sigma_t
            )))
        }
    }
}

/// Proximity weight `exp(-(1 - iou)^2 / sigma_t)` of a neighbor.
#[inline]
pub fn vote_weight(overlap: f64, sigma_t: f64) -> f64 {
    let gap = 1.0 - overlap;
    (-(gap * gap) / sigma_t).exp()
}

/// Refines `target`'s box as the average of same-class overlapping
/// `neighbors` weighted by proximity times unified score.
///
/// `neighbors` must not contain `target` itself; it joins with weight
/// `1 * u` when `include_self` is set. Returns the box unchanged when no
/// neighbor carries weight.
pub fn score_vote(target: &Detection, neighbors: &[Detection], cfg: &VotingConfig) -> BoxXYXY {
    let mut acc = [0.0f64; 4];
    let mut total = 0.0f64;
    let mut add = |b: &BoxXYXY, w: f64| {
        if w > 0.0 {
            for (slot, v) in acc.iter_mut().zip(<[f64; 4]>::from(*b)) {
                *slot += w * v;
            }
            total += w;
        }
    };
    if cfg.include_self {
        add(&target.bbox, target.u);
    }
    for n in neighbors.iter().filter(|n| n.cls == target.cls) {
        let overlap = iou(&target.bbox, &n.bbox);
        if overlap > 0.0 {
            add(&n.bbox, vote_weight(overlap, cfg.sigma_t) * n.u);
        }
    }
    if total > 0.0 {
        BoxXYXY::from(acc.map(|v| v / total))
    } else {
        target.bbox
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub iou_threshold: f64,
    pub rank: RankBy,
    /// `None` disables voting.
    pub voting: Option<VotingConfig>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.6,
            rank: RankBy::Unified,
            voting: Some(VotingConfig::default()),
        }
    }
}

/// Rank, suppress, then optionally vote. Voting only moves coordinates.
pub fn postprocess_scene(dets: &[Detection], cfg: &PostprocessConfig) -> Vec<Detection> {
    let kept = nms(dets, cfg.iou_threshold, cfg.rank);
    let Some(voting) = cfg.voting else {
        return kept.iter().map(|&i| dets[i].clone()).collect();
    };
    kept.iter()
        .map(|&i| {
            let pool: Vec<Detection> = match voting.pool {
                PoolSource::PreNms => dets
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, d)| d.clone())
                    .collect(),
                PoolSource::PostNms => kept
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| dets[j].clone())
                    .collect(),
            };
            Detection {
                bbox: score_vote(&dets[i], &pool, &voting),
                ..dets[i].clone()
            }
        })
        .collect()
}
