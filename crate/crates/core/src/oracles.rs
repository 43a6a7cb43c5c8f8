//! Brute-force reference implementations.
//!
//! These are deliberately literal and slow. They share no code path with the
//! functions they check beyond the scalar loss and IoU definitions, and are
//! shipped in the library so `--self-check` can run them on real inputs.

use std::collections::BTreeSet;

use crate::assignment::{AssignConfig, SeparationScheme};
use crate::error::Result;
use crate::geometry::{iou, AnchorSet, BoxXYXY};
use crate::gmm::{self, normal_log_pdf, Gmm1D};
use crate::losses::anchor_score;
use crate::postprocess::{Detection, RankBy, VotingConfig};
use crate::scenario::Scene;

/// IoU estimated by counting cells of a `resolution x resolution` raster
/// over the joint bounding region. A cell belongs to a box when its center
/// does.
pub fn iou_raster(a: &BoxXYXY, b: &BoxXYXY, resolution: usize) -> f64 {
    let region = a.enclosing(b);
    if region.width() <= 0.0 || region.height() <= 0.0 || resolution == 0 {
        return 0.0;
    }
    // membership is separable per axis, so each axis is rasterized once
    // cells per axis in each membership class: bit 0 = inside a, bit 1 = inside b
    let axis = |lo: f64, span: f64, ra: (f64, f64), rb: (f64, f64)| -> [u64; 4] {
        let mut counts = [0u64; 4];
        for i in 0..resolution {
            let c = lo + (i as f64 + 0.5) * span / resolution as f64;
            let in_a = c >= ra.0 && c <= ra.1;
            let in_b = c >= rb.0 && c <= rb.1;
            counts[usize::from(in_a) | usize::from(in_b) << 1] += 1;
        }
        counts
    };
    let xs = axis(region.x1, region.width(), (a.x1, a.x2), (b.x1, b.x2));
    let ys = axis(region.y1, region.height(), (a.y1, a.y2), (b.y1, b.y2));
    let mut inter = 0u64;
    let mut union = 0u64;
    for (cx, &nx) in xs.iter().enumerate() {
        for (cy, &ny) in ys.iter().enumerate() {
            let both = cx & cy;
            if both == 3 {
                inter += nx * ny;
            }
            if both != 0 {
                union += nx * ny;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Parameter lattice for [`gmm_grid_mle`]. Means are spread evenly over the
/// data range; the two components share one standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    pub mean_steps: usize,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for Lattice {
    fn default() -> Self {
        Self {
            mean_steps: 41,
            // log-spaced from 1e-3 to 0.5
            sigmas: (0..16)
                .map(|i| 1e-3 * (500.0f64).powf(i as f64 / 15.0))
                .collect(),
            weights: (1..10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

/// Exhaustive maximum-likelihood search over the lattice. Returns the best
/// mixture (with `m1 <= m2`) and its log-likelihood.
pub fn gmm_grid_mle(scores: &[f64], lattice: &Lattice) -> (Gmm1D, f64) {
    let (lo, hi) = gmm::min_max(scores);
    let steps = lattice.mean_steps.max(1);
    let means: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();

    let mut best = (
        Gmm1D { w1: 0.5, w2: 0.5, m1: lo, m2: hi, p1: 1.0, p2: 1.0 },
        f64::NEG_INFINITY,
    );
    for &sigma in &lattice.sigmas {
        let precision = 1.0 / (sigma * sigma);
        // log pdf of every score under every lattice mean
        let table: Vec<Vec<f64>> = means
            .iter()
            .map(|&m| scores.iter().map(|&x| normal_log_pdf(x, m, precision)).collect())
            .collect();
        for i in 0..means.len() {
            for j in i..means.len() {
                for &w1 in &lattice.weights {
                    let (lw1, lw2) = (w1.ln(), (1.0 - w1).ln());
                    let ll: f64 = table[i]
                        .iter()
                        .zip(&table[j])
                        .map(|(&a, &b)| {
                            let (a, b) = (lw1 + a, lw2 + b);
                            let gap = (a - b).abs();
                            // ln_1p(exp(-37)) is below f64 resolution of the sum
                            if gap > 37.0 {
                                a.max(b)
                            } else {
                                a.max(b) + (-gap).exp().ln_1p()
                            }
                        })
                        .sum();
                    if ll > best.1 {
                        best = (
                            Gmm1D {
                                w1,
                                w2: 1.0 - w1,
                                m1: means[i],
                                m2: means[j],
                                p1: precision,
                                p2: precision,
                            },
                            ll,
                        );
                    }
                }
            }
        }
    }
    best
}

/// Literal greedy NMS: repeatedly take the best remaining detection and
/// drop everything of its class that overlaps it by more than the threshold.
pub fn nms_naive(dets: &[Detection], iou_threshold: f64, rank: RankBy) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best_pos = 0;
        for pos in 1..remaining.len() {
            let (i, b) = (remaining[pos], remaining[best_pos]);
            let (ki, kb) = (rank.key(&dets[i]), rank.key(&dets[b]));
            let better = ki > kb
                || (ki == kb && dets[i].q > dets[b].q)
                || (ki == kb && dets[i].q == dets[b].q && i < b);
            if better {
                best_pos = pos;
            }
        }
        let top = remaining.remove(best_pos);
        kept.push(top);
        remaining.retain(|&j| {
            !(dets[j].cls == dets[top].cls && iou(&dets[top].bbox, &dets[j].bbox) > iou_threshold)
        });
    }
    kept
}

/// Direct evaluation of the voting formula with explicit weight lists.
pub fn score_vote_direct(target: &Detection, neighbors: &[Detection], cfg: &VotingConfig) -> BoxXYXY {
    let mut members: Vec<(&BoxXYXY, f64)> = Vec::new();
    if cfg.include_self {
        members.push((&target.bbox, 1.0 * target.u));
    }
    for n in neighbors {
        let o = iou(&target.bbox, &n.bbox);
        if n.cls == target.cls && o > 0.0 {
            let p = (-(1.0 - o).powi(2) / cfg.sigma_t).exp();
            members.push((&n.bbox, p * n.u));
        }
    }
    let denom: f64 = members.iter().map(|(_, w)| w).sum();
    if denom <= 0.0 {
        return target.bbox;
    }
    let coord = |f: fn(&BoxXYXY) -> f64| members.iter().map(|(b, w)| w * f(b)).sum::<f64>() / denom;
    BoxXYXY::new(coord(|b| b.x1), coord(|b| b.y1), coord(|b| b.x2), coord(|b| b.y2))
}

/// Line-by-line transcription of the assignment procedure on sets.
/// Returns `(P, N, I)` as ascending anchor lists.
pub fn assign_literal(scene: &Scene, cfg: &AssignConfig) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let anchors = AnchorSet::from_grid(&scene.grid);
    let all: BTreeSet<usize> = (0..anchors.len()).collect();
    let mut p: BTreeSet<usize> = BTreeSet::new();
    let mut n: BTreeSet<usize> = BTreeSet::new();
    let mut ig: BTreeSet<usize> = BTreeSet::new();

    for (g, gt) in scene.gts.iter().enumerate() {
        // anchors whose best ground truth by IoU is g
        let a_g: BTreeSet<usize> = all
            .iter()
            .copied()
            .filter(|&a| {
                let ious: Vec<f64> = scene.gts.iter().map(|h| iou(&anchors.boxes[a], &h.bbox)).collect();
                let max = ious.iter().copied().fold(0.0, f64::max);
                max > 0.0 && ious.iter().position(|&v| v == max) == Some(g)
            })
            .collect();

        let mut c_g: BTreeSet<usize> = BTreeSet::new();
        for level in 0..anchors.num_levels() {
            let a_ig: BTreeSet<usize> = anchors.level_range(level).filter(|a| a_g.contains(a)).collect();
            let s_i: Vec<(usize, f64)> = a_ig
                .iter()
                .map(|&a| (a, anchor_score(&scene.outputs[a], &gt.bbox, gt.cls, &cfg.loss)))
                .collect();
            if s_i.is_empty() {
                continue;
            }
            let mut sorted: Vec<f64> = s_i.iter().map(|&(_, s)| s).collect();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let t_i = sorted[cfg.k.min(sorted.len()) - 1];
            c_g.extend(s_i.iter().filter(|&&(_, s)| t_i <= s).map(|&(a, _)| a));
        }

        let scored: Vec<(usize, f64)> = c_g
            .iter()
            .map(|&a| (a, anchor_score(&scene.outputs[a], &gt.bbox, gt.cls, &cfg.loss)))
            .collect();
        let (p_g, n_g) = separate_literal(&scored, cfg)?;
        p.extend(&p_g);
        n.extend(&n_g);
        ig.extend(c_g.iter().filter(|a| !p_g.contains(a) && !n_g.contains(a)));
    }
    let rest: Vec<usize> = all
        .iter()
        .copied()
        .filter(|a| !p.contains(a) && !n.contains(a) && !ig.contains(a))
        .collect();
    n.extend(rest);
    Ok((p.into_iter().collect(), n.into_iter().collect(), ig.into_iter().collect()))
}

fn separate_literal(scored: &[(usize, f64)], cfg: &AssignConfig) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    let mut p_g = BTreeSet::new();
    let mut n_g = BTreeSet::new();
    if scored.is_empty() {
        return Ok((p_g, n_g));
    }
    let ranked_above = |a: usize, s: f64, b: usize, t: f64| t > s || (t == s && b < a);
    match cfg.scheme {
        SeparationScheme::Fnp(k) => {
            for &(a, s) in scored {
                let better = scored.iter().filter(|&&(b, t)| ranked_above(a, s, b, t)).count();
                if better < k {
                    p_g.insert(a);
                } else {
                    n_g.insert(a);
                }
            }
        }
        SeparationScheme::Fsr(tau) => {
            for &(a, s) in scored {
                if s > tau {
                    p_g.insert(a);
                } else {
                    n_g.insert(a);
                }
            }
        }
        scheme => {
            let values: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if values.len() == 1 || hi - lo < gmm::MIN_SCORE_RANGE {
                p_g.extend(scored.iter().map(|&(a, _)| a));
                return Ok((p_g, n_g));
            }
            let (fit, _) = gmm::fit(&values, &cfg.em)?;
            let positive_side = |s: f64| fit.posterior(s).1 > 0.5;
            // above the posterior boundary: it and everything ranked higher lie on the positive side
            let above = |a: usize, s: f64| {
                scored
                    .iter()
                    .filter(|&&(b, t)| b == a || ranked_above(a, s, b, t))
                    .all(|&(_, t)| positive_side(t))
            };
            for &(a, s) in scored {
                let is_pos = match scheme {
                    SeparationScheme::A => above(a, s),
                    SeparationScheme::B | SeparationScheme::C => above(a, s) && s >= fit.m2,
                    SeparationScheme::D => s >= (fit.m1 + fit.m2) / 2.0,
                    _ => unreachable!(),
                };
                let is_neg = match scheme {
                    SeparationScheme::B | SeparationScheme::C => !above(a, s),
                    _ => !is_pos,
                };
                if is_pos {
                    p_g.insert(a);
                } else if is_neg {
                    n_g.insert(a);
                }
            }
            if scheme == SeparationScheme::C && p_g.is_empty() {
                let &(top, _) = scored
                    .iter()
                    .find(|&&(a, s)| !scored.iter().any(|&(b, t)| ranked_above(a, s, b, t)))
                    .expect("non-empty candidates");
                n_g.remove(&top);
                p_g.insert(top);
            }
        }
    }
    Ok((p_g, n_g))
}
