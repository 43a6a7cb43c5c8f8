//! CSV plot data: candidate-score histograms with fitted mixture densities,
//! and positives per ground truth across scenes.
//!
//! | file                  | header                                                               |
//! |-----------------------|----------------------------------------------------------------------|
//! | `score_histogram.csv` | `bin_lo,bin_hi,count,density`                                        |
//! | `gmm_density.csv`     | `score,density`                                                      |
//! | `positive_counts.csv` | `scene_index,scene_id,gts,mean_positives,min_positives,max_positives` |
//!
//! Empty statistics produce header-only files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentResult;
use crate::error::{Error, Result};
use crate::gmm::Gmm1D;
use crate::scenario::PositiveStats;

/// Density curves are sampled at this many evenly spaced scores in `[0, 1]`.
pub const DENSITY_SAMPLES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `count / (total * width)`, so the bars integrate to one.
    pub density: f64,
}

/// Histogram over `[0, 1]` with `bins` equal bins; the last bin is closed.
/// Scores outside `[0, 1]` are dropped.
pub fn score_histogram(scores: &[f64], bins: usize) -> Vec<HistogramBin> {
    if bins == 0 {
        return Vec::new();
    }
    let width = 1.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for &s in scores {
        if (0.0..=1.0).contains(&s) {
            counts[((s * bins as f64) as usize).min(bins - 1)] += 1;
            total += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count,
            density: if total > 0 {
                count as f64 / (total as f64 * width)
            } else {
                0.0
            },
        })
        .collect()
}

/// Average of the fitted mixture densities, sampled on `[0, 1]`.
pub fn mixture_density_curve(fits: &[Gmm1D]) -> Vec<(f64, f64)> {
    if fits.is_empty() {
        return Vec::new();
    }
    (0..DENSITY_SAMPLES)
        .map(|i| {
            let x = i as f64 / (DENSITY_SAMPLES - 1) as f64;
            let d = fits.iter().map(|g| g.density(x)).sum::<f64>() / fits.len() as f64;
            (x, d)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotFiles {
    pub histogram: PathBuf,
    pub density: PathBuf,
    pub positive_counts: PathBuf,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the three plot-data files into `dir`.
pub fn emit_plot_data(
    dir: &Path,
    results: &[AssignmentResult],
    stats: &PositiveStats,
    bins: usize,
) -> Result<PlotFiles> {
    let files = PlotFiles {
        histogram: dir.join("score_histogram.csv"),
        density: dir.join("gmm_density.csv"),
        positive_counts: dir.join("positive_counts.csv"),
    };
    let scores: Vec<f64> = results
        .iter()
        .flat_map(|r| r.per_gt.iter())
        .flat_map(|g| g.candidates.iter().map(|c| c.score))
        .collect();
    let fits: Vec<Gmm1D> = results
        .iter()
        .flat_map(|r| r.per_gt.iter())
        .filter_map(|g| g.gmm)
        .collect();

    let histogram = if scores.is_empty() {
        Vec::new()
    } else {
        score_histogram(&scores, bins)
    };
    write_rows(
        &files.histogram,
        &["bin_lo", "bin_hi", "count", "density"],
        histogram.iter().map(|b| {
            vec![b.lo.to_string(), b.hi.to_string(), b.count.to_string(), b.density.to_string()]
        }),
    )?;
    write_rows(
        &files.density,
        &["score", "density"],
        mixture_density_curve(&fits)
            .into_iter()
            .map(|(x, d)| vec![x.to_string(), d.to_string()]),
    )?;
    write_rows(
        &files.positive_counts,
        &["scene_index", "scene_id", "gts", "mean_positives", "min_positives", "max_positives"],
        stats.per_scene.iter().map(|s| {
            vec![
                s.index.to_string(),
                s.scene_id.clone(),
                s.gts.to_string(),
                opt(s.mean),
                opt(s.min),
                opt(s.max),
            ]
        }),
    )?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{AnchorScore, GtRecord};
    use crate::scenario::positives_stats;

    fn trapezoid(curve: &[(f64, f64)]) -> f64 {
        curve.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
    }

    #[test]
    fn density_integrates_to_one() {
        let g = Gmm1D { w1: 0.6, w2: 0.4, m1: 0.25, m2: 0.7, p1: 400.0, p2: 900.0 };
        let curve = mixture_density_curve(&[g]);
        assert_eq!(curve.len(), DENSITY_SAMPLES);
        assert_eq!(curve[0].0, 0.0);
        assert_eq!(curve[DENSITY_SAMPLES - 1].0, 1.0);
        assert!((trapezoid(&curve) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn histogram_of_two_clusters_is_bimodal() {
        let mut scores: Vec<f64> = (0..50).map(|i| 0.1 + 0.001 * (i % 10) as f64).collect();
        scores.extend((0..50).map(|i| 0.9 - 0.001 * (i % 10) as f64));
        let bins = score_histogram(&scores, 20);
        let counts: Vec<usize> = bins.iter().map(|b| b.count).collect();
        let peaks = (0..counts.len())
            .filter(|&i| {
                let left = if i == 0 { 0 } else { counts[i - 1] };
                let right = counts.get(i + 1).copied().unwrap_or(0);
                counts[i] > left && counts[i] >= right
            })
            .count();
        assert_eq!(peaks, 2, "{counts:?}");
        let area: f64 = bins.iter().map(|b| b.density * (b.hi - b.lo)).sum();
        assert!((area - 1.0).abs() < 1e-12);
        assert_eq!(score_histogram(&[1.0], 4)[3].count, 1);
    }

    #[test]
    fn empty_stats_give_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plot_data(dir.path(), &[], &positives_stats(&[]), 20).unwrap();
        for path in [&files.histogram, &files.density, &files.positive_counts] {
            let text = std::fs::read_to_string(path).unwrap();
            assert_eq!(text.lines().count(), 1, "{}", path.display());
        }
    }

    #[test]
    fn emitted_rows() {
        let dir = tempfile::tempdir().unwrap();
        let g = Gmm1D { w1: 0.5, w2: 0.5, m1: 0.2, m2: 0.8, p1: 100.0, p2: 100.0 };
        let result = AssignmentResult {
            scene_id: "s".into(),
            num_anchors: 3,
            positives: vec![2],
            positive_gts: vec![0],
            negatives: vec![0, 1],
            ignored: vec![],
            per_gt: vec![GtRecord {
                gt: 0,
                allocated: 3,
                candidates: [0.1, 0.2, 0.8]
                    .iter()
                    .enumerate()
                    .map(|(a, &score)| AnchorScore { anchor: a, gt: 0, score, level: 0 })
                    .collect(),
                degenerate: false,
                gmm: Some(g),
                em: None,
                positives: vec![2],
                ignored: vec![],
                negatives: vec![0, 1],
            }],
        };
        let stats = positives_stats(std::slice::from_ref(&result));
        let files = emit_plot_data(dir.path(), &[result], &stats, 10).unwrap();
        let hist = std::fs::read_to_string(&files.histogram).unwrap();
        assert_eq!(hist.lines().count(), 11);
        let density = std::fs::read_to_string(&files.density).unwrap();
        assert_eq!(density.lines().count(), 1 + DENSITY_SAMPLES);
        let counts = std::fs::read_to_string(&files.positive_counts).unwrap();
        assert_eq!(counts.lines().nth(1).unwrap(), "0,s,1,1,1,1");
    }
}
