//! Scenes: JSONL interchange, synthetic generation and batch statistics.
//!
//! A scene is one image's ground truth plus one [`ModelOutput`] per anchor
//! of its grid. On disk each line of a `.jsonl` file is one scene:
//!
//! ```json
//! {"id":"s0","gts":[{"box":[10,10,80,90],"cls":0}],
//!  "grid":{"levels":[{"stride":8,"scale":8,"w":4,"h":4}]},
//!  "outputs":[{"p":[0.7],"box":[12,9,79,88],"q":0.81}, ...]}
//! ```
//!
//! An output may carry `"deltas":[dx,dy,dw,dh]` relative to its anchor
//! instead of `"box"`. Unknown fields are ignored and counted.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assignment::AssignmentResult;
use crate::error::{Error, Result};
use crate::geometry::{decode, iou, AnchorGrid, AnchorSet, BoxDeltas, BoxXYXY};
use crate::losses::ModelOutput;
use crate::postprocess::Detection;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub cls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scene {
    pub id: String,
    pub gts: Vec<GroundTruth>,
    pub grid: AnchorGrid,
    pub outputs: Vec<ModelOutput>,
}

impl Scene {
    pub fn anchors(&self) -> AnchorSet {
        AnchorSet::from_grid(&self.grid)
    }

    pub fn num_classes(&self) -> usize {
        self.outputs.first().map_or(0, |o| o.probs.len())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidScene {
            id: self.id.clone(),
            reason,
        };
        self.grid.validate().map_err(|e| fail(e.to_string()))?;
        let expected = self.grid.num_anchors();
        if self.outputs.len() != expected {
            return Err(fail(format!(
                "{} outputs for {expected} anchors",
                self.outputs.len()
            )));
        }
        let classes = self.num_classes();
        for (i, out) in self.outputs.iter().enumerate() {
            if out.probs.len() != classes || classes == 0 {
                return Err(fail(format!(
                    "output {i} has {} class channels, expected {classes}",
                    out.probs.len()
                )));
            }
            if let Some(p) = out.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(fail(format!("output {i}: probability {p} outside [0, 1]")));
            }
            if !(0.0..=1.0).contains(&out.iou_pred) {
                return Err(fail(format!(
                    "output {i}: predicted IoU {} outside [0, 1]",
                    out.iou_pred
                )));
            }
            out.pred_box
                .validate()
                .map_err(|e| fail(format!("output {i}: {e}")))?;
        }
        for (g, gt) in self.gts.iter().enumerate() {
            gt.bbox
                .validate()
                .map_err(|e| fail(format!("gt {g}: {e}")))?;
            if !self.outputs.is_empty() && gt.cls >= classes {
                return Err(fail(format!(
                    "gt {g}: class {} but only {classes} channels",
                    gt.cls
                )));
            }
        }
        Ok(())
    }
}

type Extra = BTreeMap<String, Value>;

#[derive(Deserialize)]
struct RawOutput {
    p: Vec<f64>,
    #[serde(rename = "box")]
    pred_box: Option<BoxXYXY>,
    deltas: Option<BoxDeltas>,
    q: f64,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct RawGroundTruth {
    #[serde(rename = "box")]
    bbox: BoxXYXY,
    cls: usize,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct RawLevel {
    stride: f64,
    scale: f64,
    w: usize,
    h: usize,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct RawGrid {
    levels: Vec<RawLevel>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct RawScene {
    id: Value,
    gts: Vec<RawGroundTruth>,
    grid: RawGrid,
    outputs: Vec<RawOutput>,
    #[serde(flatten)]
    extra: Extra,
}

impl RawScene {
    /// Resolves into a scene, returning it with the number of unknown fields.
    fn resolve(self) -> Result<(Scene, usize)> {
        let mut unknown = self.extra.len() + self.grid.extra.len();
        let id = match self.id {
            Value::String(s) => s,
            other => other.to_string(),
        };
        let grid = AnchorGrid {
            levels: self
                .grid
                .levels
                .into_iter()
                .map(|l| {
                    unknown += l.extra.len();
                    crate::geometry::GridLevel {
                        stride: l.stride,
                        scale: l.scale,
                        width: l.w,
                        height: l.h,
                    }
                })
                .collect(),
        };
        let gts = self
            .gts
            .into_iter()
            .map(|g| {
                unknown += g.extra.len();
                GroundTruth {
                    bbox: g.bbox,
                    cls: g.cls,
                }
            })
            .collect();
        let needs_anchors = self.outputs.iter().any(|o| o.pred_box.is_none());
        let anchors = if needs_anchors {
            grid.validate()?;
            AnchorSet::from_grid(&grid)
        } else {
            AnchorSet::default()
        };
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (i, o) in self.outputs.into_iter().enumerate() {
            unknown += o.extra.len();
            let pred_box = match (o.pred_box, o.deltas) {
                (Some(b), _) => b,
                (None, Some(d)) => {
                    let anchor = anchors.boxes.get(i).ok_or_else(|| Error::InvalidScene {
                        id: id.clone(),
                        reason: format!("output {i} has deltas but no anchor"),
                    })?;
                    decode(anchor, &d)?
                }
                (None, None) => {
                    return Err(Error::InvalidScene {
                        id: id.clone(),
                        reason: format!("output {i} has neither box nor deltas"),
                    })
                }
            };
            outputs.push(ModelOutput {
                probs: o.p,
                pred_box,
                iou_pred: o.q,
            });
        }
        let scene = Scene {
            id,
            gts,
            grid,
            outputs,
        };
        scene.validate()?;
        Ok((scene, unknown))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedScenes {
    pub scenes: Vec<Scene>,
    /// Fields present in the input that the schema does not know.
    pub unknown_fields: usize,
}

/// Reads JSONL scenes. `origin` only labels error messages.
pub fn read_scenes<R: BufRead>(reader: R, origin: &Path) -> Result<LoadedScenes> {
    let mut loaded = LoadedScenes::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            message,
        };
        let raw: RawScene = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let (scene, unknown) = raw.resolve().map_err(|e| parse_err(e.to_string()))?;
        loaded.unknown_fields += unknown;
        loaded.scenes.push(scene);
    }
    Ok(loaded)
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<LoadedScenes> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scenes(BufReader::new(file), path)
}

/// Writes any serializable records as JSONL, one per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, records: &[T]) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(BufWriter::new(file), scenes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// `N(0, sigma)`.
    #[default]
    Gaussian,
    /// `U(-sigma, sigma)`.
    Uniform,
}

/// Parameters of the synthetic scene generator.
///
/// Anchors overlapping a ground truth imitate a detector that has learned
/// it to a degree set by the noise scales:
///
/// * classification: `-ln p = cls_bias + d * sigma_p * (falloff * (1 - o) + |z|)`
///   with `o` the anchor's IoU with its best ground truth and `z ~ N(0, 1)`,
/// * box: the ground truth with every corner jittered by
///   `N(0, d * sigma_b * (1 + falloff * (1 - o)))` pixels,
/// * predicted IoU: true IoU of the box plus `q_noise(sigma_q)`, clipped to `[0, 1]`,
///
/// where `d` is a per-scene difficulty factor drawn from `difficulty`.
/// With all noise scales and `cls_bias` at zero the overlapping anchors
/// predict their ground truth perfectly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub scenes: usize,
    /// Width and height in pixels.
    pub image_size: [f64; 2],
    /// Inclusive range of ground truths per scene.
    pub gt_count: [usize; 2],
    /// Range of ground-truth side lengths in pixels.
    pub gt_size: [f64; 2],
    pub strides: Vec<f64>,
    pub anchor_scale: f64,
    pub num_classes: usize,
    pub sigma_p: f64,
    pub sigma_b: f64,
    pub sigma_q: f64,
    pub q_noise: NoiseKind,
    pub cls_bias: f64,
    pub difficulty: [f64; 2],
    pub falloff: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 20,
            image_size: [256.0, 256.0],
            gt_count: [1, 3],
            gt_size: [24.0, 160.0],
            strides: vec![8.0, 16.0, 32.0, 64.0, 128.0],
            anchor_scale: 8.0,
            num_classes: 1,
            sigma_p: 0.5,
            sigma_b: 4.0,
            sigma_q: 0.05,
            q_noise: NoiseKind::Gaussian,
            cls_bias: 0.0,
            difficulty: [0.5, 2.0],
            falloff: 2.0,
        }
    }
}

impl SyntheticSpec {
    pub fn grid(&self) -> AnchorGrid {
        AnchorGrid::pyramid(
            self.image_size[0],
            self.image_size[1],
            &self.strides,
            self.anchor_scale,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [
            ("sigma_p", self.sigma_p),
            ("sigma_b", self.sigma_b),
            ("sigma_q", self.sigma_q),
            ("cls_bias", self.cls_bias),
            ("falloff", self.falloff),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.gt_count[0] > self.gt_count[1] {
            return bad(format!("gt_count range {:?} is empty", self.gt_count));
        }
        let [lo, hi] = self.gt_size;
        if !(lo > 0.0 && lo <= hi && hi <= self.image_size[0].min(self.image_size[1])) {
            return bad(format!("gt_size {:?} must fit the image", self.gt_size));
        }
        let [dlo, dhi] = self.difficulty;
        if !(dlo >= 0.0 && dlo <= dhi && dhi.is_finite()) {
            return bad(format!("difficulty range {:?} is invalid", self.difficulty));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        self.grid().validate()
    }
}

fn sample_noise(rng: &mut ChaCha8Rng, kind: NoiseKind, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    match kind {
        NoiseKind::Gaussian => sigma * rng.sample::<f64, _>(StandardNormal),
        NoiseKind::Uniform => rng.random_range(-sigma..=sigma),
    }
}

fn sorted_box(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
    BoxXYXY::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
}

fn jitter(rng: &mut ChaCha8Rng, b: &BoxXYXY, sd: f64) -> BoxXYXY {
    if sd == 0.0 {
        return *b;
    }
    let normal = Normal::new(0.0, sd).expect("finite non-negative sd");
    sorted_box(
        b.x1 + normal.sample(rng),
        b.y1 + normal.sample(rng),
        b.x2 + normal.sample(rng),
        b.y2 + normal.sample(rng),
    )
}

/// Probability of a channel that should be off.
fn stray_prob(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    1.0 - (-0.1 * scale * z.abs()).exp()
}

fn generate_scene(spec: &SyntheticSpec, grid: &AnchorGrid, anchors: &AnchorSet, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let [w, h] = spec.image_size;
    let count = rng.random_range(spec.gt_count[0]..=spec.gt_count[1]);
    let gts: Vec<GroundTruth> = (0..count)
        .map(|_| {
            let bw = rng.random_range(spec.gt_size[0]..=spec.gt_size[1]);
            let bh = rng.random_range(spec.gt_size[0]..=spec.gt_size[1]);
            let x1 = rng.random_range(0.0..=(w - bw));
            let y1 = rng.random_range(0.0..=(h - bh));
            GroundTruth {
                bbox: BoxXYXY::new(x1, y1, x1 + bw, y1 + bh),
                cls: rng.random_range(0..spec.num_classes),
            }
        })
        .collect();

    let d = if spec.difficulty[0] < spec.difficulty[1] {
        rng.random_range(spec.difficulty[0]..=spec.difficulty[1])
    } else {
        spec.difficulty[0]
    };
    let sigma_p = d * spec.sigma_p;
    let sigma_b = d * spec.sigma_b;

    let outputs = anchors
        .boxes
        .iter()
        .map(|anchor| {
            let best = gts
                .iter()
                .map(|g| iou(anchor, &g.bbox))
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (g, o)| match best {
                    Some((_, b)) if b >= o => best,
                    _ if o > 0.0 => Some((g, o)),
                    _ => best,
                });
            let mut probs: Vec<f64> =
                (0..spec.num_classes).map(|_| stray_prob(&mut rng, sigma_p)).collect();
            match best {
                Some((g, o)) => {
                    let gt = &gts[g];
                    let z: f64 = rng.sample(StandardNormal);
                    let nll = spec.cls_bias + sigma_p * (spec.falloff * (1.0 - o) + z.abs());
                    probs[gt.cls] = (-nll).exp();
                    let pred_box = jitter(&mut rng, &gt.bbox, sigma_b * (1.0 + spec.falloff * (1.0 - o)));
                    let truth = iou(&pred_box, &gt.bbox);
                    let q = (truth + sample_noise(&mut rng, spec.q_noise, spec.sigma_q)).clamp(0.0, 1.0);
                    ModelOutput {
                        probs,
                        pred_box,
                        iou_pred: q,
                    }
                }
                None => {
                    let pred_box = jitter(&mut rng, anchor, sigma_b);
                    let q = sample_noise(&mut rng, spec.q_noise, spec.sigma_q).clamp(0.0, 1.0);
                    ModelOutput {
                        probs,
                        pred_box,
                        iou_pred: q,
                    }
                }
            }
        })
        .collect();

    Scene {
        id: format!("scene-{index:06}"),
        gts,
        grid: grid.clone(),
        outputs,
    }
}

/// Generates `spec.scenes` scenes. Scene `i` depends only on the seed and
/// `i`, so the output is identical however the work is scheduled.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let grid = spec.grid();
    let anchors = AnchorSet::from_grid(&grid);
    Ok((0..spec.scenes)
        .into_par_iter()
        .map(|i| generate_scene(spec, &grid, &anchors, i))
        .collect())
}

/// Detections from every output whose top class probability reaches `min_score`.
pub fn scene_detections(scene: &Scene, min_score: f64, lambda_rank: f64) -> Vec<Detection> {
    scene
        .outputs
        .iter()
        .filter_map(|o| {
            let (cls, p) = o.top_class()?;
            (p >= min_score).then(|| Detection::new(o.pred_box, cls, p, o.iou_pred, lambda_rank))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCounts {
    pub index: usize,
    pub scene_id: String,
    /// Ground truths with at least one candidate.
    pub gts: usize,
    pub mean: Option<f64>,
    pub min: Option<usize>,
    pub max: Option<usize>,
}

/// Distribution of positives per ground truth.
///
/// Ground truths that received no candidate anchor at all are counted in
/// `gts_without_candidates` and left out of the distribution.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PositiveStats {
    pub counts: Vec<usize>,
    pub gts_without_candidates: usize,
    pub mean: Option<f64>,
    pub min: Option<usize>,
    pub max: Option<usize>,
    pub histogram: BTreeMap<usize, usize>,
    pub per_scene: Vec<SceneCounts>,
}

fn summarize(counts: &[usize]) -> (Option<f64>, Option<usize>, Option<usize>) {
    if counts.is_empty() {
        return (None, None, None);
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    (
        Some(mean),
        counts.iter().copied().min(),
        counts.iter().copied().max(),
    )
}

pub fn positives_stats(results: &[AssignmentResult]) -> PositiveStats {
    let mut stats = PositiveStats::default();
    for (index, r) in results.iter().enumerate() {
        let mut scene_counts = Vec::new();
        for g in &r.per_gt {
            if g.candidates.is_empty() {
                stats.gts_without_candidates += 1;
                continue;
            }
            let n = r.positive_gts.iter().filter(|&&owner| owner == g.gt).count();
            scene_counts.push(n);
            *stats.histogram.entry(n).or_default() += 1;
        }
        let (mean, min, max) = summarize(&scene_counts);
        stats.per_scene.push(SceneCounts {
            index,
            scene_id: r.scene_id.clone(),
            gts: scene_counts.len(),
            mean,
            min,
            max,
        });
        stats.counts.extend(scene_counts);
    }
    (stats.mean, stats.min, stats.max) = summarize(&stats.counts);
    stats
}

/// Mean `|q - IoU(pred box, matched ground truth)|` over positive anchors.
/// `None` when there are no positives.
pub fn iou_pred_error(scenes: &[Scene], results: &[AssignmentResult]) -> Result<Option<f64>> {
    if scenes.len() != results.len() {
        return Err(Error::InvalidConfig(format!(
            "{} scenes but {} assignment results",
            scenes.len(),
            results.len()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (scene, r) in scenes.iter().zip(results) {
        for (&a, &g) in r.positives.iter().zip(&r.positive_gts) {
            let out = scene.outputs.get(a).ok_or_else(|| Error::InvalidScene {
                id: scene.id.clone(),
                reason: format!("positive anchor {a} has no output"),
            })?;
            let gt = scene.gts.get(g).ok_or_else(|| Error::InvalidScene {
                id: scene.id.clone(),
                reason: format!("positive matched to missing gt {g}"),
            })?;
            total += (out.iou_pred - iou(&out.pred_box, &gt.bbox)).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}
