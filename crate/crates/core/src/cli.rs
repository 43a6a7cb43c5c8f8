//! Batch front-end behind the `paa` binary.
//!
//! Every subcommand reads a TOML [`RunConfig`] (defaults when none is
//! given), applies command-line overrides, writes its outputs into
//! `--out-dir` and echoes the effective configuration next to them as
//! `<subcommand>.config.toml`.
//!
//! Exit status: 0 on success, 1 on input or configuration errors, 2 when
//! `--self-check` finds a disagreement with the reference implementations.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, AssignConfig, AssignmentResult, SeparationScheme};
use crate::error::{Error, Result};
use crate::gmm::{self, EmOptions, EmReport, Gmm1D};
use crate::losses::LossConfig;
use crate::oracles;
use crate::plot;
use crate::postprocess::{
    nms, postprocess_scene, Detection, PoolSource, PostprocessConfig, RankBy, VotingConfig,
};
use crate::scenario::{
    generate, iou_pred_error, load_scenes, positives_stats, save_scenes, scene_detections,
    write_jsonl, PositiveStats, Scene, SyntheticSpec,
};

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads for per-scene work; 0 picks the number of cores.
    pub workers: usize,
    /// Candidates per pyramid level.
    pub k: usize,
    pub scheme: SeparationScheme,
    pub nms_threshold: f64,
    /// Outputs whose top class probability is below this are not detections.
    pub min_score: f64,
    pub lambda_rank: f64,
    pub rank: RankBy,
    pub voting_enabled: bool,
    pub histogram_bins: usize,
    pub loss: LossConfig,
    pub em: EmOptions,
    pub voting: VotingConfig,
    /// Generator settings; `synthetic.seed` is the run seed.
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workers: 0,
            k: 9,
            scheme: SeparationScheme::C,
            nms_threshold: 0.6,
            min_score: 0.05,
            lambda_rank: 1.0,
            rank: RankBy::Unified,
            voting_enabled: true,
            histogram_bins: 20,
            loss: LossConfig::default(),
            em: EmOptions::default(),
            voting: VotingConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.assign_config().validate()?;
        self.voting.validate()?;
        self.synthetic.validate()?;
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "nms_threshold must be in (0, 1), got {}",
                self.nms_threshold
            )));
        }
        if !(self.lambda_rank > 0.0 && self.lambda_rank.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_rank must be positive, got {}",
                self.lambda_rank
            )));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::InvalidConfig(format!(
                "min_score must be in [0, 1], got {}",
                self.min_score
            )));
        }
        if self.histogram_bins == 0 {
            return Err(Error::InvalidConfig("histogram_bins must be at least 1".into()));
        }
        Ok(())
    }

    pub fn assign_config(&self) -> AssignConfig {
        AssignConfig {
            loss: self.loss.clone(),
            scheme: self.scheme,
            k: self.k,
            em: self.em,
        }
    }

    pub fn postprocess_config(&self, voting: bool) -> PostprocessConfig {
        PostprocessConfig {
            iou_threshold: self.nms_threshold,
            rank: self.rank,
            voting: voting.then_some(self.voting),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "paa", version, about = "Probabilistic anchor assignment and IoU-aware post-processing")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (overrides `workers`).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Compare results against the brute-force references; exit 2 on mismatch.
    #[arg(long, global = true)]
    pub self_check: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct IoArgs {
    /// Input file.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, short)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub iou_thr: Option<f64>,
    #[arg(long, value_parser = parse_rank)]
    pub rank: Option<RankBy>,
    #[arg(long)]
    pub min_score: Option<f64>,
}

fn parse_rank(s: &str) -> std::result::Result<RankBy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scheme(s: &str) -> std::result::Result<SeparationScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes into `scenes.jsonl`.
    Gen {
        #[arg(long, short)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Assign anchors for every scene into `assignments.jsonl`.
    Assign {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<SeparationScheme>,
    },
    /// Fit the two-component mixture to a list of scores into `gmm_fit.json`.
    GmmFit {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Rank and suppress detections into `detections_nms.jsonl`.
    Nms {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        rank: RankArgs,
    },
    /// Rank, suppress and score-vote into `detections_vote.jsonl`.
    Vote {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        rank: RankArgs,
        #[arg(long)]
        sigma_t: Option<f64>,
        #[arg(long)]
        no_voting: bool,
        #[arg(long)]
        post_nms_pool: bool,
    },
    /// Positive-count statistics, IoU-prediction error and plot data.
    Stats {
        #[command(flatten)]
        io: IoArgs,
        /// Precomputed assignments; assigned on the fly when omitted.
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Assign { .. } => "assign",
            Command::GmmFit { .. } => "gmm-fit",
            Command::Nms { .. } => "nms",
            Command::Vote { .. } => "vote",
            Command::Stats { .. } => "stats",
        }
    }
}

/// Detections kept for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFitRecord {
    pub n: usize,
    pub init: Gmm1D,
    pub gmm: Gmm1D,
    pub report: EmReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub scenes: usize,
    pub positives: PositiveStats,
    /// Mean absolute IoU-prediction error over positives; null without positives.
    pub iou_pred_error: Option<f64>,
}

fn with_overrides(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let apply_rank = |cfg: &mut RunConfig, r: &RankArgs| {
        if let Some(t) = r.iou_thr {
            cfg.nms_threshold = t;
        }
        if let Some(rank) = r.rank {
            cfg.rank = rank;
        }
        if let Some(m) = r.min_score {
            cfg.min_score = m;
        }
    };
    match &cli.command {
        Command::Gen { seed, scenes, .. } => {
            if let Some(s) = seed {
                cfg.synthetic.seed = *s;
            }
            if let Some(n) = scenes {
                cfg.synthetic.scenes = *n;
            }
        }
        Command::Assign { k, scheme, .. } => {
            if let Some(k) = k {
                cfg.k = *k;
            }
            if let Some(s) = scheme {
                cfg.scheme = *s;
            }
        }
        Command::Nms { rank, .. } => apply_rank(&mut cfg, rank),
        Command::Vote { rank, sigma_t, no_voting, post_nms_pool, .. } => {
            apply_rank(&mut cfg, rank);
            if let Some(s) = sigma_t {
                cfg.voting.sigma_t = *s;
            }
            if *no_voting {
                cfg.voting_enabled = false;
            }
            if *post_nms_pool {
                cfg.voting.pool = PoolSource::PostNms;
            }
        }
        Command::GmmFit { .. } | Command::Stats { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(BufWriter::new(file), records).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable record");
    text.push('\n');
    write_text(path, &text)
}

fn read_scenes_warn(path: &Path) -> Result<Vec<Scene>> {
    let loaded = load_scenes(path)?;
    if loaded.unknown_fields > 0 {
        eprintln!(
            "{}",
            serde_json::json!({"warning": "unknown_fields", "path": path, "count": loaded.unknown_fields})
        );
    }
    Ok(loaded.scenes)
}

fn read_assignments(path: &Path) -> Result<Vec<AssignmentResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Parses whitespace- or comma-separated numbers, or a JSON array.
pub fn parse_scores(text: &str, origin: &Path) -> Result<Vec<f64>> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        });
    }
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("not a number: `{tok}`"),
            })?;
            scores.push(v);
        }
    }
    Ok(scores)
}

fn scene_postprocess(scene: &Scene, cfg: &RunConfig, voting: bool) -> SceneDetections {
    let dets = scene_detections(scene, cfg.min_score, cfg.lambda_rank);
    SceneDetections {
        scene_id: scene.id.clone(),
        detections: postprocess_scene(&dets, &cfg.postprocess_config(voting)),
    }
}

/// Composed reference: literal NMS followed by direct vote evaluation.
fn postprocess_reference(scene: &Scene, cfg: &RunConfig, voting: bool) -> Vec<Detection> {
    let dets = scene_detections(scene, cfg.min_score, cfg.lambda_rank);
    let kept = oracles::nms_naive(&dets, cfg.nms_threshold, cfg.rank);
    kept.iter()
        .map(|&i| {
            if !voting {
                return dets[i].clone();
            }
            let pool: Vec<Detection> = match cfg.voting.pool {
                PoolSource::PreNms => (0..dets.len()).filter(|&j| j != i).map(|j| dets[j].clone()).collect(),
                PoolSource::PostNms => kept.iter().filter(|&&j| j != i).map(|&j| dets[j].clone()).collect(),
            };
            Detection {
                bbox: oracles::score_vote_direct(&dets[i], &pool, &cfg.voting),
                ..dets[i].clone()
            }
        })
        .collect()
}

fn same_detections(a: &[Detection], b: &[Detection]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.cls == y.cls
                && x.u == y.u
                && <[f64; 4]>::from(x.bbox)
                    .iter()
                    .zip(<[f64; 4]>::from(y.bbox).iter())
                    .all(|(u, v)| (u - v).abs() <= 1e-9)
        })
}

fn self_check_failure(what: &str, scene: &str) -> Error {
    Error::SelfCheck(format!("{what} disagrees with its reference on scene {scene}"))
}

fn run_assign(scenes: &[Scene], cfg: &RunConfig) -> Result<Vec<AssignmentResult>> {
    let acfg = cfg.assign_config();
    scenes.par_iter().map(|s| assign(s, &acfg)).collect()
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let echo = |dir: &Path| write_text(&dir.join(format!("{}.config.toml", cli.command.name())), &cfg.to_toml());
    match &cli.command {
        Command::Gen { out_dir, .. } => {
            prepare_dir(out_dir)?;
            let scenes = generate(&cfg.synthetic)?;
            let path = out_dir.join("scenes.jsonl");
            save_scenes(&path, &scenes)?;
            echo(out_dir)?;
            if cli.self_check {
                let mut first = Vec::new();
                write_jsonl(&mut first, &scenes).map_err(|e| Error::io(&path, e))?;
                let mut second = Vec::new();
                write_jsonl(&mut second, &generate(&cfg.synthetic)?).map_err(|e| Error::io(&path, e))?;
                if first != second {
                    return Err(Error::SelfCheck("generation is not deterministic".into()));
                }
                let reloaded = load_scenes(&path)?;
                if reloaded.scenes != scenes {
                    return Err(Error::SelfCheck("saved scenes do not reload identically".into()));
                }
            }
        }
        Command::Assign { io, .. } => {
            let scenes = read_scenes_warn(&io.input)?;
            prepare_dir(&io.out_dir)?;
            let results = run_assign(&scenes, cfg)?;
            write_records(&io.out_dir.join("assignments.jsonl"), &results)?;
            echo(&io.out_dir)?;
            if cli.self_check {
                let acfg = cfg.assign_config();
                scenes.par_iter().zip(&results).try_for_each(|(scene, r)| {
                    r.validate_partition().map_err(|e| Error::SelfCheck(e.to_string()))?;
                    let (p, n, i) = oracles::assign_literal(scene, &acfg)?;
                    if (p, n, i) != (r.positives.clone(), r.negatives.clone(), r.ignored.clone()) {
                        return Err(self_check_failure("assignment", &scene.id));
                    }
                    Ok(())
                })?;
            }
        }
        Command::GmmFit { io } => {
            let text = fs::read_to_string(&io.input).map_err(|e| Error::io(&io.input, e))?;
            let scores = parse_scores(&text, &io.input)?;
            let init = gmm::init_gmm(&scores)?;
            let (fitted, report) = gmm::fit_em(&scores, &init, &cfg.em)?;
            prepare_dir(&io.out_dir)?;
            let record = GmmFitRecord { n: scores.len(), init, gmm: fitted, report };
            write_json(&io.out_dir.join("gmm_fit.json"), &record)?;
            echo(&io.out_dir)?;
            if cli.self_check {
                if record.report.trace.windows(2).any(|w| w[1] - w[0] < -1e-9) {
                    return Err(Error::SelfCheck("log-likelihood decreased during EM".into()));
                }
                let (_, best) = oracles::gmm_grid_mle(&scores, &oracles::Lattice::default());
                if record.report.log_likelihood < best - 0.01 {
                    return Err(Error::SelfCheck(format!(
                        "EM log-likelihood {} below lattice optimum {best}",
                        record.report.log_likelihood
                    )));
                }
            }
        }
        Command::Nms { io, .. } => {
            let scenes = read_scenes_warn(&io.input)?;
            prepare_dir(&io.out_dir)?;
            let out: Vec<SceneDetections> =
                scenes.par_iter().map(|s| scene_postprocess(s, cfg, false)).collect();
            write_records(&io.out_dir.join("detections_nms.jsonl"), &out)?;
            echo(&io.out_dir)?;
            if cli.self_check {
                for scene in &scenes {
                    let dets = scene_detections(scene, cfg.min_score, cfg.lambda_rank);
                    if nms(&dets, cfg.nms_threshold, cfg.rank)
                        != oracles::nms_naive(&dets, cfg.nms_threshold, cfg.rank)
                    {
                        return Err(self_check_failure("nms", &scene.id));
                    }
                }
            }
        }
        Command::Vote { io, .. } => {
            let scenes = read_scenes_warn(&io.input)?;
            prepare_dir(&io.out_dir)?;
            let voting = cfg.voting_enabled;
            let out: Vec<SceneDetections> =
                scenes.par_iter().map(|s| scene_postprocess(s, cfg, voting)).collect();
            write_records(&io.out_dir.join("detections_vote.jsonl"), &out)?;
            echo(&io.out_dir)?;
            if cli.self_check {
                for (scene, got) in scenes.iter().zip(&out) {
                    if !same_detections(&got.detections, &postprocess_reference(scene, cfg, voting)) {
                        return Err(self_check_failure("score voting", &scene.id));
                    }
                }
            }
        }
        Command::Stats { io, assignments } => {
            let scenes = read_scenes_warn(&io.input)?;
            let results = match assignments {
                Some(path) => read_assignments(path)?,
                None => run_assign(&scenes, cfg)?,
            };
            prepare_dir(&io.out_dir)?;
            let stats = positives_stats(&results);
            let record = StatsRecord {
                scenes: scenes.len(),
                iou_pred_error: iou_pred_error(&scenes, &results)?,
                positives: stats,
            };
            write_json(&io.out_dir.join("stats.json"), &record)?;
            plot::emit_plot_data(&io.out_dir, &results, &record.positives, cfg.histogram_bins)?;
            echo(&io.out_dir)?;
            if cli.self_check {
                for (scene, r) in scenes.iter().zip(&results) {
                    r.validate_partition().map_err(|e| Error::SelfCheck(e.to_string()))?;
                    if r.num_anchors != scene.grid.num_anchors() {
                        return Err(self_check_failure("assignment size", &scene.id));
                    }
                    for g in &r.per_gt {
                        let owned = r.positive_gts.iter().filter(|&&o| o == g.gt).count();
                        if owned != g.positives.len() || owned > g.candidates.len() {
                            return Err(self_check_failure("positive counts", &scene.id));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    let outcome = with_overrides(cli).and_then(|cfg| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if cfg.workers > 0 {
            pool = pool.num_threads(cfg.workers);
        }
        let pool = pool
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
        pool.install(|| execute(cli, &cfg))
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.kind(),
                "command": cli.command.name(),
                "message": e.to_string(),
            });
            let _ = writeln!(std::io::stderr(), "{record}");
            if matches!(e, Error::SelfCheck(_)) {
                2
            } else {
                1
            }
        }
    }
}
