//! Command-line frontend.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! filesystem failures.

mod svg;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::geometry::RotatedRect;
use crate::losses::{self, LossWeights};
use crate::pipeline::{self, CornerDetection, PipelineConfig};
use crate::synth::{self, SynthConfig};
use crate::targets::{self, DefaultBoxConfig, LayerMaps};
use crate::tensorio::{self, BoxRecord, CornerRecord, SceneAnnotation, Tensor3D};

pub use svg::render_overlay;

/// Everything configurable, as read from a `--config` JSON file. Missing
/// sections and fields take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub default_boxes: DefaultBoxConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            source_name: path.display().to_string(),
            location: crate::error::FormatLocation::Line(e.line()),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "cornerseg", version, about = "Corner-based oriented text detection engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: annotation, corner detections and segmentation maps.
    Synth(SynthArgs),
    /// Build corner score/offset targets, position-sensitive masks and matches from ground truth.
    EncodeTargets(EncodeArgs),
    /// Run inference from corner detections or score/offset maps plus segmentation maps.
    Detect(DetectArgs),
    /// Evaluate confidence, localization and segmentation losses on a stored batch.
    Loss(LossArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Draw ground truth (green) and detections (red) as SVG.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON run configuration; the `synth` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scene seed [default: the config's synth.seed, 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Ground truth: a box JSON-lines file or a scene.json annotation.
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON run configuration; `default_boxes` and `pipeline.g` are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Corner detections as JSON-lines.
    #[arg(long, conflicts_with = "maps", required_unless_present = "maps")]
    pub corners: Option<PathBuf>,
    /// Directory with scores_<layer>.cft and offsets_<layer>.cft for every configured layer.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// Position-sensitive segmentation maps (g*g channels).
    #[arg(long)]
    pub seg: PathBuf,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output detections (box JSON-lines with scores).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional SVG overlay of the detections.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Ground truth drawn in the overlay.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Threads for candidate scoring [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Segmentation score threshold [default: 0.6]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Corner score threshold [default: 0.5]
    #[arg(long)]
    pub corner_threshold: Option<f64>,
    /// Final NMS IoU threshold [default: 0.3]
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Directory holding conf_scores, conf_labels, loc_pred, loc_target, seg_pred and seg_label (.cft).
    #[arg(long)]
    pub batch_dir: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections (box JSON-lines with scores).
    #[arg(long)]
    pub det: PathBuf,
    /// Ground truth: a box JSON-lines file or a scene.json annotation.
    #[arg(long)]
    pub gt: PathBuf,
    /// IoU needed for a match.
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    /// Ground truth: a box JSON-lines file or a scene.json annotation.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Detections (box JSON-lines).
    #[arg(long)]
    pub det: Option<PathBuf>,
    /// Canvas width [default: annotation width, else 512]
    #[arg(long)]
    pub width: Option<u32>,
    /// Canvas height [default: annotation height, else 512]
    #[arg(long)]
    pub height: Option<u32>,
    /// Output SVG file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(msg) => {
            if !msg.is_empty() {
                print!("{msg}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

/// Runs a command and returns the text it prints on success.
pub fn run(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::EncodeTargets(a) => cmd_encode(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Loss(a) => cmd_loss(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Overlay(a) => cmd_overlay(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Ground-truth boxes plus the image size when the source records one.
pub type GroundTruth = (Vec<RotatedRect>, Option<(u32, u32)>);

/// Reads ground truth from a scene annotation (`.json`) or box JSON-lines.
pub fn read_gt(path: &Path) -> Result<GroundTruth> {
    if path.extension().is_some_and(|e| e == "json") {
        let ann = SceneAnnotation::read(path)?;
        Ok((ann.rects(), Some((ann.image_width, ann.image_height))))
    } else {
        let boxes = tensorio::read_boxes(path)?;
        Ok((boxes.iter().map(BoxRecord::rect).collect(), None))
    }
}

fn read_detections(path: &Path) -> Result<Vec<pipeline::Detection>> {
    Ok(tensorio::read_boxes(path)?
        .iter()
        .map(|b| pipeline::Detection {
            rect: b.rect(),
            score: b.score.unwrap_or(0.0),
        })
        .collect())
}

fn cmd_synth(a: &SynthArgs) -> Result<String> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.synth.seed);
    let scene = synth::generate_noisy_scene(&cfg.synth, seed)?;
    create_dir(&a.out_dir)?;
    scene.annotation.write(a.out_dir.join("scene.json"))?;
    let gt: Vec<BoxRecord> = scene.boxes().iter().map(|r| BoxRecord::new(r, None)).collect();
    tensorio::write_boxes(&gt, a.out_dir.join("gt.jsonl"))?;
    let corners: Vec<CornerRecord> = scene.corners.iter().map(CornerDetection::to_record).collect();
    tensorio::write_corners(&corners, a.out_dir.join("corners.jsonl"))?;
    tensorio::write_tensor(&scene.masks.masks, a.out_dir.join("seg.cft"))?;
    Ok(format!(
        "wrote scene with {} boxes and {} corners to {}\n",
        gt.len(),
        corners.len(),
        a.out_dir.display()
    ))
}

#[derive(Serialize)]
struct MatchLine<'a> {
    layer: &'a str,
    row: usize,
    col: usize,
    scale: f64,
    #[serde(rename = "type")]
    corner_type: targets::CornerType,
    gt_box: usize,
    iou: f64,
}

fn cmd_encode(a: &EncodeArgs) -> Result<String> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    cfg.pipeline.validate()?;
    let (boxes, _) = read_gt(&a.gt)?;
    let t = targets::corner_targets(&boxes, &cfg.default_boxes)?;
    let db = &cfg.default_boxes;
    let masks = targets::ps_masks(
        &boxes,
        cfg.pipeline.g,
        db.input_height as usize,
        db.input_width as usize,
    )?;
    create_dir(&a.out_dir)?;
    for (layer, maps) in db.layers.iter().zip(&t.maps) {
        tensorio::write_tensor(&maps.scores, a.out_dir.join(format!("scores_{}.cft", layer.name)))?;
        tensorio::write_tensor(&maps.offsets, a.out_dir.join(format!("offsets_{}.cft", layer.name)))?;
    }
    tensorio::write_tensor(&masks.masks, a.out_dir.join("masks.cft"))?;
    let lines: Vec<MatchLine> = t
        .matching
        .matches
        .iter()
        .map(|m| {
            let b = &t.default_boxes[m.box_index];
            MatchLine {
                layer: &db.layers[b.layer_index].name,
                row: b.row,
                col: b.col,
                scale: b.side,
                corner_type: m.corner_type,
                gt_box: m.square_index / 4,
                iou: m.iou,
            }
        })
        .collect();
    tensorio::write_jsonl(&lines, a.out_dir.join("matches.jsonl"))?;
    Ok(format!(
        "encoded {} boxes: {} positive default boxes over {} layers\n",
        boxes.len(),
        t.matching.num_positive(),
        db.layers.len()
    ))
}

/// Reads per-layer score and offset maps written by `encode-targets`.
pub fn read_layer_maps(dir: &Path, cfg: &DefaultBoxConfig) -> Result<Vec<LayerMaps>> {
    cfg.layers
        .iter()
        .map(|l| {
            Ok(LayerMaps {
                scores: tensorio::read_tensor(dir.join(format!("scores_{}.cft", l.name)))?,
                offsets: tensorio::read_tensor(dir.join(format!("offsets_{}.cft", l.name)))?,
            })
        })
        .collect()
}

fn cmd_detect(a: &DetectArgs) -> Result<String> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let mut pc = cfg.pipeline.clone();
    if let Some(t) = a.threads {
        pc.threads = t;
    }
    if let Some(t) = a.tau {
        pc.tau = t;
    }
    if let Some(t) = a.corner_threshold {
        pc.corner_score_threshold = t;
    }
    if let Some(t) = a.nms_iou {
        pc.final_nms_iou = t;
    }
    pc.validate()?;
    let seg = tensorio::read_tensor(&a.seg)?;
    let dets = match (&a.corners, &a.maps) {
        (Some(path), _) => {
            let corners = tensorio::read_corners(path)?
                .iter()
                .map(CornerDetection::from_record)
                .collect::<Result<Vec<_>>>()?;
            pipeline::detect(&corners, &seg, &pc)?
        }
        (None, Some(dir)) => {
            let maps = read_layer_maps(dir, &cfg.default_boxes)?;
            pipeline::detect_from_maps(&maps, &cfg.default_boxes, &seg, &pc)?
        }
        (None, None) => return Err(Error::Config("one of --corners or --maps is required".into())),
    };
    let records: Vec<BoxRecord> = dets.iter().map(|d| BoxRecord::new(&d.rect, Some(d.score))).collect();
    tensorio::write_boxes(&records, &a.out)?;
    if let Some(svg_path) = &a.overlay {
        let gt = match &a.gt {
            Some(p) => read_gt(p)?.0,
            None => Vec::new(),
        };
        let det_rects: Vec<RotatedRect> = dets.iter().map(|d| d.rect).collect();
        let svg = render_overlay(seg.width() as u32, seg.height() as u32, &gt, &det_rects);
        fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))?;
    }
    Ok(format!("{} detections written to {}\n", dets.len(), a.out.display()))
}

/// Loss values of a stored batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub conf: f64,
    pub loc: f64,
    pub seg: f64,
    pub conf_term: f64,
    pub loc_term: f64,
    pub seg_term: f64,
    pub total: f64,
    pub num_positive: usize,
    pub num_selected_negative: usize,
    pub num_pixels: usize,
    pub zero_positive: bool,
}

fn rows<const N: usize>(t: &Tensor3D, name: &Path) -> Result<Vec<[f64; N]>> {
    if !t.data().len().is_multiple_of(N) || (t.width() != N && !t.data().is_empty()) {
        return Err(Error::Config(format!(
            "{} has shape {:?}; expected width {N}",
            name.display(),
            t.shape()
        )));
    }
    Ok(t.data()
        .chunks_exact(N)
        .map(|c| std::array::from_fn(|i| c[i] as f64))
        .collect())
}

/// Computes the combined loss for a batch directory.
pub fn batch_loss(dir: &Path) -> Result<LossReport> {
    let load = |name: &str| -> Result<(Tensor3D, PathBuf)> {
        let p = dir.join(format!("{name}.cft"));
        Ok((tensorio::read_tensor(&p)?, p))
    };
    let (scores, sp) = load("conf_scores")?;
    let (labels, lp) = load("conf_labels")?;
    let (loc_pred, pp) = load("loc_pred")?;
    let (loc_target, tp) = load("loc_target")?;
    let (seg_pred, segp) = load("seg_pred")?;
    let (seg_label, _) = load("seg_label")?;

    let scores = rows::<2>(&scores, &sp)?;
    let labels: Vec<bool> = labels
        .data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => Err(Error::Config(format!(
                "{} holds {other}; labels must be 0 or 1",
                lp.display()
            ))),
        })
        .collect::<Result<_>>()?;
    let loc_pred = rows::<4>(&loc_pred, &pp)?;
    let loc_target = rows::<4>(&loc_target, &tp)?;
    if seg_pred.shape() != seg_label.shape() {
        return Err(Error::Config(format!(
            "{} has shape {:?} but seg_label has {:?}",
            segp.display(),
            seg_pred.shape(),
            seg_label.shape()
        )));
    }

    let ce = losses::per_sample_cross_entropy(&scores, &labels);
    let sel = losses::ohem_select(&ce, &labels, losses::OHEM_NEG_RATIO)?;
    let conf = losses::conf_loss(&scores, &labels, &sel.indices)?;
    let loc = losses::loc_loss(&loc_pred, &loc_target)?;
    let sp64: Vec<f64> = seg_pred.data().iter().map(|&v| v as f64).collect();
    let sl64: Vec<f64> = seg_label.data().iter().map(|&v| v as f64).collect();
    let seg = losses::dice_loss(&sp64, &sl64)?;
    let num_pixels = seg_pred.height() * seg_pred.width();
    let w = LossWeights::new(sel.num_positive, num_pixels);
    let total = losses::total_loss(conf.value, loc.value, seg.value, &w)?;
    Ok(LossReport {
        conf: conf.value,
        loc: loc.value,
        seg: seg.value,
        conf_term: total.conf_term,
        loc_term: total.loc_term,
        seg_term: total.seg_term,
        total: total.value,
        num_positive: sel.num_positive,
        num_selected_negative: sel.num_negative,
        num_pixels,
        zero_positive: total.zero_positive,
    })
}

fn cmd_loss(a: &LossArgs) -> Result<String> {
    let r = batch_loss(&a.batch_dir)?;
    if a.json {
        return Ok(serde_json::to_string_pretty(&r).expect("report serializes") + "\n");
    }
    let mut s = String::new();
    let _ = writeln!(s, "conf        {:.9}", r.conf);
    let _ = writeln!(s, "loc         {:.9}", r.loc);
    let _ = writeln!(s, "seg         {:.9}", r.seg);
    let _ = writeln!(s, "conf/Nc     {:.9}", r.conf_term);
    let _ = writeln!(s, "l1*loc/Nc   {:.9}", r.loc_term);
    let _ = writeln!(s, "l2*seg/Ns   {:.9}", r.seg_term);
    let _ = writeln!(s, "total       {:.9}", r.total);
    let _ = writeln!(
        s,
        "Nc = {}, negatives = {}, Ns = {}{}",
        r.num_positive,
        r.num_selected_negative,
        r.num_pixels,
        if r.zero_positive { " (no positives)" } else { "" }
    );
    Ok(s)
}

fn format_report(r: &EvalReport) -> String {
    format!(
        "iou >= {}: tp {} fp {} fn {}  precision {:.6} recall {:.6} f-measure {:.6}\n",
        r.iou_threshold, r.true_positives, r.false_positives, r.false_negatives, r.precision, r.recall, r.f_measure
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<String> {
    if !(0.0..=1.0).contains(&a.iou) {
        return Err(Error::Config(format!("--iou {} outside [0, 1]", a.iou)));
    }
    let dets = read_detections(&a.det)?;
    let (gts, _) = read_gt(&a.gt)?;
    let report = eval::report(&eval::match_detections(&dets, &gts, a.iou), a.iou);
    if a.json {
        Ok(serde_json::to_string_pretty(&report).expect("report serializes") + "\n")
    } else {
        Ok(format_report(&report))
    }
}

fn cmd_overlay(a: &OverlayArgs) -> Result<String> {
    let (gt, size) = match &a.gt {
        Some(p) => read_gt(p)?,
        None => (Vec::new(), None),
    };
    let dets: Vec<RotatedRect> = match &a.det {
        Some(p) => read_detections(p)?.iter().map(|d| d.rect).collect(),
        None => Vec::new(),
    };
    let (w, h) = size.unwrap_or((512, 512));
    let svg = render_overlay(a.width.unwrap_or(w), a.height.unwrap_or(h), &gt, &dets);
    fs::write(&a.out, svg).map_err(|e| Error::io(&a.out, e))?;
    Ok(String::new())
}
