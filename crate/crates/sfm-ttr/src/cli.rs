//! `sfm-ttr` subcommands. Stages exchange data only through files, so each
//! one can be run, inspected or replaced on its own.
//!
//! Exit codes: 0 success, 1 usage error, 2 input or parse error, 3 numerical
//! failure. Errors go to stderr as one JSON object per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use sfm_ttr_core::geometry::{extract_sparse_depths_with_stats, ExtractOptions, ExtractionStats};
use sfm_ttr_core::metrics::{binned_metrics, BinMetrics, MetricsError};
use sfm_ttr_core::model::{DepthModel, Image};
use sfm_ttr_core::refine::{fit_dense, RefineFrame};
use sfm_ttr_core::synth;
use sfm_ttr_core::{
    align_frame, align_frame_median, compute_metrics, AlignmentError, DepthMap, DepthMetrics, ReferenceModel,
    Reconstruction, ScaleAlignment, SparseDepthFrame,
};

use crate::colmap::{self, ColmapError};
use crate::config::{self, AlignMethod, CropName, ModeName, RunConfig};
use crate::depth_io;
use crate::formats::{self, ImageMetrics, MetricsRecord, MetricsReport};
use crate::manifest::Manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sfm-ttr", version, about = "Sparse SfM depth supervision for test-time depth refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub output: PathBuf,
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    EncoderOnly,
    FullModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScalingArg {
    Median,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CropArg {
    None,
    Eigen,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a COLMAP model and write an integrity report.
    Parse {
        /// COLMAP sparse model directory.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pair SfM point depths with network depths, one CSV per image.
    Extract {
        /// COLMAP sparse model directory.
        #[arg(long)]
        input: PathBuf,
        /// Network depth maps named after the images (`<stem>.pfm` or `.png`).
        #[arg(long)]
        depth: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate per-image scales from sparse depth CSVs.
    Align {
        /// A frames CSV or a directory of them.
        #[arg(long)]
        input: PathBuf,
        /// `robust` (RANSAC + weighted LS) or the `median` ratio baseline.
        #[arg(long, value_enum)]
        scaling: Option<ScalingArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Refine the reference model on aligned sparse depths.
    Refine {
        /// Directory of frames CSVs, one image per file, named after the image.
        #[arg(long)]
        input: PathBuf,
        /// Directory of alignment JSON files.
        #[arg(long)]
        alignments: PathBuf,
        /// Directory of network input images (`<stem>.pfm`, three channels).
        #[arg(long)]
        images: PathBuf,
        /// Initial model parameters.
        #[arg(long)]
        params: PathBuf,
        /// COLMAP model providing camera sizes; defaults to the image size.
        #[arg(long)]
        sparse: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics of predicted against ground-truth depth maps.
    Eval {
        /// Predicted depth maps.
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth depth maps with matching file stems.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        crop: Option<CropArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic scene with pseudo-network maps and a pretrained model.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Metrics per ground-truth depth bin.
    BinErrors {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        crop: Option<CropArg>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Numerical(_) => "numerical",
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

impl From<AlignmentError> for CliError {
    fn from(e: AlignmentError) -> Self {
        match e {
            AlignmentError::EmptyInput | AlignmentError::InvalidPair { .. } => CliError::Input(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::ShapeMismatch { .. } | MetricsError::InvalidConfig(_) | MetricsError::BadBinEdges => {
                CliError::Input(e.to_string())
            }
            MetricsError::EmptyMask | MetricsError::ZeroMedian => CliError::Numerical(e.to_string()),
        }
    }
}

fn emit(level: &str, kind: &str, message: &str) {
    let line = serde_json::json!({ "level": level, "kind": kind, "message": message });
    eprintln!("{line}");
}

fn warn(message: &str) {
    emit("warning", "input", message);
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            emit("error", e.kind(), &e.to_string());
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Parse { input, common } => {
            let cfg = resolve(&common, |_| {})?;
            cmd_parse(&input, &common.output, &cfg)
        }
        Command::Extract { input, depth, common } => {
            let cfg = resolve(&common, |_| {})?;
            cmd_extract(&input, &depth, &common.output, &cfg)
        }
        Command::Align { input, scaling, common } => {
            let cfg = resolve(&common, |c| {
                if let Some(s) = scaling {
                    c.align.method = match s {
                        ScalingArg::Median => AlignMethod::Median,
                        ScalingArg::Robust => AlignMethod::Robust,
                    };
                }
            })?;
            cmd_align(&input, &common.output, &cfg)
        }
        Command::Refine { input, alignments, images, params, sparse, mode, common } => {
            let cfg = resolve(&common, |c| {
                if let Some(m) = mode {
                    c.refine.mode = match m {
                        ModeArg::EncoderOnly => ModeName::EncoderOnly,
                        ModeArg::FullModel => ModeName::FullModel,
                    };
                }
            })?;
            let paths = RefinePaths { frames: input, alignments, images, params, sparse };
            cmd_refine(&paths, &common.output, &cfg)
        }
        Command::Eval { input, gt, crop, common } => {
            let cfg = resolve(&common, |c| apply_crop(c, crop))?;
            cmd_eval(&input, &gt, &common.output, &cfg)
        }
        Command::Simulate { common } => {
            let cfg = resolve(&common, |_| {})?;
            cmd_simulate(&common.output, &cfg)
        }
        Command::BinErrors { input, gt, crop, common } => {
            let cfg = resolve(&common, |c| apply_crop(c, crop))?;
            cmd_bin_errors(&input, &gt, &common.output, &cfg)
        }
    }
}

fn apply_crop(c: &mut RunConfig, crop: Option<CropArg>) {
    if let Some(crop) = crop {
        c.eval.crop = match crop {
            CropArg::None => CropName::None,
            CropArg::Eigen => CropName::Eigen,
        };
    }
}

/// Loads the config file, applies flag overrides, validates, and creates
/// the output directory.
fn resolve(common: &Common, overrides: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let src = fs::read_to_string(p).map_err(io_at(p))?;
            toml::from_str::<RunConfig>(&src).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    overrides(&mut cfg);
    cfg.validate().map_err(input_err)?;
    fs::create_dir_all(&common.output).map_err(io_at(&common.output))?;
    Ok(cfg)
}

/// Writes the resolved config and the manifest for a finished command.
fn finish(command: &str, out: &Path, cfg: &RunConfig, inputs: &[&Path]) -> Result<(), CliError> {
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(io_at(&path))?;
    let inputs: Vec<PathBuf> = inputs.iter().map(|p| p.to_path_buf()).collect();
    let manifest = Manifest::new(command, cfg, &inputs).map_err(input_err)?;
    manifest.write(out).map_err(io_at(out))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).map_err(input_err)?;
    fs::write(path, s + "\n").map_err(io_at(path))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_at(path))
}

fn stem_of(name: &str) -> String {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name).to_string()
}

/// Files in `dir` with one of the extensions, sorted by name.
fn files_with(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_at(dir))? {
        let p = entry.map_err(io_at(dir))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// `<dir>/<stem>.pfm`, else `<dir>/<stem>.png`.
fn depth_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["pfm", "png"].iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

fn load_model(dir: &Path) -> Result<Reconstruction, CliError> {
    colmap::load_reconstruction(dir).map_err(input_err)
}

// ---------------------------------------------------------------------------
// parse

#[derive(Debug, Serialize)]
struct ImageSummary {
    image_id: u32,
    name: String,
    camera_id: u32,
    observations: usize,
    matched_observations: usize,
}

#[derive(Debug, Serialize)]
struct ParseReport {
    files: BTreeMap<String, String>,
    cameras: usize,
    images: usize,
    points: usize,
    observations: usize,
    matched_observations: usize,
    mean_track_length: f64,
    mean_reprojection_error: f64,
    per_image: Vec<ImageSummary>,
    valid: bool,
    violations: Vec<String>,
}

fn cmd_parse(input: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let files = colmap::model_files(input).map_err(input_err)?;
    let recon = colmap::read_model(input).map_err(input_err)?;
    let violations: Vec<String> = recon.integrity_errors().iter().map(ToString::to_string).collect();
    let per_image: Vec<ImageSummary> = recon
        .images
        .values()
        .map(|im| ImageSummary {
            image_id: im.image_id,
            name: im.name.clone(),
            camera_id: im.camera_id,
            observations: im.observations.len(),
            matched_observations: im.observations.iter().filter(|o| o.point3d_id.is_some()).count(),
        })
        .collect();
    let n_points = recon.points.len().max(1) as f64;
    let report = ParseReport {
        files: files
            .iter()
            .map(|(p, _)| (file_stem(p), p.file_name().unwrap_or_default().to_string_lossy().into_owned()))
            .collect(),
        cameras: recon.cameras.len(),
        images: recon.images.len(),
        points: recon.points.len(),
        observations: per_image.iter().map(|i| i.observations).sum(),
        matched_observations: per_image.iter().map(|i| i.matched_observations).sum(),
        mean_track_length: recon.points.values().map(|p| p.track.len() as f64).sum::<f64>() / n_points,
        mean_reprojection_error: recon.points.values().map(|p| p.reproj_error).sum::<f64>() / n_points,
        per_image,
        valid: violations.is_empty(),
        violations,
    };
    write_json(&out.join("report.json"), &report)?;
    finish("parse", out, cfg, &[input])?;
    if !report.valid {
        return Err(CliError::Input(format!(
            "{}",
            ColmapError::IntegrityViolation(recon.integrity_errors())
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// extract

#[derive(Debug, Serialize)]
struct ExtractSummary {
    image_id: u32,
    name: String,
    observed: usize,
    behind_camera: usize,
    out_of_bounds: usize,
    invalid_depth: usize,
    non_positive_depth: usize,
    kept: usize,
}

fn cmd_extract(input: &Path, depth: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let recon = load_model(input)?;
    let jobs: Vec<(u32, String, PathBuf)> = recon
        .images
        .values()
        .filter_map(|im| {
            let stem = stem_of(&im.name);
            match depth_file(depth, &stem) {
                Some(p) => Some((im.image_id, stem, p)),
                None => {
                    warn(&format!("no depth map for image {} ({stem}), skipped", im.image_id));
                    None
                }
            }
        })
        .collect();
    if jobs.is_empty() {
        return Err(CliError::Input(format!("no depth maps in {} match the model's images", depth.display())));
    }
    let results: Vec<Result<(SparseDepthFrame, ExtractionStats), CliError>> = jobs
        .par_iter()
        .map(|(id, _, path)| {
            let map = depth_io::read_depth_map(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            extract_sparse_depths_with_stats(&recon, *id, &map, ExtractOptions::default()).map_err(input_err)
        })
        .collect();
    let mut summary = Vec::new();
    for ((id, stem, _), res) in jobs.iter().zip(results) {
        let (frame, stats) = res?;
        let path = out.join(format!("{stem}.csv"));
        formats::write_frames_csv(create(&path)?, std::slice::from_ref(&frame)).map_err(input_err)?;
        summary.push(ExtractSummary {
            image_id: *id,
            name: recon.images[id].name.clone(),
            observed: stats.observed,
            behind_camera: stats.behind_camera,
            out_of_bounds: stats.out_of_bounds,
            invalid_depth: stats.invalid_depth,
            non_positive_depth: stats.non_positive_depth,
            kept: stats.kept,
        });
    }
    write_json(&out.join("extract_summary.json"), &summary)?;
    finish("extract", out, cfg, &[input, depth])
}

// ---------------------------------------------------------------------------
// align

#[derive(Debug, Serialize)]
struct AlignSummary {
    image_id: u32,
    source: String,
    pairs: usize,
    accepted: bool,
    scale: Option<f64>,
    stage1_inliers: usize,
    stage2_inliers: usize,
    reason: Option<String>,
}

/// Frames of every CSV under `input`, each tagged with an output stem.
fn read_frames(input: &Path) -> Result<Vec<(String, SparseDepthFrame)>, CliError> {
    let files = if input.is_dir() { files_with(input, &["csv"])? } else { vec![input.to_path_buf()] };
    let mut out = Vec::new();
    for path in files {
        let file = fs::File::open(&path).map_err(io_at(&path))?;
        let frames = match formats::read_frames_csv(file) {
            Ok(f) => f,
            Err(formats::FormatError::EmptyInput) if input.is_dir() => {
                warn(&format!("{}: no depth pairs, skipped", path.display()));
                continue;
            }
            Err(e) => return Err(CliError::Input(format!("{}: {e}", path.display()))),
        };
        let stem = file_stem(&path);
        let single = frames.len() == 1;
        for f in frames {
            let name = if single { stem.clone() } else { format!("{stem}_{}", f.image_id) };
            out.push((name, f));
        }
    }
    if out.is_empty() {
        return Err(CliError::Input(format!("{}: {}", input.display(), formats::FormatError::EmptyInput)));
    }
    Ok(out)
}

fn cmd_align(input: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let frames = read_frames(input)?;
    let results: Vec<Result<ScaleAlignment, AlignmentError>> = frames
        .par_iter()
        .map(|(_, f)| {
            let ac = cfg.align_config(f.image_id);
            match cfg.align.method {
                AlignMethod::Robust => align_frame(f, &ac),
                AlignMethod::Median => align_frame_median(f, &ac),
            }
        })
        .collect();
    let mut summary = Vec::new();
    for ((stem, frame), res) in frames.iter().zip(results) {
        let mut row = AlignSummary {
            image_id: frame.image_id,
            source: stem.clone(),
            pairs: frame.len(),
            accepted: false,
            scale: None,
            stage1_inliers: 0,
            stage2_inliers: 0,
            reason: None,
        };
        match res {
            Ok(a) => {
                let path = out.join(format!("{stem}.json"));
                fs::write(&path, formats::alignment_json(&a).map_err(input_err)?).map_err(io_at(&path))?;
                row.accepted = true;
                row.scale = Some(a.scale);
                row.stage1_inliers = a.stage1_inliers.len();
                row.stage2_inliers = a.stage2_inliers.len();
            }
            Err(e @ AlignmentError::InvalidPair { .. }) => return Err(CliError::Input(format!("{stem}: {e}"))),
            Err(e) => {
                warn(&format!("image {}: {e}", frame.image_id));
                row.reason = Some(e.to_string());
            }
        }
        summary.push(row);
    }
    write_json(&out.join("alignment_summary.json"), &summary)?;
    finish("align", out, cfg, &[input])?;
    if summary.iter().all(|s| !s.accepted) {
        return Err(CliError::Numerical("every frame was rejected by the alignment".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// refine

struct RefinePaths {
    frames: PathBuf,
    alignments: PathBuf,
    images: PathBuf,
    params: PathBuf,
    sparse: Option<PathBuf>,
}

fn read_alignments(dir: &Path) -> Result<BTreeMap<u32, ScaleAlignment>, CliError> {
    let mut out = BTreeMap::new();
    for path in files_with(dir, &["json"])? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name == "manifest.json" || name == "alignment_summary.json" {
            continue;
        }
        let src = fs::read_to_string(&path).map_err(io_at(&path))?;
        let a = formats::parse_alignment_json(&src).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if out.insert(a.image_id, a).is_some() {
            return Err(CliError::Input(format!("{}: second alignment for the same image", path.display())));
        }
    }
    Ok(out)
}

fn read_params(path: &Path) -> Result<ReferenceModel, CliError> {
    let file = fs::File::open(path).map_err(io_at(path))?;
    formats::read_model_params(std::io::BufReader::new(file)).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_params(path: &Path, model: &ReferenceModel) -> Result<(), CliError> {
    formats::write_model_params(create(path)?, model).map_err(input_err)
}

fn read_image(path: &Path) -> Result<Image, CliError> {
    let img = depth_io::read_image(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if !ReferenceModel::accepts(&img) {
        return Err(CliError::Input(format!(
            "{}: the reference model needs 3 channels and sides divisible by 4, got {}x{}x{}",
            path.display(),
            img.channels,
            img.height,
            img.width
        )));
    }
    Ok(img)
}

/// Predicts every image and writes `<dir>/<stem>.pfm`.
fn write_predictions(model: &ReferenceModel, images: &[(String, Image)], dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let maps: Vec<DepthMap> = images.par_iter().map(|(_, im)| model.predict(im)).collect();
    for ((stem, _), map) in images.iter().zip(&maps) {
        let path = dir.join(format!("{stem}.pfm"));
        depth_io::write_depth_map(&path, map).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn read_images(dir: &Path) -> Result<Vec<(String, Image)>, CliError> {
    files_with(dir, &["pfm"])?.iter().map(|p| Ok((file_stem(p), read_image(p)?))).collect()
}

fn cmd_refine(paths: &RefinePaths, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let frames = read_frames(&paths.frames)?;
    let alignments = read_alignments(&paths.alignments)?;
    let images = read_images(&paths.images)?;
    let recon = paths.sparse.as_deref().map(load_model).transpose()?;
    let mut model = read_params(&paths.params)?;

    let image_by_stem: BTreeMap<&str, &Image> = images.iter().map(|(s, im)| (s.as_str(), im)).collect();
    let mut refine_frames = Vec::new();
    for (stem, frame) in &frames {
        let stem = match &recon {
            Some(r) => match r.images.get(&frame.image_id) {
                Some(im) => stem_of(&im.name),
                None => return Err(CliError::Input(format!("image {} is not in the sparse model", frame.image_id))),
            },
            None => stem.clone(),
        };
        let Some(image) = image_by_stem.get(stem.as_str()) else {
            return Err(CliError::Input(format!("no input image `{stem}.pfm` for frame of image {}", frame.image_id)));
        };
        let frame_size = match &recon {
            Some(r) => {
                let cam = r.camera_of(&r.images[&frame.image_id]).expect("validated model");
                (cam.width as usize, cam.height as usize)
            }
            None => (image.width, image.height),
        };
        let alignment = alignments.get(&frame.image_id);
        if alignment.is_none() {
            warn(&format!("image {} has no alignment and does not supervise", frame.image_id));
        }
        refine_frames.push(RefineFrame { image, frame, alignment, frame_size });
    }

    let ttr = cfg.ttr(0);
    let trace = sfm_ttr_core::refine(&mut model, &refine_frames, &ttr).map_err(|e| match e {
        sfm_ttr_core::refine::RefineError::NoUsableFrames => CliError::Numerical(e.to_string()),
        other => CliError::Input(other.to_string()),
    })?;
    if let Some(bad) = trace.iter().find(|r| !r.loss.is_finite()) {
        return Err(CliError::Numerical(format!("loss became {} at step {}", bad.loss, bad.step)));
    }

    write_params(&out.join("params.sftr"), &model)?;
    formats::write_loss_trace(create(&out.join("loss_trace.csv"))?, &trace).map_err(input_err)?;
    write_predictions(&model, &images, &out.join("pred"))?;
    let mut inputs: Vec<&Path> = vec![&paths.frames, &paths.alignments, &paths.images, &paths.params];
    if let Some(s) = &paths.sparse {
        inputs.push(s);
    }
    finish("refine", out, cfg, &inputs)
}

// ---------------------------------------------------------------------------
// eval, bin-errors

fn read_map(path: &Path) -> Result<DepthMap, CliError> {
    depth_io::read_depth_map(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// `(stem, prediction, ground truth)` for every ground-truth map.
fn paired_maps(pred: &Path, gt: &Path) -> Result<Vec<(String, DepthMap, DepthMap)>, CliError> {
    let gts = files_with(gt, &["pfm", "png"])?;
    if gts.is_empty() {
        return Err(CliError::Input(format!("no depth maps in {}", gt.display())));
    }
    gts.par_iter()
        .map(|g| {
            let stem = file_stem(g);
            let p = depth_file(pred, &stem)
                .ok_or_else(|| CliError::Input(format!("no prediction for `{stem}` in {}", pred.display())))?;
            Ok((stem, read_map(&p)?, read_map(g)?))
        })
        .collect()
}

fn cmd_eval(pred: &Path, gt: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let pairs = paired_maps(pred, gt)?;
    let ec = cfg.eval_config();
    let metrics: Vec<DepthMetrics> = pairs
        .par_iter()
        .map(|(stem, p, g)| compute_metrics(p, g, &ec).map_err(|e| tag(stem, e.into())))
        .collect::<Result<_, _>>()?;
    let aggregate = DepthMetrics::aggregate(&metrics).ok_or_else(|| CliError::Numerical("nothing to evaluate".into()))?;
    let report = MetricsReport {
        per_image: pairs
            .iter()
            .zip(&metrics)
            .map(|((stem, _, _), m)| ImageMetrics { name: stem.clone(), metrics: MetricsRecord::from(m) })
            .collect(),
        aggregate: MetricsRecord::from(&aggregate),
    };
    write_json(&out.join("metrics.json"), &report)?;
    formats::write_metrics_csv(create(&out.join("metrics.csv"))?, &report).map_err(input_err)?;
    finish("eval", out, cfg, &[pred, gt])
}

fn tag(stem: &str, e: CliError) -> CliError {
    match e {
        CliError::Input(m) => CliError::Input(format!("{stem}: {m}")),
        CliError::Numerical(m) => CliError::Numerical(format!("{stem}: {m}")),
    }
}

fn cmd_bin_errors(pred: &Path, gt: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let pairs = paired_maps(pred, gt)?;
    let ec = cfg.eval_config();
    let edges = cfg.bin_edges();
    let per_image: Vec<Vec<BinMetrics>> = pairs
        .par_iter()
        .map(|(stem, p, g)| binned_metrics(p, g, &ec, &edges).map_err(|e| tag(stem, e.into())))
        .collect::<Result<_, _>>()?;
    let bins: Vec<BinMetrics> = edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let items: Vec<DepthMetrics> = per_image.iter().filter_map(|b| b[i].metrics).collect();
            BinMetrics { lo: w[0], hi: w[1], metrics: DepthMetrics::aggregate(&items) }
        })
        .collect();
    formats::write_bins_csv(create(&out.join("bins.csv"))?, &bins).map_err(input_err)?;
    finish("bin-errors", out, cfg, &[pred, gt])
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Serialize)]
struct SimulateSummary {
    images: usize,
    points: usize,
    gt_scale: f64,
    depth_range: [f64; 2],
    injected_outlier_points: Vec<u64>,
    pretrain_final_loss: Option<f64>,
}

fn cmd_simulate(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let scene = synth::generate_scene(&cfg.scene_config()).map_err(input_err)?;
    let noise = cfg.noise_config();
    let pseudo = synth::network_maps(&scene, &noise, config::derive_seed(cfg.seed, config::stream::NETWORK, 0))
        .map_err(input_err)?;
    let far = scene.depth_range.1;
    let sfm_seed = config::derive_seed(cfg.seed, config::stream::SFM_NOISE, 0);
    let (noisy, outliers) = synth::perturb_reconstruction(&scene.reconstruction, far, &noise, sfm_seed).map_err(input_err)?;

    // Round images through their on-disk precision so later stages see
    // exactly what the model was fit on.
    let mut images = Vec::new();
    for (id, im) in &scene.images {
        let bytes = depth_io::encode_image_pfm(im).map_err(input_err)?;
        let stem = stem_of(&scene.reconstruction.images[id].name);
        images.push((*id, stem, depth_io::decode_image_pfm(&bytes).map_err(input_err)?, bytes));
    }

    let mut model = ReferenceModel::new(config::derive_seed(cfg.seed, config::stream::MODEL_INIT, 0));
    let data: Vec<(Image, DepthMap)> = images.iter().map(|(id, _, im, _)| (im.clone(), pseudo[id].clone())).collect();
    let losses = if cfg.pretrain.steps > 0 {
        fit_dense(&mut model, &data, &cfg.fit_config()).map_err(|e| CliError::Numerical(e.to_string()))?
    } else {
        Vec::new()
    };

    let sparse = out.join("sparse");
    colmap::write_reconstruction_text(&noisy, &sparse).map_err(input_err)?;
    colmap::write_reconstruction_binary(&noisy, &sparse).map_err(input_err)?;
    for sub in ["gt", "images", "pseudo", "pred"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(io_at(&d))?;
    }
    for (id, stem, _, bytes) in &images {
        let p = out.join("images").join(format!("{stem}.pfm"));
        fs::write(&p, bytes).map_err(io_at(&p))?;
        for (sub, map) in [("gt", &scene.gt_depth_maps[id]), ("pseudo", &pseudo[id])] {
            let p = out.join(sub).join(format!("{stem}.pfm"));
            depth_io::write_depth_map(&p, map).map_err(input_err)?;
        }
    }
    let named: Vec<(String, Image)> = images.iter().map(|(_, s, im, _)| (s.clone(), im.clone())).collect();
    write_predictions(&model, &named, &out.join("pred"))?;
    write_params(&out.join("model_init.sftr"), &model)?;
    write_json(
        &out.join("scene.json"),
        &SimulateSummary {
            images: scene.reconstruction.images.len(),
            points: scene.reconstruction.points.len(),
            gt_scale: scene.gt_scale,
            depth_range: [scene.depth_range.0, scene.depth_range.1],
            injected_outlier_points: outliers,
            pretrain_final_loss: losses.last().copied(),
        },
    )?;
    finish("simulate", out, cfg, &[])
}
