//! `lvseg` subcommands. Each one reads the outputs of earlier stages and
//! writes a run directory with an `artifacts.json` record.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lvseg_core::crf::CrfParams;
use lvseg_core::detector::iou;
use lvseg_core::metrics::{format_table, DatasetReport};
use lvseg_core::semflow::Lambdas;
use lvseg_core::sequence::{Image, SplitName};
use lvseg_core::synth::generate_dataset;
use lvseg_core::{BoundingBox, DatasetSplit, MaskSequence, ProbSequence};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, Dataset, Subject};
use crate::overlay;
use crate::pgm;
use crate::pipeline;
use crate::run::{self, RunDir};
use crate::tensorfile::{self, NamedTensor};

#[derive(Debug, Parser)]
#[command(name = "lvseg", version, about = "Left-ventricle segmentation of CINE sequences")]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the dataset, network and detector seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-subject work.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the LV box detector.
    TrainDetector(TrainDetectorArgs),
    /// Train the segmentation network (T-FCNN, or FCNN with --fcnn).
    Train(TrainArgs),
    /// Segment a split with a trained network.
    Infer(InferArgs),
    /// Refine probabilities with the dense CRF.
    RefineCrf(RefineCrfArgs),
    /// Refine masks with semantic flow.
    RefineSf(RefineSfArgs),
    /// Score the masks of a run against ground truth.
    Eval(EvalArgs),
    /// Tabulate evaluated runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    /// Manifest file or dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train the frame-independent baseline instead of the recurrent network.
    #[arg(long)]
    pub fcnn: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory of `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Run directory of `train-detector`; without it the whole frame is segmented.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Write PPM contour overlays.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct RefineCrfArgs {
    /// Run directory of `infer`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// CRF parameters (JSON); replaces the `crf` config section.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Dataset manifest; defaults to the one recorded by the input run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct RefineSfArgs {
    /// Run directory of `infer` or `refine-crf`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Energy weights (JSON); replaces `semflow.lambdas` of the config.
    #[arg(long)]
    pub lambdas: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding masks.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pred-to-truth APD only.
    #[arg(long)]
    pub one_directional: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories of `eval`.
    #[arg(long, required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Report row order.
pub const TABLE_ROWS: [&str; 8] =
    ["FCNN", "T-FCNN", "FCNN+CRFs", "T-FCNN+CRFs", "FCNN+SF", "T-FCNN+SF", "FCNN+CRFs+SF", "T-FCNN+CRFs+SF"];

pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(Cli::try_parse_from(args)?)
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    ensure!(cli.threads >= 1, "--threads must be at least 1");
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build()?;
    let force = cli.force;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, &a, force),
        Command::TrainDetector(a) => cmd_train_detector(&cfg, &a, force),
        Command::Train(a) => cmd_train(&cfg, &a, force),
        Command::Infer(a) => cmd_infer(&cfg, &a, force),
        Command::RefineCrf(a) => cmd_refine_crf(&cfg, &a, force),
        Command::RefineSf(a) => cmd_refine_sf(&cfg, &a, force),
        Command::Eval(a) => cmd_eval(&cfg, &a, force),
        Command::Report(a) => cmd_report(&a, force),
    })
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn load(p: &Path) -> Result<(PathBuf, Dataset)> {
    let m = manifest_path(p);
    if !m.is_file() {
        bail!("missing artifact {}", m.display());
    }
    let d = dataset::load_dataset(&m)?;
    Ok((m, d))
}

/// Dataset of an upstream run unless given explicitly.
fn upstream_dataset(explicit: Option<&Path>, rec: &run::RunRecord, input: &Path) -> Result<(PathBuf, Dataset)> {
    match explicit.or(rec.dataset.as_deref()) {
        Some(p) => load(p),
        None => bail!("{} records no dataset; pass --data", input.display()),
    }
}

fn upstream_subjects<'a>(d: &'a Dataset, rec: &run::RunRecord) -> Result<Vec<&'a Subject>> {
    rec.subjects
        .iter()
        .map(|id| d.subject(id).with_context(|| format!("subject {} of the input run is not in the dataset", id)))
        .collect()
}

pub fn cmd_synth(cfg: &RunConfig, a: &SynthArgs, force: bool) -> Result<()> {
    let mut synth = cfg.synth;
    if let Some(t) = a.frames {
        synth.frames = t;
    }
    let n = a.subjects.unwrap_or(cfg.subjects);
    ensure!(n >= 1, "need at least one subject");
    let subjects = generate_dataset(&synth, n, cfg.seed)?;
    let ids: Vec<_> = subjects.iter().map(|s| (s.id.clone(), s.twin_pair.clone())).collect();
    let split = DatasetSplit::partition(&ids, cfg.seed)?;
    let mut rd = RunDir::create(&a.out, "synth", force)?;
    for p in dataset::write_dataset(rd.root(), &subjects, &split)? {
        rd.add(p);
    }
    rd.write_json("synth_config.json", &synth)?;
    rd.record_mut().subjects = subjects.iter().map(|s| s.id.clone()).collect();
    rd.finish()?;
    eprintln!("wrote {} subjects of {} frames to {}", n, synth.frames, a.out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameBoxes {
    subject: String,
    hull: BoundingBox,
    truth_hull: Option<BoundingBox>,
    iou: Option<f64>,
    frames: Vec<BoundingBox>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectionSummary {
    /// `None` when no test subject has a nonempty mask.
    pub mean_iou: Option<f64>,
    pub subjects: usize,
}

pub fn cmd_train_detector(cfg: &RunConfig, a: &TrainDetectorArgs, force: bool) -> Result<()> {
    let (mpath, d) = load(&a.data)?;
    let train = d.of(SplitName::Train);
    ensure!(!train.is_empty(), "training split of {} is empty", mpath.display());
    let mut rd = RunDir::create(&a.out, "train-detector", force)?;
    rd.record_mut().dataset = Some(mpath.clone());
    let (det, history) = pipeline::train_detector(&train, &cfg.detector, cfg.pipeline.detector_frame_stride)?;
    checkpoint::save_detector(&rd.path("detector.ckpt")?, &det)?;
    rd.add("detector.ckpt");
    rd.write_json("detector_log.json", &history)?;
    let test = d.of(SplitName::Test);
    let boxes = test
        .par_iter()
        .map(|s| {
            let frames = pipeline::detect_frames(&det, &s.seq)?;
            let hull = lvseg_core::detector::sequence_box(&frames)?;
            let truth = pipeline::truth_hull(&s.masks);
            Ok(FrameBoxes { subject: s.id.clone(), hull, truth_hull: truth, iou: truth.map(|t| iou(&hull, &t)), frames })
        })
        .collect::<Result<Vec<_>>>()?;
    let ious: Vec<f64> = boxes.iter().filter_map(|b| b.iou).collect();
    let summary = DetectionSummary {
        mean_iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
        subjects: ious.len(),
    };
    rd.write_json("boxes.json", &boxes)?;
    rd.write_json("detection.json", &summary)?;
    rd.record_mut().subjects = test.iter().map(|s| s.id.clone()).collect();
    rd.finish()?;
    eprintln!(
        "detector: final loss {:.6}, test mean IoU {} over {} subjects",
        history.last().copied().unwrap_or(f64::NAN),
        summary.mean_iou.map_or("-".into(), |v| format!("{:.4}", v)),
        summary.subjects
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs, force: bool) -> Result<()> {
    let (mpath, d) = load(&a.data)?;
    let mut net_cfg = cfg.network.clone();
    if a.fcnn {
        net_cfg.recurrent = false;
    }
    let train = d.of(SplitName::Train);
    ensure!(!train.is_empty(), "training split of {} is empty", mpath.display());
    let val = d.of(SplitName::Validation);
    let mut rd = RunDir::create(&a.out, "train", force)?;
    rd.record_mut().dataset = Some(mpath);
    rd.record_mut().label = Some(if net_cfg.recurrent { "T-FCNN" } else { "FCNN" }.into());
    let (net, log) = pipeline::train_network(&train, &val, &net_cfg, &cfg.pipeline, |e| {
        eprintln!("epoch {:3} loss {:.5} val dice {}", e.epoch, e.train_loss, e.val_dice.map_or("-".into(), |v| format!("{:.4}", v)));
    })?;
    checkpoint::save_network(&rd.path("network.ckpt")?, &net)?;
    rd.add("network.ckpt");
    rd.write_json("training_log.json", &log)?;
    rd.write_json("pipeline.json", &cfg.pipeline)?;
    rd.finish()?;
    Ok(())
}

fn select(d: &Dataset, split: SplitArg) -> Vec<&Subject> {
    match split {
        SplitArg::Train => d.of(SplitName::Train),
        SplitArg::Validation => d.of(SplitName::Validation),
        SplitArg::Test => d.of(SplitName::Test),
        SplitArg::All => d.subjects.iter().collect(),
    }
}

fn mask_rel(id: &str, t: usize) -> PathBuf {
    PathBuf::from("subjects").join(id).join(format!("mask-{:03}.pgm", t))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneMeta {
    subject: String,
    kind: String,
}

fn write_probs(path: &Path, id: &str, kind: &str, probs: &ProbSequence) -> Result<()> {
    let ts: Vec<_> = probs
        .probs()
        .iter()
        .enumerate()
        .map(|(t, p)| NamedTensor::new(format!("{}.{:03}", kind, t), &[p.height(), p.width()], p.data().to_vec()))
        .collect();
    tensorfile::write(path, &PlaneMeta { subject: id.into(), kind: kind.into() }, &ts)
}

fn read_probs(path: &Path) -> Result<ProbSequence> {
    let (_, ts): (PlaneMeta, _) = tensorfile::read(path)?;
    let imgs = ts
        .into_iter()
        .map(|t| {
            ensure!(t.shape.len() == 2, "{}: plane {} is not 2-D", path.display(), t.name);
            Ok(Image::new(t.shape[0], t.shape[1], t.data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbSequence::new(imgs)?)
}

/// Masks of one subject written by an upstream run.
fn read_run_masks(root: &Path, s: &Subject) -> Result<MaskSequence> {
    let masks = (0..s.seq.len()).map(|t| pgm::read_mask(&run::require(root, mask_rel(&s.id, t))?)).collect::<Result<Vec<_>>>()?;
    Ok(MaskSequence::new(masks)?)
}

fn overlay_colour(label: &str) -> [u8; 3] {
    if label.starts_with("T-FCNN") {
        overlay::TFCNN
    } else {
        overlay::FCNN
    }
}

/// Writes masks (and overlays) of one subject; returns the relative paths.
fn write_subject_masks(root: &Path, s: &Subject, masks: &MaskSequence, label: &str, overlays: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    std::fs::create_dir_all(root.join("subjects").join(&s.id))?;
    for (t, m) in masks.masks().iter().enumerate() {
        let rel = mask_rel(&s.id, t);
        pgm::write_mask(&root.join(&rel), m)?;
        out.push(rel);
    }
    if overlays {
        std::fs::create_dir_all(root.join("overlays").join(&s.id))?;
        for (t, (f, (m, gt))) in s.seq.frames().iter().zip(masks.masks().iter().zip(s.masks.masks())).enumerate() {
            let rel = PathBuf::from("overlays").join(&s.id).join(format!("frame-{:03}.ppm", t));
            overlay::write_overlay(&root.join(&rel), f, &[(gt, overlay::TRUTH), (m, overlay_colour(label))])?;
            out.push(rel);
        }
    }
    Ok(out)
}

fn subject_rel(id: &str, file: &str) -> PathBuf {
    PathBuf::from("subjects").join(id).join(file)
}

pub fn cmd_infer(cfg: &RunConfig, a: &InferArgs, force: bool) -> Result<()> {
    let (mpath, d) = load(&a.data)?;
    run::open_run(&a.model)?;
    let net = checkpoint::load_network(&run::require(&a.model, "network.ckpt")?)?;
    let det = match &a.detector {
        Some(p) => {
            run::open_run(p)?;
            Some(checkpoint::load_detector(&run::require(p, "detector.ckpt")?)?)
        }
        None => None,
    };
    let subjects = select(&d, a.split);
    ensure!(!subjects.is_empty(), "no subjects in the {:?} split of {}", a.split, mpath.display());
    let label = if net.has_gru() { "T-FCNN" } else { "FCNN" };
    let mut rd = RunDir::create(&a.out, "infer", force)?;
    let root = rd.root().to_path_buf();
    let written = subjects
        .par_iter()
        .map(|s| {
            let (probs, region) = pipeline::segment(&net, det.as_ref(), &s.seq, &cfg.pipeline)?;
            let masks = probs.threshold(cfg.pipeline.threshold);
            let mut files = write_subject_masks(&root, s, &masks, label, a.overlay)?;
            let prel = subject_rel(&s.id, "probs.bin");
            write_probs(&root.join(&prel), &s.id, "prob", &probs)?;
            files.push(prel);
            let crel = subject_rel(&s.id, "crop.json");
            std::fs::write(root.join(&crel), serde_json::to_string_pretty(&region)? + "\n")?;
            files.push(crel);
            Ok(files)
        })
        .collect::<Result<Vec<_>>>()?;
    for p in written.into_iter().flatten() {
        rd.add(p);
    }
    let rec = rd.record_mut();
    rec.label = Some(label.into());
    rec.dataset = Some(mpath);
    rec.subjects = subjects.iter().map(|s| s.id.clone()).collect();
    rec.inputs.insert("model".into(), a.model.clone());
    if let Some(p) = &a.detector {
        rec.inputs.insert("detector".into(), p.clone());
    }
    rd.finish()?;
    eprintln!("{}: segmented {} subjects", label, subjects.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CrfTrace {
    /// Per frame, one energy trace per L-BFGS run.
    frames: Vec<Vec<Vec<f64>>>,
    line_search_failed: bool,
}

pub fn cmd_refine_crf(cfg: &RunConfig, a: &RefineCrfArgs, force: bool) -> Result<()> {
    let rec = run::open_run(&a.input)?;
    let (mpath, d) = upstream_dataset(a.data.as_deref(), &rec, &a.input)?;
    let subjects = upstream_subjects(&d, &rec)?;
    let params: CrfParams = match &a.params {
        Some(p) => run::read_json(p)?,
        None => cfg.crf,
    };
    params.validate()?;
    let label = format!("{}+CRFs", rec.label.as_deref().unwrap_or("input"));
    let mut rd = RunDir::create(&a.out, "refine-crf", force)?;
    let root = rd.root().to_path_buf();
    let written = subjects
        .par_iter()
        .map(|s| {
            let probs = read_probs(&run::require(&a.input, subject_rel(&s.id, "probs.bin"))?)?;
            let out = pipeline::refine_crf(&probs, &s.seq, &params).with_context(|| format!("CRF on {}", s.id))?;
            let mut files = write_subject_masks(&root, s, &out.masks, &label, a.overlay)?;
            let prel = subject_rel(&s.id, "probs.bin");
            write_probs(&root.join(&prel), &s.id, "q", &out.q)?;
            files.push(prel);
            let trace = CrfTrace { frames: out.frames.iter().map(|f| f.runs.clone()).collect(), line_search_failed: out.any_line_search_failed() };
            let erel = subject_rel(&s.id, "energy.json");
            std::fs::write(root.join(&erel), serde_json::to_string(&trace)? + "\n")?;
            files.push(erel);
            Ok(files)
        })
        .collect::<Result<Vec<_>>>()?;
    for p in written.into_iter().flatten() {
        rd.add(p);
    }
    rd.write_json("crf_params.json", &params)?;
    let r = rd.record_mut();
    r.label = Some(label.clone());
    r.dataset = Some(mpath);
    r.subjects = rec.subjects.clone();
    r.inputs.insert("input".into(), a.input.clone());
    rd.finish()?;
    eprintln!("{}: refined {} subjects", label, subjects.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SfTrace {
    initial: lvseg_core::semflow::EnergyTerms,
    iterations: Vec<lvseg_core::semflow::SfIteration>,
}

pub fn cmd_refine_sf(cfg: &RunConfig, a: &RefineSfArgs, force: bool) -> Result<()> {
    let rec = run::open_run(&a.input)?;
    let (mpath, d) = upstream_dataset(a.data.as_deref(), &rec, &a.input)?;
    let subjects = upstream_subjects(&d, &rec)?;
    let mut sf = cfg.semflow;
    if let Some(p) = &a.lambdas {
        sf.lambdas = run::read_json::<Lambdas>(p)?;
    }
    let label = format!("{}+SF", rec.label.as_deref().unwrap_or("input"));
    let mut rd = RunDir::create(&a.out, "refine-sf", force)?;
    let root = rd.root().to_path_buf();
    let written = subjects
        .par_iter()
        .map(|s| {
            let masks = read_run_masks(&a.input, s)?;
            let out = pipeline::refine_semflow(&s.seq, &masks, &sf).with_context(|| format!("semantic flow on {}", s.id))?;
            let mut files = write_subject_masks(&root, s, &out.masks, &label, a.overlay)?;
            let mut planes = Vec::new();
            for (t, (u, v)) in out.flow.u.iter().zip(&out.flow.v).enumerate() {
                planes.push(NamedTensor::new(format!("u.{:03}", t), &[u.height(), u.width()], u.data().to_vec()));
                planes.push(NamedTensor::new(format!("v.{:03}", t), &[v.height(), v.width()], v.data().to_vec()));
            }
            let frel = subject_rel(&s.id, "flow.bin");
            tensorfile::write(&root.join(&frel), &PlaneMeta { subject: s.id.clone(), kind: "flow".into() }, &planes)?;
            files.push(frel);
            let erel = subject_rel(&s.id, "energy.json");
            let trace = SfTrace { initial: out.initial, iterations: out.iterations.clone() };
            std::fs::write(root.join(&erel), serde_json::to_string(&trace)? + "\n")?;
            files.push(erel);
            Ok(files)
        })
        .collect::<Result<Vec<_>>>()?;
    for p in written.into_iter().flatten() {
        rd.add(p);
    }
    rd.write_json("semflow.json", &sf)?;
    let r = rd.record_mut();
    r.label = Some(label.clone());
    r.dataset = Some(mpath);
    r.subjects = rec.subjects.clone();
    r.inputs.insert("input".into(), a.input.clone());
    rd.finish()?;
    eprintln!("{}: refined {} subjects", label, subjects.len());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, force: bool) -> Result<()> {
    let rec = run::open_run(&a.input)?;
    let (mpath, d) = upstream_dataset(a.data.as_deref(), &rec, &a.input)?;
    let subjects = upstream_subjects(&d, &rec)?;
    ensure!(!subjects.is_empty(), "{} lists no subjects", a.input.display());
    let mut metrics = cfg.metrics.clone();
    metrics.one_directional |= a.one_directional;
    let label = rec.label.clone().unwrap_or_else(|| a.input.display().to_string());
    let preds = subjects.par_iter().map(|s| Ok((read_run_masks(&a.input, s)?, *s))).collect::<Result<Vec<_>>>()?;
    let report = pipeline::evaluate_all(&label, &preds, &metrics)?;
    let mut rd = RunDir::create(&a.out, "eval", force)?;
    rd.write_json("metrics.json", &report)?;
    rd.write_text("metrics.txt", &render_report(&[&report]))?;
    let r = rd.record_mut();
    r.label = Some(label);
    r.dataset = Some(mpath);
    r.subjects = rec.subjects.clone();
    r.inputs.insert("input".into(), a.input.clone());
    rd.finish()?;
    print!("{}", format_table(&[(report.label.clone(), report.per_frame)]));
    Ok(())
}

/// Per-frame and per-subject tables, rows in report order where labels match.
pub fn render_report(reports: &[&DatasetReport]) -> String {
    let mut rows: Vec<&DatasetReport> = reports.to_vec();
    rows.sort_by_key(|r| TABLE_ROWS.iter().position(|l| *l == r.label).unwrap_or(TABLE_ROWS.len()));
    let frame: Vec<_> = rows.iter().map(|r| (r.label.clone(), r.per_frame)).collect();
    let subject: Vec<_> = rows.iter().map(|r| (r.label.clone(), r.per_subject)).collect();
    format!("Per frame\n{}\nPer subject\n{}", format_table(&frame), format_table(&subject))
}

pub fn cmd_report(a: &ReportArgs, force: bool) -> Result<()> {
    let mut reports: Vec<DatasetReport> = Vec::with_capacity(a.runs.len());
    for r in &a.runs {
        let rep: DatasetReport = run::read_json(&run::require(r, "metrics.json")?)?;
        ensure!(reports.iter().all(|o| o.label != rep.label), "two runs are labelled {}", rep.label);
        reports.push(rep);
    }
    let refs: Vec<&DatasetReport> = reports.iter().collect();
    let text = render_report(&refs);
    let mut rd = RunDir::create(&a.out, "report", force)?;
    rd.write_text("report.txt", &text)?;
    let summary: Vec<_> = reports.iter().map(|r| (r.label.clone(), r.per_frame, r.per_subject)).collect();
    rd.write_json("report.json", &summary)?;
    for (i, r) in a.runs.iter().enumerate() {
        rd.record_mut().inputs.insert(format!("run{:02}", i), r.clone());
    }
    rd.finish()?;
    print!("{}", text);
    Ok(())
}
