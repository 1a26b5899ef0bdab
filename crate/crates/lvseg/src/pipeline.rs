//! The three workflow stages on in-memory data: LV box detection, sequence
//! segmentation inside the box, and post-processing.

use anyhow::{ensure, Context, Result};
use lvseg_core::crf::{self, CrfOutput, CrfParams};
use lvseg_core::detector::{sequence_box, BoxRegressor, DetectorConfig};
use lvseg_core::metrics::{evaluate_sequence, DatasetReport, MetricReport};
use lvseg_core::semflow::{refine_sf, SfConfig, SfOutput};
use lvseg_core::sequence::{crop_masks, crop_to_bbox, paste, resize_image, resize_mask, resize_sequence, Image};
use lvseg_core::tfcnn::{EpochLog, Network, NetworkConfig};
use lvseg_core::{BoundingBox, CineSequence, MaskSequence, ProbSequence};

use crate::config::{MetricsConfig, PipelineConfig};
use crate::dataset::Subject;

/// Maps a box between image sizes, rounding outwards.
pub fn scale_box(b: &BoundingBox, from: (usize, usize), to: (usize, usize)) -> BoundingBox {
    let (sy, sx) = (to.0 as f64 / from.0 as f64, to.1 as f64 / from.1 as f64);
    let lo = |v: usize, s: f64, n: usize| ((v as f64 * s).floor() as usize).min(n - 1);
    let hi = |v: usize, s: f64, n: usize| ((v as f64 * s).ceil() as usize).clamp(1, n);
    let (x0, y0) = (lo(b.x0, sx, to.1), lo(b.y0, sy, to.0));
    let (x1, y1) = (hi(b.x1, sx, to.1).max(x0 + 1), hi(b.y1, sy, to.0).max(y0 + 1));
    BoundingBox { x0, y0, x1, y1 }
}

/// Hull of the nonempty masks of a sequence.
pub fn truth_hull(masks: &MaskSequence) -> Option<BoundingBox> {
    let boxes: Vec<_> = masks.masks().iter().filter_map(BoundingBox::of_mask).collect();
    sequence_box(&boxes).ok()
}

/// Detector training pairs: frames resized to the detector input with their
/// scaled ground-truth boxes. Frames with empty masks are skipped.
pub fn detector_samples(subjects: &[&Subject], cfg: &DetectorConfig, stride: usize) -> Result<Vec<(Image, BoundingBox)>> {
    let (h, w) = cfg.input_size;
    let mut out = Vec::new();
    for s in subjects {
        for (f, m) in s.seq.frames().iter().zip(s.masks.masks()).step_by(stride.max(1)) {
            let Some(b) = BoundingBox::of_mask(m) else { continue };
            out.push((resize_image(f, h, w)?, scale_box(&b, f.dims(), (h, w))));
        }
    }
    Ok(out)
}

pub fn train_detector(subjects: &[&Subject], cfg: &DetectorConfig, stride: usize) -> Result<(BoxRegressor, Vec<f64>)> {
    let samples = detector_samples(subjects, cfg, stride)?;
    ensure!(!samples.is_empty(), "no frame with a nonempty mask to train the detector on");
    let mut det = BoxRegressor::build(cfg)?;
    let history = det.train(&samples)?;
    Ok((det, history))
}

/// Per-frame detections mapped back to the sequence's resolution.
pub fn detect_frames(det: &BoxRegressor, seq: &CineSequence) -> Result<Vec<BoundingBox>> {
    let (h, w) = det.config().input_size;
    seq.frames().iter().map(|f| Ok(scale_box(&det.detect(&resize_image(f, h, w)?)?, (h, w), f.dims()))).collect()
}

/// Hull of the per-frame detections.
pub fn detect_sequence(det: &BoxRegressor, seq: &CineSequence) -> Result<BoundingBox> {
    Ok(sequence_box(&detect_frames(det, seq)?)?)
}

/// The region a sequence is segmented in: `bbox` dilated by the margin, or
/// the whole frame when cropping is off or no box is known.
pub fn crop_region(seq: &CineSequence, bbox: Option<&BoundingBox>, p: &PipelineConfig) -> Result<BoundingBox> {
    let (h, w) = seq.dims();
    match bbox {
        Some(b) if p.crop => Ok(b.dilate_clamped(p.crop_margin, h, w)?),
        _ => Ok(BoundingBox::new(0, 0, w, h)?),
    }
}

/// Crops to `region` and resizes to the network input.
pub fn network_input(seq: &CineSequence, region: &BoundingBox, size: (usize, usize)) -> Result<CineSequence> {
    Ok(resize_sequence(&crop_to_bbox(seq, region, 0)?, size)?)
}

pub fn network_labels(masks: &MaskSequence, region: &BoundingBox, size: (usize, usize)) -> Result<MaskSequence> {
    let cropped = crop_masks(masks, region, 0)?;
    let resized = cropped.masks().iter().map(|m| resize_mask(m, size.0, size.1)).collect::<Result<Vec<_>, _>>()?;
    Ok(MaskSequence::new(resized)?)
}

fn training_pairs(subjects: &[&Subject], cfg: &NetworkConfig, p: &PipelineConfig) -> Result<Vec<(CineSequence, MaskSequence)>> {
    subjects
        .iter()
        .map(|s| {
            let region = crop_region(&s.seq, truth_hull(&s.masks).as_ref(), p)?;
            Ok((network_input(&s.seq, &region, cfg.input_size)?, network_labels(&s.masks, &region, cfg.input_size)?))
        })
        .collect::<Result<Vec<_>>>()
        .context("preparing network inputs")
}

pub fn train_network(
    train: &[&Subject],
    validation: &[&Subject],
    cfg: &NetworkConfig,
    p: &PipelineConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Network, Vec<EpochLog>)> {
    let tr = training_pairs(train, cfg, p)?;
    let va = training_pairs(validation, cfg, p)?;
    let mut net = Network::build(cfg)?;
    let log = net.train_with(&tr, &va, on_epoch)?;
    Ok((net, log))
}

/// Foreground probabilities at full resolution; zero outside the crop.
pub fn segment(net: &Network, det: Option<&BoxRegressor>, seq: &CineSequence, p: &PipelineConfig) -> Result<(ProbSequence, BoundingBox)> {
    let bbox = match det {
        Some(d) if p.crop => Some(detect_sequence(d, seq)?),
        _ => None,
    };
    let region = crop_region(seq, bbox.as_ref(), p)?;
    let input = network_input(seq, &region, net.config().input_size)?;
    let probs = net.forward_sequence(&input)?;
    let (h, w) = seq.dims();
    let full = probs
        .probs()
        .iter()
        .map(|q| {
            let back = resize_image(q, region.height().max(2), region.width().max(2))?;
            let back = back.window(0, 0, region.height(), region.width());
            Ok(paste(&back, &region, h, w, 0.0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ProbSequence::new(full)?, region))
}

pub fn refine_crf(probs: &ProbSequence, seq: &CineSequence, params: &CrfParams) -> Result<CrfOutput> {
    Ok(crf::refine(probs, seq, params)?)
}

pub fn refine_semflow(seq: &CineSequence, masks: &MaskSequence, cfg: &SfConfig) -> Result<SfOutput> {
    Ok(refine_sf(seq, masks, cfg)?)
}

pub fn evaluate(pred: &MaskSequence, s: &Subject, m: &MetricsConfig) -> Result<MetricReport> {
    Ok(evaluate_sequence(pred, &s.masks, &m.apd_options(s.seq.pixel_spacing_mm()), &s.id)?)
}

pub fn evaluate_all(label: &str, preds: &[(MaskSequence, &Subject)], m: &MetricsConfig) -> Result<DatasetReport> {
    let reports = preds.iter().map(|(p, s)| evaluate(p, s, m)).collect::<Result<Vec<_>>>()?;
    Ok(DatasetReport::new(label, reports))
}
