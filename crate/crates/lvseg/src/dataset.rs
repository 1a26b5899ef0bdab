//! On-disk datasets: a JSON manifest next to per-frame PGM files.
//!
//! ```json
//! {"subjects":[{"id":"subject-000","twin_pair":"pair-000","spacing_mm":[1.5,1.5],
//!   "frames":["subject-000/frame-000.pgm"],"masks":["subject-000/mask-000.pgm"],
//!   "split":"train"}]}
//! ```
//!
//! Paths are relative to the manifest's directory. `split` is optional; when
//! no subject carries one the split is drawn with [`DatasetSplit::partition`].

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lvseg_core::sequence::SplitName;
use lvseg_core::synth::SynthSubject;
use lvseg_core::{CineSequence, DatasetSplit, MaskSequence};
use serde::{Deserialize, Serialize};

use crate::pgm;

/// Seed of the fallback partition for manifests without split fields.
pub const DEFAULT_SPLIT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubject {
    pub id: String,
    pub twin_pair: String,
    pub spacing_mm: (f64, f64),
    pub frames: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitName>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub twin_pair: String,
    pub seq: CineSequence,
    pub masks: MaskSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Subjects of one split in manifest order.
    pub fn of(&self, which: SplitName) -> Vec<&Subject> {
        let ids = self.split.of(which);
        self.subjects.iter().filter(|s| ids.contains(&s.id)).collect()
    }

    pub fn pairs(subjects: &[&Subject]) -> Vec<(CineSequence, MaskSequence)> {
        subjects.iter().map(|s| (s.seq.clone(), s.masks.clone())).collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    ensure!(!manifest.subjects.is_empty(), "manifest {} lists no subjects", manifest_path.display());
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        ensure!(!s.frames.is_empty(), "subject {} has no frames", s.id);
        ensure!(s.frames.len() == s.masks.len(), "subject {} lists {} frames and {} masks", s.id, s.frames.len(), s.masks.len());
        ensure!(subjects.iter().all(|o: &Subject| o.id != s.id), "subject {} listed twice", s.id);
        let frames = s.frames.iter().map(|p| pgm::read_image(&root.join(p))).collect::<Result<Vec<_>>>()?;
        let masks = s.masks.iter().map(|p| pgm::read_mask(&root.join(p))).collect::<Result<Vec<_>>>()?;
        let seq = CineSequence::new(frames, s.spacing_mm, s.id.clone()).with_context(|| format!("subject {}", s.id))?;
        let masks = MaskSequence::new(masks).with_context(|| format!("subject {}", s.id))?;
        ensure!(masks.matches(&seq), "masks of subject {} do not match its frames", s.id);
        subjects.push(Subject { id: s.id.clone(), twin_pair: s.twin_pair.clone(), seq, masks });
    }
    let tagged = manifest.subjects.iter().filter(|s| s.split.is_some()).count();
    let split = if tagged == 0 {
        let ids: Vec<_> = manifest.subjects.iter().map(|s| (s.id.clone(), s.twin_pair.clone())).collect();
        DatasetSplit::partition(&ids, DEFAULT_SPLIT_SEED)?
    } else if tagged == manifest.subjects.len() {
        let assign: Vec<_> = manifest.subjects.iter().map(|s| (s.id.clone(), s.twin_pair.clone(), s.split.unwrap())).collect();
        DatasetSplit::from_assignments(&assign).with_context(|| format!("manifest {}", manifest_path.display()))?
    } else {
        bail!("manifest {}: either every subject or none carries a split", manifest_path.display());
    };
    Ok(Dataset { subjects, split })
}

/// Writes frames, masks and `manifest.json` under `dir`; returns the written
/// paths relative to `dir`, manifest last.
pub fn write_dataset(dir: &Path, subjects: &[SynthSubject], split: &DatasetSplit) -> Result<Vec<PathBuf>> {
    let mut manifest = Manifest::default();
    let mut written = Vec::new();
    for s in subjects {
        fs::create_dir_all(dir.join(&s.id))?;
        let mut entry = ManifestSubject {
            id: s.id.clone(),
            twin_pair: s.twin_pair.clone(),
            spacing_mm: s.sample.seq.pixel_spacing_mm(),
            frames: Vec::new(),
            masks: Vec::new(),
            split: [SplitName::Train, SplitName::Validation, SplitName::Test].into_iter().find(|&w| split.of(w).contains(&s.id)),
        };
        for (t, (f, m)) in s.sample.seq.frames().iter().zip(s.sample.masks.masks()).enumerate() {
            let fp = PathBuf::from(&s.id).join(format!("frame-{:03}.pgm", t));
            let mp = PathBuf::from(&s.id).join(format!("mask-{:03}.pgm", t));
            pgm::write_image(&dir.join(&fp), f)?;
            pgm::write_mask(&dir.join(&mp), m)?;
            written.push(fp.clone());
            written.push(mp.clone());
            entry.frames.push(fp);
            entry.masks.push(mp);
        }
        manifest.subjects.push(entry);
    }
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", mpath.display()))?;
    written.push(PathBuf::from("manifest.json"));
    Ok(written)
}
