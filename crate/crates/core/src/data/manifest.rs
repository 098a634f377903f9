//! JSON dataset manifests and validated in-memory datasets.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::numerics::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Speech,
    Nonspeech,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityLevel {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_v: usize,
    pub d_a: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub subject_id: String,
    pub task_tag: TaskTag,
    pub video_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    pub diagnosis: usize,
    pub severity_level: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_score: Option<f64>,
}

fn default_diagnosis_labels() -> Vec<String> {
    ["HC", "ALS", "Stroke"].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_diagnosis_labels")]
    pub diagnosis_labels: Vec<String>,
    pub severity_levels: Vec<SeverityLevel>,
    pub dims: Dims,
    pub clips: Vec<ClipRecord>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.diagnosis_labels.len()
    }

    pub fn num_severity_levels(&self) -> usize {
        self.severity_levels.len()
    }

    pub fn severity_scores(&self) -> Vec<f64> {
        self.severity_levels.iter().map(|l| l.score).collect()
    }

    /// Checks the label spaces themselves (not the clips).
    pub fn validate_label_spaces(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.diagnosis_labels.len() < 2 {
            problems.push(format!(
                "need at least 2 diagnosis labels, got {}",
                self.diagnosis_labels.len()
            ));
        }
        if self.severity_levels.len() < 2 {
            problems.push(format!(
                "need at least 2 severity levels, got {}",
                self.severity_levels.len()
            ));
        }
        for w in self.severity_levels.windows(2) {
            if !(w[1].score > w[0].score) {
                problems.push(format!(
                    "severity scores must be strictly increasing: {} ({}) then {} ({})",
                    w[0].name, w[0].score, w[1].name, w[1].score
                ));
            }
        }
        if self.dims.d_v == 0 || self.dims.d_a == 0 {
            problems.push("dims must be positive".into());
        }
        problems
    }
}

/// One synchronized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingClip {
    pub clip_id: String,
    pub subject_id: String,
    pub task_tag: TaskTag,
    pub video: Sequence,
    pub audio: Option<Sequence>,
    pub diagnosis: usize,
    pub severity_level: usize,
    pub severity_score: Option<f64>,
}

impl ClipRecord {
    /// The record [`Dataset::save`] writes for `clip`.
    pub fn relative_to(clip: &EmbeddingClip) -> ClipRecord {
        ClipRecord {
            clip_id: clip.clip_id.clone(),
            subject_id: clip.subject_id.clone(),
            task_tag: clip.task_tag,
            video_path: format!("video/{}.dve", clip.clip_id),
            audio_path: clip.audio.as_ref().map(|_| format!("audio/{}.dve", clip.clip_id)),
            diagnosis: clip.diagnosis,
            severity_level: clip.severity_level,
            severity_score: clip.severity_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub clips: Vec<EmbeddingClip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out: Vec<&str> = self
            .clips
            .iter()
            .map(|c| c.subject_id.as_str())
            .filter(|s| seen.insert(*s))
            .collect();
        out.sort_unstable();
        out
    }

    /// Clip counts per diagnosis class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.manifest.num_classes()];
        for c in &self.clips {
            counts[c.diagnosis] += 1;
        }
        counts
    }

    /// Writes containers under `dir/video` and `dir/audio` plus
    /// `dir/manifest.json`; the manifest's clip records are regenerated with
    /// relative paths.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for sub in ["video", "audio"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut manifest = self.manifest.clone();
        manifest.clips = self.clips.iter().map(ClipRecord::relative_to).collect();
        for (clip, rec) in self.clips.iter().zip(&manifest.clips) {
            write_container(&clip.video, dir.join(&rec.video_path))?;
            if let (Some(a), Some(p)) = (&clip.audio, &rec.audio_path) {
                write_container(a, dir.join(p))?;
            }
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Reads a manifest and every container it references, validating all clips
/// and reporting every problem found rather than only the first.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut problems = manifest.validate_label_spaces();
    let mut clips = Vec::with_capacity(manifest.clips.len());
    let mut ids = HashSet::new();
    for rec in &manifest.clips {
        let id = &rec.clip_id;
        if !ids.insert(id.as_str()) {
            problems.push(format!("{id}: duplicate clip_id"));
        }
        if rec.diagnosis >= manifest.num_classes() {
            problems.push(format!(
                "{id}: diagnosis {} out of range (0..{})",
                rec.diagnosis,
                manifest.num_classes()
            ));
        }
        if rec.severity_level >= manifest.num_severity_levels() {
            problems.push(format!(
                "{id}: severity_level {} out of range (0..{})",
                rec.severity_level,
                manifest.num_severity_levels()
            ));
        }
        let video = load_stream(root, id, "video", &rec.video_path, manifest.dims.d_v, &mut problems);
        let audio = rec
            .audio_path
            .as_ref()
            .and_then(|p| load_stream(root, id, "audio", p, manifest.dims.d_a, &mut problems));
        if let Some(video) = video {
            clips.push(EmbeddingClip {
                clip_id: rec.clip_id.clone(),
                subject_id: rec.subject_id.clone(),
                task_tag: rec.task_tag,
                video,
                audio,
                diagnosis: rec.diagnosis,
                severity_level: rec.severity_level,
                severity_score: rec.severity_score,
            });
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(Dataset { manifest, clips })
}

fn load_stream(
    root: &Path,
    clip_id: &str,
    stream: &str,
    rel: &str,
    expected_dim: usize,
    problems: &mut Vec<String>,
) -> Option<Sequence> {
    let path = root.join(rel);
    match read_container(&path) {
        Ok(seq) => {
            let mut ok = true;
            if seq.dim() != expected_dim {
                problems.push(format!(
                    "{clip_id}: {stream} dimension inconsistency: manifest d={expected_dim}, container d={}",
                    seq.dim()
                ));
                ok = false;
            }
            if seq.steps() < 2 {
                problems.push(format!("{clip_id}: {stream} has {} steps, need >= 2", seq.steps()));
                ok = false;
            }
            ok.then_some(seq)
        }
        Err(e) => {
            problems.push(format!("{clip_id}: cannot read {stream} container {}: {e}", path.display()));
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels() -> Vec<SeverityLevel> {
        vec![
            SeverityLevel { name: "Mild".into(), score: 1.0 },
            SeverityLevel { name: "Moderate".into(), score: 2.0 },
            SeverityLevel { name: "Severe".into(), score: 3.0 },
        ]
    }

    fn manifest(clips: Vec<ClipRecord>, d_v: usize) -> Manifest {
        Manifest {
            diagnosis_labels: default_diagnosis_labels(),
            severity_levels: levels(),
            dims: Dims { d_v, d_a: 2 },
            clips,
        }
    }

    fn record(id: &str, video: &str) -> ClipRecord {
        ClipRecord {
            clip_id: id.into(),
            subject_id: "s1".into(),
            task_tag: TaskTag::Speech,
            video_path: video.into(),
            audio_path: None,
            diagnosis: 1,
            severity_level: 0,
            severity_score: None,
        }
    }

    fn write_manifest(dir: &Path, m: &Manifest) -> PathBuf {
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string(m).unwrap()).unwrap();
        p
    }

    #[test]
    fn empty_clip_list_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &manifest(vec![], 3));
        let ds = load_dataset(p).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.manifest.diagnosis_labels, vec!["HC", "ALS", "Stroke"]);
    }

    #[test]
    fn missing_container_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &manifest(vec![record("clip-42", "nope.dve")], 3));
        match load_dataset(p) {
            Err(Error::Validation(v)) => assert!(v.iter().any(|m| m.contains("clip-42"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_dims_are_inconsistent() {
        let dir = tempfile::tempdir().unwrap();
        write_container(&Sequence::from_vec(2, 3, vec![0.0; 6]).unwrap(), dir.path().join("a.dve")).unwrap();
        write_container(&Sequence::from_vec(2, 4, vec![0.0; 8]).unwrap(), dir.path().join("b.dve")).unwrap();
        let m = manifest(vec![record("a", "a.dve"), record("b", "b.dve")], 3);
        match load_dataset(write_manifest(dir.path(), &m)) {
            Err(Error::Validation(v)) => {
                assert_eq!(v.len(), 1);
                assert!(v[0].contains("dimension inconsistency") && v[0].starts_with("b:"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn labels_out_of_range_and_bad_scale_are_reported_together() {
        let dir = tempfile::tempdir().unwrap();
        write_container(&Sequence::from_vec(2, 3, vec![0.0; 6]).unwrap(), dir.path().join("a.dve")).unwrap();
        let mut rec = record("a", "a.dve");
        rec.diagnosis = 7;
        let mut m = manifest(vec![rec], 3);
        m.severity_levels[2].score = 1.5;
        match load_dataset(write_manifest(dir.path(), &m)) {
            Err(Error::Validation(v)) => {
                assert!(v.iter().any(|p| p.contains("diagnosis 7")));
                assert!(v.iter().any(|p| p.contains("strictly increasing")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn task_tag_serializes_lowercase() {
        assert_eq!(serde_json::to_string(&TaskTag::Nonspeech).unwrap(), "\"nonspeech\"");
    }
}
