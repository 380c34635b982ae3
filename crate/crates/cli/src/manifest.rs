//! JSON Lines corpus manifests. Each line is one sample: an id, its
//! transcript, and exactly one input source — a feature file path (relative
//! to the manifest) or a synthetic task spec replayed at the default
//! geometry. Pseudo-labelled manifests carry three extra fields.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use distilkit_core::corpus::{PseudoSample, Sample};
use distilkit_core::signal::{synth_task, SynthSpec, TaskKind};

use crate::report::atomic_write;
use crate::validation;

/// Replayable synthetic input: regenerated at load time with the default
/// [`SynthSpec`] geometry, so the pair (seed, len) pins the features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskJson {
    pub kind: String,
    pub seed: u64,
    pub len: usize,
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pl_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncated: Option<bool>,
}

impl ManifestEntry {
    fn validate(&self) -> anyhow::Result<()> {
        match (&self.features, &self.task) {
            (Some(_), Some(_)) => Err(validation(format!(
                "sample {}: both features and task given",
                self.id
            ))),
            (None, None) => Err(validation(format!(
                "sample {}: needs exactly one of features or task",
                self.id
            ))),
            _ => {
                let pseudo = [
                    self.pseudo_text.is_some(),
                    self.pl_wer.is_some(),
                    self.truncated.is_some(),
                ];
                if pseudo.iter().any(|&p| p) && !pseudo.iter().all(|&p| p) {
                    return Err(validation(format!(
                        "sample {}: pseudo-label fields must appear together",
                        self.id
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn is_pseudo_labelled(&self) -> bool {
        self.pseudo_text.is_some()
    }

    /// Loads or regenerates the sample's features. `base` is the manifest's
    /// directory; feature paths resolve against it.
    pub fn realize(&self, base: &Path) -> anyhow::Result<Sample> {
        let features = match (&self.features, &self.task) {
            (Some(rel), None) => crate::featfile::read_features(&base.join(rel))?,
            (None, Some(task)) => {
                let kind = TaskKind::parse(&task.kind)?;
                let (features, _) =
                    synth_task(kind, task.seed, task.len, &SynthSpec::default())?;
                features
            }
            _ => unreachable!("validated on read"),
        };
        Ok(Sample { id: self.id.clone(), text: self.text.clone(), features })
    }

    /// Realizes a pseudo-labelled entry into a [`PseudoSample`].
    pub fn realize_pseudo(&self, base: &Path) -> anyhow::Result<PseudoSample> {
        let (Some(pseudo_text), Some(pl_wer), Some(truncated)) =
            (&self.pseudo_text, self.pl_wer, self.truncated)
        else {
            return Err(validation(format!(
                "sample {}: not pseudo-labelled (run pseudo-label first)",
                self.id
            )));
        };
        Ok(PseudoSample {
            sample: self.realize(base)?,
            pseudo_text: pseudo_text.clone(),
            pl_wer,
            truncated,
        })
    }

    /// Copies the pseudo-label fields of `p` onto this entry.
    pub fn with_pseudo(mut self, p: &PseudoSample) -> ManifestEntry {
        self.pseudo_text = Some(p.pseudo_text.clone());
        self.pl_wer = Some(p.pl_wer);
        self.truncated = Some(p.truncated);
        self
    }
}

/// Reads and validates a manifest; ids must be unique.
pub fn read_manifest(path: &Path) -> anyhow::Result<Vec<ManifestEntry>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            validation(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        entry.validate()?;
        if !seen.insert(entry.id.clone()) {
            return Err(validation(format!(
                "{}: duplicate sample id {}",
                path.display(),
                entry.id
            )));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> anyhow::Result<()> {
    let mut out = String::new();
    for entry in entries {
        out.push_str(&serde_json::to_string(entry)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// The directory a manifest's feature paths resolve against.
pub fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

/// Realizes every entry, in order.
pub fn realize_all(path: &Path, entries: &[ManifestEntry]) -> anyhow::Result<Vec<Sample>> {
    let base = base_dir(path);
    entries.iter().map(|e| e.realize(&base)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task_entry(id: &str, text: &str, seed: u64, len: usize) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            text: text.into(),
            features: None,
            task: Some(TaskJson { kind: "copy".into(), seed, len }),
            pseudo_text: None,
            pl_wer: None,
            truncated: None,
        }
    }

    #[test]
    fn round_trip_preserves_entries_and_optional_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries = vec![
            task_entry("a", "t0 t1", 1, 2),
            task_entry("b", "t2", 2, 1).with_pseudo(&PseudoSample {
                sample: Sample {
                    id: "b".into(),
                    text: "t2".into(),
                    features: synth_task(TaskKind::Copy, 2, 1, &SynthSpec::default())
                        .unwrap()
                        .0,
                },
                pseudo_text: "t3".into(),
                pl_wer: 1.0,
                truncated: false,
            }),
        ];
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);
        // Plain entries serialize without the optional keys at all.
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert!(!first.contains("pseudo_text") && !first.contains("features"));
    }

    #[test]
    fn task_realization_matches_synth_and_features_resolve_relative() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entry = task_entry("a", "irrelevant", 9, 4);
        let sample = entry.realize(&base_dir(&path)).unwrap();
        let (expect, _) = synth_task(TaskKind::Copy, 9, 4, &SynthSpec::default()).unwrap();
        assert_eq!(sample.features, expect);

        let (features, _) = synth_task(TaskKind::Copy, 3, 2, &SynthSpec::default()).unwrap();
        std::fs::create_dir_all(dir.path().join("feats")).unwrap();
        crate::featfile::write_features(&dir.path().join("feats/a.dwft"), &features)
            .unwrap();
        let entry = ManifestEntry {
            features: Some(PathBuf::from("feats/a.dwft")),
            task: None,
            ..task_entry("c", "t0 t0", 0, 2)
        };
        let sample = entry.realize(dir.path()).unwrap();
        assert_eq!(sample.features, features);
    }

    #[test]
    fn rejects_malformed_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");

        // Both sources.
        let mut both = task_entry("a", "x", 1, 1);
        both.features = Some(PathBuf::from("f.dwft"));
        write_manifest(&path, std::slice::from_ref(&both)).unwrap();
        assert!(read_manifest(&path).is_err());

        // Neither source.
        std::fs::write(&path, "{\"id\":\"a\",\"text\":\"x\"}\n").unwrap();
        assert!(read_manifest(&path).is_err());

        // Duplicate ids.
        let entries = vec![task_entry("a", "x", 1, 1), task_entry("a", "y", 2, 1)];
        write_manifest(&path, &entries).unwrap();
        assert!(read_manifest(&path).unwrap_err().to_string().contains("duplicate"));

        // Partial pseudo fields.
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"x\",\"task\":{\"kind\":\"copy\",\"seed\":1,\"len\":1},\"pl_wer\":0.5}\n",
        )
        .unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("together"));
        assert_eq!(crate::exit_code(&err), 2);
    }
}
