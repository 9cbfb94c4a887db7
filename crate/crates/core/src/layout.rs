//! On-disk layout of a subject directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Files of one subject under `root/<id>/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPaths {
    pub id: String,
    pub dir: PathBuf,
}

impl SubjectPaths {
    pub fn new(root: &Path, id: &str) -> SubjectPaths {
        SubjectPaths {
            id: id.to_string(),
            dir: root.join(id),
        }
    }

    pub fn mprage(&self) -> PathBuf {
        self.dir.join("mprage.nii.gz")
    }

    pub fn wmn(&self) -> PathBuf {
        self.dir.join("wmn.nii.gz")
    }

    pub fn labels(&self) -> PathBuf {
        self.dir.join("labels.nii.gz")
    }

    pub fn brain_mask(&self) -> PathBuf {
        self.dir.join("brain_mask.nii.gz")
    }

    pub fn sidecar(&self) -> PathBuf {
        self.dir.join("phantom.json")
    }

    /// WMn synthesized by the SCS pipeline.
    pub fn synthesized(&self) -> PathBuf {
        self.dir.join("wmn_syn.nii.gz")
    }

    /// Predicted labels restricted to the predicted thalamus.
    pub fn gated_labels(&self) -> PathBuf {
        self.dir.join("labels_gated.nii.gz")
    }

    pub fn thalamus(&self) -> PathBuf {
        self.dir.join("thalamus.nii.gz")
    }
}

/// Lists subject directories (those holding an MPRAGE volume), sorted by id.
pub fn list_subjects(root: &Path) -> std::io::Result<Vec<String>> {
    list_with(root, |p| p.mprage())
}

/// Lists subject directories holding a label map, sorted by id.
pub fn list_labeled(root: &Path) -> std::io::Result<Vec<String>> {
    list_with(root, |p| p.labels())
}

fn list_with(root: &Path, file: impl Fn(&SubjectPaths) -> PathBuf) -> std::io::Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let id = entry.file_name().to_string_lossy().into_owned();
            if file(&SubjectPaths::new(root, &id)).exists() {
                ids.push(id);
            }
        }
    }
    ids.sort();
    Ok(ids)
}
