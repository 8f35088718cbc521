//! JSON-lines manifests: one song per line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tgcritic_core::annotate::MetadataRecord;
use tgcritic_core::model::Class;

use crate::input_error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: PathBuf,
    #[serde(default)]
    pub label: Option<Class>,
    #[serde(default)]
    pub label_source: Option<String>,
    #[serde(default)]
    pub metadata: Option<MetadataRecord>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| input_error(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| input_error(format!("{}:{}: {e}", path.display(), i + 1)))?;
            check_id(&entry.sample_id)?;
            if entries.iter().any(|o| o.sample_id == entry.sample_id) {
                return Err(input_error(format!("duplicate sample_id {:?}", entry.sample_id)));
            }
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(input_error(format!("manifest {} is empty", path.display())));
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.audio_path.is_absolute() {
            entry.audio_path.clone()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(&entry.audio_path)
        }
    }

    pub fn labels(&self) -> Result<Vec<Class>> {
        self.entries
            .iter()
            .map(|e| {
                e.label
                    .ok_or_else(|| input_error(format!("sample {:?} has no label", e.sample_id)))
            })
            .collect()
    }
}

/// Ids double as cache file names.
fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(input_error(format!("sample_id {id:?} must use only letters, digits, '-', '_' and '.'")))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_and_full_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"sample_id\":\"a\",\"audio_path\":\"a.wav\"}\n\n\
             {\"sample_id\":\"b\",\"audio_path\":\"/x/b.wav\",\"label\":\"I\",\"label_source\":\"manual\",\
             \"metadata\":{\"intonation_score\":50,\"rhythm_score\":60,\"likes\":3,\"comments\":1}}\n",
        )
        .unwrap();
        let m = Manifest::read(&p).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.audio_path(&m.entries[0]), dir.path().join("a.wav"));
        assert_eq!(m.audio_path(&m.entries[1]), PathBuf::from("/x/b.wav"));
        assert_eq!(m.entries[1].label, Some(Class::Inferior));
        assert!(m.labels().is_err());
    }

    #[test]
    fn rejects_bad_ids_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{\"sample_id\":\"../x\",\"audio_path\":\"a.wav\"}\n").unwrap();
        assert!(Manifest::read(&p).is_err());
        fs::write(&p, "{\"sample_id\":\"a\",\"audio_path\":\"a.wav\"}\n{\"sample_id\":\"a\",\"audio_path\":\"b.wav\"}\n").unwrap();
        assert!(Manifest::read(&p).is_err());
    }
}
