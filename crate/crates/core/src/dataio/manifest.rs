use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{read_volume, write_volume, MpvFile, PairedCase};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub arterial: PathBuf,
    pub venous: PathBuf,
    pub labels: PathBuf,
}

/// Ordered cases. Relative paths resolve against `root`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaseManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CaseManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.case_id.is_empty() || e.case_id.contains(['\t', '\n']) {
                return Err(Error::config(format!("invalid case id {:?}", e.case_id)));
            }
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::config(format!("duplicate case id {:?}", e.case_id)));
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.case_id,
                e.arterial.display(),
                e.venous.display(),
                e.labels.display()
            ));
        }
        s
    }

    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.is_empty() {
                let f: Vec<&str> = body.split('\t').collect();
                if f.len() != 4 {
                    return Err(Error::format(
                        offset,
                        format!("manifest line needs 4 tab-separated fields, got {}", f.len()),
                    ));
                }
                entries.push(ManifestEntry {
                    case_id: f[0].to_string(),
                    arterial: f[1].into(),
                    venous: f[2].into(),
                    labels: f[3].into(),
                });
            }
            offset += line.len();
        }
        Self::new(root, entries)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CaseManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    CaseManifest::parse(root, &text)
}

pub fn write_manifest(m: &CaseManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_case(m: &CaseManifest, index: usize) -> Result<PairedCase> {
    let e = m
        .entries
        .get(index)
        .ok_or_else(|| Error::config(format!("case index {index} out of range")))?;
    let arterial = read_volume(m.resolve(&e.arterial))?.into_volume()?;
    let venous = read_volume(m.resolve(&e.venous))?.into_volume()?;
    let labels = read_volume(m.resolve(&e.labels))?.into_labels()?;
    PairedCase::new(e.case_id.clone(), arterial, venous, labels)
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Writes every case as three MPV files plus `manifest.tsv` under `dir`.
pub fn write_corpus(cases: &[PairedCase], dir: impl AsRef<Path>) -> Result<CaseManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cases.len());
    for c in cases {
        let e = ManifestEntry {
            case_id: c.case_id.clone(),
            arterial: format!("{}_arterial.mpv", c.case_id).into(),
            venous: format!("{}_venous.mpv", c.case_id).into(),
            labels: format!("{}_labels.mpv", c.case_id).into(),
        };
        write_volume(&MpvFile::from(c.arterial.clone()), dir.join(&e.arterial))?;
        write_volume(&MpvFile::from(c.venous.clone()), dir.join(&e.venous))?;
        write_volume(&MpvFile::from(c.labels.clone()), dir.join(&e.labels))?;
        entries.push(e);
    }
    let m = CaseManifest::new(dir, entries)?;
    write_manifest(&m, dir.join(MANIFEST_FILE))?;
    Ok(m)
}

/// Every case of the manifest, in order.
pub fn load_all(m: &CaseManifest) -> Result<Vec<PairedCase>> {
    (0..m.len()).map(|i| load_case(m, i)).collect()
}
