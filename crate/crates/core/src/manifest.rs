//! Utterance manifests: one whitespace-separated record per line,
//! `speaker utt attack label path`. The challenge protocol layout
//! `speaker utt - attack label` (no path) is accepted too, in which case the
//! audio is looked up as `<utt>.wav` next to the manifest.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::loss::{BONAFIDE, SPOOF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => BONAFIDE,
            Label::Spoof => SPOOF,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            BONAFIDE => Some(Label::Bonafide),
            SPOOF => Some(Label::Spoof),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(format!("bad label `{other}` (expected bonafide or spoof)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub speaker: String,
    pub utt: String,
    /// Attack or artifact id; `-` for bonafide.
    pub attack: String,
    pub label: Label,
    /// Audio path as written in the manifest (relative paths resolve
    /// against the manifest's directory).
    pub path: PathBuf,
}

impl ManifestRecord {
    pub fn new(speaker: &str, utt: &str, attack: &str, label: Label, path: impl Into<PathBuf>) -> Result<Self> {
        let r = Self { speaker: speaker.into(), utt: utt.into(), attack: attack.into(), label, path: path.into() };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<()> {
        let bona_dash = (self.label == Label::Bonafide) == (self.attack == "-");
        if !bona_dash {
            return Err(Error::Data(format!(
                "utterance {}: label {} with attack id `{}` (bonafide requires `-` and spoof forbids it)",
                self.utt, self.label, self.attack
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingAudio {
    Ignore,
    Error,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self { records, base_dir: base_dir.into() };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.utt.as_str()) {
                return Err(Error::Data(format!("duplicate utterance id `{}`", r.utt)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn audio_path(&self, r: &ManifestRecord) -> PathBuf {
        if r.path.is_absolute() {
            r.path.clone()
        } else {
            self.base_dir.join(&r.path)
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn parse_str(text: &str, source: &Path, base_dir: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Manifest { path: source.to_path_buf(), line: i + 1, msg };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 5 {
                return Err(at(format!("expected 5 columns, found {}", cols.len())));
            }
            // protocol layout: speaker utt - attack label
            let (attack, label, path) = match cols[4].parse::<Label>() {
                Ok(label) if cols[2] == "-" => (cols[3], label, PathBuf::from(format!("{}.wav", cols[1]))),
                _ => {
                    let label = cols[3].parse::<Label>().map_err(at)?;
                    (cols[2], label, PathBuf::from(cols[4]))
                }
            };
            let rec = ManifestRecord { speaker: cols[0].into(), utt: cols[1].into(), attack: attack.into(), label, path };
            rec.check().map_err(|e| at(e.to_string()))?;
            if !seen.insert(rec.utt.clone()) {
                return Err(at(format!("duplicate utterance id `{}`", rec.utt)));
            }
            records.push(rec);
        }
        Ok(Self { records, base_dir: base_dir.to_path_buf() })
    }

    pub fn load(path: impl AsRef<Path>, missing: MissingAudio) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse_str(&text, path, &base)?;
        if missing == MissingAudio::Error {
            for r in &m.records {
                let p = m.audio_path(r);
                if !p.exists() {
                    return Err(Error::Data(format!("audio for `{}` not found at {}", r.utt, p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.speaker, r.utt, r.attack, r.label, r.path.display()));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(io_err(format!("writing {}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_layout_is_accepted() {
        let m = Manifest::parse_str("LA_0079 LA_T_1138215 - - bonafide\nLA_0079 LA_T_1271820 - A01 spoof\n", Path::new("p"), Path::new("/d")).unwrap();
        assert_eq!(m.records[1].attack, "A01");
        assert_eq!(m.records[1].label, Label::Spoof);
        assert_eq!(m.audio_path(&m.records[0]), PathBuf::from("/d/LA_T_1138215.wav"));
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let m = Manifest::parse_str("# header\n\nspk u1 - bonafide a.wav\n", Path::new("p"), Path::new("")).unwrap();
        assert_eq!(m.len(), 1);
    }
}
