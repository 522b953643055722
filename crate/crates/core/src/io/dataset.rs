use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::annotations::{parse_cycle_annotations, AnnotationRecord};
use super::wav::load_wav;
use crate::audio::FrontendConfig;
use crate::error::{Error, Result};
use crate::train::LabeledDataset;

/// Where an entry's labels come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestTarget {
    /// Per-cycle annotation file.
    Annotations(PathBuf),
    /// One label for the whole recording (`label:<name>` in the manifest).
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub wav_path: PathBuf,
    pub target: ManifestTarget,
    pub patient_id: String,
    pub emr_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads a CSV with header `wav_path,annotation_path,patient_id[,emr_key]`.
    /// Relative paths are resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_reader(file, path, &base)
    }

    pub fn from_reader(reader: impl std::io::Read, origin: &Path, base: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let missing = |name: &str| Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            msg: format!("missing column {name:?}"),
        };
        let wav_col = col("wav_path").ok_or_else(|| missing("wav_path"))?;
        let ann_col = col("annotation_path").ok_or_else(|| missing("annotation_path"))?;
        let pid_col = col("patient_id").ok_or_else(|| missing("patient_id"))?;
        let emr_col = col("emr_key");

        let mut entries = Vec::new();
        let mut owners: HashMap<PathBuf, String> = HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line,
                msg,
            };
            let field = |i: usize| rec.get(i).unwrap_or("");
            let existing = |raw: &str, what: &str| -> Result<PathBuf> {
                if raw.is_empty() {
                    return Err(err(format!("empty {what}")));
                }
                let p = base.join(raw);
                if !p.is_file() {
                    return Err(err(format!("{what} {} does not exist", p.display())));
                }
                Ok(p)
            };
            let wav_path = existing(field(wav_col), "wav_path")?;
            let ann = field(ann_col);
            let target = match ann.strip_prefix("label:") {
                Some(name) if !name.trim().is_empty() => ManifestTarget::Label(name.trim().to_string()),
                Some(_) => return Err(err("empty inline label".into())),
                None => ManifestTarget::Annotations(existing(ann, "annotation_path")?),
            };
            let patient_id = field(pid_col).to_string();
            if patient_id.is_empty() {
                return Err(err("empty patient_id".into()));
            }
            if let Some(prev) = owners.insert(wav_path.clone(), patient_id.clone()) {
                if prev != patient_id {
                    return Err(err(format!(
                        "{} is listed under patients {prev:?} and {patient_id:?}",
                        wav_path.display()
                    )));
                }
            }
            let emr_key = emr_col.map(field).filter(|s| !s.is_empty()).map(str::to_string);
            entries.push(ManifestEntry {
                wav_path,
                target,
                patient_id,
                emr_key,
            });
        }
        Ok(Self { entries })
    }
}

/// How cycle flags or inline labels map to class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelScheme {
    /// normal / crackle / wheeze / both.
    Events,
    /// normal / adventitious.
    Binary,
    /// Recording-level classes given by name; only inline labels are accepted.
    Named(Vec<String>),
}

impl LabelScheme {
    pub fn class_names(&self) -> Vec<String> {
        match self {
            LabelScheme::Events => ["normal", "crackle", "wheeze", "both"].map(String::from).to_vec(),
            LabelScheme::Binary => ["normal", "adventitious"].map(String::from).to_vec(),
            LabelScheme::Named(names) => names.clone(),
        }
    }

    pub fn cycle_label(&self, rec: &AnnotationRecord) -> Option<usize> {
        let (c, w) = (rec.crackles, rec.wheezes);
        match self {
            LabelScheme::Events => Some(match (c, w) {
                (false, false) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (true, true) => 3,
            }),
            LabelScheme::Binary => Some(usize::from(c || w)),
            LabelScheme::Named(_) => None,
        }
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.class_names().iter().position(|n| n == name)
    }
}

impl FromStr for LabelScheme {
    type Err = Error;

    /// `events`, `binary`, or a comma-separated class list.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "events" => Ok(LabelScheme::Events),
            "binary" => Ok(LabelScheme::Binary),
            list => {
                let names: Vec<String> = list.split(',').map(|n| n.trim().to_string()).collect();
                if names.len() < 2 || names.iter().any(String::is_empty) {
                    return Err(Error::invalid(format!("label scheme {s:?} needs at least two class names")));
                }
                Ok(LabelScheme::Named(names))
            }
        }
    }
}

/// Where a clip came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipInfo {
    pub entry: usize,
    pub patient_id: String,
    pub begin_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone)]
pub struct EventDataset {
    pub dataset: LabeledDataset,
    pub clips: Vec<ClipInfo>,
    pub class_names: Vec<String>,
}

impl EventDataset {
    pub fn class_counts(&self) -> Vec<usize> {
        self.dataset.class_counts()
    }
}

/// Slices every recording into labelled per-cycle clips and featurizes them.
pub fn build_event_dataset(manifest: &Manifest, frontend: &FrontendConfig, scheme: &LabelScheme) -> Result<EventDataset> {
    let class_names = scheme.class_names();
    let mut signals = Vec::new();
    let mut clips = Vec::new();
    for (idx, entry) in manifest.entries.iter().enumerate() {
        let name = entry.wav_path.display().to_string();
        let audio = load_wav(&entry.wav_path)?;
        let sr = f64::from(audio.sample_rate());
        match &entry.target {
            ManifestTarget::Label(label) => {
                let y = scheme.label_index(label).ok_or_else(|| Error::Range {
                    entry: name.clone(),
                    msg: format!("label {label:?} is not one of {class_names:?}"),
                })?;
                clips.push(ClipInfo {
                    entry: idx,
                    patient_id: entry.patient_id.clone(),
                    begin_s: 0.0,
                    end_s: audio.duration_s(),
                });
                signals.push((audio, y));
            }
            ManifestTarget::Annotations(path) => {
                for rec in parse_cycle_annotations(path)? {
                    let y = scheme.cycle_label(&rec).ok_or_else(|| Error::Range {
                        entry: name.clone(),
                        msg: "a named label scheme needs inline labels, not cycle annotations".into(),
                    })?;
                    let start = (rec.begin_s * sr).round() as usize;
                    let end = (rec.end_s * sr).round() as usize;
                    if end > audio.len() {
                        return Err(Error::Range {
                            entry: name.clone(),
                            msg: format!(
                                "cycle [{}, {}] s ends past the recording ({:.3} s)",
                                rec.begin_s,
                                rec.end_s,
                                audio.duration_s()
                            ),
                        });
                    }
                    clips.push(ClipInfo {
                        entry: idx,
                        patient_id: entry.patient_id.clone(),
                        begin_s: rec.begin_s,
                        end_s: rec.end_s,
                    });
                    signals.push((audio.slice(start, end)?, y));
                }
            }
        }
    }
    let dataset = LabeledDataset::from_signals(&signals, frontend, class_names.len())?;
    Ok(EventDataset {
        dataset,
        clips,
        class_names,
    })
}
