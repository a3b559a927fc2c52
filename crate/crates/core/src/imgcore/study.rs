use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{load_mask, load_volume, ImageError, Mask, Volume};

/// MRI sequence. The declaration order is the canonical channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
    DWI,
    GED1,
    GED2,
    GED3,
    GED4,
}

impl Modality {
    pub const ALL: [Modality; 7] = [
        Modality::T1,
        Modality::T2,
        Modality::DWI,
        Modality::GED1,
        Modality::GED2,
        Modality::GED3,
        Modality::GED4,
    ];

    /// The registration reference, present in every study.
    pub const REFERENCE: Modality = Modality::GED4;

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::DWI => "DWI",
            Modality::GED1 => "GED1",
            Modality::GED2 => "GED2",
            Modality::GED3 => "GED3",
            Modality::GED4 => "GED4",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ImageError::Manifest(format!("unknown modality {s:?}")))
    }
}

/// Which channel set the classifier sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastMode {
    /// T1, T2, DWI.
    #[default]
    NonContrast,
    /// T1, T2, DWI, GED1..GED4.
    Contrast,
}

impl ContrastMode {
    pub fn channels(self) -> &'static [Modality] {
        match self {
            ContrastMode::NonContrast => &Modality::ALL[..3],
            ContrastMode::Contrast => &Modality::ALL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ContrastMode::NonContrast => "noncontrast",
            ContrastMode::Contrast => "contrast",
        }
    }
}

impl fmt::Display for ContrastMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContrastMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "noncontrast" | "non-contrast" => Ok(ContrastMode::NonContrast),
            "contrast" => Ok(ContrastMode::Contrast),
            other => Err(format!("unknown contrast mode {other:?}")),
        }
    }
}

/// Fibrosis stage 1..=4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Stage(u8);

impl Stage {
    pub fn new(stage: u8) -> Result<Self, ImageError> {
        if (1..=4).contains(&stage) {
            Ok(Self(stage))
        } else {
            Err(ImageError::Manifest(format!("stage {stage} outside 1..4")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Positive class of cirrhosis detection (S4 vs S1-3).
    pub fn is_cirrhosis(self) -> bool {
        self.0 == 4
    }

    /// Positive class of substantial fibrosis detection (S2-4 vs S1).
    pub fn is_substantial(self) -> bool {
        self.0 >= 2
    }
}

impl TryFrom<u8> for Stage {
    type Error = ImageError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Stage::new(v)
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.0
    }
}

/// One subject: modality volumes keyed in canonical order, plus optional
/// organ mask and stage label.
#[derive(Clone, Debug)]
pub struct Study {
    pub subject_id: String,
    pub modalities: BTreeMap<Modality, Volume>,
    pub mask: Option<Mask>,
    pub stage: Option<Stage>,
}

impl Study {
    pub fn new(
        subject_id: impl Into<String>,
        modalities: BTreeMap<Modality, Volume>,
        mask: Option<Mask>,
        stage: Option<Stage>,
    ) -> Result<Self, ImageError> {
        let subject_id = subject_id.into();
        if !modalities.contains_key(&Modality::REFERENCE) {
            return Err(ImageError::Manifest(format!(
                "subject {subject_id}: GED4 is required in every study"
            )));
        }
        Ok(Self { subject_id, modalities, mask, stage })
    }

    pub fn reference(&self) -> &Volume {
        &self.modalities[&Modality::REFERENCE]
    }

    pub fn get(&self, m: Modality) -> Option<&Volume> {
        self.modalities.get(&m)
    }
}

/// Manifest entry as stored on disk. Paths are relative to the manifest's
/// directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub modalities: BTreeMap<String, PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_manifest_records(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>, ImageError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ImageError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ImageError::Manifest(format!("{}: {e}", path.display())))
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<(), ImageError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(records)
        .map_err(|e| ImageError::Manifest(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| ImageError::io(path, e))
}

impl ManifestRecord {
    /// Load the referenced files into a [`Study`].
    pub fn load(&self, base: &Path) -> Result<Study, ImageError> {
        let stage = self.stage.map(Stage::new).transpose().map_err(|e| {
            ImageError::Manifest(format!("subject {}: {}", self.subject_id, e.root()))
        })?;
        let mut modalities = BTreeMap::new();
        for (name, p) in &self.modalities {
            let m: Modality = name.parse()?;
            if modalities.insert(m, load_volume(resolve(base, p))?).is_some() {
                return Err(ImageError::Manifest(format!(
                    "subject {}: modality {m} listed twice",
                    self.subject_id
                )));
            }
        }
        let mask = self.mask.as_ref().map(|p| load_mask(resolve(base, p))).transpose()?;
        Study::new(self.subject_id.clone(), modalities, mask, stage)
    }

    /// Validate the record without reading image files.
    pub fn check(&self) -> Result<(), ImageError> {
        if let Some(s) = self.stage {
            Stage::new(s)?;
        }
        let mut has_reference = false;
        for name in self.modalities.keys() {
            has_reference |= name.parse::<Modality>()? == Modality::REFERENCE;
        }
        if !has_reference {
            return Err(ImageError::Manifest(format!(
                "subject {}: GED4 is required in every study",
                self.subject_id
            )));
        }
        Ok(())
    }
}

/// Read a manifest and load every study it lists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Study>, ImageError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let records = read_manifest_records(path)?;
    for r in &records {
        r.check()?;
    }
    records.iter().map(|r| r.load(base)).collect()
}
