//! Per-scan clinical metadata, stored as comma-separated text.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const MANIFEST_HEADER: [&str; 8] = [
    "subject_id",
    "eye",
    "age",
    "sex",
    "instance",
    "years_to_diagnosis",
    "label",
    "image_path",
];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("missing column `{0}` in manifest header")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    BadField { line: usize, message: String },
    #[error("line {line}: label {label} inconsistent with years_to_diagnosis {years:?}")]
    LabelYearsMismatch {
        line: usize,
        label: Label,
        years: Option<f64>,
    },
    #[error("duplicate record ({subject_id}, {eye}, {instance})")]
    Duplicate {
        subject_id: String,
        eye: Eye,
        instance: u8,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Eye {
    L,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sex {
    F,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Cn,
    Ad,
}

impl Label {
    /// 1 for AD (the positive class), 0 for CN.
    pub fn as_index(self) -> usize {
        match self {
            Label::Cn => 0,
            Label::Ad => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Ad
        } else {
            Label::Cn
        }
    }
}

macro_rules! text_enum {
    ($ty:ty, $($variant:path => $text:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($text => Ok($variant),)+
                    other => Err(format!("invalid {} `{}`", stringify!($ty), other)),
                }
            }
        }
    };
}

text_enum!(Eye, Eye::L => "L", Eye::R => "R");
text_enum!(Sex, Sex::F => "F", Sex::M => "M");
text_enum!(Label, Label::Ad => "AD", Label::Cn => "CN");

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub eye: Eye,
    pub age: u32,
    pub sex: Sex,
    pub instance: u8,
    /// `None` for controls.
    pub years_to_diagnosis: Option<f64>,
    pub label: Label,
    pub image_path: String,
}

impl SubjectRecord {
    pub fn key(&self) -> (&str, Eye, u8) {
        (&self.subject_id, self.eye, self.instance)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<SubjectRecord>,
}

impl Manifest {
    /// Validates invariants; used by the parser and by code that builds
    /// manifests programmatically.
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self, ManifestError> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            let line = i + 2;
            validate_record(r, line)?;
            if !seen.insert((r.subject_id.clone(), r.eye, r.instance)) {
                return Err(ManifestError::Duplicate {
                    subject_id: r.subject_id.clone(),
                    eye: r.eye,
                    instance: r.instance,
                });
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Distinct subject ids, sorted.
    pub fn subjects(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.subject_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        for r in &self.records {
            let years = r.years_to_diagnosis.map(|y| y.to_string()).unwrap_or_default();
            w.write_record([
                r.subject_id.as_str(),
                &r.eye.to_string(),
                &r.age.to_string(),
                &r.sex.to_string(),
                &r.instance.to_string(),
                &years,
                &r.label.to_string(),
                &r.image_path,
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_manifest(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn validate_record(r: &SubjectRecord, line: usize) -> Result<(), ManifestError> {
    if !(18..=110).contains(&r.age) {
        return Err(ManifestError::BadField {
            line,
            message: format!("age {} outside 18..=110", r.age),
        });
    }
    if r.instance > 1 {
        return Err(ManifestError::BadField {
            line,
            message: format!("instance {} not in {{0,1}}", r.instance),
        });
    }
    if r.subject_id.is_empty() {
        return Err(ManifestError::BadField {
            line,
            message: "empty subject_id".into(),
        });
    }
    if let Some(y) = r.years_to_diagnosis {
        if !y.is_finite() || y < 0.0 {
            return Err(ManifestError::BadField {
                line,
                message: format!("years_to_diagnosis {y} must be finite and non-negative"),
            });
        }
    }
    if (r.label == Label::Ad) != r.years_to_diagnosis.is_some() {
        return Err(ManifestError::LabelYearsMismatch {
            line,
            label: r.label,
            years: r.years_to_diagnosis,
        });
    }
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Manifest, ManifestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut col = [0usize; 8];
    for (slot, name) in col.iter_mut().zip(MANIFEST_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or(ManifestError::MissingColumn(name))?;
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |k: usize| row.get(col[k]).unwrap_or("");
        let bad = |message: String| ManifestError::BadField { line, message };

        let age = field(2)
            .parse::<u32>()
            .map_err(|_| bad(format!("non-numeric age `{}`", field(2))))?;
        let instance = field(4)
            .parse::<u8>()
            .map_err(|_| bad(format!("non-numeric instance `{}`", field(4))))?;
        let years = match field(5) {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|_| bad(format!("non-numeric years_to_diagnosis `{s}`")))?,
            ),
        };
        records.push(SubjectRecord {
            subject_id: field(0).to_string(),
            eye: field(1).parse().map_err(bad)?,
            age,
            sex: field(3).parse().map_err(bad)?,
            instance,
            years_to_diagnosis: years,
            label: field(6).parse().map_err(bad)?,
            image_path: field(7).to_string(),
        });
    }
    Manifest::new(records)
}
