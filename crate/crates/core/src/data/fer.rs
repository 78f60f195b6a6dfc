//! FER2013-style CSV ingestion and dataset directories.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::image::{GrayImage, PIXELS};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 7;
pub const CSV_HEADER: [&str; 3] = ["emotion", "pixels", "Usage"];

/// FER2013 release order.
pub const EMOTION_NAMES: [&str; NUM_CLASSES] =
    ["Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn usage_tag(self) -> &'static str {
        match self {
            Split::Train => "Training",
            Split::Val => "PublicTest",
            Split::Test => "PrivateTest",
        }
    }

    pub fn from_usage_tag(tag: &str) -> Option<Split> {
        match tag {
            "Training" => Some(Split::Train),
            "PublicTest" => Some(Split::Val),
            "PrivateTest" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("unknown split `{s}` (train|val|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: GrayImage,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub train: [usize; NUM_CLASSES],
    pub val: [usize; NUM_CLASSES],
    pub test: [usize; NUM_CLASSES],
}

impl ClassCounts {
    pub fn split(&self, split: Split) -> &[usize; NUM_CLASSES] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn total(&self, split: Split) -> usize {
        self.split(split).iter().sum()
    }
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledExample> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<LabeledExample> {
        self.examples.iter().filter(|e| e.split == split).cloned().collect()
    }

    pub fn class_distribution(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for e in &self.examples {
            let row = match e.split {
                Split::Train => &mut counts.train,
                Split::Val => &mut counts.val,
                Split::Test => &mut counts.test,
            };
            row[e.label] += 1;
        }
        counts
    }

    /// Replaces the examples of one split, keeping the others.
    pub fn with_split_replaced(&self, split: Split, replacement: Vec<LabeledExample>) -> Dataset {
        let mut examples: Vec<_> = self.examples.iter().filter(|e| e.split != split).cloned().collect();
        examples.extend(replacement);
        Dataset { examples }
    }
}

/// Parses a FER2013 CSV. Row numbers in errors count data rows from 1.
pub fn parse_fer_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(Error::file(path))?;
    read_fer_csv(file)
}

pub fn read_fer_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse {
            row: 0,
            message: format!("expected header `emotion,pixels,Usage`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut examples = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let err = |message: String| Error::Parse { row, message };
        if record.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", record.len())));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("emotion `{}` is not an integer", &record[0])))?;
        if label >= NUM_CLASSES {
            return Err(err(format!("emotion {label} outside 0..{NUM_CLASSES}")));
        }
        let bytes = record[1]
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<u8>()
                    .map_err(|_| err(format!("pixel `{tok}` is not an integer in 0..=255")))
            })
            .collect::<Result<Vec<u8>>>()?;
        if bytes.len() != PIXELS {
            return Err(err(format!("expected {PIXELS} pixel values, found {}", bytes.len())));
        }
        let split = Split::from_usage_tag(record[2].trim())
            .ok_or_else(|| err(format!("unknown Usage tag `{}`", &record[2])))?;
        examples.push(LabeledExample {
            image: GrayImage::from_bytes(&bytes)?,
            label,
            split,
        });
    }
    Ok(Dataset { examples })
}

pub fn write_fer_csv<W: std::io::Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    let mut pixels = String::with_capacity(PIXELS * 4);
    for e in &dataset.examples {
        pixels.clear();
        for (i, b) in e.image.to_bytes().iter().enumerate() {
            if i > 0 {
                pixels.push(' ');
            }
            pixels.push_str(&b.to_string());
        }
        w.write_record([e.label.to_string().as_str(), pixels.as_str(), e.split.usage_tag()])?;
    }
    w.flush()?;
    Ok(())
}

pub const DATA_FILE: &str = "data.csv";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMetadata {
    pub schema_version: u32,
    pub counts: ClassCounts,
    pub label_map: Vec<String>,
    pub source: String,
    /// Mask applied when the directory was produced by `maskgen`.
    pub mask: Option<String>,
}

/// Writes `data.csv` plus `metadata.json` under `dir`.
pub fn save_dataset_dir(dataset: &Dataset, dir: &Path, source: &str, mask: Option<String>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::file(dir))?;
    let data_path = dir.join(DATA_FILE);
    let file = std::fs::File::create(&data_path).map_err(Error::file(&data_path))?;
    write_fer_csv(dataset, std::io::BufWriter::new(file))?;
    let meta = DatasetMetadata {
        schema_version: 1,
        counts: dataset.class_distribution(),
        label_map: EMOTION_NAMES.iter().map(|s| s.to_string()).collect(),
        source: source.to_string(),
        mask,
    };
    let meta_path = dir.join(METADATA_FILE);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(Error::file(&meta_path))
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    parse_fer_csv(&dir.join(DATA_FILE))
}

pub fn load_dataset_metadata(dir: &Path) -> Result<DatasetMetadata> {
    let path = dir.join(METADATA_FILE);
    let text = std::fs::read_to_string(&path).map_err(Error::file(&path))?;
    Ok(serde_json::from_str(&text)?)
}
