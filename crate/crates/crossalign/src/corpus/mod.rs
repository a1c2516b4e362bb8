//! Data model, file format, and validation for multi-scale embedding
//! corpora.
//!
//! A corpus file is line-delimited JSON: the first line is a manifest,
//! every following line an image or text record. Image records carry the
//! global vector and the six horizontal slices; the four region vectors
//! are derived at load time, so the slices stay the single source of
//! truth. Floats survive a save/load round trip bit-exactly.

pub mod synthetic;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Vec64;
use crate::partition::{partition, RegionProjection, PartitionError, REGION_COUNT, SLICE_COUNT};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("first record must be a manifest")]
    MissingManifest,
    #[error("record {record}: unexpected second manifest")]
    DuplicateManifest { record: String },
    #[error("record {record}: {message}")]
    Parse { record: String, message: String },
    #[error("manifest invalid: {0}")]
    BadManifest(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("record {record}: vector `{field}` has dimension {got}, expected {expected}")]
    DimMismatch {
        record: String,
        field: String,
        expected: usize,
        got: usize,
    },
    #[error("record {record}: {got} slices, expected {SLICE_COUNT}")]
    SliceCount { record: String, got: usize },
    #[error("record {record}: {got} phrases, allowed 1..={m_max}")]
    PhraseCount {
        record: String,
        got: usize,
        m_max: usize,
    },
    #[error("record {record}: {source}")]
    Partition {
        record: String,
        source: PartitionError,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("{side} {id} has no positive match in the batch")]
    MissingPositive { side: &'static str, id: String },
    #[error("invalid generator config: {0}")]
    BadConfig(String),
}

/// Self-describing header: embedding dimension, region count, phrase cap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub dim: usize,
    pub k: usize,
    pub m_max: usize,
    pub version: u32,
}

impl CorpusManifest {
    pub fn new(dim: usize, m_max: usize) -> Self {
        Self {
            dim,
            k: REGION_COUNT,
            m_max,
            version: FORMAT_VERSION,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.version != FORMAT_VERSION {
            return Err(CorpusError::UnsupportedVersion(self.version));
        }
        if self.dim < 2 {
            return Err(CorpusError::BadManifest(format!(
                "dim must be at least 2, got {}",
                self.dim
            )));
        }
        if self.k != REGION_COUNT {
            return Err(CorpusError::BadManifest(format!(
                "k must be {REGION_COUNT}, got {}",
                self.k
            )));
        }
        if self.m_max < 1 {
            return Err(CorpusError::BadManifest("m_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// One gallery image: global embedding, six stored slices, four derived
/// regions. `entities()` yields the global plus the regions, the five
/// vectors cross-attention consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntity {
    pub id: String,
    pub identity: u32,
    pub global: Vec64,
    pub slices: Vec<Vec64>,
    pub regions: Vec<Vec64>,
}

impl ImageEntity {
    pub fn new(
        id: String,
        identity: u32,
        global: Vec64,
        slices: Vec<Vec64>,
    ) -> Result<Self, CorpusError> {
        if slices.len() != SLICE_COUNT {
            return Err(CorpusError::SliceCount {
                record: id,
                got: slices.len(),
            });
        }
        let dim = global.dim();
        for (i, s) in slices.iter().enumerate() {
            if s.dim() != dim {
                return Err(CorpusError::DimMismatch {
                    record: id,
                    field: format!("slices[{i}]"),
                    expected: dim,
                    got: s.dim(),
                });
            }
        }
        let regions = partition(&slices, &RegionProjection::disabled())
            .map_err(|source| CorpusError::Partition {
                record: id.clone(),
                source,
            })?
            .to_vec();
        Ok(Self {
            id,
            identity,
            global,
            slices,
            regions,
        })
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }

    /// Global embedding followed by the four regions.
    pub fn entities(&self) -> Vec<&Vec64> {
        std::iter::once(&self.global).chain(self.regions.iter()).collect()
    }
}

/// One caption: global embedding plus 1..=m_max phrase embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEntity {
    pub id: String,
    pub identity: u32,
    pub global: Vec64,
    pub phrases: Vec<Vec64>,
}

impl TextEntity {
    pub fn new(
        id: String,
        identity: u32,
        global: Vec64,
        phrases: Vec<Vec64>,
        m_max: usize,
    ) -> Result<Self, CorpusError> {
        if phrases.is_empty() || phrases.len() > m_max {
            return Err(CorpusError::PhraseCount {
                record: id,
                got: phrases.len(),
                m_max,
            });
        }
        let dim = global.dim();
        for (i, p) in phrases.iter().enumerate() {
            if p.dim() != dim {
                return Err(CorpusError::DimMismatch {
                    record: id,
                    field: format!("phrases[{i}]"),
                    expected: dim,
                    got: p.dim(),
                });
            }
        }
        Ok(Self {
            id,
            identity,
            global,
            phrases,
        })
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub images: Vec<ImageEntity>,
    pub texts: Vec<TextEntity>,
}

// ---- labels ------------------------------------------------------------

/// Binary identity-match matrix over an image batch × text batch.
#[derive(Debug, Clone)]
pub struct MatchLabels {
    n_img: usize,
    n_txt: usize,
    y: Vec<bool>,
}

impl MatchLabels {
    /// Label every (image, text) pair by identity equality. No positivity
    /// requirement: evaluation tolerates queries without a match.
    pub fn from_identities(img_ids: &[u32], txt_ids: &[u32]) -> Self {
        let mut y = Vec::with_capacity(img_ids.len() * txt_ids.len());
        for &a in img_ids {
            for &b in txt_ids {
                y.push(a == b);
            }
        }
        Self {
            n_img: img_ids.len(),
            n_txt: txt_ids.len(),
            y,
        }
    }

    pub fn n_img(&self) -> usize {
        self.n_img
    }

    pub fn n_txt(&self) -> usize {
        self.n_txt
    }

    pub fn positive(&self, img: usize, txt: usize) -> bool {
        self.y[img * self.n_txt + txt]
    }

    pub fn row_has_positive(&self, img: usize) -> bool {
        (0..self.n_txt).any(|b| self.positive(img, b))
    }

    pub fn col_has_positive(&self, txt: usize) -> bool {
        (0..self.n_img).any(|a| self.positive(a, txt))
    }

    /// True matching distribution over texts for image `img`:
    /// q(b) = y(img,b) / Σ_m y(img,m). None when the row has no positive.
    pub fn row_q(&self, img: usize) -> Option<Vec<f64>> {
        let count = (0..self.n_txt).filter(|&b| self.positive(img, b)).count();
        if count == 0 {
            return None;
        }
        let q = 1.0 / count as f64;
        Some(
            (0..self.n_txt)
                .map(|b| if self.positive(img, b) { q } else { 0.0 })
                .collect(),
        )
    }

    /// Column mirror of [`row_q`](Self::row_q): distribution over images
    /// for text `txt`.
    pub fn col_q(&self, txt: usize) -> Option<Vec<f64>> {
        let count = (0..self.n_img).filter(|&a| self.positive(a, txt)).count();
        if count == 0 {
            return None;
        }
        let q = 1.0 / count as f64;
        Some(
            (0..self.n_img)
                .map(|a| if self.positive(a, txt) { q } else { 0.0 })
                .collect(),
        )
    }
}

/// Labels for a loss batch: every image row and every text column must
/// contain at least one positive.
pub fn build_labels(
    images: &[ImageEntity],
    texts: &[TextEntity],
) -> Result<MatchLabels, CorpusError> {
    if images.is_empty() || texts.is_empty() {
        return Err(CorpusError::EmptyBatch);
    }
    let img_ids: Vec<u32> = images.iter().map(|i| i.identity).collect();
    let txt_ids: Vec<u32> = texts.iter().map(|t| t.identity).collect();
    let labels = MatchLabels::from_identities(&img_ids, &txt_ids);
    for (a, img) in images.iter().enumerate() {
        if !labels.row_has_positive(a) {
            return Err(CorpusError::MissingPositive {
                side: "image",
                id: img.id.clone(),
            });
        }
    }
    for (b, txt) in texts.iter().enumerate() {
        if !labels.col_has_positive(b) {
            return Err(CorpusError::MissingPositive {
                side: "text",
                id: txt.id.clone(),
            });
        }
    }
    Ok(labels)
}

// ---- file format ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Manifest(CorpusManifest),
    Image {
        id: String,
        identity: u32,
        global: Vec64,
        slices: Vec<Vec64>,
    },
    Text {
        id: String,
        identity: u32,
        global: Vec64,
        phrases: Vec<Vec64>,
    },
}

/// Best-effort record id for error messages on lines that fail to parse.
fn salvage_id(line: &str, line_no: usize) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(String::from))
        .unwrap_or_else(|| format!("line {line_no}"))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut manifest: Option<CorpusManifest> = None;
    let mut images = Vec::new();
    let mut texts = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let record: Record =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                record: salvage_id(&line, line_no),
                message: e.to_string(),
            })?;
        match record {
            Record::Manifest(m) => {
                if manifest.is_some() {
                    return Err(CorpusError::DuplicateManifest {
                        record: format!("line {line_no}"),
                    });
                }
                m.validate()?;
                manifest = Some(m);
            }
            Record::Image {
                id,
                identity,
                global,
                slices,
            } => {
                let m = manifest.as_ref().ok_or(CorpusError::MissingManifest)?;
                check_dim(&id, "global", m.dim, global.dim())?;
                let img = ImageEntity::new(id, identity, global, slices)?;
                // ImageEntity::new checks internal consistency; the manifest
                // check on `global` pins everything to the corpus dim.
                images.push(img);
            }
            Record::Text {
                id,
                identity,
                global,
                phrases,
            } => {
                let m = manifest.as_ref().ok_or(CorpusError::MissingManifest)?;
                check_dim(&id, "global", m.dim, global.dim())?;
                let txt = TextEntity::new(id, identity, global, phrases, m.m_max)?;
                texts.push(txt);
            }
        }
    }

    let manifest = manifest.ok_or(CorpusError::MissingManifest)?;
    Ok(Corpus {
        manifest,
        images,
        texts,
    })
}

fn check_dim(record: &str, field: &str, expected: usize, got: usize) -> Result<(), CorpusError> {
    if expected != got {
        return Err(CorpusError::DimMismatch {
            record: record.to_string(),
            field: field.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(corpus_to_string(corpus).as_bytes())?;
    Ok(())
}

/// The serialized corpus as one string; `save_corpus` writes exactly this.
pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut buf = String::new();
    let manifest = Record::Manifest(corpus.manifest.clone());
    writeln!(buf, "{}", serde_json::to_string(&manifest).expect("serializable")).unwrap();
    for img in &corpus.images {
        let rec = Record::Image {
            id: img.id.clone(),
            identity: img.identity,
            global: img.global.clone(),
            slices: img.slices.clone(),
        };
        writeln!(buf, "{}", serde_json::to_string(&rec).expect("serializable")).unwrap();
    }
    for txt in &corpus.texts {
        let rec = Record::Text {
            id: txt.id.clone(),
            identity: txt.identity,
            global: txt.global.clone(),
            phrases: txt.phrases.clone(),
        };
        writeln!(buf, "{}", serde_json::to_string(&rec).expect("serializable")).unwrap();
    }
    buf
}
