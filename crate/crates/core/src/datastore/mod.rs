//! Embedding datasets, their on-disk format, synthetic generation,
//! non-IID partitioning and the shared feature replay pool.

mod format;
mod partition;
mod replay;
mod synthetic;

use std::collections::BTreeSet;

pub use format::{
    load_dataset, manifest_path, save_dataset, Manifest, FORMAT_VERSION, MAGIC,
};
pub use partition::{partition_iid, partition_non_iid, stratified_split, PartitionPlan};
pub use replay::{collect_replay, sample_share, share_count, ReplayPool};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use crate::nnkernel::Tensor2;

pub type ClassId = u32;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic: expected {:?}, found {:?}", String::from_utf8_lossy(expected), String::from_utf8_lossy(found))]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u16, supported: u16 },
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("record {record} has label {label} but only {class_count} classes are declared")]
    LabelOutOfRange {
        record: usize,
        label: ClassId,
        class_count: usize,
    },
    #[error("record {record} has {found} features, dataset width is {expected}")]
    Width {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {0} contains a non-finite feature")]
    NonFinite(usize),
    #[error("class name {0} is not valid UTF-8")]
    ClassName(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("client {client} has an empty dataset")]
    EmptyClient { client: usize },
    #[error("class {0} is not present in the replay pool")]
    MissingClass(ClassId),
    #[error("replay pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// One frozen-encoder feature vector and its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub label: ClassId,
    pub vector: Vec<f32>,
}

/// A labelled collection of equally sized feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    d_in: usize,
    class_names: Vec<String>,
    records: Vec<EmbeddingRecord>,
    pub provenance: String,
}

/// Features and labels ready for the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor2,
    pub labels: Vec<ClassId>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_records<'a>(
        d_in: usize,
        records: impl IntoIterator<Item = &'a EmbeddingRecord>,
    ) -> Batch {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for r in records {
            data.extend(r.vector.iter().map(|&v| v as f64));
            labels.push(r.label);
        }
        let features = Tensor2::from_vec(labels.len(), d_in, data)
            .expect("records share the dataset width");
        Batch { features, labels }
    }
}

impl EmbeddingDataset {
    pub fn new(
        d_in: usize,
        class_names: Vec<String>,
        records: Vec<EmbeddingRecord>,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        if d_in == 0 {
            return Err(DataError::Config("d_in must be positive".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != d_in {
                return Err(DataError::Width {
                    record: i,
                    expected: d_in,
                    found: r.vector.len(),
                });
            }
            if r.label as usize >= class_names.len() {
                return Err(DataError::LabelOutOfRange {
                    record: i,
                    label: r.label,
                    class_count: class_names.len(),
                });
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite(i));
            }
        }
        Ok(Self {
            d_in,
            class_names,
            records,
            provenance: provenance.into(),
        })
    }

    /// A dataset with the same width and class list but different records.
    /// Records must come from a dataset with the same schema.
    pub fn with_records(&self, records: Vec<EmbeddingRecord>) -> Self {
        Self {
            d_in: self.d_in,
            class_names: self.class_names.clone(),
            records,
            provenance: self.provenance.clone(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct labels that actually occur.
    pub fn present_classes(&self) -> BTreeSet<ClassId> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn filter<F: Fn(&EmbeddingRecord) -> bool>(&self, keep: F) -> Self {
        self.with_records(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    /// Records grouped per class, as indices into `records()`.
    pub fn indices_by_class(&self) -> std::collections::BTreeMap<ClassId, Vec<usize>> {
        let mut map = std::collections::BTreeMap::<ClassId, Vec<usize>>::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.label).or_default().push(i);
        }
        map
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::from_records(self.d_in, indices.iter().map(|&i| &self.records[i]))
    }

    pub fn full_batch(&self) -> Batch {
        Batch::from_records(self.d_in, &self.records)
    }

    /// Concatenates datasets sharing one schema.
    pub fn concat(parts: &[EmbeddingDataset]) -> Result<Self, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Config("nothing to concatenate".into()))?;
        let mut records = Vec::new();
        for p in parts {
            if p.d_in != first.d_in || p.class_names != first.class_names {
                return Err(DataError::Config(
                    "cannot concatenate datasets with different schemas".into(),
                ));
            }
            records.extend(p.records.iter().cloned());
        }
        Ok(first.with_records(records))
    }
}
