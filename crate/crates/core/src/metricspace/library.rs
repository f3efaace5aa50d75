//! Pre-trained records, medoid libraries and their on-disk manifests.
//!
//! A record directory holds `record_<id>.csv` (joint samples),
//! `record_<id>.map` plus its `.toml` sidecar (the trained map) and a TOML
//! manifest listing them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Clustering, MetricKind};
use crate::ensemble::JointSample;
use crate::error::{check_dim, Error, Result};
use crate::io::{read_text, write_text};
use crate::otf::TransportMapModel;

/// Where a record came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub simulation: usize,
    pub simulation_seed: u64,
    /// One-based filter step.
    pub time_index: usize,
    pub prior_mean: f64,
    pub prior_std: f64,
}

/// Joint samples of one filter step together with the map trained on them.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedRecord {
    pub id: u64,
    pub samples: JointSample,
    pub map: TransportMapModel,
    pub provenance: Provenance,
}

impl PretrainedRecord {
    pub fn new(id: u64, samples: JointSample, map: TransportMapModel, provenance: Provenance) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::arg("a record needs at least one sample"));
        }
        check_dim("record state dim", map.x_dim(), samples.x_dim())?;
        check_dim("record observation dim", map.y_dim(), samples.y_dim())?;
        Ok(PretrainedRecord { id, samples, map, provenance })
    }

    fn stem(&self) -> String {
        format!("record_{:05}", self.id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordEntry {
    id: u64,
    samples: String,
    map: String,
    #[serde(flatten)]
    provenance: Provenance,
}

fn write_record(dir: &Path, record: &PretrainedRecord) -> Result<RecordEntry> {
    let stem = record.stem();
    let samples = format!("{stem}.csv");
    let map = format!("{stem}.map");
    record.samples.write_csv(&dir.join(&samples))?;
    record.map.save(&dir.join(&map))?;
    Ok(RecordEntry {
        id: record.id,
        samples,
        map,
        provenance: record.provenance.clone(),
    })
}

fn read_record(dir: &Path, entry: RecordEntry) -> Result<PretrainedRecord> {
    let samples = JointSample::read_csv(&dir.join(&entry.samples))?;
    let map = TransportMapModel::load(&dir.join(&entry.map))?;
    PretrainedRecord::new(entry.id, samples, map, entry.provenance)
        .map_err(|e| e.context(format!("record {} in {}", entry.id, dir.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::format(e.to_string()))
}

fn from_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub const RECORDS_MANIFEST: &str = "records.toml";
pub const LIBRARY_MANIFEST: &str = "library.toml";

#[derive(Debug, Serialize, Deserialize)]
struct RecordsManifest {
    count: usize,
    records: Vec<RecordEntry>,
}

/// Write a record set into `dir` with a `records.toml` manifest.
pub fn save_records(dir: &Path, records: &[PretrainedRecord]) -> Result<()> {
    ensure_dir(dir)?;
    let entries = records.iter().map(|r| write_record(dir, r)).collect::<Result<Vec<_>>>()?;
    let manifest = RecordsManifest {
        count: entries.len(),
        records: entries,
    };
    write_text(&dir.join(RECORDS_MANIFEST), &to_toml(&manifest)?)
}

pub fn load_records(dir: &Path) -> Result<Vec<PretrainedRecord>> {
    let manifest: RecordsManifest = from_toml(&dir.join(RECORDS_MANIFEST))?;
    check_dim("records listed in manifest", manifest.count, manifest.records.len())?;
    manifest.records.into_iter().map(|e| read_record(dir, e)).collect()
}

/// The K representative records chosen by K-medoids.
#[derive(Debug, Clone, PartialEq)]
pub struct MedoidLibrary {
    pub metric: MetricKind,
    /// Positions of the medoids in the clustered record set.
    pub medoid_indices: Vec<usize>,
    pub medoids: Vec<PretrainedRecord>,
    /// Cluster label (position in `medoids`) of every clustered record.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryManifest {
    metric: MetricKind,
    total_cost: f64,
    medoid_indices: Vec<usize>,
    assignment: Vec<usize>,
    medoids: Vec<RecordEntry>,
}

impl MedoidLibrary {
    pub fn from_clustering(records: &[PretrainedRecord], clustering: &Clustering, metric: MetricKind) -> Result<Self> {
        check_dim("clustered records", records.len(), clustering.assignment.len())?;
        Ok(MedoidLibrary {
            metric,
            medoid_indices: clustering.medoids.clone(),
            medoids: clustering.medoids.iter().map(|&i| records[i].clone()).collect(),
            assignment: clustering.assignment.clone(),
            total_cost: clustering.total_cost,
        })
    }

    /// A library that uses every given record as its own medoid.
    pub fn from_records(records: Vec<PretrainedRecord>, metric: MetricKind) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::arg("a library needs at least one record"));
        }
        let k = records.len();
        Ok(MedoidLibrary {
            metric,
            medoid_indices: (0..k).collect(),
            medoids: records,
            assignment: (0..k).collect(),
            total_cost: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.medoids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.medoids.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.medoids[0].map.x_dim()
    }

    pub fn y_dim(&self) -> usize {
        self.medoids[0].map.y_dim()
    }

    /// Write the medoid records and a `library.toml` manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let medoids = self.medoids.iter().map(|r| write_record(dir, r)).collect::<Result<Vec<_>>>()?;
        let manifest = LibraryManifest {
            metric: self.metric,
            total_cost: self.total_cost,
            medoid_indices: self.medoid_indices.clone(),
            assignment: self.assignment.clone(),
            medoids,
        };
        write_text(&dir.join(LIBRARY_MANIFEST), &to_toml(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: LibraryManifest = from_toml(&dir.join(LIBRARY_MANIFEST))?;
        let k = manifest.medoids.len();
        if k == 0 || manifest.medoid_indices.len() != k {
            return Err(Error::format(format!("{}: medoid list and indices disagree", dir.display())));
        }
        if manifest.assignment.iter().any(|&a| a >= k) {
            return Err(Error::format(format!("{}: assignment label out of range", dir.display())));
        }
        let medoids = manifest.medoids.into_iter().map(|e| read_record(dir, e)).collect::<Result<Vec<_>>>()?;
        for r in &medoids[1..] {
            check_dim("library state dim", medoids[0].map.x_dim(), r.map.x_dim())?;
            check_dim("library observation dim", medoids[0].map.y_dim(), r.map.y_dim())?;
        }
        Ok(MedoidLibrary {
            metric: manifest.metric,
            medoid_indices: manifest.medoid_indices,
            medoids,
            assignment: manifest.assignment,
            total_cost: manifest.total_cost,
        })
    }
}
