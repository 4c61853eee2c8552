//! On-disk artifact formats.
//!
//! Directory artifacts (models, datasets, attack batches) pair a small JSON
//! document with a checksummed tensor bundle; single-file artifacts
//! (statistics, score records, meta correctors) are plain JSON. Every
//! document carries a format version and loading refuses anything newer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bundle::{load_bundle, save_bundle};
use crate::data::{Dataset, DatasetMeta, Split};
use crate::error::{Error, Result};
use crate::meta::MetaCorrector;
use crate::model::{Classifier, ModelArch};
use crate::odds::{OddsStatistics, ZScoreRecord};
use crate::tensor::Tensor;

pub const ARTIFACT_VERSION: u32 = 1;

pub const MODEL_DOC: &str = "model.json";
pub const DATASET_DOC: &str = "dataset.json";
pub const ATTACK_DOC: &str = "attack.json";

fn check_version(found: u32) -> Result<()> {
    if found != ARTIFACT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            supported: ARTIFACT_VERSION,
        });
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Stacks same-shaped tensors into one [n, len] tensor for the bundle.
fn stack(tensors: &[Tensor], what: &str) -> Result<(Tensor, Vec<usize>)> {
    let first_shape = tensors
        .first()
        .map(|t| t.shape().to_vec())
        .ok_or_else(|| Error::EmptyDataset(format!("no {what} tensors to save")))?;
    let len = first_shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(tensors.len() * len);
    for t in tensors {
        if t.shape() != first_shape.as_slice() {
            return Err(Error::shape(
                what,
                format!("mixed shapes {:?} and {:?}", first_shape, t.shape()),
            ));
        }
        data.extend_from_slice(t.data());
    }
    Ok((
        Tensor::new(vec![tensors.len(), len], data)?,
        first_shape,
    ))
}

fn unstack(stacked: &Tensor, shape: &[usize], what: &str) -> Result<Vec<Tensor>> {
    let len: usize = shape.iter().product();
    if stacked.rank() != 2 || stacked.shape()[1] != len {
        return Err(Error::Artifact(format!(
            "{what}: stored block {:?} does not hold rows of shape {shape:?}",
            stacked.shape()
        )));
    }
    stacked
        .data()
        .chunks(len)
        .map(|chunk| Tensor::new(shape.to_vec(), chunk.to_vec()))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    version: u32,
    arch: ModelArch,
    checksum: String,
}

pub fn save_model(dir: &Path, model: &Classifier) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join(MODEL_DOC),
        &ModelDoc {
            version: ARTIFACT_VERSION,
            arch: model.arch().clone(),
            checksum: model.checksum(),
        },
    )?;
    let entries: Vec<(&str, &Tensor)> = model
        .params()
        .iter()
        .map(|(name, tensor)| (name.as_str(), tensor))
        .collect();
    save_bundle(dir, &entries)
}

pub fn load_model(dir: &Path) -> Result<Classifier> {
    let doc: ModelDoc = read_json(&dir.join(MODEL_DOC))?;
    check_version(doc.version)?;
    let params = load_bundle(dir)?;
    let model = Classifier::from_params(doc.arch, params)?;
    let actual = model.checksum();
    if actual != doc.checksum {
        return Err(Error::ChecksumMismatch {
            what: "model parameters".into(),
            expected: doc.checksum,
            actual,
        });
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    version: u32,
    num_classes: usize,
    input_shape: Vec<usize>,
    labels: Vec<usize>,
    splits: BTreeMap<String, Vec<usize>>,
    meta: DatasetMeta,
}

fn split_from_label(label: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.label() == label)
        .ok_or_else(|| Error::Artifact(format!("unknown split '{label}'")))
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let (stacked, input_shape) = stack(&dataset.inputs, "dataset inputs")?;
    write_json(
        &dir.join(DATASET_DOC),
        &DatasetDoc {
            version: ARTIFACT_VERSION,
            num_classes: dataset.num_classes,
            input_shape,
            labels: dataset.labels.clone(),
            splits: dataset
                .splits
                .iter()
                .map(|(split, idx)| (split.label().to_string(), idx.clone()))
                .collect(),
            meta: dataset.meta.clone(),
        },
    )?;
    save_bundle(dir, &[("inputs", &stacked)])
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let doc: DatasetDoc = read_json(&dir.join(DATASET_DOC))?;
    check_version(doc.version)?;
    let mut bundle = load_bundle(dir)?;
    let stacked = bundle
        .remove("inputs")
        .ok_or_else(|| Error::Artifact("dataset bundle lacks 'inputs'".into()))?;
    let inputs = unstack(&stacked, &doc.input_shape, "dataset inputs")?;
    let mut splits = BTreeMap::new();
    for (label, idx) in doc.splits {
        splits.insert(split_from_label(&label)?, idx);
    }
    let dataset = Dataset {
        inputs,
        labels: doc.labels,
        num_classes: doc.num_classes,
        splits,
        meta: doc.meta,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[derive(Serialize, Deserialize)]
struct StatsDoc {
    version: u32,
    statistics: OddsStatistics,
}

pub fn save_statistics(path: &Path, stats: &OddsStatistics) -> Result<()> {
    write_json(
        path,
        &StatsDoc {
            version: ARTIFACT_VERSION,
            statistics: stats.clone(),
        },
    )
}

pub fn load_statistics(path: &Path) -> Result<OddsStatistics> {
    let doc: StatsDoc = read_json(path)?;
    check_version(doc.version)?;
    Ok(doc.statistics)
}

#[derive(Serialize, Deserialize)]
struct RecordsDoc {
    version: u32,
    records: Vec<ZScoreRecord>,
    /// True labels aligned with the records, when known.
    labels: Option<Vec<usize>>,
}

pub fn save_records(
    path: &Path,
    records: &[ZScoreRecord],
    labels: Option<&[usize]>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != records.len() {
            return Err(Error::InvalidParameter(format!(
                "{} records vs {} labels",
                records.len(),
                l.len()
            )));
        }
    }
    write_json(
        path,
        &RecordsDoc {
            version: ARTIFACT_VERSION,
            records: records.to_vec(),
            labels: labels.map(<[usize]>::to_vec),
        },
    )
}

pub fn load_records(path: &Path) -> Result<(Vec<ZScoreRecord>, Option<Vec<usize>>)> {
    let doc: RecordsDoc = read_json(path)?;
    check_version(doc.version)?;
    Ok((doc.records, doc.labels))
}

#[derive(Serialize, Deserialize)]
struct MetaDoc {
    version: u32,
    corrector: MetaCorrector,
}

pub fn save_meta(path: &Path, corrector: &MetaCorrector) -> Result<()> {
    write_json(
        path,
        &MetaDoc {
            version: ARTIFACT_VERSION,
            corrector: corrector.clone(),
        },
    )
}

pub fn load_meta(path: &Path) -> Result<MetaCorrector> {
    let doc: MetaDoc = read_json(path)?;
    check_version(doc.version)?;
    Ok(doc.corrector)
}

/// A batch of attack results against samples of some dataset split.
#[derive(Clone, Debug)]
pub struct AttackBatch {
    /// Attack family label, e.g. "pgd_linf".
    pub kind: String,
    /// Attack parameters as free-form JSON for the record.
    pub params: serde_json::Value,
    /// Positions of the attacked samples within their source split.
    pub indices: Vec<usize>,
    pub source_labels: Vec<usize>,
    pub success: Vec<bool>,
    pub adversarial: Vec<Tensor>,
}

impl AttackBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.adversarial.len();
        if self.indices.len() != n || self.source_labels.len() != n || self.success.len() != n {
            return Err(Error::InvalidParameter(format!(
                "attack batch fields disagree: {n} tensors, {} indices, {} labels, {} flags",
                self.indices.len(),
                self.source_labels.len(),
                self.success.len()
            )));
        }
        Ok(())
    }

    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

#[derive(Serialize, Deserialize)]
struct AttackDoc {
    version: u32,
    kind: String,
    params: serde_json::Value,
    indices: Vec<usize>,
    source_labels: Vec<usize>,
    success: Vec<bool>,
    input_shape: Vec<usize>,
}

pub fn save_attack_batch(dir: &Path, batch: &AttackBatch) -> Result<()> {
    batch.validate()?;
    fs::create_dir_all(dir)?;
    let (stacked, input_shape) = stack(&batch.adversarial, "adversarial inputs")?;
    write_json(
        &dir.join(ATTACK_DOC),
        &AttackDoc {
            version: ARTIFACT_VERSION,
            kind: batch.kind.clone(),
            params: batch.params.clone(),
            indices: batch.indices.clone(),
            source_labels: batch.source_labels.clone(),
            success: batch.success.clone(),
            input_shape,
        },
    )?;
    save_bundle(dir, &[("adversarial", &stacked)])
}

pub fn load_attack_batch(dir: &Path) -> Result<AttackBatch> {
    let doc: AttackDoc = read_json(&dir.join(ATTACK_DOC))?;
    check_version(doc.version)?;
    let mut bundle = load_bundle(dir)?;
    let stacked = bundle
        .remove("adversarial")
        .ok_or_else(|| Error::Artifact("attack bundle lacks 'adversarial'".into()))?;
    let batch = AttackBatch {
        kind: doc.kind,
        params: doc.params,
        indices: doc.indices,
        source_labels: doc.source_labels,
        success: doc.success,
        adversarial: unstack(&stacked, &doc.input_shape, "adversarial inputs")?,
    };
    batch.validate()?;
    Ok(batch)
}

/// Plain CSV with a header row. Fields must stay free of separators and
/// quotes — these files carry numbers and short labels only.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    let mut push_row = |fields: &mut dyn Iterator<Item = &str>| -> Result<()> {
        let mut first = true;
        for field in fields {
            if field.contains([',', '"', '\n', '\r']) {
                return Err(Error::Artifact(format!(
                    "CSV field '{field}' needs quoting, which this writer does not do"
                )));
            }
            if !first {
                out.push(',');
            }
            out.push_str(field);
            first = false;
        }
        out.push('\n');
        Ok(())
    };
    push_row(&mut header.iter().copied())?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Artifact(format!(
                "CSV row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        push_row(&mut row.iter().map(String::as_str))?;
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, BlobParams};
    use crate::model::ModelArch;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let dir = tmp();
        let model = Classifier::init(
            ModelArch::Mlp {
                input_dim: 6,
                hidden: vec![5],
                classes: 3,
            },
            7,
        )
        .unwrap();
        save_model(dir.path(), &model).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.checksum(), model.checksum());
        for (name, tensor) in model.params() {
            assert_eq!(back.params()[name].data(), tensor.data());
        }
    }

    #[test]
    fn tampered_model_doc_is_rejected() {
        let dir = tmp();
        let model = Classifier::init(
            ModelArch::Linear {
                input_dim: 4,
                classes: 2,
            },
            1,
        )
        .unwrap();
        save_model(dir.path(), &model).unwrap();
        let doc_path = dir.path().join(MODEL_DOC);
        let text = fs::read_to_string(&doc_path)
            .unwrap()
            .replace(&model.checksum(), &"0".repeat(64));
        fs::write(&doc_path, text).unwrap();
        match load_model(dir.path()) {
            Err(Error::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn newer_versions_are_refused() {
        let dir = tmp();
        let model = Classifier::init(
            ModelArch::Linear {
                input_dim: 4,
                classes: 2,
            },
            1,
        )
        .unwrap();
        save_model(dir.path(), &model).unwrap();
        let doc_path = dir.path().join(MODEL_DOC);
        let text = fs::read_to_string(&doc_path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        fs::write(&doc_path, text).unwrap();
        match load_model(dir.path()) {
            Err(Error::VersionMismatch { found: 99, .. }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn dataset_roundtrip_keeps_splits_and_meta() {
        let dir = tmp();
        let dataset = gen_blobs(&BlobParams::new(3, 8, 60, 4.0, 5)).unwrap();
        save_dataset(dir.path(), &dataset).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), dataset.len());
        assert_eq!(back.labels, dataset.labels);
        assert_eq!(back.num_classes, dataset.num_classes);
        for split in Split::ALL {
            assert_eq!(back.split_indices(split), dataset.split_indices(split));
        }
        for (a, b) in back.inputs.iter().zip(&dataset.inputs) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn statistics_roundtrip_keeps_negative_infinity() {
        use crate::noise::NoiseGrid;
        use crate::odds::{Calibration, CellAggregation, OddsStatistics, PairMatrix};
        let dir = tmp();
        let grid = NoiseGrid::default_grid(0.1, 2, 3).unwrap();
        let cells = grid.len();
        let stats = OddsStatistics {
            num_classes: 2,
            grid,
            mu: vec![PairMatrix::filled(2, 0.5); cells],
            sigma: vec![PairMatrix::filled(2, 1.5); cells],
            counts: vec![vec![vec![10; 2]; 2]; cells],
            model_checksum: "abc".into(),
            aggregation: CellAggregation::Average,
            calibration: Some(Calibration {
                tau: PairMatrix::filled(2, f64::NEG_INFINITY),
                target_fpr: 1.0,
                sidak_alpha: 1.0,
                fallback_pairs: vec![(0, 1)],
                best_cell: None,
                calibration_fpr: 1.0,
                calibration_tpr: None,
            }),
        };
        let path = dir.path().join("stats.json");
        save_statistics(&path, &stats).unwrap();
        let back = load_statistics(&path).unwrap();
        assert_eq!(
            back.calibration.unwrap().tau.get(0, 1),
            f64::NEG_INFINITY
        );
        assert_eq!(back.mu[0].get(1, 0), 0.5);
    }

    #[test]
    fn attack_batch_roundtrip() {
        let dir = tmp();
        let batch = AttackBatch {
            kind: "pgd_linf".into(),
            params: serde_json::json!({"epsilon": 0.05, "iterations": 10}),
            indices: vec![3, 1, 4],
            source_labels: vec![0, 1, 0],
            success: vec![true, false, true],
            adversarial: vec![
                Tensor::vector(vec![0.1, 0.2]),
                Tensor::vector(vec![0.3, 0.4]),
                Tensor::vector(vec![0.5, 0.6]),
            ],
        };
        save_attack_batch(dir.path(), &batch).unwrap();
        let back = load_attack_batch(dir.path()).unwrap();
        assert_eq!(back.kind, batch.kind);
        assert_eq!(back.indices, batch.indices);
        assert_eq!(back.success, batch.success);
        assert_eq!(back.adversarial[2].data(), batch.adversarial[2].data());
        assert!((back.success_rate() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn records_roundtrip_with_labels() {
        let dir = tmp();
        let records = vec![ZScoreRecord {
            id: 7,
            predicted: 1,
            combined: vec![0.1, 0.0, -0.2],
            per_source: vec![vec![0.1, 0.0, -0.2]; 3],
            per_cell: vec![vec![0.1, 0.0, -0.2]; 4],
        }];
        let path = dir.path().join("records.json");
        save_records(&path, &records, Some(&[2])).unwrap();
        let (back, labels) = load_records(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].id, 7);
        assert_eq!(labels, Some(vec![2]));
    }

    #[test]
    fn csv_layout_is_exact() {
        let dir = tmp();
        let path = dir.path().join("table.csv");
        write_csv(
            &path,
            &["epsilon", "accuracy"],
            &[
                vec!["0.05".into(), "0.91".into()],
                vec!["0.10".into(), "0.42".into()],
            ],
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epsilon,accuracy\n0.05,0.91\n0.10,0.42\n");
    }

    #[test]
    fn csv_rejects_fields_that_would_need_quoting() {
        let dir = tmp();
        let path = dir.path().join("bad.csv");
        match write_csv(&path, &["a"], &[vec!["x,y".into()]]) {
            Err(Error::Artifact(_)) => {}
            other => panic!("expected artifact error, got {other:?}"),
        }
    }
}
