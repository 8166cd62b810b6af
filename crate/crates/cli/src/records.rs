//! Binary split files: a 16-byte header (magic `MMERFT01`, little-endian u32
//! record count, 4 reserved bytes) followed by back-to-back records. Each
//! record is three modality matrices then the label vector, all little-endian
//! IEEE-754 32-bit values; matrices are feature-major (`d_m` rows × `τ_m`
//! columns, row-major). Unaligned datasets store each matrix's true length as
//! a u32 immediately before it.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{contract, CliError, Result};
use crate::manifest::{Alignment, DatasetManifest, ModalityShape};
use mmer_core::data::{Dataset, Sample};
use mmer_core::scalar::Scalar;
use mmer_core::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMERFT01";

#[derive(Clone, Debug, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl RawMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        RawMatrix { rows, cols, data }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub visual: RawMatrix,
    pub audio: RawMatrix,
    pub text: RawMatrix,
    pub labels: Vec<u8>,
}

fn check_matrix(
    record: usize,
    name: &str,
    m: &RawMatrix,
    shape: ModalityShape,
    alignment: Alignment,
) -> Result<()> {
    let len_ok = match alignment {
        Alignment::Aligned => m.cols == shape.len,
        Alignment::Unaligned => m.cols >= 1 && m.cols <= shape.len,
    };
    if m.rows != shape.dim || !len_ok {
        return Err(contract(format!(
            "record {record}: {name} matrix is {}×{}, manifest expects {}×{}{}",
            m.rows,
            m.cols,
            shape.dim,
            shape.len,
            if alignment == Alignment::Unaligned {
                " (maximum)"
            } else {
                ""
            }
        )));
    }
    if m.data.len() != m.rows * m.cols {
        return Err(contract(format!(
            "record {record}: {name} matrix carries {} values for shape {}×{}",
            m.data.len(),
            m.rows,
            m.cols
        )));
    }
    Ok(())
}

fn check_record(
    record: usize,
    r: &RawRecord,
    manifest: &DatasetManifest,
) -> Result<()> {
    check_matrix(record, "visual", &r.visual, manifest.modalities.visual, manifest.alignment)?;
    check_matrix(record, "audio", &r.audio, manifest.modalities.audio, manifest.alignment)?;
    check_matrix(record, "text", &r.text, manifest.modalities.text, manifest.alignment)?;
    if r.labels.len() != manifest.label_names.len() {
        return Err(contract(format!(
            "record {record}: {} labels, manifest expects {}",
            r.labels.len(),
            manifest.label_names.len()
        )));
    }
    Ok(())
}

pub fn write_split(
    path: &Path,
    manifest: &DatasetManifest,
    records: &[RawRecord],
) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        check_record(i, r, manifest)?;
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    w.write_all(&[0u8; 4])?;
    let unaligned = manifest.alignment == Alignment::Unaligned;
    for r in records {
        for m in [&r.visual, &r.audio, &r.text] {
            if unaligned {
                w.write_all(&(m.cols as u32).to_le_bytes())?;
            }
            for v in &m.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for y in &r.labels {
            w.write_all(&(f32::from(*y)).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a, R: Read> {
    reader: R,
    path: &'a Path,
    record: usize,
}

impl<'a, R: Read> Cursor<'a, R> {
    fn fail(&self, what: &str) -> CliError {
        contract(format!(
            "{}: record {}: truncated while reading {what}",
            self.path.display(),
            self.record
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.reader
            .read_exact(&mut buf)
            .map_err(|_| self.fail(what))?;
        Ok(u32::from_le_bytes(buf))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.reader
            .read_exact(&mut bytes)
            .map_err(|_| self.fail(what))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn read_split(path: &Path, manifest: &DatasetManifest) -> Result<Vec<RawRecord>> {
    let file = fs::File::open(path)
        .map_err(|e| contract(format!("cannot open split file {}: {e}", path.display())))?;
    let mut cursor = Cursor {
        reader: BufReader::new(file),
        path,
        record: 0,
    };

    let mut magic = [0u8; 8];
    cursor
        .reader
        .read_exact(&mut magic)
        .map_err(|_| contract(format!("{}: file shorter than header", path.display())))?;
    if &magic != MAGIC {
        return Err(contract(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let count = cursor.u32("record count")? as usize;
    let _reserved = cursor.u32("reserved header bytes")?;

    let unaligned = manifest.alignment == Alignment::Unaligned;
    let shapes = [
        ("visual", manifest.modalities.visual),
        ("audio", manifest.modalities.audio),
        ("text", manifest.modalities.text),
    ];
    let l = manifest.label_names.len();

    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        cursor.record = i;
        let mut mats = Vec::with_capacity(3);
        for (name, shape) in shapes {
            let cols = if unaligned {
                let c = cursor.u32(&format!("{name} length"))? as usize;
                if c == 0 || c > shape.len {
                    return Err(contract(format!(
                        "{}: record {i}: {name} length {c} outside 1..={}",
                        path.display(),
                        shape.len
                    )));
                }
                c
            } else {
                shape.len
            };
            let data = cursor.f32s(shape.dim * cols, &format!("{name} matrix"))?;
            mats.push(RawMatrix::new(shape.dim, cols, data));
        }
        let label_vals = cursor.f32s(l, "label vector")?;
        let mut labels = Vec::with_capacity(l);
        for (j, v) in label_vals.iter().enumerate() {
            if *v == 0.0 {
                labels.push(0);
            } else if *v == 1.0 {
                labels.push(1);
            } else {
                return Err(contract(format!(
                    "{}: record {i}: label {j} is {v}, expected 0 or 1",
                    path.display()
                )));
            }
        }
        let mut it = mats.into_iter();
        let record = RawRecord {
            visual: it.next().unwrap(),
            audio: it.next().unwrap(),
            text: it.next().unwrap(),
            labels,
        };
        check_record(i, &record, manifest)?;
        records.push(record);
    }

    let mut probe = [0u8; 1];
    if cursor.reader.read(&mut probe)? != 0 {
        return Err(contract(format!(
            "{}: trailing bytes after {count} records",
            path.display()
        )));
    }
    Ok(records)
}

fn to_tensor<S: Scalar>(m: &RawMatrix) -> Tensor<S> {
    Tensor::matrix(
        m.rows,
        m.cols,
        m.data.iter().map(|v| S::from_f64(*v as f64)).collect(),
    )
    .expect("validated record matrix")
}

pub fn to_samples<S: Scalar>(records: &[RawRecord]) -> Vec<Sample<S>> {
    records
        .iter()
        .map(|r| Sample {
            visual: to_tensor(&r.visual),
            audio: to_tensor(&r.audio),
            text: to_tensor(&r.text),
            labels: r.labels.clone(),
        })
        .collect()
}

/// Loads one named split into model-ready samples.
pub fn load_split<S: Scalar>(
    manifest: &DatasetManifest,
    dir: &Path,
    split: &str,
) -> Result<Vec<Sample<S>>> {
    let entry = manifest.split(split)?;
    let records = read_split(&dir.join(&entry.file), manifest)?;
    if records.len() != entry.count {
        return Err(contract(format!(
            "split {split}: file holds {} records, manifest says {}",
            records.len(),
            entry.count
        )));
    }
    Ok(to_samples(&records))
}

/// Loads the standard train/valid/test splits (missing test → empty).
pub fn load_dataset<S: Scalar>(manifest: &DatasetManifest, dir: &Path) -> Result<Dataset<S>> {
    let test = if manifest.split("test").is_ok() {
        load_split(manifest, dir, "test")?
    } else {
        Vec::new()
    };
    Ok(Dataset {
        label_names: manifest.label_names.clone(),
        train: load_split(manifest, dir, "train")?,
        valid: load_split(manifest, dir, "valid")?,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{ModalityShapes, SplitEntry};

    fn manifest(alignment: Alignment) -> DatasetManifest {
        DatasetManifest {
            name: "t".into(),
            alignment,
            label_names: vec!["a".into(), "b".into()],
            instance_count: 2,
            modalities: ModalityShapes {
                visual: ModalityShape { dim: 2, len: 3 },
                audio: ModalityShape { dim: 2, len: 3 },
                text: ModalityShape { dim: 1, len: 3 },
            },
            splits: vec![SplitEntry {
                name: "train".into(),
                file: "train.bin".into(),
                count: 2,
            }],
        }
    }

    fn record(cols: usize, seed: f32) -> RawRecord {
        let fill = |rows: usize, cols: usize| {
            RawMatrix::new(
                rows,
                cols,
                (0..rows * cols).map(|i| seed + i as f32 * 0.25).collect(),
            )
        };
        RawRecord {
            visual: fill(2, cols),
            audio: fill(2, cols),
            text: fill(1, cols),
            labels: vec![1, 0],
        }
    }


    #[test]
    fn full_scale_aligned_shapes_load_as_declared() {
        let m = DatasetManifest {
            name: "full-scale".into(),
            alignment: Alignment::Aligned,
            label_names: (0..6).map(|i| format!("label{i}")).collect(),
            instance_count: 2,
            modalities: ModalityShapes {
                visual: ModalityShape { dim: 35, len: 60 },
                audio: ModalityShape { dim: 74, len: 60 },
                text: ModalityShape { dim: 300, len: 60 },
            },
            splits: vec![SplitEntry {
                name: "train".into(),
                file: "train.bin".into(),
                count: 2,
            }],
        };
        let rec = || RawRecord {
            visual: RawMatrix::new(35, 60, vec![0.25; 35 * 60]),
            audio: RawMatrix::new(74, 60, vec![0.5; 74 * 60]),
            text: RawMatrix::new(300, 60, vec![0.75; 300 * 60]),
            labels: vec![1, 0, 1, 0, 0, 1],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        write_split(&path, &m, &[rec(), rec()]).unwrap();
        let loaded = read_split(&path, &m).unwrap();
        for r in &loaded {
            assert_eq!((r.visual.rows, r.visual.cols), (35, 60));
            assert_eq!((r.audio.rows, r.audio.cols), (74, 60));
            assert_eq!((r.text.rows, r.text.cols), (300, 60));
        }
        let samples = to_samples::<f64>(&loaded);
        assert_eq!(samples[0].visual.shape(), vec![35, 60]);
    }

    #[test]
    fn aligned_roundtrip_is_value_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(Alignment::Aligned);
        let records = vec![record(3, 0.5), record(3, -2.0)];
        let path = dir.path().join("train.bin");
        write_split(&path, &m, &records).unwrap();
        let loaded = read_split(&path, &m).unwrap();
        assert_eq!(loaded, records);
    }

    #[test]
    fn unaligned_records_carry_their_own_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(Alignment::Unaligned);
        let records = vec![record(2, 1.0), record(3, 4.0)];
        let path = dir.path().join("train.bin");
        write_split(&path, &m, &records).unwrap();
        let loaded = read_split(&path, &m).unwrap();
        assert_eq!(loaded[0].visual.cols, 2);
        assert_eq!(loaded[1].visual.cols, 3);
        assert_eq!(loaded, records);
    }

    #[test]
    fn truncated_file_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(Alignment::Aligned);
        let records = vec![record(3, 0.0), record(3, 1.0)];
        let path = dir.path().join("train.bin");
        write_split(&path, &m, &records).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        let err = read_split(&path, &m).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(Alignment::Aligned);
        let path = dir.path().join("train.bin");
        write_split(&path, &m, &[record(3, 0.0), record(3, 0.0)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = read_split(&path, &m).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn non_binary_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(Alignment::Aligned);
        let path = dir.path().join("train.bin");
        write_split(&path, &m, &[record(3, 0.0), record(3, 0.0)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let label_offset = bytes.len() - 8; // first label of last record
        bytes[label_offset..label_offset + 4].copy_from_slice(&0.5f32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = read_split(&path, &m).unwrap_err().to_string();
        assert!(err.contains("label"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(Alignment::Aligned);
        let path = dir.path().join("train.bin");
        write_split(&path, &m, &[record(3, 0.0), record(3, 0.0)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(read_split(&path, &m).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn wrong_aligned_length_is_rejected_at_write() {
        let m = manifest(Alignment::Aligned);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        let bad = vec![record(2, 0.0)];
        assert!(write_split(&path, &m, &bad).is_err());
    }
}
