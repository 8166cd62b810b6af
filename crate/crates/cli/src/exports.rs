//! Diagnostic artifacts: the training log, discriminator probe trace, label
//! correlation matrices, ablation table, and raw embedding exports.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;
use mmer_core::metrics::EvalReport;
use mmer_core::model::DiscriminatorProbe;
use mmer_core::train::EpochStats;

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const AMR_PROBE_FILE: &str = "amr_probe.csv";
pub const EMBEDDINGS_MAGIC: &[u8; 8] = b"MMEREMB1";

/// `train_log.csv`: one row per epoch with every loss component and the
/// validation metrics.
pub struct TrainLogWriter {
    out: BufWriter<fs::File>,
}

impl TrainLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(
            out,
            "epoch,L_ml,L_C,L_P,L_diff,L_cml,L_All,val_acc,val_p,val_r,val_microf1"
        )?;
        Ok(TrainLogWriter { out })
    }

    pub fn append(&mut self, stats: &EpochStats) -> Result<()> {
        let l = &stats.losses;
        let v = &stats.val;
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            stats.epoch,
            l.ml,
            l.common,
            l.private,
            l.diff,
            l.cml,
            l.total,
            v.accuracy,
            v.precision,
            v.recall,
            v.micro_f1
        )?;
        self.out.flush()?;
        Ok(())
    }
}

/// `amr_probe.csv`: mean discriminator probabilities on a frozen probe batch,
/// six rows (rep_kind × modality) per epoch.
pub struct AmrProbeWriter {
    out: BufWriter<fs::File>,
}

impl AmrProbeWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "epoch,rep_kind,modality,p_visual,p_audio,p_text")?;
        Ok(AmrProbeWriter { out })
    }

    pub fn append(&mut self, epoch: usize, probe: &DiscriminatorProbe) -> Result<()> {
        let modalities = ["visual", "audio", "text"];
        for (kind, table) in [("common", &probe.common_mean), ("private", &probe.private_mean)] {
            for (m, name) in modalities.iter().enumerate() {
                writeln!(
                    self.out,
                    "{},{},{},{},{},{}",
                    epoch, kind, name, table[m][0], table[m][1], table[m][2]
                )?;
            }
        }
        self.out.flush()?;
        Ok(())
    }
}

/// One `correlations_head{h}.csv` per attention head. Row label → column
/// label reads as the influence of the row's label on the column's label.
pub fn write_correlation_csvs(
    dir: &Path,
    correlations: &[(Vec<f64>, Vec<Vec<f64>>)],
    label_names: &[String],
    raw: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let l = label_names.len();
    let mut paths = Vec::with_capacity(correlations.len());
    for (h, (raw_scores, softmaxed)) in correlations.iter().enumerate() {
        let path = dir.join(format!("correlations_head{h}.csv"));
        let mut out = BufWriter::new(fs::File::create(&path)?);
        writeln!(out, "label,{}", label_names.join(","))?;
        for (i, name) in label_names.iter().enumerate() {
            let row: Vec<String> = if raw {
                (0..l).map(|j| raw_scores[i * l + j].to_string()).collect()
            } else {
                softmaxed[i].iter().map(|v| v.to_string()).collect()
            };
            writeln!(out, "{},{}", name, row.join(","))?;
        }
        out.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

pub struct AblationRow {
    pub name: String,
    pub val: EvalReport,
    pub test: Option<EvalReport>,
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(
        out,
        "row,val_acc,val_p,val_r,val_microf1,test_acc,test_p,test_r,test_microf1"
    )?;
    for r in rows {
        let test = r
            .test
            .map(|t| {
                format!(
                    "{},{},{},{}",
                    t.accuracy, t.precision, t.recall, t.micro_f1
                )
            })
            .unwrap_or_else(|| ",,,".to_string());
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name, r.val.accuracy, r.val.precision, r.val.recall, r.val.micro_f1, test
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Raw matrix export for external visualization: 16-byte header (magic,
/// u32 record count, 4 reserved bytes), then per record u32 rows, u32 cols,
/// and row-major little-endian f32 values.
pub fn write_embeddings(path: &Path, mats: &[(usize, usize, Vec<f32>)]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(EMBEDDINGS_MAGIC)?;
    out.write_all(&(mats.len() as u32).to_le_bytes())?;
    out.write_all(&[0u8; 4])?;
    for (rows, cols, data) in mats {
        debug_assert_eq!(rows * cols, data.len());
        out.write_all(&(*rows as u32).to_le_bytes())?;
        out.write_all(&(*cols as u32).to_le_bytes())?;
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_eval_csv(path: &Path, split: &str, report: &EvalReport) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "split,acc,p,r,microf1")?;
    writeln!(
        out,
        "{},{},{},{},{}",
        split, report.accuracy, report.precision, report.recall, report.micro_f1
    )?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmer_core::model::LossValues;

    #[test]
    fn train_log_has_the_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRAIN_LOG_FILE);
        let mut w = TrainLogWriter::create(&path).unwrap();
        w.append(&EpochStats {
            epoch: 0,
            losses: LossValues {
                ml: 1.0,
                common: 2.0,
                private: 3.0,
                diff: 4.0,
                cml: 5.0,
                total: 6.5,
            },
            val: EvalReport {
                accuracy: 0.5,
                precision: 0.25,
                recall: 0.75,
                micro_f1: 0.4,
            },
        })
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,L_ml,L_C,L_P,L_diff,L_cml,L_All,val_acc,val_p,val_r,val_microf1"
        );
        assert_eq!(lines.next().unwrap(), "0,1,2,3,4,5,6.5,0.5,0.25,0.75,0.4");
    }

    #[test]
    fn probe_log_emits_six_rows_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(AMR_PROBE_FILE);
        let mut w = AmrProbeWriter::create(&path).unwrap();
        let probe = DiscriminatorProbe {
            common_mean: [[0.33, 0.33, 0.34]; 3],
            private_mean: [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],
            private_top1: 1.0,
        };
        w.append(3, &probe).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.contains("3,private,audio,0.1,0.8,0.1"));
    }

    #[test]
    fn correlation_files_carry_label_names() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<String> = vec!["joy".into(), "fear".into()];
        let correlations = vec![(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![vec![0.4, 0.6], vec![0.5, 0.5]],
        )];
        let paths = write_correlation_csvs(dir.path(), &correlations, &labels, false).unwrap();
        assert_eq!(paths.len(), 1);
        let text = fs::read_to_string(&paths[0]).unwrap();
        assert!(text.starts_with("label,joy,fear\n"));
        assert!(text.contains("joy,0.4,0.6"));

        let paths = write_correlation_csvs(dir.path(), &correlations, &labels, true).unwrap();
        let text = fs::read_to_string(&paths[0]).unwrap();
        assert!(text.contains("joy,1,2"));
    }

    #[test]
    fn embeddings_file_roundtrips_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        write_embeddings(&path, &[(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], EMBEDDINGS_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
        let first = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
        assert_eq!(first, 1.0);
        assert_eq!(bytes.len(), 16 + 8 + 6 * 4);
    }
}
