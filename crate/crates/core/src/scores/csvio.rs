//! The score CSV stream: `sample_id,dataset,score_name,value,seed,settings_hash`,
//! one row per (sample, scorer). Appends are resumable: existing
//! (sample_id, score_name) pairs are recognized and skipped by the caller.

use std::collections::HashSet;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreCsvRow {
    pub sample_id: String,
    pub dataset: String,
    pub score_name: String,
    pub value: f64,
    pub seed: u64,
    pub settings_hash: String,
}

const HEADER: [&str; 6] = [
    "sample_id",
    "dataset",
    "score_name",
    "value",
    "seed",
    "settings_hash",
];

/// Read every complete, well-formed row. A trailing partial line (e.g. from
/// an interrupted run) is dropped rather than treated as fatal, so a resumed
/// run can repair the file.
pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreCsvRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let Ok(rec) = rec else { continue };
        if rec.len() != HEADER.len() {
            continue;
        }
        let (Ok(value), Ok(seed)) = (rec[3].parse::<f64>(), rec[4].parse::<u64>()) else {
            continue;
        };
        rows.push(ScoreCsvRow {
            sample_id: rec[0].to_string(),
            dataset: rec[1].to_string(),
            score_name: rec[2].to_string(),
            value,
            seed,
            settings_hash: rec[5].to_string(),
        });
    }
    Ok(rows)
}

/// Write a full CSV (header + rows).
pub fn write_score_csv(path: &Path, rows: &[ScoreCsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    w.write_record(HEADER)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for r in rows {
        w.write_record([
            r.sample_id.as_str(),
            r.dataset.as_str(),
            r.score_name.as_str(),
            &format!("{:.17e}", r.value),
            &r.seed.to_string(),
            r.settings_hash.as_str(),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    w.flush()?;
    Ok(())
}

/// Keys already present in a score file, for resumable runs.
pub fn existing_keys(rows: &[ScoreCsvRow]) -> HashSet<(String, String)> {
    rows.iter()
        .map(|r| (r.sample_id.clone(), r.score_name.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_line_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let rows = vec![
            ScoreCsvRow {
                sample_id: "a/0".into(),
                dataset: "a".into(),
                score_name: "likelihood".into(),
                value: -1234.5678,
                seed: 7,
                settings_hash: "00ff".into(),
            },
            ScoreCsvRow {
                sample_id: "a/1".into(),
                dataset: "a".into(),
                score_name: "lr_e".into(),
                value: 3.25,
                seed: 7,
                settings_hash: "00ff".into(),
            },
        ];
        write_score_csv(&path, &rows).unwrap();
        let got = read_score_csv(&path).unwrap();
        assert_eq!(got, rows);

        // simulate an interrupted append: garbage partial line at the end
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"a/2,a,lr_e,1.2");
        std::fs::write(&path, &bytes).unwrap();
        let got = read_score_csv(&path).unwrap();
        assert_eq!(got, rows, "partial tail row must be dropped");
        let keys = existing_keys(&got);
        assert!(keys.contains(&("a/0".into(), "likelihood".into())));
        assert!(!keys.contains(&("a/2".into(), "lr_e".into())));
    }

    #[test]
    fn value_precision_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let v = -5678.123456789012345;
        let rows = vec![ScoreCsvRow {
            sample_id: "x/0".into(),
            dataset: "x".into(),
            score_name: "ic_png".into(),
            value: v,
            seed: 0,
            settings_hash: "h".into(),
        }];
        write_score_csv(&path, &rows).unwrap();
        assert_eq!(read_score_csv(&path).unwrap()[0].value, v);
    }
}
