//! `eval`: turn score CSVs into the metrics table and per-pairing curve
//! files, in the fixed (dataset, scorer) order.

use std::collections::{BTreeMap, BTreeSet};

use lrvae::eval::{
    auprc, auroc, emit_curves, fpr_at_tpr, write_histogram_csv, write_metrics_csv, write_roc_csv,
    LabeledScores, MetricsRow,
};
use lrvae::scores::read_score_csv;

use crate::{CmdError, CmdResult, EvalArgs};

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn run(args: &EvalArgs) -> CmdResult {
    // (dataset -> scorer -> values), values in file order
    let mut table: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for path in &args.scores {
        for row in read_score_csv(path)? {
            table
                .entry(row.dataset)
                .or_default()
                .entry(row.score_name)
                .or_default()
                .push(row.value);
        }
    }
    let in_scores = table.remove(&args.in_dataset).ok_or_else(|| {
        CmdError::Config(format!(
            "no rows for in-distribution dataset `{}` in the score files",
            args.in_dataset
        ))
    })?;
    if table.is_empty() {
        return Err(CmdError::Config(
            "score files contain no OOD datasets to pair against".into(),
        ));
    }
    std::fs::create_dir_all(&args.out).map_err(lrvae::Error::from)?;

    let scorers: BTreeSet<&String> = in_scores.keys().collect();
    let mut rows: Vec<MetricsRow> = Vec::new();
    for (ood_name, ood_scores) in &table {
        for &scorer in &scorers {
            let Some(ood_vals) = ood_scores.get(scorer) else {
                eprintln!("note: `{scorer}` missing for pairing vs `{ood_name}`");
                rows.push(MetricsRow {
                    ood_dataset: ood_name.clone(),
                    scorer: scorer.clone(),
                    metrics: None,
                });
                continue;
            };
            let s = LabeledScores::new(in_scores[scorer].clone(), ood_vals.clone(), scorer.clone())?;
            let a = auroc(&s)?;
            let p = auprc(&s)?;
            let f = fpr_at_tpr(&s, args.tpr_target)?;
            rows.push(MetricsRow {
                ood_dataset: ood_name.clone(),
                scorer: scorer.clone(),
                metrics: Some((a, p, f)),
            });
            let (roc, hist) = emit_curves(&s, args.bins)?;
            let base = format!("{}_{}", sanitize(ood_name), sanitize(scorer));
            write_roc_csv(&args.out.join(format!("roc_{base}.csv")), &roc)?;
            write_histogram_csv(&args.out.join(format!("hist_{base}.csv")), &hist)?;
        }
    }
    let metrics_path = args.out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &rows)?;
    // one line per pairing on stdout for quick reading
    for r in &rows {
        match r.metrics {
            Some((a, p, f)) => println!(
                "{:<24} {:<12} auroc {:.3}  auprc {:.3}  fpr{} {:.3}",
                r.ood_dataset,
                r.scorer,
                a,
                p,
                (args.tpr_target * 100.0) as u32,
                f
            ),
            None => println!("{:<24} {:<12} absent", r.ood_dataset, r.scorer),
        }
    }
    eprintln!("wrote {}", metrics_path.display());
    Ok(())
}
