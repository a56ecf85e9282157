//! `score`: run the configured scorers over the configured datasets, one CSV
//! row per (sample, scorer). Resumable and idempotent: finished rows are
//! kept, missing ones computed, and the file is rewritten in canonical order
//! (dataset, scorer, sample), so an interrupted-and-resumed run produces a
//! byte-identical file.

use std::collections::BTreeMap;

use lrvae::data::{adapt_channels, subsample, ImageBatch};
use lrvae::scores::{
    existing_keys, fit_lmd, read_score_csv, score_batch, write_score_csv, LrTarget, ScoreContext,
    ScoreCsvRow, ScorerKind,
};
use lrvae::vae::load_checkpoint;

use crate::config::{digest_str, ExperimentConfig};
use crate::{CmdError, CmdResult, ScoreArgs};

pub fn run(args: &ScoreArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&args.config).map_err(CmdError::Config)?;
    let seed = args.seed.unwrap_or(cfg.seed);

    let scorers: Vec<ScorerKind> = {
        let mut requested = Vec::new();
        for name in &cfg.score.scorers {
            requested.push(ScorerKind::parse(name).map_err(|e| CmdError::Config(e.to_string()))?);
        }
        // canonical emission order regardless of config order
        ScorerKind::ALL
            .iter()
            .copied()
            .filter(|k| requested.contains(k))
            .collect()
    };
    if scorers.is_empty() {
        return Err(CmdError::Config("no scorers configured".into()));
    }

    let (model, _meta) = load_checkpoint(&args.checkpoint)?;
    let background = match (
        scorers.contains(&ScorerKind::LlrBackground),
        args.background.as_ref(),
    ) {
        (true, None) => {
            return Err(CmdError::Config(
                "scorer llr_bg needs --background <checkpoint>".into(),
            ))
        }
        (_, Some(path)) => Some(load_checkpoint(path)?.0),
        (false, None) => None,
    };

    // Mahalanobis calibration: fit on the training dataset with a held-out
    // 10% validation split (split seed = seed + 1, recorded here).
    let lmd_calib = if scorers.contains(&ScorerKind::Lmd) {
        let fit_name = cfg
            .score
            .lmd_fit
            .clone()
            .or_else(|| cfg.train.dataset.clone())
            .ok_or_else(|| {
                CmdError::Config("scorer lmd needs [score].lmd_fit or [train].dataset".into())
            })?;
        let fit_set_raw = cfg.load_dataset(&fit_name, seed)?;
        let fit_set = adapt_channels(&fit_set_raw, model.config.nc)?;
        let shuffled = subsample(&fit_set, fit_set.len(), seed + 1)?;
        let n_val = (fit_set.len() / 10).max(2);
        let train_part = shuffled.slice(n_val..shuffled.len());
        let val_part = shuffled.slice(0..n_val);
        eprintln!(
            "fitting lmd calibration on {} train / {} validation images (split seed {})",
            train_part.len(),
            val_part.len(),
            seed + 1
        );
        Some(fit_lmd(&model, &train_part, &val_part)?)
    } else {
        None
    };

    let mut cx = ScoreContext::new(&model, seed, cfg.score.k);
    cx.background = background.as_ref();
    cx.lmd = lmd_calib.as_ref();
    for target in [
        LrTarget::Encoder,
        LrTarget::Tau,
        LrTarget::Decoder,
        LrTarget::EncoderDecoder,
    ] {
        let s = cfg.lr_settings(target);
        let slot = cx
            .lr_settings
            .iter_mut()
            .find(|x| x.target == target)
            .expect("all targets present");
        *slot = s;
    }

    let in_name = cfg
        .score
        .in_dataset
        .clone()
        .ok_or_else(|| CmdError::Config("config lacks [score].in_dataset".into()))?;
    let mut dataset_names = vec![in_name];
    dataset_names.extend(cfg.score.ood_datasets.iter().cloned());

    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CmdError::Config(format!("cannot build worker pool: {e}")))?;

    let existing = if args.resume && args.out.exists() {
        read_score_csv(&args.out)?
    } else {
        Vec::new()
    };
    let have = existing_keys(&existing);
    let by_key: BTreeMap<(String, String), ScoreCsvRow> = existing
        .into_iter()
        .map(|r| ((r.sample_id.clone(), r.score_name.clone()), r))
        .collect();

    let mut rows: Vec<ScoreCsvRow> = Vec::new();
    for name in &dataset_names {
        let raw = cfg.load_dataset(name, seed)?;
        let adapted = adapt_channels(&raw, model.config.nc)?;
        let take = cfg.score.samples.min(adapted.len());
        let batch = subsample(&adapted, take, derive_subsample_seed(seed, name))?;
        for &scorer in &scorers {
            let digest = cx.settings_digest(scorer);
            let missing: Vec<usize> = (0..batch.len())
                .filter(|&i| {
                    !have.contains(&(batch.sample_ids[i].clone(), scorer.name().to_string()))
                })
                .collect();
            eprintln!(
                "scoring {}: {} ({} of {} samples to do)",
                name,
                scorer.name(),
                missing.len(),
                batch.len()
            );
            let computed: Vec<ScoreCsvRow> = if missing.is_empty() {
                Vec::new()
            } else {
                let todo = batch.gather(&missing);
                let records = pool.install(|| score_batch(&cx, &todo, scorer))?;
                records
                    .into_iter()
                    .map(|r| ScoreCsvRow {
                        sample_id: r.sample_id,
                        dataset: batch.dataset_tag.clone(),
                        score_name: r.score_name,
                        value: r.value,
                        seed,
                        settings_hash: digest.clone(),
                    })
                    .collect()
            };
            let mut fresh = computed.into_iter();
            for i in 0..batch.len() {
                let key = (batch.sample_ids[i].clone(), scorer.name().to_string());
                if let Some(old) = by_key.get(&key) {
                    rows.push(old.clone());
                } else {
                    rows.push(fresh.next().expect("computed rows cover missing keys"));
                }
            }
        }
    }
    write_score_csv(&args.out, &rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn derive_subsample_seed(seed: u64, name: &str) -> u64 {
    let mut s = format!("subsample:{seed}:");
    s.push_str(name);
    u64::from_str_radix(&digest_str(&s), 16).unwrap_or(seed)
}
