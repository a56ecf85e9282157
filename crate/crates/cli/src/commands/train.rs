//! `train` and `train-background`: fit a model per the config and persist a
//! checkpoint plus the per-epoch loss trace.

use std::path::{Path, PathBuf};

use lrvae::scores::BackgroundSettings;
use lrvae::vae::{save_checkpoint, train, EpochStats, VaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::{CmdError, CmdResult, TrainArgs};

fn write_train_log(path: &Path, trace: &[EpochStats]) -> lrvae::Result<()> {
    let mut out = String::from("epoch,mean_neg_elbo,wall_secs\n");
    for e in trace {
        out.push_str(&format!("{},{:.6},{:.3}\n", e.epoch, e.mean_neg_elbo, e.wall_secs));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Output path for one sweep combination.
fn sweep_path(base: &Path, beta: Option<f64>, cap: Option<f64>) -> PathBuf {
    if beta.is_none() && cap.is_none() {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("ckpt");
    let mut name = stem.to_string();
    if let Some(b) = beta {
        name.push_str(&format!("_beta{b}"));
    }
    if let Some(c) = cap {
        name.push_str(&format!("_cap{c}"));
    }
    base.with_file_name(format!("{name}.{ext}"))
}

pub fn run(args: &TrainArgs, background: bool) -> CmdResult {
    let cfg = ExperimentConfig::load(&args.config).map_err(CmdError::Config)?;
    let seed = args.seed.unwrap_or(cfg.seed);

    let dataset_name = cfg
        .train
        .dataset
        .clone()
        .ok_or_else(|| CmdError::Config("config lacks [train].dataset".into()))?;
    let data = cfg.load_dataset(&dataset_name, seed)?;

    let mut opts = cfg.train_options(seed);
    if background {
        let defaults = BackgroundSettings::for_channels(cfg.model.nc);
        opts.perturb_mu = cfg.train.perturb_mu.unwrap_or(defaults.mu);
        opts.weight_decay = cfg.train.weight_decay.unwrap_or(defaults.weight_decay);
        let settings = BackgroundSettings {
            mu: opts.perturb_mu,
            weight_decay: opts.weight_decay,
        };
        settings
            .validate()
            .map_err(|e| CmdError::Config(e.to_string()))?;
    }

    // sweep lists expand into independent runs, one artifact each
    let betas: Vec<Option<f64>> = if cfg.sweep.beta.is_empty() {
        vec![None]
    } else {
        cfg.sweep.beta.iter().copied().map(Some).collect()
    };
    let caps: Vec<Option<f64>> = if cfg.sweep.capacity_multiplier.is_empty() {
        vec![None]
    } else {
        cfg.sweep.capacity_multiplier.iter().copied().map(Some).collect()
    };

    for &beta in &betas {
        for &cap in &caps {
            let mut vae_cfg = cfg.vae_config();
            if let Some(b) = beta {
                vae_cfg.beta = b;
            }
            if let Some(c) = cap {
                vae_cfg.capacity_multiplier = c;
            }
            let out = sweep_path(&args.out, beta, cap);

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = VaeModel::init(vae_cfg, &mut rng)?;
            eprintln!(
                "training on {} ({} images, nc={}) for {} epochs -> {}",
                data.dataset_tag,
                data.len(),
                data.channels(),
                opts.epochs,
                out.display()
            );
            let trace = train(&mut model, &data, &opts)?;

            let mut meta = vec![
                ("seed".to_string(), seed.to_string()),
                ("epochs".to_string(), opts.epochs.to_string()),
                ("dataset_tag".to_string(), data.dataset_tag.clone()),
                ("config_digest".to_string(), cfg.digest.clone()),
                ("lr".to_string(), opts.lr.to_string()),
                ("batch_size".to_string(), opts.batch_size.to_string()),
                (
                    "trained_by".to_string(),
                    if background { "train-background" } else { "train" }.to_string(),
                ),
            ];
            if background {
                meta.push(("perturb_mu".to_string(), opts.perturb_mu.to_string()));
                meta.push(("weight_decay".to_string(), opts.weight_decay.to_string()));
            }
            save_checkpoint(&model, &meta, &out)?;
            write_train_log(&out.with_extension("train_log.csv"), &trace)?;
        }
    }
    Ok(())
}
