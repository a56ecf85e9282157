//! `report`: render PNG panels from a checkpoint — originals over their
//! reconstructions, and a grid of prior samples.

use lrvae::data::{ImageBatch, IMG_SIDE};
use lrvae::scores::encode_png_sized;
use lrvae::vae::{load_checkpoint, reconstruct, sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::{CmdError, CmdResult, ReportArgs};

/// Tile images (channel-major 32x32 each) into a grid with 2px separators;
/// returns interleaved rows plus the grid dimensions.
fn tile(images: &[&[u8]], channels: usize, cols: usize) -> (Vec<u8>, usize, usize) {
    let gap = 2;
    let rows = images.len().div_ceil(cols);
    let width = cols * IMG_SIDE + (cols - 1) * gap;
    let height = rows * IMG_SIDE + (rows - 1) * gap;
    let mut canvas = vec![0u8; width * height * channels];
    for (i, img) in images.iter().enumerate() {
        let (gy, gx) = (i / cols, i % cols);
        let oy = gy * (IMG_SIDE + gap);
        let ox = gx * (IMG_SIDE + gap);
        for y in 0..IMG_SIDE {
            for x in 0..IMG_SIDE {
                for c in 0..channels {
                    canvas[((oy + y) * width + ox + x) * channels + c] =
                        img[c * IMG_SIDE * IMG_SIDE + y * IMG_SIDE + x];
                }
            }
        }
    }
    (canvas, width, height)
}

fn write_grid(
    path: &std::path::Path,
    images: &[&[u8]],
    channels: usize,
    cols: usize,
) -> lrvae::Result<()> {
    let (canvas, w, h) = tile(images, channels, cols);
    let png = encode_png_sized(w, h, &canvas, channels)?;
    std::fs::write(path, png)?;
    Ok(())
}

pub fn run(args: &ReportArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&args.config).map_err(CmdError::Config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    if args.count == 0 {
        return Err(CmdError::Config("--count must be >= 1".into()));
    }

    let raw = cfg.load_dataset(&args.dataset, seed)?;
    let adapted = lrvae::data::adapt_channels(&raw, model.config.nc)?;
    let n = args.count.min(adapted.len());
    let batch: ImageBatch = adapted.slice(0..n);
    let recon = reconstruct(&model, &batch)?;

    std::fs::create_dir_all(&args.out).map_err(lrvae::Error::from)?;
    // originals on the top row, reconstructions below
    let mut panel: Vec<&[u8]> = (0..n).map(|i| batch.image(i)).collect();
    panel.extend((0..n).map(|i| recon.image(i)));
    write_grid(
        &args.out.join("reconstructions.png"),
        &panel,
        model.config.nc,
        n,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = sample(&model, 64, &mut rng)?;
    let tiles: Vec<&[u8]> = (0..64).map(|i| samples.image(i)).collect();
    write_grid(&args.out.join("samples.png"), &tiles, model.config.nc, 8)?;

    // mean absolute reconstruction error, for a quick numeric readout
    let mae: f64 = batch
        .pixels()
        .iter()
        .zip(recon.pixels().iter())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / batch.pixels().len() as f64;
    std::fs::write(
        args.out.join("report.txt"),
        format!(
            "dataset: {}\nimages: {n}\nmean |x - reconstruct(x)|: {mae:.2} / 255\n",
            batch.dataset_tag
        ),
    )
    .map_err(lrvae::Error::from)?;
    eprintln!("wrote panels to {}", args.out.display());
    Ok(())
}
