//! Likelihood ratio against a background model trained on perturbed pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ScoreRecord;
use crate::data::ImageBatch;
use crate::vae::{encode, iwae_estimate, VaeModel};
use crate::{Error, Result};

/// `value = iwae_background(x) - iwae_main(x)`, so inputs the main model
/// explains better than the background score low (in-distribution). Both
/// estimates share one sampling stream.
pub fn score_llr_background<R: Rng>(
    model: &VaeModel,
    background: &VaeModel,
    x: &ImageBatch,
    k: usize,
    rng: &mut R,
) -> Result<Vec<ScoreRecord>> {
    if model.config != background.config {
        return Err(Error::Score(format!(
            "main and background model configs differ: {:?} vs {:?}",
            model.config, background.config
        )));
    }
    let seed = rng.gen::<u64>();
    let tau_main = encode(model, x)?;
    let tau_bg = encode(background, x)?;
    let main = iwae_estimate(model, x, &tau_main, k, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let bg = iwae_estimate(background, x, &tau_bg, k, &mut ChaCha8Rng::seed_from_u64(seed))?;
    main.iter()
        .zip(bg.iter())
        .zip(x.sample_ids.iter())
        .map(|((m, b), id)| ScoreRecord::new(id.clone(), "llr_bg", b - m))
        .collect()
}
