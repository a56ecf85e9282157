//! Checkpoint persistence on the shared tensor container.
//!
//! The header records the architecture configuration and whatever run
//! metadata the caller supplies (seed, epoch count, dataset tag); the payload
//! is every parameter and running statistic as a named f32 tensor. Round
//! trips are bit-exact and guarded by the container checksum.

use std::collections::BTreeMap;
use std::path::Path;

use super::{decoder_plan, encoder_plan, BnStats, VaeConfig, VaeModel};
use crate::data::{RawDtype, RawTensor};
use crate::tensor::{Params, Tensor};
use crate::{Error, Result};

pub(crate) const CHECKPOINT_MAGIC: &[u8; 8] = b"LRGVAE01";
const FORMAT_VERSION: &str = "1";

fn config_meta(cfg: &VaeConfig) -> Vec<(String, String)> {
    vec![
        ("format_version".into(), FORMAT_VERSION.into()),
        ("nz".into(), cfg.nz.to_string()),
        ("nf".into(), cfg.nf.to_string()),
        ("nc".into(), cfg.nc.to_string()),
        ("beta".into(), cfg.beta.to_string()),
        (
            "capacity_multiplier".into(),
            cfg.capacity_multiplier.to_string(),
        ),
        // the encoder's 2*nz channels split into (mu, log_sigma) in that order
        ("posterior_split".into(), "mu_first".into()),
    ]
}

fn push_params(out: &mut Vec<RawTensor>, params: &Params) {
    for p in params.iter() {
        out.push(RawTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: RawDtype::F32(p.value.data().to_vec()),
        });
    }
}

fn push_stats(out: &mut Vec<RawTensor>, prefix: &str, stats: &[BnStats]) {
    for (i, s) in stats.iter().enumerate() {
        out.push(RawTensor {
            name: format!("{prefix}.bn{}.running_mean", i + 1),
            shape: s.mean.shape().to_vec(),
            data: RawDtype::F32(s.mean.data().to_vec()),
        });
        out.push(RawTensor {
            name: format!("{prefix}.bn{}.running_var", i + 1),
            shape: s.var.shape().to_vec(),
            data: RawDtype::F32(s.var.data().to_vec()),
        });
    }
}

/// Serialize the model. `extra_meta` lands in the header verbatim (training
/// seed, epoch count, dataset tag, anything the pipeline wants to pin).
pub fn save_checkpoint(
    model: &VaeModel,
    extra_meta: &[(String, String)],
    path: &Path,
) -> Result<()> {
    let mut meta = config_meta(&model.config);
    for (k, v) in extra_meta {
        if meta.iter().any(|(mk, _)| mk == k) {
            return Err(Error::Checkpoint(format!(
                "metadata key `{k}` collides with a reserved header key"
            )));
        }
        meta.push((k.clone(), v.clone()));
    }
    let mut tensors = Vec::new();
    push_params(&mut tensors, &model.encoder);
    push_stats(&mut tensors, "enc", &model.enc_stats);
    push_params(&mut tensors, &model.decoder);
    push_stats(&mut tensors, "dec", &model.dec_stats);
    crate::data::raw_write_container(path, CHECKPOINT_MAGIC, &meta, &tensors)
}

fn meta_value<'a>(meta: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| {
            Error::Checkpoint(format!("{}: header lacks `{key}`", path.display()))
        })
}

fn parse<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("header field `{key}` has bad value `{v}`")))
}

/// Load a checkpoint; header is validated before any payload tensor is
/// accepted, and every tensor must match the shape the header's architecture
/// implies. Returns the model plus the full header metadata.
pub fn load_checkpoint(path: &Path) -> Result<(VaeModel, Vec<(String, String)>)> {
    let (meta, tensors) = crate::data::raw_read_container(path, CHECKPOINT_MAGIC)?;
    let version = meta_value(&meta, "format_version", path)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let config = VaeConfig {
        nz: parse(meta_value(&meta, "nz", path)?, "nz")?,
        nf: parse(meta_value(&meta, "nf", path)?, "nf")?,
        nc: parse(meta_value(&meta, "nc", path)?, "nc")?,
        beta: parse(meta_value(&meta, "beta", path)?, "beta")?,
        capacity_multiplier: parse(
            meta_value(&meta, "capacity_multiplier", path)?,
            "capacity_multiplier",
        )?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{}: bad header config: {e}", path.display())))?;

    let by_name: BTreeMap<&str, &RawTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if by_name.len() != tensors.len() {
        return Err(Error::Checkpoint("duplicate tensor names".into()));
    }
    let take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, architecture expects {shape:?}",
                t.shape
            )));
        }
        let RawDtype::F32(values) = &t.data else {
            return Err(Error::Checkpoint(format!("tensor `{name}` must be f32")));
        };
        Tensor::new(shape.to_vec(), values.clone())
    };

    let load_side = |plan: &[super::LayerSpec],
                         prefix: &str,
                         transposed: bool|
     -> Result<(Params, Vec<BnStats>)> {
        let mut params = Params::new();
        let mut stats = Vec::new();
        for (li, l) in plan.iter().enumerate() {
            let shape = if transposed {
                vec![l.c_in, l.c_out, super::KERNEL, super::KERNEL]
            } else {
                vec![l.c_out, l.c_in, super::KERNEL, super::KERNEL]
            };
            let name = format!("{prefix}.conv{}.weight", li + 1);
            params.push(name.clone(), take(&name, &shape)?);
            if l.bn.is_some() {
                let sname = format!("{prefix}.bn{}.scale", li + 1);
                params.push(sname.clone(), take(&sname, &[l.c_out])?);
                let hname = format!("{prefix}.bn{}.shift", li + 1);
                params.push(hname.clone(), take(&hname, &[l.c_out])?);
                stats.push(BnStats {
                    mean: take(&format!("{prefix}.bn{}.running_mean", li + 1), &[l.c_out])?,
                    var: take(&format!("{prefix}.bn{}.running_var", li + 1), &[l.c_out])?,
                });
            }
        }
        Ok((params, stats))
    };

    let (encoder, enc_stats) = load_side(&encoder_plan(&config), "enc", false)?;
    let (decoder, dec_stats) = load_side(&decoder_plan(&config), "dec", true)?;
    Ok((
        VaeModel {
            config,
            encoder,
            decoder,
            enc_stats,
            dec_stats,
        },
        meta,
    ))
}

/// Order-sensitive digest of every parameter and running statistic. Used to
/// assert that scoring never mutates a shared model.
pub fn model_digest(model: &VaeModel) -> u64 {
    let mut h = crate::data::Fnv1a::new();
    let mut eat_tensor = |t: &Tensor| {
        for v in t.data() {
            h.update(&v.to_le_bytes());
        }
    };
    for p in model.encoder.iter().chain(model.decoder.iter()) {
        eat_tensor(&p.value);
    }
    for s in model.enc_stats.iter().chain(model.dec_stats.iter()) {
        eat_tensor(&s.mean);
        eat_tensor(&s.var);
    }
    h.update(&(model.config.nz as u64).to_le_bytes());
    h.0
}
