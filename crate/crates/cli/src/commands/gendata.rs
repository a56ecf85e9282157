//! `gen-data`: synthesize noise/constant image sets, or convert IDX and
//! CIFAR-10 binary files, into the raw-tensor container.

use std::path::Path;

use lrvae::data::{gen_constant, gen_noise, load_cifar10_binary, load_idx, save_raw_tensor};

use crate::{CmdError, CmdResult, GenDataArgs};

pub fn run(args: &GenDataArgs) -> CmdResult {
    let batch = match args.kind.as_str() {
        "noise" => gen_noise(args.count, args.channels, args.seed)?,
        "constant" => gen_constant(args.count, args.channels, args.seed)?,
        "from-idx" => {
            let images = args.images.as_ref().ok_or_else(|| {
                CmdError::Config("--kind from-idx needs --images <path>".into())
            })?;
            let tag = args
                .tag
                .clone()
                .ok_or_else(|| CmdError::Config("--kind from-idx needs --tag".into()))?;
            let mut b = load_idx(images, args.labels.as_deref(), &tag)?;
            if args.count > 0 && args.count < b.len() {
                b = b.slice(0..args.count);
            }
            b
        }
        "from-cifar" => {
            if args.cifar.is_empty() {
                return Err(CmdError::Config(
                    "--kind from-cifar needs at least one --cifar <path>".into(),
                ));
            }
            let tag = args
                .tag
                .clone()
                .ok_or_else(|| CmdError::Config("--kind from-cifar needs --tag".into()))?;
            let paths: Vec<&Path> = args.cifar.iter().map(|p| p.as_path()).collect();
            let mut b = load_cifar10_binary(&paths, &tag)?;
            if args.count > 0 && args.count < b.len() {
                b = b.slice(0..args.count);
            }
            b
        }
        other => {
            return Err(CmdError::Config(format!(
                "unknown --kind `{other}` (noise | constant | from-idx | from-cifar)"
            )))
        }
    };
    save_raw_tensor(&batch, &args.out)?;
    eprintln!(
        "wrote {} images ({}ch, tag `{}`) to {}",
        batch.len(),
        batch.channels(),
        batch.dataset_tag,
        args.out.display()
    );
    Ok(())
}
