//! Dataset ingestion and synthetic image generation.
//!
//! Everything is normalized at the module boundary to an [`ImageBatch`]:
//! 8-bit pixels, channel-major `N x C x 32 x 32`, with a dataset tag and one
//! stable id per sample. Supported sources: IDX image files (MNIST family,
//! with bilinear resize from 28x28), CIFAR-10 binary batches, a raw-tensor
//! container for anything pre-converted offline, and synthetic uniform-noise
//! and constant images.

mod raw;

pub use raw::{read_raw_tensors, write_raw_tensors, RawDtype, RawTensor};
pub(crate) use raw::{
    read_container as raw_read_container, write_container as raw_write_container, Fnv1a,
};

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const IMG_SIDE: usize = 32;

/// A batch of 8-bit images, channel-major `N x C x 32 x 32`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pixels: Vec<u8>,
    channels: usize,
    pub dataset_tag: String,
    pub sample_ids: Vec<String>,
}

impl ImageBatch {
    pub fn new(
        pixels: Vec<u8>,
        channels: usize,
        dataset_tag: impl Into<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Ingest(format!(
                "image batches must have 1 or 3 channels, got {channels}"
            )));
        }
        let per = channels * IMG_SIDE * IMG_SIDE;
        if pixels.len() % per != 0 {
            return Err(Error::Ingest(format!(
                "pixel buffer length {} is not a multiple of {per}",
                pixels.len()
            )));
        }
        let n = pixels.len() / per;
        if sample_ids.len() != n {
            return Err(Error::Ingest(format!(
                "{n} images but {} sample ids",
                sample_ids.len()
            )));
        }
        Ok(ImageBatch {
            pixels,
            channels,
            dataset_tag: dataset_tag.into(),
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixels of one image, `C * 32 * 32` bytes.
    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.channels * IMG_SIDE * IMG_SIDE;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Copy a contiguous range of images out as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ImageBatch {
        let per = self.channels * IMG_SIDE * IMG_SIDE;
        ImageBatch {
            pixels: self.pixels[range.start * per..range.end * per].to_vec(),
            channels: self.channels,
            dataset_tag: self.dataset_tag.clone(),
            sample_ids: self.sample_ids[range.clone()].to_vec(),
        }
    }

    /// Single-image batch (used by the per-sample scorers).
    pub fn single(&self, i: usize) -> ImageBatch {
        self.slice(i..i + 1)
    }

    /// Copy the given images (by index, in order) into a new batch.
    pub fn gather(&self, indices: &[usize]) -> ImageBatch {
        let per = self.channels * IMG_SIDE * IMG_SIDE;
        let mut pixels = Vec::with_capacity(indices.len() * per);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            ids.push(self.sample_ids[i].clone());
        }
        ImageBatch {
            pixels,
            channels: self.channels,
            dataset_tag: self.dataset_tag.clone(),
            sample_ids: ids,
        }
    }
}

/// Replace each pixel independently with Unif{0..255} with probability `mu`.
pub fn perturb_uniform<R: Rng>(x: &ImageBatch, mu: f64, rng: &mut R) -> Result<ImageBatch> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Value(format!(
            "perturbation probability must lie in [0,1], got {mu}"
        )));
    }
    let mut pixels = x.pixels().to_vec();
    if mu > 0.0 {
        for p in pixels.iter_mut() {
            if rng.gen::<f64>() < mu {
                *p = rng.gen::<u8>();
            }
        }
    }
    ImageBatch::new(pixels, x.channels(), x.dataset_tag.clone(), x.sample_ids.clone())
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Ingest(format!("truncated header: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image file (big-endian, magic 0x00000803), optionally
/// validating a companion label file. Images other than 32x32 are resized
/// bilinearly; when that happens the tag gains a `|bilinear32` suffix so the
/// preprocessing travels with every derived artifact.
pub fn load_idx(
    images_path: &Path,
    labels_path: Option<&Path>,
    tag: &str,
) -> Result<ImageBatch> {
    let mut f = std::fs::File::open(images_path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", images_path.display())))?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Ingest(format!(
            "{}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x} (IDX images)",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut f)? as usize;
    let rows = read_u32_be(&mut f)? as usize;
    let cols = read_u32_be(&mut f)? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    f.read_exact(&mut raw).map_err(|e| {
        Error::Ingest(format!(
            "{}: truncated payload ({n} x {rows} x {cols}): {e}",
            images_path.display()
        ))
    })?;

    if let Some(lp) = labels_path {
        let mut lf = std::fs::File::open(lp)
            .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", lp.display())))?;
        let lmagic = read_u32_be(&mut lf)?;
        if lmagic != IDX_LABELS_MAGIC {
            return Err(Error::Ingest(format!(
                "{}: magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x} (IDX labels)",
                lp.display()
            )));
        }
        let ln = read_u32_be(&mut lf)? as usize;
        if ln != n {
            return Err(Error::Ingest(format!(
                "label count {ln} does not match image count {n}"
            )));
        }
    }

    let (pixels, tag) = if rows == IMG_SIDE && cols == IMG_SIDE {
        (raw, tag.to_string())
    } else {
        let mut out = vec![0u8; n * IMG_SIDE * IMG_SIDE];
        for i in 0..n {
            resize_bilinear(
                &raw[i * rows * cols..(i + 1) * rows * cols],
                rows,
                cols,
                &mut out[i * IMG_SIDE * IMG_SIDE..(i + 1) * IMG_SIDE * IMG_SIDE],
            );
        }
        (out, format!("{tag}|bilinear32"))
    };
    let ids = (0..n).map(|i| format!("{tag}/{i}")).collect();
    ImageBatch::new(pixels, 1, tag, ids)
}

/// Bilinear resize of one grayscale plane to 32x32, rounding to the nearest
/// integer intensity. Sample positions follow the usual half-pixel-center
/// convention.
fn resize_bilinear(src: &[u8], rows: usize, cols: usize, dst: &mut [u8]) {
    let sy = rows as f32 / IMG_SIDE as f32;
    let sx = cols as f32 / IMG_SIDE as f32;
    for oy in 0..IMG_SIDE {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let wy = fy - y0 as f32;
        for ox in 0..IMG_SIDE {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (cols - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let wx = fx - x0 as f32;
            let v00 = src[y0 * cols + x0] as f32;
            let v01 = src[y0 * cols + x1] as f32;
            let v10 = src[y1 * cols + x0] as f32;
            let v11 = src[y1 * cols + x1] as f32;
            let top = v00 * (1.0 - wx) + v01 * wx;
            let bot = v10 * (1.0 - wx) + v11 * wx;
            let v = top * (1.0 - wy) + bot * wy;
            dst[oy * IMG_SIDE + ox] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 32 * 32 pixels

/// Load CIFAR-10 binary batch files (3073-byte records, channel-major RGB).
pub fn load_cifar10_binary(paths: &[&Path], tag: &str) -> Result<ImageBatch> {
    let mut pixels = Vec::new();
    let mut ids = Vec::new();
    let mut index = 0usize;
    for path in paths {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Ingest(format!(
                "{}: length {} is not a positive multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            pixels.extend_from_slice(&rec[1..]); // drop the label byte
            ids.push(format!("{tag}/{index}"));
            index += 1;
        }
    }
    ImageBatch::new(pixels, 3, tag, ids)
}

/// i.i.d. uniform pixels over {0..255}.
pub fn gen_noise(n: usize, channels: usize, seed: u64) -> Result<ImageBatch> {
    if n == 0 {
        return Err(Error::Value("gen_noise needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = channels * IMG_SIDE * IMG_SIDE;
    let pixels: Vec<u8> = (0..n * per).map(|_| rng.gen::<u8>()).collect();
    let ids = (0..n).map(|i| format!("noise/{i}")).collect();
    ImageBatch::new(pixels, channels, "noise", ids)
}

/// One uniform value per channel per image; all pixels of a channel equal.
pub fn gen_constant(n: usize, channels: usize, seed: u64) -> Result<ImageBatch> {
    if n == 0 {
        return Err(Error::Value("gen_constant needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = IMG_SIDE * IMG_SIDE;
    let mut pixels = Vec::with_capacity(n * channels * hw);
    for _ in 0..n {
        for _ in 0..channels {
            let v = rng.gen::<u8>();
            pixels.extend(std::iter::repeat(v).take(hw));
        }
    }
    let ids = (0..n).map(|i| format!("constant/{i}")).collect();
    ImageBatch::new(pixels, channels, "constant", ids)
}

/// Adapt channel count: 3 -> 1 keeps the first channel, 1 -> 3 replicates,
/// same count is the identity.
pub fn adapt_channels(x: &ImageBatch, target_nc: usize) -> Result<ImageBatch> {
    if target_nc != 1 && target_nc != 3 {
        return Err(Error::Value(format!(
            "target channel count must be 1 or 3, got {target_nc}"
        )));
    }
    if x.channels == target_nc {
        return Ok(x.clone());
    }
    let hw = IMG_SIDE * IMG_SIDE;
    let n = x.len();
    let mut pixels = Vec::with_capacity(n * target_nc * hw);
    for i in 0..n {
        let img = x.image(i);
        match (x.channels, target_nc) {
            (3, 1) => pixels.extend_from_slice(&img[..hw]),
            (1, 3) => {
                for _ in 0..3 {
                    pixels.extend_from_slice(&img[..hw]);
                }
            }
            _ => unreachable!("channel counts validated above"),
        }
    }
    ImageBatch::new(pixels, target_nc, x.dataset_tag.clone(), x.sample_ids.clone())
}

/// Draw `k` images without replacement, deterministic per seed. Sample ids
/// are carried over from the source.
pub fn subsample(x: &ImageBatch, k: usize, seed: u64) -> Result<ImageBatch> {
    let n = x.len();
    if k > n {
        return Err(Error::Value(format!(
            "cannot subsample {k} from a batch of {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.truncate(k);
    let per = x.channels * IMG_SIDE * IMG_SIDE;
    let mut pixels = Vec::with_capacity(k * per);
    let mut ids = Vec::with_capacity(k);
    for &i in &order {
        pixels.extend_from_slice(x.image(i));
        ids.push(x.sample_ids[i].clone());
    }
    ImageBatch::new(pixels, x.channels, x.dataset_tag.clone(), ids)
}

/// Read an image batch from the raw-tensor container (u8 `pixels` tensor).
pub fn load_raw_tensor(path: &Path) -> Result<ImageBatch> {
    let (meta, tensors) = read_raw_tensors(path)?;
    let tag = meta
        .iter()
        .find(|(k, _)| k == "dataset_tag")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::Ingest("raw tensor file lacks dataset_tag".into()))?;
    let t = tensors
        .iter()
        .find(|t| t.name == "pixels")
        .ok_or_else(|| Error::Ingest("raw tensor file lacks a `pixels` tensor".into()))?;
    let RawDtype::U8(bytes) = &t.data else {
        return Err(Error::Ingest("`pixels` tensor must be u8".into()));
    };
    if t.shape.len() != 4 || t.shape[2] != IMG_SIDE || t.shape[3] != IMG_SIDE {
        return Err(Error::Ingest(format!(
            "`pixels` must be N x C x 32 x 32, got {:?}",
            t.shape
        )));
    }
    let ids = (0..t.shape[0]).map(|i| format!("{tag}/{i}")).collect();
    ImageBatch::new(bytes.clone(), t.shape[1], tag, ids)
}

/// Write an image batch to the raw-tensor container.
pub fn save_raw_tensor(batch: &ImageBatch, path: &Path) -> Result<()> {
    let meta = vec![("dataset_tag".to_string(), batch.dataset_tag.clone())];
    let tensors = vec![RawTensor {
        name: "pixels".into(),
        shape: vec![batch.len(), batch.channels, IMG_SIDE, IMG_SIDE],
        data: RawDtype::U8(batch.pixels.clone()),
    }];
    write_raw_tensors(path, &meta, &tensors)
}
