//! Shard export for running clients as separate processes on identical data.
//!
//! `"FDAT" | version u16 | client_id u32 | .fedw blob (F64)` where the blob
//! holds `train.pixels [n,16,16]`, `train.labels [n]`, `test.pixels`, `test.labels`.

use super::codec::Cursor;
use super::{decode_params_with_dtype, encode_params, Dtype, WireError};
use crate::data::{Class, LabeledImage, Shard, PIXELS, SIDE};
use crate::nn::{ParamSet, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"FDAT";
pub const DATASET_VERSION: u16 = 1;

fn split_tensors(prefix: &str, images: &[LabeledImage]) -> Vec<(String, Tensor)> {
    let pixels: Vec<f64> = images.iter().flat_map(|i| i.pixels).collect();
    let labels: Vec<f64> = images.iter().map(|i| i.label.index() as f64).collect();
    vec![
        (
            format!("{prefix}.pixels"),
            Tensor::new(vec![images.len(), SIDE, SIDE], pixels).expect("pixel count matches dims"),
        ),
        (
            format!("{prefix}.labels"),
            Tensor::new(vec![images.len()], labels).expect("label count matches dims"),
        ),
    ]
}

pub fn export_shard(shard: &Shard) -> Result<Vec<u8>, WireError> {
    if shard.train.is_empty() || shard.test.is_empty() {
        return Err(WireError::Encoding("shard partitions must be non-empty".into()));
    }
    let mut entries = split_tensors("train", &shard.train);
    entries.extend(split_tensors("test", &shard.test));
    let params = ParamSet::new(entries).expect("names are distinct");
    let mut out = DATASET_MAGIC.to_vec();
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&shard.client_id.to_le_bytes());
    out.extend(encode_params(&params, Dtype::F64)?);
    Ok(out)
}

fn images_from(params: &ParamSet, prefix: &str) -> Result<Vec<LabeledImage>, WireError> {
    let missing = |what: &str| WireError::Malformed(format!("dataset lacks {prefix}.{what}"));
    let pixels = params.get(&format!("{prefix}.pixels")).ok_or_else(|| missing("pixels"))?;
    let labels = params.get(&format!("{prefix}.labels")).ok_or_else(|| missing("labels"))?;
    let n = labels.len();
    if labels.dims().len() != 1 || pixels.dims() != [n, SIDE, SIDE] {
        return Err(WireError::Malformed(format!("{prefix}: inconsistent dims")));
    }
    labels
        .data()
        .iter()
        .zip(pixels.data().chunks_exact(PIXELS))
        .map(|(&l, px)| {
            let label = (l.fract() == 0.0 && l >= 0.0)
                .then(|| Class::from_index(l as usize))
                .flatten()
                .ok_or_else(|| WireError::Malformed(format!("{prefix}: invalid label {l}")))?;
            Ok(LabeledImage {
                pixels: px.try_into().expect("chunk has PIXELS elements"),
                label,
            })
        })
        .collect()
}

pub fn import_shard(bytes: &[u8]) -> Result<Shard, WireError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(WireError::BadMagic {
            expected: DATASET_MAGIC,
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u16()?;
    if version != DATASET_VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let client_id = cur.u32()?;
    let (params, _) = decode_params_with_dtype(&bytes[cur.position()..])?;
    Ok(Shard {
        client_id,
        train: images_from(&params, "train")?,
        test: images_from(&params, "test")?,
    })
}
