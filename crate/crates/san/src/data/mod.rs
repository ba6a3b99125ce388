//! Datasets of posed person images with semantic parsing maps.
//!
//! A dataset split lives in one directory:
//!
//! ```text
//! <root>/<split>/
//!   manifest.json          records, label count, image size, seed
//!   images/<stem>.png      RGB8, mapped to [-1, 1] in memory
//!   parsing/<stem>.png     8-bit semantic label per pixel
//!   masks/<stem>.png       0 or 255 per pixel, person/background
//! ```
//!
//! Records carry `(identity, pose, synthetic)`; training pairs are ordered
//! same-identity record pairs with distinct indices.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub mod io;
pub mod synth;

pub use io::{load_dataset, read_manifest, write_manifest, write_record};
pub use synth::{synth_generate, SynthConfig};

/// Semantic label assignments. Background must be zero; the remaining slots
/// follow a human-parsing convention with room for unused classes.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_TORSO: u8 = 5;
pub const LABEL_BAG: u8 = 11;
pub const LABEL_HEAD: u8 = 13;
pub const LABEL_ARM_LEFT: u8 = 14;
pub const LABEL_ARM_RIGHT: u8 = 15;
pub const LABEL_LEG_LEFT: u8 = 16;
pub const LABEL_LEG_RIGHT: u8 = 17;
/// Smallest label count that covers every class the renderer emits.
pub const MIN_LABELS: usize = 18;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub identity: u32,
    pub pose: u32,
    /// True for generated images added by the augmentation pipeline.
    pub synthetic: bool,
    /// File stem shared by the image, parsing, and mask files.
    pub stem: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub labels: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub records: Vec<Record>,
}

/// One loaded record: image in `[-1, 1]`, labels, binary mask.
#[derive(Clone)]
pub struct Sample {
    pub image: Array3<f32>,  // (3, h, w)
    pub parsing: Array2<u8>, // (h, w), values < labels
    pub mask: Array2<u8>,    // (h, w), 0 or 1
}

pub struct Dataset {
    pub labels: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub records: Vec<Record>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices grouped by identity, in ascending identity order.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.identity).or_default().push(i);
        }
        map
    }

    /// Sorted list of distinct identities.
    pub fn identities(&self) -> Vec<u32> {
        self.by_identity().keys().copied().collect()
    }
}

/// All ordered same-identity pairs `(source, target)` with distinct records,
/// in (identity, source, target) order. Errors if no identity has two
/// records, since then there is nothing to train or evaluate on.
pub fn make_pairs(ds: &Dataset) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (_, idxs) in ds.by_identity() {
        for &i in &idxs {
            for &j in &idxs {
                if i != j {
                    pairs.push((i, j));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    Ok(pairs)
}

/// Errors if the two splits share any identity. Generation quality and
/// re-identification protocols both assume disjoint identity sets.
pub fn ensure_disjoint_identities(a: &Dataset, b: &Dataset) -> Result<()> {
    let bs: std::collections::BTreeSet<u32> = b.records.iter().map(|r| r.identity).collect();
    for r in &a.records {
        if bs.contains(&r.identity) {
            return Err(Error::SplitOverlap {
                identity: r.identity.to_string(),
            });
        }
    }
    Ok(())
}

/// Map an 8-bit channel value to the model's `[-1, 1]` range.
pub fn unit_from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

/// Inverse of [`unit_from_u8`], rounding and clamping.
pub fn u8_from_unit(v: f32) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// One-hot encode a parsing map to `(labels, h, w)`. Any pixel holding a
/// label outside `0..labels` is a data error and is reported with its
/// position.
pub fn encode_semantic_onehot(
    parsing: &Array2<u8>,
    labels: usize,
    context: &str,
) -> Result<Array3<f32>> {
    let (h, w) = parsing.dim();
    let mut out = Array3::<f32>::zeros((labels, h, w));
    for y in 0..h {
        for x in 0..w {
            let l = parsing[[y, x]] as usize;
            if l >= labels {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    labels,
                    x,
                    y,
                    context: context.to_string(),
                });
            }
            out[[l, y, x]] = 1.0;
        }
    }
    Ok(out)
}

/// Binary person mask implied by a parsing map: every non-background pixel.
pub fn mask_from_semantic(parsing: &Array2<u8>) -> Array2<u8> {
    parsing.mapv(|l| u8::from(l != LABEL_BACKGROUND))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_dataset(ids: &[u32]) -> Dataset {
        let records: Vec<Record> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Record {
                identity: id,
                pose: i as u32,
                synthetic: false,
                stem: format!("{id:04}_{i:03}"),
            })
            .collect();
        let sample = Sample {
            image: Array3::zeros((3, 4, 4)),
            parsing: Array2::zeros((4, 4)),
            mask: Array2::zeros((4, 4)),
        };
        let samples = vec![sample; records.len()];
        Dataset {
            labels: MIN_LABELS,
            seed: 0,
            height: 4,
            width: 4,
            records,
            samples,
        }
    }

    #[test]
    fn pairs_are_ordered_same_identity_and_complete() {
        let ds = tiny_dataset(&[1, 1, 1, 2, 2, 3]);
        let pairs = make_pairs(&ds).unwrap();
        // Identity 1 has 3 records -> 6 ordered pairs; identity 2 -> 2; identity 3 -> 0.
        assert_eq!(pairs.len(), 8);
        assert!(pairs.iter().all(|&(i, j)| {
            i != j && ds.records[i].identity == ds.records[j].identity
        }));
        assert_eq!(pairs[0], (0, 1));
        assert_eq!(pairs.last().copied().unwrap(), (4, 3));
    }

    #[test]
    fn no_pairs_is_an_error() {
        let ds = tiny_dataset(&[1, 2, 3]);
        assert!(matches!(make_pairs(&ds), Err(Error::NoPairs)));
    }

    #[test]
    fn split_overlap_is_detected() {
        let a = tiny_dataset(&[1, 2]);
        let b = tiny_dataset(&[3, 4]);
        assert!(ensure_disjoint_identities(&a, &b).is_ok());
        let c = tiny_dataset(&[4, 5]);
        match ensure_disjoint_identities(&b, &c) {
            Err(Error::SplitOverlap { identity }) => assert_eq!(identity, "4"),
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn unit_range_roundtrip() {
        assert_eq!(unit_from_u8(0), -1.0);
        assert_eq!(unit_from_u8(255), 1.0);
        for v in [0u8, 1, 17, 128, 200, 254, 255] {
            assert_eq!(u8_from_unit(unit_from_u8(v)), v);
        }
        assert_eq!(u8_from_unit(-2.0), 0);
        assert_eq!(u8_from_unit(2.0), 255);
    }

    #[test]
    fn onehot_encodes_each_pixel_once() {
        let p = array![[0u8, 1], [3, 2]];
        let oh = encode_semantic_onehot(&p, 4, "test").unwrap();
        assert_eq!(oh.dim(), (4, 2, 2));
        // Every position has exactly one hot channel, matching the label.
        for y in 0..2 {
            for x in 0..2 {
                let col: Vec<f32> = (0..4).map(|l| oh[[l, y, x]]).collect();
                assert_eq!(col.iter().sum::<f32>(), 1.0);
                assert_eq!(oh[[p[[y, x]] as usize, y, x]], 1.0);
            }
        }
    }

    #[test]
    fn onehot_rejects_out_of_range_labels() {
        let p = array![[0u8, 9]];
        match encode_semantic_onehot(&p, 4, "bad.png") {
            Err(Error::LabelOutOfRange {
                label, labels, x, y, ..
            }) => {
                assert_eq!((label, labels, x, y), (9, 4, 1, 0));
            }
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn mask_is_nonbackground_union() {
        let p = array![[0u8, 5], [13, 0]];
        assert_eq!(mask_from_semantic(&p), array![[0u8, 1], [1, 0]]);
    }
}
