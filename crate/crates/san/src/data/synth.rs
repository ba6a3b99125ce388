//! Deterministic synthetic person dataset.
//!
//! Each identity is a stick figure with its own clothing colors, body
//! proportions, and optional bag; each pose varies limb angles and position.
//! Identity appearance is constant across poses, so pose transfer within an
//! identity is well defined, and torso hues are evenly spaced on the color
//! wheel so identities stay separable for re-identification.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    mask_from_semantic, write_manifest, write_record, Manifest, Record, LABEL_ARM_LEFT,
    LABEL_ARM_RIGHT, LABEL_BAG, LABEL_BACKGROUND, LABEL_HEAD, LABEL_LEG_LEFT, LABEL_LEG_RIGHT,
    LABEL_TORSO, MIN_LABELS,
};
use crate::rng::derive;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub poses_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub seed: u64,
    /// Half-range of the per-identity background color offset; 0 gives every
    /// image the same background.
    pub background_variation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_identities: 20,
            test_identities: 6,
            poses_per_identity: 8,
            height: 32,
            width: 32,
            labels: 20,
            seed: 42,
            background_variation: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labels < MIN_LABELS {
            return Err(Error::Config(format!(
                "labels = {} but the renderer emits labels up to {}",
                self.labels,
                MIN_LABELS - 1
            )));
        }
        if self.train_identities == 0 {
            return Err(Error::Config("train_identities must be positive".into()));
        }
        if self.poses_per_identity < 2 {
            return Err(Error::Config(
                "poses_per_identity must be at least 2 to form pairs".into(),
            ));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("image size must be at least 16x16".into()));
        }
        if !(0.0..=0.6).contains(&self.background_variation) {
            return Err(Error::Config(format!(
                "background_variation {} outside [0, 0.6]",
                self.background_variation
            )));
        }
        Ok(())
    }
}

/// Stable appearance attributes of one identity.
#[derive(Clone, Debug)]
pub struct Look {
    torso: [f32; 3],
    pants: [f32; 3],
    skin: [f32; 3],
    hair: [f32; 3],
    background: [f32; 3],
    /// `(side, color)` if this identity carries a bag; side is -1 or 1.
    bag: Option<(f64, [f32; 3])>,
    torso_hw: f64, // torso capsule half-width
    head_r: f64,
    arm_len: f64,
    leg_len: f64,
    limb_r: f64,
}

/// Geometry of one pose: angles in radians from straight down, offsets in
/// normalized image units.
#[derive(Clone, Debug)]
pub struct PoseParams {
    tx: f64,
    ty: f64,
    arm_left: f64,
    arm_right: f64,
    leg_left: f64,
    leg_right: f64,
    lean: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    // Stored straight in the model's [-1, 1] range.
    [
        (r * 2.0 - 1.0) as f32,
        (g * 2.0 - 1.0) as f32,
        (b * 2.0 - 1.0) as f32,
    ]
}

/// Appearance for one identity. `total` is the number of identities across
/// all splits, so hues stay evenly spaced and pairwise distinct;
/// `bg_variation` offsets the background color per identity.
pub fn identity_look(global_id: usize, total: usize, seed: u64, bg_variation: f64) -> Look {
    let mut rng = derive(seed, &format!("identity/{global_id}"));
    let hue = (global_id as f64 + 0.5) / total.max(1) as f64;
    let mut look = Look {
        torso: hsv(hue, 0.85, 0.92),
        pants: hsv(hue + 0.43 + rng.gen_range(0.0..0.08), 0.65, 0.55),
        skin: hsv(0.09 + rng.gen_range(-0.02..0.02), 0.35, rng.gen_range(0.75..0.95)),
        hair: hsv(rng.gen_range(0.02..0.12), 0.75, rng.gen_range(0.1..0.45)),
        background: BACKGROUND_RGB,
        bag: if rng.gen_bool(0.5) {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Some((side, hsv(rng.gen_range(0.0..1.0), 0.9, 0.8)))
        } else {
            None
        },
        torso_hw: rng.gen_range(0.10..0.13),
        head_r: rng.gen_range(0.085..0.105),
        arm_len: rng.gen_range(0.16..0.21),
        leg_len: rng.gen_range(0.20..0.26),
        limb_r: rng.gen_range(0.050..0.065),
    };
    for ch in &mut look.background {
        let off = bg_variation * rng.gen_range(-1.0..1.0);
        *ch = (*ch + off as f32).clamp(-1.0, 1.0);
    }
    look
}

/// Pose `pose_idx` of one identity.
pub fn sample_pose(global_id: usize, pose_idx: usize, seed: u64) -> PoseParams {
    let mut rng = derive(seed, &format!("pose/{global_id}/{pose_idx}"));
    PoseParams {
        tx: rng.gen_range(-0.08..0.08),
        ty: rng.gen_range(-0.04..0.04),
        arm_left: rng.gen_range(0.15..1.25),
        arm_right: rng.gen_range(0.15..1.25),
        leg_left: rng.gen_range(0.05..0.45),
        leg_right: rng.gen_range(0.05..0.45),
        lean: rng.gen_range(-0.12..0.12),
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (dx, dy) = (b.0 - ax, b.1 - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

const BACKGROUND_RGB: [f32; 3] = [-0.82, -0.80, -0.76];

/// Rasterize one figure. Returns the image in `[-1, 1]`, the semantic
/// parsing map, and the binary person mask (non-background union).
pub fn render_person(
    look: &Look,
    pose: &PoseParams,
    height: usize,
    width: usize,
) -> (Array3<f32>, Array2<u8>, Array2<u8>) {
    let mut image = Array3::<f32>::zeros((3, height, width));
    let mut parsing = Array2::<u8>::from_elem((height, width), LABEL_BACKGROUND);

    let cx = 0.5 + pose.tx;
    let hip = (cx, 0.60 + pose.ty);
    let shoulder = (cx + pose.lean * 0.2, hip.1 - 0.22);
    let head_c = (shoulder.0, shoulder.1 - look.head_r - 0.015);
    let arm_dir = |angle: f64, side: f64| (side * angle.sin(), angle.cos());
    let limb_end = |from: (f64, f64), dir: (f64, f64), len: f64| {
        (from.0 + dir.0 * len, from.1 + dir.1 * len)
    };
    let sh_l = (shoulder.0 - look.torso_hw, shoulder.1 + 0.01);
    let sh_r = (shoulder.0 + look.torso_hw, shoulder.1 + 0.01);
    let hip_l = (hip.0 - look.torso_hw * 0.6, hip.1);
    let hip_r = (hip.0 + look.torso_hw * 0.6, hip.1);
    let arm_l_end = limb_end(sh_l, arm_dir(pose.arm_left, -1.0), look.arm_len);
    let arm_r_end = limb_end(sh_r, arm_dir(pose.arm_right, 1.0), look.arm_len);
    let leg_l_end = limb_end(hip_l, arm_dir(pose.leg_left, -1.0), look.leg_len);
    let leg_r_end = limb_end(hip_r, arm_dir(pose.leg_right, 1.0), look.leg_len);
    let bag_c = look
        .bag
        .map(|(side, _)| (hip.0 + side * (look.torso_hw + 0.06), hip.1 - 0.06));

    // Edges get a ~1px analytic anti-aliasing ramp; labels stay hard at the
    // nominal radius (coverage 1/2), so parsing and mask keep crisp boundaries.
    let feather = 0.9 / height.min(width) as f64;
    let cover = |d: f64, r: f64| ((r + 0.5 * feather - d) / feather).clamp(0.0, 1.0);
    let mix = |base: &mut [f32; 3], top: [f32; 3], a: f64| {
        let a = a as f32;
        for c in 0..3 {
            base[c] += (top[c] - base[c]) * a;
        }
    };

    for py in 0..height {
        for px in 0..width {
            let p = ((px as f64 + 0.5) / width as f64, (py as f64 + 0.5) / height as f64);
            // Paint order, later wins: legs, arms, torso, bag, head.
            let mut label = LABEL_BACKGROUND;
            let mut color = look.background;
            let leg_r_width = look.limb_r * 1.25;
            let d = seg_dist(p, hip_l, leg_l_end);
            if d <= leg_r_width {
                label = LABEL_LEG_LEFT;
            }
            mix(&mut color, look.pants, cover(d, leg_r_width));
            let d = seg_dist(p, hip_r, leg_r_end);
            if d <= leg_r_width {
                label = LABEL_LEG_RIGHT;
            }
            mix(&mut color, look.pants, cover(d, leg_r_width));
            let d = seg_dist(p, sh_l, arm_l_end);
            if d <= look.limb_r {
                label = LABEL_ARM_LEFT;
            }
            mix(&mut color, look.skin, cover(d, look.limb_r));
            let d = seg_dist(p, sh_r, arm_r_end);
            if d <= look.limb_r {
                label = LABEL_ARM_RIGHT;
            }
            mix(&mut color, look.skin, cover(d, look.limb_r));
            let d = seg_dist(p, hip, shoulder);
            if d <= look.torso_hw {
                label = LABEL_TORSO;
            }
            mix(&mut color, look.torso, cover(d, look.torso_hw));
            if let (Some(bc), Some((_, bag_color))) = (bag_c, look.bag) {
                let d = ((p.0 - bc.0).powi(2) + (p.1 - bc.1).powi(2)).sqrt();
                if d <= 0.065 {
                    label = LABEL_BAG;
                }
                mix(&mut color, bag_color, cover(d, 0.065));
            }
            let dh = ((p.0 - head_c.0).powi(2) + (p.1 - head_c.1).powi(2)).sqrt();
            if dh <= look.head_r {
                label = LABEL_HEAD;
            }
            // Hair covers the top of the head disc.
            let head_color = if p.1 < head_c.1 - look.head_r * 0.2 {
                look.hair
            } else {
                look.skin
            };
            mix(&mut color, head_color, cover(dh, look.head_r));
            parsing[[py, px]] = label;
            for c in 0..3 {
                image[[c, py, px]] = color[c];
            }
        }
    }
    let mask = mask_from_semantic(&parsing);
    (image, parsing, mask)
}

/// Generate the train and test splits under `root`. Splits use disjoint
/// identity ranges; re-running with the same config rewrites byte-identical
/// files.
pub fn synth_generate(cfg: &SynthConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    let total = cfg.train_identities + cfg.test_identities;
    let splits = [
        ("train", 0..cfg.train_identities),
        ("test", cfg.train_identities..total),
    ];
    for (split, ids) in splits {
        if ids.is_empty() {
            continue;
        }
        let split_dir = root.join(split);
        let mut records = Vec::new();
        for id in ids {
            let look = identity_look(id, total, cfg.seed, cfg.background_variation);
            for pose_idx in 0..cfg.poses_per_identity {
                let pose = sample_pose(id, pose_idx, cfg.seed);
                let (image, parsing, mask) = render_person(&look, &pose, cfg.height, cfg.width);
                let stem = format!("{id:04}_{pose_idx:03}");
                write_record(&split_dir, &stem, &image, &parsing, &mask)?;
                records.push(Record {
                    identity: id as u32,
                    pose: pose_idx as u32,
                    synthetic: false,
                    stem,
                });
            }
        }
        write_manifest(
            &split_dir,
            &Manifest {
                labels: cfg.labels,
                seed: cfg.seed,
                height: cfg.height,
                width: cfg.width,
                records,
            },
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_semantic_onehot;

    #[test]
    fn rendering_is_deterministic() {
        let look = identity_look(3, 10, 42, 0.25);
        let pose = sample_pose(3, 1, 42);
        let (i1, p1, m1) = render_person(&look, &pose, 32, 32);
        let (i2, p2, m2) = render_person(&look, &pose, 32, 32);
        assert_eq!(i1, i2);
        assert_eq!(p1, p2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn figure_is_present_and_labels_in_range() {
        for id in 0..6 {
            let look = identity_look(id, 6, 7, 0.25);
            for pose_idx in 0..3 {
                let pose = sample_pose(id, pose_idx, 7);
                let (_, parsing, mask) = render_person(&look, &pose, 32, 32);
                let fg: usize = mask.iter().map(|&v| v as usize).sum();
                assert!(fg > 60, "id {id} pose {pose_idx}: only {fg} person pixels");
                assert!(fg < 32 * 32 / 2, "figure should not fill the frame");
                encode_semantic_onehot(&parsing, 20, "synthtest").unwrap();
                // Core body parts all appear.
                for l in [LABEL_TORSO, LABEL_HEAD, LABEL_LEG_LEFT, LABEL_LEG_RIGHT] {
                    assert!(
                        parsing.iter().any(|&v| v == l),
                        "id {id} pose {pose_idx}: label {l} missing"
                    );
                }
            }
        }
    }

    #[test]
    fn poses_differ_and_identities_differ() {
        let look = identity_look(0, 4, 9, 0.25);
        let (a, ..) = render_person(&look, &sample_pose(0, 0, 9), 32, 32);
        let (b, ..) = render_person(&look, &sample_pose(0, 1, 9), 32, 32);
        assert_ne!(a, b, "two poses of one identity must differ");
        let other = identity_look(1, 4, 9, 0.25);
        let (c, ..) = render_person(&other, &sample_pose(0, 0, 9), 32, 32);
        assert_ne!(a, c, "two identities in one pose must differ");
        // Torso colors are well separated between adjacent identities.
        let da: f32 = look
            .torso
            .iter()
            .zip(other.torso.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(da > 0.2, "adjacent torso colors too close: {da}");
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let mut cfg = SynthConfig::default();
        cfg.labels = 17;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.poses_per_identity = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.background_variation = 0.7;
        assert!(cfg.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }

    #[test]
    fn background_varies_per_identity_but_not_per_pose() {
        let bg_of = |look: &Look| {
            let (image, parsing, _) = render_person(look, &sample_pose(0, 0, 11), 32, 32);
            let (y, x) = (0, 0);
            assert_eq!(parsing[[y, x]], LABEL_BACKGROUND, "corner should be background");
            [image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]]
        };
        let a = identity_look(0, 4, 11, 0.25);
        let b = identity_look(1, 4, 11, 0.25);
        assert_ne!(bg_of(&a), bg_of(&b), "identities should get distinct backgrounds");
        // All poses of one identity share its background.
        let (img2, parsing2, _) = render_person(&a, &sample_pose(0, 1, 11), 32, 32);
        assert_eq!(parsing2[[0, 0]], LABEL_BACKGROUND);
        assert_eq!(bg_of(&a)[0], img2[[0, 0, 0]]);
        // Zero variation pins the background exactly.
        let c = identity_look(0, 4, 11, 0.0);
        let d = identity_look(1, 4, 11, 0.0);
        assert_eq!(bg_of(&c), bg_of(&d));
    }
}
