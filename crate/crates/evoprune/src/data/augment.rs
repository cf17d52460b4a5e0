//! Training-time augmentation: pad-and-random-crop plus horizontal flip.
//! Labels are never touched; with every flag off the batch passes through
//! unchanged.

use crate::{Error, Result, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Zero-pad this many pixels on every side, then crop back at a random
    /// offset.
    #[serde(default)]
    pub pad_crop: Option<usize>,
    /// Probability of mirroring an image left-right.
    #[serde(default)]
    pub hflip_prob: f64,
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            pad_crop: None,
            hflip_prob: 0.0,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.pad_crop.is_none() && self.hflip_prob == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidArgument(format!(
                "hflip_prob {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        Ok(())
    }
}

/// Applies the policy image by image; output shape equals input shape.
pub fn augment(batch: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Tensor> {
    policy.validate()?;
    if policy.is_disabled() {
        return Ok(batch.clone());
    }
    let [c, h, w] = batch.chw()?;
    let n = batch.batch();
    let mut out = batch.clone();
    let stride = c * h * w;

    for img in 0..n {
        let range = img * stride..(img + 1) * stride;
        if let Some(pad) = policy.pad_crop {
            let dy = rng.gen_range(0..=2 * pad);
            let dx = rng.gen_range(0..=2 * pad);
            let src: Vec<f64> = out.data()[range.clone()].to_vec();
            let dst = &mut out.data_mut()[range.clone()];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        // Position in the padded canvas this output pixel reads.
                        let py = y as isize + dy as isize - pad as isize;
                        let px = x as isize + dx as isize - pad as isize;
                        let v = if py >= 0 && py < h as isize && px >= 0 && px < w as isize {
                            src[ch * h * w + py as usize * w + px as usize]
                        } else {
                            0.0
                        };
                        dst[ch * h * w + y * w + x] = v;
                    }
                }
            }
        }
        if policy.hflip_prob > 0.0 && rng.gen_bool(policy.hflip_prob) {
            let dst = &mut out.data_mut()[range];
            for ch in 0..c {
                for y in 0..h {
                    let row = ch * h * w + y * w;
                    dst[row..row + w].reverse();
                }
            }
        }
    }
    Ok(out)
}
