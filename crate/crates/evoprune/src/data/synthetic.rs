//! Seed-deterministic synthetic datasets: gaussian-blob classes for quick
//! tests and a seven-segment digit renderer for the desk-scale experiments.

use super::Split;
use crate::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Blobs,
    Digits,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    /// Sample counts per split.
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    #[serde(default = "default_one")]
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Additive gaussian pixel noise (sigma on the [0, 1] scale).
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_one() -> usize {
    1
}

fn default_noise() -> f64 {
    0.1
}

/// Segment order: top, top-left, top-right, middle, bottom-left,
/// bottom-right, bottom.
const DIGIT_SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, false, true, true, true],    // 0
    [false, false, true, false, false, true, false], // 1
    [true, false, true, true, true, false, true],   // 2
    [true, false, true, true, false, true, true],   // 3
    [false, true, true, true, false, true, false],  // 4
    [true, true, false, true, false, true, true],   // 5
    [true, true, false, true, true, true, true],    // 6
    [true, false, true, false, false, true, false], // 7
    [true, true, true, true, true, true, true],     // 8
    [true, true, true, true, false, true, true],    // 9
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(
                "synthetic spec needs positive classes/channels/height/width".into(),
            ));
        }
        if self.noise < 0.0 {
            return Err(Error::InvalidArgument("noise must be nonnegative".into()));
        }
        match self.kind {
            SyntheticKind::Digits => {
                if self.classes > 10 {
                    return Err(Error::InvalidArgument("digits has at most 10 classes".into()));
                }
                if self.channels != 1 {
                    return Err(Error::InvalidArgument("digits is single channel".into()));
                }
                if self.height < 14 || self.width < 10 {
                    return Err(Error::InvalidArgument(
                        "digits needs at least 14x10 pixels".into(),
                    ));
                }
            }
            SyntheticKind::Blobs => {}
        }
        Ok(())
    }

    /// Renders the requested split. Labels cycle through the classes so every
    /// split is balanced; all styling choices come from the seeded stream.
    pub fn generate(&self, split: Split) -> Result<(Tensor, Vec<usize>)> {
        self.validate()?;
        let n = match split {
            Split::Train => self.train,
            Split::Test => self.test,
        };
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(match split {
            Split::Train => 0,
            Split::Test => 1,
        });

        let stride = self.channels * self.height * self.width;
        let mut images = vec![0.0; n * stride];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % self.classes;
            labels.push(label);
            let image = &mut images[i * stride..(i + 1) * stride];
            match self.kind {
                SyntheticKind::Digits => self.render_digit(label, image, &mut rng),
                SyntheticKind::Blobs => self.render_blob(label, image, &mut rng),
            }
        }
        let tensor = Tensor::from_vec(&[n, self.channels, self.height, self.width], images)?;
        Ok((tensor, labels))
    }

    fn render_digit(&self, digit: usize, image: &mut [f64], rng: &mut ChaCha8Rng) {
        let (h, w) = (self.height, self.width);
        let gh = rng.gen_range(h.saturating_sub(6).max(10)..=h.saturating_sub(4).max(11));
        let gw = rng.gen_range(6..=(w.saturating_sub(4)).max(6).min(9));
        let t = 2usize;
        let oy = rng.gen_range(0..=h - gh);
        let ox = rng.gen_range(0..=w - gw);
        let fg: f64 = rng.gen_range(0.6..1.0);

        let mid = (gh - t) / 2;
        let segs = DIGIT_SEGMENTS[digit];
        let mut set = |y: usize, x: usize| {
            if y < gh && x < gw {
                image[(oy + y) * w + (ox + x)] = fg;
            }
        };
        // horizontal: top, middle, bottom
        for x in 0..gw {
            for dy in 0..t {
                if segs[0] {
                    set(dy, x);
                }
                if segs[3] {
                    set(mid + dy, x);
                }
                if segs[6] {
                    set(gh - t + dy, x);
                }
            }
        }
        // vertical: upper pair then lower pair
        for y in 0..mid + t {
            for dx in 0..t {
                if segs[1] {
                    set(y, dx);
                }
                if segs[2] {
                    set(y, gw - t + dx);
                }
            }
        }
        for y in mid..gh {
            for dx in 0..t {
                if segs[4] {
                    set(y, dx);
                }
                if segs[5] {
                    set(y, gw - t + dx);
                }
            }
        }

        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).unwrap();
            for v in image.iter_mut() {
                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }

    fn render_blob(&self, label: usize, image: &mut [f64], rng: &mut ChaCha8Rng) {
        let (h, w) = (self.height, self.width);
        // Class templates are derived from the seed alone so train and test
        // share them; only the per-image noise differs.
        let mut template_rng = ChaCha8Rng::seed_from_u64(self.seed);
        template_rng.set_stream(1000 + label as u64);
        for ch in 0..self.channels {
            let cy: f64 = template_rng.gen_range(0.2..0.8) * h as f64;
            let cx: f64 = template_rng.gen_range(0.2..0.8) * w as f64;
            let sigma: f64 = template_rng.gen_range(0.15..0.35) * h as f64;
            let amp: f64 = template_rng.gen_range(0.5..0.9);
            let base = ch * h * w;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    image[base + y * w + x] = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).unwrap();
            for v in image.iter_mut() {
                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
}
