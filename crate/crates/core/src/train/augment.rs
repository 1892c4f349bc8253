use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::error::{Error, Result};

/// Per-channel `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population statistics over every pixel of `samples`.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a SamplePair>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in samples {
            if sum.is_empty() {
                sum = vec![0.0; s.channels];
                sq = vec![0.0; s.channels];
            }
            if s.channels != sum.len() {
                return Err(Error::shape("normalization", "samples disagree on channel count"));
            }
            let plane = s.height * s.width;
            for c in 0..s.channels {
                for &v in &s.image[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("cannot fit normalization on no pixels".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, s: &mut SamplePair) {
        let plane = s.height * s.width;
        for c in 0..s.channels {
            let (m, sd) = (self.mean[c] as f32, self.std[c] as f32);
            for v in &mut s.image[c * plane..(c + 1) * plane] {
                *v = (*v - m) / sd;
            }
        }
    }
}

/// Geometric augmentation of one sample: `quarter_turns` counter-clockwise
/// quarter turns, then optional horizontal and vertical flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentDraw {
    /// Rotation uniform over four angles, each flip with probability ½, all independent.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            quarter_turns: rng.gen_range(0..4),
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
        }
    }

    /// Destination of source pixel `(i, j)` in an `n × n` grid.
    pub fn map(&self, i: usize, j: usize, n: usize) -> (usize, usize) {
        let (mut i, mut j) = (i, j);
        for _ in 0..self.quarter_turns {
            (i, j) = (n - 1 - j, i);
        }
        if self.hflip {
            j = n - 1 - j;
        }
        if self.vflip {
            i = n - 1 - i;
        }
        (i, j)
    }

    /// Move pixels of image and mask alike; no interpolation.
    pub fn apply(&self, s: &SamplePair) -> Result<SamplePair> {
        if s.height != s.width {
            return Err(Error::InvalidArgument(format!(
                "augmentation needs square samples, {} is {}x{}",
                s.id, s.height, s.width
            )));
        }
        let n = s.height;
        let plane = n * n;
        let mut out = s.clone();
        for i in 0..n {
            for j in 0..n {
                let (di, dj) = self.map(i, j, n);
                let (src, dst) = (i * n + j, di * n + dj);
                out.mask[dst] = s.mask[src];
                for c in 0..s.channels {
                    out.image[c * plane + dst] = s.image[c * plane + src];
                }
            }
        }
        Ok(out)
    }
}

/// Draw a transform, apply it, then normalize the image.
pub fn augment_pair<R: Rng + ?Sized>(s: &SamplePair, rng: &mut R, norm: &Normalization) -> Result<SamplePair> {
    let mut out = AugmentDraw::sample(rng).apply(s)?;
    norm.apply(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> SamplePair {
        let image = (0..2 * n * n).map(|p| p as f32).collect();
        let mask = (0..n * n).map(|p| p as u8).collect();
        SamplePair::new("s", 2, n, n, image, mask).unwrap()
    }

    #[test]
    fn half_turn_with_both_flips_is_identity() {
        let s = sample(5);
        let d = AugmentDraw {
            quarter_turns: 2,
            hflip: true,
            vflip: true,
        };
        assert_eq!(d.apply(&s).unwrap(), s);
    }

    #[test]
    fn quarter_turn_moves_top_left_to_bottom_left() {
        let d = AugmentDraw {
            quarter_turns: 1,
            ..Default::default()
        };
        assert_eq!(d.map(0, 0, 4), (3, 0));
        let s = sample(4);
        let r = d.apply(&s).unwrap();
        assert_eq!(r.mask[12], s.mask[0]);
        assert_eq!(r.image[16 + 12], s.image[16]);
    }

    #[test]
    fn non_square_rejected() {
        let s = SamplePair::new("r", 1, 2, 3, vec![0.0; 6], vec![0; 6]).unwrap();
        assert!(AugmentDraw::default().apply(&s).is_err());
    }

    #[test]
    fn normalization_centres_channels() {
        let s = sample(4);
        let norm = Normalization::fit([&s]).unwrap();
        let mut t = s.clone();
        norm.apply(&mut t);
        for c in 0..2 {
            let ch = &t.image[c * 16..(c + 1) * 16];
            let m: f32 = ch.iter().sum::<f32>() / 16.0;
            let v: f32 = ch.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / 16.0;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4);
        }
    }
}
