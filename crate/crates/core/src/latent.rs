//! Exact space-to-depth latentizer.
//!
//! Stands in for a learned video VAE: frames are stacked in pairs along the
//! channel axis and spatial patches folded into channels, giving a bijective
//! (losslessly invertible) latent rearrangement.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VideoTensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Latentizer {
    /// Frames stacked per latent frame.
    pub temporal_factor: usize,
    /// Side length of the spatial patch folded into channels.
    pub spatial_factor: usize,
}

impl Default for Latentizer {
    fn default() -> Self {
        Self {
            temporal_factor: 2,
            spatial_factor: 4,
        }
    }
}

impl Latentizer {
    /// Latent shape for a (frames, c, h, w) input.
    pub fn latent_dim(&self, video_dim: (usize, usize, usize, usize)) -> (usize, usize, usize, usize) {
        let (f, c, h, w) = video_dim;
        let (tf, sf) = (self.temporal_factor, self.spatial_factor);
        (f / tf, c * tf * sf * sf, h / sf, w / sf)
    }

    fn check(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        let (f, _, h, w) = dim;
        if f % self.temporal_factor != 0 || h % self.spatial_factor != 0 || w % self.spatial_factor != 0 {
            return Err(Error::InvalidShape(format!(
                "video dims ({f},_,{h},{w}) not divisible by factors ({}, {})",
                self.temporal_factor, self.spatial_factor
            )));
        }
        Ok(())
    }

    /// Rearranges (F, C, H, W) into (F/tf, C*tf*sf*sf, H/sf, W/sf).
    ///
    /// Channel layout of the latent: index = ((dt * C + c) * sf + dy) * sf + dx
    /// where dt is the frame offset within the stack and (dy, dx) the pixel
    /// offset within the spatial patch.
    pub fn encode(&self, video: &VideoTensor) -> Result<Array4<f32>> {
        self.check(video.dim())?;
        let (f, c, h, w) = video.dim();
        let (tf, sf) = (self.temporal_factor, self.spatial_factor);
        let (lf, lc, lh, lw) = self.latent_dim(video.dim());
        let src = video.data();
        let mut out = Array4::zeros((lf, lc, lh, lw));
        for t in 0..f {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let lt = t / tf;
                        let dt = t % tf;
                        let (ly, dy) = (y / sf, y % sf);
                        let (lx, dx) = (x / sf, x % sf);
                        let lch = ((dt * c + ch) * sf + dy) * sf + dx;
                        out[[lt, lch, ly, lx]] = src[[t, ch, y, x]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact inverse of [`encode`](Self::encode).
    pub fn decode(&self, latent: &Array4<f32>, channels: usize) -> Result<VideoTensor> {
        let (lf, lc, lh, lw) = latent.dim();
        let (tf, sf) = (self.temporal_factor, self.spatial_factor);
        if lc != channels * tf * sf * sf {
            return Err(Error::InvalidShape(format!(
                "latent channel count {lc} does not match {} for {channels} video channels",
                channels * tf * sf * sf
            )));
        }
        let (f, h, w) = (lf * tf, lh * sf, lw * sf);
        let mut out = Array4::zeros((f, channels, h, w));
        for lt in 0..lf {
            for lch in 0..lc {
                for ly in 0..lh {
                    for lx in 0..lw {
                        let dx = lch % sf;
                        let dy = (lch / sf) % sf;
                        let ch = (lch / (sf * sf)) % channels;
                        let dt = lch / (sf * sf * channels);
                        out[[lt * tf + dt, ch, ly * sf + dy, lx * sf + dx]] =
                            latent[[lt, lch, ly, lx]];
                    }
                }
            }
        }
        VideoTensor::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(seed: u64, dim: (usize, usize, usize, usize)) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::new(Array4::from_shape_fn(dim, |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn default_shape_arithmetic() {
        let lat = Latentizer::default();
        assert_eq!(lat.latent_dim((8, 3, 32, 32)), (4, 96, 8, 8));
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let lat = Latentizer::default();
        let video = random_video(3, (8, 3, 32, 32));
        let z = lat.encode(&video).unwrap();
        assert_eq!(z.dim(), (4, 96, 8, 8));
        let back = lat.decode(&z, 3).unwrap();
        assert_eq!(back.data(), video.data());
    }

    #[test]
    fn per_element_mapping_matches_index_oracle() {
        let lat = Latentizer::default();
        let video = random_video(5, (4, 3, 8, 8));
        let z = lat.encode(&video).unwrap();
        let (f, c, h, w) = video.dim();
        // explicit index loop, written independently of encode()
        for t in 0..f {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let lch = ((t % 2) * c + ch) * 16 + (y % 4) * 4 + (x % 4);
                        assert_eq!(
                            z[[t / 2, lch, y / 4, x / 4]],
                            video.data()[[t, ch, y, x]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn divisibility_violation_rejected() {
        let lat = Latentizer::default();
        let video = random_video(7, (7, 3, 32, 32));
        assert!(lat.encode(&video).is_err());
    }
}
